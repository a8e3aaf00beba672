//! Branch-Train-Merge over difficulty tiers.
//!
//! Every iteration branches one expert per tier (from its seed the first time,
//! afterwards from the previous expert's branch-step checkpoint), trains the
//! experts as isolated jobs on a worker pool and merges the results serially.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::budget::{verify_budget, BudgetError, BudgetPlan};
use crate::corpus::{batch_iterator, CorpusError, DifficultyTier, TokenId};
use crate::ensemble::{DomainPrior, EnsembleError};
use crate::tinylm::{
    init_model, train, CheckpointError, ExpertCheckpoint, ExpertConfig, LineageEntry, TrainError, TrainSchedule,
};

pub const MANIFEST_FILE: &str = "forest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
/// Fraction of an iteration after which the branch checkpoint is taken
/// (400 of 600 steps at reference scale).
pub const DEFAULT_BRANCH_RATIO: f64 = 2.0 / 3.0;

#[derive(Debug, Error)]
pub enum BtmError {
    #[error("no seed checkpoint for the {0} tier")]
    MissingSeed(DifficultyTier),
    #[error("no expert from the previous iteration for the {0} tier")]
    MissingTierExpert(DifficultyTier),
    #[error("two trained experts for the {0} tier")]
    DuplicateTier(DifficultyTier),
    #[error("no trained expert for the {0} tier")]
    MissingTier(DifficultyTier),
    #[error("{tier} expert branched from {actual}, expected {expected}")]
    LineageMismatch {
        tier: DifficultyTier,
        expected: String,
        actual: String,
    },
    #[error("{} of the iteration's training jobs failed: {}", .failures.len(), summarize(.failures))]
    TrainingFailed {
        failures: Vec<(DifficultyTier, JobError)>,
        completed: Vec<TrainedExpert>,
    },
    #[error("seed model for {config_desc} failed to pretrain: {source}")]
    Pretraining {
        config_desc: String,
        #[source]
        source: TrainError,
    },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("invalid forest manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prior(#[from] EnsembleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("forest manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Why a single training job failed.
#[derive(Debug, Error)]
pub enum JobError {
    #[error("training data: {0}")]
    Data(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn summarize(failures: &[(DifficultyTier, JobError)]) -> String {
    failures.iter().map(|(t, e)| format!("{t}: {e}")).collect::<Vec<_>>().join("; ")
}

pub type Result<T, E = BtmError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BtmError + '_ {
    move |source| BtmError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtmSettings {
    /// Template schedule; each expert stretches it to its planned step count.
    pub domain_schedule: TrainSchedule,
    pub branch_ratio: f64,
    /// Root of every per-job data seed.
    pub base_seed: u64,
}

impl BtmSettings {
    pub fn branch_step(&self, iterations: usize) -> usize {
        ((self.branch_ratio * iterations as f64).round() as usize).clamp(1, iterations.max(1))
    }
}

/// Data seed of one (iteration, tier) job, independent of scheduling.
pub fn job_seed(base_seed: u64, iteration: usize, tier: DifficultyTier) -> u64 {
    let digest = Sha256::digest(format!("{base_seed}/{iteration}/{tier}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertRecord {
    pub domain: String,
    /// Checkpoint training started from.
    pub parent: String,
    pub branch: String,
    pub branch_step: usize,
    #[serde(rename = "final")]
    pub final_id: String,
    pub iterations: usize,
    pub train_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub index: usize,
    pub experts: BTreeMap<DifficultyTier, ExpertRecord>,
}

impl IterationRecord {
    pub fn domain_row(&self) -> BTreeMap<DifficultyTier, &str> {
        self.experts.iter().map(|(t, r)| (*t, r.domain.as_str())).collect()
    }
}

/// A tier's training data for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDomain {
    pub name: String,
    pub tokens: Vec<TokenId>,
}

/// Everything one isolated training job needs.
#[derive(Debug, Clone)]
pub struct TrainJob {
    pub tier: DifficultyTier,
    pub iteration: usize,
    pub domain: TrainingDomain,
    pub start: ExpertCheckpoint,
    pub schedule: TrainSchedule,
    pub branch_step: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedExpert {
    pub tier: DifficultyTier,
    pub iteration: usize,
    pub domain: String,
    pub parent: String,
    pub branch: ExpertCheckpoint,
    pub last: ExpertCheckpoint,
    pub train_seed: u64,
    pub losses: Vec<f64>,
}

/// Trains one expert. A pure function of the job.
pub fn run_job(job: &TrainJob) -> Result<TrainedExpert, JobError> {
    let parent = job.start.id().to_string();
    let start = if job.start.config().tier == Some(job.tier) {
        job.start.clone()
    } else {
        job.start.relabel(Some(job.tier))
    };
    let data = batch_iterator(&job.domain.tokens, start.config().seq_len, job.schedule.batch_size, job.seed)?;
    let entry = LineageEntry {
        iteration: job.iteration,
        domain: job.domain.name.clone(),
        parent: parent.clone(),
    };
    let outcome = train(&start, data, &job.schedule, &BTreeSet::from([job.branch_step]), Some(entry))?;
    let branch = outcome
        .at_step(job.branch_step)
        .expect("branch step is within the schedule")
        .clone();
    Ok(TrainedExpert {
        tier: job.tier,
        iteration: job.iteration,
        domain: job.domain.name.clone(),
        parent,
        branch,
        last: outcome.last().clone(),
        train_seed: job.seed,
        losses: outcome.losses,
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| BtmError::Pool(e.to_string()))
}

/// Pretrains one seed per distinct architecture in the plan on the shared
/// pretraining corpus. Tiers with equal architectures share their seed.
pub fn pretrain_seeds(
    plan: &BudgetPlan,
    pretrain_tokens: &[TokenId],
    schedule: &TrainSchedule,
    init_seed: u64,
    data_seed: u64,
    workers: usize,
) -> Result<BTreeMap<DifficultyTier, ExpertCheckpoint>> {
    let mut distinct: Vec<ExpertConfig> = Vec::new();
    for a in plan.assignments.values() {
        let c = a.config.clone().with_tier(None);
        if !distinct.contains(&c) {
            distinct.push(c);
        }
    }
    for c in &distinct {
        batch_iterator(pretrain_tokens, c.seq_len, schedule.batch_size, data_seed)?;
    }
    let trained: Vec<Result<ExpertCheckpoint>> = pool(workers)?.install(|| {
        distinct
            .par_iter()
            .map(|c| {
                let start = ExpertCheckpoint::new(c.clone(), init_model(c, init_seed), 0, vec![]);
                let data = batch_iterator(pretrain_tokens, c.seq_len, schedule.batch_size, data_seed)?;
                train(&start, data, schedule, &BTreeSet::new(), None)
                    .map(|o| o.last().clone())
                    .map_err(|source| BtmError::Pretraining {
                        config_desc: describe(c),
                        source,
                    })
            })
            .collect()
    });
    let trained: Vec<ExpertCheckpoint> = trained.into_iter().collect::<Result<_>>()?;
    Ok(plan
        .assignments
        .iter()
        .map(|(t, a)| {
            let c = a.config.clone().with_tier(None);
            let i = distinct.iter().position(|d| *d == c).expect("config collected above");
            (*t, trained[i].clone())
        })
        .collect())
}

fn describe(c: &ExpertConfig) -> String {
    format!(
        "hidden {} / ffn {} / {} heads / {} layers",
        c.hidden_size, c.intermediate_size, c.num_heads, c.num_layers
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub plan: BudgetPlan,
    pub prior: DomainPrior,
    pub settings: BtmSettings,
    pub seeds: BTreeMap<DifficultyTier, ExpertCheckpoint>,
    pub experts: BTreeMap<DifficultyTier, ExpertCheckpoint>,
    /// Branch-step checkpoints of the latest iteration.
    pub branch_points: BTreeMap<DifficultyTier, ExpertCheckpoint>,
    pub history: Vec<IterationRecord>,
}

impl Forest {
    pub fn new(
        plan: BudgetPlan,
        seeds: BTreeMap<DifficultyTier, ExpertCheckpoint>,
        prior: DomainPrior,
        settings: BtmSettings,
    ) -> Result<Self> {
        let report = verify_budget(&plan)?;
        if !report.pass {
            return Err(BudgetError::BudgetViolation(Box::new(report)).into());
        }
        prior.log_values(plan.assignments.len())?;
        for (tier, a) in &plan.assignments {
            let seed = seeds.get(tier).ok_or(BtmError::MissingSeed(*tier))?;
            if !seed.config().same_architecture(&a.config) {
                return Err(BtmError::Manifest(format!("{tier} seed does not match the planned model size")));
            }
        }
        Ok(Self {
            plan,
            prior,
            settings,
            seeds,
            experts: BTreeMap::new(),
            branch_points: BTreeMap::new(),
            history: Vec::new(),
        })
    }

    /// Completed BTM iterations.
    pub fn iteration(&self) -> usize {
        self.history.len()
    }

    /// Ensemble members in tier order.
    pub fn members(&self) -> Vec<&ExpertCheckpoint> {
        self.experts.values().collect()
    }

    pub fn member_names(&self) -> Vec<String> {
        self.experts.keys().map(|t| t.to_string()).collect()
    }

    /// Starting checkpoint for `tier` in the next iteration.
    pub fn branch(&self, tier: DifficultyTier) -> Result<&ExpertCheckpoint> {
        if self.history.is_empty() {
            self.seeds.get(&tier).ok_or(BtmError::MissingSeed(tier))
        } else {
            self.branch_points.get(&tier).ok_or(BtmError::MissingTierExpert(tier))
        }
    }

    /// One job per planned tier for the next iteration.
    pub fn prepare_jobs(&self, domain_row: &BTreeMap<DifficultyTier, TrainingDomain>) -> Result<Vec<TrainJob>> {
        let iteration = self.iteration() + 1;
        self.plan
            .assignments
            .iter()
            .map(|(&tier, a)| {
                let domain = domain_row.get(&tier).ok_or(BtmError::MissingTier(tier))?;
                let start = self.branch(tier)?.clone();
                Ok(TrainJob {
                    tier,
                    iteration,
                    domain: domain.clone(),
                    start,
                    schedule: self.settings.domain_schedule.with_total_steps(a.iterations),
                    branch_step: self.settings.branch_step(a.iterations),
                    seed: job_seed(self.settings.base_seed, iteration, tier),
                })
            })
            .collect()
    }

    /// Trains every tier of the next iteration on `workers` threads and merges.
    /// A failing job does not stop its siblings.
    pub fn train_iteration(
        &self,
        domain_row: &BTreeMap<DifficultyTier, TrainingDomain>,
        workers: usize,
    ) -> Result<Forest> {
        let jobs = self.prepare_jobs(domain_row)?;
        let results: Vec<Result<TrainedExpert, JobError>> =
            pool(workers)?.install(|| jobs.par_iter().map(run_job).collect());
        let mut completed = Vec::new();
        let mut failures = Vec::new();
        for (job, r) in jobs.iter().zip(results) {
            match r {
                Ok(t) => completed.push(t),
                Err(e) => failures.push((job.tier, e)),
            }
        }
        if !failures.is_empty() {
            return Err(BtmError::TrainingFailed { failures, completed });
        }
        self.merge(completed)
    }

    /// Replaces every tier's expert with its newly trained one.
    pub fn merge(&self, trained: Vec<TrainedExpert>) -> Result<Forest> {
        let iteration = self.iteration() + 1;
        let mut by_tier = BTreeMap::new();
        for t in trained {
            let tier = t.tier;
            if by_tier.insert(tier, t).is_some() {
                return Err(BtmError::DuplicateTier(tier));
            }
        }
        for &tier in self.plan.assignments.keys() {
            let t = by_tier.get(&tier).ok_or(BtmError::MissingTier(tier))?;
            let expected = self.branch(tier).map_err(|_| BtmError::MissingTierExpert(tier))?.id();
            let recorded = t.last.lineage().last().filter(|e| e.iteration == iteration);
            let actual = recorded.map(|e| e.parent.as_str()).unwrap_or("<none>");
            if actual != expected || t.parent != expected || t.last.lineage().len() != iteration {
                return Err(BtmError::LineageMismatch {
                    tier,
                    expected: expected.to_string(),
                    actual: actual.to_string(),
                });
            }
        }
        if let Some(extra) = by_tier.keys().find(|t| !self.plan.assignments.contains_key(t)) {
            return Err(BtmError::Manifest(format!("{extra} tier is not in the plan")));
        }

        let mut next = self.clone();
        let mut record = IterationRecord {
            index: iteration,
            experts: BTreeMap::new(),
        };
        for (tier, t) in by_tier {
            record.experts.insert(
                tier,
                ExpertRecord {
                    domain: t.domain,
                    parent: t.parent,
                    branch: t.branch.id().to_string(),
                    branch_step: t.branch.step(),
                    final_id: t.last.id().to_string(),
                    iterations: t.last.step(),
                    train_seed: t.train_seed,
                },
            );
            next.branch_points.insert(tier, t.branch);
            next.experts.insert(tier, t.last);
        }
        next.history.push(record);
        Ok(next)
    }

    /// Writes all checkpoints under `dir/checkpoints` and the manifest to
    /// `dir/forest.json`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let ckpt_dir = dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
        let store = |m: &BTreeMap<DifficultyTier, ExpertCheckpoint>| -> Result<BTreeMap<DifficultyTier, String>> {
            m.iter()
                .map(|(t, c)| {
                    c.save(&ckpt_dir)?;
                    Ok((*t, format!("{CHECKPOINT_DIR}/{}.ckpt", c.id())))
                })
                .collect()
        };
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            scenario: self.plan.scenario.to_string(),
            plan: self.plan.clone(),
            prior: self.prior.clone(),
            settings: self.settings.clone(),
            seeds: store(&self.seeds)?,
            experts: store(&self.experts)?,
            branch_points: store(&self.branch_points)?,
            history: self.history.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Loads a manifest (or a directory containing one), verifying every
    /// checkpoint hash and the lineage recorded in the history.
    pub fn load(path: &Path) -> Result<Forest> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = path.parent().unwrap_or(Path::new("."));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(BtmError::Manifest(format!("unknown format `{}`", manifest.format)));
        }
        let fetch = |m: &BTreeMap<DifficultyTier, String>| -> Result<BTreeMap<DifficultyTier, ExpertCheckpoint>> {
            m.iter()
                .map(|(t, p)| Ok((*t, ExpertCheckpoint::load(&root.join(p))?)))
                .collect()
        };
        let forest = Forest {
            plan: manifest.plan,
            prior: manifest.prior,
            settings: manifest.settings,
            seeds: fetch(&manifest.seeds)?,
            experts: fetch(&manifest.experts)?,
            branch_points: fetch(&manifest.branch_points)?,
            history: manifest.history,
        };
        forest.check_lineage()?;
        Ok(forest)
    }

    /// Every expert's lineage must follow the history: iteration k started
    /// from the seed (k = 1) or from the branch checkpoint of iteration k−1.
    pub fn check_lineage(&self) -> Result<()> {
        for (k, record) in self.history.iter().enumerate() {
            for (tier, r) in &record.experts {
                let expected = if k == 0 {
                    self.seeds.get(tier).ok_or(BtmError::MissingSeed(*tier))?.id().to_string()
                } else {
                    self.history[k - 1]
                        .experts
                        .get(tier)
                        .ok_or(BtmError::MissingTierExpert(*tier))?
                        .branch
                        .clone()
                };
                if r.parent != expected {
                    return Err(BtmError::LineageMismatch {
                        tier: *tier,
                        expected,
                        actual: r.parent.clone(),
                    });
                }
            }
        }
        if let Some(last) = self.history.last() {
            for (tier, r) in &last.experts {
                let expert = self.experts.get(tier).ok_or(BtmError::MissingTierExpert(*tier))?;
                let parents: Vec<&str> = expert.lineage().iter().map(|e| e.parent.as_str()).collect();
                let recorded: Vec<&str> = self.history.iter().map(|h| h.experts[tier].parent.as_str()).collect();
                if expert.id() != r.final_id || parents != recorded {
                    return Err(BtmError::LineageMismatch {
                        tier: *tier,
                        expected: r.final_id.clone(),
                        actual: expert.id().to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

const MANIFEST_FORMAT: &str = "elmforest-forest-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    scenario: String,
    plan: BudgetPlan,
    prior: DomainPrior,
    settings: BtmSettings,
    seeds: BTreeMap<DifficultyTier, String>,
    experts: BTreeMap<DifficultyTier, String>,
    branch_points: BTreeMap<DifficultyTier, String>,
    history: Vec<IterationRecord>,
}
