//! Config-driven pipeline: plan, pretrain seeds, classify domains, run BTM
//! iterations and evaluate. Every step reads and writes artifacts under the
//! configured output directory so steps can run in separate processes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::btm::{pretrain_seeds, BtmError, BtmSettings, Forest, TrainingDomain, DEFAULT_BRANCH_RATIO};
use crate::budget::{
    make_plan, verify_budget, BudgetError, BudgetPlan, BudgetReport, PlanOptions, Scenario, DEFAULT_GRANULARITY,
    DEFAULT_TOLERANCE,
};
use crate::corpus::{
    classify_difficulty, split, CorpusError, CorpusSplit, DifficultyTier, DomainCorpus, DomainRegistry, SplitSpec,
    TokenId,
};
use crate::ensemble::{document_perplexity, documents, DomainPrior, EnsembleError};
use crate::evalreport::{evaluate_forest, DomainKind, EvalDomain, EvalOptions, EvalResult, EvalStep, ReportError};
use crate::tinylm::{CheckpointError, ExpertCheckpoint, ExpertConfig, ModelError, TrainSchedule};

pub const PLAN_FILE: &str = "plan.json";
pub const SEEDS_DIR: &str = "seeds";
pub const SEEDS_FILE: &str = "seeds.json";
pub const DIFFICULTY_FILE: &str = "difficulty.json";
pub const FORESTS_DIR: &str = "forests";
pub const RESULTS_FILE: &str = "results.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("config {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("missing {what} at {path}; {hint}")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        hint: &'static str,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Btm(#[from] BtmError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_branch_ratio() -> f64 {
    DEFAULT_BRANCH_RATIO
}
fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}
fn default_granularity() -> usize {
    DEFAULT_GRANULARITY
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_document_len() -> Option<usize> {
    Some(128)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedConfig {
    /// Parameter initialization of the seed models.
    pub init: u64,
    /// Batch sampling during pretraining.
    pub pretrain_data: u64,
    /// Root of the per-(iteration, tier) training seeds.
    pub btm: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            init: 0,
            pretrain_data: 1,
            btm: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Posterior reset interval in tokens; absent means one sequence per domain.
    #[serde(default = "default_document_len")]
    pub document_len: Option<usize>,
    pub eval_step: EvalStep,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            document_len: default_document_len(),
            eval_step: EvalStep::Final,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub setup: String,
    pub scenario: Scenario,
    /// Steps of the moderate tier; the others are solved from the budget.
    pub iter_m: usize,
    #[serde(default = "default_branch_ratio")]
    pub branch_ratio: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_granularity")]
    pub granularity: usize,
    /// Domain registry (JSON); relative to the config file.
    pub registry: PathBuf,
    /// Seed pretraining text; defaults to the trained domains' train splits.
    #[serde(default)]
    pub pretrain_corpus: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Reference model size of each tier.
    pub tiers: BTreeMap<DifficultyTier, ExpertConfig>,
    pub pretrain: TrainSchedule,
    /// Domain-training template; derived from `pretrain` when absent.
    #[serde(default)]
    pub domain: Option<TrainSchedule>,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub prior: DomainPrior,
    /// Domain of each tier per BTM iteration. Derived from seed perplexities
    /// when empty.
    #[serde(default)]
    pub rows: Vec<BTreeMap<DifficultyTier, String>>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|source| ExperimentError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn domain_schedule(&self) -> TrainSchedule {
        self.domain.clone().unwrap_or_else(|| TrainSchedule::domain_training(&self.pretrain))
    }

    pub fn plan_options(&self) -> PlanOptions {
        PlanOptions {
            granularity: self.granularity,
            tolerance: self.tolerance,
        }
    }

    /// Checks everything that can be checked before any data is read,
    /// including the compute budget.
    pub fn validate(&self) -> Result<BudgetPlan> {
        let invalid = |m: String| Err(ExperimentError::ConfigInvalid(m));
        if self.setup.is_empty() {
            return invalid("setup name is empty".into());
        }
        if !(self.branch_ratio > 0.0 && self.branch_ratio <= 1.0) {
            return invalid(format!("branch_ratio {} not in (0, 1]", self.branch_ratio));
        }
        for (tier, c) in &self.tiers {
            c.validate()
                .map_err(|e| ExperimentError::ConfigInvalid(format!("tiers.{tier}: {e}")))?;
        }
        self.pretrain
            .validate()
            .map_err(|e| ExperimentError::ConfigInvalid(format!("pretrain: {e}")))?;
        self.domain_schedule()
            .validate()
            .map_err(|e| ExperimentError::ConfigInvalid(format!("domain: {e}")))?;
        if let Some(len) = self.eval.document_len {
            if len == 0 {
                return invalid("eval.document_len must be positive".into());
            }
        }
        self.prior.validate()?;
        Ok(make_plan(self.scenario, &self.tiers, self.iter_m, self.plan_options())?)
    }
}

/// Loaded and split corpora.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub trained: BTreeMap<String, CorpusSplit>,
    pub eval_only: BTreeMap<String, CorpusSplit>,
    pub tier_overrides: BTreeMap<String, DifficultyTier>,
    pub pretrain: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    /// Seed perplexity on each trained domain's validation split.
    pub seed_perplexity: BTreeMap<String, f64>,
    pub tiers: BTreeMap<String, DifficultyTier>,
    pub rows: Vec<BTreeMap<DifficultyTier, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanArtifact {
    pub plan: BudgetPlan,
    pub report: BudgetReport,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Directory relative paths in the config resolve against.
    pub base_dir: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str, hint: &'static str) -> Result<T> {
    if !path.exists() {
        return Err(ExperimentError::MissingArtifact {
            what,
            path: path.to_path_buf(),
            hint,
        });
    }
    let text = fs::read(path).map_err(io_err(path))?;
    Ok(serde_json::from_slice(&text)?)
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let config = ExperimentConfig::from_toml(&text, path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base_dir })
    }

    pub fn new(config: ExperimentConfig, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            base_dir: base_dir.into(),
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.out_dir)
    }

    pub fn forest_dir(&self, iteration: usize) -> PathBuf {
        self.out_dir().join(FORESTS_DIR).join(format!("iteration-{iteration}"))
    }

    /// Builds and verifies the budget plan and writes it to `plan.json`.
    pub fn plan(&self) -> Result<PlanArtifact> {
        let plan = self.config.validate()?;
        let report = verify_budget(&plan)?;
        let artifact = PlanArtifact { plan, report };
        write_json(&self.out_dir().join(PLAN_FILE), &artifact)?;
        Ok(artifact)
    }

    pub fn load_data(&self) -> Result<ExperimentData> {
        let registry = DomainRegistry::load(&self.resolve(&self.config.registry))?;
        let mut data = ExperimentData {
            trained: BTreeMap::new(),
            eval_only: BTreeMap::new(),
            tier_overrides: BTreeMap::new(),
            pretrain: Vec::new(),
        };
        for entry in &registry.entries {
            let corpus = DomainCorpus::load(entry.name.clone(), &entry.path)?;
            let parts = split(&corpus, &self.config.split)?;
            if entry.eval_only {
                data.eval_only.insert(entry.name.clone(), parts);
            } else {
                if let Some(t) = entry.tier_override {
                    data.tier_overrides.insert(entry.name.clone(), t);
                }
                data.trained.insert(entry.name.clone(), parts);
            }
        }
        if data.trained.is_empty() {
            return Err(ExperimentError::ConfigInvalid("registry lists no trained domains".into()));
        }
        data.pretrain = match &self.config.pretrain_corpus {
            Some(p) => DomainCorpus::load("pretrain", &self.resolve(p))?.tokens,
            None => registry
                .trained()
                .flat_map(|e| data.trained[&e.name].train.iter().copied())
                .collect(),
        };
        Ok(data)
    }

    /// Pretrains the seed models and records them in `seeds/seeds.json`.
    pub fn pretrain(&self, data: &ExperimentData, workers: usize) -> Result<BTreeMap<DifficultyTier, ExpertCheckpoint>> {
        let plan = self.config.validate()?;
        let seeds = pretrain_seeds(
            &plan,
            &data.pretrain,
            &self.config.pretrain,
            self.config.seeds.init,
            self.config.seeds.pretrain_data,
            workers,
        )?;
        let dir = self.out_dir().join(SEEDS_DIR);
        let mut index = BTreeMap::new();
        for (tier, ckpt) in &seeds {
            let path = ckpt.save(&dir)?;
            index.insert(*tier, path.file_name().expect("file name").to_string_lossy().into_owned());
        }
        write_json(&dir.join(SEEDS_FILE), &index)?;
        Ok(seeds)
    }

    pub fn load_seeds(&self) -> Result<BTreeMap<DifficultyTier, ExpertCheckpoint>> {
        let dir = self.out_dir().join(SEEDS_DIR);
        let index: BTreeMap<DifficultyTier, String> =
            read_json(&dir.join(SEEDS_FILE), "seed models", "run `pretrain` first")?;
        index
            .into_iter()
            .map(|(t, f)| Ok((t, ExpertCheckpoint::load(&dir.join(f))?)))
            .collect()
    }

    /// Assigns trained domains to tiers and BTM iterations. Explicit `rows`
    /// in the config win; otherwise the seed of the moderate tier ranks the
    /// domains by validation perplexity.
    pub fn classify(
        &self,
        data: &ExperimentData,
        seeds: &BTreeMap<DifficultyTier, ExpertCheckpoint>,
    ) -> Result<DifficultyRecord> {
        let seed = seeds
            .get(&DifficultyTier::Moderate)
            .ok_or(BtmError::MissingSeed(DifficultyTier::Moderate))?;
        let doc_len = self.config.eval.document_len.unwrap_or(seed.config().seq_len);
        let mut seed_perplexity = BTreeMap::new();
        for (name, parts) in &data.trained {
            let ppl = document_perplexity(&[seed], &DomainPrior::Uniform, &documents(&parts.val, doc_len))?;
            seed_perplexity.insert(name.clone(), ppl);
        }
        let record = if self.config.rows.is_empty() {
            let mut tiers = classify_difficulty(&seed_perplexity)?;
            for (name, t) in &data.tier_overrides {
                tiers.insert(name.clone(), *t);
            }
            let mut by_tier: BTreeMap<DifficultyTier, Vec<&String>> = BTreeMap::new();
            for (name, t) in &tiers {
                by_tier.entry(*t).or_default().push(name);
            }
            let depth = DifficultyTier::ALL
                .iter()
                .map(|t| by_tier.get(t).map_or(0, Vec::len))
                .min()
                .unwrap_or(0);
            if depth == 0 {
                return Err(ExperimentError::ConfigInvalid(
                    "every tier needs at least one trained domain".into(),
                ));
            }
            let rows = (0..depth)
                .map(|i| by_tier.iter().map(|(t, names)| (*t, names[i].clone())).collect())
                .collect();
            DifficultyRecord {
                seed_perplexity,
                tiers,
                rows,
            }
        } else {
            let mut tiers = BTreeMap::new();
            for row in &self.config.rows {
                for tier in DifficultyTier::ALL {
                    let name = row.get(&tier).ok_or_else(|| {
                        ExperimentError::ConfigInvalid(format!("a row has no {tier} domain"))
                    })?;
                    if !data.trained.contains_key(name) {
                        return Err(ExperimentError::ConfigInvalid(format!(
                            "row domain `{name}` is not a trained registry domain"
                        )));
                    }
                    tiers.insert(name.clone(), tier);
                }
            }
            DifficultyRecord {
                seed_perplexity,
                tiers,
                rows: self.config.rows.clone(),
            }
        };
        write_json(&self.out_dir().join(DIFFICULTY_FILE), &record)?;
        Ok(record)
    }

    pub fn load_difficulty(&self) -> Result<DifficultyRecord> {
        read_json(
            &self.out_dir().join(DIFFICULTY_FILE),
            "difficulty classification",
            "run `pretrain` first",
        )
    }

    pub fn btm_settings(&self) -> BtmSettings {
        BtmSettings {
            domain_schedule: self.config.domain_schedule(),
            branch_ratio: self.config.branch_ratio,
            base_seed: self.config.seeds.btm,
        }
    }

    pub fn load_forest(&self, iteration: usize) -> Result<Forest> {
        let dir = self.forest_dir(iteration);
        if !dir.join(crate::btm::MANIFEST_FILE).exists() {
            return Err(ExperimentError::MissingArtifact {
                what: "forest",
                path: dir,
                hint: "run `branch-train` for that iteration first",
            });
        }
        Ok(Forest::load(&dir)?)
    }

    /// Highest iteration with a saved forest.
    pub fn latest_iteration(&self) -> Option<usize> {
        let entries = fs::read_dir(self.out_dir().join(FORESTS_DIR)).ok()?;
        entries
            .filter_map(|e| e.ok()?.file_name().to_str()?.strip_prefix("iteration-")?.parse().ok())
            .filter(|k| self.forest_dir(*k).join(crate::btm::MANIFEST_FILE).exists())
            .max()
    }

    /// Runs BTM iteration `iteration` (1-based) and saves the merged forest.
    pub fn branch_train(&self, data: &ExperimentData, iteration: usize, workers: usize) -> Result<Forest> {
        if iteration == 0 {
            return Err(ExperimentError::ConfigInvalid("iterations are numbered from 1".into()));
        }
        let plan = self.config.validate()?;
        let difficulty = self.load_difficulty()?;
        let row = difficulty.rows.get(iteration - 1).ok_or_else(|| {
            ExperimentError::ConfigInvalid(format!(
                "iteration {iteration} requested but only {} domain rows exist",
                difficulty.rows.len()
            ))
        })?;
        let forest = if iteration == 1 {
            Forest::new(plan, self.load_seeds()?, self.config.prior.clone(), self.btm_settings())?
        } else {
            match self.load_forest(iteration - 1) {
                Ok(f) => f,
                Err(ExperimentError::MissingArtifact { .. }) => {
                    let tier = *plan.assignments.keys().next().expect("plan has tiers");
                    return Err(BtmError::MissingTierExpert(tier).into());
                }
                Err(e) => return Err(e),
            }
        };
        let domain_row = row
            .iter()
            .map(|(tier, name)| {
                let parts = data.trained.get(name).ok_or_else(|| {
                    ExperimentError::ConfigInvalid(format!("domain `{name}` is missing from the registry"))
                })?;
                let d = TrainingDomain {
                    name: name.clone(),
                    tokens: parts.train.clone(),
                };
                Ok((*tier, d))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let next = forest.train_iteration(&domain_row, workers)?;
        next.save(&self.forest_dir(iteration))?;
        Ok(next)
    }

    pub fn eval_domains(&self, data: &ExperimentData) -> Vec<EvalDomain> {
        let trained = data.trained.iter().map(|(n, s)| (n, s, DomainKind::Trained));
        let eval_only = data.eval_only.iter().map(|(n, s)| (n, s, DomainKind::EvalOnly));
        trained
            .chain(eval_only)
            .map(|(name, parts, kind)| EvalDomain {
                name: name.clone(),
                kind,
                tokens: parts.test.clone(),
            })
            .collect()
    }

    pub fn evaluate(&self, data: &ExperimentData, forest: &Forest, eval_step: EvalStep) -> Result<EvalResult> {
        let options = EvalOptions {
            setup: self.config.setup.clone(),
            document_len: self.config.eval.document_len,
            eval_step,
        };
        Ok(evaluate_forest(forest, &self.eval_domains(data), &options)?)
    }

    /// plan → pretrain → classify → every BTM iteration → evaluate the final
    /// forest into `results.json`.
    pub fn run_all(&self, workers: usize) -> Result<EvalResult> {
        self.plan()?;
        let data = self.load_data()?;
        let seeds = self.pretrain(&data, workers)?;
        let difficulty = self.classify(&data, &seeds)?;
        let mut last = None;
        for k in 1..=difficulty.rows.len() {
            last = Some(self.branch_train(&data, k, workers)?);
        }
        let forest = last.expect("at least one row");
        let result = self.evaluate(&data, &forest, self.config.eval.eval_step)?;
        write_json(&self.out_dir().join(RESULTS_FILE), &result)?;
        Ok(result)
    }
}

/// Writes `value` as pretty JSON with a trailing newline, creating parents.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

pub const INDEX_FILE: &str = "index.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

/// SHA-256 of every artifact under `out_dir`, keyed by relative path. The
/// index and provenance files themselves are skipped.
pub fn artifact_index(out_dir: &Path) -> Result<BTreeMap<String, String>> {
    use sha2::{Digest, Sha256};
    let mut index = BTreeMap::new();
    let mut stack = vec![out_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(out_dir).expect("walk stays inside out_dir");
            let rel = rel.to_string_lossy().replace('\\', "/");
            if rel == INDEX_FILE || rel == PROVENANCE_FILE {
                continue;
            }
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            index.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
    }
    Ok(index)
}

/// Small three-tier ladder with hidden size 32, used by demos and tests.
pub fn desk_ladder(hidden: usize, seq_len: usize) -> BTreeMap<DifficultyTier, ExpertConfig> {
    let heads = 2;
    [(DifficultyTier::Easy, 3), (DifficultyTier::Moderate, 6), (DifficultyTier::Difficult, 9)]
        .into_iter()
        .map(|(t, mult)| (t, ExpertConfig::new(hidden, hidden * mult / 2, heads, 2).with_seq_len(seq_len)))
        .collect()
}
