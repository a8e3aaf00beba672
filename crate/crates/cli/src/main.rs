use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use elmforest::btm::Forest;
use elmforest::budget::Scenario;
use elmforest::corpus::DifficultyTier;
use elmforest::ensemble::DomainPrior;
use elmforest::evalreport::{compare, emit, EvalResult, EvalStep, ReportFormat};
use elmforest::experiment::{
    artifact_index, desk_ladder, save_json, EvalConfig, Experiment, ExperimentConfig, SeedConfig, INDEX_FILE,
    PROVENANCE_FILE, RESULTS_FILE,
};
use elmforest::synthetic::MarkovSource;
use elmforest::tinylm::TrainSchedule;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "elmforest", version, about = "Train and evaluate forests of domain-expert language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, env = "ELMFOREST_CONFIG")]
    config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long, env = "ELMFOREST_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Overrides the scenario from the config.
    #[arg(long, env = "ELMFOREST_SCENARIO")]
    scenario: Option<Scenario>,
    /// Overrides `iter_m` from the config.
    #[arg(long, env = "ELMFOREST_ITER_M")]
    iter_m: Option<usize>,
    /// Overrides the BTM training seed from the config.
    #[arg(long, env = "ELMFOREST_BTM_SEED")]
    btm_seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct Workers {
    /// Training jobs run concurrently.
    #[arg(long, env = "ELMFOREST_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build and verify the compute-budget plan.
    Plan(Common),
    /// Pretrain seed models and assign domains to tiers.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        workers: Workers,
    },
    /// Run one Branch-Train-Merge iteration.
    BranchTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        workers: Workers,
        #[arg(long)]
        iteration: usize,
    },
    /// Ensemble perplexity of a forest on every registry domain.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Forest manifest or directory; defaults to the latest iteration.
        #[arg(long)]
        forest: Option<PathBuf>,
        /// Registry of domains to evaluate; defaults to the config's.
        #[arg(long)]
        domains: Option<PathBuf>,
        /// Results file; defaults to `results.json` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Which expert checkpoints to ensemble: final or branch.
        #[arg(long)]
        eval_step: Option<EvalStep>,
    },
    /// Compare results files and print a table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan, pretrain, every BTM iteration and evaluate.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        workers: Workers,
    },
    /// Write synthetic demo domains, a registry and a config.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        /// Bytes per domain.
        #[arg(long, default_value_t = 64 * 1024)]
        bytes: usize,
        #[arg(long, default_value = "MHoIHe")]
        scenario: Scenario,
    },
}

fn load(common: &Common) -> Result<(Experiment, BTreeMap<&'static str, String>)> {
    let mut exp = Experiment::load(&common.config)
        .with_context(|| format!("loading config {}", common.config.display()))?;
    let mut overrides = BTreeMap::new();
    if let Some(dir) = &common.out_dir {
        let abs = std::path::absolute(dir)?;
        overrides.insert("out_dir", abs.display().to_string());
        exp.config.out_dir = abs;
    }
    if let Some(s) = common.scenario {
        overrides.insert("scenario", s.to_string());
        exp.config.scenario = s;
    }
    if let Some(k) = common.iter_m {
        overrides.insert("iter_m", k.to_string());
        exp.config.iter_m = k;
    }
    if let Some(seed) = common.btm_seed {
        overrides.insert("seeds.btm", seed.to_string());
        exp.config.seeds.btm = seed;
    }
    Ok((exp, overrides))
}

/// Appends a provenance entry and refreshes the artifact index.
fn record(exp: &Experiment, command: &str, overrides: &BTreeMap<&str, String>, extra: serde_json::Value) -> Result<()> {
    let out = exp.out_dir();
    fs::create_dir_all(&out)?;
    let index = artifact_index(&out)?;
    save_json(&out.join(INDEX_FILE), &index)?;
    let path = out.join(PROVENANCE_FILE);
    let mut log: Vec<serde_json::Value> = match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).context("reading provenance log")?,
        Err(_) => Vec::new(),
    };
    log.push(json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "overrides": overrides,
        "config": exp.config,
        "details": extra,
        "artifacts": index,
    }));
    save_json(&path, &log)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan(common) => {
            let (exp, overrides) = load(&common)?;
            let artifact = exp.plan()?;
            for (tier, a) in &artifact.plan.assignments {
                println!(
                    "{tier:>9}: hidden {} ffn {} layers {} -> {} steps",
                    a.config.hidden_size, a.config.intermediate_size, a.config.num_layers, a.iterations
                );
            }
            println!("{}", artifact.report);
            record(&exp, "plan", &overrides, json!({}))?;
        }
        Command::Pretrain { common, workers } => {
            let (exp, overrides) = load(&common)?;
            exp.plan()?;
            let data = exp.load_data()?;
            let seeds = exp.pretrain(&data, workers.workers)?;
            let difficulty = exp.classify(&data, &seeds)?;
            for (domain, tier) in &difficulty.tiers {
                let ppl = difficulty.seed_perplexity[domain];
                println!("{domain}: seed perplexity {ppl:.3} -> {tier}");
            }
            record(&exp, "pretrain", &overrides, json!({ "workers": workers.workers }))?;
        }
        Command::BranchTrain {
            common,
            workers,
            iteration,
        } => {
            let (exp, overrides) = load(&common)?;
            let data = exp.load_data()?;
            let forest = exp.branch_train(&data, iteration, workers.workers)?;
            for (tier, r) in &forest.history[iteration - 1].experts {
                println!("{tier}: {} ({} steps, branch at {}) -> {}", r.domain, r.iterations, r.branch_step, r.final_id);
            }
            record(
                &exp,
                "branch-train",
                &overrides,
                json!({ "workers": workers.workers, "iteration": iteration }),
            )?;
        }
        Command::Evaluate {
            common,
            forest,
            domains,
            out,
            eval_step,
        } => {
            let (mut exp, mut overrides) = load(&common)?;
            if let Some(registry) = domains {
                let abs = std::path::absolute(&registry)?;
                overrides.insert("registry", abs.display().to_string());
                exp.config.registry = abs;
            }
            let forest = match forest {
                Some(p) => Forest::load(&p).with_context(|| format!("loading forest {}", p.display()))?,
                None => {
                    let Some(k) = exp.latest_iteration() else {
                        bail!("no trained forest under {}; run `branch-train` first", exp.out_dir().display());
                    };
                    exp.load_forest(k)?
                }
            };
            let step = eval_step.unwrap_or(exp.config.eval.eval_step);
            let data = exp.load_data()?;
            let result = exp.evaluate(&data, &forest, step)?;
            let out = out.unwrap_or_else(|| exp.out_dir().join(RESULTS_FILE));
            save_json(&out, &result)?;
            for (domain, ppl) in &result.perplexity {
                println!("{domain}: {ppl:.3}");
            }
            record(&exp, "evaluate", &overrides, json!({ "out": out, "eval_step": step }))?;
        }
        Command::Report { inputs, format, out } => {
            let results = inputs
                .iter()
                .map(|p| {
                    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_slice::<EvalResult>(&bytes).with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let bytes = emit(&compare(&results)?, format)?;
            match out {
                Some(p) => fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{}", String::from_utf8_lossy(&bytes)),
            }
        }
        Command::Run { common, workers } => {
            let (exp, overrides) = load(&common)?;
            let result = exp.run_all(workers.workers)?;
            for (domain, ppl) in &result.perplexity {
                println!("{domain}: {ppl:.3}");
            }
            record(&exp, "run", &overrides, json!({ "workers": workers.workers }))?;
        }
        Command::Synth { dir, bytes, scenario } => synth(&dir, bytes, scenario)?,
    }
    Ok(())
}

/// Three trained domains of rising entropy plus one held-out profile.
fn synth(dir: &Path, bytes: usize, scenario: Scenario) -> Result<()> {
    fs::create_dir_all(dir)?;
    let domains = [
        ("steady", MarkovSource::new(b"abcdefgh".to_vec(), 1, 1, 0.02), false),
        ("chatter", MarkovSource::new(b"ijklmnopqrst".to_vec(), 2, 3, 0.05), false),
        ("noise", MarkovSource::new(b"uvwxyz0123456789".to_vec(), 2, 8, 0.1), false),
        ("unseen", MarkovSource::new(b"abcdijkluvwx".to_vec(), 1, 4, 0.05), true),
    ];
    let mut registry = Vec::new();
    for (i, (name, source, eval_only)) in domains.iter().enumerate() {
        let file = format!("{name}.txt");
        fs::write(dir.join(&file), source.generate(bytes, 100 + i as u64))?;
        registry.push(json!({ "name": name, "path": file, "eval_only": eval_only }));
    }
    save_json(&dir.join("domains.json"), &registry)?;
    let config = ExperimentConfig {
        setup: "desk".into(),
        scenario,
        iter_m: 200,
        branch_ratio: 2.0 / 3.0,
        tolerance: 0.05,
        granularity: 50,
        registry: "domains.json".into(),
        pretrain_corpus: None,
        out_dir: "runs/desk".into(),
        tiers: desk_ladder(32, 64),
        pretrain: TrainSchedule::new(200, 20, 3e-3, 8),
        domain: Some(TrainSchedule {
            min_lr: 1e-4,
            ..TrainSchedule::new(600, 20, 1e-3, 8)
        }),
        seeds: SeedConfig::default(),
        split: Default::default(),
        eval: EvalConfig {
            document_len: Some(64),
            eval_step: EvalStep::Final,
        },
        prior: DomainPrior::Uniform,
        rows: vec![DifficultyTier::ALL
            .into_iter()
            .zip(["steady", "chatter", "noise"])
            .map(|(t, n)| (t, n.to_string()))
            .collect()],
    };
    let path = dir.join("config.toml");
    fs::write(&path, config.to_toml())?;
    println!("wrote {} and domains under {}", path.display(), dir.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
