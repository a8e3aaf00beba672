//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p elmforest --test acceptance`; pass criterion
//! numbers (`-- 2 5`) to run a subset.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use elmforest::btm::{Forest, MANIFEST_FILE};
use elmforest::budget::{
    ffn_total, make_plan, solve_iterations, verify_budget, PlanOptions, ReferenceSetup, Scenario,
};
use elmforest::corpus::{Batch, DifficultyTier, TokenId};
use elmforest::ensemble::{
    document_perplexity, documents, init_posterior, posterior_weights, sequence_nll, step, DomainPrior,
    LanguageModel,
};
use elmforest::evalreport::EvalStep;
use elmforest::experiment::{
    artifact_index, desk_ladder, EvalConfig, Experiment, ExperimentConfig, SeedConfig, RESULTS_FILE,
};
use elmforest::synthetic::MarkovSource;
use elmforest::tinylm::{
    forward, init_model, loss_and_grad, lr_at, ExpertCheckpoint, ExpertConfig, ModelError, ModelParams,
    ParamLayout, TrainSchedule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

// ---------------------------------------------------------------- 1

/// (hidden, intermediate, layers) of the published reference sizes, typed in
/// independently of the library table.
fn published_ffn(name: &str) -> u64 {
    let (h, i, l) = match name {
        "5M" => (272, 1088, 4),
        "7.5M" => (272, 1088, 6),
        "10M" => (320, 1280, 6),
        "12.5M" => (330, 1320, 7),
        "15M" => (340, 1360, 8),
        "90M" => (768, 2304, 12),
        "115M" => (768, 3072, 12),
        "135M" => (768, 3840, 12),
        _ => unreachable!(),
    };
    3 * h * i * l
}

fn budget_arithmetic() -> Outcome {
    let start = Instant::now();
    let expected = [
        ("tiny-spread", (200, 600), (0.037, 0.004)),
        ("tiny-close", (300, 500), (0.037, 0.007)),
        ("small-close", (300, 500), (0.0, 0.0)),
    ];
    let mut details = Vec::new();
    for (name, iters, (dev_s, dev_l)) in expected {
        let setup = ReferenceSetup::by_name(name).ok_or(format!("{name} missing"))?;
        let [s, m, l] = setup.sizes.map(published_ffn);
        let tiers = setup.tier_configs();
        for (tier, ffn) in DifficultyTier::ALL.iter().zip([s, m, l]) {
            ensure!(ffn_total(&tiers[tier]) == ffn, "{name} {tier}: ffn total {}", ffn_total(&tiers[tier]));
        }
        let solved = solve_iterations(s, m, l, 400, 100).map_err(|e| e.to_string())?;
        ensure!(solved == iters, "{name}: solved {solved:?}, want {iters:?}");

        // Oracle deviations straight from the integer products.
        let oracle = |x: u64, it: u64| (x * 400).abs_diff(m * it) as f64 / (m * it) as f64;
        let (os, ol) = (oracle(s, iters.0 as u64), oracle(l, iters.1 as u64));
        // The targets are rounded percentages; 0.347% is quoted as about 0.4%.
        ensure!((os - dev_s).abs() <= 1e-3 && (ol - dev_l).abs() <= 1e-3, "{name}: oracle ({os}, {ol})");

        for scenario in Scenario::ALL {
            let plan = make_plan(scenario, &tiers, 400, PlanOptions { granularity: 100, tolerance: 0.05 })
                .map_err(|e| e.to_string())?;
            let report = verify_budget(&plan).map_err(|e| e.to_string())?;
            ensure!(report.pass, "{name} {scenario}: {report}");
            if scenario != Scenario::MHoIHo {
                ensure!(
                    rel(report.small_deviation, os) < 1e-12 || (os == 0.0 && report.small_deviation == 0.0),
                    "{name} {scenario}: small deviation {} vs oracle {os}",
                    report.small_deviation
                );
                ensure!(
                    rel(report.large_deviation, ol) < 1e-12 || (ol == 0.0 && report.large_deviation == 0.0),
                    "{name} {scenario}: large deviation {} vs oracle {ol}",
                    report.large_deviation
                );
            }
        }
        details.push(format!("{name} {iters:?} dev ({os:.4}, {ol:.4})"));
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(details.join("; "))
}

// ---------------------------------------------------------------- 2

/// Linear-space evaluation: per-expert conditionals from independent forward
/// passes over each context, mixed with explicitly normalized posteriors.
fn brute_force_nll(models: &[ExpertCheckpoint], prior: &[f64], tokens: &[TokenId]) -> f64 {
    let vocab = models[0].config().vocab_size;
    let bos = (vocab - 1) as TokenId;
    let mut full = vec![bos];
    full.extend_from_slice(tokens);
    let cond: Vec<Vec<Vec<f64>>> = models
        .iter()
        .map(|m| {
            let window = m.config().seq_len;
            (0..tokens.len())
                .map(|pos| {
                    let lo = (pos + 1).saturating_sub(window);
                    let ctx = full[lo..=pos].to_vec();
                    let logits = forward(m.config(), m.params(), &[ctx.clone()]).unwrap();
                    let row: Vec<f64> = logits.row(0, ctx.len() - 1).iter().map(|&x| x as f64).collect();
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.into_iter().map(|x| x / z).collect()
                })
                .collect()
        })
        .collect();
    let mut likelihood: Vec<f64> = vec![1.0; models.len()];
    let mut nll = 0.0;
    for (t, &x) in tokens.iter().enumerate() {
        let joint: Vec<f64> = likelihood.iter().zip(prior).map(|(l, p)| l * p).collect();
        let z: f64 = joint.iter().sum();
        let p: f64 = (0..models.len()).map(|i| joint[i] / z * cond[i][t][x as usize]).sum();
        nll -= p.ln();
        for i in 0..models.len() {
            likelihood[i] *= cond[i][t][x as usize];
        }
    }
    nll
}

fn ensemble_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases = 1200;
    let mut worst = 0.0f64;
    for case in 0..cases {
        let vocab = rng.random_range(2..=8usize);
        let window = rng.random_range(2..=8usize);
        let n = rng.random_range(2..=3usize);
        let models: Vec<ExpertCheckpoint> = (0..n)
            .map(|_| {
                let mut c = ExpertConfig::new(8, 8, 2, 1).with_vocab(vocab).with_seq_len(window);
                c.init_std = rng.random_range(0.3..1.5);
                let p = init_model(&c, rng.random());
                ExpertCheckpoint::new(c, p, 0, vec![])
            })
            .collect();
        let len = rng.random_range(1..=8usize);
        let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..vocab as TokenId)).collect();
        let (prior, probs) = if rng.random_bool(0.5) {
            (DomainPrior::Uniform, vec![1.0 / n as f64; n])
        } else {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / z).collect();
            (DomainPrior::Fixed(p.clone()), p)
        };
        let ours = sequence_nll(&models, &prior, &tokens).map_err(|e| format!("case {case}: {e}"))?;
        let oracle = brute_force_nll(&models, &probs, &tokens);
        let r = rel(ours.total, oracle);
        worst = worst.max(r);
        ensure!(r < 1e-9, "case {case}: log-space {} vs linear {oracle} (rel {r:e})", ours.total);
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{cases} forests, worst relative error {worst:.1e}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------- 3

/// Conditional table keyed on the previous token.
struct TableModel {
    rows: Vec<Vec<f64>>,
}

impl TableModel {
    fn new(rng: &mut ChaCha8Rng, vocab: usize) -> Self {
        let rows = (0..vocab)
            .map(|_| {
                let raw: Vec<f64> = (0..vocab).map(|_| rng.random_range(0.01..1.0f64).powi(2)).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|x| (x / z).ln()).collect()
            })
            .collect();
        Self { rows }
    }
}

impl LanguageModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.rows.len()
    }
    fn max_context(&self) -> usize {
        64
    }
    fn prefix_logprobs(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(tokens.iter().map(|&t| self.rows[t as usize].clone()).collect())
    }
    fn bos_token(&self) -> TokenId {
        (self.rows.len() - 1) as TokenId
    }
}

fn all_sequences(vocab: usize, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<TokenId>> = vec![vec![]];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|s| {
                (0..vocab as TokenId).map(move |v| {
                    let mut n = s.clone();
                    n.push(v);
                    n
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

fn posterior_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vocab = 3;
    let pool: Vec<TableModel> = (0..4).map(|_| TableModel::new(&mut rng, vocab)).collect();
    let sequences = all_sequences(vocab, 4);
    let mut checked = 0usize;
    for n in 1..=3usize {
        let mut priors = vec![DomainPrior::Uniform];
        if n > 1 {
            let raw: Vec<f64> = (1..=n).map(|i| i as f64).collect();
            let z: f64 = raw.iter().sum();
            priors.push(DomainPrior::Fixed(raw.iter().map(|x| x / z).collect()));
        }
        for j in 0..n {
            priors.push(DomainPrior::Fixed((0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()));
        }
        for offset in 0..pool.len() {
            let models: Vec<&TableModel> = (0..n).map(|i| &pool[(offset + i) % pool.len()]).collect();
            for prior in &priors {
                let prior_probs: Vec<f64> = match prior {
                    DomainPrior::Uniform => vec![1.0 / n as f64; n],
                    DomainPrior::Fixed(p) => p.clone(),
                };
                let one_hot = prior_probs.iter().position(|&p| p == 1.0);
                for seq in &sequences {
                    let mut state = init_posterior(n, prior).map_err(|e| e.to_string())?;
                    let w0 = posterior_weights(&state);
                    for (a, b) in w0.iter().zip(&prior_probs) {
                        ensure!((a - b).abs() < 1e-12, "prior recovery: {w0:?} vs {prior_probs:?}");
                    }
                    let mut prev = models[0].bos_token();
                    for &x in seq {
                        let rows: Vec<Vec<f64>> = models.iter().map(|m| m.rows[prev as usize].clone()).collect();
                        let w = posterior_weights(&state);
                        ensure!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9, "weights sum {}", w.iter().sum::<f64>());
                        for shift in [-750.0, -3.25, 41.0, 900.0] {
                            let mut moved = state.clone();
                            moved.cum_loglik.iter_mut().for_each(|c| *c += shift);
                            let wm = posterior_weights(&moved);
                            for (a, b) in w.iter().zip(&wm) {
                                ensure!((a - b).abs() < 1e-12, "shift {shift} changed weights {w:?} -> {wm:?}");
                            }
                        }
                        let (dist, next) = step(&state, &rows, x).map_err(|e| e.to_string())?;
                        let mass: f64 = dist.logprobs.iter().map(|l| l.exp()).sum();
                        ensure!((mass - 1.0).abs() < 1e-9, "ensemble mass {mass}");
                        for v in 0..vocab {
                            let p = dist.logprobs[v].exp();
                            let lo = rows.iter().map(|r| r[v].exp()).fold(f64::INFINITY, f64::min);
                            let hi = rows.iter().map(|r| r[v].exp()).fold(0.0, f64::max);
                            ensure!(p >= lo - 1e-12 && p <= hi + 1e-12, "p {p} outside [{lo}, {hi}]");
                        }
                        if let Some(j) = one_hot {
                            ensure!(
                                (dist.logprobs[x as usize] - rows[j][x as usize]).abs() < 1e-12,
                                "one-hot prior on {j} did not collapse"
                            );
                            ensure!(w[j] == 1.0, "one-hot weight drifted to {}", w[j]);
                        }
                        state = next;
                        prev = x;
                        checked += 1;
                    }
                    let nll = sequence_nll(&models, prior, seq).map_err(|e| e.to_string())?;
                    ensure!(nll.posterior_trace[0] == w0, "trace does not open with the prior");
                    if let Some(j) = one_hot {
                        let solo = sequence_nll(&[models[j]], &DomainPrior::Uniform, seq).map_err(|e| e.to_string())?;
                        ensure!((nll.total - solo.total).abs() < 1e-12, "one-hot nll {} vs solo {}", nll.total, solo.total);
                    }
                }
            }
        }
    }
    Ok(format!("{checked} posterior steps over every sequence of length <= 4"))
}

// ---------------------------------------------------------------- 4

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let config = ExpertConfig::new(8, 12, 2, 2).with_vocab(11).with_seq_len(5);
    let mut params: ModelParams<f64> = init_model(&config, 3).cast();
    for (i, x) in params.data.iter_mut().enumerate() {
        *x = *x * 8.0 + 0.05 * ((i as f64) * 0.7).sin();
    }
    ensure!(params.len() <= 10_000, "{} params", params.len());
    let batch = Batch::from_rows(&[
        (vec![1, 4, 2, 9, 0], vec![4, 2, 9, 0, 3]),
        (vec![7, 7, 3, 10, 5], vec![7, 3, 10, 5, 6]),
    ]);
    let (_, analytic) = loss_and_grad(&config, &params, &batch).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for spec in &ParamLayout::new(&config).tensors {
        let entry = worst.entry(format!("{:?}", spec.kind)).or_default();
        for i in spec.range() {
            let mut p = params.clone();
            p.data[i] += h;
            let lp = loss_and_grad(&config, &p, &batch).unwrap().0;
            p.data[i] -= 2.0 * h;
            let lm = loss_and_grad(&config, &p, &batch).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.data[i];
            let r = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            *entry = entry.max(r);
            ensure!(r < 1e-4, "{}[{}]: analytic {a} numeric {numeric}", spec.name, i - spec.offset);
        }
    }
    ensure!(worst.len() == 11, "only {} parameter classes", worst.len());
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    let max = worst.values().cloned().fold(0.0, f64::max);
    Ok(format!("{} params, {} classes, worst relative error {max:.1e}", params.len(), worst.len()))
}

// ---------------------------------------------------------------- 5

fn schedule_endpoints() -> Outcome {
    let seed = TrainSchedule::seed_pretraining(5e-3, 8);
    let mut schedules = vec![
        seed.clone(),
        TrainSchedule::domain_training(&seed),
        TrainSchedule::new(200, 20, 3e-3, 8),
        TrainSchedule::new(10, 1, 1.0, 1),
    ];
    schedules.push(schedules[1].with_total_steps(250));
    for s in &schedules {
        let lr = |k| lr_at(k, s).map_err(|e| e.to_string());
        let (total, warm) = (s.total_steps, s.warmup_steps);
        ensure!(lr(0)?.abs() <= 1e-12, "lr_at(0) = {}", lr(0)?);
        ensure!((lr(warm)? - s.max_lr).abs() <= 1e-12, "lr_at({warm}) = {}", lr(warm)?);
        ensure!((lr(total)? - s.max_lr / 10.0).abs() <= 1e-12, "lr_at({total}) = {}", lr(total)?);
    }
    Ok(format!("{} schedules", schedules.len()))
}

// ---------------------------------------------------------------- 6

fn write_registry(dir: &Path, domains: &[(&str, Vec<u8>, bool)]) {
    let mut registry = Vec::new();
    for (name, text, eval_only) in domains {
        fs::write(dir.join(format!("{name}.txt")), text).unwrap();
        registry.push(serde_json::json!({ "name": name, "path": format!("{name}.txt"), "eval_only": eval_only }));
    }
    fs::write(dir.join("domains.json"), serde_json::to_vec(&registry).unwrap()).unwrap();
}

fn posterior_routing() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let domains: Vec<(&str, Vec<u8>, bool)> = ["alpha", "beta", "gamma"]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let alphabet: Vec<u8> = (0..8u8).map(|k| b'A' + i as u8 * 8 + k).collect();
            (*name, MarkovSource::new(alphabet, 2, 3, 0.02).generate(200 * 1024, i as u64 + 10), false)
        })
        .collect();
    write_registry(dir.path(), &domains);
    let expert = ExpertConfig::default();
    ensure!((150_000..250_000).contains(&expert.param_count()), "{} params", expert.param_count());
    let config = ExperimentConfig {
        setup: "routing".into(),
        scenario: Scenario::MHoIHo,
        iter_m: 250,
        granularity: 50,
        tiers: DifficultyTier::ALL.iter().map(|t| (*t, expert.clone())).collect(),
        pretrain: TrainSchedule::new(150, 15, 3e-3, 8),
        domain: Some(TrainSchedule {
            min_lr: 1e-4,
            ..TrainSchedule::new(250, 20, 1e-3, 8)
        }),
        ..base_config()
    };
    let exp = Experiment::new(config, dir.path());
    let result = exp.run_all(1).map_err(|e| e.to_string())?;
    let difficulty = exp.load_difficulty().map_err(|e| e.to_string())?;
    let forest = exp.load_forest(1).map_err(|e| e.to_string())?;
    let data = exp.load_data().map_err(|e| e.to_string())?;
    let members = forest.members();
    let mut details = Vec::new();
    for (name, parts) in &data.trained {
        let tier = difficulty.tiers[name];
        let idx = forest.experts.keys().position(|t| *t == tier).unwrap();
        let docs = documents(&parts.test, 128);
        let solo = document_perplexity(&[&forest.experts[&tier]], &DomainPrior::Uniform, &docs)
            .map_err(|e| e.to_string())?;
        let ensemble = result.perplexity[name];
        let gap = ensemble / solo - 1.0;
        ensure!(gap.abs() <= 0.05, "{name}: ensemble {ensemble:.3} vs solo {solo:.3}");
        let (mut weight, mut count) = (0.0, 0);
        for doc in docs.iter().filter(|d| d.len() > 64) {
            let nll = sequence_nll(&members, &DomainPrior::Uniform, doc).map_err(|e| e.to_string())?;
            weight += nll.posterior_trace[64][idx];
            count += 1;
        }
        ensure!(count > 0, "{name}: no document reaches 64 tokens");
        let mean = weight / count as f64;
        ensure!(mean > 0.9, "{name}: mean posterior weight {mean:.3} after 64 tokens");
        details.push(format!("{name} {ensemble:.3}/{solo:.3} w64 {mean:.3}"));
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    Ok(format!("{}, {elapsed:.0?}", details.join("; ")))
}

/// Shared defaults for the pipeline criteria; callers fill in the rest.
fn base_config() -> ExperimentConfig {
    ExperimentConfig {
        setup: "desk".into(),
        scenario: Scenario::MHoIHo,
        iter_m: 200,
        branch_ratio: 2.0 / 3.0,
        tolerance: 0.05,
        granularity: 50,
        registry: "domains.json".into(),
        pretrain_corpus: None,
        out_dir: "out".into(),
        tiers: desk_ladder(32, 64),
        pretrain: TrainSchedule::new(200, 20, 3e-3, 8),
        domain: None,
        seeds: SeedConfig::default(),
        split: Default::default(),
        eval: EvalConfig {
            document_len: Some(128),
            eval_step: EvalStep::Final,
        },
        prior: DomainPrior::Uniform,
        rows: vec![],
    }
}

fn row(easy: &str, moderate: &str, difficult: &str) -> BTreeMap<DifficultyTier, String> {
    DifficultyTier::ALL
        .into_iter()
        .zip([easy, moderate, difficult])
        .map(|(t, n)| (t, n.to_string()))
        .collect()
}

// ---------------------------------------------------------------- 7

fn heterogeneity_direction() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sources = [
        ("easy", MarkovSource::new(b"abcdefgh".to_vec(), 1, 1, 0.01)),
        ("mid", MarkovSource::new(b"ijklmnopqrst".to_vec(), 2, 3, 0.03)),
        ("hard", MarkovSource::new((b'A'..b'A' + 20).collect::<Vec<u8>>(), 2, 5, 0.05)),
    ];
    let domains: Vec<(&str, Vec<u8>, bool)> = sources
        .iter()
        .enumerate()
        .map(|(i, (name, s))| (*name, s.generate(128 * 1024, i as u64 + 10), false))
        .collect();
    write_registry(dir.path(), &domains);
    let mut margins = Vec::new();
    for seed in 0..3u64 {
        let mut hard = BTreeMap::new();
        let mut compute = BTreeMap::new();
        for scenario in [Scenario::MHoIHo, Scenario::MHoIHe] {
            let config = ExperimentConfig {
                scenario,
                out_dir: format!("out-{seed}-{scenario}").into(),
                domain: Some(TrainSchedule {
                    min_lr: 2e-4,
                    ..TrainSchedule::new(200, 20, 2e-3, 8)
                }),
                seeds: SeedConfig {
                    init: seed,
                    pretrain_data: seed + 100,
                    btm: seed + 200,
                },
                eval: EvalConfig {
                    document_len: Some(64),
                    eval_step: EvalStep::Final,
                },
                rows: vec![row("easy", "mid", "hard")],
                ..base_config()
            };
            let exp = Experiment::new(config, dir.path());
            let plan = exp.plan().map_err(|e| e.to_string())?;
            ensure!(plan.report.pass, "{scenario}: {}", plan.report);
            compute.insert(scenario, plan.plan.total_compute());
            let result = exp.run_all(1).map_err(|e| e.to_string())?;
            hard.insert(scenario, result.perplexity["hard"]);
        }
        ensure!(
            compute[&Scenario::MHoIHo] == compute[&Scenario::MHoIHe],
            "seed {seed}: compute {compute:?}"
        );
        let margin = hard[&Scenario::MHoIHo] - hard[&Scenario::MHoIHe];
        ensure!(
            margin > 0.0,
            "seed {seed}: hard-domain perplexity MHoIHo {:.3} vs MHoIHe {:.3}",
            hard[&Scenario::MHoIHo],
            hard[&Scenario::MHoIHe]
        );
        margins.push(format!("{:.2}->{:.2}", hard[&Scenario::MHoIHo], hard[&Scenario::MHoIHe]));
    }
    Ok(format!("hard-domain perplexity MHoIHo->MHoIHe per seed: {}", margins.join(", ")))
}

// ---------------------------------------------------------------- 8

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        scenario: Scenario::MHeIHo,
        iter_m: 40,
        granularity: 10,
        tiers: desk_ladder(16, 32),
        pretrain: TrainSchedule::new(30, 5, 3e-3, 4),
        domain: Some(TrainSchedule::new(40, 5, 2e-3, 4)),
        eval: EvalConfig {
            document_len: Some(32),
            eval_step: EvalStep::Final,
        },
        ..base_config()
    }
}

fn six_domains() -> Vec<(&'static str, Vec<u8>, bool)> {
    let specs: [(&str, &[u8], usize, usize, f64, bool); 7] = [
        ("d0", b"abcdef", 1, 1, 0.0, false),
        ("d1", b"ghijkl", 1, 1, 0.05, false),
        ("d2", b"mnopqrst", 1, 2, 0.05, false),
        ("d3", b"uvwxyz01", 2, 3, 0.05, false),
        ("d4", b"ABCDEFGHIJKL", 2, 5, 0.1, false),
        ("d5", b"MNOPQRSTUVWXYZ23", 2, 8, 0.2, false),
        ("held", b"acegikmo", 1, 3, 0.1, true),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, &(name, alphabet, order, branching, noise, eval_only))| {
            let text = MarkovSource::new(alphabet.to_vec(), order, branching, noise).generate(8 * 1024, i as u64);
            (name, text, eval_only)
        })
        .collect()
}

fn worker_invariance() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_registry(dir.path(), &six_domains());
    let mut indexes = Vec::new();
    for workers in [1, 4] {
        let config = ExperimentConfig {
            out_dir: format!("out-{workers}").into(),
            ..small_config()
        };
        let exp = Experiment::new(config, dir.path());
        exp.run_all(workers).map_err(|e| e.to_string())?;
        ensure!(exp.latest_iteration() == Some(2), "expected 2 iterations, got {:?}", exp.latest_iteration());
        indexes.push((exp.out_dir(), artifact_index(&exp.out_dir()).map_err(|e| e.to_string())?));
    }
    let (a_dir, a) = &indexes[0];
    let (b_dir, b) = &indexes[1];
    for k in 1..=2 {
        let manifest = format!("forests/iteration-{k}/{MANIFEST_FILE}");
        ensure!(a.contains_key(&manifest), "no {manifest}");
        let (x, y) = (fs::read(a_dir.join(&manifest)).unwrap(), fs::read(b_dir.join(&manifest)).unwrap());
        ensure!(x == y, "{manifest} differs between 1 and 4 workers");
    }
    ensure!(
        fs::read(a_dir.join(RESULTS_FILE)).unwrap() == fs::read(b_dir.join(RESULTS_FILE)).unwrap(),
        "results differ between 1 and 4 workers"
    );
    ensure!(a == b, "artifact hashes differ");
    Ok(format!("{} artifacts identical across 1 and 4 workers", a.len()))
}

// ---------------------------------------------------------------- 9

fn lineage_integrity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let domains: Vec<_> = six_domains().into_iter().take(3).collect();
    write_registry(dir.path(), &domains);
    let config = ExperimentConfig {
        rows: vec![row("d0", "d1", "d2"), row("d1", "d2", "d0"), row("d2", "d0", "d1")],
        ..small_config()
    };
    let exp = Experiment::new(config, dir.path());
    exp.run_all(1).map_err(|e| e.to_string())?;
    let forests: Vec<Forest> = (1..=3)
        .map(|k| exp.load_forest(k))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let last = &forests[2];
    ensure!(last.history.len() == 3, "{} iterations recorded", last.history.len());
    let mut links = 0;
    for (k, record) in last.history.iter().enumerate() {
        for (tier, r) in &record.experts {
            let iterations = last.plan.assignments[tier].iterations;
            let want_branch = (2.0 / 3.0 * iterations as f64).round() as usize;
            ensure!(r.branch_step == want_branch, "iteration {} {tier}: branch step {}", k + 1, r.branch_step);
            let expected = if k == 0 {
                forests[0].seeds[tier].id().to_string()
            } else {
                // The prior iteration's own forest holds its branch checkpoints.
                let prior = &forests[k - 1];
                let branch = &prior.branch_points[tier];
                ensure!(branch.step() == prior.history[k - 1].experts[tier].branch_step, "branch step mismatch");
                ensure!(branch.id() == last.history[k - 1].experts[tier].branch, "history disagrees with forest");
                let path = exp.forest_dir(k).join("checkpoints").join(format!("{}.ckpt", branch.id()));
                let on_disk = ExpertCheckpoint::load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                ensure!(on_disk.id() == branch.id(), "checkpoint content does not match its id");
                branch.id().to_string()
            };
            ensure!(r.parent == expected, "iteration {} {tier}: parent {} expected {expected}", k + 1, r.parent);
            links += 1;
        }
    }
    for (tier, expert) in &last.experts {
        let parents: Vec<&str> = expert.lineage().iter().map(|e| e.parent.as_str()).collect();
        let recorded: Vec<&str> = last.history.iter().map(|h| h.experts[tier].parent.as_str()).collect();
        ensure!(parents == recorded, "{tier}: checkpoint lineage {parents:?} vs history {recorded:?}");
    }
    Ok(format!("{links} parent links over 3 iterations"))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("budget arithmetic", budget_arithmetic),
        ("ensemble oracle equivalence", ensemble_oracle),
        ("posterior invariants", posterior_invariants),
        ("gradient correctness", gradient_correctness),
        ("schedule endpoints", schedule_endpoints),
        ("posterior routing at desk scale", posterior_routing),
        ("heterogeneity direction", heterogeneity_direction),
        ("worker-count determinism", worker_invariance),
        ("lineage across iterations", lineage_integrity),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
