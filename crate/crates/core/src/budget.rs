//! Equal-compute bookkeeping across heterogeneity scenarios.
//!
//! The feed-forward blocks dominate transformer compute, so an expert's cost
//! is proxied by its total SwiGLU parameter count times its step count. A
//! size ladder (S, M, L) and a step ladder are balanced when
//! `|FFN_S|·Iter_M ≈ |FFN_M|·Iter_S` and `|FFN_L|·Iter_M ≈ |FFN_M|·Iter_L`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DifficultyTier;
use crate::tinylm::{ExpertConfig, ReferenceModel};

pub const DEFAULT_GRANULARITY: usize = 100;
pub const DEFAULT_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum BudgetError {
    #[error("feed-forward size and iteration counts must be positive")]
    ZeroFfn,
    #[error("plan has no assignment for the {0} tier")]
    MissingTier(DifficultyTier),
    #[error("inconsistent scenario inputs: {0}")]
    InconsistentScenario(String),
    #[error("plan violates the compute budget: {0}")]
    BudgetViolation(Box<BudgetReport>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Same size, same steps for every tier (baseline).
    MHoIHo,
    /// Same size, steps scaled by tier difficulty.
    MHoIHe,
    /// Size scaled by tier difficulty, same steps.
    MHeIHo,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Self::MHoIHo, Self::MHoIHe, Self::MHeIHo];

    pub fn heterogeneous_sizes(self) -> bool {
        self == Self::MHeIHo
    }

    pub fn heterogeneous_iterations(self) -> bool {
        self == Self::MHoIHe
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MHoIHo => "MHoIHo",
            Self::MHoIHe => "MHoIHe",
            Self::MHeIHo => "MHeIHo",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match norm.as_str() {
            "mhoiho" => Ok(Self::MHoIHo),
            "mhoihe" => Ok(Self::MHoIHe),
            "mheiho" => Ok(Self::MHeIHo),
            _ => Err(format!("unknown scenario `{s}` (expected MHoIHo, MHoIHe or MHeIHo)")),
        }
    }
}

/// Total SwiGLU parameter elements across all layers.
pub fn ffn_total(config: &ExpertConfig) -> u64 {
    (config.num_layers * 3 * config.hidden_size * config.intermediate_size) as u64
}

/// Nearest multiple of `granularity`, never below one granule.
pub fn round_to_granularity(x: f64, granularity: usize) -> usize {
    let g = granularity.max(1) as f64;
    ((x / g).round().max(1.0) * g) as usize
}

/// Step counts for the small and large tiers that match the moderate tier's
/// compute, rounded to `granularity`.
pub fn solve_iterations(
    ffn_s: u64,
    ffn_m: u64,
    ffn_l: u64,
    iter_m: usize,
    granularity: usize,
) -> Result<(usize, usize), BudgetError> {
    if ffn_s == 0 || ffn_m == 0 || ffn_l == 0 || iter_m == 0 {
        return Err(BudgetError::ZeroFfn);
    }
    let scale = |ffn: u64| iter_m as f64 * ffn as f64 / ffn_m as f64;
    Ok((
        round_to_granularity(scale(ffn_s), granularity),
        round_to_granularity(scale(ffn_l), granularity),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierAssignment {
    pub config: ExpertConfig,
    pub iterations: usize,
}

impl TierAssignment {
    pub fn compute(&self) -> u64 {
        ffn_total(&self.config) * self.iterations as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub scenario: Scenario,
    /// What each tier actually trains.
    pub assignments: BTreeMap<DifficultyTier, TierAssignment>,
    /// The balanced size/step ladder the assignments were drawn from. For the
    /// baseline every rung is the moderate tier.
    pub reference: BTreeMap<DifficultyTier, TierAssignment>,
    pub tolerance: f64,
}

impl BudgetPlan {
    pub fn assignment(&self, tier: DifficultyTier) -> Result<&TierAssignment, BudgetError> {
        self.assignments.get(&tier).ok_or(BudgetError::MissingTier(tier))
    }

    /// Σ over tiers of FFN size × steps.
    pub fn total_compute(&self) -> u64 {
        self.assignments.values().map(TierAssignment::compute).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub scenario: Scenario,
    /// `|ffn_s·iter_m − ffn_m·iter_s| / (ffn_m·iter_s)`
    pub small_deviation: f64,
    /// `|ffn_l·iter_m − ffn_m·iter_l| / (ffn_m·iter_l)`
    pub large_deviation: f64,
    pub tolerance: f64,
    /// Assignments that do not follow the scenario's shape.
    pub inconsistencies: Vec<String>,
    pub pass: bool,
}

impl fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: S-pair deviation {:.4}, L-pair deviation {:.4} (tolerance {}) {}",
            self.scenario,
            self.small_deviation,
            self.large_deviation,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )?;
        for issue in &self.inconsistencies {
            write!(f, "; {issue}")?;
        }
        Ok(())
    }
}

fn pair_deviation(ffn_x: u64, iter_x: usize, ffn_m: u64, iter_m: usize) -> f64 {
    let lhs = ffn_x as f64 * iter_m as f64;
    let rhs = ffn_m as f64 * iter_x as f64;
    (lhs - rhs).abs() / rhs
}

pub fn verify_budget(plan: &BudgetPlan) -> Result<BudgetReport, BudgetError> {
    use DifficultyTier::*;
    for tier in DifficultyTier::ALL {
        plan.assignment(tier)?;
        if !plan.reference.contains_key(&tier) {
            return Err(BudgetError::MissingTier(tier));
        }
    }
    let rung = |t: DifficultyTier| &plan.reference[&t];
    let (s, m, l) = (rung(Easy), rung(Moderate), rung(Difficult));
    if [s, m, l].iter().any(|r| r.iterations == 0 || ffn_total(&r.config) == 0) {
        return Err(BudgetError::ZeroFfn);
    }
    let small_deviation = pair_deviation(ffn_total(&s.config), s.iterations, ffn_total(&m.config), m.iterations);
    let large_deviation = pair_deviation(ffn_total(&l.config), l.iterations, ffn_total(&m.config), m.iterations);

    let mut inconsistencies = Vec::new();
    for tier in DifficultyTier::ALL {
        let a = &plan.assignments[&tier];
        let want_config = if plan.scenario.heterogeneous_sizes() { &rung(tier).config } else { &m.config };
        let want_iters = if plan.scenario.heterogeneous_iterations() {
            rung(tier).iterations
        } else {
            m.iterations
        };
        if !a.config.same_architecture(want_config) {
            inconsistencies.push(format!("{tier} tier uses the wrong model size for {}", plan.scenario));
        }
        if a.iterations != want_iters {
            inconsistencies.push(format!(
                "{tier} tier trains {} steps, {} expects {want_iters}",
                a.iterations, plan.scenario
            ));
        }
    }
    let pass = inconsistencies.is_empty()
        && small_deviation <= plan.tolerance
        && large_deviation <= plan.tolerance;
    Ok(BudgetReport {
        scenario: plan.scenario,
        small_deviation,
        large_deviation,
        tolerance: plan.tolerance,
        inconsistencies,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub granularity: usize,
    pub tolerance: f64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            granularity: DEFAULT_GRANULARITY,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Builds and verifies a plan. `tier_configs` holds the reference size of
/// each tier; the baseline only reads the moderate entry.
pub fn make_plan(
    scenario: Scenario,
    tier_configs: &BTreeMap<DifficultyTier, ExpertConfig>,
    iter_m: usize,
    options: PlanOptions,
) -> Result<BudgetPlan, BudgetError> {
    use DifficultyTier::*;
    let moderate = tier_configs.get(&Moderate).ok_or_else(|| {
        BudgetError::InconsistentScenario("a moderate-tier model size is always required".into())
    })?;
    if iter_m == 0 {
        return Err(BudgetError::ZeroFfn);
    }
    let reference: BTreeMap<DifficultyTier, TierAssignment> = if scenario == Scenario::MHoIHo {
        DifficultyTier::ALL
            .iter()
            .map(|&t| {
                let rung = TierAssignment {
                    config: moderate.clone(),
                    iterations: iter_m,
                };
                (t, rung)
            })
            .collect()
    } else {
        let size = |t: DifficultyTier| {
            tier_configs.get(&t).ok_or_else(|| {
                BudgetError::InconsistentScenario(format!("{scenario} needs a {t}-tier model size"))
            })
        };
        let (cs, cl) = (size(Easy)?, size(Difficult)?);
        let (iter_s, iter_l) = solve_iterations(
            ffn_total(cs),
            ffn_total(moderate),
            ffn_total(cl),
            iter_m,
            options.granularity,
        )?;
        [(Easy, cs, iter_s), (Moderate, moderate, iter_m), (Difficult, cl, iter_l)]
            .into_iter()
            .map(|(t, c, i)| {
                let rung = TierAssignment {
                    config: c.clone(),
                    iterations: i,
                };
                (t, rung)
            })
            .collect()
    };

    let assignments = DifficultyTier::ALL
        .iter()
        .map(|&t| {
            let config = if scenario.heterogeneous_sizes() { &reference[&t].config } else { moderate };
            let iterations = if scenario.heterogeneous_iterations() { reference[&t].iterations } else { iter_m };
            let a = TierAssignment {
                config: config.clone(),
                iterations,
            };
            (t, a)
        })
        .collect();
    let plan = BudgetPlan {
        scenario,
        assignments,
        reference,
        tolerance: options.tolerance,
    };
    let report = verify_budget(&plan)?;
    if !report.pass {
        return Err(BudgetError::BudgetViolation(Box::new(report)));
    }
    Ok(plan)
}

/// A published size ladder: small, medium and large reference models with
/// the medium step count.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSetup {
    pub name: &'static str,
    pub sizes: [&'static str; 3],
    pub iter_m: usize,
    /// Published (Iter_S, Iter_L).
    pub published_iterations: (usize, usize),
}

impl ReferenceSetup {
    pub fn all() -> Vec<ReferenceSetup> {
        vec![
            ReferenceSetup {
                name: "tiny-spread",
                sizes: ["5M", "10M", "15M"],
                iter_m: 400,
                published_iterations: (200, 600),
            },
            ReferenceSetup {
                name: "tiny-close",
                sizes: ["7.5M", "10M", "12.5M"],
                iter_m: 400,
                published_iterations: (300, 500),
            },
            ReferenceSetup {
                name: "small-close",
                sizes: ["90M", "115M", "135M"],
                iter_m: 400,
                published_iterations: (300, 500),
            },
        ]
    }

    pub fn by_name(name: &str) -> Option<ReferenceSetup> {
        Self::all().into_iter().find(|s| s.name == name)
    }

    pub fn tier_configs(&self) -> BTreeMap<DifficultyTier, ExpertConfig> {
        DifficultyTier::ALL
            .iter()
            .zip(self.sizes)
            .map(|(&t, name)| {
                let m = ReferenceModel::by_name(name).expect("reference size exists");
                (t, m.config)
            })
            .collect()
    }
}
