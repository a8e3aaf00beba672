//! Forest evaluation and scenario comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::btm::Forest;
use crate::budget::Scenario;
use crate::corpus::{DifficultyTier, TokenId};
use crate::ensemble::{document_perplexity, documents, perplexity, EnsembleError};
use crate::tinylm::ExpertCheckpoint;

/// Perplexities closer than this count as a shared win.
pub const TIE_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("domain `{domain}`: {source}")]
    Domain {
        domain: String,
        #[source]
        source: EnsembleError,
    },
    #[error("results disagree on the evaluated domains: {0}")]
    DomainSetMismatch(String),
    #[error("two results for {setup}/{scenario}")]
    DuplicateResult { setup: String, scenario: Scenario },
    #[error("no results to compare")]
    NoResults,
    #[error("forest has no experts to evaluate")]
    EmptyForest,
    #[error("no {0} checkpoints recorded in the forest")]
    MissingCheckpoints(EvalStep),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed csv row: {0}")]
    CsvRow(String),
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Trained,
    EvalOnly,
}

impl DomainKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Trained => "trained",
            Self::EvalOnly => "eval_only",
        }
    }
}

impl std::str::FromStr for DomainKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "trained" => Ok(Self::Trained),
            "eval_only" => Ok(Self::EvalOnly),
            _ => Err(format!("unknown domain kind `{s}`")),
        }
    }
}

/// Which checkpoint of each expert gets ensembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalStep {
    #[default]
    Final,
    Branch,
}

impl std::fmt::Display for EvalStep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Final => "final",
            Self::Branch => "branch",
        })
    }
}

impl std::str::FromStr for EvalStep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "final" => Ok(Self::Final),
            "branch" => Ok(Self::Branch),
            _ => Err(format!("unknown eval step `{s}` (expected final or branch)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDomain {
    pub name: String,
    pub kind: DomainKind,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub setup: String,
    /// Posterior resets every `document_len` tokens; `None` scores each
    /// domain as one continuous sequence.
    pub document_len: Option<usize>,
    pub eval_step: EvalStep,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetadata {
    /// BTM iteration the forest had completed.
    pub iteration: usize,
    pub eval_step: EvalStep,
    pub document_len: Option<usize>,
    /// Checkpoint ids of the ensembled experts by tier.
    pub checkpoints: BTreeMap<DifficultyTier, String>,
    pub checkpoint_steps: BTreeMap<DifficultyTier, usize>,
    pub train_seeds: BTreeMap<DifficultyTier, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub setup: String,
    pub scenario: Scenario,
    pub perplexity: BTreeMap<String, f64>,
    pub kind: BTreeMap<String, DomainKind>,
    #[serde(default)]
    pub metadata: EvalMetadata,
}

/// Ensemble perplexity of the forest on each domain's tokens. Domains are
/// scored in parallel on the current rayon pool.
pub fn evaluate_forest(forest: &Forest, domains: &[EvalDomain], options: &EvalOptions) -> Result<EvalResult> {
    let chosen = match options.eval_step {
        EvalStep::Final => &forest.experts,
        EvalStep::Branch => &forest.branch_points,
    };
    if forest.experts.is_empty() {
        return Err(ReportError::EmptyForest);
    }
    if chosen.len() != forest.experts.len() {
        return Err(ReportError::MissingCheckpoints(options.eval_step));
    }
    let members: Vec<&ExpertCheckpoint> = chosen.values().collect();
    let scores: Vec<Result<f64>> = domains
        .par_iter()
        .map(|d| {
            let ppl = match options.document_len {
                Some(len) => document_perplexity(&members, &forest.prior, &documents(&d.tokens, len)),
                None => perplexity(&members, &forest.prior, &d.tokens),
            };
            ppl.map_err(|source| ReportError::Domain {
                domain: d.name.clone(),
                source,
            })
        })
        .collect();
    let mut result = EvalResult {
        setup: options.setup.clone(),
        scenario: forest.plan.scenario,
        perplexity: BTreeMap::new(),
        kind: BTreeMap::new(),
        metadata: EvalMetadata {
            iteration: forest.iteration(),
            eval_step: options.eval_step,
            document_len: options.document_len,
            checkpoints: chosen.iter().map(|(t, c)| (*t, c.id().to_string())).collect(),
            checkpoint_steps: chosen.iter().map(|(t, c)| (*t, c.step())).collect(),
            train_seeds: forest
                .history
                .last()
                .map(|h| h.experts.iter().map(|(t, r)| (*t, r.train_seed)).collect())
                .unwrap_or_default(),
        },
    };
    for (d, score) in domains.iter().zip(scores) {
        result.perplexity.insert(d.name.clone(), score?);
        result.kind.insert(d.name.clone(), d.kind);
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Column {
    pub setup: String,
    pub scenario: Scenario,
}

/// Best scenario(s) of one setup on one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupOutcome {
    pub setup: String,
    pub winners: Vec<Scenario>,
    /// More than one scenario within the tie threshold of the minimum.
    pub tied: bool,
    /// Gap from the best to the best non-winning scenario.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub name: String,
    pub kind: DomainKind,
    /// Aligned with [`ComparisonReport::columns`].
    pub perplexity: Vec<f64>,
    pub outcomes: Vec<SetupOutcome>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinCount {
    pub trained: usize,
    pub eval_only: usize,
    /// Tied domains, credited to every tied scenario.
    pub shared_trained: usize,
    pub shared_eval_only: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub columns: Vec<Column>,
    /// Trained domains first, then evaluation-only; by name within each group.
    pub domains: Vec<DomainRow>,
    /// Aligned with `columns`.
    pub wins: Vec<WinCount>,
}

fn setup_outcome(setup: &str, values: &[(Scenario, f64)]) -> SetupOutcome {
    let best = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let winners: Vec<Scenario> = values.iter().filter(|v| v.1 - best <= TIE_THRESHOLD).map(|v| v.0).collect();
    let runner_up = values
        .iter()
        .filter(|v| !winners.contains(&v.0))
        .map(|v| v.1)
        .fold(f64::INFINITY, f64::min);
    SetupOutcome {
        setup: setup.to_string(),
        tied: winners.len() > 1,
        winners,
        margin: runner_up.is_finite().then(|| runner_up - best),
    }
}

/// Per-domain winners within each setup. Input order does not matter.
pub fn compare(results: &[EvalResult]) -> Result<ComparisonReport> {
    let first = results.first().ok_or(ReportError::NoResults)?;
    for r in results {
        if r.kind != first.kind || r.perplexity.keys().ne(first.perplexity.keys()) {
            let a: BTreeSet<&String> = first.kind.keys().collect();
            let b: BTreeSet<&String> = r.kind.keys().collect();
            let diff: Vec<&&String> = a.symmetric_difference(&b).collect();
            return Err(ReportError::DomainSetMismatch(if diff.is_empty() {
                format!("{}/{} labels a domain differently", r.setup, r.scenario)
            } else {
                format!("{diff:?}")
            }));
        }
    }
    let mut by_column: BTreeMap<Column, &EvalResult> = BTreeMap::new();
    for r in results {
        let col = Column {
            setup: r.setup.clone(),
            scenario: r.scenario,
        };
        if by_column.insert(col, r).is_some() {
            return Err(ReportError::DuplicateResult {
                setup: r.setup.clone(),
                scenario: r.scenario,
            });
        }
    }
    let columns: Vec<Column> = by_column.keys().cloned().collect();
    let setups: BTreeSet<&str> = columns.iter().map(|c| c.setup.as_str()).collect();

    let mut names: Vec<(&DomainKind, &String)> = first.kind.iter().map(|(n, k)| (k, n)).collect();
    names.sort();
    let mut wins = vec![WinCount::default(); columns.len()];
    let mut domains = Vec::new();
    for (&kind, name) in names {
        let perplexity: Vec<f64> = columns.iter().map(|c| by_column[c].perplexity[name]).collect();
        let mut outcomes = Vec::new();
        for setup in &setups {
            let values: Vec<(Scenario, f64)> = columns
                .iter()
                .zip(&perplexity)
                .filter(|(c, _)| c.setup == *setup)
                .map(|(c, p)| (c.scenario, *p))
                .collect();
            let outcome = setup_outcome(setup, &values);
            for (i, c) in columns.iter().enumerate() {
                if c.setup != *setup || !outcome.winners.contains(&c.scenario) {
                    continue;
                }
                let w = &mut wins[i];
                match (kind, outcome.tied) {
                    (DomainKind::Trained, false) => w.trained += 1,
                    (DomainKind::Trained, true) => w.shared_trained += 1,
                    (DomainKind::EvalOnly, false) => w.eval_only += 1,
                    (DomainKind::EvalOnly, true) => w.shared_eval_only += 1,
                }
            }
            outcomes.push(outcome);
        }
        domains.push(DomainRow {
            name: name.clone(),
            kind,
            perplexity,
            outcomes,
        });
    }
    Ok(ComparisonReport {
        columns,
        domains,
        wins,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(format!("unknown report format `{s}`")),
        }
    }
}

pub fn emit(report: &ComparisonReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Markdown => Ok(to_markdown(report).into_bytes()),
        ReportFormat::Csv => to_csv(report),
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report)?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

fn is_best(report: &ComparisonReport, row: &DomainRow, col: usize) -> bool {
    let c = &report.columns[col];
    row.outcomes
        .iter()
        .any(|o| o.setup == c.setup && o.winners.contains(&c.scenario))
}

fn to_markdown(report: &ComparisonReport) -> String {
    let mut out = String::new();
    let header: Vec<String> = report
        .columns
        .iter()
        .map(|c| format!("{} {}", c.setup, c.scenario))
        .collect();
    let _ = writeln!(out, "| Domain | {} |", header.join(" | "));
    let _ = writeln!(out, "|---|{}", "---:|".repeat(header.len()));
    for (kind, title) in [(DomainKind::Trained, "Trained"), (DomainKind::EvalOnly, "Evaluation only")] {
        let rows: Vec<&DomainRow> = report.domains.iter().filter(|d| d.kind == kind).collect();
        if rows.is_empty() {
            continue;
        }
        let _ = writeln!(out, "| *{title}* |{}", " |".repeat(header.len()));
        for row in rows {
            let cells: Vec<String> = row
                .perplexity
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if is_best(report, row, i) {
                        format!("**{p:.2}**")
                    } else {
                        format!("{p:.2}")
                    }
                })
                .collect();
            let _ = writeln!(out, "| {} | {} |", row.name, cells.join(" | "));
        }
    }
    out.push('\n');
    let _ = writeln!(out, "| Column | Trained wins | Shared | Eval-only wins | Shared |");
    let _ = writeln!(out, "|---|---:|---:|---:|---:|");
    for (c, w) in report.columns.iter().zip(&report.wins) {
        let _ = writeln!(
            out,
            "| {} {} | {} | {} | {} | {} |",
            c.setup, c.scenario, w.trained, w.shared_trained, w.eval_only, w.shared_eval_only
        );
    }
    out
}

const CSV_HEADER: [&str; 5] = ["domain", "kind", "setup", "scenario", "perplexity"];

/// Long format, one row per (domain, column); `{}` float formatting
/// round-trips exactly.
fn to_csv(report: &ComparisonReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for row in &report.domains {
        for (c, p) in report.columns.iter().zip(&row.perplexity) {
            w.write_record([
                row.name.as_str(),
                row.kind.as_str(),
                c.setup.as_str(),
                c.scenario.as_str(),
                &p.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| ReportError::CsvRow(e.to_string()))
}

/// Rebuilds the per-column results a CSV report was made from (metadata is
/// not part of the CSV).
pub fn results_from_csv(bytes: &[u8]) -> Result<Vec<EvalResult>> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut by_column: BTreeMap<(String, Scenario), EvalResult> = BTreeMap::new();
    for record in r.records() {
        let record = record?;
        if record.len() != CSV_HEADER.len() {
            return Err(ReportError::CsvRow(format!("{record:?}")));
        }
        let bad = |what: String| ReportError::CsvRow(what);
        let kind: DomainKind = record[1].parse().map_err(bad)?;
        let scenario: Scenario = record[3].parse().map_err(bad)?;
        let ppl: f64 = record[4].parse().map_err(|e| ReportError::CsvRow(format!("{e}")))?;
        let entry = by_column
            .entry((record[2].to_string(), scenario))
            .or_insert_with(|| EvalResult {
                setup: record[2].to_string(),
                scenario,
                perplexity: BTreeMap::new(),
                kind: BTreeMap::new(),
                metadata: EvalMetadata::default(),
            });
        entry.perplexity.insert(record[0].to_string(), ppl);
        entry.kind.insert(record[0].to_string(), kind);
    }
    Ok(by_column.into_values().collect())
}
