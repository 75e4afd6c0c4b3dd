//! The scripted experiments: the model-variation sweep, the disturbance
//! response, the nominal-controller comparison, and the direct-vs-indirect
//! comparison on the nonlinear plant. Each writes a trajectory CSV, an
//! iteration-log CSV when a run learns, and a JSON summary, into the
//! caller's output directory.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::baseline::{indirect_controller, optimal_regulator};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::report::{write_iterations_csv, write_summary_json, write_trajectory_csv};
use crate::harness::sim::{simulate, ControllerMode, LearnOptions, SimOutcome, SimSetup};
use crate::harness::gain_distance;
use crate::network::{check_optimality, solve_dispatch, OptimalityReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Variation,
    Disturbance,
    NominalComparison,
    IndirectComparison,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Variation => "variation",
            ExperimentKind::Disturbance => "disturbance",
            ExperimentKind::NominalComparison => "nominal-comparison",
            ExperimentKind::IndirectComparison => "indirect-comparison",
        }
    }

    pub fn all() -> [ExperimentKind; 4] {
        [
            ExperimentKind::Variation,
            ExperimentKind::Disturbance,
            ExperimentKind::NominalComparison,
            ExperimentKind::IndirectComparison,
        ]
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<ExperimentKind> {
        ExperimentKind::all()
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Parse(format!(
                    "unknown experiment '{s}' (expected one of: {})",
                    ExperimentKind::all().map(|k| k.name()).join(", ")
                ))
            })
    }
}

/// Per-cell metrics of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub key: String,
    pub variation: f64,
    pub nonlinearity: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Normalized distance of the learned gain to the true-plant Riccati gain.
    pub rl_distance: f64,
    /// Normalized distance of the identified-model gain, when computed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id_distance: Option<f64>,
    /// Iterations of the zero-nonlinearity run on the same variation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear_iterations: Option<usize>,
    pub optimality: OptimalityReport,
    /// Max per-component gap between the final (P, T) and the dispatch optimum.
    pub dispatch_power_error: f64,
    pub dispatch_temperature_error: f64,
    pub cumulative_stage_cost: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonTotals {
    pub first_update_step: usize,
    pub learning_cost: f64,
    pub nominal_cost: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub cells: Vec<CellSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub totals: Option<ComparisonTotals>,
}

fn summarize(key: String, variation: f64, nonlinearity: f64, outcome: &SimOutcome) -> Result<CellSummary> {
    let oracle = optimal_regulator(&outcome.true_aug)?;
    let rl_distance = gain_distance(&outcome.final_gain, &oracle.gain)?;
    let (iterations, converged) = match &outcome.learning {
        Some(l) => (l.records.len(), l.converged),
        None => (0, true),
    };
    // residuals against the dispatch optimum under the final disturbance
    let f_diag = &outcome.f_diag;
    let g_diag = &outcome.g_diag;
    let optimality = check_optimality(
        &outcome.true_plant.lq,
        f_diag,
        g_diag,
        &outcome.final_power,
        &outcome.final_temperature,
        &outcome.final_disturbance,
        1e-6,
    );
    let dispatch = solve_dispatch(&outcome.true_plant.lq, f_diag, g_diag, &outcome.final_disturbance)?;
    let dispatch_power_error = (&outcome.final_power - &dispatch.p_star).amax();
    let dispatch_temperature_error = (&outcome.final_temperature - &dispatch.t_star).amax();
    let from = outcome.log.first_update_step().unwrap_or(0);
    Ok(CellSummary {
        key,
        variation,
        nonlinearity,
        iterations,
        converged,
        rl_distance,
        id_distance: None,
        linear_iterations: None,
        optimality,
        dispatch_power_error,
        dispatch_temperature_error,
        cumulative_stage_cost: outcome.log.cumulative_cost(from),
    })
}

/// Learn-mode runs across the configured variation sweep. Cells run as
/// independent parallel jobs; results keep the sweep order.
pub fn run_variation_cells(cfg: &RunConfig, seed: u64) -> Result<Vec<(f64, SimOutcome)>> {
    cfg.variation_sweep
        .par_iter()
        .map(|&variation| {
            let setup = SimSetup::from_config(cfg, variation, 0.0, seed)?;
            let outcome = simulate(&setup, &ControllerMode::Learn(LearnOptions::default()))?;
            Ok((variation, outcome))
        })
        .collect()
}

fn run_variation(cfg: &RunConfig, seed: u64, out: &Path) -> Result<ExperimentReport> {
    let cells = run_variation_cells(cfg, seed)?;
    let mut summaries = Vec::with_capacity(cells.len());
    for (variation, outcome) in &cells {
        summaries.push(summarize(
            format!("variation={variation}"),
            *variation,
            0.0,
            outcome,
        )?);
    }
    let representative = &cells[0].1;
    write_trajectory_csv(&out.join("variation.csv"), &representative.log)?;
    if let Some(learning) = &representative.learning {
        write_iterations_csv(&out.join("variation.iterations.csv"), &learning.records)?;
    }
    let report = ExperimentReport {
        experiment: "variation".into(),
        config_hash: cfg.hash(),
        seed,
        cells: summaries,
        totals: None,
    };
    write_summary_json(&out.join("variation.summary.json"), &report)?;
    Ok(report)
}

fn run_disturbance(cfg: &RunConfig, seed: u64, out: &Path) -> Result<ExperimentReport> {
    let setup = SimSetup::from_config(cfg, cfg.variation, 0.0, seed)?;
    let outcome = simulate(&setup, &ControllerMode::Learn(LearnOptions::default()))?;
    let summary = summarize(
        format!("variation={}", cfg.variation),
        cfg.variation,
        0.0,
        &outcome,
    )?;
    write_trajectory_csv(&out.join("disturbance.csv"), &outcome.log)?;
    if let Some(learning) = &outcome.learning {
        write_iterations_csv(&out.join("disturbance.iterations.csv"), &learning.records)?;
    }
    let report = ExperimentReport {
        experiment: "disturbance".into(),
        config_hash: cfg.hash(),
        seed,
        cells: vec![summary],
        totals: None,
    };
    write_summary_json(&out.join("disturbance.summary.json"), &report)?;
    Ok(report)
}

/// Learning controller vs the frozen nominal gain on the same disturbance
/// trace and seed; the comparison window starts at the first gain update.
pub fn run_nominal_cells(cfg: &RunConfig, seed: u64) -> Result<(SimOutcome, SimOutcome)> {
    let setup = SimSetup::from_config(cfg, cfg.variation, 0.0, seed)?;
    let learning = simulate(&setup, &ControllerMode::Learn(LearnOptions::default()))?;
    let nominal = simulate(&setup, &ControllerMode::Nominal)?;
    Ok((learning, nominal))
}

fn run_nominal_comparison(cfg: &RunConfig, seed: u64, out: &Path) -> Result<ExperimentReport> {
    let (learning, nominal) = run_nominal_cells(cfg, seed)?;
    let first_update = learning
        .log
        .first_update_step()
        .ok_or_else(|| Error::Io("learning run recorded no update".into()))?;
    let totals = ComparisonTotals {
        first_update_step: first_update,
        learning_cost: learning.log.cumulative_cost(first_update),
        nominal_cost: nominal.log.cumulative_cost(first_update),
    };
    let mut cells = vec![summarize(
        format!("learning,variation={}", cfg.variation),
        cfg.variation,
        0.0,
        &learning,
    )?];
    cells.push(summarize(
        format!("nominal,variation={}", cfg.variation),
        cfg.variation,
        0.0,
        &nominal,
    )?);
    write_trajectory_csv(&out.join("nominal-comparison.csv"), &learning.log)?;
    write_trajectory_csv(&out.join("nominal-comparison.nominal.csv"), &nominal.log)?;
    if let Some(l) = &learning.learning {
        write_iterations_csv(&out.join("nominal-comparison.iterations.csv"), &l.records)?;
    }
    let report = ExperimentReport {
        experiment: "nominal-comparison".into(),
        config_hash: cfg.hash(),
        seed,
        cells,
        totals: Some(totals),
    };
    write_summary_json(&out.join("nominal-comparison.summary.json"), &report)?;
    Ok(report)
}

/// One cell of the direct-vs-indirect comparison.
pub struct ComparisonCell {
    pub variation: f64,
    pub nonlinearity: f64,
    pub outcome: SimOutcome,
    pub id_distance: f64,
    pub linear_iterations: usize,
}

/// For every comparison variation: a zero-nonlinearity reference run, then
/// one learning run per nonlinearity weight, with the indirect controller
/// identified from exactly the data the learner collected.
pub fn run_comparison_cells(cfg: &RunConfig, seed: u64) -> Result<Vec<ComparisonCell>> {
    let grid: Vec<f64> = cfg.comparison_variations.clone();
    let per_variation: Vec<Result<Vec<ComparisonCell>>> = grid
        .par_iter()
        .map(|&variation| {
            let linear_setup = SimSetup::from_config(cfg, variation, 0.0, seed)?;
            let linear = simulate(&linear_setup, &ControllerMode::Learn(LearnOptions::default()))?;
            let linear_iterations = linear.learning.as_ref().map(|l| l.records.len()).unwrap_or(0);
            let mut cells = Vec::new();
            for &w in &cfg.nonlinearity_sweep {
                let setup = SimSetup::from_config(cfg, variation, w, seed)?;
                let outcome = simulate(&setup, &ControllerMode::Learn(LearnOptions::default()))?;
                let learning = outcome
                    .learning
                    .as_ref()
                    .ok_or_else(|| Error::Io("comparison run recorded no learning".into()))?;
                let k_id = indirect_controller(&learning.batches, &outcome.true_aug)?;
                let oracle = optimal_regulator(&outcome.true_aug)?;
                let id_distance = gain_distance(&k_id, &oracle.gain)?;
                cells.push(ComparisonCell {
                    variation,
                    nonlinearity: w,
                    outcome,
                    id_distance,
                    linear_iterations,
                });
            }
            Ok(cells)
        })
        .collect();
    let mut flat = Vec::new();
    for group in per_variation {
        flat.extend(group?);
    }
    Ok(flat)
}

fn run_indirect_comparison(cfg: &RunConfig, seed: u64, out: &Path) -> Result<ExperimentReport> {
    let cells = run_comparison_cells(cfg, seed)?;
    let mut summaries = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut summary = summarize(
            format!("w={},variation={}", cell.nonlinearity, cell.variation),
            cell.variation,
            cell.nonlinearity,
            &cell.outcome,
        )?;
        summary.id_distance = Some(cell.id_distance);
        summary.linear_iterations = Some(cell.linear_iterations);
        summaries.push(summary);
    }
    let representative = &cells[0].outcome;
    write_trajectory_csv(&out.join("indirect-comparison.csv"), &representative.log)?;
    if let Some(learning) = &representative.learning {
        write_iterations_csv(
            &out.join("indirect-comparison.iterations.csv"),
            &learning.records,
        )?;
    }
    let report = ExperimentReport {
        experiment: "indirect-comparison".into(),
        config_hash: cfg.hash(),
        seed,
        cells: summaries,
        totals: None,
    };
    write_summary_json(&out.join("indirect-comparison.summary.json"), &report)?;
    Ok(report)
}

/// Execute a named experiment and write its artifacts into `out`.
pub fn run_experiment(kind: ExperimentKind, cfg: &RunConfig, out: &Path) -> Result<ExperimentReport> {
    let seed = cfg.resolved_seed()?;
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    match kind {
        ExperimentKind::Variation => run_variation(cfg, seed, out),
        ExperimentKind::Disturbance => run_disturbance(cfg, seed, out),
        ExperimentKind::NominalComparison => run_nominal_comparison(cfg, seed, out),
        ExperimentKind::IndirectComparison => run_indirect_comparison(cfg, seed, out),
    }
}
