//! Closed-loop simulation of the network under learned and fixed
//! controllers, disturbance scheduling, model variation and nonlinearity
//! injection, metrics, and the scripted experiments with their CSV/JSON
//! artifacts.

mod experiments;
mod report;
mod sim;

pub use experiments::{
    run_experiment, CellSummary, ComparisonTotals, ExperimentKind, ExperimentReport,
};
pub use report::{write_iterations_csv, write_summary_json, write_trajectory_csv};
pub use sim::{simulate, ClosedLoopSim, ControllerMode, LearnOptions, SimOutcome, SimSetup};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::learner::Gain;

/// Piecewise-constant disturbance: ordered, non-overlapping segments; zero
/// outside every segment.
#[derive(Debug, Clone)]
pub struct DisturbanceSchedule {
    segments: Vec<(usize, Option<usize>, DVector<f64>)>,
    dim: usize,
}

impl DisturbanceSchedule {
    pub fn new(segments: Vec<(usize, Option<usize>, DVector<f64>)>, dim: usize) -> DisturbanceSchedule {
        DisturbanceSchedule { segments, dim }
    }

    pub fn zero(dim: usize) -> DisturbanceSchedule {
        DisturbanceSchedule {
            segments: Vec::new(),
            dim,
        }
    }

    /// Constant disturbance from step 0 onward.
    pub fn constant(value: DVector<f64>) -> DisturbanceSchedule {
        let dim = value.len();
        DisturbanceSchedule {
            segments: vec![(0, None, value)],
            dim,
        }
    }

    /// Single-step spike at `at`.
    pub fn impulse(at: usize, value: DVector<f64>) -> DisturbanceSchedule {
        let dim = value.len();
        DisturbanceSchedule {
            segments: vec![(at, Some(at + 1), value)],
            dim,
        }
    }

    pub fn from_config(cfg: &crate::config::DisturbanceConfig, dim: usize) -> DisturbanceSchedule {
        DisturbanceSchedule {
            segments: cfg
                .segments
                .iter()
                .map(|s| (s.start, s.end, DVector::from_vec(s.value.clone())))
                .collect(),
            dim,
        }
    }

    pub fn value_at(&self, step: usize) -> DVector<f64> {
        for (start, end, value) in &self.segments {
            let inside = step >= *start && end.map_or(true, |e| step < e);
            if inside {
                return value.clone();
            }
        }
        DVector::zeros(self.dim)
    }
}

/// One simulated step: the state of the plant and controller at time k.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    /// Temperature deviation at k.
    pub t: DVector<f64>,
    /// Power in effect during [k, k+1).
    pub p: DVector<f64>,
    /// Optimality-condition error after applying the increment.
    pub e: DVector<f64>,
    pub du: DVector<f64>,
    pub stage_cost: f64,
    /// Which gain in the update sequence was active (0 = initial gain).
    pub gain_id: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryLog {
    pub steps: Vec<StepRecord>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn cumulative_cost(&self, from_step: usize) -> f64 {
        self.steps
            .iter()
            .filter(|s| s.step >= from_step)
            .map(|s| s.stage_cost)
            .sum()
    }

    /// First step at which a gain other than the initial one was active.
    pub fn first_update_step(&self) -> Option<usize> {
        self.steps.iter().find(|s| s.gain_id > 0).map(|s| s.step)
    }
}

/// Normalized gain error `|K - K_ref|_F / |K_ref|_F`.
pub fn gain_distance(k: &Gain, k_ref: &Gain) -> Result<f64> {
    if k.0.shape() != k_ref.0.shape() {
        return Err(Error::DimensionMismatch {
            context: "gain_distance",
            expected: format!("{}x{}", k_ref.0.nrows(), k_ref.0.ncols()),
            found: format!("{}x{}", k.0.nrows(), k.0.ncols()),
        });
    }
    let denom = k_ref.0.norm();
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok((&k.0 - &k_ref.0).norm() / denom)
}

/// Per-step stage cost `1/2 (e^T Q_e e + du^T R_e du)` recomputed from a log.
pub fn stage_cost_series(log: &TrajectoryLog, q_e: &DMatrix<f64>, r_e: &DMatrix<f64>) -> Vec<f64> {
    log.steps
        .iter()
        .map(|s| {
            0.5 * ((s.e.transpose() * q_e * &s.e)[(0, 0)] + (s.du.transpose() * r_e * &s.du)[(0, 0)])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_lookup() {
        let sched = DisturbanceSchedule::new(
            vec![
                (10, Some(11), DVector::from_vec(vec![1.0])),
                (20, Some(30), DVector::from_vec(vec![2.0])),
                (30, None, DVector::from_vec(vec![3.0])),
            ],
            1,
        );
        assert_eq!(sched.value_at(0)[0], 0.0);
        assert_eq!(sched.value_at(10)[0], 1.0);
        assert_eq!(sched.value_at(11)[0], 0.0);
        assert_eq!(sched.value_at(25)[0], 2.0);
        assert_eq!(sched.value_at(30)[0], 3.0);
        assert_eq!(sched.value_at(100_000)[0], 3.0);
    }

    #[test]
    fn gain_distance_examples() {
        let k = Gain(nalgebra::dmatrix![1.0, 2.0; 3.0, 4.0]);
        assert_eq!(gain_distance(&k, &k).unwrap(), 0.0);
        let doubled = Gain(&k.0 * 2.0);
        assert!((gain_distance(&doubled, &k).unwrap() - 1.0).abs() < 1e-15);
        let zero = Gain(DMatrix::zeros(2, 2));
        assert!(matches!(gain_distance(&k, &zero), Err(Error::ZeroReference)));
    }
}
