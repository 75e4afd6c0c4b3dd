//! The closed-loop plant the controllers run against.
//!
//! With no nonlinearity the simulator advances the physical temperature
//! dynamics and derives the augmented state from the recorded histories.
//! With a nonzero perturbation weight it advances the augmented recursion
//! directly (adding `w * eps^2` element-wise and the exact lift of every
//! disturbance change) and reconstructs the physical trajectory from the
//! increments; the two paths coincide when the weight is zero.

use nalgebra::{DMatrix, DVector};

use crate::augment::{build_augmented, output_and_error, AugmentedSystem};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::{DisturbanceSchedule, StepRecord, TrajectoryLog};
use crate::learner::{
    initial_controller, run_policy_iteration, AugmentedDynamics, Gain, LearningOutcome,
    PolicyIterationOptions, ProbingNoise, ProbingNoiseConfig, ThetaMethod,
};
use crate::network::{discretize, DhsPlant, NetworkTopology};
use crate::numerics::spectral_radius;

/// Resolved inputs of one simulation run.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub nominal_topology: NetworkTopology,
    pub variation: f64,
    pub tau: f64,
    pub f_diag: DVector<f64>,
    pub g_diag: DVector<f64>,
    pub q_e: DMatrix<f64>,
    pub r_e: DMatrix<f64>,
    pub schedule: DisturbanceSchedule,
    pub noise_config: ProbingNoiseConfig,
    pub nonlinearity: f64,
    pub horizon: usize,
    pub initial_temperature: DVector<f64>,
    pub divergence_bound: f64,
    pub stop_tolerance: f64,
    pub iteration_cap: usize,
    pub method: ThetaMethod,
}

impl SimSetup {
    /// Per-cell setup: the config's defaults with this cell's variation,
    /// nonlinearity and seed.
    pub fn from_config(cfg: &RunConfig, variation: f64, nonlinearity: f64, seed: u64) -> Result<SimSetup> {
        cfg.validate()?;
        let n = cfg.n();
        let initial_temperature = match &cfg.initial_temperature {
            Some(t0) => DVector::from_vec(t0.clone()),
            None => DVector::zeros(n),
        };
        Ok(SimSetup {
            nominal_topology: cfg.topology.clone(),
            variation,
            tau: cfg.tau,
            f_diag: cfg.f_diag(),
            g_diag: cfg.g_diag(),
            q_e: cfg.q_e(),
            r_e: cfg.r_e(),
            schedule: DisturbanceSchedule::from_config(&cfg.disturbance, n),
            noise_config: cfg.noise_config(seed),
            nonlinearity,
            horizon: cfg.horizon,
            initial_temperature,
            divergence_bound: cfg.divergence_bound,
            stop_tolerance: cfg.stop_tolerance,
            iteration_cap: cfg.iteration_cap,
            method: cfg.method,
        })
    }
}

/// Controller wiring of a run.
#[derive(Debug, Clone)]
pub enum ControllerMode {
    /// On-policy learning from the nominal initial gain, then the frozen
    /// learned gain with the probing noise off.
    Learn(LearnOptions),
    /// A fixed externally supplied gain, no probing noise.
    Fixed(Gain),
    /// The nominal initial gain, frozen for the whole run.
    Nominal,
}

#[derive(Debug, Clone, Default)]
pub struct LearnOptions {
    /// Keep collecting and updating until the horizon instead of freezing
    /// the gain once the stop tolerance is met.
    pub continuous_updates: bool,
}

/// Closed-loop simulator over the true (varied) plant.
pub struct ClosedLoopSim {
    plant: DhsPlant,
    aug: AugmentedSystem,
    f_diag: DVector<f64>,
    g_diag: DVector<f64>,
    q_e: DMatrix<f64>,
    r_e: DMatrix<f64>,
    schedule: DisturbanceSchedule,
    nonlinearity: f64,
    divergence_bound: f64,
    step: usize,
    t: DVector<f64>,
    p: DVector<f64>,
    eps: DVector<f64>,
    log: TrajectoryLog,
}

impl ClosedLoopSim {
    pub fn new(
        plant: DhsPlant,
        aug: AugmentedSystem,
        f_diag: DVector<f64>,
        g_diag: DVector<f64>,
        q_e: DMatrix<f64>,
        r_e: DMatrix<f64>,
        schedule: DisturbanceSchedule,
        nonlinearity: f64,
        divergence_bound: f64,
        initial_temperature: DVector<f64>,
    ) -> Result<ClosedLoopSim> {
        let nt = plant.dim();
        let p0 = DVector::zeros(nt);
        let (_, e_init) = output_and_error(&initial_temperature, &p0, &f_diag, &g_diag)?;
        let mut eps = DVector::zeros(2 * nt);
        eps.rows_mut(nt, nt).copy_from(&e_init);
        Ok(ClosedLoopSim {
            plant,
            aug,
            f_diag,
            g_diag,
            q_e,
            r_e,
            schedule,
            nonlinearity,
            divergence_bound,
            step: 0,
            t: initial_temperature,
            p: p0,
            eps,
            log: TrajectoryLog::default(),
        })
    }

    pub fn log(&self) -> &TrajectoryLog {
        &self.log
    }

    pub fn into_log(self) -> TrajectoryLog {
        self.log
    }

    pub fn temperature(&self) -> &DVector<f64> {
        &self.t
    }

    pub fn power(&self) -> &DVector<f64> {
        &self.p
    }
}

impl AugmentedDynamics for ClosedLoopSim {
    fn state_dim(&self) -> usize {
        self.aug.n
    }

    fn input_dim(&self) -> usize {
        self.aug.m
    }

    fn state(&self) -> DVector<f64> {
        self.eps.clone()
    }

    fn step_count(&self) -> usize {
        self.step
    }

    fn apply(&mut self, delta_u: &DVector<f64>) -> Result<DVector<f64>> {
        let nt = self.plant.dim();
        if delta_u.len() != nt {
            return Err(Error::DimensionMismatch {
                context: "ClosedLoopSim::apply",
                expected: format!("{nt}-vector"),
                found: format!("{}", delta_u.len()),
            });
        }
        let k = self.step;
        let d_now = self.schedule.value_at(k);
        let p_new = &self.p + delta_u;

        let (t_next, eps_next, e_now) = if self.nonlinearity == 0.0 {
            let (_, e_now) = output_and_error(&self.t, &p_new, &self.f_diag, &self.g_diag)?;
            let t_next = self.plant.step(&self.t, &p_new, &d_now)?;
            let mut eps_next = DVector::zeros(2 * nt);
            eps_next.rows_mut(0, nt).copy_from(&(&t_next - &self.t));
            eps_next.rows_mut(nt, nt).copy_from(&e_now);
            (t_next, eps_next, e_now)
        } else {
            // Nonlinear augmented recursion with the exact lift of the
            // disturbance change; for w = 0 this is algebraically the same
            // trajectory as the physical branch.
            let d_prev = if k == 0 {
                DVector::zeros(nt)
            } else {
                self.schedule.value_at(k - 1)
            };
            let mut eps_next = &self.aug.a_eps * &self.eps
                + &self.aug.b_eps * delta_u
                + self.eps.map(|x| self.nonlinearity * x * x);
            let kick = &self.plant.bd * (&d_now - &d_prev);
            for i in 0..nt {
                eps_next[i] += kick[i];
            }
            let t_next = &self.t + eps_next.rows(0, nt);
            let e_now: DVector<f64> = eps_next.rows(nt, nt).into();
            (t_next, eps_next, e_now)
        };

        if t_next.amax() > self.divergence_bound {
            return Err(Error::Diverged {
                step: k,
                norm: t_next.amax(),
            });
        }

        let stage_cost = 0.5
            * ((e_now.transpose() * &self.q_e * &e_now)[(0, 0)]
                + (delta_u.transpose() * &self.r_e * delta_u)[(0, 0)]);
        self.log.steps.push(StepRecord {
            step: k,
            t: self.t.clone(),
            p: p_new.clone(),
            e: e_now,
            du: delta_u.clone(),
            stage_cost,
            gain_id: 0,
        });

        self.t = t_next;
        self.p = p_new;
        self.eps = eps_next;
        self.step += 1;
        Ok(self.eps.clone())
    }
}

/// Everything a finished run exposes for metrics and reporting.
pub struct SimOutcome {
    pub log: TrajectoryLog,
    pub learning: Option<LearningOutcome>,
    pub initial_gain: Gain,
    pub final_gain: Gain,
    /// The true (varied) plant the run executed on.
    pub true_plant: DhsPlant,
    pub true_aug: AugmentedSystem,
    pub f_diag: DVector<f64>,
    pub g_diag: DVector<f64>,
    pub final_temperature: DVector<f64>,
    pub final_power: DVector<f64>,
    pub final_disturbance: DVector<f64>,
}

/// Run a closed-loop simulation of the true (varied) plant under the chosen
/// controller mode.
///
/// In learn mode the run takes one warm-up step under the initial policy so
/// that every collected transition happens after the initial disturbance
/// change, runs the policy iteration, then holds the learned gain with the
/// probing noise off for the rest of the horizon.
pub fn simulate(setup: &SimSetup, mode: &ControllerMode) -> Result<SimOutcome> {
    let nominal_plant = discretize(&setup.nominal_topology, setup.tau)?;
    let varied_topology = setup.nominal_topology.with_flow_variation(setup.variation);
    let true_plant = discretize(&varied_topology, setup.tau)?;
    let true_aug = build_augmented(&true_plant, &setup.f_diag, &setup.g_diag, &setup.q_e, &setup.r_e)?;

    let initial_gain = match mode {
        ControllerMode::Fixed(gain) => gain.clone(),
        ControllerMode::Learn(_) | ControllerMode::Nominal => initial_controller(
            &nominal_plant,
            &setup.f_diag,
            &setup.g_diag,
            &setup.q_e,
            &setup.r_e,
        )?,
    };
    let rho = spectral_radius(&true_aug.closed_loop(&initial_gain.0))?;
    if rho >= 1.0 {
        return Err(Error::NotStabilizable);
    }

    let mut sim = ClosedLoopSim::new(
        true_plant.clone(),
        true_aug.clone(),
        setup.f_diag.clone(),
        setup.g_diag.clone(),
        setup.q_e.clone(),
        setup.r_e.clone(),
        setup.schedule.clone(),
        setup.nonlinearity,
        setup.divergence_bound,
        setup.initial_temperature.clone(),
    )?;

    let mut learning = None;
    let final_gain;
    match mode {
        ControllerMode::Fixed(_) | ControllerMode::Nominal => {
            while sim.step_count() < setup.horizon {
                let du = -(&initial_gain.0 * sim.state());
                sim.apply(&du)?;
            }
            final_gain = initial_gain.clone();
        }
        ControllerMode::Learn(learn_opts) => {
            setup.noise_config.validate(true_aug.n)?;
            let noise = ProbingNoise::new(&setup.noise_config, true_aug.m);
            let oracle = crate::baseline::optimal_regulator(&true_aug)?;

            // warm-up step: the first batch then starts after the initial
            // disturbance change
            let du0 = -(&initial_gain.0 * sim.state()) + noise.sample(0);
            sim.apply(&du0)?;

            let samples = crate::learner::required_samples(true_aug.n, true_aug.m);
            let iteration_cap = if learn_opts.continuous_updates {
                ((setup.horizon - sim.step_count()) / samples).max(1)
            } else {
                setup.iteration_cap
            };
            let opts = PolicyIterationOptions {
                stop_tolerance: setup.stop_tolerance,
                iteration_cap,
                method: setup.method,
                oracle_gain: Some(oracle.gain.clone()),
                batch_extension_cap: 10,
                continue_after_convergence: learn_opts.continuous_updates,
            };
            let outcome = run_policy_iteration(&mut sim, initial_gain.clone(), &true_aug.qbar, &noise, &opts)?;
            final_gain = outcome.final_gain.clone();

            // hold the learned gain for the rest of the horizon; in the
            // continuous variant the exploratory input stays on
            while sim.step_count() < setup.horizon {
                let mut du = -(&final_gain.0 * sim.state());
                if learn_opts.continuous_updates {
                    du += noise.sample(sim.step_count());
                }
                sim.apply(&du)?;
            }

            // tag each logged step with the gain that was active
            let mut boundaries = Vec::with_capacity(outcome.records.len() + 1);
            let mut consumed = 1; // warm-up ran under the initial gain
            for record in &outcome.records {
                consumed += record.samples;
                boundaries.push(consumed);
            }
            for row in sim.log.steps.iter_mut() {
                row.gain_id = boundaries.iter().filter(|&&b| row.step >= b).count();
            }
            learning = Some(outcome);
        }
    }

    let final_disturbance = setup.schedule.value_at(setup.horizon.saturating_sub(1));
    let final_temperature = sim.temperature().clone();
    let final_power = sim.power().clone();
    Ok(SimOutcome {
        log: sim.into_log(),
        learning,
        initial_gain,
        final_gain,
        true_plant,
        true_aug,
        f_diag: setup.f_diag.clone(),
        g_diag: setup.g_diag.clone(),
        final_temperature,
        final_power,
        final_disturbance,
    })
}
