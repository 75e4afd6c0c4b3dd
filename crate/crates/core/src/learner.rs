//! On-policy policy iteration: probing-noise design, closed-loop data
//! collection, excitation checks, data-driven Q-matrix estimation, greedy
//! policy improvement and the stopping rule.
//!
//! The learner never touches the plant matrices. It sees the world through
//! [`AugmentedDynamics`]: observe the augmented state, apply an input
//! increment, advance one step. Everything else is built from the collected
//! samples and the known cost structure.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentedSystem;
use crate::error::{Error, Result};
use crate::numerics::{pseudoinverse, rank, solve_discrete_lyapunov, spectral_radius, SV_REL_TOL};

/// State-feedback gain on the augmented state: `du = -K eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gain(pub DMatrix<f64>);

impl Gain {
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }
    pub fn cols(&self) -> usize {
        self.0.ncols()
    }
}

/// Symmetric Q-function matrix with the block layout
/// `[[Theta_ee, Theta_ue^T], [Theta_ue, Theta_uu]]`.
#[derive(Debug, Clone)]
pub struct QMatrix {
    theta: DMatrix<f64>,
    n: usize,
    m: usize,
}

impl QMatrix {
    pub fn new(theta: DMatrix<f64>, n: usize, m: usize) -> Result<Self> {
        let s = n + m;
        if theta.nrows() != s || theta.ncols() != s {
            return Err(Error::DimensionMismatch {
                context: "QMatrix::new",
                expected: format!("{s}x{s}"),
                found: format!("{}x{}", theta.nrows(), theta.ncols()),
            });
        }
        Ok(QMatrix {
            theta: crate::numerics::symmetrize(&theta),
            n,
            m,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    /// `Theta_ee`, n x n.
    pub fn state_block(&self) -> DMatrix<f64> {
        self.theta.view((0, 0), (self.n, self.n)).into()
    }

    /// `Theta_ue`, m x n (lower-left block).
    pub fn input_state_block(&self) -> DMatrix<f64> {
        self.theta.view((self.n, 0), (self.m, self.n)).into()
    }

    /// `Theta_uu`, m x m.
    pub fn input_block(&self) -> DMatrix<f64> {
        self.theta.view((self.n, self.n), (self.m, self.m)).into()
    }
}

/// One iteration's worth of stacked samples.
///
/// Column `k` of `z` is `[eps_k; du_k]` with the actually applied (noisy)
/// increment; column `k` of `zeta` is `[eps_{k+1}; -K eps_{k+1}]` with the
/// policy part of the successor, which makes `zeta = phi_K z` hold exactly on
/// model-consistent data even under probing noise.
#[derive(Debug, Clone)]
pub struct DataBatch {
    pub z: DMatrix<f64>,
    pub zeta: DMatrix<f64>,
    pub k_used: Gain,
    pub n: usize,
    pub m: usize,
}

impl DataBatch {
    pub fn samples(&self) -> usize {
        self.z.ncols()
    }

    /// Append the columns of another batch collected under the same policy.
    pub fn extend(&mut self, other: &DataBatch) {
        assert_eq!(self.n, other.n);
        assert_eq!(self.m, other.m);
        let old = self.samples();
        let added = other.samples();
        let mut z = DMatrix::zeros(self.n + self.m, old + added);
        let mut zeta = DMatrix::zeros(self.n + self.m, old + added);
        z.view_mut((0, 0), (self.n + self.m, old)).copy_from(&self.z);
        z.view_mut((0, old), (self.n + self.m, added)).copy_from(&other.z);
        zeta.view_mut((0, 0), (self.n + self.m, old)).copy_from(&self.zeta);
        zeta.view_mut((0, old), (self.n + self.m, added)).copy_from(&other.zeta);
        self.z = z;
        self.zeta = zeta;
    }
}

/// Probing-noise design: per-channel sums of decaying sinusoids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbingNoiseConfig {
    /// Sinusoids per input channel; at least `ceil((n+1)/2)` distinct
    /// frequencies are needed for excitation of order `n+1`.
    pub sinusoids_per_channel: usize,
    /// Frequency band in rad/step.
    pub freq_range: (f64, f64),
    /// Amplitude of each sinusoid, in input units.
    pub base_amplitude: f64,
    /// Per-step decay multiplier in (0, 1]; the noise vanishes as k grows.
    pub decay: f64,
    pub seed: u64,
}

impl ProbingNoiseConfig {
    /// Defaults sized for the plant dimensions. The band is log-spaced below
    /// `0.9 pi`; its lower edge is raised from `0.01 pi` as needed so the
    /// slowest tone completes two full cycles within one collection window,
    /// otherwise short-window batches lose excitation order.
    pub fn for_dimensions(n: usize, m: usize, seed: u64) -> Self {
        let window = (required_samples(n, m) - n).max(2);
        let lo = (0.01 * std::f64::consts::PI).max(2.0 * std::f64::consts::TAU / window as f64);
        ProbingNoiseConfig {
            // twice the minimum count; the bare minimum leaves the excitation
            // order with no numerical margin
            sinusoids_per_channel: n + 1,
            freq_range: (lo, 0.9 * std::f64::consts::PI),
            base_amplitude: 0.01,
            decay: 0.999,
            seed,
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        let needed = state_dim / 2 + 1; // ceil((n+1)/2)
        if self.sinusoids_per_channel < needed {
            return Err(Error::Parse(format!(
                "probing noise needs at least {needed} sinusoids per channel for state dimension {state_dim}, got {}",
                self.sinusoids_per_channel
            )));
        }
        if !(self.freq_range.0 > 0.0 && self.freq_range.1 > self.freq_range.0) {
            return Err(Error::Parse("probing noise frequency range must be increasing and positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Parse(format!("probing noise decay must lie in (0, 1], got {}", self.decay)));
        }
        Ok(())
    }
}

/// Realized probing-noise signal, deterministic in the config seed.
#[derive(Debug, Clone)]
pub struct ProbingNoise {
    /// Per channel: (amplitude, frequency, phase) triples.
    tones: Vec<Vec<(f64, f64, f64)>>,
    decay: f64,
}

impl ProbingNoise {
    /// Draw per-channel tones. Frequencies come from one log-spaced grid over
    /// the band, dealt round-robin so channels never share a frequency and
    /// each still spans the whole band; phases are seeded uniform draws.
    pub fn new(config: &ProbingNoiseConfig, channels: usize) -> ProbingNoise {
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let s = config.sinusoids_per_channel;
        let (lo, hi) = config.freq_range;
        let total = (s * channels).max(1);
        let grid = |idx: usize| -> f64 {
            let t = if total == 1 { 0.5 } else { idx as f64 / (total - 1) as f64 };
            lo * (hi / lo).powf(t)
        };
        let tones = (0..channels)
            .map(|c| {
                (0..s)
                    .map(|j| {
                        let freq = grid(j * channels + c);
                        let phase = rng.random_range(0.0..std::f64::consts::TAU);
                        (config.base_amplitude, freq, phase)
                    })
                    .collect()
            })
            .collect();
        ProbingNoise {
            tones,
            decay: config.decay,
        }
    }

    /// Explicit tone table; mainly for tests.
    pub fn from_tones(tones: Vec<Vec<(f64, f64, f64)>>, decay: f64) -> ProbingNoise {
        ProbingNoise { tones, decay }
    }

    pub fn channels(&self) -> usize {
        self.tones.len()
    }

    /// Noise vector at global step `k`:
    /// `decay^k * sum_j amp_j sin(w_j k + phi_j)` per channel.
    pub fn sample(&self, k: usize) -> DVector<f64> {
        let envelope = self.decay.powi(k as i32);
        DVector::from_iterator(
            self.tones.len(),
            self.tones.iter().map(|channel| {
                envelope
                    * channel
                        .iter()
                        .map(|&(amp, freq, phase)| amp * (freq * k as f64 + phase).sin())
                        .sum::<f64>()
            }),
        )
    }
}

/// Samples per iteration: `(n+1) m + n`.
pub fn required_samples(state_dim: usize, input_dim: usize) -> usize {
    (state_dim + 1) * input_dim + state_dim
}

/// Rank report of a data batch.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RankReport {
    pub rank: usize,
    pub required: usize,
}

/// The batch is sufficiently exciting iff its sample matrix has full row rank
/// `n + m`.
pub fn check_pe(batch: &DataBatch) -> Result<RankReport> {
    let required = batch.n + batch.m;
    let observed = rank(&batch.z);
    if observed == required {
        Ok(RankReport {
            rank: observed,
            required,
        })
    } else {
        Err(Error::RankDeficient {
            rank: observed,
            required,
        })
    }
}

/// How the Q matrix is recovered from a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaMethod {
    /// Reconstruct the sample evolution matrix from the batch and solve the
    /// resulting discrete Lyapunov equation. Default.
    Matrix,
    /// Solve the per-sample scalar equations for the symmetric unknowns by
    /// least squares; needs the batch extended beyond one nominal collection
    /// to reach full column rank.
    ScalarLs,
}

impl std::str::FromStr for ThetaMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<ThetaMethod> {
        match s {
            "matrix" => Ok(ThetaMethod::Matrix),
            "scalar-ls" => Ok(ThetaMethod::ScalarLs),
            other => Err(Error::Parse(format!("unknown theta method '{other}'"))),
        }
    }
}

/// Q-matrix estimate together with the data-reconstructed sample evolution
/// matrix (whose top block rows are the identified `[A, B]`).
#[derive(Debug, Clone)]
pub struct ThetaEstimate {
    pub theta: QMatrix,
    pub phi_hat: DMatrix<f64>,
}

impl ThetaEstimate {
    /// Identified `(A, B)` from the top block rows of `phi_hat`.
    pub fn identified_model(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.theta.state_dim();
        let m = self.theta.input_dim();
        (
            self.phi_hat.view((0, 0), (n, n)).into(),
            self.phi_hat.view((0, n), (n, m)).into(),
        )
    }
}

fn packed_len(s: usize) -> usize {
    s * (s + 1) / 2
}

/// Regressor of `x^T Theta x` in the packed symmetric parameterization.
fn quadratic_regressor(x: &DVector<f64>) -> DVector<f64> {
    let s = x.len();
    let mut row = DVector::zeros(packed_len(s));
    let mut idx = 0;
    for i in 0..s {
        for j in i..s {
            row[idx] = if i == j { x[i] * x[i] } else { 2.0 * x[i] * x[j] };
            idx += 1;
        }
    }
    row
}

fn unpack_symmetric(theta_packed: &DVector<f64>, s: usize) -> DMatrix<f64> {
    let mut theta = DMatrix::zeros(s, s);
    let mut idx = 0;
    for i in 0..s {
        for j in i..s {
            theta[(i, j)] = theta_packed[idx];
            theta[(j, i)] = theta_packed[idx];
            idx += 1;
        }
    }
    theta
}

/// Estimate the Q matrix of the collection policy from one batch.
///
/// `Matrix` method: with full row rank data the evolution matrix is exactly
/// `phi = zeta z^+`, and the Q matrix solves `Theta = Qbar + phi^T Theta phi`.
/// `ScalarLs` method: solve the stacked scalar equations
/// `z^T Theta z - zeta^T Theta zeta = z^T Qbar z` for the packed symmetric
/// unknowns; the caller extends the batch until the regression has full
/// column rank.
pub fn estimate_theta(batch: &DataBatch, qbar: &DMatrix<f64>, method: ThetaMethod) -> Result<ThetaEstimate> {
    let s = batch.n + batch.m;
    if qbar.nrows() != s || qbar.ncols() != s {
        return Err(Error::DimensionMismatch {
            context: "estimate_theta",
            expected: format!("{s}x{s} Qbar"),
            found: format!("{}x{}", qbar.nrows(), qbar.ncols()),
        });
    }
    check_pe(batch)?;

    let phi_hat = &batch.zeta * pseudoinverse(&batch.z);
    let rho = spectral_radius(&phi_hat)?;
    if rho >= 1.0 {
        return Err(Error::NotContractive { spectral_radius: rho });
    }

    let theta = match method {
        ThetaMethod::Matrix => solve_discrete_lyapunov(&phi_hat, qbar)?,
        ThetaMethod::ScalarLs => {
            let cols = packed_len(s);
            let samples = batch.samples();
            let mut regression = DMatrix::zeros(samples, cols);
            let mut rhs = DVector::zeros(samples);
            for k in 0..samples {
                let z: DVector<f64> = batch.z.column(k).into();
                let zeta: DVector<f64> = batch.zeta.column(k).into();
                let row = quadratic_regressor(&z) - quadratic_regressor(&zeta);
                regression.row_mut(k).copy_from(&row.transpose());
                rhs[k] = (z.transpose() * qbar * &z)[(0, 0)];
            }
            let svd = regression.clone().svd(true, true);
            let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
            let col_rank = svd
                .singular_values
                .iter()
                .filter(|&&v| v > SV_REL_TOL * sigma_max)
                .count();
            if col_rank < cols {
                return Err(Error::RankDeficient {
                    rank: col_rank,
                    required: cols,
                });
            }
            let sigma_min = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
            let condition = sigma_max / sigma_min;
            if condition > 1e12 {
                return Err(Error::IllConditioned { condition });
            }
            let packed = svd.solve(&rhs, SV_REL_TOL * sigma_max).map_err(|e| Error::Parse(e.to_string()))?;
            unpack_symmetric(&packed, s)
        }
    };
    Ok(ThetaEstimate {
        theta: QMatrix::new(theta, batch.n, batch.m)?,
        phi_hat,
    })
}

/// Greedy policy improvement: `K = Theta_uu^{-1} Theta_ue`.
pub fn improve_policy(theta: &QMatrix) -> Result<Gain> {
    let uu = theta.input_block();
    let sv = uu.clone().singular_values();
    let sigma_max = sv.iter().copied().fold(0.0, f64::max);
    let sigma_min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if sigma_max == 0.0 || sigma_min <= 1e-12 * sigma_max {
        return Err(Error::SingularBlock);
    }
    let k = uu
        .lu()
        .solve(&theta.input_state_block())
        .ok_or(Error::SingularBlock)?;
    Ok(Gain(k))
}

/// Model-based initial gain: solve the LQR problem on the nominal augmented
/// system. The harness re-checks the result against the true (varied) plant
/// before letting a run start.
pub fn initial_controller(
    nominal_plant: &crate::network::DhsPlant,
    f_diag: &DVector<f64>,
    g_diag: &DVector<f64>,
    q_e: &DMatrix<f64>,
    r_e: &DMatrix<f64>,
) -> Result<Gain> {
    let aug = crate::augment::build_augmented(nominal_plant, f_diag, g_diag, q_e, r_e)?;
    let (_, k) = crate::numerics::solve_lqr(&aug.a_eps, &aug.b_eps, &aug.q_eps, &aug.n_eps, &aug.r_eps)?;
    Ok(Gain(k))
}

/// What the learner needs from a plant: the augmented state, a global step
/// counter (for the noise decay), and one-step actuation.
pub trait AugmentedDynamics {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn state(&self) -> DVector<f64>;
    fn step_count(&self) -> usize;
    /// Apply the input increment, advance one step, return the new state.
    fn apply(&mut self, delta_u: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Augmented dynamics backed by a known model; data generator for tests and
/// the model-based comparisons. An optional element-wise-square perturbation
/// `w * eps^2` makes the plant mildly nonlinear.
#[derive(Debug, Clone)]
pub struct ModelSim {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    state: DVector<f64>,
    steps: usize,
    pub nonlinearity: f64,
}

impl ModelSim {
    pub fn new(aug: &AugmentedSystem, initial_state: DVector<f64>) -> ModelSim {
        assert_eq!(initial_state.len(), aug.n);
        ModelSim {
            a: aug.a_eps.clone(),
            b: aug.b_eps.clone(),
            state: initial_state,
            steps: 0,
            nonlinearity: 0.0,
        }
    }
}

impl AugmentedDynamics for ModelSim {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn state(&self) -> DVector<f64> {
        self.state.clone()
    }
    fn step_count(&self) -> usize {
        self.steps
    }
    fn apply(&mut self, delta_u: &DVector<f64>) -> Result<DVector<f64>> {
        let mut next = &self.a * &self.state + &self.b * delta_u;
        if self.nonlinearity != 0.0 {
            next += self.state.map(|x| self.nonlinearity * x * x);
        }
        self.state = next;
        self.steps += 1;
        Ok(self.state.clone())
    }
}

/// Collect `samples` transitions under `du = -K eps + noise`.
pub fn collect_batch(
    plant: &mut dyn AugmentedDynamics,
    gain: &Gain,
    noise: &ProbingNoise,
    samples: usize,
) -> Result<DataBatch> {
    let n = plant.state_dim();
    let m = plant.input_dim();
    if gain.rows() != m || gain.cols() != n {
        return Err(Error::DimensionMismatch {
            context: "collect_batch",
            expected: format!("{m}x{n} gain"),
            found: format!("{}x{}", gain.rows(), gain.cols()),
        });
    }
    let mut z = DMatrix::zeros(n + m, samples);
    let mut zeta = DMatrix::zeros(n + m, samples);
    for col in 0..samples {
        let eps = plant.state();
        let du = -(&gain.0 * &eps) + noise.sample(plant.step_count());
        let eps_next = plant.apply(&du)?;
        z.view_mut((0, col), (n, 1)).copy_from(&eps);
        z.view_mut((n, col), (m, 1)).copy_from(&du);
        zeta.view_mut((0, col), (n, 1)).copy_from(&eps_next);
        zeta.view_mut((n, col), (m, 1)).copy_from(&(-(&gain.0 * &eps_next)));
    }
    Ok(DataBatch {
        z,
        zeta,
        k_used: gain.clone(),
        n,
        m,
    })
}

/// One policy-iteration step as recorded in the run log.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Gain after this iteration's update.
    pub gain: DMatrix<f64>,
    /// Q-matrix estimate of the collection policy.
    pub theta: DMatrix<f64>,
    /// `|K_{i+1} - K_i|_F`.
    pub gain_delta: f64,
    /// Normalized Frobenius distance to the oracle gain, when one is known.
    pub oracle_distance: Option<f64>,
    /// Data-identified closed-loop spectral radius under the updated gain.
    pub spectral_radius: f64,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct PolicyIterationOptions {
    /// Stop when `|K_{i+1} - K_i|_F` falls below this.
    pub stop_tolerance: f64,
    pub iteration_cap: usize,
    pub method: ThetaMethod,
    /// Optional reference gain for distance logging.
    pub oracle_gain: Option<Gain>,
    /// Batches may be extended up to this many nominal collections when the
    /// data is rank deficient.
    pub batch_extension_cap: usize,
    /// Keep updating for the full iteration cap even after the stop
    /// tolerance is met (the non-terminating variant of the algorithm).
    pub continue_after_convergence: bool,
}

impl Default for PolicyIterationOptions {
    fn default() -> Self {
        PolicyIterationOptions {
            stop_tolerance: 1e-9,
            iteration_cap: 50,
            method: ThetaMethod::Matrix,
            oracle_gain: None,
            batch_extension_cap: 10,
            continue_after_convergence: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearningOutcome {
    pub final_gain: Gain,
    pub records: Vec<IterationRecord>,
    /// The batches, one per iteration, as collected (including extensions).
    pub batches: Vec<DataBatch>,
    pub converged: bool,
}

/// Run the on-policy iteration: collect a batch under the current gain,
/// verify excitation, estimate the Q matrix, improve the policy, and repeat
/// until consecutive gains agree to `stop_tolerance`.
pub fn run_policy_iteration(
    plant: &mut dyn AugmentedDynamics,
    initial_gain: Gain,
    qbar: &DMatrix<f64>,
    noise: &ProbingNoise,
    opts: &PolicyIterationOptions,
) -> Result<LearningOutcome> {
    let n = plant.state_dim();
    let m = plant.input_dim();
    if noise.channels() != m {
        return Err(Error::DimensionMismatch {
            context: "run_policy_iteration",
            expected: format!("{m}-channel probing noise"),
            found: format!("{}", noise.channels()),
        });
    }
    let nominal_samples = required_samples(n, m);
    let mut gain = initial_gain;
    let mut records = Vec::new();
    let mut batches = Vec::new();
    let mut converged = false;

    for iteration in 0..opts.iteration_cap {
        let mut batch = collect_batch(plant, &gain, noise, nominal_samples)?;
        let estimate = loop {
            match estimate_theta(&batch, qbar, opts.method) {
                Ok(est) => break est,
                Err(Error::RankDeficient { rank, required })
                    if batch.samples() < opts.batch_extension_cap * nominal_samples =>
                {
                    let _ = (rank, required);
                    let more = collect_batch(plant, &gain, noise, nominal_samples)?;
                    batch.extend(&more);
                }
                Err(e) => return Err(e),
            }
        };
        let improved = improve_policy(&estimate.theta)?;
        let (a_hat, b_hat) = estimate.identified_model();
        let rho = spectral_radius(&(a_hat - b_hat * &improved.0))?;
        if rho >= 1.0 {
            return Err(Error::DestabilizingUpdate { spectral_radius: rho });
        }
        let delta = (&improved.0 - &gain.0).norm();
        let oracle_distance = opts.oracle_gain.as_ref().map(|k_star| {
            (&improved.0 - &k_star.0).norm() / k_star.0.norm()
        });
        records.push(IterationRecord {
            iteration,
            gain: improved.0.clone(),
            theta: estimate.theta.matrix().clone(),
            gain_delta: delta,
            oracle_distance,
            spectral_radius: rho,
            samples: batch.samples(),
        });
        batches.push(batch);
        gain = improved;
        if delta < opts.stop_tolerance {
            converged = true;
            if !opts.continue_after_convergence {
                break;
            }
        }
    }

    if !converged && !opts.continue_after_convergence {
        return Err(Error::IterationCapExceeded {
            cap: opts.iteration_cap,
        });
    }
    Ok(LearningOutcome {
        final_gain: gain,
        records,
        batches,
        converged,
    })
}
