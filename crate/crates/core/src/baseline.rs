//! Model-based and indirect comparators for the learned regulator: the
//! Riccati-optimal gain with its Q matrix, and the identify-then-solve
//! controller estimated from the same data batches.

use nalgebra::DMatrix;

use crate::augment::AugmentedSystem;
use crate::error::{Error, Result};
use crate::learner::{DataBatch, Gain, QMatrix};
use crate::numerics::{pseudoinverse, rank, solve_lqr};

/// The optimal regulator: gain, value matrix, and the Q matrix assembled
/// from the value matrix.
#[derive(Debug, Clone)]
pub struct OptimalRegulator {
    pub gain: Gain,
    pub value: DMatrix<f64>,
    pub theta: QMatrix,
}

/// Solve the LQR problem on the augmented system and assemble the optimal
/// Q matrix `[[Q + A^T P A, N + A^T P B], [N^T + B^T P A, R + B^T P B]]`.
pub fn optimal_regulator(aug: &AugmentedSystem) -> Result<OptimalRegulator> {
    let (p, k) = solve_lqr(&aug.a_eps, &aug.b_eps, &aug.q_eps, &aug.n_eps, &aug.r_eps)?;
    let theta = assemble_theta(aug, &p)?;
    Ok(OptimalRegulator {
        gain: Gain(k),
        value: p,
        theta,
    })
}

/// Q matrix of a value matrix `P` under the true model.
pub fn assemble_theta(aug: &AugmentedSystem, p: &DMatrix<f64>) -> Result<QMatrix> {
    let (n, m) = (aug.n, aug.m);
    let mut theta = DMatrix::zeros(n + m, n + m);
    theta
        .view_mut((0, 0), (n, n))
        .copy_from(&(&aug.q_eps + aug.a_eps.transpose() * p * &aug.a_eps));
    let ne = &aug.n_eps + aug.a_eps.transpose() * p * &aug.b_eps;
    theta.view_mut((0, n), (n, m)).copy_from(&ne);
    theta.view_mut((n, 0), (m, n)).copy_from(&ne.transpose());
    theta
        .view_mut((n, n), (m, m))
        .copy_from(&(&aug.r_eps + aug.b_eps.transpose() * p * &aug.b_eps));
    QMatrix::new(theta, n, m)
}

/// Ordinary least-squares identification `[A, B] = E_+ [E; U]^+` over the
/// stacked samples of the given batches. The regressor uses the applied
/// (noisy) increments; the successors are the raw next states.
pub fn identify_model(batches: &[DataBatch]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let first = batches.first().ok_or(Error::RankDeficient { rank: 0, required: 1 })?;
    let (n, m) = (first.n, first.m);
    let total: usize = batches.iter().map(|b| b.samples()).sum();
    let mut regressors = DMatrix::zeros(n + m, total);
    let mut successors = DMatrix::zeros(n, total);
    let mut col = 0;
    for batch in batches {
        let width = batch.samples();
        regressors
            .view_mut((0, col), (n + m, width))
            .copy_from(&batch.z);
        successors
            .view_mut((0, col), (n, width))
            .copy_from(&batch.zeta.view((0, 0), (n, width)));
        col += width;
    }
    let observed = rank(&regressors);
    if observed < n + m {
        return Err(Error::RankDeficient {
            rank: observed,
            required: n + m,
        });
    }
    let ab = successors * pseudoinverse(&regressors);
    Ok((ab.view((0, 0), (n, n)).into(), ab.view((0, n), (n, m)).into()))
}

/// Indirect controller: identify `(A, B)` from the data, then solve the LQR
/// problem on the identified model with the true cost matrices.
pub fn indirect_controller(batches: &[DataBatch], aug: &AugmentedSystem) -> Result<Gain> {
    let (a_hat, b_hat) = identify_model(batches)?;
    let (_, k) = solve_lqr(&a_hat, &b_hat, &aug.q_eps, &aug.n_eps, &aug.r_eps)?;
    Ok(Gain(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::build_augmented;
    use crate::learner::{
        collect_batch, improve_policy, required_samples, ModelSim, ProbingNoise, ProbingNoiseConfig,
    };
    use crate::network::discretize;
    use crate::test_support::desk_network;
    use nalgebra::DVector;

    fn desk_augmented() -> AugmentedSystem {
        let topo = desk_network();
        let nt = topo.len();
        let plant = discretize(&topo, 0.2).unwrap();
        let f = DVector::from_element(nt, 1.0);
        let g = DVector::from_element(nt, 1.0);
        build_augmented(&plant, &f, &g, &DMatrix::identity(nt, nt), &DMatrix::identity(nt, nt)).unwrap()
    }

    fn noise(aug: &AugmentedSystem, seed: u64) -> ProbingNoise {
        let mut cfg = ProbingNoiseConfig::for_dimensions(aug.n, aug.m, seed);
        cfg.base_amplitude = 0.5;
        cfg.decay = 1.0;
        ProbingNoise::new(&cfg, aug.m)
    }

    #[test]
    fn optimal_theta_satisfies_its_lyapunov_equation() {
        let aug = desk_augmented();
        let reg = optimal_regulator(&aug).unwrap();
        let phi = aug.phi(&reg.gain.0);
        let theta = reg.theta.matrix();
        let residual = (theta - &aug.qbar - phi.transpose() * theta * &phi).norm();
        assert!(residual < 1e-9 * theta.norm(), "residual {residual}");
    }

    #[test]
    fn optimal_theta_is_an_improvement_fixed_point() {
        let aug = desk_augmented();
        let reg = optimal_regulator(&aug).unwrap();
        let k = improve_policy(&reg.theta).unwrap();
        assert!((&k.0 - &reg.gain.0).norm() < 1e-9 * reg.gain.0.norm());
    }

    #[test]
    fn identification_is_exact_on_linear_data() {
        let aug = desk_augmented();
        let reg = optimal_regulator(&aug).unwrap();
        let mut plant = ModelSim::new(&aug, DVector::zeros(aug.n));
        let noise = noise(&aug, 5);
        let batch =
            collect_batch(&mut plant, &reg.gain, &noise, required_samples(aug.n, aug.m)).unwrap();
        let (a_hat, b_hat) = identify_model(&[batch.clone()]).unwrap();
        assert!((&a_hat - &aug.a_eps).norm() < 1e-9 * aug.a_eps.norm());
        assert!((&b_hat - &aug.b_eps).norm() < 1e-9 * aug.b_eps.norm());

        let k_id = indirect_controller(&[batch], &aug).unwrap();
        assert!((&k_id.0 - &reg.gain.0).norm() < 1e-8 * reg.gain.0.norm());
    }

    #[test]
    fn nonlinear_data_biases_identification_more_than_policy_iteration() {
        // With an element-wise-square perturbation the identified-model gain
        // degrades, while the on-policy iteration keeps re-collecting as the
        // transient and the probing noise decay, so its bias shrinks with the
        // data amplitude.
        let aug = desk_augmented();
        let reg = optimal_regulator(&aug).unwrap();
        let topo = desk_network();
        let nt = topo.len();
        let nominal = discretize(&topo.with_flow_variation(-0.2), 0.2).unwrap();
        let f = DVector::from_element(nt, 1.0);
        let g = DVector::from_element(nt, 1.0);
        let k0 = crate::learner::initial_controller(
            &nominal,
            &f,
            &g,
            &DMatrix::identity(nt, nt),
            &DMatrix::identity(nt, nt),
        )
        .unwrap();

        for w in [1e-7, 1e-4] {
            let mut plant = ModelSim::new(&aug, DVector::from_element(aug.n, 2.0));
            plant.nonlinearity = w;
            let mut cfg = ProbingNoiseConfig::for_dimensions(aug.n, aug.m, 7);
            cfg.base_amplitude = 0.1;
            cfg.decay = 0.98;
            let noise = ProbingNoise::new(&cfg, aug.m);
            let opts = crate::learner::PolicyIterationOptions {
                stop_tolerance: 1e-9,
                iteration_cap: 60,
                ..Default::default()
            };
            let outcome =
                crate::learner::run_policy_iteration(&mut plant, k0.clone(), &aug.qbar, &noise, &opts)
                    .unwrap();
            let rl_dist = (&outcome.final_gain.0 - &reg.gain.0).norm() / reg.gain.0.norm();
            let k_id = indirect_controller(&outcome.batches, &aug).unwrap();
            let id_dist = (&k_id.0 - &reg.gain.0).norm() / reg.gain.0.norm();
            assert!(
                rl_dist < id_dist,
                "w={w}: rl {rl_dist} should beat id {id_dist}"
            );
        }
    }

    #[test]
    fn identification_needs_rank() {
        assert!(matches!(
            identify_model(&[]),
            Err(Error::RankDeficient { .. })
        ));
    }
}
