//! District heating network model: heat-exchanger topology, the Kirchhoff
//! flow matrix, the Euler-discretized thermal dynamics, and the closed-form
//! steady-state economic dispatch.
//!
//! Temperatures are deviations from a nominal steady state throughout, and
//! thermal powers are already weighted by `1/(rho * c_sh)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pseudoinverse, SV_REL_TOL};

const CONSERVATION_TOL: f64 = 1e-9;

/// Whether a heat exchanger injects or extracts heat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Producer,
    Consumer,
}

/// A heat exchanger node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatExchanger {
    pub id: String,
    pub role: Role,
    /// Water volume of the exchanger, m^3.
    pub volume: f64,
    /// Total through-flow, m^3/s. Must equal the sum of incident pipe flows.
    pub through_flow: f64,
}

/// A pipe carrying flow between a producer and a consumer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pipe {
    pub from: String,
    pub to: String,
    /// Flow rate through the pipe, m^3/s.
    pub flow: f64,
}

/// A heat-exchanger network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkTopology {
    pub exchangers: Vec<HeatExchanger>,
    pub pipes: Vec<Pipe>,
}

impl NetworkTopology {
    pub fn len(&self) -> usize {
        self.exchangers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exchangers.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.exchangers.iter().position(|hx| hx.id == id)
    }

    /// Diagonal of `E = V^{-1}`.
    pub fn inverse_volumes(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.exchangers.iter().map(|hx| 1.0 / hx.volume))
    }

    /// Check all structural invariants, returning every violation found.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let n = self.len();
        if n < 2 {
            problems.push("network needs at least two heat exchangers".to_string());
        }
        if !self.exchangers.iter().any(|hx| hx.role == Role::Producer) {
            problems.push("network has no producer".to_string());
        }
        if !self.exchangers.iter().any(|hx| hx.role == Role::Consumer) {
            problems.push("network has no consumer".to_string());
        }
        for (i, hx) in self.exchangers.iter().enumerate() {
            if self.exchangers[..i].iter().any(|other| other.id == hx.id) {
                problems.push(format!("duplicate exchanger id {}", hx.id));
            }
            if !(hx.volume > 0.0) {
                problems.push(format!("exchanger {} has non-positive volume", hx.id));
            }
            if !(hx.through_flow > 0.0) {
                problems.push(format!("exchanger {} has non-positive through-flow", hx.id));
            }
        }
        let mut incident = vec![0.0_f64; n];
        for pipe in &self.pipes {
            if !(pipe.flow > 0.0) {
                problems.push(format!("pipe {}->{} has non-positive flow", pipe.from, pipe.to));
            }
            match (self.index_of(&pipe.from), self.index_of(&pipe.to)) {
                (Some(a), Some(b)) => {
                    if a == b {
                        problems.push(format!("pipe {}->{} is a self-loop", pipe.from, pipe.to));
                    } else {
                        let ra = self.exchangers[a].role;
                        let rb = self.exchangers[b].role;
                        if ra == rb {
                            problems.push(format!(
                                "pipe {}->{} connects two {}s",
                                pipe.from,
                                pipe.to,
                                match ra {
                                    Role::Producer => "producer",
                                    Role::Consumer => "consumer",
                                }
                            ));
                        }
                        incident[a] += pipe.flow;
                        incident[b] += pipe.flow;
                    }
                }
                _ => problems.push(format!(
                    "pipe {}->{} references an unknown exchanger",
                    pipe.from, pipe.to
                )),
            }
        }
        for (i, hx) in self.exchangers.iter().enumerate() {
            let q = hx.through_flow;
            if (incident[i] - q).abs() > CONSERVATION_TOL * q.abs().max(1.0) {
                problems.push(format!(
                    "flow conservation violated at {}: through-flow {} vs incident {}",
                    hx.id, q, incident[i]
                ));
            }
        }
        if n > 0 && !self.is_connected() {
            problems.push("network is not connected".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidTopology(problems.join("; ")))
        }
    }

    fn is_connected(&self) -> bool {
        let n = self.len();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for pipe in &self.pipes {
                if let (Some(a), Some(b)) = (self.index_of(&pipe.from), self.index_of(&pipe.to)) {
                    for (x, y) in [(a, b), (b, a)] {
                        if x == i && !seen[y] {
                            seen[y] = true;
                            stack.push(y);
                        }
                    }
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// Scale every pipe flow by `1 + factor` and re-derive the through-flows
    /// so the Kirchhoff row sums stay zero. Used to model coefficient
    /// variation of the flow matrix away from its nominal value.
    pub fn with_flow_variation(&self, factor: f64) -> NetworkTopology {
        let mut varied = self.clone();
        for pipe in &mut varied.pipes {
            pipe.flow *= 1.0 + factor;
        }
        let n = varied.len();
        let mut incident = vec![0.0_f64; n];
        for pipe in &varied.pipes {
            if let (Some(a), Some(b)) = (varied.index_of(&pipe.from), varied.index_of(&pipe.to)) {
                incident[a] += pipe.flow;
                incident[b] += pipe.flow;
            }
        }
        for (hx, q) in varied.exchangers.iter_mut().zip(incident) {
            hx.through_flow = q;
        }
        varied
    }
}

/// Build the Kirchhoff flow matrix: diagonal `-q_i`, entry `(i,j)` the pipe
/// flow when a pipe connects the producer/consumer pair, zero otherwise.
/// Every row of a valid topology sums to zero.
pub fn build_lq(topology: &NetworkTopology) -> Result<DMatrix<f64>> {
    topology.validate()?;
    let n = topology.len();
    let mut lq = DMatrix::zeros(n, n);
    for (i, hx) in topology.exchangers.iter().enumerate() {
        lq[(i, i)] = -hx.through_flow;
    }
    for pipe in &topology.pipes {
        let a = topology.index_of(&pipe.from).expect("validated");
        let b = topology.index_of(&pipe.to).expect("validated");
        lq[(a, b)] += pipe.flow;
        lq[(b, a)] += pipe.flow;
    }
    Ok(lq)
}

/// Euler-discretized thermal model `T_{k+1} = Ad T_k + Bd (P_k + P^dis_k)`.
#[derive(Debug, Clone)]
pub struct DhsPlant {
    /// `I + tau E Lq`.
    pub ad: DMatrix<f64>,
    /// `tau E` (diagonal, positive).
    pub bd: DMatrix<f64>,
    pub tau: f64,
    /// Diagonal of `E = V^{-1}`.
    pub e_diag: DVector<f64>,
    /// The Kirchhoff flow matrix of the underlying topology.
    pub lq: DMatrix<f64>,
}

impl DhsPlant {
    pub fn dim(&self) -> usize {
        self.ad.nrows()
    }

    /// One Euler step of the thermal dynamics.
    pub fn step(&self, t: &DVector<f64>, p: &DVector<f64>, p_dis: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.dim();
        if t.len() != n || p.len() != n || p_dis.len() != n {
            return Err(Error::DimensionMismatch {
                context: "DhsPlant::step",
                expected: format!("three {n}-vectors"),
                found: format!("{}, {}, {}", t.len(), p.len(), p_dis.len()),
            });
        }
        Ok(&self.ad * t + &self.bd * (p + p_dis))
    }
}

/// Discretize a topology with sampling period `tau` (zero-order hold, Euler).
///
/// Fails when `-1` is an eigenvalue of `tau E Lq`, which would make the
/// one-step map singular.
pub fn discretize(topology: &NetworkTopology, tau: f64) -> Result<DhsPlant> {
    if !(tau > 0.0) {
        return Err(Error::Parse(format!("sampling period must be positive, got {tau}")));
    }
    let lq = build_lq(topology)?;
    let n = topology.len();
    let e_diag = topology.inverse_volumes();
    let mut tau_e_lq = lq.clone();
    for i in 0..n {
        let scale = tau * e_diag[i];
        for j in 0..n {
            tau_e_lq[(i, j)] *= scale;
        }
    }
    let near_minus_one = tau_e_lq
        .complex_eigenvalues()
        .iter()
        .any(|l| (l + nalgebra::Complex::new(1.0, 0.0)).norm() < 1e-9);
    if near_minus_one {
        return Err(Error::SingularDiscretization);
    }
    let ad = DMatrix::identity(n, n) + &tau_e_lq;
    let bd = DMatrix::from_diagonal(&(e_diag.clone() * tau));
    Ok(DhsPlant {
        ad,
        bd,
        tau,
        e_diag,
        lq,
    })
}

/// Bidiagonal marginal-cost difference operator: row `i` holds `F(i,i)` and
/// `-F(i+1,i+1)`. `F^M P = 0` iff all marginal costs `f_i P_i` are equal.
pub fn build_fm(f_diag: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = f_diag.len();
    if n < 2 {
        return Err(Error::DimensionMismatch {
            context: "build_fm",
            expected: "at least 2 cost coefficients".into(),
            found: format!("{n}"),
        });
    }
    let mut fm = DMatrix::zeros(n - 1, n);
    for i in 0..n - 1 {
        fm[(i, i)] = f_diag[i];
        fm[(i, i + 1)] = -f_diag[i + 1];
    }
    Ok(fm)
}

/// Optimal steady-state production/load adjustment and temperature deviation.
#[derive(Debug, Clone)]
pub struct DispatchSolution {
    /// Minimizer of the production cost under the network balance constraint.
    pub p_star: DVector<f64>,
    /// Temperature deviation with the weighted sum driven to zero.
    pub t_star: DVector<f64>,
    /// Shift applied along the all-ones direction of the flow-matrix nullspace.
    pub z: f64,
}

/// Solve the two-stage economic dispatch.
///
/// Stage one minimizes `1/2 P^T F P` subject to `P + P_dis` lying in the
/// range of the flow matrix; the constraint is enforced through an
/// orthonormal basis of the left nullspace obtained from the SVD, which also
/// covers flow matrices whose nullspace is not exactly the all-ones span.
/// Stage two picks the nullspace shift of the temperature that minimizes
/// `1/2 T^T G T`, which zeroes the G-weighted temperature sum.
pub fn solve_dispatch(
    lq: &DMatrix<f64>,
    f_diag: &DVector<f64>,
    g_diag: &DVector<f64>,
    p_dis: &DVector<f64>,
) -> Result<DispatchSolution> {
    let n = lq.nrows();
    if lq.ncols() != n || f_diag.len() != n || g_diag.len() != n || p_dis.len() != n {
        return Err(Error::DimensionMismatch {
            context: "solve_dispatch",
            expected: format!("{n}x{n} Lq and {n}-vectors"),
            found: format!(
                "Lq {}x{}, f {}, g {}, p_dis {}",
                lq.nrows(),
                lq.ncols(),
                f_diag.len(),
                g_diag.len(),
                p_dis.len()
            ),
        });
    }
    if f_diag.iter().any(|&f| !(f > 0.0)) || g_diag.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::Infeasible("cost coefficients must be positive".into()));
    }

    let svd = lq.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = SV_REL_TOL * sigma_max.max(1e-300);
    let null_idx: Vec<usize> = (0..n)
        .filter(|&i| i >= svd.singular_values.len() || svd.singular_values[i] <= tol)
        .collect();
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");

    // P* = -F^{-1} N (N^T F^{-1} N)^{-1} N^T P_dis with N the left-nullspace
    // basis; this is the KKT solution of the reduced equality-constrained QP.
    let r = null_idx.len();
    let p_star = if r == 0 {
        DVector::zeros(n)
    } else {
        let mut basis = DMatrix::zeros(n, r);
        for (col, &i) in null_idx.iter().enumerate() {
            basis.set_column(col, &u.column(i));
        }
        let f_inv = DVector::from_iterator(n, f_diag.iter().map(|&f| 1.0 / f));
        let f_inv_basis = DMatrix::from_fn(n, r, |i, j| f_inv[i] * basis[(i, j)]);
        let gram = basis.transpose() * &f_inv_basis;
        let rhs = basis.transpose() * p_dis;
        let multipliers = gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Infeasible("left-nullspace Gram matrix is singular".into()))?;
        -&f_inv_basis * multipliers
    };

    // Particular temperature, then the G-optimal nullspace shift.
    let t_particular = -(pseudoinverse(lq) * (p_dis + &p_star));
    let mut t_star = t_particular.clone();
    if r > 0 {
        let mut zbasis = DMatrix::zeros(n, r);
        for (col, &i) in null_idx.iter().enumerate() {
            zbasis.set_column(col, &v_t.row(i).transpose());
        }
        let g_z = DMatrix::from_fn(n, r, |i, j| g_diag[i] * zbasis[(i, j)]);
        let gram = zbasis.transpose() * &g_z;
        let rhs = zbasis.transpose() * DVector::from_iterator(n, g_diag.iter().zip(t_particular.iter()).map(|(&g, &t)| g * t));
        let coeffs = gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Infeasible("right-nullspace Gram matrix is singular".into()))?;
        t_star -= &zbasis * coeffs;
    }
    let z = (t_star.sum() - t_particular.sum()) / n as f64;
    Ok(DispatchSolution { p_star, t_star, z })
}

/// Residuals of the steady-state optimality conditions.
#[derive(Debug, Clone, Serialize)]
pub struct OptimalityReport {
    /// `|F^M P|_inf`: equal-marginal-cost condition.
    pub marginal_cost_residual: f64,
    /// `|1^T G T|`: weighted temperature-sum condition.
    pub weighted_sum_residual: f64,
    /// `|Lq T + P + P_dis|_inf`: network power balance.
    pub balance_residual: f64,
    pub ok: bool,
}

/// Check the optimality conditions of a candidate `(P, T)` pair against a
/// disturbance, returning all residuals.
pub fn check_optimality(
    lq: &DMatrix<f64>,
    f_diag: &DVector<f64>,
    g_diag: &DVector<f64>,
    p: &DVector<f64>,
    t: &DVector<f64>,
    p_dis: &DVector<f64>,
    tol: f64,
) -> OptimalityReport {
    let fm = build_fm(f_diag).expect("check_optimality needs n >= 2");
    let marginal = (&fm * p).amax();
    let weighted: f64 = g_diag.iter().zip(t.iter()).map(|(&g, &ti)| g * ti).sum();
    let balance = (lq * t + p + p_dis).amax();
    OptimalityReport {
        marginal_cost_residual: marginal,
        weighted_sum_residual: weighted.abs(),
        balance_residual: balance,
        ok: marginal <= tol && weighted.abs() <= tol && balance <= tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{controllability_matrix, rank};
    use crate::test_support::{random_topology, rng};
    use rand::Rng;

    fn two_node(q: f64) -> NetworkTopology {
        NetworkTopology {
            exchangers: vec![
                HeatExchanger {
                    id: "p1".into(),
                    role: Role::Producer,
                    volume: 1.0,
                    through_flow: q,
                },
                HeatExchanger {
                    id: "c1".into(),
                    role: Role::Consumer,
                    volume: 1.0,
                    through_flow: q,
                },
            ],
            pipes: vec![Pipe {
                from: "p1".into(),
                to: "c1".into(),
                flow: q,
            }],
        }
    }

    /// Two producers feeding two consumers: HX1 supplies HX3 and HX4,
    /// HX2 supplies HX4 only.
    fn four_node() -> NetworkTopology {
        let (q13, q14, q24) = (1.0, 2.0, 1.5);
        NetworkTopology {
            exchangers: vec![
                HeatExchanger {
                    id: "hx1".into(),
                    role: Role::Producer,
                    volume: 2.0,
                    through_flow: q13 + q14,
                },
                HeatExchanger {
                    id: "hx2".into(),
                    role: Role::Producer,
                    volume: 1.0,
                    through_flow: q24,
                },
                HeatExchanger {
                    id: "hx3".into(),
                    role: Role::Consumer,
                    volume: 1.5,
                    through_flow: q13,
                },
                HeatExchanger {
                    id: "hx4".into(),
                    role: Role::Consumer,
                    volume: 1.0,
                    through_flow: q14 + q24,
                },
            ],
            pipes: vec![
                Pipe { from: "hx1".into(), to: "hx3".into(), flow: q13 },
                Pipe { from: "hx1".into(), to: "hx4".into(), flow: q14 },
                Pipe { from: "hx2".into(), to: "hx4".into(), flow: q24 },
            ],
        }
    }

    #[test]
    fn lq_two_node_pattern() {
        let lq = build_lq(&two_node(1.0)).unwrap();
        assert_eq!(lq, nalgebra::dmatrix![-1.0, 1.0; 1.0, -1.0]);
    }

    #[test]
    fn lq_fan_out_adjacency_pattern() {
        let lq = build_lq(&four_node()).unwrap();
        // Off-diagonal pattern follows the supply relations.
        assert_eq!(lq[(0, 2)], 1.0);
        assert_eq!(lq[(0, 3)], 2.0);
        assert_eq!(lq[(1, 3)], 1.5);
        assert_eq!(lq[(0, 1)], 0.0);
        assert_eq!(lq[(2, 3)], 0.0);
        assert_eq!(lq[(1, 2)], 0.0);
        assert_eq!(lq, lq.transpose());
        assert_eq!(lq[(0, 0)], -3.0);
        // Kirchhoff: every row sums to zero.
        for i in 0..4 {
            assert!(lq.row(i).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn lq_row_sums_vanish_on_random_topologies() {
        let mut rng = rng(41);
        for _ in 0..20 {
            let topo = random_topology(&mut rng);
            let lq = build_lq(&topo).unwrap();
            let ones = DVector::from_element(topo.len(), 1.0);
            assert!((lq * ones).amax() < 1e-9);
        }
    }

    #[test]
    fn validation_names_offending_node() {
        let mut topo = two_node(1.0);
        topo.exchangers[1].through_flow = 2.0; // breaks conservation at c1
        match build_lq(&topo) {
            Err(Error::InvalidTopology(msg)) => assert!(msg.contains("c1"), "{msg}"),
            other => panic!("expected InvalidTopology, got {other:?}"),
        }
    }

    #[test]
    fn validation_rejects_disconnected_network() {
        let mut topo = four_node();
        topo.pipes.remove(2); // hx2 now isolated
        topo.exchangers[1].through_flow = 1.0;
        topo.exchangers[3].through_flow = 2.0;
        // re-balance so only connectivity fails
        topo.pipes.push(Pipe { from: "hx2".into(), to: "hx2".into(), flow: 1.0 });
        let err = topo.validate().unwrap_err();
        match err {
            Error::InvalidTopology(msg) => assert!(msg.contains("connected") || msg.contains("self-loop")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn discretize_small_tau_is_near_identity() {
        let plant = discretize(&four_node(), 1e-6).unwrap();
        let n = plant.dim();
        assert!((plant.ad.clone() - DMatrix::identity(n, n)).amax() < 1e-4);
    }

    #[test]
    fn discretize_two_node_hand_values() {
        let plant = discretize(&two_node(1.0), 0.1).unwrap();
        assert!((plant.ad.clone() - nalgebra::dmatrix![0.9, 0.1; 0.1, 0.9]).amax() < 1e-14);
        assert!((plant.bd.clone() - DMatrix::identity(2, 2) * 0.1).amax() < 1e-14);
    }

    #[test]
    fn euler_step_tracks_continuous_integrator_for_small_tau() {
        // One RK4 step of V T' = Lq T + P as the continuous-time oracle.
        let topo = two_node(1.0);
        let tau = 1e-3;
        let plant = discretize(&topo, tau).unwrap();
        let t0 = DVector::from_vec(vec![1.0, -0.5]);
        let p = DVector::from_vec(vec![0.3, 0.1]);
        let zero = DVector::zeros(2);
        let euler = plant.step(&t0, &p, &zero).unwrap();

        let lq = build_lq(&topo).unwrap();
        let e = topo.inverse_volumes();
        let f = |t: &DVector<f64>| -> DVector<f64> {
            let rhs = &lq * t + &p;
            DVector::from_iterator(2, rhs.iter().zip(e.iter()).map(|(&r, &ei)| r * ei))
        };
        let k1 = f(&t0);
        let k2 = f(&(&t0 + &k1 * (tau / 2.0)));
        let k3 = f(&(&t0 + &k2 * (tau / 2.0)));
        let k4 = f(&(&t0 + &k3 * tau));
        let rk4 = &t0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (tau / 6.0);
        assert!((euler - rk4).amax() < 1e-5);
    }

    #[test]
    fn discretize_rejects_singular_sampling() {
        // tau E Lq has eigenvalues {0, -2 tau} here, so tau = 0.5 places one at -1.
        assert!(matches!(
            discretize(&two_node(1.0), 0.5),
            Err(Error::SingularDiscretization)
        ));
    }

    #[test]
    fn discrete_pair_is_controllable() {
        for topo in [two_node(1.0), four_node()] {
            let plant = discretize(&topo, 0.1).unwrap();
            let ctrb = controllability_matrix(&plant.ad, &plant.bd);
            assert_eq!(rank(&ctrb), plant.dim());
        }
    }

    #[test]
    fn step_examples() {
        let plant = discretize(&two_node(1.0), 0.1).unwrap();
        let zero = DVector::zeros(2);
        assert!(plant.step(&zero, &zero, &zero).unwrap().amax() == 0.0);

        let t = DVector::from_vec(vec![1.0, 0.0]);
        let next = plant.step(&t, &zero, &zero).unwrap();
        assert!((next - DVector::from_vec(vec![0.9, 0.1])).amax() < 1e-14);

        // Fixed point: Lq T + P + P_dis = 0 keeps T unchanged.
        let p_dis = DVector::from_vec(vec![-0.4, 0.4]);
        let t_eq = DVector::from_vec(vec![0.7, 0.5]);
        let lq = &plant.lq;
        let p = -(lq * &t_eq) - &p_dis;
        let next = plant.step(&t_eq, &p, &p_dis).unwrap();
        assert!((next - t_eq).amax() < 1e-14);
    }

    #[test]
    fn fm_matrix_examples() {
        let fm = build_fm(&DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(fm, nalgebra::dmatrix![1.0, -2.0, 0.0; 0.0, 2.0, -3.0]);

        let fm = build_fm(&DVector::from_element(4, 1.0)).unwrap();
        let expected = nalgebra::dmatrix![
            1.0, -1.0, 0.0, 0.0;
            0.0, 1.0, -1.0, 0.0;
            0.0, 0.0, 1.0, -1.0
        ];
        assert_eq!(fm, expected);

        assert!(build_fm(&DVector::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn fm_nullspace_is_equal_marginal_cost() {
        let f = DVector::from_vec(vec![0.5, 2.0, 4.0]);
        let fm = build_fm(&f).unwrap();
        // f_i P_i all equal  =>  F^M P = 0.
        let p = DVector::from_iterator(3, f.iter().map(|&fi| 3.7 / fi));
        assert!((&fm * &p).amax() < 1e-12);
        // anything else leaves a residual
        let p_bad = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        assert!((&fm * &p_bad).amax() > 1e-3);
    }

    #[test]
    fn dispatch_zero_disturbance_is_zero() {
        let lq = build_lq(&four_node()).unwrap();
        let f = DVector::from_vec(vec![1.0, 2.0, 1.5, 0.7]);
        let g = DVector::from_element(4, 1.0);
        let sol = solve_dispatch(&lq, &f, &g, &DVector::zeros(4)).unwrap();
        assert!(sol.p_star.amax() < 1e-12);
        assert!(sol.t_star.amax() < 1e-10);
        assert!(sol.z.abs() < 1e-10);
    }

    #[test]
    fn dispatch_two_node_matches_kkt_and_grid_search() {
        let lq = build_lq(&two_node(1.0)).unwrap();
        let f = DVector::from_vec(vec![1.0, 1.0]);
        let g = DVector::from_element(2, 1.0);
        let p_dis = DVector::from_vec(vec![-2.0, 0.0]);
        let sol = solve_dispatch(&lq, &f, &g, &p_dis).unwrap();

        // KKT of the reduced QP: P_i = -sum(P_dis) / (f_i sum(1/f_j)).
        let total: f64 = p_dis.sum();
        let inv_sum: f64 = f.iter().map(|&fi| 1.0 / fi).sum();
        for i in 0..2 {
            let expected = -total / (f[i] * inv_sum);
            assert!((sol.p_star[i] - expected).abs() < 1e-9);
        }
        assert!((sol.p_star[0] - 1.0).abs() < 1e-9);
        assert!((sol.p_star[1] - 1.0).abs() < 1e-9);

        // Dense grid search over the balance constraint as an independent check.
        let cost = |p1: f64, p2: f64| 0.5 * (f[0] * p1 * p1 + f[1] * p2 * p2);
        let mut best = (f64::INFINITY, 0.0);
        let mut x = -5.0;
        while x <= 5.0 {
            let p2 = -total - x;
            let c = cost(x, p2);
            if c < best.0 {
                best = (c, x);
            }
            x += 1e-3;
        }
        assert!((best.1 - sol.p_star[0]).abs() < 2e-3);
        let c_star = cost(sol.p_star[0], sol.p_star[1]);
        assert!(c_star <= best.0 + 1e-9);
    }

    #[test]
    fn dispatch_satisfies_optimality_conditions() {
        let mut rng = rng(42);
        for _ in 0..10 {
            let topo = random_topology(&mut rng);
            let n = topo.len();
            let lq = build_lq(&topo).unwrap();
            let f = DVector::from_fn(n, |_, _| rng.random_range(0.5..3.0));
            let g = DVector::from_fn(n, |_, _| rng.random_range(0.5..3.0));
            let p_dis = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let sol = solve_dispatch(&lq, &f, &g, &p_dis).unwrap();
            let report = check_optimality(&lq, &f, &g, &sol.p_star, &sol.t_star, &p_dis, 1e-8);
            assert!(
                report.ok,
                "residuals: {} {} {}",
                report.marginal_cost_residual, report.weighted_sum_residual, report.balance_residual
            );
        }
    }

    #[test]
    fn dispatch_invariant_to_cost_scaling() {
        let lq = build_lq(&four_node()).unwrap();
        let f = DVector::from_vec(vec![1.0, 2.0, 1.5, 0.7]);
        let g = DVector::from_element(4, 1.0);
        let p_dis = DVector::from_vec(vec![0.0, -1.0, 0.5, -0.5]);
        let a = solve_dispatch(&lq, &f, &g, &p_dis).unwrap();
        let b = solve_dispatch(&lq, &(&f * 17.0), &g, &p_dis).unwrap();
        assert!((a.p_star - b.p_star).amax() < 1e-8);
        assert!((a.t_star - b.t_star).amax() < 1e-8);
    }

    #[test]
    fn dispatch_cost_minimality_by_sampling() {
        let mut rng = rng(43);
        let topo = four_node();
        let n = topo.len();
        let lq = build_lq(&topo).unwrap();
        let f = DVector::from_vec(vec![1.0, 2.0, 1.5, 0.7]);
        let g = DVector::from_vec(vec![1.0, 0.5, 2.0, 1.0]);
        let p_dis = DVector::from_vec(vec![0.0, -1.5, 0.4, -0.3]);
        let sol = solve_dispatch(&lq, &f, &g, &p_dis).unwrap();
        let cost_p =
            |p: &DVector<f64>| 0.5 * p.iter().zip(f.iter()).map(|(&pi, &fi)| fi * pi * pi).sum::<f64>();
        let star = cost_p(&sol.p_star);

        // Feasible perturbations keep 1^T (P + P_dis) = 0 for this network.
        let ones = DVector::from_element(n, 1.0);
        for _ in 0..1000 {
            let w = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let v = &w - &ones * (w.sum() / n as f64);
            let p = &sol.p_star + v;
            assert!(cost_p(&p) >= star - 1e-12);
        }

        // Any other nullspace shift of T has no smaller weighted cost.
        let cost_t =
            |t: &DVector<f64>| 0.5 * t.iter().zip(g.iter()).map(|(&ti, &gi)| gi * ti * ti).sum::<f64>();
        let star_t = cost_t(&sol.t_star);
        for _ in 0..200 {
            let shift: f64 = rng.random_range(-2.0..2.0);
            let t = &sol.t_star + &ones * shift;
            assert!(cost_t(&t) >= star_t - 1e-12);
        }
    }

    #[test]
    fn optimality_check_flags_perturbations() {
        let lq = build_lq(&two_node(1.0)).unwrap();
        let f = DVector::from_element(2, 1.0);
        let g = DVector::from_element(2, 1.0);
        let zero = DVector::zeros(2);
        assert!(check_optimality(&lq, &f, &g, &zero, &zero, &zero, 1e-8).ok);

        let p_dis = DVector::from_vec(vec![-2.0, 0.0]);
        let sol = solve_dispatch(&lq, &f, &g, &p_dis).unwrap();
        let mut p_bad = sol.p_star.clone();
        p_bad[0] += 1.0;
        let report = check_optimality(&lq, &f, &g, &p_bad, &sol.t_star, &p_dis, 1e-8);
        assert!(!report.ok);
        assert!(report.marginal_cost_residual > 0.5);
    }

    #[test]
    fn flow_variation_preserves_kirchhoff_rows() {
        for factor in [-0.5, -0.2, 0.2, 0.5] {
            let varied = four_node().with_flow_variation(factor);
            varied.validate().unwrap();
            let lq = build_lq(&varied).unwrap();
            let nominal = build_lq(&four_node()).unwrap();
            assert!((lq.clone() - nominal * (1.0 + factor)).amax() < 1e-12);
        }
    }
}
