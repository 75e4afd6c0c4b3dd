//! Error signals and the augmented increment dynamics.
//!
//! The regulation target is encoded in an error vector built from the
//! marginal-cost differences of the controllable powers and the G-weighted
//! temperature sum; driving it to zero lands the network on the optimal
//! dispatch. Time-differencing the plant removes the (constant, unknown)
//! disturbance and yields an LTI system in the stacked state
//! `[delta T_k; e_{k-1}]` with input `delta u_k = P_k - P_{k-1}`, on which
//! both the model-based regulator and the data-driven learner operate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::{build_fm, DhsPlant};
use crate::numerics::{rank, symmetrize};

/// The augmented increment dynamics and its quadratic cost blocks.
///
/// State dimension is `n = 2 n_T`, input dimension `m = n_T`.
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    pub a_eps: DMatrix<f64>,
    pub b_eps: DMatrix<f64>,
    pub c_eps: DMatrix<f64>,
    pub d_eps: DMatrix<f64>,
    /// `C^T Q_e C`.
    pub q_eps: DMatrix<f64>,
    /// `C^T Q_e D`.
    pub n_eps: DMatrix<f64>,
    /// `R_e + D^T Q_e D`.
    pub r_eps: DMatrix<f64>,
    /// Stage-cost block matrix `[[Q_eps, N_eps], [N_eps^T, R_eps]]`.
    pub qbar: DMatrix<f64>,
    pub n: usize,
    pub m: usize,
}

impl AugmentedSystem {
    /// Closed-loop matrix `A - B K`.
    pub fn closed_loop(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a_eps - &self.b_eps * k
    }

    /// Evolution matrix of the stacked sample vector under policy `K`:
    /// `[[A, B], [-K A, -K B]]`.
    pub fn phi(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, m) = (self.n, self.m);
        let mut phi = DMatrix::zeros(n + m, n + m);
        phi.view_mut((0, 0), (n, n)).copy_from(&self.a_eps);
        phi.view_mut((0, n), (n, m)).copy_from(&self.b_eps);
        phi.view_mut((n, 0), (m, n)).copy_from(&(-(k * &self.a_eps)));
        phi.view_mut((n, n), (m, m)).copy_from(&(-(k * &self.b_eps)));
        phi
    }

    /// Closed-loop state cost `Q_eps - N K - K^T N^T + K^T R K`; positive
    /// semidefinite for every gain.
    pub fn gain_cost(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(
            &(&self.q_eps - &self.n_eps * k - k.transpose() * self.n_eps.transpose()
                + k.transpose() * &self.r_eps * k),
        )
    }

    /// Stage cost `1/2 (e^T Q_e e + du^T R_e du)` written on the sample
    /// vector `[eps; du]`.
    pub fn stage_cost(&self, eps: &DVector<f64>, du: &DVector<f64>) -> f64 {
        let mut zd = DVector::zeros(self.n + self.m);
        zd.rows_mut(0, self.n).copy_from(eps);
        zd.rows_mut(self.n, self.m).copy_from(du);
        0.5 * (zd.transpose() * &self.qbar * zd)[(0, 0)]
    }
}

/// The G-weighted output `y = 1^T G T` and the optimality-condition error
/// `e = Lambda_p P + Lambda_y y`.
pub fn output_and_error(
    t: &DVector<f64>,
    p: &DVector<f64>,
    f_diag: &DVector<f64>,
    g_diag: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let n = f_diag.len();
    if t.len() != n || p.len() != n || g_diag.len() != n {
        return Err(Error::DimensionMismatch {
            context: "output_and_error",
            expected: format!("{n}-vectors"),
            found: format!("T {}, P {}, g {}", t.len(), p.len(), g_diag.len()),
        });
    }
    let y: f64 = g_diag.iter().zip(t.iter()).map(|(&g, &ti)| g * ti).sum();
    let fm = build_fm(f_diag)?;
    let mut e = DVector::zeros(n);
    e.rows_mut(0, n - 1).copy_from(&(&fm * p));
    e[n - 1] = y;
    Ok((y, e))
}

/// Assemble the augmented system and its cost blocks from the discrete plant
/// and the cost weights.
///
/// Fails with `AssumptionViolated` when the stacked rank-condition matrix
/// `[[tau E Lq, tau E], [Lambda_y 1^T G, Lambda_p]]` loses row rank, which
/// would break controllability of the augmented pair.
pub fn build_augmented(
    plant: &DhsPlant,
    f_diag: &DVector<f64>,
    g_diag: &DVector<f64>,
    q_e: &DMatrix<f64>,
    r_e: &DMatrix<f64>,
) -> Result<AugmentedSystem> {
    let nt = plant.dim();
    if f_diag.len() != nt || g_diag.len() != nt {
        return Err(Error::DimensionMismatch {
            context: "build_augmented",
            expected: format!("{nt} cost coefficients"),
            found: format!("f {}, g {}", f_diag.len(), g_diag.len()),
        });
    }
    if q_e.nrows() != nt || q_e.ncols() != nt || r_e.nrows() != nt || r_e.ncols() != nt {
        return Err(Error::DimensionMismatch {
            context: "build_augmented",
            expected: format!("{nt}x{nt} Q_e and R_e"),
            found: format!("Q_e {}x{}, R_e {}x{}", q_e.nrows(), q_e.ncols(), r_e.nrows(), r_e.ncols()),
        });
    }
    let fm = build_fm(f_diag)?;

    // Lambda_p stacks F^M over a zero row; Lambda_y selects the last error slot.
    let mut lambda_p = DMatrix::zeros(nt, nt);
    lambda_p.view_mut((0, 0), (nt - 1, nt)).copy_from(&fm);
    let mut weighted_row = DMatrix::zeros(nt, nt);
    for j in 0..nt {
        weighted_row[(nt - 1, j)] = g_diag[j];
    }

    let n = 2 * nt;
    let m = nt;
    let mut a_eps = DMatrix::zeros(n, n);
    a_eps.view_mut((0, 0), (nt, nt)).copy_from(&plant.ad);
    a_eps.view_mut((nt, 0), (nt, nt)).copy_from(&weighted_row);
    a_eps
        .view_mut((nt, nt), (nt, nt))
        .copy_from(&DMatrix::identity(nt, nt));

    let mut b_eps = DMatrix::zeros(n, m);
    b_eps.view_mut((0, 0), (nt, nt)).copy_from(&plant.bd);
    b_eps.view_mut((nt, 0), (nt, nt)).copy_from(&lambda_p);

    let mut c_eps = DMatrix::zeros(m, n);
    c_eps.view_mut((0, 0), (nt, nt)).copy_from(&weighted_row);
    c_eps
        .view_mut((0, nt), (nt, nt))
        .copy_from(&DMatrix::identity(nt, nt));
    let d_eps = lambda_p;

    // Rank condition for controllability of the augmented pair.
    let mut cond = DMatrix::zeros(n, n);
    cond.view_mut((0, 0), (nt, nt))
        .copy_from(&(&plant.ad - DMatrix::identity(nt, nt)));
    cond.view_mut((0, nt), (nt, nt)).copy_from(&plant.bd);
    cond.view_mut((nt, 0), (nt, nt))
        .copy_from(&weighted_row.view((0, 0), (nt, nt)));
    cond.view_mut((nt, nt), (nt, nt)).copy_from(&d_eps);
    let cond_rank = rank(&cond);
    if cond_rank < n {
        return Err(Error::AssumptionViolated {
            rank: cond_rank,
            required: n,
        });
    }

    let q_eps = symmetrize(&(c_eps.transpose() * q_e * &c_eps));
    let n_eps = c_eps.transpose() * q_e * &d_eps;
    let r_eps = symmetrize(&(r_e + d_eps.transpose() * q_e * &d_eps));
    let mut qbar = DMatrix::zeros(n + m, n + m);
    qbar.view_mut((0, 0), (n, n)).copy_from(&q_eps);
    qbar.view_mut((0, n), (n, m)).copy_from(&n_eps);
    qbar.view_mut((n, 0), (m, n)).copy_from(&n_eps.transpose());
    qbar.view_mut((n, n), (m, m)).copy_from(&r_eps);

    Ok(AugmentedSystem {
        a_eps,
        b_eps,
        c_eps,
        d_eps,
        q_eps,
        n_eps,
        r_eps,
        qbar,
        n,
        m,
    })
}

/// Lift aligned temperature/power histories into augmented samples
/// `(eps_k, du_k)` for `k = 0 .. len-1`.
///
/// At `k = 0` the increments use the convention `T_{-1} = T_0`,
/// `P_{-1} = P_0`, so `delta T_0 = 0` and `e_{-1}` is evaluated on the
/// initial pair.
pub fn lift_trajectory(
    t_hist: &[DVector<f64>],
    p_hist: &[DVector<f64>],
    f_diag: &DVector<f64>,
    g_diag: &DVector<f64>,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    if t_hist.len() < 2 || t_hist.len() != p_hist.len() {
        return Err(Error::HistoryTooShort {
            needed: 2,
            got: t_hist.len().min(p_hist.len()),
        });
    }
    let nt = f_diag.len();
    let mut out = Vec::with_capacity(t_hist.len());
    for k in 0..t_hist.len() {
        let (t_prev, p_prev) = if k == 0 {
            (&t_hist[0], &p_hist[0])
        } else {
            (&t_hist[k - 1], &p_hist[k - 1])
        };
        let delta_t = &t_hist[k] - t_prev;
        let delta_u = &p_hist[k] - p_prev;
        let (_, e_prev) = output_and_error(t_prev, p_prev, f_diag, g_diag)?;
        let mut eps = DVector::zeros(2 * nt);
        eps.rows_mut(0, nt).copy_from(&delta_t);
        eps.rows_mut(nt, nt).copy_from(&e_prev);
        out.push((eps, delta_u));
    }
    Ok(out)
}
