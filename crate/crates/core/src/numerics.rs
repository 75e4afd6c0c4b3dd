//! Dense linear-algebra kernels: discrete Lyapunov and LQR solvers,
//! Moore-Penrose pseudoinverse, block-Hankel construction, spectral radius
//! and SVD-based rank.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values below `SV_REL_TOL * sigma_max` count as zero.
///
/// Shared by rank determination, persistence-of-excitation checks and the
/// pseudoinverse so that all rank decisions agree.
pub const SV_REL_TOL: f64 = 1e-8;

/// Largest dimension for which the Lyapunov equation is vectorized via the
/// Kronecker identity; larger problems fall back to Smith iteration.
const LYAPUNOV_KRON_MAX_DIM: usize = 32;

const LYAPUNOV_FIXED_POINT_TOL: f64 = 1e-12;

/// Spectral radius of a square matrix (largest eigenvalue modulus).
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context: "spectral_radius",
            expected: "square matrix".into(),
            found: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    Ok(m.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max))
}

/// Symmetric part of a matrix. Used to scrub rounding asymmetry from
/// quantities that are symmetric by construction.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix (the input is symmetrized first).
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Numerical rank: number of singular values above `SV_REL_TOL * sigma_max`.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > SV_REL_TOL * max).count()
}

/// Moore-Penrose pseudoinverse via SVD, with the shared rank threshold.
pub fn pseudoinverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    svd.pseudo_inverse(SV_REL_TOL * max)
        .expect("pseudo_inverse: nonnegative epsilon")
}

/// Solve `X = M^T X M + Q` for the unique symmetric `X`.
///
/// Requires `rho(M) < 1`; the solution is the series `sum_j M^T^j Q M^j`.
/// Small problems are vectorized with the Kronecker identity and solved
/// directly; larger ones use Smith's squaring iteration on the series.
pub fn solve_discrete_lyapunov(m: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = m.nrows();
    if m.ncols() != s {
        return Err(Error::DimensionMismatch {
            context: "solve_discrete_lyapunov",
            expected: "square M".into(),
            found: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    if q.nrows() != s || q.ncols() != s {
        return Err(Error::DimensionMismatch {
            context: "solve_discrete_lyapunov",
            expected: format!("{s}x{s} Q"),
            found: format!("{}x{}", q.nrows(), q.ncols()),
        });
    }
    let rho = spectral_radius(m)?;
    if rho >= 1.0 {
        return Err(Error::NotContractive { spectral_radius: rho });
    }
    let q = symmetrize(q);
    if s <= LYAPUNOV_KRON_MAX_DIM {
        // vec(M^T X M) = (M^T (x) M^T) vec(X), column-major vec.
        let mt = m.transpose();
        let kron = mt.kronecker(&mt);
        let system = DMatrix::<f64>::identity(s * s, s * s) - kron;
        let rhs = DVector::from_column_slice(q.as_slice());
        let x = system
            .lu()
            .solve(&rhs)
            .ok_or(Error::NotContractive { spectral_radius: rho })?;
        return Ok(symmetrize(&DMatrix::from_column_slice(s, s, x.as_slice())));
    }
    // Smith iteration: X_{k+1} = X_k + M_k^T X_k M_k, M_{k+1} = M_k^2 sums the
    // series with quadratically growing truncation order.
    let mut x = q;
    let mut mk = m.clone();
    for _ in 0..200 {
        let term = mk.transpose() * &x * &mk;
        let delta = term.norm();
        x += term;
        if delta <= LYAPUNOV_FIXED_POINT_TOL * x.norm().max(1.0) {
            return Ok(symmetrize(&x));
        }
        mk = &mk * &mk;
    }
    Err(Error::NoConvergence { iterations: 200 })
}

/// Cost matrix of a fixed gain: `Q - NK - K^T N^T + K^T R K`.
pub fn gain_cost_matrix(
    q: &DMatrix<f64>,
    n_cross: &DMatrix<f64>,
    r: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> DMatrix<f64> {
    symmetrize(&(q - n_cross * k - k.transpose() * n_cross.transpose() + k.transpose() * r * k))
}

const LQR_VALUE_ITER_CAP: usize = 20_000;
const LQR_POLICY_ITER_CAP: usize = 200;
const LQR_POLICY_TOL: f64 = 1e-12;

fn lqr_gain_from_value(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    n_cross: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let g = r + b.transpose() * p * b;
    let rhs = n_cross.transpose() + b.transpose() * p * a;
    g.lu().solve(&rhs).ok_or(Error::NotStabilizable)
}

/// Infinite-horizon discrete LQR with cross weight:
/// minimizes `sum x^T Q x + 2 x^T N u + u^T R u` for `x_{k+1} = A x + B u`.
///
/// Returns the stabilizing Riccati solution `P` and the gain
/// `K = (R + B^T P B)^{-1} (N^T + B^T P A)` with `u = -K x`.
///
/// A stabilizing seed gain is obtained by Riccati value iteration, then
/// refined by Hewer policy iteration (solve the closed-loop Lyapunov
/// equation, re-derive the greedy gain) until `|P_{i+1}-P_i|_F <= 1e-12 |P_i|_F`.
pub fn solve_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    n_cross: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "solve_lqr",
            expected: format!("A {n}x{n}, B {n}x{}", m),
            found: format!(
                "A {}x{}, B {}x{}, Q {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                q.nrows(),
                q.ncols()
            ),
        });
    }
    if n_cross.nrows() != n || n_cross.ncols() != m || r.nrows() != m || r.ncols() != m {
        return Err(Error::DimensionMismatch {
            context: "solve_lqr",
            expected: format!("N {n}x{m}, R {m}x{m}"),
            found: format!(
                "N {}x{}, R {}x{}",
                n_cross.nrows(),
                n_cross.ncols(),
                r.nrows(),
                r.ncols()
            ),
        });
    }

    // Value iteration until the induced gain stabilizes the closed loop.
    let mut p = symmetrize(q);
    let mut seed = None;
    for iter in 0..LQR_VALUE_ITER_CAP {
        let k = lqr_gain_from_value(a, b, n_cross, r, &p)?;
        let p_next = symmetrize(&(q + a.transpose() * &p * a - (n_cross + a.transpose() * &p * b) * &k));
        let delta = (&p_next - &p).norm();
        p = p_next;
        if delta <= 1e-9 * p.norm().max(1.0) || iter == LQR_VALUE_ITER_CAP - 1 {
            let closed = a - b * &k;
            if spectral_radius(&closed)? < 1.0 {
                seed = Some(k);
                break;
            }
        }
    }
    let mut gain = seed.ok_or(Error::NotStabilizable)?;

    // Hewer refinement.
    let mut value = solve_discrete_lyapunov(&(a - b * &gain), &gain_cost_matrix(q, n_cross, r, &gain))?;
    for _ in 0..LQR_POLICY_ITER_CAP {
        gain = lqr_gain_from_value(a, b, n_cross, r, &value)?;
        let next = solve_discrete_lyapunov(&(a - b * &gain), &gain_cost_matrix(q, n_cross, r, &gain))?;
        let delta = (&next - &value).norm();
        let done = delta <= LQR_POLICY_TOL * value.norm().max(f64::MIN_POSITIVE);
        value = next;
        if done {
            let k = lqr_gain_from_value(a, b, n_cross, r, &value)?;
            return Ok((value, k));
        }
    }
    Err(Error::NoConvergence {
        iterations: LQR_POLICY_ITER_CAP,
    })
}

/// Block-Hankel matrix of depth `order` from a sequence of m-vectors.
///
/// Block row `l` holds `u_l, u_{l+1}, ..., u_{l+N-order}`, giving an
/// `m*order x (N-order+1)` matrix.
pub fn hankel(u: &[DVector<f64>], order: usize) -> Result<DMatrix<f64>> {
    let n = u.len();
    if order == 0 || n < order {
        return Err(Error::SequenceTooShort {
            needed: order.max(1),
            got: n,
        });
    }
    let m = u[0].len();
    for v in u {
        if v.len() != m {
            return Err(Error::DimensionMismatch {
                context: "hankel",
                expected: format!("{m}-vectors"),
                found: format!("{}-vector", v.len()),
            });
        }
    }
    let cols = n - order + 1;
    let mut h = DMatrix::zeros(m * order, cols);
    for l in 0..order {
        for j in 0..cols {
            h.view_mut((l * m, j), (m, 1)).copy_from(&u[l + j]);
        }
    }
    Ok(h)
}

/// Kalman controllability matrix `[B, AB, ..., A^{n-1}B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut blocks = DMatrix::zeros(n, n * m);
    let mut power = b.clone();
    for i in 0..n {
        blocks.view_mut((0, i * m), (n, m)).copy_from(&power);
        power = a * power;
    }
    blocks
}
