//! Interior-point solver for small linear SDPs over Hermitian matrices:
//!
//!   minimize   <C, X>
//!   subject to <Q_i, X> >= 1,  i = 1..m
//!              X >= 0 (Hermitian PSD)
//!
//! with <A, B> = Re tr(A^H B). Solved by a log-barrier path-following
//! method with damped Newton steps taken over an orthonormal real basis of
//! the Hermitian matrices. Problem sizes here are tiny (k <= 16 antennas),
//! so the k^2 x k^2 Newton system is assembled densely.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LinearSDP {
    pub c: DMatrix<Complex64>,
    pub constraints: Vec<DMatrix<Complex64>>,
}

#[derive(Debug, Clone)]
pub struct SDPSolution {
    pub x: DMatrix<Complex64>,
    pub objective: f64,
    /// dual multipliers for the linear constraints
    pub duals: Vec<f64>,
    /// norm of the dual residual C - sum y_i Q_i - Z with Z = X^{-1}/t
    pub dual_residual: f64,
    /// max_i y_i * (<Q_i,X> - 1), complementary-slackness violation
    pub complementarity: f64,
    pub barrier_rounds: usize,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_barrier_rounds: usize,
    pub max_newton_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_barrier_rounds: 60,
            max_newton_iters: 200,
        }
    }
}

/// Real inner product <A, B> = Re tr(A^H B).
pub fn herm_inner(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

/// Real 2k x 2k representation [[Re, -Im], [Im, Re]] of a complex matrix.
/// Hermitian PSD complex matrices map to symmetric PSD real ones; each
/// complex eigenvalue appears twice.
pub fn hermitian_to_real(a: &DMatrix<Complex64>) -> DMatrix<f64> {
    let k = a.nrows();
    let mut out = DMatrix::zeros(2 * k, 2 * k);
    for i in 0..k {
        for j in 0..k {
            out[(i, j)] = a[(i, j)].re;
            out[(i, j + k)] = -a[(i, j)].im;
            out[(i + k, j)] = a[(i, j)].im;
            out[(i + k, j + k)] = a[(i, j)].re;
        }
    }
    out
}

/// Orthonormal basis of the real vector space of k x k Hermitian matrices:
/// diagonal units, symmetric pairs scaled by 1/sqrt(2), antisymmetric
/// imaginary pairs scaled by 1/sqrt(2). Dimension k^2.
fn hermitian_basis(k: usize) -> Vec<DMatrix<Complex64>> {
    let mut basis = Vec::with_capacity(k * k);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..k {
        let mut e = DMatrix::zeros(k, k);
        e[(i, i)] = Complex64::new(1.0, 0.0);
        basis.push(e);
    }
    for i in 0..k {
        for j in (i + 1)..k {
            let mut e = DMatrix::zeros(k, k);
            e[(i, j)] = Complex64::new(s, 0.0);
            e[(j, i)] = Complex64::new(s, 0.0);
            basis.push(e);
            let mut f = DMatrix::zeros(k, k);
            f[(i, j)] = Complex64::new(0.0, -s);
            f[(j, i)] = Complex64::new(0.0, s);
            basis.push(f);
        }
    }
    basis
}

fn hermitize(a: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    (a + a.adjoint()) * Complex64::new(0.5, 0.0)
}

fn inverse_psd(x: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    let k = x.nrows();
    if let Some(chol) = x.clone().cholesky() {
        return Ok(chol.inverse());
    }
    // fall back with a small diagonal lift on borderline iterates
    let lifted = x + DMatrix::identity(k, k) * Complex64::new(1e-12, 0.0);
    lifted
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SdpFailure {
            msg: "barrier iterate lost positive definiteness".into(),
            iterate: 0,
        })
}

fn is_positive_definite(x: &DMatrix<Complex64>) -> bool {
    x.clone().cholesky().is_some()
}

/// Strictly feasible starting point `c0 * I` with `c0 = 1.1 * max_i 1/tr(Q_i)`.
/// Requires every constraint matrix to have positive trace (true for the
/// beamforming constraints, which are PSD rank-one matrices).
pub fn init_feasible(sdp: &LinearSDP) -> Result<DMatrix<Complex64>> {
    let k = sdp.c.nrows();
    let mut c0: f64 = 0.0;
    for (i, q) in sdp.constraints.iter().enumerate() {
        let tr: f64 = (0..k).map(|j| q[(j, j)].re).sum();
        if tr <= 0.0 {
            return Err(Error::SdpFailure {
                msg: format!("constraint {i} has non-positive trace; cannot scale identity into feasibility"),
                iterate: 0,
            });
        }
        c0 = c0.max(1.0 / tr);
    }
    if sdp.constraints.is_empty() {
        return Err(Error::SdpFailure {
            msg: "SDP needs at least one linear constraint".into(),
            iterate: 0,
        });
    }
    Ok(DMatrix::identity(k, k) * Complex64::new(1.1 * c0, 0.0))
}

/// Path-following solve. Returns the primal iterate with barrier-based dual
/// certificates; the duality gap bound at exit is (m + k) / t <= tol scaled
/// by the objective magnitude.
pub fn solve(sdp: &LinearSDP, opts: &SolverOptions) -> Result<SDPSolution> {
    let k = sdp.c.nrows();
    if sdp.c.ncols() != k {
        return Err(Error::SdpFailure {
            msg: "cost matrix must be square".into(),
            iterate: 0,
        });
    }
    let m = sdp.constraints.len();
    let basis = hermitian_basis(k);
    let dim = basis.len();
    let mut x = init_feasible(sdp)?;
    let mut t = 1.0;
    let mut barrier_rounds = 0;

    // normalize the variable scale so the solve runs at an O(1) objective:
    // X = beta * X~ with <Q_i, X> >= 1 becoming <beta Q_i, X~> >= 1. The
    // dual residual is invariant under this substitution, which keeps its
    // f64 floor independent of how badly scaled the instance is.
    let beta = herm_inner(&sdp.c, &x).abs().max(1e-12);
    let constraints: Vec<DMatrix<Complex64>> = sdp
        .constraints
        .iter()
        .map(|q| q * Complex64::from(beta))
        .collect();
    x /= Complex64::from(beta);
    let obj_scale = 1.0f64;

    loop {
        barrier_rounds += 1;
        if barrier_rounds > opts.max_barrier_rounds {
            return Err(Error::SdpFailure {
                msg: "barrier round limit exceeded".into(),
                iterate: barrier_rounds,
            });
        }

        // centering: damped Newton on the barrier function at fixed t
        let mut prev_res = f64::INFINITY;
        for newton_iter in 0..opts.max_newton_iters {
            let x_inv = inverse_psd(&x)?;
            let slacks: Vec<f64> = constraints
                .iter()
                .map(|q| herm_inner(q, &x) - 1.0)
                .collect();
            if slacks.iter().any(|&s| s <= 0.0) {
                return Err(Error::SdpFailure {
                    msg: "iterate left the feasible region".into(),
                    iterate: barrier_rounds,
                });
            }

            // gradient of t<C,X> - logdet X - sum log s_i in basis coords
            let mut grad_mat = &sdp.c * Complex64::new(t, 0.0) - &x_inv;
            for (q, &s) in constraints.iter().zip(&slacks) {
                grad_mat -= q * Complex64::new(1.0 / s, 0.0);
            }
            let grad = DVector::from_fn(dim, |i, _| herm_inner(&basis[i], &grad_mat));

            // Hessian action: X^{-1} D X^{-1} + sum <Q_i,D>/s_i^2 Q_i
            let mut hess = DMatrix::zeros(dim, dim);
            let q_coords: Vec<DVector<f64>> = constraints
                .iter()
                .map(|q| DVector::from_fn(dim, |i, _| herm_inner(&basis[i], q)))
                .collect();
            for j in 0..dim {
                let hdj = &x_inv * &basis[j] * &x_inv;
                for i in 0..dim {
                    hess[(i, j)] = herm_inner(&basis[i], &hdj);
                }
            }
            for (qc, &s) in q_coords.iter().zip(&slacks) {
                // rank-one barrier curvature term
                hess.syger(1.0 / (s * s), qc, qc, 1.0);
            }

            let step_coords = match hess
                .clone()
                .cholesky()
                .map(|c| c.solve(&grad))
                .or_else(|| hess.lu().solve(&grad))
            {
                Some(s) => s,
                // a singular system while already near the center means the
                // polish has hit the numerical floor; keep the iterate
                None if grad.norm() <= 1e-5 * t * obj_scale => break,
                None => {
                    return Err(Error::SdpFailure {
                        msg: "singular Newton system in barrier centering".into(),
                        iterate: barrier_rounds,
                    })
                }
            };

            // affine-invariant Newton decrement; lambda <= 1e-5 keeps the
            // off-center correction to the gap bound negligible. The raw
            // gradient norm is t times the dual residual reported below, so
            // keep polishing until that is small too (with a floor where
            // f64 rounding stops further progress).
            let decrement2 = grad.dot(&step_coords);
            // once the decrement is small, keep polishing while the raw
            // gradient (t times the reported dual residual) still improves;
            // stagnation means the f64 floor of the X^{-1} evaluation
            let res = grad.norm() / t;
            if decrement2 <= 1e-10 && (res <= 1e-9 * obj_scale || res >= 0.995 * prev_res) {
                break;
            }
            prev_res = res;
            // exhausting the budget means a numerical stall near the
            // center; the current iterate is the best available
            let _ = newton_iter;

            let mut step = DMatrix::zeros(k, k);
            for i in 0..dim {
                step += &basis[i] * Complex64::new(step_coords[i], 0.0);
            }
            step = hermitize(&step);

            // self-concordant damped step: alpha = 1/(1+lambda) guarantees
            // decrease without evaluating the barrier value, whose f64
            // rounding noise at large t would swamp a backtracking test
            let lambda = decrement2.sqrt();
            let mut alpha = if lambda <= 0.25 { 1.0 } else { 1.0 / (1.0 + lambda) };
            let mut accepted = false;
            for _ in 0..60 {
                let cand = hermitize(&(&x - &step * Complex64::new(alpha, 0.0)));
                let slacks_ok = constraints.iter().all(|q| herm_inner(q, &cand) > 1.0);
                if slacks_ok && is_positive_definite(&cand) {
                    x = cand;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // even a fully damped step leaves the domain: numerical
                // floor reached, keep the current iterate
                break;
            }
        }

        // duality gap along the central path
        if (m as f64 + k as f64) / t <= opts.tol * obj_scale {
            break;
        }
        t *= 10.0;
    }

    // dual certificates from the centered point, in scaled coordinates;
    // the residual matrix is identical in original coordinates
    let x_inv = inverse_psd(&x)?;
    let slacks: Vec<f64> = constraints.iter().map(|q| herm_inner(q, &x) - 1.0).collect();
    let duals_scaled: Vec<f64> = slacks.iter().map(|&s| 1.0 / (t * s)).collect();
    let z = &x_inv * Complex64::new(1.0 / t, 0.0);
    let mut dual_res = &sdp.c - &z;
    for (q, &y) in constraints.iter().zip(&duals_scaled) {
        dual_res -= q * Complex64::new(y, 0.0);
    }
    let dual_residual = dual_res.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let complementarity = duals_scaled
        .iter()
        .zip(&slacks)
        .map(|(&y, &s)| (y * s).abs() * beta)
        .fold(0.0f64, f64::max);

    // undo the variable scaling
    let x = x * Complex64::from(beta);
    let duals: Vec<f64> = duals_scaled.iter().map(|&y| y * beta).collect();

    Ok(SDPSolution {
        objective: herm_inner(&sdp.c, &x),
        x,
        duals,
        dual_residual,
        complementarity,
        barrier_rounds,
    })
}

/// Largest eigenvalue and a unit eigenvector of a Hermitian matrix, via the
/// real embedding. The eigenvector phase is normalized deterministically:
/// the entry of largest magnitude (lowest index on ties) is made real
/// positive.
pub fn top_eigenpair(a: &DMatrix<Complex64>) -> (f64, DVector<Complex64>) {
    let k = a.nrows();
    let real = hermitian_to_real(a);
    let se = nalgebra::SymmetricEigen::new(real);
    let mut best = 0;
    for i in 1..2 * k {
        if se.eigenvalues[i] > se.eigenvalues[best] {
            best = i;
        }
    }
    let col = se.eigenvectors.column(best);
    let mut v = DVector::from_fn(k, |i, _| Complex64::new(col[i], col[i + k]));
    let norm = v.norm();
    if norm > 0.0 {
        v /= Complex64::new(norm, 0.0);
    }
    normalize_phase(&mut v);
    (se.eigenvalues[best], v)
}

/// Rotate a complex vector so its largest-magnitude entry (lowest index on
/// near-ties) is real and positive. Makes eigenvector choices reproducible.
pub fn normalize_phase(v: &mut DVector<Complex64>) {
    let mut idx = 0;
    let mut best = 0.0f64;
    for (i, c) in v.iter().enumerate() {
        let mag = c.norm();
        if mag > best * (1.0 + 1e-12) {
            best = mag;
            idx = i;
        }
    }
    if best > 0.0 {
        let phase = v[idx] / Complex64::new(best, 0.0);
        let rot = phase.conj();
        for c in v.iter_mut() {
            *c *= rot;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn outer(v: &DVector<Complex64>) -> DMatrix<Complex64> {
        v * v.adjoint()
    }

    fn cvec(entries: &[(f64, f64)]) -> DVector<Complex64> {
        DVector::from_iterator(entries.len(), entries.iter().map(|&(r, i)| Complex64::new(r, i)))
    }

    #[test]
    fn single_rank_one_constraint_closed_form() {
        // min tr(X) s.t. <hh^H, X> >= 1: optimum X* = hh^H/||h||^4,
        // objective 1/||h||^2
        let h = cvec(&[(1.0, 0.5), (-0.3, 2.0)]);
        let sdp = LinearSDP {
            c: DMatrix::identity(2, 2),
            constraints: vec![outer(&h)],
        };
        let sol = solve(&sdp, &SolverOptions::default()).unwrap();
        let n2 = h.norm_squared();
        assert_relative_eq!(sol.objective, 1.0 / n2, max_relative = 1e-7);
        let expected = outer(&h) / Complex64::new(n2 * n2, 0.0);
        let err: f64 = (&sol.x - &expected).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        assert!(err < 1e-6, "X deviates from rank-one optimum by {err:e}");
    }

    #[test]
    fn orthogonal_constraints_diagonal_optimum() {
        // min tr(X) s.t. X_11 >= 1, X_22 >= 1: optimum diag(1,1), value 2
        let e1 = cvec(&[(1.0, 0.0), (0.0, 0.0)]);
        let e2 = cvec(&[(0.0, 0.0), (1.0, 0.0)]);
        let sdp = LinearSDP {
            c: DMatrix::identity(2, 2),
            constraints: vec![outer(&e1), outer(&e2)],
        };
        let sol = solve(&sdp, &SolverOptions::default()).unwrap();
        assert_relative_eq!(sol.objective, 2.0, max_relative = 1e-7);
        assert_relative_eq!(sol.x[(0, 0)].re, 1.0, max_relative = 1e-6);
        assert_relative_eq!(sol.x[(1, 1)].re, 1.0, max_relative = 1e-6);
        assert!(sol.x[(0, 1)].norm() < 1e-6);
    }

    #[test]
    fn kkt_certificates_small() {
        let h1 = cvec(&[(1.0, 0.2), (0.4, -0.9), (0.1, 0.1)]);
        let h2 = cvec(&[(-0.5, 1.1), (0.3, 0.3), (1.2, 0.0)]);
        let h3 = cvec(&[(0.2, -0.4), (1.0, 0.5), (-0.6, 0.7)]);
        let sdp = LinearSDP {
            c: DMatrix::identity(3, 3),
            constraints: vec![outer(&h1), outer(&h2), outer(&h3)],
        };
        let sol = solve(&sdp, &SolverOptions::default()).unwrap();
        assert!(sol.dual_residual < 1e-6, "dual residual {:e}", sol.dual_residual);
        assert!(sol.complementarity < 1e-6, "complementarity {:e}", sol.complementarity);
        assert!(sol.duals.iter().all(|&y| y >= 0.0));
        // primal feasibility
        for q in &sdp.constraints {
            assert!(herm_inner(q, &sol.x) >= 1.0 - 1e-9);
        }
        assert!(is_positive_definite(&(sol.x.clone() + DMatrix::identity(3, 3) * Complex64::new(1e-12, 0.0))));
    }

    #[test]
    fn real_embedding_spectrum() {
        // Pauli-Y has eigenvalues +-1; the real embedding doubles them
        let mut y = DMatrix::zeros(2, 2);
        y[(0, 1)] = Complex64::new(0.0, -1.0);
        y[(1, 0)] = Complex64::new(0.0, 1.0);
        let real = hermitian_to_real(&y);
        let mut ev = nalgebra::SymmetricEigen::new(real).eigenvalues.as_slice().to_vec();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(ev[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(ev[1], -1.0, epsilon = 1e-12);
        assert_relative_eq!(ev[2], 1.0, epsilon = 1e-12);
        assert_relative_eq!(ev[3], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn top_eigenpair_matches_construction() {
        let v = cvec(&[(0.6, 0.0), (0.0, 0.8)]);
        let a = outer(&v) * Complex64::new(3.0, 0.0);
        let (lam, u) = top_eigenpair(&a);
        assert_relative_eq!(lam, 3.0, max_relative = 1e-10);
        // u should match v up to phase; phase normalization makes the
        // largest entry real positive
        let overlap = u.dotc(&v).norm();
        assert_relative_eq!(overlap, 1.0, max_relative = 1e-10);
        assert!(u[1].re > 0.0 && u[1].im.abs() < 1e-12);
    }

    #[test]
    fn objective_scale_covariance() {
        // scaling every constraint by c scales the optimum by 1/c
        let h1 = cvec(&[(1.0, 0.0), (0.5, -0.5)]);
        let h2 = cvec(&[(0.2, 0.7), (1.1, 0.0)]);
        let base = LinearSDP {
            c: DMatrix::identity(2, 2),
            constraints: vec![outer(&h1), outer(&h2)],
        };
        let scaled = LinearSDP {
            c: DMatrix::identity(2, 2),
            constraints: base
                .constraints
                .iter()
                .map(|q| q * Complex64::new(4.0, 0.0))
                .collect(),
        };
        let s1 = solve(&base, &SolverOptions::default()).unwrap();
        let s2 = solve(&scaled, &SolverOptions::default()).unwrap();
        assert_relative_eq!(s2.objective, s1.objective / 4.0, max_relative = 1e-6);
    }

    #[test]
    fn init_point_strictly_feasible() {
        let h1 = cvec(&[(0.01, 0.0), (0.0, 0.02)]);
        let h2 = cvec(&[(5.0, -3.0), (2.0, 1.0)]);
        let sdp = LinearSDP {
            c: DMatrix::identity(2, 2),
            constraints: vec![outer(&h1), outer(&h2)],
        };
        let x0 = init_feasible(&sdp).unwrap();
        for q in &sdp.constraints {
            assert!(herm_inner(q, &x0) > 1.0);
        }
        assert!(is_positive_definite(&x0));
    }

    #[test]
    fn phase_normalization_deterministic() {
        let mut v = cvec(&[(0.0, 0.5), (-0.8, 0.1)]);
        let mut w = v.clone() * Complex64::from_polar(1.0, 2.2);
        normalize_phase(&mut v);
        normalize_phase(&mut w);
        assert!((v - w).norm() < 1e-12);
    }
}
