//! Convergence-theory diagnostics computed on live runs: the quadratic
//! model of one Newton step, the sketching constants tau / vartheta / zeta,
//! the per-round error terms, and Monte Carlo checks of the row-sampling
//! concentration bounds.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::SampleSet;
use crate::error::{Error, Result};
use crate::model::{self, sigmoid, LossConfig};

/// Constants of the convergence bound for one round.
#[derive(Debug, Clone)]
pub struct TheoryConstants {
    pub lambda: f64,
    /// per-device failure probabilities; delta_tilde = min, delta = sum
    pub delta_i: Vec<f64>,
    pub delta_tilde: f64,
    pub delta: f64,
    pub mu: f64,
    pub tau: f64,
    pub vartheta: f64,
    pub zeta2: f64,
    /// squared additive error of the direction sandwich (realized noise)
    pub epsilon2: f64,
    /// additive error of the parameter-gap recursion
    pub epsilon_prime: f64,
}

/// Per-round spectral and gap measurements.
#[derive(Debug, Clone)]
pub struct RoundDiagnostics {
    pub sigma_min_h: f64,
    pub sigma_max_h: f64,
    pub kappa: f64,
    /// max_j ||n_j|| over per-sample gradient columns
    pub max_grad_norm: f64,
    pub phi_at_recovered: f64,
    pub phi_at_exact: f64,
    /// ||w_t - w*||
    pub delta_norm: f64,
}

/// Quadratic model of a Newton step: phi(p) = 1/2 p^T H p - g^T p.
pub fn quadratic_phi(apply_h: impl Fn(&DVector<f64>) -> DVector<f64>, g: &DVector<f64>, p: &DVector<f64>) -> f64 {
    0.5 * p.dot(&apply_h(p)) - g.dot(p)
}

/// Global Newton step p* = H^{-1} g on the full dataset, by CG to relative
/// residual `tol`.
pub fn exact_newton_step(set: &SampleSet, w: &DVector<f64>, cfg: &LossConfig, tol: f64) -> Result<DVector<f64>> {
    let all: Vec<usize> = (0..set.n()).collect();
    let g = model::local_gradient(set, &all, w, cfg);
    let apply = |v: &DVector<f64>| model::hessian_vec(set, &all, w, cfg, v);
    model::conjugate_gradient(&apply, &g, tol, 50 * set.d().max(100), usize::MAX)
}

/// Square-root factor of the data part of the global Hessian: row j is
/// sqrt(l''(u_j^T w) / n) u_j, so that M^T M + gamma I = H.
pub fn hessian_factor(set: &SampleSet, w: &DVector<f64>) -> DMatrix<f64> {
    let n = set.n();
    let d = set.d();
    let mut m = DMatrix::zeros(n, d);
    for j in 0..n {
        let row = set.features.row(j);
        let s = sigmoid(row.transpose().dot(w));
        let scale = (s * (1.0 - s) / n as f64).sqrt();
        for c in 0..d {
            m[(j, c)] = scale * row[c];
        }
    }
    m
}

/// Columns n_j of the per-sample gradient matrix: n_j is the gradient of
/// the j-th sample's loss (including the ridge term), so their mean is the
/// global gradient.
pub fn gradient_columns(set: &SampleSet, w: &DVector<f64>, cfg: &LossConfig) -> DMatrix<f64> {
    let n = set.n();
    let d = set.d();
    let mut out = DMatrix::zeros(d, n);
    for j in 0..n {
        let u = set.features.row(j).transpose();
        let v = set.labels[j];
        let coeff = -v * sigmoid(-v * u.dot(w));
        for c in 0..d {
            out[(c, j)] = coeff * u[c] + cfg.gamma * w[c];
        }
    }
    out
}

pub fn max_column_norm(n_mat: &DMatrix<f64>) -> f64 {
    (0..n_mat.ncols())
        .map(|j| n_mat.column(j).norm())
        .fold(0.0, f64::max)
}

/// Extreme eigenvalues of H = M^T M + gamma I via the dense d x d Gram
/// matrix (desk scale).
pub fn hessian_spectrum(m: &DMatrix<f64>, gamma: f64) -> (f64, f64) {
    let gram = m.transpose() * m;
    let ev = nalgebra::SymmetricEigen::new(gram).eigenvalues;
    let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ((lo + gamma).max(gamma * 1e-6), hi + gamma)
}

/// Largest eigenvalue of M^T M.
pub fn sigma_max_gram(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    nalgebra::SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Inputs needed to evaluate the round's constants.
#[derive(Debug, Clone)]
pub struct ConstantsInput {
    pub lambda: f64,
    pub delta_i: Vec<f64>,
    pub mu: f64,
    pub sigma_max_gram: f64,
    pub gamma: f64,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub selected_sizes: Vec<usize>,
    pub sigma_min_h: f64,
    /// channel noise std (sqrt of noise power)
    pub sigma: f64,
    pub a_norm: f64,
    pub eta: f64,
    pub max_grad_norm: f64,
    /// norm of the realized recovered-noise vector a^H E / (sum|D| sqrt(eta))
    pub realized_noise_norm: f64,
}

pub fn compute_constants(inp: &ConstantsInput) -> TheoryConstants {
    let lambda = inp.lambda;
    let tau = inp.sigma_max_gram / (inp.sigma_max_gram + inp.n as f64 * inp.gamma);
    let sum_sel: f64 = inp.selected_sizes.iter().map(|&s| s as f64).sum();
    let min_sel = inp
        .selected_sizes
        .iter()
        .map(|&s| s as f64)
        .fold(f64::INFINITY, f64::min);
    let vartheta = 1.0 - sum_sel / inp.n as f64;

    let zeta1 = tau * (lambda + lambda * lambda / (1.0 - lambda));
    let zeta2 = 3.0 * zeta1 * zeta1 + 24.0 * vartheta * vartheta * (zeta1 + 1.0) * (zeta1 + 1.0);

    let delta_tilde = inp.delta_i.iter().cloned().fold(f64::INFINITY, f64::min);
    let delta: f64 = inp.delta_i.iter().sum();
    let log_factor = 1.0 + (2.0 * (1.0 / delta_tilde).ln()).sqrt();
    let selection_factor = 24.0 * vartheta * vartheta / min_sel + inp.m as f64 / inp.n as f64;

    // squared additive error on the quadratic model, with the realized
    // noise from this round's aggregation (the first term of the bound is
    // evaluated at the drawn noise, not at its expectation)
    let epsilon2 = 3.0 / inp.sigma_min_h * inp.realized_noise_norm * inp.realized_noise_norm
        + selection_factor
            * {
                let b = 1.0 / (1.0 - lambda) / inp.sigma_min_h.sqrt() * log_factor * inp.max_grad_norm;
                b * b
            };

    // additive error on ||w_t - w*|| from the expectation bound; the noise
    // term uses the deterministic d*sigma*||a||/sqrt(eta) form
    let noise_term = if inp.sigma > 0.0 {
        2.0 * 3.0f64.sqrt() / inp.sigma_min_h * (inp.d as f64 * inp.sigma / sum_sel)
            * (inp.a_norm / inp.eta.sqrt())
    } else {
        0.0
    };
    let epsilon_prime = noise_term
        + selection_factor.sqrt() * (1.0 / (1.0 - lambda)) * (2.0 / inp.sigma_min_h) * log_factor
            * inp.max_grad_norm;

    TheoryConstants {
        lambda,
        delta_i: inp.delta_i.clone(),
        delta_tilde,
        delta,
        mu: inp.mu,
        tau,
        vartheta,
        zeta2,
        epsilon2,
        epsilon_prime,
    }
}

/// Leverage-based coherence of a factor matrix: mu = (n/r) max_j ||U_j||^2
/// with U an orthonormal column basis and r = rank(M), clipped to [1, n/r].
pub fn coherence(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    let svd = m.clone().svd(true, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax <= 0.0 {
        return Err(Error::Other("coherence of a zero matrix is undefined".into()));
    }
    let tol = smax * 1e-12 * (n.max(m.ncols()) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let mut max_lev: f64 = 0.0;
    for j in 0..n {
        let lev: f64 = (0..rank)
            .filter(|&c| svd.singular_values[c] > tol)
            .map(|c| u[(j, c)] * u[(j, c)])
            .sum();
        max_lev = max_lev.max(lev);
    }
    let ratio = n as f64 / rank as f64;
    Ok((ratio * max_lev).clamp(1.0, ratio))
}

#[derive(Debug, Clone)]
pub struct Lemma3Report {
    pub lower_ok: bool,
    pub upper_ok: bool,
    pub lower_margin: f64,
    pub upper_margin: f64,
}

/// Sandwich check phi(p*) <= phi(p_hat) <= eps^2 + (1 - zeta^2) phi(p*).
/// The lower inequality is a deterministic minimizer property; the upper
/// one holds with the lemma's probability only.
pub fn check_lemma3(phi_hat: f64, phi_star: f64, epsilon2: f64, zeta2: f64) -> Lemma3Report {
    let lower_margin = phi_hat - phi_star;
    let upper_bound = epsilon2 + (1.0 - zeta2) * phi_star;
    let upper_margin = upper_bound - phi_hat;
    Lemma3Report {
        lower_ok: lower_margin >= -1e-12,
        upper_ok: upper_margin >= -1e-12,
        lower_margin,
        upper_margin,
    }
}

/// Draw uniform row-sampling indices for a sketch of size s over n rows.
/// Each sampled row enters the sketch scaled by 1/sqrt(s p) with p = 1/n,
/// so L L^T acts as (n/s) times the multiplicity-counting row selector.
fn sample_rows(n: usize, s: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..s).map(|_| rng.gen_range(0..n)).collect()
}

/// Fraction of trials where ||U^T L L^T U - I||_2 > lambda, with U the
/// orthonormal basis of M.
pub fn lemma1_exceedance(m: &DMatrix<f64>, s: usize, lambda: f64, trials: usize, rng: &mut impl Rng) -> Result<f64> {
    let n = m.nrows();
    let svd = m.clone().svd(true, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax <= 0.0 {
        return Err(Error::Other("sketch check needs a nonzero matrix".into()));
    }
    let tol = smax * 1e-12 * n as f64;
    let cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&c| svd.singular_values[c] > tol)
        .collect();
    let u_full = svd.u.as_ref().expect("left singular vectors requested");
    let r = cols.len();
    let mut u = DMatrix::zeros(n, r);
    for (k, &c) in cols.iter().enumerate() {
        u.set_column(k, &u_full.column(c));
    }

    let mut exceed = 0usize;
    let scale = n as f64 / s as f64;
    for _ in 0..trials {
        let rows = sample_rows(n, s, rng);
        let mut gram = DMatrix::zeros(r, r);
        for &j in &rows {
            let uj = u.row(j).transpose();
            gram.syger(scale, &uj, &uj, 1.0);
        }
        // syger fills the lower triangle only
        gram.fill_upper_triangle_with_lower_triangle();
        gram -= DMatrix::identity(r, r);
        let spec = nalgebra::SymmetricEigen::new(gram)
            .eigenvalues
            .iter()
            .map(|e| e.abs())
            .fold(0.0, f64::max);
        if spec > lambda {
            exceed += 1;
        }
    }
    Ok(exceed as f64 / trials as f64)
}

/// Fraction of trials where the sketched column mean deviates from the true
/// mean by more than (1 + sqrt(2 ln(1/delta_i))) sqrt(1/s) max_j ||n_j||.
pub fn lemma2_exceedance(
    n_mat: &DMatrix<f64>,
    s: usize,
    delta_i: f64,
    trials: usize,
    rng: &mut impl Rng,
) -> f64 {
    let n = n_mat.ncols();
    let mean = n_mat.column_mean();
    let bound = (1.0 + (2.0 * (1.0 / delta_i).ln()).sqrt()) * (1.0 / s as f64).sqrt() * max_column_norm(n_mat);
    let mut exceed = 0usize;
    for _ in 0..trials {
        let rows = sample_rows(n, s, rng);
        let mut acc = DVector::zeros(n_mat.nrows());
        for &j in &rows {
            acc += n_mat.column(j);
        }
        acc /= s as f64;
        if (&acc - &mean).norm() > bound {
            exceed += 1;
        }
    }
    exceed as f64 / trials as f64
}

/// Full diagnostics for one round given the recovered and exact directions.
pub fn round_diagnostics(
    set: &SampleSet,
    w: &DVector<f64>,
    w_star: &DVector<f64>,
    cfg: &LossConfig,
    p_hat: &DVector<f64>,
    p_star: &DVector<f64>,
) -> RoundDiagnostics {
    let all: Vec<usize> = (0..set.n()).collect();
    let g = model::local_gradient(set, &all, w, cfg);
    let apply = |v: &DVector<f64>| model::hessian_vec(set, &all, w, cfg, v);
    let m = hessian_factor(set, w);
    let (lo, hi) = hessian_spectrum(&m, cfg.gamma);
    let n_mat = gradient_columns(set, w, cfg);
    RoundDiagnostics {
        sigma_min_h: lo,
        sigma_max_h: hi,
        kappa: hi / lo,
        max_grad_norm: max_column_norm(&n_mat),
        phi_at_recovered: quadratic_phi(&apply, &g, p_hat),
        phi_at_exact: quadratic_phi(&apply, &g, p_star),
        delta_norm: (w - w_star).norm(),
    }
}
