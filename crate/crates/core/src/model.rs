//! Regularized logistic regression: losses, gradients, Hessian-vector
//! products, CG-based local Newton directions, and Armijo line search.

use nalgebra::DVector;

use crate::data::SampleSet;
use crate::error::{Error, Result};

/// Ridge weight for the loss family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        // paper-scale default; experiments override per run
        Self { gamma: 1e-8 }
    }
}

/// A local Newton direction together with its reported magnitude
/// `norm_scaled = |D_i| * ||p||`.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub p: DVector<f64>,
    pub norm_scaled: f64,
    pub device: usize,
    pub size: usize,
    pub converged_locally: bool,
}

/// Numerically stable `log(1 + exp(x))`.
pub fn log1pexp(x: f64) -> f64 {
    if x > 33.0 {
        x
    } else if x > -33.0 {
        x.exp().ln_1p()
    } else {
        x.exp()
    }
}

/// Logistic sigmoid, stable for large |s|.
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Local loss: mean of log(1+exp(-v u^T w)) over the shard plus the ridge.
pub fn local_loss(set: &SampleSet, rows: &[usize], w: &DVector<f64>, cfg: &LossConfig) -> f64 {
    let mut acc = 0.0;
    for &i in rows {
        let s: f64 = set.features.row(i).transpose().dot(w);
        acc += log1pexp(-set.labels[i] * s);
    }
    acc / rows.len() as f64 + 0.5 * cfg.gamma * w.norm_squared()
}

/// Local gradient: mean of -v u sigmoid(-v u^T w) plus gamma w.
pub fn local_gradient(
    set: &SampleSet,
    rows: &[usize],
    w: &DVector<f64>,
    cfg: &LossConfig,
) -> DVector<f64> {
    let mut g = DVector::zeros(set.d());
    for &i in rows {
        let u = set.features.row(i).transpose();
        let v = set.labels[i];
        let coeff = -v * sigmoid(-v * u.dot(w));
        g.axpy(coeff, &u, 1.0);
    }
    g /= rows.len() as f64;
    g.axpy(cfg.gamma, w, 1.0);
    g
}

/// Matrix-free Hessian-vector product of the local loss at `w`:
/// `H x = (1/|D|) sum ell''(u^T w) (u^T x) u + gamma x` with
/// `ell''(s) = sigmoid(s)(1 - sigmoid(s))`.
pub fn hessian_vec(
    set: &SampleSet,
    rows: &[usize],
    w: &DVector<f64>,
    cfg: &LossConfig,
    x: &DVector<f64>,
) -> DVector<f64> {
    let mut out = DVector::zeros(set.d());
    for &i in rows {
        let u = set.features.row(i).transpose();
        let s = u.dot(w);
        let sig = sigmoid(s);
        let curv = sig * (1.0 - sig);
        out.axpy(curv * u.dot(x), &u, 1.0);
    }
    out /= rows.len() as f64;
    out.axpy(cfg.gamma, x, 1.0);
    out
}

/// Conjugate gradient on a positive-definite operator. Returns the solution
/// once the *recomputed* residual satisfies `||A x - b|| <= tol * ||b||`.
pub fn conjugate_gradient<F>(
    apply: F,
    b: &DVector<f64>,
    tol: f64,
    max_iters: usize,
    device: usize,
) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let target = tol * b.norm();
    let mut x = DVector::zeros(b.len());
    if b.norm() == 0.0 {
        return Ok(x);
    }
    let mut total_iters = 0usize;
    loop {
        // (re)start from the current iterate with the true residual
        let mut r = b - apply(&x);
        if r.norm() <= target {
            return Ok(x);
        }
        let mut p = r.clone();
        let mut rs = r.norm_squared();
        loop {
            if total_iters >= max_iters {
                return Err(Error::CgStalled {
                    device,
                    residual: (b - apply(&x)).norm(),
                    target,
                    iters: total_iters,
                });
            }
            let ap = apply(&p);
            let curvature = p.dot(&ap);
            if curvature <= 0.0 {
                return Err(Error::CgBreakdown { device, curvature });
            }
            let alpha = rs / curvature;
            x.axpy(alpha, &p, 1.0);
            r.axpy(-alpha, &ap, 1.0);
            total_iters += 1;
            let rs_new = r.norm_squared();
            if rs_new.sqrt() <= target {
                break; // verify against the true residual in the outer loop
            }
            p = &r + &p * (rs_new / rs);
            rs = rs_new;
        }
    }
}

/// Local Newton direction `p` with `||H p - g|| <= tol * ||g||`, solved
/// matrix-free by conjugate gradient.
pub fn newton_direction(
    set: &SampleSet,
    rows: &[usize],
    w: &DVector<f64>,
    cfg: &LossConfig,
    tol: f64,
    max_iters: usize,
    device: usize,
) -> Result<LocalUpdate> {
    let g = local_gradient(set, rows, w, cfg);
    let size = rows.len();
    if g.norm() == 0.0 {
        return Ok(LocalUpdate {
            p: DVector::zeros(set.d()),
            norm_scaled: 0.0,
            device,
            size,
            converged_locally: true,
        });
    }
    let p = conjugate_gradient(
        |x| hessian_vec(set, rows, w, cfg, x),
        &g,
        tol,
        max_iters,
        device,
    )?;
    let norm_scaled = size as f64 * p.norm();
    Ok(LocalUpdate {
        p,
        norm_scaled,
        device,
        size,
        converged_locally: false,
    })
}

/// Armijo backtracking parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchConfig {
    pub alpha0: f64,
    pub shrink: f64,
    pub c1: f64,
    pub alpha_min: f64,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            shrink: 0.5,
            c1: 1e-4,
            alpha_min: 1e-8,
        }
    }
}

/// Backtracking Armijo search for the update `w - alpha * p`. Returns the
/// largest `alpha` in the backtracking grid satisfying
/// `F(w - alpha p) <= F(w) - c1 * alpha * g^T p`, or 0 when `p` is not a
/// descent direction (`g^T p <= 0`) or no step above `alpha_min` qualifies.
pub fn armijo_line_search<F>(
    loss_fn: F,
    w: &DVector<f64>,
    p: &DVector<f64>,
    grad: &DVector<f64>,
    cfg: &LineSearchConfig,
) -> f64
where
    F: Fn(&DVector<f64>) -> f64,
{
    let slope = grad.dot(p);
    if slope <= 0.0 {
        return 0.0;
    }
    let f0 = loss_fn(w);
    let mut alpha = cfg.alpha0;
    while alpha >= cfg.alpha_min {
        let trial = w - p * alpha;
        if loss_fn(&trial) <= f0 - cfg.c1 * alpha * slope {
            return alpha;
        }
        alpha *= cfg.shrink;
    }
    0.0
}
