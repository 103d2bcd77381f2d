//! Second-order upper bound on the loss change between checkpoints.
//!
//! For consecutive parameter vectors `theta_prev` and `theta_next` with
//! `d = theta_next - theta_prev`, a Taylor expansion around a stationary
//! `theta_prev` gives
//!
//! ```text
//! L(theta_next) - L(theta_prev) <= 0.5 * lambda_max * |d|^2
//! ```
//!
//! where `lambda_max` is the largest Hessian eigenvalue at `theta_prev`.
//! The Hessian is never formed: power iteration runs on central-difference
//! Hessian-vector products of the gradient.

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{mse_gradient, mse_loss, MlpParams, PredictorError, WindowDataset};

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("vectors have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("direction vector is zero")]
    ZeroDirection,
    #[error(
        "power iteration did not converge in {iterations} iterations (last estimate {estimate})"
    )]
    NoConvergence { estimate: f64, iterations: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least 2 checkpoints, got {0}")]
    TooFewCheckpoints(usize),
    #[error("non-finite loss or gradient")]
    NonFinite,
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A twice-differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, theta: &[f64]) -> Result<f64, BoundError>;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>, BoundError>;
}

/// `0.5 * theta' A theta + b' theta` with symmetric `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    a: DMatrix<f64>,
    b: Vec<f64>,
}

impl Quadratic {
    pub fn new(a: DMatrix<f64>) -> Result<Self, BoundError> {
        let n = a.nrows();
        Self::with_linear(a, vec![0.0; n])
    }

    pub fn with_linear(a: DMatrix<f64>, b: Vec<f64>) -> Result<Self, BoundError> {
        if !a.is_square() {
            return Err(BoundError::InvalidConfig(format!(
                "matrix is {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.len() != a.nrows() {
            return Err(BoundError::LengthMismatch(a.nrows(), b.len()));
        }
        let scale = a.amax().max(1.0);
        if (&a - a.transpose()).amax() > 1e-12 * scale {
            return Err(BoundError::InvalidConfig("matrix is not symmetric".into()));
        }
        Ok(Self { a, b })
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self {
            a: DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(diag)),
            b: vec![0.0; diag.len()],
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value(&self, theta: &[f64]) -> Result<f64, BoundError> {
        check_len(self.dim(), theta.len())?;
        let ax = self.gradient(theta)?;
        Ok(theta
            .iter()
            .zip(&ax)
            .zip(&self.b)
            .map(|((t, g), b)| 0.5 * t * (g - b) + b * t)
            .sum())
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>, BoundError> {
        check_len(self.dim(), theta.len())?;
        Ok((0..self.dim())
            .map(|i| {
                self.a
                    .row(i)
                    .iter()
                    .zip(theta)
                    .map(|(a, t)| a * t)
                    .sum::<f64>()
                    + self.b[i]
            })
            .collect())
    }
}

/// Inference-mode mean squared error of a network on a fixed set of
/// dataset rows, as a function of its flattened parameters.
#[derive(Debug, Clone)]
pub struct NetworkLoss<'a> {
    template: MlpParams,
    data: &'a WindowDataset,
    rows: Vec<usize>,
}

impl<'a> NetworkLoss<'a> {
    /// `template` fixes the layer shapes; its values are ignored.
    pub fn new(
        template: MlpParams,
        data: &'a WindowDataset,
        rows: Vec<usize>,
    ) -> Result<Self, BoundError> {
        if let Some(&r) = rows.iter().find(|&&r| r >= data.len()) {
            return Err(BoundError::InvalidConfig(format!(
                "row {r} outside dataset of {} windows",
                data.len()
            )));
        }
        Ok(Self {
            template,
            data,
            rows,
        })
    }
}

impl Objective for NetworkLoss<'_> {
    fn dim(&self) -> usize {
        self.template.param_count()
    }

    fn value(&self, theta: &[f64]) -> Result<f64, BoundError> {
        let net = self.template.with_flat(theta)?;
        finite(mse_loss(&net, self.data, &self.rows)?)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>, BoundError> {
        let net = self.template.with_flat(theta)?;
        let (_, g) = mse_gradient(&net, self.data, &self.rows, None)?;
        let g = g.to_flat();
        if g.iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(BoundError::NonFinite)
        }
    }
}

fn finite(v: f64) -> Result<f64, BoundError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(BoundError::NonFinite)
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), BoundError> {
    if expected == got {
        Ok(())
    } else {
        Err(BoundError::LengthMismatch(expected, got))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerIterConfig {
    pub max_iters: usize,
    /// Stop when successive Rayleigh quotients differ by less than this,
    /// relative to the current estimate.
    pub rel_tolerance: f64,
    /// Base finite-difference step; scaled by `1 + |theta|`.
    pub hvp_step: f64,
    /// Seeds the random start vector.
    pub seed: u64,
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tolerance: 1e-6,
            hvp_step: 1e-4,
            seed: 0,
        }
    }
}

impl PowerIterConfig {
    pub fn validate(&self) -> Result<(), BoundError> {
        if self.max_iters == 0 {
            return Err(BoundError::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.rel_tolerance > 0.0 && self.rel_tolerance.is_finite()) {
            return Err(BoundError::InvalidConfig(format!(
                "rel_tolerance must be positive, got {}",
                self.rel_tolerance
            )));
        }
        if !(self.hvp_step > 0.0 && self.hvp_step.is_finite()) {
            return Err(BoundError::InvalidConfig(format!(
                "hvp_step must be positive, got {}",
                self.hvp_step
            )));
        }
        Ok(())
    }
}

/// `(theta_next - theta_prev, |theta_next - theta_prev|^2)`.
pub fn delta_theta(theta_prev: &[f64], theta_next: &[f64]) -> Result<(Vec<f64>, f64), BoundError> {
    check_len(theta_prev.len(), theta_next.len())?;
    let d: Vec<f64> = theta_next
        .iter()
        .zip(theta_prev)
        .map(|(n, p)| n - p)
        .collect();
    let sq = dot(&d, &d);
    Ok((d, sq))
}

/// Central-difference Hessian-vector product `H(theta) v`.
///
/// The difference is taken along the unit vector `v / |v|` with step
/// `hvp_step * (1 + |theta|)` and the result rescaled by `|v|`, so it is
/// exact for quadratics up to rounding.
pub fn hessian_vector_product<O: Objective + ?Sized>(
    loss: &O,
    theta: &[f64],
    v: &[f64],
    cfg: &PowerIterConfig,
) -> Result<Vec<f64>, BoundError> {
    check_len(loss.dim(), theta.len())?;
    check_len(theta.len(), v.len())?;
    let vn = norm(v);
    if vn == 0.0 {
        return Err(BoundError::ZeroDirection);
    }
    if !vn.is_finite() {
        return Err(BoundError::NonFinite);
    }
    let eps = cfg.hvp_step * (1.0 + norm(theta));
    let shifted = |sign: f64| -> Vec<f64> {
        theta
            .iter()
            .zip(v)
            .map(|(t, d)| t + sign * eps * d / vn)
            .collect()
    };
    let gp = loss.gradient(&shifted(1.0))?;
    let gm = loss.gradient(&shifted(-1.0))?;
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(p, m)| (p - m) / (2.0 * eps) * vn)
        .collect())
}

/// Magnitude-dominant Hessian eigenvalue at `theta` by power iteration
/// from a seeded Gaussian start. Returns the estimate and the number of
/// Hessian-vector products used.
pub fn max_eigenvalue<O: Objective + ?Sized>(
    loss: &O,
    theta: &[f64],
    cfg: &PowerIterConfig,
) -> Result<(f64, usize), BoundError> {
    power_iteration(loss, theta, cfg, 0.0)
}

/// Largest (most positive) Hessian eigenvalue at `theta`.
///
/// Equals [`max_eigenvalue`] unless the magnitude-dominant eigenvalue is
/// negative; then a second power iteration on `H - lambda_dominant * I`,
/// whose spectrum is non-negative, recovers the top of the spectrum.
/// The iteration count covers both passes.
pub fn top_eigenvalue<O: Objective + ?Sized>(
    loss: &O,
    theta: &[f64],
    cfg: &PowerIterConfig,
) -> Result<(f64, usize), BoundError> {
    let (dominant, used) = max_eigenvalue(loss, theta, cfg)?;
    if dominant >= 0.0 {
        return Ok((dominant, used));
    }
    match power_iteration(loss, theta, cfg, dominant) {
        Ok((top, more)) => Ok((top, used + more)),
        Err(BoundError::NoConvergence {
            estimate,
            iterations,
        }) => Err(BoundError::NoConvergence {
            estimate,
            iterations: used + iterations,
        }),
        Err(e) => Err(e),
    }
}

/// Power iteration on `H - shift * I`; returns the corresponding
/// eigenvalue of `H`.
fn power_iteration<O: Objective + ?Sized>(
    loss: &O,
    theta: &[f64],
    cfg: &PowerIterConfig,
    shift: f64,
) -> Result<(f64, usize), BoundError> {
    cfg.validate()?;
    check_len(loss.dim(), theta.len())?;
    if theta.is_empty() {
        return Err(BoundError::ZeroDirection);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v: Vec<f64> = (0..theta.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);

    let mut previous: Option<f64> = None;
    let mut estimate = 0.0;
    for iteration in 1..=cfg.max_iters {
        let mut bv = hessian_vector_product(loss, theta, &v, cfg)?;
        if shift != 0.0 {
            bv.iter_mut().zip(&v).for_each(|(b, x)| *b -= shift * x);
        }
        estimate = dot(&v, &bv);
        let bn = norm(&bv);
        if bn == 0.0 {
            // The operator annihilates v: its eigenvalue is exactly zero.
            return Ok((shift, iteration));
        }
        if let Some(prev) = previous {
            if (estimate - prev).abs() <= cfg.rel_tolerance * estimate.abs().max(f64::MIN_POSITIVE)
            {
                return Ok((estimate + shift, iteration));
            }
        }
        previous = Some(estimate);
        v = bv.iter().map(|x| x / bn).collect();
    }
    Err(BoundError::NoConvergence {
        estimate: estimate + shift,
        iterations: cfg.max_iters,
    })
}

/// Diagnostics attached to a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateNote {
    /// The gradient at `theta_prev` exceeds the stationarity threshold, so
    /// the first-order term the bound drops is not negligible.
    AssumptionStressed,
    /// Negative curvature was found; the bound presumes a positive
    /// semi-definite Hessian.
    Indefinite,
    /// Power iteration hit `max_iters`; `lambda_max` is the last estimate.
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConfig {
    pub power: PowerIterConfig,
    /// Absolute tolerance of the `holds` comparison.
    pub slack: f64,
    /// Gradient norm above which a certificate is marked assumption-stressed.
    pub stationarity_threshold: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            power: PowerIterConfig::default(),
            slack: 1e-6,
            stationarity_threshold: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCertificate {
    /// `L(theta_next) - L(theta_prev)`.
    pub loss_delta: f64,
    pub delta_theta_sq: f64,
    pub lambda_max: f64,
    /// `0.5 * lambda_max * delta_theta_sq`.
    pub bound: f64,
    /// `loss_delta <= bound + slack`.
    pub holds: bool,
    pub slack: f64,
    /// Gradient norm at `theta_prev`.
    pub grad_norm: f64,
    /// `loss_delta` minus its first- and second-order Taylor terms.
    pub taylor_residual: f64,
    pub power_iterations: usize,
    pub notes: Vec<CertificateNote>,
}

impl BoundCertificate {
    pub fn has_note(&self, note: CertificateNote) -> bool {
        self.notes.contains(&note)
    }
}

/// Certifies the second-order bound for one step `theta_prev -> theta_next`
/// of `loss`, with curvature measured at `theta_prev`.
pub fn certify_bound<O: Objective + ?Sized>(
    loss: &O,
    theta_prev: &[f64],
    theta_next: &[f64],
    cfg: &BoundConfig,
) -> Result<BoundCertificate, BoundError> {
    if !(cfg.slack >= 0.0) || !(cfg.stationarity_threshold >= 0.0) {
        return Err(BoundError::InvalidConfig(
            "slack and stationarity_threshold must be non-negative".into(),
        ));
    }
    let (d, delta_theta_sq) = delta_theta(theta_prev, theta_next)?;
    check_len(loss.dim(), theta_prev.len())?;
    let loss_delta = loss.value(theta_next)? - loss.value(theta_prev)?;
    let grad = loss.gradient(theta_prev)?;
    let grad_norm = norm(&grad);

    let mut notes = Vec::new();
    let mut not_converged = false;
    let mut settle = |r: Result<(f64, usize), BoundError>| match r {
        Err(BoundError::NoConvergence {
            estimate,
            iterations,
        }) => {
            not_converged = true;
            Ok((estimate, iterations))
        }
        other => other,
    };
    let (dominant, mut power_iterations) = settle(max_eigenvalue(loss, theta_prev, &cfg.power))?;
    let lambda_max = if dominant < 0.0 {
        let (top, more) = settle(power_iteration(loss, theta_prev, &cfg.power, dominant))?;
        power_iterations += more;
        top
    } else {
        dominant
    };
    if not_converged {
        notes.push(CertificateNote::NotConverged);
    }

    let (linear, curvature) = if delta_theta_sq > 0.0 {
        let hd = hessian_vector_product(loss, theta_prev, &d, &cfg.power)?;
        (dot(&grad, &d), dot(&d, &hd))
    } else {
        (0.0, 0.0)
    };
    if dominant < 0.0 || curvature < 0.0 {
        notes.push(CertificateNote::Indefinite);
    }
    if grad_norm > cfg.stationarity_threshold {
        notes.push(CertificateNote::AssumptionStressed);
    }
    notes.sort_by_key(|n| *n as u8);

    let bound = 0.5 * lambda_max * delta_theta_sq;
    Ok(BoundCertificate {
        loss_delta,
        delta_theta_sq,
        lambda_max,
        bound,
        holds: loss_delta <= bound + cfg.slack,
        slack: cfg.slack,
        grad_norm,
        taylor_residual: loss_delta - linear - 0.5 * curvature,
        power_iterations,
        notes,
    })
}

/// One certificate per adjacent checkpoint pair. `build(i)` returns the
/// loss used to certify the step from checkpoint `i` to `i + 1`.
pub fn sweep_checkpoints<O, F>(
    checkpoints: &[Vec<f64>],
    mut build: F,
    cfg: &BoundConfig,
) -> Result<Vec<BoundCertificate>, BoundError>
where
    O: Objective,
    F: FnMut(usize) -> Result<O, BoundError>,
{
    if checkpoints.len() < 2 {
        return Err(BoundError::TooFewCheckpoints(checkpoints.len()));
    }
    checkpoints
        .windows(2)
        .enumerate()
        .map(|(i, pair)| certify_bound(&build(i)?, &pair[0], &pair[1], cfg))
        .collect()
}

/// CSV with columns `iter,loss_delta,delta_theta_sq,lambda_max,bound,holds,grad_norm`;
/// `iter` is the index of the later checkpoint.
pub fn write_certificates_csv<W: Write>(
    certificates: &[BoundCertificate],
    out: W,
) -> Result<(), BoundError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iter",
        "loss_delta",
        "delta_theta_sq",
        "lambda_max",
        "bound",
        "holds",
        "grad_norm",
    ])?;
    for (i, c) in certificates.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            c.loss_delta.to_string(),
            c.delta_theta_sq.to_string(),
            c.lambda_max.to_string(),
            c.bound.to_string(),
            c.holds.to_string(),
            c.grad_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
