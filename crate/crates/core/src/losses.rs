//! Keypoint regression losses.
//!
//! The pose-adaptive loss measures each keypoint error with a Mahalanobis
//! metric built from the covariance of the frame's ground-truth keypoints.
//! The covariance is scaled by an epoch-dependent schedule `S(t)` so the loss
//! starts lenient and tightens as training proceeds:
//!
//! ```text
//! Σ_t = S(t)·Σ + εI,      S(t) = D·exp(-0.01·α·t)
//! d_t = sqrt(eᵀ Σ_t⁻¹ e)
//! L   = mean_k [ 1 - exp(-d_t/2) / (2π |Σ_t|^½) ]
//! ```
//!
//! The exponent uses the non-squared distance. `d_t = 0` is a kink of the
//! square root; the gradient there is taken as zero.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Keypoints2D, NUM_KEYPOINTS};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("non-finite input to loss")]
    NonFinite,
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    Mse,
    Gaussian,
    PoseAdaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    Fixed,
    Linear,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub family: LossFamily,
    pub decay: DecayKind,
    pub alpha: f64,
    #[serde(rename = "D")]
    pub scale_factor: f64,
    pub epsilon: f64,
    pub fixed_scale: f64,
    /// Epoch at which the linear schedule reaches its end value.
    pub linear_t_max: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            family: LossFamily::PoseAdaptive,
            decay: DecayKind::Exp,
            alpha: 5.0,
            scale_factor: 10.0,
            epsilon: 1e-6,
            fixed_scale: 1.0,
            linear_t_max: 100.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.scale_factor > 0.0) {
            return Err(LossError::InvalidConfig("D must be > 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(LossError::InvalidConfig("epsilon must be > 0".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(LossError::InvalidConfig("alpha must be >= 0".into()));
        }
        if self.decay == DecayKind::Fixed && !(self.fixed_scale > 0.0) {
            return Err(LossError::InvalidConfig("fixed_scale must be > 0".into()));
        }
        if self.decay == DecayKind::Linear && !(self.linear_t_max > 0.0) {
            return Err(LossError::InvalidConfig("linear_t_max must be > 0".into()));
        }
        Ok(())
    }

    /// `(start, end)` values of the linear schedule; they coincide with the
    /// exponential schedule at `t = 0` and `t = linear_t_max`.
    pub fn linear_endpoints(&self) -> (f64, f64) {
        (
            self.scale_factor,
            self.scale_factor * (-0.01 * self.alpha * self.linear_t_max).exp(),
        )
    }
}

/// `S(t)` for the configured decay.
pub fn scale_schedule(t: f64, cfg: &LossConfig) -> f64 {
    match cfg.decay {
        DecayKind::Exp => cfg.scale_factor * (-0.01 * cfg.alpha * t).exp(),
        DecayKind::Fixed => cfg.fixed_scale,
        DecayKind::Linear => {
            let (start, end) = cfg.linear_endpoints();
            let s = (t / cfg.linear_t_max).clamp(0.0, 1.0);
            start + (end - start) * s
        }
    }
}

/// Keypoint spread of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceMatrix {
    pub sigma: Matrix2<f64>,
    pub mean: Vector2<f64>,
}

/// Population covariance (1/K normalization) of the four keypoints.
pub fn keypoint_covariance(gt: &Keypoints2D) -> CovarianceMatrix {
    let k = NUM_KEYPOINTS as f64;
    let mean = gt.points.iter().sum::<Vector2<f64>>() / k;
    let sigma = gt
        .points
        .iter()
        .map(|p| {
            let d = p - mean;
            d * d.transpose()
        })
        .sum::<Matrix2<f64>>()
        / k;
    CovarianceMatrix { sigma, mean }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledCovariance {
    pub matrix: Matrix2<f64>,
    pub inverse: Matrix2<f64>,
    pub determinant: f64,
}

impl ScaledCovariance {
    fn from_matrix(m: Matrix2<f64>) -> Self {
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        let inverse = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
        Self {
            matrix: m,
            inverse,
            determinant: det,
        }
    }
}

/// `Σ_t = S(t)·Σ + εI` together with its inverse and determinant.
pub fn scaled_covariance(sigma: &Matrix2<f64>, t: f64, cfg: &LossConfig) -> ScaledCovariance {
    let m = sigma * scale_schedule(t, cfg) + Matrix2::identity() * cfg.epsilon;
    ScaledCovariance::from_matrix(m)
}

pub fn mahalanobis_t(gt: &Vector2<f64>, pred: &Vector2<f64>, cov: &ScaledCovariance) -> f64 {
    let e = gt - pred;
    (e.dot(&(cov.inverse * e))).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// ∂loss/∂pred, flattened `[x1, y1, ..., x4, y4]`.
    pub grad: [f64; 2 * NUM_KEYPOINTS],
}

/// Loss of one frame at epoch `t` with its analytic gradient.
pub fn pose_adaptive_loss(
    gt: &Keypoints2D,
    pred: &Keypoints2D,
    t: f64,
    cfg: &LossConfig,
) -> Result<LossValue, LossError> {
    if !gt.is_finite() || !pred.is_finite() || !t.is_finite() {
        return Err(LossError::NonFinite);
    }
    let k = NUM_KEYPOINTS as f64;
    let mut grad = [0.0; 2 * NUM_KEYPOINTS];
    if cfg.family == LossFamily::Mse {
        let n = grad.len() as f64;
        let (g, p) = (gt.to_flat(), pred.to_flat());
        let mut loss = 0.0;
        for i in 0..grad.len() {
            let r = p[i] - g[i];
            loss += r * r / n;
            grad[i] = 2.0 * r / n;
        }
        return Ok(LossValue { loss, grad });
    }

    let sigma = match cfg.family {
        LossFamily::PoseAdaptive => keypoint_covariance(gt).sigma,
        _ => Matrix2::identity(),
    };
    let cov = scaled_covariance(&sigma, t, cfg);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * cov.determinant.sqrt());
    let mut loss = 0.0;
    for (idx, (g, p)) in gt.points.iter().zip(pred.points.iter()).enumerate() {
        let d = mahalanobis_t(g, p, &cov);
        let similarity = norm * (-0.5 * d).exp();
        loss += (1.0 - similarity) / k;
        if d > 0.0 {
            // ∂d/∂pred = -Σ_t⁻¹ e / d
            let e = g - p;
            let dd = cov.inverse * e / d;
            let coef = similarity * 0.5 / k;
            grad[2 * idx] = -coef * dd.x;
            grad[2 * idx + 1] = -coef * dd.y;
        }
    }
    if !loss.is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok(LossValue { loss, grad })
}
