//! Central finite-difference checks for the analytic gradients.
//!
//! The loss check differentiates a direct, separately written evaluation of
//! the loss formula rather than the library function, so it also verifies
//! the loss value itself.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{Keypoints2D, NUM_KEYPOINTS};
use crate::keyhead::{backward, forward, EncoderModel, KeyheadError, ModelConfig, OUTPUT_DIM};
use crate::losses::{pose_adaptive_loss, scale_schedule, DecayKind, LossConfig, LossFamily};
use crate::synth::RasterImage;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floors of the relative error. Below the floor differences are
/// effectively compared absolutely. Loss components are measured against the
/// largest component of their configuration's gradient, since a single
/// coordinate can be arbitrarily small when an offset is nearly axis aligned.
/// The network floor sits above the central-difference noise (~1e-10) of an
/// O(1) output, which matters for gradients that vanish identically
/// (attention key biases).
pub const LOSS_REL_FLOOR: f64 = 1e-12;
pub const NETWORK_REL_FLOOR: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    /// Largest deviation of the library loss value from the direct evaluation.
    pub max_value_error: f64,
}

impl GradcheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
            max_value_error: 0.0,
        }
    }

    fn record(&mut self, rel: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        if rel > self.max_rel_error || rel.is_nan() {
            self.max_rel_error = rel;
            self.worst = what();
        }
    }
}

/// Entries `(a, b, c)` of `Σ_t = [[a, b], [b, c]]` written out from the
/// definition, with `Σ = I` for the Gaussian family.
fn reference_sigma_t(gt: &[f64; 8], t: f64, cfg: &LossConfig) -> (f64, f64, f64) {
    let (mut a, mut b, mut c) = (1.0, 0.0, 1.0);
    if cfg.family == LossFamily::PoseAdaptive {
        let mx = (gt[0] + gt[2] + gt[4] + gt[6]) / 4.0;
        let my = (gt[1] + gt[3] + gt[5] + gt[7]) / 4.0;
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for k in 0..4 {
            let (dx, dy) = (gt[2 * k] - mx, gt[2 * k + 1] - my);
            sxx += dx * dx;
            sxy += dx * dy;
            syy += dy * dy;
        }
        (a, b, c) = (sxx / 4.0, sxy / 4.0, syy / 4.0);
    }
    let s = scale_schedule(t, cfg);
    (s * a + cfg.epsilon, s * b, s * c + cfg.epsilon)
}

/// Direct evaluation of the loss expectation minus its constant 1, i.e.
/// `-mean_k exp(-d_k/2) / (2π sqrt|Σ_t|)`, or the plain MSE.
fn reference_loss_shifted(gt: &[f64; 8], pred: &[f64; 8], t: f64, cfg: &LossConfig) -> f64 {
    if cfg.family == LossFamily::Mse {
        return gt
            .iter()
            .zip(pred)
            .map(|(g, p)| (p - g) * (p - g))
            .sum::<f64>()
            / 8.0;
    }
    let (a, b, c) = reference_sigma_t(gt, t, cfg);
    let det = a * c - b * b;
    let mut sum = 0.0;
    for k in 0..4 {
        let (ex, ey) = (gt[2 * k] - pred[2 * k], gt[2 * k + 1] - pred[2 * k + 1]);
        // eᵀ Σ⁻¹ e with the closed-form 2×2 inverse
        let q = (c * ex * ex - 2.0 * b * ex * ey + a * ey * ey) / det;
        sum += (-0.5 * q.sqrt()).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
    }
    -sum / 4.0
}

fn random_keypoints<R: Rng>(rng: &mut R, center: (f64, f64), spread: f64) -> [f64; 8] {
    let mut out = [0.0; 8];
    for k in 0..NUM_KEYPOINTS {
        out[2 * k] = center.0 + rng.random_range(-spread..spread);
        out[2 * k + 1] = center.1 + rng.random_range(-spread..spread);
    }
    out
}

/// Compares the analytic loss gradient with central differences over
/// `n_configs` seeded random configurations, cycling through every loss
/// family and decay kind.
pub fn loss_gradcheck(n_configs: usize, seed: u64) -> GradcheckReport {
    let families = [
        LossFamily::Mse,
        LossFamily::Gaussian,
        LossFamily::PoseAdaptive,
    ];
    let decays = [DecayKind::Fixed, DecayKind::Linear, DecayKind::Exp];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport::new();
    for i in 0..n_configs {
        let cfg = LossConfig {
            family: families[i % 3],
            decay: decays[(i / 3) % 3],
            alpha: rng.random_range(1.0..8.0),
            scale_factor: rng.random_range(1.0..20.0),
            fixed_scale: rng.random_range(0.2..5.0),
            linear_t_max: rng.random_range(50.0..200.0),
            ..Default::default()
        };
        let t = rng.random_range(0.0f64..=100.0).floor();
        let center = (rng.random_range(16.0..48.0), rng.random_range(16.0..48.0));
        let gt = random_keypoints(&mut rng, center, 8.0);
        let mut pred = gt;
        if cfg.family == LossFamily::Mse {
            for v in pred.iter_mut() {
                *v += rng.random_range(-4.0..4.0);
            }
        } else {
            // Mahalanobis length in [0.5, 3]: the region where the loss has
            // gradient, and far enough from d = 0 for the fixed step.
            let (a, b, c) = reference_sigma_t(&gt, t, &cfg);
            let l11 = a.sqrt();
            let l21 = b / l11;
            let l22 = (c - l21 * l21).sqrt();
            for k in 0..NUM_KEYPOINTS {
                let r = rng.random_range(0.5..3.0);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let (ux, uy) = (r * phi.cos(), r * phi.sin());
                pred[2 * k] += l11 * ux;
                pred[2 * k + 1] += l21 * ux + l22 * uy;
            }
        }
        let lib = pose_adaptive_loss(
            &Keypoints2D::from_flat(&gt),
            &Keypoints2D::from_flat(&pred),
            t,
            &cfg,
        )
        .expect("finite inputs");
        let shift = if cfg.family == LossFamily::Mse {
            0.0
        } else {
            1.0
        };
        let value_err = (lib.loss - (shift + reference_loss_shifted(&gt, &pred, t, &cfg))).abs();
        report.max_value_error = report.max_value_error.max(value_err);
        let numeric: Vec<f64> = (0..OUTPUT_DIM)
            .map(|j| {
                let mut plus = pred;
                let mut minus = pred;
                plus[j] += FD_STEP;
                minus[j] -= FD_STEP;
                (reference_loss_shifted(&gt, &plus, t, &cfg)
                    - reference_loss_shifted(&gt, &minus, t, &cfg))
                    / (2.0 * FD_STEP)
            })
            .collect();
        let scale = lib
            .grad
            .iter()
            .chain(&numeric)
            .fold(LOSS_REL_FLOOR, |m, g| m.max(g.abs()));
        for (j, &numeric) in numeric.iter().enumerate() {
            let rel = relative_error(lib.grad[j], numeric, scale);
            report.record(rel, || {
                format!(
                    "config {i} ({:?}/{:?}) coordinate {j}: analytic {:e}, numeric {numeric:e}",
                    cfg.family, cfg.decay, lib.grad[j]
                )
            });
        }
    }
    report
}

/// Model used by the network check: d=16, N=2, h=2, 8×8 input in 4×4 patches (P=4).
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        image_width: 8,
        image_height: 8,
        patch: 4,
        d_model: 16,
        heads: 2,
        layers: 2,
    }
}

/// Perturbs every parameter away from its initial value so that biases and
/// layer-norm parameters carry non-trivial gradients.
pub fn randomized_model(config: ModelConfig, seed: u64) -> Result<EncoderModel, KeyheadError> {
    let mut model = EncoderModel::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    model.for_each_param_mut(|name, p| {
        for v in p.iter_mut() {
            if name.starts_with("cr_proj") && name.ends_with(".b") {
                // keep the gated sum clear of the ReLU kink
                *v = 1.0 + rng.random_range(0.0..0.5);
            } else if name.starts_with("cr_proj") {
                *v = 0.1 * (*v + rng.random_range(-0.3..0.3));
            } else if name.ends_with(".g") {
                *v = rng.random_range(0.5..1.5);
            } else {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    });
    Ok(model)
}

fn random_image(config: &ModelConfig, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RasterImage {
        width: config.image_width,
        height: config.image_height,
        pixels: (0..config.image_width * config.image_height)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    }
}

/// Checks every parameter gradient of a small model against central
/// differences of the scalar `L = Σ c_i·y_i` with random weights `c`.
pub fn network_gradcheck(seed: u64) -> Result<GradcheckReport, KeyheadError> {
    let config = gradcheck_model_config();
    let model = randomized_model(config, seed)?;
    let image = random_image(&config, seed.wrapping_add(2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let weights = Array1::from_shape_fn(OUTPUT_DIM, |_| rng.random_range(-1.0..1.0));
    let objective = |m: &EncoderModel| -> Result<f64, KeyheadError> {
        Ok(forward(&image, m)?.prediction.dot(&weights))
    };

    let trace = forward(&image, &model)?;
    let grads = backward(&trace, &model, weights.as_slice().unwrap())?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    grads.for_each_param(|name, p| analytic.push((name.to_string(), p.to_vec())));

    let mut report = GradcheckReport::new();
    let mut probe = model.clone();
    for (tensor_idx, (name, values)) in analytic.iter().enumerate() {
        for (i, &a) in values.iter().enumerate() {
            let original = nth_param(&model, tensor_idx)[i];
            set_param(&mut probe, tensor_idx, i, original + FD_STEP);
            let up = objective(&probe)?;
            set_param(&mut probe, tensor_idx, i, original - FD_STEP);
            let down = objective(&probe)?;
            set_param(&mut probe, tensor_idx, i, original);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let rel = relative_error(a, numeric, NETWORK_REL_FLOOR);
            report.record(rel, || {
                format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}")
            });
        }
    }
    Ok(report)
}

fn nth_param(model: &EncoderModel, idx: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0;
    model.for_each_param(|_, p| {
        if k == idx {
            out = p.to_vec();
        }
        k += 1;
    });
    out
}

fn set_param(model: &mut EncoderModel, idx: usize, i: usize, value: f64) {
    let mut k = 0;
    model.for_each_param_mut(|_, p| {
        if k == idx {
            p[i] = value;
        }
        k += 1;
    });
}
