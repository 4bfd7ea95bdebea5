//! Synthetic sequence generation: 6DoF trajectories, pinhole projection,
//! toy rasterization and observation noise.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::datamodel::{
    CameraIntrinsics, DatasetMeta, FrameRecord, Keypoints2D, ObjectModel3D, Pose6DoF,
    SequenceDataset, NUM_KEYPOINTS,
};
use crate::geometry::{rot_x, rot_y, rot_z};

/// Minimum camera-frame depth accepted by the projection.
pub const MIN_DEPTH: f64 = 1e-9;

/// Intensity of each propeller disk, by keypoint index.
pub const DISK_LEVELS: [f64; NUM_KEYPOINTS] = [0.4, 0.6, 0.8, 1.0];
const ARM_LEVEL: f64 = 0.2;
const SUPERSAMPLE: usize = 4;
const MAX_ATTEMPTS: usize = 200;
/// Linear trajectories are quantized to this grid so that `t0 + k·v` is exact.
const PATH_QUANTUM: f64 = 1.0 / (1u64 << 30) as f64;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid trajectory config: {0}")]
    InvalidConfig(String),
    #[error("infeasible trajectory: {0}")]
    Infeasible(String),
    #[error("point {index} at or behind the camera plane (z = {depth})")]
    BehindCamera { index: usize, depth: f64 },
    #[error("raster size {width}x{height} not divisible by patch {patch}")]
    PatchMismatch {
        width: u32,
        height: u32,
        patch: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryConfig {
    pub n_frames: usize,
    pub translation: bool,
    pub rotation: bool,
    pub nonlinear: bool,
    /// Allowed camera-frame depth of every keypoint, meters.
    pub depth_range: (f64, f64),
    /// Upper bound on the per-frame geodesic rotation step, degrees.
    pub angular_rate_max: f64,
    pub seed: u64,
    pub sigma_px: f64,
    pub sequence_id: String,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            n_frames: 100,
            translation: true,
            rotation: false,
            nonlinear: false,
            depth_range: (3.0, 8.0),
            angular_rate_max: 2.0,
            seed: 0,
            sigma_px: 0.0,
            sequence_id: "seq".to_string(),
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.depth_range;
        if self.n_frames == 0 {
            return Err(SynthError::InvalidConfig("n_frames must be >= 1".into()));
        }
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(SynthError::InvalidConfig(
                "depth range must satisfy 0 < min < max".into(),
            ));
        }
        if !(self.sigma_px >= 0.0 && self.sigma_px.is_finite()) {
            return Err(SynthError::InvalidConfig("sigma_px must be >= 0".into()));
        }
        if !(self.angular_rate_max >= 0.0 && self.angular_rate_max.is_finite()) {
            return Err(SynthError::InvalidConfig(
                "angular_rate_max must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            seed: self.seed,
            sigma_px: self.sigma_px,
            translation: self.translation,
            rotation: self.rotation,
            nonlinear: self.nonlinear,
        }
    }
}

/// Grayscale image, row-major, intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl RasterImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    fn put_max(&mut self, x: usize, y: usize, v: f64) {
        let p = &mut self.pixels[y * self.width + x];
        if v > *p {
            *p = v;
        }
    }
}

pub fn project_point(p: &Vector3<f64>, intr: &CameraIntrinsics) -> Option<Vector2<f64>> {
    if p.z <= MIN_DEPTH {
        return None;
    }
    Some(Vector2::new(
        intr.fx * p.x / p.z + intr.cx,
        intr.fy * p.y / p.z + intr.cy,
    ))
}

/// Pinhole projection of the four model points through `pose`.
pub fn project_keypoints(
    model: &ObjectModel3D,
    pose: &Pose6DoF,
    intr: &CameraIntrinsics,
) -> Result<Keypoints2D, SynthError> {
    let mut points = [Vector2::zeros(); NUM_KEYPOINTS];
    for (k, out) in points.iter_mut().enumerate() {
        let pc = pose.transform(&model.points[k]);
        *out = project_point(&pc, intr).ok_or(SynthError::BehindCamera {
            index: k,
            depth: pc.z,
        })?;
    }
    Ok(Keypoints2D::new(points))
}

fn quantize(v: Vector3<f64>) -> Vector3<f64> {
    v.map(|c| (c / PATH_QUANTUM).round() * PATH_QUANTUM)
}

fn pose_fits(
    model: &ObjectModel3D,
    pose: &Pose6DoF,
    intr: &CameraIntrinsics,
    depth_range: (f64, f64),
) -> bool {
    let margin = 0.02 * intr.width.min(intr.height) as f64;
    model.points.iter().all(|p| {
        let pc = pose.transform(p);
        if pc.z <= depth_range.0 || pc.z >= depth_range.1 {
            return false;
        }
        match project_point(&pc, intr) {
            Some(uv) => {
                uv.x >= margin
                    && uv.x <= intr.width as f64 - margin
                    && uv.y >= margin
                    && uv.y <= intr.height as f64 - margin
            }
            None => false,
        }
    })
}

/// Random position whose projection lands well inside the image at a depth
/// leaving room for the model radius.
fn sample_position<R: Rng>(
    rng: &mut R,
    radius: f64,
    intr: &CameraIntrinsics,
    depth_range: (f64, f64),
) -> Vector3<f64> {
    let (lo, hi) = (depth_range.0 + radius, depth_range.1 - radius);
    let z = rng.random_range(lo..hi.max(lo + f64::EPSILON));
    let u = rng.random_range(0.25..0.75) * intr.width as f64;
    let v = rng.random_range(0.25..0.75) * intr.height as f64;
    Vector3::new((u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z)
}

/// Base orientation: body normal tilted 20°-50° away from the optical axis
/// toward the camera, random yaw.
fn sample_view<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let tilt = rng.random_range(20.0f64..50.0).to_radians();
    let tilt_dir = rng.random_range(0.0..std::f64::consts::TAU);
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    // Flip so the body +z axis points toward the camera (-z camera direction).
    rot_z(tilt_dir) * rot_x(tilt) * rot_x(std::f64::consts::PI) * rot_z(yaw)
}

struct Wobble {
    amplitude: f64,
    freq: f64,
    phase: f64,
}

impl Wobble {
    fn at(&self, k: f64) -> f64 {
        self.amplitude * (self.freq * k + self.phase).sin()
    }
}

fn try_trajectory<R: Rng>(
    rng: &mut R,
    cfg: &TrajectoryConfig,
    model: &ObjectModel3D,
    intr: &CameraIntrinsics,
) -> Vec<Pose6DoF> {
    let n = cfg.n_frames;
    let radius = model.points.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let view = sample_view(rng);
    let start = quantize(sample_position(rng, radius, intr, cfg.depth_range));

    let translations: Vec<Vector3<f64>> = if !cfg.translation {
        vec![start; n]
    } else if !cfg.nonlinear {
        let end = quantize(sample_position(rng, radius, intr, cfg.depth_range));
        let step = quantize((end - start) / (n.max(2) - 1) as f64);
        (0..n).map(|k| start + step * k as f64).collect()
    } else {
        let center = sample_position(rng, radius, intr, cfg.depth_range);
        // Two superposed sinusoids per axis, amplitudes relative to the frustum.
        let lateral = 0.18 * center.z * intr.width as f64 / intr.fx;
        let depth_amp = 0.2 * (cfg.depth_range.1 - cfg.depth_range.0);
        let mut terms = Vec::with_capacity(6);
        for axis in 0..3 {
            let amp = if axis == 2 { depth_amp } else { lateral };
            for j in 0..2 {
                let cycles = rng.random_range(0.5..1.5) * (j + 1) as f64;
                terms.push((
                    axis,
                    Wobble {
                        amplitude: amp * rng.random_range(0.3..1.0) / (j + 1) as f64,
                        freq: std::f64::consts::TAU * cycles / n as f64,
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                    },
                ));
            }
        }
        (0..n)
            .map(|k| {
                let mut t = center;
                for (axis, w) in &terms {
                    t[*axis] += w.at(k as f64);
                }
                t
            })
            .collect()
    };

    let rotations: Vec<Matrix3<f64>> = if !cfg.rotation {
        vec![view; n]
    } else {
        // Yaw drift plus bounded roll/pitch wobble. Geodesic steps are bounded
        // by the sum of the per-factor angle changes.
        let rate = cfg.angular_rate_max.to_radians();
        let yaw_rate = 0.6 * rate * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let yaw0 = rng.random_range(0.0..std::f64::consts::TAU);
        let wobble = |rng: &mut R| {
            let amplitude = rng.random_range(5.0f64..15.0).to_radians();
            // |d/dk (A sin(ωk + φ))| ≤ Aω ≤ 0.2·rate
            let freq = (0.19 * rate / amplitude).min(std::f64::consts::TAU * 2.0 / n as f64);
            Wobble {
                amplitude,
                freq,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        };
        let roll = wobble(rng);
        let pitch = wobble(rng);
        (0..n)
            .map(|k| {
                let k = k as f64;
                view * rot_x(roll.at(k)) * rot_y(pitch.at(k)) * rot_z(yaw0 + yaw_rate * k)
            })
            .collect()
    };

    translations
        .into_iter()
        .zip(rotations)
        .map(|(t, r)| Pose6DoF::new(r, t))
        .collect()
}

/// Samples `n_frames` poses following the configured motion flags. Every pose
/// keeps the whole model inside the depth range and the image.
pub fn sample_trajectory(
    cfg: &TrajectoryConfig,
    model: &ObjectModel3D,
    intr: &CameraIntrinsics,
) -> Result<Vec<Pose6DoF>, SynthError> {
    cfg.validate()?;
    let radius = model.points.iter().map(|p| p.norm()).fold(0.0, f64::max);
    if cfg.depth_range.1 - cfg.depth_range.0 <= 2.0 * radius {
        return Err(SynthError::Infeasible(format!(
            "depth range {:?} cannot hold a model of radius {radius}",
            cfg.depth_range
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..MAX_ATTEMPTS {
        let poses = try_trajectory(&mut rng, cfg, model, intr);
        if poses
            .iter()
            .all(|p| pose_fits(model, p, intr, cfg.depth_range))
        {
            return Ok(poses);
        }
    }
    Err(SynthError::Infeasible(format!(
        "no trajectory inside the frustum after {MAX_ATTEMPTS} attempts"
    )))
}

/// Adds i.i.d. N(0, σ²) noise to every coordinate.
pub fn add_noise<R: Rng>(kp: &Keypoints2D, sigma_px: f64, rng: &mut R) -> Keypoints2D {
    if sigma_px == 0.0 {
        return *kp;
    }
    let normal = Normal::new(0.0, sigma_px).expect("sigma_px must be finite and >= 0");
    Keypoints2D::new(
        kp.points
            .map(|p| Vector2::new(p.x + normal.sample(rng), p.y + normal.sample(rng))),
    )
}

pub fn generate_dataset(
    cfg: &TrajectoryConfig,
    model: &ObjectModel3D,
    intr: &CameraIntrinsics,
) -> Result<SequenceDataset, SynthError> {
    let poses = sample_trajectory(cfg, model, intr)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut records = Vec::with_capacity(poses.len());
    for (k, pose) in poses.into_iter().enumerate() {
        let kp = project_keypoints(model, &pose, intr)?;
        records.push(FrameRecord {
            frame_id: k as u64,
            sequence_id: cfg.sequence_id.clone(),
            intrinsics: *intr,
            model: *model,
            kp2d_gt: kp,
            kp2d_obs: add_noise(&kp, cfg.sigma_px, &mut noise_rng),
            pose,
        });
    }
    Ok(SequenceDataset {
        meta: cfg.meta(),
        records,
    })
}

/// Three sequences mirroring the evaluation taxonomy: linear motion without
/// rotation, nonlinear motion without rotation, nonlinear motion with rotation.
/// Seeds are `base.seed + i`; all other settings come from `base`.
pub fn motion_fixture_configs(base: &TrajectoryConfig) -> Vec<TrajectoryConfig> {
    [
        ("linear", false, false),
        ("nonlinear", true, false),
        ("nonlinear_rotation", true, true),
    ]
    .iter()
    .enumerate()
    .map(|(i, &(name, nonlinear, rotation))| TrajectoryConfig {
        translation: true,
        nonlinear,
        rotation,
        seed: base.seed.wrapping_add(i as u64),
        sequence_id: name.to_string(),
        ..base.clone()
    })
    .collect()
}

/// Generates and concatenates several sequences.
pub fn generate_sequences(
    configs: &[TrajectoryConfig],
    model: &ObjectModel3D,
    intr: &CameraIntrinsics,
) -> Result<SequenceDataset, SynthError> {
    let parts = configs
        .iter()
        .map(|c| generate_dataset(c, model, intr))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SequenceDataset::concat(&parts))
}

/// Result of [`render_frame`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub image: RasterImage,
    /// True when at least one keypoint fell outside the image.
    pub clipped: bool,
}

fn inside(p: &Vector2<f64>, w: usize, h: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64
}

fn segment_distance(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 == 0.0 {
        0.0
    } else {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    };
    (p - (a + ab * s)).norm()
}

/// Disk radius used for a keypoint set: a quarter of the mean centroid distance.
pub fn disk_radius(kp: &Keypoints2D) -> f64 {
    let c = kp.points.iter().sum::<Vector2<f64>>() / NUM_KEYPOINTS as f64;
    let mean = kp.points.iter().map(|p| (p - c).norm()).sum::<f64>() / NUM_KEYPOINTS as f64;
    (0.25 * mean).max(1.0)
}

/// Rasterizes the toy drone image: two arm segments between opposite
/// propellers and one anti-aliased disk per propeller with an index-specific
/// intensity. Keypoints are in the pixel frame of `intr`.
pub fn render_frame(
    kp: &Keypoints2D,
    intr: &CameraIntrinsics,
    patch: usize,
) -> Result<RenderedFrame, SynthError> {
    let (w, h) = (intr.width as usize, intr.height as usize);
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(SynthError::PatchMismatch {
            width: intr.width,
            height: intr.height,
            patch,
        });
    }
    let mut image = RasterImage::zeros(w, h);
    let in_frame = kp.points.iter().filter(|p| inside(p, w, h)).count();
    let clipped = in_frame < NUM_KEYPOINTS;
    if in_frame == 0 || !kp.is_finite() {
        return Ok(RenderedFrame {
            image,
            clipped: true,
        });
    }
    let radius = disk_radius(kp);
    let sub = SUPERSAMPLE as f64;
    let pts = &kp.points;

    let clamp_range = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
        let a = lo.floor().max(0.0) as usize;
        let b = (hi.ceil().max(0.0) as usize).min(n);
        (a.min(n), b)
    };

    for (a, b) in [(0usize, 2usize), (1, 3)] {
        let (pa, pb) = (pts[a], pts[b]);
        let half = 0.5;
        let (x0, x1) = clamp_range(pa.x.min(pb.x) - 1.0, pa.x.max(pb.x) + 1.0, w);
        let (y0, y1) = clamp_range(pa.y.min(pb.y) - 1.0, pa.y.max(pb.y) + 1.0, h);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let p = Vector2::new(
                            x as f64 + (sx as f64 + 0.5) / sub,
                            y as f64 + (sy as f64 + 0.5) / sub,
                        );
                        if segment_distance(p, pa, pb) <= half {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    image.put_max(x, y, ARM_LEVEL * hits as f64 / (sub * sub));
                }
            }
        }
    }

    for (k, c) in pts.iter().enumerate() {
        let (x0, x1) = clamp_range(c.x - radius, c.x + radius, w);
        let (y0, y1) = clamp_range(c.y - radius, c.y + radius, h);
        let r2 = radius * radius;
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let dx = x as f64 + (sx as f64 + 0.5) / sub - c.x;
                        let dy = y as f64 + (sy as f64 + 0.5) / sub - c.y;
                        if dx * dx + dy * dy <= r2 {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    image.put_max(x, y, DISK_LEVELS[k] * hits as f64 / (sub * sub));
                }
            }
        }
    }
    Ok(RenderedFrame { image, clipped })
}
