//! Constant-velocity Kalman filter over per-frame 6DoF estimates.
//!
//! State: position, velocity, orientation (rotation vector) and angular
//! velocity, all per frame. Orientation is propagated as
//! `R ← exp(ω)·R` and corrected in the tangent space at the prediction, so the
//! filtered rotation never leaves SO(3).

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::Pose6DoF;
use crate::geometry::{so3_exp, so3_log};
use crate::pose3d::PoseLine;

pub type StateVector = SVector<f64, 12>;
pub type StateMatrix = SMatrix<f64, 12, 12>;
type MeasMatrix = SMatrix<f64, 6, 12>;
type MeasCov = SMatrix<f64, 6, 6>;

/// Initial variance of the unobserved velocity blocks.
pub const VELOCITY_PRIOR_VAR: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum TrackingError {
    #[error("non-finite measurement at index {0}")]
    NonFinite(usize),
    #[error("empty pose sequence")]
    Empty,
    #[error("invalid noise parameters: {0}")]
    InvalidNoise(String),
    #[error("innovation covariance is singular")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Acceleration noise variance, m²/frame².
    pub q_pos: f64,
    /// Angular acceleration noise variance, rad²/frame².
    pub q_rot: f64,
    pub r_pos: f64,
    pub r_rot: f64,
    /// When false the measured rotation is passed through unchanged.
    pub filter_rotation: bool,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            q_pos: 1e-4,
            q_rot: 1e-4,
            r_pos: 1e-2,
            r_rot: 1e-2,
            filter_rotation: true,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<(), TrackingError> {
        for (name, v) in [
            ("q_pos", self.q_pos),
            ("q_rot", self.q_rot),
            ("r_pos", self.r_pos),
            ("r_rot", self.r_rot),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrackingError::InvalidNoise(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    /// `[p, v, w, ω]`, with `w = log(R)`.
    pub x: StateVector,
    pub p: StateMatrix,
    pub q: StateMatrix,
    pub rm: MeasCov,
    pub rotation: nalgebra::Matrix3<f64>,
    pub filter_rotation: bool,
    pub initialized: bool,
}

impl KalmanState {
    pub fn position(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(0).into()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(3).into()
    }

    pub fn rotation_vector(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(6).into()
    }

    pub fn angular_velocity(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(9).into()
    }

    pub fn pose(&self) -> Pose6DoF {
        Pose6DoF::new(self.rotation, self.position())
    }
}

fn transition() -> StateMatrix {
    let mut f = StateMatrix::identity();
    for i in 0..3 {
        f[(i, 3 + i)] = 1.0;
        f[(6 + i, 9 + i)] = 1.0;
    }
    f
}

fn measurement_matrix() -> MeasMatrix {
    let mut h = MeasMatrix::zeros();
    for i in 0..3 {
        h[(i, i)] = 1.0;
        h[(3 + i, 6 + i)] = 1.0;
    }
    h
}

/// Discrete white-acceleration noise for one frame step.
fn process_noise(q_pos: f64, q_rot: f64) -> StateMatrix {
    let mut q = StateMatrix::zeros();
    for (base, var) in [(0, q_pos), (6, q_rot)] {
        for i in 0..3 {
            let (a, b) = (base + i, base + 3 + i);
            q[(a, a)] = 0.25 * var;
            q[(a, b)] = 0.5 * var;
            q[(b, a)] = 0.5 * var;
            q[(b, b)] = var;
        }
    }
    q
}

/// Symmetrize and clamp negative eigenvalues to zero.
fn project_psd(p: &StateMatrix) -> StateMatrix {
    let sym = (p + p.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = eig.eigenvectors;
    let out = v * StateMatrix::from_diagonal(&clamped) * v.transpose();
    (out + out.transpose()) * 0.5
}

fn check_pose(pose: &Pose6DoF, index: usize) -> Result<(), TrackingError> {
    if pose
        .rotation
        .iter()
        .chain(pose.translation.iter())
        .all(|v| v.is_finite())
    {
        Ok(())
    } else {
        Err(TrackingError::NonFinite(index))
    }
}

pub fn kf_init(first: &Pose6DoF, noise: &NoiseParams) -> KalmanState {
    let mut x = StateVector::zeros();
    x.fixed_rows_mut::<3>(0).copy_from(&first.translation);
    x.fixed_rows_mut::<3>(6)
        .copy_from(&so3_log(&first.rotation));
    let mut diag = StateVector::zeros();
    for i in 0..3 {
        diag[i] = noise.r_pos;
        diag[3 + i] = VELOCITY_PRIOR_VAR;
        diag[6 + i] = noise.r_rot;
        diag[9 + i] = VELOCITY_PRIOR_VAR;
    }
    let mut rm = MeasCov::zeros();
    for i in 0..3 {
        rm[(i, i)] = noise.r_pos;
        rm[(3 + i, 3 + i)] = noise.r_rot;
    }
    KalmanState {
        x,
        p: StateMatrix::from_diagonal(&diag),
        q: process_noise(noise.q_pos, noise.q_rot),
        rm,
        rotation: first.rotation,
        filter_rotation: noise.filter_rotation,
        initialized: true,
    }
}

/// One predict/update cycle; returns the new state and its pose.
pub fn kf_step(
    state: &KalmanState,
    measurement: &Pose6DoF,
) -> Result<(KalmanState, Pose6DoF), TrackingError> {
    check_pose(measurement, 0)?;
    let f = transition();
    let h = measurement_matrix();

    let mut x = f * state.x;
    let omega = state.angular_velocity();
    let r_pred = so3_exp(&omega) * state.rotation;
    let p_pred = f * state.p * f.transpose() + state.q;

    let mut y = SVector::<f64, 6>::zeros();
    y.fixed_rows_mut::<3>(0)
        .copy_from(&(measurement.translation - x.fixed_rows::<3>(0)));
    y.fixed_rows_mut::<3>(3)
        .copy_from(&so3_log(&(measurement.rotation * r_pred.transpose())));

    let s = h * p_pred * h.transpose() + state.rm;
    let s_inv = s.try_inverse().ok_or(TrackingError::Singular)?;
    let k = p_pred * h.transpose() * s_inv;
    let dx = k * y;

    x += dx;
    let delta: Vector3<f64> = dx.fixed_rows::<3>(6).into();
    let mut rotation = so3_exp(&delta) * r_pred;
    if !state.filter_rotation {
        rotation = measurement.rotation;
    }
    x.fixed_rows_mut::<3>(6).copy_from(&so3_log(&rotation));

    let ikh = StateMatrix::identity() - k * h;
    let p = ikh * p_pred * ikh.transpose() + k * state.rm * k.transpose();

    let next = KalmanState {
        x,
        p: project_psd(&p),
        q: state.q,
        rm: state.rm,
        rotation: crate::geometry::nearest_rotation(&rotation),
        filter_rotation: state.filter_rotation,
        initialized: true,
    };
    if !next.x.iter().all(|v| v.is_finite()) {
        return Err(TrackingError::Singular);
    }
    let pose = next.pose();
    Ok((next, pose))
}

pub fn smooth_sequence(
    estimates: &[Pose6DoF],
    noise: &NoiseParams,
) -> Result<Vec<Pose6DoF>, TrackingError> {
    noise.validate()?;
    let first = estimates.first().ok_or(TrackingError::Empty)?;
    check_pose(first, 0)?;
    let mut state = kf_init(first, noise);
    let mut out = Vec::with_capacity(estimates.len());
    out.push(*first);
    for (i, m) in estimates.iter().enumerate().skip(1) {
        check_pose(m, i)?;
        let (next, pose) = kf_step(&state, m).map_err(|e| match e {
            TrackingError::NonFinite(_) => TrackingError::NonFinite(i),
            other => other,
        })?;
        out.push(pose);
        state = next;
    }
    Ok(out)
}

/// Smooths pose lines sequence by sequence, keeping their order and
/// diagnostics. Lines of one sequence must be in frame order.
pub fn smooth_lines(
    lines: &[PoseLine],
    noise: &NoiseParams,
) -> Result<Vec<PoseLine>, TrackingError> {
    let mut out = lines.to_vec();
    let mut seen: Vec<&str> = Vec::new();
    for line in lines {
        if seen.contains(&line.sequence_id.as_str()) {
            continue;
        }
        seen.push(&line.sequence_id);
        let idx: Vec<usize> = (0..lines.len())
            .filter(|&i| lines[i].sequence_id == line.sequence_id)
            .collect();
        let poses: Vec<Pose6DoF> = idx.iter().map(|&i| lines[i].pose()).collect();
        let smoothed = smooth_sequence(&poses, noise)?;
        for (&i, p) in idx.iter().zip(&smoothed) {
            let l = &lines[i];
            out[i] = PoseLine::new(&l.sequence_id, l.frame_id, p, l.reproj_rmse, l.converged);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{geodesic_angle, rot_x, rot_z};
    use nalgebra::Matrix3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn assert_psd(p: &StateMatrix) {
        assert!((p - p.transpose()).norm() <= 1e-12 * (1.0 + p.norm()));
        let eig = (*p).symmetric_eigen();
        let min = eig.eigenvalues.min();
        assert!(min >= -1e-12 * (1.0 + p.norm()), "{min}");
    }

    #[test]
    fn init_reads_back_measurement() {
        let pose = Pose6DoF::new(rot_x(0.4) * rot_z(3.0), Vector3::new(1.0, 2.0, 3.0));
        let s = kf_init(&pose, &NoiseParams::default());
        assert_eq!(s.position(), pose.translation);
        assert!(s.rotation_vector().norm() <= std::f64::consts::PI);
        assert_eq!(s.velocity(), Vector3::zeros());
        assert_psd(&s.p);
        assert!(s.initialized);
    }

    #[test]
    fn constant_pose_is_a_fixed_point() {
        let pose = Pose6DoF::new(rot_x(0.2), Vector3::new(0.3, -0.1, 4.0));
        let noise = NoiseParams {
            q_pos: 0.0,
            q_rot: 0.0,
            ..NoiseParams::default()
        };
        let out = smooth_sequence(&vec![pose; 51], &noise).unwrap();
        let last = out.last().unwrap();
        assert!((last.translation - pose.translation).norm() <= 1e-6);
        assert!(geodesic_angle(&last.rotation, &pose.rotation) <= 1e-9);
    }

    #[test]
    fn zero_measurement_noise_tracks_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 0.3).unwrap();
        let poses: Vec<Pose6DoF> = (0..30)
            .map(|_| {
                let w = Vector3::from_fn(|_, _| normal.sample(&mut rng));
                let t = Vector3::from_fn(|_, _| normal.sample(&mut rng));
                Pose6DoF::new(so3_exp(&w), t)
            })
            .collect();
        let noise = NoiseParams {
            r_pos: 0.0,
            r_rot: 0.0,
            ..NoiseParams::default()
        };
        let out = smooth_sequence(&poses, &noise).unwrap();
        for (a, b) in out.iter().zip(&poses) {
            assert!((a.translation - b.translation).norm() <= 1e-9);
            assert!(geodesic_angle(&a.rotation, &b.rotation) <= 1e-9);
        }
    }

    #[test]
    fn smoothing_reduces_position_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 0.05).unwrap();
        let v = Vector3::new(0.01, -0.005, 0.02);
        let truth: Vec<Vector3<f64>> = (0..200)
            .map(|i| Vector3::new(0.0, 0.0, 5.0) + v * i as f64)
            .collect();
        let meas: Vec<Pose6DoF> = truth
            .iter()
            .map(|t| {
                let n = Vector3::from_fn(|_, _| normal.sample(&mut rng));
                Pose6DoF::identity_at(t + n)
            })
            .collect();
        let out = smooth_sequence(&meas, &NoiseParams::default()).unwrap();
        let rmse = |poses: &[Pose6DoF]| {
            let s: f64 = poses
                .iter()
                .zip(&truth)
                .map(|(p, t)| (p.translation - t).norm_squared())
                .sum();
            (s / truth.len() as f64).sqrt()
        };
        assert!(
            rmse(&out) < rmse(&meas),
            "{} vs {}",
            rmse(&out),
            rmse(&meas)
        );
    }

    #[test]
    fn single_element_passes_through() {
        let pose = Pose6DoF::new(rot_z(1.0), Vector3::new(0.0, 1.0, 2.0));
        assert_eq!(
            smooth_sequence(&[pose], &NoiseParams::default()).unwrap(),
            vec![pose]
        );
        assert_eq!(
            smooth_sequence(&[], &NoiseParams::default()),
            Err(TrackingError::Empty)
        );
    }

    #[test]
    fn identity_rotations_stay_identity() {
        let poses: Vec<Pose6DoF> = (0..40)
            .map(|i| Pose6DoF::identity_at(Vector3::new(0.01 * i as f64, 0.0, 3.0)))
            .collect();
        for p in smooth_sequence(&poses, &NoiseParams::default()).unwrap() {
            assert!((p.rotation - Matrix3::identity()).norm() <= 1e-12);
        }
    }

    #[test]
    fn noisy_rotations_stay_on_the_manifold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 0.2).unwrap();
        let mut state: Option<KalmanState> = None;
        for i in 0..300 {
            // spin through ±π so the log map wraps
            let base = rot_z(0.05 * i as f64);
            let w = Vector3::from_fn(|_, _| normal.sample(&mut rng));
            let m = Pose6DoF::new(so3_exp(&w) * base, Vector3::new(0.0, 0.0, 5.0));
            let (next, out) = match &state {
                None => {
                    let s = kf_init(&m, &NoiseParams::default());
                    let p = s.pose();
                    (s, p)
                }
                Some(s) => kf_step(s, &m).unwrap(),
            };
            assert!(out.orthonormality_error() <= 1e-9);
            assert!((out.rotation.determinant() - 1.0).abs() <= 1e-9);
            assert_psd(&next.p);
            state = Some(next);
        }
    }

    #[test]
    fn rotation_filter_can_be_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let poses: Vec<Pose6DoF> = (0..20)
            .map(|_| {
                let w = Vector3::from_fn(|_, _| normal.sample(&mut rng));
                Pose6DoF::new(so3_exp(&w), Vector3::new(0.0, 0.0, 5.0))
            })
            .collect();
        let noise = NoiseParams {
            filter_rotation: false,
            ..NoiseParams::default()
        };
        for (a, b) in smooth_sequence(&poses, &noise).unwrap().iter().zip(&poses) {
            assert!(geodesic_angle(&a.rotation, &b.rotation) <= 1e-12);
        }
    }

    #[test]
    fn lines_are_smoothed_per_sequence() {
        let mk = |s: &str, f: u64, x: f64| {
            PoseLine::new(
                s,
                f,
                &Pose6DoF::identity_at(Vector3::new(x, 0.0, 5.0)),
                0.5,
                true,
            )
        };
        let lines = vec![
            mk("a", 0, 0.0),
            mk("b", 0, 10.0),
            mk("a", 1, 0.2),
            mk("b", 1, 10.0),
        ];
        let out = smooth_lines(&lines, &NoiseParams::default()).unwrap();
        assert_eq!(out[1].t, lines[1].t);
        assert_eq!(out[3].t[0], 10.0);
        assert!(out[2].t[0] > 0.0 && out[2].t[0] < 0.2);
        assert_eq!(out[2].sequence_id, "a");
        assert_eq!(out[2].reproj_rmse, 0.5);
    }

    #[test]
    fn non_finite_measurement_is_rejected() {
        let good = Pose6DoF::identity_at(Vector3::new(0.0, 0.0, 1.0));
        let bad = Pose6DoF::identity_at(Vector3::new(f64::NAN, 0.0, 1.0));
        assert_eq!(
            smooth_sequence(&[good, good, bad], &NoiseParams::default()),
            Err(TrackingError::NonFinite(2))
        );
    }
}
