//! 6DoF recovery from the four detected keypoints.
//!
//! `solve_pnp` finds the pose minimizing the pixel reprojection error of the
//! planar model. It is initialized from a homography between the model plane
//! and the normalized image plane and polished with Levenberg–Marquardt on
//! `R ← exp(ω)·R, t ← t + δt`.
//!
//! `estimate_pose` then rebuilds camera-frame keypoints and forms a rotation
//! from two centroid-relative keypoint vectors and their cross product. That
//! keypoint frame differs from the body frame by a constant rotation `B`
//! (the same construction applied to the model), which is removed so the
//! result is the body orientation.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{
    load_jsonl, save_jsonl, CameraIntrinsics, DataError, FrameRecord, Keypoints2D, ObjectModel3D,
    Pose6DoF, NUM_KEYPOINTS,
};
use crate::geometry::{nearest_rotation, so3_exp};

pub const LM_INITIAL_LAMBDA: f64 = 1e-3;
pub const LM_MAX_ITERATIONS: usize = 100;
pub const LM_STEP_TOL: f64 = 1e-10;
/// Bound on ‖r_new − r_old‖ (pixels) for an accepted step.
pub const LM_RESIDUAL_TOL: f64 = 1e-12;
/// Shortest keypoint vector accepted by `rotation_from_keypoints`, in meters.
pub const MIN_VECTOR_NORM: f64 = 1e-9;
const MAX_LAMBDA: f64 = 1e16;
const COST_NOISE: f64 = 1e-12;
const COLLINEAR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PoseError {
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("no homography candidate places the model in front of the camera")]
    NoCheiralCandidate,
    #[error("keypoint {index} has non-positive depth {depth}")]
    NonPositiveDepth { index: usize, depth: f64 },
    #[error("invalid object model: {0}")]
    InvalidModel(String),
    #[error("non-finite keypoints")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnPSolution {
    pub pose: Pose6DoF,
    /// Root mean square of per-keypoint pixel distances.
    pub reprojection_rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Norm of the gradient of ½Σ‖r‖² over (ω, t) at `pose`.
    pub gradient_norm: f64,
}

type Jacobian = SMatrix<f64, { 2 * NUM_KEYPOINTS }, 6>;
type Residual = SVector<f64, { 2 * NUM_KEYPOINTS }>;

fn residual_and_jacobian(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    model: &ObjectModel3D,
    kp: &Keypoints2D,
    intr: &CameraIntrinsics,
) -> (Residual, Jacobian) {
    let mut r = Residual::zeros();
    let mut j = Jacobian::zeros();
    for k in 0..NUM_KEYPOINTS {
        let rx = rotation * model.points[k];
        let p = rx + translation;
        let iz = 1.0 / p.z;
        r[2 * k] = intr.fx * p.x * iz + intr.cx - kp.points[k].x;
        r[2 * k + 1] = intr.fy * p.y * iz + intr.cy - kp.points[k].y;
        let du = Vector3::new(intr.fx * iz, 0.0, -intr.fx * p.x * iz * iz);
        let dv = Vector3::new(0.0, intr.fy * iz, -intr.fy * p.y * iz * iz);
        // d(exp(ω)·R·X)/dω at ω = 0 is −[R·X]×
        let dw_u = rx.cross(&du);
        let dw_v = rx.cross(&dv);
        for c in 0..3 {
            j[(2 * k, c)] = dw_u[c];
            j[(2 * k + 1, c)] = dw_v[c];
            j[(2 * k, 3 + c)] = du[c];
            j[(2 * k + 1, 3 + c)] = dv[c];
        }
    }
    (r, j)
}

fn residual(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    model: &ObjectModel3D,
    kp: &Keypoints2D,
    intr: &CameraIntrinsics,
) -> Residual {
    residual_and_jacobian(rotation, translation, model, kp, intr).0
}

/// Gradient norm of the half squared reprojection error at `pose`.
pub fn reprojection_gradient_norm(
    pose: &Pose6DoF,
    model: &ObjectModel3D,
    kp: &Keypoints2D,
    intr: &CameraIntrinsics,
) -> f64 {
    let (r, j) = residual_and_jacobian(&pose.rotation, &pose.translation, model, kp, intr);
    (j.transpose() * r).norm()
}

fn rmse(r: &Residual) -> f64 {
    (r.norm_squared() / NUM_KEYPOINTS as f64).sqrt()
}

fn check_image_geometry(kp: &Keypoints2D) -> Result<(), PoseError> {
    if !kp.is_finite() {
        return Err(PoseError::NonFinite);
    }
    let p = &kp.points;
    let mut span2: f64 = 0.0;
    for a in 0..NUM_KEYPOINTS {
        for b in a + 1..NUM_KEYPOINTS {
            span2 = span2.max((p[a] - p[b]).norm_squared());
        }
    }
    if span2 == 0.0 {
        return Err(PoseError::Degenerate("all keypoints coincide".into()));
    }
    for skip in 0..NUM_KEYPOINTS {
        let idx: Vec<usize> = (0..NUM_KEYPOINTS).filter(|&k| k != skip).collect();
        let e1 = p[idx[1]] - p[idx[0]];
        let e2 = p[idx[2]] - p[idx[0]];
        let area2 = (e1.x * e2.y - e1.y * e2.x).abs();
        if area2 <= COLLINEAR_TOL * span2 {
            return Err(PoseError::Degenerate(format!(
                "keypoints {:?} are collinear",
                idx
            )));
        }
    }
    Ok(())
}

/// Similarity moving the points to zero centroid and mean distance √2.
fn normalizing_transform(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn apply_h(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Normalized DLT homography mapping `src` to `dst`.
fn homography(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Result<Matrix3<f64>, PoseError> {
    let ts = normalizing_transform(src);
    let td = normalizing_transform(dst);
    let mut a = DMatrix::<f64>::zeros(9, 9);
    for (k, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = apply_h(&ts, s);
        let d = apply_h(&td, d);
        let r0 = [-s.x, -s.y, -1.0, 0.0, 0.0, 0.0, d.x * s.x, d.x * s.y, d.x];
        let r1 = [0.0, 0.0, 0.0, -s.x, -s.y, -1.0, d.y * s.x, d.y * s.y, d.y];
        for c in 0..9 {
            a[(2 * k, c)] = r0[c];
            a[(2 * k + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| PoseError::Degenerate("homography SVD failed".into()))?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("nine singular values");
    let h = v_t.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| PoseError::Degenerate("image normalization".into()))?;
    Ok(td_inv * hn * ts)
}

/// Orthonormal frame of the model plane: origin at the centroid, third axis
/// along the plane normal, first axis towards keypoint 0.
fn plane_frame(model: &ObjectModel3D) -> Result<(Matrix3<f64>, Vector3<f64>), PoseError> {
    let c = model.centroid();
    let mut cov = Matrix3::zeros();
    for p in &model.points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("three eigenvalues");
    let n: Vector3<f64> = eig.eigenvectors.column(imin).into();
    let d0 = model.points[0] - c;
    let e1 = d0 - n * n.dot(&d0);
    if e1.norm() < MIN_VECTOR_NORM {
        return Err(PoseError::InvalidModel("keypoint 0 at the centroid".into()));
    }
    let e1 = e1.normalize();
    let e2 = n.cross(&e1);
    Ok((Matrix3::from_columns(&[e1, e2, n]), c))
}

fn homography_candidates(
    model: &ObjectModel3D,
    kp: &Keypoints2D,
    intr: &CameraIntrinsics,
) -> Result<Vec<Pose6DoF>, PoseError> {
    let (frame, c) = plane_frame(model)?;
    let src: Vec<Vector2<f64>> = model
        .points
        .iter()
        .map(|p| {
            let q = frame.transpose() * (p - c);
            Vector2::new(q.x, q.y)
        })
        .collect();
    let dst: Vec<Vector2<f64>> = kp
        .points
        .iter()
        .map(|p| Vector2::new((p.x - intr.cx) / intr.fx, (p.y - intr.cy) / intr.fy))
        .collect();
    let h = homography(&src, &dst)?;
    let h1: Vector3<f64> = h.column(0).into();
    let h2: Vector3<f64> = h.column(1).into();
    let h3: Vector3<f64> = h.column(2).into();
    let norm = 0.5 * (h1.norm() + h2.norm());
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(PoseError::Degenerate(
            "homography has no rotation part".into(),
        ));
    }
    let mut out = Vec::with_capacity(2);
    for sign in [1.0, -1.0] {
        let r1 = h1 * (sign / norm);
        let r2 = h2 * (sign / norm);
        let tp = h3 * (sign / norm);
        let rp = nearest_rotation(&Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]));
        let rotation = rp * frame.transpose();
        let translation = tp - rotation * c;
        out.push(Pose6DoF::new(rotation, translation));
    }
    Ok(out)
}

fn in_front(pose: &Pose6DoF, model: &ObjectModel3D) -> bool {
    model.points.iter().all(|p| pose.transform(p).z > 0.0)
}

/// Pose minimizing Σ‖y_k − π(R·Y_k + t)‖² for a coplanar 4-point model.
pub fn solve_pnp(
    kp: &Keypoints2D,
    model: &ObjectModel3D,
    intr: &CameraIntrinsics,
) -> Result<PnPSolution, PoseError> {
    let violations = model.violations();
    if !violations.is_empty() {
        return Err(PoseError::InvalidModel(violations.join("; ")));
    }
    check_image_geometry(kp)?;

    let mut best: Option<(Pose6DoF, f64)> = None;
    for cand in homography_candidates(model, kp, intr)? {
        if !in_front(&cand, model) {
            continue;
        }
        let cost = residual(&cand.rotation, &cand.translation, model, kp, intr).norm_squared();
        if cost.is_finite() && best.as_ref().is_none_or(|(_, c)| cost < *c) {
            best = Some((cand, cost));
        }
    }
    let (init, _) = best.ok_or(PoseError::NoCheiralCandidate)?;
    Ok(refine(init, model, kp, intr))
}

fn refine(
    init: Pose6DoF,
    model: &ObjectModel3D,
    kp: &Keypoints2D,
    intr: &CameraIntrinsics,
) -> PnPSolution {
    let mut rotation = init.rotation;
    let mut translation = init.translation;
    let (mut r, mut j) = residual_and_jacobian(&rotation, &translation, model, kp, intr);
    let mut cost = 0.5 * r.norm_squared();
    let mut lambda = LM_INITIAL_LAMBDA;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < LM_MAX_ITERATIONS {
        iterations += 1;
        let g = j.transpose() * r;
        if g.norm() == 0.0 {
            converged = true;
            break;
        }
        let jtj = j.transpose() * j;
        let mut a = jtj;
        for i in 0..6 {
            a[(i, i)] += lambda * jtj[(i, i)];
        }
        let step = match a.cholesky() {
            Some(ch) => -ch.solve(&g),
            None => {
                lambda *= 10.0;
                if lambda > MAX_LAMBDA {
                    break;
                }
                continue;
            }
        };
        let w = Vector3::new(step[0], step[1], step[2]);
        let dt = Vector3::new(step[3], step[4], step[5]);
        let new_rotation = so3_exp(&w) * rotation;
        let new_translation = translation + dt;
        let (new_r, new_j) =
            residual_and_jacobian(&new_rotation, &new_translation, model, kp, intr);
        let new_cost = 0.5 * new_r.norm_squared();
        let in_front = model
            .points
            .iter()
            .all(|p| (new_rotation * p + new_translation).z > 0.0);
        // Near the optimum the cost decrease drops below its rounding noise;
        // a step is then still taken if it shrinks the gradient.
        let within_noise = new_cost - cost <= COST_NOISE * (1.0 + cost)
            && (new_j.transpose() * new_r).norm() < g.norm();
        if in_front && new_cost.is_finite() && (new_cost <= cost || within_noise) {
            let change = (new_r - r).norm();
            rotation = new_rotation;
            translation = new_translation;
            (r, j) = (new_r, new_j);
            cost = new_cost;
            lambda = (lambda / 10.0).max(1e-12);
            if step.norm() < LM_STEP_TOL || change < LM_RESIDUAL_TOL {
                converged = true;
                break;
            }
        } else {
            if step.norm() < LM_STEP_TOL {
                converged = true;
                break;
            }
            lambda *= 10.0;
            if lambda > MAX_LAMBDA {
                break;
            }
        }
    }

    let pose = Pose6DoF::new(nearest_rotation(&rotation), translation);
    PnPSolution {
        reprojection_rmse: rmse(&residual(
            &pose.rotation,
            &pose.translation,
            model,
            kp,
            intr,
        )),
        gradient_norm: reprojection_gradient_norm(&pose, model, kp, intr),
        pose,
        iterations,
        converged,
    }
}

/// Model keypoints expressed in the camera frame: `R·Y + t`.
pub fn camera_frame_keypoints(
    model: &ObjectModel3D,
    pose: &Pose6DoF,
) -> Result<[Vector3<f64>; NUM_KEYPOINTS], PoseError> {
    let mut out = [Vector3::zeros(); NUM_KEYPOINTS];
    for (k, p) in model.points.iter().enumerate() {
        let q = pose.transform(p);
        if !(q.z > 0.0) {
            return Err(PoseError::NonPositiveDepth {
                index: k,
                depth: q.z,
            });
        }
        out[k] = q;
    }
    Ok(out)
}

/// Rotation `[v̂1 v̂2 v̂3]` (projected onto SO(3)) and centroid of four points,
/// with `v1 = Y_2 − Y_O`, `v2 = Y_3 − Y_O`, `v3 = v1 × v2` (1-based indices).
pub fn rotation_from_keypoints(
    points: &[Vector3<f64>; NUM_KEYPOINTS],
) -> Result<(Matrix3<f64>, Vector3<f64>), PoseError> {
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / NUM_KEYPOINTS as f64;
    let v1 = points[1] - centroid;
    let v2 = points[2] - centroid;
    let v3 = v1.cross(&v2);
    for (name, v) in [("v1", &v1), ("v2", &v2), ("v3", &v3)] {
        let n = v.norm();
        if !(n >= MIN_VECTOR_NORM) {
            return Err(PoseError::Degenerate(format!("|{name}| = {n:e}")));
        }
    }
    let m = Matrix3::from_columns(&[v1.normalize(), v2.normalize(), v3.normalize()]);
    Ok((nearest_rotation(&m), centroid))
}

/// Constant rotation from the body frame to the keypoint frame of `model`.
pub fn model_keypoint_frame(model: &ObjectModel3D) -> Result<Matrix3<f64>, PoseError> {
    Ok(rotation_from_keypoints(&model.points)?.0)
}

/// Full estimate: the body pose together with the PnP diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    /// Body orientation and keypoint centroid in camera coordinates.
    pub pose: Pose6DoF,
    pub pnp: PnPSolution,
}

pub fn estimate_pose_detailed(
    kp: &Keypoints2D,
    model: &ObjectModel3D,
    intr: &CameraIntrinsics,
) -> Result<PoseEstimate, PoseError> {
    let pnp = solve_pnp(kp, model, intr)?;
    let cam = camera_frame_keypoints(model, &pnp.pose)?;
    let (r_pose, t_pose) = rotation_from_keypoints(&cam)?;
    let b = model_keypoint_frame(model)?;
    let rotation = nearest_rotation(&(r_pose * b.transpose()));
    Ok(PoseEstimate {
        pose: Pose6DoF::new(rotation, t_pose),
        pnp,
    })
}

pub fn estimate_pose(
    kp: &Keypoints2D,
    model: &ObjectModel3D,
    intr: &CameraIntrinsics,
) -> Result<Pose6DoF, PoseError> {
    Ok(estimate_pose_detailed(kp, model, intr)?.pose)
}

/// Ground-truth counterpart of `estimate_pose`: body rotation and model
/// centroid in camera coordinates.
pub fn reference_pose(model: &ObjectModel3D, pose: &Pose6DoF) -> Pose6DoF {
    Pose6DoF::new(pose.rotation, pose.transform(&model.centroid()))
}

/// Per-frame estimates for a run of records.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSolution {
    pub lines: Vec<PoseLine>,
    /// Indices of frames whose own solve failed and that reuse a neighbour's pose.
    pub fallbacks: Vec<usize>,
}

/// Estimates the body pose of every record from `keypoints[i]`. A frame whose
/// solve fails reuses the nearest earlier successful pose of the same sequence
/// (or the nearest later one), flagged `converged = false`.
pub fn solve_records(
    records: &[FrameRecord],
    keypoints: &[Keypoints2D],
) -> Result<SequenceSolution, PoseError> {
    assert_eq!(
        records.len(),
        keypoints.len(),
        "one keypoint set per record"
    );
    let solved: Vec<Result<PoseEstimate, PoseError>> = records
        .par_iter()
        .zip(keypoints.par_iter())
        .map(|(r, kp)| estimate_pose_detailed(kp, &r.model, &r.intrinsics))
        .collect();
    let mut lines = Vec::with_capacity(records.len());
    let mut fallbacks = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match &solved[i] {
            Ok(est) => lines.push(PoseLine::new(
                &r.sequence_id,
                r.frame_id,
                &est.pose,
                est.pnp.reprojection_rmse,
                est.pnp.converged,
            )),
            Err(err) => {
                let same_seq = |j: &usize| records[*j].sequence_id == r.sequence_id;
                let donor = (0..i)
                    .rev()
                    .filter(same_seq)
                    .find(|&j| solved[j].is_ok())
                    .or_else(|| {
                        (i + 1..records.len())
                            .filter(same_seq)
                            .find(|&j| solved[j].is_ok())
                    })
                    .ok_or_else(|| err.clone())?;
                let est = solved[donor].as_ref().expect("donor solved");
                let res = residual(
                    &est.pnp.pose.rotation,
                    &est.pnp.pose.translation,
                    &r.model,
                    &keypoints[i],
                    &r.intrinsics,
                );
                let rmse = if keypoints[i].is_finite() {
                    rmse(&res)
                } else {
                    f64::MAX
                };
                lines.push(PoseLine::new(
                    &r.sequence_id,
                    r.frame_id,
                    &est.pose,
                    rmse,
                    false,
                ));
                fallbacks.push(i);
            }
        }
    }
    Ok(SequenceSolution { lines, fallbacks })
}

/// One line of the pose JSONL format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseLine {
    pub sequence_id: String,
    pub frame_id: u64,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub t: [f64; 3],
    pub reproj_rmse: f64,
    pub converged: bool,
}

impl PoseLine {
    pub fn new(
        sequence_id: &str,
        frame_id: u64,
        pose: &Pose6DoF,
        rmse: f64,
        converged: bool,
    ) -> Self {
        PoseLine {
            sequence_id: sequence_id.to_string(),
            frame_id,
            rotation: pose.rotation_row_major(),
            t: [pose.translation.x, pose.translation.y, pose.translation.z],
            reproj_rmse: rmse,
            converged,
        }
    }

    pub fn pose(&self) -> Pose6DoF {
        Pose6DoF::from_row_major(self.rotation, self.t)
    }
}

pub fn save_pose_lines(lines: &[PoseLine], path: &Path) -> Result<(), DataError> {
    save_jsonl(lines, path)
}

/// Loads pose lines and checks that every rotation is valid.
pub fn load_pose_lines(path: &Path) -> Result<Vec<PoseLine>, DataError> {
    let lines: Vec<PoseLine> = load_jsonl(path)?;
    for (i, line) in lines.iter().enumerate() {
        let bad = line.pose().rotation_violations();
        if !bad.is_empty() || !line.t.iter().all(|v| v.is_finite()) {
            return Err(DataError::Invalid {
                sequence_id: line.sequence_id.clone(),
                frame_id: line.frame_id,
                violations: if bad.is_empty() {
                    vec![format!("pose {i}: non-finite t")]
                } else {
                    bad
                },
            });
        }
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{geodesic_angle, rot_x, rot_y, rot_z};
    use crate::synth::{add_noise, project_keypoints};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, depth: f64) -> Pose6DoF {
        // tilt the normal at most 60° away from the optical axis
        let r = rot_z(rng.random_range(-3.1..3.1))
            * rot_x(rng.random_range(-1.0..1.0))
            * rot_y(rng.random_range(-0.5..0.5))
            * rot_x(std::f64::consts::PI);
        let t = Vector3::new(
            rng.random_range(-0.2..0.2) * depth,
            rng.random_range(-0.2..0.2) * depth,
            depth,
        );
        Pose6DoF::new(r, t)
    }

    #[test]
    fn identity_pose_has_zero_residual() {
        let model = ObjectModel3D::default();
        let intr = CameraIntrinsics::default();
        let truth = Pose6DoF::identity_at(Vector3::new(0.0, 0.0, 5.0));
        let kp = project_keypoints(&model, &truth, &intr).unwrap();
        let sol = solve_pnp(&kp, &model, &intr).unwrap();
        assert!(sol.reprojection_rmse <= 1e-8, "{}", sol.reprojection_rmse);
        assert!(geodesic_angle(&sol.pose.rotation, &truth.rotation) < 1e-9);
        assert!((sol.pose.translation - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn noiseless_random_pose_round_trip() {
        let model = ObjectModel3D::default();
        let intr = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let truth = random_pose(&mut rng, 5.0);
            let kp = project_keypoints(&model, &truth, &intr).unwrap();
            let sol = solve_pnp(&kp, &model, &intr).unwrap();
            let angle = geodesic_angle(&sol.pose.rotation, &truth.rotation).to_degrees();
            assert!(angle <= 0.1, "{angle}");
            assert!((sol.pose.translation - truth.translation).norm() <= 1e-3);
            assert!(sol.converged);
        }
    }

    #[test]
    fn converged_solutions_are_stationary() {
        let model = ObjectModel3D::default();
        let intr = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for i in 0..300 {
            let truth = random_pose(&mut rng, 5.0);
            let clean = project_keypoints(&model, &truth, &intr).unwrap();
            let sigma = [0.0, 0.5, 1.0, 2.0][i % 4];
            let kp = add_noise(&clean, sigma, &mut rng);
            let sol = solve_pnp(&kp, &model, &intr).unwrap();
            if sol.converged {
                checked += 1;
                assert!(
                    sol.gradient_norm <= 1e-8,
                    "{} at σ={sigma}",
                    sol.gradient_norm
                );
            }
        }
        assert!(checked > 250);
    }

    #[test]
    fn angle_error_grows_with_noise() {
        let model = ObjectModel3D::default();
        let intr = CameraIntrinsics::default();
        let mut medians = Vec::new();
        for sigma in [0.0, 0.5, 1.0, 2.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut errs: Vec<f64> = (0..1000)
                .map(|_| {
                    let truth = random_pose(&mut rng, 5.0);
                    let clean = project_keypoints(&model, &truth, &intr).unwrap();
                    let kp = add_noise(&clean, sigma, &mut rng);
                    let sol = solve_pnp(&kp, &model, &intr).unwrap();
                    geodesic_angle(&sol.pose.rotation, &truth.rotation)
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            medians.push(errs[500]);
        }
        assert!(medians[3] > medians[0]);
        for w in medians.windows(2) {
            assert!(w[1] >= w[0], "{medians:?}");
        }
    }

    #[test]
    fn collapsed_keypoints_are_degenerate() {
        let model = ObjectModel3D::default();
        let intr = CameraIntrinsics::default();
        let kp = Keypoints2D::from_array([[100.0, 100.0]; 4]);
        assert!(matches!(
            solve_pnp(&kp, &model, &intr),
            Err(PoseError::Degenerate(_))
        ));
        assert!(matches!(
            estimate_pose(&kp, &model, &intr),
            Err(PoseError::Degenerate(_))
        ));
        let line = Keypoints2D::from_array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]);
        assert!(matches!(
            solve_pnp(&line, &model, &intr),
            Err(PoseError::Degenerate(_))
        ));
    }

    #[test]
    fn camera_frame_shift_and_inverse() {
        let model = ObjectModel3D::default();
        let pose = Pose6DoF::identity_at(Vector3::new(0.0, 0.0, 5.0));
        let pts = camera_frame_keypoints(&model, &pose).unwrap();
        for k in 0..4 {
            assert_eq!(pts[k], model.points[k] + Vector3::new(0.0, 0.0, 5.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let pose = random_pose(&mut rng, 4.0);
            let pts = camera_frame_keypoints(&model, &pose).unwrap();
            for k in 0..4 {
                let back = pose.rotation.transpose() * (pts[k] - pose.translation);
                assert!((back - model.points[k]).norm() <= 1e-12);
            }
        }
        let behind = Pose6DoF::identity_at(Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(
            camera_frame_keypoints(&model, &behind),
            Err(PoseError::NonPositiveDepth { .. })
        ));
    }

    #[test]
    fn yaw_permutes_camera_coordinates() {
        let model = ObjectModel3D::default();
        let pose = Pose6DoF::new(
            rot_z(std::f64::consts::FRAC_PI_2),
            Vector3::new(0.0, 0.0, 5.0),
        );
        let pts = camera_frame_keypoints(&model, &pose).unwrap();
        for k in 0..4 {
            let m = model.points[k];
            let expected = Vector3::new(-m.y, m.x, m.z + 5.0);
            assert!((pts[k] - expected).norm() < 1e-15);
        }
    }

    #[test]
    fn fronto_parallel_square_normal_is_optical_axis() {
        let model = ObjectModel3D::default();
        let pose = Pose6DoF::identity_at(Vector3::new(0.0, 0.0, 5.0));
        let pts = camera_frame_keypoints(&model, &pose).unwrap();
        let (r, t) = rotation_from_keypoints(&pts).unwrap();
        let v3: Vector3<f64> = r.column(2).into();
        assert!((v3.z.abs() - 1.0).abs() < 1e-12);
        assert!((t - Vector3::new(0.0, 0.0, 5.0)).norm() < 1e-15);
    }

    #[test]
    fn square_model_frame_is_already_orthonormal() {
        let model = ObjectModel3D::default();
        let b = model_keypoint_frame(&model).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let expected = Matrix3::new(s, -s, 0.0, -s, -s, 0.0, 0.0, 0.0, -1.0);
        assert!((b - expected).norm() < 1e-12);
    }

    #[test]
    fn estimate_recovers_body_pose() {
        let model = ObjectModel3D::default();
        let intr = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let truth = random_pose(&mut rng, 5.0);
            let kp = project_keypoints(&model, &truth, &intr).unwrap();
            let est = estimate_pose(&kp, &model, &intr).unwrap();
            let reference = reference_pose(&model, &truth);
            assert!(geodesic_angle(&est.rotation, &reference.rotation).to_degrees() < 1e-6);
            assert!((est.translation - reference.translation).norm() < 1e-6);
        }
    }

    #[test]
    fn body_yaw_rotates_estimate() {
        let model = ObjectModel3D::default();
        let intr = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let quarter = rot_z(std::f64::consts::FRAC_PI_2);
        for _ in 0..20 {
            let truth = random_pose(&mut rng, 5.0);
            let turned = Pose6DoF::new(truth.rotation * quarter, truth.translation);
            let a = estimate_pose(
                &project_keypoints(&model, &truth, &intr).unwrap(),
                &model,
                &intr,
            )
            .unwrap();
            let b = estimate_pose(
                &project_keypoints(&model, &turned, &intr).unwrap(),
                &model,
                &intr,
            )
            .unwrap();
            assert!((a.translation - b.translation).norm() < 1e-6);
            assert!(geodesic_angle(&(a.rotation * quarter), &b.rotation) < 1e-6);
        }
    }

    #[test]
    fn failed_frames_borrow_a_neighbour() {
        let model = ObjectModel3D::default();
        let intr = CameraIntrinsics::default();
        let cfg = crate::synth::TrajectoryConfig {
            n_frames: 4,
            ..Default::default()
        };
        let ds = crate::synth::generate_dataset(&cfg, &model, &intr).unwrap();
        let mut kps: Vec<Keypoints2D> = ds.records.iter().map(|r| r.kp2d_gt).collect();
        kps[0] = Keypoints2D::from_array([[5.0, 5.0]; 4]);
        kps[2] = Keypoints2D::from_array([[5.0, 5.0]; 4]);
        let sol = solve_records(&ds.records, &kps).unwrap();
        assert_eq!(sol.fallbacks, vec![0, 2]);
        assert_eq!(sol.lines[0].rotation, sol.lines[1].rotation);
        assert_eq!(sol.lines[2].t, sol.lines[1].t);
        assert!(!sol.lines[2].converged);
        assert!(sol.lines[3].converged);
        let all_bad = vec![Keypoints2D::from_array([[5.0, 5.0]; 4]); 4];
        assert!(solve_records(&ds.records, &all_bad).is_err());
    }

    #[test]
    fn pose_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.jsonl");
        let pose = Pose6DoF::new(rot_x(0.3) * rot_z(1.1), Vector3::new(0.1, -0.2, 4.0));
        let lines = vec![
            PoseLine::new("a", 0, &pose, 0.25, true),
            PoseLine::new("a", 1, &pose, 1e-9, false),
        ];
        save_pose_lines(&lines, &path).unwrap();
        assert_eq!(load_pose_lines(&path).unwrap(), lines);
    }

    fn arb_points() -> impl Strategy<Value = [Vector3<f64>; 4]> {
        prop::array::uniform4(prop::array::uniform3(-3.0f64..3.0))
            .prop_map(|a| a.map(|p| Vector3::new(p[0], p[1], p[2])))
    }

    proptest! {
        #[test]
        fn keypoint_rotation_is_special_orthogonal(pts in arb_points()) {
            if let Ok((r, t)) = rotation_from_keypoints(&pts) {
                prop_assert!((r.transpose() * r - Matrix3::identity()).norm() <= 1e-9);
                prop_assert!((r.determinant() - 1.0).abs() <= 1e-9);
                let mean = (pts[0] + pts[1] + pts[2] + pts[3]) / 4.0;
                prop_assert!((t - mean).norm() <= 1e-12);
            }
        }

        #[test]
        fn rigid_shift_moves_only_centroid(
            pts in arb_points(),
            d in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let delta = Vector3::new(d[0], d[1], d[2]);
            if let Ok((r0, t0)) = rotation_from_keypoints(&pts) {
                // skip inputs too close to degenerate for a stable comparison
                let v1 = pts[1] - t0;
                let v2 = pts[2] - t0;
                prop_assume!(v1.cross(&v2).norm() > 1e-3);
                let shifted = pts.map(|p| p + delta);
                let (r1, t1) = rotation_from_keypoints(&shifted).unwrap();
                prop_assert!((t1 - (t0 + delta)).norm() <= 1e-12);
                prop_assert!((r1 - r0).norm() <= 1e-9);
            }
        }
    }
}
