//! Core domain types and the JSONL dataset format.
//!
//! A dataset file starts with a metadata line
//! `{"meta":{"seed":..,"sigma_px":..,"translation":..,"rotation":..,"nonlinear":..}}`
//! followed by one frame record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of propeller keypoints per drone.
pub const NUM_KEYPOINTS: usize = 4;

const ORTHONORMAL_TOL: f64 = 1e-9;
const REPROJECTION_TOL_PX: f64 = 1e-6;
const COPLANAR_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record {sequence_id}/{frame_id} is invalid: {}", violations.join("; "))]
    Invalid {
        sequence_id: String,
        frame_id: u64,
        violations: Vec<String>,
    },
    #[error("sequence {sequence_id}: {message}")]
    Sequence {
        sequence_id: String,
        message: String,
    },
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Four ordered (x, y) pixel positions. Index k always names the same propeller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoints2D {
    pub points: [Vector2<f64>; NUM_KEYPOINTS],
}

impl Keypoints2D {
    pub fn new(points: [Vector2<f64>; NUM_KEYPOINTS]) -> Self {
        Self { points }
    }

    pub fn from_array(raw: [[f64; 2]; NUM_KEYPOINTS]) -> Self {
        Self {
            points: raw.map(|[x, y]| Vector2::new(x, y)),
        }
    }

    pub fn to_array(&self) -> [[f64; 2]; NUM_KEYPOINTS] {
        self.points.map(|p| [p.x, p.y])
    }

    /// Flattened `[x1, y1, x2, y2, ...]`.
    pub fn to_flat(&self) -> [f64; 2 * NUM_KEYPOINTS] {
        let mut out = [0.0; 2 * NUM_KEYPOINTS];
        for (k, p) in self.points.iter().enumerate() {
            out[2 * k] = p.x;
            out[2 * k + 1] = p.y;
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len(), 2 * NUM_KEYPOINTS, "expected 8 coordinates");
        let mut points = [Vector2::zeros(); NUM_KEYPOINTS];
        for (k, p) in points.iter_mut().enumerate() {
            *p = Vector2::new(flat[2 * k], flat[2 * k + 1]);
        }
        Self { points }
    }

    pub fn is_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.x.is_finite() && p.y.is_finite())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            points: self.points.map(|p| p * factor),
        }
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> (Vector2<f64>, Vector2<f64>) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn max_deviation(&self, other: &Keypoints2D) -> f64 {
        self.points
            .iter()
            .zip(other.points.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Propeller positions in the drone body frame, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectModel3D {
    pub points: [Vector3<f64>; NUM_KEYPOINTS],
}

impl ObjectModel3D {
    pub fn new(points: [Vector3<f64>; NUM_KEYPOINTS]) -> Self {
        Self { points }
    }

    /// Square layout in the body z=0 plane. Index 1 is the (+x, +y) propeller,
    /// the rest follow clockwise seen from +z.
    pub fn square(half_diagonal: f64) -> Self {
        let a = half_diagonal / std::f64::consts::SQRT_2;
        Self {
            points: [
                Vector3::new(a, a, 0.0),
                Vector3::new(a, -a, 0.0),
                Vector3::new(-a, -a, 0.0),
                Vector3::new(-a, a, 0.0),
            ],
        }
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / NUM_KEYPOINTS as f64
    }

    pub fn to_array(&self) -> [[f64; 3]; NUM_KEYPOINTS] {
        self.points.map(|p| [p.x, p.y, p.z])
    }

    pub fn from_array(raw: [[f64; 3]; NUM_KEYPOINTS]) -> Self {
        Self {
            points: raw.map(|[x, y, z]| Vector3::new(x, y, z)),
        }
    }

    /// Ratio of smallest to largest singular value of the centered point matrix.
    pub fn planarity_ratio(&self) -> f64 {
        let c = self.centroid();
        let m = nalgebra::Matrix4x3::from_fn(|r, col| self.points[r][col] - c[col]);
        let sv = m.singular_values();
        let max = sv.max();
        if max == 0.0 {
            return 0.0;
        }
        sv.min() / max
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self
            .points
            .iter()
            .any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            out.push("model: non-finite coordinate".to_string());
            return out;
        }
        if self.planarity_ratio() > COPLANAR_TOL {
            out.push("model: points not coplanar".to_string());
        }
        let scale = self
            .points
            .iter()
            .map(|p| p.norm())
            .fold(0.0, f64::max)
            .max(1.0);
        if self.centroid().norm() > COPLANAR_TOL * scale {
            out.push("model: centroid not at body origin".to_string());
        }
        out
    }
}

impl Default for ObjectModel3D {
    fn default() -> Self {
        Self::square(0.15)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.fx > 0.0 && self.fx.is_finite()) || !(self.fy > 0.0 && self.fy.is_finite()) {
            out.push("intrinsics: focal length must be positive".to_string());
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            out.push("intrinsics: cx outside (0, width)".to_string());
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            out.push("intrinsics: cy outside (0, height)".to_string());
        }
        out
    }
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 800.0,
            fy: 800.0,
            cx: 320.0,
            cy: 320.0,
            width: 640,
            height: 640,
        }
    }
}

/// Body-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6DoF {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose6DoF {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity_at(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn from_row_major(r: [f64; 9], t: [f64; 3]) -> Self {
        Self::new(Matrix3::from_row_slice(&r), Vector3::from(t))
    }

    /// Violations of the rotation-matrix invariants (finite, orthonormal, det +1).
    pub fn rotation_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rotation.iter().any(|v| !v.is_finite())
            || self.translation.iter().any(|v| !v.is_finite())
        {
            out.push("pose: non-finite entry".to_string());
            return out;
        }
        if self.orthonormality_error() > ORTHONORMAL_TOL {
            out.push("pose.R: not orthonormal".to_string());
        }
        if (self.rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            out.push("pose.R: det ≠ 1".to_string());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub sequence_id: String,
    pub intrinsics: CameraIntrinsics,
    pub model: ObjectModel3D,
    /// Clean projection of `model` through `pose`.
    pub kp2d_gt: Keypoints2D,
    /// Observed keypoints; equal to `kp2d_gt` when the sequence has no noise.
    pub kp2d_obs: Keypoints2D,
    pub pose: Pose6DoF,
}

/// Checks every record invariant. Returns an empty list for a valid record.
pub fn validate_record(record: &FrameRecord) -> Vec<String> {
    let mut out = Vec::new();
    let intr_violations = record.intrinsics.violations();
    let intr_ok = intr_violations.is_empty();
    out.extend(intr_violations);
    out.extend(record.model.violations());
    let rot = record.pose.rotation_violations();
    let pose_ok = rot.is_empty();
    out.extend(rot);
    if !record.kp2d_gt.is_finite() {
        out.push("kp2d_gt: non-finite coordinate".to_string());
    }
    if !record.kp2d_obs.is_finite() {
        out.push("kp2d_obs: non-finite coordinate".to_string());
    }
    if pose_ok {
        let depth_ok = record
            .model
            .points
            .iter()
            .all(|p| record.pose.transform(p).z > 0.0);
        if !depth_ok {
            out.push("pose: keypoint with non-positive camera depth".to_string());
        } else if intr_ok && record.kp2d_gt.is_finite() {
            match crate::synth::project_keypoints(&record.model, &record.pose, &record.intrinsics) {
                Ok(proj) if proj.max_deviation(&record.kp2d_gt) <= REPROJECTION_TOL_PX => {}
                _ => out.push("keypoints_2d: reprojection mismatch".to_string()),
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub sigma_px: f64,
    pub translation: bool,
    pub rotation: bool,
    pub nonlinear: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceDataset {
    pub meta: DatasetMeta,
    pub records: Vec<FrameRecord>,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct sequence ids in first-appearance order.
    pub fn sequence_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for r in &self.records {
            if !ids.iter().any(|s| s == &r.sequence_id) {
                ids.push(r.sequence_id.clone());
            }
        }
        ids
    }

    /// Validates every record plus the per-sequence ordering and sharing rules.
    pub fn validate(&self) -> Result<(), DataError> {
        for r in &self.records {
            let v = validate_record(r);
            if !v.is_empty() {
                return Err(DataError::Invalid {
                    sequence_id: r.sequence_id.clone(),
                    frame_id: r.frame_id,
                    violations: v,
                });
            }
        }
        for id in self.sequence_ids() {
            let seq: Vec<&FrameRecord> = self
                .records
                .iter()
                .filter(|r| r.sequence_id == id)
                .collect();
            let first = seq[0];
            for pair in seq.windows(2) {
                if pair[1].frame_id <= pair[0].frame_id {
                    return Err(DataError::Sequence {
                        sequence_id: id,
                        message: format!(
                            "frame ids not strictly increasing at {}",
                            pair[1].frame_id
                        ),
                    });
                }
            }
            if seq
                .iter()
                .any(|r| r.intrinsics != first.intrinsics || r.model != first.model)
            {
                return Err(DataError::Sequence {
                    sequence_id: id,
                    message: "records do not share intrinsics and model".to_string(),
                });
            }
        }
        Ok(())
    }

    /// Concatenates several datasets; metadata is taken from the first.
    pub fn concat(parts: &[SequenceDataset]) -> SequenceDataset {
        SequenceDataset {
            meta: parts.first().map(|p| p.meta).unwrap_or_default(),
            records: parts
                .iter()
                .flat_map(|p| p.records.iter().cloned())
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: DatasetMeta,
}

/// Wire layout of one record. Field order is the serialized order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    frame_id: u64,
    sequence_id: String,
    intrinsics: CameraIntrinsics,
    model: [[f64; 3]; NUM_KEYPOINTS],
    kp2d_gt: [[f64; 2]; NUM_KEYPOINTS],
    kp2d_obs: [[f64; 2]; NUM_KEYPOINTS],
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl From<&FrameRecord> for RecordLine {
    fn from(r: &FrameRecord) -> Self {
        RecordLine {
            frame_id: r.frame_id,
            sequence_id: r.sequence_id.clone(),
            intrinsics: r.intrinsics,
            model: r.model.to_array(),
            kp2d_gt: r.kp2d_gt.to_array(),
            kp2d_obs: r.kp2d_obs.to_array(),
            r: r.pose.rotation_row_major(),
            t: [
                r.pose.translation.x,
                r.pose.translation.y,
                r.pose.translation.z,
            ],
        }
    }
}

impl From<RecordLine> for FrameRecord {
    fn from(l: RecordLine) -> Self {
        FrameRecord {
            frame_id: l.frame_id,
            sequence_id: l.sequence_id,
            intrinsics: l.intrinsics,
            model: ObjectModel3D::from_array(l.model),
            kp2d_gt: Keypoints2D::from_array(l.kp2d_gt),
            kp2d_obs: Keypoints2D::from_array(l.kp2d_obs),
            pose: Pose6DoF::from_row_major(l.r, l.t),
        }
    }
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn record_to_json(record: &FrameRecord) -> String {
    serde_json::to_string(&RecordLine::from(record)).expect("record serialization is infallible")
}

pub fn save_dataset(dataset: &SequenceDataset, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let meta = serde_json::to_string(&MetaLine { meta: dataset.meta })
        .expect("metadata serialization is infallible");
    writeln!(w, "{meta}").map_err(|e| DataError::io(path, e))?;
    for r in &dataset.records {
        writeln!(w, "{}", record_to_json(r)).map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<SequenceDataset, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut dataset = SequenceDataset::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 {
            let meta: MetaLine = serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: lineno,
                message: format!("expected metadata object: {e}"),
            })?;
            dataset.meta = meta.meta;
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        dataset.records.push(rec.into());
    }
    dataset.validate()?;
    Ok(dataset)
}

/// One predicted keypoint set, keyed by sequence and frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointPrediction {
    pub sequence_id: String,
    pub frame_id: u64,
    pub keypoints: [[f64; 2]; NUM_KEYPOINTS],
}

impl KeypointPrediction {
    pub fn new(sequence_id: &str, frame_id: u64, kp: &Keypoints2D) -> Self {
        KeypointPrediction {
            sequence_id: sequence_id.to_string(),
            frame_id,
            keypoints: kp.to_array(),
        }
    }

    pub fn keypoints(&self) -> Keypoints2D {
        Keypoints2D::from_array(self.keypoints)
    }
}

/// Writes any serializable rows as JSON lines.
pub fn save_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("row serialization is infallible");
        writeln!(w, "{line}").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Reads JSON lines, skipping blank ones.
pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
