//! Keypoint and 6DoF evaluation.
//!
//! OKS for one drone with four equally weighted keypoints:
//!
//! ```text
//! OKS = (1/4) Σ_k exp(−d_k² / (0.2·β²)),   β² = object area
//! ```
//!
//! The object area is the area of the GT keypoint bounding box.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{KeypointPrediction, Keypoints2D, Pose6DoF, SequenceDataset, NUM_KEYPOINTS};
use crate::geometry::geodesic_angle;
use crate::pose3d::{reference_pose, PoseLine};

/// Strictness constant multiplying β² in the OKS exponent.
pub const OKS_KAPPA: f64 = 0.2;
/// Lower bound on the object area, px². Guards flat bounding boxes.
pub const MIN_OBJECT_AREA: f64 = 1.0;
pub const SR_THRESHOLDS: (f64, f64) = (0.90, 0.95);

/// AP thresholds 0.50, 0.55, …, 0.95.
pub fn ap_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("object area must be positive, got {0}")]
    InvalidArea(f64),
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {gt} ground-truth vs {pred} predicted")]
    LengthMismatch { gt: usize, pred: usize },
    #[error("no prediction for {sequence_id}/{frame_id}")]
    MissingFrame { sequence_id: String, frame_id: u64 },
    #[error("prediction for {sequence_id}/{frame_id} has no dataset record or is duplicated")]
    Unmatched { sequence_id: String, frame_id: u64 },
}

pub fn oks(gt: &Keypoints2D, pred: &Keypoints2D, object_area: f64) -> Result<f64, MetricsError> {
    if !(object_area > 0.0) {
        return Err(MetricsError::InvalidArea(object_area));
    }
    let denom = OKS_KAPPA * object_area;
    let sum: f64 = gt
        .points
        .iter()
        .zip(&pred.points)
        .map(|(g, p)| (-(g - p).norm_squared() / denom).exp())
        .sum();
    Ok(sum / NUM_KEYPOINTS as f64)
}

/// Bounding-box area of the GT keypoints, floored at `MIN_OBJECT_AREA`.
pub fn object_area(gt: &Keypoints2D) -> f64 {
    let (lo, hi) = gt.bounding_box();
    ((hi.x - lo.x) * (hi.y - lo.y)).max(MIN_OBJECT_AREA)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointScores {
    pub sr90: f64,
    pub sr95: f64,
    pub ap: f64,
}

fn percent_at_least(values: &[f64], tau: f64) -> f64 {
    100.0 * values.iter().filter(|&&v| v >= tau).count() as f64 / values.len() as f64
}

pub fn keypoint_metrics(oks_list: &[f64]) -> Result<KeypointScores, MetricsError> {
    if oks_list.is_empty() {
        return Err(MetricsError::Empty);
    }
    let thresholds = ap_thresholds();
    let ap = thresholds
        .iter()
        .map(|&t| percent_at_least(oks_list, t))
        .sum::<f64>()
        / thresholds.len() as f64;
    Ok(KeypointScores {
        sr90: percent_at_least(oks_list, SR_THRESHOLDS.0),
        sr95: percent_at_least(oks_list, SR_THRESHOLDS.1),
        ap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseScores {
    pub mae_angle_deg: f64,
    pub rmse_m: f64,
    pub mae_m: f64,
}

/// Geodesic angle arccos((tr(R_gtᵀR_pred) − 1)/2) in degrees. Evaluated as
/// atan2(sin, cos) with the cosine clamped to [−1, 1]; a bare arccos loses
/// about 1e-6° next to zero.
pub fn angle_error_deg(gt: &Pose6DoF, pred: &Pose6DoF) -> f64 {
    geodesic_angle(&gt.rotation, &pred.rotation).to_degrees()
}

pub fn pose_metrics(gt: &[Pose6DoF], pred: &[Pose6DoF]) -> Result<PoseScores, MetricsError> {
    if gt.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gt: gt.len(),
            pred: pred.len(),
        });
    }
    if gt.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = gt.len() as f64;
    let mut angle = 0.0;
    let mut sq = 0.0;
    let mut abs = 0.0;
    for (g, p) in gt.iter().zip(pred) {
        angle += angle_error_deg(g, p);
        let e = (g.translation - p.translation).norm();
        sq += e * e;
        abs += e;
    }
    Ok(PoseScores {
        mae_angle_deg: angle / n,
        rmse_m: (sq / n).sqrt(),
        mae_m: abs / n,
    })
}

/// Metrics for one group of frames. Keypoint or pose fields are absent when
/// the corresponding predictions were not supplied.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreRow {
    pub n_frames: usize,
    pub sr90: Option<f64>,
    pub sr95: Option<f64>,
    pub ap: Option<f64>,
    pub mae_angle_deg: Option<f64>,
    pub rmse_m: Option<f64>,
    pub mae_m: Option<f64>,
}

impl ScoreRow {
    fn fields(&self) -> [Option<f64>; 6] {
        [
            self.sr90,
            self.sr95,
            self.ap,
            self.mae_angle_deg,
            self.rmse_m,
            self.mae_m,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Pooled over all frames, i.e. per-sequence values weighted by frame count.
    #[serde(flatten)]
    pub overall: ScoreRow,
    /// Plain mean of the per-sequence rows.
    pub unweighted_avg: ScoreRow,
    pub per_sequence: BTreeMap<String, ScoreRow>,
    /// Sequence ids in dataset order.
    pub sequence_order: Vec<String>,
    /// Per-frame OKS in dataset order (empty without keypoint predictions).
    pub oks: Vec<f64>,
}

impl MetricsReport {
    /// Table rows: one per sequence followed by "Avg".
    pub fn rows(&self) -> Vec<(String, ScoreRow)> {
        let mut out: Vec<(String, ScoreRow)> = self
            .sequence_order
            .iter()
            .map(|s| (s.clone(), self.per_sequence[s].clone()))
            .collect();
        out.push(("Avg".to_string(), self.overall.clone()));
        out
    }

    /// Fixed-width text table of `rows()`.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "{:<16} {:>6} {:>9} {:>9} {:>9} {:>12} {:>9} {:>9}\n",
            "sequence", "frames", "SR90", "SR95", "AP", "MAE-angle", "RMSE", "MAE-abs"
        );
        for (name, row) in self.rows() {
            let f = row.fields();
            s.push_str(&format!(
                "{:<16} {:>6} {:>9} {:>9} {:>9} {:>12} {:>9} {:>9}\n",
                name,
                row.n_frames,
                fmt(f[0]),
                fmt(f[1]),
                fmt(f[2]),
                fmt(f[3]),
                fmt(f[4]),
                fmt(f[5])
            ));
        }
        s
    }
}

type FrameKey = (String, u64);

/// For every dataset record, the index of its prediction in `items`.
pub fn match_to_records<T, F>(
    items: &[T],
    dataset: &SequenceDataset,
    key: F,
) -> Result<Vec<usize>, MetricsError>
where
    F: Fn(&T) -> FrameKey,
{
    let mut by_key: HashMap<FrameKey, usize> = HashMap::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let k = key(item);
        if by_key.insert(k.clone(), i).is_some() {
            return Err(MetricsError::Unmatched {
                sequence_id: k.0,
                frame_id: k.1,
            });
        }
    }
    let mut order = Vec::with_capacity(dataset.len());
    for r in &dataset.records {
        let k = (r.sequence_id.clone(), r.frame_id);
        match by_key.remove(&k) {
            Some(i) => order.push(i),
            None => {
                return Err(MetricsError::MissingFrame {
                    sequence_id: k.0,
                    frame_id: k.1,
                })
            }
        }
    }
    if let Some(((sequence_id, frame_id), _)) = by_key.into_iter().min() {
        return Err(MetricsError::Unmatched {
            sequence_id,
            frame_id,
        });
    }
    Ok(order)
}

fn score_group(
    oks_vals: Option<&[f64]>,
    poses: Option<(&[Pose6DoF], &[Pose6DoF])>,
    n: usize,
) -> Result<ScoreRow, MetricsError> {
    let mut row = ScoreRow {
        n_frames: n,
        ..ScoreRow::default()
    };
    if let Some(v) = oks_vals {
        let k = keypoint_metrics(v)?;
        row.sr90 = Some(k.sr90);
        row.sr95 = Some(k.sr95);
        row.ap = Some(k.ap);
    }
    if let Some((gt, pred)) = poses {
        let p = pose_metrics(gt, pred)?;
        row.mae_angle_deg = Some(p.mae_angle_deg);
        row.rmse_m = Some(p.rmse_m);
        row.mae_m = Some(p.mae_m);
    }
    Ok(row)
}

/// Scores keypoint and/or pose predictions against a dataset. Predictions are
/// matched to records by (sequence_id, frame_id); every record needs exactly
/// one prediction.
pub fn evaluate(
    dataset: &SequenceDataset,
    kp_pred: Option<&[KeypointPrediction]>,
    pose_pred: Option<&[PoseLine]>,
) -> Result<MetricsReport, MetricsError> {
    if dataset.is_empty() {
        return Err(MetricsError::Empty);
    }
    let oks_all: Option<Vec<f64>> = match kp_pred {
        None => None,
        Some(preds) => {
            let order = match_to_records(preds, dataset, |p| (p.sequence_id.clone(), p.frame_id))?;
            let vals: Result<Vec<f64>, MetricsError> = dataset
                .records
                .par_iter()
                .zip(order.par_iter())
                .map(|(r, &i)| oks(&r.kp2d_gt, &preds[i].keypoints(), object_area(&r.kp2d_gt)))
                .collect();
            Some(vals?)
        }
    };
    let pose_pairs: Option<(Vec<Pose6DoF>, Vec<Pose6DoF>)> = match pose_pred {
        None => None,
        Some(preds) => {
            let order = match_to_records(preds, dataset, |p| (p.sequence_id.clone(), p.frame_id))?;
            let gt = dataset
                .records
                .iter()
                .map(|r| reference_pose(&r.model, &r.pose))
                .collect();
            let pred = order.iter().map(|&i| preds[i].pose()).collect();
            Some((gt, pred))
        }
    };

    let order = dataset.sequence_ids();
    let mut per_sequence = BTreeMap::new();
    for id in &order {
        let idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| &dataset.records[i].sequence_id == id)
            .collect();
        let oks_seq: Option<Vec<f64>> = oks_all
            .as_ref()
            .map(|v| idx.iter().map(|&i| v[i]).collect());
        let pose_seq: Option<(Vec<Pose6DoF>, Vec<Pose6DoF>)> = pose_pairs.as_ref().map(|(g, p)| {
            (
                idx.iter().map(|&i| g[i]).collect(),
                idx.iter().map(|&i| p[i]).collect(),
            )
        });
        let row = score_group(
            oks_seq.as_deref(),
            pose_seq.as_ref().map(|(g, p)| (g.as_slice(), p.as_slice())),
            idx.len(),
        )?;
        per_sequence.insert(id.clone(), row);
    }
    let overall = score_group(
        oks_all.as_deref(),
        pose_pairs
            .as_ref()
            .map(|(g, p)| (g.as_slice(), p.as_slice())),
        dataset.len(),
    )?;

    let rows: Vec<&ScoreRow> = order.iter().map(|s| &per_sequence[s]).collect();
    let mean = |f: usize| -> Option<f64> {
        let vals: Option<Vec<f64>> = rows.iter().map(|r| r.fields()[f]).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let unweighted_avg = ScoreRow {
        n_frames: dataset.len(),
        sr90: mean(0),
        sr95: mean(1),
        ap: mean(2),
        mae_angle_deg: mean(3),
        rmse_m: mean(4),
        mae_m: mean(5),
    };

    Ok(MetricsReport {
        overall,
        unweighted_avg,
        per_sequence,
        sequence_order: order,
        oks: oks_all.unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{CameraIntrinsics, ObjectModel3D};
    use crate::geometry::rot_z;
    use crate::synth::{generate_dataset, TrajectoryConfig};
    use nalgebra::{Vector2, Vector3};
    use proptest::prelude::*;

    fn square_kp(size: f64) -> Keypoints2D {
        Keypoints2D::from_array([[0.0, 0.0], [size, 0.0], [size, size], [0.0, size]])
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = square_kp(10.0);
        assert_eq!(oks(&gt, &gt, 100.0).unwrap(), 1.0);
    }

    #[test]
    fn unit_exponent_gives_inverse_e() {
        let gt = square_kp(10.0);
        let area: f64 = 100.0;
        let d = (OKS_KAPPA * area).sqrt();
        let mut pred = gt;
        for p in pred.points.iter_mut() {
            *p += Vector2::new(d, 0.0);
        }
        assert!((oks(&gt, &pred, area).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn single_displaced_keypoint() {
        let gt = square_kp(10.0);
        let area: f64 = 100.0;
        let d = (OKS_KAPPA * area * 4f64.ln()).sqrt();
        let mut pred = gt;
        pred.points[2] += Vector2::new(0.0, d);
        assert!((oks(&gt, &pred, area).unwrap() - 0.8125).abs() < 1e-15);
    }

    #[test]
    fn non_positive_area_is_rejected() {
        let gt = square_kp(1.0);
        assert_eq!(oks(&gt, &gt, 0.0), Err(MetricsError::InvalidArea(0.0)));
    }

    #[test]
    fn flat_boxes_use_the_area_floor() {
        let flat = Keypoints2D::from_array([[0.0, 5.0], [1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]);
        assert_eq!(object_area(&flat), MIN_OBJECT_AREA);
        assert_eq!(object_area(&square_kp(4.0)), 16.0);
    }

    #[test]
    fn success_rates_and_ap() {
        let k = keypoint_metrics(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((k.sr90, k.sr95, k.ap), (100.0, 100.0, 100.0));
        let k = keypoint_metrics(&[0.95, 0.85, 0.92]).unwrap();
        assert!((k.sr90 - 200.0 / 3.0).abs() < 1e-12);
        assert!((k.sr95 - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(keypoint_metrics(&[0.1, 0.49]).unwrap().ap, 0.0);
        assert_eq!(keypoint_metrics(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn ap_thresholds_are_the_ten_standard_values() {
        let t = ap_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
        assert_eq!(t[1], 0.55);
    }

    #[test]
    fn pose_metric_cases() {
        let gt: Vec<Pose6DoF> = (0..5)
            .map(|i| {
                Pose6DoF::new(
                    rot_z(0.3 * i as f64),
                    Vector3::new(0.0, 0.0, 3.0 + i as f64),
                )
            })
            .collect();
        let same = pose_metrics(&gt, &gt).unwrap();
        assert_eq!(
            (same.mae_angle_deg, same.rmse_m, same.mae_m),
            (0.0, 0.0, 0.0)
        );

        let shifted: Vec<Pose6DoF> = gt
            .iter()
            .map(|p| Pose6DoF::new(p.rotation, p.translation + Vector3::new(0.1, 0.0, 0.0)))
            .collect();
        let s = pose_metrics(&gt, &shifted).unwrap();
        assert!((s.rmse_m - 0.1).abs() < 1e-12 && (s.mae_m - 0.1).abs() < 1e-12);

        let turned: Vec<Pose6DoF> = gt
            .iter()
            .map(|p| Pose6DoF::new(p.rotation * rot_z(10f64.to_radians()), p.translation))
            .collect();
        let a = pose_metrics(&gt, &turned).unwrap();
        assert!((a.mae_angle_deg - 10.0).abs() < 1e-9);

        assert_eq!(
            pose_metrics(&gt, &gt[..2]),
            Err(MetricsError::LengthMismatch { gt: 5, pred: 2 })
        );
    }

    fn two_sequence_dataset() -> SequenceDataset {
        let model = ObjectModel3D::default();
        let intr = CameraIntrinsics::default();
        let parts: Vec<SequenceDataset> = ["a", "b"]
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let cfg = TrajectoryConfig {
                    n_frames: 10 + 5 * i,
                    seed: i as u64,
                    sequence_id: id.to_string(),
                    ..TrajectoryConfig::default()
                };
                generate_dataset(&cfg, &model, &intr).unwrap()
            })
            .collect();
        SequenceDataset::concat(&parts)
    }

    #[test]
    fn ground_truth_predictions_score_perfectly() {
        let ds = two_sequence_dataset();
        let kp: Vec<KeypointPrediction> = ds
            .records
            .iter()
            .map(|r| KeypointPrediction::new(&r.sequence_id, r.frame_id, &r.kp2d_gt))
            .collect();
        let poses: Vec<PoseLine> = ds
            .records
            .iter()
            .map(|r| {
                PoseLine::new(
                    &r.sequence_id,
                    r.frame_id,
                    &reference_pose(&r.model, &r.pose),
                    0.0,
                    true,
                )
            })
            .collect();
        let report = evaluate(&ds, Some(&kp), Some(&poses)).unwrap();
        assert!(report.oks.iter().all(|&o| o == 1.0));
        assert_eq!(report.overall.ap, Some(100.0));
        assert!(report.overall.mae_angle_deg.unwrap() < 1e-6);
        assert!(report.overall.rmse_m.unwrap() < 1e-12);
        let rows = report.rows();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].0, "Avg");
        assert_eq!(report.per_sequence["b"].n_frames, 15);
        let json = serde_json::to_value(&report).unwrap();
        for key in [
            "sr90",
            "sr95",
            "ap",
            "mae_angle_deg",
            "rmse_m",
            "mae_m",
            "per_sequence",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn weighted_and_unweighted_averages_differ_by_frame_count() {
        let ds = two_sequence_dataset();
        // perfect on "a" (10 frames), 0.1 m off on "b" (15 frames)
        let poses: Vec<PoseLine> = ds
            .records
            .iter()
            .map(|r| {
                let mut p = reference_pose(&r.model, &r.pose);
                if r.sequence_id == "b" {
                    p.translation.x += 0.1;
                }
                PoseLine::new(&r.sequence_id, r.frame_id, &p, 0.0, true)
            })
            .collect();
        let report = evaluate(&ds, None, Some(&poses)).unwrap();
        assert!((report.overall.mae_m.unwrap() - 0.06).abs() < 1e-12);
        assert!((report.unweighted_avg.mae_m.unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(report.overall.sr90, None);
    }

    #[test]
    fn missing_and_extra_frames_are_errors() {
        let ds = two_sequence_dataset();
        let mut kp: Vec<KeypointPrediction> = ds
            .records
            .iter()
            .map(|r| KeypointPrediction::new(&r.sequence_id, r.frame_id, &r.kp2d_gt))
            .collect();
        let last = kp.pop().unwrap();
        assert!(matches!(
            evaluate(&ds, Some(&kp), None),
            Err(MetricsError::MissingFrame { .. })
        ));
        kp.push(last.clone());
        kp.push(KeypointPrediction {
            frame_id: 999,
            ..last
        });
        assert!(matches!(
            evaluate(&ds, Some(&kp), None),
            Err(MetricsError::Unmatched { .. })
        ));
    }

    fn arb_kp() -> impl Strategy<Value = Keypoints2D> {
        prop::array::uniform4(prop::array::uniform2(-100.0f64..100.0))
            .prop_map(Keypoints2D::from_array)
    }

    proptest! {
        #[test]
        fn oks_is_bounded_and_translation_invariant(
            gt in arb_kp(), pred in arb_kp(), area in 1.0f64..1e4,
            dx in -50.0f64..50.0, dy in -50.0f64..50.0,
        ) {
            let o = oks(&gt, &pred, area).unwrap();
            prop_assert!((0.0..=1.0).contains(&o));
            let shift = |k: &Keypoints2D| {
                let mut k = *k;
                for p in k.points.iter_mut() { *p += Vector2::new(dx, dy); }
                k
            };
            let o2 = oks(&shift(&gt), &shift(&pred), area).unwrap();
            prop_assert!((o - o2).abs() <= 1e-9);
        }

        #[test]
        fn oks_is_scale_covariant(gt in arb_kp(), pred in arb_kp(), area in 1.0f64..1e4, s in 0.1f64..10.0) {
            let o = oks(&gt, &pred, area).unwrap();
            let o2 = oks(&gt.scaled(s), &pred.scaled(s), area * s * s).unwrap();
            prop_assert!((o - o2).abs() <= 1e-12);
        }

        #[test]
        fn success_rates_are_ordered(vals in prop::collection::vec(0.0f64..=1.0, 1..50)) {
            let k = keypoint_metrics(&vals).unwrap();
            prop_assert!(k.sr95 <= k.sr90);
            prop_assert!(k.sr90 <= percent_at_least(&vals, 0.90));
            prop_assert!((0.0..=100.0).contains(&k.ap));
        }

        #[test]
        fn angle_error_is_symmetric(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0) {
            let r1 = Pose6DoF::new(rot_z(a) * crate::geometry::rot_x(b), Vector3::zeros());
            let r2 = Pose6DoF::new(crate::geometry::rot_y(c), Vector3::zeros());
            prop_assert!((angle_error_deg(&r1, &r2) - angle_error_deg(&r2, &r1)).abs() <= 1e-9);
            prop_assert_eq!(angle_error_deg(&r1, &r1), 0.0);
            let m = r1.rotation.transpose() * r2.rotation;
            let direct = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos().to_degrees();
            prop_assert!((angle_error_deg(&r1, &r2) - direct).abs() <= 1e-5);
        }
    }
}
