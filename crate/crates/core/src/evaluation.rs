//! Trajectories, sequence-level correction and trajectory error metrics.
//!
//! Conventions: a relative transform `T_t` maps coordinates of camera `t`
//! to camera `t + 1` (the transform used for warping). A trajectory stores
//! world-from-camera poses `G_t` as in KITTI pose files, with `G_0 = I` and
//! `G_{t+1} = G_t * T_t^-1`.

use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{apply_correction, exp_se3, rotation_magnitude, Pose, Twist};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty sequence")]
    Empty,
}

/// World-from-camera poses, starting at the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    /// Re-anchors `poses` so the first one is the identity.
    pub fn from_global(poses: Vec<Pose>) -> Result<Self, EvalError> {
        let first = poses.first().ok_or(EvalError::Empty)?.inverse();
        Ok(Self {
            poses: poses.iter().map(|p| first.compose(p)).collect(),
        })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Relative transforms `T_t = G_{t+1}^-1 * G_t`.
    pub fn relatives(&self) -> Vec<Pose> {
        self.poses.windows(2).map(|w| w[1].inverse().compose(&w[0])).collect()
    }

    /// Cumulative path length at every frame.
    pub fn path_lengths(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.poses.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in self.poses.windows(2) {
            acc += (w[1].translation() - w[0].translation()).norm();
            out.push(acc);
        }
        out
    }
}

/// Chains relative transforms into a trajectory of `relatives.len() + 1`
/// poses.
pub fn compound(relatives: &[Pose]) -> Result<Trajectory, EvalError> {
    if relatives.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut poses = Vec::with_capacity(relatives.len() + 1);
    let mut g = Pose::identity();
    poses.push(g);
    for t in relatives {
        g = g.compose(&t.inverse());
        poses.push(g);
    }
    Ok(Trajectory { poses })
}

/// `T*_t = exp(xi_t) * T_t` per frame. With `rotation_only` the
/// translational part of every correction is zeroed first.
pub fn correct_sequence(
    relatives: &[Pose],
    corrections: &[Twist],
    rotation_only: bool,
) -> Result<Vec<Pose>, EvalError> {
    if relatives.len() != corrections.len() {
        return Err(EvalError::LengthMismatch(relatives.len(), corrections.len()));
    }
    Ok(relatives
        .iter()
        .zip(corrections)
        .map(|(t, xi)| {
            let xi = if rotation_only {
                Twist::new(nalgebra::Vector3::zeros(), xi.rotational)
            } else {
                *xi
            };
            apply_correction(&exp_se3(&xi), t)
        })
        .collect())
}

/// Scales each estimated translation to the ground-truth inter-frame
/// displacement; zero translations are left untouched.
pub fn rescale_monocular(estimated: &[Pose], gt: &Trajectory) -> Result<Vec<Pose>, EvalError> {
    let gt_rel = gt.relatives();
    if estimated.len() != gt_rel.len() {
        return Err(EvalError::LengthMismatch(estimated.len(), gt_rel.len()));
    }
    Ok(estimated
        .iter()
        .zip(&gt_rel)
        .map(|(e, g)| {
            let n = e.translation().norm();
            if n == 0.0 {
                *e
            } else {
                e.with_translation(e.translation() * (g.translation().norm() / n))
            }
        })
        .collect())
}

/// Mean per-frame global error `G_gt^-1 * G_est` without alignment:
/// (metres, degrees).
pub fn mean_ate(est: &Trajectory, gt: &Trajectory) -> Result<(f64, f64), EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    if est.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut t, mut r) = (0.0, 0.0);
    for (e, g) in est.poses.iter().zip(&gt.poses) {
        let d = g.inverse().compose(e);
        t += d.translation().norm();
        r += rotation_magnitude(&d);
    }
    let n = est.len() as f64;
    Ok((t / n, (r / n).to_degrees()))
}

pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentError {
    pub length: f64,
    /// Number of segments of this length; zero when the sequence is too
    /// short.
    pub count: usize,
    /// Percent of segment length.
    pub translation_pct: Option<f64>,
    /// Degrees per 100 m.
    pub rotation_deg_per_100m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentErrorReport {
    pub per_length: Vec<SegmentError>,
    /// Mean over the lengths that had segments.
    pub translation_pct: Option<f64>,
    pub rotation_deg_per_100m: Option<f64>,
}

/// Relative error over path segments: for every start frame and length
/// `L`, the end is the first frame whose ground-truth path length from the
/// start reaches `L`.
pub fn mean_segment_error(
    est: &Trajectory,
    gt: &Trajectory,
    lengths: &[f64],
) -> Result<SegmentErrorReport, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    let dist = gt.path_lengths();
    let n = gt.len();
    let mut per_length = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
        let mut end = 0;
        for start in 0..n {
            end = end.max(start);
            while end < n && dist[end] - dist[start] < len {
                end += 1;
            }
            if end >= n {
                break;
            }
            let rel_gt = gt.poses[start].inverse().compose(&gt.poses[end]);
            let rel_est = est.poses[start].inverse().compose(&est.poses[end]);
            let e = rel_gt.inverse().compose(&rel_est);
            t_sum += e.translation().norm() / len * 100.0;
            r_sum += rotation_magnitude(&e) / len * 100.0 * 180.0 / std::f64::consts::PI;
            count += 1;
        }
        per_length.push(SegmentError {
            length: len,
            count,
            translation_pct: (count > 0).then(|| t_sum / count as f64),
            rotation_deg_per_100m: (count > 0).then(|| r_sum / count as f64),
        });
    }
    let valid: Vec<&SegmentError> = per_length.iter().filter(|s| s.count > 0).collect();
    let mean = |f: fn(&SegmentError) -> f64| {
        (!valid.is_empty()).then(|| valid.iter().map(|s| f(s)).sum::<f64>() / valid.len() as f64)
    };
    Ok(SegmentErrorReport {
        translation_pct: mean(|s| s.translation_pct.unwrap_or(0.0)),
        rotation_deg_per_100m: mean(|s| s.rotation_deg_per_100m.unwrap_or(0.0)),
        per_length,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopClosureConfig {
    /// Metres.
    pub trans_thresh: f64,
    /// Radians.
    pub rot_thresh: f64,
    /// Metres of forward travel between the two frames.
    pub forward_min: f64,
    /// Camera axis counted as forward (0 = x, 1 = y, 2 = z).
    pub forward_axis: usize,
}

impl Default for LoopClosureConfig {
    fn default() -> Self {
        Self {
            trans_thresh: 7.0,
            rot_thresh: 8.5f64.to_radians(),
            forward_min: 10.0,
            forward_axis: 2,
        }
    }
}

/// Number of frames `t` that have a later frame `t + n` within the distance
/// and angle thresholds after at least `forward_min` metres of forward
/// travel; each `t` counts once. Forward travel between the frames is the
/// sum of the per-step camera displacements along the forward axis.
pub fn count_loop_closures(traj: &Trajectory, cfg: &LoopClosureConfig) -> usize {
    let poses = &traj.poses;
    let n = poses.len();
    let step: Vec<f64> = poses
        .windows(2)
        .map(|w| w[0].inverse().compose(&w[1]).translation()[cfg.forward_axis])
        .collect();
    let mut travel = vec![0.0; n];
    for i in 1..n {
        travel[i] = travel[i - 1] + step[i - 1];
    }
    let mut count = 0;
    for t in 0..n {
        let inv_t = poses[t].inverse();
        let hit = (t + 1..n).any(|m| {
            if travel[m] - travel[t] < cfg.forward_min {
                return false;
            }
            let d = inv_t.compose(&poses[m]);
            d.translation().norm() <= cfg.trans_thresh && rotation_magnitude(&d) <= cfg.rot_thresh
        });
        if hit {
            count += 1;
        }
    }
    count
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub segment: SegmentErrorReport,
    pub ate_m: f64,
    pub ate_deg: f64,
}

pub fn evaluate(name: &str, est: &Trajectory, gt: &Trajectory) -> Result<ReportRow, EvalError> {
    let (ate_m, ate_deg) = mean_ate(est, gt)?;
    Ok(ReportRow {
        name: name.to_string(),
        segment: mean_segment_error(est, gt, &SEGMENT_LENGTHS)?,
        ate_m,
        ate_deg,
    })
}

pub const TABLE_COLUMNS: [&str; 5] = ["Sequence", "Trans. (%)", "Rot. (deg/100m)", "m-ATE (m)", "m-ATE (deg)"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Aligned plain-text table with one row per estimate.
pub fn format_table(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                fmt_opt(r.segment.translation_pct),
                fmt_opt(r.segment.rotation_deg_per_100m),
                format!("{:.4}", r.ate_m),
                format!("{:.4}", r.ate_deg),
            ]
        })
        .collect();
    let mut widths = TABLE_COLUMNS.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[String]| {
        let parts: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &TABLE_COLUMNS.map(String::from));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule);
    for row in &cells {
        line(&mut out, row);
    }
    out
}

/// CSV with one line per estimate and segment length, plus summary lines
/// with length `all`.
pub fn format_report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("sequence,length_m,segments,trans_pct,rot_deg_per_100m,ate_m,ate_deg\n");
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.17e}")).unwrap_or_default();
    for r in rows {
        for s in &r.segment.per_length {
            let _ = writeln!(
                out,
                "{},{},{},{},{},,",
                r.name,
                s.length,
                s.count,
                opt(s.translation_pct),
                opt(s.rotation_deg_per_100m)
            );
        }
        let _ = writeln!(
            out,
            "{},all,{},{},{},{:.17e},{:.17e}",
            r.name,
            r.segment.per_length.iter().map(|s| s.count).sum::<usize>(),
            opt(r.segment.translation_pct),
            opt(r.segment.rotation_deg_per_100m),
            r.ate_m,
            r.ate_deg
        );
    }
    out
}

/// `x,z` camera positions for plotting a top view.
pub fn polyline_csv(traj: &Trajectory) -> String {
    let mut out = String::from("x,z\n");
    for p in &traj.poses {
        let _ = writeln!(out, "{},{}", p.translation().x, p.translation().z);
    }
    out
}
