//! Detection metrics: rotated BEV IoU, NMS, average precision, and the
//! corruption-error summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::BBox3D;

fn cross(o: &Point2<f64>, a: &Point2<f64>, b: &Point2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Shoelace area of a simple polygon (positive for counter-clockwise).
pub fn polygon_area(poly: &[Point2<f64>]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (&poly[i], &poly[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
}

fn line_intersection(s: &Point2<f64>, e: &Point2<f64>, a: &Point2<f64>, b: &Point2<f64>) -> Point2<f64> {
    let ds = cross(a, b, s);
    let de = cross(a, b, e);
    let t = ds / (ds - de);
    s + (e - s) * t
}

/// Clips `subject` by the convex counter-clockwise polygon `clip`
/// (Sutherland–Hodgman, one half-plane per clip edge).
pub fn clip_convex(subject: &[Point2<f64>], clip: &[Point2<f64>]) -> Vec<Point2<f64>> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (&clip[i], &clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let s = &input[(j + input.len() - 1) % input.len()];
            let e = &input[j];
            let (s_in, e_in) = (cross(a, b, s) >= 0.0, cross(a, b, e) >= 0.0);
            if e_in {
                if !s_in {
                    out.push(line_intersection(s, e, a, b));
                }
                out.push(*e);
            } else if s_in {
                out.push(line_intersection(s, e, a, b));
            }
        }
    }
    out
}

/// Intersection-over-union of the boxes' yaw-rotated BEV footprints.
pub fn iou_bev(a: &BBox3D, b: &BBox3D) -> f64 {
    let pa = a.bev_corners();
    let pb = b.bev_corners();
    let inter = polygon_area(&clip_convex(&pa, &pb)).max(0.0);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn score_of(b: &BBox3D) -> f64 {
    b.score.unwrap_or(1.0)
}

/// Indices kept by greedy NMS, in keep order. Boxes without a score count
/// as score 1.
pub fn nms_indices(dets: &[BBox3D], iou_thr: f64, conf_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| score_of(&dets[i]) >= conf_thr)
        .collect();
    // stable: equal scores keep input order
    order.sort_by(|&i, &j| score_of(&dets[j]).total_cmp(&score_of(&dets[i])));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou_bev(&dets[i], &dets[j]) > iou_thr {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Confidence filtering plus greedy non-maximum suppression.
pub fn nms(dets: &[BBox3D], iou_thr: f64, conf_thr: f64) -> Vec<BBox3D> {
    nms_indices(dets, iou_thr, conf_thr)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Predictions and ground truth of one frame, both in the ego frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameDetections {
    pub frame_id: u64,
    pub predictions: Vec<BBox3D>,
    pub ground_truth: Vec<BBox3D>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSet {
    pub frames: Vec<FrameDetections>,
}

impl DetectionSet {
    pub fn n_ground_truth(&self) -> usize {
        self.frames.iter().map(|f| f.ground_truth.len()).sum()
    }
}

/// True/false-positive flag for every prediction, in descending score order
/// (ties keep frame then input order).
pub fn match_detections(set: &DetectionSet, iou_thr: f64) -> Vec<(f64, bool)> {
    let mut pooled: Vec<(f64, usize, usize)> = set
        .frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| {
            fr.predictions
                .iter()
                .enumerate()
                .map(move |(i, b)| (score_of(b), f, i))
        })
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut matched: Vec<Vec<bool>> = set
        .frames
        .iter()
        .map(|f| vec![false; f.ground_truth.len()])
        .collect();
    pooled
        .into_iter()
        .map(|(score, f, i)| {
            let frame = &set.frames[f];
            let pred = &frame.predictions[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in frame.ground_truth.iter().enumerate() {
                if matched[f][g] {
                    continue;
                }
                let iou = iou_bev(pred, gt);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    matched[f][g] = true;
                    (score, true)
                }
                None => (score, false),
            }
        })
        .collect()
}

/// All-point interpolated average precision at one IoU threshold.
pub fn average_precision(set: &DetectionSet, iou_thr: f64) -> Result<f64> {
    let n_gt = set.n_ground_truth();
    if n_gt == 0 {
        return Err(Error::UndefinedAp);
    }
    let flags = match_detections(set, iou_thr);
    let mut tp = 0usize;
    let mut precision: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(k, &(_, is_tp))| {
            tp += is_tp as usize;
            tp as f64 / (k + 1) as f64
        })
        .collect();
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    // recall rises by exactly 1/n_gt at each true positive
    let area: f64 = flags
        .iter()
        .zip(&precision)
        .filter(|((_, is_tp), _)| *is_tp)
        .map(|(_, p)| p)
        .sum();
    Ok(area / n_gt as f64)
}

/// Relative AP drop `(clean − corrupt) / clean`.
pub fn corruption_error(ap_clean: f64, ap_corrupt: f64) -> Result<f64> {
    if !(ap_clean > 0.0) {
        return Err(Error::ZeroCleanAp(ap_clean));
    }
    Ok((ap_clean - ap_corrupt) / ap_clean)
}

pub fn mean_ce(ces: &[f64]) -> Result<f64> {
    if ces.is_empty() {
        return Err(Error::Parameter("mean CE needs at least one corruption".into()));
    }
    Ok(ces.iter().sum::<f64>() / ces.len() as f64)
}

/// Clean and corrupted AP with CE/mCE. Vectors align with `iou_thresholds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub iou_thresholds: Vec<f64>,
    pub ap_clean: Vec<f64>,
    pub ap_per_corruption: BTreeMap<String, Vec<f64>>,
    pub ce_per_corruption: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mce: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_corrupt: Option<Vec<f64>>,
}

impl RobustnessReport {
    pub fn from_aps(
        iou_thresholds: Vec<f64>,
        ap_clean: Vec<f64>,
        ap_per_corruption: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let n = iou_thresholds.len();
        if ap_clean.len() != n || ap_per_corruption.values().any(|v| v.len() != n) {
            return Err(Error::Shape("AP vectors must align with IoU thresholds".into()));
        }
        let mut ce_per_corruption = BTreeMap::new();
        for (name, aps) in &ap_per_corruption {
            let ce = aps
                .iter()
                .zip(&ap_clean)
                .map(|(&c, &clean)| corruption_error(clean, c))
                .collect::<Result<Vec<_>>>()?;
            ce_per_corruption.insert(name.clone(), ce);
        }
        let (mce, map_corrupt) = if ap_per_corruption.is_empty() {
            (None, None)
        } else {
            let column = |m: &BTreeMap<String, Vec<f64>>, t: usize| {
                m.values().map(|v| v[t]).collect::<Vec<_>>()
            };
            (
                Some((0..n).map(|t| mean_ce(&column(&ce_per_corruption, t))).collect::<Result<_>>()?),
                Some((0..n).map(|t| mean_ce(&column(&ap_per_corruption, t))).collect::<Result<_>>()?),
            )
        };
        Ok(Self {
            iou_thresholds,
            ap_clean,
            ap_per_corruption,
            ce_per_corruption,
            mce,
            map_corrupt,
        })
    }

    /// Unions the corruption entries of several runs that share the same
    /// thresholds and clean AP.
    pub fn merge(reports: &[RobustnessReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Parameter("no reports to merge".into()))?;
        let mut aps: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in reports {
            if r.iou_thresholds != first.iou_thresholds {
                return Err(Error::Parameter("reports use different IoU thresholds".into()));
            }
            if r.ap_clean
                .iter()
                .zip(&first.ap_clean)
                .any(|(a, b)| (a - b).abs() > 1e-12)
            {
                return Err(Error::Parameter("reports disagree on clean AP".into()));
            }
            for (name, v) in &r.ap_per_corruption {
                if let Some(prev) = aps.get(name) {
                    if prev != v {
                        return Err(Error::Parameter(format!(
                            "corruption '{name}' appears with different AP values"
                        )));
                    }
                }
                aps.insert(name.clone(), v.clone());
            }
        }
        Self::from_aps(first.iou_thresholds.clone(), first.ap_clean.clone(), aps)
    }

    /// Corruption names ordered by descending CE at threshold `t`.
    pub fn ranked_by_ce(&self, t: usize) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = self
            .ce_per_corruption
            .iter()
            .map(|(k, ce)| (k.clone(), ce[t]))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }
}

/// Grouped bar chart of AP (clean + each corruption) per IoU threshold.
pub fn ap_bar_chart_svg(report: &RobustnessReport) -> String {
    const PALETTE: [&str; 4] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759"];
    let mut groups: Vec<(&str, &[f64])> = vec![("clean", report.ap_clean.as_slice())];
    groups.extend(
        report
            .ap_per_corruption
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_slice())),
    );
    let n_thr = report.iou_thresholds.len().max(1);
    let (bar_w, gap, left, top, plot_h) = (18.0, 24.0, 50.0, 30.0, 220.0);
    let group_w = bar_w * n_thr as f64 + gap;
    let width = left + group_w * groups.len() as f64 + 20.0;
    let height = top + plot_h + 90.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<text x="{left}" y="18">AP per corruption</text>"#);
    for tick in 0..=4 {
        let v = tick as f64 * 0.25;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            width - 20.0,
            left - 6.0,
            y + 4.0
        );
    }
    for (g, (name, aps)) in groups.iter().enumerate() {
        let x0 = left + gap / 2.0 + g as f64 * group_w;
        for (t, ap) in aps.iter().enumerate() {
            let h = plot_h * ap.clamp(0.0, 1.0);
            let _ = writeln!(
                svg,
                r#"<rect x="{:.1}" y="{:.1}" width="{bar_w}" height="{h:.1}" fill="{}"><title>{name} AP@{}: {ap:.4}</title></rect>"#,
                x0 + t as f64 * bar_w,
                top + plot_h - h,
                PALETTE[t % PALETTE.len()],
                report.iou_thresholds.get(t).copied().unwrap_or(f64::NAN),
            );
        }
        let lx = x0 + bar_w * n_thr as f64 / 2.0;
        let ly = top + plot_h + 12.0;
        let _ = writeln!(
            svg,
            r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-40 {lx:.1} {ly:.1})">{name}</text>"#
        );
    }
    for (t, thr) in report.iou_thresholds.iter().enumerate() {
        let x = left + t as f64 * 80.0;
        let y = height - 12.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{y:.1}">AP@{thr}</text>"#,
            y - 9.0,
            PALETTE[t % PALETTE.len()],
            x + 14.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
