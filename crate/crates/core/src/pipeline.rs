//! Batch evaluation: corrupt → teacher → encode → fuse → head → losses →
//! reconstruction → detection → AP/CE report.
//!
//! Frames are processed independently (in parallel through rayon) and the
//! results are gathered in frame order, so the output does not depend on
//! the thread count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrupt::{CorruptionConfig, CorruptionSuite};
use crate::distill::{loss_dae, loss_dap_heads, loss_daf, loss_kd, KdWeights};
use crate::encode::{
    foreground_mask, fuse_attention_detailed, pillarize, Anchor, DetectHead, FeatureMap, Fusion,
    ForegroundMask, HeadOutput, PILLAR_CHANNELS,
};
use crate::error::{Error, Result};
use crate::eval::{average_precision, nms, DetectionSet, FrameDetections, RobustnessReport};
use crate::io::{BoxRecord, DatasetManifest, Frame};
use crate::recon::{
    build_recon_target, decode_points, loss_occupancy, loss_offsets, ReconTarget, VoxelGrid,
};
use crate::encode::GridSpec;
use crate::rng::{derive_seed, stage};
use crate::scene::{aggregate, points_in_box, transform_points, AgentId, BBox3D, PointCloud, Scene};
use crate::teacher::{build_multiview, make_teacher};

/// Label of the uncorrupted condition.
pub const CLEAN: &str = "clean";

/// Source of the boxes that are scored against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub enum Detector {
    /// Ground-truth boxes scored by the number `n` of student points they
    /// contain: `n / (n + half_count)`.
    Oracle { half_count: f64 },
    /// The seeded linear head, decoded through its anchors.
    Head { max_candidates: usize },
    /// Per-frame JSON box lists at `<dir>/<condition>/<frame_id>.json`.
    External { dir: PathBuf },
}

/// Cloud the reconstruction target is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconSource {
    /// The clean multi-view scene in the ego frame.
    Dense,
    /// The aggregated student inputs of the condition being evaluated.
    Sparse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    /// Root seed for the head weights.
    pub seed: u64,
    /// Collaborators farther than this from the ego are dropped.
    pub range: f64,
    pub grid: GridSpec,
    pub scales: usize,
    pub iou_thresholds: Vec<f64>,
    pub nms_iou: f64,
    pub conf: f64,
    pub kd_weights: KdWeights,
    /// When false the teacher inputs are the student inputs.
    pub teacher: bool,
    pub compute_losses: bool,
    pub recon_source: ReconSource,
    /// Occupancy threshold for decoding reconstructed points.
    pub mask_threshold: f64,
    /// Externally supplied detection loss added to the total.
    pub detect_loss: f64,
    pub detector: Detector,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            range: 70.0,
            grid: GridSpec::default().with_z_ref(-1.0),
            scales: 3,
            iou_thresholds: vec![0.5, 0.7],
            nms_iou: 0.15,
            conf: 0.25,
            kd_weights: KdWeights::default(),
            teacher: true,
            compute_losses: true,
            recon_source: ReconSource::Dense,
            mask_threshold: 0.5,
            detect_loss: 0.0,
            detector: Detector::Oracle { half_count: 30.0 },
        }
    }
}

impl PipelineOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0) {
            return Err(Error::Parameter(format!("range {} must be > 0", self.range)));
        }
        if self.scales == 0 {
            return Err(Error::Parameter("at least one scale is required".into()));
        }
        let factor = 1usize << (self.scales - 1);
        if !self.grid.height().is_multiple_of(factor) || !self.grid.width().is_multiple_of(factor) {
            return Err(Error::Parameter(format!(
                "grid {}×{} is not divisible by {factor} for {} scales",
                self.grid.height(),
                self.grid.width(),
                self.scales
            )));
        }
        if self.iou_thresholds.is_empty()
            || self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return Err(Error::Parameter("IoU thresholds must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.conf) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Parameter("confidence and NMS thresholds must lie in [0, 1]".into()));
        }
        if let Detector::Oracle { half_count } = self.detector {
            if !(half_count > 0.0) {
                return Err(Error::Parameter("oracle half count must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn head(&self) -> DetectHead {
        DetectHead::seeded(
            self.scales * PILLAR_CHANNELS,
            Anchor::default_pair(self.grid.z_ref),
            derive_seed(self.seed, &[stage::HEAD_WEIGHTS]),
        )
    }
}

/// Per-agent clouds in the ego frame, in agent-id order with the ego first.
fn ego_order(scene: &Scene) -> Vec<AgentId> {
    std::iter::once(scene.ego_id())
        .chain(scene.neighbors().map(|(id, _)| *id))
        .collect()
}

/// Student inputs: each agent's cloud, corrupted in its own frame, then
/// mapped into the ego frame.
pub fn student_clouds(
    frame: &Frame,
    scene: &Scene,
    condition: Option<&CorruptionConfig>,
) -> Result<Vec<PointCloud>> {
    let ego_pose = scene.ego().pose;
    ego_order(scene)
        .into_iter()
        .map(|id| {
            let agent = &scene.agents()[&id];
            let cloud = match condition {
                Some(c) => {
                    let n_beams = frame.n_beams.get(&id).copied().unwrap_or(0);
                    c.apply(&agent.cloud, n_beams, frame.frame_id, id.0)?
                }
                None => agent.cloud.clone(),
            };
            transform_points(&cloud, &agent.pose, &ego_pose)
        })
        .collect()
}

/// Painted teacher clouds in the ego frame, ego first.
pub fn teacher_clouds(scene: &Scene) -> Result<Vec<PointCloud>> {
    let teachers = make_teacher(scene)?;
    let ego_pose = scene.ego().pose;
    ego_order(scene)
        .into_iter()
        .map(|id| transform_points(&teachers[&id], &scene.agents()[&id].pose, &ego_pose))
        .collect()
}

/// Encoded view of one set of agent clouds.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: Vec<FeatureMap>,
    pub fusion: Fusion,
    pub head: HeadOutput,
}

pub fn encode_agents(clouds: &[PointCloud], opts: &PipelineOptions, head: &DetectHead) -> Result<Encoded> {
    let features: Vec<FeatureMap> = clouds.iter().map(|c| pillarize(c, &opts.grid)).collect();
    let fusion = fuse_attention_detailed(&features[0], &features[1..], opts.scales)?;
    let head = head.forward(&fusion.fused)?;
    Ok(Encoded {
        features,
        fusion,
        head,
    })
}

/// Reconstruction read off the first-scale fused channels: the point count
/// `n = exp(c₀) − 1` gives occupancy `1 − exp(−n)`, and the mean offsets
/// come from the x/y/z channels.
pub fn recon_prediction(fused: &FeatureMap) -> VoxelGrid {
    let (h, w, _) = fused.shape();
    let z_ref = fused.grid.z_ref;
    let mut occupancy = Array2::zeros((h, w));
    let mut offsets = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let f = fused.data.slice(s![r, c, ..]);
            let n = (f[0].exp() - 1.0).max(0.0);
            occupancy[[r, c]] = 1.0 - (-n).exp();
            offsets[[r, c, 0]] = f[1];
            offsets[[r, c, 1]] = f[2];
            offsets[[r, c, 2]] = if n > 0.0 { f[3] - z_ref } else { 0.0 };
        }
    }
    VoxelGrid {
        grid: fused.grid,
        occupancy,
        offsets,
    }
}

/// Every intermediate tensor the losses are computed from.
#[derive(Debug, Clone)]
pub struct FrameTensors {
    pub frame_id: u64,
    pub condition: String,
    pub gt_boxes: Vec<BBox3D>,
    pub student_clouds: Vec<PointCloud>,
    pub teacher_clouds: Vec<PointCloud>,
    pub masks: Vec<ForegroundMask>,
    pub student: Encoded,
    pub teacher: Encoded,
    pub recon_pred: VoxelGrid,
    pub recon_target: ReconTarget,
}

/// One row of the loss table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub condition: String,
    pub frame_id: u64,
    pub l_d: f64,
    pub l_h: f64,
    pub l_p: f64,
    pub l_kd: f64,
    /// Absent when the reconstruction target has no occupied voxel.
    pub l_m: Option<f64>,
    pub l_o: Option<f64>,
    pub l_rec: Option<f64>,
    pub l_detect: f64,
    pub l_total: f64,
    pub student_points: usize,
    pub teacher_points: usize,
    pub recon_points: usize,
}

impl FrameTensors {
    pub fn losses(&self, opts: &PipelineOptions) -> Result<LossRow> {
        let l_d = loss_dae(&self.teacher.features, &self.student.features, &self.masks)?;
        let l_h = loss_daf(&self.teacher.fusion.fused, &self.student.fusion.fused)?;
        let l_p = loss_dap_heads(&self.teacher.head, &self.student.head)?;
        let l_kd = loss_kd(&l_d, &l_h, &l_p, opts.kd_weights)?;
        let (l_m, l_o) = if self.recon_target.n_foreground > 0 {
            (
                Some(loss_occupancy(&self.recon_pred.occupancy, &self.recon_target)?.value),
                Some(loss_offsets(&self.recon_pred.offsets, &self.recon_target)?.value),
            )
        } else {
            (None, None)
        };
        let l_rec = l_m.zip(l_o).map(|(m, o)| m + o);
        Ok(LossRow {
            condition: self.condition.clone(),
            frame_id: self.frame_id,
            l_d: l_d.value,
            l_h: l_h.value,
            l_p: l_p.value,
            l_kd: l_kd.value,
            l_m,
            l_o,
            l_rec,
            l_detect: opts.detect_loss,
            l_total: opts.detect_loss + l_kd.value + l_rec.unwrap_or(0.0),
            student_points: self.student_clouds.iter().map(PointCloud::len).sum(),
            teacher_points: self.teacher_clouds.iter().map(PointCloud::len).sum(),
            recon_points: decode_points(&self.recon_pred, opts.mask_threshold).len(),
        })
    }
}

/// Ground truth restricted to boxes whose center lies on the grid.
fn gt_on_grid(scene: &Scene, grid: &GridSpec) -> Vec<BBox3D> {
    scene
        .gt_boxes()
        .iter()
        .filter(|b| grid.cell_of(b.center.x, b.center.y).is_some())
        .copied()
        .collect()
}

/// Builds the tensors for one frame under one condition. `teacher` and
/// `dense_target` may be precomputed from the clean scene.
fn build_tensors(
    frame: &Frame,
    scene: &Scene,
    condition: Option<&CorruptionConfig>,
    teacher: Option<&(Vec<PointCloud>, Encoded)>,
    dense_target: Option<&ReconTarget>,
    opts: &PipelineOptions,
    head: &DetectHead,
) -> Result<FrameTensors> {
    let gt_boxes = gt_on_grid(scene, &opts.grid);
    let students = student_clouds(frame, scene, condition)?;
    let student = encode_agents(&students, opts, head)?;
    let (teacher_clouds, teacher) = match teacher {
        Some((c, e)) => (c.clone(), e.clone()),
        None => (students.clone(), student.clone()),
    };
    let recon_target = match dense_target {
        Some(t) => t.clone(),
        None => build_recon_target(&aggregate(&students)?.without_semantic(), &opts.grid),
    };
    let mask = foreground_mask(&gt_boxes, &opts.grid);
    let recon_pred = recon_prediction(&student.fusion.fused.slice_channels(0, PILLAR_CHANNELS)?);
    Ok(FrameTensors {
        frame_id: frame.frame_id,
        condition: condition.map_or_else(|| CLEAN.to_string(), CorruptionConfig::label),
        gt_boxes,
        masks: vec![mask; students.len()],
        student_clouds: students,
        teacher_clouds,
        student,
        teacher,
        recon_pred,
        recon_target,
    })
}

/// Tensors for every condition of one frame (clean first, then the suite in
/// order), after range gating.
pub fn frame_tensors(
    frame: &Frame,
    suite: &CorruptionSuite,
    opts: &PipelineOptions,
) -> Result<Vec<FrameTensors>> {
    let head = opts.head();
    let scene = frame.scene.gate_by_range(opts.range);
    let teacher = if opts.teacher {
        let clouds = teacher_clouds(&scene)?;
        let encoded = encode_agents(&clouds, opts, &head)?;
        Some((clouds, encoded))
    } else {
        None
    };
    let dense_target = match opts.recon_source {
        ReconSource::Dense => Some(build_recon_target(
            &build_multiview(&scene)?.without_semantic(),
            &opts.grid,
        )),
        ReconSource::Sparse => None,
    };
    std::iter::once(None)
        .chain(suite.corruptions.iter().map(Some))
        .map(|c| build_tensors(frame, &scene, c, teacher.as_ref(), dense_target.as_ref(), opts, &head))
        .collect()
}

/// Ground-truth boxes scored by how many student points fall inside them.
pub fn oracle_detections(gt: &[BBox3D], merged: &PointCloud, half_count: f64) -> Result<Vec<BBox3D>> {
    gt.iter()
        .map(|b| {
            let n = points_in_box(merged, b).iter().filter(|&&x| x).count() as f64;
            b.with_score(n / (n + half_count))
        })
        .collect()
}

fn external_detections(dir: &Path, condition: &str, frame_id: u64) -> Result<Vec<BBox3D>> {
    let path = dir.join(condition).join(format!("{frame_id}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records: Vec<BoxRecord> =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    records
        .iter()
        .map(|r| {
            if r.score.is_none() {
                return Err(Error::format(&path, "prediction without a score"));
            }
            r.to_box()
        })
        .collect()
}

fn detect(
    frame: &Frame,
    scene: &Scene,
    condition: Option<&CorruptionConfig>,
    opts: &PipelineOptions,
    head: &DetectHead,
) -> Result<FrameDetections> {
    let gt = gt_on_grid(scene, &opts.grid);
    let label = condition.map_or_else(|| CLEAN.to_string(), CorruptionConfig::label);
    let raw = match &opts.detector {
        Detector::Oracle { half_count } => {
            let merged = aggregate(&student_clouds(frame, scene, condition)?)?;
            oracle_detections(&gt, &merged, *half_count)?
        }
        Detector::Head { max_candidates } => {
            let students = student_clouds(frame, scene, condition)?;
            let enc = encode_agents(&students, opts, head)?;
            head.decode(&enc.head, &opts.grid, opts.conf, *max_candidates)
        }
        Detector::External { dir } => external_detections(dir, &label, frame.frame_id)?,
    };
    Ok(FrameDetections {
        frame_id: frame.frame_id,
        predictions: nms(&raw, opts.nms_iou, opts.conf),
        ground_truth: gt,
    })
}

/// Per-frame outcome for every condition, clean first.
#[derive(Debug, Clone)]
struct FrameOutcome {
    detections: Vec<FrameDetections>,
    losses: Vec<LossRow>,
}

fn process_frame(frame: &Frame, suite: &CorruptionSuite, opts: &PipelineOptions) -> Result<FrameOutcome> {
    let head = opts.head();
    let scene = frame.scene.gate_by_range(opts.range);
    let conditions: Vec<Option<&CorruptionConfig>> =
        std::iter::once(None).chain(suite.corruptions.iter().map(Some)).collect();
    let detections = conditions
        .iter()
        .map(|c| detect(frame, &scene, *c, opts, &head))
        .collect::<Result<Vec<_>>>()?;
    let losses = if opts.compute_losses {
        frame_tensors(frame, suite, opts)?
            .iter()
            .map(|t| t.losses(opts))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(FrameOutcome { detections, losses })
}

/// Loss rows plus per-condition means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTable {
    pub rows: Vec<LossRow>,
}

/// Mean of every loss over the frames of one condition. Reconstruction
/// terms average over the frames where they are defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossMeans {
    pub frames: usize,
    pub l_d: f64,
    pub l_h: f64,
    pub l_p: f64,
    pub l_kd: f64,
    pub l_m: Option<f64>,
    pub l_o: Option<f64>,
    pub l_rec: Option<f64>,
    pub l_detect: f64,
    pub l_total: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl LossTable {
    pub fn means(&self) -> BTreeMap<String, LossMeans> {
        let mut by: BTreeMap<String, Vec<&LossRow>> = BTreeMap::new();
        for r in &self.rows {
            by.entry(r.condition.clone()).or_default().push(r);
        }
        by.into_iter()
            .map(|(k, rows)| {
                let m = |f: fn(&LossRow) -> f64| mean(rows.iter().map(|r| f(r))).unwrap_or(0.0);
                let mo = |f: fn(&LossRow) -> Option<f64>| mean(rows.iter().filter_map(|r| f(r)));
                (
                    k,
                    LossMeans {
                        frames: rows.len(),
                        l_d: m(|r| r.l_d),
                        l_h: m(|r| r.l_h),
                        l_p: m(|r| r.l_p),
                        l_kd: m(|r| r.l_kd),
                        l_m: mo(|r| r.l_m),
                        l_o: mo(|r| r.l_o),
                        l_rec: mo(|r| r.l_rec),
                        l_detect: m(|r| r.l_detect),
                        l_total: m(|r| r.l_total),
                    },
                )
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            mean: BTreeMap<String, LossMeans>,
            rows: &'a [LossRow],
        }
        let mut s = serde_json::to_string_pretty(&Doc {
            mean: self.means(),
            rows: &self.rows,
        })
        .expect("loss table serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: RobustnessReport,
    pub losses: LossTable,
    /// Post-NMS detections per condition.
    pub detections: BTreeMap<String, DetectionSet>,
}

/// Runs every frame produced by `load(0..n_frames)`. Errors name the frame;
/// when several frames fail, the earliest one is reported.
pub fn run_pipeline_with<F>(
    n_frames: usize,
    load: F,
    suite: &CorruptionSuite,
    opts: &PipelineOptions,
) -> Result<PipelineOutput>
where
    F: Fn(usize) -> Result<Frame> + Sync,
{
    opts.validate()?;
    suite.validate()?;
    let outcomes: Vec<Result<FrameOutcome>> = (0..n_frames)
        .into_par_iter()
        .map(|i| {
            let frame = load(i)?;
            process_frame(&frame, suite, opts).map_err(|e| e.in_frame(frame.frame_id))
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let labels: Vec<String> = std::iter::once(CLEAN.to_string())
        .chain(suite.corruptions.iter().map(CorruptionConfig::label))
        .collect();
    let mut detections: BTreeMap<String, DetectionSet> = BTreeMap::new();
    for (k, label) in labels.iter().enumerate() {
        let set = DetectionSet {
            frames: outcomes.iter().map(|o| o.detections[k].clone()).collect(),
        };
        detections.insert(label.clone(), set);
    }
    let ap_of = |label: &str| -> Result<Vec<f64>> {
        opts.iou_thresholds
            .iter()
            .map(|&t| average_precision(&detections[label], t))
            .collect()
    };
    let ap_clean = ap_of(CLEAN)?;
    let mut per = BTreeMap::new();
    for label in &labels[1..] {
        per.insert(label.clone(), ap_of(label)?);
    }
    let report = RobustnessReport::from_aps(opts.iou_thresholds.clone(), ap_clean, per)?;
    let rows = outcomes.into_iter().flat_map(|o| o.losses).collect();
    Ok(PipelineOutput {
        report,
        losses: LossTable { rows },
        detections,
    })
}

pub fn run_pipeline(frames: &[Frame], suite: &CorruptionSuite, opts: &PipelineOptions) -> Result<PipelineOutput> {
    run_pipeline_with(frames.len(), |i| Ok(frames[i].clone()), suite, opts)
}

/// Loads frames from `manifest` lazily inside the workers.
pub fn run_manifest(
    manifest: &DatasetManifest,
    suite: &CorruptionSuite,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    run_pipeline_with(manifest.frames.len(), |i| manifest.load_frame(i), suite, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrupt::{Corruption, CorruptionKind};
    use crate::io::{generate_dataset, SynthSpec};

    fn frames(n: usize) -> Vec<Frame> {
        let spec = SynthSpec {
            n_objects: 5,
            points_per_beam: 120,
            n_beams: 16,
            seed: 11,
            ..SynthSpec::default()
        };
        generate_dataset(&spec, n).unwrap()
    }

    fn small_opts() -> PipelineOptions {
        PipelineOptions {
            grid: GridSpec::new((-48.0, 48.0), (-48.0, 48.0), 0.8).unwrap().with_z_ref(-1.0),
            ..PipelineOptions::default()
        }
    }

    #[test]
    fn empty_suite_reports_only_clean() {
        let out = run_pipeline(&frames(2), &CorruptionSuite::default(), &small_opts()).unwrap();
        assert!(out.report.ap_per_corruption.is_empty());
        assert!(out.report.ce_per_corruption.is_empty());
        assert!(out.report.mce.is_none());
        assert_eq!(out.report.ap_clean.len(), 2);
        assert_eq!(out.losses.rows.len(), 2);
    }

    #[test]
    fn identity_crosstalk_matches_clean() {
        let suite = CorruptionSuite {
            corruptions: vec![CorruptionConfig::new(
                Corruption::Crosstalk { fraction: 0.0, sigma: 3.0 },
                1,
            )],
        };
        let opts = PipelineOptions { compute_losses: false, ..small_opts() };
        let out = run_pipeline(&frames(2), &suite, &opts).unwrap();
        assert_eq!(out.report.ap_per_corruption["crosstalk"], out.report.ap_clean);
        assert_eq!(out.report.mce, Some(vec![0.0, 0.0]));
    }

    #[test]
    fn disabled_teacher_gives_zero_distillation() {
        let opts = PipelineOptions { teacher: false, ..small_opts() };
        let out = run_pipeline(&frames(1), &CorruptionSuite::default(), &opts).unwrap();
        let row = &out.losses.rows[0];
        assert_eq!((row.l_d, row.l_h, row.l_p, row.l_kd), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn recon_target_source() {
        let suite = CorruptionSuite {
            corruptions: vec![CorruptionConfig::new(Corruption::standard(CorruptionKind::MotionBlur), 0)],
        };
        let f = &frames(1)[0];
        let dense = frame_tensors(f, &suite, &small_opts()).unwrap();
        // the dense target is shared by every condition
        assert!(dense.iter().all(|t| t.recon_target == dense[0].recon_target));
        let sparse_opts = PipelineOptions { recon_source: ReconSource::Sparse, ..small_opts() };
        let sparse = frame_tensors(f, &suite, &sparse_opts).unwrap();
        // clean student inputs already make up the whole multi-view scene
        let (a, b) = (&sparse[0].recon_target, &dense[0].recon_target);
        assert_eq!(a.occupancy, b.occupancy);
        assert!((&a.offsets - &b.offsets).iter().all(|d| d.abs() < 1e-12));
        assert_ne!(sparse[1].recon_target.occupancy, dense[1].recon_target.occupancy);
    }

    #[test]
    fn errors_name_the_frame() {
        let opts = PipelineOptions {
            detector: Detector::External { dir: PathBuf::from("/nonexistent") },
            compute_losses: false,
            ..small_opts()
        };
        let err = run_pipeline(&frames(1), &CorruptionSuite::default(), &opts).unwrap_err();
        assert!(err.to_string().starts_with("frame 0:"), "{err}");
    }

    #[test]
    fn rejects_bad_options() {
        let opts = PipelineOptions { scales: 9, ..small_opts() };
        assert!(run_pipeline(&frames(1), &CorruptionSuite::default(), &opts).is_err());
    }
}
