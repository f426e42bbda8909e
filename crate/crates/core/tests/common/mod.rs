//! Fixtures and independent reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use collab_robust::eval::{DetectionSet, FrameDetections};
use collab_robust::scene::rotation_about;
use collab_robust::{BBox3D, PointCloud, Pose};
use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_pose(rng: &mut impl Rng) -> Pose {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ) + Vector3::new(0.0, 0.0, 1e-3);
    let r = rotation_about(axis, rng.random_range(-3.1..3.1));
    let t = Vector3::new(
        rng.random_range(-50.0..50.0),
        rng.random_range(-50.0..50.0),
        rng.random_range(-5.0..5.0),
    );
    Pose::new(r, t).expect("rotation is orthonormal")
}

pub fn random_yaw_pose(rng: &mut impl Rng) -> Pose {
    Pose::from_yaw(
        rng.random_range(-3.1..3.1),
        Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-2.0..2.0)),
    )
}

pub fn random_box(rng: &mut impl Rng, spread: f64) -> BBox3D {
    BBox3D::new(
        Point3::new(rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-1.0..1.0)),
        Vector3::new(rng.random_range(0.5..5.0), rng.random_range(0.5..5.0), rng.random_range(0.5..2.0)),
        rng.random_range(-3.1..3.1),
    )
    .expect("valid box")
}

pub fn random_cloud(rng: &mut impl Rng, n: usize, spread: f64) -> PointCloud {
    let pts = (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
                rng.random_range(-3.0..3.0),
            )
        })
        .collect();
    let refl = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    PointCloud::new(pts, refl).expect("finite cloud")
}

// ---------------------------------------------------------------- IoU oracle

type P2 = (f64, f64);

/// Footprint corners computed directly from center, size and yaw.
pub fn corners(b: &BBox3D) -> Vec<P2> {
    let (s, c) = b.yaw.sin_cos();
    let (hw, hl) = (b.size.x / 2.0, b.size.y / 2.0);
    [(-hw, -hl), (hw, -hl), (hw, hl), (-hw, hl)]
        .iter()
        .map(|&(u, v)| (b.center.x + c * u - s * v, b.center.y + s * u + c * v))
        .collect()
}

fn orient(a: P2, b: P2, c: P2) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn inside_convex(p: P2, poly: &[P2]) -> bool {
    (0..poly.len()).all(|i| orient(poly[i], poly[(i + 1) % poly.len()], p) >= -1e-12)
}

fn segment_intersection(a: P2, b: P2, c: P2, d: P2) -> Option<P2> {
    let r = (b.0 - a.0, b.1 - a.1);
    let s = (d.0 - c.0, d.1 - c.1);
    let den = r.0 * s.1 - r.1 * s.0;
    if den.abs() < 1e-15 {
        return None;
    }
    let t = ((c.0 - a.0) * s.1 - (c.1 - a.1) * s.0) / den;
    let u = ((c.0 - a.0) * r.1 - (c.1 - a.1) * r.0) / den;
    ((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)).then_some((a.0 + t * r.0, a.1 + t * r.1))
}

/// Andrew's monotone chain.
fn convex_hull(mut pts: Vec<P2>) -> Vec<P2> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<P2> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && orient(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<P2> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && orient(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn area(poly: &[P2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| poly[i].0 * poly[(i + 1) % n].1 - poly[(i + 1) % n].0 * poly[i].1)
        .sum::<f64>()
        .abs()
        / 2.0
}

/// BEV IoU via the hull of mutually contained corners and edge crossings.
pub fn oracle_iou(a: &BBox3D, b: &BBox3D) -> f64 {
    let (pa, pb) = (corners(a), corners(b));
    let mut pts: Vec<P2> = pa.iter().copied().filter(|&p| inside_convex(p, &pb)).collect();
    pts.extend(pb.iter().copied().filter(|&p| inside_convex(p, &pa)));
    for i in 0..4 {
        for j in 0..4 {
            if let Some(p) = segment_intersection(pa[i], pa[(i + 1) % 4], pb[j], pb[(j + 1) % 4]) {
                pts.push(p);
            }
        }
    }
    let inter = area(&convex_hull(pts));
    let union = a.size.x * a.size.y + b.size.x * b.size.y - inter;
    inter / union
}

/// Containment from footprint edge orientations and the vertical extent.
pub fn oracle_contains(b: &BBox3D, p: &Point3<f64>) -> bool {
    let c = corners(b);
    let inside_footprint = (0..4).all(|i| orient(c[i], c[(i + 1) % 4], (p.x, p.y)) >= 0.0);
    inside_footprint && (p.z - b.center.z).abs() <= b.size.z / 2.0
}

// ----------------------------------------------------------------- AP oracle

/// Ground truth plus jittered copies and clutter, with scores on a coarse
/// grid so that ties occur.
pub fn random_instance(seed: u64) -> Vec<(Vec<BBox3D>, Vec<BBox3D>)> {
    let mut rng = rng(seed);
    let n_frames = rng.random_range(1..4);
    (0..n_frames)
        .map(|_| {
            let n_gt = rng.random_range(1..8);
            let gt: Vec<BBox3D> = (0..n_gt).map(|_| random_box(&mut rng, 15.0)).collect();
            let mut preds = Vec::new();
            for g in &gt {
                for _ in 0..rng.random_range(0..3) {
                    let b = BBox3D::new(
                        g.center + Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), 0.0),
                        g.size.component_mul(&Vector3::new(rng.random_range(0.8..1.2), rng.random_range(0.8..1.2), 1.0)),
                        g.yaw + rng.random_range(-0.3..0.3),
                    )
                    .unwrap();
                    preds.push(b);
                }
            }
            for _ in 0..rng.random_range(0..5) {
                preds.push(random_box(&mut rng, 15.0));
            }
            preds.truncate(20);
            let preds = preds
                .into_iter()
                .map(|b| b.with_score((rng.random_range(0..=20) as f64) / 20.0).unwrap())
                .collect();
            (preds, gt)
        })
        .collect()
}

pub fn to_set(frames: &[(Vec<BBox3D>, Vec<BBox3D>)]) -> DetectionSet {
    DetectionSet {
        frames: frames
            .iter()
            .enumerate()
            .map(|(i, (p, g))| FrameDetections { frame_id: i as u64, predictions: p.clone(), ground_truth: g.clone() })
            .collect(),
    }
}

/// AP by explicit PR-curve enumeration: rank, match, list the (recall,
/// precision) points, then integrate the precision envelope over every
/// recall step.
pub fn brute_force_ap(frames: &[(Vec<BBox3D>, Vec<BBox3D>)], thr: f64) -> f64 {
    let n_gt: usize = frames.iter().map(|f| f.1.len()).sum();
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (f, (preds, _)) in frames.iter().enumerate() {
        for (i, p) in preds.iter().enumerate() {
            ranked.push((p.score.unwrap(), f, i));
        }
    }
    // insertion sort keeps ties in (frame, index) order
    for i in 1..ranked.len() {
        let mut j = i;
        while j > 0 && ranked[j - 1].0 < ranked[j].0 {
            ranked.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut used: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.1.len()]).collect();
    let mut curve: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for &(_, f, i) in &ranked {
        seen += 1;
        let pred = &frames[f].0[i];
        let mut best = None;
        let mut best_iou = thr;
        for (g, gt) in frames[f].1.iter().enumerate() {
            let iou = oracle_iou(pred, gt);
            if !used[f][g] && iou >= best_iou && best.is_none_or(|_| iou > best_iou) {
                best = Some(g);
                best_iou = iou;
            }
        }
        if let Some(g) = best {
            used[f][g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / seen as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..curve.len() {
        let r = curve[k].0;
        if r > prev_recall {
            let env = curve[k..].iter().map(|c| c.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * env;
            prev_recall = r;
        }
    }
    ap
}

// ------------------------------------------------------ finite differences

/// Central differences of a scalar function of a flat vector.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + eps;
            let plus = f(&work);
            work[i] = x[i] - eps;
            let minus = f(&work);
            work[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(g, n)| (g - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

// -------------------------------------------------------- gradient fixtures

use collab_robust::distill::{loss_daf, loss_dae, loss_dap, LossValue};
use collab_robust::encode::{FeatureMap, ForegroundMask, GridSpec, BOX_PARAMS};
use collab_robust::recon::{loss_occupancy, loss_offsets, ReconTarget};
use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradLoss {
    Encoder,
    Fused,
    Prediction,
    Occupancy,
    Offsets,
}

impl GradLoss {
    pub const ALL: [GradLoss; 5] = [
        GradLoss::Encoder,
        GradLoss::Fused,
        GradLoss::Prediction,
        GradLoss::Occupancy,
        GradLoss::Offsets,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradLoss::Encoder => "L_d",
            GradLoss::Fused => "L_h",
            GradLoss::Prediction => "L_p",
            GradLoss::Occupancy => "L_m",
            GradLoss::Offsets => "L_o",
        }
    }
}

pub const FD_EPSILON: f64 = 1e-5;

type LossFn = Box<dyn Fn(&[ArrayD<f64>]) -> collab_robust::Result<LossValue>>;

fn unit_grid(h: usize, w: usize) -> GridSpec {
    GridSpec::new((0.0, w as f64), (0.0, h as f64), 1.0).unwrap()
}

fn uniform3(rng: &mut impl Rng, dim: (usize, usize, usize), lo: f64, hi: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(dim, || rng.random_range(lo..hi))
}

/// A student map whose every cell differs from the teacher by at least
/// `0.05` in Euclidean norm, keeping away from the kink of ‖·‖₂.
fn separated_student(rng: &mut impl Rng, teacher: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = teacher.dim();
    let mut s = Array3::zeros((h, w, c));
    for r in 0..h {
        for q in 0..w {
            loop {
                let cell: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = (0..c).map(|k| (cell[k] - teacher[[r, q, k]]).powi(2)).sum::<f64>().sqrt();
                if norm >= 0.05 {
                    for k in 0..c {
                        s[[r, q, k]] = cell[k];
                    }
                    break;
                }
            }
        }
    }
    s
}

/// Random non-degenerate fixture for one loss: the student inputs and a
/// function evaluating the loss on them. Spatial sizes go up to 16×16 and
/// channel counts up to 8.
pub fn gradient_fixture(kind: GradLoss, seed: u64) -> (Vec<ArrayD<f64>>, LossFn) {
    let mut rng = rng(seed ^ 0x9e37_79b9);
    let h = rng.random_range(1..=16usize);
    let w = rng.random_range(1..=16usize);
    let c = rng.random_range(1..=8usize);
    let grid = unit_grid(h, w);
    match kind {
        GradLoss::Encoder => {
            let n_agents = rng.random_range(1..=3usize);
            let mut teachers = Vec::new();
            let mut students = Vec::new();
            let mut masks = Vec::new();
            for _ in 0..n_agents {
                let t = uniform3(&mut rng, (h, w, c), -1.0, 1.0);
                students.push(separated_student(&mut rng, &t).into_dyn());
                teachers.push(FeatureMap::new(grid, t).unwrap());
                let mut m = Array2::from_shape_simple_fn((h, w), || rng.random_bool(0.5));
                m[[0, 0]] = true;
                masks.push(ForegroundMask { grid, data: m });
            }
            let f = move |x: &[ArrayD<f64>]| {
                let s: Vec<FeatureMap> = x
                    .iter()
                    .map(|a| FeatureMap::new(grid, a.clone().into_dimensionality().unwrap()).unwrap())
                    .collect();
                loss_dae(&teachers, &s, &masks)
            };
            (students, Box::new(f))
        }
        GradLoss::Fused => {
            let t = uniform3(&mut rng, (h, w, c), -1.0, 1.0);
            let s = separated_student(&mut rng, &t);
            let teacher = FeatureMap::new(grid, t).unwrap();
            let f = move |x: &[ArrayD<f64>]| {
                let s = FeatureMap::new(grid, x[0].clone().into_dimensionality().unwrap()).unwrap();
                loss_daf(&teacher, &s)
            };
            (vec![s.into_dyn()], Box::new(f))
        }
        GradLoss::Prediction => {
            let a = rng.random_range(1..=2usize);
            let cls_t = uniform3(&mut rng, (h, w, a), -3.0, 3.0);
            let cls_s = uniform3(&mut rng, (h, w, a), -3.0, 3.0);
            let reg_t = Array4::from_shape_simple_fn((h, w, a, BOX_PARAMS), || rng.random_range(-2.0..2.0));
            let reg_s = Array4::from_shape_simple_fn((h, w, a, BOX_PARAMS), || rng.random_range(-2.0..2.0));
            let f = move |x: &[ArrayD<f64>]| {
                let cs: Array3<f64> = x[0].clone().into_dimensionality().unwrap();
                let rs: Array4<f64> = x[1].clone().into_dimensionality().unwrap();
                loss_dap(&cls_t, &cs, &reg_t, &rs)
            };
            (vec![cls_s.into_dyn(), reg_s.into_dyn()], Box::new(f))
        }
        GradLoss::Occupancy => {
            let target = random_target(&mut rng, grid);
            let pred = Array2::from_shape_simple_fn((h, w), || rng.random_range(0.05..0.95));
            let f = move |x: &[ArrayD<f64>]| {
                loss_occupancy(&x[0].clone().into_dimensionality().unwrap(), &target)
            };
            (vec![pred.into_dyn()], Box::new(f))
        }
        GradLoss::Offsets => {
            let target = random_target(&mut rng, grid);
            let pred = target.offsets.mapv(|t| {
                let d = rng.random_range(0.01..0.5);
                if rng.random_bool(0.5) { t + d } else { t - d }
            });
            let f = move |x: &[ArrayD<f64>]| {
                loss_offsets(&x[0].clone().into_dimensionality().unwrap(), &target)
            };
            (vec![pred.into_dyn()], Box::new(f))
        }
    }
}

fn random_target(rng: &mut impl Rng, grid: GridSpec) -> ReconTarget {
    let (h, w) = (grid.height(), grid.width());
    let mut occupancy = Array2::from_shape_simple_fn((h, w), || rng.random_bool(0.3));
    occupancy[[0, 0]] = true;
    let offsets = Array3::from_shape_fn((h, w, 3), |(r, q, _)| {
        if occupancy[[r, q]] { rng.random_range(-0.2..0.2) } else { 0.0 }
    });
    let n_foreground = occupancy.iter().filter(|&&o| o).count();
    ReconTarget { grid, occupancy, offsets, n_foreground, n_background: h * w - n_foreground }
}

/// Gradient error of one fixture along two routes: the library's
/// `finite_diff_check`, and test-side central differences over the
/// flattened inputs.
pub fn gradient_errors(kind: GradLoss, seed: u64) -> (f64, f64) {
    let (inputs, f) = gradient_fixture(kind, seed);
    let library = collab_robust::distill::finite_diff_check(&f, &inputs, FD_EPSILON).unwrap();

    let shapes: Vec<Vec<usize>> = inputs.iter().map(|a| a.shape().to_vec()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|a| a.iter().copied()).collect();
    let unflatten = |v: &[f64]| {
        let mut at = 0;
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let a = ArrayD::from_shape_vec(IxDyn(s), v[at..at + n].to_vec()).unwrap();
                at += n;
                a
            })
            .collect::<Vec<_>>()
    };
    let analytic: Vec<f64> = f(&inputs).unwrap().grads.iter().flat_map(|g| g.iter().copied()).collect();
    let numeric = central_differences(|v| f(&unflatten(v)).unwrap().value, &flat, FD_EPSILON);
    (library, max_relative_error(&analytic, &numeric))
}
