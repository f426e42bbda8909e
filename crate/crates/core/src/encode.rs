//! BEV encoding: pillar descriptors, foreground masks, multi-scale agent
//! attention fusion and a fixed linear detection head.
//!
//! Nothing here is learned. The pillar encoder is a hand-built 8-channel
//! descriptor, scale changes are 2×2 average pooling and nearest-neighbour
//! upsampling, and the head is a seeded random projection. They produce
//! well-defined tensors for the distillation and reconstruction losses.

use std::cmp::Ordering;

use nalgebra::{Point3, Vector3};
use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scene::{BBox3D, PointCloud};

/// Number of channels produced by [`pillarize`].
pub const PILLAR_CHANNELS: usize = 8;

/// Regression targets per anchor: (x, y, z, w, l, h, yaw).
pub const BOX_PARAMS: usize = 7;

/// Rectangular BEV grid. Row index follows y, column index follows x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub voxel: f64,
    /// Height of voxel centers, used by reconstruction.
    pub z_ref: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::new((-70.4, 70.4), (-40.0, 40.0), 0.4).expect("default grid is valid")
    }
}

fn cells_along(extent: f64, voxel: f64) -> Result<usize> {
    let n = extent / voxel;
    let rounded = n.round();
    if !(extent > 0.0) || (n - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::Parameter(format!(
            "extent {extent} is not a positive multiple of voxel size {voxel}"
        )));
    }
    Ok(rounded as usize)
}

impl GridSpec {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), voxel: f64) -> Result<Self> {
        if !(voxel > 0.0 && voxel.is_finite()) {
            return Err(Error::Parameter(format!("voxel size {voxel} must be > 0")));
        }
        let g = Self {
            x_min: x_range.0,
            x_max: x_range.1,
            y_min: y_range.0,
            y_max: y_range.1,
            voxel,
            z_ref: 0.0,
        };
        cells_along(g.x_max - g.x_min, voxel)?;
        cells_along(g.y_max - g.y_min, voxel)?;
        Ok(g)
    }

    pub fn with_z_ref(mut self, z_ref: f64) -> Self {
        self.z_ref = z_ref;
        self
    }

    pub fn height(&self) -> usize {
        ((self.y_max - self.y_min) / self.voxel).round() as usize
    }

    pub fn width(&self) -> usize {
        ((self.x_max - self.x_min) / self.voxel).round() as usize
    }

    /// `(row, col)` of the cell holding `(x, y)`; cells are half-open.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.x_min) / self.voxel).floor();
        let r = ((y - self.y_min) / self.voxel).floor();
        if c < 0.0 || r < 0.0 {
            return None;
        }
        let (r, c) = (r as usize, c as usize);
        (r < self.height() && c < self.width()).then_some((r, c))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.voxel,
            self.y_min + (row as f64 + 0.5) * self.voxel,
        )
    }

    /// Voxel center including the reference height.
    pub fn voxel_center(&self, row: usize, col: usize) -> Point3<f64> {
        let (x, y) = self.cell_center(row, col);
        Point3::new(x, y, self.z_ref)
    }

    /// Same extent with cells `factor` times larger.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        let g = Self {
            voxel: self.voxel * factor as f64,
            ..*self
        };
        cells_along(g.x_max - g.x_min, g.voxel)?;
        cells_along(g.y_max - g.y_min, g.voxel)?;
        Ok(g)
    }
}

/// Dense H×W×C feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: GridSpec,
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(grid: GridSpec, data: Array3<f64>) -> Result<Self> {
        let (h, w, _) = data.dim();
        if (h, w) != (grid.height(), grid.width()) {
            return Err(Error::Shape(format!(
                "feature data is {h}×{w} but grid is {}×{}",
                grid.height(),
                grid.width()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        Self {
            grid,
            data: Array3::zeros((grid.height(), grid.width(), channels)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Channels `start..end` as a new map.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.channels() {
            return Err(Error::Shape(format!(
                "channel range {start}..{end} outside 0..{}",
                self.channels()
            )));
        }
        Ok(Self {
            grid: self.grid,
            data: self.data.slice(s![.., .., start..end]).to_owned(),
        })
    }
}

/// Binary H×W mask over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub grid: GridSpec,
    pub data: Array2<bool>,
}

impl ForegroundMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

fn cmp_points(cloud: &PointCloud, a: usize, b: usize) -> Ordering {
    let (pa, pb) = (&cloud.positions()[a], &cloud.positions()[b]);
    let sem = |i: usize| cloud.semantic().is_some_and(|s| s[i]);
    pa.x.total_cmp(&pb.x)
        .then(pa.y.total_cmp(&pb.y))
        .then(pa.z.total_cmp(&pb.z))
        .then(cloud.reflectance()[a].total_cmp(&cloud.reflectance()[b]))
        .then(sem(a).cmp(&sem(b)))
}

/// Per-cell descriptor:
/// `[ln(1+n), mean dx, mean dy, mean z, max z, mean r, max r, mean s]`
/// where dx, dy are offsets from the cell center. Points outside the grid
/// are ignored; empty cells are zero.
///
/// Points are summed in a canonical order, so the result does not depend
/// on input order.
pub fn pillarize(cloud: &PointCloud, grid: &GridSpec) -> FeatureMap {
    let (h, w) = (grid.height(), grid.width());
    let mut data = Array3::zeros((h, w, PILLAR_CHANNELS));
    let mut members: Vec<(usize, usize)> = cloud
        .positions()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| grid.cell_of(p.x, p.y).map(|(r, c)| (r * w + c, i)))
        .collect();
    members.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| cmp_points(cloud, a.1, b.1)));

    for group in members.chunk_by(|a, b| a.0 == b.0) {
        let flat = group[0].0;
        let (row, col) = (flat / w, flat % w);
        let (cx, cy) = grid.cell_center(row, col);
        let n = group.len() as f64;
        let mut acc = [0.0f64; 5];
        let mut max_z = f64::NEG_INFINITY;
        let mut max_r = f64::NEG_INFINITY;
        for &(_, i) in group {
            let p = &cloud.positions()[i];
            let r = cloud.reflectance()[i];
            acc[0] += p.x - cx;
            acc[1] += p.y - cy;
            acc[2] += p.z;
            acc[3] += r;
            acc[4] += cloud.semantic().map_or(0.0, |s| s[i] as u8 as f64);
            max_z = max_z.max(p.z);
            max_r = max_r.max(r);
        }
        let v = [
            n.ln_1p(),
            acc[0] / n,
            acc[1] / n,
            acc[2] / n,
            max_z,
            acc[3] / n,
            max_r,
            acc[4] / n,
        ];
        data.slice_mut(s![row, col, ..]).assign(&Array1::from(v.to_vec()));
    }
    FeatureMap { grid: *grid, data }
}

/// Cells whose center falls inside any box's BEV footprint.
pub fn foreground_mask(boxes: &[BBox3D], grid: &GridSpec) -> ForegroundMask {
    let (h, w) = (grid.height(), grid.width());
    let mut data = Array2::from_elem((h, w), false);
    for b in boxes {
        let corners = b.bev_corners();
        let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for c in &corners {
            lo_x = lo_x.min(c.x);
            hi_x = hi_x.max(c.x);
            lo_y = lo_y.min(c.y);
            hi_y = hi_y.max(c.y);
        }
        let col_range = |lo: f64, hi: f64| {
            let a = ((lo - grid.x_min) / grid.voxel - 0.5).floor().max(0.0) as usize;
            let b = (((hi - grid.x_min) / grid.voxel - 0.5).ceil().max(-1.0) + 1.0) as usize;
            a..b.min(w)
        };
        let row_range = |lo: f64, hi: f64| {
            let a = ((lo - grid.y_min) / grid.voxel - 0.5).floor().max(0.0) as usize;
            let b = (((hi - grid.y_min) / grid.voxel - 0.5).ceil().max(-1.0) + 1.0) as usize;
            a..b.min(h)
        };
        for row in row_range(lo_y, hi_y) {
            for col in col_range(lo_x, hi_x) {
                let (x, y) = grid.cell_center(row, col);
                if b.contains_bev(x, y) {
                    data[[row, col]] = true;
                }
            }
        }
    }
    ForegroundMask { grid: *grid, data }
}

/// 2×2 average pooling.
pub fn downsample(f: &FeatureMap) -> Result<FeatureMap> {
    let (h, w, c) = f.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot halve a {h}×{w} map")));
    }
    let mut out = Array3::zeros((h / 2, w / 2, c));
    for r in 0..h / 2 {
        for q in 0..w / 2 {
            for k in 0..c {
                out[[r, q, k]] = 0.25
                    * (f.data[[2 * r, 2 * q, k]]
                        + f.data[[2 * r, 2 * q + 1, k]]
                        + f.data[[2 * r + 1, 2 * q, k]]
                        + f.data[[2 * r + 1, 2 * q + 1, k]]);
            }
        }
    }
    Ok(FeatureMap {
        grid: f.grid.coarsened(2)?,
        data: out,
    })
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample(f: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 0 {
        return Err(Error::Parameter("upsample factor must be >= 1".into()));
    }
    let (h, w, c) = f.shape();
    let out = Array3::from_shape_fn((h * factor, w * factor, c), |(r, q, k)| {
        f.data[[r / factor, q / factor, k]]
    });
    let grid = GridSpec {
        voxel: f.grid.voxel / factor as f64,
        ..f.grid
    };
    Ok(FeatureMap { grid, data: out })
}

/// Output of [`fuse_attention_detailed`].
#[derive(Debug, Clone)]
pub struct Fusion {
    /// Full-resolution concatenation of all scales (L·C channels).
    pub fused: FeatureMap,
    /// Fused map at each scale's own resolution.
    pub per_scale: Vec<FeatureMap>,
    /// Attention weights per scale, shaped H_ℓ×W_ℓ×agents (ego first).
    pub weights: Vec<Array3<f64>>,
}

fn check_same_shape(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.shape() != b.shape() || a.grid != b.grid {
        return Err(Error::Shape(format!(
            "feature maps differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Per-cell scaled dot-product attention of the ego over all agents.
fn attend(maps: &[FeatureMap]) -> (FeatureMap, Array3<f64>) {
    let ego = &maps[0];
    let (h, w, c) = ego.shape();
    let scale = 1.0 / (c as f64).sqrt();
    let mut fused = Array3::zeros((h, w, c));
    let mut weights = Array3::zeros((h, w, maps.len()));
    let mut logits = vec![0.0; maps.len()];
    for r in 0..h {
        for q in 0..w {
            let e = ego.data.slice(s![r, q, ..]);
            for (j, m) in maps.iter().enumerate() {
                logits[j] = e.dot(&m.data.slice(s![r, q, ..])) * scale;
            }
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|l| (l - top).exp()).sum();
            for (j, m) in maps.iter().enumerate() {
                let a = (logits[j] - top).exp() / denom;
                weights[[r, q, j]] = a;
                fused
                    .slice_mut(s![r, q, ..])
                    .scaled_add(a, &m.data.slice(s![r, q, ..]));
            }
        }
    }
    (
        FeatureMap {
            grid: ego.grid,
            data: fused,
        },
        weights,
    )
}

/// Multi-scale attention fusion, keeping per-scale maps and weights.
///
/// Scale 1 uses the input maps; each further scale halves the previous one.
/// At every scale and cell the ego attends over itself and all others with
/// softmax(⟨ego, agent⟩ / √C), and the scale outputs are upsampled back and
/// concatenated along channels.
pub fn fuse_attention_detailed(
    ego: &FeatureMap,
    others: &[FeatureMap],
    scales: usize,
) -> Result<Fusion> {
    if scales == 0 {
        return Err(Error::Parameter("at least one scale is required".into()));
    }
    for o in others {
        check_same_shape(ego, o)?;
    }
    let mut level: Vec<FeatureMap> = std::iter::once(ego.clone()).chain(others.iter().cloned()).collect();
    let mut per_scale = Vec::with_capacity(scales);
    let mut weights = Vec::with_capacity(scales);
    for l in 0..scales {
        if l > 0 {
            level = level.iter().map(downsample).collect::<Result<_>>()?;
        }
        let (f, a) = attend(&level);
        per_scale.push(f);
        weights.push(a);
    }
    let (h, w, c) = ego.shape();
    let mut data = Array3::zeros((h, w, scales * c));
    for (l, f) in per_scale.iter().enumerate() {
        let up = upsample(f, 1 << l)?;
        data.slice_mut(s![.., .., l * c..(l + 1) * c]).assign(&up.data);
    }
    Ok(Fusion {
        fused: FeatureMap {
            grid: ego.grid,
            data,
        },
        per_scale,
        weights,
    })
}

/// Multi-scale attention fusion; see [`fuse_attention_detailed`].
pub fn fuse_attention(ego: &FeatureMap, others: &[FeatureMap], scales: usize) -> Result<FeatureMap> {
    Ok(fuse_attention_detailed(ego, others, scales)?.fused)
}

/// Anchor box template placed at every cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub size: Vector3<f64>,
    pub yaw: f64,
    pub z: f64,
}

impl Anchor {
    /// Car-sized anchors at yaw 0 and π/2.
    pub fn default_pair(z: f64) -> Vec<Anchor> {
        let size = Vector3::new(4.5, 1.9, 1.6);
        vec![
            Anchor { size, yaw: 0.0, z },
            Anchor {
                size,
                yaw: std::f64::consts::FRAC_PI_2,
                z,
            },
        ]
    }
}

/// Classification logits (H×W×A) and box regression (H×W×A×7).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub cls: Array3<f64>,
    pub reg: Array4<f64>,
}

/// A fixed linear detection head with seeded weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectHead {
    pub anchors: Vec<Anchor>,
    pub cls_weight: Array2<f64>,
    pub cls_bias: Array1<f64>,
    pub reg_weight: Array3<f64>,
    pub reg_bias: Array2<f64>,
}

impl DetectHead {
    /// Weights drawn from N(0, 1/C); biases zero.
    pub fn seeded(in_channels: usize, anchors: Vec<Anchor>, seed: u64) -> Self {
        let a = anchors.len();
        let mut rng = rng_from_seed(seed);
        let dist = Normal::new(0.0, 1.0 / (in_channels.max(1) as f64).sqrt()).expect("valid std");
        let cls_weight = Array2::from_shape_simple_fn((a, in_channels), || dist.sample(&mut rng));
        let reg_weight =
            Array3::from_shape_simple_fn((a, BOX_PARAMS, in_channels), || dist.sample(&mut rng));
        Self {
            anchors,
            cls_weight,
            cls_bias: Array1::zeros(a),
            reg_weight,
            reg_bias: Array2::zeros((a, BOX_PARAMS)),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cls_weight.dim().1
    }

    pub fn forward(&self, fused: &FeatureMap) -> Result<HeadOutput> {
        let (h, w, c) = fused.shape();
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "head expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let a = self.anchors.len();
        let flat = fused
            .data
            .view()
            .into_shape_with_order((h * w, c))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let cls = flat.dot(&self.cls_weight.t()) + &self.cls_bias;
        let reg_w = self
            .reg_weight
            .view()
            .into_shape_with_order((a * BOX_PARAMS, c))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let reg_b = self
            .reg_bias
            .view()
            .into_shape_with_order(a * BOX_PARAMS)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let reg = flat.dot(&reg_w.t()) + reg_b;
        Ok(HeadOutput {
            cls: cls
                .into_shape_with_order((h, w, a))
                .map_err(|e| Error::Shape(e.to_string()))?,
            reg: reg
                .into_shape_with_order((h, w, a, BOX_PARAMS))
                .map_err(|e| Error::Shape(e.to_string()))?,
        })
    }

    /// Decodes anchor regressions into scored boxes, keeping those with
    /// score ≥ `conf_thr`, best `max_candidates` first.
    pub fn decode(
        &self,
        out: &HeadOutput,
        grid: &GridSpec,
        conf_thr: f64,
        max_candidates: usize,
    ) -> Vec<BBox3D> {
        let (h, w, a) = out.cls.dim();
        let mut cands: Vec<(f64, usize)> = out
            .cls
            .iter()
            .enumerate()
            .map(|(i, &l)| (1.0 / (1.0 + (-l).exp()), i))
            .filter(|(p, _)| *p >= conf_thr)
            .collect();
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        cands.truncate(max_candidates);
        cands
            .into_iter()
            .filter_map(|(score, i)| {
                let (row, col, k) = (i / (w * a), (i / a) % w, i % a);
                debug_assert!(row < h);
                let anchor = &self.anchors[k];
                let d = out.reg.index_axis(Axis(0), row);
                let d = d.index_axis(Axis(0), col);
                let d = d.index_axis(Axis(0), k);
                let t = |j: usize| d[j].clamp(-4.0, 4.0);
                let (cx, cy) = grid.cell_center(row, col);
                let diag = anchor.size.x.hypot(anchor.size.y);
                let center = Point3::new(cx + t(0) * diag, cy + t(1) * diag, anchor.z + t(2) * anchor.size.z);
                let size = Vector3::new(
                    anchor.size.x * t(3).exp(),
                    anchor.size.y * t(4).exp(),
                    anchor.size.z * t(5).exp(),
                );
                BBox3D::new(center, size, anchor.yaw + t(6))
                    .ok()
                    .and_then(|b| b.with_score(score).ok())
            })
            .collect()
    }
}
