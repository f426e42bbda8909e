//! Voxel-level point cloud reconstruction: targets, decoding, and the
//! occupancy and offset losses.

use nalgebra::Point3;
use ndarray::{s, Array2, Array3};

use crate::distill::LossValue;
use crate::encode::GridSpec;
use crate::error::{Error, Result};
use crate::scene::PointCloud;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` in the
/// occupancy loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Predicted occupancy and offsets over a BEV grid, one voxel per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub grid: GridSpec,
    /// H×W occupancy probabilities.
    pub occupancy: Array2<f64>,
    /// H×W×3 offsets from the voxel center, meters.
    pub offsets: Array3<f64>,
}

impl VoxelGrid {
    pub fn new(grid: GridSpec, occupancy: Array2<f64>, offsets: Array3<f64>) -> Result<Self> {
        let (h, w) = (grid.height(), grid.width());
        if occupancy.dim() != (h, w) || offsets.dim() != (h, w, 3) {
            return Err(Error::Shape(format!(
                "occupancy {:?} / offsets {:?} do not match a {h}×{w} grid",
                occupancy.dim(),
                offsets.dim()
            )));
        }
        if occupancy.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Parameter("occupancy must lie in [0, 1]".into()));
        }
        if !offsets.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("voxel offsets".into()));
        }
        Ok(Self {
            grid,
            occupancy,
            offsets,
        })
    }

    /// H×W×3 voxel centers at the grid's reference height.
    pub fn centers(&self) -> Array3<f64> {
        voxel_centers(&self.grid)
    }
}

pub fn voxel_centers(grid: &GridSpec) -> Array3<f64> {
    Array3::from_shape_fn((grid.height(), grid.width(), 3), |(r, c, k)| {
        grid.voxel_center(r, c)[k]
    })
}

/// Ground-truth occupancy and mean-point offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconTarget {
    pub grid: GridSpec,
    pub occupancy: Array2<bool>,
    pub offsets: Array3<f64>,
    pub n_foreground: usize,
    pub n_background: usize,
}

/// Marks every cell holding at least one point and records the offset from
/// the voxel center to the mean of its points.
pub fn build_recon_target(cloud: &PointCloud, grid: &GridSpec) -> ReconTarget {
    let (h, w) = (grid.height(), grid.width());
    let mut sums = Array3::<f64>::zeros((h, w, 3));
    let mut counts = Array2::<usize>::zeros((h, w));
    for p in cloud.positions() {
        if let Some((r, c)) = grid.cell_of(p.x, p.y) {
            counts[[r, c]] += 1;
            for k in 0..3 {
                sums[[r, c, k]] += p[k];
            }
        }
    }
    let occupancy = counts.mapv(|n| n > 0);
    let mut offsets = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let n = counts[[r, c]];
            if n > 0 {
                let center = grid.voxel_center(r, c);
                for k in 0..3 {
                    offsets[[r, c, k]] = sums[[r, c, k]] / n as f64 - center[k];
                }
            }
        }
    }
    let n_foreground = occupancy.iter().filter(|&&o| o).count();
    ReconTarget {
        grid: *grid,
        occupancy,
        offsets,
        n_foreground,
        n_background: h * w - n_foreground,
    }
}

/// Emits `center + offset` for every voxel with occupancy ≥ `mask_threshold`.
/// The occupancy is carried in the reflectance column as the point's
/// confidence.
pub fn decode_points(v: &VoxelGrid, mask_threshold: f64) -> PointCloud {
    let (h, w) = v.occupancy.dim();
    let mut positions = Vec::new();
    let mut confidence = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let p = v.occupancy[[r, c]];
            if p >= mask_threshold {
                let center = v.grid.voxel_center(r, c);
                let o = v.offsets.slice(s![r, c, ..]);
                positions.push(Point3::new(center.x + o[0], center.y + o[1], center.z + o[2]));
                confidence.push(p);
            }
        }
    }
    PointCloud::new(positions, confidence).expect("decoded voxels are finite")
}

fn require_foreground(target: &ReconTarget) -> Result<()> {
    if target.n_foreground == 0 {
        return Err(Error::DegenerateTarget(
            "reconstruction target has no occupied voxels".into(),
        ));
    }
    Ok(())
}

/// Weighted binary cross-entropy over all voxels:
/// `−weight · Σ [y ln p + (1 − y) ln(1 − p)]`, probabilities clamped.
/// The gradient is zero where clamping is active.
pub fn loss_occupancy_weighted(
    pred: &Array2<f64>,
    target: &ReconTarget,
    weight: f64,
) -> Result<LossValue> {
    if pred.dim() != target.occupancy.dim() {
        return Err(Error::Shape(format!(
            "occupancy prediction {:?} vs target {:?}",
            pred.dim(),
            target.occupancy.dim()
        )));
    }
    if !pred.iter().all(|p| p.is_finite()) {
        return Err(Error::NonFinite("occupancy prediction".into()));
    }
    let mut sum = 0.0;
    let mut grad = Array2::zeros(pred.dim());
    ndarray::Zip::from(&mut grad)
        .and(pred)
        .and(&target.occupancy)
        .for_each(|g, &p, &y| {
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let inside = pc == p;
            if y {
                sum += pc.ln();
                if inside {
                    *g = -weight / pc;
                }
            } else {
                sum += (1.0 - pc).ln();
                if inside {
                    *g = weight / (1.0 - pc);
                }
            }
        });
    Ok(LossValue {
        value: -weight * sum,
        grads: vec![grad.into_dyn()],
    })
}

/// Occupancy loss with the background/foreground ratio `N_b / N_f` as the
/// leading weight.
pub fn loss_occupancy(pred: &Array2<f64>, target: &ReconTarget) -> Result<LossValue> {
    require_foreground(target)?;
    let weight = target.n_background as f64 / target.n_foreground as f64;
    loss_occupancy_weighted(pred, target, weight)
}

/// Mean L1 offset error over occupied voxels. The subgradient at a zero
/// component error is 0.
pub fn loss_offsets(pred: &Array3<f64>, target: &ReconTarget) -> Result<LossValue> {
    require_foreground(target)?;
    if pred.dim() != target.offsets.dim() {
        return Err(Error::Shape(format!(
            "offset prediction {:?} vs target {:?}",
            pred.dim(),
            target.offsets.dim()
        )));
    }
    if !pred.iter().all(|p| p.is_finite()) {
        return Err(Error::NonFinite("offset prediction".into()));
    }
    let nf = target.n_foreground as f64;
    let (h, w, _) = pred.dim();
    let mut sum = 0.0;
    let mut grad = Array3::zeros(pred.dim());
    for r in 0..h {
        for c in 0..w {
            if !target.occupancy[[r, c]] {
                continue;
            }
            for k in 0..3 {
                let d = pred[[r, c, k]] - target.offsets[[r, c, k]];
                sum += d.abs();
                grad[[r, c, k]] = if d > 0.0 {
                    1.0 / nf
                } else if d < 0.0 {
                    -1.0 / nf
                } else {
                    0.0
                };
            }
        }
    }
    Ok(LossValue {
        value: sum / nf,
        grads: vec![grad.into_dyn()],
    })
}

/// `L_m + L_o`; gradients are passed through as `[∂/∂occupancy, ∂/∂offsets]`.
pub fn loss_recon(occupancy: &LossValue, offsets: &LossValue) -> LossValue {
    LossValue {
        value: occupancy.value + offsets.value,
        grads: occupancy
            .grads
            .iter()
            .chain(offsets.grads.iter())
            .cloned()
            .collect(),
    }
}
