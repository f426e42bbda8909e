//! Teacher–student distillation losses with analytic gradients.
//!
//! Three stages are aligned: encoder features (masked to the foreground),
//! fused features, and head predictions (KL divergence). Every loss returns
//! its gradient with respect to the student inputs, and
//! [`finite_diff_check`] verifies those gradients numerically.

use ndarray::{ArrayD, ArrayView2, ArrayView3, Array3, Array4, Axis, Zip};

use crate::encode::{FeatureMap, ForegroundMask, HeadOutput, BOX_PARAMS};
use crate::error::{Error, Result};

/// A scalar loss and its gradients, one tensor per differentiated input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<ArrayD<f64>>,
}

impl LossValue {
    pub fn scalar(value: f64) -> Self {
        Self {
            value,
            grads: Vec::new(),
        }
    }
}

/// Weights of the combined distillation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for KdWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
        }
    }
}

/// Σ over cells of `‖teacher − student‖₂` (channel vector), optionally
/// restricted to masked cells, with the gradient w.r.t. `student`.
/// Cells where the difference is exactly zero contribute a zero subgradient.
pub fn cellwise_l2(
    teacher: ArrayView3<f64>,
    student: ArrayView3<f64>,
    mask: Option<ArrayView2<bool>>,
) -> Result<(f64, Array3<f64>)> {
    if teacher.dim() != student.dim() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?}",
            teacher.dim(),
            student.dim()
        )));
    }
    let (h, w, _) = teacher.dim();
    if let Some(m) = &mask {
        if m.dim() != (h, w) {
            return Err(Error::Shape(format!("mask {:?} vs features {h}×{w}", m.dim())));
        }
    }
    let mut total = 0.0;
    let mut grad = Array3::zeros(teacher.dim());
    for r in 0..h {
        for c in 0..w {
            if mask.as_ref().is_some_and(|m| !m[[r, c]]) {
                continue;
            }
            let t = teacher.slice(ndarray::s![r, c, ..]);
            let s = student.slice(ndarray::s![r, c, ..]);
            let norm = t
                .iter()
                .zip(s.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            total += norm;
            if norm > 0.0 {
                let mut g = grad.slice_mut(ndarray::s![r, c, ..]);
                Zip::from(&mut g).and(&t).and(&s).for_each(|g, &a, &b| *g = -(a - b) / norm);
            }
        }
    }
    Ok((total, grad))
}

/// Encoder-stage loss: Σ_agents Σ_cells M·‖F^T − F^S‖₂.
/// Gradients are returned per agent, aligned with `student`.
pub fn loss_dae(
    teacher: &[FeatureMap],
    student: &[FeatureMap],
    masks: &[ForegroundMask],
) -> Result<LossValue> {
    if teacher.len() != student.len() || teacher.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} teacher maps, {} student maps, {} masks",
            teacher.len(),
            student.len(),
            masks.len()
        )));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for ((t, s), m) in teacher.iter().zip(student).zip(masks) {
        let (v, g) = cellwise_l2(t.data.view(), s.data.view(), Some(m.data.view()))?;
        value += v;
        grads.push(g.into_dyn());
    }
    Ok(LossValue { value, grads })
}

/// Fusion-stage loss: Σ_cells ‖H^T − H^S‖₂.
pub fn loss_daf(teacher: &FeatureMap, student: &FeatureMap) -> Result<LossValue> {
    let (value, g) = cellwise_l2(teacher.data.view(), student.data.view(), None)?;
    Ok(LossValue {
        value,
        grads: vec![g.into_dyn()],
    })
}

/// ln σ(x) and ln(1 − σ(x)), computed without overflow.
fn log_sigmoid_pair(x: f64) -> (f64, f64) {
    let softplus = |z: f64| if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    (-softplus(-x), -softplus(x))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// KL(Bern(σ(t)) ‖ Bern(σ(s))).
pub fn kl_bernoulli_logits(t: f64, s: f64) -> f64 {
    let (lt, lt1) = log_sigmoid_pair(t);
    let (ls, ls1) = log_sigmoid_pair(s);
    let p = sigmoid(t);
    p * (lt - ls) + (1.0 - p) * (lt1 - ls1)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Prediction-stage loss.
///
/// Classification logits become per-anchor Bernoulli distributions; the
/// seven regression outputs of each anchor become a categorical
/// distribution via softmax. Each term is KL(teacher ‖ student) averaged
/// over anchors, and the two are summed. Gradients are w.r.t. the student
/// classification and regression logits.
pub fn loss_dap(
    cls_t: &Array3<f64>,
    cls_s: &Array3<f64>,
    reg_t: &Array4<f64>,
    reg_s: &Array4<f64>,
) -> Result<LossValue> {
    if cls_t.dim() != cls_s.dim() {
        return Err(Error::Shape(format!("cls {:?} vs {:?}", cls_t.dim(), cls_s.dim())));
    }
    if reg_t.dim() != reg_s.dim() {
        return Err(Error::Shape(format!("reg {:?} vs {:?}", reg_t.dim(), reg_s.dim())));
    }
    let (h, w, a) = cls_t.dim();
    if reg_t.dim() != (h, w, a, BOX_PARAMS) {
        return Err(Error::Shape(format!(
            "reg {:?} does not match cls {:?}×{BOX_PARAMS}",
            reg_t.dim(),
            cls_t.dim()
        )));
    }
    let all_finite = [cls_t.iter(), cls_s.iter()]
        .into_iter()
        .flatten()
        .chain(reg_t.iter())
        .chain(reg_s.iter())
        .all(|v| v.is_finite());
    if !all_finite {
        return Err(Error::NonFinite("prediction logits".into()));
    }
    let n = (h * w * a).max(1) as f64;

    let mut cls_value = 0.0;
    let mut cls_grad = Array3::zeros(cls_s.dim());
    Zip::from(&mut cls_grad)
        .and(cls_t)
        .and(cls_s)
        .for_each(|g, &t, &s| {
            cls_value += kl_bernoulli_logits(t, s);
            *g = (sigmoid(s) - sigmoid(t)) / n;
        });

    let mut reg_value = 0.0;
    let mut reg_grad = Array4::zeros(reg_s.dim());
    let (reg_t, reg_s) = (reg_t.as_standard_layout(), reg_s.as_standard_layout());
    let flat_t = reg_t.view().into_shape_with_order((h * w * a, BOX_PARAMS)).expect("contiguous");
    let flat_s = reg_s.view().into_shape_with_order((h * w * a, BOX_PARAMS)).expect("contiguous");
    let mut flat_g = reg_grad
        .view_mut()
        .into_shape_with_order((h * w * a, BOX_PARAMS))
        .expect("contiguous");
    for ((rt, rs), mut g) in flat_t
        .axis_iter(Axis(0))
        .zip(flat_s.axis_iter(Axis(0)))
        .zip(flat_g.axis_iter_mut(Axis(0)))
    {
        let lt = log_softmax(rt.as_slice().expect("row"));
        let ls = log_softmax(rs.as_slice().expect("row"));
        for k in 0..BOX_PARAMS {
            let qt = lt[k].exp();
            reg_value += qt * (lt[k] - ls[k]);
            g[k] = (ls[k].exp() - qt) / n;
        }
    }
    Ok(LossValue {
        value: cls_value / n + reg_value / n,
        grads: vec![cls_grad.into_dyn(), reg_grad.into_dyn()],
    })
}

/// [`loss_dap`] on two head outputs.
pub fn loss_dap_heads(teacher: &HeadOutput, student: &HeadOutput) -> Result<LossValue> {
    loss_dap(&teacher.cls, &student.cls, &teacher.reg, &student.reg)
}

/// α·L_d + β·L_h + γ·L_p. Gradients are the component gradients scaled by
/// the same weights, concatenated in (d, h, p) order.
pub fn loss_kd(
    dae: &LossValue,
    daf: &LossValue,
    dap: &LossValue,
    weights: KdWeights,
) -> Result<LossValue> {
    let parts = [(dae, weights.alpha), (daf, weights.beta), (dap, weights.gamma)];
    if parts.iter().any(|(l, _)| !l.value.is_finite()) {
        return Err(Error::NonFinite("distillation component".into()));
    }
    Ok(LossValue {
        value: parts.iter().map(|(l, w)| w * l.value).sum(),
        grads: parts
            .iter()
            .flat_map(|(l, w)| l.grads.iter().map(move |g| g * *w))
            .collect(),
    })
}

/// Max relative error between analytic gradients and central differences.
///
/// `loss_fn` maps the inputs to a [`LossValue`] whose `grads` align with
/// `inputs`. Each coordinate is perturbed by ±`epsilon`; the error is
/// `|g_analytic − g_fd| / max(1, |g_fd|)`.
pub fn finite_diff_check<F>(loss_fn: F, inputs: &[ArrayD<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&[ArrayD<f64>]) -> Result<LossValue>,
{
    let analytic = loss_fn(inputs)?;
    if analytic.grads.len() != inputs.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} inputs",
            analytic.grads.len(),
            inputs.len()
        )));
    }
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        if analytic.grads[k].shape() != inputs[k].shape() {
            return Err(Error::Shape(format!(
                "gradient {k} has shape {:?}, input has {:?}",
                analytic.grads[k].shape(),
                inputs[k].shape()
            )));
        }
        let n = inputs[k].len();
        for i in 0..n {
            let orig = inputs[k].as_slice_memory_order().expect("contiguous")[i];
            work[k].as_slice_memory_order_mut().expect("contiguous")[i] = orig + epsilon;
            let plus = loss_fn(&work)?.value;
            work[k].as_slice_memory_order_mut().expect("contiguous")[i] = orig - epsilon;
            let minus = loss_fn(&work)?.value;
            work[k].as_slice_memory_order_mut().expect("contiguous")[i] = orig;
            let fd = (plus - minus) / (2.0 * epsilon);
            let g = analytic.grads[k].as_slice_memory_order().expect("contiguous")[i];
            worst = worst.max((g - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}
