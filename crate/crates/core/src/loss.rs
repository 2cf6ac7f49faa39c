//! Task losses (classification, proposals, segmentation) and their
//! combination with the distillation term.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::mask::Mask;
use crate::mgukd::DistillLossReport;
use crate::nn::{bce_with_logits_mean, log_softmax_last, to_vec_f64};

/// Scalar loss values of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_rpn: f64,
    pub l_seg: f64,
    pub l_task: f64,
    pub l_mgukd_per_layer: Vec<f64>,
    pub l_mgukd: f64,
    pub alpha: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn new(l_cls: f64, l_rpn: f64, l_seg: f64, distill: &DistillLossReport) -> Self {
        let l_task = l_cls + l_rpn + l_seg;
        Self {
            l_cls,
            l_rpn,
            l_seg,
            l_task,
            l_mgukd_per_layer: distill.per_layer.clone(),
            l_mgukd: distill.total,
            alpha: distill.alpha,
            l_total: total_loss(l_task, distill.total, distill.alpha),
        }
    }

    /// Both loss identities, compared bit for bit.
    pub fn identities_hold(&self) -> bool {
        self.l_task == self.l_cls + self.l_rpn + self.l_seg
            && self.l_total == self.l_task + self.alpha * self.l_mgukd
            && self.l_mgukd == self.l_mgukd_per_layer.iter().sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.l_total.is_finite() && self.l_task.is_finite()
    }
}

/// `task + alpha · distill`
pub fn total_loss(task: f64, distill: f64, alpha: f64) -> f64 {
    task + alpha * distill
}

/// Mean softmax cross-entropy of `(r, k)` logits against class indices.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (r, k) = logits.dims2()?;
    if r != labels.len() {
        return shape_err(format!("{r} logit rows for {} labels", labels.len()));
    }
    if labels.iter().any(|&l| l >= k) {
        return shape_err(format!("label out of range for {k} classes"));
    }
    let mut onehot = vec![0.0; r * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (r, k), logits.device())?.to_dtype(logits.dtype())?;
    Ok((log_softmax_last(logits)? * onehot)?.sum_all()?.neg()?.affine(1.0 / r as f64, 0.0)?)
}

/// IoU of two binary masks; both empty counts as perfect agreement.
pub fn s_iou_target(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return shape_err("mask shapes differ");
    }
    let union = pred.union_area(gt)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(pred.intersection_area(gt)? as f64 / union as f64)
}

/// Ground-truth mask at the decoder's resolution, thresholded at half
/// coverage.
pub fn mask_target(gt: &Mask, h: usize, w: usize) -> Mask {
    let frac = gt.resample_fraction(h, w);
    Mask::from_fn(h, w, |y, x| frac[y * w + x] >= 0.5)
}

/// Binary mask from logits `(h, w)` thresholded at 0.
pub fn logits_to_mask(logits: &[f64], h: usize, w: usize) -> Mask {
    Mask::from_fn(h, w, |y, x| logits[y * w + x] > 0.0)
}

/// Per-pixel BCE between `(r, h, w)` mask logits and their matched targets,
/// plus the squared error between predicted IoU scores and the true IoU of
/// the thresholded prediction.
pub fn segmentation_loss(mask_logits: &Tensor, iou_pred: &Tensor, targets: &[Mask]) -> Result<Tensor> {
    let (r, h, w) = mask_logits.dims3()?;
    if targets.len() != r {
        return shape_err(format!("{r} masks for {} targets", targets.len()));
    }
    let dev = mask_logits.device();
    let dtype = mask_logits.dtype();
    if r == 0 {
        return Ok(Tensor::zeros((), dtype, dev)?);
    }
    let mut tv = Vec::with_capacity(r * h * w);
    for t in targets {
        if t.height() != h || t.width() != w {
            return shape_err("segmentation target not at prediction resolution");
        }
        for y in 0..h {
            for x in 0..w {
                tv.push(if t.get(y, x) { 1.0 } else { 0.0 });
            }
        }
    }
    let tt = Tensor::from_vec(tv, (r, h, w), dev)?.to_dtype(dtype)?;
    let bce = bce_with_logits_mean(mask_logits, &tt)?;
    let logits = to_vec_f64(mask_logits)?;
    let ious = targets
        .iter()
        .enumerate()
        .map(|(i, t)| s_iou_target(&logits_to_mask(&logits[i * h * w..(i + 1) * h * w], h, w), t))
        .collect::<Result<Vec<_>>>()?;
    let it = Tensor::from_vec(ious, r, dev)?.to_dtype(dtype)?;
    let mse = (iou_pred - it)?.sqr()?.mean_all()?;
    Ok((bce + mse)?)
}
