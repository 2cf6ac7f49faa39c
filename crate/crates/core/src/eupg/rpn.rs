//! Anchors, box coding, non-maximum suppression and the region proposal
//! network run on upsampled copies of the attended feature map.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{config_err, shape_err, Result};
use crate::interp::bilinear_matrix_2d;
use crate::mask::BBox;
use crate::nn::{bce_with_logits_mean, to_vec_f64, Conv2d, ParamStore};

/// Largest log-scale change a decoded delta may apply.
pub const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Standard center/log-size encoding of `target` relative to `anchor`.
pub fn encode_box(target: &BBox, anchor: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tx - ax) / aw,
        (ty - ay) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

pub fn decode_box(deltas: &[f64; 4], anchor: &BBox) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas[0] * aw;
    let cy = ay + deltas[1] * ah;
    let w = aw * deltas[2].min(DELTA_CLAMP).exp();
    let h = ah * deltas[3].min(DELTA_CLAMP).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Greedy NMS. Returns kept indices by descending score; equal scores keep
/// the lower index first.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && boxes[i].iou(&boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Anchors of one level, ordered by row, column, then anchor shape.
pub fn anchor_grid(grid: usize, stride: f64, sizes: &[f64], ratios: &[f64]) -> Vec<BBox> {
    let mut out = Vec::with_capacity(grid * grid * sizes.len() * ratios.len());
    for y in 0..grid {
        for x in 0..grid {
            let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            for &s in sizes {
                for &r in ratios {
                    // r = height / width, area s²
                    let w = s / r.sqrt();
                    let h = s * r.sqrt();
                    out.push(BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h));
                }
            }
        }
    }
    out
}

/// Smooth-L1 with transition point `beta`, summed over all elements.
pub fn smooth_l1_sum(diff: &Tensor, beta: f64) -> Result<Tensor> {
    let a = diff.abs()?;
    let small = a.minimum(beta)?;
    let quad = (small.sqr()? * (0.5 / beta))?;
    Ok((quad + (a - small)?)?.sum_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpnConfig {
    pub width: usize,
    /// Upsampling factors applied to the encoder map, one level each.
    pub upsample: Vec<usize>,
    /// Anchor side lengths (pixels) per level.
    pub sizes: Vec<Vec<f64>>,
    pub ratios: Vec<f64>,
    pub pre_nms_top: usize,
    pub post_nms_train: usize,
    pub post_nms_test: usize,
    pub nms_iou: f64,
    pub min_size: f64,
    pub batch_per_image: usize,
    pub positive_fraction: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            width: 32,
            upsample: vec![2, 4],
            sizes: vec![vec![40.0, 56.0, 80.0], vec![12.0, 20.0, 32.0]],
            ratios: vec![0.5, 1.0, 2.0],
            pre_nms_top: 600,
            post_nms_train: 64,
            post_nms_test: 50,
            nms_iou: 0.7,
            min_size: 1.0,
            batch_per_image: 256,
            positive_fraction: 0.5,
            fg_iou: 0.7,
            bg_iou: 0.3,
        }
    }
}

impl RpnConfig {
    pub fn anchors_per_location(&self) -> usize {
        self.sizes.first().map_or(0, |s| s.len()) * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.upsample.is_empty() || self.upsample.len() != self.sizes.len() {
            return config_err("rpn needs one anchor size list per upsampled level");
        }
        let a = self.sizes[0].len();
        if a == 0 || self.sizes.iter().any(|s| s.len() != a) || self.ratios.is_empty() {
            return config_err("every rpn level needs the same non-empty anchor set");
        }
        if !(0.0..=1.0).contains(&self.bg_iou) || self.bg_iou > self.fg_iou {
            return config_err("rpn thresholds must satisfy 0 <= bg <= fg <= 1");
        }
        Ok(())
    }
}

/// Axis-aligned boxes with objectness, sorted by descending score.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    /// Index of the pyramid level that produced each box.
    pub levels: Vec<usize>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    fn check_bounds(&self, size: f64) -> Result<()> {
        for b in &self.boxes {
            if !(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= size && b.y2 <= size && b.x1 < b.x2 && b.y1 < b.y2) {
                return shape_err(format!("proposal {b:?} escapes the {size}px image"));
            }
        }
        Ok(())
    }
}

/// Raw per-anchor predictions for a batch, all levels concatenated.
#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// `(b, anchors)`
    pub logits: Tensor,
    /// `(b, anchors, 4)`
    pub deltas: Tensor,
    pub anchors: Vec<BBox>,
    pub anchor_levels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Rpn {
    conv: Conv2d,
    objectness: Conv2d,
    deltas: Conv2d,
    cfg: RpnConfig,
    image_size: usize,
}

impl Rpn {
    pub fn new(ps: &ParamStore, cfg: &RpnConfig, channels: usize, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        let a = cfg.anchors_per_location();
        Ok(Self {
            conv: Conv2d::new(&ps.pp("conv"), channels, cfg.width, 3)?,
            objectness: Conv2d::new(&ps.pp("objectness"), cfg.width, a, 1)?,
            deltas: Conv2d::new(&ps.pp("deltas"), cfg.width, 4 * a, 1)?,
            cfg: cfg.clone(),
            image_size,
        })
    }

    pub fn config(&self) -> &RpnConfig {
        &self.cfg
    }

    pub fn forward(&self, feature: &FeatureMap) -> Result<RpnOutput> {
        let b = feature.batch();
        let a = self.cfg.anchors_per_location();
        let mut logits = Vec::new();
        let mut deltas = Vec::new();
        let mut anchors = Vec::new();
        let mut anchor_levels = Vec::new();
        for (level, &f) in self.cfg.upsample.iter().enumerate() {
            let (h, w) = (feature.h * f, feature.w * f);
            if h != w {
                return shape_err("rpn expects square feature maps");
            }
            let n = feature.h * feature.w;
            let up = Tensor::from_vec(bilinear_matrix_2d(feature.h, feature.w, h, w), (h * w, n), feature.tokens.device())?
                .to_dtype(feature.tokens.dtype())?;
            let hidden = self.conv.forward_linear_input(&feature.tokens, &up, h, w)?.relu()?; // (b, h·w, width)
            logits.push(self.objectness.forward_pointwise(&hidden)?.reshape((b, h * w * a))?);
            deltas.push(self.deltas.forward_pointwise(&hidden)?.reshape((b, h * w * a, 4))?);
            let stride = self.image_size as f64 / h as f64;
            let grid = anchor_grid(h, stride, &self.cfg.sizes[level], &self.cfg.ratios);
            anchor_levels.extend(std::iter::repeat(level).take(grid.len()));
            anchors.extend(grid);
        }
        Ok(RpnOutput {
            logits: Tensor::cat(&logits, 1)?,
            deltas: Tensor::cat(&deltas, 1)?,
            anchors,
            anchor_levels,
        })
    }

    /// Decode, clip and suppress the predictions of image `item`.
    pub fn proposals(&self, out: &RpnOutput, item: usize, training: bool) -> Result<ProposalSet> {
        let logits = to_vec_f64(&out.logits.get(item)?)?;
        let deltas = to_vec_f64(&out.deltas.get(item)?)?;
        let size = self.image_size as f64;
        let post = if training { self.cfg.post_nms_train } else { self.cfg.post_nms_test };
        let mut all = ProposalSet::default();
        for level in 0..self.cfg.upsample.len() {
            let mut idx: Vec<usize> = (0..out.anchors.len()).filter(|&i| out.anchor_levels[i] == level).collect();
            idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            idx.truncate(self.cfg.pre_nms_top);
            let mut boxes = Vec::new();
            let mut scores = Vec::new();
            for i in idx {
                let d = [deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]];
                let bx = decode_box(&d, &out.anchors[i]).clip(size, size);
                if bx.width() >= self.cfg.min_size && bx.height() >= self.cfg.min_size && bx.x1.is_finite() && bx.y1.is_finite() {
                    boxes.push(bx);
                    scores.push(1.0 / (1.0 + (-logits[i]).exp()));
                }
            }
            for k in nms(&boxes, &scores, self.cfg.nms_iou) {
                all.boxes.push(boxes[k]);
                all.scores.push(scores[k]);
                all.levels.push(level);
            }
        }
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.sort_by(|&a, &b| all.scores[b].total_cmp(&all.scores[a]).then(a.cmp(&b)));
        order.truncate(post);
        let set = ProposalSet {
            boxes: order.iter().map(|&i| all.boxes[i]).collect(),
            scores: order.iter().map(|&i| all.scores[i]).collect(),
            levels: order.iter().map(|&i| all.levels[i]).collect(),
        };
        set.check_bounds(size)?;
        Ok(set)
    }

    /// Objectness BCE over sampled anchors plus smooth-L1 on positive
    /// anchors' deltas, each averaged over its own count.
    pub fn loss(&self, out: &RpnOutput, gt: &[Vec<BBox>], seed: u64) -> Result<Tensor> {
        let b = out.logits.dims()[0];
        if gt.len() != b {
            return shape_err(format!("{} ground-truth lists for batch {b}", gt.len()));
        }
        let n = out.anchors.len();
        let mut sampled = Vec::new();
        let mut labels = Vec::new();
        let mut pos_idx = Vec::new();
        let mut pos_targets = Vec::new();
        for (item, boxes) in gt.iter().enumerate() {
            let assign = label_anchors(&out.anchors, boxes, self.cfg.fg_iou, self.cfg.bg_iou);
            let pos: Vec<usize> = (0..n).filter(|&i| assign[i].0 == 1).collect();
            let neg: Vec<usize> = (0..n).filter(|&i| assign[i].0 == 0).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (item as u64).wrapping_mul(0x9e37_79b9));
            let max_pos = (self.cfg.batch_per_image as f64 * self.cfg.positive_fraction) as usize;
            let n_pos = pos.len().min(max_pos);
            let n_neg = neg.len().min(self.cfg.batch_per_image - n_pos);
            let mut chosen_pos: Vec<usize> = rand::seq::index::sample(&mut rng, pos.len(), n_pos).into_iter().map(|k| pos[k]).collect();
            let mut chosen_neg: Vec<usize> = rand::seq::index::sample(&mut rng, neg.len(), n_neg).into_iter().map(|k| neg[k]).collect();
            chosen_pos.sort_unstable();
            chosen_neg.sort_unstable();
            for &i in &chosen_pos {
                sampled.push((item * n + i) as u32);
                labels.push(1.0);
                pos_idx.push((item * n + i) as u32);
                pos_targets.extend(encode_box(&boxes[assign[i].1], &out.anchors[i]));
            }
            for &i in &chosen_neg {
                sampled.push((item * n + i) as u32);
                labels.push(0.0);
            }
        }
        let dev = out.logits.device();
        let dtype = out.logits.dtype();
        let flat_logits = out.logits.flatten_all()?;
        let obj = if sampled.is_empty() {
            Tensor::zeros((), dtype, dev)?
        } else {
            let picked = flat_logits.index_select(&Tensor::new(sampled.as_slice(), dev)?, 0)?;
            let targets = Tensor::new(labels.as_slice(), dev)?.to_dtype(dtype)?;
            bce_with_logits_mean(&picked, &targets)?
        };
        let boxes = if pos_idx.is_empty() {
            log::warn!("no positive anchors in this batch; objectness trained on negatives only");
            Tensor::zeros((), dtype, dev)?
        } else {
            let flat_deltas = out.deltas.reshape((b * n, 4))?;
            let picked = flat_deltas.index_select(&Tensor::new(pos_idx.as_slice(), dev)?, 0)?;
            let targets = Tensor::from_vec(pos_targets, (pos_idx.len(), 4), dev)?.to_dtype(dtype)?;
            (smooth_l1_sum(&(picked - targets)?, 1.0)? / pos_idx.len() as f64)?
        };
        Ok((obj + boxes)?)
    }
}

/// Per-anchor `(label, matched gt)`: 1 positive, 0 negative, -1 ignored.
/// Anchors tied for the best IoU with some ground truth are positive even
/// below `fg_iou`.
pub fn label_anchors(anchors: &[BBox], gt: &[BBox], fg_iou: f64, bg_iou: f64) -> Vec<(i8, usize)> {
    if gt.is_empty() {
        return vec![(0, 0); anchors.len()];
    }
    let mut best = vec![(0.0f64, 0usize); anchors.len()];
    let mut gt_best = vec![0.0f64; gt.len()];
    let mut ious = vec![0.0; anchors.len() * gt.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (g, b) in gt.iter().enumerate() {
            let v = a.iou(b);
            ious[i * gt.len() + g] = v;
            if v > best[i].0 {
                best[i] = (v, g);
            }
            gt_best[g] = gt_best[g].max(v);
        }
    }
    let mut out: Vec<(i8, usize)> = best
        .iter()
        .map(|&(v, g)| {
            if v >= fg_iou {
                (1, g)
            } else if v < bg_iou {
                (0, g)
            } else {
                (-1, g)
            }
        })
        .collect();
    for i in 0..anchors.len() {
        for g in 0..gt.len() {
            if gt_best[g] > 0.0 && ious[i * gt.len() + g] == gt_best[g] {
                out[i] = (1, best[i].1);
            }
        }
    }
    out
}
