//! Encoder, prompt generator and mask decoder composed into one model, with
//! the training losses and the inference path.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::{upsample_logits, DecoderConfig, MaskDecoder};
use crate::encoder::{images_to_tensor, EncoderConfig, FeatureMap, VitEncoder};
use crate::eupg::{nms, sample_rois, Eupg, EupgConfig, PromptEmbedding};
use crate::error::{config_err, Result};
use crate::loss::{cross_entropy, mask_target, segmentation_loss};
use crate::mask::{BBox, Mask};
use crate::metrics::{GroundTruth, Prediction};
use crate::nn::{scalar_f64, softmax_last, to_vec_f64, ParamStore};
use crate::synth::AnnotatedImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub class_nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            class_nms_iou: 0.5,
            max_detections: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub eupg: EupgConfig,
    pub decoder: DecoderConfig,
    pub inference: InferenceConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            eupg: EupgConfig::default(),
            decoder: DecoderConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

/// One detected instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub iou_score: f64,
    pub mask: Mask,
}

impl Detection {
    pub fn to_prediction(&self, image_id: u64) -> Prediction {
        Prediction {
            image_id,
            category: self.class_id,
            score: self.score,
            bbox: self.bbox,
            mask: Some(self.mask.clone()),
        }
    }
}

/// Ground truth of a corpus in evaluator form.
pub fn ground_truth(data: &[AnnotatedImage]) -> Vec<GroundTruth> {
    data.iter()
        .flat_map(|img| {
            img.instances
                .iter()
                .filter_map(|inst| GroundTruth::from_mask(img.id, inst.class_id, inst.mask.clone()))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Differentiable task losses of one batch.
#[derive(Debug, Clone)]
pub struct TaskLosses {
    pub cls: Tensor,
    pub rpn: Tensor,
    pub seg: Tensor,
}

impl TaskLosses {
    pub fn task(&self) -> Result<Tensor> {
        Ok(((&self.cls + &self.rpn)? + &self.seg)?)
    }

    /// `(cls, rpn, seg)` as plain numbers.
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        Ok((scalar_f64(&self.cls)?, scalar_f64(&self.rpn)?, scalar_f64(&self.seg)?))
    }
}

#[derive(Debug, Clone)]
pub struct Uwsam {
    pub encoder: VitEncoder,
    pub eupg: Eupg,
    pub decoder: MaskDecoder,
    cfg: ModelConfig,
    dtype: DType,
}

impl Uwsam {
    /// Parameters are created under `encoder.`, `eupg.` and `decoder.`.
    pub fn new(ps: &ParamStore, encoder: &EncoderConfig, cfg: &ModelConfig) -> Result<Self> {
        if cfg.num_classes == 0 {
            return config_err("at least one class is required");
        }
        let enc = VitEncoder::new(&ps.pp("encoder"), encoder)?;
        let eupg = Eupg::new(
            &ps.pp("eupg"),
            &cfg.eupg,
            encoder.dim,
            encoder.image_size,
            cfg.decoder.width,
            cfg.num_classes,
        )?;
        let decoder = MaskDecoder::new(&ps.pp("decoder"), &cfg.decoder, encoder.dim)?;
        Ok(Self {
            encoder: enc,
            eupg,
            decoder,
            cfg: cfg.clone(),
            dtype: ps.dtype(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn image_size(&self) -> usize {
        self.encoder.config().image_size
    }

    /// Classification, proposal and segmentation losses given the final
    /// encoder map of a batch.
    pub fn task_losses(&self, feature: &FeatureMap, targets: &[&AnnotatedImage], seed: u64) -> Result<TaskLosses> {
        let attended = self.eupg.attend(feature)?;
        let rpn_out = self.eupg.rpn.forward(&attended)?;
        let gt_boxes: Vec<Vec<BBox>> = targets.iter().map(|t| t.instances.iter().map(|i| i.bbox).collect()).collect();
        let rpn = self.eupg.rpn.loss(&rpn_out, &gt_boxes, seed)?;

        let mut class_logits = Vec::new();
        let mut labels = Vec::new();
        let mut mask_logits = Vec::new();
        let mut iou_preds = Vec::new();
        let mut mask_targets = Vec::new();
        for (b, t) in targets.iter().enumerate() {
            let proposals = self.eupg.rpn.proposals(&rpn_out, b, true)?;
            let classes: Vec<usize> = t.instances.iter().map(|i| i.class_id).collect();
            let item_seed = seed.wrapping_add(0x51_7cc1_b727_220a_u64.wrapping_mul(b as u64 + 1));
            let rois = sample_rois(&proposals, &gt_boxes[b], &classes, self.eupg.config(), item_seed);
            if rois.boxes.is_empty() {
                continue;
            }
            let prompts = self.eupg.prompts(feature, &attended, b, &rois.boxes)?;
            class_logits.push(prompts.class_logits.clone());
            labels.extend_from_slice(&rois.labels);
            let n_pos = rois.num_positive();
            if n_pos > 0 {
                let pos = PromptEmbedding {
                    tokens: prompts.tokens.narrow(0, 0, n_pos)?,
                    class_logits: prompts.class_logits.narrow(0, 0, n_pos)?,
                };
                let out = self.decoder.decode(feature, b, &pos)?;
                for g in rois.matched.iter().take(n_pos).flatten() {
                    mask_targets.push(mask_target(&t.instances[*g].mask, out.mask_h, out.mask_w));
                }
                mask_logits.push(out.mask_logits);
                iou_preds.push(out.iou);
            }
        }
        let dev = feature.tokens.device();
        let dtype = feature.tokens.dtype();
        let cls = if class_logits.is_empty() {
            Tensor::zeros((), dtype, dev)?
        } else {
            cross_entropy(&Tensor::cat(&class_logits, 0)?, &labels)?
        };
        let seg = if mask_logits.is_empty() {
            Tensor::zeros((), dtype, dev)?
        } else {
            segmentation_loss(&Tensor::cat(&mask_logits, 0)?, &Tensor::cat(&iou_preds, 0)?, &mask_targets)?
        };
        Ok(TaskLosses { cls, rpn, seg })
    }

    /// Encode a batch of images and return the final encoder map.
    pub fn encode(&self, images: &[&AnnotatedImage]) -> Result<FeatureMap> {
        let arrays: Vec<_> = images.iter().map(|i| &i.image).collect();
        let x = images_to_tensor(&arrays, self.dtype)?;
        Ok(self.encoder.encode(&x)?.last().clone())
    }

    /// Detections for each image of a batch.
    pub fn predict(&self, images: &[&AnnotatedImage]) -> Result<Vec<Vec<Detection>>> {
        let feature = self.encode(images)?.detach();
        self.predict_from_feature(&feature)
    }

    pub fn predict_from_feature(&self, feature: &FeatureMap) -> Result<Vec<Vec<Detection>>> {
        let inf = &self.cfg.inference;
        let size = self.image_size();
        let attended = self.eupg.attend(feature)?;
        let rpn_out = self.eupg.rpn.forward(&attended)?;
        let mut out = Vec::with_capacity(feature.batch());
        for b in 0..feature.batch() {
            let proposals = self.eupg.rpn.proposals(&rpn_out, b, false)?;
            if proposals.is_empty() {
                out.push(Vec::new());
                continue;
            }
            let prompts = self.eupg.prompts(feature, &attended, b, &proposals.boxes)?;
            let probs = to_vec_f64(&softmax_last(&prompts.class_logits)?)?;
            let k = self.cfg.num_classes + 1;
            // (proposal, class, score) candidates above threshold
            let mut cands: Vec<(usize, usize, f64)> = Vec::new();
            for (i, row) in probs.chunks(k).enumerate() {
                let (c, p) = row[1..]
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
                if p >= inf.score_threshold {
                    cands.push((i, c, p));
                }
            }
            let mut kept: Vec<(usize, usize, f64)> = Vec::new();
            for class in 0..self.cfg.num_classes {
                let group: Vec<&(usize, usize, f64)> = cands.iter().filter(|c| c.1 == class).collect();
                let boxes: Vec<BBox> = group.iter().map(|c| proposals.boxes[c.0]).collect();
                let scores: Vec<f64> = group.iter().map(|c| c.2).collect();
                kept.extend(nms(&boxes, &scores, inf.class_nms_iou).into_iter().map(|j| *group[j]));
            }
            kept.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            kept.truncate(inf.max_detections);
            if kept.is_empty() {
                out.push(Vec::new());
                continue;
            }
            let idx = Tensor::new(kept.iter().map(|c| c.0 as u32).collect::<Vec<_>>().as_slice(), feature.tokens.device())?;
            let sel = PromptEmbedding {
                tokens: prompts.tokens.index_select(&idx, 0)?,
                class_logits: prompts.class_logits.index_select(&idx, 0)?,
            };
            let dec = self.decoder.decode(feature, b, &sel)?;
            let logits = to_vec_f64(&upsample_logits(&dec.mask_logits, size, size)?)?;
            let ious = to_vec_f64(&dec.iou)?;
            let dets = kept
                .iter()
                .enumerate()
                .map(|(j, &(i, c, p))| Detection {
                    bbox: proposals.boxes[i],
                    class_id: c,
                    score: p,
                    iou_score: ious[j],
                    mask: Mask::from_fn(size, size, |y, x| logits[j * size * size + y * size + x] > 0.0),
                })
                .collect();
            out.push(dets);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthetic_corpus, SceneConfig};

    fn tiny() -> (EncoderConfig, ModelConfig) {
        let enc = EncoderConfig {
            image_size: 64,
            patch_size: 16,
            depth: 2,
            dim: 16,
            heads: 2,
            ..EncoderConfig::student()
        };
        let mut cfg = ModelConfig::default();
        cfg.decoder.width = 16;
        cfg.decoder.heads = 2;
        cfg.eupg.hidden = 16;
        (enc, cfg)
    }

    #[test]
    fn losses_are_finite_and_reach_every_part() {
        let (enc, cfg) = tiny();
        let scene = SceneConfig {
            image_size: 64,
            min_radius: 5.0,
            max_radius: 12.0,
            ..SceneConfig::default()
        };
        let data = synthetic_corpus(1, 2, &scene).unwrap();
        let ps = ParamStore::new(0, DType::F32);
        let model = Uwsam::new(&ps, &enc, &cfg).unwrap();
        let refs: Vec<&AnnotatedImage> = data.iter().collect();
        let f = model.encode(&refs).unwrap();
        let losses = model.task_losses(&f, &refs, 3).unwrap();
        let (c, r, s) = losses.values().unwrap();
        assert!(c > 0.0 && r > 0.0 && s > 0.0, "{c} {r} {s}");
        let grads = losses.task().unwrap().backward().unwrap();
        for prefix in ["encoder.", "eupg.ca.", "eupg.rpn.", "eupg.head.", "decoder."] {
            assert!(
                ps.vars().iter().any(|(n, v)| n.starts_with(prefix) && grads.get(v.as_tensor()).is_some()),
                "{prefix}"
            );
        }
        let dets = model.predict(&refs).unwrap();
        assert_eq!(dets.len(), 2);
        for d in dets.iter().flatten() {
            assert!(d.score >= 0.05 && d.class_id < 4);
            assert_eq!((d.mask.height(), d.mask.width()), (64, 64));
        }
    }
}
