//! End-to-end prompt generation: channel attention over the encoder map,
//! region proposals on upsampled copies of it, and a RoIAlign-fed head that
//! emits prompt tokens and class logits for every region.

pub mod channel_attention;
pub mod posenc;
pub mod prompt_head;
pub mod roi_align;
pub mod rpn;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use channel_attention::ChannelAttention;
pub use posenc::sinusoidal_2d;
pub use prompt_head::{PromptEmbedding, PromptHead};
pub use roi_align::{roi_align, roi_matrix, ROI_SIZE};
pub use rpn::{anchor_grid, decode_box, encode_box, nms, ProposalSet, Rpn, RpnConfig, RpnOutput};

use crate::encoder::FeatureMap;
use crate::error::{config_err, Result};
use crate::mask::BBox;
use crate::nn::ParamStore;

/// Which map RoIAlign pools from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiSource {
    /// The channel-attended map (prompt tokens see the gate).
    Attended,
    /// The encoder output before channel attention.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EupgConfig {
    pub channel_attention: bool,
    pub reduction: usize,
    pub rpn: RpnConfig,
    pub roi_size: usize,
    pub roi_source: RoiSource,
    pub conv_channels: usize,
    pub hidden: usize,
    pub n_tokens: usize,
    /// Regions per image fed to the classifier during training.
    pub rois_per_image: usize,
    pub roi_positive_fraction: f64,
    pub roi_fg_iou: f64,
    /// Append ground-truth boxes to the training proposals.
    pub add_gt_proposals: bool,
}

impl Default for EupgConfig {
    fn default() -> Self {
        Self {
            channel_attention: true,
            reduction: 4,
            rpn: RpnConfig::default(),
            roi_size: ROI_SIZE,
            roi_source: RoiSource::Attended,
            conv_channels: 8,
            hidden: 128,
            n_tokens: 2,
            rois_per_image: 64,
            roi_positive_fraction: 0.25,
            roi_fg_iou: 0.5,
            add_gt_proposals: true,
        }
    }
}

impl EupgConfig {
    pub fn validate(&self) -> Result<()> {
        self.rpn.validate()?;
        if self.roi_size == 0 || self.n_tokens == 0 || self.rois_per_image == 0 {
            return config_err("roi size, prompt token count and rois per image must be positive");
        }
        if !(0.0..=1.0).contains(&self.roi_positive_fraction) {
            return config_err("roi positive fraction outside [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Eupg {
    pub channel_attention: ChannelAttention,
    pub rpn: Rpn,
    pub head: PromptHead,
    cfg: EupgConfig,
    image_size: usize,
}

impl Eupg {
    pub fn new(
        ps: &ParamStore,
        cfg: &EupgConfig,
        channels: usize,
        image_size: usize,
        decoder_width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            channel_attention: ChannelAttention::new(&ps.pp("ca"), channels, cfg.reduction, cfg.channel_attention)?,
            rpn: Rpn::new(&ps.pp("rpn"), &cfg.rpn, channels, image_size)?,
            head: PromptHead::new(
                &ps.pp("head"),
                channels,
                cfg.roi_size,
                cfg.conv_channels,
                cfg.hidden,
                cfg.n_tokens,
                decoder_width,
                num_classes,
            )?,
            cfg: cfg.clone(),
            image_size,
        })
    }

    pub fn config(&self) -> &EupgConfig {
        &self.cfg
    }

    pub fn attend(&self, feature: &FeatureMap) -> Result<FeatureMap> {
        self.channel_attention.forward(feature)
    }

    /// Prompt embeddings for `boxes` (image pixels) of batch item `item`.
    pub fn prompts(&self, raw: &FeatureMap, attended: &FeatureMap, item: usize, boxes: &[BBox]) -> Result<PromptEmbedding> {
        let source = match self.cfg.roi_source {
            RoiSource::Attended => attended,
            RoiSource::Raw => raw,
        };
        let tokens = source.tokens.get(item)?;
        let pe = sinusoidal_2d(source.h, source.w, source.channels(), tokens.dtype(), tokens.device())?;
        let x = (tokens + pe)?;
        let m = roi_matrix(boxes, source.h, source.w, self.image_size, self.cfg.roi_size);
        let m = Tensor::from_vec(m, (boxes.len() * self.cfg.roi_size.pow(2), source.h * source.w), x.device())?
            .to_dtype(x.dtype())?;
        self.head.forward_pooled(&x, &m, boxes.len())
    }
}

/// Training regions of one image: positives first, then background.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoiSample {
    pub boxes: Vec<BBox>,
    /// 0 is background, `class + 1` otherwise.
    pub labels: Vec<usize>,
    pub matched: Vec<Option<usize>>,
}

impl RoiSample {
    pub fn num_positive(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

/// Match proposals to ground truth at `fg_iou` and sample up to
/// `cfg.rois_per_image` regions with at most the configured positive share.
pub fn sample_rois(proposals: &ProposalSet, gt_boxes: &[BBox], gt_classes: &[usize], cfg: &EupgConfig, seed: u64) -> RoiSample {
    let mut candidates: Vec<BBox> = proposals.boxes.clone();
    if cfg.add_gt_proposals {
        candidates.extend_from_slice(gt_boxes);
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, b) in candidates.iter().enumerate() {
        let best = gt_boxes
            .iter()
            .enumerate()
            .map(|(g, gb)| (b.iou(gb), g))
            .fold((0.0, usize::MAX), |acc, x| if x.0 > acc.0 { x } else { acc });
        if best.1 != usize::MAX && best.0 >= cfg.roi_fg_iou {
            pos.push((i, best.1));
        } else {
            neg.push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_pos = (cfg.rois_per_image as f64 * cfg.roi_positive_fraction).round() as usize;
    let n_pos = pos.len().min(max_pos.max(1));
    let n_neg = neg.len().min(cfg.rois_per_image.saturating_sub(n_pos));
    let mut pick_pos: Vec<usize> = rand::seq::index::sample(&mut rng, pos.len(), n_pos).into_vec();
    let mut pick_neg: Vec<usize> = rand::seq::index::sample(&mut rng, neg.len(), n_neg).into_vec();
    pick_pos.sort_unstable();
    pick_neg.sort_unstable();
    let mut out = RoiSample::default();
    for k in pick_pos {
        let (i, g) = pos[k];
        out.boxes.push(candidates[i]);
        out.labels.push(gt_classes[g] + 1);
        out.matched.push(Some(g));
    }
    for k in pick_neg {
        out.boxes.push(candidates[neg[k]]);
        out.labels.push(0);
        out.matched.push(None);
    }
    out
}
