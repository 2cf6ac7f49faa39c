//! Two-way transformer mask decoder.
//!
//! Output tokens `[IoU, mask]` are prepended to each instance's prompt
//! tokens. Two blocks alternate token self-attention, token→image and
//! image→token cross-attention; a final token→image attention follows. The
//! image side is upscaled 4× by two 2×2/stride-2 transposed convolutions
//! and dotted with a hypernetwork projection of the mask token.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::eupg::{sinusoidal_2d, PromptEmbedding};
use crate::error::{config_err, shape_err, Result};
use crate::interp::bilinear_matrix_2d;
use crate::nn::{sigmoid, Act, Attention, Init, LayerNorm, Linear, Mlp, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 4,
            blocks: 2,
            mlp_dim: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width % 8 != 0 || self.width == 0 {
            return config_err(format!("decoder width {} must be a positive multiple of 8", self.width));
        }
        if self.width % self.heads != 0 {
            return config_err("decoder width must be divisible by its head count");
        }
        Ok(())
    }
}

/// Learnable output tokens; order `[IoU, mask]`.
#[derive(Debug, Clone)]
pub struct DecoderTokens {
    pub iou: Tensor,
    pub mask: Tensor,
}

impl DecoderTokens {
    pub fn new(ps: &ParamStore, width: usize) -> Result<Self> {
        Ok(Self {
            iou: ps.get("iou_token", &[1, width], Init::Normal(1.0))?,
            mask: ps.get("mask_token", &[1, width], Init::Normal(1.0))?,
        })
    }

    /// `(r, 2 + n, d)` sequence `[IoU, mask, prompts...]`.
    pub fn prepend(&self, prompts: &Tensor) -> Result<Tensor> {
        let (r, _, d) = prompts.dims3()?;
        let out = Tensor::cat(&[&self.iou, &self.mask], 0)?.unsqueeze(0)?.broadcast_as((r, 2, d))?;
        Ok(Tensor::cat(&[&out, prompts], 1)?)
    }
}

/// Mask logits `(r, 4h, 4w)` and IoU scores `(r,)` in (0, 1).
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub mask_logits: Tensor,
    pub iou: Tensor,
    pub mask_h: usize,
    pub mask_w: usize,
}

/// Attention probabilities of one decode, for inspection.
pub type AttentionTrace = Vec<Tensor>;

#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_t2i: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_i2t: Attention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn new(ps: &ParamStore, cfg: &DecoderConfig, skip_first_pe: bool) -> Result<Self> {
        let d = cfg.width;
        Ok(Self {
            self_attn: Attention::new(&ps.pp("self_attn"), d, d, cfg.heads)?,
            norm1: LayerNorm::new(&ps.pp("norm1"), d)?,
            cross_t2i: Attention::new(&ps.pp("cross_t2i"), d, d / 2, cfg.heads)?,
            norm2: LayerNorm::new(&ps.pp("norm2"), d)?,
            mlp: Mlp::new(&ps.pp("mlp"), &[d, cfg.mlp_dim, d], Act::Relu)?,
            norm3: LayerNorm::new(&ps.pp("norm3"), d)?,
            cross_i2t: Attention::new(&ps.pp("cross_i2t"), d, d / 2, cfg.heads)?,
            norm4: LayerNorm::new(&ps.pp("norm4"), d)?,
            skip_first_pe,
        })
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
        trace: &mut AttentionTrace,
    ) -> Result<(Tensor, Tensor)> {
        let q = if self.skip_first_pe {
            let (out, p) = self.self_attn.forward_with_probs(queries, queries, queries)?;
            trace.push(p);
            out
        } else {
            let qp = (queries + query_pe)?;
            let (out, p) = self.self_attn.forward_with_probs(&qp, &qp, queries)?;
            trace.push(p);
            (queries + out)?
        };
        let q = self.norm1.forward(&q)?;

        let qp = (&q + query_pe)?;
        let kp = keys.broadcast_add(key_pe)?;
        let (out, p) = self.cross_t2i.forward_with_probs(&qp, &kp, keys)?;
        trace.push(p);
        let q = self.norm2.forward(&(q + out)?)?;

        let q = self.norm3.forward(&(&q + self.mlp.forward(&q)?)?)?;

        let qp = (&q + query_pe)?;
        let (out, p) = self.cross_i2t.forward_with_probs(&kp, &qp, &q)?;
        trace.push(p);
        let k = self.norm4.forward(&(keys + out)?)?;
        Ok((q, k))
    }
}

/// 2×2, stride-2 transposed convolution over channels-last maps, written as
/// a per-pixel linear map followed by a pixel shuffle.
#[derive(Debug, Clone)]
struct UpConv {
    proj: Linear,
    bias: Tensor,
    out: usize,
}

impl UpConv {
    fn new(ps: &ParamStore, in_dim: usize, out: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::no_bias(&ps.pp("proj"), in_dim, 4 * out)?,
            bias: ps.get("bias", &[out], Init::Zeros)?,
            out,
        })
    }

    /// `(r, h, w, c)` → `(r, 2h, 2w, out)`
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (r, h, w, _) = x.dims4()?;
        let y = self.proj.forward(x)?.reshape(vec![r, h, w, 2, 2, self.out])?;
        let y = y.permute(vec![0, 1, 3, 2, 4, 5])?.reshape((r, 2 * h, 2 * w, self.out))?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    neck: Linear,
    neck_norm: LayerNorm,
    pub tokens: DecoderTokens,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    final_norm: LayerNorm,
    up1: UpConv,
    up_norm: LayerNorm,
    up2: UpConv,
    hyper: Mlp,
    iou_head: Mlp,
    cfg: DecoderConfig,
    encoder_dim: usize,
}

impl MaskDecoder {
    pub fn new(ps: &ParamStore, cfg: &DecoderConfig, encoder_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let blocks = (0..cfg.blocks)
            .map(|i| TwoWayBlock::new(&ps.pp(format!("blocks.{i}")), cfg, i == 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            neck: Linear::new(&ps.pp("neck"), encoder_dim, d)?,
            neck_norm: LayerNorm::new(&ps.pp("neck_norm"), d)?,
            tokens: DecoderTokens::new(ps, d)?,
            blocks,
            final_attn: Attention::new(&ps.pp("final_attn"), d, d / 2, cfg.heads)?,
            final_norm: LayerNorm::new(&ps.pp("final_norm"), d)?,
            up1: UpConv::new(&ps.pp("up1"), d, d / 4)?,
            up_norm: LayerNorm::new(&ps.pp("up_norm"), d / 4)?,
            up2: UpConv::new(&ps.pp("up2"), d / 4, d / 8)?,
            hyper: Mlp::new(&ps.pp("hyper"), &[d, d, d / 8], Act::Relu)?,
            iou_head: Mlp::new(&ps.pp("iou_head"), &[d, d, 1], Act::Relu)?,
            cfg: cfg.clone(),
            encoder_dim,
        })
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    pub fn decode(&self, image: &FeatureMap, item: usize, prompts: &PromptEmbedding) -> Result<DecodeOutput> {
        Ok(self.decode_traced(image, item, prompts)?.0)
    }

    /// Decode every prompt of batch item `item` against its image map. Also
    /// returns every attention probability tensor computed on the way.
    pub fn decode_traced(&self, image: &FeatureMap, item: usize, prompts: &PromptEmbedding) -> Result<(DecodeOutput, AttentionTrace)> {
        let (r, _, pd) = prompts.tokens.dims3()?;
        let d = self.cfg.width;
        if pd != d {
            return shape_err(format!("prompt width {pd} does not match decoder width {d}"));
        }
        if image.channels() != self.encoder_dim {
            return shape_err(format!("decoder expects {}-channel features, got {}", self.encoder_dim, image.channels()));
        }
        let (h, w) = (image.h, image.w);
        let n = h * w;
        let src = self.neck_norm.forward(&self.neck.forward(&image.tokens.get(item)?)?)?;
        let keys = src.unsqueeze(0)?.broadcast_as((r, n, d))?.contiguous()?;
        let key_pe = sinusoidal_2d(h, w, d, src.dtype(), src.device())?.unsqueeze(0)?;
        let query_pe = self.tokens.prepend(&prompts.tokens)?;
        let mut queries = query_pe.clone();
        let mut keys = keys;
        let mut trace = Vec::new();
        for block in &self.blocks {
            let (q, k) = block.forward(&queries, &keys, &query_pe, &key_pe, &mut trace)?;
            queries = q;
            keys = k;
        }
        let qp = (&queries + &query_pe)?;
        let kp = keys.broadcast_add(&key_pe)?;
        let (out, p) = self.final_attn.forward_with_probs(&qp, &kp, &keys)?;
        trace.push(p);
        let queries = self.final_norm.forward(&(queries + out)?)?;

        let iou_out = queries.narrow(1, 0, 1)?.squeeze(1)?;
        let mask_out = queries.narrow(1, 1, 1)?;

        let grid = keys.reshape((r, h, w, d))?;
        let up = self.up1.forward(&grid)?;
        let up = self.up_norm.forward(&up)?.gelu_erf()?;
        let up = self.up2.forward(&up)?.gelu_erf()?;
        let (mh, mw) = (4 * h, 4 * w);
        let up = up.reshape((r, mh * mw, d / 8))?;
        let hyper = self.hyper.forward(&mask_out)?; // (r, 1, d/8)
        let logits = hyper.matmul(&up.t()?)?.reshape((r, mh, mw))?;
        let iou = sigmoid(&self.iou_head.forward(&iou_out)?)?.reshape(r)?;
        Ok((
            DecodeOutput {
                mask_logits: logits,
                iou,
                mask_h: mh,
                mask_w: mw,
            },
            trace,
        ))
    }
}

/// Upsample `(r, h, w)` mask logits to `(r, out, out)` bilinearly. Used at
/// inference only; the result carries no gradient.
pub fn upsample_logits(logits: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (r, h, w) = logits.dims3()?;
    let m = Tensor::from_vec(bilinear_matrix_2d(h, w, out_h, out_w), (out_h * out_w, h * w), logits.device())?
        .to_dtype(logits.dtype())?;
    let flat = logits.detach().reshape((r, h * w))?;
    Ok(flat.matmul(&m.t()?)?.reshape((r, out_h, out_w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_vars, worst};
    use crate::nn::to_vec_f64;
    use candle_core::{DType, Device};

    fn tiny() -> DecoderConfig {
        DecoderConfig {
            width: 8,
            heads: 2,
            blocks: 2,
            mlp_dim: 8,
        }
    }

    fn inputs(r: usize, d: usize, c: usize) -> (FeatureMap, PromptEmbedding) {
        let f = FeatureMap::new(Tensor::randn(0f64, 1.0, (1, 9, c), &Device::Cpu).unwrap(), 3, 3).unwrap();
        let p = PromptEmbedding {
            tokens: Tensor::randn(0f64, 1.0, (r, 2, d), &Device::Cpu).unwrap(),
            class_logits: Tensor::zeros((r, 2), DType::F64, &Device::Cpu).unwrap(),
        };
        (f, p)
    }

    #[test]
    fn shapes_and_attention_rows() {
        let ps = ParamStore::new(0, DType::F64);
        let dec = MaskDecoder::new(&ps, &tiny(), 6).unwrap();
        let (f, p) = inputs(3, 8, 6);
        let (out, trace) = dec.decode_traced(&f, 0, &p).unwrap();
        assert_eq!(out.mask_logits.dims(), &[3, 12, 12]);
        assert_eq!(out.iou.dims(), &[3]);
        assert!(to_vec_f64(&out.iou).unwrap().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(trace.len(), 2 * 3 + 1);
        for probs in trace {
            let sums = to_vec_f64(&probs.sum(candle_core::D::Minus1).unwrap()).unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn zero_parameters_give_empty_masks() {
        let ps = ParamStore::new(0, DType::F64);
        let dec = MaskDecoder::new(&ps, &tiny(), 6).unwrap();
        for (name, var) in ps.vars() {
            ps.set(&name, &var.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let (f, p) = inputs(2, 8, 6);
        let out = dec.decode(&f, 0, &p).unwrap();
        assert!(to_vec_f64(&out.mask_logits).unwrap().iter().all(|v| *v == 0.0));
        assert!(to_vec_f64(&out.iou).unwrap().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let ps = ParamStore::new(0, DType::F64);
        let dec = MaskDecoder::new(&ps, &tiny(), 6).unwrap();
        let (f, p) = inputs(1, 16, 6);
        assert!(dec.decode(&f, 0, &p).is_err());
    }

    #[test]
    fn permuting_prompts_permutes_outputs() {
        let ps = ParamStore::new(3, DType::F64);
        let dec = MaskDecoder::new(&ps, &tiny(), 6).unwrap();
        let (f, p) = inputs(3, 8, 6);
        let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let q = PromptEmbedding {
            tokens: p.tokens.index_select(&perm, 0).unwrap(),
            class_logits: p.class_logits.clone(),
        };
        let a = dec.decode(&f, 0, &p).unwrap();
        let b = dec.decode(&f, 0, &q).unwrap();
        let a_perm = to_vec_f64(&a.mask_logits.index_select(&perm, 0).unwrap()).unwrap();
        for (x, y) in a_perm.iter().zip(to_vec_f64(&b.mask_logits).unwrap()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn token_to_mask_gradients_match_finite_differences() {
        let ps = ParamStore::new(8, DType::F64);
        let dec = MaskDecoder::new(&ps, &tiny(), 4).unwrap();
        let f = FeatureMap::new(Tensor::randn(0f64, 1.0, (1, 4, 4), &Device::Cpu).unwrap(), 2, 2).unwrap();
        let p = PromptEmbedding {
            tokens: Tensor::randn(0f64, 1.0, (2, 2, 8), &Device::Cpu).unwrap(),
            class_logits: Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap(),
        };
        let w = Tensor::randn(0f64, 1.0, (2, 8, 8), &Device::Cpu).unwrap();
        let loss = || -> crate::Result<Tensor> {
            let out = dec.decode(&f, 0, &p)?;
            Ok(((out.mask_logits * &w)?.sum_all()? + out.iou.sum_all()?)?)
        };
        let vars: Vec<_> = ps
            .vars()
            .into_iter()
            .filter(|(n, _)| n.contains("token") || n.starts_with("hyper") || n.starts_with("up") || n.starts_with("final_attn") || n.starts_with("iou_head"))
            .collect();
        let reports = check_vars(&vars, &loss, 1e-6, 8).unwrap();
        assert!(worst(&reports) < 1e-4, "{reports:?}");
    }

    #[test]
    fn logits_upsample_to_image_size() {
        let t = Tensor::ones((2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let up = upsample_logits(&t, 16, 16).unwrap();
        assert_eq!(up.dims(), &[2, 16, 16]);
        assert!(to_vec_f64(&up).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }
}
