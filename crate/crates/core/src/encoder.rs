//! Patch-embedding transformer image encoders with per-layer feature taps.

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::{Act, Attention, Init, LayerNorm, Mlp, ParamStore};

/// Token grid `(batch, h·w, channels)` emitted by an encoder layer.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tokens: Tensor,
    pub h: usize,
    pub w: usize,
}

impl FeatureMap {
    pub fn new(tokens: Tensor, h: usize, w: usize) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        if n != h * w {
            return shape_err(format!("{n} tokens cannot form a {h}x{w} grid"));
        }
        Ok(Self { tokens, h, w })
    }

    pub fn batch(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.tokens.dims()[2]
    }

    /// One batch element as a batch of one.
    pub fn item(&self, i: usize) -> Result<FeatureMap> {
        Ok(Self {
            tokens: self.tokens.narrow(0, i, 1)?,
            h: self.h,
            w: self.w,
        })
    }

    /// `(batch, channels, h, w)` layout for convolutional heads.
    pub fn to_nchw(&self) -> Result<Tensor> {
        let (b, _, c) = self.tokens.dims3()?;
        Ok(self
            .tokens
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, c, self.h, self.w))?)
    }

    pub fn from_nchw(x: &Tensor) -> Result<Self> {
        let (b, c, h, w) = x.dims4()?;
        Ok(Self {
            tokens: x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?,
            h,
            w,
        })
    }

    pub fn detach(&self) -> FeatureMap {
        Self {
            tokens: self.tokens.detach(),
            h: self.h,
            w: self.w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub role: Role,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::student()
    }
}

impl EncoderConfig {
    pub fn teacher() -> Self {
        Self {
            image_size: 128,
            patch_size: 16,
            depth: 8,
            dim: 128,
            heads: 4,
            mlp_ratio: 4,
            role: Role::Teacher,
        }
    }

    pub fn student() -> Self {
        Self {
            image_size: 128,
            patch_size: 16,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            role: Role::Student,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return config_err(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return config_err(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.depth == 0 {
            return config_err("encoder depth must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn new(ps: &ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&ps.pp("ln1"), cfg.dim)?,
            attn: Attention::new(&ps.pp("attn"), cfg.dim, cfg.dim, cfg.heads)?,
            ln2: LayerNorm::new(&ps.pp("ln2"), cfg.dim)?,
            mlp: Mlp::new(&ps.pp("mlp"), &[cfg.dim, cfg.dim * cfg.mlp_ratio, cfg.dim], Act::Gelu)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.ln1.forward(x)?;
        let (a, probs) = self.attn.forward_with_probs(&h, &h, &h)?;
        let x = (x + a)?;
        let x = (&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?;
        Ok((x, probs))
    }
}

/// Per-layer outputs `F¹..Fⁿ`; the last one feeds the prompt generator and
/// decoder.
#[derive(Debug, Clone)]
pub struct LayerTapOutput {
    pub maps: Vec<FeatureMap>,
}

impl LayerTapOutput {
    pub fn depth(&self) -> usize {
        self.maps.len()
    }

    /// 1-indexed layer access.
    pub fn layer(&self, l: usize) -> Option<&FeatureMap> {
        l.checked_sub(1).and_then(|i| self.maps.get(i))
    }

    pub fn last(&self) -> &FeatureMap {
        self.maps.last().expect("encoder depth is positive")
    }
}

/// Pre-norm ViT: linear patch embedding, learned positional embedding,
/// GELU MLP blocks. Taps are block outputs after both residual additions.
#[derive(Debug, Clone)]
pub struct VitEncoder {
    cfg: EncoderConfig,
    patch_embed: crate::nn::Linear,
    pos_embed: Tensor,
    blocks: Vec<Block>,
}

impl VitEncoder {
    pub fn new(ps: &ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.grid() * cfg.grid();
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: crate::nn::Linear::new(&ps.pp("patch_embed"), patch_dim, cfg.dim)?,
            pos_embed: ps.get("pos_embed", &[n, cfg.dim], Init::Normal(0.02))?,
            blocks: (0..cfg.depth)
                .map(|i| Block::new(&ps.pp(format!("blocks.{i}")), cfg))
                .collect::<Result<_>>()?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        let s = self.cfg.image_size;
        if c != 3 || h != s || w != s {
            return shape_err(format!("encoder expects (B, 3, {s}, {s}) images, got {:?}", images.dims()));
        }
        let p = self.cfg.patch_size;
        let g = s / p;
        Ok(images
            .reshape(vec![b, 3, g, p, g, p])?
            .permute(vec![0, 2, 4, 1, 3, 5])?
            .contiguous()?
            .reshape((b, g * g, 3 * p * p))?)
    }

    /// Encode a `(batch, 3, size, size)` image tensor, returning every
    /// block's output and its attention probabilities.
    pub fn encode_with_attention(&self, images: &Tensor) -> Result<(LayerTapOutput, Vec<Tensor>)> {
        let g = self.cfg.grid();
        let mut x = self
            .patch_embed
            .forward(&self.patchify(images)?)?
            .broadcast_add(&self.pos_embed)?;
        let mut maps = Vec::with_capacity(self.blocks.len());
        let mut probs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, p) = block.forward(&x)?;
            x = y;
            maps.push(FeatureMap::new(x.clone(), g, g)?);
            probs.push(p);
        }
        Ok((LayerTapOutput { maps }, probs))
    }

    pub fn encode(&self, images: &Tensor) -> Result<LayerTapOutput> {
        Ok(self.encode_with_attention(images)?.0)
    }
}

const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

/// Stack `(h, w, 3)` images into a normalized `(batch, 3, h, w)` tensor.
pub fn images_to_tensor(images: &[&Array3<f64>], dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return shape_err("empty image batch");
    };
    let (h, w, _) = first.dim();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dim() != (h, w, 3) {
            return shape_err(format!("batch mixes image shapes {:?} and {:?}", first.dim(), img.dim()));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push((img[[y, x, c]] - PIXEL_MEAN) / PIXEL_STD);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Teacher layer paired with student layer `l` (both 1-indexed):
/// `round(l · depth_t / depth_s)` clamped to `[1, depth_t]`.
pub fn teacher_layer_for(l: usize, depth_t: usize, depth_s: usize) -> usize {
    let rounded = (2 * l * depth_t + depth_s) / (2 * depth_s);
    rounded.clamp(1, depth_t)
}

/// Validate and sort student tap layers.
pub fn normalize_tap_layers(student_layers: &[usize], depth_s: usize) -> Result<Vec<usize>> {
    if student_layers.is_empty() {
        return config_err("at least one tap layer is required");
    }
    let mut layers = student_layers.to_vec();
    layers.sort_unstable();
    layers.dedup();
    if let Some(bad) = layers.iter().find(|&&l| l == 0 || l > depth_s) {
        return config_err(format!("tap layer {bad} outside student depth 1..={depth_s}"));
    }
    Ok(layers)
}

/// `(teacher map, student map)` for each requested student layer, ascending.
pub fn tap_pairs(
    teacher: &LayerTapOutput,
    student: &LayerTapOutput,
    student_layers: &[usize],
) -> Result<Vec<(FeatureMap, FeatureMap)>> {
    let layers = normalize_tap_layers(student_layers, student.depth())?;
    layers
        .iter()
        .map(|&l| {
            let lt = teacher_layer_for(l, teacher.depth(), student.depth());
            Ok((
                teacher.layer(lt).expect("clamped index").clone(),
                student.layer(l).expect("validated index").clone(),
            ))
        })
        .collect()
}
