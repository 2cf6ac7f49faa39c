//! Random horizontal flip, up-scaling and cropping for training images.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::interp::resize_bilinear;
use crate::mask::Mask;
use crate::synth::{AnnotatedImage, Instance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip: bool,
    /// Scale factors are drawn uniformly from this range before cropping
    /// back to the original size.
    pub scale: [f64; 2],
    /// Instances left with fewer pixels than this are dropped.
    pub min_area: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip: true,
            scale: [1.0, 1.25],
            min_area: 16,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale[0] >= 1.0 && self.scale[1] >= self.scale[0]) {
            return config_err("augmentation scale range must satisfy 1 <= lo <= hi");
        }
        Ok(())
    }
}

fn flip_image(img: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, k)| img[[y, w - 1 - x, k]])
}

fn flip_mask(m: &Mask) -> Mask {
    let w = m.width();
    Mask::from_fn(m.height(), w, |y, x| m.get(y, w - 1 - x))
}

fn crop_mask(m: &Mask, oy: usize, ox: usize, h: usize, w: usize) -> Mask {
    Mask::from_fn(h, w, |y, x| m.get(y + oy, x + ox))
}

/// Apply the configured random transforms, drawn from a stream seeded by
/// `seed`. Image size is preserved.
pub fn augment(item: &AnnotatedImage, cfg: &AugmentConfig, seed: u64) -> AnnotatedImage {
    if !cfg.enabled {
        return item.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, _) = item.image.dim();
    let flip = cfg.flip && rng.random_bool(0.5);
    let scale = if cfg.scale[1] > cfg.scale[0] {
        rng.random_range(cfg.scale[0]..cfg.scale[1])
    } else {
        cfg.scale[0]
    };
    let (sh, sw) = (((h as f64) * scale).round() as usize, ((w as f64) * scale).round() as usize);
    let oy = if sh > h { rng.random_range(0..=sh - h) } else { 0 };
    let ox = if sw > w { rng.random_range(0..=sw - w) } else { 0 };

    let mut image = if flip { flip_image(&item.image) } else { item.image.clone() };
    if (sh, sw) != (h, w) {
        let mut scaled = Array3::zeros((sh, sw, 3));
        for c in 0..3 {
            let chan: Vec<f64> = image.iter().skip(c).step_by(3).copied().collect();
            let r = resize_bilinear(&chan, h, w, sh, sw);
            for (i, v) in r.into_iter().enumerate() {
                scaled[[i / sw, i % sw, c]] = v;
            }
        }
        image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| scaled[[y + oy, x + ox, c]]);
    }
    let instances = item
        .instances
        .iter()
        .filter_map(|inst| {
            let mut m = if flip { flip_mask(&inst.mask) } else { inst.mask.clone() };
            if (sh, sw) != (h, w) {
                m = crop_mask(&m.resize_nearest(sh, sw), oy, ox, h, w);
            }
            if m.area() < cfg.min_area {
                return None;
            }
            Instance::from_mask(m, inst.class_id)
        })
        .collect();
    AnnotatedImage {
        image,
        instances,
        ..item.clone()
    }
}
