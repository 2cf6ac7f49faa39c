//! Quantization-free pooling of box regions to a fixed grid.
//!
//! Half-pixel aligned coordinates; each output bin averages a
//! `ceil(bin_h) × ceil(bin_w)` grid of bilinear samples (at least one).
//! The sampling weights form a constant matrix, so the result is linear in
//! the feature map and differentiable with respect to it.

use candle_core::Tensor;

use crate::error::{shape_err, Result};
use crate::mask::BBox;

pub const ROI_SIZE: usize = 14;

/// Bilinear weights of point `(y, x)` on an `h × w` grid, following the
/// usual RoIAlign edge handling: points more than one pixel outside
/// contribute nothing, points just outside clamp to the border.
fn bilinear_point(y: f64, x: f64, h: usize, w: usize, out: &mut [f64], weight: f64) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let y1;
    let x1;
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    out[y0 * w + x0] += weight * hy * hx;
    out[y0 * w + x1] += weight * hy * lx;
    out[y1 * w + x0] += weight * ly * hx;
    out[y1 * w + x1] += weight * ly * lx;
}

/// `(out·out, h·w)` sampling matrix of one box given in feature-map pixels.
pub fn roi_weights(b: &BBox, h: usize, w: usize, out: usize) -> Vec<f64> {
    let n = h * w;
    let mut m = vec![0.0; out * out * n];
    let (x1, y1) = (b.x1 - 0.5, b.y1 - 0.5);
    let bin_w = (b.x2 - b.x1).max(0.0) / out as f64;
    let bin_h = (b.y2 - b.y1).max(0.0) / out as f64;
    let sy = (bin_h.ceil() as usize).max(1);
    let sx = (bin_w.ceil() as usize).max(1);
    let weight = 1.0 / (sy * sx) as f64;
    for py in 0..out {
        for px in 0..out {
            let row = &mut m[(py * out + px) * n..(py * out + px + 1) * n];
            for iy in 0..sy {
                let y = y1 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sy as f64;
                for ix in 0..sx {
                    let x = x1 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sx as f64;
                    bilinear_point(y, x, h, w, row, weight);
                }
            }
        }
    }
    m
}

/// Stacked `(boxes·out·out, h·w)` sampling matrix of `boxes` given in image
/// pixels.
pub fn roi_matrix(boxes: &[BBox], h: usize, w: usize, image_size: usize, out: usize) -> Vec<f64> {
    let (sx, sy) = (w as f64 / image_size as f64, h as f64 / image_size as f64);
    let mut m = Vec::with_capacity(boxes.len() * out * out * h * w);
    for b in boxes {
        m.extend(roi_weights(&b.scale(sx, sy), h, w, out));
    }
    m
}

/// Pool each box (image pixels) from `tokens + pos_enc`.
///
/// `tokens`: `(h·w, c)` for one image; `pos_enc`: same shape or `None`.
/// Returns `(boxes, out, out, c)`.
pub fn roi_align(
    tokens: &Tensor,
    pos_enc: Option<&Tensor>,
    h: usize,
    w: usize,
    boxes: &[BBox],
    image_size: usize,
    out: usize,
) -> Result<Tensor> {
    let (n, c) = tokens.dims2()?;
    if n != h * w {
        return shape_err(format!("{n} tokens do not form a {h}x{w} grid"));
    }
    let x = match pos_enc {
        Some(pe) => {
            if pe.dims() != tokens.dims() {
                return shape_err(format!("positional encoding {:?} vs features {:?}", pe.dims(), tokens.dims()));
            }
            (tokens + pe)?
        }
        None => tokens.clone(),
    };
    let weights = roi_matrix(boxes, h, w, image_size, out);
    let m = Tensor::from_vec(weights, (boxes.len() * out * out, n), tokens.device())?.to_dtype(tokens.dtype())?;
    Ok(m.matmul(&x)?.reshape((boxes.len(), out, out, c))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::resize_bilinear;
    use crate::nn::to_vec_f64;
    use candle_core::Device;

    fn grid(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> (Vec<f64>, Tensor) {
        let mut v = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    v.push(f(y, x, k));
                }
            }
        }
        let t = Tensor::from_vec(v.clone(), (h * w, c), &Device::Cpu).unwrap();
        (v, t)
    }

    #[test]
    fn full_box_on_matching_grid_is_identity() {
        let (v, t) = grid(14, 14, 3, |y, x, k| (y * 31 + x * 7 + k) as f64 * 0.01 - 1.0);
        let out = roi_align(&t, None, 14, 14, &[BBox::new(0.0, 0.0, 112.0, 112.0)], 112, 14).unwrap();
        assert_eq!(out.dims(), &[1, 14, 14, 3]);
        for (a, b) in to_vec_f64(&out).unwrap().iter().zip(&v) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn full_box_on_double_grid_downsamples() {
        let (v, t) = grid(28, 28, 2, |y, x, k| ((y * 13 + x * 5 + k * 3) % 17) as f64 / 17.0);
        let out = to_vec_f64(&roi_align(&t, None, 28, 28, &[BBox::new(0.0, 0.0, 56.0, 56.0)], 56, 14).unwrap()).unwrap();
        for k in 0..2 {
            let chan: Vec<f64> = (0..28 * 28).map(|i| v[i * 2 + k]).collect();
            let oracle = resize_bilinear(&chan, 28, 28, 14, 14);
            for i in 0..196 {
                assert!((out[i * 2 + k] - oracle[i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn degenerate_box_repeats_one_sample() {
        let (_, t) = grid(4, 4, 1, |y, x, _| (y * 4 + x) as f64);
        let out = to_vec_f64(&roi_align(&t, None, 4, 4, &[BBox::new(8.0, 8.0, 8.0, 8.0)], 16, 3).unwrap()).unwrap();
        // feature point (1.5, 1.5): mean of cells 5, 6, 9, 10
        for v in out {
            assert!((v - 7.5).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_in_the_feature_map() {
        let (_, f) = grid(6, 6, 2, |y, x, k| ((y * 3 + x + k) % 5) as f64);
        let (_, g) = grid(6, 6, 2, |y, x, k| (y as f64 - x as f64) * 0.3 + k as f64);
        let boxes = [BBox::new(3.0, 5.0, 40.0, 33.0), BBox::new(0.0, 0.0, 48.0, 48.0)];
        let (a, b) = (0.7, -1.9);
        let lhs = roi_align(&((&f * a).unwrap() + (&g * b).unwrap()).unwrap(), None, 6, 6, &boxes, 48, 14).unwrap();
        let rf = roi_align(&f, None, 6, 6, &boxes, 48, 14).unwrap();
        let rg = roi_align(&g, None, 6, 6, &boxes, 48, 14).unwrap();
        let rhs = ((rf * a).unwrap() + (rg * b).unwrap()).unwrap();
        for (x, y) in to_vec_f64(&lhs).unwrap().iter().zip(to_vec_f64(&rhs).unwrap()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
