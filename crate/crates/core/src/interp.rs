//! Bilinear resampling expressed as constant interpolation matrices, so
//! resizing a token map is a matmul and stays differentiable w.r.t. the map.

use candle_core::Tensor;

use crate::error::{shape_err, Result};

/// `(out_len, in_len)` weights of 1-D bilinear resampling with half-pixel
/// centers; source coordinates outside the input clamp to the edge.
pub fn bilinear_weights_1d(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
        m[i * in_len + i0] += 1.0 - frac;
        m[i * in_len + i1] += frac;
    }
    m
}

/// `(out_h·out_w, in_h·in_w)` row-major 2-D bilinear resampling matrix.
pub fn bilinear_matrix_2d(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let wy = bilinear_weights_1d(in_h, out_h);
    let wx = bilinear_weights_1d(in_w, out_w);
    let n_in = in_h * in_w;
    let mut m = vec![0.0; out_h * out_w * n_in];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = (oy * out_w + ox) * n_in;
            for iy in 0..in_h {
                let a = wy[oy * in_h + iy];
                if a == 0.0 {
                    continue;
                }
                for ix in 0..in_w {
                    m[row + iy * in_w + ix] = a * wx[ox * in_w + ix];
                }
            }
        }
    }
    m
}

/// Resize a single-channel `(in_h, in_w)` grid.
pub fn resize_bilinear(values: &[f64], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let wy = bilinear_weights_1d(in_h, out_h);
    let wx = bilinear_weights_1d(in_w, out_w);
    // rows first, then columns
    let mut tmp = vec![0.0; out_h * in_w];
    for oy in 0..out_h {
        for iy in 0..in_h {
            let a = wy[oy * in_h + iy];
            if a != 0.0 {
                for ix in 0..in_w {
                    tmp[oy * in_w + ix] += a * values[iy * in_w + ix];
                }
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        for ox in 0..out_w {
            out[oy * out_w + ox] = (0..in_w).map(|ix| wx[ox * in_w + ix] * tmp[oy * in_w + ix]).sum();
        }
    }
    out
}

/// Resize `(b, h·w, c)` tokens to `(b, out_h·out_w, c)`.
pub fn resize_tokens(tokens: &Tensor, h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, n, _) = tokens.dims3()?;
    if n != h * w {
        return shape_err(format!("{n} tokens do not form a {h}x{w} grid"));
    }
    let m = Tensor::from_vec(bilinear_matrix_2d(h, w, out_h, out_w), (out_h * out_w, n), tokens.device())?
        .to_dtype(tokens.dtype())?;
    Ok(m.broadcast_matmul(tokens)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one() {
        for (a, b) in [(8, 16), (8, 32), (28, 14), (5, 5), (3, 7)] {
            let m = bilinear_weights_1d(a, b);
            for r in 0..b {
                let s: f64 = m[r * a..(r + 1) * a].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_size_is_identity() {
        let m = bilinear_matrix_2d(3, 4, 3, 4);
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(m[i * 12 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn halving_averages_pairs() {
        let v: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let out = resize_bilinear(&v, 4, 4, 2, 2);
        // (0+1+4+5)/4
        assert!((out[0] - 2.5).abs() < 1e-12);
        assert!((out[3] - 12.5).abs() < 1e-12);
    }

    #[test]
    fn matrix_agrees_with_separable_resize() {
        let v: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64 - 1.3).collect();
        let m = bilinear_matrix_2d(4, 5, 9, 6);
        let direct = resize_bilinear(&v, 4, 5, 9, 6);
        for r in 0..54 {
            let s: f64 = (0..20).map(|j| m[r * 20 + j] * v[j]).sum();
            assert!((s - direct[r]).abs() < 1e-12);
        }
    }
}
