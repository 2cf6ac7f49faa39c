//! Fixed 2-D sinusoidal positional encoding.

use candle_core::{DType, Device, Tensor};

use crate::error::{shape_err, Result};

/// `(h·w, c)` encoding: the first half of the channels encodes the row, the
/// second half the column, each as interleaved sin/cos pairs over
/// geometrically spaced frequencies.
pub fn sinusoidal_2d(h: usize, w: usize, c: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if c % 4 != 0 || c == 0 {
        return shape_err(format!("sinusoidal encoding needs a width divisible by 4, got {c}"));
    }
    let half = c / 2;
    let mut v = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = &mut v[(y * w + x) * c..(y * w + x + 1) * c];
            for (offset, pos) in [(0, y), (half, x)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / half as f64);
                    let a = pos as f64 * freq;
                    row[offset + 2 * i] = a.sin();
                    row[offset + 2 * i + 1] = a.cos();
                }
            }
        }
    }
    Ok(Tensor::from_vec(v, (h * w, c), device)?.to_dtype(dtype)?)
}
