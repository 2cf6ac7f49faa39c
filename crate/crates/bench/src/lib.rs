//! Fixtures shared by the benchmarks.

use candle_core::{DType, Device, Tensor};
use uwkit_core::metrics::{GroundTruth, Prediction};
use uwkit_core::{FeatureMap, Mask};

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

/// A single-image `h × w × c` feature map.
pub fn feature_map(h: usize, w: usize, c: usize, dtype: DType) -> FeatureMap {
    let t = Tensor::from_vec(values(h * w * c, 1), (1, h * w, c), &Device::Cpu)
        .and_then(|t| t.to_dtype(dtype))
        .expect("fixture tensor");
    FeatureMap::new(t, h, w).expect("fixture map")
}

/// `n` ground-truth squares on a 64-pixel image and one jittered
/// prediction for each, plus one false positive per square.
pub fn detection_scene(n: usize) -> (Vec<Prediction>, Vec<GroundTruth>) {
    let v = values(4 * n, 2);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for i in 0..n {
        let x = ((v[4 * i] + 1.0) * 24.0) as usize;
        let y = ((v[4 * i + 1] + 1.0) * 24.0) as usize;
        let s = 6 + ((v[4 * i + 2] + 1.0) * 4.0) as usize;
        let sq = |dx: usize| Mask::from_fn(64, 64, |yy, xx| (y..y + s).contains(&yy) && (x + dx..x + dx + s).contains(&xx));
        let image_id = 1 + (i % 4) as u64;
        let category = i % 3;
        let gt = GroundTruth::from_mask(image_id, category, sq(0)).expect("non-empty");
        for (dx, score) in [(1, 0.5 + 0.4 * v[4 * i + 3].abs()), (s, 0.3 * v[4 * i + 3].abs())] {
            let m = sq(dx.min(63 - x - s));
            preds.push(Prediction {
                image_id,
                category,
                score,
                bbox: m.bbox().expect("non-empty"),
                mask: Some(m),
            });
        }
        gts.push(gt);
    }
    (preds, gts)
}
