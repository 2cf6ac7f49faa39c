//! Binary masks, axis-aligned boxes, polygon rasterization and COCO
//! run-length encoding.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2` for
/// non-degenerate boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(b: [f64; 4]) -> Self {
        Self::new(b[0], b[1], b[0] + b[2], b[1] + b[3])
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }
}

/// Row-major bit-packed binary mask.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u64>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, area={})", self.height, self.width, self.area())
    }
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; (height * width).div_ceil(64)],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                if f(y, x) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        let i = y * self.width + x;
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        let i = y * self.width + x;
        if v {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn area(&self) -> u64 {
        self.bits.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|w| *w == 0)
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return shape_err(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            ));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &Mask) -> Result<u64> {
        self.check_same(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| u64::from((a & b).count_ones()))
            .sum())
    }

    pub fn union_area(&self, other: &Mask) -> Result<u64> {
        self.check_same(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| u64::from((a | b).count_ones()))
            .sum())
    }

    /// Intersection over union; two empty masks have IoU 0.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        let inter = self.intersection_area(other)?;
        let union = self.union_area(other)?;
        Ok(if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        })
    }

    pub fn union_with(&mut self, other: &Mask) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// Tight pixel bound: `[min_x, min_y, max_x + 1, max_y + 1]`.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    any = true;
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        any.then(|| BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
    }

    /// Fraction of covered input pixels for each output cell, by averaging
    /// the input pixels whose centers fall inside the cell's footprint
    /// (nearest sample when a cell contains no center).
    pub fn resample_fraction(&self, out_h: usize, out_w: usize) -> Vec<f32> {
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let mut out = vec![0f32; out_h * out_w];
        for oy in 0..out_h {
            let y0 = (oy as f64 * sy - 0.5).ceil().max(0.0) as usize;
            let y1 = (((oy + 1) as f64 * sy - 0.5).ceil().max(0.0) as usize).min(self.height);
            for ox in 0..out_w {
                let x0 = (ox as f64 * sx - 0.5).ceil().max(0.0) as usize;
                let x1 = (((ox + 1) as f64 * sx - 0.5).ceil().max(0.0) as usize).min(self.width);
                let v = if y1 > y0 && x1 > x0 {
                    let mut on = 0usize;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            on += usize::from(self.get(y, x));
                        }
                    }
                    on as f64 / ((y1 - y0) * (x1 - x0)) as f64
                } else {
                    let y = (((oy as f64 + 0.5) * sy) as usize).min(self.height - 1);
                    let x = (((ox as f64 + 0.5) * sx) as usize).min(self.width - 1);
                    f64::from(u8::from(self.get(y, x)))
                };
                out[oy * out_w + ox] = v as f32;
            }
        }
        out
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Mask {
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        Mask::from_fn(out_h, out_w, |y, x| {
            let iy = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            let ix = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            self.get(iy, ix)
        })
    }

    /// Rasterize a closed polygon with the even-odd rule, sampling each
    /// pixel at its center `(x + 0.5, y + 0.5)`.
    pub fn from_polygon(height: usize, width: usize, poly: &[(f64, f64)]) -> Mask {
        let mut m = Mask::new(height, width);
        rasterize_into(&mut m, poly);
        m
    }

    /// Rasterize a COCO polygon list (each `[x0, y0, x1, y1, ...]`); parts
    /// are combined by union.
    pub fn from_coco_polygons(height: usize, width: usize, polys: &[Vec<f64>]) -> Mask {
        let mut m = Mask::new(height, width);
        for flat in polys {
            let pts: Vec<(f64, f64)> = flat.chunks_exact(2).map(|c| (c[0], c[1])).collect();
            if pts.len() >= 3 {
                let part = Mask::from_polygon(height, width, &pts);
                m.union_with(&part).expect("same dims");
            }
        }
        m
    }

    /// COCO uncompressed RLE counts (column-major, starting with a zero run).
    pub fn to_rle_counts(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..self.width {
            for y in 0..self.height {
                let v = self.get(y, x);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        counts
    }

    pub fn from_rle_counts(height: usize, width: usize, counts: &[u32]) -> Result<Mask> {
        let total: u64 = counts.iter().map(|c| u64::from(*c)).sum();
        if total != (height * width) as u64 {
            return Err(Error::Parse {
                what: "RLE".into(),
                msg: format!("counts sum to {total}, expected {}", height * width),
            });
        }
        let mut m = Mask::new(height, width);
        let mut pos = 0usize;
        let mut value = false;
        for &c in counts {
            if value {
                for p in pos..pos + c as usize {
                    m.set(p % height, p / height, true);
                }
            }
            pos += c as usize;
            value = !value;
        }
        Ok(m)
    }

    /// COCO compressed RLE string (the `counts` field of results files).
    pub fn to_rle_string(&self) -> String {
        rle_counts_to_string(&self.to_rle_counts())
    }

    pub fn from_rle_string(height: usize, width: usize, s: &str) -> Result<Mask> {
        let counts = rle_string_to_counts(s)?;
        Mask::from_rle_counts(height, width, &counts)
    }
}

fn rasterize_into(m: &mut Mask, poly: &[(f64, f64)]) {
    let n = poly.len();
    if n < 3 {
        return;
    }
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for y in 0..m.height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % n];
            if (y0 <= yc) != (y1 <= yc) {
                xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        for pair in xs.chunks_exact(2) {
            // pixel x is inside iff pair[0] <= x + 0.5 < pair[1]
            let start = (pair[0] - 0.5).ceil().max(0.0);
            let end = (pair[1] - 0.5).ceil().min(m.width as f64);
            let mut x = start;
            while x < end {
                m.set(y, x as usize, true);
                x += 1.0;
            }
        }
    }
}

/// Encode RLE counts in the COCO LEB128-like text form.
pub fn rle_counts_to_string(counts: &[u32]) -> String {
    let mut s = String::new();
    for i in 0..counts.len() {
        let mut x = i64::from(counts[i]);
        if i > 2 {
            x -= i64::from(counts[i - 2]);
        }
        loop {
            let mut c = x & 0x1f;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            s.push((c as u8 + 48) as char);
            if !more {
                break;
            }
        }
    }
    s
}

pub fn rle_string_to_counts(s: &str) -> Result<Vec<u32>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            if p >= bytes.len() {
                return Err(Error::Parse {
                    what: "RLE string".into(),
                    msg: "truncated".into(),
                });
            }
            let c = i64::from(bytes[p]) - 48;
            x |= (c & 0x1f) << (5 * k);
            let more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| {
            u32::try_from(c).map_err(|_| Error::Parse {
                what: "RLE string".into(),
                msg: format!("negative run {c}"),
            })
        })
        .collect()
}
