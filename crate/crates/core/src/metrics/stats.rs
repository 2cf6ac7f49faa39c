//! Corpus statistics: instance sizes, colour channels, instance counts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::synth::AnnotatedImage;

/// Upper bound (exclusive) of the small bucket, in pixels.
pub const SMALL_MAX: u64 = 32 * 32;
/// Upper bound (exclusive) of the medium bucket, in pixels.
pub const MEDIUM_MAX: u64 = 96 * 96;
pub const DENSITY_BINS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

pub fn size_bucket(area: u64) -> SizeBucket {
    if area < SMALL_MAX {
        SizeBucket::Small
    } else if area < MEDIUM_MAX {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub small: usize,
    pub medium: usize,
    pub large: usize,
}

impl BucketCounts {
    pub fn total(&self) -> usize {
        self.small + self.medium + self.large
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_images: usize,
    pub num_instances: usize,
    /// Instance count per class index.
    pub per_category: Vec<usize>,
    pub size_buckets: BucketCounts,
    /// Mean R, G, B over every pixel of every image, on [0, 1].
    pub channel_means: [f64; 3],
    /// Per-channel probability density over `DENSITY_BINS` equal bins of [0, 1].
    pub channel_density: [Vec<f64>; 3],
    /// `instances_per_image[n]` images hold exactly `n` instances.
    pub instances_per_image: Vec<usize>,
}

pub fn dataset_stats(data: &[AnnotatedImage], num_classes: usize) -> DatasetStats {
    let mut per_category = vec![0usize; num_classes];
    let mut buckets = BucketCounts::default();
    let mut sums = [0.0f64; 3];
    let mut counts = [[0u64; DENSITY_BINS]; 3];
    let mut pixels = 0u64;
    let mut per_image = Vec::new();
    let mut num_instances = 0;
    for img in data {
        for inst in &img.instances {
            if inst.class_id >= per_category.len() {
                per_category.resize(inst.class_id + 1, 0);
            }
            per_category[inst.class_id] += 1;
            match size_bucket(inst.mask.area()) {
                SizeBucket::Small => buckets.small += 1,
                SizeBucket::Medium => buckets.medium += 1,
                SizeBucket::Large => buckets.large += 1,
            }
        }
        num_instances += img.instances.len();
        let n = img.instances.len();
        if per_image.len() <= n {
            per_image.resize(n + 1, 0);
        }
        per_image[n] += 1;
        for px in img.image.rows() {
            for c in 0..3 {
                let v = px[c];
                sums[c] += v;
                let bin = ((v.clamp(0.0, 1.0) * DENSITY_BINS as f64) as usize).min(DENSITY_BINS - 1);
                counts[c][bin] += 1;
            }
            pixels += 1;
        }
    }
    let denom = pixels.max(1) as f64;
    let bin_width = 1.0 / DENSITY_BINS as f64;
    let density = |c: usize| counts[c].iter().map(|&k| k as f64 / denom / bin_width).collect::<Vec<f64>>();
    DatasetStats {
        num_images: data.len(),
        num_instances,
        per_category,
        size_buckets: buckets,
        channel_means: [sums[0] / denom, sums[1] / denom, sums[2] / denom],
        channel_density: [density(0), density(1), density(2)],
        instances_per_image: per_image,
    }
}

/// Bar chart of instances per image as a standalone SVG document.
pub fn instances_histogram_svg(stats: &DatasetStats) -> String {
    let counts = &stats.instances_per_image;
    let (w, h, pad) = (480.0, 240.0, 30.0);
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar = (w - 2.0 * pad) / counts.len().max(1) as f64;
    let mut s = svg_header(w, h);
    for (i, &c) in counts.iter().enumerate() {
        let bh = (h - 2.0 * pad) * c as f64 / max;
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#4a7ab5"/>"##,
            pad + i as f64 * bar + 1.0,
            h - pad - bh,
            (bar - 2.0).max(1.0),
            bh
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{i}</text>"#,
            pad + (i as f64 + 0.5) * bar,
            h - pad + 12.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Per-channel intensity densities as polylines in a standalone SVG.
pub fn channel_density_svg(stats: &DatasetStats) -> String {
    let (w, h, pad) = (480.0, 240.0, 30.0);
    let max = stats
        .channel_density
        .iter()
        .flatten()
        .copied()
        .fold(0.0, f64::max)
        .max(1e-12);
    let mut s = svg_header(w, h);
    for (c, color) in ["#d04040", "#40a040", "#4060d0"].iter().enumerate() {
        let d = &stats.channel_density[c];
        let pts: Vec<String> = d
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = pad + (i as f64 + 0.5) / d.len() as f64 * (w - 2.0 * pad);
                let y = h - pad - v / max * (h - 2.0 * pad);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

fn svg_header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}
