//! Synthetic underwater scenes.
//!
//! A scene is a clean radiance image with a depth map and per-channel water
//! coefficients. [`degrade`] composes the observed image as a direct signal
//! attenuated with depth plus backscatter saturating toward the veiling
//! light:
//!
//! ```text
//! I_c = J_c · exp(-β_c^D · z) + B_c^∞ · (1 - exp(-β_c^B · z))
//! ```

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::mask::{BBox, Mask};

/// Where an [`AnnotatedImage`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Coco,
}

/// One labeled object.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub mask: Mask,
    pub class_id: usize,
    pub bbox: BBox,
    /// Outline the mask was rasterized from, when known.
    pub polygon: Option<Vec<(f64, f64)>>,
}

impl Instance {
    /// Build from a mask; the box is the tight bound of the mask.
    pub fn from_mask(mask: Mask, class_id: usize) -> Option<Self> {
        let bbox = mask.bbox()?;
        Some(Self {
            mask,
            class_id,
            bbox,
            polygon: None,
        })
    }
}

/// An image in `[0, 1]`, laid out `(height, width, 3)`, with its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: u64,
    pub file_name: String,
    pub image: Array3<f64>,
    pub instances: Vec<Instance>,
    pub source: Source,
}

impl AnnotatedImage {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    /// Check the structural invariants: binary masks sized like the image,
    /// class ids below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (h, w, c) = self.image.dim();
        if c != 3 {
            return shape_err(format!("image has {c} channels, expected 3"));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.mask.height() != h || inst.mask.width() != w {
                return shape_err(format!("instance {i} mask does not match image {h}x{w}"));
            }
            if inst.class_id >= num_classes {
                return config_err(format!(
                    "instance {i} class {} outside [0, {num_classes})",
                    inst.class_id
                ));
            }
        }
        Ok(())
    }
}

/// Ground truth for one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Clean radiance `J_c`, `(height, width, 3)` in `[0, 1]`.
    pub clean_image: Array3<f64>,
    /// Scene depth `z` in meters, `(height, width)`.
    pub depth: Array2<f64>,
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub veiling: [f64; 3],
    pub instances: Vec<Instance>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.clean_image.dim();
        if c != 3 {
            return shape_err(format!("clean image has {c} channels"));
        }
        if self.depth.dim() != (h, w) {
            return shape_err(format!(
                "depth {:?} does not match clean image {h}x{w}",
                self.depth.dim()
            ));
        }
        if self.clean_image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return config_err("clean radiance outside [0, 1]");
        }
        if self.veiling.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return config_err("veiling light outside [0, 1]");
        }
        if self.beta_d.iter().chain(&self.beta_b).any(|b| *b < 0.0 || !b.is_finite()) {
            return config_err("attenuation coefficients must be finite and >= 0");
        }
        Ok(())
    }
}

/// Image formation: attenuated direct signal plus backscatter, clamped to
/// `[0, 1]`. Instances are carried through unchanged.
pub fn degrade(scene: &SceneSpec) -> Result<AnnotatedImage> {
    let (h, w, c) = scene.clean_image.dim();
    if c != 3 || scene.depth.dim() != (h, w) {
        return shape_err(format!(
            "clean image {:?} and depth {:?} disagree",
            scene.clean_image.dim(),
            scene.depth.dim()
        ));
    }
    let mut image = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let z = scene.depth[[y, x]];
            for ch in 0..3 {
                image[[y, x, ch]] = degrade_value(
                    scene.clean_image[[y, x, ch]],
                    z,
                    scene.beta_d[ch],
                    scene.beta_b[ch],
                    scene.veiling[ch],
                );
            }
        }
    }
    Ok(AnnotatedImage {
        id: 0,
        file_name: String::new(),
        image,
        instances: scene.instances.clone(),
        source: Source::Synthetic,
    })
}

/// Single-channel image formation for one pixel.
#[inline]
pub fn degrade_value(j: f64, z: f64, beta_d: f64, beta_b: f64, veiling: f64) -> f64 {
    let direct = j * (-beta_d * z).exp();
    let backscatter = veiling * (1.0 - (-beta_b * z).exp());
    (direct + backscatter).clamp(0.0, 1.0)
}

/// Settings for [`generate_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Probability that a new instance joins an existing cluster (same class,
    /// nearby position) instead of starting a new one.
    pub cluster_tendency: f64,
    pub min_radius: f64,
    pub max_radius: f64,
    pub depth_range: [f64; 2],
    pub beta_d_red: [f64; 2],
    pub beta_d_green: [f64; 2],
    pub beta_d_blue: [f64; 2],
    pub beta_b: [f64; 2],
    pub veiling_red: [f64; 2],
    pub veiling_green: [f64; 2],
    pub veiling_blue: [f64; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            num_classes: 4,
            min_instances: 1,
            max_instances: 6,
            cluster_tendency: 0.5,
            min_radius: 7.0,
            max_radius: 24.0,
            depth_range: [1.0, 6.0],
            beta_d_red: [0.35, 0.6],
            beta_d_green: [0.05, 0.15],
            beta_d_blue: [0.03, 0.12],
            beta_b: [0.05, 0.25],
            veiling_red: [0.02, 0.1],
            veiling_green: [0.3, 0.5],
            veiling_blue: [0.35, 0.6],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_instances > self.max_instances {
            return config_err(format!(
                "instance count range [{}, {}] is empty",
                self.min_instances, self.max_instances
            ));
        }
        if self.image_size < 8 {
            return config_err("image_size must be at least 8");
        }
        if self.num_classes == 0 {
            return config_err("num_classes must be positive");
        }
        if !(0.0..=1.0).contains(&self.cluster_tendency) {
            return config_err("cluster_tendency must lie in [0, 1]");
        }
        if !(self.min_radius >= 2.0 && self.min_radius <= self.max_radius) {
            return config_err("radius range must satisfy 2 <= min <= max");
        }
        let ranges = [
            ("depth_range", self.depth_range),
            ("beta_d_red", self.beta_d_red),
            ("beta_d_green", self.beta_d_green),
            ("beta_d_blue", self.beta_d_blue),
            ("beta_b", self.beta_b),
            ("veiling_red", self.veiling_red),
            ("veiling_green", self.veiling_green),
            ("veiling_blue", self.veiling_blue),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return config_err(format!("{name} must be a non-negative range lo <= hi"));
            }
        }
        for [lo, hi] in [self.veiling_red, self.veiling_green, self.veiling_blue] {
            if hi > 1.0 || lo > 1.0 {
                return config_err("veiling light must lie in [0, 1]");
            }
        }
        if self.beta_d_red[0] <= self.beta_d_green[1] || self.beta_d_red[0] <= self.beta_d_blue[1] {
            return config_err("red attenuation range must lie strictly above green and blue");
        }
        Ok(())
    }
}

/// Per-class appearance: base radiance, elongation and boundary waviness.
#[derive(Debug, Clone, Copy)]
struct ClassStyle {
    color: [f64; 3],
    aspect: f64,
    lobes: f64,
    lobe_amp: f64,
}

const PALETTE: [[f64; 3]; 10] = [
    [0.92, 0.45, 0.20],
    [0.95, 0.85, 0.25],
    [0.35, 0.80, 0.35],
    [0.80, 0.35, 0.75],
    [0.25, 0.55, 0.95],
    [0.95, 0.95, 0.90],
    [0.60, 0.30, 0.15],
    [0.95, 0.55, 0.70],
    [0.20, 0.25, 0.30],
    [0.55, 0.90, 0.85],
];

fn class_style(class_id: usize) -> ClassStyle {
    let color = PALETTE[class_id % PALETTE.len()];
    let k = class_id as f64;
    ClassStyle {
        color,
        aspect: 1.0 + 0.6 * (k % 3.0),
        lobes: 3.0 + (class_id % 4) as f64,
        lobe_amp: 0.06 + 0.06 * ((class_id / 2) % 3) as f64,
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn blob_polygon(cx: f64, cy: f64, radius: f64, style: ClassStyle, rot: f64, phase: f64) -> Vec<(f64, f64)> {
    const N: usize = 32;
    let (sin_r, cos_r) = rot.sin_cos();
    let rx = radius * style.aspect.sqrt();
    let ry = radius / style.aspect.sqrt();
    (0..N)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / N as f64;
            let r = 1.0 + style.lobe_amp * (style.lobes * t + phase).sin();
            let (ex, ey) = (rx * r * t.cos(), ry * r * t.sin());
            (cx + ex * cos_r - ey * sin_r, cy + ex * sin_r + ey * cos_r)
        })
        .collect()
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Generate one scene. Deterministic for a fixed `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.image_size;
    let size = n as f64;

    // Seabed: vertical gradient with a mild low-frequency ripple.
    let base = [
        uniform(&mut rng, [0.45, 0.65]),
        uniform(&mut rng, [0.45, 0.6]),
        uniform(&mut rng, [0.35, 0.5]),
    ];
    let ripple_phase = uniform(&mut rng, [0.0, std::f64::consts::TAU]);
    let mut clean = Array3::<f64>::zeros((n, n, 3));
    for y in 0..n {
        for x in 0..n {
            let g = 0.75 + 0.25 * (y as f64 / size);
            let r = 0.04 * ((x as f64 * 0.11 + y as f64 * 0.07) + ripple_phase).sin();
            for c in 0..3 {
                clean[[y, x, c]] = (base[c] * g + r).clamp(0.0, 1.0);
            }
        }
    }

    // Depth: smooth gradient in a random direction plus smooth noise.
    let [z_near, z_far] = config.depth_range;
    let angle = uniform(&mut rng, [0.0, std::f64::consts::TAU]);
    let (dx, dy) = (angle.cos(), angle.sin());
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                uniform(&mut rng, [0.02, 0.08]),
                uniform(&mut rng, [0.02, 0.08]),
                uniform(&mut rng, [0.0, std::f64::consts::TAU]),
                uniform(&mut rng, [0.05, 0.2]) * (z_far - z_near),
            )
        })
        .collect();
    let mut depth = Array2::<f64>::zeros((n, n));
    for y in 0..n {
        for x in 0..n {
            let u = ((x as f64 / size - 0.5) * dx + (y as f64 / size - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5;
            let mut z = z_near + (z_far - z_near) * u.clamp(0.0, 1.0);
            for (fx, fy, ph, amp) in &waves {
                z += amp * (fx * x as f64 + fy * y as f64 + ph).sin();
            }
            depth[[y, x]] = z.max(0.0);
        }
    }

    let beta_d = [
        uniform(&mut rng, config.beta_d_red),
        uniform(&mut rng, config.beta_d_green),
        uniform(&mut rng, config.beta_d_blue),
    ];
    let beta_b = [
        uniform(&mut rng, config.beta_b),
        uniform(&mut rng, config.beta_b),
        uniform(&mut rng, config.beta_b),
    ];
    let veiling = [
        uniform(&mut rng, config.veiling_red),
        uniform(&mut rng, config.veiling_green),
        uniform(&mut rng, config.veiling_blue),
    ];

    let count = rng.random_range(config.min_instances..=config.max_instances);
    let mut occupied = Mask::new(n, n);
    let mut clusters: Vec<(f64, f64, usize)> = Vec::new();
    let mut instances = Vec::with_capacity(count);
    for _ in 0..count {
        let join = !clusters.is_empty() && rng.random_bool(config.cluster_tendency);
        let (anchor_x, anchor_y, class_id, spread) = if join {
            let (cx, cy, cls) = clusters[rng.random_range(0..clusters.len())];
            (cx, cy, cls, 0.25 * size)
        } else {
            let cls = rng.random_range(0..config.num_classes);
            let cx = uniform(&mut rng, [0.15 * size, 0.85 * size]);
            let cy = uniform(&mut rng, [0.15 * size, 0.85 * size]);
            clusters.push((cx, cy, cls));
            (cx, cy, cls, 0.0)
        };
        let style = class_style(class_id);
        let mut radius = uniform(&mut rng, [config.min_radius, config.max_radius]);
        let mut placed = None;
        for attempt in 0..120 {
            if attempt > 0 && attempt % 10 == 0 {
                radius = (radius * 0.85).max(config.min_radius.min(3.0));
            }
            let jitter = spread + if attempt > 30 { 0.3 * size } else { 0.0 };
            let (lo, hi) = (radius.min(0.5 * size), (size - radius).max(0.5 * size));
            let cx = (anchor_x + uniform(&mut rng, [-1.0, 1.0]) * jitter).clamp(lo, hi);
            let cy = (anchor_y + uniform(&mut rng, [-1.0, 1.0]) * jitter).clamp(lo, hi);
            let rot = uniform(&mut rng, [0.0, std::f64::consts::PI]);
            let phase = uniform(&mut rng, [0.0, std::f64::consts::TAU]);
            let poly = blob_polygon(cx, cy, radius, style, rot, phase);
            let mask = Mask::from_polygon(n, n, &poly);
            if mask.is_empty() {
                continue;
            }
            let overlap = mask.intersection_area(&occupied)?;
            if overlap == 0 || attempt == 119 {
                placed = Some((poly, mask));
                break;
            }
        }
        let Some((poly, mask)) = placed else { continue };
        occupied.union_with(&mask)?;

        // Paint with soft (2x2 supersampled) edges, per-instance jitter and
        // radial shading.
        let jitter: Vec<f64> = (0..3).map(|_| uniform(&mut rng, [-0.08, 0.08])).collect();
        let bbox = mask.bbox().expect("non-empty mask");
        let (cx, cy) = bbox.center();
        let extent = 0.5 * bbox.width().max(bbox.height()).max(1.0);
        let x0 = (bbox.x1 - 1.0).max(0.0) as usize;
        let y0 = (bbox.y1 - 1.0).max(0.0) as usize;
        let x1 = ((bbox.x2 + 1.0) as usize).min(n);
        let y1 = ((bbox.y2 + 1.0) as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut cover = 0.0;
                for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    if point_in_polygon(x as f64 + sx, y as f64 + sy, &poly) {
                        cover += 0.25;
                    }
                }
                if cover == 0.0 {
                    continue;
                }
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt() / extent;
                let shade = 1.0 - 0.25 * d.min(1.0);
                for c in 0..3 {
                    let v = ((style.color[c] + jitter[c]) * shade).clamp(0.0, 1.0);
                    let old = clean[[y, x, c]];
                    clean[[y, x, c]] = old + cover * (v - old);
                }
            }
        }
        instances.push(Instance {
            mask,
            class_id,
            bbox,
            polygon: Some(poly),
        });
    }

    Ok(SceneSpec {
        clean_image: clean,
        depth,
        beta_d,
        beta_b,
        veiling,
        instances,
    })
}

/// Generate and degrade `count` scenes with seeds `seed, seed+1, ...`.
pub fn synthetic_corpus(seed: u64, count: usize, config: &SceneConfig) -> Result<Vec<AnnotatedImage>> {
    (0..count)
        .map(|i| {
            let scene = generate_scene(seed.wrapping_add(i as u64), config)?;
            let mut img = degrade(&scene)?;
            img.id = i as u64 + 1;
            img.file_name = format!("{:06}.png", i + 1);
            Ok(img)
        })
        .collect()
}
