//! The six subcommands. Each takes a resolved [`RunConfig`] and writes its
//! artifacts under `cfg.out`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array3;
use serde::Serialize;
use uwkit_core::coco::{read_rgb, to_rgb8, write_corpus, Rle};
use uwkit_core::interp::resize_bilinear;
use uwkit_core::metrics::stats::{channel_density_svg, instances_histogram_svg};
use uwkit_core::metrics::dataset_stats;
use uwkit_core::model::Detection;
use uwkit_core::synth::{degrade, generate_scene, Source};
use uwkit_core::{AnnotatedImage, EvalResult, Mask, ParamStore, Uwsam};

use crate::checkpoint::{Checkpoint, Kind};
use crate::config::RunConfig;
use crate::data::{category_names, load_path, load_split, Split};
use crate::train::{evaluate_model, run, RunOutput, Trainer};

/// Refuse to write into an existing non-empty directory unless forced.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        bail!("{} exists and is not empty; pass --force to overwrite", dir.display());
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Degradation parameters of one generated scene.
#[derive(Debug, Clone, Serialize)]
pub struct SceneRecord {
    pub file_name: String,
    pub seed: u64,
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub veiling: [f64; 3],
    pub instances: usize,
}

#[derive(Debug, Clone, Serialize)]
struct SynthManifest<'a> {
    seed: u64,
    count: usize,
    scene: &'a uwkit_core::SceneConfig,
    scenes: Vec<SceneRecord>,
}

fn synth_split(dir: &Path, cfg: &RunConfig, seed: u64, count: usize) -> Result<Vec<AnnotatedImage>> {
    let mut images = Vec::with_capacity(count);
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let s = seed.wrapping_add(i as u64);
        let spec = generate_scene(s, &cfg.data.scene)?;
        let mut img = degrade(&spec)?;
        img.id = i as u64 + 1;
        img.file_name = format!("{:06}.png", i + 1);
        img.source = Source::Synthetic;
        scenes.push(SceneRecord {
            file_name: img.file_name.clone(),
            seed: s,
            beta_d: spec.beta_d,
            beta_b: spec.beta_b,
            veiling: spec.veiling,
            instances: spec.instances.len(),
        });
        images.push(img);
    }
    write_corpus(dir, &images, &category_names(cfg.data.scene.num_classes))?;
    let manifest = SynthManifest {
        seed,
        count,
        scene: &cfg.data.scene,
        scenes,
    };
    fs::write(dir.join("scenes.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(images)
}

/// Write the training corpus to `cfg.out` and the held-out corpus to
/// `cfg.out/val`, seeded by `cfg.data.seed`.
pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<usize> {
    prepare_out_dir(&cfg.out, force)?;
    let train = synth_split(&cfg.out, cfg, cfg.data.seed, cfg.data.train_images)?;
    if cfg.data.holdout_images > 0 {
        synth_split(
            &cfg.out.join("val"),
            cfg,
            cfg.data.seed.wrapping_add(crate::data::HOLDOUT_SEED_OFFSET),
            cfg.data.holdout_images,
        )?;
    }
    Ok(train.len())
}

fn check_fresh(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

fn train_with(mut trainer: Trainer, cfg: &RunConfig, name: &'static str, force: bool) -> Result<PathBuf> {
    let data = load_split(cfg, Split::Train)?;
    let out = RunOutput {
        dir: cfg.out.clone(),
        name,
    };
    if trainer.step_count() == 0 {
        check_fresh(&out.final_checkpoint(), force)?;
    }
    fs::create_dir_all(&out.dir)?;
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(trainer.step_count() > 0)
        .write(true)
        .truncate(trainer.step_count() == 0)
        .open(out.log())?;
    let mut log = BufWriter::new(log_file);
    let total = cfg.train.total_steps(data.len());
    log::info!("{name}: {} images, {total} steps", data.len());
    run(&mut trainer, &data, total, Some(&out), &mut log)?;
    log.flush()?;
    Ok(out.final_checkpoint())
}

/// Settings for a resumed run: the stored run fixes model, data and
/// optimizer, the caller picks the schedule length and output directory.
fn resumed_config(trainer: &Trainer, cfg: &RunConfig) -> RunConfig {
    let mut run = trainer.config().clone();
    run.out = cfg.out.clone();
    run.train.epochs = cfg.train.epochs;
    run.train.max_steps = cfg.train.max_steps;
    run.train.checkpoint_every_epoch = cfg.train.checkpoint_every_epoch;
    run
}

/// Pre-train the teacher on the task losses alone.
pub fn cmd_train_teacher(cfg: &RunConfig, resume: Option<&Path>, force: bool) -> Result<PathBuf> {
    let trainer = match resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, None)?,
        None => Trainer::teacher(cfg)?,
    };
    let cfg = resumed_config(&trainer, cfg);
    train_with(trainer, &cfg, "teacher", force)
}

/// Train the student against the frozen teacher at `teacher`.
pub fn cmd_distill(cfg: &RunConfig, teacher: &Path, resume: Option<&Path>, force: bool) -> Result<PathBuf> {
    let t = Checkpoint::load(teacher)?;
    let trainer = match resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, Some(&t))?,
        None => Trainer::student(cfg, &t)?,
    };
    let cfg = resumed_config(&trainer, cfg);
    train_with(trainer, &cfg, "student", force)
}

/// Rebuild the inference model stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<Uwsam> {
    let cfg = &ckpt.config;
    let ps = ParamStore::frozen(ckpt.seed, cfg.train.precision.dtype());
    let encoder = match ckpt.kind {
        Kind::Teacher => &cfg.teacher,
        Kind::Student => &cfg.student,
    };
    let model = Uwsam::new(&ps, encoder, &cfg.model)?;
    ckpt.restore(&ps, "")?;
    Ok(model)
}

/// Evaluate a checkpoint on `corpus`, or on the configured held-out split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, corpus: Option<&Path>, split: Split) -> Result<EvalResult> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let nc = ckpt.config.model.num_classes;
    let data = match corpus {
        Some(dir) => load_path(dir, nc)?,
        None => {
            if cfg.model.num_classes != nc {
                bail!("checkpoint has {nc} classes, configuration has {}", cfg.model.num_classes);
            }
            load_split(cfg, split)?
        }
    };
    let model = load_model(&ckpt)?;
    let result = evaluate_model(&model, &data, cfg.eval.batch_size)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("eval.json"), serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}

/// One entry of a COCO results document.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
    pub segmentation: Rle,
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Blend each detection's mask over `image` in its own colour. Returns the
/// picture and the mask of coloured pixels.
pub fn overlay(image: &Array3<f64>, dets: &[Detection]) -> (image::RgbImage, Mask) {
    let mut out = to_rgb8(image);
    let (h, w, _) = image.dim();
    let mut covered = Mask::new(h, w);
    for (i, d) in dets.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for y in 0..h {
            for x in 0..w {
                if d.mask.get(y, x) {
                    let p = out.get_pixel_mut(x as u32, y as u32);
                    for c in 0..3 {
                        p[c] = ((u16::from(p[c]) + 2 * u16::from(color[c])) / 3) as u8;
                    }
                    covered.set(y, x, true);
                }
            }
        }
    }
    (out, covered)
}

fn resize_image(img: &Array3<f64>, size: usize) -> Array3<f64> {
    let (h, w, _) = img.dim();
    if (h, w) == (size, size) {
        return img.clone();
    }
    let mut out = Array3::zeros((size, size, 3));
    for c in 0..3 {
        let chan: Vec<f64> = img.iter().skip(c).step_by(3).copied().collect();
        for (i, v) in resize_bilinear(&chan, h, w, size, size).into_iter().enumerate() {
            out[[i / size, i % size, c]] = v;
        }
    }
    out
}

/// Detections for one image file at its native resolution.
pub fn infer_image(model: &Uwsam, path: &Path, id: u64, score_threshold: f64) -> Result<(Array3<f64>, Vec<Detection>)> {
    let image = read_rgb(path).with_context(|| format!("reading {}", path.display()))?;
    let (h, w, _) = image.dim();
    let size = model.image_size();
    let item = AnnotatedImage {
        id,
        file_name: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        image: resize_image(&image, size),
        instances: Vec::new(),
        source: Source::Synthetic,
    };
    let dets = model
        .predict(&[&item])?
        .remove(0)
        .into_iter()
        .filter(|d| d.score >= score_threshold)
        .map(|d| Detection {
            bbox: d.bbox.scale(w as f64 / size as f64, h as f64 / size as f64),
            mask: d.mask.resize_nearest(h, w),
            ..d
        })
        .collect();
    Ok((image, dets))
}

/// Run a checkpoint on image files; write `results.json` and one overlay
/// PNG per image under `cfg.out`.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf], score_threshold: f64) -> Result<Vec<CocoResult>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = load_model(&ckpt)?;
    fs::create_dir_all(&cfg.out)?;
    let mut results = Vec::new();
    for (i, path) in images.iter().enumerate() {
        let id = i as u64 + 1;
        let (image, dets) = infer_image(&model, path, id, score_threshold)?;
        for d in &dets {
            results.push(CocoResult {
                image_id: id,
                category_id: d.class_id as u64 + 1,
                bbox: d.bbox.to_xywh(),
                score: d.score,
                segmentation: Rle::from_mask(&d.mask, true),
            });
        }
        let (pic, _) = overlay(&image, &dets);
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| id.to_string());
        pic.save(cfg.out.join(format!("{stem}_overlay.png")))?;
    }
    let file = File::create(cfg.out.join("results.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &results)?;
    Ok(results)
}

/// Corpus statistics plus two SVG plots.
pub fn cmd_stats(cfg: &RunConfig, corpus: Option<&Path>) -> Result<uwkit_core::metrics::DatasetStats> {
    let nc = cfg.model.num_classes;
    let data = match corpus {
        Some(dir) => load_path(dir, nc)?,
        None => load_split(cfg, Split::Train)?,
    };
    let stats = dataset_stats(&data, nc);
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    fs::write(cfg.out.join("instances_per_image.svg"), instances_histogram_svg(&stats))?;
    fs::write(cfg.out.join("channel_density.svg"), channel_density_svg(&stats))?;
    Ok(stats)
}
