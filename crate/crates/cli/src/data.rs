//! Training and held-out corpora, from disk or generated in memory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use uwkit_core::coco::load_corpus;
use uwkit_core::synth::synthetic_corpus;
use uwkit_core::AnnotatedImage;

use crate::config::RunConfig;

/// Offset between the seeds of the synthetic training and held-out scenes.
pub const HOLDOUT_SEED_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Holdout,
}

pub fn category_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}

fn load_dir(dir: &Path, num_classes: usize) -> Result<Vec<AnnotatedImage>> {
    let ds = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
    for e in &ds.errors {
        log::warn!("{}: skipped image: {:?}", dir.display(), e);
    }
    if ds.num_classes() != num_classes {
        bail!(
            "corpus {} has {} categories but the model expects {}",
            dir.display(),
            ds.num_classes(),
            num_classes
        );
    }
    Ok(ds.images)
}

fn holdout_dir(cfg: &RunConfig, root: &Path) -> Option<PathBuf> {
    cfg.data.holdout_root.clone().or_else(|| {
        let v = root.join("val");
        v.join("annotations.json").exists().then_some(v)
    })
}

/// Images of one split.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<AnnotatedImage>> {
    let nc = cfg.model.num_classes;
    match (cfg.data_root(), split) {
        (Some(root), Split::Train) => {
            let train = root.join("train");
            load_dir(if train.join("annotations.json").exists() { &train } else { &root }, nc)
        }
        (Some(root), Split::Holdout) => match holdout_dir(cfg, &root) {
            Some(dir) => load_dir(&dir, nc),
            None => bail!("no held-out corpus under {}; set data.holdout_root", root.display()),
        },
        (None, Split::Train) => Ok(synthetic_corpus(cfg.data.seed, cfg.data.train_images, &cfg.data.scene)?),
        (None, Split::Holdout) => Ok(synthetic_corpus(
            cfg.data.seed.wrapping_add(HOLDOUT_SEED_OFFSET),
            cfg.data.holdout_images,
            &cfg.data.scene,
        )?),
    }
}

/// Load a corpus directory given explicitly on the command line.
pub fn load_path(dir: &Path, num_classes: usize) -> Result<Vec<AnnotatedImage>> {
    load_dir(dir, num_classes)
}
