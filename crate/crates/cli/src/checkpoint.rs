//! Checkpoints are safetensors archives: a JSON header naming every array
//! with its shape and dtype, followed by the raw little-endian data.
//!
//! Naming scheme:
//! - `param.<path>` model parameters, e.g. `param.encoder.blocks.0.attn.q.weight`
//! - `optim.m.<path>` / `optim.v.<path>` AdamW moments
//!
//! The header metadata holds `kind`, `step`, `seed` and the `config`
//! snapshot as JSON. Every random stream of a run is derived from
//! `(seed, step)`, so the step counter is the complete RNG state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use uwkit_core::ParamStore;

use crate::config::RunConfig;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Teacher,
    Student,
}

impl Kind {
    fn as_str(self) -> &'static str {
        match self {
            Kind::Teacher => "teacher",
            Kind::Student => "student",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Kind::Teacher),
            "student" => Ok(Kind::Student),
            other => bail!("unknown checkpoint kind {other:?}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: Kind,
    pub step: u64,
    pub seed: u64,
    pub config: RunConfig,
    pub params: BTreeMap<String, Tensor>,
    pub optim: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT_VERSION.to_string());
        meta.insert("kind".to_string(), self.kind.as_str().to_string());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("seed".to_string(), self.seed.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        let entries: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(k, v)| (format!("param.{k}"), v))
            .chain(self.optim.iter().map(|(k, v)| (format!("optim.{k}"), v)))
            .collect();
        safetensors::serialize_to_file(entries, Some(meta), path)
            .with_context(|| format!("writing checkpoint {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| anyhow!("{}: checkpoint has no metadata", path.display()))?;
        let field = |k: &str| meta.get(k).ok_or_else(|| anyhow!("{}: metadata lacks {k}", path.display()));
        if field("format")? != FORMAT_VERSION {
            bail!("{}: unsupported checkpoint format {}", path.display(), field("format")?);
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut params = BTreeMap::new();
        let mut optim = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix("param.") {
                params.insert(p.to_string(), t);
            } else if let Some(o) = name.strip_prefix("optim.") {
                optim.insert(o.to_string(), t);
            } else {
                bail!("{}: unexpected entry {name}", path.display());
            }
        }
        Ok(Self {
            kind: Kind::parse(field("kind")?)?,
            step: field("step")?.parse()?,
            seed: field("seed")?.parse()?,
            config: RunConfig::from_json(field("config")?)?,
            params,
            optim,
        })
    }

    /// Copy every parameter of `ps` whose name starts with `prefix` from
    /// this checkpoint. Missing or mis-shaped entries are errors.
    pub fn restore(&self, ps: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, _) in ps.vars() {
            if !name.starts_with(prefix) {
                continue;
            }
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| anyhow!("checkpoint lacks parameter {name}"))?;
            ps.set(&name, t)?;
            n += 1;
        }
        Ok(n)
    }
}

/// Snapshot of every parameter in `ps`.
pub fn snapshot(ps: &ParamStore) -> Result<BTreeMap<String, Tensor>> {
    ps.vars()
        .into_iter()
        .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
        .collect()
}
