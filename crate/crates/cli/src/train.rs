//! Training drivers: teacher pre-training on the task losses and student
//! distillation against a frozen teacher.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use uwkit_core::encoder::images_to_tensor;
use uwkit_core::loss::LossReport;
use uwkit_core::mgukd::{distill_step, DistillLossReport};
use uwkit_core::model::ground_truth;
use uwkit_core::optim::AdamW;
use uwkit_core::{augment, evaluate, AnnotatedImage, Distiller, EncoderConfig, EvalResult, ParamStore, Uwsam, VitEncoder};

use crate::checkpoint::{snapshot, Checkpoint, Kind};
use crate::config::RunConfig;

const TAG_EPOCH: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_TASK: u64 = 3;
const TAG_MASK: u64 = 4;

/// Seed of one random stream of a run, from the run seed, a stream tag and
/// two indices.
pub fn derive_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for v in [a, b] {
        z = z.wrapping_add(v).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
    /// `alpha · l_mgukd`, the distillation share of `l_total`.
    pub l_distill_weighted: f64,
}

struct Distillation {
    teacher: VitEncoder,
    distiller: Distiller,
}

pub struct Trainer {
    cfg: RunConfig,
    kind: Kind,
    ps: ParamStore,
    model: Uwsam,
    distill: Option<Distillation>,
    opt: AdamW,
    step: u64,
}

impl Trainer {
    /// Teacher: the large encoder with fresh task heads, task losses only.
    pub fn teacher(cfg: &RunConfig) -> Result<Self> {
        Self::task_only(cfg, &cfg.teacher, Kind::Teacher)
    }

    /// The student architecture trained on task losses alone, without any
    /// distillation machinery.
    pub fn plain_student(cfg: &RunConfig) -> Result<Self> {
        Self::task_only(cfg, &cfg.student, Kind::Student)
    }

    fn task_only(cfg: &RunConfig, encoder: &EncoderConfig, kind: Kind) -> Result<Self> {
        cfg.validate()?;
        let ps = ParamStore::new(cfg.seed, cfg.train.precision.dtype());
        let model = Uwsam::new(&ps, encoder, &cfg.model)?;
        let opt = AdamW::new(ps.vars(), cfg.optim)?;
        Ok(Self {
            cfg: cfg.clone(),
            kind,
            ps,
            model,
            distill: None,
            opt,
            step: 0,
        })
    }

    /// Student distilled from the frozen encoder of `teacher`.
    pub fn student(cfg: &RunConfig, teacher: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if teacher.kind != Kind::Teacher {
            bail!("distillation needs a teacher checkpoint");
        }
        let dtype = cfg.train.precision.dtype();
        let t_cfg = &teacher.config.teacher;
        if t_cfg.grid() != cfg.student.grid() || t_cfg.image_size != cfg.student.image_size {
            bail!("teacher checkpoint patch grid differs from the student's");
        }
        let tps = ParamStore::frozen(teacher.seed, dtype);
        let t_enc = VitEncoder::new(&tps.pp("encoder"), t_cfg)?;
        teacher.restore(&tps, "encoder.")?;

        let ps = ParamStore::new(cfg.seed, dtype);
        let model = Uwsam::new(&ps, &cfg.student, &cfg.model)?;
        let distiller = Distiller::new(
            &ps.pp("distill"),
            &cfg.distill,
            cfg.student.dim,
            t_cfg.dim,
            cfg.student.depth,
            t_cfg.depth,
        )?;
        let opt = AdamW::new(ps.vars(), cfg.optim)?;
        Ok(Self {
            cfg: cfg.clone(),
            kind: Kind::Student,
            ps,
            model,
            distill: Some(Distillation {
                teacher: t_enc,
                distiller,
            }),
            opt,
            step: 0,
        })
    }

    /// Rebuild a run from its checkpoint (and the teacher, for students).
    pub fn resume(ckpt: &Checkpoint, teacher: Option<&Checkpoint>) -> Result<Self> {
        let mut t = match (ckpt.kind, teacher) {
            (Kind::Teacher, _) => Self::teacher(&ckpt.config)?,
            (Kind::Student, Some(tc)) => Self::student(&ckpt.config, tc)?,
            (Kind::Student, None) => Self::plain_student(&ckpt.config)?,
        };
        t.load_checkpoint(ckpt)?;
        Ok(t)
    }

    fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let n = ckpt.restore(&self.ps, "")?;
        if n != ckpt.params.len() {
            bail!("checkpoint holds {} parameters, model has {n}", ckpt.params.len());
        }
        self.opt.load_state(ckpt.step, &ckpt.optim)?;
        self.step = ckpt.step;
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: self.kind,
            step: self.step,
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            params: snapshot(&self.ps)?,
            optim: self.opt.state().into_iter().map(|(k, v)| Ok((k, v.copy()?))).collect::<Result<_>>()?,
        })
    }

    pub fn model(&self) -> &Uwsam {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.set_lr(lr);
    }

    /// Image indices of optimizer step `step`: epochs walk a seeded
    /// permutation of the corpus in batches.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let spe = self.cfg.train.steps_per_epoch(n);
        if spe == 0 {
            return Vec::new();
        }
        let epoch = step / spe;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, TAG_EPOCH, epoch, 0)));
        let b = self.cfg.train.batch_size;
        let start = (step % spe) as usize * b;
        perm[start..(start + b).min(n)].to_vec()
    }

    /// One optimizer step on the next batch of `data`.
    pub fn step(&mut self, data: &[AnnotatedImage]) -> Result<StepLog> {
        if data.is_empty() {
            bail!("training corpus is empty");
        }
        let s = self.step;
        let seed = self.cfg.seed;
        let items: Vec<AnnotatedImage> = self
            .batch_indices(s, data.len())
            .iter()
            .enumerate()
            .map(|(j, &i)| augment(&data[i], &self.cfg.augment, derive_seed(seed, TAG_AUGMENT, s, j as u64)))
            .collect();
        let refs: Vec<&AnnotatedImage> = items.iter().collect();
        let arrays: Vec<_> = items.iter().map(|i| &i.image).collect();
        let x = images_to_tensor(&arrays, self.ps.dtype())?;
        let task_seed = derive_seed(seed, TAG_TASK, s, 0);

        let (feature, distill_loss, distill_report) = match &self.distill {
            None => {
                let taps = self.model.encoder.encode(&x)?;
                (taps.last().clone(), None, DistillLossReport::zero(0, 0.0))
            }
            Some(d) => {
                let out = distill_step(
                    &x,
                    &d.teacher,
                    &self.model.encoder,
                    &d.distiller,
                    derive_seed(seed, TAG_MASK, s, 0),
                )?;
                (out.student_taps.last().clone(), Some(out.loss), out.report)
            }
        };
        let task = self.model.task_losses(&feature, &refs, task_seed)?;
        let (cls, rpn, seg) = task.values()?;
        let report = LossReport::new(cls, rpn, seg, &distill_report);
        if !report.is_finite() {
            bail!(
                "loss diverged at step {s}: cls {cls}, rpn {rpn}, seg {seg}, distill {:?}",
                distill_report.per_layer
            );
        }
        let mut total = task.task()?;
        if let Some(l) = distill_loss {
            total = (total + (l * distill_report.alpha)?)?;
        }
        let grads = total.backward()?;
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            l_distill_weighted: report.alpha * report.l_mgukd,
            losses: report,
        })
    }

    /// Per-element MSE of every student tap against its paired teacher layer,
    /// through the run's own reconstruction heads, on `data` without masking
    /// noise beyond the fixed evaluation seed.
    pub fn distill_loss_on(&self, data: &[AnnotatedImage]) -> Result<Option<DistillLossReport>> {
        let Some(d) = &self.distill else {
            return Ok(None);
        };
        let mut per_layer = vec![0.0; d.distiller.pairs().len()];
        let batch = self.cfg.eval.batch_size;
        for (bi, chunk) in data.chunks(batch).enumerate() {
            let arrays: Vec<_> = chunk.iter().map(|i| &i.image).collect();
            let x = images_to_tensor(&arrays, self.ps.dtype())?;
            let out = distill_step(&x, &d.teacher, &self.model.encoder, &d.distiller, derive_seed(0, TAG_MASK, bi as u64, 1))?;
            for (acc, v) in per_layer.iter_mut().zip(&out.report.per_layer) {
                *acc += v * chunk.len() as f64;
            }
        }
        for v in per_layer.iter_mut() {
            *v /= data.len().max(1) as f64;
        }
        let total = per_layer.iter().sum();
        Ok(Some(DistillLossReport {
            alpha: d.distiller.config().alpha,
            weighted: d.distiller.config().alpha * total,
            per_layer,
            total,
        }))
    }

    /// Frozen teacher encoder of a distillation run.
    pub fn teacher_encoder(&self) -> Option<&VitEncoder> {
        self.distill.as_ref().map(|d| &d.teacher)
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub name: &'static str,
}

impl RunOutput {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join(format!("{}.safetensors", self.name))
    }

    pub fn epoch_checkpoint(&self, epoch: u64) -> PathBuf {
        self.dir.join(format!("{}_epoch{:03}.safetensors", self.name, epoch))
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join(format!("{}_log.jsonl", self.name))
    }
}

/// Train until `total_steps` optimizer steps have been taken. Each step is
/// written as one JSON line to `log`; checkpoints go to `out` if given.
pub fn run(
    trainer: &mut Trainer,
    data: &[AnnotatedImage],
    total_steps: u64,
    out: Option<&RunOutput>,
    log: &mut dyn Write,
) -> Result<Vec<StepLog>> {
    let spe = trainer.cfg.train.steps_per_epoch(data.len()).max(1);
    let mut logs = Vec::new();
    while trainer.step < total_steps {
        let entry = trainer.step(data)?;
        writeln!(log, "{}", serde_json::to_string(&entry)?)?;
        if entry.step % 10 == 0 || entry.step == total_steps {
            log::info!(
                "step {} l_task {:.4} l_mgukd {:.4} l_total {:.4}",
                entry.step,
                entry.losses.l_task,
                entry.losses.l_mgukd,
                entry.losses.l_total
            );
        }
        logs.push(entry);
        if let Some(o) = out {
            if trainer.cfg.train.checkpoint_every_epoch && trainer.step % spe == 0 {
                let path = o.epoch_checkpoint(trainer.step / spe);
                trainer.checkpoint()?.save(&path).with_context(|| format!("saving {}", path.display()))?;
            }
        }
    }
    if let Some(o) = out {
        trainer.checkpoint()?.save(&o.final_checkpoint())?;
    }
    Ok(logs)
}

/// COCO-protocol evaluation of `model` on `data`.
pub fn evaluate_model(model: &Uwsam, data: &[AnnotatedImage], batch: usize) -> Result<EvalResult> {
    let preds = predictions(model, data, batch)?;
    Ok(evaluate(&preds, &ground_truth(data))?)
}

pub fn predictions(model: &Uwsam, data: &[AnnotatedImage], batch: usize) -> Result<Vec<uwkit_core::metrics::Prediction>> {
    let mut preds = Vec::new();
    for chunk in data.chunks(batch.max(1)) {
        let refs: Vec<&AnnotatedImage> = chunk.iter().collect();
        for (img, dets) in chunk.iter().zip(model.predict(&refs)?) {
            preds.extend(dets.iter().map(|d| d.to_prediction(img.id)));
        }
    }
    Ok(preds)
}

/// Mean of `l_task` over log entries with step in `[from, to]`.
pub fn moving_average(logs: &[StepLog], from: u64, to: u64) -> f64 {
    let v: Vec<f64> = logs
        .iter()
        .filter(|l| (from..=to).contains(&l.step))
        .map(|l| l.losses.l_task)
        .collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Write a JSON document, creating parent directories.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}
