//! The optimization loop shared by every mode.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use numcore::{NumError, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::manifest::Record;
use crate::masking::{mask_frame, mask_span, MaskPlan, MaskStrategy};
use crate::model::{checkpoint, Component, ModelConfig, Params};
use crate::objectives::{loss_and_gradients, Batch, Example, LossReport, Mode};
use crate::rng::{derive_seed, hash_str, SplitMix64};
use crate::vocab::Vocab;

pub const SHUFFLE_WINDOW: usize = 64;
pub const LOG_FILE: &str = "train_log.jsonl";

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-9;
const STREAM_SHUFFLE: u64 = 0x5348_5546;
const STREAM_DROPOUT: u64 = 0x4452_4F50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: usize,
    /// Utterances per batch.
    pub batch_size: usize,
    /// Longer utterances are dropped before training.
    pub max_frames: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub keep_last: usize,
    pub clip_norm: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_from: Option<PathBuf>,
    /// Where checkpoints and the loss log go; nothing is written when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::St,
            steps: 1000,
            batch_size: 8,
            max_frames: 3000,
            lr_peak: 1e-3,
            warmup_steps: 100,
            checkpoint_every: 100,
            keep_last: 5,
            clip_norm: 5.0,
            seed: 1,
            init_from: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.batch_size == 0 || self.keep_last == 0 {
            return Err(Error::Config("batch_size and keep_last must be positive".into()));
        }
        if !(self.lr_peak > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr_peak and clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// `peak * min(step / warmup, sqrt(warmup / step))`.
pub fn lr_schedule(step: usize, lr_peak: f64, warmup: usize) -> Result<f64> {
    if step < 1 {
        return Err(Error::Config("learning-rate step starts at 1".into()));
    }
    let (s, w) = (step as f64, warmup.max(1) as f64);
    Ok(lr_peak * (s / w).min((w / s).sqrt()))
}

/// Drops utterances with more than `max_frames` frames.
pub fn filter_long(examples: Vec<Example>, max_frames: usize) -> Vec<Example> {
    let before = examples.len();
    let kept: Vec<Example> = examples.into_iter().filter(|e| e.x.frames() <= max_frames).collect();
    if kept.len() < before {
        log::info!("dropped {} utterances longer than {max_frames} frames", before - kept.len());
    }
    kept
}

/// Vocabularies built from a manifest's texts, attached to the config when
/// it carries none.
pub fn attach_vocabs(mut cfg: ModelConfig, records: &[Record]) -> ModelConfig {
    if cfg.st_vocab.is_none() && records.iter().any(|r| r.translation.is_some()) {
        cfg = cfg.with_st_vocab(Vocab::build(records.iter().filter_map(|r| r.translation.as_deref())));
    }
    if cfg.asr_vocab.is_none() && records.iter().any(|r| r.transcript.is_some()) {
        cfg = cfg.with_asr_vocab(Vocab::build(records.iter().filter_map(|r| r.transcript.as_deref())));
    }
    cfg
}

/// Batches of one epoch: a seeded shuffle, then length-sorted windows of
/// [`SHUFFLE_WINDOW`] utterances cut into batches.
pub fn epoch_batches(frames: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut rng = SplitMix64::new(derive_seed(&[seed, STREAM_SHUFFLE, epoch]));
    for i in (1..order.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    let mut out = Vec::new();
    for window in order.chunks_mut(SHUFFLE_WINDOW) {
        window.sort_by_key(|&i| frames[i]);
        out.extend(window.chunks(batch_size).map(<[usize]>::to_vec));
    }
    out
}

/// Mask plan for one utterance in one epoch, drawn from the model's mask seed.
pub fn epoch_plan(cfg: &ModelConfig, id: &str, frames: usize, epoch: u64) -> Result<MaskPlan> {
    let s = derive_seed(&[cfg.seed, hash_str(id), epoch]);
    match cfg.mask_strategy {
        MaskStrategy::Span => mask_span(frames, cfg.lambda, s, cfg.span_mean),
        MaskStrategy::Frame => mask_frame(frames, cfg.lambda, s),
    }
}

/// Starting parameters: fresh tensors for the mode's components, then every
/// tensor of `init` copied over (its components are kept even when the mode
/// does not train them).
pub fn initial_params(model: &ModelConfig, mode: Mode, seed: u64, init: Option<&Params>) -> Result<Params> {
    let mut components = mode.components();
    if let Some(src) = init {
        components.extend(Component::ALL.into_iter().filter(|&c| src.has(c)));
    }
    components.sort();
    components.dedup();
    let mut params = Params::init_components(model, seed, &components)?;
    if let Some(src) = init {
        for (name, t) in src.tensors() {
            if params.get(name).is_some() {
                params.set(name, t.clone())?;
            }
        }
    }
    Ok(params)
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub params: Params,
    pub log: Vec<LogEntry>,
    /// Retained checkpoint files, oldest first.
    pub checkpoints: Vec<PathBuf>,
}

struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor<f32>>, scale: f64, lr: f64, t: usize) -> Result<()> {
        let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for (name, g) in grads {
            let p = params.get(name).expect("gradient for a known tensor");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut data = p.data().to_vec();
            for (((w, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64 * scale;
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let step = lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                *w = (*w as f64 - step) as f32;
            }
            params.set(name, Tensor::new(p.dims().to_vec(), data)?)?;
        }
        Ok(())
    }
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.mamc"))
}

fn check_annotations(examples: &[Example], mode: Mode) -> Result<()> {
    let field = |what: &'static str| Error::MissingField {
        mode: mode.to_string(),
        field: what,
    };
    for e in examples {
        if mode.uses_st() && e.y.is_none() {
            return Err(field("y_star"));
        }
        if mode.uses_asr() && e.z.is_none() {
            return Err(field("z_star"));
        }
    }
    Ok(())
}

/// Trains from scratch, or from `cfg.init_from` when set.
pub fn train(cfg: &TrainConfig, model: &ModelConfig, examples: &[Example]) -> Result<TrainOutcome> {
    let init = cfg.init_from.as_deref().map(checkpoint::load).transpose()?;
    train_from(cfg, model, examples, init.as_ref())
}

/// Loads every tensor of the checkpoint the trained model also has, then
/// trains as [`train`].
pub fn fine_tune(init: &Path, cfg: &TrainConfig, model: &ModelConfig, examples: &[Example]) -> Result<TrainOutcome> {
    let src = checkpoint::load(init)?;
    train_from(cfg, model, examples, Some(&src))
}

pub fn train_from(cfg: &TrainConfig, model: &ModelConfig, examples: &[Example], init: Option<&Params>) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let examples = filter_long(examples.to_vec(), cfg.max_frames);
    if examples.is_empty() {
        return Err(Error::TooFew {
            what: "training utterances",
            min: 1,
            got: 0,
        });
    }
    check_annotations(&examples, cfg.mode)?;
    let mut params = initial_params(model, cfg.mode, cfg.seed, init)?;
    let mut log_file = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(LOG_FILE);
            Some((std::fs::File::create(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };
    let frames: Vec<usize> = examples.iter().map(|e| e.x.frames()).collect();
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let mut epoch = 0u64;
    let mut queue = epoch_batches(&frames, cfg.batch_size, cfg.seed, epoch).into_iter();
    for step in 1..=cfg.steps {
        let idx = match queue.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                queue = epoch_batches(&frames, cfg.batch_size, cfg.seed, epoch).into_iter();
                queue.next().expect("non-empty corpus")
            }
        };
        let chosen: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
        let plans = if cfg.mode.uses_rec() {
            Some(
                chosen
                    .iter()
                    .map(|e| epoch_plan(params.config(), &e.id, e.x.frames(), epoch))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let batch = Batch::new(&chosen, plans)?;
        let dropout = (model.dropout > 0.0).then(|| derive_seed(&[cfg.seed, STREAM_DROPOUT, step as u64]));
        let (report, grads) = match loss_and_gradients(&params, &batch, cfg.mode, dropout) {
            Err(Error::Numeric(NumError::NonFinite { .. })) => return Err(Error::NonFiniteLoss { step }),
            other => other?,
        };
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let norm = grads
            .values()
            .flat_map(|g| g.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        let lr = lr_schedule(step, cfg.lr_peak, cfg.warmup_steps)?;
        adam.update(&mut params, &grads, scale, lr, step)?;
        let entry = LogEntry { step, report, lr };
        if let Some((file, path)) = log_file.as_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(file, "{line}").map_err(io_err(path.as_path()))?;
        }
        log.push(entry);
        let due = step == cfg.steps || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0);
        if let (true, Some(dir)) = (due, &cfg.out_dir) {
            let path = checkpoint_path(dir, step);
            checkpoint::save(&params, &path)?;
            checkpoints.push(path);
            while checkpoints.len() > cfg.keep_last {
                let old = checkpoints.remove(0);
                std::fs::remove_file(&old).map_err(io_err(&old))?;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        checkpoints,
    })
}

/// Checkpoint files in `dir`, sorted by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("checkpoint_") && n.ends_with(".mamc"))
        })
        .collect();
    out.sort();
    Ok(out)
}
