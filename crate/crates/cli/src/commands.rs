use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mam::decoding::{average_checkpoints, bleu, token_accuracy, translate};
use mam::features::{cmvn, stft_logmel, AudioBuffer, Spectrogram};
use mam::manifest::{self, Record};
use mam::masking::{mask_span, MaskStrategy};
use mam::model::{checkpoint, ModelConfig, Params};
use mam::objectives::{grad_check_loss, Batch, Example, Mode};
use mam::render::{render, write_pgm, RenderOptions, View};
use mam::rng::{derive_seed, SplitMix64};
use mam::toydata::{write_corpus, Split, ToySpec};
use mam::trainer::{attach_vocabs, list_checkpoints, train_from};
use mam::vocab::EOS;
use mam::Error;
use numcore::GradCheckOptions;

use crate::config;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub struct FeatureArgs {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub bins: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub cmvn: bool,
}

/// Returns the ids that failed; the rest get `feat` entries in the written
/// manifest.
pub fn features(a: &FeatureArgs) -> Result<Vec<String>> {
    let mut records = manifest::read(&a.manifest)?;
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let feats = a.out_dir.join("feats");
    std::fs::create_dir_all(&feats).map_err(io(&feats))?;
    let mut failed = Vec::new();
    for r in &mut records {
        let extract = |audio: &str| -> mam::Result<Spectrogram> {
            let spec = stft_logmel(&AudioBuffer::read_wav(Path::new(audio))?, a.bins, a.win_ms, a.hop_ms)?;
            if a.cmvn {
                cmvn(&spec)
            } else {
                Ok(spec)
            }
        };
        let result = match &r.audio {
            Some(audio) => extract(audio).and_then(|spec| {
                let path = feats.join(format!("{}.mamf", r.id));
                spec.write(&path)?;
                Ok(path)
            }),
            None => Err(Error::Invalid("no audio field".into())),
        };
        match result {
            Ok(path) => r.feat = Some(path.to_string_lossy().into_owned()),
            Err(e) => {
                eprintln!("{}: {e}", r.id);
                failed.push(r.id.clone());
            }
        }
    }
    let name = a.manifest.file_name().context("manifest path has no file name")?;
    manifest::write(&a.out_dir.join(name), &records)?;
    Ok(failed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainKind {
    Pretrain,
    Train,
    Finetune,
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub init: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

pub fn train(kind: TrainKind, a: &TrainArgs) -> Result<()> {
    let default_mode = match kind {
        TrainKind::Pretrain => Mode::Pretrain,
        TrainKind::Train => Mode::St,
        TrainKind::Finetune => Mode::Mam,
    };
    let exp = config::load(&a.config, default_mode)?;
    let mut cfg = exp.train;
    if kind == TrainKind::Pretrain && cfg.mode != Mode::Pretrain {
        return Err(Error::Config(format!("pretrain runs mode pretrain, config asks for {}", cfg.mode)).into());
    }
    if let Some(init) = &a.init {
        cfg.init_from = Some(init.clone());
    }
    if kind == TrainKind::Finetune && cfg.init_from.is_none() {
        return Err(Error::Config("finetune needs --init or train.init_from".into()).into());
    }
    if let Some(dir) = &a.out_dir {
        cfg.out_dir = Some(dir.clone());
    }
    if cfg.out_dir.is_none() {
        return Err(Error::Config("no output directory: pass --out-dir or set train.out_dir".into()).into());
    }
    let manifest_path = exp.manifest.ok_or_else(|| Error::Config("config has no `manifest`".into()))?;
    let records = manifest::read(&manifest_path)?;
    let init = cfg.init_from.as_deref().map(checkpoint::load).transpose()?;
    let mut model = exp.model;
    if let Some(src) = &init {
        model = inherit_vocabs(model, src.config());
    }
    let model = attach_vocabs(model, &records);
    let examples = manifest::load_examples(&records, model.st_vocab.as_ref(), model.asr_vocab.as_ref())?;
    let out = train_from(&cfg, &model, &examples, init.as_ref())?;
    let last = out.log.last().expect("at least one step");
    log::info!("step {} loss {:.6}", last.step, last.report.total);
    for path in &out.checkpoints {
        println!("{}", path.display());
    }
    Ok(())
}

/// Token lists of a checkpoint being fine-tuned carry over when the new
/// config names none, so the decoders keep their output classes.
fn inherit_vocabs(mut model: ModelConfig, src: &ModelConfig) -> ModelConfig {
    if model.st_vocab.is_none() {
        if let Some(v) = &src.st_vocab {
            model = model.with_st_vocab(v.clone());
        }
    }
    if model.asr_vocab.is_none() {
        if let Some(v) = &src.asr_vocab {
            model = model.with_asr_vocab(v.clone());
        }
    }
    model
}

/// Checkpoint arguments with directories expanded, keeping the last `last`
/// (all when 0).
pub fn resolve_checkpoints(paths: &[PathBuf], last: usize) -> Result<Vec<PathBuf>> {
    let mut all = Vec::new();
    for p in paths {
        if p.is_dir() {
            all.extend(list_checkpoints(p)?);
        } else {
            all.push(p.clone());
        }
    }
    if all.is_empty() {
        return Err(Error::Config("no checkpoints given".into()).into());
    }
    let skip = if last == 0 { 0 } else { all.len().saturating_sub(last) };
    Ok(all.split_off(skip))
}

pub fn load_model(paths: &[PathBuf], last: usize) -> Result<Params> {
    let chosen = resolve_checkpoints(paths, last)?;
    log::info!("using {} checkpoint(s), last {}", chosen.len(), chosen[chosen.len() - 1].display());
    Ok(if chosen.len() == 1 {
        checkpoint::load(&chosen[0])?
    } else {
        average_checkpoints(&chosen)?
    })
}

pub struct DecodeArgs {
    pub checkpoints: Vec<PathBuf>,
    pub beam: usize,
    pub length_penalty: f64,
    pub average_last: usize,
    pub max_len: usize,
}

fn feature_of(r: &Record) -> Result<Spectrogram> {
    let feat = r
        .feat
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("utterance `{}` has no features", r.id)))?;
    Ok(Spectrogram::read(Path::new(feat))?)
}

fn words(params: &Params, tokens: &[usize]) -> Result<String> {
    match &params.config().st_vocab {
        Some(v) => Ok(v.decode(tokens)?),
        None => Ok(tokens
            .iter()
            .filter(|&&t| t != EOS)
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")),
    }
}

/// One translation per manifest record, in order.
pub fn translations(a: &DecodeArgs, records: &[Record]) -> Result<Vec<String>> {
    if a.beam == 0 || a.max_len == 0 {
        return Err(Error::Config("beam and max-len must be positive".into()).into());
    }
    let params = load_model(&a.checkpoints, a.average_last)?;
    let specs = records.iter().map(feature_of).collect::<Result<Vec<_>>>()?;
    specs
        .iter()
        .map(|spec| words(&params, &translate(&params, spec, a.beam, a.length_penalty, a.max_len)?.tokens))
        .collect()
}

pub fn translate_cmd(a: &DecodeArgs, manifest_path: &Path, out: &Path) -> Result<()> {
    let records = manifest::read(manifest_path)?;
    let mut text = String::new();
    for line in translations(a, &records)? {
        writeln!(text, "{line}").expect("string write");
    }
    std::fs::write(out, text).map_err(io(out))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Bleu,
    TokenAccuracy,
}

pub fn eval(a: &DecodeArgs, manifest_path: &Path, metric: Metric, hyps: Option<&Path>) -> Result<f64> {
    let records = manifest::read(manifest_path)?;
    match metric {
        Metric::Bleu => {
            let refs = records
                .iter()
                .map(|r| {
                    r.translation
                        .as_deref()
                        .ok_or_else(|| Error::Invalid(format!("utterance `{}` has no translation", r.id)))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let lines = match hyps {
                Some(path) => std::fs::read_to_string(path)
                    .map_err(io(path))?
                    .lines()
                    .map(str::to_string)
                    .collect(),
                None => translations(a, &records)?,
            };
            let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
            let h: Vec<_> = lines.iter().map(|l| split(l)).collect();
            let r: Vec<_> = refs.iter().map(|l| split(l)).collect();
            Ok(bleu(&h, &r)?)
        }
        Metric::TokenAccuracy => {
            if hyps.is_some() {
                bail!(Error::Config("token-accuracy scores a checkpoint, not a hypothesis file".into()));
            }
            let params = load_model(&a.checkpoints, a.average_last)?;
            let vocab = params
                .config()
                .st_vocab
                .clone()
                .ok_or_else(|| Error::Config("checkpoint carries no translation vocabulary".into()))?;
            let examples = manifest::load_examples(&records, Some(&vocab), None)?;
            Ok(token_accuracy(&params, &Batch::new(&examples, None)?)?)
        }
    }
}

pub struct RenderArgs {
    pub feat: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub what: View,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub strategy: Option<MaskStrategy>,
    pub layer: Option<usize>,
    pub head: usize,
    pub out: PathBuf,
}

pub fn render_cmd(a: &RenderArgs) -> Result<()> {
    let spec = Spectrogram::read(&a.feat)?;
    let params = a.checkpoint.as_deref().map(checkpoint::load).transpose()?;
    let base = params.as_ref().map(|p| p.config().clone()).unwrap_or_default();
    let opts = RenderOptions {
        lambda: a.lambda.unwrap_or(base.lambda),
        seed: a.seed,
        strategy: a.strategy.unwrap_or(base.mask_strategy),
        layer: a.layer,
        head: a.head,
    };
    let bytes = render(a.what, &spec, params.as_ref(), &opts)?;
    write_pgm(&a.out, &bytes)?;
    Ok(())
}

/// Two random utterances shaped for `cfg`, labeled with non-special tokens.
fn probe_batch(cfg: &ModelConfig, seed: u64) -> Result<Batch> {
    let mut rng = SplitMix64::new(derive_seed(&[seed, 0x4743]));
    let token = |rng: &mut SplitMix64, vocab: usize| {
        if vocab > 3 {
            3 + rng.below(vocab as u64 - 3) as usize
        } else {
            EOS
        }
    };
    let mut ex = Vec::new();
    for (i, n) in [12usize, 15].into_iter().enumerate() {
        let x = Spectrogram::new(n, cfg.d_x, (0..n * cfg.d_x).map(|_| rng.normal() as f32).collect())?;
        let y = vec![token(&mut rng, cfg.vocab_st), token(&mut rng, cfg.vocab_st), EOS];
        let z = vec![token(&mut rng, cfg.vocab_asr), EOS];
        ex.push(Example {
            id: format!("probe{i}"),
            x,
            y: Some(y),
            z: Some(z),
        });
    }
    let plans = ex
        .iter()
        .map(|e| mask_span(e.x.frames(), cfg.lambda, seed, cfg.span_mean))
        .collect::<mam::Result<Vec<_>>>()?;
    Ok(Batch::new(&ex, Some(plans))?)
}

pub struct GradcheckArgs {
    pub config: Option<PathBuf>,
    pub tolerance: f64,
    pub seeds: u64,
    pub probes: usize,
}

/// Prints one line per (seed, mode); true when every check passed.
pub fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let cfg = match &a.config {
        Some(path) => config::load(path, Mode::St)?.model,
        None => ModelConfig::toy(20),
    };
    if !(a.tolerance > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()).into());
    }
    let mut ok = true;
    let mut worst = 0.0f64;
    for seed in 0..a.seeds {
        let params = Params::init(&cfg, seed)?;
        let batch = probe_batch(&cfg, seed)?;
        for mode in Mode::ALL {
            let opts = GradCheckOptions {
                max_probes_per_leaf: (a.probes > 0).then_some(a.probes),
                seed,
                ..GradCheckOptions::default()
            };
            let report = grad_check_loss(&params, &batch, mode, a.tolerance, &opts)?;
            worst = worst.max(report.max_rel_err());
            ok &= report.passed();
            println!(
                "seed {seed} {mode:<8} max rel err {:.3e} {}",
                report.max_rel_err(),
                if report.passed() { "ok" } else { "over tolerance" }
            );
        }
    }
    println!("{} max rel err {worst:.3e} (tolerance {:e})", if ok { "PASS" } else { "FAIL" }, a.tolerance);
    Ok(ok)
}

pub fn gen_toy(toy: &ToySpec, out_dir: &Path) -> Result<()> {
    for split in Split::ALL {
        let path = write_corpus(toy, split, out_dir)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn average(paths: &[PathBuf], last: usize, out: &Path) -> Result<()> {
    let params = load_model(paths, last)?;
    checkpoint::save(&params, out)?;
    Ok(())
}
