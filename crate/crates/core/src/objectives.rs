//! Training losses and their combinations per mode.

use std::collections::BTreeMap;
use std::fmt;

use numcore::{ctc_required_frames, forward, grad_check_with, value_and_gradients, GradCheckOptions, GradCheckReport, Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Spectrogram;
use crate::masking::{apply_plan, Epsilon, MaskPlan};
use crate::model::net::{Head, Net};
use crate::model::{encoder_frames, Component, LossWeights, ModelConfig, Params};
use crate::vocab::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    St,
    Mtl,
    Mam,
    MamMtl,
    Pretrain,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::St, Mode::Mtl, Mode::Mam, Mode::MamMtl, Mode::Pretrain];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::St => "st",
            Mode::Mtl => "mtl",
            Mode::Mam => "mam",
            Mode::MamMtl => "mam_mtl",
            Mode::Pretrain => "pretrain",
        }
    }

    pub fn uses_st(self) -> bool {
        self != Mode::Pretrain
    }

    pub fn uses_asr(self) -> bool {
        matches!(self, Mode::Mtl | Mode::MamMtl)
    }

    pub fn uses_rec(self) -> bool {
        matches!(self, Mode::Mam | Mode::MamMtl | Mode::Pretrain)
    }

    /// Components whose parameters the mode reads.
    pub fn components(self) -> Vec<Component> {
        let mut c = vec![Component::Encoder];
        if self.uses_st() {
            c.push(Component::StDecoder);
        }
        if self.uses_asr() {
            c.extend([Component::AsrDecoder, Component::Ctc]);
        }
        if self.uses_rec() {
            c.push(Component::Recon);
        }
        c
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

/// One annotated utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub x: Spectrogram,
    /// Gold translation ids ending in `EOS`.
    pub y: Option<Vec<usize>>,
    /// Gold transcript ids ending in `EOS`.
    pub z: Option<Vec<usize>>,
}

/// Zero-padded utterances with their true lengths and optional targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[batch, max_frames, d_x]`.
    pub features: Tensor<f32>,
    pub lengths: Vec<usize>,
    pub y_star: Option<Vec<Vec<usize>>>,
    pub z_star: Option<Vec<Vec<usize>>>,
    pub plans: Option<Vec<MaskPlan>>,
}

fn check_targets(targets: &[Vec<usize>], what: &str) -> Result<()> {
    for t in targets {
        if t.last() != Some(&EOS) {
            return Err(Error::Invalid(format!("{what} target does not end with end-of-sequence")));
        }
    }
    Ok(())
}

impl Batch {
    /// Pads the examples. A target kind is kept only when every example has it.
    pub fn new(examples: &[Example], plans: Option<Vec<MaskPlan>>) -> Result<Self> {
        let first = examples.first().ok_or(Error::TooFew {
            what: "utterances in a batch",
            min: 1,
            got: 0,
        })?;
        let d = first.x.dim();
        if let Some(e) = examples.iter().find(|e| e.x.dim() != d) {
            return Err(Error::DimMismatch(format!("utterance `{}` has {} bins, expected {d}", e.id, e.x.dim())));
        }
        let lengths: Vec<usize> = examples.iter().map(|e| e.x.frames()).collect();
        let max = *lengths.iter().max().unwrap();
        let mut data = vec![0.0f32; examples.len() * max * d];
        for (i, e) in examples.iter().enumerate() {
            data[i * max * d..][..e.x.data().len()].copy_from_slice(e.x.data());
        }
        let features = Tensor::new(vec![examples.len(), max, d], data)?;
        let collect = |f: fn(&Example) -> &Option<Vec<usize>>| -> Option<Vec<Vec<usize>>> {
            examples.iter().map(|e| f(e).clone()).collect()
        };
        let y_star = collect(|e| &e.y);
        let z_star = collect(|e| &e.z);
        if let Some(y) = &y_star {
            check_targets(y, "translation")?;
        }
        if let Some(z) = &z_star {
            check_targets(z, "transcript")?;
        }
        if let Some(p) = &plans {
            if p.len() != examples.len() {
                return Err(Error::DimMismatch(format!("{} mask plans for {} utterances", p.len(), examples.len())));
            }
        }
        Ok(Self {
            ids: examples.iter().map(|e| e.id.clone()).collect(),
            features,
            lengths,
            y_star,
            z_star,
            plans,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.dims()[2]
    }

    /// Utterance `i` without padding.
    pub fn utterance(&self, i: usize) -> Spectrogram {
        let (max, d) = (self.features.dims()[1], self.dim());
        let data = self.features.data()[i * max * d..][..self.lengths[i] * d].to_vec();
        Spectrogram::new(self.lengths[i], d, data).expect("validated at construction")
    }
}

/// Loss components of one evaluation; inactive ones are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_st: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_asr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_ctc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_rec: Option<f64>,
    pub total: f64,
}

/// Component values in the order st, asr, ctc, rec.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub st: f64,
    pub asr: f64,
    pub ctc: f64,
    pub rec: f64,
}

/// The mode's weighted sum of loss components.
pub fn weighted_total(mode: Mode, w: &LossWeights, c: &Components) -> f64 {
    let mut total = 0.0;
    if mode.uses_st() {
        total += w.st * c.st;
    }
    if mode.uses_asr() {
        total += w.asr * c.asr + w.ctc * c.ctc;
    }
    if mode.uses_rec() {
        total += w.rec * c.rec;
    }
    total
}

/// A loss graph with its scalar outputs.
pub struct LossGraph {
    pub graph: Graph,
    pub l_st: Option<NodeId>,
    pub l_asr: Option<NodeId>,
    pub l_ctc: Option<NodeId>,
    pub l_rec: Option<NodeId>,
    pub total: NodeId,
}

#[derive(Clone, Copy, Default)]
struct Terms {
    st: bool,
    asr: bool,
    ctc: bool,
    rec: bool,
}

impl Terms {
    fn of(mode: Mode) -> Self {
        Self {
            st: mode.uses_st(),
            asr: mode.uses_asr(),
            ctc: mode.uses_asr(),
            rec: mode.uses_rec(),
        }
    }
}

fn missing(mode: &str, field: &'static str) -> Error {
    Error::MissingField {
        mode: mode.to_string(),
        field,
    }
}

fn add_all(g: &mut Graph, parts: &[NodeId]) -> NodeId {
    parts[1..].iter().fold(parts[0], |acc, &p| g.add(acc, p))
}

/// Summed teacher-forced NLL of one target, as a `[1]` node.
fn nll(net: &mut Net, head: Head, vocab: usize, memory: NodeId, mem_len: usize, target: &[usize]) -> Result<NodeId> {
    if let Some(&bad) = target.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { token: bad, vocab });
    }
    let inputs: Vec<usize> = std::iter::once(BOS).chain(target[..target.len() - 1].iter().copied()).collect();
    let logits = net.decoder(head, memory, mem_len, &inputs);
    let lp = net.g.log_softmax(logits);
    let onehot = Tensor::<f64>::from_fn(&[target.len(), vocab], |i| {
        if target[i / vocab] == i % vocab {
            1.0
        } else {
            0.0
        }
    })?;
    let onehot = net.g.constant(&onehot);
    let picked = net.g.mul(lp, onehot);
    Ok(net.g.sum(picked))
}

fn build(
    cfg: &ModelConfig,
    eps: &Epsilon,
    batch: &Batch,
    mode_name: &str,
    terms: Terms,
    masked_input: bool,
    dropout_seed: Option<u64>,
) -> Result<LossGraph> {
    if batch.dim() != cfg.d_x {
        return Err(Error::DimMismatch(format!("batch has {} bins, model expects {}", batch.dim(), cfg.d_x)));
    }
    let y = if terms.st {
        Some(batch.y_star.as_ref().ok_or_else(|| missing(mode_name, "y_star"))?)
    } else {
        None
    };
    let z = if terms.asr || terms.ctc {
        Some(batch.z_star.as_ref().ok_or_else(|| missing(mode_name, "z_star"))?)
    } else {
        None
    };
    let plans = if terms.rec || masked_input {
        Some(batch.plans.as_ref().ok_or_else(|| missing(mode_name, "plans"))?)
    } else {
        None
    };
    // Decoder-side terms read the masked pass unless configured otherwise.
    let supervised_masked = masked_input && !cfg.st_on_clean;
    let needs_clean = (terms.st || terms.asr || terms.ctc) && !supervised_masked;

    let mut g = Graph::new();
    let mut net = Net::new(&mut g, cfg);
    if let Some(seed) = dropout_seed {
        net = net.with_dropout(cfg.dropout, seed);
    }
    let (mut st, mut asr, mut ctc, mut rec) = (vec![], vec![], vec![], vec![]);
    let (mut st_tokens, mut asr_tokens, mut rec_elems) = (0usize, 0usize, 0usize);
    for i in 0..batch.len() {
        let x = batch.utterance(i);
        let n = x.frames();
        let n_enc = encoder_frames(n);
        let x_node = net.g.constant(&x.to_tensor());
        let clean = needs_clean.then(|| net.encoder(x_node, n).states);
        let masked = match plans {
            Some(p) if terms.rec || supervised_masked => {
                let x_hat = apply_plan(&x, &p[i], eps)?;
                let node = net.g.constant(&x_hat.to_tensor());
                Some(net.encoder(node, n).states)
            }
            _ => None,
        };
        let sup = if supervised_masked { masked } else { clean };
        if let (Some(y), Some(h)) = (y, sup) {
            st.push(nll(&mut net, Head::St, cfg.vocab_st, h, n_enc, &y[i])?);
            st_tokens += y[i].len();
        }
        if let (Some(z), Some(h)) = (z, sup) {
            if terms.asr {
                asr.push(nll(&mut net, Head::Asr, cfg.vocab_asr, h, n_enc, &z[i])?);
                asr_tokens += z[i].len();
            }
            if terms.ctc {
                let target = &z[i][..z[i].len() - 1];
                if let Some(&bad) = target.iter().find(|&&t| t >= cfg.vocab_asr) {
                    return Err(Error::TokenOutOfRange {
                        token: bad,
                        vocab: cfg.vocab_asr,
                    });
                }
                let required = ctc_required_frames(target);
                if required > n_enc {
                    return Err(Error::Unalignable {
                        id: batch.ids[i].clone(),
                        required,
                        frames: n_enc,
                    });
                }
                let lp = net.ctc(h);
                ctc.push(net.g.ctc_loss(lp, target, cfg.ctc_blank()));
            }
        }
        if let (true, Some(h)) = (terms.rec, masked) {
            let r = net.reconstruct(h, n_enc, n);
            if cfg.rec_masked_only {
                let rows = plans.unwrap()[i].masked();
                let d = cfg.d_x;
                let m = Tensor::<f64>::from_fn(&[n, d], |k| if rows.binary_search(&(k / d)).is_ok() { 1.0 } else { 0.0 })?;
                let m = net.g.constant(&m);
                let rm = net.g.mul(r, m);
                let xm = net.g.mul(x_node, m);
                rec.push(net.g.sq_err(rm, xm));
                rec_elems += rows.len() * d;
            } else {
                rec.push(net.g.sq_err(r, x_node));
                rec_elems += n * cfg.d_x;
            }
        }
    }
    let w = &cfg.weights;
    let mut weighted = Vec::new();
    let mut finish = |g: &mut Graph, parts: &[NodeId], factor: f64, weight: f64, name: &str| {
        (!parts.is_empty()).then(|| {
            let s = add_all(g, parts);
            let l = g.scale(s, factor);
            g.mark_output(name, l);
            weighted.push(g.scale(l, weight));
            l
        })
    };
    let b = batch.len() as f64;
    let l_st = finish(&mut g, &st, -1.0 / st_tokens.max(1) as f64, w.st, "l_st");
    let l_asr = finish(&mut g, &asr, -1.0 / asr_tokens.max(1) as f64, w.asr, "l_asr");
    let l_ctc = finish(&mut g, &ctc, 1.0 / b, w.ctc, "l_ctc");
    let l_rec = finish(&mut g, &rec, 1.0 / rec_elems.max(1) as f64, w.rec, "l_rec");
    let total = add_all(&mut g, &weighted);
    g.mark_output("total", total);
    Ok(LossGraph {
        graph: g,
        l_st,
        l_asr,
        l_ctc,
        l_rec,
        total,
    })
}

fn check_components(params: &Params, mode: Mode) -> Result<()> {
    for c in mode.components() {
        if !params.has(c) {
            return Err(Error::Invalid(format!("mode {mode} needs {c:?} parameters, which are absent")));
        }
    }
    Ok(())
}

/// The full graph for `mode`. With `dropout_seed`, dropout masks are drawn
/// from that seed; without it the graph is deterministic evaluation.
pub fn loss_graph(params: &Params, batch: &Batch, mode: Mode, dropout_seed: Option<u64>) -> Result<LossGraph> {
    check_components(params, mode)?;
    build(params.config(), &params.epsilon(), batch, mode.as_str(), Terms::of(mode), mode.uses_rec(), dropout_seed)
}

fn report(lg: &LossGraph, values: &numcore::Values<f32>, mode: Mode) -> LossReport {
    let get = |id: Option<NodeId>| id.map(|id| values.scalar(id) as f64);
    LossReport {
        mode,
        l_st: get(lg.l_st),
        l_asr: get(lg.l_asr),
        l_ctc: get(lg.l_ctc),
        l_rec: get(lg.l_rec),
        total: values.scalar(lg.total) as f64,
    }
}

pub fn loss_total(params: &Params, batch: &Batch, mode: Mode) -> Result<LossReport> {
    let lg = loss_graph(params, batch, mode, None)?;
    let values = forward(&lg.graph, params)?;
    Ok(report(&lg, &values, mode))
}

/// Mean per-token translation NLL on the clean input.
pub fn loss_st(params: &Params, batch: &Batch) -> Result<f64> {
    let terms = Terms {
        st: true,
        ..Terms::default()
    };
    let (lg, v) = evaluate_terms(params, batch, "st", terms, Component::StDecoder)?;
    Ok(v.scalar(lg.l_st.unwrap()) as f64)
}

/// Mean per-token transcript NLL on the clean input.
pub fn loss_asr(params: &Params, batch: &Batch) -> Result<f64> {
    let terms = Terms {
        asr: true,
        ..Terms::default()
    };
    let (lg, v) = evaluate_terms(params, batch, "asr", terms, Component::AsrDecoder)?;
    Ok(v.scalar(lg.l_asr.unwrap()) as f64)
}

/// Mean per-utterance CTC loss on the clean input.
pub fn loss_ctc(params: &Params, batch: &Batch) -> Result<f64> {
    let terms = Terms {
        ctc: true,
        ..Terms::default()
    };
    let (lg, v) = evaluate_terms(params, batch, "ctc", terms, Component::Ctc)?;
    Ok(v.scalar(lg.l_ctc.unwrap()) as f64)
}

/// Mean squared reconstruction error of `x` from the masked input.
pub fn loss_rec(params: &Params, batch: &Batch) -> Result<f64> {
    let terms = Terms {
        rec: true,
        ..Terms::default()
    };
    let (lg, v) = evaluate_terms(params, batch, "rec", terms, Component::Recon)?;
    Ok(v.scalar(lg.l_rec.unwrap()) as f64)
}

fn evaluate_terms(params: &Params, batch: &Batch, name: &str, terms: Terms, needed: Component) -> Result<(LossGraph, numcore::Values<f32>)> {
    for c in [Component::Encoder, needed] {
        if !params.has(c) {
            return Err(Error::Invalid(format!("loss {name} needs {c:?} parameters, which are absent")));
        }
    }
    let lg = build(params.config(), &params.epsilon(), batch, name, terms, terms.rec, None)?;
    let values = forward(&lg.graph, params)?;
    Ok((lg, values))
}

/// `(x - r)^2` averaged over every element, or over the rows of `masked`
/// only. The reduction used by the reconstruction loss.
pub fn reconstruction_error(x: &Spectrogram, r: &Spectrogram, masked: Option<&[usize]>) -> Result<f64> {
    if (x.frames(), x.dim()) != (r.frames(), r.dim()) {
        return Err(Error::DimMismatch(format!(
            "{}x{} target against {}x{} reconstruction",
            x.frames(),
            x.dim(),
            r.frames(),
            r.dim()
        )));
    }
    let rows: Vec<usize> = match masked {
        Some(m) => m.to_vec(),
        None => (0..x.frames()).collect(),
    };
    if rows.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &i in &rows {
        for (a, b) in x.row(i).iter().zip(r.row(i)) {
            sum += (*a as f64 - *b as f64).powi(2);
        }
    }
    Ok(sum / (rows.len() * x.dim()) as f64)
}

/// Loss report plus gradients of the total for every parameter the mode
/// reads. Parameters outside the graph receive no entry.
pub fn loss_and_gradients(params: &Params, batch: &Batch, mode: Mode, dropout_seed: Option<u64>) -> Result<(LossReport, BTreeMap<String, Tensor<f32>>)> {
    let lg = loss_graph(params, batch, mode, dropout_seed)?;
    let wrt: Vec<String> = lg.graph.leaf_names();
    let vg = value_and_gradients(&lg.graph, params, &wrt, "total")?;
    Ok((report(&lg, &vg.values, mode), vg.grads))
}

/// Compares the analytic gradient of the total with central differences at
/// 64-bit, dropout disabled.
pub fn grad_check_loss(params: &Params, batch: &Batch, mode: Mode, tolerance: f64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let lg = loss_graph(params, batch, mode, None)?;
    let wrt = lg.graph.leaf_names();
    Ok(grad_check_with(&lg.graph, &params.to_f64(), &wrt, "total", tolerance, opts)?)
}
