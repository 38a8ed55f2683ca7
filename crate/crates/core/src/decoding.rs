//! Greedy and beam decoding, corpus metrics and checkpoint averaging.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::path::Path;

use numcore::Tensor;

use crate::error::{Error, Result};
use crate::features::Spectrogram;
use crate::model::{checkpoint, decoder_log_probs, encode, EncoderOutput, Head, Params};
use crate::objectives::Batch;
use crate::vocab::EOS;

pub const DEFAULT_BEAM: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Ends with `EOS`.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// `logprob / lp(tokens.len())`.
    pub score: f64,
}

/// `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Anything that scores the next token given a prefix.
pub trait StepModel {
    /// Log-probabilities over the vocabulary.
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;

    fn eos(&self) -> usize {
        EOS
    }
}

/// A decoder head conditioned on fixed encoder states.
pub struct ModelStepper<'a> {
    pub params: &'a Params,
    pub enc: EncoderOutput,
    pub head: Head,
}

impl<'a> ModelStepper<'a> {
    /// Encodes `spec` as is: inference never masks.
    pub fn new(params: &'a Params, spec: &Spectrogram, head: Head) -> Result<Self> {
        Ok(Self {
            params,
            enc: encode(params, spec, false)?,
            head,
        })
    }
}

impl StepModel for ModelStepper<'_> {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let all = decoder_log_probs(self.params, &self.enc, prefix, self.head)?;
        Ok(all.row(prefix.len()).iter().map(|&v| v as f64).collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Highest-probability token per step. The end-of-sequence token is forced
/// at `max_len`, so the result always ends with it.
pub fn greedy_search(model: &impl StepModel, max_len: usize) -> Result<Hypothesis> {
    let eos = model.eos();
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    while tokens.len() < max_len.max(1) {
        let row = model.log_probs(&tokens)?;
        let tok = if tokens.len() + 1 == max_len.max(1) { eos } else { argmax(&row) };
        logprob += row[tok];
        tokens.push(tok);
        if tok == eos {
            break;
        }
    }
    Ok(Hypothesis {
        tokens,
        logprob,
        score: logprob,
    })
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search with length-normalized scores.
///
/// Each step keeps the `beam` best expansions by log-probability; those
/// ending in end-of-sequence are frozen. Search stops when no hypothesis is
/// active, or when `beam` hypotheses are finished and no active one can
/// still beat the worst of them.
pub fn beam_search_with(model: &impl StepModel, beam: usize, alpha: f64, max_len: usize) -> Result<Vec<Hypothesis>> {
    let beam = beam.max(1);
    let max_len = max_len.max(1);
    let eos = model.eos();
    let mut active: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let last = step + 1 == max_len;
        let mut cands: Vec<(Vec<usize>, f64)> = Vec::new();
        for (prefix, lp) in &active {
            let row = model.log_probs(prefix)?;
            let allowed: Box<dyn Iterator<Item = usize>> = if last { Box::new(std::iter::once(eos)) } else { Box::new(0..row.len()) };
            for tok in allowed {
                let mut t = prefix.clone();
                t.push(tok);
                cands.push((t, lp + row[tok]));
            }
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        cands.truncate(beam);
        active.clear();
        for (tokens, logprob) in cands {
            if tokens.last() == Some(&eos) {
                let score = logprob / length_penalty(tokens.len(), alpha);
                finished.push(Hypothesis { tokens, logprob, score });
            } else {
                active.push((tokens, logprob));
            }
        }
        finished.sort_by(rank);
        if active.is_empty() {
            break;
        }
        if finished.len() >= beam {
            let worst = finished[beam - 1].score;
            let bound = active
                .iter()
                .map(|(_, lp)| lp / length_penalty(max_len, alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            if bound <= worst {
                break;
            }
        }
    }
    finished.truncate(beam);
    Ok(finished)
}

pub fn greedy_decode(params: &Params, spec: &Spectrogram, max_len: usize) -> Result<Hypothesis> {
    greedy_search(&ModelStepper::new(params, spec, Head::St)?, max_len)
}

pub fn beam_search(params: &Params, spec: &Spectrogram, beam: usize, alpha: f64, max_len: usize) -> Result<Vec<Hypothesis>> {
    beam_search_with(&ModelStepper::new(params, spec, Head::St)?, beam, alpha, max_len)
}

/// Best translation of one utterance.
pub fn translate(params: &Params, spec: &Spectrogram, beam: usize, alpha: f64, max_len: usize) -> Result<Hypothesis> {
    let mut hyps = beam_search(params, spec, beam, alpha, max_len)?;
    Ok(hyps.remove(0))
}

fn ngrams<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU over 1- to 4-grams, uniform weights, brevity penalty, no
/// smoothing. Orders for which the hypotheses contain no n-gram at all are
/// left out and the remaining weights renormalized.
pub fn bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::DimMismatch(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if refs.is_empty() {
        return Err(Error::TooFew {
            what: "references",
            min: 1,
            got: 0,
        });
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngrams(h, n);
            let rc = ngrams(r, n);
            totals[n - 1] += hc.values().sum::<usize>();
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let orders: Vec<usize> = (0..4).filter(|&i| totals[i] > 0).collect();
    if orders.iter().any(|&i| matches[i] == 0) {
        return Ok(0.0);
    }
    let log_p = orders
        .iter()
        .map(|&i| (matches[i] as f64 / totals[i] as f64).ln())
        .sum::<f64>()
        / orders.len() as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Fraction of gold translation tokens that the teacher-forced decoder
/// ranks first, on the unmasked input.
pub fn token_accuracy(params: &Params, batch: &Batch) -> Result<f64> {
    let (hits, total) = token_hits(params, batch)?;
    Ok(hits as f64 / total as f64)
}

/// `(correct, total)` teacher-forced predictions over a batch.
pub fn token_hits(params: &Params, batch: &Batch) -> Result<(usize, usize)> {
    if batch.is_empty() {
        return Err(Error::TooFew {
            what: "utterances",
            min: 1,
            got: 0,
        });
    }
    let ys = batch.y_star.as_ref().ok_or(Error::MissingField {
        mode: "token-accuracy".into(),
        field: "y_star",
    })?;
    let (mut hits, mut total) = (0, 0);
    for (i, y) in ys.iter().enumerate() {
        let enc = encode(params, &batch.utterance(i), false)?;
        let lp = decoder_log_probs(params, &enc, &y[..y.len() - 1], Head::St)?;
        for (t, &gold) in y.iter().enumerate() {
            let row: Vec<f64> = lp.row(t).iter().map(|&v| v as f64).collect();
            hits += usize::from(argmax(&row) == gold);
            total += 1;
        }
    }
    Ok((hits, total))
}

/// Elementwise mean of parameter sets with identical configs and tensors.
pub fn average_params(sets: &[Params]) -> Result<Params> {
    let first = sets.first().ok_or(Error::TooFew {
        what: "checkpoints",
        min: 1,
        got: 0,
    })?;
    let mut sums: BTreeMap<&str, Vec<f64>> = first
        .tensors()
        .iter()
        .map(|(k, t)| (k.as_str(), vec![0.0; t.len()]))
        .collect();
    for p in sets {
        if p.config() != first.config() {
            return Err(Error::CheckpointMismatch("model configurations differ".into()));
        }
        if p.tensors().len() != first.tensors().len() {
            return Err(Error::CheckpointMismatch("tensor sets differ".into()));
        }
        for (name, t) in p.tensors() {
            let want = first
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("tensor `{name}` not in every checkpoint")))?;
            if want.dims() != t.dims() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: want.dims().to_vec(),
                    found: t.dims().to_vec(),
                });
            }
            for (acc, &v) in sums.get_mut(name.as_str()).unwrap().iter_mut().zip(t.data()) {
                *acc += v as f64;
            }
        }
    }
    let k = sets.len() as f64;
    let tensors = sums
        .into_iter()
        .map(|(name, acc)| {
            let dims = first.get(name).unwrap().dims().to_vec();
            let data = acc.into_iter().map(|v| (v / k) as f32).collect();
            Ok((name.to_string(), Tensor::new(dims, data)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Params::from_tensors(first.config().clone(), tensors)
}

pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<Params> {
    let sets = paths
        .iter()
        .map(|p| checkpoint::load(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    average_params(&sets)
}
