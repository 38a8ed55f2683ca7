//! Frame and span corruption of spectrograms with a shared mask vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Spectrogram;
use crate::rng::SplitMix64;

pub const DEFAULT_SPAN_MEAN: f64 = 3.0;
pub const MAX_SPAN: u64 = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    #[default]
    Frame,
    Span,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(Self::Frame),
            "span" => Ok(Self::Span),
            other => Err(Error::Config(format!("unknown mask strategy `{other}`"))),
        }
    }
}

/// A half-open run of masked frames `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

/// Which frames of one utterance are replaced by the mask vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub strategy: MaskStrategy,
    pub lambda: f64,
    pub seed: u64,
    /// Sorted, pairwise disjoint.
    spans: Vec<Span>,
}

impl MaskPlan {
    pub fn empty(strategy: MaskStrategy, seed: u64) -> Self {
        Self {
            strategy,
            lambda: 0.0,
            seed,
            spans: vec![],
        }
    }

    /// Plan masking exactly the given frames.
    pub fn from_frames(mut frames: Vec<usize>) -> Self {
        frames.sort_unstable();
        frames.dedup();
        Self {
            strategy: MaskStrategy::Frame,
            lambda: 0.0,
            seed: 0,
            spans: frames.into_iter().map(|start| Span { start, len: 1 }).collect(),
        }
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    /// Sorted masked frame indices.
    pub fn masked(&self) -> Vec<usize> {
        self.spans.iter().flat_map(|s| s.start..s.start + s.len).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// The single vector written over every masked frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Epsilon {
    pub vector: Vec<f32>,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidLambda(lambda))
    }
}

fn target_count(lambda: f64, frames: usize) -> usize {
    (lambda * frames as f64).round() as usize
}

/// Masks exactly `round(lambda * n)` distinct frames drawn without replacement.
pub fn mask_frame(frames: usize, lambda: f64, seed: u64) -> Result<MaskPlan> {
    check_lambda(lambda)?;
    let k = target_count(lambda, frames);
    let mut rng = SplitMix64::new(seed);
    let mut idx: Vec<usize> = (0..frames).collect();
    for i in 0..k {
        let j = i + rng.below((frames - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut plan = MaskPlan::from_frames(idx[..k].to_vec());
    plan.lambda = lambda;
    plan.seed = seed;
    Ok(plan)
}

/// Places non-overlapping spans with geometric widths until at least
/// `round(lambda * n)` frames are covered.
///
/// A width that fits nowhere is shortened to the longest free run, so
/// placement only stops early once every frame is masked.
pub fn mask_span(frames: usize, lambda: f64, seed: u64, width_mean: f64) -> Result<MaskPlan> {
    check_lambda(lambda)?;
    if !(width_mean >= 1.0) {
        return Err(Error::Config(format!("span width mean {width_mean} < 1")));
    }
    let target = target_count(lambda, frames);
    let mut rng = SplitMix64::new(seed);
    let mut free = vec![true; frames];
    let mut spans = Vec::new();
    let mut masked = 0;
    while masked < target {
        let width = rng.geometric(width_mean).clamp(1, MAX_SPAN) as usize;
        let longest = free
            .split(|f| !f)
            .map(<[bool]>::len)
            .max()
            .unwrap_or(0);
        if longest == 0 {
            break;
        }
        let width = width.min(longest);
        let legal: Vec<usize> = (0..=frames - width)
            .filter(|&s| free[s..s + width].iter().all(|&f| f))
            .collect();
        let start = legal[rng.below(legal.len() as u64) as usize];
        free[start..start + width].fill(false);
        spans.push(Span { start, len: width });
        masked += width;
    }
    spans.sort_unstable();
    Ok(MaskPlan {
        strategy: MaskStrategy::Span,
        lambda,
        seed,
        spans,
    })
}

pub fn mask(strategy: MaskStrategy, frames: usize, lambda: f64, seed: u64) -> Result<MaskPlan> {
    match strategy {
        MaskStrategy::Frame => mask_frame(frames, lambda, seed),
        MaskStrategy::Span => mask_span(frames, lambda, seed, DEFAULT_SPAN_MEAN),
    }
}

/// `x_hat`: masked rows replaced by `eps`, every other row untouched.
pub fn apply_plan(spec: &Spectrogram, plan: &MaskPlan, eps: &Epsilon) -> Result<Spectrogram> {
    if eps.vector.len() != spec.dim() {
        return Err(Error::DimMismatch(format!(
            "epsilon has {} values, spectrogram rows have {}",
            eps.vector.len(),
            spec.dim()
        )));
    }
    if let Some(last) = plan.spans.last() {
        if last.start + last.len > spec.frames() {
            return Err(Error::FrameOutOfRange {
                index: last.start + last.len - 1,
                frames: spec.frames(),
            });
        }
    }
    let d = spec.dim();
    let mut data = spec.data().to_vec();
    for i in plan.masked() {
        data[i * d..(i + 1) * d].copy_from_slice(&eps.vector);
    }
    Spectrogram::new(spec.frames(), d, data)
}
