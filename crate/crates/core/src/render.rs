//! 8-bit binary PGM images of spectrograms and attention maps.

use std::path::Path;

use crate::error::{write_atomic, Error, Result};
use crate::features::Spectrogram;
use crate::masking::{mask, Epsilon, MaskStrategy};
use crate::model::{encode, reconstruct, Component, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Original,
    Masked,
    Reconstructed,
    Attention,
}

impl std::str::FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(View::Original),
            "masked" => Ok(View::Masked),
            "reconstructed" => Ok(View::Reconstructed),
            "attention" => Ok(View::Attention),
            _ => Err(Error::Config(format!("unknown view `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    pub lambda: f64,
    pub seed: u64,
    pub strategy: MaskStrategy,
    /// Defaults to the last encoder layer.
    pub layer: Option<usize>,
    pub head: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            seed: 0,
            strategy: MaskStrategy::Frame,
            layer: None,
            head: 0,
        }
    }
}

/// Min-max scaling to `0..=255`, rounding to nearest. A constant input maps
/// to all zeros.
pub fn normalize(values: &[f32]) -> Result<Vec<u8>> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("cannot render non-finite value {v}")));
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if !(hi > lo) {
        return Ok(vec![0; values.len()]);
    }
    Ok(values
        .iter()
        .map(|&v| (255.0 * (v as f64 - lo) / (hi - lo)).round() as u8)
        .collect())
}

/// Row-major `height x width` values as a P5 file.
pub fn pgm(width: usize, height: usize, values: &[f32]) -> Result<Vec<u8>> {
    if width * height != values.len() || values.is_empty() {
        return Err(Error::DimMismatch(format!(
            "{width}x{height} image from {} values",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(normalize(values)?);
    Ok(out)
}

/// One image row per frame, bins left to right.
pub fn spectrogram_pgm(spec: &Spectrogram) -> Result<Vec<u8>> {
    pgm(spec.dim(), spec.frames(), spec.data())
}

fn masked_input(spec: &Spectrogram, eps: &Epsilon, opts: &RenderOptions) -> Result<Spectrogram> {
    let plan = mask(opts.strategy, spec.frames(), opts.lambda, opts.seed)?;
    crate::masking::apply_plan(spec, &plan, eps)
}

/// Renders one view. `Masked` without parameters paints masked frames with
/// zeros; `Reconstructed` and `Attention` need parameters.
pub fn render(view: View, spec: &Spectrogram, params: Option<&Params>, opts: &RenderOptions) -> Result<Vec<u8>> {
    let need = |what: &str| params.ok_or_else(|| Error::Config(format!("the {what} view needs a checkpoint")));
    match view {
        View::Original => spectrogram_pgm(spec),
        View::Masked => {
            let eps = match params {
                Some(p) => p.epsilon(),
                None => Epsilon {
                    vector: vec![0.0; spec.dim()],
                },
            };
            spectrogram_pgm(&masked_input(spec, &eps, opts)?)
        }
        View::Reconstructed => {
            let p = need("reconstructed")?;
            if !p.has(Component::Recon) {
                return Err(Error::Config("checkpoint has no reconstruction head".into()));
            }
            let enc = encode(p, &masked_input(spec, &p.epsilon(), opts)?, false)?;
            spectrogram_pgm(&reconstruct(p, &enc, spec.frames(), spec.dim())?)
        }
        View::Attention => {
            let p = need("attention")?;
            let (layers, heads) = (p.config().enc_layers, p.config().n_heads);
            let layer = match opts.layer {
                Some(l) => l,
                None => layers
                    .checked_sub(1)
                    .ok_or_else(|| Error::Config("model has no encoder layers".into()))?,
            };
            if layer >= layers {
                return Err(Error::Config(format!("layer {layer} out of range (model has {layers})")));
            }
            if opts.head >= heads {
                return Err(Error::Config(format!("head {} out of range (model has {heads})", opts.head)));
            }
            let enc = encode(p, spec, true)?;
            let w = &enc.attn.expect("attention kept")[layer][opts.head];
            let n = w.dims()[0];
            pgm(n, n, w.data())
        }
    }
}

pub fn write_pgm(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}
