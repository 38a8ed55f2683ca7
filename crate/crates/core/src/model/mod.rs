//! Encoder, decoders, CTC projection and reconstruction head.

pub mod checkpoint;
mod config;
pub mod net;
mod params;

use numcore::{forward, Graph, Tensor};

pub use config::{encoder_frames, LossWeights, ModelConfig};
pub use net::Head;
pub use params::{count_parameters, shapes, Component, ParamCounts, Params, EPSILON_NAME, INIT_SCALE};

use crate::error::{Error, Result};
use crate::features::Spectrogram;
use crate::vocab::BOS;
use net::Net;

/// Encoder states for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `[n', d_model]`.
    pub states: Tensor<f32>,
    /// `attn[layer][head]`, each `[n', n']`, when requested.
    pub attn: Option<Vec<Vec<Tensor<f32>>>>,
}

impl EncoderOutput {
    pub fn frames(&self) -> usize {
        self.states.dims()[0]
    }
}

fn require(params: &Params, component: Component, what: &str) -> Result<()> {
    if params.has(component) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("parameters carry no {what}")))
    }
}

pub(crate) fn check_input(params: &Params, spec: &Spectrogram) -> Result<()> {
    let d_x = params.config().d_x;
    if spec.dim() != d_x {
        return Err(Error::DimMismatch(format!(
            "spectrogram has {} bins, model expects {d_x}",
            spec.dim()
        )));
    }
    Ok(())
}

/// `h = f(x)`. Masking, if any, must already be applied to `spec`.
pub fn encode(params: &Params, spec: &Spectrogram, keep_attn: bool) -> Result<EncoderOutput> {
    require(params, Component::Encoder, "encoder")?;
    check_input(params, spec)?;
    let mut g = Graph::new();
    let x = g.constant(&spec.to_tensor());
    let nodes = Net::new(&mut g, params.config()).encoder(x, spec.frames());
    let values = forward(&g, params)?;
    let attn = keep_attn.then(|| {
        nodes
            .attn
            .iter()
            .map(|layer| layer.iter().map(|&id| values.get(id).clone()).collect())
            .collect()
    });
    Ok(EncoderOutput {
        states: values.get(nodes.states).clone(),
        attn,
    })
}

/// Log-probabilities `[prefix.len() + 1, V]` for every position of a
/// `BOS`-prefixed decoder input.
pub fn decoder_log_probs(params: &Params, enc: &EncoderOutput, prefix: &[usize], head: Head) -> Result<Tensor<f32>> {
    let cfg = params.config();
    if !params.has(match head {
        Head::St => Component::StDecoder,
        Head::Asr => Component::AsrDecoder,
    }) {
        return Err(Error::UnknownHead(head.prefix().to_string()));
    }
    let vocab = head.vocab(cfg);
    if let Some(&bad) = prefix.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { token: bad, vocab });
    }
    let inputs: Vec<usize> = std::iter::once(BOS).chain(prefix.iter().copied()).collect();
    let mut g = Graph::new();
    let memory = g.constant(&enc.states);
    let logits = Net::new(&mut g, cfg).decoder(head, memory, enc.frames(), &inputs);
    let lp = g.log_softmax(logits);
    Ok(forward(&g, params)?.get(lp).clone())
}

/// `log p(. | x, prefix)` for the next token.
pub fn decode_step(params: &Params, enc: &EncoderOutput, prefix: &[usize], head: Head) -> Result<Vec<f32>> {
    let all = decoder_log_probs(params, enc, prefix, head)?;
    Ok(all.row(prefix.len()).to_vec())
}

/// `phi(h)` cropped to `target_n x target_d`.
pub fn reconstruct(params: &Params, enc: &EncoderOutput, target_n: usize, target_d: usize) -> Result<Spectrogram> {
    require(params, Component::Recon, "reconstruction head")?;
    let cfg = params.config();
    if target_n == 0 {
        return Err(Error::TooFew {
            what: "target frames",
            min: 1,
            got: 0,
        });
    }
    if target_d != cfg.d_x {
        return Err(Error::DimMismatch(format!("target has {target_d} bins, model has {}", cfg.d_x)));
    }
    if encoder_frames(target_n) != enc.frames() {
        return Err(Error::DimMismatch(format!(
            "{} encoder states cannot come from {target_n} frames",
            enc.frames()
        )));
    }
    let mut g = Graph::new();
    let states = g.constant(&enc.states);
    let out = Net::new(&mut g, cfg).reconstruct(states, enc.frames(), target_n);
    let t = forward(&g, params)?.get(out).clone();
    Spectrogram::new(target_n, target_d, t.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{apply_plan, MaskPlan, MaskStrategy};

    fn spec(n: usize, d: usize, seed: u64) -> Spectrogram {
        let mut rng = crate::rng::SplitMix64::new(seed);
        Spectrogram::new(n, d, (0..n * d).map(|_| rng.normal() as f32).collect()).unwrap()
    }

    #[test]
    fn encoder_frame_counts() {
        let p = Params::init(&ModelConfig::toy(20), 1).unwrap();
        assert_eq!(encode(&p, &spec(100, 20, 0), false).unwrap().frames(), 25);
        assert_eq!(encode(&p, &spec(7, 20, 0), false).unwrap().frames(), 2);
        assert!(matches!(encode(&p, &spec(7, 19, 0), false), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn empty_plan_is_identity() {
        let p = Params::init(&ModelConfig::toy(20), 1).unwrap();
        let x = spec(13, 20, 4);
        let masked = apply_plan(&x, &MaskPlan::empty(MaskStrategy::Frame, 0), &p.epsilon()).unwrap();
        assert_eq!(encode(&p, &masked, false).unwrap(), encode(&p, &x, false).unwrap());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let p = Params::init(&ModelConfig::toy(20), 2).unwrap();
        let enc = encode(&p, &spec(30, 20, 1), true).unwrap();
        let attn = enc.attn.unwrap();
        assert_eq!(attn.len(), 2);
        for head in attn.iter().flatten() {
            assert_eq!(head.dims(), &[8, 8]);
            for i in 0..8 {
                let row = head.row(i);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn decode_step_is_normalized_and_causal() {
        let p = Params::init(&ModelConfig::toy(20), 3).unwrap();
        let enc = encode(&p, &spec(16, 20, 2), false).unwrap();
        let row = decode_step(&p, &enc, &[4, 5], Head::St).unwrap();
        let total: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert_eq!(row, decode_step(&p, &enc, &[4, 5], Head::St).unwrap());
        let short = decoder_log_probs(&p, &enc, &[4], Head::St).unwrap();
        let long = decoder_log_probs(&p, &enc, &[4, 9, 3], Head::St).unwrap();
        assert_eq!(short.row(0), long.row(0));
        assert_eq!(short.row(1), long.row(1));
        assert!(matches!(decode_step(&p, &enc, &[99], Head::St), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn missing_head_is_reported() {
        let cfg = ModelConfig::toy(20);
        let p = Params::init_components(&cfg, 3, &[Component::Encoder, Component::StDecoder]).unwrap();
        let enc = encode(&p, &spec(8, 20, 2), false).unwrap();
        assert!(matches!(decode_step(&p, &enc, &[], Head::Asr), Err(Error::UnknownHead(_))));
    }

    #[test]
    fn hand_built_decoder_row() {
        let cfg = ModelConfig {
            dec_layers: 1,
            vocab_st: 3,
            ..ModelConfig::toy(20)
        };
        let mut p = Params::init(&cfg, 0).unwrap();
        let names: Vec<String> = p.tensors().keys().filter(|n| n.starts_with("st_dec.")).cloned().collect();
        for n in names {
            let dims = p.get(&n).unwrap().dims().to_vec();
            p.set(&n, Tensor::zeros(&dims).unwrap()).unwrap();
        }
        let ln2 = std::f32::consts::LN_2;
        p.set("st_dec.out.b", Tensor::new(vec![3], vec![0.0, ln2, ln2]).unwrap()).unwrap();
        let enc = encode(&p, &spec(8, 20, 0), false).unwrap();
        let row = decode_step(&p, &enc, &[2], Head::St).unwrap();
        let ln5 = 5f64.ln();
        let want = [-ln5, 2f64.ln() - ln5, 2f64.ln() - ln5];
        for (a, b) in row.iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-6, "{row:?}");
        }
    }

    #[test]
    fn reconstruction_shapes() {
        let p = Params::init(&ModelConfig::toy(80), 1).unwrap();
        for n in [100, 7] {
            let enc = encode(&p, &spec(n, 80, 0), false).unwrap();
            let r = reconstruct(&p, &enc, n, 80).unwrap();
            assert_eq!((r.frames(), r.dim()), (n, 80));
        }
        let enc = encode(&p, &spec(7, 80, 0), false).unwrap();
        assert!(reconstruct(&p, &enc, 0, 80).is_err());
    }

    #[test]
    fn zeroed_head_reconstructs_zeros() {
        let mut p = Params::init(&ModelConfig::toy(20), 1).unwrap();
        let names: Vec<String> = p.tensors().keys().filter(|n| n.starts_with("rec.")).cloned().collect();
        for n in names {
            let dims = p.get(&n).unwrap().dims().to_vec();
            p.set(&n, Tensor::zeros(&dims).unwrap()).unwrap();
        }
        let enc = encode(&p, &spec(9, 20, 3), false).unwrap();
        assert!(reconstruct(&p, &enc, 9, 20).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
