use std::collections::BTreeMap;

use numcore::{Bindings, Tensor};
use serde::Serialize;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::masking::Epsilon;
use crate::rng::{derive_seed, hash_str, SplitMix64};

pub const INIT_SCALE: f64 = 0.02;
pub const EPSILON_NAME: &str = "epsilon";

/// Independently instantiable parts of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Encoder,
    StDecoder,
    AsrDecoder,
    Ctc,
    Recon,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Encoder,
        Component::StDecoder,
        Component::AsrDecoder,
        Component::Ctc,
        Component::Recon,
    ];

    /// The component owning a tensor name; `None` for the mask vector.
    pub fn of(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        match head {
            "enc" => Some(Self::Encoder),
            "st_dec" => Some(Self::StDecoder),
            "asr_dec" => Some(Self::AsrDecoder),
            "ctc" => Some(Self::Ctc),
            "rec" => Some(Self::Recon),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Shape {
    name: String,
    dims: Vec<usize>,
    init: Init,
}

fn push(out: &mut Vec<Shape>, name: String, dims: Vec<usize>, init: Init) {
    out.push(Shape { name, dims, init });
}

fn linear(out: &mut Vec<Shape>, p: &str, d_in: usize, d_out: usize) {
    push(out, format!("{p}.w"), vec![d_in, d_out], Init::Normal);
    push(out, format!("{p}.b"), vec![d_out], Init::Zeros);
}

fn layer_norm(out: &mut Vec<Shape>, p: &str, d: usize) {
    push(out, format!("{p}.gamma"), vec![d], Init::Ones);
    push(out, format!("{p}.beta"), vec![d], Init::Zeros);
}

fn attention(out: &mut Vec<Shape>, p: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        linear(out, &format!("{p}.{proj}"), d, d);
    }
}

fn ffn(out: &mut Vec<Shape>, p: &str, d: usize, hidden: usize) {
    push(out, format!("{p}.w1"), vec![d, hidden], Init::Normal);
    push(out, format!("{p}.b1"), vec![hidden], Init::Zeros);
    push(out, format!("{p}.w2"), vec![hidden, d], Init::Normal);
    push(out, format!("{p}.b2"), vec![d], Init::Zeros);
}

fn decoder(out: &mut Vec<Shape>, p: &str, cfg: &ModelConfig, vocab: usize) {
    let d = cfg.d_model;
    push(out, format!("{p}.embed"), vec![vocab, d], Init::Normal);
    for i in 0..cfg.dec_layers {
        let l = format!("{p}.layers.{i}");
        layer_norm(out, &format!("{l}.ln1"), d);
        attention(out, &format!("{l}.self_attn"), d);
        layer_norm(out, &format!("{l}.ln2"), d);
        attention(out, &format!("{l}.cross_attn"), d);
        layer_norm(out, &format!("{l}.ln3"), d);
        ffn(out, &format!("{l}.ffn"), d, cfg.ffn_dim);
    }
    layer_norm(out, &format!("{p}.ln"), d);
    linear(out, &format!("{p}.out"), d, vocab);
}

fn component_shapes(cfg: &ModelConfig, component: Component) -> Vec<Shape> {
    let d = cfg.d_model;
    let c1 = cfg.conv_channels();
    let flat = d * cfg.reduced_bins();
    let mut out = Vec::new();
    match component {
        Component::Encoder => {
            push(&mut out, "enc.conv1.w".into(), vec![c1, 1, 3, 3], Init::Normal);
            push(&mut out, "enc.conv1.b".into(), vec![c1], Init::Zeros);
            push(&mut out, "enc.conv2.w".into(), vec![d, c1, 3, 3], Init::Normal);
            push(&mut out, "enc.conv2.b".into(), vec![d], Init::Zeros);
            linear(&mut out, "enc.proj", flat, d);
            for i in 0..cfg.enc_layers {
                let l = format!("enc.layers.{i}");
                layer_norm(&mut out, &format!("{l}.ln1"), d);
                attention(&mut out, &format!("{l}.attn"), d);
                layer_norm(&mut out, &format!("{l}.ln2"), d);
                ffn(&mut out, &format!("{l}.ffn"), d, cfg.ffn_dim);
            }
            if cfg.enc_layers > 0 {
                layer_norm(&mut out, "enc.ln", d);
            }
        }
        Component::StDecoder => decoder(&mut out, "st_dec", cfg, cfg.vocab_st),
        Component::AsrDecoder => decoder(&mut out, "asr_dec", cfg, cfg.vocab_asr),
        Component::Ctc => linear(&mut out, "ctc", d, cfg.ctc_classes()),
        Component::Recon => {
            linear(&mut out, "rec.proj", d, flat);
            push(&mut out, "rec.up1.w".into(), vec![d, c1, 3, 3], Init::Normal);
            push(&mut out, "rec.up1.b".into(), vec![c1], Init::Zeros);
            push(&mut out, "rec.up2.w".into(), vec![c1, 1, 3, 3], Init::Normal);
            push(&mut out, "rec.up2.b".into(), vec![1], Init::Zeros);
        }
    }
    out
}

/// Dims of every tensor a component owns, keyed by name.
pub fn shapes(cfg: &ModelConfig, component: Component) -> BTreeMap<String, Vec<usize>> {
    component_shapes(cfg, component)
        .into_iter()
        .map(|s| (s.name, s.dims))
        .collect()
}

/// Trainable parameter counts per component.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub encoder: usize,
    pub st_decoder: usize,
    pub asr_decoder: usize,
    pub ctc: usize,
    pub recon: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.encoder + self.st_decoder + self.asr_decoder + self.ctc + self.recon
    }

    /// Reconstruction head size relative to the plain translation model.
    pub fn recon_overhead(&self) -> f64 {
        self.recon as f64 / (self.encoder + self.st_decoder) as f64
    }
}

pub fn count_parameters(cfg: &ModelConfig) -> ParamCounts {
    let count = |c| {
        component_shapes(cfg, c)
            .iter()
            .map(|s| s.dims.iter().product::<usize>())
            .sum()
    };
    ParamCounts {
        encoder: count(Component::Encoder),
        st_decoder: count(Component::StDecoder),
        asr_decoder: count(Component::AsrDecoder),
        ctc: count(Component::Ctc),
        recon: count(Component::Recon),
    }
}

fn init_tensor(shape: &Shape, seed: u64, scale: f64) -> Tensor<f32> {
    let len = shape.dims.iter().product();
    let data = match shape.init {
        Init::Zeros => vec![0.0; len],
        Init::Ones => vec![1.0; len],
        Init::Normal => {
            let mut rng = SplitMix64::new(derive_seed(&[seed, hash_str(&shape.name)]));
            (0..len).map(|_| (rng.normal() * scale) as f32).collect()
        }
    };
    Tensor::new(shape.dims.clone(), data).expect("dims are positive")
}

/// Named parameter tensors plus the mask vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl Params {
    /// Every component.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_components(config, seed, &Component::ALL)
    }

    /// Only the listed components (the mask vector is always present).
    ///
    /// Each tensor draws from its own stream keyed by `(seed, name)`, so a
    /// component initializes identically whatever else is instantiated.
    pub fn init_components(config: &ModelConfig, seed: u64, components: &[Component]) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for &c in components {
            for shape in component_shapes(config, c) {
                let t = init_tensor(&shape, seed, INIT_SCALE);
                tensors.insert(shape.name, t);
            }
        }
        let eps = Shape {
            name: EPSILON_NAME.into(),
            dims: vec![config.d_x],
            init: Init::Normal,
        };
        tensors.insert(EPSILON_NAME.into(), init_tensor(&eps, seed, INIT_SCALE));
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Assembles params from raw tensors, checking every name and shape
    /// against the config.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let mut expected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for c in Component::ALL {
            expected.extend(shapes(&config, c));
        }
        expected.insert(EPSILON_NAME.into(), vec![config.d_x]);
        for (name, t) in &tensors {
            let want = expected
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("unexpected tensor `{name}`")))?;
            if want.as_slice() != t.dims() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: want.clone(),
                    found: t.dims().to_vec(),
                });
            }
        }
        if !tensors.contains_key(EPSILON_NAME) {
            return Err(Error::CheckpointMismatch(format!("missing tensor `{EPSILON_NAME}`")));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    /// Replaces an existing tensor; dims must match.
    pub fn set(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("no tensor `{name}`")))?;
        if slot.dims() != value.dims() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: slot.dims().to_vec(),
                found: value.dims().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn has(&self, component: Component) -> bool {
        self.tensors.keys().any(|n| Component::of(n) == Some(component))
    }

    /// Names of trainable tensors (everything but the mask vector).
    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.tensors
            .keys()
            .map(String::as_str)
            .filter(|n| *n != EPSILON_NAME)
    }

    pub fn epsilon(&self) -> Epsilon {
        Epsilon {
            vector: self.tensors[EPSILON_NAME].data().to_vec(),
        }
    }

    /// All tensors at 64-bit, for gradient checks.
    pub fn to_f64(&self) -> BTreeMap<String, Tensor<f64>> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }

    pub fn into_parts(self) -> (ModelConfig, BTreeMap<String, Tensor<f32>>) {
        (self.config, self.tensors)
    }
}

impl Bindings<f32> for Params {
    fn lookup(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn paper_scale_counts() {
        let c = count_parameters(&paper());
        assert_eq!(c.encoder, 17_240_704);
        assert_eq!(c.st_decoder, 13_577_024);
        assert_eq!(c.recon, 1_463_937);
        let overhead = c.recon_overhead();
        assert!((0.04..=0.09).contains(&overhead), "{overhead}");
    }

    #[test]
    fn conv_stack_only_encoder() {
        let cfg = ModelConfig {
            enc_layers: 0,
            ..ModelConfig::toy(20)
        };
        // d=32, C1=8, F'=5: conv1 8*9+8, conv2 32*8*9+32, proj 160*32+32.
        assert_eq!(count_parameters(&cfg).encoder, 80 + 2336 + 5152);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::toy(20);
        let a = Params::init(&cfg, 3).unwrap();
        assert_eq!(a, Params::init(&cfg, 3).unwrap());
        assert_ne!(a, Params::init(&cfg, 4).unwrap());
        let bad = ModelConfig {
            n_heads: 5,
            ..cfg
        };
        assert!(Params::init(&bad, 3).is_err());
    }

    #[test]
    fn components_share_streams() {
        let cfg = ModelConfig::toy(20);
        let full = Params::init(&cfg, 9).unwrap();
        let enc = Params::init_components(&cfg, 9, &[Component::Encoder, Component::Recon]).unwrap();
        assert!(!enc.has(Component::StDecoder));
        for (name, t) in enc.tensors() {
            assert_eq!(full.get(name), Some(t), "{name}");
        }
    }

    #[test]
    fn shape_checked_assembly() {
        let cfg = ModelConfig::toy(20);
        let (c, mut t) = Params::init(&cfg, 0).unwrap().into_parts();
        t.insert("enc.conv1.b".into(), Tensor::zeros(&[3]).unwrap());
        let err = Params::from_tensors(c, t).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { ref name, .. } if name == "enc.conv1.b"));
    }
}
