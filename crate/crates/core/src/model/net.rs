//! Graph construction for every network. Leaves are named after parameter
//! tensors; inputs enter as constants.

use numcore::{Graph, NodeId, Tensor};

use super::config::{encoder_frames, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const LN_EPS: f64 = 1e-5;
const MASK_VALUE: f64 = -1e9;

/// Which decoder to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    St,
    Asr,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::St => "st_dec",
            Head::Asr => "asr_dec",
        }
    }

    pub fn vocab(self, cfg: &ModelConfig) -> usize {
        match self {
            Head::St => cfg.vocab_st,
            Head::Asr => cfg.vocab_asr,
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "st" => Ok(Head::St),
            "asr" => Ok(Head::Asr),
            other => Err(Error::UnknownHead(other.to_string())),
        }
    }
}

/// Sinusoidal positions, `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor<f64> {
    Tensor::from_fn(&[len, d], |idx| {
        let (pos, i) = (idx / d, idx % d);
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 / rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
    .expect("positive dims")
}

/// Graph nodes produced by the encoder.
pub struct EncoderNodes {
    pub states: NodeId,
    pub frames: usize,
    /// `attn[layer][head]`, each `[frames, frames]`.
    pub attn: Vec<Vec<NodeId>>,
}

/// Builds model subgraphs into a borrowed graph.
pub struct Net<'a> {
    pub g: &'a mut Graph,
    cfg: &'a ModelConfig,
    dropout: Option<(f64, SplitMix64)>,
}

impl<'a> Net<'a> {
    pub fn new(g: &'a mut Graph, cfg: &'a ModelConfig) -> Self {
        Self { g, cfg, dropout: None }
    }

    /// Inverted dropout with masks drawn from `seed`.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, SplitMix64::new(seed)));
        }
        self
    }

    fn dropout(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let keep = 1.0 / (1.0 - *rate);
        let mask = Tensor::from_fn(&[rows, cols], |_| if rng.next_f64() < *rate { 0.0 } else { keep })
            .expect("positive dims");
        let m = self.g.constant(&mask);
        self.g.mul(x, m)
    }

    fn linear(&mut self, x: NodeId, p: &str) -> NodeId {
        let w = self.g.leaf(&format!("{p}.w"));
        let b = self.g.leaf(&format!("{p}.b"));
        let y = self.g.matmul(x, w);
        self.g.add(y, b)
    }

    fn layer_norm(&mut self, x: NodeId, p: &str) -> NodeId {
        let gamma = self.g.leaf(&format!("{p}.gamma"));
        let beta = self.g.leaf(&format!("{p}.beta"));
        self.g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn ffn(&mut self, x: NodeId, p: &str, rows: usize) -> NodeId {
        let w1 = self.g.leaf(&format!("{p}.w1"));
        let b1 = self.g.leaf(&format!("{p}.b1"));
        let w2 = self.g.leaf(&format!("{p}.w2"));
        let b2 = self.g.leaf(&format!("{p}.b2"));
        let h = self.g.matmul(x, w1);
        let h = self.g.add(h, b1);
        let h = self.g.relu(h);
        let h = self.dropout(h, rows, self.cfg.ffn_dim);
        let y = self.g.matmul(h, w2);
        self.g.add(y, b2)
    }

    /// Multi-head scaled dot-product attention. Returns the output and each
    /// head's weight matrix.
    fn attention(&mut self, p: &str, query: NodeId, memory: NodeId, tq: usize, tk: usize, causal: bool) -> (NodeId, Vec<NodeId>) {
        let q = self.linear(query, &format!("{p}.q"));
        let k = self.linear(memory, &format!("{p}.k"));
        let v = self.linear(memory, &format!("{p}.v"));
        let dh = self.cfg.head_dim();
        let mask = causal.then(|| {
            let t = Tensor::from_fn(&[tq, tk], |i| if i % tk > i / tk { MASK_VALUE } else { 0.0 }).expect("positive dims");
            self.g.constant(&t)
        });
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        let mut probs = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = self.g.slice(q, 1, h * dh, dh);
            let kh = self.g.slice(k, 1, h * dh, dh);
            let vh = self.g.slice(v, 1, h * dh, dh);
            let kt = self.g.transpose(kh);
            let scores = self.g.matmul(qh, kt);
            let mut scores = self.g.scale(scores, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                scores = self.g.add(scores, m);
            }
            let weights = self.g.softmax(scores);
            probs.push(weights);
            let weights = self.dropout(weights, tq, tk);
            heads.push(self.g.matmul(weights, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { self.g.concat(&heads, 1) };
        (self.linear(cat, &format!("{p}.o")), probs)
    }

    /// `x: [frames, d_x]` to encoder states `[n', d_model]`.
    pub fn encoder(&mut self, x: NodeId, frames: usize) -> EncoderNodes {
        let cfg = self.cfg;
        let d = cfg.d_model;
        let n = encoder_frames(frames);
        let img = self.g.reshape(x, &[1, frames, cfg.d_x]);
        let mut h = img;
        for layer in ["enc.conv1", "enc.conv2"] {
            let w = self.g.leaf(&format!("{layer}.w"));
            let b = self.g.leaf(&format!("{layer}.b"));
            h = self.g.conv2d(h, w, b, 2);
            h = self.g.relu(h);
        }
        // [d, n', F'] -> [n', d * F']
        let h = self.g.permute(h, &[1, 0, 2]);
        let h = self.g.reshape(h, &[n, d * cfg.reduced_bins()]);
        let h = self.linear(h, "enc.proj");
        let h = self.g.scale(h, (d as f64).sqrt());
        let pe = self.g.constant(&positional_encoding(n, d));
        let mut h = self.g.add(h, pe);
        h = self.dropout(h, n, d);
        let mut attn = Vec::with_capacity(cfg.enc_layers);
        for i in 0..cfg.enc_layers {
            let l = format!("enc.layers.{i}");
            let a = self.layer_norm(h, &format!("{l}.ln1"));
            let (a, probs) = self.attention(&format!("{l}.attn"), a, a, n, n, false);
            attn.push(probs);
            let a = self.dropout(a, n, d);
            h = self.g.add(h, a);
            let f = self.layer_norm(h, &format!("{l}.ln2"));
            let f = self.ffn(f, &format!("{l}.ffn"), n);
            let f = self.dropout(f, n, d);
            h = self.g.add(h, f);
        }
        if cfg.enc_layers > 0 {
            h = self.layer_norm(h, "enc.ln");
        }
        EncoderNodes { states: h, frames: n, attn }
    }

    /// Teacher-forced decoder logits `[inputs.len(), V]`. Row `t` scores the
    /// token following `inputs[..=t]`.
    pub fn decoder(&mut self, head: Head, memory: NodeId, mem_len: usize, inputs: &[usize]) -> NodeId {
        let cfg = self.cfg;
        let d = cfg.d_model;
        let p = head.prefix();
        let t = inputs.len();
        let table = self.g.leaf(&format!("{p}.embed"));
        let e = self.g.embedding(table, inputs);
        let e = self.g.scale(e, (d as f64).sqrt());
        let pe = self.g.constant(&positional_encoding(t, d));
        let mut h = self.g.add(e, pe);
        h = self.dropout(h, t, d);
        for i in 0..cfg.dec_layers {
            let l = format!("{p}.layers.{i}");
            let a = self.layer_norm(h, &format!("{l}.ln1"));
            let (a, _) = self.attention(&format!("{l}.self_attn"), a, a, t, t, true);
            let a = self.dropout(a, t, d);
            h = self.g.add(h, a);
            let c = self.layer_norm(h, &format!("{l}.ln2"));
            let (c, _) = self.attention(&format!("{l}.cross_attn"), c, memory, t, mem_len, false);
            let c = self.dropout(c, t, d);
            h = self.g.add(h, c);
            let f = self.layer_norm(h, &format!("{l}.ln3"));
            let f = self.ffn(f, &format!("{l}.ffn"), t);
            let f = self.dropout(f, t, d);
            h = self.g.add(h, f);
        }
        let h = self.layer_norm(h, &format!("{p}.ln"));
        self.linear(h, &format!("{p}.out"))
    }

    /// CTC log-probabilities `[n', V_asr + 1]` over encoder states.
    pub fn ctc(&mut self, states: NodeId) -> NodeId {
        let logits = self.linear(states, "ctc");
        self.g.log_softmax(logits)
    }

    /// Reconstruction head: states `[n', d]` to `[frames, d_x]`.
    pub fn reconstruct(&mut self, states: NodeId, enc_frames: usize, frames: usize) -> NodeId {
        let cfg = self.cfg;
        let d = cfg.d_model;
        let bins = cfg.reduced_bins();
        let h = self.linear(states, "rec.proj");
        let h = self.g.reshape(h, &[enc_frames, d, bins]);
        let h = self.g.permute(h, &[1, 0, 2]);
        let w1 = self.g.leaf("rec.up1.w");
        let b1 = self.g.leaf("rec.up1.b");
        let h = self.g.conv_transpose2d(h, w1, b1, 2);
        let h = self.g.relu(h);
        let w2 = self.g.leaf("rec.up2.w");
        let b2 = self.g.leaf("rec.up2.b");
        let h = self.g.conv_transpose2d(h, w2, b2, 2);
        let (rows, cols) = (upsampled(enc_frames), upsampled(bins));
        let h = self.g.slice(h, 1, (rows - frames) / 2, frames);
        let h = self.g.slice(h, 2, (cols - cfg.d_x) / 2, cfg.d_x);
        self.g.reshape(h, &[frames, cfg.d_x])
    }
}

/// Length after two stride-2, size-3 transposed convolutions.
pub fn upsampled(len: usize) -> usize {
    let once = (len - 1) * 2 + 3;
    (once - 1) * 2 + 3
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsampling_covers_the_input() {
        for n in 1..500 {
            assert!(upsampled(encoder_frames(n)) >= n, "{n}");
        }
    }

    #[test]
    fn positions_start_at_sin_cos_zero() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.row(1)[2] - (1.0 / 100f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn head_names() {
        assert_eq!("st".parse::<Head>().unwrap(), Head::St);
        assert!(matches!("mt".parse::<Head>(), Err(Error::UnknownHead(_))));
    }
}
