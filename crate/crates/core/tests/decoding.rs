use mam::decoding::{
    average_params, beam_search, beam_search_with, bleu, greedy_decode, greedy_search, length_penalty, token_accuracy, Hypothesis, StepModel,
};
use mam::features::Spectrogram;
use mam::model::{checkpoint, ModelConfig, Params};
use mam::objectives::{Batch, Example};
use mam::rng::{derive_seed, SplitMix64};
use mam::vocab::EOS;
use mam::{Error, Result};
use numcore::Tensor;

/// Next-token distributions drawn from a hash of the prefix.
struct RandomModel {
    seed: u64,
    vocab: usize,
}

impl StepModel for RandomModel {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut parts = vec![self.seed];
        parts.extend(prefix.iter().map(|&t| t as u64 + 1));
        let mut rng = SplitMix64::new(derive_seed(&parts));
        let logits: Vec<f64> = (0..self.vocab).map(|_| 2.0 * rng.normal()).collect();
        let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
        Ok(logits.iter().map(|v| v - lse).collect())
    }
}

/// Vocabulary {a = 0, EOS = 1, b = 2}; fixed probabilities per prefix.
struct HandModel;

impl StepModel for HandModel {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let p: [f64; 3] = match prefix {
            [] => [0.48, 0.32, 0.20],
            [0] => [0.30, 0.60, 0.10],
            [2] => [0.05, 0.90, 0.05],
            _ => [0.2, 0.6, 0.2],
        };
        Ok(p.iter().map(|v| v.ln()).collect())
    }
}

/// Every sequence of at most `max_len` tokens ending in EOS, with EOS taken
/// at the last position.
fn enumerate(model: &impl StepModel, alpha: f64, max_len: usize) -> Vec<Hypothesis> {
    let mut out = Vec::new();
    let mut stack = vec![(vec![], 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let row = model.log_probs(&prefix).unwrap();
        let last = prefix.len() + 1 == max_len;
        for (tok, &l) in row.iter().enumerate() {
            if last && tok != EOS {
                continue;
            }
            let mut t: Vec<usize> = prefix.clone();
            t.push(tok);
            let logprob = lp + l;
            if tok == EOS {
                let score = logprob / length_penalty(t.len(), alpha);
                out.push(Hypothesis { tokens: t, logprob, score });
            } else {
                stack.push((t, logprob));
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
    out
}

#[test]
fn beam_two_matches_enumeration() {
    let want = enumerate(&HandModel, 0.6, 2);
    let got = beam_search_with(&HandModel, 2, 0.6, 2).unwrap();
    assert_eq!(got.len(), 2);
    assert_eq!(got[0].tokens, want[0].tokens);
    assert_eq!(got[1].tokens, want[1].tokens);
    assert_eq!(got[0].tokens, vec![0, EOS]);
    assert_eq!(got[1].tokens, vec![EOS]);
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.score, w.score);
        assert_eq!(g.logprob, w.logprob);
    }
    // The penalty decides: [EOS] has the higher raw log-probability.
    assert!(got[1].logprob > got[0].logprob);
    let expect = (0.48f64 * 0.60).ln() / (7.0f64 / 6.0).powf(0.6);
    assert!((got[0].score - expect).abs() < 1e-12);
}

#[test]
fn beam_one_is_greedy() {
    for seed in 0..100 {
        let m = RandomModel { seed, vocab: 6 };
        let g = greedy_search(&m, 8).unwrap();
        let b = beam_search_with(&m, 1, 0.6, 8).unwrap();
        assert_eq!(b[0].tokens, g.tokens, "seed {seed}");
        assert_eq!(*g.tokens.last().unwrap(), EOS);
    }
}

#[test]
fn zero_alpha_ranks_by_logprob() {
    for seed in 0..20 {
        let hyps = beam_search_with(&RandomModel { seed, vocab: 4 }, 4, 0.0, 5).unwrap();
        for h in &hyps {
            assert_eq!(h.score, h.logprob);
        }
        assert!(hyps.windows(2).all(|w| w[0].logprob >= w[1].logprob));
    }
}

#[test]
fn wider_beams_find_no_worse_logprob() {
    for seed in 0..30 {
        let m = RandomModel { seed, vocab: 4 };
        let best = enumerate(&m, 0.0, 4)[0].logprob;
        let mut prev = f64::NEG_INFINITY;
        for beam in 1..=6 {
            let found = beam_search_with(&m, beam, 0.0, 4).unwrap()[0].logprob;
            assert!(found >= prev - 1e-12, "seed {seed} beam {beam}");
            assert!(found <= best + 1e-12);
            prev = found;
        }
    }
}

fn spec(n: usize, seed: u64) -> Spectrogram {
    let mut rng = SplitMix64::new(seed);
    Spectrogram::new(n, 20, (0..n * 20).map(|_| rng.normal() as f32).collect()).unwrap()
}

fn zero_prefix(p: &mut Params, prefix: &str) {
    let names: Vec<String> = p.tensors().keys().filter(|n| n.starts_with(prefix)).cloned().collect();
    for n in names {
        let dims = p.get(&n).unwrap().dims().to_vec();
        p.set(&n, Tensor::zeros(&dims).unwrap()).unwrap();
    }
}

#[test]
fn model_beam_one_matches_greedy() {
    let p = Params::init(&ModelConfig::toy(20), 4).unwrap();
    for seed in 0..10 {
        let x = spec(12 + seed as usize, seed);
        let g = greedy_decode(&p, &x, 10).unwrap();
        let b = beam_search(&p, &x, 1, 0.6, 10).unwrap();
        assert_eq!(g.tokens, b[0].tokens);
        assert_eq!(g, greedy_decode(&p, &x, 10).unwrap());
    }
}

#[test]
fn certain_eos_stops_at_once() {
    let mut p = Params::init(&ModelConfig::toy(20), 4).unwrap();
    zero_prefix(&mut p, "st_dec.out");
    let mut bias = vec![0.0f32; 16];
    bias[EOS] = 200.0;
    p.set("st_dec.out.b", Tensor::new(vec![16], bias).unwrap()).unwrap();
    let h = greedy_decode(&p, &spec(9, 0), 10).unwrap();
    assert_eq!(h.tokens, vec![EOS]);
    assert_eq!(h.logprob, 0.0);
}

#[test]
fn masking_settings_do_not_reach_decoding() {
    let base = ModelConfig::toy(20);
    let p = Params::init(&base, 4).unwrap();
    let (_, tensors) = p.clone().into_parts();
    let masked_cfg = ModelConfig { lambda: 0.9, ..base };
    let q = Params::from_tensors(masked_cfg, tensors).unwrap();
    let x = spec(14, 3);
    assert_eq!(greedy_decode(&p, &x, 10).unwrap(), greedy_decode(&q, &x, 10).unwrap());
}

#[test]
fn token_accuracy_contracts() {
    let mut p = Params::init(&ModelConfig::toy(20), 4).unwrap();
    zero_prefix(&mut p, "st_dec.out");
    let mut bias = vec![0.0f32; 16];
    bias[5] = 50.0;
    p.set("st_dec.out.b", Tensor::new(vec![16], bias).unwrap()).unwrap();
    let ex = |id: &str, y: Vec<usize>| Example {
        id: id.into(),
        x: spec(8, 1),
        y: Some(y),
        z: None,
    };
    // Every gold token is the one the model is sure of, except the end marker.
    let b = Batch::new(&[ex("a", vec![5, 5, EOS])], None).unwrap();
    assert!((token_accuracy(&p, &b).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    let mut sure_eos = p.clone();
    let mut bias = vec![0.0f32; 16];
    bias[EOS] = 50.0;
    sure_eos.set("st_dec.out.b", Tensor::new(vec![16], bias).unwrap()).unwrap();
    let only_eos = Batch::new(&[ex("e", vec![EOS])], None).unwrap();
    assert_eq!(token_accuracy(&sure_eos, &only_eos).unwrap(), 1.0);

    // Uniform model: argmax is the lowest id, gold tokens are uniform.
    zero_prefix(&mut p, "st_dec.out");
    let mut rng = SplitMix64::new(7);
    let examples: Vec<Example> = (0..120)
        .map(|i| {
            let mut y: Vec<usize> = (0..9).map(|_| rng.below(16) as usize).collect();
            y.push(EOS);
            Example {
                id: format!("u{i}"),
                x: spec(4, i),
                y: Some(y),
                z: None,
            }
        })
        .collect();
    let b = Batch::new(&examples, None).unwrap();
    let acc = token_accuracy(&p, &b).unwrap();
    // 1080 uniform tokens plus 120 end markers never predicted.
    let total = 1200.0;
    let expect = 1080.0 / 16.0 / total;
    let sigma = (1080.0 * (1.0 / 16.0) * (15.0 / 16.0) as f64).sqrt() / total;
    assert!((acc - expect).abs() < 3.0 * sigma, "{acc} vs {expect}");

    let mut empty = b.clone();
    empty.lengths.clear();
    empty.ids.clear();
    assert!(token_accuracy(&p, &empty).is_err());
    let mut unlabeled = b;
    unlabeled.y_star = None;
    assert!(matches!(token_accuracy(&p, &unlabeled), Err(Error::MissingField { .. })));
}

#[test]
fn averaging_contracts() {
    let cfg = ModelConfig::toy(20);
    let a = Params::init(&cfg, 1).unwrap();
    let b = Params::init(&cfg, 2).unwrap();
    assert_eq!(average_params(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
    let avg = average_params(&[a.clone(), b.clone()]).unwrap();
    for (name, t) in avg.tensors() {
        for ((m, x), y) in t.data().iter().zip(a.get(name).unwrap().data()).zip(b.get(name).unwrap().data()) {
            assert_eq!(*m, ((*x as f64 + *y as f64) / 2.0) as f32);
        }
    }
    let wide = Params::init(&ModelConfig { d_model: 64, ..cfg }, 1).unwrap();
    assert!(matches!(average_params(&[a.clone(), wide]), Err(Error::CheckpointMismatch(_))));

    let dir = tempfile::tempdir().unwrap();
    let pa = dir.path().join("a.mamc");
    checkpoint::save(&a, &pa).unwrap();
    assert_eq!(mam::decoding::average_checkpoints(&[&pa]).unwrap(), a);
}

#[test]
fn bleu_properties() {
    let corpus: Vec<Vec<usize>> = vec![vec![1, 2, 3], vec![4, 5], vec![6]];
    assert_eq!(bleu(&corpus, &corpus).unwrap(), 1.0);
    let hyps = vec![vec![1, 2, 9], vec![4, 5], vec![6, 7]];
    let forward = bleu(&hyps, &corpus).unwrap();
    let rev_h: Vec<_> = hyps.iter().rev().cloned().collect();
    let rev_r: Vec<_> = corpus.iter().rev().cloned().collect();
    assert_eq!(forward, bleu(&rev_h, &rev_r).unwrap());
    assert!(bleu(&hyps[..2], &corpus).is_err());
}
