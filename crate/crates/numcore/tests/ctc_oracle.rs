//! CTC forward algorithm against brute-force enumeration of every path.

use std::collections::BTreeMap;

use numcore::{ctc_required_frames, evaluate, Graph, NumError, Tensor};

struct Rng(u64);

impl Rng {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    fn logit(&mut self) -> f64 {
        6.0 * ((self.next_u64() >> 11) as f64 / (1u64 << 53) as f64) - 3.0
    }
}

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// `-ln` of the total probability of every length-`t` path that collapses
/// to `target`.
fn brute_force(logits: &[Vec<f64>], target: &[usize], blank: usize) -> f64 {
    let classes = logits[0].len();
    let log_probs: Vec<Vec<f64>> = logits
        .iter()
        .map(|row| {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            row.iter().map(|v| v - lse).collect()
        })
        .collect();
    let t = logits.len();
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    for code in 0..classes.pow(t as u32) {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % classes;
            c /= classes;
        }
        if collapse(&path, blank) == target {
            total += path.iter().enumerate().map(|(i, &s)| log_probs[i][s]).sum::<f64>().exp();
        }
    }
    -total.ln()
}

fn forward_loss(logits: &[Vec<f64>], target: &[usize], blank: usize) -> Result<f64, NumError> {
    let (t, c) = (logits.len(), logits[0].len());
    let mut g = Graph::new();
    let x = g.leaf("x");
    let lp = g.log_softmax(x);
    let loss = g.ctc_loss(lp, target, blank);
    g.mark_output("loss", loss);
    let data: Vec<f64> = logits.iter().flatten().copied().collect();
    let mut b = BTreeMap::new();
    b.insert("x".to_string(), Tensor::new(vec![t, c], data).unwrap());
    Ok(evaluate(&g, &b)?["loss"].data()[0])
}

#[test]
fn forward_algorithm_matches_enumeration() {
    let (mut checked, mut rejected) = (0, 0);
    for frames in 1..=6 {
        for len in 0..=3 {
            for vocab in 1..=4 {
                // Labels 0..vocab, blank last.
                let blank = vocab;
                for set in 0..100u64 {
                    let mut rng = Rng(((frames * 16 + len) * 16 + vocab) as u64 * 1000 + set);
                    let target: Vec<usize> = (0..len).map(|_| rng.below(vocab)).collect();
                    let logits: Vec<Vec<f64>> = (0..frames).map(|_| (0..=vocab).map(|_| rng.logit()).collect()).collect();
                    let got = forward_loss(&logits, &target, blank);
                    if ctc_required_frames(&target) > frames {
                        assert!(matches!(got, Err(NumError::Unalignable { .. })), "{target:?} in {frames}");
                        rejected += 1;
                        continue;
                    }
                    let want = brute_force(&logits, &target, blank);
                    let got = got.unwrap();
                    assert!((got - want).abs() <= 1e-6, "frames {frames} target {target:?}: {got} vs {want}");
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked + rejected, 6 * 4 * 4 * 100);
    assert!(checked > rejected);
}

#[test]
fn blank_in_the_middle_of_the_alphabet() {
    let logits = vec![vec![0.3, -1.0, 2.0], vec![1.5, 0.0, -0.5], vec![-0.2, 0.7, 0.1]];
    for target in [vec![0], vec![2, 0], vec![2, 2], vec![0, 2]] {
        let got = forward_loss(&logits, &target, 1).unwrap();
        assert!((got - brute_force(&logits, &target, 1)).abs() <= 1e-9);
    }
}
