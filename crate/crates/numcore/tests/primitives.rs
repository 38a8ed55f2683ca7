use std::collections::BTreeMap;

use numcore::{
    evaluate, forward, grad_check, gradients, Graph, NodeId, NumError, Tensor,
};

struct Rng(u64);

impl Rng {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
    }

    /// Values in [-1, 1] kept at least 0.05 away from zero.
    fn away_from_zero(&mut self) -> f64 {
        let v = self.uniform(0.05, 1.0);
        if self.next_u64() & 1 == 0 {
            v
        } else {
            -v
        }
    }

    fn tensor(&mut self, dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| self.uniform(-1.0, 1.0)).unwrap()
    }
}

fn bind(pairs: Vec<(&str, Tensor<f64>)>) -> BTreeMap<String, Tensor<f64>> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// `sum(node * w)` with a fixed random weight, so every output component
/// gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, node: NodeId, dims: &[usize], rng: &mut Rng) -> NodeId {
    let w = rng.tensor(dims);
    let wc = g.constant(&w);
    let prod = g.mul(node, wc);
    g.sum(prod)
}

fn check(g: &Graph, b: &BTreeMap<String, Tensor<f64>>, wrt: &[&str], label: &str) {
    let report = grad_check(g, b, wrt, "y", 1e-4).unwrap();
    assert!(
        report.passed(),
        "{label}: max rel err {:.3e} ({report:?})",
        report.max_rel_err()
    );
    assert_eq!(report.skipped(), 0, "{label}: unexpected kink skips");
}

#[test]
fn square_evaluates_and_differentiates() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let sq = g.mul(x, x);
    let y = g.sum(sq);
    g.mark_output("y", y);
    let b = bind(vec![("x", Tensor::scalar(3.0))]);
    assert_eq!(evaluate(&g, &b).unwrap()["y"].item(), 9.0);
    assert_eq!(gradients(&g, &b, &["x"], "y").unwrap()["x"].item(), 6.0);
    let report = grad_check(&g, &b, &["x"], "y", 1e-8).unwrap();
    assert!(report.max_rel_err() < 1e-8, "{report:?}");
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let y = g.softmax(x);
    g.mark_output("y", y);
    let b = bind(vec![("x", Tensor::zeros(&[2]).unwrap())]);
    assert_eq!(evaluate(&g, &b).unwrap()["y"].data(), &[0.5, 0.5]);
}

/// Direct "same"-padded convolution used as an independent reference.
fn conv_oracle(x: &[f64], h: usize, w: usize, k: &[f64], kh: usize, kw: usize, s: usize) -> Vec<f64> {
    let oh = (h + s - 1) / s;
    let ow = (w + s - 1) / s;
    let pad_h = ((oh - 1) * s + kh).saturating_sub(h);
    let pad_w = ((ow - 1) * s + kw).saturating_sub(w);
    let (top, left) = (pad_h / 2, pad_w / 2);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for p in 0..kh {
                for q in 0..kw {
                    let r = (i * s + p) as isize - top as isize;
                    let c = (j * s + q) as isize - left as isize;
                    if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                        acc += k[p * kw + q] * x[r as usize * w + c as usize];
                    }
                }
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

#[test]
fn conv2d_same_padding_matches_nested_loops() {
    let mut rng = Rng(17);
    let x = rng.tensor(&[1, 4, 4]);
    let k = rng.tensor(&[1, 1, 3, 3]);
    let mut g = Graph::new();
    let xn = g.leaf("x");
    let kn = g.leaf("k");
    let bn = g.leaf("b");
    let y = g.conv2d(xn, kn, bn, 2);
    g.mark_output("y", y);
    let b = bind(vec![("x", x.clone()), ("k", k.clone()), ("b", Tensor::zeros(&[1]).unwrap())]);
    let out = &evaluate(&g, &b).unwrap()["y"];
    assert_eq!(out.dims(), &[1, 2, 2]);
    let want = conv_oracle(x.data(), 4, 4, k.data(), 3, 3, 2);
    for (a, b) in out.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let mut rng = Rng(seed);
        let mut g = Graph::new();
        let a = g.leaf("a");
        let bb = g.leaf("b");
        let m = g.matmul(a, bb);
        let y = g.sum(m);
        g.mark_output("y", y);
        let b = bind(vec![("a", rng.tensor(&[3, 4])), ("b", rng.tensor(&[4, 2]))]);
        check(&g, &b, &["a", "b"], "matmul");
    }
}

#[test]
fn elementwise_product_gradient_is_other_factor() {
    let mut rng = Rng(5);
    let (a, b) = (rng.tensor(&[2, 3]), rng.tensor(&[2, 3]));
    let mut g = Graph::new();
    let an = g.leaf("a");
    let bn = g.leaf("b");
    let p = g.mul(an, bn);
    let y = g.sum(p);
    g.mark_output("y", y);
    let grads = gradients(&g, &bind(vec![("a", a), ("b", b.clone())]), &["a"], "y").unwrap();
    assert_eq!(grads["a"], b);
}

#[test]
fn gradients_are_linear() {
    let mut rng = Rng(9);
    let x = rng.tensor(&[2, 5]);
    let build = |ca: f64, cb: f64| {
        let mut g = Graph::new();
        let xn = g.leaf("x");
        let f = g.softmax(xn);
        let fs = g.sum(f);
        let prod = g.mul(xn, xn);
        let gs = g.sum(prod);
        let fa = g.scale(fs, ca);
        let gb = g.scale(gs, cb);
        let y = g.add(fa, gb);
        g.mark_output("y", y);
        g
    };
    let b = bind(vec![("x", x)]);
    let grad = |ca, cb| gradients(&build(ca, cb), &b, &["x"], "y").unwrap()["x"].clone();
    let (f, h, combo) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(2.0, -3.0));
    for i in 0..combo.len() {
        let want = 2.0 * f.data()[i] - 3.0 * h.data()[i];
        assert!((combo.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn every_primitive_passes_grad_check() {
    for seed in 0..3u64 {
        let mut rng = Rng(100 + seed);

        // add / sub / mul / scale with bias broadcast
        {
            let mut g = Graph::new();
            let a = g.leaf("a");
            let bias = g.leaf("bias");
            let c = g.leaf("c");
            let s = g.add(a, bias);
            let d = g.sub(s, c);
            let m = g.mul(d, bias);
            let sc = g.scale(m, -1.7);
            let y = weighted_sum(&mut g, sc, &[3, 4], &mut rng);
            g.mark_output("y", y);
            let b = bind(vec![("a", rng.tensor(&[3, 4])), ("bias", rng.tensor(&[4])), ("c", rng.tensor(&[3, 4]))]);
            check(&g, &b, &["a", "bias", "c"], "add/sub/mul/scale");
        }
        // permute / reshape / slice / concat
        {
            let mut g = Graph::new();
            let a = g.leaf("a");
            let c = g.leaf("c");
            let p = g.permute(a, &[2, 0, 1]);
            let r = g.reshape(p, &[4, 6]);
            let s = g.slice(r, 1, 1, 3);
            let cat = g.concat(&[s, c], 1);
            let y = weighted_sum(&mut g, cat, &[4, 5], &mut rng);
            g.mark_output("y", y);
            let b = bind(vec![("a", rng.tensor(&[2, 3, 4])), ("c", rng.tensor(&[4, 2]))]);
            check(&g, &b, &["a", "c"], "shape ops");
        }
        // conv2d and transposed conv2d
        {
            let mut g = Graph::new();
            let x = g.leaf("x");
            let k = g.leaf("k");
            let kb = g.leaf("kb");
            let t = g.leaf("t");
            let tb = g.leaf("tb");
            let c = g.conv2d(x, k, kb, 2);
            let u = g.conv_transpose2d(c, t, tb, 2);
            let y = weighted_sum(&mut g, u, &[2, 7, 9], &mut rng);
            g.mark_output("y", y);
            let b = bind(vec![
                ("x", rng.tensor(&[2, 5, 7])),
                ("k", rng.tensor(&[3, 2, 3, 3])),
                ("kb", rng.tensor(&[3])),
                ("t", rng.tensor(&[3, 2, 3, 3])),
                ("tb", rng.tensor(&[2])),
            ]);
            check(&g, &b, &["x", "k", "kb", "t", "tb"], "conv");
        }
        // layer norm on a 2x8 input
        {
            let mut g = Graph::new();
            let x = g.leaf("x");
            let gamma = g.leaf("gamma");
            let beta = g.leaf("beta");
            let ln = g.layer_norm(x, gamma, beta, 1e-5);
            let y = weighted_sum(&mut g, ln, &[2, 8], &mut rng);
            g.mark_output("y", y);
            let b = bind(vec![("x", rng.tensor(&[2, 8])), ("gamma", rng.tensor(&[8])), ("beta", rng.tensor(&[8]))]);
            check(&g, &b, &["x", "gamma", "beta"], "layer_norm");
        }
        // softmax / log-softmax / relu (inputs kept away from the kink)
        {
            let mut g = Graph::new();
            let x = g.leaf("x");
            let z = g.leaf("z");
            let sm = g.softmax(x);
            let ls = g.log_softmax(x);
            let r = g.relu(z);
            let a = weighted_sum(&mut g, sm, &[3, 5], &mut rng);
            let bq = weighted_sum(&mut g, ls, &[3, 5], &mut rng);
            let c = weighted_sum(&mut g, r, &[3, 5], &mut rng);
            let ab = g.add(a, bq);
            let y = g.add(ab, c);
            g.mark_output("y", y);
            let zt = Tensor::from_fn(&[3, 5], |_| rng.away_from_zero()).unwrap();
            let b = bind(vec![("x", rng.tensor(&[3, 5])), ("z", zt)]);
            check(&g, &b, &["x", "z"], "softmax/log_softmax/relu");
        }
        // embedding / mean / squared error
        {
            let mut g = Graph::new();
            let table = g.leaf("table");
            let target = g.leaf("target");
            let e = g.embedding(table, &[2, 0, 2, 1]);
            let se = g.sq_err(e, target);
            let m = g.mean(e);
            let y = g.add(se, m);
            g.mark_output("y", y);
            let b = bind(vec![("table", rng.tensor(&[3, 4])), ("target", rng.tensor(&[4, 4]))]);
            check(&g, &b, &["table", "target"], "embedding/mean/sq_err");
        }
        // ctc on normalized and raw scores
        {
            let mut g = Graph::new();
            let x = g.leaf("x");
            let lp = g.log_softmax(x);
            let c1 = g.ctc_loss(lp, &[1, 1, 2], 0);
            let c2 = g.ctc_loss(x, &[2], 0);
            let y = g.add(c1, c2);
            g.mark_output("y", y);
            let b = bind(vec![("x", rng.tensor(&[6, 3]))]);
            check(&g, &b, &["x"], "ctc");
        }
    }
}

#[test]
fn grad_check_flags_kink_crossings() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let r = g.relu(x);
    let y = g.sum(r);
    g.mark_output("y", y);
    let b = bind(vec![("x", Tensor::new(vec![2], vec![0.0, 0.5]).unwrap())]);
    let report = grad_check(&g, &b, &["x"], "y", 1e-6).unwrap();
    assert_eq!(report.skipped(), 1);
    assert_eq!(report.leaves[0].probed, 1);
}

#[test]
fn tolerance_below_finite_difference_floor_fails() {
    let mut rng = Rng(3);
    let mut g = Graph::new();
    let x = g.leaf("x");
    let s = g.softmax(x);
    let l = g.log_softmax(s);
    let y = weighted_sum(&mut g, l, &[2, 6], &mut rng);
    g.mark_output("y", y);
    let b = bind(vec![("x", rng.tensor(&[2, 6]))]);
    let report = grad_check(&g, &b, &["x"], "y", 1e-14).unwrap();
    assert!(!report.passed());
}

#[test]
fn structured_errors() {
    let mut g = Graph::new();
    let a = g.leaf("a");
    let bl = g.leaf("b");
    let m = g.matmul(a, bl);
    g.mark_output("m", m);
    let b = bind(vec![("a", Tensor::zeros(&[2, 3]).unwrap())]);
    assert_eq!(evaluate(&g, &b).unwrap_err(), NumError::UnboundLeaf("b".into()));

    let b = bind(vec![("a", Tensor::zeros(&[2, 3]).unwrap()), ("b", Tensor::zeros(&[2, 3]).unwrap())]);
    assert!(matches!(evaluate(&g, &b), Err(NumError::DimMismatch { op: "matmul", .. })));

    let b = bind(vec![("a", Tensor::zeros(&[2, 3]).unwrap()), ("b", Tensor::zeros(&[3, 2]).unwrap())]);
    assert!(matches!(gradients(&g, &b, &["a"], "m"), Err(NumError::NonScalarOutput { .. })));

    let mut g = Graph::new();
    let x = g.leaf("x");
    let y = g.sum(x);
    g.mark_output("y", y);
    let b = bind(vec![("x", Tensor::zeros(&[2]).unwrap())]);
    assert_eq!(gradients(&g, &b, &["w"], "y").unwrap_err(), NumError::WrtAbsent("w".into()));
}

#[test]
fn non_finite_intermediate_is_an_error() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let y = g.scale(x, 1e300);
    let z = g.scale(y, 1e300);
    g.mark_output("z", z);
    let b = bind(vec![("x", Tensor::scalar(1.0))]);
    assert!(matches!(evaluate(&g, &b), Err(NumError::NonFinite { op: "scale", .. })));
}

#[test]
fn ctc_unalignable_is_structured() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let c = g.ctc_loss(x, &[1, 1], 0);
    g.mark_output("c", c);
    let b = bind(vec![("x", Tensor::zeros(&[2, 3]).unwrap())]);
    assert_eq!(
        evaluate(&g, &b).unwrap_err(),
        NumError::Unalignable {
            target_len: 2,
            required: 3,
            frames: 2
        }
    );
}

#[test]
fn evaluation_is_bit_identical_across_calls() {
    let mut rng = Rng(77);
    let mut g = Graph::new();
    let x = g.leaf("x");
    let w = g.leaf("w");
    let m = g.matmul(x, w);
    let s = g.softmax(m);
    g.mark_output("s", s);
    let b: BTreeMap<String, Tensor<f32>> = bind(vec![("x", rng.tensor(&[4, 6])), ("w", rng.tensor(&[6, 3]))])
        .into_iter()
        .map(|(k, v)| (k, v.cast()))
        .collect();
    let first = forward(&g, &b).unwrap();
    let second = forward(&g, &b).unwrap();
    assert_eq!(first.get(s), second.get(s));
}
