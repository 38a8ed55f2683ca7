use std::collections::BTreeMap;

use numcore::{evaluate, Graph, Tensor};
use proptest::prelude::*;

fn bind(pairs: Vec<(&str, Tensor<f32>)>) -> BTreeMap<String, Tensor<f32>> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut s = seed;
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / (1u64 << 24) as f32 - 0.5) * 40.0
            })
            .collect();
        let mut g = Graph::new();
        let x = g.leaf("x");
        let y = g.softmax(x);
        g.mark_output("y", y);
        let out = &evaluate(&g, &bind(vec![("x", Tensor::new(vec![rows, cols], data).unwrap())])).unwrap()["y"];
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn transposed_conv_then_crop_restores_length(n in 1usize..80, d in 1usize..30) {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let k = g.leaf("k");
        let kb = g.leaf("kb");
        let t = g.leaf("t");
        let tb = g.leaf("tb");
        let c = g.conv2d(x, k, kb, 2);
        let u = g.conv_transpose2d(c, t, tb, 2);
        let rows = 2 * n.div_ceil(2) + 1;
        let cols = 2 * d.div_ceil(2) + 1;
        let r = g.slice(u, 1, (rows - n) / 2, n);
        let cropped = g.slice(r, 2, (cols - d) / 2, d);
        g.mark_output("y", cropped);
        let b = bind(vec![
            ("x", Tensor::filled(&[1, n, d], 0.5).unwrap()),
            ("k", Tensor::filled(&[2, 1, 3, 3], 0.1).unwrap()),
            ("kb", Tensor::zeros(&[2]).unwrap()),
            ("t", Tensor::filled(&[2, 1, 3, 3], 0.1).unwrap()),
            ("tb", Tensor::zeros(&[1]).unwrap()),
        ]);
        let out = &evaluate(&g, &b).unwrap()["y"];
        prop_assert_eq!(out.dims(), &[1, n, d]);
    }
}
