use mam::features::Spectrogram;
use mam::masking::mask_span;
use mam::model::{ModelConfig, Params};
use mam::objectives::{grad_check_loss, Batch, Example, Mode};
use mam::rng::SplitMix64;
use mam::vocab::EOS;
use numcore::GradCheckOptions;

fn toy_batch(seed: u64) -> Batch {
    let mut rng = SplitMix64::new(seed);
    let mut ex = Vec::new();
    for (i, n) in [12usize, 15].into_iter().enumerate() {
        let x = Spectrogram::new(n, 20, (0..n * 20).map(|_| rng.normal() as f32).collect()).unwrap();
        let y = vec![3 + rng.below(13) as usize, 3 + rng.below(13) as usize, EOS];
        let z = vec![3 + rng.below(13) as usize, EOS];
        ex.push(Example {
            id: format!("u{i}"),
            x,
            y: Some(y),
            z: Some(z),
        });
    }
    let plans = ex.iter().map(|e| mask_span(e.x.frames(), 0.3, seed, 3.0).unwrap()).collect();
    Batch::new(&ex, Some(plans)).unwrap()
}

#[test]
fn loss_total_gradients_every_mode() {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::toy(20)
    };
    for seed in 0..3 {
        let params = Params::init(&cfg, seed).unwrap();
        let batch = toy_batch(seed);
        for mode in Mode::ALL {
            let opts = GradCheckOptions {
                max_probes_per_leaf: Some(4),
                seed,
                ..GradCheckOptions::default()
            };
            let report = grad_check_loss(&params, &batch, mode, 1e-4, &opts).unwrap();
            assert!(report.passed(), "seed {seed} {mode}: {}", report.max_rel_err());
        }
    }
}

#[test]
fn degenerate_encoder_still_checks() {
    let cfg = ModelConfig {
        enc_layers: 0,
        ..ModelConfig::toy(20)
    };
    let params = Params::init(&cfg, 1).unwrap();
    let report = grad_check_loss(&params, &toy_batch(1), Mode::MamMtl, 1e-4, &GradCheckOptions {
        max_probes_per_leaf: Some(4),
        ..GradCheckOptions::default()
    })
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_err());
}

#[test]
fn impossible_tolerance_fails() {
    let params = Params::init(&ModelConfig::toy(20), 2).unwrap();
    let report = grad_check_loss(&params, &toy_batch(2), Mode::St, 1e-12, &GradCheckOptions {
        max_probes_per_leaf: Some(8),
        ..GradCheckOptions::default()
    })
    .unwrap();
    assert!(!report.passed());
}
