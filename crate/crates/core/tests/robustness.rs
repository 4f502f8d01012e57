mod common;

use common::*;
use mlada::data::{gen_shifted_blobs, ShiftSpec};
use mlada::graph::Graph;
use mlada::losses::cross_entropy_logits;
use mlada::networks::{init_params, Architecture, ModelParams, NetworkSpec};
use mlada::robustness::{evaluate_noisy, vat_noise, vat_parts, NoiseConfig};
use mlada::tensor::Tensor;
use mlada::trainer::{evaluate_accuracy, fit, TrainConfig};
use rand::Rng;

fn pseudo_ce(params: &ModelParams, x: &Tensor, labels: &[usize]) -> f64 {
    let logits = params.logits(x).unwrap();
    let mut g = Graph::new();
    let v = g.constant(logits).unwrap();
    let l = cross_entropy_logits(&mut g, v, labels).unwrap();
    g.scalar(l).unwrap()
}

#[test]
fn noise_direction_ascends_pseudo_label_loss() {
    let mut r = rng(21);
    let trials = 200;
    let mut ascended = 0;
    for t in 0..trials {
        let d = r.random_range(2..5);
        let k = r.random_range(2..5);
        let arch = Architecture {
            extractor: vec![8, 6],
            ..Architecture::default()
        };
        let params = init_params(&NetworkSpec::new(d, k, &arch).unwrap(), t).unwrap();
        let rows = r.random_range(1..10);
        let x = uniform(&mut r, rows, d, -2.0, 2.0);
        let parts = vat_parts(&params, &x, t + 1000).unwrap();
        let start = Tensor::new(
            x.rows(),
            d,
            x.data()
                .iter()
                .zip(parts.noise.data())
                .map(|(a, n)| a + n)
                .collect(),
        )
        .unwrap();
        let step = 1e-2;
        let moved = Tensor::new(
            x.rows(),
            d,
            start
                .data()
                .iter()
                .zip(parts.gradient.data())
                .map(|(s, g)| s + step * g)
                .collect(),
        )
        .unwrap();
        if pseudo_ce(&params, &moved, &parts.pseudo_labels)
            >= pseudo_ce(&params, &start, &parts.pseudo_labels)
        {
            ascended += 1;
        }
    }
    assert!(
        ascended as f64 >= 0.9 * trials as f64,
        "{} / {}",
        ascended,
        trials
    );
}

#[test]
fn noise_is_deterministic_per_seed() {
    let (_, t) = gen_shifted_blobs(3, 10, 2, &ShiftSpec::rotation_degrees(35.0), 1).unwrap();
    let params = init_params(
        &NetworkSpec::new(2, 3, &Architecture::default()).unwrap(),
        2,
    )
    .unwrap();
    let cfg = NoiseConfig {
        intensity: 3.5,
        seed: 7,
    };
    let a = vat_noise(&params, &t.features, &cfg).unwrap();
    assert_eq!(a, vat_noise(&params, &t.features, &cfg).unwrap());
    let other = NoiseConfig { seed: 8, ..cfg };
    assert_ne!(a, vat_noise(&params, &t.features, &other).unwrap());
}

#[test]
fn zero_intensity_row_is_clean_accuracy() {
    let (s, t) = gen_shifted_blobs(3, 30, 2, &ShiftSpec::rotation_degrees(35.0), 3).unwrap();
    let cfg = TrainConfig {
        max_iters: 50,
        ..TrainConfig::default()
    };
    let (params, _) = fit(&cfg, &s, &t, 0).unwrap();
    let rows = evaluate_noisy(&params, &t, &[0.0, 3.5, 5.0], 11, 32).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(
        rows[0].accuracy.to_bits(),
        evaluate_accuracy(&params, &t).unwrap().to_bits()
    );
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));

    let mut unlabeled = t.clone();
    unlabeled.labels = None;
    assert!(evaluate_noisy(&params, &unlabeled, &[0.0], 11, 32).is_err());
}
