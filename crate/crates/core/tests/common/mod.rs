//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use mlada::data::Batch;
use mlada::graph::Graph;
use mlada::losses::MarginTable;
use mlada::networks::{init_params, Architecture, ModelParams, NetworkSpec, Part};
use mlada::tensor::Tensor;
use mlada::trainer::{build_objective, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Entries with magnitude in `[gap, 1]` and random sign, so kinks at 0
/// stay out of reach of the finite-difference step.
pub fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Random probability rows (softmax of uniform logits in [-3, 3]).
pub fn random_probs(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let e: Vec<f64> = (0..k)
            .map(|_| rng.random_range(-3.0f64..3.0).exp())
            .collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(rows, k, data).unwrap()
}

/// Central differences of `f` at every entry of `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub fn max_rel_err(a: &Tensor, n: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), n.shape());
    a.data()
        .iter()
        .zip(n.data())
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Enumerates every (anchor, positive, negative) triple and keeps, per
/// anchor, the largest hinge value; averages over all rows.
pub fn brute_triplet(metric: &Tensor, labels: &[usize], alpha: &[f64]) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for a in 0..b {
        let mut worst: Option<f64> = None;
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..b {
                if labels[n] == labels[a] {
                    continue;
                }
                let v = (sq_dist(metric.row(a), metric.row(p))
                    - sq_dist(metric.row(a), metric.row(n))
                    + alpha[labels[a]])
                    .max(0.0);
                worst = Some(worst.map_or(v, |w: f64| w.max(v)));
            }
        }
        total += worst.unwrap_or(0.0);
    }
    total / b as f64
}

/// Per class: `alpha0 + mu * mean(second largest prob)` over rows whose
/// first-maximal column is that class; `alpha0` for empty classes.
pub fn margin_oracle(probs: &Tensor, alpha0: f64, mu: f64, classes: usize) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let seconds: Vec<f64> = probs
                .row_iter()
                .filter(|row| {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.iter().position(|&v| v == max) == Some(c)
                })
                .map(|row| {
                    let mut sorted = row.to_vec();
                    sorted.sort_by(|a, b| b.total_cmp(a));
                    sorted[1]
                })
                .collect();
            if seconds.is_empty() {
                alpha0
            } else {
                alpha0 + mu * seconds.iter().sum::<f64>() / seconds.len() as f64
            }
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// (farthest positive index, nearest negative index) by a plain scan over
/// sorted candidate lists.
pub fn pairs_oracle(
    features: &Tensor,
    labels: &[usize],
    anchor: usize,
) -> (Option<usize>, Option<usize>) {
    let mut pos: Vec<(f64, usize)> = Vec::new();
    let mut neg: Vec<(f64, usize)> = Vec::new();
    for j in 0..labels.len() {
        if j == anchor {
            continue;
        }
        let d = cosine(features.row(anchor), features.row(j)).clamp(0.0, 2.0);
        if labels[j] == labels[anchor] {
            pos.push((d, j));
        } else {
            neg.push((d, j));
        }
    }
    // farthest first, lowest index among equals
    pos.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    neg.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    (pos.first().map(|p| p.1), neg.first().map(|n| n.1))
}

/// Toy objective setup: a random batch, random small architecture and
/// frozen margins. With the reversal layer in place the extractor adjoint
/// carries `-scale` times the domain gradient, so the numeric reference
/// is assembled from the domain and non-domain parts separately.
pub struct ToyProblem {
    pub cfg: TrainConfig,
    pub batch: Batch,
    pub margins: MarginTable,
    pub params: ModelParams,
}

pub fn toy_problem(seed: u64) -> ToyProblem {
    let mut r = rng(seed);
    let k = r.random_range(2..5);
    let b = r.random_range(k.max(3)..9);
    let d = r.random_range(2..5);
    let mut w = || r.random_range(2..5);
    let arch = Architecture {
        extractor: vec![w(), w()],
        classifier_hidden: vec![w()],
        discriminator_hidden: vec![w()],
        metric_hidden: vec![w()],
        metric_dim: w(),
    };
    let spec = NetworkSpec::new(d, k, &arch).unwrap();
    let mut params = init_params(&spec, seed + 100).unwrap();
    // zero biases would park ReLU inputs exactly on the kink
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
    // every class present at least once
    let source_y: Vec<usize> = (0..b)
        .map(|i| if i < k { i } else { r.random_range(0..k) })
        .collect();
    let batch = Batch {
        source_x: uniform(&mut r, b, d, -2.0, 2.0),
        source_y,
        target_x: uniform(&mut r, b, d, -2.0, 2.0),
        source_indices: (0..b).collect(),
        target_indices: (0..b).collect(),
    };
    let margins = MarginTable {
        alpha: (0..k).map(|_| r.random_range(0.5..3.0)).collect(),
    };
    let cfg = TrainConfig {
        arch,
        gamma: r.random_range(0.05..1.0),
        lambda: r.random_range(0.05..1.0),
        ..TrainConfig::default()
    };
    ToyProblem {
        cfg,
        batch,
        margins,
        params,
    }
}

/// Returns (analytic adjoints, numeric reference) for every parameter
/// tensor.
pub fn full_objective_check(p: &ToyProblem) -> Vec<(Part, Tensor, Tensor)> {
    let progress = 0.3;
    let scale = p.cfg.reversal.scale(progress);
    let split = |params: &ModelParams| -> (f64, f64) {
        let mut g = Graph::new();
        let vars = params.bind(&mut g).unwrap();
        let obj = build_objective(
            &mut g,
            &vars,
            &p.batch,
            &p.cfg,
            progress,
            Some(&p.margins),
            &mut |_| {},
        )
        .unwrap();
        let b = obj.breakdown;
        (
            b.l_class + p.cfg.gamma * b.l_triplet + p.cfg.lambda * b.l_entropy,
            b.l_domain,
        )
    };

    let mut g = Graph::new();
    let vars = p.params.bind(&mut g).unwrap();
    let obj = build_objective(
        &mut g,
        &vars,
        &p.batch,
        &p.cfg,
        progress,
        Some(&p.margins),
        &mut |_| {},
    )
    .unwrap();
    g.backward(obj.total).unwrap();
    let grads = vars.grads(&g);

    let parts = p.params.parts();
    let mut out = Vec::new();
    for (t, (analytic, part)) in grads.into_iter().zip(parts).enumerate() {
        let base = p.params.tensors()[t].clone();
        let mut rest = Tensor::zeros(base.rows(), base.cols());
        let mut dom = Tensor::zeros(base.rows(), base.cols());
        for i in 0..base.len() {
            let at = |delta: f64| {
                let mut q = p.params.clone();
                q.tensors_mut()[t].data_mut()[i] += delta;
                split(&q)
            };
            let (ru, du) = at(FD_STEP);
            let (rd, dd) = at(-FD_STEP);
            rest.data_mut()[i] = (ru - rd) / (2.0 * FD_STEP);
            dom.data_mut()[i] = (du - dd) / (2.0 * FD_STEP);
        }
        let factor = if part == Part::Extractor { -scale } else { 1.0 };
        let numeric = Tensor::new(
            base.rows(),
            base.cols(),
            rest.data()
                .iter()
                .zip(dom.data())
                .map(|(r, d)| r + factor * d)
                .collect(),
        )
        .unwrap();
        out.push((part, analytic, numeric));
    }
    out
}
