//! Gradient-based input noise for robustness evaluation.
//!
//! A standard-normal draw `N` is added to the batch, the classifier's
//! cross-entropy against the clean-input pseudo labels is differentiated
//! at `X + N`, and the returned batch is `X + I_n * grad`. The gradient is
//! taken with respect to the perturbed input, which equals the gradient
//! with respect to `N`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::cross_entropy_logits;
use crate::networks::{forward_mlp, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::evaluate_accuracy;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub intensity: f64,
    pub seed: u64,
}

/// Noise draw and the gradient it produces, before scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseParts {
    pub noise: Tensor,
    pub gradient: Tensor,
    pub pseudo_labels: Vec<usize>,
}

pub fn vat_parts(params: &ModelParams, x: &Tensor, seed: u64) -> Result<NoiseParts> {
    let pseudo_labels = params.predict(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_data = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
    let noise = Tensor::new(x.rows(), x.cols(), noise_data)?;

    let mut g = Graph::new();
    let vars = params.bind(&mut g)?;
    let shifted: Vec<f64> = x
        .data()
        .iter()
        .zip(noise.data())
        .map(|(a, b)| a + b)
        .collect();
    let input = g.param(Tensor::new(x.rows(), x.cols(), shifted)?)?;
    let f = forward_mlp(&mut g, &vars.extractor, input)?;
    let logits = forward_mlp(&mut g, &vars.classifier, f)?;
    let loss = cross_entropy_logits(&mut g, logits, &pseudo_labels)?;
    g.backward(loss)?;
    let gradient = g.grad(input).cloned().expect("input is a param");
    gradient.ensure_finite("noise gradient")?;
    Ok(NoiseParts {
        noise,
        gradient,
        pseudo_labels,
    })
}

/// `X + I_n * ∇ CE(C(F(X + N)), pseudo labels of X)`.
pub fn vat_noise(params: &ModelParams, x: &Tensor, cfg: &NoiseConfig) -> Result<Tensor> {
    if !(cfg.intensity >= 0.0) || !cfg.intensity.is_finite() {
        return Err(Error::usage(format!(
            "noise intensity must be >= 0, got {}",
            cfg.intensity
        )));
    }
    let parts = vat_parts(params, x, cfg.seed)?;
    let data = x
        .data()
        .iter()
        .zip(parts.gradient.data())
        .map(|(v, g)| v + cfg.intensity * g)
        .collect();
    let out = Tensor::new(x.rows(), x.cols(), data)?;
    out.ensure_finite("noisy input")?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub intensity: f64,
    pub accuracy: f64,
}

/// Per-batch noise seed.
pub fn batch_seed(seed: u64, batch: usize) -> u64 {
    seed.wrapping_add(batch as u64)
}

/// Perturbs the whole target set in chunks of `batch_size` and scores it,
/// once per intensity. Intensity 0 scores the clean data.
pub fn evaluate_noisy(
    params: &ModelParams,
    target: &Dataset,
    intensities: &[f64],
    seed: u64,
    batch_size: usize,
) -> Result<Vec<RobustnessRow>> {
    target.labels()?;
    if batch_size == 0 {
        return Err(Error::usage("batch size must be >= 1"));
    }
    let n = target.len();
    intensities
        .iter()
        .map(|&intensity| {
            if !(intensity >= 0.0) || !intensity.is_finite() {
                return Err(Error::usage(format!(
                    "noise intensity must be >= 0, got {}",
                    intensity
                )));
            }
            let noisy = if intensity == 0.0 {
                target.clone()
            } else {
                let mut data = Vec::with_capacity(target.features.len());
                for (k, start) in (0..n).step_by(batch_size).enumerate() {
                    let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
                    let xb = target.features.select_rows(&idx);
                    let cfg = NoiseConfig {
                        intensity,
                        seed: batch_seed(seed, k),
                    };
                    data.extend_from_slice(vat_noise(params, &xb, &cfg)?.data());
                }
                Dataset {
                    features: Tensor::new(n, target.dim(), data)?,
                    ..target.clone()
                }
            };
            Ok(RobustnessRow {
                intensity,
                accuracy: evaluate_accuracy(params, &noisy)?,
            })
        })
        .collect()
}

/// `intensity,accuracy`
pub fn write_robustness_csv(rows: &[RobustnessRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "intensity,accuracy")?;
    for r in rows {
        writeln!(w, "{:?},{:?}", r.intensity, r.accuracy)?;
    }
    Ok(())
}
