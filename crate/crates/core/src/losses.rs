//! Loss terms of the joint objective, the dynamic triplet margin and the
//! cosine distance used for critical-pair analysis.
//!
//! Every graph-building loss returns a 1x1 [`Var`]. The probability-based
//! forms clamp into `[1e-12, 1]` before taking logs; the `_logits` forms
//! fuse the log into a log-sum-exp or softplus and are what the trainer
//! uses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Per-class triplet margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginTable {
    pub alpha: Vec<f64>,
}

impl MarginTable {
    pub fn constant(classes: usize, alpha: f64) -> Self {
        MarginTable {
            alpha: vec![alpha; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.alpha.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_class: f64,
    pub l_domain: f64,
    pub l_triplet: f64,
    pub l_entropy: f64,
    pub total: f64,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(
            "labels",
            format!("{} labels for {} rows", labels.len(), rows),
        ));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::usage(format!(
            "label {} at row {} is outside [0, {})",
            y, i, classes
        )));
    }
    Ok(())
}

fn mean_picked(g: &mut Graph, logp: Var, labels: &[usize]) -> Result<Var> {
    let at = labels.iter().enumerate().map(|(i, &y)| (i, y)).collect();
    let picked = g.gather(logp, at)?;
    let m = g.mean(picked)?;
    g.mul_scalar(m, -1.0)
}

/// Mean negative log-likelihood of `labels` under row-stochastic `probs`.
pub fn cross_entropy(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let (rows, k) = g.value(probs).shape();
    check_labels(labels, rows, k)?;
    let logp = g.log_prob(probs)?;
    mean_picked(g, logp, labels)
}

/// [`cross_entropy`] of `softmax(logits)` through a fused log-softmax.
pub fn cross_entropy_logits(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, k) = g.value(logits).shape();
    check_labels(labels, rows, k)?;
    let logp = g.log_softmax_rows(logits)?;
    mean_picked(g, logp, labels)
}

/// `-mean log d_source - mean log(1 - d_target)` for sigmoid outputs.
pub fn domain_loss(g: &mut Graph, d_source: Var, d_target: Var) -> Result<Var> {
    for v in [d_source, d_target] {
        if g.value(v).cols() != 1 {
            return Err(Error::shape(
                "domain_loss",
                "discriminator output must be one column",
            ));
        }
    }
    let ls = g.log_prob(d_source)?;
    let ms = g.mean(ls)?;
    let neg_t = g.mul_scalar(d_target, -1.0)?;
    let one_minus = g.add_scalar(neg_t, 1.0)?;
    let lt = g.log_prob(one_minus)?;
    let mt = g.mean(lt)?;
    let s = g.add(ms, mt)?;
    g.mul_scalar(s, -1.0)
}

/// [`domain_loss`] from discriminator logits: `-log σ(z) = softplus(-z)` and
/// `-log(1 - σ(z)) = softplus(z)`.
pub fn domain_loss_logits(g: &mut Graph, z_source: Var, z_target: Var) -> Result<Var> {
    for v in [z_source, z_target] {
        if g.value(v).cols() != 1 {
            return Err(Error::shape(
                "domain_loss",
                "discriminator output must be one column",
            ));
        }
    }
    let neg = g.mul_scalar(z_source, -1.0)?;
    let sp_s = g.softplus(neg)?;
    let ms = g.mean(sp_s)?;
    let sp_t = g.softplus(z_target)?;
    let mt = g.mean(sp_t)?;
    g.add(ms, mt)
}

/// Mean Shannon entropy of the rows of `probs`.
pub fn entropy_loss(g: &mut Graph, probs: Var) -> Result<Var> {
    let logp = g.log_prob(probs)?;
    let plogp = g.mul(probs, logp)?;
    mean_row_sums_negated(g, plogp)
}

/// Mean entropy of `softmax(logits)` using the fused log-softmax.
pub fn entropy_loss_logits(g: &mut Graph, logits: Var) -> Result<Var> {
    let logp = g.log_softmax_rows(logits)?;
    let p = g.softmax_rows(logits)?;
    let plogp = g.mul(p, logp)?;
    mean_row_sums_negated(g, plogp)
}

fn mean_row_sums_negated(g: &mut Graph, plogp: Var) -> Result<Var> {
    let per_row = g.sum_cols(plogp)?;
    let m = g.mean(per_row)?;
    g.mul_scalar(m, -1.0)
}

/// Pseudo label (argmax, lowest index on ties) and the largest remaining
/// probability.
pub fn second_peak(row: &[f64]) -> Result<(usize, f64)> {
    if row.len() < 2 {
        return Err(Error::usage(format!(
            "second peak needs at least 2 classes, got {}",
            row.len()
        )));
    }
    let top = crate::tensor::argmax(row);
    let second = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((top, second))
}

/// Groups target rows by pseudo label and sets
/// `alpha[c] = alpha0 + mu * mean(second peak of rows labelled c)`.
/// Classes with no rows keep `alpha0`.
pub fn dynamic_margins(
    probs: &Tensor,
    alpha0: f64,
    mu: f64,
    classes: usize,
) -> Result<MarginTable> {
    let mut sums = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for row in probs.row_iter() {
        let (label, second) = second_peak(row)?;
        if label >= classes {
            return Err(Error::shape(
                "dynamic_margins",
                format!("{} probability columns for {} classes", row.len(), classes),
            ));
        }
        sums[label] += second;
        counts[label] += 1;
    }
    let alpha = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| {
            if n == 0 {
                alpha0
            } else {
                alpha0 + mu * (s / n as f64)
            }
        })
        .collect();
    Ok(MarginTable { alpha })
}

/// Whole-batch variant: one shared margin from the mean second peak over
/// all target rows.
pub fn batch_mean_margins(
    probs: &Tensor,
    alpha0: f64,
    mu: f64,
    classes: usize,
) -> Result<MarginTable> {
    if probs.rows() == 0 {
        return Ok(MarginTable::constant(classes, alpha0));
    }
    let mut total = 0.0;
    for row in probs.row_iter() {
        total += second_peak(row)?.1;
    }
    Ok(MarginTable::constant(
        classes,
        alpha0 + mu * (total / probs.rows() as f64),
    ))
}

/// Squared Euclidean distances between the rows of `m`.
pub fn pairwise_sq_dist(g: &mut Graph, m: Var) -> Result<Var> {
    if g.value(m).rows() == 0 {
        return Err(Error::usage("pairwise distances need at least one row"));
    }
    g.pairwise_sq_dist(m)
}

/// Hardest positive and negative for each anchor, by distance value.
/// Ties resolve to the lowest index. `None` when the anchor has no
/// positive other than itself, or no negative.
pub fn mine_batch_hard(dist: &Tensor, labels: &[usize]) -> Vec<Option<(usize, usize)>> {
    let b = labels.len();
    (0..b)
        .map(|i| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..b {
                if j == i {
                    continue;
                }
                let d = dist.get(i, j);
                if labels[j] == labels[i] {
                    if pos.is_none_or(|p| d > dist.get(i, p)) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|n| d < dist.get(i, n)) {
                    neg = Some(j);
                }
            }
            pos.zip(neg)
        })
        .collect()
}

/// Batch-hard triplet loss with a per-class margin:
/// `(1/b) Σ_i max(max_pos d² - min_neg d² + alpha[y_i], 0)`.
/// Anchors without a positive or a negative add zero but still count in
/// the divisor.
pub fn triplet_loss(
    g: &mut Graph,
    metric: Var,
    labels: &[usize],
    margins: &MarginTable,
) -> Result<Var> {
    let rows = g.value(metric).rows();
    check_labels(labels, rows, margins.classes())?;
    let dist = pairwise_sq_dist(g, metric)?;
    let mined = mine_batch_hard(g.value(dist), labels);

    let mut pos_at = Vec::new();
    let mut neg_at = Vec::new();
    let mut alpha = Vec::new();
    for (i, pair) in mined.iter().enumerate() {
        if let Some((p, n)) = *pair {
            pos_at.push((i, p));
            neg_at.push((i, n));
            alpha.push(margins.alpha[labels[i]]);
        }
    }
    if pos_at.is_empty() {
        // keeps the result on the graph, with a zero gradient
        let z = g.mul_scalar(dist, 0.0)?;
        return g.mean(z);
    }
    let n = alpha.len();
    let pos = g.gather(dist, pos_at)?;
    let neg = g.gather(dist, neg_at)?;
    let gap = g.sub(pos, neg)?;
    let alpha = g.constant(Tensor::new(n, 1, alpha)?)?;
    let shifted = g.add(gap, alpha)?;
    let hinge = g.relu(shifted)?;
    let s = g.sum(hinge)?;
    g.mul_scalar(s, 1.0 / rows as f64)
}

/// `l_c + l_d + γ·l_t + λ·l_e`, with the components kept.
pub fn total_loss(
    l_c: f64,
    l_d: f64,
    l_t: f64,
    l_e: f64,
    gamma: f64,
    lambda: f64,
) -> LossBreakdown {
    LossBreakdown {
        l_class: l_c,
        l_domain: l_d,
        l_triplet: l_t,
        l_entropy: l_e,
        total: l_c + l_d + gamma * l_t + lambda * l_e,
    }
}

/// `1 - cos(f, g)`, clamped into `[0, 2]`.
pub fn cosine_distance(f: &[f64], g: &[f64]) -> Result<f64> {
    if f.len() != g.len() {
        return Err(Error::shape(
            "cosine_distance",
            format!("{} vs {} dims", f.len(), g.len()),
        ));
    }
    let ff: f64 = f.iter().map(|v| v * v).sum();
    let gg: f64 = g.iter().map(|v| v * v).sum();
    if ff == 0.0 || gg == 0.0 {
        return Err(Error::usage("cosine distance of a zero vector"));
    }
    let dot: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (ff * gg).sqrt()).clamp(0.0, 2.0))
}
