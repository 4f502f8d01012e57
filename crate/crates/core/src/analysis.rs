//! Critical-pair inspection: the most uncertain sample, its farthest
//! same-label sample and its nearest different-label sample under cosine
//! distance. Also exports embeddings for external visualization.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{cosine_distance, second_peak};
use crate::networks::ModelParams;
use crate::tensor::Tensor;

/// Row with the largest second-peak probability; first row on ties.
pub fn most_uncertain(probs: &Tensor) -> Result<usize> {
    if probs.rows() == 0 {
        return Err(Error::usage("no rows to inspect"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, row) in probs.row_iter().enumerate() {
        let (_, second) = second_peak(row)?;
        if second > best.1 {
            best = (i, second);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub index: usize,
    pub label: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPairs {
    pub anchor_index: usize,
    pub anchor_label: usize,
    pub farthest_positive: Option<PairEntry>,
    pub nearest_negative: Option<PairEntry>,
}

fn row_norm_nonzero(features: &Tensor, i: usize) -> Result<()> {
    if features.row(i).iter().all(|&v| v == 0.0) {
        return Err(Error::NonFinite(format!(
            "feature row {} has zero norm; cosine distance undefined",
            i
        )));
    }
    Ok(())
}

/// Farthest same-label row and nearest different-label row to `anchor`.
/// Ties keep the lowest index.
pub fn critical_pairs(features: &Tensor, labels: &[usize], anchor: usize) -> Result<CriticalPairs> {
    if labels.len() != features.rows() {
        return Err(Error::shape(
            "critical_pairs",
            format!("{} labels for {} rows", labels.len(), features.rows()),
        ));
    }
    if anchor >= labels.len() {
        return Err(Error::usage(format!(
            "anchor {} outside {} rows",
            anchor,
            labels.len()
        )));
    }
    row_norm_nonzero(features, anchor)?;
    let a = features.row(anchor);
    let mut pos: Option<PairEntry> = None;
    let mut neg: Option<PairEntry> = None;
    for (j, &label) in labels.iter().enumerate() {
        if j == anchor {
            continue;
        }
        row_norm_nonzero(features, j)?;
        let distance = cosine_distance(a, features.row(j))?;
        let entry = PairEntry {
            index: j,
            label,
            distance,
        };
        if label == labels[anchor] {
            if pos.is_none_or(|p| distance > p.distance) {
                pos = Some(entry);
            }
        } else if neg.is_none_or(|n| distance < n.distance) {
            neg = Some(entry);
        }
    }
    Ok(CriticalPairs {
        anchor_index: anchor,
        anchor_label: labels[anchor],
        farthest_positive: pos,
        nearest_negative: neg,
    })
}

/// Which representation pairs are measured in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSpace {
    /// Extractor output F(x).
    Feature,
    /// Metric generator output G(F(x)).
    Metric,
}

/// Which labels group samples into positives and negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Pseudo,
    True,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPairReport {
    pub space: FeatureSpace,
    pub label_mode: LabelMode,
    pub anchor_index: usize,
    pub anchor_pseudo_label: usize,
    pub anchor_second_prob: f64,
    pub anchor_true_label: Option<usize>,
    pub farthest_positive: Option<PairEntry>,
    pub nearest_negative: Option<PairEntry>,
}

/// Locates the most uncertain row of `x` under `params` and reports its
/// critical pairs.
pub fn analyze(
    params: &ModelParams,
    x: &Tensor,
    true_labels: Option<&[usize]>,
    space: FeatureSpace,
    label_mode: LabelMode,
) -> Result<CriticalPairReport> {
    let probs = params.predict_probs(x)?;
    let anchor = most_uncertain(&probs)?;
    let (anchor_pseudo_label, anchor_second_prob) = second_peak(probs.row(anchor))?;
    let pseudo = probs.argmax_rows();
    let labels: &[usize] = match label_mode {
        LabelMode::Pseudo => &pseudo,
        LabelMode::True => {
            true_labels.ok_or_else(|| Error::usage("true-label grouping needs labeled data"))?
        }
    };
    let feats = match space {
        FeatureSpace::Feature => params.features(x)?,
        FeatureSpace::Metric => params.metric_features(x)?,
    };
    let pairs = critical_pairs(&feats, labels, anchor)?;
    Ok(CriticalPairReport {
        space,
        label_mode,
        anchor_index: anchor,
        anchor_pseudo_label,
        anchor_second_prob,
        anchor_true_label: true_labels.map(|l| l[anchor]),
        farthest_positive: pairs.farthest_positive,
        nearest_negative: pairs.nearest_negative,
    })
}

impl fmt::Display for CriticalPairReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let slot = |e: &Option<PairEntry>| match e {
            Some(e) => format!("{:>6} {:>6} {:>10.6}", e.index, e.label, e.distance),
            None => format!("{:>6} {:>6} {:>10}", "-", "-", "absent"),
        };
        writeln!(
            f,
            "space: {:?}, grouping: {:?} labels",
            self.space, self.label_mode
        )?;
        writeln!(
            f,
            "anchor {} (pseudo label {}, second prob {:.6}{})",
            self.anchor_index,
            self.anchor_pseudo_label,
            self.anchor_second_prob,
            self.anchor_true_label
                .map_or(String::new(), |t| format!(", true label {}", t))
        )?;
        writeln!(
            f,
            "{:<18} {:>6} {:>6} {:>10}",
            "pair", "index", "label", "cos dist"
        )?;
        writeln!(
            f,
            "{:<18} {}",
            "farthest positive",
            slot(&self.farthest_positive)
        )?;
        write!(
            f,
            "{:<18} {}",
            "nearest negative",
            slot(&self.nearest_negative)
        )
    }
}

/// One CSV row per sample: `f0..f{d-1},true_label,predicted_label`. An
/// absent true label leaves its field empty.
pub fn export_embeddings(
    features: &Tensor,
    labels: Option<&[usize]>,
    predictions: &[usize],
    path: &Path,
) -> Result<()> {
    let n = features.rows();
    if predictions.len() != n || labels.is_some_and(|l| l.len() != n) {
        return Err(Error::shape(
            "export_embeddings",
            format!("{} rows, {} predictions", n, predictions.len()),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let mut header: Vec<String> = (0..features.cols()).map(|i| format!("f{}", i)).collect();
    header.push("true_label".into());
    header.push("predicted_label".into());
    writeln!(w, "{}", header.join(","))?;
    for (i, row) in features.row_iter().enumerate() {
        for v in row {
            write!(w, "{:?},", v)?;
        }
        let truth = labels.map_or(String::new(), |l| l[i].to_string());
        writeln!(w, "{},{}", truth, predictions[i])?;
    }
    w.flush()?;
    Ok(())
}

/// Embeddings as written by [`export_embeddings`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub features: Tensor,
    pub labels: Vec<Option<usize>>,
    pub predictions: Vec<usize>,
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("embedding file has no header".into()))?;
    let dim = header.split(',').count().saturating_sub(2);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut predictions = Vec::new();
    for (k, line) in lines.enumerate() {
        let err = |msg: &str| Error::Parse {
            path: path.display().to_string(),
            line: k as u64 + 2,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(err("wrong field count"));
        }
        for f in &fields[..dim] {
            data.push(f.parse::<f64>().map_err(|_| err("bad feature"))?);
        }
        labels.push(if fields[dim].is_empty() {
            None
        } else {
            Some(fields[dim].parse().map_err(|_| err("bad label"))?)
        });
        predictions.push(fields[dim + 1].parse().map_err(|_| err("bad prediction"))?);
    }
    Ok(EmbeddingTable {
        features: Tensor::new(predictions.len(), dim, data)?,
        labels,
        predictions,
    })
}
