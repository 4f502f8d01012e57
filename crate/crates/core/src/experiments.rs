//! Multi-seed comparison harness on the synthetic blobs task: loss
//! ablations, constant vs dynamic margins, and noisy-target robustness.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{downsample_source, gen_shifted_blobs, Dataset, ShiftSpec};
use crate::error::Result;
use crate::robustness::{evaluate_noisy, RobustnessRow};
use crate::seeds;
use crate::trainer::{evaluate_accuracy, fit, MarginMode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobsTask {
    pub classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub shift: ShiftSpec,
    /// Source downsampling divisor; 1 keeps every row.
    pub source_divisor: usize,
}

impl Default for BlobsTask {
    fn default() -> Self {
        BlobsTask {
            classes: 3,
            n_per_class: 100,
            dim: 2,
            shift: ShiftSpec::rotation_degrees(35.0),
            source_divisor: 1,
        }
    }
}

/// Learning rate used for the blobs experiments. The tiny networks diverge
/// on some loss subsets at the library default of 0.01.
pub const BLOBS_BASE_LR: f64 = 0.001;

impl BlobsTask {
    /// Default training config with [`BLOBS_BASE_LR`].
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: BLOBS_BASE_LR,
            ..TrainConfig::default()
        }
    }

    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let (source, target) = gen_shifted_blobs(
            self.classes,
            self.n_per_class,
            self.dim,
            &self.shift,
            seeds::derive(seed, seeds::DATA),
        )?;
        let source = downsample_source(
            &source,
            self.source_divisor,
            seeds::derive(seed, seeds::DOWNSAMPLE),
        )?;
        Ok((source, target))
    }
}

/// Trains one cell and returns its final target accuracy.
pub fn run_cell(cfg: &TrainConfig, task: &BlobsTask, seed: u64) -> Result<f64> {
    let (source, target) = task.generate(seed)?;
    let cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let (params, _) = fit(&cfg, &source, &target, 0)?;
    evaluate_accuracy(&params, &target)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub accuracies: Vec<f64>,
    pub median: f64,
}

/// Runs every `(label, config)` on every seed, in parallel.
pub fn compare(
    cells: &[(String, TrainConfig)],
    task: &BlobsTask,
    seeds: &[u64],
) -> Result<Vec<ComparisonRow>> {
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, s)| run_cell(&cells[c].1, task, s))
        .collect::<Result<_>>()?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, (label, _))| {
            let accuracies = accs[c * seeds.len()..(c + 1) * seeds.len()].to_vec();
            ComparisonRow {
                label: label.clone(),
                median: median(&accuracies),
                accuracies,
            }
        })
        .collect())
}

/// The six loss combinations of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossCombo {
    Class,
    ClassDomain,
    ClassTriplet,
    ClassDomainTriplet,
    ClassDomainEntropy,
    Full,
}

impl LossCombo {
    pub const ALL: [LossCombo; 6] = [
        LossCombo::Class,
        LossCombo::ClassDomain,
        LossCombo::ClassTriplet,
        LossCombo::ClassDomainTriplet,
        LossCombo::ClassDomainEntropy,
        LossCombo::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LossCombo::Class => "L_C",
            LossCombo::ClassDomain => "L_C+L_D",
            LossCombo::ClassTriplet => "L_C+gL_T",
            LossCombo::ClassDomainTriplet => "L_C+L_D+gL_T",
            LossCombo::ClassDomainEntropy => "L_C+L_D+lL_E",
            LossCombo::Full => "L_C+L_D+lL_E+gL_T",
        }
    }

    /// (domain, triplet, entropy)
    pub fn switches(self) -> (bool, bool, bool) {
        match self {
            LossCombo::Class => (false, false, false),
            LossCombo::ClassDomain => (true, false, false),
            LossCombo::ClassTriplet => (false, true, false),
            LossCombo::ClassDomainTriplet => (true, true, false),
            LossCombo::ClassDomainEntropy => (true, false, true),
            LossCombo::Full => (true, true, true),
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let (enable_domain, enable_triplet, enable_entropy) = self.switches();
        TrainConfig {
            enable_domain,
            enable_triplet,
            enable_entropy,
            ..base.clone()
        }
    }
}

pub fn ablation_grid(
    base: &TrainConfig,
    task: &BlobsTask,
    seeds: &[u64],
) -> Result<Vec<ComparisonRow>> {
    let cells: Vec<_> = LossCombo::ALL
        .iter()
        .map(|c| (c.label().to_string(), c.apply(base)))
        .collect();
    compare(&cells, task, seeds)
}

/// Full objective with each constant margin, then with the dynamic
/// per-group margin (last row).
pub fn margin_sweep(
    base: &TrainConfig,
    task: &BlobsTask,
    seeds: &[u64],
    constants: &[f64],
) -> Result<Vec<ComparisonRow>> {
    let full = LossCombo::Full.apply(base);
    let mut cells: Vec<_> = constants
        .iter()
        .map(|&a| {
            (
                format!("alpha={}", a),
                TrainConfig {
                    alpha0: a,
                    margin_mode: MarginMode::Constant,
                    ..full.clone()
                },
            )
        })
        .collect();
    cells.push((
        "dynamic".to_string(),
        TrainConfig {
            margin_mode: MarginMode::PerGroup,
            ..full
        },
    ));
    compare(&cells, task, seeds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyComparison {
    pub label: String,
    /// Per seed, one row per intensity.
    pub per_seed: Vec<Vec<RobustnessRow>>,
}

impl NoisyComparison {
    pub fn median_at(&self, k: usize) -> f64 {
        median(
            &self
                .per_seed
                .iter()
                .map(|r| r[k].accuracy)
                .collect::<Vec<_>>(),
        )
    }
}

/// Trains each config per seed, then scores the target under each noise
/// intensity.
pub fn noisy_comparison(
    cells: &[(String, TrainConfig)],
    task: &BlobsTask,
    seeds: &[u64],
    intensities: &[f64],
) -> Result<Vec<NoisyComparison>> {
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let tables: Vec<Vec<RobustnessRow>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let (source, target) = task.generate(seed)?;
            let cfg = TrainConfig {
                seed,
                ..cells[c].1.clone()
            };
            let (params, _) = fit(&cfg, &source, &target, 0)?;
            evaluate_noisy(
                &params,
                &target,
                intensities,
                seeds::derive(seed, seeds::NOISE),
                cfg.batch_size,
            )
        })
        .collect::<Result<_>>()?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, (label, _))| NoisyComparison {
            label: label.clone(),
            per_seed: tables[c * seeds.len()..(c + 1) * seeds.len()].to_vec(),
        })
        .collect())
}

/// `label,median,acc_seed...`
pub fn write_comparison_csv(
    rows: &[ComparisonRow],
    seeds: &[u64],
    mut w: impl Write,
) -> Result<()> {
    let seed_cols: Vec<String> = seeds.iter().map(|s| format!("seed_{}", s)).collect();
    writeln!(w, "combination,median_target_acc,{}", seed_cols.join(","))?;
    for r in rows {
        let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{:?}", a)).collect();
        writeln!(w, "{},{:?},{}", r.label, r.median, accs.join(","))?;
    }
    Ok(())
}

pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.label.len())
        .max()
        .unwrap_or(0)
        .max(11);
    let mut out = format!(
        "{:<width$}  median target acc\n",
        "combination",
        width = width
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>6.2}%\n",
            r.label,
            100.0 * r.median,
            width = width
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn combos_cover_table() {
        let labels: Vec<_> = LossCombo::ALL.iter().map(|c| c.label()).collect();
        assert_eq!(labels.len(), 6);
        assert_eq!(LossCombo::Full.switches(), (true, true, true));
        let cfg = LossCombo::ClassTriplet.apply(&TrainConfig::default());
        assert!(!cfg.enable_domain && cfg.enable_triplet && !cfg.enable_entropy);
    }
}
