//! Synthetic domain-shift datasets, CSV ingestion, stratified source
//! downsampling and paired mini-batch iteration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Radius of the circle the class centres sit on.
pub const BLOB_RADIUS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    /// Absent for unlabeled data. For a generated target these are kept
    /// for scoring only; the trainer never reads them.
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Option<Vec<usize>>,
        domain: Domain,
        class_count: usize,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::usage("dataset has no rows"));
        }
        if let Some(labels) = &labels {
            if labels.len() != features.rows() {
                return Err(Error::Data(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    features.rows()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
                return Err(Error::Data(format!(
                    "label {} outside [0, {})",
                    bad, class_count
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            domain,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::usage("dataset is unlabeled"))
    }

    /// Rows per class; empty when unlabeled.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in self.labels.iter().flatten() {
            counts[y] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            domain: self.domain,
            class_count: self.class_count,
        }
    }

    /// Writes comma-separated rows, appending the label when present.
    /// Values use the shortest representation that parses back exactly.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (i, row) in self.features.row_iter().enumerate() {
            let mut line = row
                .iter()
                .map(|v| format!("{:?}", v))
                .collect::<Vec<_>>()
                .join(",");
            if let Some(labels) = &self.labels {
                line.push(',');
                line.push_str(&labels[i].to_string());
            }
            writeln!(w, "{}", line)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Affine covariate shift applied to the target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Rotation in the plane of the first two coordinates, in radians.
    pub rotation: f64,
    /// Per-coordinate offset; empty means zero.
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_sigma: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            rotation: 0.0,
            translation: Vec::new(),
            scale: 1.0,
            noise_sigma: 0.0,
        }
    }
}

impl ShiftSpec {
    pub fn rotation_degrees(deg: f64) -> Self {
        ShiftSpec {
            rotation: deg.to_radians(),
            ..ShiftSpec::default()
        }
    }
}

fn class_center(c: usize, classes: usize, d: usize) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
    let mut center = vec![0.0; d];
    center[0] = BLOB_RADIUS * angle.cos();
    center[1] = BLOB_RADIUS * angle.sin();
    center
}

/// Unit-variance Gaussian blobs on a circle for the source; the target
/// draws fresh blob samples, then rotates, scales, translates and adds
/// `noise_sigma` Gaussian noise. Rows are grouped by class.
pub fn gen_shifted_blobs(
    classes: usize,
    n_per_class: usize,
    d: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::usage(format!(
            "need at least 2 classes, got {}",
            classes
        )));
    }
    if d < 2 {
        return Err(Error::usage(format!(
            "need at least 2 dimensions, got {}",
            d
        )));
    }
    if n_per_class == 0 {
        return Err(Error::usage("n_per_class must be at least 1"));
    }
    if !(shift.scale > 0.0) {
        return Err(Error::usage(format!(
            "shift scale must be > 0, got {}",
            shift.scale
        )));
    }
    if shift.noise_sigma < 0.0 {
        return Err(Error::usage("noise sigma must be >= 0"));
    }
    if !shift.translation.is_empty() && shift.translation.len() != d {
        return Err(Error::usage(format!(
            "translation has {} entries for {} dimensions",
            shift.translation.len(),
            d
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * n_per_class;
    let mut labels = Vec::with_capacity(n);
    let mut src = Vec::with_capacity(n * d);
    for c in 0..classes {
        let center = class_center(c, classes, d);
        for _ in 0..n_per_class {
            for &mu in &center {
                let z: f64 = rng.sample(StandardNormal);
                src.push(mu + z);
            }
            labels.push(c);
        }
    }

    let (sin, cos) = shift.rotation.sin_cos();
    let mut tgt = Vec::with_capacity(n * d);
    for c in 0..classes {
        let center = class_center(c, classes, d);
        for _ in 0..n_per_class {
            let mut x: Vec<f64> = center
                .iter()
                .map(|&mu| mu + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let (x0, x1) = (x[0], x[1]);
            x[0] = cos * x0 - sin * x1;
            x[1] = sin * x0 + cos * x1;
            for (k, v) in x.iter_mut().enumerate() {
                *v *= shift.scale;
                *v += shift.translation.get(k).copied().unwrap_or(0.0);
                if shift.noise_sigma > 0.0 {
                    *v += shift.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            tgt.extend(x);
        }
    }

    let source = Dataset::new(
        Tensor::new(n, d, src)?,
        Some(labels.clone()),
        Domain::Source,
        classes,
    )?;
    let target = Dataset::new(
        Tensor::new(n, d, tgt)?,
        Some(labels),
        Domain::Target,
        classes,
    )?;
    Ok((source, target))
}

/// Reads a headerless (or single-header) CSV of reals. When `labeled`,
/// the final column is an integer label and the class count is
/// `max label + 1`; otherwise every column is a feature and the class
/// count is left at 0 for the caller to fill in.
pub fn load_csv(path: &Path, labeled: bool, has_header: bool, domain: Domain) -> Result<Dataset> {
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Data(format!("{}: {:?}", shown, other)),
        })?;

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                path: shown.clone(),
                line,
                msg: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |msg: String| Error::Parse {
            path: shown.clone(),
            line,
            msg,
        };
        let fields: Vec<&str> = record.iter().collect();
        let n_feat = if labeled {
            if fields.len() < 2 {
                return Err(parse_err("labeled row needs a feature and a label".into()));
            }
            fields.len() - 1
        } else {
            fields.len()
        };
        match width {
            None => width = Some(n_feat),
            Some(w) if w != n_feat => {
                return Err(parse_err(format!(
                    "expected {} features, found {}",
                    w, n_feat
                )))
            }
            _ => {}
        }
        for tok in &fields[..n_feat] {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(format!("not a number: {:?}", tok)))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value {:?}", tok)));
            }
            data.push(v);
        }
        if labeled {
            let tok = fields[n_feat];
            let y: usize = tok.parse().map_err(|_| {
                parse_err(format!("label is not a non-negative integer: {:?}", tok))
            })?;
            labels.push(y);
        }
    }
    let Some(width) = width else {
        return Err(Error::usage(format!("{}: file has no data rows", shown)));
    };
    let rows = data.len() / width;
    let features = Tensor::new(rows, width, data)?;
    if labeled {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(features, Some(labels), domain, k)
    } else {
        Dataset::new(features, None, domain, 0)
    }
}

/// Keeps `ceil(count_c / divisor)` rows of each class, chosen by a seeded
/// shuffle; surviving rows stay in their original order.
pub fn downsample_source(ds: &Dataset, divisor: usize, seed: u64) -> Result<Dataset> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::usage("downsampling needs a labeled dataset"))?;
    if divisor == 0 {
        return Err(Error::usage("downsample divisor must be >= 1"));
    }
    if divisor == 1 {
        return Ok(ds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for c in 0..ds.class_count {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let n = idx.len().div_ceil(divisor);
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..n]);
    }
    keep.sort_unstable();
    Ok(ds.select(&keep))
}

/// One joint mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source_x: Tensor,
    pub source_y: Vec<usize>,
    pub target_x: Tensor,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

/// Endless stream of joint batches. Source rows are reshuffled every
/// epoch and consumed in full chunks of `b` (the short remainder is
/// dropped); target rows come from an independent shuffled cursor that
/// reshuffles when it runs out.
pub struct BatchIter<'a> {
    source: &'a Dataset,
    source_labels: &'a [usize],
    target: &'a Dataset,
    batch_size: usize,
    source_order: Vec<usize>,
    source_pos: usize,
    target_order: Vec<usize>,
    target_pos: usize,
    source_rng: ChaCha8Rng,
    target_rng: ChaCha8Rng,
}

pub fn batch_iter<'a>(
    source: &'a Dataset,
    target: &'a Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<BatchIter<'a>> {
    let source_labels = source.labels()?;
    if batch_size == 0 {
        return Err(Error::usage("batch size must be >= 1"));
    }
    if batch_size > source.len() || batch_size > target.len() {
        return Err(Error::usage(format!(
            "batch size {} exceeds dataset size (source {}, target {})",
            batch_size,
            source.len(),
            target.len()
        )));
    }
    if source.dim() != target.dim() {
        return Err(Error::Data(format!(
            "source has {} features but target has {}",
            source.dim(),
            target.dim()
        )));
    }
    let mut source_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut target_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut source_order: Vec<usize> = (0..source.len()).collect();
    source_order.shuffle(&mut source_rng);
    let mut target_order: Vec<usize> = (0..target.len()).collect();
    target_order.shuffle(&mut target_rng);
    Ok(BatchIter {
        source,
        source_labels,
        target,
        batch_size,
        source_order,
        source_pos: 0,
        target_order,
        target_pos: 0,
        source_rng,
        target_rng,
    })
}

impl BatchIter<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.source.len() / self.batch_size
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let b = self.batch_size;
        if self.source_pos + b > self.source_order.len() {
            self.source_order.shuffle(&mut self.source_rng);
            self.source_pos = 0;
        }
        let source_indices = self.source_order[self.source_pos..self.source_pos + b].to_vec();
        self.source_pos += b;

        let mut target_indices = Vec::with_capacity(b);
        while target_indices.len() < b {
            if self.target_pos == self.target_order.len() {
                self.target_order.shuffle(&mut self.target_rng);
                self.target_pos = 0;
            }
            target_indices.push(self.target_order[self.target_pos]);
            self.target_pos += 1;
        }

        Some(Batch {
            source_x: self.source.features.select_rows(&source_indices),
            source_y: source_indices
                .iter()
                .map(|&i| self.source_labels[i])
                .collect(),
            target_x: self.target.features.select_rows(&target_indices),
            source_indices,
            target_indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let shift = ShiftSpec::rotation_degrees(35.0);
        let (s1, t1) = gen_shifted_blobs(3, 10, 2, &shift, 4).unwrap();
        let (s2, t2) = gen_shifted_blobs(3, 10, 2, &shift, 4).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        assert_eq!(s1.class_counts(), vec![10, 10, 10]);
        assert_eq!(t1.class_counts(), vec![10, 10, 10]);
        assert_eq!(t1.domain, Domain::Target);
        let (s3, _) = gen_shifted_blobs(3, 10, 2, &shift, 5).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn rotation_moves_target_class_means() {
        let (s, t) = gen_shifted_blobs(3, 2000, 2, &ShiftSpec::rotation_degrees(90.0), 1).unwrap();
        let mean = |ds: &Dataset, c: usize| {
            let rows: Vec<_> = (0..ds.len())
                .filter(|&i| ds.labels.as_ref().unwrap()[i] == c)
                .collect();
            let n = rows.len() as f64;
            let x: f64 = rows.iter().map(|&i| ds.features.get(i, 0)).sum::<f64>() / n;
            let y: f64 = rows.iter().map(|&i| ds.features.get(i, 1)).sum::<f64>() / n;
            (x, y)
        };
        let (sx, sy) = mean(&s, 0);
        assert!((sx - 4.0).abs() < 0.1 && sy.abs() < 0.1);
        let (tx, ty) = mean(&t, 0);
        assert!(tx.abs() < 0.1 && (ty - 4.0).abs() < 0.1);
    }

    #[test]
    fn zero_shift_matches_source_statistics() {
        let (s, t) = gen_shifted_blobs(2, 4000, 3, &ShiftSpec::default(), 9).unwrap();
        for col in 0..3 {
            let ms: f64 =
                (0..s.len()).map(|i| s.features.get(i, col)).sum::<f64>() / s.len() as f64;
            let mt: f64 =
                (0..t.len()).map(|i| t.features.get(i, col)).sum::<f64>() / t.len() as f64;
            assert!((ms - mt).abs() < 0.1, "column {}: {} vs {}", col, ms, mt);
        }
    }

    #[test]
    fn generator_rejects_bad_counts() {
        let s = ShiftSpec::default();
        assert!(matches!(
            gen_shifted_blobs(1, 10, 2, &s, 0),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            gen_shifted_blobs(3, 10, 1, &s, 0),
            Err(Error::Usage(_))
        ));
        let bad = ShiftSpec {
            scale: 0.0,
            ..ShiftSpec::default()
        };
        assert!(matches!(
            gen_shifted_blobs(3, 10, 2, &bad, 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn downsample_keeps_ceiling_per_class() {
        let (s, _) = gen_shifted_blobs(3, 10, 2, &ShiftSpec::default(), 2).unwrap();
        assert_eq!(downsample_source(&s, 1, 0).unwrap(), s);
        assert_eq!(
            downsample_source(&s, 2, 0).unwrap().class_counts(),
            vec![5, 5, 5]
        );
        assert_eq!(
            downsample_source(&s, 4, 0).unwrap().class_counts(),
            vec![3, 3, 3]
        );
        assert_eq!(
            downsample_source(&s, 3, 1).unwrap(),
            downsample_source(&s, 3, 1).unwrap()
        );
        let unlabeled = Dataset { labels: None, ..s };
        assert!(matches!(
            downsample_source(&unlabeled, 2, 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn one_epoch_covers_every_source_row() {
        let (s, t) = gen_shifted_blobs(2, 32, 2, &ShiftSpec::default(), 3).unwrap();
        let iter = batch_iter(&s, &t, 32, 7).unwrap();
        assert_eq!(iter.batches_per_epoch(), 2);
        let batches: Vec<_> = iter.take(2).collect();
        let mut seen: Vec<usize> = batches
            .iter()
            .flat_map(|b| b.source_indices.clone())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..64).collect::<Vec<_>>());
        for b in &batches {
            assert_eq!(b.source_x.rows(), 32);
            assert_eq!(b.target_x.rows(), 32);
            assert_eq!(b.source_y.len(), 32);
        }
    }

    #[test]
    fn batch_iter_drops_short_remainder() {
        let (s, t) = gen_shifted_blobs(2, 25, 2, &ShiftSpec::default(), 3).unwrap();
        let iter = batch_iter(&s, &t, 16, 1).unwrap();
        assert_eq!(iter.batches_per_epoch(), 3);
        let epoch: Vec<_> = iter.take(3).flat_map(|b| b.source_indices).collect();
        let mut unique = epoch.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), 48);
    }

    #[test]
    fn batch_iter_rejects_oversized_batch() {
        let (s, t) = gen_shifted_blobs(2, 5, 2, &ShiftSpec::default(), 3).unwrap();
        assert!(matches!(batch_iter(&s, &t, 11, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (s, _) = gen_shifted_blobs(3, 4, 2, &ShiftSpec::default(), 5).unwrap();
        let path = dir.path().join("s.csv");
        s.write_csv(&path).unwrap();
        let back = load_csv(&path, true, false, Domain::Source).unwrap();
        assert_eq!(back, s);

        let unl = load_csv(&path, false, false, Domain::Target).unwrap();
        assert_eq!(unl.dim(), 3);
        assert!(unl.labels.is_none());

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "1.0,2.0,0\n1.5,abc,1\n").unwrap();
        match load_csv(&bad, true, false, Domain::Source) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("abc"));
            }
            other => panic!("unexpected {:?}", other),
        }

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(
            load_csv(&empty, true, false, Domain::Source),
            Err(Error::Usage(_))
        ));

        let header = dir.path().join("h.csv");
        std::fs::write(&header, "x,y,label\n0.5,1.5,2\n").unwrap();
        let ds = load_csv(&header, true, true, Domain::Source).unwrap();
        assert_eq!(ds.class_count, 3);
        assert_eq!(ds.features.data(), &[0.5, 1.5]);
    }
}
