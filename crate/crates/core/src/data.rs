//! Datasets: synthetic generation, CSV ingestion, the four-way disjoint split
//! and synthesized non-members.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub k: usize,
    pub feature_dim: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, k: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::shape("dataset labels", features.len(), labels.len()));
        }
        let feature_dim = features.first().map_or(0, Vec::len);
        if let Some(row) = features.iter().find(|r| r.len() != feature_dim) {
            return Err(Error::shape("dataset row", feature_dim, row.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::input(format!("label {bad} out of range for k = {k}")));
        }
        Ok(Self {
            features,
            labels,
            k,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            k: self.k,
            feature_dim: self.feature_dim,
        }
    }

    /// Rows in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let idx: Vec<usize> = range.collect();
        self.subset(&idx)
    }

    /// Concatenation of two datasets over the same label space.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.feature_dim != other.feature_dim && !self.is_empty() && !other.is_empty() {
            return Err(Error::shape("concat feature_dim", self.feature_dim, other.feature_dim));
        }
        let mut features = self.features.clone();
        features.extend(other.features.iter().cloned());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(features, labels, self.k.max(other.k))
    }

    pub fn is_binary(&self) -> bool {
        self.features.iter().flatten().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Writes the dataset in the headerless CSV format read by [`load_csv`].
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = fs::File::create(path)?;
        out.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        for (row, label) in self.features.iter().zip(&self.labels) {
            for v in row {
                s.push_str(&v.to_string());
                s.push(',');
            }
            s.push_str(&label.to_string());
            s.push('\n');
        }
        s
    }
}

/// Binary cluster data: `k` random binary centroids, every sample is its
/// class centroid with each bit flipped independently with `flip_prob`.
/// Labels cycle through the classes so every class is populated.
pub fn generate_synthetic(
    n_samples: usize,
    feature_dim: usize,
    k: usize,
    flip_prob: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(0.0..0.5).contains(&flip_prob) {
        return Err(Error::config(format!("cluster_flip_prob must be in [0, 0.5), got {flip_prob}")));
    }
    if k == 0 || feature_dim == 0 {
        return Err(Error::config("k and feature_dim must be positive"));
    }
    if n_samples < k {
        return Err(Error::config(format!("n_samples {n_samples} smaller than k {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..feature_dim).map(|_| f64::from(rng.gen::<bool>() as u8)).collect())
        .collect();
    let mut features = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = i % k;
        let row = centroids[label]
            .iter()
            .map(|&bit| if rng.gen::<f64>() < flip_prob { 1.0 - bit } else { bit })
            .collect();
        features.push(row);
        labels.push(label);
    }
    LabeledDataset::new(features, labels, k)
}

/// Loads a headerless CSV: feature columns, then an integer label column.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let perr = |msg: String| Error::Parse { line, msg };
        if record.len() < 2 {
            return Err(perr("row needs at least one feature and a label".into()));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(perr(format!("ragged row: {} fields, expected {w}", record.len())));
            }
            _ => {}
        }
        let n = record.len() - 1;
        let row = (0..n)
            .map(|i| {
                let cell = record[i].trim();
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| perr(format!("non-numeric cell `{cell}` in column {}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let raw = record[n].trim();
        let label = raw
            .parse::<i64>()
            .map_err(|_| perr(format!("label `{raw}` is not an integer")))?;
        if label < 0 {
            return Err(perr(format!("negative label {label}")));
        }
        features.push(row);
        labels.push(label as usize);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no rows".into(),
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(features, labels, k)
}

/// D₁..D₄ with D₂ halved into D₂′ and D₂″.
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub d1: LabeledDataset,
    pub d2a: LabeledDataset,
    pub d2b: LabeledDataset,
    pub d3: LabeledDataset,
    pub d4: LabeledDataset,
    /// Source indices for d1, d2a, d2b, d3, d4.
    pub indices: [Vec<usize>; 5],
}

impl SplitSet {
    /// Verifies that the five index sets are pairwise disjoint.
    pub fn audit_disjoint(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.indices.iter().flatten().all(|&i| seen.insert(i))
    }
}

pub fn split_dataset(ds: &LabeledDataset, per_split_size: usize, seed: u64) -> Result<SplitSet> {
    if per_split_size == 0 {
        return Err(Error::input("per_split_size must be positive"));
    }
    if 4 * per_split_size > ds.len() {
        return Err(Error::input(format!(
            "need {} samples for four splits of {per_split_size}, dataset has {}",
            4 * per_split_size,
            ds.len()
        )));
    }
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = per_split_size;
    let half = n.div_ceil(2);
    let indices = [
        perm[..n].to_vec(),
        perm[n..n + half].to_vec(),
        perm[n + half..2 * n].to_vec(),
        perm[2 * n..3 * n].to_vec(),
        perm[3 * n..4 * n].to_vec(),
    ];
    let split = SplitSet {
        d1: ds.subset(&indices[0]),
        d2a: ds.subset(&indices[1]),
        d2b: ds.subset(&indices[2]),
        d3: ds.subset(&indices[3]),
        d4: ds.subset(&indices[4]),
        indices,
    };
    debug_assert!(split.audit_disjoint());
    Ok(split)
}

/// Non-members derived from members: every feature is kept with `keep_prob`,
/// otherwise resampled uniformly from `{0, 1}`.
pub fn synthesize_nonmembers(d1: &LabeledDataset, keep_prob: f64, seed: u64) -> Result<LabeledDataset> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::config(format!("keep_prob must be in (0, 1], got {keep_prob}")));
    }
    if !d1.is_binary() {
        return Err(Error::input("non-member synthesis requires binary features"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = d1
        .features
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| {
                    if rng.gen::<f64>() < keep_prob {
                        v
                    } else {
                        f64::from(rng.gen::<bool>() as u8)
                    }
                })
                .collect()
        })
        .collect();
    LabeledDataset::new(features, d1.labels.clone(), d1.k)
}

/// Entries sorted in descending order.
pub fn rank_confidence(s: &[f64]) -> Vec<f64> {
    let mut v = s.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

pub fn one_hot(label: usize, k: usize) -> Result<Vec<f64>> {
    if label >= k {
        return Err(Error::input(format!("label {label} out of range for k = {k}")));
    }
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    Ok(v)
}
