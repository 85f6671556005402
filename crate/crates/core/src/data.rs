//! Dataset ingestion, normalization, splits, and synthetic generators.
//!
//! Features are mapped to `[-1, 1]` and targets are z-scored, with statistics
//! fitted on the training split only and applied everywhere.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::deepgp::{self, DeepGpArchitecture};
use crate::error::{Error, Result};

/// Raw numeric table straight from a CSV file.
#[derive(Debug, Clone)]
pub struct RawData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

/// Normalization fitted on the training split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Transforms {
    /// Per-feature `(min, max)` of the raw training features.
    pub feature_ranges: Vec<(f64, f64)>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Transforms {
    pub fn normalize_feature(&self, j: usize, raw: f64) -> f64 {
        let (lo, hi) = self.feature_ranges[j];
        if hi == lo {
            0.0
        } else {
            2.0 * (raw - lo) / (hi - lo) - 1.0
        }
    }

    pub fn denormalize_feature(&self, j: usize, normalized: f64) -> f64 {
        let (lo, hi) = self.feature_ranges[j];
        lo + (normalized + 1.0) * (hi - lo) / 2.0
    }

    pub fn zscore(&self, raw: f64) -> f64 {
        (raw - self.y_mean) / self.y_std
    }

    pub fn un_zscore(&self, z: f64) -> f64 {
        z * self.y_std + self.y_mean
    }
}

/// Normalized inputs and targets with disjoint, exhaustive split indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
    pub transforms: Transforms,
    pub provenance: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    transforms: Transforms,
    train: Vec<usize>,
    test: Vec<usize>,
    val: Vec<usize>,
    provenance: String,
    seed: u64,
    columns: Vec<String>,
}

impl Dataset {
    fn select(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.x.ncols();
        let x = DMatrix::from_fn(idx.len(), d, |i, j| self.x[(idx[i], j)]);
        let y = DVector::from_fn(idx.len(), |i, _| self.y[idx[i]]);
        (x, y)
    }

    pub fn train_xy(&self) -> (DMatrix<f64>, DVector<f64>) {
        self.select(&self.train)
    }

    pub fn test_xy(&self) -> (DMatrix<f64>, DVector<f64>) {
        self.select(&self.test)
    }

    pub fn val_xy(&self) -> (DMatrix<f64>, DVector<f64>) {
        self.select(&self.val)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Persist as a directory `{data.csv, meta.json}`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut csv = String::new();
        let cols: Vec<String> = (0..self.dim())
            .map(|j| format!("x{j}"))
            .chain(std::iter::once("y".to_string()))
            .collect();
        csv.push_str(&cols.join(","));
        csv.push('\n');
        for i in 0..self.n() {
            for j in 0..self.dim() {
                csv.push_str(&format!("{},", self.x[(i, j)]));
            }
            csv.push_str(&format!("{}\n", self.y[i]));
        }
        std::fs::write(dir.join("data.csv"), csv)?;
        let meta = DatasetMeta {
            transforms: self.transforms.clone(),
            train: self.train.clone(),
            test: self.test.clone(),
            val: self.val.clone(),
            provenance: self.provenance.clone(),
            seed: self.seed,
            columns: cols,
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta: DatasetMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        let raw = load_csv(&dir.join("data.csv"), "y")?;
        Ok(Dataset {
            x: raw.x,
            y: raw.y,
            train: meta.train,
            test: meta.test,
            val: meta.val,
            transforms: meta.transforms,
            provenance: meta.provenance,
            seed: meta.seed,
        })
    }
}

/// Parse a rectangular numeric CSV with a header row. `target` selects the
/// target column by name or by zero-based index.
pub fn load_csv(path: &Path, target: &str) -> Result<RawData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::data(format!("bad header: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if headers.is_empty() {
        return Err(Error::data("empty header row"));
    }
    let target_idx = match headers.iter().position(|h| h == target) {
        Some(i) => i,
        None => target
            .parse::<usize>()
            .ok()
            .filter(|&i| i < headers.len())
            .ok_or_else(|| {
                Error::data(format!(
                    "target column '{target}' not found among {headers:?}"
                ))
            })?,
    };
    let width = headers.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(format!("row {}: {e}", row_idx + 1)))?;
        if record.len() != width {
            return Err(Error::data(format!(
                "row {} has {} fields, expected {width}",
                row_idx + 1,
                record.len()
            )));
        }
        let mut row = Vec::with_capacity(width);
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::data(format!(
                    "row {} column '{}' is not numeric: '{field}'",
                    row_idx + 1,
                    headers[col]
                ))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data("no data rows (header-only file)"));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, width - 1, |i, j| {
        let col = if j < target_idx { j } else { j + 1 };
        rows[i][col]
    });
    let y = DVector::from_fn(n, |i, _| rows[i][target_idx]);
    let feature_names = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    Ok(RawData {
        x,
        y,
        feature_names,
        target_name: headers[target_idx].clone(),
    })
}

/// Default split fractions: 75% train, 15% test, 10% validation.
pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.75, 0.15, 0.10);
/// Training subsample cap.
pub const DEFAULT_MAX_TRAIN: usize = 1000;

/// Shuffle, split, cap the training subsample, then fit normalization on the
/// training split only and apply it everywhere.
pub fn prepare(
    raw: &RawData,
    fractions: (f64, f64, f64),
    max_train: usize,
    seed: u64,
    provenance: &str,
) -> Result<Dataset> {
    let (f_train, f_test, f_val) = fractions;
    if !(f_train >= 0.0 && f_test >= 0.0 && f_val >= 0.0)
        || ((f_train + f_test + f_val) - 1.0).abs() > 1e-9
    {
        return Err(Error::domain("split fractions must be nonnegative and sum to 1"));
    }
    let n = raw.x.nrows();
    if n < 2 {
        return Err(Error::data("need at least 2 rows"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_train_full = (f_train * n as f64).floor() as usize;
    let n_test = (f_test * n as f64).floor() as usize;
    let n_train = n_train_full.min(max_train);
    let train: Vec<usize> = idx[..n_train].to_vec();
    // Rows dropped by the subsample cap stay out of every split's statistics
    // but remain in the stored matrix; exhaustiveness is over retained rows.
    let test: Vec<usize> = idx[n_train_full..n_train_full + n_test].to_vec();
    let val: Vec<usize> = idx[n_train_full + n_test..].to_vec();
    if train.is_empty() {
        return Err(Error::data("training split is empty"));
    }

    // Fit transforms on the training split.
    let d = raw.x.ncols();
    let mut feature_ranges = Vec::with_capacity(d);
    for j in 0..d {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in &train {
            lo = lo.min(raw.x[(i, j)]);
            hi = hi.max(raw.x[(i, j)]);
        }
        feature_ranges.push((lo, hi));
    }
    let y_mean = train.iter().map(|&i| raw.y[i]).sum::<f64>() / n_train as f64;
    let y_var = train
        .iter()
        .map(|&i| (raw.y[i] - y_mean) * (raw.y[i] - y_mean))
        .sum::<f64>()
        / n_train as f64;
    let y_std = if y_var > 0.0 { y_var.sqrt() } else { 1.0 };
    let transforms = Transforms {
        feature_ranges,
        y_mean,
        y_std,
    };

    let x = DMatrix::from_fn(n, d, |i, j| transforms.normalize_feature(j, raw.x[(i, j)]));
    let y = DVector::from_fn(n, |i, _| transforms.zscore(raw.y[i]));
    Ok(Dataset {
        x,
        y,
        train,
        test,
        val,
        transforms,
        provenance: provenance.to_string(),
        seed,
    })
}

/// Noisy step dataset: `x ~ U[-1,1]`, `y = ±0.5 + N(0, sigma²)`, the step
/// sitting at `x = 0` (ties map to the upper level).
pub fn synth_step(n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::domain("synth_step: need n >= 2"));
    }
    if sigma < 0.0 {
        return Err(Error::domain("synth_step: sigma must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, 0));
    let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let y = DVector::from_fn(n, |i, _| {
        let level = if x[(i, 0)] >= 0.0 { 0.5 } else { -0.5 };
        level + sigma * rng.sample::<f64, _>(StandardNormal)
    });
    let raw = RawData {
        x,
        y,
        feature_names: vec!["x0".into()],
        target_name: "y".into(),
    };
    prepare(
        &raw,
        DEFAULT_FRACTIONS,
        DEFAULT_MAX_TRAIN,
        crate::seed::derive(seed, 1),
        "synth_step",
    )
}

/// Sample targets from a deep GP prior at given inputs and add observation
/// noise; split half train / half test.
pub fn synth_dgp_at(
    arch: &DeepGpArchitecture,
    x: &DMatrix<f64>,
    seed: u64,
) -> Result<Dataset> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::domain("synth_dgp: need n >= 2"));
    }
    let f = deepgp::sample_prior(arch, x, crate::seed::derive(seed, 10))?.final_values();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, 11));
    let sd = arch.noise().sqrt();
    let y = DVector::from_fn(n, |i, _| f[i] + sd * rng.sample::<f64, _>(StandardNormal));
    let raw = RawData {
        x: x.clone(),
        y,
        feature_names: (0..x.ncols()).map(|j| format!("x{j}")).collect(),
        target_name: "y".into(),
    };
    prepare(
        &raw,
        (0.5, 0.5, 0.0),
        DEFAULT_MAX_TRAIN,
        crate::seed::derive(seed, 12),
        "synth_dgp",
    )
}

/// Generate inputs uniformly on `[-1,1]^d` and targets from the architecture's
/// prior plus observation noise.
pub fn synth_dgp(arch: &DeepGpArchitecture, n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if d != arch.input_dim() {
        return Err(Error::shape(format!(
            "synth_dgp: d = {d} but architecture expects {}",
            arch.input_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, 9));
    let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    synth_dgp_at(arch, &x, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deepgp::two_layer_add_rbf;
    use crate::kernels;
    use approx::assert_relative_eq;

    fn toy_raw(n: usize, seed: u64) -> RawData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 3, |_, j| rng.random::<f64>() * (j + 1) as f64 + j as f64);
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.5 + 1.0);
        RawData {
            x,
            y,
            feature_names: vec!["a".into(), "b".into(), "c".into()],
            target_name: "y".into(),
        }
    }

    #[test]
    fn splits_match_paper_fractions() {
        let raw = toy_raw(100, 1);
        let ds = prepare(&raw, DEFAULT_FRACTIONS, DEFAULT_MAX_TRAIN, 7, "toy").unwrap();
        assert_eq!(ds.train.len(), 75);
        assert_eq!(ds.test.len(), 15);
        assert_eq!(ds.val.len(), 10);
        // Disjoint and exhaustive.
        let mut all: Vec<usize> = ds
            .train
            .iter()
            .chain(&ds.test)
            .chain(&ds.val)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn train_split_is_capped() {
        let raw = toy_raw(10_000, 2);
        let ds = prepare(&raw, DEFAULT_FRACTIONS, DEFAULT_MAX_TRAIN, 7, "toy").unwrap();
        assert_eq!(ds.train.len(), 1000);
        assert_eq!(ds.test.len(), 1500);
        assert_eq!(ds.val.len(), 1000);
    }

    #[test]
    fn normalization_invariants_hold_on_train_split() {
        let raw = toy_raw(200, 3);
        let ds = prepare(&raw, DEFAULT_FRACTIONS, DEFAULT_MAX_TRAIN, 11, "toy").unwrap();
        let (x_train, y_train) = ds.train_xy();
        for v in x_train.iter() {
            assert!(*v >= -1.0 - 1e-12 && *v <= 1.0 + 1e-12);
        }
        let n = y_train.len() as f64;
        let mean = y_train.iter().sum::<f64>() / n;
        let std = (y_train.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-10, "train mean {mean}");
        assert!((std - 1.0).abs() < 1e-10, "train std {std}");
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let mut raw = toy_raw(50, 4);
        for i in 0..50 {
            raw.x[(i, 1)] = 3.25;
        }
        let ds = prepare(&raw, DEFAULT_FRACTIONS, DEFAULT_MAX_TRAIN, 5, "toy").unwrap();
        for i in 0..50 {
            assert_eq!(ds.x[(i, 1)], 0.0);
        }
    }

    #[test]
    fn normalization_round_trips() {
        let raw = toy_raw(80, 6);
        let ds = prepare(&raw, DEFAULT_FRACTIONS, DEFAULT_MAX_TRAIN, 13, "toy").unwrap();
        for i in 0..80 {
            for j in 0..3 {
                let back = ds.transforms.denormalize_feature(j, ds.x[(i, j)]);
                assert_relative_eq!(back, raw.x[(i, j)], epsilon = 1e-12);
            }
            let back = ds.transforms.un_zscore(ds.y[i]);
            assert_relative_eq!(back, raw.y[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn shuffles_are_seed_deterministic_and_seed_sensitive() {
        let raw = toy_raw(60, 8);
        let a = prepare(&raw, DEFAULT_FRACTIONS, DEFAULT_MAX_TRAIN, 3, "toy").unwrap();
        let b = prepare(&raw, DEFAULT_FRACTIONS, DEFAULT_MAX_TRAIN, 3, "toy").unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        // Distinct seeds give distinct shuffles (probability check).
        let mut distinct = 0;
        for seed in 0..1000u64 {
            let c = prepare(&raw, DEFAULT_FRACTIONS, DEFAULT_MAX_TRAIN, seed, "toy").unwrap();
            if c.train != a.train {
                distinct += 1;
            }
        }
        assert!(distinct >= 998, "only {distinct}/1000 shuffles differed");
    }

    #[test]
    fn csv_loading_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "a,b\n1.0,2.0\n3.0,4.0\n5.5,6.25\n").unwrap();
        let raw = load_csv(&path, "b").unwrap();
        assert_eq!(raw.x.nrows(), 3);
        assert_eq!(raw.x.ncols(), 1);
        assert_eq!(raw.y.as_slice(), &[2.0, 4.0, 6.25]);
        // Target by index.
        let raw = load_csv(&path, "1").unwrap();
        assert_eq!(raw.y.as_slice(), &[2.0, 4.0, 6.25]);

        std::fs::write(&path, "a,b\n").unwrap();
        assert!(load_csv(&path, "b").unwrap_err().to_string().contains("header-only"));

        std::fs::write(&path, "a,b\n1.0,2.0\n3.0\n").unwrap();
        assert!(load_csv(&path, "b").is_err());

        std::fs::write(&path, "a,b\n1.0,2.0\n3.0,oops\n").unwrap();
        let err = load_csv(&path, "b").unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");

        assert!(load_csv(&dir.path().join("missing.csv"), "b").is_err());
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let raw = toy_raw(40, 9);
        let ds = prepare(&raw, DEFAULT_FRACTIONS, DEFAULT_MAX_TRAIN, 17, "toy").unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.x, back.x);
        assert_eq!(ds.y, back.y);
        assert_eq!(ds.train, back.train);
        assert_eq!(ds.transforms, back.transforms);
    }

    #[test]
    fn step_dataset_properties() {
        // Noise-free levels are exactly ±0.5 before z-scoring.
        let ds = synth_step(100, 0.0, 3).unwrap();
        for i in 0..100 {
            let raw_y = ds.transforms.un_zscore(ds.y[i]);
            assert!(
                (raw_y - 0.5).abs() < 1e-12 || (raw_y + 0.5).abs() < 1e-12,
                "raw y {raw_y}"
            );
            // Tie rule: x = 0 belongs to the upper level. Raw x recovers sign.
            let raw_x = ds.transforms.denormalize_feature(0, ds.x[(i, 0)]);
            if raw_x >= 0.0 {
                assert!(raw_y > 0.0);
            } else {
                assert!(raw_y < 0.0);
            }
        }
        // Raw variance approaches 0.25 + sigma^2.
        let sigma = 0.3;
        let ds = synth_step(4000, sigma, 5).unwrap();
        let raw: Vec<f64> = (0..ds.n()).map(|i| ds.transforms.un_zscore(ds.y[i])).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / raw.len() as f64;
        let expect = 0.25 + sigma * sigma;
        assert!((var - expect).abs() < 0.03, "variance {var} vs {expect}");
    }

    #[test]
    fn dgp_dataset_matches_prior_gram() {
        // Covariance of generated targets over many seeds at fixed inputs
        // matches the architecture's prior Gram plus noise.
        let arch = two_layer_add_rbf(2, 2, 1.0, 1.0, 1.0, 1.0, 0.04).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = DMatrix::from_fn(3, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let rows = kernels::matrix_rows(&x);
        let draws = 40_000usize;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        let mut acc_sq = DMatrix::<f64>::zeros(3, 3);
        for s in 0..draws {
            let ds = synth_dgp_at(&arch, &x, s as u64).unwrap();
            // Undo the z-scoring to recover raw targets.
            let raw = DVector::from_fn(3, |i, _| ds.transforms.un_zscore(ds.y[i]));
            for i in 0..3 {
                for j in 0..3 {
                    let v = raw[i] * raw[j];
                    acc[(i, j)] += v;
                    acc_sq[(i, j)] += v * v;
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let mean = acc[(i, j)] / draws as f64;
                let var = acc_sq[(i, j)] / draws as f64 - mean * mean;
                let se = (var / draws as f64).sqrt();
                let mut expect =
                    deepgp::limiting_covariance(&arch, &rows[i], &rows[j]).unwrap();
                if i == j {
                    expect += arch.noise() + arch.jitter();
                }
                assert!(
                    (mean - expect).abs() <= 3.5 * se,
                    "({i},{j}): {mean} vs {expect} (se {se})"
                );
            }
        }
    }

    #[test]
    fn dgp_dataset_determinism_and_tiny_split() {
        let arch = two_layer_add_rbf(4, 2, 1.0, 1.0, 1.0, 1.0, 0.01).unwrap();
        let a = synth_dgp(&arch, 10, 4, 42).unwrap();
        let b = synth_dgp(&arch, 10, 4, 42).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        let tiny = synth_dgp(&arch, 2, 4, 1).unwrap();
        assert_eq!(tiny.train.len(), 1);
        assert_eq!(tiny.test.len(), 1);
    }
}
