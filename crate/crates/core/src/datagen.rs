//! Synthetic imbalanced regression data.
//!
//! Labels are drawn on `[y_min, y_max]`: the training split follows an
//! exponentially tilted density (head-heavy), validation and test are uniform.
//! Features are a smooth sinusoidal embedding of the normalized label plus
//! Gaussian noise, so nearby labels have nearby features.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub y_min: f64,
    pub y_max: f64,
    pub skew_rate: f64,
    pub feature_dim: usize,
    pub num_fourier: usize,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            y_min: 0.0,
            y_max: 100.0,
            skew_rate: 4.0,
            feature_dim: 16,
            num_fourier: 16,
            noise_sigma: 0.05,
            n_train: 2000,
            n_val: 1000,
            n_test: 1000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.y_min < self.y_max) || !self.y_min.is_finite() || !self.y_max.is_finite() {
            return Err(Error::InvalidRange {
                y_min: self.y_min,
                y_max: self.y_max,
            });
        }
        if !(self.skew_rate >= 0.0) || !self.skew_rate.is_finite() {
            return Err(Error::Config(format!("skew_rate must be >= 0, got {}", self.skew_rate)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.feature_dim == 0 || self.num_fourier == 0 {
            return Err(Error::Config(
                "feature_dim and num_fourier must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("plain struct serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Label-to-feature map. Component `m` contributes
/// `amp[m] * sin(freq[m] * u + phase[m])` to feature `m % feature_dim`,
/// where `u` is the label normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub feature_dim: usize,
    pub amps: Vec<f64>,
    pub freqs: Vec<f64>,
    pub phases: Vec<f64>,
}

pub const MIN_FREQ: f64 = 0.5;
pub const MAX_FREQ: f64 = 4.0 * std::f64::consts::PI;

impl FeatureMap {
    fn draw(feature_dim: usize, num_fourier: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut amps = Vec::with_capacity(num_fourier);
        let mut freqs = Vec::with_capacity(num_fourier);
        let mut phases = Vec::with_capacity(num_fourier);
        for _ in 0..num_fourier {
            amps.push(rng.gen_range(0.5..1.5));
            freqs.push(rng.gen_range(MIN_FREQ..=MAX_FREQ));
            phases.push(rng.gen_range(0.0..std::f64::consts::TAU));
        }
        FeatureMap {
            feature_dim,
            amps,
            freqs,
            phases,
        }
    }

    pub fn features(&self, u: f64) -> Vec<f64> {
        let mut x = vec![0.0; self.feature_dim];
        for m in 0..self.amps.len() {
            x[m % self.feature_dim] += self.amps[m] * (self.freqs[m] * u + self.phases[m]).sin();
        }
        x
    }

    /// Lipschitz constant of `u -> features(u)` in the Euclidean norm.
    pub fn lipschitz(&self) -> f64 {
        let mut per_feature = vec![0.0; self.feature_dim];
        for m in 0..self.amps.len() {
            per_feature[m % self.feature_dim] += (self.amps[m] * self.freqs[m]).abs();
        }
        per_feature.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<f64>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Dataset { features, labels })
    }

    pub fn empty(feature_dim: usize) -> Self {
        Dataset {
            features: Matrix::zeros(0, feature_dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Inverse CDF of the density `∝ exp(-rate * u)` on `[0, 1]`.
pub fn tilted_quantile(p: f64, rate: f64) -> f64 {
    if rate == 0.0 {
        return p;
    }
    (-(p * (-rate).exp_m1()).ln_1p() / rate).clamp(0.0, 1.0)
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub feature_map: FeatureMap,
}

pub fn generate(config: &SynthConfig) -> Result<Splits> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let map = FeatureMap::draw(config.feature_dim, config.num_fourier, &mut rng);
    let span = config.y_max - config.y_min;

    let sample = |n: usize, rate: f64, rng: &mut ChaCha8Rng| {
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * config.feature_dim);
        for _ in 0..n {
            let u = tilted_quantile(rng.gen::<f64>(), rate);
            labels.push((config.y_min + u * span).min(config.y_max));
            for v in map.features(u) {
                let eta: f64 = rng.sample(StandardNormal);
                data.push(v + config.noise_sigma * eta);
            }
        }
        Dataset {
            features: Matrix::from_vec(n, config.feature_dim, data).expect("sized by construction"),
            labels,
        }
    };
    let train = sample(config.n_train, config.skew_rate, &mut rng);
    let val = sample(config.n_val, 0.0, &mut rng);
    let test = sample(config.n_test, 0.0, &mut rng);
    Ok(Splits {
        train,
        val,
        test,
        feature_map: map,
    })
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let csv_err = |source| Error::Csv {
        path: path.into(),
        source,
    };
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header: Vec<String> = (0..dataset.feature_dim()).map(|k| format!("x{k}")).collect();
        header.push("y".into());
        w.write_record(&header).map_err(csv_err)?;
        let mut fields = Vec::with_capacity(header.len());
        for (row, &y) in dataset.features.iter_rows().zip(&dataset.labels) {
            fields.clear();
            fields.extend(row.iter().map(|v| format!("{v:.16e}")));
            fields.push(format!("{y:.16e}"));
            w.write_record(&fields).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let malformed = |line: u64, reason: String| Error::MalformedRow {
        path: path.into(),
        line,
        reason,
    };
    let header = r
        .headers()
        .map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })?
        .clone();
    let cols = header.len();
    let expected: Vec<String> = (0..cols.saturating_sub(1))
        .map(|k| format!("x{k}"))
        .chain(std::iter::once("y".to_string()))
        .collect();
    if cols < 2 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(malformed(1, "header must be x0,...,x{d-1},y".into()));
    }
    let dim = cols - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols {
            return Err(malformed(line, format!("expected {cols} columns, found {}", rec.len())));
        }
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| malformed(line, format!("column {k}: '{field}' is not a number")))?;
            if k == dim {
                labels.push(v);
            } else {
                data.push(v);
            }
        }
    }
    Dataset::new(Matrix::from_vec(labels.len(), dim, data)?, labels)
}
