//! Ordinal grouping of a continuous label range.
//!
//! The label interval `[y_min, y_max]` is cut into `num_groups` contiguous
//! bins of equal width. Bins are half-open except the last, which also owns
//! `y_max`, so every in-range label has exactly one group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Density floor used when inverting smoothed counts.
pub const LDS_DENSITY_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingScheme {
    y_min: f64,
    y_max: f64,
    num_groups: usize,
    width: f64,
}

impl GroupingScheme {
    pub fn new(y_min: f64, y_max: f64, num_groups: usize) -> Result<Self> {
        if !(y_min < y_max) || !y_min.is_finite() || !y_max.is_finite() {
            return Err(Error::InvalidRange { y_min, y_max });
        }
        if num_groups < 2 {
            return Err(Error::InvalidGroups(num_groups));
        }
        Ok(GroupingScheme {
            y_min,
            y_max,
            num_groups,
            width: (y_max - y_min) / num_groups as f64,
        })
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn range(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, y: f64) -> bool {
        y >= self.y_min && y <= self.y_max
    }

    pub fn group_of(&self, y: f64) -> Result<usize> {
        if !self.contains(y) {
            return Err(Error::OutOfRange {
                y,
                y_min: self.y_min,
                y_max: self.y_max,
            });
        }
        Ok(self.bin_of(y, self.num_groups))
    }

    /// Bin index of an in-range label when the range is cut into `bins`
    /// equal pieces.
    pub(crate) fn bin_of(&self, y: f64, bins: usize) -> usize {
        let w = (self.y_max - self.y_min) / bins as f64;
        let raw = ((y - self.y_min) / w).floor();
        (raw.max(0.0) as usize).min(bins - 1)
    }

    /// Center of group `g`.
    pub fn midpoint(&self, g: usize) -> f64 {
        self.y_min + (g as f64 + 0.5) * self.width
    }

    /// Group of a label after clamping it into the range. Used for
    /// predictions, which are not constrained to the label interval.
    pub fn group_of_clamped(&self, y: f64) -> usize {
        let y = if y.is_nan() {
            self.y_min
        } else {
            y.clamp(self.y_min, self.y_max)
        };
        self.bin_of(y, self.num_groups)
    }
}

pub fn make_grouping(y_min: f64, y_max: f64, num_groups: usize) -> Result<GroupingScheme> {
    GroupingScheme::new(y_min, y_max, num_groups)
}

pub fn group_distance(g1: usize, g2: usize) -> usize {
    g1.abs_diff(g2)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupHistogram {
    pub counts: Vec<usize>,
}

impl GroupHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

pub fn group_counts(labels: &[f64], scheme: &GroupingScheme) -> Result<GroupHistogram> {
    fine_bin_counts(labels, scheme, 1)
}

/// Histogram over `num_groups * intra_bins` equal-width label bins.
pub fn fine_bin_counts(
    labels: &[f64],
    scheme: &GroupingScheme,
    intra_bins: usize,
) -> Result<GroupHistogram> {
    let bins = scheme.num_groups * intra_bins.max(1);
    let mut counts = vec![0usize; bins];
    for &y in labels {
        scheme.group_of(y)?;
        counts[scheme.bin_of(y, bins)] += 1;
    }
    Ok(GroupHistogram { counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotThresholds {
    pub many_min: usize,
    pub few_max: usize,
}

impl Default for ShotThresholds {
    fn default() -> Self {
        ShotThresholds {
            many_min: 100,
            few_max: 20,
        }
    }
}

impl ShotThresholds {
    pub fn new(many_min: usize, few_max: usize) -> Result<Self> {
        if few_max == 0 || few_max >= many_min {
            return Err(Error::Config(format!(
                "shot thresholds need 0 < few_max ({few_max}) < many_min ({many_min})"
            )));
        }
        Ok(ShotThresholds { many_min, few_max })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shot {
    Many,
    Median,
    Few,
}

impl Shot {
    pub const ALL: [Shot; 3] = [Shot::Many, Shot::Median, Shot::Few];

    pub fn name(self) -> &'static str {
        match self {
            Shot::Many => "many",
            Shot::Median => "median",
            Shot::Few => "few",
        }
    }
}

pub fn shot_categories(counts: &GroupHistogram, thresholds: ShotThresholds) -> Vec<Shot> {
    counts
        .counts
        .iter()
        .map(|&c| {
            if c > thresholds.many_min {
                Shot::Many
            } else if c < thresholds.few_max {
                Shot::Few
            } else {
                Shot::Median
            }
        })
        .collect()
}

/// Normalized symmetric Gaussian kernel of length `2 * radius + 1`.
pub fn gaussian_kernel(radius: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("LDS sigma must be > 0, got {sigma}")));
    }
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Label-distribution-smoothing weights for each histogram bin, using a
/// Gaussian kernel.
pub fn lds_weights(counts: &GroupHistogram, kernel_radius: usize, sigma: f64) -> Result<Vec<f64>> {
    let kernel = gaussian_kernel(kernel_radius, sigma)?;
    lds_weights_with_kernel(counts, &kernel)
}

/// Smooths `counts` with an odd-length kernel, inverts the smoothed density and rescales the weights to mean 1.
pub fn lds_weights_with_kernel(counts: &GroupHistogram, kernel: &[f64]) -> Result<Vec<f64>> {
    if kernel.len().is_multiple_of(2) {
        return Err(Error::Config("LDS kernel length must be odd".into()));
    }
    let smoothed = smooth_counts(&counts.counts, kernel);
    if smoothed.iter().all(|&s| s <= 0.0) {
        return Err(Error::DegenerateDensity);
    }
    let raw: Vec<f64> = smoothed
        .iter()
        .map(|&s| 1.0 / s.max(LDS_DENSITY_EPS))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// Convolves `counts` with an odd-length kernel. Out-of-range taps mirror
/// back into the histogram (edge bin repeated), so a flat histogram stays flat.
pub fn smooth_counts(counts: &[usize], kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let n = counts.len() as isize;
    let mirror = |mut j: isize| {
        while !(0..n).contains(&j) {
            j = if j < 0 { -j - 1 } else { 2 * n - j - 1 };
        }
        j as usize
    };
    (0..n)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| w * counts[mirror(i + k as isize - r)] as f64)
                .sum()
        })
        .collect()
}

/// Per-sample LDS weights: each label takes the weight of its fine bin.
pub fn lds_sample_weights(
    labels: &[f64],
    scheme: &GroupingScheme,
    intra_bins: usize,
    kernel_radius: usize,
    sigma: f64,
) -> Result<Vec<f64>> {
    let bins = scheme.num_groups * intra_bins.max(1);
    let hist = fine_bin_counts(labels, scheme, intra_bins)?;
    let weights = lds_weights(&hist, kernel_radius, sigma)?;
    Ok(labels
        .iter()
        .map(|&y| weights[scheme.bin_of(y, bins)])
        .collect())
}
