//! Regression and group-prediction metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::grouping::{shot_categories, GroupHistogram, GroupingScheme, Shot, ShotThresholds};
use crate::training::Model;

/// Floor applied to absolute errors before taking logs in [`gm`].
pub const GM_EPS: f64 = 1e-6;

fn check_pair(preds: &[f64], targets: &[f64], what: &'static str) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    Ok(())
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets, "mae")?;
    Ok(preds.iter().zip(targets).map(|(p, y)| (y - p).abs()).sum::<f64>() / preds.len() as f64)
}

/// Geometric mean of `max(|y - y_hat|, eps)`, accumulated in log space.
pub fn gm(preds: &[f64], targets: &[f64], eps: f64) -> Result<f64> {
    check_pair(preds, targets, "gm")?;
    let n = preds.len() as f64;
    let (logs, sum) = preds.iter().zip(targets).fold((0.0, 0.0), |(l, s), (p, y)| {
        let e = (y - p).abs().max(eps);
        (l + e.ln(), s + e)
    });
    // exp(ln e) can land an ulp above e; the arithmetic mean of the same
    // floored errors is a true upper bound, so clamping only removes rounding.
    Ok((logs / n).exp().min(sum / n))
}

/// Unweighted mean over non-empty bins of the per-bin MAE. `bins[i]` is the
/// bin index of sample `i`.
pub fn bmae_binned(preds: &[f64], targets: &[f64], bins: &[usize]) -> Result<f64> {
    check_pair(preds, targets, "bmae")?;
    if bins.len() != preds.len() {
        return Err(Error::ShapeMismatch("one bin index per sample is required".into()));
    }
    let mut per_bin: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for ((p, y), &b) in preds.iter().zip(targets).zip(bins) {
        let e = per_bin.entry(b).or_default();
        e.0 += (y - p).abs();
        e.1 += 1;
    }
    Ok(per_bin.values().map(|(s, n)| s / *n as f64).sum::<f64>() / per_bin.len() as f64)
}

/// Balanced MAE over `num_bins` equal-width label bins of the scheme's range.
pub fn bmae(preds: &[f64], targets: &[f64], scheme: &GroupingScheme, num_bins: usize) -> Result<f64> {
    check_pair(preds, targets, "bmae")?;
    let bins = targets
        .iter()
        .map(|&y| {
            scheme.group_of(y)?;
            Ok(scheme.bin_of(y, num_bins.max(1)))
        })
        .collect::<Result<Vec<_>>>()?;
    bmae_binned(preds, targets, &bins)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch("pearson inputs differ in length".into()));
    }
    if a.len() < 2 {
        return Err(Error::EmptyInput("pearson needs at least two pairs"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDiagnostics {
    pub accuracy: f64,
    /// Count of samples per `|g_hat - g|`.
    pub absdiff_histogram: Vec<usize>,
    pub mean_absdiff: f64,
    /// Samples per true group (confusion-matrix row sums).
    pub true_counts: Vec<usize>,
    /// Samples per predicted group (confusion-matrix column sums).
    pub pred_counts: Vec<usize>,
}

pub fn group_diagnostics(
    pred_groups: &[usize],
    true_groups: &[usize],
    num_groups: usize,
) -> Result<GroupDiagnostics> {
    if pred_groups.len() != true_groups.len() {
        return Err(Error::ShapeMismatch("group prediction lengths differ".into()));
    }
    let mut hist = vec![0usize; num_groups];
    let mut true_counts = vec![0usize; num_groups];
    let mut pred_counts = vec![0usize; num_groups];
    for (&p, &t) in pred_groups.iter().zip(true_groups) {
        for g in [p, t] {
            if g >= num_groups {
                return Err(Error::InvalidGroup {
                    group: g,
                    num_groups,
                });
            }
        }
        hist[p.abs_diff(t)] += 1;
        true_counts[t] += 1;
        pred_counts[p] += 1;
    }
    let n = pred_groups.len();
    let (accuracy, mean_absdiff) = if n == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let weighted: usize = hist.iter().enumerate().map(|(d, c)| d * c).sum();
        (hist[0] as f64 / n as f64, weighted as f64 / n as f64)
    };
    Ok(GroupDiagnostics {
        accuracy,
        absdiff_histogram: hist,
        mean_absdiff,
        true_counts,
        pred_counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotMetrics {
    pub mae: Option<f64>,
    pub gm: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub gm: f64,
    pub bmae: f64,
    /// `None` when either side has zero variance.
    pub pearson: Option<f64>,
    pub group_accuracy: f64,
    pub absdiff_histogram: Vec<usize>,
    pub per_shot: BTreeMap<String, ShotMetrics>,
}

pub const REPORT_FIELDS: [&str; 7] = [
    "mae",
    "gm",
    "bmae",
    "pearson",
    "group_accuracy",
    "absdiff_histogram",
    "per_shot",
];

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>12}", "metric", "value");
        let _ = writeln!(s, "{:<16}{:>12.4}", "mae", self.mae);
        let _ = writeln!(s, "{:<16}{:>12.4}", "gm", self.gm);
        let _ = writeln!(s, "{:<16}{:>12.4}", "bmae", self.bmae);
        let _ = writeln!(s, "{:<16}{:>12}", "pearson", fmt(self.pearson));
        let _ = writeln!(s, "{:<16}{:>12.4}", "group_accuracy", self.group_accuracy);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<10}{:>8}{:>12}{:>12}", "shot", "count", "mae", "gm");
        for shot in Shot::ALL {
            if let Some(m) = self.per_shot.get(shot.name()) {
                let _ = writeln!(
                    s,
                    "{:<10}{:>8}{:>12}{:>12}",
                    shot.name(),
                    m.count,
                    fmt(m.mae),
                    fmt(m.gm)
                );
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<10}{:>8}", "|dg|", "count");
        for (d, c) in self.absdiff_histogram.iter().enumerate() {
            let _ = writeln!(s, "{d:<10}{c:>8}");
        }
        s
    }
}

/// Computes every metric from predictions. Shot categories come from
/// `train_counts` (one count per group) and are applied to each sample by the
/// group of its true label.
pub fn report_from_predictions(
    preds: &[f64],
    pred_groups: &[usize],
    targets: &[f64],
    scheme: &GroupingScheme,
    thresholds: ShotThresholds,
    train_counts: &GroupHistogram,
) -> Result<MetricsReport> {
    check_pair(preds, targets, "report")?;
    if train_counts.len() != scheme.num_groups() {
        return Err(Error::ShapeMismatch(format!(
            "{} training counts for {} groups",
            train_counts.len(),
            scheme.num_groups()
        )));
    }
    let true_groups = targets
        .iter()
        .map(|&y| scheme.group_of(y))
        .collect::<Result<Vec<_>>>()?;
    let diag = group_diagnostics(pred_groups, &true_groups, scheme.num_groups())?;
    let shots = shot_categories(train_counts, thresholds);

    let mut per_shot = BTreeMap::new();
    for shot in Shot::ALL {
        let idx: Vec<usize> = (0..targets.len()).filter(|&i| shots[true_groups[i]] == shot).collect();
        let p: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
        let t: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
        let metrics = if idx.is_empty() {
            ShotMetrics {
                mae: None,
                gm: None,
                count: 0,
            }
        } else {
            ShotMetrics {
                mae: Some(mae(&p, &t)?),
                gm: Some(gm(&p, &t, GM_EPS)?),
                count: idx.len(),
            }
        };
        per_shot.insert(shot.name().to_string(), metrics);
    }

    Ok(MetricsReport {
        mae: mae(preds, targets)?,
        gm: gm(preds, targets, GM_EPS)?,
        bmae: bmae_binned(preds, targets, &true_groups)?,
        pearson: pearson(preds, targets).ok(),
        group_accuracy: diag.accuracy,
        absdiff_histogram: diag.absdiff_histogram,
        per_shot,
    })
}

/// Classifier-routed and ground-truth-routed predictions over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub cls: Vec<f64>,
    pub cls_groups: Vec<usize>,
    pub gt: Vec<f64>,
    pub true_groups: Vec<usize>,
}

pub fn predict_dataset(model: &Model, data: &Dataset) -> Result<Predictions> {
    let mut out = Predictions {
        cls: Vec::with_capacity(data.len()),
        cls_groups: Vec::with_capacity(data.len()),
        gt: Vec::with_capacity(data.len()),
        true_groups: Vec::with_capacity(data.len()),
    };
    for (x, &y) in data.features.iter_rows().zip(&data.labels) {
        let g = model.scheme.group_of(y)?;
        let (gh, yh) = model.predict(x)?;
        out.cls.push(yh);
        out.cls_groups.push(gh);
        out.gt.push(model.predict_gt_guided(x, g)?);
        out.true_groups.push(g);
    }
    Ok(out)
}

pub fn full_report(
    model: &Model,
    test_set: &Dataset,
    thresholds: ShotThresholds,
    train_counts: &GroupHistogram,
) -> Result<MetricsReport> {
    let p = predict_dataset(model, test_set)?;
    report_from_predictions(
        &p.cls,
        &p.cls_groups,
        &test_set.labels,
        &model.scheme,
        thresholds,
        train_counts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::make_grouping;
    use proptest::prelude::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 5.0]).unwrap(), 1.5);
        assert_eq!(mae(&[4.0, 4.0], &[4.0, 4.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0], &[7.0]).unwrap(), 7.0);
        assert!(matches!(mae(&[], &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn gm_examples() {
        assert!((gm(&[0.0, 0.0], &[1.0, 4.0], GM_EPS).unwrap() - 2.0).abs() < 1e-12);
        assert!((gm(&[0.0, 0.0], &[0.0, 1.0], 1e-6).unwrap() - 1e-3).abs() < 1e-15);
        assert!((gm(&[1.0, 2.0, 3.0], &[1.5, 2.5, 2.5], GM_EPS).unwrap() - 0.5).abs() < 1e-12);
        assert!(gm(&[], &[], GM_EPS).is_err());
        // far below f64 range when multiplied directly
        let p = vec![0.0; 400];
        let t = vec![1e-300; 400];
        assert!(gm(&p, &t, 0.0).unwrap() > 0.0);
    }

    #[test]
    fn bmae_examples() {
        let b = bmae_binned(&[0.0, 0.0, 0.0], &[1.0, 3.0, 2.0], &[0, 0, 1]).unwrap();
        assert_eq!(b, 2.0);
        let s = make_grouping(0.0, 10.0, 2).unwrap();
        let p = [1.0, 2.0, 0.0];
        let t = [1.5, 3.0, 4.0];
        assert_eq!(bmae(&p, &t, &s, 2).unwrap(), mae(&p, &t).unwrap());
        let t = [1.0, 6.0, 2.0, 7.0];
        let p = [0.0, 5.0, 4.0, 7.5];
        assert!((bmae(&p, &t, &s, 2).unwrap() - mae(&p, &t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pearson(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn diagnostics_examples() {
        let d = group_diagnostics(&[0, 1, 1], &[0, 1, 2], 3).unwrap();
        assert!((d.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.absdiff_histogram, vec![2, 1, 0]);
        assert_eq!(d.pred_counts, vec![1, 2, 0]);
        let d = group_diagnostics(&[2, 0], &[2, 0], 4).unwrap();
        assert_eq!((d.accuracy, d.absdiff_histogram.clone()), (1.0, vec![2, 0, 0, 0]));
        let d = group_diagnostics(&[0], &[4], 5).unwrap();
        assert_eq!(d.absdiff_histogram, vec![0, 0, 0, 0, 1]);
        assert!(group_diagnostics(&[5], &[0], 5).is_err());
    }

    #[test]
    fn report_perfect_predictions() {
        let s = make_grouping(0.0, 10.0, 2).unwrap();
        let t = [1.0, 2.0, 7.0, 9.0];
        let g = [0, 0, 1, 1];
        let counts = GroupHistogram { counts: vec![150, 10] };
        let r = report_from_predictions(&t, &g, &t, &s, ShotThresholds::default(), &counts).unwrap();
        assert_eq!(r.mae, 0.0);
        assert!((r.gm - GM_EPS).abs() < 1e-18);
        assert_eq!(r.group_accuracy, 1.0);
        assert_eq!(r.per_shot["many"].count, 2);
        assert_eq!(r.per_shot["few"].count, 2);
        assert_eq!(r.per_shot["median"].mae, None);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = REPORT_FIELDS.to_vec();
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
        assert!(r.to_text().contains("group_accuracy"));
    }

    #[test]
    fn constant_predictions_flag_pearson() {
        let s = make_grouping(0.0, 10.0, 2).unwrap();
        let t = [1.0, 9.0, 4.0, 6.0];
        let p = [5.0; 4];
        let counts = GroupHistogram { counts: vec![5, 5] };
        let r = report_from_predictions(&p, &[1; 4], &t, &s, ShotThresholds::default(), &counts).unwrap();
        assert_eq!(r.pearson, None);
        assert!(r.to_json().contains("\"pearson\": null"));
    }

    proptest! {
        #[test]
        fn gm_never_exceeds_mae(
            pairs in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40)
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(gm(&p, &t, GM_EPS).unwrap() <= mae(&p, &t).unwrap() + 1e-9);
        }

        #[test]
        fn per_shot_recomposes_mae(
            rows in proptest::collection::vec((0.0f64..100.0, -10.0f64..10.0, 0usize..20), 1..80),
            counts in proptest::collection::vec(0usize..300, 20),
        ) {
            let s = make_grouping(0.0, 100.0, 20).unwrap();
            let t: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let p: Vec<f64> = rows.iter().map(|r| r.0 + r.1).collect();
            let g: Vec<usize> = rows.iter().map(|r| r.2).collect();
            let r = report_from_predictions(&p, &g, &t, &s, ShotThresholds::default(), &GroupHistogram { counts }).unwrap();
            let total: usize = r.per_shot.values().map(|m| m.count).sum();
            prop_assert_eq!(total, t.len());
            let weighted: f64 = r.per_shot.values().filter_map(|m| m.mae.map(|v| v * m.count as f64)).sum();
            prop_assert!((weighted / t.len() as f64 - r.mae).abs() < 1e-9);
            prop_assert_eq!(r.group_accuracy, r.absdiff_histogram[0] as f64 / t.len() as f64);
        }
    }
}
