//! Single training runs summarized for comparison tables, plus seed-median
//! aggregation and run-level parallelism.

use serde::Serialize;

use crate::datagen::Dataset;
use crate::error::Result;
use crate::eval::{gm, group_diagnostics, mae, predict_dataset, report_from_predictions, MetricsReport, GM_EPS};
use crate::grouping::{group_counts, ShotThresholds};
use crate::training::{train, Model, TrainConfig, TrainHistory};

/// Environment variable capping how many runs execute at once.
pub const THREADS_ENV: &str = "GROUPDIR_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub num_groups: usize,
    pub group_acc: f64,
    pub mean_absdiff: f64,
    pub absdiff_histogram: Vec<usize>,
    pub mae_cls: f64,
    pub mae_gt: f64,
    pub gm_cls: f64,
    pub gm_gt: f64,
}

pub struct RunOutput {
    pub model: Model,
    pub history: TrainHistory,
    pub report: MetricsReport,
    pub summary: RunSummary,
}

pub fn summarize(model: &Model, seed: u64, test: &Dataset) -> Result<RunSummary> {
    let p = predict_dataset(model, test)?;
    let diag = group_diagnostics(&p.cls_groups, &p.true_groups, model.scheme.num_groups())?;
    Ok(RunSummary {
        seed,
        num_groups: model.scheme.num_groups(),
        group_acc: diag.accuracy,
        mean_absdiff: diag.mean_absdiff,
        absdiff_histogram: diag.absdiff_histogram,
        mae_cls: mae(&p.cls, &test.labels)?,
        mae_gt: mae(&p.gt, &test.labels)?,
        gm_cls: gm(&p.cls, &test.labels, GM_EPS)?,
        gm_gt: gm(&p.gt, &test.labels, GM_EPS)?,
    })
}

/// Trains once and evaluates on `test`.
pub fn run_once(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    thresholds: ShotThresholds,
) -> Result<RunOutput> {
    let out = train(config, train_set, val_set)?;
    let counts = group_counts(&train_set.labels, &out.model.scheme)?;
    let p = predict_dataset(&out.model, test_set)?;
    let report = report_from_predictions(
        &p.cls,
        &p.cls_groups,
        &test_set.labels,
        &out.model.scheme,
        thresholds,
        &counts,
    )?;
    let summary = summarize(&out.model, config.seed, test_set)?;
    Ok(RunOutput {
        model: out.model,
        history: out.history,
        report,
        summary,
    })
}

/// Median; the mean of the two middle values for even lengths. NaN for an
/// empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Number of worker threads for independent runs.
pub fn run_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `jobs` on a bounded pool; output order follows input order.
pub fn run_parallel<J, T, F>(jobs: Vec<J>, f: F) -> Result<Vec<T>>
where
    J: Send,
    T: Send,
    F: Fn(J) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(run_threads())
        .build()
        .expect("thread pool");
    pool.install(|| jobs.into_par_iter().map(&f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn parallel_preserves_order() {
        let out = run_parallel((0..50).collect(), |i: i32| Ok(i * 2)).unwrap();
        assert_eq!(out, (0..50).map(|i| i * 2).collect::<Vec<_>>());
    }
}
