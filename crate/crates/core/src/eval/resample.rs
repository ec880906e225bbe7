//! Bootstrap resampling of the probe training set.

use crate::error::{Error, Result};
use crate::tensor::RngStream;

use super::metrics::mauc;
use super::probe::{fit_probe, ProbeConfig, ProbeKind, Samples};

/// mAUC on the fixed test split over bootstrap refits.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleReport {
    pub mean: f64,
    /// Sample standard deviation over repeats.
    pub std: f64,
    pub runs: Vec<f64>,
    /// Per-class AUC averaged over the repeats in which the class was scored.
    pub per_class: Vec<Option<f64>>,
}

const MAX_REDRAWS: usize = 1000;

fn bootstrap(train: &Samples, rng: &mut RngStream) -> Result<Samples> {
    let n = train.len();
    for _ in 0..MAX_REDRAWS {
        let rows: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
        let s = train.subset(&rows);
        if s.distinct_classes() >= 2 {
            return Ok(s);
        }
    }
    Err(Error::invalid("bootstrap resamples keep collapsing to a single class"))
}

/// Refits the probe on `repeats` bootstrap resamples of `train` (same size,
/// with replacement) and scores each on `test`. Repeat `r` draws from
/// `rng.split(r)`; a resample with a single class is redrawn.
pub fn resample_eval(
    kind: ProbeKind,
    train: &Samples,
    val: &Samples,
    test: &Samples,
    cfg: &ProbeConfig,
    repeats: usize,
    rng: &RngStream,
) -> Result<ResampleReport> {
    if repeats < 2 {
        return Err(Error::invalid(format!("resample_eval needs at least 2 repeats, got {repeats}")));
    }
    if train.distinct_classes() < 2 {
        return Err(Error::invalid("probe training set has a single class"));
    }
    let mut runs = Vec::with_capacity(repeats);
    let mut class_sums: Vec<(f64, usize)> = Vec::new();
    for r in 0..repeats {
        let mut stream = rng.split(r as u64);
        let sample = bootstrap(train, &mut stream)?;
        let probe = fit_probe(kind, &sample, val, cfg)?;
        let scores = probe.scores(test);
        let report = mauc(&scores, &test.labels)?;
        if class_sums.len() < report.per_class.len() {
            class_sums.resize(report.per_class.len(), (0.0, 0));
        }
        for (acc, a) in class_sums.iter_mut().zip(&report.per_class) {
            if let Some(a) = a {
                acc.0 += a;
                acc.1 += 1;
            }
        }
        runs.push(report.mean);
    }
    let mean = runs.iter().sum::<f64>() / repeats as f64;
    let var = runs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
    Ok(ResampleReport {
        mean,
        std: var.sqrt(),
        runs,
        per_class: class_sums
            .into_iter()
            .map(|(s, c)| (c > 0).then(|| s / c as f64))
            .collect(),
    })
}
