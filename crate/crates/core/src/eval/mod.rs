//! Downstream evaluation: bag pooling, probes, mAUC with bootstrap
//! resampling, and factor readouts on synthetic data.

mod aggregate;
mod disentangle;
mod embed;
mod metrics;
mod probe;
mod resample;

use std::fmt::Write as _;
use std::str::FromStr;

pub use aggregate::{aggregate_bag, build_bags, BagAggregate, BagRecord};
pub use disentangle::{angular_error, circular_mean, disentanglement_probe, DisentanglementReport, Ridge};
pub use embed::embed;
pub use metrics::{auc, mauc, MaucReport};
pub use probe::{
    fit_cyclic_logreg, fit_logreg, fit_probe, CyclicProbe, LinearProbe, Probe, ProbeConfig, ProbeKind, Samples,
};
pub use resample::{resample_eval, ResampleReport};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::tensor::RngStream;

/// Bag-level feature sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    /// Mean invariant embedding of the disentangled model.
    Iso,
    /// Mean orientation posterior, read by the cyclic probe.
    Ori,
    /// Mean embedding of a baseline model.
    Baseline,
    /// Mean and standard deviation of the ground-truth size factor.
    Factors,
    /// `Iso` followed by `Factors`.
    Combined,
}

impl Representation {
    pub const ALL: [Representation; 5] = [
        Representation::Iso,
        Representation::Ori,
        Representation::Baseline,
        Representation::Factors,
        Representation::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Representation::Iso => "iso",
            Representation::Ori => "ori",
            Representation::Baseline => "baseline",
            Representation::Factors => "factors",
            Representation::Combined => "combined",
        }
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown representation {s:?}")))
    }
}

fn factor_stats(bag: &BagRecord) -> Result<Vec<f64>> {
    let sizes = bag
        .sizes
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("bag {} has no ground-truth factors", bag.bag)))?;
    let n = sizes.len() as f64;
    let mean = sizes.iter().sum::<f64>() / n;
    let var = sizes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(vec![mean, var.sqrt()])
}

/// Features of one bag under `rep`.
pub fn bag_features(bag: &BagRecord, rep: Representation) -> Result<Vec<f64>> {
    let agg = aggregate_bag(&bag.instances)?;
    Ok(match rep {
        Representation::Iso | Representation::Baseline => agg.iso_mean,
        Representation::Ori => {
            if agg.ori_hist.is_empty() {
                return Err(Error::invalid("embeddings have no orientation posterior"));
            }
            agg.ori_hist
        }
        Representation::Factors => factor_stats(bag)?,
        Representation::Combined => {
            let mut f = agg.iso_mean;
            f.extend(factor_stats(bag)?);
            f
        }
    })
}

/// Bag features and labels of one split.
pub fn bag_samples(bags: &[BagRecord], rep: Representation, split: Split) -> Result<Samples> {
    let mut s = Samples::default();
    for b in bags.iter().filter(|b| b.split == split) {
        s.features.push(bag_features(b, rep)?);
        s.labels.push(b.label);
    }
    if s.is_empty() {
        return Err(Error::Empty("bags in a split"));
    }
    Ok(s)
}

/// The probe that reads `rep`, given the embedding table's posterior shape.
pub fn probe_kind(rep: Representation, ori_latents: usize, orientations: usize) -> ProbeKind {
    match rep {
        Representation::Ori => ProbeKind::Cyclic {
            latents: ori_latents,
            orientations,
        },
        _ => ProbeKind::Linear,
    }
}

/// Bootstrap mAUC of `rep` on the bag-label task: probes are fitted on
/// resampled train bags, tuned on val bags and scored on test bags.
pub fn evaluate_representation(
    bags: &[BagRecord],
    rep: Representation,
    cfg: &ProbeConfig,
    repeats: usize,
    rng: &RngStream,
) -> Result<ResampleReport> {
    let first = bags.first().ok_or(Error::Empty("bags"))?;
    let kind = match (rep, first.ori_shape) {
        (Representation::Ori, None) => return Err(Error::invalid("embeddings have no orientation posterior")),
        (_, Some((m, n))) => probe_kind(rep, m, n),
        (_, None) => ProbeKind::Linear,
    };
    let train = bag_samples(bags, rep, Split::Train)?;
    let val = bag_samples(bags, rep, Split::Val)?;
    let test = bag_samples(bags, rep, Split::Test)?;
    resample_eval(kind, &train, &val, &test, cfg, repeats, rng)
}

pub const REPORT_HEADER: &str = "representation\ttask\tmauc_mean\tmauc_std\tmauc";

/// One tab-separated row: name, task, mean, std, `mean ± std`, then per-class
/// AUCs (`nan` for classes never scored).
pub fn report_row(rep: &str, task: &str, r: &ResampleReport) -> String {
    let mut line = format!("{rep}\t{task}\t{:.6}\t{:.6}\t{:.3} ± {:.3}", r.mean, r.std, r.mean, r.std);
    for a in &r.per_class {
        match a {
            Some(a) => write!(line, "\t{a:.6}").expect("string write"),
            None => line.push_str("\tnan"),
        }
    }
    line
}

/// Header with one `auc_<c>` column per class.
pub fn report_header(classes: usize) -> String {
    let mut h = REPORT_HEADER.to_string();
    for c in 0..classes {
        write!(h, "\tauc_{c}").expect("string write");
    }
    h
}
