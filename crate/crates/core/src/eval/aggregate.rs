//! Bag-level pooling of per-patch embeddings.

use std::collections::{BTreeMap, HashMap};

use crate::data::{EmbeddingRow, Embeddings, ManifestRow, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BagRecord {
    pub bag: String,
    pub label: usize,
    pub split: Split,
    pub instances: Vec<EmbeddingRow>,
    /// Ground-truth size factor per instance, when the manifest has factors.
    pub sizes: Option<Vec<f64>>,
    /// `(M', N)` of the orientation posteriors, if any.
    pub ori_shape: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagAggregate {
    pub iso_mean: Vec<f64>,
    /// `[M', N]` row-major mean of the instance posteriors.
    pub ori_hist: Vec<f64>,
}

/// Means of the instance embeddings, summed in patch-id order so the result
/// does not depend on instance order.
pub fn aggregate_bag(instances: &[EmbeddingRow]) -> Result<BagAggregate> {
    let first = instances.first().ok_or(Error::Empty("bag"))?;
    let (di, dq) = (first.iso.len(), first.ori.len());
    let mut sorted: Vec<&EmbeddingRow> = instances.iter().collect();
    sorted.sort_by(|a, b| a.patch.cmp(&b.patch));
    let mut iso = vec![0.0f64; di];
    let mut ori = vec![0.0f64; dq];
    for r in sorted {
        if r.iso.len() != di || r.ori.len() != dq {
            return Err(Error::shape("aggregate_bag", format!("instance {} has inconsistent dims", r.patch)));
        }
        for (a, &v) in iso.iter_mut().zip(&r.iso) {
            *a += v as f64;
        }
        for (a, &v) in ori.iter_mut().zip(&r.ori) {
            *a += v as f64;
        }
    }
    let n = instances.len() as f64;
    Ok(BagAggregate {
        iso_mean: iso.into_iter().map(|v| v / n).collect(),
        ori_hist: ori.into_iter().map(|v| v / n).collect(),
    })
}

/// Groups embedding rows into bags using the manifest for labels, splits and
/// factors. Bags come back sorted by id.
pub fn build_bags(manifest: &[ManifestRow], table: &Embeddings) -> Result<Vec<BagRecord>> {
    let by_path: HashMap<&str, &ManifestRow> = manifest.iter().map(|r| (r.path.as_str(), r)).collect();
    let mut bags: BTreeMap<String, BagRecord> = BTreeMap::new();
    for e in &table.rows {
        let m = by_path
            .get(e.patch.as_str())
            .ok_or_else(|| Error::invalid(format!("patch {} is not in the manifest", e.patch)))?;
        if m.bag != e.bag {
            return Err(Error::invalid(format!(
                "patch {} belongs to bag {} in the manifest, {} in the embeddings",
                e.patch, m.bag, e.bag
            )));
        }
        let rec = bags.entry(m.bag.clone()).or_insert_with(|| BagRecord {
            bag: m.bag.clone(),
            label: m.label,
            split: m.split,
            instances: Vec::new(),
            sizes: Some(Vec::new()),
            ori_shape: (table.ori_latents > 0).then_some((table.ori_latents, table.orientations)),
        });
        if rec.label != m.label || rec.split != m.split {
            return Err(Error::invalid(format!("bag {} mixes labels or splits", m.bag)));
        }
        rec.instances.push(e.clone());
        rec.sizes = match (rec.sizes.take(), &m.factors) {
            (Some(mut s), Some(f)) => {
                s.push(f.size);
                Some(s)
            }
            _ => None,
        };
    }
    Ok(bags.into_values().collect())
}
