//! One-vs-rest ROC areas.

use crate::error::{Error, Result};

/// Mean AUC over the classes present in the labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MaucReport {
    pub mean: f64,
    /// `None` for classes without positive examples.
    pub per_class: Vec<Option<f64>>,
}

impl MaucReport {
    pub fn skipped(&self) -> Vec<usize> {
        (0..self.per_class.len()).filter(|&c| self.per_class[c].is_none()).collect()
    }
}

/// Area under the ROC curve of `scores` separating `positive` from the rest,
/// by the rank-sum statistic with ties counted as one half. `None` when
/// either side is empty.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "auc: scores and labels differ in length");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, so tied mid-ranks stay integral.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| positive[k]).count() as u128;
        rank2_sum += mid2 * pos_in_group;
        i = j + 1;
    }
    let n_pos = n_pos as u128;
    let u2 = rank2_sum - n_pos * (n_pos + 1);
    Some(u2 as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// `scores[i][c]` is the score of item `i` for class `c`.
pub fn mauc(scores: &[Vec<f64>], labels: &[usize]) -> Result<MaucReport> {
    if scores.len() != labels.len() {
        return Err(Error::shape("mauc", format!("{} score rows, {} labels", scores.len(), labels.len())));
    }
    let classes = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != classes) {
        return Err(Error::shape("mauc", "ragged score matrix"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {l} for {classes} score columns")));
    }
    let present = (0..classes).filter(|c| labels.contains(c)).count();
    if present < 2 {
        return Err(Error::invalid(format!("mauc needs at least 2 classes, labels contain {present}")));
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auc(&col, &pos)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(MaucReport {
        mean: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}
