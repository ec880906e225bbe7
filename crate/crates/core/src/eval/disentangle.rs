//! How well each latent block predicts the synthetic ground-truth factors.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};

use crate::data::{EmbeddingRow, Embeddings, Factors, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::latent::bin_centre;

#[derive(Clone, Debug, PartialEq)]
pub struct DisentanglementReport {
    /// Shape symmetry order: angles are compared modulo `2π / symmetry`.
    pub symmetry: usize,
    pub train_patches: usize,
    pub test_patches: usize,
    /// Test MAE, in degrees, of the angle read off the orientation posterior.
    pub ori_mae_deg: f64,
    pub ori_row: usize,
    pub ori_sign: f64,
    /// Global offset in radians.
    pub ori_offset: f64,
    /// Test MAE, in degrees, of a linear regression from the invariant block.
    pub iso_mae_deg: f64,
    /// Test R² of linear regressions from the invariant block; `None` for a
    /// constant factor.
    pub r2: Vec<(String, Option<f64>)>,
}

impl DisentanglementReport {
    pub fn r2_of(&self, factor: &str) -> Option<f64> {
        self.r2.iter().find(|(n, _)| n == factor).and_then(|(_, v)| *v)
    }

    pub fn tsv(&self) -> String {
        let mut out = String::from("measure\tvalue\n");
        out += &format!("ori_mae_deg\t{:.4}\n", self.ori_mae_deg);
        out += &format!("iso_mae_deg\t{:.4}\n", self.iso_mae_deg);
        for (name, v) in &self.r2 {
            let v = v.map_or_else(|| "nan".to_string(), |v| format!("{v:.4}"));
            out += &format!("r2_{name}\t{v}\n");
        }
        out += &format!("symmetry\t{}\n", self.symmetry);
        out += &format!("ori_row\t{}\nori_sign\t{}\nori_offset\t{:.6}\n", self.ori_row, self.ori_sign, self.ori_offset);
        out
    }
}

/// `|a − b|` modulo `2π / symmetry`.
pub fn angular_error(a: f64, b: f64, symmetry: usize) -> f64 {
    let s = symmetry as f64;
    let d = (s * (a - b)).rem_euclid(TAU);
    d.min(TAU - d) / s
}

/// Mean direction of a distribution over the `n` orientation bins.
pub fn circular_mean(q: &[f64]) -> f64 {
    let n = q.len();
    let (mut c, mut s) = (0.0, 0.0);
    for (j, &w) in q.iter().enumerate() {
        let a = bin_centre(j, n);
        c += w * a.cos();
        s += w * a.sin();
    }
    s.atan2(c).rem_euclid(TAU)
}

/// Ridge regression with intercept on standardised inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Ridge {
    mean: Vec<f64>,
    scale: Vec<f64>,
    coef: Vec<f64>,
    intercept: f64,
}

impl Ridge {
    pub fn fit(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::shape("ridge", format!("{n} rows, {} targets", y.len())));
        }
        let d = x[0].len();
        let mean: Vec<f64> = (0..d).map(|i| x.iter().map(|r| r[i]).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..d)
            .map(|i| {
                let v = x.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / n as f64;
                if v > 1e-24 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let ym = y.iter().sum::<f64>() / n as f64;
        let z: Vec<Vec<f64>> = x.iter().map(|r| (0..d).map(|i| (r[i] - mean[i]) / scale[i]).collect()).collect();
        let mut a = vec![0.0; d * d];
        let mut b = vec![0.0; d];
        for (r, &t) in z.iter().zip(y) {
            for i in 0..d {
                b[i] += r[i] * (t - ym);
                for j in 0..=i {
                    a[i * d + j] += r[i] * r[j];
                }
            }
        }
        for i in 0..d {
            a[i * d + i] += lambda * n as f64 + 1e-12;
            for j in 0..i {
                a[j * d + i] = a[i * d + j];
            }
        }
        let coef = cholesky_solve(&mut a, &b, d)?;
        Ok(Self {
            mean,
            scale,
            coef,
            intercept: ym,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + x.iter()
                .enumerate()
                .map(|(i, v)| (v - self.mean[i]) / self.scale[i] * self.coef[i])
                .sum::<f64>()
    }
}

fn cholesky_solve(a: &mut [f64], b: &[f64], d: usize) -> Result<Vec<f64>> {
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if !(s > 0.0) {
            return Err(Error::invalid("ridge system is not positive definite"));
        }
        let l = s.sqrt();
        a[j * d + j] = l;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / l;
        }
    }
    let mut y = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            y[i] -= a[i * d + k] * y[k];
        }
        y[i] /= a[i * d + i];
    }
    for i in (0..d).rev() {
        for k in i + 1..d {
            y[i] -= a[k * d + i] * y[k];
        }
        y[i] /= a[i * d + i];
    }
    Ok(y)
}

const RIDGE_LAMBDA: f64 = 1e-6;

fn r_squared(pred: &[f64], y: &[f64]) -> Option<f64> {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let tot: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    let res: f64 = pred.iter().zip(y).map(|(p, v)| (p - v).powi(2)).sum();
    (tot > 1e-24).then(|| 1.0 - res / tot)
}

fn mean_error(pred: &[f64], truth: &[f64], symmetry: usize) -> f64 {
    pred.iter().zip(truth).map(|(&p, &t)| angular_error(p, t, symmetry)).sum::<f64>() / pred.len() as f64
}

/// Offset `δ` minimising the mean error of `σ θ̂ + δ`: the circular mean of
/// the residuals, refined on a fine grid.
fn fit_offset(est: &[f64], truth: &[f64], sign: f64, symmetry: usize) -> (f64, f64) {
    let s = symmetry as f64;
    let (mut c, mut sn) = (0.0, 0.0);
    for (&e, &t) in est.iter().zip(truth) {
        let d = s * (t - sign * e);
        c += d.cos();
        sn += d.sin();
    }
    let start = sn.atan2(c) / s;
    let eval = |delta: f64| {
        let pred: Vec<f64> = est.iter().map(|&e| sign * e + delta).collect();
        mean_error(&pred, truth, symmetry)
    };
    let mut best = (start, eval(start));
    let span = PI / s;
    let steps = 180;
    for k in -steps..=steps {
        let delta = start + span * k as f64 / steps as f64;
        let e = eval(delta);
        if e < best.1 {
            best = (delta, e);
        }
    }
    (best.0.rem_euclid(TAU / s), best.1)
}

struct Split2<'a> {
    train: Vec<(&'a EmbeddingRow, &'a Factors)>,
    test: Vec<(&'a EmbeddingRow, &'a Factors)>,
}

fn split_rows<'a>(table: &'a Embeddings, manifest: &'a [ManifestRow]) -> Result<Split2<'a>> {
    let by_path: HashMap<&str, &ManifestRow> = manifest.iter().map(|r| (r.path.as_str(), r)).collect();
    let mut out = Split2 {
        train: Vec::new(),
        test: Vec::new(),
    };
    for e in &table.rows {
        let m = by_path
            .get(e.patch.as_str())
            .ok_or_else(|| Error::invalid(format!("patch {} is not in the manifest", e.patch)))?;
        let f = m
            .factors
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("patch {} has no ground-truth factors", e.patch)))?;
        match m.split {
            Split::Train => out.train.push((e, f)),
            Split::Test => out.test.push((e, f)),
            Split::Val => {}
        }
    }
    if out.train.is_empty() || out.test.is_empty() {
        return Err(Error::Empty("train or test split of the embeddings"));
    }
    Ok(out)
}

/// Fits readouts on the train split and scores them on the test split.
pub fn disentanglement_probe(table: &Embeddings, manifest: &[ManifestRow], symmetry: usize) -> Result<DisentanglementReport> {
    if symmetry == 0 {
        return Err(Error::invalid("symmetry order must be positive"));
    }
    if table.ori_latents == 0 {
        return Err(Error::invalid("embeddings have no orientation posterior"));
    }
    let rows = split_rows(table, manifest)?;
    let n = table.orientations;
    let angles = |set: &[(&EmbeddingRow, &Factors)], j: usize| -> Vec<f64> {
        set.iter()
            .map(|(e, _)| {
                let q: Vec<f64> = e.ori[j * n..(j + 1) * n].iter().map(|&v| v as f64).collect();
                circular_mean(&q)
            })
            .collect()
    };
    let truth = |set: &[(&EmbeddingRow, &Factors)]| set.iter().map(|(_, f)| f.theta0).collect::<Vec<f64>>();
    let (t_train, t_test) = (truth(&rows.train), truth(&rows.test));

    let s = symmetry as f64;
    let mut best: Option<(usize, f64, f64)> = None;
    for j in 0..table.ori_latents {
        let est = angles(&rows.train, j);
        for sign in [1.0, -1.0] {
            let (mut c, mut sn) = (0.0, 0.0);
            for (&e, &t) in est.iter().zip(&t_train) {
                let d = s * (t - sign * e);
                c += d.cos();
                sn += d.sin();
            }
            let delta = sn.atan2(c) / s;
            let pred: Vec<f64> = est.iter().map(|&e| sign * e + delta).collect();
            let err = mean_error(&pred, &t_train, symmetry);
            if best.map_or(true, |(_, _, b)| err < b) {
                best = Some((j, sign, err));
            }
        }
    }
    let (row, sign, _) = best.expect("at least one angular latent");
    let (offset, _) = fit_offset(&angles(&rows.train, row), &t_train, sign, symmetry);
    let pred: Vec<f64> = angles(&rows.test, row).iter().map(|&e| sign * e + offset).collect();
    let ori_mae = mean_error(&pred, &t_test, symmetry);

    let iso = |set: &[(&EmbeddingRow, &Factors)]| {
        set.iter()
            .map(|(e, _)| e.iso.iter().map(|&v| v as f64).collect::<Vec<f64>>())
            .collect::<Vec<_>>()
    };
    let (x_train, x_test) = (iso(&rows.train), iso(&rows.test));
    let cos: Vec<f64> = t_train.iter().map(|t| (s * t).cos()).collect();
    let sin: Vec<f64> = t_train.iter().map(|t| (s * t).sin()).collect();
    let rc = Ridge::fit(&x_train, &cos, RIDGE_LAMBDA)?;
    let rs = Ridge::fit(&x_train, &sin, RIDGE_LAMBDA)?;
    let pred: Vec<f64> = x_test.iter().map(|x| rs.predict(x).atan2(rc.predict(x)) / s).collect();
    let iso_mae = mean_error(&pred, &t_test, symmetry);

    type Getter = fn(&Factors) -> f64;
    let factors: [(&str, Getter); 4] = [
        ("size", |f| f.size),
        ("intensity", |f| f.intensity),
        ("boundary", |f| f.boundary),
        ("distractors", |f| f.distractors as f64),
    ];
    let mut r2 = Vec::with_capacity(factors.len());
    for (name, get) in factors {
        let y_train: Vec<f64> = rows.train.iter().map(|(_, f)| get(f)).collect();
        let y_test: Vec<f64> = rows.test.iter().map(|(_, f)| get(f)).collect();
        let model = Ridge::fit(&x_train, &y_train, RIDGE_LAMBDA)?;
        let pred: Vec<f64> = x_test.iter().map(|x| model.predict(x)).collect();
        r2.push((name.to_string(), r_squared(&pred, &y_test)));
    }

    Ok(DisentanglementReport {
        symmetry,
        train_patches: rows.train.len(),
        test_patches: rows.test.len(),
        ori_mae_deg: ori_mae.to_degrees(),
        ori_row: row,
        ori_sign: sign,
        ori_offset: offset,
        iso_mae_deg: iso_mae.to_degrees(),
        r2,
    })
}
