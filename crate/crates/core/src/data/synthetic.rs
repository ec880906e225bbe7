//! Synthetic "nucleus" patches with known generative factors.
//!
//! Every patch shows an anisotropic ellipse at the centre, rotated by an
//! angle drawn uniformly from `[0, 2π)`, with a dark rim, an optional marker
//! dot at one end of the major axis (so the angle is identifiable modulo
//! 2π rather than π) and small distractor blobs near the border. Bags share
//! a typical nucleus size; bag labels are terciles of the bag's mean size.

use std::f64::consts::TAU;
use std::path::Path;

use super::{save_patch, write_manifest, Factors, ManifestRow, Split};
use crate::config::{format_list, parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub bags: usize,
    pub patches_per_bag: usize,
    pub patch_size: usize,
    /// Range of per-bag typical sizes.
    pub size_range: (f64, f64),
    /// Standard deviation of patch sizes around their bag's typical size.
    pub size_jitter: f64,
    pub intensity_range: (f64, f64),
    /// Rim thickness in pixels.
    pub boundary_range: (f64, f64),
    pub max_distractors: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub marker: bool,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            bags: 300,
            patches_per_bag: 32,
            patch_size: 36,
            size_range: (0.7, 1.3),
            size_jitter: 0.08,
            intensity_range: (0.5, 1.0),
            boundary_range: (0.5, 2.0),
            max_distractors: 3,
            noise: 0.02,
            marker: true,
            val_fraction: 0.2,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

fn take_range(kv: &mut KeyValues, key: &str, slot: &mut (f64, f64)) -> Result<()> {
    let mut raw = String::new();
    kv.take(key, &mut raw)?;
    if !raw.is_empty() {
        match parse_list::<f64>(key, &raw)?[..] {
            [lo, hi] => *slot = (lo, hi),
            _ => return Err(Error::Config(format!("{key} needs lo,hi, got {raw:?}"))),
        }
    }
    Ok(())
}

impl SyntheticConfig {
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take("bags", &mut self.bags)?;
        kv.take("patches_per_bag", &mut self.patches_per_bag)?;
        kv.take("patch_size", &mut self.patch_size)?;
        take_range(kv, "size_range", &mut self.size_range)?;
        kv.take("size_jitter", &mut self.size_jitter)?;
        take_range(kv, "intensity_range", &mut self.intensity_range)?;
        take_range(kv, "boundary_range", &mut self.boundary_range)?;
        kv.take("max_distractors", &mut self.max_distractors)?;
        kv.take("noise", &mut self.noise)?;
        kv.take("marker", &mut self.marker)?;
        kv.take("val_fraction", &mut self.val_fraction)?;
        kv.take("test_fraction", &mut self.test_fraction)?;
        kv.take("seed", &mut self.seed)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let range = |(lo, hi): (f64, f64)| format_list(&[lo, hi]);
        [
            ("bags", self.bags.to_string()),
            ("patches_per_bag", self.patches_per_bag.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("size_range", range(self.size_range)),
            ("size_jitter", self.size_jitter.to_string()),
            ("intensity_range", range(self.intensity_range)),
            ("boundary_range", range(self.boundary_range)),
            ("max_distractors", self.max_distractors.to_string()),
            ("noise", self.noise.to_string()),
            ("marker", self.marker.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, (lo, hi)) in [
            ("size", self.size_range),
            ("intensity", self.intensity_range),
            ("boundary", self.boundary_range),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return fail(format!("{name} range ({lo}, {hi}) is invalid"));
            }
        }
        if self.size_range.0 <= 0.0 {
            return fail("sizes must be positive".into());
        }
        if self.patch_size < 16 || self.patches_per_bag == 0 {
            return fail("patch size must be at least 16 and bags non-empty".into());
        }
        if self.noise < 0.0 || self.size_jitter < 0.0 {
            return fail("noise levels must be non-negative".into());
        }
        let train = 1.0 - self.val_fraction - self.test_fraction;
        if self.val_fraction <= 0.0 || self.test_fraction <= 0.0 || train <= 0.0 {
            return fail("split fractions must leave every split non-empty".into());
        }
        Ok(())
    }
}

/// Everything needed to draw one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFactors {
    pub theta0: f64,
    pub size: f64,
    pub intensity: f64,
    pub boundary: f64,
    /// `(distance from centre, polar angle, radius)` in pixels and radians.
    pub distractors: Vec<(f64, f64, f64)>,
}

const BACKGROUND: [f64; 3] = [0.92, 0.82, 0.88];
const STAIN: [f64; 3] = [0.45, 0.55, 0.25];
const MARKER: [f64; 3] = [0.25, 0.5, 0.2];
const SUBSAMPLES: usize = 4;

/// Renders a noiseless `[3, P, P]` patch with values in `[0, 1]`.
pub fn render_patch(size: usize, f: &PatchFactors, marker: bool) -> Tensor<f32> {
    let centre = (size as f64 - 1.0) / 2.0;
    let a = 0.22 * size as f64 * f.size;
    let b = 0.55 * a;
    let (sin, cos) = f.theta0.sin_cos();
    let marker_r = 0.05 * size as f64;
    let marker_d = a + 1.2 * marker_r;
    let tint = |k: f64| [0, 1, 2].map(|c| BACKGROUND[c] - k * STAIN[c]);
    let nucleus = tint(f.intensity);
    let rim = tint((f.intensity + 0.35).min(1.3));
    let blob = tint(0.3);
    let inner = ((a - f.boundary).max(0.0), (b - f.boundary).max(0.0));

    let colour = |x: f64, y: f64| -> [f64; 3] {
        let u = x * cos + y * sin;
        let v = -x * sin + y * cos;
        if marker && (u - marker_d).powi(2) + v * v <= marker_r * marker_r {
            return MARKER;
        }
        if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
            let in_core = inner.0 > 0.0 && inner.1 > 0.0 && (u / inner.0).powi(2) + (v / inner.1).powi(2) <= 1.0;
            return if in_core { nucleus } else { rim };
        }
        for &(d, phi, r) in &f.distractors {
            let (bx, by) = (d * phi.cos(), d * phi.sin());
            if (x - bx).powi(2) + (y - by).powi(2) <= r * r {
                return blob;
            }
        }
        BACKGROUND
    };

    let mut data = vec![0f32; 3 * size * size];
    let step = 1.0 / SUBSAMPLES as f64;
    for r in 0..size {
        for c in 0..size {
            let mut acc = [0.0; 3];
            for i in 0..SUBSAMPLES {
                for j in 0..SUBSAMPLES {
                    let oy = (i as f64 + 0.5) * step - 0.5;
                    let ox = (j as f64 + 0.5) * step - 0.5;
                    let col = colour(c as f64 + ox - centre, centre - (r as f64 + oy));
                    (0..3).for_each(|k| acc[k] += col[k]);
                }
            }
            let n = (SUBSAMPLES * SUBSAMPLES) as f64;
            for k in 0..3 {
                data[(k * size + r) * size + c] = (acc[k] / n) as f32;
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("consistent shape")
}

fn draw_factors(cfg: &SyntheticConfig, typical: f64, rng: &mut RngStream) -> PatchFactors {
    let range = |rng: &mut RngStream, (lo, hi): (f64, f64)| if hi > lo { rng.uniform_range(lo, hi) } else { lo };
    let p = cfg.patch_size as f64;
    let size = (typical + cfg.size_jitter * rng.normal()).clamp(0.5 * cfg.size_range.0, 1.5 * cfg.size_range.1);
    let theta0 = rng.uniform() * TAU;
    let intensity = range(rng, cfg.intensity_range);
    let boundary = range(rng, cfg.boundary_range);
    let count = rng.below(cfg.max_distractors + 1);
    let distractors = (0..count)
        .map(|_| (rng.uniform_range(0.36 * p, 0.44 * p), rng.uniform() * TAU, rng.uniform_range(0.03 * p, 0.06 * p)))
        .collect();
    PatchFactors {
        theta0: if theta0 >= TAU { 0.0 } else { theta0 },
        size,
        intensity,
        boundary,
        distractors,
    }
}

/// Writes `patches/*.png` and `manifest.csv` under `out`.
pub fn generate_synthetic(cfg: &SyntheticConfig, out: &Path) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    std::fs::create_dir_all(out.join("patches"))?;
    let mut bag_rng = RngStream::new(cfg.seed, 1);
    let typical: Vec<f64> = (0..cfg.bags)
        .map(|_| {
            let (lo, hi) = cfg.size_range;
            if hi > lo {
                bag_rng.uniform_range(lo, hi)
            } else {
                lo
            }
        })
        .collect();

    let mut factors = Vec::with_capacity(cfg.bags * cfg.patches_per_bag);
    for (bag, &t) in typical.iter().enumerate() {
        for i in 0..cfg.patches_per_bag {
            let mut rng = RngStream::new(cfg.seed, 1000 + (bag * cfg.patches_per_bag + i) as u64);
            factors.push(draw_factors(cfg, t, &mut rng));
        }
    }

    let mean_size: Vec<f64> = (0..cfg.bags)
        .map(|b| {
            let s = &factors[b * cfg.patches_per_bag..(b + 1) * cfg.patches_per_bag];
            s.iter().map(|f| f.size).sum::<f64>() / s.len() as f64
        })
        .collect();
    let labels = tercile_labels(&mean_size);
    let splits = stratified_splits(cfg, &labels)?;

    let mut rows = Vec::with_capacity(factors.len());
    for (idx, f) in factors.iter().enumerate() {
        let bag = idx / cfg.patches_per_bag;
        let mut img = render_patch(cfg.patch_size, f, cfg.marker);
        if cfg.noise > 0.0 {
            let mut rng = RngStream::new(cfg.seed, 1000 + idx as u64).split(1);
            for v in img.data_mut() {
                *v = (*v as f64 + cfg.noise * rng.normal()).clamp(0.0, 1.0) as f32;
            }
        }
        let path = format!("patches/b{bag:04}_p{:03}.png", idx % cfg.patches_per_bag);
        save_patch(&out.join(&path), &img)?;
        rows.push(ManifestRow {
            path,
            bag: format!("bag{bag:04}"),
            split: splits[bag],
            label: labels[bag],
            factors: Some(Factors {
                theta0: f.theta0,
                size: f.size,
                intensity: f.intensity,
                boundary: f.boundary,
                distractors: f.distractors.len(),
            }),
        });
    }
    write_manifest(&out.join("manifest.csv"), &rows)?;
    Ok(rows)
}

/// Class `floor(3 * rank / n)` of each value's rank (ties by index).
fn tercile_labels(stat: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..stat.len()).collect();
    order.sort_by(|&i, &j| stat[i].total_cmp(&stat[j]).then(i.cmp(&j)));
    let mut labels = vec![0; stat.len()];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = 3 * rank / stat.len();
    }
    labels
}

fn stratified_splits(cfg: &SyntheticConfig, labels: &[usize]) -> Result<Vec<Split>> {
    let mut rng = RngStream::new(cfg.seed, 2);
    let mut splits = vec![Split::Train; labels.len()];
    for class in 0..3 {
        let mut bags: Vec<usize> = (0..labels.len()).filter(|&b| labels[b] == class).collect();
        rng.shuffle(&mut bags);
        let n = bags.len() as f64;
        let n_val = (n * cfg.val_fraction).round() as usize;
        let n_test = (n * cfg.test_fraction).round() as usize;
        let n_train = bags.len().saturating_sub(n_val + n_test);
        if n_val < 3 || n_test < 3 || n_train < 3 {
            return Err(Error::Config(format!(
                "{} bags give class {class} splits of {n_train}/{n_val}/{n_test}; need at least 3 bags per split",
                labels.len()
            )));
        }
        for (i, &b) in bags.iter().enumerate() {
            splits[b] = if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    Ok(splits)
}
