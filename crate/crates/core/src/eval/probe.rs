//! Softmax probes fitted by full-batch Adam, with the L2 weight picked on a
//! validation split.

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tape, Tensor, Var};
use crate::train::{adam_step, AdamConfig};

use super::metrics::mauc;

/// Feature rows with integer class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Samples {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn distinct_classes(&self) -> usize {
        let mut seen: Vec<usize> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    pub fn subset(&self, rows: &[usize]) -> Samples {
        Samples {
            features: rows.iter().map(|&i| self.features[i].clone()).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn check(&self, what: &str, dim: usize) -> Result<()> {
        if self.features.len() != self.labels.len() {
            return Err(Error::shape("probe", format!("{what}: {} rows, {} labels", self.features.len(), self.labels.len())));
        }
        if let Some(r) = self.features.iter().find(|r| r.len() != dim) {
            return Err(Error::shape("probe", format!("{what}: row of {} features, expected {dim}", r.len())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub l2_grid: Vec<f64>,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Training stops once every gradient entry is below this.
    pub tolerance: f64,
    /// Width of the cyclic probe's first layer.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2_grid: vec![1e-4, 1e-3, 1e-2, 1e-1],
            adam: AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            epochs: 500,
            tolerance: 1e-6,
            hidden: 32,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l2_grid.is_empty() || self.l2_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("probe L2 grid must be non-empty and non-negative".into()));
        }
        if self.epochs == 0 || self.hidden == 0 || !(self.adam.lr > 0.0) {
            return Err(Error::Config("probe epochs, width and learning rate must be positive".into()));
        }
        Ok(())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[D, K]` row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub l2: f64,
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let k = self.classes();
        let mut out = self.bias.clone();
        for (i, &v) in x.iter().enumerate() {
            let s = (v - self.mean[i]) / self.scale[i];
            for (c, o) in out.iter_mut().enumerate() {
                *o += s * self.weights[i * k + c];
            }
        }
        out
    }
}

/// Max over the cyclic shifts of a shared first layer, then a linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CyclicProbe {
    pub latents: usize,
    pub orientations: usize,
    pub mean: f64,
    pub scale: f64,
    /// `[M' N, H]` row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[H, K]` row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub l2: f64,
}

/// `x` with every length-`n` row rotated left by `s`.
fn roll_rows(x: &[f64], n: usize, s: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        out.extend((0..n).map(|t| row[(t + s) % n]));
    }
    out
}

impl CyclicProbe {
    pub fn classes(&self) -> usize {
        self.b2.len()
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let h = self.hidden();
        let n = self.orientations;
        let std: Vec<f64> = x.iter().map(|v| (v - self.mean) / self.scale).collect();
        let mut pooled = vec![f64::NEG_INFINITY; h];
        for s in 0..n {
            let xs = roll_rows(&std, n, s);
            for (j, p) in pooled.iter_mut().enumerate() {
                let mut z = self.b1[j];
                for (i, &v) in xs.iter().enumerate() {
                    z += v * self.w1[i * h + j];
                }
                *p = p.max(z);
            }
        }
        let k = self.classes();
        let mut out = self.b2.clone();
        for (j, &p) in pooled.iter().enumerate() {
            // `+ 0.0` folds a signed zero so ties between ±0 cannot leak order.
            let p = p + 0.0;
            for (c, o) in out.iter_mut().enumerate() {
                *o += p * self.w2[j * k + c];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Probe {
    Linear(LinearProbe),
    Cyclic(CyclicProbe),
}

impl Probe {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Probe::Linear(p) => p.logits(x),
            Probe::Cyclic(p) => p.logits(x),
        }
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn l2(&self) -> f64 {
        match self {
            Probe::Linear(p) => p.l2,
            Probe::Cyclic(p) => p.l2,
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        (0..l.len()).fold(0, |b, c| if l[c] > l[b] { c } else { b })
    }

    pub fn scores(&self, samples: &Samples) -> Vec<Vec<f64>> {
        samples.features.iter().map(|x| self.probabilities(x)).collect()
    }

    pub fn accuracy(&self, samples: &Samples) -> f64 {
        let hit = samples
            .features
            .iter()
            .zip(&samples.labels)
            .filter(|(x, &l)| self.predict(x) == l)
            .count();
        hit as f64 / samples.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Linear,
    /// Inputs are `[latents, orientations]` row-major.
    Cyclic { latents: usize, orientations: usize },
}

/// Runs full-batch Adam on `params` until the gradient vanishes or the epoch
/// budget runs out. `loss` builds the objective from the parameter vars.
fn minimise(
    params: &mut [Tensor<f64>],
    cfg: &ProbeConfig,
    mut loss: impl FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<()> {
    let mut m: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut v = m.clone();
    for t in 1..=cfg.epochs as u64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let l = loss(&mut tape, &vars)?;
        if !tape.scalar_value(l).is_finite() {
            return Err(Error::NonFinite(format!("probe loss at epoch {t}")));
        }
        tape.backward(l)?;
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(params.iter())
            .map(|(&var, p)| tape.grad(var).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
            .collect();
        if grads.iter().flatten().all(|g| g.abs() < cfg.tolerance) {
            break;
        }
        for (i, p) in params.iter_mut().enumerate() {
            adam_step(p.data_mut(), &grads[i], &mut m[i], &mut v[i], t, &cfg.adam);
        }
    }
    Ok(())
}

/// Mean cross-entropy of `logits [n, K]` plus `λ/2 Σ‖W‖²` over `weights`.
fn penalised_ce(tape: &mut Tape<f64>, logits: Var, labels: &[usize], weights: &[Var], l2: f64) -> Result<Var> {
    let (n, k) = (labels.len(), tape.shape(logits)[1]);
    let mut onehot = vec![0.0; n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = -1.0 / n as f64;
    }
    let target = tape.constant(&[n, k], onehot)?;
    let lsm = tape.log_softmax(logits, 1)?;
    let prod = tape.mul(lsm, target)?;
    let mut total = tape.sum(prod);
    for &w in weights {
        let sq = tape.square(w);
        let s = tape.sum(sq);
        let r = tape.scale(s, l2 / 2.0);
        total = tape.add(total, r)?;
    }
    Ok(total)
}

fn class_count(train: &Samples, val: &Samples) -> usize {
    train.labels.iter().chain(&val.labels).max().map_or(0, |m| m + 1)
}

fn fit_linear_at(train: &Samples, classes: usize, l2: f64, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let (n, d) = (train.len(), train.dim());
    let mut mean = vec![0.0; d];
    for r in &train.features {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for r in &train.features {
        for i in 0..d {
            scale[i] += (r[i] - mean[i]).powi(2) / n as f64;
        }
    }
    let scale: Vec<f64> = scale.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    let x: Vec<f64> = train
        .features
        .iter()
        .flat_map(|r| (0..d).map(|i| (r[i] - mean[i]) / scale[i]).collect::<Vec<_>>())
        .collect();
    let mut params = vec![Tensor::zeros(&[d, classes]), Tensor::zeros(&[classes])];
    minimise(&mut params, cfg, |tape, p| {
        let xv = tape.constant(&[n, d], x.clone())?;
        let z = tape.matmul(xv, p[0])?;
        let z = tape.channel_affine(z, None, Some(p[1]), 1)?;
        penalised_ce(tape, z, &train.labels, &p[..1], l2)
    })?;
    let [w, b]: [Tensor<f64>; 2] = params.try_into().expect("two tensors");
    Ok(LinearProbe {
        mean,
        scale,
        weights: w.into_data(),
        bias: b.into_data(),
        l2,
    })
}

fn glorot(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Tensor<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-a, a)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("sized to shape")
}

fn fit_cyclic_at(
    train: &Samples,
    latents: usize,
    orientations: usize,
    classes: usize,
    l2: f64,
    cfg: &ProbeConfig,
) -> Result<CyclicProbe> {
    let (n, d, h) = (train.len(), train.dim(), cfg.hidden);
    let all = train.features.iter().flatten();
    let mean = all.clone().sum::<f64>() / (n * d) as f64;
    let var = all.map(|v| (v - mean).powi(2)).sum::<f64>() / (n * d) as f64;
    let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
    // Shift-major stack: rows `s * n .. (s + 1) * n` hold shift `s`.
    let mut stacked = Vec::with_capacity(orientations * n * d);
    for s in 0..orientations {
        for r in &train.features {
            let std: Vec<f64> = r.iter().map(|v| (v - mean) / scale).collect();
            stacked.extend(roll_rows(&std, orientations, s));
        }
    }
    let mut rng = RngStream::new(cfg.seed, 0x0c7c);
    let mut params = vec![
        glorot(&mut rng, d, h),
        Tensor::zeros(&[h]),
        glorot(&mut rng, h, classes),
        Tensor::zeros(&[classes]),
    ];
    minimise(&mut params, cfg, |tape, p| {
        let xv = tape.constant(&[orientations * n, d], stacked.clone())?;
        let z = tape.matmul(xv, p[0])?;
        let z = tape.channel_affine(z, None, Some(p[1]), 1)?;
        let z = tape.reshape(z, &[orientations, n, h])?;
        let pooled = tape.max_axis(z, 0)?;
        let logits = tape.matmul(pooled, p[2])?;
        let logits = tape.channel_affine(logits, None, Some(p[3]), 1)?;
        penalised_ce(tape, logits, &train.labels, &[p[0], p[2]], l2)
    })?;
    let [w1, b1, w2, b2]: [Tensor<f64>; 4] = params.try_into().expect("four tensors");
    Ok(CyclicProbe {
        latents,
        orientations,
        mean,
        scale,
        w1: w1.into_data(),
        b1: b1.into_data(),
        w2: w2.into_data(),
        b2: b2.into_data(),
        l2,
    })
}

/// Fits one probe per L2 value and keeps the one with the best validation
/// mAUC; ties keep the earlier grid entry.
pub fn fit_probe(kind: ProbeKind, train: &Samples, val: &Samples, cfg: &ProbeConfig) -> Result<Probe> {
    cfg.validate()?;
    let dim = train.dim();
    train.check("train", dim)?;
    val.check("val", dim)?;
    if train.distinct_classes() < 2 {
        return Err(Error::invalid("probe training set has a single class"));
    }
    if let ProbeKind::Cyclic { latents, orientations } = kind {
        if orientations == 0 || latents * orientations != dim {
            return Err(Error::shape(
                "fit_cyclic_logreg",
                format!("{dim} features for {latents} x {orientations} histograms"),
            ));
        }
    }
    let classes = class_count(train, val);
    let mut best: Option<(f64, Probe)> = None;
    for &l2 in &cfg.l2_grid {
        let probe = match kind {
            ProbeKind::Linear => Probe::Linear(fit_linear_at(train, classes, l2, cfg)?),
            ProbeKind::Cyclic { latents, orientations } => {
                Probe::Cyclic(fit_cyclic_at(train, latents, orientations, classes, l2, cfg)?)
            }
        };
        if cfg.l2_grid.len() == 1 {
            return Ok(probe);
        }
        let score = mauc(&probe.scores(val), &val.labels)?.mean;
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, probe));
        }
    }
    Ok(best.expect("grid is non-empty").1)
}

pub fn fit_logreg(train: &Samples, val: &Samples, cfg: &ProbeConfig) -> Result<LinearProbe> {
    match fit_probe(ProbeKind::Linear, train, val, cfg)? {
        Probe::Linear(p) => Ok(p),
        Probe::Cyclic(_) => unreachable!("linear kind"),
    }
}

pub fn fit_cyclic_logreg(
    train: &Samples,
    val: &Samples,
    latents: usize,
    orientations: usize,
    cfg: &ProbeConfig,
) -> Result<CyclicProbe> {
    match fit_probe(ProbeKind::Cyclic { latents, orientations }, train, val, cfg)? {
        Probe::Cyclic(p) => Ok(p),
        Probe::Linear(_) => unreachable!("cyclic kind"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blobs(rng: &mut RngStream, per_class: usize, centres: &[(f64, f64)], spread: f64) -> Samples {
        let mut s = Samples::default();
        for (c, &(x, y)) in centres.iter().enumerate() {
            for _ in 0..per_class {
                s.features.push(vec![x + spread * rng.normal(), y + spread * rng.normal()]);
                s.labels.push(c);
            }
        }
        s
    }

    #[test]
    fn separable_two_class_set_is_fit_exactly() {
        let mut rng = RngStream::new(1, 0);
        let train = blobs(&mut rng, 20, &[(-2.0, 0.0), (2.0, 1.0)], 0.3);
        let val = blobs(&mut rng, 10, &[(-2.0, 0.0), (2.0, 1.0)], 0.3);
        let p = Probe::Linear(fit_logreg(&train, &val, &ProbeConfig::default()).unwrap());
        assert_eq!(p.accuracy(&train), 1.0);
    }

    #[test]
    fn uninformative_features_give_class_priors() {
        let train = Samples {
            features: vec![vec![0.7, -1.0]; 10],
            labels: vec![0, 0, 0, 0, 0, 1, 1, 1, 2, 2],
        };
        let cfg = ProbeConfig {
            l2_grid: vec![1e-2],
            epochs: 3000,
            tolerance: 1e-9,
            ..ProbeConfig::default()
        };
        let p = Probe::Linear(fit_logreg(&train, &train, &cfg).unwrap());
        let probs = p.probabilities(&[0.7, -1.0]);
        for (got, want) in probs.iter().zip([0.5, 0.3, 0.2]) {
            assert!((got - want).abs() < 1e-4, "{probs:?}");
        }
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let s = Samples {
            features: vec![vec![1.0], vec![2.0]],
            labels: vec![1, 1],
        };
        assert!(fit_logreg(&s, &s, &ProbeConfig::default()).is_err());
        let h = Samples {
            features: vec![vec![0.5; 4]; 2],
            labels: vec![0, 0],
        };
        assert!(fit_cyclic_logreg(&h, &h, 1, 4, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn three_blobs_match_a_brute_force_linear_search() {
        let mut rng = RngStream::new(9, 0);
        let centres = [(0.0, 0.0), (1.6, 0.4), (0.5, 1.5)];
        let train = blobs(&mut rng, 60, &centres, 0.6);
        let val = blobs(&mut rng, 30, &centres, 0.6);
        let test = blobs(&mut rng, 100, &centres, 0.6);
        let probe = Probe::Linear(fit_logreg(&train, &val, &ProbeConfig::default()).unwrap());
        let ours = probe.accuracy(&test);

        // Grid search over linear classifiers for training accuracy, with
        // class 0 pinned at zero; both are scored on held-out points.
        let dirs: Vec<(f64, f64)> = (0..24)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 24.0;
                (a.cos(), a.sin())
            })
            .collect();
        let biases: Vec<f64> = (-4..=4).map(|b| b as f64 * 0.25).collect();
        let score = |set: &Samples, w: [(f64, f64); 3], b: [f64; 3]| {
            let hit = set
                .features
                .iter()
                .zip(&set.labels)
                .filter(|(x, &l)| {
                    let s: Vec<f64> = (0..3).map(|c| w[c].0 * x[0] + w[c].1 * x[1] + b[c]).collect();
                    (0..3).fold(0, |best, c| if s[c] > s[best] { c } else { best }) == l
                })
                .count();
            hit as f64 / set.len() as f64
        };
        let mut best = (0.0f64, [(0.0, 0.0); 3], [0.0; 3]);
        for &d1 in &dirs {
            for &d2 in &dirs {
                for &b1 in &biases {
                    for &b2 in &biases {
                        let (w, b) = ([(0.0, 0.0), d1, d2], [0.0, b1, b2]);
                        let acc = score(&train, w, b);
                        if acc > best.0 {
                            best = (acc, w, b);
                        }
                    }
                }
            }
        }
        let searched = score(&test, best.1, best.2);
        assert!(ours >= searched - 0.02, "probe {ours} vs search {searched}");
    }

    fn concentration_set(rng: &mut RngStream, per_class: usize) -> Samples {
        let (m, n) = (2, 8);
        let mut s = Samples::default();
        for (c, peak) in [0.2, 0.45, 0.7].into_iter().enumerate() {
            for _ in 0..per_class {
                let mut h = Vec::with_capacity(m * n);
                for _ in 0..m {
                    let at = rng.below(n);
                    let p = (peak + 0.08 * rng.normal()).clamp(1.0 / n as f64, 0.95);
                    h.extend((0..n).map(|t| if t == at { p } else { (1.0 - p) / (n - 1) as f64 }));
                }
                s.features.push(h);
                s.labels.push(c);
            }
        }
        s
    }

    #[test]
    fn cyclic_probe_learns_concentration_regardless_of_phase() {
        let mut rng = RngStream::new(21, 0);
        let train = concentration_set(&mut rng, 40);
        let val = concentration_set(&mut rng, 20);
        let test = concentration_set(&mut rng, 40);
        let cfg = ProbeConfig {
            hidden: 8,
            epochs: 300,
            ..ProbeConfig::default()
        };
        let p = Probe::Cyclic(fit_cyclic_logreg(&train, &val, 2, 8, &cfg).unwrap());
        let acc = p.accuracy(&test);
        assert!(acc >= 1.0 / 3.0 + 0.2, "accuracy {acc}");
    }

    fn random_cyclic(rng: &mut RngStream, m: usize, n: usize, h: usize, k: usize) -> CyclicProbe {
        CyclicProbe {
            latents: m,
            orientations: n,
            mean: rng.normal(),
            scale: 0.5 + rng.uniform(),
            w1: rng.normals(m * n * h),
            b1: rng.normals(h),
            w2: rng.normals(h * k),
            b2: rng.normals(k),
            l2: 0.0,
        }
    }

    #[test]
    fn shifted_one_hot_histograms_share_logits() {
        let mut rng = RngStream::new(2, 0);
        let p = random_cyclic(&mut rng, 1, 8, 5, 3);
        let one_hot = |at: usize| (0..8).map(|t| if t == at { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let base = p.logits(&one_hot(0));
        for at in 1..8 {
            let l = p.logits(&one_hot(at));
            assert_eq!(l.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), base.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn cyclic_predictions_are_shift_invariant_bit_for_bit(
            seed in any::<u64>(),
            m in 1usize..4,
            n in prop::sample::select(vec![4usize, 8, 12]),
            k in 0usize..12,
        ) {
            let mut rng = RngStream::new(seed, 3);
            let p = random_cyclic(&mut rng, m, n, 6, 3);
            let h: Vec<f64> = (0..m * n).map(|_| rng.uniform()).collect();
            let shifted = roll_rows(&h, n, k % n);
            let a: Vec<u64> = p.logits(&h).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = p.logits(&shifted).iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            let probe = Probe::Cyclic(p);
            prop_assert_eq!(probe.predict(&h), probe.predict(&shifted));
        }
    }
}
