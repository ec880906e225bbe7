//! Posterior parameterisations, reparameterised samplers and KL terms.
//!
//! Three latent families are supported: a plain Gaussian vector, a Gaussian
//! grid over `orientations x channels`, and the disentangled pair of a
//! rotation-invariant Gaussian block and a block of angles whose posteriors
//! are piecewise-constant densities over `N` orientation bins.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Scalar, Tape, Tensor, Var};

/// Bounds applied to log-σ heads before exponentiation.
pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 7.0;

#[derive(Clone, Debug, PartialEq)]
pub struct IsoPosterior {
    /// `[B, M]`
    pub mu: Tensor<f32>,
    /// `[B, M]`, strictly positive.
    pub sigma: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OriPosterior {
    /// `[B, M', N]`, each row on the probability simplex.
    pub q: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Se2GridPosterior {
    /// `[B, G, N]`
    pub mu: Tensor<f32>,
    pub sigma: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LatentPosterior {
    Gaussian(IsoPosterior),
    Se2Grid(Se2GridPosterior),
    Disentangled { iso: IsoPosterior, ori: OriPosterior },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    /// `[B, M]`
    pub z_iso: Tensor<f32>,
    /// `[B, M']`, angles in `[0, 2π)`.
    pub z_ori: Tensor<f32>,
}

/// Auxiliary noise for one forward pass, kept so a loss can be re-evaluated
/// exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Noise {
    /// Standard normal draws for every Gaussian latent.
    pub gauss: Vec<f64>,
    /// Uniform `(0, 1)` draws for every angular latent.
    pub uniform: Vec<f64>,
}

impl Noise {
    pub fn draw(rng: &mut RngStream, gauss: usize, uniform: usize) -> Self {
        Self {
            gauss: rng.normals(gauss),
            uniform: rng.uniforms_open(uniform),
        }
    }

    /// Noise that makes every sampler return its posterior centre: `μ` for
    /// Gaussians and the median of each angular density.
    pub fn centred(gauss: usize, uniform: usize) -> Self {
        Self {
            gauss: vec![0.0; gauss],
            uniform: vec![0.5; uniform],
        }
    }
}

/// `z = μ + ε·exp(log σ)` with `ε` held constant.
pub fn sample_gaussian<T: Scalar>(tape: &mut Tape<T>, mu: Var, log_sigma: Var, eps: &[f64]) -> Result<Var> {
    let shape = tape.shape(mu).to_vec();
    if eps.len() != tape.value(mu).len() {
        return Err(Error::shape("sample_gaussian", format!("{} noise values for {shape:?}", eps.len())));
    }
    let sigma = tape.exp(log_sigma);
    let e = tape.constant(&shape, eps.iter().map(|&v| T::of(v)).collect())?;
    let scaled = tape.mul(sigma, e)?;
    tape.add(mu, scaled)
}

/// `Σ ½(σ² + μ² − 1 − ln σ²)` over every element.
pub fn kl_gaussian<T: Scalar>(tape: &mut Tape<T>, mu: Var, log_sigma: Var) -> Result<Var> {
    let two_ls = tape.scale(log_sigma, T::of(2.0));
    let var = tape.exp(two_ls);
    let mu2 = tape.square(mu);
    let a = tape.add(var, mu2)?;
    let b = tape.sub(a, two_ls)?;
    let c = tape.add_scalar(b, -T::one());
    let s = tape.sum(c);
    Ok(tape.scale(s, T::of(0.5)))
}

/// `Σ_rows (ln N − H(Q_row))` from bin masses and their logarithms.
pub fn kl_angular<T: Scalar>(tape: &mut Tape<T>, q: Var, log_q: Var) -> Result<Var> {
    let n = *tape.shape(q).last().expect("non-empty shape");
    let shifted = tape.add_scalar(log_q, T::of((n as f64).ln()));
    let p = tape.mul(q, shifted)?;
    Ok(tape.sum(p))
}

/// Inverse-transform samples from the angular posteriors `q: [.., N]`.
/// Noise that rounds onto 0 or 1 in `T` is moved back inside `(0, 1)`.
pub fn sample_angles<T: Scalar>(tape: &mut Tape<T>, q: Var, eps: &[f64]) -> Result<Var> {
    let below_one = T::one() - T::epsilon();
    let eps: Vec<T> = eps
        .iter()
        .map(|&v| {
            let e = T::of(v);
            if v > 0.0 && v < 1.0 {
                e.max(T::min_positive_value()).min(below_one)
            } else {
                e
            }
        })
        .collect();
    tape.inverse_cdf_sample(q, &eps)
}

/// Soft one-hot orientation vectors for angles `z: [..]`, giving `[.., N]`.
pub fn encode_angles<T: Scalar>(tape: &mut Tape<T>, z: Var, n: usize, width: usize) -> Result<Var> {
    tape.angle_encode(z, n, width)
}

/// Repeats `z: [B, M]` along a new orientation axis: `[B, M, N]`.
pub fn expand_iso<T: Scalar>(tape: &mut Tape<T>, z: Var, n: usize) -> Result<Var> {
    let nd = tape.shape(z).len();
    tape.repeat_new_axis(z, nd, n)
}

/// Closed-form Gaussian KL for one `(μ, σ)` pair.
pub fn kl_gaussian_value(mu: f64, sigma: f64) -> f64 {
    0.5 * (sigma * sigma + mu * mu - 1.0 - (sigma * sigma).ln())
}

/// `ln N − H(q)` for one row of bin masses.
pub fn kl_angular_value(q: &[f64]) -> f64 {
    let n = q.len() as f64;
    q.iter().filter(|&&p| p > 0.0).map(|&p| p * (p * n).ln()).sum()
}

/// Plain-value inverse CDF for one row, mirroring [`Tape::inverse_cdf_sample`].
pub fn sample_angle_value(q: &[f64], eps: f64) -> Result<f64> {
    let mut t = Tape::<f64>::new();
    let qv = t.constant(&[q.len()], q.to_vec())?;
    let z = t.inverse_cdf_sample(qv, &[eps])?;
    Ok(t.scalar_value(z))
}

/// Plain-value soft encoding of one angle.
pub fn encode_angle_value(angle: f64, n: usize, width: usize) -> Result<Vec<f64>> {
    let mut t = Tape::<f64>::new();
    let z = t.constant(&[1], vec![angle])?;
    let e = t.angle_encode(z, n, width)?;
    Ok(t.value(e).to_vec())
}

/// Distance in bins from `angle` to the nearest point where the sampler or
/// the soft encoding is not differentiable (multiples of half a bin).
pub fn knot_distance(angle: f64, n: usize) -> f64 {
    let half_bins = 2.0 * angle * n as f64 / TAU;
    (half_bins - half_bins.round()).abs() / 2.0
}

/// Centre of orientation bin `j` in radians.
pub fn bin_centre(j: usize, n: usize) -> f64 {
    (j as f64 + 0.5) * TAU / n as f64
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckOptions};

    const N: usize = 8;

    /// Midpoint-rule `∫ q ln(q/p)` for Gaussians on `[−20σ, 20σ]`.
    fn kl_gaussian_quadrature(mu: f64, sigma: f64) -> f64 {
        let steps = 400_000;
        let (lo, hi) = (mu - 20.0 * sigma, mu + 20.0 * sigma);
        let h = (hi - lo) / steps as f64;
        let ln_norm = -0.5 * TAU.ln();
        (0..steps)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * h;
                let lq = ln_norm - sigma.ln() - 0.5 * ((x - mu) / sigma).powi(2);
                let lp = ln_norm - 0.5 * x * x;
                lq.exp() * (lq - lp) * h
            })
            .sum()
    }

    /// Piecewise quadrature of `∫ q ln(q/u)` for the bin density of `q`.
    fn kl_angular_quadrature(q: &[f64]) -> f64 {
        let n = q.len();
        let w = TAU / n as f64;
        let per_bin = 64;
        let u = 1.0 / TAU;
        let mut acc = 0.0;
        for &p in q {
            let dens = p / w;
            for _ in 0..per_bin {
                if dens > 0.0 {
                    acc += dens * (dens / u).ln() * w / per_bin as f64;
                }
            }
        }
        acc
    }

    fn kl_iso_tape(mu: &[f64], sigma: &[f64]) -> f64 {
        let mut t = Tape::<f64>::new();
        let m = t.constant(&[mu.len()], mu.to_vec()).unwrap();
        let ls = t.constant(&[mu.len()], sigma.iter().map(|s| s.ln()).collect()).unwrap();
        let k = kl_gaussian(&mut t, m, ls).unwrap();
        t.scalar_value(k)
    }

    fn kl_ori_tape(q: &[f64]) -> f64 {
        let mut t = Tape::<f64>::new();
        let logits = t.constant(&[1, q.len()], q.iter().map(|p| p.ln()).collect()).unwrap();
        let qv = t.softmax(logits, 1).unwrap();
        let lq = t.log_softmax(logits, 1).unwrap();
        let k = kl_angular(&mut t, qv, lq).unwrap();
        t.scalar_value(k)
    }

    #[test]
    fn gaussian_sampling_examples() {
        let mut t = Tape::<f64>::new();
        let mu = t.constant(&[2], vec![0.3, -1.2]).unwrap();
        let ls = t.constant(&[2], vec![LOG_SIGMA_MIN; 2]).unwrap();
        let z = sample_gaussian(&mut t, mu, ls, &[1.0, -1.0]).unwrap();
        assert!((t.value(z)[0] - 0.3).abs() < 1e-3 && (t.value(z)[1] + 1.2).abs() < 1e-3);
        let ls = t.constant(&[2], vec![0.7; 2]).unwrap();
        let z = sample_gaussian(&mut t, mu, ls, &[0.0, 0.0]).unwrap();
        assert_eq!(t.value(z), t.value(mu));
        assert!(sample_gaussian(&mut t, mu, ls, &[0.0]).is_err());
    }

    #[test]
    fn gaussian_sampling_statistics() {
        let mut rng = RngStream::new(1, 0);
        let n = 100_000;
        let eps = rng.normals(n);
        let mut t = Tape::<f64>::new();
        let mu = t.constant(&[n], vec![1.0; n]).unwrap();
        let ls = t.constant(&[n], vec![2f64.ln(); n]).unwrap();
        let z = sample_gaussian(&mut t, mu, ls, &eps).unwrap();
        let v = t.value(z);
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!((std - 2.0).abs() < 0.02, "{std}");
    }

    #[test]
    fn kl_iso_examples() {
        assert!(kl_iso_tape(&[0.0], &[1.0]).abs() < 1e-15);
        assert!((kl_iso_tape(&[1.0], &[1.0]) - 0.5).abs() < 1e-15);
        let want = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((kl_iso_tape(&[0.0], &[2.0]) - want).abs() < 1e-12);
        assert!((kl_gaussian_quadrature(0.0, 2.0) - want).abs() < 1e-6);
    }

    #[test]
    fn kl_ori_examples() {
        assert!(kl_ori_tape(&[1.0 / 8.0; 8]).abs() < 1e-12);
        assert!((kl_angular_value(&[1., 0., 0., 0., 0., 0., 0., 0.]) - 8f64.ln()).abs() < 1e-12);
        let half = [0.5, 0.5, 0., 0., 0., 0., 0., 0.];
        let want = 8f64.ln() - 2f64.ln();
        assert!((kl_angular_value(&half) - want).abs() < 1e-12);
        assert!((kl_angular_quadrature(&half) - want).abs() < 1e-9);
    }

    #[test]
    fn kl_matches_quadrature_on_random_posteriors() {
        let mut rng = RngStream::new(2, 0);
        for _ in 0..100 {
            let mu = rng.uniform_range(-3.0, 3.0);
            let sigma = rng.uniform_range(0.2, 3.0);
            let tape = kl_iso_tape(&[mu], &[sigma]);
            assert!((tape - kl_gaussian_quadrature(mu, sigma)).abs() < 1e-6);
            let logits: Vec<f64> = rng.normals(N).iter().map(|v| 2.0 * v).collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let q: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
            assert!((kl_ori_tape(&q) - kl_angular_quadrature(&q)).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_rounding_to_one_in_single_precision_is_kept_open() {
        let mut t = Tape::<f32>::new();
        let q = t.constant(&[2, N], vec![1.0 / N as f32; 2 * N]).unwrap();
        let z = sample_angles(&mut t, q, &[1.0 - 1e-10, 1e-50]).unwrap();
        let v = t.value(z);
        assert!(v.iter().all(|a| (0.0..TAU as f32).contains(a)), "{v:?}");
        assert!(v[0] > TAU as f32 - 1e-3 && v[1] < 1e-5, "{v:?}");
        assert!(sample_angles(&mut t, q, &[1.0, 0.5]).is_err());
    }

    #[test]
    fn sampler_examples() {
        let z = sample_angle_value(&[1.0 / 8.0; 8], 0.5).unwrap();
        assert!((z - std::f64::consts::PI).abs() < 1e-12, "{z}");
        let z = sample_angle_value(&[1., 0., 0., 0., 0., 0., 0., 0.], 0.5).unwrap();
        assert!((z - std::f64::consts::PI / 8.0).abs() < 1e-12, "{z}");
        assert!(sample_angle_value(&[0.5, 0.4], 0.5).is_err());
        assert!(sample_angle_value(&[1.2, -0.2], 0.5).is_err());
    }

    #[test]
    fn sampler_histogram_matches_posterior() {
        let mut rng = RngStream::new(3, 0);
        let raw: Vec<f64> = (0..N).map(|_| rng.uniform() + 0.05).collect();
        let total: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let draws = 100_000;
        let mut t = Tape::<f64>::new();
        let rows: Vec<f64> = (0..draws).flat_map(|_| q.iter().copied()).collect();
        let qv = t.constant(&[draws, N], rows).unwrap();
        let eps = rng.uniforms_open(draws);
        let z = sample_angles(&mut t, qv, &eps).unwrap();
        let mut hist = vec![0.0; N];
        for &a in t.value(z) {
            assert!((0.0..TAU).contains(&a));
            hist[(a / (TAU / N as f64)) as usize] += 1.0 / draws as f64;
        }
        let tv: f64 = 0.5 * hist.iter().zip(&q).map(|(h, p)| (h - p).abs()).sum::<f64>();
        assert!(tv < 0.01, "{tv}");
    }

    #[test]
    fn sampler_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(4, 0);
        let logits = Tensor::new(&[3, N], rng.normals(3 * N)).unwrap();
        // keep ε away from CDF knots: knots are partial sums, so choose ε at
        // segment midpoints of the current rows
        let mut t = Tape::<f64>::new();
        let lv = t.leaf(&logits, false);
        let q = t.softmax(lv, 1).unwrap();
        let qrows = t.value(q).to_vec();
        let eps: Vec<f64> = (0..3)
            .map(|r| {
                let row = &qrows[r * N..(r + 1) * N];
                let a = (0..N).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                row[a] + 0.5 * row[(a + 1) % N]
            })
            .collect();
        let r = grad_check(&[logits], &GradCheckOptions::default(), |t, v| {
            let q = t.softmax(v[0], 1)?;
            let z = sample_angles(t, q, &eps)?;
            let w = t.constant(&[3], vec![0.7, -1.3, 0.4])?;
            let p = t.mul(z, w)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn soft_encoding_examples() {
        let w = TAU / N as f64;
        let e = encode_angle_value(bin_centre(3, N), N, 1).unwrap();
        assert!((e[3] - 1.0).abs() < 1e-12 && (e.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let e = encode_angle_value(bin_centre(0, N) + 0.5 * w, N, 1).unwrap();
        assert!((e[0] - 0.5).abs() < 1e-12 && (e[1] - 0.5).abs() < 1e-12);
        let e = encode_angle_value(bin_centre(0, N) + 0.3 * w, N, 1).unwrap();
        assert!((e[0] - 0.7).abs() < 1e-12 && (e[1] - 0.3).abs() < 1e-12);
        // wrap-around between the last and first bins
        let e = encode_angle_value(TAU - 1e-9, N, 1).unwrap();
        assert!((e[0] - 0.5).abs() < 1e-6 && (e[N - 1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn expand_iso_examples() {
        let mut t = Tape::<f64>::new();
        let z = t.leaf(&Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap(), true);
        let e = expand_iso(&mut t, z, 4).unwrap();
        assert_eq!(t.shape(e), &[1, 2, 4]);
        assert_eq!(t.value(e), &[1., 1., 1., 1., 2., 2., 2., 2.]);
        let shifted = crate::se2::cyclic_shift(&t.tensor(e), 2, 3).unwrap();
        assert_eq!(shifted, t.tensor(e));
        let s = t.sum(e);
        t.backward(s).unwrap();
        assert_eq!(t.grad(z).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn se2_grid_sampling() {
        let mut rng = RngStream::new(5, 0);
        let mut t = Tape::<f64>::new();
        let mu = t.constant(&[1, 2, N], rng.normals(2 * N)).unwrap();
        let ls = t.constant(&[1, 2, N], vec![0.0; 2 * N]).unwrap();
        let z = sample_gaussian(&mut t, mu, ls, &[0.0; 2 * N]).unwrap();
        assert_eq!(t.value(z), t.value(mu));
        let zero = t.constant(&[1, 2, N], vec![0.0; 2 * N]).unwrap();
        let k = kl_gaussian(&mut t, zero, ls).unwrap();
        assert_eq!(t.scalar_value(k), 0.0);

        let draws = 100_000;
        let mus = [0.5, -2.0];
        let sig = [0.5, 1.5];
        let mu = t.constant(&[draws, 2], (0..draws).flat_map(|_| mus).collect()).unwrap();
        let ls = t.constant(&[draws, 2], (0..draws).flat_map(|_| sig.map(f64::ln)).collect()).unwrap();
        let z = sample_gaussian(&mut t, mu, ls, &rng.normals(2 * draws)).unwrap();
        for c in 0..2 {
            let v: Vec<f64> = t.value(z).iter().skip(c).step_by(2).copied().collect();
            let m = v.iter().sum::<f64>() / draws as f64;
            let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / draws as f64).sqrt();
            assert!((m - mus[c]).abs() < 0.02 && (s - sig[c]).abs() < 0.02);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kl_terms_are_nonnegative(seed in 0u64..1_000_000) {
            let mut rng = RngStream::new(seed, 7);
            let mu = rng.uniform_range(-5.0, 5.0);
            let sigma = rng.uniform_range(-6.0, 6.0).exp();
            prop_assert!(kl_iso_tape(&[mu], &[sigma]) >= 0.0);
            let logits: Vec<f64> = rng.normals(N).iter().map(|v| 4.0 * v).collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let q: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
            prop_assert!(kl_ori_tape(&q) >= -1e-12);
        }

        #[test]
        fn sampler_is_shift_equivariant(seed in 0u64..1_000_000, k in 0usize..N, eps in 0.001f64..0.999) {
            let mut rng = RngStream::new(seed, 8);
            let raw: Vec<f64> = (0..N).map(|_| rng.uniform()).collect();
            let total: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let shifted: Vec<f64> = (0..N).map(|j| q[(j + N - k) % N]).collect();
            let a = sample_angle_value(&q, eps).unwrap();
            let b = sample_angle_value(&shifted, eps).unwrap();
            let want = (a + k as f64 * TAU / N as f64).rem_euclid(TAU);
            let d = (b - want).abs();
            prop_assert!(d.min(TAU - d) < 1e-9, "{} vs {}", b, want);
        }

        #[test]
        fn soft_encoding_is_shift_equivariant(angle in 0.0f64..TAU, k in 0usize..N) {
            let a = encode_angle_value(angle, N, 1).unwrap();
            let b = encode_angle_value(angle + k as f64 * TAU / N as f64, N, 1).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for j in 0..N {
                prop_assert!((b[(j + k) % N] - a[j]).abs() < 1e-9);
            }
        }

        #[test]
        fn concentrated_round_trip(j in 0usize..N, eps in 0.0001f64..0.9999) {
            let mut q = vec![0.0; N];
            q[j] = 1.0;
            let z = sample_angle_value(&q, eps).unwrap();
            let e = encode_angle_value(z, N, 1).unwrap();
            prop_assert!(e[j] >= 0.5 - 1e-9, "{:?}", e);
        }
    }
}
