//! Self-checks runnable from the command line: rotation equivariance of the
//! networks with random weights and finite-difference gradients of every
//! layer and objective.

use std::f64::consts::{FRAC_PI_2, TAU};

use crate::error::Result;
use crate::latent::{encode_angles, kl_angular, kl_gaussian, sample_angles, sample_gaussian};
use crate::model::{build_model, Bound, LatentVars, Model, ModelConfig, ParameterStore, Variant};
use crate::se2::{
    cyclic_shift, lifting_conv, orientation_batch_norm, orientation_project, rotate_image, se2_conv,
    se2_conv_transpose, GroupKernel, LiftingKernel, Projection, RotationTable,
};
use crate::tensor::gradcheck::{grad_check, GradCheckOptions};
use crate::tensor::{BnMode, RngStream, RunningStats, Tape, Tensor, Var};
use crate::train::{objective_grad_check, LossWeights, Objective};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative error observed.
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            error,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        format!("{verdict} {:<44} error {:.3e} (tolerance {:.0e})", self.name, self.error, self.tolerance)
    }
}

/// `max |a − b| / (max |a| + 1e-6)`.
pub fn relative_inf(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
    let scale = a.data().iter().map(|x| x.abs()).fold(0f32, f32::max);
    diff as f64 / (scale as f64 + 1e-6)
}

pub const EQUIVARIANCE_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;

fn encode(model: &Model<f32>, store: &ParameterStore, x: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let mut tape = Tape::new();
    let mut p = Bound::new(store, BnMode::Eval, &[]);
    let xv = tape.leaf(x, false);
    let post = model.encode(&mut tape, &mut p, xv)?;
    let (mu, ls) = post.gaussian();
    let mut out = vec![tape.tensor(mu), tape.tensor(ls)];
    if let Some((q, _)) = post.angular() {
        out.push(tape.tensor(q));
    }
    Ok(out)
}

fn decode(model: &Model<f32>, store: &ParameterStore, z_iso: &Tensor<f32>, z_ori: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let mut p = Bound::new(store, BnMode::Eval, &[]);
    let gaussian = tape.leaf(z_iso, false);
    let angles = Some(tape.leaf(z_ori, false));
    let code = model.decoder_code(&mut tape, &LatentVars { gaussian, angles })?;
    let y = model.decode(&mut tape, &mut p, code)?;
    Ok(tape.tensor(y))
}

/// Quarter-turn checks on `inputs` random images for the disentangled and
/// grid variants of `base` (orientations divisible by 4).
pub fn equivariance_suite(base: &ModelConfig, inputs: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let rng = RngStream::new(seed, 0);
    let mut data_rng = rng.split(3);
    let n = base.orientations;
    let shape = [inputs, base.image_channels, base.patch_size, base.patch_size];
    let x = Tensor::new(&shape, data_rng.normals(shape.iter().product()).into_iter().map(|v| v as f32).collect())?;
    let mut out = Vec::new();

    let cfg = ModelConfig {
        variant: Variant::Disentangled,
        ..base.clone()
    };
    let (model, store) = build_model(&cfg, &mut rng.split(1))?;
    let reference = encode(&model, &store, &x)?;
    let (mut mu, mut sigma, mut q) = (0.0f64, 0.0f64, 0.0f64);
    for k in 1..4 {
        let rot = encode(&model, &store, &rotate_image(&x, k)?)?;
        mu = mu.max(relative_inf(&reference[0], &rot[0]));
        sigma = sigma.max(relative_inf(&reference[1], &rot[1]));
        let want = cyclic_shift(&reference[2], 2, k as isize * n as isize / 4)?;
        q = q.max(relative_inf(&want, &rot[2]));
    }
    out.push(CheckResult::new("invariant posterior mean", mu, EQUIVARIANCE_TOLERANCE));
    out.push(CheckResult::new("invariant posterior scale", sigma, EQUIVARIANCE_TOLERANCE));
    out.push(CheckResult::new("orientation posterior shift", q, EQUIVARIANCE_TOLERANCE));

    let z_iso = Tensor::new(
        &[inputs, cfg.latent_iso],
        data_rng.normals(inputs * cfg.latent_iso).into_iter().map(|v| v as f32).collect(),
    )?;
    let angles: Vec<f64> = (0..inputs * cfg.latent_ori).map(|_| data_rng.uniform() * TAU).collect();
    let to_tensor = |a: &[f64]| Tensor::new(&[inputs, cfg.latent_ori], a.iter().map(|&v| v as f32).collect());
    let image = decode(&model, &store, &z_iso, &to_tensor(&angles)?)?;
    let mut dec = 0.0f64;
    for k in 1..4 {
        let turned: Vec<f64> = angles.iter().map(|a| (a + k as f64 * FRAC_PI_2).rem_euclid(TAU)).collect();
        let got = decode(&model, &store, &z_iso, &to_tensor(&turned)?)?;
        dec = dec.max(relative_inf(&rotate_image(&image, k)?, &got));
    }
    out.push(CheckResult::new("decoder rotation under angle shift", dec, EQUIVARIANCE_TOLERANCE));

    let cfg = ModelConfig {
        variant: Variant::Se2Grid,
        ..base.clone()
    };
    let (model, store) = build_model(&cfg, &mut rng.split(2))?;
    let reference = encode(&model, &store, &x)?;
    let mut grid = 0.0f64;
    for k in 1..4 {
        let rot = encode(&model, &store, &rotate_image(&x, k)?)?;
        for h in 0..2 {
            let want = cyclic_shift(&reference[h], 2, k as isize * n as isize / 4)?;
            grid = grid.max(relative_inf(&want, &rot[h]));
        }
    }
    out.push(CheckResult::new("grid posterior shift", grid, EQUIVARIANCE_TOLERANCE));
    Ok(out)
}

fn random(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    Tensor::new(shape, rng.normals(shape.iter().product())).expect("sized to shape")
}

/// `Σ w ⊙ y` with fixed random `w`.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let n = t.value(y).len();
    let w = t.constant(&t.shape(y).to_vec(), RngStream::new(seed, 0x77).normals(n))?;
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type LayerFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn layer_cases(rng: &mut RngStream) -> Result<Vec<(&'static str, Vec<Tensor<f64>>, LayerFn)>> {
    const N: usize = 8;
    let table = RotationTable::new(5, N)?;
    let lift = LiftingKernel::<f64>::new(&table, 2, 2)?;
    let group = GroupKernel::<f64>::new(&table, 2, 2)?;
    let x = random(rng, &[2, 2, 7, 7]);
    let h = random(rng, &[2, 2, N, 5, 5]);
    let vec2 = random(rng, &[2]);
    let logits = random(rng, &[3, 2, N]);
    let eps: Vec<f64> = (0..6).map(|_| rng.uniform_open()).collect();
    let gauss: Vec<f64> = rng.normals(6);
    let angles = Tensor::new(&[3, 2], (0..6).map(|_| rng.uniform() * TAU).collect())?;
    let running = RunningStats::<f64>::new(2);

    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, LayerFn)> = vec![
        (
            "conv2d",
            vec![x.clone(), random(rng, &[3, 2, 3, 3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1)),
        ),
        (
            "conv_transpose2d",
            vec![x.clone(), random(rng, &[2, 3, 3, 3])],
            Box::new(|t, v| t.conv_transpose2d(v[0], v[1], 1, 1)),
        ),
        ("max_pool2d", vec![x.clone()], Box::new(|t, v| t.max_pool2d(v[0]))),
        ("upsample2d", vec![x.clone()], Box::new(|t, v| t.upsample2d(v[0], 13, 13))),
        ("leaky_relu", vec![x.clone()], Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.1)))),
        (
            "batch_norm",
            vec![x.clone(), vec2.clone(), vec2.clone()],
            Box::new(move |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1, 1e-5)?.0)),
        ),
        (
            "linear",
            vec![random(rng, &[3, 4]), random(rng, &[4, 5]), random(rng, &[5])],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                t.channel_affine(y, None, Some(v[2]), 1)
            }),
        ),
        (
            "lifting_conv",
            vec![x.clone(), random(rng, &[2, 2, 5, 5])],
            Box::new(move |t, v| lifting_conv(t, v[0], v[1], &lift, 2)),
        ),
        (
            "se2_conv",
            vec![h.clone(), random(rng, &[2, 2, N, 5, 5])],
            Box::new({
                let group = group.clone();
                move |t, v| se2_conv(t, v[0], v[1], &group, 2)
            }),
        ),
        (
            "se2_conv_transpose",
            vec![h.clone(), random(rng, &[2, 2, N, 5, 5])],
            Box::new(move |t, v| se2_conv_transpose(t, v[0], v[1], &group, 1, 2)),
        ),
        (
            "orientation_batch_norm",
            vec![h.clone(), vec2.clone(), vec2.clone()],
            Box::new(move |t, v| Ok(orientation_batch_norm(t, v[0], v[1], v[2], &running, BnMode::Train, 1e-5)?.0)),
        ),
        (
            "orientation_project_mean",
            vec![h.clone()],
            Box::new(|t, v| orientation_project(t, v[0], Projection::Mean)),
        ),
        (
            "orientation_project_max",
            vec![h.clone()],
            Box::new(|t, v| orientation_project(t, v[0], Projection::Max)),
        ),
        ("log_softmax", vec![logits.clone()], Box::new(|t, v| t.log_softmax(v[0], 2))),
        ("softplus", vec![vec2.clone()], Box::new(|t, v| Ok(t.softplus(v[0])))),
        (
            "gaussian_sampler",
            vec![random(rng, &[3, 2]), random(rng, &[3, 2])],
            Box::new(move |t, v| sample_gaussian(t, v[0], v[1], &gauss)),
        ),
        (
            "angular_sampler",
            vec![logits.clone()],
            Box::new(move |t, v| {
                let q = t.softmax(v[0], 2)?;
                sample_angles(t, q, &eps)
            }),
        ),
        (
            "angle_encoding",
            vec![angles],
            Box::new(|t, v| encode_angles(t, v[0], 8, 1)),
        ),
        (
            "kl_gaussian",
            vec![random(rng, &[3, 2]), random(rng, &[3, 2])],
            Box::new(|t, v| kl_gaussian(t, v[0], v[1])),
        ),
        (
            "kl_angular",
            vec![logits],
            Box::new(|t, v| {
                let q = t.softmax(v[0], 2)?;
                let lq = t.log_softmax(v[0], 2)?;
                kl_angular(t, q, lq)
            }),
        ),
    ];
    cases.shrink_to_fit();
    Ok(cases)
}

/// Configuration small enough for finite differences of whole objectives.
pub fn gradient_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        channels: [2, 3, 3, 4],
        latent_iso: 3,
        latent_ori: 2,
        latent_baseline: 4,
        grid_channels: 2,
        patch_size: 20,
        disc_channels: [2, 3, 3, 4],
        ..ModelConfig::paper(variant)
    }
}

/// Finite-difference checks of every layer type and of the full objectives
/// in double precision. `max_coords` bounds the coordinates checked per
/// tensor of the objectives.
pub fn gradient_suite(seed: u64, max_coords: usize) -> Result<Vec<CheckResult>> {
    let mut rng = RngStream::new(seed, 0);
    let mut out = Vec::new();
    for (i, (name, params, f)) in layer_cases(&mut rng)?.into_iter().enumerate() {
        let opts = GradCheckOptions {
            max_coords: Some(64),
            seed: seed + i as u64,
            ..GradCheckOptions::default()
        };
        let r = grad_check(&params, &opts, |t, v| {
            let y = f(t, v)?;
            project(t, y, i as u64)
        })?;
        out.push(CheckResult::new(format!("layer {name}"), r.max_rel_error, GRADIENT_TOLERANCE));
    }
    let opts = GradCheckOptions {
        max_coords: Some(max_coords),
        seed,
        ..GradCheckOptions::default()
    };
    let plain = LossWeights {
        gamma: 0.0,
        ..LossWeights::default()
    };
    let with_features = LossWeights {
        gamma: 1.0,
        ..LossWeights::default()
    };
    let objectives = [
        ("objective gaussian elbo (baseline)", Variant::Baseline, plain, Objective::Vae),
        ("objective gaussian elbo (grid)", Variant::Se2Grid, plain, Objective::Vae),
        ("objective disentangled elbo", Variant::Disentangled, plain, Objective::Vae),
        ("objective disentangled + feature loss", Variant::Disentangled, with_features, Objective::Vae),
        ("objective discriminator", Variant::Disentangled, plain, Objective::Discriminator),
    ];
    for (name, variant, weights, objective) in objectives {
        let r = objective_grad_check(&gradient_config(variant), &weights, objective, 2, seed, &opts)?;
        out.push(CheckResult::new(name, r.max_rel_error, GRADIENT_TOLERANCE));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        let cfg = ModelConfig {
            channels: [2, 3, 3, 4],
            latent_iso: 3,
            latent_ori: 2,
            grid_channels: 2,
            patch_size: 20,
            ..ModelConfig::desk(Variant::Disentangled)
        };
        for r in equivariance_suite(&cfg, 3, 1).unwrap() {
            assert!(r.passed(), "{}", r.line());
        }
        for r in gradient_suite(2, 3).unwrap() {
            assert!(r.passed(), "{}", r.line());
        }
    }

    #[test]
    fn result_lines_show_verdict() {
        assert!(CheckResult::new("x", 0.5, 1.0).line().starts_with("PASS x"));
        assert!(CheckResult::new("x", 2.0, 1.0).line().starts_with("FAIL x"));
    }
}
