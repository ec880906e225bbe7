//! Alternating VAE / discriminator training with validation-based stopping.

mod loss;
mod optim;

use std::io::Write;

use crate::config::{render, KeyValues};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::latent::{knot_distance, sample_angle_value, Noise};
use crate::model::{build_model, Bound, Group, Model, ModelConfig, ParameterStore};
use crate::tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::tensor::{BnMode, BnStats, RngStream, RunningStats, Tape, Tensor, Var};

pub use loss::{
    discriminator_loss, elbo_baseline_loss, elbo_disentangled_loss, feature_recon_loss, reconstruction_loss, vae_loss,
    LossBreakdown, LossVars, LossWeights,
};
pub use optim::{
    adam_step, apply_decoupled_weight_decay, sgd_momentum_step, AdamConfig, Optimizer, OptimizerState, SgdConfig,
};

pub const METRICS_HEADER: &str = "step\ttotal\trecon\tkl_iso\tkl_ori\tfeature\tdisc_accuracy";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub sgd: SgdConfig,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub val_interval: usize,
    pub patience: usize,
    /// Size of the fixed validation subset.
    pub val_patches: usize,
    pub train_discriminator: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            sgd: SgdConfig::default(),
            weight_decay: 1e-4,
            batch_size: 35,
            max_steps: 5000,
            val_interval: 50,
            patience: 10,
            val_patches: 256,
            train_discriminator: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let non_negative = [
            ("beta", w.beta),
            ("beta_iso", w.beta_iso),
            ("beta_ori", w.beta_ori),
            ("gamma", w.gamma),
            ("weight_decay", self.weight_decay),
            ("lr", self.adam.lr),
            ("disc_lr", self.sgd.lr),
            ("disc_momentum", self.sgd.momentum),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.val_interval == 0 || self.val_patches == 0 {
            return Err(Error::Config("val_interval and val_patches must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let w = &self.weights;
        [
            ("beta", w.beta.to_string()),
            ("beta_iso", w.beta_iso.to_string()),
            ("beta_ori", w.beta_ori.to_string()),
            ("gamma", w.gamma.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("adam_beta1", self.adam.beta1.to_string()),
            ("adam_beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("disc_lr", self.sgd.lr.to_string()),
            ("disc_momentum", self.sgd.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("val_interval", self.val_interval.to_string()),
            ("patience", self.patience.to_string()),
            ("val_patches", self.val_patches.to_string()),
            ("train_discriminator", self.train_discriminator.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Consumes the keys this config understands.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take("beta", &mut self.weights.beta)?;
        kv.take("beta_iso", &mut self.weights.beta_iso)?;
        kv.take("beta_ori", &mut self.weights.beta_ori)?;
        kv.take("gamma", &mut self.weights.gamma)?;
        kv.take("lr", &mut self.adam.lr)?;
        kv.take("adam_beta1", &mut self.adam.beta1)?;
        kv.take("adam_beta2", &mut self.adam.beta2)?;
        kv.take("adam_eps", &mut self.adam.eps)?;
        kv.take("disc_lr", &mut self.sgd.lr)?;
        kv.take("disc_momentum", &mut self.sgd.momentum)?;
        kv.take("weight_decay", &mut self.weight_decay)?;
        kv.take("batch_size", &mut self.batch_size)?;
        kv.take("max_steps", &mut self.max_steps)?;
        kv.take("val_interval", &mut self.val_interval)?;
        kv.take("patience", &mut self.patience)?;
        kv.take("val_patches", &mut self.val_patches)?;
        kv.take("train_discriminator", &mut self.train_discriminator)?;
        kv.take("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn render(&self) -> String {
        render(&self.to_pairs())
    }
}

/// One validation event.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub disc_accuracy: f64,
}

impl ValRecord {
    pub fn tsv(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.6}",
            self.step, l.total, l.recon, l.kl_iso, l.kl_ori, l.feature, self.disc_accuracy
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: ModelConfig,
    /// Parameters at the best validation loss.
    pub best: ParameterStore,
    pub best_step: usize,
    /// Parameters after the last step.
    pub last: ParameterStore,
    pub steps: usize,
    /// Per-step training loss.
    pub train_losses: Vec<LossBreakdown>,
    pub history: Vec<ValRecord>,
}

/// Round-robin over shuffled bags, one uniform patch per visit.
pub struct BagSampler {
    bags: Vec<Vec<usize>>,
    order: Vec<usize>,
    cursor: usize,
    rng: RngStream,
}

impl BagSampler {
    pub fn new(bags: Vec<Vec<usize>>, rng: RngStream) -> Result<Self> {
        if bags.is_empty() || bags.iter().any(Vec::is_empty) {
            return Err(Error::Empty("training bags"));
        }
        let order = (0..bags.len()).collect();
        let mut s = Self {
            bags,
            order,
            cursor: 0,
            rng,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.reshuffle();
                }
                let bag = &self.bags[self.order[self.cursor]];
                self.cursor += 1;
                bag[self.rng.below(bag.len())]
            })
            .collect()
    }
}

fn non_finite(tape: &Tape<f32>, what: &str) -> Error {
    Error::NonFinite(tape.first_non_finite().unwrap_or_else(|| what.to_string()))
}

/// Prefers a non-finite diagnostic over the error an op raised on it.
fn forward_error(tape: &Tape<f32>, e: Error) -> Error {
    tape.first_non_finite().map_or(e, Error::NonFinite)
}

fn collect_grads(tape: &Tape<f32>, p: &Bound<f32>, group: Group, store: &ParameterStore) -> Result<Vec<(String, Vec<f32>)>> {
    let mut out = Vec::new();
    for name in store.trainable(group) {
        if let Some(&v) = p.vars().get(&name) {
            let g = tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            out.push((name, g));
        }
    }
    Ok(out)
}

/// Folds batch statistics into the stored running averages.
pub fn fold_running_stats(store: &mut ParameterStore, stats: &[(String, BnStats<f32>)], momentum: f64) -> Result<()> {
    for (prefix, s) in stats {
        let mean_name = format!("{prefix}.bn.mean");
        let var_name = format!("{prefix}.bn.var");
        let mut running = RunningStats {
            mean: store.get(&mean_name)?.data().to_vec(),
            var: store.get(&var_name)?.data().to_vec(),
        };
        running.update(s, momentum as f32);
        store.get_mut(&mean_name)?.data_mut().copy_from_slice(&running.mean);
        store.get_mut(&var_name)?.data_mut().copy_from_slice(&running.var);
    }
    Ok(())
}

/// One encoder/decoder update; returns the training loss terms.
pub fn vae_step(
    model: &Model<f32>,
    store: &mut ParameterStore,
    opt: &mut OptimizerState,
    x: &Tensor<f32>,
    noise: &Noise,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let (grads, stats, values) = {
        let mut p = Bound::new(store, BnMode::Train, &[Group::Encoder, Group::Decoder]);
        let xv = tape.leaf(x, false);
        let l = vae_loss(&mut tape, model, &mut p, xv, noise, weights).map_err(|e| forward_error(&tape, e))?;
        let values = l.values(&tape);
        if !values.is_finite() {
            return Err(non_finite(&tape, "training loss"));
        }
        tape.backward(l.total)?;
        let mut grads = collect_grads(&tape, &p, Group::Encoder, store)?;
        grads.extend(collect_grads(&tape, &p, Group::Decoder, store)?);
        (grads, p.take_stats(), values)
    };
    opt.apply(store, &grads)?;
    fold_running_stats(store, &stats, model.config().bn_momentum)?;
    Ok(values)
}

/// One discriminator update on `x` against fresh reconstructions; returns
/// the cross-entropy and accuracy.
pub fn discriminator_step(
    model: &Model<f32>,
    store: &mut ParameterStore,
    opt: &mut OptimizerState,
    x: &Tensor<f32>,
    noise: &Noise,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let (grads, loss, acc) = {
        let mut p = Bound::new(store, BnMode::Train, &[Group::Discriminator]);
        let xv = tape.leaf(x, false);
        let (l, acc) = reconstruct(&mut tape, model, &mut p, xv, noise)
            .and_then(|x_hat| discriminator_loss(&mut tape, model, &mut p, xv, x_hat))
            .map_err(|e| forward_error(&tape, e))?;
        let loss = tape.scalar_value(l) as f64;
        if !loss.is_finite() {
            return Err(non_finite(&tape, "discriminator loss"));
        }
        tape.backward(l)?;
        (collect_grads(&tape, &p, Group::Discriminator, store)?, loss, acc)
    };
    opt.apply(store, &grads)?;
    Ok((loss, acc))
}

fn reconstruct(tape: &mut Tape<f32>, model: &Model<f32>, p: &mut Bound<f32>, x: Var, noise: &Noise) -> Result<Var> {
    let post = model.encode(tape, p, x)?;
    let z = model.sample(tape, &post, noise)?;
    let code = model.decoder_code(tape, &z)?;
    model.decode(tape, p, code)
}

/// Fixed validation batches with their noise.
struct Validation {
    batches: Vec<(Tensor<f32>, Noise)>,
}

const VAL_CHUNK: usize = 64;

impl Validation {
    fn new(data: &Dataset, model: &Model<f32>, limit: usize, mut rng: RngStream) -> Result<Self> {
        let mut rows = data.indices(Split::Val);
        if rows.is_empty() {
            return Err(Error::Empty("validation split"));
        }
        rng.shuffle(&mut rows);
        rows.truncate(limit);
        rows.sort_unstable();
        let mut batches = Vec::new();
        for chunk in rows.chunks(VAL_CHUNK) {
            let (g, u) = model.noise_len(chunk.len());
            batches.push((data.batch(chunk)?, Noise::draw(&mut rng, g, u)));
        }
        Ok(Self { batches })
    }

    /// Evaluation-mode loss and discriminator accuracy, weighted by batch size.
    fn evaluate(&self, model: &Model<f32>, store: &ParameterStore, weights: &LossWeights) -> Result<(LossBreakdown, f64)> {
        let mut sum = LossBreakdown::default();
        let mut acc = 0.0;
        let mut n = 0usize;
        for (x, noise) in &self.batches {
            let b = x.shape()[0];
            let mut tape = Tape::new();
            let mut p = Bound::new(store, BnMode::Eval, &[]);
            let xv = tape.leaf(x, false);
            let l = vae_loss(&mut tape, model, &mut p, xv, noise, weights).map_err(|e| forward_error(&tape, e))?;
            let v = l.values(&tape);
            if !v.is_finite() {
                return Err(non_finite(&tape, "validation loss"));
            }
            let (_, a) = discriminator_loss(&mut tape, model, &mut p, xv, l.reconstruction)?;
            let w = b as f64;
            sum.total += w * v.total;
            sum.recon += w * v.recon;
            sum.kl_iso += w * v.kl_iso;
            sum.kl_ori += w * v.kl_ori;
            sum.feature += w * v.feature;
            acc += w * a;
            n += b;
        }
        let k = 1.0 / n as f64;
        Ok((
            LossBreakdown {
                total: sum.total * k,
                recon: sum.recon * k,
                kl_iso: sum.kl_iso * k,
                kl_ori: sum.kl_ori * k,
                feature: sum.feature * k,
            },
            acc * k,
        ))
    }
}

/// Trains a fresh model and writes the metrics log to `log`.
///
/// Validation runs every `val_interval` steps and after the last step;
/// training stops after `patience` evaluations without improvement.
pub fn train(data: &Dataset, model_config: &ModelConfig, cfg: &TrainConfig, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.patch_size() != model_config.patch_size {
        return Err(Error::Config(format!(
            "patches are {} px, model expects {}",
            data.patch_size(),
            model_config.patch_size
        )));
    }
    let root = RngStream::new(cfg.seed, 0);
    let (model, mut store) = build_model(model_config, &mut root.split(1))?;
    let bags: Vec<Vec<usize>> = data.bags(Split::Train).into_iter().map(|(_, v)| v).collect();
    let mut sampler = BagSampler::new(bags, root.split(2))?;
    let mut noise_rng = root.split(3);
    let val = Validation::new(data, &model, cfg.val_patches, root.split(4))?;

    let mut vae_opt = OptimizerState::new(Optimizer::Adam(cfg.adam), cfg.weight_decay);
    let mut disc_opt = OptimizerState::new(Optimizer::Sgd(cfg.sgd), cfg.weight_decay);

    writeln!(log, "{METRICS_HEADER}")?;
    let mut history = Vec::new();
    let mut train_losses = Vec::new();
    let mut best = (f64::INFINITY, store.clone(), 0usize);
    let mut stale = 0usize;
    let mut steps = 0usize;
    while steps < cfg.max_steps {
        let rows = sampler.next_batch(cfg.batch_size);
        let x = data.batch(&rows)?;
        let (g, u) = model.noise_len(cfg.batch_size);
        let noise = Noise::draw(&mut noise_rng, g, u);
        train_losses.push(vae_step(&model, &mut store, &mut vae_opt, &x, &noise, &cfg.weights)?);
        if cfg.train_discriminator {
            discriminator_step(&model, &mut store, &mut disc_opt, &x, &noise)?;
        }
        steps += 1;
        if steps % cfg.val_interval == 0 || steps == cfg.max_steps {
            let (loss, disc_accuracy) = val.evaluate(&model, &store, &cfg.weights)?;
            let rec = ValRecord {
                step: steps,
                loss,
                disc_accuracy,
            };
            writeln!(log, "{}", rec.tsv())?;
            log.flush()?;
            history.push(rec);
            if loss.total < best.0 {
                best = (loss.total, store.clone(), steps);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        config: model.config().clone(),
        best: best.1,
        best_step: best.2,
        last: store,
        steps,
        train_losses,
        history,
    })
}

/// Which objective [`objective_grad_check`] differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// VAE loss with respect to encoder and decoder parameters.
    Vae,
    /// Discriminator cross-entropy with respect to discriminator parameters.
    Discriminator,
}

/// Closest a sampled angle may sit to a knot of the angular sampler, in bins.
const KNOT_MARGIN: f64 = 1e-3;
/// Closest a leaky-ReLU or clamp input may sit to its switch, in steps.
const KINK_MARGIN: f64 = 10.0;
const MAX_DRAWS: usize = 20;

/// Finite-difference check of a full objective in double precision on a
/// random batch with frozen noise and freshly initialised parameters.
/// Batches that put the check point near a non-differentiable point of a
/// leaky ReLU, a clamp or the angular sampler are redrawn.
pub fn objective_grad_check(
    config: &ModelConfig,
    weights: &LossWeights,
    objective: Objective,
    batch: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let rng = RngStream::new(seed, 0);
    let (model, store) = build_model(config, &mut rng.split(1))?;
    let model = Model::<f64>::new(model.config())?;
    let cfg = model.config();
    let groups: &[Group] = match objective {
        Objective::Vae => &[Group::Encoder, Group::Decoder],
        Objective::Discriminator => &[Group::Discriminator],
    };
    let names: Vec<String> = groups.iter().flat_map(|&g| store.trainable(g)).collect();
    let params: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| store.get(n).map(Tensor::cast::<f64>))
        .collect::<Result<_>>()?;
    let objective_of = |tape: &mut Tape<f64>, vars: &[Var], x: &Tensor<f64>, noise: &Noise| {
        let mut p = Bound::new(&store, BnMode::Train, &[]).with_vars(names.iter().cloned().zip(vars.iter().copied()));
        let xv = tape.leaf(x, false);
        match objective {
            Objective::Vae => Ok(vae_loss(tape, &model, &mut p, xv, noise, weights)?.total),
            Objective::Discriminator => {
                let post = model.encode(tape, &mut p, xv)?;
                let z = model.sample(tape, &post, noise)?;
                let code = model.decoder_code(tape, &z)?;
                let x_hat = model.decode(tape, &mut p, code)?;
                Ok(discriminator_loss(tape, &model, &mut p, xv, x_hat)?.0)
            }
        }
    };
    let mut data_rng = rng.split(2);
    let shape = [batch, cfg.image_channels, cfg.patch_size, cfg.patch_size];
    let n = cfg.orientations;
    let mut attempt = 0;
    let (x, noise) = loop {
        let x = Tensor::<f64>::new(&shape, data_rng.uniforms_open(shape.iter().product()))?;
        let (g, u) = model.noise_len(batch);
        let noise = Noise::draw(&mut data_rng, g, u);
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p, false)).collect();
        objective_of(&mut tape, &vars, &x, &noise)?;
        let mut margin = tape.kink_margin() / (KINK_MARGIN * opts.step);
        if u > 0 {
            let mut p = Bound::new(&store, BnMode::Train, &[]);
            let xv = tape.leaf(&x, false);
            let post = model.encode(&mut tape, &mut p, xv)?;
            let (q, _) = post.angular().expect("angular noise implies an angular posterior");
            for (row, &e) in tape.value(q).chunks(n).zip(&noise.uniform) {
                margin = margin.min(knot_distance(sample_angle_value(row, e)?, n) / KNOT_MARGIN);
            }
        }
        attempt += 1;
        if margin >= 1.0 || attempt == MAX_DRAWS {
            break (x, noise);
        }
    };
    grad_check(&params, opts, |tape, vars| objective_of(tape, vars, &x, &noise))
}
