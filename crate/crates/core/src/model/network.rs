use std::collections::BTreeMap;

use super::store::{Group, Role};
use super::{ModelConfig, ParameterStore, Variant};
use crate::error::{Error, Result};
use crate::latent::{
    encode_angles, expand_iso, sample_angles, sample_gaussian, IsoPosterior, LatentPosterior, Noise, OriPosterior,
    Se2GridPosterior, LOG_SIGMA_MAX, LOG_SIGMA_MIN,
};
use crate::se2::{
    lifting_conv, orientation_batch_norm, orientation_project, se2_conv, se2_conv_transpose, GroupKernel,
    LiftingKernel, Projection, RotationTable,
};
use crate::tensor::{BnMode, BnStats, RunningStats, Scalar, Tape, Tensor, Var};

/// Parameters of one [`ParameterStore`] bound to a tape.
///
/// Tensors are copied onto the tape on first use; names in trainable groups
/// become differentiable leaves. Batch-norm statistics gathered in training
/// mode are collected for the caller to fold into the running averages.
pub struct Bound<'a, T: Scalar> {
    store: &'a ParameterStore,
    vars: BTreeMap<String, Var>,
    trainable: Vec<Group>,
    mode: BnMode,
    stats: Vec<(String, BnStats<T>)>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn new(store: &'a ParameterStore, mode: BnMode, trainable: &[Group]) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
            trainable: trainable.to_vec(),
            mode,
            stats: Vec::new(),
        }
    }

    /// Uses the given vars for these names instead of copies from the store.
    pub fn with_vars(mut self, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        self.vars.extend(vars);
        self
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn var(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.cast::<T>();
        let grad = self.trainable.contains(&Group::of(name)?) && Role::of(name)?.is_trainable();
        let v = tape.leaf(&t, grad);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Every name bound so far with its var.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn take_stats(&mut self) -> Vec<(String, BnStats<T>)> {
        std::mem::take(&mut self.stats)
    }

    fn running(&self, prefix: &str) -> Result<RunningStats<T>> {
        let read = |s: &str| -> Result<Vec<T>> {
            Ok(self.store.get(&format!("{prefix}.bn.{s}"))?.data().iter().map(|&v| T::of(v as f64)).collect())
        };
        Ok(RunningStats {
            mean: read("mean")?,
            var: read("var")?,
        })
    }
}

/// Encoder heads on the tape.
#[derive(Clone, Copy, Debug)]
pub enum PosteriorVars {
    /// `[B, L]` each.
    Gaussian { mu: Var, log_sigma: Var },
    /// `[B, G, N]` each.
    Grid { mu: Var, log_sigma: Var },
    /// `mu`, `log_sigma`: `[B, M]`; `q`, `log_q`: `[B, M', N]`.
    Disentangled { mu: Var, log_sigma: Var, q: Var, log_q: Var },
}

impl PosteriorVars {
    pub fn gaussian(&self) -> (Var, Var) {
        match *self {
            PosteriorVars::Gaussian { mu, log_sigma }
            | PosteriorVars::Grid { mu, log_sigma }
            | PosteriorVars::Disentangled { mu, log_sigma, .. } => (mu, log_sigma),
        }
    }

    pub fn angular(&self) -> Option<(Var, Var)> {
        match *self {
            PosteriorVars::Disentangled { q, log_q, .. } => Some((q, log_q)),
            _ => None,
        }
    }

    /// Copies the posterior off the tape.
    pub fn to_values<T: Scalar>(&self, tape: &Tape<T>) -> LatentPosterior {
        let get = |v: Var| tape.tensor(v).cast::<f32>();
        let sigma = |v: Var| {
            let t = tape.tensor(v);
            Tensor::new(t.shape(), t.data().iter().map(|x| x.as_f64().exp() as f32).collect())
                .expect("same shape")
        };
        match *self {
            PosteriorVars::Gaussian { mu, log_sigma } => LatentPosterior::Gaussian(IsoPosterior {
                mu: get(mu),
                sigma: sigma(log_sigma),
            }),
            PosteriorVars::Grid { mu, log_sigma } => LatentPosterior::Se2Grid(Se2GridPosterior {
                mu: get(mu),
                sigma: sigma(log_sigma),
            }),
            PosteriorVars::Disentangled { mu, log_sigma, q, .. } => LatentPosterior::Disentangled {
                iso: IsoPosterior {
                    mu: get(mu),
                    sigma: sigma(log_sigma),
                },
                ori: OriPosterior { q: get(q) },
            },
        }
    }
}

/// Latent draws on the tape: the Gaussian block (`[B, L]`, `[B, G, N]` or
/// `[B, M]`) and, for the disentangled variant, angles `[B, M']`.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub gaussian: Var,
    pub angles: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorFeatures {
    /// `[B]`
    pub logit: Var,
    /// Outputs of the configured blocks.
    pub features: Vec<Var>,
}

#[derive(Clone, Debug)]
enum ConvPlan<T> {
    Plain,
    Lift(LiftingKernel<T>),
    Group(GroupKernel<T>),
}

/// Kernel expansion plans for one configuration.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    encoder: Vec<ConvPlan<T>>,
    head: ConvPlan<T>,
    decoder_input: ConvPlan<T>,
    decoder: Vec<ConvPlan<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let n = config.orientations;
        let s4 = config.spatial_sizes()[4];
        let c = config.channels;
        let proj = config.intermediate_projection;
        if !config.variant.is_se2() {
            return Ok(Self {
                encoder: vec![ConvPlan::Plain; 4],
                head: ConvPlan::Plain,
                decoder_input: ConvPlan::Plain,
                decoder: vec![ConvPlan::Plain; 4],
                config,
            });
        }
        let spatial = RotationTable::new(config.kernel_size, n)?;
        let collapse = RotationTable::new(s4, n)?;
        let mut encoder = Vec::new();
        for i in 0..4 {
            encoder.push(if i == 0 {
                ConvPlan::Lift(LiftingKernel::new(&spatial, c[0], config.image_channels)?)
            } else if proj {
                ConvPlan::Lift(LiftingKernel::new(&spatial, c[i], c[i - 1])?)
            } else {
                ConvPlan::Group(GroupKernel::new(&spatial, c[i], c[i - 1])?)
            });
        }
        let (heads, code) = match config.variant {
            Variant::Se2Grid => (2 * config.grid_channels, config.grid_channels),
            _ => (2 * config.latent_iso + config.latent_ori, config.latent_iso + config.latent_ori),
        };
        let outs = [c[2], c[1], c[0], c[0]];
        let mut decoder = Vec::new();
        let mut cin = c[3];
        for &cout in &outs {
            decoder.push(if proj {
                ConvPlan::Lift(LiftingKernel::new(&spatial, cout, cin)?)
            } else {
                ConvPlan::Group(GroupKernel::new(&spatial, cin, cout)?)
            });
            cin = cout;
        }
        Ok(Self {
            encoder,
            head: ConvPlan::Group(GroupKernel::new(&collapse, heads, c[3])?),
            decoder_input: ConvPlan::Group(GroupKernel::new(&collapse, code, c[3])?),
            decoder,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Lengths of the Gaussian and uniform noise consumed by one batch.
    pub fn noise_len(&self, batch: usize) -> (usize, usize) {
        (
            batch * self.config.gaussian_latents(),
            batch * self.config.angular_latents(),
        )
    }

    fn conv(&self, tape: &mut Tape<T>, p: &mut Bound<T>, plan: &ConvPlan<T>, prefix: &str, x: Var, pad: usize, transposed: bool) -> Result<Var> {
        let k = p.var(tape, &format!("{prefix}.kernel"))?;
        match plan {
            ConvPlan::Plain if transposed => tape.conv_transpose2d(x, k, 1, pad),
            ConvPlan::Plain => tape.conv2d(x, k, 1, pad),
            ConvPlan::Lift(plan) => lifting_conv(tape, x, k, plan, pad),
            ConvPlan::Group(plan) if transposed => se2_conv_transpose(tape, x, k, plan, 1, pad),
            ConvPlan::Group(plan) => se2_conv(tape, x, k, plan, pad),
        }
    }

    fn norm_act(&self, tape: &mut Tape<T>, p: &mut Bound<T>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = p.var(tape, &format!("{prefix}.bn.scale"))?;
        let beta = p.var(tape, &format!("{prefix}.bn.shift"))?;
        let running = p.running(prefix)?;
        let eps = T::of(self.config.bn_eps);
        let (y, stats) = if tape.shape(x).len() == 5 {
            orientation_batch_norm(tape, x, gamma, beta, &running, p.mode, eps)?
        } else {
            if p.mode == BnMode::Train && tape.shape(x)[0] < 2 {
                return Err(Error::invalid("training-mode batch norm needs a batch of at least 2"));
            }
            tape.batch_norm(x, gamma, beta, 1, &running, p.mode, eps)?
        };
        if let Some(s) = stats {
            p.stats.push((prefix.to_string(), s));
        }
        Ok(tape.leaky_relu(y, T::of(self.config.leaky_slope)))
    }

    fn add_bias(&self, tape: &mut Tape<T>, p: &mut Bound<T>, name: &str, x: Var) -> Result<Var> {
        let b = p.var(tape, name)?;
        tape.channel_affine(x, None, Some(b), 1)
    }

    /// Posterior heads for images `[B, C, P, P]`.
    pub fn encode(&self, tape: &mut Tape<T>, p: &mut Bound<T>, x: Var) -> Result<PosteriorVars> {
        let cfg = &self.config;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != cfg.image_channels || xs[2] != cfg.patch_size || xs[3] != cfg.patch_size {
            return Err(Error::shape(
                "encode",
                format!(
                    "expected [B, {}, {p}, {p}], got {xs:?}",
                    cfg.image_channels,
                    p = cfg.patch_size
                ),
            ));
        }
        let b = xs[0];
        let pad = cfg.kernel_size / 2;
        let mut h = x;
        for (i, plan) in self.encoder.iter().enumerate() {
            let prefix = format!("enc.block{i}");
            h = self.conv(tape, p, plan, &prefix, h, pad, false)?;
            h = self.norm_act(tape, p, &prefix, h)?;
            if cfg.variant.is_se2() && cfg.intermediate_projection && i < 3 {
                h = orientation_project(tape, h, Projection::Max)?;
            }
            h = tape.max_pool2d(h)?;
        }
        let y = self.conv(tape, p, &self.head, "enc.head", h, 0, false)?;
        let clamp = |tape: &mut Tape<T>, v: Var| tape.clamp(v, T::of(LOG_SIGMA_MIN), T::of(LOG_SIGMA_MAX));
        let n = cfg.orientations;
        Ok(match cfg.variant {
            Variant::Baseline => {
                let l = cfg.latent_baseline;
                let y = tape.reshape(y, &[b, 2 * l])?;
                let y = self.add_bias(tape, p, "enc.head.bias", y)?;
                let mu = tape.slice_axis(y, 1, 0, l)?;
                let ls = tape.slice_axis(y, 1, l, l)?;
                PosteriorVars::Gaussian {
                    mu,
                    log_sigma: clamp(tape, ls),
                }
            }
            Variant::Se2Grid => {
                let g = cfg.grid_channels;
                let y = tape.reshape(y, &[b, 2 * g, n])?;
                let y = self.add_bias(tape, p, "enc.head.bias", y)?;
                let mu = tape.slice_axis(y, 1, 0, g)?;
                let ls = tape.slice_axis(y, 1, g, g)?;
                PosteriorVars::Grid {
                    mu,
                    log_sigma: clamp(tape, ls),
                }
            }
            Variant::Disentangled => {
                let (m, mo) = (cfg.latent_iso, cfg.latent_ori);
                let y = tape.reshape(y, &[b, 2 * m + mo, n])?;
                let y = self.add_bias(tape, p, "enc.head.bias", y)?;
                let mu = tape.slice_axis(y, 1, 0, m)?;
                let mu = tape.mean_axis(mu, 2)?;
                let ls = tape.slice_axis(y, 1, m, m)?;
                let ls = tape.mean_axis(ls, 2)?;
                let logits = tape.slice_axis(y, 1, 2 * m, mo)?;
                PosteriorVars::Disentangled {
                    mu,
                    log_sigma: clamp(tape, ls),
                    q: tape.softmax(logits, 2)?,
                    log_q: tape.log_softmax(logits, 2)?,
                }
            }
        })
    }

    /// Reparameterised draws from `post` using the given noise.
    pub fn sample(&self, tape: &mut Tape<T>, post: &PosteriorVars, noise: &Noise) -> Result<LatentVars> {
        let (mu, ls) = post.gaussian();
        let gaussian = sample_gaussian(tape, mu, ls, &noise.gauss)?;
        let angles = match post.angular() {
            Some((q, _)) => Some(sample_angles(tape, q, &noise.uniform)?),
            None => None,
        };
        Ok(LatentVars { gaussian, angles })
    }

    /// Decoder input from latent draws: the Gaussian vector for the
    /// baseline, the grid for `se2_grid`, and the concatenation of repeated
    /// invariant values with soft-encoded angles (`[B, M + M', N]`) for the
    /// disentangled variant.
    pub fn decoder_code(&self, tape: &mut Tape<T>, z: &LatentVars) -> Result<Var> {
        match (self.config.variant, z.angles) {
            (Variant::Disentangled, Some(angles)) => {
                let n = self.config.orientations;
                let iso = expand_iso(tape, z.gaussian, n)?;
                let ori = encode_angles(tape, angles, n, self.config.angle_width)?;
                tape.concat(&[iso, ori], 1)
            }
            (Variant::Disentangled, None) => Err(Error::invalid("disentangled decoding needs angles")),
            _ => Ok(z.gaussian),
        }
    }

    /// Mean image `[B, C, P, P]` for a decoder code.
    pub fn decode(&self, tape: &mut Tape<T>, p: &mut Bound<T>, code: Var) -> Result<Var> {
        let cfg = &self.config;
        let cs = tape.shape(code).to_vec();
        let b = cs[0];
        let n = cfg.orientations;
        let (want, h) = match cfg.variant {
            Variant::Baseline => (vec![b, cfg.latent_baseline], vec![b, cfg.latent_baseline, 1, 1]),
            Variant::Se2Grid => (vec![b, cfg.grid_channels, n], vec![b, cfg.grid_channels, n, 1, 1]),
            Variant::Disentangled => {
                let c = cfg.latent_iso + cfg.latent_ori;
                (vec![b, c, n], vec![b, c, n, 1, 1])
            }
        };
        if cs != want {
            return Err(Error::shape("decode", format!("expected code {want:?}, got {cs:?}")));
        }
        let se2 = cfg.variant.is_se2();
        let mut h = tape.reshape(code, &h)?;
        h = self.conv(tape, p, &self.decoder_input, "dec.input", h, 0, true)?;
        h = self.norm_act(tape, p, "dec.input", h)?;
        if se2 && cfg.intermediate_projection {
            h = orientation_project(tape, h, Projection::Max)?;
        }
        let sizes = cfg.spatial_sizes();
        let pad = cfg.kernel_size / 2;
        for (j, plan) in self.decoder.iter().enumerate() {
            let prefix = format!("dec.block{j}");
            let t = sizes[3 - j];
            h = tape.upsample2d(h, t, t)?;
            h = self.conv(tape, p, plan, &prefix, h, pad, true)?;
            h = self.norm_act(tape, p, &prefix, h)?;
            if se2 && j == 3 {
                h = orientation_project(tape, h, Projection::Mean)?;
            } else if se2 && cfg.intermediate_projection {
                h = orientation_project(tape, h, Projection::Max)?;
            }
        }
        let k = p.var(tape, "dec.output.kernel")?;
        let y = tape.conv2d(h, k, 1, 0)?;
        self.add_bias(tape, p, "dec.output.bias", y)
    }

    /// Plain CNN critic: four blocks of convolution, bias, leaky ReLU and
    /// max-pooling, then a dense logit.
    pub fn discriminate(&self, tape: &mut Tape<T>, p: &mut Bound<T>, x: Var) -> Result<DiscriminatorFeatures> {
        let cfg = &self.config;
        let b = tape.shape(x)[0];
        let mut h = x;
        let mut features = Vec::new();
        for i in 0..4 {
            let k = p.var(tape, &format!("disc.block{i}.kernel"))?;
            h = tape.conv2d(h, k, 1, cfg.kernel_size / 2)?;
            h = self.add_bias(tape, p, &format!("disc.block{i}.bias"), h)?;
            h = tape.leaky_relu(h, T::of(cfg.leaky_slope));
            h = tape.max_pool2d(h)?;
            if cfg.disc_features.contains(&i) {
                features.push(h);
            }
        }
        let flat = tape.value(h).len() / b;
        let h = tape.reshape(h, &[b, flat])?;
        let w = p.var(tape, "disc.output.weight")?;
        let logit = tape.matmul(h, w)?;
        let logit = self.add_bias(tape, p, "disc.output.bias", logit)?;
        Ok(DiscriminatorFeatures {
            logit: tape.reshape(logit, &[b])?,
            features,
        })
    }
}
