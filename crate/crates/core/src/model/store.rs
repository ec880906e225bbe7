use std::collections::BTreeMap;

use super::network::Model;
use super::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

/// Parameter partition; each name belongs to exactly one group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    Decoder,
    Discriminator,
}

impl Group {
    pub fn of(name: &str) -> Result<Self> {
        match name.split('.').next() {
            Some("enc") => Ok(Group::Encoder),
            Some("dec") => Ok(Group::Decoder),
            Some("disc") => Ok(Group::Discriminator),
            _ => Err(Error::invalid(format!("parameter {name:?} has no group prefix"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Kernel,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
}

impl Role {
    pub fn of(name: &str) -> Result<Self> {
        let role = if name.ends_with(".bn.scale") {
            Role::Scale
        } else if name.ends_with(".bn.shift") {
            Role::Shift
        } else if name.ends_with(".bn.mean") {
            Role::RunningMean
        } else if name.ends_with(".bn.var") {
            Role::RunningVar
        } else if name.ends_with(".kernel") || name.ends_with(".weight") {
            Role::Kernel
        } else if name.ends_with(".bias") {
            Role::Bias
        } else {
            return Err(Error::invalid(format!("parameter {name:?} has no role suffix")));
        };
        Ok(role)
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, Role::RunningMean | Role::RunningVar)
    }
}

/// Name, shape and initialisation fans of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// `(fan_in, fan_out)` for kernels, counted over space and orientations.
    pub fans: Option<(usize, usize)>,
}

impl ParamSpec {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every parameter of the model described by `config`, which must have its
/// baseline widths resolved.
pub fn parameter_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let c = &config.channels;
    let n = config.orientations;
    let k = config.kernel_size;
    let kk = k * k;
    let img = config.image_channels;
    let s4 = config.spatial_sizes()[4];
    let se2 = config.variant.is_se2();
    let widths = if se2 { *c } else { config.baseline_channels.expect("resolved baseline widths") };
    let mut specs = Vec::new();
    let mut kernel = |name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize| {
        specs.push(ParamSpec {
            name,
            shape,
            fans: Some((fan_in, fan_out)),
        });
    };
    let mut vectors: Vec<(String, usize)> = Vec::new();
    let bn = |prefix: &str, width: usize, v: &mut Vec<(String, usize)>| {
        for s in ["scale", "shift", "mean", "var"] {
            v.push((format!("{prefix}.bn.{s}"), width));
        }
    };

    for i in 0..4 {
        let name = format!("enc.block{i}.kernel");
        let cin = if i == 0 { img } else { widths[i - 1] };
        let cout = widths[i];
        if !se2 {
            kernel(name, vec![cout, cin, k, k], cin * kk, cout * kk);
        } else if i == 0 || config.intermediate_projection {
            kernel(name, vec![cout, cin, k, k], cin * kk, cout * n * kk);
        } else {
            kernel(name, vec![cout, cin, n, k, k], cin * n * kk, cout * n * kk);
        }
        bn(&format!("enc.block{i}"), cout, &mut vectors);
    }

    let w3 = widths[3];
    let heads = match config.variant {
        Variant::Baseline => 2 * config.latent_baseline,
        Variant::Se2Grid => 2 * config.grid_channels,
        Variant::Disentangled => 2 * config.latent_iso + config.latent_ori,
    };
    let code = match config.variant {
        Variant::Baseline => config.latent_baseline,
        Variant::Se2Grid => config.grid_channels,
        Variant::Disentangled => config.latent_iso + config.latent_ori,
    };
    let ss = s4 * s4;
    if se2 {
        kernel("enc.head.kernel".into(), vec![heads, w3, n, s4, s4], w3 * n * ss, heads * n * ss);
        kernel("dec.input.kernel".into(), vec![code, w3, n, s4, s4], code * n * ss, w3 * n * ss);
    } else {
        kernel("enc.head.kernel".into(), vec![heads, w3, s4, s4], w3 * ss, heads * ss);
        kernel("dec.input.kernel".into(), vec![code, w3, s4, s4], code * ss, w3 * ss);
    }
    vectors.push(("enc.head.bias".into(), heads));
    bn("dec.input", w3, &mut vectors);

    let outs = [widths[2], widths[1], widths[0], widths[0]];
    let mut cin = w3;
    for (j, &cout) in outs.iter().enumerate() {
        let name = format!("dec.block{j}.kernel");
        if !se2 {
            kernel(name, vec![cin, cout, k, k], cin * kk, cout * kk);
        } else if config.intermediate_projection {
            kernel(name, vec![cout, cin, k, k], cin * kk, cout * n * kk);
        } else {
            kernel(name, vec![cin, cout, n, k, k], cin * n * kk, cout * n * kk);
        }
        bn(&format!("dec.block{j}"), cout, &mut vectors);
        cin = cout;
    }
    kernel("dec.output.kernel".into(), vec![img, widths[0], 1, 1], widths[0], img);
    vectors.push(("dec.output.bias".into(), img));

    let d = &config.disc_channels;
    for i in 0..4 {
        let cin = if i == 0 { img } else { d[i - 1] };
        kernel(format!("disc.block{i}.kernel"), vec![d[i], cin, k, k], cin * kk, d[i] * kk);
        vectors.push((format!("disc.block{i}.bias"), d[i]));
    }
    let flat = d[3] * ss;
    kernel("disc.output.weight".into(), vec![flat, 1], flat, 1);
    vectors.push(("disc.output.bias".into(), 1));

    specs.extend(vectors.into_iter().map(|(name, len)| ParamSpec {
        name,
        shape: vec![len],
        fans: None,
    }));
    specs
}

/// Trainable encoder and decoder weights, the quantity balanced between
/// model variants.
fn vae_weight_count(config: &ModelConfig) -> usize {
    parameter_specs(config)
        .iter()
        .filter(|s| !s.name.starts_with("disc.") && Role::of(&s.name).map_or(false, Role::is_trainable))
        .map(ParamSpec::numel)
        .sum()
}

/// Parameter counts of the plain and disentangled SE(2,N) models sharing a
/// configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParityReport {
    pub baseline: usize,
    pub disentangled: usize,
}

impl ParityReport {
    /// `|baseline - disentangled| / disentangled`.
    pub fn relative_gap(&self) -> f64 {
        (self.baseline as f64 - self.disentangled as f64).abs() / self.disentangled as f64
    }
}

/// Scales the SE(2,N) widths to the plain widths whose weight count is
/// closest to the disentangled model's.
pub fn matched_baseline_channels(config: &ModelConfig) -> [usize; 4] {
    let target = vae_weight_count(&ModelConfig {
        variant: Variant::Disentangled,
        ..config.clone()
    });
    let mut best = ([0; 4], usize::MAX);
    for step in 10..=1200 {
        let s = step as f64 / 100.0;
        let widths = config.channels.map(|c| ((c as f64 * s).round() as usize).max(1));
        let probe = ModelConfig {
            variant: Variant::Baseline,
            baseline_channels: Some(widths),
            ..config.clone()
        };
        let gap = vae_weight_count(&probe).abs_diff(target);
        if gap < best.1 {
            best = (widths, gap);
        }
    }
    best.0
}

impl ModelConfig {
    /// Copy with baseline widths filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if c.baseline_channels.is_none() {
            c.baseline_channels = Some(matched_baseline_channels(self));
        }
        c
    }

    pub fn parity(&self) -> ParityReport {
        let r = self.resolved();
        ParityReport {
            baseline: vae_weight_count(&ModelConfig {
                variant: Variant::Baseline,
                ..r.clone()
            }),
            disentangled: vae_weight_count(&ModelConfig {
                variant: Variant::Disentangled,
                ..r
            }),
        }
    }
}

/// Named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh parameters: kernels uniform in `±sqrt(6 / (fan_in + fan_out))`,
    /// biases and shifts zero, scales one, running statistics `(0, 1)`.
    pub fn initialize(specs: &[ParamSpec], rng: &mut RngStream) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let numel = spec.numel();
            let data: Vec<f32> = match (Role::of(&spec.name)?, spec.fans) {
                (Role::Kernel, Some((fi, fo))) => {
                    let a = (6.0 / (fi + fo) as f64).sqrt();
                    (0..numel).map(|_| rng.uniform_range(-a, a) as f32).collect()
                }
                (Role::Scale | Role::RunningVar, _) => vec![1.0; numel],
                _ => vec![0.0; numel],
            };
            store.insert(&spec.name, Tensor::new(&spec.shape, data)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, t: Tensor<f32>) -> Result<()> {
        Group::of(name)?;
        Role::of(name)?;
        if self.tensors.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter {name:?}")));
        }
        self.tensors.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable parameter names in `group`, in sorted order.
    pub fn trainable(&self, group: Group) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| Group::of(k).ok() == Some(group) && Role::of(k).map_or(false, Role::is_trainable))
            .cloned()
            .collect()
    }

    pub fn weight_count(&self, group: Group) -> usize {
        self.trainable(group).iter().map(|n| self.tensors[n].numel()).sum()
    }

    /// Checks that names and shapes match `specs` exactly.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "store holds {} tensors, model expects {}",
                self.tensors.len(),
                specs.len()
            )));
        }
        for s in specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::shape("parameter store", format!("{}: {:?} vs {:?}", s.name, t.shape(), s.shape)));
            }
        }
        Ok(())
    }
}

/// Validates `config`, enforces weight-count parity between the plain and
/// disentangled variants, and initialises parameters.
pub fn build_model(config: &ModelConfig, rng: &mut RngStream) -> Result<(Model<f32>, ParameterStore)> {
    config.validate()?;
    let config = config.resolved();
    let parity = config.parity();
    if parity.relative_gap() > 0.1 {
        return Err(Error::Config(format!(
            "baseline has {} weights against {} for the SE(2,N) model",
            parity.baseline, parity.disentangled
        )));
    }
    let model = Model::new(&config)?;
    let store = ParameterStore::initialize(&parameter_specs(&config), rng)?;
    Ok((model, store))
}
