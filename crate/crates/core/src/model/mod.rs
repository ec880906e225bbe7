//! Encoder, decoder and discriminator networks for the three model variants.
//!
//! * `baseline`: plain convolutional VAE with a Gaussian latent vector.
//! * `se2_grid`: SE(2,N) VAE whose latent is a Gaussian over a
//!   `channels x orientations` grid that shifts cyclically under rotation.
//! * `disentangled`: SE(2,N) VAE with a rotation-invariant Gaussian block and
//!   a block of angles with piecewise-constant posteriors.
//!
//! Parameters live in a [`ParameterStore`] keyed by hierarchical names; the
//! networks themselves ([`Model`]) only hold the precomputed kernel
//! expansion plans and are generic over the scalar type.

mod network;
mod store;

use std::fmt;
use std::str::FromStr;

use crate::config::{format_list, parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::tensor::pool_out_size;

pub use network::{Bound, DiscriminatorFeatures, LatentVars, Model, PosteriorVars};
pub use store::{build_model, matched_baseline_channels, parameter_specs, Group, ParamSpec, ParameterStore, ParityReport, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Se2Grid,
    Disentangled,
}

impl Variant {
    pub fn is_se2(self) -> bool {
        self != Variant::Baseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Se2Grid => "se2_grid",
            Variant::Disentangled => "disentangled",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "se2_grid" => Ok(Variant::Se2Grid),
            "disentangled" => Ok(Variant::Disentangled),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub orientations: usize,
    pub latent_iso: usize,
    pub latent_ori: usize,
    pub latent_baseline: usize,
    /// Channels of the `se2_grid` latent; each carries `orientations` values.
    pub grid_channels: usize,
    /// Encoder block widths; the decoder mirrors them.
    pub channels: [usize; 4],
    /// Plain-convolution widths for the baseline; `None` picks widths whose
    /// parameter count matches the SE(2,N) model.
    pub baseline_channels: Option<[usize; 4]>,
    pub patch_size: usize,
    pub image_channels: usize,
    pub kernel_size: usize,
    pub leaky_slope: f64,
    /// Max-project hidden SE(2,N) maps back to the plane between blocks and
    /// lift again in the next block.
    pub intermediate_projection: bool,
    /// Half-width, in bins, of the triangular angle encoding.
    pub angle_width: usize,
    pub disc_channels: [usize; 4],
    /// Discriminator blocks (0-based) whose outputs feed the feature loss.
    pub disc_features: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// 68x68 patches at full width.
    pub fn paper(variant: Variant) -> Self {
        Self {
            variant,
            orientations: 8,
            latent_iso: 32,
            latent_ori: 32,
            latent_baseline: 64,
            grid_channels: 8,
            channels: [8, 16, 24, 32],
            baseline_channels: None,
            patch_size: 68,
            image_channels: 3,
            kernel_size: 5,
            leaky_slope: 0.1,
            intermediate_projection: true,
            angle_width: 1,
            disc_channels: [8, 16, 32, 32],
            disc_features: vec![1, 2],
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    /// 36x36 patches, otherwise as [`ModelConfig::paper`].
    pub fn desk(variant: Variant) -> Self {
        Self {
            patch_size: 36,
            ..Self::paper(variant)
        }
    }

    /// Spatial extents after each encoder block, starting with the input.
    pub fn spatial_sizes(&self) -> [usize; 5] {
        let mut s = [self.patch_size; 5];
        for i in 1..5 {
            s[i] = pool_out_size(s[i - 1]);
        }
        s
    }

    /// Number of scalar latent coordinates sampled from Gaussians.
    pub fn gaussian_latents(&self) -> usize {
        match self.variant {
            Variant::Baseline => self.latent_baseline,
            Variant::Se2Grid => self.grid_channels * self.orientations,
            Variant::Disentangled => self.latent_iso,
        }
    }

    /// Number of angular latents.
    pub fn angular_latents(&self) -> usize {
        match self.variant {
            Variant::Disentangled => self.latent_ori,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.orientations == 0 || self.orientations % 4 != 0 {
            return fail(format!("orientations must be a positive multiple of 4, got {}", self.orientations));
        }
        if self.patch_size < 16 {
            return fail(format!("patch size {} is too small for four poolings", self.patch_size));
        }
        if self.kernel_size % 2 == 0 {
            return fail(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        let zero = |v: &[usize]| v.iter().any(|&c| c == 0);
        if zero(&self.channels) || zero(&self.disc_channels) || self.baseline_channels.is_some_and(|c| zero(&c)) {
            return fail("channel widths must be positive".into());
        }
        if self.image_channels == 0 {
            return fail("image needs at least one channel".into());
        }
        match self.variant {
            Variant::Baseline if self.latent_baseline == 0 => return fail("empty latent".into()),
            Variant::Se2Grid if self.grid_channels == 0 => return fail("empty latent".into()),
            Variant::Disentangled if self.latent_iso == 0 || self.latent_ori == 0 => {
                return fail("both latent blocks must be non-empty".into())
            }
            _ => {}
        }
        if self.angle_width == 0 || 2 * self.angle_width > self.orientations {
            return fail(format!("angle width {} for {} orientations", self.angle_width, self.orientations));
        }
        if self.disc_features.is_empty() || self.disc_features.iter().any(|&i| i >= 4) {
            return fail(format!("discriminator feature blocks {:?}", self.disc_features));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return fail("batch-norm momentum must lie in [0, 1) and eps be positive".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("variant", self.variant.to_string()),
            ("orientations", self.orientations.to_string()),
            ("latent_iso", self.latent_iso.to_string()),
            ("latent_ori", self.latent_ori.to_string()),
            ("latent_baseline", self.latent_baseline.to_string()),
            ("grid_channels", self.grid_channels.to_string()),
            ("channels", format_list(&self.channels)),
            (
                "baseline_channels",
                self.baseline_channels.map_or("auto".into(), |c| format_list(&c)),
            ),
            ("patch_size", self.patch_size.to_string()),
            ("image_channels", self.image_channels.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("leaky_slope", self.leaky_slope.to_string()),
            ("intermediate_projection", self.intermediate_projection.to_string()),
            ("angle_width", self.angle_width.to_string()),
            ("disc_channels", format_list(&self.disc_channels)),
            ("disc_features", format_list(&self.disc_features)),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("bn_eps", self.bn_eps.to_string()),
        ];
        v.drain(..).map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Overrides fields from any model keys present in `kv`.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take("variant", &mut self.variant)?;
        kv.take("orientations", &mut self.orientations)?;
        kv.take("latent_iso", &mut self.latent_iso)?;
        kv.take("latent_ori", &mut self.latent_ori)?;
        kv.take("latent_baseline", &mut self.latent_baseline)?;
        kv.take("grid_channels", &mut self.grid_channels)?;
        take_array(kv, "channels", &mut self.channels)?;
        let mut baseline = String::new();
        kv.take("baseline_channels", &mut baseline)?;
        if !baseline.is_empty() {
            self.baseline_channels = if baseline == "auto" {
                None
            } else {
                Some(to_array("baseline_channels", parse_list("baseline_channels", &baseline)?)?)
            };
        }
        kv.take("patch_size", &mut self.patch_size)?;
        kv.take("image_channels", &mut self.image_channels)?;
        kv.take("kernel_size", &mut self.kernel_size)?;
        kv.take("leaky_slope", &mut self.leaky_slope)?;
        kv.take("intermediate_projection", &mut self.intermediate_projection)?;
        kv.take("angle_width", &mut self.angle_width)?;
        take_array(kv, "disc_channels", &mut self.disc_channels)?;
        kv.take_list("disc_features", &mut self.disc_features)?;
        kv.take("bn_momentum", &mut self.bn_momentum)?;
        kv.take("bn_eps", &mut self.bn_eps)?;
        Ok(())
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        Self::from_key_values(KeyValues::from_pairs(pairs.iter().cloned()))
    }

    /// Starts from the paper preset of the given variant and applies the rest.
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let mut variant = Variant::Disentangled;
        kv.take("variant", &mut variant)?;
        let mut cfg = Self::paper(variant);
        cfg.apply(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn take_array(kv: &mut KeyValues, key: &str, slot: &mut [usize; 4]) -> Result<()> {
    let mut v = Vec::new();
    kv.take_list(key, &mut v)?;
    if !v.is_empty() {
        *slot = to_array(key, v)?;
    }
    Ok(())
}

fn to_array(key: &str, v: Vec<usize>) -> Result<[usize; 4]> {
    v.try_into()
        .map_err(|v: Vec<usize>| Error::Config(format!("{key} needs 4 entries, got {}", v.len())))
}

#[cfg(test)]
mod tests;
