//! Training objectives on the tape. Every term is averaged over the batch.

use crate::error::{Error, Result};
use crate::latent::{kl_angular, kl_gaussian, Noise};
use crate::model::{Bound, Model, Variant};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Gaussian KL weight for the baseline and grid variants.
    pub beta: f64,
    pub beta_iso: f64,
    pub beta_ori: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            beta_iso: 1.0,
            beta_ori: 1.0,
            gamma: 0.01,
        }
    }
}

/// Loss terms on the tape. `kl_iso` holds the Gaussian KL of every variant.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl_iso: Var,
    pub kl_ori: Option<Var>,
    pub feature: Option<Var>,
    /// Decoder mean `[B, C, P, P]`.
    pub reconstruction: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl_iso: f64,
    pub kl_ori: f64,
    pub feature: f64,
}

impl LossVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar_value(v).as_f64());
        LossBreakdown {
            total: get(Some(self.total)),
            recon: get(Some(self.recon)),
            kl_iso: get(Some(self.kl_iso)),
            kl_ori: get(self.kl_ori),
            feature: get(self.feature),
        }
    }
}

impl LossBreakdown {
    /// Weighted sum of the terms.
    pub fn recombine(&self, w: &LossWeights, variant: Variant) -> f64 {
        let kl = match variant {
            Variant::Disentangled => w.beta_iso * self.kl_iso + w.beta_ori * self.kl_ori,
            _ => w.beta * self.kl_iso,
        };
        self.recon + kl + w.gamma * self.feature
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.recon, self.kl_iso, self.kl_ori, self.feature]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn batch_of<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<usize> {
    match tape.shape(x).first() {
        Some(&b) if b > 0 => Ok(b),
        _ => Err(Error::Empty("batch")),
    }
}

fn per_sample<T: Scalar>(tape: &mut Tape<T>, total: Var, b: usize) -> Var {
    tape.scale(total, T::of(1.0 / b as f64))
}

/// `½ Σ (x − x̂)²` per sample.
pub fn reconstruction_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    let b = batch_of(tape, x)?;
    let d = tape.sub(x, x_hat)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(per_sample(tape, s, b * 2))
}

/// Encodes, samples and decodes `x`; returns the per-sample Gaussian ELBO
/// terms of the baseline or grid variant.
pub fn elbo_baseline_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    p: &mut Bound<T>,
    x: Var,
    noise: &Noise,
    beta: f64,
) -> Result<LossVars> {
    if model.config().variant == Variant::Disentangled {
        return Err(Error::invalid("elbo_baseline_loss needs the baseline or se2_grid variant"));
    }
    let b = batch_of(tape, x)?;
    let post = model.encode(tape, p, x)?;
    let z = model.sample(tape, &post, noise)?;
    let code = model.decoder_code(tape, &z)?;
    let x_hat = model.decode(tape, p, code)?;
    let recon = reconstruction_loss(tape, x, x_hat)?;
    let (mu, ls) = post.gaussian();
    let kl = kl_gaussian(tape, mu, ls)?;
    let kl = per_sample(tape, kl, b);
    let weighted = tape.scale(kl, T::of(beta));
    let total = tape.add(recon, weighted)?;
    Ok(LossVars {
        total,
        recon,
        kl_iso: kl,
        kl_ori: None,
        feature: None,
        reconstruction: x_hat,
    })
}

/// Per-sample ELBO terms of the disentangled variant.
pub fn elbo_disentangled_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    p: &mut Bound<T>,
    x: Var,
    noise: &Noise,
    beta_iso: f64,
    beta_ori: f64,
) -> Result<LossVars> {
    if model.config().variant != Variant::Disentangled {
        return Err(Error::invalid("elbo_disentangled_loss needs the disentangled variant"));
    }
    let b = batch_of(tape, x)?;
    let post = model.encode(tape, p, x)?;
    let z = model.sample(tape, &post, noise)?;
    let code = model.decoder_code(tape, &z)?;
    let x_hat = model.decode(tape, p, code)?;
    let recon = reconstruction_loss(tape, x, x_hat)?;
    let (mu, ls) = post.gaussian();
    let (q, log_q) = post.angular().expect("disentangled posterior has angles");
    let kl_iso = kl_gaussian(tape, mu, ls)?;
    let kl_iso = per_sample(tape, kl_iso, b);
    let kl_ori = kl_angular(tape, q, log_q)?;
    let kl_ori = per_sample(tape, kl_ori, b);
    let wi = tape.scale(kl_iso, T::of(beta_iso));
    let wo = tape.scale(kl_ori, T::of(beta_ori));
    let total = tape.add(recon, wi)?;
    let total = tape.add(total, wo)?;
    Ok(LossVars {
        total,
        recon,
        kl_iso,
        kl_ori: Some(kl_ori),
        feature: None,
        reconstruction: x_hat,
    })
}

/// `Σ_i ½‖D_i(x) − D_i(x̂)‖²` per sample over the discriminator's feature layers.
pub fn feature_recon_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    p: &mut Bound<T>,
    x: Var,
    x_hat: Var,
) -> Result<Var> {
    let real = model.discriminate(tape, p, x)?;
    let fake = model.discriminate(tape, p, x_hat)?;
    if real.features.is_empty() {
        return Err(Error::Config("discriminator has no feature layers".into()));
    }
    let mut total = None;
    for (&a, &b) in real.features.iter().zip(&fake.features) {
        let l = reconstruction_loss(tape, a, b)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("at least one feature layer"))
}

/// The VAE objective of the model's variant, plus `γ` times the feature loss
/// when `γ > 0`.
pub fn vae_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    p: &mut Bound<T>,
    x: Var,
    noise: &Noise,
    w: &LossWeights,
) -> Result<LossVars> {
    let mut l = match model.config().variant {
        Variant::Disentangled => elbo_disentangled_loss(tape, model, p, x, noise, w.beta_iso, w.beta_ori)?,
        _ => elbo_baseline_loss(tape, model, p, x, noise, w.beta)?,
    };
    if w.gamma > 0.0 {
        let f = feature_recon_loss(tape, model, p, x, l.reconstruction)?;
        let wf = tape.scale(f, T::of(w.gamma));
        l.total = tape.add(l.total, wf)?;
        l.feature = Some(f);
    }
    Ok(l)
}

/// Mean binary cross-entropy with logits, label 1 for `real` and 0 for
/// `fake`, and the fraction of correctly classified images.
pub fn discriminator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    p: &mut Bound<T>,
    real: Var,
    fake: Var,
) -> Result<(Var, f64)> {
    let b = batch_of(tape, real)? + batch_of(tape, fake)?;
    let lr = model.discriminate(tape, p, real)?.logit;
    let lf = model.discriminate(tape, p, fake)?.logit;
    let correct = tape.value(lr).iter().filter(|v| v.as_f64() > 0.0).count()
        + tape.value(lf).iter().filter(|v| v.as_f64() <= 0.0).count();
    let neg = tape.scale(lr, T::of(-1.0));
    let a = tape.softplus(neg);
    let a = tape.sum(a);
    let c = tape.softplus(lf);
    let c = tape.sum(c);
    let s = tape.add(a, c)?;
    Ok((per_sample(tape, s, b), correct as f64 / b as f64))
}
