//! Finite-difference gradient checking in double precision.

use super::{RngStream, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates per parameter tensor, chosen at
    /// random; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub loss: f64,
}

/// Relative discrepancy `|a - c| / max(|a|, |c|, 1e-8)` measured in the
/// Euclidean norm over one tensor's checked coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, c)| a - c));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(1e-8);
    diff / scale
}

fn eval<F>(f: &mut F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::shape("grad_check", "loss must be scalar"));
    }
    Ok(tape.scalar_value(loss))
}

/// Analytic gradients of the scalar built by `f` at `params`.
pub fn analytic_gradients<F>(f: &mut F, params: &[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    Ok((tape.scalar_value(loss), grads))
}

/// Compares reverse-mode gradients against central differences.
///
/// The builder is evaluated twice at the unperturbed point first; any
/// difference in the resulting loss bits is reported as non-determinism.
pub fn grad_check<F>(params: &[Tensor<f64>], opts: &GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (loss, grads) = analytic_gradients(&mut f, params)?;
    let again = eval(&mut f, params)?;
    if loss.to_bits() != again.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic: {loss:e} then {again:e} at identical parameters"
        )));
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let mut rng = RngStream::new(opts.seed, 0x9c);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut coords: Vec<usize> = (0..p.numel()).collect();
        if let Some(m) = opts.max_coords {
            if m < coords.len() {
                rng.shuffle(&mut coords);
                coords.truncate(m);
                coords.sort_unstable();
            }
        }
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + opts.step;
            let plus = eval(&mut f, &work)?;
            work[pi].data_mut()[c] = orig - opts.step;
            let minus = eval(&mut f, &work)?;
            work[pi].data_mut()[c] = orig;
            numeric.push((plus - minus) / (2.0 * opts.step));
            analytic.push(grads[pi][c]);
        }
        per_param.push(relative_error(&analytic, &numeric));
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(&[3], &[0.5, -1.5, 2.0]).unwrap();
        let r = grad_check(&[x], &GradCheckOptions { step: 1e-4, ..Default::default() }, |t, v| {
            let sq = t.square(v[0]);
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let x = Tensor::from_f64(&[4], &[0.3, -0.7, 1.1, 0.2]).unwrap();
        let mut f = |t: &mut Tape<f64>, v: &[Var]| {
            let e = t.exp(v[0]);
            Ok(t.sum(e))
        };
        let (_, grads) = analytic_gradients(&mut f, std::slice::from_ref(&x)).unwrap();
        let corrupted: Vec<f64> = grads[0].iter().map(|g| g * 1.01).collect();
        let numeric: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
        assert!(relative_error(&corrupted, &numeric) > 1e-3);
        assert!(relative_error(&grads[0], &numeric) < 1e-12);
    }

    #[test]
    fn nondeterminism_is_an_error() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let mut calls = 0.0;
        let r = grad_check(&[x], &GradCheckOptions::default(), |t, v| {
            calls += 1.0;
            let s = t.scale(v[0], calls);
            Ok(t.sum(s))
        });
        assert!(matches!(r, Err(Error::GradCheck(_))));
    }
}
