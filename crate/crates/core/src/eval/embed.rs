//! Posterior means of every patch under a trained encoder.

use crate::data::{Dataset, EmbeddingRow, Embeddings};
use crate::error::Result;
use crate::model::{Bound, Model, PosteriorVars, ParameterStore};
use crate::tensor::{BnMode, Tape};

/// Encodes `rows` of `data` in eval mode, `batch` patches at a time. The
/// invariant columns hold the Gaussian mean (flattened for the grid latent);
/// the orientation columns hold `Q` for the disentangled variant.
pub fn embed(model: &Model<f32>, store: &ParameterStore, data: &Dataset, rows: &[usize], batch: usize) -> Result<Embeddings> {
    let cfg = model.config();
    let (iso_dim, ori_latents) = (cfg.gaussian_latents(), cfg.angular_latents());
    let orientations = if ori_latents > 0 { cfg.orientations } else { 0 };
    let mut table = Embeddings::new(iso_dim, ori_latents, orientations);
    for chunk in rows.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let mut p = Bound::new(store, BnMode::Eval, &[]);
        let x = data.batch(chunk)?;
        let x = tape.leaf(&x, false);
        let post = model.encode(&mut tape, &mut p, x)?;
        let (mu, _) = post.gaussian();
        let mu = tape.value(mu);
        let q = match post {
            PosteriorVars::Disentangled { q, .. } => tape.value(q),
            _ => &[],
        };
        let ori_len = table.ori_len();
        for (b, &r) in chunk.iter().enumerate() {
            let row = &data.rows[r];
            table.push(EmbeddingRow {
                patch: row.path.clone(),
                bag: row.bag.clone(),
                iso: mu[b * iso_dim..(b + 1) * iso_dim].to_vec(),
                ori: q[b * ori_len..(b + 1) * ori_len].to_vec(),
            })?;
        }
    }
    Ok(table)
}
