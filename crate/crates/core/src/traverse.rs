//! Latent traversals rendered as image grids.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use crate::data::save_patch;
use crate::error::{Error, Result};
use crate::latent::Noise;
use crate::model::{Bound, LatentVars, Model, ParameterStore, Variant};
use crate::tensor::{BnMode, Tape, Tensor};

/// Posterior centre of one patch: Gaussian means and scales (flattened) and
/// the median angle of each angular posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub iso: Vec<f32>,
    pub sigma: Vec<f32>,
    pub ori: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TraversalMode {
    /// Every angle advanced by `j 2π/N` for `j = 0..N`.
    OriCycle,
    /// Invariant coordinate `coord` swept over `μ ± width σ` in `steps` tiles.
    IsoSweep { coord: usize, width: f64, steps: usize },
    /// `steps x steps` grid between two patches: rows interpolate the
    /// invariant block, columns the angles along the shorter arc.
    Interpolate { steps: usize },
}

/// Tiles in row-major order with the number of columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Traversal {
    pub tiles: Vec<Tensor<f32>>,
    pub columns: usize,
}

pub fn encode_centre(model: &Model<f32>, store: &ParameterStore, image: &Tensor<f32>) -> Result<Latents> {
    let mut tape = Tape::new();
    let mut p = Bound::new(store, BnMode::Eval, &[]);
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = tape.leaf(&image.clone().reshape(&shape)?, false);
    let post = model.encode(&mut tape, &mut p, x)?;
    let (g, u) = model.noise_len(1);
    let z = model.sample(&mut tape, &post, &Noise::centred(g, u))?;
    let (mu, ls) = post.gaussian();
    Ok(Latents {
        iso: tape.value(mu).to_vec(),
        sigma: tape.value(ls).iter().map(|v| v.exp()).collect(),
        ori: z.angles.map_or_else(Vec::new, |a| tape.value(a).to_vec()),
    })
}

pub fn decode_latents(model: &Model<f32>, store: &ParameterStore, z: &Latents) -> Result<Tensor<f32>> {
    let cfg = model.config();
    let mut tape = Tape::new();
    let mut p = Bound::new(store, BnMode::Eval, &[]);
    let gshape = match cfg.variant {
        Variant::Se2Grid => vec![1, cfg.grid_channels, cfg.orientations],
        _ => vec![1, z.iso.len()],
    };
    let gaussian = tape.constant(&gshape, z.iso.clone())?;
    let angles = match cfg.variant {
        Variant::Disentangled => Some(tape.constant(&[1, z.ori.len()], z.ori.clone())?),
        _ => None,
    };
    let code = model.decoder_code(&mut tape, &LatentVars { gaussian, angles })?;
    let x = model.decode(&mut tape, &mut p, code)?;
    let t = tape.tensor(x);
    let shape = t.shape()[1..].to_vec();
    t.reshape(&shape)
}

/// Encodes and decodes at the posterior centre.
pub fn reconstruct(model: &Model<f32>, store: &ParameterStore, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    decode_latents(model, store, &encode_centre(model, store, image)?)
}

fn lerp(a: f32, b: f32, t: f64) -> f32 {
    if t == 1.0 {
        b
    } else {
        ((1.0 - t) * a as f64 + t * b as f64) as f32
    }
}

fn arc(a: f32, b: f32, t: f64) -> f32 {
    if t == 1.0 {
        return b;
    }
    let d = (b as f64 - a as f64 + PI).rem_euclid(TAU) - PI;
    (a as f64 + t * d).rem_euclid(TAU) as f32
}

pub fn traverse_latents(model: &Model<f32>, store: &ParameterStore, sources: &[Tensor<f32>], mode: TraversalMode) -> Result<Traversal> {
    let cfg = model.config();
    let first = sources.first().ok_or(Error::Empty("traversal sources"))?;
    let base = encode_centre(model, store, first)?;
    let mut codes = Vec::new();
    let columns;
    match mode {
        TraversalMode::OriCycle => {
            if cfg.variant != Variant::Disentangled {
                return Err(Error::invalid("ori-cycle needs the disentangled variant"));
            }
            let n = cfg.orientations;
            for j in 0..n {
                let step = j as f64 * TAU / n as f64;
                let ori = base.ori.iter().map(|&a| (a as f64 + step).rem_euclid(TAU) as f32).collect();
                codes.push(Latents { ori, ..base.clone() });
            }
            columns = n;
        }
        TraversalMode::IsoSweep { coord, width, steps } => {
            if coord >= base.iso.len() || steps == 0 || !(width >= 0.0) {
                return Err(Error::invalid(format!(
                    "iso sweep of coordinate {coord} over {} latents, {steps} steps, width {width}",
                    base.iso.len()
                )));
            }
            let (mu, sd) = (base.iso[coord] as f64, base.sigma[coord] as f64);
            for i in 0..steps {
                let t = if steps == 1 { 0.0 } else { 2.0 * i as f64 / (steps - 1) as f64 - 1.0 };
                let mut z = base.clone();
                if width > 0.0 {
                    z.iso[coord] = (mu + t * width * sd) as f32;
                }
                codes.push(z);
            }
            columns = steps;
        }
        TraversalMode::Interpolate { steps } => {
            let [_, second] = sources else {
                return Err(Error::invalid(format!("interpolation needs 2 sources, got {}", sources.len())));
            };
            if steps < 2 {
                return Err(Error::invalid("interpolation needs at least 2 steps"));
            }
            let other = encode_centre(model, store, second)?;
            for r in 0..steps {
                let ti = r as f64 / (steps - 1) as f64;
                for c in 0..steps {
                    let to = c as f64 / (steps - 1) as f64;
                    codes.push(Latents {
                        iso: base.iso.iter().zip(&other.iso).map(|(&a, &b)| lerp(a, b, ti)).collect(),
                        sigma: base.sigma.clone(),
                        ori: base.ori.iter().zip(&other.ori).map(|(&a, &b)| arc(a, b, to)).collect(),
                    });
                }
            }
            columns = steps;
        }
    }
    let tiles = codes.iter().map(|z| decode_latents(model, store, z)).collect::<Result<_>>()?;
    Ok(Traversal { tiles, columns })
}

/// Tiles `[C, P, P]` laid out on a white background with one-pixel gaps,
/// written as an RGB PNG.
pub fn write_grid(path: &Path, traversal: &Traversal) -> Result<()> {
    let first = traversal.tiles.first().ok_or(Error::Empty("traversal"))?;
    let &[c, h, w] = first.shape() else {
        return Err(Error::shape("write_grid", format!("tile shape {:?}", first.shape())));
    };
    let cols = traversal.columns.max(1);
    let rows = traversal.tiles.len().div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut grid = vec![1.0f32; 3 * gh * gw];
    for (i, tile) in traversal.tiles.iter().enumerate() {
        let (r, k) = (i / cols, i % cols);
        let d = tile.data();
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            for y in 0..h {
                for x in 0..w {
                    grid[(ch * gh + r * (h + 1) + 1 + y) * gw + k * (w + 1) + 1 + x] = d[(src * h + y) * w + x];
                }
            }
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_patch(path, &Tensor::new(&[3, gh, gw], grid)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::se2::rotate_image;
    use crate::tensor::RngStream;

    fn tiny(variant: Variant) -> (Model<f32>, ParameterStore) {
        let cfg = ModelConfig {
            channels: [2, 3, 3, 4],
            latent_iso: 3,
            latent_ori: 2,
            latent_baseline: 4,
            grid_channels: 2,
            patch_size: 20,
            disc_channels: [2, 3, 3, 4],
            ..ModelConfig::paper(variant)
        };
        build_model(&cfg, &mut RngStream::new(3, 0)).unwrap()
    }

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = RngStream::new(seed, 0);
        Tensor::new(&[3, 20, 20], (0..1200).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    fn mae(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.numel() as f64
    }

    #[test]
    fn quarter_cycle_rotates_the_tile() {
        let (model, store) = tiny(Variant::Disentangled);
        let t = traverse_latents(&model, &store, &[image(1)], TraversalMode::OriCycle).unwrap();
        assert_eq!(t.tiles.len(), 8);
        for j in 0..6 {
            let turned = [rotate_image(&t.tiles[j], 1).unwrap(), rotate_image(&t.tiles[j], -1).unwrap()];
            let best = turned.iter().map(|r| mae(r, &t.tiles[j + 2])).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-3, "tile {j}: {best}");
        }
    }

    #[test]
    fn interpolation_endpoints_are_reconstructions() {
        let (model, store) = tiny(Variant::Disentangled);
        let (a, b) = (image(2), image(3));
        let t = traverse_latents(&model, &store, &[a.clone(), b.clone()], TraversalMode::Interpolate { steps: 4 }).unwrap();
        assert_eq!(t.tiles.len(), 16);
        assert_eq!(t.tiles[0], reconstruct(&model, &store, &a).unwrap());
        assert_eq!(t.tiles[15], reconstruct(&model, &store, &b).unwrap());
        assert!(traverse_latents(&model, &store, &[a], TraversalMode::Interpolate { steps: 4 }).is_err());
    }

    #[test]
    fn zero_width_sweep_repeats_the_tile() {
        for variant in [Variant::Disentangled, Variant::Baseline, Variant::Se2Grid] {
            let (model, store) = tiny(variant);
            let mode = TraversalMode::IsoSweep { coord: 1, width: 0.0, steps: 8 };
            let t = traverse_latents(&model, &store, &[image(4)], mode).unwrap();
            assert!(t.tiles.iter().all(|x| *x == t.tiles[0]));
            let wide = TraversalMode::IsoSweep { coord: 1, width: 3.0, steps: 3 };
            let t = traverse_latents(&model, &store, &[image(4)], wide).unwrap();
            assert_ne!(t.tiles[0], t.tiles[2]);
        }
        let (model, store) = tiny(Variant::Baseline);
        assert!(traverse_latents(&model, &store, &[image(4)], TraversalMode::OriCycle).is_err());
    }

    #[test]
    fn grid_png_has_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g/grid.png");
        let tiles = vec![Tensor::full(&[3, 5, 4], 0.0); 5];
        write_grid(&p, &Traversal { tiles, columns: 3 }).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (3 * 5 + 1, 2 * 6 + 1));
    }
}
