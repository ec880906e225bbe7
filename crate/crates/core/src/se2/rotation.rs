//! Rotated copies of square kernels by bilinear resampling.

use std::f64::consts::TAU;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One bilinear tap: `target` pixel receives `weight * base[source]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub target: usize,
    pub source: usize,
    pub weight: f64,
}

/// Interpolation coefficients mapping a `size x size` kernel to each of its
/// `orientations` rotated copies.
///
/// Rotation `j` turns the kernel counter-clockwise by `2πj/N` about its
/// centre. When `N` is divisible by four, the table for `j = q·N/4 + r` is
/// the table for `r` followed by `q` exact quarter-turn permutations, so
/// multiples of 90° carry no interpolation residue.
#[derive(Clone, Debug)]
pub struct RotationTable {
    size: usize,
    orientations: usize,
    taps: Vec<Vec<Tap>>,
}

impl RotationTable {
    pub fn new(size: usize, orientations: usize) -> Result<Self> {
        if size == 0 || orientations == 0 {
            return Err(Error::invalid(format!(
                "rotation table needs a positive size and orientation count, got {size} and {orientations}"
            )));
        }
        let mut taps = Vec::with_capacity(orientations);
        if orientations % 4 == 0 {
            let quarter = orientations / 4;
            for j in 0..orientations {
                let (q, r) = (j / quarter, j % quarter);
                let base = bilinear_taps(size, TAU * r as f64 / orientations as f64);
                taps.push(
                    base.into_iter()
                        .map(|t| Tap {
                            target: quarter_turn_target(t.target, size, q),
                            ..t
                        })
                        .collect(),
                );
            }
        } else {
            for j in 0..orientations {
                taps.push(bilinear_taps(size, TAU * j as f64 / orientations as f64));
            }
        }
        Ok(Self {
            size,
            orientations,
            taps,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn orientations(&self) -> usize {
        self.orientations
    }

    pub fn taps(&self, j: usize) -> Result<&[Tap]> {
        self.taps.get(j).map(Vec::as_slice).ok_or(Error::Index {
            what: "orientation",
            index: j,
            len: self.orientations,
        })
    }

    /// Rotates one `size x size` plane.
    pub fn rotate_plane<T: Scalar>(&self, plane: &[T], j: usize) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.size * self.size];
        for t in self.taps(j)? {
            out[t.target] += T::of(t.weight) * plane[t.source];
        }
        Ok(out)
    }
}

/// Where pixel `p` lands after `q` counter-clockwise quarter turns.
fn quarter_turn_target(p: usize, n: usize, q: usize) -> usize {
    let (mut r, mut c) = (p / n, p % n);
    for _ in 0..q {
        // out[r'][c'] = in[c'][n-1-r']  =>  in (r, c) moves to (n-1-c, r)
        (r, c) = (n - 1 - c, r);
    }
    r * n + c
}

/// Taps resampling the rotated kernel at `R(-θ)·p`, zero outside the grid.
fn bilinear_taps(n: usize, theta: f64) -> Vec<Tap> {
    let centre = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    let snap = |v: f64| if (v - v.round()).abs() < 1e-12 { v.round() } else { v };
    let mut taps = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let x = c as f64 - centre;
            let y = centre - r as f64;
            let sx = x * cos + y * sin;
            let sy = -x * sin + y * cos;
            let col = snap(sx + centre);
            let row = snap(centre - sy);
            let (r0, c0) = (row.floor(), col.floor());
            let (fr, fc) = (row - r0, col - c0);
            for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
                for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
                    let (sr, sc) = (r0 + dr, c0 + dc);
                    let w = wr * wc;
                    if w == 0.0 || sr < 0.0 || sc < 0.0 || sr >= n as f64 || sc >= n as f64 {
                        continue;
                    }
                    taps.push(Tap {
                        target: r * n + c,
                        source: sr as usize * n + sc as usize,
                        weight: w,
                    });
                }
            }
        }
    }
    taps
}

/// Learnable base kernels together with their rotation table.
#[derive(Clone, Debug)]
pub struct RotatedKernelBank<T> {
    pub base: Tensor<T>,
    pub table: Arc<RotationTable>,
}

impl<T: Scalar> RotatedKernelBank<T> {
    /// `base` must end in two axes of the table's kernel size.
    pub fn new(base: Tensor<T>, table: Arc<RotationTable>) -> Result<Self> {
        let s = base.shape();
        let k = table.size();
        if s.len() < 2 || s[s.len() - 1] != k || s[s.len() - 2] != k {
            return Err(Error::shape("RotatedKernelBank", format!("{s:?} for {k}x{k} rotations")));
        }
        Ok(Self { base, table })
    }

    /// Every trailing `k x k` plane of the base rotated by orientation `j`.
    pub fn rotate_kernel(&self, j: usize) -> Result<Tensor<T>> {
        let kk = self.table.size() * self.table.size();
        let mut out = Vec::with_capacity(self.base.numel());
        for plane in self.base.data().chunks(kk) {
            out.extend(self.table.rotate_plane(plane, j)?);
        }
        Tensor::new(self.base.shape(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot90_plane(p: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                out[r * n + c] = p[c * n + n - 1 - r];
            }
        }
        out
    }

    fn ramp(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| (i as f64 * 0.37).sin() + i as f64 * 0.1).collect()
    }

    #[test]
    fn zero_rotation_is_identity() {
        let t = RotationTable::new(5, 8).unwrap();
        let k = ramp(5);
        assert_eq!(t.rotate_plane(&k, 0).unwrap(), k);
    }

    #[test]
    fn quarter_turns_are_exact_permutations() {
        let t = RotationTable::new(5, 8).unwrap();
        let k = ramp(5);
        let mut want = k.clone();
        for q in 1..4 {
            want = rot90_plane(&want, 5);
            assert_eq!(t.rotate_plane(&k, 2 * q).unwrap(), want);
        }
        // composed tables equal each other up to the same permutation
        let r1 = t.rotate_plane(&k, 1).unwrap();
        assert_eq!(t.rotate_plane(&k, 3).unwrap(), rot90_plane(&r1, 5));
    }

    #[test]
    fn forty_five_degrees_matches_direct_bilinear() {
        let n = 5;
        let t = RotationTable::new(n, 8).unwrap();
        let mut k = vec![0.0; n * n];
        for c in 0..n {
            k[2 * n + c] = 1.0 + c as f64;
        }
        let got = t.rotate_plane(&k, 1).unwrap();
        let th = std::f64::consts::FRAC_PI_4;
        let sample = |row: f64, col: f64| -> f64 {
            let (r0, c0) = (row.floor(), col.floor());
            let mut acc = 0.0;
            for rr in [r0, r0 + 1.0] {
                for cc in [c0, c0 + 1.0] {
                    if rr < 0.0 || cc < 0.0 || rr > 4.0 || cc > 4.0 {
                        continue;
                    }
                    let w = (1.0 - (row - rr).abs()).max(0.0) * (1.0 - (col - cc).abs()).max(0.0);
                    acc += w * k[rr as usize * n + cc as usize];
                }
            }
            acc
        };
        for r in 0..n {
            for c in 0..n {
                let (x, y) = (c as f64 - 2.0, 2.0 - r as f64);
                let sx = x * th.cos() + y * th.sin();
                let sy = -x * th.sin() + y * th.cos();
                let want = sample(2.0 - sy, sx + 2.0);
                assert!((got[r * n + c] - want).abs() < 1e-6, "({r},{c}) {} vs {want}", got[r * n + c]);
            }
        }
    }

    #[test]
    fn weights_are_nonnegative_and_subunit() {
        let t = RotationTable::new(5, 8).unwrap();
        for j in 0..8 {
            let mut mass = vec![0.0; 25];
            for tap in t.taps(j).unwrap() {
                assert!(tap.weight > 0.0);
                mass[tap.target] += tap.weight;
            }
            for (p, &m) in mass.iter().enumerate() {
                assert!(m <= 1.0 + 1e-12);
                let (x, y) = ((p % 5) as f64 - 2.0, 2.0 - (p / 5) as f64);
                if (x * x + y * y).sqrt() <= 2.0 {
                    assert!((m - 1.0).abs() < 1e-12, "pixel {p} inside the disk lost mass at j={j}");
                }
            }
        }
    }

    #[test]
    fn bank_rotates_every_plane_and_checks_range() {
        let t = Arc::new(RotationTable::new(3, 4).unwrap());
        let base = Tensor::<f64>::new(&[2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        let bank = RotatedKernelBank::new(base.clone(), t.clone()).unwrap();
        let r = bank.rotate_kernel(1).unwrap();
        assert_eq!(&r.data()[..9], rot90_plane(&base.data()[..9], 3).as_slice());
        assert_eq!(&r.data()[9..], rot90_plane(&base.data()[9..], 3).as_slice());
        assert!(matches!(bank.rotate_kernel(4), Err(Error::Index { .. })));
        assert!(RotatedKernelBank::new(Tensor::<f64>::zeros(&[5, 5]), t).is_err());
    }

    #[test]
    fn rotation_is_linear() {
        let t = RotationTable::new(5, 8).unwrap();
        let a = ramp(5);
        let b: Vec<f64> = (0..25).map(|i| (i as f64).cos()).collect();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
        for j in 0..8 {
            let ra = t.rotate_plane(&a, j).unwrap();
            let rb = t.rotate_plane(&b, j).unwrap();
            let rm = t.rotate_plane(&mix, j).unwrap();
            for i in 0..25 {
                assert!((rm[i] - (2.0 * ra[i] - 0.5 * rb[i])).abs() < 1e-6);
            }
        }
    }
}
