//! Direct loop implementations used as test oracles for the fast paths.

/// Cross-correlation of `x: [b, c, h, w]` with `k: [o, c, kk, kk]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [b, c, h, w] = xs;
    let [o, _, kk, _] = ks;
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                    * k[((oi * c + ci) * kk + ky) * kk + kx];
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, [b, o, oh, ow])
}

/// Transposed convolution by direct scatter: `x: [b, c, h, w]`, `k: [c, o, kk, kk]`.
pub fn conv_transpose2d(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [b, c, h, w] = xs;
    let [_, o, kk, _] = ks;
    let oh = (h - 1) * stride + kk - 2 * pad;
    let ow = (w - 1) * stride + kk - 2 * pad;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xi in 0..w {
                    let v = x[((bi * c + ci) * h + y) * w + xi];
                    for oi in 0..o {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let ty = (y * stride + ky) as isize - pad as isize;
                                let tx = (xi * stride + kx) as isize - pad as isize;
                                if ty < 0 || tx < 0 || ty >= oh as isize || tx >= ow as isize {
                                    continue;
                                }
                                out[((bi * o + oi) * oh + ty as usize) * ow + tx as usize] +=
                                    v * k[((ci * o + oi) * kk + ky) * kk + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [b, o, oh, ow])
}

/// 2x2/stride-2 max pooling of one `h x w` plane with even extents.
pub fn max_pool_even(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w / 4);
    for y in (0..h).step_by(2) {
        for xi in (0..w).step_by(2) {
            let m = [x[y * w + xi], x[y * w + xi + 1], x[(y + 1) * w + xi], x[(y + 1) * w + xi + 1]]
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            out.push(m);
        }
    }
    out
}
