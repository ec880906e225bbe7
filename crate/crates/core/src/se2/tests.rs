use proptest::prelude::*;

use super::*;
use crate::tensor::gradcheck::{grad_check, GradCheckOptions};
use crate::tensor::{reference, RngStream};

const N: usize = 8;

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::new(shape, rng.normals(shape.iter().product())).unwrap()
}

fn table(k: usize) -> RotationTable {
    RotationTable::new(k, N).unwrap()
}

fn rel_max_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    diff / (scale + 1e-6)
}

fn lift(x: &Tensor<f64>, k: &Tensor<f64>, plan: &LiftingKernel<f64>) -> Tensor<f64> {
    let mut t = Tape::new();
    let (xv, kv) = (t.leaf(x, false), t.leaf(k, false));
    let y = lifting_conv(&mut t, xv, kv, plan, 2).unwrap();
    t.tensor(y)
}

fn group(x: &Tensor<f64>, k: &Tensor<f64>, plan: &GroupKernel<f64>) -> Tensor<f64> {
    let mut t = Tape::new();
    let (xv, kv) = (t.leaf(x, false), t.leaf(k, false));
    let y = se2_conv(&mut t, xv, kv, plan, 2).unwrap();
    t.tensor(y)
}

#[test]
fn lifting_matches_rotate_then_correlate() {
    let mut rng = RngStream::new(1, 0);
    let tab = table(5);
    let (m, c) = (3, 2);
    let x = random(&[2, c, 9, 9], &mut rng);
    let k = random(&[m, c, 5, 5], &mut rng);
    let plan = LiftingKernel::new(&tab, m, c).unwrap();
    let got = lift(&x, &k, &plan);
    assert_eq!(got.shape(), &[2, m, N, 9, 9]);
    let bank = RotatedKernelBank::new(k.clone(), Arc::new(tab)).unwrap();
    for j in 0..N {
        let rk = bank.rotate_kernel(j).unwrap();
        let (want, _) = reference::conv2d(x.data(), [2, c, 9, 9], rk.data(), [m, c, 5, 5], 1, 2);
        for b in 0..2 {
            for mi in 0..m {
                for p in 0..81 {
                    let g = got.data()[(((b * m + mi) * N + j) * 81) + p];
                    let w = want[(b * m + mi) * 81 + p];
                    assert!((g - w).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn radial_kernel_gives_identical_slices() {
    let mut rng = RngStream::new(2, 0);
    let x = random(&[1, 1, 7, 7], &mut rng);
    let mut k = vec![0.0; 25];
    for r in 0..5 {
        for c in 0..5 {
            let d2 = (r as f64 - 2.0).powi(2) + (c as f64 - 2.0).powi(2);
            k[r * 5 + c] = (-d2 / 4.5).exp();
        }
    }
    let k = Tensor::new(&[1, 1, 5, 5], k).unwrap();
    let plan = LiftingKernel::new(&table(5), 1, 1).unwrap();
    let y = lift(&x, &k, &plan);
    let s0 = &y.data()[..49];
    for j in 1..N {
        let sj = &y.data()[j * 49..(j + 1) * 49];
        // 45° copies carry bilinear resampling error; only a gross bound is checked
        let tol = if j % (N / 4) == 0 { 1e-12 } else { 0.25 };
        assert!(rel_max_err(s0, sj) < tol, "slice {j}: {}", rel_max_err(s0, sj));
    }
    // a 1x1 kernel is fixed by every rotation
    let k = Tensor::new(&[1, 1, 1, 1], vec![0.8]).unwrap();
    let plan = LiftingKernel::new(&table(1), 1, 1).unwrap();
    let mut t = Tape::new();
    let (xv, kv) = (t.leaf(&x, false), t.leaf(&k, false));
    let y = lifting_conv(&mut t, xv, kv, &plan, 0).unwrap();
    let y = t.tensor(y);
    for j in 1..N {
        assert_eq!(&y.data()[..49], &y.data()[j * 49..(j + 1) * 49]);
    }
}

#[test]
fn lifting_is_equivariant_at_quarter_turns() {
    let mut rng = RngStream::new(3, 0);
    let x = random(&[2, 3, 10, 10], &mut rng);
    let k = random(&[4, 3, 5, 5], &mut rng);
    let plan = LiftingKernel::new(&table(5), 4, 3).unwrap();
    let base = lift(&x, &k, &plan);
    for q in 1..4 {
        let a = lift(&rotate_image(&x, q).unwrap(), &k, &plan);
        let b = rotate_se2(&base, q).unwrap();
        assert!(rel_max_err(a.data(), b.data()) < 1e-10, "q={q}");
    }
}

#[test]
fn se2_conv_matches_shift_rotate_correlate() {
    let mut rng = RngStream::new(4, 0);
    let tab = table(5);
    let (mi, mo) = (2, 3);
    let x = random(&[1, mi, N, 7, 7], &mut rng);
    let k = random(&[mo, mi, N, 5, 5], &mut rng);
    let plan = GroupKernel::new(&tab, mo, mi).unwrap();
    let got = group(&x, &k, &plan);
    for o in 0..mo {
        for j in 0..N {
            let mut acc = vec![0.0; 49];
            for m in 0..mi {
                for l in 0..N {
                    let base = &k.data()[((o * mi + m) * N + (l + N - j) % N) * 25..][..25];
                    let rk = tab.rotate_plane(base, j).unwrap();
                    let plane = &x.data()[((m * N) + l) * 49..][..49];
                    let (c, _) = reference::conv2d(plane, [1, 1, 7, 7], &rk, [1, 1, 5, 5], 1, 2);
                    acc.iter_mut().zip(&c).for_each(|(a, v)| *a += v);
                }
            }
            let g = &got.data()[((o * N) + j) * 49..][..49];
            assert!(rel_max_err(g, &acc) < 1e-10);
        }
    }
}

#[test]
fn se2_conv_preserves_orientation_constancy() {
    // 1x1 kernels are fixed by every rotation, so the statement is exact
    let mut rng = RngStream::new(5, 0);
    let plane = random(&[2, 36], &mut rng);
    let xd: Vec<f64> = (0..2).flat_map(|m| (0..N).flat_map(move |_| (0..36).map(move |p| (m, p)))).map(|(m, p)| plane.data()[m * 36 + p]).collect();
    let x = Tensor::new(&[1, 2, N, 6, 6], xd).unwrap();
    let kv = random(&[3, 2], &mut rng);
    let kd: Vec<f64> = (0..6).flat_map(|i| std::iter::repeat(kv.data()[i]).take(N)).collect();
    let k = Tensor::new(&[3, 2, N, 1, 1], kd).unwrap();
    let plan = GroupKernel::new(&table(1), 3, 2).unwrap();
    let mut t = Tape::new();
    let (xv, kv) = (t.leaf(&x, false), t.leaf(&k, false));
    let y = se2_conv(&mut t, xv, kv, &plan, 0).unwrap();
    let y = t.tensor(y);
    for o in 0..3 {
        let s0 = &y.data()[o * N * 36..][..36];
        for j in 1..N {
            let sj = &y.data()[(o * N + j) * 36..][..36];
            assert!(rel_max_err(s0, sj) < 1e-12);
        }
    }
}

#[test]
fn se2_conv_is_equivariant_at_quarter_turns() {
    let mut rng = RngStream::new(6, 0);
    let x = random(&[2, 3, N, 8, 8], &mut rng);
    let k = random(&[2, 3, N, 5, 5], &mut rng);
    let plan = GroupKernel::new(&table(5), 2, 3).unwrap();
    let base = group(&x, &k, &plan);
    for q in 1..4 {
        let a = group(&rotate_se2(&x, q).unwrap(), &k, &plan);
        let b = rotate_se2(&base, q).unwrap();
        assert!(rel_max_err(a.data(), b.data()) < 1e-10, "q={q}");
    }
}

#[test]
fn se2_conv_rejects_orientation_mismatch() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(&Tensor::zeros(&[1, 2, 4, 6, 6]), false);
    let k = t.leaf(&Tensor::zeros(&[3, 2, N, 5, 5]), false);
    let plan = GroupKernel::new(&table(5), 3, 2).unwrap();
    assert!(se2_conv(&mut t, x, k, &plan, 2).is_err());
}

#[test]
fn transposed_group_conv_is_equivariant() {
    let mut rng = RngStream::new(7, 0);
    let x = random(&[1, 3, N, 5, 5], &mut rng);
    let k = random(&[3, 2, N, 5, 5], &mut rng);
    let plan = GroupKernel::new(&table(5), 3, 2).unwrap();
    let run = |x: &Tensor<f64>, stride, pad| {
        let mut t = Tape::new();
        let (xv, kv) = (t.leaf(x, false), t.leaf(&k, false));
        let y = se2_conv_transpose(&mut t, xv, kv, &plan, stride, pad).unwrap();
        t.tensor(y)
    };
    for (stride, pad) in [(1, 2), (1, 0)] {
        let base = run(&x, stride, pad);
        for q in 1..4 {
            let a = run(&rotate_se2(&x, q).unwrap(), stride, pad);
            let b = rotate_se2(&base, q).unwrap();
            assert!(rel_max_err(a.data(), b.data()) < 1e-10);
        }
    }
}

#[test]
fn equivariance_chain_in_single_precision() {
    let mut rng = RngStream::new(8, 0);
    let x64 = random(&[2, 3, 18, 18], &mut rng);
    let k1 = random(&[4, 3, 5, 5], &mut rng).cast::<f32>();
    let k2 = random(&[3, 4, N, 5, 5], &mut rng).cast::<f32>();
    let lp = LiftingKernel::<f32>::new(&table(5), 4, 3).unwrap();
    let gp = GroupKernel::<f32>::new(&table(5), 3, 4).unwrap();
    let mut rs = RunningStats::<f32>::new(4);
    rs.mean = vec![0.1, -0.2, 0.3, 0.0];
    rs.var = vec![1.5, 0.5, 2.0, 1.0];
    let run = |x: &Tensor<f32>| {
        let mut t = Tape::<f32>::new();
        let xv = t.leaf(x, false);
        let (k1v, k2v) = (t.leaf(&k1, false), t.leaf(&k2, false));
        let g = t.leaf(&Tensor::full(&[4], 1.3f32), false);
        let b = t.leaf(&Tensor::full(&[4], 0.2f32), false);
        let h = lifting_conv(&mut t, xv, k1v, &lp, 2).unwrap();
        let (h, _) = orientation_batch_norm(&mut t, h, g, b, &rs, BnMode::Eval, 1e-5).unwrap();
        let h = t.leaky_relu(h, 0.1);
        let h = t.max_pool2d(h).unwrap();
        let h = se2_conv(&mut t, h, k2v, &gp, 2).unwrap();
        let h = t.leaky_relu(h, 0.1);
        let h = t.max_pool2d(h).unwrap();
        let p = orientation_project(&mut t, h, Projection::Mean).unwrap();
        (t.tensor(h).to_f64_vec(), t.tensor(h), t.tensor(p))
    };
    let x = x64.cast::<f32>();
    let (_, base, base_p) = run(&x);
    for q in 1..4 {
        let (_, a, ap) = run(&rotate_image(&x, q).unwrap());
        let b = rotate_se2(&base, q).unwrap();
        assert!(rel_max_err(&a.to_f64_vec(), &b.to_f64_vec()) < 1e-4);
        let bp = rotate_image(&base_p, q).unwrap();
        assert!(rel_max_err(&ap.to_f64_vec(), &bp.to_f64_vec()) < 1e-4);
    }
}

#[test]
fn projection_examples() {
    let mut t = Tape::<f64>::new();
    let vals: Vec<f64> = (1..=8).map(f64::from).collect();
    let x = Tensor::new(&[1, 1, N, 1, 1], vals).unwrap();
    for k in 0..N as isize {
        let s = cyclic_shift(&x, 2, k).unwrap();
        let v = t.leaf(&s, false);
        let mx = orientation_project(&mut t, v, Projection::Max).unwrap();
        assert_eq!(t.value(mx), &[8.0]);
        let mean = orientation_project(&mut t, v, Projection::Mean).unwrap();
        assert_eq!(t.value(mean), &[4.5]);
    }
    let c = t.leaf(&Tensor::full(&[2, 3, N, 2, 2], 0.7), false);
    let m = orientation_project(&mut t, c, Projection::Mean).unwrap();
    assert!(t.value(m).iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn mean_projection_is_bitwise_shift_invariant() {
    let mut rng = RngStream::new(9, 0);
    let x = random(&[2, 3, N, 4, 4], &mut rng).cast::<f32>();
    let mut t = Tape::<f32>::new();
    let xv = t.leaf(&x, false);
    let base = orientation_project(&mut t, xv, Projection::Mean).unwrap();
    let base = t.value(base).to_vec();
    for k in 1..N as isize {
        let s = t.leaf(&cyclic_shift(&x, 2, k).unwrap(), false);
        let p = orientation_project(&mut t, s, Projection::Mean).unwrap();
        let same = t.value(p).iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits());
        // summation order changes with the shift, so equality is to roundoff
        assert!(same || rel_max_err(&t.tensor(p).to_f64_vec(), &base.iter().map(|&v| v as f64).collect::<Vec<_>>()) < 1e-6);
    }
}

#[test]
fn orientation_batch_norm_statistics() {
    let mut rng = RngStream::new(10, 0);
    let x = random(&[3, 2, N, 3, 3], &mut rng);
    let mut t = Tape::<f64>::new();
    let xv = t.leaf(&x, false);
    let g = t.leaf(&Tensor::full(&[2], 1.0), false);
    let b = t.leaf(&Tensor::zeros(&[2]), false);
    let rs = RunningStats::new(2);
    let (y, stats) = orientation_batch_norm(&mut t, xv, g, b, &rs, BnMode::Train, 1e-5).unwrap();
    let stats = stats.unwrap();
    for c in 0..2 {
        let mut vals = Vec::new();
        for bi in 0..3 {
            vals.extend_from_slice(&x.data()[(bi * 2 + c) * N * 9..][..N * 9]);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((stats.mean[c] - mean).abs() < 1e-12);
        assert!((stats.var[c] - var).abs() < 1e-12);
    }
    // shifted input: same statistics, shifted output
    let xs = cyclic_shift(&x, 2, 3).unwrap();
    let xsv = t.leaf(&xs, false);
    let (ys, s2) = orientation_batch_norm(&mut t, xsv, g, b, &rs, BnMode::Train, 1e-5).unwrap();
    let s2 = s2.unwrap();
    for c in 0..2 {
        assert!((s2.mean[c] - stats.mean[c]).abs() < 1e-12);
        assert!((s2.var[c] - stats.var[c]).abs() < 1e-12);
    }
    let want = cyclic_shift(&t.tensor(y), 2, 3).unwrap();
    assert!(rel_max_err(t.value(ys), want.data()) < 1e-12);

    let c = t.leaf(&Tensor::full(&[2, 2, N, 2, 2], 3.0), false);
    let (yc, _) = orientation_batch_norm(&mut t, c, g, b, &rs, BnMode::Train, 1e-5).unwrap();
    assert!(t.value(yc).iter().all(|&v| v == 0.0));

    let one = t.leaf(&Tensor::zeros(&[1, 2, N, 2, 2]), false);
    assert!(orientation_batch_norm(&mut t, one, g, b, &rs, BnMode::Train, 1e-5).is_err());
    assert!(orientation_batch_norm(&mut t, one, g, b, &rs, BnMode::Eval, 1e-5).is_ok());
}

#[test]
fn cyclic_shift_group_law() {
    let mut rng = RngStream::new(11, 0);
    let x = random(&[2, N], &mut rng);
    assert_eq!(cyclic_shift(&x, 1, 0).unwrap(), x);
    assert_eq!(cyclic_shift(&x, 1, N as isize).unwrap(), x);
    let a = cyclic_shift(&cyclic_shift(&x, 1, 3).unwrap(), 1, 5).unwrap();
    assert_eq!(a, x);
    let one_hot = Tensor::<f64>::from_f64(&[4], &[1., 0., 0., 0.]).unwrap();
    assert_eq!(cyclic_shift(&one_hot, 0, 1).unwrap().data(), &[0., 1., 0., 0.]);
    assert_eq!(cyclic_shift(&one_hot, 0, -1).unwrap().data(), &[0., 0., 0., 1.]);
}

#[test]
fn rotate_image_examples() {
    let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
    assert_eq!(rotate_image(&x, 1).unwrap().data(), &[2., 4., 1., 3.]);
    assert_eq!(rotate_image(&x, 4).unwrap(), x);
    assert_eq!(rotate_image(&rotate_image(&x, 1).unwrap(), 1).unwrap(), rotate_image(&x, 2).unwrap());
    assert!(rotate_image(&Tensor::<f64>::zeros(&[2, 3]), 1).is_err());
}

#[test]
fn layers_pass_grad_check() {
    let mut rng = RngStream::new(12, 0);
    let tab = table(5);
    let lp = LiftingKernel::<f64>::new(&tab, 2, 1).unwrap();
    let gp = GroupKernel::<f64>::new(&tab, 2, 2).unwrap();
    let x = random(&[2, 1, 6, 6], &mut rng);
    let k1 = random(&[2, 1, 5, 5], &mut rng);
    let k2 = random(&[2, 2, N, 5, 5], &mut rng);
    let g = random(&[2], &mut rng);
    let b = random(&[2], &mut rng);
    let w = rng.normals(2 * 2 * 6 * 6);
    let rs = RunningStats::new(2);
    let opts = GradCheckOptions { max_coords: Some(40), ..Default::default() };
    let r = grad_check(&[x, k1, k2, g, b], &opts, |t, v| {
        let h = lifting_conv(t, v[0], v[1], &lp, 2)?;
        let (h, _) = orientation_batch_norm(t, h, v[3], v[4], &rs, BnMode::Train, 1e-5)?;
        let h = se2_conv(t, h, v[2], &gp, 2)?;
        let h = se2_conv_transpose(t, h, v[2], &gp, 1, 2)?;
        let h = orientation_project(t, h, Projection::Mean)?;
        let wv = t.constant(&[2, 2, 6, 6], w.clone())?;
        let p = t.mul(h, wv)?;
        Ok(t.sum(p))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rotate_kernel_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let tab = Arc::new(table(5));
        let mut rng = RngStream::new(seed, 1);
        let k1 = random(&[2, 5, 5], &mut rng);
        let k2 = random(&[2, 5, 5], &mut rng);
        let mix = Tensor::new(&[2, 5, 5], k1.data().iter().zip(k2.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
        for j in 0..N {
            let r1 = RotatedKernelBank::new(k1.clone(), tab.clone()).unwrap().rotate_kernel(j).unwrap();
            let r2 = RotatedKernelBank::new(k2.clone(), tab.clone()).unwrap().rotate_kernel(j).unwrap();
            let rm = RotatedKernelBank::new(mix.clone(), tab.clone()).unwrap().rotate_kernel(j).unwrap();
            for i in 0..50 {
                prop_assert!((rm.data()[i] - (a * r1.data()[i] + b * r2.data()[i])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shifts_compose(k1 in -20isize..20, k2 in -20isize..20, seed in 0u64..1000) {
        let mut rng = RngStream::new(seed, 2);
        let x = random(&[3, N, 2], &mut rng);
        let a = cyclic_shift(&cyclic_shift(&x, 1, k1).unwrap(), 1, k2).unwrap();
        let b = cyclic_shift(&x, 1, k1 + k2).unwrap();
        prop_assert_eq!(a, b);
    }
}
