use super::*;
use crate::latent::Noise;
use crate::se2::{cyclic_shift, rotate_image};
use crate::tensor::{BnMode, RngStream, Tape, Tensor};

fn small(variant: Variant, projection: bool) -> ModelConfig {
    ModelConfig {
        channels: [3, 4, 4, 5],
        latent_iso: 3,
        latent_ori: 2,
        latent_baseline: 5,
        grid_channels: 2,
        patch_size: 20,
        intermediate_projection: projection,
        disc_channels: [2, 3, 3, 4],
        ..ModelConfig::desk(variant)
    }
}

fn images(rng: &mut RngStream, b: usize, cfg: &ModelConfig) -> Tensor<f32> {
    let n = b * cfg.image_channels * cfg.patch_size * cfg.patch_size;
    Tensor::new(
        &[b, cfg.image_channels, cfg.patch_size, cfg.patch_size],
        rng.normals(n).into_iter().map(|v| v as f32).collect(),
    )
    .unwrap()
}

/// Running statistics away from their `(0, 1)` initial values.
fn perturb_running(store: &mut ParameterStore, rng: &mut RngStream) {
    for (name, t) in store.iter_mut() {
        if name.ends_with(".bn.mean") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-0.3, 0.3) as f32);
        } else if name.ends_with(".bn.var") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(0.5, 2.0) as f32);
        }
    }
}

fn encode_values(model: &Model<f32>, store: &ParameterStore, x: &Tensor<f32>, mode: BnMode) -> Vec<Tensor<f32>> {
    let mut tape = Tape::new();
    let mut p = Bound::new(store, mode, &[]);
    let xv = tape.leaf(x, false);
    let post = model.encode(&mut tape, &mut p, xv).unwrap();
    let mut out = vec![tape.tensor(post.gaussian().0), tape.tensor(post.gaussian().1)];
    if let Some((q, _)) = post.angular() {
        out.push(tape.tensor(q));
    }
    out
}

fn rel_inf(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
    let scale = a.data().iter().map(|x| x.abs()).fold(0f32, f32::max);
    diff as f64 / (scale as f64 + 1e-6)
}

#[test]
fn desk_heads_have_expected_shapes() {
    let mut rng = RngStream::new(0, 0);
    for (variant, shapes) in [
        (Variant::Disentangled, vec![vec![2, 32], vec![2, 32], vec![2, 32, 8]]),
        (Variant::Baseline, vec![vec![2, 64], vec![2, 64]]),
        (Variant::Se2Grid, vec![vec![2, 8, 8], vec![2, 8, 8]]),
    ] {
        let cfg = ModelConfig::desk(variant);
        let (model, store) = build_model(&cfg, &mut rng).unwrap();
        let x = images(&mut rng, 2, &cfg);
        let heads = encode_values(&model, &store, &x, BnMode::Train);
        let got: Vec<Vec<usize>> = heads.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(got, shapes, "{variant}");
        assert!(heads.iter().all(Tensor::is_finite));
        if let Some(q) = heads.get(2) {
            for row in q.data().chunks(8) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn baseline_widths_balance_weight_counts() {
    for cfg in [ModelConfig::desk(Variant::Baseline), ModelConfig::paper(Variant::Disentangled), small(Variant::Baseline, false)] {
        let report = cfg.parity();
        assert!(report.relative_gap() < 0.1, "{report:?}");
    }
    let mut rng = RngStream::new(1, 0);
    let (_, store) = build_model(&ModelConfig::desk(Variant::Baseline), &mut rng).unwrap();
    let parity = ModelConfig::desk(Variant::Baseline).parity();
    assert_eq!(store.weight_count(Group::Encoder) + store.weight_count(Group::Decoder), parity.baseline);
    let lopsided = ModelConfig {
        baseline_channels: Some([1, 1, 1, 1]),
        ..ModelConfig::desk(Variant::Baseline)
    };
    assert!(matches!(build_model(&lopsided, &mut rng), Err(Error::Config(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut rng = RngStream::new(2, 0);
    let tiny = ModelConfig {
        patch_size: 12,
        ..ModelConfig::desk(Variant::Disentangled)
    };
    assert!(build_model(&tiny, &mut rng).is_err());
    let odd_n = ModelConfig {
        orientations: 6,
        ..ModelConfig::desk(Variant::Disentangled)
    };
    assert!(build_model(&odd_n, &mut rng).is_err());

    let cfg = small(Variant::Disentangled, true);
    let (model, store) = build_model(&cfg, &mut rng).unwrap();
    let mut tape = Tape::new();
    let mut p = Bound::new(&store, BnMode::Eval, &[]);
    let x = tape.leaf(&Tensor::<f32>::zeros(&[1, 3, 22, 22]), false);
    assert!(model.encode(&mut tape, &mut p, x).is_err());
    let code = tape.leaf(&Tensor::<f32>::zeros(&[1, 4, 8]), false);
    assert!(model.decode(&mut tape, &mut p, code).is_err());
    let x = tape.leaf(&Tensor::<f32>::zeros(&[1, 3, 20, 20]), false);
    let mut train = Bound::new(&store, BnMode::Train, &[]);
    assert!(model.encode(&mut tape, &mut train, x).is_err());
}

#[test]
fn encoder_heads_transform_correctly_under_quarter_turns() {
    let mut rng = RngStream::new(3, 0);
    for projection in [true, false] {
        for variant in [Variant::Disentangled, Variant::Se2Grid] {
            let cfg = small(variant, projection);
            let (model, mut store) = build_model(&cfg, &mut rng).unwrap();
            perturb_running(&mut store, &mut rng);
            let x = images(&mut rng, 3, &cfg);
            for mode in [BnMode::Train, BnMode::Eval] {
                let base = encode_values(&model, &store, &x, mode);
                for k in 1..4 {
                    let rot = encode_values(&model, &store, &rotate_image(&x, k).unwrap(), mode);
                    let shift = k as isize * 2;
                    if variant == Variant::Disentangled {
                        assert!(rel_inf(&base[0], &rot[0]) < 1e-4, "mu {variant} k={k}");
                        assert!(rel_inf(&base[1], &rot[1]) < 1e-4, "sigma {variant} k={k}");
                        let want = cyclic_shift(&base[2], 2, shift).unwrap();
                        assert!(rel_inf(&want, &rot[2]) < 1e-4, "q k={k}");
                    } else {
                        for h in 0..2 {
                            let want = cyclic_shift(&base[h], 2, shift).unwrap();
                            assert!(rel_inf(&want, &rot[h]) < 1e-4, "grid head {h} k={k}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn baseline_encoder_is_not_invariant() {
    let mut rng = RngStream::new(4, 0);
    let cfg = small(Variant::Baseline, false);
    let (model, store) = build_model(&cfg, &mut rng).unwrap();
    let x = images(&mut rng, 3, &cfg);
    let base = encode_values(&model, &store, &x, BnMode::Train);
    let rot = encode_values(&model, &store, &rotate_image(&x, 1).unwrap(), BnMode::Train);
    assert!(rel_inf(&base[0], &rot[0]) > 0.01);
}

fn decode_angles(model: &Model<f32>, store: &ParameterStore, z_iso: &[f64], z_ori: &[f64], b: usize, mode: BnMode) -> Tensor<f32> {
    let cfg = model.config();
    let mut tape = Tape::new();
    let mut p = Bound::new(store, mode, &[]);
    let zi = tape.constant(&[b, cfg.latent_iso], z_iso.iter().map(|&v| v as f32).collect()).unwrap();
    let zo = tape.constant(&[b, cfg.latent_ori], z_ori.iter().map(|&v| v as f32).collect()).unwrap();
    let code = model
        .decoder_code(&mut tape, &LatentVars { gaussian: zi, angles: Some(zo) })
        .unwrap();
    let y = model.decode(&mut tape, &mut p, code).unwrap();
    tape.tensor(y)
}

#[test]
fn decoder_rotates_with_angle_shifts() {
    let mut rng = RngStream::new(5, 0);
    for projection in [true, false] {
        let cfg = small(Variant::Disentangled, projection);
        let (model, mut store) = build_model(&cfg, &mut rng).unwrap();
        perturb_running(&mut store, &mut rng);
        let b = 3;
        let z_iso = rng.normals(b * cfg.latent_iso);
        let z_ori: Vec<f64> = (0..b * cfg.latent_ori).map(|_| rng.uniform_range(0.0, std::f64::consts::TAU)).collect();
        for mode in [BnMode::Train, BnMode::Eval] {
            let base = decode_angles(&model, &store, &z_iso, &z_ori, b, mode);
            assert_eq!(base.shape(), &[b, 3, 20, 20]);
            for k in 1..4 {
                let shifted: Vec<f64> = z_ori
                    .iter()
                    .map(|a| (a + k as f64 * std::f64::consts::FRAC_PI_2).rem_euclid(std::f64::consts::TAU))
                    .collect();
                let got = decode_angles(&model, &store, &z_iso, &shifted, b, mode);
                let want = rotate_image(&base, k).unwrap();
                assert!(rel_inf(&want, &got) < 1e-4, "projection={projection} k={k}: {}", rel_inf(&want, &got));
            }
        }
    }
}

#[test]
fn grid_decoder_rotates_with_cyclic_shifts() {
    let mut rng = RngStream::new(6, 0);
    let cfg = small(Variant::Se2Grid, true);
    let (model, store) = build_model(&cfg, &mut rng).unwrap();
    let z = Tensor::new(&[2, 2, 8], rng.normals(32).into_iter().map(|v| v as f32).collect()).unwrap();
    let run = |z: &Tensor<f32>| {
        let mut tape = Tape::new();
        let mut p = Bound::new(&store, BnMode::Train, &[]);
        let zv = tape.leaf(z, false);
        let y = model.decode(&mut tape, &mut p, zv).unwrap();
        tape.tensor(y)
    };
    let base = run(&z);
    for k in 1..4 {
        let got = run(&cyclic_shift(&z, 2, 2 * k as isize).unwrap());
        assert!(rel_inf(&rotate_image(&base, k).unwrap(), &got) < 1e-4);
    }
}

#[test]
fn uninformative_code_decodes_to_finite_image() {
    let mut rng = RngStream::new(7, 0);
    let cfg = ModelConfig::desk(Variant::Disentangled);
    let (model, store) = build_model(&cfg, &mut rng).unwrap();
    let mut tape = Tape::<f32>::new();
    let mut p = Bound::new(&store, BnMode::Eval, &[]);
    let mu = tape.constant(&[2, 32], vec![0.0; 64]).unwrap();
    let ls = tape.constant(&[2, 32], vec![0.0; 64]).unwrap();
    let q = tape.constant(&[2, 32, 8], vec![0.125; 512]).unwrap();
    let lq = tape.ln(q);
    let post = PosteriorVars::Disentangled { mu, log_sigma: ls, q, log_q: lq };
    let noise = Noise::centred(64, 64);
    let z = model.sample(&mut tape, &post, &noise).unwrap();
    let code = model.decoder_code(&mut tape, &z).unwrap();
    let y = model.decode(&mut tape, &mut p, code).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 36, 36]);
    assert!(tape.tensor(y).is_finite());
}

#[test]
fn discriminator_is_deterministic_with_configured_features() {
    let mut rng = RngStream::new(8, 0);
    let cfg = ModelConfig::desk(Variant::Disentangled);
    let (model, store) = build_model(&cfg, &mut rng).unwrap();
    let x = images(&mut rng, 2, &cfg);
    let run = || {
        let mut tape = Tape::new();
        let mut p = Bound::new(&store, BnMode::Eval, &[]);
        let xv = tape.leaf(&x, false);
        let d = model.discriminate(&mut tape, &mut p, xv).unwrap();
        let feats: Vec<Tensor<f32>> = d.features.iter().map(|&f| tape.tensor(f)).collect();
        (tape.tensor(d.logit), feats)
    };
    let (l1, f1) = run();
    let (l2, f2) = run();
    assert_eq!((&l1, &f1), (&l2, &f2));
    assert_eq!(l1.shape(), &[2]);
    assert!(l1.is_finite());
    let shapes: Vec<&[usize]> = f1.iter().map(Tensor::shape).collect();
    assert_eq!(shapes, vec![&[2, 16, 9, 9][..], &[2, 32, 5, 5][..]]);
}

#[test]
fn parameters_are_grouped_and_initialised() {
    let mut rng = RngStream::new(9, 0);
    let cfg = ModelConfig::desk(Variant::Disentangled);
    let (_, store) = build_model(&cfg, &mut rng).unwrap();
    store.check_against(&parameter_specs(&cfg.resolved())).unwrap();
    for (name, t) in store.iter() {
        let role = Role::of(name).unwrap();
        Group::of(name).unwrap();
        match role {
            Role::Kernel => {
                let spec = parameter_specs(&cfg.resolved()).into_iter().find(|s| s.name == name).unwrap();
                let (fi, fo) = spec.fans.unwrap();
                let a = (6.0 / (fi + fo) as f32).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= a));
                assert!(t.data().iter().any(|&v| v != 0.0));
            }
            Role::Scale | Role::RunningVar => assert!(t.data().iter().all(|&v| v == 1.0)),
            _ => assert!(t.data().iter().all(|&v| v == 0.0)),
        }
    }
    assert!(store.trainable(Group::Encoder).iter().all(|n| n.starts_with("enc.") && !n.ends_with(".mean")));
    assert!(!store.trainable(Group::Discriminator).is_empty());
}

#[test]
fn config_pairs_round_trip() {
    let cfg = ModelConfig {
        baseline_channels: Some([5, 6, 7, 8]),
        ..small(Variant::Se2Grid, false)
    };
    assert_eq!(ModelConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
    let mut pairs = cfg.to_pairs();
    pairs.push(("bogus".into(), "1".into()));
    assert!(ModelConfig::from_pairs(&pairs).is_err());
}
