use super::*;
use crate::autodiff::Mode;
use crate::rng::stream;
use rand::Rng;

fn tiny_cfg() -> NetConfig {
    NetConfig { t: 5, n: 14, channels: 16, dropout: 0.25, dilations: [1, 3, 1] }
}

const ALL: Trainable =
    Trainable { backbone: true, teacher: true, student: true, sja: true, disc: true };

fn random_input(seed: u64, b: usize, cfg: &NetConfig) -> Vec<f64> {
    let mut rng = stream(seed, "net-in", &[]);
    (0..b * cfg.input_channels() * cfg.t).map(|_| rng.gen::<f64>() * 0.2 - 0.1).collect()
}

#[test]
fn backbone_and_head_shape_contracts() {
    let cfg = tiny_cfg();
    let params = init_params_seeded(60, &cfg).unwrap();
    let mut net = StepNet::new(&params, &cfg, Mode::Train, ALL, stream(60, "step", &[]));
    let x = net.g.constant(&[2, cfg.input_channels(), cfg.t], random_input(61, 2, &cfg));
    let feats = net.backbone(x).unwrap();
    assert_eq!(net.g.shape(feats), &[2, cfg.channels, cfg.t]);
    let offsets = net.teacher(feats).unwrap();
    assert_eq!(net.g.shape(offsets), &[2, cfg.t, cfg.n]);
    let (rots, betas) = net.student(feats).unwrap();
    assert_eq!(net.g.shape(rots), &[2, cfg.t, BODY_JOINTS, 3, 3]);
    assert_eq!(net.g.shape(betas), &[2, 10]);
    let logits = net.discriminator(x).unwrap();
    assert_eq!(net.g.shape(logits), &[2]);
}

#[test]
fn backbone_rejects_wrong_channel_count() {
    let cfg = tiny_cfg();
    let params = init_params_seeded(62, &cfg).unwrap();
    let mut net = StepNet::new(&params, &cfg, Mode::Eval, Trainable::NONE, stream(0, "s", &[]));
    let x = net.g.constant(&[1, 7, cfg.t], vec![0.0; 7 * cfg.t]);
    assert!(net.backbone(x).is_err());
}

#[test]
fn first_conv_parameter_count_matches_architecture() {
    let cfg = NetConfig::default();
    let params = init_params_seeded(63, &cfg).unwrap();
    let w = params.get("bb.conv1.w").unwrap();
    let b = params.get("bb.conv1.b").unwrap();
    assert_eq!(w.shape, vec![1024, 28, 3]);
    assert_eq!(w.data.len() + b.data.len(), 28 * 1024 * 3 + 1024);
    let tout = params.get("t.out.w").unwrap();
    assert_eq!(tout.shape, vec![14, 1024]);
}

#[test]
fn zero_teacher_output_layer_gives_zero_offsets() {
    let cfg = tiny_cfg();
    let mut params = init_params_seeded(64, &cfg).unwrap();
    params.get_mut("t.out.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    params.get_mut("t.out.b").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    let mut net = StepNet::new(&params, &cfg, Mode::Eval, Trainable::NONE, stream(0, "s", &[]));
    let x = net.g.constant(&[1, cfg.input_channels(), cfg.t], random_input(65, 1, &cfg));
    let feats = net.backbone(x).unwrap();
    let offsets = net.teacher(feats).unwrap();
    assert!(net.g.values(offsets).iter().all(|&v| v == 0.0));
}

#[test]
fn zero_disc_output_layer_gives_zero_logits() {
    let cfg = tiny_cfg();
    let mut params = init_params_seeded(66, &cfg).unwrap();
    params.get_mut("d.out.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    let mut net = StepNet::new(&params, &cfg, Mode::Eval, Trainable::NONE, stream(0, "s", &[]));
    let x = net.g.constant(&[3, cfg.input_channels(), cfg.t], random_input(67, 3, &cfg));
    let logits = net.discriminator(x).unwrap();
    assert!(net.g.values(logits).iter().all(|&v| v == 0.0));
}

#[test]
fn heads_commute_with_temporal_permutation() {
    let cfg = tiny_cfg();
    let params = init_params_seeded(68, &cfg).unwrap();
    let b = 2;
    let c = cfg.channels;
    let mut rng = stream(69, "perm", &[]);
    let feats: Vec<f64> = (0..b * c * cfg.t).map(|_| rng.gen::<f64>()).collect();
    // reversal permutation of the temporal axis
    let mut permuted = feats.clone();
    for bi in 0..b {
        for ci in 0..c {
            for t in 0..cfg.t {
                permuted[(bi * c + ci) * cfg.t + t] = feats[(bi * c + ci) * cfg.t + (cfg.t - 1 - t)];
            }
        }
    }
    let run = |data: &[f64]| {
        let mut net = StepNet::new(&params, &cfg, Mode::Eval, Trainable::NONE, stream(0, "s", &[]));
        let f = net.g.constant(&[b, c, cfg.t], data.to_vec());
        let off = net.teacher(f).unwrap();
        net.g.values(off).to_vec()
    };
    let base = run(&feats);
    let perm = run(&permuted);
    for bi in 0..b {
        for t in 0..cfg.t {
            for n in 0..cfg.n {
                let a = base[(bi * cfg.t + t) * cfg.n + n];
                let p = perm[(bi * cfg.t + (cfg.t - 1 - t)) * cfg.n + n];
                assert_eq!(a, p, "per-frame head must be permutation-equivariant");
            }
        }
    }
}

#[test]
fn student_outputs_are_rotations_and_identity_biased() {
    let cfg = tiny_cfg();
    let params = init_params_seeded(70, &cfg).unwrap();
    let mut net = StepNet::new(&params, &cfg, Mode::Eval, Trainable::NONE, stream(0, "s", &[]));
    let x = net.g.constant(&[2, cfg.input_channels(), cfg.t], random_input(71, 2, &cfg));
    let feats = net.backbone(x).unwrap();
    let (rots, betas) = net.student(feats).unwrap();
    let rv = net.g.values(rots);
    let mut mean_dev = 0.0;
    for blk in rv.chunks(9) {
        // orthonormality
        for a in 0..3 {
            for b2 in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += blk[k * 3 + a] * blk[k * 3 + b2];
                }
                let expect = if a == b2 { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
        let dev: f64 = blk
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let e = if i % 4 == 0 { 1.0 } else { 0.0 };
                (v - e) * (v - e)
            })
            .sum::<f64>()
            .sqrt();
        mean_dev += dev;
    }
    mean_dev /= (rv.len() / 9) as f64;
    assert!(mean_dev < 0.1, "fresh rotations deviate {mean_dev} from identity");

    // per-window output count: 10 betas + T*K*9 rotation values
    let per_window = net.g.values(betas).len() / 2 + rv.len() / 2;
    assert_eq!(per_window, 10 + cfg.t * BODY_JOINTS * 9);
}

#[test]
fn identity_raw_blocks_stay_identity() {
    let cfg = tiny_cfg();
    // zero rotation weights -> raw blocks equal the identity-tiled bias
    let mut params = init_params_seeded(72, &cfg).unwrap();
    params.get_mut("s.rot.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    let mut net = StepNet::new(&params, &cfg, Mode::Eval, Trainable::NONE, stream(0, "s", &[]));
    let x = net.g.constant(&[1, cfg.input_channels(), cfg.t], random_input(73, 1, &cfg));
    let feats = net.backbone(x).unwrap();
    let (rots, _) = net.student(feats).unwrap();
    for (i, &v) in net.g.values(rots).iter().enumerate() {
        let expect = if i % 9 % 4 == 0 { 1.0 } else { 0.0 };
        assert!((v - expect).abs() < 1e-12);
    }
}

#[test]
fn init_is_seed_deterministic() {
    let cfg = tiny_cfg();
    let a = init_params_seeded(99, &cfg).unwrap();
    let b = init_params_seeded(99, &cfg).unwrap();
    assert_eq!(a, b);
    let c = init_params_seeded(100, &cfg).unwrap();
    assert_ne!(a, c);
}

#[test]
fn checkpoint_round_trip_bit_exact_and_cfg_check() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.pn3dcp");
    let p2 = dir.path().join("b.pn3dcp");
    let cfg = tiny_cfg();
    let params = init_params_seeded(74, &cfg).unwrap();
    let ck = Checkpoint {
        params,
        net_cfg: cfg.clone(),
        config_echo: "train.lr = 0.0001\n".into(),
        seed: 42,
        stages_done: 0b0011,
    };
    save_checkpoint(&ck, &p1).unwrap();
    let back = load_checkpoint(&p1).unwrap();
    assert_eq!(back.params, ck.params);
    assert_eq!(back.net_cfg, cfg);
    assert_eq!(back.seed, 42);
    assert_eq!(back.stages_done, 0b0011);
    assert_eq!(back.config_echo, ck.config_echo);
    save_checkpoint(&back, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let other = NetConfig { channels: 32, ..tiny_cfg() };
    assert!(require_netcfg(&back, &other).is_err());
    assert!(require_netcfg(&back, &cfg).is_ok());
}

#[test]
fn frozen_groups_receive_no_gradient() {
    let cfg = tiny_cfg();
    let params = init_params_seeded(75, &cfg).unwrap();
    let trainable = Trainable { backbone: false, teacher: true, student: false, sja: false, disc: false };
    let mut net = StepNet::new(&params, &cfg, Mode::Train, trainable, stream(76, "s", &[]));
    let x = net.g.constant(&[2, cfg.input_channels(), cfg.t], random_input(77, 2, &cfg));
    let feats = net.backbone(x).unwrap();
    let off = net.teacher(feats).unwrap();
    let loss = net.g.sum_squares(off);
    net.g.backward(loss).unwrap();
    let grads = net.param_grads();
    assert!(grads.keys().all(|k| k.starts_with("t.")));
    assert!(grads.contains_key("t.out.w"));
    // frozen backbone also runs in eval mode: no bn updates recorded for it
    assert!(net.bn_updates.keys().all(|k| k.starts_with("t.")));
}

#[test]
fn pack_x2d_layout_matches_graph_op() {
    let cfg = tiny_cfg();
    let mut rng = stream(78, "pack", &[]);
    let w1: Vec<f64> = (0..cfg.t * cfg.n * 2).map(|_| rng.gen::<f64>()).collect();
    let w2: Vec<f64> = (0..cfg.t * cfg.n * 2).map(|_| rng.gen::<f64>()).collect();
    let flat = pack_x2d(&[&w1, &w2], cfg.t, cfg.n);
    let mut g = crate::autodiff::Graph::new();
    let a = g.constant(&[cfg.t, cfg.n, 2], w1);
    let b = g.constant(&[cfg.t, cfg.n, 2], w2);
    let packed = g.pack_windows(&[a, b]).unwrap();
    assert_eq!(g.values(packed), &flat[..]);
}

#[test]
fn end_to_end_teacher_gradient_matches_finite_differences() {
    // normalized window -> backbone -> teacher head -> lift, checked against
    // central differences w.r.t. parameters at both ends of the chain.
    use crate::autodiff::check_gradients;
    use crate::geometry::{normalize_window, CameraConvention, SkeletonSpec};

    let cfg = NetConfig { t: 5, n: 14, channels: 8, dropout: 0.0, dilations: [1, 3, 1] };
    let params = init_params_seeded(200, &cfg).unwrap();
    let mut rng = stream(201, "e2e", &[]);
    let raw: Vec<f64> = (0..cfg.t * cfg.n * 2).map(|_| rng.gen::<f64>() - 0.5).collect();
    let skel = SkeletonSpec::canonical();
    let cam = CameraConvention::default();
    let win = normalize_window(&raw, &[0, 1, 2, 3, 4], &skel, &cam).unwrap();

    // conv biases are excluded: train-mode batchnorm cancels constant
    // channel shifts, so their gradient is exactly zero.
    for target in ["bb.conv1.w", "bb.bn1.gamma", "t.out.w"] {
        let shape = params.get(target).unwrap().shape.clone();
        let values = params.get(target).unwrap().data.clone();
        let params_c = params.clone();
        let cfg_c = cfg.clone();
        let win_c = win.joints.clone();
        let target_name = target.to_string();
        let err = check_gradients(
            move |g, leaf| {
                let mut net = StepNet::new(
                    &params_c,
                    &cfg_c,
                    Mode::Train,
                    Trainable { backbone: true, teacher: true, student: false, sja: false, disc: false },
                    stream(0, "fd", &[]),
                );
                // adopt the caller's graph so the perturbed leaf drives the chain
                std::mem::swap(&mut net.g, g);
                net.use_leaf(&target_name, leaf);
                let x = {
                    let packed = pack_x2d(&[win_c.as_slice()], cfg_c.t, cfg_c.n);
                    net.g.constant(&[1, 2 * cfg_c.n, cfg_c.t], packed)
                };
                let feats = net.backbone(x)?;
                let off = net.teacher(feats)?;
                let off0 = net.g.select0(off, 0)?;
                let x2d = net.g.constant(&[cfg_c.t, cfg_c.n, 2], win_c.clone());
                let lifted = net.g.lift(x2d, off0, 10.0, 1.0)?;
                let loss = net.g.sum_squares(lifted);
                std::mem::swap(&mut net.g, g);
                Ok(loss)
            },
            &shape,
            &values,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{target}: end-to-end fd error {err}");
    }
}
