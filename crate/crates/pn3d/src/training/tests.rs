use super::*;
use crate::bodymodel::{synth_model, BodyShapeConfig};
use crate::data::{synth_motion, MotionConfig};
use crate::networks::init_params_seeded;
use crate::rng::stream;

fn tiny_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        net: NetConfig { t: 9, n: 14, channels: 12, dropout: 0.1, dilations: [1, 3, 1] },
        batch_size: 8,
        lr: 1e-3,
        epochs: [2, 2, 2, 1],
        seed,
        ..TrainConfig::default()
    }
}

fn tiny_setup(seed: u64, sequences: usize, len: usize) -> (BodyModel, Vec<KeypointSequence>) {
    let mut rng = stream(seed, "train-test-body", &[]);
    let body = synth_model(&mut rng, 120, &BodyShapeConfig::default()).unwrap();
    let mut rng = stream(seed, "train-test-motion", &[]);
    let seqs = synth_motion(&body, &mut rng, sequences, len, &MotionConfig::default()).unwrap();
    (body, seqs)
}

#[test]
fn adam_zero_grads_leave_params_unchanged() {
    let cfg = tiny_cfg(0);
    let mut params = ModelParams::default();
    params.insert("w", &[3], vec![1.0, 2.0, 3.0]);
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), vec![0.0; 3]);
    let mut state = AdamState::default();
    adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
    assert_eq!(state.t, 1);
    assert_eq!(params.get("w").unwrap().data, vec![1.0, 2.0, 3.0]);
}

#[test]
fn adam_first_step_is_signed_lr() {
    // From zero state: delta = -lr * g / (|g| + eps)
    let cfg = TrainConfig { lr: 0.05, ..tiny_cfg(0) };
    let mut params = ModelParams::default();
    params.insert("w", &[2], vec![0.0, 0.0]);
    let g = vec![0.3, -7.0];
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), g.clone());
    let mut state = AdamState::default();
    adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
    for i in 0..2 {
        let expect = -cfg.lr * g[i] / (g[i].abs() + cfg.adam_eps);
        assert!((params.get("w").unwrap().data[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn adam_constant_gradient_approaches_signed_step() {
    let cfg = TrainConfig { lr: 0.01, ..tiny_cfg(0) };
    let mut params = ModelParams::default();
    params.insert("w", &[1], vec![0.0]);
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), vec![0.25]);
    let mut state = AdamState::default();
    let mut prev = 0.0;
    let mut last_step = 0.0;
    for _ in 0..500 {
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        let cur = params.get("w").unwrap().data[0];
        last_step = prev - cur;
        prev = cur;
    }
    assert!((last_step - cfg.lr).abs() < 1e-6, "asymptotic step {last_step} vs lr {}", cfg.lr);
}

#[test]
fn oracle_teacher_gives_vanishing_losses() {
    let (_, seqs) = tiny_setup(140, 2, 20);
    let cam = CameraConvention::default();
    let skel = SkeletonSpec::canonical();
    let mut rng = stream(141, "oracle-win", &[]);
    let batches = make_windows(&seqs, 9, 1, &mut rng, 8, &skel, &cam).unwrap();
    let mut rot_rng = stream(142, "oracle-rot", &[]);
    for batch in batches.iter().take(3) {
        let (mss, tc, bl) = teacher_oracle_losses(batch, &skel, &cam, &mut rot_rng).unwrap();
        assert!(mss < 1e-9, "mss {mss}");
        assert!(tc < 1e-9, "tc {tc}");
        assert!(bl < 1e-9, "bl {bl}");
    }
}

#[test]
fn stage1_zero_weights_without_adversary_keeps_params() {
    let (body, seqs) = tiny_setup(143, 1, 12);
    let mut cfg = tiny_cfg(143);
    cfg.weights = LossWeights { mss: 0.0, tc: 0.0, bl: 0.0, ..LossWeights::default() };
    cfg.adversarial = false;
    cfg.epochs = [1, 0, 0, 0];
    let mut params = init_params_seeded(143, &cfg.net).unwrap();
    let before_bb = params.hash_group("bb.conv");
    let before_t = params.hash_group("t.out");
    let trainer = Trainer::new(&cfg, &body, 1);
    trainer.run_stage(1, &seqs, &mut params).unwrap();
    // zero objective -> zero gradients -> Adam steps are exactly zero
    assert_eq!(params.hash_group("bb.conv"), before_bb);
    assert_eq!(params.hash_group("t.out"), before_t);
}

#[test]
fn stage1_runs_and_is_seed_deterministic() {
    let (body, seqs) = tiny_setup(144, 2, 14);
    let cfg = TrainConfig { epochs: [2, 0, 0, 0], ..tiny_cfg(144) };
    let run = || {
        let mut params = init_params_seeded(144, &cfg.net).unwrap();
        let trainer = Trainer::new(&cfg, &body, 1);
        let logs = trainer.run_stage(1, &seqs, &mut params).unwrap();
        (params.hash_group(""), serde_json::to_string(&logs).unwrap())
    };
    let (h1, l1) = run();
    let (h2, l2) = run();
    assert_eq!(h1, h2, "parameter bits must match across reruns");
    assert_eq!(l1, l2, "logs must match across reruns");
    let logs: Vec<EpochLog> = serde_json::from_str(&l1).unwrap();
    assert!(logs.iter().all(|l| l.wall_ms == 0.0));
    assert!(logs[0].loss_mss.is_finite() && logs[0].loss_bl > 0.0);
}

#[test]
fn stage2_freezes_teacher_and_backbone() {
    let (body, seqs) = tiny_setup(145, 2, 14);
    let cfg = TrainConfig { epochs: [1, 2, 0, 0], ..tiny_cfg(145) };
    let mut params = init_params_seeded(145, &cfg.net).unwrap();
    let trainer = Trainer::new(&cfg, &body, 1);
    trainer.run_stage(1, &seqs, &mut params).unwrap();
    let bb = params.hash_group("bb.");
    let t = params.hash_group("t.");
    let s_before = params.hash_group("s.");
    let logs = trainer.run_stage(2, &seqs, &mut params).unwrap();
    assert_eq!(params.hash_group("bb."), bb, "backbone must stay frozen in stage 2");
    assert_eq!(params.hash_group("t."), t, "teacher must stay frozen in stage 2");
    assert_ne!(params.hash_group("s."), s_before, "student must train in stage 2");
    assert!(logs.iter().all(|l| l.loss_kd.is_finite()));
}

#[test]
fn stage3_initializes_convex_adaptation_and_keeps_freeze() {
    let (body, seqs) = tiny_setup(146, 2, 14);
    let cfg = TrainConfig { epochs: [1, 1, 2, 0], ..tiny_cfg(146) };
    let mut params = init_params_seeded(146, &cfg.net).unwrap();
    let trainer = Trainer::new(&cfg, &body, 1);
    trainer.run_stage(1, &seqs, &mut params).unwrap();
    trainer.run_stage(2, &seqs, &mut params).unwrap();
    assert!(!params.contains("sja.logits"));
    let bb = params.hash_group("bb.");
    trainer.run_stage(3, &seqs, &mut params).unwrap();
    assert!(params.contains("sja.logits"));
    assert_eq!(params.hash_group("bb."), bb);
    // adaptation weights stay convex by construction
    let logits = &params.get("sja.logits").unwrap().data;
    let sja = crate::bodymodel::SJAParams {
        logits: logits.clone(),
        joints: body.lbs.k,
        vertices: body.lbs.v,
    };
    let w = crate::bodymodel::sja_weights(&sja);
    for r in 0..body.lbs.k {
        let sum: f64 = w[r * body.lbs.v..(r + 1) * body.lbs.v].iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn stage4_trains_everything_and_stays_finite() {
    let (body, seqs) = tiny_setup(147, 2, 14);
    let cfg = TrainConfig { epochs: [1, 1, 1, 2], ..tiny_cfg(147) };
    let mut params = init_params_seeded(147, &cfg.net).unwrap();
    let trainer = Trainer::new(&cfg, &body, 1);
    for stage in 1..=3 {
        trainer.run_stage(stage, &seqs, &mut params).unwrap();
    }
    let bb = params.hash_group("bb.");
    let logs = trainer.run_stage(4, &seqs, &mut params).unwrap();
    assert_ne!(params.hash_group("bb."), bb, "stage 4 must update the backbone");
    for l in &logs {
        for v in [l.loss_mss, l.loss_tc, l.loss_bl, l.loss_kd, l.loss_rot, l.loss_beta, l.loss_disc] {
            assert!(v.is_finite());
        }
    }
}

#[test]
fn frozen_teacher_outputs_are_constant_across_epochs() {
    // with the backbone/teacher frozen in eval mode, the teacher's output
    // for a fixed window cannot change while the student trains
    let (body, seqs) = tiny_setup(148, 1, 14);
    let cfg = TrainConfig { epochs: [1, 3, 0, 0], ..tiny_cfg(148) };
    let mut params = init_params_seeded(148, &cfg.net).unwrap();
    let trainer = Trainer::new(&cfg, &body, 1);
    trainer.run_stage(1, &seqs, &mut params).unwrap();

    let probe = |params: &ModelParams| -> Vec<f64> {
        use crate::autodiff::Mode;
        let mut net = StepNet::new(params, &cfg.net, Mode::Eval, Trainable::NONE, stream(0, "p", &[]));
        let cam = CameraConvention::default();
        let skel = SkeletonSpec::canonical();
        let mut rng = stream(1, "probe", &[]);
        let batches = make_windows(&seqs, 9, 1, &mut rng, 4, &skel, &cam).unwrap();
        let w = &batches[0].windows[0];
        let x = net.g.constant(&[1, 28, 9], pack_x2d(&[w.x.as_slice()], 9, 14));
        let f = net.backbone(x).unwrap();
        let off = net.teacher(f).unwrap();
        net.g.values(off).to_vec()
    };
    let before = probe(&params);
    trainer.run_stage(2, &seqs, &mut params).unwrap();
    let after = probe(&params);
    assert_eq!(before, after);
}
