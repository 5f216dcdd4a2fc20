//! Command implementations: synthetic data generation, staged training with
//! resume, sliding-window inference, evaluation, and parameter export.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};

use crate::bodymodel::{
    linear_sja, load_model, regress_joints, save_model, sja_weights, synth_model, BodyModel,
    BodyShapeConfig, SJAParams, NUM_BODY_JOINTS,
};
use crate::config::{build_config, to_flat, RunManifest, StageRecord};
use crate::container::{Container, EXPORT_MAGIC};
use crate::data::{
    load_keypoints, replicate_single_frame, save_keypoints, synth_motion, JsonFrame,
    KeypointSequence, MotionConfig, DEFAULT_FPS,
};
use crate::error::{Error, Result};
use crate::geometry::{joint, normalize_window, CameraConvention, SkeletonSpec};
use crate::metrics::{evaluate, fuse_predictions, EvalReport};
use crate::networks::{
    init_params_seeded, load_checkpoint, pack_x2d, require_netcfg, save_checkpoint, Checkpoint,
    ModelParams, StepNet, Trainable,
};
use crate::rng::stream;
use crate::training::Trainer;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output body-model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Output keypoint dataset (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub sequences: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 120)]
    pub length: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 800)]
    pub vertices: usize,
    /// Peak joint angle in radians.
    #[arg(long, default_value_t = 0.35)]
    pub amplitude: f64,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut rng = stream(args.seed, "synth-model", &[]);
    let body = synth_model(&mut rng, args.vertices, &BodyShapeConfig::default())?;
    save_model(&body, &args.model)?;
    let mut rng = stream(args.seed, "synth-motion", &[]);
    let motion = MotionConfig { amplitude: args.amplitude, ..MotionConfig::default() };
    let seqs = synth_motion(&body, &mut rng, args.sequences, args.length, &motion)?;
    save_keypoints(&args.data, &seqs)?;
    eprintln!(
        "wrote body model ({} vertices) to {} and {} sequences x {} frames to {}",
        args.vertices,
        args.model.display(),
        args.sequences,
        args.length,
        args.data.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training keypoints (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Body-model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory for checkpoints, logs, manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated stages to run, in order (subset of 1,2,3,4).
    #[arg(long, default_value = "1,2,3,4")]
    pub stages: String,
    /// Master seed (overrides the config file).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config overrides, e.g. --set train.lr=0.0002 (repeatable).
    #[arg(long = "set")]
    pub set: Vec<String>,
}

fn ckpt_path(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("ckpt_stage{stage}.pn3dcp"))
}

fn parse_stages(s: &str) -> Result<Vec<u8>> {
    let mut stages = Vec::new();
    for tok in s.split(',') {
        let v: u8 = tok
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("bad stage `{tok}` in --stages")))?;
        if !(1..=4).contains(&v) {
            return Err(Error::Usage(format!("stage {v} out of range 1..=4")));
        }
        stages.push(v);
    }
    if stages.is_empty() {
        return Err(Error::Usage("--stages must name at least one stage".into()));
    }
    let mut sorted = stages.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted != stages {
        return Err(Error::Usage("--stages must be strictly increasing".into()));
    }
    Ok(stages)
}

pub fn cmd_train(args: &TrainArgs, threads: usize) -> Result<()> {
    let cfg = build_config(args.config.as_deref(), &args.set, args.seed)?;
    let stages = parse_stages(&args.stages)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;

    let body = load_model(&args.model)?;
    let (sequences, report) = load_keypoints(&args.data)?;
    if !report.rejected.is_empty() {
        eprintln!("rejected {} frames with missing joints:", report.rejected.len());
        for r in report.rejected.iter().take(10) {
            eprintln!("  {}@{}: {}", r.seq, r.frame, r.reason);
        }
    }
    if sequences.is_empty() {
        return Err(Error::Schema(format!("no usable sequences in {}", args.data.display())));
    }

    // Resume from the highest-stage checkpoint present.
    let mut params: Option<ModelParams> = None;
    let mut stages_done: u8 = 0;
    for stage in (1..=4u8).rev() {
        let path = ckpt_path(&args.out, stage);
        if path.exists() {
            let ck = load_checkpoint(&path)?;
            require_netcfg(&ck, &cfg.net)?;
            stages_done = ck.stages_done;
            params = Some(ck.params);
            break;
        }
    }
    let mut params = match params {
        Some(p) => p,
        None => init_params_seeded(cfg.seed, &cfg.net)?,
    };

    let manifest_path = args.out.join("manifest.json");
    let mut manifest = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("manifest.json: {e}")))?
    } else {
        RunManifest::new(&cfg, &args.data, &args.model, &args.out)
    };
    manifest.write(&manifest_path)?;

    let log_path = args.out.join("train_log.jsonl");
    let trainer = Trainer::new(&cfg, &body, threads);
    for &stage in &stages {
        let need: u8 = (1..stage).fold(0, |m, s| m | (1 << s));
        if stages_done & need != need {
            return Err(Error::StageOrder(format!(
                "stage {stage} requires completed stages 1..{} (found bitmask {stages_done:#06b}); \
                 run the earlier stages first",
                stage - 1
            )));
        }
        let logs = trainer.run_stage(stage, &sequences, &mut params)?;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        for l in &logs {
            let line = serde_json::to_string(l).map_err(|e| Error::Schema(format!("log: {e}")))?;
            writeln!(file, "{line}").map_err(|e| Error::io(log_path.display().to_string(), e))?;
        }
        stages_done |= 1 << stage;
        let ck = Checkpoint {
            params: params.clone(),
            net_cfg: cfg.net.clone(),
            config_echo: to_flat(&cfg),
            seed: cfg.seed,
            stages_done,
        };
        save_checkpoint(&ck, &ckpt_path(&args.out, stage))?;
        manifest.stages.push(StageRecord {
            stage,
            epochs: cfg.epochs[(stage - 1) as usize],
            final_epoch: logs.last().cloned(),
        });
        manifest.write(&manifest_path)?;
        eprintln!("stage {stage} complete ({} epochs)", cfg.epochs[(stage - 1) as usize]);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LiftSource {
    Teacher,
    Student,
    Fused,
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Input keypoints (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Output predictions (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = LiftSource::Fused)]
    pub source: LiftSource,
}

/// Per-window inference output, root-centered per frame.
struct WindowPrediction {
    teacher: Vec<f64>,
    student: Vec<f64>,
    betas: Vec<f64>,
    /// `[T, K*9]` rotations.
    rotations: Vec<f64>,
}

fn center_frames(joints: &mut [f64], t: usize, n: usize) {
    for f in 0..t {
        let base = f * n * 3;
        let mut root = [0.0; 3];
        for c in 0..3 {
            root[c] = 0.5
                * (joints[base + joint::L_HIP * 3 + c] + joints[base + joint::R_HIP * 3 + c]);
        }
        for j in 0..n {
            for c in 0..3 {
                joints[base + j * 3 + c] -= root[c];
            }
        }
    }
}

fn predict_windows(
    params: &ModelParams,
    cfg: &crate::networks::NetConfig,
    body: &BodyModel,
    windows: &[&[f64]],
    cam: &CameraConvention,
) -> Result<Vec<WindowPrediction>> {
    let t = cfg.t;
    let n = cfg.n;
    let k = NUM_BODY_JOINTS;
    let mut net = StepNet::new(
        params,
        cfg,
        crate::autodiff::Mode::Eval,
        Trainable::NONE,
        stream(0, "infer", &[]),
    );
    let x_in = net.g.constant(&[windows.len(), 2 * n, t], pack_x2d(windows, t, n));
    let feats = net.backbone(x_in)?;
    let offsets_id = net.teacher(feats)?;
    let (rots_id, betas_id) = net.student(feats)?;
    let offsets = net.g.values(offsets_id).to_vec();
    let rots = net.g.values(rots_id).to_vec();
    let betas = net.g.values(betas_id).to_vec();

    let regressor: Vec<f64> = if params.contains("sja.logits") {
        let arr = params.get("sja.logits")?;
        sja_weights(&SJAParams {
            logits: arr.data.clone(),
            joints: body.lbs.k,
            vertices: body.lbs.v,
        })
    } else {
        body.lbs.regressor.clone()
    };
    let affine: Option<(Vec<f64>, Vec<f64>)> = if params.contains("sja.lin_a") {
        Some((params.get("sja.lin_a")?.data.clone(), params.get("sja.lin_b")?.data.clone()))
    } else {
        None
    };

    let mut out = Vec::with_capacity(windows.len());
    for (i, win) in windows.iter().enumerate() {
        // teacher 3D: lift with predicted offsets, then root-center
        let mut teacher = vec![0.0; t * n * 3];
        for f in 0..t {
            for j in 0..n {
                let idx = f * n + j;
                let z = (cam.distance + offsets[(i * t + f) * n + j]).max(cam.depth_floor);
                teacher[idx * 3] = win[idx * 2] * z;
                teacher[idx * 3 + 1] = win[idx * 2 + 1] * z;
                teacher[idx * 3 + 2] = z;
            }
        }
        center_frames(&mut teacher, t, n);

        // student 3D: forward kinematics per frame and mapped regression
        let betas_i = &betas[i * 10..(i + 1) * 10];
        let mut student = vec![0.0; t * n * 3];
        let mut rotations = vec![0.0; t * k * 9];
        for f in 0..t {
            let r = &rots[((i * t + f) * k) * 9..((i * t + f + 1) * k) * 9];
            rotations[f * k * 9..(f + 1) * k * 9].copy_from_slice(r);
            let (verts, _) = crate::autodiff::lbs_forward_kernel(&body.lbs, betas_i, r);
            let mut joints24 = regress_joints(&regressor, body.lbs.k, body.lbs.v, &verts);
            if let Some((a, b)) = &affine {
                joints24 = linear_sja(&joints24, a, b);
            }
            for (j, &m) in body.joint_map.iter().enumerate() {
                for c in 0..3 {
                    student[(f * n + j) * 3 + c] = joints24[m * 3 + c];
                }
            }
        }
        center_frames(&mut student, t, n);

        out.push(WindowPrediction { teacher, student, betas: betas_i.to_vec(), rotations });
    }
    Ok(out)
}

pub fn cmd_lift(args: &LiftArgs, _threads: usize) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let body = load_model(&args.model)?;
    let (sequences, report) = load_keypoints(&args.data)?;
    if !report.rejected.is_empty() {
        eprintln!("note: {} frames rejected for missing joints", report.rejected.len());
    }
    let cfg = ck.net_cfg.clone();
    let cam = CameraConvention::default();
    let skel = SkeletonSpec::canonical();
    let t = cfg.t;
    let n = cfg.n;
    let k = NUM_BODY_JOINTS;
    let half = (t - 1) / 2;

    let file = std::fs::File::create(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);

    for seq in &sequences {
        let len = seq.len();
        if len == 0 {
            continue;
        }
        // Per-frame accumulators over covering windows.
        let mut teach_sum = vec![0.0; len * n * 3];
        let mut stud_sum = vec![0.0; len * n * 3];
        let mut counts = vec![0usize; len];
        let mut beta_sum = vec![0.0; 10];
        let mut beta_count = 0usize;
        // rotation per frame comes from the window centered on it
        let mut rot_per_frame = vec![0.0; len * k * 9];

        if len >= t {
            let starts: Vec<usize> = (0..=len - t).collect();
            for chunk in starts.chunks(32) {
                let wins: Vec<Vec<f64>> = chunk
                    .iter()
                    .map(|&s| {
                        let raw = seq.window2d(s, t);
                        let ids: Vec<i64> =
                            (0..t as i64).map(|x| seq.start_frame + s as i64 + x).collect();
                        normalize_window(&raw, &ids, &skel, &cam).map(|w| w.joints)
                    })
                    .collect::<Result<_>>()?;
                let refs: Vec<&[f64]> = wins.iter().map(|x| x.as_slice()).collect();
                let preds = predict_windows(&ck.params, &cfg, &body, &refs, &cam)?;
                for (ci, &s) in chunk.iter().enumerate() {
                    let p = &preds[ci];
                    for f in 0..t {
                        let frame = s + f;
                        for i in 0..n * 3 {
                            teach_sum[frame * n * 3 + i] += p.teacher[f * n * 3 + i];
                            stud_sum[frame * n * 3 + i] += p.student[f * n * 3 + i];
                        }
                        counts[frame] += 1;
                    }
                    for (bs, &b) in beta_sum.iter_mut().zip(&p.betas) {
                        *bs += b;
                    }
                    beta_count += 1;
                    // frames whose centered window is this one
                    for f in 0..len {
                        let centered = f.saturating_sub(half).min(len - t);
                        if centered == s {
                            let inwin = f - s;
                            rot_per_frame[f * k * 9..(f + 1) * k * 9]
                                .copy_from_slice(&p.rotations[inwin * k * 9..(inwin + 1) * k * 9]);
                        }
                    }
                }
            }
        } else {
            // Short sequences: per-frame replication.
            for f in 0..len {
                let rep = replicate_single_frame(
                    &seq.frames[f].joints2d,
                    t,
                    seq.start_frame + f as i64,
                );
                let norm = normalize_window(&rep.joints, &rep.frame_ids, &skel, &cam)?;
                let preds = predict_windows(&ck.params, &cfg, &body, &[&norm.joints], &cam)?;
                let p = &preds[0];
                for i in 0..n * 3 {
                    teach_sum[f * n * 3 + i] += p.teacher[half * n * 3 + i];
                    stud_sum[f * n * 3 + i] += p.student[half * n * 3 + i];
                }
                counts[f] += 1;
                for (bs, &b) in beta_sum.iter_mut().zip(&p.betas) {
                    *bs += b;
                }
                beta_count += 1;
                rot_per_frame[f * k * 9..(f + 1) * k * 9]
                    .copy_from_slice(&p.rotations[half * k * 9..(half + 1) * k * 9]);
            }
        }

        let betas_avg: Vec<f64> =
            beta_sum.iter().map(|b| b / beta_count.max(1) as f64).collect();
        for f in 0..len {
            if counts[f] == 0 {
                continue;
            }
            let cnt = counts[f] as f64;
            let teacher: Vec<f64> =
                teach_sum[f * n * 3..(f + 1) * n * 3].iter().map(|v| v / cnt).collect();
            let student: Vec<f64> =
                stud_sum[f * n * 3..(f + 1) * n * 3].iter().map(|v| v / cnt).collect();
            let chosen = match args.source {
                LiftSource::Teacher => teacher,
                LiftSource::Student => student,
                LiftSource::Fused => fuse_predictions(&teacher, &student)?,
            };
            let rec = JsonFrame {
                seq: seq.id.clone(),
                frame: seq.start_frame + f as i64,
                joints: (0..n)
                    .map(|j| [seq.frames[f].joints2d[j * 2], seq.frames[f].joints2d[j * 2 + 1]])
                    .collect(),
                joints3d: Some(
                    (0..n).map(|j| [chosen[j * 3], chosen[j * 3 + 1], chosen[j * 3 + 2]]).collect(),
                ),
                vis: None,
                betas: if args.source == LiftSource::Teacher {
                    None
                } else {
                    Some(betas_avg.clone())
                },
                rotations: if args.source == LiftSource::Teacher {
                    None
                } else {
                    Some(
                        (0..k)
                            .map(|j| rot_per_frame[(f * k + j) * 9..(f * k + j + 1) * 9].to_vec())
                            .collect(),
                    )
                },
            };
            serde_json::to_writer(&mut w, &rec)
                .map_err(|e| Error::Schema(format!("serialize: {e}")))?;
            w.write_all(b"\n").map_err(|e| Error::io(args.out.display().to_string(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(args.out.display().to_string(), e))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Output report (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

fn sequences_3d(
    seqs: &[KeypointSequence],
    what: &str,
) -> Result<BTreeMap<(String, i64), Vec<Vec<f64>>>> {
    let mut out = BTreeMap::new();
    for s in seqs {
        let mut frames = Vec::with_capacity(s.len());
        for (i, f) in s.frames.iter().enumerate() {
            let j3 = f.joints3d.as_ref().ok_or_else(|| {
                Error::Schema(format!(
                    "{what} sequence `{}` frame {} has no 3D joints",
                    s.id,
                    s.start_frame + i as i64
                ))
            })?;
            frames.push(j3.clone());
        }
        out.insert((s.id.clone(), s.start_frame), frames);
    }
    Ok(out)
}

pub fn cmd_eval(args: &EvalArgs, threads: usize) -> Result<EvalReport> {
    let (pred_seqs, _) = load_keypoints(&args.pred)?;
    let (gt_seqs, _) = load_keypoints(&args.gt)?;
    let pred = sequences_3d(&pred_seqs, "prediction")?;
    let gt = sequences_3d(&gt_seqs, "ground-truth")?;
    if pred.keys().collect::<Vec<_>>() != gt.keys().collect::<Vec<_>>() {
        let miss_gt: Vec<_> = pred.keys().filter(|k| !gt.contains_key(k)).collect();
        let miss_pred: Vec<_> = gt.keys().filter(|k| !pred.contains_key(k)).collect();
        return Err(Error::Schema(format!(
            "sequence keys differ: prediction-only {miss_gt:?}, ground-truth-only {miss_pred:?}"
        )));
    }
    let mut ids_seen: BTreeMap<String, usize> = BTreeMap::new();
    for (id, _) in gt.keys() {
        *ids_seen.entry(id.clone()).or_default() += 1;
    }
    let paired: Vec<(String, Vec<Vec<f64>>, Vec<Vec<f64>>)> = gt
        .iter()
        .map(|((id, start), g)| {
            let p = &pred[&(id.clone(), *start)];
            if p.len() != g.len() {
                return Err(Error::Schema(format!(
                    "sequence `{id}`@{start}: {} predicted frames vs {} ground truth",
                    p.len(),
                    g.len()
                )));
            }
            let key = if ids_seen[id] == 1 { id.clone() } else { format!("{id}@{start}") };
            Ok((key, p.clone(), g.clone()))
        })
        .collect::<Result<_>>()?;
    let skel = SkeletonSpec::canonical();
    let report = evaluate(&paired, DEFAULT_FPS, &skel, threads)?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Schema(format!("report: {e}")))?;
    std::fs::write(&args.out, text + "\n")
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportWhat {
    Sja,
    Params,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub what: ExportWhat,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_export(args: &ExportArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let mut c = Container::new();
    match args.what {
        ExportWhat::Sja => {
            let arr = ck.params.get("sja.logits").map_err(|_| {
                Error::Schema("checkpoint has no adaptation logits (run stage 3 first)".into())
            })?;
            let (k, v) = (arr.shape[0], arr.shape[1]);
            let weights =
                sja_weights(&SJAParams { logits: arr.data.clone(), joints: k, vertices: v });
            c.put_f64("sja_weights", &[k, v], weights);
        }
        ExportWhat::Params => {
            for (name, arr) in ck.params.iter() {
                c.put_f64(name, &arr.shape, arr.data.clone());
            }
        }
    }
    c.write(&args.out, EXPORT_MAGIC)
}
