//! Four-stage training: (1) teacher with reprojection self-supervision and
//! an adversarial critic, (2) distillation into the body-model student,
//! (3) joint-regressor adaptation, (4) end-to-end fine-tuning.
//!
//! Every random draw derives from the master seed plus (stage, epoch, batch)
//! indices, so stages can be run in one process or resumed from checkpoints
//! with bit-identical results.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, TensorId};
use crate::bodymodel::{sja_init, BodyModel, NUM_BODY_JOINTS};
use crate::data::{make_windows, KeypointSequence, WindowBatch};
use crate::error::{Error, Result};
use crate::geometry::{joint, sample_rotation, CameraConvention, SkeletonSpec};
use crate::losses;
use crate::losses::LossWeights;
use crate::networks::{pack_x2d, ModelParams, NetConfig, StepNet, Trainable};
use crate::rng::stream;

/// Joint-adaptation variant for stages 3 and 4: the convex learned
/// regressor, or the unconstrained affine map kept for the failure-mode
/// ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SjaMode {
    Convex,
    Linear,
}

/// Full training configuration (flat key/value form lives in the config
/// module).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    /// Windows per batch.
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Epochs per stage.
    pub epochs: [usize; 4],
    pub weights: LossWeights,
    pub seed: u64,
    /// Discriminator updates per generator update.
    pub disc_steps: usize,
    /// Adversarial terms on/off (config hook).
    pub adversarial: bool,
    /// Random reprojections sampled per window per step.
    pub rotations_per_window: usize,
    /// Window enumeration stride.
    pub stride: usize,
    /// Warm-start floor for the adaptation logits.
    pub sja_eps: f64,
    /// Adaptation variant trained in stage 3.
    pub sja_mode: SjaMode,
    /// Distill against dataset 3D ground truth instead of the frozen
    /// teacher (supervised sanity/ablation mode).
    pub distill_from_gt: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            batch_size: 64,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: [60, 30, 30, 30],
            weights: LossWeights::default(),
            seed: 0,
            disc_steps: 1,
            adversarial: true,
            rotations_per_window: 1,
            stride: 1,
            sja_eps: 1e-8,
            sja_mode: SjaMode::Convex,
            distill_from_gt: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.lr <= 0.0 || self.adam_eps <= 0.0 {
            return Err(Error::Config("learning rate and adam eps must be positive".into()));
        }
        if self.disc_steps == 0 || self.rotations_per_window == 0 || self.stride == 0 {
            return Err(Error::Config("disc_steps, rotations_per_window, stride must be >= 1".into()));
        }
        Ok(())
    }
}

// ── Adam ────────────────────────────────────────────────────────────

/// Bias-corrected Adam moments per parameter name.
#[derive(Debug, Default, Clone)]
pub struct AdamState {
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// One optimizer step over the given gradients. Deterministic; parameters
/// without gradients are untouched while the shared timestep advances.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2, eps, lr) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.lr);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    for (name, g) in grads {
        let arr = params.get_mut(name)?;
        if arr.data.len() != g.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("{name}: {} grads vs {} params", g.len(), arr.data.len()),
            });
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            arr.data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

// ── logging ─────────────────────────────────────────────────────────

/// One epoch record; serialized as a JSON line. `wall_ms` is zeroed in
/// single-thread (deterministic) mode so logs are bit-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub batches: usize,
    pub windows: usize,
    pub loss_mss: f64,
    pub loss_tc: f64,
    pub loss_bl: f64,
    pub loss_adv_teacher: f64,
    pub loss_adv_student: f64,
    pub loss_kd: f64,
    pub loss_rot: f64,
    pub loss_beta: f64,
    pub loss_disc: f64,
    pub disc_accuracy: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Default, Clone)]
struct Accum {
    mss: f64,
    tc: f64,
    bl: f64,
    adv_t: f64,
    adv_s: f64,
    kd: f64,
    rot: f64,
    beta: f64,
    disc: f64,
    disc_correct: usize,
    disc_total: usize,
    windows: usize,
    pairs: usize,
    batches: usize,
    disc_batches: usize,
}

impl Accum {
    fn into_log(self, stage: u8, epoch: usize, wall_ms: f64) -> EpochLog {
        let wn = self.windows.max(1) as f64;
        let pn = self.pairs.max(1) as f64;
        let dn = self.disc_batches.max(1) as f64;
        EpochLog {
            stage,
            epoch,
            batches: self.batches,
            windows: self.windows,
            loss_mss: self.mss / wn,
            loss_tc: self.tc / pn,
            loss_bl: self.bl / wn,
            loss_adv_teacher: self.adv_t / self.batches.max(1) as f64,
            loss_adv_student: self.adv_s / self.batches.max(1) as f64,
            loss_kd: self.kd / wn,
            loss_rot: self.rot / wn,
            loss_beta: self.beta / wn,
            loss_disc: self.disc / dn,
            disc_accuracy: if self.disc_total == 0 {
                0.0
            } else {
                self.disc_correct as f64 / self.disc_total as f64
            },
            wall_ms,
        }
    }
}

// ── trainer ─────────────────────────────────────────────────────────

pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub body: &'a BodyModel,
    pub skel: SkeletonSpec,
    pub cam: CameraConvention,
    /// Worker-thread cap; 1 means fully deterministic mode.
    pub threads: usize,
}

struct TeacherGen {
    feats: TensorId,
    lifts: Vec<TensorId>,
    projections: Vec<TensorId>,
    fakes: TensorId,
}

struct StudentGen {
    rots: TensorId,
    betas: TensorId,
    /// Per window: stacked `[T,K,3]` regressed joints.
    joint_stacks: Vec<TensorId>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, body: &'a BodyModel, threads: usize) -> Self {
        Trainer {
            cfg,
            body,
            skel: SkeletonSpec::canonical(),
            cam: CameraConvention::default(),
            threads,
        }
    }

    /// Run one stage over the dataset, mutating `params` in place.
    pub fn run_stage(
        &self,
        stage: u8,
        sequences: &[KeypointSequence],
        params: &mut ModelParams,
    ) -> Result<Vec<EpochLog>> {
        self.cfg.validate()?;
        if !(1..=4).contains(&stage) {
            return Err(Error::Usage(format!("stage {stage} out of range 1..=4")));
        }
        if stage >= 3 {
            match self.cfg.sja_mode {
                SjaMode::Convex => {
                    if !params.contains("sja.logits") {
                        let d = &self.body.lbs;
                        let sja = sja_init(&d.regressor, d.k, d.v, self.cfg.sja_eps);
                        params.insert("sja.logits", &[d.k, d.v], sja.logits);
                    }
                }
                SjaMode::Linear => {
                    if !params.contains("sja.lin_a") {
                        let n = NUM_BODY_JOINTS * 3;
                        let mut eye = vec![0.0; n * n];
                        for i in 0..n {
                            eye[i * n + i] = 1.0;
                        }
                        params.insert("sja.lin_a", &[n, n], eye);
                        params.insert("sja.lin_b", &[n], vec![0.0; n]);
                    }
                }
            }
        }
        let mut gen_state = AdamState::default();
        let mut disc_state = AdamState::default();
        let mut logs = Vec::new();
        for epoch in 0..self.cfg.epochs[(stage - 1) as usize] {
            let t0 = Instant::now();
            let mut acc = Accum::default();
            let mut epoch_rng = stream(self.cfg.seed, "epoch", &[stage as u64, epoch as u64]);
            let batches = make_windows(
                sequences,
                self.cfg.net.t,
                self.cfg.stride,
                &mut epoch_rng,
                self.cfg.batch_size,
                &self.skel,
                &self.cam,
            )?;
            for (bi, batch) in batches.iter().enumerate() {
                let ids = [stage as u64, epoch as u64, bi as u64];
                let mut step = || -> Result<()> {
                    match stage {
                        1 => self.teacher_step(batch, params, &mut gen_state, &mut disc_state, &ids, &mut acc),
                        2 | 3 => self.distill_step(stage, batch, params, &mut gen_state, &ids, &mut acc),
                        _ => self.finetune_step(batch, params, &mut gen_state, &mut disc_state, &ids, &mut acc),
                    }
                };
                step().map_err(|e| match e {
                    Error::Divergence(msg) => Error::Divergence(format!(
                        "stage {stage} epoch {epoch} batch {bi} (first window {}@{}): {msg}",
                        batch.windows[0].seq, batch.windows[0].start_frame
                    )),
                    other => other,
                })?;
                acc.batches += 1;
                acc.windows += batch.len();
                acc.pairs += batch.pairs.len();
            }
            let wall_ms =
                if self.threads <= 1 { 0.0 } else { t0.elapsed().as_secs_f64() * 1000.0 };
            logs.push(acc.into_log(stage, epoch, wall_ms));
        }
        Ok(logs)
    }

    fn check_finite(&self, value: f64, what: &str) -> Result<f64> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::Divergence(format!("{what} is {value}")))
        }
    }

    /// Teacher paths for every window: lift, rotate, project, packed fakes.
    fn build_teacher_gen(
        &self,
        net: &mut StepNet,
        batch: &WindowBatch,
        qs: &[[f64; 9]],
    ) -> Result<TeacherGen> {
        let t = self.cfg.net.t;
        let n = self.cfg.net.n;
        let refs: Vec<&[f64]> = batch.windows.iter().map(|w| w.x.as_slice()).collect();
        let x_in = net.g.constant(&[batch.len(), 2 * n, t], pack_x2d(&refs, t, n));
        let feats = net.backbone(x_in)?;
        let offsets = net.teacher(feats)?; // [B,T,N]
        let mut lifts = Vec::with_capacity(batch.len());
        let mut projections = Vec::with_capacity(batch.len());
        for (i, w) in batch.windows.iter().enumerate() {
            let x2d = net.g.constant(&[t, n, 2], w.x.clone());
            let off = net.g.select0(offsets, i)?;
            let lifted = net.g.lift(x2d, off, self.cam.distance, self.cam.depth_floor)?;
            let rotated = net.g.rotate_place(
                lifted,
                &qs[i],
                joint::L_HIP,
                joint::R_HIP,
                self.cam.placement(),
            )?;
            let proj = net.g.project(rotated)?;
            lifts.push(lifted);
            projections.push(proj);
        }
        let fakes = net.g.pack_windows(&projections)?;
        Ok(TeacherGen { feats, lifts, projections, fakes })
    }

    /// Rotated-and-placed skeletons for the self-supervision target.
    fn rotated_targets(
        &self,
        net: &mut StepNet,
        gen: &TeacherGen,
        qs: &[[f64; 9]],
    ) -> Result<Vec<TensorId>> {
        let mut out = Vec::with_capacity(gen.lifts.len());
        for (i, &lift) in gen.lifts.iter().enumerate() {
            out.push(net.g.rotate_place(
                lift,
                &qs[i],
                joint::L_HIP,
                joint::R_HIP,
                self.cam.placement(),
            )?);
        }
        Ok(out)
    }

    /// Relift the reprojected windows through the same teacher.
    fn relift(&self, net: &mut StepNet, gen: &TeacherGen) -> Result<Vec<TensorId>> {
        let x2 = net.g.pack_windows(&gen.projections)?;
        let feats = net.backbone(x2)?;
        let offsets = net.teacher(feats)?;
        let mut out = Vec::with_capacity(gen.projections.len());
        for (i, &proj) in gen.projections.iter().enumerate() {
            let off = net.g.select0(offsets, i)?;
            out.push(net.g.lift(proj, off, self.cam.distance, self.cam.depth_floor)?);
        }
        Ok(out)
    }

    /// Regressor tensor (and optional affine adaptation) for the student,
    /// chosen by which adaptation parameters exist.
    fn sja_paths(&self, net: &mut StepNet, stage: u8) -> Result<(TensorId, Option<(TensorId, TensorId)>)> {
        let d = &self.body.lbs;
        if stage >= 3 && self.cfg.sja_mode == SjaMode::Convex {
            let logits = net.p("sja.logits")?;
            Ok((net.g.softmax_rows(logits)?, None))
        } else if stage >= 3 {
            let w = net.g.constant(&[d.k, d.v], d.regressor.clone());
            let a = net.p("sja.lin_a")?;
            let b = net.p("sja.lin_b")?;
            Ok((w, Some((a, b))))
        } else {
            Ok((net.g.constant(&[d.k, d.v], d.regressor.clone()), None))
        }
    }

    /// Student paths: rotations, betas, and per-window regressed joints via
    /// the supplied `[K,V]` regressor tensor plus an optional affine
    /// adaptation of the vectorized joints.
    fn build_student_gen(
        &self,
        net: &mut StepNet,
        feats: TensorId,
        batch: &WindowBatch,
        regressor: TensorId,
        affine: Option<(TensorId, TensorId)>,
    ) -> Result<StudentGen> {
        let t = self.cfg.net.t;
        let k = NUM_BODY_JOINTS;
        let (rots, betas) = net.student(feats)?;
        let rots_flat = net.g.reshape(rots, &[batch.len() * t, k, 3, 3])?;
        let mut joint_stacks = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let betas_i = net.g.select0(betas, i)?;
            let mut frames = Vec::with_capacity(t);
            for f in 0..t {
                let r = net.g.select0(rots_flat, i * t + f)?;
                let (verts, _joints) = net.g.lbs(betas_i, r, Arc::clone(&self.body.lbs))?;
                let mut regressed = net.g.matmul(regressor, verts)?; // [K,3]
                if let Some((a, b)) = affine {
                    let flat = net.g.reshape(regressed, &[1, k * 3])?;
                    let adapted = net.g.linear(flat, a, b)?;
                    regressed = net.g.reshape(adapted, &[k, 3])?;
                }
                frames.push(regressed);
            }
            joint_stacks.push(net.g.stack0(&frames)?);
        }
        Ok(StudentGen { rots, betas, joint_stacks })
    }

    /// Reproject centered student joints through the same random rotations.
    fn student_fakes(
        &self,
        net: &mut StepNet,
        gen: &StudentGen,
        qs: &[[f64; 9]],
    ) -> Result<TensorId> {
        let map = self.body.joint_map.clone();
        let mut projs = Vec::with_capacity(gen.joint_stacks.len());
        for (i, &stack) in gen.joint_stacks.iter().enumerate() {
            let mapped = net.g.index_select(stack, 1, &map)?; // [T,N,3]
            let placed = net.g.rotate_place(
                mapped,
                &qs[i],
                joint::L_HIP,
                joint::R_HIP,
                self.cam.placement(),
            )?;
            projs.push(net.g.project(placed)?);
        }
        net.g.pack_windows(&projs)
    }

    /// Discriminator update on real windows vs detached fakes. Returns the
    /// discriminator loss and (correct, total) classification counts.
    fn disc_update(
        &self,
        params: &mut ModelParams,
        disc_state: &mut AdamState,
        real: &WindowBatch,
        fake_values: &[f64],
        fake_count: usize,
        rng: rand_chacha::ChaCha8Rng,
    ) -> Result<(f64, usize, usize)> {
        let t = self.cfg.net.t;
        let n = self.cfg.net.n;
        let trainable = Trainable { disc: true, ..Trainable::NONE };
        let mut net = StepNet::new(params, &self.cfg.net, Mode::Train, trainable, rng);
        let refs: Vec<&[f64]> = real.windows.iter().map(|w| w.x.as_slice()).collect();
        let real_in = net.g.constant(&[real.len(), 2 * n, t], pack_x2d(&refs, t, n));
        let fake_in = net.g.constant(&[fake_count, 2 * n, t], fake_values.to_vec());
        let real_logits = net.discriminator(real_in)?;
        let fake_logits = net.discriminator(fake_in)?;
        let loss = losses::loss_adv_disc(&mut net.g, real_logits, fake_logits)?;
        let loss_v = self.check_finite(net.g.value_scalar(loss), "discriminator loss")?;
        let correct = net.g.values(real_logits).iter().filter(|&&l| l > 0.0).count()
            + net.g.values(fake_logits).iter().filter(|&&l| l < 0.0).count();
        let total = real.len() + fake_count;
        net.g.backward(loss)?;
        let grads = net.param_grads();
        debug_assert!(grads.keys().all(|k| k.starts_with("d.")));
        adam_step(params, &grads, disc_state, self.cfg)?;
        Ok((loss_v, correct, total))
    }

    fn teacher_step(
        &self,
        batch: &WindowBatch,
        params: &mut ModelParams,
        gen_state: &mut AdamState,
        disc_state: &mut AdamState,
        ids: &[u64; 3],
        acc: &mut Accum,
    ) -> Result<()> {
        let mut q_rng = stream(self.cfg.seed, "rotations", ids);
        let qs: Vec<[f64; 9]> =
            batch.windows.iter().map(|_| sample_rotation(&mut q_rng, &self.cam)).collect();
        let trainable = Trainable { backbone: true, teacher: true, ..Trainable::NONE };

        // Discriminator update(s) on detached reprojections.
        if self.cfg.adversarial {
            for d in 0..self.cfg.disc_steps {
                let mut net1 = StepNet::new(
                    params,
                    &self.cfg.net,
                    Mode::Train,
                    trainable,
                    stream(self.cfg.seed, "drop-fake", &[ids[0], ids[1], ids[2], d as u64]),
                );
                let gen = self.build_teacher_gen(&mut net1, batch, &qs)?;
                let fake_values = net1.g.values(gen.fakes).to_vec();
                let updates = std::mem::take(&mut net1.bn_updates);
                drop(net1);
                apply_bn_updates(params, updates)?;
                let (dl, c, tot) = self.disc_update(
                    params,
                    disc_state,
                    batch,
                    &fake_values,
                    batch.len(),
                    stream(self.cfg.seed, "drop-disc", &[ids[0], ids[1], ids[2], d as u64]),
                )?;
                acc.disc += dl;
                acc.disc_correct += c;
                acc.disc_total += tot;
                acc.disc_batches += 1;
            }
        }

        // Generator update.
        let mut net = StepNet::new(
            params,
            &self.cfg.net,
            Mode::Train,
            trainable,
            stream(self.cfg.seed, "drop-gen", ids),
        );
        let gen = self.build_teacher_gen(&mut net, batch, &qs)?;
        let rotated = self.rotated_targets(&mut net, &gen, &qs)?;
        let relifted = self.relift(&mut net, &gen)?;

        let mut mss_terms = Vec::with_capacity(batch.len());
        let mut bl_terms = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            mss_terms.push(losses::loss_mss(&mut net.g, rotated[i], relifted[i])?);
            bl_terms.push(losses::loss_bl(&mut net.g, gen.lifts[i], &self.skel.edges)?);
        }
        let mut tc_terms = Vec::with_capacity(batch.pairs.len());
        for &(a, b) in &batch.pairs {
            tc_terms.push(losses::loss_tc(&mut net.g, gen.lifts[a], gen.lifts[b])?);
        }

        let b_inv = 1.0 / batch.len() as f64;
        let mss_sum = sum_terms(&mut net, &mss_terms)?;
        let mss = net.g.scale(mss_sum, b_inv);
        let bl_sum = sum_terms(&mut net, &bl_terms)?;
        let bl = net.g.scale(bl_sum, b_inv);
        let tc = if tc_terms.is_empty() {
            net.g.scalar(0.0)
        } else {
            let s = sum_terms(&mut net, &tc_terms)?;
            net.g.scale(s, 1.0 / tc_terms.len() as f64)
        };
        let adv = if self.cfg.adversarial {
            let logits = net.discriminator(gen.fakes)?;
            Some(losses::loss_adv_gen(&mut net.g, logits)?)
        } else {
            None
        };
        let total = losses::teacher_total(&mut net.g, &self.cfg.weights, mss, tc, bl, adv)?;
        self.check_finite(net.g.value_scalar(total), "teacher loss")?;

        acc.mss += net.g.value_scalar(mss) * batch.len() as f64;
        acc.tc += net.g.value_scalar(tc) * batch.pairs.len().max(1) as f64;
        acc.bl += net.g.value_scalar(bl) * batch.len() as f64;
        if let Some(a) = adv {
            acc.adv_t += net.g.value_scalar(a);
        }

        net.g.backward(total)?;
        let grads = net.param_grads();
        debug_assert!(grads.keys().all(|k| !k.starts_with("d.")));
        let updates = std::mem::take(&mut net.bn_updates);
        drop(net);
        adam_step(params, &grads, gen_state, self.cfg)?;
        apply_bn_updates(params, updates)?;
        Ok(())
    }

    fn distill_step(
        &self,
        stage: u8,
        batch: &WindowBatch,
        params: &mut ModelParams,
        gen_state: &mut AdamState,
        ids: &[u64; 3],
        acc: &mut Accum,
    ) -> Result<()> {
        let trainable = Trainable {
            student: true,
            sja: stage == 3,
            ..Trainable::NONE
        };
        let mut net = StepNet::new(
            params,
            &self.cfg.net,
            Mode::Train,
            trainable,
            stream(self.cfg.seed, "drop-gen", ids),
        );
        let t = self.cfg.net.t;
        let n = self.cfg.net.n;
        let refs: Vec<&[f64]> = batch.windows.iter().map(|w| w.x.as_slice()).collect();
        let x_in = net.g.constant(&[batch.len(), 2 * n, t], pack_x2d(&refs, t, n));
        let feats = net.backbone(x_in)?;
        let offsets = net.teacher(feats)?;

        let (regressor, affine) = self.sja_paths(&mut net, stage)?;
        let stud = self.build_student_gen(&mut net, feats, batch, regressor, affine)?;

        let mut kd_terms = Vec::with_capacity(batch.len());
        for (i, w) in batch.windows.iter().enumerate() {
            let teacher3d = if self.cfg.distill_from_gt {
                let gt = w.gt3d.as_ref().ok_or_else(|| {
                    Error::Contract("distill_from_gt requires dataset 3D ground truth".into())
                })?;
                net.g.constant(&[t, n, 3], gt.clone())
            } else {
                let x2d = net.g.constant(&[t, n, 2], w.x.clone());
                let off = net.g.select0(offsets, i)?;
                net.g.lift(x2d, off, self.cam.distance, self.cam.depth_floor)?
            };
            kd_terms.push(losses::loss_kd(
                &mut net.g,
                teacher3d,
                stud.joint_stacks[i],
                &self.body.joint_map,
            )?);
        }
        let b_inv = 1.0 / batch.len() as f64;
        let kd_sum = sum_terms(&mut net, &kd_terms)?;
        let kd = net.g.scale(kd_sum, b_inv);
        let rot_all = losses::loss_rot_reg(&mut net.g, stud.rots)?;
        let rot = net.g.scale(rot_all, b_inv);
        let beta_all = losses::loss_beta(&mut net.g, stud.betas);
        let beta = net.g.scale(beta_all, b_inv);
        let total = losses::student_total(&mut net.g, &self.cfg.weights, kd, rot, beta)?;
        self.check_finite(net.g.value_scalar(total), "student loss")?;

        acc.kd += net.g.value_scalar(kd) * batch.len() as f64;
        acc.rot += net.g.value_scalar(rot) * batch.len() as f64;
        acc.beta += net.g.value_scalar(beta) * batch.len() as f64;

        net.g.backward(total)?;
        let grads = net.param_grads();
        debug_assert!(grads.keys().all(|k| k.starts_with("s.") || k.starts_with("sja.")));
        let updates = std::mem::take(&mut net.bn_updates);
        drop(net);
        adam_step(params, &grads, gen_state, self.cfg)?;
        apply_bn_updates(params, updates)?;
        Ok(())
    }

    fn finetune_step(
        &self,
        batch: &WindowBatch,
        params: &mut ModelParams,
        gen_state: &mut AdamState,
        disc_state: &mut AdamState,
        ids: &[u64; 3],
        acc: &mut Accum,
    ) -> Result<()> {
        let mut q_rng = stream(self.cfg.seed, "rotations", ids);
        let qs: Vec<[f64; 9]> =
            batch.windows.iter().map(|_| sample_rotation(&mut q_rng, &self.cam)).collect();
        let trainable = Trainable {
            backbone: true,
            teacher: true,
            student: true,
            sja: true,
            disc: false,
        };

        // Discriminator sees real windows plus both fake families.
        if self.cfg.adversarial {
            for d in 0..self.cfg.disc_steps {
                let mut net1 = StepNet::new(
                    params,
                    &self.cfg.net,
                    Mode::Train,
                    trainable,
                    stream(self.cfg.seed, "drop-fake", &[ids[0], ids[1], ids[2], d as u64]),
                );
                let gen = self.build_teacher_gen(&mut net1, batch, &qs)?;
                let (regressor, affine) = self.sja_paths(&mut net1, 4)?;
                let stud = self.build_student_gen(&mut net1, gen.feats, batch, regressor, affine)?;
                let s_fakes = self.student_fakes(&mut net1, &stud, &qs)?;
                let mut fake_values = net1.g.values(gen.fakes).to_vec();
                fake_values.extend_from_slice(net1.g.values(s_fakes));
                let updates = std::mem::take(&mut net1.bn_updates);
                drop(net1);
                apply_bn_updates(params, updates)?;
                let (dl, c, tot) = self.disc_update(
                    params,
                    disc_state,
                    batch,
                    &fake_values,
                    batch.len() * 2,
                    stream(self.cfg.seed, "drop-disc", &[ids[0], ids[1], ids[2], d as u64]),
                )?;
                acc.disc += dl;
                acc.disc_correct += c;
                acc.disc_total += tot;
                acc.disc_batches += 1;
            }
        }

        // Joint generator update.
        let mut net = StepNet::new(
            params,
            &self.cfg.net,
            Mode::Train,
            trainable,
            stream(self.cfg.seed, "drop-gen", ids),
        );
        let gen = self.build_teacher_gen(&mut net, batch, &qs)?;
        let rotated = self.rotated_targets(&mut net, &gen, &qs)?;
        let relifted = self.relift(&mut net, &gen)?;
        let (regressor, affine) = self.sja_paths(&mut net, 4)?;
        let stud = self.build_student_gen(&mut net, gen.feats, batch, regressor, affine)?;

        let mut mss_terms = Vec::new();
        let mut bl_terms = Vec::new();
        let mut kd_terms = Vec::new();
        for i in 0..batch.len() {
            mss_terms.push(losses::loss_mss(&mut net.g, rotated[i], relifted[i])?);
            bl_terms.push(losses::loss_bl(&mut net.g, gen.lifts[i], &self.skel.edges)?);
            kd_terms.push(losses::loss_kd(
                &mut net.g,
                gen.lifts[i],
                stud.joint_stacks[i],
                &self.body.joint_map,
            )?);
        }
        let mut tc_terms = Vec::new();
        for &(a, b) in &batch.pairs {
            tc_terms.push(losses::loss_tc(&mut net.g, gen.lifts[a], gen.lifts[b])?);
        }

        let b_inv = 1.0 / batch.len() as f64;
        let mss_sum = sum_terms(&mut net, &mss_terms)?;
        let mss = net.g.scale(mss_sum, b_inv);
        let bl_sum = sum_terms(&mut net, &bl_terms)?;
        let bl = net.g.scale(bl_sum, b_inv);
        let kd_sum = sum_terms(&mut net, &kd_terms)?;
        let kd = net.g.scale(kd_sum, b_inv);
        let tc = if tc_terms.is_empty() {
            net.g.scalar(0.0)
        } else {
            let s = sum_terms(&mut net, &tc_terms)?;
            net.g.scale(s, 1.0 / tc_terms.len() as f64)
        };
        let rot_all = losses::loss_rot_reg(&mut net.g, stud.rots)?;
        let rot = net.g.scale(rot_all, b_inv);
        let beta_all = losses::loss_beta(&mut net.g, stud.betas);
        let beta = net.g.scale(beta_all, b_inv);

        let (adv_t, adv_s) = if self.cfg.adversarial {
            let t_logits = net.discriminator(gen.fakes)?;
            let s_fakes = self.student_fakes(&mut net, &stud, &qs)?;
            let s_logits = net.discriminator(s_fakes)?;
            (
                Some(losses::loss_adv_gen(&mut net.g, t_logits)?),
                Some(losses::loss_adv_gen(&mut net.g, s_logits)?),
            )
        } else {
            (None, None)
        };

        let teacher = losses::teacher_total(&mut net.g, &self.cfg.weights, mss, tc, bl, adv_t)?;
        let student = losses::student_total(&mut net.g, &self.cfg.weights, kd, rot, beta)?;
        let total = losses::finetune_total(&mut net.g, &self.cfg.weights, teacher, student, adv_s)?;
        self.check_finite(net.g.value_scalar(total), "fine-tune loss")?;

        acc.mss += net.g.value_scalar(mss) * batch.len() as f64;
        acc.tc += net.g.value_scalar(tc) * batch.pairs.len().max(1) as f64;
        acc.bl += net.g.value_scalar(bl) * batch.len() as f64;
        acc.kd += net.g.value_scalar(kd) * batch.len() as f64;
        acc.rot += net.g.value_scalar(rot) * batch.len() as f64;
        acc.beta += net.g.value_scalar(beta) * batch.len() as f64;
        if let Some(a) = adv_t {
            acc.adv_t += net.g.value_scalar(a);
        }
        if let Some(a) = adv_s {
            acc.adv_s += net.g.value_scalar(a);
        }

        net.g.backward(total)?;
        let grads = net.param_grads();
        debug_assert!(grads.keys().all(|k| !k.starts_with("d.")));
        let updates = std::mem::take(&mut net.bn_updates);
        drop(net);
        adam_step(params, &grads, gen_state, self.cfg)?;
        apply_bn_updates(params, updates)?;
        Ok(())
    }
}

fn sum_terms(net: &mut StepNet, terms: &[TensorId]) -> Result<TensorId> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = net.g.add(total, t)?;
    }
    Ok(total)
}

fn apply_bn_updates(
    params: &mut ModelParams,
    updates: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
) -> Result<()> {
    for (prefix, (m, v)) in updates {
        params.get_mut(&format!("{prefix}.running_mean"))?.data = m;
        params.get_mut(&format!("{prefix}.running_var"))?.data = v;
    }
    Ok(())
}

/// Evaluate the stage-1 geometry chain with a ground-truth depth oracle in
/// place of the teacher: lift with offsets `z_gt - c`, rotate, reproject,
/// and relift the reprojection with its own exact depths. Returns per-window
/// mean `(mss, tc, bl)`.
pub fn teacher_oracle_losses(
    batch: &WindowBatch,
    skel: &SkeletonSpec,
    cam: &CameraConvention,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    use crate::autodiff::Graph;
    let mut g = Graph::new();
    let t = batch.windows[0].x.len() / (crate::geometry::NUM_JOINTS * 2);
    let n = crate::geometry::NUM_JOINTS;
    let mut lifts = Vec::with_capacity(batch.len());
    let mut mss_sum = 0.0;
    for w in &batch.windows {
        let gt = w
            .gt3d
            .as_ref()
            .ok_or_else(|| Error::Contract("oracle losses need ground-truth 3D".into()))?;
        let x2d = g.constant(&[t, n, 2], w.x.clone());
        let offsets: Vec<f64> = (0..t * n).map(|i| gt[i * 3 + 2] - cam.distance).collect();
        let off = g.constant(&[t, n], offsets);
        let lifted = g.lift(x2d, off, cam.distance, cam.depth_floor)?;
        let q = sample_rotation(rng, cam);
        let rotated = g.rotate_place(lifted, &q, joint::L_HIP, joint::R_HIP, cam.placement())?;
        let proj = g.project(rotated)?;
        // oracle relift: exact depths of the rotated skeleton
        let depths: Vec<f64> =
            g.values(rotated).chunks(3).map(|p| p[2] - cam.distance).collect();
        let off2 = g.constant(&[t, n], depths);
        let relift = g.lift(proj, off2, cam.distance, cam.depth_floor)?;
        let mss = losses::loss_mss(&mut g, rotated, relift)?;
        mss_sum += g.value_scalar(mss);
        lifts.push(lifted);
    }
    let mut tc_sum = 0.0;
    for &(a, b) in &batch.pairs {
        let tc = losses::loss_tc(&mut g, lifts[a], lifts[b])?;
        tc_sum += g.value_scalar(tc);
    }
    let mut bl_sum = 0.0;
    for &l in &lifts {
        let bl = losses::loss_bl(&mut g, l, &skel.edges)?;
        bl_sum += g.value_scalar(bl);
    }
    let wn = batch.len() as f64;
    let pn = batch.pairs.len().max(1) as f64;
    Ok((mss_sum / wn, tc_sum / pn, bl_sum / wn))
}

#[cfg(test)]
mod tests;
