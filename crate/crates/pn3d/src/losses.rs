//! Training objectives, each built on the graph as a differentiable scalar.
//!
//! Window-level losses sum over joints and frames; batch aggregation (mean
//! over windows) happens in the trainer so the loss weights keep their
//! meaning regardless of batch size.

use crate::autodiff::{Graph, Reduce, TensorId};
use crate::error::Result;
use crate::geometry::joint;

/// Loss weights. Defaults follow the published recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub mss: f64,
    pub tc: f64,
    pub bl: f64,
    pub rot: f64,
    pub beta: f64,
    pub student: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mss: 2.0, tc: 1.0, bl: 2.0, rot: 30.0, beta: 10.0, student: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mss", self.mss),
            ("tc", self.tc),
            ("bl", self.bl),
            ("rot", self.rot),
            ("beta", self.beta),
            ("student", self.student),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(crate::Error::Config(format!("loss weight {name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Reprojection self-supervision: squared distance between the rotated
/// skeletons and their relift, summed over joints and frames.
pub fn loss_mss(g: &mut Graph, y: TensorId, y_tilde: TensorId) -> Result<TensorId> {
    let d = g.sub(y, y_tilde)?;
    Ok(g.sum_squares(d))
}

/// Overlap consistency between stride-1 windows: frames `1..T` of the first
/// window against frames `0..T-1` of its successor.
pub fn loss_tc(g: &mut Graph, x_t: TensorId, x_t1: TensorId) -> Result<TensorId> {
    let t = g.shape(x_t)[0];
    let a = g.slice0(x_t, 1, t - 1)?;
    let b = g.slice0(x_t1, 0, t - 1)?;
    let d = g.sub(a, b)?;
    Ok(g.sum_squares(d))
}

/// Sum over bones of the population variance of bone length across frames.
pub fn loss_bl(g: &mut Graph, x: TensorId, edges: &[(usize, usize)]) -> Result<TensorId> {
    let ms: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let ns: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let a = g.index_select(x, 1, &ms)?;
    let b = g.index_select(x, 1, &ns)?;
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let len_sq = g.reduce(sq, Reduce::Sum, Some(2))?; // [T,E]
    let lengths = g.sqrt(len_sq);
    let var = g.reduce(lengths, Reduce::Var, Some(0))?; // [E]
    Ok(g.sum_all(var))
}

/// Discriminator objective: numerically stable binary cross-entropy on
/// logits, reals toward 1 and fakes toward 0, each side averaged over its
/// own batch.
pub fn loss_adv_disc(g: &mut Graph, real_logits: TensorId, fake_logits: TensorId) -> Result<TensorId> {
    let neg_real = g.scale(real_logits, -1.0);
    let sp_real = g.softplus(neg_real);
    let real_term = g.mean_all(sp_real);
    let sp_fake = g.softplus(fake_logits);
    let fake_term = g.mean_all(sp_fake);
    g.add(real_term, fake_term)
}

/// Non-saturating generator objective: push fakes toward the real label.
pub fn loss_adv_gen(g: &mut Graph, fake_logits: TensorId) -> Result<TensorId> {
    let neg = g.scale(fake_logits, -1.0);
    let sp = g.softplus(neg);
    Ok(g.mean_all(sp))
}

/// Root-center a `[T,M,3]` joint tensor on its hip midpoint per frame.
pub fn center_on_root(g: &mut Graph, x: TensorId) -> Result<TensorId> {
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    g.rotate_place(x, &eye, joint::L_HIP, joint::R_HIP, [0.0, 0.0, 0.0])
}

/// Distillation: squared distance between the teacher's 3D joints and the
/// mapped body-model joints, both root-centered on their hip midpoints.
/// `teacher: [T,N,3]`, `student_joints: [T,K,3]`.
pub fn loss_kd(
    g: &mut Graph,
    teacher: TensorId,
    student_joints: TensorId,
    joint_map: &[usize],
) -> Result<TensorId> {
    let mapped = g.index_select(student_joints, 1, joint_map)?; // [T,N,3]
    let t_c = center_on_root(g, teacher)?;
    let s_c = center_on_root(g, mapped)?;
    let d = g.sub(t_c, s_c)?;
    Ok(g.sum_squares(d))
}

/// Rotation regularizer: squared Frobenius distance to the identity, summed
/// over all trailing 3x3 blocks.
pub fn loss_rot_reg(g: &mut Graph, rots: TensorId) -> Result<TensorId> {
    let shape = g.shape(rots).to_vec();
    let blocks = shape.iter().product::<usize>() / 9;
    let mut eye_tile = vec![0.0; blocks * 9];
    for b in 0..blocks {
        eye_tile[b * 9] = 1.0;
        eye_tile[b * 9 + 4] = 1.0;
        eye_tile[b * 9 + 8] = 1.0;
    }
    let eye = g.constant(&shape, eye_tile);
    let d = g.sub(rots, eye)?;
    Ok(g.sum_squares(d))
}

/// Shape regularizer toward the average body: `||betas||^2`.
pub fn loss_beta(g: &mut Graph, betas: TensorId) -> TensorId {
    g.sum_squares(betas)
}

/// `L_T = w_mss L_mss + w_tc L_tc + w_bl L_bl (+ adversarial term)`.
pub fn teacher_total(
    g: &mut Graph,
    w: &LossWeights,
    mss: TensorId,
    tc: TensorId,
    bl: TensorId,
    adv: Option<TensorId>,
) -> Result<TensorId> {
    let a = g.scale(mss, w.mss);
    let b = g.scale(tc, w.tc);
    let c = g.scale(bl, w.bl);
    let mut total = g.add(a, b)?;
    total = g.add(total, c)?;
    if let Some(adv) = adv {
        total = g.add(total, adv)?;
    }
    Ok(total)
}

/// `L_S = L_KD + w_rot L_R + w_beta L_beta`.
pub fn student_total(
    g: &mut Graph,
    w: &LossWeights,
    kd: TensorId,
    rot: TensorId,
    beta: TensorId,
) -> Result<TensorId> {
    let r = g.scale(rot, w.rot);
    let b = g.scale(beta, w.beta);
    let total = g.add(kd, r)?;
    g.add(total, b)
}

/// Stage-4 objective: `L = L_T + w_student L_S (+ student adversarial)`.
pub fn finetune_total(
    g: &mut Graph,
    w: &LossWeights,
    teacher: TensorId,
    student: TensorId,
    adv_student: Option<TensorId>,
) -> Result<TensorId> {
    let s = g.scale(student, w.student);
    let mut total = g.add(teacher, s)?;
    if let Some(adv) = adv_student {
        total = g.add(total, adv)?;
    }
    Ok(total)
}

/// Plain-arithmetic stage sums over already-evaluated components; used for
/// logging and weight introspection.
pub fn weighted_teacher_sum(w: &LossWeights, mss: f64, tc: f64, bl: f64, adv: f64) -> f64 {
    w.mss * mss + w.tc * tc + w.bl * bl + adv
}

pub fn weighted_student_sum(w: &LossWeights, kd: f64, rot: f64, beta: f64) -> f64 {
    kd + w.rot * rot + w.beta * beta
}

#[cfg(test)]
mod tests;
