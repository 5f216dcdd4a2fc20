//! Parametric body: linear-blend-skinned mesh with 24 joints, 10 shape
//! coefficients, a convex vertex-to-joint regressor, and the learned
//! semantic joint adaptation weights that bridge the body's joints to the
//! 14-joint annotation convention.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{lbs_forward_kernel, orthonormalize3, LbsData};
use crate::container::{Container, BODY_MODEL_MAGIC};
use crate::error::{Error, Result};
use crate::geometry::NUM_JOINTS;

/// Body joint count (including the root).
pub const NUM_BODY_JOINTS: usize = 24;
/// Shape coefficient count.
pub const NUM_SHAPES: usize = 10;

/// Kinematic tree parents; `-1` marks the root. Matches the common
/// 24-joint humanoid ordering.
pub const PARENTS: [i64; NUM_BODY_JOINTS] =
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

/// Map from the 14 skeleton joints to body joint indices:
/// head, neck, shoulders, elbows, wrists, hips, knees, ankles.
pub const JOINT_MAP: [usize; NUM_JOINTS] = [15, 12, 16, 17, 18, 19, 20, 21, 1, 2, 4, 5, 7, 8];

/// LBS body: immutable after construction, shared via `Arc`.
#[derive(Debug, Clone)]
pub struct BodyModel {
    pub lbs: Arc<LbsData>,
    pub joint_map: Vec<usize>,
}

impl BodyModel {
    pub fn num_vertices(&self) -> usize {
        self.lbs.v
    }

    pub fn num_joints(&self) -> usize {
        self.lbs.k
    }

    /// Rest joints regressed from the template.
    pub fn rest_joints(&self) -> Vec<f64> {
        regress_joints(&self.lbs.regressor, self.lbs.k, self.lbs.v, &self.lbs.template)
    }

    /// Vertical extent of the template mesh (used as the error scale in
    /// distillation checks).
    pub fn height(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in 0..self.lbs.v {
            let y = self.lbs.template[v * 3 + 1];
            lo = lo.min(y);
            hi = hi.max(y);
        }
        hi - lo
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.lbs;
        if d.k != NUM_BODY_JOINTS {
            return Err(Error::Schema(format!("expected {NUM_BODY_JOINTS} joints, got {}", d.k)));
        }
        if d.num_shapes != NUM_SHAPES {
            return Err(Error::Schema(format!(
                "expected {NUM_SHAPES} shape directions, got {}",
                d.num_shapes
            )));
        }
        if d.parent.len() != d.k || d.parent[0] != -1 {
            return Err(Error::Schema("parent array malformed".into()));
        }
        for (k, &p) in d.parent.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= k {
                return Err(Error::Schema(format!(
                    "joint {k} parent {p} must be an earlier joint"
                )));
            }
        }
        check_convex_rows("skin_weights", &d.skin_weights, d.v, d.k)?;
        check_convex_rows("regressor", &d.regressor, d.k, d.v)?;
        if self.joint_map.len() != NUM_JOINTS {
            return Err(Error::Schema("joint_map length".into()));
        }
        let mut seen = vec![false; d.k];
        for &j in &self.joint_map {
            if j >= d.k || seen[j] {
                return Err(Error::Schema(format!("joint_map entry {j} out of range or repeated")));
            }
            seen[j] = true;
        }
        Ok(())
    }
}

fn check_convex_rows(name: &str, data: &[f64], rows: usize, cols: usize) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::Schema(format!("{name} size {} vs {}x{}", data.len(), rows, cols)));
    }
    for r in 0..rows {
        let mut sum = 0.0;
        for c in 0..cols {
            let w = data[r * cols + c];
            if w < 0.0 {
                return Err(Error::Schema(format!("{name} row {r} has negative entry {w}")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Schema(format!("{name} row {r} sums to {sum}")));
        }
    }
    Ok(())
}

/// Shape and per-frame articulation of one window.
#[derive(Debug, Clone)]
pub struct PoseParams {
    /// `[NUM_SHAPES]`, shared across the window.
    pub betas: Vec<f64>,
    /// `[T, K, 3, 3]` row-major rotation matrices.
    pub rotations: Vec<f64>,
}

impl PoseParams {
    pub fn frames(&self) -> usize {
        self.rotations.len() / (NUM_BODY_JOINTS * 9)
    }

    pub fn frame_rotations(&self, t: usize) -> &[f64] {
        &self.rotations[t * NUM_BODY_JOINTS * 9..(t + 1) * NUM_BODY_JOINTS * 9]
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.len() != NUM_SHAPES {
            return Err(Error::Contract(format!("{} betas, expected {NUM_SHAPES}", self.betas.len())));
        }
        if self.rotations.len() % (NUM_BODY_JOINTS * 9) != 0 {
            return Err(Error::Contract("rotation array is not [T,K,3,3]".into()));
        }
        for (i, r) in self.rotations.chunks(9).enumerate() {
            for a in 0..3 {
                for b in 0..3 {
                    let mut dot = 0.0;
                    for k in 0..3 {
                        dot += r[k * 3 + a] * r[k * 3 + b];
                    }
                    let expect = if a == b { 1.0 } else { 0.0 };
                    if (dot - expect).abs() > 1e-6 {
                        return Err(Error::Contract(format!("rotation {i} not orthonormal")));
                    }
                }
            }
            let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
                + r[2] * (r[3] * r[7] - r[4] * r[6]);
            if (det - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("rotation {i} det {det}")));
            }
        }
        Ok(())
    }
}

/// Logits behind the learned convex joint regressor: `W' = row_softmax(logits)`.
#[derive(Debug, Clone)]
pub struct SJAParams {
    pub logits: Vec<f64>,
    pub joints: usize,
    pub vertices: usize,
}

/// Differentiable-convention orthonormalization of one 3x3 (Gram-Schmidt on
/// columns, third column from the cross product).
pub fn orthonormalize(m: &[f64]) -> Result<[f64; 9]> {
    orthonormalize3(m)
}

/// Plain (non-graph) LBS forward for one frame. Checks the pose invariants.
pub fn lbs_forward(model: &BodyModel, betas: &[f64], rotations: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let pp = PoseParams { betas: betas.to_vec(), rotations: rotations.to_vec() };
    pp.validate()?;
    if pp.frames() != 1 {
        return Err(Error::Contract("lbs_forward takes one frame of rotations".into()));
    }
    Ok(lbs_forward_kernel(&model.lbs, betas, rotations))
}

/// `J = W V` with convex rows; plain triple loop.
pub fn regress_joints(weights: &[f64], k: usize, v: usize, vertices: &[f64]) -> Vec<f64> {
    let mut joints = vec![0.0; k * 3];
    for j in 0..k {
        let row = &weights[j * v..(j + 1) * v];
        for (vi, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for c in 0..3 {
                joints[j * 3 + c] += w * vertices[vi * 3 + c];
            }
        }
    }
    joints
}

/// Row-softmax weights derived from SJA logits; convex by construction.
pub fn sja_weights(sja: &SJAParams) -> Vec<f64> {
    let (k, v) = (sja.joints, sja.vertices);
    let mut out = vec![0.0; k * v];
    for r in 0..k {
        let row = &sja.logits[r * v..(r + 1) * v];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &l) in row.iter().enumerate() {
            let e = (l - m).exp();
            out[r * v + j] = e;
            z += e;
        }
        for j in 0..v {
            out[r * v + j] /= z;
        }
    }
    out
}

/// Warm start: `logits = ln(W + eps)` so `row_softmax(logits)` reproduces W
/// up to an `eps`-bounded perturbation.
pub fn sja_init(w: &[f64], k: usize, v: usize, eps: f64) -> SJAParams {
    let logits = w.iter().map(|&x| (x + eps).ln()).collect();
    SJAParams { logits, joints: k, vertices: v }
}

/// Unconstrained affine adaptation `J' = A J + b` on vectorized joints.
/// Kept only to reproduce the failure mode of adapting joints without the
/// convexity constraint.
pub fn linear_sja(j: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = j.len();
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let mut out = b.to_vec();
    for r in 0..n {
        let row = &a[r * n..(r + 1) * n];
        let mut acc = 0.0;
        for c in 0..n {
            acc += row[c] * j[c];
        }
        out[r] += acc;
    }
    out
}

// ── synthetic body ──────────────────────────────────────────────────

/// Capsule radii for the procedurally generated humanoid.
#[derive(Debug, Clone)]
pub struct BodyShapeConfig {
    pub torso_radius: f64,
    pub limb_radius: f64,
    pub head_radius: f64,
    pub neck_radius: f64,
}

impl Default for BodyShapeConfig {
    fn default() -> Self {
        BodyShapeConfig { torso_radius: 0.13, limb_radius: 0.05, head_radius: 0.10, neck_radius: 0.05 }
    }
}

/// Designed rest joint centers (x left, y up, z forward), in meters, with
/// the head placed one meter above the hip midpoint.
fn designed_joints() -> [[f64; 3]; NUM_BODY_JOINTS] {
    [
        [0.00, 0.00, 0.00],   // pelvis
        [0.09, -0.07, 0.00],  // l_hip
        [-0.09, -0.07, 0.00], // r_hip
        [0.00, 0.14, 0.00],   // spine1
        [0.10, -0.62, 0.00],  // l_knee
        [-0.10, -0.62, 0.00], // r_knee
        [0.00, 0.30, 0.00],   // spine2
        [0.11, -1.15, 0.00],  // l_ankle
        [-0.11, -1.15, 0.00], // r_ankle
        [0.00, 0.46, 0.00],   // spine3
        [0.11, -1.24, 0.12],  // l_foot
        [-0.11, -1.24, 0.12], // r_foot
        [0.00, 0.68, 0.00],   // neck
        [0.07, 0.60, 0.00],   // l_collar
        [-0.07, 0.60, 0.00],  // r_collar
        [0.00, 0.93, 0.00],   // head
        [0.22, 0.63, 0.00],   // l_shoulder
        [-0.22, 0.63, 0.00],  // r_shoulder
        [0.54, 0.63, 0.00],   // l_elbow
        [-0.54, 0.63, 0.00],  // r_elbow
        [0.82, 0.63, 0.00],   // l_wrist
        [-0.82, 0.63, 0.00],  // r_wrist
        [0.92, 0.63, 0.00],   // l_hand
        [-0.92, 0.63, 0.00],  // r_hand
    ]
}

/// Procedurally generated humanoid: capsule-sampled vertices along every
/// bone, distance-falloff skin weights, a regressor concentrated on the
/// vertices nearest each joint, and ten analytic shape directions.
pub fn synth_model(rng: &mut ChaCha8Rng, num_vertices: usize, cfg: &BodyShapeConfig) -> Result<BodyModel> {
    if num_vertices < 2 * NUM_BODY_JOINTS {
        return Err(Error::Config(format!(
            "need at least {} vertices, got {num_vertices}",
            2 * NUM_BODY_JOINTS
        )));
    }
    let joints = designed_joints();

    // Bones as (proximal joint, distal point, radius); the head gets a
    // pseudo-bone extending upward so the skull has volume.
    let mut bones: Vec<(usize, [f64; 3], [f64; 3], f64)> = Vec::new();
    for k in 1..NUM_BODY_JOINTS {
        let p = PARENTS[k] as usize;
        let radius = match k {
            3 | 6 | 9 => cfg.torso_radius,
            12 | 13 | 14 => cfg.neck_radius,
            15 => cfg.head_radius,
            _ => cfg.limb_radius,
        };
        bones.push((p, joints[p], joints[k], radius));
    }
    let head_top = [joints[15][0], joints[15][1] + 0.12, joints[15][2]];
    bones.push((15, joints[15], head_top, cfg.head_radius));

    let total_len: f64 = bones
        .iter()
        .map(|(_, a, b, _)| ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt())
        .sum();

    let mut template = Vec::with_capacity(num_vertices * 3);
    for i in 0..num_vertices {
        // Deterministic round-robin over bones, weighted by length.
        let target = (i as f64 + 0.5) / num_vertices as f64 * total_len;
        let mut acc = 0.0;
        let mut chosen = bones.len() - 1;
        for (bi, (_, a, b, _)) in bones.iter().enumerate() {
            let l = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
            if target <= acc + l {
                chosen = bi;
                break;
            }
            acc += l;
        }
        let (_, a, b, r) = bones[chosen];
        let u: f64 = rng.gen();
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let rr = r * (0.7 + 0.3 * rng.gen::<f64>());
        // axis frame
        let axis = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let al = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt().max(1e-9);
        let ax = [axis[0] / al, axis[1] / al, axis[2] / al];
        let pick = if ax[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let mut e1 = [
            ax[1] * pick[2] - ax[2] * pick[1],
            ax[2] * pick[0] - ax[0] * pick[2],
            ax[0] * pick[1] - ax[1] * pick[0],
        ];
        let e1l = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt().max(1e-9);
        for v in e1.iter_mut() {
            *v /= e1l;
        }
        let e2 = [
            ax[1] * e1[2] - ax[2] * e1[1],
            ax[2] * e1[0] - ax[0] * e1[2],
            ax[0] * e1[1] - ax[1] * e1[0],
        ];
        for c in 0..3 {
            template.push(
                a[c] + axis[c] * u + rr * (theta.cos() * e1[c] + theta.sin() * e2[c]),
            );
        }
    }

    // Skin weights: falloff to the three nearest joints.
    let sigma = 0.16;
    let mut skin_weights = vec![0.0; num_vertices * NUM_BODY_JOINTS];
    for v in 0..num_vertices {
        let pos = [template[v * 3], template[v * 3 + 1], template[v * 3 + 2]];
        let mut dists: Vec<(f64, usize)> = joints
            .iter()
            .enumerate()
            .map(|(k, j)| {
                let d2 = (pos[0] - j[0]).powi(2) + (pos[1] - j[1]).powi(2) + (pos[2] - j[2]).powi(2);
                (d2, k)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut z = 0.0;
        for &(d2, k) in dists.iter().take(3) {
            let w = (-d2 / (2.0 * sigma * sigma)).exp();
            skin_weights[v * NUM_BODY_JOINTS + k] = w;
            z += w;
        }
        for k in 0..NUM_BODY_JOINTS {
            skin_weights[v * NUM_BODY_JOINTS + k] /= z;
        }
    }

    // Regressor: each joint reads the six nearest vertices.
    let sigma_r = 0.08;
    let mut regressor = vec![0.0; NUM_BODY_JOINTS * num_vertices];
    for (k, j) in joints.iter().enumerate() {
        let mut dists: Vec<(f64, usize)> = (0..num_vertices)
            .map(|v| {
                let d2 = (template[v * 3] - j[0]).powi(2)
                    + (template[v * 3 + 1] - j[1]).powi(2)
                    + (template[v * 3 + 2] - j[2]).powi(2);
                (d2, v)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut z = 0.0;
        for &(d2, v) in dists.iter().take(6) {
            let w = (-d2 / (2.0 * sigma_r * sigma_r)).exp().max(1e-12);
            regressor[k * num_vertices + v] = w;
            z += w;
        }
        for v in 0..num_vertices {
            regressor[k * num_vertices + v] /= z;
        }
    }

    // Ten shape directions: analytic fields over the template.
    let mut shape_dirs = vec![0.0; num_vertices * 3 * NUM_SHAPES];
    for v in 0..num_vertices {
        let p = [template[v * 3], template[v * 3 + 1], template[v * 3 + 2]];
        let arm = (p[0].abs() > 0.26) as i32 as f64;
        let leg = (p[1] < -0.15) as i32 as f64;
        let head = (p[1] > 0.78) as i32 as f64;
        let torso = 1.0 - arm.max(leg).max(head);
        let dir = |b: usize, c: usize| v * 3 * NUM_SHAPES + c * NUM_SHAPES + b;
        // 0: global scale
        for c in 0..3 {
            shape_dirs[dir(0, c)] = 0.05 * p[c];
        }
        // 1: arm length
        shape_dirs[dir(1, 0)] = 0.06 * arm * p[0].signum() * (p[0].abs() - 0.26).max(0.0);
        // 2: leg length
        shape_dirs[dir(2, 1)] = 0.06 * leg * (p[1] + 0.15);
        // 3: torso girth
        shape_dirs[dir(3, 0)] = 0.03 * torso * p[0];
        shape_dirs[dir(3, 2)] = 0.03 * torso * p[2];
        // 4: height
        shape_dirs[dir(4, 1)] = 0.04 * p[1];
        // 5: head size
        for c in 0..3 {
            let center = [0.0, 0.93, 0.0];
            shape_dirs[dir(5, c)] = 0.05 * head * (p[c] - center[c]);
        }
        // 6: shoulder width
        shape_dirs[dir(6, 0)] = 0.03 * (p[1] > 0.4) as i32 as f64 * p[0];
        // 7: hip width
        shape_dirs[dir(7, 0)] = 0.03 * ((p[1] < 0.1) && (p[1] > -0.4)) as i32 as f64 * p[0];
        // 8: arm girth
        shape_dirs[dir(8, 1)] = 0.02 * arm * (p[1] - 0.63);
        shape_dirs[dir(8, 2)] = 0.02 * arm * p[2];
        // 9: leg girth
        shape_dirs[dir(9, 0)] = 0.02 * leg * (p[0] - 0.10 * p[0].signum());
        shape_dirs[dir(9, 2)] = 0.02 * leg * p[2];
    }

    let model = BodyModel {
        lbs: Arc::new(LbsData {
            v: num_vertices,
            k: NUM_BODY_JOINTS,
            num_shapes: NUM_SHAPES,
            parent: PARENTS.to_vec(),
            template,
            shape_dirs,
            skin_weights,
            regressor,
        }),
        joint_map: JOINT_MAP.to_vec(),
    };
    model.validate()?;
    Ok(model)
}

// ── file round trip ─────────────────────────────────────────────────

pub fn save_model(model: &BodyModel, path: &Path) -> Result<()> {
    let d = &model.lbs;
    let mut c = Container::new();
    c.put_f64("parent", &[d.k], d.parent.iter().map(|&p| p as f64).collect());
    c.put_f64("template", &[d.v, 3], d.template.clone());
    c.put_f64("shape_dirs", &[d.v, 3, d.num_shapes], d.shape_dirs.clone());
    c.put_f64("skin_weights", &[d.v, d.k], d.skin_weights.clone());
    c.put_f64("regressor", &[d.k, d.v], d.regressor.clone());
    c.put_f64("joint_map", &[model.joint_map.len()], model.joint_map.iter().map(|&j| j as f64).collect());
    c.write(path, BODY_MODEL_MAGIC)
}

pub fn load_model(path: &Path) -> Result<BodyModel> {
    let c = Container::read(path, BODY_MODEL_MAGIC)?;
    let (ps, parent_f) = c.f64("parent")?;
    let k = ps[0];
    let (ts, template) = c.f64("template")?;
    if ts.len() != 2 || ts[1] != 3 {
        return Err(Error::Schema(format!("template shape {:?}", ts)));
    }
    let v = ts[0];
    let (ss, shape_dirs) = c.f64("shape_dirs")?;
    if ss != [v, 3, NUM_SHAPES] {
        return Err(Error::Schema(format!("shape_dirs shape {:?}", ss)));
    }
    let (ws, skin_weights) = c.f64("skin_weights")?;
    if ws != [v, k] {
        return Err(Error::Schema(format!("skin_weights shape {:?}", ws)));
    }
    let (rs, regressor) = c.f64("regressor")?;
    if rs != [k, v] {
        return Err(Error::Schema(format!("regressor shape {:?}", rs)));
    }
    let (js, joint_map_f) = c.f64("joint_map")?;
    if js != [NUM_JOINTS] {
        return Err(Error::Schema(format!("joint_map shape {:?}", js)));
    }
    let model = BodyModel {
        lbs: Arc::new(LbsData {
            v,
            k,
            num_shapes: NUM_SHAPES,
            parent: parent_f.iter().map(|&p| p as i64).collect(),
            template: template.to_vec(),
            shape_dirs: shape_dirs.to_vec(),
            skin_weights: skin_weights.to_vec(),
            regressor: regressor.to_vec(),
        }),
        joint_map: joint_map_f.iter().map(|&j| j as usize).collect(),
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests;
