//! Differentiable lifting geometry: 2D window normalization, depth-offset
//! lifting, random rotation and reprojection, plus similarity (Procrustes)
//! alignment for evaluation.
//!
//! The camera is a unit-focal perspective camera at the origin looking down
//! +z. Skeletons are normalized so the mean head-to-root distance is `1/c`
//! in 2D, which pins lifted skeletons to roughly unit scale at distance
//! `c = 10` from the camera.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of skeleton joints consumed and produced by the system.
pub const NUM_JOINTS: usize = 14;

/// Canonical joint indices.
pub mod joint {
    pub const HEAD: usize = 0;
    pub const NECK: usize = 1;
    pub const L_SHOULDER: usize = 2;
    pub const R_SHOULDER: usize = 3;
    pub const L_ELBOW: usize = 4;
    pub const R_ELBOW: usize = 5;
    pub const L_WRIST: usize = 6;
    pub const R_WRIST: usize = 7;
    pub const L_HIP: usize = 8;
    pub const R_HIP: usize = 9;
    pub const L_KNEE: usize = 10;
    pub const R_KNEE: usize = 11;
    pub const L_ANKLE: usize = 12;
    pub const R_ANKLE: usize = 13;
}

/// Fixed 14-joint skeleton: names, bone edges, and the 8 metric limb
/// segments tracked by the bone-length statistics.
#[derive(Debug, Clone)]
pub struct SkeletonSpec {
    pub names: [&'static str; NUM_JOINTS],
    pub edges: Vec<(usize, usize)>,
    pub metric_segments: [(usize, usize); 8],
    pub head: usize,
    pub left_hip: usize,
    pub right_hip: usize,
}

impl SkeletonSpec {
    pub fn canonical() -> Self {
        use joint::*;
        let edges = vec![
            (HEAD, NECK),
            (NECK, L_SHOULDER),
            (NECK, R_SHOULDER),
            (L_SHOULDER, L_ELBOW),
            (L_ELBOW, L_WRIST),
            (R_SHOULDER, R_ELBOW),
            (R_ELBOW, R_WRIST),
            (NECK, L_HIP),
            (NECK, R_HIP),
            (L_HIP, R_HIP),
            (L_HIP, L_KNEE),
            (L_KNEE, L_ANKLE),
            (R_HIP, R_KNEE),
            (R_KNEE, R_ANKLE),
        ];
        let metric_segments = [
            (L_SHOULDER, L_ELBOW),
            (L_ELBOW, L_WRIST),
            (R_SHOULDER, R_ELBOW),
            (R_ELBOW, R_WRIST),
            (L_HIP, L_KNEE),
            (L_KNEE, L_ANKLE),
            (R_HIP, R_KNEE),
            (R_KNEE, R_ANKLE),
        ];
        SkeletonSpec {
            names: [
                "head", "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist",
                "r_wrist", "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
            ],
            edges,
            metric_segments,
            head: HEAD,
            left_hip: L_HIP,
            right_hip: R_HIP,
        }
    }
}

/// Unit-focal perspective camera with the skeleton placed `distance` units
/// down the optical axis and a hard depth floor in front of the camera.
#[derive(Debug, Clone)]
pub struct CameraConvention {
    pub focal: f64,
    pub distance: f64,
    pub depth_floor: f64,
    pub azimuth_range: (f64, f64),
    pub elevation_range: (f64, f64),
}

impl Default for CameraConvention {
    fn default() -> Self {
        CameraConvention {
            focal: 1.0,
            distance: 10.0,
            depth_floor: 1.0,
            azimuth_range: (-std::f64::consts::PI, std::f64::consts::PI),
            elevation_range: (-std::f64::consts::PI / 9.0, std::f64::consts::PI / 9.0),
        }
    }
}

impl CameraConvention {
    /// Placement point `C = (0, 0, c)` used after random rotation.
    pub fn placement(&self) -> [f64; 3] {
        [0.0, 0.0, self.distance]
    }
}

/// `T` frames of `N` 2D joints, row-major `[T,N,2]`.
#[derive(Debug, Clone)]
pub struct PoseWindow2D {
    pub joints: Vec<f64>,
    pub frame_ids: Vec<i64>,
    pub normalized: bool,
    pub scale: f64,
}

impl PoseWindow2D {
    pub fn frames(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn joint(&self, t: usize, n: usize) -> [f64; 2] {
        let p = (t * NUM_JOINTS + n) * 2;
        [self.joints[p], self.joints[p + 1]]
    }
}

/// `T` frames of `N` 3D joints in camera coordinates, row-major `[T,N,3]`.
#[derive(Debug, Clone)]
pub struct PoseWindow3D {
    pub joints: Vec<f64>,
    pub frame_ids: Vec<i64>,
}

impl PoseWindow3D {
    pub fn frames(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn joint(&self, t: usize, n: usize) -> [f64; 3] {
        let p = (t * NUM_JOINTS + n) * 3;
        [self.joints[p], self.joints[p + 1], self.joints[p + 2]]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.joints[t * NUM_JOINTS * 3..(t + 1) * NUM_JOINTS * 3]
    }
}

/// Center each frame on its hip midpoint and scale the whole window so the
/// mean head-to-root distance is `1/c`. The single scalar factor is recorded
/// on the output window.
pub fn normalize_window(
    raw: &[f64],
    frame_ids: &[i64],
    skel: &SkeletonSpec,
    cam: &CameraConvention,
) -> Result<PoseWindow2D> {
    let t_len = frame_ids.len();
    assert_eq!(raw.len(), t_len * NUM_JOINTS * 2, "raw window shape");
    let mut joints = raw.to_vec();
    let mut mean_dist = 0.0;
    for t in 0..t_len {
        let base = t * NUM_JOINTS * 2;
        let lh = &raw[base + skel.left_hip * 2..base + skel.left_hip * 2 + 2];
        let rh = &raw[base + skel.right_hip * 2..base + skel.right_hip * 2 + 2];
        let root = [0.5 * (lh[0] + rh[0]), 0.5 * (lh[1] + rh[1])];
        for n in 0..NUM_JOINTS {
            joints[base + n * 2] -= root[0];
            joints[base + n * 2 + 1] -= root[1];
        }
        let hx = joints[base + skel.head * 2];
        let hy = joints[base + skel.head * 2 + 1];
        mean_dist += (hx * hx + hy * hy).sqrt();
    }
    mean_dist /= t_len as f64;
    if mean_dist < 1e-9 {
        return Err(Error::DegenerateSkeleton(mean_dist));
    }
    let s = (1.0 / cam.distance) / mean_dist;
    for v in joints.iter_mut() {
        *v *= s;
    }
    Ok(PoseWindow2D { joints, frame_ids: frame_ids.to_vec(), normalized: true, scale: s })
}

/// Depth-offset lifting `X = (x z, y z, z)` with `z = max(floor, c + o)`.
pub fn lift(pose2d: &PoseWindow2D, offsets: &[f64], cam: &CameraConvention) -> Result<PoseWindow3D> {
    if !pose2d.normalized {
        return Err(Error::Contract("lift requires a normalized 2D window".into()));
    }
    let count = pose2d.frames() * NUM_JOINTS;
    if offsets.len() != count {
        return Err(Error::Shape {
            op: "lift",
            detail: format!("{} offsets vs {} joints", offsets.len(), count),
        });
    }
    let mut joints = vec![0.0; count * 3];
    for i in 0..count {
        let z = (cam.distance + offsets[i]).max(cam.depth_floor);
        joints[i * 3] = pose2d.joints[i * 2] * z;
        joints[i * 3 + 1] = pose2d.joints[i * 2 + 1] * z;
        joints[i * 3 + 2] = z;
    }
    Ok(PoseWindow3D { joints, frame_ids: pose2d.frame_ids.clone() })
}

/// Root of one 3D frame: midpoint of the two hip joints.
pub fn root_of(frame3d: &[f64], skel: &SkeletonSpec) -> [f64; 3] {
    let lh = &frame3d[skel.left_hip * 3..skel.left_hip * 3 + 3];
    let rh = &frame3d[skel.right_hip * 3..skel.right_hip * 3 + 3];
    [0.5 * (lh[0] + rh[0]), 0.5 * (lh[1] + rh[1]), 0.5 * (lh[2] + rh[2])]
}

/// Rotation from an azimuth about the vertical (image y) axis followed by an
/// elevation about the horizontal image x axis.
pub fn rotation_from_angles(azimuth: f64, elevation: f64) -> [f64; 9] {
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    let r_az = [ca, 0.0, sa, 0.0, 1.0, 0.0, -sa, 0.0, ca];
    let r_el = [1.0, 0.0, 0.0, 0.0, ce, -se, 0.0, se, ce];
    let mut q = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            q[r * 3 + c] =
                r_el[r * 3] * r_az[c] + r_el[r * 3 + 1] * r_az[3 + c] + r_el[r * 3 + 2] * r_az[6 + c];
        }
    }
    q
}

/// Uniform azimuth/elevation draw from the camera's configured ranges.
pub fn sample_angles(rng: &mut ChaCha8Rng, cam: &CameraConvention) -> (f64, f64) {
    let az = rng.gen_range(cam.azimuth_range.0..=cam.azimuth_range.1);
    let el = rng.gen_range(cam.elevation_range.0..=cam.elevation_range.1);
    (az, el)
}

/// Random reprojection rotation `Q = R_elev * R_azim`.
pub fn sample_rotation(rng: &mut ChaCha8Rng, cam: &CameraConvention) -> [f64; 9] {
    let (az, el) = sample_angles(rng, cam);
    rotation_from_angles(az, el)
}

/// Per frame: `Y_i = Q (X_i − X_root) + C` with the root at the hip midpoint.
pub fn rotate_place(
    x: &PoseWindow3D,
    q: &[f64; 9],
    skel: &SkeletonSpec,
    cam: &CameraConvention,
) -> PoseWindow3D {
    let place = cam.placement();
    let mut joints = vec![0.0; x.joints.len()];
    for t in 0..x.frames() {
        let frame = x.frame(t);
        let root = root_of(frame, skel);
        for n in 0..NUM_JOINTS {
            let v = [
                frame[n * 3] - root[0],
                frame[n * 3 + 1] - root[1],
                frame[n * 3 + 2] - root[2],
            ];
            for r in 0..3 {
                joints[(t * NUM_JOINTS + n) * 3 + r] =
                    q[r * 3] * v[0] + q[r * 3 + 1] * v[1] + q[r * 3 + 2] * v[2] + place[r];
            }
        }
    }
    PoseWindow3D { joints, frame_ids: x.frame_ids.clone() }
}

/// Perspective projection; the output window carries the unnormalized flag.
pub fn project(y: &PoseWindow3D) -> Result<PoseWindow2D> {
    let count = y.frames() * NUM_JOINTS;
    let mut joints = vec![0.0; count * 2];
    for i in 0..count {
        let z = y.joints[i * 3 + 2];
        if z <= 0.0 {
            return Err(Error::ProjectionDomain {
                frame: i / NUM_JOINTS,
                joint: i % NUM_JOINTS,
                depth: z,
            });
        }
        joints[i * 2] = y.joints[i * 3] / z;
        joints[i * 2 + 1] = y.joints[i * 3 + 1] / z;
    }
    Ok(PoseWindow2D { joints, frame_ids: y.frame_ids.clone(), normalized: false, scale: 1.0 })
}

// ── similarity alignment ────────────────────────────────────────────

/// Result of similarity (Procrustes) alignment of `P` onto `G`.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub scale: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    /// `s R P + t`, flat `[N,3]`.
    pub aligned: Vec<f64>,
    /// Mean per-point distance after alignment.
    pub residual: f64,
}

/// Closed-form similarity alignment minimizing `sum ||s R p_i + t - g_i||^2`
/// with a reflection guard (`det R = +1`). `p`, `g` are flat `[N,3]`.
pub fn procrustes_align(p: &[f64], g: &[f64]) -> Result<Alignment> {
    if p.len() != g.len() || p.len() % 3 != 0 {
        return Err(Error::Shape {
            op: "procrustes_align",
            detail: format!("{} vs {} coordinates", p.len(), g.len()),
        });
    }
    let n = p.len() / 3;
    if n < 3 {
        return Err(Error::Contract(format!("procrustes_align needs >= 3 points, got {n}")));
    }
    let mean = |x: &[f64]| -> [f64; 3] {
        let mut m = [0.0; 3];
        for i in 0..n {
            for c in 0..3 {
                m[c] += x[i * 3 + c];
            }
        }
        for c in m.iter_mut() {
            *c /= n as f64;
        }
        m
    };
    let mu_p = mean(p);
    let mu_g = mean(g);

    // Degeneracy gate: centered target must have rank >= 2.
    let mut cov_g = [0.0; 9];
    for i in 0..n {
        let gc = [g[i * 3] - mu_g[0], g[i * 3 + 1] - mu_g[1], g[i * 3 + 2] - mu_g[2]];
        for r in 0..3 {
            for c in 0..3 {
                cov_g[r * 3 + c] += gc[r] * gc[c];
            }
        }
    }
    let (gl, _) = jacobi_eigen3(&cov_g);
    if gl[0] <= 0.0 || gl[1] <= gl[0] * 1e-14 {
        return Err(Error::AlignmentDegenerate);
    }

    // Cross-covariance H = sum gc pc^T and source spread.
    let mut h = [0.0; 9];
    let mut p_sq = 0.0;
    for i in 0..n {
        let pc = [p[i * 3] - mu_p[0], p[i * 3 + 1] - mu_p[1], p[i * 3 + 2] - mu_p[2]];
        let gc = [g[i * 3] - mu_g[0], g[i * 3 + 1] - mu_g[1], g[i * 3 + 2] - mu_g[2]];
        for r in 0..3 {
            for c in 0..3 {
                h[r * 3 + c] += gc[r] * pc[c];
            }
        }
        p_sq += pc[0] * pc[0] + pc[1] * pc[1] + pc[2] * pc[2];
    }
    if p_sq <= 0.0 {
        return Err(Error::AlignmentDegenerate);
    }

    let (u, sig, vt) = svd3(&h);
    let d = (det3(&u) * det3_t(&vt)).signum();
    // R = U diag(1,1,d) V^T
    let mut r = [0.0; 9];
    for row in 0..3 {
        for col in 0..3 {
            r[row * 3 + col] = u[row * 3] * vt[col]
                + u[row * 3 + 1] * vt[3 + col]
                + d * u[row * 3 + 2] * vt[6 + col];
        }
    }
    let scale = (sig[0] + sig[1] + d * sig[2]) / p_sq;
    let mut t = [0.0; 3];
    for c in 0..3 {
        t[c] = mu_g[c] - scale * (r[c * 3] * mu_p[0] + r[c * 3 + 1] * mu_p[1] + r[c * 3 + 2] * mu_p[2]);
    }

    let mut aligned = vec![0.0; p.len()];
    let mut residual = 0.0;
    for i in 0..n {
        for c in 0..3 {
            aligned[i * 3 + c] = scale
                * (r[c * 3] * p[i * 3] + r[c * 3 + 1] * p[i * 3 + 1] + r[c * 3 + 2] * p[i * 3 + 2])
                + t[c];
        }
        let dx = aligned[i * 3] - g[i * 3];
        let dy = aligned[i * 3 + 1] - g[i * 3 + 1];
        let dz = aligned[i * 3 + 2] - g[i * 3 + 2];
        residual += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    residual /= n as f64;

    Ok(Alignment { scale, rotation: r, translation: t, aligned, residual })
}

fn det3(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

/// Determinant of a matrix given transposed (same value).
fn det3_t(m: &[f64; 9]) -> f64 {
    det3(m)
}

/// Cyclic Jacobi eigendecomposition of a symmetric 3x3. Returns eigenvalues
/// descending and eigenvectors as matrix columns.
pub(crate) fn jacobi_eigen3(a: &[f64; 9]) -> ([f64; 3], [f64; 9]) {
    let mut m = *a;
    let mut v = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    for _ in 0..64 {
        let off = m[1] * m[1] + m[2] * m[2] + m[5] * m[5];
        if off < 1e-30 * (m[0] * m[0] + m[4] * m[4] + m[8] * m[8]).max(1e-300) {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = m[p * 3 + q];
            if apq.abs() < 1e-300 {
                continue;
            }
            let app = m[p * 3 + p];
            let aqq = m[q * 3 + q];
            let theta = (aqq - app) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let mkp = m[k * 3 + p];
                let mkq = m[k * 3 + q];
                m[k * 3 + p] = c * mkp - s * mkq;
                m[k * 3 + q] = s * mkp + c * mkq;
            }
            for k in 0..3 {
                let mpk = m[p * 3 + k];
                let mqk = m[q * 3 + k];
                m[p * 3 + k] = c * mpk - s * mqk;
                m[q * 3 + k] = s * mpk + c * mqk;
            }
            for k in 0..3 {
                let vkp = v[k * 3 + p];
                let vkq = v[k * 3 + q];
                v[k * 3 + p] = c * vkp - s * vkq;
                v[k * 3 + q] = s * vkp + c * vkq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| m[j * 3 + j].partial_cmp(&m[i * 3 + i]).unwrap());
    let vals = [m[order[0] * 4], m[order[1] * 4], m[order[2] * 4]];
    let mut vecs = [0.0; 9];
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..3 {
            vecs[r * 3 + dst] = v[r * 3 + src];
        }
    }
    (vals, vecs)
}

/// SVD of a 3x3 via the eigendecomposition of `M^T M`, completing left
/// singular vectors with cross products when singular values vanish.
/// Returns `(U, singular values desc, V^T)`.
pub(crate) fn svd3(m: &[f64; 9]) -> ([f64; 9], [f64; 3], [f64; 9]) {
    let mut mtm = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            mtm[r * 3 + c] = m[r] * m[c] + m[3 + r] * m[3 + c] + m[6 + r] * m[6 + c];
        }
    }
    let (lam, v) = jacobi_eigen3(&mtm);
    let sig = [lam[0].max(0.0).sqrt(), lam[1].max(0.0).sqrt(), lam[2].max(0.0).sqrt()];
    let tol = sig[0] * 1e-13;

    let col = |mat: &[f64; 9], j: usize| [mat[j], mat[3 + j], mat[6 + j]];
    let matvec = |j: usize| {
        let vj = col(&v, j);
        [
            m[0] * vj[0] + m[1] * vj[1] + m[2] * vj[2],
            m[3] * vj[0] + m[4] * vj[1] + m[5] * vj[2],
            m[6] * vj[0] + m[7] * vj[1] + m[8] * vj[2],
        ]
    };

    let mut u_cols = [[0.0f64; 3]; 3];
    for j in 0..3 {
        if sig[j] > tol {
            let mv = matvec(j);
            u_cols[j] = [mv[0] / sig[j], mv[1] / sig[j], mv[2] / sig[j]];
        } else if j == 2 {
            let c = cross(&u_cols[0], &u_cols[1]);
            u_cols[2] = normalize(&c);
        } else if j == 1 {
            u_cols[1] = normalize(&orthogonal_to(&u_cols[0]));
        } else {
            u_cols[0] = [1.0, 0.0, 0.0];
        }
    }
    // Re-orthogonalize in case of near-degenerate pairs.
    u_cols[1] = {
        let d = dot(&u_cols[1], &u_cols[0]);
        normalize(&[
            u_cols[1][0] - d * u_cols[0][0],
            u_cols[1][1] - d * u_cols[0][1],
            u_cols[1][2] - d * u_cols[0][2],
        ])
    };
    if sig[2] <= tol {
        u_cols[2] = cross(&u_cols[0], &u_cols[1]);
    }

    let mut u = [0.0; 9];
    for j in 0..3 {
        for r in 0..3 {
            u[r * 3 + j] = u_cols[j][r];
        }
    }
    let mut vt = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            vt[r * 3 + c] = v[c * 3 + r];
        }
    }
    (u, sig, vt)
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: &[f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt().max(1e-300);
    [a[0] / n, a[1] / n, a[2] / n]
}

fn orthogonal_to(a: &[f64; 3]) -> [f64; 3] {
    let pick = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let c = cross(a, &pick);
    if dot(&c, &c) > 0.0 {
        c
    } else {
        [0.0, 0.0, 1.0]
    }
}
