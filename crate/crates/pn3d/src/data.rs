//! Keypoint ingestion, sliding-window assembly, and the synthetic motion
//! generator used as the ground-truth oracle.
//!
//! Keypoint files are JSON lines:
//! `{"seq": str, "frame": int, "joints": [[x,y] x14], "joints3d"?: [[x,y,z] x14],
//!   "vis"?: [14], "betas"?: [10], "rotations"?: [[9 floats] x24]}`.
//! 2D units are arbitrary (normalization removes scale); 3D is in meters.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::bodymodel::{lbs_forward, BodyModel, NUM_BODY_JOINTS, NUM_SHAPES};
use crate::error::{Error, Result};
use crate::geometry::{
    joint, normalize_window, CameraConvention, PoseWindow2D, SkeletonSpec,
    NUM_JOINTS,
};

pub const DEFAULT_FPS: f64 = 50.0;

/// One frame of one sequence.
#[derive(Debug, Clone)]
pub struct KeypointFrame {
    /// `[N,2]` raw image-plane joints.
    pub joints2d: Vec<f64>,
    /// `[N,3]` ground-truth camera-space joints (evaluation only).
    pub joints3d: Option<Vec<f64>>,
}

/// A contiguous run of frames from one source sequence.
#[derive(Debug, Clone)]
pub struct KeypointSequence {
    pub id: String,
    pub start_frame: i64,
    pub fps: f64,
    pub frames: Vec<KeypointFrame>,
}

impl KeypointSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Flat `[T,N,2]` slice of raw 2D joints starting at local index `start`.
    pub fn window2d(&self, start: usize, t: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(t * NUM_JOINTS * 2);
        for f in start..start + t {
            out.extend_from_slice(&self.frames[f].joints2d);
        }
        out
    }

    /// Flat `[T,N,3]` ground truth, if every frame carries it.
    pub fn window3d(&self, start: usize, t: usize) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(t * NUM_JOINTS * 3);
        for f in start..start + t {
            out.extend_from_slice(self.frames[f].joints3d.as_ref()?);
        }
        Some(out)
    }
}

/// A frame dropped during loading, with the reason.
#[derive(Debug, Clone)]
pub struct RejectedFrame {
    pub seq: String,
    pub frame: i64,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub rejected: Vec<RejectedFrame>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JsonFrame {
    pub seq: String,
    pub frame: i64,
    pub joints: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joints3d: Option<Vec<[f64; 3]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vis: Option<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotations: Option<Vec<Vec<f64>>>,
}

/// Parse, validate, and split keypoint sequences into contiguous runs.
/// Frames with missing or non-finite required joints are rejected (reported,
/// not filled), splitting the run at that point.
pub fn load_keypoints(path: &Path) -> Result<(Vec<KeypointSequence>, LoadReport)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);

    // (seq -> frame -> frame data), detecting duplicates.
    let mut by_seq: BTreeMap<String, BTreeMap<i64, KeypointFrame>> = BTreeMap::new();
    let mut report = LoadReport::default();

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, detail: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonFrame = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, detail: e.to_string() })?;
        if rec.joints.len() != NUM_JOINTS {
            return Err(Error::Schema(format!(
                "line {lineno}: {} joints, expected {NUM_JOINTS}",
                rec.joints.len()
            )));
        }
        if let Some(v) = &rec.vis {
            if v.len() != NUM_JOINTS {
                return Err(Error::Schema(format!(
                    "line {lineno}: vis length {} vs {NUM_JOINTS}",
                    v.len()
                )));
            }
        }
        if let Some(j3) = &rec.joints3d {
            if j3.len() != NUM_JOINTS {
                return Err(Error::Schema(format!(
                    "line {lineno}: joints3d length {} vs {NUM_JOINTS}",
                    j3.len()
                )));
            }
        }

        let missing: Vec<usize> = (0..NUM_JOINTS)
            .filter(|&i| {
                let vis_ok = rec.vis.as_ref().map(|v| v[i] != 0).unwrap_or(true);
                let finite = rec.joints[i][0].is_finite() && rec.joints[i][1].is_finite();
                !(vis_ok && finite)
            })
            .collect();
        if !missing.is_empty() {
            report.rejected.push(RejectedFrame {
                seq: rec.seq.clone(),
                frame: rec.frame,
                reason: format!("missing joints {missing:?}"),
            });
            continue;
        }

        let joints2d: Vec<f64> = rec.joints.iter().flat_map(|p| [p[0], p[1]]).collect();
        let joints3d = rec.joints3d.map(|j3| j3.iter().flat_map(|p| [p[0], p[1], p[2]]).collect());
        let seq_map = by_seq.entry(rec.seq.clone()).or_default();
        if seq_map.insert(rec.frame, KeypointFrame { joints2d, joints3d }).is_some() {
            return Err(Error::Schema(format!(
                "line {lineno}: duplicate frame {} in sequence `{}`",
                rec.frame, rec.seq
            )));
        }
    }

    // Split each sequence at frame-index gaps.
    let mut sequences = Vec::new();
    for (id, frames) in by_seq {
        let mut run: Vec<(i64, KeypointFrame)> = Vec::new();
        let flush = |run: &mut Vec<(i64, KeypointFrame)>, sequences: &mut Vec<KeypointSequence>| {
            if run.is_empty() {
                return;
            }
            sequences.push(KeypointSequence {
                id: id.clone(),
                start_frame: run[0].0,
                fps: DEFAULT_FPS,
                frames: run.drain(..).map(|(_, f)| f).collect(),
            });
        };
        for (frame, data) in frames {
            if let Some(&(last, _)) = run.last().as_ref() {
                if frame != last + 1 {
                    flush(&mut run, &mut sequences);
                }
            }
            run.push((frame, data));
        }
        flush(&mut run, &mut sequences);
    }
    Ok((sequences, report))
}

/// Write sequences in the JSON-lines format (full float precision).
pub fn save_keypoints(path: &Path, sequences: &[KeypointSequence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for seq in sequences {
        for (i, frame) in seq.frames.iter().enumerate() {
            let rec = JsonFrame {
                seq: seq.id.clone(),
                frame: seq.start_frame + i as i64,
                joints: (0..NUM_JOINTS)
                    .map(|n| [frame.joints2d[n * 2], frame.joints2d[n * 2 + 1]])
                    .collect(),
                joints3d: frame.joints3d.as_ref().map(|j3| {
                    (0..NUM_JOINTS).map(|n| [j3[n * 3], j3[n * 3 + 1], j3[n * 3 + 2]]).collect()
                }),
                vis: None,
                betas: None,
                rotations: None,
            };
            serde_json::to_writer(&mut w, &rec)
                .map_err(|e| Error::Schema(format!("serialize: {e}")))?;
            w.write_all(b"\n").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

// ── window assembly ─────────────────────────────────────────────────

/// One normalized window plus provenance and optional ground truth.
#[derive(Debug, Clone)]
pub struct NormWindow {
    /// Normalized `[T,N,2]`.
    pub x: Vec<f64>,
    pub scale: f64,
    pub seq: String,
    pub start_frame: i64,
    /// `[T,N,3]` ground truth when the source carries it.
    pub gt3d: Option<Vec<f64>>,
}

/// A batch of windows; `pairs` indexes stride-1 successor pairs used by the
/// temporal consistency loss.
#[derive(Debug, Clone, Default)]
pub struct WindowBatch {
    pub windows: Vec<NormWindow>,
    pub pairs: Vec<(usize, usize)>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Enumerate one epoch of window batches: uniformly shuffled window starts,
/// each paired with its stride-1 successor when the sequence allows it.
pub fn make_windows(
    sequences: &[KeypointSequence],
    t: usize,
    stride: usize,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    skel: &SkeletonSpec,
    cam: &CameraConvention,
) -> Result<Vec<WindowBatch>> {
    if batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2 windows".into()));
    }
    // (sequence index, start, has successor)
    let mut starts: Vec<(usize, usize, bool)> = Vec::new();
    for (si, seq) in sequences.iter().enumerate() {
        let len = seq.len();
        if len < t {
            continue;
        }
        if len == t {
            starts.push((si, 0, false));
            continue;
        }
        let mut s = 0;
        while s + t < len {
            starts.push((si, s, true));
            s += stride.max(1);
        }
    }
    starts.shuffle(rng);

    let normalize = |seq: &KeypointSequence, start: usize| -> Result<NormWindow> {
        let raw = seq.window2d(start, t);
        let ids: Vec<i64> = (0..t as i64).map(|k| seq.start_frame + start as i64 + k).collect();
        let w = normalize_window(&raw, &ids, skel, cam)?;
        Ok(NormWindow {
            x: w.joints,
            scale: w.scale,
            seq: seq.id.clone(),
            start_frame: seq.start_frame + start as i64,
            gt3d: seq.window3d(start, t),
        })
    };

    let mut batches = Vec::new();
    let mut cur = WindowBatch::default();
    for (si, start, paired) in starts {
        let need = if paired { 2 } else { 1 };
        if cur.len() + need > batch_size && !cur.is_empty() {
            batches.push(std::mem::take(&mut cur));
        }
        let seq = &sequences[si];
        let a = cur.len();
        cur.windows.push(normalize(seq, start)?);
        if paired {
            cur.windows.push(normalize(seq, start + 1)?);
            cur.pairs.push((a, a + 1));
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}

/// Copy one frame `T` times into an unnormalized window.
pub fn replicate_single_frame(frame: &[f64], t: usize, frame_id: i64) -> PoseWindow2D {
    assert_eq!(frame.len(), NUM_JOINTS * 2);
    let mut joints = Vec::with_capacity(t * NUM_JOINTS * 2);
    for _ in 0..t {
        joints.extend_from_slice(frame);
    }
    PoseWindow2D { joints, frame_ids: vec![frame_id; t], normalized: false, scale: 1.0 }
}

// ── synthetic motion ────────────────────────────────────────────────

/// Synthetic motion settings. Only joints whose rotation leaves every
/// skeleton edge rigid are articulated, so generated sequences have exactly
/// constant bone lengths.
#[derive(Debug, Clone)]
pub struct MotionConfig {
    /// Peak joint angle in radians.
    pub amplitude: f64,
    /// Peak root yaw in radians.
    pub root_yaw: f64,
    /// Sinusoid components per joint axis.
    pub harmonics: usize,
    /// Fundamental period in frames.
    pub period: f64,
    /// Multiplier applied to emitted 2D coordinates (arbitrary image units).
    pub image_scale: f64,
    /// Peak shape coefficient magnitude.
    pub beta_spread: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            amplitude: 0.35,
            root_yaw: 0.6,
            harmonics: 2,
            period: 60.0,
            image_scale: 1000.0,
            beta_spread: 0.6,
        }
    }
}

/// Joints safe to articulate: hips, knees, shoulders, elbows. Spine,
/// collars and neck stay rigid so head-root distance and every skeleton
/// edge length are constant across a sequence.
const ARTICULATED: [usize; 8] = [1, 2, 4, 5, 16, 17, 18, 19];

struct AngleTrack {
    amp: Vec<f64>,
    freq: Vec<f64>,
    phase: Vec<f64>,
}

impl AngleTrack {
    fn sample(rng: &mut ChaCha8Rng, cfg: &MotionConfig, peak: f64) -> Self {
        let h = cfg.harmonics.max(1);
        let mut amp = Vec::with_capacity(h);
        let mut freq = Vec::with_capacity(h);
        let mut phase = Vec::with_capacity(h);
        let mut total = 0.0;
        for k in 0..h {
            let a = rng.gen::<f64>();
            total += a;
            amp.push(a);
            freq.push((k + 1) as f64 / cfg.period);
            phase.push(rng.gen::<f64>() * std::f64::consts::TAU);
        }
        let norm = if total > 0.0 { peak / total } else { 0.0 };
        for a in amp.iter_mut() {
            *a *= norm;
        }
        AngleTrack { amp, freq, phase }
    }

    fn at(&self, t: f64) -> f64 {
        let mut v = 0.0;
        for k in 0..self.amp.len() {
            v += self.amp[k] * (std::f64::consts::TAU * self.freq[k] * t + self.phase[k]).sin();
        }
        v
    }
}

fn euler_rotation(ax: f64, ay: f64, az: f64) -> [f64; 9] {
    let rx = rotation_about(0, ax);
    let ry = rotation_about(1, ay);
    let rz = rotation_about(2, az);
    mat3(&mat3(&rz, &ry), &rx)
}

fn rotation_about(axis: usize, a: f64) -> [f64; 9] {
    let (s, c) = a.sin_cos();
    match axis {
        0 => [1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c],
        1 => [c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c],
        _ => [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0],
    }
}

fn mat3(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut m = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            for k in 0..3 {
                m[r * 3 + c] += a[r * 3 + k] * b[k * 3 + c];
            }
        }
    }
    m
}

/// Solve the camera-space translation that places a root-centered skeleton
/// so its projection is exactly normalized: projected hip midpoint at the
/// origin and projected head-root distance exactly `1/c`.
fn solve_placement(local14: &[f64], cam: &CameraConvention, init: [f64; 3]) -> Result<[f64; 3]> {
    let target = (1.0 / cam.distance) * (1.0 / cam.distance);
    let residual = |t: &[f64; 3]| -> [f64; 3] {
        let p = |n: usize| {
            let x = local14[n * 3] + t[0];
            let y = local14[n * 3 + 1] + t[1];
            let z = local14[n * 3 + 2] + t[2];
            [x / z, y / z]
        };
        let lh = p(joint::L_HIP);
        let rh = p(joint::R_HIP);
        let head = p(joint::HEAD);
        let mid = [0.5 * (lh[0] + rh[0]), 0.5 * (lh[1] + rh[1])];
        let hd = [head[0] - mid[0], head[1] - mid[1]];
        [mid[0], mid[1], hd[0] * hd[0] + hd[1] * hd[1] - target]
    };
    let mut t = init;
    for _ in 0..80 {
        let f = residual(&t);
        let err = f[0].abs().max(f[1].abs()).max(f[2].abs());
        if err < 1e-14 {
            return Ok(t);
        }
        // numeric Jacobian
        let h = 1e-7;
        let mut jac = [[0.0; 3]; 3];
        for c in 0..3 {
            let mut tp = t;
            tp[c] += h;
            let fp = residual(&tp);
            for r in 0..3 {
                jac[r][c] = (fp[r] - f[r]) / h;
            }
        }
        // solve 3x3 via Cramer
        let det = jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
            - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
            + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]);
        if det.abs() < 1e-18 {
            return Err(Error::Divergence("placement Jacobian singular".into()));
        }
        let solve_col = |col: usize| {
            let mut m = jac;
            for r in 0..3 {
                m[r][col] = f[r];
            }
            (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]))
                / det
        };
        let dx = [solve_col(0), solve_col(1), solve_col(2)];
        for c in 0..3 {
            t[c] -= dx[c];
        }
    }
    let f = residual(&t);
    let err = f[0].abs().max(f[1].abs()).max(f[2].abs());
    if err < 1e-10 {
        Ok(t)
    } else {
        Err(Error::Divergence(format!("placement solve stalled at residual {err:.3e}")))
    }
}

/// Generate smooth articulated motion through the body model, placed in
/// camera space with exactly normalized projections, emitting 2D keypoints
/// plus exact 3D ground truth.
pub fn synth_motion(
    body: &BodyModel,
    rng: &mut ChaCha8Rng,
    num_sequences: usize,
    length: usize,
    cfg: &MotionConfig,
) -> Result<Vec<KeypointSequence>> {
    let cam = CameraConvention::default();
    let mut sequences = Vec::with_capacity(num_sequences);
    for si in 0..num_sequences {
        let betas: Vec<f64> =
            (0..NUM_SHAPES).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * cfg.beta_spread).collect();

        // Three angle tracks per articulated joint, plus root yaw.
        let tracks: Vec<[AngleTrack; 3]> = ARTICULATED
            .iter()
            .map(|_| {
                [
                    AngleTrack::sample(rng, cfg, cfg.amplitude),
                    AngleTrack::sample(rng, cfg, cfg.amplitude),
                    AngleTrack::sample(rng, cfg, cfg.amplitude),
                ]
            })
            .collect();
        let yaw_track = AngleTrack::sample(rng, cfg, cfg.root_yaw);

        let mut frames = Vec::with_capacity(length);
        let mut placement = [0.0, 0.0, cam.distance];
        for f in 0..length {
            let tt = f as f64;
            let mut rots = vec![0.0; NUM_BODY_JOINTS * 9];
            for k in 0..NUM_BODY_JOINTS {
                rots[k * 9] = 1.0;
                rots[k * 9 + 4] = 1.0;
                rots[k * 9 + 8] = 1.0;
            }
            rots[..9].copy_from_slice(&euler_rotation(0.0, yaw_track.at(tt), 0.0));
            for (ti, &k) in ARTICULATED.iter().enumerate() {
                let r = euler_rotation(
                    tracks[ti][0].at(tt),
                    tracks[ti][1].at(tt),
                    tracks[ti][2].at(tt),
                );
                rots[k * 9..(k + 1) * 9].copy_from_slice(&r);
            }

            let (_, joints24) = lbs_forward(body, &betas, &rots)?;
            let mut local14 = vec![0.0; NUM_JOINTS * 3];
            for (i, &m) in body.joint_map.iter().enumerate() {
                for c in 0..3 {
                    local14[i * 3 + c] = joints24[m * 3 + c];
                }
            }
            // center on hip midpoint
            let root = [
                0.5 * (local14[joint::L_HIP * 3] + local14[joint::R_HIP * 3]),
                0.5 * (local14[joint::L_HIP * 3 + 1] + local14[joint::R_HIP * 3 + 1]),
                0.5 * (local14[joint::L_HIP * 3 + 2] + local14[joint::R_HIP * 3 + 2]),
            ];
            for n in 0..NUM_JOINTS {
                for c in 0..3 {
                    local14[n * 3 + c] -= root[c];
                }
            }

            placement = solve_placement(&local14, &cam, placement)?;
            let mut joints3d = vec![0.0; NUM_JOINTS * 3];
            let mut joints2d = vec![0.0; NUM_JOINTS * 2];
            for n in 0..NUM_JOINTS {
                for c in 0..3 {
                    joints3d[n * 3 + c] = local14[n * 3 + c] + placement[c];
                }
                let z = joints3d[n * 3 + 2];
                if z <= cam.depth_floor {
                    return Err(Error::Divergence(format!(
                        "generated joint depth {z} at or below the floor"
                    )));
                }
                joints2d[n * 2] = joints3d[n * 3] / z * cfg.image_scale;
                joints2d[n * 2 + 1] = joints3d[n * 3 + 1] / z * cfg.image_scale;
            }
            frames.push(KeypointFrame { joints2d, joints3d: Some(joints3d) });
        }
        sequences.push(KeypointSequence {
            id: format!("synth{si:04}"),
            start_frame: 0,
            fps: DEFAULT_FPS,
            frames,
        });
    }
    Ok(sequences)
}
