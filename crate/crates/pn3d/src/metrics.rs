//! Evaluation metrics: position error after similarity alignment, velocity
//! error of aligned sequences, bone-length stability, and correct-keypoint
//! percentages, plus teacher/student output fusion.
//!
//! Inputs are in meters; every reported number is in millimeters. Sequences
//! are flat `[N,3]` frames.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{procrustes_align, SkeletonSpec, NUM_JOINTS};

pub const PCK_THRESHOLD_MM: f64 = 150.0;
/// AUC threshold grid: 5..150 mm step 5 (the zero bin is excluded).
pub fn auc_grid() -> Vec<f64> {
    (1..=30).map(|i| i as f64 * 5.0).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SequenceEval {
    pub frames: usize,
    pub p_mpjpe_mm: f64,
    pub mpjve_mm_per_frame: f64,
    pub mblstd_mm: f64,
    pub pck150_percent: f64,
    pub auc_percent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub fps: f64,
    pub sequences_evaluated: usize,
    pub frames_evaluated: usize,
    pub p_mpjpe_mm: f64,
    pub mpjve_mm_per_frame: f64,
    pub mblstd_mm: f64,
    pub pck150_percent: f64,
    pub auc_percent: f64,
    pub per_sequence: BTreeMap<String, SequenceEval>,
}

/// Mean per-joint position error (mm) after per-frame similarity alignment.
pub fn p_mpjpe(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    check_paired(pred, gt)?;
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        total += procrustes_align(p, g)?.residual;
    }
    Ok(total / pred.len() as f64 * 1000.0)
}

/// Mean per-joint error (mm/frame) of the first temporal differences of the
/// per-frame-aligned prediction against the ground-truth differences.
pub fn mpjve(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    check_paired(pred, gt)?;
    if pred.len() < 2 {
        return Err(Error::Contract("mpjve needs at least 2 frames".into()));
    }
    let aligned: Vec<Vec<f64>> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| procrustes_align(p, g).map(|a| a.aligned))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 1..pred.len() {
        for n in 0..NUM_JOINTS {
            let mut d2 = 0.0;
            for c in 0..3 {
                let dp = aligned[f][n * 3 + c] - aligned[f - 1][n * 3 + c];
                let dg = gt[f][n * 3 + c] - gt[f - 1][n * 3 + c];
                d2 += (dp - dg) * (dp - dg);
            }
            total += d2.sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64 * 1000.0)
}

/// Mean over the 8 limb segments of the population standard deviation (mm)
/// of bone length across a sequence. Prediction-only.
pub fn mblstd(pred: &[Vec<f64>], skel: &SkeletonSpec) -> Result<f64> {
    if pred.len() < 2 {
        return Err(Error::Contract("mblstd needs at least 2 frames".into()));
    }
    let t = pred.len() as f64;
    let mut total = 0.0;
    for &(a, b) in &skel.metric_segments {
        let lengths: Vec<f64> = pred
            .iter()
            .map(|f| {
                ((f[a * 3] - f[b * 3]).powi(2)
                    + (f[a * 3 + 1] - f[b * 3 + 1]).powi(2)
                    + (f[a * 3 + 2] - f[b * 3 + 2]).powi(2))
                .sqrt()
            })
            .collect();
        let mu: f64 = lengths.iter().sum::<f64>() / t;
        let var: f64 = lengths.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / t;
        total += var.sqrt();
    }
    Ok(total / skel.metric_segments.len() as f64 * 1000.0)
}

/// Per-joint errors (mm) after the same alignment as `p_mpjpe`, pooled over
/// all frames.
pub fn aligned_joint_errors_mm(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_paired(pred, gt)?;
    let mut errors = Vec::with_capacity(pred.len() * NUM_JOINTS);
    for (p, g) in pred.iter().zip(gt) {
        let a = procrustes_align(p, g)?;
        for n in 0..NUM_JOINTS {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = a.aligned[n * 3 + c] - g[n * 3 + c];
                d2 += d * d;
            }
            errors.push(d2.sqrt() * 1000.0);
        }
    }
    Ok(errors)
}

/// `(PCK@150mm, AUC over the 5..150 mm grid)` in percent, from pooled
/// aligned per-joint errors.
pub fn pck_auc(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<(f64, f64)> {
    let errors = aligned_joint_errors_mm(pred, gt)?;
    Ok(pck_auc_from_errors(&errors))
}

pub fn pck_auc_from_errors(errors_mm: &[f64]) -> (f64, f64) {
    let n = errors_mm.len() as f64;
    let pck = errors_mm.iter().filter(|&&e| e < PCK_THRESHOLD_MM).count() as f64 / n * 100.0;
    let grid = auc_grid();
    let auc = grid
        .iter()
        .map(|&t| errors_mm.iter().filter(|&&e| e < t).count() as f64 / n * 100.0)
        .sum::<f64>()
        / grid.len() as f64;
    (pck, auc)
}

/// Elementwise mean of two root-centered predictions.
pub fn fuse_predictions(teacher3d: &[f64], student3d: &[f64]) -> Result<Vec<f64>> {
    if teacher3d.len() != student3d.len() {
        return Err(Error::Shape {
            op: "fuse_predictions",
            detail: format!("{} vs {}", teacher3d.len(), student3d.len()),
        });
    }
    Ok(teacher3d.iter().zip(student3d).map(|(a, b)| 0.5 * (a + b)).collect())
}

fn check_paired(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "paired sequences of equal nonzero length required ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != NUM_JOINTS * 3 || g.len() != NUM_JOINTS * 3 {
            return Err(Error::Shape {
                op: "metrics",
                detail: format!("frame sizes {} / {}", p.len(), g.len()),
            });
        }
    }
    Ok(())
}

/// Evaluate matched sequences. `threads` caps worker threads; results are
/// aggregated in input order so the report is identical for any thread
/// count.
pub fn evaluate(
    paired: &[(String, Vec<Vec<f64>>, Vec<Vec<f64>>)],
    fps: f64,
    skel: &SkeletonSpec,
    threads: usize,
) -> Result<EvalReport> {
    let eval_one = |(id, pred, gt): &(String, Vec<Vec<f64>>, Vec<Vec<f64>>)| -> Result<(String, SequenceEval, Vec<f64>)> {
        let errors = aligned_joint_errors_mm(pred, gt)?;
        let (pck, auc) = pck_auc_from_errors(&errors);
        Ok((
            id.clone(),
            SequenceEval {
                frames: pred.len(),
                p_mpjpe_mm: p_mpjpe(pred, gt)?,
                mpjve_mm_per_frame: mpjve(pred, gt)?,
                mblstd_mm: mblstd(pred, skel)?,
                pck150_percent: pck,
                auc_percent: auc,
            },
            errors,
        ))
    };

    let results: Vec<(String, SequenceEval, Vec<f64>)> = if threads <= 1 || paired.len() <= 1 {
        paired.iter().map(eval_one).collect::<Result<_>>()?
    } else {
        let chunk = paired.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = paired
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(eval_one).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(paired.len());
            for h in handles {
                all.extend(h.join().expect("metrics worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };

    let mut per_sequence = BTreeMap::new();
    let mut pooled_errors = Vec::new();
    let mut frames = 0usize;
    let mut p_sum = 0.0;
    let mut v_sum = 0.0;
    let mut v_weight = 0.0;
    let mut bl_sum = 0.0;
    for (id, ev, errors) in results {
        frames += ev.frames;
        p_sum += ev.p_mpjpe_mm * ev.frames as f64;
        v_sum += ev.mpjve_mm_per_frame * (ev.frames - 1) as f64;
        v_weight += (ev.frames - 1) as f64;
        bl_sum += ev.mblstd_mm;
        pooled_errors.extend(errors);
        if per_sequence.insert(id.clone(), ev).is_some() {
            return Err(Error::Schema(format!("duplicate sequence id `{id}`")));
        }
    }
    let (pck, auc) = pck_auc_from_errors(&pooled_errors);
    Ok(EvalReport {
        fps,
        sequences_evaluated: per_sequence.len(),
        frames_evaluated: frames,
        p_mpjpe_mm: p_sum / frames as f64,
        mpjve_mm_per_frame: v_sum / v_weight.max(1.0),
        mblstd_mm: bl_sum / per_sequence.len() as f64,
        pck150_percent: pck,
        auc_percent: auc,
        per_sequence,
    })
}
