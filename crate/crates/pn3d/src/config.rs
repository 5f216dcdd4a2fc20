//! Flat `key = value` configuration with dotted keys, the authoritative key
//! list, and the run manifest. Flags override file values; the effective
//! configuration is echoed into the manifest and checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{EpochLog, SjaMode, TrainConfig};

/// Parse flat `key = value` text. `#` starts a comment; blank lines ignored.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            detail: format!("expected `key = value`, got `{raw}`"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn set_f64(dst: &mut f64, key: &str, v: &str) -> Result<()> {
    *dst = v.parse().map_err(|_| Error::Config(format!("{key}: bad float `{v}`")))?;
    Ok(())
}

fn set_usize(dst: &mut usize, key: &str, v: &str) -> Result<()> {
    *dst = v.parse().map_err(|_| Error::Config(format!("{key}: bad integer `{v}`")))?;
    Ok(())
}

/// Apply flat entries onto a config. Unknown keys are errors so typos fail
/// loudly.
pub fn apply_flat(cfg: &mut TrainConfig, map: &BTreeMap<String, String>) -> Result<()> {
    for (k, v) in map {
        match k.as_str() {
            "net.t" => set_usize(&mut cfg.net.t, k, v)?,
            "net.n" => set_usize(&mut cfg.net.n, k, v)?,
            "net.channels" => set_usize(&mut cfg.net.channels, k, v)?,
            "net.dropout" => set_f64(&mut cfg.net.dropout, k, v)?,
            "net.dilations" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|x| x.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("net.dilations: bad list `{v}`")))?;
                if parts.len() != 3 {
                    return Err(Error::Config("net.dilations needs three entries".into()));
                }
                cfg.net.dilations = [parts[0], parts[1], parts[2]];
            }
            "train.batch_size" => set_usize(&mut cfg.batch_size, k, v)?,
            "train.lr" => set_f64(&mut cfg.lr, k, v)?,
            "train.adam_beta1" => set_f64(&mut cfg.adam_beta1, k, v)?,
            "train.adam_beta2" => set_f64(&mut cfg.adam_beta2, k, v)?,
            "train.adam_eps" => set_f64(&mut cfg.adam_eps, k, v)?,
            "train.epochs_stage1" => set_usize(&mut cfg.epochs[0], k, v)?,
            "train.epochs_stage2" => set_usize(&mut cfg.epochs[1], k, v)?,
            "train.epochs_stage3" => set_usize(&mut cfg.epochs[2], k, v)?,
            "train.epochs_stage4" => set_usize(&mut cfg.epochs[3], k, v)?,
            "train.seed" => {
                cfg.seed = v.parse().map_err(|_| Error::Config(format!("train.seed: bad integer `{v}`")))?
            }
            "train.disc_steps" => set_usize(&mut cfg.disc_steps, k, v)?,
            "train.adversarial" => {
                cfg.adversarial = match v.as_str() {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(Error::Config(format!("train.adversarial: bad bool `{v}`"))),
                }
            }
            "train.rotations_per_window" => set_usize(&mut cfg.rotations_per_window, k, v)?,
            "train.stride" => set_usize(&mut cfg.stride, k, v)?,
            "train.sja_eps" => set_f64(&mut cfg.sja_eps, k, v)?,
            "train.sja_mode" => {
                cfg.sja_mode = match v.as_str() {
                    "convex" => SjaMode::Convex,
                    "linear" => SjaMode::Linear,
                    _ => return Err(Error::Config(format!("train.sja_mode: `{v}` is not convex|linear"))),
                }
            }
            "train.distill_from_gt" => {
                cfg.distill_from_gt = match v.as_str() {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(Error::Config(format!("train.distill_from_gt: bad bool `{v}`"))),
                }
            }
            "loss.mss" => set_f64(&mut cfg.weights.mss, k, v)?,
            "loss.tc" => set_f64(&mut cfg.weights.tc, k, v)?,
            "loss.bl" => set_f64(&mut cfg.weights.bl, k, v)?,
            "loss.rot" => set_f64(&mut cfg.weights.rot, k, v)?,
            "loss.beta" => set_f64(&mut cfg.weights.beta, k, v)?,
            "loss.student" => set_f64(&mut cfg.weights.student, k, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
    }
    Ok(())
}

/// Canonical flat echo of the effective configuration (sorted keys).
pub fn to_flat(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let mut push = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    push("loss.beta", cfg.weights.beta.to_string());
    push("loss.bl", cfg.weights.bl.to_string());
    push("loss.mss", cfg.weights.mss.to_string());
    push("loss.rot", cfg.weights.rot.to_string());
    push("loss.student", cfg.weights.student.to_string());
    push("loss.tc", cfg.weights.tc.to_string());
    push("net.channels", cfg.net.channels.to_string());
    push(
        "net.dilations",
        format!("{},{},{}", cfg.net.dilations[0], cfg.net.dilations[1], cfg.net.dilations[2]),
    );
    push("net.dropout", cfg.net.dropout.to_string());
    push("net.n", cfg.net.n.to_string());
    push("net.t", cfg.net.t.to_string());
    push("train.adam_beta1", cfg.adam_beta1.to_string());
    push("train.adam_beta2", cfg.adam_beta2.to_string());
    push("train.adam_eps", cfg.adam_eps.to_string());
    push("train.adversarial", cfg.adversarial.to_string());
    push("train.batch_size", cfg.batch_size.to_string());
    push("train.disc_steps", cfg.disc_steps.to_string());
    push("train.distill_from_gt", cfg.distill_from_gt.to_string());
    push("train.epochs_stage1", cfg.epochs[0].to_string());
    push("train.epochs_stage2", cfg.epochs[1].to_string());
    push("train.epochs_stage3", cfg.epochs[2].to_string());
    push("train.epochs_stage4", cfg.epochs[3].to_string());
    push("train.lr", cfg.lr.to_string());
    push("train.rotations_per_window", cfg.rotations_per_window.to_string());
    push("train.seed", cfg.seed.to_string());
    push("train.sja_eps", cfg.sja_eps.to_string());
    push(
        "train.sja_mode",
        match cfg.sja_mode {
            SjaMode::Convex => "convex".to_string(),
            SjaMode::Linear => "linear".to_string(),
        },
    );
    push("train.stride", cfg.stride.to_string());
    out
}

/// Load a config file (when given) and apply `--set key=value` overrides.
pub fn build_config(
    file: Option<&Path>,
    overrides: &[String],
    seed_flag: Option<u64>,
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let map = parse_flat(&text)?;
        apply_flat(&mut cfg, &map)?;
    }
    let mut over = BTreeMap::new();
    for entry in overrides {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects key=value, got `{entry}`")))?;
        over.insert(k.trim().to_string(), v.trim().to_string());
    }
    apply_flat(&mut cfg, &over)?;
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Stage completion record for the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub epochs: usize,
    pub final_epoch: Option<EpochLog>,
}

/// Reproducibility manifest: emitted before training begins, rewritten with
/// an appended record after each stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub data_path: String,
    pub model_path: String,
    pub out_dir: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(cfg: &TrainConfig, data: &Path, model: &Path, out: &Path) -> Self {
        RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config: parse_flat(&to_flat(cfg)).expect("canonical echo parses"),
            data_path: data.display().to_string(),
            model_path: model.display().to_string(),
            out_dir: out.display().to_string(),
            stages: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Schema(format!("manifest: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip_preserves_config() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.00025;
        cfg.net.channels = 128;
        cfg.weights.rot = 0.5;
        cfg.epochs = [5, 6, 7, 8];
        let echo = to_flat(&cfg);
        let map = parse_flat(&echo).unwrap();
        let mut back = TrainConfig::default();
        apply_flat(&mut back, &map).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let map = parse_flat("# comment\ntrain.lr = 0.001 # trailing\n\n").unwrap();
        assert_eq!(map.get("train.lr").unwrap(), "0.001");
        let mut cfg = TrainConfig::default();
        apply_flat(&mut cfg, &map).unwrap();
        assert_eq!(cfg.lr, 0.001);

        let bad = parse_flat("nonsense.key = 3\n").unwrap();
        assert!(apply_flat(&mut cfg, &bad).is_err());
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.txt");
        std::fs::write(&p, "train.lr = 0.001\ntrain.batch_size = 32\n").unwrap();
        let cfg = build_config(Some(&p), &["train.lr=0.005".to_string()], Some(77)).unwrap();
        assert_eq!(cfg.lr, 0.005);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.seed, 77);
    }
}
