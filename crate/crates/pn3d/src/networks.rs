//! Network architectures: shared temporal convolution backbone, per-frame
//! teacher and student heads, and the batchnorm-free temporal discriminator,
//! plus parameter initialization and checkpoint I/O.
//!
//! The backbone is a conv block (kernel 3, dilation 1) followed by one
//! residual block of two conv blocks (dilations 3 and 1) with the shortcut
//! taken from the residual block's input. Same-padding preserves the
//! temporal axis so the heads can emit one prediction per frame.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, Reduce, TensorId};
use crate::container::{Container, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::rng::stream;

pub const BODY_JOINTS: usize = crate::bodymodel::NUM_BODY_JOINTS;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Window length (odd).
    pub t: usize,
    /// Skeleton joints per frame.
    pub n: usize,
    /// Channel width of every conv and FC layer.
    pub channels: usize,
    pub dropout: f64,
    /// Dilations of the three backbone convolutions.
    pub dilations: [usize; 3],
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { t: 9, n: 14, channels: 1024, dropout: 0.25, dilations: [1, 3, 1] }
    }
}

impl NetConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.n
    }

    pub fn rotation_outputs(&self) -> usize {
        BODY_JOINTS * 9
    }

    fn echo(&self) -> String {
        format!(
            "t={} n={} channels={} dropout={} dilations={},{},{}",
            self.t, self.n, self.channels, self.dropout, self.dilations[0], self.dilations[1],
            self.dilations[2]
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.t % 2 == 0 {
            return Err(Error::Config(format!("window length {} must be odd and >= 1", self.t)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// One named parameter or statistics array.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All learnable parameters plus batchnorm running statistics, keyed by
/// dotted names (`bb.*` backbone, `t.*` teacher, `s.*` student, `sja.*`
/// adaptation logits, `d.*` discriminator).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    arrays: BTreeMap<String, NamedArray>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut NamedArray> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.to_string(), NamedArray { shape: shape.to_vec(), data });
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NamedArray)> {
        self.arrays.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    /// FNV-1a over the raw bytes of every array under a name prefix; used to
    /// assert that frozen parameter groups do not move.
    pub fn hash_group(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, arr) in &self.arrays {
            if !name.starts_with(prefix) {
                continue;
            }
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in &arr.data {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Which parameter groups receive gradients (and run in train mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub teacher: bool,
    pub student: bool,
    pub sja: bool,
    pub disc: bool,
}

impl Trainable {
    pub const NONE: Trainable =
        Trainable { backbone: false, teacher: false, student: false, sja: false, disc: false };

    pub fn includes(&self, name: &str) -> bool {
        if name.starts_with("bb.") {
            self.backbone
        } else if name.starts_with("t.") {
            self.teacher
        } else if name.starts_with("s.") {
            self.student
        } else if name.starts_with("sja.") {
            self.sja
        } else if name.starts_with("d.") {
            self.disc
        } else {
            false
        }
    }
}

/// Graph-building context for one training or inference step. Parameters
/// are inserted lazily as leaves; batchnorm running-stat updates accumulate
/// in `bn_updates` and are applied by the caller after the step.
pub struct StepNet<'a> {
    pub g: Graph,
    params: &'a ModelParams,
    pub cfg: NetConfig,
    mode: Mode,
    trainable: Trainable,
    rng: ChaCha8Rng,
    inserted: BTreeMap<String, TensorId>,
    pub bn_updates: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl<'a> StepNet<'a> {
    pub fn new(
        params: &'a ModelParams,
        cfg: &NetConfig,
        mode: Mode,
        trainable: Trainable,
        rng: ChaCha8Rng,
    ) -> Self {
        StepNet {
            g: Graph::new(),
            params,
            cfg: cfg.clone(),
            mode,
            trainable,
            rng,
            inserted: BTreeMap::new(),
            bn_updates: BTreeMap::new(),
        }
    }

    /// Register an existing graph tensor to stand in for a named parameter
    /// (diagnostics: lets finite-difference checks drive one parameter).
    pub fn use_leaf(&mut self, name: &str, id: TensorId) {
        self.inserted.insert(name.to_string(), id);
    }

    /// Insert (or reuse) a named parameter as a graph leaf.
    pub fn p(&mut self, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.inserted.get(name) {
            return Ok(id);
        }
        let arr = self.params.get(name)?;
        let rg = self.trainable.includes(name);
        let id = self.g.tensor(&arr.shape, arr.data.clone(), rg);
        self.inserted.insert(name.to_string(), id);
        Ok(id)
    }

    /// Mode for a layer belonging to a parameter group: frozen groups run in
    /// eval mode so their statistics and dropout behavior do not drift.
    fn group_mode(&self, name: &str) -> Mode {
        if self.mode == Mode::Eval || !self.trainable.includes(name) {
            Mode::Eval
        } else {
            Mode::Train
        }
    }

    fn bn(&mut self, x: TensorId, prefix: &str, mode: Mode) -> Result<TensorId> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        // Read through any update already produced this step so a second
        // forward pass sees sequentially updated statistics.
        let (rm, rv) = match self.bn_updates.get(prefix) {
            Some((m, v)) => (m.clone(), v.clone()),
            None => (
                self.params.get(&format!("{prefix}.running_mean"))?.data.clone(),
                self.params.get(&format!("{prefix}.running_var"))?.data.clone(),
            ),
        };
        let (y, update) = self.g.batchnorm(x, gamma, beta, &rm, &rv, mode, 1e-5, 0.1)?;
        if let Some((m, v)) = update {
            self.bn_updates.insert(prefix.to_string(), (m, v));
        }
        Ok(y)
    }

    fn dropout(&mut self, x: TensorId, mode: Mode) -> Result<TensorId> {
        let p = self.cfg.dropout;
        self.g.dropout(x, p, mode, &mut self.rng)
    }

    /// conv -> bias -> [batchnorm] -> relu -> dropout.
    fn conv_block(
        &mut self,
        x: TensorId,
        prefix: &str,
        bn_prefix: Option<&str>,
        dilation: usize,
        mode: Mode,
    ) -> Result<TensorId> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let mut h = self.g.conv1d(x, w, dilation)?;
        h = self.g.channel_bias(h, b)?;
        if let Some(bnp) = bn_prefix {
            h = self.bn(h, bnp, mode)?;
        }
        h = self.g.relu(h);
        self.dropout(h, mode)
    }

    /// Residual FC block: linear -> bn -> relu, twice, with the shortcut
    /// from the block input.
    fn fc_block(&mut self, x: TensorId, prefix: &str, mode: Mode) -> Result<TensorId> {
        let w1 = self.p(&format!("{prefix}.fc1.w"))?;
        let b1 = self.p(&format!("{prefix}.fc1.b"))?;
        let mut h = self.g.linear(x, w1, b1)?;
        h = self.bn(h, &format!("{prefix}.bn1"), mode)?;
        h = self.g.relu(h);
        let w2 = self.p(&format!("{prefix}.fc2.w"))?;
        let b2 = self.p(&format!("{prefix}.fc2.b"))?;
        h = self.g.linear(h, w2, b2)?;
        h = self.bn(h, &format!("{prefix}.bn2"), mode)?;
        h = self.g.relu(h);
        self.g.add(h, x)
    }

    /// Temporal backbone: `[B, 2N, T] -> [B, C, T]`.
    pub fn backbone(&mut self, x2d: TensorId) -> Result<TensorId> {
        let shape = self.g.shape(x2d).to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.input_channels() || shape[2] != self.cfg.t {
            return Err(Error::Shape {
                op: "backbone",
                detail: format!(
                    "input {:?}, expected [B,{},{}]",
                    shape,
                    self.cfg.input_channels(),
                    self.cfg.t
                ),
            });
        }
        let mode = self.group_mode("bb.");
        let d = self.cfg.dilations;
        let h = self.conv_block(x2d, "bb.conv1", Some("bb.bn1"), d[0], mode)?;
        let r = self.conv_block(h, "bb.conv2", Some("bb.bn2"), d[1], mode)?;
        let r = self.conv_block(r, "bb.conv3", Some("bb.bn3"), d[2], mode)?;
        self.g.add(r, h)
    }

    /// Teacher head: per-frame depth offsets `[B, C, T] -> [B, T, N]`.
    pub fn teacher(&mut self, features: TensorId) -> Result<TensorId> {
        let (b, c, t) = {
            let s = self.g.shape(features);
            (s[0], s[1], s[2])
        };
        let mode = self.group_mode("t.");
        let y = self.g.swap_axes_1_2(features)?; // [B,T,C]
        let y = self.g.reshape(y, &[b * t, c])?;
        let y = self.fc_block(y, "t.blk1", mode)?;
        let w = self.p("t.out.w")?;
        let bias = self.p("t.out.b")?;
        let y = self.g.linear(y, w, bias)?;
        self.g.reshape(y, &[b, t, self.cfg.n])
    }

    /// Student head: per-frame rotations (orthonormalized) and per-window
    /// betas. `[B, C, T] -> ([B, T, K, 3, 3], [B, 10])`.
    pub fn student(&mut self, features: TensorId) -> Result<(TensorId, TensorId)> {
        let (b, c, t) = {
            let s = self.g.shape(features);
            (s[0], s[1], s[2])
        };
        let mode = self.group_mode("s.");
        let y = self.g.swap_axes_1_2(features)?;
        let mut y = self.g.reshape(y, &[b * t, c])?;
        for blk in 1..=4 {
            y = self.fc_block(y, &format!("s.blk{blk}"), mode)?;
        }
        let rw = self.p("s.rot.w")?;
        let rb = self.p("s.rot.b")?;
        let raw = self.g.linear(y, rw, rb)?; // [B*T, K*9]
        let raw = self.g.reshape(raw, &[b, t, BODY_JOINTS, 3, 3])?;
        let rots = self.g.orthonormalize_blocks(raw)?;

        let trunk = self.g.reshape(y, &[b, t, c])?;
        let pooled = self.g.reduce(trunk, Reduce::Mean, Some(1))?; // [B, C]
        let bw = self.p("s.beta.w")?;
        let bb = self.p("s.beta.b")?;
        let betas = self.g.linear(pooled, bw, bb)?;
        Ok((rots, betas))
    }

    /// Discriminator: backbone clone without batchnorm, temporal mean, one
    /// logit per window. `[B, 2N, T] -> [B]`.
    pub fn discriminator(&mut self, window2d: TensorId) -> Result<TensorId> {
        let shape = self.g.shape(window2d).to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.input_channels() {
            return Err(Error::Shape {
                op: "discriminator",
                detail: format!("input {:?}, expected [B,{},T]", shape, self.cfg.input_channels()),
            });
        }
        let bsz = shape[0];
        let mode = self.group_mode("d.");
        let d = self.cfg.dilations;
        let h = self.conv_block(window2d, "d.conv1", None, d[0], mode)?;
        let r = self.conv_block(h, "d.conv2", None, d[1], mode)?;
        let r = self.conv_block(r, "d.conv3", None, d[2], mode)?;
        let feat = self.g.add(r, h)?;
        let pooled = self.g.reduce(feat, Reduce::Mean, Some(2))?; // [B, C]
        let w = self.p("d.out.w")?;
        let b = self.p("d.out.b")?;
        let logits = self.g.linear(pooled, w, b)?; // [B,1]
        self.g.reshape(logits, &[bsz])
    }

    /// Gradients of every trainable parameter inserted into this graph.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.inserted {
            if !self.trainable.includes(name) {
                continue;
            }
            if let Some(g) = self.g.grad(id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

// ── initialization ──────────────────────────────────────────────────

fn uniform_init(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect()
}

fn init_linear(p: &mut ModelParams, rng: &mut ChaCha8Rng, prefix: &str, f_out: usize, f_in: usize) {
    let a = 1.0 / (f_in as f64).sqrt();
    p.insert(&format!("{prefix}.w"), &[f_out, f_in], uniform_init(rng, f_out * f_in, a));
    p.insert(&format!("{prefix}.b"), &[f_out], vec![0.0; f_out]);
}

fn init_conv(p: &mut ModelParams, rng: &mut ChaCha8Rng, prefix: &str, c_out: usize, c_in: usize, ks: usize) {
    let a = 1.0 / ((c_in * ks) as f64).sqrt();
    p.insert(&format!("{prefix}.w"), &[c_out, c_in, ks], uniform_init(rng, c_out * c_in * ks, a));
    p.insert(&format!("{prefix}.b"), &[c_out], vec![0.0; c_out]);
}

fn init_bn(p: &mut ModelParams, prefix: &str, c: usize) {
    p.insert(&format!("{prefix}.gamma"), &[c], vec![1.0; c]);
    p.insert(&format!("{prefix}.beta"), &[c], vec![0.0; c]);
    p.insert(&format!("{prefix}.running_mean"), &[c], vec![0.0; c]);
    p.insert(&format!("{prefix}.running_var"), &[c], vec![1.0; c]);
}

fn init_fc_block(p: &mut ModelParams, rng: &mut ChaCha8Rng, prefix: &str, c: usize) {
    init_linear(p, rng, &format!("{prefix}.fc1"), c, c);
    init_bn(p, &format!("{prefix}.bn1"), c);
    init_linear(p, rng, &format!("{prefix}.fc2"), c, c);
    init_bn(p, &format!("{prefix}.bn2"), c);
}

/// Fan-in-scaled uniform weights, zero biases; the student rotation head is
/// biased toward identity blocks so fresh rotations start near the rest
/// pose.
pub fn init_params(rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let c = cfg.channels;
    let in_ch = cfg.input_channels();
    let mut p = ModelParams::default();

    init_conv(&mut p, rng, "bb.conv1", c, in_ch, 3);
    init_bn(&mut p, "bb.bn1", c);
    init_conv(&mut p, rng, "bb.conv2", c, c, 3);
    init_bn(&mut p, "bb.bn2", c);
    init_conv(&mut p, rng, "bb.conv3", c, c, 3);
    init_bn(&mut p, "bb.bn3", c);

    init_fc_block(&mut p, rng, "t.blk1", c);
    init_linear(&mut p, rng, "t.out", cfg.n, c);

    for blk in 1..=4 {
        init_fc_block(&mut p, rng, &format!("s.blk{blk}"), c);
    }
    let rot_out = cfg.rotation_outputs();
    let a = 0.01 / (c as f64).sqrt();
    p.insert("s.rot.w", &[rot_out, c], uniform_init(rng, rot_out * c, a));
    let mut rot_bias = vec![0.0; rot_out];
    for k in 0..BODY_JOINTS {
        rot_bias[k * 9] = 1.0;
        rot_bias[k * 9 + 4] = 1.0;
        rot_bias[k * 9 + 8] = 1.0;
    }
    p.insert("s.rot.b", &[rot_out], rot_bias);
    init_linear(&mut p, rng, "s.beta", 10, c);

    init_conv(&mut p, rng, "d.conv1", c, in_ch, 3);
    init_conv(&mut p, rng, "d.conv2", c, c, 3);
    init_conv(&mut p, rng, "d.conv3", c, c, 3);
    init_linear(&mut p, rng, "d.out", 1, c);

    Ok(p)
}

/// Convenience: deterministic init from a master seed.
pub fn init_params_seeded(seed: u64, cfg: &NetConfig) -> Result<ModelParams> {
    let mut rng = stream(seed, "init", &[]);
    init_params(&mut rng, cfg)
}

// ── checkpoints ─────────────────────────────────────────────────────

/// A saved training state: parameters, architecture echo, flat-config echo,
/// master seed and the bitmask of completed stages.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub net_cfg: NetConfig,
    pub config_echo: String,
    pub seed: u64,
    pub stages_done: u8,
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut c = Container::new();
    for (name, arr) in ck.params.iter() {
        c.put_f64(name, &arr.shape, arr.data.clone());
    }
    c.put_bytes("meta.netcfg", ck.net_cfg.echo().into_bytes());
    c.put_bytes("meta.config", ck.config_echo.clone().into_bytes());
    c.put_bytes("meta.seed", ck.seed.to_le_bytes().to_vec());
    c.put_bytes("meta.stages_done", vec![ck.stages_done]);
    c.write(path, CHECKPOINT_MAGIC)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::read(path, CHECKPOINT_MAGIC)?;
    let netcfg_echo = String::from_utf8(c.bytes("meta.netcfg")?.to_vec())
        .map_err(|_| Error::Schema("netcfg echo not UTF-8".into()))?;
    let net_cfg = parse_netcfg_echo(&netcfg_echo)?;
    let config_echo = String::from_utf8(c.bytes("meta.config")?.to_vec())
        .map_err(|_| Error::Schema("config echo not UTF-8".into()))?;
    let seed_bytes = c.bytes("meta.seed")?;
    if seed_bytes.len() != 8 {
        return Err(Error::Schema("seed record malformed".into()));
    }
    let seed = u64::from_le_bytes(seed_bytes.try_into().unwrap());
    let stages_done = c.bytes("meta.stages_done")?.first().copied().unwrap_or(0);

    let mut params = ModelParams::default();
    for (name, payload) in &c.arrays {
        if name.starts_with("meta.") {
            continue;
        }
        match payload {
            crate::container::Payload::F64 { shape, data } => {
                params.insert(name, shape, data.clone());
            }
            crate::container::Payload::Bytes(_) => {
                return Err(Error::Schema(format!("unexpected byte array `{name}`")));
            }
        }
    }
    Ok(Checkpoint { params, net_cfg, config_echo, seed, stages_done })
}

/// Loud mismatch check when restoring under a configured architecture.
pub fn require_netcfg(ck: &Checkpoint, cfg: &NetConfig) -> Result<()> {
    if &ck.net_cfg != cfg {
        return Err(Error::Config(format!(
            "checkpoint architecture `{}` does not match configured `{}`",
            ck.net_cfg.echo(),
            cfg.echo()
        )));
    }
    Ok(())
}

fn parse_netcfg_echo(s: &str) -> Result<NetConfig> {
    let mut cfg = NetConfig::default();
    for tok in s.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Schema(format!("bad netcfg token `{tok}`")))?;
        match k {
            "t" => cfg.t = v.parse().map_err(|_| Error::Schema(format!("bad t `{v}`")))?,
            "n" => cfg.n = v.parse().map_err(|_| Error::Schema(format!("bad n `{v}`")))?,
            "channels" => {
                cfg.channels = v.parse().map_err(|_| Error::Schema(format!("bad channels `{v}`")))?
            }
            "dropout" => {
                cfg.dropout = v.parse().map_err(|_| Error::Schema(format!("bad dropout `{v}`")))?
            }
            "dilations" => {
                let parts: Vec<usize> =
                    v.split(',').map(|x| x.parse().unwrap_or(0)).collect();
                if parts.len() != 3 || parts.contains(&0) {
                    return Err(Error::Schema(format!("bad dilations `{v}`")));
                }
                cfg.dilations = [parts[0], parts[1], parts[2]];
            }
            other => return Err(Error::Schema(format!("unknown netcfg key `{other}`"))),
        }
    }
    Ok(cfg)
}

/// Flatten a batch of `[T,N,2]` windows into the `[B,2N,T]` input layout
/// without recording a graph op (for constant inputs).
pub fn pack_x2d(windows: &[&[f64]], t: usize, n: usize) -> Vec<f64> {
    let c = 2 * n;
    let mut out = vec![0.0; windows.len() * c * t];
    for (b, win) in windows.iter().enumerate() {
        assert_eq!(win.len(), t * n * 2);
        for ti in 0..t {
            for ji in 0..n {
                for d in 0..2 {
                    out[(b * c + 2 * ji + d) * t + ti] = win[(ti * n + ji) * 2 + d];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
