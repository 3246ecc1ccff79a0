//! Neural-network layers on top of the autodiff graph: parameter store,
//! residual CNN encoder, LSTM cell, Adam with linear warm-up, and the MMCK
//! checkpoint format.
//!
//! MMCK layout: magic `MMCK`, version u32 LE, block count u32 LE, then per
//! parameter: name length u32 LE, name bytes, dtype tag u8 (0 = f32,
//! 1 = f64), ndim u32 LE, dims u32 LE each, raw little-endian values.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

pub const MMCK_MAGIC: &[u8; 4] = b"MMCK";
pub const MMCK_VERSION: u32 = 1;

/// Named parameters in insertion order. Order is part of the training
/// determinism contract: the optimizer walks entries by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    arrays: Vec<ArrayD<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), arrays: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, array: ArrayD<F>) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.arrays.push(array);
        self.arrays.len() - 1
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn array(&self, i: usize) -> &ArrayD<F> {
        &self.arrays[i]
    }

    pub fn array_mut(&mut self, i: usize) -> &mut ArrayD<F> {
        &mut self.arrays[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.index_of(name).map(|i| &self.arrays[i])
    }

    pub fn total_params(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.arrays.iter())
    }

    /// Create one graph leaf per parameter; index-aligned with the store.
    pub fn bind(&self, graph: &mut Graph<F>) -> Binding {
        let vars = self.arrays.iter().map(|a| graph.leaf(a.clone())).collect();
        Binding { vars }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(MMCK_MAGIC)?;
        w.write_all(&MMCK_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, arr) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[F::DTYPE_TAG])?;
            w.write_all(&(arr.ndim() as u32).to_le_bytes())?;
            for &d in arr.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            match F::DTYPE_TAG {
                0 => {
                    for &v in arr.iter() {
                        w.write_all(&(v.f64() as f32).to_le_bytes())?;
                    }
                }
                _ => {
                    for &v in arr.iter() {
                        w.write_all(&v.f64().to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::checkpoint(format!("cannot open {}: {e}", path.as_ref().display())))?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::checkpoint(format!("short file: {e}")))?;
        if &magic != MMCK_MAGIC {
            return Err(Error::checkpoint("bad magic, expected MMCK"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|e| Error::checkpoint(e.to_string()))?;
        let version = u32::from_le_bytes(u32buf);
        if version != MMCK_VERSION {
            return Err(Error::checkpoint(format!("unsupported version {version}")));
        }
        r.read_exact(&mut u32buf).map_err(|e| Error::checkpoint(e.to_string()))?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            r.read_exact(&mut u32buf).map_err(|e| Error::checkpoint(e.to_string()))?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(|e| Error::checkpoint(e.to_string()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::checkpoint(format!("bad name: {e}")))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag).map_err(|e| Error::checkpoint(e.to_string()))?;
            r.read_exact(&mut u32buf).map_err(|e| Error::checkpoint(e.to_string()))?;
            let ndim = u32::from_le_bytes(u32buf) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut u32buf).map_err(|e| Error::checkpoint(e.to_string()))?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            match tag[0] {
                0 => {
                    let mut buf = [0u8; 4];
                    for _ in 0..n {
                        r.read_exact(&mut buf).map_err(|e| Error::checkpoint(e.to_string()))?;
                        values.push(F::fr(f32::from_le_bytes(buf) as f64));
                    }
                }
                1 => {
                    let mut buf = [0u8; 8];
                    for _ in 0..n {
                        r.read_exact(&mut buf).map_err(|e| Error::checkpoint(e.to_string()))?;
                        values.push(F::fr(f64::from_le_bytes(buf)));
                    }
                }
                t => return Err(Error::checkpoint(format!("unknown dtype tag {t}"))),
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
                .map_err(|e| Error::checkpoint(format!("bad block shape: {e}")))?;
            store.add(name, arr);
        }
        Ok(store)
    }
}

/// Graph leaves for every parameter in a store, index-aligned.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

/// Helper for forward passes: look up a parameter leaf by name.
pub struct BoundParams<'a, F: Scalar> {
    pub store: &'a ParamStore<F>,
    pub binding: &'a Binding,
}

impl<'a, F: Scalar> BoundParams<'a, F> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .index_of(name)
            .map(|i| self.binding.var(i))
            .ok_or_else(|| Error::checkpoint(format!("missing parameter '{name}'")))
    }
}

// ---- initialization ----

fn uniform_array<F: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::fr(rng.gen_range(-bound..bound)))
}

/// He-style fan-in-scaled uniform init for conv/dense weights.
fn he_uniform<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    uniform_array(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Plain 1/sqrt(fan_in) uniform, used for the LSTM weights.
fn scaled_uniform<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    uniform_array(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

// ---- encoder ----

/// Residual CNN encoder configuration. The default mirrors a slimmed-down
/// standard residual network: stride-2 stem plus max pool, then stages of
/// 3x3 residual blocks, global average pooling and a dense map to `out_dim`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            stage_widths: vec![32, 64, 128, 256],
            blocks_per_stage: vec![2, 2, 2, 2],
            out_dim: 512,
        }
    }
}

impl EncoderConfig {
    /// Small preset for desk-scale experiments and tests.
    pub fn tiny(in_channels: usize, out_dim: usize) -> Self {
        EncoderConfig {
            in_channels,
            stage_widths: vec![8, 16, 32],
            blocks_per_stage: vec![1, 1, 1],
            out_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(Error::argument("stage_widths and blocks_per_stage must be non-empty and equal length"));
        }
        if self.in_channels == 0 || self.out_dim == 0 {
            return Err(Error::argument("in_channels and out_dim must be positive"));
        }
        Ok(())
    }
}

fn conv_init<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    o: usize,
    c: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) {
    store.add(format!("{prefix}.w"), he_uniform(&[o, c, k, k], c * k * k, rng));
    store.add(format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[o])));
}

fn norm_init<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, c: usize) {
    store.add(format!("{prefix}.gamma"), ArrayD::from_elem(IxDyn(&[c]), F::one()));
    store.add(format!("{prefix}.beta"), ArrayD::zeros(IxDyn(&[c])));
}

fn dense_init<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) {
    store.add(format!("{prefix}.w"), he_uniform(&[d_in, d_out], d_in, rng));
    store.add(format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[d_out])));
}

/// Register all encoder parameters under `prefix` (e.g. "enc").
pub fn encoder_init<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) {
    let w0 = cfg.stage_widths[0];
    conv_init(store, &format!("{prefix}.stem"), w0, cfg.in_channels, 7, rng);
    norm_init(store, &format!("{prefix}.stem_norm"), w0);
    let mut c_in = w0;
    for (si, (&width, &blocks)) in
        cfg.stage_widths.iter().zip(cfg.blocks_per_stage.iter()).enumerate()
    {
        for bi in 0..blocks {
            let p = format!("{prefix}.s{si}b{bi}");
            let downsample = si > 0 && bi == 0;
            conv_init(store, &format!("{p}.c1"), width, c_in, 3, rng);
            norm_init(store, &format!("{p}.n1"), width);
            conv_init(store, &format!("{p}.c2"), width, width, 3, rng);
            norm_init(store, &format!("{p}.n2"), width);
            if downsample || c_in != width {
                conv_init(store, &format!("{p}.proj"), width, c_in, 1, rng);
            }
            c_in = width;
        }
    }
    dense_init(store, &format!("{prefix}.fc"), c_in, cfg.out_dim, rng);
}

fn conv_norm_relu<F: Scalar>(
    g: &mut Graph<F>,
    params: &BoundParams<F>,
    prefix: &str,
    norm_prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = params.var(&format!("{prefix}.w"))?;
    let b = params.var(&format!("{prefix}.b"))?;
    let y = g.conv2d(x, w, b, stride, pad)?;
    let gamma = params.var(&format!("{norm_prefix}.gamma"))?;
    let beta = params.var(&format!("{norm_prefix}.beta"))?;
    let y = g.channel_norm(y, gamma, beta)?;
    Ok(g.relu(y))
}

/// Encoder forward: (B, C, H, W) -> (B, out_dim).
pub fn encoder_forward<F: Scalar>(
    g: &mut Graph<F>,
    params: &BoundParams<F>,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
) -> Result<Var> {
    let in_c = g.value(x).shape().get(1).copied().unwrap_or(0);
    if in_c != cfg.in_channels {
        return Err(Error::shape(format!(
            "encoder expects {} input channels, got {in_c}",
            cfg.in_channels
        )));
    }
    let mut h = conv_norm_relu(g, params, &format!("{prefix}.stem"), &format!("{prefix}.stem_norm"), x, 2, 3)?;
    h = g.maxpool2d(h, 2, 2)?;
    let mut c_in = cfg.stage_widths[0];
    for (si, (&width, &blocks)) in
        cfg.stage_widths.iter().zip(cfg.blocks_per_stage.iter()).enumerate()
    {
        for bi in 0..blocks {
            let p = format!("{prefix}.s{si}b{bi}");
            let downsample = si > 0 && bi == 0;
            let stride = if downsample { 2 } else { 1 };
            let branch = conv_norm_relu(g, params, &format!("{p}.c1"), &format!("{p}.n1"), h, stride, 1)?;
            let w2 = params.var(&format!("{p}.c2.w"))?;
            let b2 = params.var(&format!("{p}.c2.b"))?;
            let branch = g.conv2d(branch, w2, b2, 1, 1)?;
            let gamma2 = params.var(&format!("{p}.n2.gamma"))?;
            let beta2 = params.var(&format!("{p}.n2.beta"))?;
            let branch = g.channel_norm(branch, gamma2, beta2)?;
            let skip = if downsample || c_in != width {
                let pw = params.var(&format!("{p}.proj.w"))?;
                let pb = params.var(&format!("{p}.proj.b"))?;
                g.conv2d(h, pw, pb, stride, 0)?
            } else {
                h
            };
            let sum = g.add(branch, skip)?;
            h = g.relu(sum);
            c_in = width;
        }
    }
    let pooled = g.global_avg_pool(h)?;
    let w = params.var(&format!("{prefix}.fc.w"))?;
    let b = params.var(&format!("{prefix}.fc.b"))?;
    g.dense(pooled, w, b)
}

// ---- MLP helpers (projection head, prediction head) ----

pub fn mlp2_init<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) {
    dense_init(store, &format!("{prefix}.l1"), d_in, hidden, rng);
    dense_init(store, &format!("{prefix}.l2"), hidden, d_out, rng);
}

/// Two-layer MLP with ReLU after the first layer.
pub fn mlp2_forward<F: Scalar>(
    g: &mut Graph<F>,
    params: &BoundParams<F>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w1 = params.var(&format!("{prefix}.l1.w"))?;
    let b1 = params.var(&format!("{prefix}.l1.b"))?;
    let h = g.dense(x, w1, b1)?;
    let h = g.relu(h);
    let w2 = params.var(&format!("{prefix}.l2.w"))?;
    let b2 = params.var(&format!("{prefix}.l2.b"))?;
    g.dense(h, w2, b2)
}

// ---- LSTM cell ----

/// Register LSTM cell parameters: per gate (i, f, g, o) an input map, a
/// recurrent map and a bias.
pub fn lstm_init<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    rng: &mut ChaCha8Rng,
) {
    for gate in ["i", "f", "g", "o"] {
        store.add(format!("{prefix}.wx_{gate}"), scaled_uniform(&[d_in, d_hidden], d_in, rng));
        store.add(format!("{prefix}.wh_{gate}"), scaled_uniform(&[d_hidden, d_hidden], d_hidden, rng));
        store.add(format!("{prefix}.b_{gate}"), ArrayD::zeros(IxDyn(&[d_hidden])));
    }
}

/// Standard gated update: returns (h_t, c_t), both (B, d_hidden).
pub fn lstm_cell<F: Scalar>(
    g: &mut Graph<F>,
    params: &BoundParams<F>,
    prefix: &str,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let gate = |g: &mut Graph<F>, name: &str| -> Result<Var> {
        let wx = params.var(&format!("{prefix}.wx_{name}"))?;
        let wh = params.var(&format!("{prefix}.wh_{name}"))?;
        let b = params.var(&format!("{prefix}.b_{name}"))?;
        let a = g.matmul(x_t, wx)?;
        let r = g.matmul(h_prev, wh)?;
        let s = g.add(a, r)?;
        g.add_rowvec(s, b)
    };
    let i_pre = gate(g, "i")?;
    let i = g.sigmoid(i_pre);
    let f_pre = gate(g, "f")?;
    let f = g.sigmoid(f_pre);
    let g_pre = gate(g, "g")?;
    let cand = g.tanh(g_pre);
    let o_pre = gate(g, "o")?;
    let o = g.sigmoid(o_pre);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c_t = g.add(keep, write)?;
    let c_act = g.tanh(c_t);
    let h_t = g.mul(o, c_act)?;
    Ok((h_t, c_t))
}

// ---- optimizer ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    Constant,
    /// Linear ramp: factor (e+1)/warmup_epochs for e < warmup_epochs, 1 after.
    LinearWarmup { warmup_epochs: usize },
}

impl Schedule {
    pub fn factor(&self, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::LinearWarmup { warmup_epochs } => {
                if warmup_epochs == 0 || epoch >= warmup_epochs {
                    1.0
                } else {
                    (epoch + 1) as f64 / warmup_epochs as f64
                }
            }
        }
    }
}

/// Adam with bias correction. Parameters whose index is not marked trainable
/// are left bitwise untouched.
pub struct Adam<F: Scalar> {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    trainable: Vec<bool>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, base_lr: f64, schedule: Schedule, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), store.len());
        let m = (0..store.len()).map(|i| ArrayD::zeros(store.array(i).raw_dim())).collect();
        let v = (0..store.len()).map(|i| ArrayD::zeros(store.array(i).raw_dim())).collect();
        Adam { base_lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, schedule, step: 0, m, v, trainable }
    }

    pub fn all_trainable(store: &ParamStore<F>, base_lr: f64, schedule: Schedule) -> Self {
        let mask = vec![true; store.len()];
        Self::new(store, base_lr, schedule, mask)
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn with_frozen_prefix(store: &ParamStore<F>, base_lr: f64, schedule: Schedule, prefix: &str) -> Self {
        let mask = (0..store.len()).map(|i| !store.name(i).starts_with(prefix)).collect();
        Self::new(store, base_lr, schedule, mask)
    }

    /// One update. `grads[i]` is the gradient for parameter i (None = zero).
    /// `epoch` selects the schedule factor.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[Option<ArrayD<F>>],
        epoch: usize,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("gradient list length != parameter count"));
        }
        self.step += 1;
        let lr = self.base_lr * self.schedule.factor(epoch);
        let b1 = F::fr(self.beta1);
        let b2 = F::fr(self.beta2);
        let one = F::one();
        let bc1 = F::fr(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = F::fr(1.0 - self.beta2.powi(self.step as i32));
        let lr_f = F::fr(lr);
        let eps = F::fr(self.eps);
        for i in 0..store.len() {
            if !self.trainable[i] {
                continue;
            }
            let Some(grad) = grads[i].as_ref() else { continue };
            if grad.shape() != store.array(i).shape() {
                return Err(Error::shape(format!(
                    "gradient shape {:?} != parameter shape {:?} for {}",
                    grad.shape(),
                    store.array(i).shape(),
                    store.name(i)
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(grad).for_each(|mv, &gv| {
                *mv = b1 * *mv + (one - b1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|vv, &gv| {
                *vv = b2 * *vv + (one - b2) * gv * gv;
            });
            let p = store.array_mut(i);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv = *pv - lr_f * mhat / (vhat.sqrt() + eps);
            });
        }
        Ok(())
    }
}
