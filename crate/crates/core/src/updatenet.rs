//! The update network: a residual MLP mapping `(gradient, parameters, target)`
//! to a per-parameter update, with a hand-written batched backward pass and a
//! versioned binary checkpoint format.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Keypoints2D, PARAM_DIM};
use crate::scalar::{self, Real};

/// Width of the flattened target channel: `(u, v, visible)` per joint.
pub const TARGET_DIM: usize = 3 * crate::kinematics::DEFAULT_JOINTS;
/// `gradient + parameters + target`.
pub const INPUT_DIM: usize = 2 * PARAM_DIM + TARGET_DIM;
pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_BLOCKS: usize = 2;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BFNETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            c => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

/// Which input channels the network is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    Full,
    NoGrad,
    NoTheta,
    NoTarget,
    TargetOnly,
}

impl InputMode {
    pub const ALL: [InputMode; 5] =
        [InputMode::TargetOnly, InputMode::NoTheta, InputMode::NoGrad, InputMode::NoTarget, InputMode::Full];

    pub fn uses_grad(self) -> bool {
        matches!(self, InputMode::Full | InputMode::NoTheta | InputMode::NoTarget)
    }

    pub fn uses_theta(self) -> bool {
        matches!(self, InputMode::Full | InputMode::NoGrad | InputMode::NoTarget)
    }

    pub fn uses_target(self) -> bool {
        !matches!(self, InputMode::NoTarget)
    }

    pub fn name(self) -> &'static str {
        match self {
            InputMode::Full => "full",
            InputMode::NoGrad => "no-grad",
            InputMode::NoTheta => "no-theta",
            InputMode::NoTarget => "no-target",
            InputMode::TargetOnly => "target-only",
        }
    }

    fn code(self) -> u32 {
        match self {
            InputMode::Full => 0,
            InputMode::NoGrad => 1,
            InputMode::NoTheta => 2,
            InputMode::NoTarget => 3,
            InputMode::TargetOnly => 4,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown input mode code {code}")))
    }
}

impl std::str::FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode '{s}'")))
    }
}

impl std::fmt::Display for InputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One network input: the three channels, concatenated in this order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput<T> {
    pub grad: Vec<T>,
    pub theta: Vec<T>,
    pub target: Vec<T>,
}

impl<T: Real> NetInput<T> {
    /// Builds the input from a raw loss gradient, scaling the gradient
    /// channel by `1 / (1 + |grad|)`.
    pub fn new(raw_grad: &[T], theta_flat: &[T], target: &Keypoints2D<T>) -> Self {
        let norm = raw_grad.iter().map(|g| *g * *g).sum::<T>().sqrt();
        let k = T::one() / (T::one() + norm);
        Self { grad: raw_grad.iter().map(|g| *g * k).collect(), theta: theta_flat.to_vec(), target: target.flatten() }
    }

    pub fn dim(&self) -> usize {
        self.grad.len() + self.theta.len() + self.target.len()
    }

    pub fn write_into(&self, out: &mut [T]) {
        let (g, rest) = out.split_at_mut(self.grad.len());
        let (t, x) = rest.split_at_mut(self.theta.len());
        g.copy_from_slice(&self.grad);
        t.copy_from_slice(&self.theta);
        x.copy_from_slice(&self.target);
    }

    pub fn to_vec(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        self.write_into(&mut out);
        out
    }
}

/// Zeroes the channels a mode hides; dimensions are preserved.
pub fn ablated_input<T: Real>(input: &NetInput<T>, mode: InputMode) -> NetInput<T> {
    let mut out = input.clone();
    if !mode.uses_grad() {
        out.grad.iter_mut().for_each(|v| *v = T::zero());
    }
    if !mode.uses_theta() {
        out.theta.iter_mut().for_each(|v| *v = T::zero());
    }
    if !mode.uses_target() {
        out.target.iter_mut().for_each(|v| *v = T::zero());
    }
    out
}

/// Layer sizes: `input -> hidden`, `blocks` residual `hidden -> hidden`
/// layers, `hidden -> output`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub output: usize,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { input: INPUT_DIM, hidden: DEFAULT_HIDDEN, blocks: DEFAULT_BLOCKS, output: PARAM_DIM, activation: Activation::Relu }
    }
}

impl Architecture {
    pub fn param_count(&self) -> usize {
        let (i, h, o) = (self.input, self.hidden, self.output);
        (i * h + h) + self.blocks * (h * h + h) + (h * o + o)
    }

    /// Floating point operations of one forward pass (multiply and add
    /// counted separately, activations and skips included).
    pub fn forward_flops(&self) -> usize {
        let (i, h, o) = (self.input, self.hidden, self.output);
        let macs = i * h + self.blocks * h * h + h * o;
        let adds = h + self.blocks * 2 * h + o;
        let acts = h * (1 + self.blocks);
        2 * macs + adds + acts
    }

    fn w_in(&self) -> std::ops::Range<usize> {
        0..self.input * self.hidden
    }
    fn b_in(&self) -> std::ops::Range<usize> {
        let s = self.input * self.hidden;
        s..s + self.hidden
    }
    fn block_base(&self, k: usize) -> usize {
        self.input * self.hidden + self.hidden + k * (self.hidden * self.hidden + self.hidden)
    }
    fn w_block(&self, k: usize) -> std::ops::Range<usize> {
        let s = self.block_base(k);
        s..s + self.hidden * self.hidden
    }
    fn b_block(&self, k: usize) -> std::ops::Range<usize> {
        let s = self.block_base(k) + self.hidden * self.hidden;
        s..s + self.hidden
    }
    fn w_out(&self) -> std::ops::Range<usize> {
        let s = self.block_base(self.blocks);
        s..s + self.hidden * self.output
    }
    fn b_out(&self) -> std::ops::Range<usize> {
        let s = self.block_base(self.blocks) + self.hidden * self.output;
        s..s + self.output
    }
}

/// Activations saved by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    generation: u64,
    batch: usize,
    input: Vec<T>,
    /// Pre-activations of the input layer and of every residual block.
    pre: Vec<Vec<T>>,
    /// Hidden states `h_0 .. h_blocks`.
    hidden: Vec<Vec<T>>,
    pub output: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateNetwork<T> {
    arch: Architecture,
    params: Vec<T>,
    /// Trained input mode; applied by the fitter when building inputs.
    pub input_mode: InputMode,
    /// Seed the weights were initialized from.
    pub seed: u64,
    generation: u64,
}

impl<T: Real> UpdateNetwork<T> {
    /// He-initialized hidden layers, zero biases, zero output layer.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut params = vec![T::zero(); arch.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |fan_in: usize| Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let dist = he(arch.input);
        for w in &mut params[arch.w_in()] {
            *w = T::c(dist.sample(&mut rng));
        }
        let dist = he(arch.hidden);
        for k in 0..arch.blocks {
            for w in &mut params[arch.w_block(k)] {
                *w = T::c(dist.sample(&mut rng));
            }
        }
        Self { arch, params, input_mode: InputMode::Full, seed, generation: 0 }
    }

    pub fn from_parts(arch: Architecture, params: Vec<T>, input_mode: InputMode, seed: u64) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::Shape { expected: arch.param_count(), got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite network weights".into()));
        }
        Ok(Self { arch, params, input_mode, seed, generation: 0 })
    }

    pub fn with_input_mode(mut self, mode: InputMode) -> Self {
        self.input_mode = mode;
        self
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable weights. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.generation += 1;
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Real>(&self) -> UpdateNetwork<U> {
        UpdateNetwork {
            arch: self.arch,
            params: self.params.iter().map(|v| U::c(v.to_f64_lossy())).collect(),
            input_mode: self.input_mode,
            seed: self.seed,
            generation: 0,
        }
    }

    fn act(&self, z: T) -> T {
        match self.arch.activation {
            Activation::Relu => z.max(T::zero()),
            Activation::Identity => z,
        }
    }

    fn act_grad(&self, z: T) -> T {
        match self.arch.activation {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
        }
    }

    /// Batched forward pass over `batch` row-major input rows.
    pub fn forward_batch(&self, input: Vec<T>, batch: usize) -> Result<ForwardCache<T>> {
        let a = &self.arch;
        if input.len() != batch * a.input {
            return Err(Error::Shape { expected: batch * a.input, got: input.len() });
        }
        let h = a.hidden;
        let p = &self.params;
        let mut pre = Vec::with_capacity(a.blocks + 1);
        let mut hidden = Vec::with_capacity(a.blocks + 1);

        let mut z = bias_rows(&p[a.b_in()], batch);
        scalar::matmul_bt(batch, a.input, h, &input, &p[a.w_in()], &mut z, true);
        let h0: Vec<T> = z.iter().map(|v| self.act(*v)).collect();
        pre.push(z);
        hidden.push(h0);

        for k in 0..a.blocks {
            let cur = hidden.last().expect("input layer state");
            let mut z = bias_rows(&p[a.b_block(k)], batch);
            scalar::matmul_bt(batch, h, h, cur, &p[a.w_block(k)], &mut z, true);
            let next: Vec<T> = cur.iter().zip(&z).map(|(x, zz)| *x + self.act(*zz)).collect();
            pre.push(z);
            hidden.push(next);
        }

        let mut output = bias_rows(&p[a.b_out()], batch);
        let last = hidden.last().expect("hidden state");
        scalar::matmul_bt(batch, h, a.output, last, &p[a.w_out()], &mut output, true);
        Ok(ForwardCache { generation: self.generation, batch, input, pre, hidden, output })
    }

    /// Single-sample forward pass returning the update and the cache.
    pub fn forward(&self, input: &NetInput<T>) -> Result<(Vec<T>, ForwardCache<T>)> {
        if input.dim() != self.arch.input {
            return Err(Error::Shape { expected: self.arch.input, got: input.dim() });
        }
        let cache = self.forward_batch(input.to_vec(), 1)?;
        Ok((cache.output.clone(), cache))
    }

    /// Backward pass for `sum(output * d_output)`. Weight gradients are
    /// accumulated into `weight_grads`; the input gradient is returned.
    pub fn backward_accumulate(&self, cache: &ForwardCache<T>, d_output: &[T], weight_grads: &mut [T]) -> Result<Vec<T>> {
        let a = &self.arch;
        if cache.generation != self.generation || cache.input.len() != cache.batch * a.input {
            return Err(Error::InvalidState("forward cache does not match the current weights".into()));
        }
        let b = cache.batch;
        if d_output.len() != b * a.output {
            return Err(Error::Shape { expected: b * a.output, got: d_output.len() });
        }
        if weight_grads.len() != self.params.len() {
            return Err(Error::Shape { expected: self.params.len(), got: weight_grads.len() });
        }
        let h = a.hidden;
        let p = &self.params;

        let last = cache.hidden.last().expect("hidden state");
        scalar::matmul_at_acc(a.output, b, h, d_output, last, &mut weight_grads[a.w_out()]);
        add_col_sums(&mut weight_grads[a.b_out()], d_output, a.output);
        let mut d_h = vec![T::zero(); b * h];
        scalar::matmul(b, a.output, h, d_output, &p[a.w_out()], &mut d_h, false);

        for k in (0..a.blocks).rev() {
            let z = &cache.pre[k + 1];
            let d_z: Vec<T> = d_h.iter().zip(z).map(|(g, zz)| *g * self.act_grad(*zz)).collect();
            let h_in = &cache.hidden[k];
            scalar::matmul_at_acc(h, b, h, &d_z, h_in, &mut weight_grads[a.w_block(k)]);
            add_col_sums(&mut weight_grads[a.b_block(k)], &d_z, h);
            // skip connection keeps d_h; the block adds its own path
            scalar::matmul(b, h, h, &d_z, &p[a.w_block(k)], &mut d_h, true);
        }

        let d_z: Vec<T> = d_h.iter().zip(&cache.pre[0]).map(|(g, zz)| *g * self.act_grad(*zz)).collect();
        scalar::matmul_at_acc(h, b, a.input, &d_z, &cache.input, &mut weight_grads[a.w_in()]);
        add_col_sums(&mut weight_grads[a.b_in()], &d_z, h);
        let mut d_in = vec![T::zero(); b * a.input];
        scalar::matmul(b, h, a.input, &d_z, &p[a.w_in()], &mut d_in, false);
        Ok(d_in)
    }

    /// Backward pass returning fresh `(weight gradients, input gradient)`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_output: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let mut grads = vec![T::zero(); self.params.len()];
        let d_in = self.backward_accumulate(cache, d_output, &mut grads)?;
        Ok((grads, d_in))
    }

    /// Writes the versioned binary checkpoint.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for v in [self.arch.input, self.arch.hidden, self.arch.blocks, self.arch.output] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.arch.activation.code().to_le_bytes())?;
        w.write_all(&self.input_mode.code().to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_f64_lossy().to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a network checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let seed = read_u64(&mut r)?;
        let input = read_u32(&mut r)? as usize;
        let hidden = read_u32(&mut r)? as usize;
        let blocks = read_u32(&mut r)? as usize;
        let output = read_u32(&mut r)? as usize;
        let activation = Activation::from_code(read_u32(&mut r)?)?;
        let mode = InputMode::from_code(read_u32(&mut r)?)?;
        let arch = Architecture { input, hidden, blocks, output, activation };
        let count = read_u64(&mut r)? as usize;
        if count != arch.param_count() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} weights, architecture needs {}",
                arch.param_count()
            )));
        }
        let mut params = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            params.push(T::c(f64::from_le_bytes(buf)));
        }
        Self::from_parts(arch, params, mode, seed)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn bias_rows<T: Real>(bias: &[T], batch: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(bias.len() * batch);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    out
}

fn add_col_sums<T: Real>(acc: &mut [T], rows: &[T], width: usize) {
    for row in rows.chunks_exact(width) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v;
        }
    }
}
