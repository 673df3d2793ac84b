//! Unrolled training of the update network from sampled poses only.
//!
//! Each instance draws a pose/shape and a random camera, projects the joints
//! to obtain the 2D target, hides joints at random, then runs `unroll`
//! learned iterations from the zero state. The loss is the L1 distance of
//! every post-update state to the ground truth, and gradients flow back
//! through the whole unroll with the loss-gradient input held constant.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{self, CameraParams};
use crate::diffcore;
use crate::error::{Error, Result};
use crate::fitter::{self, network_input};
use crate::kinematics::{PoseShape, SkeletonModel, SHAPE_DIM};
use crate::metrics::{self, EvalReport};
use crate::params::{Keypoints2D, ModelParams, MIN_VISIBLE_JOINTS};
use crate::scalar::Real;
use crate::updatenet::{Architecture, InputMode, UpdateNetwork};

/// Camera sampling ranges for synthetic instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRanges {
    pub scale: [f64; 2],
    /// Both translation components are drawn from this interval.
    pub translation: [f64; 2],
    /// Largest global rotation angle, degrees.
    pub max_rotation_deg: f64,
}

impl Default for CameraRanges {
    fn default() -> Self {
        Self { scale: [0.5, 1.5], translation: [-0.5, 0.5], max_rotation_deg: 60.0 }
    }
}

/// Per-group standard deviations of the synthetic pose distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub spine_std: f64,
    pub limb_std: f64,
    pub extremity_std: f64,
    pub beta_std: f64,
    pub beta_clip: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { spine_std: 0.15, limb_std: 0.5, extremity_std: 0.8, beta_std: 1.0, beta_clip: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub unroll: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dropout_prob: f64,
    pub camera: CameraRanges,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub input_mode: InputMode,
    pub hidden: usize,
    pub blocks: usize,
    /// Held-out evaluation period in steps (0 disables it).
    pub eval_every: usize,
    pub heldout_size: usize,
    /// Checkpoint period in steps (0 keeps only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            unroll: 4,
            batch_size: 64,
            steps: 20_000,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dropout_prob: 0.1,
            camera: CameraRanges::default(),
            sampler: SamplerConfig::default(),
            seed: 0,
            input_mode: InputMode::Full,
            hidden: crate::updatenet::DEFAULT_HIDDEN,
            blocks: crate::updatenet::DEFAULT_BLOCKS,
            eval_every: 1000,
            heldout_size: 200,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.unroll < 1 {
            return bad("unroll must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return bad("dropout_prob must lie in [0, 1)");
        }
        if !(self.camera.scale[0] > 0.0 && self.camera.scale[1] >= self.camera.scale[0]) {
            return bad("camera scale range must be positive and ordered");
        }
        if !(self.camera.translation[1] >= self.camera.translation[0]) {
            return bad("camera translation range must be ordered");
        }
        if !(0.0..=180.0).contains(&self.camera.max_rotation_deg) {
            return bad("max_rotation_deg must lie in [0, 180]");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("invalid Adam hyper-parameters");
        }
        let s = &self.sampler;
        if [s.spine_std, s.limb_std, s.extremity_std, s.beta_std].iter().any(|v| !(*v >= 0.0)) || !(s.beta_clip > 0.0) {
            return bad("sampler standard deviations must be non-negative and beta_clip positive");
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive");
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { hidden: self.hidden, blocks: self.blocks, ..Architecture::default() }
    }
}

/// Truncated-Gaussian pose/shape distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSampler {
    /// Standard deviation (radians) of each articulated joint's components.
    pub theta_std: Vec<f64>,
    pub beta_std: f64,
    pub beta_clip: f64,
    pub seed: u64,
}

/// Articulated joints of the default tree whose incoming bone is part of the torso.
const TORSO_JOINTS: [usize; 10] = [1, 2, 3, 6, 9, 12, 13, 14, 16, 17];
/// Feet, hands and head.
const EXTREMITY_JOINTS: [usize; 5] = [10, 11, 15, 22, 23];

impl PoseSampler {
    /// Group assignment for the default 24-joint tree. Other trees get the
    /// limb deviation everywhere.
    pub fn new(model_joints: usize, config: &SamplerConfig, seed: u64) -> Self {
        let theta_std = (1..model_joints)
            .map(|j| {
                if model_joints != crate::kinematics::DEFAULT_JOINTS {
                    config.limb_std
                } else if TORSO_JOINTS.contains(&j) {
                    config.spine_std
                } else if EXTREMITY_JOINTS.contains(&j) {
                    config.extremity_std
                } else {
                    config.limb_std
                }
            })
            .collect();
        Self { theta_std, beta_std: config.beta_std, beta_clip: config.beta_clip, seed }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> PoseShape<f64> {
        let theta = self
            .theta_std
            .iter()
            .map(|&std| std::array::from_fn(|_| truncated_normal(rng, std, std::f64::consts::PI)))
            .collect();
        let beta = std::array::from_fn(|_| truncated_normal(rng, self.beta_std, self.beta_clip));
        PoseShape { theta, beta }
    }
}

fn truncated_normal<R: Rng>(rng: &mut R, std: f64, bound: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let n = Normal::new(0.0, std).expect("finite std");
    loop {
        let v: f64 = n.sample(rng);
        if v.abs() <= bound {
            return v;
        }
    }
}

/// Where ground-truth poses come from.
#[derive(Debug, Clone)]
pub enum PoseSource {
    Sampler(PoseSampler),
    /// Poses drawn uniformly from a fixed set (for example a MoCap dump).
    Dataset(Arc<Vec<PoseShape<f64>>>),
}

impl PoseSource {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> Result<PoseShape<f64>> {
        match self {
            PoseSource::Sampler(s) => Ok(s.sample(rng)),
            PoseSource::Dataset(poses) => {
                if poses.is_empty() {
                    return Err(Error::Config("pose dataset is empty".into()));
                }
                Ok(poses[rng.random_range(0..poses.len())].clone())
            }
        }
    }
}

/// Random global rotation: uniform over rotations whose angle is at most
/// `max_angle` (Haar density `1 - cos w` on the angle, uniform axis).
fn sample_rotation<R: Rng>(rng: &mut R, max_angle: f64) -> [f64; 3] {
    if max_angle <= 0.0 {
        return [0.0; 3];
    }
    let norm_at_max = 1.0 - max_angle.cos();
    let angle = loop {
        let w = rng.random_range(0.0..=max_angle);
        if rng.random::<f64>() * norm_at_max <= 1.0 - w.cos() {
            break w;
        }
    };
    let axis = loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            break v.map(|x| x / n);
        }
    };
    axis.map(|x| x * angle)
}

/// Independent generator for one instance of one step.
pub fn instance_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 20);
    rng
}

/// Draws a ground truth and its (partially hidden) 2D projection.
pub fn sample_instance<T: Real, R: Rng>(
    source: &PoseSource,
    config: &TrainConfig,
    model: &SkeletonModel<T>,
    rng: &mut R,
) -> Result<(ModelParams<T>, Keypoints2D<T>)> {
    let pose = source.draw(rng)?;
    let rotation = sample_rotation(rng, config.camera.max_rotation_deg.to_radians());
    let [s0, s1] = config.camera.scale;
    let scale = if s1 > s0 { rng.random_range(s0..s1) } else { s0 };
    let [t0, t1] = config.camera.translation;
    let mut translation = [0.0; 2];
    for t in translation.iter_mut() {
        *t = if t1 > t0 { rng.random_range(t0..t1) } else { t0 };
    }
    let c = |v: f64| T::c(v);
    let pose_shape = PoseShape { theta: pose.theta.iter().map(|t| t.map(c)).collect(), beta: pose.beta.map(c) };
    pose_shape.validate(model.joint_count())?;
    let cam = CameraParams::new(rotation.map(c), translation.map(c), c(scale))?;
    let joints = model.fk_state(&pose_shape).joints;
    let points = camera::project(&joints, &cam)?;

    let n = model.joint_count();
    let min_visible = MIN_VISIBLE_JOINTS.min(n);
    let visible = loop {
        let vis: Vec<bool> = (0..n).map(|_| !(config.dropout_prob > 0.0 && rng.random::<f64>() < config.dropout_prob)).collect();
        if vis.iter().filter(|v| **v).count() >= min_visible {
            break vis;
        }
    };
    let target = Keypoints2D::with_visibility(points, visible)?;
    Ok((ModelParams { pose_shape, camera: cam }, target))
}

/// Hides `count` distinct visible joints chosen uniformly at random.
pub fn hide_random_joints<T: Real, R: Rng>(target: &mut Keypoints2D<T>, count: usize, rng: &mut R) -> Result<()> {
    let mut visible: Vec<usize> = (0..target.len()).filter(|j| target.visible[*j]).collect();
    if count > visible.len() {
        return Err(Error::InvalidInput(format!("cannot hide {count} of {} visible joints", visible.len())));
    }
    for _ in 0..count {
        let j = visible.swap_remove(rng.random_range(0..visible.len()));
        target.hide(j);
    }
    Ok(())
}

/// One ground-truth / target pair.
pub type Instance<T> = (ModelParams<T>, Keypoints2D<T>);

/// Fixed evaluation set drawn from its own random stream.
pub fn heldout_set<T: Real>(
    source: &PoseSource,
    config: &TrainConfig,
    model: &SkeletonModel<T>,
    count: usize,
    seed: u64,
    dropout_prob: f64,
) -> Result<Vec<Instance<T>>> {
    let cfg = TrainConfig { dropout_prob, ..config.clone() };
    (0..count as u64).map(|i| sample_instance(source, &cfg, model, &mut instance_rng(seed, u64::MAX, i))).collect()
}

/// Weight gradients and loss of the unrolled objective over a batch.
pub fn unrolled_loss_and_grads<T: Real>(
    net: &UpdateNetwork<T>,
    batch: &[Instance<T>],
    unroll: usize,
    model: &SkeletonModel<T>,
) -> Result<(T, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    if unroll == 0 {
        return Err(Error::Config("unroll must be at least 1".into()));
    }
    let b = batch.len();
    let arch = *net.architecture();
    let dim = crate::params::param_dim(model.joint_count());
    if arch.output != dim {
        return Err(Error::Shape { expected: dim, got: arch.output });
    }
    let inv_b = T::one() / T::c(b as f64);
    let gts: Vec<Vec<T>> = batch.iter().map(|(gt, _)| gt.flatten()).collect();

    // states[n] is the B x dim matrix of theta_n
    let mut states: Vec<Vec<T>> = vec![vec![T::zero(); b * dim]];
    let mut caches = Vec::with_capacity(unroll);
    let mut loss = T::zero();
    for _ in 0..unroll {
        let cur = states.last().expect("initial state");
        let mut rows = vec![T::zero(); b * arch.input];
        for (i, (_, target)) in batch.iter().enumerate() {
            let theta = &cur[i * dim..(i + 1) * dim];
            let params = ModelParams::unflatten(model.joint_count(), theta)?;
            let grad = diffcore::reproj_grad(&params, target, model)?;
            network_input(net, &grad, theta, target).write_into(&mut rows[i * arch.input..(i + 1) * arch.input]);
        }
        let cache = net.forward_batch(rows, b)?;
        let next: Vec<T> = cur.iter().zip(&cache.output).map(|(a, d)| *a + *d).collect();
        for (i, gt) in gts.iter().enumerate() {
            loss += next[i * dim..(i + 1) * dim].iter().zip(gt).map(|(a, g)| (*a - *g).abs()).sum::<T>() * inv_b;
        }
        caches.push(cache);
        states.push(next);
    }
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration: 0, reason: "non-finite unrolled loss".into() });
    }

    let mut weight_grads = vec![T::zero(); net.param_count()];
    let mut d_state = vec![T::zero(); b * dim];
    let theta_offset = dim; // [grad | theta | target]
    let theta_live = net.input_mode.uses_theta();
    for n in (0..unroll).rev() {
        let post = &states[n + 1];
        for (i, gt) in gts.iter().enumerate() {
            for k in 0..dim {
                let diff = post[i * dim + k] - gt[k];
                let sign = if diff > T::zero() {
                    T::one()
                } else if diff < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                d_state[i * dim + k] += sign * inv_b;
            }
        }
        let d_in = net.backward_accumulate(&caches[n], &d_state, &mut weight_grads)?;
        if theta_live && n > 0 {
            for i in 0..b {
                let row = &d_in[i * arch.input + theta_offset..i * arch.input + theta_offset + dim];
                for (d, g) in d_state[i * dim..(i + 1) * dim].iter_mut().zip(row) {
                    *d += *g;
                }
            }
        }
    }
    Ok((loss, weight_grads))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            learning_rate: T::c(learning_rate),
            beta1: T::c(beta1),
            beta2: T::c(beta2),
            eps: T::c(eps),
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = self.beta1 * *m + (one - self.beta1) * *g;
            *v = self.beta2 * *v + (one - self.beta2) * *g * *g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: f64,
    /// Mean held-out PA-MPJPE (mm-equivalent) when evaluated at this step.
    pub heldout_pa_mpjpe: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.train_loss).collect()
    }
}

/// Hooks invoked by [`train`].
pub trait TrainObserver<T> {
    fn on_step(&mut self, _row: &LogRow) {}
    fn on_checkpoint(&mut self, _step: usize, _net: &UpdateNetwork<T>) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl<T> TrainObserver<T> for Silent {}

/// Mean held-out errors of the learned fitter, per iteration.
pub fn evaluate_learned<T: Real>(net: &UpdateNetwork<T>, set: &[Instance<T>], model: &SkeletonModel<T>, iters: usize) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(set.len());
    let mut gts = Vec::with_capacity(set.len());
    for (gt, target) in set {
        let trace = fitter::fit_learned(net, target, model, iters)?;
        preds.push(trace.records.iter().map(|r| model.fk_state(&r.params.pose_shape).joints).collect::<Vec<_>>());
        gts.push(model.fk_state(&gt.pose_shape).joints);
    }
    metrics::evaluate(&preds, &gts)
}

/// Runs Adam on the unrolled objective for `config.steps` steps. On
/// divergence `net` keeps the last finite weights and the error carries the
/// step index.
pub fn train<T: Real>(
    net: &mut UpdateNetwork<T>,
    config: &TrainConfig,
    model: &SkeletonModel<T>,
    source: &PoseSource,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainLog> {
    config.validate()?;
    net.input_mode = config.input_mode;
    let start = Instant::now();
    let mut log = TrainLog::default();
    if config.steps == 0 {
        return Ok(log);
    }
    let heldout = if config.eval_every > 0 && config.heldout_size > 0 {
        heldout_set(source, config, model, config.heldout_size, config.seed ^ HELDOUT_SALT, 0.0)?
    } else {
        Vec::new()
    };
    let mut adam = Adam::new(net.param_count(), config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);

    for step in 1..=config.steps {
        let batch: Vec<Instance<T>> = (0..config.batch_size as u64)
            .map(|i| sample_instance(source, config, model, &mut instance_rng(config.seed, step as u64, i)))
            .collect::<Result<_>>()?;
        let (loss, grads) = match unrolled_loss_and_grads(net, &batch, config.unroll, model) {
            Ok(v) => v,
            Err(Error::Divergence { reason, .. }) => return Err(Error::Divergence { iteration: step, reason }),
            Err(e) => return Err(e),
        };
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { iteration: step, reason: "non-finite weight gradient".into() });
        }
        let mut updated = net.params().to_vec();
        adam.step(&mut updated, &grads);
        if updated.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { iteration: step, reason: "non-finite weights".into() });
        }
        net.params_mut().copy_from_slice(&updated);

        let heldout_pa_mpjpe = if !heldout.is_empty() && (step % config.eval_every == 0 || step == config.steps) {
            Some(evaluate_learned(net, &heldout, model, config.unroll)?.mean_pa_mpjpe)
        } else {
            None
        };
        let row = LogRow { step, train_loss: loss.to_f64_lossy(), heldout_pa_mpjpe, wall_ms: start.elapsed().as_millis() as u64 };
        observer.on_step(&row);
        log.rows.push(row);
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step != config.steps {
            observer.on_checkpoint(step, net)?;
        }
    }
    observer.on_checkpoint(config.steps, net)?;
    Ok(log)
}

/// Salt separating the held-out stream from training streams.
pub const HELDOUT_SALT: u64 = 0x5eed_4e1d_0u64;

/// Builds a fresh network for `config` and trains it.
pub fn train_new<T: Real>(config: &TrainConfig, model: &SkeletonModel<T>, source: &PoseSource) -> Result<(UpdateNetwork<T>, TrainLog)> {
    let mut net = UpdateNetwork::new(config.architecture(), config.seed).with_input_mode(config.input_mode);
    let log = train(&mut net, config, model, source, &mut Silent)?;
    Ok((net, log))
}

/// Shape coefficients never exceed the configured clip.
pub fn beta_within_clip(ps: &PoseShape<f64>, clip: f64) -> bool {
    ps.beta.iter().take(SHAPE_DIM).all(|b| b.abs() <= clip)
}
