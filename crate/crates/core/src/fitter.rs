//! Inference-time optimizers: the learned update rule, plain gradient
//! descent, and one-shot direct lifting.

use std::time::Instant;

use crate::diffcore;
use crate::error::{Error, Result};
use crate::kinematics::SkeletonModel;
use crate::metrics;
use crate::params::{Keypoints2D, ModelParams, MIN_VISIBLE_JOINTS};
use crate::scalar::Real;
use crate::updatenet::{ablated_input, InputMode, NetInput, UpdateNetwork};

/// Default number of learned iterations.
pub const DEFAULT_ITERATIONS: usize = 4;

/// Step sizes searched for the gradient-descent baseline.
pub const GD_STEP_GRID: [f64; 7] = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0];

/// State at one iteration. `delta_norm` is the norm of the update that
/// produced this state (zero for the initial state).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord<T> {
    pub params: ModelParams<T>,
    pub loss: T,
    pub delta_norm: T,
    pub wall_us: u64,
}

/// Per-iteration history of one fit; `records[0]` is the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace<T> {
    pub records: Vec<IterationRecord<T>>,
}

impl<T: Real> FitTrace<T> {
    pub fn iterations_run(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn final_params(&self) -> &ModelParams<T> {
        &self.records.last().expect("trace holds the initial state").params
    }

    pub fn losses(&self) -> Vec<T> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Same states and losses, ignoring wall-clock timings.
    pub fn same_states(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.loss.to_f64_lossy().to_bits() == b.loss.to_f64_lossy().to_bits()
                    && a.params.flatten().iter().zip(b.params.flatten()).all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
            })
    }
}

/// A fit that stopped early; the trace holds every state reached.
#[derive(Debug)]
pub struct FitFailure<T> {
    pub error: Error,
    pub trace: FitTrace<T>,
}

impl<T> From<FitFailure<T>> for Error {
    fn from(f: FitFailure<T>) -> Self {
        f.error
    }
}

impl<T: Real> std::fmt::Display for FitFailure<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} after {} iterations", self.error, self.trace.iterations_run())
    }
}

pub type FitResult<T> = std::result::Result<FitTrace<T>, FitFailure<T>>;

fn require_fittable<T: Real>(target: &Keypoints2D<T>, model: &SkeletonModel<T>) -> Result<()> {
    if target.len() != model.joint_count() || target.visible.len() != model.joint_count() {
        return Err(Error::Shape { expected: model.joint_count(), got: target.len() });
    }
    let visible = target.visible_count();
    if visible < MIN_VISIBLE_JOINTS {
        return Err(Error::UnfittableFrame { visible, required: MIN_VISIBLE_JOINTS });
    }
    Ok(())
}

fn vec_norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|x| *x * *x).sum::<T>().sqrt()
}

/// Builds the network input for the current state, masked by the net's mode.
pub fn network_input<T: Real>(net: &UpdateNetwork<T>, grad: &[T], theta: &[T], target: &Keypoints2D<T>) -> NetInput<T> {
    let input = NetInput::new(grad, theta, target);
    if net.input_mode == InputMode::Full {
        input
    } else {
        ablated_input(&input, net.input_mode)
    }
}

/// Generic driver: `update` maps `(state, loss gradient)` to the additive step.
fn run<T: Real, F>(init: ModelParams<T>, target: &Keypoints2D<T>, model: &SkeletonModel<T>, n_iters: usize, mut update: F) -> FitResult<T>
where
    F: FnMut(&ModelParams<T>, &[T]) -> Result<Vec<T>>,
{
    let j = model.joint_count();
    let start = Instant::now();
    let mut trace = FitTrace { records: Vec::with_capacity(n_iters + 1) };
    let (loss, mut grad) = match diffcore::reproj_loss_and_grad(&init, target, model) {
        Ok(v) => v,
        Err(error) => return Err(FitFailure { error, trace }),
    };
    trace.records.push(IterationRecord { params: init, loss, delta_norm: T::zero(), wall_us: start.elapsed().as_micros() as u64 });

    for n in 0..n_iters {
        let t0 = Instant::now();
        let current = &trace.records.last().expect("initial state").params;
        let delta = match update(current, &grad) {
            Ok(d) => d,
            Err(error) => return Err(FitFailure { error, trace }),
        };
        let next_flat: Vec<T> = current.flatten().iter().zip(&delta).map(|(a, d)| *a + *d).collect();
        if next_flat.iter().any(|v| !v.is_finite()) {
            let error = Error::Divergence { iteration: n + 1, reason: "non-finite parameters".into() };
            return Err(FitFailure { error, trace });
        }
        let next = ModelParams::unflatten(j, &next_flat).expect("update has parameter dimension");
        let (loss, g) = match diffcore::reproj_loss_and_grad(&next, target, model) {
            Ok(v) => v,
            Err(error) => return Err(FitFailure { error, trace }),
        };
        if !loss.is_finite() {
            let error = Error::Divergence { iteration: n + 1, reason: "non-finite reprojection loss".into() };
            return Err(FitFailure { error, trace });
        }
        grad = g;
        trace.records.push(IterationRecord { params: next, loss, delta_norm: vec_norm(&delta), wall_us: t0.elapsed().as_micros() as u64 });
    }
    Ok(trace)
}

/// Learned fitter: `theta_{n+1} = theta_n + net(dL/dtheta_n, theta_n, x)` from zero.
pub fn fit_learned<T: Real>(net: &UpdateNetwork<T>, target: &Keypoints2D<T>, model: &SkeletonModel<T>, n_iters: usize) -> FitResult<T> {
    let empty = || FitTrace { records: Vec::new() };
    if let Err(error) = require_fittable(target, model) {
        return Err(FitFailure { error, trace: empty() });
    }
    if net.architecture().output != crate::params::param_dim(model.joint_count()) {
        let error = Error::Shape { expected: crate::params::param_dim(model.joint_count()), got: net.architecture().output };
        return Err(FitFailure { error, trace: empty() });
    }
    run(ModelParams::zeros(model.joint_count()), target, model, n_iters, |params, grad| {
        let input = network_input(net, grad, &params.flatten(), target);
        net.forward(&input).map(|(out, _)| out)
    })
}

/// Plain gradient descent on the reprojection loss (no prior term).
#[derive(Debug, Clone)]
pub struct GradientDescent {
    pub step_size: f64,
    pub iterations: usize,
    /// Optional per-coordinate mask; `false` freezes a parameter.
    pub trainable: Option<Vec<bool>>,
}

impl GradientDescent {
    pub fn new(step_size: f64, iterations: usize) -> Self {
        Self { step_size, iterations, trainable: None }
    }

    pub fn run<T: Real>(&self, init: ModelParams<T>, target: &Keypoints2D<T>, model: &SkeletonModel<T>) -> FitResult<T> {
        let empty = || FitTrace { records: Vec::new() };
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            let error = Error::InvalidInput(format!("step size must be non-negative, got {}", self.step_size));
            return Err(FitFailure { error, trace: empty() });
        }
        if let Err(error) = require_fittable(target, model) {
            return Err(FitFailure { error, trace: empty() });
        }
        let lambda = T::c(self.step_size);
        let mask = self.trainable.clone();
        run(init, target, model, self.iterations, |_, grad| {
            Ok(grad
                .iter()
                .enumerate()
                .map(|(i, g)| match &mask {
                    Some(m) if !m[i] => T::zero(),
                    _ => -lambda * *g,
                })
                .collect())
        })
    }
}

/// Gradient descent from the zero initialization.
pub fn fit_vanilla_gd<T: Real>(target: &Keypoints2D<T>, model: &SkeletonModel<T>, step_size: f64, n_iters: usize) -> FitResult<T> {
    GradientDescent::new(step_size, n_iters).run(ModelParams::zeros(model.joint_count()), target, model)
}

/// One-shot regression from the 2D target alone: the net sees zero gradient
/// and zero parameters, whatever mode it was trained with.
pub fn fit_direct_lifting<T: Real>(liftnet: &UpdateNetwork<T>, target: &Keypoints2D<T>, model: &SkeletonModel<T>) -> Result<ModelParams<T>> {
    require_fittable(target, model)?;
    let dim = crate::params::param_dim(model.joint_count());
    let zeros = vec![T::zero(); dim];
    let input = ablated_input(&NetInput::new(&zeros, &zeros, target), InputMode::TargetOnly);
    let (out, _) = liftnet.forward(&input)?;
    let params = ModelParams::unflatten(model.joint_count(), &out)?;
    if !params.is_finite() {
        return Err(Error::Divergence { iteration: 1, reason: "non-finite lifting output".into() });
    }
    Ok(params)
}

/// Scores every step size by the mean PA-MPJPE (mm-equivalent) of the final
/// gradient-descent iterate on `validation`; a step size that diverges on any
/// frame scores infinity. Returns the best step size and all scores.
pub fn grid_search_gd_step<T: Real>(
    validation: &[(ModelParams<T>, Keypoints2D<T>)],
    model: &SkeletonModel<T>,
    grid: &[f64],
    n_iters: usize,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if validation.is_empty() || grid.is_empty() {
        return Err(Error::InvalidInput("grid search needs a validation set and at least one step size".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &step in grid {
        let mut total = 0.0;
        for (gt, target) in validation {
            match fit_vanilla_gd(target, model, step, n_iters) {
                Ok(trace) => {
                    let pred = model.fk_state(&trace.final_params().pose_shape).joints;
                    let truth = model.fk_state(&gt.pose_shape).joints;
                    total += metrics::pa_mpjpe(&pred, &truth)?.to_f64_lossy() * metrics::MM_PER_UNIT;
                }
                Err(f) if f.error.is_divergence() => {
                    total = f64::INFINITY;
                    break;
                }
                Err(f) => return Err(f.error),
            }
        }
        scores.push((step, total / validation.len() as f64));
    }
    let best = scores.iter().copied().fold((grid[0], f64::INFINITY), |b, s| if s.1 < b.1 { s } else { b });
    Ok((best.0, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera;
    use crate::kinematics::forward_kinematics;
    use crate::updatenet::Architecture;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64) -> (SkeletonModel<f64>, ModelParams<f64>, Keypoints2D<f64>) {
        let model = SkeletonModel::human(7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = (0..85).map(|_| rng.random_range(-0.4..0.4)).collect();
        let mut p = ModelParams::unflatten(24, &flat).unwrap();
        p.camera.scale = 1.0;
        let x = forward_kinematics(&model, &p.pose_shape).unwrap();
        let kp = Keypoints2D::new(camera::project(&x, &p.camera).unwrap());
        (model, p, kp)
    }

    #[test]
    fn untrained_net_stays_at_zero() {
        let (model, _, kp) = instance(1);
        let net = UpdateNetwork::<f64>::new(Architecture::default(), 0);
        let trace = fit_learned(&net, &kp, &model, 4).unwrap();
        assert_eq!(trace.records.len(), 5);
        assert_eq!(trace.iterations_run(), 4);
        assert!(trace.final_params().flatten().iter().all(|v| *v == 0.0));
        let l0 = trace.records[0].loss;
        assert!(trace.losses().iter().all(|l| *l == l0));
    }

    #[test]
    fn zero_iterations_gives_initial_state_only() {
        let (model, _, kp) = instance(2);
        let net = UpdateNetwork::<f64>::new(Architecture::default(), 0);
        let trace = fit_learned(&net, &kp, &model, 0).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(*trace.final_params(), ModelParams::zeros(24));
    }

    #[test]
    fn learned_fit_is_deterministic() {
        let (model, _, kp) = instance(3);
        let mut net = UpdateNetwork::<f64>::new(Architecture::default(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for v in net.params_mut().iter_mut() {
            *v += rng.random_range(-1e-3..1e-3);
        }
        let a = fit_learned(&net, &kp, &model, 6).unwrap();
        let b = fit_learned(&net, &kp, &model, 6).unwrap();
        assert!(a.same_states(&b));
    }

    #[test]
    fn too_few_visible_joints_is_unfittable() {
        let (model, _, mut kp) = instance(5);
        for j in 0..19 {
            kp.hide(j);
        }
        let net = UpdateNetwork::<f64>::new(Architecture::default(), 0);
        let err = fit_learned(&net, &kp, &model, 4).unwrap_err();
        assert!(matches!(err.error, Error::UnfittableFrame { visible: 5, required: 6 }));
        assert!(matches!(fit_vanilla_gd(&kp, &model, 0.1, 4).unwrap_err().error, Error::UnfittableFrame { .. }));
        assert!(matches!(fit_direct_lifting(&net, &kp, &model), Err(Error::UnfittableFrame { .. })));
    }

    #[test]
    fn gd_on_satisfied_target_stays_at_zero() {
        let model = SkeletonModel::human(7);
        // zero parameters project every joint onto t = 0
        let kp = Keypoints2D::new(vec![[0.0, 0.0]; 24]);
        let trace = fit_vanilla_gd(&kp, &model, 0.5, 5).unwrap();
        assert!(trace.final_params().flatten().iter().all(|v| *v == 0.0));
        assert_eq!(trace.records[0].loss, 0.0);
    }

    #[test]
    fn gd_with_zero_step_is_constant() {
        let (model, _, kp) = instance(6);
        let trace = fit_vanilla_gd(&kp, &model, 0.0, 5).unwrap();
        assert!(trace.records.iter().all(|r| r.params == ModelParams::zeros(24)));
        assert!(fit_vanilla_gd(&kp, &model, -1.0, 5).is_err());
    }

    #[test]
    fn gd_translation_subproblem_converges_to_least_squares() {
        let (model, truth, kp) = instance(7);
        // perturb t and fit only t; least squares t = mean(x_j - s P(R X_j))
        let mut init = truth.clone();
        init.camera.translation = [0.0, 0.0];
        let x = forward_kinematics(&model, &init.pose_shape).unwrap();
        let proj = camera::project(&x, &init.camera).unwrap();
        let mut expected = [0.0, 0.0];
        for (p, q) in proj.iter().zip(&kp.points) {
            expected[0] += (q[0] - p[0]) / 24.0;
            expected[1] += (q[1] - p[1]) / 24.0;
        }
        let mut trainable = vec![false; 85];
        trainable[82] = true;
        trainable[83] = true;
        let gd = GradientDescent { step_size: 0.1, iterations: 200, trainable: Some(trainable) };
        let trace = gd.run(init, &kp, &model).unwrap();
        let t = trace.final_params().camera.translation;
        assert_abs_diff_eq!(t[0], expected[0], epsilon = 1e-12);
        assert_abs_diff_eq!(t[1], expected[1], epsilon = 1e-12);
        let losses = trace.losses();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn gd_reports_divergence_with_trace() {
        let (model, _, kp) = instance(8);
        let err = fit_vanilla_gd(&kp, &model, 1e6, 50).unwrap_err();
        assert!(err.error.is_divergence(), "{}", err.error);
        assert!(!err.trace.records.is_empty());
    }

    #[test]
    fn direct_lifting_untrained_is_zero_and_deterministic() {
        let (model, _, kp) = instance(9);
        let net = UpdateNetwork::<f64>::new(Architecture::default(), 0).with_input_mode(InputMode::TargetOnly);
        let p = fit_direct_lifting(&net, &kp, &model).unwrap();
        assert_eq!(p, ModelParams::zeros(24));
        let mut net = net;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in net.params_mut().iter_mut() {
            *v += rng.random_range(-1e-2..1e-2);
        }
        let a = fit_direct_lifting(&net, &kp, &model).unwrap().flatten();
        let b = fit_direct_lifting(&net, &kp, &model).unwrap().flatten();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn grid_search_picks_the_lowest_score() {
        let model = SkeletonModel::human(2);
        let cfg = crate::trainer::TrainConfig::default();
        let source = crate::trainer::PoseSource::Sampler(crate::trainer::PoseSampler::new(24, &cfg.sampler, 2));
        let set = crate::trainer::heldout_set(&source, &cfg, &model, 6, 2, 0.0).unwrap();
        let (best, scores) = grid_search_gd_step(&set, &model, &GD_STEP_GRID, 4).unwrap();
        assert_eq!(scores.len(), GD_STEP_GRID.len());
        let min = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        assert!(min.is_finite());
        assert_eq!(scores.iter().find(|s| s.0 == best).unwrap().1, min);
        assert!(grid_search_gd_step(&set, &model, &[], 4).is_err());
    }
}
