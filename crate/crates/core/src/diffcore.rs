//! Reprojection loss and its exact reverse-mode gradient.
//!
//! The graph is fixed (FK, global rotation, weak-perspective projection,
//! mean squared error over visible joints), so the backward pass is written
//! out by hand instead of going through a tape.

use crate::camera;
use crate::error::{Error, Result};
use crate::kinematics::{self, SkeletonModel, SHAPE_DIM};
use crate::linalg::{self, Vec3};
use crate::params::{Keypoints2D, Layout, ModelParams};
use crate::scalar::Real;

fn check<T: Real>(params: &ModelParams<T>, target: &Keypoints2D<T>, model: &SkeletonModel<T>) -> Result<usize> {
    let j = model.joint_count();
    params.pose_shape.validate(j)?;
    if !params.is_finite() {
        return Err(Error::InvalidInput("non-finite parameters".into()));
    }
    if target.len() != j || target.visible.len() != j {
        return Err(Error::Shape { expected: j, got: target.len() });
    }
    let m = target.visible_count();
    if m == 0 {
        return Err(Error::DegenerateTarget);
    }
    Ok(m)
}

/// Mean over visible joints of the squared 2D reprojection distance.
pub fn reproj_loss<T: Real>(params: &ModelParams<T>, target: &Keypoints2D<T>, model: &SkeletonModel<T>) -> Result<T> {
    let m = check(params, target, model)?;
    let joints = model.fk_state(&params.pose_shape).joints;
    let proj = camera::project_unchecked(&joints, &params.camera);
    let mut sum = T::zero();
    for ((p, q), &vis) in proj.iter().zip(&target.points).zip(&target.visible) {
        if vis {
            let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
            sum += dx * dx + dy * dy;
        }
    }
    Ok(sum / T::c(m as f64))
}

/// Loss and analytic gradient (flattened parameter order) in one pass.
pub fn reproj_loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    target: &Keypoints2D<T>,
    model: &SkeletonModel<T>,
) -> Result<(T, Vec<T>)> {
    let m = check(params, target, model)?;
    let n = model.joint_count();
    let layout = Layout::new(n);
    let fk = model.fk_state(&params.pose_shape);
    let cam = &params.camera;
    let rc = kinematics::rotation(cam.rotation);
    let inv_m = T::one() / T::c(m as f64);
    let two_over_m = T::c(2.0) * inv_m;

    let mut grad = vec![T::zero(); layout.dim()];
    let mut loss = T::zero();
    let mut g_rc = linalg::zeros33::<T>();
    // dL/dX per joint
    let mut g_x: Vec<Vec3<T>> = vec![linalg::zero3(); n];

    for j in 0..n {
        if !target.visible[j] {
            continue;
        }
        let y = linalg::matvec(&rc, fk.joints[j]);
        let r = [
            cam.scale * y[0] + cam.translation[0] - target.points[j][0],
            cam.scale * y[1] + cam.translation[1] - target.points[j][1],
        ];
        loss += r[0] * r[0] + r[1] * r[1];
        let gp = [two_over_m * r[0], two_over_m * r[1]];
        grad[layout.translation()] += gp[0];
        grad[layout.translation() + 1] += gp[1];
        grad[layout.scale()] += gp[0] * y[0] + gp[1] * y[1];
        let g_y = [cam.scale * gp[0], cam.scale * gp[1], T::zero()];
        linalg::add_outer(&mut g_rc, g_y, fk.joints[j]);
        g_x[j] = linalg::matvec_t(&rc, g_y);
    }
    loss *= inv_m;

    let rv = kinematics::rotation_vjp(cam.rotation, &g_rc);
    grad[layout.rotation()..layout.rotation() + 3].copy_from_slice(&rv);

    // Reverse sweep over the tree; children have larger indices than parents.
    let mut g_global = vec![linalg::zeros33::<T>(); n];
    for j in (1..n).rev() {
        let p = model.parent(j);
        let gx = g_x[j];
        g_x[p] = linalg::add(g_x[p], gx);
        // X_j = X_p + G_j o_j
        linalg::add_outer(&mut g_global[j], gx, fk.offsets[j]);
        let g_off = linalg::matvec_t(&fk.global_rot[j], gx);
        let basis = &model.shape_basis[j];
        for k in 0..SHAPE_DIM {
            grad[layout.beta() + k] += basis[0][k] * g_off[0] + basis[1][k] * g_off[1] + basis[2][k] * g_off[2];
        }
        // G_j = G_p L_j
        let gg = g_global[j];
        let g_local = linalg::matmul_tn(&fk.global_rot[p], &gg);
        linalg::add_mat(&mut g_global[p], &linalg::matmul_nt(&gg, &fk.local_rot[j]));
        let gt = kinematics::rotation_vjp(params.pose_shape.theta[j - 1], &g_local);
        grad[3 * (j - 1)..3 * j].copy_from_slice(&gt);
    }
    Ok((loss, grad))
}

/// Exact gradient of [`reproj_loss`]; invisible joints contribute nothing.
pub fn reproj_grad<T: Real>(params: &ModelParams<T>, target: &Keypoints2D<T>, model: &SkeletonModel<T>) -> Result<Vec<T>> {
    reproj_loss_and_grad(params, target, model).map(|(_, g)| g)
}

/// Central differences of an arbitrary scalar function.
pub fn central_differences<T: Real, F>(x: &[T], step: T, mut f: F) -> Result<Vec<T>>
where
    F: FnMut(&[T]) -> Result<T>,
{
    if !(step > T::zero()) || !step.is_finite() {
        return Err(Error::InvalidStep(step.to_f64_lossy()));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = f(&probe)?;
        probe[i] = orig - step;
        let fm = f(&probe)?;
        probe[i] = orig;
        out.push((fp - fm) / (T::c(2.0) * step));
    }
    Ok(out)
}

/// Central finite-difference gradient of [`reproj_loss`].
pub fn finite_diff_grad<T: Real>(
    params: &ModelParams<T>,
    target: &Keypoints2D<T>,
    model: &SkeletonModel<T>,
    step: T,
) -> Result<Vec<T>> {
    let j = model.joint_count();
    central_differences(&params.flatten(), step, |flat| {
        let p = ModelParams::unflatten(j, flat)?;
        reproj_loss(&p, target, model)
    })
}

/// `|a - b|_inf / (1 + |b|_inf)` and the coordinate attaining the numerator.
pub fn gradient_error<T: Real>(analytic: &[T], reference: &[T]) -> (T, usize) {
    let mut worst = (T::zero(), 0);
    let mut ref_max = T::zero();
    for (i, (a, b)) in analytic.iter().zip(reference).enumerate() {
        let d = (*a - *b).abs();
        if d > worst.0 {
            worst = (d, i);
        }
        ref_max = ref_max.max(b.abs());
    }
    (worst.0 / (T::one() + ref_max), worst.1)
}

/// Default finite-difference step used by [`gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Result of comparing the analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Error of each instance, see [`gradient_error`].
    pub errors: Vec<f64>,
    pub max_error: f64,
    pub worst_instance: usize,
    /// Flattened parameter index of the worst coordinate.
    pub worst_coordinate: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error < tolerance
    }
}

/// Checks the gradient on `instances` random parameter vectors and random
/// targets (instance `i` hides `i % 7` joints).
pub fn gradcheck(model: &SkeletonModel<f64>, instances: usize, seed: u64, step: f64) -> Result<GradcheckReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let j = model.joint_count();
    let dim = crate::params::param_dim(j);
    let mut report = GradcheckReport { errors: Vec::with_capacity(instances), max_error: 0.0, worst_instance: 0, worst_coordinate: 0 };
    for i in 0..instances {
        let flat: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.8..0.8)).collect();
        let mut params = ModelParams::unflatten(j, &flat)?;
        params.camera.scale = rng.random_range(0.5..1.5);
        let mut target = Keypoints2D::new((0..j).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect());
        let hide = (i % 7).min(j.saturating_sub(1));
        while target.len() - target.visible_count() < hide {
            target.hide(rng.random_range(0..j));
        }
        let analytic = reproj_grad(&params, &target, model)?;
        let fd = finite_diff_grad(&params, &target, model, step)?;
        let (err, idx) = gradient_error(&analytic, &fd);
        if err > report.max_error || i == 0 {
            report.max_error = err;
            report.worst_instance = i;
            report.worst_coordinate = idx;
        }
        report.errors.push(err);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraParams;
    use crate::kinematics::forward_kinematics;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng) -> ModelParams<f64> {
        let flat: Vec<f64> = (0..85).map(|_| rng.random_range(-0.8..0.8)).collect();
        let mut p = ModelParams::unflatten(24, &flat).unwrap();
        p.camera.scale = rng.random_range(0.5..1.5);
        p
    }

    fn random_target(rng: &mut ChaCha8Rng, dropped: usize) -> Keypoints2D<f64> {
        let pts = (0..24).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let mut kp = Keypoints2D::new(pts);
        let mut hidden = 0;
        while hidden < dropped {
            let j = rng.random_range(0..24);
            if kp.visible[j] {
                kp.hide(j);
                hidden += 1;
            }
        }
        kp
    }

    fn self_target(p: &ModelParams<f64>, model: &SkeletonModel<f64>) -> Keypoints2D<f64> {
        let x = forward_kinematics(model, &p.pose_shape).unwrap();
        Keypoints2D::new(camera::project(&x, &p.camera).unwrap())
    }

    #[test]
    fn self_consistent_target_has_zero_loss_and_gradient() {
        let model = SkeletonModel::human(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng);
        let kp = self_target(&p, &model);
        let (loss, grad) = reproj_loss_and_grad(&p, &kp, &model).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-28);
        assert!(grad.iter().all(|g| g.abs() < 1e-14));
    }

    #[test]
    fn single_visible_joint_offset() {
        let model = SkeletonModel::human(7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng);
        let mut kp = self_target(&p, &model);
        for j in 1..24 {
            kp.hide(j);
        }
        kp.points[0][0] += 0.3;
        kp.points[0][1] += 0.4;
        assert_abs_diff_eq!(reproj_loss(&p, &kp, &model).unwrap(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn loss_matches_per_joint_loop_oracle() {
        let model = SkeletonModel::human(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = random_params(&mut rng);
            let kp = random_target(&mut rng, 5);
            // oracle: explicit per-joint projection and summation
            let x = forward_kinematics(&model, &p.pose_shape).unwrap();
            let r = kinematics::rodrigues(p.camera.rotation).unwrap();
            let mut total = 0.0;
            let mut count = 0;
            for j in 0..24 {
                if !kp.visible[j] {
                    continue;
                }
                let mut y = [0.0; 3];
                for a in 0..3 {
                    for b in 0..3 {
                        y[a] += r[a][b] * x[j][b];
                    }
                }
                let u = p.camera.scale * y[0] + p.camera.translation[0];
                let v = p.camera.scale * y[1] + p.camera.translation[1];
                total += (u - kp.points[j][0]).powi(2) + (v - kp.points[j][1]).powi(2);
                count += 1;
            }
            assert_eq!(count, 19);
            assert_abs_diff_eq!(reproj_loss(&p, &kp, &model).unwrap(), total / count as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn translation_gradient_is_mean_residual() {
        let model = SkeletonModel::human(7);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng);
        let kp = random_target(&mut rng, 0);
        let mut only = kp.clone();
        for j in 1..24 {
            only.hide(j);
        }
        let x = forward_kinematics(&model, &p.pose_shape).unwrap();
        let proj = camera::project(&x, &p.camera).unwrap();
        let g = reproj_grad(&p, &only, &model).unwrap();
        assert_abs_diff_eq!(g[82], 2.0 * (proj[0][0] - only.points[0][0]), epsilon = 1e-12);
        assert_abs_diff_eq!(g[83], 2.0 * (proj[0][1] - only.points[0][1]), epsilon = 1e-12);
    }

    #[test]
    fn scale_gradient_at_identity_rotation() {
        let model = SkeletonModel::human(7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = random_params(&mut rng);
        p.camera.rotation = [0.0; 3];
        p.camera.translation = [0.0; 2];
        let kp = random_target(&mut rng, 4);
        let x = forward_kinematics(&model, &p.pose_shape).unwrap();
        let m = kp.visible_count() as f64;
        let mut expected = 0.0;
        for j in 0..24 {
            if kp.visible[j] {
                let xh = [p.camera.scale * x[j][0], p.camera.scale * x[j][1]];
                expected += (xh[0] - kp.points[j][0]) * x[j][0] + (xh[1] - kp.points[j][1]) * x[j][1];
            }
        }
        expected *= 2.0 / m;
        let g = reproj_grad(&p, &kp, &model).unwrap();
        assert_abs_diff_eq!(g[84], expected, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = SkeletonModel::human(7);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for case in 0..100 {
            let p = random_params(&mut rng);
            let kp = random_target(&mut rng, case % 7);
            let analytic = reproj_grad(&p, &kp, &model).unwrap();
            let fd = finite_diff_grad(&p, &kp, &model, 1e-5).unwrap();
            let (err, idx) = gradient_error(&analytic, &fd);
            assert!(err < 1e-4, "case {case}: error {err} at {idx}");
        }
    }

    #[test]
    fn gradient_at_zero_parameters() {
        // theta = 0 exercises the Taylor branch; s = 0 kills pose gradients.
        let model = SkeletonModel::human(7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kp = random_target(&mut rng, 3);
        let p = ModelParams::zeros(24);
        let analytic = reproj_grad(&p, &kp, &model).unwrap();
        let fd = finite_diff_grad(&p, &kp, &model, 1e-5).unwrap();
        assert!(gradient_error(&analytic, &fd).0 < 1e-6);
        assert!(analytic[..82].iter().all(|g| *g == 0.0));

        let mut p1 = p.clone();
        p1.camera.scale = 1.0;
        let analytic = reproj_grad(&p1, &kp, &model).unwrap();
        let fd = finite_diff_grad(&p1, &kp, &model, 1e-5).unwrap();
        assert!(gradient_error(&analytic, &fd).0 < 1e-6);
    }

    #[test]
    fn hidden_joint_target_does_not_matter() {
        let model = SkeletonModel::human(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(&mut rng);
        let mut kp = random_target(&mut rng, 0);
        kp.visible[10] = false;
        let base = reproj_loss_and_grad(&p, &kp, &model).unwrap();
        kp.points[10] = [5.0, -3.0];
        let moved = reproj_loss_and_grad(&p, &kp, &model).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn foot_rotation_gradient_vanishes_when_foot_hidden() {
        // theta of joint 10 only moves joint 10
        let model = SkeletonModel::human(7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng);
        let mut kp = random_target(&mut rng, 0);
        kp.hide(10);
        let g = reproj_grad(&p, &kp, &model).unwrap();
        assert_eq!(&g[27..30], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_targets_and_bad_steps() {
        let model = SkeletonModel::human(7);
        let p = ModelParams::zeros(24);
        let kp = Keypoints2D::with_visibility(vec![[0.0, 0.0]; 24], vec![false; 24]).unwrap();
        assert!(matches!(reproj_loss(&p, &kp, &model), Err(Error::DegenerateTarget)));
        assert!(matches!(reproj_grad(&p, &kp, &model), Err(Error::DegenerateTarget)));
        let kp = Keypoints2D::new(vec![[0.0, 0.0]; 24]);
        assert!(matches!(finite_diff_grad(&p, &kp, &model, 0.0), Err(Error::InvalidStep(_))));
        assert!(matches!(reproj_loss(&p, &Keypoints2D::new(vec![[0.0, 0.0]; 3]), &model), Err(Error::Shape { .. })));
    }

    #[test]
    fn central_differences_on_quadratic() {
        // f(x) = sum (i+1) x_i^2 + x_0 x_1 ; central differences are exact for quadratics
        let x = [0.3, -1.2, 2.0];
        let f = |v: &[f64]| -> Result<f64> {
            Ok(v.iter().enumerate().map(|(i, a)| (i as f64 + 1.0) * a * a).sum::<f64>() + v[0] * v[1])
        };
        let g = central_differences(&x, 1e-3, f).unwrap();
        let exact = [2.0 * x[0] + x[1], 4.0 * x[1] + x[0], 6.0 * x[2]];
        for (a, b) in g.iter().zip(&exact) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn f32_gradient_tracks_f64() {
        let model = SkeletonModel::human(7);
        let m32: SkeletonModel<f32> = model.cast();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_params(&mut rng);
        let kp = random_target(&mut rng, 2);
        let p32 = ModelParams::<f32>::unflatten(24, &p.flatten().iter().map(|v| *v as f32).collect::<Vec<_>>()).unwrap();
        let kp32 = Keypoints2D {
            points: kp.points.iter().map(|q| [q[0] as f32, q[1] as f32]).collect(),
            visible: kp.visible.clone(),
        };
        let g = reproj_grad(&p, &kp, &model).unwrap();
        let g32 = reproj_grad(&p32, &kp32, &m32).unwrap();
        for (a, b) in g.iter().zip(&g32) {
            assert_abs_diff_eq!(*a, *b as f64, epsilon = 1e-4);
        }
        let _ = CameraParams::<f32>::identity();
    }

    #[test]
    fn gradcheck_is_deterministic_and_passes() {
        let model = SkeletonModel::human(7);
        let a = gradcheck(&model, 20, 3, GRADCHECK_STEP).unwrap();
        let b = gradcheck(&model, 20, 3, GRADCHECK_STEP).unwrap();
        assert_eq!(a, b);
        assert!(a.passes(1e-4), "{a:?}");
        assert_eq!(a.errors[a.worst_instance], a.max_error);
        assert!(a.worst_coordinate < 85);
    }
}
