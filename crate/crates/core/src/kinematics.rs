//! Articulated skeleton with direct joint forward kinematics.
//!
//! Joint `j > 0` owns one axis-angle rotation that rotates the bone arriving
//! at `j` (and, through the chain, the whole subtree below it). Global
//! orientation is not part of the skeleton; the camera rotation owns it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Vec3};
use crate::scalar::Real;

/// Number of shape coefficients.
pub const SHAPE_DIM: usize = 10;

/// Joint count of the default human-like tree (1 root + 23 articulated).
pub const DEFAULT_JOINTS: usize = 24;

/// Below this rotation angle the Rodrigues map switches to its Taylor branch.
pub const RODRIGUES_TAYLOR_ANGLE: f64 = 1e-8;

/// Skeleton file format revision.
pub const SKELETON_FORMAT_VERSION: u32 = 1;

/// 3D joint positions, one per skeleton joint.
pub type JointSet3D<T> = Vec<Vec3<T>>;

/// Rotation matrix of an axis-angle vector.
pub fn rodrigues<T: Real>(axis_angle: Vec3<T>) -> Result<Mat3<T>> {
    if axis_angle.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite axis-angle {axis_angle:?}")));
    }
    Ok(rotation(axis_angle))
}

/// Coefficients of `R = I + a K + b K^2` and their scaled angle derivatives
/// `c = a'(t)/t`, `d = b'(t)/t`, with `K = [v]x` and `t = |v|`.
struct RodriguesCoeffs<T> {
    a: T,
    b: T,
    c: T,
    d: T,
}

fn coefficients<T: Real>(v: Vec3<T>) -> RodriguesCoeffs<T> {
    let t2 = linalg::dot(v, v);
    let t = t2.sqrt();
    if t < T::c(RODRIGUES_TAYLOR_ANGLE) {
        return RodriguesCoeffs { a: T::one(), b: T::c(0.5), c: T::c(-1.0 / 3.0), d: T::c(-1.0 / 12.0) };
    }
    let (s, co) = t.sin_cos();
    let half = (t * T::c(0.5)).sin();
    let a = s / t;
    // 1 - cos t = 2 sin^2(t/2), free of cancellation
    let one_minus_cos = T::c(2.0) * half * half;
    let b = one_minus_cos / t2;
    let (c, d) = if t < T::c(1e-2) {
        let t4 = t2 * t2;
        (
            T::c(-1.0 / 3.0) + t2 / T::c(30.0) - t4 / T::c(840.0),
            T::c(-1.0 / 12.0) + t2 / T::c(180.0) - t4 / T::c(6720.0),
        )
    } else {
        ((t * co - s) / (t2 * t), (t * s - T::c(2.0) * one_minus_cos) / (t2 * t2))
    };
    RodriguesCoeffs { a, b, c, d }
}

/// Unchecked Rodrigues map; callers validate finiteness.
pub(crate) fn rotation<T: Real>(v: Vec3<T>) -> Mat3<T> {
    let k = linalg::skew(v);
    let k2 = linalg::matmul(&k, &k);
    let RodriguesCoeffs { a, b, .. } = coefficients(v);
    let mut r = linalg::identity();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Vector-Jacobian product of the Rodrigues map: returns `dL/dv` given
/// `dL/dR` (as a 3x3 matrix of partials).
pub(crate) fn rotation_vjp<T: Real>(v: Vec3<T>, grad_r: &Mat3<T>) -> Vec3<T> {
    let RodriguesCoeffs { a, b, c, d } = coefficients(v);
    let k = linalg::skew(v);
    let k2 = linalg::matmul(&k, &k);
    let gk = linalg::frob(grad_r, &k);
    let gk2 = linalg::frob(grad_r, &k2);
    let mut out = linalg::zero3();
    for (i, o) in out.iter_mut().enumerate() {
        let mut e = linalg::zero3::<T>();
        e[i] = T::one();
        let ei = linalg::skew(e);
        let mut sym = linalg::matmul(&ei, &k);
        linalg::add_mat(&mut sym, &linalg::matmul(&k, &ei));
        *o = a * linalg::frob(grad_r, &ei) + b * linalg::frob(grad_r, &sym) + c * v[i] * gk + d * v[i] * gk2;
    }
    out
}

/// Pose and shape of the articulated body.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseShape<T> {
    /// One axis-angle vector per articulated joint (joints `1..J`).
    pub theta: Vec<Vec3<T>>,
    pub beta: [T; SHAPE_DIM],
}

impl<T: Real> PoseShape<T> {
    pub fn zeros(joint_count: usize) -> Self {
        Self { theta: vec![linalg::zero3(); joint_count.saturating_sub(1)], beta: [T::zero(); SHAPE_DIM] }
    }

    pub fn validate(&self, joint_count: usize) -> Result<()> {
        if self.theta.len() + 1 != joint_count {
            return Err(Error::Shape { expected: joint_count - 1, got: self.theta.len() });
        }
        let finite = self.theta.iter().flatten().chain(self.beta.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("pose/shape contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Kinematic tree with rest-pose bone offsets and a linear shape basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonModel<T> {
    pub name: String,
    pub seed: u64,
    /// `parents[0] == -1`; `parents[j] < j` otherwise.
    pub parents: Vec<i64>,
    /// Rest offset of each joint from its parent (the root's is ignored).
    pub template_offsets: Vec<Vec3<T>>,
    /// Per joint, a `3 x SHAPE_DIM` map from shape coefficients to offset deltas.
    pub shape_basis: Vec<[[T; SHAPE_DIM]; 3]>,
}

/// Everything the backward pass needs from one FK evaluation.
pub(crate) struct FkState<T> {
    pub joints: JointSet3D<T>,
    /// Accumulated orientation of the bone arriving at each joint.
    pub global_rot: Vec<Mat3<T>>,
    /// Local rotation of each articulated joint (identity at the root).
    pub local_rot: Vec<Mat3<T>>,
    /// Shaped rest offsets.
    pub offsets: Vec<Vec3<T>>,
}

impl<T: Real> SkeletonModel<T> {
    /// Builds and validates a skeleton.
    pub fn new(
        name: impl Into<String>,
        seed: u64,
        parents: Vec<i64>,
        template_offsets: Vec<Vec3<T>>,
        shape_basis: Vec<[[T; SHAPE_DIM]; 3]>,
    ) -> Result<Self> {
        let model = Self { name: name.into(), seed, parents, template_offsets, shape_basis };
        model.validate()?;
        Ok(model)
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, j: usize) -> usize {
        debug_assert!(j > 0);
        self.parents[j] as usize
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.parents.len();
        if j == 0 {
            return Err(Error::InvalidSkeleton("no joints".into()));
        }
        if self.template_offsets.len() != j || self.shape_basis.len() != j {
            return Err(Error::InvalidSkeleton(format!(
                "{} parents but {} offsets and {} basis blocks",
                j,
                self.template_offsets.len(),
                self.shape_basis.len()
            )));
        }
        if self.parents[0] != -1 {
            return Err(Error::InvalidSkeleton("joint 0 must be the root (parent -1)".into()));
        }
        for (idx, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= idx {
                return Err(Error::InvalidSkeleton(format!("joint {idx} has parent {p}; parents must precede children")));
            }
        }
        let finite = self.template_offsets.iter().flatten().all(|v| v.is_finite())
            && self.shape_basis.iter().flatten().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidSkeleton("non-finite offsets or shape basis".into()));
        }
        // |beta|_inf <= 3 must never collapse a bone.
        for idx in 1..j {
            let len = linalg::norm(self.template_offsets[idx]);
            let worst: T = (0..SHAPE_DIM)
                .map(|k| {
                    let col = [self.shape_basis[idx][0][k], self.shape_basis[idx][1][k], self.shape_basis[idx][2][k]];
                    linalg::norm(col)
                })
                .sum::<T>()
                * T::c(3.0);
            if !(worst < len) {
                return Err(Error::InvalidSkeleton(format!(
                    "shape basis at joint {idx} can collapse the bone (basis bound {worst} >= length {len})"
                )));
            }
        }
        Ok(())
    }

    /// Number of articulated joints, each carrying 3 pose parameters.
    pub fn articulated_count(&self) -> usize {
        self.joint_count() - 1
    }

    /// Shaped rest offset of every joint: `template + S * beta`.
    pub fn shaped_offsets(&self, beta: &[T; SHAPE_DIM]) -> Vec<Vec3<T>> {
        self.template_offsets
            .iter()
            .zip(&self.shape_basis)
            .map(|(t, s)| {
                let mut o = *t;
                for (row, oi) in s.iter().zip(o.iter_mut()) {
                    *oi += row.iter().zip(beta).map(|(a, b)| *a * *b).sum::<T>();
                }
                o
            })
            .collect()
    }

    /// Converts the skeleton to another scalar type.
    pub fn cast<U: Real>(&self) -> SkeletonModel<U> {
        let conv = |v: T| U::c(v.to_f64_lossy());
        SkeletonModel {
            name: self.name.clone(),
            seed: self.seed,
            parents: self.parents.clone(),
            template_offsets: self.template_offsets.iter().map(|o| o.map(conv)).collect(),
            shape_basis: self.shape_basis.iter().map(|b| b.map(|row| row.map(conv))).collect(),
        }
    }

    /// Rest bone length for every joint (0 at the root).
    pub fn bone_lengths(&self, beta: &[T; SHAPE_DIM]) -> Vec<T> {
        let mut out = vec![T::zero(); self.joint_count()];
        for (j, o) in self.shaped_offsets(beta).into_iter().enumerate().skip(1) {
            out[j] = linalg::norm(o);
        }
        out
    }

    pub(crate) fn fk_state(&self, ps: &PoseShape<T>) -> FkState<T> {
        let n = self.joint_count();
        let offsets = self.shaped_offsets(&ps.beta);
        let mut joints = vec![linalg::zero3(); n];
        let mut global_rot = vec![linalg::identity(); n];
        let mut local_rot = vec![linalg::identity(); n];
        for j in 1..n {
            let p = self.parent(j);
            let local = rotation(ps.theta[j - 1]);
            let g = linalg::matmul(&global_rot[p], &local);
            joints[j] = linalg::add(joints[p], linalg::matvec(&g, offsets[j]));
            global_rot[j] = g;
            local_rot[j] = local;
        }
        FkState { joints, global_rot, local_rot, offsets }
    }
}

impl SkeletonModel<f64> {
    /// The default 24-joint human-like tree with a seeded synthetic shape basis.
    ///
    /// Each basis column is a random unit direction scaled to 2% of the mean
    /// bone length, shrunk per joint where needed so that `|beta|_inf <= 3`
    /// keeps every bone at least half its template length.
    pub fn human(seed: u64) -> Self {
        let parents: Vec<i64> = vec![-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];
        let template_offsets: Vec<Vec3<f64>> = vec![
            [0.0, 0.0, 0.0],      // pelvis
            [0.07, -0.09, 0.0],   // left hip
            [-0.07, -0.09, 0.0],  // right hip
            [0.0, 0.11, -0.02],   // spine 1
            [0.04, -0.38, 0.0],   // left knee
            [-0.04, -0.38, 0.0],  // right knee
            [0.0, 0.13, 0.0],     // spine 2
            [-0.01, -0.40, -0.04], // left ankle
            [0.01, -0.40, -0.04], // right ankle
            [0.0, 0.05, 0.02],    // spine 3
            [0.02, -0.06, 0.12],  // left foot
            [-0.02, -0.06, 0.12], // right foot
            [0.0, 0.21, -0.03],   // neck
            [0.08, 0.12, -0.02],  // left collar
            [-0.08, 0.12, -0.02], // right collar
            [0.0, 0.09, 0.05],    // head
            [0.12, 0.04, -0.01],  // left shoulder
            [-0.12, 0.04, -0.01], // right shoulder
            [0.26, -0.01, -0.02], // left elbow
            [-0.26, -0.01, -0.02], // right elbow
            [0.25, 0.01, 0.0],    // left wrist
            [-0.25, 0.01, 0.0],   // right wrist
            [0.08, -0.01, -0.01], // left hand
            [-0.08, -0.01, -0.01], // right hand
        ];
        let shape_basis = synthetic_shape_basis(&template_offsets, seed);
        Self::new("human24", seed, parents, template_offsets, shape_basis).expect("built-in skeleton is valid")
    }
}

/// Random per-joint basis directions, 2% of the mean bone length per unit
/// coefficient, capped so the worst case at `|beta|_inf = 3` is half a bone.
pub fn synthetic_shape_basis(template_offsets: &[Vec3<f64>], seed: u64) -> Vec<[[f64; SHAPE_DIM]; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths: Vec<f64> = template_offsets.iter().skip(1).map(|o| linalg::norm(*o)).collect();
    let mean_len = if lengths.is_empty() { 0.0 } else { lengths.iter().sum::<f64>() / lengths.len() as f64 };
    template_offsets
        .iter()
        .enumerate()
        .map(|(j, offset)| {
            let mut block = [[0.0; SHAPE_DIM]; 3];
            if j == 0 {
                return block;
            }
            let cap = 0.5 * linalg::norm(*offset) / (3.0 * SHAPE_DIM as f64);
            let magnitude = (0.02 * mean_len).min(cap);
            for k in 0..SHAPE_DIM {
                let dir = random_unit(&mut rng);
                for r in 0..3 {
                    block[r][k] = dir[r] * magnitude;
                }
            }
            block
        })
        .collect()
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3<f64> {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = linalg::norm(v);
        if n > 1e-3 && n <= 1.0 {
            return linalg::scale(v, 1.0 / n);
        }
    }
}

/// Rest-pose joint positions for shape `beta` (root at the origin).
pub fn rest_joints<T: Real>(model: &SkeletonModel<T>, beta: &[T; SHAPE_DIM]) -> Result<JointSet3D<T>> {
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidInput("non-finite shape coefficients".into()));
    }
    let offsets = model.shaped_offsets(beta);
    let mut joints = vec![linalg::zero3(); model.joint_count()];
    for j in 1..model.joint_count() {
        joints[j] = linalg::add(joints[model.parent(j)], offsets[j]);
    }
    Ok(joints)
}

/// Posed joint positions; the root stays at the origin.
pub fn forward_kinematics<T: Real>(model: &SkeletonModel<T>, ps: &PoseShape<T>) -> Result<JointSet3D<T>> {
    ps.validate(model.joint_count())?;
    Ok(model.fk_state(ps).joints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn assert_mat_eq(a: &Mat3<f64>, b: &Mat3<f64>, tol: f64) {
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(a[i][j], b[i][j], epsilon = tol);
            }
        }
    }

    fn random_pose(model: &SkeletonModel<f64>, seed: u64) -> PoseShape<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 0.7).unwrap();
        let mut ps = PoseShape::zeros(model.joint_count());
        for t in ps.theta.iter_mut() {
            *t = [n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng)];
        }
        for b in ps.beta.iter_mut() {
            *b = rng.random_range(-3.0..3.0);
        }
        ps
    }

    #[test]
    fn rodrigues_reference_rotations() {
        assert_mat_eq(&rodrigues([0.0, 0.0, 0.0]).unwrap(), &linalg::identity(), 0.0);
        assert_mat_eq(
            &rodrigues([PI, 0.0, 0.0]).unwrap(),
            &[[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            1e-12,
        );
        assert_mat_eq(
            &rodrigues([0.0, 0.0, FRAC_PI_2]).unwrap(),
            &[[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            1e-12,
        );
    }

    #[test]
    fn rodrigues_rejects_non_finite() {
        assert!(matches!(rodrigues([f64::NAN, 0.0, 0.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(rodrigues([0.0, f64::INFINITY, 0.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rodrigues_is_proper_rotation_and_inverse_of_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let r = rodrigues(v).unwrap();
            assert_abs_diff_eq!(linalg::det(&r), 1.0, epsilon = 1e-12);
            assert_mat_eq(&linalg::matmul_tn(&r, &r), &linalg::identity(), 1e-12);
            let back = rodrigues(linalg::scale(v, -1.0)).unwrap();
            assert_mat_eq(&linalg::matmul(&r, &back), &linalg::identity(), 1e-9);
        }
    }

    #[test]
    fn rodrigues_taylor_branch_is_continuous() {
        let below = rotation([0.5e-8, 0.0, 0.0]);
        let above = rotation([2e-8, 0.0, 0.0]);
        assert_mat_eq(&below, &above, 1e-7);
        assert_abs_diff_eq!(below[2][1], 0.5e-8, epsilon = 1e-20);
    }

    #[test]
    fn rotation_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..60 {
            // cover the Taylor branch, the series branch, and the closed form
            let scale = [0.0, 1e-9, 1e-4, 5e-3, 0.3, 1.0, 2.5][case % 7];
            let dir = random_unit(&mut rng);
            let v = linalg::scale(dir, scale);
            let g: Mat3<f64> = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let analytic = rotation_vjp(v, &g);
            let h = 1e-6;
            for i in 0..3 {
                let mut vp = v;
                let mut vm = v;
                vp[i] += h;
                vm[i] -= h;
                let fd = (linalg::frob(&g, &rotation(vp)) - linalg::frob(&g, &rotation(vm))) / (2.0 * h);
                assert_abs_diff_eq!(analytic[i], fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn human_skeleton_is_valid_tree() {
        let m = SkeletonModel::human(7);
        assert_eq!(m.joint_count(), DEFAULT_JOINTS);
        m.validate().unwrap();
        assert_eq!(m.parents[0], -1);
    }

    #[test]
    fn validation_rejects_bad_trees() {
        let m = SkeletonModel::human(7);
        let mut bad = m.clone();
        bad.parents[5] = 9;
        assert!(matches!(bad.validate(), Err(Error::InvalidSkeleton(_))));
        let mut bad = m.clone();
        bad.parents[0] = 0;
        assert!(bad.validate().is_err());
        let mut bad = m.clone();
        bad.shape_basis[4][0][0] = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = m;
        bad.template_offsets.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rest_joints_at_zero_shape_accumulates_template() {
        let m = SkeletonModel::human(7);
        let rest = rest_joints(&m, &[0.0; SHAPE_DIM]).unwrap();
        let mut expected = vec![[0.0; 3]; m.joint_count()];
        for j in 1..m.joint_count() {
            expected[j] = linalg::add(expected[m.parent(j)], m.template_offsets[j]);
        }
        assert_eq!(rest, expected);
    }

    #[test]
    fn rest_joints_first_unit_shape() {
        let m = SkeletonModel::human(7);
        let mut beta = [0.0; SHAPE_DIM];
        beta[0] = 1.0;
        let rest = rest_joints(&m, &beta).unwrap();
        let mut expected = vec![[0.0; 3]; m.joint_count()];
        for j in 1..m.joint_count() {
            let col = [m.shape_basis[j][0][0], m.shape_basis[j][1][0], m.shape_basis[j][2][0]];
            expected[j] = linalg::add(expected[m.parent(j)], linalg::add(m.template_offsets[j], col));
        }
        for (a, b) in rest.iter().zip(&expected) {
            for k in 0..3 {
                assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn rest_joints_matches_dense_matrix_oracle() {
        // T + S beta as one dense (3J x 10) multiply, then accumulated along the tree.
        let m = SkeletonModel::human(7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let beta: [f64; SHAPE_DIM] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let j = m.joint_count();
        let mut dense = vec![0.0; 3 * j * SHAPE_DIM];
        for jj in 0..j {
            for r in 0..3 {
                for k in 0..SHAPE_DIM {
                    dense[(3 * jj + r) * SHAPE_DIM + k] = m.shape_basis[jj][r][k];
                }
            }
        }
        let mut local = vec![0.0; 3 * j];
        for row in 0..3 * j {
            let mut acc = m.template_offsets[row / 3][row % 3];
            for k in 0..SHAPE_DIM {
                acc += dense[row * SHAPE_DIM + k] * beta[k];
            }
            local[row] = acc;
        }
        let mut expected = vec![[0.0; 3]; j];
        for jj in 1..j {
            let p = m.parents[jj] as usize;
            for r in 0..3 {
                expected[jj][r] = expected[p][r] + local[3 * jj + r];
            }
        }
        let got = rest_joints(&m, &beta).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            for k in 0..3 {
                assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rest_joints_linear_in_shape() {
        let m = SkeletonModel::human(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b1: [f64; SHAPE_DIM] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
        let b2: [f64; SHAPE_DIM] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
        let b12: [f64; SHAPE_DIM] = std::array::from_fn(|k| b1[k] + b2[k]);
        let r0 = rest_joints(&m, &[0.0; SHAPE_DIM]).unwrap();
        let r1 = rest_joints(&m, &b1).unwrap();
        let r2 = rest_joints(&m, &b2).unwrap();
        let r12 = rest_joints(&m, &b12).unwrap();
        for j in 0..m.joint_count() {
            for k in 0..3 {
                let lhs = r12[j][k] - r0[j][k];
                let rhs = (r1[j][k] - r0[j][k]) + (r2[j][k] - r0[j][k]);
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn fk_with_zero_pose_is_rest_pose() {
        let m = SkeletonModel::human(7);
        let mut ps = random_pose(&m, 2);
        ps.theta.iter_mut().for_each(|t| *t = [0.0; 3]);
        assert_eq!(forward_kinematics(&m, &ps).unwrap(), rest_joints(&m, &ps.beta).unwrap());
    }

    #[test]
    fn fk_two_joint_planar_chain() {
        let m = SkeletonModel::new("chain", 0, vec![-1, 0], vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![[[0.0; SHAPE_DIM]; 3]; 2])
            .unwrap();
        let ps = PoseShape { theta: vec![[0.0, 0.0, FRAC_PI_2]], beta: [0.0; SHAPE_DIM] };
        let x = forward_kinematics(&m, &ps).unwrap();
        assert_eq!(x[0], [0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(x[1][0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1][1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1][2], 0.0, epsilon = 1e-15);
    }

    /// Homogeneous 4x4 oracle: `T_j = T_parent * Rot(theta_j) * Trans(offset_j)`.
    fn homogeneous_fk(m: &SkeletonModel<f64>, ps: &PoseShape<f64>) -> Vec<[f64; 3]> {
        type M4 = [[f64; 4]; 4];
        fn mul(a: &M4, b: &M4) -> M4 {
            let mut o = [[0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    for k in 0..4 {
                        o[i][j] += a[i][k] * b[k][j];
                    }
                }
            }
            o
        }
        // Independent rotation: matrix exponential by truncated power series.
        fn expm(v: [f64; 3]) -> [[f64; 3]; 3] {
            let k = [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]];
            let mut out = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            let mut term = out;
            for n in 1..40 {
                let mut next = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        for l in 0..3 {
                            next[i][j] += term[i][l] * k[l][j];
                        }
                        next[i][j] /= n as f64;
                    }
                }
                term = next;
                for i in 0..3 {
                    for j in 0..3 {
                        out[i][j] += term[i][j];
                    }
                }
            }
            out
        }
        let offsets = m.shaped_offsets(&ps.beta);
        let eye: M4 = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        let mut transforms = vec![eye; m.joint_count()];
        for j in 1..m.joint_count() {
            let r = expm(ps.theta[j - 1]);
            let mut rot = eye;
            for a in 0..3 {
                for b in 0..3 {
                    rot[a][b] = r[a][b];
                }
            }
            let mut tr = eye;
            for a in 0..3 {
                tr[a][3] = offsets[j][a];
            }
            transforms[j] = mul(&mul(&transforms[m.parents[j] as usize], &rot), &tr);
        }
        transforms.iter().map(|t| [t[0][3], t[1][3], t[2][3]]).collect()
    }

    #[test]
    fn fk_matches_homogeneous_transform_oracle() {
        let m = SkeletonModel::human(7);
        for seed in 0..20 {
            let ps = random_pose(&m, seed);
            let got = forward_kinematics(&m, &ps).unwrap();
            let expected = homogeneous_fk(&m, &ps);
            for (a, b) in got.iter().zip(&expected) {
                for k in 0..3 {
                    assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn fk_preserves_bone_lengths() {
        let m = SkeletonModel::human(7);
        for seed in 0..200 {
            let ps = random_pose(&m, 1000 + seed);
            let x = forward_kinematics(&m, &ps).unwrap();
            let rest = m.bone_lengths(&ps.beta);
            for j in 1..m.joint_count() {
                let len = linalg::norm(linalg::sub(x[j], x[m.parent(j)]));
                assert!((len - rest[j]).abs() <= 1e-9 * rest[j], "joint {j}: {len} vs {}", rest[j]);
                assert!(rest[j] > 0.0);
            }
        }
    }

    #[test]
    fn fk_is_deterministic_and_validates() {
        let m = SkeletonModel::human(7);
        let ps = random_pose(&m, 5);
        let a = forward_kinematics(&m, &ps).unwrap();
        let b = forward_kinematics(&m, &ps).unwrap();
        assert!(a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let mut short = ps.clone();
        short.theta.pop();
        assert!(matches!(forward_kinematics(&m, &short), Err(Error::Shape { .. })));
        let mut nan = ps;
        nan.beta[3] = f64::NAN;
        assert!(forward_kinematics(&m, &nan).is_err());
    }

    #[test]
    fn f32_skeleton_tracks_f64() {
        let m = SkeletonModel::human(7);
        let m32: SkeletonModel<f32> = m.cast();
        let ps = random_pose(&m, 9);
        let ps32 = PoseShape { theta: ps.theta.iter().map(|t| t.map(|v| v as f32)).collect(), beta: ps.beta.map(|v| v as f32) };
        let a = forward_kinematics(&m, &ps).unwrap();
        let b = forward_kinematics(&m32, &ps32).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert_abs_diff_eq!(*x, *y as f64, epsilon = 1e-5);
        }
    }
}
