//! MPJPE and Procrustes-aligned MPJPE.
//!
//! Similarity alignment uses Horn's unit-quaternion method: the optimal
//! rotation is the dominant eigenvector of a symmetric 4x4 matrix built from
//! the cross-covariance, which is always a proper rotation.

use crate::error::{Error, Result};
use crate::kinematics::JointSet3D;
use crate::linalg::{self, Mat3, Vec3};
use crate::scalar::Real;

/// Reports multiply skeleton units by this and label the result "mm-equivalent".
pub const MM_PER_UNIT: f64 = 1000.0;

/// Similarity transform mapping `A` onto `B`: `b ~ scale * rotation * a + translation`.
#[derive(Debug, Clone)]
pub struct Similarity<T> {
    pub scale: T,
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
    pub aligned: JointSet3D<T>,
    /// `sum_j |aligned_j - b_j|^2`
    pub residual: T,
}

impl<T: Real> Similarity<T> {
    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        linalg::add(linalg::scale(linalg::matvec(&self.rotation, p), self.scale), self.translation)
    }
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// eigenvalues and eigenvectors (as columns).
pub fn symmetric_eigen<T: Real, const N: usize>(mut a: [[T; N]; N]) -> ([T; N], [[T; N]; N]) {
    let mut v = [[T::zero(); N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = T::one();
    }
    for _sweep in 0..64 {
        let off: T = (0..N).flat_map(|i| (0..N).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let diag: T = (0..N).map(|i| a[i][i] * a[i][i]).sum();
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for p in 0..N {
            for q in p + 1..N {
                if a[p][q] == T::zero() {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (T::c(2.0) * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..N {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..N {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut vals = [T::zero(); N];
    for (i, val) in vals.iter_mut().enumerate() {
        *val = a[i][i];
    }
    (vals, v)
}

fn centroid<T: Real>(pts: &[Vec3<T>]) -> Vec3<T> {
    let n = T::c(pts.len() as f64);
    let mut c = linalg::zero3();
    for p in pts {
        c = linalg::add(c, *p);
    }
    linalg::scale(c, T::one() / n)
}

/// Rejects point sets that are (numerically) a single point or a line.
fn check_spread<T: Real>(centered: &[Vec3<T>], which: &str) -> Result<()> {
    let mut cov = linalg::zeros33::<T>();
    for p in centered {
        linalg::add_outer(&mut cov, *p, *p);
    }
    let (vals, _) = symmetric_eigen(cov);
    let mut sorted = vals;
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    if !(sorted[0] > T::min_positive_value()) || !(sorted[1] > T::c(1e-12) * sorted[0]) {
        return Err(Error::DegenerateAlignment(format!("{which} points are rank deficient")));
    }
    Ok(())
}

/// Least-squares similarity alignment of `a` onto `b`.
pub fn procrustes_align<T: Real>(a: &[Vec3<T>], b: &[Vec3<T>]) -> Result<Similarity<T>> {
    if a.len() != b.len() {
        return Err(Error::Shape { expected: b.len(), got: a.len() });
    }
    if a.len() < 3 {
        return Err(Error::DegenerateAlignment(format!("need at least 3 points, got {}", a.len())));
    }
    if a.iter().chain(b).flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite points".into()));
    }
    let ca = centroid(a);
    let cb = centroid(b);
    let a0: Vec<Vec3<T>> = a.iter().map(|p| linalg::sub(*p, ca)).collect();
    let b0: Vec<Vec3<T>> = b.iter().map(|p| linalg::sub(*p, cb)).collect();
    check_spread(&a0, "source")?;
    check_spread(&b0, "target")?;

    // S = sum a b^T
    let mut s = linalg::zeros33::<T>();
    for (p, q) in a0.iter().zip(&b0) {
        linalg::add_outer(&mut s, *p, *q);
    }
    let (sxx, sxy, sxz) = (s[0][0], s[0][1], s[0][2]);
    let (syx, syy, syz) = (s[1][0], s[1][1], s[1][2]);
    let (szx, szy, szz) = (s[2][0], s[2][1], s[2][2]);
    let n = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let (vals, vecs) = symmetric_eigen(n);
    let best = (0..4).max_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap_or(std::cmp::Ordering::Equal)).unwrap_or(0);
    let q = [vecs[0][best], vecs[1][best], vecs[2][best], vecs[3][best]];
    let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn);
    let two = T::c(2.0);
    let rotation = [
        [w * w + x * x - y * y - z * z, two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), w * w - x * x + y * y - z * z, two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), w * w - x * x - y * y + z * z],
    ];

    let mut num = T::zero();
    let mut den = T::zero();
    for (p, q) in a0.iter().zip(&b0) {
        num += linalg::dot(*q, linalg::matvec(&rotation, *p));
        den += linalg::dot(*p, *p);
    }
    let scale = num / den;
    let translation = linalg::sub(cb, linalg::scale(linalg::matvec(&rotation, ca), scale));
    let mut sim = Similarity { scale, rotation, translation, aligned: Vec::with_capacity(a.len()), residual: T::zero() };
    let mut residual = T::zero();
    for (p, q) in a.iter().zip(b) {
        let t = sim.apply(*p);
        let d = linalg::sub(t, *q);
        residual += linalg::dot(d, d);
        sim.aligned.push(t);
    }
    sim.residual = residual;
    Ok(sim)
}

/// Mean Euclidean per-joint distance.
pub fn mpjpe<T: Real>(pred: &[Vec3<T>], gt: &[Vec3<T>]) -> Result<T> {
    if pred.len() != gt.len() {
        return Err(Error::Shape { expected: gt.len(), got: pred.len() });
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("empty joint sets".into()));
    }
    let total: T = pred.iter().zip(gt).map(|(p, q)| linalg::norm(linalg::sub(*p, *q))).sum();
    Ok(total / T::c(pred.len() as f64))
}

/// MPJPE after similarity-aligning the prediction to the ground truth.
pub fn pa_mpjpe<T: Real>(pred: &[Vec3<T>], gt: &[Vec3<T>]) -> Result<T> {
    let sim = procrustes_align(pred, gt)?;
    mpjpe(&sim.aligned, gt)
}

/// Per-frame errors, in mm-equivalent units.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameErrors {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

/// Aggregated evaluation of a set of fits, in mm-equivalent units.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Errors of each frame's final estimate.
    pub frames: Vec<FrameErrors>,
    pub mean_mpjpe: f64,
    pub mean_pa_mpjpe: f64,
    pub median_mpjpe: f64,
    pub median_pa_mpjpe: f64,
    /// Mean MPJPE per iteration (index 0 is the initial estimate).
    pub curve_mpjpe: Vec<f64>,
    pub curve_pa_mpjpe: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Evaluates per-iteration predictions (`predictions[frame][iteration]`)
/// against ground-truth joints. Curves only span iterations every frame has.
pub fn evaluate<T: Real>(predictions: &[Vec<JointSet3D<T>>], ground_truth: &[JointSet3D<T>]) -> Result<EvalReport> {
    if predictions.is_empty() || ground_truth.is_empty() {
        return Err(Error::EmptyReport);
    }
    if predictions.len() != ground_truth.len() {
        return Err(Error::Shape { expected: ground_truth.len(), got: predictions.len() });
    }
    let iters = predictions.iter().map(Vec::len).min().unwrap_or(0);
    if iters == 0 {
        return Err(Error::EmptyReport);
    }
    let mut per_iter = vec![(Vec::new(), Vec::new()); iters];
    let mut frames = Vec::with_capacity(predictions.len());
    for (preds, gt) in predictions.iter().zip(ground_truth) {
        for (it, p) in preds.iter().enumerate() {
            let e = mpjpe(p, gt)?.to_f64_lossy() * MM_PER_UNIT;
            let pa = pa_mpjpe(p, gt)?.to_f64_lossy() * MM_PER_UNIT;
            if it < iters {
                per_iter[it].0.push(e);
                per_iter[it].1.push(pa);
            }
            if it + 1 == preds.len() {
                frames.push(FrameErrors { mpjpe: e, pa_mpjpe: pa });
            }
        }
    }
    let finals_e: Vec<f64> = frames.iter().map(|f| f.mpjpe).collect();
    let finals_pa: Vec<f64> = frames.iter().map(|f| f.pa_mpjpe).collect();
    Ok(EvalReport {
        mean_mpjpe: mean(&finals_e),
        mean_pa_mpjpe: mean(&finals_pa),
        median_mpjpe: median(&finals_e),
        median_pa_mpjpe: median(&finals_pa),
        curve_mpjpe: per_iter.iter().map(|(e, _)| mean(e)).collect(),
        curve_pa_mpjpe: per_iter.iter().map(|(_, p)| mean(p)).collect(),
        frames,
    })
}
