//! SO(3)/SE(3) algebra with first-order uncertainty propagation.
//!
//! Twists are ordered `[rho; phi]` (translation first) everywhere, and
//! uncertainty is a right perturbation: `T = T_hat * Exp(tau)`.

use std::ops::Mul;

use nalgebra::{DMatrix, Matrix3, Matrix4, Matrix6, SMatrix, Vector3, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("covariance has a negative eigenvalue {0:e}")]
    NotPsd(f64),
    #[error("correlation {0} outside [-1, 1]")]
    BadCorrelation(f64),
    #[error("invalid probability {0}")]
    BadProbability(f64),
}

const SMALL_ANGLE: f64 = 1e-6;

/// Skew-symmetric matrix with `hat3(a) * b == a.cross(b)`.
#[inline]
pub fn hat3<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Inverse of [`hat3`]; reads the skew part of `m`.
#[inline]
pub fn vee3<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    let h = T::lit(0.5);
    Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) * h,
        (m[(0, 2)] - m[(2, 0)]) * h,
        (m[(1, 0)] - m[(0, 1)]) * h,
    )
}

/// A 3D rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rotation<T: Real>(Matrix3<T>);

impl<T: Real> Rotation<T> {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<T>) -> Self {
        Self(m)
    }

    /// Projects an arbitrary matrix onto SO(3) via SVD.
    pub fn from_matrix_orthonormalized(m: Matrix3<T>) -> Self {
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < T::zero() {
            d[(2, 2)] = -T::one();
        }
        Self(u * d * vt)
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<T> {
        &self.0
    }

    #[inline]
    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Frobenius orthonormality error and determinant error.
    pub fn validity_error(&self) -> (T, T) {
        let orth = (self.0 * self.0.transpose() - Matrix3::identity()).norm();
        (orth, (self.0.determinant() - T::one()).abs())
    }
}

impl<T: Real> Mul for Rotation<T> {
    type Output = Rotation<T>;
    fn mul(self, rhs: Self) -> Self {
        Rotation(self.0 * rhs.0)
    }
}

impl<T: Real> Mul<Vector3<T>> for Rotation<T> {
    type Output = Vector3<T>;
    fn mul(self, rhs: Vector3<T>) -> Vector3<T> {
        self.0 * rhs
    }
}

/// Rodrigues' formula.
pub fn exp_so3<T: Real>(phi: &Vector3<T>) -> Rotation<T> {
    let theta = phi.norm();
    let k = hat3(phi);
    let k2 = k * k;
    let (a, b) = if theta < T::lit(SMALL_ANGLE) {
        let t2 = theta * theta;
        (T::one() - t2 / T::lit(6.0), T::lit(0.5) - t2 / T::lit(24.0))
    } else {
        let s = (theta * T::lit(0.5)).sin();
        (theta.sin() / theta, T::lit(2.0) * s * s / (theta * theta))
    };
    Rotation(Matrix3::identity() + k * a + k2 * b)
}

/// Rotation vector of `r`, with angle in `[0, pi]`.
pub fn log_so3<T: Real>(r: &Rotation<T>) -> Vector3<T> {
    let m = r.matrix();
    let one = T::one();
    let cos = ((m.trace() - one) * T::lit(0.5)).clamp(-one, one);
    let theta = cos.acos();
    let w = vee3(m);
    if theta < T::lit(SMALL_ANGLE) {
        return w * (one + theta * theta / T::lit(6.0));
    }
    if T::pi() - theta < T::lit(1e-3) {
        // sin(theta) is tiny here: read the axis from the symmetric part.
        let s = (m + m.transpose()) * T::lit(0.5);
        let aat = (s - Matrix3::identity() * cos) / (one - cos);
        let mut best = 0;
        for i in 1..3 {
            if aat[(i, i)] > aat[(best, best)] {
                best = i;
            }
        }
        let mut axis: Vector3<T> = aat.column(best).into_owned();
        axis /= axis.norm();
        if axis.dot(&w) < T::zero() {
            axis = -axis;
        }
        return axis * theta;
    }
    w * (theta / theta.sin())
}

/// Rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform<T: Real> {
    pub rotation: Rotation<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for Transform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Transform<T> {
    pub fn new(rotation: Rotation<T>, translation: Vector3<T>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<T>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    #[inline]
    pub fn act(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.matrix() * p + self.translation
    }

    #[inline]
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation.matrix() * other.translation + self.translation,
        )
    }

    #[inline]
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Self::new(rt, -(rt.matrix() * self.translation))
    }

    pub fn to_homogeneous(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Converts the scalar type.
    pub fn cast<U: Real>(&self) -> Transform<U> {
        let r = self.rotation.matrix().map(|x| U::lit(x.as_f64()));
        Transform::new(
            Rotation::from_matrix_unchecked(r),
            self.translation.map(|x| U::lit(x.as_f64())),
        )
    }
}

impl<T: Real> Mul for Transform<T> {
    type Output = Transform<T>;
    fn mul(self, rhs: Self) -> Self {
        self.compose(&rhs)
    }
}

/// Element of se(3), ordered `[rho; phi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist<T: Real> {
    pub rho: Vector3<T>,
    pub phi: Vector3<T>,
}

impl<T: Real> Twist<T> {
    pub fn new(rho: Vector3<T>, phi: Vector3<T>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<T>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into_owned(), v.fixed_rows::<3>(3).into_owned())
    }

    pub fn to_vector(&self) -> Vector6<T> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rho);
        v.fixed_rows_mut::<3>(3).copy_from(&self.phi);
        v
    }
}

/// Left Jacobian of SO(3) (the `V` matrix of the SE(3) exponential).
fn so3_left_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let k = hat3(phi);
    let (b, c) = if theta < T::lit(SMALL_ANGLE) {
        let t2 = theta * theta;
        (T::lit(0.5) - t2 / T::lit(24.0), T::lit(1.0 / 6.0) - t2 / T::lit(120.0))
    } else {
        let s = (theta * T::lit(0.5)).sin();
        let t2 = theta * theta;
        (T::lit(2.0) * s * s / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Matrix3::identity() + k * b + k * k * c
}

fn so3_left_jacobian_inv<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let k = hat3(phi);
    let d = if theta < T::lit(SMALL_ANGLE) {
        T::lit(1.0 / 12.0) + theta * theta / T::lit(720.0)
    } else {
        let half = theta * T::lit(0.5);
        (T::one() - half * half.cos() / half.sin()) / (theta * theta)
    };
    Matrix3::identity() - k * T::lit(0.5) + k * k * d
}

pub fn exp_se3<T: Real>(xi: &Twist<T>) -> Transform<T> {
    Transform::new(exp_so3(&xi.phi), so3_left_jacobian(&xi.phi) * xi.rho)
}

pub fn log_se3<T: Real>(t: &Transform<T>) -> Twist<T> {
    let phi = log_so3(&t.rotation);
    Twist::new(so3_left_jacobian_inv(&phi) * t.translation, phi)
}

/// `Ad_T` such that `T * Exp(xi) == Exp(Ad_T xi) * T`.
pub fn adjoint<T: Real>(t: &Transform<T>) -> Matrix6<T> {
    let r = t.rotation.matrix();
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat3(&t.translation) * r));
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    ad
}

/// Jacobian of `T_hat * Exp(tau) * p` with respect to `tau` at zero.
pub fn point_jacobian<T: Real>(t_hat: &Transform<T>, p_source: &Vector3<T>) -> SMatrix<T, 3, 6> {
    let r = t_hat.rotation.matrix();
    let mut j = SMatrix::<T, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-(r * hat3(p_source))));
    j
}

/// A transform estimate with the covariance of its right perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertainTransform<T: Real> {
    pub mean: Transform<T>,
    pub covariance: Matrix6<T>,
}

impl<T: Real> UncertainTransform<T> {
    pub fn new(mean: Transform<T>, covariance: Matrix6<T>) -> Self {
        Self { mean, covariance }
    }

    pub fn certain(mean: Transform<T>) -> Self {
        Self::new(mean, Matrix6::zeros())
    }

    /// First-order inverse: `T^-1 = T_hat^-1 Exp(-Ad_T_hat tau)`.
    pub fn inverse(&self) -> Self {
        let ad = adjoint(&self.mean);
        Self::new(self.mean.inverse(), ad * self.covariance * ad.transpose())
    }
}

/// Ellipsoid `{p : (p - c)^T S^-1 (p - c) <= 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid<T: Real> {
    pub center: Vector3<T>,
    pub shape: Matrix3<T>,
}

/// Regularization added to the shape before inversion.
pub const ELLIPSOID_EPS: f64 = 1e-12;

impl<T: Real> Ellipsoid<T> {
    /// Squared Mahalanobis radius of `p`.
    pub fn mahalanobis_sq(&self, p: &Vector3<T>) -> T {
        let s = self.shape + Matrix3::identity() * T::lit(ELLIPSOID_EPS);
        let d = p - self.center;
        match s.cholesky() {
            Some(ch) => d.dot(&ch.solve(&d)),
            None => T::max_value().unwrap_or_else(T::one),
        }
    }

    pub fn contains(&self, p: &Vector3<T>) -> bool {
        self.mahalanobis_sq(p) <= T::one()
    }
}

/// Containment ellipsoid `kappa * J Sigma J^T` around `mean * p_source`.
pub fn point_covariance<T: Real>(
    ut: &UncertainTransform<T>,
    p_source: &Vector3<T>,
    kappa: T,
) -> Ellipsoid<T> {
    let j = point_jacobian(&ut.mean, p_source);
    let shape = j * ut.covariance * j.transpose() * kappa;
    Ellipsoid { center: ut.mean.act(p_source), shape: symmetrize3(&shape) }
}

fn symmetrize3<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Factor `L` with `L L^T = sigma` for a PSD `sigma` (negative eigenvalues clipped).
pub fn psd_factor<T: Real>(sigma: &Matrix6<T>) -> Matrix6<T> {
    let eig = sigma.symmetric_eigen();
    let mut l = eig.eigenvectors;
    for (i, mut col) in l.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[i].max(T::zero()).sqrt();
    }
    l
}

/// Draws a zero-mean Gaussian twist from a precomputed factor.
pub fn sample_twist<T: Real, R: Rng + ?Sized>(factor: &Matrix6<T>, rng: &mut R) -> Twist<T> {
    let z = Vector6::from_fn(|_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
    Twist::from_vector(&(factor * z))
}

/// Returns `t_true * Exp(tau)` with `tau ~ N(0, sigma)`.
pub fn sample_perturbed<T: Real, R: Rng + ?Sized>(
    t_true: &Transform<T>,
    sigma: &Matrix6<T>,
    rng: &mut R,
) -> Transform<T> {
    let tau = sample_twist(&psd_factor(sigma), rng);
    t_true.compose(&exp_se3(&tau))
}

fn to_dmatrix<T: Real, const D: usize>(m: &SMatrix<T, D, D>) -> DMatrix<T> {
    DMatrix::from_fn(D, D, |i, j| m[(i, j)])
}

/// Relative asymmetry `||M - M^T|| / ||M||`.
fn asymmetry<T: Real, const D: usize>(m: &SMatrix<T, D, D>) -> T {
    let n = m.norm();
    if n == T::zero() {
        return T::zero();
    }
    (m - m.transpose()).norm() / n
}

/// Symmetric PSD square root. Eigenvalues above `-1e-12` are clipped to zero.
pub fn spd_sqrt<T: Real, const D: usize>(m: &SMatrix<T, D, D>) -> Result<SMatrix<T, D, D>, LieError> {
    let asym = asymmetry(m);
    if asym > T::lit(1e-9) {
        return Err(LieError::Asymmetric(asym.as_f64()));
    }
    let sym = to_dmatrix(&((m + m.transpose()) * T::lit(0.5)));
    let scale = m.norm();
    let eig = sym.symmetric_eigen();
    let floor = -T::lit(1e-12) * scale.max(T::one());
    let mut out = SMatrix::<T, D, D>::zeros();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < floor {
            return Err(LieError::NotPsd(lam.as_f64()));
        }
        let s = lam.max(T::zero()).sqrt();
        let v = eig.eigenvectors.column(k);
        for i in 0..D {
            for j in 0..D {
                out[(i, j)] += s * v[i] * v[j];
            }
        }
    }
    Ok(out)
}

/// Symmetrizes and clips negative eigenvalues to zero.
pub fn project_psd<T: Real, const D: usize>(m: &SMatrix<T, D, D>) -> SMatrix<T, D, D> {
    let eig = to_dmatrix(&((m + m.transpose()) * T::lit(0.5))).symmetric_eigen();
    let mut out = SMatrix::<T, D, D>::zeros();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let lam = lam.max(T::zero());
        let v = eig.eigenvectors.column(k);
        for i in 0..D {
            for j in 0..D {
                out[(i, j)] += lam * v[i] * v[j];
            }
        }
    }
    out
}

fn min_eigenvalue<T: Real>(m: &Matrix6<T>) -> T {
    let sym = (m + m.transpose()) * T::lit(0.5);
    sym.symmetric_eigen().eigenvalues.min()
}

/// Square root `(Sigma_k Sigma_k1^T)^(1/2)` used for the cross-covariance.
///
/// Equal inputs return `Sigma_k` itself, the root of its square. When the product is not symmetric
/// the root is replaced by `sqrt(Sigma_k) * sqrt(Sigma_k1)`.
pub fn cross_covariance_root<T: Real>(sk: &Matrix6<T>, sk1: &Matrix6<T>) -> Result<Matrix6<T>, LieError> {
    if sk == sk1 {
        return Ok(*sk);
    }
    let product = sk * sk1.transpose();
    if asymmetry(&product) <= T::lit(1e-9) {
        spd_sqrt(&product)
    } else {
        Ok(spd_sqrt(&project_psd(sk))? * spd_sqrt(&project_psd(sk1))?)
    }
}

/// Uncertain relative transform between two poses sharing a base frame.
///
/// `rho` scales the cross-covariance `rho * (Sigma_k Sigma_k1)^(1/2)`, see
/// [`cross_covariance_root`].
pub fn extract_relative_covariance<T: Real>(
    odom_k: &UncertainTransform<T>,
    odom_k1: &UncertainTransform<T>,
    rho: T,
) -> Result<UncertainTransform<T>, LieError> {
    if !(rho >= -T::one() && rho <= T::one()) {
        return Err(LieError::BadCorrelation(rho.as_f64()));
    }
    for s in [&odom_k.covariance, &odom_k1.covariance] {
        let lam = min_eigenvalue(s);
        if lam < -T::lit(1e-9) {
            return Err(LieError::NotPsd(lam.as_f64()));
        }
    }
    let (sk, sk1) = (odom_k.covariance, odom_k1.covariance);
    let mean = odom_k.mean.inverse().compose(&odom_k1.mean);
    let a = adjoint(&mean.inverse());
    let cross = cross_covariance_root(&sk, &sk1)? * rho;
    let cov = a * sk * a.transpose() + sk1 - a * cross - cross.transpose() * a.transpose();
    Ok(UncertainTransform::new(mean, project_psd(&cov)))
}

/// Quantile of the chi-squared distribution with `dof` degrees of freedom.
///
/// Inverts the CDF by bisection to full double precision.
pub fn chi2_quantile(dof: u32, p: f64) -> Result<f64, LieError> {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    if !(p > 0.0 && p < 1.0) || dof == 0 {
        return Err(LieError::BadProbability(p));
    }
    let dist = ChiSquared::new(dof as f64).map_err(|_| LieError::BadProbability(p))?;
    let mut hi = dof as f64;
    while dist.cdf(hi) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if dist.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
