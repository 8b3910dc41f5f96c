//! Rigid-body state, mass-inertia matrices, forward-Euler velocity stepping
//! and pose integration.
//!
//! Quaternions are stored scalar-first `(w, x, y, z)` whenever they appear
//! as plain vectors (serialization, gradients). Angular velocities are world
//! frame, matching the world-frame inertia and contact Jacobians.

use nalgebra::{Matrix3, Matrix4, Matrix4x3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

/// Below this rotation angle per step the exponential map uses its
/// first-order expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Gravitational acceleration, m/s².
pub const GRAVITY: f64 = 9.81;

/// Object configuration: orientation and position of the center of mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub q: Quaternion<f64>,
    pub p: Vector3<f64>,
}

impl Pose {
    /// Builds a pose, normalizing `q` and flipping it to the `w >= 0` hemisphere.
    pub fn new(q: Quaternion<f64>, p: Vector3<f64>) -> Self {
        Pose { q: canonicalize(q.normalize()), p }
    }

    pub fn identity() -> Self {
        Pose { q: Quaternion::identity(), p: Vector3::zeros() }
    }

    pub fn from_position(p: Vector3<f64>) -> Self {
        Pose { q: Quaternion::identity(), p }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, p: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Pose::new(q.into_inner(), p)
    }

    /// Rotation about the world z axis by `yaw` radians.
    pub fn from_yaw(yaw: f64, p: Vector3<f64>) -> Self {
        Pose::from_axis_angle(Vector3::z(), yaw, p)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        UnitQuaternion::new_unchecked(self.q).to_rotation_matrix().into_inner()
    }

    pub fn yaw(&self) -> f64 {
        yaw_of(&self.q)
    }

    /// `[w, x, y, z, px, py, pz]`.
    pub fn to_array(&self) -> [f64; 7] {
        [self.q.w, self.q.i, self.q.j, self.q.k, self.p.x, self.p.y, self.p.z]
    }

    pub fn from_array(a: &[f64]) -> Self {
        Pose::new(Quaternion::new(a[0], a[1], a[2], a[3]), Vector3::new(a[4], a[5], a[6]))
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[f64; 7]>::deserialize(d)?;
        Ok(Pose::from_array(&a))
    }
}

/// Rigid-body velocity, angular part first.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub angular: Vector3<f64>,
    pub linear: Vector3<f64>,
}

impl Twist {
    pub fn new(angular: Vector3<f64>, linear: Vector3<f64>) -> Self {
        Twist { angular, linear }
    }

    pub fn zero() -> Self {
        Twist::default()
    }

    pub fn linear(v: Vector3<f64>) -> Self {
        Twist { angular: Vector3::zeros(), linear: v }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.angular.x,
            self.angular.y,
            self.angular.z,
            self.linear.x,
            self.linear.y,
            self.linear.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            angular: Vector3::new(v[0], v[1], v[2]),
            linear: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.angular.iter().chain(self.linear.iter()).all(|x| x.is_finite())
    }
}

/// Generalized force: torque then force.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wrench {
    pub torque: Vector3<f64>,
    pub force: Vector3<f64>,
}

impl Wrench {
    pub fn new(torque: Vector3<f64>, force: Vector3<f64>) -> Self {
        Wrench { torque, force }
    }

    pub fn zero() -> Self {
        Wrench::default()
    }

    pub fn force(f: Vector3<f64>) -> Self {
        Wrench { torque: Vector3::zeros(), force: f }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Twist::new(self.torque, self.force).to_vector()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        let t = Twist::from_vector(v);
        Wrench { torque: t.angular, force: t.linear }
    }
}

macro_rules! six_vector_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                let v = self.to_vector();
                [v[0], v[1], v[2], v[3], v[4], v[5]].serialize(s)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let a = <[f64; 6]>::deserialize(d)?;
                Ok(<$t>::from_vector(&Vector6::from_column_slice(&a)))
            }
        }
    };
}

six_vector_serde!(Twist);
six_vector_serde!(Wrench);

/// Physical properties of a box-shaped body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub mass: f64,
    pub inertia_body: Matrix3<f64>,
    pub half_extents: Vector3<f64>,
    /// Coefficient of restitution.
    pub restitution: f64,
}

impl BodyParams {
    /// Solid box of uniform density.
    pub fn solid_box(mass: f64, half_extents: Vector3<f64>, restitution: f64) -> Self {
        BodyParams {
            mass,
            inertia_body: box_inertia(mass, &half_extents),
            half_extents,
            restitution,
        }
    }

    /// Same geometry, different mass; the inertia scales with it.
    pub fn with_mass(&self, mass: f64) -> Self {
        BodyParams {
            mass,
            inertia_body: self.inertia_body * (mass / self.mass),
            half_extents: self.half_extents,
            restitution: self.restitution,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.mass > 0.0) {
            return Err(format!("mass must be positive, got {}", self.mass));
        }
        if self.half_extents.iter().any(|h| !(*h > 0.0)) {
            return Err("half extents must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return Err(format!("restitution {} outside [0, 1]", self.restitution));
        }
        if self.inertia_body.cholesky().is_none() {
            return Err("inertia is not positive definite".into());
        }
        Ok(())
    }

    /// Largest full edge length, used to normalize position errors.
    pub fn size(&self) -> f64 {
        2.0 * self.half_extents.max()
    }
}

/// `I = m/12 · diag(b² + c², a² + c², a² + b²)` for full edge lengths a, b, c.
pub fn box_inertia(mass: f64, half_extents: &Vector3<f64>) -> Matrix3<f64> {
    let e = half_extents * 2.0;
    let k = mass / 12.0;
    Matrix3::from_diagonal(&Vector3::new(
        k * (e.y * e.y + e.z * e.z),
        k * (e.x * e.x + e.z * e.z),
        k * (e.x * e.x + e.y * e.y),
    ))
}

/// 6×6 block-diagonal mass-inertia matrix `[R I Rᵀ, 0; 0, m·Id]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassMatrix(pub Matrix6<f64>);

impl MassMatrix {
    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Matrix6<f64> {
        self.0
            .cholesky()
            .expect("mass matrix is SPD for valid body parameters")
            .inverse()
    }

    pub fn solve(&self, rhs: &Vector6<f64>) -> Vector6<f64> {
        self.0
            .cholesky()
            .expect("mass matrix is SPD for valid body parameters")
            .solve(rhs)
    }
}

pub fn build_mass_matrix(params: &BodyParams, q: &Quaternion<f64>) -> MassMatrix {
    let r = UnitQuaternion::new_normalize(*q).to_rotation_matrix().into_inner();
    let inertia_world = r * params.inertia_body * r.transpose();
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&inertia_world);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Matrix3::identity() * params.mass));
    MassMatrix(m)
}

/// `ξ_{t+h} = M⁻¹(M ξ_t + h f)`, evaluated as `ξ_t + h M⁻¹ f`.
pub fn unconstrained_step(m: &MassMatrix, xi: &Twist, f_ext: &Wrench, h: f64) -> Twist {
    assert!(h > 0.0, "time step must be positive");
    let dv = m.solve(&(f_ext.to_vector() * h));
    Twist::from_vector(&(xi.to_vector() + dv))
}

/// Advances a pose by one step of constant twist: `p' = p + v h`,
/// `q' = exp(ω h) ⊗ q` using the half-angle quaternion exponential.
pub fn integrate_pose(pose: &Pose, xi: &Twist, h: f64) -> Pose {
    let dq = quat_exp(&(xi.angular * h));
    Pose::new(dq * pose.q, pose.p + xi.linear * h)
}

/// Cotangent of a pose: quaternion components `(w, x, y, z)` and position.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseGrad {
    pub q: Vector4<f64>,
    pub p: Vector3<f64>,
}

/// Vector-Jacobian product of [`integrate_pose`]. Returns the cotangents of
/// the input pose and of the twist.
pub fn integrate_pose_vjp(pose: &Pose, xi: &Twist, h: f64, g: &PoseGrad) -> (PoseGrad, Twist) {
    let phi = xi.angular * h;
    let e = quat_exp(&phi);
    let r = e * pose.q;
    let r_vec = wxyz(&r);
    let norm = r_vec.norm();
    let n = r_vec / norm;
    let sign = if n[0] < 0.0 { -1.0 } else { 1.0 };
    let g_n = g.q * sign;
    let g_r = (g_n - n * n.dot(&g_n)) / norm;
    let g_q = left_matrix(&e).transpose() * g_r;
    let g_e = right_matrix(&pose.q).transpose() * g_r;
    let g_phi = quat_exp_jacobian(&phi).transpose() * g_e;
    (
        PoseGrad { q: g_q, p: g.p },
        Twist::new(g_phi * h, g.p * h),
    )
}

pub fn canonicalize(q: Quaternion<f64>) -> Quaternion<f64> {
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

pub fn wxyz(q: &Quaternion<f64>) -> Vector4<f64> {
    Vector4::new(q.w, q.i, q.j, q.k)
}

pub fn from_wxyz(v: &Vector4<f64>) -> Quaternion<f64> {
    Quaternion::new(v[0], v[1], v[2], v[3])
}

/// `L(a)` with `wxyz(a ⊗ b) = L(a) · wxyz(b)`.
pub fn left_matrix(a: &Quaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (a.w, a.i, a.j, a.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// `R(b)` with `wxyz(a ⊗ b) = R(b) · wxyz(a)`.
pub fn right_matrix(b: &Quaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (b.w, b.i, b.j, b.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// Unit quaternion of a rotation by `‖φ‖` about `φ/‖φ‖`.
pub fn quat_exp(phi: &Vector3<f64>) -> Quaternion<f64> {
    let theta = phi.norm();
    if theta < SMALL_ANGLE {
        let v = phi * 0.5;
        return Quaternion::new(1.0, v.x, v.y, v.z).normalize();
    }
    let half = 0.5 * theta;
    let s = half.sin() / theta;
    Quaternion::new(half.cos(), phi.x * s, phi.y * s, phi.z * s)
}

/// Jacobian of `wxyz(quat_exp(φ))` with respect to `φ`.
pub fn quat_exp_jacobian(phi: &Vector3<f64>) -> Matrix4x3<f64> {
    let theta = phi.norm();
    let mut j = Matrix4x3::zeros();
    if theta < SMALL_ANGLE {
        j.fixed_view_mut::<1, 3>(0, 0).copy_from(&(-phi.transpose() * 0.25));
        j.fixed_view_mut::<3, 3>(1, 0).copy_from(&(Matrix3::identity() * 0.5));
        return j;
    }
    let u = phi / theta;
    let half = 0.5 * theta;
    let (s, c) = half.sin_cos();
    j.fixed_view_mut::<1, 3>(0, 0).copy_from(&(-u.transpose() * (0.5 * s)));
    let uu = u * u.transpose();
    let block = (Matrix3::identity() - uu) * (s / theta) + uu * (0.5 * c);
    j.fixed_view_mut::<3, 3>(1, 0).copy_from(&block);
    j
}

/// Half the rotation angle of `q`, invariant to the sign of `q`.
/// This is the norm of the quaternion logarithm.
pub fn quat_log_norm(q: &Quaternion<f64>) -> f64 {
    let n = q.imag().norm();
    n.atan2(q.w.abs())
}

/// Gradient of `quat_log_norm(q)²` with respect to `wxyz(q)`.
pub fn quat_log_norm_sq_grad(q: &Quaternion<f64>) -> Vector4<f64> {
    let v = q.imag();
    let n = v.norm();
    let a = q.w.abs();
    let d = n * n + a * a;
    let ratio = if n < 1e-12 { 1.0 / a } else { n.atan2(a) / n };
    let gv = v * (2.0 * ratio * a / d);
    let gw = -2.0 * ratio * n * n / d * q.w.signum();
    Vector4::new(gw, gv.x, gv.y, gv.z)
}

/// Geodesic angle between two orientations, radians.
pub fn geodesic_angle(a: &Quaternion<f64>, b: &Quaternion<f64>) -> f64 {
    let r = b.conjugate() * a;
    2.0 * quat_log_norm(&r)
}

pub fn yaw_of(q: &Quaternion<f64>) -> f64 {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
}

/// Gradient of [`yaw_of`] with respect to `wxyz(q)`.
pub fn yaw_grad(q: &Quaternion<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let a = 2.0 * (w * z + x * y);
    let b = 1.0 - 2.0 * (y * y + z * z);
    let d = a * a + b * b;
    let da = Vector4::new(2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w);
    let db = Vector4::new(0.0, 0.0, -4.0 * y, -4.0 * z);
    (da * b - db * a) / d
}
