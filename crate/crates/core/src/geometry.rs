//! Points, unit quaternions and rigid transforms. All lengths are millimetres,
//! all user-facing angles are degrees.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat3;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite component in {0}")]
    NonFinite(&'static str),
    #[error("zero-norm quaternion")]
    ZeroQuaternion,
    #[error("zero-length axis")]
    ZeroAxis,
}

/// A point (or free vector) in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Point3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zeros() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, o: Self) -> T {
        (self - o).norm()
    }

    /// Unit vector in the same direction; `None` for a zero vector.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n > T::zero() && n.is_finite() {
            Some(self * (T::one() / n))
        } else {
            None
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Angle between two vectors in degrees, in [0, 180].
    pub fn angle_deg(self, o: Self) -> T {
        let c = self.cross(o).norm();
        let d = self.dot(o);
        c.atan2(d).to_degrees()
    }

    pub fn cast<U: Real>(self) -> Point3<U> {
        Point3::new(
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }
}

impl<T: Real> Add for Point3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Point3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Mul<T> for Point3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> Neg for Point3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real + Serialize> Serialize for Point3<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.x, self.y, self.z].serialize(s)
    }
}

impl<'de, T: Real + Deserialize<'de>> Deserialize<'de> for Point3<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[T; 3]>::deserialize(d)?;
        let p = Point3::from_array(a);
        if !p.is_finite() {
            return Err(serde::de::Error::custom("non-finite point component"));
        }
        Ok(p)
    }
}

/// Unit quaternion `w + xi + yj + zk` with canonical sign `w ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion<T> {
    w: T,
    x: T,
    y: T,
    z: T,
}

impl<T: Real> UnitQuaternion<T> {
    pub fn identity() -> Self {
        Self {
            w: T::one(),
            x: T::zero(),
            y: T::zero(),
            z: T::zero(),
        }
    }

    /// Normalizes and canonicalizes an arbitrary non-zero quaternion.
    pub fn try_new(w: T, x: T, y: T, z: T) -> Result<Self, GeometryError> {
        if !(w.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(GeometryError::NonFinite("quaternion"));
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n <= T::epsilon() {
            return Err(GeometryError::ZeroQuaternion);
        }
        Ok(Self::canonical(w / n, x / n, y / n, z / n))
    }

    fn canonical(w: T, x: T, y: T, z: T) -> Self {
        // Resolve the double cover; for w == 0 fall through to the first
        // non-zero vector component.
        let flip = if w != T::zero() {
            w < T::zero()
        } else if x != T::zero() {
            x < T::zero()
        } else if y != T::zero() {
            y < T::zero()
        } else {
            z < T::zero()
        };
        if flip {
            Self {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            Self { w, x, y, z }
        }
    }

    fn renormalized(w: T, x: T, y: T, z: T) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self::canonical(w / n, x / n, y / n, z / n)
    }

    /// Rotation of `angle_rad` about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Point3<T>, angle_rad: T) -> Result<Self, GeometryError> {
        let a = axis.normalized().ok_or(GeometryError::ZeroAxis)?;
        let half = angle_rad * T::lit(0.5);
        let s = half.sin();
        Ok(Self::renormalized(half.cos(), a.x * s, a.y * s, a.z * s))
    }

    /// Exponential map of a rotation vector (axis × angle, radians).
    pub fn exp(v: Point3<T>) -> Self {
        let theta = v.norm();
        if theta < T::lit(1e-12) {
            return Self::renormalized(T::one(), v.x * T::lit(0.5), v.y * T::lit(0.5), v.z * T::lit(0.5));
        }
        let half = theta * T::lit(0.5);
        let k = half.sin() / theta;
        Self::renormalized(half.cos(), v.x * k, v.y * k, v.z * k)
    }

    /// Logarithm map: rotation vector with angle in [0, π].
    pub fn log(&self) -> Point3<T> {
        let v = Point3::new(self.x, self.y, self.z);
        let s = v.norm();
        if s < T::lit(1e-12) {
            return v * T::lit(2.0);
        }
        let angle = T::lit(2.0) * s.atan2(self.w);
        v * (angle / s)
    }

    /// Rotation angle in radians, in [0, π].
    pub fn angle(&self) -> T {
        let s = Point3::new(self.x, self.y, self.z).norm();
        T::lit(2.0) * s.atan2(self.w.abs())
    }

    pub fn wxyz(&self) -> [T; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn conjugate(&self) -> Self {
        Self::canonical(self.w, -self.x, -self.y, -self.z)
    }

    pub fn mul_quat(&self, o: &Self) -> Self {
        let (a, b) = (self, o);
        Self::renormalized(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn rotate(&self, v: Point3<T>) -> Point3<T> {
        // v' = v + 2w (u × v) + 2 u × (u × v)
        let u = Point3::new(self.x, self.y, self.z);
        let two = T::lit(2.0);
        let uv = u.cross(v);
        let uuv = u.cross(uv);
        v + uv * (two * self.w) + uuv * two
    }

    pub fn to_matrix(&self) -> Mat3<T> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let one = T::one();
        let two = T::lit(2.0);
        Mat3::new([
            [
                one - two * (y * y + z * z),
                two * (x * y - w * z),
                two * (x * z + w * y),
            ],
            [
                two * (x * y + w * z),
                one - two * (x * x + z * z),
                two * (y * z - w * x),
            ],
            [
                two * (x * z - w * y),
                two * (y * z + w * x),
                one - two * (x * x + y * y),
            ],
        ])
    }

    /// Quaternion of a rotation matrix (Shepperd's method). The input is
    /// assumed orthonormal with det = +1.
    pub fn from_matrix(r: &Mat3<T>) -> Result<Self, GeometryError> {
        let m = &r.m;
        let one = T::one();
        let quarter = T::lit(0.25);
        let trace = m[0][0] + m[1][1] + m[2][2];
        let (w, x, y, z);
        if trace > m[0][0].max(m[1][1]).max(m[2][2]) {
            let s = (one + trace).sqrt() * T::lit(2.0);
            w = quarter * s;
            x = (m[2][1] - m[1][2]) / s;
            y = (m[0][2] - m[2][0]) / s;
            z = (m[1][0] - m[0][1]) / s;
        } else if m[0][0] >= m[1][1] && m[0][0] >= m[2][2] {
            let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::lit(2.0);
            w = (m[2][1] - m[1][2]) / s;
            x = quarter * s;
            y = (m[0][1] + m[1][0]) / s;
            z = (m[0][2] + m[2][0]) / s;
        } else if m[1][1] >= m[2][2] {
            let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::lit(2.0);
            w = (m[0][2] - m[2][0]) / s;
            x = (m[0][1] + m[1][0]) / s;
            y = quarter * s;
            z = (m[1][2] + m[2][1]) / s;
        } else {
            let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::lit(2.0);
            w = (m[1][0] - m[0][1]) / s;
            x = (m[0][2] + m[2][0]) / s;
            y = (m[1][2] + m[2][1]) / s;
            z = quarter * s;
        }
        Self::try_new(w, x, y, z)
    }
}

/// Rigid-body transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T> {
    pub rotation: UnitQuaternion<T>,
    pub translation: Point3<T>,
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Point3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<T>, translation: Point3<T>) -> Result<Self, GeometryError> {
        if !translation.is_finite() {
            return Err(GeometryError::NonFinite("translation"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(x: T, y: T, z: T) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Point3::new(x, y, z),
        }
    }

    pub fn from_rotation(rotation: UnitQuaternion<T>) -> Self {
        Self {
            rotation,
            translation: Point3::zeros(),
        }
    }

    /// Pure rotation about the z axis, degrees.
    pub fn rot_z_deg(deg: T) -> Self {
        Self::from_axis_angle_deg(Point3::new(T::zero(), T::zero(), T::one()), deg)
    }

    pub fn rot_x_deg(deg: T) -> Self {
        Self::from_axis_angle_deg(Point3::new(T::one(), T::zero(), T::zero()), deg)
    }

    pub fn rot_y_deg(deg: T) -> Self {
        Self::from_axis_angle_deg(Point3::new(T::zero(), T::one(), T::zero()), deg)
    }

    /// Pure rotation; a zero axis yields the identity.
    pub fn from_axis_angle_deg(axis: Point3<T>, deg: T) -> Self {
        let rotation =
            UnitQuaternion::from_axis_angle(axis, deg.to_radians()).unwrap_or_else(|_| UnitQuaternion::identity());
        Self::from_rotation(rotation)
    }

    pub fn from_matrix(r: &Mat3<T>, t: Point3<T>) -> Result<Self, GeometryError> {
        Self::new(UnitQuaternion::from_matrix(r)?, t)
    }

    /// `self ∘ other`: maps `p` to `self(other(p))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.mul_quat(&other.rotation),
            translation: self.rotation.rotate(other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rinv = self.rotation.conjugate();
        Self {
            rotation: rinv,
            translation: -rinv.rotate(self.translation),
        }
    }

    pub fn transform_point(&self, p: Point3<T>) -> Point3<T> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn rotate_vector(&self, v: Point3<T>) -> Point3<T> {
        self.rotation.rotate(v)
    }

    pub fn rotation_matrix(&self) -> Mat3<T> {
        self.rotation.to_matrix()
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        let q = self.rotation.wxyz();
        RigidTransform {
            rotation: UnitQuaternion::renormalized(
                U::lit(q[0].to_f64_lossy()),
                U::lit(q[1].to_f64_lossy()),
                U::lit(q[2].to_f64_lossy()),
                U::lit(q[3].to_f64_lossy()),
            ),
            translation: self.translation.cast(),
        }
    }
}

/// `compose(a, b)` maps a point `p` to `a(b(p))`.
pub fn compose<T: Real>(a: &RigidTransform<T>, b: &RigidTransform<T>) -> RigidTransform<T> {
    a.compose(b)
}

pub fn invert<T: Real>(t: &RigidTransform<T>) -> RigidTransform<T> {
    t.inverse()
}

/// Discrepancy between two poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError<T> {
    /// Angle of the relative rotation, degrees in [0, 180].
    pub rotation_error: T,
    /// Distance between the translations, millimetres.
    pub translation_error: T,
}

pub fn pose_error<T: Real>(a: &RigidTransform<T>, b: &RigidTransform<T>) -> PoseError<T> {
    let rel = a.rotation.conjugate().mul_quat(&b.rotation);
    PoseError {
        rotation_error: rel.angle().to_degrees(),
        translation_error: a.translation.distance(b.translation),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
struct TransformWire<T> {
    q: [T; 4],
    t: [T; 3],
}

impl<T: Real + Serialize> Serialize for RigidTransform<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TransformWire {
            q: self.rotation.wxyz(),
            t: self.translation.to_array(),
        }
        .serialize(s)
    }
}

impl<'de, T: Real + Deserialize<'de>> Deserialize<'de> for RigidTransform<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = TransformWire::<T>::deserialize(d)?;
        let q = UnitQuaternion::try_new(w.q[0], w.q[1], w.q[2], w.q[3]).map_err(serde::de::Error::custom)?;
        RigidTransform::new(q, Point3::from_array(w.t)).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type T64 = RigidTransform<f64>;

    fn close(a: &T64, b: &T64, tol: f64) -> bool {
        let qa = a.rotation.wxyz();
        let qb = b.rotation.wxyz();
        (0..4).all(|k| (qa[k] - qb[k]).abs() < tol)
            && a.translation.distance(b.translation) < tol
    }

    #[test]
    fn compose_with_identity() {
        let t = T64::rot_x_deg(33.0).compose(&T64::from_translation(1.0, -2.0, 5.0));
        assert!(close(&compose(&t, &T64::identity()), &t, 1e-12));
    }

    #[test]
    fn compose_translations_add() {
        let c = compose(
            &T64::from_translation(2.0, 0.0, 0.0),
            &T64::from_translation(3.0, 0.0, 0.0),
        );
        assert!(close(&c, &T64::from_translation(5.0, 0.0, 0.0), 1e-12));
    }

    #[test]
    fn rotz_after_translate_moves_origin() {
        let c = compose(&T64::rot_z_deg(90.0), &T64::from_translation(1.0, 0.0, 0.0));
        let p = c.transform_point(Point3::zeros());
        assert!(p.distance(Point3::new(0.0, 1.0, 0.0)) < 1e-12);
    }

    #[test]
    fn invert_cases() {
        assert!(close(&invert(&T64::identity()), &T64::identity(), 1e-15));
        assert!(close(
            &invert(&T64::from_translation(1.0, 2.0, 3.0)),
            &T64::from_translation(-1.0, -2.0, -3.0),
            1e-15
        ));
        let c = compose(&T64::rot_z_deg(90.0), &T64::from_translation(1.0, 0.0, 0.0));
        let p = invert(&c).transform_point(Point3::new(0.0, 1.0, 0.0));
        assert!(p.norm() < 1e-12);
    }

    #[test]
    fn pose_error_examples() {
        let t = T64::rot_y_deg(12.0).compose(&T64::from_translation(4.0, 0.0, 1.0));
        let e = pose_error(&t, &t);
        assert!(e.rotation_error.abs() < 1e-9 && e.translation_error.abs() < 1e-9);

        let e = pose_error(&T64::identity(), &T64::rot_z_deg(180.0));
        assert!((e.rotation_error - 180.0).abs() < 1e-9);
        assert!(e.translation_error.abs() < 1e-12);

        let b = compose(&T64::rot_z_deg(30.0), &T64::from_translation(3.0, 4.0, 0.0));
        let e = pose_error(&T64::identity(), &b);
        assert!((e.rotation_error - 30.0).abs() < 1e-9);
        assert!((e.translation_error - 5.0).abs() < 1e-9);
    }

    #[test]
    fn quaternion_sign_is_canonical() {
        let q = UnitQuaternion::try_new(-0.5, 0.5, -0.5, 0.5).unwrap();
        assert!(q.wxyz()[0] > 0.0);
        let half_turn = T64::rot_z_deg(180.0);
        assert_eq!(half_turn.rotation.wxyz()[0].abs() < 1e-15, true);
        assert!(half_turn.rotation.wxyz()[3] > 0.0);
    }

    #[test]
    fn matrix_round_trip() {
        for axis in [
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.3, -0.4, 0.8),
            Point3::new(0.0, 1.0, 1e-3),
        ] {
            for deg in [0.0, 10.0, 90.0, 179.9, 180.0] {
                let t = T64::from_axis_angle_deg(axis, deg);
                let back = UnitQuaternion::from_matrix(&t.rotation_matrix()).unwrap();
                let e = pose_error(&t, &T64::from_rotation(back));
                assert!(e.rotation_error < 1e-6, "{axis:?} {deg}: {}", e.rotation_error);
                assert!((t.rotation_matrix().det() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn json_shape() {
        let t = compose(&T64::rot_z_deg(90.0), &T64::from_translation(1.0, 2.0, 3.0));
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.starts_with("{\"q\":[") && s.contains("\"t\":["));
        let back: T64 = serde_json::from_str(&s).unwrap();
        assert!(close(&back, &t, 1e-15));
        // negative-w input is canonicalized on load
        let neg: T64 = serde_json::from_str(r#"{"q":[-1,0,0,0],"t":[0,0,0]}"#).unwrap();
        assert_eq!(neg.rotation.wxyz(), [1.0, 0.0, 0.0, 0.0]);
        assert!(serde_json::from_str::<T64>(r#"{"q":[0,0,0,0],"t":[0,0,0]}"#).is_err());
    }

    #[test]
    fn f32_instantiation() {
        let a = RigidTransform::<f32>::rot_z_deg(90.0).compose(&RigidTransform::from_translation(1.0, 0.0, 0.0));
        let p = a.transform_point(Point3::zeros());
        assert!((p.y - 1.0).abs() < 1e-6);
    }

    fn arb_transform() -> impl Strategy<Value = T64> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -180.0f64..180.0,
            prop::array::uniform3(-500.0f64..500.0),
        )
            .prop_map(|(axis, deg, t)| {
                let axis = Point3::from_array(axis);
                let r = if axis.norm() < 1e-3 {
                    T64::identity()
                } else {
                    T64::from_axis_angle_deg(axis, deg)
                };
                T64::from_translation(t[0], t[1], t[2]).compose(&r)
            })
    }

    proptest! {
        #[test]
        fn associativity(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let l = compose(&compose(&a, &b), &c);
            let r = compose(&a, &compose(&b, &c));
            prop_assert!(close(&l, &r, 1e-9));
        }

        #[test]
        fn inverse_is_identity(a in arb_transform()) {
            prop_assert!(close(&compose(&a, &invert(&a)), &T64::identity(), 1e-9));
            let q = a.rotation.wxyz();
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
            prop_assert!((a.rotation_matrix().det() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn isometry(a in arb_transform(), p in prop::array::uniform3(-100.0f64..100.0), q in prop::array::uniform3(-100.0f64..100.0)) {
            let (p, q) = (Point3::from_array(p), Point3::from_array(q));
            let d0 = p.distance(q);
            let d1 = a.transform_point(p).distance(a.transform_point(q));
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn pose_error_symmetric(a in arb_transform(), b in arb_transform()) {
            let ab = pose_error(&a, &b);
            let ba = pose_error(&b, &a);
            prop_assert!((ab.rotation_error - ba.rotation_error).abs() < 1e-9);
            prop_assert!((ab.translation_error - ba.translation_error).abs() < 1e-9);
            prop_assert!(ab.rotation_error >= 0.0 && ab.rotation_error <= 180.0 + 1e-9);
        }
    }
}
