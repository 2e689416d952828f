//! Observation-pyramid computations over the calibrated field-of-view table:
//! FOV at a distance, rectangle feasibility, line-of-sight checks and the
//! percentage-of-space accuracy rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point3, RigidTransform};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FovError {
    #[error("field-of-view table needs at least two rows")]
    TooFewRows,
    #[error("field-of-view table distances must be strictly increasing (row {0})")]
    NonIncreasing(usize),
    #[error("field-of-view table entry must be positive and finite (row {0})")]
    NonPositive(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

/// One calibrated row: imaging characteristics at a given working distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct FovRow<T> {
    pub distance: T,
    pub fov_x: T,
    pub fov_y: T,
    pub sigma_z: T,
    /// Stored for completeness, not used by any computation.
    pub optical_blur: T,
    pub pixel_size: T,
}

/// Interpolated lookup result. `clamped` is set when the query distance was
/// outside the knot range and the boundary value was returned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookup<V> {
    pub value: V,
    pub clamped: bool,
}

/// Distance-indexed table with piecewise-linear interpolation between knots.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Serialize"))]
#[serde(transparent)]
pub struct FovTable<T> {
    rows: Vec<FovRow<T>>,
}

impl<'de, T: Real + Deserialize<'de>> Deserialize<'de> for FovTable<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<FovRow<T>>::deserialize(d)?;
        FovTable::new(rows).map_err(serde::de::Error::custom)
    }
}

/// The seven measured rows, 250 mm to 700 mm working distance.
pub const DEFAULT_ROWS: [[f64; 6]; 7] = [
    // distance, sigma_z, fov_x, fov_y, optical_blur, pixel_size
    [250.0, 0.033, 198.44, 129.2, 1.610, 0.106],
    [260.0, 0.036, 202.37, 134.37, 2.378, 0.111],
    [380.0, 0.106, 408.60, 270.68, 2.377, 0.223],
    [400.0, 0.117, 435.37, 284.93, 1.937, 0.234],
    [500.0, 0.183, 565.23, 356.16, 0.262, 0.293],
    [600.0, 0.264, 658.27, 427.39, 1.304, 0.352],
    [700.0, 0.359, 751.32, 498.63, 2.051, 0.41],
];

impl<T: Real> Default for FovTable<T> {
    fn default() -> Self {
        let rows = DEFAULT_ROWS
            .iter()
            .map(|r| FovRow {
                distance: T::lit(r[0]),
                sigma_z: T::lit(r[1]),
                fov_x: T::lit(r[2]),
                fov_y: T::lit(r[3]),
                optical_blur: T::lit(r[4]),
                pixel_size: T::lit(r[5]),
            })
            .collect();
        Self { rows }
    }
}

impl<T: Real> FovTable<T> {
    pub fn new(rows: Vec<FovRow<T>>) -> Result<Self, FovError> {
        if rows.len() < 2 {
            return Err(FovError::TooFewRows);
        }
        for (i, r) in rows.iter().enumerate() {
            let vals = [r.distance, r.fov_x, r.fov_y, r.sigma_z, r.pixel_size];
            if vals.iter().any(|v| !v.is_finite() || *v <= T::zero()) || !r.optical_blur.is_finite() {
                return Err(FovError::NonPositive(i));
            }
            if i > 0 && r.distance <= rows[i - 1].distance {
                return Err(FovError::NonIncreasing(i));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[FovRow<T>] {
        &self.rows
    }

    pub fn near(&self) -> T {
        self.rows[0].distance
    }

    pub fn far(&self) -> T {
        self.rows[self.rows.len() - 1].distance
    }

    /// Piecewise-linear interpolation of a column; exact at the knots.
    pub fn interpolate(&self, distance: T, column: impl Fn(&FovRow<T>) -> T) -> Lookup<T> {
        let first = &self.rows[0];
        let last = &self.rows[self.rows.len() - 1];
        if distance <= first.distance || distance.is_nan() {
            return Lookup {
                value: column(first),
                clamped: !(distance == first.distance),
            };
        }
        if distance >= last.distance {
            return Lookup {
                value: column(last),
                clamped: distance != last.distance,
            };
        }
        // first index whose distance >= query
        let hi = self.rows.partition_point(|r| r.distance < distance);
        let (a, b) = (&self.rows[hi - 1], &self.rows[hi]);
        if distance == b.distance {
            return Lookup {
                value: column(b),
                clamped: false,
            };
        }
        let f = (distance - a.distance) / (b.distance - a.distance);
        let (va, vb) = (column(a), column(b));
        Lookup {
            value: va + (vb - va) * f,
            clamped: false,
        }
    }

    pub fn sigma_z(&self, distance: T) -> Lookup<T> {
        self.interpolate(distance, |r| r.sigma_z)
    }

    pub fn pixel_size(&self, distance: T) -> Lookup<T> {
        self.interpolate(distance, |r| r.pixel_size)
    }

    pub fn field_of_view(&self, distance: T) -> Lookup<(T, T)> {
        let x = self.interpolate(distance, |r| r.fov_x);
        let y = self.interpolate(distance, |r| r.fov_y);
        Lookup {
            value: (x.value, y.value),
            clamped: x.clamped,
        }
    }

    /// Largest `fov / distance` ratio over the knots, per axis. Rays cast with
    /// these slopes cover the whole frustum at every depth.
    pub fn max_slopes(&self) -> (T, T) {
        self.rows.iter().fold((T::zero(), T::zero()), |acc, r| {
            (
                acc.0.max(r.fov_x / r.distance),
                acc.1.max(r.fov_y / r.distance),
            )
        })
    }

    /// True when a camera-frame point lies inside the observation pyramid:
    /// depth within the knot range and inside the FOV rectangle at its depth.
    pub fn contains(&self, p: Point3<T>) -> bool {
        self.contains_between(p, self.near(), self.far())
    }

    pub fn contains_between(&self, p: Point3<T>, near: T, far: T) -> bool {
        if !(p.z >= near && p.z <= far) {
            return false;
        }
        let (fx, fy) = self.field_of_view(p.z).value;
        let half = T::lit(0.5);
        p.x.abs() <= fx * half && p.y.abs() <= fy * half
    }
}

/// Result of fitting an observation rectangle into the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RectangleFit<T> {
    Feasible { distance_mm: T },
    Infeasible,
}

/// Smallest working distance at which a `rect_x × rect_y` rectangle fits in
/// the field of view, found by bisection over the monotone interpolant.
pub fn observation_rectangle_fit<T: Real>(
    table: &FovTable<T>,
    rect_x: T,
    rect_y: T,
) -> Result<RectangleFit<T>, FovError> {
    if !(rect_x > T::zero() && rect_y > T::zero()) {
        return Err(FovError::InvalidArgument("rectangle dimensions must be positive"));
    }
    let fits = |d: T| {
        let (fx, fy) = table.field_of_view(d).value;
        fx >= rect_x && fy >= rect_y
    };
    let (mut lo, mut hi) = (table.near(), table.far());
    if fits(lo) {
        return Ok(RectangleFit::Feasible { distance_mm: lo });
    }
    if !fits(hi) {
        return Ok(RectangleFit::Infeasible);
    }
    let tol = T::lit(1e-10) * hi;
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = (lo + hi) * T::lit(0.5);
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(RectangleFit::Feasible { distance_mm: hi })
}

/// Frustum between `near` and `far` sharing the camera's FOV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct ViewFrustum<T> {
    pub near: T,
    pub far: T,
    pub fov_table: FovTable<T>,
}

impl<T: Real> ViewFrustum<T> {
    /// Near/far are clamped into the table's knot range.
    pub fn new(near: T, far: T, fov_table: FovTable<T>) -> Result<Self, FovError> {
        let near = near.max(fov_table.near()).min(fov_table.far());
        let far = far.max(fov_table.near()).min(fov_table.far());
        if !(near < far) {
            return Err(FovError::InvalidArgument("frustum near must be below far"));
        }
        Ok(Self {
            near,
            far,
            fov_table,
        })
    }

    pub fn from_table(fov_table: FovTable<T>) -> Self {
        Self {
            near: fov_table.near(),
            far: fov_table.far(),
            fov_table,
        }
    }

    pub fn contains(&self, p_camera: Point3<T>) -> bool {
        self.fov_table.contains_between(p_camera, self.near, self.far)
    }
}

/// Convex box occluder: a pose (box frame in the parent frame) and
/// half-extents along the box axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct OrientedBox<T> {
    pub pose: RigidTransform<T>,
    pub half_extents: Point3<T>,
}

impl<T: Real> OrientedBox<T> {
    pub fn axis_aligned(min: Point3<T>, max: Point3<T>) -> Self {
        let half = T::lit(0.5);
        let c = (min + max) * half;
        Self {
            pose: RigidTransform::from_translation(c.x, c.y, c.z),
            half_extents: (max - min) * half,
        }
    }

    pub fn transformed(&self, t: &RigidTransform<T>) -> Self {
        Self {
            pose: t.compose(&self.pose),
            half_extents: self.half_extents,
        }
    }

    /// Parametric entry distance of the ray `origin + s·dir` into the box,
    /// restricted to `s ∈ [s_min, s_max]` (slab method).
    pub fn ray_entry(&self, origin: Point3<T>, dir: Point3<T>, s_min: T, s_max: T) -> Option<T> {
        let inv = self.pose.inverse();
        let o = inv.transform_point(origin).to_array();
        let d = inv.rotate_vector(dir).to_array();
        let h = self.half_extents.to_array();
        let (mut t0, mut t1) = (s_min, s_max);
        for k in 0..3 {
            if d[k].abs() < T::lit(1e-15) {
                if o[k] < -h[k] || o[k] > h[k] {
                    return None;
                }
                continue;
            }
            let inv_d = T::one() / d[k];
            let mut a = (-h[k] - o[k]) * inv_d;
            let mut b = (h[k] - o[k]) * inv_d;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }

    /// True when the segment `a → b` touches the box.
    pub fn intersects_segment(&self, a: Point3<T>, b: Point3<T>) -> bool {
        self.ray_entry(a, b - a, T::zero(), T::one()).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityReason {
    Visible,
    OutsideFrustum,
    Occluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visibility {
    pub visible: bool,
    pub reason: VisibilityReason,
}

/// Line-of-sight check. `camera_pose` is the camera in the parent frame in
/// which `occluders` and `target` are expressed; the camera looks along its
/// +z axis.
pub fn blind_spot_check<T: Real>(
    camera_pose: &RigidTransform<T>,
    frustum: &ViewFrustum<T>,
    occluders: &[OrientedBox<T>],
    target: Point3<T>,
) -> Visibility {
    let in_cam = camera_pose.inverse().transform_point(target);
    if !frustum.contains(in_cam) {
        return Visibility {
            visible: false,
            reason: VisibilityReason::OutsideFrustum,
        };
    }
    let origin = camera_pose.translation;
    if occluders.iter().any(|b| b.intersects_segment(origin, target)) {
        return Visibility {
            visible: false,
            reason: VisibilityReason::Occluded,
        };
    }
    Visibility {
        visible: true,
        reason: VisibilityReason::Visible,
    }
}

/// Rule-of-thumb accuracy band: 1 % to 5 % of the observation-space edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBand<T> {
    pub low_mm: T,
    pub high_mm: T,
    pub note: &'static str,
}

pub const ACCURACY_RULE_NOTE: &str = "coarse rule of thumb over the observation-space edge length; \
the calibrated depth-noise table reports sub-millimetre Z accuracy at 250-700 mm, far tighter than this band";

pub fn accuracy_estimate<T: Real>(observation_space_extent: T) -> Result<AccuracyBand<T>, FovError> {
    if !(observation_space_extent > T::zero()) || !observation_space_extent.is_finite() {
        return Err(FovError::InvalidArgument("observation space extent must be positive"));
    }
    Ok(AccuracyBand {
        low_mm: observation_space_extent * T::lit(0.01),
        high_mm: observation_space_extent * T::lit(0.05),
        note: ACCURACY_RULE_NOTE,
    })
}

/// JSON report of feasibility checks, as printed by the `fov` subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct FovReport {
    pub near_mm: f64,
    pub far_mm: f64,
    pub knots: Vec<FovKnotReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rectangle: Option<RectangleReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_rule: Option<AccuracyBand<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance_query: Option<DistanceQuery>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FovKnotReport {
    pub distance_mm: f64,
    pub fov_x_mm: f64,
    pub fov_y_mm: f64,
    pub sigma_z_mm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RectangleReport {
    pub rect_x_mm: f64,
    pub rect_y_mm: f64,
    pub fit: RectangleFit<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistanceQuery {
    pub distance_mm: f64,
    pub fov_x_mm: f64,
    pub fov_y_mm: f64,
    pub sigma_z_mm: f64,
    pub clamped: bool,
}
