//! Eye-in-hand calibration `A X = X B`.
//!
//! `A` poses are the robot flange in the base frame, `B` poses are the
//! calibration target in the camera frame and `X` is the camera in the flange
//! frame. With the target fixed in the base, `Aᵢ X Bᵢ` is constant, which gives
//! the motion constraint `(Aᵢ⁻¹ Aⱼ) X = X (Bᵢ Bⱼ⁻¹)` for every pair `i < j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fov::FovTable;
use crate::geometry::{pose_error, Point3, RigidTransform};
use crate::linalg::{mat3_eigen, symmetric_eigen, Mat3};
use crate::scalar::Real;
use crate::scene::CameraModel;
use crate::{Point, Transform};

pub const SOLVER_NAME: &str = "park-martin";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HandEyeError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("relative rotation axes are nearly parallel (max separation {max_axis_separation_deg:.3} deg)")]
    InsufficientMotion { max_axis_separation_deg: f64 },
    #[error("observation box is outside the frustum at every standoff")]
    InfeasibleBox,
    #[error("corner lists differ in length: {observed} vs {reference}")]
    LengthMismatch { observed: usize, reference: usize },
    #[error("need at least 4 corners, got {0}")]
    TooFewCorners(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

/// One robot station: flange pose and the target pose seen by the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct CalibrationSample<T> {
    pub flange_in_base: RigidTransform<T>,
    pub target_in_camera: RigidTransform<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct HandEyeResult<T> {
    /// The `X` of `A X = X B`.
    pub camera_in_flange: RigidTransform<T>,
    /// RMS rotation discrepancy over motion pairs, degrees.
    pub rotation_residual: T,
    /// RMS translation discrepancy over motion pairs, mm.
    pub translation_residual: T,
    pub sample_count: usize,
    pub pair_count: usize,
    pub solver: String,
}

struct Motion<T> {
    a: RigidTransform<T>,
    b: RigidTransform<T>,
}

fn motions<T: Real>(samples: &[CalibrationSample<T>]) -> Vec<Motion<T>> {
    let mut out = Vec::with_capacity(samples.len() * (samples.len().saturating_sub(1)) / 2);
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            let (si, sj) = (&samples[i], &samples[j]);
            out.push(Motion {
                a: si.flange_in_base.inverse().compose(&sj.flange_in_base),
                b: si.target_in_camera.compose(&sj.target_in_camera.inverse()),
            });
        }
    }
    out
}

/// Largest angle between the rotation axes (as lines) of motions that rotate
/// by at least half a degree, degrees.
fn max_axis_separation<T: Real>(axes: &[Point3<T>]) -> T {
    let mut best = T::zero();
    for i in 0..axes.len() {
        for j in (i + 1)..axes.len() {
            let a = axes[i].angle_deg(axes[j]);
            best = best.max(a.min(T::lit(180.0) - a));
        }
    }
    best
}

/// Solves `A X = X B` over all sample pairs: rotation by the log-map least
/// squares of Park and Martin, then translation by linear least squares.
pub fn solve_ax_xb<T: Real>(samples: &[CalibrationSample<T>]) -> Result<HandEyeResult<T>, HandEyeError> {
    if samples.len() < 3 {
        return Err(HandEyeError::TooFewSamples {
            needed: 3,
            got: samples.len(),
        });
    }
    let motions = motions(samples);

    let min_angle = T::lit(0.5f64.to_radians());
    let axes: Vec<Point3<T>> = motions
        .iter()
        .map(|m| m.a.rotation.log())
        .filter(|v| v.norm() >= min_angle)
        .collect();
    let separation = max_axis_separation(&axes);
    if axes.len() < 2 || separation < T::lit(5.0) {
        return Err(HandEyeError::InsufficientMotion {
            max_axis_separation_deg: separation.to_f64().unwrap_or(f64::NAN),
        });
    }

    // M = Σ β αᵀ, R = (MᵀM)^(-1/2) Mᵀ
    let mut m = Mat3::zeros();
    for mo in &motions {
        let alpha = mo.a.rotation.log().to_array();
        let beta = mo.b.rotation.log().to_array();
        m = m.add(&Mat3::outer(beta, alpha));
    }
    let mtm = m.transpose().mul_mat(&m);
    let eig = mat3_eigen(&mtm);
    if !(eig.values[0] > eig.values[2] * T::lit(1e-12)) {
        return Err(HandEyeError::InsufficientMotion {
            max_axis_separation_deg: separation.to_f64().unwrap_or(f64::NAN),
        });
    }
    let inv_sqrt = |flip_smallest: bool| {
        let mut acc = Mat3::zeros();
        for k in 0..3 {
            let v = eig.vector3(k);
            let mut s = T::one() / eig.values[k].sqrt();
            if flip_smallest && k == 0 {
                s = -s;
            }
            acc = acc.add(&Mat3::outer(v, v).scale(s));
        }
        acc
    };
    let mut rot = inv_sqrt(false).mul_mat(&m.transpose());
    if rot.det() < T::zero() {
        rot = inv_sqrt(true).mul_mat(&m.transpose());
    }
    let rx = RigidTransform::from_matrix(&rot, Point3::zeros())
        .map_err(|_| HandEyeError::InsufficientMotion {
            max_axis_separation_deg: separation.to_f64().unwrap_or(f64::NAN),
        })?
        .rotation;

    // (R_A − I) t_X = R_X t_B − t_A
    let mut ata = Mat3::zeros();
    let mut atb = [T::zero(); 3];
    for mo in &motions {
        let c = mo.a.rotation_matrix().sub(&Mat3::identity());
        let d = (rx.rotate(mo.b.translation) - mo.a.translation).to_array();
        ata = ata.add(&c.transpose().mul_mat(&c));
        let ctd = c.transpose().mul_vec(d);
        for k in 0..3 {
            atb[k] = atb[k] + ctd[k];
        }
    }
    let t = ata.solve(atb).ok_or(HandEyeError::InsufficientMotion {
        max_axis_separation_deg: separation.to_f64().unwrap_or(f64::NAN),
    })?;
    let x = RigidTransform {
        rotation: rx,
        translation: Point3::from_array(t),
    };

    let (mut sr, mut st) = (T::zero(), T::zero());
    for mo in &motions {
        let e = pose_error(&mo.a.compose(&x), &x.compose(&mo.b));
        sr = sr + e.rotation_error * e.rotation_error;
        st = st + e.translation_error * e.translation_error;
    }
    let n = T::from_usize(motions.len()).unwrap_or(T::one());
    Ok(HandEyeResult {
        camera_in_flange: x,
        rotation_residual: (sr / n).sqrt(),
        translation_residual: (st / n).sqrt(),
        sample_count: samples.len(),
        pair_count: motions.len(),
        solver: SOLVER_NAME.to_string(),
    })
}

/// Least-squares rigid transform taking `model` points onto `observed`
/// points (Horn's quaternion method). Needs three non-collinear pairs.
pub fn fit_rigid<T: Real>(model: &[Point3<T>], observed: &[Point3<T>]) -> Option<RigidTransform<T>> {
    if model.len() != observed.len() || model.len() < 3 {
        return None;
    }
    let n = T::from_usize(model.len())?;
    let cm = model.iter().fold(Point3::zeros(), |a, p| a + *p) * (T::one() / n);
    let co = observed.iter().fold(Point3::zeros(), |a, p| a + *p) * (T::one() / n);
    let mut s = Mat3::zeros();
    for (m, o) in model.iter().zip(observed) {
        s = s.add(&Mat3::outer((*m - cm).to_array(), (*o - co).to_array()));
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s.m;
    let k = vec![
        vec![sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        vec![syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        vec![szx - sxz, sxy + syx, syy - sxx - szz, syz + szy],
        vec![sxy - syx, szx + sxz, syz + szy, szz - sxx - syy],
    ];
    let eig = symmetric_eigen(&k);
    // a unique maximiser needs a gap to the next eigenvalue
    let scale = eig.values[3].abs().max(T::min_positive_value());
    if eig.values[3] - eig.values[2] <= scale * T::lit(1e-12) {
        return None;
    }
    let q = &eig.vectors[3];
    let rotation = crate::geometry::UnitQuaternion::try_new(q[0], q[1], q[2], q[3]).ok()?;
    let translation = co - rotation.rotate(cm);
    RigidTransform::new(rotation, translation).ok()
}

/// Pose noise for synthetic samples: per-axis standard deviations of a
/// rotation vector (degrees) and a translation (mm), applied as a left
/// perturbation in the measuring (camera) frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseNoise {
    pub rotation_deg: f64,
    pub translation_mm: f64,
}

impl PoseNoise {
    pub fn perturb<R: Rng>(&self, pose: &Transform, rng: &mut R) -> Transform {
        let r = Normal::new(0.0, self.rotation_deg.to_radians().max(0.0)).expect("finite sigma");
        let t = Normal::new(0.0, self.translation_mm.max(0.0)).expect("finite sigma");
        let dr = Point::new(r.sample(rng), r.sample(rng), r.sample(rng));
        let dt = Point::new(t.sample(rng), t.sample(rng), t.sample(rng));
        let delta = Transform {
            rotation: crate::Quaternion::exp(dr),
            translation: dt,
        };
        delta.compose(pose)
    }

    /// Same perturbation applied in the pose's own frame.
    pub fn perturb_local<R: Rng>(&self, pose: &Transform, rng: &mut R) -> Transform {
        let delta = self.perturb(&Transform::identity(), rng);
        pose.compose(&delta)
    }
}

/// Seeded samples consistent with a ground-truth `camera_in_flange` and a
/// fixed `target_in_base`: random flange poses rotated 20° to 60° about random
/// axes, target poses `X⁻¹ A⁻¹ W`, then `noise` applied to the target side.
pub fn synthetic_samples(
    camera_in_flange: &Transform,
    target_in_base: &Transform,
    count: usize,
    noise: PoseNoise,
    seed: u64,
) -> Vec<CalibrationSample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_inv = camera_in_flange.inverse();
    (0..count)
        .map(|_| {
            let axis = Point::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let angle: f64 = rng.gen_range(20.0..60.0);
            let rot = Transform::from_axis_angle_deg(axis, angle);
            let pos = Transform::from_translation(
                rng.gen_range(-150.0..150.0),
                rng.gen_range(-150.0..150.0),
                rng.gen_range(350.0..550.0),
            );
            let a = pos.compose(&rot);
            let b = x_inv.compose(&a.inverse()).compose(target_in_base);
            CalibrationSample {
                flange_in_base: a,
                target_in_camera: noise.perturb(&b, &mut rng),
            }
        })
        .collect()
}

/// Axis-aligned observation box in the robot base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationBox {
    pub min: Point,
    pub max: Point,
}

impl ObservationBox {
    pub fn center(&self) -> Point {
        (self.min + self.max) * 0.5
    }

    pub fn corners(&self) -> [Point; 8] {
        let (a, b) = (self.min, self.max);
        [
            Point::new(a.x, a.y, a.z),
            Point::new(b.x, a.y, a.z),
            Point::new(a.x, b.y, a.z),
            Point::new(b.x, b.y, a.z),
            Point::new(a.x, a.y, b.z),
            Point::new(b.x, a.y, b.z),
            Point::new(a.x, b.y, b.z),
            Point::new(b.x, b.y, b.z),
        ]
    }
}

/// Camera pose at `distance` from `target` along the unit direction
/// `from_dir`, looking at the target. `roll_ref` fixes the image x axis.
pub fn look_at(target: Point, from_dir: Point, distance: f64, roll_ref: Point) -> Transform {
    let z = -from_dir.normalized().unwrap_or(Point::new(0.0, 0.0, 1.0));
    let mut xr = roll_ref - z * roll_ref.dot(z);
    if xr.norm() < 1e-9 {
        xr = crate::marker::plane_basis(z).0;
    }
    let x = xr.normalized().unwrap_or(Point::new(1.0, 0.0, 0.0));
    let y = z.cross(x);
    let rot = Mat3::from_cols(x.to_array(), y.to_array(), z.to_array());
    let pos = target + from_dir * distance;
    Transform::from_matrix(&rot, pos).unwrap_or_else(|_| Transform::from_translation(pos.x, pos.y, pos.z))
}

fn box_in_view(table: &FovTable<f64>, camera: &Transform, corners: &[Point; 8]) -> bool {
    let inv = camera.inverse();
    corners.iter().all(|c| table.contains(inv.transform_point(*c)))
}

/// Axis of the relative rotation between two poses, or `None` for rotations
/// under half a degree.
fn relative_axis(a: &Transform, b: &Transform) -> Option<Point> {
    let v = a.rotation.conjugate().mul_quat(&b.rotation).log();
    (v.norm() >= 0.5f64.to_radians()).then(|| v * (1.0 / v.norm()))
}

fn line_angle_deg(a: Point, b: Point) -> f64 {
    let d = a.angle_deg(b);
    d.min(180.0 - d)
}

/// Plans calibration stations looking at the centre of `observation_box`.
///
/// Standoffs cycle through the working-distance range over which the whole
/// box stays inside the frustum; view directions are picked greedily from a
/// fixed candidate lattice so that consecutive relative rotations have
/// well-separated axes. Deterministic.
pub fn plan_poses(
    observation_box: &ObservationBox,
    count: usize,
    tilt_range_deg: f64,
    camera: &CameraModel,
) -> Result<Vec<Transform>, HandEyeError> {
    if count < 3 {
        return Err(HandEyeError::TooFewSamples { needed: 3, got: count });
    }
    if !(tilt_range_deg > 0.0 && tilt_range_deg <= 60.0) {
        return Err(HandEyeError::InvalidArgument("tilt_range must be in (0, 60] degrees"));
    }
    let table = &camera.fov_table;
    let center = observation_box.center();
    let corners = observation_box.corners();
    let up = Point::new(0.0, 0.0, 1.0);
    let xref = Point::new(1.0, 0.0, 0.0);

    let steps = 200;
    let feasible: Vec<f64> = (0..=steps)
        .map(|k| table.near() + (table.far() - table.near()) * k as f64 / steps as f64)
        .filter(|&d| box_in_view(table, &look_at(center, up, d, xref), &corners))
        .collect();
    let (Some(&d_lo), Some(&d_hi)) = (feasible.first(), feasible.last()) else {
        return Err(HandEyeError::InfeasibleBox);
    };
    let levels = count.min(5);
    let standoff = |k: usize| {
        if levels == 1 || d_hi <= d_lo {
            0.5 * (d_lo + d_hi)
        } else {
            // keep a small margin inside the feasible range
            let (a, b) = (d_lo + 0.1 * (d_hi - d_lo), d_hi - 0.1 * (d_hi - d_lo));
            a + (b - a) * (k % levels) as f64 / (levels - 1) as f64
        }
    };

    // candidate lattice: azimuth × tilt fraction × roll
    let mut lattice = Vec::new();
    for az in 0..12 {
        for tf in [1.0, 2.0 / 3.0, 1.0 / 3.0] {
            for roll in [0.0, 25.0, -25.0] {
                lattice.push((az as f64 * 30.0, tf * tilt_range_deg, roll));
            }
        }
    }
    let make = |(az, tilt, roll): (f64, f64, f64), d: f64| {
        let (az, tilt) = (az.to_radians(), tilt.to_radians());
        let dir = Point::new(tilt.sin() * az.cos(), tilt.sin() * az.sin(), tilt.cos());
        let roll_ref = Transform::from_axis_angle_deg(dir, roll).rotate_vector(xref);
        look_at(center, dir, d, roll_ref)
    };

    let mut poses: Vec<Transform> = Vec::with_capacity(count);
    let mut used = vec![false; lattice.len()];
    let mut axes: Vec<Point> = Vec::new();
    for k in 0..count {
        let d = standoff(k);
        let mut best: Option<(usize, f64, Transform)> = None;
        for (ci, cand) in lattice.iter().enumerate() {
            if used[ci] {
                continue;
            }
            let pose = make(*cand, d);
            if !box_in_view(table, &pose, &corners) {
                continue;
            }
            let score = match poses.last() {
                None => 0.0,
                Some(prev) => {
                    let Some(axis) = relative_axis(prev, &pose) else {
                        continue;
                    };
                    axes.iter().map(|a| line_angle_deg(*a, axis)).fold(90.0, f64::min)
                }
            };
            if best.as_ref().map_or(true, |(_, s, _)| score > *s) {
                best = Some((ci, score, pose));
            }
        }
        let Some((ci, _, pose)) = best else {
            // tilted views do not fit; fall back to the straight view
            let pose = look_at(center, up, d, xref);
            if !box_in_view(table, &pose, &corners) {
                return Err(HandEyeError::InfeasibleBox);
            }
            poses.push(pose);
            continue;
        };
        used[ci] = true;
        if let Some(prev) = poses.last() {
            if let Some(axis) = relative_axis(prev, &pose) {
                axes.push(axis);
            }
        }
        poses.push(pose);
    }
    Ok(poses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct ReprojectionStats<T> {
    pub mean: T,
    pub std: T,
    pub max: T,
    /// Offset length of each corner, in input units (pixels).
    pub per_corner_offsets: Vec<T>,
}

/// Per-corner Euclidean offsets between observed and reference corners,
/// matched by index. `std` is the population standard deviation.
pub fn reprojection_error<T: Real>(
    observed: &[[T; 2]],
    reference: &[[T; 2]],
) -> Result<ReprojectionStats<T>, HandEyeError> {
    if observed.len() != reference.len() {
        return Err(HandEyeError::LengthMismatch {
            observed: observed.len(),
            reference: reference.len(),
        });
    }
    if observed.len() < 4 {
        return Err(HandEyeError::TooFewCorners(observed.len()));
    }
    let offsets: Vec<T> = observed
        .iter()
        .zip(reference)
        .map(|(o, r)| (o[0] - r[0]).hypot(o[1] - r[1]))
        .collect();
    let n = T::from_usize(offsets.len()).unwrap_or(T::one());
    let mean = offsets.iter().fold(T::zero(), |a, v| a + *v) / n;
    let var = offsets
        .iter()
        .fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean))
        / n;
    let max = offsets.iter().fold(T::zero(), |a, v| a.max(*v));
    Ok(ReprojectionStats {
        mean,
        std: var.sqrt(),
        max,
        per_corner_offsets: offsets,
    })
}

fn default_gate() -> f64 {
    0.5
}

/// Pre-execution quality gate on the mean reprojection error (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionGate {
    #[serde(default = "default_gate")]
    pub max_mean_px: f64,
}

impl Default for ReprojectionGate {
    fn default() -> Self {
        Self {
            max_mean_px: default_gate(),
        }
    }
}

impl ReprojectionGate {
    /// Passes only when the mean is strictly below the threshold.
    pub fn passes(&self, stats: &ReprojectionStats<f64>) -> bool {
        stats.mean < self.max_mean_px
    }
}
