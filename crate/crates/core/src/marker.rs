//! Ring-marker pose recovery from a depth cloud.
//!
//! Pipeline: RANSAC skin plane, height band-pass (the ring stands proud of
//! the skin), Euclidean clustering, then a 3-D circle fit per cluster gated on
//! the expected ring size. The ring is rotationally symmetric, so a pose has
//! five observable degrees of freedom: centre and plane normal.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point3;
use crate::linalg::{mat3_eigen, Mat3};
use crate::scalar::Real;
use crate::scene::PointCloud;
use crate::{Point, Transform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("need at least 6 points for a circle fit, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("no cluster matches the expected ring size")]
    NoMarkerFound,
    #[error("{} ring candidates with comparable fit quality", .0.len())]
    AmbiguousMarker(Vec<MarkerPose>),
    #[error("invalid detection parameters: {0}")]
    InvalidParams(&'static str),
}

impl DetectError {
    /// Variant name, used in stage-failure messages.
    pub fn kind(&self) -> &'static str {
        match self {
            DetectError::TooFewPoints(_) => "TooFewPoints",
            DetectError::DegenerateGeometry(_) => "DegenerateGeometry",
            DetectError::EmptyCloud => "EmptyCloud",
            DetectError::NoMarkerFound => "NoMarkerFound",
            DetectError::AmbiguousMarker(_) => "AmbiguousMarker",
            DetectError::InvalidParams(_) => "InvalidParams",
        }
    }
}

/// Circle in 3-D: centre, unit plane normal, radius and in-plane RMS of the
/// radial residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleFit<T> {
    pub center: Point3<T>,
    pub normal: Point3<T>,
    pub radius: T,
    pub rms: T,
}

/// Orthonormal basis `(u, v)` spanning the plane orthogonal to `n`.
pub fn plane_basis<T: Real>(n: Point3<T>) -> (Point3<T>, Point3<T>) {
    let helper = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Point3::new(T::one(), T::zero(), T::zero())
    } else if n.y.abs() <= n.z.abs() {
        Point3::new(T::zero(), T::one(), T::zero())
    } else {
        Point3::new(T::zero(), T::zero(), T::one())
    };
    let u = n.cross(helper).normalized().unwrap_or(helper);
    let v = n.cross(u);
    (u, v)
}

/// Total-least-squares plane: centroid and unit normal (smallest principal
/// axis), plus the three covariance eigenvalues in ascending order.
pub fn fit_plane<T: Real>(points: &[Point3<T>]) -> Option<(Point3<T>, Point3<T>, [T; 3])> {
    if points.len() < 3 {
        return None;
    }
    let n = T::from_usize(points.len())?;
    let centroid = points
        .iter()
        .fold(Point3::zeros(), |acc, p| acc + *p)
        * (T::one() / n);
    let mut cov = Mat3::zeros();
    for p in points {
        let d = (*p - centroid).to_array();
        cov = cov.add(&Mat3::outer(d, d));
    }
    let eig = mat3_eigen(&cov.scale(T::one() / n));
    let normal = Point3::from_array(eig.vector3(0)).normalized()?;
    Some((centroid, normal, [eig.values[0], eig.values[1], eig.values[2]]))
}

/// Least-squares circle through 3-D points.
///
/// The points are projected onto their principal plane, an algebraic (Kåsa)
/// fit seeds a Gauss–Newton refinement of `Σ(|pᵢ − c| − r)²`, and the
/// returned `rms` is that geometric residual. The normal is sign-normalized
/// so its largest-magnitude component is positive.
pub fn fit_circle_3d<T: Real>(points: &[Point3<T>]) -> Result<CircleFit<T>, DetectError> {
    if points.len() < 6 {
        return Err(DetectError::TooFewPoints(points.len()));
    }
    let (centroid, mut normal, ev) =
        fit_plane(points).ok_or(DetectError::DegenerateGeometry("plane fit failed"))?;
    if !(ev[2] > T::zero()) || ev[1] <= ev[2] * T::lit(1e-12) {
        return Err(DetectError::DegenerateGeometry("points are collinear or coincident"));
    }
    let a = normal.to_array();
    let big = (0..3)
        .max_by(|&i, &j| a[i].abs().partial_cmp(&a[j].abs()).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or(2);
    if a[big] < T::zero() {
        normal = -normal;
    }
    let (u, v) = plane_basis(normal);
    let planar: Vec<(T, T)> = points
        .iter()
        .map(|p| {
            let d = *p - centroid;
            (d.dot(u), d.dot(v))
        })
        .collect();
    let (cx, cy, r) = fit_circle_2d(&planar)?;
    let rms = radial_rms(&planar, cx, cy, r);
    Ok(CircleFit {
        center: centroid + u * cx + v * cy,
        normal,
        radius: r,
        rms,
    })
}

fn radial_rms<T: Real>(pts: &[(T, T)], cx: T, cy: T, r: T) -> T {
    let n = T::from_usize(pts.len()).unwrap_or(T::one());
    let ss = pts.iter().fold(T::zero(), |acc, &(x, y)| {
        let e = ((x - cx) * (x - cx) + (y - cy) * (y - cy)).sqrt() - r;
        acc + e * e
    });
    (ss / n).sqrt()
}

/// Kåsa algebraic fit followed by damped Gauss–Newton on the geometric cost.
fn fit_circle_2d<T: Real>(pts: &[(T, T)]) -> Result<(T, T, T), DetectError> {
    // x² + y² = 2a x + 2b y + c
    let mut ata = Mat3::zeros();
    let mut atb = [T::zero(); 3];
    let two = T::lit(2.0);
    for &(x, y) in pts {
        let row = [two * x, two * y, T::one()];
        let rhs = x * x + y * y;
        ata = ata.add(&Mat3::outer(row, row));
        for k in 0..3 {
            atb[k] = atb[k] + row[k] * rhs;
        }
    }
    let sol = ata
        .solve(atb)
        .ok_or(DetectError::DegenerateGeometry("algebraic circle fit is singular"))?;
    let (mut cx, mut cy) = (sol[0], sol[1]);
    let r2 = sol[2] + cx * cx + cy * cy;
    if !(r2 > T::zero()) {
        return Err(DetectError::DegenerateGeometry("algebraic circle fit has no real radius"));
    }
    let mut r = r2.sqrt();

    let cost = |cx: T, cy: T, r: T| {
        pts.iter().fold(T::zero(), |acc, &(x, y)| {
            let e = ((x - cx) * (x - cx) + (y - cy) * (y - cy)).sqrt() - r;
            acc + e * e
        })
    };
    let mut current = cost(cx, cy, r);
    for _ in 0..100 {
        let mut jtj = Mat3::zeros();
        let mut jte = [T::zero(); 3];
        for &(x, y) in pts {
            let dx = x - cx;
            let dy = y - cy;
            let d = (dx * dx + dy * dy).sqrt();
            if d <= T::epsilon() {
                continue;
            }
            let e = d - r;
            let j = [-dx / d, -dy / d, -T::one()];
            jtj = jtj.add(&Mat3::outer(j, j));
            for k in 0..3 {
                jte[k] = jte[k] + j[k] * e;
            }
        }
        let Some(step) = jtj.solve([-jte[0], -jte[1], -jte[2]]) else {
            break;
        };
        let mut scale = T::one();
        let mut accepted = false;
        for _ in 0..20 {
            let (ncx, ncy, nr) = (cx + step[0] * scale, cy + step[1] * scale, r + step[2] * scale);
            let c = cost(ncx, ncy, nr);
            if c <= current {
                cx = ncx;
                cy = ncy;
                r = nr;
                current = c;
                accepted = true;
                break;
            }
            scale = scale * T::lit(0.5);
        }
        let step_norm = (step[0] * step[0] + step[1] * step[1] + step[2] * step[2]).sqrt() * scale;
        if !accepted || step_norm <= T::lit(1e-13) * (T::one() + r.abs()) {
            break;
        }
    }
    if !(r > T::zero()) || !r.is_finite() {
        return Err(DetectError::DegenerateGeometry("geometric circle fit diverged"));
    }
    Ok((cx, cy, r))
}

fn default_outer() -> f64 {
    24.0
}
fn default_inner() -> f64 {
    16.0
}
fn default_tolerance() -> f64 {
    2.0
}
fn default_iterations() -> u32 {
    200
}
fn default_plane_threshold() -> f64 {
    0.5
}
fn default_min_inliers() -> usize {
    12
}
fn default_band() -> (f64, f64) {
    (1.0, 4.0)
}
fn default_cluster_radius() -> f64 {
    6.0
}
fn default_ambiguity() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    #[serde(default = "default_outer")]
    pub expected_outer_diameter: f64,
    #[serde(default = "default_inner")]
    pub expected_inner_diameter: f64,
    /// Allowed deviation of the fitted mid-ring diameter, mm.
    #[serde(default = "default_tolerance")]
    pub diameter_tolerance: f64,
    #[serde(default = "default_iterations")]
    pub ransac_iterations: u32,
    #[serde(default = "default_plane_threshold")]
    pub plane_inlier_threshold: f64,
    #[serde(default = "default_min_inliers")]
    pub min_inliers: usize,
    #[serde(default)]
    pub rng_seed: u64,
    /// Height window above the skin plane that keeps marker points, mm.
    #[serde(default = "default_band")]
    pub band: (f64, f64),
    #[serde(default = "default_cluster_radius")]
    pub cluster_radius: f64,
    /// Relative RMS gap below which two accepted rings are ambiguous.
    #[serde(default = "default_ambiguity")]
    pub ambiguity_ratio: f64,
    /// Sensor origin in the cloud frame; normals are oriented toward it.
    #[serde(default)]
    pub viewpoint: Point,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            expected_outer_diameter: default_outer(),
            expected_inner_diameter: default_inner(),
            diameter_tolerance: default_tolerance(),
            ransac_iterations: default_iterations(),
            plane_inlier_threshold: default_plane_threshold(),
            min_inliers: default_min_inliers(),
            rng_seed: 0,
            band: default_band(),
            cluster_radius: default_cluster_radius(),
            ambiguity_ratio: default_ambiguity(),
            viewpoint: Point::zeros(),
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<(), DetectError> {
        let positive = [
            self.expected_outer_diameter,
            self.expected_inner_diameter,
            self.diameter_tolerance,
            self.plane_inlier_threshold,
            self.cluster_radius,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(DetectError::InvalidParams("thresholds must be positive"));
        }
        if self.expected_inner_diameter >= self.expected_outer_diameter {
            return Err(DetectError::InvalidParams("inner diameter must be below outer"));
        }
        if self.ransac_iterations < 1 {
            return Err(DetectError::InvalidParams("ransac_iterations must be >= 1"));
        }
        if self.min_inliers < 6 {
            return Err(DetectError::InvalidParams("min_inliers must be >= 6"));
        }
        if !(self.band.0 < self.band.1) {
            return Err(DetectError::InvalidParams("band must be increasing"));
        }
        Ok(())
    }

    /// Diameter of the circle through the middle of the annulus.
    pub fn expected_mid_diameter(&self) -> f64 {
        0.5 * (self.expected_outer_diameter + self.expected_inner_diameter)
    }
}

/// Observed ring pose in the cloud (camera) frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkerPose {
    pub center: Point,
    /// Unit plane normal, oriented toward the sensor.
    pub normal: Point,
    pub radius: f64,
    pub rms_residual: f64,
    pub inlier_count: usize,
    pub timestamp: f64,
}

impl MarkerPose {
    pub fn transformed(&self, t: &Transform) -> Self {
        Self {
            center: t.transform_point(self.center),
            normal: t.rotate_vector(self.normal),
            ..*self
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MarkerPoseWire {
    center: [f64; 3],
    normal: [f64; 3],
    radius_mm: f64,
    rms_mm: f64,
    inliers: usize,
    t: f64,
}

impl Serialize for MarkerPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MarkerPoseWire {
            center: self.center.to_array(),
            normal: self.normal.to_array(),
            radius_mm: self.radius,
            rms_mm: self.rms_residual,
            inliers: self.inlier_count,
            t: self.timestamp,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MarkerPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = MarkerPoseWire::deserialize(d)?;
        let normal = Point::from_array(w.normal)
            .normalized()
            .ok_or_else(|| serde::de::Error::custom("zero normal"))?;
        Ok(MarkerPose {
            center: Point::from_array(w.center),
            normal,
            radius: w.radius_mm,
            rms_residual: w.rms_mm,
            inlier_count: w.inliers,
            timestamp: w.t,
        })
    }
}

struct Plane {
    origin: Point,
    normal: Point,
}

impl Plane {
    fn height(&self, p: Point) -> f64 {
        self.normal.dot(p - self.origin)
    }
}

fn ransac_plane(points: &[Point], params: &DetectParams, seed: u64) -> Option<Plane> {
    let n = points.len();
    if n < 3 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thr = params.plane_inlier_threshold;
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..params.ransac_iterations {
        let i0 = rng.gen_range(0..n);
        let i1 = rng.gen_range(0..n);
        let i2 = rng.gen_range(0..n);
        if i0 == i1 || i1 == i2 || i0 == i2 {
            continue;
        }
        let (a, b, c) = (points[i0], points[i1], points[i2]);
        let Some(normal) = (b - a).cross(c - a).normalized() else {
            continue;
        };
        let plane = Plane { origin: a, normal };
        let count = points.iter().filter(|p| plane.height(**p).abs() < thr).count();
        if best.as_ref().map_or(true, |(bc, _)| count > *bc) {
            best = Some((count, plane));
        }
    }
    let (_, coarse) = best?;
    let inliers: Vec<Point> = points
        .iter()
        .copied()
        .filter(|p| coarse.height(*p).abs() < thr)
        .collect();
    let (origin, mut normal, _) = fit_plane(&inliers)?;
    if normal.dot(params.viewpoint - origin) < 0.0 {
        normal = -normal;
    }
    Some(Plane { origin, normal })
}

/// Connected components under the `radius` neighbourhood relation.
/// Cluster order follows the lowest point index in each cluster.
fn euclidean_clusters(points: &[Point], radius: f64) -> Vec<Vec<usize>> {
    let key = |p: &Point| {
        (
            (p.x / radius).floor() as i64,
            (p.y / radius).floor() as i64,
            (p.z / radius).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let mut parent: Vec<usize> = (0..points.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let r2 = radius * radius;
    for (i, p) in points.iter().enumerate() {
        let (kx, ky, kz) = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(cell) = grid.get(&(kx + dx, ky + dy, kz + dz)) else {
                        continue;
                    };
                    for &j in cell {
                        if j <= i || (points[j] - *p).norm_squared() > r2 {
                            continue;
                        }
                        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                        if ri != rj {
                            let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                            parent[hi] = lo;
                        }
                    }
                }
            }
        }
    }
    let mut by_root: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for i in 0..points.len() {
        let root = find(&mut parent, i);
        let s = *slot.entry(root).or_insert_with(|| {
            by_root.push(Vec::new());
            by_root.len() - 1
        });
        by_root[s].push(i);
    }
    by_root
}

/// Fits a cluster and applies the size, annulus-membership and angular
/// coverage gates.
fn ring_candidate(cluster: &[Point], params: &DetectParams, timestamp: f64) -> Option<MarkerPose> {
    if cluster.len() < params.min_inliers {
        return None;
    }
    let fit = fit_circle_3d(cluster).ok()?;
    if (2.0 * fit.radius - params.expected_mid_diameter()).abs() > params.diameter_tolerance {
        return None;
    }
    let half_width = 0.25 * (params.expected_outer_diameter - params.expected_inner_diameter);
    let (u, v) = plane_basis(fit.normal);
    let mut sectors = [false; 8];
    let mut in_band = 0usize;
    for p in cluster {
        let d = *p - fit.center;
        let (x, y) = (d.dot(u), d.dot(v));
        let r = (x * x + y * y).sqrt();
        if (r - fit.radius).abs() <= half_width + 0.5 * params.diameter_tolerance {
            in_band += 1;
        }
        let a = y.atan2(x) + std::f64::consts::PI;
        let s = ((a / (2.0 * std::f64::consts::PI)) * 8.0).floor() as usize;
        sectors[s.min(7)] = true;
    }
    if (in_band as f64) < 0.9 * cluster.len() as f64 || sectors.iter().filter(|s| **s).count() < 6 {
        return None;
    }
    let mut normal = fit.normal;
    if normal.dot(params.viewpoint - fit.center) < 0.0 {
        normal = -normal;
    }
    Some(MarkerPose {
        center: fit.center,
        normal,
        radius: fit.radius,
        rms_residual: fit.rms,
        inlier_count: cluster.len(),
        timestamp,
    })
}

fn candidates_in(points: &[Point], params: &DetectParams, seed: u64, timestamp: f64) -> Vec<MarkerPose> {
    let Some(plane) = ransac_plane(points, params, seed) else {
        return Vec::new();
    };
    let (lo, hi) = params.band;
    let raised: Vec<Point> = points
        .iter()
        .copied()
        .filter(|p| {
            let h = plane.height(*p);
            h >= lo && h <= hi
        })
        .collect();
    euclidean_clusters(&raised, params.cluster_radius)
        .into_iter()
        .filter_map(|idx| {
            let pts: Vec<Point> = idx.iter().map(|&i| raised[i]).collect();
            ring_candidate(&pts, params, timestamp)
        })
        .collect()
}

/// Re-runs the pipeline on overlapping square tiles of the skin so that
/// curved surfaces are treated as locally planar.
fn tiled_candidates(points: &[Point], params: &DetectParams, timestamp: f64) -> Vec<MarkerPose> {
    let Some((origin, normal, _)) = fit_plane(points) else {
        return Vec::new();
    };
    let (u, v) = plane_basis(normal);
    let coords: Vec<(f64, f64)> = points
        .iter()
        .map(|p| {
            let d = *p - origin;
            (d.dot(u), d.dot(v))
        })
        .collect();
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(a, b) in &coords {
        umin = umin.min(a);
        umax = umax.max(a);
        vmin = vmin.min(b);
        vmax = vmax.max(b);
    }
    let side = 3.0 * params.expected_outer_diameter;
    let stride = 0.5 * side;
    let mut out: Vec<MarkerPose> = Vec::new();
    let mut tile = 0u64;
    let mut a0 = umin;
    while a0 < umax {
        let mut b0 = vmin;
        while b0 < vmax {
            let sub: Vec<Point> = coords
                .iter()
                .zip(points)
                .filter(|((a, b), _)| *a >= a0 && *a < a0 + side && *b >= b0 && *b < b0 + side)
                .map(|(_, p)| *p)
                .collect();
            if sub.len() >= 3 * params.min_inliers {
                let seed = params.rng_seed ^ (tile.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                for c in candidates_in(&sub, params, seed, timestamp) {
                    match out
                        .iter_mut()
                        .find(|o| o.center.distance(c.center) < 0.5 * params.expected_outer_diameter)
                    {
                        Some(o) if c.rms_residual < o.rms_residual => *o = c,
                        Some(_) => {}
                        None => out.push(c),
                    }
                }
            }
            tile += 1;
            b0 += stride;
        }
        a0 += stride;
    }
    out
}

fn select(mut cands: Vec<MarkerPose>, params: &DetectParams) -> Result<MarkerPose, DetectError> {
    cands.sort_by(|a, b| {
        a.rms_residual
            .partial_cmp(&b.rms_residual)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    match cands.as_slice() {
        [] => Err(DetectError::NoMarkerFound),
        [only] => Ok(*only),
        [best, second, ..] => {
            if second.rms_residual - best.rms_residual <= params.ambiguity_ratio * best.rms_residual {
                Err(DetectError::AmbiguousMarker(vec![*best, *second]))
            } else {
                Ok(*best)
            }
        }
    }
}

/// Second pass around a found ring: the skin plane is refitted on a narrow
/// annulus just outside the marker, so curved skin does not tilt the band.
fn refine_local(pose: &MarkerPose, points: &[Point], params: &DetectParams) -> Option<MarkerPose> {
    let ro = 0.5 * params.expected_outer_diameter;
    let (u, v) = plane_basis(pose.normal);
    let local = |p: &Point| {
        let d = *p - pose.center;
        let (x, y) = (d.dot(u), d.dot(v));
        ((x * x + y * y).sqrt(), d.dot(pose.normal))
    };
    let skin: Vec<Point> = points
        .iter()
        .copied()
        .filter(|p| {
            let (r, h) = local(p);
            r >= ro + 2.0 && r <= ro + 12.0 && h.abs() <= 10.0
        })
        .collect();
    let (c0, n0, _) = fit_plane(&skin)?;
    let thr = 3.0 * params.plane_inlier_threshold;
    let trimmed: Vec<Point> = skin.into_iter().filter(|p| (*p - c0).dot(n0).abs() < thr).collect();
    let (origin, mut normal, _) = fit_plane(&trimmed)?;
    if normal.dot(pose.normal) < 0.0 {
        normal = -normal;
    }
    let plane = Plane { origin, normal };
    let (lo, hi) = params.band;
    let ring: Vec<Point> = points
        .iter()
        .copied()
        .filter(|p| {
            let (r, _) = local(p);
            let h = plane.height(*p);
            r <= ro + params.diameter_tolerance && h >= lo && h <= hi
        })
        .collect();
    ring_candidate(&ring, params, pose.timestamp)
}

/// Detects the ring marker in a cloud. Deterministic for fixed inputs.
pub fn detect_ring(cloud: &PointCloud, params: &DetectParams) -> Result<MarkerPose, DetectError> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(DetectError::EmptyCloud);
    }
    let mut cands = candidates_in(&cloud.points, params, params.rng_seed, cloud.timestamp);
    if cands.is_empty() {
        cands = tiled_candidates(&cloud.points, params, cloud.timestamp);
    }
    let pose = select(cands, params)?;
    Ok(refine_local(&pose, &cloud.points, params).unwrap_or(pose))
}

/// Detects the ring near its previous position, falling back to a full
/// search when the cropped search fails.
pub fn track(previous: &MarkerPose, cloud: &PointCloud, params: &DetectParams) -> Result<MarkerPose, DetectError> {
    let radius = 3.0 * params.expected_outer_diameter;
    let r2 = radius * radius;
    let cropped: Vec<Point> = cloud
        .points
        .iter()
        .copied()
        .filter(|p| (*p - previous.center).norm_squared() <= r2)
        .collect();
    if !cropped.is_empty() {
        let sub = PointCloud::new(cropped, cloud.timestamp, cloud.seed);
        if let Ok(pose) = detect_ring(&sub, params) {
            return Ok(pose);
        }
    }
    detect_ring(cloud, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn circle_points(center: Point, radius: f64, n: usize, arc: f64) -> Vec<Point> {
        (0..n)
            .map(|k| {
                let a = arc * k as f64 / n as f64;
                center + Point::new(radius * a.cos(), radius * a.sin(), 0.0)
            })
            .collect()
    }

    #[test]
    fn exact_circle() {
        let c = Point::new(10.0, 20.0, 30.0);
        let pts = circle_points(c, 12.0, 36, 2.0 * std::f64::consts::PI);
        let fit = fit_circle_3d(&pts).unwrap();
        assert!(fit.center.distance(c) < 1e-9);
        assert!((fit.radius - 12.0).abs() < 1e-9);
        assert!(fit.rms < 1e-9);
        assert!((fit.normal.z - 1.0).abs() < 1e-9);
    }

    #[test]
    fn half_arc() {
        let c = Point::new(10.0, 20.0, 30.0);
        let pts = circle_points(c, 12.0, 37, std::f64::consts::PI);
        let fit = fit_circle_3d(&pts).unwrap();
        assert!(fit.center.distance(c) < 1e-6);
        assert!((fit.radius - 12.0).abs() < 1e-6);
    }

    #[test]
    fn tilted_circle_f32() {
        let rot = crate::geometry::RigidTransform::<f32>::from_axis_angle_deg(Point3::new(1.0, 1.0, 0.0), 40.0);
        let pts: Vec<Point3<f32>> = (0..24)
            .map(|k| {
                let a = k as f32 * std::f32::consts::PI / 12.0;
                rot.transform_point(Point3::new(5.0 * a.cos(), 5.0 * a.sin(), 0.0))
            })
            .collect();
        let fit = fit_circle_3d(&pts).unwrap();
        assert!((fit.radius - 5.0).abs() < 1e-4);
        assert!(fit.center.norm() < 1e-4);
    }

    #[test]
    fn too_few_and_collinear() {
        let pts: Vec<Point> = (0..5).map(|k| Point::new(k as f64, 0.0, 0.0)).collect();
        assert_eq!(fit_circle_3d(&pts).unwrap_err(), DetectError::TooFewPoints(5));
        let pts: Vec<Point> = (0..10).map(|k| Point::new(k as f64, 2.0 * k as f64, 0.0)).collect();
        assert!(matches!(fit_circle_3d(&pts), Err(DetectError::DegenerateGeometry(_))));
    }

    #[test]
    fn noisy_circle_monte_carlo() {
        // 100 seeds, medians of centre error and rms
        let c = Point::new(10.0, 20.0, 30.0);
        let clean = circle_points(c, 12.0, 500, 2.0 * std::f64::consts::PI);
        let noise = Normal::new(0.0, 0.117).unwrap();
        let mut errs = Vec::new();
        let mut rmss = Vec::new();
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point> = clean
                .iter()
                .map(|p| {
                    *p + Point::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
                })
                .collect();
            let fit = fit_circle_3d(&pts).unwrap();
            errs.push(fit.center.distance(c));
            rmss.push(fit.rms);
        }
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rmss.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(errs[50] < 0.05, "median centre error {}", errs[50]);
        assert!((rmss[50] / 0.117 - 1.0).abs() < 0.2, "median rms {}", rmss[50]);
    }

    #[test]
    fn clusters_split_by_radius() {
        let mut pts = circle_points(Point::zeros(), 5.0, 20, 6.28);
        pts.extend(circle_points(Point::new(100.0, 0.0, 0.0), 5.0, 20, 6.28));
        let cl = euclidean_clusters(&pts, 3.0);
        assert_eq!(cl.len(), 2);
        assert_eq!(cl[0], (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn marker_pose_json_shape() {
        let m = MarkerPose {
            center: Point::new(1.0, 2.0, 3.0),
            normal: Point::new(0.0, 0.0, -1.0),
            radius: 10.0,
            rms_residual: 0.5,
            inlier_count: 40,
            timestamp: 0.1,
        };
        let v: serde_json::Value = serde_json::to_value(m).unwrap();
        for k in ["center", "normal", "radius_mm", "rms_mm", "inliers", "t"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        let back: MarkerPose = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn params_validation() {
        let p = DetectParams {
            ransac_iterations: 0,
            ..DetectParams::default()
        };
        assert!(p.validate().is_err());
        let p = DetectParams {
            expected_inner_diameter: 30.0,
            ..DetectParams::default()
        };
        assert!(p.validate().is_err());
    }
}
