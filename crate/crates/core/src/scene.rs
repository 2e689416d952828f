//! Synthetic depth-camera scenes: a breathing torso phantom carrying a raised
//! ring marker, imaged by a camera whose field of view and depth noise follow
//! the calibrated FOV table.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fov::{FovTable, Lookup, OrientedBox};
use crate::{Point, Transform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("no surface point inside the camera frustum")]
    EmptyCloud,
    #[error("invalid scene parameter: {0}")]
    Invalid(String),
}

fn default_lateral_sigma_factor() -> f64 {
    1.8
}

fn default_noise_scale() -> f64 {
    1.0
}

fn default_frame_rate() -> f64 {
    10.0
}

fn default_resolution() -> (u32, u32) {
    (160, 125)
}

/// Depth camera: FOV/noise table, mounting pose, noise parameters and the
/// ray grid used to sample the scene. The camera looks along its +z axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    #[serde(default)]
    pub fov_table: FovTable<f64>,
    /// Camera frame expressed in the parent (phantom) frame.
    #[serde(default)]
    pub mount_pose: Transform,
    #[serde(default = "default_lateral_sigma_factor")]
    pub lateral_sigma_factor: f64,
    /// Multiplier on all injected noise; 0 renders noiseless clouds.
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    /// (columns, rows) of the ray grid.
    #[serde(default = "default_resolution")]
    pub resolution: (u32, u32),
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fov_table: FovTable::default(),
            mount_pose: Transform::identity(),
            lateral_sigma_factor: default_lateral_sigma_factor(),
            noise_scale: default_noise_scale(),
            frame_rate: default_frame_rate(),
            resolution: default_resolution(),
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(0.1..=120.0).contains(&self.frame_rate) {
            return Err(SceneError::Invalid(format!(
                "frame_rate {} outside [0.1, 120]",
                self.frame_rate
            )));
        }
        if !(self.lateral_sigma_factor >= 0.0) || !(self.noise_scale >= 0.0) {
            return Err(SceneError::Invalid("noise parameters must be non-negative".into()));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(SceneError::Invalid("resolution must be non-zero".into()));
        }
        Ok(())
    }

    /// Depth noise standard deviation at a working distance (mm).
    pub fn sigma_z(&self, distance: f64) -> Lookup<f64> {
        self.fov_table.sigma_z(distance)
    }

    pub fn field_of_view(&self, distance: f64) -> Lookup<(f64, f64)> {
        self.fov_table.field_of_view(distance)
    }

    /// Camera placed `distance` mm from the parent origin along +z, looking
    /// back down at it.
    pub fn looking_down_from(distance: f64) -> Transform {
        Transform::from_translation(0.0, 0.0, distance).compose(&Transform::rot_x_deg(180.0))
    }
}

/// Base shape of the phantom skin, as a height field over the phantom x/y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurfaceShape {
    Flat,
    /// Elliptic paraboloid `crown · (1 − (x/a)² − (y/b)²)`.
    Dome {
        crown_mm: f64,
        semi_axis_x_mm: f64,
        semi_axis_y_mm: f64,
    },
}

impl SurfaceShape {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        match *self {
            SurfaceShape::Flat => 0.0,
            SurfaceShape::Dome {
                crown_mm,
                semi_axis_x_mm,
                semi_axis_y_mm,
            } => {
                let u = x / semi_axis_x_mm;
                let v = y / semi_axis_y_mm;
                crown_mm * (1.0 - u * u - v * v)
            }
        }
    }

    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            SurfaceShape::Flat => (0.0, 0.0),
            SurfaceShape::Dome {
                crown_mm,
                semi_axis_x_mm,
                semi_axis_y_mm,
            } => (
                -2.0 * crown_mm * x / (semi_axis_x_mm * semi_axis_x_mm),
                -2.0 * crown_mm * y / (semi_axis_y_mm * semi_axis_y_mm),
            ),
        }
    }

    /// Lowest and highest rest height over a patch.
    pub fn height_range(&self, patch: &Patch) -> (f64, f64) {
        let xs = [patch.x_min, patch.x_max, 0.0f64.clamp(patch.x_min, patch.x_max)];
        let ys = [patch.y_min, patch.y_max, 0.0f64.clamp(patch.y_min, patch.y_max)];
        let mut lo = f64::MAX;
        let mut hi = f64::MIN;
        for x in xs {
            for y in ys {
                let h = self.height(x, y);
                lo = lo.min(h);
                hi = hi.max(h);
            }
        }
        (lo, hi)
    }

    /// Largest slope magnitude over a patch.
    pub fn max_slope(&self, patch: &Patch) -> f64 {
        let mut m = 0.0f64;
        for x in [patch.x_min, patch.x_max] {
            for y in [patch.y_min, patch.y_max] {
                let (gx, gy) = self.gradient(x, y);
                m = m.max((gx * gx + gy * gy).sqrt());
            }
        }
        m
    }

    /// Outward unit normal of the rest surface at (x, y).
    pub fn normal(&self, x: f64, y: f64) -> Point {
        let (gx, gy) = self.gradient(x, y);
        Point::new(-gx, -gy, 1.0).normalized().unwrap_or(Point::new(0.0, 0.0, 1.0))
    }
}

/// Breath held at its current level for `duration_s` starting at `start_s`;
/// the cycle resumes afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreathHold {
    pub start_s: f64,
    pub duration_s: f64,
}

/// Extra displacement along the surface normal (cough, shift) over a time span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Excursion {
    pub start_s: f64,
    pub duration_s: f64,
    pub offset_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Patch {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

impl Default for Patch {
    fn default() -> Self {
        Self {
            x_min: -400.0,
            x_max: 400.0,
            y_min: -300.0,
            y_max: 300.0,
        }
    }
}

/// Skin surface that rises and falls with breathing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorsoPhantom {
    pub base_surface: SurfaceShape,
    #[serde(default)]
    pub patch: Patch,
    pub breathing_amplitude: f64,
    pub breathing_period: f64,
    #[serde(default)]
    pub breathing_phase: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold: Option<BreathHold>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excursions: Vec<Excursion>,
    /// Opaque boxes in the phantom frame; they block rays and return no points.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub occluders: Vec<OrientedBox<f64>>,
}

impl Default for TorsoPhantom {
    fn default() -> Self {
        Self {
            base_surface: SurfaceShape::Flat,
            patch: Patch::default(),
            breathing_amplitude: 0.0,
            breathing_period: 4.0,
            breathing_phase: 0.0,
            hold: None,
            excursions: Vec::new(),
            occluders: Vec::new(),
        }
    }
}

impl TorsoPhantom {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.breathing_amplitude >= 0.0) {
            return Err(SceneError::Invalid("breathing amplitude must be >= 0".into()));
        }
        if !(self.breathing_period > 0.0) {
            return Err(SceneError::Invalid("breathing period must be > 0".into()));
        }
        if let SurfaceShape::Dome {
            semi_axis_x_mm,
            semi_axis_y_mm,
            ..
        } = self.base_surface
        {
            if !(semi_axis_x_mm > 0.0 && semi_axis_y_mm > 0.0) {
                return Err(SceneError::Invalid("dome semi-axes must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Displacement of the skin along its outward normal at time `t` (s).
pub fn breathing_offset(phantom: &TorsoPhantom, t: f64) -> f64 {
    let mut t_eff = t;
    if let Some(h) = phantom.hold {
        if t >= h.start_s {
            t_eff = if t <= h.start_s + h.duration_s {
                h.start_s
            } else {
                t - h.duration_s
            };
        }
    }
    let cycle = phantom.breathing_amplitude
        * (2.0 * PI * t_eff / phantom.breathing_period + phantom.breathing_phase).sin();
    let extra: f64 = phantom
        .excursions
        .iter()
        .filter(|e| t >= e.start_s && t < e.start_s + e.duration_s)
        .map(|e| e.offset_mm)
        .sum();
    cycle + extra
}

fn default_outer() -> f64 {
    24.0
}
fn default_inner() -> f64 {
    16.0
}
fn default_thickness() -> f64 {
    2.0
}

/// Flat annulus of the given thickness resting on the skin. Its local +z is
/// the outward normal; the bottom face is at local z = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingMarker {
    #[serde(default = "default_outer")]
    pub outer_diameter: f64,
    #[serde(default = "default_inner")]
    pub inner_diameter: f64,
    #[serde(default = "default_thickness")]
    pub thickness: f64,
    #[serde(default)]
    pub pose_on_surface: Transform,
}

impl Default for RingMarker {
    fn default() -> Self {
        Self {
            outer_diameter: default_outer(),
            inner_diameter: default_inner(),
            thickness: default_thickness(),
            pose_on_surface: Transform::identity(),
        }
    }
}

impl RingMarker {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.inner_diameter > 0.0 && self.inner_diameter < self.outer_diameter) {
            return Err(SceneError::Invalid("ring needs 0 < inner < outer diameter".into()));
        }
        if !(self.thickness > 0.0) {
            return Err(SceneError::Invalid("ring thickness must be positive".into()));
        }
        Ok(())
    }

    /// Places a marker flush on the rest surface at (x, y), normal aligned
    /// with the surface normal.
    pub fn on_surface(shape: &SurfaceShape, x: f64, y: f64) -> Self {
        let n = shape.normal(x, y);
        let z = Point::new(0.0, 0.0, 1.0);
        let axis = z.cross(n);
        let angle = z.angle_deg(n);
        let rot = Transform::from_axis_angle_deg(axis, angle);
        let pose = Transform::from_translation(x, y, shape.height(x, y)).compose(&rot);
        Self {
            pose_on_surface: pose,
            ..Self::default()
        }
    }

    /// Marker pose in the phantom frame at time `t`, after riding the
    /// breathing displacement along the skin normal under its centre.
    pub fn pose_at(&self, phantom: &TorsoPhantom, t: f64) -> Transform {
        let c = self.pose_on_surface.translation;
        let n = phantom.base_surface.normal(c.x, c.y);
        let d = n * breathing_offset(phantom, t);
        Transform::from_translation(d.x, d.y, d.z).compose(&self.pose_on_surface)
    }

    /// Centre of the top (imaged) face in the phantom frame at time `t`.
    pub fn top_center(&self, phantom: &TorsoPhantom, t: f64) -> Point {
        self.pose_at(phantom, t)
            .transform_point(Point::new(0.0, 0.0, self.thickness))
    }

    pub fn mid_radius(&self) -> f64 {
        0.25 * (self.outer_diameter + self.inner_diameter)
    }

    fn ray_hit(&self, pose: &Transform, origin: Point, dir: Point) -> Option<f64> {
        let inv = pose.inverse();
        let o = inv.transform_point(origin);
        let d = inv.rotate_vector(dir);
        let (ro, ri, h) = (0.5 * self.outer_diameter, 0.5 * self.inner_diameter, self.thickness);
        let mut best: Option<f64> = None;
        let mut consider = |s: f64| {
            if s > 0.0 && best.map_or(true, |b| s < b) {
                best = Some(s);
            }
        };
        if d.z.abs() > 1e-15 {
            let s = (h - o.z) / d.z;
            let p = o + d * s;
            let r2 = p.x * p.x + p.y * p.y;
            if r2 >= ri * ri && r2 <= ro * ro {
                consider(s);
            }
        }
        let a = d.x * d.x + d.y * d.y;
        if a > 1e-15 {
            let b = 2.0 * (o.x * d.x + o.y * d.y);
            for r in [ro, ri] {
                let c = o.x * o.x + o.y * o.y - r * r;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    continue;
                }
                let sq = disc.sqrt();
                for s in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                    let z = o.z + d.z * s;
                    if (0.0..=h).contains(&z) {
                        consider(s);
                    }
                }
            }
        }
        best
    }
}

/// Timestamped cloud in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub timestamp: f64,
    pub seed: u64,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, timestamp: f64, seed: u64) -> Self {
        Self {
            points,
            timestamp,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &Transform) -> Self {
        Self {
            points: self.points.iter().map(|p| t.transform_point(*p)).collect(),
            ..self.clone()
        }
    }
}

/// Signed height of `p` above the breathing skin along the surface normal.
/// First-order in the surface slope; exact for planar skin.
fn skin_height(phantom: &TorsoPhantom, offset: f64, p: Point) -> f64 {
    let shape = &phantom.base_surface;
    let (gx, gy) = shape.gradient(p.x, p.y);
    let nz = 1.0 / (1.0 + gx * gx + gy * gy).sqrt();
    (p.z - shape.height(p.x, p.y)) * nz - offset
}

/// Root of `g` in `[a, b]` with `ga > 0 >= gb`, by the Illinois variant of
/// regula falsi.
fn illinois(g: &impl Fn(f64) -> f64, mut a: f64, mut ga: f64, mut b: f64, mut gb: f64) -> f64 {
    let mut side = 0i8;
    for _ in 0..60 {
        let c = (a * gb - b * ga) / (gb - ga);
        let gc = g(c);
        if gc.abs() < 1e-12 || (b - a).abs() < 1e-12 {
            return c;
        }
        if gc > 0.0 {
            a = c;
            ga = gc;
            if side == 1 {
                gb *= 0.5;
            }
            side = 1;
        } else {
            b = c;
            gb = gc;
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        }
    }
    0.5 * (a + b)
}

fn skin_hit(phantom: &TorsoPhantom, offset: f64, origin: Point, dir: Point, s_max: f64) -> Option<f64> {
    let hit = match phantom.base_surface {
        SurfaceShape::Flat => {
            if dir.z.abs() < 1e-15 {
                return None;
            }
            let s = (offset - origin.z) / dir.z;
            (s > 0.0).then_some(s)
        }
        _ => {
            let g = |s: f64| skin_height(phantom, offset, origin + dir * s);
            let step = 2.0;
            if g(0.0) <= 0.0 {
                return None;
            }
            // only march through the slab that can contain the skin
            let shape = &phantom.base_surface;
            let (hlo, hhi) = shape.height_range(&phantom.patch);
            let slope = shape.max_slope(&phantom.patch);
            let margin = offset.abs() * (1.0 + slope * slope).sqrt() + 1.0;
            let (zlo, zhi) = (hlo - margin, hhi + margin);
            let (mut s0, mut s_end) = (0.0, s_max);
            if dir.z.abs() > 1e-12 {
                let (a, b) = ((zhi - origin.z) / dir.z, (zlo - origin.z) / dir.z);
                let (a, b) = (a.min(b), a.max(b));
                s0 = a.max(0.0);
                s_end = b.min(s_max);
                if s0 > s_end {
                    return None;
                }
                s0 = (s0 - step).max(0.0);
            }
            let mut g0 = g(s0);
            if g0 <= 0.0 {
                return None;
            }
            let mut found = None;
            while s0 < s_end {
                // the skin height bounds the distance still to travel
                let s1 = s0 + (0.9 * g0).clamp(0.25, 10.0 * step);
                let g1 = g(s1);
                if g1 <= 0.0 {
                    found = Some(illinois(&g, s0, g0, s1, g1));
                    break;
                }
                s0 = s1;
                g0 = g1;
            }
            found
        }
    }?;
    let p = origin + dir * hit;
    phantom.patch.contains(p.x, p.y).then_some(hit)
}

/// Ray-casts the scene on the camera's grid and returns the noisy visible
/// surface points in the camera frame.
///
/// Each hit is perturbed along its ray so that its depth changes by
/// `N(0, σz(depth))`, and in the image plane by `N(0, k·σz)` per axis, with
/// `k` the lateral factor; all noise is multiplied by `noise_scale`. Points
/// that leave the observation pyramid after perturbation are dropped.
pub fn render_cloud(
    phantom: &TorsoPhantom,
    marker: Option<&RingMarker>,
    camera: &CameraModel,
    t: f64,
    seed: u64,
) -> Result<PointCloud, SceneError> {
    camera.validate()?;
    phantom.validate()?;
    if let Some(m) = marker {
        m.validate()?;
    }
    let table = &camera.fov_table;
    let (slope_x, slope_y) = table.max_slopes();
    let (cols, rows) = camera.resolution;
    let offset = breathing_offset(phantom, t);
    let marker_pose = marker.map(|m| m.pose_at(phantom, t));
    let cam = camera.mount_pose;
    let origin = cam.translation;
    let far = table.far();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(cols as usize * rows as usize);
    for j in 0..rows {
        let v = ((j as f64 + 0.5) / rows as f64 - 0.5) * slope_y;
        for i in 0..cols {
            let u = ((i as f64 + 0.5) / cols as f64 - 0.5) * slope_x;
            // fixed draw count per ray keeps the noise stream aligned
            let nz: f64 = StandardNormal.sample(&mut rng);
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);

            let dir_cam = Point::new(u, v, 1.0);
            let dir = cam.rotate_vector(dir_cam);
            // s is the camera-frame depth because dir_cam.z == 1
            let s_max = far * 1.05;
            let mut hit = skin_hit(phantom, offset, origin, dir, s_max);
            if let (Some(m), Some(pose)) = (marker, marker_pose.as_ref()) {
                if let Some(s) = m.ray_hit(pose, origin, dir) {
                    if hit.map_or(true, |h| s < h) {
                        hit = Some(s);
                    }
                }
            }
            let Some(s) = hit else { continue };
            if phantom
                .occluders
                .iter()
                .any(|b| b.ray_entry(origin, dir, 0.0, s).is_some())
            {
                continue;
            }
            let depth = s;
            let sigma = table.sigma_z(depth).value * camera.noise_scale;
            let lateral = sigma * camera.lateral_sigma_factor;
            let new_depth = depth + sigma * nz;
            let p = Point::new(
                u * new_depth + lateral * nx,
                v * new_depth + lateral * ny,
                new_depth,
            );
            if table.contains(p) && p.is_finite() {
                points.push(p);
            }
        }
    }
    if points.is_empty() {
        return Err(SceneError::EmptyCloud);
    }
    Ok(PointCloud::new(points, t, seed))
}

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PLY: {0}")]
    Format(String),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// Sidecar metadata written next to a PLY cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudSidecar {
    pub timestamp: f64,
    pub seed: u64,
    pub point_count: usize,
}

/// ASCII PLY with `double` x/y/z vertex properties.
pub fn write_ply(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(64 + cloud.len() * 48);
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str("comment camera frame, millimetres\n");
    s.push_str(&format!("element vertex {}\n", cloud.len()));
    s.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in &cloud.points {
        s.push_str(&format!("{:?} {:?} {:?}\n", p.x, p.y, p.z));
    }
    s
}

/// Parses the vertex positions of an ASCII PLY. Extra vertex properties and
/// other elements are tolerated; x/y/z must be present.
pub fn read_ply(text: &str) -> Result<Vec<Point>, PlyError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(PlyError::Format("missing magic".into()));
    }
    // (name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut ascii = false;
    for line in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => ascii = true,
            ["format", ..] => return Err(PlyError::Format("only ascii PLY is supported".into())),
            ["element", name, count] => {
                let n = count
                    .parse()
                    .map_err(|_| PlyError::Format(format!("bad element count {count}")))?;
                elements.push((name.to_string(), n, Vec::new()));
            }
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Format("property before element".into()))?;
                el.2.push("<list>".into());
            }
            ["property", _ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Format("property before element".into()))?;
                el.2.push(name.to_string());
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    if !ascii {
        return Err(PlyError::Format("missing format line".into()));
    }
    let mut points = Vec::new();
    for (name, count, props) in &elements {
        let idx = |k: &str| props.iter().position(|p| p == k);
        let is_vertex = name == "vertex";
        let (ix, iy, iz) = if is_vertex {
            match (idx("x"), idx("y"), idx("z")) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(PlyError::Format("vertex needs x, y, z".into())),
            }
        } else {
            (0, 0, 0)
        };
        for _ in 0..*count {
            let line = lines
                .next()
                .ok_or_else(|| PlyError::Format(format!("truncated {name} data")))?;
            if !is_vertex {
                continue;
            }
            let vals: Vec<&str> = line.split_whitespace().collect();
            let get = |i: usize| -> Result<f64, PlyError> {
                vals.get(i)
                    .ok_or_else(|| PlyError::Format("short vertex row".into()))?
                    .parse::<f64>()
                    .map_err(|e| PlyError::Format(e.to_string()))
            };
            let p = Point::new(get(ix)?, get(iy)?, get(iz)?);
            if !p.is_finite() {
                return Err(PlyError::Format("non-finite vertex".into()));
            }
            points.push(p);
        }
    }
    Ok(points)
}

pub fn save_cloud(cloud: &PointCloud, ply_path: &std::path::Path) -> Result<(), PlyError> {
    std::fs::write(ply_path, write_ply(cloud))?;
    let sidecar = CloudSidecar {
        timestamp: cloud.timestamp,
        seed: cloud.seed,
        point_count: cloud.len(),
    };
    std::fs::write(
        ply_path.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Loads a PLY cloud; timestamp and seed come from the JSON sidecar when it
/// exists, otherwise both default to zero.
pub fn load_cloud(ply_path: &std::path::Path) -> Result<PointCloud, PlyError> {
    let points = read_ply(&std::fs::read_to_string(ply_path)?)?;
    let side = ply_path.with_extension("json");
    let (timestamp, seed) = if side.exists() {
        let s: CloudSidecar = serde_json::from_str(&std::fs::read_to_string(side)?)?;
        if s.point_count != points.len() {
            return Err(PlyError::Format(format!(
                "sidecar lists {} points, PLY has {}",
                s.point_count,
                points.len()
            )));
        }
        (s.timestamp, s.seed)
    } else {
        (0.0, 0)
    };
    Ok(PointCloud::new(points, timestamp, seed))
}
