//! Scenario runner: calibrate, detect, fuse, correct and report.
//!
//! Every random draw derives from the scenario seed through
//! [`stage_seed`], so each stage can be rerun on its own.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{
    apply_correction, fit_affine_correction, fit_tcp_correction, marker_in_base, ExecutionRecord, TcpCorrection,
};
use crate::geometry::pose_error;
use crate::handeye::{
    fit_rigid, plan_poses, reprojection_error, solve_ax_xb, CalibrationSample, HandEyeResult, ObservationBox,
    PoseNoise, ReprojectionGate, ReprojectionStats,
};
use crate::marker::{detect_ring, fit_plane, track, DetectParams, MarkerPose};
use crate::respiration::{
    detect_breath_hold, estimate_period, extract_signal, motion_alarm, AlarmEvent, BreathSignal, GateInterval,
};
use crate::scene::{
    breathing_offset, render_cloud, BreathHold, CameraModel, Excursion, PointCloud, RingMarker, SceneError, SurfaceShape,
    TorsoPhantom,
};
use crate::{Point, Transform};

/// Post-correction per-axis mean absolute error bound, mm.
pub const EXECUTION_ERROR_BOUND_MM: f64 = 0.563;

pub const EXIT_OK: i32 = 0;
pub const EXIT_GATE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_STAGE: i32 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("report has no {0} section")]
    MissingSection(&'static str),
    #[error("unknown table id {0:?}")]
    UnknownTable(String),
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `splitmix64(seed ^ fnv1a64(stage))`.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(stage))
}

/// Seed of item `index` within a stage.
pub fn item_seed(stage_seed: u64, index: u64) -> u64 {
    splitmix64(stage_seed ^ splitmix64(index))
}

pub const STAGES: [&str; 5] = ["calibration", "surgery", "tcp", "sweep", "flange"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoardSpec {
    pub cols: usize,
    pub rows: usize,
    pub pitch_mm: f64,
}

impl BoardSpec {
    /// Corner grid in the board frame, centred on the origin, z = 0.
    pub fn corners(&self) -> Vec<Point> {
        let (cx, cy) = (
            0.5 * (self.cols - 1) as f64 * self.pitch_mm,
            0.5 * (self.rows - 1) as f64 * self.pitch_mm,
        );
        (0..self.rows)
            .flat_map(|r| {
                (0..self.cols).map(move |c| Point::new(c as f64 * self.pitch_mm - cx, r as f64 * self.pitch_mm - cy, 0.0))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub station_count: usize,
    pub tilt_range_deg: f64,
    pub board_in_base: Transform,
    pub board: BoardSpec,
    /// Per-axis image noise of detected corners, pixels.
    pub corner_noise_px: f64,
    /// Noise between the true and reported flange pose, in the flange frame.
    pub flange_noise: PoseNoise,
    #[serde(default)]
    pub gate: ReprojectionGate,
    /// Extra room around the board when planning stations, mm.
    pub box_margin_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryConfig {
    pub standoff_mm: f64,
    pub frame_count: usize,
    /// Marker position on the phantom surface.
    pub marker_xy: [f64; 2],
    /// Frames written as `cloud_NNNN.ply`.
    #[serde(default)]
    pub save_frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcpConfig {
    /// Teach-pendant reading minus true position, mm.
    pub robot_bias_mm: [f64; 3],
    pub pendant_noise_mm: f64,
    pub fit_placements: Vec<[f64; 2]>,
    pub eval_placements: Vec<[f64; 2]>,
    /// Scene time of the placement shots, s.
    pub time_s: f64,
    /// Fit a full 3x3 affine map instead of the per-axis one.
    #[serde(default)]
    pub full_affine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RespirationConfig {
    pub amplitude_tol_mm: f64,
    pub min_duration_s: f64,
    pub alarm_threshold_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub enabled: bool,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub camera: CameraModel,
    #[serde(default)]
    pub phantom: TorsoPhantom,
    /// Ring geometry; its placement is set per shot.
    #[serde(default)]
    pub marker: RingMarker,
    /// When false, no marker is placed in the scene.
    #[serde(default = "yes")]
    pub marker_present: bool,
    pub phantom_in_base: Transform,
    /// Ground-truth camera pose in the flange frame.
    pub hand_eye_truth: Transform,
    /// Explicit calibration flange poses; planned when empty.
    #[serde(default)]
    pub robot_script: Vec<Transform>,
    pub calibration: CalibrationConfig,
    pub surgery: SurgeryConfig,
    pub tcp: TcpConfig,
    pub respiration: RespirationConfig,
    #[serde(default)]
    pub detect: DetectParams,
    pub sweep: SweepConfig,
    /// Include wall-clock timings in the report (breaks byte-identity).
    #[serde(default)]
    pub record_wall_clock: bool,
}

fn yes() -> bool {
    true
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 20240611,
            camera: CameraModel::default(),
            phantom: TorsoPhantom {
                base_surface: SurfaceShape::Dome {
                    crown_mm: 40.0,
                    semi_axis_x_mm: 350.0,
                    semi_axis_y_mm: 250.0,
                },
                breathing_amplitude: 5.0,
                breathing_period: 4.0,
                hold: Some(BreathHold {
                    start_s: 5.0,
                    duration_s: 4.0,
                }),
                excursions: vec![Excursion {
                    start_s: 12.0,
                    duration_s: 0.6,
                    offset_mm: 3.0,
                }],
                ..TorsoPhantom::default()
            },
            marker: RingMarker::default(),
            marker_present: true,
            phantom_in_base: Transform::from_translation(650.0, -40.0, 80.0).compose(&Transform::rot_z_deg(90.0)),
            hand_eye_truth: Transform::from_translation(35.0, -20.0, 110.0)
                .compose(&Transform::from_axis_angle_deg(Point::new(0.2, 1.0, -0.1), 8.0)),
            robot_script: Vec::new(),
            calibration: CalibrationConfig {
                station_count: 10,
                tilt_range_deg: 25.0,
                board_in_base: Transform::from_translation(500.0, 150.0, 20.0).compose(&Transform::rot_z_deg(15.0)),
                board: BoardSpec {
                    cols: 9,
                    rows: 6,
                    pitch_mm: 15.0,
                },
                corner_noise_px: 0.1,
                flange_noise: PoseNoise {
                    rotation_deg: 0.005,
                    translation_mm: 0.01,
                },
                gate: ReprojectionGate::default(),
                box_margin_mm: 10.0,
            },
            surgery: SurgeryConfig {
                standoff_mm: 400.0,
                frame_count: 160,
                marker_xy: [0.0, 0.0],
                save_frames: vec![0, 70],
            },
            tcp: TcpConfig {
                robot_bias_mm: [-0.56, -0.02, -0.44],
                pendant_noise_mm: 0.01,
                fit_placements: vec![[-40.0, -30.0], [35.0, -20.0], [0.0, 40.0]],
                eval_placements: vec![
                    [20.0, 20.0],
                    [-30.0, 25.0],
                    [40.0, -35.0],
                    [-15.0, -40.0],
                    [10.0, -5.0],
                    [-45.0, 5.0],
                ],
                time_s: 7.0,
                full_affine: false,
            },
            respiration: RespirationConfig {
                amplitude_tol_mm: 0.5,
                min_duration_s: 2.0,
                alarm_threshold_mm: 1.0,
            },
            detect: DetectParams::default(),
            sweep: SweepConfig {
                enabled: true,
                trials: 5,
            },
            record_wall_clock: false,
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let s: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m: String| HarnessError::Config(m);
        self.camera.validate().map_err(|e| cfg(e.to_string()))?;
        self.phantom.validate().map_err(|e| cfg(e.to_string()))?;
        self.marker.validate().map_err(|e| cfg(e.to_string()))?;
        self.detect.validate().map_err(|e| cfg(e.to_string()))?;
        let c = &self.calibration;
        if c.board.cols < 2 || c.board.rows < 2 || !(c.board.pitch_mm > 0.0) {
            return Err(cfg("board needs at least 2x2 corners and positive pitch".into()));
        }
        if c.board.cols * c.board.rows < 4 {
            return Err(cfg("board needs at least 4 corners".into()));
        }
        if !(c.corner_noise_px >= 0.0) || !(c.flange_noise.rotation_deg >= 0.0) || !(c.flange_noise.translation_mm >= 0.0) {
            return Err(cfg("noise settings must be non-negative".into()));
        }
        if self.robot_script.is_empty() && c.station_count < 3 {
            return Err(cfg("need at least 3 calibration stations".into()));
        }
        if !self.robot_script.is_empty() && self.robot_script.len() < 3 {
            return Err(cfg("robot_script needs at least 3 poses".into()));
        }
        let t = &self.camera.fov_table;
        if !(t.near()..=t.far()).contains(&self.surgery.standoff_mm) {
            return Err(cfg(format!("standoff {} outside the camera range", self.surgery.standoff_mm)));
        }
        if self.surgery.frame_count < 2 {
            return Err(cfg("need at least 2 surgical frames".into()));
        }
        if self.tcp.fit_placements.is_empty() || self.tcp.eval_placements.is_empty() {
            return Err(cfg("need fit and evaluation placements".into()));
        }
        if !(self.tcp.pendant_noise_mm >= 0.0) {
            return Err(cfg("pendant noise must be non-negative".into()));
        }
        let r = &self.respiration;
        if !(r.amplitude_tol_mm > 0.0 && r.min_duration_s > 0.0 && r.alarm_threshold_mm > 0.0) {
            return Err(cfg("respiration thresholds must be positive".into()));
        }
        if self.sweep.enabled && self.sweep.trials == 0 {
            return Err(cfg("sweep needs at least one trial".into()));
        }
        Ok(())
    }

    fn placed_marker(&self, xy: [f64; 2]) -> RingMarker {
        RingMarker {
            pose_on_surface: RingMarker::on_surface(&self.phantom.base_surface, xy[0], xy[1]).pose_on_surface,
            ..self.marker
        }
    }

    /// Camera in the phantom frame, straight above the surface point `xy`.
    pub fn camera_over(&self, xy: [f64; 2], standoff: f64) -> Transform {
        let h = self.phantom.base_surface.height(xy[0], xy[1]);
        Transform::from_translation(xy[0], xy[1], h).compose(&CameraModel::looking_down_from(standoff))
    }

    fn camera_at(&self, mount: Transform) -> CameraModel {
        CameraModel {
            mount_pose: mount,
            ..self.camera.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub error: String,
}

fn fail(stage: &str, e: impl std::fmt::Display) -> StageFailure {
    StageFailure {
        stage: stage.into(),
        error: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorSummary {
    pub rotation_deg: f64,
    pub translation_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVerdict {
    pub threshold_px: f64,
    pub mean_px: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSection {
    pub stations: usize,
    pub hand_eye: HandEyeResult<f64>,
    /// Estimated against true camera-in-flange.
    pub hand_eye_error: PoseErrorSummary,
    pub reprojection: ReprojectionSummary,
    pub gate: GateVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionSummary {
    pub mean_px: f64,
    pub std_px: f64,
    pub max_px: f64,
    pub corner_count: usize,
    pub per_station_mean_px: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSection {
    pub frames: usize,
    pub center_error_median_mm: f64,
    pub center_error_max_mm: f64,
    pub normal_error_median_deg: f64,
    pub normal_error_max_deg: f64,
    pub rms_residual_median_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRow {
    pub placement: usize,
    /// `fit` or `eval`.
    pub role: String,
    pub observed: Point,
    pub executed: Point,
    pub difference: Point,
    /// `executed − corrected(observed)`.
    pub residual: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionSection {
    pub model: String,
    pub correction: TcpCorrection<f64>,
    pub rows: Vec<ExecutionRow>,
    pub pre_correction_mean_abs_mm: [f64; 3],
    pub post_correction_mean_abs_mm: [f64; 3],
    pub bound_mm: f64,
    pub within_bound: bool,
    /// Whether the placement time fell inside a detected breath-hold gate.
    pub shot_time_gated: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespirationSection {
    pub samples: usize,
    pub period_s: Option<f64>,
    pub period_error: Option<String>,
    pub gates: Vec<GateInterval>,
    pub alarms: Vec<AlarmEvent>,
    /// RMS difference between the tracked signal and the phantom's motion.
    pub signal_rms_error_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub distance_mm: f64,
    /// Camera-to-skin distance actually used; knots on the range limits are
    /// pulled inside so that noise is not clipped away.
    pub standoff_mm: f64,
    pub sigma_z_model_mm: f64,
    pub sigma_z_measured_mm: f64,
    pub fov_x_mm: f64,
    pub fov_y_mm: f64,
    pub pixel_size_mm: f64,
    pub detection_rate: f64,
    pub center_error_median_mm: Option<f64>,
    pub normal_error_median_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSection {
    pub stage_ms: BTreeMap<String, f64>,
    pub frames: usize,
    pub points_per_frame_mean: f64,
    pub detect_fuse_ms_mean: f64,
    pub detect_fuse_ms_max: f64,
    pub frames_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Software {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub software: Software,
    /// `PASSED`, `FAILED-GATE` or `STAGE-ERROR`.
    pub status: String,
    pub stage_seeds: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<ExecutionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respiration: Option<RespirationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_sweep: Option<Vec<AccuracyRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
    pub config: Scenario,
}

impl RunReport {
    pub fn empty(config: Scenario) -> Self {
        Self {
            software: Software {
                name: env!("CARGO_PKG_NAME").into(),
                version: env!("CARGO_PKG_VERSION").into(),
            },
            status: "PASSED".into(),
            stage_seeds: STAGES.iter().map(|s| (s.to_string(), stage_seed(config.seed, s))).collect(),
            calibration: None,
            detection: None,
            execution: None,
            respiration: None,
            accuracy_sweep: None,
            timing: None,
            failure: None,
            config,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.status.as_str() {
            "PASSED" => EXIT_OK,
            "FAILED-GATE" => EXIT_GATE,
            _ => EXIT_STAGE,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma.max(0.0)).expect("finite sigma")
}

/// Image coordinates of a camera-frame point: lateral position over the
/// pixel footprint at its depth.
pub fn project_px(camera: &CameraModel, p: Point) -> [f64; 2] {
    let ps = camera.fov_table.pixel_size(p.z).value;
    [p.x / ps, p.y / ps]
}

/// Output of the calibration stage.
#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub samples: Vec<CalibrationSample<f64>>,
    pub section: CalibrationSection,
}

/// Board observations at each station, board pose fits, reprojection
/// statistics and the hand-eye solve.
pub fn calibration_stage(sc: &Scenario) -> Result<CalibrationOutcome, StageFailure> {
    const STAGE: &str = "calibration";
    let cfg = &sc.calibration;
    let x_true = sc.hand_eye_truth;
    let board = cfg.board.corners();
    let flanges: Vec<Transform> = if sc.robot_script.is_empty() {
        let corners_base: Vec<Point> = board.iter().map(|p| cfg.board_in_base.transform_point(*p)).collect();
        let lo = corners_base.iter().fold(Point::new(f64::MAX, f64::MAX, f64::MAX), |a, p| {
            Point::new(a.x.min(p.x), a.y.min(p.y), a.z.min(p.z))
        });
        let hi = corners_base.iter().fold(Point::new(f64::MIN, f64::MIN, f64::MIN), |a, p| {
            Point::new(a.x.max(p.x), a.y.max(p.y), a.z.max(p.z))
        });
        let m = Point::new(cfg.box_margin_mm, cfg.box_margin_mm, 0.0);
        let obs = ObservationBox { min: lo - m, max: hi + m };
        plan_poses(&obs, cfg.station_count, cfg.tilt_range_deg, &sc.camera)
            .map_err(|e| fail(STAGE, e))?
            .iter()
            .map(|cam| cam.compose(&x_true.inverse()))
            .collect()
    } else {
        sc.robot_script.clone()
    };

    let seed = stage_seed(sc.seed, STAGE);
    let flange_seed = stage_seed(sc.seed, "flange");
    let mut samples = Vec::with_capacity(flanges.len());
    let mut observed_px = Vec::new();
    let mut reference_px = Vec::new();
    let mut per_station = Vec::new();
    for (i, flange) in flanges.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, i as u64));
        let cam_in_base = flange.compose(&x_true);
        let board_in_cam = cam_in_base.inverse().compose(&cfg.board_in_base);
        let mut observed = Vec::with_capacity(board.len());
        for c in &board {
            let p = board_in_cam.transform_point(*c);
            if !sc.camera.fov_table.contains(p) {
                return Err(fail(STAGE, format!("station {i}: board corner outside the field of view")));
            }
            let lateral = gaussian(cfg.corner_noise_px * sc.camera.fov_table.pixel_size(p.z).value);
            let depth = gaussian(sc.camera.noise_scale * sc.camera.sigma_z(p.z).value);
            observed.push(Point::new(
                p.x + lateral.sample(&mut rng),
                p.y + lateral.sample(&mut rng),
                p.z + depth.sample(&mut rng),
            ));
        }
        let b = fit_rigid(&board, &observed).ok_or_else(|| fail(STAGE, format!("station {i}: board fit failed")))?;
        let obs_px: Vec<[f64; 2]> = observed.iter().map(|p| project_px(&sc.camera, *p)).collect();
        let ref_px: Vec<[f64; 2]> = board
            .iter()
            .map(|c| project_px(&sc.camera, b.transform_point(*c)))
            .collect();
        let st = reprojection_error(&obs_px, &ref_px).map_err(|e| fail(STAGE, e))?;
        per_station.push(st.mean);
        observed_px.extend(obs_px);
        reference_px.extend(ref_px);

        let mut frng = ChaCha8Rng::seed_from_u64(item_seed(flange_seed, i as u64));
        samples.push(CalibrationSample {
            flange_in_base: cfg.flange_noise.perturb_local(flange, &mut frng),
            target_in_camera: b,
        });
    }
    let stats: ReprojectionStats<f64> = reprojection_error(&observed_px, &reference_px).map_err(|e| fail(STAGE, e))?;
    let hand_eye = solve_ax_xb(&samples).map_err(|e| fail(STAGE, e))?;
    let e = pose_error(&hand_eye.camera_in_flange, &x_true);
    let section = CalibrationSection {
        stations: samples.len(),
        hand_eye,
        hand_eye_error: PoseErrorSummary {
            rotation_deg: e.rotation_error,
            translation_mm: e.translation_error,
        },
        reprojection: ReprojectionSummary {
            mean_px: stats.mean,
            std_px: stats.std,
            max_px: stats.max,
            corner_count: stats.per_corner_offsets.len(),
            per_station_mean_px: per_station,
        },
        gate: GateVerdict {
            threshold_px: cfg.gate.max_mean_px,
            mean_px: stats.mean,
            passed: cfg.gate.passes(&stats),
        },
    };
    Ok(CalibrationOutcome { samples, section })
}

/// One tracked surgical frame.
#[derive(Debug, Clone)]
pub struct FrameResult {
    pub pose: MarkerPose,
    pub in_base: Point,
    pub truth_in_base: Point,
}

#[derive(Debug, Clone)]
pub struct SurgeryOutcome {
    pub frames: Vec<FrameResult>,
    pub saved_clouds: Vec<(usize, PointCloud)>,
    pub signal: BreathSignal,
    pub detection: DetectionSection,
    pub respiration: RespirationSection,
    pub detect_fuse_ms: Vec<f64>,
    pub points_per_frame: Vec<usize>,
}

fn render_frame(
    sc: &Scenario,
    marker: &RingMarker,
    camera: &CameraModel,
    k: usize,
    stage_seed: u64,
) -> Result<PointCloud, SceneError> {
    let t = k as f64 / sc.camera.frame_rate;
    render_cloud(&sc.phantom, sc.marker_present.then_some(marker), camera, t, item_seed(stage_seed, k as u64))
}

/// Surgical frame `k` exactly as the surgery stage renders it.
pub fn render_surgery_frame(sc: &Scenario, k: usize) -> Result<PointCloud, SceneError> {
    let marker = sc.placed_marker(sc.surgery.marker_xy);
    let camera = sc.camera_at(sc.camera_over(sc.surgery.marker_xy, sc.surgery.standoff_mm));
    render_frame(sc, &marker, &camera, k, stage_seed(sc.seed, "surgery"))
}

/// Renders and tracks the surgical frames, chains them to the base frame and
/// extracts the breathing signal.
pub fn surgery_stage(sc: &Scenario, hand_eye: &Transform) -> Result<SurgeryOutcome, StageFailure> {
    const STAGE: &str = "surgery";
    let cfg = &sc.surgery;
    let marker = sc.placed_marker(cfg.marker_xy);
    let cam_in_phantom = sc.camera_over(cfg.marker_xy, cfg.standoff_mm);
    let camera = sc.camera_at(cam_in_phantom);
    let cam_in_base = sc.phantom_in_base.compose(&cam_in_phantom);
    let flange_true = cam_in_base.compose(&sc.hand_eye_truth.inverse());
    let mut frng = ChaCha8Rng::seed_from_u64(item_seed(stage_seed(sc.seed, "flange"), 1_000_000));
    let flange = sc.calibration.flange_noise.perturb_local(&flange_true, &mut frng);
    let cam_inv = cam_in_phantom.inverse();

    let seed = stage_seed(sc.seed, STAGE);
    let mut frames = Vec::with_capacity(cfg.frame_count);
    let mut saved = Vec::new();
    let mut timings = Vec::with_capacity(cfg.frame_count);
    let mut sizes = Vec::with_capacity(cfg.frame_count);
    let (mut ce, mut ne, mut rms) = (Vec::new(), Vec::new(), Vec::new());
    let mut prev: Option<MarkerPose> = None;
    for k in 0..cfg.frame_count {
        let t = k as f64 / sc.camera.frame_rate;
        let cloud = render_frame(sc, &marker, &camera, k, seed).map_err(|e| fail(STAGE, format!("frame {k}: {e}")))?;
        sizes.push(cloud.len());
        let start = Instant::now();
        let pose = match &prev {
            None => detect_ring(&cloud, &sc.detect),
            Some(p) => track(p, &cloud, &sc.detect),
        }
        .map_err(|e| fail(STAGE, format!("frame {k}: {}: {e}", e.kind())))?;
        let in_base = marker_in_base(hand_eye, &flange, &pose).point;
        timings.push(start.elapsed().as_secs_f64() * 1e3);

        let truth_cam = cam_inv.transform_point(marker.top_center(&sc.phantom, t));
        let truth_n = cam_inv.rotate_vector(marker.pose_at(&sc.phantom, t).rotate_vector(Point::new(0.0, 0.0, 1.0)));
        ce.push(pose.center.distance(truth_cam));
        ne.push(pose.normal.angle_deg(truth_n));
        rms.push(pose.rms_residual);
        frames.push(FrameResult {
            pose,
            in_base,
            truth_in_base: sc.phantom_in_base.transform_point(marker.top_center(&sc.phantom, t)),
        });
        if cfg.save_frames.contains(&k) {
            saved.push((k, cloud));
        }
        prev = Some(pose);
    }
    let detection = DetectionSection {
        frames: frames.len(),
        center_error_median_mm: median(ce.clone()),
        center_error_max_mm: ce.iter().cloned().fold(0.0, f64::max),
        normal_error_median_deg: median(ne.clone()),
        normal_error_max_deg: ne.iter().cloned().fold(0.0, f64::max),
        rms_residual_median_mm: median(rms),
    };

    let poses: Vec<MarkerPose> = frames.iter().map(|f| f.pose).collect();
    let signal = extract_signal(&poses, poses[0].normal).map_err(|e| fail(STAGE, e))?;
    let r = &sc.respiration;
    let gates = detect_breath_hold(&signal, r.amplitude_tol_mm, r.min_duration_s).map_err(|e| fail(STAGE, e))?;
    let alarms = motion_alarm(&signal, r.alarm_threshold_mm).map_err(|e| fail(STAGE, e))?;
    let (period_s, period_error) = match estimate_period(&signal) {
        Ok(p) => (Some(p), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let b0 = breathing_offset(&sc.phantom, 0.0);
    let sse: f64 = signal
        .samples()
        .iter()
        .map(|s| {
            let want = breathing_offset(&sc.phantom, s.t) - b0;
            (s.displacement - want).powi(2)
        })
        .sum();
    let respiration = RespirationSection {
        samples: signal.len(),
        period_s,
        period_error,
        gates,
        alarms,
        signal_rms_error_mm: (sse / signal.len() as f64).sqrt(),
    };
    Ok(SurgeryOutcome {
        frames,
        saved_clouds: saved,
        signal,
        detection,
        respiration,
        detect_fuse_ms: timings,
        points_per_frame: sizes,
    })
}

#[derive(Debug, Clone)]
pub struct TcpOutcome {
    pub records: Vec<ExecutionRecord<f64>>,
    pub section: ExecutionSection,
}

/// Marker shots at the fit and evaluation placements, correction fit on the
/// former and scored on the latter.
pub fn tcp_stage(sc: &Scenario, hand_eye: &Transform, gates: Option<&[GateInterval]>) -> Result<TcpOutcome, StageFailure> {
    const STAGE: &str = "tcp";
    let cfg = &sc.tcp;
    let seed = stage_seed(sc.seed, STAGE);
    let flange_seed = stage_seed(sc.seed, "flange");
    let bias = Point::from_array(cfg.robot_bias_mm);
    let pendant = gaussian(cfg.pendant_noise_mm);
    let all: Vec<(&str, [f64; 2])> = cfg
        .fit_placements
        .iter()
        .map(|p| ("fit", *p))
        .chain(cfg.eval_placements.iter().map(|p| ("eval", *p)))
        .collect();
    let mut records = Vec::with_capacity(all.len());
    for (i, (_, xy)) in all.iter().enumerate() {
        let marker = sc.placed_marker(*xy);
        let cam_in_phantom = sc.camera_over(*xy, sc.surgery.standoff_mm);
        let camera = sc.camera_at(cam_in_phantom);
        let cam_in_base = sc.phantom_in_base.compose(&cam_in_phantom);
        let flange_true = cam_in_base.compose(&sc.hand_eye_truth.inverse());
        let mut frng = ChaCha8Rng::seed_from_u64(item_seed(flange_seed, 2_000_000 + i as u64));
        let flange = sc.calibration.flange_noise.perturb_local(&flange_true, &mut frng);
        let shot_seed = item_seed(seed, i as u64);
        let cloud = render_cloud(&sc.phantom, sc.marker_present.then_some(&marker), &camera, cfg.time_s, shot_seed)
            .map_err(|e| fail(STAGE, format!("placement {i}: {e}")))?;
        let pose = detect_ring(&cloud, &sc.detect).map_err(|e| fail(STAGE, format!("placement {i}: {}: {e}", e.kind())))?;
        let observed = marker_in_base(hand_eye, &flange, &pose).point;
        let truth = sc
            .phantom_in_base
            .transform_point(marker.top_center(&sc.phantom, cfg.time_s));
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(shot_seed, 1));
        let noise = Point::new(pendant.sample(&mut rng), pendant.sample(&mut rng), pendant.sample(&mut rng));
        records.push(ExecutionRecord::new(observed, truth + bias + noise));
    }
    let n_fit = cfg.fit_placements.len();
    let (fit, eval) = records.split_at(n_fit);
    let (model, correction, apply): (String, TcpCorrection<f64>, Box<dyn Fn(Point) -> Point>) = if cfg.full_affine {
        let a = fit_affine_correction(fit).map_err(|e| fail(STAGE, e))?;
        let summary = TcpCorrection {
            scale: [a.matrix.m[0][0], a.matrix.m[1][1], a.matrix.m[2][2]],
            offset: a.offset,
            fit_pair_count: fit.len(),
            fit_rms: a.fit_rms,
        };
        ("full-affine".into(), summary, Box::new(move |p| a.apply(p)))
    } else {
        let c = fit_tcp_correction(fit).map_err(|e| fail(STAGE, e))?;
        ("per-axis".into(), c, Box::new(move |p| apply_correction(&c, p)))
    };
    let mut rows = Vec::with_capacity(records.len());
    let mut pre = [0.0; 3];
    let mut post = [0.0; 3];
    for (i, r) in records.iter().enumerate() {
        let residual = r.robot_executed - apply(r.camera_observed);
        let role = if i < n_fit { "fit" } else { "eval" };
        if role == "eval" {
            for k in 0..3 {
                pre[k] += r.difference.to_array()[k].abs() / eval.len() as f64;
                post[k] += residual.to_array()[k].abs() / eval.len() as f64;
            }
        }
        rows.push(ExecutionRow {
            placement: i,
            role: role.into(),
            observed: r.camera_observed,
            executed: r.robot_executed,
            difference: r.difference,
            residual,
        });
    }
    let shot_time_gated =
        gates.map(|g| g.iter().any(|iv| iv.start - 1e-9 <= cfg.time_s && cfg.time_s <= iv.end + 1e-9));
    Ok(TcpOutcome {
        records,
        section: ExecutionSection {
            model,
            correction,
            rows,
            pre_correction_mean_abs_mm: pre,
            post_correction_mean_abs_mm: post,
            bound_mm: EXECUTION_ERROR_BOUND_MM,
            within_bound: post.iter().all(|v| *v <= EXECUTION_ERROR_BOUND_MM),
            shot_time_gated,
        },
    })
}

/// Flat, still phantom viewed straight down at each table knot.
///
/// The skin and the raised marker must both sit inside the working range
/// with room for 3σ of depth noise, so the end knots are inset.
pub fn sweep_stage(sc: &Scenario) -> Result<Vec<AccuracyRow>, StageFailure> {
    const STAGE: &str = "sweep";
    let seed = stage_seed(sc.seed, STAGE);
    let phantom = TorsoPhantom {
        base_surface: SurfaceShape::Flat,
        breathing_amplitude: 0.0,
        hold: None,
        excursions: Vec::new(),
        occluders: Vec::new(),
        ..sc.phantom.clone()
    };
    let marker = RingMarker {
        pose_on_surface: Transform::identity(),
        ..sc.marker
    };
    let table = &sc.camera.fov_table;
    let mut rows = Vec::new();
    for (ki, knot) in table.rows().iter().enumerate() {
        let lo = table.near() + marker.thickness + 3.0 * table.sigma_z(table.near()).value + 0.5;
        let hi = table.far() - 3.0 * table.sigma_z(table.far()).value - 0.5;
        let d = knot.distance.clamp(lo, hi);
        let mount = CameraModel::looking_down_from(d);
        let camera = sc.camera_at(mount);
        let inv = mount.inverse();
        let truth_c = inv.transform_point(marker.top_center(&phantom, 0.0));
        let truth_n = inv.rotate_vector(Point::new(0.0, 0.0, 1.0));
        let (mut ce, mut ne, mut sig) = (Vec::new(), Vec::new(), Vec::new());
        let mut found = 0usize;
        for trial in 0..sc.sweep.trials {
            let s = item_seed(seed, (ki * 10_000 + trial) as u64);
            let cloud = render_cloud(&phantom, Some(&marker), &camera, 0.0, s).map_err(|e| fail(STAGE, e))?;
            // skin annulus around the marker for the empirical depth noise
            let skin: Vec<Point> = cloud
                .points
                .iter()
                .filter(|p| {
                    let r = ((p.x - truth_c.x).powi(2) + (p.y - truth_c.y).powi(2)).sqrt();
                    (20.0..60.0).contains(&r)
                })
                .copied()
                .collect();
            if let Some((c, n, _)) = fit_plane(&skin) {
                let m = skin.len() as f64;
                sig.push((skin.iter().map(|p| (*p - c).dot(n).powi(2)).sum::<f64>() / (m - 3.0).max(1.0)).sqrt());
            }
            if let Ok(pose) = detect_ring(&cloud, &sc.detect) {
                found += 1;
                ce.push(pose.center.distance(truth_c));
                ne.push(pose.normal.angle_deg(truth_n));
            }
        }
        rows.push(AccuracyRow {
            distance_mm: knot.distance,
            standoff_mm: d,
            sigma_z_model_mm: knot.sigma_z,
            sigma_z_measured_mm: median(sig),
            fov_x_mm: knot.fov_x,
            fov_y_mm: knot.fov_y,
            pixel_size_mm: knot.pixel_size,
            detection_rate: found as f64 / sc.sweep.trials as f64,
            center_error_median_mm: (!ce.is_empty()).then(|| median(ce)),
            normal_error_median_deg: (!ne.is_empty()).then(|| median(ne)),
        });
    }
    Ok(rows)
}

/// Everything a run produces; `report` is what goes to `report.json`.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub timing: TimingSection,
    pub calibration_samples: Vec<CalibrationSample<f64>>,
    pub records: Vec<ExecutionRecord<f64>>,
    pub signal: Option<BreathSignal>,
    pub clouds: Vec<(usize, PointCloud)>,
}

/// Runs all stages in order. Stops at the reprojection gate or the first
/// stage error, recording which.
pub fn run_scenario(sc: &Scenario) -> RunOutcome {
    let mut report = RunReport::empty(sc.clone());
    let mut out = RunOutcome {
        report: report.clone(),
        timing: TimingSection {
            stage_ms: BTreeMap::new(),
            frames: 0,
            points_per_frame_mean: 0.0,
            detect_fuse_ms_mean: 0.0,
            detect_fuse_ms_max: 0.0,
            frames_per_second: 0.0,
        },
        calibration_samples: Vec::new(),
        records: Vec::new(),
        signal: None,
        clouds: Vec::new(),
    };
    let mut stage_ms = BTreeMap::new();
    let finish = |mut report: RunReport, mut out: RunOutcome, stage_ms: BTreeMap<String, f64>| {
        out.timing.stage_ms = stage_ms;
        if sc.record_wall_clock {
            report.timing = Some(out.timing.clone());
        }
        out.report = report;
        out
    };

    let t0 = Instant::now();
    let cal = match calibration_stage(sc) {
        Ok(c) => c,
        Err(f) => {
            report.status = "STAGE-ERROR".into();
            report.failure = Some(f);
            return finish(report, out, stage_ms);
        }
    };
    stage_ms.insert("calibration".into(), t0.elapsed().as_secs_f64() * 1e3);
    let x_hat = cal.section.hand_eye.camera_in_flange;
    let passed = cal.section.gate.passed;
    out.calibration_samples = cal.samples;
    report.calibration = Some(cal.section);
    if !passed {
        report.status = "FAILED-GATE".into();
        return finish(report, out, stage_ms);
    }

    let t0 = Instant::now();
    let surgery = match surgery_stage(sc, &x_hat) {
        Ok(s) => s,
        Err(f) => {
            report.status = "STAGE-ERROR".into();
            report.failure = Some(f);
            return finish(report, out, stage_ms);
        }
    };
    stage_ms.insert("surgery".into(), t0.elapsed().as_secs_f64() * 1e3);
    let n = surgery.detect_fuse_ms.len().max(1) as f64;
    let mean_ms = surgery.detect_fuse_ms.iter().sum::<f64>() / n;
    out.timing.frames = surgery.detect_fuse_ms.len();
    out.timing.points_per_frame_mean = surgery.points_per_frame.iter().sum::<usize>() as f64 / n;
    out.timing.detect_fuse_ms_mean = mean_ms;
    out.timing.detect_fuse_ms_max = surgery.detect_fuse_ms.iter().cloned().fold(0.0, f64::max);
    out.timing.frames_per_second = if mean_ms > 0.0 { 1e3 / mean_ms } else { f64::INFINITY };
    report.detection = Some(surgery.detection.clone());
    let gates = surgery.respiration.gates.clone();
    report.respiration = Some(surgery.respiration);
    out.signal = Some(surgery.signal);
    out.clouds = surgery.saved_clouds;

    let t0 = Instant::now();
    match tcp_stage(sc, &x_hat, Some(&gates)) {
        Ok(t) => {
            out.records = t.records;
            report.execution = Some(t.section);
        }
        Err(f) => {
            report.status = "STAGE-ERROR".into();
            report.failure = Some(f);
            return finish(report, out, stage_ms);
        }
    }
    stage_ms.insert("tcp".into(), t0.elapsed().as_secs_f64() * 1e3);

    if sc.sweep.enabled {
        let t0 = Instant::now();
        match sweep_stage(sc) {
            Ok(rows) => report.accuracy_sweep = Some(rows),
            Err(f) => {
                report.status = "STAGE-ERROR".into();
                report.failure = Some(f);
                return finish(report, out, stage_ms);
            }
        }
        stage_ms.insert("sweep".into(), t0.elapsed().as_secs_f64() * 1e3);
    }
    finish(report, out, stage_ms)
}

pub const TABLE_IDS: [&str; 3] = ["accuracy-vs-distance", "execution-error", "timing"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV text for one report table.
pub fn emit_table(report: &RunReport, table_id: &str) -> Result<String, HarnessError> {
    let mut s = String::new();
    match table_id {
        "accuracy-vs-distance" => {
            let rows = report
                .accuracy_sweep
                .as_ref()
                .ok_or(HarnessError::MissingSection("accuracy_sweep"))?;
            s.push_str("distance_mm,standoff_mm,sigma_z_model_mm,sigma_z_measured_mm,fov_x_mm,fov_y_mm,pixel_size_mm,detection_rate,center_error_median_mm,normal_error_median_deg\n");
            for r in rows {
                s.push_str(&format!(
                    "{},{:.3},{},{:.6},{},{},{},{:.3},{},{}\n",
                    r.distance_mm,
                    r.standoff_mm,
                    r.sigma_z_model_mm,
                    r.sigma_z_measured_mm,
                    r.fov_x_mm,
                    r.fov_y_mm,
                    r.pixel_size_mm,
                    r.detection_rate,
                    opt(r.center_error_median_mm),
                    opt(r.normal_error_median_deg)
                ));
            }
        }
        "execution-error" => {
            let ex = report.execution.as_ref().ok_or(HarnessError::MissingSection("execution"))?;
            s.push_str("placement,role,obs_x,obs_y,obs_z,exec_x,exec_y,exec_z,diff_x,diff_y,diff_z,resid_x,resid_y,resid_z\n");
            for r in &ex.rows {
                let mut line = format!("{},{}", r.placement, r.role);
                for p in [r.observed, r.executed, r.difference, r.residual] {
                    line.push_str(&format!(",{:.6},{:.6},{:.6}", p.x, p.y, p.z));
                }
                s.push_str(&line);
                s.push('\n');
            }
        }
        "timing" => {
            let t = report.timing.as_ref().ok_or(HarnessError::MissingSection("timing"))?;
            s.push_str(&timing_csv(t));
        }
        other => return Err(HarnessError::UnknownTable(other.into())),
    }
    Ok(s)
}

pub fn timing_csv(t: &TimingSection) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in &t.stage_ms {
        s.push_str(&format!("stage_{k}_ms,{v:.3}\n"));
    }
    s.push_str(&format!("frames,{}\n", t.frames));
    s.push_str(&format!("points_per_frame_mean,{:.1}\n", t.points_per_frame_mean));
    s.push_str(&format!("detect_fuse_ms_mean,{:.3}\n", t.detect_fuse_ms_mean));
    s.push_str(&format!("detect_fuse_ms_max,{:.3}\n", t.detect_fuse_ms_max));
    s.push_str(&format!("frames_per_second,{:.2}\n", t.frames_per_second));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ_and_are_stable() {
        let a = stage_seed(7, "calibration");
        assert_eq!(a, stage_seed(7, "calibration"));
        assert_ne!(a, stage_seed(7, "surgery"));
        assert_ne!(a, stage_seed(8, "calibration"));
        assert_ne!(item_seed(a, 0), item_seed(a, 1));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn board_corners_are_centred() {
        let b = BoardSpec {
            cols: 3,
            rows: 2,
            pitch_mm: 10.0,
        };
        let c = b.corners();
        assert_eq!(c.len(), 6);
        assert_eq!(c[0], Point::new(-10.0, -5.0, 0.0));
        let sum = c.iter().fold(Point::zeros(), |a, p| a + *p);
        assert!(sum.norm() < 1e-12);
    }

    #[test]
    fn default_scenario_validates() {
        Scenario::default().validate().unwrap();
        let text = serde_json::to_string(&Scenario::default()).unwrap();
        assert_eq!(Scenario::from_json(&text).unwrap(), Scenario::default());
    }

    #[test]
    fn bad_scenarios_are_config_errors() {
        let mut s = Scenario::default();
        s.surgery.standoff_mm = 900.0;
        assert!(matches!(s.validate(), Err(HarnessError::Config(_))));
        let mut s = Scenario::default();
        s.tcp.eval_placements.clear();
        assert!(s.validate().is_err());
        assert!(Scenario::from_json("{\"seed\": 1}").is_err());
    }

    #[test]
    fn empty_report_tables_are_missing() {
        let r = RunReport::empty(Scenario::default());
        for id in TABLE_IDS {
            assert!(matches!(emit_table(&r, id), Err(HarnessError::MissingSection(_))));
        }
        assert!(matches!(emit_table(&r, "nope"), Err(HarnessError::UnknownTable(_))));
    }
}
