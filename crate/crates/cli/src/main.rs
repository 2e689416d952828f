use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use specklenav::fov::{
    accuracy_estimate, observation_rectangle_fit, DistanceQuery, FovKnotReport, FovReport, RectangleReport,
};
use specklenav::fusion::{
    apply_correction, correction_rms, fit_tcp_correction, read_records_csv, write_records_csv, ExecutionRecord,
};
use specklenav::harness::{
    calibration_stage, emit_table, render_surgery_frame, run_scenario, surgery_stage, tcp_stage, timing_csv,
    RunReport, Scenario, StageFailure, EXIT_CONFIG, EXIT_GATE, EXIT_OK, EXIT_STAGE, TABLE_IDS,
};
use specklenav::marker::detect_ring;
use specklenav::respiration::{detect_breath_hold, estimate_period, motion_alarm, BreathSignal};
use specklenav::scene::{load_cloud, save_cloud};

#[derive(Parser)]
#[command(name = "specklenav", version, about = "Synthetic depth-camera ring-marker navigation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario JSON; the built-in default scenario when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render surgical frames to PLY.
    Simulate {
        /// Render frames 0..N instead of the scenario's saved frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Run the calibration stage and the reprojection gate.
    Calibrate,
    /// Detect the ring marker in a cloud (frame 0 of the scenario by default).
    Detect {
        #[arg(long)]
        cloud: Option<PathBuf>,
    },
    /// Fit a TCP correction from a records CSV, or run the execution stage.
    Fuse {
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Gating and alarms from a signal CSV, or from the surgical frames.
    Breathe {
        #[arg(long)]
        signal: Option<PathBuf>,
    },
    /// Field-of-view feasibility checks.
    Fov {
        /// Query the table at one working distance, mm.
        #[arg(long)]
        distance: Option<f64>,
        /// Observation rectangle `X Y`, mm.
        #[arg(long, num_args = 2, value_names = ["X", "Y"], allow_negative_numbers = true)]
        rect: Option<Vec<f64>>,
        /// Observation-space edge for the accuracy rule of thumb, mm.
        #[arg(long)]
        extent: Option<f64>,
    },
    /// Full scenario.
    Run,
    /// Print one table of a saved report as CSV.
    EmitTable {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        table: String,
    },
}

enum Failure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
    Gate(String),
}

impl From<StageFailure> for Failure {
    fn from(f: StageFailure) -> Self {
        Failure::Stage(anyhow::anyhow!("{} stage: {}", f.stage, f.error))
    }
}

fn stage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Stage(e.into())
}

fn config<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Config(e.into())
}

type Res = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // clap's own usage-error code would collide with the gate code
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { EXIT_OK as u8 });
        }
    };
    let code = match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            EXIT_CONFIG
        }
        Err(Failure::Stage(e)) => {
            eprintln!("stage error: {e:#}");
            EXIT_STAGE
        }
        Err(Failure::Gate(msg)) => {
            eprintln!("gate failure: {msg}");
            EXIT_GATE
        }
    };
    ExitCode::from(code as u8)
}

fn load_scenario(c: &Common) -> Result<Scenario, Failure> {
    let mut sc = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(config)?;
            Scenario::from_json(&text).map_err(config)?
        }
        None => Scenario::default(),
    };
    if let Some(seed) = c.seed {
        sc.seed = seed;
    }
    sc.validate().map_err(config)?;
    Ok(sc)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Res {
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display())).map_err(stage)
}

fn json<T: serde::Serialize + ?Sized>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn execute(cli: &Cli) -> Res {
    let out = &cli.common.out;
    if let Command::EmitTable { report, table } = &cli.command {
        return emit(report, table, out);
    }
    let sc = load_scenario(&cli.common)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(stage)?;
    match &cli.command {
        Command::Simulate { frames } => simulate(&sc, *frames, out),
        Command::Calibrate => calibrate(&sc, out).map(|_| ()),
        Command::Detect { cloud } => detect(&sc, cloud.as_deref(), out),
        Command::Fuse { records } => fuse(&sc, records.as_deref(), out),
        Command::Breathe { signal } => breathe(&sc, signal.as_deref(), out),
        Command::Fov { distance, rect, extent } => fov(&sc, *distance, rect.as_deref(), *extent, out),
        Command::Run => run(&sc, out),
        Command::EmitTable { .. } => unreachable!(),
    }
}

fn simulate(sc: &Scenario, frames: Option<usize>, out: &Path) -> Res {
    let indices: Vec<usize> = match frames {
        Some(n) => (0..n).collect(),
        None => sc.surgery.save_frames.clone(),
    };
    for k in indices {
        let cloud = render_surgery_frame(sc, k).map_err(stage)?;
        save_cloud(&cloud, &out.join(format!("cloud_{k:04}.ply"))).map_err(stage)?;
        println!("frame {k}: {} points", cloud.len());
    }
    Ok(())
}

fn calibrate(sc: &Scenario, out: &Path) -> Result<specklenav::Transform, Failure> {
    let cal = calibration_stage(sc)?;
    write(out, "calibration_set.json", json(&cal.samples))?;
    write(out, "handeye.json", json(&cal.section))?;
    let g = &cal.section.gate;
    println!(
        "hand-eye error {:.4} mm / {:.4} deg, reprojection mean {:.4} px",
        cal.section.hand_eye_error.translation_mm, cal.section.hand_eye_error.rotation_deg, g.mean_px
    );
    if !g.passed {
        return Err(Failure::Gate(format!(
            "reprojection mean {:.4} px is not below {} px",
            g.mean_px, g.threshold_px
        )));
    }
    Ok(cal.section.hand_eye.camera_in_flange)
}

fn detect(sc: &Scenario, cloud: Option<&Path>, out: &Path) -> Res {
    let cloud = match cloud {
        Some(p) => load_cloud(p).map_err(config)?,
        None => render_surgery_frame(sc, 0).map_err(stage)?,
    };
    let pose = detect_ring(&cloud, &sc.detect).map_err(stage)?;
    let text = json(&pose);
    print!("{text}");
    write(out, "marker.json", text)
}

fn execution_rows_csv(records: &[ExecutionRecord<f64>], corrected: impl Fn(usize) -> [f64; 3]) -> String {
    let mut s = String::from("record,obs_x,obs_y,obs_z,exec_x,exec_y,exec_z,resid_x,resid_y,resid_z\n");
    for (i, r) in records.iter().enumerate() {
        let o = r.camera_observed;
        let e = r.robot_executed;
        let c = corrected(i);
        s.push_str(&format!(
            "{i},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            o.x,
            o.y,
            o.z,
            e.x,
            e.y,
            e.z,
            e.x - c[0],
            e.y - c[1],
            e.z - c[2]
        ));
    }
    s
}

fn fuse(sc: &Scenario, records: Option<&Path>, out: &Path) -> Res {
    if let Some(p) = records {
        let file = fs::File::open(p).with_context(|| format!("opening {}", p.display())).map_err(config)?;
        let recs = read_records_csv(file).map_err(config)?;
        let c = fit_tcp_correction(&recs).map_err(stage)?;
        write(out, "correction.json", json(&c))?;
        let csv = execution_rows_csv(&recs, |i| {
            let q = apply_correction(&c, recs[i].camera_observed);
            [q.x, q.y, q.z]
        });
        write(out, "execution.csv", csv)?;
        println!("{} records, fit rms {:.4} mm", recs.len(), correction_rms(&c, &recs));
        return Ok(());
    }
    let x_hat = calibrate(sc, out)?;
    let tcp = tcp_stage(sc, &x_hat, None)?;
    let mut report = RunReport::empty(sc.clone());
    report.execution = Some(tcp.section.clone());
    write(out, "correction.json", json(&tcp.section))?;
    write(out, "execution.csv", emit_table(&report, "execution-error").map_err(stage)?)?;
    let mut buf = Vec::new();
    write_records_csv(&mut buf, &tcp.records).map_err(stage)?;
    write(out, "records.csv", buf)?;
    let m = tcp.section.post_correction_mean_abs_mm;
    println!(
        "post-correction mean |error| x {:.4} y {:.4} z {:.4} mm (bound {} mm: {})",
        m[0],
        m[1],
        m[2],
        tcp.section.bound_mm,
        if tcp.section.within_bound { "met" } else { "exceeded" }
    );
    Ok(())
}

fn breathe(sc: &Scenario, signal: Option<&Path>, out: &Path) -> Res {
    let r = &sc.respiration;
    let signal = match signal {
        Some(p) => {
            let file = fs::File::open(p).with_context(|| format!("opening {}", p.display())).map_err(config)?;
            BreathSignal::read_csv(file).map_err(config)?
        }
        None => {
            let x_hat = calibrate(sc, out)?;
            surgery_stage(sc, &x_hat)?.signal
        }
    };
    let gates = detect_breath_hold(&signal, r.amplitude_tol_mm, r.min_duration_s).map_err(stage)?;
    let alarms = motion_alarm(&signal, r.alarm_threshold_mm).map_err(stage)?;
    let period = estimate_period(&signal);
    let mut buf = Vec::new();
    signal.write_csv(&mut buf).map_err(stage)?;
    write(out, "signal.csv", buf)?;
    let summary = serde_json::json!({
        "samples": signal.len(),
        "period_s": period.as_ref().ok(),
        "period_error": period.as_ref().err().map(|e| e.to_string()),
        "gates": gates,
        "alarms": alarms,
    });
    write(out, "gates.json", json(&summary))?;
    println!("{} samples, {} gates, {} alarms", signal.len(), gates.len(), alarms.len());
    Ok(())
}

fn fov(sc: &Scenario, distance: Option<f64>, rect: Option<&[f64]>, extent: Option<f64>, out: &Path) -> Res {
    let table = &sc.camera.fov_table;
    let rectangle = match rect {
        Some([x, y]) => Some(RectangleReport {
            rect_x_mm: *x,
            rect_y_mm: *y,
            fit: observation_rectangle_fit(table, *x, *y).map_err(config)?,
        }),
        _ => None,
    };
    let distance_query = distance.map(|d| {
        let fov = table.field_of_view(d);
        DistanceQuery {
            distance_mm: d,
            fov_x_mm: fov.value.0,
            fov_y_mm: fov.value.1,
            sigma_z_mm: table.sigma_z(d).value,
            clamped: fov.clamped,
        }
    });
    let report = FovReport {
        near_mm: table.near(),
        far_mm: table.far(),
        knots: table
            .rows()
            .iter()
            .map(|r| FovKnotReport {
                distance_mm: r.distance,
                fov_x_mm: r.fov_x,
                fov_y_mm: r.fov_y,
                sigma_z_mm: r.sigma_z,
            })
            .collect(),
        rectangle,
        accuracy_rule: extent.map(accuracy_estimate).transpose().map_err(config)?,
        distance_query,
    };
    let text = json(&report);
    print!("{text}");
    write(out, "fov.json", text)
}

fn run(sc: &Scenario, out: &Path) -> Res {
    let o = run_scenario(sc);
    let r = &o.report;
    write(out, "report.json", r.to_json())?;
    if !o.calibration_samples.is_empty() {
        write(out, "calibration_set.json", json(&o.calibration_samples))?;
    }
    for id in ["execution-error", "accuracy-vs-distance"] {
        if let Ok(t) = emit_table(r, id) {
            let name = if id == "execution-error" { "execution.csv" } else { "accuracy.csv" };
            write(out, name, t)?;
        }
    }
    if !o.records.is_empty() {
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &o.records).map_err(stage)?;
        write(out, "records.csv", buf)?;
    }
    write(out, "timing.csv", timing_csv(&o.timing))?;
    if let Some(s) = &o.signal {
        let mut buf = Vec::new();
        s.write_csv(&mut buf).map_err(stage)?;
        write(out, "signal.csv", buf)?;
    }
    for (k, cloud) in &o.clouds {
        save_cloud(cloud, &out.join(format!("cloud_{k:04}.ply"))).map_err(stage)?;
    }
    println!("status {}", r.status);
    match r.exit_code() {
        EXIT_OK => Ok(()),
        EXIT_GATE => Err(Failure::Gate(format!(
            "reprojection mean {:.4} px",
            r.calibration.as_ref().map_or(f64::NAN, |c| c.gate.mean_px)
        ))),
        _ => Err(Failure::Stage(anyhow::anyhow!(
            "{}",
            r.failure.as_ref().map_or(String::new(), |f| format!("{} stage: {}", f.stage, f.error))
        ))),
    }
}

fn emit(report: &Path, table: &str, out: &Path) -> Res {
    if !TABLE_IDS.contains(&table) {
        return Err(config(anyhow::anyhow!(
            "unknown table {table:?}; expected one of {}",
            TABLE_IDS.join(", ")
        )));
    }
    let text = fs::read_to_string(report).with_context(|| format!("reading {}", report.display())).map_err(config)?;
    let r: RunReport = serde_json::from_str(&text).context("parsing report").map_err(config)?;
    let csv = emit_table(&r, table).map_err(stage)?;
    print!("{csv}");
    fs::create_dir_all(out).map_err(stage)?;
    write(out, &format!("{table}.csv"), csv)
}
