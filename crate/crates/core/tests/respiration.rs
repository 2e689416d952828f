use std::f64::consts::PI;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use specklenav::marker::{detect_ring, DetectParams, MarkerPose};
use specklenav::respiration::{
    detect_breath_hold, estimate_period, extract_signal, motion_alarm, BreathSignal, RespirationError, Sample,
    SignalRecorder,
};
use specklenav::scene::{breathing_offset, render_cloud, CameraModel, RingMarker, TorsoPhantom};
use specklenav::Point;

const HZ: f64 = 30.0;

fn times(seconds: f64, hz: f64) -> Vec<f64> {
    (0..=(seconds * hz).round() as usize).map(|k| k as f64 / hz).collect()
}

/// Rest at 0, 0.5 s ramp to 10 mm, plateau on [2, 7], ramp back down.
fn trapezoid(t: f64) -> f64 {
    if t < 1.5 {
        0.0
    } else if t < 2.0 {
        10.0 * (t - 1.5) / 0.5
    } else if t <= 7.0 {
        10.0
    } else if t < 7.5 {
        10.0 * (7.5 - t) / 0.5
    } else {
        0.0
    }
}

fn pose(c: Point, t: f64) -> MarkerPose {
    MarkerPose {
        center: c,
        normal: Point::new(0.0, 0.0, -1.0),
        radius: 10.0,
        rms_residual: 0.0,
        inlier_count: 0,
        timestamp: t,
    }
}

#[test]
fn static_and_orthogonal_give_zero() {
    let still: Vec<_> = times(2.0, 10.0).into_iter().map(|t| pose(Point::new(1.0, 2.0, 400.0), t)).collect();
    let s = extract_signal(&still, Point::new(0.0, 0.0, -1.0)).unwrap();
    assert!(s.samples().iter().all(|p| p.displacement == 0.0));

    let sliding: Vec<_> = times(2.0, 10.0)
        .into_iter()
        .map(|t| pose(Point::new(5.0 * (t * 3.0).sin(), 0.0, 400.0), t))
        .collect();
    let s = extract_signal(&sliding, Point::new(0.0, 0.0, -1.0)).unwrap();
    assert!(s.samples().iter().all(|p| p.displacement == 0.0));

    assert!(matches!(extract_signal(&still[..1], Point::new(0.0, 0.0, 1.0)), Err(RespirationError::EmptyStream)));
    let mut bad = still.clone();
    bad[3].timestamp = bad[2].timestamp;
    assert!(matches!(
        extract_signal(&bad, Point::new(0.0, 0.0, 1.0)),
        Err(RespirationError::NonMonotoneTime(_))
    ));
}

#[test]
fn tracked_breathing_matches_synthesizer() {
    let ph = TorsoPhantom {
        breathing_amplitude: 5.0,
        breathing_period: 4.0,
        ..TorsoPhantom::default()
    };
    let m = RingMarker::default();
    let cam = CameraModel {
        mount_pose: CameraModel::looking_down_from(400.0),
        ..CameraModel::default()
    };
    let params = DetectParams::default();
    let ts = times(4.0, 10.0);
    let poses: Vec<_> = ts
        .iter()
        .enumerate()
        .map(|(k, t)| detect_ring(&render_cloud(&ph, Some(&m), &cam, *t, k as u64).unwrap(), &params).unwrap())
        .collect();
    let s = extract_signal(&poses, poses[0].normal).unwrap();
    for (p, t) in s.samples().iter().zip(&ts) {
        let want = breathing_offset(&ph, *t) - breathing_offset(&ph, 0.0);
        assert!((p.displacement - want).abs() < 0.15, "t={t}: {} vs {want}", p.displacement);
    }
}

#[test]
fn sinusoid_period() {
    let s = BreathSignal::from_fn(times(20.0, HZ), |t| 5.0 * (2.0 * PI * t / 4.0).sin()).unwrap();
    let p = estimate_period(&s).unwrap();
    assert!((p - 4.0).abs() < 0.02 * 4.0, "{p}");
}

#[test]
fn noisy_sinusoid_period() {
    // SNR 10 in power: noise variance = signal variance / 10
    let sigma = (12.5f64 / 10.0).sqrt();
    let n = Normal::new(0.0, sigma).unwrap();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = BreathSignal::from_fn(times(20.0, HZ), |t| 5.0 * (2.0 * PI * t / 4.0).sin() + n.sample(&mut rng))
            .unwrap();
        let p = estimate_period(&s).unwrap();
        assert!((p - 4.0).abs() < 0.05 * 4.0, "seed {seed}: {p}");
    }
}

#[test]
fn irregular_sampling_period() {
    let ts: Vec<f64> = (0..600).map(|k| k as f64 / HZ + 0.004 * ((k * 7919) % 5) as f64).collect();
    let s = BreathSignal::from_fn(ts, |t| 3.0 * (2.0 * PI * t / 3.5).cos()).unwrap();
    assert!((estimate_period(&s).unwrap() - 3.5).abs() < 0.02 * 3.5);
}

#[test]
fn sinusoid_never_gates() {
    let s = BreathSignal::from_fn(times(20.0, HZ), |t| 5.0 * (2.0 * PI * t / 4.0).sin()).unwrap();
    assert!(detect_breath_hold(&s, 0.5, 2.0).unwrap().is_empty());
    // oracle: a 2 s window of this sinusoid always spans at least 5 mm peak to peak
    let xs = s.samples();
    for i in 0..xs.len() {
        let w: Vec<f64> = xs.iter().filter(|p| p.t >= xs[i].t && p.t <= xs[i].t + 2.0).map(|p| p.displacement).collect();
        if xs[i].t + 2.0 <= 20.0 {
            let span = w.iter().cloned().fold(f64::MIN, f64::max) - w.iter().cloned().fold(f64::MAX, f64::min);
            assert!(span > 1.0);
        }
    }
}

#[test]
fn trapezoid_plateau_gate() {
    let s = BreathSignal::from_fn(times(10.0, HZ), trapezoid).unwrap();
    let gates = detect_breath_hold(&s, 0.5, 2.0).unwrap();
    let plateau: Vec<_> = gates.iter().filter(|g| (g.mean_level - 10.0).abs() < 0.5).collect();
    assert_eq!(plateau.len(), 1, "{gates:?}");
    let g = plateau[0];
    assert!((g.duration() - 5.0).abs() <= 1.0 / HZ + 1e-9, "{g:?}");
    assert!((g.start - 2.0).abs() <= 1.0 / HZ + 1e-9 && (g.end - 7.0).abs() <= 1.0 / HZ + 1e-9);
}

#[test]
fn step_alarm_fires_at_step() {
    let s = BreathSignal::from_fn(times(10.0, HZ), |t| if t >= 5.0 { 3.0 } else { 0.0 }).unwrap();
    let a = motion_alarm(&s, 1.0).unwrap();
    assert_eq!(a.len(), 1, "{a:?}");
    assert!((a[0].t - 5.0).abs() <= 1.0 / HZ + 1e-9);
}

#[test]
fn two_excursions_two_alarms() {
    let s = BreathSignal::from_fn(times(12.0, HZ), |t| {
        if (3.0..3.5).contains(&t) || (8.0..8.5).contains(&t) {
            4.0
        } else {
            0.0
        }
    })
    .unwrap();
    let a = motion_alarm(&s, 1.0).unwrap();
    assert_eq!(a.len(), 2, "{a:?}");
    assert!((a[0].t - 3.0).abs() < 0.05 && (a[1].t - 8.0).abs() < 0.05);
}

#[test]
fn trapezoid_alarms_stay_outside_the_gate() {
    let s = BreathSignal::from_fn(times(10.0, HZ), trapezoid).unwrap();
    let gates = detect_breath_hold(&s, 0.5, 2.0).unwrap();
    let alarms = motion_alarm(&s, 1.0).unwrap();
    assert!(!alarms.is_empty());
    for g in &gates {
        for a in &alarms {
            assert!(a.t < g.start || a.t > g.end, "{a:?} inside {g:?}");
        }
    }
}

#[test]
fn recorder_snapshots_are_consistent() {
    let rec = SignalRecorder::new();
    let writer = {
        let rec = rec.clone();
        std::thread::spawn(move || {
            for k in 0..2000 {
                rec.append(Sample {
                    t: k as f64 * 0.01,
                    displacement: k as f64,
                })
                .unwrap();
            }
        })
    };
    for _ in 0..50 {
        let snap = rec.snapshot();
        for (k, s) in snap.samples().iter().enumerate() {
            assert_eq!(s.displacement, k as f64);
        }
    }
    writer.join().unwrap();
    assert_eq!(rec.snapshot().len(), 2000);
    assert!(rec.append(Sample { t: 0.0, displacement: 0.0 }).is_err());
}

fn bounded_plateau() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (proptest::collection::vec(-1.0..1.0f64, 150..400), -20.0..20.0f64)
}

proptest! {
    #[test]
    fn plateau_gate_has_no_alarm((noise, level) in bounded_plateau(), tol in 0.2..2.0f64, extra in 0.0..1.0f64) {
        let xs: Vec<Sample> = noise
            .iter()
            .enumerate()
            .map(|(k, u)| Sample { t: k as f64 / HZ, displacement: level + 0.5 * tol * u })
            .collect();
        let s = BreathSignal::new(xs).unwrap();
        let gates = detect_breath_hold(&s, tol, 2.0).unwrap();
        let alarms = motion_alarm(&s, tol + extra).unwrap();
        for g in &gates {
            for a in &alarms {
                prop_assert!(a.t < g.start || a.t > g.end);
            }
        }
    }

    #[test]
    fn time_shift_equivariance(delta in -50.0..50.0f64, amp in 0.5..6.0f64) {
        let f = |t: f64| amp * trapezoid(t) / 10.0 + if (8.5..8.8).contains(&t) { 2.0 } else { 0.0 };
        let base = BreathSignal::from_fn(times(10.0, HZ), f).unwrap();
        let shifted = BreathSignal::new(
            base.samples().iter().map(|s| Sample { t: s.t + delta, displacement: s.displacement }).collect(),
        )
        .unwrap();
        let (g0, g1) = (detect_breath_hold(&base, 0.3, 1.5).unwrap(), detect_breath_hold(&shifted, 0.3, 1.5).unwrap());
        prop_assert_eq!(g0.len(), g1.len());
        for (a, b) in g0.iter().zip(&g1) {
            prop_assert!((a.start + delta - b.start).abs() < 1e-9 && (a.end + delta - b.end).abs() < 1e-9);
        }
        let (a0, a1) = (motion_alarm(&base, 1.0).unwrap(), motion_alarm(&shifted, 1.0).unwrap());
        prop_assert_eq!(a0.len(), a1.len());
        for (a, b) in a0.iter().zip(&a1) {
            prop_assert!((a.t + delta - b.t).abs() < 1e-9);
        }
    }

    #[test]
    fn doubling_amplitude_never_adds_gate_time(seed in any::<u64>(), amp in 0.1..3.0f64) {
        let n = Normal::new(0.0, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = times(12.0, HZ)
            .iter()
            .map(|t| amp * ((2.0 * PI * t / 4.0).sin().clamp(-0.6, 0.6)) + n.sample(&mut rng))
            .collect();
        let total = |k: f64| {
            let s = BreathSignal::new(
                vals.iter().enumerate().map(|(i, v)| Sample { t: i as f64 / HZ, displacement: k * v }).collect(),
            )
            .unwrap();
            detect_breath_hold(&s, 0.5, 1.0).unwrap().iter().map(|g| g.duration()).sum::<f64>()
        };
        prop_assert!(total(2.0) <= total(1.0) + 1e-9);
    }
}
