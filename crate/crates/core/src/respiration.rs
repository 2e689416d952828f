//! Breathing curve from tracked marker poses, breath-hold gates and motion
//! alarms.

use std::io::{Read, Write};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::marker::MarkerPose;
use crate::Point;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RespirationError {
    #[error("need at least two samples")]
    EmptyStream,
    #[error("timestamps must be strictly increasing (t={0})")]
    NonMonotoneTime(f64),
    #[error("no periodicity (autocorrelation peak {0:.3} below 0.5)")]
    NoPeriodicity(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub displacement: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BreathSignal {
    samples: Vec<Sample>,
}

impl BreathSignal {
    pub fn new(samples: Vec<Sample>) -> Result<Self, RespirationError> {
        for w in samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(RespirationError::NonMonotoneTime(w[1].t));
            }
        }
        if samples.iter().any(|s| !s.t.is_finite() || !s.displacement.is_finite()) {
            return Err(RespirationError::InvalidArgument("non-finite sample"));
        }
        Ok(Self { samples })
    }

    pub fn from_fn(times: impl IntoIterator<Item = f64>, mut f: impl FnMut(f64) -> f64) -> Result<Self, RespirationError> {
        Self::new(
            times
                .into_iter()
                .map(|t| Sample {
                    t,
                    displacement: f(t),
                })
                .collect(),
        )
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, s: Sample) -> Result<(), RespirationError> {
        if let Some(last) = self.samples.last() {
            if !(s.t > last.t) {
                return Err(RespirationError::NonMonotoneTime(s.t));
            }
        }
        self.samples.push(s);
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), RespirationError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t_s", "displacement_mm"])?;
        for s in &self.samples {
            out.write_record([format!("{:.6}", s.t), format!("{:.6}", s.displacement)])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, RespirationError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut samples = Vec::new();
        for row in rdr.deserialize::<(f64, f64)>() {
            let (t, displacement) = row?;
            samples.push(Sample { t, displacement });
        }
        Self::new(samples)
    }
}

/// Single-writer, many-reader signal buffer. Readers get a copy.
#[derive(Debug, Clone, Default)]
pub struct SignalRecorder {
    inner: Arc<RwLock<BreathSignal>>,
}

impl SignalRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, s: Sample) -> Result<(), RespirationError> {
        self.inner.write().unwrap_or_else(|e| e.into_inner()).push(s)
    }

    pub fn snapshot(&self) -> BreathSignal {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

/// Projects each marker centre's displacement from the first pose onto
/// `reference_normal`.
pub fn extract_signal(poses: &[MarkerPose], reference_normal: Point) -> Result<BreathSignal, RespirationError> {
    if poses.len() < 2 {
        return Err(RespirationError::EmptyStream);
    }
    let n = reference_normal
        .normalized()
        .ok_or(RespirationError::InvalidArgument("zero reference normal"))?;
    let c0 = poses[0].center;
    BreathSignal::new(
        poses
            .iter()
            .map(|p| Sample {
                t: p.timestamp,
                displacement: (p.center - c0).dot(n),
            })
            .collect(),
    )
}

/// Linear resampling onto a uniform grid at the median sample spacing.
fn resample(s: &[Sample]) -> (Vec<f64>, f64) {
    let mut d: Vec<f64> = s.windows(2).map(|w| w[1].t - w[0].t).collect();
    d.sort_by(f64::total_cmp);
    let dt = d[d.len() / 2];
    let t0 = s[0].t;
    let n = ((s[s.len() - 1].t - t0) / dt + TIME_EPS).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for k in 0..n {
        let t = t0 + k as f64 * dt;
        while j + 2 < s.len() && s[j + 1].t < t {
            j += 1;
        }
        let (a, b) = (s[j], s[(j + 1).min(s.len() - 1)]);
        let v = if b.t > a.t {
            let f = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
            a.displacement + f * (b.displacement - a.displacement)
        } else {
            a.displacement
        };
        out.push(v);
    }
    (out, dt)
}

/// Pearson correlation of the series with itself shifted by `lag`.
fn autocorr(x: &[f64], lag: usize) -> f64 {
    let (a, b) = (&x[..x.len() - lag], &x[lag..]);
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (p, q) in a.iter().zip(b) {
        sab += (p - ma) * (q - mb);
        saa += (p - ma) * (p - ma);
        sbb += (q - mb) * (q - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Dominant period from the autocorrelation: the earliest local peak after
/// the first negative lobe that reaches 90 % of the highest peak, refined
/// with a parabola through its neighbours.
pub fn estimate_period(signal: &BreathSignal) -> Result<f64, RespirationError> {
    let s = signal.samples();
    if s.len() < 16 {
        return Err(RespirationError::EmptyStream);
    }
    let (x, dt) = resample(s);
    let max_lag = x.len() / 2;
    let r: Vec<f64> = (0..=max_lag).map(|k| autocorr(&x, k)).collect();
    let Some(first_neg) = r.iter().position(|v| *v < 0.0) else {
        return Err(RespirationError::NoPeriodicity(0.0));
    };
    let peaks: Vec<usize> = (first_neg.max(1)..max_lag)
        .filter(|&k| r[k] >= r[k - 1] && r[k] >= r[k + 1] && r[k] > 0.0)
        .collect();
    let best = peaks.iter().map(|&k| r[k]).fold(0.0, f64::max);
    if best < 0.5 {
        return Err(RespirationError::NoPeriodicity(best));
    }
    let k = *peaks.iter().find(|&&k| r[k] >= 0.9 * best).expect("best is a peak");
    let (a, b, c) = (r[k - 1], r[k], r[k + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-15 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Ok((k as f64 + shift) * dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateInterval {
    pub start: f64,
    pub end: f64,
    pub mean_level: f64,
}

impl GateInterval {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Union of all windows spanning `min_duration` whose samples stay within
/// `±amplitude_tol` of the window mean.
pub fn detect_breath_hold(
    signal: &BreathSignal,
    amplitude_tol: f64,
    min_duration: f64,
) -> Result<Vec<GateInterval>, RespirationError> {
    if !(amplitude_tol > 0.0) || !(min_duration > 0.0) {
        return Err(RespirationError::InvalidArgument("amplitude_tol and min_duration must be positive"));
    }
    let s = signal.samples();
    // flat windows as inclusive index ranges
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut j = 0;
    for i in 0..s.len() {
        j = j.max(i);
        while j + 1 < s.len() && s[j + 1].t - s[i].t <= min_duration + TIME_EPS {
            j += 1;
        }
        if s[j].t - s[i].t < min_duration - TIME_EPS {
            break;
        }
        let w = &s[i..=j];
        let mean = w.iter().map(|p| p.displacement).sum::<f64>() / w.len() as f64;
        if w.iter().all(|p| (p.displacement - mean).abs() <= amplitude_tol) {
            match spans.last_mut() {
                Some(last) if i <= last.1 => last.1 = last.1.max(j),
                _ => spans.push((i, j)),
            }
        }
    }
    Ok(spans
        .into_iter()
        .map(|(a, b)| GateInterval {
            start: s[a].t,
            end: s[b].t,
            mean_level: s[a..=b].iter().map(|p| p.displacement).sum::<f64>() / (b - a + 1) as f64,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlarmEvent {
    pub t: f64,
    pub displacement: f64,
    pub baseline: f64,
}

pub const ALARM_BASELINE_S: f64 = 2.0;

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fires when a sample departs from the median of the preceding two seconds
/// by more than `threshold`; re-arms once a sample is back within it.
pub fn motion_alarm(signal: &BreathSignal, threshold: f64) -> Result<Vec<AlarmEvent>, RespirationError> {
    if !(threshold > 0.0) {
        return Err(RespirationError::InvalidArgument("threshold must be positive"));
    }
    let s = signal.samples();
    let mut events = Vec::new();
    let mut armed = true;
    let mut lo = 0;
    let mut buf = Vec::new();
    for i in 1..s.len() {
        while s[i].t - s[lo].t > ALARM_BASELINE_S + TIME_EPS {
            lo += 1;
        }
        buf.clear();
        buf.extend(s[lo..i].iter().map(|p| p.displacement));
        let baseline = median(&mut buf);
        let dev = (s[i].displacement - baseline).abs();
        if armed && dev > threshold {
            events.push(AlarmEvent {
                t: s[i].t,
                displacement: s[i].displacement,
                baseline,
            });
            armed = false;
        } else if !armed && dev <= threshold {
            armed = true;
        }
    }
    Ok(events)
}
