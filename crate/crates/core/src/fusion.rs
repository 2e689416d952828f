//! Marker poses in the robot base frame and the per-axis TCP correction.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point3, RigidTransform};
use crate::linalg::Mat3;
use crate::marker::MarkerPose;
use crate::scalar::Real;
use crate::{Point, Transform};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no execution records")]
    EmptyRecords,
    #[error("fitted scale {scale} on axis {axis} is outside [0.9, 1.1]")]
    ScaleOutOfRange { axis: char, scale: f64 },
    #[error("records do not span 3-D; full affine fit is singular")]
    Degenerate,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad csv header, expected {expected}")]
    BadHeader { expected: &'static str },
}

pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
pub const RECORD_CSV_HEADER: [&str; 6] = ["obs_x", "obs_y", "obs_z", "exec_x", "exec_y", "exec_z"];

/// Marker centre and normal expressed in the base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasePoint {
    pub point: Point,
    pub normal: Point,
}

/// `flange_in_base ∘ hand_eye` applied to the marker centre and normal.
pub fn marker_in_base(hand_eye: &Transform, flange_in_base: &Transform, marker: &MarkerPose) -> BasePoint {
    let chain = flange_in_base.compose(hand_eye);
    BasePoint {
        point: chain.transform_point(marker.center),
        normal: chain.rotate_vector(marker.normal),
    }
}

/// A camera-derived target and where the robot actually arrived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct ExecutionRecord<T> {
    pub camera_observed: Point3<T>,
    pub robot_executed: Point3<T>,
    /// `robot_executed − camera_observed`.
    pub difference: Point3<T>,
}

impl<T: Real> ExecutionRecord<T> {
    pub fn new(camera_observed: Point3<T>, robot_executed: Point3<T>) -> Self {
        Self {
            camera_observed,
            robot_executed,
            difference: robot_executed - camera_observed,
        }
    }
}

/// Per-axis affine map `executed = scale · observed + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct TcpCorrection<T> {
    pub scale: [T; 3],
    pub offset: [T; 3],
    pub fit_pair_count: usize,
    pub fit_rms: T,
}

impl<T: Real> TcpCorrection<T> {
    pub fn identity() -> Self {
        Self {
            scale: [T::one(); 3],
            offset: [T::zero(); 3],
            fit_pair_count: 0,
            fit_rms: T::zero(),
        }
    }

    pub fn from_offsets(offset: [T; 3]) -> Self {
        Self {
            offset,
            ..Self::identity()
        }
    }

    /// Mean of the three offsets.
    pub fn mean_offset(&self) -> T {
        (self.offset[0] + self.offset[1] + self.offset[2]) / T::lit(3.0)
    }
}

fn axis(p: Point3<impl Real>, k: usize) -> f64 {
    p.to_array()[k].to_f64().unwrap_or(f64::NAN)
}

/// Sum of squared residuals of one axis under `scale·obs + offset`.
pub fn axis_sse<T: Real>(records: &[ExecutionRecord<T>], k: usize, scale: T, offset: T) -> T {
    records.iter().fold(T::zero(), |acc, r| {
        let e = r.robot_executed.to_array()[k] - (scale * r.camera_observed.to_array()[k] + offset);
        acc + e * e
    })
}

/// With four or more records, an independent least-squares line per axis;
/// with fewer, unit scale and the mean difference as offset. `fit_rms` is
/// the RMS over all axes and records of the post-fit residual vector length.
pub fn fit_tcp_correction<T: Real>(records: &[ExecutionRecord<T>]) -> Result<TcpCorrection<T>, FusionError> {
    if records.is_empty() {
        return Err(FusionError::EmptyRecords);
    }
    let n = T::from_usize(records.len()).unwrap_or(T::one());
    let mut scale = [T::one(); 3];
    let mut offset = [T::zero(); 3];
    for k in 0..3 {
        let xs: Vec<T> = records.iter().map(|r| r.camera_observed.to_array()[k]).collect();
        let ys: Vec<T> = records.iter().map(|r| r.robot_executed.to_array()[k]).collect();
        let mx = xs.iter().fold(T::zero(), |a, v| a + *v) / n;
        let my = ys.iter().fold(T::zero(), |a, v| a + *v) / n;
        let sxx = xs.iter().fold(T::zero(), |a, v| a + (*v - mx) * (*v - mx));
        let sxy = xs
            .iter()
            .zip(&ys)
            .fold(T::zero(), |a, (x, y)| a + (*x - mx) * (*y - my));
        // a flat axis has no slope information; fall back to offset-only
        let spread = T::lit(1e-9) * (T::one() + mx.abs()) * (T::one() + mx.abs());
        if records.len() >= 4 && sxx > spread * n {
            scale[k] = sxy / sxx;
            offset[k] = my - scale[k] * mx;
        } else {
            let mean_diff = records
                .iter()
                .fold(T::zero(), |a, r| a + r.difference.to_array()[k])
                / n;
            offset[k] = mean_diff;
        }
        let s = scale[k].to_f64().unwrap_or(f64::NAN);
        if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&s) {
            return Err(FusionError::ScaleOutOfRange {
                axis: ['x', 'y', 'z'][k],
                scale: s,
            });
        }
    }
    let mut c = TcpCorrection {
        scale,
        offset,
        fit_pair_count: records.len(),
        fit_rms: T::zero(),
    };
    c.fit_rms = correction_rms(&c, records);
    Ok(c)
}

/// RMS length of `executed − apply_correction(observed)` over `records`.
pub fn correction_rms<T: Real>(c: &TcpCorrection<T>, records: &[ExecutionRecord<T>]) -> T {
    if records.is_empty() {
        return T::zero();
    }
    let sse = records.iter().fold(T::zero(), |a, r| {
        a + (r.robot_executed - apply_correction(c, r.camera_observed)).norm_squared()
    });
    (sse / T::from_usize(records.len()).unwrap_or(T::one())).sqrt()
}

pub fn apply_correction<T: Real>(c: &TcpCorrection<T>, observed: Point3<T>) -> Point3<T> {
    Point3::new(
        c.scale[0] * observed.x + c.offset[0],
        c.scale[1] * observed.y + c.offset[1],
        c.scale[2] * observed.z + c.offset[2],
    )
}

/// Full affine map `executed = M · observed + offset`. Off by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineCorrection<T> {
    pub matrix: Mat3<T>,
    pub offset: [T; 3],
    pub fit_rms: T,
}

impl<T: Real> AffineCorrection<T> {
    pub fn apply(&self, p: Point3<T>) -> Point3<T> {
        Point3::from_array(self.matrix.mul_vec(p.to_array())) + Point3::from_array(self.offset)
    }
}

/// Least-squares full affine fit; needs four records that span 3-D.
pub fn fit_affine_correction<T: Real>(records: &[ExecutionRecord<T>]) -> Result<AffineCorrection<T>, FusionError> {
    if records.is_empty() {
        return Err(FusionError::EmptyRecords);
    }
    if records.len() < 4 {
        return Err(FusionError::Degenerate);
    }
    let n = T::from_usize(records.len()).unwrap_or(T::one());
    let mean = |f: &dyn Fn(&ExecutionRecord<T>) -> Point3<T>| {
        records.iter().fold(Point3::zeros(), |a, r| a + f(r)) * (T::one() / n)
    };
    let mo = mean(&|r| r.camera_observed);
    let me = mean(&|r| r.robot_executed);
    let mut sxx = Mat3::zeros();
    let mut syx = Mat3::zeros();
    for r in records {
        let x = (r.camera_observed - mo).to_array();
        let y = (r.robot_executed - me).to_array();
        sxx = sxx.add(&Mat3::outer(x, x));
        syx = syx.add(&Mat3::outer(y, x));
    }
    // M sxx = syx, solved row by row (sxx is symmetric)
    let mut rows = [[T::zero(); 3]; 3];
    for (k, row) in rows.iter_mut().enumerate() {
        *row = sxx.solve(syx.m[k]).ok_or(FusionError::Degenerate)?;
    }
    let matrix = Mat3::new(rows);
    let off = me - Point3::from_array(matrix.mul_vec(mo.to_array()));
    let mut c = AffineCorrection {
        matrix,
        offset: off.to_array(),
        fit_rms: T::zero(),
    };
    let sse = records
        .iter()
        .fold(T::zero(), |a, r| a + (r.robot_executed - c.apply(r.camera_observed)).norm_squared());
    c.fit_rms = (sse / n).sqrt();
    Ok(c)
}

/// Writes records as CSV with six decimals.
pub fn write_records_csv<W: Write>(w: W, records: &[ExecutionRecord<f64>]) -> Result<(), FusionError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RECORD_CSV_HEADER)?;
    for r in records {
        let vals: Vec<String> = (0..3)
            .map(|k| axis(r.camera_observed, k))
            .chain((0..3).map(|k| axis(r.robot_executed, k)))
            .map(|v| format!("{v:.6}"))
            .collect();
        out.write_record(&vals)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_records_csv<R: Read>(r: R) -> Result<Vec<ExecutionRecord<f64>>, FusionError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().ne(RECORD_CSV_HEADER.iter().copied()) {
        return Err(FusionError::BadHeader {
            expected: "obs_x,obs_y,obs_z,exec_x,exec_y,exec_z",
        });
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<[f64; 6]>() {
        let v = row?;
        out.push(ExecutionRecord::new(
            Point::new(v[0], v[1], v[2]),
            Point::new(v[3], v[4], v[5]),
        ));
    }
    Ok(out)
}

/// Builds a record set by chaining marker poses to the base frame and
/// pairing them with the executed positions.
pub fn records_from_chain(
    hand_eye: &RigidTransform<f64>,
    stations: &[(Transform, MarkerPose, Point)],
) -> Vec<ExecutionRecord<f64>> {
    stations
        .iter()
        .map(|(flange, marker, executed)| ExecutionRecord::new(marker_in_base(hand_eye, flange, marker).point, *executed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marker_at(c: Point) -> MarkerPose {
        MarkerPose {
            center: c,
            normal: Point::new(0.0, 0.0, -1.0),
            radius: 10.0,
            rms_residual: 0.0,
            inlier_count: 0,
            timestamp: 0.0,
        }
    }

    #[test]
    fn identity_chain() {
        let m = marker_at(Point::new(1.0, 2.0, 3.0));
        let b = marker_in_base(&Transform::identity(), &Transform::identity(), &m);
        assert_eq!(b.point, m.center);
    }

    #[test]
    fn translation_chain() {
        let m = marker_at(Point::new(0.0, 0.0, 300.0));
        let b = marker_in_base(&Transform::from_translation(0.0, 0.0, 100.0), &Transform::identity(), &m);
        assert_eq!(b.point, Point::new(0.0, 0.0, 400.0));
    }

    #[test]
    fn empty_records() {
        assert!(matches!(
            fit_tcp_correction::<f64>(&[]),
            Err(FusionError::EmptyRecords)
        ));
    }

    #[test]
    fn identical_pairs_fit_identity() {
        let recs: Vec<_> = (0..6)
            .map(|i| {
                let p = Point::new(i as f64 * 10.0, -(i as f64) * 7.0, 3.0 * i as f64);
                ExecutionRecord::new(p, p)
            })
            .collect();
        let c = fit_tcp_correction(&recs).unwrap();
        for k in 0..3 {
            assert!((c.scale[k] - 1.0).abs() < 1e-12);
            assert!(c.offset[k].abs() < 1e-9);
        }
        assert!(c.fit_rms < 1e-9);
    }

    #[test]
    fn wild_scale_is_rejected() {
        let recs: Vec<_> = (0..5)
            .map(|i| {
                let p = Point::new(i as f64 * 10.0, i as f64, i as f64);
                ExecutionRecord::new(p, Point::new(p.x * 1.5, p.y, p.z))
            })
            .collect();
        assert!(matches!(
            fit_tcp_correction(&recs),
            Err(FusionError::ScaleOutOfRange { axis: 'x', .. })
        ));
    }

    #[test]
    fn f32_correction() {
        let r = ExecutionRecord::new(
            Point3::new(1.0f32, 2.0, 3.0),
            Point3::new(1.5f32, 2.0, 2.5),
        );
        let c = fit_tcp_correction(&[r]).unwrap();
        assert_eq!(apply_correction(&c, r.camera_observed), r.robot_executed);
    }
}
