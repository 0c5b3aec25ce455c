//! Datum conversions between BD-09, GCJ-02 and WGS-84, plus the small amount of
//! metric geometry (haversine, local equirectangular frame, bearings) the rest of
//! the pipeline needs.
//!
//! The WGS-84/GCJ-02 obfuscation and the BD-09 polar offset use the widely
//! published constants. GCJ-02 to WGS-84 has no closed form and is solved by
//! fixed-point iteration.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used for every metric computation in the crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Ground length of one degree of arc on the mean sphere (~111194.9 m).
pub const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * PI / 180.0;

const KRASOVSKY_A: f64 = 6_378_245.0;
const KRASOVSKY_EE: f64 = 0.006_693_421_622_965_943_23;
const BD_X_PI: f64 = PI * 3000.0 / 180.0;

const INVERSE_TOL_DEG: f64 = 1e-9;
const INVERSE_MAX_ITER: usize = 50;
const LOCAL_FRAME_MAX_DEG: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeodesyError {
    #[error("invalid coordinate ({lng}, {lat})")]
    InvalidCoordinate { lng: f64, lat: f64 },
    #[error("datum inverse did not converge after {iterations} iterations (last iterate {last})")]
    NoConvergence { last: GeoPoint, iterations: usize },
    #[error("point {point} is too far from local frame origin {origin}")]
    ProjectionRange { origin: GeoPoint, point: GeoPoint },
    #[error("expected datum {expected}, found {found}")]
    DatumMismatch { expected: Datum, found: Datum },
    #[error("unknown datum {0:?}")]
    UnknownDatum(String),
}

pub type Result<T> = std::result::Result<T, GeodesyError>;

/// Longitude/latitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lng: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub const fn new(lng: f64, lat: f64) -> Self {
        Self { lng, lat }
    }

    /// Checks finiteness and the longitude/latitude ranges.
    pub fn validate(self) -> Result<Self> {
        let ok = self.lng.is_finite()
            && self.lat.is_finite()
            && (-180.0..=180.0).contains(&self.lng)
            && (-90.0..=90.0).contains(&self.lat);
        if ok {
            Ok(self)
        } else {
            Err(GeodesyError::InvalidCoordinate {
                lng: self.lng,
                lat: self.lat,
            })
        }
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lng, self.lat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datum {
    Bd09,
    Gcj02,
    Wgs84,
}

impl Datum {
    pub fn as_str(self) -> &'static str {
        match self {
            Datum::Bd09 => "bd09",
            Datum::Gcj02 => "gcj02",
            Datum::Wgs84 => "wgs84",
        }
    }
}

impl fmt::Display for Datum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Datum {
    type Err = GeodesyError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bd09" => Ok(Datum::Bd09),
            "gcj02" => Ok(Datum::Gcj02),
            "wgs84" => Ok(Datum::Wgs84),
            other => Err(GeodesyError::UnknownDatum(other.to_string())),
        }
    }
}

/// A point together with the datum its coordinates are expressed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaggedPoint {
    pub point: GeoPoint,
    pub datum: Datum,
}

impl TaggedPoint {
    pub const fn new(point: GeoPoint, datum: Datum) -> Self {
        Self { point, datum }
    }

    /// Converts to `target`, routing through GCJ-02 when needed.
    pub fn to_datum(self, target: Datum) -> Result<TaggedPoint> {
        use Datum::*;
        let point = match (self.datum, target) {
            (a, b) if a == b => self.point.validate()?,
            (Bd09, Gcj02) => bd09_to_gcj02(self.point)?,
            (Gcj02, Bd09) => gcj02_to_bd09(self.point)?,
            (Wgs84, Gcj02) => wgs84_to_gcj02(self.point)?,
            (Gcj02, Wgs84) => gcj02_to_wgs84(self.point)?,
            (Bd09, Wgs84) => gcj02_to_wgs84(bd09_to_gcj02(self.point)?)?,
            (Wgs84, Bd09) => gcj02_to_bd09(wgs84_to_gcj02(self.point)?)?,
            _ => unreachable!(),
        };
        Ok(TaggedPoint::new(point, target))
    }
}

/// Rectangle used by the reference implementations to decide whether the
/// GCJ-02 offset applies.
pub fn in_china(p: GeoPoint) -> bool {
    (72.004..=137.8347).contains(&p.lng) && (0.8293..=55.8271).contains(&p.lat)
}

/// BD-09 to GCJ-02.
///
/// Starts from the published one-shot de-offset and then corrects it by
/// fixed-point iteration against [`gcj02_to_bd09`]; the one-shot formula
/// alone leaves residuals up to ~2e-6 degrees.
pub fn bd09_to_gcj02(p: GeoPoint) -> Result<GeoPoint> {
    let p = p.validate()?;
    let x = p.lng - 0.0065;
    let y = p.lat - 0.006;
    let z = x.hypot(y) - 0.000_02 * (y * BD_X_PI).sin();
    let theta = y.atan2(x) - 0.000_003 * (x * BD_X_PI).cos();
    let mut g = GeoPoint::new(z * theta.cos(), z * theta.sin());
    for _ in 0..INVERSE_MAX_ITER {
        let b = gcj_to_bd_raw(g);
        let next = GeoPoint::new(g.lng + (p.lng - b.lng), g.lat + (p.lat - b.lat));
        let step = (next.lng - g.lng).abs().max((next.lat - g.lat).abs());
        g = next;
        if step < INVERSE_TOL_DEG {
            return Ok(g);
        }
    }
    Err(GeodesyError::NoConvergence {
        last: g,
        iterations: INVERSE_MAX_ITER,
    })
}

fn gcj_to_bd_raw(p: GeoPoint) -> GeoPoint {
    let (x, y) = (p.lng, p.lat);
    let z = x.hypot(y) + 0.000_02 * (y * BD_X_PI).sin();
    let theta = y.atan2(x) + 0.000_003 * (x * BD_X_PI).cos();
    GeoPoint::new(z * theta.cos() + 0.0065, z * theta.sin() + 0.006)
}

pub fn gcj02_to_bd09(p: GeoPoint) -> Result<GeoPoint> {
    Ok(gcj_to_bd_raw(p.validate()?))
}

fn gcj_delta(p: GeoPoint) -> (f64, f64) {
    let x = p.lng - 105.0;
    let y = p.lat - 35.0;

    let shared = (20.0 * (6.0 * x * PI).sin() + 20.0 * (2.0 * x * PI).sin()) * 2.0 / 3.0;
    let mut d_lat = -100.0 + 2.0 * x + 3.0 * y + 0.2 * y * y + 0.1 * x * y + 0.2 * x.abs().sqrt()
        + shared
        + (20.0 * (y * PI).sin() + 40.0 * (y / 3.0 * PI).sin()) * 2.0 / 3.0
        + (160.0 * (y / 12.0 * PI).sin() + 320.0 * (y * PI / 30.0).sin()) * 2.0 / 3.0;
    let mut d_lng = 300.0 + x + 2.0 * y + 0.1 * x * x + 0.1 * x * y + 0.1 * x.abs().sqrt()
        + shared
        + (20.0 * (x * PI).sin() + 40.0 * (x / 3.0 * PI).sin()) * 2.0 / 3.0
        + (150.0 * (x / 12.0 * PI).sin() + 300.0 * (x / 30.0 * PI).sin()) * 2.0 / 3.0;

    let rad_lat = p.lat.to_radians();
    let magic = 1.0 - KRASOVSKY_EE * rad_lat.sin().powi(2);
    let sqrt_magic = magic.sqrt();
    d_lat = (d_lat * 180.0) / ((KRASOVSKY_A * (1.0 - KRASOVSKY_EE)) / (magic * sqrt_magic) * PI);
    d_lng = (d_lng * 180.0) / (KRASOVSKY_A / sqrt_magic * rad_lat.cos() * PI);
    (d_lng, d_lat)
}

pub fn wgs84_to_gcj02(p: GeoPoint) -> Result<GeoPoint> {
    let p = p.validate()?;
    if !in_china(p) {
        return Ok(p);
    }
    let (d_lng, d_lat) = gcj_delta(p);
    Ok(GeoPoint::new(p.lng + d_lng, p.lat + d_lat))
}

/// Inverts [`wgs84_to_gcj02`] by fixed-point iteration `w <- w + (g - f(w))`.
pub fn gcj02_to_wgs84(p: GeoPoint) -> Result<GeoPoint> {
    let p = p.validate()?;
    if !in_china(p) {
        return Ok(p);
    }
    let mut w = p;
    for _ in 0..INVERSE_MAX_ITER {
        let g = wgs84_to_gcj02(w)?;
        let next = GeoPoint::new(w.lng + (p.lng - g.lng), w.lat + (p.lat - g.lat));
        let step = (next.lng - w.lng).abs().max((next.lat - w.lat).abs());
        w = next;
        if step < INVERSE_TOL_DEG {
            return Ok(w);
        }
    }
    Err(GeodesyError::NoConvergence {
        last: w,
        iterations: INVERSE_MAX_ITER,
    })
}

/// Great-circle distance in meters on the mean sphere.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> Result<f64> {
    let a = a.validate()?;
    let b = b.validate()?;
    Ok(haversine_unchecked(a, b))
}

pub(crate) fn haversine_unchecked(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let d_phi = (b.lat - a.lat).to_radians();
    let d_lambda = (b.lng - a.lng).to_radians();
    let h = (d_phi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (d_lambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial great-circle bearing from `a` to `b`, degrees clockwise from north in `[0, 360)`.
pub fn initial_bearing_deg(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let d_lambda = (b.lng - a.lng).to_radians();
    let y = d_lambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * d_lambda.cos();
    y.atan2(x).to_degrees().rem_euclid(360.0)
}

/// Absolute difference between two bearings, in `[0, 180]`.
pub fn bearing_delta_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Equirectangular projection about a fixed origin, valid within half a degree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    origin: GeoPoint,
    cos_lat: f64,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Result<Self> {
        let origin = origin.validate()?;
        Ok(Self {
            origin,
            cos_lat: origin.lat.to_radians().cos(),
        })
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    /// Returns `(x, y)` in meters, x east and y north.
    pub fn project(&self, p: GeoPoint) -> Result<(f64, f64)> {
        let p = p.validate()?;
        let d_lng = p.lng - self.origin.lng;
        let d_lat = p.lat - self.origin.lat;
        if d_lng.abs() >= LOCAL_FRAME_MAX_DEG || d_lat.abs() >= LOCAL_FRAME_MAX_DEG {
            return Err(GeodesyError::ProjectionRange {
                origin: self.origin,
                point: p,
            });
        }
        Ok((d_lng * self.cos_lat * METERS_PER_DEGREE, d_lat * METERS_PER_DEGREE))
    }

    pub fn unproject(&self, x: f64, y: f64) -> GeoPoint {
        GeoPoint::new(
            self.origin.lng + x / (self.cos_lat * METERS_PER_DEGREE),
            self.origin.lat + y / METERS_PER_DEGREE,
        )
    }
}

/// Convenience wrapper around [`LocalFrame::project`].
pub fn local_plane_project(origin: GeoPoint, p: GeoPoint) -> Result<(f64, f64)> {
    LocalFrame::new(origin)?.project(p)
}
