//! Geodetic coordinates, unit vectors on S², and great-circle distances.
//!
//! Degrees are the external unit and radians the internal one. The Earth is
//! modelled as a sphere of radius [`EARTH_RADIUS_KM`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IUGG mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// A latitude/longitude pair in degrees.
///
/// Latitude is in `[-90, 90]`; longitude is normalized into `[-180, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat_deg: f64,
    lon_deg: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = Error;

    fn try_from(raw: RawPoint) -> Result<Self> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint {
            lat: p.lat_deg,
            lon: p.lon_deg,
        }
    }
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !lat_deg.is_finite() || !lon_deg.is_finite() {
            return Err(Error::InvalidCoordinate(format!(
                "non-finite coordinate ({lat_deg}, {lon_deg})"
            )));
        }
        if !(-90.0..=90.0).contains(&lat_deg) {
            return Err(Error::InvalidCoordinate(format!(
                "latitude {lat_deg} outside [-90, 90]"
            )));
        }
        Ok(GeoPoint {
            lat_deg,
            lon_deg: normalize_lon(lon_deg),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon(&self) -> f64 {
        self.lon_deg
    }
}

impl std::fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:.6}, {:.6})", self.lat_deg, self.lon_deg)
    }
}

/// Wraps a longitude into `[-180, 180)`.
pub fn normalize_lon(lon_deg: f64) -> f64 {
    let wrapped = (lon_deg + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if wrapped >= 180.0 {
        wrapped - 360.0
    } else {
        wrapped
    }
}

/// A point on the unit sphere in ℝ³.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec3 {
    x: f64,
    y: f64,
    z: f64,
}

impl UnitVec3 {
    pub const NORTH_POLE: UnitVec3 = UnitVec3 {
        x: 0.0,
        y: 0.0,
        z: 1.0,
    };

    /// Normalizes `(x, y, z)` onto the sphere. Rejects zero and non-finite input.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let norm = (x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::InvalidCoordinate(format!(
                "cannot normalize vector ({x}, {y}, {z})"
            )));
        }
        Ok(UnitVec3 {
            x: x / norm,
            y: y / norm,
            z: z / norm,
        })
    }

    pub fn from_array(v: [f64; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }

    /// Caller guarantees unit norm.
    pub(crate) fn from_unit_unchecked(v: [f64; 3]) -> Self {
        UnitVec3 {
            x: v[0],
            y: v[1],
            z: v[2],
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &UnitVec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn neg(&self) -> UnitVec3 {
        UnitVec3 {
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Two unit vectors completing `self` to a right-handed orthonormal frame.
    pub fn tangent_frame(&self) -> ([f64; 3], [f64; 3]) {
        let mu = self.to_array();
        // cross with the axis least aligned with mu
        let axis = if mu[0].abs() <= mu[1].abs() && mu[0].abs() <= mu[2].abs() {
            [1.0, 0.0, 0.0]
        } else if mu[1].abs() <= mu[2].abs() {
            [0.0, 1.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        let e1 = normalized(cross(mu, axis));
        let e2 = cross(mu, e1);
        (e1, e2)
    }
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn normalized(a: [f64; 3]) -> [f64; 3] {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn geo_to_cart(p: GeoPoint) -> UnitVec3 {
    let lat = p.lat_deg.to_radians();
    let lon = p.lon_deg.to_radians();
    let (sin_lat, cos_lat) = lat.sin_cos();
    let (sin_lon, cos_lon) = lon.sin_cos();
    UnitVec3 {
        x: cos_lat * cos_lon,
        y: cos_lat * sin_lon,
        z: sin_lat,
    }
}

/// Inverse of [`geo_to_cart`]. Longitude at the poles is reported as 0.
pub fn cart_to_geo(v: UnitVec3) -> Result<GeoPoint> {
    // renormalize so slightly-off inputs still land on the sphere
    let v = UnitVec3::new(v.x, v.y, v.z)?;
    let horizontal = v.x.hypot(v.y);
    let lat = v.z.atan2(horizontal).to_degrees();
    let lon = if horizontal == 0.0 {
        0.0
    } else {
        v.y.atan2(v.x).to_degrees()
    };
    GeoPoint::new(lat.clamp(-90.0, 90.0), lon)
}

/// Great-circle distance on the spherical Earth, in kilometres.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat_deg.to_radians();
    let lat2 = b.lat_deg.to_radians();
    let half_dlat = (lat2 - lat1) * 0.5;
    let half_dlon = (b.lon_deg - a.lon_deg).to_radians() * 0.5;
    let h = half_dlat.sin().powi(2) + lat1.cos() * lat2.cos() * half_dlon.sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Angle between two unit vectors, in radians.
///
/// Evaluated as `atan2(|u × v|, u · v)`, which equals `acos(u · v)` but keeps
/// full precision for nearly parallel and nearly antipodal pairs.
pub fn angular_distance(u: UnitVec3, v: UnitVec3) -> f64 {
    let c = cross(u.to_array(), v.to_array());
    norm3(c).atan2(u.dot(&v).clamp(-1.0, 1.0))
}
