use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn validate(self) -> Result<Self> {
        if !self.lat.is_finite()
            || !self.lon.is_finite()
            || self.lat.abs() > 90.0
            || self.lon.abs() > 180.0
        {
            return Err(Error::InvalidCoordinate {
                lat: self.lat,
                lon: self.lon,
            });
        }
        Ok(self)
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: LatLon, b: LatLon) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin())
}

/// A ring is a closed or open sequence of `[lon, lat]` positions.
pub type Ring = Vec<[f64; 2]>;

/// One or more polygons; each polygon is an outer ring followed by holes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub polygons: Vec<Vec<Ring>>,
}

fn ring_moments(ring: &[[f64; 2]]) -> (f64, f64, f64) {
    // shoelace: signed area and first moments
    let n = ring.len();
    let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for k in 0..n {
        let [x0, y0] = ring[k];
        let [x1, y1] = ring[(k + 1) % n];
        let cross = x0 * y1 - x1 * y0;
        a += cross;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    (a / 2.0, cx / 6.0, cy / 6.0)
}

impl Boundary {
    /// Area-weighted planar centroid in lon/lat degrees. Holes subtract.
    pub fn centroid(&self) -> Option<LatLon> {
        let (mut area, mut mx, mut my) = (0.0, 0.0, 0.0);
        for poly in &self.polygons {
            for (r, ring) in poly.iter().enumerate() {
                let (a, cx, cy) = ring_moments(ring);
                // outer rings count positive, holes negative, whatever the winding
                let sign = if (r == 0) == (a >= 0.0) { 1.0 } else { -1.0 };
                area += sign * a;
                mx += sign * cx;
                my += sign * cy;
            }
        }
        if area.abs() < 1e-18 {
            return None;
        }
        Some(LatLon {
            lon: mx / area,
            lat: my / area,
        })
    }
}
