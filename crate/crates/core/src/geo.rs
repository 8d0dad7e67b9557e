//! Area geometry: centroids, altitude and optional boundary polygons, plus
//! readers for GeoJSON and centroid CSV inputs.

use std::collections::HashSet;
use std::io::Read;

use geojson::{GeoJson, Value};
use serde::Deserialize;

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Closed ring of `[lon, lat]` vertices (GeoJSON axis order).
pub type Ring = Vec<[f64; 2]>;

#[derive(Debug, Clone, PartialEq)]
pub struct AreaGeo {
    pub area_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub altitude_km: f64,
    /// Rings of every polygon part; holes are kept as separate rings.
    pub boundary: Option<Vec<Ring>>,
}

impl AreaGeo {
    pub fn new(area_id: impl Into<String>, latitude: f64, longitude: f64) -> Self {
        Self {
            area_id: area_id.into(),
            latitude,
            longitude,
            altitude_km: 0.0,
            boundary: None,
        }
    }

    pub fn with_boundary(mut self, rings: Vec<Ring>) -> Self {
        self.boundary = Some(rings);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude) || !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::Invalid(format!(
                "coordinates ({}, {}) out of range for area {}",
                self.latitude, self.longitude, self.area_id
            )));
        }
        if !(self.altitude_km >= 0.0) {
            return Err(Error::Invalid(format!("negative altitude for area {}", self.area_id)));
        }
        Ok(())
    }
}

/// Great-circle distance in km (haversine).
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

pub fn distance_km(a: &AreaGeo, b: &AreaGeo) -> f64 {
    haversine_km(a.latitude, a.longitude, b.latitude, b.longitude)
}

/// Area-weighted centroid over the rings (shoelace), falling back to the
/// vertex mean for degenerate rings.
pub fn rings_centroid(rings: &[Ring]) -> Option<(f64, f64)> {
    let (mut a_sum, mut cx, mut cy) = (0.0, 0.0, 0.0);
    let (mut vx, mut vy, mut vn) = (0.0, 0.0, 0usize);
    for ring in rings {
        for w in ring.windows(2) {
            let ([x0, y0], [x1, y1]) = (w[0], w[1]);
            let cross = x0 * y1 - x1 * y0;
            a_sum += cross;
            cx += (x0 + x1) * cross;
            cy += (y0 + y1) * cross;
        }
        for p in ring {
            vx += p[0];
            vy += p[1];
            vn += 1;
        }
    }
    if vn == 0 {
        return None;
    }
    if a_sum.abs() > 1e-15 {
        Some((cy / (3.0 * a_sum), cx / (3.0 * a_sum)))
    } else {
        Some((vy / vn as f64, vx / vn as f64))
    }
}

fn property_string(props: &serde_json::Map<String, serde_json::Value>, key: &str) -> Option<String> {
    match props.get(key)? {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn property_f64(props: &serde_json::Map<String, serde_json::Value>, key: &str) -> Option<f64> {
    match props.get(key)? {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.parse().ok(),
        _ => None,
    }
}

fn polygon_rings(value: &Value) -> Option<Vec<Ring>> {
    let to_ring = |r: &Vec<Vec<f64>>| -> Ring { r.iter().map(|p| [p[0], p[1]]).collect() };
    match value {
        Value::Polygon(rings) => Some(rings.iter().map(to_ring).collect()),
        Value::MultiPolygon(polys) => Some(polys.iter().flat_map(|p| p.iter().map(to_ring)).collect()),
        _ => None,
    }
}

/// Reads a FeatureCollection whose features carry an `area_id` property.
/// Optional `lat`, `lon` and `altitude_km` properties override the polygon
/// centroid.
pub fn read_geojson<R: Read>(mut reader: R) -> Result<Vec<AreaGeo>> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let gj: GeoJson = text.parse()?;
    let GeoJson::FeatureCollection(fc) = gj else {
        return Err(Error::Invalid("expected a GeoJSON FeatureCollection".into()));
    };
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(fc.features.len());
    for feature in fc.features {
        let props = feature.properties.unwrap_or_default();
        let id = property_string(&props, "area_id")
            .ok_or_else(|| Error::Invalid("feature without area_id property".into()))?;
        if !seen.insert(id.clone()) {
            return Err(Error::Invalid(format!("duplicate area_id {id}")));
        }
        let rings = feature.geometry.as_ref().and_then(|g| polygon_rings(&g.value));
        let centroid = rings.as_deref().and_then(rings_centroid);
        let lat = property_f64(&props, "lat").or(centroid.map(|c| c.0));
        let lon = property_f64(&props, "lon").or(centroid.map(|c| c.1));
        let (Some(latitude), Some(longitude)) = (lat, lon) else {
            return Err(Error::Invalid(format!("no location for area {id}")));
        };
        let geo = AreaGeo {
            area_id: id,
            latitude,
            longitude,
            altitude_km: property_f64(&props, "altitude_km").unwrap_or(0.0),
            boundary: rings,
        };
        geo.validate()?;
        out.push(geo);
    }
    Ok(out)
}

/// Reads the centroid fallback format `area_id,lat,lon,altitude_km`.
pub fn read_centroids_csv<R: Read>(reader: R) -> Result<Vec<AreaGeo>> {
    #[derive(Deserialize)]
    struct Rec {
        area_id: String,
        lat: f64,
        lon: f64,
        #[serde(default)]
        altitude_km: Option<f64>,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let rec: Rec = rec?;
        let geo = AreaGeo {
            area_id: rec.area_id,
            latitude: rec.lat,
            longitude: rec.lon,
            altitude_km: rec.altitude_km.unwrap_or(0.0),
            boundary: None,
        };
        geo.validate()?;
        out.push(geo);
    }
    Ok(out)
}
