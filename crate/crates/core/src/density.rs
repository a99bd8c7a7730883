//! Mixture densities on latitude/longitude grids, highest-density regions,
//! and their contours as GeoJSON.

use contour::ContourBuilder;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::mixture::VmfMixture;
use crate::sphere::{cart_to_geo, geo_to_cart, GeoPoint};

/// Decile mass levels 0.1, 0.2, …, 0.9.
pub const DECILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    pub const WHOLE: BBox = BBox {
        lat_min: -90.0,
        lat_max: 90.0,
        lon_min: -180.0,
        lon_max: 180.0,
    };

    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let b = BBox {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        };
        let ok = (-90.0..=90.0).contains(&lat_min)
            && (-90.0..=90.0).contains(&lat_max)
            && (-180.0..=180.0).contains(&lon_min)
            && (-180.0..=180.0).contains(&lon_max)
            && lat_min < lat_max
            && lon_min < lon_max;
        if !ok {
            return Err(Error::InvalidParameter(format!("invalid bounding box {b:?}")));
        }
        Ok(b)
    }
}

/// Densities (per steradian) and masses at cell centres of a regular grid.
/// Rows run south to north, columns west to east; the last row or column is
/// truncated at the box edge when the resolution does not divide it.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub res_deg: f64,
    pub bbox: BBox,
    pub n_lat: usize,
    pub n_lon: usize,
    pub density: Vec<f64>,
    pub mass: Vec<f64>,
}

impl DensityGrid {
    fn edges(start: f64, end: f64, res: f64, n: usize, i: usize) -> (f64, f64) {
        let lo = start + i as f64 * res;
        let hi = if i + 1 == n { end } else { lo + res };
        (lo, hi)
    }

    pub fn lat_edges(&self, i: usize) -> (f64, f64) {
        Self::edges(self.bbox.lat_min, self.bbox.lat_max, self.res_deg, self.n_lat, i)
    }

    pub fn lon_edges(&self, j: usize) -> (f64, f64) {
        Self::edges(self.bbox.lon_min, self.bbox.lon_max, self.res_deg, self.n_lon, j)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let (a, b) = self.lat_edges(i);
        let (c, d) = self.lon_edges(j);
        (0.5 * (a + b), 0.5 * (c + d))
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Cell holding `p`, if inside the box.
    pub fn cell_of(&self, p: GeoPoint) -> Option<(usize, usize)> {
        let b = self.bbox;
        if p.lat() < b.lat_min || p.lat() > b.lat_max || p.lon() < b.lon_min || p.lon() > b.lon_max {
            return None;
        }
        let i = (((p.lat() - b.lat_min) / self.res_deg) as usize).min(self.n_lat - 1);
        let j = (((p.lon() - b.lon_min) / self.res_deg) as usize).min(self.n_lon - 1);
        Some((i, j))
    }
}

fn cell_count(extent: f64, res: f64) -> usize {
    ((extent / res) - 1e-9).ceil().max(1.0) as usize
}

pub fn density_grid(m: &VmfMixture, res_deg: f64, bbox: BBox) -> Result<DensityGrid> {
    if !(res_deg > 0.0 && res_deg <= 5.0) {
        return Err(Error::InvalidParameter(format!(
            "grid resolution must lie in (0, 5] degrees, got {res_deg}"
        )));
    }
    let bbox = BBox::new(bbox.lat_min, bbox.lat_max, bbox.lon_min, bbox.lon_max)?;
    let n_lat = cell_count(bbox.lat_max - bbox.lat_min, res_deg);
    let n_lon = cell_count(bbox.lon_max - bbox.lon_min, res_deg);
    let mut g = DensityGrid {
        res_deg,
        bbox,
        n_lat,
        n_lon,
        density: Vec::with_capacity(n_lat * n_lon),
        mass: Vec::with_capacity(n_lat * n_lon),
    };
    let deg2 = (std::f64::consts::PI / 180.0).powi(2);
    for i in 0..n_lat {
        let (lat0, lat1) = g.lat_edges(i);
        let lat = 0.5 * (lat0 + lat1);
        for j in 0..n_lon {
            let (lon0, lon1) = g.lon_edges(j);
            let p = GeoPoint::new(lat, 0.5 * (lon0 + lon1))?;
            let d = m.log_density(geo_to_cart(p)).exp();
            let solid = (lat1 - lat0) * (lon1 - lon0) * deg2 * lat.to_radians().cos();
            g.density.push(d);
            g.mass.push(d * solid);
        }
    }
    Ok(g)
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.iter().any(|q| !(*q > 0.0 && *q < 1.0)) || levels.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter(format!(
            "levels must lie in (0, 1) and ascend, got {levels:?}"
        )));
    }
    Ok(())
}

/// Density thresholds whose super-level sets hold each mass fraction in
/// `levels`: the density of the cell at which cumulative mass, taken in
/// decreasing-density order, first reaches the level.
pub fn hpd_thresholds(g: &DensityGrid, levels: &[f64]) -> Result<Vec<f64>> {
    check_levels(levels)?;
    let Some(&top) = levels.last() else {
        return Ok(Vec::new());
    };
    let total = g.total_mass();
    if total < top {
        return Err(Error::InsufficientMass { mass: total, level: top });
    }
    let mut order: Vec<usize> = (0..g.density.len()).collect();
    order.sort_by(|a, b| g.density[*b].total_cmp(&g.density[*a]));
    let mut out = Vec::with_capacity(levels.len());
    let mut acc = 0.0;
    let mut q = levels.iter().peekable();
    for &c in &order {
        acc += g.mass[c];
        while let Some(&&level) = q.peek() {
            if acc >= level {
                out.push(g.density[c]);
                q.next();
            } else {
                break;
            }
        }
        if q.peek().is_none() {
            break;
        }
    }
    // roundoff can leave the last level a hair above the accumulated total
    while out.len() < levels.len() {
        out.push(g.density[*order.last().expect("non-empty grid")]);
    }
    Ok(out)
}

/// Cells with density at or above `threshold`.
pub fn hpd_mask(g: &DensityGrid, threshold: f64) -> Vec<bool> {
    g.density.iter().map(|d| *d >= threshold).collect()
}

/// Number of 4-connected patches in `mask`; columns wrap when the grid
/// spans all longitudes.
pub fn region_patches(g: &DensityGrid, mask: &[bool]) -> usize {
    let wraps = g.bbox.lon_min <= -180.0 && g.bbox.lon_max >= 180.0;
    let mut seen = vec![false; mask.len()];
    let mut patches = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        patches += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(c) = stack.pop() {
            let (i, j) = (c / g.n_lon, c % g.n_lon);
            let mut nbrs = Vec::with_capacity(4);
            if i > 0 {
                nbrs.push(c - g.n_lon);
            }
            if i + 1 < g.n_lat {
                nbrs.push(c + g.n_lon);
            }
            if j > 0 {
                nbrs.push(c - 1);
            } else if wraps {
                nbrs.push(c + g.n_lon - 1);
            }
            if j + 1 < g.n_lon {
                nbrs.push(c + 1);
            } else if wraps {
                nbrs.push(c + 1 - g.n_lon);
            }
            for n in nbrs {
                if mask[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
    }
    patches
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveConfig {
    pub coarse_res: f64,
    pub fine_res: f64,
    /// Mass fraction whose coarse region is refined.
    pub refine_mass: f64,
    /// Upper bound on refined cells; the fine resolution coarsens to fit.
    pub max_cells: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            coarse_res: 1.0,
            fine_res: 0.05,
            refine_mass: 0.99,
            max_cells: 2_000_000,
        }
    }
}

/// Whole-sphere coarse pass, then a finer grid over the box holding the
/// top `refine_mass` of coarse cells, padded by two coarse cells.
pub fn adaptive_grid(m: &VmfMixture, cfg: &AdaptiveConfig) -> Result<DensityGrid> {
    let coarse = density_grid(m, cfg.coarse_res, BBox::WHOLE)?;
    let total = coarse.total_mass();
    let mut order: Vec<usize> = (0..coarse.density.len()).collect();
    order.sort_by(|a, b| coarse.density[*b].total_cmp(&coarse.density[*a]));
    let (mut lat0, mut lat1, mut lon0, mut lon1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    let mut acc = 0.0;
    for c in order {
        let (i, j) = (c / coarse.n_lon, c % coarse.n_lon);
        let (a, b) = coarse.lat_edges(i);
        let (e, f) = coarse.lon_edges(j);
        lat0 = lat0.min(a);
        lat1 = lat1.max(b);
        lon0 = lon0.min(e);
        lon1 = lon1.max(f);
        acc += coarse.mass[c];
        if acc >= cfg.refine_mass * total {
            break;
        }
    }
    let pad = 2.0 * cfg.coarse_res;
    let bbox = BBox::new(
        (lat0 - pad).max(-90.0),
        (lat1 + pad).min(90.0),
        (lon0 - pad).max(-180.0),
        (lon1 + pad).min(180.0),
    )?;
    let area = (bbox.lat_max - bbox.lat_min) * (bbox.lon_max - bbox.lon_min);
    let res = cfg.fine_res.max((area / cfg.max_cells as f64).sqrt()).min(cfg.coarse_res);
    log::debug!("refining {bbox:?} at {res} degrees");
    density_grid(m, res, bbox)
}

fn ring_coords(ring: &[[f64; 2]]) -> Vec<Value> {
    ring.iter().map(|c| json!([c[0], c[1]])).collect()
}

fn signed_area(ring: &[[f64; 2]]) -> f64 {
    ring.windows(2).map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1]).sum::<f64>() / 2.0
}

/// Orients a closed ring counter-clockwise (`ccw`) or clockwise.
fn oriented(mut ring: Vec<[f64; 2]>, ccw: bool) -> Vec<[f64; 2]> {
    if (signed_area(&ring) > 0.0) != ccw {
        ring.reverse();
    }
    ring
}

/// Point features accompanying the density layer.
#[derive(Debug, Clone, Default)]
pub struct Markers<'a> {
    /// Component means are emitted in the "predicted" role.
    pub mixture: Option<&'a VmfMixture>,
    /// Gold location, emitted in the "actual" role.
    pub gold: Option<GeoPoint>,
}

/// FeatureCollection with one MultiPolygon per `(level, threshold)` pair
/// (exterior rings counter-clockwise, coordinates `[lon, lat]`), followed by
/// point features for the markers.
pub fn contours_geojson(g: &DensityGrid, levels: &[f64], thresholds: &[f64], markers: &Markers) -> Result<Value> {
    if levels.len() != thresholds.len() {
        return Err(Error::LengthMismatch {
            expected: levels.len(),
            actual: thresholds.len(),
        });
    }
    let mut features = Vec::new();
    if !thresholds.is_empty() {
        let builder = ContourBuilder::new(g.n_lon, g.n_lat, true)
            .x_origin(g.bbox.lon_min)
            .y_origin(g.bbox.lat_min)
            .x_step(g.res_deg)
            .y_step(g.res_deg);
        let contours = builder
            .contours(&g.density, thresholds)
            .map_err(|e| Error::InvalidParameter(format!("contouring failed: {e:?}")))?;
        let clamp = |x: f64, y: f64| [x.clamp(g.bbox.lon_min, g.bbox.lon_max), y.clamp(g.bbox.lat_min, g.bbox.lat_max)];
        for ((contour, level), threshold) in contours.iter().zip(levels).zip(thresholds) {
            let polygons: Vec<Value> = contour
                .geometry()
                .0
                .iter()
                .map(|poly| {
                    let ext: Vec<[f64; 2]> = poly.exterior().coords().map(|c| clamp(c.x, c.y)).collect();
                    let mut rings = vec![ring_coords(&oriented(ext, true))];
                    for hole in poly.interiors() {
                        let h: Vec<[f64; 2]> = hole.coords().map(|c| clamp(c.x, c.y)).collect();
                        rings.push(ring_coords(&oriented(h, false)));
                    }
                    Value::from(rings)
                })
                .collect();
            features.push(json!({
                "type": "Feature",
                "geometry": {"type": "MultiPolygon", "coordinates": polygons},
                "properties": {"level": level, "threshold": threshold},
            }));
        }
    }
    if let Some(m) = markers.mixture {
        for (k, (c, rho)) in m.components().iter().zip(m.rho()).enumerate() {
            let p = cart_to_geo(c.mu)?;
            features.push(json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [p.lon(), p.lat()]},
                "properties": {"role": "predicted", "marker": "diamond", "component": k, "kappa": c.kappa, "rho": rho},
            }));
        }
    }
    if let Some(p) = markers.gold {
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [p.lon(), p.lat()]},
            "properties": {"role": "actual", "marker": "star"},
        }));
    }
    Ok(json!({"type": "FeatureCollection", "features": features}))
}
