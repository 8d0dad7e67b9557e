//! Row-standardized spatial proximity matrices and Moran's I.
//!
//! Every rule produces binary neighbor sets `S_i`; the weights are then
//! `w_ij = 1/K_i` for `j` in `S_i` and zero elsewhere, with `K_i = |S_i|`.
//! Areas with no neighbors keep an all-zero row and are reported as islands.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{distance_km, AreaGeo, Ring};

/// Snapping tolerance (degrees) for shared-edge detection.
pub const CONTIGUITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NeighborRule {
    Distance { km: f64 },
    Knn { k: usize },
    Contiguity,
}

impl NeighborRule {
    pub fn build(&self, geos: &[AreaGeo]) -> Result<SpatialWeights> {
        match *self {
            NeighborRule::Distance { km } => neighbors_distance(geos, km),
            NeighborRule::Knn { k } => neighbors_knn(geos, k),
            NeighborRule::Contiguity => neighbors_contiguity(geos),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            NeighborRule::Distance { km } => format!("distance<={km}km"),
            NeighborRule::Knn { k } => format!("knn(k={k})"),
            NeighborRule::Contiguity => "contiguity(rook)".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    ids: Vec<String>,
    neighbors: Vec<Vec<usize>>,
}

impl SpatialWeights {
    /// Builds weights from neighbor index sets. Sets are sorted and
    /// deduplicated; self-loops and out-of-range indices are rejected.
    pub fn from_neighbor_sets(ids: Vec<String>, mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        if ids.len() != neighbors.len() {
            return Err(Error::Dimension(format!("{} ids but {} neighbor sets", ids.len(), neighbors.len())));
        }
        let d = ids.len();
        for (i, set) in neighbors.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.iter().any(|&j| j == i || j >= d) {
                return Err(Error::Invalid(format!("bad neighbor index in row {i}")));
            }
        }
        Ok(Self { ids, neighbors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn k(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let set = &self.neighbors[i];
        if set.binary_search(&j).is_ok() {
            1.0 / set.len() as f64
        } else {
            0.0
        }
    }

    /// Nonzero entries `(j, w_ij)` of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let set = &self.neighbors[i];
        let w = if set.is_empty() { 0.0 } else { 1.0 / set.len() as f64 };
        set.iter().map(move |&j| (j, w))
    }

    pub fn islands(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.neighbors[i].is_empty()).collect()
    }

    pub fn is_island(&self, i: usize) -> bool {
        self.neighbors[i].is_empty()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.len()).all(|i| self.neighbors[i].iter().all(|&j| self.neighbors[j].binary_search(&i).is_ok()))
    }

    pub fn nnz(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Sum of all weights (number of non-island rows).
    pub fn total_weight(&self) -> f64 {
        self.neighbors.iter().filter(|s| !s.is_empty()).count() as f64
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.len();
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            for (j, w) in self.row(i) {
                m[(i, j)] = w;
            }
        }
        m
    }

    /// Restriction to `keep` (in the given order): neighbor relations among
    /// kept areas survive and rows are renormalized.
    pub fn subset(&self, keep: &[String]) -> Result<Self> {
        let pos: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let old: Vec<usize> = keep
            .iter()
            .map(|id| pos.get(id.as_str()).copied().ok_or_else(|| Error::UnknownArea(id.clone())))
            .collect::<Result<_>>()?;
        let mut new_of_old = vec![usize::MAX; self.len()];
        for (n, &o) in old.iter().enumerate() {
            new_of_old[o] = n;
        }
        let neighbors = old
            .iter()
            .map(|&o| {
                self.neighbors[o]
                    .iter()
                    .filter_map(|&j| (new_of_old[j] != usize::MAX).then_some(new_of_old[j]))
                    .collect()
            })
            .collect();
        Self::from_neighbor_sets(keep.to_vec(), neighbors)
    }

    /// Checks the row-stochastic invariants against the dense form.
    pub fn check_invariants(&self) -> Result<()> {
        let m = self.to_dense();
        for i in 0..self.len() {
            if m[(i, i)] != 0.0 {
                return Err(Error::Invalid(format!("nonzero diagonal at {i}")));
            }
            let s: f64 = m.row(i).sum();
            let expected = if self.is_island(i) { 0.0 } else { 1.0 };
            if (s - expected).abs() > 1e-12 {
                return Err(Error::Invalid(format!("row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Writes `i_id,j_id,w` triplets. Islands get a single row with an empty
    /// `j_id` and `w = 0` so that they survive a round trip.
    pub fn write_triplets<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["i_id", "j_id", "w"])?;
        for i in 0..self.len() {
            if self.is_island(i) {
                wtr.write_record([self.ids[i].as_str(), "", "0"])?;
            }
            for (j, w) in self.row(i) {
                wtr.write_record([self.ids[i].clone(), self.ids[j].clone(), w.to_string()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads triplets written by [`SpatialWeights::write_triplets`]. Area order
    /// is the order of first appearance in the `i_id` column. Weights must be
    /// `1/K_i` within each row.
    pub fn read_triplets<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Rec {
            i_id: String,
            j_id: String,
            w: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut order: Vec<String> = Vec::new();
        let mut rows: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for rec in rdr.deserialize() {
            let rec: Rec = rec?;
            if !rows.contains_key(&rec.i_id) {
                order.push(rec.i_id.clone());
            }
            let entry = rows.entry(rec.i_id).or_default();
            if !rec.j_id.is_empty() {
                entry.push((rec.j_id, rec.w));
            }
        }
        let pos: HashMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut neighbors = Vec::with_capacity(order.len());
        for id in &order {
            let row = &rows[id];
            let k = row.len() as f64;
            let mut set = Vec::with_capacity(row.len());
            for (j, w) in row {
                let jj = *pos.get(j.as_str()).ok_or_else(|| Error::UnknownArea(j.clone()))?;
                if (w - 1.0 / k).abs() > 1e-9 {
                    return Err(Error::Invalid(format!("weight {w} in row {id} is not 1/K_i")));
                }
                set.push(jj);
            }
            neighbors.push(set);
        }
        Self::from_neighbor_sets(order, neighbors)
    }
}

fn ids_of(geos: &[AreaGeo]) -> Vec<String> {
    geos.iter().map(|g| g.area_id.clone()).collect()
}

/// `S_i = { j != i : d(i, j) <= L }` with great-circle distance in km.
pub fn neighbors_distance(geos: &[AreaGeo], max_km: f64) -> Result<SpatialWeights> {
    if !(max_km > 0.0) {
        return Err(Error::Invalid(format!("distance threshold must be positive, got {max_km}")));
    }
    if geos.len() < 2 {
        return Err(Error::Invalid("need at least two areas".into()));
    }
    let d = geos.len();
    let mut neighbors = vec![Vec::new(); d];
    for i in 0..d {
        for j in (i + 1)..d {
            if distance_km(&geos[i], &geos[j]) <= max_km {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    SpatialWeights::from_neighbor_sets(ids_of(geos), neighbors)
}

/// The `k` nearest distinct areas; ties go to the lexicographically smaller
/// `area_id`.
pub fn neighbors_knn(geos: &[AreaGeo], k: usize) -> Result<SpatialWeights> {
    let d = geos.len();
    if k == 0 || k + 1 > d {
        return Err(Error::KTooLarge { k, areas: d });
    }
    let neighbors = (0..d)
        .map(|i| {
            let mut cand: Vec<(f64, &str, usize)> = (0..d)
                .filter(|&j| j != i)
                .map(|j| (distance_km(&geos[i], &geos[j]), geos[j].area_id.as_str(), j))
                .collect();
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
            cand[..k].iter().map(|c| c.2).collect()
        })
        .collect();
    SpatialWeights::from_neighbor_sets(ids_of(geos), neighbors)
}

#[derive(Clone, Copy)]
struct Segment {
    a: [f64; 2],
    b: [f64; 2],
}

fn segments(rings: &[Ring]) -> Vec<Segment> {
    rings
        .iter()
        .flat_map(|r| r.windows(2).map(|w| Segment { a: w[0], b: w[1] }))
        .filter(|s| s.a != s.b)
        .collect()
}

fn bbox(segs: &[Segment]) -> [f64; 4] {
    segs.iter().fold([f64::MAX, f64::MAX, f64::MIN, f64::MIN], |bb, s| {
        [
            bb[0].min(s.a[0]).min(s.b[0]),
            bb[1].min(s.a[1]).min(s.b[1]),
            bb[2].max(s.a[0]).max(s.b[0]),
            bb[3].max(s.a[1]).max(s.b[1]),
        ]
    })
}

/// Collinear within `tol` and overlapping over a length greater than `tol`.
fn segments_share_edge(p: Segment, q: Segment, tol: f64) -> bool {
    let dx = p.b[0] - p.a[0];
    let dy = p.b[1] - p.a[1];
    let len = (dx * dx + dy * dy).sqrt();
    let (ux, uy) = (dx / len, dy / len);
    let offset = |pt: [f64; 2]| (pt[0] - p.a[0]) * uy - (pt[1] - p.a[1]) * ux;
    if offset(q.a).abs() > tol || offset(q.b).abs() > tol {
        return false;
    }
    let along = |pt: [f64; 2]| (pt[0] - p.a[0]) * ux + (pt[1] - p.a[1]) * uy;
    let (t0, t1) = (along(q.a), along(q.b));
    let (lo, hi) = (t0.min(t1).max(0.0), t0.max(t1).min(len));
    hi - lo > tol
}

/// Rook contiguity: areas sharing at least one boundary segment.
pub fn neighbors_contiguity(geos: &[AreaGeo]) -> Result<SpatialWeights> {
    let segs: Vec<Vec<Segment>> = geos
        .iter()
        .map(|g| {
            g.boundary
                .as_deref()
                .map(segments)
                .ok_or_else(|| Error::MissingBoundary(g.area_id.clone()))
        })
        .collect::<Result<_>>()?;
    let boxes: Vec<[f64; 4]> = segs.iter().map(|s| bbox(s)).collect();
    let tol = CONTIGUITY_TOLERANCE;
    let d = geos.len();
    let mut neighbors = vec![Vec::new(); d];
    for i in 0..d {
        for j in (i + 1)..d {
            let (a, b) = (boxes[i], boxes[j]);
            if a[0] > b[2] + tol || b[0] > a[2] + tol || a[1] > b[3] + tol || b[1] > a[3] + tol {
                continue;
            }
            let shared = segs[i].iter().any(|&p| segs[j].iter().any(|&q| segments_share_edge(p, q, tol)));
            if shared {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    SpatialWeights::from_neighbor_sets(ids_of(geos), neighbors)
}

/// Global Moran's I,
/// `I = (D / S0) * sum_ij w_ij z_i z_j / sum_i z_i^2` with `z = x - mean(x)`.
pub fn morans_i(values: &[f64], w: &SpatialWeights) -> Result<f64> {
    if values.len() != w.len() {
        return Err(Error::Dimension(format!("{} values for {} areas", values.len(), w.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite value".into()));
    }
    let d = values.len();
    let s0 = w.total_weight();
    if s0 == 0.0 {
        return Err(Error::Invalid("weights have no neighbor pairs".into()));
    }
    let mean = values.iter().sum::<f64>() / d as f64;
    let z: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let ss: f64 = z.iter().map(|v| v * v).sum();
    let scale: f64 = values.iter().map(|v| v * v).sum();
    if ss <= 1e-28 * scale || ss == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let cross: f64 = (0..d).map(|i| z[i] * w.row(i).map(|(j, wij)| wij * z[j]).sum::<f64>()).sum();
    Ok(d as f64 / s0 * cross / ss)
}

/// Rook-contiguity weights on an `nrow x ncol` lattice, row-major ids `r{row}c{col}`.
pub fn lattice_rook(nrow: usize, ncol: usize) -> SpatialWeights {
    let idx = |r: usize, c: usize| r * ncol + c;
    let mut ids = Vec::with_capacity(nrow * ncol);
    let mut neighbors = Vec::with_capacity(nrow * ncol);
    for r in 0..nrow {
        for c in 0..ncol {
            ids.push(format!("r{r}c{c}"));
            let mut set = Vec::new();
            if r > 0 {
                set.push(idx(r - 1, c));
            }
            if r + 1 < nrow {
                set.push(idx(r + 1, c));
            }
            if c > 0 {
                set.push(idx(r, c - 1));
            }
            if c + 1 < ncol {
                set.push(idx(r, c + 1));
            }
            neighbors.push(set);
        }
    }
    SpatialWeights::from_neighbor_sets(ids, neighbors).expect("lattice neighbor sets are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Points on the equator at the given east-west offsets in km.
    fn equator(offsets_km: &[f64]) -> Vec<AreaGeo> {
        let deg_per_km = 180.0 / (std::f64::consts::PI * crate::geo::EARTH_RADIUS_KM);
        offsets_km
            .iter()
            .enumerate()
            .map(|(i, km)| AreaGeo::new(format!("a{i}"), 0.0, km * deg_per_km))
            .collect()
    }

    fn square(x: f64, y: f64) -> Vec<Ring> {
        vec![vec![[x, y], [x + 1.0, y], [x + 1.0, y + 1.0], [x, y + 1.0], [x, y]]]
    }

    fn grid(n: usize) -> Vec<AreaGeo> {
        let mut out = Vec::new();
        for r in 0..n {
            for c in 0..n {
                out.push(
                    AreaGeo::new(format!("g{r}{c}"), r as f64 + 0.5, c as f64 + 0.5)
                        .with_boundary(square(c as f64, r as f64)),
                );
            }
        }
        out
    }

    #[test]
    fn distance_collinear() {
        let w = neighbors_distance(&equator(&[0.0, 10.0, 30.0]), 15.0).unwrap();
        assert_eq!(w.neighbors(0), &[1]);
        assert_eq!(w.neighbors(1), &[0]);
        assert!(w.neighbors(2).is_empty());
        assert_eq!(w.islands(), vec![2]);
        w.check_invariants().unwrap();
    }

    #[test]
    fn distance_complete_graph_matches_knn() {
        let geos = equator(&[0.0, 3.0, 7.0, 12.0]);
        let wd = neighbors_distance(&geos, 100.0).unwrap();
        let wk = neighbors_knn(&geos, 3).unwrap();
        assert_eq!(wd, wk);
        assert!((wd.weight(0, 3) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn knn_collinear_asymmetric() {
        let w = neighbors_knn(&equator(&[0.0, 10.0, 30.0]), 1).unwrap();
        assert_eq!(w.neighbors(0), &[1]);
        assert_eq!(w.neighbors(1), &[0]);
        assert_eq!(w.neighbors(2), &[1]);
        assert!(!w.is_symmetric());
        assert!(matches!(neighbors_knn(&equator(&[0.0, 1.0]), 2), Err(Error::KTooLarge { .. })));
        assert!(matches!(neighbors_knn(&equator(&[0.0, 1.0]), 0), Err(Error::KTooLarge { .. })));
    }

    #[test]
    fn knn_ties_prefer_smaller_id() {
        let mut geos = equator(&[0.0, 10.0, -10.0]);
        geos[1].area_id = "z".into();
        geos[2].area_id = "b".into();
        let w = neighbors_knn(&geos, 1).unwrap();
        assert_eq!(w.neighbors(0), &[2]);
    }

    #[test]
    fn rook_grids() {
        let w = neighbors_contiguity(&grid(2)).unwrap();
        assert!((0..4).all(|i| w.k(i) == 2));
        let w = neighbors_contiguity(&grid(3)).unwrap();
        assert_eq!(w.k(4), 4);
        assert_eq!(w.k(0), 2);
        assert_eq!(w, lattice_rook(3, 3).with_ids(w.ids().to_vec()));
    }

    #[test]
    fn contiguity_requires_boundaries() {
        let geos = vec![AreaGeo::new("a", 0.0, 0.0), AreaGeo::new("b", 0.0, 1.0)];
        assert!(matches!(neighbors_contiguity(&geos), Err(Error::MissingBoundary(_))));
    }

    #[test]
    fn snapped_edges_are_shared() {
        let a = AreaGeo::new("a", 0.5, 0.5).with_boundary(square(0.0, 0.0));
        let mut ring = square(1.0 + 5e-10, 0.0);
        ring[0][3][0] += 3e-10;
        let b = AreaGeo::new("b", 0.5, 1.5).with_boundary(ring);
        let w = neighbors_contiguity(&[a, b]).unwrap();
        assert_eq!(w.neighbors(0), &[1]);
    }

    #[test]
    fn checkerboard_moran_is_minus_one() {
        let w = lattice_rook(4, 4);
        let x: Vec<f64> = (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let i = morans_i(&x, &w).unwrap();
        assert!((i + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_moran_errors() {
        let w = lattice_rook(3, 3);
        assert!(matches!(morans_i(&[2.5; 9], &w), Err(Error::ZeroVariance)));
    }

    #[test]
    fn subset_renormalizes() {
        let w = lattice_rook(1, 3);
        let s = w.subset(&["r0c0".into(), "r0c1".into()]).unwrap();
        assert_eq!(s.neighbors(1), &[0]);
        assert_eq!(s.weight(1, 0), 1.0);
        assert!(matches!(w.subset(&["nope".into()]), Err(Error::UnknownArea(_))));
    }

    #[test]
    fn triplets_round_trip_with_island() {
        let w = neighbors_distance(&equator(&[0.0, 10.0, 30.0, 12.0]), 15.0).unwrap();
        let mut buf = Vec::new();
        w.write_triplets(&mut buf).unwrap();
        let back = SpatialWeights::read_triplets(buf.as_slice()).unwrap();
        assert_eq!(back, w);
    }

    impl SpatialWeights {
        fn with_ids(mut self, ids: Vec<String>) -> Self {
            self.ids = ids;
            self
        }
    }
}
