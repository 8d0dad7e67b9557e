use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sae_core::geo::{AreaGeo, Ring, EARTH_RADIUS_KM};
use sae_core::weights::{lattice_rook, morans_i, neighbors_contiguity, neighbors_distance, neighbors_knn, SpatialWeights};

/// Great-circle distance from the chord between unit vectors.
fn chord_km(a: &AreaGeo, b: &AreaGeo) -> f64 {
    let unit = |g: &AreaGeo| {
        let (p, l) = (g.latitude.to_radians(), g.longitude.to_radians());
        [p.cos() * l.cos(), p.cos() * l.sin(), p.sin()]
    };
    let (u, v) = (unit(a), unit(b));
    let c = ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt();
    2.0 * EARTH_RADIUS_KM * (c / 2.0).asin()
}

fn random_points(seed: u64, n: usize) -> Vec<AreaGeo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| AreaGeo::new(format!("{:06}", 150100 + (i * 7919) % 1000), -18.0 + 18.0 * rng.random::<f64>(), -81.0 + 12.0 * rng.random::<f64>()))
        .collect()
}

fn sorted_neighbors(w: &SpatialWeights, i: usize) -> Vec<usize> {
    let mut v = w.neighbors(i).to_vec();
    v.sort_unstable();
    v
}

#[test]
fn distance_rule_matches_brute_force() {
    let geos = random_points(1, 80);
    for km in [50.0, 150.0, 400.0] {
        let w = neighbors_distance(&geos, km).unwrap();
        for i in 0..geos.len() {
            let expect: Vec<usize> = (0..geos.len()).filter(|&j| j != i && chord_km(&geos[i], &geos[j]) <= km).collect();
            assert_eq!(sorted_neighbors(&w, i), expect, "area {i} at {km} km");
        }
        w.check_invariants().unwrap();
    }
}

#[test]
fn knn_rule_matches_brute_force() {
    let geos = random_points(2, 60);
    for k in [1, 4, 7] {
        let w = neighbors_knn(&geos, k).unwrap();
        for i in 0..geos.len() {
            let mut all: Vec<(f64, &str, usize)> = (0..geos.len())
                .filter(|&j| j != i)
                .map(|j| (chord_km(&geos[i], &geos[j]), geos[j].area_id.as_str(), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
            let mut expect: Vec<usize> = all[..k].iter().map(|t| t.2).collect();
            expect.sort_unstable();
            assert_eq!(sorted_neighbors(&w, i), expect);
            assert!((w.row(i).map(|(_, v)| v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Ring {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]
}

/// Grid cells are rook neighbors exactly when some edge midpoint of one cell
/// is an edge midpoint of the other.
#[test]
fn contiguity_on_grid_matches_edge_midpoints() {
    let (nr, nc, s) = (5, 6, 0.25);
    let mut geos = Vec::new();
    let mut rings = Vec::new();
    for r in 0..nr {
        for c in 0..nc {
            let (x, y) = (-75.0 + c as f64 * s, -12.0 + r as f64 * s);
            let ring = rect(x, y, x + s, y + s);
            rings.push(ring.clone());
            geos.push(AreaGeo::new(format!("g{r}{c}"), y + s / 2.0, x + s / 2.0).with_boundary(vec![ring]));
        }
    }
    let mids = |ring: &Ring| -> Vec<(i64, i64)> {
        ring.windows(2)
            .map(|e| (((e[0][0] + e[1][0]) * 1e6).round() as i64, ((e[0][1] + e[1][1]) * 1e6).round() as i64))
            .collect()
    };
    let w = neighbors_contiguity(&geos).unwrap();
    for i in 0..geos.len() {
        let mi = mids(&rings[i]);
        let expect: Vec<usize> = (0..geos.len())
            .filter(|&j| j != i && mids(&rings[j]).iter().any(|m| mi.contains(m)))
            .collect();
        assert_eq!(sorted_neighbors(&w, i), expect);
    }
}

/// Rows of bricks with random widths: neighbors within a row are adjacent
/// bricks; across adjacent rows, bricks whose x-intervals overlap.
#[test]
fn contiguity_on_bricks_matches_interval_overlap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bricks = Vec::new();
    for row in 0..6usize {
        let mut x = 0.0;
        while x < 3.0 {
            let wdt = (0.2 + 0.5 * rng.random::<f64>()).min(3.0 - x);
            let wdt = if 3.0 - x - wdt < 0.05 { 3.0 - x } else { wdt };
            bricks.push((row, x, x + wdt));
            x += wdt;
        }
    }
    let geos: Vec<AreaGeo> = bricks
        .iter()
        .enumerate()
        .map(|(k, &(row, a, b))| {
            let y = row as f64 * 0.3;
            AreaGeo::new(format!("b{k:03}"), y + 0.15, (a + b) / 2.0).with_boundary(vec![rect(a, y, b, y + 0.3)])
        })
        .collect();
    let w = neighbors_contiguity(&geos).unwrap();
    for i in 0..bricks.len() {
        let (ri, ai, bi) = bricks[i];
        let expect: Vec<usize> = (0..bricks.len())
            .filter(|&j| {
                let (rj, aj, bj) = bricks[j];
                j != i
                    && ((ri == rj && ((bi - aj).abs() < 1e-12 || (bj - ai).abs() < 1e-12))
                        || (ri.abs_diff(rj) == 1 && bi.min(bj) - ai.max(aj) > 1e-9))
            })
            .collect();
        assert_eq!(sorted_neighbors(&w, i), expect, "brick {i}");
    }
}

fn moran_oracle(x: &[f64], w: &SpatialWeights) -> f64 {
    let n = x.len();
    let dense = w.to_dense();
    let mean = x.iter().sum::<f64>() / n as f64;
    let (mut num, mut den, mut s0) = (0.0, 0.0, 0.0);
    for i in 0..n {
        den += (x[i] - mean).powi(2);
        for j in 0..n {
            num += dense[(i, j)] * (x[i] - mean) * (x[j] - mean);
            s0 += dense[(i, j)];
        }
    }
    n as f64 / s0 * num / den
}

#[test]
fn moran_checkerboard_and_oracle() {
    let w = lattice_rook(6, 8);
    let board: Vec<f64> = (0..48).map(|k| ((k / 8 + k % 8) % 2) as f64).collect();
    assert!((morans_i(&board, &w).unwrap() + 1.0).abs() < 1e-12);

    let geos = random_points(3, 40);
    let knn = neighbors_knn(&geos, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
    let i = morans_i(&x, &knn).unwrap();
    assert!((i - moran_oracle(&x, &knn)).abs() < 1e-12);
    let affine: Vec<f64> = x.iter().map(|v| 3.5 * v - 2.0).collect();
    assert!((morans_i(&affine, &knn).unwrap() - i).abs() < 1e-12);
}

proptest! {
    #[test]
    fn weights_are_row_stochastic(seed in 0u64..1000, n in 3usize..40, k in 1usize..6) {
        let geos = random_points(seed, n);
        let k = k.min(n - 1);
        for w in [neighbors_knn(&geos, k).unwrap(), neighbors_distance(&geos, 300.0).unwrap()] {
            let dense = w.to_dense();
            for i in 0..n {
                prop_assert_eq!(dense[(i, i)], 0.0);
                let sum: f64 = dense.row(i).iter().sum();
                if w.is_island(i) {
                    prop_assert_eq!(sum, 0.0);
                } else {
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                    prop_assert!(dense.row(i).iter().all(|&v| v == 0.0 || (v - 1.0 / w.k(i) as f64).abs() < 1e-15));
                }
            }
        }
        let w = neighbors_distance(&geos, 300.0).unwrap();
        prop_assert!(w.is_symmetric());
    }

    #[test]
    fn moran_is_affine_invariant(seed in 0u64..1000, a in -5.0f64..5.0, b in 0.1f64..10.0) {
        let w = lattice_rook(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|v| a + b * v).collect();
        prop_assert!((morans_i(&x, &w).unwrap() - morans_i(&y, &w).unwrap()).abs() < 1e-10);
    }
}
