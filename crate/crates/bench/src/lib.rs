//! Input builders shared by the benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sae_core::geo::AreaGeo;
use sae_core::sfh::{SfhInput, DEFAULT_RHO_BOUNDS};
use sae_core::simulate::{heteroscedastic, uniform_design, SarSampler};
use sae_core::weights::lattice_rook;
use sae_core::FhInput;

/// Spatial model data on an `nrow x ncol` rook lattice.
pub fn lattice_input(nrow: usize, ncol: usize, sigma2: f64, rho: f64, seed: u64) -> SfhInput {
    let w = lattice_rook(nrow, ncol);
    let d = w.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform_design(&mut rng, d, 3);
    let beta = DVector::from_vec(vec![0.4, 0.1, -0.2]);
    let s2e = DVector::from_fn(d, |_, _| 0.002 + 0.006 * rng.random::<f64>());
    let u = SarSampler::new(&w, sigma2, rho).expect("admissible rho").draw(&mut rng);
    let y = &x * &beta + u + heteroscedastic(&mut rng, &s2e);
    let base = FhInput::new(y, x, s2e).and_then(|b| b.with_ids(w.ids().to_vec())).expect("valid input");
    SfhInput::new(base, w, DEFAULT_RHO_BOUNDS).expect("matching ids")
}

/// Basic model data with `d` areas.
pub fn fh_input(d: usize, seed: u64) -> FhInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: DMatrix<f64> = uniform_design(&mut rng, d, 4);
    let s2e = DVector::from_fn(d, |_, _| 0.002 + 0.006 * rng.random::<f64>());
    let y = DVector::from_fn(d, |i, _| 0.3 + 0.1 * x[(i, 1)] + 0.08 * (rng.random::<f64>() - 0.5)) + heteroscedastic(&mut rng, &s2e);
    FhInput::new(y, x, s2e).expect("valid input")
}

/// Random district centroids over a Peru-sized extent.
pub fn centroids(n: usize, seed: u64) -> Vec<AreaGeo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| AreaGeo::new(format!("{i:06}"), -18.0 + 18.0 * rng.random::<f64>(), -81.0 + 12.0 * rng.random::<f64>()))
        .collect()
}
