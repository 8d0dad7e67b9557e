//! Parametric bootstrap MSE for EBLUP and SEBLUP predictors.
//!
//! Replicate `b` draws from its own ChaCha8 stream (`seed`, stream `b`), so
//! results do not depend on scheduling. Per-area sums are accumulated in
//! replicate order with compensated summation.

use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fh::{self, FhFit, FhInput, FitOptions};
use crate::flags::{Flag, Flags};
use crate::sfh::{self, SfhFit, SfhInput, SfhOptions, SpatialSmoother};
use crate::simulate::{heteroscedastic, normal_vector, SarSampler};

pub const DEFAULT_REPLICATES: usize = 400;

/// Replicate counts below this are allowed but flagged.
pub const MIN_REPORTED_REPLICATES: usize = 50;

/// Fraction of replicates that must succeed.
pub const MIN_SUCCESS_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefitMode {
    /// Re-estimate every parameter in each replicate with the original method.
    Refit,
    /// Predict with the generating parameters (BLUP with known parameters).
    KnownParameters,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub replicates: usize,
    pub seed: u64,
    pub mode: RefitMode,
    pub options: FitOptions,
}

impl BootstrapSpec {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self { replicates, seed, mode: RefitMode::Refit, options: FitOptions::default() }
    }

    pub fn known_parameters(mut self) -> Self {
        self.mode = RefitMode::KnownParameters;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Invalid("bootstrap needs at least one replicate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub area_id: String,
    pub prediction: f64,
    pub mse: f64,
    /// `sqrt(mse) / |prediction|`; absent when the prediction is zero.
    pub rrmse: Option<f64>,
    /// Monte Carlo standard error of `mse`.
    pub mse_se: f64,
    pub b_effective: usize,
    pub flags: Flags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseTable {
    pub requested: usize,
    pub b_effective: usize,
    pub rows: Vec<MseRow>,
}

impl MseTable {
    /// CSV with columns `area_id,prediction,mse,rrmse,b_effective`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["area_id", "prediction", "mse", "rrmse", "b_effective"])?;
        for r in &self.rows {
            wtr.write_record([
                r.area_id.clone(),
                r.prediction.to_string(),
                r.mse.to_string(),
                r.rrmse.map(|v| v.to_string()).unwrap_or_default(),
                r.b_effective.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

fn replicate_rng(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    rng
}

/// Runs `replicate(b)` for every `b`, each returning squared prediction
/// errors or `None` on failure, and reduces them into a table.
fn run<F>(ids: &[String], predictions: &[f64], spec: &BootstrapSpec, replicate: F) -> Result<MseTable>
where
    F: Fn(usize) -> Option<DVector<f64>> + Sync,
{
    spec.validate()?;
    let d = ids.len();
    let results: Vec<Option<DVector<f64>>> = (0..spec.replicates).into_par_iter().map(&replicate).collect();

    let mut sums = vec![Kahan::default(); d];
    let mut sq_sums = vec![Kahan::default(); d];
    let mut ok = 0usize;
    for err2 in results.iter().flatten() {
        ok += 1;
        for i in 0..d {
            sums[i].add(err2[i]);
            sq_sums[i].add(err2[i] * err2[i]);
        }
    }
    if (ok as f64) < MIN_SUCCESS_FRACTION * spec.replicates as f64 {
        return Err(Error::TooFewSuccessfulReplicates { ok, requested: spec.replicates });
    }

    let mut flags = Flags::new();
    if spec.replicates < MIN_REPORTED_REPLICATES {
        flags.insert(Flag::SmallBootstrap);
    }
    let n = ok as f64;
    let rows = (0..d)
        .map(|i| {
            let mse = (sums[i].value() / n).max(0.0);
            let var = if ok > 1 { ((sq_sums[i].value() - n * mse * mse) / (n - 1.0)).max(0.0) } else { 0.0 };
            let pred = predictions[i];
            MseRow {
                area_id: ids[i].clone(),
                prediction: pred,
                mse,
                rrmse: (pred != 0.0).then(|| mse.sqrt() / pred.abs()),
                mse_se: (var / n).sqrt(),
                b_effective: ok,
                flags: flags.clone(),
            }
        })
        .collect();
    Ok(MseTable { requested: spec.replicates, b_effective: ok, rows })
}

/// Bootstrap MSE of the EBLUP under the basic area-level model, refitting
/// with `fit.method`.
pub fn bootstrap_fh(input: &FhInput, fit: &FhFit, spec: &BootstrapSpec) -> Result<MseTable> {
    if !fit.converged {
        return Err(Error::NoConvergence(fit.iterations));
    }
    let predictions: Vec<f64> = fh::eblup(input, fit).iter().map(|p| p.value).collect();
    let synth = &input.x * &fit.beta;
    let sd_u = fit.sigma2_u.max(0.0).sqrt();
    let replicate = |b: usize| -> Option<DVector<f64>> {
        let mut rng = replicate_rng(spec.seed, b);
        let theta = &synth + normal_vector(&mut rng, input.d(), sd_u);
        let y = &theta + heteroscedastic(&mut rng, &input.sigma2_e);
        let star = input.with_response(y);
        let (gamma, beta) = match spec.mode {
            RefitMode::KnownParameters => (fit.gamma.clone(), fit.beta.clone()),
            RefitMode::Refit => {
                let f = fh::fit(&star, fit.method, spec.options).ok().filter(|f| f.converged)?;
                (f.gamma, f.beta)
            }
        };
        let est_synth = &star.x * &beta;
        let est = DVector::from_fn(star.d(), |i, _| gamma[i] * star.y[i] + (1.0 - gamma[i]) * est_synth[i]);
        Some((est - theta).map(|e| e * e))
    };
    run(&input.ids, &predictions, spec, replicate)
}

/// Bootstrap MSE of the SEBLUP, drawing `u*` from the fitted SAR process
/// and refitting with `fit.method` (holding rho fixed when it was fixed).
/// Refits start from the fitted parameters.
pub fn bootstrap_sfh(input: &SfhInput, fit: &SfhFit, spec: &BootstrapSpec) -> Result<MseTable> {
    if !fit.converged {
        return Err(Error::NoConvergence(fit.iterations));
    }
    let base = &input.base;
    let predictions: Vec<f64> = sfh::seblup(input, fit)?.iter().map(|p| p.value).collect();
    let synth = &base.x * &fit.beta;
    let sampler = SarSampler::new(&input.w, fit.sigma2_eps, fit.rho)?;
    let known = match spec.mode {
        RefitMode::KnownParameters => Some(SpatialSmoother::new(input, fit.sigma2_eps, fit.rho)?),
        RefitMode::Refit => None,
    };
    let opts = SfhOptions { fit: spec.options, fix_rho: fit.rho_fixed.then_some(fit.rho), start: Some((fit.sigma2_eps, fit.rho)) };
    let replicate = |b: usize| -> Option<DVector<f64>> {
        let mut rng = replicate_rng(spec.seed, b);
        let theta = &synth + sampler.draw(&mut rng);
        let y = &theta + heteroscedastic(&mut rng, &base.sigma2_e);
        let est = match &known {
            Some(smoother) => &synth + smoother.effects(&(&y - &synth)),
            None => {
                let star = SfhInput { base: base.with_response(y), w: input.w.clone(), rho_bounds: input.rho_bounds };
                let f = sfh::fit_sfh(&star, fit.method, opts).ok().filter(|f| f.converged)?;
                let s = &star.base.x * &f.beta;
                let u = SpatialSmoother::new(&star, f.sigma2_eps, f.rho).ok()?.effects(&(&star.base.y - &s));
                s + u
            }
        };
        Some((est - theta).map(|e| e * e))
    };
    run(&base.ids, &predictions, spec, replicate)
}
