//! Synthetic data: SAR draws, model-based area data and a national-scale
//! fixture with the same schema as the real area table.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::direct::SurveyRow;
use crate::error::{Error, Result};
use crate::fh::FhInput;
use crate::geo::{AreaGeo, Ring};
use crate::weights::SpatialWeights;

/// Draws `u = (I - rho W)^-1 eps` with `eps ~ N(0, sigma2 I)`, reusing one LU
/// factorization of `I - rho W`.
pub struct SarSampler {
    lu: LU<f64, Dyn, Dyn>,
    sd: f64,
}

impl SarSampler {
    pub fn new(w: &SpatialWeights, sigma2: f64, rho: f64) -> Result<Self> {
        let d = w.len();
        let b = DMatrix::identity(d, d) - w.to_dense() * rho;
        let lu = b.lu();
        if !lu.is_invertible() {
            return Err(Error::SingularAtRho(rho));
        }
        Ok(Self { lu, sd: sigma2.max(0.0).sqrt() })
    }

    pub fn dim(&self) -> usize {
        self.lu.l().nrows()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eps = normal_vector(rng, self.dim(), self.sd);
        self.lu.solve(&eps).expect("factorization checked invertible")
    }
}

pub fn normal_vector<R: Rng + ?Sized>(rng: &mut R, n: usize, sd: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    })
}

/// Independent normal draws with per-area variances.
pub fn heteroscedastic<R: Rng + ?Sized>(rng: &mut R, variances: &DVector<f64>) -> DVector<f64> {
    variances.map(|v| {
        let z: f64 = StandardNormal.sample(rng);
        v.max(0.0).sqrt() * z
    })
}

/// Intercept plus `p - 1` uniform(0, 1) covariates.
pub fn uniform_design<R: Rng + ?Sized>(rng: &mut R, d: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, p, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() })
}

/// Data from the model: returns the input (with `ids`) and the true area
/// means `X beta + u`.
pub fn model_data<R: Rng + ?Sized>(
    rng: &mut R,
    ids: Vec<String>,
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    sigma2_e: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(FhInput, DVector<f64>)> {
    let theta = x * beta + u;
    let y = &theta + heteroscedastic(rng, sigma2_e);
    let input = FhInput::new(y, x.clone(), sigma2_e.clone())?.with_ids(ids)?;
    Ok((input, theta))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NationalSpec {
    pub nrow: usize,
    pub ncol: usize,
    /// Fraction of grid cells dropped to roughen the outline.
    pub drop_fraction: f64,
    pub sampled_fraction: f64,
    pub seed: u64,
}

impl Default for NationalSpec {
    fn default() -> Self {
        Self { nrow: 48, ncol: 42, drop_fraction: 0.06, sampled_fraction: 0.4, seed: 2019 }
    }
}

pub const NATIONAL_COVARIATES: [&str; 6] = ["altitude_km", "piso_tierra", "agua", "internet", "refrig", "analfabet"];

/// Synthetic national data set: square districts on a lat/lon grid over a
/// Peru-like extent, census-style covariate shares, poverty percentages,
/// spatially correlated true prevalences for two indicators, and direct
/// estimates for a sampled subset.
pub struct NationalFixture {
    pub areas: Vec<AreaGeo>,
    pub poverty_pct: Vec<f64>,
    pub covariates: Vec<Vec<f64>>,
    /// `(y, var)` per indicator; `None` for unsampled areas.
    pub anemia: Vec<Option<(f64, f64)>>,
    pub stunting: Vec<Option<(f64, f64)>>,
    pub survey: Vec<SurveyRow>,
}

pub fn national_fixture(spec: &NationalSpec) -> Result<NationalFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lat0, lon0) = (-18.3, -81.3);
    let cell = 0.36;
    let mut areas = Vec::new();
    let mut pos = Vec::new();
    for r in 0..spec.nrow {
        for c in 0..spec.ncol {
            if rng.random::<f64>() < spec.drop_fraction {
                continue;
            }
            let (la, lo) = (lat0 + r as f64 * cell, lon0 + c as f64 * cell);
            let ring: Ring = vec![[lo, la], [lo + cell, la], [lo + cell, la + cell], [lo, la + cell], [lo, la]];
            let id = format!("{:02}{:02}{:02}", r / 4 + 1, c / 4 + 1, (r % 4) * 4 + c % 4 + 1);
            let mut g = AreaGeo::new(id, la + cell / 2.0, lo + cell / 2.0).with_boundary(vec![ring]);
            // altitude rises eastward towards the Andes and falls into the Amazon
            let east = c as f64 / spec.ncol as f64;
            g.altitude_km = (4.2 * (-(east - 0.45).powi(2) / 0.03).exp() + 0.1 + 0.3 * rng.random::<f64>()).max(0.0);
            areas.push(g);
            pos.push((r as f64 / spec.nrow as f64, east));
        }
    }
    let d = areas.len();
    let w = crate::weights::neighbors_contiguity(&areas)?;

    // smooth latent poverty field
    let field = SarSampler::new(&w, 1.0, 0.9)?.draw(&mut rng);
    let poverty_pct: Vec<f64> = (0..d)
        .map(|i| {
            let z = 0.9 * field[i] + 1.2 * areas[i].altitude_km / 4.0 - 0.4 + 0.3 * pos[i].0;
            (100.0 / (1.0 + (-z).exp())).clamp(0.5, 99.5)
        })
        .collect();

    let covariates: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let pov = poverty_pct[i] / 100.0;
            let noise = |rng: &mut ChaCha8Rng, s: f64| s * (rng.random::<f64>() - 0.5);
            let share = |v: f64| v.clamp(0.0, 1.0);
            vec![
                areas[i].altitude_km,
                share(0.15 + 0.6 * pov + noise(&mut rng, 0.2)),
                share(0.9 - 0.5 * pov + noise(&mut rng, 0.2)),
                share(0.45 - 0.4 * pov + noise(&mut rng, 0.15)),
                share(0.6 - 0.55 * pov + noise(&mut rng, 0.2)),
                share(0.02 + 0.25 * pov + noise(&mut rng, 0.06)),
            ]
        })
        .collect();

    let u_anemia = SarSampler::new(&w, 0.0045, 0.7)?.draw(&mut rng);
    let u_stunting = SarSampler::new(&w, 0.006, 0.4)?.draw(&mut rng);
    let mut anemia = vec![None; d];
    let mut stunting = vec![None; d];
    let mut survey = Vec::new();
    for i in 0..d {
        let x = &covariates[i];
        let th_a = (0.32 + 0.03 * x[0] + 0.1 * x[1] - 0.28 * x[3] + 0.25 * x[5] + u_anemia[i]).clamp(0.01, 0.95);
        let th_s = (0.12 + 0.02 * x[0] - 0.2 * x[4] + 0.8 * x[5] + u_stunting[i]).clamp(0.01, 0.9);
        if rng.random::<f64>() >= spec.sampled_fraction {
            continue;
        }
        let clusters = 2 + (rng.random::<f64>() * 4.0) as usize;
        let mut rows = Vec::new();
        for c in 0..clusters {
            let per = 3 + (rng.random::<f64>() * 8.0) as usize;
            let z: f64 = StandardNormal.sample(&mut rng);
            let shift = 0.3 * z;
            for _ in 0..per {
                let age = (rng.random::<f64>() * 59.0) as u32;
                let anemic = rng.random::<f64>() < (th_a + 0.05 * shift).clamp(0.0, 1.0);
                let hb = if anemic { 9.0 + 1.9 * rng.random::<f64>() } else { 11.0 + 2.5 * rng.random::<f64>() };
                let stunted = rng.random::<f64>() < (th_s + 0.04 * shift).clamp(0.0, 1.0);
                rows.push(SurveyRow {
                    area_id: areas[i].area_id.clone(),
                    cluster_id: format!("{}-{c}", areas[i].area_id),
                    sampling_weight: 50.0 + 150.0 * rng.random::<f64>(),
                    hemoglobin_g_dl: Some((hb * 10.0).round() / 10.0),
                    height_for_age_flag_input: Some(stunted),
                    age_months: age,
                    height_cm: None,
                });
            }
        }
        let ind_a: Vec<bool> = rows.iter().map(|r| r.hemoglobin_g_dl.unwrap() < 11.0).collect();
        let ind_s: Vec<bool> = rows.iter().map(|r| r.height_for_age_flag_input.unwrap()).collect();
        anemia[i] = crate::direct::ht_proportion(&rows, &ind_a).ok().map(|e| (e.y, e.var_y));
        stunting[i] = crate::direct::ht_proportion(&rows, &ind_s).ok().map(|e| (e.y, e.var_y));
        survey.extend(rows);
    }
    // areas whose direct variance came out zero are treated as unsampled for
    // that indicator, like the pipeline's default zero-variance policy
    for v in anemia.iter_mut().chain(stunting.iter_mut()) {
        if matches!(v, Some((_, var)) if *var <= 0.0) {
            *v = None;
        }
    }
    Ok(NationalFixture { areas, poverty_pct, covariates, anemia, stunting, survey })
}

impl NationalFixture {
    /// Area table CSV in the pipeline input schema.
    pub fn write_area_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["area_id", "lat", "lon", "poverty_pct"];
        header.extend(NATIONAL_COVARIATES);
        header.extend(["anemia_y", "anemia_var", "stunting_y", "stunting_var"]);
        wtr.write_record(&header)?;
        let cell = |v: Option<(f64, f64)>, first: bool| v.map(|(y, s)| if first { y } else { s }.to_string()).unwrap_or_default();
        for (i, a) in self.areas.iter().enumerate() {
            let mut rec = vec![a.area_id.clone(), a.latitude.to_string(), a.longitude.to_string(), self.poverty_pct[i].to_string()];
            rec.extend(self.covariates[i].iter().map(|v| v.to_string()));
            rec.push(cell(self.anemia[i], true));
            rec.push(cell(self.anemia[i], false));
            rec.push(cell(self.stunting[i], true));
            rec.push(cell(self.stunting[i], false));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn boundaries_geojson(&self) -> serde_json::Value {
        let features: Vec<serde_json::Value> = self
            .areas
            .iter()
            .map(|a| {
                let rings = a.boundary.clone().unwrap_or_default();
                serde_json::json!({
                    "type": "Feature",
                    "properties": {"area_id": a.area_id, "altitude_km": a.altitude_km},
                    "geometry": {"type": "Polygon", "coordinates": rings},
                })
            })
            .collect();
        serde_json::json!({"type": "FeatureCollection", "features": features})
    }
}

/// Pipeline configuration matching the files written by [`write_national`]:
/// both indicators, every census covariate, REML, SAR with rook contiguity.
pub fn national_config(seed: u64) -> crate::pipeline::Config {
    use crate::pipeline::{BootstrapConfig, Config, Selection, SpatialConfig};
    use crate::table::ResponseColumns;
    let response = |name: &str| ResponseColumns { name: name.into(), y: format!("{name}_y"), var: format!("{name}_var") };
    Config {
        areas: "areas.csv".into(),
        boundaries: Some("boundaries.geojson".into()),
        poverty_column: "poverty_pct".into(),
        responses: vec![response("anemia"), response("stunting")],
        covariates: NATIONAL_COVARIATES.iter().map(|c| c.to_string()).collect(),
        method: crate::fh::Method::Reml,
        fit: crate::fh::FitOptions::default(),
        selection: Selection::default(),
        spatial: SpatialConfig {
            enabled: true,
            rule: Some(crate::weights::NeighborRule::Contiguity),
            ..SpatialConfig::default()
        },
        bootstrap: BootstrapConfig { enabled: true, replicates: 50 },
        clamp: true,
        seed,
        output_dir: "out".into(),
    }
}

/// Writes `areas.csv`, `boundaries.geojson`, `survey.csv` and `config.json`
/// into `dir`.
pub fn write_national(dir: &std::path::Path, spec: &NationalSpec) -> Result<NationalFixture> {
    use std::fs::{self, File};
    use std::io::{BufWriter, Write};
    fs::create_dir_all(dir)?;
    let fx = national_fixture(spec)?;
    fx.write_area_csv(BufWriter::new(File::create(dir.join("areas.csv"))?))?;
    crate::direct::write_survey_csv(BufWriter::new(File::create(dir.join("survey.csv"))?), &fx.survey)?;
    let mut w = BufWriter::new(File::create(dir.join("boundaries.geojson"))?);
    serde_json::to_writer(&mut w, &fx.boundaries_geojson())?;
    w.write_all(b"\n")?;
    let mut w = BufWriter::new(File::create(dir.join("config.json"))?);
    serde_json::to_writer_pretty(&mut w, &national_config(spec.seed))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(fx)
}
