//! End-to-end run: stratify, fit per stratum and response, predict every
//! area, and emit CSV, GeoJSON, fit reports and a run manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bootstrap::{self, BootstrapSpec, DEFAULT_REPLICATES};
use crate::error::{Error, Result};
use crate::fh::{self, FhFit, FhInput, FitOptions, Likelihood, Method};
use crate::geo::{read_geojson, AreaGeo};
use crate::sfh::{self, SfhFit, SfhInput, SfhOptions, DEFAULT_RHO_BOUNDS};
use crate::table::{self, AreaTable, EstimatorKind, Prediction, ResponseColumns};
use crate::weights::{morans_i, NeighborRule, SpatialWeights};

pub const INTERCEPT: &str = "(intercept)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Area table CSV; relative paths resolve against the config file.
    pub areas: PathBuf,
    /// Optional GeoJSON with district polygons keyed by `area_id`.
    #[serde(default)]
    pub boundaries: Option<PathBuf>,
    #[serde(default = "default_poverty_column")]
    pub poverty_column: String,
    pub responses: Vec<ResponseColumns>,
    pub covariates: Vec<String>,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub spatial: SpatialConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default = "default_true")]
    pub clamp: bool,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

fn default_poverty_column() -> String {
    "poverty_pct".into()
}

fn default_method() -> Method {
    Method::Reml
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Selection {
    pub enabled: bool,
    pub p_value: f64,
}

impl Default for Selection {
    fn default() -> Self {
        Self { enabled: false, p_value: 0.10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsScope {
    /// Neighbors are found among the stratum's own areas.
    Stratum,
    /// Neighbors are found over the whole domain, then restricted.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    pub enabled: bool,
    pub rule: Option<NeighborRule>,
    /// Precomputed `i_id,j_id,w` triplets over every area, used instead of
    /// `rule`.
    pub weights_file: Option<PathBuf>,
    pub method: Likelihood,
    pub rho_bounds: (f64, f64),
    pub weights_scope: WeightsScope,
    pub fix_rho: Option<f64>,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            rule: None,
            weights_file: None,
            method: Likelihood::Reml,
            rho_bounds: DEFAULT_RHO_BOUNDS,
            weights_scope: WeightsScope::Stratum,
            fix_rho: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub enabled: bool,
    pub replicates: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { enabled: false, replicates: DEFAULT_REPLICATES }
    }
}

impl Config {
    /// Reads a config and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        let mut cfg: Config = serde_json::from_str(&text).map_err(|e| Error::from(e).context(format!("parsing {}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.areas);
        if let Some(b) = cfg.boundaries.as_mut() {
            resolve(b);
        }
        if let Some(w) = cfg.spatial.weights_file.as_mut() {
            resolve(w);
        }
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.responses.is_empty() {
            return Err(Error::Invalid("config lists no responses".into()));
        }
        if self.spatial.enabled && self.spatial.rule.is_some() == self.spatial.weights_file.is_some() {
            return Err(Error::Invalid("spatial needs exactly one of spatial.rule and spatial.weights_file".into()));
        }
        if self.bootstrap.enabled && self.bootstrap.replicates == 0 {
            return Err(Error::Invalid("bootstrap.replicates must be positive".into()));
        }
        Ok(())
    }
}

/// Everything one stratum × response job produces.
#[derive(Debug, Clone)]
pub struct JobResult {
    pub stratum: u8,
    pub response: usize,
    /// Long rows: direct and every model-based predictor.
    pub long: Vec<Prediction>,
    /// One final row per area.
    pub merged: Vec<Prediction>,
    pub report: Value,
    pub bootstrap: Vec<(String, bootstrap::MseTable)>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub jobs: Vec<JobResult>,
    pub files: Vec<PathBuf>,
}

struct Domain {
    table: AreaTable,
    strata: Vec<u8>,
    geos: Vec<AreaGeo>,
    full_w: Option<SpatialWeights>,
}

fn load_domain(cfg: &Config) -> Result<Domain> {
    let file = File::open(&cfg.areas).map_err(|e| Error::from(e).context(format!("opening {}", cfg.areas.display())))?;
    let table = AreaTable::read_csv(BufReader::new(file), &cfg.poverty_column, &cfg.covariates, &cfg.responses)
        .map_err(|e| e.context(format!("reading {}", cfg.areas.display())))?;
    let strata = table::stratify(&table)?;

    let boundaries: HashMap<String, AreaGeo> = match &cfg.boundaries {
        Some(path) => {
            let file = File::open(path).map_err(|e| Error::from(e).context(format!("opening {}", path.display())))?;
            read_geojson(BufReader::new(file))?.into_iter().map(|g| (g.area_id.clone(), g)).collect()
        }
        None => HashMap::new(),
    };
    let geos: Vec<AreaGeo> = table
        .rows
        .iter()
        .map(|r| {
            let mut g = AreaGeo::new(r.area_id.clone(), r.lat, r.lon);
            g.altitude_km = r.altitude_km;
            if let Some(b) = boundaries.get(&r.area_id) {
                g.boundary = b.boundary.clone();
            }
            g
        })
        .collect();
    let full_w = match (&cfg.spatial.weights_file, &cfg.spatial.rule) {
        _ if !cfg.spatial.enabled => None,
        (Some(path), _) => {
            let file = File::open(path).map_err(|e| Error::from(e).context(format!("opening {}", path.display())))?;
            Some(SpatialWeights::read_triplets(BufReader::new(file)).map_err(|e| e.context(format!("reading {}", path.display())))?)
        }
        (None, Some(rule)) if cfg.spatial.weights_scope == WeightsScope::Full => {
            Some(rule.build(&geos).map_err(|e| e.context("building full-domain weights"))?)
        }
        _ => None,
    };
    Ok(Domain { table, strata, geos, full_w })
}

fn weights_source(sp: &SpatialConfig) -> String {
    match (&sp.weights_file, &sp.rule) {
        (Some(path), _) => format!("file {}", path.file_name().map(|f| f.to_string_lossy()).unwrap_or_default()),
        (None, Some(rule)) => rule.describe(),
        (None, None) => String::new(),
    }
}

fn job_seed(seed: u64, stratum: u8, response: usize, model: u64) -> u64 {
    let key = ((stratum as u64) << 32) | ((response as u64) << 8) | model;
    seed ^ key.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn design(rows: &[usize], table: &AreaTable, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len() + 1, |i, j| if j == 0 { 1.0 } else { table.rows[rows[i]].covariates[cols[j - 1]] })
}

fn fit_json(fit: &FhFit, names: &[String]) -> Value {
    let se = fit.beta_se();
    let pv = fit.beta_p_values();
    let coef: Vec<Value> = names
        .iter()
        .enumerate()
        .map(|(k, n)| json!({"name": n, "estimate": fit.beta[k], "se": se[k], "p_value": pv[k]}))
        .collect();
    json!({
        "method": fit.method,
        "coefficients": coef,
        "sigma2_u": fit.sigma2_u,
        "sigma2_u_se": fit.sigma2_u_se,
        "loglik": fit.loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
    })
}

fn sfh_json(fit: &SfhFit, names: &[String]) -> Value {
    let coef: Vec<Value> = names
        .iter()
        .enumerate()
        .map(|(k, n)| json!({"name": n, "estimate": fit.beta[k], "se": fit.beta_cov[(k, k)].max(0.0).sqrt()}))
        .collect();
    json!({
        "method": fit.method,
        "coefficients": coef,
        "sigma2_eps": fit.sigma2_eps,
        "sigma2_eps_se": fit.sigma2_eps_se,
        "rho": fit.rho,
        "rho_se": fit.rho_se,
        "rho_at_boundary": fit.rho_at_boundary,
        "rho_fixed": fit.rho_fixed,
        "loglik": fit.loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
    })
}

fn run_job(cfg: &Config, dom: &Domain, stratum: u8, response: usize) -> Result<JobResult> {
    let table = &dom.table;
    let members: Vec<usize> = (0..table.rows.len()).filter(|&i| dom.strata[i] == stratum).collect();
    let (sampled, unsampled): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&i| table.rows[i].sampled(response));
    let ids = |rows: &[usize]| -> Vec<String> { rows.iter().map(|&i| table.rows[i].area_id.clone()).collect() };
    let s_ids = ids(&sampled);
    let o_ids = ids(&unsampled);

    let all_cols: Vec<usize> = (0..table.covariate_names.len()).collect();
    let y = DVector::from_iterator(sampled.len(), sampled.iter().map(|&i| table.rows[i].responses[response].unwrap().0));
    let s2e = DVector::from_iterator(sampled.len(), sampled.iter().map(|&i| table.rows[i].responses[response].unwrap().1));
    let full_input = FhInput::new(y.clone(), design(&sampled, table, &all_cols), s2e.clone())?.with_ids(s_ids.clone())?;

    let (cols, fit) = if cfg.selection.enabled {
        let (keep, fit) = fh::backward_eliminate(&full_input, cfg.method, cfg.fit, cfg.selection.p_value, &[0])?;
        (keep.iter().filter(|&&k| k > 0).map(|&k| k - 1).collect::<Vec<_>>(), fit)
    } else {
        (all_cols.clone(), fh::fit(&full_input, cfg.method, cfg.fit)?)
    };
    let names: Vec<String> = std::iter::once(INTERCEPT.to_string())
        .chain(cols.iter().map(|&c| table.covariate_names[c].clone()))
        .collect();
    let input = FhInput::new(y, design(&sampled, table, &cols), s2e)?.with_ids(s_ids.clone())?;
    let x_out = design(&unsampled, table, &cols);

    let mut long = Vec::new();
    for k in 0..input.d() {
        let mut p = Prediction::new(s_ids[k].clone(), EstimatorKind::Direct, input.y[k]);
        p.mse = Some(input.sigma2_e[k]);
        p.mse_method = Some("design_based".into());
        long.push(p);
    }
    let mut eblup = fh::eblup(&input, &fit);
    let mut synth = fh::synthetic_predict(&o_ids, &x_out, &fit)?;

    let mut report = json!({
        "stratum": stratum,
        "response": table.response_names[response],
        "n_areas": members.len(),
        "n_sampled": sampled.len(),
        "n_unsampled": unsampled.len(),
        "covariates": names,
        "fh": fit_json(&fit, &names),
    });
    let mut boot = Vec::new();
    let spec = |model: u64| BootstrapSpec {
        replicates: cfg.bootstrap.replicates,
        seed: job_seed(cfg.seed, stratum, response, model),
        mode: bootstrap::RefitMode::Refit,
        options: cfg.fit,
    };
    if cfg.bootstrap.enabled {
        let t = bootstrap::bootstrap_fh(&input, &fit, &spec(0)).map_err(|e| e.context("FH bootstrap"))?;
        boot.push(("fh".to_string(), t));
    }

    let mut spatial: Option<(Vec<Prediction>, Vec<Prediction>)> = None;
    if cfg.spatial.enabled {
        let member_ids = ids(&members);
        let stratum_w = match (&dom.full_w, &cfg.spatial.rule) {
            (Some(w), _) => w.subset(&member_ids)?,
            (None, Some(rule)) => {
                let geos: Vec<AreaGeo> = members.iter().map(|&i| dom.geos[i].clone()).collect();
                rule.build(&geos)?
            }
            (None, None) => unreachable!("validated"),
        };
        let w_in = stratum_w.subset(&s_ids)?;
        let moran = morans_i(input.y.as_slice(), &w_in).ok();
        let sinput = SfhInput::new(input.clone(), w_in, cfg.spatial.rho_bounds)?;
        let opts = SfhOptions { fit: cfg.fit, fix_rho: cfg.spatial.fix_rho, start: None };
        let sfit = sfh::fit_sfh(&sinput, cfg.spatial.method, opts)?;
        let mut s_in = sfh::seblup(&sinput, &sfit)?;
        let s_out = sfh::seblup_out_of_sample(&stratum_w, &o_ids, &x_out, &sinput, &sfit)?;
        if cfg.bootstrap.enabled {
            let t = bootstrap::bootstrap_sfh(&sinput, &sfit, &spec(1)).map_err(|e| e.context("SFH bootstrap"))?;
            for (p, r) in s_in.iter_mut().zip(&t.rows) {
                p.mse = Some(r.mse);
                p.mse_method = Some("parametric_bootstrap".into());
                p.flags.extend(&r.flags);
            }
            boot.push(("sfh".to_string(), t));
        }
        report["sfh"] = sfh_json(&sfit, &names);
        report["weights"] = json!({
            "source": weights_source(&cfg.spatial),
            "scope": cfg.spatial.weights_scope,
            "islands_in_sample": sinput.w.islands().len(),
            "islands_stratum": stratum_w.islands().len(),
            "moran_i_direct": moran,
        });
        spatial = Some((s_in, s_out));
    }
    if let Some(tables) = boot.iter().find(|(m, _)| m == "fh") {
        report["bootstrap_fh_b_effective"] = json!(tables.1.b_effective);
    }

    let tag = |ps: &mut Vec<Prediction>| {
        for p in ps.iter_mut() {
            p.stratum = Some(stratum);
            if cfg.clamp {
                p.clamp_unit();
            }
        }
    };
    tag(&mut long);
    tag(&mut eblup);
    tag(&mut synth);
    let mut merged = Vec::with_capacity(members.len());
    match spatial {
        Some((mut s_in, mut s_out)) => {
            tag(&mut s_in);
            tag(&mut s_out);
            long.extend(eblup);
            long.extend(s_in.iter().cloned());
            long.extend(synth);
            long.extend(s_out.iter().cloned());
            merged.extend(s_in);
            merged.extend(s_out);
        }
        None => {
            long.extend(eblup.iter().cloned());
            long.extend(synth.iter().cloned());
            merged.extend(eblup);
            merged.extend(synth);
        }
    }
    Ok(JobResult { stratum, response, long, merged, report, bootstrap: boot })
}

/// Runs every stratum × response job (in parallel) and returns the results
/// in stratum-then-response order without writing anything.
pub fn compute(cfg: &Config) -> Result<Vec<JobResult>> {
    cfg.validate()?;
    compute_on(cfg, &load_domain(cfg)?)
}

fn compute_on(cfg: &Config, dom: &Domain) -> Result<Vec<JobResult>> {
    let mut strata: Vec<u8> = dom.strata.clone();
    strata.sort_unstable();
    strata.dedup();
    let jobs: Vec<(u8, usize)> = strata
        .iter()
        .flat_map(|&s| (0..cfg.responses.len()).map(move |r| (s, r)))
        .collect();
    jobs.par_iter()
        .map(|&(s, r)| {
            run_job(cfg, dom, s, r).map_err(|e| e.context(format!("stratum {s}, response {}", cfg.responses[r].name)))
        })
        .collect()
}

fn geometry(g: &AreaGeo) -> Value {
    match &g.boundary {
        Some(rings) if rings.len() == 1 => json!({"type": "Polygon", "coordinates": rings}),
        Some(rings) => json!({"type": "MultiPolygon", "coordinates": rings.iter().map(|r| vec![r]).collect::<Vec<_>>()}),
        None => json!({"type": "Point", "coordinates": [g.longitude, g.latitude]}),
    }
}

/// FeatureCollection with properties `area_id, value, mse, estimator_kind`.
pub fn predictions_geojson(rows: &[Prediction], geos: &HashMap<&str, &AreaGeo>) -> Result<Value> {
    let features = rows
        .iter()
        .map(|p| {
            let g = geos.get(p.area_id.as_str()).ok_or_else(|| Error::UnknownArea(p.area_id.clone()))?;
            Ok(json!({
                "type": "Feature",
                "properties": {
                    "area_id": p.area_id,
                    "value": p.value,
                    "mse": p.mse,
                    "estimator_kind": p.kind,
                },
                "geometry": geometry(g),
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({"type": "FeatureCollection", "features": features}))
}

fn write_file(dir: &Path, name: &str, files: &mut Vec<PathBuf>, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::from(e).context(format!("creating {}", path.display())))?);
    body(&mut w)?;
    w.flush()?;
    files.push(PathBuf::from(name));
    Ok(())
}

fn write_json<W: Write>(w: &mut W, v: &Value) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Full run: compute, then write every artifact under `cfg.output_dir`.
pub fn run(cfg: &Config) -> Result<RunOutput> {
    cfg.validate()?;
    let dom = load_domain(cfg)?;
    let jobs = compute_on(cfg, &dom)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let geo_index: HashMap<&str, &AreaGeo> = dom.geos.iter().map(|g| (g.area_id.as_str(), g)).collect();
    let order: HashMap<&str, usize> = dom.table.rows.iter().enumerate().map(|(i, r)| (r.area_id.as_str(), i)).collect();

    let mut summaries = Vec::new();
    for (r, resp) in cfg.responses.iter().enumerate() {
        let mut long: Vec<Prediction> = Vec::new();
        let mut merged: Vec<Prediction> = Vec::new();
        for job in jobs.iter().filter(|j| j.response == r) {
            long.extend(job.long.iter().cloned());
            merged.extend(job.merged.iter().cloned());
            let name = format!("fits/{}_stratum{}.json", resp.name, job.stratum);
            write_file(out, &name, &mut files, |w| write_json(w, &job.report))?;
            for (model, t) in &job.bootstrap {
                let name = format!("bootstrap/{}_stratum{}_{model}.csv", resp.name, job.stratum);
                write_file(out, &name, &mut files, |w| t.write_csv(w))?;
            }
            summaries.push(json!({
                "stratum": job.stratum,
                "response": resp.name,
                "report": format!("fits/{}_stratum{}.json", resp.name, job.stratum),
            }));
        }
        let key = |p: &Prediction| (order[p.area_id.as_str()], p.kind);
        long.sort_by_key(key);
        merged.sort_by_key(key);
        write_file(out, &format!("{}_predictions_long.csv", resp.name), &mut files, |w| table::write_predictions_csv(w, &long))?;
        write_file(out, &format!("{}_predictions.csv", resp.name), &mut files, |w| table::write_predictions_csv(w, &merged))?;
        let gj = predictions_geojson(&merged, &geo_index)?;
        write_file(out, &format!("{}_predictions.geojson", resp.name), &mut files, |w| write_json(w, &gj))?;
    }

    let mut counts = BTreeMap::new();
    for s in &dom.strata {
        *counts.entry(s.to_string()).or_insert(0usize) += 1;
    }
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "method": cfg.method,
        "covariates": cfg.covariates,
        "selection": cfg.selection,
        "spatial": {
            "enabled": cfg.spatial.enabled,
            "weights": cfg.spatial.enabled.then(|| weights_source(&cfg.spatial)),
            "method": cfg.spatial.method,
            "rho_bounds": cfg.spatial.rho_bounds,
            "weights_scope": cfg.spatial.weights_scope,
            "fix_rho": cfg.spatial.fix_rho,
        },
        "bootstrap": cfg.bootstrap,
        "clamp": cfg.clamp,
        "n_areas": dom.table.rows.len(),
        "strata": counts,
        "jobs": summaries,
        "outputs": files.iter().map(|f| f.to_string_lossy().into_owned()).collect::<Vec<_>>(),
    });
    write_file(out, "manifest.json", &mut files, |w| write_json(w, &manifest))?;
    Ok(RunOutput { jobs, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_seeds_differ() {
        let a = job_seed(7, 1, 0, 0);
        assert_ne!(a, job_seed(7, 1, 0, 1));
        assert_ne!(a, job_seed(7, 2, 0, 0));
        assert_ne!(a, job_seed(7, 1, 1, 0));
        assert_eq!(a, job_seed(7, 1, 0, 0));
    }

    #[test]
    fn spatial_requires_rule() {
        let cfg: Config = serde_json::from_value(json!({
            "areas": "a.csv",
            "responses": [{"name": "anemia", "y": "anemia_y", "var": "anemia_var"}],
            "covariates": [],
            "spatial": {"enabled": true},
            "output_dir": "out",
        }))
        .unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn point_geometry_without_boundary() {
        let g = AreaGeo::new("a", -12.0, -77.0);
        assert_eq!(geometry(&g)["type"], "Point");
        assert_eq!(geometry(&g)["coordinates"][0], -77.0);
    }
}
