use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sae_core::bootstrap::{self, BootstrapSpec, DEFAULT_REPLICATES};
use sae_core::direct::{self, GrowthTable};
use sae_core::fh::{self, FhFit, FitOptions, Method};
use sae_core::geo::{read_centroids_csv, read_geojson};
use sae_core::pipeline::{self, Config};
use sae_core::sfh::{self, SfhFit, SfhInput, SfhOptions, DEFAULT_RHO_BOUNDS};
use sae_core::simulate::{write_national, NationalSpec};
use sae_core::table::{write_predictions_csv, ModelTable, Prediction};
use sae_core::weights::{morans_i, NeighborRule, SpatialWeights};
use sae_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sae", version, about = "Area-level small area estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Direct estimates and sampling variances from unit-level survey rows.
    Direct(DirectArgs),
    /// Build a row-standardized spatial weights matrix.
    Weights(WeightsArgs),
    /// Moran's I of one column under a weights matrix.
    Moran(MoranArgs),
    /// Fit a Fay-Herriot or spatial Fay-Herriot model.
    Fit(FitArgs),
    /// Predict every area from a saved fit.
    Predict(PredictArgs),
    /// Parametric bootstrap MSE for a saved fit.
    Bootstrap(BootstrapArgs),
    /// Run the configured end-to-end pipeline.
    Pipeline(PipelineArgs),
    /// Write the synthetic national fixture.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum IndicatorArg {
    Anemia,
    Stunting,
}

#[derive(Args)]
struct DirectArgs {
    #[arg(long)]
    survey: PathBuf,
    #[arg(long, value_enum)]
    indicator: IndicatorArg,
    /// `age_months,height_cm` cutoffs for rows without a precomputed flag.
    #[arg(long)]
    growth_table: Option<PathBuf>,
    /// `area_id,stratum` file grouping areas for variance imputation.
    #[arg(long)]
    strata: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Distance,
    Knn,
    Contiguity,
}

#[derive(Args)]
struct WeightsArgs {
    /// Polygons (FeatureCollection with an `area_id` property).
    #[arg(long, conflicts_with = "centroids")]
    geojson: Option<PathBuf>,
    /// `area_id,lat,lon[,altitude_km]` table.
    #[arg(long)]
    centroids: Option<PathBuf>,
    #[arg(long, value_enum)]
    rule: RuleArg,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    km: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MoranArgs {
    /// Triplet file `i_id,j_id,w`.
    #[arg(long)]
    weights: PathBuf,
    /// CSV with `area_id` and the value column.
    #[arg(long)]
    values: PathBuf,
    #[arg(long)]
    column: String,
}

#[derive(Args)]
struct DataArgs {
    /// CSV with `area_id`, the response pair and the covariates.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y")]
    y: String,
    #[arg(long, default_value = "var_y")]
    var: String,
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ml,
    Reml,
    Moments,
    FhIterative,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ml => Method::Ml,
            MethodArg::Reml => Method::Reml,
            MethodArg::Moments => Method::Moments,
            MethodArg::FhIterative => Method::FhIterative,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "reml")]
    method: MethodArg,
    /// Fit the SAR model with these weights (triplet file over all areas).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    fix_rho: Option<f64>,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Keep raw values outside [0, 1].
    #[arg(long)]
    no_clamp: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BootstrapArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Predict with the fitted parameters instead of refitting.
    #[arg(long)]
    known_parameters: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = NationalSpec::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = NationalSpec::default().nrow)]
    nrow: usize,
    #[arg(long, default_value_t = NationalSpec::default().ncol)]
    ncol: usize,
    #[arg(long, default_value_t = NationalSpec::default().sampled_fraction)]
    sampled_fraction: f64,
}

/// What `fit` writes and `predict`/`bootstrap` read back.
#[derive(Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
enum SavedFit {
    Fh { covariates: Vec<String>, fit: FhFit },
    Sfh { covariates: Vec<String>, rho_bounds: (f64, f64), fit: SfhFit },
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::from(e).context(format!("opening {}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::from(e).context(format!("creating {}", path.display())))
}

fn load_table(args: &DataArgs) -> Result<ModelTable> {
    ModelTable::read_csv(open(&args.data)?, &args.y, &args.var, &args.covariates)
}

fn load_weights(path: &Path) -> Result<SpatialWeights> {
    SpatialWeights::read_triplets(open(path)?).map_err(|e| e.context(format!("reading {}", path.display())))
}

fn spatial_input(table: &ModelTable, full_w: &SpatialWeights, rho_bounds: (f64, f64)) -> Result<SfhInput> {
    let base = table.sampled_input()?;
    let w = full_w.subset(&base.ids)?;
    SfhInput::new(base, w, rho_bounds)
}

fn run_direct(a: DirectArgs) -> Result<()> {
    let rows = direct::read_survey_csv(open(&a.survey)?)?;
    let strata: Option<HashMap<String, u8>> = match &a.strata {
        Some(p) => {
            #[derive(Deserialize)]
            struct Rec {
                area_id: String,
                stratum: u8,
            }
            let mut rdr = csv_reader(open(p)?);
            Some(rdr.deserialize::<Rec>().map(|r| r.map(|r| (r.area_id, r.stratum))).collect::<std::result::Result<_, _>>().map_err(Error::from)?)
        }
        None => None,
    };
    let growth = a.growth_table.as_deref().map(|p| GrowthTable::read_csv(open(p)?)).transpose()?;
    let est = match a.indicator {
        IndicatorArg::Anemia => direct::direct_estimates(&rows, direct::anemia_indicator, strata.as_ref())?,
        IndicatorArg::Stunting => {
            direct::direct_estimates(&rows, |r| direct::stunting_indicator(r, growth.as_ref()), strata.as_ref())?
        }
    };
    direct::write_direct_csv(create(&a.out)?, &est)?;
    eprintln!("{} areas written to {}", est.len(), a.out.display());
    Ok(())
}

fn csv_reader<R: std::io::Read>(r: R) -> csv::Reader<R> {
    csv::Reader::from_reader(r)
}

fn run_weights(a: WeightsArgs) -> Result<()> {
    let geos = match (&a.geojson, &a.centroids) {
        (Some(p), _) => read_geojson(open(p)?)?,
        (None, Some(p)) => read_centroids_csv(open(p)?)?,
        (None, None) => return Err(Error::Invalid("give --geojson or --centroids".into())),
    };
    let rule = match a.rule {
        RuleArg::Distance => NeighborRule::Distance { km: a.km.ok_or_else(|| Error::Invalid("--km is required".into()))? },
        RuleArg::Knn => NeighborRule::Knn { k: a.k.ok_or_else(|| Error::Invalid("--k is required".into()))? },
        RuleArg::Contiguity => NeighborRule::Contiguity,
    };
    let w = rule.build(&geos)?;
    w.write_triplets(create(&a.out)?)?;
    eprintln!("{}: {} areas, {} links, {} islands", rule.describe(), w.len(), w.nnz(), w.islands().len());
    Ok(())
}

fn run_moran(a: MoranArgs) -> Result<()> {
    let w = load_weights(&a.weights)?;
    let mut rdr = csv_reader(open(&a.values)?);
    let headers = rdr.headers().map_err(Error::from)?.clone();
    let id_c = headers.iter().position(|h| h == "area_id").ok_or_else(|| Error::Invalid("missing column `area_id`".into()))?;
    let v_c = headers.iter().position(|h| h == a.column).ok_or_else(|| Error::Invalid(format!("missing column `{}`", a.column)))?;
    let mut values = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(Error::from)?;
        let v: f64 = rec[v_c].trim().parse().map_err(|_| Error::Invalid(format!("bad value for area {}", &rec[id_c])))?;
        values.insert(rec[id_c].trim().to_string(), v);
    }
    let z = w
        .ids()
        .iter()
        .map(|id| values.get(id).copied().ok_or_else(|| Error::UnknownArea(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    println!("{}", morans_i(&z, &w)?);
    Ok(())
}

fn run_fit(a: FitArgs) -> Result<()> {
    let table = load_table(&a.data)?;
    let names = table.design_names();
    let opts = FitOptions { tol: a.tol, ..FitOptions::default() };
    let saved = match &a.weights {
        None => SavedFit::Fh { covariates: names, fit: fh::fit(&table.sampled_input()?, a.method.into(), opts)? },
        Some(p) => {
            let lik = Method::from(a.method)
                .likelihood()
                .ok_or_else(|| Error::Invalid("the spatial model supports ml or reml only".into()))?;
            let input = spatial_input(&table, &load_weights(p)?, DEFAULT_RHO_BOUNDS)?;
            let fit = sfh::fit_sfh(&input, lik, SfhOptions { fit: opts, fix_rho: a.fix_rho, start: None })?;
            SavedFit::Sfh { covariates: names, rho_bounds: DEFAULT_RHO_BOUNDS, fit }
        }
    };
    let mut out = create(&a.out)?;
    serde_json::to_writer_pretty(&mut out, &saved)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn load_fit(path: &Path, table: &ModelTable) -> Result<SavedFit> {
    let saved: SavedFit = serde_json::from_reader(open(path)?)?;
    let covs = match &saved {
        SavedFit::Fh { covariates, .. } | SavedFit::Sfh { covariates, .. } => covariates,
    };
    if *covs != table.design_names() {
        return Err(Error::ColumnMismatch { expected: covs.len(), found: table.design_names().len() });
    }
    Ok(saved)
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let table = load_table(&a.data)?;
    let input = table.sampled_input()?;
    let (o_ids, x_out) = table.unsampled();
    let mut rows: Vec<Prediction> = match load_fit(&a.fit, &table)? {
        SavedFit::Fh { fit, .. } => {
            let mut rows = fh::eblup(&input, &fit);
            rows.extend(fh::synthetic_predict(&o_ids, &x_out, &fit)?);
            rows
        }
        SavedFit::Sfh { fit, rho_bounds, .. } => {
            let path = a.weights.as_deref().ok_or_else(|| Error::Invalid("--weights is required for a spatial fit".into()))?;
            let full_w = load_weights(path)?;
            let sinput = spatial_input(&table, &full_w, rho_bounds)?;
            let mut rows = sfh::seblup(&sinput, &fit)?;
            rows.extend(sfh::seblup_out_of_sample(&full_w, &o_ids, &x_out, &sinput, &fit)?);
            rows
        }
    };
    if !a.no_clamp {
        rows.iter_mut().for_each(Prediction::clamp_unit);
    }
    let order: HashMap<&str, usize> = table.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    rows.sort_by_key(|p| order[p.area_id.as_str()]);
    write_predictions_csv(create(&a.out)?, &rows)
}

fn run_bootstrap(a: BootstrapArgs) -> Result<()> {
    let table = load_table(&a.data)?;
    let mut spec = BootstrapSpec::new(a.replicates, a.seed);
    if a.known_parameters {
        spec = spec.known_parameters();
    }
    let mse = match load_fit(&a.fit, &table)? {
        SavedFit::Fh { fit, .. } => bootstrap::bootstrap_fh(&table.sampled_input()?, &fit, &spec)?,
        SavedFit::Sfh { fit, rho_bounds, .. } => {
            let path = a.weights.as_deref().ok_or_else(|| Error::Invalid("--weights is required for a spatial fit".into()))?;
            bootstrap::bootstrap_sfh(&spatial_input(&table, &load_weights(path)?, rho_bounds)?, &fit, &spec)?
        }
    };
    mse.write_csv(create(&a.out)?)?;
    eprintln!("{} of {} replicates succeeded", mse.b_effective, mse.requested);
    Ok(())
}

fn run_pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = Config::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    let out = pipeline::run(&cfg)?;
    eprintln!("{} jobs, {} files written to {}", out.jobs.len(), out.files.len(), cfg.output_dir.display());
    Ok(())
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let spec = NationalSpec { nrow: a.nrow, ncol: a.ncol, sampled_fraction: a.sampled_fraction, seed: a.seed, ..NationalSpec::default() };
    let fx = write_national(&a.out_dir, &spec)?;
    eprintln!("{} areas, {} survey rows written to {}", fx.areas.len(), fx.survey.len(), a.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Direct(a) => run_direct(a),
        Command::Weights(a) => run_weights(a),
        Command::Moran(a) => run_moran(a),
        Command::Fit(a) => run_fit(a),
        Command::Predict(a) => run_predict(a),
        Command::Bootstrap(a) => run_bootstrap(a),
        Command::Pipeline(a) => run_pipeline(a),
        Command::Simulate(a) => run_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
