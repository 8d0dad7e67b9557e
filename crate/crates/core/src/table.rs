//! Area tables, prediction rows and poverty stratification.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fh::FhInput;
use crate::flags::{Flag, Flags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Direct,
    Eblup,
    Seblup,
    Synthetic,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Direct => "direct",
            EstimatorKind::Eblup => "eblup",
            EstimatorKind::Seblup => "seblup",
            EstimatorKind::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One predicted value for one area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub area_id: String,
    pub stratum: Option<u8>,
    pub kind: EstimatorKind,
    /// Value after clamping to [0, 1] (when clamping was requested).
    pub value: f64,
    pub raw_value: f64,
    pub gamma: Option<f64>,
    pub mse: Option<f64>,
    pub mse_method: Option<String>,
    pub flags: Flags,
}

impl Prediction {
    pub fn new(area_id: impl Into<String>, kind: EstimatorKind, value: f64) -> Self {
        Self {
            area_id: area_id.into(),
            stratum: None,
            kind,
            value,
            raw_value: value,
            gamma: None,
            mse: None,
            mse_method: None,
            flags: Flags::new(),
        }
    }

    /// Clamps `value` into the unit interval, keeping `raw_value` and flagging.
    pub fn clamp_unit(&mut self) {
        if !(0.0..=1.0).contains(&self.raw_value) {
            self.value = self.raw_value.clamp(0.0, 1.0);
            self.flags.insert(Flag::Clamped);
        } else {
            self.value = self.raw_value;
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Long-format prediction CSV:
/// `area_id,stratum,estimator_kind,value,raw_value,gamma,mse,mse_method,flags`.
pub fn write_predictions_csv<W: Write>(writer: W, rows: &[Prediction]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["area_id", "stratum", "estimator_kind", "value", "raw_value", "gamma", "mse", "mse_method", "flags"])?;
    for r in rows {
        wtr.write_record([
            r.area_id.clone(),
            r.stratum.map(|s| s.to_string()).unwrap_or_default(),
            r.kind.to_string(),
            r.value.to_string(),
            r.raw_value.to_string(),
            opt(r.gamma),
            opt(r.mse),
            r.mse_method.clone().unwrap_or_default(),
            r.flags.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_predictions_csv<R: Read>(reader: R) -> Result<Vec<Prediction>> {
    #[derive(Deserialize)]
    struct Rec {
        area_id: String,
        stratum: Option<u8>,
        estimator_kind: EstimatorKind,
        value: f64,
        raw_value: f64,
        gamma: Option<f64>,
        mse: Option<f64>,
        mse_method: Option<String>,
        flags: Option<String>,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .map(|r| {
            let r: Rec = r?;
            Ok(Prediction {
                area_id: r.area_id,
                stratum: r.stratum,
                kind: r.estimator_kind,
                value: r.value,
                raw_value: r.raw_value,
                gamma: r.gamma,
                mse: r.mse,
                mse_method: r.mse_method.filter(|s| !s.is_empty()),
                flags: Flags::parse(r.flags.as_deref().unwrap_or("")),
            })
        })
        .collect()
}

/// One row of the area-level input table.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaRow {
    pub area_id: String,
    /// Direct estimates and sampling variances, one per configured response.
    pub responses: Vec<Option<(f64, f64)>>,
    pub covariates: Vec<f64>,
    pub lat: f64,
    pub lon: f64,
    pub altitude_km: f64,
    pub poverty_pct: Option<f64>,
}

impl AreaRow {
    pub fn sampled(&self, response: usize) -> bool {
        self.responses[response].is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaTable {
    pub response_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub rows: Vec<AreaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseColumns {
    pub name: String,
    pub y: String,
    pub var: String,
}

impl AreaTable {
    /// Reads a CSV with `area_id`, `lat`, `lon`, the poverty column, every
    /// listed covariate and a `(y, var)` column pair per response. Empty
    /// cells mean missing; an area is sampled for a response exactly when
    /// both of its cells are present. An `altitude_km` column is optional.
    pub fn read_csv<R: Read>(
        reader: R,
        poverty_column: &str,
        covariates: &[String],
        responses: &[ResponseColumns],
    ) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Invalid(format!("missing column `{name}`")))
        };
        let id_c = col("area_id")?;
        let lat_c = col("lat")?;
        let lon_c = col("lon")?;
        let alt_c = headers.iter().position(|h| h == "altitude_km");
        let pov_c = col(poverty_column)?;
        let cov_c: Vec<usize> = covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;
        let resp_c: Vec<(usize, usize)> = responses
            .iter()
            .map(|r| Ok((col(&r.y)?, col(&r.var)?)))
            .collect::<Result<_>>()?;

        let parse = |s: &str, what: &str, id: &str| -> Result<Option<f64>> {
            let t = s.trim();
            if t.is_empty() {
                return Ok(None);
            }
            t.parse::<f64>()
                .map(Some)
                .map_err(|_| Error::Invalid(format!("bad {what} `{t}` for area {id}")))
        };

        let mut seen = HashSet::new();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let id = rec[id_c].trim().to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::Invalid(format!("duplicate area_id {id}")));
            }
            let req = |c: usize, what: &str| -> Result<f64> {
                parse(&rec[c], what, &id)?.ok_or_else(|| Error::Invalid(format!("missing {what} for area {id}")))
            };
            let covs = cov_c
                .iter()
                .zip(covariates)
                .map(|(&c, name)| req(c, name))
                .collect::<Result<Vec<_>>>()?;
            let mut resp = Vec::with_capacity(resp_c.len());
            for (&(yc, vc), r) in resp_c.iter().zip(responses) {
                let y = parse(&rec[yc], &r.y, &id)?;
                let v = parse(&rec[vc], &r.var, &id)?;
                resp.push(match (y, v) {
                    (Some(y), Some(v)) => {
                        if v < 0.0 {
                            return Err(Error::Invalid(format!("negative variance for area {id}")));
                        }
                        Some((y, v))
                    }
                    (None, None) => None,
                    _ => {
                        return Err(Error::Invalid(format!(
                            "area {id}: `{}` and `{}` must be both present or both empty",
                            r.y, r.var
                        )))
                    }
                });
            }
            let poverty = parse(&rec[pov_c], poverty_column, &id)?;
            if let Some(p) = poverty {
                if !(0.0..=100.0).contains(&p) {
                    return Err(Error::Invalid(format!("poverty_pct {p} out of range for area {id}")));
                }
            }
            rows.push(AreaRow {
                area_id: id.clone(),
                responses: resp,
                covariates: covs,
                lat: req(lat_c, "lat")?,
                lon: req(lon_c, "lon")?,
                altitude_km: match alt_c {
                    Some(c) => parse(&rec[c], "altitude_km", &id)?.unwrap_or(0.0),
                    None => 0.0,
                },
                poverty_pct: poverty,
            });
        }
        Ok(Self {
            response_names: responses.iter().map(|r| r.name.clone()).collect(),
            covariate_names: covariates.to_vec(),
            rows,
        })
    }
}

/// Single-response model data: `area_id`, a `(y, var)` column pair (both
/// empty for unsampled areas) and covariates. The design gets a leading
/// intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTable {
    pub ids: Vec<String>,
    pub responses: Vec<Option<(f64, f64)>>,
    pub covariate_names: Vec<String>,
    pub covariates: Vec<Vec<f64>>,
}

impl ModelTable {
    pub fn read_csv<R: Read>(reader: R, y: &str, var: &str, covariates: &[String]) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Invalid(format!("missing column `{name}`")))
        };
        let (id_c, y_c, v_c) = (col("area_id")?, col(y)?, col(var)?);
        let cov_c: Vec<usize> = covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;
        let mut out = Self { ids: Vec::new(), responses: Vec::new(), covariate_names: covariates.to_vec(), covariates: Vec::new() };
        let mut seen = HashSet::new();
        for rec in rdr.records() {
            let rec = rec?;
            let id = rec[id_c].trim().to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::Invalid(format!("duplicate area_id {id}")));
            }
            let num = |c: usize| -> Result<Option<f64>> {
                let t = rec[c].trim();
                if t.is_empty() {
                    return Ok(None);
                }
                t.parse().map(Some).map_err(|_| Error::Invalid(format!("bad number `{t}` for area {id}")))
            };
            let resp = match (num(y_c)?, num(v_c)?) {
                (Some(y), Some(v)) if v >= 0.0 => Some((y, v)),
                (None, None) => None,
                _ => return Err(Error::Invalid(format!("area {id}: need both `{y}` and a nonnegative `{var}`, or neither"))),
            };
            let covs = cov_c
                .iter()
                .map(|&c| num(c)?.ok_or_else(|| Error::Invalid(format!("missing covariate for area {id}"))))
                .collect::<Result<Vec<_>>>()?;
            out.ids.push(id);
            out.responses.push(resp);
            out.covariates.push(covs);
        }
        Ok(out)
    }

    pub fn design_names(&self) -> Vec<String> {
        std::iter::once("(intercept)".to_string()).chain(self.covariate_names.iter().cloned()).collect()
    }

    fn design(&self, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.covariate_names.len() + 1, |i, j| if j == 0 { 1.0 } else { self.covariates[rows[i]][j - 1] })
    }

    fn rows(&self, sampled: bool) -> Vec<usize> {
        (0..self.ids.len()).filter(|&i| self.responses[i].is_some() == sampled).collect()
    }

    /// Model input over the sampled areas.
    pub fn sampled_input(&self) -> Result<FhInput> {
        let rows = self.rows(true);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.responses[i].unwrap().0));
        let v = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.responses[i].unwrap().1));
        FhInput::new(y, self.design(&rows), v)?.with_ids(rows.iter().map(|&i| self.ids[i].clone()).collect())
    }

    /// Ids and design of the unsampled areas.
    pub fn unsampled(&self) -> (Vec<String>, DMatrix<f64>) {
        let rows = self.rows(false);
        (rows.iter().map(|&i| self.ids[i].clone()).collect(), self.design(&rows))
    }
}

pub const STRATUM_BREAKS: [f64; 2] = [30.0, 55.0];

/// Stratum 1 below 30% poverty, 2 on [30, 55), 3 from 55 upward.
pub fn stratum_of(poverty_pct: f64) -> u8 {
    if poverty_pct < STRATUM_BREAKS[0] {
        1
    } else if poverty_pct < STRATUM_BREAKS[1] {
        2
    } else {
        3
    }
}

pub fn stratify(table: &AreaTable) -> Result<Vec<u8>> {
    table
        .rows
        .iter()
        .map(|r| {
            r.poverty_pct
                .map(stratum_of)
                .ok_or_else(|| Error::MissingPoverty(r.area_id.clone()))
        })
        .collect()
}
