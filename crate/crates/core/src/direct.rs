//! Design-based direct estimates of area proportions from unit-level survey
//! rows.
//!
//! The point estimate is the weight-normalized (Hájek) form of the
//! Horvitz-Thompson estimator. Its variance is the with-replacement
//! first-stage cluster approximation applied to the linearized ratio.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flags::{Flag, Flags};

/// Hemoglobin level (g/dl) below which a child counts as anemic.
pub const ANEMIA_THRESHOLD_G_DL: f64 = 11.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SurveyRow {
    pub area_id: String,
    pub cluster_id: String,
    pub sampling_weight: f64,
    pub hemoglobin_g_dl: Option<f64>,
    pub height_for_age_flag_input: Option<bool>,
    pub age_months: u32,
    /// Only consulted when no precomputed stunting flag is present.
    pub height_cm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectEstimate {
    pub area_id: String,
    pub y: f64,
    pub var_y: f64,
    pub n_eff: f64,
    pub n_raw: usize,
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    Anemia,
    Stunting,
}

pub fn anemia_indicator(row: &SurveyRow) -> Result<bool> {
    let hb = row.hemoglobin_g_dl.ok_or_else(|| Error::MissingMeasurement {
        area_id: row.area_id.clone(),
        field: "hemoglobin",
    })?;
    Ok(hb < ANEMIA_THRESHOLD_G_DL)
}

/// Height-for-age cutoffs by age in months, loaded from a user-supplied
/// percentile table (`age_months,height_cm`).
#[derive(Debug, Clone, Default)]
pub struct GrowthTable {
    cutoffs: BTreeMap<u32, f64>,
}

impl GrowthTable {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, f64)>) -> Self {
        Self { cutoffs: pairs.into_iter().collect() }
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Rec {
            age_months: u32,
            height_cm: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut cutoffs = BTreeMap::new();
        for rec in rdr.deserialize() {
            let rec: Rec = rec?;
            if !(rec.height_cm > 0.0) {
                return Err(Error::Invalid(format!("non-positive cutoff at age {}", rec.age_months)));
            }
            cutoffs.insert(rec.age_months, rec.height_cm);
        }
        if cutoffs.is_empty() {
            return Err(Error::Invalid("empty growth table".into()));
        }
        Ok(Self { cutoffs })
    }

    /// Cutoff for the greatest tabulated age not above `age_months`.
    pub fn cutoff(&self, age_months: u32) -> Option<f64> {
        self.cutoffs.range(..=age_months).next_back().map(|(_, v)| *v)
    }
}

/// Precomputed flag wins; otherwise height is compared against the table.
pub fn stunting_indicator(row: &SurveyRow, table: Option<&GrowthTable>) -> Result<bool> {
    if let Some(flag) = row.height_for_age_flag_input {
        return Ok(flag);
    }
    let missing = || Error::MissingMeasurement { area_id: row.area_id.clone(), field: "stunted" };
    let (Some(height), Some(table)) = (row.height_cm, table) else {
        return Err(missing());
    };
    let cutoff = table.cutoff(row.age_months).ok_or_else(missing)?;
    Ok(height < cutoff)
}

struct Linearized {
    y: f64,
    var: Option<f64>,
    n_raw: usize,
}

fn linearize(rows: &[SurveyRow], indicator: &[bool]) -> Result<Linearized> {
    let first = rows.first().ok_or(Error::EmptyArea)?;
    if rows.len() != indicator.len() {
        return Err(Error::Dimension(format!("{} rows but {} indicators", rows.len(), indicator.len())));
    }
    let mut total_w = 0.0;
    let mut total_wi = 0.0;
    for row in rows {
        if row.area_id != first.area_id {
            return Err(Error::MixedAreas(first.area_id.clone(), row.area_id.clone()));
        }
        if !(row.sampling_weight > 0.0) || !row.sampling_weight.is_finite() {
            return Err(Error::InvalidWeight { area_id: row.area_id.clone(), weight: row.sampling_weight });
        }
    }
    for (row, &ind) in rows.iter().zip(indicator) {
        total_w += row.sampling_weight;
        if ind {
            total_wi += row.sampling_weight;
        }
    }
    let y = (total_wi / total_w).clamp(0.0, 1.0);

    // cluster totals of the linearized variable z_k = w_k (I_k - y) / W
    let mut clusters: BTreeMap<&str, f64> = BTreeMap::new();
    for (row, &ind) in rows.iter().zip(indicator) {
        let z = row.sampling_weight * (f64::from(u8::from(ind)) - y) / total_w;
        *clusters.entry(row.cluster_id.as_str()).or_insert(0.0) += z;
    }
    let n_c = clusters.len();
    let var = if n_c < 2 {
        None
    } else {
        let mean = clusters.values().sum::<f64>() / n_c as f64;
        let ss: f64 = clusters.values().map(|t| (t - mean).powi(2)).sum();
        Some(n_c as f64 / (n_c as f64 - 1.0) * ss)
    };
    Ok(Linearized { y, var, n_raw: rows.len() })
}

fn effective_n(y: f64, var: f64, n_raw: usize) -> f64 {
    let pq = y * (1.0 - y);
    if var > 0.0 && pq > 0.0 {
        pq / var
    } else {
        n_raw as f64
    }
}

/// Hájek proportion and its linearized cluster variance for one area.
pub fn ht_proportion(rows: &[SurveyRow], indicator: &[bool]) -> Result<DirectEstimate> {
    let lin = linearize(rows, indicator)?;
    let area_id = rows[0].area_id.clone();
    let var = lin.var.ok_or_else(|| Error::SingleCluster(area_id.clone()))?;
    let mut flags = Flags::new();
    if var == 0.0 {
        flags.insert(Flag::ZeroVariance);
    }
    Ok(DirectEstimate {
        area_id,
        y: lin.y,
        var_y: var,
        n_eff: effective_n(lin.y, var, lin.n_raw),
        n_raw: lin.n_raw,
        flags,
    })
}

/// Binomial variance unit used to transfer design effects between areas.
/// Smoothed so that areas with y in {0, 1} still receive a positive variance.
fn binomial_unit(y: f64, n_raw: usize) -> f64 {
    let n = n_raw as f64;
    let p = (n * y + 0.5) / (n + 1.0);
    p * (1.0 - p) / n
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    Some(if values.len() % 2 == 0 { 0.5 * (values[m - 1] + values[m]) } else { values[m] })
}

/// Direct estimates for every area present in `rows`.
///
/// Rows whose indicator cannot be evaluated are skipped. Areas with a single
/// cluster, or with zero estimated variance, get
/// `var_y = median design effect * p(1-p)/n_raw` where the median runs over
/// the areas of the same stratum (all areas when `strata` is `None`).
pub fn direct_estimates<F>(rows: &[SurveyRow], indicator: F, strata: Option<&HashMap<String, u8>>) -> Result<Vec<DirectEstimate>>
where
    F: Fn(&SurveyRow) -> Result<bool>,
{
    let mut by_area: BTreeMap<&str, (Vec<SurveyRow>, Vec<bool>)> = BTreeMap::new();
    for row in rows {
        let Ok(ind) = indicator(row) else { continue };
        let entry = by_area.entry(row.area_id.as_str()).or_default();
        entry.0.push(row.clone());
        entry.1.push(ind);
    }

    let mut prelim = Vec::with_capacity(by_area.len());
    for (area, (rows, ind)) in &by_area {
        let lin = linearize(rows, ind)?;
        prelim.push((area.to_string(), lin));
    }

    let stratum_of = |id: &str| strata.and_then(|s| s.get(id).copied()).unwrap_or(0);
    let mut deffs: HashMap<u8, Vec<f64>> = HashMap::new();
    for (id, lin) in &prelim {
        if let Some(var) = lin.var {
            if var > 0.0 && lin.y > 0.0 && lin.y < 1.0 {
                let unit = lin.y * (1.0 - lin.y) / lin.n_raw as f64;
                deffs.entry(stratum_of(id)).or_default().push(var / unit);
            }
        }
    }
    let mut all: Vec<f64> = deffs.values().flatten().copied().collect();
    let global = median(&mut all).unwrap_or(1.0);
    let medians: HashMap<u8, f64> = deffs
        .into_iter()
        .map(|(s, mut v)| (s, median(&mut v).unwrap_or(global)))
        .collect();

    Ok(prelim
        .into_iter()
        .map(|(area_id, lin)| {
            let mut flags = Flags::new();
            let var = match lin.var {
                Some(v) if v > 0.0 => v,
                other => {
                    flags.insert(if other.is_none() { Flag::SingleCluster } else { Flag::ZeroVariance });
                    flags.insert(Flag::VarianceImputed);
                    let deff = medians.get(&stratum_of(&area_id)).copied().unwrap_or(global);
                    deff * binomial_unit(lin.y, lin.n_raw)
                }
            };
            DirectEstimate {
                area_id,
                y: lin.y,
                var_y: var,
                n_eff: effective_n(lin.y, var, lin.n_raw),
                n_raw: lin.n_raw,
                flags,
            }
        })
        .collect())
}

#[derive(Debug, Deserialize)]
struct SurveyRecord {
    area_id: String,
    cluster_id: String,
    weight: f64,
    hemoglobin: Option<f64>,
    stunted: Option<String>,
    age_months: u32,
    #[serde(default)]
    height_cm: Option<f64>,
}

fn parse_bool(area: &str, s: &str) -> Result<Option<bool>> {
    match s.trim() {
        "" => Ok(None),
        "1" | "true" | "TRUE" | "True" => Ok(Some(true)),
        "0" | "false" | "FALSE" | "False" => Ok(Some(false)),
        other => Err(Error::Invalid(format!("bad stunted value `{other}` in area {area}"))),
    }
}

/// Reads `area_id,cluster_id,weight,hemoglobin,stunted,age_months[,height_cm]`.
pub fn read_survey_csv<R: Read>(reader: R) -> Result<Vec<SurveyRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let rec: SurveyRecord = rec?;
        let stunted = match rec.stunted.as_deref() {
            Some(s) => parse_bool(&rec.area_id, s)?,
            None => None,
        };
        if !(rec.weight > 0.0) {
            return Err(Error::InvalidWeight { area_id: rec.area_id, weight: rec.weight });
        }
        out.push(SurveyRow {
            area_id: rec.area_id,
            cluster_id: rec.cluster_id,
            sampling_weight: rec.weight,
            hemoglobin_g_dl: rec.hemoglobin,
            height_for_age_flag_input: stunted,
            age_months: rec.age_months,
            height_cm: rec.height_cm,
        });
    }
    Ok(out)
}

pub fn write_survey_csv<W: Write>(writer: W, rows: &[SurveyRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["area_id", "cluster_id", "weight", "hemoglobin", "stunted", "age_months"])?;
    for r in rows {
        wtr.write_record([
            r.area_id.clone(),
            r.cluster_id.clone(),
            r.sampling_weight.to_string(),
            r.hemoglobin_g_dl.map(|v| v.to_string()).unwrap_or_default(),
            r.height_for_age_flag_input.map(|b| u8::from(b).to_string()).unwrap_or_default(),
            r.age_months.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes `area_id,y,var_y,n_eff,n_raw,flags`.
pub fn write_direct_csv<W: Write>(writer: W, estimates: &[DirectEstimate]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["area_id", "y", "var_y", "n_eff", "n_raw", "flags"])?;
    for e in estimates {
        wtr.write_record([
            e.area_id.clone(),
            e.y.to_string(),
            e.var_y.to_string(),
            e.n_eff.to_string(),
            e.n_raw.to_string(),
            e.flags.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_direct_csv<R: Read>(reader: R) -> Result<Vec<DirectEstimate>> {
    #[derive(Deserialize)]
    struct Rec {
        area_id: String,
        y: f64,
        var_y: f64,
        n_eff: f64,
        n_raw: usize,
        flags: String,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .map(|r| {
            let r: Rec = r?;
            Ok(DirectEstimate {
                area_id: r.area_id,
                y: r.y,
                var_y: r.var_y,
                n_eff: r.n_eff,
                n_raw: r.n_raw,
                flags: Flags::parse(&r.flags),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(area: &str, cluster: &str, w: f64, hb: Option<f64>) -> SurveyRow {
        SurveyRow {
            area_id: area.into(),
            cluster_id: cluster.into(),
            sampling_weight: w,
            hemoglobin_g_dl: hb,
            height_for_age_flag_input: None,
            age_months: 24,
            height_cm: None,
        }
    }

    #[test]
    fn anemia_threshold_is_strict() {
        assert!(anemia_indicator(&row("a", "c", 1.0, Some(10.9))).unwrap());
        assert!(!anemia_indicator(&row("a", "c", 1.0, Some(11.0))).unwrap());
        assert!(!anemia_indicator(&row("a", "c", 1.0, Some(13.2))).unwrap());
        assert!(matches!(
            anemia_indicator(&row("a", "c", 1.0, None)),
            Err(Error::MissingMeasurement { .. })
        ));
    }

    #[test]
    fn equal_weights_give_sample_mean() {
        let rows: Vec<_> = (0..4).map(|i| row("a", &format!("c{i}"), 1.0, None)).collect();
        let est = ht_proportion(&rows, &[true, true, false, false]).unwrap();
        assert_eq!(est.y, 0.5);
        assert!(est.var_y > 0.0);
    }

    #[test]
    fn weighted_mean_by_hand() {
        let rows = vec![row("a", "c1", 3.0, None), row("a", "c2", 1.0, None)];
        let est = ht_proportion(&rows, &[true, false]).unwrap();
        assert_eq!(est.y, 0.75);
    }

    #[test]
    fn single_cluster_is_reported() {
        let rows = vec![row("a", "c1", 1.0, None), row("a", "c1", 2.0, None)];
        assert!(matches!(ht_proportion(&rows, &[true, false]), Err(Error::SingleCluster(_))));
        assert!(matches!(ht_proportion(&[], &[]), Err(Error::EmptyArea)));
    }

    #[test]
    fn mixed_areas_rejected() {
        let rows = vec![row("a", "c1", 1.0, None), row("b", "c2", 2.0, None)];
        assert!(matches!(ht_proportion(&rows, &[true, false]), Err(Error::MixedAreas(..))));
    }

    #[test]
    fn batch_imputes_single_cluster_variance() {
        let mut rows = Vec::new();
        for (i, hb) in [10.0, 12.0, 10.5, 12.5, 13.0, 10.0].iter().enumerate() {
            rows.push(row("a", &format!("c{}", i % 3), 1.0, Some(*hb)));
        }
        rows.push(row("b", "k1", 1.0, Some(10.0)));
        rows.push(row("b", "k1", 1.0, Some(12.0)));
        let est = direct_estimates(&rows, anemia_indicator, None).unwrap();
        assert_eq!(est.len(), 2);
        let b = &est[1];
        assert!(b.flags.contains(Flag::SingleCluster));
        assert!(b.flags.contains(Flag::VarianceImputed));
        let a = &est[0];
        let deff = a.var_y / (a.y * (1.0 - a.y) / 6.0);
        let expected = deff * binomial_unit(0.5, 2);
        assert!((b.var_y - expected).abs() < 1e-15);
    }

    #[test]
    fn growth_table_lookup() {
        let t = GrowthTable::from_pairs([(0, 45.0), (12, 70.0), (24, 80.0)]);
        assert_eq!(t.cutoff(13), Some(70.0));
        let mut r = row("a", "c", 1.0, None);
        r.height_cm = Some(75.0);
        r.age_months = 30;
        assert!(stunting_indicator(&r, Some(&t)).unwrap());
        r.height_for_age_flag_input = Some(false);
        assert!(!stunting_indicator(&r, Some(&t)).unwrap());
    }

    #[test]
    fn survey_csv_missing_fields() {
        let data = "area_id,cluster_id,weight,hemoglobin,stunted,age_months\n\
                    010101,c1,2.5,10.2,,12\n010101,c2,1.5,,1,30\n";
        let rows = read_survey_csv(data.as_bytes()).unwrap();
        assert_eq!(rows[0].hemoglobin_g_dl, Some(10.2));
        assert_eq!(rows[0].height_for_age_flag_input, None);
        assert_eq!(rows[1].hemoglobin_g_dl, None);
        assert_eq!(rows[1].height_for_age_flag_input, Some(true));
    }
}
