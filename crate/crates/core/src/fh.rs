//! Basic Fay-Herriot area-level model.
//!
//! `Y_i = X_i beta + u_i + e_i` with `u_i ~ N(0, sigma_u^2)` and known
//! sampling variances `e_i ~ N(0, sigma_i^2)`. The covariance `V` is
//! diagonal, so every likelihood term is accumulated in `O(D p^2)` without
//! forming dense `D x D` matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::optim::{brent_root, golden_max};
use crate::table::{EstimatorKind, Prediction};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Ml,
    Reml,
    Moments,
    FhIterative,
}

impl Method {
    pub fn likelihood(self) -> Option<Likelihood> {
        match self {
            Method::Ml => Some(Likelihood::Ml),
            Method::Reml => Some(Likelihood::Reml),
            _ => None,
        }
    }
}

/// The two Gaussian likelihoods available for variance components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Likelihood {
    Ml,
    Reml,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Relative tolerance on the variance component.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FhInput {
    pub ids: Vec<String>,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub sigma2_e: DVector<f64>,
}

impl FhInput {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, sigma2_e: DVector<f64>) -> Result<Self> {
        Self::with_zero_variances(y, x, sigma2_e, 0)
    }

    /// Like [`FhInput::new`] but tolerating up to `max_zero_var` areas with
    /// zero sampling variance (census-complete areas).
    pub fn with_zero_variances(y: DVector<f64>, x: DMatrix<f64>, sigma2_e: DVector<f64>, max_zero_var: usize) -> Result<Self> {
        let d = y.len();
        if x.nrows() != d || sigma2_e.len() != d {
            return Err(Error::Dimension(format!(
                "y has {d} rows, X has {}, sigma2_e has {}",
                x.nrows(),
                sigma2_e.len()
            )));
        }
        let p = x.ncols();
        if p == 0 || d <= p {
            return Err(Error::SingularDesign);
        }
        if y.iter().chain(x.iter()).chain(sigma2_e.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite input".into()));
        }
        if sigma2_e.iter().any(|&s| s < 0.0) {
            return Err(Error::Invalid("negative sampling variance".into()));
        }
        let zeros = sigma2_e.iter().filter(|&&s| s == 0.0).count();
        if zeros > max_zero_var {
            return Err(Error::ZeroSamplingVariance(zeros, max_zero_var));
        }
        let sv = x.clone().svd(false, false).singular_values;
        let smax = sv.max();
        if !(smax > 0.0) || sv.min() <= smax * 1e-10 {
            return Err(Error::SingularDesign);
        }
        let ids = (0..d).map(|i| i.to_string()).collect();
        Ok(Self { ids, y, x, sigma2_e })
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.d() {
            return Err(Error::Dimension(format!("{} ids for {} areas", ids.len(), self.d())));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn d(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Same design and variances, different response.
    pub fn with_response(&self, y: DVector<f64>) -> Self {
        Self { ids: self.ids.clone(), y, x: self.x.clone(), sigma2_e: self.sigma2_e.clone() }
    }

    fn total_variance(&self, sigma2_u: f64) -> Result<DVector<f64>> {
        let v = self.sigma2_e.map(|s| s + sigma2_u);
        if let Some(i) = v.iter().position(|&vi| !(vi > 0.0)) {
            return Err(Error::ZeroTotalVariance(i));
        }
        Ok(v)
    }

    fn response_scale(&self) -> f64 {
        let d = self.d() as f64;
        let mean = self.y.sum() / d;
        self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d - 1.0)
    }
}

/// Weighted least squares quantities at a fixed diagonal covariance.
struct Gls {
    v: DVector<f64>,
    beta: DVector<f64>,
    resid: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    quad: f64,
}

fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let p = x.ncols();
    let mut c = DMatrix::zeros(p, p);
    for i in 0..x.nrows() {
        let wi = w[i];
        for a in 0..p {
            let xa = x[(i, a)] * wi;
            for b in a..p {
                c[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            c[(a, b)] = c[(b, a)];
        }
    }
    c
}

fn gls_at(input: &FhInput, v: DVector<f64>) -> Result<Gls> {
    let inv = v.map(|vi| 1.0 / vi);
    let c = weighted_gram(&input.x, &inv);
    let chol = Cholesky::new(c).ok_or(Error::SingularDesign)?;
    let xty = input.x.tr_mul(&input.y.component_mul(&inv));
    let beta = chol.solve(&xty);
    let resid = &input.y - &input.x * &beta;
    let quad = resid.iter().zip(inv.iter()).map(|(r, w)| r * r * w).sum();
    Ok(Gls { v, beta, resid, chol, quad })
}

fn gls(input: &FhInput, sigma2_u: f64) -> Result<Gls> {
    gls_at(input, input.total_variance(sigma2_u)?)
}

/// Generalized least squares coefficients at a given `sigma_u^2`.
pub fn gls_beta(input: &FhInput, sigma2_u: f64) -> Result<DVector<f64>> {
    if sigma2_u < 0.0 {
        return Err(Error::Invalid("negative sigma_u^2".into()));
    }
    Ok(gls(input, sigma2_u)?.beta)
}

fn log_det_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Profile log-likelihood (beta at its GLS value) and its derivative in
/// `sigma_u^2`.
pub fn profile_loglik(input: &FhInput, sigma2_u: f64, lik: Likelihood) -> Result<(f64, f64)> {
    let g = gls(input, sigma2_u)?;
    Ok(profile_from_gls(input, &g, lik))
}

fn profile_from_gls(input: &FhInput, g: &Gls, lik: Likelihood) -> (f64, f64) {
    let d = input.d() as f64;
    let p = input.p() as f64;
    let logdet_v: f64 = g.v.iter().map(|v| v.ln()).sum();
    let sum_inv: f64 = g.v.iter().map(|v| 1.0 / v).sum();
    let quad2: f64 = g.resid.iter().zip(g.v.iter()).map(|(r, v)| r * r / (v * v)).sum();
    match lik {
        Likelihood::Ml => {
            let ll = -0.5 * (d * LN_2PI + logdet_v + g.quad);
            (ll, 0.5 * (quad2 - sum_inv))
        }
        Likelihood::Reml => {
            let ll = -0.5 * ((d - p) * LN_2PI + logdet_v + log_det_chol(&g.chol) + g.quad);
            let k2 = weighted_gram(&input.x, &g.v.map(|v| 1.0 / (v * v)));
            let tr_p = sum_inv - g.chol.solve(&k2).trace();
            (ll, 0.5 * (quad2 - tr_p))
        }
    }
}

/// Full Gaussian log-likelihood `l(beta, sigma_u^2)` (not profiled) and its
/// gradient `(d/d beta, d/d sigma_u^2)`.
pub fn ml_loglik_full(input: &FhInput, beta: &DVector<f64>, sigma2_u: f64) -> Result<(f64, DVector<f64>, f64)> {
    if beta.len() != input.p() {
        return Err(Error::ColumnMismatch { expected: input.p(), found: beta.len() });
    }
    let v = input.total_variance(sigma2_u)?;
    let r = &input.y - &input.x * beta;
    let d = input.d() as f64;
    let logdet: f64 = v.iter().map(|x| x.ln()).sum();
    let quad: f64 = r.iter().zip(v.iter()).map(|(ri, vi)| ri * ri / vi).sum();
    let ll = -0.5 * (d * LN_2PI + logdet + quad);
    let grad_beta = input.x.tr_mul(&r.component_div(&v));
    let grad_s = 0.5 * r.iter().zip(v.iter()).map(|(ri, vi)| ri * ri / (vi * vi) - 1.0 / vi).sum::<f64>();
    Ok((ll, grad_beta, grad_s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub sigma2: f64,
    pub objective: Option<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FhFit {
    pub method: Method,
    #[serde(with = "crate::serde_na::dvec")]
    pub beta: DVector<f64>,
    /// `(X' V^-1 X)^-1` at the estimate.
    #[serde(with = "crate::serde_na::dmat")]
    pub beta_cov: DMatrix<f64>,
    pub sigma2_u: f64,
    pub sigma2_u_se: Option<f64>,
    pub loglik: Option<f64>,
    #[serde(with = "crate::serde_na::dvec")]
    pub gamma: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<TracePoint>,
}

impl FhFit {
    pub fn beta_se(&self) -> DVector<f64> {
        self.beta_cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Two-sided normal p-values for the coefficients.
    pub fn beta_p_values(&self) -> DVector<f64> {
        let n = Normal::standard();
        let se = self.beta_se();
        DVector::from_iterator(
            self.beta.len(),
            self.beta.iter().zip(se.iter()).map(|(b, s)| {
                if *s > 0.0 {
                    2.0 * (1.0 - n.cdf((b / s).abs()))
                } else {
                    0.0
                }
            }),
        )
    }
}

fn shrinkage(sigma2_u: f64, sigma2_e: &DVector<f64>) -> DVector<f64> {
    sigma2_e.map(|s| if s == 0.0 { 1.0 } else { sigma2_u / (sigma2_u + s) })
}

fn finish(input: &FhInput, method: Method, sigma2_u: f64, loglik: Option<f64>, converged: bool, iterations: usize, trace: Vec<TracePoint>) -> Result<FhFit> {
    let g = gls(input, sigma2_u)?;
    let p = input.p();
    let beta_cov = g.chol.solve(&DMatrix::identity(p, p));
    let sigma2_u_se = match method.likelihood() {
        Some(Likelihood::Ml) => {
            let info = 0.5 * g.v.iter().map(|v| 1.0 / (v * v)).sum::<f64>();
            Some((1.0 / info).sqrt())
        }
        Some(Likelihood::Reml) => {
            let k2 = weighted_gram(&input.x, &g.v.map(|v| 1.0 / (v * v)));
            let k3 = weighted_gram(&input.x, &g.v.map(|v| 1.0 / (v * v * v)));
            let ck2 = g.chol.solve(&k2);
            let tr_p2 = g.v.iter().map(|v| 1.0 / (v * v)).sum::<f64>() - 2.0 * g.chol.solve(&k3).trace() + (&ck2 * &ck2).trace();
            Some((2.0 / tr_p2).sqrt())
        }
        None => None,
    };
    Ok(FhFit {
        method,
        beta: g.beta,
        beta_cov,
        sigma2_u,
        sigma2_u_se,
        loglik,
        gamma: shrinkage(sigma2_u, &input.sigma2_e),
        converged,
        iterations,
        trace,
    })
}

pub(crate) struct Maximum1d {
    pub x: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TracePoint>,
}

/// Maximizes a profile objective over `[0, inf)` given a callback returning
/// `(objective, derivative)`.
///
/// The score is scanned on a quadratic grid over `[lower, upper]` (upper is
/// doubled while the score stays positive), every `+ -> -` sign change is
/// refined with Brent's method and the best candidate is kept. The lower
/// end is itself a candidate whenever the score there is non-positive.
/// A non-finite score anywhere switches to golden-section search on the
/// objective.
pub(crate) fn maximize_nonneg<F>(f: F, lower: f64, upper0: f64, opts: FitOptions) -> Result<Maximum1d>
where
    F: Fn(f64) -> Result<(f64, f64)>,
{
    const GRID: usize = 40;
    let mut trace = Vec::new();
    let eval = |x: f64, trace: &mut Vec<TracePoint>| -> Result<(f64, f64)> {
        let (o, s) = f(x)?;
        trace.push(TracePoint { iteration: trace.len(), sigma2: x, objective: Some(o), score: s });
        Ok((o, s))
    };

    let mut upper = upper0.max(lower * 2.0).max(f64::MIN_POSITIVE);
    let mut top = eval(upper, &mut trace)?;
    let mut extensions = 0;
    while top.1 > 0.0 && top.1.is_finite() && extensions < 60 {
        upper *= 2.0;
        top = eval(upper, &mut trace)?;
        extensions += 1;
    }

    let xs: Vec<f64> = (0..=GRID)
        .map(|k| lower + (upper - lower) * (k as f64 / GRID as f64).powi(2))
        .collect();
    let mut vals = Vec::with_capacity(xs.len());
    for &x in &xs[..GRID] {
        vals.push(eval(x, &mut trace)?);
    }
    vals.push(top);

    if vals.iter().any(|(o, s)| !o.is_finite() || !s.is_finite()) {
        let mut obj = |x: f64| f(x).map(|v| v.0).unwrap_or(f64::NEG_INFINITY);
        let (x, o, it) = golden_max(&mut obj, lower, upper, opts.tol, opts.max_iter);
        return Ok(Maximum1d { x, objective: o, iterations: it, converged: it < opts.max_iter, trace });
    }

    let mut best: Option<(f64, f64, f64)> = None;
    let mut consider = |x: f64, o: f64, s: f64| {
        if best.map_or(true, |b| o > b.1) {
            best = Some((x, o, s));
        }
    };
    if vals[0].1 <= 0.0 {
        consider(xs[0], vals[0].0, vals[0].1);
    }
    let mut iterations = 0;
    for k in 0..GRID {
        let (a, b) = (vals[k], vals[k + 1]);
        if a.1 > 0.0 && b.1 <= 0.0 {
            let mut score = |x: f64| f(x).map(|v| v.1).unwrap_or(f64::NAN);
            let root = brent_root(&mut score, xs[k], xs[k + 1], a.1, b.1, opts.tol * 1e-4, opts.max_iter)?;
            iterations += root.iterations;
            let (o, s) = eval(root.x, &mut trace)?;
            consider(root.x, o, s);
        }
    }
    let converged = top.1 <= 0.0;
    if !converged {
        consider(upper, top.0, top.1);
    }
    let (x, objective, _) = best.expect("grid always yields a candidate");
    Ok(Maximum1d { x, objective, iterations: iterations.max(1), converged, trace })
}

fn likelihood_fit(input: &FhInput, lik: Likelihood, opts: FitOptions) -> Result<FhFit> {
    let lower = if input.sigma2_e.iter().any(|&s| s == 0.0) {
        1e-12 * input.response_scale().max(f64::MIN_POSITIVE)
    } else {
        0.0
    };
    let upper = 10.0 * input.response_scale();
    let m = maximize_nonneg(|s| profile_loglik(input, s, lik), lower, upper, opts)?;
    let sigma2 = if m.x <= lower { 0.0_f64.max(lower) } else { m.x };
    let method = match lik {
        Likelihood::Ml => Method::Ml,
        Likelihood::Reml => Method::Reml,
    };
    finish(input, method, sigma2, Some(m.objective), m.converged, m.iterations, m.trace)
}

/// Maximum likelihood with beta profiled out.
pub fn fit_ml(input: &FhInput, opts: FitOptions) -> Result<FhFit> {
    likelihood_fit(input, Likelihood::Ml, opts)
}

/// Restricted maximum likelihood.
pub fn fit_reml(input: &FhInput, opts: FitOptions) -> Result<FhFit> {
    likelihood_fit(input, Likelihood::Reml, opts)
}

/// Prasad-Rao moments estimator, truncated at zero.
pub fn fit_moments(input: &FhInput) -> Result<FhFit> {
    let ols = gls_at(input, DVector::from_element(input.d(), 1.0))?;
    let xtx_inv = ols.chol.solve(&DMatrix::identity(input.p(), input.p()));
    let mut acc = 0.0;
    for i in 0..input.d() {
        let xi = input.x.row(i).transpose();
        let h = (xi.transpose() * &xtx_inv * &xi)[(0, 0)];
        acc += ols.resid[i].powi(2) - input.sigma2_e[i] * (1.0 - h);
    }
    let raw = acc / (input.d() - input.p()) as f64;
    let trace = vec![TracePoint { iteration: 0, sigma2: raw, objective: None, score: 0.0 }];
    finish(input, Method::Moments, raw.max(0.0), None, true, 1, trace)
}

/// Fay-Herriot iterative estimator: root of
/// `sum (Y_i - X_i beta*)^2 / (sigma_u^2 + sigma_i^2) = D - p`.
pub fn fit_fh_iterative(input: &FhInput, opts: FitOptions) -> Result<FhFit> {
    let target = (input.d() - input.p()) as f64;
    let mut trace = Vec::new();
    let eq = |s: f64, trace: &mut Vec<TracePoint>| -> Result<f64> {
        let r = gls(input, s)?.quad - target;
        trace.push(TracePoint { iteration: trace.len(), sigma2: s, objective: None, score: r });
        Ok(r)
    };
    let lower = if input.sigma2_e.iter().any(|&s| s == 0.0) {
        1e-12 * input.response_scale().max(f64::MIN_POSITIVE)
    } else {
        0.0
    };
    let f0 = eq(lower, &mut trace)?;
    if f0 <= 0.0 {
        return finish(input, Method::FhIterative, lower, None, true, 1, trace);
    }
    let mut upper = (10.0 * input.response_scale()).max(lower * 2.0).max(f64::MIN_POSITIVE);
    let mut fu = eq(upper, &mut trace)?;
    let mut ext = 0;
    while fu > 0.0 {
        ext += 1;
        if ext > 200 {
            return Err(Error::NoConvergence(ext));
        }
        upper *= 2.0;
        fu = eq(upper, &mut trace)?;
    }
    let root = {
        let mut f = |s: f64| gls(input, s).map(|g| g.quad - target).unwrap_or(f64::NAN);
        brent_root(&mut f, lower, upper, f0, fu, opts.tol * 1e-4, opts.max_iter)?
    };
    trace.push(TracePoint { iteration: trace.len(), sigma2: root.x, objective: None, score: root.fx });
    finish(input, Method::FhIterative, root.x, None, true, root.iterations, trace)
}

pub fn fit(input: &FhInput, method: Method, opts: FitOptions) -> Result<FhFit> {
    match method {
        Method::Ml => fit_ml(input, opts),
        Method::Reml => fit_reml(input, opts),
        Method::Moments => fit_moments(input),
        Method::FhIterative => fit_fh_iterative(input, opts),
    }
}

/// Refit with covariates chosen by backward elimination: the least
/// significant non-protected coefficient is dropped while its p-value is at
/// least `threshold`. Returns kept column indices and the final fit.
pub fn backward_eliminate(input: &FhInput, method: Method, opts: FitOptions, threshold: f64, protected: &[usize]) -> Result<(Vec<usize>, FhFit)> {
    let mut keep: Vec<usize> = (0..input.p()).collect();
    loop {
        let sub = input.x.select_columns(&keep);
        let sub_input = FhInput { ids: input.ids.clone(), y: input.y.clone(), x: sub, sigma2_e: input.sigma2_e.clone() };
        let fit = fit(&sub_input, method, opts)?;
        let pv = fit.beta_p_values();
        let worst = keep
            .iter()
            .enumerate()
            .filter(|(_, col)| !protected.contains(col))
            .max_by(|a, b| pv[a.0].total_cmp(&pv[b.0]));
        match worst {
            Some((pos, _)) if pv[pos] >= threshold && keep.len() > 1 => {
                keep.remove(pos);
            }
            _ => return Ok((keep, fit)),
        }
    }
}

/// Composite predictor `gamma_i Y_i + (1 - gamma_i) X_i beta` with the
/// first-order `g1 + g2` MSE approximation.
pub fn eblup(input: &FhInput, fit: &FhFit) -> Vec<Prediction> {
    let synth = &input.x * &fit.beta;
    (0..input.d())
        .map(|i| {
            let g = fit.gamma[i];
            let xi = input.x.row(i);
            let g2 = (1.0 - g).powi(2) * (xi * &fit.beta_cov * xi.transpose())[(0, 0)];
            let g1 = g * input.sigma2_e[i];
            let value = g * input.y[i] + (1.0 - g) * synth[i];
            let mut p = Prediction::new(input.ids[i].clone(), EstimatorKind::Eblup, value);
            p.gamma = Some(g);
            p.mse = Some(g1 + g2);
            p.mse_method = Some("prasad_rao_g1g2".into());
            p
        })
        .collect()
}

/// Regression-synthetic `X_o beta` for areas without sample.
pub fn synthetic_predict(ids: &[String], x_out: &DMatrix<f64>, fit: &FhFit) -> Result<Vec<Prediction>> {
    if x_out.ncols() != fit.beta.len() {
        return Err(Error::ColumnMismatch { expected: fit.beta.len(), found: x_out.ncols() });
    }
    if ids.len() != x_out.nrows() {
        return Err(Error::Dimension(format!("{} ids for {} rows", ids.len(), x_out.nrows())));
    }
    let values = x_out * &fit.beta;
    Ok(ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let xi = x_out.row(i);
            let mut p = Prediction::new(id.clone(), EstimatorKind::Synthetic, values[i]);
            p.gamma = Some(0.0);
            p.mse = Some(fit.sigma2_u + (xi * &fit.beta_cov * xi.transpose())[(0, 0)]);
            p.mse_method = Some("synthetic_analytic".into());
            p
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept(d: usize) -> DMatrix<f64> {
        DMatrix::from_element(d, 1, 1.0)
    }

    #[test]
    fn intercept_only_identity_gives_mean() {
        let y = DVector::from_vec(vec![0.1, 0.4, 0.3, 0.6]);
        let input = FhInput::new(y, intercept(4), DVector::from_element(4, 0.5)).unwrap();
        let b = gls_beta(&input, 0.5).unwrap();
        assert!((b[0] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn empty_design_rejected() {
        let y = DVector::from_vec(vec![0.1, 0.4, 0.3]);
        let x = DMatrix::<f64>::zeros(3, 0);
        assert!(matches!(FhInput::new(y, x, DVector::from_element(3, 0.1)), Err(Error::SingularDesign)));
    }

    #[test]
    fn rank_deficient_rejected() {
        let y = DVector::from_vec(vec![0.1, 0.4, 0.3, 0.2]);
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(FhInput::new(y, x, DVector::from_element(4, 0.1)), Err(Error::SingularDesign)));
    }

    #[test]
    fn zero_variances_need_override() {
        let y = DVector::from_vec(vec![0.1, 0.4, 0.3, 0.2]);
        let s = DVector::from_vec(vec![0.0, 0.1, 0.1, 0.1]);
        assert!(matches!(FhInput::new(y.clone(), intercept(4), s.clone()), Err(Error::ZeroSamplingVariance(1, 0))));
        let input = FhInput::with_zero_variances(y, intercept(4), s, 1).unwrap();
        assert!(matches!(gls_beta(&input, 0.0), Err(Error::ZeroTotalVariance(0))));
        let fit = fit_reml(&input, FitOptions::default()).unwrap();
        let preds = eblup(&input, &fit);
        assert_eq!(preds[0].value, 0.1);
    }

    #[test]
    fn moments_truncates_on_perfect_fit() {
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DVector::from_fn(6, |i, _| 0.2 + 0.05 * i as f64);
        let input = FhInput::new(y, x, DVector::from_element(6, 0.01)).unwrap();
        let fit = fit_moments(&input).unwrap();
        assert_eq!(fit.sigma2_u, 0.0);
        assert!(fit.loglik.is_none());
        let preds = eblup(&input, &fit);
        for (p, yi) in preds.iter().zip(input.y.iter()) {
            assert!((p.value - yi).abs() < 1e-12);
        }
    }

    #[test]
    fn eblup_midpoint_when_gamma_half() {
        let y = DVector::from_vec(vec![0.1, 0.5, 0.3, 0.7, 0.2]);
        let input = FhInput::new(y, intercept(5), DVector::from_element(5, 0.02)).unwrap();
        let mut fit = fit_reml(&input, FitOptions::default()).unwrap();
        fit.sigma2_u = 0.02;
        fit.gamma = shrinkage(0.02, &input.sigma2_e);
        let preds = eblup(&input, &fit);
        let synth = fit.beta[0];
        for (p, yi) in preds.iter().zip(input.y.iter()) {
            assert!((p.value - 0.5 * (yi + synth)).abs() < 1e-15);
        }
    }

    #[test]
    fn synthetic_column_mismatch() {
        let y = DVector::from_vec(vec![0.1, 0.5, 0.3, 0.7]);
        let input = FhInput::new(y, intercept(4), DVector::from_element(4, 0.02)).unwrap();
        let fit = fit_ml(&input, FitOptions::default()).unwrap();
        let x_out = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(
            synthetic_predict(&["a".into(), "b".into()], &x_out, &fit),
            Err(Error::ColumnMismatch { expected: 1, found: 2 })
        ));
        let preds = synthetic_predict(&["a".into(), "b".into()], &intercept(2), &fit).unwrap();
        assert_eq!(preds[0].value, preds[1].value);
        assert_eq!(preds[0].kind, EstimatorKind::Synthetic);
    }

    #[test]
    fn fh_iterative_truncates_when_residuals_small() {
        let y = DVector::from_vec(vec![0.30, 0.31, 0.29, 0.30, 0.305]);
        let input = FhInput::new(y, intercept(5), DVector::from_element(5, 0.05)).unwrap();
        let fit = fit_fh_iterative(&input, FitOptions::default()).unwrap();
        assert_eq!(fit.sigma2_u, 0.0);
    }
}
