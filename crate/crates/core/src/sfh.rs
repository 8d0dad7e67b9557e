//! Spatial Fay-Herriot model with SAR random effects.
//!
//! `u = rho W u + eps`, `eps ~ N(0, sigma_eps^2 I)`, so that
//! `Y ~ N(X beta, G)` with `G = Omega + Sigma_e`,
//! `Omega = sigma_eps^2 [(I - rho W)'(I - rho W)]^-1` and
//! `Sigma_e = diag(sigma_i^2)`.
//!
//! The profile likelihood over `(sigma_eps^2, rho)` is evaluated in
//! precision form through Cholesky factors of `(I - rho W)'(I - rho W)` and
//! `Q = K / sigma_eps^2 + Sigma_e^-1`, without inverting `G`. Gradients are
//! analytic.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fh::{self, maximize_nonneg, FhInput, FitOptions, Likelihood};
use crate::flags::Flag;
use crate::optim::{minimize_bfgs, BfgsOptions};
use crate::table::{EstimatorKind, Prediction};
use crate::weights::SpatialWeights;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub const DEFAULT_RHO_BOUNDS: (f64, f64) = (-0.999, 0.999);

/// Deterministic starting values of rho for the multi-start search, mapped
/// into the admissible interval.
const RHO_STARTS: [f64; 5] = [0.0, 0.5, -0.5, 0.9, 0.25];

/// Number of starts, ranked by objective value, that are run to convergence.
const SCREENED_STARTS: usize = 2;

#[derive(Debug, Clone)]
pub struct SfhInput {
    pub base: FhInput,
    pub w: SpatialWeights,
    pub rho_bounds: (f64, f64),
}

impl SfhInput {
    /// `w` must be indexed like `base` (same ids in the same order).
    pub fn new(base: FhInput, w: SpatialWeights, rho_bounds: (f64, f64)) -> Result<Self> {
        if w.len() != base.d() {
            return Err(Error::Dimension(format!("weights over {} areas, data over {}", w.len(), base.d())));
        }
        if w.ids() != base.ids.as_slice() {
            return Err(Error::Invalid("weights ids do not match the data ids".into()));
        }
        let (lo, hi) = rho_bounds;
        if !(lo > -1.0 && hi < 1.0 && lo < hi) {
            return Err(Error::Invalid(format!("rho bounds ({lo}, {hi}) must lie inside (-1, 1)")));
        }
        Ok(Self { base, w, rho_bounds })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfhFit {
    pub method: Likelihood,
    #[serde(with = "crate::serde_na::dvec")]
    pub beta: DVector<f64>,
    #[serde(with = "crate::serde_na::dmat")]
    pub beta_cov: DMatrix<f64>,
    pub sigma2_eps: f64,
    pub rho: f64,
    pub sigma2_eps_se: Option<f64>,
    pub rho_se: Option<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub rho_at_boundary: bool,
    pub rho_fixed: bool,
}

/// `[(I - rho W)'(I - rho W)]^-1`.
fn sar_precision(w: &DMatrix<f64>, wtw: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let d = w.nrows();
    DMatrix::from_fn(d, d, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - rho * (w[(i, j)] + w[(j, i)]) + rho * rho * wtw[(i, j)]
    })
}

fn sar_correlation(w: &DMatrix<f64>, wtw: &DMatrix<f64>, rho: f64) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(sar_precision(w, wtw, rho)).ok_or(Error::SingularAtRho(rho))?;
    let mut a = chol.inverse();
    symmetrize(&mut a);
    Ok(a)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for j in 0..d {
        for i in (j + 1)..d {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn dense_wtw(w: &SpatialWeights) -> DMatrix<f64> {
    let d = w.len();
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        for (j, wij) in w.row(i) {
            for (l, wil) in w.row(i) {
                m[(j, l)] += wij * wil;
            }
        }
    }
    m
}

/// `Omega = sigma_eps^2 [(I - rho W)'(I - rho W)]^-1`.
pub fn omega(sigma2_eps: f64, rho: f64, w: &SpatialWeights) -> Result<DMatrix<f64>> {
    Ok(sar_correlation(&w.to_dense(), &dense_wtw(w), rho)? * sigma2_eps)
}

/// Value and gradient of the profile log-likelihood at one parameter point.
#[derive(Debug, Clone)]
pub struct ProfileEval {
    pub loglik: f64,
    pub grad: Option<[f64; 2]>,
    pub beta: DVector<f64>,
}

/// Precomputed pieces of the spatial profile likelihood for one data set.
pub struct SarProfile<'a> {
    input: &'a SfhInput,
    w: DMatrix<f64>,
    wtw: DMatrix<f64>,
    /// Nonzero pattern of `I + W + W' + W'W`, as `(i, j)` pairs.
    pattern: Vec<(usize, usize)>,
}

impl<'a> SarProfile<'a> {
    pub fn new(input: &'a SfhInput) -> Self {
        let w = input.w.to_dense();
        let wtw = dense_wtw(&input.w);
        let d = w.nrows();
        let mut pattern = Vec::new();
        for j in 0..d {
            for i in 0..d {
                if i == j || w[(i, j)] != 0.0 || w[(j, i)] != 0.0 || wtw[(i, j)] != 0.0 {
                    pattern.push((i, j));
                }
            }
        }
        Self { input, w, wtw, pattern }
    }

    /// `-d/drho [(I - rho W)'(I - rho W)]` at `(i, j)`.
    fn m_entry(&self, rho: f64, i: usize, j: usize) -> f64 {
        self.w[(i, j)] + self.w[(j, i)] - 2.0 * rho * self.wtw[(i, j)]
    }

    fn m_times(&self, rho: f64, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(v.nrows(), v.ncols());
        for &(i, j) in &self.pattern {
            let m = self.m_entry(rho, i, j);
            for c in 0..v.ncols() {
                out[(i, c)] += m * v[(j, c)];
            }
        }
        out
    }

    /// Profile log-likelihood and (optionally) its gradient in
    /// `(sigma_eps^2, rho)`.
    ///
    /// With all sampling variances positive this works in precision form:
    /// `K = (I - rho W)'(I - rho W)`, `Q = K / sigma2 + Sigma_e^-1`,
    /// `G^-1 = Sigma_e^-1 - Sigma_e^-1 Q^-1 Sigma_e^-1` and
    /// `log|G| = D log sigma2 - log|K| + log|Sigma_e| + log|Q|`.
    /// Otherwise it falls back to [`SarProfile::eval_dense`].
    pub fn eval(&self, sigma2: f64, rho: f64, lik: Likelihood, with_grad: bool) -> Result<ProfileEval> {
        let base = &self.input.base;
        if !(sigma2 > 0.0) || base.sigma2_e.iter().any(|&s| s <= 0.0) {
            return self.eval_dense(sigma2, rho, lik, with_grad);
        }
        let d = base.d();
        let p = base.p();
        let k = sar_precision(&self.w, &self.wtw, rho);
        let chol_k = Cholesky::new(k.clone()).ok_or(Error::SingularAtRho(rho))?;
        let s_inv = base.sigma2_e.map(|s| 1.0 / s);
        let mut q = &k / sigma2;
        for i in 0..d {
            q[(i, i)] += s_inv[i];
        }
        let chol_q = Cholesky::new(q).ok_or_else(|| Error::Invalid(format!("Q not positive definite at ({sigma2}, {rho})")))?;
        let logdet_g = d as f64 * sigma2.ln() - log_det(&chol_k) + base.sigma2_e.iter().map(|s| s.ln()).sum::<f64>() + log_det(&chol_q);

        let g_solve = |v: &DMatrix<f64>| -> DMatrix<f64> {
            let mut sv = v.clone();
            for mut col in sv.column_iter_mut() {
                col.component_mul_assign(&s_inv);
            }
            let mut corr = chol_q.solve(&sv);
            for mut col in corr.column_iter_mut() {
                col.component_mul_assign(&s_inv);
            }
            sv - corr
        };
        let z = g_solve(&base.x);
        let c = base.x.tr_mul(&z);
        let chol_c = Cholesky::new(c).ok_or(Error::SingularDesign)?;
        let beta = chol_c.solve(&z.tr_mul(&base.y));
        let r = &base.y - &base.x * &beta;
        let a = g_solve(&DMatrix::from_column_slice(d, 1, r.as_slice()));
        let quad = r.dot(&a.column(0));
        let loglik = match lik {
            Likelihood::Ml => -0.5 * (d as f64 * LN_2PI + logdet_g + quad),
            Likelihood::Reml => -0.5 * ((d - p) as f64 * LN_2PI + logdet_g + log_det(&chol_c) + quad),
        };
        if !with_grad {
            return Ok(ProfileEval { loglik, grad: None, beta });
        }

        let lk = lower_inverse(chol_k.l_dirty().clone());
        let lq = lower_inverse(chol_q.l_dirty().clone());
        let (mut tr_qk, mut tr_km, mut tr_qm) = (0.0, 0.0, 0.0);
        for &(i, j) in &self.pattern {
            let m = self.m_entry(rho, i, j);
            let qinv = inverse_entry(&lq, i, j);
            tr_qk += qinv * k[(i, j)];
            tr_qm += qinv * m;
            tr_km += inverse_entry(&lk, i, j) * m;
        }
        let dlogdet_s = d as f64 / sigma2 - tr_qk / (sigma2 * sigma2);
        let dlogdet_r = tr_km - tr_qm / sigma2;

        // dG/dsigma2 = K^-1, dG/drho = sigma2 K^-1 M K^-1
        let b = chol_k.solve(&a);
        let q_s = a.column(0).dot(&b.column(0));
        let q_r = sigma2 * b.tr_mul(&self.m_times(rho, &b))[(0, 0)];
        let (corr_s, corr_r) = match lik {
            Likelihood::Ml => (0.0, 0.0),
            Likelihood::Reml => {
                let kz = chol_k.solve(&z);
                let cinv = chol_c.inverse();
                let zgz_s = z.tr_mul(&kz);
                let zgz_r = kz.tr_mul(&self.m_times(rho, &kz)) * sigma2;
                ((&cinv * zgz_s).trace(), (&cinv * zgz_r).trace())
            }
        };
        let gs = -0.5 * (dlogdet_s - corr_s) + 0.5 * q_s;
        let gr = -0.5 * (dlogdet_r - corr_r) + 0.5 * q_r;
        Ok(ProfileEval { loglik, grad: Some([gs, gr]), beta })
    }

    /// Reference evaluation through the dense covariance
    /// `G = sigma2 [(I - rho W)'(I - rho W)]^-1 + Sigma_e`.
    pub fn eval_dense(&self, sigma2: f64, rho: f64, lik: Likelihood, with_grad: bool) -> Result<ProfileEval> {
        let base = &self.input.base;
        let d = base.d();
        let p = base.p();
        let a = sar_correlation(&self.w, &self.wtw, rho)?;
        let mut g = &a * sigma2;
        for i in 0..d {
            g[(i, i)] += base.sigma2_e[i];
        }
        let chol_g = Cholesky::new(g).ok_or_else(|| Error::Invalid(format!("G not positive definite at ({sigma2}, {rho})")))?;
        let logdet_g = log_det(&chol_g);
        let z = chol_g.solve(&base.x);
        let c = base.x.tr_mul(&z);
        let chol_c = Cholesky::new(c).ok_or(Error::SingularDesign)?;
        let beta = chol_c.solve(&z.tr_mul(&base.y));
        let r = &base.y - &base.x * &beta;
        let av = chol_g.solve(&r);
        let quad = r.dot(&av);
        let loglik = match lik {
            Likelihood::Ml => -0.5 * (d as f64 * LN_2PI + logdet_g + quad),
            Likelihood::Reml => -0.5 * ((d - p) as f64 * LN_2PI + logdet_g + log_det(&chol_c) + quad),
        };
        if !with_grad {
            return Ok(ProfileEval { loglik, grad: None, beta });
        }

        let ginv = chol_g.inverse();
        // d G / d sigma2 = A,  d G / d rho = sigma2 A M A
        let tr_s = ginv.component_mul(&a).sum();
        let f = &ginv * &a;
        let mut tr_r = 0.0;
        for &(i, j) in &self.pattern {
            tr_r += self.m_entry(rho, i, j) * a.column(j).dot(&f.column(i));
        }
        tr_r *= sigma2;
        let a_av = &a * &av;
        let a_av_m = DMatrix::from_column_slice(d, 1, a_av.as_slice());
        let q_s = av.dot(&a_av);
        let q_r = sigma2 * a_av_m.tr_mul(&self.m_times(rho, &a_av_m))[(0, 0)];
        let (corr_s, corr_r) = match lik {
            Likelihood::Ml => (0.0, 0.0),
            Likelihood::Reml => {
                let az = &a * &z;
                let cinv = chol_c.inverse();
                let zaz = z.tr_mul(&az);
                let zgz = sigma2 * az.tr_mul(&self.m_times(rho, &az));
                ((&cinv * zaz).trace(), (&cinv * zgz).trace())
            }
        };
        let gs = -0.5 * (tr_s - corr_s) + 0.5 * q_s;
        let gr = -0.5 * (tr_r - corr_r) + 0.5 * q_r;
        Ok(ProfileEval { loglik, grad: Some([gs, gr]), beta })
    }

    /// `(X' G^-1 X)^-1` at a parameter point.
    fn beta_cov(&self, sigma2: f64, rho: f64) -> Result<DMatrix<f64>> {
        let base = &self.input.base;
        let mut g = sar_correlation(&self.w, &self.wtw, rho)? * sigma2;
        for i in 0..base.d() {
            g[(i, i)] += base.sigma2_e[i];
        }
        let chol_g = Cholesky::new(g).ok_or_else(|| Error::Invalid("G not positive definite".into()))?;
        let c = base.x.tr_mul(&chol_g.solve(&base.x));
        Ok(Cholesky::new(c).ok_or(Error::SingularDesign)?.inverse())
    }
}

/// Inverse of a lower-triangular matrix, column by column.
fn lower_inverse(l: DMatrix<f64>) -> DMatrix<f64> {
    let d = l.nrows();
    let mut inv = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut x = inv.column_mut(j);
        x[j] = 1.0;
        for k in j..d {
            let xk = x[k] / l[(k, k)];
            x[k] = xk;
            if xk != 0.0 {
                let lk = l.column(k);
                for i in (k + 1)..d {
                    x[i] -= xk * lk[i];
                }
            }
        }
    }
    inv
}

/// `(L L')^-1` at `(i, j)` from `L^-1`.
fn inverse_entry(linv: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let start = i.max(j);
    let n = linv.nrows() - start;
    linv.column(i).rows(start, n).dot(&linv.column(j).rows(start, n))
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SfhOptions {
    pub fit: FitOptions,
    /// Fix rho and estimate only `sigma_eps^2`.
    pub fix_rho: Option<f64>,
    /// Single `(sigma_eps^2, rho)` start replacing the multi-start search.
    pub start: Option<(f64, f64)>,
}

impl Default for SfhOptions {
    fn default() -> Self {
        Self { fit: FitOptions::default(), fix_rho: None, start: None }
    }
}

struct Transform {
    center: f64,
    half: f64,
}

impl Transform {
    fn rho(&self, t: f64) -> f64 {
        self.center + self.half * t.tanh()
    }

    fn t(&self, rho: f64) -> f64 {
        ((rho - self.center) / self.half).clamp(-0.999_999, 0.999_999).atanh()
    }

    fn drho_dt(&self, t: f64) -> f64 {
        self.half * (1.0 - t.tanh().powi(2))
    }
}

fn variance_scale(base: &FhInput) -> f64 {
    let d = base.d() as f64;
    let mean = base.y.sum() / d;
    let vy = base.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d - 1.0);
    let vs = base.sigma2_e.mean();
    vy.max(vs).max(f64::MIN_POSITIVE)
}

/// ML or REML fit of `(beta, sigma_eps^2, rho)`.
///
/// Quasi-Newton on `(log sigma_eps^2, atanh((rho - c)/h))` from five
/// deterministic starts; the best converged optimum wins. A rho estimate
/// within `1e-3 h` of a bound is reported through `rho_at_boundary`.
pub fn fit_sfh(input: &SfhInput, lik: Likelihood, opts: SfhOptions) -> Result<SfhFit> {
    let profile = SarProfile::new(input);
    let scale = variance_scale(&input.base);
    let floor = 1e-10 * scale;
    let (lo, hi) = input.rho_bounds;

    if let Some(rho) = opts.fix_rho {
        if !(rho > lo && rho < hi) {
            return Err(Error::Invalid(format!("fixed rho {rho} outside bounds")));
        }
        let m = maximize_nonneg(
            |s| {
                let e = profile.eval(s.max(floor), rho, lik, true)?;
                Ok((e.loglik, e.grad.expect("gradient requested")[0]))
            },
            floor,
            10.0 * scale,
            opts.fit,
        )?;
        let sigma2 = m.x.max(floor);
        let e = profile.eval(sigma2, rho, lik, false)?;
        let info = observed_information(&profile, sigma2, rho, lik, scale)?;
        let se_s = info.map(|h| (1.0 / h[0][0]).sqrt()).filter(|v| v.is_finite());
        return Ok(SfhFit {
            method: lik,
            beta: e.beta,
            beta_cov: profile.beta_cov(sigma2, rho)?,
            sigma2_eps: sigma2,
            rho,
            sigma2_eps_se: se_s,
            rho_se: None,
            loglik: e.loglik,
            converged: m.converged,
            iterations: m.iterations,
            rho_at_boundary: false,
            rho_fixed: true,
        });
    }

    let tr = Transform { center: 0.5 * (lo + hi), half: 0.5 * (hi - lo) };
    let t1_lo = floor.ln();
    let t1_hi = (1e3 * scale).ln();
    let objective = |t: &[f64]| -> Option<(f64, Vec<f64>)> {
        let s = t[0].exp();
        let rho = tr.rho(t[1]);
        let e = profile.eval(s, rho, lik, true).ok()?;
        let [gs, gr] = e.grad?;
        if !e.loglik.is_finite() || !gs.is_finite() || !gr.is_finite() {
            return None;
        }
        Some((-e.loglik, vec![-gs * s, -gr * tr.drho_dt(t[1])]))
    };

    let fh_start = fh::fit_reml(&input.base, opts.fit).map(|f| f.sigma2_u).unwrap_or(0.0);
    let s0 = if fh_start > 0.0 { fh_start } else { 0.5 * input.base.sigma2_e.mean() }.max(100.0 * floor);
    let bfgs = BfgsOptions { max_iter: opts.fit.max_iter, ..BfgsOptions::default() };

    let mut best: Option<crate::optim::BfgsResult> = None;
    let mut iterations = 0;
    let mut starts: Vec<(f64, [f64; 2])> = RHO_STARTS
        .iter()
        .map(|&r0| {
            let r0 = (tr.center + r0 * tr.half).clamp(lo + 0.01 * tr.half, hi - 0.01 * tr.half);
            let s = (s0 * (1.0 - r0 * r0)).max(100.0 * floor);
            let ll = profile.eval(s, r0, lik, false).map_or(f64::NEG_INFINITY, |e| e.loglik);
            (if ll.is_finite() { ll } else { f64::NEG_INFINITY }, [s.ln(), tr.t(r0)])
        })
        .collect();
    // Stable sort: ties keep the listed order.
    starts.sort_by(|a, b| b.0.total_cmp(&a.0));
    starts.truncate(SCREENED_STARTS);
    if let Some((s, r)) = opts.start {
        let r = r.clamp(lo + 0.01 * tr.half, hi - 0.01 * tr.half);
        starts = vec![(0.0, [s.clamp(100.0 * floor, 1e3 * scale).ln(), tr.t(r)])];
    }
    for &(_, start) in &starts {
        let Ok(res) = minimize_bfgs(objective, &start, &[t1_lo, f64::NEG_INFINITY], &[t1_hi, f64::INFINITY], bfgs) else {
            continue;
        };
        iterations += res.iterations;
        let better = match &best {
            None => true,
            Some(b) => (res.converged && !b.converged) || (res.converged == b.converged && res.f < b.f),
        };
        if better {
            best = Some(res);
        }
    }
    let best = best.ok_or(Error::NoConvergence(iterations))?;
    if !best.converged {
        return Err(Error::NoConvergence(iterations));
    }
    let sigma2 = best.x[0].exp();
    let rho = tr.rho(best.x[1]);
    let at_boundary = (rho - lo).abs() < 1e-3 * tr.half || (hi - rho).abs() < 1e-3 * tr.half;
    let e = profile.eval(sigma2, rho, lik, false)?;
    let (se_s, se_r) = if at_boundary {
        (None, None)
    } else {
        match observed_information(&profile, sigma2, rho, lik, scale)? {
            Some(h) => {
                let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
                if det > 0.0 && h[0][0] > 0.0 {
                    (Some((h[1][1] / det).sqrt()), Some((h[0][0] / det).sqrt()))
                } else {
                    (None, None)
                }
            }
            None => (None, None),
        }
    };
    Ok(SfhFit {
        method: lik,
        beta: e.beta,
        beta_cov: profile.beta_cov(sigma2, rho)?,
        sigma2_eps: sigma2,
        rho,
        sigma2_eps_se: se_s,
        rho_se: se_r,
        loglik: e.loglik,
        converged: best.converged,
        iterations,
        rho_at_boundary: at_boundary,
        rho_fixed: false,
    })
}

/// Negative Hessian of the profile log-likelihood in `(sigma2, rho)` by
/// central differences of the analytic gradient.
fn observed_information(profile: &SarProfile<'_>, sigma2: f64, rho: f64, lik: Likelihood, scale: f64) -> Result<Option<[[f64; 2]; 2]>> {
    let hs = (1e-4 * sigma2).max(1e-8 * scale);
    let hr = 1e-5;
    if sigma2 - hs <= 0.0 {
        return Ok(None);
    }
    let grad = |s: f64, r: f64| -> Result<[f64; 2]> {
        Ok(profile.eval(s, r, lik, true)?.grad.expect("gradient requested"))
    };
    let (gsp, gsm) = (grad(sigma2 + hs, rho)?, grad(sigma2 - hs, rho)?);
    let (grp, grm) = match (grad(sigma2, rho + hr), grad(sigma2, rho - hr)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Ok(None),
    };
    let h00 = -(gsp[0] - gsm[0]) / (2.0 * hs);
    let h11 = -(grp[1] - grm[1]) / (2.0 * hr);
    let h01 = -0.5 * ((gsp[1] - gsm[1]) / (2.0 * hs) + (grp[0] - grm[0]) / (2.0 * hr));
    Ok(Some([[h00, h01], [h01, h11]]))
}

/// Predicts the spatial effects `Omega G^-1 r` from residuals `r` at fixed
/// `(sigma_eps^2, rho)`.
pub struct SpatialSmoother {
    inner: Smoother,
}

enum Smoother {
    /// `(K / sigma2 + Sigma_e^-1)^-1 Sigma_e^-1 r`.
    Precision { chol_q: Cholesky<f64, Dyn>, s_inv: DVector<f64> },
    /// `Omega G^-1 r`, used when some sampling variance is zero.
    Dense { omega: DMatrix<f64>, chol_g: Cholesky<f64, Dyn> },
}

impl SpatialSmoother {
    pub fn new(input: &SfhInput, sigma2: f64, rho: f64) -> Result<Self> {
        let base = &input.base;
        let d = base.d();
        let inner = if sigma2 > 0.0 && base.sigma2_e.iter().all(|&s| s > 0.0) {
            let s_inv = base.sigma2_e.map(|s| 1.0 / s);
            let mut q = sar_precision(&input.w.to_dense(), &dense_wtw(&input.w), rho) / sigma2;
            for i in 0..d {
                q[(i, i)] += s_inv[i];
            }
            let chol_q = Cholesky::new(q).ok_or(Error::SingularAtRho(rho))?;
            Smoother::Precision { chol_q, s_inv }
        } else {
            let om = omega(sigma2, rho, &input.w)?;
            let mut g = om.clone();
            for i in 0..d {
                g[(i, i)] += base.sigma2_e[i];
            }
            let chol_g = Cholesky::new(g).ok_or_else(|| Error::Invalid("G not positive definite".into()))?;
            Smoother::Dense { omega: om, chol_g }
        };
        Ok(Self { inner })
    }

    pub fn effects(&self, resid: &DVector<f64>) -> DVector<f64> {
        match &self.inner {
            Smoother::Precision { chol_q, s_inv } => chol_q.solve(&resid.component_mul(s_inv)),
            Smoother::Dense { omega, chol_g } => omega * chol_g.solve(resid),
        }
    }
}

/// `X beta + Omega G^-1 (Y - X beta)` for every sampled area.
pub fn seblup(input: &SfhInput, fit: &SfhFit) -> Result<Vec<Prediction>> {
    let base = &input.base;
    let synth = &base.x * &fit.beta;
    let u = SpatialSmoother::new(input, fit.sigma2_eps, fit.rho)?.effects(&(&base.y - &synth));
    Ok((0..base.d())
        .map(|i| {
            let mut p = Prediction::new(base.ids[i].clone(), EstimatorKind::Seblup, synth[i] + u[i]);
            if input.w.is_island(i) {
                p.flags.insert(Flag::Island);
            }
            if fit.rho_at_boundary {
                p.flags.insert(Flag::BoundaryRho);
            }
            p
        })
        .collect())
}

/// Out-of-sample spatial predictor
/// `X_o beta + Omega_os (Omega_ss + Sigma_e)^-1 (Y - X beta)` with both
/// blocks taken from the SAR covariance over the full domain `full_w`.
/// Areas without neighbors in `full_w` fall back to `X_o beta`.
pub fn seblup_out_of_sample(
    full_w: &SpatialWeights,
    out_ids: &[String],
    x_out: &DMatrix<f64>,
    input: &SfhInput,
    fit: &SfhFit,
) -> Result<Vec<Prediction>> {
    let base = &input.base;
    if x_out.ncols() != base.p() {
        return Err(Error::ColumnMismatch { expected: base.p(), found: x_out.ncols() });
    }
    if out_ids.len() != x_out.nrows() {
        return Err(Error::Dimension(format!("{} ids for {} rows", out_ids.len(), x_out.nrows())));
    }
    let index = |id: &String| full_w.index_of(id).ok_or_else(|| Error::UnknownArea(id.clone()));
    let s_idx: Vec<usize> = base.ids.iter().map(index).collect::<Result<_>>()?;
    let o_idx: Vec<usize> = out_ids.iter().map(index).collect::<Result<_>>()?;

    let om = omega(fit.sigma2_eps, fit.rho, full_w)?;
    let ds = s_idx.len();
    let g_ss = DMatrix::from_fn(ds, ds, |a, b| om[(s_idx[a], s_idx[b])] + if a == b { base.sigma2_e[a] } else { 0.0 });
    let chol = Cholesky::new(g_ss).ok_or_else(|| Error::Invalid("G_ss not positive definite".into()))?;
    let resid = &base.y - &base.x * &fit.beta;
    let weights = chol.solve(&resid);
    let synth = x_out * &fit.beta;

    Ok(o_idx
        .iter()
        .enumerate()
        .map(|(k, &o)| {
            if full_w.is_island(o) {
                let mut p = Prediction::new(out_ids[k].clone(), EstimatorKind::Synthetic, synth[k]);
                p.gamma = Some(0.0);
                p.flags.insert(Flag::DisconnectedOut);
                p.flags.insert(Flag::Island);
                return p;
            }
            let u: f64 = s_idx.iter().enumerate().map(|(a, &s)| om[(o, s)] * weights[a]).sum();
            let mut p = Prediction::new(out_ids[k].clone(), EstimatorKind::Seblup, synth[k] + u);
            if fit.rho_at_boundary {
                p.flags.insert(Flag::BoundaryRho);
            }
            p
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::lattice_rook;

    fn chain(d: usize) -> SpatialWeights {
        lattice_rook(1, d)
    }

    #[test]
    fn omega_at_rho_zero_is_scaled_identity() {
        let om = omega(0.3, 0.0, &chain(5)).unwrap();
        assert!((om - DMatrix::identity(5, 5) * 0.3).abs().max() < 1e-14);
        let om = omega(0.0, 0.5, &chain(5)).unwrap();
        assert_eq!(om.abs().max(), 0.0);
    }

    #[test]
    fn rho_bounds_validated() {
        let x = DMatrix::from_element(5, 1, 1.0);
        let base = FhInput::new(DVector::from_element(5, 0.1).map(|v| v + 0.0), x, DVector::from_element(5, 0.01))
            .unwrap()
            .with_ids(chain(5).ids().to_vec())
            .unwrap();
        assert!(SfhInput::new(base.clone(), chain(5), (-1.0, 0.5)).is_err());
        assert!(SfhInput::new(base, chain(5), DEFAULT_RHO_BOUNDS).is_ok());
    }

    #[test]
    fn precision_form_matches_dense() {
        use crate::weights::neighbors_knn;
        use crate::geo::AreaGeo;
        let geos: Vec<AreaGeo> = (0..12)
            .map(|i| AreaGeo::new(format!("a{i:02}"), -10.0 + (i * 7 % 5) as f64 * 0.3, -75.0 + (i * 3 % 7) as f64 * 0.2))
            .collect();
        for w in [lattice_rook(3, 4), neighbors_knn(&geos, 3).unwrap()] {
            let d = w.len();
            let x = DMatrix::from_fn(d, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 * 0.37).sin() });
            let y = DVector::from_fn(d, |i, _| 0.3 + 0.1 * (i as f64 * 1.3).cos());
            let s2e = DVector::from_fn(d, |i, _| 0.002 + 0.001 * (i % 3) as f64);
            let base = FhInput::new(y, x, s2e).unwrap().with_ids(w.ids().to_vec()).unwrap();
            let input = SfhInput::new(base, w, DEFAULT_RHO_BOUNDS).unwrap();
            let prof = SarProfile::new(&input);
            for lik in [Likelihood::Ml, Likelihood::Reml] {
                for &(s2, rho) in &[(0.004, 0.6), (0.01, -0.4), (0.001, 0.95)] {
                    let fast = prof.eval(s2, rho, lik, true).unwrap();
                    let dense = prof.eval_dense(s2, rho, lik, true).unwrap();
                    assert!((fast.loglik - dense.loglik).abs() < 1e-9 * dense.loglik.abs().max(1.0));
                    let (gf, gd) = (fast.grad.unwrap(), dense.grad.unwrap());
                    for k in 0..2 {
                        assert!((gf[k] - gd[k]).abs() < 1e-7 * gd[k].abs().max(1.0), "{gf:?} vs {gd:?}");
                    }
                }
            }
        }
    }
}
