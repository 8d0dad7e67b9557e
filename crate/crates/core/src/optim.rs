//! Small numerical optimizers used by the variance-component fits.
//!
//! Nothing here knows about mixed models: a bracketed root finder for 1-D
//! score equations, golden-section search as a derivative-free fallback, and
//! a box-projected BFGS for the low-dimensional spatial profile likelihood.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct RootResult {
    pub x: f64,
    pub fx: f64,
    pub iterations: usize,
}

/// Brent's method on a bracket `[a, b]` with `f(a)` and `f(b)` of opposite
/// sign (or one of them zero).
pub fn brent_root<F>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    mut fa: f64,
    mut fb: f64,
    rel_tol: f64,
    max_iter: usize,
) -> Result<RootResult>
where
    F: FnMut(f64) -> f64,
{
    if fa == 0.0 {
        return Ok(RootResult { x: a, fx: fa, iterations: 0 });
    }
    if fb == 0.0 {
        return Ok(RootResult { x: b, fx: fb, iterations: 0 });
    }
    if fa.signum() == fb.signum() {
        return Err(Error::Invalid(format!(
            "root not bracketed on [{a}, {b}]"
        )));
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for iter in 1..=max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * rel_tol * b.abs().max(f64::MIN_POSITIVE);
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Ok(RootResult { x: b, fx: fb, iterations: iter });
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
        if !fb.is_finite() {
            return Err(Error::Invalid(format!("non-finite function value at {b}")));
        }
    }
    Err(Error::NoConvergence(max_iter))
}

/// Golden-section search for the maximum of a unimodal function on `[a, b]`.
pub fn golden_max<F>(mut f: F, mut a: f64, mut b: f64, rel_tol: f64, max_iter: usize) -> (f64, f64, usize)
where
    F: FnMut(f64) -> f64,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut iter = 0;
    while iter < max_iter && (b - a).abs() > rel_tol * (x1.abs() + x2.abs()).max(1e-300) {
        iter += 1;
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
    }
    if f1 >= f2 {
        (x1, f1, iter)
    } else {
        (x2, f2, iter)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Projected-gradient infinity norm at which the search stops.
    pub gtol: f64,
    pub xtol: f64,
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 200, gtol: 1e-9, xtol: 1e-12, max_step: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((xi, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *xi = xi.clamp(l, h);
    }
}

fn projected_gradient(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&xi, &gi), (&l, &h))| {
            if (xi <= l && gi > 0.0) || (xi >= h && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

/// Minimize `f` over the box `[lo, hi]` with a projected BFGS iteration.
///
/// `f` returns `None` where the objective is undefined; the line search treats
/// those points as infinitely bad and backtracks.
pub fn minimize_bfgs<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: BfgsOptions) -> Result<BfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x).ok_or_else(|| Error::Invalid("objective undefined at start".into()))?;
    let mut evaluations = 1;
    let mut h = identity(n);
    let mut fresh = true;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let pg = projected_gradient(&x, &g, lo, hi);
        if inf_norm(&pg) <= opts.gtol * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
        let active: Vec<bool> = pg.iter().zip(&g).map(|(p, gi)| *p == 0.0 && *gi != 0.0).collect();
        let mut d = vec![0.0; n];
        for i in 0..n {
            if active[i] {
                continue;
            }
            d[i] = -(0..n).filter(|&j| !active[j]).map(|j| h[i][j] * g[j]).sum::<f64>();
        }
        if dot(&d, &g) >= 0.0 {
            h = identity(n);
            fresh = true;
            d = pg.iter().map(|v| -v).collect();
        }
        let dn = inf_norm(&d);
        let mut alpha = if dn > opts.max_step { opts.max_step / dn } else { 1.0 };

        let mut accepted = None;
        for _ in 0..60 {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            project(&mut xt, lo, hi);
            let step: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            if inf_norm(&step) == 0.0 {
                break;
            }
            evaluations += 1;
            if let Some((ft, gt)) = f(&xt) {
                if ft.is_finite() && ft <= fx + 1e-4 * dot(&g, &step) {
                    accepted = Some((xt, ft, gt, step));
                    break;
                }
            }
            alpha *= 0.5;
        }

        let Some((xt, ft, gt, s)) = accepted else {
            if !fresh {
                h = identity(n);
                fresh = true;
                continue;
            }
            converged = inf_norm(&pg) <= 1e-5 * (1.0 + fx.abs());
            break;
        };

        let yv: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        let small_step = inf_norm(&s) <= opts.xtol * (1.0 + inf_norm(&xt));
        let f_change = (fx - ft).abs();
        x = xt;
        fx = ft;
        g = gt;
        if small_step && f_change <= 1e-15 * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
        if sy > 1e-12 * norm(&s) * norm(&yv) {
            if fresh {
                let yy = dot(&yv, &yv);
                let scale = sy / yy;
                for (i, row) in h.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = if i == j { scale } else { 0.0 };
                    }
                }
                fresh = false;
            }
            bfgs_update(&mut h, &s, &yv, sy);
        }
    }

    Ok(BfgsResult { x, f: fx, grad: g, iterations, evaluations, converged })
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_finds_cubic_root() {
        let f = |x: f64| x * x * x - 2.0;
        let r = brent_root(f, 0.0, 2.0, f(0.0), f(2.0), 1e-14, 100).unwrap();
        assert!((r.x - 2f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn brent_rejects_unbracketed() {
        let f = |x: f64| x * x + 1.0;
        assert!(brent_root(f, -1.0, 1.0, 2.0, 2.0, 1e-10, 50).is_err());
    }

    #[test]
    fn golden_finds_parabola_peak() {
        let (x, _, _) = golden_max(|x| -(x - 0.3) * (x - 0.3), 0.0, 1.0, 1e-10, 200);
        assert!((x - 0.3).abs() < 1e-6);
    }

    #[test]
    fn bfgs_rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Some((v, g))
        };
        let inf = f64::INFINITY;
        let r = minimize_bfgs(f, &[-1.2, 1.0], &[-inf, -inf], &[inf, inf], BfgsOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn bfgs_respects_box() {
        let f = |x: &[f64]| Some(((x[0] + 3.0).powi(2) + (x[1] - 1.0).powi(2), vec![2.0 * (x[0] + 3.0), 2.0 * (x[1] - 1.0)]));
        let r = minimize_bfgs(f, &[0.5, 0.0], &[0.0, -5.0], &[1.0, 5.0], BfgsOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.x[0], 0.0);
        assert!((r.x[1] - 1.0).abs() < 1e-8);
    }
}
