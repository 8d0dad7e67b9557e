use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sae_core::fh::{self, gls_beta, profile_loglik, FhInput, FitOptions, Likelihood, Method};

fn instance(seed: u64, d: usize, p: usize) -> FhInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(d, p, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() });
    let s2: DVector<f64> = DVector::from_fn(d, |_, _| 0.002 + 0.008 * rng.random::<f64>());
    let y = DVector::from_fn(d, |i, _| 0.3 + 0.2 * x[(i, p - 1)] + 0.3 * (rng.random::<f64>() - 0.5) + s2[i].sqrt() * (rng.random::<f64>() - 0.5));
    FhInput::new(y, x, s2).unwrap()
}

/// Dense `P = V^-1 - V^-1 X (X' V^-1 X)^-1 X' V^-1` and related pieces.
struct Dense {
    vinv: DMatrix<f64>,
    p: DMatrix<f64>,
    logdet_v: f64,
    logdet_xvx: f64,
    beta: DVector<f64>,
}

fn dense(input: &FhInput, s: f64) -> Dense {
    let d = input.d();
    let v = DMatrix::from_fn(d, d, |i, j| if i == j { s + input.sigma2_e[i] } else { 0.0 });
    let vinv = v.clone().try_inverse().unwrap();
    let xvx = input.x.transpose() * &vinv * &input.x;
    let xvx_inv = xvx.clone().try_inverse().unwrap();
    let beta = &xvx_inv * input.x.transpose() * &vinv * &input.y;
    let p = &vinv - &vinv * &input.x * &xvx_inv * input.x.transpose() * &vinv;
    Dense { logdet_v: v.determinant().ln(), logdet_xvx: xvx.determinant().ln(), vinv, p, beta }
}

fn oracle_loglik(input: &FhInput, s: f64, lik: Likelihood) -> f64 {
    let k = dense(input, s);
    let (d, p) = (input.d() as f64, input.p() as f64);
    let two_pi = 2.0 * std::f64::consts::PI;
    match lik {
        Likelihood::Ml => {
            let r = &input.y - &input.x * &k.beta;
            -0.5 * (d * two_pi.ln() + k.logdet_v + (r.transpose() * &k.vinv * &r)[(0, 0)])
        }
        Likelihood::Reml => -0.5 * ((d - p) * two_pi.ln() + k.logdet_v + k.logdet_xvx + (input.y.transpose() * &k.p * &input.y)[(0, 0)]),
    }
}

/// Grid over `[0, hi]` followed by golden-section refinement around the best
/// grid point.
fn grid_argmax(f: impl Fn(f64) -> f64, hi: f64) -> f64 {
    let n = 4000;
    let h = hi / n as f64;
    let best = (0..=n).map(|k| k as f64 * h).max_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
    let (mut a, mut b) = ((best - h).max(0.0), best + h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > 1e-12 {
        let (c, e) = (b - g * (b - a), a + g * (b - a));
        if f(c) >= f(e) {
            b = e;
        } else {
            a = c;
        }
    }
    let m = 0.5 * (a + b);
    if f(0.0) >= f(m) { 0.0 } else { m }
}

#[test]
fn gls_matches_explicit_loops() {
    let input = instance(1, 12, 3);
    for s in [0.0, 0.003, 0.05] {
        let p = input.p();
        let mut a = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        for i in 0..input.d() {
            let w = 1.0 / (s + input.sigma2_e[i]);
            for j in 0..p {
                b[j] += w * input.x[(i, j)] * input.y[i];
                for k in 0..p {
                    a[(j, k)] += w * input.x[(i, j)] * input.x[(i, k)];
                }
            }
        }
        let expect = a.lu().solve(&b).unwrap();
        assert!((gls_beta(&input, s).unwrap() - expect).amax() < 1e-12);
    }
}

#[test]
fn likelihood_fits_match_grid_oracle() {
    for seed in 0..12 {
        let d = 5 + (seed as usize % 4);
        let input = instance(100 + seed, d, 2);
        for (method, lik) in [(Method::Ml, Likelihood::Ml), (Method::Reml, Likelihood::Reml)] {
            let fit = fh::fit(&input, method, FitOptions::default()).unwrap();
            let oracle = grid_argmax(|s| oracle_loglik(&input, s, lik), 0.2);
            assert!((fit.sigma2_u - oracle).abs() <= 1e-4, "seed {seed} {method:?}: {} vs {oracle}", fit.sigma2_u);
            let ll = profile_loglik(&input, fit.sigma2_u, lik).unwrap().0;
            assert!((ll - oracle_loglik(&input, fit.sigma2_u, lik)).abs() < 1e-9);
        }
    }
}

#[test]
fn moments_matches_hat_matrix_oracle() {
    for seed in 0..10 {
        let input = instance(200 + seed, 8, 2);
        let x = &input.x;
        let h = x * (x.transpose() * x).try_inverse().unwrap() * x.transpose();
        let r = &input.y - &h * &input.y;
        let mut acc = 0.0;
        for i in 0..input.d() {
            acc += r[i] * r[i] - input.sigma2_e[i] * (1.0 - h[(i, i)]);
        }
        let expect = (acc / (input.d() - input.p()) as f64).max(0.0);
        let fit = fh::fit_moments(&input).unwrap();
        assert!((fit.sigma2_u - expect).abs() < 1e-12);
    }
}

#[test]
fn fh_iterative_matches_bisection() {
    for seed in 0..10 {
        let input = instance(300 + seed, 8, 2);
        let target = (input.d() - input.p()) as f64;
        let q = |s: f64| {
            let k = dense(&input, s);
            (input.y.transpose() * &k.p * &input.y)[(0, 0)] - target
        };
        let expect = if q(0.0) <= 0.0 {
            0.0
        } else {
            let (mut a, mut b) = (0.0, 1.0);
            while q(b) > 0.0 {
                b *= 2.0;
            }
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if q(m) > 0.0 { a = m } else { b = m }
            }
            0.5 * (a + b)
        };
        let fit = fh::fit(&input, Method::FhIterative, FitOptions::default()).unwrap();
        assert!((fit.sigma2_u - expect).abs() <= 1e-9, "seed {seed}: {} vs {expect}", fit.sigma2_u);
    }
}

/// Fourth-order Richardson central difference.
fn richardson(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let c = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * c(h / 2.0) - c(h)) / 3.0
}

#[test]
fn profile_score_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..50 {
        let input = instance(400 + k, 20, 3);
        let s = 0.001 + 0.02 * rng.random::<f64>();
        for lik in [Likelihood::Ml, Likelihood::Reml] {
            let (_, score) = profile_loglik(&input, s, lik).unwrap();
            let fd = richardson(|t| profile_loglik(&input, t, lik).unwrap().0, s, 1e-4 * s);
            assert!((score - fd).abs() <= 1e-5 * score.abs().max(1.0), "{lik:?} at {s}: {score} vs {fd}");
        }
    }
}

#[test]
fn estimators_are_translation_invariant() {
    for seed in 0..20 {
        let input = instance(500 + seed, 15, 2);
        let shifted = input.with_response(input.y.add_scalar(3.25));
        for method in [Method::Ml, Method::Reml, Method::Moments, Method::FhIterative] {
            let a = fh::fit(&input, method, FitOptions::default()).unwrap();
            let b = fh::fit(&shifted, method, FitOptions::default()).unwrap();
            assert!((a.sigma2_u - b.sigma2_u).abs() <= 1e-8, "{method:?}");
            assert!((b.beta[0] - a.beta[0] - 3.25).abs() <= 1e-6);
        }
    }
}

#[test]
fn eblup_mse_terms() {
    let input = instance(9, 10, 2);
    let fit = fh::fit_reml(&input, FitOptions::default()).unwrap();
    let k = dense(&input, fit.sigma2_u);
    let cov = (input.x.transpose() * &k.vinv * &input.x).try_inverse().unwrap();
    for (i, pred) in fh::eblup(&input, &fit).iter().enumerate() {
        let g = fit.sigma2_u / (fit.sigma2_u + input.sigma2_e[i]);
        let xi = input.x.row(i);
        let g2 = (1.0 - g).powi(2) * (xi * &cov * xi.transpose())[(0, 0)];
        assert!((pred.mse.unwrap() - (g * input.sigma2_e[i] + g2)).abs() < 1e-12);
        let synth = (xi * &k.beta)[(0, 0)];
        assert!((pred.value - (g * input.y[i] + (1.0 - g) * synth)).abs() < 1e-10);
    }
}

proptest! {
    #[test]
    fn shrinkage_is_convex(seed in 0u64..5000, d in 6usize..30) {
        let input = instance(seed, d, 2);
        for method in [Method::Reml, Method::Moments] {
            let fit = fh::fit(&input, method, FitOptions::default()).unwrap();
            prop_assert!(fit.sigma2_u >= 0.0);
            let synth = &input.x * &fit.beta;
            for (i, p) in fh::eblup(&input, &fit).iter().enumerate() {
                let g = p.gamma.unwrap();
                prop_assert!((0.0..=1.0).contains(&g));
                let (lo, hi) = (input.y[i].min(synth[i]), input.y[i].max(synth[i]));
                prop_assert!(p.value >= lo - 1e-12 && p.value <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn oracle_instances_are_interior() {
    let interior = (0..12).filter(|&s| fh::fit_reml(&instance(100 + s, 5 + (s as usize % 4), 2), FitOptions::default()).unwrap().sigma2_u > 0.0).count();
    assert!(interior >= 6, "{interior}");
}
