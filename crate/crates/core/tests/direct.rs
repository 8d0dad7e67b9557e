use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sae_core::direct::{anemia_indicator, direct_estimates, ht_proportion, SurveyRow};
use sae_core::{Error, Flag};

fn row(area: &str, cluster: usize, w: f64, hb: f64) -> SurveyRow {
    SurveyRow {
        area_id: area.into(),
        cluster_id: format!("c{cluster}"),
        sampling_weight: w,
        hemoglobin_g_dl: Some(hb),
        height_for_age_flag_input: None,
        age_months: 24,
        height_cm: None,
    }
}

/// 30 rows over 5 clusters with unequal weights.
fn fixture() -> Vec<SurveyRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    (0..30)
        .map(|k| row("150101", k % 5, 20.0 + 180.0 * rng.random::<f64>(), 8.5 + 5.0 * rng.random::<f64>()))
        .collect()
}

/// Ratio-estimator variance with explicit cluster totals of `w I` and `w`.
fn oracle(rows: &[SurveyRow], ind: &[bool]) -> (f64, f64) {
    let mut clusters: Vec<String> = rows.iter().map(|r| r.cluster_id.clone()).collect();
    clusters.sort();
    clusters.dedup();
    let n = clusters.len() as f64;
    let mut ty = vec![0.0; clusters.len()];
    let mut tx = vec![0.0; clusters.len()];
    for (r, &i) in rows.iter().zip(ind) {
        let c = clusters.iter().position(|c| *c == r.cluster_id).unwrap();
        tx[c] += r.sampling_weight;
        if i {
            ty[c] += r.sampling_weight;
        }
    }
    let (yh, xh): (f64, f64) = (ty.iter().sum(), tx.iter().sum());
    let ratio = yh / xh;
    let (my, mx) = (yh / n, xh / n);
    let mut vy = 0.0;
    let mut vx = 0.0;
    let mut cxy = 0.0;
    for c in 0..clusters.len() {
        vy += (ty[c] - my) * (ty[c] - my);
        vx += (tx[c] - mx) * (tx[c] - mx);
        cxy += (ty[c] - my) * (tx[c] - mx);
    }
    let f = n / (n - 1.0);
    (ratio, f * (vy + ratio * ratio * vx - 2.0 * ratio * cxy) / (xh * xh))
}

#[test]
fn thirty_rows_match_ratio_oracle() {
    let rows = fixture();
    let ind: Vec<bool> = rows.iter().map(|r| anemia_indicator(r).unwrap()).collect();
    let est = ht_proportion(&rows, &ind).unwrap();
    let (y, var) = oracle(&rows, &ind);
    assert!((est.y - y).abs() < 1e-14);
    assert!((est.var_y - var).abs() < 1e-14 * var.max(1e-12), "{} vs {var}", est.var_y);
    assert!((est.n_eff - y * (1.0 - y) / var).abs() < 1e-9);
}

#[test]
fn single_cluster_is_reported() {
    let rows: Vec<SurveyRow> = (0..4).map(|k| row("a", 0, 1.0, 10.0 + k as f64)).collect();
    let ind: Vec<bool> = rows.iter().map(|r| anemia_indicator(r).unwrap()).collect();
    assert!(matches!(ht_proportion(&rows, &ind), Err(Error::SingleCluster(_))));
}

#[test]
fn imputed_variance_for_single_cluster_area() {
    let mut rows = fixture();
    rows.extend((0..6).map(|k| row("150102", 0, 50.0, 9.0 + k as f64)));
    let est = direct_estimates(&rows, anemia_indicator, None).unwrap();
    let single = est.iter().find(|e| e.area_id == "150102").unwrap();
    assert!(single.var_y > 0.0);
    assert!(single.flags.contains(Flag::SingleCluster));
    assert!(single.flags.contains(Flag::VarianceImputed));
    let other = est.iter().find(|e| e.area_id == "150101").unwrap();
    assert!(!other.flags.contains(Flag::VarianceImputed));
}

fn arb_rows() -> impl Strategy<Value = (Vec<(usize, f64, bool)>, f64)> {
    (prop::collection::vec((0usize..6, 0.1f64..500.0, any::<bool>()), 2..60), 0.01f64..100.0)
}

proptest! {
    #[test]
    fn proportion_invariants((spec, c) in arb_rows()) {
        let rows: Vec<SurveyRow> = spec.iter().map(|&(cl, w, _)| row("a", cl, w, 12.0)).collect();
        let ind: Vec<bool> = spec.iter().map(|s| s.2).collect();
        let Ok(base) = ht_proportion(&rows, &ind) else {
            // only the one-cluster case may fail
            let mut cl: Vec<usize> = spec.iter().map(|s| s.0).collect();
            cl.dedup();
            prop_assert!(cl.iter().all(|&x| x == cl[0]));
            return Ok(());
        };
        prop_assert!((0.0..=1.0).contains(&base.y));
        prop_assert!(base.var_y >= 0.0);

        let scaled: Vec<SurveyRow> = rows.iter().map(|r| SurveyRow { sampling_weight: r.sampling_weight * c, ..r.clone() }).collect();
        let s = ht_proportion(&scaled, &ind).unwrap();
        prop_assert!((s.y - base.y).abs() < 1e-12);

        let doubled: Vec<SurveyRow> = rows.iter().chain(rows.iter()).cloned().collect();
        let ind2: Vec<bool> = ind.iter().chain(ind.iter()).copied().collect();
        let d = ht_proportion(&doubled, &ind2).unwrap();
        prop_assert!((d.y - base.y).abs() < 1e-12);
    }
}
