use proptest::prelude::*;

use wbal_core::balance::{ess, weighted_ks, weighted_smd, BalanceEvaluator};
use wbal_core::data::{DesignMatrix, Estimand};
use wbal_core::outcome::fit_doubly_robust;
use wbal_core::overlap::{apply_trims, overlap_flags, TrimRule};
use wbal_core::weights::{compute_weights, fit_entropy_balance, Algorithm, Diagnostics, EngineConfig, WeightSet};

fn groups_and_values(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>, Vec<f64>)> {
    (4..max_n).prop_flat_map(|n| {
        (
            prop::collection::vec(-50.0..50.0f64, n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(0.01..10.0f64, n),
        )
            .prop_map(|(x, mut t, w)| {
                t[0] = true;
                t[1] = false;
                (x, t, w)
            })
    })
}

fn design(x: &[f64], t: &[bool], estimand: Estimand) -> DesignMatrix {
    let x2: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v * 0.37 + i as f64).sin()).collect();
    let y: Vec<f64> = x.iter().zip(t).map(|(v, &ti)| 0.3 * v + if ti { 2.0 } else { 0.0 } + v.cos()).collect();
    DesignMatrix::from_columns(t.to_vec(), &[("x", x.to_vec()), ("x2", x2)], y, estimand).unwrap()
}

fn weight_set(w: Vec<f64>) -> WeightSet {
    WeightSet {
        w,
        algorithm: Algorithm::Lr,
        estimand: Estimand::Ate,
        diagnostics: Diagnostics::default(),
        propensity: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ks_is_bounded_and_scale_free((x, t, w) in groups_and_values(40), c in 0.1..20.0f64) {
        let ks = weighted_ks(&x, &t, &w).unwrap();
        prop_assert!((0.0..=1.0).contains(&ks));
        // Rescaling one group leaves its normalized CDF unchanged.
        let w2: Vec<f64> = w.iter().zip(&t).map(|(v, &ti)| if ti { v * c } else { *v }).collect();
        prop_assert!((weighted_ks(&x, &t, &w2).unwrap() - ks).abs() < 1e-12);
    }

    #[test]
    fn smd_ignores_affine_rescaling((x, t, w) in groups_and_values(40), a in 0.1..10.0f64, b in -100.0..100.0f64) {
        for estimand in [Estimand::Ate, Estimand::Att] {
            let s = weighted_smd(&x, &t, &w, estimand).unwrap();
            let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let s2 = weighted_smd(&moved, &t, &w, estimand).unwrap();
            if s.is_finite() {
                prop_assert!((s - s2).abs() < 1e-8 * s.max(1.0), "{} vs {}", s, s2);
            }
        }
    }

    #[test]
    fn ess_between_one_and_n(w in prop::collection::vec(0.001..100.0f64, 1..200)) {
        let e = ess(&w);
        prop_assert!(e >= 1.0 - 1e-9 && e <= w.len() as f64 + 1e-9);
        prop_assert!((ess(&vec![1.0; w.len()]) - w.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn effect_ignores_weight_scale((x, t, w) in groups_and_values(60), c in 0.01..100.0f64) {
        prop_assume!(t.iter().filter(|&&v| v).count() >= 2 && t.iter().filter(|&&v| !v).count() >= 2);
        let dm = design(&x, &t, Estimand::Ate);
        let a = fit_doubly_robust(&dm, &weight_set(w.clone()));
        let b = fit_doubly_robust(&dm, &weight_set(w.iter().map(|v| v * c).collect()));
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!((a.effect - b.effect).abs() < 1e-7 * a.effect.abs().max(1.0));
            prop_assert!((a.treatment_row().se - b.treatment_row().se).abs() < 1e-7 * a.treatment_row().se.max(1.0));
        }
    }

    #[test]
    fn trims_never_keep_values_outside_cuts((x, t, _w) in groups_and_values(60), lo in -60.0..0.0f64, width in 0.0..80.0f64) {
        let dm = design(&x, &t, Estimand::Ate);
        let rule = TrimRule { confounder: "x".into(), lower_cut: Some(lo), upper_cut: Some(lo + width) };
        if let Ok((kept, removed)) = apply_trims(&dm, &[rule]) {
            prop_assert_eq!(kept.n() + removed.len(), dm.n());
            for v in kept.column_values(0) {
                prop_assert!(v >= lo && v <= lo + width);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn entropy_balance_weights_are_normalized_and_balance_means(
        (x, t, _w) in groups_and_values(80),
    ) {
        prop_assume!(t.iter().filter(|&&v| v).count() >= 3 && t.iter().filter(|&&v| !v).count() >= 3);
        let dm = design(&x, &t, Estimand::Att);
        let fit = fit_entropy_balance(&dm, 1, Estimand::Att);
        if let Ok(ws) = fit {
            let n0 = t.iter().filter(|&&v| !v).count() as f64;
            let s0: f64 = ws.w.iter().zip(&t).filter(|(_, &ti)| !ti).map(|(w, _)| w).sum();
            prop_assert!((s0 - n0).abs() < 1e-8 * n0);
            prop_assert!(ws.w.iter().all(|&v| v > 0.0));
            let bal = BalanceEvaluator::new(&dm).evaluate(&ws.w).unwrap();
            prop_assert!(bal.max_smd() < 1e-4, "{}", bal.max_smd());
        }
    }

    #[test]
    fn weights_respect_group_sizes((x, t, _w) in groups_and_values(80)) {
        prop_assume!(t.iter().filter(|&&v| v).count() >= 3 && t.iter().filter(|&&v| !v).count() >= 3);
        let dm = design(&x, &t, Estimand::Ate);
        for alg in [Algorithm::Lr, Algorithm::Cbps1, Algorithm::Eb1] {
            if let Ok(ws) = compute_weights(&dm, alg, &EngineConfig::default()) {
                prop_assert!(ws.w.iter().all(|v| v.is_finite() && *v >= 0.0));
                for group in [false, true] {
                    let gw: Vec<f64> = ws.w.iter().zip(&t).filter(|(_, &ti)| ti == group).map(|(w, _)| *w).collect();
                    prop_assert!(ess(&gw) <= gw.len() as f64 + 1e-9);
                }
            }
        }
    }
}

#[test]
fn contamination_reaching_the_quantiles_is_not_flagged() {
    // 200 rows per group on disjoint supports, with 2% of each group inside
    // the other's range so the [1%, 99%] ranges touch.
    let n = 200;
    let mut x = Vec::new();
    let mut t = Vec::new();
    for i in 0..n {
        let u = i as f64 / n as f64;
        x.push(if i < 4 { 5.0 + u } else { u });
        t.push(false);
        x.push(if i < 4 { u } else { 5.0 + u });
        t.push(true);
    }
    let dm = DesignMatrix::from_columns(t, &[("x", x)], vec![0.0; 2 * n], Estimand::Ate).unwrap();
    let flag = &overlap_flags(&dm)[0];
    assert!(!flag.flagged, "{flag:?}");
}

#[test]
fn disjoint_supports_are_flagged() {
    let n = 100;
    let x: Vec<f64> = (0..2 * n).map(|i| if i % 2 == 0 { (i as f64) / 200.0 } else { 5.0 + (i as f64) / 200.0 }).collect();
    let t: Vec<bool> = (0..2 * n).map(|i| i % 2 == 1).collect();
    let dm = DesignMatrix::from_columns(t, &[("x", x)], vec![0.0; 2 * n], Estimand::Ate).unwrap();
    assert!(overlap_flags(&dm)[0].flagged);
}
