//! Synthetic example dataset with confounded treatment assignment and a
//! known treatment effect.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal, Poisson};

use crate::data::{AnalysisSpec, CategoricalConfounder, Column, Dataset, Estimand};
use crate::error::{Error, Result};
use crate::stats;

/// Effect of `treat` on `ada_6` built into the generator.
pub const TRUE_EFFECT: f64 = 3.0;
pub const DEFAULT_SEED: u64 = 2021;
pub const DEFAULT_PER_GROUP: usize = 2000;

pub const NUMERIC_CONFOUNDERS: [&str; 11] = [
    "tss_0", "sfs8p_0", "eps7p_0", "ias5p_0", "dss9_0", "satl_0", "sp_sm_0", "gvs", "ers21_0", "ada_0", "recov_0",
];

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn zscore(v: &[f64]) -> Vec<f64> {
    let m = stats::mean(v);
    let s = stats::sd(v);
    v.iter().map(|x| (x - m) / s).collect()
}

fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Generates `2 · n_per_group` rows, exactly half of them treated.
///
/// Assignment follows a logit linear in several baseline scores (most
/// strongly `satl_0`, `eps7p_0` and `ada_0`). The outcome is
/// linear in every confounder plus [`TRUE_EFFECT`] for treated rows plus
/// normal noise, so the effect is the same for every estimand.
pub fn generate_example_dataset(seed: u64, n_per_group: usize) -> Result<Dataset> {
    if n_per_group < 50 {
        return Err(Error::InvalidInput("n_per_group must be at least 50".into()));
    }
    let n = 2 * n_per_group;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::<f64>::new(0.0, 1.0).unwrap();
    let sfs = Gamma::<f64>::new(0.9, 12.0).unwrap();
    let eps = Beta::<f64>::new(1.3, 4.0).unwrap();
    let ias = Gamma::<f64>::new(0.75, 12.4).unwrap();
    let satl = Gamma::<f64>::new(0.6, 42.0).unwrap();
    let ada = Beta::<f64>::new(1.0, 0.75).unwrap();

    let mut cols: Vec<Vec<f64>> = (0..13).map(|_| Vec::with_capacity(n)).collect();
    for _ in 0..n {
        let tss = if rng.random::<f64>() < 0.5 {
            0.0
        } else {
            (1.3 + 0.6 * normal.sample(&mut rng)).exp().round().min(13.0)
        };
        let sfs8p = sfs.sample(&mut rng).min(77.5);
        let eps7p = eps.sample(&mut rng);
        let ias5p = ias.sample(&mut rng).min(97.78);
        let dss9 = Poisson::<f64>::new(2.7).unwrap().sample(&mut rng).min(9.0);
        let mhtrt = categorical(&mut rng, &[0.78, 0.17, 0.05]) as f64;
        let satl0 = if rng.random::<f64>() < 0.8 {
            0.0
        } else {
            satl.sample(&mut rng).min(110.02)
        };
        let sp_rate = Gamma::<f64>::new(0.65, 4.2).unwrap().sample(&mut rng).max(1e-9);
        let sp_sm = Poisson::<f64>::new(sp_rate).unwrap().sample(&mut rng).min(16.0);
        let gvs_rate = Gamma::<f64>::new(1.0, 2.87).unwrap().sample(&mut rng).max(1e-9);
        let gvs = Poisson::<f64>::new(gvs_rate).unwrap().sample(&mut rng).min(14.0);
        let ers21 = (35.9 + 8.6 * normal.sample(&mut rng)).round().clamp(0.0, 78.0);
        let ada0 = (90.0 * ada.sample(&mut rng)).round();
        let recov = f64::from(u8::from(rng.random::<f64>() < 0.24));
        let subs = (1 + categorical(&mut rng, &[0.64, 0.32, 0.04])) as f64;
        for (k, v) in [
            tss, sfs8p, eps7p, ias5p, dss9, mhtrt, satl0, sp_sm, gvs, ers21, ada0, recov, subs,
        ]
        .into_iter()
        .enumerate()
        {
            cols[k].push(round2(v));
        }
    }
    let [tss, sfs8p, eps7p, ias5p, dss9, mhtrt, satl0, sp_sm, gvs, ers21, ada0, recov, subs] =
        <[Vec<f64>; 13]>::try_from(cols).expect("13 columns");

    let (z_satl, z_eps, z_ada, z_tss, z_ias, z_sfs) = (
        zscore(&satl0),
        zscore(&eps7p),
        zscore(&ada0),
        zscore(&tss),
        zscore(&ias5p),
        zscore(&sfs8p),
    );
    let score: Vec<f64> = (0..n)
        .map(|i| {
            let lin = 0.35 * z_satl[i] + 0.3 * z_eps[i] + 0.3 * z_ada[i] + 0.2 * z_tss[i]
                + 0.15 * z_ias[i]
                + 0.1 * z_sfs[i]
                + 0.15 * f64::from(u8::from(mhtrt[i] == 1.0))
                - 0.2 * f64::from(u8::from(subs[i] == 3.0));
            let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
            lin + (u / (1.0 - u)).ln()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut treat = vec![0.0; n];
    for &i in &order[..n_per_group] {
        treat[i] = 1.0;
    }

    let ada6: Vec<f64> = (0..n)
        .map(|i| {
            let mean = 53.0 + 0.5 * ada0[i] - 0.8 * tss[i] - 0.05 * sfs8p[i] - 8.0 * eps7p[i]
                - 0.15 * ias5p[i]
                - 0.4 * dss9[i]
                - 4.0 * f64::from(u8::from(mhtrt[i] == 1.0))
                - 5.0 * f64::from(u8::from(mhtrt[i] == 2.0))
                - 0.05 * satl0[i]
                + 0.1 * sp_sm[i]
                - 0.5 * gvs[i]
                - 0.2 * ers21[i]
                + 2.0 * recov[i]
                + 0.5 * f64::from(u8::from(subs[i] == 2.0))
                - 2.5 * f64::from(u8::from(subs[i] == 3.0))
                + TRUE_EFFECT * treat[i];
            round2(mean + 20.0 * normal.sample(&mut rng))
        })
        .collect();

    let numeric = |name: &str, v: Vec<f64>| Column::numeric(name, v.into_iter().map(Some).collect());
    Dataset::new(vec![
        numeric("treat", treat),
        numeric("tss_0", tss),
        numeric("sfs8p_0", sfs8p),
        numeric("eps7p_0", eps7p),
        numeric("ias5p_0", ias5p),
        numeric("dss9_0", dss9),
        numeric("mhtrt_0_categorical", mhtrt),
        numeric("satl_0", satl0),
        numeric("sp_sm_0", sp_sm),
        numeric("gvs", gvs),
        numeric("ers21_0", ers21),
        numeric("ada_0", ada0),
        numeric("ada_6", ada6),
        numeric("recov_0", recov),
        numeric("subsgrps_n_categorical", subs),
    ])
}

/// The analysis set-up matching the example dataset (ATT of `treat` on
/// `ada_6`, every other column a confounder).
pub fn example_spec(estimand: Estimand) -> AnalysisSpec {
    AnalysisSpec {
        treatment: "treat".into(),
        control_label: "0".into(),
        treatment_label: "1".into(),
        outcome: "ada_6".into(),
        numeric_confounders: NUMERIC_CONFOUNDERS.iter().map(|s| s.to_string()).collect(),
        categorical_confounders: vec![
            CategoricalConfounder {
                name: "mhtrt_0_categorical".into(),
                reference: "0".into(),
            },
            CategoricalConfounder {
                name: "subsgrps_n_categorical".into(),
                reference: "1".into(),
            },
        ],
        estimand,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_design, write_csv, Separator};

    #[test]
    fn shape_and_determinism() {
        let a = generate_example_dataset(9, 100).unwrap();
        let b = generate_example_dataset(9, 100).unwrap();
        assert_eq!(write_csv(&a, Separator::Comma), write_csv(&b, Separator::Comma));
        assert_eq!(a.n_rows(), 200);
        assert_eq!(a.columns().len(), 15);
        let t = a.column("treat").unwrap();
        let treated = (0..200).filter(|&r| t.numeric_value(r) == Some(1.0)).count();
        assert_eq!(treated, 100);
        let dm = encode_design(&a, &example_spec(Estimand::Att)).unwrap();
        assert_eq!(dm.p(), 15);
    }
}
