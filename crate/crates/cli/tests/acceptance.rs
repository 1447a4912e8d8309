//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Runs without the libtest harness so the lines are
//! always shown.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use wbal_core::balance::{ess, format_percent, recommend, weighted_ks, weighted_smd, AlgorithmSummary, BalanceEvaluator};
use wbal_core::data::{encode_design, DesignMatrix, Estimand};
use wbal_core::example::{example_spec, generate_example_dataset, DEFAULT_PER_GROUP, DEFAULT_SEED, TRUE_EFFECT};
use wbal_core::outcome::fit_doubly_robust;
use wbal_core::sensitivity::{sensitivity_grid, GridSpec, RunControl, SensitivityConfig};
use wbal_core::weights::{
    compute_weights, fit_gbm_path, fit_logistic, Algorithm, EngineConfig, EntropyDual, GbmParams, LogisticOptions,
    MomentExpansion, StopRule,
};

const SMD_EXACT_TOL: f64 = 1e-4;
const LR_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-5;
const KS_BALANCED: f64 = 0.1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let in_time = limit.is_none_or(|l| took <= l);
    let pass = out.pass && in_time;
    let limit_note = limit.map(|l| format!(" (limit {}s)", l.as_secs_f64())).unwrap_or_default();
    println!(
        "{} {name}: {} [{:.2}s{limit_note}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
    pass
}

fn example_design() -> DesignMatrix {
    let data = generate_example_dataset(DEFAULT_SEED, DEFAULT_PER_GROUP).unwrap();
    encode_design(&data, &example_spec(Estimand::Att)).unwrap()
}

fn ess_parity() -> Outcome {
    let uniform = ess(&vec![1.0; 4000]);
    let full = format_percent(100.0 * uniform / 4000.0);
    let partial = format_percent(100.0 * 3757.0 / 4000.0);
    Outcome {
        pass: uniform == 4000.0 && full == "100%" && partial == "94%",
        detail: format!("ess(uniform)={uniform} -> {full}; 3757/4000 -> {partial}"),
    }
}

fn exact_balance(dm: &DesignMatrix) -> Outcome {
    let engine = EngineConfig::default();
    let algorithms = [
        (Algorithm::Eb1, 1),
        (Algorithm::Eb2, 2),
        (Algorithm::Eb3, 3),
        (Algorithm::Cbps1, 1),
        (Algorithm::Cbps2, 2),
        (Algorithm::Cbps3, 3),
    ];
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for (alg, m) in algorithms {
        let ws = match compute_weights(dm, alg, &engine) {
            Ok(ws) => ws,
            Err(e) => {
                notes.push(format!("{alg} failed: {e}"));
                worst = f64::INFINITY;
                continue;
            }
        };
        let mx = MomentExpansion::new(dm, m).unwrap();
        let mut alg_worst: f64 = 0.0;
        for j in 0..mx.z.ncols() {
            let col: Vec<f64> = mx.z.column(j).iter().copied().collect();
            let smd = weighted_smd(&col, dm.treated(), &ws.w, dm.weighting_estimand()).unwrap();
            alg_worst = alg_worst.max(smd);
        }
        notes.push(format!("{alg} {alg_worst:.1e}"));
        worst = worst.max(alg_worst);
    }
    Outcome {
        pass: worst < SMD_EXACT_TOL,
        detail: format!("max weighted SMD over moment columns {} (tol {SMD_EXACT_TOL:e})", notes.join(", ")),
    }
}

fn naive_ks(x: &[f64], t: &[bool], w: &[f64]) -> f64 {
    let mut best: f64 = 0.0;
    for &v in x {
        let (mut a1, mut s1, mut a0, mut s0) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..x.len() {
            if t[i] {
                s1 += w[i];
                if x[i] <= v {
                    a1 += w[i];
                }
            } else {
                s0 += w[i];
                if x[i] <= v {
                    a0 += w[i];
                }
            }
        }
        best = best.max((a1 / s1 - a0 / s0).abs());
    }
    best
}

fn ks_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=20);
        let x: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) * 0.5).collect();
        let mut t: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        t[0] = true;
        t[1] = false;
        // Multiples of 1/16 keep every partial sum exact.
        let w: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(1..64u8)) / 16.0).collect();
        if weighted_ks(&x, &t, &w).unwrap() != naive_ks(&x, &t, &w) {
            mismatches += 1;
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("{mismatches}/1000 instances differ from the double loop"),
    }
}

fn deviance(a: &DMatrix<f64>, y: &[bool], beta: &[f64]) -> f64 {
    let lp = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    (0..a.nrows())
        .map(|i| {
            let eta: f64 = (0..a.ncols()).map(|j| a[(i, j)] * beta[j]).sum();
            2.0 * if y[i] { lp(-eta) } else { lp(eta) }
        })
        .sum()
}

fn nelder_mead(f: impl Fn(&[f64]) -> f64, start: &[f64]) -> Vec<f64> {
    let k = start.len();
    let mut best = start.to_vec();
    for restart in 0..30 {
        let step = 1.0 / (1.0 + restart as f64);
        let mut simplex: Vec<Vec<f64>> = vec![best.clone()];
        for j in 0..k {
            let mut p = best.clone();
            p[j] += step;
            simplex.push(p);
        }
        let mut vals: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
        for _ in 0..20_000 {
            let mut idx: Vec<usize> = (0..=k).collect();
            idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
            simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
            vals = idx.iter().map(|&i| vals[i]).collect();
            if (vals[k] - vals[0]).abs() < 1e-15 * (1.0 + vals[0].abs()) {
                break;
            }
            let centroid: Vec<f64> = (0..k).map(|j| simplex[..k].iter().map(|p| p[j]).sum::<f64>() / k as f64).collect();
            let along = |c: f64| -> Vec<f64> { (0..k).map(|j| centroid[j] + c * (simplex[k][j] - centroid[j])).collect() };
            let r = along(-1.0);
            let fr = f(&r);
            if fr < vals[0] {
                let e = along(-2.0);
                let fe = f(&e);
                if fe < fr {
                    simplex[k] = e;
                    vals[k] = fe;
                } else {
                    simplex[k] = r;
                    vals[k] = fr;
                }
            } else if fr < vals[k - 1] {
                simplex[k] = r;
                vals[k] = fr;
            } else {
                let c = if fr < vals[k] { along(-0.5) } else { along(0.5) };
                let fc = f(&c);
                if fc < vals[k].min(fr) {
                    simplex[k] = c;
                    vals[k] = fc;
                } else {
                    for i in 1..=k {
                        simplex[i] = (0..k).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                        vals[i] = f(&simplex[i]);
                    }
                }
            }
        }
        let i = (0..=k).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        let moved = simplex[i].iter().zip(&best).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        best = simplex[i].clone();
        if moved < 1e-10 && restart > 2 {
            break;
        }
    }
    best
}

fn lr_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(60..=200);
        let p = rng.random_range(1..=5);
        let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let beta: Vec<f64> = (0..=p).map(|_| rng.random_range(-0.8..0.8)).collect();
        let y: Vec<bool> = (0..n)
            .map(|i| {
                let eta = beta[0] + (0..p).map(|j| beta[j + 1] * x[(i, j)]).sum::<f64>();
                rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())
            })
            .collect();
        let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
        let fit = match fit_logistic(&x, &y, None, &names, &LogisticOptions::default()) {
            Ok(f) => f,
            Err(_) => {
                worst = f64::INFINITY;
                continue;
            }
        };
        let a = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
        let brute = nelder_mead(|b| deviance(&a, &y, b), &vec![0.0; p + 1]);
        let mut ours = vec![fit.intercept];
        ours.extend(&fit.coefficients);
        for (o, b) in ours.iter().zip(&brute) {
            worst = worst.max((o - b).abs());
        }
    }
    Outcome {
        pass: worst < LR_TOL,
        detail: format!("max |IRLS - Nelder-Mead| over 50 datasets = {worst:.2e} (tol {LR_TOL:e})"),
    }
}

fn eb_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(5..=60);
        let k = rng.random_range(1..=4);
        let c = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
        let target = DVector::from_fn(k, |_, _| rng.random_range(-0.5..0.5));
        let dual = EntropyDual::new(&c, &target);
        let lambda = DVector::from_fn(dual.dim(), |_, _| rng.random_range(-1.0..1.0));
        let g = dual.gradient(&lambda);
        let fd = DVector::from_fn(dual.dim(), |j, _| {
            let mut up = lambda.clone();
            let mut down = lambda.clone();
            up[j] += FD_STEP;
            down[j] -= FD_STEP;
            (dual.value(&up) - dual.value(&down)) / (2.0 * FD_STEP)
        });
        worst = worst.max((&g - &fd).norm() / g.norm().max(1e-3));
    }
    Outcome {
        pass: worst < FD_REL_TOL,
        detail: format!("max relative error at 100 points = {worst:.2e} (tol {FD_REL_TOL:e})"),
    }
}

/// One replication: `ps_nonlinear` makes the logistic model wrong,
/// otherwise the outcome mean is nonlinear and the regression is wrong.
fn dr_replication(rng: &mut ChaCha8Rng, ps_nonlinear: bool) -> f64 {
    let n = 1500;
    let x1: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let x2: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let t: Vec<bool> = (0..n)
        .map(|i| {
            let eta = if ps_nonlinear {
                -1.0 + 0.8 * x1[i] * x1[i] - 0.4 * x2[i]
            } else {
                -0.3 + 0.8 * x1[i] - 0.5 * x2[i]
            };
            rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())
        })
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let noise: f64 = StandardNormal.sample(rng);
            let mean = if ps_nonlinear {
                1.0 + 2.0 * x1[i] - x2[i]
            } else {
                1.0 + 1.5 * x1[i] * x1[i] + x1[i] * x2[i] + (2.0 * x2[i]).sin()
            };
            mean + TRUE_EFFECT * f64::from(u8::from(t[i])) + noise
        })
        .collect();
    let dm = DesignMatrix::from_columns(t, &[("x1", x1), ("x2", x2)], y, Estimand::Att).unwrap();
    let ws = compute_weights(&dm, Algorithm::Lr, &EngineConfig::default()).unwrap();
    fit_doubly_robust(&dm, &ws).unwrap().effect
}

fn double_robustness() -> Outcome {
    let reps = 200;
    let mut pass = true;
    let mut notes = Vec::new();
    for (label, ps_nonlinear, seed) in [("correct PS/wrong outcome", false, 404), ("wrong PS/correct outcome", true, 505)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est: Vec<f64> = (0..reps).map(|_| dr_replication(&mut rng, ps_nonlinear)).collect();
        let mean = est.iter().sum::<f64>() / reps as f64;
        let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let mc_se = (var / reps as f64).sqrt();
        let ok = (mean - TRUE_EFFECT).abs() < 2.0 * mc_se;
        pass &= ok;
        notes.push(format!("{label}: mean {mean:.4}, |bias| {:.4} vs 2*MC-se {:.4}", (mean - TRUE_EFFECT).abs(), 2.0 * mc_se));
    }
    Outcome {
        pass,
        detail: notes.join("; "),
    }
}

fn gbm_stopping(dm: &DesignMatrix) -> Outcome {
    let path = fit_gbm_path(dm, dm.weighting_estimand(), &GbmParams::default()).unwrap();
    let evaluator = BalanceEvaluator::new(dm);
    let mut pass = true;
    let mut notes = Vec::new();
    for rule in [StopRule::MeanSmd, StopRule::MaxKs] {
        let crit = path.criterion(rule);
        let trees = path.chosen_trees(rule);
        let idx = path.iterations.iter().position(|&i| i == trees).unwrap();
        let minimal = crit.iter().all(|&c| crit[idx] <= c);
        let ws = path.select(rule).into_weights(dm.treated(), dm.weighting_estimand());
        let max_ks = evaluator.evaluate(&ws.w).unwrap().max_ks();
        pass &= minimal && max_ks < KS_BALANCED;
        notes.push(format!(
            "{}: {trees} trees, minimal over {} evaluations: {minimal}, max_ks {max_ks:.4}",
            rule.algorithm(),
            crit.len()
        ));
    }
    Outcome {
        pass,
        detail: notes.join("; "),
    }
}

fn recommendation_tie() -> Outcome {
    let row = |algorithm, max_smd, max_ks, ess| AlgorithmSummary {
        algorithm,
        max_smd,
        max_ks,
        ess,
    };
    let rows = vec![
        row(Algorithm::Lr, 0.06, 0.09, 3300.0),
        row(Algorithm::Cbps1, 0.0, 0.08, 3650.0),
        row(Algorithm::GbmKs, 0.05, 0.04, 3569.0),
        row(Algorithm::GbmEs, 0.04, 0.04, 3584.0),
        row(Algorithm::Eb1, 0.0, 0.12, 3800.0),
    ];
    let mut reversed = rows.clone();
    reversed.reverse();
    let a = recommend(&rows).map(|r| r.algorithm);
    let b = recommend(&reversed).map(|r| r.algorithm);
    Outcome {
        pass: a == Some(Algorithm::GbmEs) && b == Some(Algorithm::GbmEs),
        detail: format!("GBM_ES (ESS 3584) vs GBM_KS (ESS 3569) tied on max_ks -> {a:?} / {b:?}"),
    }
}

fn sensitivity_null(dm: &DesignMatrix) -> Outcome {
    let engine = EngineConfig::default();
    let ws = compute_weights(dm, Algorithm::Lr, &engine).unwrap();
    let baseline = fit_doubly_robust(dm, &ws).unwrap();
    let cfg = SensitivityConfig {
        grid: GridSpec::point(0.0, 0.0),
        draws: 200,
        seed: 17,
    };
    let run = |parallel| {
        sensitivity_grid(
            dm,
            &ws,
            &baseline,
            &engine,
            &cfg,
            RunControl {
                parallel,
                ..RunControl::default()
            },
        )
        .unwrap()
    };
    let par = run(true);
    let seq = run(false);
    let (Some(effect), Some(mc_se)) = (par.effect_surface[0], par.effect_mc_se[0]) else {
        return Outcome {
            pass: false,
            detail: "null cell is missing".into(),
        };
    };
    let diff = (effect - baseline.effect).abs();
    let identical = par == seq;
    Outcome {
        pass: diff < 3.0 * mc_se && identical,
        detail: format!(
            "cell {effect:.5} vs baseline {:.5}: |diff| {diff:.2e} < 3*MC-se {:.2e}: {}; parallel == sequential: {identical}",
            baseline.effect,
            3.0 * mc_se,
            diff < 3.0 * mc_se
        ),
    }
}

fn cli_run(config: &Path, out: &Path, extra: &[&str]) -> bool {
    let mut args = vec!["--config", config.to_str().unwrap(), "--output", out.to_str().unwrap(), "--quiet"];
    args.extend_from_slice(extra);
    Command::new(env!("CARGO_BIN_EXE_wbal"))
        .args(&args)
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = serde_json::to_value(example_spec(Estimand::Att)).unwrap();
    let config = serde_json::json!({
        "example": {"seed": DEFAULT_SEED, "n_per_group": DEFAULT_PER_GROUP},
        "spec": spec,
        "choice": "auto",
        "sensitivity": {"enabled": true, "draws": 5, "seed": 3,
                        "grid": {"es_min": 0.0, "es_max": 0.4, "es_points": 3,
                                 "rho_min": 0.0, "rho_max": 0.4, "rho_points": 3}}
    });
    let path = dir.path().join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    if !cli_run(&path, &a, &[]) || !cli_run(&path, &b, &["--workers", "2"]) {
        return Outcome {
            pass: false,
            detail: "a run exited with an error".into(),
        };
    }
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok())
        .collect();
    Outcome {
        pass: differing.is_empty() && names.len() >= 5,
        detail: format!("{} artifacts compared ({}); differing: {differing:?}", names.len(), names.join(", ")),
    }
}

fn main() {
    let dm = example_design();
    let secs = Duration::from_secs;
    let results = [
        check("ESS arithmetic parity", Some(secs(1)), ess_parity),
        check("EB/CBPS exact moment balance on the example data", Some(secs(30)), || exact_balance(&dm)),
        check("weighted KS equals the naive oracle", Some(secs(5)), ks_oracle),
        check("logistic IRLS matches brute-force deviance minimum", None, lr_oracle),
        check("entropy dual gradient matches central differences", None, eb_gradient),
        check("doubly robust estimate is unbiased in both arms", Some(secs(300)), double_robustness),
        check("GBM stopping picks the criterion minimum; both rules balance", Some(secs(120)), || gbm_stopping(&dm)),
        check("recommendation breaks KS ties by ESS", None, recommendation_tie),
        check("sensitivity null cell reproduces the baseline", None, || sensitivity_null(&dm)),
        check("CLI runs are byte-identical", None, cli_determinism),
    ];
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
