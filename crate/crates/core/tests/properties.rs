//! Exact properties checked against brute-force or independent computations.

use std::fs;

use proptest::prelude::*;
use psmi_core::datagen::{generate_dataset, GenerativeParams};
use psmi_core::glm::{expit, fit_logistic};
use psmi_core::harness::{self, parse_config, REPLICATES_FILE};
use psmi_core::matrix::Matrix;
use psmi_core::mice::{multiple_impute, pmm_impute_column};
use psmi_core::missingness::{induce_missingness, Mechanism, MdmSpec};
use psmi_core::psm::{estimate_ps, match_in_order};
use psmi_core::rng::StreamKey;
use psmi_core::strategies::{imputation_spec, populate_ps, MiImputation, MiIntegration, StrategySpec};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

mod common;
use common::brute_force_match;

fn matching_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>, f64)> {
    (2usize..=15)
        .prop_flat_map(|n| {
            (
                // a coarse grid makes exact distance ties common
                prop::collection::vec(1u32..20, n),
                prop::collection::vec(any::<bool>(), n),
                Just(n),
                0.0f64..2.0,
                any::<u64>(),
            )
        })
        .prop_map(|(grid, treated, n, width, seed)| {
            let ps: Vec<f64> = grid.iter().map(|&g| f64::from(g) / 20.0).collect();
            let t: Vec<f64> = treated.iter().map(|&b| f64::from(u8::from(b))).collect();
            let mut order: Vec<usize> = (0..n).filter(|&i| t[i] == 1.0).collect();
            let mut rng = StreamKey::root(seed).rng();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            (ps, t, order, width)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn greedy_matching_equals_brute_force((ps, t, order, width) in matching_instance()) {
        let got = match_in_order(&ps, &t, &order, width).unwrap();
        let (pairs, unmatched) = brute_force_match(&ps, &t, &order, width);
        prop_assert_eq!(got.pairs, pairs);
        prop_assert_eq!(got.unmatched_treated, unmatched);
    }
}

#[test]
fn logistic_score_equations_vanish_on_every_fit() {
    let mut rng = StreamKey::root(11).rng();
    let mut worst = 0.0f64;
    for fit_no in 0..1000 {
        let n = rng.random_range(60..400);
        let q = rng.random_range(1..4);
        let cols: Vec<Vec<f64>> = (0..q)
            .map(|j| {
                (0..n)
                    .map(|_| if j == 0 { f64::from(u8::from(rng.random::<bool>())) } else { StandardNormal.sample(&mut rng) })
                    .collect()
            })
            .collect();
        let beta: Vec<f64> = (0..=q).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Matrix::with_intercept(&cols);
        let y: Vec<f64> = (0..n).map(|i| f64::from(u8::from(rng.random::<f64>() < expit(x.row_dot(i, &beta))))).collect();
        let fit = fit_logistic(&x, &y).unwrap_or_else(|e| panic!("fit {fit_no}: {e}"));
        for j in 0..x.ncols() {
            let score: f64 = (0..n).map(|i| x.get(i, j) * (y[i] - fit.fitted[i])).sum();
            worst = worst.max(score.abs());
        }
    }
    assert!(worst < 1e-6, "largest score residual {worst:e}");
}

fn masked_dataset(seed: u64, mechanism: Mechanism, n: usize) -> psmi_core::datagen::Dataset {
    let params = GenerativeParams { n, ..GenerativeParams::default() };
    let key = StreamKey::root(seed);
    let d = generate_dataset(&params, &mut key.derive(0, 0).rng()).unwrap();
    induce_missingness(&d, &MdmSpec::new(mechanism), &mut key.derive(1, 0).rng()).unwrap()
}

#[test]
fn pmm_draws_only_observed_donor_values() {
    for seed in 0..200u64 {
        let mut rng = StreamKey::root(seed).rng();
        let n = rng.random_range(20..120);
        let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let values: Vec<f64> = xs.iter().map(|&v| 2.0 * v + { let e: f64 = StandardNormal.sample(&mut rng); e }).collect();
        let missing: Vec<bool> = (0..n).map(|i| i >= 5 && rng.random::<f64>() < 0.4).collect();
        let donors = rng.random_range(1..8);
        let out = pmm_impute_column(&values, &missing, &Matrix::from_columns(&[xs]), donors, &mut rng).unwrap();
        let observed: Vec<f64> = (0..n).filter(|&i| !missing[i]).map(|i| values[i]).collect();
        for i in 0..n {
            if missing[i] {
                assert!(observed.contains(&out[i]), "seed {seed} row {i}: {} is not a donor value", out[i]);
            } else {
                assert_eq!(out[i], values[i]);
            }
        }
    }
}

#[test]
fn mice_completions_draw_x2_and_zps_from_observed_values() {
    let d = masked_dataset(5, Mechanism::Mcar, 400);
    let spec = StrategySpec::mi(MiImputation::RegActive, MiIntegration::Within).with_m(3);
    let stack = multiple_impute(&d, &imputation_spec(&spec).unwrap(), StreamKey::root(9)).unwrap();
    let observed_ps: Vec<f64> = d.ps_full.clone();
    for c in &stack.completions {
        for i in 0..d.len() {
            let v = c.x2[i].expect("completed");
            assert!(v <= 1);
            if let Some(o) = d.x2[i] {
                assert_eq!(v, o);
            }
        }
    }
    for ps in stack.imputed_ps.as_ref().expect("active score") {
        assert_eq!(ps.len(), observed_ps.len());
        assert!(ps.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn passive_scores_equal_a_fresh_fit_on_each_completion() {
    for seed in 0..5u64 {
        let d = masked_dataset(seed, Mechanism::Mar2A, 600);
        let spec = StrategySpec::mi(MiImputation::DerPassive, MiIntegration::Within).with_m(4);
        let mut stack = multiple_impute(&d, &imputation_spec(&spec).unwrap(), StreamKey::root(seed + 100)).unwrap();
        populate_ps(&mut stack, MiImputation::DerPassive).unwrap();
        for (k, c) in stack.completions.iter().enumerate() {
            let x2: Vec<f64> = c.x2.iter().map(|v| f64::from(v.unwrap())).collect();
            let (ps, coef) = estimate_ps(&c.x1_f64(), &x2, &c.t_f64()).unwrap();
            for i in 0..d.len() {
                assert!((stack.ps[k][i] - ps[i]).abs() < 1e-12);
                let linear = coef[0] + coef[1] * c.x1_f64()[i] + coef[2] * x2[i];
                assert!((stack.ps[k][i] - expit(linear)).abs() < 1e-12);
            }
            assert_eq!(stack.ps_coefficients[k], coef.to_vec());
        }
    }
}

fn small_scenario(out: &std::path::Path, parallelism: usize, nsim: usize) -> harness::ScenarioConfig {
    let text = format!(
        r#"{{"strategies": ["full_data", "missing_indicator", "mi:derPassive:within", "mi:redActive:across2"],
            "nsim": {nsim}, "n": 500, "m": 3, "mechanism": "MAR1", "master_seed": 42,
            "parallelism": {parallelism}, "output_dir": {out:?}}}"#
    );
    parse_config(&text).unwrap()
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("p1");
    let b = dir.path().join("p8");
    harness::run_scenario(&small_scenario(&a, 1, 12)).unwrap();
    harness::run_scenario(&small_scenario(&b, 8, 12)).unwrap();
    let ca = fs::read(a.join(REPLICATES_FILE)).unwrap();
    let cb = fs::read(b.join(REPLICATES_FILE)).unwrap();
    assert!(!ca.is_empty());
    assert_eq!(ca, cb);
}

#[test]
fn resumed_run_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let reference = harness::run_scenario(&small_scenario(&full, 2, 6)).unwrap();

    harness::run_scenario(&small_scenario(&part, 2, 6)).unwrap();
    let journal = part.join(harness::JOURNAL_FILE);
    let text = fs::read_to_string(&journal).unwrap();
    let mut lines: Vec<&str> = text.lines().take(4).collect();
    // a crash mid-write leaves a torn line behind
    let torn = &text.lines().nth(4).unwrap()[..20];
    lines.push(torn);
    fs::write(&journal, lines.join("\n")).unwrap();
    fs::remove_file(part.join(REPLICATES_FILE)).unwrap();

    let resumed = harness::run_scenario(&small_scenario(&part, 2, 6)).unwrap();
    assert_eq!(resumed.records, reference.records);
    assert_eq!(fs::read(full.join(REPLICATES_FILE)).unwrap(), fs::read(part.join(REPLICATES_FILE)).unwrap());
}

#[test]
fn changed_config_discards_the_journal() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    harness::run_scenario(&small_scenario(&out, 1, 3)).unwrap();
    let mut cfg = small_scenario(&out, 1, 3);
    cfg.master_seed = 43;
    let other = harness::run_scenario(&cfg).unwrap();
    let fresh_dir = dir.path().join("fresh");
    let mut fresh_cfg = cfg.clone();
    fresh_cfg.output_dir = fresh_dir;
    let fresh = harness::run_scenario(&fresh_cfg).unwrap();
    assert_eq!(other.records, fresh.records);
}
