//! Independent oracles: nalgebra for the linear algebra, closed forms and
//! large Monte Carlo draws for the generator.

use nalgebra::{DMatrix, DVector};
use psmi_core::datagen::{calibrate_treatment_intercept, cell_probabilities, generate_dataset, GenerativeParams};
use psmi_core::glm::{expit, fit_linear, fit_logistic, robust_cluster_vcov};
use psmi_core::matrix::Matrix;
use psmi_core::missingness::{induce_missingness, Mechanism, MdmSpec};
use psmi_core::rng::StreamKey;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m.get(i, j))
}

fn random_design(n: usize, q: usize, seed: u64) -> (Matrix, Vec<f64>) {
    let mut rng = StreamKey::root(seed).rng();
    let cols: Vec<Vec<f64>> = (0..q).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let x = Matrix::with_intercept(&cols);
    let y: Vec<f64> = (0..n)
        .map(|i| 1.0 + cols.iter().enumerate().map(|(j, c)| (j as f64 + 1.0) * c[i]).sum::<f64>() + { let e: f64 = StandardNormal.sample(&mut rng); e })
        .collect();
    (x, y)
}

#[test]
fn ols_matches_nalgebra() {
    for seed in 0..20 {
        let (x, y) = random_design(40, 3, seed);
        let fit = fit_linear(&x, &y).unwrap();
        let xn = to_na(&x);
        let yn = DVector::from_vec(y.clone());
        let xtx_inv = (xn.transpose() * &xn).try_inverse().unwrap();
        let beta = &xtx_inv * xn.transpose() * &yn;
        let resid = &yn - &xn * &beta;
        let s2 = resid.dot(&resid) / (40.0 - 4.0);
        for j in 0..4 {
            assert!((fit.coefficients[j] - beta[j]).abs() < 1e-10);
            for k in 0..4 {
                assert!((fit.covariance_model.get(j, k) - s2 * xtx_inv[(j, k)]).abs() < 1e-10);
            }
        }
    }
}

fn sandwich_oracle(x: &DMatrix<f64>, resid: &DVector<f64>, bread: &DMatrix<f64>, clusters: &[usize]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut meat = DMatrix::zeros(p, p);
    let mut ids: Vec<usize> = clusters.to_vec();
    ids.sort_unstable();
    ids.dedup();
    for g in ids {
        let mut s = DVector::zeros(p);
        for i in (0..x.nrows()).filter(|&i| clusters[i] == g) {
            s += x.row(i).transpose() * resid[i];
        }
        meat += &s * s.transpose();
    }
    let bi = bread.clone().try_inverse().unwrap();
    &bi * meat * &bi
}

#[test]
fn six_row_sandwich_matches_hand_computation() {
    let x = Matrix::with_intercept(&[vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0], vec![0.5, 1.5, -0.3, 2.0, 0.1, -1.0]]);
    let y = vec![3.0, 1.0, 2.5, 0.2, 4.0, -0.5];
    let clusters = [0, 0, 1, 1, 2, 2];
    let fit = fit_linear(&x, &y).unwrap();
    let v = robust_cluster_vcov(&fit, &x, &y, &clusters).unwrap();
    let xn = to_na(&x);
    let resid = DVector::from_vec(y.iter().zip(&fit.fitted).map(|(a, b)| a - b).collect());
    let oracle = sandwich_oracle(&xn, &resid, &(xn.transpose() * &xn), &clusters);
    for j in 0..3 {
        for k in 0..3 {
            assert!((v.get(j, k) - oracle[(j, k)]).abs() < 1e-10, "({j},{k})");
        }
    }
}

#[test]
fn duplicated_rows_in_shared_clusters_reproduce_singleton_sandwich() {
    let (x, y) = random_design(25, 2, 7);
    let single: Vec<usize> = (0..25).collect();
    let fit = fit_linear(&x, &y).unwrap();
    let v1 = robust_cluster_vcov(&fit, &x, &y, &single).unwrap();

    let rows: Vec<usize> = (0..25).flat_map(|i| [i, i]).collect();
    let x2 = x.select_rows(&rows);
    let y2: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let fit2 = fit_linear(&x2, &y2).unwrap();
    let v2 = robust_cluster_vcov(&fit2, &x2, &y2, &rows).unwrap();
    assert!(v1.max_abs_diff(&v2) < 1e-12);
}

#[test]
fn logistic_sandwich_matches_nalgebra() {
    let mut rng = StreamKey::root(3).rng();
    let xs: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
    let y: Vec<f64> = xs.iter().map(|&v| f64::from(rng.random::<f64>() < expit(-0.3 + 0.8 * v))).collect();
    let x = Matrix::with_intercept(&[xs]);
    let clusters: Vec<usize> = (0..200).map(|i| i / 4).collect();
    let fit = fit_logistic(&x, &y).unwrap();
    let v = robust_cluster_vcov(&fit, &x, &y, &clusters).unwrap();
    let xn = to_na(&x);
    let w = DMatrix::from_diagonal(&DVector::from_iterator(200, fit.fitted.iter().map(|m| m * (1.0 - m))));
    let bread = xn.transpose() * w * &xn;
    let resid = DVector::from_vec(y.iter().zip(&fit.fitted).map(|(a, b)| a - b).collect());
    let oracle = sandwich_oracle(&xn, &resid, &bread, &clusters);
    assert!((v.get(1, 1) - oracle[(1, 1)]).abs() < 1e-10);
    let model_oracle = bread.try_inverse().unwrap();
    assert!((fit.covariance_model.get(1, 1) - model_oracle[(1, 1)]).abs() < 1e-8);
}

fn log_lik(x: &Matrix, y: &[f64], beta: &[f64]) -> f64 {
    (0..y.len())
        .map(|i| {
            let e = x.row_dot(i, beta);
            y[i] * e - (1.0 + e.exp()).ln()
        })
        .sum()
}

#[test]
fn logistic_solution_is_a_stationary_point_by_finite_differences() {
    for seed in 0..10 {
        let mut rng = StreamKey::root(100 + seed).rng();
        let a: Vec<f64> = (0..150).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..150).map(|_| f64::from(rng.random::<bool>())).collect();
        let y: Vec<f64> = (0..150).map(|i| f64::from(rng.random::<f64>() < expit(0.2 + 0.7 * a[i] - 0.5 * b[i]))).collect();
        let x = Matrix::with_intercept(&[a, b]);
        let fit = fit_logistic(&x, &y).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            let mut up = fit.coefficients.clone();
            let mut dn = fit.coefficients.clone();
            up[j] += h;
            dn[j] -= h;
            let g = (log_lik(&x, &y, &up) - log_lik(&x, &y, &dn)) / (2.0 * h);
            assert!(g.abs() < 1e-5, "seed {seed} coef {j}: {g}");
        }
    }
}

#[test]
fn orthant_probability_matches_latent_monte_carlo() {
    let p = cell_probabilities(0.5);
    assert!((p[3] - 1.0 / 3.0).abs() < 1e-15);
    let mut rng = StreamKey::root(11).rng();
    let n = 1_000_000;
    let rho: f64 = 0.5;
    let mut both = 0usize;
    for _ in 0..n {
        let u: f64 = StandardNormal.sample(&mut rng);
        let v: f64 = StandardNormal.sample(&mut rng);
        let w = rho * u + (1.0 - rho * rho).sqrt() * v;
        both += usize::from(u > 0.0 && w > 0.0);
    }
    assert!((both as f64 / n as f64 - 1.0 / 3.0).abs() < 0.002);
}

#[test]
fn calibrated_intercept_gives_thirty_percent_treated_at_scale() {
    let params = GenerativeParams { n: 1_000_000, ..Default::default() };
    let a0 = calibrate_treatment_intercept(&params).unwrap();
    let f = (expit(a0) + expit(a0 + 2.0) + expit(a0 + 4.0)) / 3.0;
    assert!((f - 0.30).abs() < 1e-10);
    let d = generate_dataset(&params, &mut StreamKey::root(12).rng()).unwrap();
    let frac = d.n_treated() as f64 / d.len() as f64;
    assert!((frac - 0.30).abs() < 0.002, "{frac}");
}

#[test]
fn generator_margins_and_correlations() {
    let d = generate_dataset(&GenerativeParams::default(), &mut StreamKey::root(13).rng()).unwrap();
    let n = d.len() as f64;
    let x1 = d.x1_f64();
    let x2 = d.x2_true_f64();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let corr = |a: &[f64], b: &[f64]| {
        let (ma, mb) = (mean(a), mean(b));
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va * vb).sqrt()
    };
    let bound = 3.0 / (2.0 * n.sqrt());
    assert!((mean(&x1) - 0.5).abs() < bound);
    assert!((mean(&x2) - 0.5).abs() < bound);
    assert!((corr(&x1, &x2) - 1.0 / 3.0).abs() < 0.05);
    assert!(corr(&d.z2, &x2) >= 0.95);
    let frac = d.n_treated() as f64 / n;
    assert!((0.27..=0.33).contains(&frac));
}

#[test]
fn full_cohort_regression_recovers_treatment_effect() {
    let d = generate_dataset(&GenerativeParams::default(), &mut StreamKey::root(14).rng()).unwrap();
    let x = Matrix::with_intercept(&[d.t_f64(), d.x1_f64(), d.x2_true_f64()]);
    let fit = fit_linear(&x, &d.y).unwrap();
    let se = fit.standard_errors()[1];
    assert!((fit.coefficients[1] - 2.0).abs() < 3.0 * se);
}

#[test]
fn mar1_missingness_separates_cells() {
    let params = GenerativeParams { n: 10_000, ..Default::default() };
    let d = generate_dataset(&params, &mut StreamKey::root(15).rng()).unwrap();
    let m = induce_missingness(&d, &MdmSpec::new(Mechanism::Mar1), &mut StreamKey::root(16).rng()).unwrap();
    let yb = psmi_core::datagen::dichotomize_at_median(&d.y);
    let rate = |t: u8| {
        let rows: Vec<usize> = (0..d.len()).filter(|&i| d.t[i] == t && yb[i] == 1).collect();
        rows.iter().filter(|&&i| m.x2[i].is_none()).count() as f64 / rows.len() as f64
    };
    assert!(rate(1) - rate(0) > 0.3);
}

#[test]
fn mar1_without_coefficients_is_independent_of_cells() {
    let params = GenerativeParams { n: 20_000, ..Default::default() };
    let d = generate_dataset(&params, &mut StreamKey::root(17).rng()).unwrap();
    let spec = MdmSpec { gamma11: 0.0, gamma00: 0.0, ..MdmSpec::new(Mechanism::Mar1) };
    let m = induce_missingness(&d, &spec, &mut StreamKey::root(18).rng()).unwrap();
    let yb = psmi_core::datagen::dichotomize_at_median(&d.y);
    // 2x4 chi-square over (t, yb) cells against missingness
    let mut counts = [[0.0f64; 2]; 4];
    for i in 0..d.len() {
        let cell = usize::from(d.t[i]) * 2 + usize::from(yb[i]);
        counts[cell][usize::from(m.x2[i].is_none())] += 1.0;
    }
    let n = d.len() as f64;
    let col: [f64; 2] = [0, 1].map(|k| counts.iter().map(|r| r[k]).sum());
    let mut chi = 0.0;
    for r in &counts {
        let rs = r[0] + r[1];
        for k in 0..2 {
            let e = rs * col[k] / n;
            chi += (r[k] - e).powi(2) / e;
        }
    }
    // 0.999 quantile of chi-square with 3 df
    assert!(chi < 16.27, "{chi}");
}

#[test]
fn mcar_missing_rows_share_the_x2_distribution() {
    let params = GenerativeParams { n: 10_000, ..Default::default() };
    let d = generate_dataset(&params, &mut StreamKey::root(19).rng()).unwrap();
    let m = induce_missingness(&d, &MdmSpec::new(Mechanism::Mcar), &mut StreamKey::root(20).rng()).unwrap();
    let (mut a, mut na, mut b, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..d.len() {
        if m.x2[i].is_none() {
            a += f64::from(d.x2_true[i]);
            na += 1.0;
        } else {
            b += f64::from(d.x2_true[i]);
            nb += 1.0;
        }
    }
    let (pa, pb) = (a / na, b / nb);
    let p = (a + b) / (na + nb);
    let z = (pa - pb) / (p * (1.0 - p) * (1.0 / na + 1.0 / nb)).sqrt();
    assert!(z.abs() < 3.29, "{z}");
}
