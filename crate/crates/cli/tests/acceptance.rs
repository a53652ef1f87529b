//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them). The heavy synthetic
//! scenario is fitted once and shared.

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{arr1, arr2, Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use orchamp_core::bundle::{HighBundle, ModelBundle};
use orchamp_core::config::GmmComponents;
use orchamp_core::denoise::PosteriorEngine;
use orchamp_core::error::Error;
use orchamp_core::predict::{predict_set, Query, QueryBlock};
use orchamp_core::prior::{
    fit_gmm_deconvolution, fit_npmle_weights, FitOptions, GaussianMixturePrior,
    LinearGaussianChannel, Prior,
};
use orchamp_core::rng::substream;
use orchamp_core::spectral::{estimate_signal_strengths, init_scale_params, truncated_svd};
use orchamp_core::synthetic::{
    align_signs, mse_oracles, oracle_state_evolution, run_coverage, run_scenario, CoverageSpec,
    OracleParams, ScenarioHigh, ScenarioLow, ScenarioOutput, ScenarioSpec,
};

fn report(criterion: usize, name: &str, ok: bool, detail: &str) {
    println!(
        "[acceptance] criterion {criterion:2} {}: {name} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} failed: {name} ({detail})");
}

fn gaussian_prior(dim: usize) -> Prior {
    Prior::Gmm(GaussianMixturePrior::gaussian(Array1::zeros(dim), Array2::eye(dim)))
}

/// The shared verification scenario: two high-dimensional modalities plus a
/// low-dimensional one, correlated three-component mixture latents.
fn fixture() -> &'static (ScenarioOutput, Duration) {
    static FIXTURE: OnceLock<(ScenarioOutput, Duration)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let means = arr2(&[[2.0, 1.6, 1.2], [-1.5, -1.2, -1.5], [0.3, 0.2, 0.8]]);
        let covs =
            vec![Array2::eye(3) * 0.5, Array2::eye(3) * 0.3, Array2::eye(3) * 0.4];
        let mu = Prior::Gmm(
            GaussianMixturePrior::new(arr1(&[0.4, 0.35, 0.25]), means, covs).unwrap(),
        );
        let spec = ScenarioSpec {
            n: 4000,
            seed: 42,
            iterations: 5,
            oracle_mc: 1_000_000,
            high: vec![
                ScenarioHigh { id: "m1".into(), p: 2000, d: vec![3.0] },
                ScenarioHigh { id: "m2".into(), p: 1000, d: vec![2.5] },
            ],
            low: vec![ScenarioLow { id: "l1".into(), loading: vec![vec![1.5]] }],
            mu,
            nu: vec![gaussian_prior(1), gaussian_prior(1)],
            gmm_components: GmmComponents::Fixed { mu: 3, nu: vec![1, 1] },
            prior_class: Default::default(),
            coverage: None,
        };
        let start = Instant::now();
        let out = run_scenario(&spec).expect("fixture scenario");
        (out, start.elapsed())
    })
}

#[test]
fn c01_spectral_calibration() {
    let start = Instant::now();
    let n = 4000usize;
    let p = 2000usize;
    let d_true = [3.0f64, 2.0];
    let mut rng = substream(7, "calibration");
    let u = Array2::<f64>::from_shape_fn((n, 2), |_| rng.sample(StandardNormal));
    let v = Array2::<f64>::from_shape_fn((p, 2), |_| rng.sample(StandardNormal));
    let mut x = Array2::<f64>::from_shape_fn((n, p), |_| rng.sample(StandardNormal));
    // X += (1/sqrt(N)) U D V^T
    let mut ud = u.clone();
    for k in 0..2 {
        let scale = d_true[k] / (n as f64).sqrt();
        ud.column_mut(k).mapv_inplace(|val| val * scale);
    }
    x = x + ud.dot(&v.t());
    let xbar = x / (n as f64).sqrt();

    let init = truncated_svd(&xbar, 2).unwrap();
    let d_hat = estimate_signal_strengths(&init.d0, init.gamma).unwrap();
    let scale = init_scale_params(&d_hat, init.gamma).unwrap();
    let signs = align_signs(&init.u_pc, &u);
    let mut ok = true;
    let mut detail = String::new();
    for k in 0..2 {
        let rel = (d_hat[k] - d_true[k]).abs() / d_true[k];
        let alignment = signs[k] * init.u_pc.column(k).dot(&u.column(k)) / n as f64;
        let gap = (alignment - scale.s_l[k]).abs();
        detail.push_str(&format!("k{k}: d_rel={rel:.4} align_gap={gap:.4} "));
        ok &= rel < 0.05 && gap < 0.05;
    }
    let elapsed = start.elapsed();
    detail.push_str(&format!("elapsed={elapsed:.2?}"));
    ok &= elapsed < Duration::from_secs(60);
    report(1, "spectral calibration", ok, &detail);
}

#[test]
fn c02_signal_strength_inversion() {
    let d = estimate_signal_strengths(&arr1(&[2.5]), 1.0).unwrap();
    let exact = (d[0] - 2.0).abs() < 1e-12;
    let sub = matches!(
        estimate_signal_strengths(&arr1(&[3.9f64.sqrt()]), 1.0),
        Err(Error::Subcritical { index: 0 })
    );
    report(
        2,
        "signal-strength inversion",
        exact && sub,
        &format!("d_hat={} subcritical_detected={sub}", d[0]),
    );
}

#[test]
fn c03_jacobian_against_finite_differences() {
    let start = Instant::now();
    let mut rng = substream(8, "fd-acceptance");
    let mut worst = 0.0f64;
    for _case in 0..100 {
        let latent = rng.random_range(1..4usize);
        let obs = rng.random_range(latent..latent + 3);
        let k = rng.random_range(1..4usize);
        // random mixture
        let mut weights = Array1::from_shape_fn(k, |_| rng.random::<f64>() + 0.1);
        let total = weights.sum();
        weights.mapv_inplace(|w| w / total);
        let correction = 1.0 - weights.sum();
        weights[0] += correction;
        let means =
            Array2::from_shape_fn((k, latent), |_| 3.0 * rng.sample::<f64, _>(StandardNormal));
        let covs: Vec<Array2<f64>> = (0..k)
            .map(|_| {
                let l = Array2::from_shape_fn((latent, latent), |_| {
                    0.5 * rng.sample::<f64, _>(StandardNormal)
                });
                let g = l.dot(&l.t());
                (&g + &g.t()) * 0.5 + Array2::<f64>::eye(latent) * 0.3
            })
            .collect();
        let prior = Prior::Gmm(GaussianMixturePrior::new(weights, means, covs).unwrap());
        let a = Array2::from_shape_fn((obs, latent), |_| rng.sample::<f64, _>(StandardNormal));
        let l = Array2::from_shape_fn((obs, obs), |_| 0.4 * rng.sample::<f64, _>(StandardNormal));
        let b = (&l.dot(&l.t()) + &l.dot(&l.t()).t()) * 0.5 + Array2::<f64>::eye(obs) * 0.3;
        let channel = LinearGaussianChannel::new(a, b).unwrap();
        let engine = PosteriorEngine::new(&channel, &prior).unwrap();
        let y =
            Array1::<f64>::from_shape_fn(obs, |_| 2.0 * rng.sample::<f64, _>(StandardNormal));
        let jac = engine.jacobian(&y);
        let h = 1e-5;
        let mut scale = 0.0f64;
        let mut err = 0.0f64;
        for t in 0..obs {
            let mut yp = y.clone();
            yp[t] += h;
            let mut ym = y.clone();
            ym[t] -= h;
            let fd = (engine.mean(&yp) - engine.mean(&ym)) / (2.0 * h);
            for aa in 0..latent {
                scale = scale.max(jac[[aa, t]].abs());
                err = err.max((jac[[aa, t]] - fd[aa]).abs());
            }
        }
        worst = worst.max(err / scale.max(1.0));
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-6 && elapsed < Duration::from_secs(10);
    report(
        3,
        "analytic Jacobian vs finite differences",
        ok,
        &format!("max_rel_err={worst:.2e} elapsed={elapsed:.2?}"),
    );
}

#[test]
fn c04_em_ascent_both_fits() {
    let mut ok = true;
    let mut worst_drop = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = substream(seed, "em-ascent");
        let n = 300;
        let y = Array2::<f64>::from_shape_fn((n, 2), |_| {
            2.0 * rng.sample::<f64, _>(StandardNormal)
        });
        let a = arr2(&[[1.0, 0.2], [0.0, 0.8]]);
        let b = arr2(&[[0.5, 0.1], [0.1, 0.4]]);
        let channel = LinearGaussianChannel::new(a, b).unwrap();
        let fit = fit_gmm_deconvolution(&y, &channel, 3, seed, &FitOptions::default()).unwrap();
        for w in fit.log_likelihood.windows(2) {
            let drop = w[0] - w[1];
            worst_drop = worst_drop.max(drop / w[0].abs().max(1.0));
            ok &= w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0);
        }

        let atoms = Array2::<f64>::from_shape_fn((15, 2), |_| rng.sample(StandardNormal));
        let nfit = fit_npmle_weights(
            &y,
            &channel,
            &atoms,
            &FitOptions { max_iter: 100, tol: 0.0 },
        )
        .unwrap();
        for w in nfit.log_likelihood.windows(2) {
            let drop = w[0] - w[1];
            worst_drop = worst_drop.max(drop / w[0].abs().max(1.0));
            ok &= w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0);
        }
    }
    report(4, "EM log-likelihood ascent (20 seeds)", ok, &format!("worst_rel_drop={worst_drop:.2e}"));
}

#[test]
fn c05_state_evolution_tracks_oracle() {
    let (out, elapsed) = fixture();
    let mut worst = 0.0f64;
    for h in 0..2 {
        for t in 0..=5usize {
            let emp = &out.fit.record.sigma_l[h][t];
            let orc = &out.oracle.sigma_l[h][t];
            for i in 0..emp.nrows() {
                for j in 0..emp.ncols() {
                    worst = worst.max((emp[[i, j]] - orc[[i, j]]).abs());
                }
            }
        }
    }
    let ok = worst < 0.05 && *elapsed < Duration::from_secs(600);
    report(
        5,
        "empirical state evolution tracks the oracle",
        ok,
        &format!("max_gap={worst:.4} fit+oracle={elapsed:.1?}"),
    );
}

#[test]
fn c06_mse_matches_oracle_limits() {
    let (out, _) = fixture();
    let t = 3usize;
    let gammas = [0.5, 0.25];
    let limits = mse_oracles(&out.oracle, &gammas, t).unwrap();
    let mut ok = true;
    let mut detail = String::new();
    for h in 0..2 {
        let emp = out.mse_subject[h][t];
        let orc = limits.subject[h];
        let rel = (emp - orc).abs() / orc.abs().max(1e-12);
        detail.push_str(&format!("m{}: rel={rel:.3} ", h + 1));
        ok &= rel < 0.10;
    }
    let emp = out.mse_low[0][t];
    let orc = limits.low[0];
    let rel = (emp - orc).abs() / orc.abs().max(1e-12);
    detail.push_str(&format!("low: rel={rel:.3}"));
    ok &= rel < 0.10;
    report(6, "subject-space MSE matches the oracle limits", ok, &detail);
}

#[test]
fn c07_gaussian_analytic_fixed_point() {
    let d = arr1(&[2.0]);
    let params = OracleParams {
        mu: &gaussian_prior(1),
        nu: &[gaussian_prior(1)],
        d: &[d],
        l: &[],
        gamma: &[1.0],
        iterations: 3,
        mc: 1_000_000,
        seed: 31,
    };
    let se = oracle_state_evolution(&params).unwrap();
    let sig_l = se.sigma_l[0][3][[0, 0]];
    let sig_r = se.sigma_r[0][4][[0, 0]];
    let mse = mse_oracles(&se, &[1.0], 3).unwrap().subject[0];
    let ok = (sig_l - 0.75).abs() < 0.01 && (sig_r - 0.75).abs() < 0.01 && (mse - 0.4375).abs() < 0.02;
    report(
        7,
        "scalar Gaussian fixed point",
        ok,
        &format!("sigma_l={sig_l:.4} sigma_r={sig_r:.4} mse={mse:.4}"),
    );
}

#[test]
fn c08_integration_gain_over_single_modality() {
    let n = 3000;
    let p = 1500;
    let mu2 = Prior::Gmm(GaussianMixturePrior::gaussian(
        Array1::zeros(2),
        arr2(&[[1.0, 0.9], [0.9, 1.0]]),
    ));
    let joint_spec = ScenarioSpec {
        n,
        seed: 77,
        iterations: 3,
        oracle_mc: 100_000,
        high: vec![
            ScenarioHigh { id: "m1".into(), p, d: vec![2.0] },
            ScenarioHigh { id: "m2".into(), p, d: vec![2.0] },
        ],
        low: vec![],
        mu: mu2,
        nu: vec![gaussian_prior(1), gaussian_prior(1)],
        gmm_components: GmmComponents::Fixed { mu: 1, nu: vec![1, 1] },
        prior_class: Default::default(),
        coverage: None,
    };
    let joint = run_scenario(&joint_spec).unwrap();
    let single_spec = ScenarioSpec {
        high: vec![ScenarioHigh { id: "m1".into(), p, d: vec![2.0] }],
        mu: gaussian_prior(1),
        nu: vec![gaussian_prior(1)],
        gmm_components: GmmComponents::Fixed { mu: 1, nu: vec![1] },
        ..joint_spec.clone()
    };
    let single = run_scenario(&single_spec).unwrap();
    let t = 3;
    let gain = single.mse_subject[0][t] - joint.mse_subject[0][t];
    let ok = gain >= 0.02;
    report(
        8,
        "integration beats the single-modality fit",
        ok,
        &format!(
            "joint={:.4} single={:.4} gain={gain:.4}",
            joint.mse_subject[0][t], single.mse_subject[0][t]
        ),
    );
}

#[test]
fn c09_marginal_coverage() {
    let start = Instant::now();
    let (out, _) = fixture();
    let cov = CoverageSpec {
        queries: 1000,
        alpha: 0.1,
        lambda: 0.5,
        modality: "m1".into(),
        samples: 100_000,
    };
    let rows = run_coverage(out, &cov, 99).unwrap();
    let hits = rows.iter().filter(|r| r.covered).count();
    let coverage = hits as f64 / rows.len() as f64;
    let elapsed = start.elapsed();
    let ok = coverage >= 0.88 && elapsed < Duration::from_secs(900);
    report(
        9,
        "marginal coverage of prediction sets",
        ok,
        &format!("coverage={coverage:.4} ({hits}/1000) elapsed={elapsed:.1?}"),
    );
}

#[test]
fn c10_conjugate_prediction_check() {
    // scalar bundle with sigma_post exactly 0.5: lambda=1, d^2=6, sigma_l=0.5
    let p = 50usize;
    let n = 100usize;
    let d = 6.0f64.sqrt();
    let bundle = ModelBundle {
        n,
        iterations: 0,
        seed: 1,
        high: vec![HighBundle {
            id: "hi".into(),
            rank: 1,
            gamma: p as f64 / n as f64,
            p,
            d_hat: arr1(&[d]),
            sigma_l: arr2(&[[0.5]]),
            s_l: arr2(&[[0.5 * d]]),
            v_bar: Array2::ones((p, 1)),
            preprocess: vec![],
        }],
        low: vec![],
        mu: gaussian_prior(1),
        nu: vec![gaussian_prior(1)],
    };
    let z0 = 0.7;
    let features: Vec<usize> = (0..p).collect();
    let values: Vec<f64> = features.iter().map(|_| (d / n as f64) * z0 * (n as f64).sqrt()).collect();
    let query = Query { high: vec![QueryBlock { modality: "hi".into(), features, values }], low: vec![] };
    let set = predict_set(&bundle, &query, 0.05, 400_000, 5).unwrap();

    let sigma_n2 = 1.0 / 3.0;
    let post_var = sigma_n2 / (1.0 + sigma_n2);
    let expect_center = z0 / (1.0 + sigma_n2);
    let expect_radius = 1.95996 * post_var.sqrt();
    let center_gap = (set.center[0] - expect_center).abs();
    let radius_gap = (set.radius - expect_radius).abs();
    let ok = center_gap < 1e-6 && radius_gap < 0.01;
    report(
        10,
        "conjugate closed-form prediction",
        ok,
        &format!("center_gap={center_gap:.2e} radius_gap={radius_gap:.4}"),
    );
}

#[test]
fn c11_cli_determinism() {
    use orchamp_core::matrix::{save_matrix, MatrixFormat};
    use orchamp_core::synthetic::{generate_dataset, GeneratorSpec};
    use std::process::Command;

    let dir = tempfile::tempdir().unwrap();
    let spec = GeneratorSpec {
        n: 150,
        high: vec![("hi".into(), 60, arr1(&[4.0]))],
        low: vec![("lo".into(), arr2(&[[1.5]]))],
        mu: gaussian_prior(2),
        nu: vec![gaussian_prior(1)],
        noise_scale: 1.0,
        seed: 23,
    };
    let (dataset, _) = generate_dataset(&spec).unwrap();
    save_matrix(&dataset.high[0].x, &dir.path().join("hi.csv"), MatrixFormat::Csv).unwrap();
    save_matrix(&dataset.low[0].x, &dir.path().join("lo.csv"), MatrixFormat::Csv).unwrap();
    let config = serde_json::json!({
        "modalities": [
            {"id": "hi", "kind": "high", "path": "hi.csv", "rank": 1},
            {"id": "lo", "kind": "low", "path": "lo.csv"}
        ],
        "iterations": 2,
        "gmm_components": {"mu": 2, "nu": [1]},
        "seed": 7,
        "alpha": 0.1,
        "mc_samples": 2000
    });
    let cpath = dir.path().join("config.json");
    std::fs::write(&cpath, serde_json::to_string(&config).unwrap()).unwrap();

    let run_fit = |out: &Path| {
        assert!(Command::new(env!("CARGO_BIN_EXE_orchamp"))
            .args(["fit", "--config"])
            .arg(&cpath)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap()
            .success());
    };
    let out1 = dir.path().join("fit1");
    let out2 = dir.path().join("fit2");
    run_fit(&out1);
    run_fit(&out2);
    let mut ok = true;
    for name in
        ["bundle.json", "v_bar_hi.bin", "embeddings_hi.csv", "embeddings_lo.csv", "se_record.csv"]
    {
        ok &= std::fs::read(out1.join(name)).unwrap() == std::fs::read(out2.join(name)).unwrap();
    }

    let query = serde_json::json!({
        "high": [{"modality": "hi", "features": (0..30).collect::<Vec<_>>(),
                   "values": vec![0.2; 30]}]
    });
    let qpath = dir.path().join("query.json");
    std::fs::write(&qpath, serde_json::to_string(&query).unwrap()).unwrap();
    let run_query = |out: &Path| {
        assert!(Command::new(env!("CARGO_BIN_EXE_orchamp"))
            .args(["query", "--model"])
            .arg(&out1)
            .arg("--query")
            .arg(&qpath)
            .args(["--alpha", "0.1", "--samples", "4000", "--seed", "5", "--out"])
            .arg(out)
            .status()
            .unwrap()
            .success());
    };
    let q1 = dir.path().join("q1.json");
    let q2 = dir.path().join("q2.json");
    run_query(&q1);
    run_query(&q2);
    ok &= std::fs::read(&q1).unwrap() == std::fs::read(&q2).unwrap();
    report(11, "CLI outputs byte-identical across reruns", ok, "fit+query compared");
}
