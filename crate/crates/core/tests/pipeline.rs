//! Cross-module pipeline checks on synthetic data at moderate scale.

use ndarray::{arr1, arr2, Array1, Array2};
use orchamp_core::amp;
use orchamp_core::config::{GmmComponents, PriorClass, RankSpec};
use orchamp_core::linalg;
use orchamp_core::prior::{GaussianMixturePrior, Prior};
use orchamp_core::synthetic::{
    align_signs, column_kurtosis, generate_dataset, run_scenario, GeneratorSpec, ScenarioHigh,
    ScenarioLow, ScenarioSpec,
};

fn gaussian_prior(dim: usize) -> Prior {
    Prior::Gmm(GaussianMixturePrior::gaussian(Array1::zeros(dim), Array2::eye(dim)))
}

fn mixture_prior() -> Prior {
    let means = arr2(&[[2.0, 1.6, 1.2], [-1.5, -1.2, -1.5], [0.3, 0.2, 0.8]]);
    let covs = vec![Array2::eye(3) * 0.5, Array2::eye(3) * 0.3, Array2::eye(3) * 0.4];
    Prior::Gmm(GaussianMixturePrior::new(arr1(&[0.4, 0.35, 0.25]), means, covs).unwrap())
}

#[test]
fn scenario_tracks_oracle_and_mse_is_monotone() {
    let spec = ScenarioSpec {
        n: 1500,
        seed: 42,
        iterations: 5,
        oracle_mc: 200_000,
        high: vec![
            ScenarioHigh { id: "m1".into(), p: 750, d: vec![3.0] },
            ScenarioHigh { id: "m2".into(), p: 375, d: vec![2.5] },
        ],
        low: vec![ScenarioLow { id: "l1".into(), loading: vec![vec![1.5]] }],
        mu: mixture_prior(),
        nu: vec![gaussian_prior(1), gaussian_prior(1)],
        gmm_components: GmmComponents::Fixed { mu: 3, nu: vec![1, 1] },
        prior_class: PriorClass::Gmm,
        coverage: None,
    };
    let out = run_scenario(&spec).unwrap();

    // channel scales stay close to the oracle at every iteration
    for h in 0..2 {
        for t in 0..=5usize {
            let gap =
                (out.fit.record.sigma_l[h][t][[0, 0]] - out.oracle.sigma_l[h][t][[0, 0]]).abs();
            assert!(gap < 0.05, "sigma_l gap {gap} at h={h} t={t}");
        }
    }
    // subject-space MSE does not increase along the iterations
    for h in 0..2 {
        for t in 1..=5usize {
            assert!(
                out.mse_subject[h][t] <= out.mse_subject[h][t - 1] + 0.02,
                "mse rose at h={h} t={t}: {:?}",
                out.mse_subject[h]
            );
        }
    }
    // empirical MSE near the oracle limit at t=3
    for row in &out.comparison {
        if row.t == 3 && row.metric == "mse_subject" {
            let rel = (row.empirical - row.oracle).abs() / row.oracle.max(1e-12);
            assert!(rel < 0.10, "{}: rel {rel}", row.modality);
        }
    }
    // the right channel scale is PSD at every iteration
    for h in 0..2 {
        for (t, sigma) in out.fit.record.sigma_r[h].iter().enumerate() {
            let min = linalg::min_eigenvalue(sigma).unwrap();
            assert!(min >= -1e-12, "sigma_r lost PSD at h={h} t={t}: {min}");
        }
    }
}

#[test]
fn subcritical_data_is_reported_as_such() {
    // pure noise with a forced rank produces a subcritical strength estimate
    let spec = GeneratorSpec {
        n: 300,
        high: vec![("m1".into(), 150, arr1(&[2.5]))],
        low: vec![("l1".into(), arr2(&[[1.5]]))],
        mu: mixture_prior_2d(),
        nu: vec![gaussian_prior(1)],
        noise_scale: 1.0,
        seed: 3,
    };
    let (mut dataset, _) = generate_dataset(&spec).unwrap();
    // overwrite the signal with pure noise
    let mut rng = orchamp_core::rng::substream(5, "pure-noise");
    use rand::Rng;
    dataset.high[0].x = Array2::from_shape_fn((300, 150), |_| {
        0.8 * rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let params = amp::FitParams::new(vec![RankSpec::Fixed(1)], 1, 2);
    match amp::run(&dataset, &params) {
        Err(orchamp_core::Error::Subcritical { .. }) => {}
        Err(other) => panic!("expected a subcritical error, got {other}"),
        Ok(_) => panic!("expected a subcritical error, got a fit"),
    }
}

#[test]
fn pre_denoising_iterates_have_gaussian_residuals() {
    // N=4000: the whitened residual of the pre-denoising subject iterate
    // behaves like white noise; its per-coordinate kurtosis sits near 3.
    let n = 4000;
    let spec = GeneratorSpec {
        n,
        high: vec![("m1".into(), 1000, arr1(&[2.5]))],
        low: vec![("l1".into(), arr2(&[[1.5]]))],
        mu: {
            let means = arr2(&[[1.5, 1.0], [-1.5, -1.0]]);
            let covs = vec![Array2::eye(2) * 0.5, Array2::eye(2) * 0.5];
            Prior::Gmm(GaussianMixturePrior::new(arr1(&[0.5, 0.5]), means, covs).unwrap())
        },
        nu: vec![gaussian_prior(1)],
        noise_scale: 1.0,
        seed: 9,
    };
    let (dataset, truth) = generate_dataset(&spec).unwrap();
    let params = amp::FitParams {
        gmm: GmmComponents::Fixed { mu: 2, nu: vec![1] },
        ..amp::FitParams::new(vec![RankSpec::Fixed(1)], 2, 13)
    };
    let fit = amp::run(&dataset, &params).unwrap();

    let t = 2usize;
    let u_iter = &fit.state.high[0].u;
    let signs = align_signs(u_iter, &truth.u[0]);
    let s_l = &fit.record.s_l[0][t];
    let sigma_l = &fit.record.sigma_l[0][t];
    let mut residual = u_iter.clone();
    for i in 0..n {
        residual[[i, 0]] -= signs[0] * truth.u[0][[i, 0]] * s_l[[0, 0]];
    }
    let whiten = linalg::sym_eig_map(sigma_l, |v| 1.0 / v.sqrt()).unwrap();
    let white = residual.dot(&whiten.t());
    let kurt = column_kurtosis(&white);
    assert!(
        (2.7..=3.3).contains(&kurt[0]),
        "residual kurtosis {} outside the Gaussian band",
        kurt[0]
    );
    // and its variance is the one the channel claims
    let var = white.column(0).dot(&white.column(0)) / n as f64;
    assert!((var - 1.0).abs() < 0.1, "whitened residual variance {var}");
}

#[test]
fn npmle_prior_class_runs_end_to_end() {
    let spec = GeneratorSpec {
        n: 400,
        high: vec![("m1".into(), 160, arr1(&[3.0]))],
        low: vec![("l1".into(), arr2(&[[1.5]]))],
        mu: mixture_prior_2d(),
        nu: vec![gaussian_prior(1)],
        noise_scale: 1.0,
        seed: 21,
    };
    let (dataset, truth) = generate_dataset(&spec).unwrap();
    let params = amp::FitParams {
        prior_class: PriorClass::Npmle,
        ..amp::FitParams::new(vec![RankSpec::Fixed(1)], 2, 5)
    };
    let fit = amp::run(&dataset, &params).unwrap();
    assert!(matches!(fit.mu, Prior::Discrete(_)));
    assert!(matches!(fit.nu[0], Prior::Discrete(_)));
    // recovery should at least beat the zero estimator
    let zero = Array2::zeros((400, 1));
    let base = orchamp_core::synthetic::empirical_mse(&zero, &truth.u[0]);
    let got = orchamp_core::synthetic::empirical_mse(&fit.state.high[0].u_bar, &truth.u[0]);
    assert!(got < base, "npmle fit did not improve on zero: {got} vs {base}");
}

fn mixture_prior_2d() -> Prior {
    let means = arr2(&[[1.5, 1.0], [-1.5, -1.0]]);
    let covs = vec![Array2::eye(2) * 0.5, Array2::eye(2) * 0.5];
    Prior::Gmm(GaussianMixturePrior::new(arr1(&[0.5, 0.5]), means, covs).unwrap())
}
