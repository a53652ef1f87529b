//! Query-time prediction: least-squares point estimates per observed block,
//! the assembled observation channel over the full latent space, the
//! posterior-mean center, and the Monte Carlo prediction-ball radius.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::denoise::PosteriorEngine;
use crate::error::{Error, Result};
use crate::linalg;
use crate::prior::LinearGaussianChannel;
use crate::rng::substream;

/// Observed values for one modality block; feature indices are 0-based,
/// strictly increasing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryBlock {
    pub modality: String,
    pub features: Vec<usize>,
    pub values: Vec<f64>,
}

/// A partially observed subject.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Query {
    #[serde(default)]
    pub high: Vec<QueryBlock>,
    #[serde(default)]
    pub low: Vec<QueryBlock>,
}

impl Query {
    pub fn validate(&self, bundle: &ModelBundle) -> Result<()> {
        if self.high.is_empty() && self.low.is_empty() {
            return Err(Error::Arg("query observes no modality".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for block in &self.high {
            let idx = bundle
                .find_high(&block.modality)
                .ok_or_else(|| Error::Arg(format!("unknown modality {:?}", block.modality)))?;
            if !seen.insert(block.modality.clone()) {
                return Err(Error::Arg(format!("modality {:?} appears twice", block.modality)));
            }
            check_block(block, bundle.high[idx].p)?;
        }
        for block in &self.low {
            let idx = bundle
                .find_low(&block.modality)
                .ok_or_else(|| Error::Arg(format!("unknown modality {:?}", block.modality)))?;
            if !seen.insert(block.modality.clone()) {
                return Err(Error::Arg(format!("modality {:?} appears twice", block.modality)));
            }
            check_block(block, bundle.low[idx].r_tilde)?;
        }
        Ok(())
    }
}

fn check_block(block: &QueryBlock, limit: usize) -> Result<()> {
    if block.features.is_empty() {
        return Err(Error::Arg(format!("modality {:?}: empty feature set", block.modality)));
    }
    if block.features.len() != block.values.len() {
        return Err(Error::Arg(format!(
            "modality {:?}: {} features but {} values",
            block.modality,
            block.features.len(),
            block.values.len()
        )));
    }
    for w in block.features.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Arg(format!(
                "modality {:?}: feature indices must be strictly increasing",
                block.modality
            )));
        }
    }
    if *block.features.last().unwrap() >= limit {
        return Err(Error::Arg(format!(
            "modality {:?}: feature index {} out of range 0..{limit}",
            block.modality,
            block.features.last().unwrap()
        )));
    }
    if block.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Arg(format!("modality {:?}: non-finite value", block.modality)));
    }
    Ok(())
}

/// The observation channel a query induces on the full latent space.
#[derive(Debug, Clone)]
pub struct QueryChannel {
    pub channel: LinearGaussianChannel,
    /// Observed fraction per observed high-dimensional block, in query order.
    pub lambdas: Vec<f64>,
}

/// Prediction ball.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionSet {
    pub center: Vec<f64>,
    pub radius: f64,
    pub alpha: f64,
    pub mc_samples: usize,
}

/// Least-squares point estimate of one observed high-dimensional block:
/// solve `R z = q / sqrt(N)` in the normal equations with
/// `R = (1/N) (v_bar)_{F*} diag(d_hat)`.
pub fn least_squares_point(
    bundle: &ModelBundle,
    modality: &str,
    features: &[usize],
    values: &[f64],
) -> Result<Array1<f64>> {
    let idx = bundle
        .find_high(modality)
        .ok_or_else(|| Error::Arg(format!("unknown modality {modality:?}")))?;
    let h = &bundle.high[idx];
    let r = h.rank;
    let n = bundle.n as f64;
    let mut design = Array2::<f64>::zeros((features.len(), r));
    for (row, &f) in features.iter().enumerate() {
        for k in 0..r {
            design[[row, k]] = h.v_bar[[f, k]] * h.d_hat[k] / n;
        }
    }
    let gram = design.t().dot(&design);
    let (vals, _) = linalg::sym_eigh(&gram)?;
    let vmax = vals[vals.len() - 1];
    if vals[0] <= 1e-12 * vmax.max(f64::MIN_POSITIVE) {
        return Err(Error::Rank(format!(
            "modality {modality:?}: too few observed features for rank {r}"
        )));
    }
    let q = Array1::from_vec(values.to_vec()) / n.sqrt();
    let rhs = design.t().dot(&q);
    let chol = linalg::cholesky_jittered(&gram, 1e-14)?;
    Ok(linalg::chol_solve(&chol, &rhs))
}

/// Assemble the joint observation channel: each observed high-dimensional
/// block contributes an identity design on its latent coordinates with noise
/// `lambda^{-1} D^{-1} (Sigma_L)^{-1} D^{-1}`; each observed low-dimensional
/// block contributes the selected loading rows with identity noise.
pub fn assemble_query_channel(bundle: &ModelBundle, query: &Query) -> Result<QueryChannel> {
    query.validate(bundle)?;
    let latent = bundle.latent_dim();
    let obs_dim: usize = query.high.iter().map(|b| bundle.high[bundle.find_high(&b.modality).unwrap()].rank).sum::<usize>()
        + query.low.iter().map(|b| b.features.len()).sum::<usize>();
    let mut design = Array2::<f64>::zeros((obs_dim, latent));
    let mut noise = Array2::<f64>::zeros((obs_dim, obs_dim));
    let mut lambdas = Vec::with_capacity(query.high.len());
    let mut row = 0usize;
    for block in &query.high {
        let idx = bundle.find_high(&block.modality).unwrap();
        let h = &bundle.high[idx];
        let r = h.rank;
        let offset = bundle.high_offset(idx);
        let lambda = block.features.len() as f64 / h.p as f64;
        lambdas.push(lambda);
        for k in 0..r {
            design[[row + k, offset + k]] = 1.0;
        }
        // lambda^{-1} D^{-1} Sigma_L^{-1} D^{-1}
        let sigma_inv = linalg::sym_inverse(&h.sigma_l)?;
        let mut block_noise = Array2::<f64>::zeros((r, r));
        for a in 0..r {
            for b in 0..r {
                block_noise[[a, b]] =
                    sigma_inv[[a, b]] / (lambda * h.d_hat[a] * h.d_hat[b]);
            }
        }
        noise.slice_mut(s![row..row + r, row..row + r]).assign(&block_noise);
        row += r;
    }
    for block in &query.low {
        let idx = bundle.find_low(&block.modality).unwrap();
        let l = &bundle.low[idx];
        let offset = bundle.low_offset(idx);
        let k = block.features.len();
        for (a, &f) in block.features.iter().enumerate() {
            for b in 0..l.r_tilde {
                design[[row + a, offset + b]] = l.l_hat[[f, b]];
            }
            noise[[row + a, row + a]] = 1.0;
        }
        row += k;
    }
    Ok(QueryChannel { channel: LinearGaussianChannel::new(design, noise)?, lambdas })
}

/// The stacked observation vector: per observed high-dimensional block its
/// least-squares point estimate, then the raw low-dimensional values.
pub fn query_observation(bundle: &ModelBundle, query: &Query) -> Result<Array1<f64>> {
    query.validate(bundle)?;
    let mut parts: Vec<f64> = Vec::new();
    for block in &query.high {
        let point = least_squares_point(bundle, &block.modality, &block.features, &block.values)?;
        parts.extend(point.iter());
    }
    for block in &query.low {
        parts.extend(block.values.iter());
    }
    Ok(Array1::from_vec(parts))
}

/// Posterior-mean point prediction of the full latent vector.
pub fn predict_center(bundle: &ModelBundle, query: &Query) -> Result<Array1<f64>> {
    let qc = assemble_query_channel(bundle, query)?;
    let y = query_observation(bundle, query)?;
    let engine = PosteriorEngine::new(&qc.channel, &bundle.mu)?;
    Ok(engine.mean(&y))
}

/// Smallest-index order statistic covering `1 - alpha` of the posterior
/// distance distribution: the ceil((1-alpha)(M+1))-th of M sorted distances.
pub fn prediction_radius(
    bundle: &ModelBundle,
    query: &Query,
    center: &Array1<f64>,
    alpha: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Arg(format!("alpha must be in (0,1), got {alpha}")));
    }
    if mc_samples < 1 {
        return Err(Error::Arg("at least one posterior sample is required".into()));
    }
    let qc = assemble_query_channel(bundle, query)?;
    let y = query_observation(bundle, query)?;
    let engine = PosteriorEngine::new(&qc.channel, &bundle.mu)?;
    let mut rng = substream(seed, "query-radius");
    let samples = engine.sample(&y, mc_samples, &mut rng);
    let mut distances: Vec<f64> = (0..mc_samples)
        .map(|i| {
            let mut d2 = 0.0;
            for (a, c) in samples.row(i).iter().zip(center.iter()) {
                d2 += (a - c) * (a - c);
            }
            d2.sqrt()
        })
        .collect();
    let k = (((1.0 - alpha) * (mc_samples as f64 + 1.0)).ceil() as usize).min(mc_samples);
    let idx = k - 1;
    let (_, kth, _) = distances.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).unwrap());
    Ok(*kth)
}

/// Full prediction set construction, deterministic per seed.
pub fn predict_set(
    bundle: &ModelBundle,
    query: &Query,
    alpha: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<PredictionSet> {
    let center = predict_center(bundle, query)?;
    let radius = prediction_radius(bundle, query, &center, alpha, mc_samples, seed)?;
    Ok(PredictionSet { center: center.to_vec(), radius, alpha, mc_samples })
}

/// Posterior samples for a query, for downstream visualization.
pub fn query_samples(
    bundle: &ModelBundle,
    query: &Query,
    mc_samples: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let qc = assemble_query_channel(bundle, query)?;
    let y = query_observation(bundle, query)?;
    let engine = PosteriorEngine::new(&qc.channel, &bundle.mu)?;
    let mut rng = substream(seed, "query-samples");
    Ok(engine.sample(&y, mc_samples, &mut rng))
}
