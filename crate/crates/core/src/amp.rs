//! The iterative refinement loop: per-modality loading denoising, the joint
//! subject denoiser across all modalities, Onsager corrections, and the
//! empirical state-evolution track.
//!
//! Each iteration runs in four phases so the joint denoiser always sees the
//! complete set of current-iteration intermediates:
//! (a) per modality: denoise loadings, power step for subjects, update the
//!     left channel scales; (b) joint subject denoising across modalities;
//! (c) per modality: power step for loadings with the Onsager subtraction,
//!     update the right channel scales; (d) low-dimensional subject blocks
//!     from the same joint pass.

use ndarray::{s, Array1, Array2};

use crate::bundle::{HighBundle, LowBundle, ModelBundle};
use crate::config::{GmmComponents, PriorClass, RankSpec};
use crate::denoise::PosteriorEngine;
use crate::error::{Error, Result};
use crate::linalg;
use crate::preprocess::PreprocessStep;
use crate::prior::{
    build_npmle_support, default_components, fit_gmm_deconvolution, fit_npmle_weights,
    FitOptions, LinearGaussianChannel, Prior,
};
use crate::rng::derive_seed;
use crate::spectral::{
    estimate_high_nuisance, estimate_low_dim_loading, estimate_rank, truncated_svd,
    NuisanceEstimates, SpectralInit,
};

/// One observed matrix with its identifier and preprocessing provenance.
#[derive(Debug, Clone)]
pub struct Modality {
    pub id: String,
    pub x: Array2<f64>,
    pub preprocess: Vec<PreprocessStep>,
}

impl Modality {
    pub fn new(id: impl Into<String>, x: Array2<f64>) -> Self {
        Self { id: id.into(), x, preprocess: Vec::new() }
    }
}

/// Raw (unrescaled) observed matrices sharing subject rows.
#[derive(Debug, Clone)]
pub struct MultimodalDataset {
    pub high: Vec<Modality>,
    pub low: Vec<Modality>,
}

impl MultimodalDataset {
    pub fn subjects(&self) -> usize {
        self.high
            .first()
            .map(|m| m.x.nrows())
            .or_else(|| self.low.first().map(|m| m.x.nrows()))
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.high.is_empty() {
            return Err(Error::Arg("at least one high-dimensional modality is required".into()));
        }
        let n = self.subjects();
        for m in self.high.iter().chain(&self.low) {
            if m.x.nrows() != n {
                return Err(Error::Arg(format!(
                    "modality {:?} has {} rows, expected {n}",
                    m.id,
                    m.x.nrows()
                )));
            }
        }
        Ok(())
    }
}

/// Fit controls for `run`.
#[derive(Debug, Clone)]
pub struct FitParams {
    /// Per high-dimensional modality, aligned with the dataset order.
    pub ranks: Vec<RankSpec>,
    /// Loop bound T; the body runs at t = 0..=T.
    pub iterations: usize,
    pub gmm: GmmComponents,
    pub prior_class: PriorClass,
    /// Bulk-edge tolerance for automatic rank selection.
    pub rank_tol: f64,
    pub seed: u64,
}

impl FitParams {
    pub fn new(ranks: Vec<RankSpec>, iterations: usize, seed: u64) -> Self {
        Self {
            ranks,
            iterations,
            gmm: GmmComponents::default(),
            prior_class: PriorClass::Gmm,
            rank_tol: 0.02,
            seed,
        }
    }
}

/// Per-modality iterates.
#[derive(Debug, Clone)]
pub struct HighState {
    /// Pre-denoising loading iterate (p x r).
    pub v: Array2<f64>,
    /// Denoised loadings (p x r).
    pub v_bar: Array2<f64>,
    /// Pre-denoising subject iterate (N x r).
    pub u: Array2<f64>,
    /// Denoised subjects (N x r).
    pub u_bar: Array2<f64>,
    /// Previous iteration's denoised subjects, for the Onsager term.
    pub u_bar_prev: Array2<f64>,
    /// Right-channel design (r x r).
    pub s_r: Array2<f64>,
    /// Right-channel noise (r x r).
    pub sigma_r: Array2<f64>,
    /// Left-channel design from the current iteration (r x r).
    pub s_l: Array2<f64>,
    pub sigma_l: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AmpState {
    /// Completed iterations (the next body executes index `t`).
    pub t: usize,
    pub high: Vec<HighState>,
    /// Denoised low-dimensional subject blocks (N x r_tilde each).
    pub low_u: Vec<Array2<f64>>,
}

/// Channel scales per modality and iteration: `sigma_l[h][t]` for t = 0..=T,
/// `sigma_r[h][t]` for t = 0..=T+1 (index 0 holds the spectral init).
#[derive(Debug, Clone, Default)]
pub struct StateEvolutionRecord {
    pub sigma_l: Vec<Vec<Array2<f64>>>,
    pub s_l: Vec<Vec<Array2<f64>>>,
    pub sigma_r: Vec<Vec<Array2<f64>>>,
    pub s_r: Vec<Vec<Array2<f64>>>,
}

/// Data and fitted priors feeding the iterations; shapes stay fixed.
pub struct AmpInputs<'a> {
    /// Rescaled high-dimensional matrices (X / sqrt(N)).
    pub xbar: &'a [Array2<f64>],
    pub x_low: &'a [Array2<f64>],
    pub mu: &'a Prior,
    pub nu: &'a [Prior],
    pub d_hat: Vec<Array1<f64>>,
    pub l_hat: &'a [Array2<f64>],
    pub ids: Vec<String>,
}

impl AmpInputs<'_> {
    pub fn gammas(&self) -> Vec<f64> {
        let n = self.xbar[0].nrows() as f64;
        self.xbar.iter().map(|x| x.ncols() as f64 / n).collect()
    }

    fn ranks(&self) -> Vec<usize> {
        self.d_hat.iter().map(|d| d.len()).collect()
    }

    fn low_dims(&self) -> Vec<usize> {
        self.x_low.iter().map(|x| x.ncols()).collect()
    }
}

fn diag(v: &Array1<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((v.len(), v.len()));
    for (i, x) in v.iter().enumerate() {
        m[[i, i]] = *x;
    }
    m
}

/// Add diagonal jitter until the matrix factorizes, leaving well-conditioned
/// inputs untouched.
fn ensure_pd(m: &Array2<f64>) -> Result<Array2<f64>> {
    if linalg::cholesky_lower(m).is_some() {
        return Ok(m.clone());
    }
    let n = m.nrows();
    let mut jitter = 1e-10 * (m.diag().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
    for _ in 0..8 {
        let mut b = m.clone();
        for i in 0..n {
            b[[i, i]] += jitter;
        }
        if linalg::cholesky_lower(&b).is_some() {
            return Ok(b);
        }
        jitter *= 10.0;
    }
    Err(Error::Linalg("channel covariance cannot be stabilized".into()))
}

fn all_finite(m: &Array2<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Set up iterates and the state-evolution record from the spectral pass.
pub fn initialize(
    spectral: &[SpectralInit],
    nuisance: &NuisanceEstimates,
    low_dims: &[usize],
    n: usize,
) -> Result<(AmpState, StateEvolutionRecord)> {
    if spectral.len() != nuisance.high.len() {
        return Err(Error::Arg("spectral and nuisance modality counts disagree".into()));
    }
    let mut high = Vec::with_capacity(spectral.len());
    let mut record = StateEvolutionRecord::default();
    for (init, nui) in spectral.iter().zip(&nuisance.high) {
        let r = init.d0.len();
        if init.u_pc.nrows() != n {
            return Err(Error::Arg("spectral row count disagrees with dataset".into()));
        }
        let p = init.v_pc.nrows();
        let sigma_r = diag(&nui.scale.sigma_r);
        let s_r = diag(&nui.scale.s_r);
        let sqrt_sigma = diag(&nui.scale.sigma_r.mapv(f64::sqrt));
        let u_bar_prev = init.u_pc.dot(&sqrt_sigma);
        high.push(HighState {
            v: init.v_pc.clone(),
            v_bar: Array2::zeros((p, r)),
            u: Array2::zeros((n, r)),
            u_bar: Array2::zeros((n, r)),
            u_bar_prev,
            s_r: s_r.clone(),
            sigma_r: sigma_r.clone(),
            s_l: Array2::zeros((r, r)),
            sigma_l: Array2::zeros((r, r)),
        });
        record.sigma_l.push(Vec::new());
        record.s_l.push(Vec::new());
        record.sigma_r.push(vec![sigma_r]);
        record.s_r.push(vec![s_r]);
    }
    let low_u = low_dims.iter().map(|&d| Array2::zeros((n, d))).collect();
    Ok((AmpState { t: 0, high, low_u }, record))
}

/// Run one full iteration (phases a-d), appending to the record.
pub fn iterate_once(
    state: &mut AmpState,
    record: &mut StateEvolutionRecord,
    inputs: &AmpInputs,
) -> Result<()> {
    iterate_once_impl(state, record, inputs, false)
}

fn iterate_once_impl(
    state: &mut AmpState,
    record: &mut StateEvolutionRecord,
    inputs: &AmpInputs,
    zero_jacobians: bool,
) -> Result<()> {
    let m = state.high.len();
    let n = inputs.xbar[0].nrows();
    let gammas = inputs.gammas();
    let ranks = inputs.ranks();
    let t = state.t;
    let fail = |h: usize| Error::Divergence { iteration: t, modality: inputs.ids[h].clone() };

    // (a) loading denoisers, subject power step, left channel scales
    for h in 0..m {
        let hs = &mut state.high[h];
        let channel = LinearGaussianChannel::new(hs.s_r.clone(), ensure_pd(&hs.sigma_r)?)?;
        let engine = PosteriorEngine::new(&channel, &inputs.nu[h])?;
        let (v_bar, mut j_r) = engine.rowwise(&hs.v)?;
        if zero_jacobians {
            j_r.fill(0.0);
        }
        let u = inputs.xbar[h].dot(&v_bar) - &(hs.u_bar_prev.dot(&j_r.t()) * gammas[h]);
        if !all_finite(&v_bar) || !all_finite(&u) {
            return Err(fail(h));
        }
        let sigma_l = linalg::symmetrize(&(v_bar.t().dot(&v_bar) / n as f64));
        let s_l = sigma_l.dot(&diag(&inputs.d_hat[h]));
        hs.v_bar = v_bar;
        hs.u = u;
        hs.sigma_l = sigma_l.clone();
        hs.s_l = s_l.clone();
        record.sigma_l[h].push(sigma_l);
        record.s_l[h].push(s_l);
    }

    // (b) joint subject denoiser over all current intermediates
    let r_total: usize = ranks.iter().sum();
    let low_dims = inputs.low_dims();
    let rt_total: usize = low_dims.iter().sum();
    let latent = r_total + rt_total;
    let mut design = Array2::<f64>::zeros((latent, latent));
    let mut noise = Array2::<f64>::zeros((latent, latent));
    let mut joint_obs = Array2::<f64>::zeros((n, latent));
    let mut offset = 0usize;
    for h in 0..m {
        let r = ranks[h];
        let hs = &state.high[h];
        design.slice_mut(s![offset..offset + r, offset..offset + r]).assign(&hs.s_l);
        let stabilized = ensure_pd(&hs.sigma_l)?;
        noise.slice_mut(s![offset..offset + r, offset..offset + r]).assign(&stabilized);
        joint_obs.slice_mut(s![.., offset..offset + r]).assign(&hs.u);
        offset += r;
    }
    for (l, &d) in low_dims.iter().enumerate() {
        design.slice_mut(s![offset..offset + d, offset..offset + d]).assign(&inputs.l_hat[l]);
        noise.slice_mut(s![offset..offset + d, offset..offset + d]).assign(&Array2::eye(d));
        joint_obs.slice_mut(s![.., offset..offset + d]).assign(&inputs.x_low[l]);
        offset += d;
    }
    let joint_channel = LinearGaussianChannel::new(design, noise)?;
    let joint_engine = PosteriorEngine::new(&joint_channel, inputs.mu)?;
    let (joint_means, joint_jbar) = joint_engine.rowwise(&joint_obs)?;
    if !all_finite(&joint_means) {
        return Err(fail(0));
    }

    // (c) loading power step with the Onsager subtraction, right channel scales
    let mut offset = 0usize;
    for h in 0..m {
        let r = ranks[h];
        let u_bar = joint_means.slice(s![.., offset..offset + r]).to_owned();
        let mut j_l = joint_jbar.slice(s![offset..offset + r, offset..offset + r]).to_owned();
        if zero_jacobians {
            j_l.fill(0.0);
        }
        let hs = &mut state.high[h];
        let v_next = inputs.xbar[h].t().dot(&u_bar) - &hs.v_bar.dot(&j_l.t());
        if !all_finite(&u_bar) || !all_finite(&v_next) {
            return Err(fail(h));
        }
        let sigma_r = linalg::symmetrize(&(u_bar.t().dot(&u_bar) / n as f64));
        let s_r = sigma_r.dot(&diag(&inputs.d_hat[h]));
        hs.u_bar = u_bar;
        hs.v = v_next;
        hs.sigma_r = sigma_r.clone();
        hs.s_r = s_r.clone();
        record.sigma_r[h].push(sigma_r);
        record.s_r[h].push(s_r);
        offset += r;
    }
    // the Onsager term of the next iteration uses this iteration's u_bar
    for h in 0..m {
        let hs = &mut state.high[h];
        hs.u_bar_prev = hs.u_bar.clone();
    }

    // (d) low-dimensional subject blocks from the same joint pass
    for (l, &d) in low_dims.iter().enumerate() {
        let block = joint_means.slice(s![.., offset..offset + d]).to_owned();
        if !all_finite(&block) {
            return Err(fail(0));
        }
        state.low_u[l] = block;
        offset += d;
    }

    state.t += 1;
    Ok(())
}

/// Full fit output.
pub struct FitOutput {
    pub state: AmpState,
    pub record: StateEvolutionRecord,
    pub bundle: ModelBundle,
    pub spectral: Vec<SpectralInit>,
    pub nuisance: NuisanceEstimates,
    pub mu: Prior,
    pub nu: Vec<Prior>,
}

impl FitOutput {
    /// Final denoised subject embeddings per high-dimensional modality.
    pub fn u_bar(&self) -> Vec<&Array2<f64>> {
        self.state.high.iter().map(|h| &h.u_bar).collect()
    }

    pub fn u_tilde(&self) -> Vec<&Array2<f64>> {
        self.state.low_u.iter().collect()
    }

    pub fn v_bar(&self) -> Vec<&Array2<f64>> {
        self.state.high.iter().map(|h| &h.v_bar).collect()
    }
}

/// End-to-end fit: spectral initialization, nuisance and prior estimation,
/// then `iterations + 1` refinement rounds (the loop body runs at
/// t = 0..=T). Deterministic given the seed.
pub fn run(dataset: &MultimodalDataset, params: &FitParams) -> Result<FitOutput> {
    run_with_trace(dataset, params, |_| {})
}

/// `run` with an observer invoked after every completed iteration, for
/// per-iteration diagnostics against ground truth.
pub fn run_with_trace(
    dataset: &MultimodalDataset,
    params: &FitParams,
    mut observer: impl FnMut(&AmpState),
) -> Result<FitOutput> {
    dataset.validate()?;
    let n = dataset.subjects();
    if params.ranks.len() != dataset.high.len() {
        return Err(Error::Arg(format!(
            "{} rank entries for {} high-dimensional modalities",
            params.ranks.len(),
            dataset.high.len()
        )));
    }

    let xbar: Vec<Array2<f64>> = dataset.high.iter().map(|m| &m.x / (n as f64).sqrt()).collect();
    let x_low: Vec<Array2<f64>> = dataset.low.iter().map(|m| m.x.clone()).collect();

    // rank resolution and spectral pass
    let mut spectral = Vec::with_capacity(xbar.len());
    for (h, xb) in xbar.iter().enumerate() {
        let rank = match params.ranks[h] {
            RankSpec::Fixed(r) => r,
            RankSpec::Auto(_) => {
                let r = estimate_rank(xb, params.rank_tol)?;
                if r == 0 {
                    return Err(Error::Rank(format!(
                        "modality {:?}: no component above the detection edge",
                        dataset.high[h].id
                    )));
                }
                r
            }
        };
        spectral.push(truncated_svd(xb, rank)?);
    }

    let mut nuisance = NuisanceEstimates { high: Vec::new(), low: Vec::new() };
    for init in &spectral {
        nuisance.high.push(estimate_high_nuisance(init)?);
    }
    for xl in &x_low {
        nuisance.low.push(estimate_low_dim_loading(xl, 1e-8)?);
    }

    // empirical-Bayes priors from the spectral pseudo-observations
    let ranks: Vec<usize> = spectral.iter().map(|s| s.d0.len()).collect();
    let r_total: usize = ranks.iter().sum();
    let low_dims: Vec<usize> = x_low.iter().map(|x| x.ncols()).collect();
    let rt_total: usize = low_dims.iter().sum();
    let latent = r_total + rt_total;

    let mut mu_obs = Array2::<f64>::zeros((n, latent));
    let mut mu_design = Array2::<f64>::zeros((latent, latent));
    let mut mu_noise = Array2::<f64>::zeros((latent, latent));
    let mut offset = 0usize;
    for (h, init) in spectral.iter().enumerate() {
        let r = ranks[h];
        mu_obs.slice_mut(s![.., offset..offset + r]).assign(&init.u_pc);
        let nui = &nuisance.high[h];
        mu_design
            .slice_mut(s![offset..offset + r, offset..offset + r])
            .assign(&diag(&nui.scale.s_l));
        mu_noise
            .slice_mut(s![offset..offset + r, offset..offset + r])
            .assign(&diag(&nui.scale.sigma_l));
        offset += r;
    }
    for (l, xl) in x_low.iter().enumerate() {
        let d = low_dims[l];
        mu_obs.slice_mut(s![.., offset..offset + d]).assign(xl);
        mu_design.slice_mut(s![offset..offset + d, offset..offset + d]).assign(&nuisance.low[l]);
        mu_noise.slice_mut(s![offset..offset + d, offset..offset + d]).assign(&Array2::eye(d));
        offset += d;
    }
    let mu_channel = LinearGaussianChannel::new(mu_design, mu_noise)?;

    let (k_mu, k_nu): (usize, Vec<usize>) = match &params.gmm {
        GmmComponents::Auto(_) => (
            default_components(n),
            xbar.iter().map(|x| default_components(x.ncols())).collect(),
        ),
        GmmComponents::Fixed { mu, nu } => (*mu, nu.clone()),
    };
    if k_nu.len() != xbar.len() {
        return Err(Error::Arg("one mixture size per high-dimensional modality".into()));
    }

    let opts = FitOptions::default();
    let mu_prior = match params.prior_class {
        PriorClass::Gmm => {
            let fit = fit_gmm_deconvolution(
                &mu_obs,
                &mu_channel,
                k_mu,
                derive_seed(params.seed, "fit-mu"),
                &opts,
            )?;
            Prior::Gmm(fit.prior)
        }
        PriorClass::Npmle => {
            let scales: Vec<Array1<f64>> =
                nuisance.high.iter().map(|h| h.scale.s_l.clone()).collect();
            let u_pcs: Vec<Array2<f64>> = spectral.iter().map(|s| s.u_pc.clone()).collect();
            let atoms = build_npmle_support(&scales, &u_pcs, &nuisance.low, &x_low)?;
            let fit = fit_npmle_weights(&mu_obs, &mu_channel, &atoms, &opts)?;
            Prior::Discrete(fit.prior)
        }
    };

    let mut nu_priors = Vec::with_capacity(xbar.len());
    for (h, init) in spectral.iter().enumerate() {
        let nui = &nuisance.high[h];
        let channel =
            LinearGaussianChannel::new(diag(&nui.scale.s_r), diag(&nui.scale.sigma_r))?;
        let label = format!("fit-nu-{}", dataset.high[h].id);
        let prior = match params.prior_class {
            PriorClass::Gmm => {
                let fit = fit_gmm_deconvolution(
                    &init.v_pc,
                    &channel,
                    k_nu[h],
                    derive_seed(params.seed, &label),
                    &opts,
                )?;
                Prior::Gmm(fit.prior)
            }
            PriorClass::Npmle => {
                let mut atoms = init.v_pc.clone();
                for k in 0..ranks[h] {
                    let s = nui.scale.s_r[k];
                    atoms.column_mut(k).mapv_inplace(|v| v / s);
                }
                let fit = fit_npmle_weights(&init.v_pc, &channel, &atoms, &opts)?;
                Prior::Discrete(fit.prior)
            }
        };
        nu_priors.push(prior);
    }

    // refinement loop
    let ids: Vec<String> = dataset.high.iter().map(|m| m.id.clone()).collect();
    let inputs = AmpInputs {
        xbar: &xbar,
        x_low: &x_low,
        mu: &mu_prior,
        nu: &nu_priors,
        d_hat: nuisance.high.iter().map(|h| h.d_hat.clone()).collect(),
        l_hat: &nuisance.low,
        ids: ids.clone(),
    };
    let (mut state, mut record) = initialize(&spectral, &nuisance, &low_dims, n)?;
    for _ in 0..=params.iterations {
        iterate_once(&mut state, &mut record, &inputs)?;
        observer(&state);
    }

    // bundle assembly
    let t_final = params.iterations;
    let mut high_bundles = Vec::with_capacity(xbar.len());
    for (h, hs) in state.high.iter().enumerate() {
        high_bundles.push(HighBundle {
            id: ids[h].clone(),
            rank: ranks[h],
            gamma: xbar[h].ncols() as f64 / n as f64,
            p: xbar[h].ncols(),
            d_hat: nuisance.high[h].d_hat.clone(),
            sigma_l: ensure_pd(&record.sigma_l[h][t_final])?,
            s_l: record.s_l[h][t_final].clone(),
            v_bar: hs.v_bar.clone(),
            preprocess: dataset.high[h].preprocess.clone(),
        });
    }
    let low_bundles: Vec<LowBundle> = dataset
        .low
        .iter()
        .enumerate()
        .map(|(l, m)| LowBundle {
            id: m.id.clone(),
            r_tilde: low_dims[l],
            l_hat: nuisance.low[l].clone(),
            preprocess: m.preprocess.clone(),
        })
        .collect();
    let bundle = ModelBundle {
        n,
        iterations: params.iterations,
        seed: params.seed,
        high: high_bundles,
        low: low_bundles,
        mu: mu_prior.clone(),
        nu: nu_priors.clone(),
    };
    bundle.validate()?;

    Ok(FitOutput { state, record, bundle, spectral, nuisance, mu: mu_prior, nu: nu_priors })
}
