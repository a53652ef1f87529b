//! Posterior-mean denoisers under a linear-Gaussian channel.
//!
//! One engine serves every denoiser in the pipeline: the per-modality
//! loading denoisers, the joint subject denoiser, and the query-side
//! denoisers. Given `y = A u + e` with `u` from a Gaussian-mixture or
//! discrete prior, the posterior is again a mixture with closed-form
//! weights, means, and covariances; the engine precomputes the per-component
//! factorizations once and then streams rows through them.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::prior::{pick_category, LinearGaussianChannel, Prior};
use crate::rng::substream;

const LOG_2PI: f64 = 1.8378770664093453;

/// Posterior mixture at a single observation.
#[derive(Debug, Clone)]
pub struct PosteriorMixture {
    /// Normalized component weights at this observation.
    pub weights: Array1<f64>,
    /// K x latent component means.
    pub means: Array2<f64>,
    /// Per-component posterior covariances (zero matrices for discrete priors).
    pub covariances: Vec<Array2<f64>>,
    /// Per-component gains `G_k = C_k A^T (A C_k A^T + B)^{-1}`.
    pub gains: Vec<Array2<f64>>,
}

struct GmmComponent {
    log_pi: f64,
    prior_mean: Array1<f64>,
    obs_mean: Array1<f64>,
    chol: Array2<f64>,
    log_norm: f64,
    gain: Array2<f64>,
    post_cov: Array2<f64>,
    post_sqrt: Array2<f64>,
}

enum Kind {
    Gmm(Vec<GmmComponent>),
    Discrete {
        log_w: Vec<f64>,
        atoms: Array2<f64>,
        obs_atoms: Array2<f64>,
        chol: Array2<f64>,
        log_norm: f64,
    },
}

/// Precomputed posterior machinery for one (channel, prior) pair.
pub struct PosteriorEngine {
    latent_dim: usize,
    obs_dim: usize,
    kind: Kind,
}

struct Scratch {
    logw: Vec<f64>,
    delta: Vec<f64>,
    post_means: Array2<f64>,
    etas: Array2<f64>,
}

impl Scratch {
    fn new(k: usize, latent: usize, obs: usize) -> Self {
        Self {
            logw: vec![0.0; k],
            delta: vec![0.0; obs],
            post_means: Array2::zeros((k, latent)),
            etas: Array2::zeros((k, obs)),
        }
    }
}

impl PosteriorEngine {
    pub fn new(channel: &LinearGaussianChannel, prior: &Prior) -> Result<Self> {
        let latent_dim = channel.latent_dim();
        let obs_dim = channel.obs_dim();
        if prior.dim() != latent_dim {
            return Err(Error::Arg(format!(
                "prior dimension {} does not match channel latent dimension {latent_dim}",
                prior.dim()
            )));
        }
        let kind = match prior {
            Prior::Gmm(g) => {
                let k = g.weights.len();
                let mut comps = Vec::with_capacity(k);
                for j in 0..k {
                    let cov = &g.covariances[j];
                    let ac = channel.a.dot(cov);
                    let m = linalg::symmetrize(&(ac.dot(&channel.a.t()) + &channel.b));
                    let chol = linalg::cholesky_jittered(&m, 1e-10)?;
                    let log_norm =
                        -0.5 * linalg::log_det_from_chol(&chol) - 0.5 * obs_dim as f64 * LOG_2PI;
                    let cat = ac.t().to_owned();
                    let mut gain = Array2::zeros((latent_dim, obs_dim));
                    for c in 0..obs_dim {
                        let mut e = vec![0.0; obs_dim];
                        e[c] = 1.0;
                        linalg::solve_lower_inplace(&chol, &mut e);
                        linalg::solve_lower_t_inplace(&chol, &mut e);
                        gain.column_mut(c).assign(&cat.dot(&Array1::from_vec(e)));
                    }
                    let post_cov =
                        linalg::symmetrize(&(cov - &gain.dot(&channel.a).dot(cov)));
                    let post_sqrt = linalg::sym_sqrt(&post_cov, 0.0)?;
                    let prior_mean = g.means.row(j).to_owned();
                    comps.push(GmmComponent {
                        log_pi: if g.weights[j] > 0.0 { g.weights[j].ln() } else { f64::NEG_INFINITY },
                        obs_mean: channel.a.dot(&prior_mean),
                        prior_mean,
                        chol,
                        log_norm,
                        gain,
                        post_cov,
                        post_sqrt,
                    });
                }
                Kind::Gmm(comps)
            }
            Prior::Discrete(d) => {
                let chol = linalg::cholesky_jittered(&channel.b, 1e-10)?;
                let log_norm =
                    -0.5 * linalg::log_det_from_chol(&chol) - 0.5 * obs_dim as f64 * LOG_2PI;
                Kind::Discrete {
                    log_w: d
                        .weights
                        .iter()
                        .map(|w| if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY })
                        .collect(),
                    obs_atoms: d.atoms.dot(&channel.a.t()),
                    atoms: d.atoms.clone(),
                    chol,
                    log_norm,
                }
            }
        };
        Ok(Self { latent_dim, obs_dim, kind })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn components(&self) -> usize {
        match &self.kind {
            Kind::Gmm(c) => c.len(),
            Kind::Discrete { log_w, .. } => log_w.len(),
        }
    }

    /// Normalized log posterior weights; also fills per-component posterior
    /// means and score vectors `eta_k = -M_k^{-1}(y - A m_k)`.
    fn eval(&self, y: &[f64], sc: &mut Scratch) {
        match &self.kind {
            Kind::Gmm(comps) => {
                for (j, comp) in comps.iter().enumerate() {
                    for t in 0..self.obs_dim {
                        sc.delta[t] = y[t] - comp.obs_mean[t];
                    }
                    let mut z = sc.delta.clone();
                    linalg::solve_lower_inplace(&comp.chol, &mut z);
                    let q: f64 = z.iter().map(|v| v * v).sum();
                    sc.logw[j] = comp.log_pi + comp.log_norm - 0.5 * q;
                    linalg::solve_lower_t_inplace(&comp.chol, &mut z);
                    for t in 0..self.obs_dim {
                        sc.etas[[j, t]] = -z[t];
                    }
                    let mut mean = comp.prior_mean.clone();
                    for a in 0..self.latent_dim {
                        let mut acc = mean[a];
                        for t in 0..self.obs_dim {
                            acc += comp.gain[[a, t]] * sc.delta[t];
                        }
                        mean[a] = acc;
                    }
                    sc.post_means.row_mut(j).assign(&mean);
                }
            }
            Kind::Discrete { log_w, atoms, obs_atoms, chol, log_norm } => {
                for j in 0..log_w.len() {
                    for t in 0..self.obs_dim {
                        sc.delta[t] = y[t] - obs_atoms[[j, t]];
                    }
                    let mut z = sc.delta.clone();
                    linalg::solve_lower_inplace(chol, &mut z);
                    let q: f64 = z.iter().map(|v| v * v).sum();
                    sc.logw[j] = log_w[j] + log_norm - 0.5 * q;
                    linalg::solve_lower_t_inplace(chol, &mut z);
                    for t in 0..self.obs_dim {
                        sc.etas[[j, t]] = -z[t];
                    }
                    sc.post_means.row_mut(j).assign(&atoms.row(j));
                }
            }
        }
        // normalize in place via log-sum-exp
        let m = sc.logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + sc.logw.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for w in sc.logw.iter_mut() {
            *w -= lse;
        }
    }

    /// Full posterior detail at one observation.
    pub fn posterior(&self, y: &Array1<f64>) -> PosteriorMixture {
        let k = self.components();
        let mut sc = Scratch::new(k, self.latent_dim, self.obs_dim);
        self.eval(y.as_slice().expect("contiguous"), &mut sc);
        let weights = Array1::from_vec(sc.logw.iter().map(|lw| lw.exp()).collect());
        let (covs, gains) = match &self.kind {
            Kind::Gmm(comps) => (
                comps.iter().map(|c| c.post_cov.clone()).collect(),
                comps.iter().map(|c| c.gain.clone()).collect(),
            ),
            Kind::Discrete { .. } => (
                vec![Array2::zeros((self.latent_dim, self.latent_dim)); k],
                vec![Array2::zeros((self.latent_dim, self.obs_dim)); k],
            ),
        };
        PosteriorMixture { weights, means: sc.post_means, covariances: covs, gains }
    }

    /// Posterior mean.
    pub fn mean(&self, y: &Array1<f64>) -> Array1<f64> {
        let k = self.components();
        let mut sc = Scratch::new(k, self.latent_dim, self.obs_dim);
        self.eval(y.as_slice().expect("contiguous"), &mut sc);
        let mut out = Array1::zeros(self.latent_dim);
        for j in 0..k {
            let w = sc.logw[j].exp();
            for a in 0..self.latent_dim {
                out[a] += w * sc.post_means[[j, a]];
            }
        }
        out
    }

    /// Analytic Jacobian of the posterior mean with respect to y.
    pub fn jacobian(&self, y: &Array1<f64>) -> Array2<f64> {
        let k = self.components();
        let mut sc = Scratch::new(k, self.latent_dim, self.obs_dim);
        self.eval(y.as_slice().expect("contiguous"), &mut sc);
        let mut jac = Array2::zeros((self.latent_dim, self.obs_dim));
        self.accumulate_jacobian(&sc, &mut jac);
        jac
    }

    fn accumulate_jacobian(&self, sc: &Scratch, jac: &mut Array2<f64>) {
        let k = self.components();
        let mut eta_bar = vec![0.0f64; self.obs_dim];
        for j in 0..k {
            let w = sc.logw[j].exp();
            for t in 0..self.obs_dim {
                eta_bar[t] += w * sc.etas[[j, t]];
            }
        }
        for j in 0..k {
            let w = sc.logw[j].exp();
            if w == 0.0 {
                continue;
            }
            if let Kind::Gmm(comps) = &self.kind {
                let g = &comps[j].gain;
                for a in 0..self.latent_dim {
                    for t in 0..self.obs_dim {
                        jac[[a, t]] += w * g[[a, t]];
                    }
                }
            }
            for a in 0..self.latent_dim {
                let mu = sc.post_means[[j, a]];
                for t in 0..self.obs_dim {
                    jac[[a, t]] += w * mu * (sc.etas[[j, t]] - eta_bar[t]);
                }
            }
        }
    }

    /// Apply the posterior mean to every row; also return the row-averaged
    /// Jacobian (fixed accumulation order).
    pub fn rowwise(&self, y: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.rowwise_impl(y, true)
    }

    /// Rowwise posterior means without the Jacobian pass.
    pub fn rowwise_means(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.rowwise_impl(y, false)?.0)
    }

    fn rowwise_impl(&self, y: &Array2<f64>, with_jac: bool) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = y.nrows();
        if n == 0 {
            return Err(Error::Arg("rowwise denoising needs at least one row".into()));
        }
        if y.ncols() != self.obs_dim {
            return Err(Error::Arg(format!(
                "rows have {} entries, channel expects {}",
                y.ncols(),
                self.obs_dim
            )));
        }
        let k = self.components();
        let mut sc = Scratch::new(k, self.latent_dim, self.obs_dim);
        let mut means = Array2::zeros((n, self.latent_dim));
        let mut jac_sum = Array2::zeros((self.latent_dim, self.obs_dim));
        let mut row_buf = vec![0.0f64; self.obs_dim];
        for i in 0..n {
            for t in 0..self.obs_dim {
                row_buf[t] = y[[i, t]];
            }
            self.eval(&row_buf, &mut sc);
            for j in 0..k {
                let w = sc.logw[j].exp();
                if w == 0.0 {
                    continue;
                }
                for a in 0..self.latent_dim {
                    means[[i, a]] += w * sc.post_means[[j, a]];
                }
            }
            if with_jac {
                self.accumulate_jacobian(&sc, &mut jac_sum);
            }
        }
        jac_sum /= n as f64;
        Ok((means, jac_sum))
    }

    /// Exact posterior sampling: component by weight, then the component's
    /// Gaussian (the atom itself for discrete priors).
    pub fn sample(&self, y: &Array1<f64>, m: usize, rng: &mut impl Rng) -> Array2<f64> {
        let k = self.components();
        let mut sc = Scratch::new(k, self.latent_dim, self.obs_dim);
        self.eval(y.as_slice().expect("contiguous"), &mut sc);
        let weights = Array1::from_vec(sc.logw.iter().map(|lw| lw.exp()).collect());
        let mut out = Array2::zeros((m, self.latent_dim));
        for i in 0..m {
            let j = pick_category(&weights, rng);
            match &self.kind {
                Kind::Gmm(comps) => {
                    let z: Array1<f64> =
                        Array1::from_shape_fn(self.latent_dim, |_| rng.sample(StandardNormal));
                    let x = sc.post_means.row(j).to_owned() + comps[j].post_sqrt.dot(&z);
                    out.row_mut(i).assign(&x);
                }
                Kind::Discrete { .. } => {
                    out.row_mut(i).assign(&sc.post_means.row(j));
                }
            }
        }
        out
    }
}

/// Posterior mixture at `y` (thin wrapper building a one-shot engine).
pub fn posterior(
    channel: &LinearGaussianChannel,
    prior: &Prior,
    y: &Array1<f64>,
) -> Result<PosteriorMixture> {
    Ok(PosteriorEngine::new(channel, prior)?.posterior(y))
}

/// Posterior mean `E[u | y]`.
pub fn denoise_mean(
    channel: &LinearGaussianChannel,
    prior: &Prior,
    y: &Array1<f64>,
) -> Result<Array1<f64>> {
    Ok(PosteriorEngine::new(channel, prior)?.mean(y))
}

/// Jacobian of the posterior mean at `y` (latent x obs).
pub fn denoise_jacobian(
    channel: &LinearGaussianChannel,
    prior: &Prior,
    y: &Array1<f64>,
) -> Result<Array2<f64>> {
    Ok(PosteriorEngine::new(channel, prior)?.jacobian(y))
}

/// Rowwise posterior means restricted to `out_coords`, plus the row-averaged
/// sub-Jacobian of that output block with respect to the `in_coords` block of
/// the observation.
pub fn rowwise_denoise(
    channel: &LinearGaussianChannel,
    prior: &Prior,
    y: &Array2<f64>,
    out_coords: std::ops::Range<usize>,
    in_coords: std::ops::Range<usize>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let engine = PosteriorEngine::new(channel, prior)?;
    if out_coords.end > engine.latent_dim() || in_coords.end > engine.obs_dim() {
        return Err(Error::Arg("coordinate block out of range".into()));
    }
    let (means, jbar) = engine.rowwise(y)?;
    let means_block = means.slice(s![.., out_coords.clone()]).to_owned();
    let j_block = jbar.slice(s![out_coords, in_coords]).to_owned();
    Ok((means_block, j_block))
}

/// Posterior samples, deterministic per seed.
pub fn posterior_sample(
    channel: &LinearGaussianChannel,
    prior: &Prior,
    y: &Array1<f64>,
    m: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if m == 0 {
        return Err(Error::Arg("sample count must be at least 1".into()));
    }
    let engine = PosteriorEngine::new(channel, prior)?;
    let mut rng = substream(seed, "posterior-sample");
    Ok(engine.sample(y, m, &mut rng))
}
