//! Prior families for the latent factors and their empirical-Bayes fits.
//!
//! Two concrete classes: Gaussian mixtures fitted by EM on the deconvolution
//! likelihood, and discrete priors with a fixed support whose weights are
//! fitted by EM (the nonparametric MLE route). Both are observed through a
//! linear-Gaussian channel `y = A u + e`, `e ~ N(0, B)`.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::substream;

const LOG_2PI: f64 = 1.8378770664093453;

/// `y = A u + e`, `e ~ N(0, B)` with `B` symmetric positive definite.
#[derive(Debug, Clone)]
pub struct LinearGaussianChannel {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LinearGaussianChannel {
    pub fn new(a: Array2<f64>, b: Array2<f64>) -> Result<Self> {
        if b.nrows() != b.ncols() || b.nrows() != a.nrows() {
            return Err(Error::Arg(format!(
                "channel shape mismatch: A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if linalg::max_asymmetry(&b) > 1e-10 * b.diag().sum().abs().max(1.0) {
            return Err(Error::Arg("channel noise covariance is not symmetric".into()));
        }
        if linalg::min_eigenvalue(&b)? <= 0.0 {
            return Err(Error::Arg("channel noise covariance is not positive definite".into()));
        }
        Ok(Self { a, b })
    }

    pub fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.a.ncols()
    }

    /// Identity design with isotropic noise, for tests and toy setups.
    pub fn identity(dim: usize, noise_var: f64) -> Self {
        Self { a: Array2::eye(dim), b: Array2::eye(dim) * noise_var }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixturePrior {
    /// Mixing proportions, nonnegative, summing to one.
    pub weights: Array1<f64>,
    /// K x dim component means.
    pub means: Array2<f64>,
    /// Per-component symmetric PSD covariances.
    pub covariances: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePrior {
    /// S x dim support points.
    pub atoms: Array2<f64>,
    pub weights: Array1<f64>,
}

/// Either prior family, behind one denoising and sampling interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorJson", into = "PriorJson")]
pub enum Prior {
    Gmm(GaussianMixturePrior),
    Discrete(DiscretePrior),
}

impl GaussianMixturePrior {
    pub fn new(weights: Array1<f64>, means: Array2<f64>, covariances: Vec<Array2<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.nrows() != k || covariances.len() != k {
            return Err(Error::Arg("mixture component counts disagree".into()));
        }
        let dim = means.ncols();
        if weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Arg("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Arg(format!("mixture weights sum to {total}, expected 1")));
        }
        for c in &covariances {
            if c.nrows() != dim || c.ncols() != dim {
                return Err(Error::Arg("covariance dimension mismatch".into()));
            }
            if linalg::max_asymmetry(c) > 1e-9 * c.diag().sum().abs().max(1.0) {
                return Err(Error::Arg("covariance is not symmetric".into()));
            }
        }
        Ok(Self { weights, means, covariances })
    }

    /// Single Gaussian as a one-component mixture.
    pub fn gaussian(mean: Array1<f64>, covariance: Array2<f64>) -> Self {
        let dim = mean.len();
        Self {
            weights: Array1::ones(1),
            means: mean.insert_axis(Axis(0)),
            covariances: vec![covariance],
        }
        .validate_dim(dim)
    }

    fn validate_dim(self, dim: usize) -> Self {
        debug_assert_eq!(self.means.ncols(), dim);
        self
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn mean(&self) -> Array1<f64> {
        let mut m = Array1::zeros(self.dim());
        for (k, w) in self.weights.iter().enumerate() {
            m += &(self.means.row(k).to_owned() * *w);
        }
        m
    }

    pub fn second_moment(&self) -> Array2<f64> {
        let d = self.dim();
        let mut s = Array2::zeros((d, d));
        for (k, w) in self.weights.iter().enumerate() {
            let m = self.means.row(k);
            for i in 0..d {
                for j in 0..d {
                    s[[i, j]] += w * (self.covariances[k][[i, j]] + m[i] * m[j]);
                }
            }
        }
        s
    }

    pub fn covariance(&self) -> Array2<f64> {
        let m = self.mean();
        let mut s = self.second_moment();
        for i in 0..m.len() {
            for j in 0..m.len() {
                s[[i, j]] -= m[i] * m[j];
            }
        }
        s
    }

    /// Distribution of `W (Z - c)` for `Z` from this mixture.
    pub fn affine(&self, w: &Array2<f64>, c: &Array1<f64>) -> Self {
        let k = self.weights.len();
        let out_dim = w.nrows();
        let mut means = Array2::zeros((k, out_dim));
        let mut covs = Vec::with_capacity(k);
        for j in 0..k {
            let shifted = &self.means.row(j) - c;
            means.row_mut(j).assign(&w.dot(&shifted));
            covs.push(linalg::symmetrize(&w.dot(&self.covariances[j]).dot(&w.t())));
        }
        Self { weights: self.weights.clone(), means, covariances: covs }
    }

    pub fn marginalize(&self, coords: &[usize]) -> Result<Self> {
        check_coords(coords, self.dim())?;
        let k = self.weights.len();
        let d = coords.len();
        let mut means = Array2::zeros((k, d));
        let mut covs = Vec::with_capacity(k);
        for j in 0..k {
            for (a, &ca) in coords.iter().enumerate() {
                means[[j, a]] = self.means[[j, ca]];
            }
            let mut c = Array2::zeros((d, d));
            for (a, &ca) in coords.iter().enumerate() {
                for (b, &cb) in coords.iter().enumerate() {
                    c[[a, b]] = self.covariances[j][[ca, cb]];
                }
            }
            covs.push(c);
        }
        Ok(Self { weights: self.weights.clone(), means, covariances: covs })
    }
}

impl DiscretePrior {
    pub fn new(atoms: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        if atoms.nrows() == 0 || atoms.nrows() != weights.len() {
            return Err(Error::Arg("atom and weight counts disagree".into()));
        }
        if weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Arg("weights must be nonnegative".into()));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Arg(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { atoms, weights })
    }

    pub fn point_mass(atom: Array1<f64>) -> Self {
        Self { atoms: atom.insert_axis(Axis(0)), weights: Array1::ones(1) }
    }

    pub fn dim(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn mean(&self) -> Array1<f64> {
        let mut m = Array1::zeros(self.dim());
        for (k, w) in self.weights.iter().enumerate() {
            m += &(self.atoms.row(k).to_owned() * *w);
        }
        m
    }

    pub fn second_moment(&self) -> Array2<f64> {
        let d = self.dim();
        let mut s = Array2::zeros((d, d));
        for (k, w) in self.weights.iter().enumerate() {
            let a = self.atoms.row(k);
            for i in 0..d {
                for j in 0..d {
                    s[[i, j]] += w * a[i] * a[j];
                }
            }
        }
        s
    }

    pub fn covariance(&self) -> Array2<f64> {
        let m = self.mean();
        let mut s = self.second_moment();
        for i in 0..m.len() {
            for j in 0..m.len() {
                s[[i, j]] -= m[i] * m[j];
            }
        }
        s
    }

    pub fn affine(&self, w: &Array2<f64>, c: &Array1<f64>) -> Self {
        let s = self.atoms.nrows();
        let out_dim = w.nrows();
        let mut atoms = Array2::zeros((s, out_dim));
        for j in 0..s {
            let shifted = &self.atoms.row(j) - c;
            atoms.row_mut(j).assign(&w.dot(&shifted));
        }
        Self { atoms, weights: self.weights.clone() }
    }

    /// Restrict atoms to `coords`, merging weights of coinciding restrictions.
    pub fn marginalize(&self, coords: &[usize]) -> Result<Self> {
        check_coords(coords, self.dim())?;
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut atoms: Vec<Vec<f64>> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for j in 0..self.atoms.nrows() {
            let restricted: Vec<f64> = coords.iter().map(|&c| self.atoms[[j, c]]).collect();
            let key: Vec<u64> = restricted.iter().map(|v| v.to_bits()).collect();
            match index.get(&key) {
                Some(&slot) => weights[slot] += self.weights[j],
                None => {
                    index.insert(key, atoms.len());
                    atoms.push(restricted);
                    weights.push(self.weights[j]);
                }
            }
        }
        let d = coords.len();
        let flat: Vec<f64> = atoms.into_iter().flatten().collect();
        Ok(Self {
            atoms: Array2::from_shape_vec((weights.len(), d), flat).expect("shape"),
            weights: Array1::from_vec(weights),
        })
    }
}

fn check_coords(coords: &[usize], dim: usize) -> Result<()> {
    if coords.is_empty() {
        return Err(Error::Arg("coordinate set must be nonempty".into()));
    }
    let mut seen = vec![false; dim];
    for &c in coords {
        if c >= dim {
            return Err(Error::Arg(format!("coordinate {c} out of range 0..{dim}")));
        }
        if seen[c] {
            return Err(Error::Arg(format!("duplicate coordinate {c}")));
        }
        seen[c] = true;
    }
    Ok(())
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::Gmm(g) => g.dim(),
            Prior::Discrete(d) => d.dim(),
        }
    }

    pub fn mean(&self) -> Array1<f64> {
        match self {
            Prior::Gmm(g) => g.mean(),
            Prior::Discrete(d) => d.mean(),
        }
    }

    pub fn covariance(&self) -> Array2<f64> {
        match self {
            Prior::Gmm(g) => g.covariance(),
            Prior::Discrete(d) => d.covariance(),
        }
    }

    pub fn affine(&self, w: &Array2<f64>, c: &Array1<f64>) -> Prior {
        match self {
            Prior::Gmm(g) => Prior::Gmm(g.affine(w, c)),
            Prior::Discrete(d) => Prior::Discrete(d.affine(w, c)),
        }
    }

    pub fn marginalize(&self, coords: &[usize]) -> Result<Prior> {
        match self {
            Prior::Gmm(g) => Ok(Prior::Gmm(g.marginalize(coords)?)),
            Prior::Discrete(d) => Ok(Prior::Discrete(d.marginalize(coords)?)),
        }
    }

    /// Draw `n` iid rows using an explicit generator.
    pub fn sample_with(&self, n: usize, rng: &mut impl Rng) -> Array2<f64> {
        let dim = self.dim();
        let mut out = Array2::zeros((n, dim));
        match self {
            Prior::Gmm(g) => {
                let factors: Vec<Array2<f64>> = g
                    .covariances
                    .iter()
                    .map(|c| linalg::sym_sqrt(c, 0.0).expect("PSD covariance"))
                    .collect();
                for i in 0..n {
                    let k = pick_category(&g.weights, rng);
                    let z: Array1<f64> =
                        Array1::from_shape_fn(dim, |_| rng.sample(StandardNormal));
                    let x = g.means.row(k).to_owned() + factors[k].dot(&z);
                    out.row_mut(i).assign(&x);
                }
            }
            Prior::Discrete(d) => {
                for i in 0..n {
                    let k = pick_category(&d.weights, rng);
                    out.row_mut(i).assign(&d.atoms.row(k));
                }
            }
        }
        out
    }
}

pub(crate) fn pick_category(weights: &Array1<f64>, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random::<f64>() * weights.sum();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// Draw `n` iid rows from the prior, deterministic per seed.
pub fn sample_prior(prior: &Prior, n: usize, seed: u64) -> Array2<f64> {
    let mut rng = substream(seed, "prior-sample");
    prior.sample_with(n, &mut rng)
}

/// Serialized form: plain nested arrays.
#[derive(Serialize, Deserialize, Clone)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PriorJson {
    Gmm { weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<Vec<f64>>> },
    Discrete { atoms: Vec<Vec<f64>>, weights: Vec<f64> },
}

fn to_nested(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub(crate) fn from_nested(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(Error::Schema(format!("{what}: empty matrix")));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Schema(format!("{what}: ragged or empty rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Schema(format!("{what}: non-finite entry")));
    }
    Ok(Array2::from_shape_vec((rows.len(), cols), flat).expect("shape"))
}

impl From<Prior> for PriorJson {
    fn from(p: Prior) -> Self {
        match p {
            Prior::Gmm(g) => PriorJson::Gmm {
                weights: g.weights.to_vec(),
                means: to_nested(&g.means),
                covariances: g.covariances.iter().map(to_nested).collect(),
            },
            Prior::Discrete(d) => {
                PriorJson::Discrete { atoms: to_nested(&d.atoms), weights: d.weights.to_vec() }
            }
        }
    }
}

impl TryFrom<PriorJson> for Prior {
    type Error = Error;

    fn try_from(p: PriorJson) -> Result<Self> {
        match p {
            PriorJson::Gmm { weights, means, covariances } => {
                let means = from_nested(&means, "gmm means")?;
                let covs = covariances
                    .iter()
                    .map(|c| from_nested(c, "gmm covariance"))
                    .collect::<Result<Vec<_>>>()?;
                let g = GaussianMixturePrior::new(Array1::from_vec(weights), means, covs)
                    .map_err(|e| Error::Schema(e.to_string()))?;
                Ok(Prior::Gmm(g))
            }
            PriorJson::Discrete { atoms, weights } => {
                let atoms = from_nested(&atoms, "discrete atoms")?;
                let d = DiscretePrior::new(atoms, Array1::from_vec(weights))
                    .map_err(|e| Error::Schema(e.to_string()))?;
                Ok(Prior::Discrete(d))
            }
        }
    }
}

/// EM controls shared by both fits.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub prior: GaussianMixturePrior,
    /// Marginal log-likelihood after each EM iteration.
    pub log_likelihood: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct NpmleFit {
    pub prior: DiscretePrior,
    pub log_likelihood: Vec<f64>,
}

struct ComponentOps {
    chol: Array2<f64>,
    log_norm: f64,
    obs_mean: Array1<f64>,
    gain: Array2<f64>,
    post_cov: Array2<f64>,
}

fn component_ops(
    channel: &LinearGaussianChannel,
    mean: &Array1<f64>,
    cov: &Array2<f64>,
) -> Result<ComponentOps> {
    let obs_dim = channel.obs_dim();
    let ac = channel.a.dot(cov);
    let m = linalg::symmetrize(&(ac.dot(&channel.a.t()) + &channel.b));
    let chol = linalg::cholesky_jittered(&m, 1e-10)?;
    let log_norm = -0.5 * linalg::log_det_from_chol(&chol) - 0.5 * obs_dim as f64 * LOG_2PI;
    // G = C A^T M^{-1}, computed column by column through the factor
    let cat = ac.t().to_owned(); // latent x obs holding (A C)^T = C A^T
    let latent = channel.latent_dim();
    let mut gain = Array2::zeros((latent, obs_dim));
    for j in 0..obs_dim {
        let mut e = vec![0.0; obs_dim];
        e[j] = 1.0;
        linalg::solve_lower_inplace(&chol, &mut e);
        linalg::solve_lower_t_inplace(&chol, &mut e);
        let col = cat.dot(&Array1::from_vec(e));
        gain.column_mut(j).assign(&col);
    }
    let post_cov = linalg::symmetrize(&(cov - &gain.dot(&channel.a).dot(cov)));
    Ok(ComponentOps { chol, log_norm, obs_mean: channel.a.dot(mean), gain, post_cov })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// k-means++ seeding on the whitened pseudo-observations.
fn kmeans_pp(points: &Array2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = points.nrows();
    let d = points.ncols();
    let mut centers = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| {
            let diff = &points.row(i) - &centers.row(0);
            diff.dot(&diff)
        })
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for i in 0..n {
            let diff = &points.row(i) - &centers.row(c);
            let dist = diff.dot(&diff);
            if dist < d2[i] {
                d2[i] = dist;
            }
        }
    }
    centers
}

fn floor_covariance(c: &Array2<f64>, floor: f64) -> Result<Array2<f64>> {
    linalg::sym_eig_map(&linalg::symmetrize(c), |v| v.max(floor))
}

/// Fit a K-component Gaussian mixture prior to pseudo-observations seen
/// through `channel`, by EM on the marginal mixture
/// `y ~ sum_k pi_k N(A m_k, A C_k A^T + B)`.
pub fn fit_gmm_deconvolution(
    y: &Array2<f64>,
    channel: &LinearGaussianChannel,
    k: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<GmmFit> {
    let n = y.nrows();
    let obs_dim = channel.obs_dim();
    let latent = channel.latent_dim();
    if y.ncols() != obs_dim {
        return Err(Error::Arg(format!(
            "observations have {} columns, channel expects {obs_dim}",
            y.ncols()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::Fit(format!("need 1 <= K <= n, got K={k}, n={n}")));
    }

    // whitened pseudo-observations A^+ y
    let aplus = linalg::pinv(&channel.a, 1e-12)?;
    let u0 = y.dot(&aplus.t());
    let mean0 = u0.mean_axis(Axis(0)).expect("nonempty");
    let mut cov0 = Array2::<f64>::zeros((latent, latent));
    for i in 0..n {
        let d = &u0.row(i) - &mean0;
        for a in 0..latent {
            for b in 0..latent {
                cov0[[a, b]] += d[a] * d[b];
            }
        }
    }
    cov0 /= n as f64;
    let cov_floor = 1e-6 * (cov0.diag().sum() / latent as f64).max(f64::MIN_POSITIVE);

    let mut rng = substream(seed, "gmm-init");
    let mut means = kmeans_pp(&u0, k, &mut rng);
    let init_cov = floor_covariance(&cov0, cov_floor)?;
    let mut covs: Vec<Array2<f64>> = vec![init_cov; k];
    let mut log_pi: Vec<f64> = vec![-(k as f64).ln(); k];

    let mut history: Vec<f64> = Vec::new();
    let mut degenerate = false;
    let mut resp_spread = f64::INFINITY;

    for _iter in 0..opts.max_iter {
        let ops: Vec<ComponentOps> = (0..k)
            .map(|j| component_ops(channel, &means.row(j).to_owned(), &covs[j]))
            .collect::<Result<Vec<_>>>()?;

        let mut ll = 0.0;
        let mut nk = vec![0.0f64; k];
        let mut mu_sum = Array2::<f64>::zeros((k, latent));
        let mut outer_sum = vec![Array2::<f64>::zeros((latent, latent)); k];
        let mut logw = vec![0.0f64; k];
        let mut delta = vec![0.0f64; obs_dim];
        resp_spread = 0.0;

        for i in 0..n {
            let yi = y.row(i);
            for j in 0..k {
                for t in 0..obs_dim {
                    delta[t] = yi[t] - ops[j].obs_mean[t];
                }
                let mut z = delta.clone();
                linalg::solve_lower_inplace(&ops[j].chol, &mut z);
                let q: f64 = z.iter().map(|v| v * v).sum();
                logw[j] = log_pi[j] + ops[j].log_norm - 0.5 * q;
            }
            let lse = log_sum_exp(&logw);
            ll += lse;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for j in 0..k {
                let r = (logw[j] - lse).exp();
                lo = lo.min(r);
                hi = hi.max(r);
                if r == 0.0 {
                    continue;
                }
                nk[j] += r;
                for t in 0..obs_dim {
                    delta[t] = yi[t] - ops[j].obs_mean[t];
                }
                let post_mean =
                    means.row(j).to_owned() + ops[j].gain.dot(&ndarray::aview1(&delta));
                for a in 0..latent {
                    mu_sum[[j, a]] += r * post_mean[a];
                    for b in 0..latent {
                        outer_sum[j][[a, b]] += r * post_mean[a] * post_mean[b];
                    }
                }
            }
            resp_spread = resp_spread.max(hi - lo);
        }

        for j in 0..k {
            if nk[j] <= 1e-300 {
                // dead component: freeze its parameters, zero its weight
                log_pi[j] = f64::NEG_INFINITY;
                degenerate = true;
                continue;
            }
            log_pi[j] = (nk[j] / n as f64).ln();
            let mj = mu_sum.row(j).to_owned() / nk[j];
            means.row_mut(j).assign(&mj);
            let mut c = &outer_sum[j] / nk[j] + &ops[j].post_cov;
            for a in 0..latent {
                for b in 0..latent {
                    c[[a, b]] -= mj[a] * mj[b];
                }
            }
            covs[j] = floor_covariance(&c, cov_floor)?;
        }

        let improved = history.last().map(|prev| ll - prev);
        history.push(ll);
        if let Some(delta_ll) = improved {
            if delta_ll.abs() < opts.tol * history[history.len() - 2].abs().max(1.0) {
                break;
            }
        }
    }

    if k > 1 && resp_spread < 1e-12 {
        degenerate = true;
    }

    let mut weights = Array1::from_vec(log_pi.iter().map(|lp| lp.exp()).collect());
    let total = weights.sum();
    weights.mapv_inplace(|w| w / total);
    let prior = GaussianMixturePrior::new(weights, means, covs)?;
    Ok(GmmFit { prior, log_likelihood: history, degenerate })
}

/// Fixed-support EM on mixing weights only.
pub fn fit_npmle_weights(
    y: &Array2<f64>,
    channel: &LinearGaussianChannel,
    atoms: &Array2<f64>,
    opts: &FitOptions,
) -> Result<NpmleFit> {
    let n = y.nrows();
    let s = atoms.nrows();
    if s == 0 {
        return Err(Error::Arg("support must be nonempty".into()));
    }
    if y.ncols() != channel.obs_dim() || atoms.ncols() != channel.latent_dim() {
        return Err(Error::Arg("observation/support dimensions disagree with channel".into()));
    }
    let obs_dim = channel.obs_dim();
    let chol = linalg::cholesky_jittered(&channel.b, 1e-10)?;
    let log_norm = -0.5 * linalg::log_det_from_chol(&chol) - 0.5 * obs_dim as f64 * LOG_2PI;

    // Precompute per-(row, atom) Gaussian log-likelihoods.
    let mut ll_mat = Array2::<f64>::zeros((n, s));
    let obs_atoms = atoms.dot(&channel.a.t());
    let mut delta = vec![0.0f64; obs_dim];
    for i in 0..n {
        let yi = y.row(i);
        for j in 0..s {
            for t in 0..obs_dim {
                delta[t] = yi[t] - obs_atoms[[j, t]];
            }
            linalg::solve_lower_inplace(&chol, &mut delta);
            let q: f64 = delta.iter().map(|v| v * v).sum();
            ll_mat[[i, j]] = log_norm - 0.5 * q;
        }
    }

    let mut log_w = vec![-(s as f64).ln(); s];
    let mut history = Vec::new();
    let mut scratch = vec![0.0f64; s];
    for _iter in 0..opts.max_iter {
        let mut ll = 0.0;
        let mut w_acc = vec![0.0f64; s];
        for i in 0..n {
            for j in 0..s {
                scratch[j] = log_w[j] + ll_mat[[i, j]];
            }
            let lse = log_sum_exp(&scratch);
            ll += lse;
            for j in 0..s {
                w_acc[j] += (scratch[j] - lse).exp();
            }
        }
        for j in 0..s {
            log_w[j] = if w_acc[j] > 0.0 { (w_acc[j] / n as f64).ln() } else { f64::NEG_INFINITY };
        }
        let improved = history.last().map(|prev| ll - prev);
        history.push(ll);
        if let Some(delta_ll) = improved {
            if delta_ll.abs() < opts.tol * history[history.len() - 2].abs().max(1.0) {
                break;
            }
        }
    }

    let mut weights = Array1::from_vec(log_w.iter().map(|lw| lw.exp()).collect());
    let total = weights.sum();
    weights.mapv_inplace(|w| w / total);
    Ok(NpmleFit { prior: DiscretePrior { atoms: atoms.clone(), weights }, log_likelihood: history })
}

/// Support for the joint NPMLE prior: row i concatenates the whitened rows
/// `(diag(s_l)^{-1} u_pc_i, ..., L^{-1} x_low_i, ...)`.
pub fn build_npmle_support(
    high_scales: &[Array1<f64>],
    u_pcs: &[Array2<f64>],
    low_loadings: &[Array2<f64>],
    x_lows: &[Array2<f64>],
) -> Result<Array2<f64>> {
    if u_pcs.is_empty() && x_lows.is_empty() {
        return Err(Error::Arg("no pseudo-observations supplied".into()));
    }
    let n = u_pcs.first().map(|m| m.nrows()).or_else(|| x_lows.first().map(|m| m.nrows()))
        .expect("nonempty");
    let total: usize =
        u_pcs.iter().map(|m| m.ncols()).sum::<usize>() + x_lows.iter().map(|m| m.ncols()).sum::<usize>();
    let mut out = Array2::<f64>::zeros((n, total));
    let mut col = 0usize;
    for (scale, u) in high_scales.iter().zip(u_pcs) {
        if u.nrows() != n {
            return Err(Error::Arg("pseudo-observation row counts disagree".into()));
        }
        for k in 0..u.ncols() {
            let s = scale[k];
            if s <= 0.0 {
                return Err(Error::Singular(format!("scale entry {k} is not positive")));
            }
            for i in 0..n {
                out[[i, col]] = u[[i, k]] / s;
            }
            col += 1;
        }
    }
    for (l, x) in low_loadings.iter().zip(x_lows) {
        if x.nrows() != n {
            return Err(Error::Arg("pseudo-observation row counts disagree".into()));
        }
        if linalg::min_eigenvalue(l)? <= 0.0 {
            return Err(Error::Singular("low-dimensional loading is singular".into()));
        }
        let l_inv = linalg::sym_inverse(l)?;
        let w = x.dot(&l_inv); // symmetric, so x L^{-1} stacks L^{-1} x_i rows
        for k in 0..x.ncols() {
            for i in 0..n {
                out[[i, col]] = w[[i, k]];
            }
            col += 1;
        }
    }
    Ok(out)
}

/// Default mixture size `round(n^(1/3))`, at least 1.
pub fn default_components(n: usize) -> usize {
    ((n as f64).powf(1.0 / 3.0).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, array};

    fn rng_matrix(rows: usize, cols: usize, label: &str, seed: u64) -> Array2<f64> {
        let mut rng = substream(seed, label);
        Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn deconvolution_recovers_separated_means() {
        // 1-D, two components at +-3 observed through a near-identity channel
        let mut rng = substream(1, "decon-data");
        let n = 5000;
        let mut y = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            let sign = if rng.random::<f64>() < 0.5 { -3.0 } else { 3.0 };
            let z: f64 = rng.sample(StandardNormal);
            y[[i, 0]] = sign + 0.7 * z;
        }
        let channel = LinearGaussianChannel::identity(1, 1e-6);
        let fit = fit_gmm_deconvolution(&y, &channel, 2, 9, &FitOptions::default()).unwrap();
        let mut ms: Vec<f64> = (0..2).map(|k| fit.prior.means[[k, 0]]).collect();
        ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((ms[0] + 3.0).abs() < 0.1, "got {ms:?}");
        assert!((ms[1] - 3.0).abs() < 0.1, "got {ms:?}");
    }

    #[test]
    fn single_component_matches_closed_form() {
        let mut rng = substream(2, "k1-data");
        let n = 4000;
        let sigma2: f64 = 0.25;
        let mut y = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            let u: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            y[[i, 0]] = 1.5 + u + sigma2.sqrt() * e;
        }
        let channel = LinearGaussianChannel::identity(1, sigma2);
        let fit = fit_gmm_deconvolution(&y, &channel, 1, 3, &FitOptions::default()).unwrap();
        let sample_mean = y.column(0).sum() / n as f64;
        let sample_var =
            y.column(0).iter().map(|v| (v - sample_mean).powi(2)).sum::<f64>() / n as f64;
        assert!((fit.prior.means[[0, 0]] - sample_mean).abs() < 1e-6);
        assert!((fit.prior.covariances[0][[0, 0]] - (sample_var - sigma2)).abs() < 1e-4);
    }

    #[test]
    fn em_loglik_is_nondecreasing() {
        for seed in 0..5u64 {
            let y = rng_matrix(300, 2, "ascent", seed) * 2.0;
            let a = arr2(&[[1.0, 0.2], [0.0, 0.8]]);
            let b = arr2(&[[0.5, 0.1], [0.1, 0.4]]);
            let channel = LinearGaussianChannel::new(a, b).unwrap();
            let fit =
                fit_gmm_deconvolution(&y, &channel, 3, seed, &FitOptions::default()).unwrap();
            for w in fit.log_likelihood.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0),
                    "seed {seed}: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn near_noiseless_matches_plain_gmm_reference() {
        // With B -> 0 and invertible square A the deconvolution EM reduces to
        // plain GMM EM on A^{-1} y, up to the channel transport of means and
        // covariances. The reference implementation below shares the same
        // seeded k-means++ initialization.
        let k = 2;
        let seed = 5u64;
        let mut rng = substream(seed, "plain-data");
        let n = 800;
        let mut u = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            let c = if rng.random::<f64>() < 0.4 { -2.0 } else { 2.0 };
            u[[i, 0]] = c + rng.sample::<f64, _>(StandardNormal) * 0.8;
            u[[i, 1]] = -0.5 * c + rng.sample::<f64, _>(StandardNormal) * 0.6;
        }
        let a = arr2(&[[1.4, 0.3], [-0.2, 0.9]]);
        let y = u.dot(&a.t());
        let channel =
            LinearGaussianChannel::new(a.clone(), Array2::eye(2) * 1e-10).unwrap();
        let opts = FitOptions { max_iter: 200, tol: 1e-12 };
        let fit = fit_gmm_deconvolution(&y, &channel, k, seed, &opts).unwrap();

        // plain GMM EM on whitened data
        let u0 = y.dot(&linalg::pinv(&a, 1e-12).unwrap().t());
        let mut rng2 = substream(seed, "gmm-init");
        let mut means = kmeans_pp(&u0, k, &mut rng2);
        let mean0 = u0.mean_axis(Axis(0)).unwrap();
        let mut cov0 = Array2::<f64>::zeros((2, 2));
        for i in 0..n {
            let d = &u0.row(i) - &mean0;
            for a2 in 0..2 {
                for b2 in 0..2 {
                    cov0[[a2, b2]] += d[a2] * d[b2] / n as f64;
                }
            }
        }
        let floor = 1e-6 * cov0.diag().sum() / 2.0;
        let mut covs = vec![floor_covariance(&cov0, floor).unwrap(); k];
        let mut pis = vec![1.0 / k as f64; k];
        for _ in 0..200 {
            let mut resp = Array2::<f64>::zeros((n, k));
            for i in 0..n {
                let mut lw = vec![0.0; k];
                for j in 0..k {
                    let d = &u0.row(i) - &means.row(j);
                    let chol = linalg::cholesky_jittered(&covs[j], 1e-10).unwrap();
                    let mut z = d.to_vec();
                    linalg::solve_lower_inplace(&chol, &mut z);
                    let q: f64 = z.iter().map(|v| v * v).sum();
                    lw[j] = pis[j].ln() - 0.5 * q - 0.5 * linalg::log_det_from_chol(&chol)
                        - (2.0 / 2.0) * LOG_2PI;
                }
                let lse = log_sum_exp(&lw);
                for j in 0..k {
                    resp[[i, j]] = (lw[j] - lse).exp();
                }
            }
            for j in 0..k {
                let nk: f64 = resp.column(j).sum();
                pis[j] = nk / n as f64;
                let mut mj = Array1::<f64>::zeros(2);
                for i in 0..n {
                    mj = mj + &(u0.row(i).to_owned() * resp[[i, j]]);
                }
                mj /= nk;
                means.row_mut(j).assign(&mj);
                let mut c = Array2::<f64>::zeros((2, 2));
                for i in 0..n {
                    let d = &u0.row(i) - &mj;
                    for a2 in 0..2 {
                        for b2 in 0..2 {
                            c[[a2, b2]] += resp[[i, j]] * d[a2] * d[b2];
                        }
                    }
                }
                c /= nk;
                covs[j] = floor_covariance(&c, floor).unwrap();
            }
        }

        // align components by nearest mean
        for j in 0..k {
            let target = means.row(j);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for l in 0..k {
                let d = (&fit.prior.means.row(l) - &target).mapv(|v| v * v).sum();
                if d < best_d {
                    best_d = d;
                    best = l;
                }
            }
            let diff = (&fit.prior.means.row(best) - &target).mapv(f64::abs).sum();
            assert!(diff < 1e-6, "component {j}: mean discrepancy {diff}");
        }
    }

    #[test]
    fn npmle_concentrates_on_supported_atom() {
        let mut rng = substream(4, "npmle");
        let n = 400;
        let mut y = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            y[[i, 0]] = 1.0 + 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
        let channel = LinearGaussianChannel::identity(1, 0.01);
        let atoms = arr2(&[[-1.0], [1.0]]);
        let fit = fit_npmle_weights(&y, &channel, &atoms, &FitOptions::default()).unwrap();
        assert!(fit.prior.weights[1] >= 0.99, "weights {:?}", fit.prior.weights);
    }

    #[test]
    fn npmle_symmetric_data_keeps_uniform_weights() {
        let y = arr2(&[[2.0], [-2.0], [0.5], [-0.5]]);
        let channel = LinearGaussianChannel::identity(1, 1.0);
        let atoms = arr2(&[[-1.0], [1.0]]);
        let fit =
            fit_npmle_weights(&y, &channel, &atoms, &FitOptions { max_iter: 1, tol: 0.0 })
                .unwrap();
        assert!((fit.prior.weights[0] - 0.5).abs() < 1e-12);
        assert!((fit.prior.weights[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn npmle_loglik_monotone_on_random_data() {
        let y = rng_matrix(120, 2, "npmle-mono", 7);
        let a = arr2(&[[1.0, 0.0], [0.3, 0.9]]);
        let b = arr2(&[[0.8, 0.0], [0.0, 0.6]]);
        let channel = LinearGaussianChannel::new(a, b).unwrap();
        let atoms = rng_matrix(15, 2, "npmle-atoms", 8);
        let fit =
            fit_npmle_weights(&y, &channel, &atoms, &FitOptions { max_iter: 100, tol: 0.0 })
                .unwrap();
        assert!(fit.log_likelihood.len() >= 100);
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn support_construction_cases() {
        // scalar whitening: s = 2, row 4 -> atom 2
        let out = build_npmle_support(
            &[arr1(&[2.0])],
            &[arr2(&[[4.0]])],
            &[],
            &[],
        )
        .unwrap();
        assert_eq!(out, arr2(&[[2.0]]));

        // identity scalings concatenate raw rows
        let u = arr2(&[[1.0], [2.0], [3.0]]);
        let x = arr2(&[[-1.0], [0.0], [5.0]]);
        let out = build_npmle_support(
            &[arr1(&[1.0])],
            &[u.clone()],
            &[Array2::eye(1)],
            &[x.clone()],
        )
        .unwrap();
        assert_eq!(out.nrows(), 3);
        for i in 0..3 {
            assert_eq!(out[[i, 0]], u[[i, 0]]);
            assert_eq!(out[[i, 1]], x[[i, 0]]);
        }
    }

    #[test]
    fn marginalize_cases() {
        let g = GaussianMixturePrior::new(
            arr1(&[0.4, 0.6]),
            arr2(&[[1.0, -1.0], [2.0, 3.0]]),
            vec![
                arr2(&[[1.0, 0.0], [0.0, 2.0]]),
                arr2(&[[0.5, 0.0], [0.0, 0.25]]),
            ],
        )
        .unwrap();
        let full = g.marginalize(&[0, 1]).unwrap();
        assert_eq!(full, g);
        let first = g.marginalize(&[0]).unwrap();
        assert_eq!(first.means, arr2(&[[1.0], [2.0]]));
        assert_eq!(first.covariances[0], arr2(&[[1.0]]));
        assert_eq!(first.covariances[1], arr2(&[[0.5]]));

        let d = DiscretePrior::new(
            arr2(&[[0.0, 0.0], [0.0, 1.0]]),
            arr1(&[0.3, 0.7]),
        )
        .unwrap();
        let m = d.marginalize(&[0]).unwrap();
        assert_eq!(m.atoms, arr2(&[[0.0]]));
        assert!((m.weights[0] - 1.0).abs() < 1e-15);

        assert!(matches!(d.marginalize(&[]), Err(Error::Arg(_))));
    }

    #[test]
    fn sampling_properties() {
        let point = Prior::Discrete(DiscretePrior::point_mass(arr1(&[1.5, -2.0])));
        let rows = sample_prior(&point, 8, 3);
        for i in 0..8 {
            assert_eq!(rows[[i, 0]], 1.5);
            assert_eq!(rows[[i, 1]], -2.0);
        }

        let g = Prior::Gmm(GaussianMixturePrior::gaussian(arr1(&[0.0]), array![[1.0]]));
        let a = sample_prior(&g, 100, 11);
        let b = sample_prior(&g, 100, 11);
        assert_eq!(a, b);

        let big = sample_prior(&g, 1_000_000, 13);
        let mean = big.column(0).sum() / 1e6;
        let var = big.column(0).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1e6;
        assert!(mean.abs() < 4.0 / 1000.0, "mean {mean}");
        assert!((0.99..=1.01).contains(&var), "var {var}");
    }

    #[test]
    fn marginalize_then_sample_matches_sample_then_restrict() {
        let g = Prior::Gmm(
            GaussianMixturePrior::new(
                arr1(&[0.5, 0.5]),
                arr2(&[[0.0, 1.0], [1.5, -1.0]]),
                vec![
                    arr2(&[[1.0, 0.4], [0.4, 0.8]]),
                    arr2(&[[0.3, 0.0], [0.0, 0.9]]),
                ],
            )
            .unwrap(),
        );
        let n = 100_000;
        let direct = sample_prior(&g.marginalize(&[1]).unwrap(), n, 21);
        let full = sample_prior(&g, n, 22);
        let mut a: Vec<f64> = direct.column(0).to_vec();
        let mut b: Vec<f64> = full.column(1).to_vec();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        // two-sample KS distance
        let mut ks = 0.0f64;
        let (mut i, mut j) = (0usize, 0usize);
        while i < n && j < n {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            ks = ks.max((i as f64 / n as f64 - j as f64 / n as f64).abs());
        }
        assert!(ks < 0.02, "KS distance {ks}");
    }

    #[test]
    fn prior_json_roundtrip() {
        let p = Prior::Gmm(
            GaussianMixturePrior::new(
                arr1(&[0.25, 0.75]),
                arr2(&[[1.0, 2.0], [-1.0, 0.5]]),
                vec![Array2::eye(2), Array2::eye(2) * 0.5],
            )
            .unwrap(),
        );
        let s = serde_json::to_string(&p).unwrap();
        let back: Prior = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);

        let d = Prior::Discrete(
            DiscretePrior::new(arr2(&[[0.0], [1.0]]), arr1(&[0.5, 0.5])).unwrap(),
        );
        let s = serde_json::to_string(&d).unwrap();
        let back: Prior = serde_json::from_str(&s).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn fit_rejects_more_components_than_rows() {
        let y = rng_matrix(3, 1, "tiny", 0);
        let channel = LinearGaussianChannel::identity(1, 0.5);
        assert!(matches!(
            fit_gmm_deconvolution(&y, &channel, 4, 0, &FitOptions::default()),
            Err(Error::Fit(_))
        ));
    }
}
