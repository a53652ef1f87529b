//! Ground-truth data generation, the oracle state-evolution recursion, MSE
//! limits, and the comparison harness behind the simulation command.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::amp::{self, FitOutput, FitParams, Modality, MultimodalDataset};
use crate::config::{GmmComponents, PriorClass, RankSpec};
use crate::denoise::PosteriorEngine;
use crate::error::{Error, Result};
use crate::linalg;
use crate::predict::{predict_set, Query, QueryBlock};
use crate::prior::{LinearGaussianChannel, Prior};
use crate::rng::{derive_seed, substream};
use crate::spectral::init_scale_params;

/// Latent factors and parameters behind one generated dataset. The stored
/// priors are the normalized ones actually sampled from.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub n: usize,
    pub u: Vec<Array2<f64>>,
    pub u_tilde: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub d: Vec<Array1<f64>>,
    pub l: Vec<Array2<f64>>,
    pub mu: Prior,
    pub nu: Vec<Prior>,
}

impl GroundTruth {
    /// Concatenated true latent row for subject `i` (high blocks then low).
    pub fn latent_row(&self, i: usize) -> Array1<f64> {
        let total: usize =
            self.u.iter().map(|m| m.ncols()).sum::<usize>() + self.u_tilde.iter().map(|m| m.ncols()).sum::<usize>();
        let mut row = Array1::zeros(total);
        let mut off = 0;
        for m in self.u.iter().chain(&self.u_tilde) {
            for k in 0..m.ncols() {
                row[off + k] = m[[i, k]];
            }
            off += m.ncols();
        }
        row
    }
}

/// Generator settings.
#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub n: usize,
    /// (id, feature count, signal strengths) per high-dimensional modality.
    pub high: Vec<(String, usize, Array1<f64>)>,
    /// (id, symmetric full-rank loading) per low-dimensional modality.
    pub low: Vec<(String, Array2<f64>)>,
    pub mu: Prior,
    pub nu: Vec<Prior>,
    /// 1 is the model; other values only support noiseless sanity checks.
    pub noise_scale: f64,
    pub seed: u64,
}

fn block_dims(spec: &GeneratorSpec) -> (Vec<usize>, Vec<usize>) {
    let high: Vec<usize> = spec.high.iter().map(|(_, _, d)| d.len()).collect();
    let low: Vec<usize> = spec.low.iter().map(|(_, l)| l.nrows()).collect();
    (high, low)
}

/// Affinely transform a prior so its mean is zero and each per-modality
/// block of its second moment is exactly the identity. Cross-block
/// correlation survives the transform.
pub fn normalize_prior_blocks(prior: &Prior, blocks: &[usize]) -> Result<Prior> {
    let dim: usize = blocks.iter().sum();
    if prior.dim() != dim {
        return Err(Error::Arg(format!(
            "prior dimension {} does not match block layout {dim}",
            prior.dim()
        )));
    }
    let mean = prior.mean();
    let cov = prior.covariance();
    let mut w = Array2::<f64>::zeros((dim, dim));
    let mut off = 0;
    for &b in blocks {
        let block = cov.slice(s![off..off + b, off..off + b]).to_owned();
        let (vals, _) = linalg::sym_eigh(&block)?;
        if vals[0] <= 1e-12 {
            return Err(Error::Arg("prior block covariance is degenerate".into()));
        }
        let inv_sqrt = linalg::sym_eig_map(&block, |v| 1.0 / v.sqrt())?;
        w.slice_mut(s![off..off + b, off..off + b]).assign(&inv_sqrt);
        off += b;
    }
    Ok(prior.affine(&w, &mean))
}

/// Draw a dataset from the model. Latents are drawn from the normalized
/// priors; the returned truth carries those priors.
pub fn generate_dataset(spec: &GeneratorSpec) -> Result<(MultimodalDataset, GroundTruth)> {
    let n = spec.n;
    if n == 0 || spec.high.is_empty() {
        return Err(Error::Arg("need subjects and at least one high-dimensional modality".into()));
    }
    let (high_dims, low_dims) = block_dims(spec);
    let blocks: Vec<usize> = high_dims.iter().chain(&low_dims).copied().collect();
    if spec.nu.len() != spec.high.len() {
        return Err(Error::Arg("one loading prior per high-dimensional modality".into()));
    }
    for (h, (id, p, d)) in spec.high.iter().enumerate() {
        let gamma = *p as f64 / n as f64;
        let edge = gamma.powf(-0.25);
        for (k, &dk) in d.iter().enumerate() {
            if dk <= edge {
                return Err(Error::Arg(format!(
                    "modality {id:?}: signal strength {dk} at {k} is not above the detection edge {edge:.3}"
                )));
            }
            for &other in d.iter().skip(k + 1) {
                if (dk - other).abs() < 1e-12 {
                    return Err(Error::Arg(format!("modality {id:?}: repeated signal strengths")));
                }
            }
        }
        if spec.nu[h].dim() != d.len() {
            return Err(Error::Arg(format!("modality {id:?}: loading prior dimension mismatch")));
        }
    }

    let mu = normalize_prior_blocks(&spec.mu, &blocks)?;
    let nu: Vec<Prior> = spec
        .nu
        .iter()
        .zip(&high_dims)
        .map(|(p, &r)| normalize_prior_blocks(p, &[r]))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = substream(spec.seed, "latent-mu");
    let joint = mu.sample_with(n, &mut rng);
    let mut u = Vec::new();
    let mut u_tilde = Vec::new();
    let mut off = 0;
    for &r in &high_dims {
        u.push(joint.slice(s![.., off..off + r]).to_owned());
        off += r;
    }
    for &rt in &low_dims {
        u_tilde.push(joint.slice(s![.., off..off + rt]).to_owned());
        off += rt;
    }

    let mut high_mods = Vec::new();
    let mut v_all = Vec::new();
    let mut d_all = Vec::new();
    for (h, (id, p, d)) in spec.high.iter().enumerate() {
        let mut vrng = substream(spec.seed, &format!("latent-nu-{id}"));
        let v = nu[h].sample_with(*p, &mut vrng);
        let mut x = Array2::<f64>::zeros((n, *p));
        // (1/sqrt(N)) U diag(d) V^T
        let mut ud = u[h].clone();
        for k in 0..d.len() {
            let dk = d[k] / (n as f64).sqrt();
            ud.column_mut(k).mapv_inplace(|val| val * dk);
        }
        x = x + ud.dot(&v.t());
        if spec.noise_scale != 0.0 {
            let mut wrng = substream(spec.seed, &format!("noise-{id}"));
            for val in x.iter_mut() {
                *val += spec.noise_scale * wrng.sample::<f64, _>(StandardNormal);
            }
        }
        high_mods.push(Modality::new(id.clone(), x));
        v_all.push(v);
        d_all.push(d.clone());
    }

    let mut low_mods = Vec::new();
    let mut l_all = Vec::new();
    for (l, (id, loading)) in spec.low.iter().enumerate() {
        if linalg::max_asymmetry(loading) > 1e-10 {
            return Err(Error::Arg(format!("modality {id:?}: loading must be symmetric")));
        }
        let mut x = u_tilde[l].dot(&loading.t());
        if spec.noise_scale != 0.0 {
            let mut wrng = substream(spec.seed, &format!("noise-{id}"));
            for val in x.iter_mut() {
                *val += spec.noise_scale * wrng.sample::<f64, _>(StandardNormal);
            }
        }
        low_mods.push(Modality::new(id.clone(), x));
        l_all.push(loading.clone());
    }

    let dataset = MultimodalDataset { high: high_mods, low: low_mods };
    let truth =
        GroundTruth { n, u, u_tilde, v: v_all, d: d_all, l: l_all, mu, nu };
    Ok((dataset, truth))
}

/// Which blocks a generated query observes: (high modality index, features)
/// and (low modality index, features).
#[derive(Debug, Clone, Default)]
pub struct ObservedSpec {
    pub high: Vec<(usize, Vec<usize>)>,
    pub low: Vec<(usize, Vec<usize>)>,
}

/// Draw a fresh subject from the truth's prior and emit its partial
/// observation plus the full true latent vector.
pub fn generate_query(
    truth: &GroundTruth,
    observed: &ObservedSpec,
    noise_scale: f64,
    seed: u64,
) -> Result<(Query, Array1<f64>)> {
    let mut rng = substream(seed, "query-latent");
    let latent = truth.mu.sample_with(1, &mut rng).row(0).to_owned();
    let high_dims: Vec<usize> = truth.u.iter().map(|m| m.ncols()).collect();
    let offsets: Vec<usize> = {
        let mut v = vec![0usize];
        for &r in &high_dims {
            v.push(v.last().unwrap() + r);
        }
        v
    };
    let r_total: usize = high_dims.iter().sum();

    let mut query = Query::default();
    let mut nrng = substream(seed, "query-noise");
    for (h, features) in &observed.high {
        let v = &truth.v[*h];
        let d = &truth.d[*h];
        let u_q = latent.slice(s![offsets[*h]..offsets[*h] + high_dims[*h]]).to_owned();
        let scale = 1.0 / (truth.n as f64).sqrt();
        let values: Vec<f64> = features
            .iter()
            .map(|&f| {
                let mut acc = 0.0;
                for k in 0..d.len() {
                    acc += v[[f, k]] * d[k] * u_q[k];
                }
                acc * scale + noise_scale * nrng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        query.high.push(QueryBlock {
            modality: format!("h{h}"),
            features: features.clone(),
            values,
        });
    }
    let mut low_off = r_total;
    let mut low_offsets = Vec::new();
    for m in &truth.u_tilde {
        low_offsets.push(low_off);
        low_off += m.ncols();
    }
    for (l, features) in &observed.low {
        let loading = &truth.l[*l];
        let rt = loading.nrows();
        let u_q = latent.slice(s![low_offsets[*l]..low_offsets[*l] + rt]).to_owned();
        let values: Vec<f64> = features
            .iter()
            .map(|&f| {
                let mut acc = 0.0;
                for k in 0..rt {
                    acc += loading[[f, k]] * u_q[k];
                }
                acc + noise_scale * nrng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        query.low.push(QueryBlock {
            modality: format!("l{l}"),
            features: features.clone(),
            values,
        });
    }
    Ok((query, latent))
}

/// Oracle state-evolution track, computed by Monte Carlo at the true priors
/// with common random numbers across iterations.
#[derive(Debug, Clone)]
pub struct OracleSe {
    /// Per modality, for t = 0..=T.
    pub sigma_l: Vec<Vec<Array2<f64>>>,
    pub s_l: Vec<Vec<Array2<f64>>>,
    /// Per modality, for t = 0..=T+1 (index 0 is the spectral init).
    pub sigma_r: Vec<Vec<Array2<f64>>>,
    pub s_r: Vec<Vec<Array2<f64>>>,
    /// Whitened information matrices, same indexing as the scales above.
    pub gamma_l: Vec<Vec<Array2<f64>>>,
    pub gamma_r: Vec<Vec<Array2<f64>>>,
    /// Low-dimensional posterior second moments per modality, t = 0..=T.
    pub sigma_tilde: Vec<Vec<Array2<f64>>>,
}

pub struct OracleParams<'a> {
    pub mu: &'a Prior,
    pub nu: &'a [Prior],
    pub d: &'a [Array1<f64>],
    pub l: &'a [Array2<f64>],
    pub gamma: &'a [f64],
    pub iterations: usize,
    pub mc: usize,
    pub seed: u64,
}

fn diag(v: &Array1<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((v.len(), v.len()));
    for (i, x) in v.iter().enumerate() {
        m[[i, i]] = *x;
    }
    m
}

fn check_unit_blocks(prior: &Prior, blocks: &[usize], what: &str) -> Result<()> {
    let mean = prior.mean();
    let cov = prior.covariance();
    let mut second = cov;
    for i in 0..mean.len() {
        for j in 0..mean.len() {
            second[[i, j]] += mean[i] * mean[j];
        }
    }
    let mut off = 0;
    for &b in blocks {
        for i in 0..b {
            for j in 0..b {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (second[[off + i, off + j]] - expect).abs() > 1e-6 {
                    return Err(Error::Arg(format!(
                        "{what}: block second moment is not the identity; \
                         normalize the prior first"
                    )));
                }
            }
        }
        off += b;
    }
    Ok(())
}

/// `(1/gamma_scale) D^{-1/2} S^T Sigma^{-1} S D^{-1/2}` — the information
/// reparameterization whose trajectory certifies convergence.
fn gamma_matrix(
    s: &Array2<f64>,
    sigma: &Array2<f64>,
    d: &Array1<f64>,
    gamma_scale: f64,
) -> Result<Array2<f64>> {
    let sigma_inv = linalg::sym_inverse(&(sigma + &(Array2::<f64>::eye(sigma.nrows()) * 1e-12)))?;
    let core = s.t().dot(&sigma_inv).dot(s);
    let r = d.len();
    let mut out = Array2::zeros((r, r));
    for i in 0..r {
        for j in 0..r {
            out[[i, j]] = core[[i, j]] / (gamma_scale * (d[i] * d[j]).sqrt());
        }
    }
    Ok(linalg::symmetrize(&out))
}

pub fn oracle_state_evolution(params: &OracleParams) -> Result<OracleSe> {
    let m = params.d.len();
    let mc = params.mc;
    if mc < 1000 {
        return Err(Error::Arg("oracle Monte Carlo needs at least 1000 samples".into()));
    }
    let t_max = params.iterations;
    let ranks: Vec<usize> = params.d.iter().map(|d| d.len()).collect();
    let low_dims: Vec<usize> = params.l.iter().map(|l| l.nrows()).collect();
    let r_total: usize = ranks.iter().sum();

    // the recursion is only meaningful for priors with unit per-block second
    // moments (the generator's normalization)
    let blocks: Vec<usize> = ranks.iter().chain(&low_dims).copied().collect();
    check_unit_blocks(params.mu, &blocks, "joint prior")?;
    for (h, nu) in params.nu.iter().enumerate() {
        check_unit_blocks(nu, &ranks[h..=h], &format!("loading prior {h}"))?;
    }

    // common random numbers reused across iterations
    let mut v_pool = Vec::new();
    let mut zr_pool = Vec::new();
    for h in 0..m {
        let mut rng = substream(params.seed, &format!("oracle-v-{h}"));
        v_pool.push(params.nu[h].sample_with(mc, &mut rng));
        let mut zrng = substream(params.seed, &format!("oracle-zr-{h}"));
        zr_pool.push(Array2::<f64>::from_shape_fn((mc, ranks[h]), |_| {
            zrng.sample(StandardNormal)
        }));
    }
    let mut urng = substream(params.seed, "oracle-u");
    let joint_pool = params.mu.sample_with(mc, &mut urng);
    let mut zl_pool = Vec::new();
    for h in 0..m {
        let mut zrng = substream(params.seed, &format!("oracle-zl-{h}"));
        zl_pool.push(Array2::<f64>::from_shape_fn((mc, ranks[h]), |_| {
            zrng.sample(StandardNormal)
        }));
    }
    // fixed low-dimensional observations
    let mut low_obs = Vec::new();
    let mut off = r_total;
    for (l, &rt) in low_dims.iter().enumerate() {
        let block = joint_pool.slice(s![.., off..off + rt]).to_owned();
        let mut y = block.dot(&params.l[l].t());
        let mut zrng = substream(params.seed, &format!("oracle-zt-{l}"));
        for v in y.iter_mut() {
            *v += zrng.sample::<f64, _>(StandardNormal);
        }
        low_obs.push(y);
        off += rt;
    }

    let mut se = OracleSe {
        sigma_l: vec![Vec::new(); m],
        s_l: vec![Vec::new(); m],
        sigma_r: vec![Vec::new(); m],
        s_r: vec![Vec::new(); m],
        gamma_l: vec![Vec::new(); m],
        gamma_r: vec![Vec::new(); m],
        sigma_tilde: vec![Vec::new(); low_dims.len()],
    };
    for h in 0..m {
        let scale = init_scale_params(&params.d[h], params.gamma[h])?;
        let sigma_r = diag(&scale.sigma_r);
        let s_r = diag(&scale.s_r);
        se.gamma_r[h].push(gamma_matrix(&s_r, &sigma_r, &params.d[h], 1.0)?);
        se.sigma_r[h].push(sigma_r);
        se.s_r[h].push(s_r);
    }

    for _t in 0..=t_max {
        // loading side per modality
        for h in 0..m {
            let r = ranks[h];
            let s_r = se.s_r[h].last().unwrap().clone();
            let sigma_r = se.sigma_r[h].last().unwrap().clone();
            let sqrt_sigma = linalg::sym_sqrt(&sigma_r, 0.0)?;
            let y = v_pool[h].dot(&s_r.t()) + zr_pool[h].dot(&sqrt_sigma.t());
            let channel = LinearGaussianChannel::new(
                s_r.clone(),
                linalg::symmetrize(&(sigma_r.clone() + Array2::<f64>::eye(r) * 1e-12)),
            )?;
            let engine = PosteriorEngine::new(&channel, &params.nu[h])?;
            let means = engine.rowwise_means(&y)?;
            let sigma_l = linalg::symmetrize(&(means.t().dot(&means) * (params.gamma[h] / mc as f64)));
            let cross = means.t().dot(&v_pool[h]) * (params.gamma[h] / mc as f64);
            let s_l = cross.dot(&diag(&params.d[h]));
            se.gamma_l[h]
                .push(gamma_matrix(&s_l, &sigma_l, &params.d[h], params.gamma[h])?);
            se.sigma_l[h].push(sigma_l);
            se.s_l[h].push(s_l);
        }

        // joint subject side
        let latent = r_total + low_dims.iter().sum::<usize>();
        let mut design = Array2::<f64>::zeros((latent, latent));
        let mut noise = Array2::<f64>::zeros((latent, latent));
        let mut obs = Array2::<f64>::zeros((mc, latent));
        let mut off = 0;
        for h in 0..m {
            let r = ranks[h];
            let s_l = se.s_l[h].last().unwrap();
            let sigma_l = se.sigma_l[h].last().unwrap();
            design.slice_mut(s![off..off + r, off..off + r]).assign(s_l);
            noise
                .slice_mut(s![off..off + r, off..off + r])
                .assign(&(sigma_l + &(Array2::<f64>::eye(r) * 1e-12)));
            let u_block = joint_pool.slice(s![.., off..off + r]);
            let sqrt_sigma = linalg::sym_sqrt(sigma_l, 0.0)?;
            let y = u_block.dot(&s_l.t()) + zl_pool[h].dot(&sqrt_sigma.t());
            obs.slice_mut(s![.., off..off + r]).assign(&y);
            off += r;
        }
        for (l, &rt) in low_dims.iter().enumerate() {
            design.slice_mut(s![off..off + rt, off..off + rt]).assign(&params.l[l]);
            noise.slice_mut(s![off..off + rt, off..off + rt]).assign(&Array2::eye(rt));
            obs.slice_mut(s![.., off..off + rt]).assign(&low_obs[l]);
            off += rt;
        }
        let channel = LinearGaussianChannel::new(design, noise)?;
        let engine = PosteriorEngine::new(&channel, params.mu)?;
        let means = engine.rowwise_means(&obs)?;

        let mut off = 0;
        for h in 0..m {
            let r = ranks[h];
            let block = means.slice(s![.., off..off + r]);
            let u_block = joint_pool.slice(s![.., off..off + r]);
            let sigma_r =
                linalg::symmetrize(&(block.t().dot(&block).to_owned() / mc as f64));
            let cross = block.t().dot(&u_block).to_owned() / mc as f64;
            let s_r = cross.dot(&diag(&params.d[h]));
            se.gamma_r[h].push(gamma_matrix(&s_r, &sigma_r, &params.d[h], 1.0)?);
            se.sigma_r[h].push(sigma_r);
            se.s_r[h].push(s_r);
            off += r;
        }
        for (l, &rt) in low_dims.iter().enumerate() {
            let block = means.slice(s![.., off..off + rt]);
            let st = linalg::symmetrize(&(block.t().dot(&block).to_owned() / mc as f64));
            se.sigma_tilde[l].push(st);
            off += rt;
        }
    }
    Ok(se)
}

/// Asymptotic MSE limits at iteration `t`.
#[derive(Debug, Clone)]
pub struct MseOracles {
    /// Per high-dimensional modality: `Tr(I - (Sigma_R_{t+1})^2)`.
    pub subject: Vec<f64>,
    /// Per high-dimensional modality: `Tr(I - gamma^{-2} (Sigma_L_t)^2)`.
    pub modality: Vec<f64>,
    /// Per low-dimensional modality: `Tr(I - Sigma_tilde_t^2)`.
    pub low: Vec<f64>,
}

pub fn mse_oracles(se: &OracleSe, gamma: &[f64], t: usize) -> Result<MseOracles> {
    let mut out = MseOracles { subject: Vec::new(), modality: Vec::new(), low: Vec::new() };
    for h in 0..se.sigma_r.len() {
        let sr = se.sigma_r[h]
            .get(t + 1)
            .ok_or_else(|| Error::Arg(format!("oracle not computed through iteration {t}")))?;
        let r = sr.nrows() as f64;
        out.subject.push(r - sr.dot(sr).diag().sum());
        let sl = se.sigma_l[h]
            .get(t)
            .ok_or_else(|| Error::Arg(format!("oracle not computed through iteration {t}")))?;
        out.modality.push(r - sl.dot(sl).diag().sum() / (gamma[h] * gamma[h]));
    }
    for l in 0..se.sigma_tilde.len() {
        let st = se.sigma_tilde[l]
            .get(t)
            .ok_or_else(|| Error::Arg(format!("oracle not computed through iteration {t}")))?;
        out.low.push(st.nrows() as f64 - st.dot(st).diag().sum());
    }
    Ok(out)
}

/// `(1/N^2) || E E^T - T T^T ||_F^2` via r x r Gram expansions.
pub fn empirical_mse(estimate: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    assert_eq!(estimate.nrows(), truth.nrows(), "row counts must agree");
    let n = estimate.nrows() as f64;
    let ee = estimate.t().dot(estimate);
    let tt = truth.t().dot(truth);
    let et = estimate.t().dot(truth);
    let tr =
        ee.dot(&ee).diag().sum() + tt.dot(&tt).diag().sum() - 2.0 * et.dot(&et.t()).diag().sum();
    tr / (n * n)
}

/// Per-column sign alignment: +1 when the inner product with the truth is
/// nonnegative, -1 otherwise.
pub fn align_signs(estimate: &Array2<f64>, truth: &Array2<f64>) -> Array1<f64> {
    assert_eq!(estimate.shape(), truth.shape(), "shapes must agree");
    let mut signs = Array1::zeros(estimate.ncols());
    for k in 0..estimate.ncols() {
        let dot = estimate.column(k).dot(&truth.column(k));
        signs[k] = if dot >= 0.0 { 1.0 } else { -1.0 };
    }
    signs
}

/// Excess kurtosis-free fourth-moment ratio per column (3 for a Gaussian).
pub fn column_kurtosis(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows() as f64;
    m.columns()
        .into_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let m2 = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let m4 = c.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
            m4 / (m2 * m2)
        })
        .collect()
}

/// Declarative scenario for the simulation command and the acceptance suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n: usize,
    pub seed: u64,
    pub iterations: usize,
    pub oracle_mc: usize,
    pub high: Vec<ScenarioHigh>,
    #[serde(default)]
    pub low: Vec<ScenarioLow>,
    pub mu: Prior,
    pub nu: Vec<Prior>,
    #[serde(default)]
    pub gmm_components: GmmComponents,
    #[serde(default)]
    pub prior_class: PriorClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioHigh {
    pub id: String,
    pub p: usize,
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioLow {
    pub id: String,
    pub loading: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageSpec {
    pub queries: usize,
    pub alpha: f64,
    /// Observed fraction of features in the queried modality.
    pub lambda: f64,
    /// Id of the (high-dimensional) modality the queries observe.
    pub modality: String,
    pub samples: usize,
}

/// One entry of the empirical-vs-oracle comparison report.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub t: usize,
    pub modality: String,
    pub metric: &'static str,
    pub row: usize,
    pub col: usize,
    pub empirical: f64,
    pub oracle: f64,
}

pub struct ScenarioOutput {
    pub dataset: MultimodalDataset,
    pub truth: GroundTruth,
    pub fit: FitOutput,
    pub oracle: OracleSe,
    pub comparison: Vec<ComparisonRow>,
    /// Per (high modality, t) empirical subject-space MSE.
    pub mse_subject: Vec<Vec<f64>>,
    /// Per (low modality, t) empirical subject-space MSE.
    pub mse_low: Vec<Vec<f64>>,
}

impl ScenarioSpec {
    pub fn generator(&self) -> Result<GeneratorSpec> {
        let high = self
            .high
            .iter()
            .map(|h| (h.id.clone(), h.p, Array1::from_vec(h.d.clone())))
            .collect();
        let low = self
            .low
            .iter()
            .map(|l| {
                let rows: Vec<Vec<f64>> = l.loading.clone();
                crate::prior::from_nested(&rows, "scenario loading").map(|m| (l.id.clone(), m))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GeneratorSpec {
            n: self.n,
            high,
            low,
            mu: self.mu.clone(),
            nu: self.nu.clone(),
            noise_scale: 1.0,
            seed: derive_seed(self.seed, "generate"),
        })
    }
}

/// Generate, fit, compute the oracle, and assemble the comparison report.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioOutput> {
    let (dataset, truth) = generate_dataset(&spec.generator()?)?;

    let ranks: Vec<RankSpec> =
        spec.high.iter().map(|h| RankSpec::Fixed(h.d.len())).collect();
    let params = FitParams {
        ranks,
        iterations: spec.iterations,
        gmm: spec.gmm_components.clone(),
        prior_class: spec.prior_class,
        rank_tol: 0.02,
        seed: spec.seed,
    };
    let mut mse_subject: Vec<Vec<f64>> = vec![Vec::new(); spec.high.len()];
    let mut mse_low: Vec<Vec<f64>> = vec![Vec::new(); spec.low.len()];
    let fit = amp::run_with_trace(&dataset, &params, |state| {
        for h in 0..state.high.len() {
            mse_subject[h].push(empirical_mse(&state.high[h].u_bar, &truth.u[h]));
        }
        for l in 0..state.low_u.len() {
            mse_low[l].push(empirical_mse(&state.low_u[l], &truth.u_tilde[l]));
        }
    })?;

    let gammas: Vec<f64> =
        spec.high.iter().map(|h| h.p as f64 / spec.n as f64).collect();
    let oracle = oracle_state_evolution(&OracleParams {
        mu: &truth.mu,
        nu: &truth.nu,
        d: &truth.d,
        l: &truth.l,
        gamma: &gammas,
        iterations: spec.iterations,
        mc: spec.oracle_mc,
        seed: derive_seed(spec.seed, "oracle"),
    })?;

    let mut comparison = Vec::new();
    for t in 0..=spec.iterations {
        let limits = mse_oracles(&oracle, &gammas, t)?;
        for (h, sh) in spec.high.iter().enumerate() {
            let emp = &fit.record.sigma_l[h][t];
            let orc = &oracle.sigma_l[h][t];
            for i in 0..emp.nrows() {
                for j in 0..emp.ncols() {
                    comparison.push(ComparisonRow {
                        t,
                        modality: sh.id.clone(),
                        metric: "sigma_l",
                        row: i,
                        col: j,
                        empirical: emp[[i, j]],
                        oracle: orc[[i, j]],
                    });
                }
            }
            comparison.push(ComparisonRow {
                t,
                modality: sh.id.clone(),
                metric: "mse_subject",
                row: 0,
                col: 0,
                empirical: mse_subject[h][t],
                oracle: limits.subject[h],
            });
        }
        for (l, sl) in spec.low.iter().enumerate() {
            comparison.push(ComparisonRow {
                t,
                modality: sl.id.clone(),
                metric: "mse_low",
                row: 0,
                col: 0,
                empirical: mse_low[l][t],
                oracle: limits.low[l],
            });
        }
    }

    Ok(ScenarioOutput { dataset, truth, fit, oracle, comparison, mse_subject, mse_low })
}

/// One coverage trial.
#[derive(Debug, Clone)]
pub struct CoverageRow {
    pub query: usize,
    pub radius: f64,
    pub distance: f64,
    pub covered: bool,
}

/// Draw queries from the generating model, predict, and record whether the
/// true latent vector landed inside each ball.
///
/// Fitted coordinates carry an arbitrary sign per column (fixed by the
/// largest-entry convention, not by the unobservable truth), so the true
/// latent is flipped into the fitted orientation before the membership test.
pub fn run_coverage(
    out: &ScenarioOutput,
    cov: &CoverageSpec,
    seed: u64,
) -> Result<Vec<CoverageRow>> {
    let bundle = &out.fit.bundle;
    let h_idx = bundle
        .find_high(&cov.modality)
        .ok_or_else(|| Error::Arg(format!("unknown coverage modality {:?}", cov.modality)))?;
    let p = bundle.high[h_idx].p;
    let keep = ((cov.lambda * p as f64).round() as usize).clamp(1, p);

    // per-coordinate orientation of the fitted latent space relative to truth
    let latent_dim = bundle.latent_dim();
    let mut orientation = Array1::<f64>::ones(latent_dim);
    for (h, hb) in bundle.high.iter().enumerate() {
        let signs = align_signs(&hb.v_bar, &out.truth.v[h]);
        let off = bundle.high_offset(h);
        for k in 0..signs.len() {
            orientation[off + k] = signs[k];
        }
    }

    let mut rows = Vec::with_capacity(cov.queries);
    for q in 0..cov.queries {
        // random feature subset of the requested fraction
        let mut rng = crate::rng::indexed(seed, "coverage-features", q);
        let mut idx: Vec<usize> = (0..p).collect();
        for i in 0..keep {
            let j = i + rng.random_range(0..p - i);
            idx.swap(i, j);
        }
        let mut features: Vec<usize> = idx[..keep].to_vec();
        features.sort_unstable();

        let observed = ObservedSpec { high: vec![(h_idx, features)], low: vec![] };
        let (mut query, latent) = generate_query(
            &out.truth,
            &observed,
            1.0,
            derive_seed(seed, &format!("coverage-query-{q}")),
        )?;
        query.high[0].modality = cov.modality.clone();
        let set = predict_set(
            bundle,
            &query,
            cov.alpha,
            cov.samples,
            derive_seed(seed, &format!("coverage-set-{q}")),
        )?;
        let mut d2 = 0.0;
        for (k, (a, b)) in latent.iter().zip(&set.center).enumerate() {
            let aligned = orientation[k] * a;
            d2 += (aligned - b) * (aligned - b);
        }
        let distance = d2.sqrt();
        rows.push(CoverageRow { query: q, radius: set.radius, distance, covered: distance <= set.radius });
    }
    Ok(rows)
}
