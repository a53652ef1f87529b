//! Spectral initialization: rank selection against the noise bulk edge,
//! the scaled truncated SVD, and consistent nuisance-parameter estimates
//! (signal strengths, channel scale matrices, low-dimensional loadings).

use ndarray::{Array1, Array2, Axis};
use ndarray_linalg::{JobSvd, SVDDC};

use crate::error::{Error, Result};
use crate::linalg;

/// Scaled top-r decomposition of a rescaled data matrix.
///
/// `u_pc` has squared column norms N (`(1/N) u_pc^T u_pc = I`), `v_pc` has
/// squared column norms p. `d0` is the diagonal from
/// `(1/N) u_pc diag(d0) v_pc^T = best rank-r approximation`, i.e. the top
/// singular values divided by sqrt(gamma).
#[derive(Debug, Clone)]
pub struct SpectralInit {
    pub u_pc: Array2<f64>,
    pub v_pc: Array2<f64>,
    pub d0: Array1<f64>,
    pub gamma: f64,
    /// Set when nearly repeated singular values were detected among the top
    /// r+1 (relative gap below 1e-10); downstream denoising still runs.
    pub degenerate: bool,
}

/// Channel scale estimates for one high-dimensional modality at the
/// spectral initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParams {
    pub s_l: Array1<f64>,
    pub sigma_l: Array1<f64>,
    pub s_r: Array1<f64>,
    pub sigma_r: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct HighNuisance {
    pub d_hat: Array1<f64>,
    pub scale: ScaleParams,
    pub degenerate: bool,
}

/// Everything needed to start the message-passing loop.
#[derive(Debug, Clone)]
pub struct NuisanceEstimates {
    pub high: Vec<HighNuisance>,
    /// Symmetric PSD loading estimate per low-dimensional modality.
    pub low: Vec<Array2<f64>>,
}

/// Count singular values of the rescaled matrix above the noise bulk edge
/// `(1 + sqrt(gamma)) (1 + tol)`, with `gamma = p/N`.
pub fn estimate_rank(xbar: &Array2<f64>, tol: f64) -> Result<usize> {
    let (n, p) = (xbar.nrows(), xbar.ncols());
    if n < 2 || p < 2 {
        return Err(Error::Arg(format!("estimate_rank needs N, p >= 2, got {n}x{p}")));
    }
    if tol < 0.0 {
        return Err(Error::Arg(format!("estimate_rank tolerance must be >= 0, got {tol}")));
    }
    let gamma = p as f64 / n as f64;
    let edge = (1.0 + gamma.sqrt()) * (1.0 + tol);
    let sv = xbar
        .svddc(JobSvd::None)
        .map_err(|e| Error::Linalg(format!("svd failed: {e}")))?
        .1;
    Ok(sv.iter().take_while(|s| **s > edge).count())
}

/// Top-r decomposition with the scaling convention above and column signs
/// fixed so the largest-magnitude entry of each left column is positive.
pub fn truncated_svd(xbar: &Array2<f64>, r: usize) -> Result<SpectralInit> {
    let (n, p) = (xbar.nrows(), xbar.ncols());
    let min_dim = n.min(p);
    if r < 1 || r > min_dim {
        return Err(Error::Rank(format!("rank {r} out of range 1..={min_dim}")));
    }
    let gamma = p as f64 / n as f64;
    let (u, sv, vt) = xbar
        .svddc(JobSvd::Some)
        .map_err(|e| Error::Linalg(format!("svd failed: {e}")))?;
    let u = u.ok_or_else(|| Error::Linalg("svd returned no left vectors".into()))?;
    let vt = vt.ok_or_else(|| Error::Linalg("svd returned no right vectors".into()))?;

    let mut u_pc = u.slice(ndarray::s![.., ..r]).to_owned() * (n as f64).sqrt();
    let mut v_pc = vt.slice(ndarray::s![..r, ..]).t().to_owned() * (p as f64).sqrt();
    let d0 = sv.slice(ndarray::s![..r]).mapv(|s| s / gamma.sqrt());

    for k in 0..r {
        let col = u_pc.index_axis(Axis(1), k);
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            u_pc.index_axis_mut(Axis(1), k).mapv_inplace(|v| -v);
            v_pc.index_axis_mut(Axis(1), k).mapv_inplace(|v| -v);
        }
    }

    let mut degenerate = false;
    let upto = (r + 1).min(min_dim);
    for k in 1..upto {
        let hi = sv[k - 1];
        let lo = sv[k];
        if hi <= 0.0 || (hi - lo) / hi.max(f64::MIN_POSITIVE) < 1e-10 {
            degenerate = true;
        }
    }

    Ok(SpectralInit { u_pc, v_pc, d0, gamma, degenerate })
}

/// Invert the spike-forward map to recover signal strengths from the scaled
/// top singular values.
///
/// For each k, `d_hat^2 = (g - (1+gamma) + sqrt((g - (1+gamma))^2 - 4 gamma))
/// / (2 gamma)` with `g = gamma d0_k^2`; a negative discriminant means the
/// component sits below the detection edge.
pub fn estimate_signal_strengths(d0: &Array1<f64>, gamma: f64) -> Result<Array1<f64>> {
    if gamma <= 0.0 {
        return Err(Error::Arg(format!("gamma must be positive, got {gamma}")));
    }
    let mut d_hat = Array1::<f64>::zeros(d0.len());
    for (k, &v) in d0.iter().enumerate() {
        let x = gamma * v * v - (1.0 + gamma);
        let disc = x * x - 4.0 * gamma;
        if disc < 0.0 || x <= 0.0 {
            return Err(Error::Subcritical { index: k });
        }
        d_hat[k] = ((x + disc.sqrt()) / (2.0 * gamma)).sqrt();
    }
    Ok(d_hat)
}

/// Spectral-initialization channel scales. Per coordinate:
/// `sigma_L^2 = (1 + d^2) / (d^2 (gamma d^2 + 1))`,
/// `sigma_R^2 = (1 + gamma d^2) / (gamma d^2 (d^2 + 1))`,
/// `s = sqrt(1 - sigma^2)`.
pub fn init_scale_params(d_hat: &Array1<f64>, gamma: f64) -> Result<ScaleParams> {
    if gamma <= 0.0 {
        return Err(Error::Arg(format!("gamma must be positive, got {gamma}")));
    }
    let r = d_hat.len();
    let mut out = ScaleParams {
        s_l: Array1::zeros(r),
        sigma_l: Array1::zeros(r),
        s_r: Array1::zeros(r),
        sigma_r: Array1::zeros(r),
    };
    for (k, &d) in d_hat.iter().enumerate() {
        if d <= 0.0 {
            return Err(Error::Arg(format!("signal strength {k} must be positive, got {d}")));
        }
        let d2 = d * d;
        let sig_l2 = (1.0 + d2) / (d2 * (gamma * d2 + 1.0));
        let sig_r2 = (1.0 + gamma * d2) / (gamma * d2 * (d2 + 1.0));
        if sig_l2 >= 1.0 || sig_r2 >= 1.0 {
            return Err(Error::Subcritical { index: k });
        }
        out.sigma_l[k] = sig_l2;
        out.s_l[k] = (1.0 - sig_l2).sqrt();
        out.sigma_r[k] = sig_r2;
        out.s_r[k] = (1.0 - sig_r2).sqrt();
    }
    Ok(out)
}

/// Loading estimate for a low-dimensional modality: the symmetric square
/// root of `(1/N) X^T X - I` with eigenvalues clipped at `eps`.
pub fn estimate_low_dim_loading(x_low: &Array2<f64>, eps: f64) -> Result<Array2<f64>> {
    let (n, rt) = (x_low.nrows(), x_low.ncols());
    if n <= rt {
        return Err(Error::Arg(format!("low-dim loading needs N > r_tilde, got {n}x{rt}")));
    }
    if eps <= 0.0 {
        return Err(Error::Arg(format!("eps must be positive, got {eps}")));
    }
    let mut g = x_low.t().dot(x_low) / n as f64;
    for i in 0..rt {
        g[[i, i]] -= 1.0;
    }
    let l = linalg::sym_sqrt(&g, eps)?;
    Ok(linalg::symmetrize(&l))
}

/// Estimate all nuisance parameters for one high-dimensional modality.
pub fn estimate_high_nuisance(init: &SpectralInit) -> Result<HighNuisance> {
    let d_hat = estimate_signal_strengths(&init.d0, init.gamma)?;
    let scale = init_scale_params(&d_hat, init.gamma)?;
    let mut degenerate = init.degenerate;
    for k in 1..d_hat.len() {
        let hi = d_hat[k - 1];
        if (hi - d_hat[k]) / hi.max(f64::MIN_POSITIVE) < 1e-10 {
            degenerate = true;
        }
    }
    Ok(HighNuisance { d_hat, scale, degenerate })
}
