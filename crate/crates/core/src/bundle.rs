//! Fitted model persistence.
//!
//! A bundle directory holds `bundle.json` with every small quantity inline
//! (nested arrays) and one sibling binary file per fitted loading matrix,
//! referenced by relative path.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::matrix::{load_matrix, save_matrix, MatrixFormat};
use crate::preprocess::PreprocessStep;
use crate::prior::{from_nested, Prior};

pub const FORMAT_VERSION: u32 = 1;
pub const BUNDLE_FILE: &str = "bundle.json";

/// Fitted state for one high-dimensional modality.
#[derive(Debug, Clone, PartialEq)]
pub struct HighBundle {
    pub id: String,
    pub rank: usize,
    pub gamma: f64,
    pub p: usize,
    pub d_hat: Array1<f64>,
    /// Final-iteration channel scale `(1/N) V_bar^T V_bar` (symmetric PD).
    pub sigma_l: Array2<f64>,
    pub s_l: Array2<f64>,
    /// Final loading estimate, p x rank.
    pub v_bar: Array2<f64>,
    pub preprocess: Vec<PreprocessStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowBundle {
    pub id: String,
    pub r_tilde: usize,
    pub l_hat: Array2<f64>,
    pub preprocess: Vec<PreprocessStep>,
}

/// Everything query-time prediction needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub n: usize,
    pub iterations: usize,
    pub seed: u64,
    pub high: Vec<HighBundle>,
    pub low: Vec<LowBundle>,
    /// Joint prior over the concatenated latent coordinates.
    pub mu: Prior,
    /// Per high-dimensional modality loading prior.
    pub nu: Vec<Prior>,
}

impl ModelBundle {
    /// Total latent dimension r + r_tilde.
    pub fn latent_dim(&self) -> usize {
        self.high.iter().map(|h| h.rank).sum::<usize>()
            + self.low.iter().map(|l| l.r_tilde).sum::<usize>()
    }

    /// Latent coordinate offset of high-dimensional modality `index`.
    pub fn high_offset(&self, index: usize) -> usize {
        self.high[..index].iter().map(|h| h.rank).sum()
    }

    /// Latent coordinate offset of low-dimensional modality `index`.
    pub fn low_offset(&self, index: usize) -> usize {
        let r: usize = self.high.iter().map(|h| h.rank).sum();
        r + self.low[..index].iter().map(|l| l.r_tilde).sum::<usize>()
    }

    pub fn find_high(&self, id: &str) -> Option<usize> {
        self.high.iter().position(|h| h.id == id)
    }

    pub fn find_low(&self, id: &str) -> Option<usize> {
        self.low.iter().position(|l| l.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Schema("subject count must be positive".into()));
        }
        let latent = self.latent_dim();
        if self.mu.dim() != latent {
            return Err(Error::Schema(format!(
                "joint prior has dimension {}, expected {latent}",
                self.mu.dim()
            )));
        }
        if self.nu.len() != self.high.len() {
            return Err(Error::Schema("one loading prior per high-dimensional modality".into()));
        }
        for (h, nu) in self.high.iter().zip(&self.nu) {
            let r = h.rank;
            if r == 0 || h.d_hat.len() != r {
                return Err(Error::Schema(format!("modality {:?}: rank/d_hat mismatch", h.id)));
            }
            if nu.dim() != r {
                return Err(Error::Schema(format!(
                    "modality {:?}: loading prior dimension mismatch",
                    h.id
                )));
            }
            if h.v_bar.nrows() != h.p || h.v_bar.ncols() != r {
                return Err(Error::Schema(format!(
                    "modality {:?}: loading matrix is {}x{}, expected {}x{r}",
                    h.id,
                    h.v_bar.nrows(),
                    h.v_bar.ncols(),
                    h.p
                )));
            }
            for (name, mat) in [("sigma_l", &h.sigma_l), ("s_l", &h.s_l)] {
                if mat.nrows() != r || mat.ncols() != r {
                    return Err(Error::Schema(format!(
                        "modality {:?}: {name} must be {r}x{r}",
                        h.id
                    )));
                }
            }
            let scale = h.sigma_l.diag().sum().abs().max(1e-300);
            if linalg::max_asymmetry(&h.sigma_l) > 1e-10 * scale {
                return Err(Error::Schema(format!(
                    "modality {:?}: sigma_l is not symmetric",
                    h.id
                )));
            }
            if linalg::min_eigenvalue(&h.sigma_l)? <= 0.0 {
                return Err(Error::Schema(format!(
                    "modality {:?}: sigma_l is not positive definite",
                    h.id
                )));
            }
            if h.gamma <= 0.0 {
                return Err(Error::Schema(format!("modality {:?}: gamma must be positive", h.id)));
            }
        }
        for l in &self.low {
            if l.r_tilde == 0 || l.l_hat.nrows() != l.r_tilde || l.l_hat.ncols() != l.r_tilde {
                return Err(Error::Schema(format!("modality {:?}: loading shape mismatch", l.id)));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct HighDoc {
    id: String,
    rank: usize,
    gamma: f64,
    p: usize,
    d_hat: Vec<f64>,
    sigma_l: Vec<Vec<f64>>,
    s_l: Vec<Vec<f64>>,
    v_bar_file: String,
    preprocess: Vec<PreprocessStep>,
}

#[derive(Serialize, Deserialize)]
struct LowDoc {
    id: String,
    r_tilde: usize,
    l_hat: Vec<Vec<f64>>,
    preprocess: Vec<PreprocessStep>,
}

#[derive(Serialize, Deserialize)]
struct BundleDoc {
    format_version: u32,
    n: usize,
    iterations: usize,
    seed: u64,
    high: Vec<HighDoc>,
    low: Vec<LowDoc>,
    mu: Prior,
    nu: Vec<Prior>,
}

fn nested(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Write `bundle.json` plus one binary loading file per high-dimensional
/// modality into `dir` (created if missing).
pub fn save_model(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir)?;
    let mut high_docs = Vec::with_capacity(bundle.high.len());
    for h in &bundle.high {
        let file = format!("v_bar_{}.bin", h.id);
        save_matrix(&h.v_bar, &dir.join(&file), MatrixFormat::Binary)?;
        high_docs.push(HighDoc {
            id: h.id.clone(),
            rank: h.rank,
            gamma: h.gamma,
            p: h.p,
            d_hat: h.d_hat.to_vec(),
            sigma_l: nested(&h.sigma_l),
            s_l: nested(&h.s_l),
            v_bar_file: file,
            preprocess: h.preprocess.clone(),
        });
    }
    let doc = BundleDoc {
        format_version: FORMAT_VERSION,
        n: bundle.n,
        iterations: bundle.iterations,
        seed: bundle.seed,
        high: high_docs,
        low: bundle
            .low
            .iter()
            .map(|l| LowDoc {
                id: l.id.clone(),
                r_tilde: l.r_tilde,
                l_hat: nested(&l.l_hat),
                preprocess: l.preprocess.clone(),
            })
            .collect(),
        mu: bundle.mu.clone(),
        nu: bundle.nu.clone(),
    };
    fs::write(dir.join(BUNDLE_FILE), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// Load a bundle from its directory (or directly from a `bundle.json` path).
pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let (json_path, dir) = if path.is_dir() {
        (path.join(BUNDLE_FILE), path.to_path_buf())
    } else {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        (path.to_path_buf(), dir)
    };
    let text = fs::read_to_string(&json_path)?;
    // check the version before strict field decoding so old files fail clearly
    let probe: serde_json::Value = serde_json::from_str(&text)?;
    match probe.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                found: v.to_string(),
                supported: FORMAT_VERSION.to_string(),
            })
        }
        None => return Err(Error::Schema("missing format_version".into())),
    }
    let doc: BundleDoc = serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;

    let mut high = Vec::with_capacity(doc.high.len());
    for h in doc.high {
        let v_bar = load_matrix(&dir.join(&h.v_bar_file))?;
        high.push(HighBundle {
            id: h.id,
            rank: h.rank,
            gamma: h.gamma,
            p: h.p,
            d_hat: Array1::from_vec(h.d_hat),
            sigma_l: from_nested(&h.sigma_l, "sigma_l")?,
            s_l: from_nested(&h.s_l, "s_l")?,
            v_bar,
            preprocess: h.preprocess,
        });
    }
    let mut low = Vec::with_capacity(doc.low.len());
    for l in doc.low {
        low.push(LowBundle {
            id: l.id,
            r_tilde: l.r_tilde,
            l_hat: from_nested(&l.l_hat, "l_hat")?,
            preprocess: l.preprocess,
        });
    }
    let bundle = ModelBundle {
        n: doc.n,
        iterations: doc.iterations,
        seed: doc.seed,
        high,
        low,
        mu: doc.mu,
        nu: doc.nu,
    };
    bundle.validate()?;
    Ok(bundle)
}
