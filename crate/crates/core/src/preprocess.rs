//! Column-wise preprocessing applied before the rank-r decomposition.

use ndarray::{Array2, Axis};
use ndarray_linalg::{JobSvd, SVDDC};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One preprocessing step. Steps apply in the order given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreprocessStep {
    /// x -> ln(1 + x), entrywise. Requires nonnegative entries.
    Log1p,
    /// Subtract each column mean.
    Center,
    /// Divide the whole matrix by the residual noise scale
    /// `sigma = ||X - X_r||_F / sqrt(N p)` after removing the best rank-r part.
    ScaleToUnitNoise { rank: usize },
}

pub fn preprocess(x: &Array2<f64>, steps: &[PreprocessStep]) -> Result<Array2<f64>> {
    let mut m = x.clone();
    for step in steps {
        apply_step(&mut m, step)?;
    }
    Ok(m)
}

fn apply_step(m: &mut Array2<f64>, step: &PreprocessStep) -> Result<()> {
    match step {
        PreprocessStep::Log1p => {
            if let Some(v) = m.iter().find(|v| **v < 0.0) {
                return Err(Error::Domain(format!("log1p requires entries >= 0, found {v}")));
            }
            m.mapv_inplace(f64::ln_1p);
        }
        PreprocessStep::Center => {
            let means = m.mean_axis(Axis(0)).expect("non-empty matrix");
            for mut row in m.rows_mut() {
                row -= &means;
            }
        }
        PreprocessStep::ScaleToUnitNoise { rank } => {
            let r = *rank;
            let min_dim = m.nrows().min(m.ncols());
            if r == 0 || r >= min_dim {
                return Err(Error::Arg(format!(
                    "scale-to-unit-noise rank {r} must be in 1..{min_dim}"
                )));
            }
            let total: f64 = m.iter().map(|v| v * v).sum();
            let sv = m
                .svddc(JobSvd::None)
                .map_err(|e| Error::Linalg(format!("svd failed: {e}")))?
                .1;
            let kept: f64 = sv.iter().take(r).map(|s| s * s).sum();
            let residual = (total - kept).max(0.0);
            let sigma = (residual / (m.nrows() as f64 * m.ncols() as f64)).sqrt();
            if sigma <= 0.0 {
                return Err(Error::Domain(
                    "scale-to-unit-noise: residual after rank-r truncation is zero".into(),
                ));
            }
            m.mapv_inplace(|v| v / sigma);
        }
    }
    Ok(())
}
