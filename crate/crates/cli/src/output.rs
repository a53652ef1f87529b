//! CSV writers for embeddings, state-evolution records, and reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use orchamp_core::amp::StateEvolutionRecord;
use orchamp_core::synthetic::{ComparisonRow, CoverageRow, OracleSe};
use orchamp_core::{Error, Result};

pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    orchamp_core::matrix::save_matrix(m, path, orchamp_core::matrix::MatrixFormat::Csv)
}

fn open(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(Error::Io)?))
}

/// Long-format channel scales: one row per (t, modality, kind, entry).
pub fn write_se_record(path: &Path, record: &StateEvolutionRecord, ids: &[&str]) -> Result<()> {
    let mut w = open(path)?;
    writeln!(w, "t,modality,kind,i,j,value")?;
    let kinds: [(&str, &Vec<Vec<Array2<f64>>>); 4] = [
        ("sigma_l", &record.sigma_l),
        ("s_l", &record.s_l),
        ("sigma_r", &record.sigma_r),
        ("s_r", &record.s_r),
    ];
    for (kind, series) in kinds {
        for (h, per_t) in series.iter().enumerate() {
            for (t, mat) in per_t.iter().enumerate() {
                for i in 0..mat.nrows() {
                    for j in 0..mat.ncols() {
                        writeln!(w, "{t},{},{kind},{i},{j},{:.16e}", ids[h], mat[[i, j]])?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_oracle_se(
    path: &Path,
    se: &OracleSe,
    high_ids: &[&str],
    low_ids: &[&str],
) -> Result<()> {
    let mut w = open(path)?;
    writeln!(w, "t,modality,kind,i,j,value")?;
    let kinds: [(&str, &Vec<Vec<Array2<f64>>>); 6] = [
        ("sigma_l", &se.sigma_l),
        ("s_l", &se.s_l),
        ("sigma_r", &se.sigma_r),
        ("s_r", &se.s_r),
        ("gamma_l", &se.gamma_l),
        ("gamma_r", &se.gamma_r),
    ];
    for (kind, series) in kinds {
        for (h, per_t) in series.iter().enumerate() {
            for (t, mat) in per_t.iter().enumerate() {
                for i in 0..mat.nrows() {
                    for j in 0..mat.ncols() {
                        writeln!(w, "{t},{},{kind},{i},{j},{:.16e}", high_ids[h], mat[[i, j]])?;
                    }
                }
            }
        }
    }
    for (l, per_t) in se.sigma_tilde.iter().enumerate() {
        for (t, mat) in per_t.iter().enumerate() {
            for i in 0..mat.nrows() {
                for j in 0..mat.ncols() {
                    writeln!(w, "{t},{},sigma_tilde,{i},{j},{:.16e}", low_ids[l], mat[[i, j]])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = open(path)?;
    writeln!(w, "t,modality,metric,i,j,empirical,oracle")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{:.16e},{:.16e}",
            r.t, r.modality, r.metric, r.row, r.col, r.empirical, r.oracle
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_coverage(path: &Path, rows: &[CoverageRow]) -> Result<()> {
    let mut w = open(path)?;
    writeln!(w, "query,covered,radius,distance")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.16e},{:.16e}",
            r.query,
            if r.covered { 1 } else { 0 },
            r.radius,
            r.distance
        )?;
    }
    w.flush()?;
    Ok(())
}
