//! Command-line front end: rank selection, model fitting, query prediction
//! sets, and the synthetic verification harness.
//!
//! Exit codes: 0 success, 2 usage, 3 data/format errors, 4 numerical errors.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use orchamp_core::amp::{self, FitParams, Modality, MultimodalDataset};
use orchamp_core::bundle::{load_model, save_model};
use orchamp_core::config::{ModalityKind, RankSpec, RunConfig};
use orchamp_core::matrix::load_matrix;
use orchamp_core::predict::{predict_set, query_samples, Query};
use orchamp_core::preprocess::preprocess;
use orchamp_core::spectral::estimate_rank;
use orchamp_core::synthetic::{run_coverage, run_scenario, ScenarioSpec};
use orchamp_core::Error;

#[derive(Parser)]
#[command(name = "orchamp", version, about = "Multimodal factor integration and query prediction sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the signal rank of one matrix against the noise bulk edge.
    Rank {
        /// Matrix file (CSV or binary).
        #[arg(long)]
        input: PathBuf,
        /// Take the aspect ratio gamma = p/N from the matrix shape.
        #[arg(long, default_value_t = true)]
        gamma_from_shape: bool,
        /// Relative margin above the bulk edge.
        #[arg(long, default_value_t = 0.02)]
        tol: f64,
    },
    /// Fit the full pipeline from a run configuration.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a partially observed subject against a fitted model.
    Query {
        /// Model directory written by `fit`.
        #[arg(long)]
        model: PathBuf,
        /// Query JSON ({"high": [{"modality", "features", "values"}], "low": [...]}).
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON path (default: query_result.json next to the query).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write this many posterior samples as CSV.
        #[arg(long)]
        samples_out: Option<PathBuf>,
    },
    /// Generate synthetic data, fit, and compare against the oracle track.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Parse { .. }
        | Error::EmptyInput(_)
        | Error::Domain(_)
        | Error::Schema(_)
        | Error::Version { .. }
        | Error::Arg(_)
        | Error::Io(_)
        | Error::Json(_) => 3,
        Error::Rank(_)
        | Error::Subcritical { .. }
        | Error::Singular(_)
        | Error::Fit(_)
        | Error::Divergence { .. }
        | Error::Linalg(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Rank { input, gamma_from_shape, tol } => cmd_rank(&input, gamma_from_shape, tol),
        Command::Fit { config, out } => cmd_fit(&config, &out),
        Command::Query { model, query, alpha, samples, seed, out, samples_out } => {
            cmd_query(&model, &query, alpha, samples, seed, out.as_deref(), samples_out.as_deref())
        }
        Command::Simulate { scenario, out } => cmd_simulate(&scenario, &out),
    }
}

fn cmd_rank(input: &Path, _gamma_from_shape: bool, tol: f64) -> Result<(), Error> {
    let x = load_matrix(input)?;
    let n = x.nrows() as f64;
    let xbar = x / n.sqrt();
    let rank = estimate_rank(&xbar, tol)?;
    println!("{rank}");
    Ok(())
}

fn cmd_fit(config_path: &Path, out: &Path) -> Result<(), Error> {
    let config = RunConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));

    let mut high = Vec::new();
    let mut low = Vec::new();
    let mut ranks = Vec::new();
    for spec in &config.modalities {
        let path = if spec.path.is_absolute() { spec.path.clone() } else { base.join(&spec.path) };
        let raw = load_matrix(&path)?;
        let x = preprocess(&raw, &spec.preprocess)?;
        let modality =
            Modality { id: spec.id.clone(), x, preprocess: spec.preprocess.clone() };
        match spec.kind {
            ModalityKind::High => {
                ranks.push(spec.rank.unwrap_or(RankSpec::AUTO));
                high.push(modality);
            }
            ModalityKind::Low => low.push(modality),
        }
    }
    let dataset = MultimodalDataset { high, low };
    let params = FitParams {
        ranks,
        iterations: config.iterations,
        gmm: config.gmm_components.clone(),
        prior_class: config.prior_class,
        rank_tol: 0.02,
        seed: config.seed,
    };
    let fit = amp::run(&dataset, &params)?;
    for nui in &fit.nuisance.high {
        if nui.degenerate {
            eprintln!("warning: nearly repeated singular values; components may mix");
        }
    }

    std::fs::create_dir_all(out)?;
    save_model(&fit.bundle, out)?;
    for (h, m) in dataset.high.iter().enumerate() {
        output::write_matrix_csv(&out.join(format!("embeddings_{}.csv", m.id)), &fit.state.high[h].u_bar)?;
    }
    for (l, m) in dataset.low.iter().enumerate() {
        output::write_matrix_csv(&out.join(format!("embeddings_{}.csv", m.id)), &fit.state.low_u[l])?;
    }
    let ids: Vec<&str> = dataset.high.iter().map(|m| m.id.as_str()).collect();
    output::write_se_record(&out.join("se_record.csv"), &fit.record, &ids)?;
    println!("fit complete: {} subjects, {} modalities", fit.bundle.n, config.modalities.len());
    Ok(())
}

fn cmd_query(
    model: &Path,
    query_path: &Path,
    alpha: f64,
    samples: usize,
    seed: u64,
    out: Option<&Path>,
    samples_out: Option<&Path>,
) -> Result<(), Error> {
    let bundle = load_model(model)?;
    let text = std::fs::read_to_string(query_path)?;
    let query: Query =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("query JSON: {e}")))?;
    let set = predict_set(&bundle, &query, alpha, samples, seed)?;
    let result_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| query_path.with_file_name("query_result.json"));
    std::fs::write(&result_path, serde_json::to_string_pretty(&set)?)?;
    if let Some(path) = samples_out {
        let draws = query_samples(&bundle, &query, samples, seed)?;
        output::write_matrix_csv(path, &draws)?;
    }
    println!("center dimension {}, radius {:.6}", set.center.len(), set.radius);
    Ok(())
}

fn cmd_simulate(scenario_path: &Path, out: &Path) -> Result<(), Error> {
    let text = std::fs::read_to_string(scenario_path)?;
    let spec: ScenarioSpec =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("scenario JSON: {e}")))?;
    let result = run_scenario(&spec)?;
    std::fs::create_dir_all(out)?;

    for m in result.dataset.high.iter().chain(&result.dataset.low) {
        output::write_matrix_csv(&out.join(format!("dataset_{}.csv", m.id)), &m.x)?;
    }
    for (h, m) in result.dataset.high.iter().enumerate() {
        output::write_matrix_csv(&out.join(format!("truth_u_{}.csv", m.id)), &result.truth.u[h])?;
        output::write_matrix_csv(&out.join(format!("truth_v_{}.csv", m.id)), &result.truth.v[h])?;
    }
    for (l, m) in result.dataset.low.iter().enumerate() {
        output::write_matrix_csv(
            &out.join(format!("truth_u_{}.csv", m.id)),
            &result.truth.u_tilde[l],
        )?;
    }
    let high_ids: Vec<&str> = result.dataset.high.iter().map(|m| m.id.as_str()).collect();
    let low_ids: Vec<&str> = result.dataset.low.iter().map(|m| m.id.as_str()).collect();
    output::write_oracle_se(&out.join("oracle_se.csv"), &result.oracle, &high_ids, &low_ids)?;
    output::write_comparison(&out.join("se_report.csv"), &result.comparison)?;

    if let Some(cov) = &spec.coverage {
        let rows = run_coverage(&result, cov, spec.seed)?;
        output::write_coverage(&out.join("coverage_report.csv"), &rows)?;
        let hits = rows.iter().filter(|r| r.covered).count();
        println!("coverage {:.4}", hits as f64 / rows.len() as f64);
    }
    println!("simulation complete: {} comparison rows", result.comparison.len());
    Ok(())
}
