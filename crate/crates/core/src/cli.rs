//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{compute_epsilon, default_delta, delta_distributions, empirical_sensitivity, variability_sigma};
use crate::data::{generate_synthetic, write_csv};
use crate::error::{Error, Result};
use crate::harness::{make_reports, prepare, primary_mode, run_grid, GridConfig, GridOptions, Prepared, ResultStore};
use crate::model::{decode_weights, encode_weights};
use crate::privacy::{
    compare_utilities, sigma_augment, sigma_target, standard_noise, PrivacyParams, UtilityInputs, ASSUMPTION_NOTE,
};
use crate::rng::{derive_stream, TAG_NOISE};
use crate::stats::normality_sweep;
use crate::theory::{compare_bounds, monte_carlo_fixed_points, BoundInputs};

#[derive(Debug, Parser)]
#[command(
    name = "sgdlab",
    version,
    about = "Seeded SGD variability and intrinsic privacy experiments"
)]
pub struct Cli {
    /// Grid configuration file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long, global = true, env = "SGDLAB_OUT")]
    pub out: Option<PathBuf>,
    /// Seed for commands that draw randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for grid runs (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic two-class dataset as CSV.
    GenData(GenData),
    /// Train every (member, seed, init mode) of the grid into the store.
    RunGrid,
    /// Print sensitivity, variability and distance summaries for the store.
    Analyze,
    /// ε from a sensitivity, a variability and δ.
    EstimateEpsilon(EstimateEpsilon),
    /// Noise calibration, and optionally perturb a weight file.
    Privatize(Privatize),
    /// Accuracy of noiseless, SGD_d and SGD_r releases for the store's models.
    EvaluateUtility,
    /// Shapiro-Wilk sweep over weight coordinates.
    Normality(Normality),
    /// Closed-form variability bounds.
    TheoryBounds(TheoryBounds),
    /// Write every report for the store.
    Report,
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub d: usize,
    /// Distance between the class means along the first axis.
    #[arg(long, default_value_t = 2.0)]
    pub separation: f64,
    /// Output CSV path (default: <out>/data.csv).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateEpsilon {
    #[arg(long)]
    pub sensitivity: f64,
    #[arg(long)]
    pub sigma: f64,
    /// Failure probability; defaults to 1/N² when --n is given.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Privatize {
    #[arg(long)]
    pub epsilon: f64,
    #[arg(long)]
    pub delta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sensitivity: f64,
    /// Intrinsic variability subtracted from the target noise.
    #[arg(long, default_value_t = 0.0)]
    pub sigma_i: f64,
    /// Weight file to perturb.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Where to write the perturbed weights (default: <weights>.private.sgdw).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Normality {
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct TheoryBounds {
    /// Passes over the data.
    #[arg(long)]
    pub k: f64,
    /// Lipschitz constant.
    #[arg(long)]
    pub l: f64,
    #[arg(long)]
    pub eta: f64,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub b: usize,
    /// Monte Carlo trials for the fixed-point check (0 skips it).
    #[arg(long, default_value_t = 0)]
    pub trials: usize,
}

/// Parses `argv` (including the program name) and runs; returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

struct Loaded {
    cfg: GridConfig,
    prepared: Prepared,
    out: PathBuf,
}

fn load_grid(cli: &Cli) -> Result<Loaded> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = GridConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.report_seed = s;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out, set SGDLAB_OUT or output_dir".into()))?;
    let prepared = prepare(&cfg)?;
    Ok(Loaded { cfg, prepared, out })
}

fn open_existing(out: &Path) -> Result<ResultStore> {
    if !out.join("records.jsonl").exists() {
        return Err(Error::MissingRecord(format!("no store at {}", out.display())));
    }
    ResultStore::open(out)
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(g) => {
            let data = generate_synthetic(g.n, g.d, g.separation, cli.seed.unwrap_or(0))?;
            let path = match (&g.output, &cli.out) {
                (Some(p), _) => p.clone(),
                (None, Some(dir)) => {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    dir.join("data.csv")
                }
                (None, None) => return Err(Error::Config("pass --output or --out".into())),
            };
            write_csv(&data, &path)?;
            println!("wrote {} rows to {}", data.n(), path.display());
        }
        Command::RunGrid => {
            let l = load_grid(cli)?;
            let mut store = ResultStore::open(&l.out)?;
            let outcome = run_grid(
                &l.cfg,
                &l.prepared,
                &mut store,
                GridOptions {
                    jobs: cli.jobs,
                    ..Default::default()
                },
            )?;
            print_json(&outcome);
        }
        Command::Analyze => {
            let l = load_grid(cli)?;
            let records = open_existing(&l.out)?.to_vec();
            let ids = l.prepared.member_ids();
            let mode = primary_mode(&records);
            let sens = empirical_sensitivity(&records, &ids, mode)?
                .with_theoretical(l.prepared.theoretical_sensitivity(&l.cfg));
            let var = variability_sigma(&records, &ids, mode)?;
            let deltas = delta_distributions(&records, &ids)?;
            let summary: std::collections::BTreeMap<&str, _> = deltas
                .summaries
                .iter()
                .map(|(k, s)| {
                    (
                        k.as_str(),
                        serde_json::json!({"count": s.count, "min": s.min, "median": s.median, "max": s.max}),
                    )
                })
                .collect();
            print_json(&serde_json::json!({
                "init_mode": mode,
                "sensitivity_theoretical": sens.theoretical,
                "sensitivity_empirical": sens.empirical,
                "sigma_i": var.sigma_i,
                "sigmas": var.per_dataset,
                "deltas": summary,
            }));
        }
        Command::EstimateEpsilon(e) => {
            let delta = match (e.delta, e.n) {
                (Some(d), _) => d,
                (None, Some(n)) => default_delta(n),
                (None, None) => return Err(Error::invalid("pass --delta or --n")),
            };
            let eps = compute_epsilon(e.sensitivity, e.sigma, delta)?;
            print_json(&serde_json::json!({"delta": delta, "epsilon": eps}));
        }
        Command::Privatize(p) => {
            let params = PrivacyParams {
                epsilon: p.epsilon,
                delta: p.delta,
                sensitivity: p.sensitivity,
            };
            let decision = sigma_augment(sigma_target(&params)?, p.sigma_i);
            if let Some(path) = &p.weights {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let mut w = decode_weights(&bytes)?;
                let z = standard_noise(w.len(), &mut derive_stream(cli.seed.unwrap_or(0), TAG_NOISE));
                for (v, zi) in w.iter_mut().zip(&z) {
                    *v += decision.sigma_augment * zi;
                }
                let out = p.output.clone().unwrap_or_else(|| path.with_extension("private.sgdw"));
                std::fs::write(&out, encode_weights(&w)).map_err(|e| Error::io(&out, e))?;
                eprintln!("wrote {}", out.display());
            }
            print_json(&serde_json::json!({"noise": decision, "assumption": ASSUMPTION_NOTE}));
        }
        Command::EvaluateUtility => {
            let l = load_grid(cli)?;
            let records = open_existing(&l.out)?.to_vec();
            let ids = l.prepared.member_ids();
            let mode = primary_mode(&records);
            let sens = empirical_sensitivity(&records, &ids, mode)?;
            let var = variability_sigma(&records, &ids, mode)?;
            let mut models: Vec<_> = records
                .iter()
                .filter(|r| r.key.init_mode == mode)
                .map(|r| (r.key.to_string(), r.final_weights.clone()))
                .collect();
            models.sort_by(|a, b| a.0.cmp(&b.0));
            let table = compare_utilities(&UtilityInputs {
                spec: l.prepared.spec,
                models: &models,
                test: &l.prepared.test,
                sensitivity: sens.empirical,
                sigma_i: var.sigma_i,
                delta: l.prepared.delta(&l.cfg),
                epsilons: &l.cfg.epsilons,
                noise_seed: l.cfg.report_seed,
                significance: l.cfg.significance,
            })?;
            let path = l.out.join("utility_empirical.csv");
            std::fs::write(&path, table.to_csv()).map_err(|e| Error::io(&path, e))?;
            print_json(&table);
        }
        Command::Normality(n) => {
            let l = load_grid(cli)?;
            let records = open_existing(&l.out)?.to_vec();
            let mode = primary_mode(&records);
            let chosen: Vec<_> = records.iter().filter(|r| r.key.init_mode == mode).collect();
            let mut sweep = normality_sweep(&chosen, n.alpha)?;
            let mut csv = String::from("dataset_id,coordinate,w,p\n");
            for t in &sweep.tests {
                csv.push_str(&format!("{},{},{},{}\n", t.dataset_id, t.coordinate, t.w, t.p_value));
            }
            let path = l.out.join("normality.csv");
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            sweep.tests.clear();
            print_json(&sweep);
        }
        Command::TheoryBounds(t) => {
            let r = compare_bounds(&BoundInputs {
                passes: t.k,
                lipschitz: t.l,
                learning_rate: t.eta,
                n: t.n,
                batch_size: t.b,
            })?;
            println!("2kLNeta = {:.3}", r.variability);
            println!("2kLeta = {:.6}", r.sensitivity);
            println!("2kLeta/B = {:.6}", r.sensitivity_batched);
            println!("ratio = {:.3}", r.ratio);
            println!("E[bound] = {:.6}", r.expected.mean);
            println!("Var[bound] = {:.6}", r.expected.variance);
            if let Some(c) = r.chebyshev {
                println!(
                    "chebyshev_tail = {:.6e} (threshold {:.6}{})",
                    c.probability,
                    c.threshold,
                    if c.vacuous { ", vacuous" } else { "" }
                );
            }
            if t.trials > 0 {
                let mc = monte_carlo_fixed_points(t.n, t.trials, cli.seed.unwrap_or(0))?;
                println!("fixed_points_mean = {:.6} +/- {:.6}", mc.mean, mc.confidence_radius);
            }
        }
        Command::Report => {
            let l = load_grid(cli)?;
            let records = open_existing(&l.out)?.to_vec();
            let bundle = make_reports(&records, &l.cfg, &l.prepared);
            let dir = l.out.join("reports");
            bundle.write_to(&dir)?;
            for n in &bundle.notices {
                eprintln!("notice: {n}");
            }
            println!("wrote {} report files to {}", bundle.files.len(), dir.display());
        }
    }
    Ok(())
}
