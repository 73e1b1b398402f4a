//! Command-line surface: expand / solve / mc / compare / sweep.
//!
//! Every run loads a JSON config (`--config`), echoes its hash, and writes
//! one CSV named `<subcommand>-<hash>.csv` into the output directory.
//! Exit codes: 0 success, 2 configuration or usage error, 3 numerical
//! failure at run time.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_config, ModelConfig};
use crate::error::Result;
use crate::expansion::{expand_to, BuildTolerances, ExpansionResult};
use crate::model::Model;
use crate::oracle;
use crate::table::{Cell, ResultTable};
use crate::validation;

#[derive(Parser, Debug)]
#[command(
    name = "evomax",
    version,
    about = "Boundary-layer expansions for transport with fast Markov switching"
)]
struct Cli {
    /// Output directory for CSV results.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the expansion terms and dump them on coarsened time slices.
    Expand {
        #[arg(long)]
        config: PathBuf,
    },
    /// Solve the backward system directly at one eps.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        eps: f64,
        /// Comma-separated snapshot times; default is t_end.
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        /// Spatial refinement of the solver grid.
        #[arg(long, default_value_t = 1)]
        refine: usize,
    },
    /// Monte Carlo estimate at one probe point.
    Mc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        u: f64,
        /// State index.
        #[arg(long)]
        x: usize,
        /// Path count; default from the config.
        #[arg(long)]
        paths: Option<u64>,
        /// Seed; default from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Remainders per (order, eps) against certified direct solves.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated truncation orders; default 0..=configured order.
        #[arg(long, value_delimiter = ',')]
        orders: Option<Vec<usize>>,
        /// Comma-separated eps values; default from the config.
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        /// Comparison time; default t_end.
        #[arg(long)]
        t: Option<f64>,
    },
    /// Convergence-order sweep with resolution certificates.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        orders: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        #[arg(long)]
        t: Option<f64>,
    },
}

/// Run the CLI on an argv (including the program name); returns the exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage text; --help and --version land
            // here as "errors" with exit code 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Expand { config } => {
            let (cfg, model) = load(config)?;
            let table = expand_table(&cfg, &model)?;
            finish(&cli.out, "expand", &cfg, table)
        }
        Command::Solve {
            config,
            eps,
            times,
            refine,
        } => {
            let (cfg, model) = load(config)?;
            let times = times.clone().unwrap_or_else(|| vec![model.time.t_end]);
            let table = solve_table(&cfg, &model, *eps, &times, *refine)?;
            finish(&cli.out, "solve", &cfg, table)
        }
        Command::Mc {
            config,
            eps,
            t,
            u,
            x,
            paths,
            seed,
        } => {
            let (cfg, model) = load(config)?;
            let n_paths = paths.unwrap_or(model.mc_paths);
            let seed = seed.unwrap_or(model.mc_seed);
            let est = oracle::mc_estimate(&model, *eps, *t, *u, *x, n_paths, seed)?;
            let mut table = ResultTable::new(
                vec!["t", "u", "state", "mean", "stderr", "n_paths", "seed"],
                &cfg.hash(),
            );
            table.push(vec![
                Cell::Num(est.t),
                Cell::Num(est.u),
                Cell::Int(est.state as i64),
                Cell::Num(est.mean),
                Cell::Num(est.stderr),
                Cell::Int(est.n_paths as i64),
                Cell::Int(est.seed as i64),
            ]);
            finish(&cli.out, "mc", &cfg, table)
        }
        Command::Compare {
            config,
            orders,
            epsilons,
            t,
        } => {
            let (cfg, model) = load(config)?;
            let setup = sweep_inputs(&model, orders, epsilons, t)?;
            let points = validation::errors_table(
                &model,
                &setup.expansion,
                &setup.orders,
                &setup.epsilons,
                setup.t,
            )?;
            let mut table = ResultTable::new(
                vec!["N", "epsilon", "error", "solver_estimate", "certified"],
                &cfg.hash(),
            );
            for (oi, order) in setup.orders.iter().enumerate() {
                for p in &points[oi] {
                    table.push(vec![
                        Cell::Int(*order as i64),
                        Cell::Num(p.eps),
                        Cell::Num(p.error),
                        Cell::Num(p.solver_estimate),
                        Cell::Int(p.certified as i64),
                    ]);
                }
            }
            finish(&cli.out, "compare", &cfg, table)
        }
        Command::Sweep {
            config,
            orders,
            epsilons,
            t,
        } => {
            let (cfg, model) = load(config)?;
            let setup = sweep_inputs(&model, orders, epsilons, t)?;
            let rows = validation::sweep(
                &model,
                &setup.expansion,
                &setup.orders,
                &setup.epsilons,
                setup.t,
            )?;
            let mut table = ResultTable::new(
                vec!["N", "slope", "band_low", "band_high", "certified"],
                &cfg.hash(),
            );
            for row in &rows {
                table.push(vec![
                    Cell::Int(row.order as i64),
                    Cell::Num(row.fit.slope),
                    Cell::Num(row.fit.band.0),
                    Cell::Num(row.fit.band.1),
                    Cell::Int(row.certified as i64),
                ]);
            }
            finish(&cli.out, "sweep", &cfg, table)
        }
    }
}

fn load(path: &Path) -> Result<(ModelConfig, Model)> {
    let cfg = load_config(path)?;
    let model = Model::from_config(&cfg)?;
    Ok((cfg, model))
}

struct SweepSetup {
    orders: Vec<usize>,
    epsilons: Vec<f64>,
    t: f64,
    expansion: ExpansionResult,
}

fn sweep_inputs(
    model: &Model,
    orders: &Option<Vec<usize>>,
    epsilons: &Option<Vec<f64>>,
    t: &Option<f64>,
) -> Result<SweepSetup> {
    let orders = orders
        .clone()
        .unwrap_or_else(|| (0..=model.order).collect());
    let epsilons = epsilons.clone().unwrap_or_else(|| model.epsilons.clone());
    let t = t.unwrap_or(model.time.t_end);
    let max_order = orders.iter().copied().max().unwrap_or(0);
    let expansion = expand_to(
        model,
        max_order.max(model.order),
        BuildTolerances::default(),
    )?;
    Ok(SweepSetup {
        orders,
        epsilons,
        t,
        expansion,
    })
}

/// Terms CSV on coarsened slices: every grid point, at most ~21 time slices
/// per axis so the default dump stays reviewable.
fn expand_table(cfg: &ModelConfig, model: &Model) -> Result<ResultTable> {
    let expansion = crate::expansion::expand(model)?;
    let mut table = ResultTable::new(
        vec!["k", "kind", "t_or_tau", "state", "u", "value"],
        &cfg.hash(),
    );
    let t_stride = (model.time.n_steps / 20).max(1);
    let tau_stride = (expansion.layer.n_tau / 20).max(1);
    for (k, series) in expansion.regular.iter().enumerate() {
        for (j, field) in series.fields.iter().enumerate().step_by(t_stride) {
            let t = series.time.time(j);
            for x in 0..field.n_states() {
                for i in 0..field.grid.n_points {
                    table.push(vec![
                        Cell::Int(k as i64),
                        Cell::Text("regular"),
                        Cell::Num(t),
                        Cell::Int(x as i64),
                        Cell::Num(field.grid.node(i)),
                        Cell::Num(field.values[(x, i)]),
                    ]);
                }
            }
        }
    }
    for (ki, series) in expansion.corrections.iter().enumerate() {
        for (j, gf) in series.values.iter().enumerate().step_by(t_stride) {
            let t = series.time.time(j);
            for i in 0..gf.grid.n_points {
                table.push(vec![
                    Cell::Int((ki + 1) as i64),
                    Cell::Text("correction"),
                    Cell::Num(t),
                    Cell::Int(0),
                    Cell::Num(gf.grid.node(i)),
                    Cell::Num(gf.values[i]),
                ]);
            }
        }
    }
    for (ki, series) in expansion.singular.iter().enumerate() {
        for (m, field) in series.fields.iter().enumerate().step_by(tau_stride) {
            let tau = series.layer.tau(m);
            for x in 0..field.n_states() {
                for i in 0..field.grid.n_points {
                    table.push(vec![
                        Cell::Int((ki + 1) as i64),
                        Cell::Text("singular"),
                        Cell::Num(tau),
                        Cell::Int(x as i64),
                        Cell::Num(field.grid.node(i)),
                        Cell::Num(field.values[(x, i)]),
                    ]);
                }
            }
        }
    }
    Ok(table)
}

fn solve_table(
    cfg: &ModelConfig,
    model: &Model,
    eps: f64,
    times: &[f64],
    refine: usize,
) -> Result<ResultTable> {
    let dcfg = oracle::DirectConfig {
        refine: refine.max(1),
        ..oracle::DirectConfig::default()
    };
    let solution = oracle::direct_solve(model, eps, times, dcfg)?;
    let mut table = ResultTable::new(vec!["t", "state", "u", "value"], &cfg.hash());
    for (snap, &t) in solution.snapshots.iter().zip(&solution.times) {
        for x in 0..snap.n_states() {
            for i in 0..snap.grid.n_points {
                table.push(vec![
                    Cell::Num(t),
                    Cell::Int(x as i64),
                    Cell::Num(snap.grid.node(i)),
                    Cell::Num(snap.values[(x, i)]),
                ]);
            }
        }
    }
    Ok(table)
}

fn finish(out_dir: &Path, subcommand: &str, cfg: &ModelConfig, table: ResultTable) -> Result<()> {
    let hash = cfg.hash();
    let path = out_dir.join(format!("{subcommand}-{hash}.csv"));
    table.write(&path)?;
    println!("config {hash}");
    println!("wrote {}", path.display());
    Ok(())
}
