use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dadmm::experiment::{self, ExperimentConfig, ExperimentError, Instance, Methods};
use dadmm::spectral;
use dadmm::topology;

/// Decentralized consensus ADMM experiments.
#[derive(Parser)]
#[command(name = "dadmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured networks as edge lists plus a metrics table.
    GenGraph(Common),
    /// Incidence spectra and κ_G of the configured networks.
    Spectra(Common),
    /// Objective constants and the theoretical penalty and rate bounds.
    Rates(Common),
    /// ADMM runs with per-iteration trajectories.
    RunAdmm(Common),
    /// Distributed gradient descent runs on the same instances.
    RunDgd(Common),
    /// The full configured experiment.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Usage(String),
    Invariant(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_invariant_violation() {
            Failure::Invariant(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let config = ExperimentConfig::load(&common.config)
        .map_err(|e| Failure::Usage(format!("{}: {e}", common.config.display())))?;
    Ok(match common.seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn units(config: &ExperimentConfig) -> Vec<(experiment::Point, u64)> {
    let seeds = config.seeds.values();
    config
        .points()
        .into_iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect()
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn gen_graph(common: &Common) -> Result<(), Failure> {
    let config = load(common)?;
    let hash = config.hash();
    let mut table = String::from("point,seed,L,E,kind,p,D,d_min,d_max,L_d,imbalance,file,status\n");
    let graphs = common.out.join("graphs");
    for (point, seed) in units(&config) {
        match experiment::build_topology(config.agents, point.graph, seed) {
            Ok(t) => {
                let m = topology::metrics(&t);
                let file = format!("{hash}_p{:03}_s{seed}.txt", point.index);
                write(&graphs, &file, &t.to_edge_list())?;
                let _ = writeln!(
                    table,
                    "{},{seed},{},{},{},{:?},{},{},{},{:?},{},{file},ok",
                    point.index,
                    t.agents(),
                    t.edge_count(),
                    t.kind(),
                    m.ratio,
                    m.diameter,
                    m.min_degree,
                    m.max_degree,
                    m.geometric_degree,
                    m.imbalance.map(|v| v.to_string()).unwrap_or_default()
                );
            }
            Err(e) => {
                let _ = writeln!(
                    table,
                    "{},{seed},,,,,,,,,,,error: {}",
                    point.index,
                    clean(&e.to_string())
                );
            }
        }
    }
    write(&common.out, "graphs.csv", &table)
}

fn clean(s: &str) -> String {
    s.replace([',', '\n', '"'], ";")
}

fn spectra(common: &Common) -> Result<(), Failure> {
    let config = load(common)?;
    let mut table = String::from(
        "point,seed,L,E,lambda_max_Lplus,lambda_tmin_Lminus,sigma_max_Mplus,sigma_tmin_Mminus,kappa_G,bipartite,status\n",
    );
    for (point, seed) in units(&config) {
        let result = experiment::build_topology(config.agents, point.graph, seed)
            .map_err(ExperimentError::from)
            .and_then(|t| {
                let inc = spectral::build_incidence(&t, 1);
                Ok((spectral::spectra(&inc)?, t))
            });
        match result {
            Ok((s, t)) => {
                let _ = writeln!(
                    table,
                    "{},{seed},{},{},{:?},{:?},{:?},{:?},{:?},{},ok",
                    point.index,
                    t.agents(),
                    t.edge_count(),
                    s.lam_max_lplus,
                    s.lam_tmin_lminus,
                    s.sigma_max_mplus,
                    s.sigma_tmin_mminus,
                    s.kappa_g,
                    t.bipartition().is_some()
                );
            }
            Err(e) => {
                let _ = writeln!(
                    table,
                    "{},{seed},,,,,,,,,error: {}",
                    point.index,
                    clean(&e.to_string())
                );
            }
        }
    }
    write(&common.out, "spectra.csv", &table)
}

fn rates(common: &Common) -> Result<(), Failure> {
    let config = load(common)?;
    let mut table =
        String::from("point,seed,kappa_G,kappa_f,m_f,M_f,c_t,mu_star,delta_t,rho_t,status\n");
    for (point, seed) in units(&config) {
        match Instance::build(&config, &point, seed) {
            Ok(inst) => {
                let b = &inst.bundle;
                let _ = writeln!(
                    table,
                    "{},{seed},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},ok",
                    point.index,
                    b.kappa_g,
                    b.kappa_f,
                    inst.profile.m_f,
                    inst.profile.big_m_f,
                    b.c_t,
                    b.mu_star,
                    b.delta_t,
                    b.rho_t
                );
            }
            Err(e) => {
                let _ = writeln!(
                    table,
                    "{},{seed},,,,,,,,,error: {}",
                    point.index,
                    clean(&e.to_string())
                );
            }
        }
    }
    write(&common.out, "rates.csv", &table)
}

fn batch(common: &Common, methods: Option<Methods>) -> Result<(), Failure> {
    let config = load(common)?;
    let methods = methods.unwrap_or(Methods::for_kind(config.experiment));
    let out = experiment::run_experiment_with(&config, methods)?;
    out.write_to(&common.out)?;
    let failed = out.rows.iter().filter(|r| r.status != "ok").count();
    eprintln!(
        "{} rows ({} failed), {} trajectories → {}",
        out.rows.len(),
        failed,
        out.trajectories.len(),
        common.out.display()
    );
    if let Some(bad) = out.rows.iter().find(|r| r.is_invariant_violation()) {
        return Err(Failure::Invariant(format!(
            "point {} seed {}: {}",
            bad.point, bad.seed, bad.status
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::GenGraph(c) => gen_graph(c),
        Command::Spectra(c) => spectra(c),
        Command::Rates(c) => rates(c),
        Command::RunAdmm(c) => batch(c, Some(Methods::Admm)),
        Command::RunDgd(c) => batch(c, Some(Methods::Dgd)),
        Command::Sweep(c) => batch(c, None),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Invariant(m)) => {
            eprintln!("invariant violated: {m}");
            ExitCode::from(2)
        }
    }
}
