//! Command-line front end: run experiments, check the tabular oracle,
//! plot learning curves and generate or inspect networks.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diffdac::harness::{self, OracleBattery, PlanFile};
use diffdac::net::{
    consensus_check, geometric_topology_with_degree, hastings_weights, random_geometric_topology, NetPreset, Topology,
};

#[derive(Parser)]
#[command(name = "diffdac", version, about = "Diffusion-based distributed multitask actor-critic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment of a plan file or a named preset.
    Run(RunArgs),
    /// Compare the tabular actor-critic against value iteration.
    OracleCheck(OracleArgs),
    /// Render learning curves from metrics CSVs as SVG.
    Plot(PlotArgs),
    /// Generate, inspect or export a communication network.
    #[command(subcommand)]
    Topology(TopologyCommand),
    /// List presets, or print one as a plan file.
    Preset {
        name: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Plan file (TOML).
    #[arg(required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset instead of a plan file.
    #[arg(long)]
    preset: Option<String>,
    /// Run only this seed.
    #[arg(long, env = "DIFFDAC_SEED")]
    seed: Option<u64>,
    /// Override every experiment's output directory.
    #[arg(long, env = "DIFFDAC_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Validate and print the resolved plan without running it.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct OracleArgs {
    /// standard | gridworld | identical | empty
    #[arg(long, default_value = "standard")]
    battery: String,
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics CSVs, optionally as `label=path`; equal labels are pooled.
    #[arg(required = true)]
    inputs: Vec<String>,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value = "Learning curve")]
    title: String,
}

#[derive(Subcommand)]
enum TopologyCommand {
    /// Draw a network and write it as an edge list.
    Generate {
        /// n25_sparse | n25_dense | n100
        #[arg(long, conflicts_with_all = ["n_agents", "ring"])]
        preset: Option<String>,
        #[arg(long)]
        n_agents: Option<usize>,
        #[arg(long, conflicts_with = "degree")]
        radius: Option<f64>,
        /// Target mean neighborhood size (self included).
        #[arg(long)]
        degree: Option<f64>,
        #[arg(long)]
        ring: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print statistics of an edge-list file.
    Inspect { file: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::OracleCheck(args) => oracle(args),
        Command::Plot(args) => {
            harness::plot(&args.inputs, &args.output, &args.title)?;
            println!("wrote {}", args.output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Topology(cmd) => topology(cmd),
        Command::Preset { name } => {
            match name {
                Some(n) => print!("{}", harness::preset(&n)?.to_toml_string()?),
                None => harness::PRESETS.iter().for_each(|p| println!("{p}")),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let mut plan = match (&args.config, &args.preset) {
        (Some(path), _) => PlanFile::load(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(name)) => harness::preset(name)?,
        (None, None) => bail!("give a plan file or --preset"),
    };
    plan.apply_overrides(args.seed, args.output_dir.as_deref());
    // Everything is validated before the first artifact is written.
    let experiments = plan.validate()?;
    if args.dry_run {
        print!("{}", plan.to_toml_string()?);
        return Ok(ExitCode::SUCCESS);
    }
    let mut failed = false;
    for exp in &experiments {
        let summaries = harness::run_experiment(exp, |s| println!("{s}"))?;
        failed |= summaries.iter().any(|s| !s.failing_seeds.is_empty());
    }
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn oracle(args: OracleArgs) -> Result<ExitCode> {
    let mut battery = OracleBattery::by_name(&args.battery)?;
    if let Some(t) = args.tolerance {
        battery.tolerance = t;
    }
    let report = harness::oracle_check(&battery)?;
    if report.is_vacuous() {
        eprintln!("warning: empty battery, nothing checked");
        return Ok(ExitCode::SUCCESS);
    }
    for c in &report.cases {
        println!(
            "seed {:>4}: {} tasks, {:>2} states, {} actions, iterations {:>5}, |v - v*| = {:.3e} {}",
            c.seed,
            c.n_tasks,
            c.n_states,
            c.n_actions,
            c.iterations,
            c.error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("all {} cases within {:e}", report.cases.len(), report.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("cases above tolerance {:e}: seeds {:?}", report.tolerance, report.failing_seeds());
        Ok(ExitCode::FAILURE)
    }
}

fn topology(cmd: TopologyCommand) -> Result<ExitCode> {
    match cmd {
        TopologyCommand::Generate {
            preset,
            n_agents,
            radius,
            degree,
            ring,
            seed,
            output,
        } => {
            let topo = if let Some(name) = preset {
                NetPreset::from_name(&name)?.build(seed)
            } else {
                let n = n_agents.context("--n-agents is required without --preset")?;
                let mut rng = diffdac::seeded_rng(seed, &[0x6e6574, n as u64]);
                match (ring, radius, degree) {
                    (true, None, None) => Topology::ring(n),
                    (false, Some(r), None) => random_geometric_topology(n, r, &mut rng)?,
                    (false, None, Some(d)) => geometric_topology_with_degree(n, d, &mut rng)?,
                    _ => bail!("choose exactly one of --ring, --radius and --degree"),
                }
            };
            match output {
                Some(path) => {
                    topo.save(&path)?;
                    print_stats(&topo)?;
                }
                None => print!("{}", topo.to_edge_list()),
            }
        }
        TopologyCommand::Inspect { file } => {
            let topo = Topology::load(&file).with_context(|| format!("reading {}", file.display()))?;
            print_stats(&topo)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_stats(topo: &Topology) -> Result<()> {
    println!("agents: {}", topo.n_agents());
    println!("edges: {}", topo.edges().len());
    println!("mean neighborhood size: {:.3}", topo.average_degree());
    println!("connected: {}", topo.is_connected());
    if topo.is_connected() {
        let c = hastings_weights(topo)?;
        println!("consensus iterations (1e-6): {}", consensus_check(&c, 1e-6)?);
    }
    Ok(())
}
