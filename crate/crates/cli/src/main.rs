use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use waypoint::env::{evaluate, generate_dataset, save_dataset, sidecar_path, EvalReport, MazeSpec};
use waypoint::harness::ablation::{run_ablation, AblationMatrix};
use waypoint::harness::checkpoint::Checkpoint;
use waypoint::harness::config::RunConfig;
use waypoint::harness::viz::write_visualisations;
use waypoint::trainer::{train, Agent, AgentController};
use waypoint::{Error, Result};

#[derive(Parser)]
#[command(name = "waypoint", version, about = "Offline goal-conditioned RL with subgoal-generating policies")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `trainer.H=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a scripted-expert dataset; `--out` is the dataset file.
    GenData {
        #[arg(long, default_value = "corridor")]
        maze: String,
        #[arg(long, default_value_t = 200)]
        n_traj: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Train from the resolved configuration; `--out` is the run directory.
    Train,
    /// Evaluate a checkpoint on the maze's evaluation pairs; `--out` is a directory
    /// for eval.json, else `<checkpoint>.eval.json` is written beside the checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the maze recorded in the checkpoint.
        #[arg(long)]
        maze: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Sweep a variant matrix over seeds.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value_t = 4)]
        seeds: usize,
    },
    /// Decode and plot subgoals along evaluation rollouts.
    VizSubgoals {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        maze: Option<String>,
        /// Comma-separated evaluation pair indices; all pairs when omitted.
        #[arg(long, value_delimiter = ',')]
        pairs: Vec<usize>,
    },
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

/// Refuse to write into an existing non-empty path unless `--force`.
fn check_fresh(path: &Path, force: bool) -> Result<()> {
    let occupied = match std::fs::read_dir(path) {
        Ok(mut d) => d.next().is_some(),
        Err(_) => path.exists(),
    };
    if occupied && !force {
        return Err(Error::Config(format!("{} already exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut run = RunConfig::resolve(cli.config.as_deref(), &cli.sets)?;
    if let Some(s) = cli.seed {
        run.trainer.seed = s;
    }
    Ok(run)
}

fn print_report(r: &EvalReport) {
    for (i, p) in r.pairs.iter().enumerate() {
        println!(
            "pair {i}: ({:.2}, {:.2}) -> ({:.2}, {:.2})  {:.1}%",
            p.start[0], p.start[1], p.goal[0], p.goal[1], p.success_rate
        );
    }
    println!("mean success: {:.1}%", r.mean);
}

/// Checkpoint plus the run configuration it was trained with.
fn load_agent(path: &Path, maze: Option<&str>) -> Result<(Agent<f32>, MazeSpec, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let run: RunConfig = serde_json::from_value(ck.config.clone())
        .map_err(|e| Error::Format { offset: 0, msg: format!("checkpoint config: {e}") })?;
    let maze = MazeSpec::resolve(maze.unwrap_or(&run.maze))?;
    let agent = Agent::from_checkpoint(&ck, &run, &maze)?;
    Ok((agent, maze, run))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData { maze, n_traj, noise } => {
            if *n_traj == 0 {
                return Err(Error::Config("--n-traj must be ≥ 1".into()));
            }
            let out = require_out(cli)?;
            check_fresh(out, cli.force)?;
            let spec = MazeSpec::resolve(maze)?;
            let ds = generate_dataset(&spec, *n_traj, *noise, cli.seed.unwrap_or(0))?;
            save_dataset(&ds, out)?;
            println!("wrote {} and {}", out.display(), sidecar_path(out).display());
            println!("trajectories: {}", ds.trajectories.len());
            println!("transitions: {}", ds.n_transitions());
            println!("free-space coverage: {:.1}%", ds.coverage(&spec));
        }
        Cmd::Train => {
            let mut run = resolve(cli)?;
            let out = cli
                .out
                .clone()
                .or_else(|| run.out.clone().map(PathBuf::from))
                .ok_or_else(|| Error::Config("--out (or config `out`) is required".into()))?;
            check_fresh(&out, cli.force)?;
            run.out = Some(out.display().to_string());
            let maze = run.maze_spec()?;
            let ds = run.dataset(&maze)?;
            info!("{} transitions on '{}'", ds.n_transitions(), maze.name);
            let o = train::<f32>(&run, &ds, &maze, Some(&out))?;
            match o.final_eval {
                Some(r) => print_report(&r),
                None => println!("no training steps requested"),
            }
        }
        Cmd::Eval { checkpoint, maze, episodes } => {
            let (agent, spec, run) = load_agent(checkpoint, maze.as_deref())?;
            let eps = episodes.unwrap_or(run.eval.episodes_per_pair);
            let seed = cli.seed.unwrap_or(run.trainer.seed);
            let r = evaluate(&mut AgentController { agent: &agent }, &spec, eps, seed)?;
            print_report(&r);
            // next to the checkpoint by default, named after it so the
            // training run's own eval.json is left alone
            let p = match &cli.out {
                Some(d) => d.join("eval.json"),
                None => {
                    let stem = checkpoint.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy());
                    checkpoint.with_file_name(format!("{stem}.eval.json"))
                }
            };
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            check_fresh(&p, cli.force)?;
            std::fs::write(&p, serde_json::to_string_pretty(&r)?).map_err(|e| Error::io(&p, e))?;
        }
        Cmd::Ablate { matrix, seeds } => {
            let base = resolve(cli)?;
            let m = AblationMatrix::load(matrix)?;
            let out = require_out(cli)?;
            check_fresh(out, cli.force)?;
            let rep = run_ablation(&m, &base, *seeds, out)?;
            print!("{}", waypoint::harness::ablation::summary_table(&rep.rows));
            if !rep.failures.is_empty() {
                let msg = format!("{} of the runs failed (see FAILED notes)", rep.failures.len());
                return Err(if rep.any_numerical() { Error::Numerical(msg) } else { Error::Data(msg) });
            }
        }
        Cmd::VizSubgoals { checkpoint, maze, pairs } => {
            let (agent, spec, _) = load_agent(checkpoint, maze.as_deref())?;
            let out = require_out(cli)?;
            check_fresh(out, cli.force)?;
            let pairs: Vec<usize> = if pairs.is_empty() { (0..spec.eval_pairs.len()).collect() } else { pairs.clone() };
            for ep in write_visualisations(&agent, &spec, &pairs, out)? {
                println!(
                    "pair {}: {} steps, {}",
                    ep.pair,
                    ep.steps.len(),
                    if ep.success { "reached goal" } else { "did not reach goal" }
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
