//! `patient0` command line: init, profile, detect, experiment.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use patient0::config::{chain_coupling, ExperimentConfig, PolicyConfig};
use patient0::env::{rollout, Attack, EnvConfig};
use patient0::episode::{load_episode, save_episode, AgentId};
use patient0::eval::{
    attack_plan, build_models, plan_variant_count, prepare, run_experiment, single_seed, write_analysis, Detector,
};
use patient0::stage1::StabilityProfile;
use patient0::Error;

/// Output root override for every relative `--out`.
const OUT_ROOT_VAR: &str = "PATIENT0_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "patient0",
    version,
    about = "Patient-0 forensics for cooperative multi-agent policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a config template with every default spelled out.
    Init {
        #[arg(long, value_enum, default_value_t = EnvChoice::Chain)]
        env: EnvChoice,
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Target file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Build the fault-free stability profile.
    Profile {
        #[command(flatten)]
        common: Common,
    },
    /// Analyse one episode: Stage 1, traceback, contagion graph.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Episode log to analyse.
        #[arg(long, conflicts_with = "generate", required_unless_present = "generate")]
        episode: Option<PathBuf>,
        /// Roll out a fresh episode from the config instead.
        #[arg(long)]
        generate: bool,
        /// Seed of the generated episode (derived from the master seed by default).
        #[arg(long, requires = "generate")]
        seed: Option<u64>,
        /// Inject the configured attack on this agent in the generated episode.
        #[arg(long, requires = "generate")]
        attack: Option<usize>,
        /// Attack start step (defaults to `experiment.attack.start_min`).
        #[arg(long, requires = "attack")]
        start: Option<usize>,
        #[arg(long)]
        profile: PathBuf,
    },
    /// Full protocol: profile, attacked episodes, held-out episodes, paired study.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Print the planned variant count and exit.
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, resolved against $PATIENT0_OUT_ROOT when relative.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvChoice {
    Chain,
    Spread,
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) | Error::UnsupportedEnv(_) => 2,
            Error::InsufficientData(_) => 3,
            Error::MalformedEpisode(_) | Error::Parse { .. } => 4,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Init { env, n, out, force } => init(env, n, out, force),
        Command::Profile { common } => {
            let cfg = load_config(&common.config)?;
            let out = output_dir(common.out.as_deref(), "profile", common.force)?;
            in_pool(common.jobs, || {
                progress("building models and stability profile");
                let prep = prepare(&cfg)?;
                write(&out.join("config.toml"), &cfg.to_toml())?;
                write(&out.join("profile.json"), &prep.profile.to_json())?;
                println!("{}", out.join("profile.json").display());
                Ok(())
            })
        }
        Command::Detect {
            common,
            episode,
            generate,
            seed,
            attack,
            start,
            profile,
        } => {
            let cfg = load_config(&common.config)?;
            let profile = load_profile(&profile, cfg.env.n)?;
            let out = output_dir(common.out.as_deref(), "detect", common.force)?;
            in_pool(common.jobs, || {
                detect(&cfg, &profile, &out, episode.as_deref(), generate, seed, attack, start)
            })
        }
        Command::Experiment { common, dry_run } => {
            let cfg = load_config(&common.config)?;
            if dry_run {
                println!("{}", plan_variant_count(&cfg));
                return Ok(());
            }
            let out = output_dir(common.out.as_deref(), "experiment", common.force)?;
            let output = run_experiment(&cfg, &out, common.jobs, &progress)?;
            println!("{}", output.summary.to_json());
            Ok(())
        }
    }
}

fn init(env: EnvChoice, n: usize, out: Option<PathBuf>, force: bool) -> CliResult {
    if n == 0 {
        return Err(Failure::new(2, "n must be positive"));
    }
    let mut cfg = ExperimentConfig::default();
    cfg.env = match env {
        EnvChoice::Chain => EnvConfig::chain(chain_coupling(n, 0.6)),
        EnvChoice::Spread => EnvConfig::spread(n),
    };
    cfg.policies = PolicyConfig::scripted(&cfg.env);
    let text = cfg.to_toml();
    match out {
        None => print!("{text}"),
        Some(path) => {
            if path.exists() && !force {
                return Err(Failure::new(
                    2,
                    format!("{} exists; pass --force to overwrite", path.display()),
                ));
            }
            write(&path, &text)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn detect(
    cfg: &ExperimentConfig,
    profile: &StabilityProfile,
    out: &Path,
    episode: Option<&Path>,
    generate: bool,
    seed: Option<u64>,
    attack: Option<usize>,
    start: Option<usize>,
) -> CliResult {
    let episode = match episode {
        Some(path) => Some(load_episode(path).map_err(|e| match e {
            Error::Io { .. } => Failure::new(4, e.to_string()),
            e => e.into(),
        })?),
        None => None,
    };
    progress("building models");
    let (models, _) = build_models(cfg)?;
    let ep = match episode {
        Some(ep) => {
            if ep.env_id != cfg.env.env_id() || ep.n != cfg.env.n {
                return Err(Failure::new(
                    4,
                    format!(
                        "episode is {} with {} agents, config is {} with {}",
                        ep.env_id,
                        ep.n,
                        cfg.env.env_id(),
                        cfg.env.n
                    ),
                ));
            }
            ep
        }
        None => {
            debug_assert!(generate);
            let seed = seed.unwrap_or_else(|| single_seed(cfg.experiment.master_seed));
            let plan = match attack {
                Some(j) if j >= cfg.env.n => {
                    return Err(Failure::new(
                        2,
                        format!("attack agent {j} out of range for {} agents", cfg.env.n),
                    ))
                }
                Some(j) => Some(attack_plan(
                    &cfg.experiment.attack,
                    AgentId(j),
                    start.unwrap_or(cfg.experiment.attack.start_min),
                )),
                None => None,
            };
            let attack = plan.as_ref().map(|plan| Attack {
                plan,
                critic: &models.critics[plan.agent.0],
            });
            let ep = rollout(&cfg.env, seed, &models.policies, attack)?;
            save_episode(&out.join("episode.jsonl"), &ep)?;
            ep
        }
    };
    let det = Detector {
        policies: &models.policies,
        critics: &models.critics,
        profile,
        probe: &cfg.probe,
        traceback: &cfg.stage2,
        graph: &cfg.contagion,
    };
    progress("analysing episode");
    let analysis = det.analyze(&ep).map_err(|e| match e {
        Error::DimensionMismatch { .. } => Failure::new(4, e.to_string()),
        e => e.into(),
    })?;
    write_analysis(out, "episode", &analysis, profile, &cfg.contagion)?;
    println!("{}", analysis.report.to_json());
    Ok(())
}

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| Failure::new(2, e.to_string()))
}

fn load_profile(path: &Path, n: usize) -> CliResult<StabilityProfile> {
    let text = fs::read_to_string(path).map_err(|e| Failure::new(4, format!("{}: {e}", path.display())))?;
    let profile =
        StabilityProfile::from_json(&text).map_err(|e| Failure::new(4, format!("{}: {e}", path.display())))?;
    if profile.agents.len() != n {
        return Err(Failure::new(
            4,
            format!("profile covers {} agents, config has {n}", profile.agents.len()),
        ));
    }
    Ok(profile)
}

/// Resolves `--out` and makes sure it is an empty directory.
fn output_dir(out: Option<&Path>, default: &str, force: bool) -> CliResult<PathBuf> {
    let out = out.unwrap_or(Path::new(default));
    let dir = match std::env::var_os(OUT_ROOT_VAR) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    };
    let io = |e: std::io::Error| Failure::new(1, format!("{}: {e}", dir.display()));
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Failure::new(2, format!("{} is not a directory", dir.display())));
        }
        let occupied = fs::read_dir(&dir).map_err(io)?.next().is_some();
        if occupied {
            if !force {
                return Err(Failure::new(
                    2,
                    format!("{} is not empty; pass --force to replace its contents", dir.display()),
                ));
            }
            fs::remove_dir_all(&dir).map_err(io)?;
        }
    }
    fs::create_dir_all(&dir).map_err(io)?;
    Ok(dir)
}

fn in_pool(jobs: usize, f: impl FnOnce() -> CliResult + Send) -> CliResult {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Failure::new(1, e.to_string()))?;
    pool.install(f)
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))
}

fn progress(msg: &str) {
    eprintln!("[patient0] {msg}");
}
