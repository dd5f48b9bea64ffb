mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use config::{RunConfig, CONFIG_ENV};
use dedpc::bench::{emit_report, run_benchmark};
use dedpc::dpc::{infer, train_policy, Policy, ResponseBasis};
use dedpc::koopman::{generate_transitions, injection_dictionary, train_koopman, KoopmanModel};
use dedpc::online::OnlineSolver;
use dedpc::scenario::{make_dataset, read_instances, write_instances, ProblemInstance, Regime};
use dedpc::swing::{evaluate_schedule, simulate};

/// Learned dynamics-aware economic dispatch: data generation, surrogate
/// fitting, policy training and benchmarking.
///
/// Configuration precedence, lowest first: built-in defaults, the config
/// file (`--config`, else the DEDPC_CONFIG environment variable), `--set`
/// overrides in order, then dedicated subcommand flags.
#[derive(Debug, Parser)]
#[command(name = "dedpc", version)]
struct Cli {
    /// TOML config file with flat or nested keys.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set dpc.lr=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RegimeArg {
    /// Operating regime: NO or TO.
    #[arg(long)]
    regime: Option<Regime>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample problem instances and write the train/test split.
    GenData {
        #[command(flatten)]
        regime: RegimeArg,
        /// Total number of instances.
        #[arg(long)]
        n: Option<usize>,
        /// Train/test split such as 400:100.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate one instance in the swing dynamics and write its trajectory.
    Sim {
        #[command(flatten)]
        regime: RegimeArg,
        /// Instance id.
        #[arg(long)]
        instance: usize,
        /// Dispatch with the trained policy instead of holding the initial
        /// set-points.
        #[arg(long)]
        policy: bool,
        /// Output CSV (default: <report_dir>/sim_<regime>_<id>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate identification data and fit the Koopman surrogate.
    FitKoopman {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the dispatch policy over the Koopman surrogate.
    TrainDpc {
        #[command(flatten)]
        regime: RegimeArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve test instances with the online baseline.
    SolveOnline {
        #[command(flatten)]
        regime: RegimeArg,
        /// Only this instance id.
        #[arg(long)]
        instance: Option<usize>,
        /// Only the first this many test instances.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Evaluate the policy against the online baseline on the test set.
    Benchmark {
        #[command(flatten)]
        regime: RegimeArg,
        /// Only the first this many test instances.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {what} at {}; run `dedpc {producer}` first", path.display());
    }
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<KoopmanModel> {
    let path = cfg.koopman_path();
    require(&path, "Koopman checkpoint", "fit-koopman")?;
    KoopmanModel::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn load_policy(cfg: &RunConfig) -> Result<Policy> {
    let path = cfg.policy_path();
    require(&path, "trained policy", "train-dpc")?;
    Policy::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn load_split(cfg: &RunConfig, test: bool) -> Result<Vec<ProblemInstance>> {
    let path = if test { cfg.test_path() } else { cfg.train_path() };
    require(&path, "dataset", "gen-data")?;
    let items = read_instances(&path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(bad) = items.iter().find(|i| i.regime != cfg.regime) {
        bail!("{} holds a {} instance (id {}), expected {}", path.display(), bad.regime, bad.id, cfg.regime);
    }
    Ok(items)
}

/// Writes the effective configuration next to a command's outputs.
fn echo_config(cfg: &RunConfig, dir: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{command}.config.toml"));
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn take(items: Vec<ProblemInstance>, limit: usize) -> Vec<ProblemInstance> {
    match limit {
        0 => items,
        n => items.into_iter().take(n).collect(),
    }
}

fn apply_regime(cfg: &mut RunConfig, r: &RegimeArg) {
    if let Some(regime) = r.regime {
        cfg.regime = regime;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData { regime, n, split, seed } => {
            apply_regime(&mut cfg, &regime);
            if let Some(n) = n {
                cfg.data.n = n;
                if split.is_none() {
                    let test = n / 5;
                    cfg.data.split = format!("{}:{test}", n - test);
                }
            }
            if let Some(s) = split {
                cfg.data.split = s;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            cfg.validate()?;
            let net = cfg.network()?;
            let (n_train, n_test) = cfg.split();
            let data = make_dataset(&net, cfg.regime, n_train, n_test, cfg.data.seed, &cfg.scenario)?;
            fs::create_dir_all(&cfg.paths.data_dir)?;
            write_instances(cfg.train_path(), &data.train)?;
            write_instances(cfg.test_path(), &data.test)?;
            echo_config(&cfg, &cfg.paths.data_dir, &format!("gen-data_{}", cfg.regime.label()))?;
            println!(
                "wrote {} training and {} test {} instances to {}",
                data.train.len(),
                data.test.len(),
                cfg.regime,
                cfg.paths.data_dir.display()
            );
        }
        Command::Sim {
            regime,
            instance,
            policy,
            out,
        } => {
            apply_regime(&mut cfg, &regime);
            let net = cfg.network()?;
            let mut all = load_split(&cfg, false)?;
            all.extend(load_split(&cfg, true)?);
            let inst = all
                .into_iter()
                .find(|i| i.id == instance)
                .with_context(|| format!("no {} instance with id {instance}", cfg.regime))?;
            let p_gen = if policy {
                infer(&inst, &load_policy(&cfg)?)?.0.fine
            } else {
                inst.p_g0.iter().map(|&p| vec![p; inst.n_steps]).collect()
            };
            let traj = simulate(&net, &p_gen, &inst.load_forecast(), &inst.x0, inst.dt, inst.n_steps)?;
            let m = evaluate_schedule(&traj, &inst.cost, inst.omega_bnd_hz(), cfg.dpc.eps_rmp);
            let out = out.unwrap_or_else(|| {
                cfg.paths
                    .report_dir
                    .join(format!("sim_{}_{instance}.csv", cfg.regime.label()))
            });
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            traj.write_csv(&net, fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?)?;
            echo_config(&cfg, out.parent().unwrap_or(Path::new(".")), "sim")?;
            println!(
                "instance {instance}: cost {:.6}, max |f| {:.3e} Hz, frequency violation {:.3e} Hz; trajectory in {}",
                m.cost,
                m.max_abs_freq_hz,
                m.max_freq_violation_hz,
                out.display()
            );
        }
        Command::FitKoopman { seed, epochs } => {
            if let Some(s) = seed {
                cfg.koopman.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.koopman.train.epochs = e;
            }
            cfg.validate()?;
            let net = cfg.network()?;
            let start = Instant::now();
            let data = generate_transitions(&net, &cfg.koopman.data, cfg.koopman.data_seed)?;
            info!(
                "identification data: {} train / {} validation pairs",
                data.train.len(),
                data.validation.len()
            );
            let (model, report) = train_koopman(&data, net.n_generators(), &injection_dictionary(&net), &cfg.koopman.train)?;
            fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
            model.save(cfg.koopman_path())?;
            let report_path = cfg.paths.checkpoint_dir.join("koopman_report.json");
            fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
            echo_config(&cfg, &cfg.paths.checkpoint_dir, "fit-koopman")?;
            let q = report.quality;
            println!(
                "Koopman model in {} ({:.1} s): one-step loss {:.3e}, rollout RMS {:.3e} Hz, spectral radius {:.6}",
                cfg.koopman_path().display(),
                start.elapsed().as_secs_f64(),
                q.val_one_step_loss,
                q.rollout_rms_hz,
                q.spectral_radius
            );
        }
        Command::TrainDpc { regime, epochs, seed } => {
            apply_regime(&mut cfg, &regime);
            if let Some(e) = epochs {
                cfg.dpc.epochs = e;
            }
            if let Some(s) = seed {
                cfg.dpc.seed = s;
            }
            cfg.validate()?;
            let net = cfg.network()?;
            let model = load_model(&cfg)?;
            let train = load_split(&cfg, false)?;
            let start = Instant::now();
            let (policy, history) = train_policy(&net, &train, &model, &cfg.dpc)?;
            fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
            policy.save(cfg.policy_path())?;
            let hist_path = cfg
                .paths
                .checkpoint_dir
                .join(format!("policy_{}_history.json", cfg.regime.label()));
            fs::write(&hist_path, serde_json::to_string_pretty(&history)?)?;
            echo_config(&cfg, &cfg.paths.checkpoint_dir, &format!("train-dpc_{}", cfg.regime.label()))?;
            println!(
                "policy in {} ({:.1} s): best epoch {} loss {:.6e}",
                cfg.policy_path().display(),
                start.elapsed().as_secs_f64(),
                history.best_epoch,
                history.epoch_loss.get(history.best_epoch.saturating_sub(1)).copied().unwrap_or(f64::NAN)
            );
        }
        Command::SolveOnline {
            regime,
            instance,
            limit,
        } => {
            apply_regime(&mut cfg, &regime);
            if let Some(l) = limit {
                cfg.bench.limit = l;
            }
            let net = cfg.network()?;
            let model = load_model(&cfg)?;
            let mut test = load_split(&cfg, true)?;
            if let Some(id) = instance {
                test.retain(|i| i.id == id);
                if test.is_empty() {
                    bail!("no {} test instance with id {id}", cfg.regime);
                }
            }
            let test = take(test, cfg.bench.limit);
            let (p_min, p_max) = net.generator_bounds();
            let basis = std::sync::Arc::new(ResponseBasis::new(&model, cfg.dpc.n_knots, test[0].n_steps)?);
            let solver = OnlineSolver::new(basis, p_min, p_max, cfg.online.clone());
            let dir = cfg.report_path();
            fs::create_dir_all(&dir)?;
            let out = dir.join("online.jsonl");
            let mut lines = String::new();
            for inst in &test {
                let report = solver.solve(&model, inst)?;
                println!(
                    "instance {}: objective {:.6}, residual {:.2e}, converged {}, {:.3} s",
                    inst.id,
                    report.objective,
                    report.residuals.max(),
                    report.converged,
                    report.wall_time
                );
                lines.push_str(&serde_json::to_string(&serde_json::json!({ "id": inst.id, "report": report }))?);
                lines.push('\n');
            }
            fs::write(&out, lines)?;
            echo_config(&cfg, &dir, "solve-online")?;
            println!("wrote {}", out.display());
        }
        Command::Benchmark { regime, limit } => {
            apply_regime(&mut cfg, &regime);
            if let Some(l) = limit {
                cfg.bench.limit = l;
            }
            let net = cfg.network()?;
            let policy = load_policy(&cfg)?;
            let model = load_model(&cfg)?;
            let test = take(load_split(&cfg, true)?, cfg.bench.limit);
            let report = run_benchmark(&net, &test, &policy, &model, &cfg.bench_config())?;
            let paths = emit_report(&report, cfg.report_path())?;
            echo_config(&cfg, &cfg.report_path(), "benchmark")?;
            print!("{}", fs::read_to_string(&paths.summary)?);
            println!("report in {}", cfg.report_path().display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
