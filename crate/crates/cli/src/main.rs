use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use cmcl::error::exit;
use cmcl::harness::{self, scenarios, Protocol, RunConfig};
use cmcl::numerics::OpKind;

#[derive(Parser)]
#[command(name = "cmcl", version, about = "Multi-domain alternating training with cross-domain likelihood")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write metrics, checkpoints and a summary.
    Train(RunArgs),
    /// Accuracy of a checkpoint's target and online models on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Also write the report as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss on random toy models.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the gradient rule of this op (negative control).
        #[arg(long)]
        fault: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CMCL against its ERM reduction on identical data.
    Benchmark {
        #[command(flatten)]
        run: RunArgs,
        /// Hold out every domain in turn instead of only the unseen one.
        #[arg(long)]
        lodo: bool,
    },
    /// Write every domain of a scenario as dataset files.
    GenData(RunArgs),
    /// Print a registered scenario's full config as JSON.
    ShowConfig {
        #[arg(long, default_value = "spurious")]
        scenario: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file (JSON).
    #[arg(long, conflicts_with = "scenario")]
    config: Option<PathBuf>,
    /// Registered scenario to use instead of a config file.
    #[arg(long)]
    scenario: Option<String>,
    /// Replace the configured seeds; repeatable.
    #[arg(long)]
    seed: Vec<u64>,
    /// Output directory (default `runs/<name>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.outer_iters=50`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if !self.seed.is_empty() {
            let list: Vec<String> = self.seed.iter().map(u64::to_string).collect();
            overrides.push(format!("seeds=[{}]", list.join(",")));
        }
        let cfg = match (&self.config, &self.scenario) {
            (Some(path), _) => harness::load_config(path, &overrides)?,
            (None, Some(name)) => {
                let base = scenarios::registered(name).ok_or_else(|| {
                    cmcl::Error::invalid("scenario", format!("`{name}` is not one of {:?}", scenarios::NAMES))
                })?;
                let text = serde_json::to_string(&base)?;
                harness::parse_config(&text, name, &overrides)?
            }
            (None, None) => bail!(cmcl::Error::invalid("config", "pass --config or --scenario")),
        };
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(&cfg.name))
    }
}

fn write_json(dir: &Path, file: &str, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(file);
    std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let out = args.out_dir(&cfg);
            let result = harness::cmd_train(&cfg, &out)?;
            for r in &result.rows {
                println!(
                    "seed {:>4} held_out {:<8} acc_target {:.4} acc_online {:.4}",
                    r.seed, r.held_out, r.acc_target, r.acc_online
                );
            }
            let a = &result.aggregate;
            println!(
                "mean acc_target {:.4} (std {:.4}), acc_online {:.4} (std {:.4})",
                a.mean_acc_target, a.std_acc_target, a.mean_acc_online, a.std_acc_online
            );
            println!("wrote {}", out.join("summary.json").display());
        }
        Command::Eval { checkpoint, dataset, out } => {
            let report = harness::cmd_eval(&checkpoint, &dataset)?;
            println!(
                "{}: {} examples, acc_target {:.4}, acc_online {:.4}",
                report.dataset, report.examples, report.acc_target, report.acc_online
            );
            if let Some(dir) = out {
                write_json(&dir, "eval.json", &report)?;
            }
        }
        Command::Gradcheck { seed, fault, out } => {
            let fault = fault
                .map(|name| {
                    OpKind::from_name(&name).ok_or_else(|| {
                        let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                        anyhow!(cmcl::Error::invalid("fault", format!("unknown op `{name}`; one of {names:?}")))
                    })
                })
                .transpose()?;
            let suite = harness::cmd_gradcheck(seed, fault)?;
            print!("{suite}");
            if let Some(dir) = out {
                write_json(&dir, "gradcheck.json", &suite)?;
            }
            if !suite.passed() {
                return Ok(ExitCode::from(exit::CHECK_FAILED as u8));
            }
        }
        Command::Benchmark { run, lodo } => {
            let mut cfg = run.load()?;
            if lodo {
                cfg.protocol = Protocol::LeaveOneDomainOut;
            }
            let out = run.out_dir(&cfg);
            let report = harness::cmd_benchmark(&cfg, &out)?;
            print!("{}", report.table());
            println!("wrote {}", out.join("benchmark.json").display());
        }
        Command::GenData(args) => {
            let cfg = args.load()?;
            let out = args.out_dir(&cfg);
            for &seed in &cfg.seeds {
                let dir = if cfg.seeds.len() == 1 { out.clone() } else { out.join(format!("seed-{seed}")) };
                for p in harness::cmd_gen_data(&cfg, seed, &dir)? {
                    println!("{}", p.display());
                }
            }
        }
        Command::ShowConfig { scenario } => {
            let cfg = scenarios::registered(&scenario).ok_or_else(|| {
                cmcl::Error::invalid("scenario", format!("`{scenario}` is not one of {:?}", scenarios::NAMES))
            })?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<cmcl::Error>()
                .map_or(exit::CONFIG, cmcl::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
