use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use detgen_core::flowgen::{sample_ode_batch, FlowModel};
use detgen_core::harness::{self, ExperimentConfig, Preset, RunDir};
use detgen_core::numkit::Rng;
use detgen_core::promptpolicy::{rollout, PromptPolicy};
use detgen_core::synthworld::{user_prompt, write_samples_jsonl};
use detgen_core::Error;

#[derive(Parser)]
#[command(name = "detgen", version, about = "Detector-guided realism training on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Flow-matching pretraining of the generator on real data.
    PretrainGenerator(RunArgs),
    /// Trains the semantic, feature, held-out and alignment models.
    TrainDetectors {
        #[command(flatten)]
        run: RunArgs,
        /// Also write per-statistic contributions of the semantic detector.
        #[arg(long)]
        explain: bool,
    },
    /// Supervised cold start of the prompt policy.
    SftPolicy(RunArgs),
    /// GRPO on the prompt policy with a frozen generator.
    GrpoStage1(RunArgs),
    /// GRPO on the generator over an SDE window.
    GrpoStage2(RunArgs),
    /// Draws samples from a generator checkpoint as JSON lines on stdout.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(short = 'n', long = "num", default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rewrite each prompt with this policy checkpoint first.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Detector scoring of the bench entries.
    Score(RunArgs),
    /// Arena battles between the scored entries.
    Arena(RunArgs),
    /// Tables and plots over one or more run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs an ablation preset.
    Ablate {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds [default: the config seed and the two after it]
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    diagnostics: Option<PathBuf>,
}

impl Failure {
    fn from_error(e: Error, run_dir: Option<&Path>) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Toml(_) => (2, "config"),
            Error::NonFinite(_) => (3, "numeric"),
            Error::Manifest(_) => (1, "manifest"),
            Error::Io { .. } => (1, "io"),
            _ => (1, "runtime"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
            diagnostics: (code == 3).then(|| run_dir.map(|d| d.join("diagnostics"))).flatten(),
        }
    }

    fn emit(&self) -> ExitCode {
        let mut line = serde_json::json!({
            "error": self.kind,
            "exit_code": self.code,
            "message": self.message,
        });
        if let Some(d) = &self.diagnostics {
            line["diagnostics"] = serde_json::Value::String(d.display().to_string());
        }
        eprintln!("{line}");
        ExitCode::from(self.code)
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| Failure {
        code: 2,
        kind: "config",
        message: e.to_string(),
        diagnostics: None,
    })
}

/// Config plus resolved run directory. The stored config never carries the
/// directory, so a run can be moved or repeated elsewhere.
fn resolve(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let mut cfg = load_config(&args.config)?;
    let dir = args.run_dir.clone().or_else(|| cfg.out_dir.clone()).ok_or_else(|| Failure {
        code: 2,
        kind: "usage",
        message: "no run directory: pass --run-dir or set out_dir in the config".into(),
        diagnostics: None,
    })?;
    cfg.out_dir = None;
    Ok((cfg, dir))
}

fn with_run<T>(
    args: &RunArgs,
    pre: impl FnOnce(&ExperimentConfig) -> detgen_core::Result<()>,
    f: impl FnOnce(&mut RunDir) -> detgen_core::Result<T>,
) -> Result<T, Failure> {
    let (cfg, dir) = resolve(args)?;
    pre(&cfg).map_err(|e| Failure::from_error(e, Some(&dir)))?;
    let mut run = RunDir::open(&dir, &cfg).map_err(|e| Failure::from_error(e, Some(&dir)))?;
    f(&mut run).map_err(|e| Failure::from_error(e, Some(&dir)))
}

fn ok(_: &ExperimentConfig) -> detgen_core::Result<()> {
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) {
    if let Ok(s) = serde_json::to_string(v) {
        println!("{s}");
    }
}

fn sample(checkpoint: &Path, class: usize, n: usize, seed: u64, policy: Option<&Path>) -> detgen_core::Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("-n must be >= 1".into()));
    }
    let model: FlowModel = harness::read_json(checkpoint)?;
    model.validate()?;
    let world = model.world.clone();
    if class >= world.num_classes {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range (the checkpoint has {} classes)",
            world.num_classes
        )));
    }
    let rng = Rng::named(seed, "sample");
    let user = user_prompt(&world, class)?;
    let prompts = match policy {
        Some(p) => {
            let pol: PromptPolicy = harness::read_json(p)?;
            pol.validate()?;
            rollout(&pol, &user, n, &rng.child_named("rewrite"))?.into_iter().map(|t| t.output).collect()
        }
        None => vec![user; n],
    };
    let noise = rng.child_named("noise");
    let mut rngs: Vec<Rng> = (0..n).map(|i| noise.child(i as u64)).collect();
    let samples = sample_ode_batch(&model, &prompts, &mut rngs)?;
    let stdout = std::io::stdout();
    write_samples_jsonl(stdout.lock(), &samples)
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::PretrainGenerator(a) => with_run(&a, ok, harness::pretrain_generator),
        Command::TrainDetectors { run, explain } => {
            let eval = with_run(&run, ok, |r| harness::train_detectors(r, explain))?;
            print_json(&eval);
            Ok(())
        }
        Command::SftPolicy(a) => with_run(&a, ok, harness::sft),
        Command::GrpoStage1(a) => with_run(&a, ok, |r| harness::grpo_stage1(r).map(|_| ())),
        Command::GrpoStage2(a) => with_run(&a, |c| c.validate_stage2(), |r| harness::grpo_stage2(r).map(|_| ())),
        Command::Sample {
            checkpoint,
            class,
            n,
            seed,
            policy,
        } => sample(&checkpoint, class, n, seed, policy.as_deref()).map_err(|e| Failure::from_error(e, None)),
        Command::Score(a) => {
            let scores = with_run(&a, ok, harness::score)?;
            print_json(&scores);
            Ok(())
        }
        Command::Arena(a) => {
            let summary = with_run(&a, ok, harness::arena)?;
            print_json(&summary.rows);
            Ok(())
        }
        Command::Report { runs, out } => {
            let index = harness::report(&runs, &out).map_err(|e| Failure::from_error(e, None))?;
            print_json(&index);
            Ok(())
        }
        Command::Ablate {
            preset,
            config,
            out,
            seeds,
        } => {
            let preset: Preset = preset.parse().map_err(|e| Failure::from_error(e, None))?;
            let mut cfg = load_config(&config)?;
            cfg.out_dir = None;
            let seeds = seeds.unwrap_or_else(|| harness::default_seeds(cfg.seed));
            let result = harness::ablate(preset, &cfg, &seeds, &out).map_err(|e| {
                let mut f = Failure::from_error(e, None);
                if f.code == 3 {
                    f.diagnostics = Some(out.clone());
                }
                f
            })?;
            print_json(&result.rows);
            Ok(())
        }
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("DETGEN_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| Failure {
        code: 2,
        kind: "usage",
        message: format!("DETGEN_THREADS must be a positive integer, got `{v}`"),
        diagnostics: None,
    })?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure {
        code: 1,
        kind: "runtime",
        message: e.to_string(),
        diagnostics: None,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("usage error").to_string();
            return Failure {
                code: 2,
                kind: "usage",
                message: first,
                diagnostics: None,
            }
            .emit();
        }
    };
    if let Err(f) = init_threads() {
        return f.emit();
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.emit(),
    }
}
