use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use weatherocc::envgate::FusionStrategy;
use weatherocc::grid::GridSpec;
use weatherocc::pipeline::{
    bench_fusion, bench_table, compare, evaluate, gradcheck, load_checkpoint, save_checkpoint,
    train, Dataset, EpochLog, EvalOptions, PromptSource, TrainConfig,
};
use weatherocc::scenegen::{generate_dataset, SceneConfig, WeatherMix};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const THREADS_VAR: &str = "WOCC_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "weatherocc",
    version,
    about = "Weather-gated camera/LiDAR occupancy fusion at desk scale"
)]
struct Cli {
    /// Emit tab-separated tables instead of aligned text.
    #[arg(long, global = true)]
    tsv: bool,
    /// Serial execution (default).
    #[arg(long, global = true, conflicts_with = "fast")]
    deterministic: bool,
    /// Run evaluation and compare jobs on worker threads (count from WOCC_THREADS).
    #[arg(long, global = true)]
    fast: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train and compare fusion strategies.
    Compare(CompareArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Time the fusion operation alone.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct GenArgs {
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fractions of clear-day, clear-night, rainy-day, rainy-night scenes.
    #[arg(long, default_value_t = WeatherMix::default())]
    mix: WeatherMix,
    #[arg(long)]
    out: PathBuf,
    /// Config file supplying degradation parameters.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct TrainOverrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<FusionStrategy>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_weather: Option<f64>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "model.wock")]
    out: PathBuf,
    /// Epoch log file; defaults to the checkpoint path with `.log` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Add the Rainy/Day/Night table.
    #[arg(long)]
    by_condition: bool,
    /// Select prompts from ground-truth weather flags instead of predictions.
    #[arg(long)]
    gt_prompts: bool,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct CompareArgs {
    #[arg(long, value_delimiter = ',', default_value = "addition,concat,gated")]
    strategies: Vec<FusionStrategy>,
    #[arg(long)]
    data: PathBuf,
    /// Held-out scenes; defaults to the training data.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check a single named op.
    #[arg(long, conflicts_with = "full")]
    op: Option<String>,
    /// Check every op and every trainable pathway.
    #[arg(long)]
    full: bool,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct BenchArgs {
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Grid preset (`desk` or `paper`); `all` measures both plus a doubled desk grid.
    #[arg(long, default_value = "all")]
    grid: String,
    #[arg(long, default_value_t = 50)]
    reps: usize,
}

fn threads(fast: bool) -> usize {
    if !fast {
        return 1;
    }
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1)
}

fn resolve(o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = o.strategy {
        cfg.strategy = s;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.lr = lr;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(l) = o.lambda_weather {
        cfg.lambda_weather = l;
    }
    if let Some(p) = &o.embeddings {
        cfg.embeddings = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn header(out: &mut String, lines: &[(&str, String)], cfg: Option<&TrainConfig>) {
    out.push_str("# resolved config\n");
    for (k, v) in lines {
        let _ = writeln!(out, "{k} = {v}");
    }
    if let Some(c) = cfg {
        out.push_str(&c.echo());
    }
    out.push('\n');
}

fn emit(s: &str) {
    print!("{s}");
    let _ = std::io::stdout().flush();
}

fn run(cli: Cli) -> Result<()> {
    let mode = if cli.fast { "fast" } else { "deterministic" };
    let mut out = String::new();
    match cli.command {
        Command::Gen(a) => {
            let mut scene = SceneConfig::default();
            if let Some(p) = &a.config {
                scene.degradation = TrainConfig::from_file(p)?.degradation;
            }
            let cfg = TrainConfig {
                degradation: scene.degradation,
                ..Default::default()
            };
            header(
                &mut out,
                &[
                    ("command", "gen".into()),
                    ("scenes", a.scenes.to_string()),
                    ("seed", a.seed.to_string()),
                    ("mix", a.mix.to_string()),
                    ("out", a.out.display().to_string()),
                ],
                None,
            );
            for line in cfg
                .echo()
                .lines()
                .skip_while(|l| !l.starts_with("night_gain"))
            {
                let _ = writeln!(out, "{line}");
            }
            out.push('\n');
            emit(&out);
            if a.scenes == 0 {
                bail!(weatherocc::Error::Config {
                    key: "scenes".into(),
                    msg: "must be >= 1".into()
                });
            }
            let entries = generate_dataset(&a.out, a.scenes, a.seed, a.mix, &scene)?;
            println!("wrote {} scenes to {}", entries.len(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = resolve(&a.overrides)?;
            let log_path = a.log.clone().unwrap_or_else(|| {
                let mut p = a.out.clone().into_os_string();
                p.push(".log");
                p.into()
            });
            header(
                &mut out,
                &[
                    ("command", "train".into()),
                    ("mode", mode.into()),
                    ("data", a.data.display().to_string()),
                    ("out", a.out.display().to_string()),
                ],
                Some(&cfg),
            );
            emit(&out);
            let data = Dataset::load(&a.data, &cfg)?;
            let mut log = String::from(EpochLog::HEADER);
            log.push('\n');
            println!("{}", EpochLog::HEADER);
            let (model, _) = train(&data, &cfg, |e| {
                println!("{}", e.tsv());
                log.push_str(&e.tsv());
                log.push('\n');
            })?;
            fs::write(&log_path, &log)
                .with_context(|| format!("writing {}", log_path.display()))?;
            save_checkpoint(&a.out, &model)?;
            println!("checkpoint {}", a.out.display());
        }
        Command::Eval(a) => {
            let model = load_checkpoint(&a.ckpt)?;
            header(
                &mut out,
                &[
                    ("command", "eval".into()),
                    ("mode", mode.into()),
                    ("ckpt", a.ckpt.display().to_string()),
                    ("data", a.data.display().to_string()),
                    (
                        "prompts",
                        if a.gt_prompts {
                            "ground-truth"
                        } else {
                            "predicted"
                        }
                        .into(),
                    ),
                ],
                Some(&model.config),
            );
            emit(&out);
            let data = Dataset::load(&a.data, &model.config)?;
            let opts = EvalOptions {
                prompts: if a.gt_prompts {
                    PromptSource::GroundTruth
                } else {
                    PromptSource::Predicted
                },
                threads: threads(cli.fast),
            };
            let report = evaluate(&model, &data.scenes, opts)?;
            emit(&report.render(a.by_condition, cli.tsv));
        }
        Command::Compare(a) => {
            let cfg = resolve(&a.overrides)?;
            let eval_dir = a.eval_data.clone().unwrap_or_else(|| a.data.clone());
            let names: Vec<String> = a.strategies.iter().map(|s| s.to_string()).collect();
            header(
                &mut out,
                &[
                    ("command", "compare".into()),
                    ("mode", mode.into()),
                    ("strategies", names.join(",")),
                    ("seeds", a.seeds.to_string()),
                    ("data", a.data.display().to_string()),
                    ("eval_data", eval_dir.display().to_string()),
                ],
                Some(&cfg),
            );
            emit(&out);
            let train_data = Dataset::load(&a.data, &cfg)?;
            let eval_data = if eval_dir == a.data {
                train_data.clone()
            } else {
                Dataset::load(&eval_dir, &cfg)?
            };
            let opts = EvalOptions {
                prompts: PromptSource::Predicted,
                threads: threads(cli.fast),
            };
            let cmp = compare(
                &a.strategies,
                &train_data,
                &eval_data,
                &cfg,
                a.seeds,
                opts,
                |r| {
                    eprintln!("finished {} seed {}", r.strategy, r.seed);
                },
            )?;
            println!("{}", cmp.runs_table().render(cli.tsv));
            println!("{}", cmp.summary_table().render(cli.tsv));
            let strategies = cmp.strategies();
            if strategies.contains(&FusionStrategy::Gated) {
                for &other in strategies.iter().filter(|&&s| s != FusionStrategy::Gated) {
                    println!(
                        "{}",
                        cmp.margin_table(FusionStrategy::Gated, other)
                            .render(cli.tsv)
                    );
                }
                emit(&cmp.trust_table().render(cli.tsv));
            }
        }
        Command::Gradcheck(a) => {
            let ops: Vec<&str> = match (&a.op, a.full) {
                (Some(op), _) => vec![op.as_str()],
                (None, true) => gradcheck::all_ops(),
                (None, false) => gradcheck::PRIMITIVE_OPS.to_vec(),
            };
            header(
                &mut out,
                &[
                    ("command", "gradcheck".into()),
                    ("step", format!("{:e}", gradcheck::GRADCHECK_STEP)),
                    ("tolerance", format!("{:e}", gradcheck::GRADCHECK_TOLERANCE)),
                    ("ops", ops.join(",")),
                ],
                None,
            );
            emit(&out);
            let rows = gradcheck::run_checks(&ops)?;
            emit(&gradcheck::gradcheck_table(&rows).render(cli.tsv));
            let failed: Vec<&str> = rows
                .iter()
                .filter(|r| !r.passed())
                .map(|r| r.op.as_str())
                .collect();
            if !failed.is_empty() {
                bail!("gradient check failed for: {}", failed.join(", "));
            }
        }
        Command::Bench(a) => {
            header(
                &mut out,
                &[
                    ("command", "bench".into()),
                    ("channels", a.channels.to_string()),
                    ("grid", a.grid.clone()),
                    ("reps", a.reps.to_string()),
                ],
                None,
            );
            emit(&out);
            let grids: Vec<[usize; 3]> = match a.grid.as_str() {
                "all" => {
                    let d = GridSpec::desk().dims;
                    vec![d, [d[0], d[1], 2 * d[2]], GridSpec::paper().dims]
                }
                name => match GridSpec::preset(name) {
                    Some(s) => vec![s.dims],
                    None => bail!(weatherocc::Error::Config {
                        key: "grid".into(),
                        msg: format!("unknown preset `{name}` (expected desk, paper or all)"),
                    }),
                },
            };
            let mut rows = Vec::new();
            for dims in grids {
                rows.extend(bench_fusion(
                    &FusionStrategy::ALL,
                    a.channels,
                    dims,
                    a.reps,
                )?);
            }
            emit(&bench_table(&rows).render(cli.tsv));
        }
    }
    Ok(())
}

fn is_usage_error(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<weatherocc::Error>(),
        Some(weatherocc::Error::Config { .. })
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}
