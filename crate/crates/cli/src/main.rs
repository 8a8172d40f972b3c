use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use melcompress::compress::Technique;
use melcompress::pipeline::{self, RunConfig, Session};

#[derive(Parser)]
#[command(name = "melcompress", version, about = "Pre-train, compress, probe and profile small speech encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; missing keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set encoder.layers=6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory (same as `--set out_dir=...`). Relative paths are
    /// placed under $MELCOMPRESS_RUN_ROOT when it is set.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Target {
    /// Checkpoint to load (default: the run's pre-trained model).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use only the first N blocks.
    #[arg(long)]
    depth: Option<usize>,
    /// Series name under which results are logged and exported.
    #[arg(long)]
    series: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Criterion {
    Weight,
    Gradient,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (or import a manifest) into the run.
    GenCorpus(Common),
    /// Fit the cluster codebook used as masked-prediction targets.
    Kmeans(Common),
    /// Masked-prediction pre-training.
    Pretrain(Common),
    /// Iterative magnitude pruning with loss-triggered retraining.
    PruneWeights {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Iterative attention-head removal.
    PruneHeads {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_enum)]
        criterion: Option<Criterion>,
    },
    /// Iterative removal of feed-forward hidden units.
    PruneFfn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Distil a shallower student from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Train frozen-upstream probes.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// Parameter, MAC and real-time-factor report for a checkpoint.
    Profile {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// Convert the metrics log into CSV tables under exports/.
    ExportPlots(Common),
    /// Print the default config with every field filled in.
    DefaultConfig,
}

fn session(common: &Common, extra: &[String], command: &str) -> Result<Session> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    if let Some(out) = &common.out {
        overrides.push(format!("out_dir={}", out.display()));
    }
    let config = RunConfig::load_file(common.config.as_deref(), &overrides)?;
    let session = Session::open(config, command)?;
    eprintln!("run directory: {}", session.root.display());
    Ok(session)
}

fn series_label(target: &Target, default: &str) -> String {
    match (&target.series, target.depth) {
        (Some(s), _) => s.clone(),
        (None, Some(k)) => format!("prefix-{k}"),
        (None, None) => default.to_string(),
    }
}

fn json(value: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(c) => {
            let summary = pipeline::gen_corpus(&mut session(&c, &[], "gen-corpus")?)?;
            println!(
                "{} utterances, {} frames, dimension {}",
                summary.utterances, summary.frames, summary.dim
            );
        }
        Command::Kmeans(c) => {
            let codebook = pipeline::kmeans(&mut session(&c, &[], "kmeans")?)?;
            println!("codebook with {} centroids", codebook.k());
        }
        Command::Pretrain(c) => {
            let mut s = session(&c, &[], "pretrain")?;
            pipeline::pretrain(&mut s)?;
            println!("{}", s.pretrained_path().display());
        }
        Command::PruneWeights { common, from } => prune(&common, &[], Technique::Weights, from.as_deref(), "prune-weights")?,
        Command::PruneHeads {
            common,
            from,
            criterion,
        } => {
            let extra: Vec<String> = criterion
                .map(|c| match c {
                    Criterion::Weight => "compress.heads.criterion=weight".to_string(),
                    Criterion::Gradient => "compress.heads.criterion=gradient".to_string(),
                })
                .into_iter()
                .collect();
            prune(&common, &extra, Technique::Heads, from.as_deref(), "prune-heads")?
        }
        Command::PruneFfn { common, from } => prune(&common, &[], Technique::Ffn, from.as_deref(), "prune-ffn")?,
        Command::Distill { common, teacher } => {
            let mut s = session(&common, &[], "distill")?;
            let student = pipeline::distill(&mut s, teacher.as_deref())?;
            println!("student with {} layers", student.depth());
        }
        Command::Probe { common, target } => {
            let mut s = session(&common, &[], "probe")?;
            let series = series_label(&target, "probe");
            for r in pipeline::probe(&mut s, target.checkpoint.as_deref(), target.depth, &series)? {
                println!("{}: accuracy {:.4} (dev {:.4})", r.task.name(), r.accuracy, r.dev_accuracy);
            }
        }
        Command::Profile { common, target } => {
            let mut s = session(&common, &[], "profile")?;
            let series = series_label(&target, "profile");
            let report = pipeline::profile(&mut s, target.checkpoint.as_deref(), target.depth, &series)?;
            println!("{}", json(&report)?);
        }
        Command::ExportPlots(c) => {
            for path in pipeline::export_plots(&mut session(&c, &[], "export-plots")?)? {
                println!("{}", path.display());
            }
        }
        Command::DefaultConfig => println!("{}", json(&RunConfig::load(None, &[])?)?),
    }
    Ok(())
}

fn prune(common: &Common, extra: &[String], technique: Technique, from: Option<&Path>, command: &str) -> Result<()> {
    let mut s = session(common, extra, command)?;
    let reports = pipeline::prune(&mut s, technique, from)
        .with_context(|| format!("{} pruning failed", technique.name()))?;
    for r in &reports {
        println!("stage {:>2}  density {:.4}  dev loss {:.4}", r.stage, r.density, r.dev_loss);
    }
    Ok(())
}

/// 2 for configuration and usage errors, 3 for numeric failures, 4 for
/// I/O and format errors.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<melcompress::Error>() {
            return e.exit_code() as u8;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
