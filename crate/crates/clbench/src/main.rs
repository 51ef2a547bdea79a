use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use clbench::archinfo::arch_info;
use clbench::config::{ConfigError, ExperimentConfig};
use clbench::report::report;
use clbench::run::{pin_data_dir, run_config, RunError};
use clbench::sweep::sweep;
use clbench_core::nn::{ArchSpec, Family, Penultimate};

#[derive(Parser)]
#[command(name = "clbench", version, about = "Class-incremental learning runs with a plastic teacher and a stable student")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Resnet,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Gap,
    #[value(name = "avgpool4x4s3")]
    AvgPool4x4S3,
    #[value(name = "gap2x2")]
    Gap2x2,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print parameter count, FLOPs and layers of an architecture as JSON.
    ArchInfo {
        /// sta_net, pla_net, resnet18 or mlp:<depth>,<width>.
        #[arg(long, conflicts_with_all = ["family", "depth", "width"])]
        preset: Option<String>,
        #[arg(long, value_enum, requires_all = ["depth", "width"])]
        family: Option<FamilyArg>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long, default_value_t = 100)]
        classes: usize,
        /// 3x3 stride-1 stem for 32x32 inputs.
        #[arg(long)]
        small_stem: bool,
        /// Input size: a feature count for MLPs or C,H,W.
        #[arg(long = "in", value_delimiter = ',')]
        input: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        penultimate: Option<PoolArg>,
    },
    /// Run an experiment config for each of its order seeds.
    Run {
        config: PathBuf,
        /// Only these order seeds (default: all in the config).
        #[arg(long)]
        seed: Vec<u64>,
        /// MNIST directory; overrides the config and CLBENCH_DATA.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; overrides the config.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Skip seeds whose run directory already exists.
        #[arg(long)]
        resume: bool,
    },
    /// Run every variant x order seed of a config and summarise.
    Sweep {
        config: PathBuf,
        /// Worker processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build comparison tables and plot data from finished runs.
    Report {
        results: PathBuf,
        /// Where to write the report (default: the results directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load(path: &Path, data: Option<&PathBuf>, output: Option<&PathBuf>) -> Result<Vec<ExperimentConfig>, RunError> {
    let mut configs = ExperimentConfig::load(path)?;
    for c in &mut configs {
        pin_data_dir(c, data.map(PathBuf::as_path));
        if let Some(o) = output {
            c.output.dir = o.clone();
        }
    }
    Ok(configs)
}

fn dispatch(cmd: Cmd) -> Result<(), RunError> {
    match cmd {
        Cmd::ArchInfo { preset, family, depth, width, classes, small_stem, input, penultimate } => {
            let spec = build_spec(preset, family, depth, width, classes, small_stem, input, penultimate)?;
            let info = arch_info(&spec)?;
            // A closed stdout (e.g. piped into `head`) is not an error.
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&info).expect("serializes"));
            Ok(())
        }
        Cmd::Run { config, seed, data, output, resume } => {
            let mut configs = load(&config, data.as_ref(), output.as_ref())?;
            if configs.len() != 1 {
                return Err(ConfigError { path: config, line: 0, column: 0, msg: "config defines variants; use `clbench sweep`".into() }.into());
            }
            let mut cfg = configs.remove(0);
            if !seed.is_empty() {
                cfg.order_seeds = seed;
            }
            for out in run_config(&cfg, resume)? {
                let s = &out.summary;
                let opt = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{:.4}", v));
                println!(
                    "{}  AAN {:.2}  FAF {}  FRF {}  LA {:.2}  AIA {:.2}{}",
                    out.dir.display(),
                    s.aan,
                    opt(s.faf),
                    opt(s.frf),
                    s.la,
                    s.aia,
                    if out.skipped { "  (existing)" } else { "" }
                );
            }
            Ok(())
        }
        Cmd::Sweep { config, jobs, data, output } => {
            let configs = load(&config, data.as_ref(), output.as_ref())?;
            let exe = std::env::current_exe().ok();
            let rows = sweep(&configs, jobs, exe.as_deref())?;
            println!("variant\truns\taan\tfaf\tfrf  (mean ± population std)");
            for r in rows {
                let cell = |m: &str| {
                    r.stats.iter().find(|(n, _, _)| n == m).map_or_else(|| "-".into(), |(_, mean, std)| format!("{:.2} ± {:.2}", mean, std))
                };
                println!("{}\t{}\t{}\t{}\t{}", r.variant, r.runs, cell("aan"), cell("faf"), cell("frf"));
            }
            if let Some(c) = configs.first() {
                println!("summary: {}", c.output.dir.join(clbench::sweep::SUMMARY_FILE).display());
            }
            Ok(())
        }
        Cmd::Report { results, out } => {
            let out = out.unwrap_or_else(|| results.clone());
            let d = report(&results, &out)?;
            println!("{} delta rows; report written to {}", d.len(), out.display());
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn build_spec(
    preset: Option<String>,
    family: Option<FamilyArg>,
    depth: Option<usize>,
    width: Option<usize>,
    classes: usize,
    small_stem: bool,
    input: Option<Vec<usize>>,
    penultimate: Option<PoolArg>,
) -> Result<ArchSpec, RunError> {
    let mlp_in = input.as_ref().map_or(784, |v| v.iter().product());
    let mut spec = match (preset, family) {
        (Some(p), _) => ArchSpec::preset(&p, classes, mlp_in).map_err(|e| RunError::Usage(e.to_string()))?,
        (None, Some(FamilyArg::Mlp)) => ArchSpec::mlp(depth.unwrap_or(0), width.unwrap_or(0), mlp_in, classes),
        (None, Some(FamilyArg::Resnet)) => {
            let s = ArchSpec::resnet(depth.unwrap_or(0), width.unwrap_or(0), classes);
            if small_stem {
                s.small_stem()
            } else {
                s
            }
        }
        (None, None) => return Err(RunError::Usage("give --preset or --family with --depth and --width".into())),
    };
    if let Some(p) = penultimate {
        spec.penultimate = match p {
            PoolArg::Gap => Penultimate::Gap,
            PoolArg::AvgPool4x4S3 => Penultimate::AvgPool4x4S3,
            PoolArg::Gap2x2 => Penultimate::Gap2x2,
        };
    }
    if let (Some(shape), Family::Resnet) = (input, spec.family) {
        spec.input_shape = shape;
    }
    spec.validate().map_err(|e| RunError::Usage(e.to_string()))?;
    Ok(spec)
}
