use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use waypoint_rl::harness::{
    ablation_suite, emit_plots, label_log, moka_comparison, read_curves, run_experiment, CurveRow, ExperimentConfig,
    HarnessError, ProviderKind,
};
use waypoint_rl::reward::Formulation;

#[derive(Parser)]
#[command(name = "waypoint-rl", version, about = "Waypoint-shaped rewards for reset-free RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Waypoint provider: oracle, file or remote.
    #[arg(long, global = true)]
    provider: Option<ProviderKind>,
    /// Reward formulation: dense_only, sparse_only or combined.
    #[arg(long, global = true)]
    formulation: Option<Formulation>,
    /// Online environment-step budget.
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed with one formulation.
    Run,
    /// All formulations under the three demonstration regimes.
    Ablate,
    /// Open-loop waypoint execution against the fine-tuned policy.
    Moka,
    /// Relabel a JSONL episode log.
    Label {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Render SVG plots from learning-curve CSVs.
    Plot {
        /// Curve files; each becomes one plot named after its directory.
        /// Without inputs the ablation curves under the output directory are used.
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(p) = common.provider {
        cfg.provider = p;
    }
    if let Some(f) = common.formulation {
        cfg.formulation = f;
    }
    if let Some(s) = common.steps {
        cfg.online_steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ablation_curves(out: &Path) -> Result<Vec<(String, Vec<CurveRow>)>, HarnessError> {
    let root = out.join("ablation");
    let mut sets = Vec::new();
    let mut regimes: Vec<_> = std::fs::read_dir(&root)
        .map_err(|e| HarnessError::Io {
            path: root.clone(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != "plots"))
        .collect();
    regimes.sort();
    for dir in regimes {
        let mut rows = Vec::new();
        for f in Formulation::ALL {
            let path = dir.join(f.as_str()).join("curves.csv");
            if path.exists() {
                rows.extend(read_curves(&path)?);
            }
        }
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        sets.push((name, rows));
    }
    Ok(sets)
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    let cfg = load(&cli.common)?;
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::Run => {
            for r in run_experiment(&cfg, &out)? {
                println!(
                    "seed {} {}: pretrained {:.1}% final {:.1}%",
                    r.seed,
                    r.formulation,
                    100.0 * r.pretrained_success,
                    100.0 * r.final_success
                );
            }
        }
        Command::Ablate => {
            ablation_suite(&cfg, &out, |regime, f, r| {
                println!(
                    "{} {} seed {}: pretrained {:.1}% final {:.1}%",
                    regime.name,
                    f,
                    r.seed,
                    100.0 * r.pretrained_success,
                    100.0 * r.final_success
                );
            })?;
            println!("wrote {}", out.join("ablation").display());
        }
        Command::Moka => {
            let c = moka_comparison(&cfg, &out, None)?;
            println!("moka precise    {:.1}%", 100.0 * c.moka_precise);
            println!("moka perturbed  {:.1}%", 100.0 * c.moka_perturbed);
            println!("fine-tuned      {:.1}%", 100.0 * c.finetuned_perturbed);
        }
        Command::Label { input, output } => {
            let seed = cfg.seeds[0];
            let n = label_log(&cfg, &input, &output, cfg.formulation, seed, &out)?;
            println!("labeled {n} episodes into {}", output.display());
        }
        Command::Plot { input } => {
            let sets = if input.is_empty() {
                ablation_curves(&out)?
            } else {
                input
                    .iter()
                    .map(|p| {
                        let name = p
                            .parent()
                            .and_then(|d| d.file_name())
                            .map_or_else(|| "curves".to_string(), |n| n.to_string_lossy().into_owned());
                        Ok((name, read_curves(p)?))
                    })
                    .collect::<Result<Vec<_>, HarnessError>>()?
            };
            let dir = out.join("plots");
            for p in emit_plots(&sets, &dir)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
