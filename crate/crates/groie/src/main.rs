use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use groie::harness::bench::run_bench;
use groie::harness::config::{ExtractorSpec, RunConfig};
use groie::harness::eval::{evaluate, make_dataset, STREAM_EVAL_SCENE};
use groie::harness::train::{load_model, train};
use groie::Result;

#[derive(Parser)]
#[command(
    name = "groie",
    about = "Multi-scale RoI feature extraction: gradient checks, training, evaluation, strategy comparison, timing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify backward-pass gradients against central finite differences.
    Gradcheck {
        /// Relative-error tolerance.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Train a model on synthetic scenes.
    Train {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics.csv, model.ckpt, and scene dumps.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a held-out scene set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Train several strategies over several seeds and tabulate final APs.
    Compare {
        /// Comma-separated strategy names (single,random,sum,sum_plus,concat,groie).
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
        /// Base configuration; strategy and seed are overridden per run.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time forward extraction per strategy at several RoI counts.
    Bench {
        /// Comma-separated RoI counts.
        #[arg(long, value_delimiter = ',', default_value = "8,64,256")]
        rois: Vec<usize>,
        /// Feature channels.
        #[arg(long, default_value_t = 64)]
        channels: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gradcheck { tol } => {
            let reports = groie::gradcheck::standard_suite(tol)?;
            let mut all_pass = true;
            for (name, report) in &reports {
                let worst = report
                    .per_param
                    .iter()
                    .map(|p| p.max_rel_err)
                    .fold(0.0_f64, f64::max);
                println!(
                    "{:<36} {:>12.3e}  {}",
                    name,
                    worst,
                    if report.pass { "PASS" } else { "FAIL" }
                );
                if !report.pass {
                    all_pass = false;
                    print!("{report}");
                }
            }
            if !all_pass {
                return Err(groie::Error::Input("gradient check failed".into()));
            }
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let result = train(&cfg, &out)?;
            for m in &result.metrics {
                println!("{}", m.csv_row());
            }
            println!("checkpoint: {}", result.checkpoint.display());
            println!(
                "final: ap_box_50 {:.4} ap_box_75 {:.4} ap_mask_50 {:.4}",
                result.final_report.ap_box_50,
                result.final_report.ap_box_75,
                result.final_report.ap_mask_50
            );
        }
        Command::Eval { checkpoint, config } => {
            let cfg = RunConfig::load(&config)?;
            let model = load_model(&cfg, &checkpoint)?;
            let scenes = make_dataset(cfg.seed, STREAM_EVAL_SCENE, cfg.eval_scenes);
            let report = evaluate(&model, &scenes, cfg.seed)?;
            println!(
                "scenes {} ap_box_50 {:.4} ap_box_75 {:.4} ap_mask_50 {:.4}",
                report.scenes, report.ap_box_50, report.ap_box_75, report.ap_mask_50
            );
        }
        Command::Compare { strategies, seeds, out, config } => {
            if strategies.is_empty() || seeds.is_empty() {
                return Err(groie::Error::Usage(
                    "compare needs at least one strategy and one seed".into(),
                ));
            }
            let base = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            let mut rows = vec!["strategy,seed,ap_box_50,ap_box_75,ap_mask_50".to_string()];
            for name in &strategies {
                for &seed in &seeds {
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    cfg.extractor = ExtractorSpec::from_name(name);
                    cfg.validate()?;
                    let dir = tempfile_dir(&out, name, seed)?;
                    eprintln!("training {name} seed {seed} ...");
                    let result = train(&cfg, &dir)?;
                    let r = &result.final_report;
                    rows.push(format!(
                        "{name},{seed},{:.6},{:.6},{:.6}",
                        r.ap_box_50, r.ap_box_75, r.ap_mask_50
                    ));
                }
            }
            std::fs::write(&out, rows.join("\n") + "\n")?;
            // Text table: one row per strategy, mean AP over seeds per column.
            println!(
                "{:<10} {:>10} {:>10} {:>10}",
                "strategy", "ap_box_50", "ap_box_75", "ap_mask_50"
            );
            for name in &strategies {
                let vals: Vec<[f64; 3]> = rows[1..]
                    .iter()
                    .map(|r| {
                        let f: Vec<&str> = r.split(',').collect();
                        (f[0], [f[2], f[3], f[4]].map(|v| v.parse::<f64>().unwrap()))
                    })
                    .filter(|(n, _)| n == name)
                    .map(|(_, v)| v)
                    .collect();
                let n = vals.len() as f64;
                let mean = |i: usize| vals.iter().map(|v| v[i]).sum::<f64>() / n;
                println!(
                    "{name:<10} {:>10.4} {:>10.4} {:>10.4}",
                    mean(0),
                    mean(1),
                    mean(2)
                );
            }
        }
        Command::Bench { rois, channels } => {
            use groie::extractor::{Aggregation, BlockChoice, Strategy};
            let strategies = [
                Strategy::SingleLevel,
                Strategy::RandomLevel,
                Strategy::Sum,
                Strategy::SumPlus,
                Strategy::Concat,
                Strategy::Groie {
                    pre: BlockChoice::Conv(5),
                    agg: Aggregation::Sum,
                    post: BlockChoice::Attention,
                },
            ];
            println!("{:<10} {:>6} {:>12} {:>16}", "strategy", "rois", "ms", "workload");
            for row in run_bench(&strategies, &rois, channels)? {
                println!(
                    "{:<10} {:>6} {:>12.2} {:>16}",
                    row.strategy, row.rois, row.millis, row.workload
                );
            }
        }
    }
    Ok(())
}

/// Per-run output directory next to the compare CSV.
fn tempfile_dir(out_csv: &std::path::Path, strategy: &str, seed: u64) -> Result<PathBuf> {
    let parent = out_csv.parent().filter(|p| !p.as_os_str().is_empty());
    let dir = match parent {
        Some(p) => p.join(format!("run_{strategy}_{seed}")),
        None => PathBuf::from(format!("run_{strategy}_{seed}")),
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
