use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semcl::cli::{self, ExperimentPlan};
use semcl::{Result, SynthConfig};

/// Class-incremental learning with label-embedding guidance.
#[derive(Parser)]
#[command(name = "semcl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark and print file checksums.
    Synth {
        /// Output directory; relative paths resolve under SEMCL_DATA_DIR.
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        /// Training samples per class.
        #[arg(long)]
        samples: Option<usize>,
        /// Test samples per class.
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        spread: Option<f64>,
        #[arg(long)]
        offset: Option<f64>,
        #[arg(long)]
        cluster_weight: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one run config (JSON) and write reports and checkpoints.
    Run {
        config: PathBuf,
        /// Output root; relative paths resolve under SEMCL_DATA_DIR.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Override the training and class-order seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Print the resolved config and stream without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run an experiment plan (JSON) and print the comparison table.
    Ablate { plan: PathBuf },
    /// Tabulate finished runs from their report.json files.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Write a combined accuracy plot here.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, classes, dim, clusters, samples, test, spread, offset, cluster_weight, seed } => {
            let d = SynthConfig::default();
            let cfg = SynthConfig {
                num_classes: classes.unwrap_or(d.num_classes),
                dim: dim.unwrap_or(d.dim),
                semantic_clusters: clusters.unwrap_or(d.semantic_clusters),
                samples_per_class: samples.unwrap_or(d.samples_per_class),
                test_per_class: test.unwrap_or(d.test_per_class),
                intra_spread: spread.unwrap_or(d.intra_spread),
                class_offset: offset.unwrap_or(d.class_offset),
                cluster_weight: cluster_weight.unwrap_or(d.cluster_weight),
                seed: seed.unwrap_or(d.seed),
            };
            let out = cli::resolve_data_path(&out, Path::new(""));
            println!("seed {}", cfg.seed);
            for digest in cli::cmd_synth(&cfg, &out)? {
                println!("{}  {}", digest.sha256, out.join(&digest.file).display());
            }
        }
        Command::Run { config, out, seed, dry_run } => {
            let mut cfg = cli::load_run_config(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.stream_seed = Some(s);
            }
            let out = cli::resolve_data_path(&out, Path::new(""));
            let outcome = cli::cmd_run(cfg, &config_dir(&config), &out, dry_run)?;
            match outcome.report {
                None => {
                    let resolved = serde_json::json!({ "config": outcome.config, "stream": outcome.stream });
                    println!("{}", serde_json::to_string_pretty(&resolved).expect("serializable"));
                }
                Some(r) => {
                    for t in &r.tasks {
                        println!("task {}: top-1 {:.1}  top-5 {:.1}  ({} classes)", t.task_id, t.top1, t.top5, t.num_seen_classes);
                    }
                    println!("seed {}  Avg {:.1}  Last {:.1}  -> {}", r.seed, r.avg, r.last, outcome.run_dir.display());
                }
            }
        }
        Command::Ablate { plan } => {
            let text = std::fs::read_to_string(&plan).map_err(|e| semcl::Error::Io { path: plan.clone(), source: e })?;
            let mut parsed: ExperimentPlan =
                serde_json::from_str(&text).map_err(|e| semcl::Error::Json { path: plan.clone(), source: e })?;
            parsed.output = cli::resolve_data_path(&parsed.output, Path::new(""));
            let summary = cli::cmd_ablate(&parsed, &config_dir(&plan))?;
            print!("{}", summary.to_markdown());
        }
        Command::Report { reports, svg } => print!("{}", cli::cmd_report(&reports, svg.as_deref())?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
