use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use projood_core::centroids::{load_centroids, save_centroids};
use projood_core::config::ExperimentConfig;
use projood_core::fusion::{FusionModel, FEATURES};
use projood_core::model::load_checkpoint;
use projood_core::pipeline::{self, AblationAxis};
use projood_core::scoring::{read_scores_csv, write_scores_csv, FEATURE_NAMES};
use projood_core::{Error, Result};

#[derive(Parser)]
#[command(name = "projood", version, about = "Subspace-projection OOD detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the class centroids.
    GenCentroids {
        #[command(flatten)]
        common: Common,
    },
    /// Train the network on the ID training split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Use these centroids instead of generating them.
        #[arg(long)]
        centroids: Option<PathBuf>,
    },
    /// Score datasets with a trained checkpoint.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `id_train`, `id_test`, an OOD source name, or `<name>:fit`.
        #[arg(required = true)]
        datasets: Vec<String>,
    },
    /// Fit the fusion classifier on ID-train scores and one reference OOD.
    Fuse {
        #[command(flatten)]
        common: Common,
        id_scores: PathBuf,
        reference_ood_scores: PathBuf,
    },
    /// Evaluate every score on each OOD score file.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Fusion model; without it the S_svm rows are skipped.
        #[arg(long)]
        fusion: Option<PathBuf>,
        id_scores: PathBuf,
        #[arg(required = true)]
        ood_scores: Vec<PathBuf>,
    },
    /// Rerun the pipeline under each setting of one axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// bn_relu, bias_mode or fusion_kind.
        #[arg(long)]
        axis: String,
    },
    /// Centroids, training, scoring, fusion and evaluation in one go.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok((cfg, out))
    }
}

/// Dataset name recorded in reports for a score file: the file stem without
/// the `ood_` / `fit_` prefix.
fn dataset_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    for prefix in ["ood_", "fit_"] {
        if let Some(rest) = stem.strip_prefix(prefix) {
            return rest.to_string();
        }
    }
    stem
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenCentroids { common } => {
            let (cfg, out) = common.load()?;
            let classes = pipeline::class_count(&cfg, None)?;
            let set = pipeline::make_centroids(&cfg, classes)?;
            let path = out.join("centroids.bin");
            save_centroids(&set, &path)?;
            println!(
                "centroids: {} classes in {} dimensions, min angle {:.6} rad -> {}",
                set.class_count(),
                set.feature_dim(),
                set.min_pairwise_angle(),
                path.display()
            );
        }
        Command::Train { common, centroids } => {
            let (cfg, out) = common.load()?;
            let (id_train, _) = pipeline::load_id(&cfg)?;
            let set = match centroids {
                Some(p) => load_centroids(p)?,
                None => pipeline::make_centroids(&cfg, pipeline::class_count(&cfg, Some(&id_train))?)?,
            };
            save_centroids(&set, out.join("centroids.bin"))?;
            let (_, report) = pipeline::train_model(&cfg, &set, &id_train, Some(&out))?;
            print!("{}", report.to_text());
        }
        Command::Score {
            common,
            checkpoint,
            datasets,
        } => {
            let (cfg, out) = common.load()?;
            let model = load_checkpoint(&checkpoint, None)?;
            let dir = out.join("scores");
            for reference in &datasets {
                let (ds, label) = pipeline::dataset_by_ref(&cfg, reference)?;
                let records = pipeline::score(&cfg, &model, &ds, label)?;
                let path = dir.join(pipeline::score_file_name(reference));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_scores_csv(&records, &path)?;
                if ds.labels.is_some() {
                    println!(
                        "{reference}: {} samples, accuracy {:.6} -> {}",
                        records.len(),
                        pipeline::accuracy(&records, &ds)?,
                        path.display()
                    );
                } else {
                    println!("{reference}: {} samples -> {}", records.len(), path.display());
                }
            }
        }
        Command::Fuse {
            common,
            id_scores,
            reference_ood_scores,
        } => {
            let (cfg, out) = common.load()?;
            let id = read_scores_csv(&id_scores)?;
            let reference = read_scores_csv(&reference_ood_scores)?;
            let fit = pipeline::fuse(&cfg, &id, &reference)?;
            let path = out.join("fusion.bin");
            fit.model.save(&path)?;
            println!("fusion: {} over {}", fit.model.kind.name(), FEATURE_NAMES.join(", "));
            for k in 0..FEATURES {
                println!(
                    "  {}: min {:.8e} max {:.8e}",
                    FEATURE_NAMES[k], fit.model.standardizer.min[k], fit.model.standardizer.max[k]
                );
            }
            if let Some(kkt) = fit.kkt {
                println!(
                    "  kkt residuals: bound {:.3e} free {:.3e} upper {:.3e}, dual sum {:.3e}",
                    kkt.bound_violation, kkt.free_violation, kkt.upper_violation, kkt.dual_sum
                );
            }
            println!("-> {}", path.display());
        }
        Command::Eval {
            common,
            fusion,
            id_scores,
            ood_scores,
        } => {
            let (cfg, out) = common.load()?;
            let fusion = fusion.map(FusionModel::load).transpose()?;
            let id = read_scores_csv(&id_scores)?;
            let ood = ood_scores
                .iter()
                .map(|p| Ok((dataset_name(p), read_scores_csv(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let reports = pipeline::evaluate(
                &cfg.datasets.id,
                &id,
                &ood,
                fusion.as_ref(),
                cfg.scoring.histogram_bins,
            )?;
            pipeline::write_reports(&out.join("reports"), &reports)?;
            print!("{}", pipeline::summary_csv(&reports));
        }
        Command::Ablate { common, axis } => {
            let axis = AblationAxis::parse(&axis)?;
            let (cfg, out) = common.load()?;
            let report = pipeline::ablate(&cfg, axis, &out)?;
            print!("{}", report.to_csv());
        }
        Command::Run { common } => {
            let (cfg, out) = common.load()?;
            let summary = pipeline::run(&cfg, &out)?;
            print!("{}", summary.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
