//! Experiment stages and the end-to-end run.
//!
//! Each stage is a function of the config and its upstream artifacts, so the
//! CLI can run them one at a time and the full run composes them.
//!
//! Output layout under the run directory:
//!
//! ```text
//! centroids.bin
//! checkpoint_epoch{E}.bin, checkpoint_final.bin
//! train_report.txt, train_loss.csv
//! scores/{id_train,id_test,fit_<ref>,ood_<name>}.csv
//! fusion.bin
//! reports/eval_<ood>_<score>.txt, reports/hist_<ood>_<score>.csv
//! reports/summary.csv, run_summary.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::centroids::{generator_registry, save_centroids, CentroidSet};
use crate::config::{derive_seed, ExperimentConfig};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::fusion::{fit_fusion, FusionFit, FusionKind, FusionModel, KktReport};
use crate::metrics::{fmt_float, EvalReport, REPORT_CSV_HEADER};
use crate::model::{train, NetworkModel, TrainReport};
use crate::scoring::{
    projector_from_weights, read_scores_csv, score_dataset, score_registry, write_scores_csv, BiasMode, ProjectionOperator,
    SampleLabel, ScoreRecord,
};

/// Score columns of every evaluation, in report order.
pub const SCORE_NAMES: [&str; 6] = ["S_gamma", "S_norm", "S_alpha", "S_beta", "S_svm", "baseline"];

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Which draw of an OOD source to produce. Fusion fitting and testing use
/// independent samples of the same distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Draw {
    Fit,
    Test,
}

/// The ID data split into (train, test).
pub fn load_id(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let name = &cfg.datasets.id;
    let spec = &cfg.datasets.sources[name];
    let full = data::generate(name, spec, derive_seed(cfg.seed, &format!("data:{name}")))?;
    if full.labels.is_none() {
        return Err(Error::InvalidConfig(format!("ID dataset `{name}` has no labels")));
    }
    let [tr, te] = cfg.datasets.split;
    let (train, test) = data::split(&full, (tr, te), derive_seed(cfg.seed, "split"))?;
    Ok((train.with_name(format!("{name}_train")), test.with_name(name.clone())))
}

pub fn load_ood(cfg: &ExperimentConfig, name: &str, draw: Draw) -> Result<Dataset> {
    let spec = cfg
        .datasets
        .sources
        .get(name)
        .ok_or_else(|| Error::InvalidConfig(format!("dataset `{name}` is not defined")))?;
    let tag = match draw {
        Draw::Fit => "fit",
        Draw::Test => "test",
    };
    data::generate(name, spec, derive_seed(cfg.seed, &format!("data:{name}:{tag}")))
}

/// Resolves a CLI dataset reference: `id_train`, `id_test`, `<name>` (test
/// draw) or `<name>:fit`.
pub fn dataset_by_ref(cfg: &ExperimentConfig, reference: &str) -> Result<(Dataset, SampleLabel)> {
    match reference {
        "id_train" => Ok((load_id(cfg)?.0, SampleLabel::Id)),
        "id_test" => Ok((load_id(cfg)?.1, SampleLabel::Id)),
        other => {
            let (name, draw) = match other.strip_suffix(":fit") {
                Some(n) => (n, Draw::Fit),
                None => (other, Draw::Test),
            };
            if name == cfg.datasets.id {
                return Err(Error::InvalidConfig(format!(
                    "use id_train or id_test to refer to the ID dataset `{name}`"
                )));
            }
            Ok((load_ood(cfg, name, draw)?, SampleLabel::Ood))
        }
    }
}

/// Score file name for a dataset reference, matching the full run's layout.
pub fn score_file_name(reference: &str) -> String {
    match reference {
        "id_train" | "id_test" => format!("{reference}.csv"),
        other => match other.strip_suffix(":fit") {
            Some(name) => format!("fit_{name}.csv"),
            None => format!("ood_{other}.csv"),
        },
    }
}

pub fn class_count(cfg: &ExperimentConfig, id_train: Option<&Dataset>) -> Result<usize> {
    if let Some(c) = cfg.centroids.classes {
        return Ok(c);
    }
    let c = match id_train {
        Some(ds) => ds.class_count(),
        None => load_id(cfg)?.0.class_count(),
    };
    if c < 2 {
        return Err(Error::InvalidConfig(format!("ID data has {c} classes; need at least 2")));
    }
    Ok(c)
}

pub fn make_centroids(cfg: &ExperimentConfig, classes: usize) -> Result<CentroidSet> {
    generator_registry()
        .get(&cfg.centroids.generator)?
        .generate(classes, cfg.network.pedcc_dim, &cfg.generator_options())
}

/// Trains on the ID training split. Returns the model used for scoring (the
/// intermediate snapshot unless the config says otherwise) and the report.
pub fn train_model(
    cfg: &ExperimentConfig,
    centroids: &CentroidSet,
    id_train: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(NetworkModel, TrainReport)> {
    let mut model = NetworkModel::new(cfg.network_for_training(), centroids.clone())?;
    if let Some(dir) = out_dir {
        create_dir(dir)?;
    }
    let outcome = train(&mut model, id_train, &cfg.loss, out_dir)?;
    if let Some(dir) = out_dir {
        write(&dir.join("train_report.txt"), &outcome.report.to_text())?;
        write(&dir.join("train_loss.csv"), &outcome.report.to_csv())?;
    }
    let scoring = if cfg.scoring.use_checkpoint_snapshot {
        outcome.snapshot
    } else {
        model
    };
    Ok((scoring, outcome.report))
}

pub fn projector(cfg: &ExperimentConfig, model: &NetworkModel) -> Result<ProjectionOperator> {
    projector_from_weights(
        model.fc1_weight(),
        model.feature_dim(),
        model.pedcc_dim(),
        model.fc1_bias(),
        cfg.scoring.bias_mode,
    )
}

pub fn score(cfg: &ExperimentConfig, model: &NetworkModel, ds: &Dataset, label: SampleLabel) -> Result<Vec<ScoreRecord>> {
    let proj = projector(cfg, model)?;
    score_dataset(model, &proj, ds, label, cfg.loss.scale)
}

pub fn fuse(cfg: &ExperimentConfig, id_train: &[ScoreRecord], reference: &[ScoreRecord]) -> Result<FusionFit> {
    let fit = fit_fusion(id_train, reference, &cfg.fusion, derive_seed(cfg.seed, "fusion"))?;
    if let Some(k) = &fit.kkt {
        log::info!(
            "fusion {}: {} SMO iterations, KKT residuals {:.2e}/{:.2e}/{:.2e}",
            cfg.fusion.kind.name(),
            fit.iterations,
            k.bound_violation,
            k.free_violation,
            k.upper_violation
        );
    }
    Ok(fit)
}

/// Fraction of labelled records whose predicted class matches.
pub fn accuracy(records: &[ScoreRecord], ds: &Dataset) -> Result<f64> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter(format!("dataset {} has no labels", ds.name)))?;
    if records.len() != labels.len() {
        return Err(Error::CountMismatch(format!("{} records for {} samples", records.len(), labels.len())));
    }
    if records.is_empty() {
        return Err(Error::EmptyInput("no records".into()));
    }
    let hits = records.iter().zip(labels).filter(|(r, &l)| r.predicted_class == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Scores of one named metric; `S_svm` needs the fusion model.
pub fn score_values(name: &str, records: &[ScoreRecord], fusion: Option<&FusionModel>) -> Result<Vec<f64>> {
    if name == "S_svm" {
        let f = fusion.ok_or_else(|| Error::MissingArtifact("S_svm needs a fusion model".into()))?;
        return Ok(records.iter().map(|r| f.score(r)).collect());
    }
    let s = score_registry().get(name)?;
    Ok(records.iter().map(|r| s.score(r)).collect())
}

/// One report per (OOD set, score). `S_svm` is skipped without a fusion model.
pub fn evaluate(
    id_name: &str,
    id_scores: &[ScoreRecord],
    ood: &[(String, Vec<ScoreRecord>)],
    fusion: Option<&FusionModel>,
    bins: usize,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for (ood_name, ood_scores) in ood {
        for name in SCORE_NAMES {
            if name == "S_svm" && fusion.is_none() {
                continue;
            }
            let a = score_values(name, id_scores, fusion)?;
            let b = score_values(name, ood_scores, fusion)?;
            reports.push(EvalReport::compute(id_name, ood_name, name, &a, &b, bins)?);
        }
    }
    Ok(reports)
}

pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_rows());
    }
    s
}

pub fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    create_dir(dir)?;
    for r in reports {
        let stem = format!("{}_{}", r.ood_dataset, r.score_name);
        write(&dir.join(format!("eval_{stem}.txt")), &r.to_text())?;
        write(&dir.join(format!("hist_{stem}.csv")), &r.histogram_csv())?;
    }
    write(&dir.join("summary.csv"), &summary_csv(reports))
}

pub fn find_report<'a>(reports: &'a [EvalReport], ood: &str, score: &str) -> Option<&'a EvalReport> {
    reports.iter().find(|r| r.ood_dataset == ood && r.score_name == score)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub id_accuracy: f64,
    pub train: TrainReport,
    pub reports: Vec<EvalReport>,
    pub kkt: Option<KktReport>,
    pub out_dir: PathBuf,
}

impl RunSummary {
    pub fn auroc(&self, ood: &str, score: &str) -> Option<f64> {
        find_report(&self.reports, ood, score).map(|r| r.auroc)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "id_test_accuracy: {}", fmt_float(self.id_accuracy)).unwrap();
        if let Some(k) = &self.kkt {
            writeln!(
                s,
                "fusion_kkt: bound {} free {} upper {} dual_sum {}",
                fmt_float(k.bound_violation),
                fmt_float(k.free_violation),
                fmt_float(k.upper_violation),
                fmt_float(k.dual_sum)
            )
            .unwrap();
        }
        for r in &self.reports {
            writeln!(
                s,
                "{} {}: auroc {} tnr95 {} tnr98 {}",
                r.ood_dataset,
                r.score_name,
                fmt_float(r.auroc),
                fmt_float(r.tnr_at_tpr95),
                fmt_float(r.tnr_at_tpr98)
            )
            .unwrap();
        }
        s
    }
}

/// Everything downstream of training, for reuse across ablation settings.
struct Scored {
    id_train: Vec<ScoreRecord>,
    id_test: Vec<ScoreRecord>,
    reference: Vec<ScoreRecord>,
    test_ood: Vec<(String, Vec<ScoreRecord>)>,
    accuracy: f64,
}

struct Inputs {
    id_train: Dataset,
    id_test: Dataset,
    reference: Dataset,
    test_ood: Vec<Dataset>,
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    let (id_train, id_test) = load_id(cfg)?;
    let reference = load_ood(cfg, &cfg.datasets.reference_ood, Draw::Fit)?;
    let test_ood = cfg
        .datasets
        .test_ood
        .iter()
        .map(|n| load_ood(cfg, n, Draw::Test))
        .collect::<Result<Vec<_>>>()?;
    Ok(Inputs {
        id_train,
        id_test,
        reference,
        test_ood,
    })
}

/// Scores every dataset and writes the CSVs. Downstream stages use the
/// records as read back from those files, so a run split into CLI steps
/// sees exactly the same numbers.
fn score_all(cfg: &ExperimentConfig, model: &NetworkModel, inputs: &Inputs, out: &Path) -> Result<Scored> {
    let dir = out.join("scores");
    create_dir(&dir)?;
    let dump = |ds: &Dataset, label: SampleLabel, file: String| -> Result<Vec<ScoreRecord>> {
        let path = dir.join(file);
        write_scores_csv(&score(cfg, model, ds, label)?, &path)?;
        read_scores_csv(&path)
    };
    let id_train = dump(&inputs.id_train, SampleLabel::Id, "id_train.csv".into())?;
    let id_test = dump(&inputs.id_test, SampleLabel::Id, "id_test.csv".into())?;
    let reference = dump(
        &inputs.reference,
        SampleLabel::Ood,
        format!("fit_{}.csv", cfg.datasets.reference_ood),
    )?;
    let mut test_ood = Vec::new();
    for ds in &inputs.test_ood {
        let rec = dump(ds, SampleLabel::Ood, format!("ood_{}.csv", ds.name))?;
        test_ood.push((ds.name.clone(), rec));
    }
    let accuracy = accuracy(&id_test, &inputs.id_test)?;
    Ok(Scored {
        id_train,
        id_test,
        reference,
        test_ood,
        accuracy,
    })
}

fn fuse_and_evaluate(cfg: &ExperimentConfig, scored: &Scored, train: TrainReport, out: &Path) -> Result<RunSummary> {
    let fit = fuse(cfg, &scored.id_train, &scored.reference)?;
    fit.model.save(out.join("fusion.bin"))?;
    let reports = evaluate(
        &cfg.datasets.id,
        &scored.id_test,
        &scored.test_ood,
        Some(&fit.model),
        cfg.scoring.histogram_bins,
    )?;
    write_reports(&out.join("reports"), &reports)?;
    let summary = RunSummary {
        id_accuracy: scored.accuracy,
        train,
        reports,
        kkt: fit.kkt,
        out_dir: out.to_path_buf(),
    };
    write(&out.join("run_summary.txt"), &summary.to_text())?;
    Ok(summary)
}

/// Centroids, training, scoring, fusion and evaluation in one go.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    create_dir(out)?;
    let inputs = load_inputs(cfg)?;
    let classes = class_count(cfg, Some(&inputs.id_train))?;
    let centroids = make_centroids(cfg, classes)?;
    save_centroids(&centroids, out.join("centroids.bin"))?;
    let (model, train_report) = train_model(cfg, &centroids, &inputs.id_train, Some(out))?;
    let scored = score_all(cfg, &model, &inputs, out)?;
    log::info!("ID test accuracy {:.4}", scored.accuracy);
    fuse_and_evaluate(cfg, &scored, train_report, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    BnRelu,
    BiasMode,
    FusionKind,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bn_relu" => Ok(AblationAxis::BnRelu),
            "bias_mode" => Ok(AblationAxis::BiasMode),
            "fusion_kind" => Ok(AblationAxis::FusionKind),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation axis `{other}`; expected bn_relu, bias_mode or fusion_kind"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::BnRelu => "bn_relu",
            AblationAxis::BiasMode => "bias_mode",
            AblationAxis::FusionKind => "fusion_kind",
        }
    }

    /// The score the axis is compared on.
    pub fn score_name(&self) -> &'static str {
        match self {
            AblationAxis::BnRelu | AblationAxis::BiasMode => "S_gamma",
            AblationAxis::FusionKind => "S_svm",
        }
    }

    /// Named settings and the config each one runs with.
    pub fn settings(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationAxis::BnRelu => vec![
                ("on".into(), with(&|c| c.network.final_bn_relu = true)),
                ("off".into(), with(&|c| c.network.final_bn_relu = false)),
            ],
            AblationAxis::BiasMode => vec![
                (
                    "trained_without_bias".into(),
                    with(&|c| {
                        c.network.fc1_bias = false;
                        c.scoring.bias_mode = BiasMode::Exclude;
                    }),
                ),
                (
                    "include_as_vector".into(),
                    with(&|c| {
                        c.network.fc1_bias = true;
                        c.scoring.bias_mode = BiasMode::IncludeAsVector;
                    }),
                ),
                (
                    "exclude".into(),
                    with(&|c| {
                        c.network.fc1_bias = true;
                        c.scoring.bias_mode = BiasMode::Exclude;
                    }),
                ),
            ],
            AblationAxis::FusionKind => [FusionKind::RbfSvm, FusionKind::LinearSvm, FusionKind::Logreg]
                .into_iter()
                .map(|k| (k.name().to_string(), with(&|c| c.fusion.kind = k)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub axis: AblationAxis,
    /// (setting, its run).
    pub runs: Vec<(String, RunSummary)>,
}

impl AblationReport {
    /// The axis score's report for every (setting, OOD set).
    pub fn comparison(&self) -> Vec<(String, EvalReport)> {
        let score = self.axis.score_name();
        self.runs
            .iter()
            .flat_map(|(setting, run)| {
                run.reports
                    .iter()
                    .filter(move |r| r.score_name == score)
                    .map(move |r| (setting.clone(), r.clone()))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting,id_test_accuracy,ood_dataset,score_name,auroc,tnr_at_tpr95,tnr_at_tpr98\n");
        for (setting, r) in self.comparison() {
            let acc = self.runs.iter().find(|(n, _)| *n == setting).map(|(_, run)| run.id_accuracy).unwrap();
            writeln!(
                s,
                "{setting},{},{},{},{},{},{}",
                fmt_float(acc),
                r.ood_dataset,
                r.score_name,
                fmt_float(r.auroc),
                fmt_float(r.tnr_at_tpr95),
                fmt_float(r.tnr_at_tpr98)
            )
            .unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "axis: {}", self.axis.name()).unwrap();
        writeln!(s, "score_name: {}", self.axis.score_name()).unwrap();
        for (setting, r) in self.comparison() {
            writeln!(s, "\n[{setting}]").unwrap();
            s.push_str(&r.to_text());
        }
        s
    }
}

/// Runs the pipeline once per setting of `axis`, each in its own
/// subdirectory. Settings that only change scoring or fusion reuse one
/// trained model.
pub fn ablate(cfg: &ExperimentConfig, axis: AblationAxis, out: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    create_dir(out)?;
    let inputs = load_inputs(cfg)?;
    let classes = class_count(cfg, Some(&inputs.id_train))?;
    let centroids = make_centroids(cfg, classes)?;
    let mut runs = Vec::new();
    let mut shared: Option<(NetworkModel, TrainReport, PathBuf)> = None;
    for (setting, scfg) in axis.settings(cfg) {
        let dir = out.join(format!("{}={setting}", axis.name()));
        create_dir(&dir)?;
        save_centroids(&centroids, dir.join("centroids.bin"))?;
        let own_model = axis == AblationAxis::BnRelu || setting == "trained_without_bias";
        let (model, train_report) = if own_model || shared.is_none() {
            let (m, r) = train_model(&scfg, &centroids, &inputs.id_train, Some(&dir))?;
            if !own_model {
                shared = Some((m.clone(), r.clone(), dir.clone()));
            }
            (m, r)
        } else {
            let (m, r, from) = shared.clone().unwrap();
            write(
                &dir.join("train_report.txt"),
                &format!("reused_model_from: {}\n", from.file_name().unwrap().to_string_lossy()),
            )?;
            (m, r)
        };
        let scored = score_all(&scfg, &model, &inputs, &dir)?;
        let summary = fuse_and_evaluate(&scfg, &scored, train_report, &dir)?;
        runs.push((setting, summary));
    }
    let report = AblationReport { axis, runs };
    write(&out.join(format!("ablation_{}.csv", axis.name())), &report.to_csv())?;
    write(&out.join(format!("ablation_{}.txt", axis.name())), &report.to_text())?;
    Ok(report)
}
