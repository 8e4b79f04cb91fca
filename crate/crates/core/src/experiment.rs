//! Run configuration files, ablation variants, and the drivers behind the
//! command-line verbs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate, load_dataset, Domain, DomainSet, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::refinement::RepresentationChoice;
use crate::trainer::{
    evaluate_all, stage1_pretrain, stage2_train, ClassifierMode, EvalMetrics, ObjectiveConfig,
    OptimizerConfig, RefinementConfig, RefinementMethod, Stage1Outcome, Stage2Outcome,
    TrainConfig, TrainReport, TransferMethod,
};
use crate::transformer::{checkpoint, token_cosine_similarity, ModelConfig, WinTrModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticTaskSpec),
    /// Two directories in the on-disk dataset format.
    Directory { source: PathBuf, target: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticTaskSpec::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<(DomainSet, DomainSet)> {
        match self {
            DataSource::Synthetic(spec) => generate(spec),
            DataSource::Directory { source, target } => {
                let s = load_dataset(source)?;
                let t = load_dataset(target)?;
                for (set, want, dir) in [(&s, Domain::Source, source), (&t, Domain::Target, target)] {
                    if set.domain != want {
                        return Err(Error::Ingestion {
                            file: dir.join(crate::dataset::MANIFEST_FILE),
                            reason: format!("expected a {want:?} manifest, found {:?}", set.domain),
                        });
                    }
                }
                Ok((s, t))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        StageConfig {
            stage1_epochs: t.stage1_epochs,
            stage2_epochs: t.stage2_epochs,
        }
    }
}

/// Contents of a run configuration file (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mask_enabled: bool,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub objective: ObjectiveConfig,
    pub refinement: RefinementConfig,
    pub stages: StageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: t.seed,
            mask_enabled: t.mask_enabled,
            out_dir: PathBuf::from("runs/default"),
            data: DataSource::default(),
            model: t.model,
            optimizer: t.optimizer,
            objective: t.objective,
            refinement: t.refinement,
            stages: StageConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            mask_enabled: self.mask_enabled,
            stage1_epochs: self.stages.stage1_epochs,
            stage2_epochs: self.stages.stage2_epochs,
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            objective: self.objective.clone(),
            refinement: self.refinement.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            let m = &self.model;
            if spec.num_classes != m.num_classes {
                return Err(Error::field(
                    "data.num_classes",
                    format!("{} differs from model.num_classes {}", spec.num_classes, m.num_classes),
                ));
            }
            if spec.image_side != m.image_side || spec.channels != m.channels {
                return Err(Error::field(
                    "data.image_side",
                    format!(
                        "images are {}×{}×{} but the model expects {}×{}×{}",
                        spec.channels, spec.image_side, spec.image_side,
                        m.channels, m.image_side, m.image_side
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Method variants compared against the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoMask,
    NoLsCon,
    NoLtCon,
    NoBothCon,
    KnnRefine,
    Mmd,
    Mstn,
    TargetOrientedRefine,
    SharedClassifier,
    SharedObjective,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Full,
        Variant::NoMask,
        Variant::NoLsCon,
        Variant::NoLtCon,
        Variant::NoBothCon,
        Variant::KnnRefine,
        Variant::Mmd,
        Variant::Mstn,
        Variant::TargetOrientedRefine,
        Variant::SharedClassifier,
        Variant::SharedObjective,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMask => "no_mask",
            Variant::NoLsCon => "no_ls_con",
            Variant::NoLtCon => "no_lt_con",
            Variant::NoBothCon => "no_both_con",
            Variant::KnnRefine => "knn_refine",
            Variant::Mmd => "mmd",
            Variant::Mstn => "mstn",
            Variant::TargetOrientedRefine => "target_oriented_refine",
            Variant::SharedClassifier => "shared_classifier",
            Variant::SharedObjective => "shared_objective",
        }
    }

    /// The configuration this variant trains with.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Variant::Full => {}
            Variant::NoMask => c.mask_enabled = false,
            Variant::NoLsCon => c.objective.ls_con = false,
            Variant::NoLtCon => c.objective.lt_con = false,
            Variant::NoBothCon => c.objective.lambda = 0.0,
            Variant::KnnRefine => c.refinement.method = RefinementMethod::Knn,
            Variant::Mmd => c.objective.transfer = TransferMethod::Mmd,
            Variant::Mstn => c.objective.transfer = TransferMethod::Mstn,
            Variant::TargetOrientedRefine => {
                c.refinement.representation = RepresentationChoice::TargetOriented
            }
            Variant::SharedClassifier => {
                c.objective.classifier_mode = ClassifierMode::SharedClassifier
            }
            Variant::SharedObjective => c.objective.classifier_mode = ClassifierMode::SharedObjective,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant `{s}`; valid variants: {}",
                    names.join(", ")
                ))
            })
    }
}

/// The part of a configuration stage 1 depends on. Two configurations
/// with equal keys share the same stage-1 outcome.
pub fn stage1_key(config: &TrainConfig) -> TrainConfig {
    let shared_head = config.objective.classifier_mode == ClassifierMode::SharedClassifier;
    TrainConfig {
        stage2_epochs: 0,
        objective: ObjectiveConfig {
            tau: config.objective.tau,
            classifier_mode: if shared_head {
                ClassifierMode::SharedClassifier
            } else {
                ClassifierMode::Separate
            },
            ..ObjectiveConfig::default()
        },
        refinement: RefinementConfig {
            kmeans_rounds: config.refinement.kmeans_rounds,
            ..RefinementConfig::default()
        },
        ..config.clone()
    }
}

/// Final numbers of one run, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub source_only_source_acc: f64,
    pub source_only_target_acc: f64,
    pub initial_pseudo_acc: f64,
    pub final_metrics: EvalMetrics,
    pub final_pseudo_acc: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub report: TrainReport,
    pub stage1: Stage1Outcome,
    pub stage2: Stage2Outcome,
}

/// Stage 2 from an existing stage-1 outcome.
pub fn finish_run(
    config: &TrainConfig,
    variant: Variant,
    source: &DomainSet,
    target: &DomainSet,
    stage1: &Stage1Outcome,
) -> Result<RunOutcome> {
    let stage2 = stage2_train(config, source, target, &stage1.pseudo)?;
    let mut report = stage1.report.clone();
    report.rows.extend(stage2.report.rows.iter().cloned());
    report.step_totals = stage2.report.step_totals.clone();
    report.epoch_seconds.extend(&stage2.report.epoch_seconds);
    let summary = RunSummary {
        variant,
        seed: config.seed,
        source_only_source_acc: stage1.source_only_source_acc,
        source_only_target_acc: stage1.source_only_target_acc,
        initial_pseudo_acc: stage1.initial_pseudo_acc,
        final_metrics: stage2.final_metrics,
        final_pseudo_acc: stage2.final_pseudo_acc,
        stage1_epochs: config.stage1_epochs,
        stage2_epochs: config.stage2_epochs,
    };
    Ok(RunOutcome {
        summary,
        report,
        stage1: stage1.clone(),
        stage2,
    })
}

pub fn run_variant(
    config: &TrainConfig,
    variant: Variant,
    source: &DomainSet,
    target: &DomainSet,
) -> Result<RunOutcome> {
    let config = variant.apply(config);
    let stage1 = stage1_pretrain(&config, source, target)?;
    finish_run(&config, variant, source, target, &stage1)
}

pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const PSEUDO_FILE: &str = "pseudo_labels.json";
pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const RESOLVED_CONFIG: &str = "config.toml";

/// Writes the report, summary, wall-clock timings, final pseudo-labels
/// and both checkpoints into `dir`.
pub fn write_run_outputs(outcome: &RunOutcome, config: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_FILE), outcome.report.to_csv())?;
    fs::write(
        dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&outcome.summary)?,
    )?;
    fs::write(
        dir.join(TIMING_FILE),
        serde_json::to_string_pretty(&serde_json::json!({
            "epoch_seconds": outcome.report.epoch_seconds,
        }))?,
    )?;
    let pseudo = &outcome.stage2.pseudo;
    fs::write(
        dir.join(PSEUDO_FILE),
        serde_json::to_string_pretty(&pseudo.dump(Some(&outcome.stage1.pseudo.labels)))?,
    )?;
    checkpoint::save(&outcome.stage1.model, &dir.join(STAGE1_CHECKPOINT))?;
    checkpoint::save(&outcome.stage2.model, &dir.join(FINAL_CHECKPOINT))?;
    fs::write(dir.join(RESOLVED_CONFIG), config.to_toml()?)?;
    Ok(())
}

/// Trains the full method described by `config` and writes its outputs to
/// `config.out_dir`.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let (source, target) = config.data.load()?;
    let outcome = run_variant(&config.train_config(), Variant::Full, &source, &target)?;
    write_run_outputs(&outcome, config, &config.out_dir)?;
    info!("run written to {}", config.out_dir.display());
    Ok(outcome.summary)
}

pub const ABLATION_FILE: &str = "ablation.csv";

/// Runs the full method plus each requested variant, one subdirectory per
/// variant, and writes a comparison table. Stage 1 is shared between
/// variants that do not change it.
pub fn ablate(config: &RunConfig, variants: &[Variant]) -> Result<Vec<RunSummary>> {
    config.validate()?;
    let (source, target) = config.data.load()?;
    let base = config.train_config();
    let mut order = vec![Variant::Full];
    for &v in variants {
        if !order.contains(&v) {
            order.push(v);
        }
    }
    let mut stage1_cache: Vec<(TrainConfig, Stage1Outcome)> = Vec::new();
    let mut summaries = Vec::new();
    for variant in order {
        let vc = variant.apply(&base);
        let key = stage1_key(&vc);
        let cached = stage1_cache.iter().position(|(k, _)| *k == key);
        let index = match cached {
            Some(i) => i,
            None => {
                stage1_cache.push((key, stage1_pretrain(&vc, &source, &target)?));
                stage1_cache.len() - 1
            }
        };
        info!("ablation: running {variant}");
        let outcome = finish_run(&vc, variant, &source, &target, &stage1_cache[index].1)?;
        write_run_outputs(&outcome, config, &config.out_dir.join(variant.name()))?;
        summaries.push(outcome.summary);
    }
    fs::create_dir_all(&config.out_dir)?;
    fs::write(config.out_dir.join(ABLATION_FILE), ablation_csv(&summaries))?;
    Ok(summaries)
}

pub const ABLATION_COLUMNS: [&str; 10] = [
    "variant",
    "seed",
    "source_only_target_acc",
    "tgt_acc",
    "delta_vs_full",
    "src_acc",
    "gs_on_target",
    "gt_on_source",
    "pseudo_acc",
    "token_cos_mean",
];

pub fn ablation_csv(summaries: &[RunSummary]) -> String {
    let full = summaries
        .iter()
        .find(|s| s.variant == Variant::Full)
        .map(|s| s.final_metrics.tgt_acc);
    let mut out = ABLATION_COLUMNS.join(",");
    out.push('\n');
    for s in summaries {
        let m = &s.final_metrics;
        let delta = full.map_or(String::new(), |f| (m.tgt_acc - f).to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            s.variant,
            s.seed,
            s.source_only_target_acc,
            m.tgt_acc,
            delta,
            m.src_acc,
            m.gs_on_target,
            m.gt_on_source,
            s.final_pseudo_acc,
            m.token_cos_mean
        ));
    }
    out
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width bins over `[−1, 1]`; the last bin includes 1.
pub fn cosine_histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let width = 2.0 / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lower: -1.0 + i as f64 * width,
            upper: -1.0 + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values {
        let i = (((v.clamp(-1.0, 1.0) + 1.0) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

/// Token-similarity and cross-head accuracy diagnostics for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub token_cos_mean: f64,
    pub histogram: Vec<HistogramBin>,
    /// `g^s` / `g^t` accuracy on source / target data.
    pub cross_accuracy: EvalMetrics,
    #[serde(skip)]
    pub per_sample: Vec<f64>,
}

pub fn diagnose(
    model: &WinTrModel,
    config: &TrainConfig,
    source: &DomainSet,
    target: &DomainSet,
) -> Result<Diagnosis> {
    let (metrics, tgt_out) = evaluate_all(model, source, target, config.forward_options())?;
    let per_sample = token_cosine_similarity(&tgt_out.feat_src_view, &tgt_out.feat_tgt_view)?;
    Ok(Diagnosis {
        token_cos_mean: metrics.token_cos_mean,
        histogram: cosine_histogram(&per_sample, HISTOGRAM_BINS),
        cross_accuracy: metrics,
        per_sample,
    })
}

pub const DIAGNOSIS_FILE: &str = "diagnosis.json";
pub const TOKEN_SIMILARITY_FILE: &str = "token_similarity.csv";
pub const TOKEN_HISTOGRAM_FILE: &str = "token_histogram.csv";
pub const CROSS_ACCURACY_FILE: &str = "cross_accuracy.csv";

pub fn write_diagnosis(diag: &Diagnosis, target: &DomainSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(DIAGNOSIS_FILE), serde_json::to_string_pretty(diag)?)?;

    let mut sim = String::from("id,label,cosine\n");
    for (s, c) in target.samples.iter().zip(&diag.per_sample) {
        sim.push_str(&format!("{},{},{}\n", s.id, s.label, c));
    }
    fs::write(dir.join(TOKEN_SIMILARITY_FILE), sim)?;

    let mut hist = String::from("lower,upper,count\n");
    for b in &diag.histogram {
        hist.push_str(&format!("{},{},{}\n", b.lower, b.upper, b.count));
    }
    fs::write(dir.join(TOKEN_HISTOGRAM_FILE), hist)?;

    let m = &diag.cross_accuracy;
    let table = format!(
        "head,source,target\ng_s,{},{}\ng_t,{},{}\n",
        m.src_acc, m.gs_on_target, m.gt_on_source, m.tgt_acc
    );
    fs::write(dir.join(CROSS_ACCURACY_FILE), table)?;
    Ok(())
}

/// Loads a checkpoint built for `config.model` and writes its diagnostics
/// into `config.out_dir`.
pub fn diagnose_checkpoint(path: &Path, config: &RunConfig) -> Result<Diagnosis> {
    config.validate()?;
    let model = checkpoint::load_expecting(path, &config.model)?;
    let (source, target) = config.data.load()?;
    let diag = diagnose(&model, &config.train_config(), &source, &target)?;
    write_diagnosis(&diag, &target, &config.out_dir)?;
    Ok(diag)
}
