//! Two-stage training: source-only pretraining to seed target pseudo-labels,
//! then joint training of the reinitialized model with both domain
//! cross-entropies, the transfer objective, and per-epoch refinement.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::dataset::DomainSet;
use crate::error::{Error, Result};
use crate::objectives::{
    cross_entropy, loss_s_con, loss_t_con, mmd_transfer, mstn_center_transfer, total_loss,
    Bandwidths, LossBundle, LossTerms, StopSide,
};
use crate::refinement::{
    knn_refine, select_refinement_features, select_refinement_logits, weighted_kmeans_refine,
    PseudoLabelState, RepresentationChoice,
};
use crate::transformer::{
    forward, is_classifier_param, token_cosine_similarity, ForwardOptions, ForwardValues,
    ModelConfig, Params, WinTrModel,
};

const EVAL_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// `lr · (1 + gamma·p)^(−power)` with training progress `p ∈ [0, 1]`.
    InverseDecay { gamma: f64, power: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub classifier_lr_multiplier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 0.01,
            classifier_lr_multiplier: 10.0,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 32,
            schedule: Schedule::InverseDecay {
                gamma: 10.0,
                power: 0.75,
            },
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::field("optimizer.base_lr", "must be positive"));
        }
        if !(self.classifier_lr_multiplier > 0.0) {
            return Err(Error::field("optimizer.classifier_lr_multiplier", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::field("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::field("optimizer.weight_decay", "must be non-negative"));
        }
        if self.batch_size < 2 {
            return Err(Error::field("optimizer.batch_size", "must be at least 2"));
        }
        if let Schedule::InverseDecay { gamma, power } = self.schedule {
            if !(gamma >= 0.0 && power >= 0.0) {
                return Err(Error::field(
                    "optimizer.schedule",
                    "gamma and power must be non-negative",
                ));
            }
        }
        Ok(())
    }

    fn lr_at(&self, progress: f64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.base_lr,
            Schedule::InverseDecay { gamma, power } => {
                self.base_lr * (1.0 + gamma * progress.clamp(0.0, 1.0)).powf(-power)
            }
        }
    }
}

/// SGD with momentum and coupled weight decay; classifier heads use the
/// multiplied learning rate.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: OptimizerConfig,
    pub velocity: Params<Tensor>,
    classifier: Vec<bool>,
}

impl OptimState {
    pub fn new(config: OptimizerConfig, params: &Params<Tensor>) -> Self {
        let classifier = params.names().iter().map(|n| is_classifier_param(n)).collect();
        OptimState {
            config,
            velocity: params.zeros_like(),
            classifier,
        }
    }

    /// One update `v ← μ·v + (∇ + wd·w)`, `w ← w − lr·v` at the given
    /// training progress.
    pub fn step(&mut self, params: &mut Params<Tensor>, grads: &Params<Tensor>, progress: f64) {
        let lr = self.config.lr_at(progress);
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        let mult = self.config.classifier_lr_multiplier;
        for (((w, v), g), &is_head) in params
            .flat_mut()
            .into_iter()
            .zip(self.velocity.flat_mut())
            .zip(grads.flat())
            .zip(&self.classifier)
        {
            let rate = if is_head { lr * mult } else { lr };
            for ((w, v), g) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = mu * *v + g + wd * *w;
                *w -= rate * *v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMethod {
    #[default]
    Contrastive,
    Mmd,
    Mstn,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// `g^s` learns from source labels, `g^t` from target pseudo-labels.
    #[default]
    Separate,
    /// One common classifier (`head_src`) serves both tokens.
    SharedClassifier,
    /// Both classifiers learn from source labels and target pseudo-labels.
    SharedObjective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub tau: f64,
    pub transfer: TransferMethod,
    /// Include the source-side transfer term.
    pub ls_con: bool,
    /// Include the target-side transfer term.
    pub lt_con: bool,
    pub classifier_mode: ClassifierMode,
    pub mmd_bandwidths: Bandwidths,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 1.0,
            tau: 0.1,
            transfer: TransferMethod::Contrastive,
            ls_con: true,
            lt_con: true,
            classifier_mode: ClassifierMode::Separate,
            mmd_bandwidths: Bandwidths::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::field("objective.lambda", "must be non-negative"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::field("objective.tau", "temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementMethod {
    #[default]
    Kmeans,
    Knn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    pub method: RefinementMethod,
    pub representation: RepresentationChoice,
    pub kmeans_rounds: usize,
    pub knn_k: usize,
    /// Refine after every this many stage-2 epochs.
    pub interval_epochs: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            method: RefinementMethod::Kmeans,
            representation: RepresentationChoice::SourceOriented,
            kmeans_rounds: 2,
            knn_k: 5,
            interval_epochs: 1,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kmeans_rounds == 0 {
            return Err(Error::field("refinement.kmeans_rounds", "must be at least 1"));
        }
        if self.knn_k == 0 {
            return Err(Error::field("refinement.knn_k", "must be at least 1"));
        }
        if self.interval_epochs == 0 {
            return Err(Error::field("refinement.interval_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Everything the two training stages need besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub mask_enabled: bool,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub objective: ObjectiveConfig,
    pub refinement: RefinementConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            mask_enabled: true,
            stage1_epochs: 8,
            stage2_epochs: 20,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            objective: ObjectiveConfig::default(),
            refinement: RefinementConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.objective.validate()?;
        self.refinement.validate()?;
        if self.stage1_epochs == 0 {
            return Err(Error::field("stages.stage1_epochs", "must be at least 1"));
        }
        Ok(())
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            mask_enabled: self.mask_enabled,
            shared_head: self.objective.classifier_mode == ClassifierMode::SharedClassifier,
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// One row of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub stage: u8,
    /// Monotone across both stages.
    pub epoch: usize,
    /// Means over the epoch's steps.
    pub losses: LossBundle,
    /// `g^s` on source.
    pub src_acc: f64,
    /// `g^t` on target.
    pub tgt_acc: f64,
    pub gs_on_target: f64,
    pub gt_on_source: f64,
    /// Current pseudo-labels against the hidden target labels.
    pub pseudo_acc: f64,
    /// Mean cosine similarity of the two token states on target samples.
    pub token_cos_mean: f64,
}

pub const REPORT_COLUMNS: [&str; 15] = [
    "stage",
    "epoch",
    "l_s",
    "l_t",
    "l_s_con",
    "l_t_con",
    "total",
    "lambda",
    "tau",
    "src_acc",
    "tgt_acc",
    "gs_on_target",
    "gt_on_source",
    "pseudo_acc",
    "token_cos_mean",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    /// Total loss of every stage-2 step, in order.
    pub step_totals: Vec<f64>,
    /// Wall-clock seconds per row. Kept out of the CSV so reports stay
    /// reproducible.
    pub epoch_seconds: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let l = &r.losses;
            let fields: [String; 15] = [
                r.stage.to_string(),
                r.epoch.to_string(),
                l.l_s.to_string(),
                l.l_t.to_string(),
                l.l_s_con.to_string(),
                l.l_t_con.to_string(),
                l.total.to_string(),
                l.lambda.to_string(),
                l.tau.to_string(),
                r.src_acc.to_string(),
                r.tgt_acc.to_string(),
                r.gs_on_target.to_string(),
                r.gt_on_source.to_string(),
                r.pseudo_acc.to_string(),
                r.token_cos_mean.to_string(),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Src,
    Tgt,
}

/// Row-wise argmax; ties go to the lowest class.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

pub fn evaluate(
    model: &WinTrModel,
    set: &DomainSet,
    head: Head,
    options: ForwardOptions,
) -> Result<f64> {
    let out = model.infer(&set.images(), options, EVAL_BATCH)?;
    let logits = match head {
        Head::Src => &out.logits_src,
        Head::Tgt => &out.logits_tgt,
    };
    Ok(accuracy(&predict(logits), &set.labels()))
}

/// The four accuracies of the cross-domain / cross-head table plus the
/// mean token similarity on target samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub src_acc: f64,
    pub tgt_acc: f64,
    pub gs_on_target: f64,
    pub gt_on_source: f64,
    pub token_cos_mean: f64,
}

/// Inference on both domains; also hands back the target outputs.
pub fn evaluate_all(
    model: &WinTrModel,
    source: &DomainSet,
    target: &DomainSet,
    options: ForwardOptions,
) -> Result<(EvalMetrics, ForwardValues)> {
    let src = model.infer(&source.images(), options, EVAL_BATCH)?;
    let tgt = model.infer(&target.images(), options, EVAL_BATCH)?;
    let (ys, yt) = (source.labels(), target.labels());
    let cos = token_cosine_similarity(&tgt.feat_src_view, &tgt.feat_tgt_view)?;
    let metrics = EvalMetrics {
        src_acc: accuracy(&predict(&src.logits_src), &ys),
        tgt_acc: accuracy(&predict(&tgt.logits_tgt), &yt),
        gs_on_target: accuracy(&predict(&tgt.logits_src), &yt),
        gt_on_source: accuracy(&predict(&src.logits_tgt), &ys),
        token_cos_mean: cos.iter().sum::<f64>() / cos.len().max(1) as f64,
    };
    Ok((metrics, tgt))
}

fn check_data(config: &TrainConfig, source: &DomainSet, target: &DomainSet) -> Result<()> {
    let m = &config.model;
    for set in [source, target] {
        if set.num_classes != m.num_classes
            || set.channels != m.channels
            || set.height != m.image_side
            || set.width != m.image_side
        {
            return Err(Error::Config(format!(
                "{:?} data ({} classes, {}×{}×{}) does not match the model config \
                 ({} classes, {}×{}×{})",
                set.domain,
                set.num_classes,
                set.channels,
                set.height,
                set.width,
                m.num_classes,
                m.channels,
                m.image_side,
                m.image_side
            )));
        }
        if set.len() < config.optimizer.batch_size {
            return Err(Error::Config(format!(
                "{:?} set has {} samples, fewer than one batch of {}",
                set.domain,
                set.len(),
                config.optimizer.batch_size
            )));
        }
    }
    Ok(())
}

/// Endless reshuffled pass over `0..n`.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Sampler { order, pos: 0 }
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

fn collect_grads(
    g: &Graph,
    bound: &Params<Var>,
    loss: Var,
    like: &Params<Tensor>,
) -> Result<Params<Tensor>> {
    let grads = g.backward(loss)?;
    let mut out = like.zeros_like();
    for (dst, &var) in out.flat_mut().into_iter().zip(bound.flat()) {
        if let Some(gv) = grads.get(var) {
            dst.data_mut().copy_from_slice(gv);
        }
    }
    Ok(out)
}

fn mean_bundle(acc: &LossBundle, steps: usize, lambda: f64, tau: f64) -> LossBundle {
    let n = steps.max(1) as f64;
    LossBundle {
        l_s: acc.l_s / n,
        l_t: acc.l_t / n,
        l_s_con: acc.l_s_con / n,
        l_t_con: acc.l_t_con / n,
        total: acc.total / n,
        lambda,
        tau,
    }
}

fn accumulate(acc: &mut LossBundle, b: &LossBundle) {
    acc.l_s += b.l_s;
    acc.l_t += b.l_t;
    acc.l_s_con += b.l_s_con;
    acc.l_t_con += b.l_t_con;
    acc.total += b.total;
}

fn check_params(params: &Params<Tensor>, step: usize) -> Result<()> {
    match params.flat().iter().position(|t| !t.is_finite()) {
        Some(i) => Err(Error::Divergence {
            step,
            what: format!("non-finite parameter `{}`", params.names()[i]),
        }),
        None => Ok(()),
    }
}

/// A row with no finite attention score only arises from blown-up
/// activations.
fn nonfinite_forward(err: Error, step: usize) -> Error {
    match err {
        Error::DegenerateRow { row } => Error::Divergence {
            step,
            what: format!("non-finite scores in softmax row {row}"),
        },
        other => other,
    }
}

fn divergence(step: usize, what: &str, value: f64) -> Error {
    Error::Divergence {
        step,
        what: format!("{what} = {value}"),
    }
}

/// Result of source-only pretraining.
#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub model: WinTrModel,
    pub pseudo: PseudoLabelState,
    pub report: TrainReport,
    /// `g^s` accuracy on the target domain after pretraining.
    pub source_only_target_acc: f64,
    pub source_only_source_acc: f64,
    pub initial_pseudo_acc: f64,
}

/// Trains on labelled source data with the source cross-entropy only, then
/// derives initial target pseudo-labels by weighted K-means on the
/// source-oriented target features and source-head probabilities.
pub fn stage1_pretrain(
    config: &TrainConfig,
    source: &DomainSet,
    target: &DomainSet,
) -> Result<Stage1Outcome> {
    config.validate()?;
    check_data(config, source, target)?;
    let options = config.forward_options();
    let mut init_rng = config.rng(10);
    let mut batch_rng = config.rng(11);
    let mut model = WinTrModel::new(config.model.clone(), &mut init_rng)?;
    let mut optim = OptimState::new(config.optimizer.clone(), &model.params);
    let b = config.optimizer.batch_size;
    let steps_per_epoch = source.len() / b;
    let total_steps = steps_per_epoch * config.stage1_epochs;
    let mut sampler = Sampler::new(source.len(), &mut batch_rng);
    let mut report = TrainReport::default();
    let mut step = 0;
    let (lambda, tau) = (config.objective.lambda, config.objective.tau);

    for epoch in 0..config.stage1_epochs {
        let started = Instant::now();
        let mut acc = LossBundle::default();
        for _ in 0..steps_per_epoch {
            let idx = sampler.next_batch(b, &mut batch_rng);
            let images = source.batch(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| source.samples[i].label).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let out = forward(&mut g, &model.config, &bound, &images, options)
                .map_err(|e| nonfinite_forward(e, step))?;
            let l_s = cross_entropy(&mut g, out.logits_src, &labels)?;
            let value = g.value(l_s).item();
            if !value.is_finite() {
                return Err(divergence(step, "stage-1 source loss", value));
            }
            let grads = collect_grads(&g, &bound, l_s, &model.params)?;
            optim.step(&mut model.params, &grads, step as f64 / total_steps as f64);
            check_params(&model.params, step)?;
            acc.l_s += value;
            acc.total += value;
            step += 1;
        }
        let (metrics, _) = evaluate_all(&model, source, target, options)?;
        let losses = mean_bundle(&acc, steps_per_epoch, lambda, tau);
        debug!("stage 1 epoch {epoch}: l_s {:.4} src {:.3}", losses.l_s, metrics.src_acc);
        report.rows.push(EpochRow {
            stage: 1,
            epoch,
            losses,
            src_acc: metrics.src_acc,
            tgt_acc: metrics.tgt_acc,
            gs_on_target: metrics.gs_on_target,
            gt_on_source: metrics.gt_on_source,
            pseudo_acc: 0.0,
            token_cos_mean: metrics.token_cos_mean,
        });
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
    }

    let (metrics, tgt_out) = evaluate_all(&model, source, target, options)?;
    let mut pseudo = weighted_kmeans_refine(
        &tgt_out.feat_src_view,
        &tgt_out.logits_src,
        config.refinement.kmeans_rounds,
    )?;
    pseudo.round = 0;
    let initial_pseudo_acc = accuracy(&pseudo.labels, &target.labels());
    if let Some(row) = report.rows.last_mut() {
        row.pseudo_acc = initial_pseudo_acc;
    }
    info!(
        "stage 1 done: source acc {:.3}, source-only target acc {:.3}, initial pseudo-label acc {:.3}",
        metrics.src_acc, metrics.gs_on_target, initial_pseudo_acc
    );
    Ok(Stage1Outcome {
        model,
        pseudo,
        report,
        source_only_target_acc: metrics.gs_on_target,
        source_only_source_acc: metrics.src_acc,
        initial_pseudo_acc,
    })
}

fn ce_pair(g: &mut Graph, a: (Var, &[usize]), b: (Var, &[usize])) -> Result<Var> {
    let la = cross_entropy(g, a.0, a.1)?;
    let lb = cross_entropy(g, b.0, b.1)?;
    let sum = g.add(la, lb)?;
    Ok(g.scale(sum, 0.5))
}

/// Builds the four objective components for one step.
#[allow(clippy::too_many_arguments)]
fn step_terms(
    g: &mut Graph,
    config: &TrainConfig,
    bound: &Params<Var>,
    images: &Tensor,
    ns: usize,
    ys: &[usize],
    yt: &[usize],
) -> Result<LossTerms> {
    let out = forward(g, &config.model, bound, images, config.forward_options())?;
    let total = ns + yt.len();
    let src_rows: Vec<usize> = (0..ns).collect();
    let tgt_rows: Vec<usize> = (ns..total).collect();
    let mut split = |v: Var| -> Result<(Var, Var)> {
        Ok((g.gather_rows(v, &src_rows)?, g.gather_rows(v, &tgt_rows)?))
    };
    let (fs_s, fs_t) = split(out.feat_src_view)?;
    let (ft_s, ft_t) = split(out.feat_tgt_view)?;
    let (gs_s, gs_t) = split(out.logits_src)?;
    let (gt_s, gt_t) = split(out.logits_tgt)?;

    let obj = &config.objective;
    let (l_s, l_t) = match obj.classifier_mode {
        ClassifierMode::Separate | ClassifierMode::SharedClassifier => (
            cross_entropy(g, gs_s, ys)?,
            cross_entropy(g, gt_t, yt)?,
        ),
        ClassifierMode::SharedObjective => (
            ce_pair(g, (gs_s, ys), (gs_t, yt))?,
            ce_pair(g, (gt_s, ys), (gt_t, yt))?,
        ),
    };

    let zero = |g: &mut Graph| g.constant(Tensor::scalar(0.0));
    let tau = obj.tau;
    let l_s_con = if !obj.ls_con {
        zero(g)
    } else {
        match obj.transfer {
            TransferMethod::Contrastive => loss_s_con(g, fs_s, fs_t, ys, yt, tau)?,
            TransferMethod::Mmd => mmd_transfer(g, fs_t, fs_s, &obj.mmd_bandwidths, StopSide::Second)?,
            TransferMethod::Mstn => mstn_center_transfer(g, fs_t, yt, fs_s, ys, StopSide::Second)?,
            TransferMethod::None => zero(g),
        }
    };
    let l_t_con = if !obj.lt_con {
        zero(g)
    } else {
        match obj.transfer {
            TransferMethod::Contrastive => loss_t_con(g, ft_s, ft_t, ys, yt, tau)?,
            TransferMethod::Mmd => mmd_transfer(g, ft_s, ft_t, &obj.mmd_bandwidths, StopSide::Second)?,
            TransferMethod::Mstn => mstn_center_transfer(g, ft_s, ys, ft_t, yt, StopSide::Second)?,
            TransferMethod::None => zero(g),
        }
    };
    Ok(LossTerms {
        l_s,
        l_t,
        l_s_con,
        l_t_con,
    })
}

/// Recomputes pseudo-labels from the current model's target outputs.
pub fn refine(
    config: &RefinementConfig,
    target_outputs: &ForwardValues,
    previous: &PseudoLabelState,
) -> Result<PseudoLabelState> {
    let features = select_refinement_features(target_outputs, config.representation);
    let logits = select_refinement_logits(target_outputs, config.representation);
    let mut state = match config.method {
        RefinementMethod::Kmeans => weighted_kmeans_refine(features, logits, config.kmeans_rounds)?,
        RefinementMethod::Knn => {
            let current = predict(logits);
            let labels = knn_refine(features, &current, config.knn_k, logits.last_dim())?;
            PseudoLabelState {
                labels,
                centers: previous.centers.clone(),
                active: previous.active.clone(),
                round: 0,
                representation_choice: config.representation,
            }
        }
    };
    state.round = previous.round + 1;
    state.representation_choice = config.representation;
    Ok(state)
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub model: WinTrModel,
    pub pseudo: PseudoLabelState,
    pub report: TrainReport,
    pub final_metrics: EvalMetrics,
    pub final_pseudo_acc: f64,
}

/// Joint training from a fresh initialization. Every step draws one batch
/// per domain; every epoch is one pass over the larger domain.
pub fn stage2_train(
    config: &TrainConfig,
    source: &DomainSet,
    target: &DomainSet,
    initial: &PseudoLabelState,
) -> Result<Stage2Outcome> {
    config.validate()?;
    check_data(config, source, target)?;
    if initial.labels.len() != target.len() {
        return Err(Error::Config(format!(
            "{} pseudo-labels for {} target samples",
            initial.labels.len(),
            target.len()
        )));
    }
    let options = config.forward_options();
    let mut init_rng = config.rng(20);
    let mut batch_rng = config.rng(21);
    let mut model = WinTrModel::new(config.model.clone(), &mut init_rng)?;
    let mut optim = OptimState::new(config.optimizer.clone(), &model.params);
    let b = config.optimizer.batch_size;
    let steps_per_epoch = source.len().max(target.len()) / b;
    let total_steps = steps_per_epoch * config.stage2_epochs;
    let mut src_sampler = Sampler::new(source.len(), &mut batch_rng);
    let mut tgt_sampler = Sampler::new(target.len(), &mut batch_rng);
    let (lambda, tau) = (config.objective.lambda, config.objective.tau);
    let truth = target.labels();
    let mut pseudo = initial.clone();
    let mut report = TrainReport::default();
    let mut final_metrics = None;
    let mut step = 0;

    for epoch in 0..config.stage2_epochs {
        let started = Instant::now();
        let mut acc = LossBundle::default();
        for _ in 0..steps_per_epoch {
            let si = src_sampler.next_batch(b, &mut batch_rng);
            let ti = tgt_sampler.next_batch(b, &mut batch_rng);
            let ys: Vec<usize> = si.iter().map(|&i| source.samples[i].label).collect();
            let yt: Vec<usize> = ti.iter().map(|&i| pseudo.labels[i]).collect();
            let mut data = source.batch(&si).into_data();
            data.extend_from_slice(target.batch(&ti).data());
            let m = &config.model;
            let images = Tensor::new(vec![2 * b, m.channels, m.image_side, m.image_side], data)?;

            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let terms = step_terms(&mut g, config, &bound, &images, b, &ys, &yt)
                .map_err(|e| nonfinite_forward(e, step))?;
            let (total, bundle) = total_loss(&mut g, terms, lambda, tau)?;
            if !bundle.total.is_finite() {
                return Err(divergence(step, "stage-2 total loss", bundle.total));
            }
            let grads = collect_grads(&g, &bound, total, &model.params)?;
            optim.step(&mut model.params, &grads, step as f64 / total_steps as f64);
            check_params(&model.params, step)?;
            accumulate(&mut acc, &bundle);
            report.step_totals.push(bundle.total);
            step += 1;
        }

        let (metrics, tgt_out) = evaluate_all(&model, source, target, options)?;
        if (epoch + 1) % config.refinement.interval_epochs == 0 {
            pseudo = refine(&config.refinement, &tgt_out, &pseudo)?;
        }
        let pseudo_acc = accuracy(&pseudo.labels, &truth);
        let losses = mean_bundle(&acc, steps_per_epoch, lambda, tau);
        info!(
            "stage 2 epoch {epoch}: total {:.4} src {:.3} tgt {:.3} pseudo {:.3} cos {:.3}",
            losses.total, metrics.src_acc, metrics.tgt_acc, pseudo_acc, metrics.token_cos_mean
        );
        report.rows.push(EpochRow {
            stage: 2,
            epoch: config.stage1_epochs + epoch,
            losses,
            src_acc: metrics.src_acc,
            tgt_acc: metrics.tgt_acc,
            gs_on_target: metrics.gs_on_target,
            gt_on_source: metrics.gt_on_source,
            pseudo_acc,
            token_cos_mean: metrics.token_cos_mean,
        });
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        final_metrics = Some(metrics);
    }

    let final_metrics = match final_metrics {
        Some(m) => m,
        None => evaluate_all(&model, source, target, options)?.0,
    };
    let final_pseudo_acc = accuracy(&pseudo.labels, &truth);
    Ok(Stage2Outcome {
        model,
        pseudo,
        report,
        final_metrics,
        final_pseudo_acc,
    })
}
