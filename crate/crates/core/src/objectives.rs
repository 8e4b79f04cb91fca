//! Training objectives: domain cross-entropies, the two one-sided
//! supervised contrastive transfer losses, the MMD and class-center
//! alternatives, and the combined objective.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Which input of a two-sided loss is frozen with stop-gradient.
///
/// For [`supervised_contrastive`] the first input is the anchor set and
/// the second the candidate set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopSide {
    First,
    Second,
    Neither,
}

fn freeze(g: &mut Graph, a: Var, b: Var, side: StopSide) -> (Var, Var) {
    match side {
        StopSide::First => (g.stop_gradient(a), b),
        StopSide::Second => (a, g.stop_gradient(b)),
        StopSide::Neither => (a, b),
    }
}

fn zero_loss(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn weighted_sum(g: &mut Graph, x: Var, weights: Tensor) -> Result<Var> {
    let w = g.constant(weights);
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}

fn rows_of(g: &Graph, x: Var, op: &'static str) -> Result<(usize, usize)> {
    match g.shape(x) {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, other, &[0, 0])),
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (batch, classes) = rows_of(g, logits, "cross_entropy")?;
    if labels.len() != batch {
        return Err(Error::shape("cross_entropy", g.shape(logits), &[labels.len()]));
    }
    let mut weights = Tensor::zeros(&[batch, classes]);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Label {
                label,
                num_classes: classes,
            });
        }
        weights.data_mut()[i * classes + label] = -1.0 / batch as f64;
    }
    let logp = g.log_softmax_lastdim(logits)?;
    weighted_sum(g, logp, weights)
}

/// Label-aware InfoNCE over cosine similarities.
///
/// For every anchor with at least one same-label candidate, averages
/// `−log( exp(s⁺/τ) / Σ_c exp(s_c/τ) )` over its positives; the result is
/// the mean over those anchors. The denominator runs over all candidates.
/// Returns a constant zero (and logs a warning) when no anchor has a
/// positive.
#[allow(clippy::too_many_arguments)]
pub fn supervised_contrastive(
    g: &mut Graph,
    anchors: Var,
    candidates: Var,
    anchor_labels: &[usize],
    candidate_labels: &[usize],
    tau: f64,
    stop: StopSide,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter {
            name: "tau",
            reason: format!("temperature must be positive, got {tau}"),
        });
    }
    let (na, da) = rows_of(g, anchors, "supervised_contrastive")?;
    let (nc, dc) = rows_of(g, candidates, "supervised_contrastive")?;
    if da != dc || na != anchor_labels.len() || nc != candidate_labels.len() || na == 0 || nc < 2 {
        return Err(Error::shape(
            "supervised_contrastive",
            g.shape(anchors),
            g.shape(candidates),
        ));
    }

    let positives: Vec<Vec<usize>> = anchor_labels
        .iter()
        .map(|&la| {
            candidate_labels
                .iter()
                .enumerate()
                .filter(|(_, &lc)| lc == la)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let active = positives.iter().filter(|p| !p.is_empty()).count();
    if active == 0 {
        warn!("supervised contrastive loss: no anchor has a positive candidate; loss is 0");
        return Ok(zero_loss(g));
    }

    let mut weights = Tensor::zeros(&[na, nc]);
    for (i, pos) in positives.iter().enumerate() {
        for &j in pos {
            weights.data_mut()[i * nc + j] = -1.0 / (active as f64 * pos.len() as f64);
        }
    }

    let (a, c) = freeze(g, anchors, candidates, stop);
    let a = g.l2_normalize_lastdim(a);
    let c = g.l2_normalize_lastdim(c);
    let ct = g.transpose(c)?;
    let sim = g.matmul(a, ct)?;
    let logits = g.scale(sim, 1.0 / tau);
    let logp = g.log_softmax_lastdim(logits)?;
    weighted_sum(g, logp, weights)
}

/// Source-side transfer: target samples (source-oriented view) are
/// anchors pulled toward same-label source samples, whose source-oriented
/// features are frozen.
pub fn loss_s_con(
    g: &mut Graph,
    f_s_view_source: Var,
    f_s_view_target: Var,
    source_labels: &[usize],
    target_pseudolabels: &[usize],
    tau: f64,
) -> Result<Var> {
    supervised_contrastive(
        g,
        f_s_view_target,
        f_s_view_source,
        target_pseudolabels,
        source_labels,
        tau,
        StopSide::Second,
    )
}

/// Target-side transfer: source samples (target-oriented view) are
/// anchors pulled toward same-pseudo-label target samples, whose
/// target-oriented features are frozen.
pub fn loss_t_con(
    g: &mut Graph,
    f_t_view_source: Var,
    f_t_view_target: Var,
    source_labels: &[usize],
    target_pseudolabels: &[usize],
    tau: f64,
) -> Result<Var> {
    supervised_contrastive(
        g,
        f_t_view_source,
        f_t_view_target,
        source_labels,
        target_pseudolabels,
        tau,
        StopSide::Second,
    )
}

/// Gaussian kernel widths for [`mmd_transfer`].
///
/// The kernel is `k(x, y) = exp(−‖x − y‖² / w)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidths {
    /// `w = m · median pairwise squared distance` of the pooled (frozen)
    /// features, one kernel per multiplier `m`.
    MedianHeuristic { multipliers: Vec<f64> },
    Fixed(Vec<f64>),
}

impl Default for Bandwidths {
    fn default() -> Self {
        Bandwidths::MedianHeuristic {
            multipliers: vec![0.5, 1.0, 2.0],
        }
    }
}

fn median_sq_distance(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = a.row_iter().chain(b.row_iter()).collect();
    let mut dists = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(
                rows[i]
                    .iter()
                    .zip(rows[j])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>(),
            );
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

impl Bandwidths {
    /// Concrete kernel widths for the given feature sets.
    pub fn resolve(&self, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
        let widths = match self {
            Bandwidths::Fixed(w) => w.clone(),
            Bandwidths::MedianHeuristic { multipliers } => {
                let base = median_sq_distance(a, b);
                multipliers.iter().map(|m| m * base).collect()
            }
        };
        if widths.is_empty() || widths.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Parameter {
                name: "bandwidth",
                reason: format!("kernel widths must be positive, got {widths:?}"),
            });
        }
        Ok(widths)
    }
}

/// Squared MMD (biased estimate) averaged over Gaussian kernels.
pub fn mmd_transfer(
    g: &mut Graph,
    f_a: Var,
    f_b: Var,
    bandwidths: &Bandwidths,
    stop: StopSide,
) -> Result<Var> {
    let (na, da) = rows_of(g, f_a, "mmd_transfer")?;
    let (nb, db) = rows_of(g, f_b, "mmd_transfer")?;
    if da != db || na < 2 || nb < 2 {
        return Err(Error::shape("mmd_transfer", g.shape(f_a), g.shape(f_b)));
    }
    let widths = bandwidths.resolve(g.value(f_a), g.value(f_b))?;
    let (a, b) = freeze(g, f_a, f_b, stop);
    let daa = g.pairwise_sq_dist(a, a)?;
    let dbb = g.pairwise_sq_dist(b, b)?;
    let dab = g.pairwise_sq_dist(a, b)?;

    let mut terms = Vec::with_capacity(widths.len());
    for w in &widths {
        let kernel_mean = |g: &mut Graph, d: Var| {
            let s = g.scale(d, -1.0 / w);
            let k = g.exp(s);
            g.mean(k)
        };
        let kaa = kernel_mean(g, daa);
        let kbb = kernel_mean(g, dbb);
        let kab = kernel_mean(g, dab);
        let within = g.add(kaa, kbb)?;
        let cross = g.scale(kab, 2.0);
        terms.push(g.sub(within, cross)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / widths.len() as f64))
}

/// Mean over classes present in both sets of the squared distance between
/// the per-class feature means. Returns a constant zero (with a warning)
/// when no class is shared.
pub fn mstn_center_transfer(
    g: &mut Graph,
    f_a: Var,
    labels_a: &[usize],
    f_b: Var,
    labels_b: &[usize],
    stop: StopSide,
) -> Result<Var> {
    let (na, da) = rows_of(g, f_a, "mstn_center_transfer")?;
    let (nb, db) = rows_of(g, f_b, "mstn_center_transfer")?;
    if da != db || na != labels_a.len() || nb != labels_b.len() {
        return Err(Error::shape("mstn_center_transfer", g.shape(f_a), g.shape(f_b)));
    }
    let max_label = labels_a.iter().chain(labels_b).copied().max().unwrap_or(0);
    let shared: Vec<usize> = (0..=max_label)
        .filter(|k| labels_a.contains(k) && labels_b.contains(k))
        .collect();
    if shared.is_empty() {
        warn!("class-center transfer: no class present in both sets; loss is 0");
        return Ok(zero_loss(g));
    }
    let averaging = |labels: &[usize]| {
        let n = labels.len();
        let mut w = Tensor::zeros(&[shared.len(), n]);
        for (r, &k) in shared.iter().enumerate() {
            let count = labels.iter().filter(|&&l| l == k).count() as f64;
            for (j, _) in labels.iter().enumerate().filter(|(_, &l)| l == k) {
                w.data_mut()[r * n + j] = 1.0 / count;
            }
        }
        w
    };
    let wa = g.constant(averaging(labels_a));
    let wb = g.constant(averaging(labels_b));
    let (a, b) = freeze(g, f_a, f_b, stop);
    let mu_a = g.matmul(wa, a)?;
    let mu_b = g.matmul(wb, b)?;
    let diff = g.sub(mu_a, mu_b)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / shared.len() as f64))
}

/// Graph handles of the four objective components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_s: Var,
    pub l_t: Var,
    pub l_s_con: Var,
    pub l_t_con: Var,
}

/// Scalar values of every objective component.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_s: f64,
    pub l_t: f64,
    pub l_s_con: f64,
    pub l_t_con: f64,
    pub total: f64,
    pub lambda: f64,
    pub tau: f64,
}

/// `l_s + l_t + λ·(l_s_con + l_t_con)`.
pub fn total_loss(g: &mut Graph, terms: LossTerms, lambda: f64, tau: f64) -> Result<(Var, LossBundle)> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter {
            name: "lambda",
            reason: format!("trade-off weight must be non-negative, got {lambda}"),
        });
    }
    let ce = g.add(terms.l_s, terms.l_t)?;
    let con = g.add(terms.l_s_con, terms.l_t_con)?;
    let con = g.scale(con, lambda);
    let total = g.add(ce, con)?;
    let bundle = LossBundle {
        l_s: g.value(terms.l_s).item(),
        l_t: g.value(terms.l_t).item(),
        l_s_con: g.value(terms.l_s_con).item(),
        l_t_con: g.value(terms.l_t_con).item(),
        total: g.value(total).item(),
        lambda,
        tau,
    };
    Ok((total, bundle))
}
