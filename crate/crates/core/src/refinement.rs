//! Target pseudo-label refinement from feature-space structure.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::transformer::ForwardValues;

/// Which token's view of the target data drives refinement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationChoice {
    #[default]
    SourceOriented,
    TargetOriented,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelState {
    pub labels: Vec<usize>,
    /// `C×D` class centers in normalized-feature space. Rows of inactive
    /// classes are zero.
    pub centers: Tensor,
    /// Classes that had a defined center in the last round.
    pub active: Vec<bool>,
    pub round: usize,
    pub representation_choice: RepresentationChoice,
}

/// Compact per-round diagnostic record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementDump {
    pub round: usize,
    pub labels: Vec<usize>,
    pub center_norms: Vec<f64>,
    pub changed: usize,
}

impl PseudoLabelState {
    /// Diagnostic summary; `previous` labels give the change count.
    pub fn dump(&self, previous: Option<&[usize]>) -> RefinementDump {
        let changed = previous.map_or(0, |prev| {
            prev.iter().zip(&self.labels).filter(|(a, b)| a != b).count()
        });
        RefinementDump {
            round: self.round,
            labels: self.labels.clone(),
            center_norms: self
                .centers
                .row_iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
            changed,
        }
    }
}

fn normalized_rows(features: &Tensor) -> Vec<Vec<f64>> {
    features
        .row_iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.to_vec()
            }
        })
        .collect()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `1 − cos(a, b)`; a zero vector counts as orthogonal to everything.
fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Nearest active center by cosine distance; ties go to the lower index.
fn assign(features: &[Vec<f64>], centers: &[Vec<f64>], active: &[bool]) -> Vec<usize> {
    features
        .iter()
        .map(|f| {
            let mut best = None;
            for (k, c) in centers.iter().enumerate() {
                if !active[k] {
                    continue;
                }
                let d = cosine_distance(f, c);
                match best {
                    Some((_, bd)) if d >= bd => {}
                    _ => best = Some((k, d)),
                }
            }
            best.map(|(k, _)| k).expect("at least one active class")
        })
        .collect()
}

/// Weighted K-means pseudo-labelling.
///
/// Round 1 builds each class center as the softmax-probability-weighted
/// mean of the l2-normalized features and assigns every sample to its
/// nearest center by cosine distance. Each further round recomputes the
/// centers as hard means of the current assignment and reassigns. Classes
/// without mass are inactive for that round and never chosen.
pub fn weighted_kmeans_refine(
    features: &Tensor,
    logits: &Tensor,
    rounds: usize,
) -> Result<PseudoLabelState> {
    if rounds == 0 {
        return Err(Error::Parameter {
            name: "rounds",
            reason: "need at least one refinement round".into(),
        });
    }
    if features.ndim() != 2 || logits.ndim() != 2 || features.rows() != logits.rows() {
        return Err(Error::shape("weighted_kmeans_refine", features.shape(), logits.shape()));
    }
    let classes = logits.last_dim();
    let dim = features.last_dim();
    let feats = normalized_rows(features);
    let probs: Vec<Vec<f64>> = logits.row_iter().map(softmax_row).collect();

    let mut centers = vec![vec![0.0; dim]; classes];
    let mut active = vec![false; classes];
    for k in 0..classes {
        let mass: f64 = probs.iter().map(|p| p[k]).sum();
        if mass > 0.0 {
            active[k] = true;
            for (f, p) in feats.iter().zip(&probs) {
                let w = p[k] / mass;
                for (c, v) in centers[k].iter_mut().zip(f) {
                    *c += w * v;
                }
            }
        } else {
            warn!("weighted k-means: class {k} has no probability mass; excluded");
        }
    }
    if !active.iter().any(|&a| a) {
        return Err(Error::Refinement("every class has zero probability mass".into()));
    }
    let mut labels = assign(&feats, &centers, &active);

    for _ in 1..rounds {
        let mut sums = vec![vec![0.0; dim]; classes];
        let mut counts = vec![0usize; classes];
        for (f, &l) in feats.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(f) {
                *s += v;
            }
        }
        for k in 0..classes {
            active[k] = counts[k] > 0;
            centers[k] = if active[k] {
                sums[k].iter().map(|s| s / counts[k] as f64).collect()
            } else {
                vec![0.0; dim]
            };
        }
        labels = assign(&feats, &centers, &active);
    }

    Ok(PseudoLabelState {
        labels,
        centers: Tensor::new(vec![classes, dim], centers.concat())?,
        active,
        round: rounds,
        representation_choice: RepresentationChoice::SourceOriented,
    })
}

/// K-nearest-neighbour vote by cosine distance, the sample itself
/// excluded. Distance ties prefer the lower sample index; vote ties prefer
/// the lower class index.
pub fn knn_refine(
    features: &Tensor,
    current_labels: &[usize],
    k: usize,
    num_classes: usize,
) -> Result<Vec<usize>> {
    let t = features.rows();
    if current_labels.len() != t {
        return Err(Error::shape("knn_refine", features.shape(), &[current_labels.len()]));
    }
    if k == 0 || k >= t {
        return Err(Error::Parameter {
            name: "k",
            reason: format!("need 1 <= k < {t} samples, got {k}"),
        });
    }
    if let Some(&bad) = current_labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Label {
            label: bad,
            num_classes,
        });
    }
    let feats = normalized_rows(features);
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let mut neighbours: Vec<(f64, usize)> = (0..t)
            .filter(|&j| j != i)
            .map(|j| (cosine_distance(&feats[i], &feats[j]), j))
            .collect();
        neighbours.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; num_classes];
        for &(_, j) in neighbours.iter().take(k) {
            votes[current_labels[j]] += 1;
        }
        let mut best = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// The target features refinement runs on.
pub fn select_refinement_features(
    target_outputs: &ForwardValues,
    choice: RepresentationChoice,
) -> &Tensor {
    match choice {
        RepresentationChoice::SourceOriented => &target_outputs.feat_src_view,
        RepresentationChoice::TargetOriented => &target_outputs.feat_tgt_view,
    }
}

/// Classifier outputs paired with [`select_refinement_features`]: the
/// source head for the source-oriented view, the target head otherwise.
pub fn select_refinement_logits(
    target_outputs: &ForwardValues,
    choice: RepresentationChoice,
) -> &Tensor {
    match choice {
        RepresentationChoice::SourceOriented => &target_outputs.logits_src,
        RepresentationChoice::TargetOriented => &target_outputs.logits_tgt,
    }
}
