//! End-to-end criteria on the default synthetic task. Training runs are
//! cached per (variant, seed) and stage-1 outcomes are shared between
//! variants that do not change stage 1.

use std::collections::HashMap;
use std::time::Instant;

use wintr_core::dataset::DomainSet;
use wintr_core::experiment::{finish_run, stage1_key, RunConfig, RunSummary, Variant};
use wintr_core::trainer::{stage1_pretrain, Stage1Outcome, TrainConfig};

use crate::properties::Outcome;

/// Per-seed (source-only target accuracy, full-method target accuracy)
/// measured by the calibration run on the default configuration, as
/// counts out of the 512 target samples.
pub const EXPECTED_FULL: [(u64, f64, f64); 5] = [
    (0, 421.0 / 512.0, 506.0 / 512.0),
    (1, 417.0 / 512.0, 494.0 / 512.0),
    (2, 419.0 / 512.0, 506.0 / 512.0),
    (3, 267.0 / 512.0, 499.0 / 512.0),
    (4, 442.0 / 512.0, 493.0 / 512.0),
];

/// Allowed drift from [`EXPECTED_FULL`]; covers floating-point
/// differences across platforms, not behavioural changes.
pub const FIXTURE_TOLERANCE: f64 = 0.02;

const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const DIRECTION_SEEDS: [u64; 3] = [0, 1, 2];
const TIE: f64 = 0.005;

struct Stage1Entry {
    seed: u64,
    key: TrainConfig,
    outcome: Stage1Outcome,
    seconds: f64,
}

struct RunEntry {
    summary: RunSummary,
    stage1: usize,
    seconds: f64,
}

pub struct Lab {
    base: RunConfig,
    data: Option<(DomainSet, DomainSet)>,
    stage1: Vec<Stage1Entry>,
    runs: HashMap<(Variant, u64), RunEntry>,
}

/// Results of a set of runs plus their total training time, stage 1
/// counted once per distinct stage-1 model.
struct Batch {
    summaries: Vec<RunSummary>,
    seconds: f64,
}

impl Lab {
    pub fn new() -> Self {
        Lab {
            base: RunConfig::default(),
            data: None,
            stage1: Vec::new(),
            runs: HashMap::new(),
        }
    }

    fn data(&mut self) -> Result<&(DomainSet, DomainSet), String> {
        if self.data.is_none() {
            self.data = Some(self.base.data.load().map_err(|e| e.to_string())?);
        }
        Ok(self.data.as_ref().expect("loaded"))
    }

    fn ensure(&mut self, variant: Variant, seed: u64) -> Result<(), String> {
        if self.runs.contains_key(&(variant, seed)) {
            return Ok(());
        }
        let mut base = self.base.clone();
        base.seed = seed;
        let config = variant.apply(&base.train_config());
        let key = stage1_key(&config);
        let (source, target) = self.data()?.clone();

        let index = match self.stage1.iter().position(|e| e.seed == seed && e.key == key) {
            Some(i) => i,
            None => {
                let start = Instant::now();
                let outcome = stage1_pretrain(&config, &source, &target).map_err(|e| e.to_string())?;
                self.stage1.push(Stage1Entry { seed, key, outcome, seconds: start.elapsed().as_secs_f64() });
                self.stage1.len() - 1
            }
        };
        let start = Instant::now();
        let outcome = finish_run(&config, variant, &source, &target, &self.stage1[index].outcome)
            .map_err(|e| format!("{variant} seed {seed}: {e}"))?;
        let seconds = start.elapsed().as_secs_f64();
        let m = &outcome.summary.final_metrics;
        eprintln!(
            "    {variant:<24} seed {seed}: source-only tgt {:.4} -> tgt {:.4}, pseudo {:.4}, cos {:.3} ({seconds:.1}s)",
            outcome.summary.source_only_target_acc, m.tgt_acc, outcome.summary.final_pseudo_acc, m.token_cos_mean
        );
        self.runs.insert((variant, seed), RunEntry { summary: outcome.summary, stage1: index, seconds });
        Ok(())
    }

    fn batch(&mut self, variants: &[Variant], seeds: &[u64]) -> Result<Batch, String> {
        for &v in variants {
            for &s in seeds {
                self.ensure(v, s)?;
            }
        }
        let mut summaries = Vec::new();
        let mut seconds = 0.0;
        let mut stage1_used = Vec::new();
        for &v in variants {
            for &s in seeds {
                let entry = &self.runs[&(v, s)];
                summaries.push(entry.summary.clone());
                seconds += entry.seconds;
                if !stage1_used.contains(&entry.stage1) {
                    stage1_used.push(entry.stage1);
                    seconds += self.stage1[entry.stage1].seconds;
                }
            }
        }
        Ok(Batch { summaries, seconds })
    }
}

fn of(batch: &Batch, variant: Variant) -> Vec<&RunSummary> {
    batch.summaries.iter().filter(|s| s.variant == variant).collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn within_budget(detail: String, seconds: f64, budget: f64) -> Outcome {
    if seconds <= budget {
        Ok(format!("{detail}; training time {seconds:.0}s of {budget:.0}s"))
    } else {
        Err(format!("{detail}; training time {seconds:.0}s exceeds {budget:.0}s"))
    }
}

pub fn adaptation_gain(lab: &mut Lab) -> Outcome {
    let batch = lab.batch(&[Variant::Full], &ABLATION_SEEDS)?;
    let mut wins = 0;
    let mut per_seed = Vec::new();
    let mut drift = Vec::new();
    for s in of(&batch, Variant::Full) {
        let before = s.source_only_target_acc;
        let after = s.final_metrics.tgt_acc;
        if after - before >= 0.10 {
            wins += 1;
        }
        per_seed.push(format!("{:.3}->{:.3}", before, after));
        if let Some(&(_, want_before, want_after)) = EXPECTED_FULL.iter().find(|e| e.0 == s.seed) {
            if !((before - want_before).abs() <= FIXTURE_TOLERANCE && (after - want_after).abs() <= FIXTURE_TOLERANCE) {
                drift.push(format!("seed {} expected {want_before:.4}->{want_after:.4}", s.seed));
            }
        }
    }
    let detail = format!("gain >= 10 points on {wins}/5 seeds [{}]", per_seed.join(" "));
    if wins < 4 {
        return Err(detail);
    }
    if !drift.is_empty() {
        return Err(format!("{detail}; differs from frozen fixture: {}", drift.join(", ")));
    }
    within_budget(detail, batch.seconds, 600.0)
}

pub fn ablation_direction(lab: &mut Lab) -> Outcome {
    let ablations = [Variant::NoMask, Variant::NoLsCon, Variant::NoLtCon, Variant::NoBothCon];
    let mut variants = vec![Variant::Full];
    variants.extend(ablations);
    let batch = lab.batch(&variants, &ABLATION_SEEDS)?;
    let acc = |v: Variant| mean(of(&batch, v).iter().map(|s| s.final_metrics.tgt_acc));
    let full = acc(Variant::Full);
    let mut problems = Vec::new();
    let mut parts = vec![format!("full {full:.4}")];
    for &v in &ablations {
        let a = acc(v);
        parts.push(format!("{v} {a:.4}"));
        if a > full + TIE {
            problems.push(format!("{v} beats full"));
        }
    }
    let both = acc(Variant::NoBothCon);
    if full - both < 0.01 {
        problems.push("no_both_con trails full by less than 1 point".into());
    }
    if ablations.iter().any(|&v| acc(v) < both) {
        problems.push("no_both_con is not the largest drop".into());
    }
    let detail = format!("mean target accuracy over 5 seeds: {}", parts.join(", "));
    if problems.is_empty() {
        within_budget(detail, batch.seconds, 2400.0)
    } else {
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

pub fn refinement_direction(lab: &mut Lab) -> Outcome {
    let batch = lab.batch(&[Variant::Full, Variant::TargetOrientedRefine], &DIRECTION_SEEDS)?;
    let pseudo = |v: Variant| mean(of(&batch, v).iter().map(|s| s.final_pseudo_acc));
    let (src, tgt) = (pseudo(Variant::Full), pseudo(Variant::TargetOrientedRefine));
    let detail = format!("final pseudo-label accuracy: source-oriented {src:.4}, target-oriented {tgt:.4}");
    if src + TIE >= tgt {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn token_divergence(lab: &mut Lab) -> Outcome {
    let batch = lab.batch(&[Variant::Full, Variant::SharedObjective], &DIRECTION_SEEDS)?;
    let cos = |v: Variant| mean(of(&batch, v).iter().map(|s| s.final_metrics.token_cos_mean));
    let (full, shared) = (cos(Variant::Full), cos(Variant::SharedObjective));
    let detail = format!("mean token cosine on target: full {full:.4}, shared_objective {shared:.4}");
    if full < shared {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn cross_classifier(lab: &mut Lab) -> Outcome {
    let batch = lab.batch(&[Variant::Full, Variant::NoBothCon], &DIRECTION_SEEDS)?;
    let gs = |v: Variant| mean(of(&batch, v).iter().map(|s| s.final_metrics.gs_on_target));
    let gt = |v: Variant| mean(of(&batch, v).iter().map(|s| s.final_metrics.gt_on_source));
    let detail = format!(
        "g^s on target {:.4} vs {:.4} (lambda=0), g^t on source {:.4} vs {:.4}",
        gs(Variant::Full),
        gs(Variant::NoBothCon),
        gt(Variant::Full),
        gt(Variant::NoBothCon)
    );
    if gs(Variant::Full) > gs(Variant::NoBothCon) && gt(Variant::Full) > gt(Variant::NoBothCon) {
        Ok(detail)
    } else {
        Err(detail)
    }
}
