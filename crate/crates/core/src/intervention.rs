// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept interventions: rank concepts with a policy, overwrite the first `n`
//! predicted scores with calibrated ground-truth values, re-classify.
//!
//! Only the classifier is re-run after an edit; saliency maps are left as they
//! were.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{ensure, Result};
use crate::metrics::{masked_probability, Faithfulness};
use crate::model::{classify, ForwardTrace, Model};
use crate::numeric::{
    argmax, derive_seed, logistic, mean_std, order_descending, percentile, softmax,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Uniformly random order.
    Rand,
    /// Most uncertain concept prediction first.
    Ucp,
    /// Largest concept prediction loss first.
    Lcp,
    /// Largest contribution to the predicted class first.
    Cctp,
    /// Highest per-concept average gain first.
    Ag,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [Self::Rand, Self::Ucp, Self::Lcp, Self::Cctp, Self::Ag];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rand => "rand",
            Self::Ucp => "ucp",
            Self::Lcp => "lcp",
            Self::Cctp => "cctp",
            Self::Ag => "ag",
        }
    }

    pub fn is_random(self) -> bool {
        self == Self::Rand
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionPolicy {
    pub kind: PolicyKind,
    /// Only used by [`PolicyKind::Rand`].
    pub seed: u64,
    /// Rank the AG policy least-faithful first instead.
    pub ag_ascending: bool,
}

impl InterventionPolicy {
    pub fn new(kind: PolicyKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            ag_ascending: false,
        }
    }
}

/// Replacement values: `hi` for ground-truth concepts, `lo` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementCalibration {
    pub hi: Vec<f64>,
    pub lo: Vec<f64>,
}

impl ReplacementCalibration {
    /// Per-concept 95th and 5th percentiles of a set of score vectors.
    pub fn from_scores(scores: &[Vec<f64>]) -> Result<Self> {
        ensure!(
            !scores.is_empty(),
            "calibration needs at least one score vector"
        );
        let c = scores[0].len();
        let mut hi = Vec::with_capacity(c);
        let mut lo = Vec::with_capacity(c);
        for i in 0..c {
            let col: Vec<f64> = scores.iter().map(|s| s[i]).collect();
            hi.push(percentile(&col, 95.0));
            lo.push(percentile(&col, 5.0));
        }
        Ok(Self { hi, lo })
    }

    /// Calibrates on the model's concept scores over `train`.
    pub fn from_model(model: &Model, train: &[Sample]) -> Result<Self> {
        let scores: Vec<Vec<f64>> = train
            .par_iter()
            .map(|s| Ok(model.trace(&model.encode(&s.image)?).f))
            .collect::<Result<_>>()?;
        Self::from_scores(&scores)
    }

    /// Fully replaced score vector for a sample.
    pub fn ground_truth_vector(&self, sample: &Sample) -> Vec<f64> {
        (0..self.hi.len())
            .map(|i| {
                if sample.has_concept(i) {
                    self.hi[i]
                } else {
                    self.lo[i]
                }
            })
            .collect()
    }
}

fn bernoulli_entropy(f: f64) -> f64 {
    let p = logistic(f);
    let q = logistic(-f);
    let term = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    term(p) + term(q)
}

fn sample_seed(seed: u64, sample: &Sample) -> u64 {
    let bytes = sample.id.bytes().map(u64::from).collect::<Vec<_>>();
    derive_seed(seed, &bytes)
}

/// Per-concept average gain of the predicted class under each concept's map.
pub fn concept_gains(model: &Model, trace: &ForwardTrace, sample: &Sample) -> Result<Vec<f64>> {
    let predicted = argmax(&trace.logits);
    let p0 = softmax(&trace.logits)[predicted];
    (0..trace.f.len())
        .map(|i| {
            let p1 = masked_probability(model, &sample.image, &trace.saliency.map(i), predicted)?;
            Ok(Faithfulness::from_probs(p0, p1).ag)
        })
        .collect()
}

/// Order in which concepts are corrected. Ties go to the lower index.
pub fn rank_concepts(
    policy: &InterventionPolicy,
    trace: &ForwardTrace,
    sample: &Sample,
    model: &Model,
) -> Result<Vec<usize>> {
    let f = &trace.f;
    Ok(match policy.kind {
        PolicyKind::Rand => {
            let mut order: Vec<usize> = (0..f.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(policy.seed, sample));
            order.shuffle(&mut rng);
            order
        }
        PolicyKind::Ucp => {
            order_descending(&f.iter().map(|&v| bernoulli_entropy(v)).collect::<Vec<_>>())
        }
        PolicyKind::Lcp => {
            let keys: Vec<f64> = f
                .iter()
                .enumerate()
                .map(|(i, &v)| (logistic(v) - sample.has_concept(i) as u8 as f64).abs())
                .collect();
            order_descending(&keys)
        }
        PolicyKind::Cctp => {
            let predicted = argmax(&trace.logits);
            let w = model.params.cls_w.row(predicted);
            order_descending(
                &f.iter()
                    .zip(w)
                    .map(|(v, w)| (v * w).abs())
                    .collect::<Vec<_>>(),
            )
        }
        PolicyKind::Ag => {
            let gains = concept_gains(model, trace, sample)?;
            let keys: Vec<f64> = if policy.ag_ascending {
                gains.iter().map(|g| -g).collect()
            } else {
                gains
            };
            order_descending(&keys)
        }
    })
}

/// Replaces the scores of the first `n` concepts of `order`.
pub fn intervene(
    f: &[f64],
    sample: &Sample,
    order: &[usize],
    n: usize,
    calib: &ReplacementCalibration,
) -> Vec<f64> {
    let c = f.len();
    let n = if n > c {
        warn!("intervention count {n} exceeds C = {c}; clamping");
        c
    } else {
        n
    };
    let mut out = f.to_vec();
    for &i in order.iter().take(n) {
        out[i] = if sample.has_concept(i) {
            calib.hi[i]
        } else {
            calib.lo[i]
        };
    }
    out
}

/// Task error (`1 − accuracy`) against intervention count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionCurve {
    pub counts: Vec<usize>,
    pub mean_error: Vec<f64>,
    pub std_error: Vec<f64>,
}

impl InterventionCurve {
    /// Whitespace-separated table with an `x mean std` header.
    pub fn to_table(&self) -> String {
        let mut out = String::from("x mean std\n");
        for ((n, m), s) in self
            .counts
            .iter()
            .zip(&self.mean_error)
            .zip(&self.std_error)
        {
            out.push_str(&format!("{n} {m:.6} {s:.6}\n"));
        }
        out
    }
}

/// Intervention curve over `samples`.
///
/// Random policies are rerun `repeats` times with seeds derived from the
/// policy seed; deterministic policies run once and report zero spread.
pub fn intervention_curve(
    model: &Model,
    samples: &[Sample],
    calib: &ReplacementCalibration,
    policy: &InterventionPolicy,
    counts: &[usize],
    repeats: usize,
) -> Result<InterventionCurve> {
    ensure!(
        counts.windows(2).all(|w| w[0] < w[1]),
        "counts must be strictly increasing"
    );
    ensure!(repeats >= 1, "repeats must be at least 1");
    let runs = if policy.kind.is_random() { repeats } else { 1 };

    let traces: Vec<ForwardTrace> = samples
        .par_iter()
        .map(|s| Ok(model.trace(&model.encode(&s.image)?)))
        .collect::<Result<_>>()?;

    // correct[run][count]
    let mut correct = vec![vec![0usize; counts.len()]; runs];
    for (run, row) in correct.iter_mut().enumerate() {
        let run_policy = InterventionPolicy {
            seed: derive_seed(policy.seed, &[run as u64]),
            ..*policy
        };
        let hits: Vec<Vec<bool>> = samples
            .par_iter()
            .zip(&traces)
            .map(|(s, t)| {
                let order = rank_concepts(&run_policy, t, s, model)?;
                Ok(counts
                    .iter()
                    .map(|&n| {
                        let f = intervene(&t.f, s, &order, n, calib);
                        argmax(&classify(&model.params, &f)) == s.class_label
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        for h in hits {
            for (slot, ok) in row.iter_mut().zip(h) {
                *slot += ok as usize;
            }
        }
    }

    let n = samples.len().max(1) as f64;
    let mut mean_error = Vec::with_capacity(counts.len());
    let mut std_error = Vec::with_capacity(counts.len());
    for j in 0..counts.len() {
        let total: usize = correct.iter().map(|r| r[j]).sum();
        mean_error.push(1.0 - total as f64 / (n * runs as f64));
        let errors: Vec<f64> = correct.iter().map(|r| 1.0 - r[j] as f64 / n).collect();
        std_error.push(if runs == 1 { 0.0 } else { mean_std(&errors).1 });
    }
    Ok(InterventionCurve {
        counts: counts.to_vec(),
        mean_error,
        std_error,
    })
}
