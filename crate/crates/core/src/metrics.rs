// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation metrics: concept/class accuracy, NEC and ANEC, overlap metrics
//! against annotated masks (IoU, Dice, compact IoU) and masking-based
//! faithfulness without annotations (average drop, increase and gain).
//!
//! Annotated metrics are computed at feature-grid resolution: ground-truth
//! masks are area-downsampled (coverage > 0.5) to the saliency grid.

use std::collections::BTreeMap;

use log::warn;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{FloatImage, Image, Sample};
use crate::error::{ensure, Result};
use crate::losses::{loss_entropy, EntropyReduction};
use crate::model::{classify, ForwardTrace, Model, ModelParams};
use crate::numeric::{argmax, order_descending, softmax};

/// Guard for `1 − p₀` in the average-gain denominator.
pub const GAIN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Concept,
    Class,
}

/// Fraction of the top-`k` scoring concepts that are ground truth, `k = |C_gt|`.
/// Ties go to the lower index. `None` for an empty ground-truth set.
pub fn concept_accuracy(f: &[f64], concepts: &[usize]) -> Option<f64> {
    let k = concepts.len();
    if k == 0 {
        return None;
    }
    let hits = order_descending(f)
        .into_iter()
        .take(k)
        .filter(|i| concepts.contains(i))
        .count();
    Some(hits as f64 / k as f64)
}

/// Class predicted from `f` after keeping only the `m` concepts with the
/// largest contribution `|W[l̂,i] f_i|` to the originally predicted class `l̂`.
pub fn nec_predict(params: &ModelParams, f: &[f64], m: usize) -> usize {
    let predicted = argmax(&classify(params, f));
    let contrib: Vec<f64> = f
        .iter()
        .enumerate()
        .map(|(i, v)| (params.cls_w[[predicted, i]] * v).abs())
        .collect();
    let mut pruned = vec![0.0; f.len()];
    for i in order_descending(&contrib).into_iter().take(m) {
        pruned[i] = f[i];
    }
    argmax(&classify(params, &pruned))
}

/// Accuracy of [`nec_predict`] over a set of traces. `m > C` is clamped.
pub fn nec_accuracy(
    params: &ModelParams,
    traces: &[ForwardTrace],
    labels: &[usize],
    m: usize,
) -> f64 {
    let c = params.num_concepts();
    let m = if m > c {
        warn!("NEC size {m} exceeds C = {c}; clamping");
        c
    } else {
        m
    };
    if traces.is_empty() {
        return 0.0;
    }
    let correct = traces
        .iter()
        .zip(labels)
        .filter(|(t, &l)| nec_predict(params, &t.f, m) == l)
        .count();
    correct as f64 / traces.len() as f64
}

/// Mean of [`nec_accuracy`] over `ms`.
pub fn anec(params: &ModelParams, traces: &[ForwardTrace], labels: &[usize], ms: &[usize]) -> f64 {
    if ms.is_empty() {
        return 0.0;
    }
    ms.iter()
        .map(|&m| nec_accuracy(params, traces, labels, m))
        .sum::<f64>()
        / ms.len() as f64
}

/// Max-min normalization to `[0, 1]`; `None` for a constant map.
pub fn normalize_minmax(s: &Array2<f64>) -> Option<Array2<f64>> {
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    (range > 0.0 && range.is_finite()).then(|| s.mapv(|v| (v - min) / range))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinarizedMap {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl BinarizedMap {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }
}

/// Max-min normalize, then threshold strictly above 0.5. Constant maps are all off.
pub fn binarize(s: &Array2<f64>) -> BinarizedMap {
    let (height, width) = s.dim();
    let cells = match normalize_minmax(s) {
        Some(n) => n.iter().map(|&v| v > 0.5).collect(),
        None => vec![false; height * width],
    };
    BinarizedMap {
        height,
        width,
        cells,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Overlap {
    pub iou: f64,
    pub dice: f64,
    pub ciou: f64,
}

/// IoU, Dice and compact IoU (`|B∩M| / |B|`); empty denominators give 0.
pub fn overlap_metrics(b: &BinarizedMap, m: &[bool]) -> Result<Overlap> {
    ensure!(
        b.cells.len() == m.len(),
        "binarized map has {} cells, mask has {}",
        b.cells.len(),
        m.len()
    );
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut nb = 0usize;
    let mut nm = 0usize;
    for (&x, &y) in b.cells.iter().zip(m) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
        nb += x as usize;
        nm += y as usize;
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    Ok(Overlap {
        iou: ratio(inter, union),
        dice: ratio(2 * inter, nb + nm),
        ciou: ratio(inter, nb),
    })
}

/// Mean of `metric_i * 1[correct_i]`.
pub fn accuracy_weighted(metrics: &[f64], correct: &[bool]) -> Result<f64> {
    ensure!(
        metrics.len() == correct.len(),
        "metric/correctness length mismatch"
    );
    if metrics.is_empty() {
        warn!("accuracy-weighted metric over an empty set");
        return Ok(0.0);
    }
    let total: f64 = metrics
        .iter()
        .zip(correct)
        .map(|(m, &c)| if c { *m } else { 0.0 })
        .sum();
    Ok(total / metrics.len() as f64)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample_bilinear(s: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = s.dim();
    let taps = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let u = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = u.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, u - lo as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = taps(y, out_h, h);
        let (x0, x1, fx) = taps(x, out_w, w);
        let top = s[[y0, x0]] * (1.0 - fx) + s[[y0, x1]] * fx;
        let bottom = s[[y1, x0]] * (1.0 - fx) + s[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Saliency normalized for masking: max-min to `[0, 1]`; a constant map keeps
/// its value clamped to `[0, 1]`, so an all-ones map is the identity mask.
pub fn masking_weights(s: &Array2<f64>) -> Array2<f64> {
    normalize_minmax(s).unwrap_or_else(|| {
        s.mapv(|v| {
            if v.is_finite() {
                v.clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
    })
}

/// `x ⊙ S`: normalized saliency, bilinearly upsampled, applied to every channel.
pub fn mask_image(image: &Image, s: &Array2<f64>) -> FloatImage {
    let weights = upsample_bilinear(&masking_weights(s), image.height, image.width);
    let mut out = FloatImage::from(image);
    for y in 0..image.height {
        for x in 0..image.width {
            let w = weights[[y, x]];
            for c in 0..3 {
                out.data[(y * image.width + x) * 3 + c] *= w;
            }
        }
    }
    out
}

/// Per-map contributions to average drop, increase and gain.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Faithfulness {
    pub ad: f64,
    pub ai: f64,
    pub ag: f64,
}

impl Faithfulness {
    /// `p0` is the class probability on the original image, `p1` on the masked one.
    pub fn from_probs(p0: f64, p1: f64) -> Self {
        Self {
            ad: if p0 > 0.0 {
                (p0 - p1).max(0.0) / p0
            } else {
                0.0
            },
            ai: (p1 > p0) as u8 as f64,
            ag: (p1 - p0).max(0.0) / (1.0 - p0).max(GAIN_EPS),
        }
    }

    fn mean(items: &[Faithfulness]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        Self {
            ad: items.iter().map(|f| f.ad).sum::<f64>() / n,
            ai: items.iter().map(|f| f.ai).sum::<f64>() / n,
            ag: items.iter().map(|f| f.ag).sum::<f64>() / n,
        }
    }
}

/// Probability of `class` after masking `image` with `map`.
pub fn masked_probability(
    model: &Model,
    image: &Image,
    map: &Array2<f64>,
    class: usize,
) -> Result<f64> {
    let feats = model.backbone.encode_float(&mask_image(image, map))?;
    Ok(softmax(&model.logits(&feats))[class])
}

/// Saliency maps evaluated at `level` for one sample: every ground-truth
/// concept map, or the class map of the ground-truth class.
fn level_maps(
    model: &Model,
    sample: &Sample,
    trace: &ForwardTrace,
    feats: &crate::encoders::SpatialFeatures,
    level: Level,
) -> Result<Vec<Array2<f64>>> {
    Ok(match level {
        Level::Concept => sample
            .concepts
            .iter()
            .map(|&i| trace.saliency.map(i))
            .collect(),
        Level::Class => vec![model.class_map(trace, feats, sample.class_label)?],
    })
}

fn sample_faithfulness(model: &Model, sample: &Sample, level: Level) -> Result<Faithfulness> {
    let feats = model.encode(&sample.image)?;
    let trace = model.trace(&feats);
    let p0 = softmax(&trace.logits)[sample.class_label];
    let mut items = Vec::new();
    for map in level_maps(model, sample, &trace, &feats, level)? {
        let p1 = masked_probability(model, &sample.image, &map, sample.class_label)?;
        items.push(Faithfulness::from_probs(p0, p1));
    }
    Ok(Faithfulness::mean(&items))
}

/// Average drop, increase and gain of the ground-truth class probability when
/// each image is masked by its saliency at `level`. Per-image values average
/// the image's maps; the result averages images.
pub fn faithfulness_unannotated(
    model: &Model,
    samples: &[Sample],
    level: Level,
) -> Result<Faithfulness> {
    let per: Vec<Faithfulness> = samples
        .par_iter()
        .map(|s| sample_faithfulness(model, s, level))
        .collect::<Result<_>>()?;
    Ok(Faithfulness::mean(&per))
}

/// Concept-level and class-level value of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LevelPair {
    #[serde(serialize_with = "ser_percent", deserialize_with = "de_percent")]
    pub concept: f64,
    #[serde(serialize_with = "ser_percent", deserialize_with = "de_percent")]
    pub class: f64,
}

/// Evaluation summary. Fractions in memory; percentages with two decimals in JSON.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    /// Samples with an empty ground-truth concept set, excluded from concept accuracy.
    pub excluded_empty_concepts: usize,
    #[serde(serialize_with = "ser_percent", deserialize_with = "de_percent")]
    pub concept_accuracy: f64,
    #[serde(serialize_with = "ser_percent", deserialize_with = "de_percent")]
    pub class_accuracy: f64,
    #[serde(
        serialize_with = "ser_percent_map",
        deserialize_with = "de_percent_map"
    )]
    pub nec: BTreeMap<usize, f64>,
    #[serde(serialize_with = "ser_percent", deserialize_with = "de_percent")]
    pub anec: f64,
    pub iou: LevelPair,
    pub dice: LevelPair,
    pub ciou: LevelPair,
    pub ad: LevelPair,
    pub ai: LevelPair,
    pub ag: LevelPair,
    /// Mean per-cell entropy (nats) of the concept saliency stack.
    pub entropy_per_cell: f64,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn ser_percent<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round2(v * 100.0))
}

fn de_percent<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(f64::deserialize(d)? / 100.0)
}

fn ser_percent_map<S: Serializer>(
    m: &BTreeMap<usize, f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    let out: BTreeMap<String, f64> = m
        .iter()
        .map(|(k, v)| (k.to_string(), round2(v * 100.0)))
        .collect();
    out.serialize(s)
}

fn de_percent_map<'de, D: Deserializer<'de>>(
    d: D,
) -> std::result::Result<BTreeMap<usize, f64>, D::Error> {
    let raw = BTreeMap::<String, f64>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| {
            k.parse()
                .map(|k| (k, v / 100.0))
                .map_err(serde::de::Error::custom)
        })
        .collect()
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Concept counts averaged by ANEC; NEC is reported for each.
    pub nec_sizes: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nec_sizes: vec![5, 10, 15],
        }
    }
}

/// Per-sample quantities gathered in one pass.
struct SampleEval {
    trace: ForwardTrace,
    correct: bool,
    concept_acc: Option<f64>,
    concept_overlap: Overlap,
    class_overlap: Overlap,
    entropy: f64,
    concept_faith: Faithfulness,
    class_faith: Faithfulness,
}

fn mean_overlap(items: &[Overlap]) -> Overlap {
    if items.is_empty() {
        return Overlap::default();
    }
    let n = items.len() as f64;
    Overlap {
        iou: items.iter().map(|o| o.iou).sum::<f64>() / n,
        dice: items.iter().map(|o| o.dice).sum::<f64>() / n,
        ciou: items.iter().map(|o| o.ciou).sum::<f64>() / n,
    }
}

fn eval_sample(model: &Model, sample: &Sample) -> Result<SampleEval> {
    let feats = model.encode(&sample.image)?;
    let trace = model.trace(&feats);
    let predicted = argmax(&trace.logits);
    let cell = sample.image.width / feats.width;

    let mut concept_items = Vec::new();
    for &i in &sample.concepts {
        let b = binarize(&trace.saliency.map(i));
        concept_items.push(overlap_metrics(
            &b,
            &sample.concept_masks[i].downsample(cell),
        )?);
    }
    let class_map = model.class_map(&trace, &feats, sample.class_label)?;
    let class_overlap =
        overlap_metrics(&binarize(&class_map), &sample.class_mask.downsample(cell))?;

    let p0 = softmax(&trace.logits)[sample.class_label];
    let mut concept_faith = Vec::new();
    for &i in &sample.concepts {
        let p1 = masked_probability(
            model,
            &sample.image,
            &trace.saliency.map(i),
            sample.class_label,
        )?;
        concept_faith.push(Faithfulness::from_probs(p0, p1));
    }
    let p1 = masked_probability(model, &sample.image, &class_map, sample.class_label)?;

    Ok(SampleEval {
        correct: predicted == sample.class_label,
        concept_acc: concept_accuracy(&trace.f, &sample.concepts),
        concept_overlap: mean_overlap(&concept_items),
        class_overlap,
        entropy: loss_entropy(&trace.saliency, EntropyReduction::Mean),
        concept_faith: Faithfulness::mean(&concept_faith),
        class_faith: Faithfulness::from_probs(p0, p1),
        trace,
    })
}

/// Full report over `samples`.
pub fn evaluate_model(
    model: &Model,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let evals: Vec<SampleEval> = samples
        .par_iter()
        .map(|s| eval_sample(model, s))
        .collect::<Result<_>>()?;
    let n = evals.len();
    let mut report = MetricsReport {
        samples: n,
        ..Default::default()
    };
    if n == 0 {
        warn!("evaluating an empty sample set");
        return Ok(report);
    }
    let nf = n as f64;
    let accs: Vec<f64> = evals.iter().filter_map(|e| e.concept_acc).collect();
    report.excluded_empty_concepts = n - accs.len();
    report.concept_accuracy = if accs.is_empty() {
        0.0
    } else {
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    let correct: Vec<bool> = evals.iter().map(|e| e.correct).collect();
    report.class_accuracy = correct.iter().filter(|&&c| c).count() as f64 / nf;

    let traces: Vec<ForwardTrace> = evals.iter().map(|e| e.trace.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.class_label).collect();
    for &m in &cfg.nec_sizes {
        report
            .nec
            .insert(m, nec_accuracy(&model.params, &traces, &labels, m));
    }
    report.anec = anec(&model.params, &traces, &labels, &cfg.nec_sizes);

    let weighted = |get: &dyn Fn(&SampleEval) -> f64| -> Result<f64> {
        accuracy_weighted(&evals.iter().map(get).collect::<Vec<_>>(), &correct)
    };
    report.iou = LevelPair {
        concept: weighted(&|e| e.concept_overlap.iou)?,
        class: weighted(&|e| e.class_overlap.iou)?,
    };
    report.dice = LevelPair {
        concept: weighted(&|e| e.concept_overlap.dice)?,
        class: weighted(&|e| e.class_overlap.dice)?,
    };
    report.ciou = LevelPair {
        concept: weighted(&|e| e.concept_overlap.ciou)?,
        class: weighted(&|e| e.class_overlap.ciou)?,
    };

    let mean = |get: &dyn Fn(&SampleEval) -> f64| evals.iter().map(get).sum::<f64>() / nf;
    report.ad = LevelPair {
        concept: mean(&|e| e.concept_faith.ad),
        class: mean(&|e| e.class_faith.ad),
    };
    report.ai = LevelPair {
        concept: mean(&|e| e.concept_faith.ai),
        class: mean(&|e| e.class_faith.ai),
    };
    report.ag = LevelPair {
        concept: mean(&|e| e.concept_faith.ag),
        class: mean(&|e| e.class_faith.ag),
    };
    report.entropy_per_cell = mean(&|e| e.entropy);
    Ok(report)
}
