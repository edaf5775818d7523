// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic training over a frozen backbone, evaluation of checkpoints
//! and the loss-weight / data-fraction sweep.
//!
//! Determinism comes from three rules: every random stream is a
//! `ChaCha8Rng` seeded through [`derive_seed`], parallel maps collect in input
//! order, and batch gradients are summed sequentially in sample order.

mod checkpoint;
mod config;
mod optim;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::encoders::similarity_vector;
use crate::encoders::{prototypes_from_features, Backbone, ConceptFeatures, SpatialFeatures};
use crate::error::{ensure, Error, Result};
use crate::losses::{loss_ce_grad, total_loss, LossBreakdown, Target};
use crate::metrics::{evaluate_model, MetricsReport};
use crate::model::{backward, classify, forward_with_cache, HeadKind, Model, ModelParams};
use crate::numeric::{derive_seed, mix64};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{OptimizerConfig, TrainConfig};
pub use optim::Adam;

const STREAM_SUBSET: u64 = 0x5u64 << 32;
const STREAM_INIT: u64 = 0x1;
const STREAM_SHUFFLE: u64 = 0x2;
const STREAM_ABLATE: u64 = 0xAB1;

/// One optimizer step of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// Renders the log as JSON lines.
pub fn log_to_jsonl(log: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("log record serializes"));
        out.push('\n');
    }
    out
}

fn id_hash(seed: u64, id: &str) -> u64 {
    let folded = id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| mix64(h ^ b as u64));
    derive_seed(seed, &[STREAM_SUBSET, folded])
}

/// The `⌈N·fraction⌉` training samples with the smallest seeded id hash, in
/// their original order.
pub fn training_subset(samples: &[Sample], fraction: f64, seed: u64) -> Result<Vec<&Sample>> {
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        "data_fraction must lie in (0, 1], got {fraction}"
    );
    let keep = ((samples.len() as f64) * fraction).ceil() as usize;
    let mut ranked: Vec<(u64, usize)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (id_hash(seed, &s.id), i))
        .collect();
    ranked.sort_unstable();
    let mut chosen: Vec<usize> = ranked.into_iter().take(keep).map(|(_, i)| i).collect();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| &samples[i]).collect())
}

/// Everything `train` derives from the data before the first step.
struct Prepared<'a> {
    samples: Vec<&'a Sample>,
    features: Vec<SpatialFeatures>,
    concepts: ConceptFeatures,
    backbone: Backbone,
}

fn prepare<'a>(config: &TrainConfig, dataset: &'a Dataset) -> Result<Prepared<'a>> {
    dataset.validate()?;
    let samples = training_subset(&dataset.train, config.data_fraction, config.seed)?;
    ensure!(!samples.is_empty(), "training split is empty");
    let backbone = Backbone::new(config.backbone)?;
    let features = backbone.encode_all(samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let owned: Vec<Sample> = samples.iter().map(|s| (*s).clone()).collect();
    let mut concepts = prototypes_from_features(
        config.backbone.patch_size,
        &dataset.vocab,
        &owned,
        &features,
    )?;
    concepts.rows.mapv_inplace(crate::numeric::quantize_f32);
    Ok(Prepared {
        samples,
        features,
        concepts,
        backbone,
    })
}

/// Loss and parameter gradient of one batch.
fn batch_step(
    config: &TrainConfig,
    params: &ModelParams,
    concepts: &ConceptFeatures,
    batch: &[usize],
    prepared: &Prepared<'_>,
) -> Result<(LossBreakdown, ModelParams)> {
    let targets: Vec<Target<'_>> = batch
        .iter()
        .map(|&i| Target {
            label: prepared.samples[i].class_label,
            concepts: &prepared.samples[i].concepts,
        })
        .collect();
    let mut grad = params.zeros_like();
    match config.head {
        HeadKind::Slcbm => {
            let passes: Vec<_> = batch
                .par_iter()
                .map(|&i| forward_with_cache(params, &prepared.features[i], concepts))
                .collect();
            let traces: Vec<_> = passes.iter().map(|(t, _)| t.clone()).collect();
            let (losses, upstream) = total_loss(&config.loss, &traces, &targets)?;
            let grads: Vec<ModelParams> = batch
                .par_iter()
                .zip(passes.par_iter())
                .zip(upstream.par_iter())
                .map(|((&i, (trace, cache)), up)| {
                    backward(params, &prepared.features[i], trace, cache, up).params
                })
                .collect();
            for g in &grads {
                grad.add_scaled(g, 1.0);
            }
            Ok((losses, grad))
        }
        HeadKind::Baseline => {
            let inv = 1.0 / batch.len() as f64;
            let mut losses = LossBreakdown::default();
            for (&i, y) in batch.iter().zip(&targets) {
                let z = similarity_vector(concepts, prepared.features[i].summary.view());
                let (v, d) = loss_ce_grad(&classify(params, &z), y.label)?;
                losses.ce += v * inv;
                for (k, dk) in d.iter().enumerate() {
                    grad.cls_b[k] += dk * inv;
                    for (c, zc) in z.iter().enumerate() {
                        grad.cls_w[[k, c]] += dk * zc * inv;
                    }
                }
            }
            losses.weighted_ce = losses.ce;
            losses.total = losses.ce;
            Ok((losses, grad))
        }
    }
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.ce += b.ce / n;
        m.ca += b.ca / n;
        m.entropy += b.entropy / n;
        m.contrastive += b.contrastive / n;
        m.weighted_ce += b.weighted_ce / n;
        m.weighted_ca += b.weighted_ca / n;
        m.weighted_entropy += b.weighted_entropy / n;
        m.weighted_contrastive += b.weighted_contrastive / n;
        m.total += b.total / n;
    }
    m
}

/// Trains the configured head on `dataset.train`.
///
/// The baseline head only fits its classifier with cross-entropy; the other
/// loss weights are ignored for it.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(Checkpoint, Vec<LogRecord>)> {
    config.validate()?;
    let prepared = prepare(config, dataset)?;
    let n = prepared.samples.len();
    let c = dataset.num_concepts();
    let k = dataset.num_classes();
    let d = config.backbone.feature_dim;
    let mut params = ModelParams::init(c, d, k, derive_seed(config.seed, &[STREAM_INIT]));
    let mut adam = Adam::new(&config.optimizer, &params);
    let batch_size = config.optimizer.batch_size;
    info!(
        "training {:?} head on {n} samples for {} epochs (batch {batch_size})",
        config.head, config.optimizer.epochs
    );

    let mut log = Vec::new();
    let mut last_epoch = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.optimizer.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        last_epoch.clear();
        for batch in order.chunks(batch_size) {
            let (losses, grad) = batch_step(config, &params, &prepared.concepts, batch, &prepared)?;
            let step = adam.steps() + 1;
            if let Some((term, value)) = losses.first_non_finite() {
                return Err(Error::Diverged {
                    step: step as usize,
                    term: term.to_string(),
                    value,
                });
            }
            adam.step(&mut params, &grad);
            if !params.is_finite() {
                return Err(Error::Diverged {
                    step: step as usize,
                    term: "parameters".into(),
                    value: f64::NAN,
                });
            }
            log.push(LogRecord {
                step,
                epoch,
                batch_size: batch.len(),
                losses,
            });
            last_epoch.push(losses);
        }
        if let Some(last) = last_epoch.last() {
            debug!("epoch {epoch}: last batch loss {:.6}", last.total);
        }
    }
    params.quantize();

    let checkpoint = Checkpoint {
        head: config.head,
        config: config.clone(),
        backbone: *prepared.backbone.config(),
        vocab: dataset.vocab.clone(),
        class_names: dataset.class_names.clone(),
        concepts: prepared.concepts,
        params,
        steps: adam.steps(),
        final_losses: mean_breakdown(&last_epoch),
    };
    Ok((checkpoint, log))
}

/// Full metrics report of `checkpoint` over `dataset.test`.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<MetricsReport> {
    checkpoint.vocab.check_matches(&dataset.vocab)?;
    ensure!(
        checkpoint.class_names.len() == dataset.num_classes(),
        "checkpoint has {} classes, dataset has {}",
        checkpoint.class_names.len(),
        dataset.num_classes()
    );
    let model = checkpoint.model()?;
    evaluate_model(&model, &dataset.test, &checkpoint.config.eval)
}

/// Model for a checkpoint after checking it matches `dataset`.
pub fn model_for(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Model> {
    checkpoint.vocab.check_matches(&dataset.vocab)?;
    checkpoint.model()
}

/// Grid coordinates of one sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationKey {
    pub lambda_e: f64,
    pub lambda_c: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    #[serde(flatten)]
    pub key: AblationKey,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
    #[serde(skip)]
    pub log: Vec<LogRecord>,
}

/// Train and evaluate at every grid point. Cell seeds derive from the base
/// seed and grid indices; a failing cell records its error and the sweep goes on.
pub fn ablate(
    base: &TrainConfig,
    dataset: &Dataset,
    lambda_e: &[f64],
    lambda_c: &[f64],
    fractions: &[f64],
) -> Result<Vec<AblationCell>> {
    ensure!(
        !lambda_e.is_empty() && !lambda_c.is_empty() && !fractions.is_empty(),
        "ablation grids must be non-empty"
    );
    let mut cells = Vec::new();
    for (a, &le) in lambda_e.iter().enumerate() {
        for (b, &lc) in lambda_c.iter().enumerate() {
            for (f, &frac) in fractions.iter().enumerate() {
                let key = AblationKey {
                    lambda_e: le,
                    lambda_c: lc,
                    fraction: frac,
                };
                let seed = derive_seed(base.seed, &[STREAM_ABLATE, a as u64, b as u64, f as u64]);
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.loss.lambda_e = le;
                cfg.loss.lambda_c = lc;
                cfg.data_fraction = frac;
                info!("ablation cell lambda_e={le} lambda_c={lc} fraction={frac}");
                let outcome = train(&cfg, dataset)
                    .and_then(|(ckpt, log)| Ok((evaluate(&ckpt, dataset)?, log)));
                let cell = match outcome {
                    Ok((report, log)) => AblationCell {
                        key,
                        seed,
                        report: Some(report),
                        error: None,
                        log,
                    },
                    Err(e) => {
                        log::warn!("ablation cell {key:?} failed: {e}");
                        AblationCell {
                            key,
                            seed,
                            report: None,
                            error: Some(e.to_string()),
                            log: Vec::new(),
                        }
                    }
                };
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, SynthSpec};

    fn tiny() -> Dataset {
        generate_dataset(&SynthSpec {
            image_size: 32,
            samples_per_class: 10,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.optimizer.epochs = epochs;
        cfg.optimizer.batch_size = 16;
        cfg.backbone.feature_dim = 16;
        cfg
    }

    #[test]
    fn subset_size_and_determinism() {
        let d = tiny();
        let n = d.train.len();
        let half = training_subset(&d.train, 0.5, 7).unwrap();
        assert_eq!(half.len(), n.div_ceil(2));
        let again = training_subset(&d.train, 0.5, 7).unwrap();
        assert!(half.iter().zip(&again).all(|(a, b)| a.id == b.id));
        assert_eq!(training_subset(&d.train, 1.0, 7).unwrap().len(), n);
    }

    #[test]
    fn step_count_and_bit_identical_reruns() {
        let d = tiny();
        let cfg = quick(2);
        let (a, log) = train(&cfg, &d).unwrap();
        let (b, _) = train(&cfg, &d).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(log.len() as u64, 2 * d.train.len().div_ceil(16) as u64);
        assert_eq!(a.steps, log.len() as u64);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let d = tiny();
        let (ckpt, _) = train(&quick(1), &d).unwrap();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes(), std::path::Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(evaluate(&back, &d).unwrap(), evaluate(&ckpt, &d).unwrap());
    }

    #[test]
    fn bad_header_is_parse_error() {
        let mut bytes = 5u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{nope");
        let err = Checkpoint::from_bytes(&bytes, std::path::Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn disabled_entropy_term_logs_zero() {
        let d = tiny();
        let mut cfg = quick(1);
        cfg.loss.lambda_e = 0.0;
        let (_, log) = train(&cfg, &d).unwrap();
        assert!(log
            .iter()
            .all(|r| r.losses.weighted_entropy == 0.0 && r.losses.entropy == 0.0));
    }
}
