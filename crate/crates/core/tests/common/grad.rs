// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analytic gradients against central finite differences on small random
//! instances (C <= 4, D <= 6, 2x2 grid).

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use slcbm::encoders::{ConceptFeatures, SpatialFeatures};
use slcbm::losses::{
    loss_ca, loss_ca_grad, loss_ce, loss_ce_grad, loss_contrastive, loss_contrastive_grad,
    loss_entropy, loss_entropy_grad, total_loss, EntropyReduction, LossWeights, Target,
};
use slcbm::model::{
    backward, classify, forward, forward_with_cache, fuse, ForwardTrace, ModelParams, SaliencyStack,
};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;
const INSTANCES: u64 = 24;

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let d = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

fn matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_vec((r, c), normal(rng, r * c)).unwrap()
}

/// Relative error of two gradient vectors, measured in the Euclidean norm.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + STEP;
            let up = f(&work);
            work[i] = x[i] - STEP;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

struct Instance {
    c: usize,
    d: usize,
    k: usize,
    params: ModelParams,
    features: Vec<SpatialFeatures>,
    concepts: ConceptFeatures,
    labels: Vec<usize>,
    concept_sets: Vec<Vec<usize>>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(2..=4);
    let d = rng.random_range(2..=6);
    let k = rng.random_range(2..=3);
    let mut params = ModelParams::init(c, d, k, seed);
    params.conv_b = Array1::from(normal(&mut rng, c));
    params.cls_b = Array1::from(normal(&mut rng, k));
    params.out_scale = rng.random_range(-1.5..1.5);
    let features = (0..3)
        .map(|_| SpatialFeatures::from_grid(2, 2, matrix(&mut rng, 4, d)).unwrap())
        .collect::<Vec<_>>();
    let concepts = ConceptFeatures::from_rows(matrix(&mut rng, c, d)).unwrap();
    // two samples share a label so the contrastive term has a positive pair
    let labels = vec![0, 0, rng.random_range(0..k)];
    let concept_sets = (0..3)
        .map(|_| (0..c).filter(|_| rng.random_bool(0.5)).collect::<Vec<_>>())
        .collect();
    Instance {
        c,
        d,
        k,
        params,
        features,
        concepts,
        labels,
        concept_sets,
    }
}

pub fn cross_entropy_gradient() {
    for seed in 0..INSTANCES {
        let inst = instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let logits: Vec<f64> = normal(&mut rng, inst.k).iter().map(|v| 3.0 * v).collect();
        let label = rng.random_range(0..inst.k);
        let (_, g) = loss_ce_grad(&logits, label).unwrap();
        let n = central_diff(&logits, |x| loss_ce(x, label).unwrap());
        assert!(
            rel_err(&g, &n) < TOL,
            "instance {seed}: {}",
            rel_err(&g, &n)
        );
    }
}

pub fn concept_alignment_gradient() {
    for seed in 0..INSTANCES {
        let inst = instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let f = normal(&mut rng, inst.c);
        let gamma = rng.random_range(0.5..2.0);
        let set = &inst.concept_sets[0];
        let (_, g) = loss_ca_grad(&f, set, gamma).unwrap();
        let n = central_diff(&f, |x| loss_ca(x, set, gamma).unwrap());
        assert!(
            rel_err(&g, &n) < TOL,
            "instance {seed}: {}",
            rel_err(&g, &n)
        );
    }
}

pub fn entropy_gradient_both_reductions() {
    for seed in 0..INSTANCES {
        let inst = instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let maps = matrix(&mut rng, inst.c, 4) * 2.0;
        for reduction in [EntropyReduction::Sum, EntropyReduction::Mean] {
            let stack = SaliencyStack {
                height: 2,
                width: 2,
                maps: maps.clone(),
            };
            let (_, g) = loss_entropy_grad(&stack, reduction);
            let x: Vec<f64> = maps.iter().copied().collect();
            let n = central_diff(&x, |v| {
                let s = SaliencyStack {
                    height: 2,
                    width: 2,
                    maps: Array2::from_shape_vec((inst.c, 4), v.to_vec()).unwrap(),
                };
                loss_entropy(&s, reduction)
            });
            let g: Vec<f64> = g.iter().copied().collect();
            assert!(
                rel_err(&g, &n) < TOL,
                "instance {seed} {reduction:?}: {}",
                rel_err(&g, &n)
            );
        }
    }
}

pub fn contrastive_gradient() {
    for seed in 0..INSTANCES {
        let inst = instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let batch: Vec<Vec<f64>> = (0..3).map(|_| normal(&mut rng, inst.c)).collect();
        let tau = rng.random_range(0.05..1.0);
        let (_, g) = loss_contrastive_grad(&batch, &inst.labels, tau);
        let flat: Vec<f64> = batch.concat();
        let n = central_diff(&flat, |v| {
            let b: Vec<Vec<f64>> = v.chunks(inst.c).map(|r| r.to_vec()).collect();
            loss_contrastive(&b, &inst.labels, tau)
        });
        let g = g.concat();
        assert!(
            rel_err(&g, &n) < TOL,
            "instance {seed}: {}",
            rel_err(&g, &n)
        );
    }
}

fn all_terms() -> LossWeights {
    LossWeights {
        lambda_c: 0.5,
        ..LossWeights::default()
    }
}

fn targets(inst: &Instance) -> Vec<Target<'_>> {
    inst.labels
        .iter()
        .zip(&inst.concept_sets)
        .map(|(&label, s)| Target { label, concepts: s })
        .collect()
}

fn batch_loss(inst: &Instance, params: &ModelParams, weights: &LossWeights) -> f64 {
    let traces: Vec<ForwardTrace> = inst
        .features
        .iter()
        .map(|f| forward(params, f, &inst.concepts))
        .collect();
    total_loss(weights, &traces, &targets(inst))
        .unwrap()
        .0
        .total
}

pub fn full_forward_parameter_gradients() {
    let weights = all_terms();
    for seed in 0..INSTANCES {
        let inst = instance(seed);
        let run: Vec<_> = inst
            .features
            .iter()
            .map(|f| forward_with_cache(&inst.params, f, &inst.concepts))
            .collect();
        let traces: Vec<ForwardTrace> = run.iter().map(|(t, _)| t.clone()).collect();
        let (_, upstream) = total_loss(&weights, &traces, &targets(&inst)).unwrap();
        let mut analytic = inst.params.zeros_like();
        for ((feats, (trace, cache)), up) in inst.features.iter().zip(&run).zip(&upstream) {
            analytic.add_scaled(&backward(&inst.params, feats, trace, cache, up).params, 1.0);
        }

        let base = inst.params.clone();
        let names = slcbm::model::PARAM_NAMES;
        for (a, name) in analytic.slices().iter().zip(names) {
            let x = param_slice(&base, name).to_vec();
            let n = central_diff(&x, |v| {
                let mut p = base.clone();
                param_slice_mut(&mut p, name).copy_from_slice(v);
                batch_loss(&inst, &p, &weights)
            });
            let e = rel_err(a, &n);
            assert!(
                e < TOL,
                "instance {seed} (C={}, D={}) {name}: {e}",
                inst.c,
                inst.d
            );
        }
    }
}

fn param_slice<'a>(p: &'a ModelParams, name: &str) -> &'a [f64] {
    let i = slcbm::model::PARAM_NAMES
        .iter()
        .position(|n| *n == name)
        .unwrap();
    p.slices()[i]
}

fn param_slice_mut<'a>(p: &'a mut ModelParams, name: &str) -> &'a mut [f64] {
    let i = slcbm::model::PARAM_NAMES
        .iter()
        .position(|n| *n == name)
        .unwrap();
    p.slices_mut().into_iter().nth(i).unwrap()
}

pub fn full_forward_similarity_gradient() {
    let weights = all_terms();
    for seed in 0..INSTANCES {
        let inst = instance(seed);
        let run: Vec<_> = inst
            .features
            .iter()
            .map(|f| forward_with_cache(&inst.params, f, &inst.concepts))
            .collect();
        let traces: Vec<ForwardTrace> = run.iter().map(|(t, _)| t.clone()).collect();
        let (_, upstream) = total_loss(&weights, &traces, &targets(&inst)).unwrap();
        for j in 0..traces.len() {
            let (trace, cache) = &run[j];
            let g = backward(&inst.params, &inst.features[j], trace, cache, &upstream[j]).z;
            let n = central_diff(&trace.z, |z| {
                let mut ts = traces.clone();
                let f = fuse(&inst.params, z, &trace.saliency, &inst.features[j]);
                ts[j] = ForwardTrace {
                    z: z.to_vec(),
                    logits: classify(&inst.params, &f),
                    f,
                    saliency: trace.saliency.clone(),
                };
                total_loss(&weights, &ts, &targets(&inst)).unwrap().0.total
            });
            assert!(
                rel_err(&g, &n) < TOL,
                "instance {seed} sample {j}: {}",
                rel_err(&g, &n)
            );
        }
    }
}

pub const CHECKS: [(&str, fn()); 6] = [
    ("cross entropy", cross_entropy_gradient),
    ("concept alignment", concept_alignment_gradient),
    ("entropy", entropy_gradient_both_reductions),
    ("contrastive", contrastive_gradient),
    ("full forward, parameters", full_forward_parameter_gradients),
    (
        "full forward, similarity vector",
        full_forward_similarity_gradient,
    ),
];
