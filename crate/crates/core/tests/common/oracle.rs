// SPDX-License-Identifier: MIT OR Apache-2.0

//! Metrics against brute-force re-implementations on random small instances.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slcbm::dataset::{FloatImage, Image, Mask, Sample};
use slcbm::encoders::{Backbone, BackboneConfig, ConceptFeatures};
use slcbm::metrics::{
    binarize, concept_accuracy, faithfulness_unannotated, overlap_metrics, Faithfulness, Level,
};
use slcbm::model::{forward, HeadKind, Model, ModelParams};

const INSTANCES: u64 = 100;

/// Values drawn from a small integer set half of the time, so ties and
/// constant maps show up.
fn values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let coarse = rng.random_bool(0.5);
    (0..n)
        .map(|_| {
            if coarse {
                rng.random_range(0..3) as f64
            } else {
                rng.random_range(-2.0..2.0)
            }
        })
        .collect()
}

pub fn concept_accuracy_matches_sort_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(1..=12);
        let f = values(&mut rng, c);
        let gt: Vec<usize> = (0..c).filter(|_| rng.random_bool(0.4)).collect();
        let mut ranked: Vec<(f64, usize)> = f.iter().copied().zip(0..).collect();
        // bubble sort: larger value first, lower index on ties
        for i in 0..ranked.len() {
            for j in 0..ranked.len() - 1 - i {
                let (a, b) = (ranked[j], ranked[j + 1]);
                if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    ranked.swap(j, j + 1);
                }
            }
        }
        let expected = if gt.is_empty() {
            None
        } else {
            let hits = ranked[..gt.len()]
                .iter()
                .filter(|(_, i)| gt.contains(i))
                .count();
            Some(hits as f64 / gt.len() as f64)
        };
        assert_eq!(concept_accuracy(&f, &gt), expected, "instance {seed}");
    }
}

fn oracle_binarize(s: &Array2<f64>) -> Vec<bool> {
    let mut lo = s[[0, 0]];
    let mut hi = s[[0, 0]];
    for &v in s {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    s.iter()
        .map(|&v| hi > lo && (v - lo) / (hi - lo) > 0.5)
        .collect()
}

pub fn binarize_and_overlap_match_counting_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let s = Array2::from_shape_vec((h, w), values(&mut rng, h * w)).unwrap();
        let m: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.4)).collect();
        let b = binarize(&s);
        let expected = oracle_binarize(&s);
        assert_eq!(b.cells, expected, "instance {seed}");

        let mut inter = 0.0;
        let mut union = 0.0;
        let mut nb = 0.0;
        let mut nm = 0.0;
        for k in 0..h * w {
            if expected[k] && m[k] {
                inter += 1.0;
            }
            if expected[k] || m[k] {
                union += 1.0;
            }
            if expected[k] {
                nb += 1.0;
            }
            if m[k] {
                nm += 1.0;
            }
        }
        let o = overlap_metrics(&b, &m).unwrap();
        let safe = |a: f64, d: f64| if d > 0.0 { a / d } else { 0.0 };
        assert!(
            (o.iou - safe(inter, union)).abs() <= 1e-9,
            "instance {seed}"
        );
        assert!(
            (o.dice - safe(2.0 * inter, nb + nm)).abs() <= 1e-9,
            "instance {seed}"
        );
        assert!((o.ciou - safe(inter, nb)).abs() <= 1e-9, "instance {seed}");
    }
}

pub fn faithfulness_terms_match_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..INSTANCES {
        let (p0, p1): (f64, f64) = (rng.random_range(0.001..0.999), rng.random_range(0.0..1.0));
        let f = Faithfulness::from_probs(p0, p1);
        let drop = if p1 < p0 { (p0 - p1) / p0 } else { 0.0 };
        let gain = if p1 > p0 { (p1 - p0) / (1.0 - p0) } else { 0.0 };
        assert!((f.ad - drop).abs() <= 1e-9);
        assert_eq!(f.ai, if p1 > p0 { 1.0 } else { 0.0 });
        assert!((f.ag - gain).abs() <= 1e-9);
    }
}

fn oracle_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let t: f64 = e.iter().sum();
    e.iter().map(|v| v / t).collect()
}

/// Normalize, bilinearly upsample with half-pixel centers, multiply.
fn oracle_mask(image: &Image, s: &Array2<f64>) -> FloatImage {
    let (h, w) = s.dim();
    let lo = s.iter().cloned().fold(f64::MAX, f64::min);
    let hi = s.iter().cloned().fold(f64::MIN, f64::max);
    let norm = |v: f64| {
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            v.clamp(0.0, 1.0)
        }
    };
    let coord = |o: usize, out: usize, inp: usize| {
        let u = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5)
            .max(0.0)
            .min((inp - 1) as f64);
        let a = u.floor() as usize;
        (a, (a + 1).min(inp - 1), u - a as f64)
    };
    let mut data = Vec::with_capacity(image.data.len());
    for y in 0..image.height {
        let (y0, y1, fy) = coord(y, image.height, h);
        for x in 0..image.width {
            let (x0, x1, fx) = coord(x, image.width, w);
            let wgt = norm(s[[y0, x0]]) * (1.0 - fy) * (1.0 - fx)
                + norm(s[[y0, x1]]) * (1.0 - fy) * fx
                + norm(s[[y1, x0]]) * fy * (1.0 - fx)
                + norm(s[[y1, x1]]) * fy * fx;
            for c in 0..3 {
                data.push(image.get(x, y, c) * wgt);
            }
        }
    }
    FloatImage {
        width: image.width,
        height: image.height,
        data,
    }
}

fn random_sample(rng: &mut ChaCha8Rng, c: usize, k: usize, n: usize) -> Sample {
    let mut image = Image::new(16, 16);
    image.data.iter_mut().for_each(|v| *v = rng.random());
    let concepts: Vec<usize> = (0..c).filter(|_| rng.random_bool(0.6)).collect();
    Sample {
        id: format!("{n:05}"),
        image,
        class_label: rng.random_range(0..k),
        concepts,
        concept_masks: vec![Mask::zeros(16, 16); c],
        class_mask: Mask::zeros(16, 16),
    }
}

pub fn average_drop_increase_gain_match_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (c, k, d) = (rng.random_range(2..=4), rng.random_range(2..=3), 4);
        let backbone = Backbone::new(BackboneConfig {
            patch_size: 8,
            feature_dim: d,
            seed,
        })
        .unwrap();
        let mut params = ModelParams::init(c, d, k, seed);
        params.out_scale = rng.random_range(-1.0..1.0);
        params.conv_b = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
        let rows = Array2::from_shape_fn((c, d), |_| rng.random_range(-1.0..1.0));
        let concepts = ConceptFeatures::from_rows(rows).unwrap();
        let model = Model {
            kind: HeadKind::Slcbm,
            backbone: backbone.clone(),
            concepts: concepts.clone(),
            params: params.clone(),
        };
        let samples: Vec<Sample> = (0..3).map(|n| random_sample(&mut rng, c, k, n)).collect();

        for level in [Level::Concept, Level::Class] {
            let mut per_image = Vec::new();
            for s in &samples {
                let feats = backbone.encode(&s.image).unwrap();
                let trace = forward(&params, &feats, &concepts);
                let p0 = oracle_softmax(&trace.logits)[s.class_label];
                let maps: Vec<Array2<f64>> = match level {
                    Level::Concept => s.concepts.iter().map(|&i| trace.saliency.map(i)).collect(),
                    Level::Class => {
                        let mut m = Array2::zeros((trace.saliency.height, trace.saliency.width));
                        for i in 0..c {
                            m = m + trace.saliency.map(i) * params.cls_w[[s.class_label, i]];
                        }
                        vec![m]
                    }
                };
                let mut acc = [0.0; 3];
                for map in &maps {
                    let masked = backbone.encode_float(&oracle_mask(&s.image, map)).unwrap();
                    let p1 =
                        oracle_softmax(&forward(&params, &masked, &concepts).logits)[s.class_label];
                    acc[0] += if p1 < p0 { (p0 - p1) / p0 } else { 0.0 };
                    acc[1] += if p1 > p0 { 1.0 } else { 0.0 };
                    acc[2] += if p1 > p0 {
                        (p1 - p0) / (1.0 - p0).max(1e-8)
                    } else {
                        0.0
                    };
                }
                let n = maps.len().max(1) as f64;
                per_image.push(if maps.is_empty() {
                    [0.0; 3]
                } else {
                    [acc[0] / n, acc[1] / n, acc[2] / n]
                });
            }
            let expect: Vec<f64> = (0..3)
                .map(|j| per_image.iter().map(|v| v[j]).sum::<f64>() / samples.len() as f64)
                .collect();
            let got = faithfulness_unannotated(&model, &samples, level).unwrap();
            assert!(
                (got.ad - expect[0]).abs() <= 1e-9,
                "instance {seed} {level:?} AD {} vs {}",
                got.ad,
                expect[0]
            );
            assert_eq!(got.ai, expect[1], "instance {seed} {level:?} AI");
            assert!(
                (got.ag - expect[2]).abs() <= 1e-9,
                "instance {seed} {level:?} AG {} vs {}",
                got.ag,
                expect[2]
            );
        }
    }
}

pub const CHECKS: [(&str, fn()); 4] = [
    ("concept accuracy", concept_accuracy_matches_sort_oracle),
    (
        "binarize and overlap",
        binarize_and_overlap_match_counting_oracle,
    ),
    ("faithfulness formulas", faithfulness_terms_match_formulas),
    ("AD/AI/AG", average_drop_increase_gain_match_oracle),
];
