// SPDX-License-Identifier: MIT OR Apache-2.0

//! The saliency-coupled concept head and the linear-probe baseline.
//!
//! Forward pass of the main head, per image:
//!
//! ```text
//! z      = cos(E, s)                                  similarity vector (C)
//! S[i,p] = conv_w[i] · F[p] + conv_b[i]               concept saliency (C x cells)
//! t[i]   = z[i] * conv_w[i]                           concept token (D)
//! a[i,p] = (attn_q t[i]) · (attn_k F[p]) / √D + S[i,p]
//! r[i]   = Σ_p softmax_p(a[i,·]) attn_v F[p]
//! f[i]   = z[i] + out_scale * (t[i] · r[i]) / √D
//! logits = cls_w f + cls_b
//! ```
//!
//! Class saliency for class `l` is `Σ_i cls_w[l,i] S[i]`. The baseline keeps
//! only the projection (`f = z`) and gets its maps from Grad-CAM.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::encoders::{
    similarity_grad, similarity_vector, Backbone, ConceptFeatures, SpatialFeatures,
};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Slcbm,
    Baseline,
}

/// Learnable arrays of the head. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv_w: Array2<f64>,
    pub conv_b: Array1<f64>,
    pub attn_q: Array2<f64>,
    pub attn_k: Array2<f64>,
    pub attn_v: Array2<f64>,
    pub out_scale: f64,
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
}

/// Names of the learnable arrays, in serialization order.
pub const PARAM_NAMES: [&str; 8] = [
    "conv_w",
    "conv_b",
    "attn_q",
    "attn_k",
    "attn_v",
    "out_scale",
    "cls_w",
    "cls_b",
];

impl ModelParams {
    pub fn zeros(concepts: usize, dim: usize, classes: usize) -> Self {
        Self {
            conv_w: Array2::zeros((concepts, dim)),
            conv_b: Array1::zeros(concepts),
            attn_q: Array2::zeros((dim, dim)),
            attn_k: Array2::zeros((dim, dim)),
            attn_v: Array2::zeros((dim, dim)),
            out_scale: 0.0,
            cls_w: Array2::zeros((classes, concepts)),
            cls_b: Array1::zeros(classes),
        }
    }

    /// Conv and attention weights ~ N(0, 1/D), classifier ~ N(0, 1/C),
    /// biases and `out_scale` zero.
    pub fn init(concepts: usize, dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wide = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("finite std");
        let cls = Normal::new(0.0, 1.0 / (concepts as f64).sqrt()).expect("finite std");
        let mut p = Self::zeros(concepts, dim, classes);
        for a in [&mut p.conv_w, &mut p.attn_q, &mut p.attn_k, &mut p.attn_v] {
            a.mapv_inplace(|_| wide.sample(&mut rng));
        }
        p.cls_w.mapv_inplace(|_| cls.sample(&mut rng));
        p
    }

    pub fn num_concepts(&self) -> usize {
        self.conv_w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.conv_w.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.cls_w.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_concepts(), self.dim(), self.num_classes())
    }

    /// Shapes of the arrays in [`PARAM_NAMES`] order.
    pub fn shapes(&self) -> [Vec<usize>; 8] {
        let (c, d, k) = (self.num_concepts(), self.dim(), self.num_classes());
        [
            vec![c, d],
            vec![c],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![1],
            vec![k, c],
            vec![k],
        ]
    }

    /// Flat views of every array in [`PARAM_NAMES`] order.
    pub fn slices(&self) -> [&[f64]; 8] {
        [
            self.conv_w.as_slice().expect("standard layout"),
            self.conv_b.as_slice().expect("standard layout"),
            self.attn_q.as_slice().expect("standard layout"),
            self.attn_k.as_slice().expect("standard layout"),
            self.attn_v.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.out_scale),
            self.cls_w.as_slice().expect("standard layout"),
            self.cls_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.conv_w.as_slice_mut().expect("standard layout"),
            self.conv_b.as_slice_mut().expect("standard layout"),
            self.attn_q.as_slice_mut().expect("standard layout"),
            self.attn_k.as_slice_mut().expect("standard layout"),
            self.attn_v.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.out_scale),
            self.cls_w.as_slice_mut().expect("standard layout"),
            self.cls_b.as_slice_mut().expect("standard layout"),
        ]
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += scale * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        let (c, d, k) = (self.num_concepts(), self.dim(), self.num_classes());
        ensure!(
            self.conv_b.len() == c,
            "conv_b length {} != C = {c}",
            self.conv_b.len()
        );
        for (name, a) in [
            ("attn_q", &self.attn_q),
            ("attn_k", &self.attn_k),
            ("attn_v", &self.attn_v),
        ] {
            ensure!(
                a.dim() == (d, d),
                "{name} shape {:?} != ({d}, {d})",
                a.dim()
            );
        }
        ensure!(
            self.cls_w.ncols() == c,
            "cls_w has {} columns, expected C = {c}",
            self.cls_w.ncols()
        );
        ensure!(
            self.cls_b.len() == k,
            "cls_b length {} != K = {k}",
            self.cls_b.len()
        );
        ensure!(self.is_finite(), "non-finite parameter");
        Ok(())
    }

    /// Rounds every entry to `f32` precision.
    pub fn quantize(&mut self) {
        for s in self.slices_mut() {
            for v in s.iter_mut() {
                *v = crate::numeric::quantize_f32(*v);
            }
        }
    }
}

/// Concept saliency maps, one row of `height * width` cells per concept.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyStack {
    pub height: usize,
    pub width: usize,
    pub maps: Array2<f64>,
}

impl SaliencyStack {
    pub fn num_concepts(&self) -> usize {
        self.maps.nrows()
    }

    /// Map of concept `i` as a `height x width` grid.
    pub fn map(&self, i: usize) -> Array2<f64> {
        self.maps
            .row(i)
            .to_owned()
            .into_shape_with_order((self.height, self.width))
            .expect("cell count matches grid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub z: Vec<f64>,
    pub saliency: SaliencyStack,
    pub f: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Intermediate values of [`fuse`] needed for the backward pass.
#[derive(Debug, Clone)]
pub struct FusionCache {
    tokens: Array2<f64>,
    queries: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    attention: Array2<f64>,
    readout: Array2<f64>,
    dots: Array1<f64>,
}

impl FusionCache {
    /// Attention weights, `C x cells`.
    pub fn attention(&self) -> &Array2<f64> {
        &self.attention
    }
}

/// 1×1 convolution over the feature grid.
pub fn concept_saliency(params: &ModelParams, features: &SpatialFeatures) -> SaliencyStack {
    let mut maps = params.conv_w.dot(&features.grid.t());
    maps += &params.conv_b.view().insert_axis(Axis(1));
    SaliencyStack {
        height: features.height,
        width: features.width,
        maps,
    }
}

fn fuse_cached(
    params: &ModelParams,
    z: &[f64],
    saliency: &SaliencyStack,
    features: &SpatialFeatures,
) -> (Vec<f64>, FusionCache) {
    let sqrt_d = (params.dim() as f64).sqrt();
    let zv = ArrayView1::from(z);
    let tokens = &params.conv_w * &zv.insert_axis(Axis(1));
    let queries = tokens.dot(&params.attn_q.t());
    let keys = features.grid.dot(&params.attn_k.t());
    let values = features.grid.dot(&params.attn_v.t());

    let mut attention = queries.dot(&keys.t()) / sqrt_d + &saliency.maps;
    for mut row in attention.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|a| (a - max).exp());
        let total = row.sum();
        row /= total;
    }
    let readout = attention.dot(&values);
    let dots = (&tokens * &readout).sum_axis(Axis(1));
    let f = z
        .iter()
        .zip(&dots)
        .map(|(zi, u)| zi + params.out_scale * u / sqrt_d)
        .collect();
    (
        f,
        FusionCache {
            tokens,
            queries,
            keys,
            values,
            attention,
            readout,
            dots,
        },
    )
}

/// Cross-attention fusion of the similarity vector with the saliency maps.
pub fn fuse(
    params: &ModelParams,
    z: &[f64],
    saliency: &SaliencyStack,
    features: &SpatialFeatures,
) -> Vec<f64> {
    fuse_cached(params, z, saliency, features).0
}

pub fn classify(params: &ModelParams, f: &[f64]) -> Vec<f64> {
    (params.cls_w.dot(&ArrayView1::from(f)) + &params.cls_b).to_vec()
}

/// `Σ_i cls_w[l, i] · S_i` as a `height x width` grid.
pub fn class_saliency(
    params: &ModelParams,
    saliency: &SaliencyStack,
    class: usize,
) -> Result<Array2<f64>> {
    ensure!(
        class < params.num_classes(),
        "class {class} out of range for K = {}",
        params.num_classes()
    );
    let cells = params.cls_w.row(class).dot(&saliency.maps);
    Ok(cells
        .into_shape_with_order((saliency.height, saliency.width))
        .expect("cell count matches grid"))
}

/// Full forward pass with the cache for [`backward`].
pub fn forward_with_cache(
    params: &ModelParams,
    features: &SpatialFeatures,
    concepts: &ConceptFeatures,
) -> (ForwardTrace, FusionCache) {
    let z = similarity_vector(concepts, features.summary.view());
    let saliency = concept_saliency(params, features);
    let (f, cache) = fuse_cached(params, &z, &saliency, features);
    let logits = classify(params, &f);
    (
        ForwardTrace {
            z,
            saliency,
            f,
            logits,
        },
        cache,
    )
}

pub fn forward(
    params: &ModelParams,
    features: &SpatialFeatures,
    concepts: &ConceptFeatures,
) -> ForwardTrace {
    forward_with_cache(params, features, concepts).0
}

/// Upstream gradients of a scalar loss with respect to the trace outputs.
#[derive(Debug, Clone)]
pub struct TraceGrads {
    /// Direct gradient on the concept scores `f` (excluding the classifier path).
    pub df: Vec<f64>,
    /// Gradient on the saliency maps, `C x cells`.
    pub dsaliency: Array2<f64>,
    pub dlogits: Vec<f64>,
}

impl TraceGrads {
    pub fn zeros(concepts: usize, cells: usize, classes: usize) -> Self {
        Self {
            df: vec![0.0; concepts],
            dsaliency: Array2::zeros((concepts, cells)),
            dlogits: vec![0.0; classes],
        }
    }
}

/// Gradients of a scalar loss with respect to the parameters and `z`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ModelParams,
    pub z: Vec<f64>,
}

/// Backpropagates `upstream` through classifier, fusion and saliency branch.
pub fn backward(
    params: &ModelParams,
    features: &SpatialFeatures,
    trace: &ForwardTrace,
    cache: &FusionCache,
    upstream: &TraceGrads,
) -> Gradients {
    let sqrt_d = (params.dim() as f64).sqrt();
    let mut g = params.zeros_like();

    let dlogits = ArrayView1::from(&upstream.dlogits[..]);
    let f = ArrayView1::from(&trace.f[..]);
    g.cls_b.assign(&dlogits);
    g.cls_w
        .assign(&dlogits.insert_axis(Axis(1)).dot(&f.insert_axis(Axis(0))));
    let df = params.cls_w.t().dot(&dlogits) + ArrayView1::from(&upstream.df[..]);

    g.out_scale = df.iter().zip(&cache.dots).map(|(d, u)| d * u).sum::<f64>() / sqrt_d;
    let du = &df * (params.out_scale / sqrt_d);
    let du_col = du.view().insert_axis(Axis(1));
    let mut dtokens = &cache.readout * &du_col;
    let dreadout = &cache.tokens * &du_col;

    let dvalues = cache.attention.t().dot(&dreadout);
    let dattn = dreadout.dot(&cache.values.t());
    let weighted = (&cache.attention * &dattn).sum_axis(Axis(1));
    let dlogit_att = &cache.attention * &(dattn - &weighted.insert_axis(Axis(1)));

    let dsal = &upstream.dsaliency + &dlogit_att;
    let dq = dlogit_att.dot(&cache.keys) / sqrt_d;
    let dkeys = dlogit_att.t().dot(&cache.queries) / sqrt_d;

    g.attn_q.assign(&dq.t().dot(&cache.tokens));
    dtokens += &dq.dot(&params.attn_q);
    g.attn_k.assign(&dkeys.t().dot(&features.grid));
    g.attn_v.assign(&dvalues.t().dot(&features.grid));

    let z = ArrayView1::from(&trace.z[..]);
    g.conv_w
        .assign(&(&dtokens * &z.insert_axis(Axis(1)) + dsal.dot(&features.grid)));
    g.conv_b.assign(&dsal.sum_axis(Axis(1)));
    let dz = &df + &(&dtokens * &params.conv_w).sum_axis(Axis(1));

    Gradients {
        params: g,
        z: dz.to_vec(),
    }
}

// ---------------------------------------------------------------------------
// Baseline head and Grad-CAM
// ---------------------------------------------------------------------------

/// A scalar function of the feature grid with an analytic gradient.
pub trait ScoreFn {
    fn value(&self, features: &SpatialFeatures) -> f64;
    /// Gradient with respect to `features.grid`, same shape.
    fn gradient(&self, features: &SpatialFeatures) -> Array2<f64>;
}

/// `z_i` of the baseline head as a function of the features.
pub struct SimilarityScore<'a> {
    pub concepts: &'a ConceptFeatures,
    pub index: usize,
}

impl ScoreFn for SimilarityScore<'_> {
    fn value(&self, features: &SpatialFeatures) -> f64 {
        similarity_vector(self.concepts, features.summary.view())[self.index]
    }

    fn gradient(&self, features: &SpatialFeatures) -> Array2<f64> {
        let ds = similarity_grad(self.concepts, features.summary.view(), self.index);
        broadcast_summary_grad(ds, features)
    }
}

/// Baseline logit of `class` as a function of the features.
pub struct BaselineLogit<'a> {
    pub params: &'a ModelParams,
    pub concepts: &'a ConceptFeatures,
    pub class: usize,
}

impl ScoreFn for BaselineLogit<'_> {
    fn value(&self, features: &SpatialFeatures) -> f64 {
        let z = similarity_vector(self.concepts, features.summary.view());
        classify(self.params, &z)[self.class]
    }

    fn gradient(&self, features: &SpatialFeatures) -> Array2<f64> {
        let s = features.summary.view();
        let mut ds = Array1::<f64>::zeros(features.dim());
        for (i, w) in self.params.cls_w.row(self.class).iter().enumerate() {
            ds.scaled_add(*w, &similarity_grad(self.concepts, s, i));
        }
        broadcast_summary_grad(ds, features)
    }
}

/// The summary is the cell mean, so each cell receives `ds / cells`.
fn broadcast_summary_grad(ds: Array1<f64>, features: &SpatialFeatures) -> Array2<f64> {
    let per_cell = ds / features.num_cells() as f64;
    per_cell
        .insert_axis(Axis(0))
        .broadcast((features.num_cells(), features.dim()))
        .expect("broadcast")
        .to_owned()
}

/// Grad-CAM: channel weights are the cell-averaged gradients, the map is the
/// rectified weighted channel sum.
pub fn gradcam_saliency(score: &dyn ScoreFn, features: &SpatialFeatures) -> Array2<f64> {
    let grad = score.gradient(features);
    let weights = grad.mean_axis(Axis(0)).expect("non-empty grid");
    features
        .grid
        .dot(&weights)
        .mapv(|v| v.max(0.0))
        .into_shape_with_order((features.height, features.width))
        .expect("cell count matches grid")
}

/// Projection-only forward pass with Grad-CAM concept maps.
pub fn baseline_forward(
    params: &ModelParams,
    features: &SpatialFeatures,
    concepts: &ConceptFeatures,
) -> ForwardTrace {
    let z = similarity_vector(concepts, features.summary.view());
    let logits = classify(params, &z);
    let c = concepts.num_concepts();
    let mut maps = Array2::<f64>::zeros((c, features.num_cells()));
    for i in 0..c {
        let cam = gradcam_saliency(&SimilarityScore { concepts, index: i }, features);
        maps.row_mut(i).assign(
            &cam.into_shape_with_order(features.num_cells())
                .expect("flatten"),
        );
    }
    let saliency = SaliencyStack {
        height: features.height,
        width: features.width,
        maps,
    };
    ForwardTrace {
        f: z.clone(),
        z,
        saliency,
        logits,
    }
}

/// A trained head together with the frozen encoders it was trained on.
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: HeadKind,
    pub backbone: Backbone,
    pub concepts: ConceptFeatures,
    pub params: ModelParams,
}

impl Model {
    pub fn encode(&self, image: &Image) -> Result<SpatialFeatures> {
        self.backbone.encode(image)
    }

    pub fn trace(&self, features: &SpatialFeatures) -> ForwardTrace {
        match self.kind {
            HeadKind::Slcbm => forward(&self.params, features, &self.concepts),
            HeadKind::Baseline => baseline_forward(&self.params, features, &self.concepts),
        }
    }

    /// Logits only; skips the baseline's Grad-CAM maps.
    pub fn logits(&self, features: &SpatialFeatures) -> Vec<f64> {
        match self.kind {
            HeadKind::Slcbm => forward(&self.params, features, &self.concepts).logits,
            HeadKind::Baseline => classify(
                &self.params,
                &similarity_vector(&self.concepts, features.summary.view()),
            ),
        }
    }

    /// Class saliency: weighted concept maps for the main head, Grad-CAM of the
    /// class logit for the baseline.
    pub fn class_map(
        &self,
        trace: &ForwardTrace,
        features: &SpatialFeatures,
        class: usize,
    ) -> Result<Array2<f64>> {
        match self.kind {
            HeadKind::Slcbm => class_saliency(&self.params, &trace.saliency, class),
            HeadKind::Baseline => {
                ensure!(
                    class < self.params.num_classes(),
                    "class {class} out of range"
                );
                let score = BaselineLogit {
                    params: &self.params,
                    concepts: &self.concepts,
                    class,
                };
                Ok(gradcam_saliency(&score, features))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rng_array(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        let n = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_simple_fn(shape, || n.sample(rng))
    }

    fn random_features(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> SpatialFeatures {
        SpatialFeatures::from_grid(h, w, rng_array(rng, (h * w, d))).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, c: usize, d: usize, k: usize) -> ModelParams {
        let mut p = ModelParams::init(c, d, k, 17);
        p.conv_b = rng_array(rng, (1, c)).into_shape_with_order(c).unwrap();
        p.cls_b = rng_array(rng, (1, k)).into_shape_with_order(k).unwrap();
        p.out_scale = 0.7;
        p
    }

    #[test]
    fn zero_conv_gives_constant_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = random_features(&mut rng, 3, 3, 4);
        let mut p = ModelParams::zeros(2, 4, 2);
        p.conv_b = array![1.5, -2.0];
        let s = concept_saliency(&p, &feats);
        assert!(s.maps.row(0).iter().all(|&v| v == 1.5));
        assert!(s.maps.row(1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn constant_features_give_constant_maps() {
        let grid = Array2::from_shape_fn((4, 3), |(_, j)| j as f64 - 0.5);
        let feats = SpatialFeatures::from_grid(2, 2, grid).unwrap();
        let p = ModelParams::init(3, 3, 2, 5);
        let s = concept_saliency(&p, &feats);
        for row in s.maps.rows() {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn saliency_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = random_features(&mut rng, 2, 2, 3);
        let p = random_params(&mut rng, 2, 3, 2);
        let s = concept_saliency(&p, &feats);
        for i in 0..2 {
            for cell in 0..4 {
                let mut v = p.conv_b[i];
                for d in 0..3 {
                    v += p.conv_w[[i, d]] * feats.grid[[cell, d]];
                }
                assert!((s.maps[[i, cell]] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_out_scale_is_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = random_features(&mut rng, 2, 2, 4);
        let mut p = random_params(&mut rng, 3, 4, 2);
        p.out_scale = 0.0;
        let z = vec![0.3, -0.2, 0.9];
        let s = concept_saliency(&p, &feats);
        assert_eq!(fuse(&p, &z, &s, &feats), z);
    }

    #[test]
    fn saturated_saliency_selects_one_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = random_features(&mut rng, 2, 2, 4);
        let mut p = random_params(&mut rng, 2, 4, 2);
        p.attn_q.fill(0.0);
        let mut s = SaliencyStack {
            height: 2,
            width: 2,
            maps: Array2::zeros((2, 4)),
        };
        s.maps[[0, 2]] = 1e6;
        s.maps[[1, 1]] = 1e6;
        let z = vec![0.5, -0.4];
        let (_, cache) = fuse_cached(&p, &z, &s, &feats);
        assert_eq!(cache.attention.row(0).to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(cache.attention.row(1).to_vec(), vec![0.0, 1.0, 0.0, 0.0]);
        let v2 = p.attn_v.dot(&feats.grid.row(2));
        for d in 0..4 {
            assert!((cache.readout[[0, d]] - v2[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_basics() {
        let mut p = ModelParams::zeros(3, 4, 3);
        p.cls_w = Array2::eye(3);
        assert_eq!(classify(&p, &[0.0, 1.0, 0.0]), vec![0.0, 1.0, 0.0]);
        p.cls_b = array![1.0, 2.0, 3.0];
        assert_eq!(classify(&p, &[0.0; 3]), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn class_saliency_selector_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats = random_features(&mut rng, 2, 2, 3);
        let mut p = random_params(&mut rng, 3, 3, 2);
        let s = concept_saliency(&p, &feats);
        p.cls_w.row_mut(1).assign(&array![1.0, 0.0, 0.0]);
        assert_eq!(class_saliency(&p, &s, 1).unwrap(), s.map(0));
        p.cls_w.row_mut(0).fill(0.0);
        assert!(class_saliency(&p, &s, 0).unwrap().iter().all(|&v| v == 0.0));
        assert!(class_saliency(&p, &s, 2).is_err());
    }

    #[test]
    fn baseline_projection_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feats = random_features(&mut rng, 3, 2, 5);
        let e = ConceptFeatures::from_rows(rng_array(&mut rng, (4, 5))).unwrap();
        let p = random_params(&mut rng, 4, 5, 3);
        let t = baseline_forward(&p, &feats, &e);
        assert_eq!(t.f, similarity_vector(&e, feats.summary.view()));
        assert_eq!(t.saliency.maps.dim(), (4, 6));
        assert_eq!(t.logits, classify(&p, &t.z));
    }

    struct ChannelSum;

    impl ScoreFn for ChannelSum {
        fn value(&self, f: &SpatialFeatures) -> f64 {
            f.grid.column(0).sum()
        }
        fn gradient(&self, f: &SpatialFeatures) -> Array2<f64> {
            let mut g = Array2::zeros(f.grid.dim());
            g.column_mut(0).fill(1.0);
            g
        }
    }

    struct Constant;

    impl ScoreFn for Constant {
        fn value(&self, _: &SpatialFeatures) -> f64 {
            4.2
        }
        fn gradient(&self, f: &SpatialFeatures) -> Array2<f64> {
            Array2::zeros(f.grid.dim())
        }
    }

    #[test]
    fn gradcam_linear_and_constant_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let feats = random_features(&mut rng, 2, 2, 3);
        let cam = gradcam_saliency(&ChannelSum, &feats);
        for cell in 0..4 {
            assert_eq!(cam[[cell / 2, cell % 2]], feats.grid[[cell, 0]].max(0.0));
        }
        assert!(gradcam_saliency(&Constant, &feats)
            .iter()
            .all(|&v| v == 0.0));
    }
}
