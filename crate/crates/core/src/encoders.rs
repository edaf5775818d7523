// SPDX-License-Identifier: MIT OR Apache-2.0

//! Frozen feature extraction: a seeded random-projection patch backbone and
//! concept prototypes built from its features.
//!
//! Nothing here is trained. A [`Backbone`] is fully determined by its
//! [`BackboneConfig`], so a checkpoint only needs to store the config.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ConceptVocabulary, FloatImage, Image, Sample};
use crate::error::{ensure, Error, Result};

/// Guard for the norm of an all-zero summary vector.
pub const SUMMARY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            feature_dim: 64,
            seed: 0,
        }
    }
}

/// Spatial feature grid `F` (cells row-major, `height * width` rows of
/// `feature_dim` columns) and its cell-average summary `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeatures {
    pub height: usize,
    pub width: usize,
    pub grid: Array2<f64>,
    pub summary: Array1<f64>,
}

impl SpatialFeatures {
    /// Builds features from a grid, computing the summary as the cell mean.
    pub fn from_grid(height: usize, width: usize, grid: Array2<f64>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, "empty feature grid");
        ensure!(
            grid.nrows() == height * width,
            "grid has {} cells, expected {height}x{width}",
            grid.nrows()
        );
        ensure!(grid.iter().all(|v| v.is_finite()), "non-finite feature");
        let summary = grid.mean_axis(Axis(0)).expect("non-empty grid");
        Ok(Self {
            height,
            width,
            grid,
            summary,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.grid.ncols()
    }
}

/// Unit-norm concept feature rows, `C x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptFeatures {
    pub rows: Array2<f64>,
}

impl ConceptFeatures {
    /// Normalizes every row; fails on a zero row.
    pub fn from_rows(mut rows: Array2<f64>) -> Result<Self> {
        for (i, mut row) in rows.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            ensure!(
                n > 0.0 && n.is_finite(),
                "concept feature row {i} has zero norm"
            );
            row /= n;
        }
        Ok(Self { rows })
    }

    pub fn num_concepts(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// The toy backbone: `F(h,w) = tanh(R · flatten(patch(h,w)))`.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    projection: Array2<f64>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        ensure!(cfg.patch_size >= 1, "patch_size must be positive");
        ensure!(
            cfg.feature_dim >= 4,
            "feature_dim must be at least 4, got {}",
            cfg.feature_dim
        );
        let inputs = 3 * cfg.patch_size * cfg.patch_size;
        let std = (inputs as f64).powf(-0.25);
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let projection =
            Array2::from_shape_simple_fn((cfg.feature_dim, inputs), || normal.sample(&mut rng));
        Ok(Self { cfg, projection })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn encode(&self, image: &Image) -> Result<SpatialFeatures> {
        self.encode_pixels(image.width, image.height, |x, y, c| image.get(x, y, c))
    }

    /// Encodes a real-valued image (for example a saliency-masked one).
    pub fn encode_float(&self, image: &FloatImage) -> Result<SpatialFeatures> {
        self.encode_pixels(image.width, image.height, |x, y, c| image.get(x, y, c))
    }

    fn encode_pixels(
        &self,
        width: usize,
        height: usize,
        pixel: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<SpatialFeatures> {
        let p = self.cfg.patch_size;
        ensure!(
            width.is_multiple_of(p) && height.is_multiple_of(p),
            "image size {width}x{height} not divisible by patch size {p}"
        );
        let (gh, gw) = (height / p, width / p);
        ensure!(
            gh >= 2 && gw >= 2,
            "feature grid {gh}x{gw} smaller than 2x2"
        );
        let mut patches = Array2::<f64>::zeros((gh * gw, 3 * p * p));
        for gy in 0..gh {
            for gx in 0..gw {
                let mut row = patches.row_mut(gy * gw + gx);
                let mut j = 0;
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        for c in 0..3 {
                            row[j] = pixel(x, y, c);
                            j += 1;
                        }
                    }
                }
            }
        }
        let grid = patches.dot(&self.projection.t()).mapv(f64::tanh);
        SpatialFeatures::from_grid(gh, gw, grid)
    }

    /// Encodes many images in parallel; output order follows input order.
    pub fn encode_all<'a, I>(&self, images: I) -> Result<Vec<SpatialFeatures>>
    where
        I: IntoParallelIterator<Item = &'a Image>,
    {
        images.into_par_iter().map(|im| self.encode(im)).collect()
    }
}

/// One-shot encode with a freshly built backbone.
pub fn encode_image(cfg: &BackboneConfig, image: &Image) -> Result<SpatialFeatures> {
    Backbone::new(*cfg)?.encode(image)
}

/// Concept prototypes from training samples.
///
/// For concept `i`, each training sample containing it contributes the mean
/// feature over cells whose mask coverage exceeds 0.5; the prototype is the
/// normalized mean of those contributions. A concept whose mask never covers
/// a cell falls back to the mean cell feature of the samples containing it.
pub fn build_concept_prototypes(
    backbone: &Backbone,
    vocab: &ConceptVocabulary,
    samples: &[Sample],
) -> Result<ConceptFeatures> {
    let features = backbone.encode_all(samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    prototypes_from_features(backbone.config().patch_size, vocab, samples, &features)
}

/// Same as [`build_concept_prototypes`] with features already encoded.
pub fn prototypes_from_features(
    patch_size: usize,
    vocab: &ConceptVocabulary,
    samples: &[Sample],
    features: &[SpatialFeatures],
) -> Result<ConceptFeatures> {
    ensure!(
        samples.len() == features.len(),
        "sample/feature count mismatch"
    );
    ensure!(
        !features.is_empty(),
        "no training samples for concept prototypes"
    );
    let c = vocab.len();
    let d = features[0].dim();
    let mut rows = Array2::<f64>::zeros((c, d));
    for i in 0..c {
        let mut acc = Array1::<f64>::zeros(d);
        let mut used = 0usize;
        let mut fallback = Array1::<f64>::zeros(d);
        let mut present = 0usize;
        for (s, f) in samples.iter().zip(features) {
            if !s.has_concept(i) {
                continue;
            }
            present += 1;
            fallback += &f.summary;
            let cells = s.concept_masks[i].downsample(patch_size);
            let mut cell_sum = Array1::<f64>::zeros(d);
            let mut n = 0usize;
            for (p, on) in cells.iter().enumerate() {
                if *on {
                    cell_sum += &f.grid.row(p);
                    n += 1;
                }
            }
            if n > 0 {
                acc += &(cell_sum / n as f64);
                used += 1;
            }
        }
        if present == 0 {
            return Err(Error::Validation(format!(
                "concept `{}` never appears in the training samples",
                vocab.name(i)
            )));
        }
        if used == 0 {
            warn!(
                "concept `{}` never covers a feature cell; using whole-image average",
                vocab.name(i)
            );
            rows.row_mut(i).assign(&(fallback / present as f64));
        } else {
            rows.row_mut(i).assign(&(acc / used as f64));
        }
    }
    ConceptFeatures::from_rows(rows)
}

/// Cosine similarity of the summary with every concept row.
pub fn similarity_vector(concepts: &ConceptFeatures, summary: ArrayView1<f64>) -> Vec<f64> {
    let norm = summary.dot(&summary).sqrt().max(SUMMARY_EPS);
    concepts
        .rows
        .dot(&summary)
        .iter()
        .map(|v| v / norm)
        .collect()
}

/// Gradient of `z_i` with respect to the summary vector.
pub fn similarity_grad(
    concepts: &ConceptFeatures,
    summary: ArrayView1<f64>,
    i: usize,
) -> Array1<f64> {
    let norm = summary.dot(&summary).sqrt();
    let row = concepts.rows.row(i);
    if norm <= SUMMARY_EPS {
        return row.to_owned() / SUMMARY_EPS;
    }
    let zi = row.dot(&summary) / norm;
    row.to_owned() / norm - summary.to_owned() * (zi / (norm * norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Mask;
    use ndarray::array;

    fn image_fn(size: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
        let mut im = Image::new(size, size);
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    im.set(x, y, c, f(x, y, c));
                }
            }
        }
        im
    }

    #[test]
    fn shape_contract() {
        let cfg = BackboneConfig {
            seed: 3,
            ..Default::default()
        };
        let im = image_fn(64, |x, y, c| ((x + 2 * y + c) % 7) as f64 / 7.0);
        let f = encode_image(&cfg, &im).unwrap();
        assert_eq!((f.height, f.width), (8, 8));
        assert_eq!(f.grid.dim(), (64, 64));
        assert_eq!(f.summary.len(), 64);
        assert!(f.grid.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn black_image_gives_constant_grid() {
        let cfg = BackboneConfig::default();
        let f = encode_image(&cfg, &Image::new(64, 64)).unwrap();
        for row in f.grid.rows() {
            assert_eq!(row, f.grid.row(0));
        }
        assert_eq!(f.summary, f.grid.row(0));
    }

    #[test]
    fn seed_changes_features() {
        let im = image_fn(32, |x, y, _| ((x * y) % 5) as f64 / 5.0);
        let a = encode_image(
            &BackboneConfig {
                seed: 1,
                ..Default::default()
            },
            &im,
        )
        .unwrap();
        let b = encode_image(
            &BackboneConfig {
                seed: 2,
                ..Default::default()
            },
            &im,
        )
        .unwrap();
        assert_ne!(a.grid, b.grid);
        let a2 = encode_image(
            &BackboneConfig {
                seed: 1,
                ..Default::default()
            },
            &im,
        )
        .unwrap();
        assert_eq!(a.grid, a2.grid);
    }

    #[test]
    fn non_divisible_size_errors() {
        assert!(encode_image(&BackboneConfig::default(), &Image::new(60, 64)).is_err());
    }

    fn full_sample(im: Image, concepts: Vec<usize>, c: usize) -> Sample {
        let (w, h) = (im.width, im.height);
        let mut full = Mask::zeros(w, h);
        full.data.fill(1);
        let masks = (0..c)
            .map(|i| {
                if concepts.contains(&i) {
                    full.clone()
                } else {
                    Mask::zeros(w, h)
                }
            })
            .collect();
        Sample {
            id: "0".into(),
            image: im,
            class_label: 0,
            concepts,
            concept_masks: masks,
            class_mask: full,
        }
    }

    #[test]
    fn full_mask_prototype_is_summary_direction() {
        let cfg = BackboneConfig {
            patch_size: 4,
            feature_dim: 8,
            seed: 9,
        };
        let bb = Backbone::new(cfg).unwrap();
        let vocab = ConceptVocabulary::new(["a", "b"]).unwrap();
        let im = image_fn(16, |x, y, c| ((x + y + c) % 4) as f64 / 4.0);
        let s = full_sample(im, vec![0, 1], 2);
        let e = build_concept_prototypes(&bb, &vocab, std::slice::from_ref(&s)).unwrap();
        let f = bb.encode(&s.image).unwrap();
        let n = f.summary.dot(&f.summary).sqrt();
        for j in 0..8 {
            assert!((e.rows[[0, j]] - f.summary[j] / n).abs() < 1e-12);
        }
        for row in e.rows.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn absent_concept_is_named() {
        let bb = Backbone::new(BackboneConfig {
            patch_size: 4,
            feature_dim: 8,
            seed: 0,
        })
        .unwrap();
        let vocab = ConceptVocabulary::new(["a", "ghost"]).unwrap();
        let s = full_sample(Image::new(16, 16), vec![0], 2);
        let err = build_concept_prototypes(&bb, &vocab, &[s])
            .unwrap_err()
            .to_string();
        assert!(err.contains("ghost"), "{err}");
    }

    #[test]
    fn uncovered_concept_falls_back_to_summary() {
        let bb = Backbone::new(BackboneConfig {
            patch_size: 4,
            feature_dim: 8,
            seed: 0,
        })
        .unwrap();
        let vocab = ConceptVocabulary::new(["a", "thin"]).unwrap();
        let im = image_fn(16, |x, _, _| x as f64 / 16.0);
        let mut s = full_sample(im, vec![0, 1], 2);
        // a single pixel never reaches 50% coverage of a 4x4 cell
        s.concept_masks[1] = Mask::zeros(16, 16);
        s.concept_masks[1].set(0, 0, true);
        let e = build_concept_prototypes(&bb, &vocab, &[s.clone()]).unwrap();
        let f = bb.encode(&s.image).unwrap();
        let n = f.summary.dot(&f.summary).sqrt();
        for j in 0..8 {
            assert!((e.rows[[1, j]] - f.summary[j] / n).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_edge_cases() {
        let e =
            ConceptFeatures::from_rows(array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(
            similarity_vector(&e, array![3.0, 0.0, 0.0, 0.0].view()),
            vec![1.0, 0.0]
        );
        assert_eq!(
            similarity_vector(&e, Array1::zeros(4).view()),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn similarity_grad_matches_finite_differences() {
        let e = ConceptFeatures::from_rows(array![[0.3, -1.0, 0.2], [0.5, 0.5, 0.1]]).unwrap();
        let s = array![0.4, 0.1, -0.7];
        let h = 1e-6;
        for i in 0..2 {
            let g = similarity_grad(&e, s.view(), i);
            for d in 0..3 {
                let mut p = s.clone();
                p[d] += h;
                let mut m = s.clone();
                m[d] -= h;
                let fd = (similarity_vector(&e, p.view())[i] - similarity_vector(&e, m.view())[i])
                    / (2.0 * h);
                assert!((fd - g[d]).abs() < 1e-7, "{fd} vs {}", g[d]);
            }
        }
    }
}
