// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labelled images with per-concept segmentation masks.
//!
//! Two sources produce a [`Dataset`]: the procedural shapes generator
//! ([`generate_dataset`]) and the directory format read by [`load_dataset`].
//! The directory layout is
//!
//! ```text
//! manifest.json              schema version, vocabulary, class names, sample records
//! images/{id}.png            8-bit RGB
//! masks/{id}/{concept_index}.png 8-bit grayscale, 0 or 255
//! masks/{id}/class.png       8-bit grayscale, 0 or 255
//! ```
//!
//! Any export that follows this layout (for example a locally prepared
//! attribute-segmentation dataset) loads through the same path.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numeric::{derive_seed, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

/// Ordered, unique concept names. Index `i` is concept `i` everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ConceptVocabulary {
    names: Vec<String>,
}

impl ConceptVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        ensure!(
            names.len() >= 2,
            "vocabulary needs at least 2 concepts, got {}",
            names.len()
        );
        let mut seen = HashSet::new();
        for n in &names {
            ensure!(!n.is_empty(), "empty concept name");
            ensure!(seen.insert(n.as_str()), "duplicate concept name `{n}`");
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Errors with the first position where `other` differs from `self`.
    pub fn check_matches(&self, other: &ConceptVocabulary) -> Result<()> {
        for (i, (a, b)) in self.names.iter().zip(&other.names).enumerate() {
            if a != b {
                return Err(Error::VocabMismatch(format!(
                    "concept {i} is `{a}` in one vocabulary and `{b}` in the other"
                )));
            }
        }
        if self.len() != other.len() {
            let longer = if self.len() > other.len() {
                self
            } else {
                other
            };
            let first_extra = longer.name(self.len().min(other.len()));
            return Err(Error::VocabMismatch(format!(
                "vocabulary sizes differ ({} vs {}); first unmatched concept `{first_extra}`",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<String>> for ConceptVocabulary {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ConceptVocabulary> for Vec<String> {
    fn from(v: ConceptVocabulary) -> Self {
        v.names
    }
}

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    /// Channel value in `[0, 1]`.
    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c] as f64 / 255.0
    }

    /// Quantizes `v` (clamped to `[0, 1]`) to 8 bits.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
}

/// Real-valued RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }
}

impl From<&Image> for FloatImage {
    fn from(im: &Image) -> Self {
        Self {
            width: im.width,
            height: im.height,
            data: im.data.iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }
}

/// Binary mask stored as 0/1 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Area coverage of each `cell`×`cell` block, row-major over the block grid.
    pub fn coverage(&self, cell: usize) -> Vec<f64> {
        let (gw, gh) = (self.width / cell, self.height / cell);
        let area = (cell * cell) as f64;
        let mut out = vec![0.0; gw * gh];
        for gy in 0..gh {
            for gx in 0..gw {
                let mut on = 0usize;
                for y in gy * cell..(gy + 1) * cell {
                    for x in gx * cell..(gx + 1) * cell {
                        on += self.get(x, y) as usize;
                    }
                }
                out[gy * gw + gx] = on as f64 / area;
            }
        }
        out
    }

    /// Block grid where a cell is on iff its area coverage exceeds 0.5.
    pub fn downsample(&self, cell: usize) -> Vec<bool> {
        self.coverage(cell).into_iter().map(|c| c > 0.5).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub class_label: usize,
    /// Ground-truth concept indices, sorted ascending.
    pub concepts: Vec<usize>,
    /// One mask per vocabulary entry; all-zero for absent concepts.
    pub concept_masks: Vec<Mask>,
    pub class_mask: Mask,
}

impl Sample {
    pub fn has_concept(&self, i: usize) -> bool {
        self.concepts.binary_search(&i).is_ok()
    }

    /// `{0,1}` indicator of the ground-truth concepts.
    pub fn concept_indicator(&self, num_concepts: usize) -> Vec<f64> {
        (0..num_concepts)
            .map(|i| self.has_concept(i) as u8 as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub vocab: ConceptVocabulary,
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.vocab.len()
    }

    /// Checks every sample against the vocabulary and class list.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        let c = self.num_concepts();
        ensure!(k >= 1, "dataset has no classes");
        for s in self.train.iter().chain(&self.test) {
            validate_sample(s, k, c)?;
        }
        Ok(())
    }
}

fn validate_sample(s: &Sample, k: usize, c: usize) -> Result<()> {
    let id = &s.id;
    ensure!(
        s.class_label < k,
        "sample {id}: class index {} >= K = {k}",
        s.class_label
    );
    for &i in &s.concepts {
        ensure!(i < c, "sample {id}: concept index {i} >= C = {c}");
    }
    ensure!(
        s.concepts.windows(2).all(|w| w[0] < w[1]),
        "sample {id}: concept list must be strictly increasing"
    );
    ensure!(
        s.concept_masks.len() == c,
        "sample {id}: {} concept masks for {c} concepts",
        s.concept_masks.len()
    );
    let (w, h) = (s.image.width, s.image.height);
    ensure!(
        s.image.data.len() == w * h * 3,
        "sample {id}: image buffer size mismatch"
    );
    for (i, m) in s
        .concept_masks
        .iter()
        .enumerate()
        .chain([(usize::MAX, &s.class_mask)])
    {
        ensure!(
            m.width == w && m.height == h,
            "sample {id}: mask shape {}x{} differs from image shape {w}x{h}",
            m.width,
            m.height
        );
        ensure!(
            m.data.iter().all(|&v| v <= 1),
            "sample {id}: non-binary mask"
        );
        if i != usize::MAX && !s.has_concept(i) {
            ensure!(
                m.is_empty(),
                "sample {id}: absent concept {i} has a nonzero mask"
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

pub const COLORS: [&str; 3] = ["red", "green", "blue"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const TEXTURES: [&str; 2] = ["solid", "striped"];
pub const SIZES: [&str; 2] = ["large", "small"];
pub const POSITIONS: [&str; 2] = ["upper", "lower"];

/// Height in pixels of one stripe band; stripes occupy every other band.
const STRIPE_BAND: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub color: String,
    pub shape: String,
}

impl ClassEntry {
    pub fn name(&self) -> String {
        format!("{}-{}", self.color, self.shape)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub concept_vocab: ConceptVocabulary,
    pub class_table: Vec<ClassEntry>,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let vocab = COLORS
            .iter()
            .chain(&SHAPES)
            .chain(&TEXTURES)
            .chain(&SIZES)
            .chain(&POSITIONS)
            .copied();
        let table = [
            ("red", "circle"),
            ("red", "square"),
            ("green", "triangle"),
            ("green", "circle"),
            ("blue", "square"),
            ("blue", "triangle"),
        ];
        Self {
            image_size: 64,
            num_classes: 6,
            concept_vocab: ConceptVocabulary::new(vocab).expect("default vocabulary is valid"),
            class_table: table
                .iter()
                .map(|(c, s)| ClassEntry {
                    color: c.to_string(),
                    shape: s.to_string(),
                })
                .collect(),
            samples_per_class: 300,
            seed: 0,
        }
    }
}

/// Concept indices of each attribute group, resolved against a vocabulary.
struct Groups {
    colors: [usize; 3],
    shapes: [usize; 3],
    textures: [usize; 2],
    sizes: [usize; 2],
    positions: [usize; 2],
}

impl Groups {
    fn resolve(vocab: &ConceptVocabulary) -> Result<Self> {
        fn find<const N: usize>(v: &ConceptVocabulary, names: [&str; N]) -> Result<[usize; N]> {
            let mut out = [0; N];
            for (o, n) in out.iter_mut().zip(names) {
                *o = v.index_of(n).ok_or_else(|| {
                    Error::Validation(format!("synthetic vocabulary lacks concept `{n}`"))
                })?;
            }
            Ok(out)
        }
        Ok(Self {
            colors: find(vocab, COLORS)?,
            shapes: find(vocab, SHAPES)?,
            textures: find(vocab, TEXTURES)?,
            sizes: find(vocab, SIZES)?,
            positions: find(vocab, POSITIONS)?,
        })
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.image_size >= 16,
            "canvas too small: image_size {} < 16",
            self.image_size
        );
        ensure!(self.num_classes >= 1, "num_classes must be positive");
        ensure!(
            self.num_classes <= self.class_table.len(),
            "num_classes {} exceeds the {} class_table entries",
            self.num_classes,
            self.class_table.len()
        );
        ensure!(
            self.samples_per_class >= 1,
            "samples_per_class must be positive"
        );
        Groups::resolve(&self.concept_vocab)?;
        for e in &self.class_table[..self.num_classes] {
            ensure!(
                COLORS.contains(&e.color.as_str()),
                "unknown color `{}`",
                e.color
            );
            ensure!(
                SHAPES.contains(&e.shape.as_str()),
                "unknown shape `{}`",
                e.shape
            );
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    fn contains(self, px: f64, py: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Triangle => {
                // apex up, base at cy + r
                let top = cy - r;
                let base = cy + r;
                if py < top || py > base {
                    return false;
                }
                let half = r * (py - top) / (base - top);
                dx.abs() <= half
            }
        }
    }
}

/// Object centers sit on a lattice of this pitch, so shapes of equal size
/// fall on the feature grid the same way.
const CENTER_PITCH: f64 = 8.0;

/// Uniform lattice point in `[lo, hi)`, or a uniform real if the interval holds none.
fn lattice_point(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let first = (lo / CENTER_PITCH).ceil() as i64;
    let last = ((hi / CENTER_PITCH).ceil() as i64) - 1;
    if last < first {
        return rng.random_range(lo..hi);
    }
    rng.random_range(first..=last) as f64 * CENTER_PITCH
}

const PALETTE: [[f64; 3]; 3] = [[0.85, 0.15, 0.12], [0.15, 0.78, 0.2], [0.15, 0.25, 0.9]];

/// Renders one sample. `rng` is derived from the sample index only.
fn render_sample(
    spec: &SynthSpec,
    groups: &Groups,
    index: usize,
    class_label: usize,
    rng: &mut ChaCha8Rng,
) -> Sample {
    let n = spec.image_size;
    let c = spec.concept_vocab.len();
    let entry = &spec.class_table[class_label];
    let color = COLORS.iter().position(|&x| x == entry.color).unwrap();
    let shape_idx = SHAPES.iter().position(|&x| x == entry.shape).unwrap();
    let shape = [Shape::Circle, Shape::Square, Shape::Triangle][shape_idx];

    loop {
        let striped = rng.random_bool(0.5);
        let large = rng.random_bool(0.5);
        let upper = rng.random_bool(0.5);
        let size = n as f64;
        let r = if large {
            rng.random_range(0.30 * size..0.34 * size)
        } else {
            rng.random_range(0.17 * size..0.20 * size)
        };
        let cx = lattice_point(rng, r, size - r);
        let cy = if upper {
            lattice_point(rng, r, (0.5 * size).max(r + 1.0))
        } else {
            lattice_point(rng, (0.5 * size).min(size - r - 1.0), size - r)
        };
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
        let base = PALETTE[color];

        let mut image = Image::new(n, n);
        let mut object = Mask::zeros(n, n);
        let mut stripes = Mask::zeros(n, n);
        for y in 0..n {
            for x in 0..n {
                let inside = shape.contains(x as f64 + 0.5, y as f64 + 0.5, cx, cy, r);
                let on_band = (y / STRIPE_BAND) % 2 == 1;
                if inside {
                    object.set(x, y, true);
                    if striped && on_band {
                        stripes.set(x, y, true);
                        for ch in 0..3 {
                            image.set(x, y, ch, 0.95);
                        }
                    } else {
                        for ch in 0..3 {
                            image.set(x, y, ch, base[ch] + jitter[ch]);
                        }
                    }
                } else {
                    let shade = 0.15;
                    for ch in 0..3 {
                        image.set(x, y, ch, shade + rng.random_range(-0.02..0.02));
                    }
                }
            }
        }
        // stripes must be visible for the striped concept to be grounded
        if striped && stripes.is_empty() {
            continue;
        }

        let texture = groups.textures[striped as usize];
        let mut concepts = vec![
            groups.colors[color],
            groups.shapes[shape_idx],
            texture,
            groups.sizes[!large as usize],
            groups.positions[!upper as usize],
        ];
        concepts.sort_unstable();
        let mut concept_masks = vec![Mask::zeros(n, n); c];
        for &i in &concepts {
            concept_masks[i] = if striped && i == texture {
                stripes.clone()
            } else {
                object.clone()
            };
        }
        return Sample {
            id: format!("{index:05}"),
            image,
            class_label,
            concepts,
            concept_masks,
            class_mask: object,
        };
    }
}

/// Procedurally renders `samples_per_class` images per class.
///
/// Every sample draws from its own RNG seeded by `(seed, index)`, so the result
/// is independent of thread scheduling. Within each class the 20% of samples
/// with the smallest split hash form the test set.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let groups = Groups::resolve(&spec.concept_vocab)?;
    let k = spec.num_classes;
    let per = spec.samples_per_class;

    let samples: Vec<Sample> = (0..k * per)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[idx as u64]));
            render_sample(spec, &groups, idx, idx / per, &mut rng)
        })
        .collect();

    let n_test = (per as f64 * 0.2).round() as usize;
    let mut is_test = vec![false; samples.len()];
    for class in 0..k {
        let mut members: Vec<(u64, usize)> = (class * per..(class + 1) * per)
            .map(|i| (derive_seed(spec.seed, &[0x5917, i as u64]), i))
            .collect();
        members.sort_unstable();
        for &(_, i) in members.iter().take(n_test) {
            is_test[i] = true;
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = samples.into_iter().zip(is_test).partition(|(_, t)| *t);

    Ok(Dataset {
        vocab: spec.concept_vocab.clone(),
        class_names: spec.class_table[..k].iter().map(ClassEntry::name).collect(),
        train: train.into_iter().map(|(s, _)| s).collect(),
        test: test.into_iter().map(|(s, _)| s).collect(),
    })
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    split: Split,
    class_label: usize,
    concepts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    vocab: Vec<String>,
    class_names: Vec<String>,
    samples: Vec<SampleRecord>,
}

fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

fn mask_path(root: &Path, id: &str, name: &str) -> PathBuf {
    root.join("masks").join(id).join(format!("{name}.png"))
}

pub(crate) fn encode_png(img: &image::DynamicImage, path: &Path) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(buf.into_inner())
}

fn write_mask(m: &Mask, path: &Path) -> Result<()> {
    let data = m.data.iter().map(|&v| v * 255).collect();
    let img = GrayImage::from_raw(m.width as u32, m.height as u32, data).expect("mask buffer");
    let bytes = encode_png(&image::DynamicImage::ImageLuma8(img), path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `d` under `path`. The directory is assembled next to the target and
/// renamed into place, replacing a previous dataset directory at `path`.
pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    d.validate()?;
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".dataset-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    let root = staging.path();

    let mut records = Vec::new();
    for (split, samples) in [(Split::Train, &d.train), (Split::Test, &d.test)] {
        for s in samples {
            records.push(SampleRecord {
                id: s.id.clone(),
                split,
                class_label: s.class_label,
                concepts: s.concepts.clone(),
            });
        }
    }
    let all: Vec<&Sample> = d.train.iter().chain(&d.test).collect();
    fs::create_dir_all(root.join("images")).map_err(|e| Error::io(root, e))?;
    all.par_iter().try_for_each(|s| -> Result<()> {
        let ip = image_path(root, &s.id);
        let img = RgbImage::from_raw(
            s.image.width as u32,
            s.image.height as u32,
            s.image.data.clone(),
        )
        .expect("image buffer");
        let bytes = encode_png(&image::DynamicImage::ImageRgb8(img), &ip)?;
        fs::write(&ip, bytes).map_err(|e| Error::io(&ip, e))?;
        let mdir = root.join("masks").join(&s.id);
        fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
        for (i, m) in s.concept_masks.iter().enumerate() {
            write_mask(m, &mask_path(root, &s.id, &i.to_string()))?;
        }
        write_mask(&s.class_mask, &mask_path(root, &s.id, "class"))
    })?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        vocab: d.vocab.names().to_vec(),
        class_names: d.class_names.clone(),
        samples: records,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&root.join(MANIFEST_FILE), &json)?;

    if path.exists() {
        ensure!(
            path.join(MANIFEST_FILE).is_file(),
            "refusing to replace {}: not a dataset directory",
            path.display()
        );
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    let staged = staging.keep();
    fs::rename(&staged, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_mask(path: &Path, id: &str) -> Result<Option<Mask>> {
    if !path.exists() {
        return Ok(None);
    }
    let img = open_image(path)?.into_luma8();
    let mut data = Vec::with_capacity(img.len());
    for &v in img.as_raw() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            _ => {
                return Err(Error::Validation(format!(
                    "sample {id}: non-binary mask value {v} in {}",
                    path.display()
                )))
            }
        }
    }
    Ok(Some(Mask {
        width: img.width() as usize,
        height: img.height() as usize,
        data,
    }))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads and validates a dataset directory.
///
/// Missing concept mask files are read as all-zero masks; a missing class mask
/// is an error.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mpath = path.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        message: e.to_string(),
    })?;
    ensure!(
        manifest.schema_version == SCHEMA_VERSION,
        "unsupported dataset schema version {}",
        manifest.schema_version
    );
    let vocab = ConceptVocabulary::new(manifest.vocab)?;
    let k = manifest.class_names.len();
    let c = vocab.len();

    let loaded: Vec<(Split, Sample)> = manifest
        .samples
        .par_iter()
        .map(|rec| -> Result<(Split, Sample)> {
            ensure!(
                rec.class_label < k,
                "sample {}: class index {} >= K = {k}",
                rec.id,
                rec.class_label
            );
            let rgb = open_image(&image_path(path, &rec.id))?.into_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let image = Image {
                width: w,
                height: h,
                data: rgb.into_raw(),
            };
            let mut concepts = rec.concepts.clone();
            concepts.sort_unstable();
            let mut concept_masks = Vec::with_capacity(c);
            for i in 0..c {
                let m = read_mask(&mask_path(path, &rec.id, &i.to_string()), &rec.id)?;
                concept_masks.push(m.unwrap_or_else(|| Mask::zeros(w, h)));
            }
            let cm_path = mask_path(path, &rec.id, "class");
            let class_mask = read_mask(&cm_path, &rec.id)?.ok_or_else(|| {
                Error::Validation(format!("sample {}: missing {}", rec.id, cm_path.display()))
            })?;
            let sample = Sample {
                id: rec.id.clone(),
                image,
                class_label: rec.class_label,
                concepts,
                concept_masks,
                class_mask,
            };
            validate_sample(&sample, k, c)?;
            Ok((rec.split, sample))
        })
        .collect::<Result<_>>()?;

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (split, s) in loaded {
        match split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    Ok(Dataset {
        vocab,
        class_names: manifest.class_names,
        train,
        test,
    })
}
