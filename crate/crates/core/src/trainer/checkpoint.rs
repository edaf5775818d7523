// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-file checkpoint: an 8-byte little-endian header length, a JSON
//! header, then raw little-endian `f32` arrays addressed by the header's
//! tensor table (byte offsets relative to the start of the data section).

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::ConceptVocabulary;
use crate::encoders::{Backbone, BackboneConfig, ConceptFeatures};
use crate::error::{ensure, Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{HeadKind, Model, ModelParams, PARAM_NAMES};
use crate::numeric::write_atomic;

use super::config::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const CONCEPT_TENSOR: &str = "concept_features";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: HeadKind,
    pub config: TrainConfig,
    pub backbone: BackboneConfig,
    pub vocab: ConceptVocabulary,
    pub class_names: Vec<String>,
    pub concepts: ConceptFeatures,
    pub params: ModelParams,
    pub steps: u64,
    pub final_losses: LossBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    head: HeadKind,
    config: TrainConfig,
    backbone: BackboneConfig,
    vocab: ConceptVocabulary,
    class_names: Vec<String>,
    steps: u64,
    final_losses: LossBreakdown,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Ok(Model {
            kind: self.head,
            backbone: Backbone::new(self.backbone)?,
            concepts: self.concepts.clone(),
            params: self.params.clone(),
        })
    }

    fn tensors(&self) -> Vec<(&str, Vec<usize>, &[f64])> {
        let mut out = vec![(
            CONCEPT_TENSOR,
            vec![self.concepts.num_concepts(), self.concepts.dim()],
            self.concepts.rows.as_slice().expect("standard layout"),
        )];
        for ((name, shape), data) in PARAM_NAMES
            .iter()
            .zip(self.params.shapes())
            .zip(self.params.slices())
        {
            out.push((name, shape, data));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut data = Vec::new();
        for (name, shape, values) in self.tensors() {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape,
                offset: data.len(),
            });
            for v in values {
                data.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let header = Header {
            schema_version: CHECKPOINT_VERSION,
            head: self.head,
            config: self.config.clone(),
            backbone: self.backbone,
            vocab: self.vocab.clone(),
            class_names: self.class_names.clone(),
            steps: self.steps,
            final_losses: self.final_losses,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + data.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let parse = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            message,
        };
        ensure!(
            bytes.len() >= 8,
            "checkpoint {} is truncated",
            origin.display()
        );
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| parse("header length exceeds file size".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[8..header_end]).map_err(|e| parse(e.to_string()))?;
        ensure!(
            header.schema_version == CHECKPOINT_VERSION,
            "unsupported checkpoint version {}",
            header.schema_version
        );
        let data = &bytes[header_end..];
        let read = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let entry = header
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| parse(format!("missing tensor `{name}`")))?;
            let len: usize = entry.shape.iter().product();
            let end = entry.offset + 4 * len;
            ensure!(
                end <= data.len(),
                "tensor `{name}` extends past the end of {}",
                origin.display()
            );
            let values = data[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            Ok((entry.shape.clone(), values))
        };
        let matrix = |name: &str| -> Result<Array2<f64>> {
            let (shape, values) = read(name)?;
            ensure!(shape.len() == 2, "tensor `{name}` must be 2-d");
            Ok(Array2::from_shape_vec((shape[0], shape[1]), values).expect("length checked"))
        };
        let vector = |name: &str| -> Result<Array1<f64>> {
            let (shape, values) = read(name)?;
            ensure!(shape.len() == 1, "tensor `{name}` must be 1-d");
            Ok(Array1::from(values))
        };

        let rows = matrix(CONCEPT_TENSOR)?;
        ensure!(
            rows.nrows() == header.vocab.len(),
            "concept feature rows do not match the vocabulary"
        );
        let params = ModelParams {
            conv_w: matrix("conv_w")?,
            conv_b: vector("conv_b")?,
            attn_q: matrix("attn_q")?,
            attn_k: matrix("attn_k")?,
            attn_v: matrix("attn_v")?,
            out_scale: vector("out_scale")?
                .first()
                .copied()
                .ok_or_else(|| parse("empty out_scale".into()))?,
            cls_w: matrix("cls_w")?,
            cls_b: vector("cls_b")?,
        };
        params.validate()?;
        ensure!(
            params.dim() == rows.ncols(),
            "parameter and concept feature dimensions differ"
        );
        Ok(Self {
            head: header.head,
            config: header.config,
            backbone: header.backbone,
            vocab: header.vocab,
            class_names: header.class_names,
            concepts: ConceptFeatures { rows },
            params,
            steps: header.steps,
            final_losses: header.final_losses,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
