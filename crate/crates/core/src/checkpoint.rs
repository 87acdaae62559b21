//! Versioned JSON checkpoints. Tensors are stored as base64 of their
//! little-endian `f64` bytes, so values round-trip exactly.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::cells::CellParams;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{EncoderConfig, HeadKind, HeadParams, Model};
use crate::train::AdamState;

pub const FORMAT: &str = "neuroview-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    /// Raw dataset labels in class-index order.
    pub class_labels: Vec<String>,
    pub adam: Option<AdamState>,
    pub metrics: Metrics,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CellRecord {
    layer: usize,
    direction: usize,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct HeadRecord {
    kind: HeadKind,
    mean_pool: bool,
    weights: TensorRecord,
}

#[derive(Serialize, Deserialize)]
struct AdamRecord {
    step: u64,
    m: String,
    v: String,
}

#[derive(Serialize, Deserialize)]
struct Record {
    format: String,
    version: u32,
    seed: u64,
    config: RunConfig,
    encoder: EncoderConfig,
    class_labels: Vec<String>,
    cells: Vec<CellRecord>,
    head: HeadRecord,
    adam: Option<AdamRecord>,
    metrics: Metrics,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(name: &str, text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}`: expected {expected} values, found {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn tensor(name: &str, (rows, cols): (usize, usize), data: &[f64]) -> TensorRecord {
    TensorRecord {
        name: name.to_string(),
        rows,
        cols,
        data: encode(data),
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let enc = &self.model.encoder;
        let cells = self
            .model
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| CellRecord {
                layer: i / enc.directions(),
                direction: i % enc.directions(),
                tensors: c
                    .named_tensors()
                    .into_iter()
                    .map(|(n, shape, d)| tensor(n, shape, d))
                    .collect(),
            })
            .collect();
        let w = &self.model.head.weights;
        let record = Record {
            format: FORMAT.to_string(),
            version: VERSION,
            seed: self.seed,
            config: self.config.clone(),
            encoder: *enc,
            class_labels: self.class_labels.clone(),
            cells,
            head: HeadRecord {
                kind: self.model.head.kind,
                mean_pool: self.model.head.mean_pool,
                weights: tensor("V", w.shape(), w.as_slice()),
            },
            adam: self.adam.as_ref().map(|a| AdamRecord {
                step: a.step,
                m: encode(&a.m),
                v: encode(&a.v),
            }),
            metrics: self.metrics.clone(),
        };
        let mut out = serde_json::to_string_pretty(&record).expect("checkpoint serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if probe.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
            return Err(Error::Checkpoint("not a neuroview checkpoint".into()));
        }
        match probe.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported version {v} (this build reads version {VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("missing version".into())),
        }
        let r: Record = serde_json::from_value(probe).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let enc = r.encoder;
        enc.validate()?;
        if r.cells.len() != enc.num_cells() {
            return Err(Error::Checkpoint(format!(
                "expected {} cells, found {}",
                enc.num_cells(),
                r.cells.len()
            )));
        }
        let mut cells = Vec::with_capacity(r.cells.len());
        for (i, c) in r.cells.into_iter().enumerate() {
            if (c.layer, c.direction) != (i / enc.directions(), i % enc.directions()) {
                return Err(Error::Checkpoint(format!("cell {i} is out of order")));
            }
            let m = if c.layer == 0 { enc.input_dim } else { enc.step_width() };
            let tensors = c
                .tensors
                .into_iter()
                .map(|t| Ok((t.name.clone(), decode(&t.name, &t.data, t.rows * t.cols)?)))
                .collect::<Result<Vec<_>>>()?;
            cells.push(CellParams::from_named_tensors(enc.cell, m, enc.hidden_dim, tensors)?);
        }
        let w = &r.head.weights;
        let weights = Matrix::from_vec(w.rows, w.cols, decode("V", &w.data, w.rows * w.cols)?)?;
        let model = Model {
            encoder: enc,
            cells,
            head: HeadParams {
                kind: r.head.kind,
                mean_pool: r.head.mean_pool,
                weights,
            },
        };
        model.validate()?;
        if r.class_labels.len() != model.classes() {
            return Err(Error::Checkpoint(format!(
                "{} class labels for {} classes",
                r.class_labels.len(),
                model.classes()
            )));
        }
        let n = crate::params::ParamSet::num_params(&model);
        let adam = r
            .adam
            .map(|a| {
                Ok::<_, Error>(AdamState {
                    step: a.step,
                    m: decode("adam.m", &a.m, n)?,
                    v: decode("adam.v", &a.v, n)?,
                })
            })
            .transpose()?;
        Ok(Self {
            config: r.config,
            model,
            class_labels: r.class_labels,
            adam,
            metrics: r.metrics,
            seed: r.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
