//! Reading a trained NeuroView head: per-class weight maps, class
//! similarity, and time-step counterfactuals.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::network::{EncoderConfig, HeadKind, HeadParams, Model};
use crate::parallel::{map_items, Execution};
use crate::train::{evaluate, EvalReport};

fn require_nv(head: &HeadParams) -> Result<()> {
    if head.kind != HeadKind::NeuroView {
        return Err(Error::NotNeuroView(head.kind.name()));
    }
    Ok(())
}

fn check_class(class: usize, classes: usize) -> Result<()> {
    if class >= classes {
        return Err(Error::LabelOutOfRange { label: class, classes });
    }
    Ok(())
}

/// One class row of `V` viewed per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub class: usize,
    pub horizon: usize,
    pub hidden_dim: usize,
    /// `hidden_dim`-wide blocks per timestep (layers × directions).
    pub blocks: usize,
    /// Mean weight of each `(timestep, block)`, indexed `t * blocks + block`.
    pub per_timestep_mean: Vec<f64>,
    /// `horizon × (blocks · hidden_dim)`; row-major flattening is the class row.
    pub per_unit: Matrix,
}

impl WeightMap {
    /// Mean weight per timestep for one block (`layer * directions + dir`).
    pub fn block_means(&self, block: usize) -> Vec<f64> {
        (0..self.horizon)
            .map(|t| self.per_timestep_mean[t * self.blocks + block])
            .collect()
    }

    /// Weights of one block at one timestep.
    pub fn block_units(&self, t: usize, block: usize) -> &[f64] {
        &self.per_unit.row(t)[block * self.hidden_dim..(block + 1) * self.hidden_dim]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.per_unit.as_slice().to_vec()
    }
}

pub fn weight_map(head: &HeadParams, cfg: &EncoderConfig, class: usize) -> Result<WeightMap> {
    require_nv(head)?;
    check_class(class, head.classes())?;
    let width = cfg.head_width(HeadKind::NeuroView);
    if head.weights.cols() != width {
        return Err(Error::dim("head width", width, head.weights.cols()));
    }
    let (horizon, n, blocks) = (cfg.horizon, cfg.hidden_dim, cfg.blocks_per_step());
    let row = head.weights.row(class);
    let per_unit = Matrix::from_vec(horizon, blocks * n, row.to_vec())?;
    let per_timestep_mean = row
        .chunks(n)
        .map(|b| b.iter().sum::<f64>() / n as f64)
        .collect();
    Ok(WeightMap {
        class,
        horizon,
        hidden_dim: n,
        blocks,
        per_timestep_mean,
        per_unit,
    })
}

/// Cosine similarity between every pair of class rows.
pub fn class_similarity(head: &HeadParams) -> Result<Matrix> {
    require_nv(head)?;
    let d = head.classes();
    let norms: Vec<f64> = (0..d).map(|c| linalg::norm2(head.weights.row(c))).collect();
    if let Some(class) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroNormRow { class });
    }
    Ok(Matrix::from_fn(d, d, |i, j| {
        if i == j {
            return 1.0;
        }
        let c = linalg::dot(head.weights.row(i), head.weights.row(j)) / (norms[i] * norms[j]);
        c.clamp(-1.0, 1.0)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// Largest mean weights first.
    TopPositive,
    /// Most negative mean weights first.
    TopNegative,
}

impl fmt::Display for Ranking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ranking::TopPositive => "positive",
            Ranking::TopNegative => "negative",
        })
    }
}

impl FromStr for Ranking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "positive" | "top-positive" | "pos" => Ok(Ranking::TopPositive),
            "negative" | "top-negative" | "neg" => Ok(Ranking::TopNegative),
            other => Err(Error::InvalidArgument(format!(
                "unknown ranking `{other}` (expected positive or negative)"
            ))),
        }
    }
}

/// What gets zeroed at the selected timesteps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroTarget {
    /// The input features of every evaluated sample.
    #[default]
    Inputs,
    /// The classifier blocks `V^(t)` (all classes, all layers/directions).
    Weights,
}

/// Whose weight map picks the timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Class(usize),
    /// Union of every class's own top-`k` steps.
    AllClasses,
}

/// `k` timesteps ordered by `means` (descending for positive, ascending for
/// negative); ties go to the lower timestep.
pub fn rank_steps(means: &[f64], k: usize, ranking: Ranking) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..means.len()).collect();
    idx.sort_by(|&a, &b| match ranking {
        Ranking::TopPositive => means[b].total_cmp(&means[a]),
        Ranking::TopNegative => means[a].total_cmp(&means[b]),
    });
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSpec {
    pub target: Target,
    pub k: usize,
    pub ranking: Ranking,
    pub zero: ZeroTarget,
    /// Which `(layer, direction)` block's means rank the timesteps.
    pub block: (usize, usize),
}

impl CounterfactualSpec {
    pub fn new(target: Target, k: usize, ranking: Ranking) -> Self {
        Self {
            target,
            k,
            ranking,
            zero: ZeroTarget::Inputs,
            block: (0, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub target: Target,
    pub k: usize,
    pub ranking: Ranking,
    pub zero: ZeroTarget,
    /// Sorted. For a single class exactly `k` steps; for all classes the
    /// union of each class's `k` steps.
    pub zeroed_steps: Vec<usize>,
    pub report: EvalReport,
}

/// The timesteps a counterfactual would zero.
pub fn select_steps(model: &Model, spec: &CounterfactualSpec) -> Result<Vec<usize>> {
    require_nv(&model.head)?;
    let enc = &model.encoder;
    if spec.k > enc.horizon {
        return Err(Error::InvalidArgument(format!(
            "k = {} exceeds the horizon {}",
            spec.k, enc.horizon
        )));
    }
    let (layer, dir) = spec.block;
    if layer >= enc.layers || dir >= enc.directions() {
        return Err(Error::InvalidArgument(format!(
            "no block for layer {layer}, direction {dir}"
        )));
    }
    let block = enc.cell_index(layer, dir);
    let classes: Vec<usize> = match spec.target {
        Target::Class(c) => {
            check_class(c, model.classes())?;
            vec![c]
        }
        Target::AllClasses => (0..model.classes()).collect(),
    };
    let mut steps = BTreeSet::new();
    for c in classes {
        let map = weight_map(&model.head, enc, c)?;
        steps.extend(rank_steps(&map.block_means(block), spec.k, spec.ranking));
    }
    Ok(steps.into_iter().collect())
}

/// Zeroes the selected timesteps and re-evaluates.
pub fn time_analysis(
    model: &Model,
    ds: &DataSet,
    spec: &CounterfactualSpec,
    exec: Execution,
) -> Result<CounterfactualResult> {
    let steps = select_steps(model, spec)?;
    let report = match spec.zero {
        ZeroTarget::Inputs => {
            let mut modified = ds.clone();
            for s in &mut modified.samples {
                for &t in &steps {
                    s.features.row_mut(t).fill(0.0);
                }
            }
            evaluate(model, &modified, exec)?
        }
        ZeroTarget::Weights => {
            let mut m = model.clone();
            let block = m.encoder.blocks_per_step() * m.encoder.hidden_dim;
            for c in 0..m.classes() {
                let row = m.head.weights.row_mut(c);
                for &t in &steps {
                    row[t * block..(t + 1) * block].fill(0.0);
                }
            }
            evaluate(&m, ds, exec)?
        }
    };
    Ok(CounterfactualResult {
        target: spec.target,
        k: spec.k,
        ranking: spec.ranking,
        zero: spec.zero,
        zeroed_steps: steps,
        report,
    })
}

/// One counterfactual per `k`, in order.
pub fn time_analysis_sweep(
    model: &Model,
    ds: &DataSet,
    base: &CounterfactualSpec,
    ks: &[usize],
    exec: Execution,
) -> Result<Vec<CounterfactualResult>> {
    map_items(ks, exec, |&k| {
        let spec = CounterfactualSpec { k, ..base.clone() };
        time_analysis(model, ds, &spec, Execution::Sequential)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub class: usize,
    pub layer: usize,
    pub direction: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub horizon: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub directions: usize,
    pub maps: Vec<MapEntry>,
    pub similarity: Option<String>,
    pub counterfactuals: Option<String>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn map_file(class: usize, layer: usize, dir: usize, single: bool) -> String {
    if single {
        format!("class_{class}.csv")
    } else {
        let d = if dir == 0 { "fwd" } else { "rev" };
        format!("class_{class}_layer{layer}_{d}.csv")
    }
}

/// Writes the weight maps (one CSV per class and block), the similarity
/// matrix, the counterfactual table and a `manifest.json` into `dir`.
pub fn export_report(
    maps: &[WeightMap],
    cfg: &EncoderConfig,
    similarity: Option<&Matrix>,
    counterfactuals: &[CounterfactualResult],
    dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dirs = cfg.directions();
    let single = cfg.blocks_per_step() == 1;
    let mut entries = Vec::new();
    for map in maps {
        if map.blocks != cfg.blocks_per_step() || map.horizon != cfg.horizon || map.hidden_dim != cfg.hidden_dim {
            return Err(Error::InvalidArgument(format!(
                "weight map for class {} does not match the encoder config",
                map.class
            )));
        }
        for layer in 0..cfg.layers {
            for dir_idx in 0..dirs {
                let block = cfg.cell_index(layer, dir_idx);
                let file = map_file(map.class, layer, dir_idx, single);
                let path = dir.join(&file);
                let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
                let mut header = vec!["timestep".to_string(), "mean_weight".to_string()];
                header.extend((0..map.hidden_dim).map(|j| format!("unit_{j}")));
                w.write_record(&header).map_err(|e| csv_err(&path, e))?;
                let means = map.block_means(block);
                for (t, mean) in means.iter().enumerate() {
                    let mut rec = vec![t.to_string(), mean.to_string()];
                    rec.extend(map.block_units(t, block).iter().map(f64::to_string));
                    w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
                entries.push(MapEntry {
                    class: map.class,
                    layer,
                    direction: dir_idx,
                    file,
                });
            }
        }
    }
    let similarity_file = match similarity {
        Some(sim) => {
            let path = dir.join("similarity.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
            let mut header = vec!["class".to_string()];
            header.extend((0..sim.cols()).map(|j| j.to_string()));
            w.write_record(&header).map_err(|e| csv_err(&path, e))?;
            for i in 0..sim.rows() {
                let mut rec = vec![i.to_string()];
                rec.extend(sim.row(i).iter().map(f64::to_string));
                w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            Some("similarity.csv".to_string())
        }
        None => None,
    };
    let cf_file = if counterfactuals.is_empty() {
        None
    } else {
        let path = dir.join("counterfactuals.json");
        let body = serde_json::to_string_pretty(counterfactuals)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Some("counterfactuals.json".to_string())
    };
    let manifest = Manifest {
        horizon: cfg.horizon,
        hidden_dim: cfg.hidden_dim,
        layers: cfg.layers,
        directions: dirs,
        maps: entries,
        similarity: similarity_file,
        counterfactuals: cf_file,
    };
    let path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Everything [`export_report`] wrote, parsed back.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub manifest: Manifest,
    pub maps: Vec<WeightMap>,
    pub similarity: Option<Matrix>,
    pub counterfactuals: Vec<CounterfactualResult>,
}

fn read_numeric_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 2,
                    message: format!("cannot parse `{f}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_report(dir: impl AsRef<Path>) -> Result<Report> {
    let dir: PathBuf = dir.as_ref().to_path_buf();
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let blocks = manifest.layers * manifest.directions;
    let (horizon, n) = (manifest.horizon, manifest.hidden_dim);
    let mut maps: Vec<WeightMap> = Vec::new();
    for entry in &manifest.maps {
        let path = dir.join(&entry.file);
        let rows = read_numeric_csv(&path)?;
        if rows.len() != horizon || rows.iter().any(|r| r.len() != n + 2) {
            return Err(Error::Parse {
                path,
                line: 1,
                message: format!("expected {horizon} rows of {} columns", n + 2),
            });
        }
        if maps.last().map(|m| m.class) != Some(entry.class) {
            maps.push(WeightMap {
                class: entry.class,
                horizon,
                hidden_dim: n,
                blocks,
                per_timestep_mean: vec![0.0; horizon * blocks],
                per_unit: Matrix::zeros(horizon, blocks * n),
            });
        }
        let map = maps.last_mut().expect("pushed above");
        let block = entry.layer * manifest.directions + entry.direction;
        for (t, row) in rows.iter().enumerate() {
            map.per_timestep_mean[t * blocks + block] = row[1];
            map.per_unit.row_mut(t)[block * n..(block + 1) * n].copy_from_slice(&row[2..]);
        }
    }
    let similarity = match &manifest.similarity {
        Some(f) => {
            let rows = read_numeric_csv(&dir.join(f))?;
            let d = rows.len();
            Some(Matrix::from_fn(d, d, |i, j| rows[i][j + 1]))
        }
        None => None,
    };
    let counterfactuals = match &manifest.counterfactuals {
        Some(f) => {
            let path = dir.join(f);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path,
                line: e.line(),
                message: e.to_string(),
            })?
        }
        None => Vec::new(),
    };
    Ok(Report {
        manifest,
        maps,
        similarity,
        counterfactuals,
    })
}
