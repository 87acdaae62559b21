//! UCR-format loading, padding, and synthetic fixtures.
//!
//! A UCR file has one sample per line: the raw class label, then the series.
//! Fields are tab separated (comma or whitespace separated files are also
//! accepted). In the multivariate variant each tab-separated field is one
//! timestep holding `m` comma-separated values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    /// `steps × feature_dim`; after padding `steps` equals the horizon.
    pub features: Matrix,
    /// Length before padding or truncation.
    pub true_length: usize,
    pub label: usize,
}

impl SequenceSample {
    pub fn new(features: Matrix, label: usize) -> Self {
        let true_length = features.rows();
        Self {
            features,
            true_length,
            label,
        }
    }
}

/// Zero-pads or truncates to exactly `horizon` steps, keeping the prefix.
pub fn pad_sequence(s: &SequenceSample, horizon: usize) -> SequenceSample {
    let m = s.features.cols();
    let rows = s.features.rows();
    let features = if rows == horizon {
        s.features.clone()
    } else {
        Matrix::from_fn(horizon, m, |t, j| if t < rows { s.features.get(t, j) } else { 0.0 })
    };
    SequenceSample {
        features,
        true_length: s.true_length,
        label: s.label,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSet {
    pub samples: Vec<SequenceSample>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub horizon: usize,
    /// Raw label text for each class index, in index order.
    pub class_labels: Vec<String>,
}

impl DataSet {
    /// Builds a dataset, padding every sample to `horizon`.
    pub fn new(
        samples: Vec<SequenceSample>,
        num_classes: usize,
        horizon: usize,
        class_labels: Vec<String>,
    ) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let feature_dim = first.features.cols();
        if horizon == 0 || feature_dim == 0 {
            return Err(Error::InvalidArgument(
                "horizon and feature width must be at least 1".into(),
            ));
        }
        if class_labels.len() != num_classes {
            return Err(Error::dim("class labels", num_classes, class_labels.len()));
        }
        let mut padded = Vec::with_capacity(samples.len());
        for (i, s) in samples.into_iter().enumerate() {
            if s.label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes: num_classes,
                });
            }
            if s.features.cols() != feature_dim {
                return Err(Error::dim(format!("sample {i} feature width"), feature_dim, s.features.cols()));
            }
            if s.features.rows() == 0 {
                return Err(Error::InvalidArgument(format!("sample {i} is empty")));
            }
            if !s.features.is_finite() {
                return Err(Error::InvalidArgument(format!("sample {i} has non-finite values")));
            }
            padded.push(pad_sequence(&s, horizon));
        }
        Ok(Self {
            samples: padded,
            num_classes,
            feature_dim,
            horizon,
            class_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Re-pads every sample to a new horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        Self::new(
            self.samples.clone(),
            self.num_classes,
            horizon,
            self.class_labels.clone(),
        )
    }

    /// Per-series, per-feature z-normalization over the true length.
    /// Constant series are only centred.
    pub fn znormalize(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.samples {
            let len = s.true_length.min(s.features.rows());
            for j in 0..s.features.cols() {
                let mean = (0..len).map(|t| s.features.get(t, j)).sum::<f64>() / len as f64;
                let var = (0..len)
                    .map(|t| (s.features.get(t, j) - mean).powi(2))
                    .sum::<f64>()
                    / len as f64;
                let sd = var.sqrt();
                for t in 0..len {
                    let v = s.features.get(t, j) - mean;
                    s.features.set(t, j, if sd > 0.0 { v / sd } else { v });
                }
            }
        }
        out
    }
}

struct RawRow {
    line: usize,
    label: String,
    steps: Vec<Vec<f64>>,
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_value(path: &Path, line: usize, col: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_error(path, line, format!("column {col}: cannot parse `{field}` as a number")))?;
    if !v.is_finite() {
        return Err(parse_error(path, line, format!("column {col}: missing or non-finite value `{field}`")));
    }
    Ok(v)
}

fn parse_rows(path: &Path) -> Result<Vec<RawRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (fields, multivariate): (Vec<&str>, bool) = if line.contains('\t') {
            let f: Vec<&str> = line.split('\t').collect();
            let multi = f[1..].iter().any(|s| s.contains(','));
            (f, multi)
        } else if line.contains(',') {
            (line.split(',').collect(), false)
        } else {
            (line.split_whitespace().collect(), false)
        };
        if fields.len() < 2 {
            return Err(parse_error(path, lineno, "row has a label but no values"));
        }
        let label = fields[0].trim().to_string();
        if label.is_empty() {
            return Err(parse_error(path, lineno, "empty label"));
        }
        let mut steps = Vec::with_capacity(fields.len() - 1);
        for (c, field) in fields[1..].iter().enumerate() {
            let step = if multivariate {
                field
                    .split(',')
                    .map(|v| parse_value(path, lineno, c + 2, v))
                    .collect::<Result<Vec<_>>>()?
            } else {
                vec![parse_value(path, lineno, c + 2, field)?]
            };
            steps.push(step);
        }
        rows.push(RawRow {
            line: lineno,
            label,
            steps,
        });
    }
    Ok(rows)
}

/// Raw labels sorted numerically when they all parse as numbers, else
/// lexicographically.
fn label_order(labels: impl Iterator<Item = String>) -> Vec<String> {
    let mut unique: Vec<String> = labels.collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if unique.iter().all(|l| l.parse::<f64>().is_ok()) {
        unique.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .total_cmp(&b.parse::<f64>().unwrap())
        });
    }
    unique
}

fn build(path: &Path, rows: Vec<RawRow>, labels: &[String], horizon: Option<usize>) -> Result<DataSet> {
    let first = rows.first().ok_or(Error::EmptyDataset)?;
    let (len, m) = (first.steps.len(), first.steps[0].len());
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut samples = Vec::with_capacity(rows.len());
    for row in &rows {
        if row.steps.len() != len {
            return Err(parse_error(
                path,
                row.line,
                format!("ragged row: {} values, expected {len}", row.steps.len()),
            ));
        }
        if let Some(bad) = row.steps.iter().position(|s| s.len() != m) {
            return Err(parse_error(
                path,
                row.line,
                format!("step {} has {} features, expected {m}", bad + 1, row.steps[bad].len()),
            ));
        }
        let label = *index
            .get(row.label.as_str())
            .ok_or_else(|| parse_error(path, row.line, format!("label `{}` not seen in training data", row.label)))?;
        let data = row.steps.iter().flatten().copied().collect();
        samples.push(SequenceSample::new(Matrix::from_vec(len, m, data)?, label));
    }
    DataSet::new(samples, labels.len(), horizon.unwrap_or(len), labels.to_vec())
}

/// Loads one UCR file, remapping labels onto `0..d` in sorted order.
pub fn load_ucr(path: impl AsRef<Path>) -> Result<DataSet> {
    let path = path.as_ref();
    let rows = parse_rows(path)?;
    let labels = label_order(rows.iter().map(|r| r.label.clone()));
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels.len() < 2 {
        return Err(parse_error(path, rows[0].line, format!("need at least 2 classes, found {}", labels.len())));
    }
    build(path, rows, &labels, None)
}

/// Loads a train/test pair. The test split reuses the training label map
/// and horizon.
pub fn load_ucr_split(train: impl AsRef<Path>, test: impl AsRef<Path>) -> Result<(DataSet, DataSet)> {
    let train_set = load_ucr(&train)?;
    let test_path = test.as_ref();
    let rows = parse_rows(test_path)?;
    let test_set = build(test_path, rows, &train_set.class_labels, Some(train_set.horizon))?;
    if test_set.feature_dim != train_set.feature_dim {
        return Err(Error::dim("test feature width", train_set.feature_dim, test_set.feature_dim));
    }
    Ok((train_set, test_set))
}

/// `<dir>/<Name>_TRAIN.tsv` and `<dir>/<Name>_TEST.tsv` for a dataset
/// directory, as laid out in the UCR archive.
pub fn ucr_split_paths(dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a dataset directory", dir.display())))?;
    let train = dir.join(format!("{name}_TRAIN.tsv"));
    let test = dir.join(format!("{name}_TEST.tsv"));
    for p in [&train, &test] {
        if !p.is_file() {
            return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
    }
    Ok((train, test))
}

/// Directories searched for dataset names: `$NV_UCR_DIR`, then `data/ucr`
/// under the working directory and each of its ancestors, then the copy
/// shipped with this source tree.
pub fn ucr_search_dirs() -> Vec<PathBuf> {
    let mut dirs = Vec::new();
    if let Some(d) = std::env::var_os("NV_UCR_DIR") {
        dirs.push(PathBuf::from(d));
    }
    if let Ok(cwd) = std::env::current_dir() {
        dirs.extend(cwd.ancestors().map(|a| a.join("data").join("ucr")));
    }
    dirs.push(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ucr"));
    dirs
}

/// Resolves a dataset argument to a training file and, when one exists, its
/// test file. Accepts a dataset directory, a training file (the test split
/// is its `_TRAIN` → `_TEST` sibling), or a dataset name matched
/// case-insensitively in [`ucr_search_dirs`].
pub fn resolve_dataset(arg: &str) -> Result<(PathBuf, Option<PathBuf>)> {
    let path = Path::new(arg);
    if path.is_dir() {
        let (train, test) = ucr_split_paths(path)?;
        return Ok((train, Some(test)));
    }
    if path.is_file() {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let test = name
            .contains("_TRAIN")
            .then(|| path.with_file_name(name.replace("_TRAIN", "_TEST")))
            .filter(|p| p.is_file());
        return Ok((path.to_path_buf(), test));
    }
    let wanted = arg.to_ascii_lowercase();
    for dir in ucr_search_dirs() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for entry in entries.flatten() {
            let p = entry.path();
            let matches = p.file_name().and_then(|n| n.to_str()).map(str::to_ascii_lowercase) == Some(wanted.clone());
            if matches && p.is_dir() {
                let (train, test) = ucr_split_paths(&p)?;
                return Ok((train, Some(test)));
            }
        }
    }
    Err(Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::NotFound, "no such dataset file, directory or name"),
    ))
}

/// Loads a dataset argument as [`resolve_dataset`] does, with an optional
/// explicit test file, a horizon override (0 keeps the data's length) and
/// optional per-series z-normalization.
pub fn load_dataset(
    arg: &str,
    test: Option<&Path>,
    horizon: usize,
    znorm: bool,
) -> Result<(DataSet, Option<DataSet>)> {
    let (train_path, found_test) = resolve_dataset(arg)?;
    let test_path = test.map(Path::to_path_buf).or(found_test);
    let (mut train, mut test) = match test_path {
        Some(t) => {
            let (a, b) = load_ucr_split(&train_path, &t)?;
            (a, Some(b))
        }
        None => (load_ucr(&train_path)?, None),
    };
    if horizon > 0 && horizon != train.horizon {
        train = train.with_horizon(horizon)?;
        test = test.map(|t| t.with_horizon(horizon)).transpose()?;
    }
    if znorm {
        train = train.znormalize();
        test = test.map(|t| t.znormalize());
    }
    Ok((train, test))
}

/// Writes a dataset back out in UCR format with the original raw labels.
pub fn write_ucr(ds: &DataSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in &ds.samples {
        out.push_str(&ds.class_labels[s.label]);
        for t in 0..s.features.rows() {
            out.push('\t');
            for (j, v) in s.features.row(t).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{v}").expect("writing to a String");
            }
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic separable generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub horizon: usize,
    pub features: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Height of the class-specific offset.
    pub offset: f64,
    /// Standard deviation of background noise.
    pub noise: f64,
    /// If set, steps from `late_start` on carry class-independent Gaussian
    /// noise of this standard deviation, and class windows are confined to
    /// `0..late_start`.
    pub late_noise: Option<(usize, f64)>,
}

impl SynthConfig {
    pub fn new(classes: usize, horizon: usize, features: usize, per_class: usize, seed: u64) -> Self {
        Self {
            classes,
            horizon,
            features,
            per_class,
            seed,
            offset: 1.0,
            noise: 0.1,
            late_noise: None,
        }
    }
}

/// Class `k` gets `+offset` on its own window of consecutive steps; windows
/// tile the signal span in class order. Samples are shuffled.
pub fn synth_separable(cfg: &SynthConfig) -> Result<DataSet> {
    if cfg.classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs at least 2 classes, got {}",
            cfg.classes
        )));
    }
    if cfg.horizon == 0 || cfg.features == 0 || cfg.per_class == 0 {
        return Err(Error::InvalidArgument("synthetic counts must be at least 1".into()));
    }
    let span = match cfg.late_noise {
        Some((start, _)) => start.min(cfg.horizon),
        None => cfg.horizon,
    };
    if cfg.classes > span {
        return Err(Error::InvalidArgument(format!(
            "{} classes do not fit in {span} signal steps",
            cfg.classes
        )));
    }
    let width = span / cfg.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let background = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let late = cfg
        .late_noise
        .map(|(_, sd)| Normal::new(0.0, sd))
        .transpose()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut samples = Vec::with_capacity(cfg.classes * cfg.per_class);
    for k in 0..cfg.classes {
        let window = k * width..(k + 1) * width;
        for _ in 0..cfg.per_class {
            let features = Matrix::from_fn(cfg.horizon, cfg.features, |t, _| {
                let mut v = background.sample(&mut rng);
                if window.contains(&t) {
                    v += cfg.offset;
                }
                if let Some(late) = &late {
                    if t >= span {
                        v += late.sample(&mut rng);
                    }
                }
                v
            });
            samples.push(SequenceSample::new(features, k));
        }
    }
    samples.shuffle(&mut rng);
    let labels = (0..cfg.classes).map(|k| k.to_string()).collect();
    DataSet::new(samples, cfg.classes, cfg.horizon, labels)
}
