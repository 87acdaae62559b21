//! Sequence encoders (unidirectional, bidirectional, stacked) and the three
//! classifier heads.
//!
//! Feature layout of the NeuroView head input `Q(x)` is time-major: for each
//! timestep `t` the block `V^(t)` covers every layer and direction at that
//! step, ordered `(layer 0 fwd, layer 0 rev, layer 1 fwd, ...)`, each block
//! `hidden_dim` wide. For a single-layer unidirectional encoder this is the
//! plain concatenation `[q^(1); ...; q^(T)]`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{
    self, backward_accumulate, forward_unchecked, CellKind, CellParams, CellState, GateTrace,
    InitScheme,
};
use crate::error::{Error, Result};
use crate::linalg::{self, add_outer, gemv_acc, gemv_t_acc, Matrix, Vector};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    /// Linear map of the final hidden state.
    #[serde(rename = "last")]
    LastState,
    /// Linear map of the sum (or mean) of all hidden states.
    #[serde(rename = "avg")]
    AveragePool,
    /// One global linear map over the ReLU of every hidden state.
    #[serde(rename = "nv")]
    NeuroView,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::LastState, HeadKind::AveragePool, HeadKind::NeuroView];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::LastState => "last",
            HeadKind::AveragePool => "avg",
            HeadKind::NeuroView => "nv",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "last" | "laststate" | "last-state" => Ok(HeadKind::LastState),
            "avg" | "average" | "averagepool" | "average-pool" | "mean" => Ok(HeadKind::AveragePool),
            "nv" | "neuroview" => Ok(HeadKind::NeuroView),
            other => Err(Error::InvalidArgument(format!(
                "unknown head `{other}` (expected last, avg or nv)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub cell: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub bidirectional: bool,
    /// Fixed sequence length seen by the classifier.
    pub horizon: usize,
}

impl EncoderConfig {
    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Width of one layer's output at one timestep.
    pub fn step_width(&self) -> usize {
        self.hidden_dim * self.directions()
    }

    /// Number of `hidden_dim`-wide blocks per timestep in the NeuroView input.
    pub fn blocks_per_step(&self) -> usize {
        self.layers * self.directions()
    }

    pub fn head_width(&self, head: HeadKind) -> usize {
        match head {
            HeadKind::NeuroView => self.horizon * self.blocks_per_step() * self.hidden_dim,
            HeadKind::LastState | HeadKind::AveragePool => self.step_width(),
        }
    }

    pub fn num_cells(&self) -> usize {
        self.layers * self.directions()
    }

    pub fn cell_index(&self, layer: usize, direction: usize) -> usize {
        layer * self.directions() + direction
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.step_width()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("layers", self.layers),
            ("horizon", self.horizon),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Classifier weights. `weights` has one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub kind: HeadKind,
    /// Divide the pooled sum by the horizon (average-pool head only).
    pub mean_pool: bool,
    pub weights: Matrix,
}

impl HeadParams {
    pub fn classes(&self) -> usize {
        self.weights.rows()
    }
}

/// A full model: encoder cells plus classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    /// Indexed by [`EncoderConfig::cell_index`].
    pub cells: Vec<CellParams>,
    pub head: HeadParams,
}

impl Model {
    /// Initializes every cell and the head from one seeded stream: cells in
    /// `(layer, direction)` order, then the head matrix, uniform in
    /// `±1/√width`.
    pub fn new(
        encoder: EncoderConfig,
        head: HeadKind,
        classes: usize,
        init: InitScheme,
        mean_pool: bool,
    ) -> Result<Self> {
        encoder.validate()?;
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "a classifier needs at least 2 classes, got {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let mut cells_out = Vec::with_capacity(encoder.num_cells());
        for layer in 0..encoder.layers {
            for _ in 0..encoder.directions() {
                cells_out.push(cells::init_params_with_rng(
                    encoder.cell,
                    encoder.layer_input_dim(layer),
                    encoder.hidden_dim,
                    init.kind,
                    &mut rng,
                )?);
            }
        }
        let width = encoder.head_width(head);
        let mut weights = Matrix::zeros(classes, width);
        cells::fill_uniform(weights.as_mut_slice(), 1.0 / (width as f64).sqrt(), &mut rng);
        Ok(Self {
            encoder,
            cells: cells_out,
            head: HeadParams {
                kind: head,
                mean_pool,
                weights,
            },
        })
    }

    /// A model of the same shape with every parameter zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder,
            cells: self.cells.iter().map(CellParams::zeros_like).collect(),
            head: HeadParams {
                kind: self.head.kind,
                mean_pool: self.head.mean_pool,
                weights: Matrix::zeros(self.head.weights.rows(), self.head.weights.cols()),
            },
        }
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    /// Checks that the cells and head agree with the encoder config.
    pub fn validate(&self) -> Result<()> {
        let enc = &self.encoder;
        enc.validate()?;
        if self.cells.len() != enc.num_cells() {
            return Err(Error::dim("cells", enc.num_cells(), self.cells.len()));
        }
        for layer in 0..enc.layers {
            for dir in 0..enc.directions() {
                let c = &self.cells[enc.cell_index(layer, dir)];
                if c.kind() != enc.cell {
                    return Err(Error::KindMismatch {
                        params: c.kind().name(),
                        other: enc.cell.name(),
                    });
                }
                let name = format!("cell[{layer},{dir}]");
                if c.input_dim() != enc.layer_input_dim(layer) {
                    return Err(Error::dim(
                        format!("{name} input_dim"),
                        enc.layer_input_dim(layer),
                        c.input_dim(),
                    ));
                }
                if c.hidden_dim() != enc.hidden_dim {
                    return Err(Error::dim(
                        format!("{name} hidden_dim"),
                        enc.hidden_dim,
                        c.hidden_dim(),
                    ));
                }
            }
        }
        let width = enc.head_width(self.head.kind);
        if self.head.weights.cols() != width {
            return Err(Error::dim("head width", width, self.head.weights.cols()));
        }
        Ok(())
    }

    /// Runs the encoder and the head on a `horizon × input_dim` sequence.
    pub fn forward(&self, features: &Matrix) -> Result<ForwardTrace> {
        let mut trace = encode(&self.encoder, &self.cells, features)?;
        head_forward(&self.head, &self.encoder, &mut trace)?;
        Ok(trace)
    }

    pub fn logits(&self, features: &Matrix) -> Result<Vector> {
        Ok(self.forward(features)?.logits)
    }

    /// Predicted class (argmax of the logits, lowest index on ties) and the
    /// logits themselves.
    pub fn predict(&self, features: &Matrix) -> Result<(usize, Vector)> {
        let logits = self.logits(features)?;
        Ok((argmax(&logits), logits))
    }

    /// Analytic gradients of a scalar loss with respect to every parameter,
    /// given `∂loss/∂logits`.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &[f64]) -> Result<Model> {
        let mut grads = self.zeros_like();
        self.backward_into(trace, grad_logits, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Model::backward`] but adds into an existing gradient buffer.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        grad_logits: &[f64],
        grads: &mut Model,
    ) -> Result<()> {
        let enc = &self.encoder;
        if grad_logits.len() != self.classes() {
            return Err(Error::dim("grad_logits", self.classes(), grad_logits.len()));
        }
        if trace.layers.len() != enc.layers || trace.features.len() != self.head.weights.cols() {
            return Err(Error::InvalidArgument(
                "trace does not match model shape".into(),
            ));
        }
        if grads.cells.len() != self.cells.len()
            || grads.head.weights.shape() != self.head.weights.shape()
        {
            return Err(Error::InvalidArgument(
                "gradient buffer does not match model shape".into(),
            ));
        }
        let horizon = enc.horizon;
        let n = enc.hidden_dim;
        let width = enc.step_width();

        add_outer(&mut grads.head.weights, grad_logits, &trace.features);
        let mut dfeat = vec![0.0; trace.features.len()];
        gemv_t_acc(&self.head.weights, grad_logits, &mut dfeat);

        // Upstream gradient on each layer's per-step output.
        let mut d_out: Vec<Vec<Vector>> = (0..enc.layers)
            .map(|_| (0..horizon).map(|_| Vector::zeros(width)).collect())
            .collect();
        match self.head.kind {
            HeadKind::NeuroView => {
                let blocks = enc.blocks_per_step();
                for (layer, d_layer) in d_out.iter_mut().enumerate() {
                    let lt = &trace.layers[layer];
                    for (t, d_step) in d_layer.iter_mut().enumerate() {
                        for dir in 0..enc.directions() {
                            let off = (t * blocks + layer * enc.directions() + dir) * n;
                            let h = lt.dirs[dir][t].h();
                            for j in 0..n {
                                if h[j] > 0.0 {
                                    d_step[dir * n + j] += dfeat[off + j];
                                }
                            }
                        }
                    }
                }
            }
            HeadKind::LastState => {
                linalg::add_assign(&mut d_out[enc.layers - 1][horizon - 1], &dfeat);
            }
            HeadKind::AveragePool => {
                let scale = if self.head.mean_pool {
                    1.0 / horizon as f64
                } else {
                    1.0
                };
                for d in &mut d_out[enc.layers - 1] {
                    for (o, g) in d.iter_mut().zip(&dfeat) {
                        *o += g * scale;
                    }
                }
            }
        }

        for layer in (0..enc.layers).rev() {
            let lt = &trace.layers[layer];
            let in_dim = enc.layer_input_dim(layer);
            let mut d_in: Vec<Vector> = (0..horizon).map(|_| Vector::zeros(in_dim)).collect();
            for dir in 0..enc.directions() {
                let idx = enc.cell_index(layer, dir);
                let params = &self.cells[idx];
                let acc = &mut grads.cells[idx];
                let steps = &lt.dirs[dir];
                let zero = CellState::zeros(enc.cell, n);
                let mut carry_h = Vector::zeros(n);
                let mut carry_c = (enc.cell == CellKind::Lstm).then(|| Vector::zeros(n));
                let order: Box<dyn Iterator<Item = usize>> = if dir == 0 {
                    Box::new((0..horizon).rev())
                } else {
                    Box::new(0..horizon)
                };
                for t in order {
                    let prev_t = if dir == 0 {
                        t.checked_sub(1)
                    } else {
                        (t + 1 < horizon).then_some(t + 1)
                    };
                    let prev = prev_t.map_or_else(|| zero.clone(), |p| steps[p].state());
                    let mut gh = carry_h;
                    linalg::add_assign(&mut gh, &d_out[layer][t][dir * n..(dir + 1) * n]);
                    let step = backward_accumulate(
                        params,
                        &steps[t],
                        &prev,
                        &lt.inputs[t],
                        &gh,
                        carry_c.as_deref(),
                        acc,
                    );
                    carry_h = step.prev_h;
                    carry_c = step.prev_c;
                    linalg::add_assign(&mut d_in[t], &step.x);
                }
            }
            if layer > 0 {
                for (t, d) in d_in.into_iter().enumerate() {
                    linalg::add_assign(&mut d_out[layer - 1][t], &d);
                }
            }
        }
        Ok(())
    }
}

impl ParamSet for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for c in &self.cells {
            c.visit(f);
        }
        f("V", self.head.weights.as_slice());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for c in &mut self.cells {
            c.visit_mut(f);
        }
        f("V", self.head.weights.as_mut_slice());
    }
}

/// Lowest index of the maximum entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-layer record of one encoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// The sequence this layer consumed, one vector per timestep.
    pub inputs: Vec<Vector>,
    /// `dirs[d][t]` is the cell trace of direction `d` at timestep `t`
    /// (natural time order for both directions).
    pub dirs: Vec<Vec<GateTrace>>,
}

impl LayerTrace {
    /// `[h_f^(t); h_r^(t)]`.
    pub fn output(&self, t: usize) -> Vector {
        let parts: Vec<&[f64]> = self.dirs.iter().map(|d| &d[t].h()[..]).collect();
        linalg::concat(&parts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// The head input: `Q(x)` for NeuroView, `h^(T)` for last-state, the
    /// pooled state for average-pool. Empty until the head has run.
    pub features: Vector,
    pub logits: Vector,
    /// NeuroView only: `f^(t) = (V^(t))ᵀ q^(t)` for every timestep.
    pub contributions: Vec<Vector>,
}

/// Runs all layers and directions over a `horizon × input_dim` sequence.
pub fn encode(cfg: &EncoderConfig, params: &[CellParams], features: &Matrix) -> Result<ForwardTrace> {
    cfg.validate()?;
    if params.len() != cfg.num_cells() {
        return Err(Error::dim("cell parameter sets", cfg.num_cells(), params.len()));
    }
    if features.rows() != cfg.horizon {
        return Err(Error::dim("sequence length", cfg.horizon, features.rows()));
    }
    if features.cols() != cfg.input_dim {
        return Err(Error::dim("feature width", cfg.input_dim, features.cols()));
    }
    for (i, p) in params.iter().enumerate() {
        let layer = i / cfg.directions();
        if p.kind() != cfg.cell
            || p.hidden_dim() != cfg.hidden_dim
            || p.input_dim() != cfg.layer_input_dim(layer)
        {
            return Err(Error::InvalidArgument(format!(
                "cell parameter set {i} does not match the encoder config"
            )));
        }
    }
    let horizon = cfg.horizon;
    let mut inputs: Vec<Vector> = (0..horizon)
        .map(|t| Vector::from_slice(features.row(t)))
        .collect();
    let mut layers = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        let mut dirs = Vec::with_capacity(cfg.directions());
        for dir in 0..cfg.directions() {
            let p = &params[cfg.cell_index(layer, dir)];
            let mut state = CellState::zeros(cfg.cell, cfg.hidden_dim);
            let mut steps: Vec<Option<GateTrace>> = vec![None; horizon];
            let order: Box<dyn Iterator<Item = usize>> = if dir == 0 {
                Box::new(0..horizon)
            } else {
                Box::new((0..horizon).rev())
            };
            for t in order {
                let tr = forward_unchecked(p, &state, &inputs[t]);
                state = tr.state();
                steps[t] = Some(tr);
            }
            dirs.push(steps.into_iter().map(|s| s.expect("every step visited")).collect());
        }
        let lt = LayerTrace { inputs, dirs };
        inputs = (0..horizon).map(|t| lt.output(t)).collect();
        layers.push(lt);
    }
    Ok(ForwardTrace {
        layers,
        features: Vector::default(),
        logits: Vector::default(),
        contributions: Vec::new(),
    })
}

/// Applies the head to an encoder trace, filling `features`, `logits` and
/// (for NeuroView) the per-timestep `contributions`.
pub fn head_forward(head: &HeadParams, cfg: &EncoderConfig, trace: &mut ForwardTrace) -> Result<Vector> {
    if trace.layers.len() != cfg.layers {
        return Err(Error::dim("trace layers", cfg.layers, trace.layers.len()));
    }
    let width = cfg.head_width(head.kind);
    if head.weights.cols() != width {
        return Err(Error::dim("head width", width, head.weights.cols()));
    }
    let horizon = cfg.horizon;
    let top = &trace.layers[cfg.layers - 1];
    let mut contributions = Vec::new();
    let features = match head.kind {
        HeadKind::LastState => top.output(horizon - 1),
        HeadKind::AveragePool => {
            let mut acc = Vector::zeros(cfg.step_width());
            for t in 0..horizon {
                linalg::add_assign(&mut acc, &top.output(t));
            }
            if head.mean_pool {
                acc.iter_mut().for_each(|v| *v /= horizon as f64);
            }
            acc
        }
        HeadKind::NeuroView => {
            let mut q = Vec::with_capacity(width);
            for t in 0..horizon {
                for lt in &trace.layers {
                    for d in &lt.dirs {
                        q.extend(d[t].h().iter().map(|&v| linalg::relu(v)));
                    }
                }
            }
            let q = Vector(q);
            let block = width / horizon;
            for t in 0..horizon {
                let mut f = Vector::zeros(head.classes());
                for (c, fc) in f.iter_mut().enumerate() {
                    let row = &head.weights.row(c)[t * block..(t + 1) * block];
                    *fc = linalg::dot(row, &q[t * block..(t + 1) * block]);
                }
                contributions.push(f);
            }
            q
        }
    };
    let mut logits = Vector::zeros(head.classes());
    gemv_acc(&head.weights, &features, &mut logits);
    trace.features = features;
    trace.logits = logits.clone();
    trace.contributions = contributions;
    Ok(logits)
}
