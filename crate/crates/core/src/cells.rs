//! Simple RNN, GRU and LSTM cells: one forward step, its exact backward step,
//! and parameter initialization.
//!
//! Gate layout per kind (index into the per-gate tensor lists):
//!
//! | kind      | gates            | nonlinearity            |
//! |-----------|------------------|-------------------------|
//! | SimpleRnn | `h`              | sigmoid                 |
//! | Gru       | `r`, `z`, `n`    | sigmoid, sigmoid, tanh  |
//! | Lstm      | `i`, `f`, `g`, `o` | sigmoid ×2, tanh, sigmoid |
//!
//! The simple RNN has a single bias `b` (stored as the input bias); the gated
//! cells keep separate input and hidden biases.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, add_outer, gemv_acc, gemv_t_acc, sigmoid, Matrix, Vector};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[serde(rename = "rnn")]
    SimpleRnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::SimpleRnn, CellKind::Gru, CellKind::Lstm];

    pub fn gates(self) -> usize {
        match self {
            CellKind::SimpleRnn => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::SimpleRnn => "rnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }

    fn tensor_names(self) -> &'static [&'static str] {
        match self {
            CellKind::SimpleRnn => &["U", "W", "b"],
            CellKind::Gru => &[
                "W_ir", "W_iz", "W_in", "W_hr", "W_hz", "W_hn", "b_ir", "b_iz", "b_in", "b_hr",
                "b_hz", "b_hn",
            ],
            CellKind::Lstm => &[
                "W_ii", "W_if", "W_ig", "W_io", "W_hi", "W_hf", "W_hg", "W_ho", "b_ii", "b_if",
                "b_ig", "b_io", "b_hi", "b_hf", "b_hg", "b_ho",
            ],
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" | "simple" | "simplernn" | "elman" => Ok(CellKind::SimpleRnn),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::InvalidArgument(format!(
                "unknown cell kind `{other}` (expected rnn, gru or lstm)"
            ))),
        }
    }
}

const GRU_R: usize = 0;
const GRU_Z: usize = 1;
const GRU_N: usize = 2;
const LSTM_I: usize = 0;
const LSTM_F: usize = 1;
const LSTM_G: usize = 2;
const LSTM_O: usize = 3;

/// Learnable recurrence parameters of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams {
    kind: CellKind,
    input_dim: usize,
    hidden_dim: usize,
    /// One `n × m` matrix per gate.
    pub input_weights: Vec<Matrix>,
    /// One `n × n` matrix per gate.
    pub hidden_weights: Vec<Matrix>,
    pub input_bias: Vec<Vector>,
    /// Empty for the simple RNN.
    pub hidden_bias: Vec<Vector>,
}

impl CellParams {
    pub fn zeros(kind: CellKind, input_dim: usize, hidden_dim: usize) -> Self {
        let g = kind.gates();
        let hidden_biases = if kind == CellKind::SimpleRnn { 0 } else { g };
        Self {
            kind,
            input_dim,
            hidden_dim,
            input_weights: vec![Matrix::zeros(hidden_dim, input_dim); g],
            hidden_weights: vec![Matrix::zeros(hidden_dim, hidden_dim); g],
            input_bias: vec![Vector::zeros(hidden_dim); g],
            hidden_bias: vec![Vector::zeros(hidden_dim); hidden_biases],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kind, self.input_dim, self.hidden_dim)
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Named tensors in visit order, with their `(rows, cols)` shapes.
    pub fn named_tensors(&self) -> Vec<(&'static str, (usize, usize), &[f64])> {
        let names = self.kind.tensor_names();
        let mut out = Vec::with_capacity(names.len());
        let mut i = 0;
        for m in self.input_weights.iter().chain(&self.hidden_weights) {
            out.push((names[i], m.shape(), m.as_slice()));
            i += 1;
        }
        for b in self.input_bias.iter().chain(&self.hidden_bias) {
            out.push((names[i], (b.len(), 1), &b[..]));
            i += 1;
        }
        out
    }

    /// Rebuilds parameters from named tensors as produced by
    /// [`CellParams::named_tensors`]. Names and shapes are validated.
    pub fn from_named_tensors(
        kind: CellKind,
        input_dim: usize,
        hidden_dim: usize,
        tensors: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        let mut p = Self::zeros(kind, input_dim, hidden_dim);
        let names = kind.tensor_names();
        if tensors.len() != names.len() {
            return Err(Error::dim(
                format!("{kind} tensor count"),
                names.len(),
                tensors.len(),
            ));
        }
        let mut slot = 0;
        let mut err = None;
        p.visit_mut(&mut |name, dst| {
            if err.is_some() {
                return;
            }
            let (ref got, ref data) = tensors[slot];
            if got != name {
                err = Some(Error::InvalidArgument(format!(
                    "expected tensor `{name}` at position {slot}, found `{got}`"
                )));
            } else if data.len() != dst.len() {
                err = Some(Error::dim(name, dst.len(), data.len()));
            } else {
                dst.copy_from_slice(data);
            }
            slot += 1;
        });
        match err {
            Some(e) => Err(e),
            None => Ok(p),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::dim("x_t", self.input_dim, x.len()));
        }
        Ok(())
    }

    fn check_state(&self, s: &CellState) -> Result<()> {
        if s.h.len() != self.hidden_dim {
            return Err(Error::dim("h", self.hidden_dim, s.h.len()));
        }
        match (&s.c, self.kind) {
            (Some(c), CellKind::Lstm) if c.len() != self.hidden_dim => {
                Err(Error::dim("c", self.hidden_dim, c.len()))
            }
            (Some(_), CellKind::Lstm) => Ok(()),
            (None, CellKind::Lstm) => Err(Error::KindMismatch {
                params: "lstm",
                other: "state without cell memory",
            }),
            (Some(_), k) => Err(Error::KindMismatch {
                params: k.name(),
                other: "lstm state",
            }),
            (None, _) => Ok(()),
        }
    }

    /// Gate pre-activation `W_ik x + b_ik + W_hk h + b_hk`.
    fn preactivation(&self, gate: usize, x: &[f64], h: &[f64]) -> Vector {
        let mut a = self.input_bias[gate].clone();
        if let Some(bh) = self.hidden_bias.get(gate) {
            linalg::add_assign(&mut a, bh);
        }
        gemv_acc(&self.input_weights[gate], x, &mut a);
        gemv_acc(&self.hidden_weights[gate], h, &mut a);
        a
    }
}

impl ParamSet for CellParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (name, _, t) in self.named_tensors() {
            f(name, t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let names = self.kind.tensor_names();
        let mut i = 0;
        for m in self.input_weights.iter_mut().chain(self.hidden_weights.iter_mut()) {
            f(names[i], m.as_mut_slice());
            i += 1;
        }
        for b in self.input_bias.iter_mut().chain(self.hidden_bias.iter_mut()) {
            f(names[i], b);
            i += 1;
        }
    }
}

/// Recurrent state carried between steps. `c` is present only for LSTMs.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Vector,
    pub c: Option<Vector>,
}

impl CellState {
    pub fn zeros(kind: CellKind, hidden_dim: usize) -> Self {
        Self {
            h: Vector::zeros(hidden_dim),
            c: (kind == CellKind::Lstm).then(|| Vector::zeros(hidden_dim)),
        }
    }
}

/// Activations cached by [`cell_forward`] for the matching backward step.
#[derive(Clone, Debug, PartialEq)]
pub enum GateTrace {
    SimpleRnn {
        pre: Vector,
        h: Vector,
    },
    Gru {
        r: Vector,
        z: Vector,
        n: Vector,
        /// `W_hn h_prev + b_hn`, the term gated by `r`.
        hn_lin: Vector,
        h: Vector,
    },
    Lstm {
        i: Vector,
        f: Vector,
        g: Vector,
        o: Vector,
        c: Vector,
        tanh_c: Vector,
        h: Vector,
    },
}

impl GateTrace {
    pub fn kind(&self) -> CellKind {
        match self {
            GateTrace::SimpleRnn { .. } => CellKind::SimpleRnn,
            GateTrace::Gru { .. } => CellKind::Gru,
            GateTrace::Lstm { .. } => CellKind::Lstm,
        }
    }

    pub fn h(&self) -> &Vector {
        match self {
            GateTrace::SimpleRnn { h, .. } | GateTrace::Gru { h, .. } | GateTrace::Lstm { h, .. } => h,
        }
    }

    pub fn state(&self) -> CellState {
        match self {
            GateTrace::Lstm { h, c, .. } => CellState {
                h: h.clone(),
                c: Some(c.clone()),
            },
            other => CellState {
                h: other.h().clone(),
                c: None,
            },
        }
    }
}

/// One recurrence step `h_t = F(h_{t-1}, x_t)`.
pub fn cell_forward(p: &CellParams, s: &CellState, x: &[f64]) -> Result<(CellState, GateTrace)> {
    p.check_input(x)?;
    p.check_state(s)?;
    let trace = forward_unchecked(p, s, x);
    Ok((trace.state(), trace))
}

pub(crate) fn forward_unchecked(p: &CellParams, s: &CellState, x: &[f64]) -> GateTrace {
    let hp = &s.h;
    match p.kind {
        CellKind::SimpleRnn => {
            let pre = p.preactivation(0, x, hp);
            let h = linalg::elementwise(&pre, sigmoid);
            GateTrace::SimpleRnn { pre, h }
        }
        CellKind::Gru => {
            let r = linalg::elementwise(&p.preactivation(GRU_R, x, hp), sigmoid);
            let z = linalg::elementwise(&p.preactivation(GRU_Z, x, hp), sigmoid);
            let mut hn_lin = p.hidden_bias[GRU_N].clone();
            gemv_acc(&p.hidden_weights[GRU_N], hp, &mut hn_lin);
            let mut an = p.input_bias[GRU_N].clone();
            gemv_acc(&p.input_weights[GRU_N], x, &mut an);
            let n: Vector = an
                .iter()
                .zip(r.iter().zip(hn_lin.iter()))
                .map(|(a, (ri, hl))| (a + ri * hl).tanh())
                .collect::<Vec<_>>()
                .into();
            let h: Vector = (0..p.hidden_dim)
                .map(|j| (1.0 - z[j]) * n[j] + z[j] * hp[j])
                .collect::<Vec<_>>()
                .into();
            GateTrace::Gru { r, z, n, hn_lin, h }
        }
        CellKind::Lstm => {
            let cp = s.c.as_ref().expect("validated lstm state");
            let i = linalg::elementwise(&p.preactivation(LSTM_I, x, hp), sigmoid);
            let f = linalg::elementwise(&p.preactivation(LSTM_F, x, hp), sigmoid);
            let g = linalg::elementwise(&p.preactivation(LSTM_G, x, hp), f64::tanh);
            let o = linalg::elementwise(&p.preactivation(LSTM_O, x, hp), sigmoid);
            let c: Vector = (0..p.hidden_dim)
                .map(|j| f[j] * cp[j] + i[j] * g[j])
                .collect::<Vec<_>>()
                .into();
            let tanh_c = linalg::elementwise(&c, f64::tanh);
            let h: Vector = o
                .iter()
                .zip(tanh_c.iter())
                .map(|(a, b)| a * b)
                .collect::<Vec<_>>()
                .into();
            GateTrace::Lstm {
                i,
                f,
                g,
                o,
                c,
                tanh_c,
                h,
            }
        }
    }
}

/// Gradients produced by one backward step.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGradients {
    pub params: CellParams,
    pub prev_h: Vector,
    pub prev_c: Option<Vector>,
    pub x: Vector,
}

/// Exact backward step of [`cell_forward`]: given `∂L/∂h_t` (and `∂L/∂c_t`
/// for LSTMs), returns `∂L/∂θ`, `∂L/∂h_{t-1}`, `∂L/∂c_{t-1}` and `∂L/∂x_t`.
pub fn cell_backward(
    p: &CellParams,
    trace: &GateTrace,
    prev: &CellState,
    x: &[f64],
    grad_h: &[f64],
    grad_c: Option<&[f64]>,
) -> Result<CellGradients> {
    if trace.kind() != p.kind {
        return Err(Error::KindMismatch {
            params: p.kind.name(),
            other: trace.kind().name(),
        });
    }
    p.check_input(x)?;
    p.check_state(prev)?;
    if grad_h.len() != p.hidden_dim {
        return Err(Error::dim("grad_h", p.hidden_dim, grad_h.len()));
    }
    if let Some(gc) = grad_c {
        if p.kind != CellKind::Lstm {
            return Err(Error::KindMismatch {
                params: p.kind.name(),
                other: "cell-memory gradient",
            });
        }
        if gc.len() != p.hidden_dim {
            return Err(Error::dim("grad_c", p.hidden_dim, gc.len()));
        }
    }
    let mut params = p.zeros_like();
    let step = backward_accumulate(p, trace, prev, x, grad_h, grad_c, &mut params);
    Ok(CellGradients {
        params,
        prev_h: step.prev_h,
        prev_c: step.prev_c,
        x: step.x,
    })
}

pub(crate) struct StepGrads {
    pub prev_h: Vector,
    pub prev_c: Option<Vector>,
    pub x: Vector,
}

/// Backward step that adds parameter gradients into `acc`.
pub(crate) fn backward_accumulate(
    p: &CellParams,
    trace: &GateTrace,
    prev: &CellState,
    x: &[f64],
    grad_h: &[f64],
    grad_c: Option<&[f64]>,
    acc: &mut CellParams,
) -> StepGrads {
    let n = p.hidden_dim;
    let hp = &prev.h;
    let mut dprev_h = Vector::zeros(n);
    let mut dx = Vector::zeros(p.input_dim);

    // Accumulates the gradient of one gate pre-activation into every block
    // that feeds it.
    let mut push_gate = |gate: usize, da: &[f64], acc: &mut CellParams, dprev_h: &mut Vector| {
        add_outer(&mut acc.input_weights[gate], da, x);
        add_outer(&mut acc.hidden_weights[gate], da, hp);
        linalg::add_assign(&mut acc.input_bias[gate], da);
        if let Some(bh) = acc.hidden_bias.get_mut(gate) {
            linalg::add_assign(bh, da);
        }
        gemv_t_acc(&p.hidden_weights[gate], da, dprev_h);
        gemv_t_acc(&p.input_weights[gate], da, &mut dx);
    };

    match trace {
        GateTrace::SimpleRnn { h, .. } => {
            let da: Vec<f64> = (0..n).map(|j| grad_h[j] * h[j] * (1.0 - h[j])).collect();
            push_gate(0, &da, acc, &mut dprev_h);
            StepGrads {
                prev_h: dprev_h,
                prev_c: None,
                x: dx,
            }
        }
        GateTrace::Gru {
            r,
            z,
            n: cand,
            hn_lin,
            ..
        } => {
            let mut dan = vec![0.0; n];
            let mut daz = vec![0.0; n];
            let mut dar = vec![0.0; n];
            let mut dhn_lin = vec![0.0; n];
            for j in 0..n {
                let dn = grad_h[j] * (1.0 - z[j]);
                let dz = grad_h[j] * (hp[j] - cand[j]);
                dprev_h[j] += grad_h[j] * z[j];
                dan[j] = dn * (1.0 - cand[j] * cand[j]);
                let dr = dan[j] * hn_lin[j];
                dhn_lin[j] = dan[j] * r[j];
                daz[j] = dz * z[j] * (1.0 - z[j]);
                dar[j] = dr * r[j] * (1.0 - r[j]);
            }
            push_gate(GRU_R, &dar, acc, &mut dprev_h);
            push_gate(GRU_Z, &daz, acc, &mut dprev_h);
            // The candidate gate splits: its input half sees `dan`, its
            // hidden half sees `dan ⊙ r`.
            add_outer(&mut acc.input_weights[GRU_N], &dan, x);
            linalg::add_assign(&mut acc.input_bias[GRU_N], &dan);
            gemv_t_acc(&p.input_weights[GRU_N], &dan, &mut dx);
            add_outer(&mut acc.hidden_weights[GRU_N], &dhn_lin, hp);
            linalg::add_assign(&mut acc.hidden_bias[GRU_N], &dhn_lin);
            gemv_t_acc(&p.hidden_weights[GRU_N], &dhn_lin, &mut dprev_h);
            StepGrads {
                prev_h: dprev_h,
                prev_c: None,
                x: dx,
            }
        }
        GateTrace::Lstm {
            i,
            f,
            g,
            o,
            tanh_c,
            ..
        } => {
            let cp = prev.c.as_ref().expect("lstm state carries c");
            let mut dai = vec![0.0; n];
            let mut daf = vec![0.0; n];
            let mut dag = vec![0.0; n];
            let mut dao = vec![0.0; n];
            let mut dprev_c = Vector::zeros(n);
            for j in 0..n {
                let gc_in = grad_c.map_or(0.0, |gc| gc[j]);
                let dc = gc_in + grad_h[j] * o[j] * (1.0 - tanh_c[j] * tanh_c[j]);
                let do_ = grad_h[j] * tanh_c[j];
                dprev_c[j] = dc * f[j];
                dai[j] = dc * g[j] * i[j] * (1.0 - i[j]);
                daf[j] = dc * cp[j] * f[j] * (1.0 - f[j]);
                dag[j] = dc * i[j] * (1.0 - g[j] * g[j]);
                dao[j] = do_ * o[j] * (1.0 - o[j]);
            }
            push_gate(LSTM_I, &dai, acc, &mut dprev_h);
            push_gate(LSTM_F, &daf, acc, &mut dprev_h);
            push_gate(LSTM_G, &dag, acc, &mut dprev_h);
            push_gate(LSTM_O, &dao, acc, &mut dprev_h);
            StepGrads {
                prev_h: dprev_h,
                prev_c: Some(dprev_c),
                x: dx,
            }
        }
    }
}

/// How hidden-to-hidden matrices are initialized. Input-to-hidden matrices
/// and all biases always use the uniform rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    /// `U(-1/√n, 1/√n)`.
    #[default]
    Uniform,
    /// Orthonormal factor of the QR decomposition of a standard-normal draw.
    Orthogonal,
    /// The exact identity.
    Identity,
    /// `N(0, 1/n)`.
    Normal,
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Uniform => "uniform",
            InitKind::Orthogonal => "orthogonal",
            InitKind::Identity => "identity",
            InitKind::Normal => "normal",
        })
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(InitKind::Uniform),
            "orthogonal" => Ok(InitKind::Orthogonal),
            "identity" => Ok(InitKind::Identity),
            "normal" => Ok(InitKind::Normal),
            other => Err(Error::InvalidArgument(format!(
                "unknown init scheme `{other}` (expected uniform, orthogonal, identity or normal)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitScheme {
    pub kind: InitKind,
    pub seed: u64,
}

pub fn init_params(kind: CellKind, m: usize, n: usize, scheme: InitScheme) -> Result<CellParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(scheme.seed);
    init_params_with_rng(kind, m, n, scheme.kind, &mut rng)
}

/// Draws every block from `rng` in visit order. Used by the network so that
/// all cells of a model come from one seeded stream.
pub fn init_params_with_rng<R: Rng + ?Sized>(
    kind: CellKind,
    m: usize,
    n: usize,
    scheme: InitKind,
    rng: &mut R,
) -> Result<CellParams> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "cell dimensions must be positive (input {m}, hidden {n})"
        )));
    }
    let bound = 1.0 / (n as f64).sqrt();
    let mut p = CellParams::zeros(kind, m, n);
    for w in &mut p.input_weights {
        fill_uniform(w.as_mut_slice(), bound, rng);
    }
    for w in &mut p.hidden_weights {
        *w = hidden_matrix(scheme, n, n, rng)?;
    }
    for b in p.input_bias.iter_mut().chain(p.hidden_bias.iter_mut()) {
        fill_uniform(b, bound, rng);
    }
    Ok(p)
}

/// One recurrent matrix under `scheme`. Identity and orthogonal require a
/// square shape.
pub fn hidden_matrix<R: Rng + ?Sized>(
    scheme: InitKind,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<Matrix> {
    let square = || {
        if rows != cols {
            Err(Error::InvalidArgument(format!(
                "{scheme} initialization needs a square matrix, got {rows}×{cols}"
            )))
        } else {
            Ok(())
        }
    };
    match scheme {
        InitKind::Uniform => {
            let mut w = Matrix::zeros(rows, cols);
            fill_uniform(w.as_mut_slice(), 1.0 / (rows as f64).sqrt(), rng);
            Ok(w)
        }
        InitKind::Identity => {
            square()?;
            Ok(Matrix::identity(rows))
        }
        InitKind::Normal => {
            let std = 1.0 / (rows as f64).sqrt();
            Ok(Matrix::from_fn(rows, cols, |_, _| {
                std * rng.sample::<f64, _>(StandardNormal)
            }))
        }
        InitKind::Orthogonal => {
            square()?;
            let a = Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
            linalg::orthonormal_factor(&a)
        }
    }
}

pub(crate) fn fill_uniform<R: Rng + ?Sized>(dst: &mut [f64], bound: f64, rng: &mut R) {
    for v in dst {
        *v = rng.gen_range(-bound..bound);
    }
}
