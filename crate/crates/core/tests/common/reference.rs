//! A direct, unoptimized re-statement of the model equations, generic over
//! the scalar type so it can run in double-double precision.

use std::ops::{Add, Div, Mul, Neg, Sub};

use neuroview::cells::{CellKind, CellParams};
use neuroview::network::{EncoderConfig, HeadKind, Model};
use neuroview::params::ParamSet;

use super::dd::DD;

pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;

    fn sigmoid(self) -> Self {
        Self::of(1.0) / (Self::of(1.0) + (-self).exp())
    }

    fn relu(self) -> Self {
        if self > Self::of(0.0) {
            self
        } else {
            Self::of(0.0)
        }
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

impl Real for DD {
    fn of(v: f64) -> Self {
        DD::new(v)
    }
    fn to_f64(self) -> f64 {
        DD::to_f64(self)
    }
    fn exp(self) -> Self {
        DD::exp(self)
    }
    fn ln(self) -> Self {
        DD::ln(self)
    }
    fn tanh(self) -> Self {
        DD::tanh(self)
    }
}

/// Row-major matrix as nested vectors.
pub type Mat<R> = Vec<Vec<R>>;

fn affine<R: Real>(w: &Mat<R>, x: &[R]) -> Vec<R> {
    w.iter()
        .map(|row| row.iter().zip(x).fold(R::of(0.0), |s, (&a, &b)| s + a * b))
        .collect()
}

fn add<R: Real>(a: &[R], b: &[R]) -> Vec<R> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

#[derive(Clone, Debug)]
pub struct RefCell<R> {
    pub kind: CellKind,
    pub wx: Vec<Mat<R>>,
    pub wh: Vec<Mat<R>>,
    pub bx: Vec<Vec<R>>,
    pub bh: Vec<Vec<R>>,
}

#[derive(Clone, Debug)]
pub struct RefState<R> {
    pub h: Vec<R>,
    pub c: Vec<R>,
}

impl<R: Real> RefState<R> {
    pub fn zeros(n: usize) -> Self {
        Self {
            h: vec![R::of(0.0); n],
            c: vec![R::of(0.0); n],
        }
    }

    pub fn from_f64(h: &[f64], c: Option<&[f64]>) -> Self {
        Self {
            h: h.iter().map(|&v| R::of(v)).collect(),
            c: c.map_or_else(|| vec![R::of(0.0); h.len()], |c| c.iter().map(|&v| R::of(v)).collect()),
        }
    }
}

impl<R: Real> RefCell<R> {
    fn pre(&self, gate: usize, x: &[R], h: &[R]) -> Vec<R> {
        let mut a = add(&affine(&self.wx[gate], x), &affine(&self.wh[gate], h));
        a = add(&a, &self.bx[gate]);
        if !self.bh.is_empty() {
            a = add(&a, &self.bh[gate]);
        }
        a
    }

    pub fn step(&self, s: &RefState<R>, x: &[R]) -> RefState<R> {
        match self.kind {
            CellKind::SimpleRnn => RefState {
                h: self.pre(0, x, &s.h).into_iter().map(R::sigmoid).collect(),
                c: s.c.clone(),
            },
            CellKind::Gru => {
                let r: Vec<R> = self.pre(0, x, &s.h).into_iter().map(R::sigmoid).collect();
                let z: Vec<R> = self.pre(1, x, &s.h).into_iter().map(R::sigmoid).collect();
                let hx = add(&affine(&self.wx[2], x), &self.bx[2]);
                let hh = add(&affine(&self.wh[2], &s.h), &self.bh[2]);
                let h = (0..s.h.len())
                    .map(|j| {
                        let n = (hx[j] + r[j] * hh[j]).tanh();
                        (R::of(1.0) - z[j]) * n + z[j] * s.h[j]
                    })
                    .collect();
                RefState { h, c: s.c.clone() }
            }
            CellKind::Lstm => {
                let i: Vec<R> = self.pre(0, x, &s.h).into_iter().map(R::sigmoid).collect();
                let f: Vec<R> = self.pre(1, x, &s.h).into_iter().map(R::sigmoid).collect();
                let g: Vec<R> = self.pre(2, x, &s.h).into_iter().map(R::tanh).collect();
                let o: Vec<R> = self.pre(3, x, &s.h).into_iter().map(R::sigmoid).collect();
                let c: Vec<R> = (0..s.h.len()).map(|j| f[j] * s.c[j] + i[j] * g[j]).collect();
                let h = (0..s.h.len()).map(|j| o[j] * c[j].tanh()).collect();
                RefState { h, c }
            }
        }
    }
}

/// Consumes a flat parameter list in visit order.
struct Reader<'a, R> {
    flat: &'a [R],
    pos: usize,
}

impl<R: Real> Reader<'_, R> {
    fn take(&mut self, rows: usize, cols: usize) -> Mat<R> {
        let out = (0..rows)
            .map(|i| self.flat[self.pos + i * cols..self.pos + (i + 1) * cols].to_vec())
            .collect();
        self.pos += rows * cols;
        out
    }

    fn take_vec(&mut self, len: usize) -> Vec<R> {
        let out = self.flat[self.pos..self.pos + len].to_vec();
        self.pos += len;
        out
    }

    fn cell(&mut self, template: &CellParams) -> RefCell<R> {
        let kind = template.kind();
        let (m, n) = (template.input_dim(), template.hidden_dim());
        let g = kind.gates();
        let wx = (0..g).map(|_| self.take(n, m)).collect();
        let wh = (0..g).map(|_| self.take(n, n)).collect();
        let bx = (0..g).map(|_| self.take_vec(n)).collect();
        let bh = if kind == CellKind::SimpleRnn {
            Vec::new()
        } else {
            (0..g).map(|_| self.take_vec(n)).collect()
        };
        RefCell { kind, wx, wh, bx, bh }
    }
}

pub fn flat_of<R: Real, P: ParamSet>(p: &P) -> Vec<R> {
    p.flatten().into_iter().map(R::of).collect()
}

pub fn ref_cell<R: Real>(template: &CellParams, flat: &[R]) -> RefCell<R> {
    let mut r = Reader { flat, pos: 0 };
    let c = r.cell(template);
    assert_eq!(r.pos, flat.len());
    c
}

#[derive(Clone, Debug)]
pub struct RefModel<R> {
    pub cfg: EncoderConfig,
    pub head: HeadKind,
    pub mean_pool: bool,
    pub cells: Vec<RefCell<R>>,
    pub v: Mat<R>,
}

pub fn ref_model<R: Real>(template: &Model, flat: &[R]) -> RefModel<R> {
    let mut r = Reader { flat, pos: 0 };
    let cells = template.cells.iter().map(|c| r.cell(c)).collect();
    let v = r.take(template.head.weights.rows(), template.head.weights.cols());
    assert_eq!(r.pos, flat.len());
    RefModel {
        cfg: template.encoder,
        head: template.head.kind,
        mean_pool: template.head.mean_pool,
        cells,
        v,
    }
}

impl<R: Real> RefModel<R> {
    /// Hidden states `hs[layer][dir][t]`.
    pub fn hidden(&self, x: &[Vec<f64>]) -> Vec<Vec<Vec<Vec<R>>>> {
        let cfg = &self.cfg;
        let t_len = cfg.horizon;
        let dirs = if cfg.bidirectional { 2 } else { 1 };
        let mut input: Vec<Vec<R>> = x.iter().map(|r| r.iter().map(|&v| R::of(v)).collect()).collect();
        let mut out = Vec::new();
        for layer in 0..cfg.layers {
            let mut per_dir = Vec::new();
            for d in 0..dirs {
                let cell = &self.cells[layer * dirs + d];
                let mut s = RefState::zeros(cfg.hidden_dim);
                let mut hs = vec![Vec::new(); t_len];
                let order: Vec<usize> = if d == 0 { (0..t_len).collect() } else { (0..t_len).rev().collect() };
                for t in order {
                    s = cell.step(&s, &input[t]);
                    hs[t] = s.h.clone();
                }
                per_dir.push(hs);
            }
            input = (0..t_len)
                .map(|t| per_dir.iter().flat_map(|hs: &Vec<Vec<R>>| hs[t].clone()).collect())
                .collect();
            out.push(per_dir);
        }
        out
    }

    pub fn logits(&self, x: &[Vec<f64>]) -> Vec<R> {
        let hs = self.hidden(x);
        let cfg = &self.cfg;
        let t_len = cfg.horizon;
        let top = hs.last().unwrap();
        let cat = |t: usize| -> Vec<R> { top.iter().flat_map(|d| d[t].clone()).collect() };
        let feat: Vec<R> = match self.head {
            HeadKind::LastState => cat(t_len - 1),
            HeadKind::AveragePool => {
                let mut acc = cat(0);
                for t in 1..t_len {
                    acc = add(&acc, &cat(t));
                }
                if self.mean_pool {
                    acc.iter().map(|&v| v / R::of(t_len as f64)).collect()
                } else {
                    acc
                }
            }
            HeadKind::NeuroView => {
                let mut q = Vec::new();
                for t in 0..t_len {
                    for layer in &hs {
                        for d in layer {
                            q.extend(d[t].iter().map(|&v| v.relu()));
                        }
                    }
                }
                q
            }
        };
        affine(&self.v, &feat)
    }

    /// Softmax cross-entropy of the logits against `label`.
    pub fn loss(&self, x: &[Vec<f64>], label: usize) -> R {
        let z = self.logits(x);
        let mx = z.iter().copied().fold(z[0], |a, b| if b > a { b } else { a });
        let s = z.iter().fold(R::of(0.0), |s, &v| s + (v - mx).exp());
        s.ln() + mx - z[label]
    }
}

/// Central difference of `f` around the `idx`-th entry of `flat`, taken in
/// double-double precision.
pub fn central_difference(flat: &[DD], idx: usize, step: f64, f: impl Fn(&[DD]) -> DD) -> f64 {
    let mut p = flat.to_vec();
    p[idx] = flat[idx] + DD::new(step);
    let up = f(&p);
    p[idx] = flat[idx] - DD::new(step);
    let down = f(&p);
    ((up - down) / DD::new(2.0 * step)).to_f64()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
