//! Whole-network gradient check against the double-double reference.

use neuroview::cells::{CellKind, InitKind, InitScheme};
use neuroview::linalg::Matrix;
use neuroview::network::{EncoderConfig, HeadKind, Model};
use neuroview::params::ParamSet;
use neuroview::train::softmax_xent;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dd::DD;
use super::reference::{central_difference, flat_of, ref_model, rel_err};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-6;
pub const FLOOR: f64 = 1e-8;

pub struct Case {
    pub model: Model,
    pub x: Matrix,
    pub label: usize,
}

pub fn random_case(
    cell: CellKind,
    head: HeadKind,
    layers: usize,
    bidirectional: bool,
    dims: (usize, usize, usize, usize),
    seed: u64,
) -> Case {
    let (m, n, horizon, classes) = dims;
    let enc = EncoderConfig {
        cell,
        input_dim: m,
        hidden_dim: n,
        layers,
        bidirectional,
        horizon,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let init = InitScheme {
        kind: InitKind::Uniform,
        seed,
    };
    let mut model = Model::new(enc, head, classes, init, rng.gen_bool(0.5)).unwrap();
    // Spread the parameters beyond the narrow default range.
    model.scale(2.0);
    let x = Matrix::from_fn(horizon, m, |_, _| rng.gen_range(-1.5..1.5));
    Case {
        model,
        x,
        label: rng.gen_range(0..classes),
    }
}

/// Distance of the closest hidden activation to the ReLU kink.
pub fn kink_margin(case: &Case) -> f64 {
    if case.model.head.kind != HeadKind::NeuroView {
        return f64::INFINITY;
    }
    let trace = case.model.forward(&case.x).unwrap();
    trace
        .layers
        .iter()
        .flat_map(|l| l.dirs.iter().flatten())
        .flat_map(|g| g.h().iter().map(|v| v.abs()).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min)
}

/// Number of parameters checked, or the first mismatch.
pub fn check_network(case: &Case) -> Result<usize, String> {
    let model = &case.model;
    let trace = model.forward(&case.x).unwrap();
    let (_, g) = softmax_xent(&trace.logits, case.label).unwrap();
    let analytic = model.backward(&trace, &g).unwrap().flatten();
    let rows: Vec<Vec<f64>> = (0..case.x.rows()).map(|t| case.x.row(t).to_vec()).collect();

    let reference = ref_model::<f64>(model, &flat_of(model)).logits(&rows);
    if neuroview::linalg::max_abs_diff(&reference, &trace.logits) > 1e-12 {
        return Err(format!("reference logits {reference:?} vs {:?}", trace.logits));
    }

    let theta: Vec<DD> = flat_of(model);
    for (i, &an) in analytic.iter().enumerate() {
        let fd = central_difference(&theta, i, STEP, |t| ref_model(model, t).loss(&rows, case.label));
        let e = rel_err(an, fd, FLOOR);
        if !(e < TOL) {
            return Err(format!(
                "{} {} L={} bi={} param {i}: analytic {an:e} fd {fd:e} rel {e:e}",
                model.encoder.cell, model.head.kind, model.encoder.layers, model.encoder.bidirectional
            ));
        }
    }
    Ok(analytic.len())
}
