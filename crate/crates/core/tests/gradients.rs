mod common;

use common::dd::DD;
use common::gradcheck::{check_network, kink_margin, random_case, FLOOR, STEP, TOL};
use common::reference::{central_difference, flat_of, ref_cell, rel_err, RefState};
use neuroview::cells::{cell_backward, cell_forward, CellKind, CellParams, CellState};
use neuroview::network::HeadKind;
use neuroview::params::ParamSet;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_cell(kind: CellKind, m: usize, n: usize, rng: &mut ChaCha8Rng) -> CellParams {
    let mut p = CellParams::zeros(kind, m, n);
    p.visit_mut(&mut |_, t| t.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0)));
    p
}

#[test]
fn double_double_sanity() {
    let e = DD::new(1.0).exp();
    assert_eq!(e.hi, std::f64::consts::E);
    let err = (e.lo - 1.445_646_891_729_250_2e-16).abs();
    assert!(err < 1e-28, "{err:e}");
    for x in [-3.7, -1e-3, 0.25, 2.0, 30.0] {
        let back = DD::new(x).exp().ln();
        assert!((back - DD::new(x)).to_f64().abs() < 1e-28 * x.abs().max(1.0), "{x}");
        let t = DD::new(x).tanh().to_f64();
        assert!((t - x.tanh()).abs() <= 2e-16 * t.abs().max(1e-300), "{x}");
    }
    let third = DD::new(1.0) / DD::new(3.0);
    assert!((third * DD::new(3.0) - DD::new(1.0)).to_f64().abs() < 1e-31);
}

#[test]
fn reference_cell_agrees_with_library() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in CellKind::ALL {
        let p = random_cell(kind, 3, 4, &mut rng);
        let h = uniform(4, &mut rng);
        let c = uniform(4, &mut rng);
        let x = uniform(3, &mut rng);
        let s = CellState {
            h: h.clone().into(),
            c: (kind == CellKind::Lstm).then(|| c.clone().into()),
        };
        let (out, _) = cell_forward(&p, &s, &x).unwrap();
        let r = ref_cell::<f64>(&p, &flat_of(&p));
        let rs = r.step(&RefState::from_f64(&h, Some(&c)), &x);
        assert!(neuroview::linalg::max_abs_diff(&out.h, &rs.h) < 1e-14, "{kind}");
        if let Some(oc) = &out.c {
            assert!(neuroview::linalg::max_abs_diff(oc, &rs.c) < 1e-14);
        }
    }
}

/// Objective `a·h' + b·c'` (the cell term for LSTMs only) after one step.
fn check_cell(kind: CellKind, m: usize, n: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_cell(kind, m, n, &mut rng);
    let h = uniform(n, &mut rng);
    let c = uniform(n, &mut rng);
    let x = uniform(m, &mut rng);
    let a = uniform(n, &mut rng);
    let b = uniform(n, &mut rng);
    let lstm = kind == CellKind::Lstm;
    let s = CellState {
        h: h.clone().into(),
        c: lstm.then(|| c.clone().into()),
    };
    let (_, trace) = cell_forward(&p, &s, &x).unwrap();
    let g = cell_backward(&p, &trace, &s, &x, &a, lstm.then_some(&b[..])).unwrap();

    let theta: Vec<DD> = flat_of(&p);
    let hd: Vec<DD> = h.iter().map(|&v| DD::new(v)).collect();
    let cd: Vec<DD> = c.iter().map(|&v| DD::new(v)).collect();
    let xd: Vec<DD> = x.iter().map(|&v| DD::new(v)).collect();
    let eval = |params: &[DD], h: &[DD], c: &[DD], x: &[DD]| -> DD {
        let out = ref_cell(&p, params).step(&RefState { h: h.to_vec(), c: c.to_vec() }, x);
        (0..n).fold(DD::new(0.0), |l, j| {
            let l = l + DD::new(a[j]) * out.h[j];
            if lstm {
                l + DD::new(b[j]) * out.c[j]
            } else {
                l
            }
        })
    };
    let report = |what: String, an: f64, fd: f64| {
        let e = rel_err(an, fd, FLOOR);
        if e < TOL {
            Ok(())
        } else {
            Err(format!("{kind} m={m} n={n} seed={seed} {what}: analytic {an:e} fd {fd:e} rel {e:e}"))
        }
    };
    let analytic = g.params.flatten();
    for i in 0..theta.len() {
        let fd = central_difference(&theta, i, STEP, |t| eval(t, &hd, &cd, &xd));
        report(format!("param {i}"), analytic[i], fd)?;
    }
    for j in 0..n {
        let fd = central_difference(&hd, j, STEP, |v| eval(&theta, v, &cd, &xd));
        report(format!("prev_h[{j}]"), g.prev_h[j], fd)?;
        if let Some(dc) = &g.prev_c {
            let fd = central_difference(&cd, j, STEP, |v| eval(&theta, &hd, v, &xd));
            report(format!("prev_c[{j}]"), dc[j], fd)?;
        }
    }
    for j in 0..m {
        let fd = central_difference(&xd, j, STEP, |v| eval(&theta, &hd, &cd, v));
        report(format!("x[{j}]"), g.x[j], fd)?;
    }
    Ok(())
}

#[test]
fn cell_gradients_fixed_cases() {
    for (kind, m, n) in [(CellKind::SimpleRnn, 2, 2), (CellKind::Lstm, 2, 3), (CellKind::Gru, 3, 4)] {
        check_cell(kind, m, n, 1).unwrap();
    }
}

#[test]
fn network_gradients_every_cell_and_head() {
    for cell in CellKind::ALL {
        for head in HeadKind::ALL {
            for (layers, bi) in [(1, false), (1, true), (2, false), (2, true)] {
                let mut seed = 100;
                let case = loop {
                    let c = random_case(cell, head, layers, bi, (2, 3, 4, 3), seed);
                    if kink_margin(&c) > 1e-3 {
                        break c;
                    }
                    seed += 1;
                };
                check_network(&case).unwrap();
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cell_gradients_match_finite_differences(kind in 0usize..3, m in 1usize..=4, n in 1usize..=8, seed in any::<u64>()) {
        check_cell(CellKind::ALL[kind], m, n, seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn network_gradients_match_finite_differences(
        cell in 0usize..3,
        head in 0usize..3,
        layers in 1usize..=2,
        bi in any::<bool>(),
        m in 1usize..=3,
        n in 1usize..=6,
        horizon in 1usize..=5,
        classes in 2usize..=3,
        seed in any::<u64>(),
    ) {
        let case = random_case(CellKind::ALL[cell], HeadKind::ALL[head], layers, bi, (m, n, horizon, classes), seed);
        prop_assume!(kink_margin(&case) > 1e-3);
        check_network(&case).map_err(TestCaseError::fail)?;
    }
}
