mod common;

use proptest::prelude::*;
use wagf::attention::{fdab, sab, soft_attention, SaFAParams, SoftAttentionParams};
use wagf::layers::Bindings;
use wagf::nn::{lstm_forward, separable_conv2d, LstmWeights};
use wagf::optim::ParamSet;
use wagf::tape::Tape;
use wagf::{seeded_rng, Tensor};

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Scalar LSTM with gate blocks (input, forget, candidate, output).
fn lstm_oracle(seq: &Tensor<f64>, w: &LstmWeights<f64>) -> Tensor<f64> {
    let (steps, d) = (seq.shape()[0], seq.shape()[1]);
    let u = w.recurrent.shape()[0];
    let mut h = vec![0.0; u];
    let mut c = vec![0.0; u];
    let mut out = Vec::new();
    for t in 0..steps {
        let z = |col: usize, h: &[f64]| {
            let mut s = w.bias.data()[col];
            for k in 0..d {
                s += seq.at(&[t, k]) * w.input.at(&[k, col]);
            }
            for (k, hk) in h.iter().enumerate() {
                s += hk * w.recurrent.at(&[k, col]);
            }
            s
        };
        let prev = h.clone();
        for j in 0..u {
            let i = sigmoid(z(j, &prev));
            let f = sigmoid(z(u + j, &prev));
            let g = z(2 * u + j, &prev).tanh();
            let o = sigmoid(z(3 * u + j, &prev));
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        out.extend_from_slice(&h);
    }
    Tensor::new(&[steps, u], out).unwrap()
}

/// Zero-padded depthwise k×k convolution followed by a pointwise mix.
fn separable_oracle(x: &Tensor<f64>, dw: &Tensor<f64>, pw: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = dw.shape()[0];
    let cout = pw.shape()[1];
    let r = (k / 2) as isize;
    let mut depth = Tensor::zeros(&[h, w, cin]);
    for i in 0..h {
        for j in 0..w {
            for c in 0..cin {
                let mut s = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        let (y, z) = (i as isize + a as isize - r, j as isize + b as isize - r);
                        if (0..h as isize).contains(&y) && (0..w as isize).contains(&z) {
                            s += x.at(&[y as usize, z as usize, c]) * dw.at(&[a, b, c]);
                        }
                    }
                }
                depth.set(&[i, j, c], s);
            }
        }
    }
    Tensor::from_fn(&[h, w, cout], |p| {
        let (px, o) = (p / cout, p % cout);
        bias.data()[o]
            + (0..cin)
                .map(|c| depth.data()[px * cin + c] * pw.at(&[c, o]))
                .sum::<f64>()
    })
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let err = common::relative_error(a.data(), b.data());
    assert!(err < tol, "relative error {err:e}");
}

#[test]
fn lstm_matches_scalar_oracle() {
    for seed in 0..5 {
        let (steps, d, u) = (3 + seed as usize, 4, 3 + seed as usize % 2);
        let w = LstmWeights {
            input: common::random_tensor(&[d, 4 * u], seed, 1.0, 0.0),
            recurrent: common::random_tensor(&[u, 4 * u], seed + 10, 1.0, 0.0),
            bias: common::random_tensor(&[4 * u], seed + 20, 1.0, 0.0),
        };
        let seq = common::random_tensor(&[steps, d], seed + 30, 2.0, 0.0);
        assert_close(&lstm_forward(&seq, &w).unwrap(), &lstm_oracle(&seq, &w), 1e-12);
    }
}

#[test]
fn lstm_straight_line() {
    // Forget gate shut, input and output gates open, candidate = tanh(x):
    // h_t = sigmoid(big) · tanh(sigmoid(big) · tanh(x_t)) ≈ tanh(tanh(x_t)).
    let big = 40.0;
    let w = LstmWeights {
        input: Tensor::new(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap(),
        recurrent: Tensor::zeros(&[1, 4]),
        bias: Tensor::new(&[4], vec![big, -big, 0.0, big]).unwrap(),
    };
    let xs = [-2.0, -0.5, 0.0, 0.3, 1.7];
    let seq = Tensor::new(&[5, 1], xs.to_vec()).unwrap();
    let h = lstm_forward(&seq, &w).unwrap();
    for (t, &x) in xs.iter().enumerate() {
        let x: f64 = x;
        assert!((h.data()[t] - x.tanh().tanh()).abs() < 1e-12);
    }
}

#[test]
fn separable_conv_matches_loop_oracle() {
    for (seed, (h, w, cin, cout, k)) in [(4, 5, 3, 2, 3), (6, 6, 2, 4, 5), (3, 7, 1, 1, 1)]
        .into_iter()
        .enumerate()
    {
        let s = seed as u64;
        let x = common::random_tensor(&[h, w, cin], s, 1.0, 0.0);
        let dw = common::random_tensor(&[k, k, cin], s + 1, 1.0, 0.0);
        let pw = common::random_tensor(&[cin, cout], s + 2, 1.0, 0.0);
        let b = common::random_tensor(&[cout], s + 3, 1.0, 0.0);
        assert_close(
            &separable_conv2d(&x, &dw, &pw, &b).unwrap(),
            &separable_oracle(&x, &dw, &pw, &b),
            1e-12,
        );
    }
}

fn param(set: &ParamSet<f64>, name: &str) -> Tensor<f64> {
    set.get(name).unwrap_or_else(|| panic!("{name}")).value.clone()
}

#[test]
fn fdab_is_conv_stack_then_row_and_column_lstms() {
    let (h, w, c) = (4, 4, 3);
    let p = SaFAParams::new("safa", h, w, c, [5, 3], 3, false);
    let mut set = ParamSet::new();
    p.register(&mut set, &mut seeded_rng(1, &[]), false).unwrap();
    common::perturb(&mut set, 2);
    let x = common::random_tensor(&[h, w, c], 3, 1.0, 0.0);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = p.bind(&mut tape, &set, &mut Bindings::new()).unwrap();
    let out = fdab(&mut tape, xv, &vars).unwrap();

    let conv = |x: &Tensor<f64>, name: &str, relu: bool| {
        let y = separable_conv2d(
            x,
            &param(&set, &format!("safa.{name}.depthwise")),
            &param(&set, &format!("safa.{name}.pointwise")),
            &param(&set, &format!("safa.{name}.bias")),
        )
        .unwrap();
        if relu {
            y.map(|v| v.max(0.0))
        } else {
            y
        }
    };
    let reduced = conv(&conv(&conv(&x, "fdab0", true), "fdab1", true), "fdab2", false);
    let f_h = reduced.reshape(&[h, w]).unwrap();
    let lstm = |prefix: &str| LstmWeights {
        input: param(&set, &format!("safa.{prefix}.input")),
        recurrent: param(&set, &format!("safa.{prefix}.recurrent")),
        bias: param(&set, &format!("safa.{prefix}.bias")),
    };
    let rows = lstm_oracle(&f_h, &lstm("lstm_h"));
    let cols = lstm_oracle(&f_h.transpose2().unwrap(), &lstm("lstm_w"))
        .transpose2()
        .unwrap();
    let expected = rows.zip_map(&cols, |a, b| a + b).unwrap().reshape(&[h, w, 1]).unwrap();

    assert_close(tape.value(out.f_h), &f_h, 1e-12);
    assert_close(tape.value(out.f_lstm), &expected, 1e-12);
}

#[test]
fn soft_attention_matches_formula() {
    let (h, w, c) = (3, 4, 2);
    let p = SoftAttentionParams::new("sa", c, 3);
    let mut set = ParamSet::new();
    p.register(&mut set, &mut seeded_rng(5, &[])).unwrap();
    let x = common::random_tensor(&[h, w, c], 6, 1.0, 0.0);

    // Gamma starts at zero: identity.
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = p.bind(&mut tape, &set, &mut Bindings::new()).unwrap();
    let f_sa = soft_attention(&mut tape, xv, &vars).unwrap().f_sa;
    assert_eq!(tape.value(f_sa), &x);

    set.get_mut("sa.gamma").unwrap().value = Tensor::full(&[1], 0.7);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = p.bind(&mut tape, &set, &mut Bindings::new()).unwrap();
    let out = soft_attention(&mut tape, xv, &vars).unwrap();
    let logits = separable_conv2d(
        &x,
        &param(&set, "sa.conv.depthwise"),
        &param(&set, "sa.conv.pointwise"),
        &param(&set, "sa.conv.bias"),
    )
    .unwrap();
    let m = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.data().iter().map(|v| (v - m).exp()).sum();
    let expected = Tensor::from_fn(&[h, w, c], |i| {
        let a = (logits.data()[i / c] - m).exp() / z;
        x.data()[i] * (1.0 + 0.7 * a * (h * w) as f64)
    });
    assert_close(tape.value(out.f_sa), &expected, 1e-12);
    assert!((tape.value(out.distribution).sum() - 1.0).abs() < 1e-12);
}

fn sab_value(m: &Tensor<f64>) -> wagf::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let v = tape.constant(m.clone());
    let s = sab(&mut tape, v)?;
    Ok(tape.value(s).clone())
}

proptest! {
    #[test]
    fn sab_output_is_symmetric(n in 1usize..9, seed in any::<u64>()) {
        let m = common::random_tensor(&[n, n, 1], seed, 3.0, 0.0);
        let s = sab_value(&m).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(s.at(&[i, j, 0]).to_bits(), s.at(&[j, i, 0]).to_bits());
                prop_assert_eq!(s.at(&[i, j, 0]), m.at(&[i, j, 0]) * m.at(&[j, i, 0]));
            }
        }
    }

    #[test]
    fn sab_squares_symmetric_input(n in 1usize..9, seed in any::<u64>()) {
        let r = common::random_tensor(&[n, n, 1], seed, 3.0, 0.0);
        let m = Tensor::from_fn(&[n, n, 1], |p| r.at(&[(p / n).min(p % n), (p / n).max(p % n), 0]));
        prop_assert_eq!(sab_value(&m).unwrap(), m.map(|v| v * v));
    }

    #[test]
    fn sab_rejects_non_square(h in 1usize..6, w in 1usize..6) {
        prop_assume!(h != w);
        prop_assert!(sab_value(&Tensor::zeros(&[h, w, 1])).is_err());
    }
}
