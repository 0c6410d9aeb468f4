//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use wagf::model::{Model, ModelConfig};
use wagf::tape::{Tape, Var};
use wagf::{nn, seeded_rng, Result, Tensor};

pub const STEP: f64 = 1e-4;

/// Uniform values in `±scale`, kept at least `margin` away from zero so
/// kinks (ReLU) are not crossed by a finite-difference step.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64, margin: f64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed, &[0x6c]);
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(margin..=scale);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `‖a - b‖ / max(‖a‖, ‖b‖, 1e-8)`. The floor keeps gradients that are
/// zero in exact arithmetic (a bias feeding a softmax) from comparing
/// round-off against round-off.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Builds `f` on a fresh tape with `inputs` as leaves and reduces the output
/// to `Σ out ⊙ probe` with a fixed random probe.
fn probe_loss<F>(f: &F, inputs: &[Tensor<f64>], seed: u64) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let probe = random_tensor(tape.value(out).shape(), seed ^ 0x9e37, 1.0, 0.0);
    let p = tape.constant(probe);
    let prod = tape.mul(out, p)?;
    let loss = tape.sum(prod)?;
    Ok((tape, vars, loss))
}

/// Largest norm-wise relative error between the tape gradient and central
/// differences, over all inputs.
pub fn op_gradcheck<F>(f: F, inputs: &[Tensor<f64>], seed: u64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, vars, loss) = probe_loss(&f, inputs, seed).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[j] += delta;
                let (t, _, l) = probe_loss(&f, &moved, seed).unwrap();
                t.value(l).item()
            };
            *n = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: [16, 16, 3],
        backbone: vec![4],
        feature_channels: 4,
        num_classes: 3,
        safa_filters: [6, 3],
        seed,
        ..ModelConfig::default()
    }
}

/// Per-parameter relative error of [`Model::sample_gradients`] against
/// central differences of the cross-entropy.
pub fn model_gradcheck(
    model: &Model<f64>,
    fusion: &wagf::fusion::FusionState<f64>,
    image: &Tensor<f64>,
    label: usize,
) -> Vec<(String, f64)> {
    let analytic = model.sample_gradients(image, label, fusion, 1.0).unwrap();
    let loss_at = |m: &Model<f64>| {
        let logits = m.logits(image, fusion).unwrap();
        let k = logits.len();
        nn::cross_entropy_loss(&logits.reshape(&[1, k]).unwrap(), &[label]).unwrap()
    };
    let mut out = Vec::new();
    let mut m = model.clone();
    let names: Vec<String> = model.params().names().map(String::from).collect();
    for (pos, name) in names.iter().enumerate() {
        let len = model.params().get(name).unwrap().value.len();
        let mut numeric = vec![0.0; len];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut eval = |delta: f64| {
                m.params_mut().get_mut(name).unwrap().value.data_mut()[j] += delta;
                let l = loss_at(&m);
                m.params_mut().get_mut(name).unwrap().value.data_mut()[j] -= delta;
                l
            };
            *n = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        }
        out.push((name.clone(), relative_error(analytic.params[pos].data(), &numeric)));
    }
    out
}

/// One finite-difference comparison.
#[derive(Debug)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

pub const OP_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;

fn op(name: &str, error: f64) -> Check {
    Check {
        name: name.to_string(),
        error,
        tolerance: OP_TOL,
    }
}

pub fn elementwise_checks() -> Vec<Check> {
    let a = random_tensor(&[3, 4, 2], 1, 1.0, 0.05);
    let b = random_tensor(&[3, 4, 2], 2, 1.0, 0.05);
    let s = random_tensor(&[1], 3, 2.0, 0.1);
    let g = random_tensor(&[3, 4, 1], 4, 1.0, 0.0);
    let ab = [a.clone(), b];
    let one = [a.clone()];
    vec![
        op("add", op_gradcheck(|t, v| t.add(v[0], v[1]), &ab, 1)),
        op("sub", op_gradcheck(|t, v| t.sub(v[0], v[1]), &ab, 2)),
        op("mul", op_gradcheck(|t, v| t.mul(v[0], v[1]), &ab, 3)),
        op("relu", op_gradcheck(|t, v| t.relu(v[0]), &one, 4)),
        op("sigmoid", op_gradcheck(|t, v| t.sigmoid(v[0]), &one, 5)),
        op("tanh", op_gradcheck(|t, v| t.tanh(v[0]), &one, 6)),
        op("softmax", op_gradcheck(|t, v| t.softmax(v[0]), &one, 7)),
        op("scale", op_gradcheck(|t, v| t.scale(v[0], -1.7), &one, 8)),
        op(
            "scale_by",
            op_gradcheck(|t, v| t.scale_by(v[0], v[1]), &[a.clone(), s], 9),
        ),
        op(
            "mul_channel",
            op_gradcheck(|t, v| t.mul_channel(v[0], v[1]), &[a.clone(), g], 10),
        ),
        op("transpose2", op_gradcheck(|t, v| t.transpose2(v[0]), &one, 11)),
        op("reshape", op_gradcheck(|t, v| t.reshape(v[0], &[4, 6]), &one, 12)),
        op("sum", op_gradcheck(|t, v| t.sum(v[0]), &one, 13)),
        op(
            "global_average_pool",
            op_gradcheck(|t, v| t.global_average_pool(v[0]), &one, 14),
        ),
    ]
}

pub fn dense_checks() -> Vec<Check> {
    let x = random_tensor(&[3, 5], 1, 1.0, 0.0);
    let w = random_tensor(&[5, 4], 2, 1.0, 0.0);
    let b = random_tensor(&[4], 3, 1.0, 0.0);
    let y = random_tensor(&[3, 4], 4, 1.0, 0.0);
    let logits = random_tensor(&[3, 5], 5, 2.0, 0.0);
    vec![
        op("matmul", op_gradcheck(|t, v| t.matmul(v[0], v[1]), &[x, w], 1)),
        op("add_bias", op_gradcheck(|t, v| t.add_bias(v[0], v[1]), &[y, b], 2)),
        op(
            "cross_entropy",
            op_gradcheck(|t, v| t.cross_entropy(v[0], &[0, 4, 2]), &[logits], 3),
        ),
    ]
}

pub fn conv_checks() -> Vec<Check> {
    let x = random_tensor(&[6, 6, 2], 1, 1.0, 0.0);
    let w = random_tensor(&[3, 3, 2, 3], 2, 0.5, 0.0);
    let b = random_tensor(&[3], 3, 0.5, 0.0);
    let dw = random_tensor(&[3, 3, 2], 4, 0.5, 0.0);
    let pw = random_tensor(&[2, 3], 5, 0.5, 0.0);
    let mut out: Vec<Check> = [1, 2]
        .into_iter()
        .map(|stride| {
            op(
                &format!("conv2d stride {stride}"),
                op_gradcheck(
                    |t, v| t.conv2d(v[0], v[1], v[2], stride),
                    &[x.clone(), w.clone(), b.clone()],
                    stride as u64,
                ),
            )
        })
        .collect();
    out.push(op(
        "separable_conv2d",
        op_gradcheck(|t, v| t.separable_conv2d(v[0], v[1], v[2], v[3]), &[x, dw, pw, b], 3),
    ));
    let xn = random_tensor(&[4, 3, 3], 6, 2.0, 0.0);
    let gamma = random_tensor(&[3], 7, 1.5, 0.2);
    let beta = random_tensor(&[3], 8, 1.0, 0.0);
    out.push(op(
        "layer_norm",
        op_gradcheck(|t, v| t.layer_norm(v[0], v[1], v[2]), &[xn, gamma, beta], 4),
    ));
    out
}

pub fn lstm_checks() -> Vec<Check> {
    let seq = random_tensor(&[5, 3], 1, 1.0, 0.0);
    let input = random_tensor(&[3, 8], 2, 0.6, 0.0);
    let recurrent = random_tensor(&[2, 8], 3, 0.6, 0.0);
    let bias = random_tensor(&[8], 4, 0.3, 0.0);
    vec![op(
        "lstm",
        op_gradcheck(|t, v| t.lstm(v[0], v[1], v[2], v[3]), &[seq, input, recurrent, bias], 1),
    )]
}

pub fn wavelet_checks() -> Vec<Check> {
    use wagf::wavelet::{boundary_features_on, Band};
    let x = random_tensor(&[4, 6, 2], 1, 1.0, 0.0);
    let p = random_tensor(&[4, 2, 3, 2], 2, 1.0, 0.0);
    vec![
        op(
            "haar_dwt2",
            op_gradcheck(|t, v| t.haar_dwt2(v[0]), std::slice::from_ref(&x), 1),
        ),
        op(
            "haar_idwt2",
            op_gradcheck(|t, v| t.haar_idwt2(v[0]), std::slice::from_ref(&p), 2),
        ),
        op("zero_band", op_gradcheck(|t, v| t.zero_band(v[0], Band::Hl), &[p], 3)),
        op(
            "boundary_features",
            op_gradcheck(|t, v| boundary_features_on(t, v[0]), &[x], 4),
        ),
    ]
}

/// Randomly initialized parameters moved off their initial values, so
/// zero-initialized tensors and unit norm scales are exercised too.
pub fn perturb(set: &mut wagf::optim::ParamSet<f64>, seed: u64) {
    for (i, p) in set.iter_mut().enumerate() {
        let noise = random_tensor(p.value.shape(), seed + i as u64, 0.2, 0.0);
        p.value.add_assign(&noise).unwrap();
    }
}

pub fn attention_checks() -> Vec<Check> {
    use wagf::attention::{fdab, sab, safa_map, soft_attention, SaFAParams, SoftAttentionParams};
    use wagf::layers::Bindings;
    use wagf::optim::ParamSet;

    let x = random_tensor(&[4, 4, 3], 1, 1.0, 0.0);
    let mut sa_set = ParamSet::new();
    let sa = SoftAttentionParams::new("sa", 3, 3);
    sa.register(&mut sa_set, &mut seeded_rng(1, &[])).unwrap();
    perturb(&mut sa_set, 10);

    let mut safa_set = ParamSet::new();
    let safa = SaFAParams::new("safa", 4, 4, 3, [5, 3], 3, true);
    safa.register(&mut safa_set, &mut seeded_rng(2, &[]), false).unwrap();
    perturb(&mut safa_set, 50);

    let map = random_tensor(&[4, 4, 1], 2, 1.0, 0.0);
    let g_w = Tensor::from_fn(&[4, 4, 3], |i| (i as f64 * 0.37) % 1.0);
    let g_sa = Tensor::from_fn(&[4, 4, 3], |i| (i as f64 * 0.61) % 1.0);
    let f_sa = random_tensor(&[4, 4, 3], 3, 1.0, 0.0);
    vec![
        op(
            "soft_attention",
            op_gradcheck(
                |t, v| {
                    let vars = sa.bind(t, &sa_set, &mut Bindings::new())?;
                    Ok(soft_attention(t, v[0], &vars)?.f_sa)
                },
                std::slice::from_ref(&x),
                1,
            ),
        ),
        op(
            "fdab",
            op_gradcheck(
                |t, v| {
                    let vars = safa.bind(t, &safa_set, &mut Bindings::new())?;
                    Ok(fdab(t, v[0], &vars)?.f_lstm)
                },
                std::slice::from_ref(&x),
                2,
            ),
        ),
        op("sab", op_gradcheck(|t, v| sab(t, v[0]), std::slice::from_ref(&map), 3)),
        op(
            "safa_map",
            op_gradcheck(
                |t, v| {
                    let vars = safa.bind(t, &safa_set, &mut Bindings::new())?;
                    safa_map(t, v[0], &vars)
                },
                &[map],
                4,
            ),
        ),
        op(
            "fuse",
            op_gradcheck(|t, v| wagf::fusion::fuse_on(t, v[0], v[1], &g_w, &g_sa), &[x, f_sa], 5),
        ),
    ]
}

/// Every parameter of every ablation variant and gate target, on the tiny
/// config with perturbed parameters and a non-trivial fusion state.
pub fn model_checks() -> Vec<Check> {
    use wagf::model::{GateTarget, Variant};
    let image = Tensor::from_fn(&[16, 16, 3], |i| ((i * 37 + 11) % 97) as f64 / 97.0);
    let mut out = Vec::new();
    for variant in Variant::ALL {
        for gate in [GateTarget::Fuse, GateTarget::Enc] {
            let mut cfg = tiny_config(5).with_variant(variant);
            cfg.gate_target = gate;
            let mut m = Model::<f64>::new(cfg).unwrap();
            perturb(m.params_mut(), 100);
            let mut fusion = m.fresh_fusion_state(0.9).unwrap();
            fusion.g_w_ema = Tensor::from_fn(fusion.shape(), |i| (i as f64 * 0.13) % 1.0);
            fusion.g_sa_ema = Tensor::from_fn(fusion.shape(), |i| (i as f64 * 0.29) % 1.0);
            let worst = model_gradcheck(&m, &fusion, &image, 1)
                .into_iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            out.push(Check {
                name: format!("model {} gate {:?} (worst: {})", variant.name(), gate, worst.0),
                error: worst.1,
                tolerance: MODEL_TOL,
            });
        }
    }
    out
}

pub fn assert_checks(checks: Vec<Check>) {
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}: {:e} (limit {:e})", c.name, c.error, c.tolerance))
        .collect();
    assert!(failed.is_empty(), "{}", failed.join("\n"));
}
