//! Central finite-difference gradient checking.

#![allow(dead_code)]

use gridvid::model::{ModelConfig, TrainItem, Transformer};
use gridvid::sat::MaskPlan;
use gridvid::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Random seeds per gradient check.
pub const GRADCHECK_SEEDS: u64 = 20;

/// Gradients whose norm is below this (for example the key bias, which
/// softmax shift invariance makes exactly zero) are compared absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, GRADIENT_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(GRADIENT_FLOOR)
}

/// Worst relative error over all inputs between the tape gradient of the
/// scalar built by `build` and central differences.
pub fn gradcheck(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out)[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).expect("scalar output");
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        if !inputs[i].requires_grad() {
            continue;
        }
        let analytic = grads.get(*v).expect("gradient for leaf").to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        let mut xs = inputs.to_vec();
        for j in 0..analytic.len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Reduces `x` to a scalar through a fixed random weighting so every output
/// element receives a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let dims = tape.dims(x).to_vec();
    let n: usize = dims.iter().product();
    let w = pseudo_random(n, seed);
    let w = tape.constant(dims, w).expect("matching dims");
    let p = tape.mul(x, w).expect("same shape");
    tape.sum(p)
}

/// Deterministic values in (−1, 1) without pulling a generator into tests.
pub fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

pub fn param(dims: Vec<usize>, seed: u64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, pseudo_random(n, seed)).unwrap().with_requires_grad(true)
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One differentiable operation under test: input shapes and the scalar
/// built from it.
pub struct OpCase {
    pub name: &'static str,
    pub dims: Vec<Vec<usize>>,
    pub build: Build,
}

fn case(name: &'static str, dims: &[&[usize]], build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name,
        dims: dims.iter().map(|d| d.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// Every differentiable tape operation.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            weighted_sum(t, y, 1)
        }),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            weighted_sum(t, y, 2)
        }),
        case("scale", &[&[2, 5]], |t, v| {
            let y = t.scale(v[0], -1.7);
            weighted_sum(t, y, 3)
        }),
        case("scale_rows", &[&[4, 3]], |t, v| {
            let y = t.scale_rows(v[0], vec![1.0, 0.0, 1.0, 0.5]).unwrap();
            weighted_sum(t, y, 4)
        }),
        case("gelu", &[&[3, 7]], |t, v| {
            let x = t.scale(v[0], 3.0);
            let y = t.gelu(x);
            weighted_sum(t, y, 5)
        }),
        case("sum", &[&[2, 3]], |t, v| {
            let y = t.mul(v[0], v[0]).unwrap();
            t.sum(y)
        }),
        case("matmul", &[&[3, 4], &[4, 5]], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, y, 6)
        }),
        case("linear", &[&[3, 4], &[4, 5], &[5]], |t, v| {
            let y = t.linear(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y, 30)
        }),
        case("add_row_bias", &[&[3, 4], &[4]], |t, v| {
            let y = t.add_row_bias(v[0], v[1]).unwrap();
            weighted_sum(t, y, 7)
        }),
        case("transpose", &[&[3, 4]], |t, v| {
            let y = t.transpose(v[0]).unwrap();
            weighted_sum(t, y, 8)
        }),
        case("reshape", &[&[3, 4]], |t, v| {
            let y = t.reshape(v[0], vec![2, 6]).unwrap();
            weighted_sum(t, y, 9)
        }),
        case("slice_rows", &[&[5, 3]], |t, v| {
            let y = t.slice_rows(v[0], 1, 3).unwrap();
            weighted_sum(t, y, 10)
        }),
        case("gather_rows", &[&[4, 3]], |t, v| {
            let y = t.gather_rows(v[0], vec![3, 0, 3, 1]).unwrap();
            weighted_sum(t, y, 11)
        }),
        case("concat_rows", &[&[2, 3], &[1, 3]], |t, v| {
            let y = t.concat_rows(&[v[0], v[1], v[0]]).unwrap();
            weighted_sum(t, y, 12)
        }),
        case("embedding", &[&[5, 3]], |t, v| {
            let y = t.embedding(v[0], &[4, 0, 4, 2]).unwrap();
            weighted_sum(t, y, 13)
        }),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y, 14)
        }),
        case("softmax_rows", &[&[3, 5]], |t, v| {
            let y = t.softmax_rows(v[0]).unwrap();
            weighted_sum(t, y, 15)
        }),
        case("cross_entropy", &[&[4, 6]], |t, v| {
            let x = t.scale(v[0], 2.0);
            t.cross_entropy(x, &[0, 5, 2, 2]).unwrap()
        }),
        case("causal_attention", &[&[10, 4], &[10, 4], &[10, 4]], |t, v| {
            let y = t.causal_attention(v[0], v[1], v[2], 2, 2).unwrap();
            weighted_sum(t, y, 16)
        }),
        // Long enough to span several row blocks of the attention kernel.
        case("causal_attention_long", &[&[70, 4], &[70, 4], &[70, 4]], |t, v| {
            let y = t.causal_attention(v[0], v[1], v[2], 1, 2).unwrap();
            weighted_sum(t, y, 17)
        }),
    ]
}

/// Worst relative error of `case` at random inputs drawn from `seed`.
pub fn op_error(case: &OpCase, seed: u64) -> f64 {
    let inputs: Vec<_> = case
        .dims
        .iter()
        .enumerate()
        .map(|(i, d)| param(d.clone(), seed * 31 + i as u64 + 1))
        .collect();
    gradcheck(&inputs, &*case.build)
}

fn tiny_model(seed: u64) -> Transformer {
    let cfg = ModelConfig {
        vocab: 8,
        num_classes: 3,
        seq_len: 8,
        dim: 8,
        layers: 2,
        heads: 2,
        mlp_ratio: 2,
        dropout: 0.0,
    };
    let mut m = Transformer::init(cfg, seed).unwrap();
    // Larger-than-default weights so every parameter carries a clear signal.
    for (i, p) in m.params_mut().iter_mut().enumerate() {
        if p.rank() == 2 {
            let noise = pseudo_random(p.numel(), seed * 1000 + i as u64);
            for (v, n) in p.data_mut().iter_mut().zip(noise) {
                *v = 0.5 * n;
            }
        }
    }
    m
}

/// Worst per-parameter relative error of the full masked training loss of a
/// two-block model, with the name of the offending parameter.
pub fn model_loss_error(seed: u64) -> (f64, String) {
    let mut model = tiny_model(seed);
    let toks: Vec<Vec<usize>> = (0..2)
        .map(|b| (0..8).map(|j| (seed as usize * 3 + b * 5 + j * 7) % 8).collect())
        .collect();
    let plans: Vec<MaskPlan> = toks
        .iter()
        .enumerate()
        .map(|(b, t)| {
            let emb = model.embed_tokens(t).unwrap();
            MaskPlan::build(&emb, 8, 4, 0.6, seed * 10 + b as u64).unwrap()
        })
        .collect();
    let items = || -> Vec<TrainItem> {
        toks.iter()
            .zip(&plans)
            .enumerate()
            .map(|(b, (t, p))| TrainItem { class_id: b, tokens: t, plan: Some(p) })
            .collect()
    };
    let loss_of = |m: &Transformer| -> f64 {
        let f = m.forward(&items()).unwrap();
        f.tape.value(f.loss)[0]
    };
    model.loss_and_grads(&items()).unwrap();
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad().unwrap().to_vec()).collect();
    let mut probe = model.clone();
    let mut worst = (0.0, String::new());
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.params()[i].data()[j];
            probe.params_mut()[i].data_mut()[j] = orig + FD_STEP;
            let up = loss_of(&probe);
            probe.params_mut()[i].data_mut()[j] = orig - FD_STEP;
            let down = loss_of(&probe);
            probe.params_mut()[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let err = relative_error(grad, &numeric);
        if err > worst.0 {
            worst = (err, model.names()[i].clone());
        }
    }
    worst
}
