//! Finite-difference checks shared by the gradient tests and the acceptance suite.
#![allow(dead_code)]

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reorder_core::autodiff::{AttentionLayout, Axis};
use reorder_core::gradcheck::{max_relative_error, numerical_gradient};
use reorder_core::positional::predict_positions;
use reorder_core::train::{total_loss, EncodedPair, TrainingBatch};
use reorder_core::*;

pub const EPS: f64 = 1e-6;

/// `(op name, max relative error)` per case.
pub type Report = Vec<(String, f64)>;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Error of `d/dx sum(w ⊙ f(x))` for an `r×c` input.
pub fn unary_error(name: &str, r: usize, c: usize, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let x0 = rand_vec(&mut rng, r * c);
    let eval = |x: &[f64], want_grad: bool| {
        let tape = Tape::new(0);
        let x = tape.constant(r, c, x.to_vec()).unwrap();
        let y = f(x);
        let w = tape.constant(y.rows(), y.cols(), (0..y.rows() * y.cols()).map(|i| ((i * 7 % 5) as f64) - 1.7).collect()).unwrap();
        let loss = y.mul(w).unwrap().sum();
        let g = want_grad.then(|| tape.backward(loss).unwrap().wrt(x).unwrap().to_vec());
        (loss.scalar(), g)
    };
    let analytic = eval(&x0, true).1.unwrap();
    let numeric = numerical_gradient(&x0, EPS, |x| eval(x, false).0);
    max_relative_error(&analytic, &numeric, 1e-3)
}

fn case(report: &mut Report, name: &str, r: usize, c: usize, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) {
    report.push((name.to_string(), unary_error(name, r, c, f)));
}

pub fn elementwise_ops() -> Report {
    let mut out = Report::new();
    case(&mut out, "sigmoid", 3, 4, |x| x.sigmoid());
    case(&mut out, "tanh", 3, 4, |x| x.tanh());
    case(&mut out, "exp", 3, 4, |x| x.exp());
    case(&mut out, "scale", 3, 4, |x| x.scale(-2.5).add_scalar(1.0));
    case(&mut out, "self-mul", 3, 4, |x| x.mul(x).unwrap());
    case(&mut out, "self-sub", 3, 4, |x| x.sub(x.tanh()).unwrap());
    case(&mut out, "relu-shifted", 3, 4, |x| x.add_scalar(0.05).relu());
    out
}

pub fn matrix_ops() -> Report {
    let mut out = Report::new();
    case(&mut out, "matmul", 3, 4, |x| {
        let w = x.tape().constant(4, 2, vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4, 0.2, 0.9]).unwrap();
        x.matmul(w).unwrap()
    });
    case(&mut out, "matmul-chain", 3, 4, |x| {
        let t = x.tape();
        let a = t.constant(4, 4, (0..16).map(|i| i as f64 / 16.0 - 0.4).collect()).unwrap();
        let b = t.constant(4, 3, (0..12).map(|i| 0.3 - i as f64 / 20.0).collect()).unwrap();
        x.matmul(a).unwrap().tanh().matmul(b).unwrap()
    });
    case(&mut out, "add_row", 3, 4, |x| {
        let row = x.gather_rows(&[1]).unwrap();
        x.add_row(row).unwrap()
    });
    case(&mut out, "mul_col", 3, 4, |x| {
        let col = x.matmul(x.tape().constant(4, 1, vec![0.2, -0.1, 0.4, 0.3]).unwrap()).unwrap();
        x.mul_col(col).unwrap()
    });
    case(&mut out, "gather", 3, 4, |x| x.gather_rows(&[2, 0, 2, 1]).unwrap().tanh());
    out
}

pub fn normalisation_ops() -> Report {
    let mut out = Report::new();
    case(&mut out, "softmax-cols", 3, 4, |x| x.softmax(Axis::Cols));
    case(&mut out, "softmax-rows", 3, 4, |x| x.softmax(Axis::Rows));
    case(&mut out, "layer_norm", 3, 4, |x| {
        let t = x.tape();
        let g = t.constant(1, 4, vec![1.0, 0.5, -0.3, 2.0]).unwrap();
        let b = t.constant(1, 4, vec![0.1, 0.0, 0.2, -0.1]).unwrap();
        x.layer_norm(g, b, 1e-6).unwrap()
    });
    out
}

pub fn loss_ops() -> Report {
    let mut out = Report::new();
    case(&mut out, "cross_entropy", 3, 5, |x| x.smoothed_cross_entropy(&[1, 4, 0], 0.1).unwrap());
    case(&mut out, "cosine_rows", 3, 4, |x| {
        x.cosine_row_sum(&[0.2, 0.3, -0.5, 1.0, 0.0, 1.0, 0.0, 1.0, -1.0, 0.5, 0.25, 0.0]).unwrap()
    });
    out
}

pub fn attention_ops() -> Report {
    let mut out = Report::new();
    for causal in [false, true] {
        let layout = Rc::new(AttentionLayout { heads: 2, queries: vec![0..3, 3..5], keys: vec![0..3, 3..5], causal });
        case(&mut out, if causal { "attn-causal" } else { "attn" }, 5, 4, |x| {
            let t = x.tape();
            let k = x.matmul(t.constant(4, 4, (0..16).map(|i| ((i * 3 % 7) as f64 - 3.0) / 5.0).collect()).unwrap()).unwrap();
            let v = x.tanh();
            x.attention(k, v, &layout, 0.0).unwrap()
        });
    }
    let cross = Rc::new(AttentionLayout { heads: 1, queries: vec![0..2, 2..5], keys: vec![0..4, 4..5], causal: false });
    case(&mut out, "attn-cross", 5, 4, |x| x.attention(x.scale(0.5), x.sigmoid(), &cross, 0.0).unwrap());
    out
}

pub fn window_ops() -> Report {
    let table = PositionalTable::sinusoidal(8, 4).unwrap();
    let win = Rc::new(table.window(0.5, 0.25, WindowGradient::Exact));
    // positions well inside their windows so the support does not change under ±EPS
    let b0 = vec![1.2, 2.7, 0.1, 3.4];
    let lens = [5, 5, 4, 4];
    let eval = |b: &[f64], want: bool| {
        let tape = Tape::new(0);
        let x = tape.constant(4, 1, b.to_vec()).unwrap();
        let y = x.gaussian_select(&win, &lens).unwrap();
        let loss = y.mul(tape.constant(4, 4, (0..16).map(|i| i as f64 / 10.0 - 0.6).collect()).unwrap()).unwrap().sum();
        (loss.scalar(), want.then(|| tape.backward(loss).unwrap().wrt(x).unwrap().to_vec()))
    };
    let analytic = eval(&b0, true).1.unwrap();
    let numeric = numerical_gradient(&b0, EPS, |b| eval(b, false).0);
    let mut out = vec![("gaussian_select".to_string(), max_relative_error(&analytic, &numeric, 1e-3))];
    case(&mut out, "predict_positions", 3, 4, |x| {
        let t = x.tape();
        let w = t.constant(4, 4, (0..16).map(|i| ((i * 5 % 9) as f64 - 4.0) / 4.0).collect()).unwrap();
        let u = t.constant(4, 1, vec![0.5, -1.0, 0.8, 0.3]).unwrap();
        predict_positions(x, w, u, &[3, 3, 3]).unwrap()
    });
    out
}

pub fn all_ops() -> Report {
    [elementwise_ops(), matrix_ops(), normalisation_ops(), loss_ops(), attention_ops(), window_ops()].concat()
}

pub fn toy_config(variant: Variant, lambda: f64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ff: 16,
        heads: 2,
        layers: 1,
        src_vocab: 11,
        tgt_vocab: 11,
        dropout: 0.0,
        max_len: 8,
        variant,
        lambda,
        window: WindowConfig { gradient: WindowGradient::Exact, ..Default::default() },
        seed: 5,
    }
}

pub fn toy_batch() -> TrainingBatch {
    let a = EncodedPair {
        src: vec![4, 5, 6],
        tgt: vec![7, 8, 9],
        positions: Some(PositionSequence::new(vec![2, 0, 1]).unwrap()),
    };
    let b = EncodedPair {
        src: vec![10, 4, 9, 5, 7],
        tgt: vec![6, 6, 8, 4],
        positions: Some(PositionSequence::new(vec![4, 3, 2, 1, 0]).unwrap()),
    };
    TrainingBatch::new(&[&a, &b]).unwrap()
}

/// Full-loss gradients against central differences over every parameter
/// scalar; one report line per parameter tensor.
pub fn model_errors(variant: Variant, lambda: f64) -> Report {
    let mut model = Model::new(toy_config(variant, lambda)).unwrap();
    let batch = toy_batch();
    let opts = ForwardOptions::eval();
    let loss_of = |m: &Model| {
        let tape = Tape::new(0);
        let p = m.bind(&tape);
        total_loss(m, &p, &batch, 0.1, &opts).unwrap().total.scalar()
    };
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new(0);
        let p = model.bind(&tape);
        let loss = total_loss(&model, &p, &batch, 0.1, &opts).unwrap();
        let g = tape.backward(loss.total).unwrap();
        p.iter().map(|&v| g.wrt(v).map_or_else(|| vec![0.0; v.rows() * v.cols()], <[f64]>::to_vec)).collect()
    };
    let ids: Vec<ParamId> = model.params().ids().collect();
    let mut out = Report::new();
    for (k, id) in ids.into_iter().enumerate() {
        let x0 = model.params().get(id).data().to_vec();
        let numeric = numerical_gradient(&x0, EPS, |x| {
            model.params_mut().get_mut(id).data_mut().copy_from_slice(x);
            loss_of(&model)
        });
        model.params_mut().get_mut(id).data_mut().copy_from_slice(&x0);
        out.push((model.params().name(id).to_string(), max_relative_error(&analytic[k], &numeric, 1e-4)));
    }
    out
}
