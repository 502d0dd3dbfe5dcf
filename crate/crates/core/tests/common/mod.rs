#![allow(dead_code)]

use metascreen::models::layers::{gru_cell, lstm_cell, self_attention, GruWeights, LstmWeights};
use metascreen::{Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-8;

pub const OPS: &[&str] = &[
    "matmul",
    "conv2d",
    "max_pool2d",
    "add",
    "sub",
    "mul",
    "affine",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "layer_norm",
    "concat",
    "slice",
    "permute",
    "reshape",
    "mean",
    "sum",
    "mse_loss",
    "lstm_cell",
    "gru_cell",
    "self_attention",
];

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * (2.0 * rng.gen::<f64>() - 1.0))
}

/// Values bounded away from zero so ReLU's kink stays out of the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = 0.05 + rng.gen::<f64>();
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced well beyond the finite-difference step.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tensor::from_fn(shape, |i| 0.05 * order[i] as f64 + 0.01 * rng.gen::<f64>())
}

fn dims(rng: &mut ChaCha8Rng, rank: std::ops::RangeInclusive<usize>, max: usize) -> Vec<usize> {
    let rank = rng.gen_range(rank);
    (0..rank).map(|_| rng.gen_range(1..=max)).collect()
}

/// A pair of shapes that broadcast against each other.
fn broadcast_pair(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let full = dims(rng, 1..=3, 4);
    let mut a = full.clone();
    let mut b = full.clone();
    for (da, db) in a.iter_mut().zip(b.iter_mut()) {
        match rng.gen_range(0..3) {
            0 => *da = 1,
            1 => *db = 1,
            _ => {}
        }
    }
    let drop = rng.gen_range(0..b.len());
    let b = b[drop..].to_vec();
    if rng.gen() {
        (a, b)
    } else {
        (b, a)
    }
}

fn unary(rng: &mut ChaCha8Rng, f: fn(&mut Tape, Var) -> Var) -> Case {
    let shape = dims(rng, 1..=3, 4);
    Case {
        inputs: vec![uniform(rng, &shape, 2.0)],
        build: Box::new(move |t, v| Ok(f(t, v[0]))),
    }
}

fn binary(rng: &mut ChaCha8Rng, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Case {
    let (sa, sb) = broadcast_pair(rng);
    Case {
        inputs: vec![uniform(rng, &sa, 1.5), uniform(rng, &sb, 1.5)],
        build: Box::new(move |t, v| f(t, v[0], v[1])),
    }
}

pub fn make_case(op: &str, rng: &mut ChaCha8Rng, instance: usize) -> Case {
    match op {
        "matmul" => {
            let (m, k, n) = (
                rng.gen_range(1..5),
                rng.gen_range(1..5),
                rng.gen_range(1..5),
            );
            let batch = rng.gen_range(1..4);
            let (sa, sb) = match instance % 3 {
                0 => (vec![m, k], vec![k, n]),
                1 => (vec![batch, m, k], vec![batch, k, n]),
                _ => (vec![batch, m, k], vec![k, n]),
            };
            Case {
                inputs: vec![uniform(rng, &sa, 1.0), uniform(rng, &sb, 1.0)],
                build: Box::new(|t, v| t.matmul(v[0], v[1])),
            }
        }
        "conv2d" => {
            let (n, cin, cout) = (
                rng.gen_range(1..3),
                rng.gen_range(1..3),
                rng.gen_range(1..3),
            );
            let (kh, kw) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let (h, w) = (rng.gen_range(kh..kh + 4), rng.gen_range(kw..kw + 4));
            let stride = (rng.gen_range(1..3), rng.gen_range(1..3));
            let pad = (rng.gen_range(0..2), rng.gen_range(0..2));
            Case {
                inputs: vec![
                    uniform(rng, &[n, cin, h, w], 1.0),
                    uniform(rng, &[cout, cin, kh, kw], 1.0),
                ],
                build: Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad)),
            }
        }
        "max_pool2d" => {
            let window = (rng.gen_range(1..3), rng.gen_range(1..4));
            let shape = [
                rng.gen_range(1..3),
                rng.gen_range(1..3),
                rng.gen_range(window.0..window.0 * 3 + 1),
                rng.gen_range(window.1..window.1 * 3 + 1),
            ];
            Case {
                inputs: vec![distinct(rng, &shape)],
                build: Box::new(move |t, v| t.max_pool2d(v[0], window)),
            }
        }
        "add" => binary(rng, Tape::add),
        "sub" => binary(rng, Tape::sub),
        "mul" => binary(rng, Tape::mul),
        "affine" => {
            let (scale, shift) = (rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0));
            let shape = dims(rng, 2..=2, 5);
            Case {
                inputs: vec![uniform(rng, &shape, 1.0)],
                build: Box::new(move |t, v| Ok(t.affine(v[0], scale, shift))),
            }
        }
        "relu" => {
            let shape = dims(rng, 1..=3, 4);
            Case {
                inputs: vec![away_from_zero(rng, &shape)],
                build: Box::new(|t, v| Ok(t.relu(v[0]))),
            }
        }
        "sigmoid" => unary(rng, Tape::sigmoid),
        "tanh" => unary(rng, Tape::tanh),
        "softmax" | "layer_norm" | "mean" => {
            let shape = dims(rng, 1..=3, 5);
            let axis = rng.gen_range(0..shape.len());
            let f: fn(&mut Tape, Var, usize) -> Result<Var> = match op {
                "softmax" => Tape::softmax,
                "layer_norm" => Tape::layer_norm,
                _ => Tape::mean,
            };
            Case {
                inputs: vec![uniform(rng, &shape, 2.0)],
                build: Box::new(move |t, v| f(t, v[0], axis)),
            }
        }
        "concat" => {
            let base = dims(rng, 1..=3, 4);
            let axis = rng.gen_range(0..base.len());
            let parts = rng.gen_range(2..4);
            let inputs = (0..parts)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = rng.gen_range(1..4);
                    uniform(rng, &s, 1.0)
                })
                .collect();
            Case {
                inputs,
                build: Box::new(move |t, v| t.concat(v, axis)),
            }
        }
        "slice" => {
            let shape = dims(rng, 1..=3, 5);
            let ranges: Vec<_> = shape
                .iter()
                .map(|&d| {
                    let start = rng.gen_range(0..d);
                    start..rng.gen_range(start + 1..=d)
                })
                .collect();
            Case {
                inputs: vec![uniform(rng, &shape, 1.0)],
                build: Box::new(move |t, v| t.slice(v[0], &ranges)),
            }
        }
        "permute" => {
            let shape = dims(rng, 2..=4, 4);
            let mut axes: Vec<usize> = (0..shape.len()).collect();
            axes.shuffle(rng);
            Case {
                inputs: vec![uniform(rng, &shape, 1.0)],
                build: Box::new(move |t, v| t.permute(v[0], &axes)),
            }
        }
        "reshape" => {
            let shape = dims(rng, 1..=3, 4);
            let n: usize = shape.iter().product();
            let target = if rng.gen() { vec![n] } else { vec![1, n, 1] };
            Case {
                inputs: vec![uniform(rng, &shape, 1.0)],
                build: Box::new(move |t, v| t.reshape(v[0], &target)),
            }
        }
        "sum" => unary(rng, Tape::sum),
        "mse_loss" => {
            let shape = dims(rng, 1..=3, 4);
            Case {
                inputs: vec![uniform(rng, &shape, 1.0), uniform(rng, &shape, 1.0)],
                build: Box::new(|t, v| t.mse_loss(v[0], v[1])),
            }
        }
        "lstm_cell" => {
            let (b, input, hidden) = (
                rng.gen_range(1..3),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            Case {
                inputs: vec![
                    uniform(rng, &[b, input], 1.0),
                    uniform(rng, &[b, hidden], 1.0),
                    uniform(rng, &[b, hidden], 1.0),
                    uniform(rng, &[input, 4 * hidden], 0.8),
                    uniform(rng, &[hidden, 4 * hidden], 0.8),
                    uniform(rng, &[4 * hidden], 0.5),
                ],
                build: Box::new(|t, v| {
                    let w = LstmWeights {
                        w_ih: v[3],
                        w_hh: v[4],
                        bias: v[5],
                    };
                    let (h, c) = lstm_cell(t, v[0], v[1], v[2], &w)?;
                    t.concat(&[h, c], 1)
                }),
            }
        }
        "gru_cell" => {
            let (b, input, hidden) = (
                rng.gen_range(1..3),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            Case {
                inputs: vec![
                    uniform(rng, &[b, input], 1.0),
                    uniform(rng, &[b, hidden], 1.0),
                    uniform(rng, &[input, 3 * hidden], 0.8),
                    uniform(rng, &[hidden, 3 * hidden], 0.8),
                    uniform(rng, &[3 * hidden], 0.5),
                    uniform(rng, &[3 * hidden], 0.5),
                ],
                build: Box::new(|t, v| {
                    let w = GruWeights {
                        w_ih: v[2],
                        w_hh: v[3],
                        b_ih: v[4],
                        b_hh: v[5],
                    };
                    gru_cell(t, v[0], v[1], &w)
                }),
            }
        }
        "self_attention" => {
            let heads = rng.gen_range(1..3);
            let hd = heads * rng.gen_range(1..3);
            let (b, len) = (rng.gen_range(1..3), rng.gen_range(1..4));
            Case {
                inputs: vec![
                    uniform(rng, &[b, len, hd], 1.0),
                    uniform(rng, &[hd, hd], 0.8),
                    uniform(rng, &[hd], 0.5),
                ],
                build: Box::new(move |t, v| self_attention(t, v[0], heads, v[1], v[2])),
            }
        }
        other => panic!("no gradient case for {other}"),
    }
}

/// `Σ out ⊙ weights`, recorded on `tape`.
fn probe(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn scalar_loss(case: &Case, inputs: &[Tensor], weights: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x)).collect();
    let out = (case.build)(&mut tape, &vars).expect("forward");
    let loss = probe(&mut tape, out, weights).expect("probe");
    tape.value(loss)[0]
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= REL_TOL * analytic.abs().max(numeric.abs()) || diff <= ABS_TOL
}

/// Compares backprop against central differences on every input element.
pub fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.variable(x)).collect();
    let out = (case.build)(&mut tape, &vars).map_err(|e| e.to_string())?;
    let weights = uniform(rng, tape.shape(out), 1.0);
    let loss = probe(&mut tape, out, &weights).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;

    for (slot, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; case.inputs[slot].numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for i in 0..case.inputs[slot].numel() {
            let mut inputs = case.inputs.clone();
            inputs[slot].data_mut()[i] += STEP;
            let up = scalar_loss(case, &inputs, &weights);
            inputs[slot].data_mut()[i] -= 2.0 * STEP;
            let down = scalar_loss(case, &inputs, &weights);
            let numeric = (up - down) / (2.0 * STEP);
            if !close(analytic[i], numeric) {
                return Err(format!(
                    "input {slot} element {i} shape {:?}: analytic {} vs numeric {numeric}",
                    case.inputs[slot].shape(),
                    analytic[i]
                ));
            }
        }
    }
    Ok(())
}

/// Runs `instances` random checks of `op`; the error names the first failure.
pub fn run_suite(op: &str, instances: usize, seed: u64) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..instances {
        let case = make_case(op, &mut rng, k);
        check_case(&case, &mut rng).map_err(|e| format!("{op} instance {k}: {e}"))?;
    }
    Ok(())
}
