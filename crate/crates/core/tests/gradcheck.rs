mod common;

use common::{run_suite, uniform};
use metascreen::models::layers::{
    gru_cell, lstm_cell, self_attention_with_weights, GruWeights, LstmWeights,
};
use metascreen::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 20;

macro_rules! gradcheck {
    ($($name:ident),* $(,)?) => {
        mod ops {
            $(
                #[test]
                fn $name() {
                    if let Err(e) = super::run_suite(stringify!($name), super::INSTANCES, 0xC0FFEE) {
                        panic!("{e}");
                    }
                }
            )*
        }
    };
}

gradcheck!(
    matmul,
    conv2d,
    max_pool2d,
    add,
    sub,
    mul,
    affine,
    relu,
    sigmoid,
    tanh,
    softmax,
    layer_norm,
    concat,
    slice,
    permute,
    reshape,
    mean,
    sum,
    mse_loss,
    lstm_cell,
    gru_cell,
    self_attention,
);

#[test]
fn every_listed_op_has_a_case() {
    for op in common::OPS {
        run_suite(op, 1, 7).unwrap();
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn at(t: &Tensor, row: usize, col: usize) -> f64 {
    t.data()[row * t.shape()[1] + col]
}

/// `x·W[:, col]` for row `row` of `x`.
fn proj(x: &Tensor, w: &Tensor, row: usize, col: usize) -> f64 {
    (0..x.shape()[1])
        .map(|k| at(x, row, k) * at(w, k, col))
        .sum()
}

#[test]
fn attention_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (b, len, heads, d) in [(1, 1, 1, 2), (2, 3, 2, 2), (1, 5, 4, 1), (3, 4, 1, 3)] {
        let hd = heads * d;
        let x = uniform(&mut rng, &[b, len, hd], 1.5);
        let w_o = uniform(&mut rng, &[hd, hd], 1.0);
        let b_o = uniform(&mut rng, &[hd], 1.0);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(&x), tape.constant(&w_o), tape.constant(&b_o));
        let (out, weights) = self_attention_with_weights(&mut tape, xv, heads, wv, bv).unwrap();
        let (out, weights) = (tape.tensor(out), tape.tensor(weights));

        let xs = |bi: usize, t: usize, j: usize| x.data()[(bi * len + t) * hd + j];
        for bi in 0..b {
            let mut ctx = vec![vec![0.0; hd]; len];
            for h in 0..heads {
                for q in 0..len {
                    let scores: Vec<f64> = (0..len)
                        .map(|k| {
                            (0..d)
                                .map(|j| xs(bi, q, h * d + j) * xs(bi, k, h * d + j))
                                .sum::<f64>()
                                / (d as f64).sqrt()
                        })
                        .collect();
                    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for k in 0..len {
                        let a = exps[k] / z;
                        let got = weights.data()[((bi * heads + h) * len + q) * len + k];
                        assert!((got - a).abs() < 1e-12, "weight {bi},{h},{q},{k}");
                        for j in 0..d {
                            ctx[q][h * d + j] += a * xs(bi, k, h * d + j);
                        }
                    }
                }
            }
            for q in 0..len {
                for o in 0..hd {
                    let want = b_o.data()[o]
                        + (0..hd)
                            .map(|j| ctx[q][j] * w_o.data()[j * hd + o])
                            .sum::<f64>();
                    let got = out.data()[(bi * len + q) * hd + o];
                    assert!(
                        (got - want).abs() < 1e-12,
                        "output {bi},{q},{o}: {got} vs {want}"
                    );
                }
            }
        }
    }
}

#[test]
fn lstm_cell_matches_gate_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (b, input, hidden) = (2, 3, 2);
    let x = uniform(&mut rng, &[b, input], 1.0);
    let h = uniform(&mut rng, &[b, hidden], 1.0);
    let c = uniform(&mut rng, &[b, hidden], 1.0);
    let w_ih = uniform(&mut rng, &[input, 4 * hidden], 1.0);
    let w_hh = uniform(&mut rng, &[hidden, 4 * hidden], 1.0);
    let bias = uniform(&mut rng, &[1, 4 * hidden], 1.0);

    let mut tape = Tape::new();
    let vars = [&x, &h, &c, &w_ih, &w_hh].map(|t| tape.constant(t));
    let bv = tape.constant(&bias.clone().reshaped(&[4 * hidden]).unwrap());
    let w = LstmWeights {
        w_ih: vars[3],
        w_hh: vars[4],
        bias: bv,
    };
    let (h1, c1) = lstm_cell(&mut tape, vars[0], vars[1], vars[2], &w).unwrap();
    let (h1, c1) = (tape.tensor(h1), tape.tensor(c1));

    for r in 0..b {
        for j in 0..hidden {
            let pre = |g: usize| {
                proj(&x, &w_ih, r, g * hidden + j)
                    + proj(&h, &w_hh, r, g * hidden + j)
                    + at(&bias, 0, g * hidden + j)
            };
            let (i, f, g, o) = (
                logistic(pre(0)),
                logistic(pre(1)),
                pre(2).tanh(),
                logistic(pre(3)),
            );
            let c_want = f * at(&c, r, j) + i * g;
            assert!((at(&c1, r, j) - c_want).abs() < 1e-12);
            assert!((at(&h1, r, j) - o * c_want.tanh()).abs() < 1e-12);
        }
    }
}

#[test]
fn gru_cell_matches_gate_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (b, input, hidden) = (3, 2, 3);
    let x = uniform(&mut rng, &[b, input], 1.0);
    let h = uniform(&mut rng, &[b, hidden], 1.0);
    let w_ih = uniform(&mut rng, &[input, 3 * hidden], 1.0);
    let w_hh = uniform(&mut rng, &[hidden, 3 * hidden], 1.0);
    let b_ih = uniform(&mut rng, &[1, 3 * hidden], 1.0);
    let b_hh = uniform(&mut rng, &[1, 3 * hidden], 1.0);

    let mut tape = Tape::new();
    let vars = [&x, &h, &w_ih, &w_hh].map(|t| tape.constant(t));
    let bi = tape.constant(&b_ih.clone().reshaped(&[3 * hidden]).unwrap());
    let bh = tape.constant(&b_hh.clone().reshaped(&[3 * hidden]).unwrap());
    let w = GruWeights {
        w_ih: vars[2],
        w_hh: vars[3],
        b_ih: bi,
        b_hh: bh,
    };
    let h1 = gru_cell(&mut tape, vars[0], vars[1], &w).unwrap();
    let h1 = tape.tensor(h1);

    for r in 0..b {
        for j in 0..hidden {
            let xg = |g: usize| proj(&x, &w_ih, r, g * hidden + j) + at(&b_ih, 0, g * hidden + j);
            let hg = |g: usize| proj(&h, &w_hh, r, g * hidden + j) + at(&b_hh, 0, g * hidden + j);
            let rg = logistic(xg(0) + hg(0));
            let z = logistic(xg(1) + hg(1));
            let n = (xg(2) + rg * hg(2)).tanh();
            let want = (1.0 - z) * n + z * at(&h, r, j);
            assert!((at(&h1, r, j) - want).abs() < 1e-12);
        }
    }
}
