//! Layer building blocks on top of the tape primitives.

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::params::{Init, ParamStore};

/// Registers parameters under a name prefix.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

impl Builder<'_> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        self.store
            .register(self.seed, name.to_string(), shape, init)
    }
}

/// `x · W + b` over the last axis.
#[derive(Clone, Debug)]
pub(crate) struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: b.param(
                &format!("{name}.w"),
                &[fan_in, fan_out],
                Init::Glorot { fan_in, fan_out },
            ),
            b: b.param(&format!("{name}.b"), &[fan_out], Init::Constant(0.0)),
        }
    }

    pub fn bias_index(&self) -> usize {
        self.b
    }

    pub fn apply(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add(y, p[self.b])
    }
}

/// Convolution plus per-channel bias, stride 1.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    k: usize,
    b: usize,
    pad: (usize, usize),
}

impl Conv {
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        let area = kernel.0 * kernel.1;
        let init = Init::Glorot {
            fan_in: cin * area,
            fan_out: cout * area,
        };
        Self {
            k: b.param(&format!("{name}.k"), &[cout, cin, kernel.0, kernel.1], init),
            b: b.param(&format!("{name}.b"), &[cout, 1, 1], Init::Constant(0.0)),
            pad,
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.k], (1, 1), self.pad)?;
        tape.add(y, p[self.b])
    }
}

/// Layer normalization over the last axis with a learned gain and offset.
#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gamma: usize,
    beta: usize,
}

impl Norm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        Self {
            gamma: b.param(&format!("{name}.gamma"), &[dim], Init::Constant(1.0)),
            beta: b.param(&format!("{name}.beta"), &[dim], Init::Constant(0.0)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let axis = tape.shape(x).len() - 1;
        let n = tape.layer_norm(x, axis)?;
        let n = tape.mul(n, p[self.gamma])?;
        tape.add(n, p[self.beta])
    }
}

/// LSTM weights with gates stacked as `[i | f | g | o]` along the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[input, 4·hidden]`
    pub w_ih: Var,
    /// `[hidden, 4·hidden]`
    pub w_hh: Var,
    /// `[4·hidden]`
    pub bias: Var,
}

/// GRU weights with gates stacked as `[r | z | n]`.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

fn gate(tape: &mut Tape, g: Var, k: usize, hidden: usize) -> Result<Var> {
    let b = tape.shape(g)[0];
    tape.slice(g, &[0..b, k * hidden..(k + 1) * hidden])
}

/// One LSTM step from a precomputed input projection `x·W_ih + b` of shape `[B, 4h]`.
pub fn lstm_step(tape: &mut Tape, xproj: Var, h: Var, c: Var, w_hh: Var) -> Result<(Var, Var)> {
    let hidden = tape.shape(h)[1];
    let rec = tape.matmul(h, w_hh)?;
    let g = tape.add(xproj, rec)?;
    let i = gate(tape, g, 0, hidden)?;
    let i = tape.sigmoid(i);
    let f = gate(tape, g, 1, hidden)?;
    let f = tape.sigmoid(f);
    let cand = gate(tape, g, 2, hidden)?;
    let cand = tape.tanh(cand);
    let o = gate(tape, g, 3, hidden)?;
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, cand)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// `(h', c')` for input `x: [B, in]`, state `h, c: [B, hidden]`.
pub fn lstm_cell(tape: &mut Tape, x: Var, h: Var, c: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    check_cell("lstm_cell", tape, x, h, w.w_ih, w.w_hh, 4)?;
    let xp = tape.matmul(x, w.w_ih)?;
    let xp = tape.add(xp, w.bias)?;
    lstm_step(tape, xp, h, c, w.w_hh)
}

/// One GRU step from a precomputed `x·W_ih + b_ih` of shape `[B, 3h]`.
///
/// `r = σ(x_r + h_r)`, `z = σ(x_z + h_z)`, `n = tanh(x_n + r ⊙ h_n)`,
/// `h' = (1 − z) ⊙ n + z ⊙ h`, where `h_* = h·W_hh + b_hh`.
pub fn gru_step(tape: &mut Tape, xproj: Var, h: Var, w_hh: Var, b_hh: Var) -> Result<Var> {
    let hidden = tape.shape(h)[1];
    let hp = tape.matmul(h, w_hh)?;
    let hp = tape.add(hp, b_hh)?;
    let (xr, hr) = (gate(tape, xproj, 0, hidden)?, gate(tape, hp, 0, hidden)?);
    let r = tape.add(xr, hr)?;
    let r = tape.sigmoid(r);
    let (xz, hz) = (gate(tape, xproj, 1, hidden)?, gate(tape, hp, 1, hidden)?);
    let z = tape.add(xz, hz)?;
    let z = tape.sigmoid(z);
    let (xn, hn) = (gate(tape, xproj, 2, hidden)?, gate(tape, hp, 2, hidden)?);
    let rn = tape.mul(r, hn)?;
    let n = tape.add(xn, rn)?;
    let n = tape.tanh(n);
    let diff = tape.sub(h, n)?;
    let carry = tape.mul(z, diff)?;
    tape.add(n, carry)
}

pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, w: &GruWeights) -> Result<Var> {
    check_cell("gru_cell", tape, x, h, w.w_ih, w.w_hh, 3)?;
    let xp = tape.matmul(x, w.w_ih)?;
    let xp = tape.add(xp, w.b_ih)?;
    gru_step(tape, xp, h, w.w_hh, w.b_hh)
}

fn check_cell(
    op: &'static str,
    tape: &Tape,
    x: Var,
    h: Var,
    w_ih: Var,
    w_hh: Var,
    gates: usize,
) -> Result<()> {
    let (sx, sh) = (tape.shape(x), tape.shape(h));
    if sx.len() != 2 || sh.len() != 2 || sx[0] != sh[0] {
        return Err(Error::shape(op, sx, sh));
    }
    let hidden = sh[1];
    let want_ih = [sx[1], gates * hidden];
    let want_hh = [hidden, gates * hidden];
    if tape.shape(w_ih) != want_ih {
        return Err(Error::shape(op, tape.shape(w_ih), &want_ih));
    }
    if tape.shape(w_hh) != want_hh {
        return Err(Error::shape(op, tape.shape(w_hh), &want_hh));
    }
    Ok(())
}

/// Multi-head self-attention with queries, keys and values all equal to `x`
/// (`[B, T, H]`), followed by the output projection `· w_o + b_o`.
pub fn self_attention(tape: &mut Tape, x: Var, heads: usize, w_o: Var, b_o: Var) -> Result<Var> {
    self_attention_with_weights(tape, x, heads, w_o, b_o).map(|(out, _)| out)
}

/// Like [`self_attention`], also returning the attention weights `[B, heads, T, T]`.
pub fn self_attention_with_weights(
    tape: &mut Tape,
    x: Var,
    heads: usize,
    w_o: Var,
    b_o: Var,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("self_attention", &shape, &[heads]));
    }
    let (b, t, hd) = (shape[0], shape[1], shape[2]);
    if heads == 0 || hd % heads != 0 {
        return Err(Error::domain(format!(
            "hidden size {hd} is not divisible by {heads} heads"
        )));
    }
    let d = hd / heads;
    let split = tape.reshape(x, &[b, t, heads, d])?;
    let q = tape.permute(split, &[0, 2, 1, 3])?;
    let kt = tape.permute(split, &[0, 2, 3, 1])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.affine(scores, 1.0 / (d as f64).sqrt(), 0.0);
    let weights = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(weights, q)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, hd])?;
    let out = tape.matmul(ctx, w_o)?;
    let out = tape.add(out, b_o)?;
    Ok((out, weights))
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[len, dim], |idx| {
        let (pos, i) = ((idx / dim) as f64, idx % dim);
        let rate = 10000f64.powf(-((i - i % 2) as f64) / dim as f64);
        if i % 2 == 0 {
            (pos * rate).sin()
        } else {
            (pos * rate).cos()
        }
    })
}

#[derive(Clone, Debug)]
pub(crate) struct LstmLayer {
    w_ih: usize,
    w_hh: usize,
    b: usize,
    hidden: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct GruLayer {
    w_ih: usize,
    w_hh: usize,
    b_ih: usize,
    b_hh: usize,
    hidden: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    heads: usize,
    attn_out: Dense,
    norm1: Norm,
    ff1: Dense,
    ff2: Dense,
    norm2: Norm,
}

/// Sequence encoder body mapping `[B, T, H]` to a `[B, H]` summary.
#[derive(Clone, Debug)]
pub(crate) enum SeqBody {
    Lstm(Vec<LstmLayer>),
    Gru(Vec<GruLayer>),
    Transformer(Vec<Block>),
}

impl LstmLayer {
    pub fn new(b: &mut Builder, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            w_ih: b.param(
                &format!("{name}.w_ih"),
                &[input, 4 * hidden],
                Init::Glorot {
                    fan_in: input,
                    fan_out: 4 * hidden,
                },
            ),
            w_hh: b.param(
                &format!("{name}.w_hh"),
                &[hidden, 4 * hidden],
                Init::Recurrent { fan_in: hidden },
            ),
            b: b.param(&format!("{name}.b"), &[4 * hidden], Init::Constant(0.0)),
            hidden,
        }
    }
}

impl GruLayer {
    pub fn new(b: &mut Builder, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            w_ih: b.param(
                &format!("{name}.w_ih"),
                &[input, 3 * hidden],
                Init::Glorot {
                    fan_in: input,
                    fan_out: 3 * hidden,
                },
            ),
            w_hh: b.param(
                &format!("{name}.w_hh"),
                &[hidden, 3 * hidden],
                Init::Recurrent { fan_in: hidden },
            ),
            b_ih: b.param(&format!("{name}.b_ih"), &[3 * hidden], Init::Constant(0.0)),
            b_hh: b.param(&format!("{name}.b_hh"), &[3 * hidden], Init::Constant(0.0)),
            hidden,
        }
    }
}

impl Block {
    pub fn new(b: &mut Builder, name: &str, hidden: usize, heads: usize) -> Self {
        Self {
            heads,
            attn_out: Dense::new(b, &format!("{name}.attn_out"), hidden, hidden),
            norm1: Norm::new(b, &format!("{name}.norm1"), hidden),
            ff1: Dense::new(b, &format!("{name}.ff1"), hidden, 2 * hidden),
            ff2: Dense::new(b, &format!("{name}.ff2"), 2 * hidden, hidden),
            norm2: Norm::new(b, &format!("{name}.norm2"), hidden),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let a = self_attention(tape, x, self.heads, p[self.attn_out.w], p[self.attn_out.b])?;
        let x = tape.add(x, a)?;
        let x = self.norm1.apply(tape, p, x)?;
        let f = self.ff1.apply(tape, p, x)?;
        let f = tape.relu(f);
        let f = self.ff2.apply(tape, p, f)?;
        let x = tape.add(x, f)?;
        self.norm2.apply(tape, p, x)
    }
}

/// Splits `[B, T, W]` into `T` steps of `[B, W]`.
fn steps(tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
    let s = tape.shape(x).to_vec();
    (0..s[1])
        .map(|t| {
            let step = tape.slice(x, &[0..s[0], t..t + 1, 0..s[2]])?;
            tape.reshape(step, &[s[0], s[2]])
        })
        .collect()
}

fn stack(tape: &mut Tape, hs: &[Var]) -> Result<Var> {
    let reshaped = hs
        .iter()
        .map(|&h| {
            let s = tape.shape(h).to_vec();
            tape.reshape(h, &[s[0], 1, s[1]])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&reshaped, 1)
}

impl SeqBody {
    pub fn apply(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let batch = tape.shape(x)[0];
        match self {
            SeqBody::Lstm(layers) => {
                let mut seq = x;
                let mut last = None;
                for (li, l) in layers.iter().enumerate() {
                    let xp = tape.matmul(seq, p[l.w_ih])?;
                    let xp = tape.add(xp, p[l.b])?;
                    let zero = tape.constant(&Tensor::zeros(&[batch, l.hidden]));
                    let (mut h, mut c) = (zero, zero);
                    let mut hs = Vec::new();
                    for xt in steps(tape, xp)? {
                        (h, c) = lstm_step(tape, xt, h, c, p[l.w_hh])?;
                        hs.push(h);
                    }
                    last = Some(h);
                    if li + 1 < layers.len() {
                        seq = stack(tape, &hs)?;
                    }
                }
                last.ok_or_else(|| Error::config("lstm without layers"))
            }
            SeqBody::Gru(layers) => {
                let mut seq = x;
                let mut last = None;
                for (li, l) in layers.iter().enumerate() {
                    let xp = tape.matmul(seq, p[l.w_ih])?;
                    let xp = tape.add(xp, p[l.b_ih])?;
                    let mut h = tape.constant(&Tensor::zeros(&[batch, l.hidden]));
                    let mut hs = Vec::new();
                    for xt in steps(tape, xp)? {
                        h = gru_step(tape, xt, h, p[l.w_hh], p[l.b_hh])?;
                        hs.push(h);
                    }
                    last = Some(h);
                    if li + 1 < layers.len() {
                        seq = stack(tape, &hs)?;
                    }
                }
                last.ok_or_else(|| Error::config("gru without layers"))
            }
            SeqBody::Transformer(blocks) => {
                let s = tape.shape(x).to_vec();
                let pe = tape.constant(&positional_encoding(s[1], s[2]));
                let mut h = tape.add(x, pe)?;
                for blk in blocks {
                    h = blk.apply(tape, p, h)?;
                }
                tape.mean(h, 1)
            }
        }
    }
}
