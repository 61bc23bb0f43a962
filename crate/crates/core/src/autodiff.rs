//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass together with its
//! value. [`Tape::backward`] walks the record in reverse and returns the
//! gradient of every parameter leaf. Tapes are single-threaded and cheap to
//! build per batch element; parallelism happens across tapes.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};

use crate::nn::{Grads, ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-wise set of admissible key indices, used by masked attention.
pub type PairLists = Arc<Vec<Vec<usize>>>;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    /// Adds a `1×C` row to every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Per-row attention restricted to `pairs[i]`, keys = values = input rows.
    Refine {
        q: Var,
        pairs: PairLists,
        weights: Vec<Vec<f64>>,
        scale: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf; repeated requests for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / cols;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|c| c * c).sum_axis(Axis(1)) / cols;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Unfolds `x` (`T×C`) into `T_out × (kernel·C)` patches with zero
    /// padding, so a 1-D convolution becomes one matrix product.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (t, c) = xv.dim();
        let t_out = conv_out_len(t, kernel, stride, pad);
        let mut out = Array2::zeros((t_out, kernel * c));
        for o in 0..t_out {
            for k in 0..kernel {
                let src = (o * stride + k) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    out.slice_mut(s![o, k * c..(k + 1) * c])
                        .assign(&xv.row(src as usize));
                }
            }
        }
        self.push(
            out,
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            },
        )
    }

    /// Selective refinement: row `i` of the output attends over the rows
    /// listed in `pairs[i]` with scaled dot-product weights. A row whose only
    /// entry is itself is copied unchanged.
    pub fn refine(&mut self, q: Var, pairs: PairLists) -> Var {
        let qv = self.value(q);
        let scale = 1.0 / (qv.ncols() as f64).sqrt();
        let (out, weights) = refine_forward(qv, &pairs, scale);
        self.push(
            out,
            Op::Refine {
                q,
                pairs,
                weights,
                scale,
            },
        )
    }

    /// Reverse pass from the given seed gradients. Returns one gradient per
    /// parameter block of `store` (zero for blocks not on this tape).
    pub fn backward(&self, store: &ParamStore, seeds: &[(Var, Array2<f64>)]) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
        }
        let mut out = Grads::zeros_like(store);
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.add_block(*id, &g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::Silu(a) => {
                    let mut d = self.value(*a).mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    d *= &g;
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = node.value.mapv(|y| y * (1.0 - y));
                    d *= &g;
                    accumulate(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = y * &(&g - &dot);
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let cols = xhat.ncols() as f64;
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * self.value(*gamma);
                    let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let mut dx = &dxhat * cols - &sum_d - &(xhat * &sum_dx);
                    dx *= &(inv_std.view().insert_axis(Axis(1)).mapv(|v| v / cols));
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut d = Array2::zeros(av.raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        accumulate(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Im2Col {
                    x,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (t, c) = self.value(*x).dim();
                    let mut d = Array2::zeros((t, c));
                    for o in 0..g.nrows() {
                        for k in 0..*kernel {
                            let src = (o * stride + k) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let mut row = d.row_mut(src as usize);
                                row += &g.slice(s![o, k * c..(k + 1) * c]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Refine {
                    q,
                    pairs,
                    weights,
                    scale,
                } => {
                    let d = refine_backward(self.value(*q), pairs, weights, *scale, &g);
                    accumulate(&mut grads, *q, d);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn conv_out_len(t: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (t + 2 * pad - kernel) / stride + 1
}

pub(crate) fn refine_forward(q: &Array2<f64>, pairs: &[Vec<usize>], scale: f64) -> (Array2<f64>, Vec<Vec<f64>>) {
    let mut out = Array2::zeros(q.raw_dim());
    let mut weights = Vec::with_capacity(pairs.len());
    for (i, js) in pairs.iter().enumerate() {
        if js.len() == 1 && js[0] == i {
            out.row_mut(i).assign(&q.row(i));
            weights.push(vec![1.0]);
            continue;
        }
        let qi = q.row(i);
        let logits: Vec<f64> = js.iter().map(|&j| qi.dot(&q.row(j)) * scale).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let mut row = out.row_mut(i);
        for (&j, &wj) in js.iter().zip(&w) {
            row.scaled_add(wj, &q.row(j));
        }
        weights.push(w);
    }
    (out, weights)
}

fn refine_backward(
    q: &Array2<f64>,
    pairs: &[Vec<usize>],
    weights: &[Vec<f64>],
    scale: f64,
    g: &Array2<f64>,
) -> Array2<f64> {
    let mut d = Array2::zeros(q.raw_dim());
    for (i, (js, w)) in pairs.iter().zip(weights).enumerate() {
        let gi = g.row(i);
        if js.len() == 1 && js[0] == i {
            let mut row = d.row_mut(i);
            row += &gi;
            continue;
        }
        // out_i = Σ_j w_j q_j,  w = softmax(s),  s_j = scale · q_i·q_j
        let dw: Vec<f64> = js.iter().map(|&j| gi.dot(&q.row(j))).collect();
        let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        for (k, &j) in js.iter().enumerate() {
            let ds = w[k] * (dw[k] - mean) * scale;
            let qj = q.row(j).to_owned();
            let qi = q.row(i).to_owned();
            d.row_mut(j).scaled_add(w[k], &gi);
            d.row_mut(i).scaled_add(ds, &qj);
            d.row_mut(j).scaled_add(ds, &qi);
        }
    }
    d
}
