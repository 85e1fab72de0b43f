//! Double-double reference evaluation of the head, used only to sharpen
//! finite differences whose f64 evaluation is dominated by rounding.
//!
//! Deliberately naive loops; shares nothing with the fast path except the
//! parameter layout.

use qd::Quad;

use crate::tensor::Matrix;

use super::{HeadParams, LayerOffsets};

pub(crate) type Dd = Quad;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

pub(crate) fn dd(x: f64) -> Dd {
    Quad::from_f64(x)
}

/// `a + b` without rounding.
pub(crate) fn exact_sum(a: f64, b: f64) -> Dd {
    dd(a).add_accurate(dd(b))
}

fn tanh(x: Dd) -> Dd {
    dd(1.0) - dd(2.0) / ((x * dd(2.0)).exp() + dd(1.0))
}

fn gelu(x: Dd) -> Dd {
    let u = (x + x * x * x * dd(0.044715)) * dd(GELU_C);
    x * dd(0.5) * (tanh(u) + dd(1.0))
}

/// `y = x W^T + b`, `x: n x din`, `W: dout x din`.
fn linear(x: &[Dd], n: usize, din: usize, w: &[Dd], b: Option<&[Dd]>, dout: usize) -> Vec<Dd> {
    let mut y = vec![dd(0.0); n * dout];
    for r in 0..n {
        for o in 0..dout {
            let mut s = b.map_or(dd(0.0), |b| b[o]);
            for i in 0..din {
                s += x[r * din + i] * w[o * din + i];
            }
            y[r * dout + o] = s;
        }
    }
    y
}

fn layer_norm(x: &[Dd], d: usize, g: &[Dd], b: &[Dd]) -> Vec<Dd> {
    let mut y = vec![dd(0.0); x.len()];
    for (row, out) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mean = row.iter().fold(dd(0.0), |a, v| a + *v) / dd(d as f64);
        let var = row.iter().fold(dd(0.0), |a, v| a + (*v - mean) * (*v - mean)) / dd(d as f64);
        let rstd = (var + dd(LN_EPS)).sqrt().recip();
        for c in 0..d {
            out[c] = g[c] * ((row[c] - mean) * rstd) + b[c];
        }
    }
    y
}

pub(crate) fn softmax(x: &[Dd]) -> Vec<Dd> {
    let m = x.iter().copied().fold(x[0], |a, v| if v > a { v } else { a });
    let e: Vec<Dd> = x.iter().map(|v| (*v - m).exp()).collect();
    let s = e.iter().fold(dd(0.0), |a, v| a + *v);
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn log_softmax(x: &[Dd]) -> Vec<Dd> {
    let m = x.iter().copied().fold(x[0], |a, v| if v > a { v } else { a });
    let s = x.iter().fold(dd(0.0), |a, v| a + (*v - m).exp());
    let lse = m + s.ln();
    x.iter().map(|v| *v - lse).collect()
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: Dd) -> Dd {
    if x > dd(0.0) {
        x + (dd(1.0) + (-x).exp()).ln()
    } else {
        (dd(1.0) + x.exp()).ln()
    }
}

/// Parameters (and optionally the hidden input) lifted to double-double,
/// with at most one coordinate shifted exactly by `delta`.
pub(crate) struct PreciseHead<'a> {
    params: &'a HeadParams,
    values: Vec<Dd>,
}

impl<'a> PreciseHead<'a> {
    pub(crate) fn new(params: &'a HeadParams) -> Self {
        let values = params.values().iter().map(|v| dd(*v)).collect();
        PreciseHead { params, values }
    }

    /// Sets parameter `i` to its original value plus `delta`, represented
    /// exactly.
    pub(crate) fn shift(&mut self, i: usize, delta: f64) {
        self.values[i] = exact_sum(self.params.values()[i], delta);
    }

    pub(crate) fn reset(&mut self, i: usize) {
        self.values[i] = dd(self.params.values()[i]);
    }

    /// Action logits for `hidden`, one row per position.
    pub(crate) fn logits(&self, hidden: &[Dd], rows: usize) -> Vec<Dd> {
        let mut x = self.embed(hidden, rows);
        let layers = &self.params.layout().layers;
        for (l, lo) in layers.iter().enumerate() {
            x = self.layer(lo, &x, rows + 1, l + 1 == layers.len());
        }
        self.mlp(&x)
    }

    /// Layer inputs for `hidden` under the current values, so that
    /// [`PreciseHead::logits_from`] can skip layers a coordinate cannot reach.
    pub(crate) fn prepare(&self, hidden: &[Dd], rows: usize) -> Prepared {
        let mut stages = vec![self.embed(hidden, rows)];
        let layers = &self.params.layout().layers;
        for (l, lo) in layers.iter().enumerate() {
            let next = self.layer(lo, stages.last().unwrap(), rows + 1, l + 1 == layers.len());
            stages.push(next);
        }
        Prepared {
            rows,
            hidden: hidden.to_vec(),
            stages,
        }
    }

    /// Logits when only parameter `i` differs from the values `prep` was
    /// built with.
    pub(crate) fn logits_from(&self, prep: &Prepared, i: usize) -> Vec<Dd> {
        let lay = self.params.layout();
        let stage = match lay.layers.iter().rposition(|lo| lo.wq <= i) {
            _ if i >= lay.mlp_w1 => lay.layers.len(),
            Some(l) => l,
            None => return self.logits(&prep.hidden, prep.rows),
        };
        let mut x = prep.stages[stage].clone();
        for (l, lo) in lay.layers.iter().enumerate().skip(stage) {
            x = self.layer(lo, &x, prep.rows + 1, l + 1 == lay.layers.len());
        }
        self.mlp(&x)
    }

    fn embed(&self, hidden: &[Dd], rows: usize) -> Vec<Dd> {
        let c = self.params.config();
        let lay = self.params.layout();
        let p = &self.values;
        let d = c.d;
        let n = rows + 1;
        assert!(n <= c.max_len && hidden.len() == rows * d);
        let mut x = Vec::with_capacity(n * d);
        x.extend_from_slice(&p[lay.eye..lay.eye + d]);
        x.extend_from_slice(hidden);
        for (v, pe) in x.iter_mut().zip(&p[lay.pos..lay.pos + n * d]) {
            *v += *pe;
        }
        x
    }

    fn mlp(&self, x: &[Dd]) -> Vec<Dd> {
        let c = self.params.config();
        let lay = self.params.layout();
        let p = &self.values;
        let d = c.d;
        let m1 = linear(
            &x[..d],
            1,
            d,
            &p[lay.mlp_w1..lay.mlp_w1 + c.mlp_hidden * d],
            Some(&p[lay.mlp_b1..lay.mlp_b1 + c.mlp_hidden]),
            c.mlp_hidden,
        );
        let gm: Vec<Dd> = m1.into_iter().map(gelu).collect();
        linear(
            &gm,
            1,
            c.mlp_hidden,
            &p[lay.mlp_w2..lay.mlp_w2 + c.k * c.mlp_hidden],
            Some(&p[lay.mlp_b2..lay.mlp_b2 + c.k]),
            c.k,
        )
    }

    /// One encoder layer. With `head_only`, only the first output row is
    /// produced, which is all the readout uses.
    fn layer(&self, lo: &LayerOffsets, x: &[Dd], n: usize, head_only: bool) -> Vec<Dd> {
        let c = self.params.config();
        let p = &self.values;
        let (d, f, dh) = (c.d, c.ffn_hidden, c.head_dim());
        let sl = |off: usize, len: usize| &p[off..off + len];
        let m = if head_only { 1 } else { n };
        let q = linear(x, m, d, sl(lo.wq, d * d), None, d);
        let k = linear(x, n, d, sl(lo.wk, d * d), None, d);
        let v = linear(x, n, d, sl(lo.wv, d * d), None, d);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut z = vec![dd(0.0); m * d];
        for h in 0..c.heads {
            let o = h * dh;
            for i in 0..m {
                let scores: Vec<Dd> = (0..n)
                    .map(|j| {
                        let mut s = dd(0.0);
                        for t in 0..dh {
                            s += q[i * d + o + t] * k[j * d + o + t];
                        }
                        s * dd(scale)
                    })
                    .collect();
                let a = softmax(&scores);
                for (j, aj) in a.iter().enumerate() {
                    for t in 0..dh {
                        z[i * d + o + t] += *aj * v[j * d + o + t];
                    }
                }
            }
        }
        let mut r1 = linear(&z, m, d, sl(lo.wo, d * d), None, d);
        for (r, xi) in r1.iter_mut().zip(x) {
            *r += *xi;
        }
        let y1 = layer_norm(&r1, d, sl(lo.ln1_g, d), sl(lo.ln1_b, d));
        let f1 = linear(&y1, m, d, sl(lo.ff_w1, f * d), Some(sl(lo.ff_b1, f)), f);
        let gf: Vec<Dd> = f1.into_iter().map(gelu).collect();
        let mut r2 = linear(&gf, m, f, sl(lo.ff_w2, d * f), Some(sl(lo.ff_b2, d)), d);
        for (r, yi) in r2.iter_mut().zip(&y1) {
            *r += *yi;
        }
        layer_norm(&r2, d, sl(lo.ln2_g, d), sl(lo.ln2_b, d))
    }
}

pub(crate) struct Prepared {
    rows: usize,
    hidden: Vec<Dd>,
    stages: Vec<Vec<Dd>>,
}

pub(crate) fn lift(m: &Matrix) -> Vec<Dd> {
    m.as_slice().iter().map(|v| dd(*v)).collect()
}

pub(crate) fn lower(x: Dd) -> f64 {
    x.0 + x.1
}

/// Central difference `(f(+h) - f(-h)) / 2h` with both sides in double-double.
pub(crate) fn central(up: Dd, down: Dd, h: f64) -> f64 {
    lower((up - down) / dd(2.0 * h))
}
