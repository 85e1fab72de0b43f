use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, gemm, softmax_in_place, Matrix};

use super::{HeadParams, LayerOffsets};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct LayerTrace {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads x n x n` attention probabilities.
    attn: Vec<f64>,
    z: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    y1: Vec<f64>,
    f1: Vec<f64>,
    gf: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
}

/// Activations cached by [`head_forward`] for [`head_backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    version: u64,
    n: usize,
    layers: Vec<LayerTrace>,
    eye_out: Vec<f64>,
    m1: Vec<f64>,
    gm: Vec<f64>,
}

impl ForwardTrace {
    /// Sequence length including the decision token.
    pub fn seq_len(&self) -> usize {
        self.n
    }

    /// Final-layer output at the decision token.
    pub fn eye_output(&self) -> &[f64] {
        &self.eye_out
    }
}

/// Gradients of a scalar objective with respect to the parameters and the
/// hidden-state input.
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub params: Vec<f64>,
    pub hidden: Matrix,
}

fn w(p: &[f64], off: usize, len: usize) -> &[f64] {
    &p[off..off + len]
}

/// `y = x W^T (+ b)` with `x: n x din`, `W: dout x din`.
fn linear(x: &[f64], n: usize, din: usize, wt: &[f64], b: Option<&[f64]>, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    gemm(n, din, dout, 1.0, x, false, wt, true, 0.0, &mut y);
    if let Some(b) = b {
        for row in y.chunks_exact_mut(dout) {
            for (v, bi) in row.iter_mut().zip(b) {
                *v += bi;
            }
        }
    }
    y
}

fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[r * d + c] = xh;
            y[r * d + c] = g[c] * xh + b[c];
        }
    }
    (y, xhat, rstd)
}

/// Returns `dx`; accumulates `dgamma`, `dbeta`.
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    d: usize,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let n = rstd.len();
    let mut dx = vec![0.0; n * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            dg[c] += dyr[c] * xr[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xr[c];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for c in 0..d {
            dx[r * d + c] = rstd[r] * (dxhat[c] - mean_dxhat - xr[c] * mean_dxhat_xhat);
        }
    }
    dx
}

/// `dW += dY^T X` for `dY: n x dout`, `X: n x din`.
fn acc_weight_grad(dy: &[f64], x: &[f64], n: usize, dout: usize, din: usize, dw: &mut [f64]) {
    gemm(dout, n, din, 1.0, dy, true, x, false, 1.0, dw);
}

fn acc_bias_grad(dy: &[f64], dout: usize, db: &mut [f64]) {
    for row in dy.chunks_exact(dout) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// `dX += dY W` for `dY: n x dout`, `W: dout x din`.
fn acc_input_grad(dy: &[f64], wt: &[f64], n: usize, dout: usize, din: usize, dx: &mut [f64]) {
    gemm(n, dout, din, 1.0, dy, false, wt, false, 1.0, dx);
}

/// Runs the head over `hidden` (one row per position) and returns the action
/// logits together with the trace needed for the backward pass.
pub fn head_forward(params: &HeadParams, hidden: &Matrix) -> Result<(Vec<f64>, ForwardTrace)> {
    let c = *params.config();
    let lay = params.layout();
    let p = params.values();
    let d = c.d;
    if hidden.cols() != d {
        return Err(Error::ShapeMismatch {
            name: "hidden width".into(),
            expected: d,
            found: hidden.cols(),
        });
    }
    let n = hidden.rows() + 1;
    if n > c.max_len {
        return Err(Error::invalid(format!(
            "sequence of {} positions exceeds max_len {}",
            n, c.max_len
        )));
    }
    let mut x = vec![0.0; n * d];
    x[..d].copy_from_slice(w(p, lay.eye, d));
    x[d..].copy_from_slice(hidden.as_slice());
    for (v, pe) in x.iter_mut().zip(w(p, lay.pos, n * d)) {
        *v += pe;
    }

    let mut layers = Vec::with_capacity(c.layers);
    for lo in &lay.layers {
        let (next, t) = layer_forward(p, lo, &c, x, n);
        layers.push(t);
        x = next;
    }

    let eye_out = x[..d].to_vec();
    let (m1, gm, logits) = mlp_forward(params, &eye_out);
    let trace = ForwardTrace {
        version: params.version(),
        n,
        layers,
        eye_out,
        m1,
        gm,
    };
    Ok((logits, trace))
}

fn mlp_forward(params: &HeadParams, eye_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = params.config();
    let lay = params.layout();
    let p = params.values();
    let d = c.d;
    let m1 = linear(eye_out, 1, d, w(p, lay.mlp_w1, c.mlp_hidden * d), Some(w(p, lay.mlp_b1, c.mlp_hidden)), c.mlp_hidden);
    let gm: Vec<f64> = m1.iter().map(|v| gelu(*v)).collect();
    let logits = linear(&gm, 1, c.mlp_hidden, w(p, lay.mlp_w2, c.k * c.mlp_hidden), Some(w(p, lay.mlp_b2, c.k)), c.k);
    (m1, gm, logits)
}

/// Logits of `params` on the input `trace` was recorded for, where `params`
/// may differ from the traced parameters only at coordinate `i`. Layers
/// before the one holding `i` are taken from the trace.
pub(crate) fn logits_after_change(params: &HeadParams, trace: &ForwardTrace, hidden: &Matrix, i: usize) -> Result<Vec<f64>> {
    let c = *params.config();
    let lay = params.layout();
    if i >= lay.mlp_w1 {
        return Ok(mlp_forward(params, &trace.eye_out).2);
    }
    let Some(stage) = lay.layers.iter().rposition(|lo| lo.wq <= i) else {
        return head_forward(params, hidden).map(|(l, _)| l);
    };
    let p = params.values();
    let mut x = trace.layers[stage].x.clone();
    for lo in &lay.layers[stage..] {
        x = layer_forward(p, lo, &c, x, trace.n).0;
    }
    Ok(mlp_forward(params, &x[..c.d]).2)
}

fn layer_forward(p: &[f64], lo: &LayerOffsets, c: &super::HeadConfig, x: Vec<f64>, n: usize) -> (Vec<f64>, LayerTrace) {
    let d = c.d;
    let f = c.ffn_hidden;
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(&x, n, d, w(p, lo.wq, d * d), None, d);
    let k = linear(&x, n, d, w(p, lo.wk, d * d), None, d);
    let v = linear(&x, n, d, w(p, lo.wv, d * d), None, d);
    let mut attn = vec![0.0; c.heads * n * n];
    let mut z = vec![0.0; n * d];
    for h in 0..c.heads {
        let base = h * dh;
        for i in 0..n {
            let row = &mut attn[(h * n + i) * n..(h * n + i + 1) * n];
            let qi = &q[i * d + base..i * d + base + dh];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k[j * d + base..j * d + base + dh];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(row);
            let zi = &mut z[i * d + base..i * d + base + dh];
            for (j, a) in row.iter().enumerate() {
                let vj = &v[j * d + base..j * d + base + dh];
                for (zc, vc) in zi.iter_mut().zip(vj) {
                    *zc += a * vc;
                }
            }
        }
    }
    let mut r1 = linear(&z, n, d, w(p, lo.wo, d * d), None, d);
    for (r, xi) in r1.iter_mut().zip(&x) {
        *r += xi;
    }
    let (y1, xhat1, rstd1) = layer_norm(&r1, d, w(p, lo.ln1_g, d), w(p, lo.ln1_b, d));
    let f1 = linear(&y1, n, d, w(p, lo.ff_w1, f * d), Some(w(p, lo.ff_b1, f)), f);
    let gf: Vec<f64> = f1.iter().map(|v| gelu(*v)).collect();
    let mut r2 = linear(&gf, n, f, w(p, lo.ff_w2, d * f), Some(w(p, lo.ff_b2, d)), d);
    for (r, yi) in r2.iter_mut().zip(&y1) {
        *r += yi;
    }
    let (out, xhat2, rstd2) = layer_norm(&r2, d, w(p, lo.ln2_g, d), w(p, lo.ln2_b, d));
    let t = LayerTrace {
        x,
        q,
        k,
        v,
        attn,
        z,
        xhat1,
        rstd1,
        y1,
        f1,
        gf,
        xhat2,
        rstd2,
    };
    (out, t)
}

/// Gradients of `sum_a d_logits[a] * logits[a]`.
pub fn head_backward(params: &HeadParams, trace: &ForwardTrace, d_logits: &[f64]) -> Result<HeadGrads> {
    let mut grad = vec![0.0; params.len()];
    let hidden = head_backward_into(params, trace, d_logits, &mut grad)?;
    Ok(HeadGrads { params: grad, hidden })
}

/// Like [`head_backward`] but accumulates parameter gradients into `grad`.
/// Returns the gradient with respect to the hidden-state input.
pub fn head_backward_into(
    params: &HeadParams,
    trace: &ForwardTrace,
    d_logits: &[f64],
    grad: &mut [f64],
) -> Result<Matrix> {
    if trace.version != params.version() {
        return Err(Error::ContractViolation(
            "forward trace is stale: parameters changed since it was recorded".into(),
        ));
    }
    let c = *params.config();
    if d_logits.len() != c.k {
        return Err(Error::ShapeMismatch {
            name: "action-logit gradient".into(),
            expected: c.k,
            found: d_logits.len(),
        });
    }
    if grad.len() != params.len() {
        return Err(Error::ShapeMismatch {
            name: "gradient buffer".into(),
            expected: params.len(),
            found: grad.len(),
        });
    }
    let lay = params.layout();
    let p = params.values();
    let (d, hm, k, n) = (c.d, c.mlp_hidden, c.k, trace.n);

    acc_bias_grad(d_logits, k, &mut grad[lay.mlp_b2..lay.mlp_b2 + k]);
    acc_weight_grad(d_logits, &trace.gm, 1, k, hm, &mut grad[lay.mlp_w2..lay.mlp_w2 + k * hm]);
    let mut dm1 = vec![0.0; hm];
    acc_input_grad(d_logits, w(p, lay.mlp_w2, k * hm), 1, k, hm, &mut dm1);
    for (g, m) in dm1.iter_mut().zip(&trace.m1) {
        *g *= gelu_grad(*m);
    }
    acc_bias_grad(&dm1, hm, &mut grad[lay.mlp_b1..lay.mlp_b1 + hm]);
    acc_weight_grad(&dm1, &trace.eye_out, 1, hm, d, &mut grad[lay.mlp_w1..lay.mlp_w1 + hm * d]);

    let mut dx = vec![0.0; n * d];
    acc_input_grad(&dm1, w(p, lay.mlp_w1, hm * d), 1, hm, d, &mut dx[..d]);

    for (lo, t) in lay.layers.iter().zip(&trace.layers).rev() {
        dx = layer_backward(p, lo, &c, t, n, &dx, grad);
    }

    for (i, v) in dx[..d].iter().enumerate() {
        grad[lay.eye + i] += v;
    }
    for (i, v) in dx.iter().enumerate() {
        grad[lay.pos + i] += v;
    }
    Matrix::from_vec(n - 1, d, dx[d..].to_vec())
}

fn layer_backward(
    p: &[f64],
    lo: &LayerOffsets,
    c: &super::HeadConfig,
    t: &LayerTrace,
    n: usize,
    dout: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let d = c.d;
    let f = c.ffn_hidden;
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dr2 = {
        let (dg, db) = split_pair(grad, lo.ln2_g, lo.ln2_b, d);
        layer_norm_backward(dout, &t.xhat2, &t.rstd2, d, w(p, lo.ln2_g, d), dg, db)
    };
    // Residual: dY1 = dR2 + (FFN path).
    acc_bias_grad(&dr2, d, &mut grad[lo.ff_b2..lo.ff_b2 + d]);
    acc_weight_grad(&dr2, &t.gf, n, d, f, &mut grad[lo.ff_w2..lo.ff_w2 + d * f]);
    let mut df1 = vec![0.0; n * f];
    acc_input_grad(&dr2, w(p, lo.ff_w2, d * f), n, d, f, &mut df1);
    for (g, v) in df1.iter_mut().zip(&t.f1) {
        *g *= gelu_grad(*v);
    }
    acc_bias_grad(&df1, f, &mut grad[lo.ff_b1..lo.ff_b1 + f]);
    acc_weight_grad(&df1, &t.y1, n, f, d, &mut grad[lo.ff_w1..lo.ff_w1 + f * d]);
    acc_input_grad(&df1, w(p, lo.ff_w1, f * d), n, f, d, &mut dr2);
    let dy1 = dr2;

    let dr1 = {
        let (dg, db) = split_pair(grad, lo.ln1_g, lo.ln1_b, d);
        layer_norm_backward(&dy1, &t.xhat1, &t.rstd1, d, w(p, lo.ln1_g, d), dg, db)
    };
    // Residual: dX = dR1 + (attention path).
    acc_weight_grad(&dr1, &t.z, n, d, d, &mut grad[lo.wo..lo.wo + d * d]);
    let mut dz = vec![0.0; n * d];
    acc_input_grad(&dr1, w(p, lo.wo, d * d), n, d, d, &mut dz);

    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut da = vec![0.0; n];
    for h in 0..c.heads {
        let base = h * dh;
        for i in 0..n {
            let a = &t.attn[(h * n + i) * n..(h * n + i + 1) * n];
            let dzi = &dz[i * d + base..i * d + base + dh];
            let mut dot = 0.0;
            for j in 0..n {
                let vj = &t.v[j * d + base..j * d + base + dh];
                da[j] = dzi.iter().zip(vj).map(|(x, y)| x * y).sum();
                dot += da[j] * a[j];
                let dvj = &mut dv[j * d + base..j * d + base + dh];
                for (g, z) in dvj.iter_mut().zip(dzi) {
                    *g += a[j] * z;
                }
            }
            for j in 0..n {
                let ds = a[j] * (da[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for cc in 0..dh {
                    dq[i * d + base + cc] += ds * t.k[j * d + base + cc];
                    dk[j * d + base + cc] += ds * t.q[i * d + base + cc];
                }
            }
        }
    }
    let mut dx = dr1;
    for (off, g) in [(lo.wq, &dq), (lo.wk, &dk), (lo.wv, &dv)] {
        acc_weight_grad(g, &t.x, n, d, d, &mut grad[off..off + d * d]);
        acc_input_grad(g, w(p, off, d * d), n, d, d, &mut dx);
    }
    dx
}

/// Two disjoint `len`-sized windows of `grad`, `a` before `b`.
fn split_pair(grad: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}
