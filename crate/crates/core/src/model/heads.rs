//! Fusion heads: aggregate a variable number of per-view embeddings into
//! one study-level prediction.
//!
//! Three variants:
//! - mean: elementwise average of the embeddings (no fusion parameters)
//! - recurrent: single-layer LSTM, summary = final hidden state
//! - attention: transformer encoder without positional encoding, summary =
//!   mean over output tokens (keeps the head order-free)
//!
//! Every head ends in an affine map to one real, so a head is a function
//! embeddings -> scalar with an explicit backward pass.

use ndarray::{Array1, Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use super::nn::{init_uniform, init_xavier, sigmoid, ParamLayout, ParamRef};
use crate::error::Error;
use crate::Result;

fn mat<'a>(params: &'a [f64], r: ParamRef, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), r.slice(params)).expect("param matrix shape")
}

fn add_into(grads: &mut [f64], r: ParamRef, values: &Array2<f64>) {
    let g = r.slice_mut(grads);
    for (gi, vi) in g.iter_mut().zip(values.iter()) {
        *gi += vi;
    }
}

fn add_rows_into(grads: &mut [f64], r: ParamRef, values: &Array2<f64>) {
    let g = r.slice_mut(grads);
    for row in values.rows() {
        for (gi, vi) in g.iter_mut().zip(row.iter()) {
            *gi += vi;
        }
    }
}

/// x [n, in] * W^T [in, out] + b -> [n, out]
fn linear(params: &[f64], w: ParamRef, b: ParamRef, x: &Array2<f64>, out_dim: usize) -> Array2<f64> {
    let in_dim = x.ncols();
    let mut y = x.dot(&mat(params, w, out_dim, in_dim).t());
    let bias = b.slice(params);
    for mut row in y.rows_mut() {
        for (v, bv) in row.iter_mut().zip(bias.iter()) {
            *v += bv;
        }
    }
    y
}

/// Backward of [`linear`]: accumulates dW, db, returns dx.
fn linear_backward(
    params: &[f64],
    w: ParamRef,
    b: ParamRef,
    x: &Array2<f64>,
    d_y: &Array2<f64>,
    out_dim: usize,
    grads: &mut [f64],
) -> Array2<f64> {
    add_into(grads, w, &d_y.t().dot(x));
    add_rows_into(grads, b, d_y);
    d_y.dot(&mat(params, w, out_dim, x.ncols()))
}

// ---------------------------------------------------------------------------
// Mean head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MeanHead {
    pub embed_dim: usize,
    out_w: ParamRef,
    out_b: ParamRef,
}

#[derive(Debug, Clone)]
pub struct MeanCache {
    fused: Array1<f64>,
    n_tokens: usize,
}

impl MeanHead {
    pub fn new(layout: &mut ParamLayout, embed_dim: usize) -> Self {
        MeanHead {
            embed_dim,
            out_w: layout.push("output.weight", &[embed_dim]),
            out_b: layout.push("output.bias", &[1]),
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut ChaCha8Rng) {
        init_xavier(rng, self.out_w.slice_mut(params), self.embed_dim, 1);
        self.out_b.slice_mut(params).fill(0.0);
    }

    pub fn fuse(&self, embs: &Array2<f64>) -> Array1<f64> {
        let n = embs.nrows() as f64;
        embs.t().dot(&Array1::from_elem(embs.nrows(), 1.0 / n))
    }

    pub fn forward(&self, params: &[f64], embs: &Array2<f64>) -> (f64, MeanCache) {
        let fused = self.fuse(embs);
        let w = self.out_w.slice(params);
        let y = fused
            .iter()
            .zip(w)
            .map(|(f, wv)| f * wv)
            .sum::<f64>()
            + self.out_b.slice(params)[0];
        (
            y,
            MeanCache {
                fused,
                n_tokens: embs.nrows(),
            },
        )
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &MeanCache,
        d_y: f64,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let w = self.out_w.slice(params);
        let g_w = self.out_w.slice_mut(grads);
        for (g, f) in g_w.iter_mut().zip(cache.fused.iter()) {
            *g += d_y * f;
        }
        self.out_b.slice_mut(grads)[0] += d_y;
        let n = cache.n_tokens;
        let mut d_embs = Array2::zeros((n, self.embed_dim));
        for mut row in d_embs.rows_mut() {
            for (d, wv) in row.iter_mut().zip(w.iter()) {
                *d = d_y * wv / n as f64;
            }
        }
        d_embs
    }
}

// ---------------------------------------------------------------------------
// Recurrent (LSTM) head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LstmHead {
    pub input_dim: usize,
    pub hidden_dim: usize,
    w_ih: ParamRef,
    w_hh: ParamRef,
    bias: ParamRef,
    out_w: ParamRef,
    out_b: ParamRef,
}

#[derive(Debug, Clone)]
struct LstmStep {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    o: Array1<f64>,
    c: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: Vec<LstmStep>,
    h_final: Array1<f64>,
}

impl LstmHead {
    pub fn new(layout: &mut ParamLayout, input_dim: usize, hidden_dim: usize) -> Self {
        LstmHead {
            input_dim,
            hidden_dim,
            w_ih: layout.push("lstm.weight_ih", &[4 * hidden_dim, input_dim]),
            w_hh: layout.push("lstm.weight_hh", &[4 * hidden_dim, hidden_dim]),
            bias: layout.push("lstm.bias", &[4 * hidden_dim]),
            out_w: layout.push("output.weight", &[hidden_dim]),
            out_b: layout.push("output.bias", &[1]),
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (self.hidden_dim as f64).sqrt();
        init_uniform(rng, self.w_ih.slice_mut(params), bound);
        init_uniform(rng, self.w_hh.slice_mut(params), bound);
        init_uniform(rng, self.bias.slice_mut(params), bound);
        init_xavier(rng, self.out_w.slice_mut(params), self.hidden_dim, 1);
        self.out_b.slice_mut(params).fill(0.0);
    }

    fn run(&self, params: &[f64], embs: &Array2<f64>) -> LstmCache {
        let h_dim = self.hidden_dim;
        let w_ih = mat(params, self.w_ih, 4 * h_dim, self.input_dim);
        let w_hh = mat(params, self.w_hh, 4 * h_dim, h_dim);
        let bias = self.bias.slice(params);
        let mut h = Array1::zeros(h_dim);
        let mut c = Array1::zeros(h_dim);
        let mut steps = Vec::with_capacity(embs.nrows());
        for x_row in embs.outer_iter() {
            let x = x_row.to_owned();
            let z = w_ih.dot(&x) + w_hh.dot(&h);
            let gate = |k: usize, j: usize| z[k * h_dim + j] + bias[k * h_dim + j];
            let i_g = Array1::from_iter((0..h_dim).map(|j| sigmoid(gate(0, j))));
            let f_g = Array1::from_iter((0..h_dim).map(|j| sigmoid(gate(1, j))));
            let g_g = Array1::from_iter((0..h_dim).map(|j| gate(2, j).tanh()));
            let o_g = Array1::from_iter((0..h_dim).map(|j| sigmoid(gate(3, j))));
            let c_new = &f_g * &c + &i_g * &g_g;
            let h_new = &o_g * &c_new.mapv(f64::tanh);
            steps.push(LstmStep {
                x,
                h_prev: h,
                c_prev: c,
                i: i_g,
                f: f_g,
                g: g_g,
                o: o_g,
                c: c_new.clone(),
            });
            h = h_new;
            c = c_new;
        }
        LstmCache { steps, h_final: h }
    }

    pub fn fuse(&self, params: &[f64], embs: &Array2<f64>) -> Array1<f64> {
        self.run(params, embs).h_final
    }

    pub fn forward(&self, params: &[f64], embs: &Array2<f64>) -> (f64, LstmCache) {
        let cache = self.run(params, embs);
        let w = self.out_w.slice(params);
        let y = cache
            .h_final
            .iter()
            .zip(w)
            .map(|(h, wv)| h * wv)
            .sum::<f64>()
            + self.out_b.slice(params)[0];
        (y, cache)
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &LstmCache,
        d_y: f64,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let h_dim = self.hidden_dim;
        let w = self.out_w.slice(params);
        {
            let g_w = self.out_w.slice_mut(grads);
            for (g, h) in g_w.iter_mut().zip(cache.h_final.iter()) {
                *g += d_y * h;
            }
        }
        self.out_b.slice_mut(grads)[0] += d_y;

        let w_ih = mat(params, self.w_ih, 4 * h_dim, self.input_dim).to_owned();
        let w_hh = mat(params, self.w_hh, 4 * h_dim, h_dim).to_owned();
        let mut d_h: Array1<f64> = Array1::from_iter(w.iter().map(|wv| d_y * wv));
        let mut d_c: Array1<f64> = Array1::zeros(h_dim);
        let n = cache.steps.len();
        let mut d_embs = Array2::zeros((n, self.input_dim));

        for (t, step) in cache.steps.iter().enumerate().rev() {
            let tanh_c = step.c.mapv(f64::tanh);
            let d_o = &d_h * &tanh_c;
            let d_c_total = &d_c + &(&d_h * &step.o * tanh_c.mapv(|v| 1.0 - v * v));
            let d_f = &d_c_total * &step.c_prev;
            let d_i = &d_c_total * &step.g;
            let d_g = &d_c_total * &step.i;
            let d_c_prev = &d_c_total * &step.f;

            let mut d_z = Array1::zeros(4 * h_dim);
            for j in 0..h_dim {
                d_z[j] = d_i[j] * step.i[j] * (1.0 - step.i[j]);
                d_z[h_dim + j] = d_f[j] * step.f[j] * (1.0 - step.f[j]);
                d_z[2 * h_dim + j] = d_g[j] * (1.0 - step.g[j] * step.g[j]);
                d_z[3 * h_dim + j] = d_o[j] * step.o[j] * (1.0 - step.o[j]);
            }

            {
                let g_ih = self.w_ih.slice_mut(grads);
                for r in 0..4 * h_dim {
                    for cix in 0..self.input_dim {
                        g_ih[r * self.input_dim + cix] += d_z[r] * step.x[cix];
                    }
                }
            }
            {
                let g_hh = self.w_hh.slice_mut(grads);
                for r in 0..4 * h_dim {
                    for cix in 0..h_dim {
                        g_hh[r * h_dim + cix] += d_z[r] * step.h_prev[cix];
                    }
                }
            }
            {
                let g_b = self.bias.slice_mut(grads);
                for r in 0..4 * h_dim {
                    g_b[r] += d_z[r];
                }
            }

            let d_x = w_ih.t().dot(&d_z);
            d_embs.row_mut(t).assign(&d_x);
            d_h = w_hh.t().dot(&d_z);
            d_c = d_c_prev;
        }
        d_embs
    }
}

// ---------------------------------------------------------------------------
// Attention head
// ---------------------------------------------------------------------------

/// Attention head hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttnParams {
    pub proj_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for AttnParams {
    fn default() -> Self {
        AttnParams {
            proj_dim: 256,
            layers: 2,
            heads: 4,
            ffn_dim: 512,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    g: ParamRef,
    b: ParamRef,
    dim: usize,
}

#[derive(Debug, Clone)]
struct LnCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    fn new(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        LayerNorm {
            g: layout.push(format!("{name}.weight"), &[dim]),
            b: layout.push(format!("{name}.bias"), &[dim]),
            dim,
        }
    }

    fn init(&self, params: &mut [f64]) {
        self.g.slice_mut(params).fill(1.0);
        self.b.slice_mut(params).fill(0.0);
    }

    fn forward(&self, params: &[f64], x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let n = x.nrows();
        let d = self.dim as f64;
        let gamma = self.g.slice(params);
        let beta = self.b.slice(params);
        let mut y = Array2::zeros(x.raw_dim());
        let mut x_hat = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(n);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = istd;
            for c in 0..self.dim {
                let xh = (x[[r, c]] - mean) * istd;
                x_hat[[r, c]] = xh;
                y[[r, c]] = gamma[c] * xh + beta[c];
            }
        }
        (y, LnCache { x_hat, inv_std })
    }

    fn backward(
        &self,
        params: &[f64],
        cache: &LnCache,
        d_y: &Array2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let n = d_y.nrows();
        let d = self.dim as f64;
        let gamma = self.g.slice(params).to_vec();
        let mut d_x = Array2::zeros(d_y.raw_dim());
        for r in 0..n {
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for c in 0..self.dim {
                let dxh = d_y[[r, c]] * gamma[c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * cache.x_hat[[r, c]];
            }
            for c in 0..self.dim {
                let dxh = d_y[[r, c]] * gamma[c];
                d_x[[r, c]] = cache.inv_std[r]
                    * (dxh - sum_dxh / d - cache.x_hat[[r, c]] * sum_dxh_xh / d);
            }
        }
        let mut g_g = vec![0.0; self.dim];
        let mut g_b = vec![0.0; self.dim];
        for r in 0..n {
            for c in 0..self.dim {
                g_g[c] += d_y[[r, c]] * cache.x_hat[[r, c]];
                g_b[c] += d_y[[r, c]];
            }
        }
        for (g, v) in self.g.slice_mut(grads).iter_mut().zip(&g_g) {
            *g += v;
        }
        for (g, v) in self.b.slice_mut(grads).iter_mut().zip(&g_b) {
            *g += v;
        }
        d_x
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    wq: ParamRef,
    bq: ParamRef,
    wk: ParamRef,
    bk: ParamRef,
    wv: ParamRef,
    bv: ParamRef,
    wo: ParamRef,
    bo: ParamRef,
    ln2: LayerNorm,
    w1: ParamRef,
    b1: ParamRef,
    w2: ParamRef,
    b2: ParamRef,
}

#[derive(Debug, Clone)]
struct EncoderCache {
    ln1: LnCache,
    u: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>, // per-head softmax matrices [n, n]
    concat: Array2<f64>,
    ln2: LnCache,
    u2: Array2<f64>,
    f1: Array2<f64>, // pre-activation FFN hidden
}

/// Transformer encoder over the token set, mean-pooled; no positional
/// encoding, so the output is permutation-invariant.
#[derive(Debug, Clone)]
pub struct AttnHead {
    pub input_dim: usize,
    pub cfg: AttnParams,
    in_w: ParamRef,
    in_b: ParamRef,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    out_w: ParamRef,
    out_b: ParamRef,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    embs_in: Array2<f64>,
    encoders: Vec<EncoderCache>,
    final_ln: LnCache,
    xf: Array2<f64>,
    pooled: Array1<f64>,
}

impl AttnHead {
    pub fn new(layout: &mut ParamLayout, input_dim: usize, cfg: AttnParams) -> Self {
        assert!(
            cfg.proj_dim % cfg.heads == 0,
            "proj_dim must divide evenly into heads"
        );
        let p = cfg.proj_dim;
        let in_w = layout.push("in_proj.weight", &[p, input_dim]);
        let in_b = layout.push("in_proj.bias", &[p]);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(EncoderLayer {
                ln1: LayerNorm::new(layout, &format!("layer{l}.ln1"), p),
                wq: layout.push(format!("layer{l}.attn.q.weight"), &[p, p]),
                bq: layout.push(format!("layer{l}.attn.q.bias"), &[p]),
                wk: layout.push(format!("layer{l}.attn.k.weight"), &[p, p]),
                bk: layout.push(format!("layer{l}.attn.k.bias"), &[p]),
                wv: layout.push(format!("layer{l}.attn.v.weight"), &[p, p]),
                bv: layout.push(format!("layer{l}.attn.v.bias"), &[p]),
                wo: layout.push(format!("layer{l}.attn.out.weight"), &[p, p]),
                bo: layout.push(format!("layer{l}.attn.out.bias"), &[p]),
                ln2: LayerNorm::new(layout, &format!("layer{l}.ln2"), p),
                w1: layout.push(format!("layer{l}.ffn.w1.weight"), &[cfg.ffn_dim, p]),
                b1: layout.push(format!("layer{l}.ffn.w1.bias"), &[cfg.ffn_dim]),
                w2: layout.push(format!("layer{l}.ffn.w2.weight"), &[p, cfg.ffn_dim]),
                b2: layout.push(format!("layer{l}.ffn.w2.bias"), &[p]),
            });
        }
        let final_ln = LayerNorm::new(layout, "final_ln", p);
        let out_w = layout.push("output.weight", &[p]);
        let out_b = layout.push("output.bias", &[1]);
        AttnHead {
            input_dim,
            cfg,
            in_w,
            in_b,
            layers,
            final_ln,
            out_w,
            out_b,
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut ChaCha8Rng) {
        let p = self.cfg.proj_dim;
        init_xavier(rng, self.in_w.slice_mut(params), self.input_dim, p);
        self.in_b.slice_mut(params).fill(0.0);
        for layer in &self.layers {
            layer.ln1.init(params);
            layer.ln2.init(params);
            for w in [layer.wq, layer.wk, layer.wv, layer.wo] {
                init_xavier(rng, w.slice_mut(params), p, p);
            }
            for b in [layer.bq, layer.bk, layer.bv, layer.bo] {
                b.slice_mut(params).fill(0.0);
            }
            init_xavier(rng, layer.w1.slice_mut(params), p, self.cfg.ffn_dim);
            layer.b1.slice_mut(params).fill(0.0);
            init_xavier(rng, layer.w2.slice_mut(params), self.cfg.ffn_dim, p);
            layer.b2.slice_mut(params).fill(0.0);
        }
        self.final_ln.init(params);
        init_xavier(rng, self.out_w.slice_mut(params), p, 1);
        self.out_b.slice_mut(params).fill(0.0);
    }

    fn run(&self, params: &[f64], embs: &Array2<f64>) -> AttnCache {
        let p = self.cfg.proj_dim;
        let nh = self.cfg.heads;
        let dh = p / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = embs.nrows();

        let mut x = linear(params, self.in_w, self.in_b, embs, p);
        let mut encoders = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (u, ln1_cache) = layer.ln1.forward(params, &x);
            let q = linear(params, layer.wq, layer.bq, &u, p);
            let k = linear(params, layer.wk, layer.bk, &u, p);
            let v = linear(params, layer.wv, layer.bv, &u, p);
            let mut concat = Array2::zeros((n, p));
            let mut attn = Vec::with_capacity(nh);
            for h in 0..nh {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(ndarray::s![.., cols.clone()]);
                let kh = k.slice(ndarray::s![.., cols.clone()]);
                let vh = v.slice(ndarray::s![.., cols.clone()]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|s| s * scale);
                // Row-wise softmax with max-shift.
                for mut row in scores.rows_mut() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= sum;
                    }
                }
                let head_out = scores.dot(&vh);
                concat
                    .slice_mut(ndarray::s![.., cols])
                    .assign(&head_out);
                attn.push(scores);
            }
            let attn_out = linear(params, layer.wo, layer.bo, &concat, p);
            let x_mid = &x + &attn_out;
            let (u2, ln2_cache) = layer.ln2.forward(params, &x_mid);
            let f1 = linear(params, layer.w1, layer.b1, &u2, self.cfg.ffn_dim);
            let a = f1.mapv(|v| v.max(0.0));
            let ffn = linear(params, layer.w2, layer.b2, &a, p);
            x = &x_mid + &ffn;
            encoders.push(EncoderCache {
                ln1: ln1_cache,
                u,
                q,
                k,
                v,
                attn,
                concat,
                ln2: ln2_cache,
                u2,
                f1,
            });
        }
        let (xf, final_ln) = self.final_ln.forward(params, &x);
        let pooled = xf.t().dot(&Array1::from_elem(n, 1.0 / n as f64));
        AttnCache {
            embs_in: embs.clone(),
            encoders,
            final_ln,
            xf,
            pooled,
        }
    }

    pub fn fuse(&self, params: &[f64], embs: &Array2<f64>) -> Array1<f64> {
        self.run(params, embs).pooled
    }

    pub fn forward(&self, params: &[f64], embs: &Array2<f64>) -> (f64, AttnCache) {
        let cache = self.run(params, embs);
        let w = self.out_w.slice(params);
        let y = cache
            .pooled
            .iter()
            .zip(w)
            .map(|(f, wv)| f * wv)
            .sum::<f64>()
            + self.out_b.slice(params)[0];
        (y, cache)
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &AttnCache,
        d_y: f64,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let p = self.cfg.proj_dim;
        let nh = self.cfg.heads;
        let dh = p / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = cache.xf.nrows();

        {
            let g_w = self.out_w.slice_mut(grads);
            for (g, f) in g_w.iter_mut().zip(cache.pooled.iter()) {
                *g += d_y * f;
            }
            self.out_b.slice_mut(grads)[0] += d_y;
        }
        let w_out = self.out_w.slice(params);
        // Mean pooling spreads the gradient uniformly over tokens.
        let mut d_xf = Array2::zeros((n, p));
        for mut row in d_xf.rows_mut() {
            for (d, wv) in row.iter_mut().zip(w_out.iter()) {
                *d = d_y * wv / n as f64;
            }
        }
        let mut d_x = self.final_ln.backward(params, &cache.final_ln, &d_xf, grads);

        for (layer, enc) in self.layers.iter().zip(cache.encoders.iter()).rev() {
            // FFN branch: x = x_mid + ffn(ln2(x_mid))
            let d_ffn = d_x.clone();
            let a = enc.f1.mapv(|v| v.max(0.0));
            let mut d_a = linear_backward(params, layer.w2, layer.b2, &a, &d_ffn, p, grads);
            ndarray::Zip::from(&mut d_a).and(&enc.f1).for_each(|d, &f| {
                if f <= 0.0 {
                    *d = 0.0;
                }
            });
            let d_u2 =
                linear_backward(params, layer.w1, layer.b1, &enc.u2, &d_a, self.cfg.ffn_dim, grads);
            let d_x_mid = &d_x + &layer.ln2.backward(params, &enc.ln2, &d_u2, grads);

            // Attention branch: x_mid = x_in + attn_out(ln1(x_in))
            let d_attn_out = d_x_mid.clone();
            let d_concat =
                linear_backward(params, layer.wo, layer.bo, &enc.concat, &d_attn_out, p, grads);
            let mut d_q = Array2::zeros((n, p));
            let mut d_k = Array2::zeros((n, p));
            let mut d_v = Array2::zeros((n, p));
            for h in 0..nh {
                let cols = h * dh..(h + 1) * dh;
                let d_head = d_concat.slice(ndarray::s![.., cols.clone()]).to_owned();
                let a_mat = &enc.attn[h];
                let vh = enc.v.slice(ndarray::s![.., cols.clone()]).to_owned();
                let qh = enc.q.slice(ndarray::s![.., cols.clone()]).to_owned();
                let kh = enc.k.slice(ndarray::s![.., cols.clone()]).to_owned();
                let d_vh = a_mat.t().dot(&d_head);
                let d_a_mat = d_head.dot(&vh.t());
                // Softmax backward per row.
                let mut d_scores = Array2::zeros((n, n));
                for r in 0..n {
                    let dot: f64 = (0..n).map(|c| d_a_mat[[r, c]] * a_mat[[r, c]]).sum();
                    for c in 0..n {
                        d_scores[[r, c]] = a_mat[[r, c]] * (d_a_mat[[r, c]] - dot);
                    }
                }
                d_scores.mapv_inplace(|v| v * scale);
                let d_qh = d_scores.dot(&kh);
                let d_kh = d_scores.t().dot(&qh);
                d_q.slice_mut(ndarray::s![.., cols.clone()]).assign(&d_qh);
                d_k.slice_mut(ndarray::s![.., cols.clone()]).assign(&d_kh);
                d_v.slice_mut(ndarray::s![.., cols]).assign(&d_vh);
            }
            let d_u = linear_backward(params, layer.wq, layer.bq, &enc.u, &d_q, p, grads)
                + linear_backward(params, layer.wk, layer.bk, &enc.u, &d_k, p, grads)
                + linear_backward(params, layer.wv, layer.bv, &enc.u, &d_v, p, grads);
            d_x = &d_x_mid + &layer.ln1.backward(params, &enc.ln1, &d_u, grads);
        }

        linear_backward(params, self.in_w, self.in_b, &cache.embs_in, &d_x, p, grads)
    }
}

// ---------------------------------------------------------------------------
// Head dispatch
// ---------------------------------------------------------------------------

/// A fusion head plus its output affine, over a flat parameter vector.
#[derive(Debug, Clone)]
pub enum FusionHead {
    Mean(MeanHead),
    Recurrent(LstmHead),
    Attention(AttnHead),
}

/// Per-variant cache for the backward pass.
#[derive(Debug, Clone)]
pub enum HeadCache {
    Mean(MeanCache),
    Recurrent(LstmCache),
    Attention(AttnCache),
}

impl FusionHead {
    pub fn init(&self, params: &mut [f64], rng: &mut ChaCha8Rng) {
        match self {
            FusionHead::Mean(h) => h.init(params, rng),
            FusionHead::Recurrent(h) => h.init(params, rng),
            FusionHead::Attention(h) => h.init(params, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FusionHead::Mean(h) => h.embed_dim,
            FusionHead::Recurrent(h) => h.input_dim,
            FusionHead::Attention(h) => h.input_dim,
        }
    }

    /// Dimension of the fused vector (before the output affine).
    pub fn fused_dim(&self) -> usize {
        match self {
            FusionHead::Mean(h) => h.embed_dim,
            FusionHead::Recurrent(h) => h.hidden_dim,
            FusionHead::Attention(h) => h.cfg.proj_dim,
        }
    }

    fn check_input(&self, embs: &Array2<f64>) -> Result<()> {
        if embs.nrows() == 0 {
            return Err(Error::ShapeMismatch("fuse of an empty embedding list".into()));
        }
        if embs.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "embedding dim {} does not match head input dim {}",
                embs.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Fused vector: mean -> elementwise mean; recurrent -> final hidden
    /// state; attention -> mean over encoder output tokens.
    pub fn fuse(&self, params: &[f64], embs: &Array2<f64>) -> Result<Array1<f64>> {
        self.check_input(embs)?;
        Ok(match self {
            FusionHead::Mean(h) => h.fuse(embs),
            FusionHead::Recurrent(h) => h.fuse(params, embs),
            FusionHead::Attention(h) => h.fuse(params, embs),
        })
    }

    /// Scalar prediction with cache for the backward pass.
    pub fn forward(&self, params: &[f64], embs: &Array2<f64>) -> Result<(f64, HeadCache)> {
        self.check_input(embs)?;
        Ok(match self {
            FusionHead::Mean(h) => {
                let (y, c) = h.forward(params, embs);
                (y, HeadCache::Mean(c))
            }
            FusionHead::Recurrent(h) => {
                let (y, c) = h.forward(params, embs);
                (y, HeadCache::Recurrent(c))
            }
            FusionHead::Attention(h) => {
                let (y, c) = h.forward(params, embs);
                (y, HeadCache::Attention(c))
            }
        })
    }

    /// Backward from the scalar gradient; returns per-token embedding
    /// gradients.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &HeadCache,
        d_y: f64,
        grads: &mut [f64],
    ) -> Array2<f64> {
        match (self, cache) {
            (FusionHead::Mean(h), HeadCache::Mean(c)) => h.backward(params, c, d_y, grads),
            (FusionHead::Recurrent(h), HeadCache::Recurrent(c)) => {
                h.backward(params, c, d_y, grads)
            }
            (FusionHead::Attention(h), HeadCache::Attention(c)) => {
                h.backward(params, c, d_y, grads)
            }
            _ => unreachable!("cache variant does not match head variant"),
        }
    }
}
