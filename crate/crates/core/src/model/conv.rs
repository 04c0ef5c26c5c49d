//! 3D convolution, batch normalization and pooling with explicit
//! forward/backward passes.
//!
//! Convolutions run as im2col + GEMM, one output time-slice at a time so
//! the patch matrix stays small. Inputs and activations are C x T x H x W.

use ndarray::{Array1, Array2, Array4, ArrayView2};

use super::nn::{init_kaiming, ParamLayout, ParamRef};

/// 3D convolution layer. Weights are stored as a row-major
/// `[out_c, in_c * kt * kh * kw]` matrix.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: ParamRef,
    pub b: Option<ParamRef>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
        bias: bool,
    ) -> Self {
        let ck = in_c * kernel.0 * kernel.1 * kernel.2;
        let w = layout.push(format!("{name}.weight"), &[out_c, ck]);
        let b = bias.then(|| layout.push(format!("{name}.bias"), &[out_c]));
        Conv3d {
            w,
            b,
            in_c,
            out_c,
            kernel,
            stride,
            padding,
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut rand_chacha::ChaCha8Rng) {
        let fan_in = self.in_c * self.kernel.0 * self.kernel.1 * self.kernel.2;
        init_kaiming(rng, self.w.slice_mut(params), fan_in);
        if let Some(b) = self.b {
            b.slice_mut(params).fill(0.0);
        }
    }

    pub fn out_shape(&self, in_shape: (usize, usize, usize, usize)) -> (usize, usize, usize, usize) {
        let (_, t, h, w) = in_shape;
        let conv_dim = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p - k) / s + 1;
        (
            self.out_c,
            conv_dim(t, self.kernel.0, self.stride.0, self.padding.0),
            conv_dim(h, self.kernel.1, self.stride.1, self.padding.1),
            conv_dim(w, self.kernel.2, self.stride.2, self.padding.2),
        )
    }

    /// Patch matrix for one output time index: rows = out_h * out_w,
    /// cols = in_c * kt * kh * kw.
    fn im2col_slice(&self, x: &Array4<f64>, t_out: usize, out_h: usize, out_w: usize) -> Array2<f64> {
        let (_, in_t, in_h, in_w) = x.dim();
        let (kt, kh, kw) = self.kernel;
        let (st, sh, sw) = self.stride;
        let (pt, ph, pw) = self.padding;
        let ck = self.in_c * kt * kh * kw;
        let mut patches = Array2::zeros((out_h * out_w, ck));
        for oy in 0..out_h {
            for ox in 0..out_w {
                let row = oy * out_w + ox;
                let mut col = 0;
                for c in 0..self.in_c {
                    for dt in 0..kt {
                        let t_in = (t_out * st + dt) as isize - pt as isize;
                        for dy in 0..kh {
                            let y_in = (oy * sh + dy) as isize - ph as isize;
                            for dx in 0..kw {
                                let x_in = (ox * sw + dx) as isize - pw as isize;
                                if t_in >= 0
                                    && (t_in as usize) < in_t
                                    && y_in >= 0
                                    && (y_in as usize) < in_h
                                    && x_in >= 0
                                    && (x_in as usize) < in_w
                                {
                                    patches[[row, col]] =
                                        x[[c, t_in as usize, y_in as usize, x_in as usize]];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        patches
    }

    pub fn forward(&self, params: &[f64], x: &Array4<f64>) -> Array4<f64> {
        let (out_c, out_t, out_h, out_w) = self.out_shape(x.dim());
        let ck = self.in_c * self.kernel.0 * self.kernel.1 * self.kernel.2;
        let w_mat = ArrayView2::from_shape((out_c, ck), self.w.slice(params)).expect("w shape");
        let mut out = Array4::zeros((out_c, out_t, out_h, out_w));
        for t in 0..out_t {
            let patches = self.im2col_slice(x, t, out_h, out_w);
            let slice = patches.dot(&w_mat.t()); // [out_h*out_w, out_c]
            for o in 0..out_c {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        out[[o, t, oy, ox]] = slice[[oy * out_w + ox, o]];
                    }
                }
            }
        }
        if let Some(b) = self.b {
            let bias = b.slice(params);
            for o in 0..out_c {
                out.index_axis_mut(ndarray::Axis(0), o)
                    .mapv_inplace(|v| v + bias[o]);
            }
        }
        out
    }

    /// Backward pass. Accumulates weight/bias gradients into `grads`
    /// (same layout as `params`) and returns the input gradient.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Array4<f64>,
        d_out: &Array4<f64>,
        grads: &mut [f64],
    ) -> Array4<f64> {
        let (out_c, out_t, out_h, out_w) = d_out.dim();
        let (_, in_t, in_h, in_w) = x.dim();
        let (kt, kh, kw) = self.kernel;
        let (st, sh, sw) = self.stride;
        let (pt, ph, pw) = self.padding;
        let ck = self.in_c * kt * kh * kw;
        let w_mat = ArrayView2::from_shape((out_c, ck), self.w.slice(params)).expect("w shape");
        let mut d_w = Array2::<f64>::zeros((out_c, ck));
        let mut d_x = Array4::<f64>::zeros(x.dim());

        for t_out in 0..out_t {
            let mut d_slice = Array2::zeros((out_h * out_w, out_c));
            for o in 0..out_c {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        d_slice[[oy * out_w + ox, o]] = d_out[[o, t_out, oy, ox]];
                    }
                }
            }
            let patches = self.im2col_slice(x, t_out, out_h, out_w);
            d_w += &d_slice.t().dot(&patches);
            let d_patches = d_slice.dot(&w_mat); // [out_h*out_w, ck]
            // col2im scatter-add.
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let row = oy * out_w + ox;
                    let mut col = 0;
                    for c in 0..self.in_c {
                        for dt in 0..kt {
                            let t_in = (t_out * st + dt) as isize - pt as isize;
                            for dy in 0..kh {
                                let y_in = (oy * sh + dy) as isize - ph as isize;
                                for dx in 0..kw {
                                    let x_in = (ox * sw + dx) as isize - pw as isize;
                                    if t_in >= 0
                                        && (t_in as usize) < in_t
                                        && y_in >= 0
                                        && (y_in as usize) < in_h
                                        && x_in >= 0
                                        && (x_in as usize) < in_w
                                    {
                                        d_x[[c, t_in as usize, y_in as usize, x_in as usize]] +=
                                            d_patches[[row, col]];
                                    }
                                    col += 1;
                                }
                            }
                        }
                    }
                }
            }
        }

        let g_w = self.w.slice_mut(grads);
        for (g, d) in g_w.iter_mut().zip(d_w.iter()) {
            *g += d;
        }
        if let Some(b) = self.b {
            let g_b = b.slice_mut(grads);
            for o in 0..out_c {
                let mut sum = 0.0;
                for t in 0..out_t {
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            sum += d_out[[o, t, oy, ox]];
                        }
                    }
                }
                g_b[o] += sum;
            }
        }
        d_x
    }
}

/// Per-channel batch normalization over the (T, H, W) extent of one clip.
///
/// Training mode normalizes with the clip's own statistics and updates the
/// running buffers; eval mode uses the running statistics. Buffers live in a
/// separate vector with the same handle scheme as parameters.
#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub gamma: ParamRef,
    pub beta: ParamRef,
    pub running_mean: ParamRef,
    pub running_var: ParamRef,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

/// Saved state for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Array4<f64>,
    pub inv_std: Array1<f64>,
}

impl BatchNorm3d {
    pub fn new(
        layout: &mut ParamLayout,
        buffers: &mut ParamLayout,
        name: &str,
        channels: usize,
    ) -> Self {
        BatchNorm3d {
            gamma: layout.push(format!("{name}.weight"), &[channels]),
            beta: layout.push(format!("{name}.bias"), &[channels]),
            running_mean: buffers.push(format!("{name}.running_mean"), &[channels]),
            running_var: buffers.push(format!("{name}.running_var"), &[channels]),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn init(&self, params: &mut [f64], buffers: &mut [f64]) {
        self.gamma.slice_mut(params).fill(1.0);
        self.beta.slice_mut(params).fill(0.0);
        self.running_mean.slice_mut(buffers).fill(0.0);
        self.running_var.slice_mut(buffers).fill(1.0);
    }

    pub fn forward_train(
        &self,
        params: &[f64],
        buffers: &mut [f64],
        x: &Array4<f64>,
    ) -> (Array4<f64>, BnCache) {
        let (c, t, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let n = (t * h * w) as f64;
        let gamma = self.gamma.slice(params).to_vec();
        let beta = self.beta.slice(params).to_vec();
        let mut y = Array4::zeros(x.dim());
        let mut x_hat = Array4::zeros(x.dim());
        let mut inv_std = Array1::zeros(c);
        for ch in 0..c {
            let plane = x.index_axis(ndarray::Axis(0), ch);
            let mean = plane.sum() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            for ti in 0..t {
                for yi in 0..h {
                    for xi in 0..w {
                        let xh = (x[[ch, ti, yi, xi]] - mean) * istd;
                        x_hat[[ch, ti, yi, xi]] = xh;
                        y[[ch, ti, yi, xi]] = gamma[ch] * xh + beta[ch];
                    }
                }
            }
            let rm = &mut self.running_mean.slice_mut(buffers)[ch];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * mean;
            // Unbiased variance in the running buffer, biased in the pass.
            let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
            let rv = &mut self.running_var.slice_mut(buffers)[ch];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased;
        }
        (y, BnCache { x_hat, inv_std })
    }

    pub fn forward_eval(&self, params: &[f64], buffers: &[f64], x: &Array4<f64>) -> Array4<f64> {
        let (c, t, h, w) = x.dim();
        let gamma = self.gamma.slice(params);
        let beta = self.beta.slice(params);
        let mean = self.running_mean.slice(buffers);
        let var = self.running_var.slice(buffers);
        let mut y = Array4::zeros(x.dim());
        for ch in 0..c {
            let istd = 1.0 / (var[ch] + self.eps).sqrt();
            for ti in 0..t {
                for yi in 0..h {
                    for xi in 0..w {
                        y[[ch, ti, yi, xi]] =
                            gamma[ch] * (x[[ch, ti, yi, xi]] - mean[ch]) * istd + beta[ch];
                    }
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &BnCache,
        d_out: &Array4<f64>,
        grads: &mut [f64],
    ) -> Array4<f64> {
        let (c, t, h, w) = d_out.dim();
        let n = (t * h * w) as f64;
        let gamma = self.gamma.slice(params).to_vec();
        let mut d_x = Array4::zeros(d_out.dim());
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for ti in 0..t {
                for yi in 0..h {
                    for xi in 0..w {
                        let dy = d_out[[ch, ti, yi, xi]];
                        sum_dy += dy;
                        sum_dy_xhat += dy * cache.x_hat[[ch, ti, yi, xi]];
                    }
                }
            }
            self.gamma.slice_mut(grads)[ch] += sum_dy_xhat;
            self.beta.slice_mut(grads)[ch] += sum_dy;
            let istd = cache.inv_std[ch];
            for ti in 0..t {
                for yi in 0..h {
                    for xi in 0..w {
                        let dy = d_out[[ch, ti, yi, xi]];
                        let xh = cache.x_hat[[ch, ti, yi, xi]];
                        d_x[[ch, ti, yi, xi]] =
                            gamma[ch] * istd * (dy - sum_dy / n - xh * sum_dy_xhat / n);
                    }
                }
            }
        }
        d_x
    }
}

/// In-place ReLU.
pub fn relu(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// ReLU backward using the post-activation values as the mask.
pub fn relu_backward(activated: &Array4<f64>, d_out: &mut Array4<f64>) {
    ndarray::Zip::from(d_out)
        .and(activated)
        .for_each(|d, &a| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });
}

/// Global average pool over (T, H, W), producing one value per channel.
pub fn global_avg_pool(x: &Array4<f64>) -> Array1<f64> {
    let (c, t, h, w) = x.dim();
    let n = (t * h * w) as f64;
    Array1::from_iter((0..c).map(|ch| x.index_axis(ndarray::Axis(0), ch).sum() / n))
}

/// Backward of the global average pool.
pub fn global_avg_pool_backward(d_emb: &Array1<f64>, in_shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let (c, t, h, w) = in_shape;
    let n = (t * h * w) as f64;
    let mut d_x = Array4::zeros(in_shape);
    for ch in 0..c {
        let g = d_emb[ch] / n;
        d_x.index_axis_mut(ndarray::Axis(0), ch).fill(g);
    }
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    /// Scalar test loss: sum of squared outputs / 2, so d_out = out.
    fn loss_of(out: &Array4<f64>) -> f64 {
        out.iter().map(|v| v * v).sum::<f64>() / 2.0
    }

    #[test]
    fn conv3d_matches_direct_convolution() {
        let mut layout = ParamLayout::new();
        let conv = Conv3d::new(&mut layout, "c", 2, 3, (3, 3, 3), (2, 2, 2), (1, 1, 1), true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = vec![0.0; layout.total_len()];
        conv.init(&mut params, &mut rng);
        // Fill bias with nonzero values so it is exercised.
        if let Some(b) = conv.b {
            for (i, v) in b.slice_mut(&mut params).iter_mut().enumerate() {
                *v = 0.1 * (i as f64 + 1.0);
            }
        }
        let x = random_input(&mut rng, (2, 4, 5, 5));
        let out = conv.forward(&params, &x);
        let (oc, ot, oh, ow) = conv.out_shape(x.dim());
        assert_eq!(out.dim(), (oc, ot, oh, ow));
        // Direct nested-loop convolution as the oracle.
        let w = conv.w.slice(&params);
        let bias = conv.b.unwrap().slice(&params);
        let ck = 2 * 27;
        for o in 0..oc {
            for t in 0..ot {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias[o];
                        let mut col = 0;
                        for c in 0..2 {
                            for dt in 0..3 {
                                for dy in 0..3 {
                                    for dx in 0..3 {
                                        let ti = (t * 2 + dt) as isize - 1;
                                        let yi = (y * 2 + dy) as isize - 1;
                                        let xi = (xx * 2 + dx) as isize - 1;
                                        if ti >= 0
                                            && ti < 4
                                            && yi >= 0
                                            && yi < 5
                                            && xi >= 0
                                            && xi < 5
                                        {
                                            acc += w[o * ck + col]
                                                * x[[c, ti as usize, yi as usize, xi as usize]];
                                        }
                                        col += 1;
                                    }
                                }
                            }
                        }
                        assert!(
                            (acc - out[[o, t, y, xx]]).abs() < 1e-10,
                            "mismatch at {o},{t},{y},{xx}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut layout = ParamLayout::new();
        let conv = Conv3d::new(&mut layout, "c", 2, 2, (3, 3, 3), (2, 2, 2), (1, 1, 1), true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = vec![0.0; layout.total_len()];
        conv.init(&mut params, &mut rng);
        let x = random_input(&mut rng, (2, 3, 4, 4));

        let out = conv.forward(&params, &x);
        let mut grads = vec![0.0; params.len()];
        let d_x = conv.backward(&params, &x, &out, &mut grads);

        let eps = 1e-6;
        for idx in [0usize, 7, 25, params.len() - 1] {
            let mut p = params.clone();
            p[idx] += eps;
            let lp = loss_of(&conv.forward(&p, &x));
            p[idx] -= 2.0 * eps;
            let lm = loss_of(&conv.forward(&p, &x));
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (fd - grads[idx]).abs() / fd.abs().max(1e-6) < 1e-5,
                "param {idx}: fd {fd} vs analytic {}",
                grads[idx]
            );
        }
        // Input gradient check at a few coordinates.
        for &(c, t, y, xx) in &[(0usize, 0usize, 0usize, 0usize), (1, 2, 3, 1), (0, 1, 2, 2)] {
            let mut xp = x.clone();
            xp[[c, t, y, xx]] += eps;
            let lp = loss_of(&conv.forward(&params, &xp));
            xp[[c, t, y, xx]] -= 2.0 * eps;
            let lm = loss_of(&conv.forward(&params, &xp));
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (fd - d_x[[c, t, y, xx]]).abs() / fd.abs().max(1e-6) < 1e-5,
                "input ({c},{t},{y},{xx}): fd {fd} vs analytic {}",
                d_x[[c, t, y, xx]]
            );
        }
    }

    #[test]
    fn batchnorm_train_normalizes_and_backward_matches_fd() {
        let mut layout = ParamLayout::new();
        let mut buf_layout = ParamLayout::new();
        let bn = BatchNorm3d::new(&mut layout, &mut buf_layout, "bn", 2);
        let mut params = vec![0.0; layout.total_len()];
        let mut buffers = vec![0.0; buf_layout.total_len()];
        bn.init(&mut params, &mut buffers);
        // Non-trivial gamma/beta.
        bn.gamma.slice_mut(&mut params).copy_from_slice(&[1.3, 0.7]);
        bn.beta.slice_mut(&mut params).copy_from_slice(&[0.2, -0.1]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_input(&mut rng, (2, 2, 3, 3));
        let mut b = buffers.clone();
        let (y, cache) = bn.forward_train(&params, &mut b, &x);

        // Normalized pre-affine activations have zero mean, unit variance.
        for ch in 0..2 {
            let plane = cache.x_hat.index_axis(ndarray::Axis(0), ch);
            let n = plane.len() as f64;
            let mean = plane.sum() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }

        let mut grads = vec![0.0; params.len()];
        let d_x = bn.backward(&params, &cache, &y, &mut grads);
        let eps = 1e-6;
        let loss =
            |p: &[f64], xx: &Array4<f64>| loss_of(&bn.forward_train(p, &mut buffers.clone(), xx).0);
        for idx in 0..params.len() {
            let mut p = params.to_vec();
            p[idx] += eps;
            let lp = loss(&p, &x);
            p[idx] -= 2.0 * eps;
            let lm = loss(&p, &x);
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (fd - grads[idx]).abs() / fd.abs().max(1e-4) < 1e-3,
                "bn param {idx}: fd {fd} vs {}",
                grads[idx]
            );
        }
        for &(c, t, yy, xx) in &[(0usize, 0usize, 0usize, 1usize), (1, 1, 2, 2)] {
            let mut xp = x.clone();
            xp[[c, t, yy, xx]] += eps;
            let lp = loss(&params, &xp);
            xp[[c, t, yy, xx]] -= 2.0 * eps;
            let lm = loss(&params, &xp);
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (fd - d_x[[c, t, yy, xx]]).abs() / fd.abs().max(1e-4) < 1e-3,
                "bn input ({c},{t},{yy},{xx}): fd {fd} vs {}",
                d_x[[c, t, yy, xx]]
            );
        }
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut layout = ParamLayout::new();
        let mut buf_layout = ParamLayout::new();
        let bn = BatchNorm3d::new(&mut layout, &mut buf_layout, "bn", 1);
        let mut params = vec![0.0; layout.total_len()];
        let mut buffers = vec![0.0; buf_layout.total_len()];
        bn.init(&mut params, &mut buffers);
        let x = Array4::from_elem((1, 2, 2, 2), 3.0);
        // With running mean 0 / var 1, eval is the identity (up to eps).
        let y = bn.forward_eval(&params, &buffers, &x);
        assert!(y.iter().all(|&v| (v - 3.0).abs() < 1e-4));
        // After a training pass the running stats move toward the batch.
        let _ = bn.forward_train(&params, &mut buffers, &x);
        assert!(bn.running_mean.slice(&buffers)[0] > 0.0);
    }

    #[test]
    fn gap_averages_each_channel() {
        let mut x = Array4::zeros((2, 1, 2, 2));
        x[[0, 0, 0, 0]] = 4.0;
        x[[1, 0, 1, 1]] = 8.0;
        let emb = global_avg_pool(&x);
        assert_eq!(emb[0], 1.0);
        assert_eq!(emb[1], 2.0);
        let d = global_avg_pool_backward(&Array1::from_vec(vec![4.0, 8.0]), x.dim());
        assert!(d
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .all(|&v| v == 1.0));
        assert!(d
            .index_axis(ndarray::Axis(0), 1)
            .iter()
            .all(|&v| v == 2.0));
    }
}
