//! Forward and backward implementations of every tape op.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::Mode;

/// Running batch-norm statistics for one normalization site. Owned by the
/// model, updated in place by train-mode forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats { running_mean: vec![0.0; channels], running_var: vec![1.0; channels] }
    }
}

fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::Contract(format!("{op}: expected a 4-d tensor, got shape {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

impl Tape {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f32> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.any_requires_grad(&[a, b]);
        let out = self.push_slot(self.shape(a).to_vec(), data, rg);
        self.push_node(
            &[a, b],
            out,
            Box::new(move |args| {
                let grad_out = args.grad_out;
                for id in [a, b] {
                    if args.wants_grad(id) {
                        for (g, &d) in args.grad_mut(id).iter_mut().zip(grad_out) {
                            *g += d;
                        }
                    }
                }
            }),
        );
        Ok(out)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f32> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.any_requires_grad(&[a, b]);
        let out = self.push_slot(self.shape(a).to_vec(), data, rg);
        self.push_node(
            &[a, b],
            out,
            Box::new(move |args| {
                for (id, other) in [(a, b), (b, a)] {
                    if args.wants_grad(id) {
                        let contrib: Vec<f32> = args
                            .grad_out
                            .iter()
                            .zip(args.value(other))
                            .map(|(&g, &v)| g * v)
                            .collect();
                        for (g, d) in args.grad_mut(id).iter_mut().zip(&contrib) {
                            *g += d;
                        }
                    }
                }
            }),
        );
        Ok(out)
    }

    /// Multiplies a tensor by a compile-time constant.
    pub fn scale(&mut self, x: TensorId, factor: f32) -> TensorId {
        let data: Vec<f32> = self.value(x).iter().map(|&v| v * factor).collect();
        let rg = self.any_requires_grad(&[x]);
        let out = self.push_slot(self.shape(x).to_vec(), data, rg);
        self.push_node(
            &[x],
            out,
            Box::new(move |args| {
                if args.wants_grad(x) {
                    let grad_out = args.grad_out.to_vec();
                    for (g, d) in args.grad_mut(x).iter_mut().zip(&grad_out) {
                        *g += d * factor;
                    }
                }
            }),
        );
        out
    }

    /// Sum of all elements, as a scalar tensor. Accumulates in f64.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let rg = self.any_requires_grad(&[x]);
        let out = self.push_slot(vec![1], vec![total as f32], rg);
        self.push_node(
            &[x],
            out,
            Box::new(move |args| {
                if args.wants_grad(x) {
                    let g = args.grad_out[0];
                    for gi in args.grad_mut(x).iter_mut() {
                        *gi += g;
                    }
                }
            }),
        );
        out
    }

    /// Rectified linear unit.
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f32> = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.any_requires_grad(&[x]);
        let out = self.push_slot(self.shape(x).to_vec(), data, rg);
        self.push_node(
            &[x],
            out,
            Box::new(move |args| {
                if args.wants_grad(x) {
                    let gate: Vec<f32> = args
                        .value(out)
                        .iter()
                        .zip(args.grad_out)
                        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
                        .collect();
                    for (g, d) in args.grad_mut(x).iter_mut().zip(&gate) {
                        *g += d;
                    }
                }
            }),
        );
        out
    }

    /// 2-d convolution over `[N, Cin, H, W]` with kernel `[Cout, Cin, kH, kW]`
    /// and optional bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (n, cin, h, w) = dims4(self.shape(x), "conv2d")?;
        let (cout, kcin, kh, kw) = dims4(self.shape(kernel), "conv2d kernel")?;
        if cin != kcin {
            return Err(Error::Config(format!(
                "conv2d: input has {cin} channels (shape {:?}) but kernel expects {kcin} (shape {:?})",
                self.shape(x),
                self.shape(kernel)
            )));
        }
        if stride < 1 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Config(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: self.shape(b).to_vec(),
                    right: vec![cout],
                });
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let mut data = match bias {
            Some(b) => {
                let bv = self.value(b).to_vec();
                let mut d = vec![0.0f32; n * cout * oh * ow];
                for ni in 0..n {
                    for co in 0..cout {
                        let base = (ni * cout + co) * oh * ow;
                        d[base..base + oh * ow].fill(bv[co]);
                    }
                }
                d
            }
            None => vec![0.0f32; n * cout * oh * ow],
        };
        {
            let xv = self.value(x);
            let kv = self.value(kernel);
            conv2d_forward_into(&mut data, xv, kv, n, cin, h, w, cout, kh, kw, stride, pad, oh, ow);
        }
        let inputs: Vec<TensorId> = match bias {
            Some(b) => vec![x, kernel, b],
            None => vec![x, kernel],
        };
        let rg = self.any_requires_grad(&inputs);
        let out = self.push_slot(vec![n, cout, oh, ow], data, rg);
        self.push_node(
            &inputs,
            out,
            Box::new(move |args| {
                let g = args.grad_out;
                if args.wants_grad(x) {
                    let mut dx = vec![0.0f32; n * cin * h * w];
                    conv2d_backward_data_into(
                        &mut dx,
                        g,
                        args.value(kernel),
                        n,
                        cin,
                        h,
                        w,
                        cout,
                        kh,
                        kw,
                        stride,
                        pad,
                        oh,
                        ow,
                    );
                    for (gi, d) in args.grad_mut(x).iter_mut().zip(&dx) {
                        *gi += d;
                    }
                }
                if args.wants_grad(kernel) {
                    let mut dk = vec![0.0f32; cout * cin * kh * kw];
                    conv2d_backward_kernel_into(
                        &mut dk,
                        g,
                        args.value(x),
                        n,
                        cin,
                        h,
                        w,
                        cout,
                        kh,
                        kw,
                        stride,
                        pad,
                        oh,
                        ow,
                    );
                    for (gi, d) in args.grad_mut(kernel).iter_mut().zip(&dk) {
                        *gi += d;
                    }
                }
                if let Some(b) = bias {
                    if args.wants_grad(b) {
                        let mut db = vec![0.0f64; cout];
                        for ni in 0..n {
                            for co in 0..cout {
                                let base = (ni * cout + co) * oh * ow;
                                db[co] +=
                                    g[base..base + oh * ow].iter().map(|&v| v as f64).sum::<f64>();
                            }
                        }
                        for (gi, d) in args.grad_mut(b).iter_mut().zip(&db) {
                            *gi += *d as f32;
                        }
                    }
                }
            }),
        );
        Ok(out)
    }

    /// Transposed 2-d convolution (the adjoint of [`Tape::conv2d`] with
    /// stride `stride` and zero padding). Input `[N, Ci, H, W]`, kernel
    /// `[Ci, Co, kH, kW]`, output `[N, Co, (H-1)*stride + kH, ...]`.
    pub fn transposed_conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        stride: usize,
    ) -> Result<TensorId> {
        let (n, ci, h, w) = dims4(self.shape(x), "transposed_conv2d")?;
        let (kci, co, kh, kw) = dims4(self.shape(kernel), "transposed_conv2d kernel")?;
        if ci != kci {
            return Err(Error::Config(format!(
                "transposed_conv2d: input has {ci} channels (shape {:?}) but kernel expects {kci} (shape {:?})",
                self.shape(x),
                self.shape(kernel)
            )));
        }
        if stride < 1 {
            return Err(Error::Config("transposed_conv2d: stride must be >= 1".into()));
        }
        let oh = (h - 1) * stride + kh;
        let ow = (w - 1) * stride + kw;
        let mut data = vec![0.0f32; n * co * oh * ow];
        {
            let xv = self.value(x);
            let kv = self.value(kernel);
            tconv2d_forward_into(&mut data, xv, kv, n, ci, h, w, co, kh, kw, stride, oh, ow);
        }
        let rg = self.any_requires_grad(&[x, kernel]);
        let out = self.push_slot(vec![n, co, oh, ow], data, rg);
        self.push_node(
            &[x, kernel],
            out,
            Box::new(move |args| {
                let g = args.grad_out;
                if args.wants_grad(x) {
                    // Adjoint of the scatter: an ordinary convolution gather.
                    let mut dx = vec![0.0f32; n * ci * h * w];
                    tconv2d_backward_data_into(
                        &mut dx, g, args.value(kernel), n, ci, h, w, co, kh, kw, stride,
                        oh, ow,
                    );
                    for (gi, d) in args.grad_mut(x).iter_mut().zip(&dx) {
                        *gi += d;
                    }
                }
                if args.wants_grad(kernel) {
                    let mut dk = vec![0.0f32; ci * co * kh * kw];
                    tconv2d_backward_kernel_into(
                        &mut dk, g, args.value(x), n, ci, h, w, co, kh, kw, stride, oh, ow,
                    );
                    for (gi, d) in args.grad_mut(kernel).iter_mut().zip(&dk) {
                        *gi += d;
                    }
                }
            }),
        );
        Ok(out)
    }

    /// Center-crops the spatial dims of `[N, C, H, W]` down to `(out_h, out_w)`.
    pub fn crop2d(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        let (n, c, h, w) = dims4(self.shape(x), "crop2d")?;
        if out_h > h || out_w > w {
            return Err(Error::ShapeMismatch {
                op: "crop2d",
                left: vec![h, w],
                right: vec![out_h, out_w],
            });
        }
        let oy = (h - out_h) / 2;
        let ox = (w - out_w) / 2;
        let xv = self.value(x);
        let mut data = vec![0.0f32; n * c * out_h * out_w];
        for nc in 0..n * c {
            for y in 0..out_h {
                let src = nc * h * w + (y + oy) * w + ox;
                let dst = nc * out_h * out_w + y * out_w;
                data[dst..dst + out_w].copy_from_slice(&xv[src..src + out_w]);
            }
        }
        let rg = self.any_requires_grad(&[x]);
        let out = self.push_slot(vec![n, c, out_h, out_w], data, rg);
        self.push_node(
            &[x],
            out,
            Box::new(move |args| {
                if args.wants_grad(x) {
                    let grad_out = args.grad_out;
                    let gx = args.grad_mut(x);
                    for nc in 0..n * c {
                        for y in 0..out_h {
                            let dst = nc * h * w + (y + oy) * w + ox;
                            let src = nc * out_h * out_w + y * out_w;
                            for i in 0..out_w {
                                gx[dst + i] += grad_out[src + i];
                            }
                        }
                    }
                }
            }),
        );
        Ok(out)
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// Train mode normalizes with batch statistics (f64 accumulation) and
    /// updates `stats` in place; eval mode uses the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut BnStats,
        mode: Mode,
        momentum: f32,
        eps: f32,
    ) -> Result<TensorId> {
        let (n, c, h, w) = dims4(self.shape(x), "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: self.shape(gamma).to_vec(),
                right: vec![c],
            });
        }
        let m = n * h * w;
        let plane = h * w;
        let (mean, var) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::DegenerateVariance { op: "batch_norm", elements: m });
                }
                let xv = self.value(x);
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        acc += xv[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut vacc = 0.0f64;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for &v in &xv[base..base + plane] {
                            let d = v as f64 - mu;
                            vacc += d * d;
                        }
                    }
                    mean[ci] = mu as f32;
                    var[ci] = (vacc / m as f64) as f32;
                }
                for ci in 0..c {
                    stats.running_mean[ci] =
                        (1.0 - momentum) * stats.running_mean[ci] + momentum * mean[ci];
                    stats.running_var[ci] =
                        (1.0 - momentum) * stats.running_var[ci] + momentum * var[ci];
                }
                (mean, var)
            }
            Mode::Eval => (stats.running_mean.clone(), stats.running_var.clone()),
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let xv = self.value(x);
        let mut data = vec![0.0f32; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (mu, is, ga, be) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for i in 0..plane {
                    data[base + i] = (xv[base + i] - mu) * is * ga + be;
                }
            }
        }
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        let out = self.push_slot(vec![n, c, h, w], data, rg);
        let train = mode == Mode::Train;
        self.push_node(
            &[x, gamma, beta],
            out,
            Box::new(move |args| {
                let g = args.grad_out;
                let xv = args.value(x);
                let gv = args.value(gamma);
                // Per-channel reductions, f64 accumulated.
                let mut sum_g = vec![0.0f64; c];
                let mut sum_g_xhat = vec![0.0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let (mu, is) = (mean[ci] as f64, inv_std[ci] as f64);
                        for i in 0..plane {
                            let gi = g[base + i] as f64;
                            let xhat = (xv[base + i] as f64 - mu) * is;
                            sum_g[ci] += gi;
                            sum_g_xhat[ci] += gi * xhat;
                        }
                    }
                }
                if args.wants_grad(beta) {
                    for (gi, s) in args.grad_mut(beta).iter_mut().zip(&sum_g) {
                        *gi += *s as f32;
                    }
                }
                if args.wants_grad(gamma) {
                    for (gi, s) in args.grad_mut(gamma).iter_mut().zip(&sum_g_xhat) {
                        *gi += *s as f32;
                    }
                }
                if args.wants_grad(x) {
                    let gx = args.grad_mut(x);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let (mu, is, ga) =
                                (mean[ci] as f64, inv_std[ci] as f64, gv[ci] as f64);
                            if train {
                                let mg = sum_g[ci] / m as f64;
                                let mgx = sum_g_xhat[ci] / m as f64;
                                for i in 0..plane {
                                    let gi = g[base + i] as f64;
                                    let xhat = (xv[base + i] as f64 - mu) * is;
                                    gx[base + i] += (ga * is * (gi - mg - xhat * mgx)) as f32;
                                }
                            } else {
                                // Running stats are constants in eval mode.
                                for i in 0..plane {
                                    gx[base + i] += (ga * is * g[base + i] as f64) as f32;
                                }
                            }
                        }
                    }
                }
            }),
        );
        Ok(out)
    }

    /// 2x2 max pooling with stride 2. Gradient routes to the first
    /// (row-major) maximal element of each window.
    pub fn max_pool2d(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = dims4(self.shape(x), "max_pool2d")?;
        if h < 2 || w < 2 {
            return Err(Error::Config(format!("max_pool2d: spatial dims {h}x{w} too small")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut data = vec![0.0f32; n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        for nc in 0..n * c {
            let xbase = nc * h * w;
            let obase = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let idx = xbase + (oy * 2 + ky) * w + ox * 2 + kx;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    data[obase + oy * ow + ox] = best;
                    argmax[obase + oy * ow + ox] = best_idx as u32;
                }
            }
        }
        let rg = self.any_requires_grad(&[x]);
        let out = self.push_slot(vec![n, c, oh, ow], data, rg);
        self.push_node(
            &[x],
            out,
            Box::new(move |args| {
                if args.wants_grad(x) {
                    let grad_out = args.grad_out;
                    let gx = args.grad_mut(x);
                    for (i, &src) in argmax.iter().enumerate() {
                        gx[src as usize] += grad_out[i];
                    }
                }
            }),
        );
        Ok(out)
    }

    /// Concatenates two tensors along the channel axis.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, ca, ha, wa) = dims4(self.shape(a), "concat_channels")?;
        let (nb, cb, hb, wb) = dims4(self.shape(b), "concat_channels")?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let plane = ha * wa;
        let av = self.value(a);
        let bv = self.value(b);
        let mut data = vec![0.0f32; na * (ca + cb) * plane];
        for ni in 0..na {
            let dst = ni * (ca + cb) * plane;
            data[dst..dst + ca * plane]
                .copy_from_slice(&av[ni * ca * plane..(ni + 1) * ca * plane]);
            data[dst + ca * plane..dst + (ca + cb) * plane]
                .copy_from_slice(&bv[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        let rg = self.any_requires_grad(&[a, b]);
        let out = self.push_slot(vec![na, ca + cb, ha, wa], data, rg);
        self.push_node(
            &[a, b],
            out,
            Box::new(move |args| {
                let g = args.grad_out;
                if args.wants_grad(a) {
                    let ga = args.grad_mut(a);
                    for ni in 0..na {
                        let src = ni * (ca + cb) * plane;
                        for i in 0..ca * plane {
                            ga[ni * ca * plane + i] += g[src + i];
                        }
                    }
                }
                if args.wants_grad(b) {
                    let gb = args.grad_mut(b);
                    for ni in 0..na {
                        let src = ni * (ca + cb) * plane + ca * plane;
                        for i in 0..cb * plane {
                            gb[ni * cb * plane + i] += g[src + i];
                        }
                    }
                }
            }),
        );
        Ok(out)
    }

    /// Mean softmax cross-entropy over non-ignored pixels.
    ///
    /// `logits` is `[N, C, H, W]`; `labels` is `N*H*W` class ids in row-major
    /// `[N, H, W]` order. Pixels whose label equals `ignore_value` contribute
    /// neither loss nor gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[u8],
        ignore_value: u8,
    ) -> Result<TensorId> {
        let (n, c, h, w) = dims4(self.shape(logits), "softmax_cross_entropy")?;
        let plane = h * w;
        if labels.len() != n * plane {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: vec![labels.len()],
                right: vec![n, h, w],
            });
        }
        for (i, &l) in labels.iter().enumerate() {
            if l != ignore_value && l as usize >= c {
                return Err(Error::Contract(format!(
                    "softmax_cross_entropy: label {l} at pixel {i} outside [0, {c})"
                )));
            }
        }
        let lv = self.value(logits);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for ni in 0..n {
            for p in 0..plane {
                let label = labels[ni * plane + p];
                if label == ignore_value {
                    continue;
                }
                let base = ni * c * plane + p;
                let mut maxv = f32::NEG_INFINITY;
                for ci in 0..c {
                    maxv = maxv.max(lv[base + ci * plane]);
                }
                let mut sumexp = 0.0f64;
                for ci in 0..c {
                    sumexp += ((lv[base + ci * plane] - maxv) as f64).exp();
                }
                total += sumexp.ln() - (lv[base + label as usize * plane] - maxv) as f64;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let labels = labels.to_vec();
        let rg = self.any_requires_grad(&[logits]);
        let out = self.push_slot(vec![1], vec![(total / count as f64) as f32], rg);
        self.push_node(
            &[logits],
            out,
            Box::new(move |args| {
                if !args.wants_grad(logits) {
                    return;
                }
                let g = args.grad_out[0] / count as f32;
                let lv = args.value(logits);
                let gx = args.grad_mut(logits);
                let mut probs = vec![0.0f32; c];
                for ni in 0..n {
                    for p in 0..plane {
                        let label = labels[ni * plane + p];
                        if label == ignore_value {
                            continue;
                        }
                        let base = ni * c * plane + p;
                        let mut maxv = f32::NEG_INFINITY;
                        for ci in 0..c {
                            maxv = maxv.max(lv[base + ci * plane]);
                        }
                        let mut sumexp = 0.0f64;
                        for ci in 0..c {
                            let e = ((lv[base + ci * plane] - maxv) as f64).exp();
                            probs[ci] = e as f32;
                            sumexp += e;
                        }
                        let inv = (1.0 / sumexp) as f32;
                        for ci in 0..c {
                            let p_ci = probs[ci] * inv;
                            let onehot = (ci == label as usize) as u8 as f32;
                            gx[base + ci * plane] += g * (p_ci - onehot);
                        }
                    }
                }
            }),
        );
        Ok(out)
    }

    /// Elementwise product with a fixed mask (dropout masks, with any keep
    /// scaling folded into the mask values). The mask participates in
    /// backward as a constant factor.
    pub fn mul_mask(&mut self, x: TensorId, mask: Vec<f32>) -> Result<TensorId> {
        if mask.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "mul_mask",
                left: vec![mask.len()],
                right: self.shape(x).to_vec(),
            });
        }
        let data: Vec<f32> = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.any_requires_grad(&[x]);
        let out = self.push_slot(self.shape(x).to_vec(), data, rg);
        self.push_node(
            &[x],
            out,
            Box::new(move |args| {
                if args.wants_grad(x) {
                    let contrib: Vec<f32> =
                        args.grad_out.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                    for (gi, d) in args.grad_mut(x).iter_mut().zip(&contrib) {
                        *gi += d;
                    }
                }
            }),
        );
        Ok(out)
    }

    /// Multiplicative Gaussian noise `y = x * (1 + sigma * n)` with
    /// `sigma = exp(log_alpha / 2)`, reparameterized so gradients reach the
    /// scalar `log_alpha` tensor. `noise` holds standard-normal draws.
    pub fn gauss_noise_mul(
        &mut self,
        x: TensorId,
        log_alpha: TensorId,
        noise: Vec<f32>,
    ) -> Result<TensorId> {
        if self.value(log_alpha).len() != 1 {
            return Err(Error::Contract("gauss_noise_mul: log_alpha must be scalar".into()));
        }
        if noise.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "gauss_noise_mul",
                left: vec![noise.len()],
                right: self.shape(x).to_vec(),
            });
        }
        let sigma = (self.value(log_alpha)[0] / 2.0).exp();
        let data: Vec<f32> =
            self.value(x).iter().zip(&noise).map(|(&v, &n)| v * (1.0 + sigma * n)).collect();
        let rg = self.any_requires_grad(&[x, log_alpha]);
        let out = self.push_slot(self.shape(x).to_vec(), data, rg);
        self.push_node(
            &[x, log_alpha],
            out,
            Box::new(move |args| {
                if args.wants_grad(x) {
                    let contrib: Vec<f32> = args
                        .grad_out
                        .iter()
                        .zip(&noise)
                        .map(|(&g, &n)| g * (1.0 + sigma * n))
                        .collect();
                    for (gi, d) in args.grad_mut(x).iter_mut().zip(&contrib) {
                        *gi += d;
                    }
                }
                if args.wants_grad(log_alpha) {
                    let xv = args.value(x);
                    let mut acc = 0.0f64;
                    for i in 0..noise.len() {
                        acc += (args.grad_out[i] * xv[i] * noise[i]) as f64;
                    }
                    args.grad_mut(log_alpha)[0] += (acc * (sigma as f64) * 0.5) as f32;
                }
            }),
        );
        Ok(out)
    }

    /// Per-site KL penalty of variational dropout as a function of the
    /// scalar `log_alpha` tensor (see [`crate::dropout::vd_kl_penalty_value`]).
    pub fn kl_penalty(&mut self, log_alpha: TensorId) -> Result<TensorId> {
        if self.value(log_alpha).len() != 1 {
            return Err(Error::Contract("kl_penalty: log_alpha must be scalar".into()));
        }
        let la = self.value(log_alpha)[0];
        let pen = crate::dropout::vd_kl_penalty_value(la);
        let rg = self.any_requires_grad(&[log_alpha]);
        let out = self.push_slot(vec![1], vec![pen], rg);
        self.push_node(
            &[log_alpha],
            out,
            Box::new(move |args| {
                if args.wants_grad(log_alpha) {
                    let d = crate::dropout::vd_kl_penalty_grad(args.value(log_alpha)[0]);
                    args.grad_mut(log_alpha)[0] += args.grad_out[0] * d;
                }
            }),
        );
        Ok(out)
    }
}

// ── Convolution kernels ─────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn conv2d_forward_into(
    out: &mut [f32],
    x: &[f32],
    k: &[f32],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for ni in 0..n {
        for co in 0..cout {
            let out_base = (ni * cout + co) * oh * ow;
            for ci in 0..cin {
                let x_base = (ni * cin + ci) * h * w;
                let k_base = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = k[k_base + ky * kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * w;
                            let out_row = out_base + oy * ow;
                            // valid ox range so that ix = ox*stride + kx - pad is in [0, w)
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out[out_row + ox] += wgt * x[x_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_data_into(
    dx: &mut [f32],
    g: &[f32],
    k: &[f32],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for ni in 0..n {
        for co in 0..cout {
            let g_base = (ni * cout + co) * oh * ow;
            for ci in 0..cin {
                let x_base = (ni * cin + ci) * h * w;
                let k_base = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = k[k_base + ky * kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * w;
                            let g_row = g_base + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dx[x_row + ix as usize] += wgt * g[g_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel_into(
    dk: &mut [f32],
    g: &[f32],
    x: &[f32],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for ni in 0..n {
        for co in 0..cout {
            let g_base = (ni * cout + co) * oh * ow;
            for ci in 0..cin {
                let x_base = (ni * cin + ci) * h * w;
                let k_base = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0f32;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * w;
                            let g_row = g_base + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[x_row + ix as usize] * g[g_row + ox];
                            }
                        }
                        dk[k_base + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tconv2d_forward_into(
    out: &mut [f32],
    x: &[f32],
    k: &[f32],
    n: usize,
    ci_n: usize,
    h: usize,
    w: usize,
    co_n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    for ni in 0..n {
        for ci in 0..ci_n {
            let x_base = (ni * ci_n + ci) * h * w;
            for co in 0..co_n {
                let out_base = (ni * co_n + co) * oh * ow;
                let k_base = (ci * co_n + co) * kh * kw;
                for iy in 0..h {
                    for ky in 0..kh {
                        let oy = iy * stride + ky;
                        let out_row = out_base + oy * ow;
                        let x_row = x_base + iy * w;
                        for kx in 0..kw {
                            let wgt = k[k_base + ky * kw + kx];
                            if wgt == 0.0 {
                                continue;
                            }
                            for ix in 0..w {
                                out[out_row + ix * stride + kx] += wgt * x[x_row + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tconv2d_backward_data_into(
    dx: &mut [f32],
    g: &[f32],
    k: &[f32],
    n: usize,
    ci_n: usize,
    h: usize,
    w: usize,
    co_n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    _oh: usize,
    ow: usize,
) {
    for ni in 0..n {
        for ci in 0..ci_n {
            let x_base = (ni * ci_n + ci) * h * w;
            for co in 0..co_n {
                let g_base = (ni * co_n + co) * _oh * ow;
                let k_base = (ci * co_n + co) * kh * kw;
                for iy in 0..h {
                    for ky in 0..kh {
                        let g_row = g_base + (iy * stride + ky) * ow;
                        let x_row = x_base + iy * w;
                        for kx in 0..kw {
                            let wgt = k[k_base + ky * kw + kx];
                            if wgt == 0.0 {
                                continue;
                            }
                            for ix in 0..w {
                                dx[x_row + ix] += wgt * g[g_row + ix * stride + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tconv2d_backward_kernel_into(
    dk: &mut [f32],
    g: &[f32],
    x: &[f32],
    n: usize,
    ci_n: usize,
    h: usize,
    w: usize,
    co_n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    _oh: usize,
    ow: usize,
) {
    for ni in 0..n {
        for ci in 0..ci_n {
            let x_base = (ni * ci_n + ci) * h * w;
            for co in 0..co_n {
                let g_base = (ni * co_n + co) * _oh * ow;
                let k_base = (ci * co_n + co) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0f32;
                        for iy in 0..h {
                            let g_row = g_base + (iy * stride + ky) * ow;
                            let x_row = x_base + iy * w;
                            for ix in 0..w {
                                acc += x[x_row + ix] * g[g_row + ix * stride + kx];
                            }
                        }
                        dk[k_base + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
}
