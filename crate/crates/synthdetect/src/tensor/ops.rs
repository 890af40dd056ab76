//! Differentiable operations recorded on the tape.
//!
//! Convolution follows the deep-learning convention (cross-correlation,
//! zero padding, per-filter bias). Conv and affine lower onto the GEMM
//! kernels via im2col, which keeps the 64-bit forward bit-identical to a
//! naive `c, ky, kx` loop nest.

use std::cell::RefCell;

use super::gemm::{col2im, conv_out_dim, gemm_nn, gemm_nt, gemm_tn, im2col};
use super::{Element, Mode, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Batch-norm variance guard.
pub const BN_EPS: f64 = 1e-5;
/// Probability clamp for the cross-entropy losses.
pub const BCE_CLAMP: f64 = 1e-7;

/// Per-channel running moments owned by a batch-norm layer. TRAIN-mode
/// forwards update them with momentum 0.1; EVAL-mode forwards read them.
#[derive(Debug)]
pub struct RunningStats<T> {
    pub mean: RefCell<Vec<T>>,
    pub var: RefCell<Vec<T>>,
    pub momentum: f64,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: RefCell::new(vec![T::ZERO; channels]),
            var: RefCell::new(vec![T::ONE; channels]),
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.borrow().len()
    }
}

fn shape4(t: &Tensor<impl Element>, what: &str) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "{what} must be 4-d (N x C x H x W), got {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

impl<T: Element> Tape<T> {
    /// Cross-correlation with zero padding and optional per-filter bias.
    /// Input `N x C x H x W`, kernels `F x C x kh x kw`, output
    /// `N x F x H' x W'` with the floor shape formula.
    pub fn conv2d(
        &self,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let [n, c, h, w] = shape4(x, "conv2d input")?;
        let [f, wc, kh, kw] = shape4(weight, "conv2d kernels")?;
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {c}, kernels expect {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if b.numel() != f {
                return Err(Error::Shape(format!(
                    "conv2d bias has {} entries for {f} filters",
                    b.numel()
                )));
            }
        }
        let oh = conv_out_dim(h, pad, kh, stride);
        let ow = conv_out_dim(w, pad, kw, stride);
        let p = oh * ow;
        let k = c * kh * kw;

        let out = Tensor::zeros(&[n, f, oh, ow]);
        {
            let xd = x.data();
            let wd = weight.data();
            let mut od = out.inner.borrow_mut();
            let mut cols = Vec::new();
            for s in 0..n {
                im2col(&xd[s * c * h * w..], c, h, w, kh, kw, stride, pad, &mut cols);
                gemm_nn(f, k, p, &wd, &cols, &mut od.data[s * f * p..(s + 1) * f * p]);
            }
            if let Some(b) = bias {
                let bd = b.data();
                for s in 0..n {
                    for ff in 0..f {
                        let bf = bd[ff];
                        for v in &mut od.data[(s * f + ff) * p..(s * f + ff + 1) * p] {
                            *v += bf;
                        }
                    }
                }
            }
        }

        let tape_id = self.id();
        let (xc, wc_t, bc, oc) = (
            x.clone(),
            weight.clone(),
            bias.cloned(),
            out.clone(),
        );
        self.push_op(&out, move || {
            let dy = oc.grad_or_zeros();
            let want_x = xc.wants_grad(tape_id);
            let want_w = wc_t.wants_grad(tape_id);
            let want_b = bc.as_ref().map(|b| b.wants_grad(tape_id)).unwrap_or(false);
            if !(want_x || want_w || want_b) {
                return;
            }
            let xd = xc.to_vec();
            let wd = wc_t.to_vec();
            let mut dw = vec![T::ZERO; wd.len()];
            let mut dx = vec![T::ZERO; xd.len()];
            let mut db = vec![T::ZERO; f];
            let mut cols = Vec::new();
            let mut dcols = vec![T::ZERO; k * p];
            for s in 0..n {
                let dys = &dy[s * f * p..(s + 1) * f * p];
                if want_w {
                    im2col(&xd[s * c * h * w..], c, h, w, kh, kw, stride, pad, &mut cols);
                    gemm_nt(f, p, k, dys, &cols, &mut dw);
                }
                if want_x {
                    dcols.iter_mut().for_each(|v| *v = T::ZERO);
                    gemm_tn(k, f, p, &wd, dys, &mut dcols);
                    col2im(
                        &dcols,
                        c,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        pad,
                        &mut dx[s * c * h * w..(s + 1) * c * h * w],
                    );
                }
                if want_b {
                    for ff in 0..f {
                        for v in &dys[ff * p..(ff + 1) * p] {
                            db[ff] += *v;
                        }
                    }
                }
            }
            if want_w {
                wc_t.accumulate_grad(&dw);
            }
            if want_x {
                xc.accumulate_grad(&dx);
            }
            if want_b {
                bc.as_ref().unwrap().accumulate_grad(&db);
            }
        });
        Ok(out)
    }

    /// Per-window maximum; gradient routes to the first (row-major) argmax.
    pub fn maxpool2d(&self, x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
        let [n, c, h, w] = shape4(x, "maxpool2d input")?;
        if k == 0 || stride == 0 {
            return Err(Error::Argument("maxpool2d k and stride must be >= 1".into()));
        }
        if k > h || k > w {
            return Err(Error::Shape(format!(
                "maxpool2d window {k} exceeds input {h}x{w}"
            )));
        }
        let oh = conv_out_dim(h, 0, k, stride);
        let ow = conv_out_dim(w, 0, k, stride);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        {
            let xd = x.data();
            for plane_idx in 0..n * c {
                let plane = &xd[plane_idx * h * w..(plane_idx + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = plane[oy * stride * w + ox * stride];
                        let mut best_at = oy * stride * w + ox * stride;
                        for ky in 0..k {
                            for kx in 0..k {
                                let at = (oy * stride + ky) * w + ox * stride + kx;
                                if plane[at] > best {
                                    best = plane[at];
                                    best_at = at;
                                }
                            }
                        }
                        data.push(best);
                        argmax.push(plane_idx * h * w + best_at);
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], data)?;
        let tape_id = self.id();
        let (xc, oc) = (x.clone(), out.clone());
        self.push_op(&out, move || {
            if !xc.wants_grad(tape_id) {
                return;
            }
            let dy = oc.grad_or_zeros();
            let mut dx = vec![T::ZERO; xc.numel()];
            for (g, at) in dy.iter().zip(&argmax) {
                dx[*at] += *g;
            }
            xc.accumulate_grad(&dx);
        });
        Ok(out)
    }

    /// Per-window mean; gradient spreads evenly over the window.
    pub fn avgpool2d(&self, x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
        let [n, c, h, w] = shape4(x, "avgpool2d input")?;
        if k == 0 || stride == 0 {
            return Err(Error::Argument("avgpool2d k and stride must be >= 1".into()));
        }
        if k > h || k > w {
            return Err(Error::Shape(format!(
                "avgpool2d window {k} exceeds input {h}x{w}"
            )));
        }
        let oh = conv_out_dim(h, 0, k, stride);
        let ow = conv_out_dim(w, 0, k, stride);
        let inv = T::ONE / T::from_f64((k * k) as f64);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        {
            let xd = x.data();
            for plane_idx in 0..n * c {
                let plane = &xd[plane_idx * h * w..(plane_idx + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = T::ZERO;
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += plane[(oy * stride + ky) * w + ox * stride + kx];
                            }
                        }
                        data.push(acc * inv);
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], data)?;
        let tape_id = self.id();
        let (xc, oc) = (x.clone(), out.clone());
        self.push_op(&out, move || {
            if !xc.wants_grad(tape_id) {
                return;
            }
            let dy = oc.grad_or_zeros();
            let mut dx = vec![T::ZERO; xc.numel()];
            let mut at = 0;
            for plane_idx in 0..n * c {
                let plane = &mut dx[plane_idx * h * w..(plane_idx + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dy[at] * inv;
                        at += 1;
                        for ky in 0..k {
                            for kx in 0..k {
                                plane[(oy * stride + ky) * w + ox * stride + kx] += g;
                            }
                        }
                    }
                }
            }
            xc.accumulate_grad(&dx);
        });
        Ok(out)
    }

    /// `max(0, x)` elementwise.
    pub fn relu(&self, x: &Tensor<T>) -> Tensor<T> {
        let data = x.data().iter().map(|v| v.maximum(T::ZERO)).collect();
        let out = Tensor::raw(x.shape(), data);
        let tape_id = self.id();
        let (xc, oc) = (x.clone(), out.clone());
        self.push_op(&out, move || {
            if !xc.wants_grad(tape_id) {
                return;
            }
            let dy = oc.grad_or_zeros();
            let xd = xc.to_vec();
            let dx: Vec<T> = dy
                .iter()
                .zip(&xd)
                .map(|(g, v)| if *v > T::ZERO { *g } else { T::ZERO })
                .collect();
            xc.accumulate_grad(&dx);
        });
        out
    }

    /// `1 / (1 + e^-x)` elementwise.
    pub fn sigmoid(&self, x: &Tensor<T>) -> Tensor<T> {
        let data: Vec<T> = x
            .data()
            .iter()
            .map(|v| T::ONE / (T::ONE + (-*v).exp()))
            .collect();
        let out = Tensor::raw(x.shape(), data);
        let tape_id = self.id();
        let (xc, oc) = (x.clone(), out.clone());
        self.push_op(&out, move || {
            if !xc.wants_grad(tape_id) {
                return;
            }
            let dy = oc.grad_or_zeros();
            let yd = oc.to_vec();
            let dx: Vec<T> = dy
                .iter()
                .zip(&yd)
                .map(|(g, s)| *g * *s * (T::ONE - *s))
                .collect();
            xc.accumulate_grad(&dx);
        });
        out
    }

    /// `x W + b` with `x: N x D`, `W: D x M`, `b: M` broadcast over rows.
    pub fn affine(&self, x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = x.shape();
        let ws = weight.shape();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Shape(format!(
                "affine expects 2-d operands, got {xs:?} and {ws:?}"
            )));
        }
        let (n, d) = (xs[0], xs[1]);
        let (wd, m) = (ws[0], ws[1]);
        if d != wd {
            return Err(Error::Shape(format!(
                "affine inner dims disagree: input {d}, weight {wd}"
            )));
        }
        if bias.numel() != m {
            return Err(Error::Shape(format!(
                "affine bias has {} entries for {m} outputs",
                bias.numel()
            )));
        }
        let out = Tensor::zeros(&[n, m]);
        {
            let xd = x.data();
            let wdat = weight.data();
            let bd = bias.data();
            let mut od = out.inner.borrow_mut();
            gemm_nn(n, d, m, &xd, &wdat, &mut od.data);
            for row in od.data.chunks_mut(m) {
                for (o, b) in row.iter_mut().zip(bd.iter()) {
                    *o += *b;
                }
            }
        }
        let tape_id = self.id();
        let (xc, wc, bc, oc) = (x.clone(), weight.clone(), bias.clone(), out.clone());
        self.push_op(&out, move || {
            let dy = oc.grad_or_zeros();
            if xc.wants_grad(tape_id) {
                let wdat = wc.to_vec();
                let mut dx = vec![T::ZERO; n * d];
                gemm_nt(n, m, d, &dy, &wdat, &mut dx);
                xc.accumulate_grad(&dx);
            }
            if wc.wants_grad(tape_id) {
                let xd = xc.to_vec();
                let mut dw = vec![T::ZERO; d * m];
                gemm_tn(d, n, m, &xd, &dy, &mut dw);
                wc.accumulate_grad(&dw);
            }
            if bc.wants_grad(tape_id) {
                let mut db = vec![T::ZERO; m];
                for row in dy.chunks(m) {
                    for (b, g) in db.iter_mut().zip(row) {
                        *b += *g;
                    }
                }
                bc.accumulate_grad(&db);
            }
        });
        Ok(out)
    }

    /// Per-channel batch normalization over `N x C x H x W`.
    ///
    /// TRAIN normalizes by batch moments (population variance, eps 1e-5)
    /// and folds them into `stats` with its momentum; EVAL normalizes by
    /// the running moments.
    pub fn batchnorm2d(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        stats: &RunningStats<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let [n, c, h, w] = shape4(x, "batchnorm2d input")?;
        if gamma.numel() != c || beta.numel() != c || stats.channels() != c {
            return Err(Error::Shape(format!(
                "batchnorm2d parameter channels disagree with input channels {c}"
            )));
        }
        let m = n * h * w;
        if mode == Mode::Train && m < 2 {
            return Err(Error::Argument(
                "degenerate batch: batchnorm2d TRAIN needs at least 2 values per channel".into(),
            ));
        }
        let eps = T::from_f64(BN_EPS);
        let plane = h * w;
        let mut xhat = vec![T::ZERO; x.numel()];
        let mut inv_std = vec![T::ZERO; c];
        let mut out_data = vec![T::ZERO; x.numel()];
        {
            let xd = x.data();
            let gd = gamma.data();
            let bd = beta.data();
            let per_channel = |cc: usize| -> (T, T) {
                match mode {
                    Mode::Train => {
                        let mut sum = T::ZERO;
                        for s in 0..n {
                            let base = (s * c + cc) * plane;
                            for v in &xd[base..base + plane] {
                                sum += *v;
                            }
                        }
                        let mean = sum / T::from_f64(m as f64);
                        let mut varsum = T::ZERO;
                        for s in 0..n {
                            let base = (s * c + cc) * plane;
                            for v in &xd[base..base + plane] {
                                let d = *v - mean;
                                varsum += d * d;
                            }
                        }
                        (mean, varsum / T::from_f64(m as f64))
                    }
                    Mode::Eval => (stats.mean.borrow()[cc], stats.var.borrow()[cc]),
                }
            };
            for cc in 0..c {
                let (mean, var) = per_channel(cc);
                let istd = T::ONE / (var + eps).sqrt();
                inv_std[cc] = istd;
                for s in 0..n {
                    let base = (s * c + cc) * plane;
                    for i in base..base + plane {
                        let xh = (xd[i] - mean) * istd;
                        xhat[i] = xh;
                        out_data[i] = gd[cc] * xh + bd[cc];
                    }
                }
                if mode == Mode::Train {
                    let mom = T::from_f64(stats.momentum);
                    let keep = T::ONE - mom;
                    let mut rm = stats.mean.borrow_mut();
                    let mut rv = stats.var.borrow_mut();
                    rm[cc] = keep * rm[cc] + mom * mean;
                    rv[cc] = keep * rv[cc] + mom * var;
                }
            }
        }
        let out = Tensor::raw(x.shape(), out_data);
        let tape_id = self.id();
        let (xc, gc, bc, oc) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
        self.push_op(&out, move || {
            let dy = oc.grad_or_zeros();
            let gd = gc.to_vec();
            let want_x = xc.wants_grad(tape_id);
            let want_g = gc.wants_grad(tape_id);
            let want_b = bc.wants_grad(tape_id);
            if !(want_x || want_g || want_b) {
                return;
            }
            let mut dgamma = vec![T::ZERO; c];
            let mut dbeta = vec![T::ZERO; c];
            let mut dx = vec![T::ZERO; xhat.len()];
            let m_t = T::from_f64(m as f64);
            for cc in 0..c {
                let mut sum_dy = T::ZERO;
                let mut sum_dy_xhat = T::ZERO;
                for s in 0..n {
                    let base = (s * c + cc) * plane;
                    for i in base..base + plane {
                        sum_dy += dy[i];
                        sum_dy_xhat += dy[i] * xhat[i];
                    }
                }
                dbeta[cc] = sum_dy;
                dgamma[cc] = sum_dy_xhat;
                if want_x {
                    let scale = gd[cc] * inv_std[cc];
                    for s in 0..n {
                        let base = (s * c + cc) * plane;
                        for i in base..base + plane {
                            dx[i] = match mode {
                                // Batch moments depend on x.
                                Mode::Train => {
                                    scale
                                        * (dy[i]
                                            - sum_dy / m_t
                                            - xhat[i] * sum_dy_xhat / m_t)
                                }
                                // Running moments are constants.
                                Mode::Eval => scale * dy[i],
                            };
                        }
                    }
                }
            }
            if want_x {
                xc.accumulate_grad(&dx);
            }
            if want_g {
                gc.accumulate_grad(&dgamma);
            }
            if want_b {
                bc.accumulate_grad(&dbeta);
            }
        });
        Ok(out)
    }

    /// Inverted dropout: TRAIN zeroes with probability `p` and scales
    /// survivors by `1/(1-p)`; EVAL is the identity.
    pub fn dropout(
        &self,
        x: &Tensor<T>,
        p: f64,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Argument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        let mask: Option<Vec<T>> = match mode {
            Mode::Train if p > 0.0 => {
                let scale = T::from_f64(1.0 / (1.0 - p));
                Some(
                    (0..x.numel())
                        .map(|_| if rng.uniform() < p { T::ZERO } else { scale })
                        .collect(),
                )
            }
            _ => None,
        };
        let data: Vec<T> = match &mask {
            Some(mask) => x.data().iter().zip(mask).map(|(v, m)| *v * *m).collect(),
            None => x.to_vec(),
        };
        let out = Tensor::raw(x.shape(), data);
        let tape_id = self.id();
        let (xc, oc) = (x.clone(), out.clone());
        self.push_op(&out, move || {
            if !xc.wants_grad(tape_id) {
                return;
            }
            let dy = oc.grad_or_zeros();
            match &mask {
                Some(mask) => {
                    let dx: Vec<T> = dy.iter().zip(mask).map(|(g, m)| *g * *m).collect();
                    xc.accumulate_grad(&dx);
                }
                None => xc.accumulate_grad(&dy),
            }
        });
        Ok(out)
    }

    /// `-mean(t ln p + (1-t) ln(1-p))` with probabilities clamped to
    /// `[1e-7, 1 - 1e-7]`. Gradient flows to the probabilities only.
    pub fn binary_cross_entropy(&self, probs: &Tensor<T>, targets: &[T]) -> Result<Tensor<T>> {
        if probs.numel() != targets.len() {
            return Err(Error::Shape(format!(
                "binary_cross_entropy got {} probabilities and {} targets",
                probs.numel(),
                targets.len()
            )));
        }
        if targets.is_empty() {
            return Err(Error::Argument("binary_cross_entropy on empty batch".into()));
        }
        let lo = T::from_f64(BCE_CLAMP);
        let hi = T::from_f64(1.0 - BCE_CLAMP);
        let n = T::from_f64(targets.len() as f64);
        let clamped: Vec<T> = probs
            .data()
            .iter()
            .map(|p| {
                if *p < lo {
                    lo
                } else if *p > hi {
                    hi
                } else {
                    *p
                }
            })
            .collect();
        let mut loss = T::ZERO;
        for (p, t) in clamped.iter().zip(targets) {
            loss += -(*t * p.ln() + (T::ONE - *t) * (T::ONE - *p).ln());
        }
        loss = loss / n;
        let out = Tensor::scalar(loss);
        let tape_id = self.id();
        let (pc, oc) = (probs.clone(), out.clone());
        let targets = targets.to_vec();
        self.push_op(&out, move || {
            if !pc.wants_grad(tape_id) {
                return;
            }
            let dy = oc.grad_or_zeros()[0];
            let pd = pc.to_vec();
            let dx: Vec<T> = pd
                .iter()
                .zip(clamped.iter().zip(&targets))
                .map(|(raw, (p, t))| {
                    // Clamped samples sit on a flat section.
                    if *raw < lo || *raw > hi {
                        T::ZERO
                    } else {
                        dy * (*p - *t) / (*p * (T::ONE - *p)) / n
                    }
                })
                .collect();
            pc.accumulate_grad(&dx);
        });
        Ok(out)
    }

    /// `mean(logsumexp(z) - z[class])` over rows of `N x K` logits.
    pub fn softmax_cross_entropy(
        &self,
        logits: &Tensor<T>,
        classes: &[usize],
    ) -> Result<Tensor<T>> {
        let s = logits.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy expects N x K logits, got {s:?}"
            )));
        }
        let (n, k) = (s[0], s[1]);
        if classes.len() != n {
            return Err(Error::Shape(format!(
                "{n} logit rows but {} class targets",
                classes.len()
            )));
        }
        if let Some(bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::Argument(format!(
                "class index {bad} out of range for {k} classes"
            )));
        }
        let mut softmax = vec![T::ZERO; n * k];
        let mut loss = T::ZERO;
        {
            let zd = logits.data();
            for (i, row) in zd.chunks(k).enumerate() {
                let mut mx = row[0];
                for v in row {
                    mx = mx.maximum(*v);
                }
                let mut denom = T::ZERO;
                for (j, v) in row.iter().enumerate() {
                    let e = (*v - mx).exp();
                    softmax[i * k + j] = e;
                    denom += e;
                }
                for j in 0..k {
                    softmax[i * k + j] = softmax[i * k + j] / denom;
                }
                let lse = denom.ln() + mx;
                loss += lse - row[classes[i]];
            }
        }
        let n_t = T::from_f64(n as f64);
        let out = Tensor::scalar(loss / n_t);
        let tape_id = self.id();
        let (zc, oc) = (logits.clone(), out.clone());
        let classes = classes.to_vec();
        self.push_op(&out, move || {
            if !zc.wants_grad(tape_id) {
                return;
            }
            let dy = oc.grad_or_zeros()[0];
            let mut dz = softmax.clone();
            for (i, &cls) in classes.iter().enumerate() {
                dz[i * k + cls] = dz[i * k + cls] - T::ONE;
            }
            for v in &mut dz {
                *v = *v * dy / n_t;
            }
            zc.accumulate_grad(&dz);
        });
        Ok(out)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "add shapes disagree: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data: Vec<T> = x.data().iter().zip(y.data().iter()).map(|(a, b)| *a + *b).collect();
        let out = Tensor::raw(x.shape(), data);
        let tape_id = self.id();
        let (xc, yc, oc) = (x.clone(), y.clone(), out.clone());
        self.push_op(&out, move || {
            let dy = oc.grad_or_zeros();
            if xc.wants_grad(tape_id) {
                xc.accumulate_grad(&dy);
            }
            if yc.wants_grad(tape_id) {
                yc.accumulate_grad(&dy);
            }
        });
        Ok(out)
    }

    /// Concatenation along the channel axis of `N x C_i x H x W` tensors.
    pub fn concat_channels(&self, xs: &[Tensor<T>]) -> Result<Tensor<T>> {
        if xs.is_empty() {
            return Err(Error::Argument("concat_channels of no tensors".into()));
        }
        let [n, _, h, w] = shape4(&xs[0], "concat_channels input")?;
        let mut channels = Vec::with_capacity(xs.len());
        for t in xs {
            let [tn, tc, th, tw] = shape4(t, "concat_channels input")?;
            if (tn, th, tw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels spatial dims disagree: {:?} vs {:?}",
                    xs[0].shape(),
                    t.shape()
                )));
            }
            channels.push(tc);
        }
        let c_total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = vec![T::ZERO; n * c_total * plane];
        for s in 0..n {
            let mut c_at = 0;
            for (t, &tc) in xs.iter().zip(&channels) {
                let td = t.data();
                let src = &td[s * tc * plane..(s + 1) * tc * plane];
                let dst_base = (s * c_total + c_at) * plane;
                data[dst_base..dst_base + tc * plane].copy_from_slice(src);
                c_at += tc;
            }
        }
        let out = Tensor::raw(vec![n, c_total, h, w], data);
        let tape_id = self.id();
        let oc = out.clone();
        let inputs: Vec<Tensor<T>> = xs.to_vec();
        self.push_op(&out, move || {
            let dy = oc.grad_or_zeros();
            let mut c_at = 0;
            for (t, &tc) in inputs.iter().zip(&channels) {
                if t.wants_grad(tape_id) {
                    let mut dt = vec![T::ZERO; n * tc * plane];
                    for s in 0..n {
                        let src_base = (s * c_total + c_at) * plane;
                        dt[s * tc * plane..(s + 1) * tc * plane]
                            .copy_from_slice(&dy[src_base..src_base + tc * plane]);
                    }
                    t.accumulate_grad(&dt);
                }
                c_at += tc;
            }
        });
        Ok(out)
    }

    /// Mean over the spatial grid: `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = shape4(x, "global_avg_pool input")?;
        let plane = h * w;
        let inv = T::ONE / T::from_f64(plane as f64);
        let mut data = Vec::with_capacity(n * c);
        {
            let xd = x.data();
            for chunk in xd.chunks(plane) {
                let mut acc = T::ZERO;
                for v in chunk {
                    acc += *v;
                }
                data.push(acc * inv);
            }
        }
        let out = Tensor::raw(vec![n, c], data);
        let tape_id = self.id();
        let (xc, oc) = (x.clone(), out.clone());
        self.push_op(&out, move || {
            if !xc.wants_grad(tape_id) {
                return;
            }
            let dy = oc.grad_or_zeros();
            let mut dx = vec![T::ZERO; xc.numel()];
            for (chunk, g) in dx.chunks_mut(plane).zip(&dy) {
                let spread = *g * inv;
                for v in chunk {
                    *v += spread;
                }
            }
            xc.accumulate_grad(&dx);
        });
        Ok(out)
    }

    /// Copies into a new shape with the same element count.
    pub fn reshape(&self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::Shape(format!(
                "reshape from {:?} to {shape:?} changes element count",
                x.shape()
            )));
        }
        let out = Tensor::raw(shape.to_vec(), x.to_vec());
        let tape_id = self.id();
        let (xc, oc) = (x.clone(), out.clone());
        self.push_op(&out, move || {
            if xc.wants_grad(tape_id) {
                xc.accumulate_grad(&oc.grad_or_zeros());
            }
        });
        Ok(out)
    }

    /// Flattens all trailing axes: `N x ... -> N x D`.
    pub fn flatten(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.is_empty() {
            return Err(Error::Shape("flatten of a scalar".into()));
        }
        let n = s[0];
        let d: usize = s[1..].iter().product();
        self.reshape(x, &[n, d])
    }

    /// Scalar dot product against fixed weights; handy for reducing any
    /// output to a non-degenerate scalar loss.
    pub fn weighted_sum(&self, x: &Tensor<T>, weights: &[T]) -> Result<Tensor<T>> {
        if weights.len() != x.numel() {
            return Err(Error::Shape(format!(
                "weighted_sum got {} weights for {} elements",
                weights.len(),
                x.numel()
            )));
        }
        let mut acc = T::ZERO;
        for (v, w) in x.data().iter().zip(weights) {
            acc += *v * *w;
        }
        let out = Tensor::scalar(acc);
        let tape_id = self.id();
        let (xc, oc) = (x.clone(), out.clone());
        let weights = weights.to_vec();
        self.push_op(&out, move || {
            if !xc.wants_grad(tape_id) {
                return;
            }
            let g = oc.grad_or_zeros()[0];
            let dx: Vec<T> = weights.iter().map(|w| *w * g).collect();
            xc.accumulate_grad(&dx);
        });
        Ok(out)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut acc = T::ZERO;
        for v in x.data().iter() {
            acc += *v;
        }
        let out = Tensor::scalar(acc);
        let tape_id = self.id();
        let (xc, oc) = (x.clone(), out.clone());
        self.push_op(&out, move || {
            if !xc.wants_grad(tape_id) {
                return;
            }
            let g = oc.grad_or_zeros()[0];
            xc.accumulate_grad(&vec![g; xc.numel()]);
        });
        out
    }
}
