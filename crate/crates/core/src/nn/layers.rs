//! Convolution layers with explicit backward passes.

use rand_chacha::ChaCha8Rng;

use super::{join_name, matmul, Mat, Module, Scalar, Tensor};

/// Upper bound on im2col scratch size for 3D convolutions (elements).
const COL_CHUNK_ELEMS: usize = 1 << 21;

/// Same-padded dilated 1D convolution over `[channels, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    /// `[out_ch, in_ch * kernel]`, row `(ci * kernel + j)` ordering.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    /// Taps cover `t - (k-1)*d ..= t` instead of being centred on `t`.
    pub causal: bool,
}

pub struct Conv1dCache<T> {
    cols: Vec<T>,
    n: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd for same padding");
        assert!(dilation >= 1);
        let fan_in = (in_ch * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Conv1d {
            weight: Tensor::uniform(&[out_ch, in_ch * kernel], bound, rng),
            bias: Tensor::uniform(&[out_ch], bound, rng),
            in_ch,
            out_ch,
            kernel,
            dilation,
            causal: false,
        }
    }

    pub fn causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    #[inline]
    fn tap_offset(&self, j: usize) -> isize {
        let anchor = if self.causal { self.kernel - 1 } else { (self.kernel - 1) / 2 };
        (j as isize - anchor as isize) * self.dilation as isize
    }

    pub fn pointwise(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(in_ch, out_ch, 1, 1, rng)
    }

    fn im2col(&self, x: &Mat<T>) -> Vec<T> {
        if self.kernel == 1 {
            return x.data.clone();
        }
        let n = x.cols;
        let mut cols = vec![T::zero(); self.in_ch * self.kernel * n];
        for ci in 0..self.in_ch {
            let src = x.row(ci);
            for j in 0..self.kernel {
                let off = self.tap_offset(j);
                let dst = &mut cols[(ci * self.kernel + j) * n..(ci * self.kernel + j + 1) * n];
                let t_lo = (-off).max(0) as usize;
                let t_hi = ((n as isize - off).min(n as isize)).max(0) as usize;
                if t_lo < t_hi {
                    let s_lo = (t_lo as isize + off) as usize;
                    dst[t_lo..t_hi].copy_from_slice(&src[s_lo..s_lo + (t_hi - t_lo)]);
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[T], n: usize) -> Mat<T> {
        if self.kernel == 1 {
            return Mat::from_vec(self.in_ch, n, dcols.to_vec());
        }
        let mut dx = Mat::zeros(self.in_ch, n);
        for ci in 0..self.in_ch {
            let dst = dx.row_mut(ci);
            for j in 0..self.kernel {
                let off = self.tap_offset(j);
                let src = &dcols[(ci * self.kernel + j) * n..(ci * self.kernel + j + 1) * n];
                let t_lo = (-off).max(0) as usize;
                let t_hi = ((n as isize - off).min(n as isize)).max(0) as usize;
                for t in t_lo..t_hi {
                    dst[(t as isize + off) as usize] += src[t];
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, Conv1dCache<T>) {
        assert_eq!(x.rows, self.in_ch, "conv1d input channels");
        let n = x.cols;
        let cols = self.im2col(x);
        let mut out = Mat::zeros(self.out_ch, n);
        matmul(
            false,
            false,
            self.out_ch,
            self.in_ch * self.kernel,
            n,
            T::one(),
            &self.weight.data,
            &cols,
            T::zero(),
            &mut out.data,
        );
        for (co, &b) in self.bias.data.iter().enumerate() {
            out.row_mut(co).iter_mut().for_each(|v| *v += b);
        }
        (out, Conv1dCache { cols, n })
    }

    pub fn backward(
        &self,
        cache: &Conv1dCache<T>,
        dy: &Mat<T>,
        grad: Option<&mut Conv1d<T>>,
        need_dx: bool,
    ) -> Option<Mat<T>> {
        let n = cache.n;
        let k = self.in_ch * self.kernel;
        if let Some(g) = grad {
            matmul(false, true, self.out_ch, n, k, T::one(), &dy.data, &cache.cols, T::one(), &mut g.weight.data);
            for co in 0..self.out_ch {
                g.bias.data[co] += dy.row(co).iter().copied().sum::<T>();
            }
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); k * n];
        matmul(true, false, k, self.out_ch, n, T::one(), &self.weight.data, &dy.data, T::zero(), &mut dcols);
        Some(self.col2im(&dcols, n))
    }
}

impl<T: Scalar> Module<T> for Conv1d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join_name(prefix, "weight"), &self.weight);
        f(join_name(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join_name(prefix, "weight"), &mut self.weight);
        f(join_name(prefix, "bias"), &mut self.bias);
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Mat<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes `dy` where the forward activation was clipped.
pub fn relu_backward_inplace<T: Scalar>(dy: &mut Mat<T>, activated: &[T]) {
    for (g, &a) in dy.data.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Dilated residual block: `x + pointwise(relu(dilated_conv(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub dilated: Conv1d<T>,
    pub pointwise: Conv1d<T>,
}

pub struct ResidualCache<T> {
    dilated: Conv1dCache<T>,
    pointwise: Conv1dCache<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(channels: usize, kernel: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualBlock {
            dilated: Conv1d::new(channels, channels, kernel, dilation, rng),
            pointwise: Conv1d::pointwise(channels, channels, rng),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, ResidualCache<T>) {
        let (mut h, c1) = self.dilated.forward(x);
        relu_inplace(&mut h);
        let (mut y, c2) = self.pointwise.forward(&h);
        y.add_assign(x);
        (
            y,
            ResidualCache {
                dilated: c1,
                pointwise: c2,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ResidualCache<T>,
        dy: &Mat<T>,
        grad: Option<&mut ResidualBlock<T>>,
        need_dx: bool,
    ) -> Option<Mat<T>> {
        let (g1, g2) = match grad {
            Some(g) => (Some(&mut g.dilated), Some(&mut g.pointwise)),
            None => (None, None),
        };
        let mut dh = self
            .pointwise
            .backward(&cache.pointwise, dy, g2, true)
            .expect("dx requested");
        // the pointwise cache holds the post-ReLU activation as its input
        relu_backward_inplace(&mut dh, &cache.pointwise.cols);
        let dx = self.dilated.backward(&cache.dilated, &dh, g1, need_dx)?;
        let mut dx = dx;
        dx.add_assign(dy);
        Some(dx)
    }
}

impl<T: Scalar> Module<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.dilated.visit(&join_name(prefix, "dilated"), f);
        self.pointwise.visit(&join_name(prefix, "pointwise"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.dilated.visit_mut(&join_name(prefix, "dilated"), f);
        self.pointwise.visit_mut(&join_name(prefix, "pointwise"), f);
    }
}

/// Volume laid out `[channel][frame][height][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vol<T> {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Vol<T> {
    pub fn zeros(channels: usize, frames: usize, height: usize, width: usize) -> Self {
        Vol {
            channels,
            frames,
            height,
            width,
            data: vec![T::zero(); channels * frames * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, t: usize, h: usize, w: usize) -> usize {
        ((c * self.frames + t) * self.height + h) * self.width + w
    }

    /// Non-overlapping spatial average pooling.
    pub fn avg_pool_spatial(&self, ph: usize, pw: usize) -> Vol<T> {
        if ph == 1 && pw == 1 {
            return self.clone();
        }
        let (ho, wo) = (self.height / ph, self.width / pw);
        let mut out = Vol::zeros(self.channels, self.frames, ho, wo);
        let scale = T::one() / T::of((ph * pw) as f64);
        for c in 0..self.channels {
            for t in 0..self.frames {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut s = T::zero();
                        for a in 0..ph {
                            for b in 0..pw {
                                s += self.data[self.idx(c, t, i * ph + a, j * pw + b)];
                            }
                        }
                        let o = out.idx(c, t, i, j);
                        out.data[o] = s * scale;
                    }
                }
            }
        }
        out
    }

    /// Mean over the spatial axes, giving `[channels, frames]`.
    pub fn spatial_mean(&self) -> Mat<T> {
        let hw = self.height * self.width;
        let scale = T::one() / T::of(hw as f64);
        let mut out = Mat::zeros(self.channels, self.frames);
        for c in 0..self.channels {
            for t in 0..self.frames {
                let start = self.idx(c, t, 0, 0);
                let s: T = self.data[start..start + hw].iter().copied().sum();
                *out.at_mut(c, t) = s * scale;
            }
        }
        out
    }

    pub fn spatial_mean_backward(dy: &Mat<T>, height: usize, width: usize) -> Vol<T> {
        let hw = height * width;
        let scale = T::one() / T::of(hw as f64);
        let mut out = Vol::zeros(dy.rows, dy.cols, height, width);
        for c in 0..dy.rows {
            for t in 0..dy.cols {
                let g = dy.at(c, t) * scale;
                let start = out.idx(c, t, 0, 0);
                out.data[start..start + hw].iter_mut().for_each(|v| *v = g);
            }
        }
        out
    }
}

/// Same-padded 3D convolution over (frame, height, width) followed by ReLU
/// and non-overlapping spatial max pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dStage<T> {
    /// `[out_ch, in_ch * kt * kh * kw]`, row `((ci * kt + a) * kh + b) * kw + c`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub in_ch: usize,
    pub out_ch: usize,
    /// Kernel extent as (height, width, time); all odd.
    pub kernel: [usize; 3],
    /// Pool extent as (height, width).
    pub pool: [usize; 2],
}

pub struct Conv3dCache<T> {
    input: Vol<T>,
    /// Flat position of the pooled maximum inside the pre-pool chunk plane,
    /// `u32::MAX` where the ReLU clipped it.
    argmax: Vec<u32>,
    out_shape: (usize, usize),
}

impl<T: Scalar> Conv3dStage<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: [usize; 3], pool: [usize; 2], rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel.iter().all(|k| k % 2 == 1), "kernel extents must be odd");
        assert!(pool.iter().all(|&p| p >= 1));
        let k = in_ch * kernel.iter().product::<usize>();
        let bound = 1.0 / (k as f64).sqrt();
        Conv3dStage {
            weight: Tensor::uniform(&[out_ch, k], bound, rng),
            bias: Tensor::uniform(&[out_ch], bound, rng),
            in_ch,
            out_ch,
            kernel,
            pool,
        }
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    fn chunk_frames(&self, x: &Vol<T>) -> usize {
        let per_frame = self.col_rows() * x.height * x.width;
        (COL_CHUNK_ELEMS / per_frame.max(1)).clamp(1, x.frames.max(1))
    }

    fn im2col(&self, x: &Vol<T>, t0: usize, tc: usize, cols: &mut [T]) {
        let [kh, kw, kt] = self.kernel;
        let (hh, hw, ht) = ((kh - 1) / 2, (kw - 1) / 2, (kt - 1) / 2);
        let (h, w) = (x.height, x.width);
        let plane = tc * h * w;
        cols.iter_mut().for_each(|v| *v = T::zero());
        for ci in 0..self.in_ch {
            for a in 0..kt {
                for b in 0..kh {
                    for c in 0..kw {
                        let row = ((ci * kt + a) * kh + b) * kw + c;
                        let dst = &mut cols[row * plane..(row + 1) * plane];
                        let d_lo = hw.saturating_sub(c);
                        let d_hi = (w + hw).saturating_sub(c).min(w);
                        if d_lo >= d_hi {
                            continue;
                        }
                        for tl in 0..tc {
                            let t = (t0 + tl + a) as isize - ht as isize;
                            if t < 0 || t >= x.frames as isize {
                                continue;
                            }
                            for r in 0..h {
                                let rr = (r + b) as isize - hh as isize;
                                if rr < 0 || rr >= h as isize {
                                    continue;
                                }
                                let src0 = x.idx(ci, t as usize, rr as usize, 0);
                                let dst0 = (tl * h + r) * w;
                                let s = src0 + d_lo + c - hw;
                                dst[dst0 + d_lo..dst0 + d_hi]
                                    .copy_from_slice(&x.data[s..s + (d_hi - d_lo)]);
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, dcols: &[T], t0: usize, tc: usize, dx: &mut Vol<T>) {
        let [kh, kw, kt] = self.kernel;
        let (hh, hw, ht) = ((kh - 1) / 2, (kw - 1) / 2, (kt - 1) / 2);
        let (h, w) = (dx.height, dx.width);
        let plane = tc * h * w;
        for ci in 0..self.in_ch {
            for a in 0..kt {
                for b in 0..kh {
                    for c in 0..kw {
                        let row = ((ci * kt + a) * kh + b) * kw + c;
                        let src = &dcols[row * plane..(row + 1) * plane];
                        let d_lo = hw.saturating_sub(c);
                        let d_hi = (w + hw).saturating_sub(c).min(w);
                        if d_lo >= d_hi {
                            continue;
                        }
                        for tl in 0..tc {
                            let t = (t0 + tl + a) as isize - ht as isize;
                            if t < 0 || t >= dx.frames as isize {
                                continue;
                            }
                            for r in 0..h {
                                let rr = (r + b) as isize - hh as isize;
                                if rr < 0 || rr >= h as isize {
                                    continue;
                                }
                                let d0 = dx.idx(ci, t as usize, rr as usize, 0) + d_lo + c - hw;
                                let s0 = (tl * h + r) * w + d_lo;
                                for (dv, &sv) in dx.data[d0..d0 + (d_hi - d_lo)]
                                    .iter_mut()
                                    .zip(&src[s0..s0 + (d_hi - d_lo)])
                                {
                                    *dv += sv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.pool[0], w / self.pool[1])
    }

    pub fn forward(&self, x: &Vol<T>) -> (Vol<T>, Conv3dCache<T>) {
        assert_eq!(x.channels, self.in_ch, "conv3d input channels");
        let (h, w) = (x.height, x.width);
        let (ho, wo) = self.output_hw(h, w);
        assert!(ho >= 1 && wo >= 1, "pooling reduces a spatial axis to zero");
        let [ph, pw] = self.pool;
        let rows = self.col_rows();
        let chunk = self.chunk_frames(x);
        let mut out = Vol::zeros(self.out_ch, x.frames, ho, wo);
        let mut argmax = vec![u32::MAX; out.data.len()];
        let mut cols = vec![T::zero(); rows * chunk * h * w];
        let mut z = vec![T::zero(); self.out_ch * chunk * h * w];
        let mut t0 = 0;
        while t0 < x.frames {
            let tc = chunk.min(x.frames - t0);
            let plane = tc * h * w;
            self.im2col(x, t0, tc, &mut cols[..rows * plane]);
            matmul(
                false,
                false,
                self.out_ch,
                rows,
                plane,
                T::one(),
                &self.weight.data,
                &cols[..rows * plane],
                T::zero(),
                &mut z[..self.out_ch * plane],
            );
            for co in 0..self.out_ch {
                let b = self.bias.data[co];
                let zc = &z[co * plane..(co + 1) * plane];
                for tl in 0..tc {
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut best = T::neg_infinity();
                            let mut best_pos = 0usize;
                            for a in 0..ph {
                                for bb in 0..pw {
                                    let pos = (tl * h + i * ph + a) * w + j * pw + bb;
                                    if zc[pos] > best {
                                        best = zc[pos];
                                        best_pos = pos;
                                    }
                                }
                            }
                            let v = best + b;
                            let o = out.idx(co, t0 + tl, i, j);
                            if v > T::zero() {
                                out.data[o] = v;
                                argmax[o] = best_pos as u32;
                            }
                        }
                    }
                }
            }
            t0 += tc;
        }
        (
            out,
            Conv3dCache {
                input: x.clone(),
                argmax,
                out_shape: (ho, wo),
            },
        )
    }

    pub fn backward(
        &self,
        cache: &Conv3dCache<T>,
        dy: &Vol<T>,
        grad: Option<&mut Conv3dStage<T>>,
        need_dx: bool,
    ) -> Option<Vol<T>> {
        let x = &cache.input;
        let (h, w) = (x.height, x.width);
        let (ho, wo) = cache.out_shape;
        let rows = self.col_rows();
        let chunk = self.chunk_frames(x);
        let mut grad = grad;
        let mut dx = need_dx.then(|| Vol::zeros(x.channels, x.frames, h, w));
        let mut cols = vec![T::zero(); rows * chunk * h * w];
        let mut dz = vec![T::zero(); self.out_ch * chunk * h * w];
        let mut dcols = if need_dx {
            vec![T::zero(); rows * chunk * h * w]
        } else {
            Vec::new()
        };
        let mut t0 = 0;
        while t0 < x.frames {
            let tc = chunk.min(x.frames - t0);
            let plane = tc * h * w;
            let dzc = &mut dz[..self.out_ch * plane];
            dzc.iter_mut().for_each(|v| *v = T::zero());
            let mut any = false;
            for co in 0..self.out_ch {
                for tl in 0..tc {
                    for i in 0..ho {
                        for j in 0..wo {
                            let o = dy.idx(co, t0 + tl, i, j);
                            let am = cache.argmax[o];
                            if am != u32::MAX {
                                dzc[co * plane + am as usize] = dy.data[o];
                                any = true;
                            }
                        }
                    }
                }
            }
            if any {
                self.im2col(x, t0, tc, &mut cols[..rows * plane]);
                if let Some(g) = grad.as_deref_mut() {
                    matmul(false, true, self.out_ch, plane, rows, T::one(), dzc, &cols[..rows * plane], T::one(), &mut g.weight.data);
                    for co in 0..self.out_ch {
                        g.bias.data[co] += dzc[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let dc = &mut dcols[..rows * plane];
                    matmul(true, false, rows, self.out_ch, plane, T::one(), &self.weight.data, dzc, T::zero(), dc);
                    self.col2im_add(dc, t0, tc, dx);
                }
            }
            t0 += tc;
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Conv3dStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join_name(prefix, "weight"), &self.weight);
        f(join_name(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join_name(prefix, "weight"), &mut self.weight);
        f(join_name(prefix, "bias"), &mut self.bias);
    }
}
