//! Hand-differentiated layer primitives on single-sample channel-major tensors.
//!
//! Each layer exposes a forward pass and a matching backward pass that
//! accumulates parameter gradients into a [`ParamGrads`] buffer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{ParamArray, ParamGrads, ParameterSet};
use crate::tensor::Tensor3;

/// `c = a · b + beta · c` for row-major `c` of shape `m × n`; `a` and `b`
/// are described by explicit row/column strides so transposes are free.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every index touched by dgemm lies within the slices given the
    // shapes and strides the callers pass (checked by the debug asserts in
    // the callers and by the lengths of the owning tensors).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square-kernel 2-D convolution with zero padding.
///
/// Weight layout `[out, in, k, k]`, bias `[out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Values a convolution keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    in_shape: (usize, usize, usize),
    /// Unfolded input, `(in·k·k) × (oh·ow)`. Empty for pointwise convolutions,
    /// which read the input directly.
    cols: Vec<f64>,
}

impl Conv2d {
    /// Registers the layer's arrays in `params` and returns the layer.
    pub fn register<R: Rng>(
        params: &mut ParameterSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = he_normal(vec![out_channels, in_channels, kernel, kernel], fan_in, rng);
        params.insert(format!("{name}.weight"), weight)?;
        params.insert(format!("{name}.bias"), ParamArray::zeros(vec![out_channels]))?;
        Ok(Self {
            weight: params.len() - 2,
            bias: params.len() - 1,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn expected_shapes(&self) -> [Vec<usize>; 2] {
        [
            vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            vec![self.out_channels],
        ]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::Input(format!(
                "convolution expects {} channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        if x.height() + 2 * self.pad < self.kernel || x.width() + 2 * self.pad < self.kernel {
            return Err(Error::Input(format!(
                "input {}x{} smaller than kernel {}",
                x.height(),
                x.width(),
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParameterSet, x: &Tensor3) -> Result<(Tensor3, ConvCache)> {
        self.check_input(x)?;
        let (oh, ow) = self.output_size(x.height(), x.width());
        let p = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let w = &params.array(self.weight).data;
        let b = &params.array(self.bias).data;

        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        {
            let od = out.data_mut();
            for (co, &bias) in b.iter().enumerate() {
                od[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = bias);
            }
        }
        let cols = if self.is_pointwise() {
            gemm(self.out_channels, kk, p, w, (kk, 1), x.data(), (p, 1), 1.0, out.data_mut());
            Vec::new()
        } else {
            let cols = self.im2col(x, oh, ow);
            gemm(self.out_channels, kk, p, w, (kk, 1), &cols, (p, 1), 1.0, out.data_mut());
            cols
        };
        Ok((
            out,
            ConvCache {
                in_shape: x.shape(),
                cols,
            },
        ))
    }

    /// Accumulates weight/bias gradients and returns the input gradient when
    /// `want_input_grad` is set.
    pub fn backward(
        &self,
        params: &ParameterSet,
        input: &Tensor3,
        cache: &ConvCache,
        dy: &Tensor3,
        grads: &mut ParamGrads,
        want_input_grad: bool,
    ) -> Option<Tensor3> {
        let (_, h, w) = cache.in_shape;
        let (oh, ow) = (dy.height(), dy.width());
        let p = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols: &[f64] = if self.is_pointwise() {
            input.data()
        } else {
            &cache.cols
        };

        gemm(
            self.out_channels,
            p,
            kk,
            dy.data(),
            (p, 1),
            cols,
            (1, p),
            1.0,
            &mut grads.arrays[self.weight],
        );
        for (co, g) in grads.arrays[self.bias].iter_mut().enumerate() {
            *g += dy.data()[co * p..(co + 1) * p].iter().sum::<f64>();
        }

        if !want_input_grad {
            return None;
        }
        let wt = &params.array(self.weight).data;
        if self.is_pointwise() {
            let mut dx = Tensor3::zeros(self.in_channels, h, w);
            gemm(kk, self.out_channels, p, wt, (1, kk), dy.data(), (p, 1), 0.0, dx.data_mut());
            return Some(dx);
        }
        let mut dcols = vec![0.0; kk * p];
        gemm(kk, self.out_channels, p, wt, (1, kk), dy.data(), (p, 1), 0.0, &mut dcols);
        Some(self.col2im(&dcols, h, w, oh, ow))
    }

    fn im2col(&self, x: &Tensor3, oh: usize, ow: usize) -> Vec<f64> {
        let (c, h, w) = x.shape();
        let k = self.kernel;
        let p = oh * ow;
        let mut cols = vec![0.0; c * k * k * p];
        let xd = x.data();
        for ci in 0..c {
            let plane = &xd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if self.stride == 1 {
                            // contiguous run of valid columns
                            let off = kx as isize - self.pad as isize;
                            let lo = (-off).max(0) as usize;
                            let hi = ((w as isize - off).min(ow as isize)).max(0) as usize;
                            if lo < hi {
                                let s0 = (lo as isize + off) as usize;
                                drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Tensor3 {
        let k = self.kernel;
        let p = oh * ow;
        let mut dx = Tensor3::zeros(self.in_channels, h, w);
        let dd = dx.data_mut();
        for ci in 0..self.in_channels {
            let plane = &mut dd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &src[oy * ow..(oy + 1) * ow];
                        for (ox, &g) in srow.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// 2×2, stride-2 transposed convolution (learned up-sampling).
///
/// Weight layout `[in, out, 2, 2]`, bias `[out]`.
#[derive(Clone, Debug)]
pub struct UpConv2x2 {
    pub weight: usize,
    pub bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UpConv2x2 {
    pub fn register<R: Rng>(
        params: &mut ParameterSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // each output pixel receives exactly `in_channels` contributions
        let weight = he_normal(vec![in_channels, out_channels, 2, 2], in_channels, rng);
        params.insert(format!("{name}.weight"), weight)?;
        params.insert(format!("{name}.bias"), ParamArray::zeros(vec![out_channels]))?;
        Ok(Self {
            weight: params.len() - 2,
            bias: params.len() - 1,
            in_channels,
            out_channels,
        })
    }

    pub fn expected_shapes(&self) -> [Vec<usize>; 2] {
        [
            vec![self.in_channels, self.out_channels, 2, 2],
            vec![self.out_channels],
        ]
    }

    pub fn forward(&self, params: &ParameterSet, x: &Tensor3) -> Result<Tensor3> {
        if x.channels() != self.in_channels {
            return Err(Error::Input(format!(
                "up-convolution expects {} channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let p = h * w;
        let m = self.out_channels * 4;
        let wt = &params.array(self.weight).data;
        let b = &params.array(self.bias).data;
        let mut z = vec![0.0; m * p];
        gemm(m, self.in_channels, p, wt, (1, m), x.data(), (p, 1), 0.0, &mut z);

        let mut out = Tensor3::zeros(self.out_channels, 2 * h, 2 * w);
        let ow = 2 * w;
        let od = out.data_mut();
        for co in 0..self.out_channels {
            let plane = &mut od[co * 4 * p..(co + 1) * 4 * p];
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let zr = &z[(co * 4 + d) * p..(co * 4 + d + 1) * p];
                for y in 0..h {
                    let orow = &mut plane[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                    for x in 0..w {
                        orow[2 * x + dx] = zr[y * w + x] + b[co];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        params: &ParameterSet,
        input: &Tensor3,
        dy: &Tensor3,
        grads: &mut ParamGrads,
    ) -> Tensor3 {
        let (h, w) = (input.height(), input.width());
        let p = h * w;
        let m = self.out_channels * 4;
        let ow = 2 * w;
        let mut dz = vec![0.0; m * p];
        let dyd = dy.data();
        for co in 0..self.out_channels {
            let plane = &dyd[co * 4 * p..(co + 1) * 4 * p];
            let mut bsum = 0.0;
            for d in 0..4 {
                let (oy, ox) = (d / 2, d % 2);
                let zr = &mut dz[(co * 4 + d) * p..(co * 4 + d + 1) * p];
                for y in 0..h {
                    let row = &plane[(2 * y + oy) * ow..(2 * y + oy + 1) * ow];
                    for x in 0..w {
                        let g = row[2 * x + ox];
                        zr[y * w + x] = g;
                        bsum += g;
                    }
                }
            }
            grads.arrays[self.bias][co] += bsum;
        }
        gemm(
            self.in_channels,
            p,
            m,
            input.data(),
            (p, 1),
            &dz,
            (1, p),
            1.0,
            &mut grads.arrays[self.weight],
        );
        let wt = &params.array(self.weight).data;
        let mut dx = Tensor3::zeros(self.in_channels, h, w);
        gemm(self.in_channels, m, p, wt, (m, 1), &dz, (p, 1), 0.0, dx.data_mut());
        dx
    }
}

fn he_normal<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> ParamArray {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    ParamArray { shape, data }
}

/// In-place leaky rectifier.
pub fn leaky_relu_inplace(x: &mut Tensor3, slope: f64) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Backward of [`leaky_relu_inplace`] given its output.
pub fn leaky_relu_backward_inplace(output: &Tensor3, grad: &mut Tensor3, slope: f64) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g *= slope;
        }
    }
}

const NORM_EPS: f64 = 1e-5;

/// Per-channel standardization over the spatial axes, without learned affine
/// terms. Returns the output and the per-channel inverse standard deviations.
pub fn instance_norm(x: &Tensor3) -> (Tensor3, Vec<f64>) {
    let (c, h, w) = x.shape();
    let n = h * w;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(c);
    for plane in out.data_mut().chunks_mut(n) {
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        for v in plane.iter_mut() {
            *v = (*v - mean) * s;
        }
        inv_std.push(s);
    }
    (out, inv_std)
}

/// Backward of [`instance_norm`] given its output and inverse deviations.
pub fn instance_norm_backward(output: &Tensor3, inv_std: &[f64], dy: &Tensor3) -> Tensor3 {
    let n = output.plane_len();
    let mut dx = dy.clone();
    for ((g, y), &s) in dx
        .data_mut()
        .chunks_mut(n)
        .zip(output.data().chunks(n))
        .zip(inv_std)
    {
        let mg = g.iter().sum::<f64>() / n as f64;
        let mgy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for (gi, &yi) in g.iter_mut().zip(y) {
            *gi = s * (*gi - mg - yi * mgy);
        }
    }
    dx
}

/// 2×2 max pooling; returns the pooled tensor and the flat argmax of each window.
pub fn max_pool2x2(x: &Tensor3) -> (Tensor3, Vec<usize>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(c, oh, ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let xd = x.data();
    let od = out.data_mut();
    let mut o = 0;
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let cands = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                od[o] = xd[best];
                arg.push(best);
                o += 1;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2x2_backward(
    in_shape: (usize, usize, usize),
    argmax: &[usize],
    dy: &Tensor3,
) -> Tensor3 {
    let mut dx = Tensor3::zeros(in_shape.0, in_shape.1, in_shape.2);
    let dd = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dd[i] += g;
    }
    dx
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels(logits: &Tensor3) -> Tensor3 {
    let (c, h, w) = logits.shape();
    let n = h * w;
    let mut out = Tensor3::zeros(c, h, w);
    let ld = logits.data();
    let od = out.data_mut();
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for ch in 0..c {
            mx = mx.max(ld[ch * n + i]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            let e = (ld[ch * n + i] - mx).exp();
            od[ch * n + i] = e;
            sum += e;
        }
        for ch in 0..c {
            od[ch * n + i] /= sum;
        }
    }
    out
}

/// Gradient w.r.t. logits given softmax output `prob` and upstream `dprob`.
pub fn softmax_channels_backward(prob: &Tensor3, dprob: &Tensor3) -> Tensor3 {
    let (c, h, w) = prob.shape();
    let n = h * w;
    let mut dz = Tensor3::zeros(c, h, w);
    let (pd, gd) = (prob.data(), dprob.data());
    let zd = dz.data_mut();
    for i in 0..n {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += pd[ch * n + i] * gd[ch * n + i];
        }
        for ch in 0..c {
            zd[ch * n + i] = pd[ch * n + i] * (gd[ch * n + i] - dot);
        }
    }
    dz
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor3::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let mut x = random_tensor(2, 5, 4, 3);
        x.scale(7.0);
        let (y, inv) = instance_norm(&x);
        for plane in y.data().chunks(20) {
            let m = plane.iter().sum::<f64>() / 20.0;
            let v = plane.iter().map(|a| a * a).sum::<f64>() / 20.0 - m * m;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-5);
        }
        assert_eq!(inv.len(), 2);
    }

    #[test]
    fn instance_norm_backward_matches_differences() {
        let x = random_tensor(2, 3, 3, 4);
        let w = random_tensor(2, 3, 3, 5);
        let f = |x: &Tensor3| -> f64 {
            instance_norm(x).0.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (y, inv) = instance_norm(&x);
        let dx = instance_norm_backward(&y, &inv, &w);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let num = (f(&p) - f(&m)) / (2.0 * h);
            assert!((num - dx.data()[i]).abs() < 1e-6, "{i}: {num} vs {}", dx.data()[i]);
        }
    }

    /// Direct definition of a padded, strided cross-correlation.
    fn naive_conv(layer: &Conv2d, params: &ParameterSet, x: &Tensor3) -> Tensor3 {
        let (oh, ow) = layer.output_size(x.height(), x.width());
        let w = &params.array(layer.weight).data;
        let b = &params.array(layer.bias).data;
        let k = layer.kernel;
        let mut out = Tensor3::zeros(layer.out_channels, oh, ow);
        for co in 0..layer.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[co];
                    for ci in 0..layer.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * layer.stride + ky) as isize - layer.pad as isize;
                                let ix = (ox * layer.stride + kx) as isize - layer.pad as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= x.height() as isize
                                    || ix >= x.width() as isize
                                {
                                    continue;
                                }
                                s += w[((co * layer.in_channels + ci) * k + ky) * k + kx]
                                    * x.get(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(co, oy, ox, s);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut params = ParameterSet::new();
            let layer = Conv2d::register(&mut params, "c", 3, 5, k, s, p, &mut rng).unwrap();
            params.array_mut(layer.bias).data = vec![0.1, -0.2, 0.3, 0.0, 0.5];
            let x = random_tensor(3, 9, 8, 7);
            let (fast, _) = layer.forward(&params, &x).unwrap();
            let slow = naive_conv(&layer, &params, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_input_grad_is_adjoint() {
        // <conv(x) - b, y> == <x, conv^T(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParameterSet::new();
        let layer = Conv2d::register(&mut params, "c", 2, 3, 3, 2, 1, &mut rng).unwrap();
        let x = random_tensor(2, 7, 6, 1);
        let (y, cache) = layer.forward(&params, &x).unwrap();
        let dy = random_tensor(3, y.height(), y.width(), 2);
        let mut grads = params.zero_grads();
        let dx = layer
            .backward(&params, &x, &cache, &dy, &mut grads, true)
            .unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        // bias is zero at init
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn up_conv_places_each_input_in_a_2x2_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParameterSet::new();
        let layer = UpConv2x2::register(&mut params, "u", 2, 1, &mut rng).unwrap();
        let x = random_tensor(2, 3, 3, 9);
        let y = layer.forward(&params, &x).unwrap();
        assert_eq!(y.shape(), (1, 6, 6));
        let w = &params.array(layer.weight).data;
        for yy in 0..3 {
            for xx in 0..3 {
                for d in 0..4 {
                    let expect = (0..2)
                        .map(|ci| w[ci * 4 + d] * x.get(ci, yy, xx))
                        .sum::<f64>();
                    let got = y.get(0, 2 * yy + d / 2, 2 * xx + d % 2);
                    assert!((expect - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = random_tensor(3, 4, 4, 13);
        let p = softmax_channels(&z);
        for i in 0..16 {
            let s: f64 = (0..3).map(|c| p.data()[c * 16 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
