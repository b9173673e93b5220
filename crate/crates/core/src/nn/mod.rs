//! Minimal convolutional building blocks with explicit backward passes.
//!
//! Parameters live in one flat `f32` buffer per network; layers only store
//! their offsets into it. Activations are NCHW tensors.

mod adam;

pub use adam::{Adam, AdamConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor buffer length");
        Self { n, c, h, w, data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, b: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[b * len..(b + 1) * len]
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((b * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// 3x3 convolution with zero padding 1 and stride 1 or 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    /// Start of the `cout x cin x 9` weights; the `cout` biases follow.
    pub offset: usize,
}

/// What the backward pass of a convolution needs from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f32>,
    n: usize,
    h: usize,
    w: usize,
}

impl Conv3x3 {
    pub fn new(cin: usize, cout: usize, stride: usize, offset: usize) -> Self {
        assert!(stride == 1 || stride == 2);
        Self {
            cin,
            cout,
            stride,
            offset,
        }
    }

    #[inline]
    fn k(&self) -> usize {
        self.cin * 9
    }

    pub fn num_params(&self) -> usize {
        self.cout * self.k() + self.cout
    }

    pub fn end(&self) -> usize {
        self.offset + self.num_params()
    }

    fn out_dim(&self, d: usize) -> usize {
        (d - 1) / self.stride + 1
    }

    /// Fan-in normal initialization scaled by `gain`, zero bias.
    pub fn init(&self, params: &mut [f32], gain: f32, rng: &mut impl Rng) {
        let std = gain * (2.0 / self.k() as f32).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let (w, b) = params[self.offset..self.end()].split_at_mut(self.cout * self.k());
        for v in w.iter_mut() {
            *v = normal.sample(rng);
        }
        b.fill(0.0);
    }

    pub fn bias_mut<'a>(&self, params: &'a mut [f32]) -> &'a mut [f32] {
        let start = self.offset + self.cout * self.k();
        &mut params[start..start + self.cout]
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32]) {
        let (ho, wo) = (self.out_dim(h), self.out_dim(w));
        let p = ho * wo;
        let s = self.stride;
        for ci in 0..self.cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - 1;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, dx: &mut [f32]) {
        let (ho, wo) = (self.out_dim(h), self.out_dim(w));
        let p = ho * wo;
        let s = self.stride;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &[f32], x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = (self.out_dim(x.h), self.out_dim(x.w));
        let p = ho * wo;
        let k = self.k();
        let weights = &params[self.offset..self.offset + self.cout * k];
        let bias = &params[self.offset + self.cout * k..self.end()];
        let mut out = Tensor::zeros(x.n, self.cout, ho, wo);
        let mut cols = vec![0.0f32; x.n * k * p];
        for b in 0..x.n {
            let col = &mut cols[b * k * p..(b + 1) * k * p];
            self.im2col(x.sample(b), x.h, x.w, col);
            let dst = out.sample_mut(b);
            // SAFETY: every pointer/stride pair describes a buffer of the
            // stated row-major shape: weights cout x k, cols k x p, dst cout x p.
            unsafe {
                matrixmultiply::sgemm(
                    self.cout,
                    k,
                    p,
                    1.0,
                    weights.as_ptr(),
                    k as isize,
                    1,
                    col.as_ptr(),
                    p as isize,
                    1,
                    0.0,
                    dst.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            for (co, row) in dst.chunks_mut(p).enumerate() {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        (
            out,
            ConvCache {
                cols,
                n: x.n,
                h: x.h,
                w: x.w,
            },
        )
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f32],
        cache: &ConvCache,
        dout: &Tensor,
        grads: &mut [f32],
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let (ho, wo) = (self.out_dim(cache.h), self.out_dim(cache.w));
        let p = ho * wo;
        let k = self.k();
        assert_eq!((dout.c, dout.h, dout.w), (self.cout, ho, wo), "conv grad shape");
        let weights = &params[self.offset..self.offset + self.cout * k];
        let (gw, gb) = grads[self.offset..self.end()].split_at_mut(self.cout * k);
        let mut dx = need_input_grad.then(|| Tensor::zeros(cache.n, self.cin, cache.h, cache.w));
        let mut dcols = vec![0.0f32; k * p];
        for b in 0..cache.n {
            let col = &cache.cols[b * k * p..(b + 1) * k * p];
            let g = dout.sample(b);
            for (co, row) in g.chunks(p).enumerate() {
                gb[co] += row.iter().sum::<f32>();
            }
            // SAFETY: g is cout x p, col^T is p x k (column stride p), gw is cout x k.
            unsafe {
                matrixmultiply::sgemm(
                    self.cout,
                    p,
                    k,
                    1.0,
                    g.as_ptr(),
                    p as isize,
                    1,
                    col.as_ptr(),
                    1,
                    p as isize,
                    1.0,
                    gw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // SAFETY: weights^T is k x cout (row stride 1, column stride k),
                // g is cout x p, dcols is k x p.
                unsafe {
                    matrixmultiply::sgemm(
                        k,
                        self.cout,
                        p,
                        1.0,
                        weights.as_ptr(),
                        1,
                        k as isize,
                        g.as_ptr(),
                        p as isize,
                        1,
                        0.0,
                        dcols.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
                self.col2im(&dcols, cache.h, cache.w, dx.sample_mut(b));
            }
        }
        dx
    }
}

/// In-place ELU.
pub fn elu(x: &mut Tensor) {
    for v in x.data.iter_mut() {
        if *v < 0.0 {
            *v = v.exp_m1();
        }
    }
}

/// ELU backward from the activation output.
pub fn elu_backward(y: &Tensor, dy: &mut Tensor) {
    for (g, &o) in dy.data.iter_mut().zip(&y.data) {
        if o <= 0.0 {
            *g *= o + 1.0;
        }
    }
}

pub fn sigmoid(x: &mut Tensor) {
    for v in x.data.iter_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

/// Sigmoid backward from the activation output.
pub fn sigmoid_backward(y: &Tensor, dy: &mut Tensor) {
    for (g, &o) in dy.data.iter_mut().zip(&y.data) {
        *g *= o * (1.0 - o);
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, h2, w2);
    for (src, dst) in x.data.chunks(x.plane()).zip(out.data.chunks_mut(h2 * w2)) {
        for y in 0..h2 {
            let srow = &src[(y / 2) * x.w..(y / 2 + 1) * x.w];
            let drow = &mut dst[y * w2..(y + 1) * w2];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Tensor::zeros(dy.n, dy.c, h, w);
    for (src, dst) in dy.data.chunks(dy.plane()).zip(out.data.chunks_mut(h * w)) {
        for y in 0..dy.h {
            for x in 0..dy.w {
                dst[(y / 2) * w + x / 2] += src[y * dy.w + x];
            }
        }
    }
    out
}

/// Channel concatenation.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shapes");
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = out.sample_mut(i);
        let (da, db) = dst.split_at_mut(a.sample_len());
        da.copy_from_slice(a.sample(i));
        db.copy_from_slice(b.sample(i));
    }
    out
}

/// Splits a gradient of [`concat`] back into its two parts.
pub fn split_channels(d: &Tensor, c_first: usize) -> (Tensor, Tensor) {
    let mut a = Tensor::zeros(d.n, c_first, d.h, d.w);
    let mut b = Tensor::zeros(d.n, d.c - c_first, d.h, d.w);
    let cut = c_first * d.plane();
    for i in 0..d.n {
        let src = d.sample(i);
        a.sample_mut(i).copy_from_slice(&src[..cut]);
        b.sample_mut(i).copy_from_slice(&src[cut..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive_conv(conv: &Conv3x3, params: &[f32], x: &Tensor) -> Tensor {
        let ho = (x.h - 1) / conv.stride + 1;
        let wo = (x.w - 1) / conv.stride + 1;
        let mut out = Tensor::zeros(x.n, conv.cout, ho, wo);
        let k = conv.cin * 9;
        for b in 0..x.n {
            for co in 0..conv.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = params[conv.offset + conv.cout * k + co];
                        for ci in 0..conv.cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * conv.stride + ky) as isize - 1;
                                    let ix = (ox * conv.stride + kx) as isize - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        acc += params[conv.offset + co * k + ci * 9 + ky * 3 + kx]
                                            * x.at(b, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.data[((b * conv.cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2] {
            let conv = Conv3x3::new(3, 5, stride, 7);
            let mut params = vec![0.0; conv.end()];
            conv.init(&mut params, 1.0, &mut rng);
            conv.bias_mut(&mut params).iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
            let x = random_tensor(2, 3, 6, 8, &mut rng);
            let (fast, _) = conv.forward(&params, &x);
            let slow = naive_conv(&conv, &params, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dout, conv(x)> is linear in x and in the weights, so the input and
        // weight gradients must satisfy the adjoint identities exactly (up
        // to rounding).
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for stride in [1, 2] {
            let conv = Conv3x3::new(2, 3, stride, 0);
            let mut params = vec![0.0; conv.end()];
            conv.init(&mut params, 1.0, &mut rng);
            let x = random_tensor(1, 2, 5, 6, &mut rng);
            let (y, cache) = conv.forward(&params, &x);
            let dout = random_tensor(y.n, y.c, y.h, y.w, &mut rng);
            let mut grads = vec![0.0; conv.end()];
            let dx = conv.backward(&params, &cache, &dout, &mut grads, true).unwrap();

            let bias_free: Vec<f32> = {
                let mut p = params.clone();
                conv.bias_mut(&mut p).fill(0.0);
                p
            };
            let (y0, _) = conv.forward(&bias_free, &x);
            let lhs: f32 = y0.data.iter().zip(&dout.data).map(|(a, b)| a * b).sum();
            let via_x: f32 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
            let via_w: f32 = grads[..conv.cout * 18].iter().zip(&params[..conv.cout * 18]).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-4 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-4 * lhs.abs().max(1.0));
            let bias_grad: f32 = dout.data.iter().sum();
            let gb: f32 = grads[conv.cout * 18..].iter().sum();
            assert!((bias_grad - gb).abs() < 1e-4);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(2, 3, 3, 4, &mut rng);
        let up = upsample2(&x);
        let g = random_tensor(2, 3, 6, 8, &mut rng);
        let lhs: f32 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = upsample2_backward(&g).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let a = random_tensor(2, 3, 2, 2, &mut rng);
        let b = random_tensor(2, 1, 2, 2, &mut rng);
        let (a2, b2) = split_channels(&concat(&a, &b), 3);
        assert_eq!((a, b), (a2, b2));
    }
}
