//! Same-padded convolutions over `[N, C, H, W]` tensors.
//!
//! A kernel of depth 1 is an ordinary 2D convolution applied to every one of
//! the `N` slices independently. A kernel of depth 3 additionally mixes
//! neighbouring slices, i.e. it is a 3D convolution whose depth axis is the
//! leading axis, zero-padded at both ends.
//!
//! Weights are laid out `[KD, C_out, C_in, K, K]` so that each depth tap is a
//! contiguous `C_out x (C_in * K * K)` matrix.

use rayon::prelude::*;

use crate::float::{gemm, Float, MatLayout};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

fn im2col<T: Float>(x: &[T], cin: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let hw = h * w;
    let p = (k / 2) as isize;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for i in 0..k {
            for j in 0..k {
                let row = (c * k + i) * k + j;
                let dst = &mut out[row * hw..(row + 1) * hw];
                let dx = j as isize - p;
                for y in 0..h {
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + i as isize - p;
                    if sy < 0 || sy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    shift_copy(src, drow, dx);
                }
            }
        }
    }
}

/// `dst[x] = src[x + dx]`, zero outside.
fn shift_copy<T: Float>(src: &[T], dst: &mut [T], dx: isize) {
    let w = src.len();
    let a = dx.unsigned_abs().min(w);
    if dx >= 0 {
        dst[..w - a].copy_from_slice(&src[a..]);
        dst[w - a..].fill(T::zero());
    } else {
        dst[..a].fill(T::zero());
        dst[a..].copy_from_slice(&src[..w - a]);
    }
}

fn col2im<T: Float>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let hw = h * w;
    let p = (k / 2) as isize;
    dx_out.fill(T::zero());
    for c in 0..cin {
        let plane = &mut dx_out[c * hw..(c + 1) * hw];
        for i in 0..k {
            for j in 0..k {
                let row = (c * k + i) * k + j;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = j as isize - p;
                for y in 0..h {
                    let sy = y as isize + i as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[y * w..(y + 1) * w];
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let a = dx.unsigned_abs().min(w);
                    if dx >= 0 {
                        for (pv, &sv) in prow[a..].iter_mut().zip(&srow[..w - a]) {
                            *pv += sv;
                        }
                    } else {
                        for (pv, &sv) in prow[..w - a].iter_mut().zip(&srow[a..]) {
                            *pv += sv;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kd: usize,
    k: usize,
}

impl Dims {
    fn from_inputs<T: Float>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Self {
        let xs = x.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 4, "conv input must be [N, C, H, W], got {xs:?}");
        assert_eq!(ws.len(), 5, "conv weight must be [KD, Cout, Cin, K, K], got {ws:?}");
        assert_eq!(ws[2], xs[1], "conv channel mismatch: weight {ws:?} input {xs:?}");
        assert_eq!(ws[3], ws[4], "conv kernel must be square");
        assert!(ws[0] % 2 == 1 && ws[3] % 2 == 1, "conv kernel extents must be odd");
        assert_eq!(bias.shape(), &[ws[1]], "conv bias shape mismatch");
        Dims { n: xs[0], cin: xs[1], cout: ws[1], h: xs[2], w: xs[3], kd: ws[0], k: ws[3] }
    }

    fn kk(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Input slice feeding output slice `n` through depth tap `t`.
    fn source(&self, n: usize, t: usize) -> Option<usize> {
        let s = n as isize + t as isize - (self.kd / 2) as isize;
        (s >= 0 && (s as usize) < self.n).then_some(s as usize)
    }
}

fn build_cols<T: Float>(x: &Tensor<T>, d: &Dims) -> Vec<T> {
    let (kk, hw) = (d.kk(), d.hw());
    let mut cols = vec![T::zero(); d.n * kk * hw];
    cols.par_chunks_mut(kk * hw)
        .zip(x.data().par_chunks(d.cin * hw))
        .for_each(|(c, xs)| im2col(xs, d.cin, d.h, d.w, d.k, c));
    cols
}

struct Conv;

impl<T: Float> Op<T> for Conv {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let (x, weight, bias) = (inputs[0], inputs[1], inputs[2]);
        let d = Dims::from_inputs(x, weight, bias);
        let (kk, hw) = (d.kk(), d.hw());
        let owned;
        let cols: &[T] = if d.k == 1 {
            x.data()
        } else {
            owned = build_cols(x, &d);
            &owned
        };
        let mut out = Tensor::zeros(&[d.n, d.cout, d.h, d.w]);
        let wdata = weight.data();
        let bdata = bias.data();
        out.data_mut().par_chunks_mut(d.cout * hw).enumerate().for_each(|(n, o)| {
            for (c, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(bdata[c]);
            }
            for t in 0..d.kd {
                let Some(s) = d.source(n, t) else { continue };
                gemm(
                    T::one(),
                    &wdata[t * d.cout * kk..(t + 1) * d.cout * kk],
                    MatLayout::row_major(d.cout, kk),
                    &cols[s * kk * hw..(s + 1) * kk * hw],
                    MatLayout::row_major(kk, hw),
                    T::one(),
                    o,
                    MatLayout::row_major(d.cout, hw),
                );
            }
        });
        out
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, weight, bias) = (inputs[0], inputs[1], inputs[2]);
        let d = Dims::from_inputs(x, weight, bias);
        let (kk, hw) = (d.kk(), d.hw());
        let wdata = weight.data();
        let gdata = g.data();

        let gx = needs[0].then(|| {
            let mut gx = Tensor::zeros(x.shape());
            gx.data_mut().par_chunks_mut(d.cin * hw).enumerate().for_each(|(s, dxs)| {
                let mut dcols = if d.k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
                let target: &mut [T] = if d.k == 1 { &mut *dxs } else { &mut dcols };
                let mut first = true;
                for t in 0..d.kd {
                    // output slice n reads input slice s through tap t
                    let n = s as isize - t as isize + (d.kd / 2) as isize;
                    if n < 0 || n as usize >= d.n {
                        continue;
                    }
                    let n = n as usize;
                    gemm(
                        T::one(),
                        &wdata[t * d.cout * kk..(t + 1) * d.cout * kk],
                        MatLayout::row_major(d.cout, kk).transposed(),
                        &gdata[n * d.cout * hw..(n + 1) * d.cout * hw],
                        MatLayout::row_major(d.cout, hw),
                        if first { T::zero() } else { T::one() },
                        target,
                        MatLayout::row_major(kk, hw),
                    );
                    first = false;
                }
                if first {
                    target.fill(T::zero());
                }
                if d.k != 1 {
                    col2im(&dcols, d.cin, d.h, d.w, d.k, dxs);
                }
            });
            gx
        });

        let gw = needs[1].then(|| {
            let owned;
            let cols: &[T] = if d.k == 1 {
                x.data()
            } else {
                owned = build_cols(x, &d);
                &owned
            };
            let mut gw = Tensor::zeros(weight.shape());
            for t in 0..d.kd {
                let block = &mut gw.data_mut()[t * d.cout * kk..(t + 1) * d.cout * kk];
                for n in 0..d.n {
                    let Some(s) = d.source(n, t) else { continue };
                    gemm(
                        T::one(),
                        &gdata[n * d.cout * hw..(n + 1) * d.cout * hw],
                        MatLayout::row_major(d.cout, hw),
                        &cols[s * kk * hw..(s + 1) * kk * hw],
                        MatLayout::row_major(kk, hw).transposed(),
                        T::one(),
                        block,
                        MatLayout::row_major(d.cout, kk),
                    );
                }
            }
            gw
        });

        let gb = needs[2].then(|| {
            let mut acc = vec![0.0f64; d.cout];
            for n in 0..d.n {
                for (c, a) in acc.iter_mut().enumerate() {
                    let off = (n * d.cout + c) * hw;
                    *a += gdata[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
            }
            Tensor::from_vec(&[d.cout], acc.into_iter().map(T::from_f64_lossy).collect()).unwrap()
        });

        vec![gx, gw, gb]
    }
}

impl<T: Float> Graph<T> {
    /// Same-padded convolution; see the module docs for the weight layout.
    pub fn conv(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        self.apply(Conv, &[x, weight, bias])
    }
}
