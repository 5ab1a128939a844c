//! 2x2 max pooling and nearest-neighbour 2x upsampling over the last two axes.

use crate::float::Float;
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

fn planes<T: Float>(x: &Tensor<T>) -> (usize, usize, usize) {
    let s = x.shape();
    assert!(s.len() >= 2, "pooling needs at least two axes");
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    (x.len() / (h * w).max(1), h, w)
}

struct MaxPool2 {
    argmax: Vec<u8>,
}

impl<T: Float> Op<T> for MaxPool2 {
    fn name(&self) -> &'static str {
        "max_pool2"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let x = inputs[0];
        let (p, h, w) = planes(x);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even extents, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut shape = x.shape().to_vec();
        let rank = shape.len();
        shape[rank - 2] = oh;
        shape[rank - 1] = ow;
        let mut out = Tensor::zeros(&shape);
        self.argmax = vec![0; p * oh * ow];
        let xd = x.data();
        for pi in 0..p {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = pi * h * w + 2 * y * w + 2 * xx;
                    let cand = [base, base + 1, base + w, base + w + 1];
                    let mut best = 0;
                    for (ci, &idx) in cand.iter().enumerate().skip(1) {
                        if xd[idx] > xd[cand[best]] {
                            best = ci;
                        }
                    }
                    let o = (pi * oh + y) * ow + xx;
                    out.data_mut()[o] = xd[cand[best]];
                    self.argmax[o] = best as u8;
                }
            }
        }
        out
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (p, h, w) = planes(x);
        let (oh, ow) = (h / 2, w / 2);
        let mut gx = Tensor::zeros(x.shape());
        for pi in 0..p {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = (pi * oh + y) * ow + xx;
                    let a = self.argmax[o] as usize;
                    let idx = pi * h * w + (2 * y + a / 2) * w + 2 * xx + a % 2;
                    gx.data_mut()[idx] += g.data()[o];
                }
            }
        }
        vec![Some(gx)]
    }
}

struct Upsample2;

impl<T: Float> Op<T> for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let x = inputs[0];
        let (p, h, w) = planes(x);
        let mut shape = x.shape().to_vec();
        let rank = shape.len();
        shape[rank - 2] = 2 * h;
        shape[rank - 1] = 2 * w;
        let xd = x.data();
        let mut out = Tensor::zeros(&shape);
        let od = out.data_mut();
        for pi in 0..p {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    od[(pi * 2 * h + y) * 2 * w + xx] = xd[(pi * h + y / 2) * w + xx / 2];
                }
            }
        }
        out
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (p, h, w) = planes(x);
        let gd = g.data();
        let mut gx = Tensor::zeros(x.shape());
        for pi in 0..p {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    gx.data_mut()[(pi * h + y / 2) * w + xx / 2] += gd[(pi * 2 * h + y) * 2 * w + xx];
                }
            }
        }
        vec![Some(gx)]
    }
}

impl<T: Float> Graph<T> {
    pub fn max_pool2(&mut self, x: Var) -> Var {
        self.apply(MaxPool2 { argmax: Vec::new() }, &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        self.apply(Upsample2, &[x])
    }
}
