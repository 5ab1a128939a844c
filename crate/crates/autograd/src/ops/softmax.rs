//! Softmax along an arbitrary axis.

use crate::float::Float;
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax of `x` along `axis`.
pub fn softmax_values<T: Float>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    let mut buf = vec![0.0f64; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mx = (0..n).map(|k| xd[at(k)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = (xd[at(k)].as_f64() - mx).exp();
                total += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                od[at(k)] = T::from_f64_lossy(b / total);
            }
        }
    }
    out
}

struct Softmax {
    axis: usize,
}

impl<T: Float> Op<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        softmax_values(inputs[0], self.axis)
    }

    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (outer, n, inner) = axis_split(y.shape(), self.axis);
        let (yd, gd) = (y.data(), g.data());
        let mut gx = Tensor::zeros(y.shape());
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let dot: f64 = (0..n).map(|k| yd[at(k)].as_f64() * gd[at(k)].as_f64()).sum();
                for k in 0..n {
                    let idx = at(k);
                    gx.data_mut()[idx] = T::from_f64_lossy(yd[idx].as_f64() * (gd[idx].as_f64() - dot));
                }
            }
        }
        vec![Some(gx)]
    }
}

impl<T: Float> Graph<T> {
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        self.apply(Softmax { axis }, &[x])
    }
}
