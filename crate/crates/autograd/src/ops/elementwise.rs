//! Element-wise arithmetic, broadcasting and reductions.

use crate::float::Float;
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

struct Add;

impl<T: Float> Op<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let (a, b) = (inputs[0], inputs[1]);
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let mut out = a.clone();
        out.add_assign(b);
        out
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
    }
}

struct Mul;

impl<T: Float> Op<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let (a, b) = (inputs[0], inputs[1]);
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        Tensor::from_vec(a.shape(), data).unwrap()
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let prod = |other: &Tensor<T>| {
            let data = g.data().iter().zip(other.data()).map(|(&x, &y)| x * y).collect();
            Tensor::from_vec(g.shape(), data).unwrap()
        };
        vec![needs[0].then(|| prod(inputs[1])), needs[1].then(|| prod(inputs[0]))]
    }
}

struct Affine<T> {
    scale: T,
    shift: T,
}

impl<T: Float> Op<T> for Affine<T> {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let (s, b) = (self.scale, self.shift);
        inputs[0].map(|v| v * s + b)
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = self.scale;
        vec![Some(g.map(|v| v * s))]
    }
}

struct Relu;

impl<T: Float> Op<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        inputs[0].map(|v| if v > T::zero() { v } else { T::zero() })
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let data = g
            .data()
            .iter()
            .zip(out.data())
            .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
            .collect();
        vec![Some(Tensor::from_vec(g.shape(), data).unwrap())]
    }
}

struct Sum {
    mean: bool,
}

impl<T: Float> Op<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let x = inputs[0];
        let mut total = x.sum_f64();
        if self.mean && !x.is_empty() {
            total /= x.len() as f64;
        }
        Tensor::scalar(T::from_f64_lossy(total))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let mut gv = g.item();
        if self.mean && !x.is_empty() {
            gv /= T::from_usize(x.len()).unwrap();
        }
        vec![Some(Tensor::full(x.shape(), gv))]
    }
}

/// `x + y` where every axis of `y` either matches `x` or has extent 1.
struct BroadcastAdd {
    y_strides: Vec<usize>,
}

fn broadcast_index(mut flat: usize, shape: &[usize], y_strides: &[usize]) -> usize {
    let mut idx = 0;
    for axis in (0..shape.len()).rev() {
        let coord = flat % shape[axis];
        flat /= shape[axis];
        idx += coord * y_strides[axis];
    }
    idx
}

impl<T: Float> Op<T> for BroadcastAdd {
    fn name(&self) -> &'static str {
        "broadcast_add"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let (x, y) = (inputs[0], inputs[1]);
        assert_eq!(x.shape().len(), y.shape().len(), "broadcast_add rank mismatch");
        let mut strides = vec![0; x.shape().len()];
        let mut acc = 1;
        for axis in (0..x.shape().len()).rev() {
            let (xd, yd) = (x.dim(axis), y.dim(axis));
            assert!(yd == xd || yd == 1, "broadcast_add cannot broadcast {yd} to {xd}");
            strides[axis] = if yd == 1 { 0 } else { acc };
            acc *= yd;
        }
        self.y_strides = strides;
        let yd = y.data();
        Tensor::from_fn(x.shape(), |i| x.data()[i] + yd[broadcast_index(i, x.shape(), &self.y_strides)])
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let y = inputs[1];
        let gy = needs[1].then(|| {
            let mut acc = vec![0.0f64; y.len()];
            for (i, gv) in g.data().iter().enumerate() {
                acc[broadcast_index(i, g.shape(), &self.y_strides)] += gv.as_f64();
            }
            Tensor::from_vec(y.shape(), acc.into_iter().map(T::from_f64_lossy).collect()).unwrap()
        });
        vec![needs[0].then(|| g.clone()), gy]
    }
}

/// Mean over one axis, keeping it with extent 1.
struct MeanAxis {
    axis: usize,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Op<T> for MeanAxis {
    fn name(&self) -> &'static str {
        "mean_axis"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let x = inputs[0];
        let (outer, n, inner) = split_axis(x.shape(), self.axis);
        let mut shape = x.shape().to_vec();
        shape[self.axis] = 1;
        let mut out = Tensor::zeros(&shape);
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|k| xd[(o * n + k) * inner + i].as_f64()).sum();
                out.data_mut()[o * inner + i] = T::from_f64_lossy(s / n as f64);
            }
        }
        out
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (_, n, inner) = split_axis(x.shape(), self.axis);
        let scale = T::one() / T::from_usize(n).unwrap();
        let gd = g.data();
        let gx = Tensor::from_fn(x.shape(), |idx| {
            let i = idx % inner;
            let o = idx / (inner * n);
            gd[o * inner + i] * scale
        });
        vec![Some(gx)]
    }
}

impl<T: Float> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.apply(Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.apply(Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    /// `a * scale + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.apply(Affine { scale: T::from_f64_lossy(scale), shift: T::from_f64_lossy(shift) }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.apply(Relu, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.apply(Sum { mean: false }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.apply(Sum { mean: true }, &[a])
    }

    pub fn broadcast_add(&mut self, x: Var, y: Var) -> Var {
        self.apply(BroadcastAdd { y_strides: Vec::new() }, &[x, y])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        self.apply(MeanAxis { axis }, &[x])
    }

    /// Sum of scalars with the given weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let t = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t),
            });
        }
        acc.unwrap_or_else(|| self.constant(Tensor::scalar(T::zero())))
    }
}
