//! Concatenation along axis 1 and reshaping.

use crate::float::Float;
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

struct ConcatChannels {
    widths: Vec<usize>,
}

impl<T: Float> Op<T> for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let first = inputs[0].shape();
        let n = first[0];
        let rest: usize = first[2..].iter().product();
        for t in inputs {
            assert_eq!(t.shape()[0], n, "concat leading axis mismatch");
            assert_eq!(&t.shape()[2..], &first[2..], "concat trailing axes mismatch");
        }
        self.widths = inputs.iter().map(|t| t.dim(1) * rest).collect();
        let total_c: usize = inputs.iter().map(|t| t.dim(1)).sum();
        let mut shape = first.to_vec();
        shape[1] = total_c;
        let mut data = Vec::with_capacity(n * total_c * rest);
        for s in 0..n {
            for (t, &wd) in inputs.iter().zip(&self.widths) {
                data.extend_from_slice(&t.data()[s * wd..(s + 1) * wd]);
            }
        }
        Tensor::from_vec(&shape, data).unwrap()
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let n = g.dim(0);
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for ((t, &wd), &need) in inputs.iter().zip(&self.widths).zip(needs) {
            if need {
                let mut data = Vec::with_capacity(t.len());
                for s in 0..n {
                    let start = s * total + offset;
                    data.extend_from_slice(&g.data()[start..start + wd]);
                }
                out.push(Some(Tensor::from_vec(t.shape(), data).unwrap()));
            } else {
                out.push(None);
            }
            offset += wd;
        }
        out
    }
}

struct Reshape {
    shape: Vec<usize>,
}

impl<T: Float> Op<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        inputs[0].clone().reshape(&self.shape).expect("reshape keeps the element count")
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshape(inputs[0].shape()).unwrap())]
    }
}

impl<T: Float> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        self.apply(Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        self.apply(ConcatChannels { widths: Vec::new() }, parts)
    }
}
