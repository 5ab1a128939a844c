//! Instance normalisation with a per-channel affine transform.

use crate::float::Float;
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;

/// Normalises `[N, C, ...]` per channel. With `per_sample` every `(n, c)`
/// pair has its own statistics (2D instance norm when `N` indexes slices);
/// otherwise statistics are shared across `N` (3D instance norm of one
/// volume laid out slice-major).
struct InstanceNorm {
    per_sample: bool,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

struct Layout {
    n: usize,
    c: usize,
    s: usize,
}

impl Layout {
    fn of<T: Float>(x: &Tensor<T>) -> Self {
        assert!(x.shape().len() >= 2, "instance norm needs [N, C, ...]");
        Layout { n: x.dim(0), c: x.dim(1), s: x.shape()[2..].iter().product() }
    }
}

impl InstanceNorm {
    fn groups(&self, l: &Layout) -> usize {
        if self.per_sample {
            l.n * l.c
        } else {
            l.c
        }
    }

    fn channel(&self, group: usize, l: &Layout) -> usize {
        if self.per_sample {
            group % l.c
        } else {
            group
        }
    }

    /// Contiguous blocks making up one statistics group.
    fn blocks(&self, group: usize, l: &Layout) -> Vec<std::ops::Range<usize>> {
        if self.per_sample {
            vec![group * l.s..(group + 1) * l.s]
        } else {
            (0..l.n).map(|n| (n * l.c + group) * l.s..(n * l.c + group + 1) * l.s).collect()
        }
    }
}

impl<T: Float> Op<T> for InstanceNorm {
    fn name(&self) -> &'static str {
        "instance_norm"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let l = Layout::of(x);
        assert_eq!(gamma.shape(), &[l.c], "instance norm gamma shape");
        assert_eq!(beta.shape(), &[l.c], "instance norm beta shape");
        let groups = self.groups(&l);
        self.mean = vec![0.0; groups];
        self.inv_std = vec![0.0; groups];
        let mut out = Tensor::zeros(x.shape());
        let xd = x.data();
        for gi in 0..groups {
            let blocks = self.blocks(gi, &l);
            let m = (blocks.len() * l.s) as f64;
            let mean = blocks.iter().flat_map(|r| xd[r.clone()].iter()).map(|v| v.as_f64()).sum::<f64>() / m;
            let var = blocks
                .iter()
                .flat_map(|r| xd[r.clone()].iter())
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / m;
            let inv = 1.0 / (var + EPS).sqrt();
            self.mean[gi] = mean;
            self.inv_std[gi] = inv;
            let c = self.channel(gi, &l);
            let (ga, be) = (gamma.data()[c].as_f64(), beta.data()[c].as_f64());
            for r in blocks {
                for i in r {
                    out.data_mut()[i] = T::from_f64_lossy(ga * (xd[i].as_f64() - mean) * inv + be);
                }
            }
        }
        out
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let l = Layout::of(x);
        let xd = x.data();
        let gd = g.data();
        let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut ggamma = vec![0.0f64; l.c];
        let mut gbeta = vec![0.0f64; l.c];
        for gi in 0..self.groups(&l) {
            let blocks = self.blocks(gi, &l);
            let c = self.channel(gi, &l);
            let (mean, inv) = (self.mean[gi], self.inv_std[gi]);
            let ga = gamma.data()[c].as_f64();
            let m = (blocks.len() * l.s) as f64;
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for r in &blocks {
                for i in r.clone() {
                    let xhat = (xd[i].as_f64() - mean) * inv;
                    let gv = gd[i].as_f64();
                    sum_g += gv;
                    sum_gx += gv * xhat;
                }
            }
            ggamma[c] += sum_gx;
            gbeta[c] += sum_g;
            if let Some(gx) = gx.as_mut() {
                // dxhat = g * gamma
                let (sd, sdx) = (sum_g * ga, sum_gx * ga);
                for r in blocks {
                    for i in r {
                        let xhat = (xd[i].as_f64() - mean) * inv;
                        let dxhat = gd[i].as_f64() * ga;
                        gx.data_mut()[i] = T::from_f64_lossy(inv / m * (m * dxhat - sd - xhat * sdx));
                    }
                }
            }
        }
        let to_t = |v: Vec<f64>| Tensor::from_vec(&[l.c], v.into_iter().map(T::from_f64_lossy).collect()).unwrap();
        vec![gx, needs[1].then(|| to_t(ggamma)), needs[2].then(|| to_t(gbeta))]
    }
}

impl<T: Float> Graph<T> {
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, per_sample: bool) -> Var {
        self.apply(InstanceNorm { per_sample, mean: Vec::new(), inv_std: Vec::new() }, &[x, gamma, beta])
    }
}
