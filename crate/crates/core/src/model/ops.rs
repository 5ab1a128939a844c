//! Network-specific differentiable operations: the row-shift spatial
//! transformer, soft-argmax over rows and the ordering (topology) module.

use octsurf_autograd::{Float, Graph, Op, Tensor, Var};

/// Linear interpolation coordinates for `pos`, clamped to `[0, h - 1]`.
/// Returns `(i0, i1, frac, inside)`; `inside` is false where clamping
/// happened (the output does not depend on the shift there).
#[inline]
fn lerp_coords(pos: f64, h: usize) -> (usize, usize, f64, bool) {
    let max = (h - 1) as f64;
    if pos <= 0.0 {
        return (0, 0, 0.0, false);
    }
    if pos >= max {
        return (h - 1, h - 1, 0.0, false);
    }
    let i0 = pos.floor() as usize;
    (i0, i0 + 1, pos - i0 as f64, true)
}

/// `out[b, c, r, w] = x[b, c, r + d_b, w]` with linear interpolation and
/// edge replication. Inputs: `x: [D, C, H, W]`, `d: [D]`.
struct Stm;

impl<T: Float> Op<T> for Stm {
    fn name(&self) -> &'static str {
        "stm"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let (x, d) = (inputs[0], inputs[1]);
        let s = x.shape();
        assert_eq!(s.len(), 4, "stm expects [D, C, H, W]");
        let (nd, nc, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(d.len(), nd, "stm displacement length");
        let mut out = Tensor::zeros(s);
        let xd = x.data();
        let od = out.data_mut();
        for b in 0..nd {
            let shift = d.data()[b].as_f64();
            if shift == 0.0 {
                let span = nc * h * w;
                od[b * span..(b + 1) * span].copy_from_slice(&xd[b * span..(b + 1) * span]);
                continue;
            }
            for r in 0..h {
                let (i0, i1, f, _) = lerp_coords(r as f64 + shift, h);
                let (w0, w1) = (T::from_f64_lossy(1.0 - f), T::from_f64_lossy(f));
                for c in 0..nc {
                    let plane = (b * nc + c) * h;
                    let (src0, src1, dst) = ((plane + i0) * w, (plane + i1) * w, (plane + r) * w);
                    for j in 0..w {
                        od[dst + j] = w0 * xd[src0 + j] + w1 * xd[src1 + j];
                    }
                }
            }
        }
        out
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, d) = (inputs[0], inputs[1]);
        let s = x.shape();
        let (nd, nc, h, w) = (s[0], s[1], s[2], s[3]);
        let gd = g.data();
        let xd = x.data();
        let mut gx = needs[0].then(|| Tensor::zeros(s));
        let mut gdisp = needs[1].then(|| vec![0.0f64; nd]);
        for b in 0..nd {
            let shift = d.data()[b].as_f64();
            for r in 0..h {
                let (i0, i1, f, inside) = lerp_coords(r as f64 + shift, h);
                let (w0, w1) = (T::from_f64_lossy(1.0 - f), T::from_f64_lossy(f));
                for c in 0..nc {
                    let plane = (b * nc + c) * h;
                    let (src0, src1, dst) = ((plane + i0) * w, (plane + i1) * w, (plane + r) * w);
                    if let Some(gx) = gx.as_mut() {
                        let gxd = gx.data_mut();
                        for j in 0..w {
                            gxd[src0 + j] += w0 * gd[dst + j];
                            gxd[src1 + j] += w1 * gd[dst + j];
                        }
                    }
                    if let (Some(acc), true) = (gdisp.as_mut(), inside) {
                        let mut sum = 0.0;
                        for j in 0..w {
                            sum += gd[dst + j].as_f64() * (xd[src1 + j] - xd[src0 + j]).as_f64();
                        }
                        acc[b] += sum;
                    }
                }
            }
        }
        let gdisp = gdisp.map(|v| Tensor::from_vec(d.shape(), v.into_iter().map(T::from_f64_lossy).collect()).unwrap());
        vec![gx, gdisp]
    }
}

/// Translates every B-scan slab of `x: [D, C, H, W]` along the row axis by
/// `d: [D]` (already scaled to this level's resolution).
pub fn stm_warp<T: Float>(g: &mut Graph<T>, x: Var, d: Var) -> Var {
    g.apply(Stm, &[x, d])
}

/// Value-level warp, used outside the tape.
pub fn stm_values<T: Float>(x: &Tensor<T>, d: &[f64]) -> Tensor<T> {
    let dt = Tensor::from_vec(&[d.len()], d.iter().map(|&v| T::from_f64_lossy(v)).collect()).unwrap();
    Stm.forward(&[x, &dt])
}

/// Expectation of the 1-based row index: `[N, K, R, W] -> [N, K, W]`.
struct SoftArgmax;

impl<T: Float> Op<T> for SoftArgmax {
    fn name(&self) -> &'static str {
        "soft_argmax"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let q = inputs[0];
        let s = q.shape();
        assert_eq!(s.len(), 4, "soft_argmax expects [N, K, R, W]");
        let (n, k, r, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![T::zero(); n * k * w];
        for p in 0..n * k {
            let o = &mut out[p * w..(p + 1) * w];
            for row in 0..r {
                let weight = T::from_f64_lossy((row + 1) as f64);
                let src = &q.data()[(p * r + row) * w..(p * r + row + 1) * w];
                for (acc, &v) in o.iter_mut().zip(src) {
                    *acc += weight * v;
                }
            }
        }
        Tensor::from_vec(&[n, k, w], out).unwrap()
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = inputs[0].shape();
        let (n, k, r, w) = (s[0], s[1], s[2], s[3]);
        let gq = Tensor::from_fn(s, |i| {
            let col = i % w;
            let row = (i / w) % r;
            let p = i / (w * r);
            T::from_f64_lossy((row + 1) as f64) * g.data()[p * w + col]
        });
        debug_assert_eq!(gq.len(), n * k * r * w);
        vec![Some(gq)]
    }
}

pub fn soft_argmax<T: Float>(g: &mut Graph<T>, q: Var) -> Var {
    g.apply(SoftArgmax, &[q])
}

/// `s'_0 = s_0`, `s'_k = s'_{k-1} + relu(s_k - s'_{k-1})` along axis 1 of
/// `[N, K, ...]`.
struct Topology;

fn topo_dims<T: Float>(x: &Tensor<T>) -> (usize, usize, usize) {
    let s = x.shape();
    assert!(s.len() >= 2, "topology expects [N, K, ...]");
    (s[0], s[1], s[2..].iter().product())
}

impl<T: Float> Op<T> for Topology {
    fn name(&self) -> &'static str {
        "topology"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let x = inputs[0];
        let (n, k, m) = topo_dims(x);
        let mut out = x.clone();
        let od = out.data_mut();
        for b in 0..n {
            for kk in 1..k {
                for j in 0..m {
                    let prev = od[(b * k + kk - 1) * m + j];
                    let cur = &mut od[(b * k + kk) * m + j];
                    if *cur < prev {
                        *cur = prev;
                    }
                }
            }
        }
        out
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (n, k, m) = topo_dims(x);
        let mut gx = Tensor::zeros(x.shape());
        let (xd, od, gd) = (x.data(), output.data(), g.data());
        let gxd = gx.data_mut();
        for b in 0..n {
            for j in 0..m {
                let mut carry = T::zero();
                for kk in (0..k).rev() {
                    let i = (b * k + kk) * m + j;
                    let total = gd[i] + carry;
                    // the raw value passes through when it exceeds the running bound
                    let active = kk == 0 || xd[i] > od[(b * k + kk - 1) * m + j];
                    if active {
                        gxd[i] = total;
                        carry = T::zero();
                    } else {
                        carry = total;
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

pub fn topology<T: Float>(g: &mut Graph<T>, raw: Var) -> Var {
    g.apply(Topology, &[raw])
}

/// Value-level ordering applied to a `[N, K, ...]` tensor.
pub fn topology_values<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    Topology.forward(&[x])
}

/// Value-level soft-argmax of `[N, K, R, W]`.
pub fn soft_argmax_values<T: Float>(q: &Tensor<T>) -> Tensor<T> {
    SoftArgmax.forward(&[q])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize) -> Tensor<f64> {
        Tensor::from_fn(&[2, 1, h, 3], |i| ((i / 3) % h) as f64)
    }

    #[test]
    fn stm_zero_is_identity() {
        let x = Tensor::from_fn(&[3, 2, 5, 4], |i| (i as f64 * 0.37).sin());
        assert_eq!(stm_values(&x, &[0.0, 0.0, 0.0]), x);
    }

    #[test]
    fn stm_integer_shift_replicates_edges() {
        let x = ramp(6);
        let out = stm_values(&x, &[2.0, -2.0]);
        let col = |t: &Tensor<f64>, b: usize| (0..6).map(|r| t.data()[(b * 6 + r) * 3]).collect::<Vec<_>>();
        assert_eq!(col(&out, 0), vec![2.0, 3.0, 4.0, 5.0, 5.0, 5.0]);
        assert_eq!(col(&out, 1), vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn stm_half_shift_on_ramp_is_exact_inside() {
        let x = ramp(8);
        let out = stm_values(&x, &[0.5, 0.5]);
        for r in 0..7 {
            assert!((out.data()[r * 3] - (r as f64 + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_argmax_examples() {
        let mut q = Tensor::<f64>::zeros(&[1, 1, 10, 1]);
        q.data_mut()[6] = 1.0;
        assert_eq!(soft_argmax_values(&q).item(), 7.0);
        let u = Tensor::<f64>::full(&[1, 1, 512, 1], 1.0 / 512.0);
        assert!((soft_argmax_values(&u).item() - 256.5).abs() < 1e-9);
        let mut q = Tensor::<f64>::zeros(&[1, 1, 5, 1]);
        q.data_mut()[1] = 0.25;
        q.data_mut()[3] = 0.75;
        assert!((soft_argmax_values(&q).item() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn topology_examples() {
        let run = |v: [f64; 3]| topology_values(&Tensor::from_vec(&[1, 3, 1], v.to_vec()).unwrap()).into_data();
        assert_eq!(run([3.0, 5.0, 9.0]), vec![3.0, 5.0, 9.0]);
        assert_eq!(run([5.0, 4.0, 9.0]), vec![5.0, 5.0, 9.0]);
        assert_eq!(run([5.0, 4.0, 3.0]), vec![5.0, 5.0, 5.0]);
    }
}
