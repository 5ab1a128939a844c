//! Loss operations on the tape. Every op computes in `f64` internally.

use octsurf_autograd::{Float, Graph, Op, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl Reduction {
    fn divisor(self, count: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => count.max(1) as f64,
        }
    }
}

fn scalar<T: Float>(v: f64) -> Tensor<T> {
    Tensor::scalar(T::from_f64_lossy(v))
}

fn to_f64<T: Float>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn from_f64<T: Float>(shape: &[usize], v: Vec<f64>) -> Tensor<T> {
    Tensor::from_vec(shape, v.into_iter().map(T::from_f64_lossy).collect()).unwrap()
}

pub const NCC_EPS: f64 = 1e-5;

/// Clipped-window box sum over an `h x w` plane.
fn box_sum(src: &[f64], h: usize, w: usize, half: usize) -> Vec<f64> {
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += src[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(half), (y + half + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(half), (x + half + 1).min(w));
            out[y * w + x] = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
        }
    }
    out
}

fn window_counts(h: usize, w: usize, half: usize) -> Vec<f64> {
    box_sum(&vec![1.0; h * w], h, w, half)
}

/// Local statistics of one image pair.
struct PairStats {
    n: Vec<f64>,
    si: Vec<f64>,
    sj: Vec<f64>,
    sii: Vec<f64>,
    sjj: Vec<f64>,
    sij: Vec<f64>,
}

impl PairStats {
    fn new(i: &[f64], j: &[f64], h: usize, w: usize, half: usize, n: &[f64]) -> Self {
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
        Self {
            n: n.to_vec(),
            si: box_sum(i, h, w, half),
            sj: box_sum(j, h, w, half),
            sii: box_sum(&prod(i, i), h, w, half),
            sjj: box_sum(&prod(j, j), h, w, half),
            sij: box_sum(&prod(i, j), h, w, half),
        }
    }

    /// `(cross, var_i, var_j)` at pixel `p`.
    fn moments(&self, p: usize) -> (f64, f64, f64) {
        let n = self.n[p];
        (
            self.sij[p] - self.si[p] * self.sj[p] / n,
            self.sii[p] - self.si[p] * self.si[p] / n,
            self.sjj[p] - self.sj[p] * self.sj[p] / n,
        )
    }
}

/// Mean windowed NCC of two `h x w` images.
pub fn pair_ncc(i: &[f64], j: &[f64], h: usize, w: usize, window: usize) -> f64 {
    let half = window / 2;
    let n = window_counts(h, w, half);
    let st = PairStats::new(i, j, h, w, half, &n);
    (0..h * w)
        .map(|p| {
            let (cross, vi, vj) = st.moments(p);
            cross / (vi * vj + NCC_EPS).sqrt()
        })
        .sum::<f64>()
        / (h * w) as f64
}

/// Negative mean windowed NCC of adjacent slices of `[D, C, H, W]`.
/// Signed form `cross / sqrt(var_i * var_j + eps)`.
struct LocalNcc {
    half: usize,
}

fn ncc_dims<T: Float>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "local NCC expects [D, C, H, W]");
    assert!(s[0] >= 2, "local NCC needs at least two slices");
    (s[0], s[1], s[2], s[3])
}

impl<T: Float> Op<T> for LocalNcc {
    fn name(&self) -> &'static str {
        "local_ncc"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let x = inputs[0];
        let (d, c, h, w) = ncc_dims(x);
        let xd = to_f64(x);
        let n = window_counts(h, w, self.half);
        let plane = |b: usize, ch: usize| &xd[((b * c + ch) * h) * w..((b * c + ch) * h + h) * w];
        let mut total = 0.0;
        for b in 0..d - 1 {
            for ch in 0..c {
                let st = PairStats::new(plane(b, ch), plane(b + 1, ch), h, w, self.half, &n);
                for p in 0..h * w {
                    let (cross, vi, vj) = st.moments(p);
                    total += cross / (vi * vj + NCC_EPS).sqrt();
                }
            }
        }
        scalar(-total / ((d - 1) * c * h * w) as f64)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (d, c, h, w) = ncc_dims(x);
        let xd = to_f64(x);
        let n = window_counts(h, w, self.half);
        let scale = -g.item().as_f64() / ((d - 1) * c * h * w) as f64;
        let mut gx = vec![0.0; xd.len()];
        let hw = h * w;
        for b in 0..d - 1 {
            for ch in 0..c {
                let (oi, oj) = (((b * c) + ch) * hw, (((b + 1) * c) + ch) * hw);
                let (pi, pj) = (&xd[oi..oi + hw], &xd[oj..oj + hw]);
                let st = PairStats::new(pi, pj, h, w, self.half, &n);
                let mut d_si = vec![0.0; hw];
                let mut d_sj = vec![0.0; hw];
                let mut d_sii = vec![0.0; hw];
                let mut d_sjj = vec![0.0; hw];
                let mut d_sij = vec![0.0; hw];
                for p in 0..hw {
                    let (cross, vi, vj) = st.moments(p);
                    let t = 1.0 / (vi * vj + NCC_EPS).sqrt();
                    let t3 = t * t * t;
                    let dvi = -0.5 * cross * vj * t3;
                    let dvj = -0.5 * cross * vi * t3;
                    let np = n[p];
                    d_sij[p] = scale * t;
                    d_sii[p] = scale * dvi;
                    d_sjj[p] = scale * dvj;
                    d_si[p] = scale * (-t * st.sj[p] / np - 2.0 * dvi * st.si[p] / np);
                    d_sj[p] = scale * (-t * st.si[p] / np - 2.0 * dvj * st.sj[p] / np);
                }
                // the clipped square window is symmetric, so the adjoint is the same box sum
                let (b_si, b_sj) = (box_sum(&d_si, h, w, self.half), box_sum(&d_sj, h, w, self.half));
                let (b_sii, b_sjj) = (box_sum(&d_sii, h, w, self.half), box_sum(&d_sjj, h, w, self.half));
                let b_sij = box_sum(&d_sij, h, w, self.half);
                for p in 0..hw {
                    gx[oi + p] += b_si[p] + 2.0 * pi[p] * b_sii[p] + pj[p] * b_sij[p];
                    gx[oj + p] += b_sj[p] + 2.0 * pj[p] * b_sjj[p] + pi[p] * b_sij[p];
                }
            }
        }
        vec![Some(from_f64(x.shape(), gx))]
    }
}

/// `-mean` local NCC between adjacent slices of `x: [D, C, H, W]`.
pub fn local_ncc<T: Float>(g: &mut Graph<T>, x: Var, window: usize) -> Var {
    g.apply(LocalNcc { half: window / 2 }, &[x])
}

/// Alignment smoothness on `d: [D]` with constant truth `[D, K, W]` (network layout),
/// averaged over surfaces. A term `(b, a)` counts when both ends are valid.
struct SmoothAlign {
    truth: Vec<f64>,
    mask: Vec<f32>,
    k: usize,
    w: usize,
    reduction: Reduction,
}

impl SmoothAlign {
    /// Visits every valid term: `(b, k, residual, weight)`.
    fn terms(&self, d: &[f64], mut f: impl FnMut(usize, f64, f64)) {
        let (k, w) = (self.k, self.w);
        let nb = d.len();
        for kk in 0..k {
            let mut count = 0;
            for b in 0..nb - 1 {
                for a in 0..w {
                    let (i0, i1) = ((b * k + kk) * w + a, ((b + 1) * k + kk) * w + a);
                    if self.mask[i0] > 0.0 && self.mask[i1] > 0.0 {
                        count += 1;
                    }
                }
            }
            let coef = 1.0 / (k as f64 * self.reduction.divisor(count));
            for b in 0..nb - 1 {
                for a in 0..w {
                    let (i0, i1) = ((b * k + kk) * w + a, ((b + 1) * k + kk) * w + a);
                    if self.mask[i0] > 0.0 && self.mask[i1] > 0.0 {
                        let e = (self.truth[i0] - d[b]) - (self.truth[i1] - d[b + 1]);
                        f(b, e, coef);
                    }
                }
            }
        }
    }
}

impl<T: Float> Op<T> for SmoothAlign {
    fn name(&self) -> &'static str {
        "smooth_align"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let d = to_f64(inputs[0]);
        let mut total = 0.0;
        self.terms(&d, |_, e, coef| total += coef * e * e);
        scalar(total)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let d = to_f64(inputs[0]);
        let go = g.item().as_f64();
        let mut gd = vec![0.0; d.len()];
        self.terms(&d, |b, e, coef| {
            let v = go * coef * 2.0 * e;
            gd[b] -= v;
            gd[b + 1] += v;
        });
        vec![Some(from_f64(inputs[0].shape(), gd))]
    }
}

/// Alignment smoothness for displacement `d: [D]`; `truth` and `mask` are `[D, K, W]`.
pub fn smooth_align<T: Float>(
    g: &mut Graph<T>,
    d: Var,
    truth: &[f64],
    mask: &[f32],
    k: usize,
    reduction: Reduction,
) -> Var {
    let nb = g.value(d).len();
    assert!(nb >= 2, "alignment smoothness needs at least two B-scans");
    assert_eq!(truth.len() % (nb * k), 0, "truth layout");
    let w = truth.len() / (nb * k);
    assert_eq!(mask.len(), truth.len(), "mask layout");
    g.apply(SmoothAlign { truth: truth.to_vec(), mask: mask.to_vec(), k, w, reduction }, &[d])
}

pub const CE_FLOOR: f64 = 1e-12;

/// Surface cross-entropy on `q: [D, K, R, W]` with 0-based target rows `[D, K, W]`
/// (`None` = masked out).
struct SurfaceCe {
    targets: Vec<Option<usize>>,
    reduction: Reduction,
}

impl SurfaceCe {
    fn count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

fn ce_dims<T: Float>(q: &Tensor<T>) -> (usize, usize, usize) {
    let s = q.shape();
    assert_eq!(s.len(), 4, "surface CE expects [D, K, R, W]");
    (s[0] * s[1], s[2], s[3])
}

impl<T: Float> Op<T> for SurfaceCe {
    fn name(&self) -> &'static str {
        "surface_ce"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let q = inputs[0];
        let (p, r, w) = ce_dims(q);
        assert_eq!(self.targets.len(), p * w, "target layout");
        let mut total = 0.0;
        for (i, t) in self.targets.iter().enumerate() {
            if let Some(row) = *t {
                let v = q.data()[((i / w) * r + row) * w + i % w].as_f64();
                total -= v.max(CE_FLOOR).ln();
            }
        }
        scalar(total / self.reduction.divisor(self.count()))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let q = inputs[0];
        let (_, r, w) = ce_dims(q);
        let scale = g.item().as_f64() / self.reduction.divisor(self.count());
        let mut gq = vec![0.0; q.len()];
        for (i, t) in self.targets.iter().enumerate() {
            if let Some(row) = *t {
                let idx = ((i / w) * r + row) * w + i % w;
                let v = q.data()[idx].as_f64();
                if v > CE_FLOOR {
                    gq[idx] = -scale / v;
                }
            }
        }
        vec![Some(from_f64(q.shape(), gq))]
    }
}

pub fn surface_ce<T: Float>(g: &mut Graph<T>, q: Var, targets: Vec<Option<usize>>, reduction: Reduction) -> Var {
    g.apply(SurfaceCe { targets, reduction }, &[q])
}

/// Smooth L1 between `pred` and a constant target of the same shape.
struct SmoothL1 {
    target: Vec<f64>,
    mask: Vec<f32>,
    reduction: Reduction,
}

impl SmoothL1 {
    fn divisor(&self) -> f64 {
        self.reduction.divisor(self.mask.iter().filter(|&&m| m > 0.0).count())
    }
}

pub fn smooth_l1_value(t: f64) -> f64 {
    if t.abs() < 1.0 {
        0.5 * t * t
    } else {
        t.abs() - 0.5
    }
}

impl<T: Float> Op<T> for SmoothL1 {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let p = inputs[0];
        assert_eq!(p.len(), self.target.len(), "smooth L1 target layout");
        let total: f64 = p
            .data()
            .iter()
            .zip(&self.target)
            .zip(&self.mask)
            .filter(|(_, &m)| m > 0.0)
            .map(|((&x, &y), _)| smooth_l1_value(x.as_f64() - y))
            .sum();
        scalar(total / self.divisor())
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let p = inputs[0];
        let scale = g.item().as_f64() / self.divisor();
        let gp = p
            .data()
            .iter()
            .zip(&self.target)
            .zip(&self.mask)
            .map(|((&x, &y), &m)| {
                if m <= 0.0 {
                    return 0.0;
                }
                let t = x.as_f64() - y;
                scale * if t.abs() < 1.0 { t } else { t.signum() }
            })
            .collect();
        vec![Some(from_f64(p.shape(), gp))]
    }
}

pub fn smooth_l1<T: Float>(g: &mut Graph<T>, pred: Var, target: Vec<f64>, mask: Vec<f32>, reduction: Reduction) -> Var {
    g.apply(SmoothL1 { target, mask, reduction }, &[pred])
}

/// Surface smoothness per surface: squared forward differences along `a` and `b` of
/// `[D, K, W]`, giving `[K]`.
struct SmoothSurface {
    reduction: Reduction,
}

fn ss_dims<T: Float>(p: &Tensor<T>) -> (usize, usize, usize) {
    let s = p.shape();
    assert_eq!(s.len(), 3, "surface smoothness expects [D, K, W]");
    (s[0], s[1], s[2])
}

impl SmoothSurface {
    fn divisor(&self, d: usize, w: usize) -> f64 {
        self.reduction.divisor(d * (w - 1) + (d - 1) * w)
    }
}

impl<T: Float> Op<T> for SmoothSurface {
    fn name(&self) -> &'static str {
        "smooth_surface"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let p = inputs[0];
        let (d, k, w) = ss_dims(p);
        let v = to_f64(p);
        let at = |b: usize, kk: usize, a: usize| v[(b * k + kk) * w + a];
        let div = self.divisor(d, w);
        let out = (0..k)
            .map(|kk| {
                let mut s = 0.0;
                for b in 0..d {
                    for a in 0..w {
                        if a + 1 < w {
                            s += (at(b, kk, a + 1) - at(b, kk, a)).powi(2);
                        }
                        if b + 1 < d {
                            s += (at(b + 1, kk, a) - at(b, kk, a)).powi(2);
                        }
                    }
                }
                s / div
            })
            .collect();
        from_f64(&[k], out)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let p = inputs[0];
        let (d, k, w) = ss_dims(p);
        let v = to_f64(p);
        let div = self.divisor(d, w);
        let mut gp = vec![0.0; v.len()];
        for kk in 0..k {
            let go = g.data()[kk].as_f64() / div;
            for b in 0..d {
                for a in 0..w {
                    let i = (b * k + kk) * w + a;
                    if a + 1 < w {
                        let e = 2.0 * go * (v[i + 1] - v[i]);
                        gp[i + 1] += e;
                        gp[i] -= e;
                    }
                    if b + 1 < d {
                        let j = ((b + 1) * k + kk) * w + a;
                        let e = 2.0 * go * (v[j] - v[i]);
                        gp[j] += e;
                        gp[i] -= e;
                    }
                }
            }
        }
        vec![Some(from_f64(p.shape(), gp))]
    }
}

pub fn smooth_surface<T: Float>(g: &mut Graph<T>, pred: Var, reduction: Reduction) -> Var {
    g.apply(SmoothSurface { reduction }, &[pred])
}

pub const DICE_EPS: f64 = 1e-5;

/// `(1 - mean soft Dice over classes) + mean voxel cross-entropy` for
/// logits `[D, C, H, W]` and labels `[D, H, W]`.
struct DiceCe {
    labels: Vec<u8>,
}

struct DiceParts {
    probs: Vec<f64>,
    inter: Vec<f64>,
    psum: Vec<f64>,
    ysum: Vec<f64>,
    ce: f64,
}

fn dice_parts<T: Float>(x: &Tensor<T>, labels: &[u8]) -> (DiceParts, (usize, usize, usize)) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "Dice+CE expects [D, C, H, W]");
    let (d, c, hw) = (s[0], s[1], s[2] * s[3]);
    assert_eq!(labels.len(), d * hw, "label layout");
    let xd = x.data();
    let mut probs = vec![0.0; x.len()];
    let (mut inter, mut psum, mut ysum) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    let mut ce = 0.0;
    for b in 0..d {
        for p in 0..hw {
            let idx = |ch: usize| (b * c + ch) * hw + p;
            let m = (0..c).map(|ch| xd[idx(ch)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (xd[idx(ch)].as_f64() - m).exp()).sum();
            let y = labels[b * hw + p] as usize;
            assert!(y < c, "label {y} out of range for {c} classes");
            for ch in 0..c {
                let pr = (xd[idx(ch)].as_f64() - m).exp() / z;
                probs[idx(ch)] = pr;
                psum[ch] += pr;
            }
            inter[y] += probs[idx(y)];
            ysum[y] += 1.0;
            ce -= xd[idx(y)].as_f64() - m - z.ln();
        }
    }
    ce /= (d * hw) as f64;
    (DiceParts { probs, inter, psum, ysum, ce }, (d, c, hw))
}

impl DiceParts {
    fn dice(&self, ch: usize) -> f64 {
        (2.0 * self.inter[ch] + DICE_EPS) / (self.psum[ch] + self.ysum[ch] + DICE_EPS)
    }

    fn dice_term(&self) -> f64 {
        let c = self.inter.len();
        1.0 - (0..c).map(|ch| self.dice(ch)).sum::<f64>() / c as f64
    }
}

impl<T: Float> Op<T> for DiceCe {
    fn name(&self) -> &'static str {
        "dice_ce"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let (parts, _) = dice_parts(inputs[0], &self.labels);
        scalar(parts.dice_term() + parts.ce)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (parts, (d, c, hw)) = dice_parts(x, &self.labels);
        let go = g.item().as_f64();
        let nvox = (d * hw) as f64;
        let denom: Vec<f64> = (0..c).map(|ch| parts.psum[ch] + parts.ysum[ch] + DICE_EPS).collect();
        let numer: Vec<f64> = (0..c).map(|ch| 2.0 * parts.inter[ch] + DICE_EPS).collect();
        let mut gx = vec![0.0; x.len()];
        let mut gp = vec![0.0; c];
        for b in 0..d {
            for p in 0..hw {
                let idx = |ch: usize| (b * c + ch) * hw + p;
                let y = self.labels[b * hw + p] as usize;
                for (ch, g) in gp.iter_mut().enumerate() {
                    let yc = if ch == y { 1.0 } else { 0.0 };
                    *g = -(2.0 * yc * denom[ch] - numer[ch]) / (denom[ch] * denom[ch]) / c as f64;
                }
                let dot: f64 = (0..c).map(|ch| parts.probs[idx(ch)] * gp[ch]).sum();
                for ch in 0..c {
                    let pr = parts.probs[idx(ch)];
                    let yc = if ch == y { 1.0 } else { 0.0 };
                    gx[idx(ch)] = go * (pr * (gp[ch] - dot) + (pr - yc) / nvox);
                }
            }
        }
        vec![Some(from_f64(x.shape(), gx))]
    }
}

pub fn dice_ce<T: Float>(g: &mut Graph<T>, logits: Var, labels: Vec<u8>) -> Var {
    g.apply(DiceCe { labels }, &[logits])
}

/// Dice and CE parts separately, for reporting.
pub fn dice_ce_parts<T: Float>(logits: &Tensor<T>, labels: &[u8]) -> (f64, f64) {
    let (parts, _) = dice_parts(logits, labels);
    (parts.dice_term(), parts.ce)
}
