//! Training objectives.
//!
//! `L_Align = L_NCC + L_SmoothA`,
//! `L_Seg = L_Dice+CE + L_CE + L_L1 + sum_k lambda_k L_SmoothS,k`,
//! `L_total = L_Seg + L_Align`.

pub mod ops;

use octsurf_autograd::{Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{OctError, Result};
use crate::model::ops::stm_warp;
use crate::model::{surfaces_to_network, ForwardVars};
use crate::types::{
    apply_displacement_to_surfaces, round_half_up, surfaces_to_labelmap, DisplacementVector, LabelMap, OctVolume,
    SurfaceDistribution, SurfaceSet,
};
pub use ops::Reduction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the surface smoothness term, one per surface.
    pub lambda: Vec<f64>,
    pub reduction: Reduction,
    pub ncc_window: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: vec![0.0, 0.3, 0.5], reduction: Reduction::Mean, ncc_window: 9 }
    }
}

impl LossWeights {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.lambda.len() != k {
            return Err(OctError::Config(format!("loss.lambda needs {k} entries, got {}", self.lambda.len())));
        }
        if self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(OctError::Config("loss.lambda entries must be finite and >= 0".into()));
        }
        if self.ncc_window == 0 || self.ncc_window % 2 == 0 {
            return Err(OctError::Config("loss.ncc_window must be odd".into()));
        }
        Ok(())
    }
}

/// Reorders a `K x N_B x N_A` mask to the network's `N_B x K x N_A`.
pub fn mask_to_network(mask: &[f32], k: usize, nb: usize, na: usize) -> Vec<f32> {
    assert_eq!(mask.len(), k * nb * na, "mask layout");
    let mut out = vec![0.0; mask.len()];
    for kk in 0..k {
        for b in 0..nb {
            for a in 0..na {
                out[(b * k + kk) * na + a] = mask[(kk * nb + b) * na + a];
            }
        }
    }
    out
}

fn full_mask(s: &SurfaceSet) -> Vec<f32> {
    vec![1.0; s.positions().len()]
}

fn check_mask(mask: &[f32], s: &SurfaceSet) -> Result<()> {
    if mask.len() != s.positions().len() {
        return Err(OctError::Shape(format!("mask has {} entries, surfaces have {}", mask.len(), s.positions().len())));
    }
    Ok(())
}

fn check_window(window: usize, rows: usize, na: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(OctError::Invalid(format!("NCC window must be odd, got {window}")));
    }
    if window > rows || window > na {
        return Err(OctError::Invalid(format!("NCC window {window} larger than the {rows}x{na} B-scan")));
    }
    Ok(())
}

fn d_tensor<T: Float>(d: &DisplacementVector) -> Tensor<T> {
    d.to_tensor()
}

/// Negative mean local NCC of adjacent B-scans after warping by `d`.
pub fn loss_local_ncc(v: &OctVolume, d: &DisplacementVector, window: usize) -> Result<f64> {
    let (na, nb, nr) = v.shape();
    check_window(window, nr, na)?;
    if d.len() != nb {
        return Err(OctError::Shape(format!("displacement has {} entries, volume has {nb} B-scans", d.len())));
    }
    let mut g = Graph::<f64>::new();
    let x = g.constant(v.to_network_tensor());
    let dv = g.constant(d_tensor(d));
    let warped = stm_warp(&mut g, x, dv);
    let l = ops::local_ncc(&mut g, warped, window);
    Ok(g.value(l).item())
}

/// Alignment smoothness, averaged over surfaces. `mask` is `K x N_B x N_A`.
pub fn loss_smooth_align(truth: &SurfaceSet, d: &DisplacementVector, mask: Option<&[f32]>, reduction: Reduction) -> Result<f64> {
    if truth.n_b() < 2 || d.len() != truth.n_b() {
        return Err(OctError::Shape("alignment smoothness needs N_B >= 2 and one displacement per B-scan".into()));
    }
    let owned;
    let mask = match mask {
        Some(m) => {
            check_mask(m, truth)?;
            m
        }
        None => {
            owned = full_mask(truth);
            &owned
        }
    };
    let (k, nb, na) = (truth.k(), truth.n_b(), truth.n_a());
    let tn: Tensor<f64> = surfaces_to_network(truth);
    let mut g = Graph::<f64>::new();
    let dv = g.constant(d_tensor(d));
    let l = ops::smooth_align(&mut g, dv, tn.data(), &mask_to_network(mask, k, nb, na), k, reduction);
    Ok(g.value(l).item())
}

/// `L_NCC + L_SmoothA` with weight 1 each.
pub fn loss_align(v: &OctVolume, truth: &SurfaceSet, d: &DisplacementVector, weights: &LossWeights) -> Result<f64> {
    Ok(loss_local_ncc(v, d, weights.ncc_window)? + loss_smooth_align(truth, d, None, weights.reduction)?)
}

fn ce_targets(truth: &SurfaceSet, mask: &[f32], rows: usize) -> Vec<Option<usize>> {
    let (k, nb, na) = (truth.k(), truth.n_b(), truth.n_a());
    let mut out = vec![None; k * nb * na];
    for kk in 0..k {
        for b in 0..nb {
            for a in 0..na {
                let r = round_half_up(truth.at(kk, b, a));
                if mask[(kk * nb + b) * na + a] > 0.0 && r >= 1.0 && r <= rows as f64 {
                    out[(b * k + kk) * na + a] = Some(r as usize - 1);
                }
            }
        }
    }
    out
}

/// Surface cross-entropy: negative log-probability of the (half-up rounded) true row.
pub fn loss_ce_surface(q: &SurfaceDistribution, truth: &SurfaceSet, mask: Option<&[f32]>, reduction: Reduction) -> Result<f64> {
    let (k, nb, na, nr) = q.shape();
    if (truth.k(), truth.n_b(), truth.n_a()) != (k, nb, na) {
        return Err(OctError::Shape("distribution and surfaces disagree".into()));
    }
    q.check_normalized(1e-4)?;
    let full = full_mask(truth);
    let mask = mask.unwrap_or(&full);
    check_mask(mask, truth)?;
    let mut g = Graph::<f64>::new();
    let qv = g.constant(q.to_network_tensor());
    let l = ops::surface_ce(&mut g, qv, ce_targets(truth, mask, nr), reduction);
    Ok(g.value(l).item())
}

/// Smooth L1 between predicted and true positions.
pub fn loss_smooth_l1(pred: &SurfaceSet, truth: &SurfaceSet, mask: Option<&[f32]>, reduction: Reduction) -> Result<f64> {
    if !pred.same_shape(truth) {
        return Err(OctError::Shape("prediction and truth disagree".into()));
    }
    let full = full_mask(truth);
    let mask = mask.unwrap_or(&full);
    check_mask(mask, truth)?;
    let total: f64 = pred
        .positions()
        .iter()
        .zip(truth.positions())
        .zip(mask)
        .filter(|(_, &m)| m > 0.0)
        .map(|((p, t), _)| ops::smooth_l1_value(p - t))
        .sum();
    let count = mask.iter().filter(|&&m| m > 0.0).count();
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / count.max(1) as f64,
    })
}

/// Surface smoothness, one value per surface.
pub fn loss_smooth_surface(pred: &SurfaceSet, reduction: Reduction) -> Result<Vec<f64>> {
    let mut g = Graph::<f64>::new();
    let p = g.constant(surfaces_to_network(pred));
    let l = ops::smooth_surface(&mut g, p, reduction);
    Ok(g.value(l).data().to_vec())
}

/// Dice+CE on `[N_B, K + 1, R, N_A]` logits.
pub fn loss_dice_ce<T: Float>(logits: &Tensor<T>, labels: &LabelMap) -> Result<f64> {
    let (na, nb, nr) = labels.shape();
    let s = logits.shape();
    if s.len() != 4 || s[0] != nb || s[2] != nr || s[3] != na {
        return Err(OctError::Shape(format!("logits {s:?} do not match labels {na}x{nb}x{nr}")));
    }
    let net = labels.to_network_order();
    if let Some(&bad) = net.iter().find(|&&l| l as usize >= s[1]) {
        return Err(OctError::Shape(format!("label {bad} needs more than {} classes", s[1])));
    }
    let (dice, ce) = ops::dice_ce_parts(logits, &net);
    Ok(dice + ce)
}

/// Scalar values of every component of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ncc: f64,
    pub smooth_align: f64,
    pub align: f64,
    pub dice_ce: f64,
    pub ce: f64,
    pub l1: f64,
    /// Unweighted surface smoothness per surface.
    pub smooth_s_raw: Vec<f64>,
    /// `sum_k lambda_k L_SmoothS,k`.
    pub smooth_s: f64,
    pub seg: f64,
    pub total: f64,
}

impl LossTerms {
    pub const COLUMNS: [&'static str; 9] = ["total", "seg", "align", "ncc", "smooth_align", "dice_ce", "ce", "l1", "smooth_s"];

    pub fn values(&self) -> [f64; 9] {
        [self.total, self.seg, self.align, self.ncc, self.smooth_align, self.dice_ce, self.ce, self.l1, self.smooth_s]
    }

    pub fn accumulate(&mut self, other: &LossTerms, weight: f64) {
        self.ncc += weight * other.ncc;
        self.smooth_align += weight * other.smooth_align;
        self.align += weight * other.align;
        self.dice_ce += weight * other.dice_ce;
        self.ce += weight * other.ce;
        self.l1 += weight * other.l1;
        self.smooth_s += weight * other.smooth_s;
        self.seg += weight * other.seg;
        self.total += weight * other.total;
        if self.smooth_s_raw.len() < other.smooth_s_raw.len() {
            self.smooth_s_raw.resize(other.smooth_s_raw.len(), 0.0);
        }
        for (a, b) in self.smooth_s_raw.iter_mut().zip(&other.smooth_s_raw) {
            *a += weight * b;
        }
    }
}

pub struct Objective {
    pub total: Var,
    pub terms: LossTerms,
}

/// Builds the full objective on the tape of a forward pass.
///
/// `truth` and `mask` (`K x N_B x N_A`) are in the input frame. Targets of
/// the aligned-frame heads are `truth - d` with `d` treated as a constant.
/// Smooth L1 and surface smoothness act on the unordered soft-argmax
/// positions; ordering is applied to the reported surfaces only.
/// `L_Align` joins the total only when `align_in_total` is set and the
/// displacement was predicted.
pub fn build_objective<T: Float>(
    g: &mut Graph<T>,
    fv: &ForwardVars,
    input: Var,
    truth: &SurfaceSet,
    mask: &[f32],
    weights: &LossWeights,
    align_in_total: bool,
) -> Result<Objective> {
    let (k, nb, na) = (truth.k(), truth.n_b(), truth.n_a());
    weights.validate(k)?;
    check_mask(mask, truth)?;
    let rows = g.value(input).dim(2);
    let dwarp = match fv.warp {
        Some(d) => DisplacementVector::new(g.value(d).data().iter().map(|v| v.as_f64()).collect())?,
        None => DisplacementVector::zeros(nb),
    };
    let aligned = apply_displacement_to_surfaces(truth, &dwarp, None)?;
    let mask_net = mask_to_network(mask, k, nb, na);
    let r = weights.reduction;

    let labels = surfaces_to_labelmap(&aligned, rows)?.to_network_order();
    let dice_ce = ops::dice_ce(g, fv.semantic_logits, labels);
    let ce = ops::surface_ce(g, fv.q, ce_targets(&aligned, mask, rows), r);
    let truth_net: Tensor<f64> = surfaces_to_network(truth);
    let l1 = ops::smooth_l1(g, fv.raw, truth_net.data().to_vec(), mask_net.clone(), r);
    let ss = ops::smooth_surface(g, fv.raw_aligned, r);
    let lam = g.constant(Tensor::from_vec(&[k], weights.lambda.iter().map(|&l| T::from_f64_lossy(l)).collect()).unwrap());
    let ss_w = g.mul(ss, lam);
    let ss_w = g.sum(ss_w);
    let seg = g.weighted_sum(&[(dice_ce, 1.0), (ce, 1.0), (l1, 1.0), (ss_w, 1.0)]);

    let d_align = match fv.displacement {
        Some(d) => d,
        None => g.constant(dwarp.to_tensor()),
    };
    let warped = stm_warp(g, input, d_align);
    let ncc = ops::local_ncc(g, warped, weights.ncc_window);
    let sa = ops::smooth_align(g, d_align, truth_net.data(), &mask_net, k, r);
    let align = g.add(ncc, sa);
    let total = if align_in_total && fv.displacement.is_some() { g.add(seg, align) } else { seg };

    let val = |g: &Graph<T>, v: Var| g.value(v).item().as_f64();
    let terms = LossTerms {
        ncc: val(g, ncc),
        smooth_align: val(g, sa),
        align: val(g, align),
        dice_ce: val(g, dice_ce),
        ce: val(g, ce),
        l1: val(g, l1),
        smooth_s_raw: g.value(ss).data().iter().map(|v| v.as_f64()).collect(),
        smooth_s: val(g, ss_w),
        seg: val(g, seg),
        total: val(g, total),
    };
    Ok(Objective { total, terms })
}
