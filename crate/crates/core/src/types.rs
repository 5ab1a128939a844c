//! Shared data model: volumes, layer surfaces, displacements, per-A-scan
//! surface distributions and label maps.
//!
//! Row indices are 1-based in every public interface: a surface at row `r`
//! means that rows `r, r + 1, ...` of the A-scan lie below it. Storage is
//! 0-based internally where noted.

use octsurf_autograd::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{OctError, Result};

/// Voxel spacing in micrometres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    /// Within an A-scan (axial, one row).
    pub axial_um: f64,
    /// Between neighbouring A-scans of one B-scan.
    pub lateral_um: f64,
    /// Between neighbouring B-scans.
    pub cross_bscan_um: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Self { axial_um: 3.24, lateral_um: 6.7, cross_bscan_um: 67.0 }
    }
}

impl Spacing {
    pub fn as_array(&self) -> [f64; 3] {
        [self.axial_um, self.lateral_um, self.cross_bscan_um]
    }

    pub fn from_array(v: [f64; 3]) -> Result<Self> {
        if v.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(OctError::Invalid(format!("spacing entries must be positive, got {v:?}")));
        }
        Ok(Self { axial_um: v[0], lateral_um: v[1], cross_bscan_um: v[2] })
    }
}

/// Half-up rounding used for every continuous-to-row conversion.
pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Intensity grid of shape `N_A x N_B x R`, stored row-major in `a, b, r`
/// order so each A-scan is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct OctVolume {
    id: String,
    n_a: usize,
    n_b: usize,
    rows: usize,
    spacing: Spacing,
    data: Vec<f32>,
}

impl OctVolume {
    pub fn new(id: impl Into<String>, n_a: usize, n_b: usize, rows: usize, data: Vec<f32>, spacing: Spacing) -> Result<Self> {
        if n_a < 1 || n_b < 2 || rows < 2 {
            return Err(OctError::Shape(format!(
                "volume needs N_A >= 1, N_B >= 2, R >= 2; got ({n_a}, {n_b}, {rows})"
            )));
        }
        if data.len() != n_a * n_b * rows {
            return Err(OctError::Shape(format!(
                "volume ({n_a}, {n_b}, {rows}) needs {} values, got {}",
                n_a * n_b * rows,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(OctError::Invalid("volume intensities must be finite".into()));
        }
        Spacing::from_array(spacing.as_array())?;
        Ok(Self { id: id.into(), n_a, n_b, rows, spacing, data })
    }

    /// Builds a volume from a generator `f(a, b, r0)` with 0-based row `r0`.
    pub fn from_fn(
        id: impl Into<String>,
        n_a: usize,
        n_b: usize,
        rows: usize,
        spacing: Spacing,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(n_a * n_b * rows);
        for a in 0..n_a {
            for b in 0..n_b {
                for r in 0..rows {
                    data.push(f(a, b, r));
                }
            }
        }
        Self::new(id, n_a, n_b, rows, data, spacing)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `(N_A, N_B, R)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_a, self.n_b, self.rows)
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Intensity at 0-based row `r0`.
    pub fn get(&self, a: usize, b: usize, r0: usize) -> f32 {
        self.data[(a * self.n_b + b) * self.rows + r0]
    }

    pub fn ascan(&self, a: usize, b: usize) -> &[f32] {
        let start = (a * self.n_b + b) * self.rows;
        &self.data[start..start + self.rows]
    }

    pub fn ascan_mut(&mut self, a: usize, b: usize) -> &mut [f32] {
        let start = (a * self.n_b + b) * self.rows;
        &mut self.data[start..start + self.rows]
    }

    /// B-scan `b` as a `R x N_A` row-major image.
    pub fn bscan(&self, b: usize) -> Vec<f32> {
        let mut img = vec![0.0; self.rows * self.n_a];
        for a in 0..self.n_a {
            for (r, &v) in self.ascan(a, b).iter().enumerate() {
                img[r * self.n_a + a] = v;
            }
        }
        img
    }

    /// Network layout `[N_B, 1, R, N_A]`.
    pub fn to_network_tensor<T: Float>(&self) -> Tensor<T> {
        let (na, nb, nr) = (self.n_a, self.n_b, self.rows);
        let mut out = Tensor::zeros(&[nb, 1, nr, na]);
        let od = out.data_mut();
        for a in 0..na {
            for b in 0..nb {
                for (r, &v) in self.ascan(a, b).iter().enumerate() {
                    od[(b * nr + r) * na + a] = T::from_f64_lossy(v as f64);
                }
            }
        }
        out
    }

    /// Inverse of [`OctVolume::to_network_tensor`].
    pub fn from_network_tensor<T: Float>(id: &str, t: &Tensor<T>, spacing: Spacing) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(OctError::Shape(format!("expected [N_B, 1, R, N_A], got {s:?}")));
        }
        let (nb, nr, na) = (s[0], s[2], s[3]);
        let td = t.data();
        Self::from_fn(id, na, nb, nr, spacing, |a, b, r| td[(b * nr + r) * na + a].as_f64() as f32)
    }

    /// Min-max normalisation to `[0, 1]`; a constant volume maps to 0.5.
    pub fn normalized(&self) -> OctVolume {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.5; self.data.len()]
        };
        OctVolume { data, ..self.clone() }
    }
}

/// `K` layer surfaces, each a real-valued 1-based row position per `(b, a)`.
/// Stored `K x N_B x N_A` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSet {
    names: Vec<String>,
    n_b: usize,
    n_a: usize,
    positions: Vec<f64>,
}

impl SurfaceSet {
    /// Checks shape and finiteness only; see [`SurfaceSet::check_ordered`].
    pub fn new(names: Vec<String>, n_b: usize, n_a: usize, positions: Vec<f64>) -> Result<Self> {
        let k = names.len();
        if k == 0 || n_b == 0 || n_a == 0 {
            return Err(OctError::Shape(format!("surface set needs K, N_B, N_A >= 1; got ({k}, {n_b}, {n_a})")));
        }
        if positions.len() != k * n_b * n_a {
            return Err(OctError::Shape(format!(
                "surface set ({k}, {n_b}, {n_a}) needs {} positions, got {}",
                k * n_b * n_a,
                positions.len()
            )));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(OctError::Invalid("surface positions must be finite".into()));
        }
        Ok(Self { names, n_b, n_a, positions })
    }

    /// Like [`SurfaceSet::new`] but also enforces the ordering invariant.
    pub fn ordered(names: Vec<String>, n_b: usize, n_a: usize, positions: Vec<f64>) -> Result<Self> {
        let s = Self::new(names, n_b, n_a, positions)?;
        s.check_ordered()?;
        Ok(s)
    }

    pub fn from_fn(names: Vec<String>, n_b: usize, n_a: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let k = names.len();
        let mut positions = Vec::with_capacity(k * n_b * n_a);
        for kk in 0..k {
            for b in 0..n_b {
                for a in 0..n_a {
                    positions.push(f(kk, b, a));
                }
            }
        }
        Self::new(names, n_b, n_a, positions)
    }

    pub fn default_names(k: usize) -> Vec<String> {
        match k {
            3 => vec!["ILM".into(), "IRPE".into(), "OBM".into()],
            _ => (0..k).map(|i| format!("S{i}")).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    #[inline]
    pub fn index(&self, k: usize, b: usize, a: usize) -> usize {
        (k * self.n_b + b) * self.n_a + a
    }

    pub fn at(&self, k: usize, b: usize, a: usize) -> f64 {
        self.positions[self.index(k, b, a)]
    }

    pub fn set(&mut self, k: usize, b: usize, a: usize, v: f64) {
        let i = self.index(k, b, a);
        self.positions[i] = v;
    }

    /// Surface `k` as an `N_B x N_A` row-major slice.
    pub fn surface(&self, k: usize) -> &[f64] {
        let n = self.n_b * self.n_a;
        &self.positions[k * n..(k + 1) * n]
    }

    pub fn check_ordered(&self) -> Result<()> {
        for k in 1..self.k() {
            for b in 0..self.n_b {
                for a in 0..self.n_a {
                    if self.at(k, b, a) < self.at(k - 1, b, a) {
                        return Err(OctError::Unordered { k, prev: k - 1, b, a });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_ordered(&self) -> bool {
        self.check_ordered().is_ok()
    }

    /// Checks `1 <= position <= rows` everywhere.
    pub fn check_bounds(&self, rows: usize) -> Result<()> {
        let hi = rows as f64;
        match self.positions.iter().position(|&p| !(1.0..=hi).contains(&p)) {
            None => Ok(()),
            Some(i) => Err(OctError::Invalid(format!(
                "surface position {} at flat index {i} outside [1, {rows}]",
                self.positions[i]
            ))),
        }
    }

    pub fn same_shape(&self, other: &SurfaceSet) -> bool {
        self.k() == other.k() && self.n_b == other.n_b && self.n_a == other.n_a
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.k(), self.n_b, self.n_a],
            self.positions.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
        .expect("shape checked at construction")
    }

    pub fn from_tensor<T: Float>(names: Vec<String>, t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != names.len() {
            return Err(OctError::Shape(format!("expected [K={}, N_B, N_A], got {s:?}", names.len())));
        }
        Self::new(names, s[1], s[2], t.data().iter().map(|v| v.as_f64()).collect())
    }
}

/// One axial displacement per B-scan, in pixels. Positive values move the
/// corrected frame toward larger row indices of the acquired frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementVector {
    d: Vec<f64>,
}

impl DisplacementVector {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        if d.is_empty() {
            return Err(OctError::Shape("displacement vector is empty".into()));
        }
        if d.iter().any(|v| !v.is_finite()) {
            return Err(OctError::Invalid("displacements must be finite".into()));
        }
        Ok(Self { d })
    }

    pub fn zeros(n_b: usize) -> Self {
        Self { d: vec![0.0; n_b] }
    }

    pub fn values(&self) -> &[f64] {
        &self.d
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.d.iter().sum::<f64>() / self.d.len() as f64
    }

    /// Gauge-fixed copy with zero mean.
    pub fn centered(&self) -> Self {
        let m = self.mean();
        Self { d: self.d.iter().map(|v| v - m).collect() }
    }

    pub fn negated(&self) -> Self {
        Self { d: self.d.iter().map(|v| -v).collect() }
    }

    pub fn check_rows(&self, rows: usize) -> Result<()> {
        if self.d.iter().any(|v| v.abs() >= rows as f64) {
            return Err(OctError::Invalid(format!("|d_b| must be below R = {rows}")));
        }
        Ok(())
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.d.len()], self.d.iter().map(|&v| T::from_f64_lossy(v)).collect()).unwrap()
    }
}

/// Per-A-scan probability vectors over the `R` rows, stored
/// `K x N_B x N_A x R` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceDistribution {
    k: usize,
    n_b: usize,
    n_a: usize,
    rows: usize,
    probs: Vec<f32>,
}

impl SurfaceDistribution {
    pub fn new(k: usize, n_b: usize, n_a: usize, rows: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != k * n_b * n_a * rows {
            return Err(OctError::Shape(format!(
                "distribution ({k}, {n_b}, {n_a}, {rows}) needs {} values, got {}",
                k * n_b * n_a * rows,
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(OctError::Invalid("probabilities must be finite and non-negative".into()));
        }
        Ok(Self { k, n_b, n_a, rows, probs })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.k, self.n_b, self.n_a, self.rows)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn column(&self, k: usize, b: usize, a: usize) -> &[f32] {
        let start = ((k * self.n_b + b) * self.n_a + a) * self.rows;
        &self.probs[start..start + self.rows]
    }

    /// Largest deviation of any column sum from one.
    pub fn max_normalization_error(&self) -> f64 {
        self.probs
            .chunks(self.rows)
            .map(|c| (c.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        let err = self.max_normalization_error();
        if err > tol {
            return Err(OctError::Invalid(format!("distribution not normalised: max |sum - 1| = {err:e}")));
        }
        Ok(())
    }

    /// Network layout `[N_B, K, R, N_A]`.
    pub fn to_network_tensor<T: Float>(&self) -> Tensor<T> {
        let (k, nb, na, nr) = (self.k, self.n_b, self.n_a, self.rows);
        let mut out = Tensor::zeros(&[nb, k, nr, na]);
        let od = out.data_mut();
        for kk in 0..k {
            for b in 0..nb {
                for a in 0..na {
                    for (r, &p) in self.column(kk, b, a).iter().enumerate() {
                        od[((b * k + kk) * nr + r) * na + a] = T::from_f64_lossy(p as f64);
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`SurfaceDistribution::to_network_tensor`].
    pub fn from_network_tensor<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(OctError::Shape(format!("expected [N_B, K, R, N_A], got {s:?}")));
        }
        let (nb, k, nr, na) = (s[0], s[1], s[2], s[3]);
        let td = t.data();
        let mut probs = vec![0.0f32; k * nb * na * nr];
        for b in 0..nb {
            for kk in 0..k {
                for r in 0..nr {
                    for a in 0..na {
                        probs[((kk * nb + b) * na + a) * nr + r] = td[((b * k + kk) * nr + r) * na + a].as_f64() as f32;
                    }
                }
            }
        }
        Self::new(k, nb, na, nr, probs)
    }
}

/// Region index per voxel, `N_A x N_B x R` row-major (same order as
/// [`OctVolume`]). Region `k` lies between surface `k - 1` and surface `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    n_a: usize,
    n_b: usize,
    rows: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(n_a: usize, n_b: usize, rows: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != n_a * n_b * rows {
            return Err(OctError::Shape("label map size mismatch".into()));
        }
        Ok(Self { n_a, n_b, rows, labels })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_a, self.n_b, self.rows)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn ascan(&self, a: usize, b: usize) -> &[u8] {
        let start = (a * self.n_b + b) * self.rows;
        &self.labels[start..start + self.rows]
    }

    /// Labels in network layout `[N_B, R, N_A]`.
    pub fn to_network_order(&self) -> Vec<u8> {
        let (na, nb, nr) = (self.n_a, self.n_b, self.rows);
        let mut out = vec![0u8; self.labels.len()];
        for a in 0..na {
            for b in 0..nb {
                for (r, &l) in self.ascan(a, b).iter().enumerate() {
                    out[(b * nr + r) * na + a] = l;
                }
            }
        }
        out
    }

    pub fn is_stratified(&self) -> bool {
        self.labels.chunks(self.rows).all(|c| c.windows(2).all(|w| w[0] <= w[1]))
    }
}

/// Voxel `(a, b, r)` receives the number of surfaces whose rounded position
/// is at or above row `r`.
pub fn surfaces_to_labelmap(s: &SurfaceSet, rows: usize) -> Result<LabelMap> {
    s.check_ordered()?;
    if s.k() > u8::MAX as usize {
        return Err(OctError::Invalid("at most 255 surfaces fit a label map".into()));
    }
    let (nb, na) = (s.n_b(), s.n_a());
    let mut labels = vec![0u8; na * nb * rows];
    for a in 0..na {
        for b in 0..nb {
            let col = &mut labels[(a * nb + b) * rows..(a * nb + b + 1) * rows];
            for k in 0..s.k() {
                let boundary = round_half_up(s.at(k, b, a));
                // 1-based row r gets +1 when boundary <= r
                let first = boundary.max(1.0);
                if first > rows as f64 {
                    continue;
                }
                for l in &mut col[first as usize - 1..] {
                    *l += 1;
                }
            }
        }
    }
    LabelMap::new(na, nb, rows, labels)
}

/// `positions'[k, b, a] = positions[k, b, a] - d_b`, optionally clipped to
/// `[1, rows]`.
pub fn apply_displacement_to_surfaces(s: &SurfaceSet, d: &DisplacementVector, clip_rows: Option<usize>) -> Result<SurfaceSet> {
    if d.len() != s.n_b() {
        return Err(OctError::Shape(format!("displacement has {} entries, surfaces have N_B = {}", d.len(), s.n_b())));
    }
    let mut out = s.clone();
    for k in 0..s.k() {
        for b in 0..s.n_b() {
            for a in 0..s.n_a() {
                let mut v = s.at(k, b, a) - d.values()[b];
                if let Some(r) = clip_rows {
                    v = v.clamp(1.0, r as f64);
                }
                out.set(k, b, a, v);
            }
        }
    }
    Ok(out)
}
