//! Flattening to an estimated Bruch's membrane and patch extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OctError, Result};
use crate::types::{round_half_up, DisplacementVector, OctVolume, SurfaceSet};

/// Per-`(b, a)` BM row estimate, stored `N_B x N_A`.
#[derive(Clone, Debug, PartialEq)]
pub struct BmEstimate {
    pub n_b: usize,
    pub n_a: usize,
    pub positions: Vec<f64>,
    /// A-scans whose strongest negative gradient was below the floor.
    pub flagged: Vec<bool>,
}

impl BmEstimate {
    pub fn at(&self, b: usize, a: usize) -> f64 {
        self.positions[b * self.n_a + a]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BmConfig {
    /// Minimum gradient magnitude for an A-scan to count as detected.
    pub gradient_floor: f64,
    /// Median window across A-scans and across B-scans.
    pub median_window: [usize; 2],
}

impl Default for BmConfig {
    fn default() -> Self {
        Self { gradient_floor: 0.02, median_window: [5, 3] }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Row of the strongest negative axial gradient in the lower half of each
/// A-scan (3-tap axial smoothing first), then a median filter across
/// `(a, b)`. Flagged A-scans are filled from unflagged neighbours in the
/// window, else from the global median, else `R / 2`.
pub fn estimate_bm(v: &OctVolume, cfg: &BmConfig) -> Result<BmEstimate> {
    let (na, nb, nr) = v.shape();
    if nr < 8 {
        return Err(OctError::Invalid(format!("BM estimation needs R >= 8, got {nr}")));
    }
    let mut raw = vec![0.0; na * nb];
    let mut flagged = vec![false; na * nb];
    let start = nr / 2;
    for a in 0..na {
        for b in 0..nb {
            let col = v.ascan(a, b);
            let smooth = |r: usize| -> f64 {
                let lo = r.saturating_sub(1);
                let hi = (r + 1).min(nr - 1);
                (lo..=hi).map(|i| col[i] as f64).sum::<f64>() / (hi - lo + 1) as f64
            };
            let mut best = (0.0, start);
            for r in start..nr - 1 {
                let g = smooth(r + 1) - smooth(r);
                if g < best.0 {
                    best = (g, r);
                }
            }
            let i = b * na + a;
            // 0-based r -> 1-based row r + 1 is the last row above; BM is the next one
            raw[i] = (best.1 + 2) as f64;
            flagged[i] = -best.0 < cfg.gradient_floor;
        }
    }

    let [wa, wb] = cfg.median_window;
    let (ha, hb) = (wa / 2, wb / 2);
    let valid: Vec<f64> = raw.iter().zip(&flagged).filter(|(_, f)| !**f).map(|(v, _)| *v).collect();
    let global = if valid.is_empty() { nr as f64 / 2.0 } else { median(&mut valid.clone()) };
    let mut positions = vec![0.0; na * nb];
    let mut window = Vec::with_capacity(wa * wb);
    for b in 0..nb {
        for a in 0..na {
            window.clear();
            for bb in b.saturating_sub(hb)..=(b + hb).min(nb - 1) {
                for aa in a.saturating_sub(ha)..=(a + ha).min(na - 1) {
                    let j = bb * na + aa;
                    if !flagged[j] {
                        window.push(raw[j]);
                    }
                }
            }
            positions[b * na + a] = if window.is_empty() { global } else { median(&mut window) };
        }
    }
    Ok(BmEstimate { n_b: nb, n_a: na, positions, flagged })
}

/// Integer axial shifts applied by [`flatten_volume`], stored `N_B x N_A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlattenRecord {
    pub n_b: usize,
    pub n_a: usize,
    pub rows: usize,
    pub target_row: usize,
    pub shifts: Vec<i32>,
}

impl FlattenRecord {
    pub fn identity(n_b: usize, n_a: usize, rows: usize, target_row: usize) -> Self {
        Self { n_b, n_a, rows, target_row, shifts: vec![0; n_b * n_a] }
    }

    pub fn shift(&self, b: usize, a: usize) -> i32 {
        self.shifts[b * self.n_a + a]
    }

    fn check(&self, n_b: usize, n_a: usize) -> Result<()> {
        if self.n_b != n_b || self.n_a != n_a || self.shifts.len() != n_b * n_a {
            return Err(OctError::Shape(format!(
                "flatten record is {}x{}, data is {n_b}x{n_a}",
                self.n_b, self.n_a
            )));
        }
        let r = self.rows as i32;
        if self.shifts.iter().any(|s| !(-r..=r).contains(s)) {
            return Err(OctError::Invalid("flatten shifts must lie in [-R, R]".into()));
        }
        Ok(())
    }
}

/// Shifts every A-scan by `round(target_row - bm)` rows (edge replication),
/// so the BM lands on `target_row`.
pub fn flatten_volume(v: &OctVolume, bm: &BmEstimate, target_row: usize) -> Result<(OctVolume, FlattenRecord)> {
    let (na, nb, nr) = v.shape();
    if bm.n_a != na || bm.n_b != nb {
        return Err(OctError::Shape(format!("BM grid is {}x{}, volume is {nb}x{na}", bm.n_b, bm.n_a)));
    }
    if target_row * 2 < nr || target_row + 4 > nr {
        return Err(OctError::Invalid(format!("target row {target_row} outside [R/2, R-4] for R = {nr}")));
    }
    let shifts: Vec<i32> = bm.positions.iter().map(|&p| round_half_up(target_row as f64 - p) as i32).collect();
    let rec = FlattenRecord { n_b: nb, n_a: na, rows: nr, target_row, shifts };
    rec.check(nb, na)?;
    let out = apply_record(v, &rec, 1)?;
    Ok((out, rec))
}

/// Applies the record's shifts (`sign = 1`) or undoes them (`sign = -1`).
pub fn apply_record(v: &OctVolume, rec: &FlattenRecord, sign: i32) -> Result<OctVolume> {
    let (na, nb, nr) = v.shape();
    rec.check(nb, na)?;
    let mut out = v.clone();
    for a in 0..na {
        for b in 0..nb {
            let s = sign * rec.shift(b, a);
            let src = v.ascan(a, b);
            for (r, o) in out.ascan_mut(a, b).iter_mut().enumerate() {
                let from = (r as i32 - s).clamp(0, nr as i32 - 1);
                *o = src[from as usize];
            }
        }
    }
    Ok(out)
}

/// Maps surfaces into the flattened frame: `positions + shift(a, b)`.
pub fn flatten_surfaces(s: &SurfaceSet, rec: &FlattenRecord) -> Result<SurfaceSet> {
    shift_surfaces(s, rec, 1.0)
}

/// Maps flattened-frame surfaces back: `positions - shift(a, b)`.
pub fn unflatten_surface(s: &SurfaceSet, rec: &FlattenRecord) -> Result<SurfaceSet> {
    shift_surfaces(s, rec, -1.0)
}

fn shift_surfaces(s: &SurfaceSet, rec: &FlattenRecord, sign: f64) -> Result<SurfaceSet> {
    rec.check(s.n_b(), s.n_a())?;
    SurfaceSet::from_fn(s.names().to_vec(), s.n_b(), s.n_a(), |k, b, a| {
        s.at(k, b, a) + sign * rec.shift(b, a) as f64
    })
}

/// Min-max normalisation to `[0, 1]`; constant volumes map to 0.5.
pub fn normalize_volume(v: &OctVolume) -> OctVolume {
    v.normalized()
}

/// Patch extent as `(rows, A-scans, B-scans)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchShape {
    pub rows: usize,
    pub a: usize,
    pub b: usize,
}

impl PatchShape {
    pub fn of_volume(v: &OctVolume) -> Self {
        let (na, nb, nr) = v.shape();
        Self { rows: nr, a: na, b: nb }
    }

    fn check_fits(&self, v: &OctVolume) -> Result<()> {
        let (na, nb, nr) = v.shape();
        if self.rows < 2 || self.a == 0 || self.b < 2 {
            return Err(OctError::Invalid(format!("degenerate patch shape {self:?}")));
        }
        if self.rows > nr || self.a > na || self.b > nb {
            return Err(OctError::Shape(format!("patch {self:?} larger than volume (rows {nr}, a {na}, b {nb})")));
        }
        Ok(())
    }
}

/// A crop with its surfaces in patch row coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// 0-based `(row, a, b)` origin in the source volume.
    pub origin: (usize, usize, usize),
    pub volume: OctVolume,
    pub truth: SurfaceSet,
    /// 1 where the surface lies inside the row window, stored `K x N_B x N_A`.
    pub mask: Vec<f32>,
    pub injected: Option<DisplacementVector>,
}

/// Crops `v`, `s` (and an optional displacement) at a 0-based origin.
/// Surface positions outside the row window are clipped and masked.
pub fn crop(
    v: &OctVolume,
    s: &SurfaceSet,
    injected: Option<&DisplacementVector>,
    shape: PatchShape,
    origin: (usize, usize, usize),
) -> Result<Patch> {
    shape.check_fits(v)?;
    let (na, nb, nr) = v.shape();
    let (r0, a0, b0) = origin;
    if r0 + shape.rows > nr || a0 + shape.a > na || b0 + shape.b > nb {
        return Err(OctError::Shape(format!("crop at {origin:?} of {shape:?} exceeds volume")));
    }
    if s.n_a() != na || s.n_b() != nb {
        return Err(OctError::Shape("surfaces do not match the volume".into()));
    }
    let volume = OctVolume::from_fn(
        format!("{}@{r0},{a0},{b0}", v.id()),
        shape.a,
        shape.b,
        shape.rows,
        v.spacing(),
        |a, b, r| v.get(a0 + a, b0 + b, r0 + r),
    )?;
    let hi = shape.rows as f64;
    let mut mask = Vec::with_capacity(s.k() * shape.b * shape.a);
    let truth = SurfaceSet::from_fn(s.names().to_vec(), shape.b, shape.a, |k, b, a| {
        let p = s.at(k, b0 + b, a0 + a) - r0 as f64;
        mask.push(if (1.0..=hi).contains(&p) { 1.0 } else { 0.0 });
        p.clamp(1.0, hi)
    })?;
    let injected = injected.map(|d| DisplacementVector::new(d.values()[b0..b0 + shape.b].to_vec())).transpose()?;
    Ok(Patch { origin, volume, truth, mask, injected })
}

/// Start offsets covering `[0, n)` with windows of `size`; the last window
/// is aligned to the end.
pub fn tile_starts(n: usize, size: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..).map(|i| i * size).take_while(|&s| s + size <= n).collect();
    if starts.last().is_none_or(|&s| s + size < n) {
        starts.push(n - size);
    }
    starts
}

/// Deterministic tiling for inference.
pub fn tile_patches(v: &OctVolume, s: &SurfaceSet, shape: PatchShape) -> Result<Vec<Patch>> {
    shape.check_fits(v)?;
    let (na, nb, nr) = v.shape();
    let mut out = Vec::new();
    for &b0 in &tile_starts(nb, shape.b) {
        for &a0 in &tile_starts(na, shape.a) {
            for &r0 in &tile_starts(nr, shape.rows) {
                out.push(crop(v, s, None, shape, (r0, a0, b0))?);
            }
        }
    }
    Ok(out)
}

/// Re-seedable stream of random crops for training.
pub struct PatchSampler<'a> {
    volume: &'a OctVolume,
    truth: &'a SurfaceSet,
    injected: Option<&'a DisplacementVector>,
    shape: PatchShape,
    rng: ChaCha8Rng,
}

impl<'a> PatchSampler<'a> {
    pub fn new(
        volume: &'a OctVolume,
        truth: &'a SurfaceSet,
        injected: Option<&'a DisplacementVector>,
        shape: PatchShape,
        seed: u64,
    ) -> Result<Self> {
        shape.check_fits(volume)?;
        Ok(Self { volume, truth, injected, shape, rng: ChaCha8Rng::seed_from_u64(seed) })
    }
}

impl Iterator for PatchSampler<'_> {
    type Item = Patch;

    fn next(&mut self) -> Option<Patch> {
        let (na, nb, nr) = self.volume.shape();
        let origin = (
            self.rng.random_range(0..=nr - self.shape.rows),
            self.rng.random_range(0..=na - self.shape.a),
            self.rng.random_range(0..=nb - self.shape.b),
        );
        crop(self.volume, self.truth, self.injected, self.shape, origin).ok()
    }
}

/// Classical pre-alignment: for each adjacent pair, the integer row shift in
/// `[-max_shift, max_shift]` that maximises windowed NCC, chained and
/// mean-subtracted. Uses the same sign convention as the network.
pub fn estimate_displacement_ncc(v: &OctVolume, max_shift: usize, window: usize) -> Result<DisplacementVector> {
    let (na, nb, nr) = v.shape();
    if window % 2 == 0 || window > nr || window > na {
        return Err(OctError::Invalid(format!("NCC window {window} must be odd and fit the B-scan")));
    }
    let scan = |b: usize, shift: i64| -> Vec<f64> {
        let mut out = vec![0.0; nr * na];
        for r in 0..nr {
            let src = (r as i64 + shift).clamp(0, nr as i64 - 1) as usize;
            for a in 0..na {
                out[r * na + a] = v.get(a, b, src) as f64;
            }
        }
        out
    };
    let mut d = vec![0.0; nb];
    for b in 0..nb.saturating_sub(1) {
        let reference = scan(b, 0);
        let m = max_shift as i64;
        let best = (-m..=m)
            .map(|s| (s, crate::losses::ops::pair_ncc(&reference, &scan(b + 1, s), nr, na, window)))
            .fold((0, f64::NEG_INFINITY), |acc, (s, c)| if c > acc.1 { (s, c) } else { acc });
        d[b + 1] = d[b] + best.0 as f64;
    }
    Ok(DisplacementVector::new(d)?.centered())
}
