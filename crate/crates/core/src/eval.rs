//! Evaluation metrics, reports, run comparison and plots.

use std::collections::BTreeMap;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{OctError, Result};
use crate::io::{write_bytes_atomic, write_json};
use crate::losses::loss_local_ncc;
use crate::types::{apply_displacement_to_surfaces, DisplacementVector, OctVolume, Spacing, SurfaceSet};

/// Mean and standard deviation in pixels and micrometres.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MadStats {
    pub mean_px: f64,
    pub std_px: f64,
    pub mean_um: f64,
    pub std_um: f64,
}

impl MadStats {
    /// Mean and population standard deviation of `values_px`.
    pub fn from_px(values_px: &[f64], spacing: &Spacing) -> Self {
        if values_px.is_empty() {
            return Self::default();
        }
        let n = values_px.len() as f64;
        let mean = values_px.iter().sum::<f64>() / n;
        let var = values_px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self { mean_px: mean, std_px: std, mean_um: mean * spacing.axial_um, std_um: std * spacing.axial_um }
    }
}

fn check_same(pred: &SurfaceSet, truth: &SurfaceSet) -> Result<()> {
    if !pred.same_shape(truth) {
        return Err(OctError::Shape(format!(
            "surface sets differ: {}x{}x{} vs {}x{}x{}",
            pred.k(),
            pred.n_b(),
            pred.n_a(),
            truth.k(),
            truth.n_b(),
            truth.n_a()
        )));
    }
    Ok(())
}

/// Per-surface mean over `(b, a)` of `|pred - truth|`, in pixels.
pub fn metric_mad_px(pred: &SurfaceSet, truth: &SurfaceSet) -> Result<Vec<f64>> {
    check_same(pred, truth)?;
    Ok((0..pred.k())
        .map(|k| {
            let (p, t) = (pred.surface(k), truth.surface(k));
            p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
        })
        .collect())
}

/// Per-surface MAD of one case; `std` is the spread over `(b, a)`.
pub fn metric_mad(pred: &SurfaceSet, truth: &SurfaceSet, spacing: &Spacing) -> Result<Vec<MadStats>> {
    check_same(pred, truth)?;
    Ok((0..pred.k())
        .map(|k| {
            let errs: Vec<f64> = pred.surface(k).iter().zip(truth.surface(k)).map(|(a, b)| (a - b).abs()).collect();
            MadStats::from_px(&errs, spacing)
        })
        .collect())
}

/// Per-surface mean of `|(r_{b,a} - d_b) - (r_{b+1,a} - d_{b+1})|`.
pub fn metric_alignment_mad(truth: &SurfaceSet, d: &DisplacementVector) -> Result<Vec<f64>> {
    let (nb, na) = (truth.n_b(), truth.n_a());
    if d.len() != nb || nb < 2 {
        return Err(OctError::Shape(format!("need N_B >= 2 and {nb} displacements, got {}", d.len())));
    }
    let dv = d.values();
    Ok((0..truth.k())
        .map(|k| {
            let mut s = 0.0;
            for b in 0..nb - 1 {
                for a in 0..na {
                    s += ((truth.at(k, b, a) - dv[b]) - (truth.at(k, b + 1, a) - dv[b + 1])).abs();
                }
            }
            s / ((nb - 1) * na) as f64
        })
        .collect())
}

/// Mean adjacent-B-scan local NCC after warping by `d` (higher is better).
pub fn metric_ncc_volume(v: &OctVolume, d: &DisplacementVector, window: usize) -> Result<f64> {
    Ok(-loss_local_ncc(v, d, window)?)
}

/// Mean `|(d - mean d) - (ref - mean ref)|`.
pub fn displacement_mad(d: &DisplacementVector, reference: &DisplacementVector) -> Result<f64> {
    if d.len() != reference.len() {
        return Err(OctError::Shape("displacement lengths differ".into()));
    }
    let (a, b) = (d.centered(), reference.centered());
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum::<f64>() / d.len() as f64)
}

/// Mean `|pred[k, b + 1, a] - pred[k, b, a]|` over all surfaces.
pub fn mean_adjacent_difference(pred: &SurfaceSet) -> f64 {
    let (k, nb, na) = (pred.k(), pred.n_b(), pred.n_a());
    let mut s = 0.0;
    for kk in 0..k {
        for b in 0..nb.saturating_sub(1) {
            for a in 0..na {
                s += (pred.at(kk, b + 1, a) - pred.at(kk, b, a)).abs();
            }
        }
    }
    s / (k * nb.saturating_sub(1) * na).max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSpec {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { bins: 61, lo: -15.0, hi: 15.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(spec: HistogramSpec) -> Result<Self> {
        if spec.bins == 0 || !(spec.hi > spec.lo) {
            return Err(OctError::Invalid(format!("bad histogram spec {spec:?}")));
        }
        let w = (spec.hi - spec.lo) / spec.bins as f64;
        Ok(Self { edges: (0..=spec.bins).map(|i| spec.lo + w * i as f64).collect(), counts: vec![0; spec.bins] })
    }

    /// Bin of `x`; values outside the range go to the end bins.
    pub fn bin_of(&self, x: f64) -> usize {
        let bins = self.counts.len();
        let (lo, hi) = (self.edges[0], self.edges[bins]);
        let i = ((x - lo) / (hi - lo) * bins as f64).floor();
        i.clamp(0.0, (bins - 1) as f64) as usize
    }

    pub fn add(&mut self, x: f64) {
        let i = self.bin_of(x);
        self.counts[i] += 1;
    }

    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.edges != other.edges {
            return Err(OctError::Invalid("histogram edges differ".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count of the bin containing zero.
    pub fn central_count(&self) -> u64 {
        self.counts[self.bin_of(0.0)]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s
    }
}

/// Histogram of `pred[k, b + 1, a] - pred[k, b, a]` over all `k, b, a`.
pub fn connectivity_histogram(pred: &SurfaceSet, spec: HistogramSpec) -> Result<Histogram> {
    let mut h = Histogram::new(spec)?;
    for k in 0..pred.k() {
        for b in 0..pred.n_b().saturating_sub(1) {
            for a in 0..pred.n_a() {
                h.add(pred.at(k, b + 1, a) - pred.at(k, b, a));
            }
        }
    }
    Ok(h)
}

/// One surface as an `N_B x N_A` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthField {
    pub name: String,
    pub n_b: usize,
    pub n_a: usize,
    pub values: Vec<f64>,
}

impl DepthField {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for b in 0..self.n_b {
            let row: Vec<String> = self.values[b * self.n_a..(b + 1) * self.n_a].iter().map(|v| format!("{v:.4}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Grey-level image, min-max scaled, one pixel per A-scan and
    /// `scale_b` pixels per B-scan.
    pub fn to_image(&self, scale_b: u32) -> GrayImage {
        let (lo, hi) = self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let range = if hi > lo { hi - lo } else { 1.0 };
        let scale_b = scale_b.max(1);
        GrayImage::from_fn(self.n_a as u32, self.n_b as u32 * scale_b, |x, y| {
            let v = self.values[(y / scale_b) as usize * self.n_a + x as usize];
            Luma([(255.0 * (v - lo) / range).round() as u8])
        })
    }
}

pub fn depth_field_export(pred: &SurfaceSet, k: usize) -> Result<DepthField> {
    if k >= pred.k() {
        return Err(OctError::Invalid(format!("surface index {k} out of range for K = {}", pred.k())));
    }
    Ok(DepthField { name: pred.names()[k].clone(), n_b: pred.n_b(), n_a: pred.n_a(), values: pred.surface(k).to_vec() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub tag: Option<String>,
    pub mad_px: Vec<f64>,
    /// With the predicted displacement.
    pub alignment_mad_px: Vec<f64>,
    /// With `d = 0`.
    pub alignment_mad_unaligned_px: Vec<f64>,
    pub ncc: f64,
    pub ncc_unaligned: f64,
    /// Against the injected displacement, when known.
    pub displacement_mad_px: Option<f64>,
    /// Mean |adjacent B-scan difference| of the aligned prediction.
    pub adjacent_difference_px: f64,
}

/// Inputs for one evaluated case.
pub struct CaseEval<'a> {
    pub id: &'a str,
    pub tag: Option<&'a str>,
    pub volume: &'a OctVolume,
    pub truth: &'a SurfaceSet,
    pub pred: &'a SurfaceSet,
    pub displacement: &'a DisplacementVector,
    pub injected: Option<&'a DisplacementVector>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run: String,
    pub surfaces: Vec<String>,
    pub spacing: Spacing,
    pub cases: Vec<CaseMetrics>,
    /// Per surface, statistics of per-case MADs.
    pub mad: Vec<MadStats>,
    pub overall: MadStats,
    /// Per tag, per surface.
    pub by_tag: BTreeMap<String, Vec<MadStats>>,
    pub alignment_mad_px: Vec<f64>,
    pub alignment_mad_mean_px: f64,
    pub alignment_mad_unaligned_px: Vec<f64>,
    pub ncc_mean: f64,
    pub ncc_unaligned_mean: f64,
    pub displacement_mad_px: Option<f64>,
    pub adjacent_difference_px: f64,
    /// Connectivity of the aligned predictions (`pred - d`).
    pub histogram: Histogram,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn evaluate_case(c: &CaseEval<'_>, window: usize, hist: &mut Histogram) -> Result<CaseMetrics> {
    let zeros = DisplacementVector::zeros(c.truth.n_b());
    let aligned = apply_displacement_to_surfaces(c.pred, c.displacement, None)?;
    hist.merge(&connectivity_histogram(&aligned, HistogramSpec {
        bins: hist.counts.len(),
        lo: hist.edges[0],
        hi: hist.edges[hist.counts.len()],
    })?)?;
    Ok(CaseMetrics {
        id: c.id.to_string(),
        tag: c.tag.map(str::to_string),
        mad_px: metric_mad_px(c.pred, c.truth)?,
        alignment_mad_px: metric_alignment_mad(c.truth, c.displacement)?,
        alignment_mad_unaligned_px: metric_alignment_mad(c.truth, &zeros)?,
        ncc: metric_ncc_volume(c.volume, c.displacement, window)?,
        ncc_unaligned: metric_ncc_volume(c.volume, &zeros, window)?,
        displacement_mad_px: c.injected.map(|inj| displacement_mad(c.displacement, inj)).transpose()?,
        adjacent_difference_px: mean_adjacent_difference(&aligned),
    })
}

pub fn build_report(run: &str, cases: &[CaseEval<'_>], spacing: Spacing, window: usize, hist_spec: HistogramSpec) -> Result<MetricsReport> {
    let first = cases.first().ok_or_else(|| OctError::Invalid("no cases to evaluate".into()))?;
    let surfaces = first.truth.names().to_vec();
    let k = surfaces.len();
    let mut hist = Histogram::new(hist_spec)?;
    let metrics = cases.iter().map(|c| evaluate_case(c, window, &mut hist)).collect::<Result<Vec<_>>>()?;
    if metrics.iter().any(|m| m.mad_px.len() != k) {
        return Err(OctError::Shape("cases have different surface counts".into()));
    }
    let per_surface = |sel: &dyn Fn(&CaseMetrics) -> bool| -> Vec<MadStats> {
        (0..k)
            .map(|s| MadStats::from_px(&metrics.iter().filter(|m| sel(m)).map(|m| m.mad_px[s]).collect::<Vec<_>>(), &spacing))
            .collect()
    };
    let mad = per_surface(&|_| true);
    let all: Vec<f64> = metrics.iter().flat_map(|m| m.mad_px.iter().copied()).collect();
    let mut by_tag = BTreeMap::new();
    for tag in metrics.iter().filter_map(|m| m.tag.clone()) {
        if !by_tag.contains_key(&tag) {
            let stats = per_surface(&|m: &CaseMetrics| m.tag.as_deref() == Some(tag.as_str()));
            by_tag.insert(tag, stats);
        }
    }
    let alignment_mad_px: Vec<f64> = (0..k).map(|s| mean(metrics.iter().map(|m| m.alignment_mad_px[s]))).collect();
    let disp: Vec<f64> = metrics.iter().filter_map(|m| m.displacement_mad_px).collect();
    Ok(MetricsReport {
        run: run.to_string(),
        surfaces,
        spacing,
        mad,
        overall: MadStats::from_px(&all, &spacing),
        by_tag,
        alignment_mad_mean_px: mean(alignment_mad_px.iter().copied()),
        alignment_mad_px,
        alignment_mad_unaligned_px: (0..k).map(|s| mean(metrics.iter().map(|m| m.alignment_mad_unaligned_px[s]))).collect(),
        ncc_mean: mean(metrics.iter().map(|m| m.ncc)),
        ncc_unaligned_mean: mean(metrics.iter().map(|m| m.ncc_unaligned)),
        displacement_mad_px: (!disp.is_empty()).then(|| mean(disp.iter().copied())),
        adjacent_difference_px: mean(metrics.iter().map(|m| m.adjacent_difference_px)),
        histogram: hist,
        cases: metrics,
    })
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Per-case CSV: id, tag, MAD per surface (px), alignment MAD per
    /// surface (px), NCC, displacement MAD.
    pub fn cases_csv(&self) -> String {
        let mut head = vec!["id".to_string(), "tag".to_string()];
        head.extend(self.surfaces.iter().map(|s| format!("mad_px_{s}")));
        head.extend(self.surfaces.iter().map(|s| format!("align_mad_px_{s}")));
        head.extend(["ncc".to_string(), "displacement_mad_px".to_string()]);
        let mut out = head.join(",") + "\n";
        for c in &self.cases {
            let mut row = vec![c.id.clone(), c.tag.clone().unwrap_or_default()];
            row.extend(c.mad_px.iter().map(|v| format!("{v:.6}")));
            row.extend(c.alignment_mad_px.iter().map(|v| format!("{v:.6}")));
            row.push(format!("{:.6}", c.ncc));
            row.push(c.displacement_mad_px.map(|v| format!("{v:.6}")).unwrap_or_default());
            out.push_str(&(row.join(",") + "\n"));
        }
        out
    }

    /// Writes `<stem>.json`, `<stem>_cases.csv` and `<stem>_histogram.csv`.
    pub fn write_all(&self, dir: &Path, stem: &str) -> Result<()> {
        self.write_json(&dir.join(format!("{stem}.json")))?;
        write_bytes_atomic(&dir.join(format!("{stem}_cases.csv")), self.cases_csv().as_bytes())?;
        write_bytes_atomic(&dir.join(format!("{stem}_histogram.csv")), self.histogram.to_csv().as_bytes())
    }
}

/// Method comparison in micrometres: one column per run, one row per
/// surface and tag group (`mean ± std` over cases), then an overall row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn compare_runs(reports: &[MetricsReport]) -> Result<ComparisonTable> {
    let first = reports.first().ok_or_else(|| OctError::Invalid("no reports to compare".into()))?;
    if reports.iter().any(|r| r.surfaces != first.surfaces) {
        return Err(OctError::Invalid("reports use different surfaces".into()));
    }
    let mut groups: Vec<String> = reports.iter().flat_map(|r| r.by_tag.keys().cloned()).collect();
    groups.sort();
    groups.dedup();
    let fmt = |m: &MadStats| format!("{:.2} ± {:.2}", m.mean_um, m.std_um);
    let mut header = vec!["Methods".to_string()];
    header.extend(reports.iter().map(|r| r.run.clone()));
    let mut rows = Vec::new();
    for (k, surface) in first.surfaces.iter().enumerate() {
        if groups.is_empty() {
            let mut row = vec![surface.clone()];
            row.extend(reports.iter().map(|r| fmt(&r.mad[k])));
            rows.push(row);
        }
        for g in &groups {
            let mut row = vec![format!("{surface} ({g})")];
            row.extend(reports.iter().map(|r| r.by_tag.get(g).map(|s| fmt(&s[k])).unwrap_or_else(|| "-".into())));
            rows.push(row);
        }
    }
    let mut overall = vec!["Overall".to_string()];
    overall.extend(reports.iter().map(|r| fmt(&r.overall)));
    rows.push(overall);
    Ok(ComparisonTable { header, rows })
}

impl ComparisonTable {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} |\n", self.header.join(" | "));
        s.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
        for r in &self.rows {
            s.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let quote = |f: &String| if f.contains(',') { format!("\"{f}\"") } else { f.clone() };
        let mut s = self.header.iter().map(quote).collect::<Vec<_>>().join(",") + "\n";
        for r in &self.rows {
            s.push_str(&(r.iter().map(quote).collect::<Vec<_>>().join(",") + "\n"));
        }
        s
    }
}

/// Bar chart of a histogram.
pub fn histogram_image(h: &Histogram, width_per_bin: u32, height: u32) -> RgbImage {
    let bins = h.counts.len() as u32;
    let max = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut img = RgbImage::from_pixel(bins * width_per_bin, height, Rgb([255, 255, 255]));
    let zero = h.bin_of(0.0) as u32;
    for (i, &c) in h.counts.iter().enumerate() {
        let bar = ((c as f64 / max) * (height - 1) as f64).round() as u32;
        let color = if i as u32 == zero { Rgb([200, 60, 40]) } else { Rgb([40, 80, 160]) };
        for x in i as u32 * width_per_bin..(i as u32 + 1) * width_per_bin - 1 {
            for y in height - bar..height {
                img.put_pixel(x, y, color);
            }
        }
    }
    img
}

pub fn save_png<I: Into<image::DynamicImage>>(img: I, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.into()
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| OctError::format(path, e.to_string()))?;
    write_bytes_atomic(path, &bytes)
}
