//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use octsurf_autograd::{Graph, Tensor};
use octsurf_core::dataset::{load_cases, make_dataset, Case, Split};
use octsurf_core::eval::{
    compare_runs, connectivity_histogram, depth_field_export, metric_alignment_mad, metric_mad, metric_ncc_volume,
    HistogramSpec, MetricsReport,
};
use octsurf_core::losses::ops::{smooth_l1_value, Reduction};
use octsurf_core::losses::{loss_ce_surface, loss_smooth_align, loss_smooth_surface};
use octsurf_core::model::ops::{soft_argmax_values, stm_values, topology_values};
use octsurf_core::model::{checkpoint, Model, ModelConfig};
use octsurf_core::pipeline::{estimate_pre_alignment, evaluate_predictions, predict_to_dir};
use octsurf_core::synth::PhantomSpec;
use octsurf_core::trainer::{train_on, write_displacements, TrainConfig, TrainMode};
use octsurf_core::types::SurfaceDistribution;
use octsurf_core::{DisplacementVector, OctVolume, Spacing, SurfaceSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, format!("{name}: got {got}, expected {want} (tol {tol:e})"))
}

fn set(k: usize, nb: usize, na: usize, f: impl FnMut(usize, usize, usize) -> f64) -> SurfaceSet {
    SurfaceSet::from_fn(SurfaceSet::default_names(k), nb, na, f).unwrap()
}

fn random_set(k: usize, nb: usize, na: usize, rng: &mut ChaCha8Rng) -> SurfaceSet {
    let mut v = vec![0.0; k * nb * na];
    for b in 0..nb {
        for a in 0..na {
            let mut p = rng.random_range(1.0..30.0);
            for kk in 0..k {
                v[(kk * nb + b) * na + a] = p;
                p += rng.random_range(0.0..10.0);
            }
        }
    }
    SurfaceSet::new(SurfaceSet::default_names(k), nb, na, v).unwrap()
}

fn random_d(nb: usize, rng: &mut ChaCha8Rng) -> DisplacementVector {
    DisplacementVector::new((0..nb).map(|_| rng.random_range(-6.0..6.0)).collect()).unwrap()
}

fn loss_units() -> Outcome {
    const TOL: f64 = 1e-6;
    close("smooth_l1(0.5)", smooth_l1_value(0.5), 0.125, TOL)?;
    close("smooth_l1(-3)", smooth_l1_value(-3.0), 2.5, TOL)?;
    let truth = set(1, 1, 1, |_, _, _| 2.0);
    let q = SurfaceDistribution::new(1, 1, 1, 4, vec![0.0, 0.5, 0.5, 0.0]).unwrap();
    close("ce at q = 0.5", loss_ce_surface(&q, &truth, None, Reduction::Sum).unwrap(), std::f64::consts::LN_2, TOL)?;
    let pair = set(1, 2, 1, |_, b, _| if b == 0 { 10.0 } else { 14.0 });
    let l = loss_smooth_align(&pair, &DisplacementVector::zeros(2), None, Reduction::Sum).unwrap();
    close("alignment smoothness (10, 14, d = 0)", l, 16.0, TOL)?;
    let plane = set(1, 2, 2, |_, b, a| (a + b) as f64);
    close("surface smoothness planar 2x2", loss_smooth_surface(&plane, Reduction::Sum).unwrap()[0], 4.0, TOL)?;
    let topo = topology_values(&Tensor::from_vec(&[1, 3, 1], vec![5.0, 4.0, 3.0]).unwrap()).into_data();
    ensure(topo == vec![5.0, 5.0, 5.0], format!("topology (5,4,3) gave {topo:?}"))?;
    let mut one_hot = Tensor::<f64>::zeros(&[1, 1, 10, 1]);
    one_hot.data_mut()[6] = 1.0;
    close("soft-argmax one-hot", soft_argmax_values(&one_hot).item(), 7.0, TOL)?;
    let uniform = Tensor::<f64>::full(&[1, 1, 512, 1], 1.0 / 512.0);
    close("soft-argmax uniform", soft_argmax_values(&uniform).item(), 256.5, TOL)?;
    Ok("8 unit values within 1e-6".into())
}

fn gradient_checks() -> Outcome {
    use common::gradcases::{CASES, TOL, TRIALS};
    let mut worst = Vec::new();
    for (name, case) in CASES {
        let errs: Vec<f64> = (0..TRIALS).map(case).collect();
        let max = errs.iter().copied().fold(0.0, f64::max);
        ensure(max < TOL, format!("{name}: max relative error {max:e} over {TRIALS} trials"))?;
        worst.push(format!("{name} {max:.1e}"));
    }
    Ok(format!("{} ops x {TRIALS} trials, worst: {}", CASES.len(), worst.join(", ")))
}

fn invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (k, nb, na) = (rng.random_range(1..4), rng.random_range(2..9), rng.random_range(1..7));
        let s = random_set(k, nb, na, &mut rng);
        let d = random_d(nb, &mut rng);
        let c = rng.random_range(-50.0..50.0);
        let dc = DisplacementVector::new(d.values().iter().map(|v| v + c).collect()).unwrap();
        for red in [Reduction::Mean, Reduction::Sum] {
            let (a, b) = (loss_smooth_align(&s, &d, None, red).unwrap(), loss_smooth_align(&s, &dc, None, red).unwrap());
            ensure((a - b).abs() <= 1e-9, format!("alignment smoothness changed by {:e}", (a - b).abs()))?;
        }
        let (ma, mb) = (metric_alignment_mad(&s, &d).unwrap(), metric_alignment_mad(&s, &dc).unwrap());
        for (x, y) in ma.iter().zip(&mb) {
            ensure((x - y).abs() <= 1e-9, format!("alignment MAD changed by {:e}", (x - y).abs()))?;
        }
        let moved = SurfaceSet::from_fn(s.names().to_vec(), nb, na, |kk, b, a| s.at(kk, b, a) + c).unwrap();
        let (ea, eb) = (loss_smooth_surface(&s, Reduction::Mean).unwrap(), loss_smooth_surface(&moved, Reduction::Mean).unwrap());
        for (x, y) in ea.iter().zip(&eb) {
            ensure((x - y).abs() <= 1e-9, format!("surface smoothness changed by {:e}", (x - y).abs()))?;
        }
        let x = Tensor::<f64>::from_fn(&[nb, 2, 9, na], |_| rng.random_range(-1.0..1.0));
        ensure(stm_values(&x, &vec![0.0; nb]).data() == x.data(), "zero-displacement warp is not the identity")?;
    }
    for seed in 0..4 {
        let cfg = ModelConfig { base_channels: 2, levels: 3, seed, ..ModelConfig::desk() };
        let model = Model::<f32>::new(cfg).unwrap();
        let (nb, r, w) = (5, 16, 8);
        let x = Tensor::<f32>::from_fn(&[nb, 1, r, w], |_| rng.random_range(0.0..1.0));
        let mut perm: Vec<usize> = (0..nb).collect();
        for i in (1..nb).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let slab = r * w;
        let xp = Tensor::from_fn(&[nb, 1, r, w], |i| x.data()[perm[i / slab] * slab + i % slab]);
        let feats = |input: Tensor<f32>| {
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g);
            let v = g.constant(input);
            let out = model.encode(&mut g, &bound, v);
            out.iter().map(|&f| g.value(f).clone()).collect::<Vec<_>>()
        };
        for (ta, tb) in feats(x).iter().zip(&feats(xp)) {
            let per = ta.len() / nb;
            for b in 0..nb {
                ensure(
                    tb.data()[b * per..(b + 1) * per] == ta.data()[perm[b] * per..(perm[b] + 1) * per],
                    "encoder features are not permuted with the B-scans",
                )?;
            }
        }
    }
    Ok("200 random trials within 1e-9; encoder equivariance and warp identity exact".into())
}

/// Shared synthetic runs for criteria 4 to 6.
struct Suite {
    root: PathBuf,
    spec: PhantomSpec,
    train: Vec<Case>,
    test: Vec<Case>,
    reports: BTreeMap<&'static str, MetricsReport>,
    epochs: BTreeMap<&'static str, usize>,
}

impl Suite {
    fn new(root: &Path) -> Self {
        let _ = std::fs::remove_dir_all(root);
        let spec = PhantomSpec { seed: 7, ..PhantomSpec::default() };
        let data = root.join("data");
        make_dataset(&spec, 32, 8, &data).expect("dataset");
        let manifest = data.join("manifest.json");
        let train = load_cases(&manifest, Some(Split::Train)).expect("train cases");
        let test = load_cases(&manifest, Some(Split::Test)).expect("test cases");
        Self { root: root.to_path_buf(), spec, train, test, reports: BTreeMap::new(), epochs: BTreeMap::new() }
    }

    fn run(&mut self, mode: TrainMode) -> Result<&MetricsReport, String> {
        if !self.reports.contains_key(mode.name()) {
            let t = Instant::now();
            let dir = self.root.join(mode.name());
            let mut cfg = TrainConfig::desk().with_mode(mode);
            cfg.out_dir = dir.clone();
            let pre = if mode == TrainMode::PreAlign {
                let all: Vec<Case> = self.train.iter().chain(&self.test).cloned().collect();
                let map = estimate_pre_alignment(&all, &cfg.flatten, 8, 9).map_err(|e| e.to_string())?;
                let path = dir.join("pre_align.json");
                write_displacements(&path, &map).map_err(|e| e.to_string())?;
                cfg.pre_align_file = Some(path);
                Some(map)
            } else {
                None
            };
            let summary = train_on(&cfg, &self.train).map_err(|e| format!("{}: {e}", mode.name()))?;
            ensure(summary.history.len() == cfg.epochs, format!("{} stopped early", mode.name()))?;
            let model = checkpoint::load::<f32>(&summary.last_checkpoint, Some(&cfg.model)).map_err(|e| e.to_string())?;
            let pred = dir.join("pred");
            predict_to_dir(&model, &self.test, mode.name(), mode, &cfg.flatten, pre.as_ref(), &pred)
                .map_err(|e| e.to_string())?;
            let report = evaluate_predictions(&pred, &self.test, cfg.loss.ncc_window, HistogramSpec::default(), None)
                .map_err(|e| e.to_string())?;
            report.write_all(&dir, "metrics").map_err(|e| e.to_string())?;
            println!(
                "  run {:<10} {} epochs in {:6.1} s: MAD {:?} px, displacement MAD {:?} px",
                mode.name(),
                summary.history.len(),
                t.elapsed().as_secs_f64(),
                report.mad.iter().map(|m| (m.mean_px * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                report.displacement_mad_px.map(|v| (v * 1000.0).round() / 1000.0),
            );
            self.epochs.insert(mode.name(), summary.history.len());
            self.reports.insert(mode.name(), report);
        }
        Ok(&self.reports[mode.name()])
    }
}

fn synthetic_end_to_end(suite: &mut Suite) -> Outcome {
    let s = &suite.spec;
    ensure(
        s.shape == [128, 12, 96] && s.k == 3 && s.shift_range <= 6.0 && s.noise_sigma == 0.05,
        "dataset does not match the prescribed phantom settings",
    )?;
    ensure(suite.train.len() == 32 && suite.test.len() == 8, "expected 32 train / 8 test cases")?;
    ensure(TrainConfig::desk().epochs <= 30, "desk profile trains more than 30 epochs")?;
    let t = Instant::now();
    let r = suite.run(TrainMode::Proposed)?.clone();
    let mads: Vec<f64> = r.mad.iter().map(|m| m.mean_px).collect();
    let disp = r.displacement_mad_px.ok_or("no displacement MAD")?;
    let detail = format!(
        "surface MAD {:.3}/{:.3}/{:.3} px (<= 1.5), displacement MAD {disp:.3} px (<= 1.0), {:.0} s",
        mads[0],
        mads[1],
        mads[2],
        t.elapsed().as_secs_f64()
    );
    ensure(mads.iter().all(|&m| m <= 1.5), detail.clone())?;
    ensure(disp <= 1.0, detail.clone())?;
    Ok(detail)
}

fn smoothness_ablation(suite: &mut Suite) -> Outcome {
    let with = suite.run(TrainMode::Proposed)?.clone();
    let without = suite.run(TrainMode::NoSmooth)?.clone();
    let detail = format!(
        "adjacent difference {:.4} vs {:.4} px, central bin {} vs {}",
        with.adjacent_difference_px,
        without.adjacent_difference_px,
        with.histogram.central_count(),
        without.histogram.central_count()
    );
    ensure(with.adjacent_difference_px <= without.adjacent_difference_px, detail.clone())?;
    ensure(with.histogram.central_count() >= without.histogram.central_count(), detail.clone())?;
    Ok(detail)
}

fn ablation_parity(suite: &mut Suite) -> Outcome {
    let order = [TrainMode::Proposed, TrainMode::NoAlign, TrainMode::PreAlign, TrainMode::NoSmooth, TrainMode::Full3d];
    let mut reports = Vec::new();
    for m in order {
        reports.push(suite.run(m)?.clone());
    }
    let table = compare_runs(&reports).map_err(|e| e.to_string())?;
    std::fs::write(suite.root.join("comparison.md"), table.to_markdown()).map_err(|e| e.to_string())?;
    let mut header = vec!["Methods".to_string()];
    header.extend(order.iter().map(|m| m.name().to_string()));
    ensure(table.header == header, format!("unexpected header {:?}", table.header))?;
    let groups = reports[0].by_tag.len().max(1);
    ensure(table.rows.len() == 3 * groups + 1, format!("expected {} rows, got {}", 3 * groups + 1, table.rows.len()))?;
    ensure(table.rows.last().map(|r| r[0].as_str()) == Some("Overall"), "last row is not Overall")?;
    ensure(table.rows.iter().all(|r| r.len() == header.len()), "ragged table")?;
    print!("{}", table.to_markdown().lines().map(|l| format!("  {l}\n")).collect::<String>());
    Ok(format!("{} modes trained to completion; table {} x {}", order.len(), table.rows.len(), header.len()))
}

fn metric_conformance() -> Outcome {
    let spacing = Spacing::default();
    let t = set(3, 4, 5, |k, b, a| 10.0 + 7.0 * k as f64 + 0.3 * (a * b) as f64);
    let zero = metric_mad(&t, &t, &spacing).unwrap();
    ensure(zero.iter().all(|m| m.mean_px == 0.0), "MAD of identical surfaces is not 0")?;
    let shifted = set(3, 4, 5, |k, b, a| t.at(k, b, a) + 1.0);
    let one = metric_mad(&shifted, &t, &spacing).unwrap();
    for m in &one {
        close("MAD of 1 px offset", m.mean_px, 1.0, 1e-12)?;
        close("MAD of 1 px offset in um", m.mean_um, 3.24, 1e-12)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (k, nb, na) = (rng.random_range(1..4), rng.random_range(2..7), rng.random_range(1..7));
        let (p, q) = (random_set(k, nb, na, &mut rng), random_set(k, nb, na, &mut rng));
        let d = random_d(nb, &mut rng);
        let mad = metric_mad(&p, &q, &spacing).unwrap();
        let amad = metric_alignment_mad(&q, &d).unwrap();
        for kk in 0..k {
            let (mut s, mut sa) = (0.0, 0.0);
            for b in 0..nb {
                for a in 0..na {
                    s += (p.at(kk, b, a) - q.at(kk, b, a)).abs();
                    if b + 1 < nb {
                        let dv = d.values();
                        sa += ((q.at(kk, b, a) - dv[b]) - (q.at(kk, b + 1, a) - dv[b + 1])).abs();
                    }
                }
            }
            close("MAD vs loop", mad[kk].mean_px, s / (nb * na) as f64, 1e-9)?;
            close("alignment MAD vs loop", amad[kk], sa / ((nb - 1) * na) as f64, 1e-9)?;
        }
        let h = connectivity_histogram(&p, HistogramSpec::default()).unwrap();
        let mut counts = vec![0u64; 61];
        for kk in 0..k {
            for b in 0..nb - 1 {
                for a in 0..na {
                    let x = p.at(kk, b + 1, a) - p.at(kk, b, a);
                    let i = (((x + 15.0) / 30.0 * 61.0).floor()).clamp(0.0, 60.0) as usize;
                    counts[i] += 1;
                }
            }
        }
        ensure(h.counts == counts, "histogram differs from loop oracle")?;
        let field = depth_field_export(&p, k - 1).unwrap();
        ensure(field.values == p.surface(k - 1) && (field.n_b, field.n_a) == (nb, na), "depth field mismatch")?;
    }
    let flat = set(1, 3, 4, |_, _, _| 5.0);
    close("alignment MAD flat", metric_alignment_mad(&flat, &DisplacementVector::zeros(3)).unwrap()[0], 0.0, 0.0)?;
    let tilt = set(1, 3, 4, |_, b, _| b as f64);
    close("alignment MAD tilt", metric_alignment_mad(&tilt, &DisplacementVector::zeros(3)).unwrap()[0], 1.0, 1e-12)?;
    let h = connectivity_histogram(&tilt, HistogramSpec::default()).unwrap();
    ensure(h.counts[h.bin_of(1.0)] == 8 && h.total() == 8, "tilt histogram not concentrated at 1")?;
    let h = connectivity_histogram(&flat, HistogramSpec::default()).unwrap();
    ensure(h.central_count() == h.total(), "flat histogram not concentrated at 0")?;
    let same = OctVolume::from_fn("v", 12, 3, 12, spacing, |a, _, r| ((a * 7 + r * 3) % 5) as f32).unwrap();
    close("NCC of identical B-scans", metric_ncc_volume(&same, &DisplacementVector::zeros(3), 9).unwrap(), 1.0, 1e-4)?;
    let constant = OctVolume::from_fn("c", 12, 3, 12, spacing, |_, _, _| 0.5).unwrap();
    close("NCC of constant patches", metric_ncc_volume(&constant, &DisplacementVector::zeros(3), 9).unwrap(), 0.0, 1e-9)?;
    Ok("MAD, alignment MAD, NCC, histogram and depth field match their oracles".into())
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut suite: Option<Suite> = None;
    let mut failed = 0;
    let mut report = |n: usize, title: &str, f: &mut dyn FnMut(&mut Option<Suite>) -> Outcome, suite: &mut Option<Suite>| {
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(|| f(suite))).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("criterion {n} ({title}): PASS [{secs:.1} s] {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({title}): FAIL [{secs:.1} s] {d}");
            }
        }
    };
    report(1, "loss unit values", &mut |_| loss_units(), &mut suite);
    report(2, "gradient checks", &mut |_| gradient_checks(), &mut suite);
    report(3, "invariance suite", &mut |_| invariance(), &mut suite);
    report(4, "synthetic end-to-end", &mut |s| synthetic_end_to_end(s.get_or_insert_with(|| Suite::new(&root))), &mut suite);
    report(5, "smoothness ablation", &mut |s| smoothness_ablation(s.get_or_insert_with(|| Suite::new(&root))), &mut suite);
    report(6, "ablation harness parity", &mut |s| ablation_parity(s.get_or_insert_with(|| Suite::new(&root))), &mut suite);
    report(7, "metric-definition conformance", &mut |_| metric_conformance(), &mut suite);
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
