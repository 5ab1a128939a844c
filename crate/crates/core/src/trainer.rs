//! End-to-end training with ablation modes, plateau learning-rate
//! schedule, CSV logging and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use octsurf_autograd::{Adam, AdamConfig, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_cases, Case, Split};
use crate::error::{OctError, Result};
use crate::io::{read_json, write_json, write_surfaces, write_volume};
use crate::losses::{build_objective, LossTerms, LossWeights};
use crate::model::{checkpoint, AlignSource, Model, ModelConfig, ModelMode, NetworkOutput};
use crate::preprocess::{
    apply_record, crop, estimate_bm, flatten_surfaces, flatten_volume, unflatten_surface, BmConfig, FlattenRecord,
    PatchShape,
};
use crate::types::{DisplacementVector, OctVolume, SurfaceSet};

pub const DEVICE_ENV: &str = "OCTSURF_DEVICE";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Proposed,
    /// Alignment branch and STM disabled (`d = 0`).
    NoAlign,
    /// Displacements loaded from a file; alignment branch disabled.
    PreAlign,
    /// All smoothness weights set to zero.
    NoSmooth,
    /// 3D encoder, STM bypassed.
    #[serde(rename = "full_3d", alias = "full3d")]
    Full3d,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Proposed => "proposed",
            TrainMode::NoAlign => "no_align",
            TrainMode::PreAlign => "pre_align",
            TrainMode::NoSmooth => "no_smooth",
            TrainMode::Full3d => "full_3d",
        }
    }

    /// Whether `L_Align` contributes to the optimised total.
    pub fn trains_alignment(self) -> bool {
        !matches!(self, TrainMode::NoAlign | TrainMode::PreAlign)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlattenConfig {
    pub enabled: bool,
    /// Row the BM is moved to; `R - R/4` when unset.
    pub target_row: Option<usize>,
    pub bm: BmConfig,
}

impl Default for FlattenConfig {
    fn default() -> Self {
        Self { enabled: true, target_row: None, bm: BmConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        let c = AdamConfig::default();
        Self { beta1: c.beta1, beta2: c.beta2, eps: c.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs without improvement before the learning rate is multiplied by
    /// `plateau_factor`.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Relative improvement needed to reset the plateau counter.
    pub plateau_threshold: f64,
    pub batch_size: usize,
    pub patch: PatchShape,
    /// Random patches drawn from each training volume per epoch.
    pub patches_per_volume: usize,
    pub mode: TrainMode,
    pub loss: LossWeights,
    pub model: ModelConfig,
    pub adam: AdamSettings,
    pub flatten: FlattenConfig,
    pub seed: u64,
    /// Dataset manifest.
    pub data: PathBuf,
    /// Run directory for logs and checkpoints.
    pub out_dir: PathBuf,
    /// JSON map `case id -> displacement`, required by `pre_align`.
    pub pre_align_file: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            learning_rate: 1e-3,
            plateau_patience: 10,
            plateau_factor: 0.5,
            plateau_threshold: 1e-4,
            batch_size: 9,
            patch: PatchShape { rows: 320, a: 400, b: 40 },
            patches_per_volume: 1,
            mode: TrainMode::Proposed,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            adam: AdamSettings::default(),
            flatten: FlattenConfig::default(),
            seed: 0,
            data: PathBuf::from("data/manifest.json"),
            out_dir: PathBuf::from("runs/train"),
            pre_align_file: None,
        }
    }
}

impl TrainConfig {
    /// Full-scale profile.
    pub fn full() -> Self {
        Self::default()
    }

    /// CPU profile for the synthetic suite: whole 96 x 128 x 12 volumes,
    /// small model, no flattening (flattening per A-scan would remove the
    /// B-scan misalignment the alignment branch is meant to learn).
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 2,
            patch: PatchShape { rows: 96, a: 128, b: 12 },
            model: ModelConfig::desk(),
            flatten: FlattenConfig { enabled: false, ..FlattenConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patches_per_volume == 0 {
            return Err(OctError::Config("epochs, batch_size and patches_per_volume must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(OctError::Config("learning_rate must be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) || self.plateau_threshold < 0.0 {
            return Err(OctError::Config("plateau_factor must lie in (0, 1) and plateau_threshold be >= 0".into()));
        }
        if self.mode == TrainMode::PreAlign && self.pre_align_file.is_none() {
            return Err(OctError::Config("mode pre_align requires pre_align_file".into()));
        }
        let expect_mode = if self.mode == TrainMode::Full3d { ModelMode::Full3d } else { ModelMode::Hybrid2d3d };
        if self.model.mode != expect_mode {
            return Err(OctError::Config(format!(
                "model.mode {:?} is inconsistent with training mode {}",
                self.model.mode,
                self.mode.name()
            )));
        }
        self.model.validate()?;
        self.loss.validate(self.model.k)?;
        self.model.check_input(self.patch.rows, self.patch.a)?;
        if self.patch.b < 2 {
            return Err(OctError::Config("patch.b must be >= 2".into()));
        }
        Ok(())
    }

    /// Applies the mode switches to the model and loss settings.
    pub fn with_mode(mut self, mode: TrainMode) -> Self {
        self.mode = mode;
        self.model.mode = if mode == TrainMode::Full3d { ModelMode::Full3d } else { ModelMode::Hybrid2d3d };
        if mode == TrainMode::NoSmooth {
            self.loss.lambda = vec![0.0; self.model.k];
        }
        self
    }
}

/// Rejects device requests other than the CPU.
pub fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(dev) if !dev.eq_ignore_ascii_case("cpu") => {
            Err(OctError::Config(format!("{DEVICE_ENV}={dev} is not available; only cpu is supported")))
        }
        _ => Ok(()),
    }
}

/// Reduce-on-plateau schedule on a monitored loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Self { lr, factor, patience, threshold, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Records one epoch's monitored loss and returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if !self.best.is_finite() || loss < self.best - self.threshold * self.best.abs() {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// A volume and its truth in the network's input frame.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub id: String,
    pub tag: Option<String>,
    pub volume: OctVolume,
    pub truth: SurfaceSet,
    pub record: Option<FlattenRecord>,
    pub injected: Option<DisplacementVector>,
}

/// Normalises intensities and optionally flattens volume and truth.
pub fn prepare_case(case: &Case, flatten: &FlattenConfig) -> Result<PreparedCase> {
    let volume = case.volume.normalized();
    let (volume, truth, record) = if flatten.enabled {
        let bm = estimate_bm(&volume, &flatten.bm)?;
        let rows = volume.rows();
        let target = flatten.target_row.unwrap_or(rows - rows / 4);
        let (flat, rec) = flatten_volume(&volume, &bm, target)?;
        let truth = flatten_surfaces(&case.truth, &rec)?;
        (flat, truth, Some(rec))
    } else {
        (volume, case.truth.clone(), None)
    };
    Ok(PreparedCase { id: case.id.clone(), tag: case.tag.clone(), volume, truth, record, injected: case.injected.clone() })
}

pub fn read_displacements(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    read_json(path)
}

pub fn write_displacements(path: &Path, d: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    write_json(path, d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub terms: LossTerms,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub final_lr: f64,
    pub history: Vec<EpochLog>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_DIR: &str = "checkpoint_best";
pub const LAST_DIR: &str = "checkpoint_last";

fn csv_header() -> String {
    let mut cols = vec!["epoch", "lr"];
    cols.extend(LossTerms::COLUMNS);
    cols.push("wall_s");
    cols.join(",")
}

fn csv_row(e: &EpochLog) -> String {
    let mut fields = vec![e.epoch.to_string(), format!("{:e}", e.lr)];
    fields.extend(e.terms.values().iter().map(|v| format!("{v:.8}")));
    fields.push(format!("{:.3}", e.wall_s));
    fields.join(",")
}

fn align_source(cfg: &TrainConfig, pre: Option<&Vec<f64>>, b0: usize, nb: usize) -> AlignSource {
    match cfg.mode {
        TrainMode::NoAlign => AlignSource::Off,
        TrainMode::PreAlign => AlignSource::Fixed(pre.map(|d| d[b0..b0 + nb].to_vec()).unwrap_or_else(|| vec![0.0; nb])),
        _ => AlignSource::Learned,
    }
}

fn dump_batch(dir: &Path, epoch: usize, case: &PreparedCase, patch: &crate::preprocess::Patch, terms: &LossTerms) -> PathBuf {
    let dump = dir.join("nan_dump");
    let _ = write_volume(&dump.join("patch_volume.json"), &patch.volume);
    let _ = write_surfaces(&dump.join("patch_truth.json"), &patch.truth);
    let info = serde_json::json!({
        "epoch": epoch,
        "case": case.id,
        "origin": [patch.origin.0, patch.origin.1, patch.origin.2],
        "terms": terms,
    });
    let _ = write_json(&dump.join("info.json"), &info);
    dump
}

/// Runs training as configured. Writes `config.resolved.json`, the CSV log
/// and best/last checkpoints under `cfg.out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainSummary> {
    let cases = load_cases(&cfg.data, Some(Split::Train))?;
    train_on(cfg, &cases)
}

/// Like [`train`] with already loaded training cases.
pub fn train_on(cfg: &TrainConfig, cases: &[Case]) -> Result<TrainSummary> {
    cfg.validate()?;
    check_device()?;
    if cases.is_empty() {
        return Err(OctError::Config("no training cases".into()));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| OctError::io(&cfg.out_dir, e))?;
    write_json(&cfg.out_dir.join("config.resolved.json"), cfg)?;
    let pre = match (&cfg.mode, &cfg.pre_align_file) {
        (TrainMode::PreAlign, Some(p)) => Some(read_displacements(p)?),
        _ => None,
    };
    let prepared = cases.iter().map(|c| prepare_case(c, &cfg.flatten)).collect::<Result<Vec<_>>>()?;
    for c in &prepared {
        if let Some(map) = &pre {
            let d = map.get(&c.id).ok_or_else(|| OctError::Config(format!("pre-align file has no entry for {}", c.id)))?;
            if d.len() != c.volume.n_b() {
                return Err(OctError::Shape(format!("pre-align displacement for {} has {} entries", c.id, d.len())));
            }
        }
        if c.truth.k() != cfg.model.k {
            return Err(OctError::Config(format!("case {} has {} surfaces, model.k = {}", c.id, c.truth.k(), cfg.model.k)));
        }
    }

    let mut model = Model::<f32>::new(cfg.model.clone())?;
    let mut adam = Adam::new(
        AdamConfig { beta1: cfg.adam.beta1, beta2: cfg.adam.beta2, eps: cfg.adam.eps },
        model.params(),
    );
    let mut sched = PlateauScheduler::new(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let log_path = cfg.out_dir.join(LOG_FILE);
    let mut log = File::create(&log_path).map_err(|e| OctError::io(&log_path, e))?;
    writeln!(log, "{}", csv_header()).map_err(|e| OctError::io(&log_path, e))?;
    drop(log);

    let best_dir = cfg.out_dir.join(BEST_DIR);
    let last_dir = cfg.out_dir.join(LAST_DIR);
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut best_epoch, mut best_loss) = (0, f64::INFINITY);
    let start = Instant::now();
    let align_in_total = cfg.mode.trains_alignment();

    for epoch in 1..=cfg.epochs {
        let lr = sched.lr;
        let mut order: Vec<usize> = (0..prepared.len()).flat_map(|i| std::iter::repeat_n(i, cfg.patches_per_volume)).collect();
        order.shuffle(&mut rng);
        let mut epoch_terms = LossTerms::default();
        let n_items = order.len();
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor<f32>>> = None;
            for &ci in batch {
                let case = &prepared[ci];
                let (na, nb, nr) = case.volume.shape();
                let p = cfg.patch;
                if p.rows > nr || p.a > na || p.b > nb {
                    return Err(OctError::Shape(format!("patch {p:?} larger than case {} ({nr} x {na} x {nb})", case.id)));
                }
                let origin =
                    (rng.random_range(0..=nr - p.rows), rng.random_range(0..=na - p.a), rng.random_range(0..=nb - p.b));
                let patch = crop(&case.volume, &case.truth, case.injected.as_ref(), p, origin)?;
                let align = align_source(cfg, pre.as_ref().and_then(|m| m.get(&case.id)), origin.2, p.b);

                let mut g = Graph::new();
                let bound = model.params().bind(&mut g);
                let input = g.constant(patch.volume.to_network_tensor());
                let fv = model.forward(&mut g, &bound, input, &align)?;
                let obj = build_objective(&mut g, &fv, input, &patch.truth, &patch.mask, &cfg.loss, align_in_total)?;
                if !obj.terms.total.is_finite() {
                    let dump = dump_batch(&cfg.out_dir, epoch, case, &patch, &obj.terms);
                    return Err(OctError::NonFinite(format!(
                        "epoch {epoch}, case {}: loss {:?}; batch dumped to {}",
                        case.id,
                        obj.terms,
                        dump.display()
                    )));
                }
                epoch_terms.accumulate(&obj.terms, 1.0 / n_items as f64);
                let mut grads = g.backward(obj.total);
                let item = bound.collect_grads(model.params(), &mut grads);
                match acc.as_mut() {
                    None => acc = Some(item),
                    Some(a) => a.iter_mut().zip(&item).for_each(|(x, y)| x.add_assign(y)),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam.update(model.params_mut(), &grads, lr);
        }

        let monitored = epoch_terms.total;
        sched.step(monitored);
        let entry = EpochLog { epoch, lr, terms: epoch_terms, wall_s: start.elapsed().as_secs_f64() };
        let mut log = OpenOptions::new().append(true).open(&log_path).map_err(|e| OctError::io(&log_path, e))?;
        writeln!(log, "{}", csv_row(&entry)).map_err(|e| OctError::io(&log_path, e))?;
        log::info!("epoch {epoch} lr {lr:e} total {monitored:.5}");
        let meta = serde_json::json!({ "epoch": epoch, "monitored": monitored, "train_mode": cfg.mode.name() });
        checkpoint::save(&model, &last_dir, meta.clone())?;
        if monitored < best_loss {
            best_loss = monitored;
            best_epoch = epoch;
            checkpoint::save(&model, &best_dir, meta)?;
        }
        history.push(entry);
    }

    Ok(TrainSummary {
        epochs: cfg.epochs,
        best_epoch,
        best_loss,
        final_lr: sched.lr,
        history,
        best_checkpoint: best_dir,
        last_checkpoint: last_dir,
    })
}

/// Predicts one case with the preprocessing used in training; surfaces are
/// mapped back to the frame of `case.volume`.
pub fn predict_case(
    model: &Model<f32>,
    case: &Case,
    mode: TrainMode,
    flatten: &FlattenConfig,
    pre_align: Option<&[f64]>,
) -> Result<(PreparedCase, NetworkOutput, SurfaceSet)> {
    let prepared = prepare_case(case, flatten)?;
    let nb = prepared.volume.n_b();
    let align = match mode {
        TrainMode::NoAlign => AlignSource::Off,
        TrainMode::PreAlign => AlignSource::Fixed(
            pre_align.ok_or_else(|| OctError::Config(format!("no pre-align displacement for {}", case.id)))?.to_vec(),
        ),
        _ => AlignSource::Learned,
    };
    if let AlignSource::Fixed(d) = &align {
        if d.len() != nb {
            return Err(OctError::Shape(format!("pre-align displacement for {} has {} entries", case.id, d.len())));
        }
    }
    let out = model.predict(&prepared.volume, &align)?;
    let original = match &prepared.record {
        Some(rec) => unflatten_surface(&out.surfaces, rec)?,
        None => out.surfaces.clone(),
    };
    Ok((prepared, out, original))
}

/// Undoes flattening on a volume (for visual checks).
pub fn unflatten_volume(v: &OctVolume, rec: &FlattenRecord) -> Result<OctVolume> {
    apply_record(v, rec, -1)
}
