//! Dataset-level prediction, pre-alignment and evaluation shared by the
//! command line and the acceptance suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Case;
use crate::error::{OctError, Result};
use crate::eval::{build_report, CaseEval, HistogramSpec, MetricsReport};
use crate::io::{read_json, read_surfaces, write_json, write_surfaces};
use crate::model::Model;
use crate::preprocess::{estimate_displacement_ncc, flatten_surfaces};
use crate::trainer::{predict_case, prepare_case, FlattenConfig, TrainMode};
use crate::types::DisplacementVector;

pub const PREDICTIONS_FORMAT: &str = "octsurf-predictions-v1";
pub const PREDICTIONS_FILE: &str = "predictions.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEntry {
    pub id: String,
    #[serde(default)]
    pub tag: Option<String>,
    /// Surface header in the frame of the input volume, relative to the index.
    pub surfaces: PathBuf,
    /// Displacement used by the network, in its input frame.
    pub displacement: Vec<f64>,
}

/// Index of a prediction directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionIndex {
    pub format: String,
    pub run: String,
    pub mode: TrainMode,
    pub flatten: FlattenConfig,
    pub cases: Vec<PredictionEntry>,
}

impl PredictionIndex {
    pub fn read(path: &Path) -> Result<Self> {
        let idx: PredictionIndex = read_json(path)?;
        if idx.format != PREDICTIONS_FORMAT {
            return Err(OctError::format(path, format!("expected format {PREDICTIONS_FORMAT}, found {}", idx.format)));
        }
        Ok(idx)
    }
}

/// Integer NCC pre-alignment of every case in the network input frame.
pub fn estimate_pre_alignment(
    cases: &[Case],
    flatten: &FlattenConfig,
    max_shift: usize,
    window: usize,
) -> Result<BTreeMap<String, Vec<f64>>> {
    cases
        .iter()
        .map(|c| {
            let p = prepare_case(c, flatten)?;
            Ok((c.id.clone(), estimate_displacement_ncc(&p.volume, max_shift, window)?.values().to_vec()))
        })
        .collect()
}

/// Predicts every case and writes surfaces plus `predictions.json` to `out_dir`.
pub fn predict_to_dir(
    model: &Model<f32>,
    cases: &[Case],
    run: &str,
    mode: TrainMode,
    flatten: &FlattenConfig,
    pre_align: Option<&BTreeMap<String, Vec<f64>>>,
    out_dir: &Path,
) -> Result<PredictionIndex> {
    let mut entries = Vec::with_capacity(cases.len());
    for c in cases {
        let pre = match pre_align {
            Some(map) => Some(
                map.get(&c.id)
                    .ok_or_else(|| OctError::Config(format!("pre-align file has no entry for {}", c.id)))?
                    .as_slice(),
            ),
            None => None,
        };
        let (_, out, surfaces) = predict_case(model, c, mode, flatten, pre)?;
        let rel = PathBuf::from("surfaces").join(format!("{}.json", c.id));
        write_surfaces(&out_dir.join(&rel), &surfaces)?;
        entries.push(PredictionEntry {
            id: c.id.clone(),
            tag: c.tag.clone(),
            surfaces: rel,
            displacement: out.displacement.values().to_vec(),
        });
    }
    let idx = PredictionIndex {
        format: PREDICTIONS_FORMAT.into(),
        run: run.into(),
        mode,
        flatten: flatten.clone(),
        cases: entries,
    };
    write_json(&out_dir.join(PREDICTIONS_FILE), &idx)?;
    Ok(idx)
}

/// Evaluates a prediction directory against loaded cases in the network
/// input frame (normalised, flattened if the predictions were made that way).
pub fn evaluate_predictions(
    pred_dir: &Path,
    cases: &[Case],
    window: usize,
    hist: HistogramSpec,
    run: Option<&str>,
) -> Result<MetricsReport> {
    let idx = PredictionIndex::read(&pred_dir.join(PREDICTIONS_FILE))?;
    let by_id: BTreeMap<&str, &PredictionEntry> = idx.cases.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut loaded = Vec::with_capacity(cases.len());
    for c in cases {
        let e = by_id.get(c.id.as_str()).ok_or_else(|| OctError::Invalid(format!("no prediction for case {}", c.id)))?;
        let pred = read_surfaces(&pred_dir.join(&e.surfaces))?;
        if !pred.same_shape(&c.truth) {
            return Err(OctError::Shape(format!("prediction for {} does not match its truth", c.id)));
        }
        let prepared = prepare_case(c, &idx.flatten)?;
        // Flattening shifts prediction and truth alike, so surface errors
        // are unchanged; alignment and connectivity need the input frame.
        let pred = match &prepared.record {
            Some(rec) => flatten_surfaces(&pred, rec)?,
            None => pred,
        };
        loaded.push((prepared, pred, DisplacementVector::new(e.displacement.clone())?));
    }
    if loaded.is_empty() {
        return Err(OctError::Invalid("no cases to evaluate".into()));
    }
    let evals: Vec<CaseEval> = loaded
        .iter()
        .zip(cases)
        .map(|((p, pred, d), c)| CaseEval {
            id: &c.id,
            tag: c.tag.as_deref(),
            volume: &p.volume,
            truth: &p.truth,
            pred,
            displacement: d,
            injected: c.injected.as_ref(),
        })
        .collect();
    build_report(run.unwrap_or(&idx.run), &evals, cases[0].volume.spacing(), window, hist)
}
