//! Pruning plans and channel surgery.
//!
//! A plan lists, for every synthesis feature map `block.{r}`, the channel
//! indices to keep. The kept set of a map slices every tensor whose shape
//! depends on it:
//!
//! | tensor                          | axis |
//! |---------------------------------|------|
//! | `block.{r}.conv.weight`, `.bias`| 0    |
//! | `block.{r}.torgb_affine.*`      | 0    |
//! | `block.{r}.torgb.weight`        | 1    |
//! | next block `affine.*`           | 0    |
//! | next block `conv.weight`        | 1    |
//!
//! The first map also slices the learned constant and the first block's
//! style affine and conv input axis.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::json;
use crate::rng;
use crate::scorer::ScoreReport;
use crate::synthnet::{BlockNames, GeneratorConfig, GeneratorWeights, SynthError, CONST};

/// Absorbs representation error in `(1 − p_r)·C`, e.g. `0.3·10`.
const KEEP_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PruneMode {
    #[serde(rename = "S_SIGMA")]
    SSigma,
    #[serde(rename = "S_MU")]
    SMu,
    #[serde(rename = "RANDOM")]
    Random,
}

impl PruneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneMode::SSigma => "S_SIGMA",
            PruneMode::SMu => "S_MU",
            PruneMode::Random => "RANDOM",
        }
    }
}

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error("pruning ratio must lie in (0, 1), got {0}")]
    Ratio(f64),
    #[error("score layer `{0}` is not a synthesis conv weight")]
    UnknownLayer(String),
    #[error("feature map `{map}` would keep no channels")]
    EmptyMap { map: String },
    #[error("invalid plan:\n  {}", .0.join("\n  "))]
    InvalidPlan(Vec<String>),
    #[error("cannot slice `{tensor}` along axis {axis}: {reason}")]
    Slice { tensor: String, axis: usize, reason: String },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed plan: {0}")]
    Json(#[from] serde_json::Error),
}

/// Feature map name for the block at resolution `r`.
pub fn feature_map(resolution: usize) -> String {
    format!("block.{resolution}")
}

pub fn feature_maps(cfg: &GeneratorConfig) -> Vec<String> {
    cfg.resolutions.iter().map(|&r| feature_map(r)).collect()
}

/// One axis of one tensor sliced by one feature map's kept set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceSpec {
    pub tensor: String,
    pub axis: usize,
    pub map: String,
}

/// Every tensor axis whose size follows a feature map.
pub fn slice_specs(cfg: &GeneratorConfig) -> Vec<SliceSpec> {
    let mut out = Vec::new();
    let mut push = |tensor: &str, axis, map: &str| {
        out.push(SliceSpec {
            tensor: tensor.to_owned(),
            axis,
            map: map.to_owned(),
        })
    };
    let res = &cfg.resolutions;
    for (i, &r) in res.iter().enumerate() {
        let map = feature_map(r);
        let own = BlockNames::new(r);
        push(&own.conv_weight, 0, &map);
        push(&own.conv_bias, 0, &map);
        push(&own.torgb_affine_weight, 0, &map);
        push(&own.torgb_affine_bias, 0, &map);
        push(&own.torgb_weight, 1, &map);
        // The block reading this map: the next block, or for the first map
        // also the first block itself through the constant input.
        let mut readers = Vec::new();
        if i == 0 {
            push(CONST, 0, &map);
            readers.push(own.clone());
        }
        if let Some(&next) = res.get(i + 1) {
            readers.push(BlockNames::new(next));
        }
        for n in readers {
            push(&n.affine_weight, 0, &map);
            push(&n.affine_bias, 0, &map);
            push(&n.conv_weight, 1, &map);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub p_r: f64,
    pub mode: PruneMode,
    pub seed: u64,
    /// Kept channel indices per feature map, strictly increasing.
    pub kept: BTreeMap<String, Vec<usize>>,
}

impl PruningPlan {
    /// Plan that keeps every channel of `cfg`.
    pub fn keep_all(cfg: &GeneratorConfig) -> Self {
        let kept = cfg
            .resolutions
            .iter()
            .zip(&cfg.channels_per_resolution)
            .map(|(&r, &c)| (feature_map(r), (0..c).collect()))
            .collect();
        Self {
            p_r: 0.0,
            mode: PruneMode::SSigma,
            seed: 0,
            kept,
        }
    }

    pub fn to_json(&self) -> String {
        json::to_canonical_string(self, true).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SurgeryError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SurgeryError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SurgeryError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Number of channels kept out of `c` at ratio `p_r`: `ceil((1 − p_r)·c)`.
pub fn kept_count(c: usize, p_r: f64) -> usize {
    ((1.0 - p_r) * c as f64 - KEEP_EPS).ceil().max(0.0) as usize
}

/// Top channels by score; ties keep the lower index. Returned ascending.
pub fn top_channels(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

/// Resolution encoded in a scored layer name `block.{r}.conv.weight`.
fn layer_resolution(name: &str) -> Option<usize> {
    name.strip_prefix("block.")?.strip_suffix(".conv.weight")?.parse().ok()
}

pub fn build_plan(report: &ScoreReport, p_r: f64, mode: PruneMode, seed: u64) -> Result<PruningPlan, SurgeryError> {
    if !(p_r > 0.0 && p_r < 1.0) {
        return Err(SurgeryError::Ratio(p_r));
    }
    let mut layers: Vec<(usize, &str)> = Vec::new();
    for name in report.layers.keys() {
        let r = layer_resolution(name).ok_or_else(|| SurgeryError::UnknownLayer(name.clone()))?;
        layers.push((r, name));
    }
    // Block order, so random draws do not depend on map-name sorting.
    layers.sort();
    let mut rng = rng::stream(seed, rng::ids::PLAN);
    let mut kept = BTreeMap::new();
    for (r, name) in layers {
        let l = &report.layers[name];
        let keep = kept_count(l.c_in, p_r);
        let map = feature_map(r);
        if keep == 0 {
            return Err(SurgeryError::EmptyMap { map });
        }
        let chosen = match mode {
            PruneMode::SSigma => top_channels(&l.s_sigma, keep),
            PruneMode::SMu => top_channels(&l.s_mu, keep),
            PruneMode::Random => {
                let mut v = index::sample(&mut rng, l.c_in, keep).into_vec();
                v.sort_unstable();
                v
            }
        };
        kept.insert(map, chosen);
    }
    Ok(PruningPlan { p_r, mode, seed, kept })
}

/// Every way `plan` fails to fit `cfg`, one line each.
pub fn verify_plan(plan: &PruningPlan, cfg: &GeneratorConfig) -> Vec<String> {
    let mut out = Vec::new();
    if !(0.0..1.0).contains(&plan.p_r) {
        out.push(format!("p_r {} outside [0, 1)", plan.p_r));
    }
    let maps = feature_maps(cfg);
    for name in plan.kept.keys() {
        if !maps.contains(name) {
            out.push(format!("`{name}` is not a feature map of this generator"));
        }
    }
    for (map, &c) in maps.iter().zip(&cfg.channels_per_resolution) {
        let Some(kept) = plan.kept.get(map) else {
            out.push(format!("`{map}` has no kept list"));
            continue;
        };
        if kept.is_empty() {
            out.push(format!("`{map}` keeps no channels"));
            continue;
        }
        if kept.windows(2).any(|p| p[0] == p[1]) {
            out.push(format!("`{map}` lists a channel more than once"));
        } else if kept.windows(2).any(|p| p[0] > p[1]) {
            out.push(format!("`{map}` kept list is not increasing"));
        }
        if let Some(bad) = kept.iter().find(|&&i| i >= c) {
            out.push(format!("`{map}` keeps channel {bad} but has only {c}"));
        }
    }
    out
}

/// Gathers channels per feature map in the given order (not necessarily
/// sorted, so permutations are allowed) and returns the resized generator.
pub fn reindex_channels(
    teacher: &GeneratorWeights,
    indices: &BTreeMap<String, Vec<usize>>,
) -> Result<GeneratorWeights, SurgeryError> {
    let cfg = teacher.config();
    let mut student_cfg = cfg.clone();
    for (i, map) in feature_maps(cfg).iter().enumerate() {
        let idx = indices.get(map).ok_or_else(|| SurgeryError::InvalidPlan(vec![format!("`{map}` missing")]))?;
        student_cfg.channels_per_resolution[i] = idx.len();
    }
    let mut tensors: BTreeMap<String, _> = teacher.iter().map(|(n, t)| (n, t.clone())).collect();
    for spec in slice_specs(cfg) {
        let t = tensors.get_mut(&spec.tensor).expect("spec names a generator tensor");
        *t = t
            .select(spec.axis, &indices[&spec.map])
            .map_err(|e| SurgeryError::Slice {
                tensor: spec.tensor.clone(),
                axis: spec.axis,
                reason: e.to_string(),
            })?;
    }
    Ok(GeneratorWeights::from_tensors(student_cfg, tensors)?)
}

/// Student generator holding exact slices of the teacher.
pub fn apply_plan(
    teacher: &GeneratorWeights,
    plan: &PruningPlan,
) -> Result<(GeneratorWeights, GeneratorConfig), SurgeryError> {
    let violations = verify_plan(plan, teacher.config());
    if !violations.is_empty() {
        return Err(SurgeryError::InvalidPlan(violations));
    }
    let student = reindex_channels(teacher, &plan.kept)?;
    let cfg = student.config().clone();
    Ok((student, cfg))
}
