//! Latent-perturbation channel importance.
//!
//! For a latent `w` and direction `d`, `L_diff = Σ |g(w) − g(w + α·d)|`.
//! Its elementwise absolute gradient with respect to each synthesis conv
//! weight is `G`. Over `M` latents and `N` directions per latent:
//!
//! * `s_mu[c]    = Σ_{p ∈ c} (1/MN) Σ_{i,j} G_ij[p]`
//! * `s_sigma[c] = Σ_{p ∈ c} (1/MN) Σ_{i,j} (G_ij[p] − O_i[p])²`,
//!   with the per-latent offset `O_i = (1/N) Σ_j G_ij`.
//!
//! Channel `c` of the feature map produced by `block.{r}.conv.weight`
//! (shape `[C, C_prev, 3, 3]`) is the slice `weight[c, ..]`. A channel
//! that nothing downstream reads therefore gets an exactly zero gradient
//! and scores zero.

use std::collections::BTreeMap;
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::json;
use crate::latentdir::{sample_direction, DirectionMode, DirectionSet};
use crate::rng;
use crate::synthnet::{
    map_batch, synthesis_forward, BlockNames, ForwardOptions, GeneratorConfig, GeneratorWeights, GraphParams,
    SynthError,
};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("invalid scoring config: {0}")]
    Config(String),
    #[error("direction set has w_dim {actual}, generator expects {expected}")]
    DirectionWidth { expected: usize, actual: usize },
    #[error("PCA scoring requested but the direction set is in RANDOM mode")]
    DirectionMode,
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed score report: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub alpha: f64,
    pub n_directions: usize,
    pub n_latents: usize,
    pub seed: u64,
    pub direction_mode: DirectionMode,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            n_directions: 10,
            n_latents: 100,
            seed: 0,
            direction_mode: DirectionMode::Pca,
        }
    }
}

impl ScoringConfig {
    /// `alpha = 0` is accepted so the degenerate case can be exercised.
    pub fn validate(&self) -> Result<(), ScoreError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(ScoreError::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.n_directions == 0 || self.n_latents == 0 {
            return Err(ScoreError::Config("n_directions and n_latents must be >= 1".into()));
        }
        Ok(())
    }
}

/// Names of the scored weights, one per synthesis block, in block order.
pub fn scored_layers(cfg: &GeneratorConfig) -> Vec<String> {
    cfg.resolutions.iter().map(|&r| BlockNames::new(r).conv_weight).collect()
}

/// Builds `Σ |g(w) − g(w + α·d)|` on `g` from already registered params.
pub fn diff_loss_graph(
    g: &mut Graph,
    p: &GraphParams,
    cfg: &GeneratorConfig,
    w: &[f64],
    d: &[f64],
    alpha: f64,
) -> Result<Var, SynthError> {
    if w.len() != cfg.w_dim || d.len() != cfg.w_dim {
        return Err(SynthError::Dimension {
            what: "perturbation",
            expected: cfg.w_dim,
            actual: vec![w.len(), d.len()],
        });
    }
    let shifted: Vec<f64> = w.iter().zip(d).map(|(w, d)| w + alpha * d).collect();
    let opts = ForwardOptions::default();
    let w0 = g.constant(Tensor::new(vec![1, w.len()], w.to_vec())?);
    let w1 = g.constant(Tensor::new(vec![1, w.len()], shifted)?);
    let a = synthesis_forward(g, p, cfg, w0, &opts)?.image;
    let b = synthesis_forward(g, p, cfg, w1, &opts)?.image;
    let diff = g.sub(a, b)?;
    let abs = g.abs(diff);
    Ok(g.sum(abs))
}

pub fn image_diff_loss(weights: &GeneratorWeights, w: &[f64], d: &[f64], alpha: f64) -> Result<f64, SynthError> {
    let mut g = Graph::new();
    let p = GraphParams::constant(&mut g, weights);
    let loss = diff_loss_graph(&mut g, &p, weights.config(), w, d, alpha)?;
    Ok(g.value(loss).item())
}

/// `|∂L_diff/∂W|` for every scored conv weight, keyed by name.
pub fn perturb_gradients(
    weights: &GeneratorWeights,
    w: &[f64],
    d: &[f64],
    alpha: f64,
) -> Result<BTreeMap<String, Tensor>, SynthError> {
    let cfg = weights.config();
    let layers = scored_layers(cfg);
    let mut g = Graph::new();
    let p = GraphParams::register(&mut g, weights, |n| layers.iter().any(|l| l == n));
    let loss = diff_loss_graph(&mut g, &p, cfg, w, d, alpha)?;
    let mut grads = g.backward(loss)?;
    Ok(layers
        .into_iter()
        .map(|name| {
            let t = grads.take(p.var(&name)).map(f64::abs);
            (name, t)
        })
        .collect())
}

/// The latent and directions used for latent index `i`. Each index owns
/// its own random stream, so draws do not depend on `M` or on scheduling.
pub fn latent_draws(
    weights: &GeneratorWeights,
    ds: &DirectionSet,
    cfg: &ScoringConfig,
    i: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), SynthError> {
    let gc = weights.config();
    let mut r = rng::stream(cfg.seed, rng::ids::SCORER + i as u64);
    let z = Tensor::new(vec![1, gc.z_dim], rng::normal_vec(gc.z_dim, &mut r))?;
    let w = map_batch(weights, &z)?.into_data();
    let dirs = (0..cfg.n_directions).map(|_| sample_direction(ds, &mut r)).collect();
    Ok((w, dirs))
}

/// Per-latent sums: `Σ_j G_j` and `Σ_j (G_j − O)²` for every scored weight.
#[derive(Clone, Debug)]
pub struct LatentPartial {
    abs_sum: Vec<Vec<f64>>,
    sq_dev: Vec<Vec<f64>>,
}

impl LatentPartial {
    /// `grads[j]` holds the gradients for direction `j`, all with the same
    /// layer set, in [`scored_layers`] order.
    pub fn from_directions(grads: &[Vec<Tensor>]) -> Self {
        let n = grads.len() as f64;
        let layers = grads[0].len();
        let mut abs_sum = Vec::with_capacity(layers);
        let mut sq_dev = Vec::with_capacity(layers);
        for l in 0..layers {
            let len = grads[0][l].numel();
            let mut s = vec![0.0; len];
            for g in grads {
                for (a, v) in s.iter_mut().zip(g[l].data()) {
                    *a += v;
                }
            }
            let mut q = vec![0.0; len];
            for g in grads {
                for ((a, v), t) in q.iter_mut().zip(g[l].data()).zip(&s) {
                    let dev = v - t / n;
                    *a += dev * dev;
                }
            }
            abs_sum.push(s);
            sq_dev.push(q);
        }
        Self { abs_sum, sq_dev }
    }
}

/// Running totals over latents; partials must be added in ascending
/// latent order for reproducible sums.
#[derive(Clone, Debug)]
pub struct GradientAccumulator {
    names: Vec<String>,
    channels: Vec<usize>,
    abs_sum: Vec<Vec<f64>>,
    sq_dev: Vec<Vec<f64>>,
    latents: usize,
    n_directions: usize,
}

impl GradientAccumulator {
    pub fn new(weights: &GeneratorWeights, n_directions: usize) -> Self {
        let names = scored_layers(weights.config());
        let channels = names.iter().map(|n| weights.get(n).shape()[0]).collect();
        let sizes: Vec<usize> = names.iter().map(|n| weights.get(n).numel()).collect();
        Self {
            names,
            channels,
            abs_sum: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            sq_dev: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            latents: 0,
            n_directions,
        }
    }

    pub fn add(&mut self, p: &LatentPartial) {
        for (acc, part) in self.abs_sum.iter_mut().zip(&p.abs_sum) {
            acc.iter_mut().zip(part).for_each(|(a, v)| *a += v);
        }
        for (acc, part) in self.sq_dev.iter_mut().zip(&p.sq_dev) {
            acc.iter_mut().zip(part).for_each(|(a, v)| *a += v);
        }
        self.latents += 1;
    }

    pub fn latents(&self) -> usize {
        self.latents
    }

    pub fn finish(self, config: ScoringConfig) -> ScoreReport {
        let scale = 1.0 / (self.latents * self.n_directions) as f64;
        let mut layers = BTreeMap::new();
        for (l, name) in self.names.iter().enumerate() {
            let c = self.channels[l];
            let per = self.abs_sum[l].len() / c;
            let reduce = |v: &[f64]| -> Vec<f64> {
                v.chunks_exact(per)
                    .map(|slice| slice.iter().map(|x| x * scale).sum())
                    .collect()
            };
            layers.insert(
                name.clone(),
                LayerScores {
                    c_in: c,
                    s_mu: reduce(&self.abs_sum[l]),
                    s_sigma: reduce(&self.sq_dev[l]),
                },
            );
        }
        ScoreReport {
            config,
            layers,
            teacher: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    /// Size of the scored channel axis.
    pub c_in: usize,
    pub s_mu: Vec<f64>,
    pub s_sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub config: ScoringConfig,
    pub layers: BTreeMap<String, LayerScores>,
    /// Path of the scored checkpoint, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<String>,
}

impl ScoreReport {
    pub fn to_json(&self) -> String {
        json::to_canonical_string(self, true).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ScoreError> {
        let report: Self = serde_json::from_str(text)?;
        for (name, l) in &report.layers {
            if l.s_mu.len() != l.c_in || l.s_sigma.len() != l.c_in {
                return Err(ScoreError::Config(format!("layer `{name}`: score lengths differ from c_in")));
            }
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScoreError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScoreError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn score_latent(
    weights: &GeneratorWeights,
    ds: &DirectionSet,
    cfg: &ScoringConfig,
    i: usize,
) -> Result<LatentPartial, SynthError> {
    let (w, dirs) = latent_draws(weights, ds, cfg, i)?;
    let layers = scored_layers(weights.config());
    let grads = dirs
        .iter()
        .map(|d| {
            let mut g = perturb_gradients(weights, &w, d, cfg.alpha)?;
            Ok(layers.iter().map(|n| g.remove(n).expect("scored layer")).collect())
        })
        .collect::<Result<Vec<Vec<Tensor>>, SynthError>>()?;
    Ok(LatentPartial::from_directions(&grads))
}

/// Scores every synthesis feature map. With `workers > 1` latents are
/// processed concurrently, but partial sums are merged in ascending latent
/// order, so the report is identical to the serial one.
pub fn accumulate_scores(
    weights: &GeneratorWeights,
    directions: &DirectionSet,
    cfg: &ScoringConfig,
    workers: usize,
) -> Result<ScoreReport, ScoreError> {
    cfg.validate()?;
    let w_dim = weights.config().w_dim;
    if directions.w_dim() != w_dim {
        return Err(ScoreError::DirectionWidth {
            expected: w_dim,
            actual: directions.w_dim(),
        });
    }
    let random;
    let ds = match (cfg.direction_mode, directions.mode()) {
        (DirectionMode::Pca, DirectionMode::Random) => return Err(ScoreError::DirectionMode),
        (DirectionMode::Random, DirectionMode::Pca) => {
            random = DirectionSet::random(directions.w_mean().to_vec());
            &random
        }
        _ => directions,
    };
    let workers = workers.max(1);
    let mut acc = GradientAccumulator::new(weights, cfg.n_directions);
    let mut next = 0;
    while next < cfg.n_latents {
        let end = (next + workers).min(cfg.n_latents);
        let partials: Vec<Result<LatentPartial, SynthError>> = if workers == 1 {
            vec![score_latent(weights, ds, cfg, next)]
        } else {
            thread::scope(|s| {
                let handles: Vec<_> = (next..end)
                    .map(|i| s.spawn(move || score_latent(weights, ds, cfg, i)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("scoring worker panicked"))
                    .collect()
            })
        };
        for p in partials {
            acc.add(&p?);
        }
        next = end;
        if next % 10 == 0 || next == cfg.n_latents {
            log::info!("scored {next}/{} latents", cfg.n_latents);
        }
    }
    Ok(acc.finish(cfg.clone()))
}
