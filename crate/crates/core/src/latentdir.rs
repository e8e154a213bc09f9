//! Perturbation directions in `W`.
//!
//! Principal components of sampled `w = f(z)` form the direction set; a
//! direction is drawn with probability equal to its variance ratio. The
//! random fallback returns raw `N(0, I)` vectors, left unnormalised.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::rng;
use crate::synthnet::{decode_container, encode_container, map_batch, CheckpointError, GeneratorWeights, SynthError};
use crate::tensor::{kernels, Tensor, TensorError};

/// Default number of latents sampled for the `W` statistics.
pub const DEFAULT_SAMPLES: usize = 10_000;

/// Default number of retained components, `min(32, w_dim)`.
pub fn default_components(w_dim: usize) -> usize {
    w_dim.min(32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionMode {
    #[serde(rename = "PCA")]
    Pca,
    #[serde(rename = "RANDOM")]
    Random,
}

impl DirectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DirectionMode::Pca => "PCA",
            DirectionMode::Random => "RANDOM",
        }
    }
}

#[derive(Debug, Error)]
pub enum LatentDirError {
    #[error("need more than w_dim = {w_dim} samples, got {k}")]
    TooFewSamples { k: usize, w_dim: usize },
    #[error("cannot retain {requested} components from {available}")]
    TooManyComponents { requested: usize, available: usize },
    #[error("covariance has only {attainable} positive eigenvalues; choose V <= {attainable} (requested {requested})")]
    RankDeficient { requested: usize, attainable: usize },
    #[error("invalid direction set: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Container(#[from] CheckpointError),
}

/// Immutable direction set. In PCA mode `directions` is `[V, w_dim]` with
/// orthonormal rows and `variance_ratios` sums to one; in RANDOM mode both
/// are absent and only `w_mean` is carried.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    directions: Option<Tensor>,
    variance_ratios: Vec<f64>,
    w_mean: Vec<f64>,
    mode: DirectionMode,
}

impl DirectionSet {
    pub fn random(w_mean: Vec<f64>) -> Self {
        Self {
            directions: None,
            variance_ratios: Vec::new(),
            w_mean,
            mode: DirectionMode::Random,
        }
    }

    /// Builds a PCA-mode set, checking the unit-norm, orthogonality and
    /// ordering invariants.
    pub fn from_pca(directions: Tensor, variance_ratios: Vec<f64>, w_mean: Vec<f64>) -> Result<Self, LatentDirError> {
        let invalid = |m: String| Err(LatentDirError::Invalid(m));
        let [v, d] = directions.shape() else {
            return invalid(format!("directions must be 2-D, got {:?}", directions.shape()));
        };
        let (v, d) = (*v, *d);
        if d != w_mean.len() {
            return invalid(format!("directions have width {d} but w_mean has {}", w_mean.len()));
        }
        if variance_ratios.len() != v {
            return invalid(format!("{} variance ratios for {v} directions", variance_ratios.len()));
        }
        if variance_ratios.iter().any(|&r| !(r >= 0.0)) {
            return invalid("variance ratios must be non-negative".into());
        }
        if variance_ratios.windows(2).any(|p| p[1] > p[0]) {
            return invalid("variance ratios must be non-increasing".into());
        }
        let total: f64 = variance_ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("variance ratios sum to {total}"));
        }
        let rows = directions.data();
        for a in 0..v {
            for b in a..v {
                let dot: f64 = (0..d).map(|k| rows[a * d + k] * rows[b * d + k]).sum();
                let (target, tol) = if a == b { (1.0, 1e-9) } else { (0.0, 1e-8) };
                if (dot - target).abs() > tol {
                    return invalid(format!("rows {a} and {b} have inner product {dot}"));
                }
            }
        }
        Ok(Self {
            directions: Some(directions),
            variance_ratios,
            w_mean,
            mode: DirectionMode::Pca,
        })
    }

    pub fn mode(&self) -> DirectionMode {
        self.mode
    }

    pub fn w_dim(&self) -> usize {
        self.w_mean.len()
    }

    pub fn w_mean(&self) -> &[f64] {
        &self.w_mean
    }

    /// `[V, w_dim]` directions; `None` in RANDOM mode.
    pub fn directions(&self) -> Option<&Tensor> {
        self.directions.as_ref()
    }

    pub fn direction(&self, i: usize) -> Option<&[f64]> {
        let d = self.w_dim();
        self.directions.as_ref().map(|t| &t.data()[i * d..(i + 1) * d])
    }

    pub fn variance_ratios(&self) -> &[f64] {
        &self.variance_ratios
    }

    pub fn len(&self) -> usize {
        self.variance_ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variance_ratios.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut fields = Map::new();
        fields.insert("mode".into(), Value::String(self.mode.as_str().into()));
        let mean = Tensor::new(vec![self.w_dim()], self.w_mean.clone()).expect("w_dim > 0");
        match &self.directions {
            Some(dirs) => {
                let ratios = Tensor::new(vec![self.len()], self.variance_ratios.clone()).expect("V > 0");
                encode_container(
                    &fields,
                    [("directions", dirs), ("variance_ratios", &ratios), ("w_mean", &mean)],
                )
            }
            None => encode_container(&fields, [("w_mean", &mean)]),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LatentDirError> {
        let c = decode_container(bytes)?;
        let mode: DirectionMode = serde_json::from_value(c.field("mode")?.clone())
            .map_err(|e| LatentDirError::Invalid(format!("mode: {e}")))?;
        let mut tensors = c.into_map();
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| LatentDirError::Invalid(format!("missing tensor `{name}`")))
        };
        let w_mean = take("w_mean")?.into_data();
        match mode {
            DirectionMode::Random => Ok(Self::random(w_mean)),
            DirectionMode::Pca => {
                let dirs = take("directions")?;
                let ratios = take("variance_ratios")?.into_data();
                Self::from_pca(dirs, ratios, w_mean)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), LatentDirError> {
        std::fs::write(path, self.to_bytes()).map_err(CheckpointError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LatentDirError> {
        Self::from_bytes(&std::fs::read(path).map_err(CheckpointError::from)?)
    }
}

/// Maps `k` standard-normal `z` through the teacher's mapping network and
/// returns `(w_mean, samples [k, w_dim])`.
pub fn estimate_w_stats(weights: &GeneratorWeights, k: usize, seed: u64) -> Result<(Vec<f64>, Tensor), LatentDirError> {
    let cfg = weights.config();
    let w_dim = cfg.w_dim;
    if k <= w_dim {
        return Err(LatentDirError::TooFewSamples { k, w_dim });
    }
    let mut r = rng::stream(seed, rng::ids::W_STATS);
    let z = rng::normal_tensor(&[k, cfg.z_dim], &mut r);
    let samples = map_batch(weights, &z)?;
    Ok((column_mean(samples.data(), k, w_dim), samples))
}

fn column_mean(x: &[f64], k: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    mean
}

/// Sample covariance of `samples [k, d]`, centred, divisor `k − 1`.
pub fn sample_covariance(samples: &Tensor) -> Result<Tensor, LatentDirError> {
    let [k, d] = *samples.shape() else {
        return Err(LatentDirError::Invalid(format!("samples must be 2-D, got {:?}", samples.shape())));
    };
    if k < 2 {
        return Err(LatentDirError::TooFewSamples { k, w_dim: d });
    }
    let mean = column_mean(samples.data(), k, d);
    let centred: Vec<f64> = samples
        .data()
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let mut cov = vec![0.0; d * d];
    kernels::gemm(d, k, d, &centred, true, &centred, false, &mut cov, false);
    let scale = 1.0 / (k - 1) as f64;
    // Symmetrise so the eigensolver sees an exactly symmetric matrix.
    for a in 0..d {
        for b in a..d {
            let v = 0.5 * (cov[a * d + b] + cov[b * d + a]) * scale;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok(Tensor::new(vec![d, d], cov)?)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in non-increasing order and the matching unit
/// eigenvectors as rows of an `[n, n]` tensor, signed so that the first
/// non-negligible coordinate is positive.
pub fn symmetric_eigen(m: &Tensor) -> Result<(Vec<f64>, Tensor), LatentDirError> {
    let [n, n2] = *m.shape() else {
        return Err(LatentDirError::Invalid("matrix must be 2-D".into()));
    };
    if n != n2 {
        return Err(LatentDirError::Invalid(format!("matrix is {n}x{n2}, not square")));
    }
    let mut a = m.data().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum();
        if off.sqrt() <= 1e-15 * frob || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut rows = Vec::with_capacity(n * n);
    for &col in &order {
        let mut e: Vec<f64> = (0..n).map(|k| v[k * n + col]).collect();
        if let Some(first) = e.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                e.iter_mut().for_each(|x| *x = -*x);
            }
        }
        rows.extend(e);
    }
    Ok((values, Tensor::new(vec![n, n], rows)?))
}

/// Top-`v` principal directions of `samples [k, w_dim]`.
pub fn pca_directions(samples: &Tensor, v: usize) -> Result<DirectionSet, LatentDirError> {
    let [k, d] = *samples.shape() else {
        return Err(LatentDirError::Invalid(format!("samples must be 2-D, got {:?}", samples.shape())));
    };
    if v == 0 || v > d {
        return Err(LatentDirError::TooManyComponents { requested: v, available: d });
    }
    if k <= v {
        return Err(LatentDirError::TooFewSamples { k, w_dim: d });
    }
    let (values, vectors) = symmetric_eigen(&sample_covariance(samples)?)?;
    let top = values[0].max(0.0);
    let attainable = values.iter().filter(|&&l| top > 0.0 && l > 1e-12 * top).count();
    if attainable < v {
        return Err(LatentDirError::RankDeficient { requested: v, attainable });
    }
    let retained: f64 = values[..v].iter().sum();
    let ratios = values[..v].iter().map(|l| l / retained).collect();
    let dirs = Tensor::new(vec![v, d], vectors.data()[..v * d].to_vec())?;
    DirectionSet::from_pca(dirs, ratios, column_mean(samples.data(), k, d))
}

/// Draws one perturbation direction. PCA mode picks row `i` with
/// probability `variance_ratios[i]`; RANDOM mode returns a fresh `N(0, I)`
/// vector.
pub fn sample_direction(ds: &DirectionSet, rng: &mut impl Rng) -> Vec<f64> {
    match ds.mode {
        DirectionMode::Random => rng::normal_vec(ds.w_dim(), rng),
        DirectionMode::Pca => {
            let pick = WeightedIndex::new(&ds.variance_ratios).expect("validated ratios");
            let i = pick.sample(rng);
            ds.direction(i).expect("pca mode").to_vec()
        }
    }
}
