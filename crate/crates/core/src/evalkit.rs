//! Fidelity and diversity metrics that need no pretrained feature network.
//!
//! Distances between images are per-pixel RMS, `sqrt(mean((a − b)²))`, so
//! values do not depend on resolution.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::json;
use crate::rng;
use crate::synthnet::{map_batch, synthesize_batch, ForwardOptions, GeneratorWeights, SynthError};
use crate::tensor::Tensor;

/// Latents rendered per forward pass.
const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Interpolation of sampled latents towards `w_mean`.
#[derive(Clone, Debug)]
pub struct Truncation {
    pub w_mean: Vec<f64>,
    pub psi: f64,
}

/// `n` latents in W drawn through `gen`'s mapping network.
pub fn eval_latents(gen: &GeneratorWeights, n: usize, seed: u64, trunc: Option<&Truncation>) -> Result<Tensor, EvalError> {
    let cfg = gen.config();
    let mut r = rng::stream(seed, rng::ids::EVAL);
    let z = rng::normal_tensor(&[n, cfg.z_dim], &mut r);
    let mut w = map_batch(gen, &z)?;
    if let Some(t) = trunc {
        if t.w_mean.len() != cfg.w_dim || !(0.0..=1.0).contains(&t.psi) {
            return Err(EvalError::Invalid(format!(
                "truncation needs a {}-wide mean and psi in [0, 1]",
                cfg.w_dim
            )));
        }
        let d = cfg.w_dim;
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            let m = t.w_mean[i % d];
            *v = m + t.psi * (*v - m);
        }
    }
    Ok(w)
}

/// Renders `w [n, w_dim]` in chunks; one flattened image per latent.
pub fn render(gen: &GeneratorWeights, w: &Tensor) -> Result<Vec<Vec<f64>>, EvalError> {
    let (n, d) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let m = CHUNK.min(n - start);
        let chunk = Tensor::new(vec![m, d], w.data()[start * d..(start + m) * d].to_vec()).expect("sized above");
        let img = synthesize_batch(gen, &chunk, &ForwardOptions::default())?;
        let per = img.numel() / m;
        out.extend(img.data().chunks(per).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Mean over `n` shared latents of the mean absolute pixel difference
/// between teacher and student images. Latents come from the teacher's
/// mapping network.
pub fn teacher_student_l1(
    teacher: &GeneratorWeights,
    student: &GeneratorWeights,
    n: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    let w = eval_latents(teacher, n.max(1), seed, None)?;
    teacher_student_l1_at(teacher, student, &w, n)
}

/// [`teacher_student_l1`] on given latents.
pub fn teacher_student_l1_at(
    teacher: &GeneratorWeights,
    student: &GeneratorWeights,
    w: &Tensor,
    n: usize,
) -> Result<f64, EvalError> {
    let (tc, sc) = (teacher.config(), student.config());
    if n == 0 {
        return Err(EvalError::Invalid("need at least one latent".into()));
    }
    if tc.w_dim != sc.w_dim {
        return Err(EvalError::Invalid(format!("w_dim {} vs {}", tc.w_dim, sc.w_dim)));
    }
    if tc.output_resolution() != sc.output_resolution() {
        return Err(EvalError::Invalid(format!(
            "resolution {} vs {}",
            tc.output_resolution(),
            sc.output_resolution()
        )));
    }
    let (ti, si) = (render(teacher, w)?, render(student, w)?);
    let total: f64 = ti
        .iter()
        .zip(&si)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    /// Mean over samples of the distance to the nearest other sample.
    pub min_nn_distance: f64,
    /// Mean over all unordered pairs.
    pub avg_distance: f64,
    pub n_samples: usize,
}

/// Per-pixel RMS distance.
pub fn rms_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / a.len() as f64).sqrt()
}

/// Sums ascending so the result does not depend on input order.
fn order_free_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().sum::<f64>() / n
}

/// Nearest-neighbour and average pairwise distances over all `n(n−1)/2`
/// pairs. Exactly invariant to the order of `images`.
pub fn diversity_of(images: &[Vec<f64>]) -> Result<DiversityStats, EvalError> {
    let n = images.len();
    if n < 2 {
        return Err(EvalError::Invalid(format!("diversity needs at least 2 samples, got {n}")));
    }
    let mut nn = vec![f64::INFINITY; n];
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d = rms_distance(&images[i], &images[j]);
            nn[i] = nn[i].min(d);
            nn[j] = nn[j].min(d);
            pairs.push(d);
        }
    }
    Ok(DiversityStats {
        min_nn_distance: order_free_mean(nn),
        avg_distance: order_free_mean(pairs),
        n_samples: n,
    })
}

pub fn pairwise_diversity(gen: &GeneratorWeights, n: usize, seed: u64) -> Result<DiversityStats, EvalError> {
    pairwise_diversity_with(gen, n, seed, None)
}

pub fn pairwise_diversity_with(
    gen: &GeneratorWeights,
    n: usize,
    seed: u64,
    trunc: Option<&Truncation>,
) -> Result<DiversityStats, EvalError> {
    if n < 2 {
        return Err(EvalError::Invalid(format!("diversity needs at least 2 samples, got {n}")));
    }
    let w = eval_latents(gen, n, seed, trunc)?;
    diversity_of(&render(gen, &w)?)
}

/// Metrics file written by the evaluation command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub teacher_student_l1: f64,
    pub min_nn_distance: f64,
    pub avg_distance: f64,
    pub n: usize,
    pub seed: u64,
    pub teacher_params: u64,
    pub student_params: u64,
    pub teacher_flops: u64,
    pub student_flops: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        json::to_canonical_string(self, true).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surgeon::{reindex_channels, PruningPlan};
    use crate::synthnet::{init_generator, BlockNames, GeneratorConfig};
    use proptest::prelude::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            z_dim: 4,
            w_dim: 4,
            mapping_layers: 1,
            resolutions: vec![4, 8],
            channels_per_resolution: vec![3, 2],
            ..Default::default()
        }
    }

    #[test]
    fn identical_generators_have_zero_l1() {
        let t = init_generator(&tiny(), 1).unwrap();
        assert_eq!(teacher_student_l1(&t, &t, 10, 0).unwrap(), 0.0);
    }

    #[test]
    fn shifted_rgb_bias_gives_that_offset() {
        let t = init_generator(&tiny(), 2).unwrap();
        let mut s = t.clone();
        let name = BlockNames::new(8).torgb_bias;
        for v in s.get_mut(&name).data_mut() {
            *v += 0.2;
        }
        assert!((teacher_student_l1(&t, &s, 20, 3).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn l1_matches_per_latent_loop() {
        let t = init_generator(&tiny(), 4).unwrap();
        let s = init_generator(&tiny(), 5).unwrap();
        let n = 100;
        let w = eval_latents(&t, n, 6, None).unwrap();
        let mut total = 0.0;
        for i in 0..n {
            let wi = Tensor::new(vec![1, 4], w.data()[i * 4..(i + 1) * 4].to_vec()).unwrap();
            let a = synthesize_batch(&t, &wi, &ForwardOptions::default()).unwrap();
            let b = synthesize_batch(&s, &wi, &ForwardOptions::default()).unwrap();
            let mut acc = 0.0;
            for k in 0..a.numel() {
                acc += (a.data()[k] - b.data()[k]).abs();
            }
            total += acc / a.numel() as f64;
        }
        let got = teacher_student_l1(&t, &s, n, 6).unwrap();
        assert!((got - total / n as f64).abs() < 1e-12);
    }

    #[test]
    fn l1_rejects_resolution_mismatch() {
        let t = init_generator(&tiny(), 1).unwrap();
        let bigger = GeneratorConfig {
            resolutions: vec![4, 8, 16],
            channels_per_resolution: vec![3, 2, 2],
            ..tiny()
        };
        let s = init_generator(&bigger, 1).unwrap();
        assert!(teacher_student_l1(&t, &s, 3, 0).is_err());
        assert!(teacher_student_l1(&t, &t, 0, 0).is_err());
    }

    #[test]
    fn constant_generator_has_no_diversity() {
        let mut g = init_generator(&tiny(), 7).unwrap();
        let names: Vec<String> = g.iter().map(|(n, _)| n).collect();
        for n in names {
            g.get_mut(&n).data_mut().fill(0.0);
        }
        let d = pairwise_diversity(&g, 6, 0).unwrap();
        assert_eq!((d.min_nn_distance, d.avg_distance, d.n_samples), (0.0, 0.0, 6));
    }

    #[test]
    fn two_alternating_images() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64 * 0.11).cos()).collect();
        let d_ab = rms_distance(&a, &b);
        for n in [2usize, 4, 6, 10] {
            let images: Vec<Vec<f64>> = (0..n).map(|i| if i % 2 == 0 { a.clone() } else { b.clone() }).collect();
            let mut sum = 0.0;
            let mut count = 0;
            for i in 0..n {
                for j in 0..n {
                    if i < j {
                        let mut s = 0.0;
                        for k in 0..12 {
                            s += (images[i][k] - images[j][k]).powi(2);
                        }
                        sum += (s / 12.0).sqrt();
                        count += 1;
                    }
                }
            }
            let stats = diversity_of(&images).unwrap();
            let closed = d_ab * n as f64 / (2.0 * (n as f64 - 1.0));
            assert!((stats.avg_distance - sum / count as f64).abs() < 1e-12);
            assert!((stats.avg_distance - closed).abs() < 1e-12);
            let nn = if n == 2 { d_ab } else { 0.0 };
            assert!((stats.min_nn_distance - nn).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_sample_has_zero_neighbour_distance() {
        let g = init_generator(&tiny(), 8).unwrap();
        let w = eval_latents(&g, 5, 1, None).unwrap();
        let mut images = render(&g, &w).unwrap();
        let before = diversity_of(&images).unwrap();
        images.push(images[2].clone());
        let mut nn = vec![f64::INFINITY; images.len()];
        for i in 0..images.len() {
            for j in 0..images.len() {
                if i != j {
                    nn[i] = nn[i].min(rms_distance(&images[i], &images[j]));
                }
            }
        }
        assert_eq!(nn[2], 0.0);
        assert_eq!(nn[5], 0.0);
        assert!(diversity_of(&images).unwrap().min_nn_distance < before.min_nn_distance);
    }

    #[test]
    fn truncation_to_the_mean_collapses_diversity() {
        let g = init_generator(&tiny(), 9).unwrap();
        let t = Truncation { w_mean: vec![0.1; 4], psi: 0.0 };
        let d = pairwise_diversity_with(&g, 4, 0, Some(&t)).unwrap();
        assert_eq!(d.avg_distance, 0.0);
        let full = pairwise_diversity(&g, 4, 0).unwrap();
        assert!(full.avg_distance > 0.0);
        assert!(full.min_nn_distance <= full.avg_distance);
    }

    #[test]
    fn channel_order_does_not_change_images() {
        let t = init_generator(&tiny(), 10).unwrap();
        let mut idx = PruningPlan::keep_all(t.config()).kept;
        idx.insert("block.4".into(), vec![2, 0, 1]);
        let s = reindex_channels(&t, &idx).unwrap();
        assert!(teacher_student_l1(&t, &s, 10, 0).unwrap() < 1e-12);
    }

    #[test]
    fn report_json_has_expected_keys() {
        let r = EvalReport {
            teacher_student_l1: 0.5,
            min_nn_distance: 0.1,
            avg_distance: 0.2,
            n: 10,
            seed: 3,
            teacher_params: 100,
            student_params: 40,
            teacher_flops: 1000,
            student_flops: 300,
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for k in ["teacher_student_l1", "min_nn_distance", "avg_distance", "n", "seed"] {
            assert!(v.get(k).is_some());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn diversity_ignores_sample_order(
            values in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), 2..9),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = values.clone();
            shuffled.shuffle(&mut rng::stream(seed, 0));
            let a = diversity_of(&values).unwrap();
            let b = diversity_of(&shuffled).unwrap();
            prop_assert_eq!(a.min_nn_distance.to_bits(), b.min_nn_distance.to_bits());
            prop_assert_eq!(a.avg_distance.to_bits(), b.avg_distance.to_bits());
            prop_assert!(a.min_nn_distance <= a.avg_distance + 1e-15);
        }
    }
}
