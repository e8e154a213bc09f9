use std::collections::BTreeMap;

use super::disc::Discriminator;
use super::{DistillConfig, TrainError};
use crate::synthnet::{synthesis_forward, ForwardOptions, GeneratorWeights, GraphParams};
use crate::tensor::{Graph, Result as TResult, Tensor, TensorError, Var};

/// Mean absolute pixel difference.
pub fn loss_rgb(student: &Tensor, teacher: &Tensor) -> Result<f64, TrainError> {
    if student.shape() != teacher.shape() {
        return Err(TensorError::Incompatible {
            op: "loss_rgb",
            left: student.shape().to_vec(),
            right: teacher.shape().to_vec(),
        }
        .into());
    }
    let s: f64 = student.data().iter().zip(teacher.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / student.numel() as f64)
}

fn rgb_term(g: &mut Graph, student: Var, teacher: Var) -> TResult<Var> {
    let d = g.sub(student, teacher)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

fn perturbed(w: &Tensor, dirs: &Tensor, alpha: f64) -> Result<Tensor, TrainError> {
    if w.shape() != dirs.shape() {
        return Err(TensorError::Incompatible {
            op: "latent perturbation",
            left: w.shape().to_vec(),
            right: dirs.shape().to_vec(),
        }
        .into());
    }
    Ok(Tensor::from_fn(w.shape(), |i| w.data()[i] + alpha * dirs.data()[i]))
}

/// `[B, F]` rows `flatten(φ(w_i + α·d_i) − φ(w_i))`, with φ the last
/// block's pre-RGB features.
fn delta_graph(
    g: &mut Graph,
    p: &GraphParams,
    weights: &GeneratorWeights,
    w: Var,
    w_pert: Var,
) -> Result<(Var, Var), TrainError> {
    let opts = ForwardOptions::default();
    let base = synthesis_forward(g, p, weights.config(), w, &opts)?;
    let moved = synthesis_forward(g, p, weights.config(), w_pert, &opts)?;
    let d = g.sub(moved.features, base.features)?;
    let b = g.value(d).shape()[0];
    let f = g.value(d).numel() / b;
    Ok((base.image, g.reshape(d, &[b, f])?))
}

/// Feature responses to the perturbations, `[B, F]`.
pub fn direction_deltas(weights: &GeneratorWeights, w: &Tensor, dirs: &Tensor, alpha: f64) -> Result<Tensor, TrainError> {
    let mut g = Graph::new();
    let p = GraphParams::constant(&mut g, weights);
    let wp = perturbed(w, dirs, alpha)?;
    let (wv, wpv) = (g.constant(w.clone()), g.constant(wp));
    let (_, d) = delta_graph(&mut g, &p, weights, wv, wpv)?;
    Ok(g.value(d).clone())
}

/// `B×B` cosine similarities between rows; errors on a near-zero row.
pub fn relation_gram(deltas: &Tensor) -> Result<Tensor, TrainError> {
    let mut g = Graph::new();
    let x = g.constant(deltas.clone());
    let gram = g.cosine_gram(x)?;
    Ok(g.value(gram).clone())
}

/// Mean absolute difference of the two models' relation matrices.
pub fn relation_loss(teacher_deltas: &Tensor, student_deltas: &Tensor) -> Result<f64, TrainError> {
    let (t, s) = (relation_gram(teacher_deltas)?, relation_gram(student_deltas)?);
    loss_rgb(&s, &t)
}

/// Latent-direction relation loss between teacher and student.
pub fn loss_ld(
    teacher: &GeneratorWeights,
    student: &GeneratorWeights,
    w: &Tensor,
    dirs: &Tensor,
    alpha: f64,
) -> Result<f64, TrainError> {
    if w.rank() != 2 || w.shape()[0] < 2 {
        return Err(TrainError::Config(format!("relation loss needs a batch of at least 2 latents, got {:?}", w.shape())));
    }
    relation_loss(
        &direction_deltas(teacher, w, dirs, alpha)?,
        &direction_deltas(student, w, dirs, alpha)?,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses {
    pub g_loss: f64,
    pub d_loss: f64,
    pub r1: f64,
}

/// `∇ₓ Σ_b D(x_b)`, which is per-sample since D has no batch coupling.
pub fn disc_input_gradient(disc: &Discriminator, x: &Tensor) -> Result<Tensor, TrainError> {
    let mut g = Graph::new();
    let vars = disc.register(&mut g, false);
    let xv = g.param(x.clone());
    let y = disc.forward(&mut g, &vars, xv)?;
    let s = g.sum(y);
    Ok(g.backward(s)?.take(xv))
}

/// `(γ/2)·mean_b ‖∂D(x_b)/∂x_b‖²` from an input gradient.
fn r1_from_input_gradient(grad: &Tensor, gamma: f64) -> f64 {
    let b = grad.shape()[0];
    0.5 * gamma * grad.data().iter().map(|v| v * v).sum::<f64>() / b as f64
}

/// Non-saturating losses and the R1 penalty on `real`.
pub fn gan_losses(disc: &Discriminator, real: &Tensor, fake: &Tensor, gamma: f64) -> Result<GanLosses, TrainError> {
    if real.shape() != fake.shape() {
        return Err(TensorError::Incompatible {
            op: "gan_losses",
            left: real.shape().to_vec(),
            right: fake.shape().to_vec(),
        }
        .into());
    }
    let (dr, df) = (disc.logits(real)?, disc.logits(fake)?);
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let g_loss = mean(&df, &|x| softplus(-x));
    let d_loss = mean(&df, &softplus) + mean(&dr, &|x| softplus(-x));
    let r1 = r1_from_input_gradient(&disc_input_gradient(disc, real)?, gamma);
    Ok(GanLosses { g_loss, d_loss, r1 })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sum_logit_param_grads(disc: &Discriminator, x: &Tensor) -> Result<BTreeMap<String, Tensor>, TrainError> {
    let mut g = Graph::new();
    let vars = disc.register(&mut g, true);
    let xv = g.constant(x.clone());
    let y = disc.forward(&mut g, &vars, xv)?;
    let s = g.sum(y);
    let mut grads = g.backward(s)?;
    Ok(vars.iter().map(|(n, &v)| (n.clone(), grads.take(v))).collect())
}

/// R1 value and its gradient with respect to the discriminator parameters.
///
/// With `u = ∇ₓ Σ D(x)` held fixed, `∂R1/∂θ = (γ/B)·∂²ΣD/∂θ∂x · u`, taken as
/// a central difference of `∇_θ Σ D` along `u`. The discriminator is
/// piecewise linear in `x`, so the difference is exact unless the step
/// crosses an activation kink.
pub fn r1_param_gradient(
    disc: &Discriminator,
    real: &Tensor,
    gamma: f64,
) -> Result<(f64, BTreeMap<String, Tensor>), TrainError> {
    let u = disc_input_gradient(disc, real)?;
    let r1 = r1_from_input_gradient(&u, gamma);
    let peak = u.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Ok((r1, disc.params().iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect()));
    }
    let eps = 1e-4 / peak;
    let shifted = |sign: f64| Tensor::from_fn(real.shape(), |i| real.data()[i] + sign * eps * u.data()[i]);
    let plus = sum_logit_param_grads(disc, &shifted(1.0))?;
    let minus = sum_logit_param_grads(disc, &shifted(-1.0))?;
    let k = gamma / real.shape()[0] as f64 / (2.0 * eps);
    let grads = plus
        .into_iter()
        .map(|(n, p)| {
            let m = &minus[&n];
            let t = Tensor::from_fn(p.shape(), |i| k * (p.data()[i] - m.data()[i]));
            (n, t)
        })
        .collect();
    Ok((r1, grads))
}

/// Discriminator loss `mean softplus(D(fake)) + mean softplus(−D(real))`
/// and its parameter gradients.
pub fn disc_loss_gradient(
    disc: &Discriminator,
    real: &Tensor,
    fake: &Tensor,
) -> Result<(f64, BTreeMap<String, Tensor>), TrainError> {
    let mut g = Graph::new();
    let vars = disc.register(&mut g, true);
    let (rv, fv) = (g.constant(real.clone()), g.constant(fake.clone()));
    let dr = disc.forward(&mut g, &vars, rv)?;
    let df = disc.forward(&mut g, &vars, fv)?;
    let nr = g.neg(dr);
    let a = g.softplus(df);
    let a = g.mean(a);
    let b = g.softplus(nr);
    let b = g.mean(b);
    let loss = g.add(a, b)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    Ok((value, vars.iter().map(|(n, &v)| (n.clone(), grads.take(v))).collect()))
}

/// Generator-side loss terms. Terms whose weight is zero are not evaluated
/// and read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistillTerms {
    pub gan: f64,
    pub rgb: f64,
    pub ld: f64,
    /// `λ_gan·gan + λ_rgb·rgb + λ_ld·ld`, summed inside the graph.
    pub total: f64,
}

/// Teacher-side quantities for one distillation batch.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    pub w: Tensor,
    pub dirs: Tensor,
    pub image: Tensor,
    /// Relation matrix; present when the relation loss is enabled.
    pub gram: Option<Tensor>,
}

impl TeacherTargets {
    pub fn compute(
        teacher: &GeneratorWeights,
        w: Tensor,
        dirs: Tensor,
        cfg: &DistillConfig,
    ) -> Result<Self, TrainError> {
        let mut g = Graph::new();
        let p = GraphParams::constant(&mut g, teacher);
        let wv = g.constant(w.clone());
        let (image, gram) = if cfg.lambda_ld > 0.0 {
            let wp = g.constant(perturbed(&w, &dirs, cfg.ld_alpha)?);
            let (img, d) = delta_graph(&mut g, &p, teacher, wv, wp)?;
            let gram = g.cosine_gram(d)?;
            (g.value(img).clone(), Some(g.value(gram).clone()))
        } else {
            let out = synthesis_forward(&mut g, &p, teacher.config(), wv, &ForwardOptions::default())?;
            (g.value(out.image).clone(), None)
        };
        Ok(Self { w, dirs, image, gram })
    }
}

/// Whether `name` is trained during distillation (the mapping is frozen).
pub fn is_student_trainable(name: &str) -> bool {
    !name.starts_with("mapping.")
}

/// Weighted student objective and its gradients with respect to the
/// synthesis tensors. Returns no gradients when every weight is zero.
pub fn student_objective(
    student: &GeneratorWeights,
    disc: &Discriminator,
    targets: &TeacherTargets,
    cfg: &DistillConfig,
) -> Result<(DistillTerms, BTreeMap<String, Tensor>), TrainError> {
    let mut g = Graph::new();
    let p = GraphParams::register(&mut g, student, is_student_trainable);
    let wv = g.constant(targets.w.clone());
    let mut terms = DistillTerms::default();
    let mut parts: Vec<Var> = Vec::new();
    let image = if cfg.lambda_ld > 0.0 {
        let wp = g.constant(perturbed(&targets.w, &targets.dirs, cfg.ld_alpha)?);
        let (img, d) = delta_graph(&mut g, &p, student, wv, wp)?;
        let gram = g.cosine_gram(d)?;
        let tg = targets
            .gram
            .clone()
            .ok_or_else(|| TrainError::Config("teacher relation matrix missing".into()))?;
        let tg = g.constant(tg);
        let ld = rgb_term(&mut g, gram, tg)?;
        terms.ld = g.value(ld).item();
        parts.push(g.scale(ld, cfg.lambda_ld));
        img
    } else {
        synthesis_forward(&mut g, &p, student.config(), wv, &ForwardOptions::default())?.image
    };
    if cfg.lambda_rgb > 0.0 {
        let t = g.constant(targets.image.clone());
        let rgb = rgb_term(&mut g, image, t)?;
        terms.rgb = g.value(rgb).item();
        parts.push(g.scale(rgb, cfg.lambda_rgb));
    }
    if cfg.lambda_gan > 0.0 {
        let vars = disc.register(&mut g, false);
        let logits = disc.forward(&mut g, &vars, image)?;
        let n = g.neg(logits);
        let sp = g.softplus(n);
        let gan = g.mean(sp);
        terms.gan = g.value(gan).item();
        parts.push(g.scale(gan, cfg.lambda_gan));
    }
    let Some(mut total) = parts.first().copied() else {
        return Ok((terms, BTreeMap::new()));
    };
    for &v in &parts[1..] {
        total = g.add(total, v)?;
    }
    terms.total = g.value(total).item();
    let mut grads = g.backward(total)?;
    let out = p
        .iter()
        .filter(|(n, _)| is_student_trainable(n))
        .map(|(n, v)| (n.to_owned(), grads.take(v)))
        .collect();
    Ok((terms, out))
}

/// The generator-side loss terms for one batch.
pub fn distill_terms(
    teacher: &GeneratorWeights,
    student: &GeneratorWeights,
    disc: &Discriminator,
    w: &Tensor,
    dirs: &Tensor,
    cfg: &DistillConfig,
) -> Result<DistillTerms, TrainError> {
    let targets = TeacherTargets::compute(teacher, w.clone(), dirs.clone(), cfg)?;
    Ok(student_objective(student, disc, &targets, cfg)?.0)
}
