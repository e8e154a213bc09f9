use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::data::blob_batch;
use super::disc::Discriminator;
use super::losses::{disc_loss_gradient, r1_param_gradient, student_objective, TeacherTargets};
use super::{DistillConfig, TrainError};
use crate::json;
use crate::latentdir::{sample_direction, DirectionSet};
use crate::rng::{self, StreamRng};
use crate::synthnet::{
    init_generator, map_batch, mapping_forward, save_checkpoint, synthesis_forward, synthesize_batch, ForwardOptions,
    GeneratorConfig, GeneratorWeights, GraphParams,
};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// JSON-lines log destination.
    pub log_path: Option<PathBuf>,
    pub log_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Where the state goes when a loss turns non-finite; falls back to
    /// `checkpoint_dir`.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            log_path: None,
            log_every: 100,
            checkpoint_dir: None,
            checkpoint_every: 0,
            dump_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Completed steps.
    pub step: usize,
    pub g_loss: f64,
    pub d_loss: f64,
    pub rgb: f64,
    pub ld: f64,
    /// Most recent R1 value (R1 is evaluated lazily).
    pub r1: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub generator: GeneratorWeights,
    pub disc: Discriminator,
    pub history: Vec<LogRecord>,
}

struct Logger {
    out: Option<BufWriter<File>>,
    every: usize,
    start: Instant,
    history: Vec<LogRecord>,
}

impl Logger {
    fn new(opts: &TrainOptions) -> Result<Self, TrainError> {
        let out = match &opts.log_path {
            Some(p) => Some(BufWriter::new(File::create(p)?)),
            None => None,
        };
        Ok(Self {
            out,
            every: opts.log_every.max(1),
            start: Instant::now(),
            history: Vec::new(),
        })
    }

    fn record(&mut self, step: usize, last: bool, mut rec: LogRecord) -> Result<(), TrainError> {
        if step % self.every != 0 && !last {
            return Ok(());
        }
        rec.step = step;
        rec.wall_ms = self.start.elapsed().as_millis() as u64;
        log::info!(
            "step {step}: g {:.4} d {:.4} rgb {:.4} ld {:.4} r1 {:.4}",
            rec.g_loss,
            rec.d_loss,
            rec.rgb,
            rec.ld,
            rec.r1
        );
        if let Some(out) = self.out.as_mut() {
            writeln!(out, "{}", json::to_canonical_string(&rec, false).expect("record serializes"))?;
            out.flush()?;
        }
        self.history.push(rec);
        Ok(())
    }
}

struct Guard<'a> {
    opts: &'a TrainOptions,
    label: &'static str,
}

impl Guard<'_> {
    fn check(
        &self,
        step: usize,
        values: &[(&'static str, f64)],
        gen: &GeneratorWeights,
        disc: &Discriminator,
    ) -> Result<(), TrainError> {
        let bad = values
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(w, _)| *w)
            .or_else(|| (!gen.is_finite()).then_some("generator weights"))
            .or_else(|| (!disc.is_finite()).then_some("discriminator weights"));
        let Some(what) = bad else { return Ok(()) };
        let dump = match self.opts.dump_dir.as_ref().or(self.opts.checkpoint_dir.as_ref()) {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("{}_diverged_step{step}.dcpg", self.label));
                save_checkpoint(gen, gen.config(), &path)?;
                disc.save(&dir.join(format!("{}_diverged_step{step}_disc.dcpg", self.label)))?;
                Some(path)
            }
            None => None,
        };
        log::error!("non-finite {what} at step {step}");
        Err(TrainError::Diverged { step, what, dump })
    }

    fn checkpoint(&self, step: usize, gen: &GeneratorWeights, disc: &Discriminator) -> Result<(), TrainError> {
        let (Some(dir), every) = (self.opts.checkpoint_dir.as_ref(), self.opts.checkpoint_every) else {
            return Ok(());
        };
        if every == 0 || step % every != 0 {
            return Ok(());
        }
        std::fs::create_dir_all(dir)?;
        save_checkpoint(gen, gen.config(), &dir.join(format!("{}_step{step:06}.dcpg", self.label)))?;
        disc.save(&dir.join(format!("{}_step{step:06}_disc.dcpg", self.label)))?;
        Ok(())
    }
}

fn check_resolution(gen: &GeneratorConfig, disc: &Discriminator) -> Result<(), TrainError> {
    if gen.output_resolution() != disc.config().resolution {
        return Err(TrainError::Config(format!(
            "generator renders {}px images but the discriminator expects {}px",
            gen.output_resolution(),
            disc.config().resolution
        )));
    }
    Ok(())
}

/// One discriminator update with lazy R1. Returns `(d_loss, r1)`, where
/// `r1` is `None` on steps that skip the penalty.
fn disc_step(
    disc: &mut Discriminator,
    opt: &mut Adam,
    real: &Tensor,
    fake: &Tensor,
    step: usize,
    cfg: &DistillConfig,
) -> Result<(f64, Option<f64>), TrainError> {
    let (d_loss, mut grads) = disc_loss_gradient(disc, real, fake)?;
    let mut r1 = None;
    if cfg.r1_gamma > 0.0 && step % cfg.r1_interval == 0 {
        let (value, rg) = r1_param_gradient(disc, real, cfg.r1_gamma)?;
        let k = cfg.r1_interval as f64;
        for (name, g) in grads.iter_mut() {
            let extra = &rg[name];
            g.data_mut().iter_mut().zip(extra.data()).for_each(|(a, b)| *a += k * b);
        }
        r1 = Some(value);
    }
    apply(opt, disc.params_mut(), &grads);
    Ok((d_loss, r1))
}

fn apply(opt: &mut Adam, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
    opt.begin_step();
    for (name, g) in grads {
        opt.update(name, params.get_mut(name).expect("gradient for a known tensor"), g);
    }
}

fn apply_generator(opt: &mut Adam, gen: &mut GeneratorWeights, grads: &BTreeMap<String, Tensor>) {
    opt.begin_step();
    for (name, g) in grads {
        opt.update(name, gen.get_mut(name), g);
    }
}

fn latent_batch(rng: &mut StreamRng, b: usize, dim: usize) -> Tensor {
    rng::normal_tensor(&[b, dim], rng)
}

/// Trains a generator from scratch on the blob dataset with the
/// non-saturating loss and lazy R1. Every generator tensor is trained.
pub fn train_teacher(
    gen_cfg: &GeneratorConfig,
    mut disc: Discriminator,
    steps: usize,
    cfg: &DistillConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    gen_cfg.validate()?;
    if steps == 0 {
        return Err(TrainError::Config("steps must be >= 1".into()));
    }
    check_resolution(gen_cfg, &disc)?;
    let mut gen = init_generator(gen_cfg, cfg.seed)?;
    let mut rng = rng::stream(cfg.seed, rng::ids::TRAIN);
    let (mut opt_g, mut opt_d) = (
        Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2),
        Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2),
    );
    let b = cfg.batch_size;
    let res = gen_cfg.output_resolution();
    let mut logger = Logger::new(opts)?;
    let guard = Guard { opts, label: "teacher" };
    let mut last_r1 = 0.0;
    for step in 0..steps {
        let z = latent_batch(&mut rng, b, gen_cfg.z_dim);
        let fake = synthesize_batch(&gen, &map_batch(&gen, &z)?, &ForwardOptions::default())?;
        let real = blob_batch(cfg.seed, (step * b) as u64, b, res);
        let (d_loss, r1) = disc_step(&mut disc, &mut opt_d, &real, &fake, step, cfg)?;
        last_r1 = r1.unwrap_or(last_r1);

        let z = latent_batch(&mut rng, b, gen_cfg.z_dim);
        let mut g = Graph::new();
        let p = GraphParams::register(&mut g, &gen, |_| true);
        let zv = g.constant(z);
        let w = mapping_forward(&mut g, &p, gen_cfg, zv)?;
        let img = synthesis_forward(&mut g, &p, gen_cfg, w, &ForwardOptions::default())?.image;
        let dv = disc.register(&mut g, false);
        let logits = disc.forward(&mut g, &dv, img)?;
        let n = g.neg(logits);
        let sp = g.softplus(n);
        let loss = g.mean(sp);
        let g_loss = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let grads: BTreeMap<String, Tensor> = p.iter().map(|(n, v)| (n.to_owned(), grads.take(v))).collect();
        apply_generator(&mut opt_g, &mut gen, &grads);

        let done = step + 1;
        guard.check(done, &[("g_loss", g_loss), ("d_loss", d_loss), ("r1", last_r1)], &gen, &disc)?;
        logger.record(
            done,
            done == steps,
            LogRecord {
                step: done,
                g_loss,
                d_loss,
                rgb: 0.0,
                ld: 0.0,
                r1: last_r1,
                wall_ms: 0,
            },
        )?;
        guard.checkpoint(done, &gen, &disc)?;
    }
    Ok(TrainOutcome {
        generator: gen,
        disc,
        history: logger.history,
    })
}

/// Distills `student` towards `teacher`. Latents come from the teacher's
/// mapping network and only the student's synthesis tensors are trained.
pub fn distill_student(
    teacher: &GeneratorWeights,
    mut student: GeneratorWeights,
    mut disc: Discriminator,
    directions: &DirectionSet,
    cfg: &DistillConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let (tc, sc) = (teacher.config(), student.config());
    if tc.w_dim != sc.w_dim || tc.output_resolution() != sc.output_resolution() {
        return Err(TrainError::Config("teacher and student disagree on w_dim or resolution".into()));
    }
    if directions.w_dim() != tc.w_dim {
        return Err(TrainError::Config(format!(
            "direction set has width {} but w_dim is {}",
            directions.w_dim(),
            tc.w_dim
        )));
    }
    check_resolution(sc, &disc)?;
    let mut rng = rng::stream(cfg.seed, rng::ids::DISTILL);
    let (mut opt_g, mut opt_d) = (
        Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2),
        Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2),
    );
    let b = cfg.batch_size;
    let res = sc.output_resolution();
    let mut logger = Logger::new(opts)?;
    let guard = Guard { opts, label: "student" };
    let mut last_r1 = 0.0;
    for step in 0..cfg.iterations {
        let z = latent_batch(&mut rng, b, tc.z_dim);
        let w = map_batch(teacher, &z)?;
        let mut dirs = Vec::with_capacity(b * tc.w_dim);
        for _ in 0..b {
            dirs.extend(sample_direction(directions, &mut rng));
        }
        let dirs = Tensor::new(vec![b, tc.w_dim], dirs)?;

        let mut d_loss = 0.0;
        if cfg.lambda_gan > 0.0 {
            let fake = synthesize_batch(&student, &w, &ForwardOptions::default())?;
            let real = blob_batch(cfg.seed, (step * b) as u64, b, res);
            let (dl, r1) = disc_step(&mut disc, &mut opt_d, &real, &fake, step, cfg)?;
            d_loss = dl;
            last_r1 = r1.unwrap_or(last_r1);
        }

        let targets = TeacherTargets::compute(teacher, w, dirs, cfg)?;
        let (terms, grads) = student_objective(&student, &disc, &targets, cfg)?;
        if !grads.is_empty() {
            apply_generator(&mut opt_g, &mut student, &grads);
        }

        let done = step + 1;
        guard.check(
            done,
            &[("total loss", terms.total), ("d_loss", d_loss), ("r1", last_r1)],
            &student,
            &disc,
        )?;
        logger.record(
            done,
            done == cfg.iterations,
            LogRecord {
                step: done,
                g_loss: terms.gan,
                d_loss,
                rgb: terms.rgb,
                ld: terms.ld,
                r1: last_r1,
                wall_ms: 0,
            },
        )?;
        guard.checkpoint(done, &student, &disc)?;
    }
    Ok(TrainOutcome {
        generator: student,
        disc,
        history: logger.history,
    })
}
