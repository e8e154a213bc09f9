use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde_json::{json, Map, Value};

use dcp_core::distiller::{distill_student, train_teacher, TrainOptions};
use dcp_core::evalkit::{diversity_of, eval_latents, render, teacher_student_l1_at, EvalReport, Truncation};
use dcp_core::latentdir::{default_components, estimate_w_stats, pca_directions};
use dcp_core::scorer::accumulate_scores;
use dcp_core::surgeon::{apply_plan, build_plan};
use dcp_core::synthnet::{count_flops, count_params, load_checkpoint, read_container, save_checkpoint};
use dcp_core::{DirectionSet, Discriminator, GeneratorWeights, ScoreReport};

use crate::config::{input, output, sibling, DirectionArg, PipelineConfig};

fn load_generator(path: &Path) -> Result<GeneratorWeights> {
    let (w, _) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(w)
}

fn load_directions(path: &Path) -> Result<DirectionSet> {
    DirectionSet::load(path).with_context(|| format!("loading {}", path.display()))
}

fn train_options(cfg: &PipelineConfig, out: &Path) -> TrainOptions {
    TrainOptions {
        log_path: Some(sibling(out, ".log.jsonl")),
        log_every: cfg.log_every,
        checkpoint_dir: (cfg.checkpoint_every > 0).then(|| sibling(out, ".checkpoints")),
        checkpoint_every: cfg.checkpoint_every,
        dump_dir: None,
    }
}

pub fn train_teacher_cmd(cfg: &PipelineConfig) -> Result<()> {
    let out = output(&cfg.out)?;
    let gen_cfg = cfg.generator()?;
    let dcfg = cfg.distill(10_000)?;
    let disc = Discriminator::init(cfg.disc(gen_cfg.output_resolution())?, cfg.seed);
    info!("training teacher for {} steps", dcfg.iterations);
    let outcome = train_teacher(&gen_cfg, disc, dcfg.iterations, &dcfg, &train_options(cfg, out))?;
    save_checkpoint(&outcome.generator, &gen_cfg, out)?;
    info!("teacher written to {}", out.display());
    Ok(())
}

pub fn directions_cmd(cfg: &PipelineConfig) -> Result<()> {
    let teacher = load_generator(input(&cfg.teacher, "teacher")?)?;
    let out = output(&cfg.out)?;
    let (mean, samples) = estimate_w_stats(&teacher, cfg.n_w_samples, cfg.seed)?;
    let ds = match cfg.direction_mode {
        DirectionArg::Random => DirectionSet::random(mean),
        DirectionArg::Pca => {
            let v = cfg.n_components.unwrap_or_else(|| default_components(teacher.config().w_dim));
            pca_directions(&samples, v)?
        }
    };
    ds.save(out)?;
    info!("{} directions ({}) written to {}", ds.len(), ds.mode().as_str(), out.display());
    Ok(())
}

pub fn score_cmd(cfg: &PipelineConfig) -> Result<()> {
    let teacher_path = input(&cfg.teacher, "teacher")?;
    let teacher = load_generator(teacher_path)?;
    let ds = load_directions(input(&cfg.directions, "directions")?)?;
    let out = output(&cfg.out)?;
    let scfg = cfg.scoring(ds.mode());
    info!(
        "scoring with alpha {}, {} latents x {} directions",
        scfg.alpha, scfg.n_latents, scfg.n_directions
    );
    let mut report = accumulate_scores(&teacher, &ds, &scfg, cfg.workers.max(1))?;
    let abs = std::fs::canonicalize(teacher_path)?;
    report.teacher = Some(abs.to_string_lossy().into_owned());
    report.save(out)?;
    Ok(())
}

pub fn prune_cmd(cfg: &PipelineConfig) -> Result<()> {
    let report = ScoreReport::load(input(&cfg.scores, "scores")?)?;
    let teacher_path = match (&cfg.teacher, &report.teacher) {
        (Some(_), _) => input(&cfg.teacher, "teacher")?.to_path_buf(),
        (None, Some(p)) => {
            let p = Path::new(p).to_path_buf();
            if !p.exists() {
                bail!("teacher {} recorded in the score report no longer exists; pass --teacher", p.display());
            }
            p
        }
        (None, None) => bail!("--teacher is required: the score report does not name its teacher"),
    };
    let teacher = load_generator(&teacher_path)?;
    let out = output(&cfg.out)?;
    let plan = build_plan(&report, cfg.ratio, cfg.mode.into(), cfg.seed)?;
    let (student, scfg) = apply_plan(&teacher, &plan)?;
    save_checkpoint(&student, &scfg, out)?;
    let plan_path = cfg.plan.clone().unwrap_or_else(|| sibling(out, ".plan.json"));
    plan.save(&plan_path)?;
    info!(
        "params {} -> {}, flops {} -> {}",
        count_params(teacher.config()),
        count_params(&scfg),
        count_flops(teacher.config()),
        count_flops(&scfg)
    );
    Ok(())
}

pub fn distill_cmd(cfg: &PipelineConfig) -> Result<()> {
    let teacher = load_generator(input(&cfg.teacher, "teacher")?)?;
    let student = load_generator(input(&cfg.student, "student")?)?;
    let ds = load_directions(input(&cfg.directions, "directions")?)?;
    let out = output(&cfg.out)?;
    let dcfg = cfg.distill(5_000)?;
    let disc = Discriminator::init(cfg.disc(student.config().output_resolution())?, cfg.seed);
    info!("distilling for {} steps", dcfg.iterations);
    let outcome = distill_student(&teacher, student, disc, &ds, &dcfg, &train_options(cfg, out))?;
    let gcfg = outcome.generator.config().clone();
    save_checkpoint(&outcome.generator, &gcfg, out)?;
    Ok(())
}

pub fn eval_cmd(cfg: &PipelineConfig) -> Result<String> {
    let teacher = load_generator(input(&cfg.teacher, "teacher")?)?;
    let student = match &cfg.student {
        Some(_) => load_generator(input(&cfg.student, "student")?)?,
        None => teacher.clone(),
    };
    let trunc = if cfg.psi < 1.0 {
        let w_mean = match &cfg.directions {
            Some(_) => load_directions(input(&cfg.directions, "directions")?)?.w_mean().to_vec(),
            None => estimate_w_stats(&teacher, cfg.n_w_samples, cfg.seed)?.0,
        };
        Some(Truncation { w_mean, psi: cfg.psi })
    } else {
        None
    };
    let n = cfg.n_eval;
    if n < 2 {
        bail!("n_eval must be at least 2");
    }
    let w = eval_latents(&teacher, n, cfg.seed, trunc.as_ref())?;
    let l1 = teacher_student_l1_at(&teacher, &student, &w, n)?;
    let div = diversity_of(&render(&student, &w)?)?;
    let report = EvalReport {
        teacher_student_l1: l1,
        min_nn_distance: div.min_nn_distance,
        avg_distance: div.avg_distance,
        n,
        seed: cfg.seed,
        teacher_params: count_params(teacher.config()),
        student_params: count_params(student.config()),
        teacher_flops: count_flops(teacher.config()),
        student_flops: count_flops(student.config()),
    };
    if cfg.out.is_some() {
        report.save(output(&cfg.out)?)?;
    }
    Ok(report.to_json())
}

pub fn inspect_cmd(path: &Path) -> Result<String> {
    if !path.exists() {
        bail!("{}: no such file", path.display());
    }
    let c = read_container(path).with_context(|| format!("reading {}", path.display()))?;
    let tensors: Vec<Value> = c
        .tensors
        .iter()
        .map(|(name, t)| json!({ "name": name, "shape": t.shape(), "numel": t.numel() }))
        .collect();
    let total: usize = c.tensors.iter().map(|(_, t)| t.numel()).sum();
    let mut header: Map<String, Value> = c.fields.clone();
    header.insert("tensors".into(), Value::Array(tensors));
    header.insert("total_values".into(), json!(total));
    dcp_core::json::to_canonical_string(&Value::Object(header), true).map_err(|e| anyhow!(e))
}
