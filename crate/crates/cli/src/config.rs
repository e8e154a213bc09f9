//! Flat pipeline configuration: defaults, then the `--config` file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use dcp_core::distiller::DistillConfig;
use dcp_core::{DiscConfig, GeneratorConfig, PruneMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    SSigma,
    SMu,
    Random,
}

impl From<ModeArg> for PruneMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::SSigma => PruneMode::SSigma,
            ModeArg::SMu => PruneMode::SMu,
            ModeArg::Random => PruneMode::Random,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DirectionArg {
    Pca,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,

    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub resolutions: Vec<usize>,
    pub channels_per_resolution: Vec<usize>,
    pub noise_enabled: bool,
    pub psi: f64,

    pub disc_channels: Vec<usize>,

    pub direction_mode: DirectionArg,
    /// Principal components kept; `min(32, w_dim)` when unset.
    pub n_components: Option<usize>,
    pub n_w_samples: usize,

    pub alpha: f64,
    pub n_directions: usize,
    pub n_latents: usize,
    pub workers: usize,

    pub ratio: f64,
    pub mode: ModeArg,

    /// Training steps; 10,000 for the teacher and 5,000 for distillation
    /// when unset.
    pub steps: Option<usize>,
    pub lambda_gan: f64,
    pub lambda_rgb: f64,
    pub lambda_lpips: f64,
    pub lambda_ld: f64,
    pub ld_alpha: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub batch_size: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,

    pub n_eval: usize,

    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
    pub directions: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let d = DistillConfig::default();
        let s = dcp_core::ScoringConfig::default();
        Self {
            seed: 0,
            z_dim: g.z_dim,
            w_dim: g.w_dim,
            mapping_layers: g.mapping_layers,
            resolutions: g.resolutions,
            channels_per_resolution: g.channels_per_resolution,
            noise_enabled: g.noise_enabled,
            psi: g.truncation_psi,
            disc_channels: DiscConfig::default().channels.to_vec(),
            direction_mode: DirectionArg::Pca,
            n_components: None,
            n_w_samples: dcp_core::latentdir::DEFAULT_SAMPLES,
            alpha: s.alpha,
            n_directions: s.n_directions,
            n_latents: s.n_latents,
            workers: 1,
            ratio: 0.7,
            mode: ModeArg::SSigma,
            steps: None,
            lambda_gan: d.lambda_gan,
            lambda_rgb: d.lambda_rgb,
            lambda_lpips: d.lambda_lpips,
            lambda_ld: d.lambda_ld,
            ld_alpha: d.ld_alpha,
            learning_rate: d.learning_rate,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            r1_gamma: d.r1_gamma,
            r1_interval: d.r1_interval,
            batch_size: d.batch_size,
            log_every: 100,
            checkpoint_every: 1000,
            n_eval: 1000,
            teacher: None,
            student: None,
            directions: None,
            scores: None,
            plan: None,
            out: None,
        }
    }
}

/// Command-line overrides; one flag per configuration key.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// Flat TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub student: Option<PathBuf>,
    #[arg(long)]
    pub directions: Option<PathBuf>,
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Fraction of channels removed per feature map.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub n_directions: Option<usize>,
    #[arg(long)]
    pub n_latents: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Truncation strength for evaluation samples.
    #[arg(long)]
    pub psi: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,

    #[arg(long, hide = true)]
    pub z_dim: Option<usize>,
    #[arg(long, hide = true)]
    pub w_dim: Option<usize>,
    #[arg(long, hide = true)]
    pub mapping_layers: Option<usize>,
    #[arg(long, hide = true, value_delimiter = ',')]
    pub resolutions: Option<Vec<usize>>,
    #[arg(long, hide = true, value_delimiter = ',')]
    pub channels_per_resolution: Option<Vec<usize>>,
    #[arg(long, hide = true)]
    pub noise_enabled: Option<bool>,
    #[arg(long, hide = true, value_delimiter = ',')]
    pub disc_channels: Option<Vec<usize>>,
    #[arg(long, hide = true, value_enum)]
    pub direction_mode: Option<DirectionArg>,
    #[arg(long, hide = true)]
    pub n_components: Option<usize>,
    #[arg(long, hide = true)]
    pub n_w_samples: Option<usize>,
    #[arg(long, hide = true)]
    pub lambda_gan: Option<f64>,
    #[arg(long, hide = true)]
    pub lambda_rgb: Option<f64>,
    #[arg(long, hide = true)]
    pub lambda_lpips: Option<f64>,
    #[arg(long, hide = true)]
    pub lambda_ld: Option<f64>,
    #[arg(long, hide = true)]
    pub ld_alpha: Option<f64>,
    #[arg(long, hide = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, hide = true)]
    pub adam_beta1: Option<f64>,
    #[arg(long, hide = true)]
    pub adam_beta2: Option<f64>,
    #[arg(long, hide = true)]
    pub r1_gamma: Option<f64>,
    #[arg(long, hide = true)]
    pub r1_interval: Option<usize>,
    #[arg(long, hide = true)]
    pub batch_size: Option<usize>,
    #[arg(long, hide = true)]
    pub log_every: Option<usize>,
    #[arg(long, hide = true)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, hide = true)]
    pub n_eval: Option<usize>,
}

macro_rules! apply {
    ($cfg:ident, $o:ident; opt: $($f:ident),*; plain: $($p:ident),*) => {
        $(if let Some(v) = $o.$f.clone() { $cfg.$f = Some(v); })*
        $(if let Some(v) = $o.$p.clone() { $cfg.$p = v; })*
    };
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        apply!(cfg, o;
            opt: teacher, student, directions, scores, plan, out, steps, n_components;
            plain: seed, ratio, mode, alpha, n_directions, n_latents, psi, workers, z_dim, w_dim, mapping_layers,
                resolutions, channels_per_resolution, noise_enabled, disc_channels, direction_mode, n_w_samples,
                lambda_gan, lambda_rgb, lambda_lpips, lambda_ld, ld_alpha, learning_rate, adam_beta1, adam_beta2,
                r1_gamma, r1_interval, batch_size, log_every, checkpoint_every, n_eval);
        Ok(cfg)
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        let g = GeneratorConfig {
            z_dim: self.z_dim,
            w_dim: self.w_dim,
            mapping_layers: self.mapping_layers,
            resolutions: self.resolutions.clone(),
            channels_per_resolution: self.channels_per_resolution.clone(),
            noise_enabled: self.noise_enabled,
            truncation_psi: self.psi,
            ..GeneratorConfig::default()
        };
        g.validate()?;
        Ok(g)
    }

    pub fn disc(&self, resolution: usize) -> Result<DiscConfig> {
        let Ok(channels) = <[usize; 3]>::try_from(self.disc_channels.as_slice()) else {
            bail!("disc_channels must list exactly 3 widths, got {:?}", self.disc_channels);
        };
        if channels.contains(&0) {
            bail!("disc_channels must be positive");
        }
        Ok(DiscConfig { channels, resolution })
    }

    pub fn distill(&self, default_steps: usize) -> Result<DistillConfig> {
        let d = DistillConfig {
            lambda_gan: self.lambda_gan,
            lambda_rgb: self.lambda_rgb,
            lambda_lpips: self.lambda_lpips,
            lambda_ld: self.lambda_ld,
            ld_alpha: self.ld_alpha,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            r1_gamma: self.r1_gamma,
            r1_interval: self.r1_interval,
            batch_size: self.batch_size,
            iterations: self.steps.unwrap_or(default_steps),
            seed: self.seed,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn scoring(&self, mode: dcp_core::DirectionMode) -> dcp_core::ScoringConfig {
        dcp_core::ScoringConfig {
            alpha: self.alpha,
            n_directions: self.n_directions,
            n_latents: self.n_latents,
            seed: self.seed,
            direction_mode: mode,
        }
    }
}

/// Existing input path for `key`, or an error naming the missing flag.
pub fn input<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let Some(p) = path else { bail!("--{key} is required") };
    if !p.exists() {
        bail!("--{key} {}: no such file", p.display());
    }
    Ok(p)
}

/// Output path for `--out`, creating its directory.
pub fn output(path: &Option<PathBuf>) -> Result<&Path> {
    let Some(p) = path else { bail!("--out is required") };
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(p)
}

/// `base` with `suffix` appended to its file name.
pub fn sibling(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_library_defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.generator().unwrap(), GeneratorConfig::default());
        assert_eq!(c.distill(5_000).unwrap(), DistillConfig::default());
    }

    #[test]
    fn file_then_flags() {
        let c = PipelineConfig::from_toml("seed = 4\nalpha = 2.5\nchannels_per_resolution = [8, 8, 4, 2]\nmode = \"random\"\n")
            .unwrap();
        assert_eq!((c.seed, c.alpha, c.mode), (4, 2.5, ModeArg::Random));
        assert_eq!(c.channels_per_resolution, vec![8, 8, 4, 2]);
        assert!(PipelineConfig::from_toml("bogus = 1\n").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 4\nalpha = 2.5\n").unwrap();
        let o = Overrides {
            config: Some(path),
            alpha: Some(0.0),
            lambda_ld: Some(1.0),
            ..Default::default()
        };
        let c = PipelineConfig::resolve(&o).unwrap();
        assert_eq!((c.seed, c.alpha, c.lambda_ld), (4, 0.0, 1.0));
    }

    #[test]
    fn sibling_appends() {
        assert_eq!(sibling(Path::new("a/b.dcpg"), ".log.jsonl"), PathBuf::from("a/b.dcpg.log.jsonl"));
    }
}
