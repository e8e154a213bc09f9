use std::collections::BTreeMap;

use super::weights::{mapping_bias, mapping_weight, tensor_specs, BlockNames, CONST};
use super::{GeneratorConfig, GeneratorWeights, SynthError};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

pub const LRELU_SLOPE: f64 = 0.2;
pub const DEMOD_EPS: f64 = 1e-8;
/// Scale of the per-pixel Gaussian noise added when noise is enabled.
pub const NOISE_STRENGTH: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LatentSpace {
    Z,
    W,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub values: Tensor,
    pub space: LatentSpace,
}

impl LatentVector {
    pub fn new(values: Vec<f64>, space: LatentSpace) -> Result<Self, SynthError> {
        let n = values.len();
        let values = Tensor::new(vec![n], values)?;
        if !values.is_finite() {
            return Err(SynthError::NonFinite);
        }
        Ok(Self { values, space })
    }

    pub fn dim(&self) -> usize {
        self.values.numel()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.data()
    }
}

/// `w_mean + psi·(w − w_mean)`.
pub fn truncate(w: &LatentVector, w_mean: &LatentVector, psi: f64) -> LatentVector {
    assert!((0.0..=1.0).contains(&psi), "psi {psi} outside [0, 1]");
    assert_eq!(w.dim(), w_mean.dim());
    let data = w
        .as_slice()
        .iter()
        .zip(w_mean.as_slice())
        .map(|(&w, &m)| m + psi * (w - m))
        .collect();
    LatentVector {
        values: Tensor::new(vec![w.dim()], data).expect("same length"),
        space: LatentSpace::W,
    }
}

/// Generator tensors registered as leaves of a [`Graph`].
#[derive(Clone, Debug)]
pub struct GraphParams {
    vars: BTreeMap<String, Var>,
}

impl GraphParams {
    /// Registers every generator tensor; those for which `trainable`
    /// returns true require gradients.
    pub fn register(g: &mut Graph, weights: &GeneratorWeights, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = weights
            .iter()
            .map(|(name, t)| {
                let v = g.leaf(t.clone(), trainable(&name));
                (name, v)
            })
            .collect();
        Self { vars }
    }

    pub fn constant(g: &mut Graph, weights: &GeneratorWeights) -> Self {
        Self::register(g, weights, |_| false)
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Replaces the leaf used for `name`, e.g. with a perturbed copy.
    pub fn set(&mut self, name: &str, var: Var) {
        let slot = self.vars.get_mut(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
        *slot = var;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub demodulate: bool,
    /// Seed for per-pixel noise; used only when the config enables noise.
    pub noise_seed: Option<u64>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            demodulate: true,
            noise_seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SynthesisOutput {
    /// `[B, 3, H, W]` image.
    pub image: Var,
    /// `[B, C, H, W]` feature map of the last block, before its toRGB.
    pub features: Var,
}

/// `z [B, z_dim] → w [B, w_dim]`: linear layers with leaky ReLU between
/// them and none after the last.
pub fn mapping_forward(g: &mut Graph, p: &GraphParams, cfg: &GeneratorConfig, z: Var) -> Result<Var, SynthError> {
    check_width(g, z, cfg.z_dim, "z")?;
    let mut h = z;
    for i in 0..cfg.mapping_layers {
        h = g.linear(h, p.var(&mapping_weight(i)), Some(p.var(&mapping_bias(i))))?;
        if i + 1 < cfg.mapping_layers {
            h = g.leaky_relu(h, LRELU_SLOPE);
        }
    }
    Ok(h)
}

/// Skip-architecture synthesis from the learned constant.
pub fn synthesis_forward(
    g: &mut Graph,
    p: &GraphParams,
    cfg: &GeneratorConfig,
    w: Var,
    opts: &ForwardOptions,
) -> Result<SynthesisOutput, SynthError> {
    check_width(g, w, cfg.w_dim, "w")?;
    let batch = g.value(w).shape()[0];
    let mut noise_rng = match (cfg.noise_enabled, opts.noise_seed) {
        (true, Some(seed)) => Some(rng::stream(seed, rng::ids::NOISE)),
        _ => None,
    };
    let mut feat = g.broadcast_batch(p.var(CONST), batch)?;
    let mut rgb: Option<Var> = None;
    for (i, &res) in cfg.resolutions.iter().enumerate() {
        let n = BlockNames::new(res);
        if i > 0 {
            feat = g.upsample2x(feat)?;
        }
        let style = g.linear(w, p.var(&n.affine_weight), Some(p.var(&n.affine_bias)))?;
        let mut x = g.modulated_conv2d(feat, p.var(&n.conv_weight), style, opts.demodulate, DEMOD_EPS)?;
        if let Some(r) = noise_rng.as_mut() {
            let shape = g.value(x).shape().to_vec();
            let noise = rng::normal_tensor(&shape, r).map(|v| v * NOISE_STRENGTH);
            let nv = g.constant(noise);
            x = g.add(x, nv)?;
        }
        let x = g.add_channel_bias(x, p.var(&n.conv_bias))?;
        feat = g.leaky_relu(x, LRELU_SLOPE);

        let rgb_style = g.linear(w, p.var(&n.torgb_affine_weight), Some(p.var(&n.torgb_affine_bias)))?;
        let y = g.modulated_conv2d(feat, p.var(&n.torgb_weight), rgb_style, false, DEMOD_EPS)?;
        let y = g.add_channel_bias(y, p.var(&n.torgb_bias))?;
        rgb = Some(match rgb {
            None => y,
            Some(prev) => {
                let up = g.upsample2x(prev)?;
                g.add(up, y)?
            }
        });
    }
    Ok(SynthesisOutput {
        image: rgb.expect("at least one block"),
        features: feat,
    })
}

fn check_width(g: &Graph, v: Var, expected: usize, what: &'static str) -> Result<(), SynthError> {
    let shape = g.value(v).shape();
    if shape.len() != 2 || shape[1] != expected {
        return Err(SynthError::Dimension {
            what,
            expected,
            actual: shape.to_vec(),
        });
    }
    Ok(())
}

fn as_batch(v: &LatentVector, expected: usize, space: LatentSpace, what: &'static str) -> Result<Tensor, SynthError> {
    if v.space != space || v.dim() != expected {
        return Err(SynthError::Dimension {
            what,
            expected,
            actual: vec![v.dim()],
        });
    }
    Ok(v.values.reshape(&[1, expected])?)
}

/// `f: Z → W` for a batch `[B, z_dim]`.
pub fn map_batch(weights: &GeneratorWeights, z: &Tensor) -> Result<Tensor, SynthError> {
    let mut g = Graph::new();
    let p = GraphParams::constant(&mut g, weights);
    let zv = g.constant(z.clone());
    let w = mapping_forward(&mut g, &p, weights.config(), zv)?;
    Ok(g.value(w).clone())
}

pub fn map_latent(weights: &GeneratorWeights, z: &LatentVector) -> Result<LatentVector, SynthError> {
    let cfg = weights.config();
    let w = map_batch(weights, &as_batch(z, cfg.z_dim, LatentSpace::Z, "z")?)?;
    LatentVector::new(w.into_data(), LatentSpace::W)
}

/// `g: W → I` for a batch `[B, w_dim]`, returning `[B, 3, H, W]`.
pub fn synthesize_batch(weights: &GeneratorWeights, w: &Tensor, opts: &ForwardOptions) -> Result<Tensor, SynthError> {
    let mut g = Graph::new();
    let p = GraphParams::constant(&mut g, weights);
    let wv = g.constant(w.clone());
    let out = synthesis_forward(&mut g, &p, weights.config(), wv, opts)?;
    Ok(g.value(out.image).clone())
}

/// Single image `[3, H, W]` from one `w`; noise is never injected here.
pub fn synthesize(weights: &GeneratorWeights, w: &LatentVector) -> Result<Tensor, SynthError> {
    let cfg = weights.config();
    let img = synthesize_batch(weights, &as_batch(w, cfg.w_dim, LatentSpace::W, "w")?, &ForwardOptions::default())?;
    let r = cfg.output_resolution();
    Ok(img.reshape(&[3, r, r])?)
}

/// Names of every synthesis-side tensor (everything except the mapping MLP).
pub fn synthesis_tensor_names(cfg: &GeneratorConfig) -> Vec<String> {
    tensor_specs(cfg)
        .into_iter()
        .map(|s| s.name)
        .filter(|n| !n.starts_with("mapping."))
        .collect()
}
