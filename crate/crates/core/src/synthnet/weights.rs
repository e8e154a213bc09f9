use std::collections::BTreeMap;

use super::{GeneratorConfig, SynthError};
use crate::rng;
use crate::tensor::Tensor;

/// Role of a tensor inside the generator, used for initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Weight { fan_in: usize },
    Bias,
    AffineBias,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
}

pub fn mapping_weight(i: usize) -> String {
    format!("mapping.{i}.weight")
}
pub fn mapping_bias(i: usize) -> String {
    format!("mapping.{i}.bias")
}
pub const CONST: &str = "const";

/// Names of the per-block tensors for the block at resolution `r`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockNames {
    pub conv_weight: String,
    pub conv_bias: String,
    pub affine_weight: String,
    pub affine_bias: String,
    pub torgb_weight: String,
    pub torgb_bias: String,
    pub torgb_affine_weight: String,
    pub torgb_affine_bias: String,
}

impl BlockNames {
    pub fn new(resolution: usize) -> Self {
        let p = format!("block.{resolution}");
        Self {
            conv_weight: format!("{p}.conv.weight"),
            conv_bias: format!("{p}.conv.bias"),
            affine_weight: format!("{p}.affine.weight"),
            affine_bias: format!("{p}.affine.bias"),
            torgb_weight: format!("{p}.torgb.weight"),
            torgb_bias: format!("{p}.torgb.bias"),
            torgb_affine_weight: format!("{p}.torgb_affine.weight"),
            torgb_affine_bias: format!("{p}.torgb_affine.bias"),
        }
    }
}

/// Every tensor of a generator with `cfg`, in canonical (serialization) order.
pub fn tensor_specs(cfg: &GeneratorConfig) -> Vec<TensorSpec> {
    use TensorRole::*;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, role| specs.push(TensorSpec { name, shape, role });
    for i in 0..cfg.mapping_layers {
        let fan_in = cfg.mapping_in(i);
        push(mapping_weight(i), vec![cfg.w_dim, fan_in], Weight { fan_in });
        push(mapping_bias(i), vec![cfg.w_dim], Bias);
    }
    let r0 = cfg.base_resolution;
    push(CONST.into(), vec![cfg.block_in_channels(0), r0, r0], Constant);
    for (i, &res) in cfg.resolutions.iter().enumerate() {
        let n = BlockNames::new(res);
        let (c_in, c_out) = (cfg.block_in_channels(i), cfg.block_out_channels(i));
        push(n.affine_weight, vec![c_in, cfg.w_dim], Weight { fan_in: cfg.w_dim });
        push(n.affine_bias, vec![c_in], AffineBias);
        push(n.conv_weight, vec![c_out, c_in, 3, 3], Weight { fan_in: c_in * 9 });
        push(n.conv_bias, vec![c_out], Bias);
        push(n.torgb_affine_weight, vec![c_out, cfg.w_dim], Weight { fan_in: cfg.w_dim });
        push(n.torgb_affine_bias, vec![c_out], AffineBias);
        push(n.torgb_weight, vec![3, c_out, 1, 1], Weight { fan_in: c_out });
        push(n.torgb_bias, vec![3], Bias);
    }
    specs
}

/// All parameters of mapping network and synthesis network, keyed by
/// canonical name.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights {
    config: GeneratorConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl GeneratorWeights {
    /// Checks every canonical tensor is present with the expected shape and
    /// that no extra tensors are supplied.
    pub fn from_tensors(config: GeneratorConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self, SynthError> {
        config.validate()?;
        let specs = tensor_specs(&config);
        let mut ordered = BTreeMap::new();
        for spec in &specs {
            let t = tensors
                .remove(&spec.name)
                .ok_or_else(|| SynthError::MissingTensor(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(SynthError::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
            ordered.insert(spec.name.clone(), t);
        }
        if let Some(extra) = tensors.into_keys().next() {
            return Err(SynthError::UnexpectedTensor(extra));
        }
        Ok(Self { config, tensors: ordered })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("generator has no tensor `{name}`"))
    }

    /// Replaces a tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) {
        let slot = self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("generator has no tensor `{name}`"));
        assert_eq!(slot.shape(), value.shape(), "shape change for `{name}`");
        *slot = value;
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("generator has no tensor `{name}`"))
    }

    /// Tensors in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (String, &Tensor)> + '_ {
        tensor_specs(&self.config).into_iter().map(move |s| {
            let t = &self.tensors[&s.name];
            (s.name, t)
        })
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn num_floats(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn bit_eq(&self, other: &GeneratorWeights) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .all(|(k, v)| other.tensors.get(k).is_some_and(|o| o.bit_eq(v)))
    }
}

/// Fresh generator: weights `N(0,1)/sqrt(fan_in)`, biases zero, style
/// affine biases one, constant input `N(0,1)`.
pub fn init_generator(config: &GeneratorConfig, seed: u64) -> Result<GeneratorWeights, SynthError> {
    config.validate()?;
    let mut rng = rng::stream(seed, rng::ids::INIT);
    let mut tensors = BTreeMap::new();
    for spec in tensor_specs(config) {
        let t = match spec.role {
            TensorRole::Weight { fan_in } => {
                let scale = 1.0 / (fan_in as f64).sqrt();
                rng::normal_tensor(&spec.shape, &mut rng).map(|v| v * scale)
            }
            TensorRole::Bias => Tensor::zeros(&spec.shape),
            TensorRole::AffineBias => Tensor::full(&spec.shape, 1.0),
            TensorRole::Constant => rng::normal_tensor(&spec.shape, &mut rng),
        };
        tensors.insert(spec.name, t);
    }
    GeneratorWeights::from_tensors(config.clone(), tensors)
}
