use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Map;

use super::TrainError;
use crate::rng;
use crate::synthnet::{decode_container, encode_container, CheckpointError, LRELU_SLOPE};
use crate::tensor::{Graph, Result as TResult, Tensor, Var};

/// Three stride-2 3×3 convolutions followed by a linear head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub channels: [usize; 3],
    pub resolution: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            resolution: 32,
        }
    }
}

impl DiscConfig {
    /// Spatial size after the three stride-2 convolutions.
    pub fn final_size(&self) -> usize {
        let mut s = self.resolution;
        for _ in 0..3 {
            s = (s + 1) / 2;
        }
        s
    }

    fn specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut c_in = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![c, c_in, 3, 3], c_in * 9));
            out.push((format!("conv{i}.bias"), vec![c], 0));
            c_in = c;
        }
        let f = c_in * self.final_size() * self.final_size();
        out.push(("head.weight".into(), vec![1, f], f));
        out.push(("head.bias".into(), vec![1], 0));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: DiscConfig,
    params: BTreeMap<String, Tensor>,
}

impl Discriminator {
    /// Weights `N(0,1)/sqrt(fan_in)`, biases zero.
    pub fn init(config: DiscConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::ids::DISC_INIT);
        let params = config
            .specs()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let t = if fan_in == 0 {
                    Tensor::zeros(&shape)
                } else {
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    rng::normal_tensor(&shape, &mut r).map(|v| v * scale)
                };
                (name, t)
            })
            .collect();
        Self { config, params }
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        let slot = self.params.get_mut(name).unwrap_or_else(|| panic!("no discriminator tensor `{name}`"));
        assert_eq!(slot.shape(), value.shape());
        *slot = value;
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Registers the parameters on `g`.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(n, t)| (n.clone(), g.leaf(t.clone(), trainable)))
            .collect()
    }

    /// Logits `[B, 1]` for images `[B, 3, R, R]`.
    pub fn forward(&self, g: &mut Graph, vars: &BTreeMap<String, Var>, x: Var) -> TResult<Var> {
        let b = g.value(x).shape()[0];
        let mut h = x;
        for i in 0..3 {
            h = g.conv2d(h, vars[&format!("conv{i}.weight")], 2, 1)?;
            h = g.add_channel_bias(h, vars[&format!("conv{i}.bias")])?;
            h = g.leaky_relu(h, LRELU_SLOPE);
        }
        let f = g.value(h).numel() / b;
        let flat = g.reshape(h, &[b, f])?;
        g.linear(flat, vars["head.weight"], Some(vars["head.bias"]))
    }

    /// Logits for a batch, values only.
    pub fn logits(&self, images: &Tensor) -> TResult<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, &vars, x)?;
        Ok(g.value(y).data().to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut fields = Map::new();
        fields.insert("discriminator".into(), serde_json::to_value(&self.config).expect("config serializes"));
        encode_container(&fields, self.params.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let c = decode_container(bytes)?;
        let config: DiscConfig = serde_json::from_value(c.field("discriminator")?.clone())
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        let expected = Self::init(config.clone(), 0);
        let params = c.into_map();
        for (name, t) in &expected.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(CheckpointError::HeaderMismatch {
                        name: name.clone(),
                        reason: "missing or misshapen discriminator tensor".into(),
                    }
                    .into())
                }
            }
        }
        if params.len() != expected.params.len() {
            return Err(CheckpointError::BadHeader("unexpected discriminator tensors".into()).into());
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_logit_per_image() {
        let d = Discriminator::init(DiscConfig::default(), 0);
        let mut r = rng::stream(0, 0);
        let x = rng::normal_tensor(&[5, 3, 32, 32], &mut r);
        assert_eq!(d.logits(&x).unwrap().len(), 5);
        assert_eq!(d.get("head.weight").shape(), &[1, 64 * 16]);
    }

    #[test]
    fn round_trip() {
        let d = Discriminator::init(DiscConfig { channels: [4, 4, 8], resolution: 16 }, 2);
        assert_eq!(Discriminator::from_bytes(&d.to_bytes()).unwrap(), d);
    }
}
