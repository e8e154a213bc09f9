//! Parameter and FLOP accounting.
//!
//! FLOPs are `2 × multiply-accumulates` of the dense layers (mapping MLP,
//! style affines, convolutions and toRGB) for one synthesized image.
//! Element-wise work (modulation, demodulation, bias, activation,
//! upsampling) is not counted.

use super::weights::tensor_specs;
use super::GeneratorConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ParamBreakdown {
    pub mapping: u64,
    pub constant: u64,
    pub synthesis: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.mapping + self.constant + self.synthesis
    }
}

pub fn param_breakdown(cfg: &GeneratorConfig) -> ParamBreakdown {
    let mut b = ParamBreakdown {
        mapping: 0,
        constant: 0,
        synthesis: 0,
    };
    for s in tensor_specs(cfg) {
        let n: u64 = s.shape.iter().map(|&d| d as u64).product();
        if s.name.starts_with("mapping.") {
            b.mapping += n;
        } else if s.name == super::weights::CONST {
            b.constant += n;
        } else {
            b.synthesis += n;
        }
    }
    b
}

/// Total parameter count, including the learned constant.
pub fn count_params(cfg: &GeneratorConfig) -> u64 {
    param_breakdown(cfg).total()
}

pub fn conv_flops(c_in: usize, c_out: usize, k: usize, h: usize, w: usize) -> u64 {
    2 * (c_in * c_out * k * k * h * w) as u64
}

pub fn linear_flops(fan_in: usize, fan_out: usize) -> u64 {
    2 * (fan_in * fan_out) as u64
}

pub fn count_flops(cfg: &GeneratorConfig) -> u64 {
    let mut total = 0;
    for i in 0..cfg.mapping_layers {
        total += linear_flops(cfg.mapping_in(i), cfg.w_dim);
    }
    for (i, &res) in cfg.resolutions.iter().enumerate() {
        let (c_in, c_out) = (cfg.block_in_channels(i), cfg.block_out_channels(i));
        total += linear_flops(cfg.w_dim, c_in);
        total += conv_flops(c_in, c_out, 3, res, res);
        total += linear_flops(cfg.w_dim, c_out);
        total += conv_flops(c_out, 3, 1, res, res);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_linear_layer_params() {
        let cfg = GeneratorConfig {
            mapping_layers: 1,
            ..Default::default()
        };
        assert_eq!(param_breakdown(&cfg).mapping, 64 * 64 + 64);
    }

    #[test]
    fn single_conv_flops() {
        assert_eq!(conv_flops(2, 4, 3, 8, 8), 9216);
    }

    /// Default totals worked out by hand, block by block.
    #[test]
    fn default_totals_match_hand_computation() {
        let cfg = GeneratorConfig::default();
        // mapping: 2 × (64·64 + 64)
        let mapping = 2 * (4096 + 64);
        // const 64·4·4
        let constant = 1024;
        // per block: affine (c_in·64 + c_in) + conv (c_out·c_in·9 + c_out)
        //            + torgb affine (c_out·64 + c_out) + torgb (3·c_out + 3)
        let block = |ci: u64, co: u64| ci * 65 + co * ci * 9 + co + co * 65 + 3 * co + 3;
        let synthesis = block(64, 64) + block(64, 64) + block(64, 32) + block(32, 16);
        let b = param_breakdown(&cfg);
        assert_eq!((b.mapping, b.constant, b.synthesis), (mapping, constant, synthesis));
        assert_eq!(count_params(&cfg), 8320 + 1024 + 45443 + 45443 + 24803 + 7795);
        assert_eq!(count_params(&cfg), 132_828);

        // FLOPs: 2·MACs
        let macs: u64 = 2 * 64 * 64
            + (64 * 64 + 64 * 64 * 9 * 16 + 64 * 64 + 3 * 64 * 16)
            + (64 * 64 + 64 * 64 * 9 * 64 + 64 * 64 + 3 * 64 * 64)
            + (64 * 64 + 32 * 64 * 9 * 256 + 64 * 32 + 3 * 32 * 256)
            + (64 * 32 + 16 * 32 * 9 * 1024 + 64 * 16 + 3 * 16 * 1024);
        assert_eq!(count_flops(&cfg), 2 * macs);
        assert_eq!(count_flops(&cfg), 25_018_368);
    }
}
