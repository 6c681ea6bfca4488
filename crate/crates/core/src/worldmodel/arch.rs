//! Network architecture presets. Transition widths are per agent; a joint
//! model over `n` agents uses `n` times each width.

use serde::{Deserialize, Serialize};

use crate::autodiff::ConvGeom;
use crate::error::{Error, Result};
use crate::nn::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub act: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeconvSpec {
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Extra rows/columns appended to the output.
    pub out_pad: usize,
    pub act: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub image_size: usize,
    pub encoder: Vec<ConvSpec>,
    /// Channels of the `(1, 1, C)` decoder seed.
    pub decoder_seed: usize,
    pub decoder: Vec<DeconvSpec>,
    /// Deterministic state size per agent.
    pub deter: usize,
    /// Stochastic state size per agent.
    pub stoch: usize,
    /// Transition dense-layer width per agent.
    pub hidden: usize,
    /// Activation of every hidden dense layer.
    pub hidden_act: Activation,
    pub reward_hidden: usize,
    pub reward_layers: usize,
    pub reward_out_act: Activation,
    pub value_hidden: usize,
    pub value_layers: usize,
    pub value_out_act: Activation,
    pub action_hidden: usize,
    pub action_layers: usize,
    pub action_out_act: Activation,
    pub min_std: f64,
}

fn conv(out_c: usize, kernel: usize, stride: usize) -> ConvSpec {
    ConvSpec { out_c, kernel, stride, act: Activation::Relu }
}

fn deconv(out_c: usize, kernel: usize, stride: usize, out_pad: usize, act: Activation) -> DeconvSpec {
    DeconvSpec { out_c, kernel, stride, out_pad, act }
}

impl Architecture {
    /// 96×96 inputs, the full-size network.
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            image_size: 96,
            encoder: vec![conv(32, 4, 3), conv(64, 4, 2), conv(128, 4, 2), conv(256, 4, 2)],
            decoder_seed: 1024,
            decoder: vec![
                deconv(128, 5, 2, 0, Activation::Relu),
                deconv(64, 5, 2, 0, Activation::Relu),
                deconv(32, 6, 2, 1, Activation::Relu),
                deconv(3, 6, 3, 0, Activation::Relu),
            ],
            deter: 200,
            stoch: 30,
            hidden: 300,
            reward_hidden: 400,
            reward_layers: 2,
            hidden_act: Activation::Elu,
            reward_out_act: Activation::Elu,
            value_hidden: 400,
            value_layers: 3,
            value_out_act: Activation::Elu,
            action_hidden: 400,
            action_layers: 4,
            action_out_act: Activation::Elu,
            min_std: 0.1,
        }
    }

    /// 64×64 inputs with reduced widths, sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            image_size: 64,
            encoder: vec![conv(16, 8, 4), conv(32, 4, 2), conv(64, 4, 2)],
            decoder_seed: 256,
            decoder: vec![
                deconv(32, 6, 1, 0, Activation::Relu),
                deconv(16, 5, 2, 0, Activation::Relu),
                deconv(3, 8, 4, 0, Activation::None),
            ],
            deter: 64,
            stoch: 16,
            hidden: 64,
            reward_hidden: 64,
            reward_layers: 2,
            hidden_act: Activation::Elu,
            reward_out_act: Activation::None,
            value_hidden: 64,
            value_layers: 3,
            value_out_act: Activation::None,
            action_hidden: 64,
            action_layers: 4,
            action_out_act: Activation::None,
            min_std: 0.1,
        }
    }

    /// 16×16 inputs; small enough for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            image_size: 16,
            encoder: vec![conv(4, 4, 2), conv(8, 3, 2)],
            decoder_seed: 16,
            decoder: vec![
                deconv(8, 3, 1, 0, Activation::Relu),
                deconv(4, 4, 2, 0, Activation::Relu),
                deconv(3, 2, 2, 0, Activation::None),
            ],
            deter: 8,
            stoch: 4,
            hidden: 8,
            reward_hidden: 8,
            reward_layers: 2,
            hidden_act: Activation::Elu,
            reward_out_act: Activation::None,
            value_hidden: 8,
            value_layers: 3,
            value_out_act: Activation::None,
            action_hidden: 8,
            action_layers: 2,
            action_out_act: Activation::None,
            min_std: 0.1,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown architecture preset {other:?}"))),
        }
    }

    /// `(H, W, C)` after each encoder layer.
    pub fn encoder_shapes(&self) -> Vec<[usize; 3]> {
        let mut hwc = [self.image_size, self.image_size, 3];
        self.encoder
            .iter()
            .map(|l| {
                let g = ConvGeom::conv(1, hwc, l.out_c, l.kernel, l.stride);
                hwc = [g.out_h, g.out_w, g.out_c];
                hwc
            })
            .collect()
    }

    /// `(H, W, C)` after each decoder layer.
    pub fn decoder_shapes(&self) -> Vec<[usize; 3]> {
        let mut hwc = [1, 1, self.decoder_seed];
        self.decoder
            .iter()
            .map(|l| {
                let g = ConvGeom::deconv(1, hwc, l.out_c, l.kernel, l.stride, l.out_pad);
                hwc = [g.out_h, g.out_w, g.out_c];
                hwc
            })
            .collect()
    }

    /// Flattened per-head embedding length.
    pub fn embed(&self) -> usize {
        self.encoder_shapes().last().map(|s| s[0] * s[1] * s[2]).unwrap_or(self.image_size * self.image_size * 3)
    }

    /// Per-agent latent feature length (deterministic + stochastic).
    pub fn feature(&self) -> usize {
        self.deter + self.stoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(Error::Config(format!("{}: encoder and decoder need at least one layer", self.name)));
        }
        let mut hw = self.image_size;
        for l in &self.encoder {
            if hw < l.kernel || l.stride == 0 {
                return Err(Error::Config(format!("{}: encoder kernel {} exceeds input {hw}", self.name, l.kernel)));
            }
            hw = (hw - l.kernel) / l.stride + 1;
        }
        let out = self.decoder_shapes();
        let last = out.last().copied().unwrap_or([0; 3]);
        if last != [self.image_size, self.image_size, 3] {
            return Err(Error::Config(format!(
                "{}: decoder produces {:?}, expected {:?}",
                self.name,
                last,
                [self.image_size, self.image_size, 3]
            )));
        }
        if self.deter == 0 || self.stoch == 0 || self.hidden == 0 || !(self.min_std > 0.0) {
            return Err(Error::Config(format!("{}: state sizes and min_std must be positive", self.name)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_out(n: usize, k: usize, s: usize) -> usize {
        (n - k) / s + 1
    }

    fn deconv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
        (n - 1) * s + k + p
    }

    #[test]
    fn presets_are_consistent() {
        for a in [Architecture::full(), Architecture::desk(), Architecture::tiny()] {
            a.validate().unwrap();
        }
    }

    #[test]
    fn desk_shapes_follow_conv_arithmetic() {
        let a = Architecture::desk();
        let mut n = 64;
        let mut c = 3;
        for l in &a.encoder {
            n = conv_out(n, l.kernel, l.stride);
            c = l.out_c;
        }
        assert_eq!(a.embed(), n * n * c);
        assert_eq!(a.embed(), 256);
        let mut m = 1;
        for l in &a.decoder {
            m = deconv_out(m, l.kernel, l.stride, l.out_pad);
        }
        assert_eq!(m, 64);
    }

    #[test]
    fn full_embedding_is_1024() {
        assert_eq!(Architecture::full().embed(), 2 * 2 * 256);
        assert_eq!(Architecture::tiny().embed(), 3 * 3 * 8);
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(Architecture::by_name("huge").is_err());
    }
}
