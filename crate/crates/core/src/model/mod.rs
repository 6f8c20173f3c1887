//! Small CNN architectures and their forward pass.

mod checkpoint;

use std::fmt;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load, load_as, save, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{IMAGE_SIZE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tape, Tensor, Var};

/// Subtracted from every pixel before the first layer.
pub const INPUT_OFFSET: f32 = 0.5;

pub const ARCHITECTURES: [&str; 2] = ["mini3", "mini4"];

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
}

/// How a network was trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Standard,
    Adversarial,
    TextureRandomized,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Standard, Regime::Adversarial, Regime::TextureRandomized];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Standard => "standard",
            Regime::Adversarial => "adversarial",
            Regime::TextureRandomized => "texture-randomized",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Regime::Standard => 0,
            Regime::Adversarial => 1,
            Regime::TextureRandomized => 2,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.code() == c)
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub regime: Regime,
    pub seed: u64,
    pub epochs: u32,
}

/// A sequential CNN: layer list plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: String,
    pub layers: Vec<LayerSpec>,
    pub params: IndexMap<String, Tensor>,
    pub meta: NetworkMeta,
}

/// Options for a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Per-layer channel multipliers applied after that conv layer's ReLU.
    /// A zero entry ablates the channel.
    pub channel_scales: Vec<(String, Vec<f32>)>,
}

impl ForwardOptions {
    pub fn ablate(layer: &str, width: usize, channels: &[usize]) -> Self {
        let mut scale = vec![1.0; width];
        for &c in channels {
            scale[c] = 0.0;
        }
        Self {
            channel_scales: vec![(layer.to_string(), scale)],
        }
    }
}

/// Handles produced by a traced forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub logits: Var,
    /// Post-ReLU output of every conv layer, in order.
    pub activations: Vec<(String, Var)>,
}

fn conv(name: &str, cin: usize, cout: usize, kernel: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv {
        name: name.into(),
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride: 1,
        padding,
    }
}

/// Layer list for a named architecture.
pub fn arch_layers(arch: &str) -> Result<Vec<LayerSpec>> {
    let mut layers = vec![
        conv("conv1", 3, 16, 5, 2),
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        conv("conv2", 16, 32, 3, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        conv("conv3", 32, 64, 3, 1),
        LayerSpec::Relu,
    ];
    match arch {
        "mini3" => {}
        "mini4" => layers.extend([conv("conv4", 64, 64, 3, 1), LayerSpec::Relu]),
        other => {
            return Err(Error::Config(format!(
                "unknown architecture `{other}`; valid names: {}",
                ARCHITECTURES.join(", ")
            )))
        }
    }
    layers.extend([
        LayerSpec::GlobalAvgPool,
        LayerSpec::Linear {
            name: "fc".into(),
            in_features: 64,
            out_features: NUM_CLASSES,
        },
    ]);
    Ok(layers)
}

/// Expected parameter shapes, in declaration order.
pub fn param_shapes(layers: &[LayerSpec]) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for l in layers {
        match l {
            LayerSpec::Conv {
                name,
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                out.push((format!("{name}.weight"), vec![*out_channels, *in_channels, *kernel, *kernel]));
                out.push((format!("{name}.bias"), vec![*out_channels]));
            }
            LayerSpec::Linear {
                name,
                in_features,
                out_features,
            } => {
                out.push((format!("{name}.weight"), vec![*out_features, *in_features]));
                out.push((format!("{name}.bias"), vec![*out_features]));
            }
            _ => {}
        }
    }
    out
}

/// Builds a network with fan-in-scaled uniform weights (±√(6/fan_in)) and
/// zero biases.
pub fn build(arch: &str, seed: u64) -> Result<Network> {
    let layers = arch_layers(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::new();
    for (name, shape) in param_shapes(&layers) {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())?
        };
        params.insert(name, t);
    }
    Ok(Network {
        arch: arch.to_string(),
        layers,
        params,
        meta: NetworkMeta {
            regime: Regime::Standard,
            seed,
            epochs: 0,
        },
    })
}

impl Network {
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    /// Names of the conv layers, in order.
    pub fn conv_layers(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { name, .. } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn last_conv(&self) -> String {
        self.conv_layers().pop().expect("every architecture has a conv layer")
    }

    /// Output channel count of a conv layer.
    pub fn layer_width(&self, layer: &str) -> Result<usize> {
        self.layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Conv { name, out_channels, .. } if name == layer => Some(*out_channels),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("no conv layer named `{layer}` in {}", self.arch)))
    }

    /// Places parameters on the tape; returns their handles in order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .values()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(trainable);
                t.zero_grad();
                tape.leaf(t)
            })
            .collect()
    }

    /// Runs the network on `input` (`[N,3,32,32]`) using parameter handles
    /// from [`Network::bind`].
    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: Var, opts: &ForwardOptions) -> Result<Trace> {
        let shape = tape.shape(input);
        if shape.len() != 4 || shape[1..] != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::Config(format!("network input must be [N,3,32,32], got {shape:?}")));
        }
        // Pixels are centred on mid-gray before the first convolution.
        let mut x = tape.shift(input, -INPUT_OFFSET);
        let mut p = params.iter().copied();
        let mut activations = Vec::new();
        let mut last_conv: Option<String> = None;
        for layer in &self.layers {
            x = match layer {
                LayerSpec::Conv { name, stride, padding, .. } => {
                    let (w, b) = (p.next().expect("weight"), p.next().expect("bias"));
                    last_conv = Some(name.clone());
                    tape.conv2d(x, w, b, *stride, *padding)?
                }
                LayerSpec::Relu => {
                    let mut y = tape.relu(x);
                    if let Some(name) = last_conv.take() {
                        if let Some((_, scale)) = opts.channel_scales.iter().find(|(l, _)| *l == name) {
                            y = tape.channel_scale(y, scale)?;
                        }
                        activations.push((name, y));
                    }
                    y
                }
                LayerSpec::MaxPool2 => tape.maxpool2(x)?,
                LayerSpec::GlobalAvgPool => tape.global_avg_pool(x)?,
                LayerSpec::Linear { .. } => {
                    let (w, b) = (p.next().expect("weight"), p.next().expect("bias"));
                    tape.linear(x, w, b)?
                }
            };
        }
        Ok(Trace { logits: x, activations })
    }

    /// Logits for a batch, without gradients.
    pub fn logits(&self, images: Tensor, opts: &ForwardOptions) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.leaf(images);
        let trace = self.forward(&mut tape, &params, x, opts)?;
        Ok(tape.take(trace.logits))
    }

    /// Top-1 predictions (ties to the lowest class index).
    pub fn predict(&self, images: Tensor, opts: &ForwardOptions) -> Result<Vec<usize>> {
        let logits = self.logits(images, opts)?;
        Ok(logits.data().chunks(NUM_CLASSES).map(argmax).collect())
    }

    /// Post-ReLU activations of one conv layer, `[N, C, h, w]`.
    pub fn activations(&self, images: Tensor, layer: &str) -> Result<Tensor> {
        self.layer_width(layer)?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.leaf(images);
        let trace = self.forward(&mut tape, &params, x, &ForwardOptions::default())?;
        let (_, v) = trace
            .activations
            .iter()
            .find(|(n, _)| n == layer)
            .expect("layer validated above");
        Ok(tape.take(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mini3_parameter_count() {
        let net = build("mini3", 0).unwrap();
        let expected = 5 * 5 * 3 * 16 + 16 + 3 * 3 * 16 * 32 + 32 + 3 * 3 * 32 * 64 + 64 + 64 * 8 + 8;
        assert_eq!(expected, 24_872);
        assert_eq!(net.param_count(), expected);
    }

    #[test]
    fn mini4_has_extra_conv() {
        let net = build("mini4", 0).unwrap();
        assert_eq!(net.conv_layers(), ["conv1", "conv2", "conv3", "conv4"]);
        assert_eq!(net.param_count(), 24_872 + 3 * 3 * 64 * 64 + 64);
    }

    #[test]
    fn unknown_arch_lists_valid_names() {
        let err = build("resnet", 0).unwrap_err().to_string();
        assert!(err.contains("mini3") && err.contains("mini4"), "{err}");
    }

    #[test]
    fn mid_gray_input_gives_equal_logits() {
        let net = build("mini3", 1).unwrap();
        let gray = Tensor::full(&[2, 3, 32, 32], INPUT_OFFSET);
        let logits = net.logits(gray, &ForwardOptions::default()).unwrap();
        assert_eq!(logits.shape(), &[2, 8]);
        assert!(logits.data().iter().all(|&v| v == logits.data()[0]));
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(build("mini3", 4).unwrap(), build("mini3", 4).unwrap());
        assert_ne!(build("mini3", 4).unwrap(), build("mini3", 5).unwrap());
        let net = build("mini3", 4).unwrap();
        let bound = (6.0f32 / 75.0).sqrt();
        assert!(net.param("conv1.weight").data().iter().all(|v| v.abs() <= bound));
        assert!(net.param("conv1.bias").data().iter().all(|&v| v == 0.0));
    }
}
