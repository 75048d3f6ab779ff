use image::RgbImage;
use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Conv2d, Dense};
use super::network::{blocks_checksum, ConvBlock, Network, Trace};
use crate::error::{Error, Result};

/// Converts an RGB image to a `(3, H, W)` tensor centered on zero.
pub fn image_tensor(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0 - 0.5
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub channels: Vec<usize>,
    /// Blocks followed by 2×2 pooling; the last block usually is not.
    pub pools: Vec<bool>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            channels: vec![16, 32, 32],
            pools: vec![true, true, false],
        }
    }
}

/// Frozen convolutional feature extractor (`conv1`, `conv2`, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub blocks: Vec<ConvBlock>,
}

impl Extractor {
    pub fn new(config: &ExtractorConfig, seed: u64) -> Result<Self> {
        if config.channels.is_empty() || config.channels.len() != config.pools.len() {
            return Err(Error::Config(
                "extractor channels and pools must be non-empty and equally long".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = 3;
        let blocks = config
            .channels
            .iter()
            .zip(&config.pools)
            .enumerate()
            .map(|(i, (&out, &pool))| {
                let conv = Conv2d::new(in_ch, out, 3, &mut rng);
                in_ch = out;
                ConvBlock {
                    name: format!("conv{}", i + 1),
                    conv,
                    pool,
                }
            })
            .collect();
        Ok(Extractor { blocks })
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.conv.out_channels()).unwrap_or(3)
    }

    pub fn checksum(&self) -> String {
        blocks_checksum(&self.blocks)
    }

    pub fn last_layer(&self) -> &str {
        &self.blocks.last().expect("non-empty extractor").name
    }

    /// Output of the last block, after its pooling if any.
    pub fn features(&self, image: &Array3<f64>) -> Array3<f64> {
        let mut x = image.clone();
        for block in &self.blocks {
            let a = layers::relu(&block.conv.forward(&x).0);
            x = if block.pool { layers::max_pool2(&a).0 } else { a };
        }
        x
    }
}

/// Anything that can produce a named layer's activation for an image.
pub trait ActivationSource {
    fn activation(&self, image: &Array3<f64>, layer: &str) -> Result<Array3<f64>>;
}

impl ActivationSource for Extractor {
    fn activation(&self, image: &Array3<f64>, layer: &str) -> Result<Array3<f64>> {
        let idx = self
            .blocks
            .iter()
            .position(|b| b.name == layer)
            .ok_or_else(|| Error::Layer(format!("{layer:?} is not an extractor layer")))?;
        let mut x = image.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let a = layers::relu(&block.conv.forward(&x).0);
            if i == idx {
                return Ok(a);
            }
            x = if block.pool { layers::max_pool2(&a).0 } else { a };
        }
        unreachable!("layer index within blocks")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub frozen: bool,
}

/// Binary classifier: frozen extractor blocks, a trainable 1×1 conv block
/// (`head_conv`), global average pooling and a dense layer (`fc`).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    net: Network,
    frozen: usize,
}

pub const FC_LAYER: &str = "fc";

impl Model {
    pub fn new(extractor: &Extractor, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = extractor.blocks.clone();
        blocks.push(ConvBlock {
            name: "head_conv".into(),
            conv: Conv2d::new(extractor.out_channels(), hidden, 1, &mut rng),
            pool: false,
        });
        Model {
            net: Network {
                blocks,
                fc: Dense::new(hidden, 2, &mut rng),
            },
            frozen: extractor.blocks.len(),
        }
    }

    pub fn from_network(net: Network, frozen: usize) -> Result<Self> {
        if frozen > net.blocks.len() || net.fc.weight.nrows() != 2 {
            return Err(Error::Checkpoint(
                "network does not describe a binary classifier".into(),
            ));
        }
        Ok(Model { net, frozen })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub(crate) fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn frozen_blocks(&self) -> usize {
        self.frozen
    }

    pub fn extractor(&self) -> Extractor {
        Extractor {
            blocks: self.net.blocks[..self.frozen].to_vec(),
        }
    }

    pub fn extractor_checksum(&self) -> String {
        blocks_checksum(&self.net.blocks[..self.frozen])
    }

    pub fn head_checksum(&self) -> String {
        let mut blocks = self.net.blocks[self.frozen..].to_vec();
        blocks.push(ConvBlock {
            name: FC_LAYER.into(),
            conv: Conv2d {
                weight: self.net.fc.weight.clone(),
                bias: self.net.fc.bias.clone(),
                kernel: 1,
            },
            pool: false,
        });
        blocks_checksum(&blocks)
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out: Vec<LayerInfo> = self
            .net
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| LayerInfo {
                name: b.name.clone(),
                kind: LayerKind::Conv,
                frozen: i < self.frozen,
            })
            .collect();
        out.push(LayerInfo {
            name: FC_LAYER.into(),
            kind: LayerKind::Dense,
            frozen: false,
        });
        out
    }

    /// Block index of a named convolutional layer.
    pub fn conv_layer(&self, name: &str) -> Result<usize> {
        if name == FC_LAYER {
            return Err(Error::Layer(format!("{name:?} is not a convolutional layer")));
        }
        self.net
            .blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::Layer(format!("no layer named {name:?}")))
    }

    /// Class scores: the classifier outputs minus their mean. Softmax is
    /// unchanged, and each score measures evidence for its class relative to
    /// the other, free of any component shared by both outputs.
    pub fn logits(&self, image: &Array3<f64>) -> Array1<f64> {
        center(self.net.logits_from(0, image))
    }

    pub fn predict(&self, image: &Array3<f64>) -> u8 {
        argmax(&self.logits(image))
    }

    /// Extractor output; the head's input.
    pub fn features(&self, image: &Array3<f64>) -> Array3<f64> {
        let mut x = image.clone();
        for block in &self.net.blocks[..self.frozen] {
            let a = layers::relu(&block.conv.forward(&x).0);
            x = if block.pool { layers::max_pool2(&a).0 } else { a };
        }
        x
    }

    pub fn logits_from_features(&self, features: &Array3<f64>) -> Array1<f64> {
        center(self.net.logits_from(self.frozen, features))
    }

    pub(crate) fn trace_head(&self, features: &Array3<f64>) -> Trace {
        self.net.trace_from(self.frozen, features.clone())
    }

    /// Activation of `layer` and the gradient of the logit of `class`
    /// with respect to it.
    pub fn class_gradient(
        &self,
        image: &Array3<f64>,
        layer: &str,
        class: u8,
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        let idx = self.conv_layer(layer)?;
        if class > 1 {
            return Err(Error::Config(format!("class {class} outside {{0, 1}}")));
        }
        let trace = self.net.trace_from(0, image.clone());
        // Gradient of the centered score: one-hot minus its mean.
        let mut g = Array1::from_elem(2, -0.5);
        g[class as usize] = 0.5;
        let back = self.net.backward(&trace, &g, idx, false, Some(idx));
        let act = trace.activation(idx).expect("traced from 0").clone();
        Ok((act, back.tap.expect("tap requested")))
    }

    pub fn logits_from_activation(&self, layer: &str, activation: &Array3<f64>) -> Result<Array1<f64>> {
        let idx = self.conv_layer(layer)?;
        Ok(center(self.net.logits_from_activation(idx, activation)))
    }
}

impl ActivationSource for Model {
    fn activation(&self, image: &Array3<f64>, layer: &str) -> Result<Array3<f64>> {
        let idx = self.conv_layer(layer)?;
        let trace = self.net.trace_from(0, image.clone());
        Ok(trace.activation(idx).expect("traced from 0").clone())
    }
}

fn center(logits: Array1<f64>) -> Array1<f64> {
    let m = logits.mean().unwrap_or(0.0);
    logits - m
}

pub fn argmax(logits: &Array1<f64>) -> u8 {
    // Ties go to class 0.
    if logits[1] > logits[0] {
        1
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn model() -> Model {
        let ex = Extractor::new(&ExtractorConfig::default(), 1).unwrap();
        Model::new(&ex, 6, 2)
    }

    fn random_image(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(-0.5..0.5))
    }

    #[test]
    fn layer_addressing() {
        let m = model();
        let names: Vec<_> = m.layers().into_iter().map(|l| l.name).collect();
        assert_eq!(names, ["conv1", "conv2", "conv3", "head_conv", "fc"]);
        assert_eq!(m.conv_layer("conv3").unwrap(), 2);
        assert!(matches!(m.conv_layer("fc"), Err(Error::Layer(_))));
        assert!(matches!(m.conv_layer("conv9"), Err(Error::Layer(_))));
    }

    #[test]
    fn paths_agree() {
        let m = model();
        let x = random_image(3);
        let direct = m.logits(&x);
        let via_features = m.logits_from_features(&m.features(&x));
        assert_eq!(direct, via_features);
        for layer in ["conv1", "conv2", "conv3", "head_conv"] {
            let act = m.activation(&x, layer).unwrap();
            let via_act = m.logits_from_activation(layer, &act).unwrap();
            for (a, b) in direct.iter().zip(via_act.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let ex = m.extractor();
        assert_eq!(ex.activation(&x, "conv2").unwrap(), m.activation(&x, "conv2").unwrap());
    }

    #[test]
    fn activations_are_deterministic() {
        let m = model();
        let x = random_image(4);
        assert_eq!(m.activation(&x, "conv3").unwrap(), m.activation(&x, "conv3").unwrap());
    }

    #[test]
    fn layer_gradient_matches_finite_differences() {
        let m = model();
        let x = random_image(5);
        for layer in ["conv1", "conv2", "conv3", "head_conv"] {
            let (act, grad) = m.class_gradient(&x, layer, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let eps = 1e-6;
            let mut probes = 0;
            while probes < 10 {
                let i = rng.random_range(0..act.len());
                // Zero entries can tie inside an all-zero pooling window,
                // where max pooling has no derivative.
                if act.as_slice().unwrap()[i] <= 0.0 {
                    continue;
                }
                probes += 1;
                let mut up = act.clone();
                let mut down = act.clone();
                up.as_slice_mut().unwrap()[i] += eps;
                down.as_slice_mut().unwrap()[i] -= eps;
                let fd = (m.logits_from_activation(layer, &up).unwrap()[1]
                    - m.logits_from_activation(layer, &down).unwrap()[1])
                    / (2.0 * eps);
                let an = grad.as_slice().unwrap()[i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{layer}: {fd} vs {an}");
            }
        }
    }
}
