use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Activation, LayerSpec, ModelConfig};
use crate::error::{Error, Result};
use crate::ops;
use crate::region::RegionMaskSet;
use crate::tensor::{ImageShape, Tensor};

#[derive(Clone, Debug)]
enum Layer {
    Conv { weight: Tensor, bias: Tensor },
    MaxPool { ph: usize, pw: usize },
    Flatten,
    Fc { weight: Tensor, bias: Tensor, activation: Activation },
}

#[derive(Clone, Debug)]
enum LayerCache {
    Conv { input: Tensor, pre: Tensor },
    MaxPool { input_shape: Vec<usize>, indices: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
    Fc { input: Tensor, pre: Option<Tensor> },
}

/// Weight and bias gradients of one parametric layer.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer gradients, `None` for layers without parameters.
pub type Gradients = Vec<Option<ParamGrads>>;

/// A feed-forward CNN built from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    cache: Option<Vec<LayerCache>>,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

impl Model {
    /// Builds a model with Glorot-uniform weights and zero biases.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let shapes = config.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = config.input.channels;
        let mut flat = 0;
        let mut layers = Vec::with_capacity(config.layers.len());
        for (spec, shape) in config.layers.iter().zip(&shapes) {
            let layer = match *spec {
                LayerSpec::Conv { out_channels, kh, kw } => {
                    let w = glorot(
                        &mut rng,
                        &[out_channels, channels, kh, kw],
                        channels * kh * kw,
                        out_channels * kh * kw,
                    );
                    channels = out_channels;
                    Layer::Conv { weight: w, bias: Tensor::zeros(&[out_channels]) }
                }
                LayerSpec::MaxPool { ph, pw } => Layer::MaxPool { ph, pw },
                LayerSpec::Flatten => {
                    flat = shape.flat_width();
                    Layer::Flatten
                }
                LayerSpec::Fc { units, activation } => {
                    let w = glorot(&mut rng, &[units, flat], flat, units);
                    flat = units;
                    Layer::Fc { weight: w, bias: Tensor::zeros(&[units]), activation }
                }
            };
            layers.push(layer);
        }
        Ok(Self { config: config.clone(), layers, cache: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_shape(&self) -> ImageShape {
        self.config.input
    }

    pub fn classes(&self) -> usize {
        self.config.classes()
    }

    /// Number of conv layers, i.e. the number of masks a region deletion needs.
    pub fn conv_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Conv { .. })).count()
    }

    /// Named parameter tensors in layer order (`layers.{i}.weight`, `layers.{i}.bias`).
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Conv { weight, bias } | Layer::Fc { weight, bias, .. } = layer {
                out.push((format!("layers.{i}.weight"), weight));
                out.push((format!("layers.{i}.bias"), bias));
            }
        }
        out
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let rest = name.strip_prefix("layers.")?;
        let (idx, which) = rest.split_once('.')?;
        let idx: usize = idx.parse().ok()?;
        match (self.layers.get_mut(idx)?, which) {
            (Layer::Conv { weight, .. } | Layer::Fc { weight, .. }, "weight") => Some(weight),
            (Layer::Conv { bias, .. } | Layer::Fc { bias, .. }, "bias") => Some(bias),
            _ => None,
        }
    }

    /// Replaces a parameter tensor; the shape must not change.
    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .parameter_mut(name)
            .ok_or_else(|| Error::HeaderMismatch(format!("model has no tensor `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::HeaderMismatch(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape4()?;
        let want = self.config.input;
        let check = |dim, expected, actual| {
            if expected != actual {
                Err(Error::ShapeMismatch { op: "model input", dim, expected, actual })
            } else {
                Ok(())
            }
        };
        check("channels", want.channels, s.channels)?;
        check("height", want.height, s.height)?;
        check("width", want.width, s.width)
    }

    fn check_mask(&self, mask: &RegionMaskSet) -> Result<()> {
        let shapes = self.config.conv_output_shapes()?;
        if mask.layers().len() != shapes.len() {
            return Err(Error::InvalidArgument(format!(
                "mask covers {} conv layers, model has {}",
                mask.layers().len(),
                shapes.len()
            )));
        }
        for (m, s) in mask.layers().iter().zip(&shapes) {
            if (m.height(), m.width()) != (s.height, s.width) {
                return Err(Error::InvalidArgument(format!(
                    "mask map {}x{} does not match conv output {}x{}",
                    m.height(),
                    m.width(),
                    s.height,
                    s.width
                )));
            }
        }
        Ok(())
    }

    /// Output of the final layer before softmax. With a mask, the listed
    /// conv output positions are set to zero (all channels) before ReLU.
    pub fn logits(&self, input: &Tensor, mask: Option<&RegionMaskSet>) -> Result<Tensor> {
        self.check_input(input)?;
        if let Some(m) = mask {
            self.check_mask(m)?;
        }
        let mut x = input.clone();
        let mut conv_index = 0;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { weight, bias } => {
                    let mut y = ops::conv2d_forward(&x, weight, bias)?;
                    if let Some(m) = mask {
                        m.layers()[conv_index].apply(&mut y)?;
                    }
                    conv_index += 1;
                    ops::relu_in_place(&mut y);
                    y
                }
                Layer::MaxPool { ph, pw } => ops::maxpool2d_forward(&x, *ph, *pw)?.0,
                Layer::Flatten => {
                    let b = x.shape()[0];
                    let d = x.len() / b.max(1);
                    x.reshape(vec![b, d])?
                }
                Layer::Fc { weight, bias, activation } => {
                    let mut y = ops::fc_forward(&x, weight, bias)?;
                    if *activation == Activation::Relu {
                        ops::relu_in_place(&mut y);
                    }
                    y
                }
            };
        }
        Ok(x)
    }

    /// Class probabilities for a `[B,C,H,W]` batch.
    pub fn forward(&self, input: &Tensor, mask: Option<&RegionMaskSet>) -> Result<Tensor> {
        ops::softmax(&self.logits(input, mask)?)
    }

    pub fn predict(&self, input: &Tensor, mask: Option<&RegionMaskSet>) -> Result<Vec<usize>> {
        let logits = self.logits(input, mask)?;
        let (_, u) = logits.dims2()?;
        Ok(logits
            .data()
            .chunks_exact(u)
            .map(|row| {
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Forward pass that keeps the activations needed by [`Model::backward`].
    /// Returns the pre-softmax logits.
    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { weight, bias } => {
                    let pre = ops::conv2d_forward(&x, weight, bias)?;
                    let out = ops::relu(&pre);
                    caches.push(LayerCache::Conv { input: x, pre });
                    out
                }
                Layer::MaxPool { ph, pw } => {
                    let (out, indices) = ops::maxpool2d_forward(&x, *ph, *pw)?;
                    caches.push(LayerCache::MaxPool { input_shape: x.shape().to_vec(), indices });
                    out
                }
                Layer::Flatten => {
                    let shape = x.shape().to_vec();
                    let b = shape[0];
                    let d = x.len() / b.max(1);
                    caches.push(LayerCache::Flatten { input_shape: shape });
                    x.reshape(vec![b, d])?
                }
                Layer::Fc { weight, bias, activation } => {
                    let pre = ops::fc_forward(&x, weight, bias)?;
                    if *activation == Activation::Relu {
                        let out = ops::relu(&pre);
                        caches.push(LayerCache::Fc { input: x, pre: Some(pre) });
                        out
                    } else {
                        caches.push(LayerCache::Fc { input: x, pre: None });
                        pre
                    }
                }
            };
        }
        self.cache = Some(caches);
        Ok(x)
    }

    /// Back-propagates a gradient with respect to the logits returned by the
    /// last [`Model::forward_train`]. Consumes the cached activations.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Gradients> {
        let caches = self.cache.take().ok_or(Error::MissingForwardCache)?;
        let mut grads: Gradients = vec![None; self.layers.len()];
        let mut g = grad_logits.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            g = match (layer, cache) {
                (Layer::Conv { weight, .. }, LayerCache::Conv { input, pre }) => {
                    let g_pre = ops::relu_backward(&pre, &g)?;
                    let cg = ops::conv2d_backward(&input, weight, &g_pre)?;
                    grads[i] = Some(ParamGrads { weight: cg.weight, bias: cg.bias });
                    cg.input
                }
                (Layer::MaxPool { .. }, LayerCache::MaxPool { input_shape, indices }) => {
                    ops::maxpool2d_backward(&g, &indices, &input_shape)?
                }
                (Layer::Flatten, LayerCache::Flatten { input_shape }) => g.reshape(input_shape)?,
                (Layer::Fc { weight, .. }, LayerCache::Fc { input, pre }) => {
                    let g_pre = match pre {
                        Some(pre) => ops::relu_backward(&pre, &g)?,
                        None => g,
                    };
                    let fg = ops::fc_backward(&input, weight, &g_pre)?;
                    grads[i] = Some(ParamGrads { weight: fg.weight, bias: fg.bias });
                    fg.input
                }
                _ => return Err(Error::MissingForwardCache),
            };
        }
        Ok(grads)
    }

    /// Plain SGD update over every parametric layer.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f32) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(Error::InvalidArgument("gradient list does not match layers".into()));
        }
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            match (layer, g) {
                (Layer::Conv { weight, bias } | Layer::Fc { weight, bias, .. }, Some(g)) => {
                    ops::sgd_step(weight, &g.weight, lr)?;
                    ops::sgd_step(bias, &g.bias, lr)?;
                }
                (Layer::Conv { .. } | Layer::Fc { .. }, None) => {
                    return Err(Error::InvalidArgument("missing gradient for a parametric layer".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Model {
        let cfg = ModelConfig::parse(
            "conv(2,3,3) maxpool(2,2) flatten fc(4,relu) fc(3,softmax)",
            ImageShape::new(1, 6, 6),
        )
        .unwrap();
        Model::build(&cfg, 3).unwrap()
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut m = toy();
        let err = m.backward(&Tensor::zeros(&[1, 3])).unwrap_err();
        assert!(matches!(err, Error::MissingForwardCache));
        m.forward_train(&Tensor::zeros(&[1, 1, 6, 6])).unwrap();
        m.backward(&Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(m.backward(&Tensor::zeros(&[1, 3])), Err(Error::MissingForwardCache)));
    }

    #[test]
    fn init_is_bounded_and_deterministic() {
        let a = toy();
        let b = toy();
        for ((na, ta), (_, tb)) in a.parameters().into_iter().zip(b.parameters()) {
            assert_eq!(ta, tb, "{na}");
        }
        let (_, w) = &a.parameters()[0];
        let limit = (6.0f32 / (9.0 + 18.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert!(a.parameters()[1].1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_input() {
        let m = toy();
        let err = m.forward(&Tensor::zeros(&[1, 1, 5, 6]), None).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = toy();
        let x = Tensor::new(vec![2, 1, 6, 6], (0..72).map(|v| v as f32 / 72.0).collect()).unwrap();
        let p = m.forward(&x, None).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let logits = m.forward_train_like(&x);
        assert_eq!(logits, m.logits(&x, None).unwrap());
    }

    impl Model {
        fn forward_train_like(&self, x: &Tensor) -> Tensor {
            let mut c = self.clone();
            c.forward_train(x).unwrap()
        }
    }

    #[test]
    fn zero_lr_step_leaves_parameters() {
        let mut m = toy();
        let before = m.clone();
        let x = Tensor::full(&[1, 1, 6, 6], 0.5);
        let logits = m.forward_train(&x).unwrap();
        let p = ops::softmax(&logits).unwrap();
        let g = ops::softmax_cross_entropy_backward(&p, &[1]).unwrap();
        let grads = m.backward(&g).unwrap();
        m.sgd_step(&grads, 0.0).unwrap();
        for ((_, a), (_, b)) in m.parameters().into_iter().zip(before.parameters()) {
            assert_eq!(a, b);
        }
    }
}
