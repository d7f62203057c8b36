//! Layer grammar and architecture presets.
//!
//! A model is written as a comma- or whitespace-separated list of layers:
//! `conv(6,5,5) maxpool(2,2) flatten fc(120,relu) fc(10,softmax)`. Every
//! `conv` carries a fused ReLU.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::ImageShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv { out_channels: usize, kh: usize, kw: usize },
    MaxPool { ph: usize, pw: usize },
    Flatten,
    Fc { units: usize, activation: Activation },
}

impl LayerSpec {
    pub fn is_spatial(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::MaxPool { .. })
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Fc { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv { out_channels, kh, kw } => write!(f, "conv({out_channels},{kh},{kw})"),
            LayerSpec::MaxPool { ph, pw } => write!(f, "maxpool({ph},{pw})"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Fc { units, activation } => {
                let act = match activation {
                    Activation::Relu => "relu",
                    Activation::Softmax => "softmax",
                };
                write!(f, "fc({units},{act})")
            }
        }
    }
}

fn parse_count(s: &str, layer: &str) -> Result<usize> {
    let v: usize = s
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{layer}`: `{s}` is not a count")))?;
    if v == 0 {
        return Err(Error::Config(format!("`{layer}`: extents must be positive")));
    }
    Ok(v)
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let lower = s.to_ascii_lowercase();
        let (name, args) = match lower.find('(') {
            Some(open) => {
                let close = lower
                    .strip_suffix(')')
                    .ok_or_else(|| Error::Config(format!("`{s}`: missing `)`")))?;
                (&lower[..open], close[open + 1..].split(',').map(str::trim).collect::<Vec<_>>())
            }
            None => (lower.as_str(), Vec::new()),
        };
        match (name, args.as_slice()) {
            ("conv", [c, h, w]) => Ok(LayerSpec::Conv {
                out_channels: parse_count(c, s)?,
                kh: parse_count(h, s)?,
                kw: parse_count(w, s)?,
            }),
            ("maxpool", [h, w]) => Ok(LayerSpec::MaxPool {
                ph: parse_count(h, s)?,
                pw: parse_count(w, s)?,
            }),
            ("flatten", []) => Ok(LayerSpec::Flatten),
            ("fc", [u, act]) => {
                let activation = match *act {
                    "relu" => Activation::Relu,
                    "softmax" => Activation::Softmax,
                    other => return Err(Error::Config(format!("`{s}`: unknown activation `{other}`"))),
                };
                Ok(LayerSpec::Fc {
                    units: parse_count(u, s)?,
                    activation,
                })
            }
            _ => Err(Error::Config(format!("cannot parse layer `{s}`"))),
        }
    }
}

/// Splits a layer list on commas and whitespace outside parentheses.
pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => {
                depth += 1;
                cur.push(ch);
            }
            ')' => {
                depth -= 1;
                cur.push(ch);
            }
            ',' | ';' if depth == 0 => {
                if !cur.trim().is_empty() {
                    out.push(cur.trim().parse()?);
                }
                cur.clear();
            }
            c if c.is_whitespace() && depth == 0 => {
                if !cur.trim().is_empty() {
                    out.push(cur.trim().parse()?);
                }
                cur.clear();
            }
            c if c.is_whitespace() => {}
            _ => cur.push(ch),
        }
    }
    if depth != 0 {
        return Err(Error::Config(format!("unbalanced parentheses in `{s}`")));
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().parse()?);
    }
    Ok(out)
}

/// A layer stack together with the input it is built for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    pub input: ImageShape,
}

/// Intermediate activation extents while walking a layer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Map(ImageShape),
    Flat(usize),
}

impl ActShape {
    pub fn flat_width(&self) -> usize {
        match self {
            ActShape::Map(s) => s.len(),
            ActShape::Flat(d) => *d,
        }
    }
}

impl ModelConfig {
    pub fn new(layers: Vec<LayerSpec>, input: ImageShape) -> Self {
        Self { layers, input }
    }

    pub fn parse(layers: &str, input: ImageShape) -> Result<Self> {
        let cfg = Self::new(parse_layers(layers)?, input);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Table-style presets: `mma` and `mmb` on 1x28x28, `cm` on 3x32x32,
    /// and `tiny`, a small stack sized for 1x24x24 synthetic data.
    pub fn preset(name: &str) -> Result<Self> {
        let (layers, input) = match name.to_ascii_lowercase().as_str() {
            "mma" => (
                "conv(6,5,5) maxpool(2,2) conv(16,5,5) maxpool(2,2) flatten fc(120,relu) fc(84,relu) fc(10,softmax)",
                ImageShape::new(1, 28, 28),
            ),
            "mmb" => (
                "conv(32,3,3) conv(32,3,3) maxpool(2,2) conv(64,3,3) conv(64,3,3) maxpool(2,2) flatten fc(200,relu) fc(10,softmax)",
                ImageShape::new(1, 28, 28),
            ),
            "cm" => (
                "conv(64,3,3) conv(64,3,3) maxpool(2,2) conv(128,3,3) conv(128,3,3) maxpool(2,2) flatten fc(256,relu) fc(256,relu) fc(10,softmax)",
                ImageShape::new(3, 32, 32),
            ),
            "tiny" => (
                "conv(6,5,5) maxpool(2,2) conv(12,3,3) maxpool(2,2) flatten fc(32,relu) fc(10,softmax)",
                ImageShape::new(1, 24, 24),
            ),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        Self::parse(layers, input)
    }

    /// Resolves a preset name or an explicit layer list.
    pub fn from_arch(arch: &str, input: Option<ImageShape>) -> Result<Self> {
        let mut cfg = match Self::preset(arch) {
            Ok(cfg) => cfg,
            Err(_) if arch.contains('(') => {
                let input = input.ok_or_else(|| {
                    Error::Config("an explicit layer list needs an input shape".into())
                })?;
                Self::new(parse_layers(arch)?, input)
            }
            Err(e) => return Err(e),
        };
        if let Some(input) = input {
            cfg.input = input;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the width of the final softmax layer.
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        match self.layers.last_mut() {
            Some(LayerSpec::Fc { units, .. }) => *units = classes,
            _ => return Err(Error::Config("model has no final fc layer".into())),
        }
        self.validate()?;
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Fc { units, .. }) => *units,
            _ => 0,
        }
    }

    pub fn layer_string(&self) -> String {
        self.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
    }

    /// Output extents of every layer, checking that the stack chains.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        if self.layers.is_empty() {
            return Err(Error::Config("empty layer list".into()));
        }
        if self.input.is_empty() {
            return Err(Error::Config(format!("degenerate input shape {}", self.input)));
        }
        let mut cur = ActShape::Map(self.input);
        let mut out = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (index, layer) in self.layers.iter().enumerate() {
            let fail = |reason: String| Error::LayerShape { index, reason };
            cur = match (*layer, cur) {
                (LayerSpec::Conv { out_channels, kh, kw }, ActShape::Map(s)) => {
                    if kh > s.height || kw > s.width {
                        return Err(fail(format!(
                            "{layer} kernel does not fit a {}x{} map",
                            s.height, s.width
                        )));
                    }
                    ActShape::Map(ImageShape::new(out_channels, s.height - kh + 1, s.width - kw + 1))
                }
                (LayerSpec::MaxPool { ph, pw }, ActShape::Map(s)) => {
                    if s.height % ph != 0 || s.width % pw != 0 {
                        return Err(fail(format!(
                            "{layer} does not divide a {}x{} map",
                            s.height, s.width
                        )));
                    }
                    ActShape::Map(ImageShape::new(s.channels, s.height / ph, s.width / pw))
                }
                (LayerSpec::Flatten, ActShape::Map(s)) => ActShape::Flat(s.len()),
                (LayerSpec::Fc { units, activation }, ActShape::Flat(_)) => {
                    if (activation == Activation::Softmax) != (index == last) {
                        return Err(fail("softmax must be exactly the final layer".into()));
                    }
                    ActShape::Flat(units)
                }
                (LayerSpec::Fc { .. }, ActShape::Map(_)) => {
                    return Err(fail("fc layer before flatten".into()))
                }
                (_, ActShape::Flat(_)) => {
                    return Err(fail(format!("{layer} after flatten")));
                }
            };
            out.push(cur);
        }
        if !matches!(self.layers[last], LayerSpec::Fc { activation: Activation::Softmax, .. }) {
            return Err(Error::LayerShape {
                index: last,
                reason: "last layer must be fc(..,softmax)".into(),
            });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Output map extents of each conv layer, in order.
    pub fn conv_output_shapes(&self) -> Result<Vec<ImageShape>> {
        Ok(self
            .layers
            .iter()
            .zip(self.shapes()?)
            .filter_map(|(l, s)| match (l, s) {
                (LayerSpec::Conv { .. }, ActShape::Map(m)) => Some(m),
                _ => None,
            })
            .collect())
    }

    /// Width entering the first fc layer.
    pub fn flattened_width(&self) -> Result<usize> {
        self.layers
            .iter()
            .zip(self.shapes()?)
            .find_map(|(l, s)| match (l, s) {
                (LayerSpec::Flatten, ActShape::Flat(d)) => Some(d),
                _ => None,
            })
            .ok_or_else(|| Error::Config("no flatten layer".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_chain_to_documented_widths() {
        let mma = ModelConfig::preset("mma").unwrap();
        assert_eq!(mma.flattened_width().unwrap(), 16 * 4 * 4);
        assert_eq!(
            mma.layers[0],
            LayerSpec::Conv { out_channels: 6, kh: 5, kw: 5 }
        );
        assert_eq!(mma.classes(), 10);
        let mmb = ModelConfig::preset("mmb").unwrap();
        assert_eq!(mmb.flattened_width().unwrap(), 64 * 4 * 4);
        let cm = ModelConfig::preset("cm").unwrap();
        assert_eq!(cm.flattened_width().unwrap(), 128 * 5 * 5);
        assert_eq!(cm.classes(), 10);
        assert_eq!(
            *cm.layers.last().unwrap(),
            LayerSpec::Fc { units: 10, activation: Activation::Softmax }
        );
        let tiny = ModelConfig::preset("tiny").unwrap();
        assert_eq!(tiny.flattened_width().unwrap(), 12 * 4 * 4);
    }

    #[test]
    fn layer_strings_round_trip() {
        let cfg = ModelConfig::preset("mmb").unwrap();
        let again = ModelConfig::parse(&cfg.layer_string(), cfg.input).unwrap();
        assert_eq!(again, cfg);
        let commas = parse_layers("conv(2,3,3), maxpool(2,2),flatten,fc(4, softmax)").unwrap();
        assert_eq!(commas.len(), 4);
    }

    #[test]
    fn empty_and_broken_stacks_are_rejected() {
        let input = ImageShape::new(1, 8, 8);
        assert!(ModelConfig::new(vec![], input).validate().is_err());
        let err = ModelConfig::parse("conv(2,3,3) maxpool(2,2) maxpool(2,2) flatten fc(3,softmax)", input)
            .unwrap_err();
        assert!(matches!(err, Error::LayerShape { index: 2, .. }), "{err}");
        assert!(ModelConfig::parse("conv(2,3,3) flatten fc(3,relu)", input).is_err());
        assert!(ModelConfig::parse("conv(2,3,3) fc(3,softmax)", input).is_err());
        assert!(ModelConfig::parse("flatten conv(2,3,3) fc(3,softmax)", input).is_err());
        assert!(ModelConfig::parse("conv(2,9,9) flatten fc(3,softmax)", input).is_err());
        assert!(ModelConfig::parse("conv(2,3) flatten fc(3,softmax)", input).is_err());
    }

    #[test]
    fn class_override() {
        let cfg = ModelConfig::preset("tiny").unwrap().with_classes(4).unwrap();
        assert_eq!(cfg.classes(), 4);
    }
}
