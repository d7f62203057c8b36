//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use dscore::nn::{Activation, LayerSpec};
use dscore::{build_masks, ops, ImageShape, Model, ModelConfig, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// A small valid architecture with one or two conv layers.
pub fn random_tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    loop {
        let input = ImageShape::new(rng.gen_range(1..=2), rng.gen_range(8..=14), rng.gen_range(8..=14));
        let mut layers = Vec::new();
        for _ in 0..rng.gen_range(1..=2) {
            layers.push(LayerSpec::Conv { out_channels: rng.gen_range(1..=4), kh: rng.gen_range(2..=4), kw: rng.gen_range(2..=4) });
            if rng.gen_bool(0.5) {
                layers.push(LayerSpec::MaxPool { ph: 2, pw: 2 });
            }
        }
        layers.push(LayerSpec::Flatten);
        if rng.gen_bool(0.5) {
            layers.push(LayerSpec::Fc { units: rng.gen_range(3..=8), activation: Activation::Relu });
        }
        layers.push(LayerSpec::Fc { units: rng.gen_range(2..=5), activation: Activation::Softmax });
        let cfg = ModelConfig::new(layers, input);
        if cfg.validate().is_ok() {
            return cfg;
        }
    }
}

fn param(model: &Model, name: &str) -> Tensor {
    model.parameters().into_iter().find(|(n, _)| n == name).map(|(_, t)| t.clone()).unwrap()
}

/// Logits computed by chaining the public kernels, zeroing region `region`
/// of an `n x n` grid (floor boundaries) in every conv output before ReLU.
pub fn masked_logits_oracle(model: &Model, input: &Tensor, n: usize, region: usize) -> Tensor {
    let mut x = input.clone();
    for (i, spec) in model.config().layers.iter().enumerate() {
        x = match *spec {
            LayerSpec::Conv { .. } => {
                let mut y = ops::conv2d_forward(&x, &param(model, &format!("layers.{i}.weight")), &param(model, &format!("layers.{i}.bias"))).unwrap();
                let s = y.shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let (r, c) = ((region - 1) / n, (region - 1) % n);
                let rows = r * h / n..(r + 1) * h / n;
                let cols = c * w / n..(c + 1) * w / n;
                let data = y.data_mut();
                for plane in data.chunks_exact_mut(h * w) {
                    for yy in rows.clone() {
                        for xx in cols.clone() {
                            plane[yy * w + xx] = 0.0;
                        }
                    }
                }
                ops::relu(&y)
            }
            LayerSpec::MaxPool { ph, pw } => ops::maxpool2d_forward(&x, ph, pw).unwrap().0,
            LayerSpec::Flatten => {
                let b = x.shape()[0];
                let d = x.len() / b;
                x.reshape(vec![b, d]).unwrap()
            }
            LayerSpec::Fc { activation, .. } => {
                let y = ops::fc_forward(&x, &param(model, &format!("layers.{i}.weight")), &param(model, &format!("layers.{i}.bias"))).unwrap();
                if activation == Activation::Relu {
                    ops::relu(&y)
                } else {
                    y
                }
            }
        };
    }
    x
}

/// Builds a random tiny model and input, picks a grid and region, and
/// compares masked logits with the oracle bit for bit.
pub fn mask_trial(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let cfg = random_tiny_config(rng);
    let model = Model::build(&cfg, rng.gen()).unwrap();
    let shapes = cfg.conv_output_shapes().unwrap();
    let smallest = shapes.iter().map(|s| s.height.min(s.width)).min().unwrap();
    let n = rng.gen_range(1..=smallest.min(4));
    let region = rng.gen_range(1..=n * n);
    let batch = rng.gen_range(1..=3);
    let x = random_tensor(rng, &cfg.input.with_batch(batch).dims(), 0.0, 1.0);
    let masks = build_masks(&model, n, region).unwrap();
    let got = model.logits(&x, Some(&masks)).unwrap();
    let want = masked_logits_oracle(&model, &x, n, region);
    let same = got.shape() == want.shape() && got.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    if same {
        Ok(())
    } else {
        Err(format!("{} n={n} region={region}: {:?} vs {:?}", cfg.layer_string(), got.data(), want.data()))
    }
}

/// Double-precision reference network used to take finite differences.
struct Reference {
    config: ModelConfig,
    params: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    names: Vec<String>,
}

/// ReLU on/off states and pooling winners seen during one forward pass.
type Pattern = Vec<u64>;

impl Reference {
    fn from_model(model: &Model) -> Self {
        let mut params = Vec::new();
        let mut shapes = Vec::new();
        let mut names = Vec::new();
        for (name, t) in model.parameters() {
            params.push(t.data().iter().map(|&v| f64::from(v)).collect());
            shapes.push(t.shape().to_vec());
            names.push(name);
        }
        Self { config: model.config().clone(), params, shapes, names }
    }

    fn param(&self, name: &str) -> (&[f64], &[usize]) {
        let i = self.names.iter().position(|n| n == name).unwrap();
        (&self.params[i], &self.shapes[i])
    }

    /// Mean cross-entropy and the activation pattern.
    fn loss(&self, input: &[f64], batch: usize, labels: &[usize]) -> (f64, Pattern) {
        let mut pattern = Vec::new();
        let inp = self.config.input;
        let (mut c, mut h, mut w) = (inp.channels, inp.height, inp.width);
        let mut x = input.to_vec();
        for (li, spec) in self.config.layers.iter().enumerate() {
            match *spec {
                LayerSpec::Conv { out_channels, kh, kw } => {
                    let (wt, _) = self.param(&format!("layers.{li}.weight"));
                    let (bias, _) = self.param(&format!("layers.{li}.bias"));
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let mut y = vec![0.0; batch * out_channels * oh * ow];
                    for b in 0..batch {
                        for o in 0..out_channels {
                            for yy in 0..oh {
                                for xx in 0..ow {
                                    let mut s = bias[o];
                                    for ci in 0..c {
                                        for i in 0..kh {
                                            for j in 0..kw {
                                                s += x[((b * c + ci) * h + yy + i) * w + xx + j] * wt[((o * c + ci) * kh + i) * kw + j];
                                            }
                                        }
                                    }
                                    pattern.push(u64::from(s > 0.0));
                                    y[((b * out_channels + o) * oh + yy) * ow + xx] = s.max(0.0);
                                }
                            }
                        }
                    }
                    x = y;
                    c = out_channels;
                    h = oh;
                    w = ow;
                }
                LayerSpec::MaxPool { ph, pw } => {
                    let (oh, ow) = (h / ph, w / pw);
                    let mut y = vec![0.0; batch * c * oh * ow];
                    for bc in 0..batch * c {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                let mut best = (f64::NEG_INFINITY, 0u64);
                                for i in 0..ph {
                                    for j in 0..pw {
                                        let v = x[(bc * h + yy * ph + i) * w + xx * pw + j];
                                        if v > best.0 {
                                            best = (v, (i * pw + j) as u64);
                                        }
                                    }
                                }
                                pattern.push(best.1);
                                y[(bc * oh + yy) * ow + xx] = best.0;
                            }
                        }
                    }
                    x = y;
                    h = oh;
                    w = ow;
                }
                LayerSpec::Flatten => {
                    c *= h * w;
                    h = 1;
                    w = 1;
                }
                LayerSpec::Fc { units, activation } => {
                    let (wt, _) = self.param(&format!("layers.{li}.weight"));
                    let (bias, _) = self.param(&format!("layers.{li}.bias"));
                    let d = c;
                    let mut y = vec![0.0; batch * units];
                    for b in 0..batch {
                        for u in 0..units {
                            let s = bias[u] + (0..d).map(|k| x[b * d + k] * wt[u * d + k]).sum::<f64>();
                            y[b * units + u] = if activation == Activation::Relu {
                                pattern.push(u64::from(s > 0.0));
                                s.max(0.0)
                            } else {
                                s
                            };
                        }
                    }
                    x = y;
                    c = units;
                }
            }
        }
        let mut total = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &x[b * c..(b + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        (total / batch as f64, pattern)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Denominator floor for the relative error. Analytic gradients come from
/// single-precision kernels, so coordinates whose true gradient is this small
/// are compared on an absolute scale instead.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(GRAD_FLOOR)
}

/// Compares back-propagated parameter gradients with central differences of
/// the double-precision reference. Coordinates whose perturbation flips a
/// ReLU or changes a pooling winner are skipped and counted.
pub fn grad_check(model: &mut Model, input: &Tensor, labels: &[usize]) -> GradCheck {
    let logits = model.forward_train(input).unwrap();
    let probs = ops::softmax(&logits).unwrap();
    let g = ops::softmax_cross_entropy_backward(&probs, labels).unwrap();
    let grads = model.backward(&g).unwrap();
    let mut analytic: Vec<(String, Vec<f32>)> = Vec::new();
    for (i, pg) in grads.iter().enumerate() {
        if let Some(pg) = pg {
            analytic.push((format!("layers.{i}.weight"), pg.weight.data().to_vec()));
            analytic.push((format!("layers.{i}.bias"), pg.bias.data().to_vec()));
        }
    }
    let batch = input.shape()[0];
    let x: Vec<f64> = input.data().iter().map(|&v| f64::from(v)).collect();
    let mut reference = Reference::from_model(model);
    let mut out = GradCheck::default();
    for (name, grad) in analytic {
        let pi = reference.names.iter().position(|n| *n == name).unwrap();
        for (k, &g) in grad.iter().enumerate() {
            let orig = reference.params[pi][k];
            reference.params[pi][k] = orig + FD_STEP;
            let (up, pu) = reference.loss(&x, batch, labels);
            reference.params[pi][k] = orig - FD_STEP;
            let (down, pd) = reference.loss(&x, batch, labels);
            reference.params[pi][k] = orig;
            if pu != pd {
                out.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(f64::from(g), numeric);
            out.checked += 1;
            out.worst = out.worst.max(err);
            if err >= GRAD_REL_TOL {
                out.failures.push(format!("{name}[{k}]: analytic {g} numeric {numeric}"));
            }
        }
    }
    out
}

/// Toy networks covering conv, pooling, flatten, hidden and output layers.
pub fn gradcheck_configs() -> Vec<ModelConfig> {
    vec![
        ModelConfig::parse("conv(2,3,3) maxpool(2,2) flatten fc(4,relu) fc(3,softmax)", ImageShape::new(1, 6, 6)).unwrap(),
        ModelConfig::parse("conv(2,3,3) conv(3,3,3) maxpool(2,2) flatten fc(5,relu) fc(3,softmax)", ImageShape::new(1, 8, 8)).unwrap(),
        ModelConfig::parse("conv(2,2,3) flatten fc(3,softmax)", ImageShape::new(2, 5, 6)).unwrap(),
    ]
}

/// Runs every toy network for one seed.
pub fn grad_check_seed(seed: u64) -> GradCheck {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheck::default();
    for cfg in gradcheck_configs() {
        let mut model = Model::build(&cfg, rng.gen()).unwrap();
        let batch = 3;
        let x = random_tensor(&mut rng, &cfg.input.with_batch(batch).dims(), -1.0, 1.0);
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..cfg.classes())).collect();
        let r = grad_check(&mut model, &x, &labels);
        total.checked += r.checked;
        total.skipped += r.skipped;
        total.worst = total.worst.max(r.worst);
        total.failures.extend(r.failures);
    }
    total
}
