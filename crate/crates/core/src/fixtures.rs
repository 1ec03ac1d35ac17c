//! Seeded random networks and inputs.
//!
//! Every parameter tensor is drawn from its own stream keyed by the seed and the
//! node id, so adding a node never changes the weights of the others.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::io::{write_network, write_tensor};
use crate::network::{DropoutMode, LayerSpec, Network, Node, INPUT_ID};
use crate::numerics::{DenseMatrix, Padding, Tensor};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Mlp,
    Cnn,
    Rnn,
    ResnetMini,
    UnetMini,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::Mlp, Arch::Cnn, Arch::Rnn, Arch::ResnetMini, Arch::UnetMini];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::Cnn => "cnn",
            Arch::Rnn => "rnn",
            Arch::ResnetMini => "resnet-mini",
            Arch::UnetMini => "unet-mini",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// A network with a sample input, a direction and an output-space cotangent.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub net: Network,
    pub x: Tensor,
    pub u: Tensor,
    pub v: Tensor,
}

pub const MAX_SCALE: usize = 64;

/// Standard-normal tensor drawn from the stream `(seed, key)`.
pub fn gaussian_tensor(shape: &[usize], seed: u64, key: &str) -> Result<Tensor> {
    let mut rng = keyed_rng(seed, key);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Builds layers with per-node parameter streams.
pub struct Builder {
    seed: u64,
    nodes: Vec<Node>,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self { seed, nodes: Vec::new() }
    }

    fn normal(&self, id: &str, what: &str, n: usize, std: f64) -> Vec<f64> {
        let mut rng = keyed_rng(self.seed, &format!("{id}/{what}"));
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    }

    fn uniform(&self, id: &str, what: &str, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = keyed_rng(self.seed, &format!("{id}/{what}"));
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    pub fn push(&mut self, id: &str, layer: LayerSpec, inputs: &[&str]) -> &mut Self {
        self.nodes.push(Node::new(id, layer, inputs));
        self
    }

    /// Dense layer with `N(0, 1/fan_in)` weights and `N(0, 0.1²)` bias.
    pub fn dense(&mut self, id: &str, input: &str, d_out: usize, d_in: usize) -> &mut Self {
        let weights = DenseMatrix::new(d_out, d_in, self.normal(id, "weights", d_out * d_in, (1.0 / d_in as f64).sqrt()))
            .expect("sizes match");
        let bias = self.normal(id, "bias", d_out, 0.1);
        self.push(id, LayerSpec::Dense { weights, bias }, &[input])
    }

    pub fn conv(&mut self, id: &str, input: &str, k: usize, c: usize, f: usize, stride: usize, padding: Padding) -> &mut Self {
        let fan_in = (k * k * c) as f64;
        let filters = Tensor::new(vec![k, k, c, f], self.normal(id, "filters", k * k * c * f, (1.0 / fan_in).sqrt()))
            .expect("sizes match");
        let bias = self.normal(id, "bias", f, 0.1);
        self.push(
            id,
            LayerSpec::Conv2D {
                filters,
                bias,
                stride: (stride, stride),
                padding,
            },
            &[input],
        )
    }

    pub fn act(&mut self, id: &str, input: &str, leakiness: f64) -> &mut Self {
        self.push(id, LayerSpec::Activation { leakiness }, &[input])
    }

    pub fn batchnorm(&mut self, id: &str, input: &str, c: usize) -> &mut Self {
        let layer = LayerSpec::BatchNormInference {
            gamma: self.uniform(id, "gamma", c, 0.5, 1.5),
            beta: self.normal(id, "beta", c, 0.1),
            running_mean: self.normal(id, "running_mean", c, 0.1),
            running_var: self.uniform(id, "running_var", c, 0.5, 1.5),
            epsilon: 1e-5,
        };
        self.push(id, layer, &[input])
    }

    pub fn recurrent(&mut self, id: &str, input: &str, hidden: usize, d_in: usize, steps: usize, leakiness: f64) -> &mut Self {
        let w_hidden = DenseMatrix::new(hidden, hidden, self.normal(id, "w_hidden", hidden * hidden, 0.5 / (hidden as f64).sqrt()))
            .expect("sizes match");
        let w_input = DenseMatrix::new(hidden, d_in, self.normal(id, "w_input", hidden * d_in, (1.0 / d_in as f64).sqrt()))
            .expect("sizes match");
        let bias = self.normal(id, "bias", hidden, 0.1);
        self.push(
            id,
            LayerSpec::Recurrent {
                w_hidden,
                w_input,
                bias,
                leakiness,
                steps,
            },
            &[input],
        )
    }

    pub fn build(self, input_shape: Vec<usize>, output: &str) -> Result<Network> {
        Network::new(input_shape, self.nodes, output)
    }
}

const LEAKINESS: [f64; 5] = [0.0, 0.01, 0.1, 0.2, -1.0];

fn pick_leakiness(seed: u64, id: &str) -> f64 {
    LEAKINESS[keyed_rng(seed, &format!("{id}/leakiness")).random_range(0..LEAKINESS.len())]
}

/// Reproducible network of the given family; `scale` (1..=64) sets its widths.
pub fn generate_network(arch: Arch, seed: u64, scale: usize) -> Result<Network> {
    if !(1..=MAX_SCALE).contains(&scale) {
        return Err(Error::InvalidArgument(format!("scale must be in 1..={MAX_SCALE}, got {scale}")));
    }
    let mut b = Builder::new(seed);
    let leak = |id: &str| pick_leakiness(seed, id);
    match arch {
        Arch::Mlp => {
            let d = scale.max(2);
            let d_out = (scale / 2).max(1);
            b.dense("fc1", INPUT_ID, d, d)
                .act("act1", "fc1", leak("act1"))
                .push(
                    "drop1",
                    LayerSpec::Dropout {
                        rate: 0.25,
                        mode: DropoutMode::Training { seed },
                    },
                    &["act1"],
                )
                .dense("fc2", "drop1", d, d)
                .batchnorm("bn2", "fc2", d)
                .act("act2", "bn2", leak("act2"))
                .dense("fc3", "act2", d, d)
                .act("act3", "fc3", leak("act3"))
                .dense("out", "act3", d_out, d);
            b.build(vec![d], "out")
        }
        Arch::Cnn => {
            let f = (scale / 4).clamp(2, 8);
            b.conv("conv1", INPUT_ID, 3, 2, f, 1, Padding::Valid)
                .batchnorm("bn1", "conv1", f)
                .act("act1", "bn1", leak("act1"))
                .push(
                    "pool1",
                    LayerSpec::MaxPool {
                        ksize: (2, 2),
                        stride: (2, 2),
                        padding: Padding::Valid,
                    },
                    &["act1"],
                )
                .conv("conv2", "pool1", 3, f, f, 1, Padding::Same)
                .act("act2", "conv2", leak("act2"))
                .push(
                    "drop2",
                    LayerSpec::Dropout {
                        rate: 0.1,
                        mode: DropoutMode::Inference,
                    },
                    &["act2"],
                )
                .push("flat", LayerSpec::Flatten, &["drop2"])
                .dense("out", "flat", 10, 9 * f);
            b.build(vec![1, 8, 8, 2], "out")
        }
        Arch::Rnn => {
            let steps = 2 + scale % 5;
            let d_in = scale.clamp(2, 16);
            let hidden = scale.clamp(2, 32);
            b.recurrent("rnn", INPUT_ID, hidden, d_in, steps, leak("rnn"))
                .dense("out", "rnn", 8, hidden);
            b.build(vec![steps, d_in], "out")
        }
        Arch::ResnetMini => {
            let f = (scale / 4).clamp(2, 8);
            b.conv("stem", INPUT_ID, 3, 2, f, 1, Padding::Same)
                .act("stem_act", "stem", leak("stem_act"))
                .conv("res_a", "stem_act", 3, f, f, 1, Padding::Same)
                .act("res_a_act", "res_a", leak("res_a_act"))
                .conv("res_b", "res_a_act", 3, f, f, 1, Padding::Same)
                .push("skip", LayerSpec::Add, &["stem_act", "res_b"])
                .act("skip_act", "skip", leak("skip_act"))
                .conv("down", "skip_act", 3, f, f, 2, Padding::Same)
                .act("down_act", "down", leak("down_act"))
                .push(
                    "pool",
                    LayerSpec::MaxPool {
                        ksize: (2, 2),
                        stride: (2, 2),
                        padding: Padding::Same,
                    },
                    &["down_act"],
                )
                .push("flat", LayerSpec::Flatten, &["pool"])
                .dense("out", "flat", 10, 4 * f);
            b.build(vec![1, 8, 8, 2], "out")
        }
        Arch::UnetMini => {
            let f = (scale / 8).clamp(1, 4);
            b.conv("enc1", INPUT_ID, 3, 2, f, 1, Padding::Same)
                .act("enc1_act", "enc1", leak("enc1_act"))
                .push(
                    "pool",
                    LayerSpec::MaxPool {
                        ksize: (2, 2),
                        stride: (2, 2),
                        padding: Padding::Valid,
                    },
                    &["enc1_act"],
                )
                .conv("enc2", "pool", 3, f, 2 * f, 1, Padding::Same)
                .act("enc2_act", "enc2", leak("enc2_act"))
                .push("bottleneck", LayerSpec::Flatten, &["enc2_act"])
                .dense("up", "bottleneck", 64 * f, 32 * f)
                .act("up_act", "up", leak("up_act"))
                .push("skip", LayerSpec::Flatten, &["enc1_act"])
                .push("merge", LayerSpec::Concat { axis: 1 }, &["up_act", "skip"])
                .dense("out", "merge", 64, 128 * f);
            b.build(vec![1, 8, 8, 2], "out")
        }
    }
}

/// Network plus Gaussian `x`, `u` (input-shaped) and `v` (output-shaped).
pub fn generate(arch: Arch, seed: u64, scale: usize) -> Result<Fixture> {
    let net = generate_network(arch, seed, scale)?;
    let x = gaussian_tensor(net.input_shape(), seed, "sample/x")?;
    let u = gaussian_tensor(net.input_shape(), seed, "sample/u")?;
    let v = gaussian_tensor(net.output_shape(), seed, "sample/v")?;
    Ok(Fixture { net, x, u, v })
}

/// Fixture whose family and scale are themselves drawn from `seed`.
pub fn random_fixture(seed: u64) -> Result<Fixture> {
    let mut rng = keyed_rng(seed, "family");
    let arch = Arch::ALL[rng.random_range(0..Arch::ALL.len())];
    let scale = rng.random_range(2..=32);
    generate(arch, seed, scale)
}

/// Writes `net.json` with one `.ten` file per parameter, plus `x.ten`, `u.ten` and `v.ten`.
pub fn write_fixture(dir: &Path, fx: &Fixture) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_network(&dir.join("net.json"), &fx.net, false)?;
    write_tensor(&dir.join("x.ten"), &fx.x)?;
    write_tensor(&dir.join("u.ten"), &fx.u)?;
    write_tensor(&dir.join("v.ten"), &fx.v)?;
    Ok(())
}

/// Appends a dense head with `k` outputs (after a flatten when the output is not a vector).
pub fn append_dense_head(net: &Network, k: usize, seed: u64) -> Result<Network> {
    if k == 0 {
        return Err(Error::InvalidArgument("head width must be >= 1".into()));
    }
    let mut b = Builder::new(seed);
    b.nodes = net.nodes().to_vec();
    let mut last = net.output_id().to_string();
    let mut width = *net.output_shape().last().unwrap();
    if net.output_shape().len() > 1 {
        b.push("head_flatten", LayerSpec::Flatten, &[&last]);
        last = "head_flatten".into();
        width = net.output_shape()[1..].iter().product();
    }
    b.dense("head", &last, k, width);
    b.build(net.input_shape().to_vec(), "head")
}
