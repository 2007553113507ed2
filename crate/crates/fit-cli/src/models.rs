//! Small fully connected building blocks for the example models.

use fitcore::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A dense layer `x W + b` with weights initialized uniformly in
/// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
pub struct Dense {
    w: Parameter,
    b: Parameter,
}

impl Dense {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Dense {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w = Tensor::from_vec(draw(fan_in * fan_out), [fan_in, fan_out], true).unwrap();
        let b = Tensor::from_vec(draw(fan_out), [1, fan_out], true).unwrap();
        Dense {
            w: Parameter::new(format!("{name}.w"), w).unwrap(),
            b: Parameter::new(format!("{name}.b"), b).unwrap(),
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![self.w.clone(), self.b.clone()]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let rows = x.shape().dims()[0];
        // broadcast the bias over the batch through a ones column
        let bias = Tensor::ones([rows, 1]).matmul(self.b.tensor())?;
        x.matmul(self.w.tensor())?.add(&bias)
    }
}

/// Elementwise nonlinearity applied after a layer.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Linear => x.clone(),
        }
    }
}

/// A stack of dense layers with per-layer activations.
pub struct Mlp {
    layers: Vec<(Dense, Activation)>,
}

impl Mlp {
    /// `sizes` lists layer widths input-first; hidden layers use
    /// `hidden`, the last layer uses `output`.
    pub fn new(
        name: &str,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Mlp {
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let dense = Dense::new(&format!("{name}.{i}"), pair[0], pair[1], rng);
                let act = if i == last { output } else { hidden };
                (dense, act)
            })
            .collect();
        Mlp { layers }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        self.layers.iter().flat_map(|(d, _)| d.parameters()).collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        for (dense, act) in &self.layers {
            out = act.apply(&dense.forward(&out)?);
        }
        Ok(out)
    }
}

/// A single dense layer as a standalone model: linear regression when
/// trained with mse, a linear SVM when trained with hinge loss.
pub struct LinearModel {
    dense: Dense,
}

impl LinearModel {
    pub fn new(fan_in: usize, rng: &mut ChaCha8Rng) -> LinearModel {
        LinearModel {
            dense: Dense::new("linear", fan_in, 1, rng),
        }
    }
}

impl Model for LinearModel {
    fn parameters(&self) -> Vec<Parameter> {
        self.dense.parameters()
    }

    fn forward(&mut self, x: &Tensor, _: Option<&mut State>) -> Result<Tensor> {
        self.dense.forward(x)
    }
}
