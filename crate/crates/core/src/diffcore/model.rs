//! Feed-forward model: an MLP feature generator followed by a linear
//! classifier. Parameters are stored layer by layer, each layer as a
//! row-major `out × in` weight block followed by `out` biases.

use alloc::vec;
use alloc::vec::Vec;

use super::matrix::Matrix;
use super::scalar::Scalar;
use crate::{Error, Result};

/// Loss minimized by adaptation and meta-updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskLoss {
    /// Mean cross-entropy plus `(l2 / 2)·‖w‖²`.
    CrossEntropy { l2: f64 },
    /// `(curvature / 2)·‖w‖²`, independent of the data. Used as a probe
    /// with closed-form adaptation and meta-gradients.
    Quadratic { curvature: f64 },
}

impl Default for TaskLoss {
    fn default() -> Self {
        TaskLoss::CrossEntropy { l2: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub feature_dim: usize,
    /// Hidden widths of the generator (ReLU after each).
    pub hidden_layers: Vec<usize>,
    pub n_way: usize,
    /// Generator is the identity map (no parameters); requires
    /// `feature_dim == input_dim`. With it the model is multinomial
    /// logistic regression.
    pub passthrough_generator: bool,
    pub task_loss: TaskLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Layer {
    pub inp: usize,
    pub out: usize,
    pub offset: usize,
    pub relu: bool,
}

impl Layer {
    pub fn len(&self) -> usize {
        self.inp * self.out + self.out
    }
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_layers: &[usize], feature_dim: usize, n_way: usize) -> Self {
        Self {
            input_dim,
            feature_dim,
            hidden_layers: hidden_layers.to_vec(),
            n_way,
            passthrough_generator: false,
            task_loss: TaskLoss::default(),
        }
    }

    /// Multinomial logistic regression on the raw inputs.
    pub fn logistic(input_dim: usize, n_way: usize) -> Self {
        Self {
            input_dim,
            feature_dim: input_dim,
            hidden_layers: Vec::new(),
            n_way,
            passthrough_generator: true,
            task_loss: TaskLoss::default(),
        }
    }

    pub fn with_task_loss(mut self, loss: TaskLoss) -> Self {
        self.task_loss = loss;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(Error::Config(alloc::format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        positive(self.input_dim, "input_dim")?;
        positive(self.feature_dim, "feature_dim")?;
        positive(self.n_way, "n_way")?;
        for &h in &self.hidden_layers {
            positive(h, "hidden layer width")?;
        }
        if self.passthrough_generator {
            if !self.hidden_layers.is_empty() {
                return Err(Error::Config("passthrough generator cannot have hidden layers".into()));
            }
            if self.feature_dim != self.input_dim {
                return Err(Error::Dimension {
                    what: "passthrough generator feature_dim",
                    expected: self.input_dim,
                    got: self.feature_dim,
                });
            }
        }
        match self.task_loss {
            TaskLoss::CrossEntropy { l2 } if !(l2 >= 0.0 && l2.is_finite()) => {
                Err(Error::Config("l2 must be a finite non-negative number".into()))
            }
            TaskLoss::Quadratic { curvature } if !curvature.is_finite() => {
                Err(Error::Config("quadratic curvature must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn generator_layers(&self) -> Vec<Layer> {
        if self.passthrough_generator {
            return Vec::new();
        }
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(self.feature_dim);
        let mut offset = 0;
        let n = dims.len() - 1;
        dims.windows(2)
            .enumerate()
            .map(|(i, d)| {
                let l = Layer {
                    inp: d[0],
                    out: d[1],
                    offset,
                    relu: i + 1 < n,
                };
                offset += l.len();
                l
            })
            .collect()
    }

    pub(crate) fn classifier_layer(&self) -> Layer {
        Layer {
            inp: self.feature_dim,
            out: self.n_way,
            offset: self.generator_len(),
            relu: false,
        }
    }

    pub(crate) fn layers(&self) -> Vec<Layer> {
        let mut l = self.generator_layers();
        l.push(self.classifier_layer());
        l
    }

    pub fn generator_len(&self) -> usize {
        self.generator_layers().iter().map(Layer::len).sum()
    }

    pub fn classifier_len(&self) -> usize {
        self.feature_dim * self.n_way + self.n_way
    }

    /// Parameters of generator plus one classifier.
    pub fn param_count(&self) -> usize {
        self.generator_len() + self.classifier_len()
    }
}

/// Labeled inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>, n_way: usize) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::Config("batch must contain at least one sample".into()));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::Dimension {
                what: "batch labels",
                expected: inputs.rows(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_way) {
            return Err(Error::Config(alloc::format!("label {bad} out of range for {n_way}-way batch")));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub(crate) fn check_inputs(spec: &ModelSpec, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != spec.input_dim {
        return Err(Error::Dimension {
            what: "input columns",
            expected: spec.input_dim,
            got: inputs.cols(),
        });
    }
    Ok(())
}

/// Activations of every layer for a batch: `acts[0]` is the input,
/// `acts[l + 1]` the output of layer `l` (after ReLU where applicable).
pub(crate) struct Trace<T> {
    pub acts: Vec<Vec<T>>,
    pub count: usize,
}

impl<T: Scalar> Trace<T> {
    pub fn logits(&self) -> &[T] {
        self.acts.last().expect("trace has at least the input")
    }
}

fn affine<T: Scalar>(layer: &Layer, params: &[T], input: &[T], count: usize) -> Vec<T> {
    let w = &params[layer.offset..layer.offset + layer.inp * layer.out];
    let b = &params[layer.offset + layer.inp * layer.out..layer.offset + layer.len()];
    let mut out = vec![T::zero(); count * layer.out];
    for r in 0..count {
        let x = &input[r * layer.inp..(r + 1) * layer.inp];
        for o in 0..layer.out {
            let wr = &w[o * layer.inp..(o + 1) * layer.inp];
            let mut acc = b[o];
            for (wi, xi) in wr.iter().zip(x) {
                acc += *wi * *xi;
            }
            out[r * layer.out + o] = if layer.relu && acc.re() <= 0.0 { T::zero() } else { acc };
        }
    }
    out
}

pub(crate) fn forward_layers<T: Scalar>(layers: &[Layer], params: &[T], inputs: &Matrix) -> Trace<T> {
    let count = inputs.rows();
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(inputs.as_slice().iter().map(|&v| T::from_f64(v)).collect::<Vec<_>>());
    for layer in layers {
        let next = affine(layer, params, acts.last().unwrap(), count);
        acts.push(next);
    }
    Trace { acts, count }
}

pub(crate) fn forward_trace<T: Scalar>(spec: &ModelSpec, params: &[T], inputs: &Matrix) -> Trace<T> {
    forward_layers(&spec.layers(), params, inputs)
}

/// Reverse pass from `d_out` (gradient w.r.t. the last layer output) to
/// the parameter gradient, laid out like `params`.
pub(crate) fn backward_layers<T: Scalar>(
    layers: &[Layer],
    params: &[T],
    trace: &Trace<T>,
    d_out: Vec<T>,
    n_params: usize,
) -> Vec<T> {
    let count = trace.count;
    let mut grad = vec![T::zero(); n_params];
    let mut delta = d_out;
    for (li, layer) in layers.iter().enumerate().rev() {
        let input = &trace.acts[li];
        let output = &trace.acts[li + 1];
        if layer.relu {
            for (d, o) in delta.iter_mut().zip(output) {
                if o.re() <= 0.0 {
                    *d = T::zero();
                }
            }
        }
        let wlen = layer.inp * layer.out;
        {
            let (gw, gb) = grad[layer.offset..layer.offset + layer.len()].split_at_mut(wlen);
            for r in 0..count {
                let x = &input[r * layer.inp..(r + 1) * layer.inp];
                for o in 0..layer.out {
                    let d = delta[r * layer.out + o];
                    gb[o] += d;
                    for (g, xi) in gw[o * layer.inp..(o + 1) * layer.inp].iter_mut().zip(x) {
                        *g += d * *xi;
                    }
                }
            }
        }
        if li > 0 {
            let w = &params[layer.offset..layer.offset + wlen];
            let mut prev = vec![T::zero(); count * layer.inp];
            for r in 0..count {
                let p = &mut prev[r * layer.inp..(r + 1) * layer.inp];
                for o in 0..layer.out {
                    let d = delta[r * layer.out + o];
                    for (pi, wi) in p.iter_mut().zip(&w[o * layer.inp..(o + 1) * layer.inp]) {
                        *pi += d * *wi;
                    }
                }
            }
            delta = prev;
        }
    }
    grad
}

pub(crate) fn backward<T: Scalar>(spec: &ModelSpec, params: &[T], trace: &Trace<T>, d_logits: Vec<T>) -> Vec<T> {
    backward_layers(&spec.layers(), params, trace, d_logits, spec.param_count())
}
