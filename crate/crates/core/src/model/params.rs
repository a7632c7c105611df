use rand::Rng;

use super::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// `Some(fan_in)` for weight matrices, `None` for biases.
    pub fan_in: Option<usize>,
}

impl ParamSpec {
    pub(super) fn weight(name: String, out: usize, fan_in: usize) -> Self {
        Self {
            name,
            shape: vec![out, fan_in],
            fan_in: Some(fan_in),
        }
    }

    pub(super) fn bias(name: String, out: usize) -> Self {
        Self {
            name,
            shape: vec![out],
            fan_in: None,
        }
    }
}

/// Every learnable tensor of a model, in [`ModelConfig::param_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::InvalidInput("parameter names and tensors differ in count".into()));
        }
        Ok(Self { names, tensors })
    }

    /// Checks names and shapes against `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let specs = config.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(Error::InvalidShape(format!(
                "model expects {} parameter tensors, got {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(self.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::InvalidShape(format!(
                    "expected {} {:?}, got {name} {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Weights uniform in `±sqrt(1 / fan_in)`, biases zero. Draws come from the
/// `Init` stream of `seed`, tensor by tensor in storage order, row-major.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = rng::stream(seed, Stream::Init);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for spec in config.param_specs() {
        let n: usize = spec.shape.iter().product();
        let data = match spec.fan_in {
            Some(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            None => vec![0.0; n],
        };
        names.push(spec.name);
        tensors.push(Tensor::new(spec.shape, data)?);
    }
    ModelParams::new(names, tensors)
}
