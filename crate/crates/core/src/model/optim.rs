use std::fmt;
use std::str::FromStr;

use super::ModelParams;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adamax,
    /// Plain Adam, kept for sensitivity checks.
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adamax => "adamax",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamax" => Ok(OptimizerKind::Adamax),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// AdaMax moments: first moment `m` and exponentially weighted infinity
/// norm `u` per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState {
    pub m: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamaxState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            u: zeros,
            t: 0,
        }
    }

    /// One update:
    /// `m ← β1·m + (1−β1)·g`, `u ← max(β2·u, |g|)`,
    /// `θ ← θ − lr / (1 − β1^t) · m / (u + ε)`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) -> Result<()> {
        check_shapes(params, grads)?;
        self.t += 1;
        let step = lr / (1.0 - BETA1.powf(self.t as f64));
        let mut finite = true;
        for (((theta, g), m), u) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.u) {
            for (((p, &g), m), u) in theta.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(u.iter_mut()) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *u = (BETA2 * *u).max(g.abs());
                *p -= step * *m / (*u + EPSILON);
                finite &= p.is_finite();
            }
        }
        finite_update(finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) -> Result<()> {
        check_shapes(params, grads)?;
        self.t += 1;
        let c1 = 1.0 - BETA1.powf(self.t as f64);
        let c2 = 1.0 - BETA2.powf(self.t as f64);
        let mut finite = true;
        for (((theta, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in theta.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
                finite &= p.is_finite();
            }
        }
        finite_update(finite)
    }
}

fn finite_update(finite: bool) -> Result<()> {
    if finite {
        Ok(())
    } else {
        Err(Error::NumericFault("parameter update produced a non-finite value".into()))
    }
}

fn check_shapes(params: &ModelParams, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len()
        || params.tensors().iter().zip(grads).any(|(p, g)| p.shape() != g.shape())
    {
        return Err(Error::InvalidShape("gradients do not match parameter shapes".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adamax(AdamaxState),
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Adamax => Optimizer::Adamax(AdamaxState::new(params)),
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(params)),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) -> Result<()> {
        match self {
            Optimizer::Adamax(s) => s.step(params, grads, lr),
            Optimizer::Adam(s) => s.step(params, grads, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ModelParams {
        ModelParams::new(vec!["theta".into()], vec![Tensor::vector(vec![value])]).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = ModelParams::new(
            vec!["a".into(), "b".into()],
            vec![Tensor::vector(vec![0.3, -1.2]), Tensor::zeros(&[2, 2])],
        )
        .unwrap();
        let before = p.clone();
        let mut s = AdamaxState::new(&p);
        let grads: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        s.step(&mut p, &grads, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn single_step_hand_example() {
        let mut p = single(0.0);
        let mut s = AdamaxState::new(&p);
        s.step(&mut p, &[Tensor::vector(vec![1.0])], 1e-3).unwrap();
        assert!((s.m[0][0] - 0.1).abs() < 1e-15);
        assert_eq!(s.u[0][0], 1.0);
        let theta = p.tensors()[0].data()[0];
        assert!((theta - (-0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((theta + 0.001).abs() < 1e-9);
    }

    #[test]
    fn two_identical_gradients() {
        let mut p = single(0.0);
        let mut s = AdamaxState::new(&p);
        let g = [Tensor::vector(vec![1.0])];
        s.step(&mut p, &g, 1e-3).unwrap();
        let after_one = p.tensors()[0].data()[0];
        s.step(&mut p, &g, 1e-3).unwrap();
        // u = max(0.999 · 1, 1) stays at |g|.
        assert_eq!(s.u[0][0], 1.0);
        // m = 0.19; bias correction 1 / (1 − 0.81); step = 1e-3 · 0.19 / 0.19.
        assert!((s.m[0][0] - 0.19).abs() < 1e-15);
        let second_step = after_one - p.tensors()[0].data()[0];
        assert!((second_step - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn u_is_constant_under_constant_gradient() {
        let mut p = single(1.0);
        let mut s = AdamaxState::new(&p);
        let g = [Tensor::vector(vec![-0.7])];
        for _ in 0..50 {
            s.step(&mut p, &g, 1e-2).unwrap();
            assert_eq!(s.u[0][0], 0.7);
        }
    }

    #[test]
    fn u_decays_after_gradient_drops() {
        let mut p = single(1.0);
        let mut s = AdamaxState::new(&p);
        s.step(&mut p, &[Tensor::vector(vec![2.0])], 1e-2).unwrap();
        s.step(&mut p, &[Tensor::vector(vec![0.1])], 1e-2).unwrap();
        assert!((s.u[0][0] - 2.0 * BETA2).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = single(0.5);
        let mut s = Optimizer::new(OptimizerKind::Adam, &p);
        s.step(&mut p, &[Tensor::vector(vec![3.0])], 1e-2).unwrap();
        assert!((p.tensors()[0].data()[0] - (0.5 - 1e-2)).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single(0.0);
        let mut s = AdamaxState::new(&p);
        assert!(s.step(&mut p, &[Tensor::vector(vec![1.0, 2.0])], 1e-3).is_err());
    }
}
