//! Parameter updates.

use crate::error::{Error, Result};

/// `params -= lr * grad`.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), actual: grad.len() });
    }
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config(format!("unknown optimizer '{s}' (expected sgd or adam)"))),
        }
    }
}

/// Plain gradient descent or Adam (beta 0.9 / 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { dim } else { 0 };
        Self { kind, lr, m: vec![0.0; state], v: vec![0.0; state], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grad, self.lr),
            OptimizerKind::Adam => {
                if params.len() != self.m.len() || grad.len() != self.m.len() {
                    return Err(Error::DimensionMismatch { expected: self.m.len(), actual: grad.len() });
                }
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0];
        sgd_step(&mut p, &[0.5], 0.0).unwrap();
        assert_eq!(p, vec![1.0]);
        sgd_step(&mut p, &[0.0], 0.1).unwrap();
        assert_eq!(p, vec![1.0]);
        sgd_step(&mut p, &[0.5], 0.1).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
        assert!(sgd_step(&mut p, &[0.5, 1.0], 0.1).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[300.0, -0.002]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-9 && (p[1] + 0.99).abs() < 1e-5);
    }
}
