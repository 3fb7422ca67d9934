use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Two-layer perceptron `c -> c (tanh) -> d` mapping pooled lane features to
/// unit-length embeddings. Normalizing bounds every dot product to
/// `[-1, 1]`, so the embedding loss cannot grow by inflating feature
/// magnitudes and saturating the shared features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub c: usize,
    pub d: usize,
    pub params: Vec<f64>,
}

impl ProjectionHead {
    pub fn param_count(c: usize, d: usize) -> usize {
        c * c + c + d * c + d
    }

    pub fn zeros(c: usize, d: usize) -> Self {
        Self { c, d, params: vec![0.0; Self::param_count(c, d)] }
    }

    pub fn init(c: usize, d: usize, rng: &mut SeededRng) -> Self {
        let mut h = Self::zeros(c, d);
        let a1 = (6.0 / (2 * c) as f64).sqrt();
        let a2 = (6.0 / (c + d) as f64).sqrt();
        for p in &mut h.params[..c * c] {
            *p = rng.range(-a1, a1);
        }
        let w2 = c * c + c;
        for p in &mut h.params[w2..w2 + d * c] {
            *p = rng.range(-a2, a2);
        }
        h
    }

    pub fn from_params(c: usize, d: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::param_count(c, d) {
            return Err(Error::DimensionMismatch { expected: Self::param_count(c, d), actual: params.len() });
        }
        Ok(Self { c, d, params })
    }

    /// Unnormalized output for the given hidden activations.
    fn project(&self, hidden: &[f64]) -> Vec<f64> {
        let (c, p) = (self.c, &self.params);
        let w2 = c * c + c;
        let b2 = w2 + self.d * c;
        (0..self.d)
            .map(|r| p[b2 + r] + p[w2 + r * c..w2 + (r + 1) * c].iter().zip(hidden).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    /// Embedding and the hidden activations needed by [`Self::backward`].
    pub fn forward(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (c, p) = (self.c, &self.params);
        let hidden: Vec<f64> = (0..c)
            .map(|r| (p[c * c + r] + p[r * c..(r + 1) * c].iter().zip(v).map(|(w, x)| w * x).sum::<f64>()).tanh())
            .collect();
        let u = self.project(&hidden);
        let norm = l2(&u);
        (u.iter().map(|x| x / norm).collect(), hidden)
    }

    /// Accumulates the parameter gradient into `grad` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, v: &[f64], hidden: &[f64], gz: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (c, p) = (self.c, &self.params);
        let w2 = c * c + c;
        let b2 = w2 + self.d * c;
        let u = self.project(hidden);
        let norm = l2(&u);
        let zg: f64 = u.iter().zip(gz).map(|(a, b)| a * b).sum::<f64>() / norm;
        let gu: Vec<f64> = u.iter().zip(gz).map(|(a, g)| (g - a / norm * zg) / norm).collect();
        let mut gh = vec![0.0; c];
        for (r, &g) in gu.iter().enumerate() {
            grad[b2 + r] += g;
            for q in 0..c {
                grad[w2 + r * c + q] += g * hidden[q];
                gh[q] += g * p[w2 + r * c + q];
            }
        }
        let mut gv = vec![0.0; c];
        for r in 0..c {
            let gzr = gh[r] * (1.0 - hidden[r] * hidden[r]);
            grad[c * c + r] += gzr;
            for q in 0..c {
                grad[r * c + q] += gzr * v[q];
                gv[q] += gzr * p[r * c + q];
            }
        }
        gv
    }
}

/// Euclidean norm, floored so that an all-zero output stays finite.
fn l2(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)
}
