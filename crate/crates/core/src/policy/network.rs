//! One-hidden-layer actor-critic network with closed-form gradients.
//!
//! ```text
//! h      = tanh(W1 x + b1)
//! logits = Wp h + bp        pi(.|s) = softmax(logits)
//! q      = Wq h + bq
//! ```
//! Matrices are stored row-major (`rows = outputs`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_actions: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub wp: Vec<f64>,
    pub bp: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = PolicyParams;

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QValues {
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, num_actions: usize) -> Self {
        PolicyParams {
            input_dim,
            hidden_dim,
            num_actions,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            wp: vec![0.0; num_actions * hidden_dim],
            bp: vec![0.0; num_actions],
            wq: vec![0.0; num_actions * hidden_dim],
            bq: vec![0.0; num_actions],
        }
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        num_actions: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim, num_actions);
        let b1 = 1.0 / (input_dim.max(1) as f64).sqrt();
        let b2 = 1.0 / (hidden_dim.max(1) as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.gen_range(-b1..=b1));
        p.wp.iter_mut().for_each(|w| *w = rng.gen_range(-b2..=b2));
        p.wq.iter_mut().for_each(|w| *w = rng.gen_range(-b2..=b2));
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim, self.hidden_dim, self.num_actions)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.input_dim, self.hidden_dim, self.num_actions)
    }

    pub fn check_shapes(&self) -> Result<(), ModelError> {
        let (d, h, a) = self.dims();
        let expect = [h * d, h, a * h, a, a * h, a];
        let got = [
            self.w1.len(),
            self.b1.len(),
            self.wp.len(),
            self.bp.len(),
            self.wq.len(),
            self.bq.len(),
        ];
        for (e, g) in expect.into_iter().zip(got) {
            if e != g {
                return Err(ModelError::DimensionMismatch { expected: e, got: g });
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn activations(&self, x: &[f64]) -> Result<Activations, ModelError> {
        self.check_input(x)?;
        let (d, h, a) = self.dims();
        let mut hidden = self.b1.clone();
        for (j, hj) in hidden.iter_mut().enumerate() {
            let row = &self.w1[j * d..(j + 1) * d];
            *hj = (*hj + dot(row, x)).tanh();
        }
        let mut logits = self.bp.clone();
        let mut q = self.bq.clone();
        for k in 0..a {
            logits[k] += dot(&self.wp[k * h..(k + 1) * h], &hidden);
            q[k] += dot(&self.wq[k * h..(k + 1) * h], &hidden);
        }
        Ok(Activations { hidden, logits, q })
    }

    pub fn policy_forward(&self, x: &[f64]) -> Result<ActionDistribution, ModelError> {
        Ok(ActionDistribution::from_logits(&self.activations(x)?.logits))
    }

    pub fn q_forward(&self, x: &[f64]) -> Result<QValues, ModelError> {
        Ok(QValues {
            values: self.activations(x)?.q,
        })
    }

    /// Parameter gradient given upstream gradients on the logits and on the
    /// Q outputs for input `x`.
    pub fn backward(
        &self,
        x: &[f64],
        acts: &Activations,
        d_logits: &[f64],
        d_q: &[f64],
    ) -> Result<Gradients, ModelError> {
        let mut g = self.zeros_like();
        self.backward_into(x, acts, d_logits, d_q, &mut g)?;
        Ok(g)
    }

    /// Accumulating form of [`PolicyParams::backward`]: adds into `g`.
    pub fn backward_into(
        &self,
        x: &[f64],
        acts: &Activations,
        d_logits: &[f64],
        d_q: &[f64],
        g: &mut Gradients,
    ) -> Result<(), ModelError> {
        self.check_input(x)?;
        let (d, h, a) = self.dims();
        for v in [d_logits, d_q] {
            if v.len() != a {
                return Err(ModelError::DimensionMismatch { expected: a, got: v.len() });
            }
        }
        let mut d_hidden = vec![0.0; h];
        for k in 0..a {
            let (gl, gq) = (d_logits[k], d_q[k]);
            if gl == 0.0 && gq == 0.0 {
                continue;
            }
            g.bp[k] += gl;
            g.bq[k] += gq;
            for j in 0..h {
                g.wp[k * h + j] += gl * acts.hidden[j];
                g.wq[k * h + j] += gq * acts.hidden[j];
                d_hidden[j] += gl * self.wp[k * h + j] + gq * self.wq[k * h + j];
            }
        }
        for j in 0..h {
            let dz = d_hidden[j] * (1.0 - acts.hidden[j] * acts.hidden[j]);
            if dz == 0.0 {
                continue;
            }
            g.b1[j] += dz;
            for i in 0..d {
                g.w1[j * d + i] += dz * x[i];
            }
        }
        Ok(())
    }

    fn slices(&self) -> [&Vec<f64>; 6] {
        [&self.w1, &self.b1, &self.wp, &self.bp, &self.wq, &self.bq]
    }

    fn slices_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.wp,
            &mut self.bp,
            &mut self.wq,
            &mut self.bq,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.slices().into_iter().flat_map(|s| s.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.slices_mut().into_iter().flat_map(|s| s.iter_mut())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ActionDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        ActionDistribution {
            probs: exps.into_iter().map(|e| e / z).collect(),
        }
    }

    pub fn uniform(n: usize) -> Self {
        ActionDistribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable action; ties go to the lowest id.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// `top(1) - top(2)` of the probabilities.
    pub fn top2_gap(&self) -> Result<f64, ModelError> {
        if self.probs.len() < 2 {
            return Err(ModelError::TooFewActions(self.probs.len()));
        }
        let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &p in &self.probs {
            if p > first {
                second = first;
                first = p;
            } else if p > second {
                second = p;
            }
        }
        Ok(first - second)
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

impl QValues {
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
