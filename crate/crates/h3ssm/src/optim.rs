//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable tensor. `decay` controls weight-decay eligibility:
/// matrix weights decay, while biases, norms, and embeddings do not
/// (GPT-style grouping).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, tensor: Tensor, decay: bool) -> Self {
        Param {
            name: name.into(),
            tensor,
            decay,
        }
    }
}

/// Flat parameter store; layers keep indices into it.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> usize {
        self.params.push(Param::new(name, tensor, decay));
        self.params.len() - 1
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.params[idx].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Config(format!(
                "{} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.tensor.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("{}: {:?} vs {:?}", p.name, p.tensor.shape(), g.shape()),
                ));
            }
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((x, &gi), (mi, vi)) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= self.lr * (mhat / (vhat.sqrt() + self.eps) + wd * *x);
            }
        }
        Ok(())
    }
}
