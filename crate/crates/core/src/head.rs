//! Expanding linear classifier: one head per task, concatenated at inference.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Parameters, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct ClassifierHead<T> {
    pub task_id: usize,
    /// `[D, classes]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    /// Zero-initialised and trainable.
    pub fn zeros(task_id: usize, embed_dim: usize, classes: usize) -> Self {
        Self {
            task_id,
            weight: Tensor::zeros(&[embed_dim, classes]).trainable(true),
            bias: Tensor::zeros(&[classes]).trainable(true),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }
}

/// Rows grow by one head per task; columns follow task order.
#[derive(Debug, Clone, Default)]
pub struct Classifier<T> {
    pub heads: Vec<ClassifierHead<T>>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new() -> Self {
        Self { heads: Vec::new() }
    }

    pub fn num_classes(&self) -> usize {
        self.heads.iter().map(|h| h.num_classes()).sum()
    }

    /// Logits over every class seen so far, `[B, C]`.
    pub fn logits(&self, tape: &Tape<T>, features: Var) -> Result<Var> {
        if self.heads.is_empty() {
            return Err(dim_err("classifier has no heads"));
        }
        let parts = self
            .heads
            .iter()
            .map(|h| {
                let w = tape.leaf(&h.weight);
                let b = tape.leaf(&h.bias);
                tape.linear(features, w, b)
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat(&parts, 1)
    }
}

impl<T: Scalar> Parameters<T> for ClassifierHead<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("classifier.{}.weight", self.task_id), &self.weight);
        f(&format!("classifier.{}.bias", self.task_id), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(
            &format!("classifier.{}.weight", self.task_id),
            &mut self.weight,
        );
        f(&format!("classifier.{}.bias", self.task_id), &mut self.bias);
    }
}

impl<T: Scalar> Parameters<T> for Classifier<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for h in &self.heads {
            h.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for h in &mut self.heads {
            h.visit_mut(f);
        }
    }
}
