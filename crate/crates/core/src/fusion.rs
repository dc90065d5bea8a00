//! Soft task matching.
//!
//! Stage 1 runs the backbone with the uniform average of every task's
//! sub-prompts, softmaxes over all seen classes and sums the probabilities
//! per owning task. Stage 2 re-runs with the sub-prompts fused by those task
//! weights. Fusion happens on sub-prompts, after adapters and PIE.

use std::collections::HashMap;

use crate::backbone::{Backbone, LayerPrompt, PromptVars};
use crate::data::Image;
use crate::error::{contract, dim_err, Error, Result};
use crate::head::Classifier;
use crate::hlgp::{PromptGenerator, SubPromptSet};
use crate::scalar::Scalar;
use crate::tensor::{Parameters, Tape, Var};

/// Per-task fusion weights: non-negative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskWeights(Vec<f64>);

impl TaskWeights {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(contract("task weights need at least one task"));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Numeric(format!("invalid task weights {w:?}")));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Numeric(format!("task weights sum to {s}")));
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    fn one_hot(&self) -> Option<usize> {
        let hot = self.0.iter().position(|&x| x == 1.0)?;
        self.0
            .iter()
            .enumerate()
            .all(|(i, &x)| i == hot || x == 0.0)
            .then_some(hot)
    }
}

pub fn uniform_weights(tasks: usize) -> Result<TaskWeights> {
    if tasks == 0 {
        return Err(contract("uniform weights over zero tasks"));
    }
    TaskWeights::new(vec![1.0 / tasks as f64; tasks])
}

/// Sums class probabilities per owning task. `owner[c]` is the task of
/// column `c`. A single task gets exactly `[1]`.
pub fn aggregate_task_weights(probs: &[f64], owner: &[usize], tasks: usize) -> Result<TaskWeights> {
    if probs.len() != owner.len() {
        return Err(contract(format!(
            "{} probabilities for {} owned classes",
            probs.len(),
            owner.len()
        )));
    }
    if let Some(&bad) = owner.iter().find(|&&t| t >= tasks) {
        return Err(contract(format!(
            "class owned by unknown task {bad} of {tasks}"
        )));
    }
    if tasks == 1 {
        return TaskWeights::new(vec![1.0]);
    }
    let mut w = vec![0.0; tasks];
    for (&p, &t) in probs.iter().zip(owner) {
        w[t] += p;
    }
    TaskWeights::new(w)
}

/// `sum_tau w_tau * phi_tau` per layer and pathway.
pub fn fuse_subprompts<T: Scalar>(
    sets: &[&SubPromptSet<T>],
    w: &TaskWeights,
) -> Result<SubPromptSet<T>> {
    if sets.len() != w.len() {
        return Err(contract(format!(
            "{} weights for {} prompt sets",
            w.len(),
            sets.len()
        )));
    }
    if let Some(hot) = w.one_hot() {
        return Ok(sets[hot].clone());
    }
    let layers = sets[0].layers.len();
    if sets.iter().any(|s| s.layers.len() != layers) {
        return Err(dim_err("prompt sets differ in layer count"));
    }
    let mix = |pick: &dyn Fn(&LayerPrompt<T>) -> &[T], i: usize| {
        let n = pick(&sets[0].layers[i]).len();
        let mut acc = vec![T::zero(); n];
        for (s, &wt) in sets.iter().zip(w.as_slice()) {
            let wt = T::lit(wt);
            for (a, &x) in acc.iter_mut().zip(pick(&s.layers[i])) {
                *a += wt * x;
            }
        }
        acc
    };
    let out = (0..layers)
        .map(|i| {
            let shape = sets[0].layers[i].key.shape().to_vec();
            let key = mix(&|p| p.key.data(), i);
            let value = mix(&|p| p.value.data(), i);
            LayerPrompt::new(
                crate::Tensor::new(shape.clone(), key)?,
                crate::Tensor::new(shape, value)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubPromptSet { layers: out })
}

/// Per-task generators, cached sub-prompts of frozen tasks and class ownership.
#[derive(Debug, Clone, Default)]
pub struct PromptBank<T> {
    pub generators: Vec<PromptGenerator<T>>,
    frozen: Vec<Option<SubPromptSet<T>>>,
    class_ids: Vec<Vec<u32>>,
    column_of: HashMap<u32, usize>,
}

impl<T: Scalar> PromptBank<T> {
    pub fn new() -> Self {
        Self {
            generators: Vec::new(),
            frozen: Vec::new(),
            class_ids: Vec::new(),
            column_of: HashMap::new(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.column_of.len()
    }

    pub fn push(&mut self, generator: PromptGenerator<T>, classes: Vec<u32>) -> Result<()> {
        let t = self.generators.len();
        if generator.task_id() != t {
            return Err(contract(format!(
                "generator for task {} pushed as task {t}",
                generator.task_id()
            )));
        }
        if classes.is_empty() {
            return Err(Error::Data(format!("task {t} has no classes")));
        }
        let mut seen = std::collections::HashSet::new();
        for &c in &classes {
            if self.column_of.contains_key(&c) || !seen.insert(c) {
                return Err(Error::Data(format!(
                    "class {c} of task {t} is already owned"
                )));
            }
        }
        let base = self.column_of.len();
        for (k, &c) in classes.iter().enumerate() {
            self.column_of.insert(c, base + k);
        }
        self.generators.push(generator);
        self.frozen.push(None);
        self.class_ids.push(classes);
        Ok(())
    }

    pub fn class_ids(&self, task: usize) -> &[u32] {
        &self.class_ids[task]
    }

    /// Classifier column of a class id.
    pub fn column(&self, class: u32) -> Option<usize> {
        self.column_of.get(&class).copied()
    }

    /// Owning task of every classifier column, in column order.
    pub fn column_owners(&self) -> Vec<usize> {
        self.class_ids
            .iter()
            .enumerate()
            .flat_map(|(t, c)| std::iter::repeat_n(t, c.len()))
            .collect()
    }

    pub fn column_classes(&self) -> Vec<u32> {
        self.class_ids.iter().flatten().copied().collect()
    }

    /// Columns `[start, end)` owned by a task.
    pub fn column_range(&self, task: usize) -> std::ops::Range<usize> {
        let start: usize = self.class_ids[..task].iter().map(Vec::len).sum();
        start..start + self.class_ids[task].len()
    }

    /// Makes a task's generator non-trainable and caches its sub-prompts.
    pub fn freeze(&mut self, task: usize) -> Result<()> {
        let g = self
            .generators
            .get_mut(task)
            .ok_or_else(|| contract(format!("freezing unknown task {task}")))?;
        g.set_trainable(false);
        self.frozen[task] = Some(g.subprompts()?);
        Ok(())
    }

    pub fn is_frozen(&self, task: usize) -> bool {
        self.frozen.get(task).is_some_and(Option::is_some)
    }

    pub fn trainable_tasks(&self) -> Vec<usize> {
        (0..self.generators.len())
            .filter(|&t| self.generators[t].trainable_count() > 0)
            .collect()
    }

    pub fn subprompts(&self, task: usize) -> Result<SubPromptSet<T>> {
        match &self.frozen[task] {
            Some(s) => Ok(s.clone()),
            None => self.generators[task].subprompts(),
        }
    }

    /// Sub-prompts of every task as tape variables: frozen tasks are
    /// constants, live tasks are generated so gradients reach them.
    pub fn prompt_vars(
        &self,
        tape: &Tape<T>,
        tasks: std::ops::Range<usize>,
    ) -> Result<Vec<Vec<PromptVars>>> {
        tasks
            .map(|t| match &self.frozen[t] {
                Some(s) => Ok(s
                    .layers
                    .iter()
                    .map(|p| PromptVars {
                        key: tape.constant_tensor(&p.key),
                        value: tape.constant_tensor(&p.value),
                    })
                    .collect()),
                None => self.generators[t].generate(tape),
            })
            .collect()
    }
}

impl<T: Scalar> Parameters<T> for PromptBank<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &crate::Tensor<T>)) {
        for g in &self.generators {
            g.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut crate::Tensor<T>)) {
        for g in &mut self.generators {
            g.visit_mut(f);
        }
    }
}

/// Fuses per-task prompt variables on the tape.
///
/// `weights` is `[B, T]` (one row per sample) or a single row shared by the
/// batch. Shared rows give `[L, D]` prompts, per-sample rows `[B, L, D]`.
/// A single one-hot row returns that task's prompts untouched.
pub fn fuse_on_tape<T: Scalar>(
    tape: &Tape<T>,
    per_task: &[Vec<PromptVars>],
    weights: &[TaskWeights],
) -> Result<Vec<PromptVars>> {
    let t = per_task.len();
    if t == 0 || weights.is_empty() {
        return Err(contract(
            "fusion needs at least one task and one weight row",
        ));
    }
    if weights.iter().any(|w| w.len() != t) {
        return Err(contract(format!("weight rows must have {t} entries")));
    }
    if weights.len() == 1 {
        if let Some(hot) = weights[0].one_hot() {
            return Ok(per_task[hot].clone());
        }
    }
    let rows = weights.len();
    let wdata: Vec<T> = weights
        .iter()
        .flat_map(|w| w.as_slice().iter().map(|&x| T::lit(x)))
        .collect();
    let w = tape.constant(vec![rows, t], wdata)?;
    let layers = per_task[0].len();
    let fuse = |parts: Vec<Var>| -> Result<Var> {
        let shape = tape.shape(parts[0]);
        let flat = shape.iter().product::<usize>();
        let flat_parts = parts
            .iter()
            .map(|&p| tape.reshape(p, &[1, flat]))
            .collect::<Result<Vec<_>>>()?;
        let stacked = if flat_parts.len() == 1 {
            flat_parts[0]
        } else {
            tape.concat(&flat_parts, 0)?
        };
        let mixed = tape.matmul(w, stacked)?;
        if rows == 1 {
            tape.reshape(mixed, &shape)
        } else {
            let mut s = vec![rows];
            s.extend_from_slice(&shape);
            tape.reshape(mixed, &s)
        }
    };
    (0..layers)
        .map(|i| {
            Ok(PromptVars {
                key: fuse(per_task.iter().map(|p| p[i].key).collect())?,
                value: fuse(per_task.iter().map(|p| p[i].value).collect())?,
            })
        })
        .collect()
}

/// Outcome of two-stage inference for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub class_id: u32,
    pub weights: TaskWeights,
    /// Stage-2 logits over every seen class, in column order.
    pub logits: Vec<T>,
}

fn softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = i;
        }
    }
    best
}

/// Logits `[B, C]` with every task's sub-prompts fused by `weights`.
pub fn fused_logits<T: Scalar>(
    bank: &PromptBank<T>,
    backbone: &Backbone<T>,
    classifier: &Classifier<T>,
    images: &[&Image],
    weights: &[TaskWeights],
) -> Result<Vec<Vec<T>>> {
    let tape = Tape::new();
    let per_task = bank.prompt_vars(&tape, 0..bank.num_tasks())?;
    let fused = fuse_on_tape(&tape, &per_task, weights)?;
    let prompts: Vec<Option<PromptVars>> = fused.into_iter().map(Some).collect();
    let patches = backbone.patchify(images)?;
    let feats = backbone.forward_features(&tape, &patches, &prompts)?;
    let logits = classifier.logits(&tape, feats)?;
    let cols = tape.shape(logits)[1];
    Ok(tape.value(logits).chunks(cols).map(<[T]>::to_vec).collect())
}

/// Two forward passes per sample: uniform fusion, then task-weighted fusion.
pub fn two_stage_predict<T: Scalar>(
    bank: &PromptBank<T>,
    backbone: &Backbone<T>,
    classifier: &Classifier<T>,
    images: &[&Image],
) -> Result<Vec<Prediction<T>>> {
    if bank.is_empty() {
        return Err(contract("two-stage inference on an empty prompt bank"));
    }
    if classifier.num_classes() != bank.num_classes() {
        return Err(contract(format!(
            "classifier has {} columns, bank owns {} classes",
            classifier.num_classes(),
            bank.num_classes()
        )));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let tasks = bank.num_tasks();
    let owners = bank.column_owners();
    let stage1 = fused_logits(
        bank,
        backbone,
        classifier,
        images,
        &[uniform_weights(tasks)?],
    )?;
    let weights = stage1
        .iter()
        .map(|row| {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("non-finite stage-1 logits".into()));
            }
            aggregate_task_weights(&softmax_f64(row), &owners, tasks)
        })
        .collect::<Result<Vec<_>>>()?;
    let shared = weights.windows(2).all(|w| w[0] == w[1]);
    let stage2 = if shared {
        fused_logits(bank, backbone, classifier, images, &weights[..1])?
    } else {
        fused_logits(bank, backbone, classifier, images, &weights)?
    };
    let classes = bank.column_classes();
    Ok(stage2
        .into_iter()
        .zip(weights)
        .map(|(logits, weights)| Prediction {
            class_id: classes[argmax(&logits)],
            weights,
            logits,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn set(values: &[f64]) -> SubPromptSet<f64> {
        SubPromptSet {
            layers: values
                .iter()
                .map(|&v| {
                    LayerPrompt::new(Tensor::filled(&[1, 1], v), Tensor::filled(&[1, 1], -v))
                        .unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_weights(1).unwrap().as_slice(), &[1.0]);
        assert_eq!(uniform_weights(4).unwrap().as_slice(), &[0.25; 4]);
        assert!(matches!(uniform_weights(0), Err(Error::Contract(_))));
        for t in 1..40 {
            assert!((uniform_weights(t).unwrap().sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_examples() {
        let owner = [0, 0, 1, 1];
        let w = aggregate_task_weights(&[0.1, 0.2, 0.3, 0.4], &owner, 2).unwrap();
        assert!((w.as_slice()[0] - 0.3).abs() < 1e-15 && (w.as_slice()[1] - 0.7).abs() < 1e-15);
        assert_eq!(
            aggregate_task_weights(&[0.25; 4], &owner, 2)
                .unwrap()
                .as_slice(),
            &[0.5, 0.5]
        );
        assert_eq!(
            aggregate_task_weights(&[1.0, 0.0, 0.0, 0.0], &owner, 2)
                .unwrap()
                .as_slice(),
            &[1.0, 0.0]
        );
        assert!(matches!(
            aggregate_task_weights(&[0.5, 0.5], &[0, 2], 2),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            aggregate_task_weights(&[1.0], &[0, 0], 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fuse_examples() {
        let a = set(&[2.0]);
        let b = set(&[4.0]);
        let half = TaskWeights::new(vec![0.5, 0.5]).unwrap();
        let f = fuse_subprompts(&[&a, &b], &half).unwrap();
        assert_eq!(f.layers[0].key.data(), &[3.0]);
        assert_eq!(f.layers[0].value.data(), &[-3.0]);
        let one = TaskWeights::new(vec![1.0]).unwrap();
        assert!(fuse_subprompts(&[&a], &one).unwrap().bit_eq(&a));
        let hot = TaskWeights::new(vec![0.0, 1.0]).unwrap();
        assert!(fuse_subprompts(&[&a, &b], &hot).unwrap().bit_eq(&b));
        assert!(matches!(
            fuse_subprompts(&[&a], &half),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn tape_fusion_matches_plain_fusion() {
        let a = set(&[2.0, 0.5]);
        let b = set(&[4.0, -1.5]);
        let c = set(&[1.0, 7.0]);
        let w = TaskWeights::new(vec![0.2, 0.3, 0.5]).unwrap();
        let plain = fuse_subprompts(&[&a, &b, &c], &w).unwrap();
        let tape = Tape::new();
        let vars: Vec<Vec<PromptVars>> = [&a, &b, &c]
            .iter()
            .map(|s| s.layers.iter().map(|p| p.on_tape(&tape)).collect())
            .collect();
        let fused = fuse_on_tape(&tape, &vars, std::slice::from_ref(&w)).unwrap();
        let on_tape = SubPromptSet::from_vars(&tape, &fused).unwrap();
        assert!(on_tape.bit_eq(&plain));

        // per-sample rows stack along a leading batch axis
        let w2 = TaskWeights::new(vec![1.0, 0.0, 0.0]).unwrap();
        let fused = fuse_on_tape(&tape, &vars, &[w.clone(), w2]).unwrap();
        assert_eq!(tape.shape(fused[0].key), vec![2, 1, 1]);
        let v = tape.value(fused[1].key);
        assert_eq!(v[0], plain.layers[1].key.data()[0]);
        assert_eq!(v[1], 0.5);
    }

    #[test]
    fn bank_rejects_overlapping_classes() {
        use crate::backbone::VitConfig;
        use crate::hlgp::PromptConfig;
        use rand::SeedableRng;
        let vit = VitConfig {
            embed_dim: 8,
            num_layers: 2,
            prompt_length: 2,
            ..VitConfig::default()
        };
        let cfg = PromptConfig {
            shared_layers: 1,
            rank: 2,
            ..PromptConfig::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut bank = PromptBank::<f64>::new();
        bank.push(
            PromptGenerator::init(0, &vit, &cfg, &mut rng).unwrap(),
            vec![3, 4],
        )
        .unwrap();
        let g1 = PromptGenerator::init(1, &vit, &cfg, &mut rng).unwrap();
        assert!(matches!(
            bank.push(g1.clone(), vec![4, 5]),
            Err(Error::Data(_))
        ));
        bank.push(g1, vec![5, 6]).unwrap();
        assert_eq!(bank.column_owners(), vec![0, 0, 1, 1]);
        assert_eq!(bank.column(5), Some(2));
        assert_eq!(bank.column_range(1), 2..4);
        bank.freeze(0).unwrap();
        assert_eq!(bank.trainable_tasks(), vec![1]);
        assert!(bank.is_frozen(0) && !bank.is_frozen(1));
    }
}
