//! Continual training loop and backbone pretraining.
//!
//! Per task: `init_task` (fresh generator for task 0, a fork of task `t-1`
//! afterwards, a zero classifier head), Adam on cross-entropy masked to the
//! current task's classes, freeze, then two-stage evaluation on every seen
//! task. During training the current task's sub-prompts are fused with the
//! frozen ones under uniform weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, PromptVars, VitConfig};
use crate::data::{batches, derive_seed, generate_stream, Image, SyntheticSpec, Task, TaskStream};
use crate::error::{contract, Error, Result};
use crate::fusion::{fuse_on_tape, two_stage_predict, uniform_weights, PromptBank};
use crate::head::{Classifier, ClassifierHead};
use crate::hlgp::{PromptConfig, PromptGenerator};
use crate::metrics::{accuracy_percent, AccuracyMatrix, PredictionLog};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::{Parameters, Tape};

/// Test images per inference batch. Results do not depend on it.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainFusion {
    /// Uniform fusion over tasks `0..=t`.
    Uniform,
    /// The current task's sub-prompts alone.
    CurrentOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_per_task: usize,
    pub seed: u64,
    pub train_fusion: TrainFusion,
    pub adam: AdamConfig,
    pub prompt: PromptConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 24,
            epochs_per_task: 10,
            seed: 0,
            train_fusion: TrainFusion::Uniform,
            adam: AdamConfig::default(),
            prompt: PromptConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, vit: &VitConfig) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs_per_task == 0 {
            return Err(Error::Config(
                "learning rate, batch size and epochs per task must be positive".into(),
            ));
        }
        vit.validate()?;
        self.prompt.validate(vit)
    }
}

/// Where a stream run stands: tasks fully finished, epochs of the next.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub tasks_done: usize,
    pub epochs_done: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub task: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Percent, over current-task classes.
    pub accuracy: f64,
}

#[derive(Debug)]
pub struct ContinualState<T> {
    pub config: TrainConfig,
    pub backbone: Backbone<T>,
    pub bank: PromptBank<T>,
    pub classifier: Classifier<T>,
    pub optimizer: Adam<T>,
    pub progress: Progress,
    pub accuracy: AccuracyMatrix,
    pub logs: Vec<PredictionLog>,
    pub history: Vec<EpochSummary>,
    /// Backbone content hash when the run started.
    pub backbone_hash: String,
}

impl<T: Scalar> ContinualState<T> {
    /// Refuses a backbone that still has trainable tensors.
    pub fn new(backbone: Backbone<T>, config: TrainConfig) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(contract("continual training needs a frozen backbone"));
        }
        config.validate(&backbone.config)?;
        let optimizer = Adam::new(config.learning_rate, config.adam)?;
        let backbone_hash = backbone.content_hash();
        Ok(Self {
            config,
            backbone,
            bank: PromptBank::new(),
            classifier: Classifier::new(),
            optimizer,
            progress: Progress::default(),
            accuracy: AccuracyMatrix::new(),
            logs: Vec::new(),
            history: Vec::new(),
            backbone_hash,
        })
    }

    pub fn vit(&self) -> &VitConfig {
        &self.backbone.config
    }

    /// Adds task `t`'s generator and classifier head.
    pub fn init_task(&mut self, t: usize, classes: &[u32]) -> Result<()> {
        if t != self.progress.tasks_done || t != self.bank.num_tasks() {
            return Err(contract(format!(
                "task {t} initialised with {} tasks finished and {} in the bank",
                self.progress.tasks_done,
                self.bank.num_tasks()
            )));
        }
        let generator = if t == 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[0x1417, 0]));
            PromptGenerator::init(0, self.vit(), &self.config.prompt, &mut rng)?
        } else {
            self.bank.generators[t - 1].fork(t)
        };
        self.bank.push(generator, classes.to_vec())?;
        let dim = self.vit().embed_dim;
        self.classifier
            .heads
            .push(ClassifierHead::zeros(t, dim, classes.len()));
        self.optimizer.reset();
        self.progress.epochs_done = 0;
        Ok(())
    }

    fn current_task(&self) -> Result<usize> {
        let t = self.progress.tasks_done;
        if self.bank.num_tasks() != t + 1 {
            return Err(contract(format!("task {t} has not been initialised")));
        }
        Ok(t)
    }

    /// Training-time layer prompts for task `t`.
    pub fn training_prompts(&self, tape: &Tape<T>, t: usize) -> Result<Vec<PromptVars>> {
        match self.config.train_fusion {
            TrainFusion::CurrentOnly => self.bank.generators[t].generate(tape),
            TrainFusion::Uniform => {
                let per_task = self.bank.prompt_vars(tape, 0..t + 1)?;
                fuse_on_tape(tape, &per_task, &[uniform_weights(t + 1)?])
            }
        }
    }

    /// Masked training loss of one batch, as a tape variable.
    pub fn batch_loss(
        &self,
        tape: &Tape<T>,
        images: &[&Image],
        labels: &[u32],
    ) -> Result<(crate::Var, crate::Var)> {
        let t = self.current_task()?;
        let prompts: Vec<Option<PromptVars>> = self
            .training_prompts(tape, t)?
            .into_iter()
            .map(Some)
            .collect();
        let patches = self.backbone.patchify(images)?;
        let feats = self.backbone.forward_features(tape, &patches, &prompts)?;
        let logits = self.classifier.logits(tape, feats)?;
        let range = self.bank.column_range(t);
        let mask: Vec<bool> = (0..self.classifier.num_classes())
            .map(|c| range.contains(&c))
            .collect();
        let cols = labels
            .iter()
            .map(|&l| {
                self.bank
                    .column(l)
                    .filter(|c| range.contains(c))
                    .ok_or_else(|| Error::Data(format!("label {l} is not a class of task {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = tape.cross_entropy(logits, &cols, Some(&mask))?;
        Ok((loss, logits))
    }

    /// One epoch of Adam over the current task's training set.
    pub fn train_epoch(&mut self, task: &Task) -> Result<EpochSummary> {
        let t = self.current_task()?;
        if task.train.is_empty() {
            return Err(contract(format!("task {t} has no training data")));
        }
        let epoch = self.progress.epochs_done;
        let range = self.bank.column_range(t);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for batch in batches(task, self.config.batch_size, self.config.seed, epoch)? {
            let tape = Tape::new();
            let (loss, logits) = self.batch_loss(&tape, &batch.images, &batch.labels)?;
            let grads = tape.backward(loss)?;
            let b = batch.labels.len();
            loss_sum += tape.item(loss)?.as_f64() * b as f64;
            let cols = tape.shape(logits)[1];
            let values = tape.value(logits);
            for (row, &label) in values.chunks(cols).zip(&batch.labels) {
                let mut best = range.start;
                for c in range.clone() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                hits += usize::from(self.bank.column(label) == Some(best));
            }
            seen += b;
            let generator = &mut self.bank.generators[t];
            let head = &mut self.classifier.heads[t];
            generator.zero_grads();
            head.zero_grads();
            generator.absorb_grads(&grads)?;
            head.absorb_grads(&grads)?;
            self.optimizer.step(&mut [generator, head])?;
        }
        self.progress.epochs_done += 1;
        let summary = EpochSummary {
            task: t,
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: 100.0 * hits as f64 / seen as f64,
        };
        self.history.push(summary);
        Ok(summary)
    }

    /// Freezes the current task's generator and head without scoring.
    pub fn freeze_current(&mut self) -> Result<usize> {
        let t = self.current_task()?;
        self.bank.freeze(t)?;
        self.classifier.heads[t].set_trainable(false);
        self.optimizer.reset();
        Ok(t)
    }

    /// Freezes the current task and scores every seen task.
    pub fn finish_task(&mut self, stream: &TaskStream) -> Result<Vec<f64>> {
        let t = self.freeze_current()?;
        let mut row = Vec::with_capacity(t + 1);
        for j in 0..=t {
            let task = &stream.tasks[j];
            let predicted =
                self.predict(&task.test.iter().map(|s| &s.image).collect::<Vec<_>>())?;
            let labels: Vec<u32> = task.test.iter().map(|s| s.label).collect();
            row.push(accuracy_percent(&predicted, &labels)?);
            self.logs.push(PredictionLog {
                after_task: t,
                task: j,
                predicted,
                labels,
            });
        }
        self.accuracy.push_row(row.clone())?;
        self.progress = Progress {
            tasks_done: t + 1,
            epochs_done: 0,
        };
        Ok(row)
    }

    /// Two-stage predictions, in chunks.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let preds = two_stage_predict(&self.bank, &self.backbone, &self.classifier, chunk)?;
            out.extend(preds.into_iter().map(|p| p.class_id));
        }
        Ok(out)
    }

    /// Runs (or resumes) the stream. With `stop = Some((t, e))` the run
    /// halts right before epoch `e` of task `t` and returns `false`.
    pub fn run_stream(
        &mut self,
        stream: &TaskStream,
        stop: Option<(usize, usize)>,
    ) -> Result<bool> {
        stream.validate()?;
        if stream.tasks.is_empty() {
            return Err(contract("empty task stream"));
        }
        if self.progress.tasks_done > stream.tasks.len() {
            return Err(contract(
                "state has finished more tasks than the stream holds",
            ));
        }
        for t in self.progress.tasks_done..stream.tasks.len() {
            let task = &stream.tasks[t];
            if task.task_id != t {
                return Err(Error::Data(format!(
                    "task at position {t} is labelled {}",
                    task.task_id
                )));
            }
            if self.bank.num_tasks() == t {
                self.init_task(t, &task.class_ids)?;
            } else if self.bank.class_ids(t) != task.class_ids.as_slice() {
                return Err(contract(format!("resumed task {t} has different classes")));
            }
            while self.progress.epochs_done < self.config.epochs_per_task {
                if stop == Some((t, self.progress.epochs_done)) {
                    return Ok(false);
                }
                self.train_epoch(task)?;
            }
            self.finish_task(stream)?;
        }
        self.check_backbone()?;
        Ok(true)
    }

    pub fn check_backbone(&self) -> Result<()> {
        let now = self.backbone.content_hash();
        if now != self.backbone_hash {
            return Err(contract(format!(
                "backbone changed during training: {} -> {now}",
                self.backbone_hash
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// The base split: a class range disjoint from the continual stream.
    pub data: SyntheticSpec,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSpec {
                tasks: 1,
                classes_per_task: 16,
                train_per_class: 32,
                test_per_class: 8,
                noise: 0.2,
                seed: 1000,
                first_class: 96,
                ..SyntheticSpec::default()
            },
            epochs: 12,
            learning_rate: 3e-3,
            batch_size: 32,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub backbone_hash: String,
}

fn class_columns(task: &Task) -> impl Fn(u32) -> usize + '_ {
    move |label| {
        task.class_ids
            .iter()
            .position(|&c| c == label)
            .expect("validated label")
    }
}

fn head_accuracy<T: Scalar>(
    backbone: &Backbone<T>,
    head: &Classifier<T>,
    task: &Task,
    test: bool,
) -> Result<f64> {
    let samples = if test { &task.test } else { &task.train };
    let col = class_columns(task);
    let mut hits = 0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let tape = Tape::new();
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let feats = backbone.forward_features(&tape, &backbone.patchify(&images)?, &[])?;
        let logits = head.logits(&tape, feats)?;
        let cols = tape.shape(logits)[1];
        for (row, s) in tape.value(logits).chunks(cols).zip(chunk) {
            let mut best = 0;
            for c in 0..cols {
                if row[c] > row[best] {
                    best = c;
                }
            }
            hits += usize::from(best == col(s.label));
        }
    }
    if samples.is_empty() {
        return Err(contract("accuracy over an empty split"));
    }
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

/// Trains a surrogate backbone (plus a throwaway head) on the base split,
/// then freezes it.
pub fn pretrain_backbone<T: Scalar>(
    vit: &VitConfig,
    cfg: &PretrainConfig,
) -> Result<(Backbone<T>, PretrainReport)> {
    vit.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "pretraining needs positive epochs and batch size".into(),
        ));
    }
    let spec = SyntheticSpec {
        tasks: 1,
        image_size: vit.image_size,
        channels: vit.channels,
        ..cfg.data.clone()
    };
    let stream = generate_stream(&spec)?;
    let task = &stream.tasks[0];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut backbone = Backbone::<T>::init(vit, &mut rng)?;
    let mut head = Classifier::new();
    head.heads.push(ClassifierHead::zeros(
        0,
        vit.embed_dim,
        task.class_ids.len(),
    ));
    let mut opt = Adam::new(cfg.learning_rate, AdamConfig::default())?;
    let col = class_columns(task);
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let (mut total, mut n) = (0.0, 0usize);
        for batch in batches(task, cfg.batch_size, cfg.seed, epoch)? {
            let tape = Tape::new();
            let feats =
                backbone.forward_features(&tape, &backbone.patchify(&batch.images)?, &[])?;
            let logits = head.logits(&tape, feats)?;
            let labels: Vec<usize> = batch.labels.iter().map(|&l| col(l)).collect();
            let loss = tape.cross_entropy(logits, &labels, None)?;
            let grads = tape.backward(loss)?;
            total += tape.item(loss)?.as_f64() * labels.len() as f64;
            n += labels.len();
            backbone.zero_grads();
            head.zero_grads();
            backbone.absorb_grads(&grads)?;
            head.absorb_grads(&grads)?;
            opt.step(&mut [&mut backbone, &mut head])?;
        }
        final_loss = total / n as f64;
    }
    backbone.freeze();
    backbone.reset_forward_passes();
    let report = PretrainReport {
        epochs: cfg.epochs,
        final_loss,
        train_accuracy: head_accuracy(&backbone, &head, task, false)?,
        test_accuracy: head_accuracy(&backbone, &head, task, true)?,
        backbone_hash: backbone.content_hash(),
    };
    backbone.reset_forward_passes();
    Ok((backbone, report))
}
