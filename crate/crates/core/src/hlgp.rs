//! Hierarchical layer-grouped prompt generation.
//!
//! A task's root prompt is split into key and value halves `k_t`, `v_t`
//! (each `[L, D]`). Layers are partitioned into contiguous groups of `s`;
//! each group owns one bottleneck adapter per pathway, mapping the root
//! half to the group's implicit prompt:
//!
//! ```text
//! theta_l = up_k(gelu(down_k(k_t) + b_k)) + c_k        (key pathway)
//! chi_l   = up_v(gelu(down_v(v_t) + b_v)) + c_v        (value pathway)
//! ```
//!
//! Layer `i` in group `l` then receives `phi_i = theta_l + beta_i` and
//! `psi_i = chi_l + beta_i`, where the position incentive embedding
//! `beta_i` is one tensor shared by both pathways.
//!
//! The independent layer-wise generator (one trainable key/value pair per
//! layer, no adapters) is the comparison baseline.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{LayerPrompt, PromptVars, VitConfig};
use crate::error::{contract, dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Parameters, Tape, Tensor, Var};

/// Standard deviation of the root-prompt initialisation.
pub const ROOT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    HlgpPie,
    Hlgp,
    IndependentLayerwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PieMode {
    Shared,
    NonShared,
    Sinusoidal,
    None,
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PromptMode::HlgpPie => "hlgp_pie",
            PromptMode::Hlgp => "hlgp",
            PromptMode::IndependentLayerwise => "independent_layerwise",
        })
    }
}

impl std::fmt::Display for PieMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PieMode::Shared => "shared",
            PieMode::NonShared => "non_shared",
            PieMode::Sinusoidal => "sinusoidal",
            PieMode::None => "none",
        })
    }
}

/// Prompt topology knobs. Length and width come from [`VitConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub mode: PromptMode,
    pub pie: PieMode,
    /// Layers per group, `s`.
    pub shared_layers: usize,
    /// Adapter bottleneck rank, `r`.
    pub rank: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::HlgpPie,
            pie: PieMode::Shared,
            shared_layers: 4,
            rank: 16,
        }
    }
}

impl PromptConfig {
    /// `hlgp` always runs without PIE; the layer-wise baseline has none either.
    pub fn effective_pie(&self) -> PieMode {
        match self.mode {
            PromptMode::HlgpPie => self.pie,
            PromptMode::Hlgp | PromptMode::IndependentLayerwise => PieMode::None,
        }
    }

    pub fn validate(&self, vit: &VitConfig) -> Result<()> {
        if self.mode != PromptMode::IndependentLayerwise {
            partition_layers(vit.num_layers, self.shared_layers)?;
            if self.rank == 0 || self.rank >= vit.embed_dim {
                return Err(Error::Config(format!(
                    "adapter rank {} must be in [1, {})",
                    self.rank, vit.embed_dim
                )));
            }
        }
        if vit.prompt_length == 0 {
            return Err(Error::Config(
                "prompt length must be positive for prompt tuning".into(),
            ));
        }
        Ok(())
    }
}

/// Contiguous layer groups covering `[0, m)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    pub num_layers: usize,
    pub shared_layers: usize,
    pub groups: Vec<Range<usize>>,
}

impl GroupPartition {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_of(&self, layer: usize) -> usize {
        layer / self.shared_layers
    }
}

pub fn partition_layers(m: usize, s: usize) -> Result<GroupPartition> {
    if m == 0 || s == 0 {
        return Err(Error::Config(format!(
            "cannot partition {m} layers into groups of {s}"
        )));
    }
    if !m.is_multiple_of(s) {
        return Err(Error::Config(format!(
            "{s} shared layers does not divide {m} layers"
        )));
    }
    Ok(GroupPartition {
        num_layers: m,
        shared_layers: s,
        groups: (0..m / s).map(|g| g * s..(g + 1) * s).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pathway {
    Key,
    Value,
}

impl Pathway {
    fn name(self) -> &'static str {
        match self {
            Pathway::Key => "key",
            Pathway::Value => "value",
        }
    }
}

/// Bottleneck `D -> r -> D` adapter for one (group, pathway). No residual.
#[derive(Debug, Clone)]
pub struct GroupAdapter<T> {
    pub group: usize,
    pub pathway: Pathway,
    /// `[D, r]`
    pub down: Tensor<T>,
    pub down_bias: Tensor<T>,
    /// `[r, D]`
    pub up: Tensor<T>,
    pub up_bias: Tensor<T>,
}

impl<T: Scalar> GroupAdapter<T> {
    /// Down-projection uniform in `±1/sqrt(D)`, everything else zero, so the
    /// initial implicit prompt is exactly zero.
    pub fn init(
        group: usize,
        pathway: Pathway,
        dim: usize,
        rank: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rank == 0 || rank >= dim {
            return Err(Error::Config(format!(
                "adapter rank {rank} must be in [1, {dim})"
            )));
        }
        Ok(Self {
            group,
            pathway,
            down: Tensor::uniform(&[dim, rank], 1.0 / (dim as f64).sqrt(), rng).trainable(true),
            down_bias: Tensor::zeros(&[rank]).trainable(true),
            up: Tensor::zeros(&[rank, dim]).trainable(true),
            up_bias: Tensor::zeros(&[dim]).trainable(true),
        })
    }

    pub fn rank(&self) -> usize {
        self.down_bias.numel()
    }

    pub fn project(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.down.shape()[0] {
            return Err(dim_err(format!(
                "adapter input {shape:?} for down-projection {:?}",
                self.down.shape()
            )));
        }
        let down = tape.leaf(&self.down);
        let db = tape.leaf(&self.down_bias);
        let h = tape.linear(x, down, db)?;
        let h = tape.gelu(h);
        let up = tape.leaf(&self.up);
        let ub = tape.leaf(&self.up_bias);
        tape.linear(h, up, ub)
    }

    fn forked(&self) -> Self {
        Self {
            group: self.group,
            pathway: self.pathway,
            down: self.down.fork(),
            down_bias: self.down_bias.fork(),
            up: self.up.fork(),
            up_bias: self.up_bias.fork(),
        }
    }

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        let p = format!("{prefix}.adapter.{}.{}", self.pathway.name(), self.group);
        f(&format!("{p}.down"), &self.down);
        f(&format!("{p}.down_bias"), &self.down_bias);
        f(&format!("{p}.up"), &self.up);
        f(&format!("{p}.up_bias"), &self.up_bias);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let p = format!("{prefix}.adapter.{}.{}", self.pathway.name(), self.group);
        f(&format!("{p}.down"), &mut self.down);
        f(&format!("{p}.down_bias"), &mut self.down_bias);
        f(&format!("{p}.up"), &mut self.up);
        f(&format!("{p}.up_bias"), &mut self.up_bias);
    }
}

/// Implicit prompt of one group: the adapter applied row-wise to a root half.
pub fn adapter_project<T: Scalar>(
    root_part: &Tensor<T>,
    adapter: &GroupAdapter<T>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let x = tape.constant_tensor(root_part);
    let y = adapter.project(&tape, x)?;
    Ok(tape.to_tensor(y))
}

/// `implicit + beta`, elementwise.
pub fn apply_pie<T: Scalar>(implicit: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    if implicit.shape() != beta.shape() {
        return Err(dim_err(format!(
            "position embedding {:?} for implicit prompt {:?}",
            beta.shape(),
            implicit.shape()
        )));
    }
    Tensor::new(
        implicit.shape().to_vec(),
        implicit
            .data()
            .iter()
            .zip(beta.data())
            .map(|(&a, &b)| a + b)
            .collect(),
    )
}

/// Fixed sinusoidal encoding of layer index `layer`, repeated over the `L` prompt rows.
pub fn sinusoidal_offset<T: Scalar>(layer: usize, len: usize, dim: usize) -> Tensor<T> {
    let pos = layer as f64;
    let row: Vec<T> = (0..dim)
        .map(|j| {
            let pair = (j - j % 2) as f64;
            let angle = pos / 10000f64.powf(pair / dim as f64);
            T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect();
    Tensor::from_fn(&[len, dim], |i| row[i % dim])
}

#[derive(Debug, Clone)]
pub struct RootPrompt<T> {
    pub task_id: usize,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
}

/// Per-layer position incentive embeddings of one task.
#[derive(Debug, Clone)]
pub struct PieTable<T> {
    pub task_id: usize,
    pub mode: PieMode,
    /// One `[L, D]` offset per layer; empty for [`PieMode::None`]. Shared
    /// mode adds these to both pathways.
    pub key_offsets: Vec<Tensor<T>>,
    /// Only populated in [`PieMode::NonShared`].
    pub value_offsets: Vec<Tensor<T>>,
}

impl<T: Scalar> PieTable<T> {
    pub fn init(task_id: usize, mode: PieMode, layers: usize, len: usize, dim: usize) -> Self {
        let learned = |_| Tensor::zeros(&[len, dim]).trainable(true);
        let (key_offsets, value_offsets) = match mode {
            PieMode::None => (vec![], vec![]),
            PieMode::Shared => ((0..layers).map(learned).collect(), vec![]),
            PieMode::NonShared => (
                (0..layers).map(learned).collect(),
                (0..layers).map(learned).collect(),
            ),
            PieMode::Sinusoidal => (
                (0..layers)
                    .map(|i| sinusoidal_offset(i, len, dim))
                    .collect(),
                vec![],
            ),
        };
        Self {
            task_id,
            mode,
            key_offsets,
            value_offsets,
        }
    }

    pub fn key_offset(&self, layer: usize) -> Option<&Tensor<T>> {
        self.key_offsets.get(layer)
    }

    pub fn value_offset(&self, layer: usize) -> Option<&Tensor<T>> {
        match self.mode {
            PieMode::NonShared => self.value_offsets.get(layer),
            _ => self.key_offsets.get(layer),
        }
    }
}

/// Root prompt, per-group adapters and PIE of one task.
#[derive(Debug, Clone)]
pub struct HierarchicalPrompt<T> {
    pub partition: GroupPartition,
    pub root: RootPrompt<T>,
    pub key_adapters: Vec<GroupAdapter<T>>,
    pub value_adapters: Vec<GroupAdapter<T>>,
    pub pie: PieTable<T>,
}

impl<T: Scalar> HierarchicalPrompt<T> {
    pub fn init(
        task_id: usize,
        vit: &VitConfig,
        cfg: &PromptConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let partition = partition_layers(vit.num_layers, cfg.shared_layers)?;
        let (len, dim) = (vit.prompt_length, vit.embed_dim);
        let root = RootPrompt {
            task_id,
            key: Tensor::randn(&[len, dim], ROOT_INIT_STD, rng).trainable(true),
            value: Tensor::randn(&[len, dim], ROOT_INIT_STD, rng).trainable(true),
        };
        let mut key_adapters = Vec::new();
        let mut value_adapters = Vec::new();
        for g in 0..partition.num_groups() {
            key_adapters.push(GroupAdapter::init(g, Pathway::Key, dim, cfg.rank, rng)?);
            value_adapters.push(GroupAdapter::init(g, Pathway::Value, dim, cfg.rank, rng)?);
        }
        let pie = PieTable::init(task_id, cfg.effective_pie(), vit.num_layers, len, dim);
        Ok(Self {
            partition,
            root,
            key_adapters,
            value_adapters,
            pie,
        })
    }

    /// Implicit prompts `(theta_l, chi_l)` of every group, before PIE.
    pub fn implicit_vars(&self, tape: &Tape<T>) -> Result<Vec<(Var, Var)>> {
        let n = self.partition.num_groups();
        if self.key_adapters.len() != n || self.value_adapters.len() != n {
            return Err(contract(format!(
                "{n} groups but {} key and {} value adapters",
                self.key_adapters.len(),
                self.value_adapters.len()
            )));
        }
        let k = tape.leaf(&self.root.key);
        let v = tape.leaf(&self.root.value);
        self.key_adapters
            .iter()
            .zip(&self.value_adapters)
            .map(|(ka, va)| Ok((ka.project(tape, k)?, va.project(tape, v)?)))
            .collect()
    }

    pub fn generate(&self, tape: &Tape<T>) -> Result<Vec<PromptVars>> {
        let implicit = self.implicit_vars(tape)?;
        let m = self.partition.num_layers;
        if self.pie.mode != PieMode::None && self.pie.key_offsets.len() != m {
            return Err(contract(format!(
                "position table has {} entries for {m} layers",
                self.pie.key_offsets.len()
            )));
        }
        (0..m)
            .map(|layer| {
                let (theta, chi) = implicit[self.partition.group_of(layer)];
                Ok(match self.pie.mode {
                    PieMode::None => PromptVars {
                        key: theta,
                        value: chi,
                    },
                    PieMode::Shared | PieMode::Sinusoidal => {
                        let beta = tape.leaf(&self.pie.key_offsets[layer]);
                        PromptVars {
                            key: tape.add(theta, beta)?,
                            value: tape.add(chi, beta)?,
                        }
                    }
                    PieMode::NonShared => {
                        let bk = tape.leaf(&self.pie.key_offsets[layer]);
                        let bv = tape.leaf(&self.pie.value_offsets[layer]);
                        PromptVars {
                            key: tape.add(theta, bk)?,
                            value: tape.add(chi, bv)?,
                        }
                    }
                })
            })
            .collect()
    }

    /// Implicit prompts as plain tensors, one `(theta_l, chi_l)` per group.
    pub fn implicit_prompts(&self) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let tape = Tape::new();
        Ok(self
            .implicit_vars(&tape)?
            .into_iter()
            .map(|(a, b)| (tape.to_tensor(a), tape.to_tensor(b)))
            .collect())
    }
}

/// Sub-prompts `(phi_i, psi_i)` of every layer for one task.
pub fn generate_subprompts<T: Scalar>(gen: &HierarchicalPrompt<T>) -> Result<SubPromptSet<T>> {
    let tape = Tape::new();
    let vars = gen.generate(&tape)?;
    SubPromptSet::from_vars(&tape, &vars)
}

/// Independent trainable key/value prompts for every layer.
#[derive(Debug, Clone)]
pub struct LayerwisePrompt<T> {
    pub task_id: usize,
    pub layers: Vec<LayerPrompt<T>>,
}

impl<T: Scalar> LayerwisePrompt<T> {
    pub fn init(task_id: usize, vit: &VitConfig, rng: &mut impl Rng) -> Self {
        let (len, dim) = (vit.prompt_length, vit.embed_dim);
        let layers = (0..vit.num_layers)
            .map(|_| LayerPrompt {
                key: Tensor::randn(&[len, dim], ROOT_INIT_STD, rng).trainable(true),
                value: Tensor::randn(&[len, dim], ROOT_INIT_STD, rng).trainable(true),
            })
            .collect();
        Self { task_id, layers }
    }
}

/// The per-task prompt generator stored in the bank.
#[derive(Debug, Clone)]
pub enum PromptGenerator<T> {
    Hierarchical(HierarchicalPrompt<T>),
    Layerwise(LayerwisePrompt<T>),
}

impl<T: Scalar> PromptGenerator<T> {
    pub fn init(
        task_id: usize,
        vit: &VitConfig,
        cfg: &PromptConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate(vit)?;
        Ok(match cfg.mode {
            PromptMode::IndependentLayerwise => {
                Self::Layerwise(LayerwisePrompt::init(task_id, vit, rng))
            }
            PromptMode::Hlgp | PromptMode::HlgpPie => {
                Self::Hierarchical(HierarchicalPrompt::init(task_id, vit, cfg, rng)?)
            }
        })
    }

    pub fn task_id(&self) -> usize {
        match self {
            Self::Hierarchical(h) => h.root.task_id,
            Self::Layerwise(l) => l.task_id,
        }
    }

    pub fn num_layers(&self) -> usize {
        match self {
            Self::Hierarchical(h) => h.partition.num_layers,
            Self::Layerwise(l) => l.layers.len(),
        }
    }

    /// Deep copy relabelled as `task_id`, with fresh identities, made
    /// trainable (fixed sinusoidal offsets stay frozen).
    pub fn fork(&self, task_id: usize) -> Self {
        match self {
            Self::Hierarchical(h) => {
                let fresh = |t: &Tensor<T>| t.fork().trainable(true);
                let pie = PieTable {
                    task_id,
                    mode: h.pie.mode,
                    key_offsets: h
                        .pie
                        .key_offsets
                        .iter()
                        .map(|t| {
                            if h.pie.mode == PieMode::Sinusoidal {
                                t.fork().trainable(false)
                            } else {
                                fresh(t)
                            }
                        })
                        .collect(),
                    value_offsets: h.pie.value_offsets.iter().map(fresh).collect(),
                };
                let mut out = HierarchicalPrompt {
                    partition: h.partition.clone(),
                    root: RootPrompt {
                        task_id,
                        key: fresh(&h.root.key),
                        value: fresh(&h.root.value),
                    },
                    key_adapters: h.key_adapters.iter().map(GroupAdapter::forked).collect(),
                    value_adapters: h.value_adapters.iter().map(GroupAdapter::forked).collect(),
                    pie,
                };
                for a in out
                    .key_adapters
                    .iter_mut()
                    .chain(out.value_adapters.iter_mut())
                {
                    for t in [&mut a.down, &mut a.down_bias, &mut a.up, &mut a.up_bias] {
                        t.set_trainable(true);
                    }
                }
                Self::Hierarchical(out)
            }
            Self::Layerwise(l) => Self::Layerwise(LayerwisePrompt {
                task_id,
                layers: l
                    .layers
                    .iter()
                    .map(|p| LayerPrompt {
                        key: p.key.fork().trainable(true),
                        value: p.value.fork().trainable(true),
                    })
                    .collect(),
            }),
        }
    }

    /// One `[L, D]` key/value pair per layer on `tape`.
    pub fn generate(&self, tape: &Tape<T>) -> Result<Vec<PromptVars>> {
        match self {
            Self::Hierarchical(h) => h.generate(tape),
            Self::Layerwise(l) => Ok(l.layers.iter().map(|p| p.on_tape(tape)).collect()),
        }
    }

    pub fn subprompts(&self) -> Result<SubPromptSet<T>> {
        let tape = Tape::new();
        let vars = self.generate(&tape)?;
        SubPromptSet::from_vars(&tape, &vars)
    }
}

impl<T: Scalar> Parameters<T> for PromptGenerator<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        let prefix = format!("task{}", self.task_id());
        match self {
            Self::Hierarchical(h) => {
                f(&format!("{prefix}.root.key"), &h.root.key);
                f(&format!("{prefix}.root.value"), &h.root.value);
                for a in h.key_adapters.iter().chain(&h.value_adapters) {
                    a.visit_named(&prefix, f);
                }
                let shared = h.pie.mode != PieMode::NonShared;
                for (i, t) in h.pie.key_offsets.iter().enumerate() {
                    let name = if shared {
                        format!("{prefix}.pie.{i}")
                    } else {
                        format!("{prefix}.pie.key.{i}")
                    };
                    f(&name, t);
                }
                for (i, t) in h.pie.value_offsets.iter().enumerate() {
                    f(&format!("{prefix}.pie.value.{i}"), t);
                }
            }
            Self::Layerwise(l) => {
                for (i, p) in l.layers.iter().enumerate() {
                    f(&format!("{prefix}.layer.{i}.key"), &p.key);
                    f(&format!("{prefix}.layer.{i}.value"), &p.value);
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let prefix = format!("task{}", self.task_id());
        match self {
            Self::Hierarchical(h) => {
                f(&format!("{prefix}.root.key"), &mut h.root.key);
                f(&format!("{prefix}.root.value"), &mut h.root.value);
                for a in h.key_adapters.iter_mut().chain(h.value_adapters.iter_mut()) {
                    a.visit_named_mut(&prefix, f);
                }
                let shared = h.pie.mode != PieMode::NonShared;
                for (i, t) in h.pie.key_offsets.iter_mut().enumerate() {
                    let name = if shared {
                        format!("{prefix}.pie.{i}")
                    } else {
                        format!("{prefix}.pie.key.{i}")
                    };
                    f(&name, t);
                }
                for (i, t) in h.pie.value_offsets.iter_mut().enumerate() {
                    f(&format!("{prefix}.pie.value.{i}"), t);
                }
            }
            Self::Layerwise(l) => {
                for (i, p) in l.layers.iter_mut().enumerate() {
                    f(&format!("{prefix}.layer.{i}.key"), &mut p.key);
                    f(&format!("{prefix}.layer.{i}.value"), &mut p.value);
                }
            }
        }
    }
}

/// Per-layer prompts actually injected into attention. Always derived.
#[derive(Debug, Clone)]
pub struct SubPromptSet<T> {
    pub layers: Vec<LayerPrompt<T>>,
}

impl<T: Scalar> SubPromptSet<T> {
    pub fn from_vars(tape: &Tape<T>, vars: &[PromptVars]) -> Result<Self> {
        let layers = vars
            .iter()
            .map(|p| LayerPrompt::new(tape.to_tensor(p.key), tape.to_tensor(p.value)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// Dimensions that determine trainable-parameter counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSpec {
    pub embed_dim: usize,
    pub prompt_length: usize,
    pub num_layers: usize,
    pub shared_layers: usize,
    pub rank: usize,
    pub mode: PromptMode,
    pub pie: PieMode,
    pub classes_per_task: usize,
}

/// Trainable scalars by component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub root: u64,
    pub adapters: u64,
    pub pie: u64,
    pub layer_prompts: u64,
    pub classifier: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.root + self.adapters + self.pie + self.layer_prompts + self.classifier
    }

    fn times(self, n: u64) -> Self {
        Self {
            root: self.root * n,
            adapters: self.adapters * n,
            pie: self.pie * n,
            layer_prompts: self.layer_prompts * n,
            classifier: self.classifier * n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub per_task: ParamBreakdown,
    pub cumulative: ParamBreakdown,
}

/// Closed-form trainable-parameter count.
///
/// Per task: root `2LD`; adapters `2n(2Dr + r + D)` with `n = m/s`;
/// shared PIE `mLD` (non-shared `2mLD`, sinusoidal and none `0`);
/// layer-wise baseline `2mLD` instead of root, adapters and PIE; classifier
/// `c(D + 1)`. Cumulative multiplies by `tasks_so_far`.
pub fn count_trainable_params(spec: &CountSpec, tasks_so_far: usize) -> Result<ParamCount> {
    let (d, l, m, r) = (
        spec.embed_dim as u64,
        spec.prompt_length as u64,
        spec.num_layers as u64,
        spec.rank as u64,
    );
    let classifier = spec.classes_per_task as u64 * (d + 1);
    let per_task = match spec.mode {
        PromptMode::IndependentLayerwise => ParamBreakdown {
            layer_prompts: 2 * m * l * d,
            classifier,
            ..Default::default()
        },
        PromptMode::Hlgp | PromptMode::HlgpPie => {
            let n = partition_layers(spec.num_layers, spec.shared_layers)?.num_groups() as u64;
            let pie_mode = if spec.mode == PromptMode::Hlgp {
                PieMode::None
            } else {
                spec.pie
            };
            let pie = match pie_mode {
                PieMode::Shared => m * l * d,
                PieMode::NonShared => 2 * m * l * d,
                PieMode::Sinusoidal | PieMode::None => 0,
            };
            ParamBreakdown {
                root: 2 * l * d,
                adapters: 2 * n * (2 * d * r + r + d),
                pie,
                layer_prompts: 0,
                classifier,
            }
        }
    };
    Ok(ParamCount {
        per_task,
        cumulative: per_task.times(tasks_so_far as u64),
    })
}
