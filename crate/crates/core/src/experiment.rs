//! Experiment configuration and the command implementations behind the CLI.
//!
//! A config file is TOML merged over a bundled profile (`easy` or `hard`);
//! unknown keys are rejected. Every command is a pure function of the
//! config (plus an input checkpoint where relevant).
//!
//! | key | default (easy / hard) |
//! |---|---|
//! | `profile` | `easy` |
//! | `seed` | 0, copied into `train.seed` and `data.seed` |
//! | `seeds` | `[0, 1, 2]` |
//! | `out` | `runs/<profile>` |
//! | `vit.*` | image 16, patch 4, 3 channels, D 16, 12 layers, 2 heads, MLP ratio 2, L 10 / 20 |
//! | `train.*` | lr 3e-3, batch 24, 20 epochs per task, uniform training fusion |
//! | `train.prompt.*` | `hlgp_pie`, shared PIE, s 4, r 8 |
//! | `data.*` | 5 tasks x 2 classes, sigma 0.3 / 10 tasks x 4 classes, sigma 0.5 |
//! | `pretrain.*` | 16 base classes from pattern 96, 12 epochs |
//! | `gradcheck.*` | eps 1e-3, tolerance 1e-4 |
//! | `ablate.*` | s in {1, 2, 4, 6, 12}, all four PIE modes |

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, VitConfig};
use crate::data::{generate_stream, Image, SyntheticSpec, TaskStream};
use crate::error::{contract, Error, Result};
use crate::hlgp::{
    count_trainable_params, CountSpec, ParamBreakdown, PieMode, PromptConfig, PromptMode,
};
use crate::metrics::{self, AccuracyMatrix};
use crate::tensor::{finite_diff_grad, max_relative_error, Parameters, Tape};
use crate::trainer::{
    pretrain_backbone, ContinualState, PretrainConfig, PretrainReport, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub mode: PromptMode,
    pub pie: PieMode,
    pub shared_layers: usize,
    /// Tasks in the bank; all but the last are frozen.
    pub tasks: usize,
    pub batch: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Relative-error denominator floor.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::HlgpPie,
            pie: PieMode::Shared,
            shared_layers: 1,
            tasks: 1,
            batch: 3,
            eps: 1e-3,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub shared_layers: Vec<usize>,
    pub pie_modes: Vec<PieMode>,
    /// Train every cell; without it only parameter counts are reported.
    pub train: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            shared_layers: vec![1, 2, 4, 6, 12],
            pie_modes: vec![
                PieMode::Shared,
                PieMode::NonShared,
                PieMode::Sinusoidal,
                PieMode::None,
            ],
            train: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub vit: VitConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub pretrain: PretrainConfig,
    pub gradcheck: GradcheckConfig,
    pub ablate: AblateConfig,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let (tasks, classes, noise, prompt_length) = match profile {
            Profile::Easy => (5, 2, 0.3, 10),
            Profile::Hard => (10, 4, 0.5, 20),
        };
        let vit = VitConfig {
            prompt_length,
            ..VitConfig::default()
        };
        let train = TrainConfig {
            prompt: PromptConfig {
                rank: 8,
                ..PromptConfig::default()
            },
            ..TrainConfig::default()
        };
        let data = SyntheticSpec {
            tasks,
            classes_per_task: classes,
            noise,
            image_size: vit.image_size,
            channels: vit.channels,
            ..SyntheticSpec::default()
        };
        let name = match profile {
            Profile::Easy => "easy",
            Profile::Hard => "hard",
        };
        Self {
            profile,
            seed: 0,
            seeds: vec![0, 1, 2],
            out: PathBuf::from("runs").join(name),
            vit,
            train,
            data,
            pretrain: PretrainConfig::default(),
            gradcheck: GradcheckConfig::default(),
            ablate: AblateConfig::default(),
        }
    }

    /// Parses TOML over the profile it names (default `easy`).
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        let profile = match user.get("profile") {
            None => Profile::Easy,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("profile: {e}")))?,
        };
        let mut base = toml::Table::try_from(Self::profile(profile))
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user.clone());
        let mut cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        if user.contains_key("seed") {
            let seed = cfg.seed;
            cfg = cfg.with_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Sets the run seed for both training and the stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.train.validate(&self.vit)?;
        self.data.validate()?;
        for (what, d) in [("data", &self.data), ("pretrain.data", &self.pretrain.data)] {
            if d.image_size != self.vit.image_size || d.channels != self.vit.channels {
                return Err(Error::Config(format!("{what} and vit image shapes differ")));
            }
        }
        let stream = self.data.first_class
            ..self.data.first_class + self.data.tasks * self.data.classes_per_task;
        let p = &self.pretrain.data;
        let base = p.first_class..p.first_class + p.classes_per_task;
        if stream.start < base.end && base.start < stream.end {
            return Err(Error::Config(format!(
                "pretraining classes {base:?} overlap the stream classes {stream:?}"
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn stream(&self) -> Result<TaskStream> {
        generate_stream(&self.data)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<(Backbone<f32>, PretrainReport)> {
    cfg.validate()?;
    pretrain_backbone(&cfg.vit, &cfg.pretrain)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub completed: bool,
    pub tasks_done: usize,
    pub accuracy: Vec<Vec<f64>>,
    pub faa: Option<f64>,
    pub caa: Option<f64>,
    pub af: Option<f64>,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
    pub trainable_params: u64,
}

/// Runs the stream from scratch or from `resume`, optionally stopping
/// before epoch `e` of task `t`.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    backbone: Backbone<f32>,
    resume: Option<ContinualState<f32>>,
    stop: Option<(usize, usize)>,
) -> Result<(ContinualState<f32>, TrainSummary)> {
    cfg.validate()?;
    if !backbone.is_frozen() {
        return Err(contract(
            "refusing a backbone checkpoint that is still trainable",
        ));
    }
    if backbone.config != cfg.vit {
        return Err(Error::Config(
            "backbone checkpoint does not match the vit config".into(),
        ));
    }
    let mut state = match resume {
        Some(s) => {
            if s.config != cfg.train {
                return Err(Error::Config(
                    "resumed checkpoint was trained with a different config".into(),
                ));
            }
            s
        }
        None => ContinualState::new(backbone, cfg.train.clone())?,
    };
    let stream = cfg.stream()?;
    let completed = state.run_stream(&stream, stop)?;
    let summary = summarize(&state, completed)?;
    Ok((state, summary))
}

fn summarize(state: &ContinualState<f32>, completed: bool) -> Result<TrainSummary> {
    let a = &state.accuracy;
    let some = a.num_tasks() > 0;
    Ok(TrainSummary {
        completed,
        tasks_done: state.progress.tasks_done,
        accuracy: a.rows().to_vec(),
        faa: if some { Some(metrics::faa(a)?) } else { None },
        caa: if some { Some(metrics::caa(a)?) } else { None },
        af: if a.num_tasks() >= 2 {
            Some(metrics::af(a)?)
        } else {
            None
        },
        backbone_hash_before: state.backbone_hash.clone(),
        backbone_hash_after: state.backbone.content_hash(),
        trainable_params: (state.bank.trainable_count() + state.classifier.trainable_count())
            as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tasks: usize,
    /// Fresh two-stage accuracy on every finished task.
    pub accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub matches_recorded_row: bool,
}

/// Re-scores a saved run on the test sets of its finished tasks.
pub fn cmd_eval(cfg: &ExperimentConfig, state: &ContinualState<f32>) -> Result<EvalReport> {
    let stream = cfg.stream()?;
    let t = state.progress.tasks_done;
    if t == 0 {
        return Err(contract("checkpoint has no finished task to evaluate"));
    }
    let mut accuracy = Vec::with_capacity(t);
    for task in &stream.tasks[..t] {
        let images: Vec<&Image> = task.test.iter().map(|s| &s.image).collect();
        let labels: Vec<u32> = task.test.iter().map(|s| s.label).collect();
        accuracy.push(metrics::accuracy_percent(
            &state.predict(&images)?,
            &labels,
        )?);
    }
    let mean_accuracy = accuracy.iter().sum::<f64>() / t as f64;
    let matches_recorded_row =
        state.accuracy.rows().last() == Some(&accuracy) && t == state.bank.num_tasks();
    Ok(EvalReport {
        tasks: t,
        accuracy,
        mean_accuracy,
        matches_recorded_row,
    })
}

/// The gradient-check model: m=2, D=8, h=2, L=2, r=2, two classes per task.
pub fn gradcheck_vit() -> VitConfig {
    VitConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        prompt_length: 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradEntry>,
    pub scalars: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

fn randomize(p: &mut dyn Parameters<f64>, rng: &mut ChaCha8Rng) {
    let n = Normal::new(0.0, 0.5).expect("valid std");
    p.visit_mut(&mut |_, t| {
        if t.is_trainable() {
            for x in t.data_mut() {
                *x = n.sample(rng);
            }
        }
    });
}

fn random_images(vit: &VitConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Image> {
    let u = rand_distr::Uniform::new_inclusive(-1.0f32, 1.0);
    (0..n)
        .map(|_| Image {
            channels: vit.channels,
            height: vit.image_size,
            width: vit.image_size,
            pixels: (0..vit.channels * vit.image_size * vit.image_size)
                .map(|_| u.sample(rng))
                .collect(),
        })
        .collect()
}

/// Analytic vs central finite-difference gradients of the training loss
/// over every trainable scalar of the current task, in `f64`.
pub fn cmd_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    if cfg.tasks == 0 || cfg.batch == 0 {
        return Err(Error::Config(
            "gradcheck needs at least one task and one sample".into(),
        ));
    }
    let vit = gradcheck_vit();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let backbone = Backbone::<f64>::surrogate(&vit, &mut rng)?;
    let train = TrainConfig {
        seed: cfg.seed,
        prompt: PromptConfig {
            mode: cfg.mode,
            pie: cfg.pie,
            shared_layers: cfg.shared_layers,
            rank: 2,
        },
        ..TrainConfig::default()
    };
    let mut state = ContinualState::new(backbone, train)?;
    for t in 0..cfg.tasks {
        let classes = [2 * t as u32, 2 * t as u32 + 1];
        state.init_task(t, &classes)?;
        randomize(&mut state.bank.generators[t], &mut rng);
        randomize(&mut state.classifier.heads[t], &mut rng);
        if t + 1 < cfg.tasks {
            state.freeze_current()?;
            state.progress.tasks_done += 1;
        }
    }
    let current = cfg.tasks - 1;
    let images = random_images(&vit, cfg.batch, &mut rng);
    let refs: Vec<&Image> = images.iter().collect();
    let labels: Vec<u32> = (0..cfg.batch)
        .map(|i| 2 * current as u32 + (i % 2) as u32)
        .collect();

    let tape = Tape::new();
    let (loss, _) = state.batch_loss(&tape, &refs, &labels)?;
    let grads = tape.backward(loss)?;

    let mut params = Vec::new();
    state.bank.generators[current].visit(&mut |name, t| {
        if t.is_trainable() {
            params.push((name.to_string(), t.clone()));
        }
    });
    state.classifier.heads[current].visit(&mut |name, t| {
        if t.is_trainable() {
            params.push((name.to_string(), t.clone()));
        }
    });

    fn set(state: &mut ContinualState<f64>, t: usize, target: &str, data: &[f64]) {
        let mut put = |name: &str, x: &mut crate::Tensor<f64>| {
            if name == target {
                x.data_mut().copy_from_slice(data);
            }
        };
        state.bank.generators[t].visit_mut(&mut put);
        state.classifier.heads[t].visit_mut(&mut put);
    }

    let mut entries = Vec::new();
    for (name, theta) in &params {
        let zeros = vec![0.0; theta.numel()];
        let analytic = grads.for_tensor(theta.id()).unwrap_or(&zeros).to_vec();
        let numeric = finite_diff_grad(theta, cfg.eps, |probe| {
            set(&mut state, current, name, probe.data());
            let tape = Tape::new();
            let (loss, _) = state.batch_loss(&tape, &refs, &labels)?;
            tape.item(loss)
        })?;
        set(&mut state, current, name, theta.data());
        entries.push(GradEntry {
            name: name.clone(),
            numel: theta.numel(),
            max_rel_err: max_relative_error(&analytic, numeric.data(), cfg.floor),
        });
    }
    let max_rel_err = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        scalars: entries.iter().map(|e| e.numel).sum(),
        passed: max_rel_err < cfg.tolerance,
        entries,
        max_rel_err,
        tolerance: cfg.tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub shared_layers: usize,
    pub pie: PieMode,
    pub params: u64,
    pub faa: Option<f64>,
    pub af: Option<f64>,
}

fn count_spec(vit: &VitConfig, prompt: &PromptConfig, classes_per_task: usize) -> CountSpec {
    CountSpec {
        embed_dim: vit.embed_dim,
        prompt_length: vit.prompt_length,
        num_layers: vit.num_layers,
        shared_layers: prompt.shared_layers,
        rank: prompt.rank,
        mode: prompt.mode,
        pie: prompt.pie,
        classes_per_task,
    }
}

/// Every tensor a component stores, trainable or frozen.
fn stored_numel(p: &dyn Parameters<f32>) -> usize {
    let mut n = 0;
    p.visit(&mut |_, t| n += t.numel());
    n
}

fn ablation_cell(
    cfg: &ExperimentConfig,
    backbone: &Backbone<f32>,
    variant: String,
    prompt: PromptConfig,
) -> Result<AblationRow> {
    let mut c = cfg.clone();
    c.train.prompt = prompt.clone();
    let spec = count_spec(&c.vit, &prompt, c.data.classes_per_task);
    let params = count_trainable_params(&spec, c.data.tasks)?
        .cumulative
        .total();
    let (faa, af) = if cfg.ablate.train {
        let (state, s) = cmd_train(&c, backbone.clone(), None, None)?;
        let model = (stored_numel(&state.bank) + stored_numel(&state.classifier)) as u64;
        if model != params {
            return Err(contract(format!(
                "model holds {model} prompt parameters, closed form says {params}"
            )));
        }
        (s.faa, s.af)
    } else {
        (None, None)
    };
    Ok(AblationRow {
        variant,
        shared_layers: prompt.shared_layers,
        pie: prompt.effective_pie(),
        params,
        faa,
        af,
    })
}

/// Shared-layer sweep with shared PIE, then the PIE sweep at the configured `s`.
pub fn cmd_ablate(cfg: &ExperimentConfig, backbone: &Backbone<f32>) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &s in &cfg.ablate.shared_layers {
        let prompt = PromptConfig {
            mode: PromptMode::HlgpPie,
            pie: PieMode::Shared,
            shared_layers: s,
            ..cfg.train.prompt.clone()
        };
        rows.push(ablation_cell(cfg, backbone, format!("s={s}"), prompt)?);
    }
    for &pie in &cfg.ablate.pie_modes {
        let prompt = PromptConfig {
            mode: PromptMode::HlgpPie,
            pie,
            ..cfg.train.prompt.clone()
        };
        rows.push(ablation_cell(cfg, backbone, format!("pie={pie}"), prompt)?);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,shared_layers,pie,params,faa,af\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant,
            r.shared_layers,
            r.pie,
            r.params,
            opt(r.faa),
            opt(r.af)
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamsRow {
    pub profile: String,
    pub mode: PromptMode,
    pub pie: PieMode,
    pub embed_dim: usize,
    pub prompt_length: usize,
    pub num_layers: usize,
    pub shared_layers: usize,
    pub rank: usize,
    pub tasks: usize,
    pub per_task: ParamBreakdown,
    pub cumulative: ParamBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamsReport {
    pub rows: Vec<ParamsRow>,
    /// HLGP with PIE over the layer-wise baseline, cumulative, per profile.
    pub ratios: Vec<(String, f64)>,
}

/// Full-scale dimensions: D=768, m=12, s=4, r=16; 10 tasks of 10 classes at
/// L=10, and 10 tasks of 20 classes at L=20.
pub fn full_scale_profiles() -> Vec<(String, VitConfig, usize, usize)> {
    let base = VitConfig {
        image_size: 224,
        patch_size: 16,
        channels: 3,
        embed_dim: 768,
        num_layers: 12,
        num_heads: 12,
        mlp_ratio: 4,
        prompt_length: 10,
    };
    vec![
        ("full_l10".to_string(), base.clone(), 10, 10),
        (
            "full_l20".to_string(),
            VitConfig {
                prompt_length: 20,
                ..base
            },
            10,
            20,
        ),
    ]
}

pub fn cmd_params(cfg: &ExperimentConfig) -> Result<ParamsReport> {
    let mut profiles = vec![(
        "desk".to_string(),
        cfg.vit.clone(),
        cfg.data.tasks,
        cfg.data.classes_per_task,
        cfg.train.prompt.rank,
    )];
    profiles.extend(
        full_scale_profiles()
            .into_iter()
            .map(|(n, v, t, c)| (n, v, t, c, 16)),
    );
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for (name, vit, tasks, classes, rank) in profiles {
        let mut totals = Vec::new();
        for (mode, pie) in [
            (PromptMode::HlgpPie, PieMode::Shared),
            (PromptMode::Hlgp, PieMode::None),
            (PromptMode::IndependentLayerwise, PieMode::None),
        ] {
            let prompt = PromptConfig {
                mode,
                pie,
                shared_layers: cfg.train.prompt.shared_layers,
                rank,
            };
            let spec = count_spec(&vit, &prompt, classes);
            let c = count_trainable_params(&spec, tasks)?;
            totals.push(c.cumulative.total());
            rows.push(ParamsRow {
                profile: name.clone(),
                mode,
                pie,
                embed_dim: vit.embed_dim,
                prompt_length: vit.prompt_length,
                num_layers: vit.num_layers,
                shared_layers: prompt.shared_layers,
                rank,
                tasks,
                per_task: c.per_task,
                cumulative: c.cumulative,
            });
        }
        ratios.push((name, totals[0] as f64 / totals[2] as f64));
    }
    Ok(ParamsReport { rows, ratios })
}

pub fn params_csv(report: &ParamsReport) -> String {
    let mut out = String::from("profile,mode,pie,D,L,m,s,r,tasks,root,adapters,pie_params,layer_prompts,classifier,per_task,cumulative\n");
    for r in &report.rows {
        let p = &r.per_task;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.profile,
            r.mode,
            r.pie,
            r.embed_dim,
            r.prompt_length,
            r.num_layers,
            r.shared_layers,
            r.rank,
            r.tasks,
            p.root,
            p.adapters,
            p.pie,
            p.layer_prompts,
            p.classifier,
            p.total(),
            r.cumulative.total()
        ));
    }
    out
}

/// Metric rows of a finished run as CSV.
pub fn metrics_csv(a: &AccuracyMatrix) -> Result<String> {
    metrics::to_csv(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ExperimentConfig::profile(Profile::Easy).validate().unwrap();
        ExperimentConfig::profile(Profile::Hard).validate().unwrap();
        assert_eq!(
            ExperimentConfig::profile(Profile::Hard).vit.prompt_length,
            20
        );
    }

    #[test]
    fn toml_merges_over_profile() {
        let cfg = ExperimentConfig::from_toml("profile = \"hard\"\nseed = 5\n[train]\nepochs_per_task = 3\n[train.prompt]\nshared_layers = 6\n").unwrap();
        assert_eq!(cfg.data.tasks, 10);
        assert_eq!(cfg.train.epochs_per_task, 3);
        assert_eq!(cfg.train.prompt.shared_layers, 6);
        assert_eq!(cfg.train.prompt.rank, 8);
        assert_eq!((cfg.train.seed, cfg.data.seed), (5, 5));
        assert_eq!(
            ExperimentConfig::from_toml("").unwrap(),
            ExperimentConfig::profile(Profile::Easy)
        );
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            "bogus = 1",
            "[train]\nlearning_rat = 0.1",
            "[vit]\npatch_size = 5",
            "[train.prompt]\nshared_layers = 5",
            "profile = \"medium\"",
            "[data]\nfirst_class = 90",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn gradcheck_variants_report_the_right_parameters() {
        let r = cmd_gradcheck(&GradcheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.entries.iter().any(|e| e.name.contains(".pie.")));
        let r = cmd_gradcheck(&GradcheckConfig {
            pie: PieMode::None,
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert!(!r.entries.iter().any(|e| e.name.contains(".pie.")));
        let r = cmd_gradcheck(&GradcheckConfig {
            mode: PromptMode::IndependentLayerwise,
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert!(r.passed);
        assert!(!r.entries.iter().any(|e| e.name.contains(".adapter.")));
    }
}
