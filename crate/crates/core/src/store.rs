//! Checkpoint format.
//!
//! ```text
//! "HLGPCKPT" | u32 LE version | u64 LE manifest length | manifest JSON
//!            | payload (raw little-endian tensors) | u32 LE CRC32(payload)
//! ```
//!
//! The manifest lists every tensor (sorted by name) with shape, dtype, byte
//! offset into the payload, trainable flag and owner, followed by the run
//! state needed to rebuild the model around them. Names fall into
//! `backbone.*`, `task{t}.*`, `classifier.*` and `optim.{m,v}.*`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, VitConfig};
use crate::error::{Error, Result};
use crate::fusion::PromptBank;
use crate::head::{Classifier, ClassifierHead};
use crate::hlgp::PromptGenerator;
use crate::metrics::{AccuracyMatrix, PredictionLog};
use crate::optim::{Adam, Moments};
use crate::scalar::{DType, Scalar};
use crate::tensor::{Parameters, Tensor};
use crate::trainer::{ContinualState, EpochSummary, Progress, TrainConfig};

pub const CKPT_MAGIC: &[u8; 8] = b"HLGPCKPT";
pub const CKPT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Owner {
    Task(usize),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub trainable: bool,
    pub owner: Owner,
}

impl TensorRecord {
    pub fn byte_len(&self) -> u64 {
        (self.shape.iter().product::<usize>() * self.dtype.size()) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateRecord {
    Backbone {
        vit: VitConfig,
        surrogate: bool,
    },
    Continual {
        vit: VitConfig,
        surrogate: bool,
        train: TrainConfig,
        classes: Vec<Vec<u32>>,
        progress: Progress,
        accuracy: AccuracyMatrix,
        logs: Vec<PredictionLog>,
        history: Vec<EpochSummary>,
        backbone_hash: String,
        optimizer_step: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: Vec<TensorRecord>,
    pub payload_len: u64,
    pub state: StateRecord,
}

/// `backbone`, a task index, `classifier` heads by task, optimizer entries
/// by the owner of their parameter.
pub fn owner_of(name: &str) -> Owner {
    if let Some(rest) = name
        .strip_prefix("optim.m.")
        .or_else(|| name.strip_prefix("optim.v."))
    {
        return owner_of(rest);
    }
    let first = name.split('.').next().unwrap_or("");
    if let Some(t) = first.strip_prefix("task").and_then(|t| t.parse().ok()) {
        return Owner::Task(t);
    }
    if first == "classifier" {
        if let Some(t) = name.split('.').nth(1).and_then(|t| t.parse().ok()) {
            return Owner::Task(t);
        }
    }
    Owner::Named(first.to_string())
}

struct Collected<T> {
    tensors: BTreeMap<String, (Vec<usize>, Vec<T>, bool)>,
}

impl<T: Scalar> Collected<T> {
    fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    fn add(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        let prev = self.tensors.insert(
            name.to_string(),
            (t.shape().to_vec(), t.data().to_vec(), t.is_trainable()),
        );
        if prev.is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        Ok(())
    }

    fn add_all(&mut self, p: &dyn Parameters<T>) -> Result<()> {
        let mut err = Ok(());
        p.visit(&mut |name, t| {
            if err.is_ok() {
                err = self.add(name, t);
            }
        });
        err
    }

    fn encode(self, state: StateRecord) -> Result<Vec<u8>> {
        let mut records = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, (shape, data, trainable)) in self.tensors {
            records.push(TensorRecord {
                owner: owner_of(&name),
                name,
                shape,
                dtype: T::DTYPE,
                offset: payload.len() as u64,
                trainable,
            });
            for x in data {
                x.write_le(&mut payload);
            }
        }
        let manifest = Manifest {
            tensors: records,
            payload_len: payload.len() as u64,
            state,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len() + 4);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }
}

/// Parses and validates a checkpoint: magic, version, lengths, CRC,
/// non-overlapping payload-covering offsets.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Truncated("checkpoint shorter than its magic".into()));
    }
    if &bytes[..8] != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated("checkpoint preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[PREAMBLE..];
    if rest.len() < mlen {
        return Err(Error::Truncated("checkpoint manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&rest[..mlen])
        .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    let body = &rest[mlen..];
    let plen = manifest.payload_len as usize;
    if body.len() < plen + 4 {
        return Err(Error::Truncated(format!(
            "payload of {plen} bytes plus checksum, {} available",
            body.len()
        )));
    }
    if body.len() > plen + 4 {
        return Err(Error::Format("trailing bytes after checksum".into()));
    }
    let payload = &body[..plen];
    let stored = u32::from_le_bytes(body[plen..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut cursor = 0u64;
    let mut prev: Option<&str> = None;
    for r in &manifest.tensors {
        if prev.is_some_and(|p| p >= r.name.as_str()) {
            return Err(Error::Format(format!(
                "tensor names not strictly sorted at {}",
                r.name
            )));
        }
        if r.offset != cursor {
            return Err(Error::Format(format!(
                "tensor {} at offset {} but expected {cursor}",
                r.name, r.offset
            )));
        }
        cursor += r.byte_len();
        prev = Some(&r.name);
    }
    if cursor != manifest.payload_len {
        return Err(Error::Format(format!(
            "tensors cover {cursor} bytes of a {}-byte payload",
            manifest.payload_len
        )));
    }
    Ok((manifest, payload))
}

struct Loaded<T> {
    tensors: BTreeMap<String, (Tensor<T>, bool)>,
}

impl<T: Scalar> Loaded<T> {
    fn from_manifest(manifest: &Manifest, payload: &[u8]) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for r in &manifest.tensors {
            if r.dtype != T::DTYPE {
                return Err(Error::Format(format!(
                    "tensor {} stored as {:?}, loading as {:?}",
                    r.name,
                    r.dtype,
                    T::DTYPE
                )));
            }
            let start = r.offset as usize;
            let bytes = &payload[start..start + r.byte_len() as usize];
            let data = bytes
                .chunks_exact(T::DTYPE.size())
                .map(T::read_le)
                .collect();
            tensors.insert(
                r.name.clone(),
                (Tensor::new(r.shape.clone(), data)?, r.trainable),
            );
        }
        Ok(Self { tensors })
    }

    fn take(&mut self, name: &str, like: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
        let (t, trainable) = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if t.shape() != like.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                like.shape()
            )));
        }
        Ok((t, trainable))
    }

    /// Overwrites every tensor of `p` in place from the checkpoint.
    fn fill(&mut self, p: &mut dyn Parameters<T>) -> Result<()> {
        let mut err = Ok(());
        p.visit_mut(&mut |name, t| {
            if err.is_err() {
                return;
            }
            match self.take(name, t) {
                Ok((src, trainable)) => {
                    t.set_trainable(trainable);
                    err = t.assign(src.data());
                }
                Err(e) => err = Err(e),
            }
        });
        err
    }

    fn finish(self) -> Result<()> {
        match self.tensors.keys().next() {
            Some(name) => Err(Error::Format(format!(
                "unexpected tensor {name} in checkpoint"
            ))),
            None => Ok(()),
        }
    }
}

/// Skeleton RNG for shapes; every value is overwritten on load.
fn skeleton_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

pub fn encode_backbone<T: Scalar>(backbone: &Backbone<T>) -> Result<Vec<u8>> {
    let mut c = Collected::new();
    c.add_all(backbone)?;
    c.encode(StateRecord::Backbone {
        vit: backbone.config.clone(),
        surrogate: backbone.surrogate,
    })
}

fn rebuild_backbone<T: Scalar>(
    vit: &VitConfig,
    surrogate: bool,
    loaded: &mut Loaded<T>,
) -> Result<Backbone<T>> {
    let mut bb = Backbone::init(vit, &mut skeleton_rng())?;
    loaded.fill(&mut bb)?;
    bb.surrogate = surrogate;
    Ok(bb)
}

/// The backbone of a backbone-only or full-run checkpoint.
pub fn decode_backbone<T: Scalar>(bytes: &[u8]) -> Result<Backbone<T>> {
    let (manifest, payload) = decode_manifest(bytes)?;
    let mut loaded = Loaded::<T>::from_manifest(&manifest, payload)?;
    loaded
        .tensors
        .retain(|name, _| name.starts_with("backbone."));
    let (vit, surrogate) = match &manifest.state {
        StateRecord::Backbone { vit, surrogate }
        | StateRecord::Continual { vit, surrogate, .. } => (vit, *surrogate),
    };
    let bb = rebuild_backbone(vit, surrogate, &mut loaded)?;
    loaded.finish()?;
    Ok(bb)
}

pub fn encode_state<T: Scalar>(state: &ContinualState<T>) -> Result<Vec<u8>> {
    let mut c = Collected::new();
    c.add_all(&state.backbone)?;
    c.add_all(&state.bank)?;
    c.add_all(&state.classifier)?;
    for (name, mo) in &state.optimizer.moments {
        c.add(&format!("optim.m.{name}"), &mo.m)?;
        c.add(&format!("optim.v.{name}"), &mo.v)?;
    }
    let tasks = state.bank.num_tasks();
    c.encode(StateRecord::Continual {
        vit: state.backbone.config.clone(),
        surrogate: state.backbone.surrogate,
        train: state.config.clone(),
        classes: (0..tasks)
            .map(|t| state.bank.class_ids(t).to_vec())
            .collect(),
        progress: state.progress,
        accuracy: state.accuracy.clone(),
        logs: state.logs.clone(),
        history: state.history.clone(),
        backbone_hash: state.backbone_hash.clone(),
        optimizer_step: state.optimizer.step,
    })
}

pub fn decode_state<T: Scalar>(bytes: &[u8]) -> Result<ContinualState<T>> {
    let (manifest, payload) = decode_manifest(bytes)?;
    let StateRecord::Continual {
        vit,
        surrogate,
        train,
        classes,
        progress,
        accuracy,
        logs,
        history,
        backbone_hash,
        optimizer_step,
    } = manifest.state.clone()
    else {
        return Err(Error::Format("checkpoint holds only a backbone".into()));
    };
    let mut loaded = Loaded::<T>::from_manifest(&manifest, payload)?;
    let backbone = rebuild_backbone(&vit, surrogate, &mut loaded)?;
    let mut state = ContinualState::new(backbone, train)?;
    state.backbone_hash = backbone_hash;
    let mut bank = PromptBank::new();
    let mut classifier = Classifier::new();
    for (t, cls) in classes.into_iter().enumerate() {
        let mut g = PromptGenerator::init(t, &vit, &state.config.prompt, &mut skeleton_rng())?;
        loaded.fill(&mut g)?;
        bank.push(g, cls.clone())?;
        if t < progress.tasks_done {
            bank.freeze(t)?;
        }
        let mut head = ClassifierHead::zeros(t, vit.embed_dim, cls.len());
        loaded.fill(&mut head)?;
        classifier.heads.push(head);
    }
    let mut optimizer = Adam::new(state.config.learning_rate, state.config.adam)?;
    optimizer.step = optimizer_step;
    let names: Vec<String> = loaded
        .tensors
        .keys()
        .filter_map(|n| n.strip_prefix("optim.m.").map(str::to_string))
        .collect();
    for name in names {
        let (m, _) = loaded
            .tensors
            .remove(&format!("optim.m.{name}"))
            .expect("listed above");
        let (v, _) = loaded
            .tensors
            .remove(&format!("optim.v.{name}"))
            .ok_or_else(|| Error::Format(format!("optimizer moment v missing for {name}")))?;
        if m.shape() != v.shape() {
            return Err(Error::Format(format!(
                "optimizer moments of {name} differ in shape"
            )));
        }
        optimizer.moments.insert(name, Moments { m, v });
    }
    loaded.finish()?;
    state.bank = bank;
    state.classifier = classifier;
    state.optimizer = optimizer;
    state.progress = progress;
    state.accuracy = accuracy;
    state.logs = logs;
    state.history = history;
    Ok(state)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_state<T: Scalar>(state: &ContinualState<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_state(state)?)
}

pub fn load_state<T: Scalar>(path: &Path) -> Result<ContinualState<T>> {
    decode_state(&std::fs::read(path)?)
}

pub fn save_backbone<T: Scalar>(backbone: &Backbone<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_backbone(backbone)?)
}

pub fn load_backbone<T: Scalar>(path: &Path) -> Result<Backbone<T>> {
    decode_backbone(&std::fs::read(path)?)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path)?;
    Ok(decode_manifest(&bytes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb<T: Scalar>(frozen: bool) -> Backbone<T> {
        let cfg = VitConfig {
            image_size: 8,
            embed_dim: 8,
            num_layers: 2,
            prompt_length: 2,
            ..VitConfig::default()
        };
        let mut b = Backbone::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        if frozen {
            b.freeze();
        }
        b
    }

    #[test]
    fn owners() {
        assert_eq!(
            owner_of("backbone.cls_token"),
            Owner::Named("backbone".into())
        );
        assert_eq!(owner_of("task3.root.key"), Owner::Task(3));
        assert_eq!(owner_of("classifier.2.bias"), Owner::Task(2));
        assert_eq!(owner_of("optim.m.task1.pie.0"), Owner::Task(1));
    }

    #[test]
    fn backbone_round_trip_both_dtypes() {
        let b32 = bb::<f32>(true);
        let bytes = encode_backbone(&b32).unwrap();
        let back = decode_backbone::<f32>(&bytes).unwrap();
        assert_eq!(back.content_hash(), b32.content_hash());
        assert!(back.is_frozen());
        assert_eq!(encode_backbone(&back).unwrap(), bytes);
        assert!(matches!(
            decode_backbone::<f64>(&bytes),
            Err(Error::Format(_))
        ));

        let b64 = bb::<f64>(false);
        let bytes = encode_backbone(&b64).unwrap();
        let back = decode_backbone::<f64>(&bytes).unwrap();
        assert_eq!(back.content_hash(), b64.content_hash());
        assert!(!back.is_frozen());
    }

    #[test]
    fn corruption_is_classified() {
        let bytes = encode_backbone(&bb::<f32>(true)).unwrap();
        let mut bad = bytes.clone();
        bad[1] ^= 1;
        assert!(matches!(
            decode_backbone::<f32>(&bad),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&(CKPT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            decode_backbone::<f32>(&bad),
            Err(Error::Version { .. })
        ));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 10] ^= 0x40;
        assert!(matches!(
            decode_backbone::<f32>(&bad),
            Err(Error::Checksum { .. })
        ));
        for cut in [5, 15, 40, bytes.len() - 1] {
            assert!(
                matches!(
                    decode_backbone::<f32>(&bytes[..cut]),
                    Err(Error::Truncated(_))
                ),
                "cut {cut}"
            );
        }
    }
}
