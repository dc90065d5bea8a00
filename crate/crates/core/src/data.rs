//! Deterministic synthetic class-incremental streams and the raw dataset format.
//!
//! Every class is a fixed procedural pattern: an oriented cosine grating
//! (8 orientations x 4 frequencies) plus a coloured blob in one of four
//! quadrants, with per-pixel Gaussian noise on top. Pixels are clamped to
//! `[-1, 1]`.
//!
//! File layout (`HLGPDATA`): 8-byte magic, `u32` LE version, `u64` LE header
//! length, JSON header, then every image as contiguous little-endian `f32`
//! in header order (per task: train samples, then test samples).

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scalar::DType;

pub const DATA_MAGIC: &[u8; 8] = b"HLGPDATA";
pub const DATA_VERSION: u32 = 1;

const ORIENTATIONS: usize = 8;
const FREQUENCIES: usize = 4;
const QUADRANTS: usize = 4;
/// Number of distinct class patterns the generator can draw.
pub const PATTERN_VOCAB: usize = ORIENTATIONS * FREQUENCIES * QUADRANTS;

/// A `C x H x W` image, row-major, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    fn bits_key(&self) -> Vec<u32> {
        self.pixels.iter().map(|p| p.to_bits()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: usize,
    pub class_ids: Vec<u32>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub channels: usize,
    pub image_size: usize,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    /// Checks disjoint class sets and label membership.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for task in &self.tasks {
            for &c in &task.class_ids {
                if !seen.insert(c) {
                    return Err(Error::Data(format!(
                        "class {c} of task {} already belongs to an earlier task",
                        task.task_id
                    )));
                }
            }
            let own: HashSet<u32> = task.class_ids.iter().copied().collect();
            for s in task.train.iter().chain(&task.test) {
                if !own.contains(&s.label) {
                    return Err(Error::Data(format!(
                        "label {} is not in the class set of task {}",
                        s.label, task.task_id
                    )));
                }
                if s.image.channels != self.channels
                    || s.image.height != self.image_size
                    || s.image.width != self.image_size
                {
                    return Err(Error::Data(format!(
                        "image shape mismatch in task {}",
                        task.task_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn all_classes(&self) -> Vec<u32> {
        self.tasks
            .iter()
            .flat_map(|t| t.class_ids.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    pub seed: u64,
    /// Pattern index of the first class; streams draw consecutive patterns.
    pub first_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes_per_task: 2,
            train_per_class: 24,
            test_per_class: 12,
            image_size: 16,
            channels: 3,
            noise: 0.3,
            seed: 0,
            first_class: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0
            || self.classes_per_task == 0
            || self.train_per_class == 0
            || self.test_per_class == 0
        {
            return Err(Error::Config(
                "synthetic stream counts must be positive".into(),
            ));
        }
        if self.image_size < 2 || !self.image_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "image size {} must be even",
                self.image_size
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("at least one channel is required".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!(
                "noise {} must be non-negative",
                self.noise
            )));
        }
        let needed = self.first_class + self.tasks * self.classes_per_task;
        if needed > PATTERN_VOCAB {
            return Err(Error::Config(format!(
                "{needed} class patterns requested but only {PATTERN_VOCAB} exist"
            )));
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    match h6 as usize % 6 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Noise-free image of pattern `class`.
pub fn prototype(class: usize, channels: usize, size: usize) -> Image {
    let orientation = class % ORIENTATIONS;
    let frequency = (class / ORIENTATIONS) % FREQUENCIES + 1;
    let quadrant = (class / (ORIENTATIONS * FREQUENCIES) + class) % QUADRANTS;
    let theta = std::f64::consts::PI * orientation as f64 / ORIENTATIONS as f64;
    let hue = (class as f64 * 0.618_033_988_749_895).fract();
    let rgb = hsv_to_rgb(hue).map(|v| 2.0 * v - 1.0);
    let half = size / 2;
    let (qy, qx) = (quadrant / 2, quadrant % 2);
    let mut pixels = Vec::with_capacity(channels * size * size);
    for ch in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / size as f64;
                let grating = (2.0 * std::f64::consts::PI * frequency as f64 * u).cos();
                let in_blob = y / half == qy && x / half == qx;
                let blob = if in_blob { rgb[ch % 3] } else { 0.0 };
                pixels.push((0.5 * grating + 0.5 * blob) as f32);
            }
        }
    }
    Image {
        channels,
        height: size,
        width: size,
        pixels,
    }
}

fn noisy(proto: &Image, noise: Option<&Normal<f64>>, rng: &mut ChaCha8Rng) -> Image {
    let pixels = proto
        .pixels
        .iter()
        .map(|&p| {
            let n = noise.map_or(0.0, |d| d.sample(rng));
            ((p as f64 + n).clamp(-1.0, 1.0)) as f32
        })
        .collect();
    Image {
        pixels,
        ..proto.clone()
    }
}

/// Builds the stream described by `spec`; a pure function of it.
pub fn generate_stream(spec: &SyntheticSpec) -> Result<TaskStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("validated noise"));
    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let classes: Vec<usize> = (0..spec.classes_per_task)
            .map(|k| spec.first_class + t * spec.classes_per_task + k)
            .collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            let proto = prototype(c, spec.channels, spec.image_size);
            for _ in 0..spec.train_per_class {
                train.push(Sample {
                    image: noisy(&proto, normal.as_ref(), &mut rng),
                    label: c as u32,
                });
            }
            for _ in 0..spec.test_per_class {
                test.push(Sample {
                    image: noisy(&proto, normal.as_ref(), &mut rng),
                    label: c as u32,
                });
            }
        }
        tasks.push(Task {
            task_id: t,
            class_ids: classes.iter().map(|&c| c as u32).collect(),
            train,
            test,
        });
    }
    let stream = TaskStream {
        channels: spec.channels,
        image_size: spec.image_size,
        tasks,
    };
    stream.validate()?;
    Ok(stream)
}

/// Mixes a seed with stream coordinates into an independent RNG seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Index batches over a task's training set, shuffled by `(seed, epoch)`.
/// The last partial batch is kept.
pub fn batch_indices(
    len: usize,
    batch_size: usize,
    seed: u64,
    task_id: usize,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(contract("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[task_id as u64, epoch as u64]));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

pub struct Batch<'a> {
    pub images: Vec<&'a Image>,
    pub labels: Vec<u32>,
}

pub fn batches<'a>(
    task: &'a Task,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = Batch<'a>>> {
    let idx = batch_indices(task.train.len(), batch_size, seed, task.task_id, epoch)?;
    Ok(idx.into_iter().map(move |b| Batch {
        images: b.iter().map(|&i| &task.train[i].image).collect(),
        labels: b.iter().map(|&i| task.train[i].label).collect(),
    }))
}

/// Number of test images bit-identical to some training image.
pub fn train_test_overlap(task: &Task) -> usize {
    let train: HashSet<Vec<u32>> = task.train.iter().map(|s| s.image.bits_key()).collect();
    task.test
        .iter()
        .filter(|s| train.contains(&s.image.bits_key()))
        .count()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskHeader {
    task_id: usize,
    class_ids: Vec<u32>,
    train_labels: Vec<u32>,
    test_labels: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataHeader {
    dtype: DType,
    /// `[C, H, W]`
    shape: [usize; 3],
    tasks: Vec<TaskHeader>,
}

pub fn encode_stream(stream: &TaskStream) -> Result<Vec<u8>> {
    let header = DataHeader {
        dtype: DType::F32,
        shape: [stream.channels, stream.image_size, stream.image_size],
        tasks: stream
            .tasks
            .iter()
            .map(|t| TaskHeader {
                task_id: t.task_id,
                class_ids: t.class_ids.clone(),
                train_labels: t.train.iter().map(|s| s.label).collect(),
                test_labels: t.test.iter().map(|s| s.label).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &stream.tasks {
        for s in t.train.iter().chain(&t.test) {
            for p in &s.image.pixels {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_stream(bytes: &[u8]) -> Result<TaskStream> {
    if bytes.len() < 20 {
        return Err(Error::Truncated(format!(
            "{} bytes is shorter than the preamble",
            bytes.len()
        )));
    }
    if &bytes[..8] != DATA_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != DATA_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATA_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(Error::Truncated("dataset header".into()));
    }
    let header: DataHeader = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    if header.dtype != DType::F32 {
        return Err(Error::Format("dataset payload must be f32".into()));
    }
    let [c, h, w] = header.shape;
    if h != w {
        return Err(Error::Format(format!("non-square images {h}x{w}")));
    }
    let per_image = c * h * w;
    let payload = &body[hlen..];
    let expected: usize = header
        .tasks
        .iter()
        .map(|t| (t.train_labels.len() + t.test_labels.len()) * per_image * 4)
        .sum();
    if payload.len() < expected {
        return Err(Error::Truncated(format!(
            "payload has {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let mut cursor = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
    let mut read_image = || Image {
        channels: c,
        height: h,
        width: w,
        pixels: cursor.by_ref().take(per_image).collect(),
    };
    let mut tasks = Vec::new();
    for th in header.tasks {
        let train = th
            .train_labels
            .iter()
            .map(|&label| Sample {
                image: read_image(),
                label,
            })
            .collect();
        let test = th
            .test_labels
            .iter()
            .map(|&label| Sample {
                image: read_image(),
                label,
            })
            .collect();
        tasks.push(Task {
            task_id: th.task_id,
            class_ids: th.class_ids,
            train,
            test,
        });
    }
    let stream = TaskStream {
        channels: c,
        image_size: h,
        tasks,
    };
    stream.validate()?;
    Ok(stream)
}

pub fn save_stream(stream: &TaskStream, path: &Path) -> Result<()> {
    let bytes = encode_stream(stream)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_external(path: &Path) -> Result<TaskStream> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_stream(&bytes)
}
