use hlgp::backbone::{Backbone, VitConfig};
use hlgp::data::{generate_stream, Image, SyntheticSpec, TaskStream};
use hlgp::hlgp::{PieMode, PromptConfig, PromptMode};
use hlgp::store::{self, Owner};
use hlgp::trainer::{ContinualState, TrainConfig};
use hlgp::{Error, Parameters};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vit() -> VitConfig {
    VitConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        num_layers: 4,
        num_heads: 2,
        mlp_ratio: 2,
        prompt_length: 2,
    }
}

fn stream() -> TaskStream {
    generate_stream(&SyntheticSpec {
        tasks: 3,
        classes_per_task: 2,
        train_per_class: 6,
        test_per_class: 3,
        image_size: 8,
        channels: 3,
        noise: 0.1,
        seed: 8,
        first_class: 0,
    })
    .unwrap()
}

fn state(mode: PromptMode, pie: PieMode) -> ContinualState<f32> {
    let mut b = Backbone::surrogate(&vit(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    b.freeze();
    let cfg = TrainConfig {
        epochs_per_task: 3,
        batch_size: 5,
        prompt: PromptConfig {
            mode,
            pie,
            shared_layers: 2,
            rank: 2,
        },
        ..TrainConfig::default()
    };
    ContinualState::new(b, cfg).unwrap()
}

fn all_bits(s: &ContinualState<f32>) -> Vec<(String, Vec<u32>)> {
    let mut out = Vec::new();
    let mut push = |n: &str, t: &hlgp::Tensor<f32>| {
        out.push((
            n.to_string(),
            t.data().iter().map(|x| x.to_bits()).collect(),
        ))
    };
    s.backbone.visit(&mut push);
    s.bank.visit(&mut push);
    s.classifier.visit(&mut push);
    out
}

#[test]
fn mid_stream_state_round_trips_bit_exactly() {
    let s = stream();
    for (mode, pie) in [
        (PromptMode::HlgpPie, PieMode::Shared),
        (PromptMode::HlgpPie, PieMode::NonShared),
        (PromptMode::HlgpPie, PieMode::Sinusoidal),
        (PromptMode::IndependentLayerwise, PieMode::None),
    ] {
        let mut st = state(mode, pie);
        assert!(!st.run_stream(&s, Some((1, 2))).unwrap());
        let bytes = store::encode_state(&st).unwrap();
        let back: ContinualState<f32> = store::decode_state(&bytes).unwrap();
        let again = store::encode_state(&back).unwrap();
        if again != bytes {
            let i = again
                .iter()
                .zip(&bytes)
                .position(|(a, b)| a != b)
                .unwrap_or(again.len().min(bytes.len()));
            panic!(
                "{mode:?} {pie:?} differ at {i}: {:?} vs {:?}",
                String::from_utf8_lossy(&bytes[i.saturating_sub(200)..(i + 100).min(bytes.len())]),
                String::from_utf8_lossy(&again[i.saturating_sub(200)..(i + 100).min(again.len())])
            );
        }
        assert_eq!(all_bits(&back), all_bits(&st));
        assert_eq!(back.progress, st.progress);
        assert_eq!(back.accuracy, st.accuracy);
        assert_eq!(back.optimizer.step, st.optimizer.step);
        assert_eq!(back.bank.trainable_tasks(), st.bank.trainable_tasks());
        let probe: Vec<&Image> = s.tasks[0].test.iter().map(|x| &x.image).collect();
        assert_eq!(back.predict(&probe).unwrap(), st.predict(&probe).unwrap());
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let s = stream();
    let dir = tempfile::tempdir().unwrap();
    let mut full = state(PromptMode::HlgpPie, PieMode::Shared);
    full.run_stream(&s, None).unwrap();
    for stop in [(0, 1), (1, 0), (1, 2), (2, 1)] {
        let mut part = state(PromptMode::HlgpPie, PieMode::Shared);
        assert!(!part.run_stream(&s, Some(stop)).unwrap());
        let path = dir.path().join("mid.ckpt");
        store::save_state(&part, &path).unwrap();
        let mut resumed: ContinualState<f32> = store::load_state(&path).unwrap();
        assert!(resumed.run_stream(&s, None).unwrap());
        assert_eq!(resumed.accuracy, full.accuracy, "stop {stop:?}");
        assert_eq!(metrics_csv(&resumed), metrics_csv(&full));
        assert_eq!(
            store::encode_state(&resumed).unwrap(),
            store::encode_state(&full).unwrap()
        );
    }
}

fn metrics_csv(s: &ContinualState<f32>) -> String {
    hlgp::metrics::to_csv(&s.accuracy).unwrap()
}

#[test]
fn manifest_names_partition_by_owner() {
    let s = stream();
    let mut st = state(PromptMode::HlgpPie, PieMode::Shared);
    st.run_stream(&s, Some((1, 1))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    store::save_state(&st, &path).unwrap();
    let m = store::read_manifest(&path).unwrap();
    let mut tasks = std::collections::BTreeSet::new();
    for r in &m.tensors {
        match &r.owner {
            Owner::Task(t) => {
                let plain = r
                    .name
                    .strip_prefix("optim.m.")
                    .or_else(|| r.name.strip_prefix("optim.v."))
                    .unwrap_or(&r.name);
                assert!(
                    plain.starts_with(&format!("task{t}."))
                        || plain.starts_with(&format!("classifier.{t}.")),
                    "{} {t}",
                    r.name
                );
                tasks.insert(*t);
            }
            Owner::Named(n) => assert!(
                ["backbone", "classifier", "optim"].contains(&n.as_str()),
                "{}",
                r.name
            ),
        }
    }
    assert_eq!(tasks.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    assert!(m.tensors.iter().any(|r| r.name.starts_with("optim.")));
    assert!(m.tensors.windows(2).all(|w| w[0].name < w[1].name));
}

#[test]
fn damaged_files_give_distinct_errors() {
    let s = stream();
    let mut st = state(PromptMode::Hlgp, PieMode::None);
    st.run_stream(&s, Some((1, 0))).unwrap();
    let bytes = store::encode_state(&st).unwrap();
    let mut flipped = bytes.clone();
    let n = flipped.len();
    flipped[n - 40] ^= 0x10;
    assert!(matches!(
        store::decode_state::<f32>(&flipped),
        Err(Error::Checksum { .. })
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        store::decode_state::<f32>(&magic),
        Err(Error::Format(_))
    ));
    let mut version = bytes.clone();
    version[8] += 1;
    assert!(matches!(
        store::decode_state::<f32>(&version),
        Err(Error::Version { .. })
    ));
    assert!(matches!(
        store::decode_state::<f32>(&bytes[..bytes.len() / 2]),
        Err(Error::Truncated(_))
    ));
    assert!(matches!(
        store::decode_state::<f64>(&bytes),
        Err(Error::Format(_))
    ));
}
