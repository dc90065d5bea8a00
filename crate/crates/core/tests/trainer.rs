use hlgp::backbone::{Backbone, LayerPrompt, VitConfig};
use hlgp::data::{generate_stream, Image, SyntheticSpec, TaskStream};
use hlgp::fusion::{fused_logits, uniform_weights};
use hlgp::hlgp::{PieMode, PromptConfig, PromptMode};
use hlgp::trainer::{ContinualState, TrainConfig};
use hlgp::{Error, Parameters, Tensor};
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

fn frozen_backbone() -> Backbone<f32> {
    let mut b = Backbone::surrogate(&vit(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    b.freeze();
    b
}

fn stream(tasks: usize) -> TaskStream {
    generate_stream(&SyntheticSpec {
        tasks,
        classes_per_task: 2,
        train_per_class: 6,
        test_per_class: 3,
        image_size: 8,
        channels: 3,
        noise: 0.1,
        seed: 4,
        first_class: 0,
    })
    .unwrap()
}

fn config(mode: PromptMode) -> TrainConfig {
    TrainConfig {
        epochs_per_task: 2,
        batch_size: 5,
        prompt: PromptConfig {
            mode,
            pie: if mode == PromptMode::HlgpPie {
                PieMode::Shared
            } else {
                PieMode::None
            },
            shared_layers: 2,
            rank: 2,
        },
        ..TrainConfig::default()
    }
}

fn tensors(p: &dyn Parameters<f32>) -> Vec<(String, Vec<u32>)> {
    let mut out = Vec::new();
    p.visit(&mut |n, t| {
        out.push((
            n.to_string(),
            t.data().iter().map(|x| x.to_bits()).collect(),
        ))
    });
    out
}

#[test]
fn fork_is_bit_equal_and_only_current_task_trains() {
    let s = stream(2);
    let mut st = ContinualState::new(frozen_backbone(), config(PromptMode::HlgpPie)).unwrap();
    st.init_task(0, &s.tasks[0].class_ids).unwrap();
    st.train_epoch(&s.tasks[0]).unwrap();
    st.finish_task(&s).unwrap();
    st.init_task(1, &s.tasks[1].class_ids).unwrap();
    let old: Vec<_> = tensors(&st.bank.generators[0])
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    let new: Vec<_> = tensors(&st.bank.generators[1])
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    assert_eq!(old, new);
    assert_eq!(st.bank.trainable_tasks(), vec![1]);
    assert!(st.bank.generators[1].trainable_count() > 0);
    assert_eq!(st.bank.generators[0].trainable_count(), 0);
}

#[test]
fn training_leaves_backbone_and_frozen_tasks_alone() {
    let s = stream(2);
    let mut st = ContinualState::new(frozen_backbone(), config(PromptMode::HlgpPie)).unwrap();
    let hash = st.backbone.content_hash();
    st.init_task(0, &s.tasks[0].class_ids).unwrap();
    st.train_epoch(&s.tasks[0]).unwrap();
    st.finish_task(&s).unwrap();
    let task0 = tensors(&st.bank.generators[0]);
    let head0 = tensors(&st.classifier.heads[0]);
    st.init_task(1, &s.tasks[1].class_ids).unwrap();
    let fresh = tensors(&st.bank.generators[1]);
    st.train_epoch(&s.tasks[1]).unwrap();
    st.train_epoch(&s.tasks[1]).unwrap();
    assert_eq!(tensors(&st.bank.generators[0]), task0);
    assert_eq!(tensors(&st.classifier.heads[0]), head0);
    assert_ne!(
        tensors(&st.bank.generators[1]),
        fresh,
        "current task never moved"
    );
    assert_eq!(st.backbone.content_hash(), hash);
    st.check_backbone().unwrap();
}

#[test]
fn zero_init_prompts_match_explicit_zero_prompts() {
    let s = stream(1);
    let mut st = ContinualState::new(frozen_backbone(), config(PromptMode::HlgpPie)).unwrap();
    st.init_task(0, &s.tasks[0].class_ids).unwrap();
    let subs = st.bank.generators[0].subprompts().unwrap();
    assert!(subs.layers.iter().all(|p| p
        .key
        .data()
        .iter()
        .chain(p.value.data())
        .all(|&x| x == 0.0)));
    let imgs: Vec<&Image> = s.tasks[0].test.iter().map(|x| &x.image).collect();
    let patches = st.backbone.patchify(&imgs).unwrap();
    let tape = hlgp::Tape::new();
    let prompts: Vec<_> = st
        .training_prompts(&tape, 0)
        .unwrap()
        .into_iter()
        .map(Some)
        .collect();
    let with = tape.value(
        st.backbone
            .forward_features(&tape, &patches, &prompts)
            .unwrap(),
    );
    let zero = LayerPrompt::new(Tensor::zeros(&[2, 8]), Tensor::zeros(&[2, 8])).unwrap();
    let zeros: Vec<_> = (0..vit().num_layers)
        .map(|_| Some(zero.on_tape(&tape)))
        .collect();
    let want = tape.value(
        st.backbone
            .forward_features(&tape, &patches, &zeros)
            .unwrap(),
    );
    assert_eq!(with, want);
}

#[test]
fn loss_falls_on_a_separable_task() {
    let s = generate_stream(&SyntheticSpec {
        tasks: 1,
        classes_per_task: 2,
        train_per_class: 12,
        test_per_class: 4,
        image_size: 8,
        channels: 3,
        noise: 0.1,
        seed: 2,
        first_class: 0,
    })
    .unwrap();
    let mut st = ContinualState::new(
        frozen_backbone(),
        TrainConfig {
            epochs_per_task: 15,
            ..config(PromptMode::HlgpPie)
        },
    )
    .unwrap();
    st.run_stream(&s, None).unwrap();
    let first = st.history.first().unwrap();
    let last = st.history.last().unwrap();
    assert!(last.loss < first.loss, "{first:?} -> {last:?}");
    assert!(last.accuracy > 95.0, "{last:?}");
}

#[test]
fn runs_are_reproducible() {
    let s = stream(2);
    let run = || {
        let mut st = ContinualState::new(frozen_backbone(), config(PromptMode::HlgpPie)).unwrap();
        st.run_stream(&s, None).unwrap();
        (st.accuracy.rows().to_vec(), tensors(&st.bank))
    };
    assert_eq!(run(), run());
}

#[test]
fn wrong_labels_are_data_errors() {
    let s = stream(2);
    let mut st = ContinualState::new(frozen_backbone(), config(PromptMode::HlgpPie)).unwrap();
    st.init_task(0, &s.tasks[0].class_ids).unwrap();
    let tape = hlgp::Tape::new();
    let img = &s.tasks[1].train[0];
    assert!(matches!(
        st.batch_loss(&tape, &[&img.image], &[img.label]),
        Err(Error::Data(_))
    ));
    let mut bad = s.clone();
    bad.tasks[1].class_ids[0] = bad.tasks[0].class_ids[0];
    let mut st = ContinualState::new(frozen_backbone(), config(PromptMode::HlgpPie)).unwrap();
    assert!(matches!(st.run_stream(&bad, None), Err(Error::Data(_))));
}

#[test]
fn trainable_backbone_is_refused() {
    let b = Backbone::<f32>::init(&vit(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(matches!(
        ContinualState::new(b, TrainConfig::default()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn two_stage_costs_two_forwards_per_sample() {
    let s = stream(3);
    let mut st = ContinualState::new(frozen_backbone(), config(PromptMode::Hlgp)).unwrap();
    st.run_stream(&s, None).unwrap();
    let imgs: Vec<&Image> = s.tasks[2].test.iter().map(|x| &x.image).collect();
    st.backbone.reset_forward_passes();
    st.predict(&imgs).unwrap();
    assert_eq!(st.backbone.forward_passes(), 2 * imgs.len());
}

#[test]
fn batched_prediction_matches_one_by_one() {
    let s = stream(2);
    let mut st = ContinualState::new(frozen_backbone(), config(PromptMode::HlgpPie)).unwrap();
    st.run_stream(&s, None).unwrap();
    let imgs: Vec<&Image> = s
        .tasks
        .iter()
        .flat_map(|t| t.test.iter().map(|x| &x.image))
        .collect();
    let all = st.predict(&imgs).unwrap();
    let single: Vec<u32> = imgs.iter().map(|i| st.predict(&[*i]).unwrap()[0]).collect();
    assert_eq!(all, single);
    let w = uniform_weights(2).unwrap();
    let logits = fused_logits(&st.bank, &st.backbone, &st.classifier, &imgs, &[w]).unwrap();
    assert_eq!(logits.len(), imgs.len());
}

#[test]
fn interrupted_run_without_checkpoint_matches() {
    let s = stream(2);
    let mut a = ContinualState::new(frozen_backbone(), config(PromptMode::HlgpPie)).unwrap();
    assert!(a.run_stream(&s, None).unwrap());
    let mut b = ContinualState::new(frozen_backbone(), config(PromptMode::HlgpPie)).unwrap();
    assert!(!b.run_stream(&s, Some((1, 1))).unwrap());
    assert_eq!(b.progress.tasks_done, 1);
    assert!(b.run_stream(&s, None).unwrap());
    assert_eq!(a.accuracy, b.accuracy);
}
