use std::path::Path;
use std::process::{Command, Output};

use hlgp::backbone::{Backbone, VitConfig};
use rand::SeedableRng;

const TINY: &str = r#"
seeds = [0]

[vit]
image_size = 8
patch_size = 4
embed_dim = 8
num_layers = 4
num_heads = 2
prompt_length = 2

[train]
epochs_per_task = 2
batch_size = 8

[train.prompt]
shared_layers = 2
rank = 2

[data]
tasks = 3
classes_per_task = 2
train_per_class = 6
test_per_class = 3
image_size = 8

[pretrain]
epochs = 2

[pretrain.data]
classes_per_task = 4
train_per_class = 8
test_per_class = 4
image_size = 8
"#;

fn hlgp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hlgp"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn params_prints_full_scale_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = hlgp(dir.path(), &["params"]);
    ok(&out);
    let csv = std::fs::read_to_string(dir.path().join("params.csv")).unwrap();
    assert!(csv
        .lines()
        .any(|l| l.starts_with("full_l10,hlgp_pie,shared,768,10,12,4,16")));
    assert!(csv.lines().any(|l| l.starts_with("full_l20,")));
    assert_eq!(csv.lines().count(), 1 + 9);
}

#[test]
fn gradcheck_passes_and_respects_pie_mode() {
    let dir = tempfile::tempdir().unwrap();
    ok(&hlgp(dir.path(), &["gradcheck"]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap())
            .unwrap();
    assert_eq!(report["passed"], true);
    let cfg = tiny_config(dir.path(), "\n[gradcheck]\npie = \"none\"\ntasks = 2\n");
    ok(&hlgp(dir.path(), &["gradcheck", "--config", &cfg]));
    let text = std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap();
    assert!(!text.contains(".pie."));
    assert!(text.contains("task1.root.key"));
}

#[test]
fn failing_gradcheck_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "\n[gradcheck]\ntolerance = 1e-30\n");
    assert_eq!(
        hlgp(dir.path(), &["gradcheck", "--config", &cfg])
            .status
            .code(),
        Some(5)
    );
}

#[test]
fn bad_configs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for extra in [
        "\nbogus = 3\n",
        "\n[train.prompt]\nrank = 0\n",
        "\n[data]\nfirst_class = 97\n[pretrain.data]\nfirst_class = 96\n",
    ] {
        let cfg = tiny_config(dir.path(), extra);
        assert_eq!(
            hlgp(dir.path(), &["params", "--config", &cfg])
                .status
                .code(),
            Some(2),
            "{extra}"
        );
    }
}

#[test]
fn train_guards_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    // no backbone yet
    assert_eq!(
        hlgp(dir.path(), &["train", "--config", &cfg]).status.code(),
        Some(8)
    );
    let vit = VitConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        num_layers: 4,
        num_heads: 2,
        mlp_ratio: 2,
        prompt_length: 2,
    };
    let live = Backbone::<f32>::init(&vit, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
    let path = dir.path().join("live.ckpt");
    hlgp::store::save_backbone(&live, &path).unwrap();
    let out = hlgp(
        dir.path(),
        &[
            "train",
            "--config",
            &cfg,
            "--backbone",
            path.to_str().unwrap(),
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(6),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 9] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert_eq!(
        hlgp(
            dir.path(),
            &[
                "train",
                "--config",
                &cfg,
                "--backbone",
                path.to_str().unwrap()
            ]
        )
        .status
        .code(),
        Some(7)
    );
}

#[test]
fn pretrain_train_eval_resume_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    ok(&hlgp(dir.path(), &["pretrain", "--config", &cfg]));
    let backbone = std::fs::read(dir.path().join("backbone.ckpt")).unwrap();
    ok(&hlgp(dir.path(), &["pretrain", "--config", &cfg]));
    assert_eq!(
        std::fs::read(dir.path().join("backbone.ckpt")).unwrap(),
        backbone
    );

    ok(&hlgp(dir.path(), &["train", "--config", &cfg]));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(csv.starts_with("task,faa,caa,af\n"));
    let state = std::fs::read(dir.path().join("state.ckpt")).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(
        summary["backbone_hash_before"],
        summary["backbone_hash_after"]
    );

    ok(&hlgp(dir.path(), &["train", "--config", &cfg]));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(),
        csv
    );
    assert_eq!(std::fs::read(dir.path().join("state.ckpt")).unwrap(), state);

    ok(&hlgp(dir.path(), &["eval", "--config", &cfg]));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap())
            .unwrap();
    assert_eq!(eval["matches_recorded_row"], true);

    let mid = tempfile::tempdir().unwrap();
    let bb = dir.path().join("backbone.ckpt");
    let bb = bb.to_str().unwrap();
    ok(&hlgp(
        mid.path(),
        &[
            "train",
            "--config",
            &cfg,
            "--backbone",
            bb,
            "--stop-at",
            "1:1",
        ],
    ));
    assert!(!mid.path().join("metrics.csv").exists());
    let saved = mid.path().join("state.ckpt");
    let resumed = mid.path().join("resume.ckpt");
    std::fs::rename(&saved, &resumed).unwrap();
    ok(&hlgp(
        mid.path(),
        &[
            "train",
            "--config",
            &cfg,
            "--backbone",
            bb,
            "--resume",
            resumed.to_str().unwrap(),
        ],
    ));
    assert_eq!(
        std::fs::read_to_string(mid.path().join("metrics.csv")).unwrap(),
        csv
    );
    assert_eq!(std::fs::read(mid.path().join("state.ckpt")).unwrap(), state);
}

#[test]
fn seed_flag_changes_the_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    ok(&hlgp(dir.path(), &["pretrain", "--config", &cfg]));
    ok(&hlgp(
        dir.path(),
        &["train", "--config", &cfg, "--seed", "0"],
    ));
    let a = std::fs::read(dir.path().join("state.ckpt")).unwrap();
    ok(&hlgp(
        dir.path(),
        &["train", "--config", &cfg, "--seed", "1"],
    ));
    assert_ne!(std::fs::read(dir.path().join("state.ckpt")).unwrap(), a);
}
