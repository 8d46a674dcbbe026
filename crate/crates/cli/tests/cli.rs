//! End-to-end runs of the `addgcn` binary: train → gen-data → eval →
//! ablate → export-maps → dump-adjacency on a small synthetic config.

use std::process::Command;

const TINY_CONFIG: &str = r#"
epochs = 2
batch_size = 8
lr_head = 0.05
lr_features = 0.01
lr_step_epochs = []
num_classes = 4
in_channels = 6
repr_channels = 8
hidden_dim = 8
out_dim = 8
height = 4
width = 4
block_height = 2
block_width = 2
train_samples = 24
eval_samples = 12
noise_sigma = 0.3
marginal = 0.45
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_addgcn"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn addgcn");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(
        out.status.success(),
        "command failed\nstdout:\n{stdout}\nstderr:\n{stderr}"
    );
    stdout
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("config.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();

    // train
    let train_out = root.join("train");
    let stdout = run_ok(bin().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("epoch"), "{stdout}");
    let checkpoint = train_out.join("checkpoint.adgk");
    assert!(checkpoint.exists());
    assert!(train_out.join("metrics.csv").exists());
    assert!(train_out.join("report.json").exists());

    // gen-data
    let data_out = root.join("data");
    run_ok(bin().args([
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data_out.to_str().unwrap(),
    ]));
    let eval_index = data_out.join("eval").join("index.json");
    assert!(eval_index.exists());

    // eval
    let eval_out = root.join("eval");
    let stdout = run_ok(bin().args([
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--data",
        eval_index.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("mAP"), "{stdout}");
    let jsonl = std::fs::read_to_string(eval_out.join("scores.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 12);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(eval_out.join("report.json")).unwrap()).unwrap();
    assert!(report.get("mAP").is_some());
    assert!(report.get("top3_OF1").is_some());

    // export-maps (falls back to the config's eval split)
    let maps_out = root.join("maps");
    run_ok(bin().args([
        "export-maps",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--out",
        maps_out.to_str().unwrap(),
    ]));
    let index: serde_json::Value =
        serde_json::from_slice(&std::fs::read(maps_out.join("maps_index.json")).unwrap()).unwrap();
    assert_eq!(index["maps"].as_array().unwrap().len(), 12 * 4);

    // dump-adjacency for the first sample of the saved eval split
    let adj_out = root.join("adj");
    run_ok(bin().args([
        "dump-adjacency",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--sample",
        "sample-00000",
        "--data",
        eval_index.to_str().unwrap(),
        "--out",
        adj_out.to_str().unwrap(),
    ]));
    assert!(adj_out.join("sample-00000_adjacency_dynamic.adgt").exists());
    assert!(adj_out.join("adjacency_static.adgt").exists());
}

#[test]
fn ablate_emits_variant_csv() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("config.toml");
    // single epoch and fewer samples: the sweep trains one model per variant
    let tiny = TINY_CONFIG
        .replace("epochs = 2", "epochs = 1")
        .replace("train_samples = 24", "train_samples = 12");
    std::fs::write(&config, tiny).unwrap();
    let out = root.join("ablate");
    let stdout = run_ok(bin().args([
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--axis",
        "map_mode",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("cls->GMP"), "{stdout}");
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4); // header + 3 variants
}

#[test]
fn resume_continues_training() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("config.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let out_a = root.join("a");
    run_ok(bin().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
    ]));
    // resume from the finished checkpoint: a no-op run that still succeeds
    let stdout = run_ok(bin().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        root.join("b").to_str().unwrap(),
        "--resume",
        out_a.join("checkpoint.adgk").to_str().unwrap(),
    ]));
    assert!(stdout.contains("resuming"), "{stdout}");
}

#[test]
fn bad_inputs_fail_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(&config, "epoch = 3\n").unwrap(); // typo key
    let out = bin()
        .args(["train", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("config"), "{stderr}");

    let out = bin()
        .args(["ablate", "--config", config.to_str().unwrap(), "--axis", "nope"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn help_lists_subcommands() {
    let stdout = run_ok(bin().arg("--help"));
    for sub in ["train", "eval", "ablate", "export-maps", "dump-adjacency"] {
        assert!(stdout.contains(sub), "missing {sub} in help:\n{stdout}");
    }
}
