use std::path::{Path, PathBuf};
use std::process::Command;

use ezdit_cli::config::{ExperimentConfig, ModelChoice};
use serde_json::{json, Value};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Runs the binary, returning `(exit code, stdout, stderr)`.
fn ezdit(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ezdit")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = ezdit(args);
    assert_eq!(code, 0, "{args:?}: {stderr}");
    stdout
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

/// Small but complete config: a few steps per stage on short sequences.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut c = ExperimentConfig::default();
    c.dataset.frames = 24;
    c.dataset.train_size = 16;
    c.dataset.test_size = 4;
    for s in 1..=3 {
        let st = c.stages.get_mut(s).unwrap();
        st.steps = 3;
        st.batch_size = 2;
    }
    c.sampler.num_samples = 2;
    c.sampler.steps = 5;
    c.sweep.ws = vec![1.0, 3.0];
    c.sweep.phis = vec![0.0, 0.5];
    c.sweep.num_samples = 4;
    c.sweep.steps = 3;
    c.output_dir = dir.join("run");
    let path = dir.join("tiny.json");
    std::fs::write(&path, c.to_json()).unwrap();
    path
}

fn run_lines(dir: &Path) -> Vec<Value> {
    String::from_utf8(read(dir.join("runs.jsonl")))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn shipped_presets_parse_and_document_the_ladder() {
    let toy = ExperimentConfig::load(&root().join("configs/toy.json")).unwrap();
    assert_eq!(toy, ExperimentConfig::default());
    let full = ExperimentConfig::load(&root().join("configs/full_scale.json")).unwrap();
    full.validate().unwrap();
    assert_eq!(full.model, ModelChoice::Preset("dit-xl/ezaudio_dit".into()));
    let ladder: Vec<(usize, usize, f64)> = (1..=3)
        .map(|s| {
            let st = full.stages.get(s).unwrap();
            (st.steps, st.batch_size, st.learning_rate)
        })
        .collect();
    assert_eq!(ladder, vec![(100_000, 128, 1e-4), (50_000, 128, 5e-5), (30_000, 128, 1e-5)]);
}

#[test]
fn schema_covers_every_config_section() {
    let schema: Value = serde_json::from_slice(&read(root().join("schema/experiment.schema.json"))).unwrap();
    assert_eq!(schema["additionalProperties"], json!(false));
    let mut props: Vec<&String> = schema["properties"].as_object().unwrap().keys().collect();
    let cfg = serde_json::to_value(ExperimentConfig::default()).unwrap();
    let mut keys: Vec<&String> = cfg.as_object().unwrap().keys().collect();
    props.sort();
    keys.sort();
    assert_eq!(props, keys);
}

#[test]
fn unknown_config_keys_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"sampler": {"stepz": 3}}"#).unwrap();
    let (code, _, err) = ezdit(&["--config", p.to_str().unwrap(), "variants"]);
    assert_eq!(code, 1);
    assert!(err.contains("stepz"), "{err}");
    let (code, _, _) = ezdit(&["frobnicate"]);
    assert_eq!(code, 1);
    assert_eq!(ezdit(&["--help"]).0, 0);
}

#[test]
fn variants_table_orders_dit_l_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["--out", out, "variants", "--scale", "dit-l"]);
    let first = read(dir.path().join("variants.csv"));
    ok(&["--out", out, "variants", "--scale", "dit-l"]);
    assert_eq!(first, read(dir.path().join("variants.csv")));

    let text = String::from_utf8(first).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let get = |variant: &str, c: &str| -> u64 {
        rows.iter().find(|r| r[0] == variant).unwrap()[col(c)].parse().unwrap()
    };
    for c in ["total_params", "memory_bytes"] {
        let (px, ez) = (get("pixelart_dit", c), get("ezaudio_dit", c));
        let (cross, sa) = (get("cross_dit", c), get("stable_audio_dit", c));
        assert!(px < ez && ez < cross.min(sa), "{c}");
    }
    assert_eq!(run_lines(dir.path()).len(), 2);

    let (code, _, err) = ezdit(&["--out", out, "variants", "--scale", "huge"]);
    assert_eq!(code, 1);
    assert!(err.contains("dit-xl"));
}

#[test]
fn staged_training_sampling_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let run = dir.path().join("run");

    // Resume chain is enforced before anything is trained.
    let (code, _, err) = ezdit(&["--config", cfg, "train", "--stage", "2"]);
    assert_eq!(code, 1, "{err}");
    let (code, _, _) = ezdit(&["--config", cfg, "sample"]);
    assert_eq!(code, 1);

    ok(&["--config", cfg, "train", "--stage", "1", "--dry-run"]);
    assert!(!run.join("stage1.ezdt").exists());
    ok(&["--config", cfg, "train", "--stage", "1"]);
    let csv = String::from_utf8(read(run.join("loss_stage1.csv"))).unwrap();
    assert!(csv.starts_with("step,loss,lr,stage\n"));
    assert_eq!(csv.lines().count(), 4);
    ok(&["--config", cfg, "train", "--stage", "2"]);
    ok(&["--config", cfg, "train", "--stage", "3"]);
    for f in ["stage1.ezdt", "stage2.ezdt", "stage3.ezdt", "train-stage3.config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    // Sampling defaults and determinism.
    ok(&["--config", cfg, "sample", "--seed", "4", "--text", "3"]);
    let resolved: Value = serde_json::from_slice(&read(run.join("sample.config.json"))).unwrap();
    assert_eq!(resolved["sampler"]["w"], json!(3.0));
    assert_eq!(resolved["sampler"]["phi"], json!(0.0));
    let latent = read(run.join("sample.ezdt"));
    ok(&["--config", cfg, "sample", "--seed", "4", "--text", "3"]);
    assert_eq!(latent, read(run.join("sample.ezdt")));
    let stats: Value = serde_json::from_slice(&read(run.join("sample_stats.json"))).unwrap();
    assert_eq!(stats["spectral_argmax"].as_array().unwrap().len(), 2);

    ok(&["--config", cfg, "sample", "--cfg", "1", "--rescale", "0.75", "--text", "2"]);
    let a = read(run.join("sample.ezdt"));
    ok(&["--config", cfg, "sample", "--cfg", "1", "--rescale", "0", "--text", "2"]);
    let b = read(run.join("sample.ezdt"));
    // Only the recorded phi in the header differs; the latent payload must not.
    let payload = |v: &[u8]| {
        let ck = ezdit_core::dit::read_checkpoint(v).unwrap();
        ck.tensors.get("latent").unwrap().clone()
    };
    assert!(payload(&a).bit_eq(&payload(&b)));

    for bad in [
        &["sample", "--steps", "0"][..],
        &["sample", "--cfg", "0.5"],
        &["sample", "--rescale", "1.5"],
        &["sample", "--text", "8"],
    ] {
        let mut args = vec!["--config", cfg];
        args.extend_from_slice(bad);
        assert_eq!(ezdit(&args).0, 1, "{bad:?}");
    }

    // Sweep grid.
    ok(&["--config", cfg, "sweep-cfg"]);
    let sweep = String::from_utf8(read(run.join("sweep_cfg.csv"))).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(lines.next(), Some("w,phi,alignment,std_drift,n"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][..2], [1.0, 0.0]);
    assert_eq!(rows[0][3], 0.0);
    ok(&["--config", cfg, "sweep-cfg"]);
    assert_eq!(sweep.as_bytes(), read(run.join("sweep_cfg.csv")));

    // Every run appended one manifest line, failures included once the output directory is known.
    let runs = run_lines(&run);
    assert!(runs.iter().all(|r| r["config_sha256"].as_str().unwrap().len() == 64));
    assert_eq!(runs.iter().filter(|r| r["status"] == "ok").count(), 10);
}

#[test]
fn resolved_config_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(&["--config", cfg.to_str().unwrap(), "train", "--stage", "1"]);
    let first = read(run.join("stage1.ezdt"));
    let resolved = dir.path().join("resolved.json");
    std::fs::copy(run.join("train-stage1.config.json"), &resolved).unwrap();
    let again = dir.path().join("again");
    ok(&["--config", resolved.to_str().unwrap(), "--out", again.to_str().unwrap(), "train", "--stage", "1"]);
    assert_eq!(first, read(again.join("stage1.ezdt")));
    assert_eq!(read(run.join("loss_stage1.csv")), read(again.join("loss_stage1.csv")));
}

#[test]
fn filter_fixture_counts_and_nesting() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = root().join("fixtures/captions10.jsonl");
    let scorer = format!("file:{}", root().join("fixtures/scores10.json").display());
    let mut kept_sets: Vec<Vec<String>> = Vec::new();
    for (tau, want) in [("0.35", 7), ("0.40", 5), ("0.45", 3)] {
        let out = dir.path().join(tau);
        ok(&[
            "--out",
            out.to_str().unwrap(),
            "filter",
            manifest.to_str().unwrap(),
            "--threshold",
            tau,
            "--scorer",
            &scorer,
        ]);
        let summary: Value = serde_json::from_slice(&read(out.join("filter_summary.json"))).unwrap();
        assert_eq!(summary["input_count"], json!(10));
        assert_eq!(summary["kept_count"], json!(want));
        let kept = ezdit_core::filter::load_manifest(out.join("kept.jsonl")).unwrap();
        let dropped = ezdit_core::filter::load_manifest(out.join("dropped.jsonl")).unwrap();
        assert_eq!(kept.len() + dropped.len(), 10);
        kept_sets.push(kept.into_iter().map(|r| r.id).collect());
    }
    for w in kept_sets.windows(2) {
        assert!(w[1].iter().all(|id| w[0].contains(id)));
    }

    let out = dir.path().join("mock");
    let o = out.to_str().unwrap();
    ok(&["--out", o, "filter", manifest.to_str().unwrap()]);
    let kept = read(out.join("kept.jsonl"));
    ok(&["--out", o, "filter", manifest.to_str().unwrap()]);
    assert_eq!(kept, read(out.join("kept.jsonl")));

    let m = manifest.to_str().unwrap();
    assert_eq!(ezdit(&["--out", o, "filter", m, "--threshold", "2.0"]).0, 1);
    assert_eq!(ezdit(&["--out", o, "filter", m, "--scorer", "clap"]).0, 1);
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\":\"a\",\"caption\":\"x\",\"source\":\"human\"}\nnot json\n").unwrap();
    let (code, _, err) = ezdit(&["--out", o, "filter", broken.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("line 2"), "{err}");
}
