//! End-to-end tests of the `flexio` binary: synth -> train -> inspect ->
//! separate -> evaluate, plus exit-code conventions.

use std::path::Path;
use std::process::{Command, Output};

fn flexio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexio"))
        .args(args)
        .output()
        .expect("failed to launch flexio")
}

fn write(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

fn synth_config() -> String {
    r#"{
        "seed": 7,
        "scene_length": 3200,
        "ref_channel": 0,
        "snr_db": [10.0, 10.0],
        "max_delay": 4.0,
        "gain_jitter_db": 2.0,
        "reverb": null,
        "groups": [{ "n_speakers": 2, "channels": 2, "count": 3 }]
    }"#
    .to_string()
}

fn run_config(train_manifest: &Path) -> String {
    format!(
        r#"{{
        "model": {{
            "dim": 16, "heads": 2, "head_dim": 4, "tac_hidden": 32,
            "cross_prompt_blocks": 1, "tse_blocks": 1, "comm": "tac",
            "ref_channel": 0, "max_prompts": 5, "ffn_expansion": 2,
            "norm_groups": 4, "conv_kernel": 4,
            "omit_cross_prompt_pre_ffn": true, "ca_heads": 2, "ca_head_dim": 4
        }},
        "train": {{
            "seed": 1, "steps_per_epoch": 2, "max_epochs": 1,
            "warmup_steps": 4, "crop_seconds": 0.1
        }},
        "data": {{ "train_manifest": {:?} }}
    }}"#,
        train_manifest.to_str().unwrap()
    )
}

#[test]
fn full_pipeline_via_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // synth
    let synth_cfg = root.join("synth.json");
    write(&synth_cfg, &synth_config());
    let data_dir = root.join("data");
    let out = flexio(&[
        "synth",
        "--config",
        synth_cfg.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = data_dir.join("manifest.jsonl");
    assert!(manifest.exists());

    // train
    let run_cfg = root.join("run.json");
    write(&run_cfg, &run_config(&manifest));
    let ckpt_root = root.join("ckpt");
    let out = flexio(&[
        "train",
        "--config",
        run_cfg.to_str().unwrap(),
        "--out",
        ckpt_root.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = ckpt_root.join("final");
    assert!(ckpt.join("weights.bin").exists());
    assert!(ckpt_root.join("train_log.csv").exists());

    // inspect
    let out = flexio(&["inspect", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("total parameters:"), "{text}");

    // separate
    let mix = data_dir.join("n2m2_00000_mix.wav");
    let sep_dir = root.join("sep");
    let out = flexio(&[
        "separate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        mix.to_str().unwrap(),
        "--num-speakers",
        "2",
        "--out",
        sep_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sep_dir.join("speaker_00.wav").exists());
    assert!(sep_dir.join("speaker_01.wav").exists());

    // evaluate
    let report = root.join("eval.csv");
    let out = flexio(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("kind,n,m,si_sdr_db,si_sdri_db"));
    assert!(csv.contains("group_mean,2,2"));

    // reference channel out of range -> usage error (exit 2)
    let out = flexio(&[
        "separate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        mix.to_str().unwrap(),
        "--num-speakers",
        "2",
        "--ref-channel",
        "7",
        "--out",
        sep_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reference channel"));

    // missing checkpoint -> operational error (exit 1)
    let out = flexio(&[
        "inspect",
        "--checkpoint",
        root.join("nope").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    write(&bad, r#"{"model": {}, "unknown_section": 1}"#);
    let out = flexio(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seed_controls_dataset_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.json");
    write(&cfg, &synth_config());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        let r = flexio(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert!(r.status.success());
    }
    let wa = std::fs::read(a.join("n2m2_00000_mix.wav")).unwrap();
    let wb = std::fs::read(b.join("n2m2_00000_mix.wav")).unwrap();
    let wc = std::fs::read(c.join("n2m2_00000_mix.wav")).unwrap();
    assert_eq!(wa, wb);
    assert_ne!(wa, wc);
}

#[test]
fn invalid_thread_env_var_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_flexio"))
        .env("FLEXIO_NUM_THREADS", "zero")
        .args(["inspect", "--checkpoint", "irrelevant"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FLEXIO_NUM_THREADS"));
}

#[test]
fn threaded_synthesis_matches_single_threaded_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.json");
    write(&cfg, &synth_config());
    let single = dir.path().join("single");
    let multi = dir.path().join("multi");
    for (out, threads) in [(&single, "1"), (&multi, "3")] {
        let r = Command::new(env!("CARGO_BIN_EXE_flexio"))
            .env("FLEXIO_NUM_THREADS", threads)
            .args(["synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(r.status.success());
    }
    for name in ["manifest.jsonl", "n2m2_00001_mix.wav", "n2m2_00002_s1.wav"] {
        let a = std::fs::read(single.join(name)).unwrap();
        let b = std::fs::read(multi.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs across thread counts");
    }
}
