use std::path::Path;
use std::process::{Command, Output};

fn facenet(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_facenet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "facenet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("synth.cfg"),
        "num_identities = 8\nsamples_per_identity = 4\nimage_height = 32\nimage_width = 16\n\
         flare_radius_min = 8\nflare_radius_max = 10\ntrain_identities = 4\n",
    )
    .unwrap();
    std::fs::write(
        d.join("train.cfg"),
        "epochs = 1\nsteps_per_epoch = 2\nidentities_per_batch = 4\nimages_per_identity = 2\n\
         image_height = 32\nimage_width = 16\nembedding_dim = 8\n",
    )
    .unwrap();

    facenet(&["generate-data", "--config", "synth.cfg", "--out", "data"], d);
    assert!(d.join("data/manifest.csv").exists());
    assert!(d.join("data/flare_gt.csv").exists());

    facenet(&["pseudolabel", "data"], d);
    let labels = std::fs::read_to_string(d.join("data/pseudo_labels.csv")).unwrap();
    assert!(labels.starts_with("sample_id,delta_rgb,delta_ni,is_flare"));
    assert_eq!(labels.lines().count(), 1 + 32);

    let train = facenet(&["train", "--config", "train.cfg", "--data", "data", "--out", "run", "--log-every", "1"], d);
    let stdout = String::from_utf8_lossy(&train.stdout);
    assert!(stdout.contains("l_all="), "{stdout}");
    assert!(stdout.contains("eval mAP="), "{stdout}");

    facenet(&["eval", "--ckpt", "run/checkpoint.safetensors", "--data", "data", "--out", "eval"], d);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval/metrics.json")).unwrap()).unwrap();
    for key in ["mAP", "R1", "R5", "R10"] {
        let v = metrics[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key}={v}");
    }
    let run_metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics, run_metrics);
    assert!(std::fs::read_to_string(d.join("eval/ranking.csv"))
        .unwrap()
        .starts_with("query,rank,gallery,distance,is_match"));

    facenet(
        &["visualize-masks", "--ckpt", "run/checkpoint.safetensors", "--data", "data", "--out", "masks", "--limit", "3"],
        d,
    );
    let pngs = std::fs::read_dir(d.join("masks")).unwrap().count();
    assert_eq!(pngs, 6);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.cfg"), "epochs = many\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_facenet"))
        .args(["train", "--config", "bad.cfg", "--data", "nowhere"])
        .current_dir(d)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
    let out = Command::new(env!("CARGO_BIN_EXE_facenet"))
        .args(["eval", "--ckpt", "missing.safetensors", "--data", "nowhere"])
        .current_dir(d)
        .output()
        .unwrap();
    assert!(!out.status.success());
}
