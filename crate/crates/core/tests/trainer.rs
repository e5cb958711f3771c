use std::path::Path;

use facenet::checkpoint::Checkpoint;
use facenet::data::{self, SpectralTriplet, Split};
use facenet::model::Ablation;
use facenet::synth::{self, SynthConfig};
use facenet::trainer::{self, train_step, TrainConfig, TrainState};

fn dataset(dir: &Path, ids: usize, train: usize) {
    let cfg = SynthConfig {
        num_identities: ids,
        samples_per_identity: 4,
        image_size: (32, 16),
        flare_radius_range: (4.0, 6.0),
        train_identities: train,
        ..Default::default()
    };
    synth::generate(&cfg, dir).unwrap();
}

fn config() -> TrainConfig {
    TrainConfig {
        image_height: 32,
        image_width: 16,
        p: 4,
        k: 4,
        lr: 1e-3,
        embedding_dim: 16,
        eval_batch_size: 16,
        ..Default::default()
    }
}

fn train_split(root: &Path, cfg: &TrainConfig) -> Vec<SpectralTriplet> {
    data::load_dataset(root, cfg.input_size())
        .unwrap()
        .into_iter()
        .filter(|t| t.split == Split::Train)
        .collect()
}

fn steps(state: &mut TrainState, train: &[SpectralTriplet], n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let (b, f) = state.next_batch(train).unwrap();
            train_step(state, &b, &f).unwrap().l_all
        })
        .collect()
}

#[test]
fn baseline_step_has_no_flare_or_consistency_terms() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 4, 4);
    let cfg = TrainConfig {
        ablation: Ablation::BASELINE,
        ..config()
    };
    let train = train_split(dir.path(), &cfg);
    let mut state = TrainState::new(&cfg, &train).unwrap();
    let mfmp_before = state.store.fingerprint("mfmp");
    let branch_before = state.store.fingerprint("rgb");
    let (b, f) = state.next_batch(&train).unwrap();
    let l = train_step(&mut state, &b, &f).unwrap();
    assert_eq!((l.l_f, l.l_ic), (0.0, 0.0));
    assert!((l.l_all - (l.l_id + l.l_tri)).abs() < 1e-12);
    assert_eq!(state.store.fingerprint("mfmp"), mfmp_before);
    assert_ne!(state.store.fingerprint("rgb"), branch_before);
}

#[test]
fn disabled_components_are_not_updated() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 4, 4);
    let train = train_split(dir.path(), &config());
    let full = Ablation::FULL;
    let cases = [
        (Ablation { use_fmi: false, ..full }, "mfmp.fmi", true),
        (Ablation { use_fmi: false, ..full }, "mfmp.rgb", false),
        (Ablation::BASELINE, "mfmp", true),
        (full, "mfmp.fmi", false),
    ];
    for (ablation, prefix, frozen) in cases {
        let cfg = TrainConfig { ablation, ..config() };
        let mut state = TrainState::new(&cfg, &train).unwrap();
        let before = state.store.fingerprint(prefix);
        steps(&mut state, &train, 2);
        assert_eq!(state.store.fingerprint(prefix) == before, frozen, "{ablation:?} {prefix}");
    }
}

#[test]
fn training_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 4, 4);
    let cfg = config();
    let train = train_split(dir.path(), &cfg);
    let mut a = TrainState::new(&cfg, &train).unwrap();
    let mut b = TrainState::new(&cfg, &train).unwrap();
    assert_eq!(steps(&mut a, &train, 3), steps(&mut b, &train, 3));
    assert_eq!(a.store.fingerprint(""), b.store.fingerprint(""));
    let other = TrainState::new(&TrainConfig { seed: 1, ..cfg }, &train).unwrap();
    assert_ne!(other.store.fingerprint(""), a.store.fingerprint(""));
}

#[test]
fn tiny_set_overfits() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 4, 4);
    let cfg = config();
    let train = train_split(dir.path(), &cfg);
    let mut state = TrainState::new(&cfg, &train).unwrap();
    let losses = steps(&mut state, &train, 200);
    assert!(losses[199] < losses[0], "{} -> {}", losses[0], losses[199]);
}

#[test]
fn resume_reproduces_the_next_step() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 4, 4);
    let cfg = config();
    let train = train_split(dir.path(), &cfg);
    let mut state = TrainState::new(&cfg, &train).unwrap();
    steps(&mut state, &train, 3);
    let bytes = state.checkpoint().to_bytes().unwrap();
    let mut resumed = TrainState::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let next = steps(&mut state, &train, 2);
    assert_eq!(steps(&mut resumed, &train, 2), next);
    assert_eq!(resumed.store.fingerprint(""), state.store.fingerprint(""));
}

#[test]
fn checkpoint_rejects_a_different_architecture() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 4, 4);
    let cfg = config();
    let train = train_split(dir.path(), &cfg);
    let mut ckpt = TrainState::new(&cfg, &train).unwrap().checkpoint();
    ckpt.config_text = TrainConfig {
        embedding_dim: 8,
        ..cfg
    }
    .to_kv_string();
    assert!(TrainState::from_checkpoint(ckpt).is_err());
}

#[test]
fn run_writes_artifacts_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    dataset(&root, 8, 4);
    let out = dir.path().join("run");
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: 2,
        ..config()
    };
    let mut seen = 0;
    let first = trainer::run(&cfg, &root, &out, None, &mut |_| seen += 1).unwrap();
    assert_eq!(seen, 3);
    for f in [trainer::CHECKPOINT_FILE, trainer::LOSS_FILE, trainer::HISTORY_FILE, trainer::METRICS_FILE, trainer::RANKING_FILE] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join(trainer::METRICS_FILE)).unwrap()).unwrap();
    assert!((m["mAP"].as_f64().unwrap() - first.final_metrics.map).abs() < 1e-12);
    // four held-out identities seen by two cameras
    assert_eq!(first.final_metrics.queries + first.final_metrics.dropped_queries, 8);

    // resuming a finished run trains nothing
    let ckpt = out.join(trainer::CHECKPOINT_FILE);
    let again = trainer::run(&cfg, &root, &out, Some(&ckpt), &mut |_| {}).unwrap();
    assert!(again.losses.is_empty());

    let mut c = Checkpoint::load(&ckpt).unwrap();
    c.config_text = TrainConfig { epochs: 2, ..cfg.clone() }.to_kv_string();
    c.save(&ckpt).unwrap();
    let more = trainer::run(&cfg, &root, &out, Some(&ckpt), &mut |_| {}).unwrap();
    assert_eq!((more.losses.len(), more.state.global_step, more.state.epoch), (2, 4, 2));
    let log = std::fs::read_to_string(out.join(trainer::LOSS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1 + 4);
}

#[test]
fn ablation_matrix_yields_comparable_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    dataset(&root, 8, 4);
    let full = Ablation::FULL;
    let rows = [
        Ablation::BASELINE,
        Ablation {
            use_fce: false,
            use_ic: false,
            ..full
        },
        Ablation { use_ic: false, ..full },
        full,
    ];
    for (i, ablation) in rows.into_iter().enumerate() {
        let cfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: 1,
            ablation,
            ..config()
        };
        let out = trainer::run(&cfg, &root, &dir.path().join(format!("run{i}")), None, &mut |_| {}).unwrap();
        let m = out.final_metrics;
        assert_eq!(m.queries, 8);
        assert!((0.0..=1.0).contains(&m.map) && m.r1 <= m.r5 && m.r5 <= m.r10);
    }
}
