use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
seed = 3
synth.num_sequences = 2
synth.sequence.length = 10
synth.sequence.width = 64
synth.sequence.height = 64
synth.sequence.target_min = 12
synth.sequence.target_max = 16
train.clip_length = 3
train.batch_size = 1
train.iterations_per_epoch = 2
train.epochs = 1
train.size_candidates = 2
train.filter_iters = 2
train.model.backbone.channels = 3,4,8
train.model.backbone.strides = 2,2
train.model.predictor.channels = 8
train.model.predictor.hidden = 4
train.model.iou_head.channels = 8
train.model.iou_head.k = 2
train.model.discriminator.feature_channels = 8
train.model.discriminator.widths = 8,8,8
train.model.discriminator.strides = 2,1,1
train.model.crop.patch_size = 32
train.model.crop.context_factor = 4
track.refine_steps = 1
track.refine_candidates = 2
track.refine_top = 1
";

fn occtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occtrack"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn synth_is_deterministic_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = occtrack(&["synth", "--config", s(&cfg), "--seed", "7", "--out", s(d)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert!(ta.len() > 2);
    assert_eq!(ta, tb);
    let resolved = fs::read_to_string(a.join("config.resolved")).unwrap();
    assert!(resolved.contains("seed = 7"));
    assert!(resolved.contains("train.learning_rate = "));
}

#[test]
fn unknown_key_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "trian.epochs = 3\n").unwrap();
    let o = occtrack(&["synth", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("trian.epochs") && err.contains("train.epochs"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn missing_out_is_a_usage_error() {
    let o = occtrack(&["synth"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = occtrack(&[
        "track",
        "--checkpoint",
        s(&tmp.path().join("nope")),
        "--sequences",
        s(tmp.path()),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn malformed_sequence_dir_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    fs::create_dir_all(&seq).unwrap();
    fs::write(seq.join("groundtruth.txt"), "1,2,3,4\n").unwrap();
    let o = occtrack(&["train", "--data", s(tmp.path()), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_train_track_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    let ck = tmp.path().join("ck");
    let tr = tmp.path().join("tr");
    let ev = tmp.path().join("ev");
    let run = |args: &[&str]| {
        let o = occtrack(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ck)]);
    assert!(ck.join("final").join("manifest.json").is_file());
    assert_eq!(fs::read_to_string(ck.join("train_log.csv")).unwrap().lines().count(), 3);
    run(&[
        "track",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ck.join("final")),
        "--sequences",
        s(&data),
        "--out",
        s(&tr),
        "--jobs",
        "2",
    ]);
    let names: Vec<String> = fs::read_dir(tr.join("tracks"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 2);
    for n in &names {
        let rows = fs::read_to_string(tr.join("tracks").join(n)).unwrap();
        assert_eq!(rows.lines().count(), 1 + 10);
    }
    run(&["eval", "--tracks", s(&tr), "--sequences", s(&data), "--out", s(&ev)]);
    let summary = fs::read_to_string(ev.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), "sequence,auc,precision20,failures,occl_mean_iou,recovery_iou");
    assert_eq!(summary.lines().count(), 3);
    for d in [&data, &ck, &tr, &ev] {
        assert!(d.join("config.resolved").is_file());
    }
}

#[test]
fn track_single_sequence_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    let ck = tmp.path().join("ck");
    for args in [
        vec!["synth", "--config", s(&cfg), "--out", s(&data)],
        vec!["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ck)],
    ] {
        assert!(occtrack(&args).status.success());
    }
    let one = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .unwrap();
    let out = tmp.path().join("one");
    let o = occtrack(&["track", "--checkpoint", s(&ck.join("final")), "--sequences", s(&one), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(out.join("tracks")).unwrap().count(), 1);
}
