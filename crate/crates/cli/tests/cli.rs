//! End-to-end tests of the `keynet` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use keynet::checkpoint::Checkpoint;
use keynet::model::{Network, NetworkConfig};
use keynet::train::TrainConfig;

fn keynet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keynet")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
batch_size = 2
crop_size = 32
steps_per_epoch = 2
max_steps = 3
validation_fraction = 0.0

[network]
stages = [[4], [4], [8], [8]]
head_channels = 8
descriptor_dim = 8

[homography]
max_shift_px = 2.0
max_perspective_px = 8.0

[extraction]
train_window_src = 16
train_window_warp = 8
"#;

fn corpus(dir: &Path, n: u64) -> PathBuf {
    let c = dir.join("corpus");
    std::fs::create_dir_all(&c).unwrap();
    for k in 0..n {
        keynet::io::save_image(&c.join(format!("img{k}.png")), &keynet::synthetic::scene(k, 40, 40)).unwrap();
    }
    c
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn train_tiny(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let c = corpus(dir, 4);
    let cfg = tiny_config(dir);
    let out = dir.join(name);
    let o = keynet(&["train", "--config", s(&cfg), "--corpus", s(&c), "--out", s(&out), "--seed", seed]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn missing_corpus_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = keynet(&["train", "--corpus", s(&dir.path().join("nope")), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 2);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "learning_rate = 0.001\n[loss]\nlambda_heatmap = 3.0\n").unwrap();
    let o = keynet(&["train", "--config", s(&cfg), "--corpus", s(&c), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambda_heatmap"), "{}", stderr(&o));

    std::fs::write(&cfg, "learning_rate = -1.0\n").unwrap();
    let o = keynet(&["train", "--config", s(&cfg), "--corpus", s(&c), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn seeded_runs_are_identical_and_config_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_tiny(dir.path(), "a", "7");
    let b = train_tiny(dir.path(), "b", "7");
    let ma = std::fs::read(a.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 3);

    let snapshot = std::fs::read_to_string(a.join("config.toml")).unwrap();
    let cfg = TrainConfig::from_toml_str(&snapshot).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.loss.weights.heatmap, 2000.0);
    assert_eq!(cfg.learning_rate, 0.0005);
    assert!(snapshot.contains("heatmap = 2000.0"));
    for f in ["last.ckpt", "epoch_001.ckpt"] {
        assert!(a.join(f).is_file(), "{f}");
    }
}

#[test]
fn help_lists_every_config_key() {
    let o = keynet(&["train", "--help"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for (key, value) in TrainConfig::default_keys() {
        assert!(text.contains(&format!("{key} = {value}")), "missing {key}");
    }
}

fn save_network(path: &Path, net: Network) {
    Checkpoint::new(net).save(path).unwrap();
}

fn tiny_network() -> NetworkConfig {
    NetworkConfig { stages: vec![vec![4], vec![4], vec![8], vec![8]], head_channels: 8, descriptor_dim: 8, leaky_slope: 0.01 }
}

#[test]
fn uniform_network_extracts_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 2);
    let ck = dir.path().join("zero.ckpt");
    save_network(&ck, Network::zeros(tiny_network()).unwrap());
    let out = dir.path().join("kpt");
    let pattern = format!("{}/*.png", s(&c));
    let o = keynet(&["extract", "--checkpoint", s(&ck), "--images", &pattern, "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for k in 0..2 {
        let f = keynet::io::read_keypoints(&out.join(format!("img{k}.kpt"))).unwrap();
        assert!(f.points.is_empty());
    }
}

#[test]
fn extracted_rows_match_suppression_survivors() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), "run", "1");
    let ck = run.join("last.ckpt");
    let out = dir.path().join("kpt");
    let pattern = format!("{}/*.png", s(&dir.path().join("corpus")));
    let o = keynet(&["extract", "--checkpoint", s(&ck), "--images", &pattern, "--out", s(&out), "--threshold", "0.0155"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let net = Checkpoint::load(&ck).unwrap().network;
    let cfg = keynet::keypoints::ExtractionConfig { inference_threshold: 0.0155, ..Default::default() };
    let mut total = 0;
    for k in 0..4 {
        let img = keynet::io::load_image(&dir.path().join(format!("corpus/img{k}.png"))).unwrap();
        let heatmap = keynet::model::heatmap_from_logits(&net.forward(&img).unwrap().logits);
        let survivors = keynet::keypoints::extract_inference(&heatmap, &cfg).len();
        let text = std::fs::read_to_string(out.join(format!("img{k}.kpt"))).unwrap();
        let rows = text.lines().filter(|l| !l.starts_with("KPT1") && !l.trim().is_empty()).count();
        assert_eq!(rows, survivors);
        let parsed = keynet::io::parse_keypoints(&text).unwrap();
        assert_eq!(parsed.points.len(), survivors);
        assert_eq!(parsed.descriptors.map(|d| d.dim), Some(8));
        total += survivors;
    }
    assert!(total > 0);
}

fn self_manifest(dir: &Path) -> PathBuf {
    let m = dir.join("pairs.txt");
    std::fs::write(&m, "corpus/img0.png corpus/img0.png identity - light\ncorpus/img1.png corpus/img1.png identity - view\n").unwrap();
    m
}

#[test]
fn eval_self_pairs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), "run", "2");
    let manifest = self_manifest(dir.path());
    let ck = run.join("last.ckpt");
    let eval = |out: &str| {
        let o = keynet(&[
            "eval", "--manifest", s(&manifest), "--checkpoint", s(&ck), "--threshold-px", "3", "--threshold-px", "5",
            "--theta-keypoint", "0.0155", "--out", s(&dir.path().join(out)),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    eval("e1");
    eval("e2");
    let e1 = dir.path().join("e1");
    for f in ["report.json", "report.txt", "report_3px.json", "report_5px.json"] {
        assert!(e1.join(f).is_file(), "{f}");
        assert_eq!(std::fs::read(e1.join(f)).unwrap(), std::fs::read(dir.path().join("e2").join(f)).unwrap(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(e1.join("report.json")).unwrap()).unwrap();
    for summary in report["summaries"].as_array().unwrap() {
        assert_eq!(summary["overall"]["repeatability"], 1.0);
        assert_eq!(summary["overall"]["n_pairs"], 2);
    }
    assert_eq!(report["config"]["theta_desc"], 0.8);
    assert_eq!(report["config"]["coverage_radius_px"], 25.0);
}

#[test]
fn eval_from_feature_files_and_match() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), "run", "3");
    let kpt = dir.path().join("kpt");
    let pattern = format!("{}/*.png", s(&dir.path().join("corpus")));
    let o = keynet(&["extract", "--checkpoint", s(&run.join("last.ckpt")), "--images", &pattern, "--out", s(&kpt), "--threshold", "0.0155"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = self_manifest(dir.path());
    let o = keynet(&["eval", "--manifest", s(&manifest), "--features", s(&kpt), "--coverage-radius", "20", "--out", s(&dir.path().join("ev"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["coverage_radius_px"], 20.0);
    assert_eq!(report["summaries"].as_array().unwrap().len(), 2);

    let matches = dir.path().join("m.txt");
    let o = keynet(&["match", "--a", s(&kpt.join("img0.kpt")), "--b", s(&kpt.join("img0.kpt")), "--out", s(&matches)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let parsed = keynet::io::parse_matches(&std::fs::read_to_string(&matches).unwrap()).unwrap();
    assert!(parsed.iter().all(|m| m.i == m.j && m.accepted));
}

#[test]
fn eval_with_missing_manifest_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = keynet(&["eval", "--manifest", s(&dir.path().join("none.txt")), "--features", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inspect_checkpoint_reports_network() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("net.ckpt");
    save_network(&ck, Network::zeros(tiny_network()).unwrap());
    let o = keynet(&["inspect-checkpoint", s(&ck)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let info: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(info["parameters"], Network::zeros(tiny_network()).unwrap().param_count());
    assert_eq!(info["network"]["descriptor_dim"], 8);
}
