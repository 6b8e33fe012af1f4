use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prema::checkpoint::{load_encoder, load_model, read_entries};
use prema::config::RunConfig;
use prema::params::Parameterized;
use prema::optim::StepSchedule;
use prema::train::{init_encoder, init_prema};
use sha2::{Digest, Sha256};

const TINY: &str = "\
class_count = 2
shapes_per_class = 4
image_size = 16
channels = 4,8
middle_tap = 0
feature_dim = 8
d_h1 = 4
d_k = 4
d_h2 = 4
stage1_epochs = 2
stage1_anneal_epoch = 1
stage2_epochs = 2
stage2_anneal_epoch = 1
batch1 = 8
batch2 = 2
";

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new(extra: &str) -> Run {
        let dir = tempfile::tempdir().unwrap();
        let paths = format!(
            "dataset_dir = {}\nout_dir = {}",
            dir.path().join("data").display(),
            dir.path().join("out").display()
        );
        let mut keys: Vec<(String, String)> = Vec::new();
        for line in TINY.lines().chain(extra.lines()).chain(paths.lines()) {
            let Some((k, v)) = line.split_once('=') else { continue };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            match keys.iter_mut().find(|e| e.0 == k) {
                Some(e) => e.1 = v,
                None => keys.push((k, v)),
            }
        }
        let text: String = keys.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        fs::write(dir.path().join("run.cfg"), text).unwrap();
        Run { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn prema(&self, args: &[&str]) -> Output {
        let cfg = self.path("run.cfg");
        let mut all = vec![args[0], "--config", cfg.to_str().unwrap()];
        all.extend_from_slice(&args[1..]);
        Command::new(env!("CARGO_BIN_EXE_prema"))
            .args(&all)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.prema(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn config(&self) -> RunConfig {
        RunConfig::from_file(&self.path("run.cfg")).unwrap()
    }
}

fn tree_hash(root: &Path) -> String {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut h = Sha256::new();
    for (name, bytes) in &files {
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    format!("{:x}", h.finalize())
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn generate_writes_the_manifest_and_is_deterministic() {
    let run = Run::new("");
    let stdout = run.ok(&["generate"]);
    let manifest = run.path("data/manifest.jsonl");
    assert_eq!(stdout.trim(), manifest.display().to_string());
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().count(), 2 * 4);
    let first = tree_hash(&run.path("data"));
    fs::remove_dir_all(run.path("data")).unwrap();
    run.ok(&["generate"]);
    assert_eq!(tree_hash(&run.path("data")), first);

    let other = run.path("elsewhere");
    run.ok(&["generate", "--out", other.to_str().unwrap(), "--seed", "9"]);
    assert!(other.join("manifest.jsonl").exists());
    assert_ne!(tree_hash(&other), first);
}

#[test]
fn validation_and_io_failures_have_distinct_codes() {
    let run = Run::new("class_count = 1");
    let out = run.prema(&["generate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("class"));

    let run = Run::new("");
    let out = run.prema(&["train"]);
    assert_eq!(out.status.code(), Some(2), "missing manifest");

    let out = run.prema(&["generate", "--variant", "Transformer"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run.prema(&["generate", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));

    fs::write(run.path("bad.cfg"), "unknown_key = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_prema"))
        .args(["generate", "--config", run.path("bad.cfg").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    let help = Command::new(env!("CARGO_BIN_EXE_prema")).arg("--help").output().unwrap();
    assert!(help.status.success());
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["generate", "train", "evaluate", "ablate", "robust"] {
        assert!(text.contains(cmd));
    }
}

#[test]
fn zero_epoch_training_keeps_the_initialization() {
    let run = Run::new("stage1_epochs = 0\nstage2_epochs = 0");
    run.ok(&["generate"]);
    run.ok(&["train"]);
    let cfg = run.config();
    let model = cfg.model_config();
    let enc0 = init_encoder(&model, cfg.seed).unwrap();
    let init = init_prema(&model, enc0.clone(), cfg.seed).unwrap();
    let enc = load_encoder(&run.path("out/stage1.prma")).unwrap();
    let got = load_model(&run.path("out/stage2.prma")).unwrap();
    for ((n, a), (_, b)) in enc.named_params().iter().zip(enc0.named_params()) {
        assert!(a.bit_eq(b), "stage-1 {n}");
    }
    for ((n, a), (_, b)) in got.named_params().iter().zip(init.named_params()) {
        assert!(a.bit_eq(b), "stage-2 {n}");
    }
    let log = fs::read_to_string(run.path("out/train_log.csv")).unwrap();
    assert_eq!(log, "stage,epoch,lr,mean_loss\n");
}

#[test]
fn training_log_follows_the_schedule_and_stage_two_moves_the_encoder() {
    let run = Run::new("stage1_epochs = 3\nstage1_anneal_epoch = 2\nstage2_epochs = 3\nstage2_anneal_epoch = 2");
    run.ok(&["generate"]);
    run.ok(&["train"]);
    let (header, rows) = csv_rows(&run.path("out/train_log.csv"));
    assert_eq!(header, ["stage", "epoch", "lr", "mean_loss"]);
    assert_eq!(rows.len(), 6);
    let cfg = run.config().train_config();
    for row in &rows {
        let (stage, epoch): (u8, usize) = (row[0].parse().unwrap(), row[1].parse().unwrap());
        let sched: &StepSchedule = if stage == 1 { &cfg.stage1 } else { &cfg.stage2 };
        assert_eq!(row[2].parse::<f64>().unwrap(), sched.lr(epoch));
        assert!(row[3].parse::<f64>().unwrap().is_finite());
    }
    let s1 = read_entries(&run.path("out/stage1.prma")).unwrap();
    let s2 = read_entries(&run.path("out/stage2.prma")).unwrap();
    let enc_of = |entries: &[prema::checkpoint::Entry]| -> Vec<(String, Vec<f64>)> {
        entries
            .iter()
            .filter(|e| e.name.starts_with("encoder."))
            .map(|e| (e.name.clone(), e.tensor.data().to_vec()))
            .collect()
    };
    let (a, b) = (enc_of(&s1), enc_of(&s2));
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).any(|(x, y)| x.0 == y.0 && x.1 != y.1));
}

#[test]
fn memorized_toy_model_scores_perfectly_on_its_training_split() {
    let run = Run::new(
        "shapes_per_class = 8\nimage_size = 32\nchannels = 8,16\ntrain_fraction = 0.5\n\
         stage1_epochs = 100\nstage1_anneal_epoch = 80\nstage2_epochs = 100\nstage2_lr = 0.01\n\
         stage2_anneal_epoch = 80\neval_split = train\nexport_confidence = true",
    );
    run.ok(&["generate"]);
    run.ok(&["train"]);
    run.ok(&["evaluate"]);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.path("out/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["accuracy_per_instance"], 1.0, "{metrics}");
    assert_eq!(metrics["accuracy_per_class"], 1.0);
    for key in ["mAP", "auc_pr", "ndcg", "f1_at_k"] {
        let v = metrics[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }

    let (header, rows) = csv_rows(&run.path("out/per_query.csv"));
    assert_eq!(header, ["query", "ap", "auc_pr", "ndcg", "f1_at_k"]);
    assert_eq!(rows.len(), 8);
    let (header, rows) = csv_rows(&run.path("out/metrics_pr_curve.csv"));
    assert_eq!(header, ["recall", "precision"]);
    assert!(!rows.is_empty());

    let (header, rows) = csv_rows(&run.path("out/confidence_maps.csv"));
    let n = run.config().model_config().encoder.middle_dims();
    assert_eq!(header.len(), 2 + n.1 * n.2);
    assert_eq!(rows.len(), 8 * 12);
    for row in rows {
        let total: f64 = row[2..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() <= 1e-9, "{total}");
    }
    let loc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.path("out/localization.json")).unwrap()).unwrap();
    assert!(loc["shapes"].as_array().unwrap().len() <= 8);
}

#[test]
fn robust_sweeps_have_the_declared_rows() {
    let run = Run::new("");
    run.ok(&["generate"]);
    run.ok(&["train"]);
    run.ok(&["robust"]);
    let header = [
        "setting",
        "mAP",
        "auc_pr",
        "ndcg",
        "f1_at_k",
        "accuracy_per_instance",
        "accuracy_per_class",
    ];
    for (name, n) in [("missing", 5), ("occlusion", 4), ("clutter", 2)] {
        let (h, rows) = csv_rows(&run.path(&format!("out/robust_{name}.csv")));
        assert_eq!(h, header);
        assert_eq!(rows.len(), n, "{name}");
        for r in &rows {
            let pr = run.path(&format!("out/pr_{name}_{}.csv", r[0]));
            assert_eq!(csv_rows(&pr).0, ["recall", "precision"]);
        }
    }
    let (_, rows) = csv_rows(&run.path("out/robust_missing.csv"));
    let settings: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(settings, ["0", "2", "4", "6", "8"]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.path("out/robust_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["occlusion_map"].as_array().unwrap().len(), 4);
}

#[test]
fn corrupted_checkpoint_is_rejected_by_name() {
    let run = Run::new("");
    run.ok(&["generate"]);
    run.ok(&["train"]);
    let ckpt = run.path("out/stage2.prma");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    let bad = run.path("bad.prma");
    fs::write(&bad, bytes).unwrap();
    let out = run.prema(&["evaluate", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.prma"));
}

#[test]
fn commands_are_deterministic() {
    let hashes: Vec<(String, String)> = (0..2)
        .map(|_| {
            let run = Run::new("missing_views = 3\nexport_confidence = true");
            run.ok(&["generate"]);
            run.ok(&["train"]);
            run.ok(&["evaluate"]);
            run.ok(&["ablate", "--out", run.path("abl").to_str().unwrap()]);
            fs::remove_file(run.path("out/resolved_config.txt")).unwrap();
            fs::remove_file(run.path("abl/resolved_config.txt")).unwrap();
            (tree_hash(&run.path("out")), tree_hash(&run.path("abl")))
        })
        .collect();
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn ablation_covers_every_variant() {
    let run = Run::new("");
    run.ok(&["generate"]);
    let stdout = run.ok(&["ablate"]);
    let (header, rows) = csv_rows(&run.path("out/ablation.csv"));
    assert_eq!(header[..2], ["setting", "mAP"]);
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["PREMA", "DoubleLSTMs", "MaxPoolOnly", "SingleDirectionPREMA"]);
    assert_eq!(stdout.lines().count(), 4);
    let resolved = fs::read_to_string(run.path("out/resolved_config.txt")).unwrap();
    assert!(resolved.contains("class_count = 2"));
}
