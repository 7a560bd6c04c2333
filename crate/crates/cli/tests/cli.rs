use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcnfis::fuzzy::parse_rules;
use dcnfis::{Checkpoint, Dcnfis, TrainConfig};
use tempfile::TempDir;

const SIDE: usize = 8;
const CLASSES: usize = 3;

fn dcnfis() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dcnfis"));
    cmd.env_remove("DCNFIS_DATA_DIR").env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    dcnfis().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status.code(), stdout(o), stderr(o));
}

fn idx(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend((*d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Class `k` lights up a horizontal band of rows; a fixed ripple adds
/// variation between samples.
fn write_split(dir: &Path, prefix: &str, n: usize, offset: usize) {
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let k = s % CLASSES;
        labels.push(k as u8);
        for p in 0..SIDE * SIDE {
            let band = (p / SIDE) * CLASSES / SIDE == k;
            let ripple = ((s + offset) * 37 + p * 11) % 60;
            pixels.push(if band { 180 + ripple as u8 } else { ripple as u8 });
        }
    }
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), idx(0x803, &[n, SIDE, SIDE], &pixels)).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx(0x801, &[n], &labels)).unwrap();
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("data")).unwrap();
        write_split(&dir.path().join("data"), "train", 60, 0);
        write_split(&dir.path().join("data"), "t10k", 30, 1000);
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn config(&self, epochs: u32) -> String {
        let text = format!(
            "epochs = {epochs}\nbatch_size = 10\nseed = 4\nschedule = 1:0.01\n\
             backbone = 1x{SIDE}x{SIDE}: conv(4,3,1,0) > relu > maxpool(2,2) > flatten\n"
        );
        let path = self.path(&format!("e{epochs}.cfg"));
        std::fs::write(&path, text).unwrap();
        path.to_str().unwrap().to_string()
    }

    fn train(&self, epochs: u32, out: &str) -> Output {
        run(&["train", "--config", &self.config(epochs), "--data", &self.s("data"), "--out", &self.s(out)])
    }

    fn trained(&self) -> String {
        let ckpt = self.s("model.ckpt");
        if !Path::new(&ckpt).exists() {
            assert_ok(&self.train(3, "model.ckpt"));
        }
        ckpt
    }
}

#[test]
fn missing_data_dir_is_a_data_error() {
    let f = Fixture::new();
    let o = run(&["train", "--config", &f.config(1), "--data", &f.s("absent"), "--out", &f.s("m.ckpt")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("[data]"), "{}", stderr(&o));
    let o = run(&["train", "--config", &f.config(1), "--out", &f.s("m.ckpt")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_dir_falls_back_to_environment() {
    let f = Fixture::new();
    let o = dcnfis()
        .env("DCNFIS_DATA_DIR", f.path("data"))
        .args(["mean-image", "--out", &f.s("mean.pgm")])
        .output()
        .unwrap();
    assert_ok(&o);
}

#[test]
fn config_and_usage_errors_exit_3() {
    let f = Fixture::new();
    let bad = f.path("bad.cfg");
    std::fs::write(&bad, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let o = run(&["train", "--config", bad.to_str().unwrap(), "--data", &f.s("data"), "--out", &f.s("m.ckpt")]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let ckpt = f.trained();
    assert_eq!(run(&["rules", "--ckpt", &ckpt, "--out", ""]).status.code(), Some(3));
    assert_eq!(run(&["explain", "--ckpt", &ckpt, "--data", &f.s("data"), "--out", &f.s("x")]).status.code(), Some(3));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(3));
    let o = run(&["explain", "--ckpt", &ckpt, "--data", &f.s("data"), "--out", &f.s("x"), "--sample", "60"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn zero_epochs_writes_initialization() {
    let f = Fixture::new();
    assert_ok(&f.train(0, "init.ckpt"));
    let ck = Checkpoint::load(&f.path("init.ckpt")).unwrap();
    let cfg = TrainConfig::load(Path::new(&f.config(0))).unwrap();
    assert_eq!(ck.epoch, 0);
    assert_eq!(ck.model, Dcnfis::new(cfg.backbone, CLASSES, cfg.seed).unwrap());
    let metrics = std::fs::read_to_string(f.path("init.ckpt.metrics.csv")).unwrap();
    assert_eq!(metrics, "epoch,lr,train_loss,train_acc,test_loss,test_acc\n");
}

#[test]
fn training_is_deterministic() {
    let f = Fixture::new();
    let a = f.train(2, "a.ckpt");
    let b = f.train(2, "b.ckpt");
    assert_ok(&a);
    assert_ok(&b);
    assert!(stdout(&a).contains("final test accuracy"));
    assert_eq!(stdout(&a), stdout(&b));
    let read = |p: &str| std::fs::read(f.path(p)).unwrap();
    assert_eq!(read("a.ckpt.metrics.csv"), read("b.ckpt.metrics.csv"));
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    assert_eq!(String::from_utf8(read("a.ckpt.metrics.csv")).unwrap().lines().count(), 3);
}

#[test]
fn eval_is_repeatable_and_consistent() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let args = ["eval", "--ckpt", &ckpt, "--data", &f.s("data"), "--split", "test"];
    let (a, b) = (run(&args), run(&args));
    assert_ok(&a);
    assert_eq!(stdout(&a), stdout(&b));
    let csv = std::fs::read_to_string(format!("{ckpt}.test.confusion.csv")).unwrap();
    let rows: Vec<Vec<u64>> = csv.lines().skip(1).map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), CLASSES);
    let total: u64 = rows.iter().flatten().sum();
    let trace: u64 = (0..CLASSES).map(|i| rows[i][i]).sum();
    assert_eq!(total, 30);
    let printed = stdout(&a).lines().find_map(|l| l.strip_prefix("accuracy ")).unwrap().to_string();
    assert_eq!(printed, format!("{:.4}", trace as f64 / total as f64));
}

#[test]
fn rules_parse_back_to_checkpoint() {
    let f = Fixture::new();
    let ckpt = f.trained();
    assert_ok(&run(&["rules", "--ckpt", &ckpt, "--out", &f.s("rules.txt")]));
    let rules = parse_rules(&std::fs::read_to_string(f.path("rules.txt")).unwrap()).unwrap();
    let head = Checkpoint::load(Path::new(&ckpt)).unwrap().model.head;
    assert_eq!(rules.len(), CLASSES);
    let v = head.n_features();
    for r in &rules {
        assert_eq!(r.mu.len(), v);
        for j in 0..v {
            let (mu, beta) = (head.mu[r.rule * v + j] as f64, head.beta[r.rule * v + j] as f64);
            assert!((r.mu[j] - mu).abs() <= 5e-9 * mu.abs());
            assert!((r.beta[j] - beta).abs() <= 5e-9 * beta.abs());
        }
    }
}

#[test]
fn export_and_mean_image() {
    let f = Fixture::new();
    let ckpt = f.trained();
    assert_ok(&run(&["export-features", "--ckpt", &ckpt, "--data", &f.s("data"), "--out", &f.s("f.csv")]));
    let csv = std::fs::read_to_string(f.path("f.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);
    assert!(csv.starts_with("sample_id,label,predicted_rule,f_1,"));

    let args = ["mean-image", "--data", &f.s("data"), "--out", &f.s("mean.pgm")];
    assert_ok(&run(&args));
    let first = std::fs::read(f.path("mean.pgm")).unwrap();
    assert!(first.starts_with(format!("P5\n{SIDE} {SIDE}\n255\n").as_bytes()));
    assert_eq!(std::fs::metadata(f.path("mean.f32")).unwrap().len(), (SIDE * SIDE * 4) as u64);
    assert_ok(&run(&args));
    assert_eq!(std::fs::read(f.path("mean.pgm")).unwrap(), first);
}

#[test]
fn explain_writes_medoids_and_comparison_rows() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let data = f.s("data");
    let out = f.s("explain");
    assert_ok(&run(&["explain", "--ckpt", &ckpt, "--data", &data, "--out", &out, "--medoids"]));
    let report = dcnfis::explain::MedoidReport::from_json(&std::fs::read_to_string(f.path("explain/medoids.json")).unwrap()).unwrap();
    assert_eq!(report.rules.len(), CLASSES);
    let with_medoid = report.rules.iter().filter(|r| r.medoid.is_some()).count();
    let count = |suffix: &str| {
        std::fs::read_dir(f.path("explain")).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix)).count()
    };
    assert_eq!(count("_medoid.pgm"), with_medoid);
    assert_eq!(count("_saliency.pgm"), with_medoid);

    // Find a correctly classified sample: its label and predicted medoid
    // columns must coincide.
    let ck = Checkpoint::load(Path::new(&ckpt)).unwrap();
    let ds = dcnfis::Dataset::load_dir(&f.path("data")).unwrap();
    let ev = dcnfis::trainer::evaluate(&ck.model, &ds.train).unwrap();
    let id = (0..60).find(|&i| ev.predictions[i] == ds.train.labels[i] as usize).unwrap();
    let o = run(&["explain", "--ckpt", &ckpt, "--data", &data, "--out", &out, "--sample", &id.to_string()]);
    assert_ok(&o);
    let raw = std::fs::read(f.path(&format!("explain/sample_{id}.f32"))).unwrap();
    let panel = SIDE * SIDE * 4;
    assert_eq!(raw.len(), 6 * panel);
    assert_eq!(raw[2 * panel..3 * panel], raw[4 * panel..5 * panel]);
    let pgm = std::fs::read(f.path(&format!("explain/sample_{id}.pgm"))).unwrap();
    assert!(pgm.starts_with(format!("P5\n{} {SIDE}\n", 6 * SIDE + 5 * dcnfis::explain::ROW_GAP).as_bytes()));

    assert_ok(&run(&["explain", "--ckpt", &ckpt, "--data", &data, "--out", &out, "--misclassified", "4"]));
    let index = std::fs::read_to_string(f.path("explain/misclassified.csv")).unwrap();
    let wrong = (0..60).filter(|&i| ev.predictions[i] != ds.train.labels[i] as usize).count();
    assert_eq!(index.lines().count() - 1, wrong.min(4));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let bytes = std::fs::read(&ckpt).unwrap();
    let cut = f.path("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = run(&["eval", "--ckpt", cut.to_str().unwrap(), "--data", &f.s("data")]);
    assert_eq!(o.status.code(), Some(2));
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    std::fs::write(&cut, &wrong_version).unwrap();
    let o = run(&["eval", "--ckpt", cut.to_str().unwrap(), "--data", &f.s("data")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("version"), "{}", stderr(&o));
}
