use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::Device;
use weather_gan::checkpoint::Container;
use weather_gan::metrics::MetricReport;
use weather_gan::toy;
use weather_gan::training::TrainConfig;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weather-gan"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Toy corpus plus a run file training `iterations` steps into `<dir>/<out>`.
fn setup(dir: &Path, iterations: u64, checkpoint_every: u64, out: &str) -> PathBuf {
    let data = dir.join("data");
    if !data.join("manifest.tsv").exists() {
        toy::write_corpus(&data, 6, 64, 1).unwrap();
    }
    let train = TrainConfig {
        total_iterations: iterations,
        decay_start: iterations / 2,
        checkpoint_every,
        ..TrainConfig::toy()
    };
    let train: toml::Value = toml::from_str(&train.to_toml().unwrap()).unwrap();
    let mut root = toml::Table::new();
    let table = |pairs: &[(&str, &str)]| {
        toml::Value::Table(pairs.iter().map(|(k, v)| (k.to_string(), toml::Value::from(*v))).collect())
    };
    root.insert("data".into(), table(&[("root", "data"), ("manifest", "data/manifest.tsv")]));
    root.insert("output".into(), table(&[("dir", out)]));
    root.insert("train".into(), train);
    let path = dir.join(format!("{out}.toml"));
    std::fs::write(&path, toml::to_string(&root).unwrap()).unwrap();
    path
}

fn tensors(path: &Path) -> Vec<(String, Vec<u64>)> {
    Container::load(path, &Device::Cpu)
        .unwrap()
        .tensors
        .into_iter()
        .map(|(k, t)| {
            let v = t.flatten_all().unwrap().to_dtype(candle_core::DType::F64).unwrap();
            let bits = v.to_vec1::<f64>().unwrap().into_iter().map(f64::to_bits).collect();
            (k, bits)
        })
        .collect()
}

fn rgb(path: &Path) -> image::RgbImage {
    image::open(path).unwrap().to_rgb8()
}

#[test]
fn help_succeeds_without_side_effects_and_unknown_flags_are_usage_errors() {
    let cwd = tempfile::tempdir().unwrap();
    for sub in ["prepare", "train", "translate", "evaluate", "ablate"] {
        let o = Command::new(env!("CARGO_BIN_EXE_weather-gan"))
            .args([sub, "--help"])
            .current_dir(cwd.path())
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{sub}");
        assert!(stdout(&o).contains("Usage"));
    }
    assert_eq!(std::fs::read_dir(cwd.path()).unwrap().count(), 0);
    assert_eq!(code(&cli(&["--help"])), 0);
    let o = cli(&["prepare", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--bogus"));
    assert_eq!(code(&cli(&[])), 1);
}

#[test]
fn prepare_counts_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("tree");
    for class in ["sunny", "snowy"] {
        std::fs::create_dir_all(root.join(class)).unwrap();
        for i in 0..3 {
            image::RgbImage::new(4, 4).save(root.join(class).join(format!("{i}.png"))).unwrap();
        }
    }
    let manifest = dir.path().join("m.tsv");
    let o = cli(&["prepare", "--root", s(&root), "--manifest-out", s(&manifest)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("sunny\t3") && stdout(&o).contains("snowy\t3"));
    let first = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(first.lines().count(), 7);
    assert!(first.starts_with("#cues:"));
    assert_eq!(code(&cli(&["prepare", "--root", s(&root), "--manifest-out", s(&manifest)])), 0);
    assert_eq!(std::fs::read_to_string(&manifest).unwrap(), first);

    let missing = cli(&["prepare", "--root", s(&dir.path().join("nope")), "--manifest-out", s(&manifest)]);
    assert_eq!(code(&missing), 2);
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&cli(&["prepare", "--root", s(&empty), "--manifest-out", s(&manifest)])), 2);
}

#[test]
fn train_logs_each_iteration_and_writes_final_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 10, 0, "run");
    let o = cli(&["train", "--config", s(&config)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let iter_lines: Vec<_> = stderr(&o).lines().filter(|l| l.contains(" iter ")).map(String::from).collect();
    assert_eq!(iter_lines.len(), 10, "{iter_lines:?}");
    assert!(iter_lines.iter().all(|l| l.contains("composition=full")));
    let final_path = dir.path().join("run/final.wgan");
    assert!(final_path.exists());
    assert_eq!(stdout(&o).trim(), s(&final_path));
    let log = std::fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
}

#[test]
fn resumed_training_matches_fresh_run() {
    let dir = tempfile::tempdir().unwrap();
    let fresh = setup(dir.path(), 10, 5, "fresh");
    assert_eq!(code(&cli(&["train", "--config", s(&fresh)])), 0);
    let resumed = setup(dir.path(), 10, 5, "resumed");
    let mid = dir.path().join("fresh/checkpoint_00000005.wgan");
    let o = cli(&["train", "--config", s(&resumed), "--resume", s(&mid)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let iter_lines = stderr(&o).lines().filter(|l| l.contains(" iter ")).count();
    assert_eq!(iter_lines, 5);
    let (a, b) = (dir.path().join("fresh/final.wgan"), dir.path().join("resumed/final.wgan"));
    assert_eq!(tensors(&a), tensors(&b));
}

#[test]
fn bad_configs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["train", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(code(&o), 1);
    let config = setup(dir.path(), 10, 0, "run");
    let text = std::fs::read_to_string(&config).unwrap().replace("[train]", "[train]\nlearning_rte = 0.1");
    std::fs::write(&config, text).unwrap();
    let o = cli(&["train", "--config", s(&config)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rte"), "{}", stderr(&o));
}

#[test]
fn translate_sweep_naming_identity_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 2, 0, "run");
    assert_eq!(code(&cli(&["train", "--config", s(&config)])), 0);
    let ckpt = dir.path().join("run/final.wgan");
    let input = dir.path().join("data/sunny/0000.png");
    let out = dir.path().join("out");
    let o = cli(&[
        "translate",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&input),
        "--alpha",
        "0,0.5,1",
        "--out",
        s(&out),
        "--dump-intermediates",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let sweep: Vec<_> = names.iter().filter(|n| n.starts_with("0000_a") && !n.contains("attention")).cloned().collect();
    assert_eq!(sweep, ["0000_a0.00.png", "0000_a0.50.png", "0000_a1.00.png"]);
    let n_s = weather_gan::dataset::CueVocabulary::default().len();
    assert_eq!(names.len() - sweep.len(), 4 + n_s, "{names:?}");
    assert!(names.contains(&"0000_seg_sky.png".to_string()));
    // the corpus is already at model resolution, so α = 0 reproduces the file
    assert_eq!(rgb(&out.join("0000_a0.00.png")), rgb(&input));
    assert_eq!(rgb(&out.join("0000_input.png")), rgb(&input));
    assert!(!names.iter().any(|n| n.contains(".tmp")));

    let bad = cli(&["translate", "--checkpoint", s(&ckpt), "--input", s(&input), "--alpha", "1.5", "--out", s(&out)]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn evaluate_reports_and_rejects_tiny_sets() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    toy::write_corpus(&data, 6, 32, 2).unwrap();
    std::fs::write(data.join("sunny/broken.png"), b"not an image").unwrap();
    let sunny = data.join("sunny");
    let report = dir.path().join("report.txt");
    let o = cli(&[
        "evaluate",
        "--real-dir",
        s(&sunny),
        "--fake-dir",
        s(&sunny),
        "--image-size",
        "32",
        "--kid-subsets",
        "5",
        "--report-out",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let printed = stdout(&o);
    assert_eq!(std::fs::read_to_string(&report).unwrap(), printed);
    assert!(stderr(&o).contains("broken.png"));
    let same: MetricReport = printed.parse().unwrap();
    assert!(same.fid.abs() < 1e-6, "{printed}");
    assert_eq!(same.skipped_real, 1);

    let other = cli(&[
        "evaluate",
        "--real-dir",
        s(&sunny),
        "--fake-dir",
        s(&data.join("cloudy")),
        "--image-size",
        "32",
        "--kid-subsets",
        "5",
        "--report-out",
        s(&dir.path().join("r2.txt")),
    ]);
    assert_eq!(code(&other), 0);
    let disjoint: MetricReport = stdout(&other).parse().unwrap();
    assert!(disjoint.fid > same.fid);

    let tiny = dir.path().join("tiny");
    std::fs::create_dir_all(&tiny).unwrap();
    image::RgbImage::new(8, 8).save(tiny.join("a.png")).unwrap();
    let o = cli(&["evaluate", "--real-dir", s(&tiny), "--fake-dir", s(&sunny), "--report-out", s(&report)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn ablate_rejects_unknown_modes_and_init_only_outputs_the_initial_translation() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 2, 0, "run");
    assert_eq!(code(&cli(&["ablate", "--config", s(&config), "--mode", "no_branches"])), 1);

    let input = dir.path().join("data/sunny/0001.png");
    let out = dir.path().join("ablated");
    let o = cli(&["ablate", "--config", s(&config), "--mode", "init_only", "--input", s(&input), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("composition=init_only"));
    assert!(out.join("0001_a1.00.png").exists());
    let ckpt = dir.path().join("run/init_only/final.wgan");
    let dump = dir.path().join("dump");
    let o = cli(&[
        "translate",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&input),
        "--alpha",
        "1",
        "--out",
        s(&dump),
        "--dump-intermediates",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(rgb(&dump.join("0001_a1.00.png")), rgb(&dump.join("0001_init.png")));
    assert_eq!(rgb(&dump.join("0001_a1.00.png")), rgb(&out.join("0001_a1.00.png")));
}
