use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spformer::check::check_names;
use spformer::eval::gt_instances;
use spformer::inference::{InstancePrediction, PredictionFile};
use spformer::scene::load_scene;
use spformer::train::load_checkpoint;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spformer"))
}

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_toy(out: &Path, extra: &[&str]) -> Output {
    let mut cmd = bin();
    cmd.arg("train")
        .arg("--config")
        .arg(repo_path("configs/toy.toml"))
        .arg("--out")
        .arg(out);
    for e in extra {
        cmd.arg(e);
    }
    run(&mut cmd)
}

/// The `mean` row of a metrics report.
fn mean_row(report: &str) -> Vec<String> {
    report
        .lines()
        .find(|l| l.starts_with("mean\t"))
        .unwrap_or_else(|| panic!("no mean row in\n{report}"))
        .split('\t')
        .map(str::to_string)
        .collect()
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin()
        .args(["train", "--config"])
        .arg(dir.path().join("absent.toml"))
        .arg("--out")
        .arg(dir.path().join("run")));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_override_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_toy(&dir.path().join("run"), &["--set", "model.depth=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("depth"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(run(bin().arg("fly")).status.code(), Some(2));
    assert_eq!(run(bin().arg("infer")).status.code(), Some(2));
    assert_eq!(run(bin().arg("--help")).status.code(), Some(0));
}

#[test]
fn runaway_learning_rate_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_toy(
        &dir.path().join("run"),
        &["--set", "train.lr=1e300", "--set", "train.optimizer=sgd"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn training_twice_writes_identical_histories() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train_toy(out, &["--seed", "1"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stderr(&o).contains("resolved config"));
    }
    let ha = std::fs::read_to_string(a.join("loss_history.tsv")).unwrap();
    let hb = std::fs::read_to_string(b.join("loss_history.tsv")).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(ha.lines().count(), 21);
    let ckpt = load_checkpoint(a.join("checkpoint.json")).unwrap();
    ckpt.to_model().unwrap();
    assert_eq!(ckpt.step, 20);
}

#[test]
fn infer_dumps_one_attention_table_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let o = train_toy(&run_dir, &["--set", "model.layers=3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let scenes = run_dir.join("scenes");
    let infer = |out: &Path| {
        run(bin()
            .arg("infer")
            .arg("--checkpoint")
            .arg(run_dir.join("checkpoint.json"))
            .arg(&scenes)
            .arg("--out")
            .arg(out)
            .arg("--dump-attention"))
    };
    let (p1, p2) = (dir.path().join("p1"), dir.path().join("p2"));
    for p in [&p1, &p2] {
        let o = infer(p);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for id in ["scene_000", "scene_001"] {
        for l in 1..=3 {
            let name = format!("{id}.attention.layer{l}.tsv");
            let a = std::fs::read_to_string(p1.join(&name)).unwrap();
            assert!(a.starts_with(&format!("# layer {l}: 6 queries")), "{a}");
            assert_eq!(a, std::fs::read_to_string(p2.join(&name)).unwrap());
        }
        assert!(!p1.join(format!("{id}.attention.layer4.tsv")).exists());
        let pred = PredictionFile::load(p1.join(format!("{id}.json"))).unwrap();
        assert!(pred.instances.len() <= 6);
        assert_eq!(
            std::fs::read(p1.join(format!("{id}.json"))).unwrap(),
            std::fs::read(p2.join(format!("{id}.json"))).unwrap()
        );
    }
}

#[test]
fn infer_rejects_checkpoint_that_does_not_fit_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    assert_eq!(train_toy(&run_dir, &[]).status.code(), Some(0));
    let path = run_dir.join("checkpoint.json");
    let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    doc["config"]["model"]["layers"] = 4.into();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, doc.to_string()).unwrap();
    let o = run(bin()
        .arg("infer")
        .arg("--checkpoint")
        .arg(&bad)
        .arg(run_dir.join("scenes"))
        .arg("--out")
        .arg(dir.path().join("pred")));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("decoder.layer3"), "{}", stderr(&o));
}

fn eval(pred: &Path, gt: &Path) -> Output {
    run(bin().arg("eval").arg("--pred").arg(pred).arg("--gt").arg(gt))
}

#[test]
fn ground_truth_as_predictions_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    assert_eq!(train_toy(&run_dir, &[]).status.code(), Some(0));
    let gt_dir = run_dir.join("scenes");
    let pred_dir = dir.path().join("pred");
    std::fs::create_dir(&pred_dir).unwrap();
    for id in ["scene_000", "scene_001"] {
        let scene = load_scene(gt_dir.join(format!("{id}.json"))).unwrap();
        let instances = gt_instances(&scene)
            .unwrap()
            .into_iter()
            .map(|g| InstancePrediction {
                class: g.class,
                score: 1.0,
                points: g.points,
            })
            .collect();
        PredictionFile {
            scene: id.into(),
            instances,
        }
        .save(pred_dir.join(format!("{id}.json")))
        .unwrap();
    }
    let report_path = dir.path().join("report.tsv");
    let o = run(bin()
        .arg("eval")
        .arg("--pred")
        .arg(&pred_dir)
        .arg("--gt")
        .arg(&gt_dir)
        .arg("--out")
        .arg(&report_path));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let row = mean_row(&stdout(&o));
    assert_eq!(&row[2..5], &["1.0000", "1.0000", "1.0000"]);
    assert_eq!(std::fs::read_to_string(report_path).unwrap(), stdout(&o));
}

#[test]
fn single_prediction_at_iou_point_six_scores_three_tenths() {
    let o = eval(&fixture("iou06/pred"), &fixture("iou06/gt"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let row = mean_row(&stdout(&o));
    assert_eq!(row[2], "0.3000");
    assert_eq!(row[3], "1.0000");
}

#[test]
fn empty_prediction_dir_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = eval(dir.path(), &fixture("iou06/gt"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let row = mean_row(&stdout(&o));
    assert_eq!(&row[2..5], &["0.0000", "0.0000", "0.0000"]);
}

#[test]
fn prediction_for_unknown_scene_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    PredictionFile {
        scene: "attic".into(),
        instances: vec![],
    }
    .save(dir.path().join("attic.json"))
    .unwrap();
    let o = eval(dir.path(), &fixture("iou06/gt"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("attic"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_is_repeatable() {
    let a = run(bin().args(["gradcheck", "--seed", "1"]));
    assert_eq!(a.status.code(), Some(0), "{}{}", stdout(&a), stderr(&a));
    let b = run(bin().args(["gradcheck", "--seed", "1"]));
    assert_eq!(stdout(&a), stdout(&b));
    for name in check_names() {
        assert!(
            stdout(&a).lines().any(|l| l.starts_with(&format!("{name}\t"))),
            "{name} missing"
        );
    }
}

#[test]
fn corrupted_gradient_fails_naming_the_kernel() {
    let name = check_names()[0];
    let o = run(bin().args(["gradcheck", "--corrupt-kernel", name]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(name), "{}", stderr(&o));
    let row = stdout(&o)
        .lines()
        .find(|l| l.starts_with(&format!("{name}\t")))
        .unwrap()
        .to_string();
    assert!(row.ends_with("FAIL"), "{row}");

    let o = run(bin().args(["gradcheck", "--corrupt-kernel", "no_such_kernel"]));
    assert_eq!(o.status.code(), Some(2));
}
