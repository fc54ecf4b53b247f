use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lgdcount::checkpoint;
use lgdcount::dataset::load_scenes;
use lgdcount::formats::read_dmap;

const TINY: &str = "\
seed = 4
bench.train_scenes = 2
bench.train_images = 3
bench.test_scenes = 2
bench.test_images = 3
bench.image_size = 32
train.iterations = 4
train.batch_size = 2
train.checkpoint_every = 2
";

fn lgdcount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgdcount")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_adapt_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.cfg");
    fs::write(&cfg, TINY).unwrap();
    let data = d.join("data");
    ok(&lgdcount(&["synth", "--spec", s(&cfg), "--out", s(&data)]));
    let train = data.join("train.tsv");
    let test = data.join("test.tsv");
    let scenes = load_scenes(&train).unwrap();
    assert_eq!(scenes.len(), 2);
    assert_eq!(scenes[0].images.len(), 3);

    let model = d.join("model.lgdc");
    let trace = d.join("loss.csv");
    let args = ["train", "--manifest", s(&train), "--config", s(&cfg), "--out", s(&model), "--trace", s(&trace)];
    ok(&lgdcount(&args));
    let csv = fs::read_to_string(&trace).unwrap();
    assert_eq!(csv.lines().next(), Some("iter,loss,lr,skipped"));
    assert_eq!(csv.lines().count(), 5);
    assert!(d.join("model-000002.lgdc").exists());
    let first_hash = checkpoint::file_hash(&model).unwrap();

    // retraining with the same seed reproduces the file exactly
    let again = d.join("again.lgdc");
    let args = ["train", "--manifest", s(&train), "--config", s(&cfg), "--out", s(&again)];
    ok(&lgdcount(&args));
    assert_eq!(fs::read(&model).unwrap(), fs::read(&again).unwrap());

    let out_dir = d.join("adapt");
    let support = data.join("test/test-00/000.txt");
    let q1 = data.join("test/test-00/001.png");
    let q2 = data.join("test/test-00/002.png");
    let adapted = d.join("adapted.lgdc");
    let stdout = ok(&lgdcount(&[
        "adapt",
        "--checkpoint",
        s(&model),
        "--support",
        s(&support),
        "--query",
        s(&q1),
        "--query",
        s(&q2),
        "--out-dir",
        s(&out_dir),
        "--save-checkpoint",
        s(&adapted),
        "--export-similarity",
    ]));
    assert_eq!(stdout.lines().count(), 2);
    let dm = read_dmap(&out_dir.join("001.dmap")).unwrap();
    assert_eq!((dm.height(), dm.width()), (8, 8));
    let printed: f64 = stdout.lines().next().unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((printed - dm.values().iter().sum::<f64>()).abs() < 1e-3);
    assert!(out_dir.join("001.ldsm2.dmap").exists());
    let entries = checkpoint::read_entries(&adapted).unwrap();
    let mu = entries.iter().find(|(k, _)| k == "mldl.mu").unwrap();
    assert_eq!(mu.1.shape(), &[3, 32]);
    checkpoint::load(&adapted).unwrap();
    assert_eq!(checkpoint::file_hash(&model).unwrap(), first_hash);

    let preview = d.join("001.png");
    ok(&lgdcount(&["export-density", "--input", s(&out_dir.join("001.dmap")), "--output", s(&preview)]));
    assert!(preview.exists());

    let json = d.join("report.json");
    let table = ok(&lgdcount(&[
        "eval",
        "--checkpoint",
        s(&model),
        "--manifest",
        s(&test),
        "--config",
        s(&cfg),
        "--json",
        s(&json),
    ]));
    assert!(table.contains("pooled"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["checkpoint_sha256"], first_hash.as_str());
    assert_eq!(report["per_scene"].as_array().unwrap().len(), 2);
    let queries = report["queries"].as_array().unwrap();
    assert_eq!(queries.len(), 4);
    let mae = queries
        .iter()
        .map(|q| (q["predicted"].as_f64().unwrap() - q["actual"].as_f64().unwrap()).abs())
        .sum::<f64>()
        / 4.0;
    assert!((mae - report["overall"]["mae"].as_f64().unwrap()).abs() < 1e-12);

    // same inputs, same report bytes
    let json2 = d.join("report2.json");
    let args = ["eval", "--checkpoint", s(&model), "--manifest", s(&test), "--config", s(&cfg), "--json", s(&json2)];
    ok(&lgdcount(&args));
    assert_eq!(fs::read(&json).unwrap(), fs::read(&json2).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(lgdcount(&["frobnicate"]).status.code(), Some(2));

    let bad = d.join("bad.cfg");
    fs::write(&bad, "no.such.key = 1\n").unwrap();
    assert_eq!(lgdcount(&["synth", "--spec", s(&bad), "--out", s(d)]).status.code(), Some(2));

    let missing = d.join("missing.tsv");
    let target = d.join("m.lgdc");
    let args = ["train", "--manifest", s(&missing), "--out", s(&target)];
    assert_eq!(lgdcount(&args).status.code(), Some(3));

    let cfg = d.join("run.cfg");
    fs::write(&cfg, TINY).unwrap();
    let data = d.join("data");
    ok(&lgdcount(&["synth", "--spec", s(&cfg), "--out", s(&data)]));
    let model = target;
    checkpoint::save(&model, &lgd_core::model::Model::new(Default::default(), 1).unwrap()).unwrap();
    let empty = d.join("empty.txt");
    fs::write(&empty, format!("{}\n", s(&data.join("test/test-00/000.png")))).unwrap();
    let q = data.join("test/test-00/001.png");
    let out = lgdcount(&[
        "adapt",
        "--checkpoint",
        s(&model),
        "--support",
        s(&empty),
        "--query",
        s(&q),
        "--out-dir",
        s(&d.join("o")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("000.png"));

    let keys = ok(&lgdcount(&["keys"]));
    assert!(keys.contains("mldl.prototypes = 3"));
}
