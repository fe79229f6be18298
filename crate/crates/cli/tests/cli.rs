use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lobbench::config::ExperimentConfig;
use lobbench::features::build_feature_matrix;
use lobbench::filters::apply_filter;
use lobbench::ingest::{read_frames_csv, write_frames_csv};

const FAST: [&str; 4] = [
    "--set",
    "model.grid.rounds=10, 20",
    "--set",
    "model.grid.learning_rates=0.1, 0.3",
];

fn lobbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lobbench"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lobbench(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    let path = dir.join("book.ndjson");
    ok(&["synth", "-o", s(&path), "--n", "2500", "--noise-sigma", "0.5"]);
    path
}

#[test]
fn staged_commands_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let book = synth(d);
    let (frames_p, feats_p, filt_p) = (d.join("frames.csv"), d.join("features.csv"), d.join("filtered.csv"));
    ok(&["ingest", "-i", s(&book), "-o", s(&frames_p)]);
    ok(&["features", "-f", s(&frames_p), "-o", s(&feats_p)]);
    ok(&["filter", "-f", s(&feats_p), "-o", s(&filt_p), "--set", "filter.kind=sg"]);

    let frames = read_frames_csv(BufReader::new(fs::File::open(&frames_p).unwrap())).unwrap();
    assert!(frames.len() > 2_000);
    let mut again = Vec::new();
    write_frames_csv(&frames, &mut again).unwrap();
    assert_eq!(again, fs::read(&frames_p).unwrap());

    let cfg = ExperimentConfig::from_pairs(vec![
        ("input".to_string(), "-".to_string()),
        ("filter.kind".to_string(), "sg".to_string()),
    ])
    .unwrap();
    let m = apply_filter(&build_feature_matrix(&frames, &cfg.features).unwrap(), &cfg.filter).unwrap();
    let mut expected = Vec::new();
    m.write_csv(&mut expected).unwrap();
    assert_eq!(fs::read(&filt_p).unwrap(), expected);

    let labels = ok(&["label", "--frames", s(&frames_p), "--set", "label.horizon_ms=1000"]).stdout;
    let labels = String::from_utf8(labels).unwrap();
    assert_eq!(labels.lines().next(), Some("ts,label,return"));
    assert_eq!(labels.lines().count(), 1 + frames.len());

    let windows = ok(&["windows", "--frames", s(&frames_p)]).stdout;
    let windows = String::from_utf8(windows).unwrap();
    for split in ["train", "val", "test"] {
        assert!(windows.lines().any(|l| l.starts_with(&format!("{split},"))), "{split}");
    }
}

#[test]
fn evaluate_reproduces_run_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let book = synth(d);
    let out = d.join("runs");
    let input = format!("input={}", s(&book));
    let output = format!("output={}", s(&out));
    let mut args = vec!["run", "--set", &input, "--set", &output];
    args.extend(FAST);
    let stdout = String::from_utf8(ok(&args).stdout).unwrap();
    let run_dir = PathBuf::from(stdout.trim().rsplit("-> ").next().unwrap());
    for f in ["manifest.txt", "metrics.csv", "metrics.md", "confusion.csv", "grid.csv", "predictions.csv", "model.bin"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let eval = d.join("eval");
    ok(&["evaluate", "-p", s(&run_dir.join("predictions.csv")), "-o", s(&eval)]);
    assert_eq!(
        fs::read(eval.join("metrics.csv")).unwrap(),
        fs::read(run_dir.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(eval.join("confusion.csv")).unwrap(),
        fs::read(run_dir.join("confusion.csv")).unwrap()
    );
}

#[test]
fn export_train_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let book = synth(d);
    let tensors = d.join("tensors");
    ok(&["export", "-i", s(&book), "-o", s(&tensors), "--set", "window.t=5"]);
    let model_dir = d.join("model");
    let mut args = vec!["train", "-t", s(&tensors), "-o", s(&model_dir)];
    args.extend(FAST);
    ok(&args);
    let preds = d.join("preds.csv");
    ok(&["predict", "-m", s(&model_dir.join("model.bin")), "-t", s(&tensors), "-o", s(&preds)]);
    assert_eq!(
        fs::read(&preds).unwrap(),
        fs::read(model_dir.join("predictions.csv")).unwrap()
    );
    let metrics = fs::read_to_string(model_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,class,value\n"), "{metrics}");
}

fn write_embeddings(dir: &Path, d: usize) {
    for name in ["train", "val", "test"] {
        let y = fs::read(dir.join(format!("{name}.y.i8"))).unwrap();
        let mut bytes = Vec::with_capacity(y.len() * d * 4);
        for (i, &label) in y.iter().enumerate() {
            for j in 0..d {
                let v = if j == 0 { label as f32 } else { ((i * 31 + j * 7) % 13) as f32 / 13.0 };
                bytes.extend(v.to_le_bytes());
            }
        }
        fs::write(dir.join(format!("embeddings.{name}.f32")), bytes).unwrap();
    }
}

#[test]
fn train_accepts_external_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let book = synth(d);
    let tensors = d.join("tensors");
    ok(&["export", "-i", s(&book), "-o", s(&tensors), "--set", "window.t=5"]);
    write_embeddings(&tensors, 64);

    let tensor_run = d.join("from_tensors");
    let mut args = vec!["train", "-t", s(&tensors), "-o", s(&tensor_run)];
    args.extend(FAST);
    ok(&args);
    let emb_run = d.join("from_embeddings");
    let mut args = vec!["train", "--embeddings", "-t", s(&tensors), "-o", s(&emb_run)];
    args.extend(FAST);
    ok(&args);

    let schema = |p: &Path| -> Vec<String> {
        fs::read_to_string(p.join("metrics.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(schema(&emb_run), schema(&tensor_run));
    let acc = fs::read_to_string(emb_run.join("metrics.csv")).unwrap();
    let acc: f64 = acc
        .lines()
        .find_map(|l| l.strip_prefix("accuracy,all,"))
        .expect("accuracy row")
        .parse()
        .unwrap();
    assert_eq!(acc, 1.0, "label is the first embedding coordinate");

    let preds = d.join("emb_preds.csv");
    ok(&["predict", "--embeddings", "-m", s(&emb_run.join("model.bin")), "-t", s(&tensors), "-o", s(&preds)]);
    assert_eq!(fs::read(&preds).unwrap(), fs::read(emb_run.join("predictions.csv")).unwrap());

    fs::write(tensors.join("embeddings.val.f32"), [0u8; 12]).unwrap();
    let out = lobbench(&["train", "--embeddings", "-t", s(&tensors), "-o", s(&d.join("bad"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = lobbench(&["run", "--set", "input=x.ndjson", "--set", "no.such.key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no.such.key"));

    assert_eq!(lobbench(&["run"]).status.code(), Some(2));
    assert_eq!(lobbench(&["ingest", "--bogus"]).status.code(), Some(2));

    let out = lobbench(&["ingest", "-i", s(&d.join("missing.ndjson"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error: ingest: "));

    let book = synth(d);
    let spec = d.join("matrix.txt");
    fs::write(
        &spec,
        format!(
            "input = {}\noutput = {}\nmodel.grid.rounds = 10\nmodel.grid.learning_rates = 0.3\naxis window.t = 10, 5000\n",
            s(&book),
            s(&d.join("m"))
        ),
    )
    .unwrap();
    let out = lobbench(&["matrix", "-s", s(&spec)]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 cells, 1 failed"));

    let tensors = d.join("huge");
    fs::create_dir_all(&tensors).unwrap();
    for name in ["train", "val", "test"] {
        let x: Vec<u8> = [1e30f32, -1e30, 2e30, -2e30].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(tensors.join(format!("{name}.x.f32")), x).unwrap();
        fs::write(tensors.join(format!("{name}.y.i8")), [0u8, 1, 0, 1]).unwrap();
    }
    fs::write(
        tensors.join("manifest.txt"),
        "classes=2\nf=1\nn.test=4\nn.train=4\nn.val=4\nt=1\nweights=1.0,1.0\n",
    )
    .unwrap();
    let out = lobbench(&[
        "train",
        "-t",
        s(&tensors),
        "-o",
        s(&d.join("diverged")),
        "--set",
        "model.kind=logistic",
        "--set",
        "model.grid=false",
        "--set",
        "model.learning_rate=1e30",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error: train: "));
}

#[test]
fn cli_definition_is_consistent() {
    for sub in [
        "ingest", "features", "filter", "label", "windows", "export", "train", "predict", "evaluate", "synth",
        "convert", "run", "matrix",
    ] {
        ok(&[sub, "--help"]);
    }
}
