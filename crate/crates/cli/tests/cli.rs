use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hyptimbre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyptimbre"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hyptimbre(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_corpus(dir: &Path) -> PathBuf {
    let data = dir.join("corpus.mel");
    ok(&["synth-data", "--out", s(&data), "--seed", "3", "--pitches", "6", "--variations", "2"]);
    data
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "hidden = 16\nbatch_size = 32\nlearning_rate = 3e-3\nmax_steps = 30\ndp = 3\n",
    )
    .unwrap();
    cfg
}

fn key_values(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Separability recomputed from the exported prior means: family from the
/// `family/instrument` name, distances from the raw coordinates.
fn separability_from_csv(priors: &str, radius: Option<f64>) -> f64 {
    let mut fams = Vec::new();
    let mut pts: Vec<Vec<f64>> = Vec::new();
    for line in priors.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        fams.push(cols[1].split('/').next().unwrap().to_string());
        pts.push(cols[2..].iter().map(|c| c.parse().unwrap()).collect());
    }
    let dist = |a: &[f64], b: &[f64]| match radius {
        None => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        Some(r) => {
            let minkowski = a[0] * b[0] - a[1..].iter().zip(&b[1..]).map(|(x, y)| x * y).sum::<f64>();
            r * (minkowski / (r * r)).max(1.0).acosh()
        }
    };
    let (mut same, mut n_same, mut diff, mut n_diff) = (0.0, 0, 0.0, 0);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = dist(&pts[i], &pts[j]);
            if fams[i] == fams[j] {
                same += d;
                n_same += 1;
            } else {
                diff += d;
                n_diff += 1;
            }
        }
    }
    (diff / n_diff as f64) / (same / n_same as f64)
}

#[test]
fn gradcheck_passes_on_a_clean_build() {
    let out = hyptimbre(&["gradcheck", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradient checks within"));
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let out = hyptimbre(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(hyptimbre(&["eval", "--bogus"]).status.code(), Some(2));
    assert_eq!(hyptimbre(&["train", "--geometry", "spherical"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.mel");
    let out = hyptimbre(&["eval", "--data", s(&missing), "--model", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let bad_cfg = dir.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "width = 3\n").unwrap();
    let data = dir.path().join("d.mel");
    let out = hyptimbre(&["train", "--data", s(&data), "--out", s(&data), "--config", s(&bad_cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
}

fn pipeline(geometry: &str, radius: Option<f64>) {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path());
    let cfg = small_config(dir.path());
    let model = dir.path().join("model.bin");
    let mut train = vec![
        "train", "--data", s(&data), "--out", s(&model), "--config", s(&cfg), "--geometry", geometry,
        "--dt", "2", "--seed", "5",
    ];
    let r = radius.map(|r| r.to_string());
    if let Some(r) = &r {
        train.extend(["--radius", r.as_str()]);
    }
    ok(&train);
    assert!(model.with_extension("bin.json").exists());
    let log = std::fs::read_to_string(dir.path().join("model.bin.log.tsv")).unwrap();
    assert!(log.starts_with("epoch\tsteps\trecon"));

    let kv_path = dir.path().join("report.txt");
    let text = ok(&["eval", "--data", s(&data), "--model", s(&model), "--out", s(&kv_path)]);
    assert!(text.contains("timbre accuracy"));
    let kv = key_values(&std::fs::read_to_string(&kv_path).unwrap());
    assert_eq!(kv["geometry"], geometry);
    assert_eq!(kv["n_same_pairs"], "19");
    assert_eq!(kv["n_diff_pairs"], "47");

    let emb = dir.path().join("emb.csv");
    ok(&["embed", "--data", s(&data), "--model", s(&model), "--out", s(&emb)]);
    let rows = std::fs::read_to_string(&emb).unwrap();
    let width = if radius.is_some() { 3 } else { 2 };
    let header: Vec<&str> = rows.lines().next().unwrap().split(',').collect();
    assert_eq!(header[..3], ["example_id", "pitch_label", "timbre_label"]);
    assert_eq!(header.len(), 3 + width);
    assert_eq!(rows.lines().count() - 1, kv["n_examples"].parse::<usize>().unwrap());
    let priors = std::fs::read_to_string(dir.path().join("emb.csv.priors.csv")).unwrap();
    let svg = std::fs::read_to_string(dir.path().join("emb.csv.svg")).unwrap();
    assert!(svg.starts_with("<svg"));

    let recomputed = separability_from_csv(&priors, radius);
    let reported: f64 = kv["s"].parse().unwrap();
    assert!(
        (recomputed - reported).abs() <= 1e-9 * reported.abs(),
        "{recomputed} vs {reported}"
    );

    let mel = dir.path().join("mel.csv");
    ok(&["sample", "--model", s(&model), "--timbre", "11", "--pitch", "0", "--out", s(&mel)]);
    let mel = std::fs::read_to_string(&mel).unwrap();
    assert_eq!(mel.lines().count(), 1 + 64);
    assert_eq!(mel.lines().nth(1).unwrap().split(',').count(), 1 + 16);
    let out = hyptimbre(&["sample", "--model", s(&model), "--timbre", "12", "--pitch", "0", "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn hyperbolic_pipeline_and_separability_cross_check() {
    pipeline("hyperbolic", Some(10.0));
}

#[test]
fn euclidean_pipeline_and_separability_cross_check() {
    pipeline("euclidean", None);
}

#[test]
fn eval_is_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path());
    let cfg = small_config(dir.path());
    let model = dir.path().join("m.bin");
    ok(&["train", "--data", s(&data), "--out", s(&model), "--config", s(&cfg), "--dt", "3"]);
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    let ta = ok(&["eval", "--data", s(&data), "--model", s(&model), "--out", s(&a), "--split", "val"]);
    let tb = ok(&["eval", "--data", s(&data), "--model", s(&model), "--out", s(&b), "--split", "val"]);
    assert_eq!(ta, tb);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    // No scatter plot outside two dimensions.
    let emb = dir.path().join("e.csv");
    ok(&["embed", "--data", s(&data), "--model", s(&model), "--out", s(&emb)]);
    assert!(!dir.path().join("e.csv.svg").exists());
}

#[test]
fn sweep_emits_eight_cells() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path());
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, "hidden = 8\nmax_steps = 3\ndp = 2\n").unwrap();
    let out = dir.path().join("table.txt");
    let table = ok(&["sweep", "--data", s(&data), "--config", s(&cfg), "--threads", "3", "--out", s(&out)]);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), table);
    for row in ["euclidean", "hyperbolic R=1", "hyperbolic R=10", "hyperbolic R=100"] {
        assert_eq!(table.lines().filter(|l| l.starts_with(&format!("{row} "))).count(), 2, "{row}\n{table}");
    }
    assert!(table.contains("D_t=2") && table.contains("D_t=4"));
    assert!(table.starts_with("# synthetic corpus"));
}
