use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_causal-concepts");

fn small_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "synth": { "num_samples": 240 },
        "train": { "epochs": 3 },
        "lambda_grid": [0.003, 0.03, 0.3],
        "cv_folds": 3,
        "counterfactual": { "max_iters": 60 },
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_all(cfg: &Path, out: &Path, seed: u64) {
    let o = run(&["run-all", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", &seed.to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn files_under(root: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out
}

#[test]
fn stage_before_its_inputs_is_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["mediate", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"synth": {"noise_sigma": -1.0}}"#).unwrap();
    let o = run(&["gen-data", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("synth.noise_sigma"), "{}", stderr(&o));

    std::fs::write(&path, r#"{"cv_folds": 1}"#).unwrap();
    let o = run(&["gen-data", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cv_folds"), "{}", stderr(&o));
}

#[test]
fn unknown_stage_is_rejected() {
    let o = run(&["run", "--stage", "polish"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_all_emits_the_report_contract_and_reruns_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    run_all(&cfg, &out, 4);

    let report: BTreeSet<String> = std::fs::read_dir(out.join("report"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let expected: BTreeSet<String> = [
        "probe_metrics.csv",
        "counterfactuals.csv",
        "heatmap.csv",
        "ranking.csv",
        "sweep.csv",
        "tree.json",
        "tree.txt",
        "manifest.json",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    assert_eq!(report, expected);

    // every artifact is listed in the manifest with its checksum
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let listed: BTreeSet<PathBuf> = manifest["artifacts"].as_object().unwrap().keys().map(PathBuf::from).collect();
    // the manifest and its report copy cannot checksum themselves
    let on_disk: BTreeSet<PathBuf> = files_under(&out)
        .into_iter()
        .filter(|p| p.file_name().unwrap() != "manifest.json" || p.starts_with("data"))
        .collect();
    assert_eq!(listed, on_disk);

    // deleting an intermediate and rerunning its stage restores it byte for byte
    let victim = out.join("cf/counterfactuals.csv");
    let before = std::fs::read(&victim).unwrap();
    std::fs::remove_file(&victim).unwrap();
    let o = run(&["run", "--stage", "counterfactuals", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&victim).unwrap(), before);
}

fn csv_headers(root: &Path) -> Vec<(PathBuf, String)> {
    files_under(root)
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            let text = std::fs::read_to_string(root.join(&p)).unwrap();
            (p, text.lines().next().unwrap_or_default().to_string())
        })
        .collect()
}

#[test]
fn different_seeds_share_a_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_all(&cfg, &a, 1);
    run_all(&cfg, &b, 2);
    assert_eq!(files_under(&a), files_under(&b));
    assert_eq!(csv_headers(&a), csv_headers(&b));
    assert_ne!(std::fs::read(a.join("data/train_images.bin")).unwrap(), std::fs::read(b.join("data/train_images.bin")).unwrap());
}
