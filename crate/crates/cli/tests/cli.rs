use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mlada(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlada"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_dir(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn train_emits_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path(), "run");
    let o = mlada(&[
        "train",
        "--max_iters",
        "20",
        "--eval_every",
        "10",
        "--out_dir",
        &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["losses.csv", "evals.csv", "params.bin", "manifest.json"] {
        assert!(Path::new(&out).join(f).exists(), "{}", f);
    }
    let losses = fs::read_to_string(Path::new(&out).join("losses.csv")).unwrap();
    assert_eq!(
        losses.lines().next().unwrap(),
        "iter,l_class,l_domain,l_triplet,l_entropy,total"
    );
    assert_eq!(losses.lines().count(), 21);
    let evals = fs::read_to_string(Path::new(&out).join("evals.csv")).unwrap();
    assert_eq!(evals.lines().count(), 3);
}

#[test]
fn manifest_reproduces_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = out_dir(tmp.path(), "a");
    let b = out_dir(tmp.path(), "b");
    let o = mlada(&[
        "train",
        "--max_iters",
        "30",
        "--eval_every",
        "10",
        "--seed",
        "7",
        "--out_dir",
        &a,
    ]);
    assert!(o.status.success());
    let manifest = out_dir(Path::new(&a), "manifest.json");
    let o = mlada(&["train", "--manifest", &manifest, "--out_dir", &b]);
    assert!(o.status.success());
    for f in ["losses.csv", "evals.csv", "params.bin"] {
        assert_eq!(
            fs::read(Path::new(&a).join(f)).unwrap(),
            fs::read(Path::new(&b).join(f)).unwrap(),
            "{}",
            f
        );
    }
}

#[test]
fn generated_files_feed_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = out_dir(tmp.path(), "data");
    assert!(
        mlada(&["gen-data", "--n_per_class", "20", "--out_dir", &data])
            .status
            .success()
    );
    let src = out_dir(Path::new(&data), "source.csv");
    let tgt = out_dir(Path::new(&data), "target.csv");
    let run = out_dir(tmp.path(), "run");
    let o = mlada(&[
        "eval",
        "--source_csv",
        &src,
        "--target_csv",
        &tgt,
        "--target_labeled",
        "true",
        "--max_iters",
        "20",
        "--out_dir",
        &run,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let acc = fs::read_to_string(Path::new(&run).join("accuracy.csv")).unwrap();
    assert!(acc.starts_with("source_acc,target_acc\n"));

    // both data sources at once
    let o = mlada(&[
        "train",
        "--source_csv",
        &src,
        "--target_csv",
        &tgt,
        "--classes",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn perturb_and_analyze_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let run = out_dir(tmp.path(), "run");
    assert!(mlada(&["train", "--max_iters", "20", "--out_dir", &run])
        .status
        .success());
    let params = out_dir(Path::new(&run), "params.bin");

    let p = out_dir(tmp.path(), "p");
    assert!(mlada(&["perturb", "--params", &params, "--out_dir", &p])
        .status
        .success());
    let rob = fs::read_to_string(Path::new(&p).join("robustness.csv")).unwrap();
    let lines: Vec<&str> = rob.lines().collect();
    assert_eq!(lines[0], "intensity,accuracy");
    assert_eq!(lines.len(), 4);

    let a = out_dir(tmp.path(), "a");
    let o = mlada(&[
        "analyze",
        "--params",
        &params,
        "--space",
        "metric",
        "--label_mode",
        "true",
        "--out_dir",
        &a,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&a).join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["space"], "metric");
    assert!(report["anchor_index"].is_u64());
    let emb = fs::read_to_string(Path::new(&a).join("embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 301);
    assert!(Path::new(&a).join("report.txt").exists());
}

#[test]
fn ablate_emits_one_row_per_combination() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path(), "abl");
    let o = mlada(&[
        "ablate",
        "--max_iters",
        "20",
        "--seeds",
        "0,1",
        "--out_dir",
        &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(Path::new(&out).join("ablation.csv")).unwrap();
    let labels: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        labels,
        [
            "L_C",
            "L_C+L_D",
            "L_C+gL_T",
            "L_C+L_D+gL_T",
            "L_C+L_D+lL_E",
            "L_C+L_D+lL_E+gL_T"
        ]
    );
    let o = mlada(&[
        "ablate",
        "--grid",
        "margin",
        "--max_iters",
        "10",
        "--seeds",
        "0",
        "--out_dir",
        &out,
    ]);
    assert!(o.status.success());
    let csv = fs::read_to_string(Path::new(&out).join("margin_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path(), "x");
    assert_eq!(mlada(&["bogus"]).status.code(), Some(2));
    assert_eq!(
        mlada(&["train", "--gamma", "abc", "--out_dir", &out])
            .status
            .code(),
        Some(2)
    );
    let o = mlada(&["train", "--nope", "1", "--out_dir", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "1.0,2.0,0\n1.0,oops,1\n").unwrap();
    let bad = bad.to_str().unwrap();
    let o = mlada(&[
        "train",
        "--source_csv",
        bad,
        "--target_csv",
        bad,
        "--out_dir",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let o = mlada(&[
        "train",
        "--base_lr",
        "1e6",
        "--max_iters",
        "200",
        "--out_dir",
        &out,
    ]);
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    let missing = tmp.path().join("none.cfg");
    let o = mlada(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
