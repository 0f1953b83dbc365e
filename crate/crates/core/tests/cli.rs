use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdbanet::metrics::Connectivity;
use mdbanet::phantom::oracle_connected_components;
use mdbanet::volume_io::{load_label_map, DatasetManifest, LabelEncoding, SCAR};

fn mdbanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdbanet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mdbanet")
}

fn ok(args: &[&str]) -> String {
    let out = mdbanet(args);
    assert!(
        out.status.success(),
        "mdbanet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn phantoms(root: &Path, extra: &[&str]) -> PathBuf {
    let dir = root.join("data");
    let mut args = vec!["phantom", "--out", p(&dir), "--count", "3"];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("manifest.json")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Copies every reference label map into a predictions directory.
fn perfect_predictions(manifest: &Path, dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    for e in DatasetManifest::load(manifest).unwrap().entries {
        fs::copy(e.label.unwrap(), dir.join(format!("{}_pred.nii.gz", e.case_id))).unwrap();
    }
}

#[test]
fn stats_agree_with_flood_fill_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = phantoms(tmp.path(), &["--seed", "4"]);
    let out = tmp.path().join("stats");
    ok(&["stats", "--manifest", p(&manifest), "--out", p(&out), "--connectivity", "6", "--connectivity", "26"]);
    for conn in [Connectivity::Six, Connectivity::TwentySix] {
        let (mut count, mut voxels) = (0, 0.0);
        for e in DatasetManifest::load(&manifest).unwrap().entries {
            let l = load_label_map(e.label.as_deref().unwrap(), &LabelEncoding::default()).unwrap();
            let sizes = oracle_connected_components(&l, SCAR, conn);
            count += sizes.len();
            voxels += sizes.iter().sum::<usize>() as f64 * l.spacing.voxel_volume();
        }
        let report = json(&out.join(format!("scar_stats_c{}.json", conn.as_u8())));
        assert_eq!(report["total_count"].as_u64().unwrap() as usize, count);
        assert!((report["total_volume_mm3"].as_f64().unwrap() - voxels).abs() < 1e-6);
        assert!(out.join(format!("scar_stats_c{}.png", conn.as_u8())).exists());
    }
    assert!(!out.join("scar_stats_c18.tsv").exists());
}

#[test]
fn scar_free_dataset_gives_empty_table() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = phantoms(tmp.path(), &["--n-scars", "0"]);
    let out = tmp.path().join("stats");
    ok(&["stats", "--manifest", p(&manifest), "--out", p(&out)]);
    let table = fs::read_to_string(out.join("scar_stats_c26.tsv")).unwrap();
    let counts = table.lines().find(|l| l.starts_with("Number of Scar")).unwrap();
    assert!(counts.split('\t').skip(1).all(|c| c == "0"), "{counts}");
    assert!(table.contains("Total Number\t0\n"));
}

#[test]
fn malformed_config_exits_with_validation_code_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"lr_zero": 0.1}}"#).unwrap();
    let out = tmp.path().join("never");
    let res = mdbanet(&["phantom", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());

    fs::write(&cfg, r#"{"train": {"momentum": 1.5}}"#).unwrap();
    let res = mdbanet(&["phantom", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("momentum"));
    assert!(!out.exists());

    let res = mdbanet(&["stats", "--manifest", p(&tmp.path().join("missing.json")), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());

    assert_eq!(mdbanet(&["train", "--no-such-flag"]).status.code(), Some(1));
}

#[test]
fn perfect_predictions_score_one() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = phantoms(tmp.path(), &[]);
    let preds = tmp.path().join("preds");
    perfect_predictions(&manifest, &preds);
    let out = tmp.path().join("eval");
    ok(&["evaluate", "--manifest", p(&manifest), "--predictions", p(&preds), "--split", "all", "--out", p(&out)]);
    let r = json(&out.join("eval.json"));
    assert_eq!(r["method"], "prediction");
    assert_eq!(r["ds_scar"]["mean"].as_f64().unwrap(), 1.0);
    assert_eq!(r["hd_scar"]["mean"].as_f64().unwrap(), 0.0);
    assert_eq!(r["ds_la"]["mean"].as_f64().unwrap(), 1.0);
    assert_eq!(r["cases"].as_array().unwrap().len(), 3);
    let csv = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn report_renders_zoomed_slices() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = phantoms(tmp.path(), &[]);
    let preds = tmp.path().join("preds");
    perfect_predictions(&manifest, &preds);
    let out = tmp.path().join("report");
    ok(&["report", "--manifest", p(&manifest), "--predictions", p(&preds), "--zoom", "3", "--slices", "4,10", "--out", p(&out)]);
    let pngs: Vec<PathBuf> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|f| f.extension().is_some_and(|x| x == "png"))
        .collect();
    assert_eq!(pngs.len(), 6);
    for f in pngs {
        let img = image::open(&f).unwrap();
        assert_eq!((img.width(), img.height()), (96, 96), "{}", f.display());
    }
    let res = mdbanet(&["report", "--manifest", p(&manifest), "--predictions", p(&preds), "--slices", "99", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn train_predict_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = phantoms(tmp.path(), &["--n-train", "2"]);
    let cfg = tmp.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"network": {"base_channels": 4}, "train": {"max_epochs": 1, "steps_per_epoch": 2, "patch_size": [16, 16, 16]}}"#,
    )
    .unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&run), "--checkpoint-every", "1"]);
    for f in ["train_log.csv", "eval.csv", "eval.json", "methods.tsv", "resolved_config.json", "checkpoints/final.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt = run.join("checkpoints/final.ckpt");
    let preds = tmp.path().join("preds");
    ok(&["predict", "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--split", "eval", "--out", p(&preds)]);
    let written: Vec<_> = fs::read_dir(&preds)
        .unwrap()
        .filter_map(|e| e.unwrap().file_name().into_string().ok())
        .filter(|n| n.ends_with("_pred.nii.gz"))
        .collect();
    assert_eq!(written.len(), 1);

    let a = tmp.path().join("eval_ckpt");
    let b = tmp.path().join("eval_files");
    ok(&["evaluate", "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--out", p(&a)]);
    ok(&["evaluate", "--manifest", p(&manifest), "--predictions", p(&preds), "--method", "MDBAnet", "--out", p(&b)]);
    let (ra, rb) = (json(&a.join("eval.json")), json(&b.join("eval.json")));
    assert_eq!(ra["ds_scar"], rb["ds_scar"]);
    assert_eq!(ra["method"], "MDBAnet");
}
