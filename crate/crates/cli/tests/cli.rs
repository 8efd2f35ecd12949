mod fixture;

use std::fs;

use fixture::{slides, Workspace, SLIDES};
use serde_json::Value;

fn json(path: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(ws: &Workspace, args: &[&str]) -> String {
    let out = ws.run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn windows(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    if dim < size {
        return Vec::new();
    }
    (0..=dim - size).filter(|p| p % stride == 0 || *p == dim - size).collect()
}

#[test]
fn preprocess_counts_match_window_and_tissue_oracle() {
    let ws = Workspace::standard();
    ws.ok(&["preprocess"]);
    let (mut extracted, mut kept) = (0, 0);
    for s in slides() {
        let (h, w, _) = s.image.dim();
        for &r in &windows(h, 64, 32) {
            for &c in &windows(w, 64, 32) {
                extracted += 1;
                let mut tissue = 0;
                for y in r..r + 64 {
                    for x in c..c + 64 {
                        let px = [s.image[[y, x, 0]], s.image[[y, x, 1]], s.image[[y, x, 2]]];
                        let spread = px.iter().max().unwrap() - px.iter().min().unwrap();
                        tissue += (spread as f64 / 255.0 > 0.08) as usize;
                    }
                }
                kept += (tissue as f64 / 4096.0 >= 0.1) as usize;
            }
        }
    }
    let summary = json(&ws.out().join("preprocessed/summary.json"));
    assert_eq!(summary["slides"], SLIDES.len());
    assert_eq!(summary["extracted"], extracted);
    assert_eq!(summary["kept"], kept);
    assert_eq!(summary["discarded"], extracted - kept);

    let manifest = json(&ws.out().join("preprocessed/manifest.json"));
    let patches = manifest["patches"].as_array().unwrap();
    let originals = patches.iter().filter(|p| p.get("augmentation").is_none()).count();
    assert_eq!(originals, kept);
    for p in patches {
        for key in ["image", "mask"] {
            assert!(ws.out().join("preprocessed").join(p[key].as_str().unwrap()).is_file());
        }
    }
}

#[test]
fn missing_or_empty_dataset_root_is_named() {
    let ws = Workspace::new(|c| c.replace("dataset_root = \"data\"", "dataset_root = \"nowhere\""));
    let err = stderr(&ws, &["preprocess"]);
    assert!(err.contains("nowhere"), "{err}");

    let ws = Workspace::new(|c| c.replace("dataset_root = \"data\"", "dataset_root = \"empty\""));
    fs::create_dir(ws.path().join("empty")).unwrap();
    let err = stderr(&ws, &["preprocess"]);
    assert!(err.contains("empty"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let ws = Workspace::new(|c| c.replace("[train]", "[train]\nlearning_rat = 0.1"));
    let err = stderr(&ws, &["preprocess"]);
    assert!(err.contains("learning_rat"), "{err}");
}

#[test]
fn train_and_eval_need_a_manifest_and_a_valid_fold() {
    let ws = Workspace::standard();
    let err = stderr(&ws, &["train", "--fold", "0"]);
    assert!(err.contains("manifest"), "{err}");
    ws.ok(&["preprocess"]);
    let err = stderr(&ws, &["train", "--fold", "2"]);
    assert!(err.contains("fold 2"), "{err}");
    let err = stderr(&ws, &["eval", "--fold", "5"]);
    assert!(err.contains("fold 5"), "{err}");
}

#[test]
fn full_pipeline_writes_every_output() {
    let ws = Workspace::standard();
    ws.ok(&["preprocess"]);
    for fold in ["0", "1"] {
        ws.ok(&["train", "--fold", fold]);
        let csv = fs::read_to_string(ws.out().join(format!("runs/fold{fold}/loss.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 3 + 1, "{csv}");
        ws.ok(&["eval", "--fold", fold]);
        let first = fs::read(ws.out().join(format!("eval/fold{fold}/report.json"))).unwrap();
        ws.ok(&["eval", "--fold", fold]);
        assert_eq!(first, fs::read(ws.out().join(format!("eval/fold{fold}/report.json"))).unwrap());
        assert!(ws.out().join(format!("eval/fold{fold}/report.txt")).is_file());
    }
    let table = ws.ok(&["report"]);
    for file in ["summary.json", "summary.txt", "dice.png"] {
        assert!(ws.out().join("report").join(file).is_file(), "{file}");
    }
    assert!(table.contains('±'), "{table}");
    let png = fs::read(ws.out().join("report/dice.png")).unwrap();
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
}

#[test]
fn ground_truth_scored_against_itself_is_perfect() {
    let ws = Workspace::standard();
    ws.ok(&["preprocess"]);
    let gt = ws.out().join("preprocessed/patches/0");
    ws.ok(&["eval", "--fold", "0", "--predictions", gt.to_str().unwrap()]);
    let out = json(&ws.out().join("eval/fold0/report.json"));
    let report = &out["report"];
    assert_eq!(out["source"], "predictions");
    assert_eq!(report["overall_accuracy"], 1.0);
    assert_eq!(report["weighted"]["f1_dice"], 1.0);
    for c in report["classes"].as_array().unwrap() {
        if c["support"].as_u64().unwrap() > 0 {
            for key in ["precision", "recall", "f1_dice", "accuracy"] {
                assert_eq!(c[key], 1.0, "{} {key}", c["name"]);
            }
        }
    }
}

#[test]
fn wrong_size_prediction_is_a_shape_mismatch_naming_the_file() {
    let ws = Workspace::standard();
    ws.ok(&["preprocess"]);
    let preds = ws.path().join("preds");
    fs::create_dir(&preds).unwrap();
    let src = ws.out().join("preprocessed/patches/0");
    let mut masks: Vec<_> = fs::read_dir(&src)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_str().unwrap().ends_with("_mask.png"))
        .collect();
    masks.sort();
    for m in &masks {
        fs::copy(m, preds.join(m.file_name().unwrap())).unwrap();
    }
    let manifest = json(&ws.out().join("preprocessed/manifest.json"));
    let held_out = manifest["patches"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["fold"] == 0 && p.get("augmentation").is_none())
        .unwrap();
    let victim = format!("{}_mask.png", held_out["stem"].as_str().unwrap());
    let small = hvmunet::data::SegmentationMask::filled(8, 8, hvmunet::data::G3).unwrap();
    hvmunet::data::io::write_mask(&preds.join(&victim), &small).unwrap();
    let err = stderr(&ws, &["eval", "--fold", "0", "--predictions", preds.to_str().unwrap()]);
    assert!(err.contains(&victim), "{err}");
    assert!(err.to_lowercase().contains("shape"), "{err}");
}
