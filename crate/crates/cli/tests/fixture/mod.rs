#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hvmunet::data::io::{write_mask, write_rgb};
use hvmunet::data::SlideRecord;
use hvmunet::synthetic;

/// `(slide_id, patient_id, height, width, seed)` for a four-patient set
/// with two annotators per slide.
pub const SLIDES: [(&str, &str, usize, usize, u64); 4] = [
    ("s1", "p1", 160, 160, 1),
    ("s2", "p2", 160, 192, 2),
    ("s3", "p3", 176, 160, 3),
    ("s4", "p4", 160, 160, 4),
];

pub fn slides() -> Vec<SlideRecord> {
    SLIDES
        .iter()
        .map(|&(id, patient, h, w, seed)| synthetic::slide(id, patient, (h, w), 2, seed).unwrap())
        .collect()
}

pub fn write_dataset(root: &Path, slides: &[SlideRecord]) {
    let mut tsv = String::from("slide_id\tpatient_id\n");
    for s in slides {
        fs::create_dir_all(root.join("masks").join(&s.slide_id)).unwrap();
        fs::create_dir_all(root.join("slides")).unwrap();
        write_rgb(&root.join("slides").join(format!("{}.png", s.slide_id)), &s.image).unwrap();
        for (name, m) in &s.annotations {
            write_mask(&root.join("masks").join(&s.slide_id).join(format!("{name}.png")), m).unwrap();
        }
        tsv.push_str(&format!("{}\t{}\n", s.slide_id, s.patient_id));
    }
    fs::write(root.join("patients.tsv"), tsv).unwrap();
}

pub const CONFIG: &str = r#"
dataset_root = "data"
output_root = "out"

[model]
stage_channels = [4, 8, 8, 8, 16, 16]
stage_orders = { stage3 = 2, stage4 = 3, stage5 = 4, stage6 = 5 }
conv_kernel = 3
num_classes = 4
input_channels = 3

[train]
learning_rate = 0.003
batch_size = 4
max_steps = 3
seed = 3

[pipeline]
patch_size = 64
overlap = 0.5
min_tissue = 0.1
folds = 2
seed = 1
"#;

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    /// Dataset plus `config.toml` with `CONFIG` after applying `edit`.
    pub fn new(edit: impl FnOnce(&str) -> String) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dir.path().join("data"), &slides());
        fs::write(dir.path().join("config.toml"), edit(CONFIG)).unwrap();
        Self { dir }
    }

    pub fn standard() -> Self {
        Self::new(str::to_string)
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn config(&self) -> PathBuf {
        self.path().join("config.toml")
    }

    pub fn out(&self) -> PathBuf {
        self.path().join("out")
    }

    pub fn run(&self, args: &[&str]) -> Output {
        let cfg = self.config();
        Command::new(env!("CARGO_BIN_EXE_hvmunet"))
            .arg(args[0])
            .arg("--config")
            .arg(&cfg)
            .args(&args[1..])
            .output()
            .unwrap()
    }

    /// Runs and panics with the captured stderr unless the exit is zero.
    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

/// Relative path to contents for every file under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
