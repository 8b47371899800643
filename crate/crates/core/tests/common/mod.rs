#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use fundus_core::backbone::{BackboneManifest, Registry};
use fundus_core::dataset::ImageTensor;
use fundus_core::seed;
use rand::Rng;

pub const CORPUS_SIZE: usize = 48;
pub const STUB_INPUT: usize = 32;
pub const STUB_GRID: usize = 2;

/// Bright disc on a dark field.
pub fn disc_image(rng: &mut impl Rng) -> ImageTensor {
    let r = rng.random_range(9.0..15.0f64);
    let cx = rng.random_range(r..CORPUS_SIZE as f64 - r);
    let cy = rng.random_range(r..CORPUS_SIZE as f64 - r);
    let bg = rng.random_range(0.08..0.2f32);
    let fg = rng.random_range(0.8..0.95f32);
    let noise: Vec<f32> = (0..CORPUS_SIZE * CORPUS_SIZE).map(|_| rng.random_range(-0.04..0.04f32)).collect();
    ImageTensor::from_fn(CORPUS_SIZE, CORPUS_SIZE, |y, x, c| {
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        let tint = [1.0, 0.9, 0.6][c];
        let v = if d <= r { fg * tint } else { bg };
        v + noise[y * CORPUS_SIZE + x]
    })
}

/// Dark irregular blob on a light field.
pub fn blob_image(rng: &mut impl Rng) -> ImageTensor {
    let rx = rng.random_range(7.0..13.0f64);
    let ry = rng.random_range(7.0..13.0f64);
    let cx = rng.random_range(rx..CORPUS_SIZE as f64 - rx);
    let cy = rng.random_range(ry..CORPUS_SIZE as f64 - ry);
    let wobble = rng.random_range(0.0..0.25f64);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let bg = rng.random_range(0.65..0.8f32);
    let fg = rng.random_range(0.03..0.12f32);
    let noise: Vec<f32> = (0..CORPUS_SIZE * CORPUS_SIZE).map(|_| rng.random_range(-0.04..0.04f32)).collect();
    ImageTensor::from_fn(CORPUS_SIZE, CORPUS_SIZE, |y, x, c| {
        let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
        let edge = 1.0 + wobble * (3.0 * dy.atan2(dx) + phase).sin();
        let tint = [0.9, 0.7, 0.7][c];
        let v = if (dx * dx + dy * dy).sqrt() <= edge { fg } else { bg * tint };
        v + noise[y * CORPUS_SIZE + x]
    })
}

/// `root/Diabetic/*.png` bright discs and `root/Normal/*.png` dark blobs.
pub fn write_corpus(root: &Path, per_class: usize, corpus_seed: u64) {
    let mut rng = seed::rng(corpus_seed);
    for (class, make) in [("Diabetic", disc_image as fn(&mut _) -> ImageTensor), ("Normal", blob_image)] {
        let dir = root.join(class);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            make(&mut rng).save_png(&dir.join(format!("{class}_{i:03}.png"))).unwrap();
        }
    }
}

pub fn stub_manifest(name: &str) -> BackboneManifest {
    BackboneManifest::stub(name, STUB_GRID, STUB_INPUT)
}

/// Registry with stub entries under the given names.
pub fn write_stub_registry(dir: &Path, names: &[&str]) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("registry.json");
    let registry = Registry::new(names.iter().map(|n| stub_manifest(n)).collect(), dir).unwrap();
    registry.save(&path).unwrap();
    path
}

/// Config with stub backbones, 150 training epochs and the given
/// extra TOML appended.
pub fn write_config(dir: &Path, dataset: &Path, out: &Path, registry: &Path, backbones: &[&str], extra: &str) -> PathBuf {
    let selected: Vec<String> = backbones.iter().map(|b| format!("\"{b}\"")).collect();
    let text = format!(
        r#"seed = 2024

[paths]
dataset_root = "{}"
out = "{}"
registry = "{}"

[images]
height = {CORPUS_SIZE}
width = {CORPUS_SIZE}

[backbones]
selected = [{}]

[train]
epochs = 150
{extra}
"#,
        dataset.display(),
        out.display(),
        registry.display(),
        selected.join(", ")
    );
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("pipeline.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Every file under `root` as (relative path, bytes), sorted.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Run directory recorded in `<out>/latest`.
pub fn latest_run(out: &Path) -> PathBuf {
    let rel = fs::read_to_string(out.join("latest")).unwrap();
    out.join(rel.trim())
}
