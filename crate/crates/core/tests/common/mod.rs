//! Synthetic scenes shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use msfuse::evaluation::{Condition, GroundTruthBox, ImageInfo};
use msfuse::pipeline::{
    save_detections, write_json, DetectionFile, GroundTruthFile, ManifestEntry, SCHEMA_VERSION,
};
use msfuse::vcm::ImageBuffer;
use msfuse::{BBox, Detection, Modality};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WIDTH: u32 = 96;
pub const HEIGHT: u32 = 72;

pub struct Scene {
    pub root: PathBuf,
    pub rgb: PathBuf,
    pub thermal: PathBuf,
    pub gt: PathBuf,
}

impl Scene {
    pub fn at(root: &Path) -> Self {
        Self {
            root: root.to_owned(),
            rgb: root.join("det_rgb.json"),
            thermal: root.join("det_thermal.json"),
            gt: root.join("gt.json"),
        }
    }
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    let mut c = b.to_array();
    for v in &mut c {
        *v = round3(*v + rng.random_range(-amount..=amount));
    }
    let x1 = c[0].clamp(0.0, WIDTH as f64 - 2.0);
    let y1 = c[1].clamp(0.0, HEIGHT as f64 - 2.0);
    let x2 = c[2].clamp(x1 + 1.0, WIDTH as f64);
    let y2 = c[3].clamp(y1 + 1.0, HEIGHT as f64);
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(8..16) as f64 + 0.5;
    let h = rng.random_range(18..30) as f64 + 0.25;
    let x1 = round3(rng.random_range(0.0..(WIDTH as f64 - w)));
    let y1 = round3(rng.random_range(0.0..(HEIGHT as f64 - h)));
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

fn paint(img: &mut ImageBuffer, b: &BBox, rgb: [u8; 3]) {
    let [x1, y1, x2, y2] = b.to_array();
    for y in (y1 as u32)..(y2.ceil() as u32).min(img.height()) {
        for x in (x1 as u32)..(x2.ceil() as u32).min(img.width()) {
            img.set_pixel(x, y, rgb);
        }
    }
}

/// Writes `n` synthetic image pairs, both detection files and ground truth
/// under `root`. Even-indexed images are daytime.
pub fn write_scene(root: &Path, seed: u64, n: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Vec::new();
    let mut rgb = Vec::new();
    let mut thermal = Vec::new();
    let mut gt = Vec::new();

    for i in 0..n {
        let id = format!("img_{i:03}");
        let day = i % 2 == 0;
        let condition = if day {
            Condition::Day
        } else {
            Condition::Night
        };
        let entry = ManifestEntry {
            image_id: id.clone(),
            path_rgb: format!("{id}_rgb.png"),
            path_thermal: format!("{id}_thermal.png"),
            condition,
        };

        let mut img_rgb = ImageBuffer::filled(WIDTH, HEIGHT, [0, 0, 0]).unwrap();
        let mut img_t = ImageBuffer::filled(WIDTH, HEIGHT, [0, 0, 0]).unwrap();
        let dim = if day { 1 } else { 4 };
        for y in 0..HEIGHT {
            for x in 0..WIDTH {
                let n: u8 = rng.random_range(0..12);
                img_rgb.set_pixel(
                    x,
                    y,
                    [(x as u8 * 2 + n) / dim, (y as u8 * 3) / dim, 90 / dim],
                );
                let g = 30 + (y / 2) as u8 + n;
                img_t.set_pixel(x, y, [g, g, g]);
            }
        }

        let persons = rng.random_range(1..=3);
        for _ in 0..persons {
            let b = random_box(&mut rng);
            paint(&mut img_rgb, &b, [200 / dim, 150 / dim, 120 / dim]);
            paint(&mut img_t, &b, [220, 220, 220]);
            gt.push(GroundTruthBox {
                image_id: id.clone(),
                bbox: b,
                condition,
                ignore: false,
            });
            let p_rgb = if day { 0.9 } else { 0.6 };
            if rng.random_bool(p_rgb) {
                let s = round3(rng.random_range(0.4..0.98));
                rgb.push(
                    Detection::new(jitter(&mut rng, &b, 1.5), s, Modality::Rgb, "person", &id)
                        .unwrap(),
                );
            }
            if rng.random_bool(0.9) {
                let s = round3(rng.random_range(0.5..0.99));
                thermal.push(
                    Detection::new(
                        jitter(&mut rng, &b, 1.5),
                        s,
                        Modality::Thermal,
                        "person",
                        &id,
                    )
                    .unwrap(),
                );
            }
        }
        if rng.random_bool(0.5) {
            let s = round3(rng.random_range(0.05..0.5));
            rgb.push(
                Detection::new(random_box(&mut rng), s, Modality::Rgb, "person", &id).unwrap(),
            );
        }
        if rng.random_bool(0.4) {
            let s = round3(rng.random_range(0.05..0.5));
            thermal.push(
                Detection::new(random_box(&mut rng), s, Modality::Thermal, "person", &id).unwrap(),
            );
        }

        img_rgb.save_png(&root.join(&entry.path_rgb)).unwrap();
        img_t.save_png(&root.join(&entry.path_thermal)).unwrap();
        manifest.push(entry);
    }

    let scene = Scene::at(root);
    save_detections(
        &scene.rgb,
        &DetectionFile {
            modality: Modality::Rgb,
            detections: rgb,
            manifest: manifest.clone(),
        },
    )
    .unwrap();
    save_detections(
        &scene.thermal,
        &DetectionFile {
            modality: Modality::Thermal,
            detections: thermal,
            manifest: manifest.clone(),
        },
    )
    .unwrap();
    write_json(
        &scene.gt,
        &GroundTruthFile {
            schema_version: SCHEMA_VERSION.into(),
            annotations: gt,
            images: manifest
                .iter()
                .map(|m| ImageInfo {
                    image_id: m.image_id.clone(),
                    condition: m.condition,
                })
                .collect(),
        },
    )
    .unwrap();
    scene
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

pub const GOLDEN_SEED: u64 = 7;
pub const GOLDEN_SCENE_SEED: u64 = 2024;
