//! Datasets on disk and synthetic histology-like data.
//!
//! Layout:
//!
//! ```text
//! root/labels.tsv            split <TAB> id <TAB> multi-hot bits, e.g. "train\ta01\t1010"
//! root/{split}/img/{id}.png  8-bit RGB
//! root/{split}/mask/{id}.png 8-bit single channel, values 0..C-1 (optional)
//! ```
//!
//! When an id has no manifest line its labels are read from a bracketed bit
//! string in the id itself, e.g. `patch07[0110]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived, seeded};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "labels.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor,
    pub labels: Vec<bool>,
    /// Row-major `(H, W)` class indices.
    pub mask: Option<Vec<usize>>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }

    pub fn present(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&c| self.labels[c]).collect()
    }
}

pub fn bits_to_string(labels: &[bool]) -> String {
    labels.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn parse_bits(s: &str) -> Option<Vec<bool>> {
    if s.is_empty() {
        return None;
    }
    s.chars()
        .map(|c| match c {
            '0' => Some(false),
            '1' => Some(true),
            _ => None,
        })
        .collect()
}

fn bits_from_id(id: &str) -> Option<Vec<bool>> {
    let open = id.rfind('[')?;
    let close = open + id[open..].find(']')?;
    parse_bits(&id[open + 1..close])
}

fn dataset_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// `(split, id) -> labels` from the manifest; missing manifest is an empty map.
pub fn read_manifest(root: &Path) -> Result<BTreeMap<(String, String), Vec<bool>>> {
    let path = root.join(MANIFEST);
    let mut out = BTreeMap::new();
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(dataset_err(&path, e.to_string())),
    };
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bits = (cols.len() == 3).then(|| parse_bits(cols[2].trim())).flatten();
        match bits {
            Some(b) => {
                out.insert((cols[0].to_string(), cols[1].to_string()), b);
            }
            None => {
                return Err(dataset_err(
                    &path,
                    format!("line {}: expected `split<TAB>id<TAB>bits`", n + 1),
                ))
            }
        }
    }
    Ok(out)
}

fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| dataset_err(path, format!("cannot decode image: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

fn read_mask(path: &Path) -> Result<(usize, usize, Vec<usize>)> {
    let img = image::open(path)
        .map_err(|e| dataset_err(path, format!("cannot decode mask: {e}")))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.pixels().map(|p| usize::from(p[0])).collect()))
}

/// Samples of one split sorted by id. A missing split directory is an empty split.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let img_dir = root.join(split).join("img");
    if !img_dir.is_dir() {
        return Ok(Vec::new());
    }
    let manifest = read_manifest(root)?;
    let mut ids = Vec::new();
    for entry in fs::read_dir(&img_dir).map_err(|e| dataset_err(&img_dir, e.to_string()))? {
        let path = entry.map_err(|e| dataset_err(&img_dir, e.to_string()))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let mut samples = Vec::with_capacity(ids.len());
    let mut width: Option<usize> = None;
    for (index, id) in ids.into_iter().enumerate() {
        let img_path = img_dir.join(format!("{id}.png"));
        let labels = manifest
            .get(&(split.to_string(), id.clone()))
            .cloned()
            .or_else(|| bits_from_id(&id))
            .ok_or_else(|| Error::Sample {
                index,
                id: id.clone(),
                message: format!("no labels in {MANIFEST} or the file name"),
            })?;
        if *width.get_or_insert(labels.len()) != labels.len() {
            return Err(Error::Sample {
                index,
                id,
                message: format!("{} label bits, expected {}", labels.len(), width.unwrap_or(0)),
            });
        }
        let image = read_image(&img_path)?;
        let mask_path = root.join(split).join("mask").join(format!("{id}.png"));
        let mask = if mask_path.is_file() {
            let (h, w, m) = read_mask(&mask_path)?;
            if (h, w) != (image.dim(1), image.dim(2)) {
                return Err(dataset_err(
                    &mask_path,
                    format!("mask is {h}x{w} but image is {}x{}", image.dim(1), image.dim(2)),
                ));
            }
            if let Some(&bad) = m.iter().find(|&&v| v >= labels.len()) {
                return Err(dataset_err(
                    &mask_path,
                    format!("label {bad} outside {} classes", labels.len()),
                ));
            }
            Some(m)
        } else {
            None
        };
        samples.push(Sample {
            id,
            image,
            labels,
            mask,
        });
    }
    Ok(samples)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write splits as PNGs plus a fresh manifest.
pub fn write_dataset(root: &Path, splits: &[(&str, &[Sample])]) -> Result<()> {
    let mut manifest = String::new();
    for (split, samples) in splits {
        let img_dir = root.join(split).join("img");
        fs::create_dir_all(&img_dir)?;
        for s in *samples {
            let (h, w) = (s.height(), s.width());
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let at = |c: usize| to_u8(s.image.data()[(c * h + y as usize) * w + x as usize]);
                image::Rgb([at(0), at(1), at(2)])
            });
            img.save(img_dir.join(format!("{}.png", s.id)))?;
            if let Some(mask) = &s.mask {
                let mask_dir = root.join(split).join("mask");
                fs::create_dir_all(&mask_dir)?;
                let m = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Luma([mask[y as usize * w + x as usize] as u8])
                });
                m.save(mask_dir.join(format!("{}.png", s.id)))?;
            }
            let _ = writeln!(manifest, "{split}\t{}\t{}", s.id, bits_to_string(&s.labels));
        }
    }
    fs::write(root.join(MANIFEST), manifest)?;
    Ok(())
}

/// Stack samples into a `(B, 3, H, W)` batch and `(B, C)` label matrix.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.labels.len());
    let mut img = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut lab = Vec::with_capacity(samples.len() * c);
    for (index, s) in samples.iter().enumerate() {
        if s.image.shape() != [3, h, w] || s.labels.len() != c {
            return Err(Error::Sample {
                index,
                id: s.id.clone(),
                message: format!(
                    "image {:?} with {} labels does not match [3, {h}, {w}] with {c}",
                    s.image.shape(),
                    s.labels.len()
                ),
            });
        }
        img.extend_from_slice(s.image.data());
        lab.extend(s.labels.iter().map(|&b| f64::from(u8::from(b))));
    }
    Ok((
        Tensor::new(vec![samples.len(), 3, h, w], img),
        Tensor::new(vec![samples.len(), c], lab),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub size: usize,
    pub count: usize,
    pub seed: u64,
    /// Inclusive range of classes per image.
    pub classes_per_image: (usize, usize),
    /// Inclusive range of blobs per non-base class.
    pub blobs: (usize, usize),
    /// Blob radius range as a fraction of the image side.
    pub radius: (f64, f64),
    pub id_prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            size: 64,
            count: 200,
            seed: 0,
            classes_per_image: (1, 3),
            blobs: (1, 2),
            radius: (0.15, 0.3),
            id_prefix: "syn".into(),
        }
    }
}

/// Colour and texture of one class family.
struct Family {
    color: [f64; 3],
    freq: f64,
    angle: f64,
    /// Fraction of the texture that is speckle rather than stripes.
    speckle: f64,
}

fn family(c: usize, seed: u64) -> Family {
    const BASE: [([f64; 3], f64, f64, f64); 4] = [
        ([0.55, 0.25, 0.62], 0.9, 0.3, 0.2),
        ([0.92, 0.62, 0.74], 0.25, 1.2, 0.0),
        ([0.18, 0.14, 0.52], 0.0, 0.0, 1.0),
        ([0.86, 0.80, 0.66], 0.08, 2.0, 0.1),
    ];
    if let Some(&(color, freq, angle, speckle)) = BASE.get(c) {
        return Family {
            color,
            freq,
            angle,
            speckle,
        };
    }
    let mut r = derived(seed, 1000 + c as u64);
    Family {
        color: [
            r.random_range(0.1..0.95),
            r.random_range(0.1..0.95),
            r.random_range(0.1..0.95),
        ],
        freq: r.random_range(0.05..1.0),
        angle: r.random_range(0.0..std::f64::consts::PI),
        speckle: r.random_range(0.0..1.0),
    }
}

/// Deterministic images in which each class is a textured colour family.
/// One present class fills the canvas; the others are painted as blobs.
/// Labels are exactly the classes left visible in the mask.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    let (lo, hi) = spec.classes_per_image;
    if spec.num_classes == 0 || spec.size == 0 || lo == 0 || lo > hi || spec.blobs.0 > spec.blobs.1 {
        return Err(Error::InvalidArgument(format!("invalid synthetic spec {spec:?}")));
    }
    let families: Vec<Family> = (0..spec.num_classes).map(|c| family(c, spec.seed)).collect();
    let mut rng = seeded(spec.seed);
    let s = spec.size;
    let mut out = Vec::with_capacity(spec.count);
    for n in 0..spec.count {
        let n_cls = rng.random_range(lo..=hi).min(spec.num_classes);
        let mut classes: Vec<usize> = (0..spec.num_classes).collect();
        for i in 0..n_cls {
            let j = rng.random_range(i..spec.num_classes);
            classes.swap(i, j);
        }
        classes.truncate(n_cls);
        let mut mask = vec![classes[0]; s * s];
        for &c in &classes[1..] {
            for _ in 0..rng.random_range(spec.blobs.0..=spec.blobs.1) {
                let cy = rng.random_range(0.0..s as f64);
                let cx = rng.random_range(0.0..s as f64);
                let ry = rng.random_range(spec.radius.0..=spec.radius.1) * s as f64;
                let rx = rng.random_range(spec.radius.0..=spec.radius.1) * s as f64;
                for y in 0..s {
                    for x in 0..s {
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        let dx = (x as f64 + 0.5 - cx) / rx;
                        if dy * dy + dx * dx <= 1.0 {
                            mask[y * s + x] = c;
                        }
                    }
                }
            }
        }
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut data = vec![0.0; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let f = &families[mask[y * s + x]];
                let u = x as f64 * f.angle.cos() + y as f64 * f.angle.sin();
                let stripes = (f.freq * u + phase).sin();
                let speck: f64 = rng.random_range(-1.0..1.0);
                let tex = (1.0 - f.speckle) * stripes + f.speckle * speck;
                let shade = 1.0 + 0.12 * tex;
                for c in 0..3 {
                    let noise: f64 = rng.random_range(-0.03..0.03);
                    let v = f.color[c] * shade + noise;
                    data[(c * s + y) * s + x] = f64::from(to_u8(v)) / 255.0;
                }
            }
        }
        let mut labels = vec![false; spec.num_classes];
        for &m in &mask {
            labels[m] = true;
        }
        out.push(Sample {
            id: format!("{}{n:05}", spec.id_prefix),
            image: Tensor::new(vec![3, s, s], data),
            labels,
            mask: Some(mask),
        });
    }
    Ok(out)
}

/// Path of a sample image inside a dataset root.
pub fn image_path(root: &Path, split: &str, id: &str) -> PathBuf {
    root.join(split).join("img").join(format!("{id}.png"))
}
