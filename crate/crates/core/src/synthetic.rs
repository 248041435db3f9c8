//! Synthetic two-domain segmentation data whose domain gap is purely stylistic.
//!
//! A scene is a background plus random rectangles and disks. Every class has
//! its own grayscale texture; the texture field is then mapped through a
//! per-channel affine "style" (domain base plus per-image jitter) and clamped
//! to `[0, 1]`. Geometry and texture come from one seed stream and style from
//! another, so label maps never depend on the style fields.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::netpbm;
use crate::rng::rng_for;
use crate::tensor::Tensor;

const GRAY_CENTER: f32 = 0.5;
const GRAY_SCALE: f32 = 0.25;

/// Integer class per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid(format!(
                "label map {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }
}

/// `[C, H, W]` image in `[0, 1]` with a shared label map.
///
/// Augmentations clone the `Arc`, so an augmented sample points at the very
/// same label object as its source.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor<f32>,
    pub label: Arc<LabelMap>,
}

impl LabeledImage {
    pub fn new(image: Tensor<f32>, label: LabelMap) -> Result<Self> {
        Self::with_shared_label(image, Arc::new(label))
    }

    pub fn with_shared_label(image: Tensor<f32>, label: Arc<LabelMap>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[1] != label.height || s[2] != label.width {
            return Err(Error::ShapeMismatch {
                op: "labeled image",
                left: s.to_vec(),
                right: vec![label.height, label.width],
            });
        }
        Ok(Self { image, label })
    }

    /// Same label object, new pixels.
    pub fn restyled(&self, image: Tensor<f32>) -> Result<Self> {
        Self::with_shared_label(image, Arc::clone(&self.label))
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }
}

/// Style and layout parameters of one synthetic domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub base_mean: [f32; 3],
    pub base_std: [f32; 3],
    /// Std of the per-image, per-channel additive mean jitter.
    pub jitter_mean: f32,
    /// Std of the per-image, per-channel log-scale std jitter.
    pub jitter_std: f32,
    pub num_classes: usize,
    /// Inclusive range of foreground shapes per image.
    pub shapes_per_image: (usize, usize),
    /// `(height, width)`.
    pub image_size: (usize, usize),
}

impl DomainSpec {
    pub fn source() -> Self {
        Self {
            base_mean: [0.45, 0.40, 0.35],
            base_std: [0.18; 3],
            jitter_mean: 0.03,
            jitter_std: 0.1,
            num_classes: 4,
            shapes_per_image: (2, 5),
            image_size: (64, 64),
        }
    }

    pub fn target() -> Self {
        Self {
            base_mean: [0.25, 0.30, 0.45],
            base_std: [0.28; 3],
            ..Self::source()
        }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.image_size = (height, width);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_std.iter().any(|s| *s <= 0.0) {
            return Err(invalid("domain base_std must be positive"));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(invalid("domain needs between 2 and 255 classes"));
        }
        if self.shapes_per_image.0 > self.shapes_per_image.1 {
            return Err(invalid("shapes_per_image range is reversed"));
        }
        if self.image_size.0 < 2 || self.image_size.1 < 2 {
            return Err(invalid("images must be at least 2x2"));
        }
        Ok(())
    }

    fn describe(&self, out: &mut String) {
        let v3 = |v: [f32; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        let _ = writeln!(out, "base_mean = {}", v3(self.base_mean));
        let _ = writeln!(out, "base_std = {}", v3(self.base_std));
        let _ = writeln!(out, "jitter_mean = {}", self.jitter_mean);
        let _ = writeln!(out, "jitter_std = {}", self.jitter_std);
        let _ = writeln!(out, "num_classes = {}", self.num_classes);
        let _ = writeln!(
            out,
            "shapes_per_image = {},{}",
            self.shapes_per_image.0, self.shapes_per_image.1
        );
        let _ = writeln!(out, "image_size = {},{}", self.image_size.0, self.image_size.1);
    }
}

/// Grayscale texture value of `class` at pixel `(y, x)` before noise.
fn texture(class: u8, y: usize, x: usize) -> f32 {
    if class == 0 {
        return 0.5;
    }
    let kind = (class - 1) % 3;
    let period = 2 + 2 * ((class as usize - 1) / 3);
    let on = |v: usize| (v / period) % 2 == 0;
    match kind {
        0 => 0.25 + if on(y) { 0.12 } else { -0.12 },
        1 => 0.75 + if on(x) { 0.12 } else { -0.12 },
        _ => 0.5 + if on(y) ^ on(x) { 0.2 } else { -0.2 },
    }
}

/// Renders one labeled scene from `seed`.
pub fn generate_scene(spec: &DomainSpec, seed: u64) -> Result<LabeledImage> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut geo = rng_for(seed, &[0]);
    let mut labels = vec![0u8; h * w];
    let count = geo.gen_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
    let short = h.min(w) as f32;
    for _ in 0..count {
        let class = geo.gen_range(1..spec.num_classes) as u8;
        let cy = geo.gen_range(0.0..h as f32);
        let cx = geo.gen_range(0.0..w as f32);
        let ry = geo.gen_range(short / 8.0..=short / 4.0);
        let rx = geo.gen_range(short / 8.0..=short / 4.0);
        let disk = geo.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                let inside = if disk {
                    dy * dy + dx * dx <= ry * ry
                } else {
                    dy.abs() <= ry && dx.abs() <= rx
                };
                if inside {
                    labels[y * w + x] = class;
                }
            }
        }
    }
    let gray: Vec<f32> = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let noise = geo.gen_range(-0.03f32..=0.03);
            (texture(c, i / w, i % w) + noise - GRAY_CENTER) / GRAY_SCALE
        })
        .collect();

    let mut style = rng_for(seed, &[1]);
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        let jm: f32 = style.sample::<f32, _>(StandardNormal) * spec.jitter_mean;
        let js: f32 = style.sample::<f32, _>(StandardNormal) * spec.jitter_std;
        let mean = spec.base_mean[c] + jm;
        let std = spec.base_std[c] * js.exp();
        for (dst, g) in data[c * h * w..(c + 1) * h * w].iter_mut().zip(&gray) {
            *dst = (mean + std * g).clamp(0.0, 1.0);
        }
    }
    LabeledImage::new(Tensor::new(vec![3, h, w], data)?, LabelMap::new(h, w, labels)?)
}

/// Indexable collection of labeled images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<LabeledImage>,
    /// Generation seed per item when known.
    pub seeds: Vec<u64>,
    pub spec: Option<DomainSpec>,
    /// File stems when loaded from disk.
    pub names: Vec<String>,
}

impl Dataset {
    pub fn from_items(items: Vec<LabeledImage>) -> Self {
        Self {
            items,
            seeds: Vec::new(),
            spec: None,
            names: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&LabeledImage> {
        self.items.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledImage> {
        self.items.iter()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.spec.as_ref().map(|s| s.num_classes)
    }

    /// Writes `NNNNN.ppm` / `NNNNN.pgm` pairs plus `manifest.txt`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::from("# advstyle dataset\n");
        let _ = writeln!(manifest, "count = {}", self.len());
        if let Some(spec) = &self.spec {
            spec.describe(&mut manifest);
        }
        for (i, item) in self.items.iter().enumerate() {
            netpbm::write_ppm(&dir.join(format!("{i:05}.ppm")), &item.image)?;
            netpbm::write_pgm(
                &dir.join(format!("{i:05}.pgm")),
                item.label.width,
                item.label.height,
                &item.label.data,
            )?;
            match self.seeds.get(i) {
                Some(s) => {
                    let _ = writeln!(manifest, "item {i:05} seed {s}");
                }
                None => {
                    let _ = writeln!(manifest, "item {i:05}");
                }
            }
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Loads every `*.ppm` with a matching `*.pgm` in name order.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut stems: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                name.strip_suffix(".ppm").map(str::to_string)
            })
            .collect();
        stems.sort();
        let mut items = Vec::with_capacity(stems.len());
        for stem in &stems {
            let image = netpbm::read_ppm(&dir.join(format!("{stem}.ppm")))?;
            let (w, h, values) = netpbm::read_pgm(&dir.join(format!("{stem}.pgm")))?;
            items.push(LabeledImage::new(image, LabelMap::new(h, w, values)?)?);
        }
        Ok(Self {
            names: stems,
            ..Self::from_items(items)
        })
    }

    /// File stems of a loaded dataset, else the names [`Dataset::save_dir`] uses.
    pub fn ids(&self) -> Vec<String> {
        if self.names.len() == self.len() {
            return self.names.clone();
        }
        (0..self.len()).map(|i| format!("{i:05}")).collect()
    }
}

/// `n` scenes with seeds `seed..seed + n`.
pub fn make_domain(spec: &DomainSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| seed + i).collect();
    let items = seeds
        .iter()
        .map(|&s| generate_scene(spec, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        items,
        seeds,
        spec: Some(spec.clone()),
        names: Vec::new(),
    })
}
