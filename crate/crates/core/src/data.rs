//! Datasets: a synthetic fine-grained stand-in and a PPM image-folder loader.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::roi::{Rect, REFERENCE_INPUT, REFERENCE_SCALES};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub name: String,
    /// `(1, 3, size, size)`, RGB in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub gt: Option<Rect>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub class_names: Vec<String>,
    pub split: Split,
    pub image_size: usize,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stacks the listed items into an image batch plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let images: Vec<Tensor<f32>> = indices.iter().map(|&i| self.items[i].image.clone()).collect();
        let labels = indices.iter().map(|&i| self.items[i].label).collect();
        Ok((Tensor::stack(&images)?, labels))
    }

    /// Moves the last `per_class` items of every class into a test split.
    pub fn split_off_test(self, per_class: usize) -> (Dataset, Dataset) {
        let mut remaining = vec![0usize; self.num_classes()];
        for item in &self.items {
            remaining[item.label] += 1;
        }
        let mut seen = vec![0usize; self.num_classes()];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for item in self.items {
            seen[item.label] += 1;
            if seen[item.label] + per_class > remaining[item.label] {
                test.push(item);
            } else {
                train.push(item);
            }
        }
        let make = |items, split| Dataset {
            items,
            class_names: self.class_names.clone(),
            split,
            image_size: self.image_size,
        };
        (make(train, Split::Train), make(test, Split::Test))
    }

    /// Writes the dataset as class directories of PPM files with `.box` sidecars.
    pub fn write_folder(&self, dir: &Path) -> Result<()> {
        for class in &self.class_names {
            let d = dir.join(class);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for item in &self.items {
            let class_dir = dir.join(&self.class_names[item.label]);
            write_ppm(&class_dir.join(format!("{}.ppm", item.name)), &item.image)?;
            if let Some(gt) = item.gt {
                let path = class_dir.join(format!("{}.box", item.name));
                let line = format!("{} {} {} {}\n", gt.x1.round(), gt.y1.round(), gt.x2.round(), gt.y2.round());
                fs::write(&path, line).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }
}

/// Knobs of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub size: usize,
    /// Side of the class patch relative to the image side.
    pub patch_fraction: f32,
    /// Patches with a class-neutral texture placed elsewhere in the image.
    pub distractors: usize,
    /// Amplitude of per-pixel uniform noise.
    pub noise: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 8,
            images_per_class: 100,
            size: 96,
            patch_fraction: REFERENCE_SCALES[0] / REFERENCE_INPUT as f32,
            distractors: 2,
            noise: 0.08,
        }
    }
}

impl SyntheticConfig {
    pub fn patch_side(&self) -> usize {
        ((self.patch_fraction * self.size as f32).round() as usize).clamp(2, self.size)
    }
}

const ORIENTATIONS: usize = 4;
const PALETTE: [[f32; 3]; 2] = [[1.0, 0.4, 0.3], [0.3, 0.6, 1.0]];

/// Stripe orientation (radians) and period (pixels) of a class texture.
fn class_texture(class: usize) -> (f32, f32) {
    let theta = std::f32::consts::PI * (class % ORIENTATIONS) as f32 / ORIENTATIONS as f32;
    let period = 6.0 + 4.0 * (class / ORIENTATIONS) as f32;
    (theta, period)
}

struct Canvas {
    size: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn background(size: usize, rng: &mut Rng) -> Self {
        let plane = size * size;
        let mut data = vec![0.0f32; 3 * plane];
        let base: Vec<f32> = (0..3).map(|_| rng.uniform_range(0.3, 0.6) as f32).collect();
        for c in 0..3 {
            data[c * plane..(c + 1) * plane].fill(base[c]);
        }
        for _ in 0..6 {
            let cy = rng.uniform_range(0.0, size as f64) as f32;
            let cx = rng.uniform_range(0.0, size as f64) as f32;
            let sigma = rng.uniform_range(0.1, 0.35) as f32 * size as f32;
            let amp: Vec<f32> = (0..3).map(|_| rng.uniform_range(-0.1, 0.1) as f32).collect();
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    let g = (-d2 / (2.0 * sigma * sigma)).exp();
                    for c in 0..3 {
                        data[c * plane + y * size + x] += amp[c] * g;
                    }
                }
            }
        }
        Canvas { size, data }
    }

    fn paint(&mut self, x0: usize, y0: usize, side: usize, mut texel: impl FnMut(usize, usize) -> [f32; 3]) {
        let plane = self.size * self.size;
        for y in 0..side {
            for x in 0..side {
                let v = texel(x, y);
                for (c, value) in v.into_iter().enumerate() {
                    self.data[c * plane + (y0 + y) * self.size + x0 + x] = value;
                }
            }
        }
    }

    fn finish(mut self, noise: f32, rng: &mut Rng) -> Tensor<f32> {
        for v in &mut self.data {
            *v = (*v + rng.uniform_range(-1.0, 1.0) as f32 * noise).clamp(0.0, 1.0);
        }
        let s = self.size;
        Tensor::new(Shape::new(1, 3, s, s), self.data).expect("canvas size")
    }
}

fn overlaps(a: (usize, usize), b: (usize, usize), side: usize) -> bool {
    a.0 < b.0 + side && b.0 < a.0 + side && a.1 < b.1 + side && b.1 < a.1 + side
}

/// Structured-noise images, each carrying one striped patch whose
/// orientation and period encode the class. The patch box is the GT.
pub fn gen_synthetic(config: &SyntheticConfig, rng: &mut Rng) -> Result<Dataset> {
    let size = config.size;
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::Config(format!("synthetic image size {size} must be a positive multiple of 32")));
    }
    if config.num_classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    let side = config.patch_side();
    let span = size - side;
    let mut items = Vec::with_capacity(config.num_classes * config.images_per_class);
    for label in 0..config.num_classes {
        let (theta, period) = class_texture(label);
        let (dx, dy) = (theta.cos(), theta.sin());
        for k in 0..config.images_per_class {
            let mut canvas = Canvas::background(size, rng);
            let pos = (rng.below(span + 1), rng.below(span + 1));
            for _ in 0..config.distractors {
                let mut d = (rng.below(span + 1), rng.below(span + 1));
                for _ in 0..8 {
                    if !overlaps(d, pos, side) {
                        break;
                    }
                    d = (rng.below(span + 1), rng.below(span + 1));
                }
                let tint = rng.uniform_range(0.3, 0.7) as f32;
                let cell = 2 + rng.below(3);
                canvas.paint(d.0, d.1, side, |x, y| {
                    let on = ((x / cell) + (y / cell)).is_multiple_of(2);
                    let v = if on { tint + 0.3 } else { tint - 0.3 };
                    [v, v, v]
                });
            }
            let phase = rng.uniform_range(0.0, std::f64::consts::TAU) as f32;
            let hue = PALETTE[(label / ORIENTATIONS) % PALETTE.len()];
            let tint: Vec<f32> = hue.iter().map(|&h| h * rng.uniform_range(0.85, 1.0) as f32).collect();
            canvas.paint(pos.0, pos.1, side, |x, y| {
                let t = std::f32::consts::TAU * (x as f32 * dx + y as f32 * dy) / period + phase;
                let v = 0.5 + 0.45 * t.sin();
                [v * tint[0], v * tint[1], v * tint[2]]
            });
            let (x0, y0) = (pos.0 as f32, pos.1 as f32);
            items.push(Item {
                name: format!("c{label:02}_{k:04}"),
                image: canvas.finish(config.noise, rng),
                label,
                gt: Some(Rect::new(x0, y0, x0 + side as f32, y0 + side as f32)),
            });
        }
    }
    Ok(Dataset {
        items,
        class_names: (0..config.num_classes).map(|c| format!("class{c:02}")).collect(),
        split: Split::Train,
        image_size: size,
    })
}

/// Reads a PPM as a `(1, 3, h, w)` tensor in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| {
        rgb.get_pixel(x as u32, y as u32)[c]
    }))
}

/// Writes the first item of `image` as an 8-bit binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let img = RgbImage::from_fn(s.w() as u32, s.h() as u32, |x, y| {
        let px = |c| (image.at([0, c, y as usize, x as usize]).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save_with_format(path, ImageFormat::Pnm).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Bilinear resize of an image tensor to `size x size`.
pub fn resize_image(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.h() == size && s.w() == size {
        return Ok(image.clone());
    }
    let tape = Tape::<f32>::new();
    let x = tape.constant(image.clone());
    let y = tape.bilinear_resize(x, size, size)?;
    Ok((*tape.value(y)).clone())
}

/// Parses a box sidecar: one `x1 y1 x2 y2` line per box. Several boxes are
/// merged into their bounding rectangle.
pub fn parse_box_file(path: &Path, text: &str) -> Result<Option<Rect>> {
    let mut merged: Option<Rect> = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let v = line
            .split_whitespace()
            .map(|t| t.parse::<i64>().map_err(|_| err(format!("`{t}` is not an integer"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != 4 {
            return Err(err(format!("expected 4 integers, found {}", v.len())));
        }
        if v[0] >= v[2] || v[1] >= v[3] || v.iter().any(|&c| c < 0) {
            return Err(err(format!("box {v:?} is empty or negative")));
        }
        let r = Rect::new(v[0] as f32, v[1] as f32, v[2] as f32, v[3] as f32);
        merged = Some(match merged {
            None => r,
            Some(m) => Rect::new(m.x1.min(r.x1), m.y1.min(r.y1), m.x2.max(r.x2), m.y2.max(r.y2)),
        });
    }
    Ok(merged)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads `root/<class>/<name>.ppm` (plus optional `<name>.box`), classes in
/// lexical order, resizing every image to `size x size`.
pub fn load_image_folder(root: &Path, size: usize, split: Split) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Format {
            path: root.to_path_buf(),
            reason: "no class directories".into(),
        });
    }
    let mut class_names = Vec::new();
    let mut items = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let class = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let images: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
            .collect();
        if images.is_empty() {
            return Err(Error::Format {
                path: dir.clone(),
                reason: format!("class `{class}` has no .ppm images"),
            });
        }
        for path in images {
            let raw = read_ppm(&path)?;
            let (h, w) = (raw.shape().h(), raw.shape().w());
            let box_path = path.with_extension("box");
            let gt = if box_path.exists() {
                let text = fs::read_to_string(&box_path).map_err(|e| Error::io(&box_path, e))?;
                parse_box_file(&box_path, &text)?.map(|r| {
                    let (sx, sy) = (size as f32 / w as f32, size as f32 / h as f32);
                    Rect::new(r.x1 * sx, r.y1 * sy, r.x2 * sx, r.y2 * sy).clip(size)
                })
            } else {
                None
            };
            items.push(Item {
                name: path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                image: resize_image(&raw, size)?,
                label,
                gt,
            });
        }
        class_names.push(class);
    }
    Ok(Dataset {
        items,
        class_names,
        split,
        image_size: size,
    })
}
