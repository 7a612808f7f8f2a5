//! Bi-temporal image-pair datasets: on-disk ingestion and a seeded synthetic
//! generator.
//!
//! On disk a split lives at `<root>/<split>/{A,B,label}/<stem>.<ext>` where
//! `A` holds the pre-change images, `B` the post-change images and `label` the
//! binary change masks. Supported containers are PNG and binary PPM/PGM.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Label pixels strictly above this value are "change".
pub const LABEL_THRESHOLD: u8 = 127;
const EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];
const SUBDIRS: [&str; 3] = ["A", "B", "label"];

/// Row-major binary `H × W` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![0; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn changed(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// One (pre, post, label) triple. Images are `H × W × 3` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeSample {
    pub pre: Tensor<f32>,
    pub post: Tensor<f32>,
    pub label: Mask,
}

impl ChangeSample {
    pub fn validate(&self) -> Result<()> {
        let (h, w, _) = self.pre.hwc("sample")?;
        if self.post.shape() != self.pre.shape() || self.label.height != h || self.label.width != w {
            return Err(Error::Ingestion(format!(
                "pre {:?}, post {:?} and label {}×{} disagree in size",
                self.pre.shape(),
                self.post.shape(),
                self.label.height,
                self.label.width
            )));
        }
        if !self.label.is_binary() {
            return Err(Error::Ingestion("label is not binary".into()));
        }
        Ok(())
    }

    pub fn size(&self) -> (usize, usize) {
        (self.label.height, self.label.width)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub stem: String,
    pub pre: PathBuf,
    pub post: PathBuf,
    pub label: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: String,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Ingestion(format!(
                "stem `{stem}` appears twice in {}: {} and {}",
                dir.display(),
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Indexes `<root>/<split>`, matching files across `A/`, `B/` and `label/`
/// by stem, in lexicographic stem order.
pub fn scan(root: &Path, split: &str) -> Result<DatasetIndex> {
    let base = root.join(split);
    if !base.is_dir() {
        return Err(Error::Ingestion(format!("split directory {} does not exist", base.display())));
    }
    let lists = SUBDIRS.map(|d| list_images(&base.join(d)));
    let [a, b, l] = lists;
    let (a, b, l) = (a?, b?, l?);
    let stems: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).chain(l.keys()).collect();
    let mut entries = Vec::with_capacity(stems.len());
    for stem in stems {
        let found = [a.get(stem), b.get(stem), l.get(stem)];
        let missing: Vec<&str> = SUBDIRS.iter().zip(&found).filter(|(_, f)| f.is_none()).map(|(d, _)| *d).collect();
        if !missing.is_empty() {
            return Err(Error::Ingestion(format!(
                "stem `{stem}` has no counterpart in {}",
                missing.iter().map(|d| format!("{d}/")).collect::<Vec<_>>().join(", ")
            )));
        }
        let [Some(pre), Some(post), Some(label)] = found else { unreachable!() };
        entries.push(IndexEntry { stem: stem.clone(), pre: pre.clone(), post: post.clone(), label: label.clone() });
    }
    Ok(DatasetIndex { root: root.to_owned(), split: split.to_owned(), entries })
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Ingestion(format!("cannot decode {}: {e}", path.display())))
}

/// Decodes an 8-bit RGB or grayscale image into `H × W × 3` values in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?;
    let rgb: RgbImage = match img {
        DynamicImage::ImageRgb8(im) => im,
        DynamicImage::ImageLuma8(_) => img.to_rgb8(),
        other => {
            return Err(Error::Ingestion(format!(
                "{} has unsupported pixel format {:?}; expected 8-bit RGB or grayscale",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Decodes an 8-bit mask; any channel above [`LABEL_THRESHOLD`] marks change.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = open(path)?;
    let (w, h, data) = match img {
        DynamicImage::ImageLuma8(im) => {
            let (w, h) = im.dimensions();
            (w, h, im.into_raw().into_iter().map(|v| u8::from(v > LABEL_THRESHOLD)).collect())
        }
        DynamicImage::ImageRgb8(im) => {
            let (w, h) = im.dimensions();
            let data = im.pixels().map(|p| u8::from(p.0.iter().any(|&v| v > LABEL_THRESHOLD))).collect();
            (w, h, data)
        }
        other => {
            return Err(Error::Ingestion(format!(
                "{} has unsupported pixel format {:?}; expected 8-bit grayscale or RGB",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(Mask { height: h as usize, width: w as usize, data })
}

/// Loads entry `i` of `index`.
pub fn load(index: &DatasetIndex, i: usize) -> Result<ChangeSample> {
    let e = index
        .entries
        .get(i)
        .ok_or_else(|| Error::Usage(format!("sample {i} out of range for {} entries", index.len())))?;
    let sample = ChangeSample { pre: read_rgb(&e.pre)?, post: read_rgb(&e.post)?, label: read_mask(&e.label)? };
    sample.validate().map_err(|err| Error::Ingestion(format!("sample `{}`: {err}", e.stem)))?;
    Ok(sample)
}

pub fn load_all(index: &DatasetIndex) -> Result<Vec<ChangeSample>> {
    (0..index.len()).map(|i| load(index, i)).collect()
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    ImageFormat::from_path(path).map_err(|_| Error::Usage(format!("unsupported output extension: {}", path.display())))
}

/// Quantizes `[0, 1]` values to 8 bits and writes an RGB image.
pub fn write_rgb(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w, c) = t.hwc("write_rgb")?;
    if c != 3 {
        return Err(Error::dim("write_rgb", format!("expected 3 channels, got {c}")));
    }
    let raw = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    img.save_with_format(path, format_for(path)?).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
}

/// Writes a mask as an 8-bit grayscale image with values {0, 255}.
pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    let raw = m.data.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(m.width as u32, m.height as u32, raw).expect("buffer matches dimensions");
    img.save_with_format(path, format_for(path)?).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
}

/// Writes samples as a `<root>/<split>/{A,B,label}/<stem>.png` tree.
pub fn write_split(root: &Path, split: &str, samples: &[ChangeSample]) -> Result<()> {
    let base = root.join(split);
    for d in SUBDIRS {
        std::fs::create_dir_all(base.join(d)).map_err(|e| Error::io(base.join(d), e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:04}.png");
        write_rgb(&base.join("A").join(&stem), &s.pre)?;
        write_rgb(&base.join("B").join(&stem), &s.post)?;
        write_mask(&base.join("label").join(&stem), &s.label)?;
    }
    Ok(())
}

/// An inserted change region; membership is tested at pixel centres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SynthShape {
    Rect { top: usize, left: usize, height: usize, width: usize },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl SynthShape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            SynthShape::Rect { top, left, height, width } => {
                (top..top + height).contains(&y) && (left..left + width).contains(&x)
            }
            SynthShape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

const BACKGROUND_GRID: usize = 4;
const PRE_NOISE: f64 = 0.02;

/// One synthetic scene together with the shapes painted into it.
///
/// The background is a smooth field (a coarse random grid, bilinearly
/// upsampled) shared by both images. `pre` gets independent low-amplitude
/// noise; `post` gets 1 to 4 rectangles or ellipses painted in a dark or
/// bright colour. The label is the exact union of the shapes.
pub fn synth_scene<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Result<(ChangeSample, Vec<SynthShape>)> {
    if size < 16 {
        return Err(Error::Config(format!("synthetic tile size must be at least 16, got {size}")));
    }
    let coarse = Tensor::<f32>::uniform(&[BACKGROUND_GRID, BACKGROUND_GRID, 3], 0.25, 0.75, rng);
    let background = kernels::bilinear_resize(&coarse, size, size)?;

    let count = rng.random_range(1..=4);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = if rng.random_bool(0.5) {
            let lo = size.div_ceil(6);
            let hi = size / 3;
            let height = rng.random_range(lo..=hi);
            let width = rng.random_range(lo..=hi);
            SynthShape::Rect {
                top: rng.random_range(0..=size - height),
                left: rng.random_range(0..=size - width),
                height,
                width,
            }
        } else {
            let (lo, hi) = (size as f64 / 10.0, size as f64 / 6.0);
            let ry = rng.random_range(lo..=hi);
            let rx = rng.random_range(lo..=hi);
            SynthShape::Ellipse {
                cy: rng.random_range(ry..=size as f64 - ry),
                cx: rng.random_range(rx..=size as f64 - rx),
                ry,
                rx,
            }
        };
        shapes.push(shape);
    }
    let colours: Vec<[f32; 3]> = shapes
        .iter()
        .map(|_| {
            let bright = rng.random_bool(0.5);
            std::array::from_fn(|_| if bright { rng.random_range(0.85..=1.0) } else { rng.random_range(0.0..=0.15) })
        })
        .collect();

    let mut pre = background.clone();
    for v in pre.data_mut() {
        let n: f64 = rng.random_range(-PRE_NOISE..=PRE_NOISE);
        *v = (*v + n as f32).clamp(0.0, 1.0);
    }
    let mut post = background;
    let mut label = Mask::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            // Later shapes paint over earlier ones.
            if let Some(i) = shapes.iter().rposition(|s| s.contains(y, x)) {
                label.data[y * size + x] = 1;
                let px = &mut post.data_mut()[(y * size + x) * 3..][..3];
                px.copy_from_slice(&colours[i]);
            }
        }
    }
    Ok((ChangeSample { pre, post, label }, shapes))
}

/// `n` synthetic `size × size` samples drawn from `rng`.
pub fn synth<R: Rng + ?Sized>(rng: &mut R, n: usize, size: usize) -> Result<Vec<ChangeSample>> {
    (0..n).map(|_| synth_scene(rng, size).map(|(s, _)| s)).collect()
}
