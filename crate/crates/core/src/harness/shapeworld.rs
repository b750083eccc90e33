//! ShapeWorld: a deterministic synthetic detection dataset.
//!
//! Each image is uniform noise with 1–6 solid shapes (circle, square,
//! triangle) painted on top. Shapes never share a pixel and their boxes
//! overlap by at most `max_iou`, so every annotation is the exact bounding
//! box of the shape's visible pixels. Image `i` draws from its own SplitMix64
//! stream, so any subset of a dataset can be regenerated independently.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, CornerBox};
use crate::error::{Error, Result};
use crate::multibox::GroundTruth;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    /// Detection label in `1..=3`.
    pub fn label(self) -> usize {
        self as usize + 1
    }

    pub fn from_label(label: usize) -> Option<Shape> {
        Shape::ALL.get(label.checked_sub(1)?).copied()
    }

    fn covers(self, side: u32, dx: u32, dy: u32) -> bool {
        let s = side as f64;
        let (px, py) = (dx as f64 + 0.5, dy as f64 + 0.5);
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let r = s / 2.0;
                (px - r).powi(2) + (py - r).powi(2) <= r * r
            }
            Shape::Triangle => (px - s / 2.0).abs() <= py / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeWorldSpec {
    pub seed: u64,
    pub image_size: u32,
    pub num_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that an object is drawn from the small size range.
    pub small_fraction: f64,
    pub small_side: [u32; 2],
    pub large_side: [u32; 2],
    pub max_iou: f64,
    pub max_retries: usize,
}

impl Default for ShapeWorldSpec {
    fn default() -> Self {
        ShapeWorldSpec {
            seed: 0,
            image_size: 300,
            num_images: 500,
            min_objects: 1,
            max_objects: 6,
            small_fraction: 0.5,
            small_side: [10, 30],
            large_side: [60, 180],
            max_iou: 0.3,
            max_retries: 100,
        }
    }
}

impl ShapeWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("shapeworld: {m}")));
        if self.image_size < 2 {
            return bad("image_size must be at least 2");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 ≤ min_objects ≤ max_objects");
        }
        if !(0.0..=1.0).contains(&self.small_fraction) {
            return bad("small_fraction outside [0, 1]");
        }
        for r in [self.small_side, self.large_side] {
            if r[0] < 2 || r[0] > r[1] {
                return bad("side ranges need 2 ≤ lo ≤ hi");
            }
        }
        if !(0.0..=1.0).contains(&self.max_iou) {
            return bad("max_iou outside [0, 1]");
        }
        Ok(())
    }
}

/// 8-bit RGB, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![0; (width * height * 3) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        let row = (self.width * 3) as usize;
        for (dst, src) in out.pixels.chunks_mut(row).zip(self.pixels.chunks(row)) {
            for (d, s) in dst.chunks_mut(3).zip(src.chunks(3).rev()) {
                d.copy_from_slice(s);
            }
        }
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width, self.height);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
            w.write_image_data(&self.pixels).map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(buf)
    }

    /// Decodes 8-bit RGB, RGBA or grayscale PNGs into RGB.
    pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
        let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let mut raw = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?];
        let info = reader.next_frame(&mut raw).map_err(|e| Error::Png(e.to_string()))?;
        raw.truncate(info.buffer_size());
        let pixels: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => raw,
            png::ColorType::Rgba => raw.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => raw.iter().flat_map(|&v| [v, v, v]).collect(),
            png::ColorType::GrayscaleAlpha => raw.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(Error::Png(format!("unsupported colour type {other:?}"))),
        };
        Ok(RgbImage {
            width: info.width,
            height: info.height,
            pixels,
        })
    }

    pub fn load(path: &Path) -> Result<RgbImage> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }

    /// Nearest-neighbour resample to a square `size × size` image.
    pub fn resize_nearest(&self, size: u32) -> RgbImage {
        if self.width == size && self.height == size {
            return self.clone();
        }
        let mut out = RgbImage::new(size, size);
        for y in 0..size {
            let sy = ((y as u64 * self.height as u64) / size as u64) as u32;
            for x in 0..size {
                let sx = ((x as u64 * self.width as u64) / size as u64) as u32;
                out.put(x, y, self.get(sx, sy));
            }
        }
        out
    }
}

/// Pixel box `[x0, y0, x1, y1)` with exclusive upper corner.
pub type PixelBox = [u32; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: usize,
    pub boxes: Vec<CornerBox>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: RgbImage,
    pub boxes: Vec<PixelBox>,
    pub labels: Vec<usize>,
    /// Objects that could not be placed within the retry budget.
    pub dropped: usize,
}

impl Sample {
    pub fn ground_truth(&self) -> GroundTruth {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        let boxes = self
            .boxes
            .iter()
            .map(|b| [b[0] as f64 / w, b[1] as f64 / h, b[2] as f64 / w, b[3] as f64 / h])
            .collect();
        GroundTruth {
            boxes,
            labels: self.labels.clone(),
        }
    }

    pub fn annotation(&self) -> Annotation {
        let gt = self.ground_truth();
        Annotation {
            id: self.id,
            boxes: gt.boxes,
            labels: gt.labels,
        }
    }

    /// Mirrors the image and its boxes; applying it twice is the identity.
    pub fn flip_horizontal(&self) -> Sample {
        let w = self.image.width;
        Sample {
            id: self.id,
            image: self.image.flip_horizontal(),
            boxes: self.boxes.iter().map(|b| [w - b[2], b[1], w - b[0], b[3]]).collect(),
            labels: self.labels.clone(),
            dropped: self.dropped,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dropped_objects(&self) -> usize {
        self.samples.iter().map(|s| s.dropped).sum()
    }

    pub fn subset(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }
}

fn stream(seed: u64, index: usize) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed ^ (index as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Shape mask relative to the top-left corner of its `side × side` cell.
fn mask(shape: Shape, side: u32) -> Vec<(u32, u32)> {
    let mut m = Vec::new();
    for dy in 0..side {
        for dx in 0..side {
            if shape.covers(side, dx, dy) {
                m.push((dx, dy));
            }
        }
    }
    m
}

fn bounds(pixels: &[(u32, u32)]) -> PixelBox {
    let mut b = [u32::MAX, u32::MAX, 0, 0];
    for &(x, y) in pixels {
        b[0] = b[0].min(x);
        b[1] = b[1].min(y);
        b[2] = b[2].max(x + 1);
        b[3] = b[3].max(y + 1);
    }
    b
}

fn unit(b: &PixelBox) -> CornerBox {
    b.map(|v| v as f64)
}

/// Image `index` of the dataset described by `spec`.
pub fn generate_sample(spec: &ShapeWorldSpec, index: usize) -> Sample {
    let mut rng = stream(spec.seed, index);
    let size = spec.image_size;
    let mut image = RgbImage::new(size, size);
    for v in image.pixels.iter_mut() {
        *v = rng.gen_range(0..=96);
    }
    let wanted = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut occupied = vec![false; (size * size) as usize];
    let mut boxes: Vec<PixelBox> = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0;
    for _ in 0..wanted {
        let shape = Shape::ALL[rng.gen_range(0..3)];
        let range = if rng.gen_bool(spec.small_fraction) { spec.small_side } else { spec.large_side };
        let side = rng.gen_range(range[0]..=range[1]).min(size);
        let colour = [rng.gen_range(150..=255), rng.gen_range(150..=255), rng.gen_range(150..=255)];
        let cell = mask(shape, side);
        let mut placed = false;
        for _ in 0..spec.max_retries {
            let x0 = rng.gen_range(0..=size - side);
            let y0 = rng.gen_range(0..=size - side);
            let pixels: Vec<(u32, u32)> = cell.iter().map(|&(dx, dy)| (x0 + dx, y0 + dy)).collect();
            let b = bounds(&pixels);
            if boxes.iter().any(|o| iou(&unit(o), &unit(&b)) > spec.max_iou) {
                continue;
            }
            if pixels.iter().any(|&(x, y)| occupied[(y * size + x) as usize]) {
                continue;
            }
            for &(x, y) in &pixels {
                occupied[(y * size + x) as usize] = true;
                image.put(x, y, colour);
            }
            boxes.push(b);
            labels.push(shape.label());
            placed = true;
            break;
        }
        if !placed {
            dropped += 1;
        }
    }
    Sample {
        id: index,
        image,
        boxes,
        labels,
        dropped,
    }
}

pub fn generate_dataset(spec: &ShapeWorldSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        samples: (0..spec.num_images).map(|i| generate_sample(spec, i)).collect(),
    })
}

/// Stacks images into an `N×3×H×W` tensor scaled to `[0, 1]` minus 0.5.
pub fn images_to_tensor(images: &[&RgbImage]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (w, h) = (first.width as usize, first.height as usize);
    let plane = w * h;
    let mut data = vec![0.0; images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        if (img.width as usize, img.height as usize) != (w, h) {
            return Err(Error::shape("images_to_tensor", "images differ in size"));
        }
        let base = n * 3 * plane;
        for (p, px) in img.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                data[base + c * plane + p] = px[c] as f64 / 255.0 - 0.5;
            }
        }
    }
    Tensor::from_vec([images.len(), 3, h, w], data)
}

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const SPEC_FILE: &str = "spec.json";
pub const IMAGE_DIR: &str = "images";

pub fn image_file_name(id: usize) -> String {
    format!("{id:06}.png")
}

/// Writes `images/*.png`, `annotations.jsonl` (one record per image) and a
/// copy of the spec.
pub fn write_dataset(dataset: &Dataset, spec: &ShapeWorldSpec, dir: &Path) -> Result<()> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let file = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut ann = BufWriter::new(file);
    for s in &dataset.samples {
        let p = images.join(image_file_name(s.id));
        fs::write(&p, s.image.encode_png()?).map_err(|e| Error::io(&p, e))?;
        serde_json::to_writer(&mut ann, &s.annotation())?;
        writeln!(ann).map_err(|e| Error::io(&ann_path, e))?;
    }
    ann.flush().map_err(|e| Error::io(&ann_path, e))?;
    let spec_path = dir.join(SPEC_FILE);
    fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut samples = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line)?;
        let image = RgbImage::load(&dir.join(IMAGE_DIR).join(image_file_name(a.id)))?;
        let (w, h) = (image.width as f64, image.height as f64);
        let boxes = a
            .boxes
            .iter()
            .map(|b| {
                [
                    (b[0] * w).round() as u32,
                    (b[1] * h).round() as u32,
                    (b[2] * w).round() as u32,
                    (b[3] * h).round() as u32,
                ]
            })
            .collect();
        samples.push(Sample {
            id: a.id,
            image,
            boxes,
            labels: a.labels,
            dropped: 0,
        });
    }
    Ok(Dataset { samples })
}
