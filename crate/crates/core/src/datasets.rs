//! IDX image/label files and the scaled digit datasets built from them.
//!
//! Synthesized images are quantized to the 8-bit grid so that exporting them
//! to IDX and parsing the files back reproduces the pixels exactly.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Images with values in `[0, 1]` and one class label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Vec<Array2<f64>>,
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl LabeledImageSet {
    pub fn new(images: Vec<Array2<f64>>, labels: Vec<u8>, height: usize, width: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if images.iter().any(|im| im.dim() != (height, width)) {
            return Err(Error::invalid(format!("all images must be {height}x{width}")));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        Ok(LabeledImageSet {
            images,
            labels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        LabeledImageSet {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            height: self.height,
            width: self.width,
        }
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    } else {
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(bytes)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn parse_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| parse_err(path, bytes.len() as u64, format!("file ends inside header field at {offset}")))
}

/// Parses an IDX image file, returning `(count, rows, cols, pixel bytes)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(parse_err(
            path,
            bytes.len() as u64,
            format!("truncated: expected {need} pixel bytes, found {}", payload.len()),
        ));
    }
    Ok((count, rows, cols, payload[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(parse_err(
            path,
            bytes.len() as u64,
            format!("truncated: expected {count} labels, found {}", payload.len()),
        ));
    }
    if let Some(pos) = payload[..count].iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(parse_err(path, 8 + pos as u64, format!("label {} out of range", payload[pos])));
    }
    Ok(payload[..count].to_vec())
}

/// Loads an IDX image/label pair (optionally gzip-compressed, by `.gz`
/// extension). Pixel bytes are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let (count, rows, cols, pixels) = parse_idx_images(&read_all(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_all(labels_path)?, labels_path)?;
    if labels.len() != count {
        return Err(parse_err(
            labels_path,
            4,
            format!("label count {} does not match image count {count}", labels.len()),
        ));
    }
    let plane = rows * cols;
    let images = (0..count)
        .map(|i| {
            Array2::from_shape_fn((rows, cols), |(r, c)| pixels[i * plane + r * cols + c] as f64 / 255.0)
        })
        .collect();
    Ok(LabeledImageSet {
        images,
        labels,
        height: rows,
        width: cols,
    })
}

#[inline]
pub fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Rounds every pixel to the nearest `n / 255`.
pub fn quantize(image: &mut Array2<f64>) {
    image.mapv_inplace(|v| to_byte(v) as f64 / 255.0);
}

pub fn encode_idx_images(set: &LabeledImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + set.len() * set.height * set.width);
    for v in [IDX_IMAGES_MAGIC, set.len() as u32, set.height as u32, set.width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in &set.images {
        out.extend(img.iter().map(|&v| to_byte(v)));
    }
    out
}

pub fn encode_idx_labels(set: &LabeledImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + set.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend_from_slice(&set.labels);
    out
}

/// Writes a set as IDX files (gzip-compressed when a path ends in `.gz`).
pub fn write_idx(set: &LabeledImageSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    write_all(images_path, &encode_idx_images(set))?;
    write_all(labels_path, &encode_idx_labels(set))
}

/// Bilinear sample with zero outside the image; `(row, col)` in pixel units.
pub fn bilinear_zero(image: &Array2<f64>, row: f64, col: f64) -> f64 {
    let (h, w) = image.dim();
    let r0 = row.floor();
    let c0 = col.floor();
    let (fr, fc) = (row - r0, col - c0);
    let at = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            0.0
        } else {
            image[[r as usize, c as usize]]
        }
    };
    (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1.0))
        + fr * ((1.0 - fc) * at(r0 + 1.0, c0) + fc * at(r0 + 1.0, c0 + 1.0))
}

/// Renders `src` scaled by `factor` about its centre onto a `height x width`
/// canvas, with the source centre landing at canvas position
/// `(centre_row, centre_col)`.
pub fn scale_onto(
    src: &Array2<f64>,
    factor: f64,
    height: usize,
    width: usize,
    centre_row: f64,
    centre_col: f64,
) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let (src_cr, src_cc) = ((sh as f64 - 1.0) / 2.0, (sw as f64 - 1.0) / 2.0);
    Array2::from_shape_fn((height, width), |(r, c)| {
        let sr = src_cr + (r as f64 - centre_row) / factor;
        let sc = src_cc + (c as f64 - centre_col) / factor;
        bilinear_zero(src, sr, sc)
    })
}

/// Scales an image about its centre, keeping the canvas size.
pub fn scale_about_centre(src: &Array2<f64>, factor: f64) -> Array2<f64> {
    let (h, w) = src.dim();
    scale_onto(src, factor, h, w, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
}

/// Per-sample generator: one ChaCha stream per sample index.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A synthesized set with the scale factors drawn for each sample.
#[derive(Debug, Clone)]
pub struct Synthesized {
    pub set: LabeledImageSet,
    pub factors: Vec<Vec<f64>>,
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::invalid(format!("scale range must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
    }
    Ok(())
}

/// Scales every image about its centre by a factor drawn uniformly from
/// `[lo, hi]` (bilinear, zero background, same canvas).
pub fn make_scaled(set: &LabeledImageSet, scale_range: (f64, f64), seed: u64) -> Result<Synthesized> {
    let (lo, hi) = scale_range;
    check_range(lo, hi)?;
    let mut images = Vec::with_capacity(set.len());
    let mut factors = Vec::with_capacity(set.len());
    for (i, img) in set.images.iter().enumerate() {
        let mut rng = sample_rng(seed, i as u64);
        let f = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let mut scaled = scale_about_centre(img, f);
        quantize(&mut scaled);
        images.push(scaled);
        factors.push(vec![f]);
    }
    Ok(Synthesized {
        set: LabeledImageSet {
            images,
            labels: set.labels.clone(),
            height: set.height,
            width: set.width,
        },
        factors,
    })
}

pub const LOCAL2_HEIGHT: usize = 28;
pub const LOCAL2_WIDTH: usize = 40;
pub const LOCAL2_RANGE: (f64, f64) = (0.7, 1.0);
const LOCAL2_ANCHORS: [f64; 2] = [10.0, 30.0];
const LOCAL2_JITTER: i32 = 2;

/// Pairs of digits `(d, d + 1 mod 10)`, each scaled independently by a
/// factor in `[0.7, 1]` and placed side by side on a 28x40 canvas. The label
/// is `d`. Left and right digits are centred near columns 10 and 30 with
/// +-2 px jitter; overlapping strokes combine by maximum.
pub fn make_local2(set: &LabeledImageSet, count: usize, seed: u64) -> Result<Synthesized> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in set.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    if let Some(missing) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::invalid(format!("source set has no digit {missing}")));
    }
    let (lo, hi) = LOCAL2_RANGE;
    let centre_row = (LOCAL2_HEIGHT as f64 - 1.0) / 2.0;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut factors = Vec::with_capacity(count);
    for n in 0..count {
        let mut rng = sample_rng(seed, n as u64);
        let d = n % NUM_CLASSES;
        let mut canvas = Array2::<f64>::zeros((LOCAL2_HEIGHT, LOCAL2_WIDTH));
        let mut pair = Vec::with_capacity(2);
        for (slot, digit) in [d, (d + 1) % NUM_CLASSES].into_iter().enumerate() {
            let pool = &by_class[digit];
            let src = &set.images[pool[rng.random_range(0..pool.len())]];
            let f = rng.random_range(lo..=hi);
            let jitter = rng.random_range(-LOCAL2_JITTER..=LOCAL2_JITTER) as f64;
            let placed = scale_onto(
                src,
                f,
                LOCAL2_HEIGHT,
                LOCAL2_WIDTH,
                centre_row,
                LOCAL2_ANCHORS[slot] + jitter,
            );
            ndarray::Zip::from(&mut canvas).and(&placed).for_each(|c, &p| *c = c.max(p));
            pair.push(f);
        }
        quantize(&mut canvas);
        images.push(canvas);
        labels.push(d as u8);
        factors.push(pair);
    }
    Ok(Synthesized {
        set: LabeledImageSet {
            images,
            labels,
            height: LOCAL2_HEIGHT,
            width: LOCAL2_WIDTH,
        },
        factors,
    })
}

/// Disjoint, seed-shuffled train/validation/test subsets.
pub fn split(
    set: &LabeledImageSet,
    sizes: (usize, usize, usize),
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet, LabeledImageSet)> {
    let (a, b, c) = sizes;
    if a + b + c > set.len() {
        return Err(Error::invalid(format!(
            "requested {} samples from a set of {}",
            a + b + c,
            set.len()
        )));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        set.subset(&order[..a]),
        set.subset(&order[a..a + b]),
        set.subset(&order[a + b..a + b + c]),
    ))
}

/// Writes `key = value` lines.
pub fn write_manifest(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
