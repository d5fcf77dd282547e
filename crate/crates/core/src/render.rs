//! Grayscale montages of filters and feature maps as binary PGM (P5).

use std::path::Path;

use ndarray::Array2;

use crate::convengine::ScalePyramidResponse;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalize {
    /// Each tile is stretched over its own range.
    PerTile,
    /// All tiles share the range of the whole set.
    Global,
}

pub const SEPARATOR: u8 = 255;
/// Gray level for tiles whose values are all equal.
pub const FLAT: u8 = 128;

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count must match dimensions");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn to_gray(v: f64, (lo, hi): (f64, f64)) -> u8 {
    if hi <= lo {
        FLAT
    } else {
        ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

/// Tiles `grids` row-major into a `rows x cols` layout of cells sized to the
/// largest tile, with 1-pixel separators between cells. Smaller tiles are
/// centred in their cell on a black background. Returns PGM bytes.
pub fn render_grid(grids: &[Array2<f64>], layout: (usize, usize), normalize: Normalize) -> Result<Vec<u8>> {
    if grids.is_empty() {
        return Err(Error::invalid("nothing to render"));
    }
    let (rows, cols) = layout;
    if rows * cols < grids.len() {
        return Err(Error::invalid(format!(
            "layout {rows}x{cols} holds {} tiles, {} given",
            rows * cols,
            grids.len()
        )));
    }
    if grids.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("cannot render non-finite values".into()));
    }
    let ch = grids.iter().map(|g| g.nrows()).max().unwrap_or(0);
    let cw = grids.iter().map(|g| g.ncols()).max().unwrap_or(0);
    let height = rows * ch + rows.saturating_sub(1);
    let width = cols * cw + cols.saturating_sub(1);
    let mut pixels = vec![0u8; width * height];
    for r in 1..rows {
        let y = r * (ch + 1) - 1;
        pixels[y * width..(y + 1) * width].fill(SEPARATOR);
    }
    for c in 1..cols {
        let x = c * (cw + 1) - 1;
        for y in 0..height {
            pixels[y * width + x] = SEPARATOR;
        }
    }
    let global = range(grids.iter().flatten().copied());
    for (t, grid) in grids.iter().enumerate() {
        let span = match normalize {
            Normalize::PerTile => range(grid.iter().copied()),
            Normalize::Global => global,
        };
        let (tr, tc) = (t / cols, t % cols);
        let y0 = tr * (ch + 1) + (ch - grid.nrows()) / 2;
        let x0 = tc * (cw + 1) + (cw - grid.ncols()) / 2;
        for ((y, x), &v) in grid.indexed_iter() {
            pixels[(y0 + y) * width + x0 + x] = to_gray(v, span);
        }
    }
    Ok(encode_pgm(width, height, &pixels))
}

/// Mean of the pooled maps of several channels.
pub fn average_activation(responses: &[ScalePyramidResponse]) -> Result<Array2<f64>> {
    let first = responses
        .first()
        .ok_or_else(|| Error::invalid("no responses to average"))?;
    let dim = first.pooled.dim();
    if responses.iter().any(|r| r.pooled.dim() != dim) {
        return Err(Error::invalid("responses differ in size"));
    }
    let mut sum = Array2::zeros(dim);
    for r in responses {
        sum += &r.pooled;
    }
    Ok(sum / responses.len() as f64)
}

/// Reads an 8-bit binary PGM into values in `[0, 1]`.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let err = |offset: usize, message: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    };
    let mut pos = 0;
    let token = |pos: &mut usize| -> Option<(usize, String)> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        (start < *pos).then(|| (start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };
    match token(&mut pos) {
        Some((_, m)) if m == "P5" => {}
        _ => return Err(err(0, "not a binary PGM (P5)")),
    }
    let mut nums = [0usize; 3];
    for n in &mut nums {
        let (at, t) = token(&mut pos).ok_or_else(|| err(bytes.len(), "truncated header"))?;
        *n = t.parse().map_err(|_| err(at, "bad header number"))?;
    }
    let [w, h, maxval] = nums;
    if maxval == 0 || maxval > 255 {
        return Err(err(pos, "only 8-bit PGM is supported"));
    }
    pos += 1;
    let need = w * h;
    if bytes.len() < pos + need {
        return Err(err(bytes.len(), "truncated pixel data"));
    }
    let data = &bytes[pos..pos + need];
    Ok(Array2::from_shape_fn((h, w), |(y, x)| data[y * w + x] as f64 / maxval as f64))
}
