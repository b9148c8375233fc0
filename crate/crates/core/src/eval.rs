//! Reconstruction error, the Laplace-filter sharpness metric and image grids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{PieError, Result};
use crate::model::PieModel;
use crate::tensor::Tensor;

/// 4-neighbour Laplacian.
pub const LAPLACE_KERNEL: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharpnessSource {
    ModelSamples,
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SharpnessReport {
    pub mean_variance: f64,
    pub sample_count: usize,
    pub source: SharpnessSource,
}

fn image_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w] | [h, w] => Ok((*h, *w)),
        other => Err(PieError::Data(format!("expected a grey-scale image, got shape {other:?}"))),
    }
}

/// Valid-mode Laplace response, `(H-2)×(W-2)` values.
pub fn laplace_response(pixels: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(height.saturating_sub(2) * width.saturating_sub(2));
    for r in 1..height.saturating_sub(1) {
        for c in 1..width.saturating_sub(1) {
            let at = |dr: usize, dc: usize| pixels[(r + dr - 1) * width + (c + dc - 1)];
            let mut acc = 0.0;
            for (dr, row) in LAPLACE_KERNEL.iter().enumerate() {
                for (dc, k) in row.iter().enumerate() {
                    if *k != 0.0 {
                        acc += k * at(dr, dc);
                    }
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Mean over images of the variance of each image's Laplace response.
pub fn laplace_sharpness(images: &[Tensor], source: SharpnessSource) -> Result<SharpnessReport> {
    if images.is_empty() {
        return Err(PieError::Data("sharpness needs at least one image".into()));
    }
    let mut total = 0.0;
    for img in images {
        let (h, w) = image_dims(img)?;
        if h < 3 || w < 3 {
            return Err(PieError::Data(format!("image {h}×{w} is smaller than the 3×3 kernel")));
        }
        total += variance(&laplace_response(img.data(), h, w));
    }
    Ok(SharpnessReport {
        mean_variance: total / images.len() as f64,
        sample_count: images.len(),
        source,
    })
}

/// Splits `[N, D]` rows into items of `shape`.
pub fn rows_as_images(x: &Tensor, shape: &[usize]) -> Result<Vec<Tensor>> {
    let (n, d) = x.dims2("rows_as_images")?;
    if shape.iter().product::<usize>() != d {
        return Err(PieError::Data(format!("rows of {d} values do not fit shape {shape:?}")));
    }
    Ok((0..n).map(|i| Tensor::new(shape.to_vec(), x.row(i).to_vec()).expect("row shape")).collect())
}

pub fn mean_squared_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(PieError::Data(format!("cannot compare shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub originals: Tensor,
    pub reconstructions: Tensor,
    /// Averaged over values and items.
    pub mse: f64,
}

/// `decode(encode(x).z)` for the first `n` rows of `x`.
pub fn reconstruct_batch(model: &PieModel, x: &Tensor, n: usize) -> Result<Reconstruction> {
    let x = model.batch_view(x)?;
    let (rows, d) = x.dims2("reconstruct")?;
    let n = n.min(rows);
    if n == 0 {
        return Err(PieError::Data("nothing to reconstruct".into()));
    }
    let originals = Tensor::new(vec![n, d], x.data()[..n * d].to_vec())?;
    let reconstructions = model.reconstruct(&originals)?;
    let mse = mean_squared_error(&originals, &reconstructions)?;
    Ok(Reconstruction {
        originals,
        reconstructions,
        mse,
    })
}

/// 8-bit grey raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreyImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// `floor(clamp(v, 0, 1)·255 + 0.5)`; 0.5 maps to 128.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Tiles `rows × cols` equally sized images; pixel `(r, c)` of tile `(i, j)`
/// lands at `(i·H + r, j·W + c)`.
pub fn render_grid(images: &[Tensor], rows: usize, cols: usize) -> Result<GreyImage> {
    if rows * cols != images.len() || images.is_empty() {
        return Err(PieError::Data(format!("{rows}×{cols} grid needs {} images, got {}", rows * cols, images.len())));
    }
    let (h, w) = image_dims(&images[0])?;
    let (height, width) = (rows * h, cols * w);
    let mut pixels = vec![0u8; height * width];
    for (k, img) in images.iter().enumerate() {
        if image_dims(img)? != (h, w) {
            return Err(PieError::Data("grid images differ in size".into()));
        }
        let (i, j) = (k / cols, k % cols);
        for r in 0..h {
            for c in 0..w {
                pixels[(i * h + r) * width + j * w + c] = quantize(img.data()[r * w + c]);
            }
        }
    }
    Ok(GreyImage { width, height, pixels })
}

/// Near-square layout for `n` tiles.
pub fn grid_shape(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols);
    if rows * cols == n {
        (rows, cols)
    } else {
        (1, n)
    }
}

impl GreyImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_pgm())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| PieError::Data(format!("png: {e}")))?;
            writer
                .write_image_data(&self.pixels)
                .map_err(|e| PieError::Data(format!("png: {e}")))?;
        }
        write_atomic(path, &buf)
    }
}

/// Parses binary (P5, maxval 255) PGM.
pub fn read_pgm(bytes: &[u8]) -> Result<GreyImage> {
    let bad = |m: &str| PieError::Data(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != width * height {
        return Err(bad("pixel count does not match header"));
    }
    Ok(GreyImage {
        width,
        height,
        pixels: body.to_vec(),
    })
}
