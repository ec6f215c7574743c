//! Side-by-side comparison grids as lossless PNGs: first column the matched
//! training samples, subsequent columns reconstructions.

use crate::{Error, Result};
use ndarray::ArrayD;
use std::path::Path;

const MARGIN: usize = 2;

/// One grid column: a title-less stack of `[C, H, W]` images, top to bottom.
pub struct GridColumn {
    pub images: Vec<ArrayD<f64>>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Render columns side by side and write a PNG. All images must share one
/// shape; pixel values are clamped to `[0, 1]`.
pub fn write_grid(path: &Path, columns: &[GridColumn]) -> Result<()> {
    let first = columns
        .first()
        .and_then(|c| c.images.first())
        .ok_or_else(|| Error::Contract("grid needs at least one image".into()))?;
    if first.ndim() != 3 {
        return Err(Error::Contract("grid images must be [C,H,W]".into()));
    }
    let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    if c != 1 && c != 3 {
        return Err(Error::Contract("grid supports 1- or 3-channel images".into()));
    }
    let rows = columns.iter().map(|col| col.images.len()).max().unwrap_or(0);
    for col in columns {
        for img in &col.images {
            if img.shape() != first.shape() {
                return Err(Error::Contract("grid images must share one shape".into()));
            }
        }
    }

    let width = columns.len() * (w + MARGIN) - MARGIN;
    let height = rows * (h + MARGIN) - MARGIN;
    let channels = if c == 1 { 1 } else { 3 };
    // margins render mid-gray
    let mut canvas = vec![128u8; width * height * channels];

    for (ci, col) in columns.iter().enumerate() {
        for (ri, img) in col.images.iter().enumerate() {
            let x0 = ci * (w + MARGIN);
            let y0 = ri * (h + MARGIN);
            for y in 0..h {
                for x in 0..w {
                    let base = ((y0 + y) * width + x0 + x) * channels;
                    for ch in 0..channels {
                        canvas[base + ch] = to_u8(img[[ch.min(c - 1), y, x]]);
                    }
                }
            }
        }
    }

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(if channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer
        .write_image_data(&canvas)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Decode a grid PNG written by [`write_grid`] back into per-column tiles.
/// The caller supplies the tile shape the grid was built from.
pub fn read_column_tiles(path: &Path, c: usize, h: usize, w: usize) -> Result<Vec<Vec<ArrayD<f64>>>> {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| {
        Error::Integrity("grid png too large to decode".into())
    })?];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1usize,
        png::ColorType::Rgb => 3usize,
        other => {
            return Err(Error::Integrity(format!(
                "grid png has unsupported color type {other:?}"
            )))
        }
    };
    if channels != if c == 1 { 1 } else { 3 } {
        return Err(Error::Integrity("grid png channels do not match tile shape".into()));
    }
    let width = info.width as usize;
    let height = info.height as usize;
    if !(width + MARGIN).is_multiple_of(w + MARGIN) || !(height + MARGIN).is_multiple_of(h + MARGIN) {
        return Err(Error::Integrity("grid png size does not tile as expected".into()));
    }
    let cols = (width + MARGIN) / (w + MARGIN);
    let rows = (height + MARGIN) / (h + MARGIN);
    let mut out = vec![Vec::with_capacity(rows); cols];
    for (ci, col) in out.iter_mut().enumerate() {
        for ri in 0..rows {
            let x0 = ci * (w + MARGIN);
            let y0 = ri * (h + MARGIN);
            let mut tile = ArrayD::zeros(ndarray::IxDyn(&[c, h, w]));
            for y in 0..h {
                for x in 0..w {
                    let base = ((y0 + y) * width + x0 + x) * channels;
                    for ch in 0..c {
                        tile[[ch, y, x]] = f64::from(buf[base + ch.min(channels - 1)]) / 255.0;
                    }
                }
            }
            col.push(tile);
        }
    }
    Ok(out)
}
