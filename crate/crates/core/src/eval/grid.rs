//! Content–transformation transfer grids.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::model::{decode, encode, LatentCode, ModelParams};
use crate::tensor::Tensor;

/// A `(R + 1) × (S + 1)` mosaic of `H × W × C` tiles. Row 0 holds the
/// content sources, column 0 the transformation sources, the corner is blank.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferGrid {
    pub rows: usize,
    pub cols: usize,
    pub tile_h: usize,
    pub tile_w: usize,
    pub channels: usize,
    /// `[rows·H × cols·W × C]`, row-major.
    pub pixels: Vec<f32>,
}

impl TransferGrid {
    /// Tile `(i, j)` as `H × W × C` values.
    pub fn tile(&self, i: usize, j: usize) -> Vec<f32> {
        let (h, w, c) = (self.tile_h, self.tile_w, self.channels);
        let stride = self.cols * w * c;
        let mut out = Vec::with_capacity(h * w * c);
        for y in 0..h {
            let start = (i * h + y) * stride + j * w * c;
            out.extend_from_slice(&self.pixels[start..start + w * c]);
        }
        out
    }

    fn put(&mut self, i: usize, j: usize, tile: &[f32]) {
        let (h, w, c) = (self.tile_h, self.tile_w, self.channels);
        let stride = self.cols * w * c;
        for y in 0..h {
            let start = (i * h + y) * stride + j * w * c;
            self.pixels[start..start + w * c].copy_from_slice(&tile[y * w * c..(y + 1) * w * c]);
        }
    }

    /// 8-bit PNG; grayscale for one channel, RGB for three.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let (w, h) = ((self.cols * self.tile_w) as u32, (self.rows * self.tile_h) as u32);
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::config(format!("cannot write {c}-channel images as PNG"))),
        };
        let mut out = Vec::new();
        image::ImageEncoder::write_image(
            image::codecs::png::PngEncoder::new(&mut out),
            &bytes,
            w,
            h,
            color,
        )?;
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png()?).map_err(|e| Error::io(path, e))
    }
}

/// Cell `(i, j)` for `i, j ≥ 1` decodes the content code of column image
/// `j` with the transformation code of row image `i` (posterior means).
pub fn transfer_grid(
    params: &ModelParams<f32>,
    row_images: &Tensor<f32>,
    col_images: &Tensor<f32>,
) -> Result<TransferGrid> {
    ensure!(
        row_images.rows() > 0 && col_images.rows() > 0,
        Error::config("transfer grid needs at least one row and one column image")
    );
    let (r, s) = (row_images.rows(), col_images.rows());
    let (_, z_rows) = encode(params, row_images)?;
    let (c_cols, _) = encode(params, col_images)?;
    let arch = &params.arch;
    let mut c_idx = Vec::with_capacity(r * s);
    let mut z_idx = Vec::with_capacity(r * s);
    for i in 0..r {
        for j in 0..s {
            z_idx.push(i);
            c_idx.push(j);
        }
    }
    let cells = decode(
        params,
        &LatentCode::content(c_cols.mean.gather_rows(&c_idx)),
        &LatentCode::transformation(z_rows.mean.gather_rows(&z_idx)),
    )?;
    let (h, w, ch) = (arch.height, arch.width, arch.channels);
    let mut grid = TransferGrid {
        rows: r + 1,
        cols: s + 1,
        tile_h: h,
        tile_w: w,
        channels: ch,
        pixels: vec![0.0; (r + 1) * (s + 1) * h * w * ch],
    };
    for j in 0..s {
        grid.put(0, j + 1, col_images.row(j));
    }
    for i in 0..r {
        grid.put(i + 1, 0, row_images.row(i));
        for j in 0..s {
            grid.put(i + 1, j + 1, cells.row(i * s + j));
        }
    }
    Ok(grid)
}
