//! PNG tile grids with optional row labels drawn in a 3x5 bitmap font.

use std::path::Path;

use candle_core::Tensor;
use image::{Rgb, RgbImage};

use crate::error::{DaeError, Result};

const GAP: u32 = 2;
const LABEL_SCALE: u32 = 2;
const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;

/// One `(C, H, W)` image with values in `[0, 1]`; C is 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f32>,
}

impl Tile {
    pub fn new(channels: usize, side: usize, data: Vec<f32>) -> Result<Self> {
        if (channels != 1 && channels != 3) || data.len() != channels * side * side {
            return Err(DaeError::invalid(format!(
                "tile needs 1 or 3 channels of {side}x{side}, got {channels} and {} values",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            side,
            data,
        })
    }

    /// Splits an `(N, C, H, W)` tensor into tiles.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Self>> {
        let (n, c, h, w) = t.dims4()?;
        if h != w {
            return Err(DaeError::invalid("tiles must be square"));
        }
        let flat = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let len = c * h * w;
        (0..n)
            .map(|i| Self::new(c, h, flat[i * len..(i + 1) * len].to_vec()))
            .collect()
    }

    fn rgb(&self, i: usize, j: usize) -> [u8; 3] {
        let plane = self.side * self.side;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let at = i * self.side + j;
        if self.channels == 1 {
            let v = q(self.data[at]);
            [v, v, v]
        } else {
            [
                q(self.data[at]),
                q(self.data[plane + at]),
                q(self.data[2 * plane + at]),
            ]
        }
    }
}

/// Rows of 3x5 glyphs, bit 2 is the leftmost column.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [6, 1, 2, 4, 7],
        '3' => [6, 1, 2, 1, 6],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 6, 1, 6],
        '6' => [3, 4, 7, 5, 7],
        '7' => [7, 1, 2, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 6],
        '-' => [0, 0, 7, 0, 0],
        '.' => [0, 0, 0, 0, 2],
        '=' => [0, 7, 0, 7, 0],
        _ => [0; 5],
    }
}

fn label_width(text: &str) -> u32 {
    text.chars().count() as u32 * (GLYPH_W + 1) * LABEL_SCALE
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str) {
    for (k, c) in text.chars().enumerate() {
        let rows = glyph(c);
        let gx = x0 + k as u32 * (GLYPH_W + 1) * LABEL_SCALE;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    for dy in 0..LABEL_SCALE {
                        for dx in 0..LABEL_SCALE {
                            let (x, y) = (
                                gx + col * LABEL_SCALE + dx,
                                y0 + r as u32 * LABEL_SCALE + dy,
                            );
                            if x < img.width() && y < img.height() {
                                img.put_pixel(x, y, Rgb([255, 255, 255]));
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Lays out `rows` of equally sized tiles, each row prefixed by its label.
pub fn render_grid(rows: &[(String, Vec<Tile>)]) -> Result<RgbImage> {
    let side = rows
        .iter()
        .flat_map(|(_, r)| r.first())
        .map(|t| t.side)
        .next()
        .ok_or_else(|| DaeError::invalid("grid has no tiles"))?;
    if rows.iter().flat_map(|(_, r)| r).any(|t| t.side != side) {
        return Err(DaeError::invalid("grid tiles differ in size"));
    }
    let cols = rows.iter().map(|(_, r)| r.len()).max().unwrap_or(0) as u32;
    let margin = rows.iter().map(|(l, _)| label_width(l)).max().unwrap_or(0);
    let margin = if margin > 0 { margin + GAP * 2 } else { 0 };
    let s = side as u32;
    let width = margin + cols * (s + GAP) + GAP;
    let height = rows.len() as u32 * (s + GAP) + GAP;
    let mut img = RgbImage::from_pixel(width, height, Rgb([32, 32, 32]));
    for (r, (label, tiles)) in rows.iter().enumerate() {
        let y0 = GAP + r as u32 * (s + GAP);
        draw_text(
            &mut img,
            GAP,
            y0 + s.saturating_sub(GLYPH_H * LABEL_SCALE) / 2,
            label,
        );
        for (c, tile) in tiles.iter().enumerate() {
            let x0 = margin + GAP + c as u32 * (s + GAP);
            for i in 0..side {
                for j in 0..side {
                    img.put_pixel(x0 + j as u32, y0 + i as u32, Rgb(tile.rgb(i, j)));
                }
            }
        }
    }
    Ok(img)
}

pub fn save_grid(path: &Path, rows: &[(String, Vec<Tile>)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    render_grid(rows)?.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_geometry_and_pixels() {
        let white = Tile::new(1, 4, vec![1.0; 16]).unwrap();
        let red = Tile::new(3, 4, [vec![1.0; 16], vec![0.0; 32]].concat()).unwrap();
        let img = render_grid(&[
            (String::new(), vec![white.clone(), red]),
            (String::new(), vec![white]),
        ])
        .unwrap();
        assert_eq!((img.width(), img.height()), (2 + 2 * 6, 2 + 2 * 6));
        assert_eq!(img.get_pixel(2, 2).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(8, 2).0, [255, 0, 0]);
    }

    #[test]
    fn labels_widen_the_canvas() {
        let t = Tile::new(1, 16, vec![0.0; 256]).unwrap();
        let plain = render_grid(&[(String::new(), vec![t.clone()])]).unwrap();
        let labelled = render_grid(&[("INPUT".into(), vec![t])]).unwrap();
        assert!(labelled.width() > plain.width());
    }

    #[test]
    fn bad_tiles_are_rejected() {
        assert!(Tile::new(2, 4, vec![0.0; 32]).is_err());
        assert!(render_grid(&[]).is_err());
    }
}
