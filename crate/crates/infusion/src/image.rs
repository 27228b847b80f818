//! Binary PGM (P5) output: image grids and 2-D scatter plots.

use std::fs;
use std::path::Path;

use infusion_core::Tensor;

use crate::error::{io_err, CliError, Result};

/// Clamps to `[0, 1]` and rounds half up onto `0..=255`; NaN maps to 0.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm()).map_err(|e| io_err(path, e))
    }
}

/// Tiles `rows × cols` images of `shape = (height, width)` row-major.
pub fn grid(images: &Tensor, rows: usize, cols: usize, shape: (usize, usize)) -> Result<Gray> {
    let (h, w) = shape;
    if images.rows() != rows * cols || images.cols() != h * w {
        return Err(CliError::Format(format!(
            "grid of {}x{} images of {}x{} cannot hold a {:?} matrix",
            rows,
            cols,
            h,
            w,
            images.shape()
        )));
    }
    let mut g = Gray::filled(cols * w, rows * h, 0);
    for (k, img) in images.rows_iter().enumerate() {
        let (gr, gc) = (k / cols, k % cols);
        for y in 0..h {
            for x in 0..w {
                g.pixels[(gr * h + y) * g.width + gc * w + x] = quantize(img[y * w + x]);
            }
        }
    }
    Ok(g)
}

pub fn write_grid(path: &Path, images: &Tensor, rows: usize, cols: usize, shape: (usize, usize)) -> Result<()> {
    grid(images, rows, cols, shape)?.write(path)
}

/// White `size × size` canvas of the unit square (y up) with each layer's
/// points drawn as one pixel in the layer's gray level; later layers on top.
pub fn scatter(layers: &[(&Tensor, u8)], size: usize) -> Result<Gray> {
    let mut g = Gray::filled(size, size, 255);
    for (points, shade) in layers {
        if points.cols() != 2 {
            return Err(CliError::Format(format!("scatter needs 2 columns, got {}", points.cols())));
        }
        for p in points.rows_iter() {
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                continue;
            }
            let x = ((p[0] * size as f64) as usize).min(size - 1);
            let y = size - 1 - ((p[1] * size as f64) as usize).min(size - 1);
            g.pixels[y * size + x] = *shade;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_contract() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(f64::NAN), 0);
    }

    #[test]
    fn one_by_one_grid() {
        let img = Tensor::matrix(1, 4, vec![0.5; 4]).unwrap();
        let g = grid(&img, 1, 1, (2, 2)).unwrap();
        assert_eq!(g.pixels, vec![128; 4]);
        assert_eq!(&g.encode_pgm()[..11], b"P5\n2 2\n255\n");
        assert!(grid(&img, 1, 2, (2, 2)).is_err());
        assert!(grid(&img, 1, 1, (3, 1)).is_err());
    }

    #[test]
    fn grid_layout_is_row_major() {
        let imgs = Tensor::matrix(4, 1, vec![0.0, 1.0, 0.2, 0.6]).unwrap();
        let g = grid(&imgs, 2, 2, (1, 1)).unwrap();
        assert_eq!(g.pixels, vec![0, 255, 51, 153]);
    }
}
