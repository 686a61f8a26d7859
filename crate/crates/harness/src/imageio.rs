//! PNG input and output for image batches in `[-1, 1]`.

use std::path::{Path, PathBuf};

use addp::sampler::PixelMask;
use addp::types::ImageBatch;
use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{HarnessError, Result};

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Tiles the batch into a grid `columns` wide with a 1-pixel gap.
pub fn grid_image(images: &ImageBatch, columns: usize) -> Result<RgbImage> {
    let (b, _, h, w) = images.dims();
    let cols = columns.clamp(1, b.max(1));
    let rows = b.div_ceil(cols).max(1);
    let data = images.to_vec()?;
    let mut out: RgbImage =
        ImageBuffer::from_pixel((cols * (w + 1) + 1) as u32, (rows * (h + 1) + 1) as u32, Rgb([0, 0, 0]));
    for i in 0..b {
        let (gy, gx) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let px = |c: usize| to_byte(data[((i * 3 + c) * h + y) * w + x]);
                out.put_pixel((gx * (w + 1) + 1 + x) as u32, (gy * (h + 1) + 1 + y) as u32, Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    Ok(out)
}

/// `<dir>/<stem>_<hash>.png`; every grid carries its config hash.
pub fn grid_path(dir: &Path, stem: &str, config_hash: &str) -> PathBuf {
    dir.join(format!("{stem}_{config_hash}.png"))
}

pub fn save_grid(path: &Path, images: &ImageBatch, columns: usize) -> Result<()> {
    grid_image(images, columns)?.save(path)?;
    Ok(())
}

/// Loads one RGB PNG as a batch of one, checking its size.
pub fn load_image(path: &Path, resolution: usize) -> Result<ImageBatch> {
    let img = image::open(path)?.to_rgb8();
    if img.width() as usize != resolution || img.height() as usize != resolution {
        return Err(HarnessError::Config(format!(
            "{} is {}x{}, expected {resolution}x{resolution}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let mut v = vec![0f32; 3 * resolution * resolution];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            v[(c * resolution + y as usize) * resolution + x as usize] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(ImageBatch::from_vec(v, (1, 3, resolution, resolution))?)
}

/// Any non-black pixel of a mask PNG marks the region to fill.
pub fn load_mask(path: &Path, resolution: usize) -> Result<PixelMask> {
    let img = image::open(path)?.to_luma8();
    if img.width() as usize != resolution || img.height() as usize != resolution {
        return Err(HarnessError::Config(format!("mask {} must be {resolution}x{resolution}", path.display())));
    }
    let bits = img.pixels().map(|p| u8::from(p[0] > 0)).collect();
    Ok(PixelMask::new(bits, resolution, resolution)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_on_byte_levels() {
        let dir = tempfile::tempdir().unwrap();
        let v: Vec<f32> = (0..3 * 8 * 8).map(|i| (i % 256) as f32 / 127.5 - 1.0).collect();
        let batch = ImageBatch::from_vec(v.clone(), (1, 3, 8, 8)).unwrap();
        let grid = grid_image(&batch, 1).unwrap();
        assert_eq!(grid.dimensions(), (10, 10));
        let path = dir.path().join("one.png");
        // A single image without the frame, for loading back.
        let mut plain = RgbImage::new(8, 8);
        for (x, y, p) in plain.enumerate_pixels_mut() {
            *p = *grid.get_pixel(x + 1, y + 1);
        }
        plain.save(&path).unwrap();
        let back = load_image(&path, 8).unwrap().to_vec().unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(load_image(&path, 16).is_err());
    }

    #[test]
    fn grid_names_carry_the_hash() {
        let p = grid_path(Path::new("/tmp"), "samples", "abc123");
        assert_eq!(p.file_name().unwrap(), "samples_abc123.png");
    }
}
