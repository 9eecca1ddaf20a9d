//! PNG input/output for images, alpha mattes and trimaps.
//!
//! 8-bit inputs are divided by 255, 16-bit grayscale inputs by 65535. Alpha
//! mattes are written as 16-bit grayscale, trimaps and images as 8-bit.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::types::{trimap_encode, ImageRgb, Trimap};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::ImageDecode {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_rgb(path: &Path) -> Result<ImageRgb> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(y as usize, x as usize, c)] = pixel.0[c] as f32 / 255.0;
        }
    }
    Ok(ImageRgb::new(data))
}

pub fn save_rgb(path: &Path, image: &ImageRgb) -> Result<()> {
    let (h, w) = image.shape2();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (image.data[(y as usize, x as usize, c)].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|source| Error::ImageDecode {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a grayscale plane as normalized f32, honoring 8- vs 16-bit depth.
pub fn load_gray(path: &Path) -> Result<Array2<f32>> {
    let img = open(path)?;
    Ok(match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                buf.get_pixel(c as u32, r as u32).0[0] as f32 / 65535.0
            })
        }
        other => {
            let buf = other.to_luma8();
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                buf.get_pixel(c as u32, r as u32).0[0] as f32 / 255.0
            })
        }
    })
}

/// Writes an alpha plane as 16-bit grayscale PNG.
pub fn save_gray16(path: &Path, plane: &Array2<f32>) -> Result<()> {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(plane[(y as usize, x as usize)].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|source| Error::ImageDecode {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a trimap plane. 8-bit files must contain only `{0, 128, 255}`;
/// 16-bit files must contain the same codes scaled by 257.
pub fn load_trimap(path: &Path) -> Result<Trimap> {
    let img = open(path)?;
    let plane: Array2<u8> = match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let mut plane = Array2::zeros((h as usize, w as usize));
            for (x, y, pixel) in buf.enumerate_pixels() {
                let v = pixel.0[0];
                if v % 257 != 0 {
                    return Err(Error::InvalidTrimapValue {
                        value: (v >> 8) as u8,
                        row: y as usize,
                        col: x as usize,
                    });
                }
                plane[(y as usize, x as usize)] = (v / 257) as u8;
            }
            plane
        }
        other => {
            let buf = other.to_luma8();
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                buf.get_pixel(c as u32, r as u32).0[0]
            })
        }
    };
    crate::types::trimap_decode(&plane)
}

pub fn save_trimap(path: &Path, trimap: &Trimap) -> Result<()> {
    let plane = trimap_encode(trimap);
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([plane[(y as usize, x as usize)]])
    });
    buf.save(path).map_err(|source| Error::ImageDecode {
        path: path.display().to_string(),
        source,
    })
}
