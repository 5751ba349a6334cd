//! 8-bit PNG in/out for CxHxW tensors in [0, 1].

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write a 1-channel (grayscale) or 3-channel (RGB) tensor.
pub fn save_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    if t.shape().len() != 3 {
        return Err(Error::shape("save_png", "rank 3 (CxHxW)", format!("{:?}", t.shape())));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    match c {
        1 => {
            let mut img = GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(x as u32, y as u32, image::Luma([to_byte(t.at3(0, y, x))]));
                }
            }
            img.save(path)?;
        }
        3 => {
            let mut img = RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [
                        to_byte(t.at3(0, y, x)),
                        to_byte(t.at3(1, y, x)),
                        to_byte(t.at3(2, y, x)),
                    ];
                    img.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            img.save(path)?;
        }
        _ => {
            return Err(Error::shape("save_png", "1 or 3 channels", format!("{c}")));
        }
    }
    Ok(())
}

/// Read a PNG into a 1- or 3-channel tensor with values k/255.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path)?;
    Ok(match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let mut t = Tensor::zeros(vec![1, h, w]);
            for y in 0..h {
                for x in 0..w {
                    t.set3(0, y, x, g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0);
                }
            }
            t
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let mut t = Tensor::zeros(vec![3, h, w]);
            for y in 0..h {
                for x in 0..w {
                    let px = rgb.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        t.set3(c, y, x, px[c] as f64 / 255.0);
                    }
                }
            }
            t
        }
    })
}
