//! 16-bit portable graymaps of projections and accumulation maps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor6D, B, C, T, X, Y, Z};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, `height` rows of `width` samples.
    pub data: Vec<f32>,
}

/// Maximum over `axis` (one of the spatial axes) and over time of a
/// single-channel volume. Rows follow the first remaining axis.
pub fn max_projection(v: &Tensor6D, axis: usize) -> Result<Image> {
    let s = v.shape();
    if s[B] != 1 || s[C] != 1 {
        return Err(Error::shape(format!("projection needs a single-channel volume, got {s:?}")));
    }
    if !(X..=Z).contains(&axis) {
        return Err(Error::arg(format!("projection axis {axis} is not spatial")));
    }
    let keep: Vec<usize> = [X, Y, Z].into_iter().filter(|&a| a != axis).collect();
    let (h, w) = (s[keep[0]], s[keep[1]]);
    let mut data = vec![f32::NEG_INFINITY; h * w];
    let lt = s[T];
    for x in 0..s[X] {
        for y in 0..s[Y] {
            for z in 0..s[Z] {
                let idx = [0, 0, x, y, z];
                let o = v.offset([0, 0, x, y, z, 0]);
                let m = v.data()[o..o + lt].iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let p = idx[keep[0]] * w + idx[keep[1]];
                data[p] = data[p].max(m);
            }
        }
    }
    Ok(Image { width: w, height: h, data })
}

/// Binary PGM with maxval 65535, big-endian samples, linearly scaled from
/// the image range. A constant image maps to zero.
pub fn encode_pgm16(img: &Image) -> Result<Vec<u8>> {
    if img.data.len() != img.width * img.height {
        return Err(Error::shape("image data does not match its dimensions"));
    }
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("image contains non-finite values"));
    }
    let lo = img.data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo) as f64;
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for &v in &img.data {
        let q = if span > 0.0 { ((v - lo) as f64 / span * 65535.0).round() as u16 } else { 0 };
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm16(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pgm16(img)?)?;
    Ok(())
}
