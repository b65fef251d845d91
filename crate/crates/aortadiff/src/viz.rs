//! Static figure emission: grayscale PNGs and side-by-side montages.

use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};

fn to_u8(v: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write one array as an 8-bit grayscale PNG with a fixed intensity window.
pub fn array_to_png(path: &Path, a: &Array2<f64>, lo: f64, hi: f64) -> Result<()> {
    let (h, w) = a.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((r, c), &v) in a.indexed_iter() {
        img.put_pixel(c as u32, r as u32, Luma([to_u8(v, lo, hi)]));
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("png {}: {e}", path.display())))
}

/// Horizontal montage of equally sized panels with a 2px separator.
pub fn montage_png(path: &Path, panels: &[&Array2<f64>], lo: f64, hi: f64) -> Result<()> {
    if panels.is_empty() {
        return Err(Error::Config("montage needs at least one panel".into()));
    }
    let (h, w) = panels[0].dim();
    for p in panels {
        if p.dim() != (h, w) {
            return Err(Error::Shape("montage panels must share shape".into()));
        }
    }
    let gap = 2usize;
    let total_w = panels.len() * w + (panels.len() - 1) * gap;
    let mut img = GrayImage::new(total_w as u32, h as u32);
    for (i, p) in panels.iter().enumerate() {
        let x0 = i * (w + gap);
        for ((r, c), &v) in p.indexed_iter() {
            img.put_pixel((x0 + c) as u32, r as u32, Luma([to_u8(v, lo, hi)]));
        }
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("png {}: {e}", path.display())))
}

/// Render a binary mask as full-scale white-on-black.
pub fn mask_to_panel(mask: &ndarray::Array2<u8>) -> Array2<f64> {
    mask.mapv(|v| v as f64)
}
