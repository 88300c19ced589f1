//! PNG heatmaps.
//!
//! Values map linearly from `[0, max]` onto a fixed nine-stop colormap
//! (black, navy, purple, magenta, red, orange, amber, yellow, white) with
//! linear interpolation between stops. A map whose maximum is not positive
//! renders as the first stop. Overlays paint marked pixels in solid colors:
//! hotspots cyan, chosen top-K pixels green.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use irgrid_core::grid::Grid;

pub const COLORMAP: [[u8; 3]; 9] = [
    [0, 0, 0],
    [20, 11, 80],
    [88, 21, 134],
    [156, 38, 126],
    [214, 62, 82],
    [243, 111, 30],
    [251, 168, 25],
    [245, 225, 80],
    [255, 255, 255],
];

pub const HOTSPOT: [u8; 3] = [0, 230, 255];
pub const TOP_K: [u8; 3] = [40, 220, 60];

/// Color for a value already scaled to `[0, 1]`; out-of-range input is clamped.
pub fn color(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let pos = t * (COLORMAP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(COLORMAP.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    std::array::from_fn(|k| (a[k] as f64 + f * (b[k] as f64 - a[k] as f64)).round() as u8)
}

/// RGB pixels, row-major, one triple per grid cell.
pub fn heatmap(grid: &Grid) -> Vec<u8> {
    let max = grid.data.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(3 * grid.data.len());
    for &v in &grid.data {
        let t = if max > 0.0 { v / max } else { 0.0 };
        out.extend_from_slice(&color(t));
    }
    out
}

pub fn overlay(rgb: &mut [u8], width: usize, pixels: &[(usize, usize)], paint: [u8; 3]) {
    for &(r, c) in pixels {
        let i = 3 * (r * width + c);
        if i + 3 <= rgb.len() && c < width {
            rgb[i..i + 3].copy_from_slice(&paint);
        }
    }
}

/// Writes an RGB image, each cell drawn as a `scale`×`scale` block.
pub fn write_png(path: &Path, rgb: &[u8], height: usize, width: usize, scale: usize) -> Result<()> {
    let scale = scale.max(1);
    let (oh, ow) = (height * scale, width * scale);
    let mut big = Vec::with_capacity(3 * oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let i = 3 * ((r / scale) * width + c / scale);
            big.extend_from_slice(&rgb[i..i + 3]);
        }
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), ow as u32, oh as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(&big)?;
    w.finish()?;
    Ok(())
}

/// Upscale factor that brings small maps to a viewable size.
pub fn default_scale(height: usize, width: usize) -> usize {
    (256 / height.max(width).max(1)).clamp(1, 8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints_and_midpoint() {
        assert_eq!(color(0.0), COLORMAP[0]);
        assert_eq!(color(1.0), COLORMAP[8]);
        assert_eq!(color(0.5), COLORMAP[4]);
        assert_eq!(color(-3.0), COLORMAP[0]);
        assert_eq!(color(f64::NAN), COLORMAP[0]);
        assert_eq!(color(1.0 / 16.0), [10, 6, 40]);
    }

    #[test]
    fn heatmap_of_zero_map_is_black() {
        let g = Grid::zeros(2, 3);
        assert!(heatmap(&g).iter().all(|&b| b == 0));
    }
}
