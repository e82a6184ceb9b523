//! Attention-map rendering: min-max normalisation, a blue-purple-red ramp,
//! nearest-neighbour upscaling and image overlays.

use std::path::Path;

use super::ppm::Image;
use crate::adadrop::{AttentionMap, DropMask};
use crate::error::{Error, Result};

/// Maps each value to [0, 1]; a constant input maps to 0.5 everywhere.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; values.len()]
    }
}

/// 0 -> (0,0,255), 0.5 -> (128,0,128), 1 -> (255,0,0), linear in between.
pub fn colorize(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let (r, b) = if t <= 0.5 {
        let s = t / 0.5;
        (128.0 * s, 255.0 - 127.0 * s)
    } else {
        let s = (t - 0.5) / 0.5;
        (128.0 + 127.0 * s, 128.0 - 128.0 * s)
    };
    [r.round() as u8, 0, b.round() as u8]
}

fn render(values: &[f64], height: usize, width: usize) -> Image {
    Image::new(width, height, values.iter().flat_map(|&t| colorize(t)).collect())
}

/// Heatmap of an `height x width` map after min-max normalisation.
pub fn heatmap_image(values: &[f64], height: usize, width: usize) -> Result<Image> {
    if values.len() != height * width {
        return Err(Error::dim(format!("{} values for a {height}x{width} map", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("heatmap values must be finite"));
    }
    Ok(render(&normalize(values), height, width))
}

pub fn upscale(img: &Image, height: usize, width: usize) -> Image {
    let mut rgb = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        let sy = y * img.height / height;
        for x in 0..width {
            rgb.extend(img.pixel(x * img.width / width, sy));
        }
    }
    Image::new(width, height, rgb)
}

/// Per-pixel mix `(1 - weight) * base + weight * heat`.
pub fn overlay(base: &Image, heat: &Image, weight: f64) -> Result<Image> {
    if (base.width, base.height) != (heat.width, heat.height) {
        return Err(Error::dim("overlay images differ in size"));
    }
    let rgb = base
        .rgb
        .iter()
        .zip(&heat.rgb)
        .map(|(&a, &b)| ((1.0 - weight) * f64::from(a) + weight * f64::from(b)).round() as u8)
        .collect();
    Ok(Image::new(base.width, base.height, rgb))
}

/// Writes sample `n` of `map` as a heatmap, upscaled to `size` when given.
pub fn export_heatmap(map: &AttentionMap, n: usize, size: Option<(usize, usize)>, path: &Path) -> Result<()> {
    let (_, h, w) = map.dims();
    let mut img = heatmap_image(map.sample(n), h, w)?;
    if let Some((height, width)) = size {
        img = upscale(&img, height, width);
    }
    img.write(path)
}

/// Heatmap of sample `n` blended half-and-half over the input image.
pub fn export_overlay(map: &AttentionMap, n: usize, image: &Image, path: &Path) -> Result<()> {
    let (_, h, w) = map.dims();
    let heat = upscale(&heatmap_image(map.sample(n), h, w)?, image.height, image.width);
    overlay(image, &heat, 0.5)?.write(path)
}

/// Drop mask without normalisation: kept positions red, erased ones blue.
pub fn export_mask(mask: &DropMask, n: usize, size: (usize, usize), path: &Path) -> Result<()> {
    let (_, h, w) = mask.dims();
    upscale(&render(mask.sample(n), h, w), size.0, size.1).write(path)
}
