// SPDX-License-Identifier: MIT OR Apache-2.0

//! PNG rendering of saliency overlays and intervention curves.

use std::path::Path;

use image::RgbImage;
use ndarray::Array2;

use crate::dataset::{encode_png, Image};
use crate::error::Result;
use crate::intervention::InterventionCurve;
use crate::metrics::{normalize_minmax, upsample_bilinear};
use crate::numeric::write_atomic;

pub const OVERLAY_ALPHA: f64 = 0.5;

// Viridis sampled at nine evenly spaced stops.
const VIRIDIS: [[f64; 3]; 9] = [
    [0.267, 0.005, 0.329],
    [0.279, 0.175, 0.483],
    [0.230, 0.322, 0.546],
    [0.173, 0.449, 0.558],
    [0.128, 0.567, 0.551],
    [0.153, 0.680, 0.504],
    [0.369, 0.789, 0.383],
    [0.678, 0.864, 0.190],
    [0.993, 0.906, 0.144],
];

/// Colormap lookup for `t` in `[0, 1]`, linear between stops.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let u = t * (VIRIDIS.len() - 1) as f64;
    let lo = (u.floor() as usize).min(VIRIDIS.len() - 2);
    let f = u - lo as f64;
    let (a, b) = (VIRIDIS[lo], VIRIDIS[lo + 1]);
    [
        a[0] + (b[0] - a[0]) * f,
        a[1] + (b[1] - a[1]) * f,
        a[2] + (b[2] - a[2]) * f,
    ]
}

/// Saliency map (any grid size) colored and blended over `image`.
pub fn overlay(image: &Image, saliency: &Array2<f64>) -> Image {
    let norm = normalize_minmax(saliency).unwrap_or_else(|| Array2::zeros(saliency.dim()));
    let up = upsample_bilinear(&norm, image.height, image.width);
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let color = colormap(up[[y, x]]);
            for (c, v) in color.iter().enumerate() {
                let blended = (1.0 - OVERLAY_ALPHA) * image.get(x, y, c) + OVERLAY_ALPHA * v;
                out.set(x, y, c, blended);
            }
        }
    }
    out
}

pub fn png_bytes(image: &Image, path: &Path) -> Result<Vec<u8>> {
    let buf = RgbImage::from_raw(image.width as u32, image.height as u32, image.data.clone())
        .expect("image buffer matches dimensions");
    encode_png(&image::DynamicImage::ImageRgb8(buf), path)
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    write_atomic(path, &png_bytes(image, path)?)
}

const PALETTE: [[f64; 3]; 6] = [
    [0.122, 0.467, 0.706],
    [1.000, 0.498, 0.055],
    [0.173, 0.627, 0.173],
    [0.839, 0.153, 0.157],
    [0.580, 0.404, 0.741],
    [0.549, 0.337, 0.294],
];

fn draw_line(img: &mut Image, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: [f64; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as usize) < img.width && (py as usize) < img.height {
                for (c, v) in color.iter().enumerate() {
                    img.set(px as usize, py as usize, c, *v);
                }
            }
        }
    }
}

/// Task error against intervention count, one colored line per curve, on a
/// white canvas with axes (x from 0 to the largest count, y from 0 to 1).
pub fn plot_curves(curves: &[InterventionCurve], width: usize, height: usize) -> Image {
    let mut img = Image {
        width,
        height,
        data: vec![255; width * height * 3],
    };
    let margin = 30.0;
    let (w, h) = (width as f64 - 2.0 * margin, height as f64 - 2.0 * margin);
    let max_x = curves
        .iter()
        .flat_map(|c| c.counts.iter().copied())
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let to_px = |x: f64, y: f64| {
        (
            margin + x / max_x * w,
            margin + (1.0 - y.clamp(0.0, 1.0)) * h,
        )
    };
    let black = [0.0; 3];
    draw_line(&mut img, to_px(0.0, 0.0), to_px(max_x, 0.0), black);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), black);
    for (i, curve) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<_> = curve
            .counts
            .iter()
            .zip(&curve.mean_error)
            .map(|(&x, &y)| to_px(x as f64, y))
            .collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0], pair[1], color);
        }
    }
    img
}
