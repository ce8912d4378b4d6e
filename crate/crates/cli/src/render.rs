//! Heatmap colouring and the four-panel explanation layout.
//!
//! Heatmaps use a fixed dark-to-bright ramp (the inferno control points,
//! linearly interpolated) blended at 40% over the grayscale radiograph.

use gazesal::{Heatmap, Tensor};
use image::{Rgb, RgbImage};

pub const OVERLAY_ALPHA: f32 = 0.4;

const RAMP: [(f32, [f32; 3]); 5] = [
    (0.0, [0.0, 0.0, 4.0]),
    (0.25, [87.0, 16.0, 110.0]),
    (0.5, [188.0, 55.0, 84.0]),
    (0.75, [249.0, 142.0, 9.0]),
    (1.0, [252.0, 255.0, 164.0]),
];

pub fn colormap(v: f32) -> [f32; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    for pair in RAMP.windows(2) {
        let ((a, ca), (b, cb)) = (pair[0], pair[1]);
        if v <= b {
            let t = (v - a) / (b - a);
            return [0, 1, 2].map(|i| ca[i] + t * (cb[i] - ca[i]));
        }
    }
    RAMP[4].1
}

fn gray(image: &Tensor<f32>, x: usize, y: usize) -> f32 {
    image.data()[y * image.shape()[1] + x].clamp(0.0, 1.0) * 255.0
}

pub fn grayscale(image: &Tensor<f32>) -> RgbImage {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = gray(image, x as usize, y as usize).round() as u8;
        Rgb([g, g, g])
    })
}

/// `heat` coloured by [`colormap`] on its own.
pub fn heatmap_image(heat: &Heatmap<f32>) -> RgbImage {
    let w = heat.width();
    RgbImage::from_fn(w as u32, heat.height() as u32, |x, y| {
        Rgb(colormap(heat.values.data()[y as usize * w + x as usize]).map(|c| c.round() as u8))
    })
}

pub fn overlay(image: &Tensor<f32>, heat: &Heatmap<f32>) -> RgbImage {
    let w = image.shape()[1];
    RgbImage::from_fn(w as u32, image.shape()[0] as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let g = gray(image, x, y);
        let c = colormap(heat.values.data()[y * w + x]);
        Rgb(c.map(|c| ((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * c).round() as u8))
    })
}

/// Input, generator heatmap, static gaze and decoder mask, left to right.
pub fn four_panel(image: &Tensor<f32>, generator: &Heatmap<f32>, gaze: &Heatmap<f32>, mask: &Heatmap<f32>) -> RgbImage {
    let panels = [grayscale(image), overlay(image, generator), overlay(image, gaze), overlay(image, mask)];
    let (w, h) = panels[0].dimensions();
    let mut out = RgbImage::new(4 * w, h);
    for (i, p) in panels.iter().enumerate() {
        image::imageops::replace(&mut out, p, i as i64 * w as i64, 0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use gazesal::HeatmapSource;

    #[test]
    fn ramp_is_dark_to_bright() {
        let lum = |c: [f32; 3]| 0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2];
        let mut prev = -1.0;
        for i in 0..=100 {
            let l = lum(colormap(i as f32 / 100.0));
            assert!(l > prev);
            prev = l;
        }
        assert_eq!(colormap(-3.0), colormap(0.0));
        assert_eq!(colormap(f32::NAN), colormap(0.0));
    }

    #[test]
    fn panel_layout() {
        let img = Tensor::from_fn([6, 5], |i| i as f32 / 30.0);
        let heat = Heatmap { values: Tensor::from_fn([6, 5], |i| (i % 5) as f32 / 4.0), source: HeatmapSource::Gaze };
        let out = four_panel(&img, &heat, &heat, &heat);
        assert_eq!(out.dimensions(), (20, 6));
        assert_eq!(out.get_pixel(4, 5), &grayscale(&img).get_pixel(4, 5).clone());
        assert_eq!(out.get_pixel(9, 2), overlay(&img, &heat).get_pixel(4, 2));
    }
}
