//! Small raster helpers: bilinear resampling, PNG conversion, colormaps.
//!
//! Images are `[3, H, W]` float arrays with values in `[0, 1]`.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Source coordinate and blend weight for one output index (half-pixel centers, edge clamped).
fn sample_axis(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, (src - lo as f64).min(1.0) as f32)
        })
        .collect()
}

/// Bilinear resize of a single-channel map.
pub fn resize_bilinear(map: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = map.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return map.to_owned();
    }
    let ys = sample_axis(out_h, in_h);
    let xs = sample_axis(out_w, in_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Bilinear resize applied channel by channel.
pub fn resize_image(image: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, in_h, in_w) = image.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return image.to_owned();
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        let resized = resize_bilinear(image.index_axis(ndarray::Axis(0), ch), out_h, out_w);
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&resized);
    }
    out
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Clone>(map: ArrayView2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (in_h, in_w) = map.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| map[[y * in_h / out_h, x * in_w / out_w]].clone())
}

pub fn flip_horizontal(image: ArrayView3<f32>) -> Array3<f32> {
    let mut out = image.to_owned();
    out.invert_axis(ndarray::Axis(2));
    out.as_standard_layout().to_owned()
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb_image(image: ArrayView3<f32>) -> Result<RgbImage> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::RejectedInput(format!("expected 3 channels, got {c}")));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(image[[0, y, x]]), to_u8(image[[1, y, x]]), to_u8(image[[2, y, x]])])
    }))
}

pub fn from_rgb_image(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub fn save_png(image: ArrayView3<f32>, path: &Path) -> Result<()> {
    to_rgb_image(image)?.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(from_rgb_image(&image::open(path)?.to_rgb8()))
}

pub fn save_mask_png(mask: ArrayView2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<Array2<bool>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

/// Piecewise-linear jet colormap on `[0, 1]`.
pub fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |center: f32| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Renders a `[0, 1]` map through the jet colormap.
pub fn colorize(map: ArrayView2<f32>) -> Array3<f32> {
    let (h, w) = map.dim();
    let mut out = Array3::zeros((3, h, w));
    for ((y, x), &v) in map.indexed_iter() {
        let rgb = jet(v);
        for c in 0..3 {
            out[[c, y, x]] = rgb[c];
        }
    }
    out
}

/// Alpha-blends a heat map (resized to the image) over an image.
pub fn overlay(image: ArrayView3<f32>, heat: ArrayView2<f32>, alpha: f32) -> Array3<f32> {
    let (_, h, w) = image.dim();
    let heat = resize_bilinear(heat, h, w);
    let color = colorize(heat.view());
    &image * (1.0 - alpha) + &color * alpha
}

/// Concatenates equally tall images left to right.
pub fn hstack(panels: &[Array3<f32>]) -> Array3<f32> {
    let views: Vec<_> = panels.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(2), &views).expect("panels share height")
}

/// Concatenates equally wide images top to bottom.
pub fn vstack(rows: &[Array3<f32>]) -> Array3<f32> {
    let views: Vec<_> = rows.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(1), &views).expect("rows share width")
}
