//! Image loading, saving, and deterministic resampling.
//!
//! Convention used across the crate: images that cross module boundaries
//! are [`ImageTensor`]s laid out `[channels, height, width]` with values in
//! the unit range `[0, 1]`. Networks convert to a signed `[-1, 1]` range
//! internally and convert back on emission.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense float image, `[C, H, W]`, unit value range at module boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f32>,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Self {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "image tensor contains non-finite values"
        );
        ImageTensor { data }
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        ImageTensor {
            data: Array3::zeros((c, h, w)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// True if all entries lie in `[lo - tol, hi + tol]`.
    pub fn in_range(&self, lo: f32, hi: f32, tol: f32) -> bool {
        self.data.iter().all(|&v| v >= lo - tol && v <= hi + tol)
    }

    /// Map unit range to signed `[-1, 1]`.
    pub fn to_signed(&self) -> Array3<f32> {
        self.data.mapv(|v| v * 2.0 - 1.0)
    }

    /// Map a signed `[-1, 1]` array back to a unit-range image (clamped).
    pub fn from_signed(signed: &Array3<f32>) -> Self {
        ImageTensor {
            data: signed.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)),
        }
    }

    /// Horizontal mirror.
    pub fn hflip(&self) -> Self {
        let (c, h, w) = self.data.dim();
        let mut out = Array3::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ci, y, x]] = self.data[[ci, y, w - 1 - x]];
                }
            }
        }
        ImageTensor { data: out }
    }

    /// Axis-aligned crop. Panics on out-of-bounds in debug builds.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        debug_assert!(y0 + h <= self.height() && x0 + w <= self.width());
        let view = self
            .data
            .slice(ndarray::s![.., y0..y0 + h, x0..x0 + w])
            .to_owned();
        ImageTensor { data: view }
    }
}

/// Resampling kernels. All three are deterministic, separable, and apply
/// kernel widening when downscaling so that frequency content above the
/// target Nyquist rate is averaged out rather than aliased.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Nearest,
    Bilinear,
    Bicubic,
}

fn triangle(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        1.0 - t
    } else {
        0.0
    }
}

/// Catmull-Rom cubic (a = -0.5).
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-pixel taps of a 1-D resampling pass: source start index plus
/// normalized weights. Edge taps are clamped onto the border pixel.
struct Taps {
    start: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

fn build_taps(src: usize, dst: usize, mode: ResizeMode) -> Taps {
    let scale = src as f64 / dst as f64;
    let (kernel, radius): (fn(f64) -> f64, f64) = match mode {
        ResizeMode::Nearest => {
            // Handled by the caller via `nearest_index`; give a 0-radius
            // placeholder so the structure is uniform.
            (triangle, 0.0)
        }
        ResizeMode::Bilinear => (triangle, 1.0),
        ResizeMode::Bicubic => (cubic, 2.0),
    };
    let widen = scale.max(1.0);
    let mut start = Vec::with_capacity(dst);
    let mut weights = Vec::with_capacity(dst);
    for i in 0..dst {
        let center = (i as f64 + 0.5) * scale - 0.5;
        if mode == ResizeMode::Nearest {
            let idx = (((i as f64 + 0.5) * scale).floor() as isize).clamp(0, src as isize - 1);
            start.push(idx as usize);
            weights.push(vec![1.0]);
            continue;
        }
        let r = radius * widen;
        let lo = (center - r).floor() as isize;
        let hi = (center + r).ceil() as isize;
        let mut w = Vec::with_capacity((hi - lo + 1) as usize);
        let mut sum = 0.0;
        let first = lo.clamp(0, src as isize - 1) as usize;
        // Accumulate clamped taps: out-of-range source indices contribute
        // their weight to the nearest border pixel (replicate padding).
        let mut acc = vec![0.0; (hi.clamp(0, src as isize - 1) as usize) - first + 1];
        for k in lo..=hi {
            let t = (k as f64 - center) / widen;
            let wk = kernel(t);
            if wk == 0.0 {
                continue;
            }
            let idx = k.clamp(0, src as isize - 1) as usize;
            acc[idx - first] += wk;
            sum += wk;
        }
        if sum.abs() < 1e-12 {
            // Degenerate window; fall back to nearest.
            acc.iter_mut().for_each(|v| *v = 0.0);
            let idx = (center.round() as isize).clamp(first as isize, (first + acc.len() - 1) as isize);
            acc[(idx as usize) - first] = 1.0;
            sum = 1.0;
        }
        for v in acc.iter_mut() {
            *v /= sum;
        }
        w.extend_from_slice(&acc);
        start.push(first);
        weights.push(w);
    }
    Taps { start, weights }
}

/// Resample to `(target_h, target_w)`. Accumulation runs in f64 so results
/// are bit-stable across runs and platforms with the same rounding.
pub fn resize(img: &ImageTensor, target_h: usize, target_w: usize, mode: ResizeMode) -> Result<ImageTensor> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {target_h}x{target_w}"
        )));
    }
    let (c, h, w) = img.data.dim();
    if (h, w) == (target_h, target_w) {
        return Ok(img.clone());
    }
    // Horizontal pass.
    let tx = build_taps(w, target_w, mode);
    let mut mid = Array3::<f32>::zeros((c, h, target_w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..target_w {
                let s = tx.start[x];
                let mut acc = 0.0f64;
                for (k, wt) in tx.weights[x].iter().enumerate() {
                    acc += *wt * img.data[[ci, y, s + k]] as f64;
                }
                mid[[ci, y, x]] = acc as f32;
            }
        }
    }
    // Vertical pass.
    let ty = build_taps(h, target_h, mode);
    let mut out = Array3::<f32>::zeros((c, target_h, target_w));
    for ci in 0..c {
        for y in 0..target_h {
            let s = ty.start[y];
            for x in 0..target_w {
                let mut acc = 0.0f64;
                for (k, wt) in ty.weights[y].iter().enumerate() {
                    acc += *wt * mid[[ci, s + k, x]] as f64;
                }
                out[[ci, y, x]] = acc as f32;
            }
        }
    }
    Ok(ImageTensor::new(out))
}

/// Bilinear point sample with edge clamping, used by warping augmentations.
pub fn sample_bilinear(img: &ImageTensor, c: usize, y: f32, x: f32) -> f32 {
    let (h, w) = img.dims();
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let a = img.data[[c, y0, x0]];
    let b = img.data[[c, y0, x1]];
    let d = img.data[[c, y1, x0]];
    let e = img.data[[c, y1, x1]];
    a * (1.0 - fy) * (1.0 - fx) + b * (1.0 - fy) * fx + d * fy * (1.0 - fx) + e * fy * fx
}

/// Load a PNG/JPEG into a unit-range RGB tensor. Grayscale inputs are
/// replicated across the three channels.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut data = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(ImageTensor::new(data))
}

/// Write a unit-range tensor as 8-bit PNG; channel values are clamped and
/// quantized with round-to-nearest.
pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = img.data.dim();
    if c != 3 && c != 1 {
        return Err(Error::InvalidArgument(format!(
            "png export supports 1 or 3 channels, got {c}"
        )));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ci: usize| {
                let v = img.data[[ci.min(c - 1), y, x]].clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            };
            buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("png encode failed: {other}")),
    })
}

/// Peak signal-to-noise ratio in dB between two unit-range images.
pub fn psnr_db(a: &ImageTensor, b: &ImageTensor) -> f64 {
    assert_eq!(a.data.dim(), b.data.dim(), "psnr operands must match in shape");
    let mut se = 0.0f64;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        let d = (*x - *y) as f64;
        se += d * d;
    }
    let mse = se / a.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Output of [`preprocess`]: the working-resolution image and its
/// low-resolution counterpart.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    /// Working-resolution image (long side capped, dims snapped to a
    /// multiple of the downsampling factor).
    pub full: ImageTensor,
    /// `full` downscaled by the configured factor.
    pub low: ImageTensor,
}

/// Resize the input so its long side is at most `max_side`, snap both dims
/// down to multiples of `down_factor`, and produce the `1/down_factor`
/// scale companion image. Fails with a size error if either dimension of
/// the working image would fall below `min_side`.
pub fn preprocess(
    img: &ImageTensor,
    max_side: usize,
    down_factor: usize,
    min_side: usize,
) -> Result<Preprocessed> {
    if down_factor == 0 || !down_factor.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "down_factor must be a positive power of two, got {down_factor}"
        )));
    }
    let (h, w) = img.dims();
    let long = h.max(w);
    let (mut th, mut tw) = if long > max_side {
        let scale = max_side as f64 / long as f64;
        if h >= w {
            (max_side, ((w as f64 * scale).round() as usize).max(1))
        } else {
            (((h as f64 * scale).round() as usize).max(1), max_side)
        }
    } else {
        (h, w)
    };
    // Snap down so the low-resolution companion has integer dims.
    th = (th / down_factor) * down_factor;
    tw = (tw / down_factor) * down_factor;
    if th < min_side.max(down_factor) || tw < min_side.max(down_factor) {
        return Err(Error::ImageTooSmall {
            height: th,
            width: tw,
            min: min_side.max(down_factor),
        });
    }
    let full = resize(img, th, tw, ResizeMode::Bicubic)?;
    let low = resize(&full, th / down_factor, tw / down_factor, ResizeMode::Bicubic)?;
    Ok(Preprocessed { full, low })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn checkerboard(h: usize, w: usize) -> ImageTensor {
        let mut data = Array3::zeros((3, h, w));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[[c, y, x]] = ((y + x) % 2) as f32;
                }
            }
        }
        ImageTensor::new(data)
    }

    #[test]
    fn checkerboard_downsamples_to_mean() {
        // 2x2 {0,1} checkerboard reduced to 1x1 must average to exactly 0.5:
        // the anti-aliased triangle kernel weights both taps equally.
        let img = checkerboard(2, 2);
        let out = resize(&img, 1, 1, ResizeMode::Bilinear).unwrap();
        for c in 0..3 {
            assert!(
                (out.data[[c, 0, 0]] - 0.5).abs() < 1e-6,
                "channel {c}: {}",
                out.data[[c, 0, 0]]
            );
        }
    }

    #[test]
    fn constant_image_survives_all_modes() {
        let img = ImageTensor::new(Array3::from_elem((3, 16, 12), 0.37f32));
        for mode in [ResizeMode::Nearest, ResizeMode::Bilinear, ResizeMode::Bicubic] {
            for (th, tw) in [(8usize, 6usize), (5, 5), (32, 24), (16, 12)] {
                let out = resize(&img, th, tw, mode).unwrap();
                assert_eq!(out.dims(), (th, tw));
                for v in out.data.iter() {
                    assert!((v - 0.37).abs() < 1e-5, "{mode:?} {th}x{tw}: {v}");
                }
            }
        }
    }

    #[test]
    fn preprocess_example_dimensions() {
        // 512x400 input with long side capped at 256 and factor 8 must give
        // a 256x200 working image and a 32x25 low-resolution companion.
        let img = ImageTensor::zeros(3, 512, 400);
        let p = preprocess(&img, 256, 8, 7).unwrap();
        assert_eq!(p.full.dims(), (256, 200));
        assert_eq!(p.low.dims(), (32, 25));
    }

    #[test]
    fn preprocess_small_image_untouched() {
        let img = checkerboard(64, 48);
        let p = preprocess(&img, 256, 8, 7).unwrap();
        assert_eq!(p.full.dims(), (64, 48));
        assert_eq!(p.low.dims(), (8, 6));
    }

    #[test]
    fn preprocess_rejects_tiny_images() {
        // 6x300 scales to 5x256 and snaps to 0x256: must be rejected.
        let img = ImageTensor::zeros(3, 6, 300);
        match preprocess(&img, 256, 8, 7) {
            Err(Error::ImageTooSmall { .. }) => {}
            other => panic!("expected size error, got {other:?}"),
        }
    }

    #[test]
    fn png_round_trip_is_exact_at_8bit() {
        let dir = std::env::temp_dir().join("petsgan-imaging-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.png");
        let mut data = Array3::zeros((3, 4, 5));
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i % 256) as f32 / 255.0;
        }
        let img = ImageTensor::new(data);
        save_png(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.dims(), (4, 5));
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6, "{a} vs {b}");
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn quantization_rounds_to_nearest() {
        // 0.5 maps to round(127.5) = 128.
        let img = ImageTensor::new(Array3::from_elem((3, 1, 1), 0.5f32));
        let dir = std::env::temp_dir().join("petsgan-imaging-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round.png");
        save_png(&img, &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.get_pixel(0, 0).0, [128, 128, 128]);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let img = checkerboard(8, 8);
        assert!(psnr_db(&img, &img).is_infinite());
    }

    #[test]
    fn psnr_known_value() {
        // Uniform error of 0.1 -> MSE 0.01 -> PSNR exactly 20 dB.
        let a = ImageTensor::zeros(3, 4, 4);
        let b = ImageTensor::new(Array3::from_elem((3, 4, 4), 0.1f32));
        let p = psnr_db(&a, &b);
        assert!((p - 20.0).abs() < 1e-4, "{p}");
    }

    #[test]
    fn hflip_involution() {
        let img = {
            let mut data = Array3::zeros((3, 3, 4));
            for (i, v) in data.iter_mut().enumerate() {
                *v = i as f32 / 36.0;
            }
            ImageTensor::new(data)
        };
        assert_eq!(img.hflip().hflip(), img);
        assert_ne!(img.hflip(), img);
    }
}
