//! Minimal float image buffers with bilinear sampling.

use image::{GrayImage, Rgb, RgbImage};

/// Single-channel f32 image, row-major. Intensities are on a 0..255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayF32 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayF32 {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn from_gray8(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Bilinear sample with coordinates clamped to the image.
    pub fn sample_clamped(&self, u: f64, v: f64) -> f32 {
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = (u - x0 as f64) as f32;
        let ty = (v - y0 as f64) as f32;
        let top = self.get(x0, y0) + (self.get(x1, y0) - self.get(x0, y0)) * tx;
        let bot = self.get(x0, y1) + (self.get(x1, y1) - self.get(x0, y1)) * tx;
        top + (bot - top) * ty
    }

    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        let mut out = self.clone();
        blur_interleaved(&mut out.data, self.width, self.height, 1, sigma);
        out
    }
}

/// Three-channel f32 image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbF32 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl RgbF32 {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect(),
        }
    }

    /// Rounds and clamps to 8 bits.
    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.get(x as usize, y as usize);
            Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
        })
    }

    /// Luma (Rec. 601) as a gray image.
    pub fn to_gray(&self) -> GrayF32 {
        GrayF32 {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    /// Bilinear sample at pixel-center coordinates; `None` outside
    /// `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<[f32; 3]> {
        if !(u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = (u - x0 as f64) as f32;
        let ty = (v - y0 as f64) as f32;
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = a[ch] + (b[ch] - a[ch]) * tx;
            let bot = c[ch] + (d[ch] - c[ch]) * tx;
            out[ch] = top + (bot - top) * ty;
        }
        Some(out)
    }
}

/// Normalized Gaussian taps truncated at 3 sigma. A non-positive sigma gives
/// the identity kernel.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    if !(sigma > 0.0) {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

/// Symmetric reflection (`dcb|abcd|cba`) of an out-of-range index.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur over an interleaved buffer with `channels`
/// components per pixel.
pub fn blur_interleaved(data: &mut [f32], width: usize, height: usize, channels: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 || data.is_empty() {
        return;
    }
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0f32; data.len()];
    for y in 0..height {
        for x in 0..width {
            for ch in 0..channels {
                let mut acc = 0.0;
                for (j, w) in k.iter().enumerate() {
                    let sx = reflect(x as i64 + j as i64 - r, width);
                    acc += w * data[(y * width + sx) * channels + ch];
                }
                tmp[(y * width + x) * channels + ch] = acc;
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            for ch in 0..channels {
                let mut acc = 0.0;
                for (j, w) in k.iter().enumerate() {
                    let sy = reflect(y as i64 + j as i64 - r, height);
                    acc += w * tmp[(sy * width + x) * channels + ch];
                }
                data[(y * width + x) * channels + ch] = acc;
            }
        }
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}
