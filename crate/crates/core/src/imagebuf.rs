//! Float image buffer and the handful of image ops the pipeline needs.
//!
//! Images are `(3, H, W)` arrays of `f64` nominally in `[0, 1]`; values are
//! clamped only at PNG boundaries so intermediate math stays exact.

use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    data: Array3<f64>,
}

impl ImageBuf {
    /// Wraps a `(3, H, W)` array.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::shape(
                "ImageBuf::new",
                "(3, H, W)",
                format!("{:?}", data.dim()),
            ));
        }
        Ok(ImageBuf { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageBuf {
            data: Array3::zeros((3, height, width)),
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        ImageBuf {
            data: Array3::from_shape_fn((3, height, width), |(c, y, x)| f(c, y, x)),
        }
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [
            self.data[[0, y, x]],
            self.data[[1, y, x]],
            self.data[[2, y, x]],
        ]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for c in 0..3 {
            self.data[[c, y, x]] = rgb[c];
        }
    }

    /// Rec. 601 luma. The grayscale policy is stamped into metric metadata by
    /// callers that report numbers.
    pub fn luma(&self) -> Array2<f64> {
        let (_, h, w) = self.data.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * self.data[[0, y, x]]
                + 0.587 * self.data[[1, y, x]]
                + 0.114 * self.data[[2, y, x]]
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
        });
        Ok(ImageBuf { data })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut img = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = self.pixel(y, x);
                img.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([to_u8(px[0]), to_u8(px[1]), to_u8(px[2])]),
                );
            }
        }
        img.save(path)?;
        Ok(())
    }

    /// Bytes of the u8-quantized image, for hashing.
    pub fn quantized_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Separable Gaussian blur with reflect padding, radius `ceil(3 sigma)`.
pub fn gaussian_blur(img: &ImageBuf, sigma: f64) -> ImageBuf {
    assert!(sigma > 0.0, "gaussian_blur: sigma must be positive");
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let (h, w) = (img.height() as isize, img.width() as isize);
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
        i.clamp(0, n - 1) as usize
    };

    let mut horiz = Array3::zeros((3, h as usize, w as usize));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let xx = reflect(x + ki as isize - radius, w);
                    acc += k * img.data[[c, y as usize, xx]];
                }
                horiz[[c, y as usize, x as usize]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let yy = reflect(y + ki as isize - radius, h);
                    acc += k * horiz[[c, yy, x as usize]];
                }
                out[[c, y as usize, x as usize]] = acc;
            }
        }
    }
    ImageBuf { data: out }
}

/// Sobel gradient magnitude on luma, normalized to `[0, 1]` by the maximum
/// attainable response (4 for unit-range inputs per axis, combined).
pub fn sobel_magnitude(img: &ImageBuf) -> Array2<f64> {
    let luma = img.luma();
    let (h, w) = luma.dim();
    let gx_k: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let gy_k: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let v = luma[[clamp(y as isize + dy, h), clamp(x as isize + dx, w)]];
                    gx += gx_k[(dy + 1) as usize][(dx + 1) as usize] * v;
                    gy += gy_k[(dy + 1) as usize][(dx + 1) as usize] * v;
                }
            }
            // max |gx| = max |gy| = 4 for luma in [0,1]
            out[[y, x]] = ((gx * gx + gy * gy).sqrt() / (4.0 * std::f64::consts::SQRT_2))
                .min(1.0);
        }
    }
    out
}

/// Average-pools an image (or single channel stack) down to `(oh, ow)`.
/// Input dims must be integer multiples of the output dims.
pub fn average_pool(data: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = data.dim();
    assert!(h % oh == 0 && w % ow == 0, "average_pool: non-integer factor");
    let (fy, fx) = (h / oh, w / ow);
    Array3::from_shape_fn((c, oh, ow), |(ch, y, x)| {
        let mut acc = 0.0;
        for dy in 0..fy {
            for dx in 0..fx {
                acc += data[[ch, y * fy + dy, x * fx + dx]];
            }
        }
        acc / (fy * fx) as f64
    })
}

// ---------------------------------------------------------------------------
// CIELAB conversion, D65 white point, 8-bit quantized channels.
//
// L is scaled 0..100 -> 0..255; a and b are offset by 128. Quantizing here is
// what makes channel-swap tests portable across platforms.
// ---------------------------------------------------------------------------

const D65: [f64; 3] = [0.95047, 1.0, 1.08883];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA {
        t.powi(3)
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// sRGB (unit range) to quantized LAB bytes `(L, a, b)`.
pub fn rgb_to_lab_u8(rgb: [f64; 3]) -> [u8; 3] {
    let r = srgb_to_linear(rgb[0].clamp(0.0, 1.0));
    let g = srgb_to_linear(rgb[1].clamp(0.0, 1.0));
    let b = srgb_to_linear(rgb[2].clamp(0.0, 1.0));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let fx = lab_f(x / D65[0]);
    let fy = lab_f(y / D65[1]);
    let fz = lab_f(z / D65[2]);
    let l = 116.0 * fy - 16.0;
    let a = 500.0 * (fx - fy);
    let bb = 200.0 * (fy - fz);
    [
        (l.clamp(0.0, 100.0) * 255.0 / 100.0).round() as u8,
        (a + 128.0).round().clamp(0.0, 255.0) as u8,
        (bb + 128.0).round().clamp(0.0, 255.0) as u8,
    ]
}

/// Quantized LAB bytes back to sRGB (unit range, clipped).
pub fn lab_u8_to_rgb(lab: [u8; 3]) -> [f64; 3] {
    let l = lab[0] as f64 * 100.0 / 255.0;
    let a = lab[1] as f64 - 128.0;
    let b = lab[2] as f64 - 128.0;
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let x = D65[0] * lab_f_inv(fx);
    let y = D65[1] * lab_f_inv(fy);
    let z = D65[2] * lab_f_inv(fz);
    let r = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
    let g = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
    let bl = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;
    [
        linear_to_srgb(r.max(0.0)).clamp(0.0, 1.0),
        linear_to_srgb(g.max(0.0)).clamp(0.0, 1.0),
        linear_to_srgb(bl.max(0.0)).clamp(0.0, 1.0),
    ]
}
