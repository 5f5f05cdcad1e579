//! Gradient-field generation: a Canny pipeline whose binary edge mask gates
//! the Sobel gradient magnitude, yielding a field that keeps the strength of
//! each dominant edge instead of a flat 0/1 map.
//!
//! Orientation conventions: `gu` is the derivative along columns
//! (left-to-right), `gv` along rows (top-to-bottom). Both Sobel kernels are
//! applied as cross-correlations, so a ramp increasing to the right gives a
//! positive `gu`.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Channel-major (`[c,h,w]`) image with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ColorImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::dim(format!("image {channels}x{height}x{width} with {} values", data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("image values must lie in [0,1]".into()));
        }
        Ok(ColorImage { channels, height, width, data })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::dim(format!("expected [c,h,w] image tensor, got {s:?}")));
        }
        Self::new(s[0], s[1], s[2], t.to_f64_vec())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64([self.channels, self.height, self.width], &self.data).expect("validated shape")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        ColorImage { data, ..*self }
    }

    /// Multiply every value by `alpha` (clamped to `[0,1]`).
    pub fn scaled(&self, alpha: f64) -> Self {
        let data = self.data.iter().map(|v| (v * alpha).clamp(0.0, 1.0)).collect();
        ColorImage { data, ..*self }
    }
}

/// Single-channel image with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::dim(format!("gray image {height}x{width} with {} values", pixels.len())));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("gray values must lie in [0,1]".into()));
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    fn at_clamped(&self, r: isize, c: isize) -> f64 {
        let r = r.clamp(0, self.height as isize - 1) as usize;
        let c = c.clamp(0, self.width as isize - 1) as usize;
        self.pixels[r * self.width + c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair {
    pub height: usize,
    pub width: usize,
    pub gu: Vec<f64>,
    pub gv: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `mask * magnitude`, divided by its maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl GradientField {
    /// Replicates the field over `channels` planes so it can be fed to an
    /// encoder built for RGB input.
    pub fn to_tensor<T: Scalar>(&self, channels: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(channels * self.values.len());
        for _ in 0..channels {
            data.extend(self.values.iter().map(|&v| T::of(v)));
        }
        Tensor::new([channels, self.height, self.width], data).expect("field shape")
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// 8-bit quantization, `round(255 * G)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyParams {
    pub sigma: f64,
    pub kernel_size: usize,
    /// Fraction of the image's maximum gradient magnitude.
    pub low: f64,
    /// Fraction of the image's maximum gradient magnitude.
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams { sigma: 1.4, kernel_size: 5, low: 0.1, high: 0.2 }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("canny sigma must be positive, got {}", self.sigma)));
        }
        if self.kernel_size < 3 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("canny kernel size must be odd and >= 3, got {}", self.kernel_size)));
        }
        if !(self.low > 0.0 && self.low < self.high) {
            return Err(Error::Config(format!(
                "canny thresholds need 0 < low < high, got low={} high={}",
                self.low, self.high
            )));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps.
    pub fn gaussian_kernel(&self) -> Vec<f64> {
        let r = (self.kernel_size / 2) as f64;
        let taps: Vec<f64> = (0..self.kernel_size)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / total).collect()
    }
}

/// Rec.601 luma.
pub fn to_grayscale(image: &ColorImage) -> Result<GrayImage> {
    if image.channels != 3 {
        return Err(Error::dim(format!("to_grayscale needs 3 channels, got {}", image.channels)));
    }
    let n = image.height * image.width;
    let (r, rest) = image.data.split_at(n);
    let (g, b) = rest.split_at(n);
    let pixels =
        r.iter().zip(g).zip(b).map(|((&r, &g), &b)| (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0)).collect();
    Ok(GrayImage { height: image.height, width: image.width, pixels })
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &GrayImage, params: &CannyParams) -> Result<GrayImage> {
    params.validate()?;
    let taps = params.gaussian_kernel();
    let r = (taps.len() / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            tmp[row * w + col] = taps
                .iter()
                .enumerate()
                .map(|(k, &t)| t * img.at_clamped(row as isize, col as isize + k as isize - r))
                .sum();
        }
    }
    let horiz = GrayImage { height: h, width: w, pixels: tmp };
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let v: f64 = taps
                .iter()
                .enumerate()
                .map(|(k, &t)| t * horiz.at_clamped(row as isize + k as isize - r, col as isize))
                .sum();
            out[row * w + col] = v.clamp(0.0, 1.0);
        }
    }
    Ok(GrayImage { height: h, width: w, pixels: out })
}

const SOBEL_U: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_V: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// 3x3 Sobel derivatives with edge replication; output matches input shape.
pub fn sobel(img: &GrayImage) -> Result<GradientPair> {
    let (h, w) = (img.height, img.width);
    if h < 3 || w < 3 {
        return Err(Error::dim(format!("sobel needs at least 3x3, got {h}x{w}")));
    }
    let mut gu = vec![0.0; h * w];
    let mut gv = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let (mut su, mut sv) = (0.0, 0.0);
            for (i, (ku, kv)) in SOBEL_U.iter().zip(&SOBEL_V).enumerate() {
                for j in 0..3 {
                    let v = img.at_clamped(row as isize + i as isize - 1, col as isize + j as isize - 1);
                    su += ku[j] * v;
                    sv += kv[j] * v;
                }
            }
            gu[row * w + col] = su;
            gv[row * w + col] = sv;
        }
    }
    Ok(GradientPair { height: h, width: w, gu, gv })
}

/// Elementwise `sqrt(gu^2 + gv^2)`.
pub fn grad_magnitude(pair: &GradientPair) -> Vec<f64> {
    pair.gu.iter().zip(&pair.gv).map(|(&u, &v)| u.hypot(v)).collect()
}

/// Relative tolerance under which two magnitudes count as tied in NMS.
const TIE_EPS: f64 = 1e-9;

/// Magnitudes at or below this are rounding residue of flat regions (the
/// largest possible Sobel magnitude on a `[0,1]` image is `4 * sqrt(2)`).
const MIN_MAGNITUDE: f64 = 1e-12;

fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_EPS * a.abs().max(b.abs())
}

/// Non-maximum suppression along the gradient direction quantized to
/// 0/45/90/135 degrees. A pixel survives if it strictly exceeds its
/// neighbor behind the gradient and is at least its neighbor ahead (ties
/// within `TIE_EPS` count as equal), so a symmetric ridge keeps exactly one
/// pixel. Neighbors outside the image count as zero.
fn non_maximum_suppression(pair: &GradientPair, mag: &[f64]) -> Vec<bool> {
    let (h, w) = (pair.height as isize, pair.width as isize);
    let at = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= h || c >= w {
            0.0
        } else {
            mag[(r * w + c) as usize]
        }
    };
    let mut keep = vec![false; mag.len()];
    for r in 0..h {
        for c in 0..w {
            let idx = (r * w + c) as usize;
            let m = mag[idx];
            if m <= MIN_MAGNITUDE {
                continue;
            }
            let mut angle = pair.gv[idx].atan2(pair.gu[idx]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // (dr, dc) points along the gradient
            let (dr, dc) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let behind = at(r - dr, c - dc);
            let ahead = at(r + dr, c + dc);
            let beats_behind = m > behind && !tied(m, behind);
            let holds_ahead = m >= ahead || tied(m, ahead);
            keep[idx] = beats_behind && holds_ahead;
        }
    }
    keep
}

/// Double threshold plus 8-connected hysteresis, thresholds relative to
/// `max(mag)`.
fn hysteresis(h: usize, w: usize, mag: &[f64], nms: &[bool], params: &CannyParams) -> Vec<bool> {
    let max = mag.iter().copied().fold(0.0, f64::max);
    let mut out = vec![false; mag.len()];
    if max <= MIN_MAGNITUDE {
        return out;
    }
    let (low, high) = (params.low * max, params.high * max);
    let weak = |i: usize| nms[i] && mag[i] >= low;
    let mut queue = VecDeque::new();
    for i in 0..mag.len() {
        if nms[i] && mag[i] >= high {
            out[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (nr, nc) = (r + dr, c + dc);
                if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if !out[j] && weak(j) {
                    out[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    out
}

struct CannyStages {
    magnitude: Vec<f64>,
    mask: BinaryMask,
}

fn canny_stages(gray: &GrayImage, params: &CannyParams) -> Result<CannyStages> {
    let blurred = gaussian_blur(gray, params)?;
    let pair = sobel(&blurred)?;
    let magnitude = grad_magnitude(&pair);
    let nms = non_maximum_suppression(&pair, &magnitude);
    let bits = hysteresis(gray.height, gray.width, &magnitude, &nms, params);
    let mask = BinaryMask { height: gray.height, width: gray.width, bits };
    Ok(CannyStages { magnitude, mask })
}

/// Binary Canny edge map: blur, Sobel, NMS, hysteresis.
pub fn canny_mask(img: &GrayImage, params: &CannyParams) -> Result<BinaryMask> {
    Ok(canny_stages(img, params)?.mask)
}

/// Gradient magnitude of the blurred image, the quantity the mask gates.
pub fn canny_magnitude(img: &GrayImage, params: &CannyParams) -> Result<Vec<f64>> {
    let blurred = gaussian_blur(img, params)?;
    Ok(grad_magnitude(&sobel(&blurred)?))
}

/// `G = B_canny * |E|`, normalized by its maximum. An empty mask yields an
/// all-zero field.
pub fn gradient_field(image: &ColorImage, params: &CannyParams) -> Result<GradientField> {
    Ok(gradient_field_with_stages(image, params)?.0)
}

/// Field together with the intermediate mask and magnitude, for inspection.
pub fn gradient_field_with_stages(
    image: &ColorImage,
    params: &CannyParams,
) -> Result<(GradientField, BinaryMask, Vec<f64>)> {
    params.validate()?;
    let gray = to_grayscale(image)?;
    let CannyStages { magnitude, mask } = canny_stages(&gray, params)?;
    let mut values: Vec<f64> = mask.bits.iter().zip(&magnitude).map(|(&b, &m)| if b { m } else { 0.0 }).collect();
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    let field = GradientField { height: gray.height, width: gray.width, values };
    Ok((field, mask, magnitude))
}
