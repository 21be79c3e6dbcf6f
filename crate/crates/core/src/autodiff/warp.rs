//! Affine resampling of 2-D maps with bilinear interpolation and zero padding.
//!
//! Coordinates are normalized to `[-1, 1]` with pixel centers at
//! `(2j + 1) / W - 1` (the `align_corners = false` convention). An affine
//! matrix `theta` maps each *output* location to the *input* location it
//! samples from.

/// Row-major 2x3 affine matrix acting on normalized `(x, y, 1)`.
pub type Affine = [[f64; 3]; 2];

pub const IDENTITY: Affine = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];

/// Builds the inverse-sampling matrix for a rotation (radians), isotropic scale
/// and translation (in normalized units) applied to the content.
pub fn similarity(rotation: f64, scale: f64, tx: f64, ty: f64) -> Affine {
    // content moves by R*s; sampling uses the inverse map
    let (s, c) = rotation.sin_cos();
    let inv = 1.0 / scale;
    let a = [[c * inv, s * inv], [-s * inv, c * inv]];
    [
        [a[0][0], a[0][1], -(a[0][0] * tx + a[0][1] * ty)],
        [a[1][0], a[1][1], -(a[1][0] * tx + a[1][1] * ty)],
    ]
}

/// Rounds coordinates within 1e-9 of a pixel center onto it, so identity and
/// pixel-aligned transforms resample exactly.
fn snap(p: f64) -> f64 {
    let r = p.round();
    if (p - r).abs() < 1e-9 {
        r
    } else {
        p
    }
}

/// Precomputed bilinear taps for every output pixel.
#[derive(Clone, Debug)]
pub struct WarpPlan {
    pub height: usize,
    pub width: usize,
    /// Up to four `(source pixel, weight)` taps per output pixel.
    pub taps: Vec<Vec<(usize, f64)>>,
    /// Whether the sampling point of each output pixel falls inside the input.
    pub valid: Vec<bool>,
}

impl WarpPlan {
    pub fn new(height: usize, width: usize, theta: &Affine) -> Self {
        let mut taps = Vec::with_capacity(height * width);
        let mut valid = Vec::with_capacity(height * width);
        for i in 0..height {
            let yo = (2 * i + 1) as f64 / height as f64 - 1.0;
            for j in 0..width {
                let xo = (2 * j + 1) as f64 / width as f64 - 1.0;
                let xi = theta[0][0] * xo + theta[0][1] * yo + theta[0][2];
                let yi = theta[1][0] * xo + theta[1][1] * yo + theta[1][2];
                valid.push((-1.0..=1.0).contains(&xi) && (-1.0..=1.0).contains(&yi));
                let px = snap(((xi + 1.0) * width as f64 - 1.0) / 2.0);
                let py = snap(((yi + 1.0) * height as f64 - 1.0) / 2.0);
                let x0 = px.floor();
                let y0 = py.floor();
                let fx = px - x0;
                let fy = py - y0;
                let mut t = Vec::with_capacity(4);
                for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let (sx, sy) = (x0 + dx, y0 + dy);
                        let w = wx * wy;
                        if w != 0.0 && sx >= 0.0 && sy >= 0.0 && (sx as usize) < width && (sy as usize) < height {
                            t.push((sy as usize * width + sx as usize, w));
                        }
                    }
                }
                taps.push(t);
            }
        }
        Self { height, width, taps, valid }
    }

    /// Warps a token-major map `[H*W x C]`.
    pub fn apply_token_major(&self, src: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for (o, taps) in self.taps.iter().enumerate() {
            for &(s, w) in taps {
                for c in 0..channels {
                    out[o * channels + c] += w * src[s * channels + c];
                }
            }
        }
        out
    }

    /// Warps a channel-major image `[C x H x W]`, filling invalid pixels with `fill`.
    pub fn apply_channel_major(&self, src: &[f64], channels: usize, fill: f64) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; src.len()];
        for c in 0..channels {
            for (o, taps) in self.taps.iter().enumerate() {
                out[c * hw + o] = if self.valid[o] {
                    taps.iter().map(|&(s, w)| w * src[c * hw + s]).sum()
                } else {
                    fill
                };
            }
        }
        out
    }
}
