//! Shared dense-grid kernels (bilinear sampling, box filtering, small
//! convolutions). Both the reference loss path in `photometric` and the
//! autodiff ops in `tape` call these, so the two forward paths agree bitwise.

use alloc::vec;
use alloc::vec::Vec;
// Needed for float math in no_std builds; std builds resolve these
// methods inherently and then see this import as unused.
#[allow(unused_imports)]
use num_traits::Float;

/// Coordinates this close to an integer snap onto it. Projection of an
/// unprojected pixel reproduces the pixel only up to a few ulps; snapping
/// makes identity warps exact and keeps sampling deterministic under such
/// round-off.
pub(crate) const COORD_SNAP_EPS: f64 = 1e-7;

pub(crate) fn snap_to_grid(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < COORD_SNAP_EPS {
        r
    } else {
        c
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear cell for a coordinate pair already clamped to
/// `[0, w-1] x [0, h-1]`: corner indices plus fractional weights.
pub(crate) fn bilinear_cell(
    u: f64,
    v: f64,
    height: usize,
    width: usize,
) -> (usize, usize, usize, usize, f64, f64) {
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    (x0, x1, y0, y1, u - x0 as f64, v - y0 as f64)
}

pub(crate) fn bilinear_sample(data: &[f64], height: usize, width: usize, u: f64, v: f64) -> f64 {
    let (x0, x1, y0, y1, fx, fy) = bilinear_cell(u, v, height, width);
    let top = data[y0 * width + x0] * (1.0 - fx) + data[y0 * width + x1] * fx;
    let bot = data[y1 * width + x0] * (1.0 - fx) + data[y1 * width + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// 3x3 box mean with replicate-clamped borders (every window averages nine
/// taps; out-of-range taps repeat the nearest edge sample).
pub(crate) fn box3_mean(data: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                for dx in -1i64..=1 {
                    let xx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                    acc += data[yy * width + xx];
                }
            }
            out[y * width + x] = acc / 9.0;
        }
    }
    out
}

/// Adjoint of [`box3_mean`]: scatters each output cotangent back to its nine
/// (clamped) taps. Clamping makes the filter non-symmetric at borders, so the
/// adjoint is a scatter rather than a second box filter.
pub(crate) fn box3_mean_adjoint(grad_out: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; grad_out.len()];
    for y in 0..height {
        for x in 0..width {
            let g = grad_out[y * width + x] / 9.0;
            for dy in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                for dx in -1i64..=1 {
                    let xx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                    out[yy * width + xx] += g;
                }
            }
        }
    }
    out
}

/// 3x3 convolution with zero padding 1 over a `[cin, h, w]` input producing
/// `[cout, h', w']` at the given stride. Weights are `[cout, cin, 3, 3]`
/// row-major, bias one value per output channel.
pub(crate) fn conv3x3(
    input: &[f64],
    cin: usize,
    height: usize,
    width: usize,
    weights: &[f64],
    bias: &[f64],
    cout: usize,
    stride: usize,
) -> Vec<f64> {
    debug_assert_eq!(input.len(), cin * height * width);
    debug_assert_eq!(weights.len(), cout * cin * 9);
    debug_assert_eq!(bias.len(), cout);
    let oh = (height + stride - 1) / stride;
    let ow = (width + stride - 1) / stride;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[co];
                let iy0 = (oy * stride) as i64 - 1;
                let ix0 = (ox * stride) as i64 - 1;
                for ci in 0..cin {
                    let plane = &input[ci * height * width..(ci + 1) * height * width];
                    let wbase = (co * cin + ci) * 9;
                    for ky in 0..3i64 {
                        let yy = iy0 + ky;
                        if yy < 0 || yy >= height as i64 {
                            continue;
                        }
                        for kx in 0..3i64 {
                            let xx = ix0 + kx;
                            if xx < 0 || xx >= width as i64 {
                                continue;
                            }
                            acc += plane[yy as usize * width + xx as usize]
                                * weights[wbase + (ky * 3 + kx) as usize];
                        }
                    }
                }
                out[co * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
    out
}

/// Output spatial size of [`conv3x3`] for a given input size and stride.
pub(crate) fn conv3x3_out_dim(dim: usize, stride: usize) -> usize {
    (dim + stride - 1) / stride
}

/// Nearest-neighbor 2x upsampling of a `[c, h, w]` grid.
pub(crate) fn upsample2x(input: &[f64], channels: usize, height: usize, width: usize) -> Vec<f64> {
    let (oh, ow) = (height * 2, width * 2);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                out[c * oh * ow + y * ow + x] =
                    input[c * height * width + (y / 2) * width + (x / 2)];
            }
        }
    }
    out
}
