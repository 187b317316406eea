//! Dense optical flow by polynomial expansion.
//!
//! Each pixel neighborhood is approximated by a quadratic polynomial
//! `f(x, y) = c + bx*x + by*y + axx*x^2 + ayy*y^2 + axy*x*y` under a Gaussian
//! applicability weight. Equating the expansions of the two frames yields a
//! per-pixel linear constraint on the displacement, which is accumulated over
//! an averaging window and solved. The estimate runs coarse-to-fine over an
//! image pyramid with a fixed number of refinement iterations per level.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageops::GrayImage;

#[derive(Debug, Error)]
pub enum FarnebackError {
    #[error("image {width}x{height} is smaller than the {winsize}-pixel window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        winsize: usize,
    },
    #[error("frame dimensions differ: {0}x{1} vs {2}x{3}")]
    FrameMismatch(usize, usize, usize, usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Estimator parameters; defaults follow the TSN protocol.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FarnebackParams {
    pub pyr_scale: f64,
    pub levels: usize,
    pub winsize: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        Self {
            pyr_scale: 0.5,
            levels: 5,
            winsize: 11,
            iterations: 5,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FarnebackParams {
    pub fn validate(&self) -> Result<(), FarnebackError> {
        if !(self.pyr_scale > 0.0 && self.pyr_scale < 1.0) {
            return Err(FarnebackError::InvalidParams(format!(
                "pyr_scale {} not in (0, 1)",
                self.pyr_scale
            )));
        }
        if self.levels < 1 {
            return Err(FarnebackError::InvalidParams("levels must be >= 1".into()));
        }
        if self.winsize % 2 == 0 {
            return Err(FarnebackError::InvalidParams(format!(
                "winsize {} must be odd",
                self.winsize
            )));
        }
        if self.poly_n % 2 == 0 {
            return Err(FarnebackError::InvalidParams(format!(
                "poly_n {} must be odd",
                self.poly_n
            )));
        }
        Ok(())
    }
}

/// Per-pixel horizontal (`u`) and vertical (`v`) displacement maps.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }
}

/// Polynomial expansion coefficients, five planes per image.
struct PolyExpansion {
    width: usize,
    height: usize,
    /// [bx, by, axx, ayy, axy] per pixel, plane-major.
    planes: Vec<Vec<f32>>,
}

/// The 1-D Gaussian applicability and the dual-basis inverse factors.
struct ExpansionKernel {
    half: isize,
    g: Vec<f64>,
    xg: Vec<f64>,
    xxg: Vec<f64>,
    inv_first: f64,       // 1 / m2, for the x and y coefficients
    inv_cross: f64,       // 1 / m2^2, for the xy coefficient
    inv_quad: [[f64; 3]; 3], // inverse of the (1, x^2, y^2) Gram block
}

impl ExpansionKernel {
    fn new(poly_n: usize, sigma: f64) -> Self {
        let half = poly_n as isize;
        let mut g = vec![0.0; 2 * poly_n + 1];
        let mut sum = 0.0;
        for i in -half..=half {
            let w = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp();
            g[(i + half) as usize] = w;
            sum += w;
        }
        for w in &mut g {
            *w /= sum;
        }
        let xg: Vec<f64> = (-half..=half)
            .map(|i| i as f64 * g[(i + half) as usize])
            .collect();
        let xxg: Vec<f64> = (-half..=half)
            .map(|i| (i * i) as f64 * g[(i + half) as usize])
            .collect();

        let m2: f64 = (-half..=half)
            .map(|i| (i * i) as f64 * g[(i + half) as usize])
            .sum();
        let m4: f64 = (-half..=half)
            .map(|i| (i * i * i * i) as f64 * g[(i + half) as usize])
            .sum();

        // Gram block for the correlated basis functions {1, x^2, y^2}.
        let q = m2 * m2;
        let m = [[1.0, m2, m2], [m2, m4, q], [m2, q, m4]];
        let inv_quad = invert3(&m);

        Self {
            half,
            g,
            xg,
            xxg,
            inv_first: 1.0 / m2,
            inv_cross: 1.0 / (m2 * m2),
            inv_quad,
        }
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
    inv
}

/// Separable windowed projection of the image onto the polynomial basis,
/// replicate-edge borders.
fn poly_expansion(img: &GrayImage, kernel: &ExpansionKernel) -> PolyExpansion {
    let (w, h) = (img.width, img.height);
    let half = kernel.half;

    // vertical pass: per pixel, (sum g*f, sum xg*f, sum xxg*f) over rows
    let mut t0 = vec![0.0f32; w * h];
    let mut t1 = vec![0.0f32; w * h];
    let mut t2 = vec![0.0f32; w * h];
    t0.par_chunks_mut(w)
        .zip(t1.par_chunks_mut(w))
        .zip(t2.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, ((r0, r1), r2))| {
            for x in 0..w {
                let mut s0 = 0.0f64;
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                for k in -half..=half {
                    let yy = (y as isize + k).clamp(0, h as isize - 1) as usize;
                    let f = f64::from(img.at(x, yy));
                    let ki = (k + half) as usize;
                    s0 += kernel.g[ki] * f;
                    s1 += kernel.xg[ki] * f;
                    s2 += kernel.xxg[ki] * f;
                }
                r0[x] = s0 as f32;
                r1[x] = s1 as f32;
                r2[x] = s2 as f32;
            }
        });

    // horizontal pass over the three row buffers yields the six projections
    let mut planes = vec![vec![0.0f32; w * h]; 5];
    let (p_bx, rest) = planes.split_at_mut(1);
    let (p_by, rest) = rest.split_at_mut(1);
    let (p_axx, rest) = rest.split_at_mut(1);
    let (p_ayy, p_axy) = rest.split_at_mut(1);

    p_bx[0]
        .par_chunks_mut(w)
        .zip(p_by[0].par_chunks_mut(w))
        .zip(p_axx[0].par_chunks_mut(w))
        .zip(p_ayy[0].par_chunks_mut(w))
        .zip(p_axy[0].par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, ((((bx_row, by_row), axx_row), ayy_row), axy_row))| {
            let row0 = &t0[y * w..(y + 1) * w];
            let row1 = &t1[y * w..(y + 1) * w];
            let row2 = &t2[y * w..(y + 1) * w];
            for x in 0..w {
                let mut p1 = 0.0f64; // 1
                let mut px = 0.0f64; // x
                let mut pxx = 0.0f64; // x^2
                let mut py = 0.0f64; // y
                let mut pxy = 0.0f64; // x*y
                let mut pyy = 0.0f64; // y^2
                for k in -half..=half {
                    let xx = (x as isize + k).clamp(0, w as isize - 1) as usize;
                    let ki = (k + half) as usize;
                    let f0 = f64::from(row0[xx]);
                    p1 += kernel.g[ki] * f0;
                    px += kernel.xg[ki] * f0;
                    pxx += kernel.xxg[ki] * f0;
                    py += kernel.g[ki] * f64::from(row1[xx]);
                    pxy += kernel.xg[ki] * f64::from(row1[xx]);
                    pyy += kernel.g[ki] * f64::from(row2[xx]);
                }
                let inv = &kernel.inv_quad;
                bx_row[x] = (px * kernel.inv_first) as f32;
                by_row[x] = (py * kernel.inv_first) as f32;
                axx_row[x] = (inv[1][0] * p1 + inv[1][1] * pxx + inv[1][2] * pyy) as f32;
                ayy_row[x] = (inv[2][0] * p1 + inv[2][1] * pxx + inv[2][2] * pyy) as f32;
                axy_row[x] = (pxy * kernel.inv_cross) as f32;
            }
        });

    PolyExpansion {
        width: w,
        height: h,
        planes,
    }
}

impl PolyExpansion {
    /// Bilinear sample of all five planes; coordinates clamped to the border.
    #[inline]
    fn sample(&self, fx: f32, fy: f32) -> [f32; 5] {
        let (w, h) = (self.width as isize, self.height as isize);
        let x0 = fx.floor() as isize;
        let y0 = fy.floor() as isize;
        let tx = f64::from(fx - x0 as f32);
        let ty = f64::from(fy - y0 as f32);
        let cl = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
        let (x0c, x1c) = (cl(x0, w), cl(x0 + 1, w));
        let (y0c, y1c) = (cl(y0, h), cl(y0 + 1, h));
        let mut out = [0.0f32; 5];
        for (o, plane) in out.iter_mut().zip(&self.planes) {
            let p00 = f64::from(plane[y0c * self.width + x0c]);
            let p10 = f64::from(plane[y0c * self.width + x1c]);
            let p01 = f64::from(plane[y1c * self.width + x0c]);
            let p11 = f64::from(plane[y1c * self.width + x1c]);
            let top = p00 * (1.0 - tx) + p10 * tx;
            let bot = p01 * (1.0 - tx) + p11 * tx;
            *o = (top * (1.0 - ty) + bot * ty) as f32;
        }
        out
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> [f32; 5] {
        let i = y * self.width + x;
        [
            self.planes[0][i],
            self.planes[1][i],
            self.planes[2][i],
            self.planes[3][i],
            self.planes[4][i],
        ]
    }
}

/// Builds the per-pixel normal equations `G d = h` for the current flow.
///
/// `m` holds five planes: G00, G01, G11, h0, h1.
fn update_matrices(r1: &PolyExpansion, r2: &PolyExpansion, flow: &FlowField, m: &mut [Vec<f32>]) {
    let (w, h) = (r1.width, r1.height);
    let rows: Vec<usize> = (0..h).collect();
    let results: Vec<Vec<[f32; 5]>> = rows
        .par_iter()
        .map(|&y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let i = y * w + x;
                let du = flow.u[i];
                let dv = flow.v[i];
                let c1 = r1.at(x, y);
                let c2 = r2.sample(x as f32 + du, y as f32 + dv);

                // averaged quadratic form A and first-order difference
                let a00 = 0.5 * f64::from(c1[2] + c2[2]); // axx
                let a11 = 0.5 * f64::from(c1[3] + c2[3]); // ayy
                let a01 = 0.25 * f64::from(c1[4] + c2[4]); // axy / 2
                let db0 = -0.5 * f64::from(c2[0] - c1[0]) + a00 * f64::from(du) + a01 * f64::from(dv);
                let db1 = -0.5 * f64::from(c2[1] - c1[1]) + a01 * f64::from(du) + a11 * f64::from(dv);

                let g00 = a00 * a00 + a01 * a01;
                let g01 = a01 * (a00 + a11);
                let g11 = a01 * a01 + a11 * a11;
                let h0 = a00 * db0 + a01 * db1;
                let h1 = a01 * db0 + a11 * db1;
                row.push([g00 as f32, g01 as f32, g11 as f32, h0 as f32, h1 as f32]);
            }
            row
        })
        .collect();
    for (y, row) in results.iter().enumerate() {
        for (x, vals) in row.iter().enumerate() {
            for (p, v) in vals.iter().enumerate() {
                m[p][y * w + x] = *v;
            }
        }
    }
}

/// Separable box blur with replicate borders, f64 accumulation.
fn box_blur(plane: &[f32], w: usize, h: usize, radius: usize) -> Vec<f32> {
    let r = radius as isize;
    let norm = 1.0 / (2.0 * r as f64 + 1.0);
    let mut tmp = vec![0.0f32; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let mut s = 0.0f64;
            for k in -r..=r {
                let xx = (x as isize + k).clamp(0, w as isize - 1) as usize;
                s += f64::from(plane[y * w + xx]);
            }
            row[x] = (s * norm) as f32;
        }
    });
    let mut out = vec![0.0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let mut s = 0.0f64;
            for k in -r..=r {
                let yy = (y as isize + k).clamp(0, h as isize - 1) as usize;
                s += f64::from(tmp[yy * w + x]);
            }
            row[x] = (s * norm) as f32;
        }
    });
    out
}

/// Solves the blurred normal equations into a new flow field.
fn solve_flow(m: &[Vec<f32>], w: usize, h: usize, prior: &FlowField) -> FlowField {
    let mut flow = FlowField::zeros(w, h);
    flow.u
        .par_chunks_mut(w)
        .zip(flow.v.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (urow, vrow))| {
            for x in 0..w {
                let i = y * w + x;
                let g00 = f64::from(m[0][i]);
                let g01 = f64::from(m[1][i]);
                let g11 = f64::from(m[2][i]);
                let h0 = f64::from(m[3][i]);
                let h1 = f64::from(m[4][i]);
                let det = g00 * g11 - g01 * g01;
                if det.abs() > 1e-9 {
                    urow[x] = ((g11 * h0 - g01 * h1) / det) as f32;
                    vrow[x] = ((g00 * h1 - g01 * h0) / det) as f32;
                } else {
                    urow[x] = prior.u[i];
                    vrow[x] = prior.v[i];
                }
            }
        });
    flow
}

/// Separable Gaussian blur (replicate borders) used for pyramid smoothing.
fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = ((sigma * 2.5).round() as isize).max(1);
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (w, h) = (img.width, img.height);
    let mut tmp = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (ki, k) in (-radius..=radius).enumerate() {
                let xx = (x as isize + k).clamp(0, w as isize - 1) as usize;
                s += kernel[ki] * f64::from(img.at(xx, y));
            }
            tmp.set(x, y, s as f32);
        }
    }
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (ki, k) in (-radius..=radius).enumerate() {
                let yy = (y as isize + k).clamp(0, h as isize - 1) as usize;
                s += kernel[ki] * f64::from(tmp.at(x, yy));
            }
            out.set(x, y, s as f32);
        }
    }
    out
}

/// Estimates dense flow such that `frame_a(x) ≈ frame_b(x + flow(x))`.
pub fn estimate_flow(
    frame_a: &GrayImage,
    frame_b: &GrayImage,
    params: &FarnebackParams,
) -> Result<FlowField, FarnebackError> {
    params.validate()?;
    if frame_a.width != frame_b.width || frame_a.height != frame_b.height {
        return Err(FarnebackError::FrameMismatch(
            frame_a.width,
            frame_a.height,
            frame_b.width,
            frame_b.height,
        ));
    }
    let (w, h) = (frame_a.width, frame_a.height);
    if w < params.winsize || h < params.winsize {
        return Err(FarnebackError::ImageTooSmall {
            width: w,
            height: h,
            winsize: params.winsize,
        });
    }

    // deepest level whose dimensions still cover the averaging window
    let mut level_count = 1;
    for k in 1..params.levels {
        let scale = params.pyr_scale.powi(k as i32);
        let lw = (w as f64 * scale).round() as usize;
        let lh = (h as f64 * scale).round() as usize;
        if lw < params.winsize || lh < params.winsize {
            break;
        }
        level_count = k + 1;
    }

    let kernel = ExpansionKernel::new(params.poly_n, params.poly_sigma);
    let radius = params.winsize / 2;

    let mut flow: Option<FlowField> = None;
    for level in (0..level_count).rev() {
        let scale = params.pyr_scale.powi(level as i32);
        let lw = (w as f64 * scale).round() as usize;
        let lh = (h as f64 * scale).round() as usize;

        // smooth proportionally to the downscale factor, then resize
        let sigma = (1.0 / scale - 1.0) * 0.5;
        let (img_a, img_b) = if level == 0 {
            (frame_a.clone(), frame_b.clone())
        } else {
            (
                gaussian_blur(frame_a, sigma).resize_bilinear(lw, lh),
                gaussian_blur(frame_b, sigma).resize_bilinear(lw, lh),
            )
        };

        let mut level_flow = match flow.take() {
            None => FlowField::zeros(lw, lh),
            Some(prev) => {
                // upscale the coarser estimate and rescale displacements
                let ratio = 1.0 / params.pyr_scale;
                let mut up = FlowField::zeros(lw, lh);
                let gu = GrayImage {
                    width: prev.width,
                    height: prev.height,
                    data: prev.u,
                };
                let gv = GrayImage {
                    width: prev.width,
                    height: prev.height,
                    data: prev.v,
                };
                let ru = gu.resize_bilinear(lw, lh);
                let rv = gv.resize_bilinear(lw, lh);
                for i in 0..lw * lh {
                    up.u[i] = ru.data[i] * ratio as f32;
                    up.v[i] = rv.data[i] * ratio as f32;
                }
                up
            }
        };

        let r1 = poly_expansion(&img_a, &kernel);
        let r2 = poly_expansion(&img_b, &kernel);
        let mut m = vec![vec![0.0f32; lw * lh]; 5];
        for _ in 0..params.iterations {
            update_matrices(&r1, &r2, &level_flow, &mut m);
            for plane in m.iter_mut() {
                *plane = box_blur(plane, lw, lh, radius);
            }
            level_flow = solve_flow(&m, lw, lh, &level_flow);
        }
        flow = Some(level_flow);
    }

    Ok(flow.expect("at least one pyramid level"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Smooth random texture: base noise blurred to create wide gradients.
    pub(crate) fn textured_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = crate::rng::stream(seed, "texture", 0);
        let mut img = GrayImage::new(w, h);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.0f32..255.0);
        }
        gaussian_blur(&img, 1.5)
    }

    /// Crop-shifted pair: frame_b is frame_a displaced by (dx, dy) without
    /// border invention, by cropping two windows from a larger texture.
    pub(crate) fn translated_pair(
        w: usize,
        h: usize,
        dx: i32,
        dy: i32,
        seed: u64,
    ) -> (GrayImage, GrayImage) {
        let margin = 16usize;
        let tex = textured_image(w + 2 * margin, h + 2 * margin, seed);
        let crop = |ox: i32, oy: i32| {
            let mut img = GrayImage::new(w, h);
            for y in 0..h {
                for x in 0..w {
                    img.set(
                        x,
                        y,
                        tex.at(
                            (x as i32 + margin as i32 + ox) as usize,
                            (y as i32 + margin as i32 + oy) as usize,
                        ),
                    );
                }
            }
            img
        };
        // frame_b(x) = frame_a(x - d)  =>  frame_a(x) = frame_b(x + d)
        (crop(0, 0), crop(-dx, -dy))
    }

    fn interior_mean_flow(flow: &FlowField, margin: usize) -> (f64, f64) {
        let mut su = 0.0;
        let mut sv = 0.0;
        let mut n = 0usize;
        for y in margin..flow.height - margin {
            for x in margin..flow.width - margin {
                su += f64::from(flow.u[y * flow.width + x]);
                sv += f64::from(flow.v[y * flow.width + x]);
                n += 1;
            }
        }
        (su / n as f64, sv / n as f64)
    }

    pub(crate) fn interior_epe(flow: &FlowField, dx: f64, dy: f64, margin: usize) -> f64 {
        let mut s = 0.0;
        let mut n = 0usize;
        for y in margin..flow.height - margin {
            for x in margin..flow.width - margin {
                let du = f64::from(flow.u[y * flow.width + x]) - dx;
                let dv = f64::from(flow.v[y * flow.width + x]) - dy;
                s += (du * du + dv * dv).sqrt();
                n += 1;
            }
        }
        s / n as f64
    }

    #[test]
    fn zero_motion_gives_zero_flow() {
        let img = textured_image(64, 64, 1);
        let flow = estimate_flow(&img, &img, &FarnebackParams::default()).unwrap();
        let mean_mag: f64 = flow
            .u
            .iter()
            .zip(&flow.v)
            .map(|(&u, &v)| f64::from((u * u + v * v).sqrt()))
            .sum::<f64>()
            / (64.0 * 64.0);
        assert!(mean_mag < 0.1, "mean |flow| = {mean_mag}");
    }

    #[test]
    fn recovers_rightward_translation() {
        let (a, b) = translated_pair(96, 96, 3, 0, 7);
        let flow = estimate_flow(&a, &b, &FarnebackParams::default()).unwrap();
        let (mu, mv) = interior_mean_flow(&flow, 12);
        assert!((2.5..=3.5).contains(&mu), "mean u = {mu}");
        assert!((-0.5..=0.5).contains(&mv), "mean v = {mv}");
    }

    #[test]
    fn recovers_diagonal_translation() {
        let (a, b) = translated_pair(96, 96, -2, 4, 13);
        let flow = estimate_flow(&a, &b, &FarnebackParams::default()).unwrap();
        let epe = interior_epe(&flow, -2.0, 4.0, 12);
        assert!(epe <= 0.5, "endpoint error = {epe}");
    }

    #[test]
    fn too_small_image_rejected() {
        let img = GrayImage::new(8, 8);
        assert!(matches!(
            estimate_flow(&img, &img, &FarnebackParams::default()),
            Err(FarnebackError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn mismatched_frames_rejected() {
        let a = GrayImage::new(32, 32);
        let b = GrayImage::new(16, 32);
        assert!(matches!(
            estimate_flow(&a, &b, &FarnebackParams::default()),
            Err(FarnebackError::FrameMismatch(..))
        ));
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = FarnebackParams::default();
        p.winsize = 10;
        assert!(p.validate().is_err());
        let mut p = FarnebackParams::default();
        p.pyr_scale = 1.0;
        assert!(p.validate().is_err());
    }
}
