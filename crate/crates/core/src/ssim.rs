//! Structural similarity with an 11x11 Gaussian window (sigma 1.5), evaluated
//! over the "valid" window positions, plus its analytic gradient.

use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
/// `(0.01 * L)^2` and `(0.03 * L)^2` for dynamic range `L = 1`.
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn window_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable correlation over valid positions: `(h, w) -> (h - 10, w - 10)`.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().zip(&row[x..x + WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (u, t) in taps.iter().enumerate() {
            let line = &tmp[(y + u) * ow..(y + u + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(line) {
                *o += t * v;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: `(h - 10, w - 10) -> (h, w)`.
fn filter_valid_adjoint(g: &[f64], h: usize, w: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        for (u, t) in taps.iter().enumerate() {
            let line = &mut tmp[(y + u) * ow..(y + u + 1) * ow];
            for (d, v) in line.iter_mut().zip(&g[y * ow..(y + 1) * ow]) {
                *d += t * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let row = &mut out[y * w..(y + 1) * w];
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (d, t) in row[x..x + WINDOW].iter_mut().zip(taps) {
                *d += t * v;
            }
        }
    }
    out
}

struct Moments {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn moments(a: &[f32], b: &[f32], h: usize, w: usize, taps: &[f64; WINDOW]) -> Moments {
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    Moments {
        mx: filter_valid(&x, h, w, taps),
        my: filter_valid(&y, h, w, taps),
        exx: filter_valid(&xx, h, w, taps),
        eyy: filter_valid(&yy, h, w, taps),
        exy: filter_valid(&xy, h, w, taps),
    }
}

fn check(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<()> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape("ssim", format!("{h}x{w}"), format!("{} / {} values", a.len(), b.len())));
    }
    if h < WINDOW || w < WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {WINDOW}x{WINDOW}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Mean SSIM between two `h x w` single-channel images in `[0, 1]`.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64> {
    check(a, b, h, w)?;
    let taps = window_taps();
    let m = moments(a, b, h, w, &taps);
    let total: f64 = (0..m.mx.len())
        .map(|i| {
            let (mx, my) = (m.mx[i], m.my[i]);
            let sxx = m.exx[i] - mx * mx;
            let syy = m.eyy[i] - my * my;
            let sxy = m.exy[i] - mx * my;
            ((2.0 * mx * my + C1) * (2.0 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))
        })
        .sum();
    Ok(total / m.mx.len() as f64)
}

/// SSIM and its gradient with respect to `a` (`b` held fixed).
pub fn ssim_with_grad(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<(f64, Vec<f32>)> {
    check(a, b, h, w)?;
    let taps = window_taps();
    let m = moments(a, b, h, w, &taps);
    let count = m.mx.len();
    let inv = 1.0 / count as f64;
    let mut g_mean = vec![0.0; count];
    let mut g_exy = vec![0.0; count];
    let mut g_exx = vec![0.0; count];
    let mut total = 0.0;
    for i in 0..count {
        let (mx, my) = (m.mx[i], m.my[i]);
        let a1 = 2.0 * mx * my + C1;
        let a2 = 2.0 * (m.exy[i] - mx * my) + C2;
        let b1 = mx * mx + my * my + C1;
        let b2 = (m.exx[i] - mx * mx) + (m.eyy[i] - my * my) + C2;
        let den = b1 * b2;
        let s = a1 * a2 / den;
        total += s;
        g_mean[i] = inv * (2.0 * my * (a2 - a1) - s * 2.0 * mx * (b2 - b1)) / den;
        g_exy[i] = inv * 2.0 * a1 / den;
        g_exx[i] = -inv * s / b2;
    }
    let t_mean = filter_valid_adjoint(&g_mean, h, w, &taps);
    let t_exy = filter_valid_adjoint(&g_exy, h, w, &taps);
    let t_exx = filter_valid_adjoint(&g_exx, h, w, &taps);
    let grad = (0..h * w)
        .map(|q| (t_mean[q] + t_exy[q] * b[q] as f64 + 2.0 * t_exx[q] * a[q] as f64) as f32)
        .collect();
    Ok((total * inv, grad))
}
