//! Synthetic test data: procedural textured scenes and defocus pairs built by
//! blurring complementary regions of one sharp source.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Plane, RealImage};

/// Normalized Gaussian taps truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma as f64 * sigma as f64)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / sum) as f32).collect()
}

/// Separable Gaussian blur with edge-clamped borders.
pub fn gaussian_blur(p: &Plane, sigma: f32) -> Plane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = p.dims();
    let tmp = Plane::from_fn(w, h, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, t)| t * p.get_clamped(x as isize + i as isize - r, y as isize))
            .sum()
    });
    Plane::from_fn(w, h, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, t)| t * tmp.get_clamped(x as isize, y as isize + i as isize - r))
            .sum()
    })
}

/// Region of image A that is defocused; image B is defocused on the rest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    /// Left half.
    VerticalHalf,
    /// Top half.
    HorizontalHalf,
    /// A disc placed from the seed.
    Circle,
    /// Middle vertical third.
    Thirds,
}

impl Geometry {
    pub const ALL: [Geometry; 4] = [
        Geometry::VerticalHalf,
        Geometry::HorizontalHalf,
        Geometry::Circle,
        Geometry::Thirds,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Geometry::VerticalHalf => "vertical-half",
            Geometry::HorizontalHalf => "horizontal-half",
            Geometry::Circle => "circle",
            Geometry::Thirds => "thirds",
        }
    }
}

impl std::str::FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Geometry::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown geometry `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub source: RealImage,
    pub sigma: f32,
    pub geometry: Geometry,
    pub seed: u64,
}

/// Two partially defocused views of one sharp source.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub a: RealImage,
    pub b: RealImage,
    pub truth: RealImage,
    /// 1 where `a` is in focus, 0 where `b` is.
    pub mask: Plane,
}

fn blur_mask(geometry: Geometry, w: usize, h: usize, seed: u64) -> Plane {
    match geometry {
        Geometry::VerticalHalf => Plane::from_fn(w, h, |x, _| (x < w / 2) as u8 as f32),
        Geometry::HorizontalHalf => Plane::from_fn(w, h, |_, y| (y < h / 2) as u8 as f32),
        Geometry::Thirds => Plane::from_fn(w, h, |x, _| (x >= w / 3 && x < 2 * w / 3) as u8 as f32),
        Geometry::Circle => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = w.min(h) as f32;
            let radius = m * rng.random_range(0.22..0.34);
            let cx = rng.random_range(radius..(w as f32 - radius).max(radius + 1.0));
            let cy = rng.random_range(radius..(h as f32 - radius).max(radius + 1.0));
            Plane::from_fn(w, h, |x, y| {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                (dx * dx + dy * dy <= radius * radius) as u8 as f32
            })
        }
    }
}

fn composite(sharp: &Plane, blurred: &Plane, blur_here: &Plane) -> Plane {
    let data = sharp
        .data()
        .iter()
        .zip(blurred.data())
        .zip(blur_here.data())
        .map(|((&s, &b), &m)| if m > 0.5 { b } else { s })
        .collect();
    Plane::new(sharp.width(), sharp.height(), data).expect("same dims")
}

pub fn synth_pair(spec: &SynthSpec) -> Result<SynthPair> {
    if !(spec.sigma > 0.0) {
        return Err(Error::invalid("blur sigma must be positive"));
    }
    let (w, h) = spec.source.dims();
    let min_side = 4.0 * spec.sigma;
    if (w as f32) <= min_side || (h as f32) <= min_side {
        return Err(Error::invalid(format!(
            "source {w}x{h} must exceed 4 sigma = {min_side} in both dimensions"
        )));
    }
    let blur_a = blur_mask(spec.geometry, w, h, spec.seed);
    let ones = blur_a.data().iter().filter(|&&v| v > 0.5).count();
    if ones == 0 || ones == w * h {
        return Err(Error::invalid(format!(
            "{} mask is degenerate for a {w}x{h} source",
            spec.geometry.name()
        )));
    }
    let blur_b = blur_a.map(|v| 1.0 - v);
    let blurred = spec.source.map_channels(|p| gaussian_blur(p, spec.sigma));
    let build = |mask: &Plane| {
        RealImage::new(
            spec.source
                .channels()
                .iter()
                .zip(blurred.channels())
                .map(|(s, b)| composite(s, b, mask))
                .collect(),
        )
        .expect("same layout as source")
    };
    Ok(SynthPair {
        a: build(&blur_a),
        b: build(&blur_b),
        truth: spec.source.clone(),
        mask: blur_b,
    })
}

/// `count` views where view `k` is sharp only in the `k`-th vertical band.
pub fn synth_stack(source: &RealImage, sigma: f32, count: usize) -> Result<Vec<RealImage>> {
    if count < 2 {
        return Err(Error::invalid("a focal stack needs at least two views"));
    }
    let (w, h) = source.dims();
    if w < count {
        return Err(Error::invalid("source narrower than the band count"));
    }
    let blurred = source.map_channels(|p| gaussian_blur(p, sigma));
    Ok((0..count)
        .map(|k| {
            let lo = k * w / count;
            let hi = (k + 1) * w / count;
            let blur_here = Plane::from_fn(w, h, |x, _| (!(lo..hi).contains(&x)) as u8 as f32);
            RealImage::new(
                source
                    .channels()
                    .iter()
                    .zip(blurred.channels())
                    .map(|(s, b)| composite(s, b, &blur_here))
                    .collect(),
            )
            .expect("same layout")
        })
        .collect())
}

/// Smoothly interpolated lattice noise in roughly `[0, 1]`.
struct ValueNoise {
    cell: f32,
    cols: usize,
    lattice: Vec<f32>,
}

impl ValueNoise {
    fn new(w: usize, h: usize, cell: f32, rng: &mut ChaCha8Rng) -> Self {
        let cols = (w as f32 / cell).ceil() as usize + 2;
        let rows = (h as f32 / cell).ceil() as usize + 2;
        Self {
            cell,
            cols,
            lattice: (0..cols * rows).map(|_| rng.random::<f32>()).collect(),
        }
    }

    fn at(&self, x: f32, y: f32) -> f32 {
        let (fx, fy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - ix as f32), smooth(fy - iy as f32));
        let v = |i: usize, j: usize| self.lattice[j * self.cols + i];
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

enum ShapeKind {
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32, cos: f32, sin: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Stripe { nx: f32, ny: f32, offset: f32, half_width: f32 },
}

impl ShapeKind {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            ShapeKind::Ellipse { cx, cy, rx, ry, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = (dx * cos + dy * sin) / rx;
                let v = (-dx * sin + dy * cos) / ry;
                u * u + v * v <= 1.0
            }
            ShapeKind::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            ShapeKind::Stripe { nx, ny, offset, half_width } => (x * nx + y * ny - offset).abs() <= half_width,
        }
    }
}

struct Layer {
    shape: ShapeKind,
    base: f32,
    amplitude: f32,
    texture: ValueNoise,
    grating: (f32, f32, f32),
}

/// A deterministic textured scene: multi-octave noise background, overlapping
/// textured shapes, and fine grain everywhere so no region is flat.
pub fn scene(width: usize, height: usize, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7e);
    let octaves: Vec<(ValueNoise, f32)> = [48.0, 24.0, 12.0, 6.0, 3.0]
        .iter()
        .enumerate()
        .map(|(i, &cell)| (ValueNoise::new(width, height, cell, &mut rng), 0.55f32.powi(i as i32)))
        .collect();
    let norm: f32 = octaves.iter().map(|(_, a)| a).sum();
    let grain = ValueNoise::new(width, height, 1.5, &mut rng);

    let (wf, hf) = (width as f32, height as f32);
    let n_layers = rng.random_range(6..14);
    let layers: Vec<Layer> = (0..n_layers)
        .map(|_| {
            let shape = match rng.random_range(0..3) {
                0 => {
                    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
                    ShapeKind::Ellipse {
                        cx: rng.random_range(0.0..wf),
                        cy: rng.random_range(0.0..hf),
                        rx: rng.random_range(0.05..0.3) * wf,
                        ry: rng.random_range(0.05..0.3) * hf,
                        cos: angle.cos(),
                        sin: angle.sin(),
                    }
                }
                1 => {
                    let x0 = rng.random_range(-0.1..0.8) * wf;
                    let y0 = rng.random_range(-0.1..0.8) * hf;
                    ShapeKind::Rect {
                        x0,
                        y0,
                        x1: x0 + rng.random_range(0.1..0.5) * wf,
                        y1: y0 + rng.random_range(0.1..0.5) * hf,
                    }
                }
                _ => {
                    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
                    ShapeKind::Stripe {
                        nx: angle.cos(),
                        ny: angle.sin(),
                        offset: rng.random_range(0.0..wf.max(hf)),
                        half_width: rng.random_range(1.5..0.06 * wf.max(hf) + 2.0),
                    }
                }
            };
            let freq = rng.random_range(0.15..1.2f32);
            let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
            Layer {
                shape,
                base: rng.random_range(0.1..0.9),
                amplitude: rng.random_range(0.05..0.2),
                texture: ValueNoise::new(width, height, rng.random_range(2.0..8.0), &mut rng),
                grating: (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..0.12)),
            }
        })
        .collect();

    Plane::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f32, y as f32);
        let mut v = 0.2 + 0.6 * octaves.iter().map(|(n, a)| a * n.at(fx, fy)).sum::<f32>() / norm;
        for layer in &layers {
            if layer.shape.contains(fx, fy) {
                let (gx, gy, ga) = layer.grating;
                v = layer.base
                    + layer.amplitude * (layer.texture.at(fx, fy) - 0.5) * 2.0
                    + ga * (gx * fx + gy * fy).sin();
            }
        }
        v += 0.06 * (grain.at(fx, fy) - 0.5);
        v.clamp(0.0, 1.0)
    })
}

/// Colour variant of [`scene`]: the gray scene modulated by a smooth tint.
pub fn scene_rgb(width: usize, height: usize, seed: u64) -> RealImage {
    let gray = scene(width, height, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0101);
    let tints: Vec<ValueNoise> = (0..3).map(|_| ValueNoise::new(width, height, 40.0, &mut rng)).collect();
    let channels = tints
        .iter()
        .map(|t| {
            Plane::from_fn(width, height, |x, y| {
                (gray.get(x, y) * (0.7 + 0.5 * t.at(x as f32, y as f32))).clamp(0.0, 1.0)
            })
        })
        .collect();
    RealImage::new(channels).expect("three equal planes")
}
