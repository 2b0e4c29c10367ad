//! Decision-map cleanup: disk morphology, small-region removal and guided
//! filtering.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::fusion::{fuse_weighted_plane, DecisionMap, FusionConfig, Stage};
use crate::image::Plane;

/// Disk structuring element: `dx² + dy² <= radius²`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiskElement {
    radius: usize,
    /// Horizontal half-extent of the disk for each `dy` in `-radius..=radius`.
    half_widths: Vec<usize>,
}

impl DiskElement {
    pub fn new(radius: usize) -> Self {
        let r = radius as isize;
        let half_widths = (-r..=r)
            .map(|dy| {
                let mut hw = 0;
                while ((hw + 1) * (hw + 1)) as isize + dy * dy <= r * r {
                    hw += 1;
                }
                hw as usize
            })
            .collect();
        Self { radius, half_widths }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn contains(&self, dx: isize, dy: isize) -> bool {
        let r = self.radius as isize;
        dx * dx + dy * dy <= r * r
    }

    /// Row-major `(2r+1)²` boolean mask.
    pub fn mask(&self) -> Vec<bool> {
        let r = self.radius as isize;
        (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .map(|(dx, dy)| self.contains(dx, dy))
            .collect()
    }
}

pub(crate) fn ensure_binary(p: &Plane) -> Result<()> {
    match p.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(index) => Err(Error::NotBinary {
            value: p.data()[index],
            index,
        }),
        None => Ok(()),
    }
}

/// Per-row prefix counts of 1-pixels: `counts[y * (w + 1) + x]` is the number
/// of ones in row `y` before column `x`.
fn row_prefix_counts(p: &Plane) -> Vec<u32> {
    let (w, h) = p.dims();
    let mut counts = vec![0u32; (w + 1) * h];
    for y in 0..h {
        let row = &p.data()[y * w..(y + 1) * w];
        let base = y * (w + 1);
        for (x, &v) in row.iter().enumerate() {
            counts[base + x + 1] = counts[base + x] + (v == 1.0) as u32;
        }
    }
    counts
}

/// Disk-window scan shared by erosion and dilation. `outside_is_one` fixes
/// the value of out-of-image pixels.
fn morph(p: &Plane, disk: &DiskElement, erode: bool) -> Plane {
    let (w, h) = p.dims();
    let counts = row_prefix_counts(p);
    let r = disk.radius as isize;
    Plane::from_fn(w, h, |x, y| {
        for (i, &hw) in disk.half_widths.iter().enumerate() {
            let yy = y as isize + i as isize - r;
            if yy < 0 || yy >= h as isize {
                // Erosion sees ones outside; dilation sees zeros.
                continue;
            }
            let lo = (x as isize - hw as isize).max(0) as usize;
            let hi = (x + hw + 1).min(w);
            let base = yy as usize * (w + 1);
            let ones = (counts[base + hi] - counts[base + lo]) as usize;
            if erode && ones < hi - lo {
                return 0.0;
            }
            if !erode && ones > 0 {
                return 1.0;
            }
        }
        if erode {
            1.0
        } else {
            0.0
        }
    })
}

/// Binary erosion; pixels outside the image count as 1.
pub fn erode(p: &Plane, disk: &DiskElement) -> Result<Plane> {
    ensure_binary(p)?;
    Ok(morph(p, disk, true))
}

/// Binary dilation; pixels outside the image count as 0.
pub fn dilate(p: &Plane, disk: &DiskElement) -> Result<Plane> {
    ensure_binary(p)?;
    Ok(morph(p, disk, false))
}

pub fn open(p: &Plane, disk: &DiskElement) -> Result<Plane> {
    dilate(&erode(p, disk)?, disk)
}

pub fn close(p: &Plane, disk: &DiskElement) -> Result<Plane> {
    erode(&dilate(p, disk)?, disk)
}

/// Opening followed by closing, repeated `passes` times.
pub fn morph_open_close(d: &DecisionMap, radius: usize, passes: usize) -> Result<DecisionMap> {
    if radius == 0 {
        return Err(Error::invalid("morphology radius must be at least 1"));
    }
    let disk = DiskElement::new(radius);
    let mut p = d.binary_plane()?.clone();
    for _ in 0..passes {
        p = close(&open(&p, &disk)?, &disk)?;
    }
    DecisionMap::new(p, Stage::VerifiedBinary)
}

/// 8-connected components of the pixels equal to `polarity`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionLabeling {
    pub width: usize,
    pub height: usize,
    pub polarity: bool,
    /// Label 0 holds every pixel of the other polarity; components are `1..`.
    pub labels: Vec<u32>,
    /// Pixel count per label, indexed by label.
    pub counts: Vec<usize>,
}

impl RegionLabeling {
    pub fn component_count(&self) -> usize {
        self.counts.len() - 1
    }
}

pub fn label_regions(p: &Plane, polarity: bool) -> Result<RegionLabeling> {
    ensure_binary(p)?;
    let (w, h) = p.dims();
    let target = polarity as u8 as f32;
    let data = p.data();
    let mut labels = vec![0u32; w * h];
    let mut counts = vec![data.iter().filter(|&&v| v != target).count()];
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if data[start] != target || labels[start] != 0 {
            continue;
        }
        let label = counts.len() as u32;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if data[j] == target && labels[j] == 0 {
                        labels[j] = label;
                        queue.push_back(j);
                    }
                }
            }
        }
        counts.push(size);
    }
    Ok(RegionLabeling {
        width: w,
        height: h,
        polarity,
        labels,
        counts,
    })
}

fn flip_small(p: &Plane, polarity: bool, threshold: usize) -> Result<Plane> {
    let labeling = label_regions(p, polarity)?;
    let flipped = (!polarity) as u8 as f32;
    let data = p
        .data()
        .iter()
        .zip(&labeling.labels)
        .map(|(&v, &l)| if l != 0 && labeling.counts[l as usize] < threshold { flipped } else { v })
        .collect();
    Plane::new(p.width(), p.height(), data)
}

/// Flips foreground components smaller than `threshold` pixels to 0, then
/// background components smaller than `threshold` to 1.
pub fn remove_small_regions(d: &DecisionMap, threshold: usize) -> Result<DecisionMap> {
    let p = d.binary_plane()?;
    let p = flip_small(p, true, threshold)?;
    let p = flip_small(&p, false, threshold)?;
    DecisionMap::new(p, Stage::VerifiedBinary)
}

/// Summed-area table with shrinking-window box means.
struct Integral {
    w: usize,
    h: usize,
    table: Vec<f64>,
}

impl Integral {
    fn new(w: usize, h: usize, values: impl Iterator<Item = f64>) -> Self {
        let mut table = vec![0.0; (w + 1) * (h + 1)];
        let mut values = values;
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += values.next().expect("w*h values");
                table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, h, table }
    }

    fn box_mean(&self, x: usize, y: usize, r: usize) -> f64 {
        let (x0, y0) = (x.saturating_sub(r), y.saturating_sub(r));
        let (x1, y1) = ((x + r + 1).min(self.w), (y + r + 1).min(self.h));
        let s = self.w + 1;
        let sum = self.table[y1 * s + x1] - self.table[y0 * s + x1] - self.table[y1 * s + x0]
            + self.table[y0 * s + x0];
        sum / ((x1 - x0) * (y1 - y0)) as f64
    }

    fn means(&self, r: usize) -> Vec<f64> {
        (0..self.h)
            .flat_map(|y| (0..self.w).map(move |x| (x, y)))
            .map(|(x, y)| self.box_mean(x, y, r))
            .collect()
    }
}

/// Edge-preserving smoothing of `input` steered by `guidance`. Windows shrink
/// at the border instead of padding.
pub fn guided_filter(guidance: &Plane, input: &Plane, radius: usize, eps: f32) -> Result<Plane> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("guided filter eps must be positive, got {eps}")));
    }
    if radius == 0 {
        return Err(Error::invalid("guided filter radius must be at least 1"));
    }
    guidance.expect_same_dims("guided_filter", input)?;
    let (w, h) = guidance.dims();
    let gi = guidance.data().iter().map(|&v| v as f64);
    let pi = input.data().iter().map(|&v| v as f64);
    let mean_i = Integral::new(w, h, gi.clone()).means(radius);
    let mean_p = Integral::new(w, h, pi.clone()).means(radius);
    let mean_ip = Integral::new(w, h, gi.clone().zip(pi).map(|(a, b)| a * b)).means(radius);
    let mean_ii = Integral::new(w, h, gi.map(|a| a * a)).means(radius);
    let eps = eps as f64;
    let (a, b): (Vec<f64>, Vec<f64>) = (0..w * h)
        .map(|k| {
            let var = mean_ii[k] - mean_i[k] * mean_i[k];
            let cov = mean_ip[k] - mean_i[k] * mean_p[k];
            let a = cov / (var + eps);
            (a, mean_p[k] - a * mean_i[k])
        })
        .unzip();
    let mean_a = Integral::new(w, h, a.into_iter()).means(radius);
    let mean_b = Integral::new(w, h, b.into_iter()).means(radius);
    let data = guidance
        .data()
        .iter()
        .enumerate()
        .map(|(k, &g)| (mean_a[k] * g as f64 + mean_b[k]) as f32)
        .collect();
    Plane::new(w, h, data)
}

/// Every stage of the consistency check.
#[derive(Clone, Debug)]
pub struct Verification {
    pub verified: DecisionMap,
    /// Sources blended with the verified binary map; the filter guidance.
    pub fused_initial: Plane,
    pub soft: DecisionMap,
}

/// Morphology, small-region removal, then guided filtering of the cleaned map
/// with the initially fused gray image as guidance.
pub fn verify(initial: &DecisionMap, gray1: &Plane, gray2: &Plane, cfg: &FusionConfig) -> Result<Verification> {
    cfg.validate()?;
    let p = initial.binary_plane()?;
    p.expect_same_dims("verify", gray1)?;
    gray1.expect_same_dims("verify", gray2)?;
    let morphed = morph_open_close(initial, cfg.morph_radius, cfg.morph_passes)?;
    let threshold = (cfg.area_fraction as f64 * p.len() as f64).floor() as usize;
    let verified = remove_small_regions(&morphed, threshold)?;
    let fused_initial = fuse_weighted_plane(gray1, gray2, verified.plane())?;
    let soft = guided_filter(&fused_initial, verified.plane(), cfg.gf_radius, cfg.gf_eps)?.clamp01();
    Ok(Verification {
        verified,
        fused_initial,
        soft: DecisionMap::new(soft, Stage::Soft)?,
    })
}
