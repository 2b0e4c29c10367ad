//! Activity measurement by spatial frequency of deep features, decision maps,
//! the ablation fusion modes and the weighted-average blend.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Plane, RealImage};
use crate::network::{decoder_forward, encoder_forward, FeatureMap, NetworkParams};
use crate::postprocess::{ensure_binary, verify};
use crate::tensor::{Shape, Tensor};

/// Per-pixel spatial frequency and the window radius it was computed with.
#[derive(Clone, Debug, PartialEq)]
pub struct SFMap {
    values: Plane,
    radius: usize,
}

impl SFMap {
    pub fn values(&self) -> &Plane {
        &self.values
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn mean(&self) -> f64 {
        self.values.mean()
    }
}

/// Squared feature-vector differences between each pixel and its predecessor
/// along one axis. Entry 0 of that axis (and anything beyond the image) is 0
/// under edge replication.
fn diff_energy(f: &Tensor, along_width: bool) -> Vec<f64> {
    let s = f.shape();
    let (h, w) = (s.h, s.w);
    let mut e = vec![0.0f64; h * w];
    for c in 0..s.c {
        let plane = f.plane(0, c);
        for y in 0..h {
            for x in 0..w {
                let prev = if along_width {
                    if x == 0 {
                        continue;
                    }
                    plane[y * w + x - 1]
                } else {
                    if y == 0 {
                        continue;
                    }
                    plane[(y - 1) * w + x]
                };
                let d = (plane[y * w + x] - prev) as f64;
                e[y * w + x] += d * d;
            }
        }
    }
    e
}

/// Window sum of `e` over `[-r, r]²` where the differenced axis contributes
/// zero outside the image and the other axis is edge-clamped.
fn window_sum(e: &[f64], w: usize, h: usize, r: usize, along_width: bool) -> Vec<f64> {
    // Pass 1: zero-extended sum along the differenced axis.
    // Pass 2: clamped sum along the other axis.
    let (outer, inner) = if along_width { (h, w) } else { (w, h) };
    let at = |o: usize, i: usize| if along_width { o * w + i } else { i * w + o };
    let mut zero_ext = vec![0.0f64; w * h];
    let mut prefix = vec![0.0f64; inner + 1];
    for o in 0..outer {
        for i in 0..inner {
            prefix[i + 1] = prefix[i] + e[at(o, i)];
        }
        for i in 0..inner {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(inner);
            zero_ext[at(o, i)] = prefix[hi] - prefix[lo];
        }
    }
    let mut out = vec![0.0f64; w * h];
    let mut prefix = vec![0.0f64; outer + 1];
    for i in 0..inner {
        for o in 0..outer {
            prefix[o + 1] = prefix[o] + zero_ext[at(o, i)];
        }
        for o in 0..outer {
            let lo = o.saturating_sub(r);
            let hi = (o + r + 1).min(outer);
            let below = r.saturating_sub(o) as f64;
            let above = (o + r + 1).saturating_sub(outer) as f64;
            out[at(o, i)] = prefix[hi] - prefix[lo]
                + below * zero_ext[at(0, i)]
                + above * zero_ext[at(outer - 1, i)];
        }
    }
    out
}

/// Windowed spatial frequency of a feature map with edge-replicated borders.
pub fn spatial_frequency(f: &FeatureMap, radius: usize) -> Result<SFMap> {
    let t = f.tensor();
    t.ensure_finite("spatial_frequency")?;
    let (h, w) = (f.height(), f.width());
    let rows = window_sum(&diff_energy(t, true), w, h, radius, true);
    let cols = window_sum(&diff_energy(t, false), w, h, radius, false);
    let area = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let data = rows
        .iter()
        .zip(&cols)
        .map(|(r, c)| ((r + c).max(0.0) / area).sqrt() as f32)
        .collect();
    Ok(SFMap {
        values: Plane::new(w, h, data)?,
        radius,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    InitialBinary,
    VerifiedBinary,
    Soft,
}

impl Stage {
    pub fn is_binary(&self) -> bool {
        !matches!(self, Stage::Soft)
    }
}

/// Per-pixel weight of the first source.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionMap {
    plane: Plane,
    stage: Stage,
}

impl DecisionMap {
    pub fn new(plane: Plane, stage: Stage) -> Result<Self> {
        if stage.is_binary() {
            ensure_binary(&plane)?;
        } else if let Some(&v) = plane.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("soft decision weight {v} outside [0, 1]")));
        }
        Ok(Self { plane, stage })
    }

    pub fn plane(&self) -> &Plane {
        &self.plane
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub(crate) fn binary_plane(&self) -> Result<&Plane> {
        if !self.stage.is_binary() {
            return Err(Error::invalid("operation needs a binary decision map"));
        }
        Ok(&self.plane)
    }

    /// 8-bit export: weight 0 maps to 0, weight 1 to 255.
    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::from_plane(&self.plane)
    }
}

/// 1 where `sf1 >= sf2`, so ties go to the first source.
pub fn initial_decision_map(sf1: &SFMap, sf2: &SFMap) -> Result<DecisionMap> {
    if sf1.radius != sf2.radius {
        return Err(Error::invalid(format!(
            "spatial frequency radii differ: {} vs {}",
            sf1.radius, sf2.radius
        )));
    }
    let plane = sf1.values.zip_map(&sf2.values, |a, b| (a >= b) as u8 as f32)?;
    DecisionMap::new(plane, Stage::InitialBinary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Average,
    Max,
    Absmax,
    L1Norm,
    Sf,
    SfDm,
}

impl FusionMode {
    pub const ALL: [FusionMode; 6] = [
        FusionMode::Average,
        FusionMode::Max,
        FusionMode::Absmax,
        FusionMode::L1Norm,
        FusionMode::Sf,
        FusionMode::SfDm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Average => "average",
            FusionMode::Max => "max",
            FusionMode::Absmax => "absmax",
            FusionMode::L1Norm => "l1_norm",
            FusionMode::Sf => "sf",
            FusionMode::SfDm => "sf_dm",
        }
    }

    /// Modes that blend features and decode them.
    pub fn is_feature_mode(&self) -> bool {
        *self != FusionMode::SfDm
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

/// Blends two feature maps. `sf_radius` is only used by [`FusionMode::Sf`].
pub fn feature_fuse(f1: &FeatureMap, f2: &FeatureMap, mode: FusionMode, sf_radius: usize) -> Result<FeatureMap> {
    let (t1, t2) = (f1.tensor(), f2.tensor());
    if t1.shape() != t2.shape() {
        return Err(Error::shape("feature_fuse", t1.shape(), t2.shape()));
    }
    let (a, b) = (t1.data(), t2.data());
    let elementwise = |op: fn(f32, f32) -> f32| a.iter().zip(b).map(|(&x, &y)| op(x, y)).collect::<Vec<_>>();
    let data = match mode {
        FusionMode::Average => elementwise(|x, y| if x == y { x } else { 0.5 * (x + y) }),
        FusionMode::Max => elementwise(f32::max),
        FusionMode::Absmax => elementwise(|x, y| if y.abs() > x.abs() { y } else { x }),
        FusionMode::L1Norm | FusionMode::Sf => {
            let s = t1.shape();
            let hw = s.h * s.w;
            let weight: Vec<f32> = if mode == FusionMode::Sf {
                let d = initial_decision_map(&spatial_frequency(f1, sf_radius)?, &spatial_frequency(f2, sf_radius)?)?;
                d.plane().data().to_vec()
            } else {
                let l1 = |t: &[f32], i: usize| (0..s.c).map(|c| t[c * hw + i].abs() as f64).sum::<f64>();
                (0..hw)
                    .map(|i| {
                        let (n1, n2) = (l1(a, i), l1(b, i));
                        (n1 / (n1 + n2 + 1e-12)) as f32
                    })
                    .collect()
            };
            (0..s.c * hw)
                .map(|k| blend(a[k], b[k], weight[k % hw]))
                .collect()
        }
        FusionMode::SfDm => {
            return Err(Error::invalid("sf_dm fuses images, not features"));
        }
    };
    FeatureMap::new(Tensor::from_vec(t1.shape(), data)?)
}

/// `d·a + (1−d)·b`, exact at the endpoints and when `a == b`.
#[inline]
fn blend(a: f32, b: f32, d: f32) -> f32 {
    if d == 1.0 {
        a
    } else if d == 0.0 || a == b {
        b
    } else {
        d * a + (1.0 - d) * b
    }
}

pub(crate) fn fuse_weighted_plane(a: &Plane, b: &Plane, d: &Plane) -> Result<Plane> {
    a.expect_same_dims("fuse_weighted", b)?;
    a.expect_same_dims("fuse_weighted", d)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(d.data())
        .map(|((&x, &y), &w)| blend(x, y, w).clamp(0.0, 1.0))
        .collect();
    Plane::new(a.width(), a.height(), data)
}

/// Per-pixel weighted average with the map broadcast over channels.
pub fn fuse_weighted(img1: &RealImage, img2: &RealImage, d: &DecisionMap) -> Result<RealImage> {
    if img1.channel_count() != img2.channel_count() {
        return Err(Error::invalid(format!(
            "channel counts differ: {} vs {}",
            img1.channel_count(),
            img2.channel_count()
        )));
    }
    let channels = img1
        .channels()
        .iter()
        .zip(img2.channels())
        .map(|(a, b)| fuse_weighted_plane(a, b, &d.plane))
        .collect::<Result<Vec<_>>>()?;
    RealImage::new(channels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub sf_radius: usize,
    pub morph_radius: usize,
    /// Repetitions of the opening/closing pair.
    pub morph_passes: usize,
    pub area_fraction: f32,
    pub gf_radius: usize,
    pub gf_eps: f32,
    pub mode: FusionMode,
    /// Keep SF maps and every decision-map stage in the result.
    pub keep_intermediates: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            sf_radius: 5,
            morph_radius: 5,
            morph_passes: 1,
            area_fraction: 0.01,
            gf_radius: 4,
            gf_eps: 0.1,
            mode: FusionMode::SfDm,
            keep_intermediates: false,
        }
    }
}

impl FusionConfig {
    /// Default configuration with the morphology radius tied to `sf_radius`.
    pub fn with_radius(sf_radius: usize) -> Self {
        Self {
            sf_radius,
            morph_radius: sf_radius,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sf_radius == 0 || self.morph_radius == 0 {
            return Err(Error::invalid("sf_radius and morph_radius must be at least 1"));
        }
        if !(self.area_fraction > 0.0 && self.area_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "area_fraction must lie in (0, 1), got {}",
                self.area_fraction
            )));
        }
        if self.gf_radius == 0 {
            return Err(Error::invalid("gf_radius must be at least 1"));
        }
        if !(self.gf_eps > 0.0) {
            return Err(Error::invalid(format!("gf_eps must be positive, got {}", self.gf_eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Intermediates {
    pub sf1: SFMap,
    pub sf2: SFMap,
    pub initial: DecisionMap,
    pub verified: DecisionMap,
    pub fused_initial: Plane,
}

#[derive(Clone, Debug)]
pub struct FusionResult {
    pub fused: RealImage,
    pub mode: FusionMode,
    pub sf_radius: usize,
    /// The soft map used for blending; `None` for feature-blend modes.
    pub decision: Option<DecisionMap>,
    pub intermediates: Option<Intermediates>,
}

fn plane_tensor(p: &Plane) -> Tensor {
    p.to_tensor()
}

fn encode(params: &NetworkParams, p: &Plane) -> Result<FeatureMap> {
    encoder_forward(&params.encoder, &plane_tensor(p))
}

fn check_pair(img1: &RealImage, img2: &RealImage) -> Result<()> {
    if img1.dims() != img2.dims() {
        let (w1, h1) = img1.dims();
        let (w2, h2) = img2.dims();
        return Err(Error::shape(
            "fuse_pair",
            Shape::new(1, img1.channel_count(), h1, w1),
            Shape::new(1, img2.channel_count(), h2, w2),
        ));
    }
    if img1.channel_count() != img2.channel_count() {
        return Err(Error::invalid(format!(
            "channel counts differ: {} vs {}",
            img1.channel_count(),
            img2.channel_count()
        )));
    }
    Ok(())
}

/// Fuses two registered images of equal size.
pub fn fuse_pair(img1: &RealImage, img2: &RealImage, params: &NetworkParams, cfg: &FusionConfig) -> Result<FusionResult> {
    cfg.validate()?;
    check_pair(img1, img2)?;
    if cfg.mode.is_feature_mode() {
        // The network is single-channel: colour planes are fused one by one.
        let channels = img1
            .channels()
            .iter()
            .zip(img2.channels())
            .map(|(a, b)| {
                let fused = feature_fuse(&encode(params, a)?, &encode(params, b)?, cfg.mode, cfg.sf_radius)?;
                let out = decoder_forward(&params.decoder, &fused)?;
                Ok(Plane::from_tensor(&out, 0, 0).clamp01())
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(FusionResult {
            fused: RealImage::new(channels)?,
            mode: cfg.mode,
            sf_radius: cfg.sf_radius,
            decision: None,
            intermediates: None,
        });
    }

    let (gray1, gray2) = (img1.luma(), img2.luma());
    let sf1 = spatial_frequency(&encode(params, &gray1)?, cfg.sf_radius)?;
    let sf2 = spatial_frequency(&encode(params, &gray2)?, cfg.sf_radius)?;
    let initial = initial_decision_map(&sf1, &sf2)?;
    let v = verify(&initial, &gray1, &gray2, cfg)?;
    let fused = fuse_weighted(img1, img2, &v.soft)?;
    Ok(FusionResult {
        fused,
        mode: cfg.mode,
        sf_radius: cfg.sf_radius,
        decision: Some(v.soft),
        intermediates: cfg.keep_intermediates.then_some(Intermediates {
            sf1,
            sf2,
            initial,
            verified: v.verified,
            fused_initial: v.fused_initial,
        }),
    })
}

/// Left fold of [`fuse_pair`] over the stack in the given order.
pub fn fuse_stack(images: &[RealImage], params: &NetworkParams, cfg: &FusionConfig) -> Result<RealImage> {
    if images.len() < 2 {
        return Err(Error::invalid(format!("a stack needs at least 2 images, got {}", images.len())));
    }
    let mut acc = images[0].clone();
    for next in &images[1..] {
        acc = fuse_pair(&acc, next, params, cfg)?.fused;
    }
    Ok(acc)
}
