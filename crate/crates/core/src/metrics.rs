//! Fusion quality scores: the gradient-transfer metric Qg and SSIM against a
//! known ground truth, aggregated over pairs and methods.

use std::fmt::Write as _;
use std::path::PathBuf;

use indexmap::IndexMap;
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_pair, FusionConfig, FusionMode};
use crate::image::{load_image, Plane, RealImage};
use crate::network::NetworkParams;
use crate::ssim;

/// Sigmoid parameters of the edge-preservation model (Xydeas and Petrović,
/// 2000): `gamma / (1 + exp(kappa * (x - sigma)))` for strength and
/// orientation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QgConstants {
    pub gamma_g: f64,
    pub kappa_g: f64,
    pub sigma_g: f64,
    pub gamma_a: f64,
    pub kappa_a: f64,
    pub sigma_a: f64,
    /// Exponent on gradient strength in the saliency weights.
    pub weight_exponent: f64,
}

pub const QG_CONSTANTS: QgConstants = QgConstants {
    gamma_g: 0.9994,
    kappa_g: -15.0,
    sigma_g: 0.5,
    gamma_a: 0.9879,
    kappa_a: -22.0,
    sigma_a: 0.8,
    weight_exponent: 1.0,
};

struct Gradients {
    strength: Vec<f64>,
    angle: Vec<f64>,
}

fn sobel(p: &Plane) -> Gradients {
    let (w, h) = p.dims();
    let at = |x: usize, y: usize, dx: isize, dy: isize| p.get_clamped(x as isize + dx, y as isize + dy) as f64;
    let mut strength = Vec::with_capacity(w * h);
    let mut angle = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let sx = (at(x, y, 1, -1) + 2.0 * at(x, y, 1, 0) + at(x, y, 1, 1))
                - (at(x, y, -1, -1) + 2.0 * at(x, y, -1, 0) + at(x, y, -1, 1));
            let sy = (at(x, y, -1, 1) + 2.0 * at(x, y, 0, 1) + at(x, y, 1, 1))
                - (at(x, y, -1, -1) + 2.0 * at(x, y, 0, -1) + at(x, y, 1, -1));
            strength.push((sx * sx + sy * sy).sqrt());
            angle.push(if sx == 0.0 {
                if sy == 0.0 {
                    0.0
                } else {
                    std::f64::consts::FRAC_PI_2
                }
            } else {
                (sy / sx).atan()
            });
        }
    }
    Gradients { strength, angle }
}

/// Per-pixel edge preservation of `src` in `fused`.
fn preservation(src: &Gradients, fused: &Gradients, k: &QgConstants) -> Vec<f64> {
    src.strength
        .iter()
        .zip(&src.angle)
        .zip(fused.strength.iter().zip(&fused.angle))
        .map(|((&gs, &as_), (&gf, &af))| {
            let hi = gs.max(gf);
            let g = if hi == 0.0 { 0.0 } else { gs.min(gf) / hi };
            let a = 1.0 - (as_ - af).abs() / std::f64::consts::FRAC_PI_2;
            let qg = k.gamma_g / (1.0 + (k.kappa_g * (g - k.sigma_g)).exp());
            let qa = k.gamma_a / (1.0 + (k.kappa_a * (a - k.sigma_a)).exp());
            qg * qa
        })
        .collect()
}

/// Gradient-transfer quality of `f` as a fusion of `a` and `b`, in `[0, 1]`.
pub fn metric_qg(a: &Plane, b: &Plane, f: &Plane) -> Result<f64> {
    metric_qg_with(a, b, f, &QG_CONSTANTS)
}

pub fn metric_qg_with(a: &Plane, b: &Plane, f: &Plane, k: &QgConstants) -> Result<f64> {
    a.expect_same_dims("metric_qg", b)?;
    a.expect_same_dims("metric_qg", f)?;
    let (ga, gb, gf) = (sobel(a), sobel(b), sobel(f));
    let (qa, qb) = (preservation(&ga, &gf, k), preservation(&gb, &gf, k));
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..qa.len() {
        let wa = ga.strength[i].powf(k.weight_exponent);
        let wb = gb.strength[i].powf(k.weight_exponent);
        num += qa[i] * wa + qb[i] * wb;
        den += wa + wb;
    }
    Ok(if den == 0.0 { 0.0 } else { (num / den).clamp(0.0, 1.0) })
}

/// Mean SSIM over channels, clamped at 0 for reporting.
pub fn ssim_score(fused: &RealImage, truth: &RealImage) -> Result<f64> {
    if fused.dims() != truth.dims() || fused.channel_count() != truth.channel_count() {
        return Err(Error::invalid("fused image and ground truth differ in layout"));
    }
    let (w, h) = fused.dims();
    let mut total = 0.0;
    for (f, t) in fused.channels().iter().zip(truth.channels()) {
        total += ssim::ssim(f.data(), t.data(), h, w)?;
    }
    Ok((total / fused.channel_count() as f64).max(0.0))
}

/// Where a pair's images come from.
#[derive(Clone, Debug)]
pub enum PairData {
    Loaded {
        a: RealImage,
        b: RealImage,
        truth: Option<RealImage>,
    },
    Files {
        a: PathBuf,
        b: PathBuf,
        truth: Option<PathBuf>,
    },
}

#[derive(Clone, Debug)]
pub struct EvalPair {
    pub name: String,
    pub data: PairData,
}

impl EvalPair {
    fn load(&self) -> Result<(RealImage, RealImage, Option<RealImage>)> {
        match &self.data {
            PairData::Loaded { a, b, truth } => Ok((a.clone(), b.clone(), truth.clone())),
            PairData::Files { a, b, truth } => {
                let load = |p: &PathBuf| load_image(p).map(|img| img.to_real());
                Ok((load(a)?, load(b)?, truth.as_ref().map(load).transpose()?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub qg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub name: String,
    pub scores: IndexMap<String, MethodScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub modes: Vec<FusionMode>,
    pub fusion: FusionConfig,
    pub qg_constants: QgConstants,
}

/// Scores keyed by metric name, then method name.
pub type MetricTable<T> = IndexMap<String, IndexMap<String, T>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: ReportConfig,
    pub per_pair: Vec<PairScores>,
    pub means: MetricTable<f64>,
    pub first_places: MetricTable<usize>,
    pub skipped: Vec<SkippedPair>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per method, one `mean(first places)` column per metric.
    pub fn to_csv(&self) -> String {
        let metrics: Vec<&String> = self.means.keys().collect();
        let mut out = String::from("method");
        for m in &metrics {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        for mode in &self.config.modes {
            out.push_str(mode.name());
            for m in &metrics {
                let mean = self.means[*m].get(mode.name()).copied().unwrap_or(f64::NAN);
                let firsts = self.first_places[*m].get(mode.name()).copied().unwrap_or(0);
                let _ = write!(out, ",{mean:.4}({firsts})");
            }
            out.push('\n');
        }
        out
    }

    pub fn mean(&self, metric: &str, mode: FusionMode) -> Option<f64> {
        self.means.get(metric)?.get(mode.name()).copied()
    }

    pub fn first_place_count(&self, metric: &str, mode: FusionMode) -> Option<usize> {
        self.first_places.get(metric)?.get(mode.name()).copied()
    }
}

fn score_pair(pair: &EvalPair, modes: &[FusionMode], params: &NetworkParams, cfg: &FusionConfig) -> Result<PairScores> {
    let (a, b, truth) = pair.load()?;
    let (ga, gb) = (a.luma(), b.luma());
    let mut scores = IndexMap::new();
    for &mode in modes {
        let mode_cfg = FusionConfig { mode, ..cfg.clone() };
        let fused = fuse_pair(&a, &b, params, &mode_cfg)?.fused;
        let qg = metric_qg(&ga, &gb, &fused.luma())?;
        let ssim = truth.as_ref().map(|t| ssim_score(&fused, t)).transpose()?;
        scores.insert(mode.name().to_string(), MethodScores { qg, ssim });
    }
    Ok(PairScores {
        name: pair.name.clone(),
        scores,
    })
}

/// Fuses every pair with every mode and scores the results. Unreadable pairs
/// are skipped and listed in the report; numeric failures abort. Up to `jobs`
/// pairs are processed concurrently and results keep the input order.
pub fn evaluate(
    pairs: &[EvalPair],
    modes: &[FusionMode],
    params: &NetworkParams,
    cfg: &FusionConfig,
    jobs: usize,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Empty { what: "evaluation pairs" });
    }
    if modes.is_empty() {
        return Err(Error::Empty { what: "fusion modes" });
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<PairScores>> =
        pool.install(|| pairs.par_iter().map(|p| score_pair(p, modes, params, cfg)).collect());

    let mut per_pair = Vec::new();
    let mut skipped = Vec::new();
    for (pair, result) in pairs.iter().zip(results) {
        match result {
            Ok(scores) => per_pair.push(scores),
            Err(e @ (Error::Image { .. } | Error::Io(_))) => {
                warn!("skipping pair `{}`: {e}", pair.name);
                skipped.push(SkippedPair {
                    name: pair.name.clone(),
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if per_pair.is_empty() {
        return Err(Error::Empty { what: "readable evaluation pairs" });
    }

    let mut metric_names = vec!["qg"];
    if per_pair.iter().any(|p| p.scores.values().any(|s| s.ssim.is_some())) {
        metric_names.push("ssim");
    }
    let value = |s: &MethodScores, metric: &str| match metric {
        "qg" => Some(s.qg),
        _ => s.ssim,
    };
    let mut means = MetricTable::new();
    let mut first_places = MetricTable::new();
    for metric in metric_names {
        let mut sums: IndexMap<String, (f64, usize)> = IndexMap::new();
        let mut firsts: IndexMap<String, usize> = modes.iter().map(|m| (m.name().to_string(), 0)).collect();
        for pair in &per_pair {
            let vals: Vec<(&String, f64)> = pair
                .scores
                .iter()
                .filter_map(|(m, s)| value(s, metric).map(|v| (m, v)))
                .collect();
            for (m, v) in &vals {
                let e = sums.entry((*m).clone()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
            // Ties award every tied method.
            if let Some(best) = vals.iter().map(|(_, v)| *v).reduce(f64::max) {
                for (m, v) in &vals {
                    if *v == best {
                        *firsts.get_mut(*m).expect("mode listed") += 1;
                    }
                }
            }
        }
        means.insert(
            metric.to_string(),
            sums.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect(),
        );
        first_places.insert(metric.to_string(), firsts);
    }

    Ok(MetricReport {
        config: ReportConfig {
            modes: modes.to_vec(),
            fusion: cfg.clone(),
            qg_constants: QG_CONSTANTS,
        },
        per_pair,
        means,
        first_places,
        skipped,
    })
}
