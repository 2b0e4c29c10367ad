//! Brute-force references used by the property tests and the acceptance run.
//! Everything here is written for clarity, in f64 where precision matters,
//! and shares no code with the library beyond its data types.

#![allow(dead_code)]

pub mod gradcheck;

use focusfuse_core::image::Plane;
use focusfuse_core::network::{FeatureMap, NetworkParams};
use focusfuse_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

pub fn random_plane(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Plane {
    Plane::from_fn(w, h, |_, _| rng.random::<f32>())
}

pub fn random_binary(rng: &mut ChaCha8Rng, w: usize, h: usize, p_one: f64) -> Plane {
    Plane::from_fn(w, h, |_, _| rng.random_bool(p_one) as u8 as f32)
}

/// Single-image tensor in f64: `(c, h, w)`.
#[derive(Clone, Debug)]
pub struct T64 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl T64 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_tensor(t: &Tensor, n: usize) -> Self {
        let s = t.shape();
        Self {
            c: s.c,
            h: s.h,
            w: s.w,
            data: t.item(n).iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }
}

/// Zero-padded "same" convolution, kernel `(co, ci, k, k)`.
pub fn conv2d_ref(x: &T64, kernel: &[f64], bias: &[f64], co: usize, k: usize) -> T64 {
    let pad = (k / 2) as isize;
    let mut out = T64::zeros(co, x.h, x.w);
    for o in 0..co {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = bias[o];
                for i in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            acc += kernel[((o * x.c + i) * k + ky) * k + kx] * x.at(i, sy as usize, sx as usize);
                        }
                    }
                }
                *out.at_mut(o, y, xx) = acc;
            }
        }
    }
    out
}

pub fn relu_ref(x: &T64) -> T64 {
    T64 {
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        ..x.clone()
    }
}

pub fn sigmoid_ref(x: &T64) -> T64 {
    T64 {
        data: x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        ..x.clone()
    }
}

pub fn gap_ref(x: &T64) -> T64 {
    let hw = (x.h * x.w) as f64;
    T64 {
        c: x.c,
        h: 1,
        w: 1,
        data: (0..x.c)
            .map(|c| x.data[c * x.h * x.w..(c + 1) * x.h * x.w].iter().sum::<f64>() / hw)
            .collect(),
    }
}

pub fn concat_ref(parts: &[&T64]) -> T64 {
    T64 {
        c: parts.iter().map(|p| p.c).sum(),
        h: parts[0].h,
        w: parts[0].w,
        data: parts.iter().flat_map(|p| p.data.iter().copied()).collect(),
    }
}

pub fn channel_scale_ref(x: &T64, s: &T64) -> T64 {
    let hw = x.h * x.w;
    T64 {
        data: x.data.iter().enumerate().map(|(i, &v)| v * s.data[i / hw]).collect(),
        ..x.clone()
    }
}

/// Mean SSIM with an explicit 2-D Gaussian window at every valid position.
pub fn ssim_ref(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    const N: usize = 11;
    let sigma = 1.5f64;
    let g: Vec<f64> = (0..N).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - N {
        for x in 0..=w - N {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..N {
                for v in 0..N {
                    let wt = g[u] * g[v] / (gs * gs);
                    let (p, q) = (a[(y + u) * w + x + v], b[(y + u) * w + x + v]);
                    ma += wt * p;
                    mb += wt * q;
                    aa += wt * p * p;
                    bb += wt * q * q;
                    ab += wt * p * q;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn rms_ref(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn loss_ref(out: &T64, target: &T64, lambda: f64) -> f64 {
    lambda * (1.0 - ssim_ref(&out.data, &target.data, out.h, out.w)) + rms_ref(&out.data, &target.data)
}

/// f64 parameters by canonical name.
pub struct Params64 {
    pub entries: Vec<(String, Vec<f64>, Shape)>,
}

impl Params64 {
    pub fn from_params(p: &NetworkParams) -> Self {
        Self {
            entries: p
                .entries()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t.data().iter().map(|&v| v as f64).collect(), t.shape()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.entries.iter().find(|(n, _, _)| n == name).expect("known name").1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        &mut self.entries.iter_mut().find(|(n, _, _)| n == name).expect("known name").1
    }

    fn shape(&self, name: &str) -> Shape {
        self.entries.iter().find(|(n, _, _)| n == name).expect("known name").2
    }

    fn conv(&self, layer: &str, x: &T64) -> T64 {
        let s = self.shape(&format!("{layer}.w"));
        conv2d_ref(x, self.get(&format!("{layer}.w")), self.get(&format!("{layer}.b")), s.n, s.h)
    }
}

/// Encoder features, rebuilt layer by layer.
pub fn encoder_ref(p: &Params64, image: &T64) -> T64 {
    let x1 = relu_ref(&p.conv("c1", image));
    let x2 = relu_ref(&p.conv("dc1", &x1));
    let x3 = relu_ref(&p.conv("dc2", &concat_ref(&[&x1, &x2])));
    let x4 = relu_ref(&p.conv("dc3", &concat_ref(&[&x1, &x2, &x3])));
    let dense = concat_ref(&[&x1, &x2, &x3, &x4]);
    let hidden = relu_ref(&p.conv("se.reduce", &gap_ref(&dense)));
    let gate = sigmoid_ref(&p.conv("se.expand", &hidden));
    channel_scale_ref(&dense, &gate)
}

pub fn decoder_ref(p: &Params64, features: &T64) -> T64 {
    let x = relu_ref(&p.conv("c2", features));
    let x = relu_ref(&p.conv("c3", &x));
    let x = relu_ref(&p.conv("c4", &x));
    p.conv("c5", &x)
}

/// Literal windowed spatial frequency with clamped coordinates.
pub fn spatial_frequency_ref(f: &FeatureMap, r: usize) -> Plane {
    let t = T64::from_tensor(f.tensor(), 0);
    let (h, w) = (t.h as isize, t.w as isize);
    let cl = |v: isize, n: isize| v.clamp(0, n - 1) as usize;
    let dist2 = |y1: usize, x1: usize, y2: usize, x2: usize| {
        (0..t.c).map(|c| (t.at(c, y1, x1) - t.at(c, y2, x2)).powi(2)).sum::<f64>()
    };
    let r = r as isize;
    let area = ((2 * r + 1) * (2 * r + 1)) as f64;
    Plane::from_fn(t.w, t.h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let mut rf = 0.0;
        let mut cf = 0.0;
        for a in -r..=r {
            for b in -r..=r {
                let (yy, xx) = (y + a, x + b);
                rf += dist2(cl(yy, h), cl(xx, w), cl(yy, h), cl(xx - 1, w));
                cf += dist2(cl(yy, h), cl(xx, w), cl(yy - 1, h), cl(xx, w));
            }
        }
        ((rf + cf) / area).sqrt() as f32
    })
}

/// Per-pixel erosion or dilation with the disk `dx² + dy² <= r²`.
pub fn morph_ref(p: &Plane, r: usize, erode: bool) -> Plane {
    let (w, h) = (p.width() as isize, p.height() as isize);
    let r = r as isize;
    Plane::from_fn(p.width(), p.height(), |x, y| {
        let mut all = true;
        let mut any = false;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let (xx, yy) = (x as isize + dx, y as isize + dy);
                let v = if xx < 0 || yy < 0 || xx >= w || yy >= h {
                    erode
                } else {
                    p.get(xx as usize, yy as usize) == 1.0
                };
                all &= v;
                any |= v;
            }
        }
        (if erode { all } else { any }) as u8 as f32
    })
}

/// Guided filter with explicit loops over every window.
pub fn guided_filter_ref(guide: &Plane, input: &Plane, r: usize, eps: f64) -> Plane {
    let (w, h) = guide.dims();
    let window = |x: usize, y: usize| {
        let xs = x.saturating_sub(r)..(x + r + 1).min(w);
        let ys = y.saturating_sub(r)..(y + r + 1).min(h);
        ys.flat_map(move |yy| xs.clone().map(move |xx| (xx, yy)))
    };
    let mean = |x: usize, y: usize, f: &dyn Fn(usize, usize) -> f64| {
        let mut s = 0.0;
        let mut n = 0;
        for (xx, yy) in window(x, y) {
            s += f(xx, yy);
            n += 1;
        }
        s / n as f64
    };
    let i = |x: usize, y: usize| guide.get(x, y) as f64;
    let p = |x: usize, y: usize| input.get(x, y) as f64;
    let mut a = vec![0.0; w * h];
    let mut b = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mi = mean(x, y, &i);
            let mp = mean(x, y, &p);
            let mip = mean(x, y, &|xx, yy| i(xx, yy) * p(xx, yy));
            let mii = mean(x, y, &|xx, yy| i(xx, yy) * i(xx, yy));
            let ak = (mip - mi * mp) / (mii - mi * mi + eps);
            a[y * w + x] = ak;
            b[y * w + x] = mp - ak * mi;
        }
    }
    Plane::from_fn(w, h, |x, y| {
        let ma = mean(x, y, &|xx, yy| a[yy * w + xx]);
        let mb = mean(x, y, &|xx, yy| b[yy * w + xx]);
        (ma * i(x, y) + mb) as f32
    })
}

/// Component size of every pixel under 8-connectivity (depth-first).
pub fn component_sizes_ref(p: &Plane) -> Vec<usize> {
    let (w, h) = p.dims();
    let mut comp = vec![usize::MAX; w * h];
    let mut sizes = Vec::new();
    for s in 0..w * h {
        if comp[s] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let v = p.data()[s];
        let mut stack = vec![s];
        comp[s] = id;
        let mut n = 0;
        while let Some(i) = stack.pop() {
            n += 1;
            let (x, y) = (i % w, i / w);
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    let j = ny * w + nx;
                    if comp[j] == usize::MAX && p.data()[j] == v {
                        comp[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        sizes.push(n);
    }
    comp.iter().map(|&c| sizes[c]).collect()
}

/// Small-region removal built from [`component_sizes_ref`].
pub fn remove_small_regions_ref(p: &Plane, threshold: usize) -> Plane {
    let pass = |p: &Plane, polarity: f32| {
        let sizes = component_sizes_ref(p);
        Plane::from_fn(p.width(), p.height(), |x, y| {
            let i = y * p.width() + x;
            let v = p.data()[i];
            if v == polarity && sizes[i] < threshold {
                1.0 - v
            } else {
                v
            }
        })
    };
    pass(&pass(p, 1.0), 0.0)
}

/// Infinite when lengths differ or any value is NaN.
pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    if a.len() != b.len() {
        return f32::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| if x.is_nan() || y.is_nan() { f32::INFINITY } else { (x - y).abs() })
        .fold(0.0, f32::max)
}
