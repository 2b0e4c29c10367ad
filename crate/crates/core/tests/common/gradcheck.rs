//! Central finite differences of the f64 references against the library's
//! analytic gradients.

use focusfuse_core::network::{decoder_graph, encoder_graph};
use focusfuse_core::ops;
use focusfuse_core::ssim::ssim_with_grad;
use focusfuse_core::trainer::loss_graph;
use focusfuse_core::{ChannelPlan, NetworkParams, Shape, Tape, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

const STEP: f64 = 1e-5;
/// Below this magnitude both gradients count as zero.
const FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradCheck {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            checked: 0,
            passed: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        self.checked += 1;
        if err < TOLERANCE {
            self.passed += 1;
        }
        self.worst = self.worst.max(err);
    }

    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

fn central(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(STEP) - f(-STEP)) / (2.0 * STEP)
}

fn dot(a: &T64, r: &[f64]) -> f64 {
    a.data.iter().zip(r).map(|(x, y)| x * y).sum()
}

fn projection(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Tensor) {
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0f32) as f64).collect();
    (r.clone(), Tensor::from_vec(Shape::new(1, 1, 1, n), r.iter().map(|&v| v as f32).collect()).unwrap())
}

fn reshape(t: Tensor, shape: Shape) -> Tensor {
    Tensor::from_vec(shape, t.into_vec()).unwrap()
}

/// Input tensor whose entries keep at least `gap` away from zero, so the
/// difference step never crosses the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape, gap: f32) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let v: f32 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn perturbed(t: &T64, i: usize, d: f64) -> T64 {
    let mut t = t.clone();
    t.data[i] += d;
    t
}

pub fn check_ops(seed: u64) -> Vec<GradCheck> {
    let mut rng = rng(seed);
    let mut out = Vec::new();

    // conv2d with 3x3 and 1x1 kernels.
    for k in [3usize, 1] {
        let mut c = GradCheck::new(&format!("conv2d {k}x{k}"));
        let (ci, co, h, w) = (3, 4, 6, 5);
        let x = random_tensor(&mut rng, Shape::new(1, ci, h, w), -1.0, 1.0);
        let kern = random_tensor(&mut rng, Shape::new(co, ci, k, k), -1.0, 1.0);
        let bias = random_tensor(&mut rng, Shape::new(1, co, 1, 1), -1.0, 1.0);
        let (r, rt) = projection(&mut rng, co * h * w);
        let (gi, gk, gb) = ops::conv2d_backward(&x, &kern, &reshape(rt, Shape::new(1, co, h, w))).unwrap();
        let x64 = T64::from_tensor(&x, 0);
        let k64: Vec<f64> = kern.data().iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = bias.data().iter().map(|&v| v as f64).collect();
        for i in 0..x64.data.len() {
            let n = central(|d| dot(&conv2d_ref(&perturbed(&x64, i, d), &k64, &b64, co, k), &r));
            c.record(gi.data()[i] as f64, n);
        }
        for i in 0..k64.len() {
            let n = central(|d| {
                let mut kk = k64.clone();
                kk[i] += d;
                dot(&conv2d_ref(&x64, &kk, &b64, co, k), &r)
            });
            c.record(gk.data()[i] as f64, n);
        }
        for i in 0..co {
            let n = central(|d| {
                let mut bb = b64.clone();
                bb[i] += d;
                dot(&conv2d_ref(&x64, &k64, &bb, co, k), &r)
            });
            c.record(gb.data()[i] as f64, n);
        }
        out.push(c);
    }

    // Elementwise and channel ops.
    let shape = Shape::new(1, 3, 4, 5);
    let numel = shape.numel();
    {
        let mut c = GradCheck::new("relu");
        let x = away_from_zero(&mut rng, shape, 0.01);
        let (r, rt) = projection(&mut rng, numel);
        let g = ops::relu_backward(&x, &reshape(rt, shape));
        let x64 = T64::from_tensor(&x, 0);
        for i in 0..numel {
            c.record(g.data()[i] as f64, central(|d| dot(&relu_ref(&perturbed(&x64, i, d)), &r)));
        }
        out.push(c);
    }
    {
        let mut c = GradCheck::new("sigmoid");
        let x = random_tensor(&mut rng, shape, -4.0, 4.0);
        let (r, rt) = projection(&mut rng, numel);
        let g = ops::sigmoid_backward(&ops::sigmoid(&x), &reshape(rt, shape));
        let x64 = T64::from_tensor(&x, 0);
        for i in 0..numel {
            c.record(g.data()[i] as f64, central(|d| dot(&sigmoid_ref(&perturbed(&x64, i, d)), &r)));
        }
        out.push(c);
    }
    {
        let mut c = GradCheck::new("global_avg_pool");
        let x = random_tensor(&mut rng, shape, -1.0, 1.0);
        let (r, rt) = projection(&mut rng, shape.c);
        let g = ops::global_avg_pool_backward(shape, &reshape(rt, Shape::new(1, shape.c, 1, 1)));
        let x64 = T64::from_tensor(&x, 0);
        for i in 0..numel {
            c.record(g.data()[i] as f64, central(|d| dot(&gap_ref(&perturbed(&x64, i, d)), &r)));
        }
        out.push(c);
    }
    {
        let mut c = GradCheck::new("channel_concat");
        let (sa, sb) = (Shape::new(1, 2, 3, 4), Shape::new(1, 3, 3, 4));
        let a = random_tensor(&mut rng, sa, -1.0, 1.0);
        let b = random_tensor(&mut rng, sb, -1.0, 1.0);
        let (r, rt) = projection(&mut rng, sa.numel() + sb.numel());
        let parts = ops::channel_concat_backward(&[sa, sb], &reshape(rt, Shape::new(1, 5, 3, 4)));
        let (a64, b64) = (T64::from_tensor(&a, 0), T64::from_tensor(&b, 0));
        for i in 0..sa.numel() {
            c.record(
                parts[0].data()[i] as f64,
                central(|d| dot(&concat_ref(&[&perturbed(&a64, i, d), &b64]), &r)),
            );
        }
        for i in 0..sb.numel() {
            c.record(
                parts[1].data()[i] as f64,
                central(|d| dot(&concat_ref(&[&a64, &perturbed(&b64, i, d)]), &r)),
            );
        }
        out.push(c);
    }
    {
        let mut c = GradCheck::new("channel_scale");
        let x = random_tensor(&mut rng, shape, -1.0, 1.0);
        let s = random_tensor(&mut rng, Shape::new(1, shape.c, 1, 1), 0.0, 1.0);
        let (r, rt) = projection(&mut rng, numel);
        let (gx, gs) = ops::channel_scale_backward(&x, &s, &reshape(rt, shape));
        let (x64, s64) = (T64::from_tensor(&x, 0), T64::from_tensor(&s, 0));
        for i in 0..numel {
            c.record(
                gx.data()[i] as f64,
                central(|d| dot(&channel_scale_ref(&perturbed(&x64, i, d), &s64), &r)),
            );
        }
        for i in 0..shape.c {
            c.record(
                gs.data()[i] as f64,
                central(|d| dot(&channel_scale_ref(&x64, &perturbed(&s64, i, d)), &r)),
            );
        }
        out.push(c);
    }
    {
        let mut c = GradCheck::new("ssim");
        let (h, w) = (13, 12);
        let a: Vec<f32> = (0..h * w).map(|_| rng.random()).collect();
        let b: Vec<f32> = a.iter().map(|v| (v + rng.random_range(-0.2..0.2f32)).clamp(0.0, 1.0)).collect();
        let (_, g) = ssim_with_grad(&a, &b, h, w).unwrap();
        let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        for i in 0..h * w {
            let n = central(|d| {
                let mut p = a64.clone();
                p[i] += d;
                ssim_ref(&p, &b64, h, w)
            });
            c.record(g[i] as f64, n);
        }
        out.push(c);
    }
    {
        // RMS, affine and add through the tape: 3 * (1 - ssim) + rms.
        let mut c = GradCheck::new("loss_total");
        let (h, w) = (12, 12);
        let shape = Shape::new(1, 1, h, w);
        let target = random_tensor(&mut rng, shape, 0.0, 1.0);
        let out_t = target.map(|v| v + 0.15 * (v * 17.0).sin());
        let mut tape = Tape::new();
        let o = tape.param("o", out_t.clone());
        let l = loss_graph(&mut tape, o, &target, 3.0).unwrap();
        let g = tape.backward(l.total).unwrap();
        let (o64, t64) = (T64::from_tensor(&out_t, 0), T64::from_tensor(&target, 0));
        for i in 0..h * w {
            c.record(
                g.get("o").unwrap().data()[i] as f64,
                central(|d| loss_ref(&perturbed(&o64, i, d), &t64, 3.0)),
            );
        }
        out.push(c);
    }
    out
}

/// Gradient of the full reconstruction loss for a sample of every parameter
/// tensor, on a 12x12 input.
pub fn check_network(seed: u64, per_tensor: usize) -> GradCheck {
    let mut rng = rng(seed);
    let mut params = NetworkParams::init(ChannelPlan::default(), seed);
    // Random non-zero biases so every bias path is exercised.
    for (_, t) in params.entries_mut() {
        if t.shape().n == 1 && t.shape().h == 1 {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let image = Tensor::from_fn(Shape::new(1, 1, 12, 12), |_, _, y, x| {
        (0.5 + 0.3 * ((x as f32 * 0.8).sin() + (y as f32 * 0.55).cos()) / 2.0 + rng.random_range(-0.05..0.05))
            .clamp(0.0, 1.0)
    });

    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = tape.leaf(image.clone());
    let enc = encoder_graph(&mut tape, &vars.encoder, x).unwrap();
    let out = decoder_graph(&mut tape, &vars.decoder, enc.features).unwrap();
    let l = loss_graph(&mut tape, out, &image, 3.0).unwrap();
    let grads = tape.backward(l.total).unwrap();

    let img64 = T64::from_tensor(&image, 0);
    let base = Params64::from_params(&params);
    let mut check = GradCheck::new("reconstruction loss through decoder(encoder(x))");
    for (name, t) in params.entries() {
        let n = t.shape().numel();
        for i in sample(&mut rng, n, per_tensor.min(n)) {
            let numeric = central(|d| {
                let mut p = Params64 {
                    entries: base.entries.clone(),
                };
                p.get_mut(name)[i] += d;
                loss_ref(&decoder_ref(&p, &encoder_ref(&p, &img64)), &img64, 3.0)
            });
            check.record(grads.get(name).unwrap().data()[i] as f64, numeric);
        }
    }
    check
}
