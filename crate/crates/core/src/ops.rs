//! Forward kernels and their vector-Jacobian products.
//!
//! Every function here is pure. The autodiff tape in [`crate::autodiff`] calls
//! the forward kernels while recording and the `*_backward` kernels when
//! replaying.

use crate::error::{Error, Result};
use crate::tensor::{expect_same_shape, Shape, Tensor};

/// Zero-padded, stride-1, "same" 2-D convolution (cross-correlation).
///
/// `kernel` is `(co, ci, k, k)` with `k` in `{1, 3}`; `bias` is `(1, co, 1, 1)`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), bias.shape())?;
    input.ensure_finite("conv2d")?;
    let s = input.shape();
    let hw = s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n, geo.co, s.h, s.w));
    let mut col = vec![0.0f32; geo.col_rows() * hw];
    for n in 0..s.n {
        let x = input.item(n);
        let cols: &[f32] = if geo.k == 1 {
            x
        } else {
            im2col(x, s.c, s.h, s.w, &mut col);
            &col
        };
        let y = out.item_mut(n);
        for (o, plane) in y.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias.data()[o]);
        }
        // y (co x hw) += K (co x ci*k*k) . cols (ci*k*k x hw)
        gemm(
            geo.co,
            geo.col_rows(),
            hw,
            kernel.data(),
            (geo.col_rows() as isize, 1),
            cols,
            (hw as isize, 1),
            y,
            1.0,
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = input.shape();
    let ks = kernel.shape();
    let geo = ConvGeometry::new(s, ks, Shape::new(1, ks.n, 1, 1))?;
    expect_same_shape("conv2d_backward", Shape::new(s.n, geo.co, s.h, s.w), grad_out.shape())?;
    let hw = s.plane();
    let rows = geo.col_rows();
    let mut grad_in = Tensor::zeros(s);
    let mut grad_k = Tensor::zeros(ks);
    let mut grad_b = Tensor::zeros(Shape::new(1, geo.co, 1, 1));
    let mut col = vec![0.0f32; rows * hw];
    let mut dcol = vec![0.0f32; rows * hw];
    for n in 0..s.n {
        let x = input.item(n);
        let g = grad_out.item(n);
        let cols: &[f32] = if geo.k == 1 {
            x
        } else {
            im2col(x, s.c, s.h, s.w, &mut col);
            &col
        };
        for (o, plane) in g.chunks_exact(hw).enumerate() {
            grad_b.data_mut()[o] += plane.iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        // dK (co x rows) += g (co x hw) . cols^T (hw x rows)
        gemm(
            geo.co,
            hw,
            rows,
            g,
            (hw as isize, 1),
            cols,
            (1, hw as isize),
            grad_k.data_mut(),
            1.0,
        );
        // dcols (rows x hw) = K^T (rows x co) . g (co x hw)
        if geo.k == 1 {
            let gi = grad_in.item_mut(n);
            gemm(rows, geo.co, hw, kernel.data(), (1, rows as isize), g, (hw as isize, 1), gi, 0.0);
        } else {
            gemm(
                rows,
                geo.co,
                hw,
                kernel.data(),
                (1, rows as isize),
                g,
                (hw as isize, 1),
                &mut dcol,
                0.0,
            );
            col2im(&dcol, s.c, s.h, s.w, grad_in.item_mut(n));
        }
    }
    Ok((grad_in, grad_k, grad_b))
}

struct ConvGeometry {
    ci: usize,
    co: usize,
    k: usize,
}

impl ConvGeometry {
    fn new(input: Shape, kernel: Shape, bias: Shape) -> Result<Self> {
        if kernel.h != kernel.w || !(kernel.h == 1 || kernel.h == 3) {
            return Err(Error::shape("conv2d kernel", "(co, ci, 3, 3) or (co, ci, 1, 1)", kernel));
        }
        if kernel.c != input.c {
            return Err(Error::shape(
                "conv2d input channels",
                format!("{} channels", kernel.c),
                input,
            ));
        }
        if bias != Shape::new(1, kernel.n, 1, 1) {
            return Err(Error::shape("conv2d bias", Shape::new(1, kernel.n, 1, 1), bias));
        }
        Ok(Self {
            ci: kernel.c,
            co: kernel.n,
            k: kernel.h,
        })
    }

    fn col_rows(&self) -> usize {
        self.ci * self.k * self.k
    }
}

/// Unrolls 3x3 zero-padded neighborhoods: `col[(i*9 + dy*3 + dx), y*w + x]`.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, col: &mut [f32]) {
    let hw = h * w;
    for i in 0..c {
        let src = &x[i * hw..(i + 1) * hw];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &mut col[(i * 9 + dy * 3 + dx) * hw..][..hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let line = &src[sy as usize * w..(sy as usize + 1) * w];
                    match dx {
                        0 => {
                            out[0] = 0.0;
                            out[1..].copy_from_slice(&line[..w - 1]);
                        }
                        1 => out.copy_from_slice(line),
                        _ => {
                            out[..w - 1].copy_from_slice(&line[1..]);
                            out[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the (unpadded) image.
fn col2im(col: &[f32], c: usize, h: usize, w: usize, x: &mut [f32]) {
    let hw = h * w;
    for i in 0..c {
        let dst = &mut x[i * hw..(i + 1) * hw];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &col[(i * 9 + dy * 3 + dx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let line = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match dx {
                        0 => {
                            for (d, s) in line[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in line.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in line[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = beta * c + a . b` for row-major `c` of size `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    debug_assert!(a.len() >= ((m - 1) as isize * rsa + (k - 1) as isize * csa + 1) as usize);
    debug_assert!(b.len() >= ((k - 1) as isize * rsb + (n - 1) as isize * csb + 1) as usize);
    // SAFETY: the debug assertions above spell out the extents sgemm reads and
    // writes; every call site passes buffers sized from the same dimensions.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

#[inline]
pub fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Takes the forward *output* `y = sigmoid(x)`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::Empty { what: "spatial extent" });
    }
    let mut out = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let sum: f64 = x.plane(n, c).iter().map(|&v| v as f64).sum();
            out.push((sum / s.plane() as f64) as f32);
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), out)
}

pub fn global_avg_pool_backward(input: Shape, grad_out: &Tensor) -> Tensor {
    let scale = 1.0 / input.plane() as f32;
    Tensor::from_fn(input, |n, c, _, _| grad_out.at(n, c, 0, 0) * scale)
}

/// Concatenates along channels, in argument order.
pub fn channel_concat(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::Empty { what: "concat operand list" })?;
    let s0 = first.shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(Error::shape("channel_concat", s0, s));
        }
        channels += s.c;
    }
    let out_shape = Shape::new(s0.n, channels, s0.h, s0.w);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..s0.n {
        for p in parts {
            data.extend_from_slice(p.item(n));
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Splits a concatenated gradient back into per-operand slices.
pub fn channel_concat_backward(parts: &[Shape], grad_out: &Tensor) -> Vec<Tensor> {
    let go = grad_out.shape();
    let mut outs: Vec<Vec<f32>> = parts.iter().map(|s| Vec::with_capacity(s.numel())).collect();
    for n in 0..go.n {
        let item = grad_out.item(n);
        let mut offset = 0;
        for (s, out) in parts.iter().zip(&mut outs) {
            let len = s.item();
            out.extend_from_slice(&item[offset..offset + len]);
            offset += len;
        }
    }
    parts
        .iter()
        .zip(outs)
        .map(|(s, d)| Tensor::from_vec(*s, d).expect("split sizes"))
        .collect()
}

/// `out[n, c, y, x] = x[n, c, y, x] * s[n, c, 0, 0]`.
pub fn channel_scale(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    expect_same_shape("channel_scale", Shape::new(xs.n, xs.c, 1, 1), s.shape())?;
    let hw = xs.plane();
    let mut data = x.data().to_vec();
    for (i, plane) in data.chunks_exact_mut(hw.max(1)).enumerate() {
        let g = s.data()[i];
        for v in plane {
            *v *= g;
        }
    }
    Tensor::from_vec(xs, data)
}

pub fn channel_scale_backward(x: &Tensor, s: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let xs = x.shape();
    let hw = xs.plane();
    let grad_x = channel_scale(grad_out, s).expect("validated in forward");
    let grad_s: Vec<f32> = x
        .data()
        .chunks_exact(hw.max(1))
        .zip(grad_out.data().chunks_exact(hw.max(1)))
        .map(|(xp, gp)| xp.iter().zip(gp).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32)
        .collect();
    (grad_x, Tensor::from_vec(s.shape(), grad_s).expect("one per channel"))
}
