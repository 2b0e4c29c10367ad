//! Reconstruction loss: `lambda * (1 - SSIM(O, I)) + RMS(O - I)`.
//!
//! The pixel term is the Euclidean distance divided by the square root of the
//! pixel count, so its scale does not depend on the patch size.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{expect_same_shape, Tensor};

/// Scalar nodes of one recorded loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ssim: Var,
    pub pixel: Var,
}

/// Records the loss of `output` against the constant `target`.
pub fn loss_graph(tape: &mut Tape, output: Var, target: &Tensor, lambda: f32) -> Result<LossVars> {
    let ssim = tape.ssim(output, target)?;
    let pixel = tape.rms(output, target)?;
    let structural = tape.affine(ssim, -lambda, lambda)?;
    let total = tape.add(structural, pixel)?;
    Ok(LossVars { total, ssim, pixel })
}

/// Loss value and its two components, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f32,
    pub ssim: f32,
    pub pixel: f32,
}

pub fn loss_terms(output: &Tensor, input: &Tensor, lambda: f32) -> Result<LossValue> {
    expect_same_shape("loss_total", input.shape(), output.shape())?;
    let mut tape = Tape::new();
    let o = tape.leaf(output.clone());
    let v = loss_graph(&mut tape, o, input, lambda)?;
    let get = |var: Var| tape.value(var).data()[0];
    Ok(LossValue {
        total: get(v.total),
        ssim: get(v.ssim),
        pixel: get(v.pixel),
    })
}

/// `lambda * (1 - ssim) + rms`.
pub fn loss_total(output: &Tensor, input: &Tensor, lambda: f32) -> Result<f32> {
    Ok(loss_terms(output, input, lambda)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn pattern(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
            0.4 + 0.3 * ((x as f32 * 0.7).sin() * (y as f32 * 0.45).cos())
        })
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let t = pattern(16, 16);
        assert!(loss_total(&t, &t, 3.0).unwrap().abs() < 1e-6);
    }

    #[test]
    fn lambda_zero_leaves_pixel_term() {
        let i = pattern(16, 16);
        let o = i.map(|v| v * 0.8 + 0.05);
        let terms = loss_terms(&o, &i, 3.0).unwrap();
        assert_eq!(loss_total(&o, &i, 0.0).unwrap(), terms.pixel);
    }

    #[test]
    fn constant_offset_hand_evaluation() {
        // O = I + 0.1: RMS is exactly 0.1. SSIM only loses its luminance term:
        // with sigma_o = sigma_i and cov = var, each window contributes
        // (2 m (m + 0.1) + C1) / (m^2 + (m + 0.1)^2 + C1).
        let i = Tensor::full(Shape::new(1, 1, 16, 16), 0.3);
        let o = i.map(|v| v + 0.1);
        let t = loss_terms(&o, &i, 3.0).unwrap();
        assert!((t.pixel - 0.1).abs() < 1e-6);
        let c1 = 1e-4f64;
        let (m, n) = (0.3f64, 0.4f64);
        let s = (2.0 * m * n + c1) / (m * m + n * n + c1);
        assert!((t.ssim as f64 - s).abs() < 1e-5, "{} vs {s}", t.ssim);
        let expected = 3.0 * (1.0 - s) + 0.1;
        assert!((t.total as f64 - expected).abs() < 1e-5);
    }

    #[test]
    fn loss_is_non_negative() {
        let i = pattern(12, 14);
        for k in 0..5 {
            let o = i.map(|v| (v * (1.0 + 0.3 * k as f32)).sin());
            assert!(loss_total(&o, &i, 3.0).unwrap() >= 0.0);
        }
    }
}
