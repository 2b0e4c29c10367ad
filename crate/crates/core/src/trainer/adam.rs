//! Bias-corrected Adam and the step learning-rate schedule.

use crate::autodiff::GradientSet;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPSILON: f32 = 1e-8;

/// First and second moments per parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    step: u64,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a str, Shape)>) -> Self {
        let (names, shapes): (Vec<String>, Vec<Shape>) =
            params.into_iter().map(|(n, s)| (n.to_string(), s)).unzip();
        Self {
            step: 0,
            names,
            m: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.m[i])
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.v[i])
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Applies one Adam update in place. Nothing is modified when any gradient is
/// missing or non-finite.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f32,
) -> Result<()> {
    let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
    if params.len() != state.names.len() {
        return Err(Error::invalid(format!(
            "optimizer tracks {} parameters, got {}",
            state.names.len(),
            params.len()
        )));
    }
    for ((name, p), expected) in params.iter().zip(&state.names) {
        if name != expected {
            return Err(Error::invalid(format!("expected parameter `{expected}`, got `{name}`")));
        }
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.to_string() });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (i, (name, p)) in params.into_iter().enumerate() {
        let g = grads.get(name).expect("checked above").data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

/// `base_lr * decay^floor(epoch / every)`.
pub fn lr_schedule(epoch: usize, base_lr: f32, decay: f32, every: usize) -> f32 {
    base_lr * decay.powi((epoch / every.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_for(values: &[(&str, Tensor)]) -> GradientSet {
        values.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0, 1e-4, 0.8, 2), 1e-4);
        assert_eq!(lr_schedule(1, 1e-4, 0.8, 2), 1e-4);
        assert!((lr_schedule(2, 1e-4, 0.8, 2) - 0.8e-4).abs() < 1e-12);
        assert!((lr_schedule(5, 1e-4, 0.8, 2) - 0.64e-4).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let shape = Shape::new(1, 3, 1, 1);
        let mut p = Tensor::full(shape, 0.5);
        let mut state = AdamState::new([("p", shape)]);
        let g = grads_for(&[("p", Tensor::full(shape, 2.0))]);
        adam_step([("p", &mut p)], &g, &mut state, 0.1).unwrap();
        let m1 = state.first_moment("p").unwrap().data()[0];
        let before = p.clone();
        let zero = grads_for(&[("p", Tensor::zeros(shape))]);
        adam_step([("p", &mut p)], &zero, &mut state, 0.1).unwrap();
        let m2 = state.first_moment("p").unwrap().data()[0];
        assert!(m2.abs() < m1.abs());
        // The update shrinks but moments carry momentum; from a fresh state a
        // zero gradient changes nothing.
        let mut fresh = AdamState::new([("p", shape)]);
        let mut q = before.clone();
        adam_step([("p", &mut q)], &zero, &mut fresh, 0.1).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let shape = Shape::new(1, 2, 1, 1);
        for g in [0.003f32, 1.0, 250.0] {
            let mut p = Tensor::zeros(shape);
            let mut state = AdamState::new([("p", shape)]);
            let grads = grads_for(&[("p", Tensor::full(shape, g))]);
            adam_step([("p", &mut p)], &grads, &mut state, 1e-3).unwrap();
            // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps).
            let expected = -1e-3 * g / (g.abs() + EPSILON);
            assert!((p.data()[0] - expected).abs() < 1e-8, "g={g}: {}", p.data()[0]);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let shape = Shape::new(1, 1, 1, 1);
        let mut p = Tensor::full(shape, 1.0);
        let mut state = AdamState::new([("p", shape)]);
        let g = grads_for(&[("p", Tensor::full(shape, f32::NAN))]);
        let err = adam_step([("p", &mut p)], &g, &mut state, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(state.step(), 0);
    }
}
