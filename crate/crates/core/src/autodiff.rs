//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is topologically sorted
//! by construction. [`Tape::backward`] walks it once in reverse and returns the
//! gradient of every registered parameter.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::ssim;
use crate::tensor::{expect_same_shape, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Conv2d { input: Var, kernel: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    ChannelScale { x: Var, scale: Var },
    Sum(Var),
    /// `scale * x + offset` on a scalar.
    Affine { x: Var, scale: f32 },
    Add(Var, Var),
    /// Batch-mean SSIM against a constant target.
    Ssim { x: Var, target: Tensor },
    /// Batch-mean per-image RMS error against a constant target.
    Rms { x: Var, target: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter name, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    grads: IndexMap<String, Tensor>,
}

impl GradientSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

impl FromIterator<(String, Tensor)> for GradientSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            grads: iter.into_iter().collect(),
        }
    }
}

/// Single-writer record of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        self.nodes.swap_remove(v.0).value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable parameter; appears in the [`GradientSet`] under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(value, Op::Param(name.into()), true)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        let g = self.grad_flag(&[input, kernel, bias]);
        Ok(self.push(y, Op::Conv2d { input, kernel, bias }, g))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let g = self.grad_flag(&[x]);
        self.push(y, Op::Relu(x), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        let g = self.grad_flag(&[x]);
        self.push(y, Op::Sigmoid(x), g)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        let g = self.grad_flag(&[x]);
        Ok(self.push(y, Op::GlobalAvgPool(x), g))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let y = ops::channel_concat(&values)?;
        let g = self.grad_flag(parts);
        Ok(self.push(y, Op::Concat(parts.to_vec()), g))
    }

    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let y = ops::channel_scale(self.value(x), self.value(scale))?;
        let g = self.grad_flag(&[x, scale]);
        Ok(self.push(y, Op::ChannelScale { x, scale }, g))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum() as f32);
        let g = self.grad_flag(&[x]);
        self.push(y, Op::Sum(x), g)
    }

    /// `scale * x + offset` for scalar `x`.
    pub fn affine(&mut self, x: Var, scale: f32, offset: f32) -> Result<Var> {
        let v = self.scalar_of(x, "affine")?;
        let g = self.grad_flag(&[x]);
        Ok(self.push(Tensor::scalar(scale * v + offset), Op::Affine { x, scale }, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b))?;
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), g))
    }

    /// Mean SSIM over the batch, each image compared with its target.
    pub fn ssim(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xs = self.value(x).shape();
        expect_same_shape("ssim", xs, target.shape())?;
        let mut total = 0.0f64;
        for n in 0..xs.n {
            for c in 0..xs.c {
                total += ssim::ssim(self.value(x).plane(n, c), target.plane(n, c), xs.h, xs.w)?;
            }
        }
        let y = Tensor::scalar((total / (xs.n * xs.c) as f64) as f32);
        let g = self.grad_flag(&[x]);
        Ok(self.push(
            y,
            Op::Ssim {
                x,
                target: target.clone(),
            },
            g,
        ))
    }

    /// Mean over the batch of the per-image root-mean-square error.
    pub fn rms(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xs = self.value(x).shape();
        expect_same_shape("rms", xs, target.shape())?;
        let total: f64 = (0..xs.n)
            .map(|n| rms_item(self.value(x).item(n), target.item(n)))
            .sum();
        let y = Tensor::scalar((total / xs.n as f64) as f32);
        let g = self.grad_flag(&[x]);
        Ok(self.push(
            y,
            Op::Rms {
                x,
                target: target.clone(),
            },
            g,
        ))
    }

    fn scalar_of(&self, x: Var, op: &'static str) -> Result<f32> {
        self.value(x)
            .scalar_value()
            .ok_or_else(|| Error::shape(op, Shape::scalar(), self.value(x).shape()))
    }

    /// Gradients of the scalar at `loss` for every parameter on the tape.
    pub fn backward(&self, loss: Var) -> Result<GradientSet> {
        self.backward_with(loss, 1.0)
    }

    /// Like [`Tape::backward`] with the loss gradient seeded to `seed`.
    pub fn backward_with(&self, loss: Var, seed: f32) -> Result<GradientSet> {
        if self.value(loss).scalar_value().is_none() {
            return Err(Error::NotScalar(loss.0));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(seed));
        let mut out = IndexMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(name) = &node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(name.clone(), g);
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        // Parameters recorded after the loss node have no path to it.
        for node in &self.nodes[loss.0 + 1..] {
            if let Op::Param(name) = &node.op {
                out.insert(name.clone(), Tensor::zeros(node.value.shape()));
            }
        }
        // Restore registration order.
        let mut ordered = IndexMap::with_capacity(out.len());
        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                if let Some(g) = out.swap_remove(name) {
                    ordered.insert(name.clone(), g);
                }
            }
        }
        Ok(GradientSet { grads: ordered })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let acc = |v: Var, contribution: Tensor, grads: &mut [Option<Tensor>]| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => {
                    *slot = Some(contribution);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { input, kernel, bias } => {
                let (gi, gk, gb) = ops::conv2d_backward(self.value(*input), self.value(*kernel), g)?;
                acc(*input, gi, grads)?;
                acc(*kernel, gk, grads)?;
                acc(*bias, gb, grads)?;
            }
            Op::Relu(x) => acc(*x, ops::relu_backward(self.value(*x), g), grads)?,
            Op::Sigmoid(x) => acc(*x, ops::sigmoid_backward(&node.value, g), grads)?,
            Op::GlobalAvgPool(x) => {
                acc(*x, ops::global_avg_pool_backward(self.value(*x).shape(), g), grads)?
            }
            Op::Concat(parts) => {
                let shapes: Vec<Shape> = parts.iter().map(|&v| self.value(v).shape()).collect();
                for (v, part) in parts.iter().zip(ops::channel_concat_backward(&shapes, g)) {
                    acc(*v, part, grads)?;
                }
            }
            Op::ChannelScale { x, scale } => {
                let (gx, gs) = ops::channel_scale_backward(self.value(*x), self.value(*scale), g);
                acc(*x, gx, grads)?;
                acc(*scale, gs, grads)?;
            }
            Op::Sum(x) => {
                let seed = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), seed), grads)?;
            }
            Op::Affine { x, scale } => acc(*x, Tensor::scalar(g.data()[0] * scale), grads)?,
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads)?;
                acc(*b, g.clone(), grads)?;
            }
            Op::Ssim { x, target } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let scale = g.data()[0] / (s.n * s.c) as f32;
                let mut gx = Vec::with_capacity(s.numel());
                for n in 0..s.n {
                    for c in 0..s.c {
                        let (_, grad) = ssim::ssim_with_grad(xv.plane(n, c), target.plane(n, c), s.h, s.w)?;
                        gx.extend(grad.into_iter().map(|v| v * scale));
                    }
                }
                acc(*x, Tensor::from_vec(s, gx)?, grads)?;
            }
            Op::Rms { x, target } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let scale = g.data()[0] / s.n as f32;
                let mut gx = Vec::with_capacity(s.numel());
                for n in 0..s.n {
                    gx.extend(rms_item_grad(xv.item(n), target.item(n)).into_iter().map(|v| v * scale));
                }
                acc(*x, Tensor::from_vec(s, gx)?, grads)?;
            }
        }
        Ok(())
    }
}

fn rms_item(a: &[f32], b: &[f32]) -> f64 {
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    (sq / a.len() as f64).sqrt()
}

/// d rms / d a. Defined as zero where the error vanishes.
fn rms_item_grad(a: &[f32], b: &[f32]) -> Vec<f32> {
    let r = rms_item(a, b);
    if r == 0.0 {
        return vec![0.0; a.len()];
    }
    let k = 1.0 / (a.len() as f64 * r);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| ((x as f64 - y as f64) * k) as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::full(Shape::new(1, 2, 3, 3), 0.3));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get("x").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_requires_scalar_terminal() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn unused_parameters_get_zero_gradients_in_order() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::full(Shape::new(1, 1, 1, 2), 2.0));
        let _b = tape.param("b", Tensor::full(Shape::new(1, 1, 1, 3), 2.0));
        let loss = tape.sum(a);
        let _c = tape.param("c", Tensor::full(Shape::new(1, 1, 1, 1), 2.0));
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.names().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(grads.get("b").unwrap().shape(), Shape::new(1, 1, 1, 3));
        assert!(grads.get("b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, x| {
            ((y * 4 + x) as f32 * 0.37).sin()
        }));
        let k = tape.param("k", Tensor::from_fn(Shape::new(2, 1, 3, 3), |o, _, y, x| {
            ((o * 9 + y * 3 + x) as f32 * 0.91).cos()
        }));
        let b = tape.param("b", Tensor::full(Shape::new(1, 2, 1, 1), 0.1));
        let y = tape.conv2d(x, k, b).unwrap();
        let r = tape.relu(y);
        let loss = tape.sum(r);
        assert_eq!(tape.backward(loss).unwrap(), tape.backward(loss).unwrap());
    }

    #[test]
    fn add_and_affine_chain() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::full(Shape::new(1, 1, 1, 4), 1.0));
        let s = tape.sum(x);
        let a = tape.affine(s, -3.0, 5.0).unwrap();
        let loss = tape.add(a, s).unwrap();
        assert_eq!(tape.value(loss).scalar_value(), Some(-3.0 * 4.0 + 5.0 + 4.0));
        let g = tape.backward(loss).unwrap();
        assert!(g.get("x").unwrap().data().iter().all(|&v| v == -2.0));
    }

    #[test]
    fn rms_gradient_vanishes_at_zero_error() {
        let a = [0.2f32, 0.4, 0.6];
        assert_eq!(rms_item_grad(&a, &a), vec![0.0; 3]);
        assert_eq!(rms_item(&a, &a), 0.0);
    }
}
