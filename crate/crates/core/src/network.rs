//! Encoder (C1 + squeeze-excitation dense block) and decoder (C2..C5).
//!
//! Encoder:
//! ```text
//! x1 = relu(c1(img))
//! x2 = relu(dc1(x1))
//! x3 = relu(dc2([x1, x2]))
//! x4 = relu(dc3([x1, x2, x3]))
//! d  = [x1, x2, x3, x4]
//! s  = sigmoid(expand(relu(reduce(avgpool(d)))))
//! F  = d * s
//! ```
//! Decoder: `relu(c2) -> relu(c3) -> relu(c4) -> c5` with a linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result, WeightFileError};
use crate::tensor::{Shape, Tensor};

/// Canonical parameter order, shared by the tape and the weight file.
pub const PARAM_NAMES: [&str; 20] = [
    "c1.w",
    "c1.b",
    "dc1.w",
    "dc1.b",
    "dc2.w",
    "dc2.b",
    "dc3.w",
    "dc3.b",
    "se.reduce.w",
    "se.reduce.b",
    "se.expand.w",
    "se.expand.b",
    "c2.w",
    "c2.b",
    "c3.w",
    "c3.b",
    "c4.w",
    "c4.b",
    "c5.w",
    "c5.b",
];

/// Layer widths. The default is 16-channel growth (64 feature channels),
/// an SE bottleneck of 4, and a 64/32/16 decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChannelPlan {
    pub growth: usize,
    pub se_hidden: usize,
    pub decoder: [usize; 3],
}

impl Default for ChannelPlan {
    fn default() -> Self {
        Self {
            growth: 16,
            se_hidden: 4,
            decoder: [64, 32, 16],
        }
    }
}

impl ChannelPlan {
    pub fn feature_channels(&self) -> usize {
        4 * self.growth
    }

    /// `(out, in, kernel)` for each layer, in canonical order.
    fn layer_shapes(&self) -> [(usize, usize, usize); 10] {
        let g = self.growth;
        let f = self.feature_channels();
        let [d2, d3, d4] = self.decoder;
        [
            (g, 1, 3),
            (g, g, 3),
            (g, 2 * g, 3),
            (g, 3 * g, 3),
            (self.se_hidden, f, 1),
            (f, self.se_hidden, 1),
            (d2, f, 3),
            (d3, d2, 3),
            (d4, d3, 3),
            (1, d4, 3),
        ]
    }
}

/// Kernel `(co, ci, k, k)` and bias `(1, co, 1, 1)` of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn kaiming(co: usize, ci: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (ci * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let weight = Tensor::from_fn(Shape::new(co, ci, k, k), |_, _, _, _| {
            rng.random_range(-bound..bound)
        });
        Self {
            weight,
            bias: Tensor::zeros(Shape::new(1, co, 1, 1)),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeParams {
    pub reduce: ConvParams,
    pub expand: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub c1: ConvParams,
    pub dc1: ConvParams,
    pub dc2: ConvParams,
    pub dc3: ConvParams,
    pub se: SeParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub c2: ConvParams,
    pub c3: ConvParams,
    pub c4: ConvParams,
    pub c5: ConvParams,
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct Metadata {
    pub format_version: u32,
    pub plan: ChannelPlan,
    pub creation: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub metadata: Metadata,
}

impl NetworkParams {
    /// Kaiming-uniform kernels and zero biases from a seeded generator.
    pub fn init(plan: ChannelPlan, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = plan
            .layer_shapes()
            .map(|(co, ci, k)| ConvParams::kaiming(co, ci, k, &mut rng))
            .into_iter();
        let mut next = || layers.next().expect("ten layers");
        Self {
            encoder: EncoderParams {
                c1: next(),
                dc1: next(),
                dc2: next(),
                dc3: next(),
                se: SeParams {
                    reduce: next(),
                    expand: next(),
                },
            },
            decoder: DecoderParams {
                c2: next(),
                c3: next(),
                c4: next(),
                c5: next(),
            },
            metadata: Metadata {
                format_version: crate::weights::FORMAT_VERSION,
                plan,
                creation: format!("init seed={seed}"),
            },
        }
    }

    fn layers(&self) -> [&ConvParams; 10] {
        let (e, d) = (&self.encoder, &self.decoder);
        [&e.c1, &e.dc1, &e.dc2, &e.dc3, &e.se.reduce, &e.se.expand, &d.c2, &d.c3, &d.c4, &d.c5]
    }

    fn layers_mut(&mut self) -> [&mut ConvParams; 10] {
        let (e, d) = (&mut self.encoder, &mut self.decoder);
        [
            &mut e.c1,
            &mut e.dc1,
            &mut e.dc2,
            &mut e.dc3,
            &mut e.se.reduce,
            &mut e.se.expand,
            &mut d.c2,
            &mut d.c3,
            &mut d.c4,
            &mut d.c5,
        ]
    }

    /// Parameters in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, &Tensor)> {
        let mut names = PARAM_NAMES.iter();
        let mut out = Vec::with_capacity(PARAM_NAMES.len());
        for layer in self.layers() {
            out.push((*names.next().unwrap(), &layer.weight));
            out.push((*names.next().unwrap(), &layer.bias));
        }
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut names = PARAM_NAMES.iter();
        let mut out = Vec::with_capacity(PARAM_NAMES.len());
        for layer in self.layers_mut() {
            out.push((*names.next().unwrap(), &mut layer.weight));
            out.push((*names.next().unwrap(), &mut layer.bias));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds parameters from canonical-order entries, inferring the
    /// channel plan from the shapes and validating the whole chain.
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self, WeightFileError> {
        if entries.len() != PARAM_NAMES.len() {
            return Err(WeightFileError::EntryCount {
                expected: PARAM_NAMES.len(),
                found: entries.len(),
            });
        }
        for ((name, t), expected) in entries.iter().zip(PARAM_NAMES) {
            if name != expected {
                return Err(WeightFileError::UnexpectedEntry {
                    expected: expected.to_string(),
                    found: name.clone(),
                });
            }
            if !t.is_finite() {
                return Err(WeightFileError::NonFiniteParam(name.clone()));
            }
        }
        let find = |i: usize| entries[i].1.shape();
        let plan = ChannelPlan {
            growth: find(0).n,
            se_hidden: find(8).n,
            decoder: [find(12).n, find(14).n, find(16).n],
        };
        for (i, (co, ci, k)) in plan.layer_shapes().into_iter().enumerate() {
            let (wname, w) = (&entries[2 * i].0, find(2 * i));
            let (bname, b) = (&entries[2 * i + 1].0, find(2 * i + 1));
            if w != Shape::new(co, ci, k, k) {
                return Err(WeightFileError::ShapeChain {
                    entry: wname.clone(),
                    detail: format!("expected {}, found {w}", Shape::new(co, ci, k, k)),
                });
            }
            if b != Shape::new(1, co, 1, 1) {
                return Err(WeightFileError::ShapeChain {
                    entry: bname.clone(),
                    detail: format!("expected {co} biases, found {b}"),
                });
            }
        }
        if plan.growth == 0 || plan.se_hidden == 0 || plan.decoder.contains(&0) {
            return Err(WeightFileError::ShapeChain {
                entry: "plan".into(),
                detail: "zero-width layer".into(),
            });
        }
        let mut it = entries.into_iter().map(|(_, t)| t);
        let mut conv = || ConvParams {
            weight: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        Ok(Self {
            encoder: EncoderParams {
                c1: conv(),
                dc1: conv(),
                dc2: conv(),
                dc3: conv(),
                se: SeParams {
                    reduce: conv(),
                    expand: conv(),
                },
            },
            decoder: DecoderParams {
                c2: conv(),
                c3: conv(),
                c4: conv(),
                c5: conv(),
            },
            metadata: Metadata {
                format_version: crate::weights::FORMAT_VERSION,
                plan,
                creation: String::new(),
            },
        })
    }

    /// Records every parameter as trainable.
    pub fn register(&self, tape: &mut Tape) -> NetworkVars {
        NetworkVars::record(self, tape, true)
    }

    /// Records every parameter as a constant.
    pub fn constants(&self, tape: &mut Tape) -> NetworkVars {
        NetworkVars::record(self, tape, false)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub c1: ConvVars,
    pub dc1: ConvVars,
    pub dc2: ConvVars,
    pub dc3: ConvVars,
    pub reduce: ConvVars,
    pub expand: ConvVars,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub c2: ConvVars,
    pub c3: ConvVars,
    pub c4: ConvVars,
    pub c5: ConvVars,
}

/// Tape handles for a whole network.
#[derive(Clone, Copy, Debug)]
pub struct NetworkVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
}

impl NetworkVars {
    fn record(params: &NetworkParams, tape: &mut Tape, trainable: bool) -> Self {
        let mut vars = Vec::with_capacity(PARAM_NAMES.len());
        for (name, t) in params.entries() {
            vars.push(if trainable {
                tape.param(name, t.clone())
            } else {
                tape.leaf(t.clone())
            });
        }
        let conv = |i: usize| ConvVars {
            weight: vars[2 * i],
            bias: vars[2 * i + 1],
        };
        Self {
            encoder: EncoderVars {
                c1: conv(0),
                dc1: conv(1),
                dc2: conv(2),
                dc3: conv(3),
                reduce: conv(4),
                expand: conv(5),
            },
            decoder: DecoderVars {
                c2: conv(6),
                c3: conv(7),
                c4: conv(8),
                c5: conv(9),
            },
        }
    }
}

/// Handles to the intermediate encoder activations.
#[derive(Clone, Copy, Debug)]
pub struct EncoderTrace {
    pub x1: Var,
    pub x2: Var,
    pub x3: Var,
    pub x4: Var,
    pub gate: Var,
    pub features: Var,
}

fn conv_relu(tape: &mut Tape, x: Var, p: ConvVars) -> Result<Var> {
    let y = tape.conv2d(x, p.weight, p.bias)?;
    Ok(tape.relu(y))
}

/// Records the encoder on `tape` for a `(n, 1, h, w)` image batch.
pub fn encoder_graph(tape: &mut Tape, p: &EncoderVars, image: Var) -> Result<EncoderTrace> {
    if tape.value(image).shape().c != 1 {
        return Err(Error::shape("encoder input", "1 channel", tape.value(image).shape()));
    }
    let x1 = conv_relu(tape, image, p.c1)?;
    let x2 = conv_relu(tape, x1, p.dc1)?;
    let c12 = tape.concat(&[x1, x2])?;
    let x3 = conv_relu(tape, c12, p.dc2)?;
    let c123 = tape.concat(&[x1, x2, x3])?;
    let x4 = conv_relu(tape, c123, p.dc3)?;
    let dense = tape.concat(&[x1, x2, x3, x4])?;
    let pooled = tape.global_avg_pool(dense)?;
    let hidden = conv_relu(tape, pooled, p.reduce)?;
    let logits = tape.conv2d(hidden, p.expand.weight, p.expand.bias)?;
    let gate = tape.sigmoid(logits);
    let features = tape.channel_scale(dense, gate)?;
    Ok(EncoderTrace {
        x1,
        x2,
        x3,
        x4,
        gate,
        features,
    })
}

/// Records the decoder on `tape`. The output is not clamped.
pub fn decoder_graph(tape: &mut Tape, p: &DecoderVars, features: Var) -> Result<Var> {
    let x = conv_relu(tape, features, p.c2)?;
    let x = conv_relu(tape, x, p.c3)?;
    let x = conv_relu(tape, x, p.c4)?;
    tape.conv2d(x, p.c5.weight, p.c5.bias)
}

/// Encoder output for one image: a `(1, C, h, w)` tensor, `C = 4 * growth`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().n != 1 {
            return Err(Error::shape("feature map", "batch of 1", tensor.shape()));
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape().c
    }

    pub fn height(&self) -> usize {
        self.0.shape().h
    }

    pub fn width(&self) -> usize {
        self.0.shape().w
    }
}

/// Every intermediate the encoder produces for one image.
#[derive(Clone, Debug)]
pub struct EncoderActivations {
    pub x1: Tensor,
    pub x2: Tensor,
    pub x3: Tensor,
    pub x4: Tensor,
    pub gate: Tensor,
    pub features: FeatureMap,
}

fn encoder_vars(p: &EncoderParams, tape: &mut Tape) -> EncoderVars {
    let mut conv = |c: &ConvParams| ConvVars {
        weight: tape.leaf(c.weight.clone()),
        bias: tape.leaf(c.bias.clone()),
    };
    EncoderVars {
        c1: conv(&p.c1),
        dc1: conv(&p.dc1),
        dc2: conv(&p.dc2),
        dc3: conv(&p.dc3),
        reduce: conv(&p.se.reduce),
        expand: conv(&p.se.expand),
    }
}

fn check_image(image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape("encoder input", "(1, 1, h, w)", s));
    }
    Ok(())
}

pub fn encoder_activations(p: &EncoderParams, image: &Tensor) -> Result<EncoderActivations> {
    check_image(image)?;
    let mut tape = Tape::new();
    let vars = encoder_vars(p, &mut tape);
    let img = tape.leaf(image.clone());
    let t = encoder_graph(&mut tape, &vars, img)?;
    Ok(EncoderActivations {
        x1: tape.value(t.x1).clone(),
        x2: tape.value(t.x2).clone(),
        x3: tape.value(t.x3).clone(),
        x4: tape.value(t.x4).clone(),
        gate: tape.value(t.gate).clone(),
        features: FeatureMap(tape.into_value(t.features)),
    })
}

/// Deep features of a `(1, 1, h, w)` image.
pub fn encoder_forward(p: &EncoderParams, image: &Tensor) -> Result<FeatureMap> {
    check_image(image)?;
    let mut tape = Tape::new();
    let vars = encoder_vars(p, &mut tape);
    let img = tape.leaf(image.clone());
    let t = encoder_graph(&mut tape, &vars, img)?;
    Ok(FeatureMap(tape.into_value(t.features)))
}

/// Reconstruction `(1, 1, h, w)` from features. Not clamped.
pub fn decoder_forward(p: &DecoderParams, features: &FeatureMap) -> Result<Tensor> {
    let expected = p.c2.in_channels();
    if features.channels() != expected {
        return Err(Error::shape(
            "decoder input",
            format!("{expected} channels"),
            features.tensor().shape(),
        ));
    }
    let mut tape = Tape::new();
    let mut conv = |c: &ConvParams| ConvVars {
        weight: tape.leaf(c.weight.clone()),
        bias: tape.leaf(c.bias.clone()),
    };
    let vars = DecoderVars {
        c2: conv(&p.c2),
        c3: conv(&p.c3),
        c4: conv(&p.c4),
        c5: conv(&p.c5),
    };
    let f = tape.leaf(features.tensor().clone());
    let out = decoder_graph(&mut tape, &vars, f)?;
    Ok(tape.into_value(out))
}

/// `decoder(encoder(image))`.
pub fn reconstruct(params: &NetworkParams, image: &Tensor) -> Result<Tensor> {
    let f = encoder_forward(&params.encoder, image)?;
    decoder_forward(&params.decoder, &f)
}
