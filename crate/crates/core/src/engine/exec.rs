use rayon::prelude::*;

use super::ops;
use super::{EngineError, LossKind, Targets};
use crate::netir::{LayerKind, NetworkIR, Shape3};
use crate::tensor::Tensor;

/// Images per reduction chunk. Gradients are summed within a chunk in image
/// order and across chunks in chunk order, independent of thread count.
const CHUNK: usize = 8;

/// One layer's parameters in working precision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamSet {
    fn zeros_like(&self) -> Self {
        Self {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn add(&mut self, other: &ParamSet) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

/// Zeroes channels not in `keep` on the output of layer `layer`.
#[derive(Debug, Clone)]
pub struct ChannelMask {
    pub layer: usize,
    pub keep: Vec<bool>,
}

/// A network compiled for execution: specs, activation shapes and `f64`
/// parameters.
#[derive(Debug, Clone)]
pub struct Executor {
    kinds: Vec<LayerKind>,
    names: Vec<String>,
    /// `shapes[0]` is the input; `shapes[i + 1]` is layer `i`'s output.
    shapes: Vec<Shape3>,
    pub params: Vec<ParamSet>,
}

struct Acts {
    outs: Vec<Vec<f64>>,
    /// Internal convolution output of MFM layers, kept for the backward pass.
    pre: Vec<Option<Vec<f64>>>,
}

impl Executor {
    pub fn new(net: &NetworkIR) -> Result<Self, EngineError> {
        net.ensure_valid()?;
        let mut shapes = vec![net.input_shape];
        shapes.extend(net.shapes()?);
        let to64 = |t: &Option<Tensor>| {
            t.as_ref()
                .map(|t| t.data().iter().map(|&v| v as f64).collect())
                .unwrap_or_default()
        };
        Ok(Self {
            kinds: net.layers.iter().map(|l| l.kind).collect(),
            names: net.layers.iter().map(|l| l.name.clone()).collect(),
            shapes,
            params: net
                .layers
                .iter()
                .map(|l| ParamSet {
                    weight: to64(&l.weight),
                    bias: to64(&l.bias),
                })
                .collect(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.kinds.len()
    }

    pub fn input_shape(&self) -> Shape3 {
        self.shapes[0]
    }

    pub fn output_shape(&self, layer: usize) -> Shape3 {
        self.shapes[layer + 1]
    }

    pub fn layer_name(&self, layer: usize) -> &str {
        &self.names[layer]
    }

    /// Writes the working parameters back into `net` as `f32`.
    pub fn write_back(&self, net: &mut NetworkIR, only: impl Fn(usize) -> bool) {
        for (i, (layer, p)) in net.layers.iter_mut().zip(&self.params).enumerate() {
            if !only(i) {
                continue;
            }
            if let Some(w) = layer.weight.as_mut() {
                for (d, s) in w.data_mut().iter_mut().zip(&p.weight) {
                    *d = *s as f32;
                }
            }
            if let Some(b) = layer.bias.as_mut() {
                for (d, s) in b.data_mut().iter_mut().zip(&p.bias) {
                    *d = *s as f32;
                }
            }
        }
    }

    pub fn check_images(&self, images: &Tensor) -> Result<usize, EngineError> {
        let s = self.input_shape();
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [s.c, s.h, s.w] {
            return Err(EngineError::InputShape {
                expected: s,
                got: shape.to_vec(),
            });
        }
        if shape[0] == 0 {
            return Err(EngineError::EmptyBatch);
        }
        Ok(shape[0])
    }

    fn run_image(&self, x: &[f64], upto: usize, masks: &[ChannelMask], keep_pre: bool) -> Acts {
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(upto + 1);
        let mut pre = Vec::with_capacity(upto);
        outs.push(x.to_vec());
        for i in 0..upto {
            let (input, output) = (self.shapes[i], self.shapes[i + 1]);
            let x = &outs[i];
            let p = &self.params[i];
            let mut y = vec![0.0; output.len()];
            let mut pre_i = None;
            match &self.kinds[i] {
                LayerKind::Conv2d(c) => ops::conv_forward(c, input, output, &p.weight, &p.bias, x, &mut y),
                LayerKind::Mfm(c) => {
                    let conv_out = Shape3::new(c.out_channels, output.h, output.w);
                    let mut z = vec![0.0; conv_out.len()];
                    ops::conv_forward(c, input, conv_out, &p.weight, &p.bias, x, &mut z);
                    ops::mfm_forward(&z, output.c, output.plane(), &mut y);
                    if keep_pre {
                        pre_i = Some(z);
                    }
                }
                LayerKind::Relu => {
                    for (d, s) in y.iter_mut().zip(x) {
                        *d = s.max(0.0);
                    }
                }
                LayerKind::MaxPool2d(ps) => ops::maxpool_forward(ps, input, output, x, &mut y),
                LayerKind::Gap => ops::gap_forward(input, x, &mut y),
                LayerKind::Linear(l) => {
                    ops::linear_forward(l.in_features, l.out_features, &p.weight, &p.bias, x, &mut y)
                }
            }
            for m in masks.iter().filter(|m| m.layer == i) {
                let plane = output.plane();
                for (c, keep) in m.keep.iter().enumerate() {
                    if !keep {
                        y[c * plane..(c + 1) * plane].fill(0.0);
                    }
                }
            }
            outs.push(y);
            pre.push(pre_i);
        }
        Acts { outs, pre }
    }

    /// Runs layers `0..upto` on every image, returning per-image activations
    /// of the requested layers (`capture`) plus the final one.
    pub fn run(
        &self,
        images: &Tensor,
        upto: usize,
        capture: &[usize],
        masks: &[ChannelMask],
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>), EngineError> {
        let n = self.check_images(images)?;
        for m in masks {
            if m.layer >= self.num_layers() || m.keep.len() != self.shapes[m.layer + 1].c {
                return Err(EngineError::BadMask(m.layer));
            }
        }
        let stride = self.input_shape().len();
        let per_image: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = images.data()[i * stride..(i + 1) * stride]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                let mut acts = self.run_image(&x, upto, masks, false);
                let caps = capture.iter().map(|&l| acts.outs[l + 1].clone()).collect();
                (acts.outs.pop().unwrap_or_default(), caps)
            })
            .collect();
        Ok(per_image.into_iter().unzip())
    }

    /// Mean loss over the batch and its gradient for every parameter.
    pub fn loss_and_grad(
        &self,
        images: &Tensor,
        targets: &Targets,
        loss: LossKind,
    ) -> Result<(f64, Vec<ParamSet>), EngineError> {
        let n = self.check_images(images)?;
        let out_len = self.shapes.last().map(|s| s.len()).unwrap_or(0);
        targets.check(n, out_len, loss)?;
        let stride = self.input_shape().len();
        let inv_n = 1.0 / n as f64;

        let chunks: Vec<(f64, Vec<ParamSet>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|chunk| {
                let mut grads: Vec<ParamSet> = self.params.iter().map(ParamSet::zeros_like).collect();
                let mut total = 0.0;
                for i in chunk * CHUNK..((chunk + 1) * CHUNK).min(n) {
                    let x: Vec<f64> = images.data()[i * stride..(i + 1) * stride]
                        .iter()
                        .map(|&v| v as f64)
                        .collect();
                    let acts = self.run_image(&x, self.num_layers(), &[], true);
                    let out = acts.outs.last().expect("at least the input");
                    let (l, dout) = targets.loss_row(i, out, loss);
                    total += l;
                    let dout: Vec<f64> = dout.into_iter().map(|g| g * inv_n).collect();
                    self.backprop_image(&acts, dout, &mut grads);
                }
                (total, grads)
            })
            .collect();

        let mut iter = chunks.into_iter();
        let (mut total, mut grads) = iter.next().expect("n >= 1");
        for (t, g) in iter {
            total += t;
            for (a, b) in grads.iter_mut().zip(&g) {
                a.add(b);
            }
        }
        Ok((total * inv_n, grads))
    }

    fn backprop_image(&self, acts: &Acts, dout: Vec<f64>, grads: &mut [ParamSet]) {
        let mut dy = dout;
        for i in (0..self.num_layers()).rev() {
            let (input, output) = (self.shapes[i], self.shapes[i + 1]);
            let x = &acts.outs[i];
            let p = &self.params[i];
            let need_dx = i > 0;
            let mut dx = vec![0.0; if need_dx { input.len() } else { 0 }];
            let g = &mut grads[i];
            match &self.kinds[i] {
                LayerKind::Conv2d(c) => ops::conv_backward(
                    c,
                    input,
                    output,
                    &p.weight,
                    x,
                    &dy,
                    &mut g.weight,
                    &mut g.bias,
                    need_dx.then_some(dx.as_mut_slice()),
                ),
                LayerKind::Mfm(c) => {
                    let conv_out = Shape3::new(c.out_channels, output.h, output.w);
                    let z = acts.pre[i].as_ref().expect("pre-activation kept");
                    let mut dz = vec![0.0; conv_out.len()];
                    ops::mfm_backward(z, output.c, output.plane(), &dy, &mut dz);
                    ops::conv_backward(
                        c,
                        input,
                        conv_out,
                        &p.weight,
                        x,
                        &dz,
                        &mut g.weight,
                        &mut g.bias,
                        need_dx.then_some(dx.as_mut_slice()),
                    );
                }
                LayerKind::Relu => {
                    if need_dx {
                        for ((d, g), xv) in dx.iter_mut().zip(&dy).zip(x) {
                            *d = if *xv > 0.0 { *g } else { 0.0 };
                        }
                    }
                }
                LayerKind::MaxPool2d(ps) => {
                    if need_dx {
                        ops::maxpool_backward(ps, input, output, x, &dy, &mut dx)
                    }
                }
                LayerKind::Gap => {
                    if need_dx {
                        ops::gap_backward(input, &dy, &mut dx)
                    }
                }
                LayerKind::Linear(l) => ops::linear_backward(
                    l.in_features,
                    l.out_features,
                    &p.weight,
                    x,
                    &dy,
                    &mut g.weight,
                    &mut g.bias,
                    need_dx.then_some(dx.as_mut_slice()),
                ),
            }
            if !need_dx {
                break;
            }
            dy = dx;
        }
    }

    /// Mean loss without gradients.
    pub fn loss(&self, images: &Tensor, targets: &Targets, loss: LossKind) -> Result<f64, EngineError> {
        let n = self.check_images(images)?;
        let (outs, _) = self.run(images, self.num_layers(), &[], &[])?;
        targets.check(n, outs[0].len(), loss)?;
        let total: f64 = outs
            .iter()
            .enumerate()
            .map(|(i, o)| targets.loss_row(i, o, loss).0)
            .sum();
        Ok(total / n as f64)
    }
}
