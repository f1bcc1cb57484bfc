use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ConvSpec, Layer, LayerKind, LinearSpec, NetError, NetworkIR, PoolSpec, Shape3};
use crate::tensor::Tensor;

/// Fluent construction of a network with channel counts inferred from the
/// previous layer. Layer names are generated per kind (`conv1`, `relu1`, ...).
#[derive(Debug)]
pub struct NetworkBuilder {
    name: String,
    input: Shape3,
    layers: Vec<Layer>,
    current: Result<Shape3, NetError>,
    counters: BTreeMap<&'static str, usize>,
    bias_std: f64,
}

impl NetworkBuilder {
    pub fn new(name: impl Into<String>, input: Shape3) -> Self {
        Self {
            name: name.into(),
            input,
            layers: Vec::new(),
            current: Ok(input),
            counters: BTreeMap::new(),
            bias_std: 0.0,
        }
    }

    /// Standard deviation of the random bias initialization (default 0).
    pub fn bias_std(mut self, std: f64) -> Self {
        self.bias_std = std;
        self
    }

    fn next_name(&mut self, prefix: &'static str) -> String {
        let n = self.counters.entry(prefix).or_insert(0);
        *n += 1;
        format!("{prefix}{n}")
    }

    fn channels(&self) -> usize {
        self.current.as_ref().map(|s| s.c).unwrap_or(0)
    }

    fn push(mut self, prefix: &'static str, kind: LayerKind, group: Option<u32>) -> Self {
        let name = self.next_name(prefix);
        if let Ok(shape) = self.current {
            self.current = kind
                .output_shape(shape)
                .map_err(|reason| NetError::BadLayer {
                    layer: name.clone(),
                    reason,
                });
        }
        let mut layer = Layer::new(name, kind);
        layer.group = group;
        self.layers.push(layer);
        self
    }

    /// `k x k` convolution with stride 1 and same padding.
    pub fn conv(self, out_channels: usize, kernel: usize) -> Self {
        self.conv_with(out_channels, kernel, 1, kernel / 2)
    }

    pub fn conv_with(self, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let spec = ConvSpec {
            in_channels: self.channels(),
            out_channels,
            kernel,
            stride,
            padding,
            bias: true,
        };
        self.push("conv", LayerKind::Conv2d(spec), None)
    }

    pub fn relu(self) -> Self {
        self.push("relu", LayerKind::Relu, None)
    }

    pub fn maxpool(self, window: usize, stride: usize) -> Self {
        self.maxpool_with(window, stride, 0)
    }

    pub fn maxpool_with(self, window: usize, stride: usize, padding: usize) -> Self {
        let spec = PoolSpec {
            window,
            stride,
            padding,
        };
        self.push("pool", LayerKind::MaxPool2d(spec), None)
    }

    /// MFM block emitting `out_channels` (internal conv emits twice as many).
    pub fn mfm(self, out_channels: usize, kernel: usize) -> Self {
        self.mfm_grouped(out_channels, kernel, None)
    }

    fn mfm_grouped(self, out_channels: usize, kernel: usize, group: Option<u32>) -> Self {
        let spec = ConvSpec {
            in_channels: self.channels(),
            out_channels: 2 * out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: true,
        };
        self.push("mfm", LayerKind::Mfm(spec), group)
    }

    /// Group layer: a square 1x1 MFM followed by a `kernel x kernel` MFM.
    pub fn group(self, id: u32, out_channels: usize, kernel: usize) -> Self {
        let c = self.channels();
        self.mfm_grouped(c, 1, Some(id))
            .mfm_grouped(out_channels, kernel, Some(id))
    }

    pub fn gap(self) -> Self {
        self.push("gap", LayerKind::Gap, None)
    }

    pub fn linear(self, out_features: usize) -> Self {
        let in_features = self.current.as_ref().map(|s| s.len()).unwrap_or(0);
        let spec = LinearSpec {
            in_features,
            out_features,
            bias: true,
        };
        self.push("fc", LayerKind::Linear(spec), None)
    }

    /// Materializes parameters with He-normal weights drawn from `seed`.
    pub fn build(self, seed: u64) -> Result<NetworkIR, NetError> {
        self.current?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias_dist = Normal::new(0.0, self.bias_std.max(0.0)).expect("finite std");
        let mut layers = self.layers;
        for layer in &mut layers {
            init_params(layer, &mut rng, &bias_dist);
        }
        let net = NetworkIR {
            name: self.name,
            primary_task: None,
            input_shape: self.input,
            layers,
            metadata: BTreeMap::new(),
        };
        net.ensure_valid()?;
        Ok(net)
    }
}

pub(crate) fn init_params(layer: &mut Layer, rng: &mut ChaCha8Rng, bias_dist: &Normal<f64>) {
    if let Some(shape) = layer.kind.weight_shape() {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        layer.weight = Some(Tensor::from_fn(shape, |_| dist.sample(rng) as f32));
    }
    if let Some(n) = layer.kind.bias_len() {
        layer.bias = Some(Tensor::from_fn(vec![n], |_| bias_dist.sample(rng) as f32));
    }
}
