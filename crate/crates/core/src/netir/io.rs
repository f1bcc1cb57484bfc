use std::path::Path;

use super::{ConvSpec, Layer, LayerKind, LinearSpec, NetError, NetworkIR, PoolSpec, Shape3};
use crate::archive::{Archive, FormatError};

pub const MODEL_KIND: &str = "model";

pub fn save_model(net: &NetworkIR, path: &Path) -> Result<(), NetError> {
    net.ensure_valid()?;
    to_archive(net).save(path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NetworkIR, NetError> {
    from_archive(Archive::load(path)?)
}

impl NetworkIR {
    pub fn to_bytes(&self) -> Vec<u8> {
        to_archive(self).to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        from_archive(Archive::from_bytes(bytes)?)
    }
}

fn conv_fields(c: &ConvSpec) -> String {
    format!(
        "in={} out={} k={} s={} p={} bias={}",
        c.in_channels, c.out_channels, c.kernel, c.stride, c.padding, c.bias as u8
    )
}

fn layer_line(l: &Layer) -> String {
    let body = match &l.kind {
        LayerKind::Conv2d(c) => format!("conv2d {}", conv_fields(c)),
        LayerKind::Mfm(c) => format!("mfm {}", conv_fields(c)),
        LayerKind::Relu => "relu".to_string(),
        LayerKind::MaxPool2d(p) => format!("maxpool2d w={} s={} p={}", p.window, p.stride, p.padding),
        LayerKind::Gap => "gap".to_string(),
        LayerKind::Linear(s) => format!("linear in={} out={} bias={}", s.in_features, s.out_features, s.bias as u8),
    };
    match l.group {
        Some(g) => format!("{} {body} group={g}", l.name),
        None => format!("{} {body}", l.name),
    }
}

fn to_archive(net: &NetworkIR) -> Archive {
    let mut a = Archive::new(MODEL_KIND);
    a.meta.push(("name".into(), net.name.clone()));
    if let Some(t) = &net.primary_task {
        a.meta.push(("primary_task".into(), t.clone()));
    }
    a.meta.push(("input".into(), net.input_shape.to_string()));
    for (k, v) in &net.metadata {
        a.meta.push((format!("x.{k}"), v.clone()));
    }
    for l in &net.layers {
        a.layers.push(layer_line(l));
        if let Some(w) = &l.weight {
            a.tensors.push((format!("{}.weight", l.name), w.clone()));
        }
        if let Some(b) = &l.bias {
            a.tensors.push((format!("{}.bias", l.name), b.clone()));
        }
    }
    a
}

fn header_err(reason: String) -> NetError {
    NetError::Format(FormatError::MalformedHeader { line: 0, reason })
}

fn parse_shape(s: &str) -> Result<Shape3, NetError> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| header_err(format!("bad input shape `{s}`")))?;
    match dims[..] {
        [c, h, w] => Ok(Shape3::new(c, h, w)),
        _ => Err(header_err(format!("bad input shape `{s}`"))),
    }
}

struct Fields<'a> {
    layer: &'a str,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn get(&self, key: &str) -> Result<usize, NetError> {
        let v = self
            .pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| header_err(format!("layer `{}` lacks `{key}`", self.layer)))?;
        v.parse()
            .map_err(|_| header_err(format!("layer `{}`: bad `{key}={v}`", self.layer)))
    }

    fn flag(&self, key: &str) -> Result<bool, NetError> {
        match self.get(key)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(header_err(format!("layer `{}`: `{key}` must be 0 or 1, got {v}", self.layer))),
        }
    }

    fn conv(&self) -> Result<ConvSpec, NetError> {
        Ok(ConvSpec {
            in_channels: self.get("in")?,
            out_channels: self.get("out")?,
            kernel: self.get("k")?,
            stride: self.get("s")?,
            padding: self.get("p")?,
            bias: self.flag("bias")?,
        })
    }
}

fn parse_layer(line: &str) -> Result<Layer, NetError> {
    let mut tokens = line.split(' ');
    let name = tokens.next().filter(|n| !n.is_empty()).ok_or_else(|| header_err("empty layer line".into()))?;
    let tag = tokens.next().ok_or_else(|| header_err(format!("layer `{name}` lacks a kind")))?;
    let mut pairs = Vec::new();
    for t in tokens {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| header_err(format!("layer `{name}`: bad field `{t}`")))?;
        pairs.push((k, v));
    }
    let f = Fields { layer: name, pairs };
    let kind = match tag {
        "conv2d" => LayerKind::Conv2d(f.conv()?),
        "mfm" => LayerKind::Mfm(f.conv()?),
        "relu" => LayerKind::Relu,
        "maxpool2d" => LayerKind::MaxPool2d(PoolSpec {
            window: f.get("w")?,
            stride: f.get("s")?,
            padding: f.get("p")?,
        }),
        "gap" => LayerKind::Gap,
        "linear" => LayerKind::Linear(LinearSpec {
            in_features: f.get("in")?,
            out_features: f.get("out")?,
            bias: f.flag("bias")?,
        }),
        other => return Err(header_err(format!("layer `{name}`: unknown kind `{other}`"))),
    };
    let mut layer = Layer::new(name, kind);
    if f.pairs.iter().any(|(k, _)| *k == "group") {
        layer.group = Some(f.get("group")? as u32);
    }
    Ok(layer)
}

fn from_archive(mut a: Archive) -> Result<NetworkIR, NetError> {
    a.expect_kind(MODEL_KIND)?;
    let name = a.require_meta("name")?.to_string();
    let primary_task = a.meta("primary_task").map(str::to_string);
    let input_shape = parse_shape(a.require_meta("input")?)?;
    let metadata = a
        .meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("x.").map(|k| (k.to_string(), v.clone())))
        .collect();

    let mut layers = Vec::with_capacity(a.layers.len());
    for line in std::mem::take(&mut a.layers) {
        let mut layer = parse_layer(&line)?;
        if let Some(shape) = layer.kind.weight_shape() {
            let key = format!("{}.weight", layer.name);
            let w = a.take_tensor(&key)?;
            if w.shape() != shape.as_slice() {
                return Err(FormatError::ShapeMismatch {
                    name: key,
                    reason: format!("stored {:?}, layer spec implies {:?}", w.shape(), shape),
                }
                .into());
            }
            layer.weight = Some(w);
        }
        if let Some(n) = layer.kind.bias_len() {
            let key = format!("{}.bias", layer.name);
            let b = a.take_tensor(&key)?;
            if b.shape() != [n] {
                return Err(FormatError::ShapeMismatch {
                    name: key,
                    reason: format!("stored {:?}, layer spec implies [{n}]", b.shape()),
                }
                .into());
            }
            layer.bias = Some(b);
        }
        layers.push(layer);
    }
    if let Some((name, _)) = a.tensors.first() {
        return Err(FormatError::ShapeMismatch {
            name: name.clone(),
            reason: "tensor does not belong to any layer".into(),
        }
        .into());
    }

    let net = NetworkIR {
        name,
        primary_task,
        input_shape,
        layers,
        metadata,
    };
    net.ensure_valid()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netir::NetworkBuilder;

    fn net() -> NetworkIR {
        let mut n = NetworkBuilder::new("toy", Shape3::new(1, 8, 8))
            .conv(4, 3)
            .relu()
            .group(1, 2, 3)
            .gap()
            .linear(3)
            .bias_std(0.1)
            .build(3)
            .unwrap();
        n.primary_task = Some("identity".into());
        n.metadata.insert("kept.conv1".into(), "0,1,2,3".into());
        n
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let n = net();
        let back = NetworkIR::from_bytes(&n.to_bytes()).unwrap();
        assert!(n.bit_eq(&back));
        assert_eq!(back.to_bytes(), n.to_bytes());
    }

    #[test]
    fn truncated_blob_is_a_length_error() {
        let bytes = net().to_bytes();
        let err = NetworkIR::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, NetError::Format(FormatError::BlobLength { .. })), "{err}");
    }

    #[test]
    fn weight_size_disagreeing_with_layer_is_shape_mismatch() {
        let bytes = net().to_bytes();
        let split = bytes.windows(5).position(|w| w == b"\nend\n").unwrap() + 5;
        let header = String::from_utf8(bytes[..split].to_vec()).unwrap();
        // Claim 5 filters while the stored tensor has 4.
        let mut edited = header
            .replacen("conv1 conv2d in=1 out=4", "conv1 conv2d in=1 out=5", 1)
            .into_bytes();
        edited.extend_from_slice(&bytes[split..]);
        let err = NetworkIR::from_bytes(&edited);
        assert!(
            matches!(err, Err(NetError::Format(FormatError::ShapeMismatch { .. }))),
            "{err:?}"
        );
    }
}
