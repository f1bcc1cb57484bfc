//! Malformed model files, each paired with the error class it must raise.

use prunekit::archive::FormatError;
use prunekit::netir::{NetError, NetworkBuilder, NetworkIR, Shape3};

pub fn error_class(e: &NetError) -> &'static str {
    match e {
        NetError::Format(f) => match f {
            FormatError::Io(_) => "io",
            FormatError::BadMagic => "magic",
            FormatError::UnsupportedVersion(_) => "version",
            FormatError::MalformedHeader { .. } => "header",
            FormatError::ShapeMismatch { .. } => "shape",
            FormatError::BlobLength { .. } => "blob",
            FormatError::WrongKind { .. } => "kind",
            FormatError::Missing(_) => "missing",
        },
        NetError::Invalid(_) => "invalid",
        NetError::UnknownLayer(_) | NetError::BadLayer { .. } => "layer",
    }
}

fn good_net() -> NetworkIR {
    NetworkBuilder::new("net", Shape3::new(1, 8, 8))
        .bias_std(0.1)
        .conv(3, 3)
        .relu()
        .maxpool(2, 2)
        .conv(4, 3)
        .relu()
        .gap()
        .linear(2)
        .build(9)
        .unwrap()
}

fn split(bytes: &[u8]) -> (String, Vec<u8>) {
    let end = bytes.windows(5).position(|w| w == b"\nend\n").unwrap() + 5;
    (String::from_utf8(bytes[..end].to_vec()).unwrap(), bytes[end..].to_vec())
}

fn join(header: &str, blob: &[u8]) -> Vec<u8> {
    let mut out = header.as_bytes().to_vec();
    out.extend_from_slice(blob);
    out
}

/// `(label, bytes, expected class)` for every corruption.
pub fn malformed_corpus() -> Vec<(&'static str, Vec<u8>, &'static str)> {
    let good = good_net().to_bytes();
    let (h, blob) = split(&good);
    let line = |prefix: &str| h.lines().find(|l| l.starts_with(prefix)).unwrap().to_string();
    let weight = line("tensor conv1.weight");
    let layer = line("layer conv1 ");
    let w: Vec<&str> = weight.split(' ').collect();
    let edit = |from: &str, to: &str| join(&h.replacen(from, to, 1), &blob);

    let mut nan_blob = blob.clone();
    nan_blob[..4].copy_from_slice(&f32::NAN.to_le_bytes());
    let mut longer = good.clone();
    longer.push(0);

    // a consistent file whose second conv no longer matches its input
    let mut wide = good_net();
    let conv2 = wide.layer_index("conv2").unwrap();
    if let prunekit::netir::LayerKind::Conv2d(c) = &mut wide.layers[conv2].kind {
        c.in_channels += 1;
    }
    let ws = wide.layers[conv2].kind.weight_shape().unwrap();
    wide.layers[conv2].weight = Some(prunekit::Tensor::zeros(ws));

    vec![
        ("empty file", Vec::new(), "magic"),
        ("foreign magic", b"GIF89a\n".to_vec(), "magic"),
        ("future version", edit("PKIR1", "PKIR7"), "version"),
        ("truncated blob", good[..good.len() - 3].to_vec(), "blob"),
        ("trailing byte", longer, "blob"),
        ("no end line", h.replacen("end\n", "", 1).into_bytes(), "header"),
        ("unknown keyword", edit("kind model\n", "kind model\nbogus 1\n"), "header"),
        ("missing kind", edit("kind model\n", ""), "header"),
        ("wrong kind", edit("kind model", "kind features"), "kind"),
        ("dims disagree with count", edit(&weight, &format!("tensor {} 1 {} {}", w[1], w[3], w[4])), "shape"),
        ("gap in offsets", edit(&weight, &format!("tensor {} {} 7 {}", w[1], w[2], w[4])), "header"),
        ("unparsable dims", edit(&weight, &format!("tensor {} 3,x {} {}", w[1], w[3], w[4])), "header"),
        ("renamed tensor", edit(&weight, &weight.replacen(".weight", ".kernel", 1)), "missing"),
        ("layer spec wider than weights", edit(&layer, &layer.replacen(" out=", " out=9", 1)), "shape"),
        ("unknown layer kind", edit(&layer, &layer.replacen("conv2d", "deconv", 1)), "header"),
        ("missing layer field", edit(&layer, &layer.replacen(" bias=1", "", 1)), "header"),
        ("bad flag value", edit(&layer, &layer.replacen(" bias=1", " bias=2", 1)), "header"),
        ("bad input shape", edit("meta input 1x8x8", "meta input 1x8"), "header"),
        ("missing name", edit("meta name net\n", ""), "missing"),
        ("non-finite weight", join(&h, &nan_blob), "invalid"),
        ("layers do not chain", wide.to_bytes(), "invalid"),
    ]
}
