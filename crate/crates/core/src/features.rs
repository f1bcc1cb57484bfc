//! Per-filter statistics of activation maps: GAP features, L2 norms and
//! their correlation with attributes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{Archive, FormatError};
use crate::engine::{EngineError, Executor};
use crate::netir::{NetError, NetworkIR};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("features csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("layer `{0}` is not a convolution or MFM layer")]
    NotFilterLayer(String),
    #[error("{0}")]
    Degenerate(String),
    #[error("{0}")]
    Shape(String),
}

/// `n x p` matrix of per-filter responses of one layer, row `i` belonging to
/// image `i` of the source batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub layer: String,
    pub filter_ids: Vec<usize>,
    /// Row-major `n x p`.
    pub x: Vec<f32>,
    /// Optional named per-row targets.
    pub targets: Vec<(String, Vec<f32>)>,
}

impl FeatureMatrix {
    pub fn new(layer: impl Into<String>, filter_ids: Vec<usize>, x: Vec<f32>) -> Result<Self, FeatureError> {
        let p = filter_ids.len();
        if p == 0 || !x.len().is_multiple_of(p) {
            return Err(FeatureError::Shape(format!("{} values for {p} filters", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::Degenerate("non-finite feature value".into()));
        }
        Ok(Self {
            layer: layer.into(),
            filter_ids,
            x,
            targets: Vec::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.x.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        self.filter_ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.x[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let p = self.cols();
        &self.x[i * p..(i + 1) * p]
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.rows()).map(|i| self.get(i, j)).collect()
    }

    pub fn with_target(mut self, name: impl Into<String>, values: Vec<f32>) -> Result<Self, FeatureError> {
        if values.len() != self.rows() {
            return Err(FeatureError::Shape(format!(
                "target has {} rows, features have {}",
                values.len(),
                self.rows()
            )));
        }
        self.targets.push((name.into(), values));
        Ok(self)
    }

    pub fn target(&self, name: &str) -> Option<&[f32]> {
        self.targets.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn subset_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            layer: self.layer.clone(),
            filter_ids: self.filter_ids.clone(),
            x: rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect(),
            targets: self
                .targets
                .iter()
                .map(|(n, v)| (n.clone(), rows.iter().map(|&r| v[r]).collect()))
                .collect(),
        }
    }

    /// Keeps the columns at positions `cols`, in that order.
    pub fn select_columns(&self, cols: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            layer: self.layer.clone(),
            filter_ids: cols.iter().map(|&j| self.filter_ids[j]).collect(),
            x: (0..self.rows())
                .flat_map(|i| cols.iter().map(move |&j| self.get(i, j)))
                .collect(),
            targets: self.targets.clone(),
        }
    }

    /// CSV with one column per filter (header = filter id) and one per
    /// target (`y:<name>`). The first column holds the row index under the
    /// header `layer:<name>`.
    pub fn write_csv(&self, path: &Path) -> Result<(), FeatureError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![format!("layer:{}", self.layer)];
        header.extend(self.filter_ids.iter().map(usize::to_string));
        header.extend(self.targets.iter().map(|(n, _)| format!("y:{n}")));
        w.write_record(&header)?;
        for i in 0..self.rows() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.row(i).iter().map(f32::to_string));
            rec.extend(self.targets.iter().map(|(_, v)| v[i].to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<FeatureMatrix, FeatureError> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let bad = |m: String| FeatureError::Shape(format!("{}: {m}", path.display()));
        let layer = header
            .first()
            .and_then(|h| h.strip_prefix("layer:"))
            .ok_or_else(|| bad("first column must be `layer:<name>`".into()))?
            .to_string();
        let mut ids = Vec::new();
        let mut target_names = Vec::new();
        for h in &header[1..] {
            match h.strip_prefix("y:") {
                Some(t) => target_names.push(t.to_string()),
                None if target_names.is_empty() => {
                    ids.push(h.parse().map_err(|_| bad(format!("bad filter id `{h}`")))?)
                }
                None => return Err(bad("filter columns must precede targets".into())),
            }
        }
        let p = ids.len();
        let mut x = Vec::new();
        let mut targets: Vec<Vec<f32>> = vec![Vec::new(); target_names.len()];
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec[0] != *i.to_string() {
                return Err(bad(format!("row {i} is labelled `{}`", &rec[0])));
            }
            let num = |s: &str| s.parse::<f32>().map_err(|_| bad(format!("bad number `{s}`")));
            for j in 0..p {
                x.push(num(&rec[1 + j])?);
            }
            for (t, col) in targets.iter_mut().enumerate() {
                col.push(num(&rec[1 + p + t])?);
            }
        }
        let mut m = FeatureMatrix::new(layer, ids, x)?;
        for (n, v) in target_names.into_iter().zip(targets) {
            m = m.with_target(n, v)?;
        }
        Ok(m)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new("features");
        a.meta.push(("layer".into(), self.layer.clone()));
        let ids: Vec<String> = self.filter_ids.iter().map(usize::to_string).collect();
        a.meta.push(("filters".into(), ids.join(",")));
        let x = Tensor::new(vec![self.rows(), self.cols()], self.x.clone()).expect("n x p");
        a.tensors.push(("x".into(), x));
        for (n, v) in &self.targets {
            a.tensors.push((format!("y:{n}"), Tensor::new(vec![v.len()], v.clone()).expect("1-d")));
        }
        a
    }

    pub fn from_archive(mut a: Archive) -> Result<FeatureMatrix, FeatureError> {
        a.expect_kind("features")?;
        let layer = a.require_meta("layer")?.to_string();
        let ids = a
            .require_meta("filters")?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| FeatureError::Shape("bad filter id list".into()))?;
        let x = a.take_tensor("x")?;
        if x.shape() != [x.shape()[0], ids.len()] {
            return Err(FeatureError::Shape(format!("x has shape {:?} for {} filters", x.shape(), ids.len())));
        }
        let mut m = FeatureMatrix::new(layer, ids, x.into_data())?;
        for (name, t) in std::mem::take(&mut a.tensors) {
            let target = name
                .strip_prefix("y:")
                .ok_or_else(|| FeatureError::Shape(format!("unexpected tensor `{name}`")))?;
            m = m.with_target(target, t.into_data())?;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load(path: &Path) -> Result<FeatureMatrix, FeatureError> {
        Self::from_archive(Archive::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// Spatial mean of each channel.
    Gap,
    /// Spatial L2 norm of each channel.
    L2Norm,
}

fn reduce(stat: Statistic, map: &[f64]) -> f64 {
    match stat {
        Statistic::Gap => map.iter().sum::<f64>() / map.len() as f64,
        Statistic::L2Norm => map.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// Computes `stat` for every named filter layer in one pass. A layer's
/// activation map is its output after the ReLU that directly follows it,
/// if any.
pub fn extract_many(
    net: &NetworkIR,
    images: &Tensor,
    layers: &[&str],
    stat: Statistic,
) -> Result<Vec<FeatureMatrix>, FeatureError> {
    let mut capture = Vec::with_capacity(layers.len());
    for name in layers {
        let idx = net.layer_index(name)?;
        if !net.layers[idx].kind.is_filter_layer() {
            return Err(FeatureError::NotFilterLayer(name.to_string()));
        }
        capture.push(net.response_index(idx));
    }
    let exec = Executor::new(net)?;
    let upto = capture.iter().max().map_or(0, |m| m + 1);
    let (_, caps) = exec.run(images, upto, &capture, &[])?;
    let mut out = Vec::with_capacity(layers.len());
    for (k, (name, &idx)) in layers.iter().zip(&capture).enumerate() {
        let shape = exec.output_shape(idx);
        let plane = shape.plane();
        let x: Vec<f32> = caps
            .iter()
            .flat_map(|img| img[k].chunks(plane).map(|m| reduce(stat, m) as f32))
            .collect();
        out.push(FeatureMatrix::new(*name, (0..shape.c).collect(), x)?);
    }
    Ok(out)
}

/// Global-average-pooled responses of `layer`.
pub fn extract_gap(net: &NetworkIR, images: &Tensor, layer: &str) -> Result<FeatureMatrix, FeatureError> {
    Ok(extract_many(net, images, &[layer], Statistic::Gap)?.remove(0))
}

/// Per-filter L2 norms of the activation maps of `layer`.
pub fn filter_norms(net: &NetworkIR, images: &Tensor, layer: &str) -> Result<FeatureMatrix, FeatureError> {
    Ok(extract_many(net, images, &[layer], Statistic::L2Norm)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub coefficients: Vec<f64>,
    /// Filters whose response never varies; their coefficient is reported
    /// as 0.
    pub constant: Vec<bool>,
}

/// Pearson correlation of every feature column with `attribute`.
pub fn correlate_attribute(features: &FeatureMatrix, attribute: &[f64]) -> Result<Correlation, FeatureError> {
    let n = features.rows();
    if attribute.len() != n {
        return Err(FeatureError::Shape(format!("{} attribute values for {n} rows", attribute.len())));
    }
    if n < 3 {
        return Err(FeatureError::Degenerate(format!("need at least 3 rows, got {n}")));
    }
    let mean_a = attribute.iter().sum::<f64>() / n as f64;
    let da: Vec<f64> = attribute.iter().map(|a| a - mean_a).collect();
    let ss_a: f64 = da.iter().map(|d| d * d).sum();
    if !(ss_a > 0.0) {
        return Err(FeatureError::Degenerate("attribute has zero variance".into()));
    }
    let mut coefficients = Vec::with_capacity(features.cols());
    let mut constant = Vec::with_capacity(features.cols());
    for j in 0..features.cols() {
        let col: Vec<f64> = (0..n).map(|i| features.get(i, j) as f64).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (x, d) in col.iter().zip(&da) {
            sxy += (x - mean) * d;
            sxx += (x - mean) * (x - mean);
        }
        if sxx > 0.0 {
            coefficients.push((sxy / (sxx * ss_a).sqrt()).clamp(-1.0, 1.0));
            constant.push(false);
        } else {
            coefficients.push(0.0);
            constant.push(true);
        }
    }
    Ok(Correlation {
        coefficients,
        constant,
    })
}

/// Column centring and scaling fitted on a subset of rows. Constant columns
/// keep scale 1 and therefore map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &FeatureMatrix, rows: &[usize]) -> Standardizer {
        let p = features.cols();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; p];
        for &i in rows {
            for (m, v) in mean.iter_mut().zip(features.row(i)) {
                *m += *v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; p];
        for &i in rows {
            for ((s, v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
                *s += (*v as f64 - m).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    /// Standardized copy of the given rows, row-major.
    pub fn apply(&self, features: &FeatureMatrix, rows: &[usize]) -> Vec<f64> {
        rows.iter()
            .flat_map(|&i| {
                features
                    .row(i)
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, m), s)| (*v as f64 - m) / s)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netir::{NetworkBuilder, Shape3};

    #[test]
    fn constant_map_gives_its_value() {
        let mut net = NetworkBuilder::new("t", Shape3::new(1, 4, 4)).conv(2, 3).build(0).unwrap();
        let l = &mut net.layers[0];
        l.weight.as_mut().unwrap().data_mut().fill(0.0);
        l.bias = Some(Tensor::new(vec![2], vec![0.25, -1.5]).unwrap());
        let images = Tensor::zeros(vec![3, 1, 4, 4]);
        let f = extract_gap(&net, &images, "conv1").unwrap();
        assert_eq!(f.rows(), 3);
        assert_eq!(f.row(2), &[0.25, -1.5]);
    }

    #[test]
    fn three_four_five() {
        let mut net = NetworkBuilder::new("t", Shape3::new(1, 1, 2))
            .conv_with(1, 1, 1, 0)
            .build(0)
            .unwrap();
        net.layers[0].weight = Some(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        net.layers[0].bias = Some(Tensor::zeros(vec![1]));
        let images = Tensor::new(vec![1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(filter_norms(&net, &images, "conv1").unwrap().x, vec![5.0]);
    }

    #[test]
    fn relu_output_is_read_when_present() {
        let net = NetworkBuilder::new("t", Shape3::new(1, 5, 5)).conv(4, 3).relu().build(2).unwrap();
        let images = Tensor::from_fn(vec![2, 1, 5, 5], |i| (i as f32 * 0.37).sin());
        let f = extract_gap(&net, &images, "conv1").unwrap();
        assert!(f.x.iter().all(|v| *v >= 0.0));
        assert!(matches!(
            extract_gap(&net, &images, "relu1"),
            Err(FeatureError::NotFilterLayer(_))
        ));
    }

    #[test]
    fn correlation_signs_and_constant_columns() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let x: Vec<f32> = a.iter().flat_map(|&v| [v as f32, -(v as f32), 3.0]).collect();
        let f = FeatureMatrix::new("l", vec![0, 1, 2], x).unwrap();
        let c = correlate_attribute(&f, &a).unwrap();
        assert!((c.coefficients[0] - 1.0).abs() < 1e-12);
        assert!((c.coefficients[1] + 1.0).abs() < 1e-12);
        assert_eq!(c.coefficients[2], 0.0);
        assert_eq!(c.constant, vec![false, false, true]);
        assert!(correlate_attribute(&f, &[2.0; 4]).is_err());
    }

    #[test]
    fn csv_and_blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = FeatureMatrix::new("mfm2", vec![3, 5], vec![0.1, -2.5e-8, 3.75, 1e30])
            .unwrap()
            .with_target("age", vec![33.3, 1.0])
            .unwrap();
        f.write_csv(&dir.path().join("f.csv")).unwrap();
        assert_eq!(FeatureMatrix::read_csv(&dir.path().join("f.csv")).unwrap(), f);
        f.save(&dir.path().join("f.pk")).unwrap();
        assert_eq!(FeatureMatrix::load(&dir.path().join("f.pk")).unwrap(), f);
    }
}
