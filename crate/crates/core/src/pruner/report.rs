use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::PruneError;
use crate::engine::forward;
use crate::netir::{CountReport, NetworkIR};
use crate::tensor::Tensor;

/// One line of a compression table. Reductions are percentages of the
/// unpruned network's counts; times are single-image CPU seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionRow {
    pub attribute: String,
    pub arch: String,
    pub rmse_before: Option<f64>,
    pub rmse: Option<f64>,
    pub flops_before: u64,
    pub flops: u64,
    pub flop_reduction_pct: f64,
    pub params_before: u64,
    pub params: u64,
    pub size_reduction_pct: f64,
    pub convention: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds_before: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds_after: Option<f64>,
}

/// Row comparing `after` to `before`; both must be counted under the same
/// FLOP convention and input shape.
pub fn compression_report(
    attribute: &str,
    arch: &str,
    before: &CountReport,
    after: &CountReport,
    rmse_before: Option<f64>,
    rmse_after: Option<f64>,
    timing: Option<(f64, f64)>,
) -> Result<CompressionRow, PruneError> {
    if before.convention != after.convention {
        return Err(PruneError::Convention {
            before: before.convention.clone(),
            after: after.convention.clone(),
        });
    }
    if before.input_shape != after.input_shape {
        return Err(PruneError::Other(format!(
            "counts use input shapes {:?} and {:?}",
            before.input_shape, after.input_shape
        )));
    }
    let r = after.reduction_vs(before);
    Ok(CompressionRow {
        attribute: attribute.to_string(),
        arch: arch.to_string(),
        rmse_before,
        rmse: rmse_after,
        flops_before: before.total_flops,
        flops: after.total_flops,
        flop_reduction_pct: 100.0 * r.flops,
        params_before: before.total_params,
        params: after.total_params,
        size_reduction_pct: 100.0 * r.params,
        convention: after.convention.clone(),
        seconds_before: timing.map(|t| t.0),
        seconds_after: timing.map(|t| t.1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub convention: String,
    pub rows: Vec<CompressionRow>,
}

impl CompressionReport {
    pub fn new(rows: Vec<CompressionRow>) -> Result<Self, PruneError> {
        let convention = rows.first().map(|r| r.convention.clone()).unwrap_or_default();
        if let Some(bad) = rows.iter().find(|r| r.convention != convention) {
            return Err(PruneError::Convention {
                before: convention,
                after: bad.convention.clone(),
            });
        }
        Ok(Self { convention, rows })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), PruneError> {
        let mut w = csv::Writer::from_path(path)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut write = |rec: Vec<String>| w.write_record(rec);
        write(
            [
                "attribute",
                "arch",
                "rmse_before",
                "rmse",
                "flops_before",
                "flops",
                "flop_reduction_pct",
                "params_before",
                "params",
                "size_reduction_pct",
                "seconds_before",
                "seconds_after",
            ]
            .map(String::from)
            .to_vec(),
        )?;
        for r in &self.rows {
            write(vec![
                r.attribute.clone(),
                r.arch.clone(),
                opt(r.rmse_before),
                opt(r.rmse),
                r.flops_before.to_string(),
                r.flops.to_string(),
                format!("{:.2}", r.flop_reduction_pct),
                r.params_before.to_string(),
                r.params.to_string(),
                format!("{:.2}", r.size_reduction_pct),
                opt(r.seconds_before),
                opt(r.seconds_after),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Median wall time in seconds of five forward passes over `images`.
pub fn inference_time(net: &NetworkIR, images: &Tensor) -> Result<f64, PruneError> {
    let mut t = Vec::with_capacity(5);
    for _ in 0..5 {
        let start = Instant::now();
        forward(net, images, &[])?;
        t.push(start.elapsed().as_secs_f64());
    }
    t.sort_by(f64::total_cmp);
    Ok(t[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netir::{count_flops, NetworkBuilder, Shape3};

    #[test]
    fn identical_counts_mean_no_reduction() {
        let net = NetworkBuilder::new("t", Shape3::new(1, 8, 8)).conv(4, 3).relu().gap().linear(1).build(0).unwrap();
        let c = count_flops(&net, net.input_shape).unwrap();
        let row = compression_report("yaw", "vgg", &c, &c, Some(1.0), Some(1.0), None).unwrap();
        assert_eq!(row.flop_reduction_pct, 0.0);
        assert_eq!(row.size_reduction_pct, 0.0);
        let mut other = c.clone();
        other.convention = "mac".into();
        assert!(matches!(
            compression_report("yaw", "vgg", &c, &other, None, None, None),
            Err(PruneError::Convention { .. })
        ));
    }

    #[test]
    fn csv_columns() {
        let net = NetworkBuilder::new("t", Shape3::new(1, 8, 8)).conv(4, 3).relu().gap().linear(1).build(0).unwrap();
        let c = count_flops(&net, net.input_shape).unwrap();
        let row = compression_report("yaw", "vgg", &c, &c, None, Some(2.0), Some((0.2, 0.1))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        CompressionReport::new(vec![row]).unwrap().write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "attribute,arch,rmse_before,rmse,flops_before,flops,flop_reduction_pct,params_before,params,size_reduction_pct,seconds_before,seconds_after"
        );
    }
}
