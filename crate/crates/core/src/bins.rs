use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("bin edges must be finite, strictly increasing and at least two: {0:?}")]
pub struct BadEdges(pub Vec<f64>);

/// Edges `e_0 < e_1 < ... < e_K` of `K` bins. A value equal to an inner edge
/// falls in the bin above it; values outside `[e_0, e_K]` clamp to the first
/// or last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BinEdges(Vec<f64>);

impl BinEdges {
    pub fn new(edges: Vec<f64>) -> Result<Self, BadEdges> {
        let ok = edges.len() >= 2
            && edges.iter().all(|e| e.is_finite())
            && edges.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(Self(edges))
        } else {
            Err(BadEdges(edges))
        }
    }

    /// `bins` equal-width bins spanning `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self, BadEdges> {
        let step = (hi - lo) / bins as f64;
        Self::new((0..=bins).map(|i| lo + step * i as f64).collect())
    }

    pub fn num_bins(&self) -> usize {
        self.0.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.0
    }

    pub fn bin(&self, v: f64) -> usize {
        let inner = &self.0[1..self.0.len() - 1];
        inner.partition_point(|&e| e <= v)
    }

    /// Midpoint of bin `k`, used as the continuous stand-in for a class.
    pub fn center(&self, k: usize) -> f64 {
        0.5 * (self.0[k] + self.0[k + 1])
    }
}

impl TryFrom<Vec<f64>> for BinEdges {
    type Error = BadEdges;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<BinEdges> for Vec<f64> {
    fn from(b: BinEdges) -> Self {
        b.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edges_are_closed_on_the_right_and_clamped() {
        let b = BinEdges::uniform(0.0, 100.0, 10).unwrap();
        assert_eq!(b.num_bins(), 10);
        assert_eq!(b.bin(-5.0), 0);
        assert_eq!(b.bin(0.0), 0);
        assert_eq!(b.bin(9.999), 0);
        assert_eq!(b.bin(10.0), 1);
        assert_eq!(b.bin(100.0), 9);
        assert_eq!(b.bin(250.0), 9);
    }

    #[test]
    fn rejects_non_increasing() {
        assert!(BinEdges::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(BinEdges::new(vec![0.0]).is_err());
        assert!(serde_json::from_str::<BinEdges>("[3.0, 2.0]").is_err());
    }
}
