//! L1-penalized least squares over a geometric regularization path,
//! characteristic curves (error against support size) and knee points.
//!
//! The objective is
//! `(1 / 2N) * sum_i (y_i - b0 - x_i . beta)^2 + lambda * |beta|_1`
//! with an unpenalized intercept `b0`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureMatrix, Standardizer};
use crate::probe::LinearMap;

#[derive(Debug, Error)]
pub enum LassoError {
    #[error("target has zero variance")]
    ConstantTarget,
    #[error("features carry no target column `{0}`")]
    MissingTarget(String),
    #[error("{0}")]
    Invalid(String),
    #[error("curve has no fits")]
    EmptyCurve,
    #[error("gamma must lie in (0, 1), got {0}")]
    Gamma(f64),
    #[error("curve output: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoConfig {
    /// Number of lambda values on the path.
    pub count: usize,
    /// Ratio of the largest to the smallest lambda.
    pub ratio: f64,
    /// Stop once no coordinate moves by more than this in a sweep...
    pub tol: f64,
    /// ...and the optimality conditions hold to within this.
    pub kkt_tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            count: 100,
            ratio: 1e4,
            tol: 1e-7,
            kkt_tol: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

/// Column-major design matrix.
#[derive(Debug, Clone)]
pub struct Design {
    n: usize,
    cols: Vec<Vec<f64>>,
    /// `x_j . x_j / N`.
    sq: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Design {
    /// From row-major `n x p` values.
    pub fn new(x: &[f64], n: usize, p: usize) -> Design {
        assert_eq!(x.len(), n * p, "design size");
        let cols: Vec<Vec<f64>> = (0..p).map(|j| (0..n).map(|i| x[i * p + j]).collect()).collect();
        let sq = cols.iter().map(|c| dot(c, c) / n as f64).collect();
        Design { n, cols, sq }
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.cols.len()
    }

    pub fn predict_row(&self, i: usize, beta: &[f64], b0: f64) -> f64 {
        b0 + self.cols.iter().zip(beta).map(|(c, b)| c[i] * b).sum::<f64>()
    }

    fn residual(&self, y: &[f64], beta: &[f64], b0: f64) -> Vec<f64> {
        (0..self.n).map(|i| y[i] - self.predict_row(i, beta, b0)).collect()
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Smallest lambda at which every coefficient is zero:
/// `max_j |x_j . (y - mean(y))| / N`.
pub fn lambda_max(x: &Design, y: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let r: Vec<f64> = y.iter().map(|v| v - mean).collect();
    x.cols
        .iter()
        .map(|c| (dot(c, &r) / x.n as f64).abs())
        .fold(0.0, f64::max)
}

/// `count` lambdas from `lambda_max` down to `lambda_max / ratio`,
/// geometrically spaced.
pub fn lambda_schedule(x: &Design, y: &[f64], count: usize, ratio: f64) -> Result<Vec<f64>, LassoError> {
    if count == 0 || !(ratio >= 1.0) {
        return Err(LassoError::Invalid(format!("bad schedule: count {count}, ratio {ratio}")));
    }
    let first = y.first().copied().unwrap_or(0.0);
    if y.iter().all(|&v| v == first) {
        return Err(LassoError::ConstantTarget);
    }
    let top = lambda_max(x, y);
    if count == 1 {
        return Ok(vec![top]);
    }
    Ok((0..count)
        .map(|i| top * ratio.powf(-(i as f64) / (count - 1) as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub lambda: f64,
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub nnz: usize,
    pub sweeps: usize,
    pub converged: bool,
    /// Largest violation of the optimality conditions.
    pub kkt: f64,
    pub train_rmse: f64,
    pub heldout_rmse: Option<f64>,
}

impl LassoFit {
    pub fn support(&self) -> Vec<usize> {
        self.beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Value of the penalized objective.
pub fn objective(x: &Design, y: &[f64], beta: &[f64], b0: f64, lambda: f64) -> f64 {
    let r = x.residual(y, beta, b0);
    dot(&r, &r) / (2.0 * x.n as f64) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Largest violation of the subgradient conditions: `|g_j| <= lambda` for
/// zero coefficients, `g_j = lambda * sign(beta_j)` otherwise, with
/// `g = X'r / N`, plus the intercept condition `mean(r) = 0`.
pub fn kkt_residual(x: &Design, y: &[f64], beta: &[f64], b0: f64, lambda: f64) -> f64 {
    let r = x.residual(y, beta, b0);
    kkt_from_residual(x, &r, beta, lambda)
}

fn kkt_from_residual(x: &Design, r: &[f64], beta: &[f64], lambda: f64) -> f64 {
    let n = x.n as f64;
    let mut worst = (r.iter().sum::<f64>() / n).abs();
    for (c, b) in x.cols.iter().zip(beta) {
        let g = dot(c, r) / n;
        let v = if *b == 0.0 {
            (g.abs() - lambda).max(0.0)
        } else {
            (g - lambda * b.signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Cyclic coordinate descent from `warm` (or zero).
pub fn fit_lasso(x: &Design, y: &[f64], lambda: f64, warm: Option<(&[f64], f64)>, cfg: &LassoConfig) -> LassoFit {
    let n = x.n as f64;
    let p = x.cols();
    let (mut beta, mut b0) = match warm {
        Some((b, i)) => (b.to_vec(), i),
        None => (vec![0.0; p], 0.0),
    };
    let mut r = x.residual(y, &beta, b0);
    // Intercept first so that a cold start sees centred residuals.
    let shift = r.iter().sum::<f64>() / n;
    b0 += shift;
    r.iter_mut().for_each(|v| *v -= shift);

    let mut sweeps = 0;
    let mut converged = false;
    let mut kkt = f64::INFINITY;
    while sweeps < cfg.max_sweeps {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            if x.sq[j] == 0.0 {
                beta[j] = 0.0;
                continue;
            }
            let old = beta[j];
            let rho = dot(&x.cols[j], &r) / n + x.sq[j] * old;
            let new = soft_threshold(rho, lambda) / x.sq[j];
            if new != old {
                let d = new - old;
                for (ri, xi) in r.iter_mut().zip(&x.cols[j]) {
                    *ri -= xi * d;
                }
                beta[j] = new;
                max_change = max_change.max(d.abs());
            }
        }
        let shift = r.iter().sum::<f64>() / n;
        if shift != 0.0 {
            b0 += shift;
            r.iter_mut().for_each(|v| *v -= shift);
            max_change = max_change.max(shift.abs());
        }
        if max_change < cfg.tol {
            // Recompute the residual to shed accumulated rounding.
            r = x.residual(y, &beta, b0);
            kkt = kkt_from_residual(x, &r, &beta, lambda);
            if kkt <= cfg.kkt_tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        kkt = kkt_from_residual(x, &x.residual(y, &beta, b0), &beta, lambda);
    }
    let train_rmse = (dot(&r, &r) / n).sqrt();
    LassoFit {
        lambda,
        nnz: beta.iter().filter(|b| **b != 0.0).count(),
        beta,
        intercept: b0,
        sweeps,
        converged,
        kkt,
        train_rmse,
        heldout_rmse: None,
    }
}

/// Warm-started fits along `lambdas` (expected in descending order).
pub fn lasso_path(x: &Design, y: &[f64], lambdas: &[f64], cfg: &LassoConfig) -> Vec<LassoFit> {
    let mut fits: Vec<LassoFit> = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        let warm = fits.last().map(|f| (f.beta.as_slice(), f.intercept));
        fits.push(fit_lasso(x, y, l, warm, cfg));
    }
    fits
}

fn rmse_on(x: &Design, y: &[f64], fit: &LassoFit) -> f64 {
    let s: f64 = (0..x.n).map(|i| (y[i] - x.predict_row(i, &fit.beta, fit.intercept)).powi(2)).sum();
    (s / x.n.max(1) as f64).sqrt()
}

/// Error against support size for one layer and target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicCurve {
    pub layer: String,
    pub target: String,
    pub filter_ids: Vec<usize>,
    /// Standardization fitted on the training rows; coefficients live in
    /// the standardized space.
    pub standardizer: Standardizer,
    /// In order of decreasing lambda.
    pub fits: Vec<LassoFit>,
    pub train_rows: Vec<usize>,
    pub heldout_rows: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSplit {
    /// Fraction of rows held out for the curve's error.
    pub heldout: f64,
    pub seed: u64,
}

impl Default for CurveSplit {
    fn default() -> Self {
        Self {
            heldout: 0.25,
            seed: 0,
        }
    }
}

impl CurveSplit {
    pub fn indices(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let k = ((1.0 - self.heldout) * n as f64).round() as usize;
        let (mut a, mut b) = (order[..k].to_vec(), order[k..].to_vec());
        a.sort_unstable();
        b.sort_unstable();
        (a, b)
    }
}

/// Fits the lasso path of `target` on the columns of `features`, using the
/// training rows of `split`, and records held-out error per fit.
pub fn characteristic_curve(
    features: &FeatureMatrix,
    target: &str,
    split: &CurveSplit,
    cfg: &LassoConfig,
) -> Result<CharacteristicCurve, LassoError> {
    let y_all: Vec<f64> = features
        .target(target)
        .ok_or_else(|| LassoError::MissingTarget(target.to_string()))?
        .iter()
        .map(|&v| v as f64)
        .collect();
    let (train, held) = split.indices(features.rows());
    if train.len() < 2 {
        return Err(LassoError::Invalid(format!("only {} training rows", train.len())));
    }
    let p = features.cols();
    let std = Standardizer::fit(features, &train);
    let xt = Design::new(&std.apply(features, &train), train.len(), p);
    let yt: Vec<f64> = train.iter().map(|&i| y_all[i]).collect();
    let lambdas = lambda_schedule(&xt, &yt, cfg.count, cfg.ratio)?;
    let mut fits = lasso_path(&xt, &yt, &lambdas, cfg);
    if !held.is_empty() {
        let xh = Design::new(&std.apply(features, &held), held.len(), p);
        let yh: Vec<f64> = held.iter().map(|&i| y_all[i]).collect();
        for f in &mut fits {
            f.heldout_rmse = Some(rmse_on(&xh, &yh, f));
        }
    }
    Ok(CharacteristicCurve {
        layer: features.layer.clone(),
        target: target.to_string(),
        filter_ids: features.filter_ids.clone(),
        standardizer: std,
        fits,
        train_rows: train,
        heldout_rows: held,
    })
}

impl CharacteristicCurve {
    /// Error used for knee selection: held-out when available.
    pub fn rmse(&self, k: usize) -> f64 {
        let f = &self.fits[k];
        f.heldout_rmse.unwrap_or(f.train_rmse)
    }

    /// Fit `k` as an affine map on raw features restricted to its support:
    /// weights are ordered like `support`, positions index `filter_ids`.
    pub fn raw_map(&self, k: usize) -> (Vec<usize>, LinearMap) {
        let f = &self.fits[k];
        let support = f.support();
        let weights: Vec<f64> = support
            .iter()
            .map(|&j| f.beta[j] / self.standardizer.scale[j])
            .collect();
        let intercept = f.intercept
            - support
                .iter()
                .zip(&weights)
                .map(|(&j, w)| w * self.standardizer.mean[j])
                .sum::<f64>();
        (support, LinearMap { weights, intercept })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), LassoError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["lambda", "nnz", "rmse_train", "rmse_heldout", "converged"])?;
        for f in &self.fits {
            w.write_record([
                f.lambda.to_string(),
                f.nnz.to_string(),
                f.train_rmse.to_string(),
                f.heldout_rmse.map(|v| v.to_string()).unwrap_or_default(),
                f.converged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KneePoint {
    pub gamma: f64,
    /// Index of the selected fit on the curve.
    pub index: usize,
    pub nnz: usize,
    pub rmse: f64,
    pub lambda: f64,
    /// Column positions of the nonzero coefficients.
    pub support: Vec<usize>,
}

/// Index of the fit with the fewest nonzeros among those with
/// `rmse - min < gamma * (max - min)`; ties go to the larger lambda (the
/// earlier fit). `points` are `(nnz, rmse)` in order of decreasing lambda.
/// On a flat curve every fit qualifies.
pub fn knee_index(points: &[(usize, f64)], gamma: f64) -> Result<usize, LassoError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(LassoError::Gamma(gamma));
    }
    if points.is_empty() {
        return Err(LassoError::EmptyCurve);
    }
    let lo = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let band = gamma * (hi - lo);
    let mut best: Option<usize> = None;
    for (k, &(nnz, e)) in points.iter().enumerate() {
        let ok = hi == lo || e - lo < band;
        if ok && best.is_none_or(|b| nnz < points[b].0) {
            best = Some(k);
        }
    }
    Ok(best.expect("the minimum satisfies the band"))
}

pub fn kneepoint(curve: &CharacteristicCurve, gamma: f64) -> Result<KneePoint, LassoError> {
    let points: Vec<(usize, f64)> = (0..curve.fits.len()).map(|k| (curve.fits[k].nnz, curve.rmse(k))).collect();
    let k = knee_index(&points, gamma)?;
    let f = &curve.fits[k];
    Ok(KneePoint {
        gamma,
        index: k,
        nnz: f.nnz,
        rmse: points[k].1,
        lambda: f.lambda,
        support: f.support(),
    })
}

/// Curve summary plus knee points, the JSON companion of the curve CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveReport {
    pub curve: CharacteristicCurve,
    pub knees: Vec<KneePoint>,
}
