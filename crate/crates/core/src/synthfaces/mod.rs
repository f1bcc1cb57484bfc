//! Deterministic procedural face-like images with known latent attributes.
//!
//! Each image is a soft ellipse "head" with eyes and a mouth. Attributes map
//! to rendering parameters:
//!
//! | attribute | rendering                                         |
//! |-----------|---------------------------------------------------|
//! | identity  | skin tone, texture frequency/orientation, eye gap |
//! | yaw       | horizontal offset of head and features            |
//! | age       | contrast loss and blur                            |
//! | gender    | head width                                        |
//! | emotion   | mouth curvature                                   |
//! | hat       | bright band over the head                         |
//! | glasses   | dark bar across the eyes                          |
//! | beard     | darkened lower face                               |

mod primary;
mod render;

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::bins::BinEdges;
use crate::dataset::{dequantize, quantize, Dataset, DatasetError};
use crate::tensor::Tensor;

pub use primary::{make_primary_net, primary_targets, Arch, PrimaryConfig, PrimaryError, PrimaryOutcome};
pub use render::{render, Face, IdentityTraits};

/// Attributes sampled per image, in latent-vector order.
pub const ATTRIBUTES: [&str; 7] = ["yaw", "age", "gender", "emotion", "hat", "glasses", "beard"];

const BINARY: [bool; 7] = [false, false, true, false, true, true, true];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeCorrelation {
    pub a: String,
    pub b: String,
    /// Target Pearson correlation of the emitted attribute values.
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub primary_count: usize,
    pub satellite_count: usize,
    pub identities: usize,
    /// Render every identity at yaw angles `-90, -90 + step, ..., 90`
    /// instead of sampling yaw (primary subset only).
    pub pose_grid_step: Option<f64>,
    pub correlations: Vec<AttributeCorrelation>,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            primary_count: 2000,
            satellite_count: 200,
            identities: 8,
            pose_grid_step: None,
            correlations: Vec::new(),
            noise: 0.03,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.height < 8 || self.width < 8 {
            return Err(SynthError::Spec("images must be at least 8x8".into()));
        }
        if self.identities == 0 {
            return Err(SynthError::Spec("need at least one identity".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(SynthError::Spec("noise must be a finite non-negative std".into()));
        }
        if let Some(step) = self.pose_grid_step {
            if !(step > 0.0 && step <= 180.0) {
                return Err(SynthError::Spec("pose grid step must lie in (0, 180]".into()));
            }
        }
        latent_cholesky(&self.correlations).map(|_| ())
    }
}

/// Bin edges of the categorical versions of continuous attributes:
/// 9 pose bins, 10 age bins, 7 emotion classes.
pub fn attribute_bins(attribute: &str) -> Option<BinEdges> {
    let b = match attribute {
        "yaw" => BinEdges::uniform(-90.0, 90.0, 9),
        "age" => BinEdges::uniform(0.0, 100.0, 10),
        "emotion" => BinEdges::uniform(-1.0, 1.0, 7),
        _ => return None,
    };
    Some(b.expect("constant edges are valid"))
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub primary: Dataset,
    pub satellite: Dataset,
}

fn phi(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Latent Gaussian correlation producing Pearson correlation `r` after the
/// marginal transforms (threshold at 0 for binary, `Phi` for continuous).
fn latent_rho(r: f64, a_binary: bool, b_binary: bool) -> Result<f64, SynthError> {
    use std::f64::consts::PI;
    let rho = match (a_binary, b_binary) {
        (true, true) => (PI * r / 2.0).sin(),
        (false, false) => 2.0 * (PI * r / 6.0).sin(),
        _ => {
            let max = 3f64.sqrt() / 2.0;
            if r.abs() > max {
                return Err(SynthError::Spec(format!(
                    "binary/continuous correlation {r} exceeds the attainable {max:.3}"
                )));
            }
            std::f64::consts::SQRT_2 * (PI * r / (2.0 * 3f64.sqrt())).sin()
        }
    };
    Ok(rho)
}

fn latent_cholesky(corr: &[AttributeCorrelation]) -> Result<DMatrix<f64>, SynthError> {
    let n = ATTRIBUTES.len();
    let mut m = DMatrix::<f64>::identity(n, n);
    let idx = |name: &str| {
        ATTRIBUTES
            .iter()
            .position(|a| *a == name)
            .ok_or_else(|| SynthError::Spec(format!("unknown attribute `{name}`")))
    };
    for c in corr {
        let (i, j) = (idx(&c.a)?, idx(&c.b)?);
        if i == j || !(c.rho.abs() < 1.0) {
            return Err(SynthError::Spec(format!("bad correlation {} ~ {} = {}", c.a, c.b, c.rho)));
        }
        let rho = latent_rho(c.rho, BINARY[i], BINARY[j])?;
        m[(i, j)] = rho;
        m[(j, i)] = rho;
    }
    m.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| SynthError::Spec("correlation matrix is not positive definite".into()))
}

/// Seed for one image, mixing the run seed, the subset and the index.
fn image_seed(seed: u64, subset: u64, index: u64) -> u64 {
    let mut z = seed ^ subset.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a latent normal vector to attribute values.
fn attributes_from_latent(z: &[f64]) -> [f64; 7] {
    let u = |k: usize| phi(z[k]);
    let b = |k: usize| if z[k] > 0.0 { 1.0 } else { 0.0 };
    [
        -90.0 + 180.0 * u(0),
        100.0 * u(1),
        b(2),
        -1.0 + 2.0 * u(3),
        b(4),
        b(5),
        b(6),
    ]
}

struct Row {
    identity: usize,
    attrs: [f64; 7],
    pixels: Vec<f32>,
}

fn sample_row(spec: &SynthSpec, chol: &DMatrix<f64>, traits: &[IdentityTraits], subset: u64, index: usize, grid_yaw: Option<(usize, f64)>) -> Row {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(spec.seed, subset, index as u64));
    let mut identity = (rng_u64(&mut rng) % spec.identities as u64) as usize;
    let raw: Vec<f64> = (0..ATTRIBUTES.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z = chol * nalgebra::DVector::from_vec(raw);
    let mut attrs = attributes_from_latent(z.as_slice());
    if let Some((id, yaw)) = grid_yaw {
        identity = id;
        attrs[0] = yaw;
    }
    // Labels are stored as f32; render from the stored values.
    for a in attrs.iter_mut() {
        *a = *a as f32 as f64;
    }
    let face = Face {
        yaw: attrs[0],
        age: attrs[1],
        gender: attrs[2],
        emotion: attrs[3],
        hat: attrs[4] > 0.5,
        glasses: attrs[5] > 0.5,
        beard: attrs[6] > 0.5,
    };
    let mut img = render(&face, &traits[identity], spec.height, spec.width);
    for v in img.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = dequantize(quantize(*v - 0.5 + (spec.noise * n) as f32));
    }
    Row {
        identity,
        attrs,
        pixels: img,
    }
}

fn rng_u64(rng: &mut ChaCha8Rng) -> u64 {
    use rand::RngExt;
    rng.random()
}

fn assemble(spec: &SynthSpec, rows: Vec<Row>) -> Result<Dataset, SynthError> {
    let n = rows.len();
    let mut cols: Vec<(String, Vec<f32>)> = vec![("identity".into(), Vec::with_capacity(n))];
    for a in ATTRIBUTES {
        cols.push((a.to_string(), Vec::with_capacity(n)));
        if attribute_bins(a).is_some() {
            cols.push((format!("{a}_bin"), Vec::with_capacity(n)));
        }
    }
    let mut pixels = Vec::with_capacity(n * spec.height * spec.width);
    for row in rows {
        let mut c = cols.iter_mut();
        c.next().expect("identity").1.push(row.identity as f32);
        for (a, v) in ATTRIBUTES.iter().zip(row.attrs) {
            c.next().expect("attribute").1.push(v as f32);
            if let Some(b) = attribute_bins(a) {
                c.next().expect("bin").1.push(b.bin(v) as f32);
            }
        }
        pixels.extend(row.pixels);
    }
    let images = Tensor::new(vec![n, 1, spec.height, spec.width], pixels).expect("rendered planes");
    Ok(Dataset::new(images, cols)?)
}

/// Generates the primary and satellite subsets in memory.
pub fn generate(spec: &SynthSpec) -> Result<SynthData, SynthError> {
    spec.validate()?;
    let chol = latent_cholesky(&spec.correlations)?;
    let traits: Vec<IdentityTraits> = (0..spec.identities)
        .map(|id| IdentityTraits::sample(image_seed(spec.seed, u64::MAX, id as u64), id))
        .collect();

    let primary_rows: Vec<Row> = match spec.pose_grid_step {
        Some(step) => {
            let yaws: Vec<f64> = (0..)
                .map(|k| -90.0 + step * k as f64)
                .take_while(|y| *y <= 90.0 + 1e-9)
                .collect();
            let jobs: Vec<(usize, f64)> = (0..spec.identities)
                .flat_map(|id| yaws.iter().map(move |&y| (id, y)))
                .collect();
            jobs.par_iter()
                .enumerate()
                .map(|(i, &job)| sample_row(spec, &chol, &traits, 0, i, Some(job)))
                .collect()
        }
        None => (0..spec.primary_count)
            .into_par_iter()
            .map(|i| sample_row(spec, &chol, &traits, 0, i, None))
            .collect(),
    };
    let satellite_rows: Vec<Row> = (0..spec.satellite_count)
        .into_par_iter()
        .map(|i| sample_row(spec, &chol, &traits, 1, i, None))
        .collect();

    Ok(SynthData {
        primary: assemble(spec, primary_rows)?,
        satellite: assemble(spec, satellite_rows)?,
    })
}

/// Writes `spec.json`, `primary/` and `satellite/` under `dir`.
pub fn generate_to_dir(spec: &SynthSpec, dir: &Path) -> Result<SynthData, SynthError> {
    let data = generate(spec)?;
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("spec.json"),
        serde_json::to_string_pretty(spec).expect("spec serializes"),
    )?;
    data.primary.save_dir(&dir.join("primary"))?;
    data.satellite.save_dir(&dir.join("satellite"))?;
    Ok(data)
}
