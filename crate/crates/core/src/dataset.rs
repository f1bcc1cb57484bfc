//! Image datasets with named label columns, stored on disk as 8-bit PGM
//! files plus a `labels.csv`.
//!
//! In memory a pixel byte `b` becomes `b / 255 - 0.5`, so intensities are
//! roughly centred for training.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat};
use thiserror::Error;

use crate::netir::Shape3;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("labels: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown label column `{0}`")]
    UnknownColumn(String),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x C x H x W`, values in `[-0.5, 0.5]`.
    pub images: Tensor,
    pub columns: Vec<(String, Vec<f32>)>,
}

impl Dataset {
    pub fn new(images: Tensor, columns: Vec<(String, Vec<f32>)>) -> Result<Self, DatasetError> {
        if images.shape().len() != 4 {
            return Err(DatasetError::Invalid(format!("images must be rank 4, got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if let Some((name, col)) = columns.iter().find(|(_, c)| c.len() != n) {
            return Err(DatasetError::Invalid(format!("column `{name}` has {} rows, expected {n}", col.len())));
        }
        Ok(Self { images, columns })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> Shape3 {
        let s = self.images.shape();
        Shape3::new(s[1], s[2], s[3])
    }

    pub fn column(&self, name: &str) -> Result<&[f32], DatasetError> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
            .ok_or_else(|| DatasetError::UnknownColumn(name.to_string()))
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_rows(rows),
            columns: self
                .columns
                .iter()
                .map(|(n, c)| (n.clone(), rows.iter().map(|&r| c[r]).collect()))
                .collect(),
        }
    }

    /// Writes `images/NNNNN.pgm` and `labels.csv` under `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), DatasetError> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        let shape = self.image_shape();
        if shape.c != 1 {
            return Err(DatasetError::Invalid("PGM output needs single-channel images".into()));
        }
        let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
        let mut header = vec!["filename".to_string()];
        header.extend(self.columns.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        let plane = shape.plane();
        for i in 0..self.len() {
            let file = format!("{i:05}.pgm");
            let px: Vec<u8> = self.images.data()[i * plane..(i + 1) * plane]
                .iter()
                .map(|&v| quantize(v))
                .collect();
            let img = GrayImage::from_raw(shape.w as u32, shape.h as u32, px).expect("plane sized buffer");
            let path = img_dir.join(&file);
            img.save_with_format(&path, ImageFormat::Pnm)
                .map_err(|source| DatasetError::Image { path, source })?;
            let mut row = vec![format!("images/{file}")];
            row.extend(self.columns.iter().map(|(_, c)| c[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(io_err(dir))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Dataset, DatasetError> {
        let mut r = csv::Reader::from_path(dir.join("labels.csv"))?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.first().map(String::as_str) != Some("filename") {
            return Err(DatasetError::Invalid("labels.csv must start with a `filename` column".into()));
        }
        let mut columns: Vec<(String, Vec<f32>)> = header[1..].iter().map(|h| (h.clone(), Vec::new())).collect();
        let mut pixels = Vec::new();
        let mut dims: Option<(u32, u32)> = None;
        for rec in r.records() {
            let rec = rec?;
            let path = dir.join(&rec[0]);
            let img = image::open(&path)
                .map_err(|source| DatasetError::Image {
                    path: path.clone(),
                    source,
                })?
                .into_luma8();
            let d = img.dimensions();
            if *dims.get_or_insert(d) != d {
                return Err(DatasetError::Invalid(format!("{} has size {d:?}, expected {dims:?}", path.display())));
            }
            pixels.extend(img.into_raw().into_iter().map(dequantize));
            for (j, (name, col)) in columns.iter_mut().enumerate() {
                let v: f32 = rec[j + 1]
                    .parse()
                    .map_err(|_| DatasetError::Invalid(format!("column `{name}`: bad value `{}`", &rec[j + 1])))?;
                col.push(v);
            }
        }
        let (w, h) = dims.unwrap_or((0, 0));
        let n = columns.first().map_or(pixels.len() / (w * h).max(1) as usize, |(_, c)| c.len());
        let images = Tensor::new(vec![n, 1, h as usize, w as usize], pixels)
            .map_err(|e| DatasetError::Invalid(e.to_string()))?;
        Dataset::new(images, columns)
    }
}

/// Nearest 8-bit level for a `[-0.5, 0.5]` intensity.
pub fn quantize(v: f32) -> u8 {
    ((v + 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0 - 0.5
}
