//! Image buffers on disk and the transforms applied before the network.
//!
//! A sample directory holds one PFM per buffer group:
//!
//! ```text
//! <scene>/color.pfm      noisy radiance
//!         normal.pfm     shading normal
//!         position.pfm   world position
//!         albedo1.pfm    texture at the first hit
//!         albedo2.pfm    texture at the second hit
//!         reference.pfm  converged radiance (optional)
//! ```

mod manifest;
mod patches;
mod pfm;
mod transforms;

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::net::{COLOR_CHANNELS, FEATURE_CHANNELS};
use crate::tensor::{Shape, Tensor, TensorError};

pub use manifest::{read_manifest, write_manifest};
pub use patches::{extract_patches, pad_sample, pad_to_multiple, patch_anchors, regular_anchor_count, CropRecord, Patch};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm, PfmImage};
pub use transforms::{gamma_forward, gamma_inverse, zscore_features, GammaConfig, ZScoreStats, STD_FLOOR};

/// Feature files in stacking order.
pub const FEATURE_FILES: [&str; 4] = ["normal.pfm", "position.pfm", "albedo1.pfm", "albedo2.pfm"];
pub const COLOR_FILE: &str = "color.pfm";
pub const REFERENCE_FILE: &str = "reference.pfm";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed PFM: {0}")]
    Pfm(String),
    #[error("truncated PFM payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<DataError>,
    },
    #[error("dimension mismatch: {what} is {actual}, expected {expected}")]
    DimensionMismatch { what: String, expected: String, actual: String },
    #[error("invalid {what}: found {value} at index {index}")]
    InvalidValue { what: String, index: usize, value: f64 },
    #[error("image {h}x{w} is smaller than patch {patch}")]
    TooSmall { h: usize, w: usize, patch: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DataError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            return DataError::MissingFile(path.to_path_buf());
        }
        DataError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    pub(crate) fn at(self, path: &Path) -> Self {
        match self {
            e @ (DataError::Io { .. } | DataError::MissingFile(_) | DataError::InFile { .. }) => e,
            e => DataError::InFile {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }
}

/// One scene: noisy colour, auxiliary features and optionally the reference.
#[derive(Clone, PartialEq)]
pub struct Sample {
    /// `1×3×h×w` linear radiance.
    pub noisy: Tensor<f32>,
    /// `1×12×h×w`: normal, position, albedo1, albedo2.
    pub features: Tensor<f32>,
    /// `1×3×h×w` linear radiance.
    pub reference: Option<Tensor<f32>>,
}

fn check_radiance(what: &str, t: &Tensor<f32>) -> Result<(), DataError> {
    match t.data().iter().position(|v| !v.is_finite() || *v < 0.0) {
        Some(index) => Err(DataError::InvalidValue {
            what: what.into(),
            index,
            value: t.data()[index] as f64,
        }),
        None => Ok(()),
    }
}

fn expect_shape(what: &str, actual: Shape, expected: Shape) -> Result<(), DataError> {
    if actual == expected {
        Ok(())
    } else {
        Err(DataError::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        })
    }
}

impl Sample {
    pub fn new(noisy: Tensor<f32>, features: Tensor<f32>, reference: Option<Tensor<f32>>) -> Result<Self, DataError> {
        let s = noisy.shape();
        expect_shape("noisy", s, Shape::new(1, COLOR_CHANNELS, s.h, s.w))?;
        expect_shape("features", features.shape(), Shape::new(1, FEATURE_CHANNELS, s.h, s.w))?;
        check_radiance("noisy", &noisy)?;
        if !features.is_finite() {
            return Err(DataError::InvalidValue {
                what: "features".into(),
                index: features.data().iter().position(|v| !v.is_finite()).unwrap_or(0),
                value: f64::NAN,
            });
        }
        if let Some(r) = &reference {
            expect_shape("reference", r.shape(), s)?;
            check_radiance("reference", r)?;
        }
        Ok(Sample {
            noisy,
            features,
            reference,
        })
    }

    pub fn height(&self) -> usize {
        self.noisy.shape().h
    }

    pub fn width(&self) -> usize {
        self.noisy.shape().w
    }

    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self, DataError> {
        Ok(Sample {
            noisy: self.noisy.crop(y, x, h, w)?,
            features: self.features.crop(y, x, h, w)?,
            reference: self.reference.as_ref().map(|r| r.crop(y, x, h, w)).transpose()?,
        })
    }
}

impl fmt::Debug for Sample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Sample({}x{}, reference: {})",
            self.height(),
            self.width(),
            self.reference.is_some()
        )
    }
}

fn read_rgb(dir: &Path, name: &str) -> Result<Tensor<f32>, DataError> {
    let path = dir.join(name);
    let img = read_pfm(&path)?;
    if img.channels != 3 {
        return Err(DataError::DimensionMismatch {
            what: path.display().to_string(),
            expected: "3 channels".into(),
            actual: format!("{} channel", img.channels),
        });
    }
    Ok(img.to_tensor())
}

pub fn load_sample(dir: impl AsRef<Path>) -> Result<Sample, DataError> {
    let dir = dir.as_ref();
    let noisy = read_rgb(dir, COLOR_FILE)?;
    let s = noisy.shape();
    let mut planes = Vec::with_capacity(FEATURE_FILES.len());
    for name in FEATURE_FILES {
        let t = read_rgb(dir, name)?;
        expect_shape(&dir.join(name).display().to_string(), t.shape(), s)?;
        planes.push(t);
    }
    let features = Tensor::concat_channels(&planes)?;
    let ref_path = dir.join(REFERENCE_FILE);
    let reference = if ref_path.exists() {
        let r = read_rgb(dir, REFERENCE_FILE)?;
        expect_shape(&ref_path.display().to_string(), r.shape(), s)?;
        Some(r)
    } else {
        None
    };
    Sample::new(noisy, features, reference).map_err(|e| e.at(dir))
}

pub fn save_sample(dir: impl AsRef<Path>, sample: &Sample) -> Result<(), DataError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    write_pfm(dir.join(COLOR_FILE), &PfmImage::from_tensor(&sample.noisy)?)?;
    for (i, name) in FEATURE_FILES.iter().enumerate() {
        let plane = sample.features.slice_channels(3 * i, 3)?;
        write_pfm(dir.join(name), &PfmImage::from_tensor(&plane)?)?;
    }
    if let Some(r) = &sample.reference {
        write_pfm(dir.join(REFERENCE_FILE), &PfmImage::from_tensor(r)?)?;
    }
    Ok(())
}
