use super::DataError;
use crate::tensor::{Scalar, Tensor};

/// Lower bound on the per-channel standard deviation used by [`zscore_features`].
pub const STD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaConfig {
    pub gamma: f64,
}

impl Default for GammaConfig {
    fn default() -> Self {
        GammaConfig { gamma: 2.2 }
    }
}

impl GammaConfig {
    pub fn new(gamma: f64) -> Result<Self, DataError> {
        if gamma.is_finite() && gamma > 0.0 {
            Ok(GammaConfig { gamma })
        } else {
            Err(DataError::InvalidValue {
                what: "gamma".into(),
                index: 0,
                value: gamma,
            })
        }
    }

    /// `x^(1/γ)`.
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>, DataError> {
        power(x, 1.0 / self.gamma, "gamma_forward input")
    }

    /// `x^γ`.
    pub fn inverse<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>, DataError> {
        power(x, self.gamma, "gamma_inverse input")
    }
}

fn power<T: Scalar>(x: &Tensor<T>, p: f64, what: &str) -> Result<Tensor<T>, DataError> {
    if let Some(index) = x.data().iter().position(|v| !(*v >= T::zero())) {
        return Err(DataError::InvalidValue {
            what: what.into(),
            index,
            value: x.data()[index].to_f64().unwrap_or(f64::NAN),
        });
    }
    let p = T::from_f64_lossy(p);
    Ok(x.map(|v| v.powf(p)))
}

/// `x^(1/2.2)`.
pub fn gamma_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, DataError> {
    GammaConfig::default().forward(x)
}

/// `x^2.2`.
pub fn gamma_inverse<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, DataError> {
    GammaConfig::default().inverse(x)
}

/// Per image and channel statistics, indexed `n * c + channel`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScoreStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-image, per-channel `(x − mean) / max(std, 1e-5)`.
pub fn zscore_features<T: Scalar>(features: &Tensor<T>) -> (Tensor<T>, ZScoreStats) {
    let s = features.shape();
    let planes = s.n * s.c;
    let mut stats = ZScoreStats {
        mean: Vec::with_capacity(planes),
        std: Vec::with_capacity(planes),
    };
    let mut out = Vec::with_capacity(features.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = features.plane(n, c);
            let len = plane.len().max(1) as f64;
            let mean = plane.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>() / len;
            let var = plane
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap_or(0.0) - mean;
                    d * d
                })
                .sum::<f64>()
                / len;
            let std = var.sqrt();
            let denom = std.max(STD_FLOOR);
            out.extend(
                plane
                    .iter()
                    .map(|v| T::from_f64_lossy((v.to_f64().unwrap_or(0.0) - mean) / denom)),
            );
            stats.mean.push(mean);
            stats.std.push(std);
        }
    }
    (Tensor::from_vec(s, out).expect("same shape"), stats)
}
