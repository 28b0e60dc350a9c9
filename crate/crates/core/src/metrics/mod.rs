//! Image quality metrics and evaluation reports.
//!
//! RelMSE is measured on HDR radiance with the training loss formula. SSIM is
//! measured in the display domain (gamma-compressed, clamped to `[0, 1]`) with
//! an 11×11 Gaussian window (σ = 1.5) over valid window positions only.

use std::fmt::Write as _;

use thiserror::Error;

use crate::data::{gamma_forward, gamma_inverse, pad_sample, zscore_features, DataError, Sample};
use crate::net::{Model, NetError, RESOLUTION_MULTIPLE};
use crate::tensor::{relmse_value, Shape, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0} vs {1}")]
    Shape(Shape, Shape),
    #[error("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall { h: usize, w: usize },
    #[error("sample {0} has no reference image")]
    MissingReference(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
}

fn same_shape(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(), MetricError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(MetricError::Shape(a.shape(), b.shape()))
    }
}

/// Same formula and arithmetic as the training loss.
pub fn relmse_metric(pred_hdr: &Tensor<f32>, ref_hdr: &Tensor<f32>, eps: f64) -> Result<f64, MetricError> {
    same_shape(pred_hdr, ref_hdr)?;
    Ok(relmse_value(pred_hdr.data(), ref_hdr, eps as f32) as f64)
}

/// HDR radiance to the display domain.
pub fn to_display(hdr: &Tensor<f32>) -> Result<Tensor<f32>, MetricError> {
    Ok(gamma_forward(&hdr.map(|v| v.max(0.0)))?.map(|v| v.min(1.0)))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filter of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and valid window positions of display-domain images.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(MetricError::TooSmall { h: s.h, w: s.w });
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            let x: Vec<f64> = a.plane(n, c).iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = b.plane(n, c).iter().map(|&v| v as f64).collect();
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
            let [mx, my, mxx, myy, mxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, s.h, s.w, &k));
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = mxx[i] - ux * ux;
                let vy = myy[i] - uy * uy;
                let cov = mxy[i] - ux * uy;
                total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            }
            count += mx.len();
        }
    }
    Ok(total / count as f64)
}

/// SSIM of two HDR images after mapping both to the display domain.
pub fn ssim_hdr(pred_hdr: &Tensor<f32>, ref_hdr: &Tensor<f32>) -> Result<f64, MetricError> {
    ssim(&to_display(pred_hdr)?, &to_display(ref_hdr)?)
}

/// Full-image inference: pad to a multiple of 32, run with BN running
/// statistics, crop, and return HDR radiance.
pub fn denoise(model: &Model<f32>, sample: &Sample) -> Result<Tensor<f32>, MetricError> {
    let (padded, crop) = pad_sample(sample, RESOLUTION_MULTIPLE);
    let noisy = gamma_forward(&padded.noisy)?;
    let (features, _) = zscore_features(&padded.features);
    let out = model.infer(&noisy, &features)?;
    Ok(gamma_inverse(&crop.apply(&out)?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub scene: String,
    pub relmse: f64,
    pub ssim: f64,
}

/// Per-scene metrics of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_relmse(&self) -> f64 {
        self.rows.iter().map(|r| r.relmse).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

fn reference_of<'a>(scene: &str, sample: &'a Sample) -> Result<&'a Tensor<f32>, MetricError> {
    sample
        .reference
        .as_ref()
        .ok_or_else(|| MetricError::MissingReference(scene.to_string()))
}

fn score(label: &str, samples: &[(String, Sample)], mut predict: impl FnMut(&Sample) -> Result<Tensor<f32>, MetricError>) -> Result<EvalReport, MetricError> {
    for (scene, s) in samples {
        reference_of(scene, s)?;
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (scene, s) in samples {
        let reference = reference_of(scene, s)?;
        let pred = predict(s)?;
        rows.push(EvalRow {
            scene: scene.clone(),
            relmse: relmse_metric(&pred, reference, crate::train::LOSS_EPS)?,
            ssim: ssim_hdr(&pred, reference)?,
        });
    }
    Ok(EvalReport {
        label: label.to_string(),
        rows,
    })
}

/// Scores `model` on every sample; all samples must carry a reference.
pub fn evaluate(model: &Model<f32>, samples: &[(String, Sample)], label: &str) -> Result<EvalReport, MetricError> {
    score(label, samples, |s| denoise(model, s))
}

/// Scores the noisy input itself.
pub fn evaluate_noisy(samples: &[(String, Sample)]) -> Result<EvalReport, MetricError> {
    score("noisy", samples, |s| Ok(s.noisy.clone()))
}

/// `scene,<label>_relmse,<label>_ssim,...` with a trailing `mean` row.
pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("scene");
    for r in reports {
        let _ = write!(out, ",{0}_relmse,{0}_ssim", r.label);
    }
    out.push('\n');
    let scenes = reports.first().map(|r| r.rows.len()).unwrap_or(0);
    for i in 0..scenes {
        out.push_str(&reports[0].rows[i].scene);
        for r in reports {
            let _ = write!(out, ",{},{}", r.rows[i].relmse, r.rows[i].ssim);
        }
        out.push('\n');
    }
    out.push_str("mean");
    for r in reports {
        let _ = write!(out, ",{},{}", r.mean_relmse(), r.mean_ssim());
    }
    out.push('\n');
    out
}

/// Aligned plain-text version of [`report_csv`].
pub fn report_table(reports: &[EvalReport]) -> String {
    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["scene".to_string()];
    for r in reports {
        header.push(format!("{} RelMSE", r.label));
        header.push(format!("{} SSIM", r.label));
    }
    cells.push(header);
    let scenes = reports.first().map(|r| r.rows.len()).unwrap_or(0);
    for i in 0..scenes {
        let mut row = vec![reports[0].rows[i].scene.clone()];
        for r in reports {
            row.push(format!("{:.5}", r.rows[i].relmse));
            row.push(format!("{:.4}", r.rows[i].ssim));
        }
        cells.push(row);
    }
    let mut mean = vec!["mean".to_string()];
    for r in reports {
        mean.push(format!("{:.5}", r.mean_relmse()));
        mean.push(format!("{:.4}", r.mean_ssim()));
    }
    cells.push(mean);
    let cols = cells[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 || i == cells.len() - 2 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
            out.push('\n');
        }
    }
    out
}
