use super::{DataError, Sample};
use crate::tensor::{Scalar, Shape, Tensor};

/// Number of anchors `0, stride, 2·stride, …` that fit, before the flush anchor.
pub fn regular_anchor_count(dim: usize, patch: usize, stride: usize) -> usize {
    if dim < patch || stride == 0 {
        0
    } else {
        (dim - patch) / stride + 1
    }
}

/// Regular anchors plus one flush with the far edge when needed.
/// Every pixel is covered when `stride <= patch`.
pub fn patch_anchors(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let count = regular_anchor_count(dim, patch, stride);
    let mut anchors: Vec<usize> = (0..count).map(|i| i * stride).collect();
    if let Some(&last) = anchors.last() {
        if last + patch < dim {
            anchors.push(dim - patch);
        }
    }
    anchors
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub y: usize,
    pub x: usize,
    pub sample: Sample,
}

pub fn extract_patches(sample: &Sample, patch: usize, stride: usize) -> Result<Vec<Patch>, DataError> {
    let (h, w) = (sample.height(), sample.width());
    if h < patch || w < patch || patch == 0 {
        return Err(DataError::TooSmall { h, w, patch });
    }
    if stride == 0 {
        return Err(DataError::InvalidValue {
            what: "patch stride".into(),
            index: 0,
            value: 0.0,
        });
    }
    let mut out = Vec::new();
    for &y in &patch_anchors(h, patch, stride) {
        for &x in &patch_anchors(w, patch, stride) {
            out.push(Patch {
                y,
                x,
                sample: sample.crop(y, x, patch, patch)?,
            });
        }
    }
    Ok(out)
}

/// Original extent of a padded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl CropRecord {
    pub fn is_identity(&self) -> bool {
        self.pad_bottom == 0 && self.pad_right == 0
    }

    pub fn apply<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>, DataError> {
        if self.is_identity() && (t.shape().h, t.shape().w) == (self.height, self.width) {
            return Ok(t.clone());
        }
        Ok(t.crop(0, 0, self.height, self.width)?)
    }
}

/// Mirror index without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let p = i % period;
    if p < n {
        p
    } else {
        period - p
    }
}

/// Reflect-pads right and bottom so both dims become multiples of `m`.
pub fn pad_to_multiple<T: Scalar>(t: &Tensor<T>, m: usize) -> (Tensor<T>, CropRecord) {
    let s = t.shape();
    let m = m.max(1);
    let ph = s.h.div_ceil(m) * m;
    let pw = s.w.div_ceil(m) * m;
    let record = CropRecord {
        height: s.h,
        width: s.w,
        pad_bottom: ph - s.h,
        pad_right: pw - s.w,
    };
    if record.is_identity() {
        return (t.clone(), record);
    }
    let cols: Vec<usize> = (0..pw).map(|x| reflect(x, s.w)).collect();
    let mut out = Vec::with_capacity(s.n * s.c * ph * pw);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = t.plane(n, c);
            for y in 0..ph {
                let row = &plane[reflect(y, s.h) * s.w..][..s.w];
                out.extend(cols.iter().map(|&x| row[x]));
            }
        }
    }
    let padded = Tensor::from_vec(Shape::new(s.n, s.c, ph, pw), out).expect("padded shape");
    (padded, record)
}

/// Pads every plane of a sample.
pub fn pad_sample(sample: &Sample, m: usize) -> (Sample, CropRecord) {
    let (noisy, record) = pad_to_multiple(&sample.noisy, m);
    let (features, _) = pad_to_multiple(&sample.features, m);
    let reference = sample.reference.as_ref().map(|r| pad_to_multiple(r, m).0);
    (
        Sample {
            noisy,
            features,
            reference,
        },
        record,
    )
}
