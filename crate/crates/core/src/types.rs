//! Domain value types shared by every module.
//!
//! All types validate their invariants at construction and are immutable
//! afterwards, so they are safe to share read-only across parallel workers.

use crate::error::{Error, Result};
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

/// Which acquisition domain a batch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn name(&self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Grayscale image batch `[B, 1, H, W]`, intensities in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    data: Array4<f64>,
    domain: DomainTag,
}

impl ImageBatch {
    /// Spatial sizes must be at least 8 and divisible by 8 (the encoder
    /// downsamples by 2 three times).
    pub fn new(data: Array4<f64>, domain: DomainTag) -> Result<Self> {
        let (b, c, h, w) = (data.shape()[0], data.shape()[1], data.shape()[2], data.shape()[3]);
        if b < 1 {
            return Err(Error::Data("image batch must be nonempty".into()));
        }
        if c != 1 {
            return Err(Error::shape("ImageBatch", "[B, 1, H, W]", format!("[{b}, {c}, {h}, {w}]")));
        }
        if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Data(format!(
                "image size {h}x{w} must be >= 8 and divisible by 8"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ImageBatch".into()));
        }
        Ok(ImageBatch { data, domain })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Integer class map `[B, H, W]`, entries in `{0, .., C-1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    data: Array3<u8>,
    classes: usize,
}

impl LabelMap {
    pub fn new(data: Array3<u8>, classes: usize) -> Result<Self> {
        if classes == 0 || classes > 256 {
            return Err(Error::Data(format!("unsupported class count {classes}")));
        }
        if let Some(bad) = data.iter().find(|&&v| (v as usize) >= classes) {
            return Err(Error::Data(format!(
                "label value {bad} out of range for {classes} classes"
            )));
        }
        Ok(LabelMap { data, classes })
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Per-pixel class probabilities `[B, C, H, W]`; channels sum to 1.
#[derive(Debug, Clone)]
pub struct ProbMap {
    data: Array4<f64>,
}

impl ProbMap {
    pub const SUM_TOL: f64 = 1e-5;

    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (b, c, h, w) = (data.shape()[0], data.shape()[1], data.shape()[2], data.shape()[3]);
        for v in data.iter() {
            if !v.is_finite() || *v < -Self::SUM_TOL || *v > 1.0 + Self::SUM_TOL {
                return Err(Error::Data(format!("probability {v} outside [0, 1]")));
            }
        }
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let sum: f64 = (0..c).map(|ci| data[[bi, ci, hi, wi]]).sum();
                    if (sum - 1.0).abs() > Self::SUM_TOL {
                        return Err(Error::Data(format!(
                            "channel sum {sum} at ({bi}, {hi}, {wi}) not 1"
                        )));
                    }
                }
            }
        }
        Ok(ProbMap { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn classes(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Nonnegative per-pixel uncertainty `[B, H, W]`.
#[derive(Debug, Clone)]
pub struct UncertaintyMap {
    data: Array3<f64>,
}

impl UncertaintyMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Data(format!("uncertainty {bad} must be finite and >= 0")));
        }
        Ok(UncertaintyMap { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    /// Spatial mean per batch element; the image-level difficulty score.
    pub fn mean_per_image(&self) -> Vec<f64> {
        let (b, h, w) = (
            self.data.shape()[0],
            self.data.shape()[1],
            self.data.shape()[2],
        );
        (0..b)
            .map(|bi| {
                self.data
                    .index_axis(ndarray::Axis(0), bi)
                    .sum()
                    / (h * w) as f64
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn image_batch_rejects_bad_sizes() {
        let ok = Array4::<f64>::zeros((1, 1, 64, 64));
        assert!(ImageBatch::new(ok, DomainTag::Source).is_ok());
        let bad = Array4::<f64>::zeros((1, 1, 60, 64));
        assert!(ImageBatch::new(bad, DomainTag::Source).is_err());
        let bad_ch = Array4::<f64>::zeros((1, 3, 64, 64));
        assert!(ImageBatch::new(bad_ch, DomainTag::Source).is_err());
    }

    #[test]
    fn image_batch_rejects_nonfinite() {
        let mut data = Array4::<f64>::zeros((1, 1, 8, 8));
        data[[0, 0, 0, 0]] = f64::NAN;
        assert!(ImageBatch::new(data, DomainTag::Target).is_err());
    }

    #[test]
    fn label_map_rejects_out_of_range() {
        let data = Array3::<u8>::from_elem((1, 4, 4), 3);
        assert!(LabelMap::new(data.clone(), 3).is_err());
        assert!(LabelMap::new(data, 4).is_ok());
    }

    #[test]
    fn prob_map_enforces_sums() {
        let mut data = Array4::<f64>::from_elem((1, 2, 2, 2), 0.5);
        assert!(ProbMap::new(data.clone()).is_ok());
        data[[0, 0, 0, 0]] = 0.7;
        assert!(ProbMap::new(data).is_err());
    }

    #[test]
    fn uncertainty_rejects_negative() {
        let data = Array3::<f64>::from_elem((1, 2, 2), -0.1);
        assert!(UncertaintyMap::new(data).is_err());
    }

    #[test]
    fn uncertainty_mean_per_image() {
        let mut data = Array3::<f64>::zeros((2, 2, 2));
        data[[1, 0, 0]] = 4.0;
        let u = UncertaintyMap::new(data).unwrap();
        assert_eq!(u.mean_per_image(), vec![0.0, 1.0]);
    }
}
