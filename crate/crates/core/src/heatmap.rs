//! Heatmap normalization, thresholding into binary masks, and mask IO.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::GrayImage;
use crate::tensor::Tensor;

/// Default segmentation threshold on normalized scores.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lime,
    Shap,
    GradCam,
    Lrp,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Lime, Method::Shap, Method::GradCam, Method::Lrp];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lime => "lime",
            Method::Shap => "shap",
            Method::GradCam => "gradcam",
            Method::Lrp => "lrp",
        }
    }

    /// Grad-CAM maps are already nonnegative; the signed methods keep only
    /// positive evidence.
    pub fn default_normalization(self) -> NormalizeMode {
        match self {
            Method::GradCam => NormalizeMode::MinMax,
            Method::Lime | Method::Shap | Method::Lrp => NormalizeMode::PositiveOnly,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown method `{s}`; supported methods: lime, shap, gradcam, lrp"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    MinMax,
    PositiveOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub mode: NormalizeMode,
    /// Range of the scores the affine map was fitted on.
    pub min: f64,
    pub max: f64,
    /// The fitted range was empty; every output score is 0.
    pub degenerate: bool,
}

/// Per-pixel scores at input resolution, tagged with where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub scores: Tensor,
    pub method: Method,
    pub class_index: usize,
    pub normalization: Option<NormalizationRecord>,
}

impl Heatmap {
    pub fn new(scores: Tensor, method: Method, class_index: usize) -> Result<Self> {
        if scores.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "heatmap scores must be [H,W], got {:?}",
                scores.shape()
            )));
        }
        if !scores.all_finite() {
            return Err(Error::NonFinite(format!(
                "{method} heatmap for class {class_index}"
            )));
        }
        Ok(Heatmap {
            scores,
            method,
            class_index,
            normalization: None,
        })
    }

    pub fn height(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn is_degenerate(&self) -> bool {
        self.normalization.is_some_and(|n| n.degenerate)
    }
}

/// Affine rescale to `[0, 1]`. `PositiveOnly` clamps negative scores to zero
/// first. A constant input maps to all zeros and is flagged degenerate.
pub fn normalize(h: &Heatmap, mode: NormalizeMode) -> Heatmap {
    let clamped;
    let source = match mode {
        NormalizeMode::MinMax => &h.scores,
        NormalizeMode::PositiveOnly => {
            clamped = h.scores.map(|v| v.max(0.0));
            &clamped
        }
    };
    let (lo, hi) = (source.min(), source.max());
    let span = hi - lo;
    let degenerate = span.is_nan() || span <= 0.0;
    let scores = if degenerate {
        Tensor::zeros(source.shape())
    } else {
        source.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
    };
    Heatmap {
        scores,
        method: h.method,
        class_index: h.class_index,
        normalization: Some(NormalizationRecord {
            mode,
            min: lo,
            max: hi,
            degenerate,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    Predicted,
    GroundTruth,
}

/// Strictly binary per-pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    pub source: MaskSource,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>, source: MaskSource) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} mask needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(SegmentationMask {
            height,
            width,
            bits,
            source,
        })
    }

    pub fn empty(height: usize, width: usize, source: MaskSource) -> Self {
        SegmentationMask {
            height,
            width,
            bits: vec![false; height * width],
            source,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw(
            vec![self.height, self.width],
            self.bits
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    /// 0/255 graymap.
    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Pixels `>= 128` are foreground.
    pub fn from_image(img: &GrayImage, source: MaskSource) -> Self {
        SegmentationMask {
            height: img.height,
            width: img.width,
            bits: img.pixels.iter().map(|&p| p >= 128).collect(),
            source,
        }
    }
}

/// Foreground wherever the normalized score reaches `tau`.
pub fn threshold(h: &Heatmap, tau: f64) -> Result<SegmentationMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!(
            "tau must lie in [0,1], got {tau}"
        )));
    }
    if h.normalization.is_none() {
        return Err(Error::InvalidArgument(
            "threshold needs a normalized heatmap".into(),
        ));
    }
    let bits = h.scores.data().iter().map(|&s| s >= tau).collect();
    SegmentationMask::new(h.height(), h.width(), bits, MaskSource::Predicted)
}

pub fn load_mask(path: impl AsRef<Path>, source: MaskSource) -> Result<SegmentationMask> {
    Ok(SegmentationMask::from_image(
        &GrayImage::load(path)?,
        source,
    ))
}

pub fn save_mask(mask: &SegmentationMask, path: impl AsRef<Path>) -> Result<()> {
    mask.to_image().save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hm(h: usize, w: usize, v: &[f64]) -> Heatmap {
        Heatmap::new(Tensor::new(vec![h, w], v.to_vec()).unwrap(), Method::Lrp, 0).unwrap()
    }

    #[test]
    fn minmax_cases() {
        let n = normalize(&hm(1, 3, &[-2.0, 0.0, 2.0]), NormalizeMode::MinMax);
        assert_eq!(n.scores.data(), &[0.0, 0.5, 1.0]);
        let already = hm(1, 4, &[0.0, 0.25, 1.0, 0.6]);
        assert_eq!(
            normalize(&already, NormalizeMode::MinMax).scores,
            already.scores
        );
        let flat = normalize(&hm(2, 2, &[3.0; 4]), NormalizeMode::MinMax);
        assert!(flat.is_degenerate());
        assert_eq!(flat.scores.data(), &[0.0; 4]);
    }

    #[test]
    fn positive_only_clamps() {
        let n = normalize(
            &hm(1, 4, &[-5.0, 0.0, 1.0, 2.0]),
            NormalizeMode::PositiveOnly,
        );
        assert_eq!(n.scores.data(), &[0.0, 0.0, 0.5, 1.0]);
        let neg = normalize(&hm(1, 2, &[-1.0, -3.0]), NormalizeMode::PositiveOnly);
        assert!(neg.is_degenerate());
    }

    #[test]
    fn threshold_cases() {
        let n = normalize(&hm(1, 3, &[0.0, 0.5, 1.0]), NormalizeMode::MinMax);
        assert_eq!(threshold(&n, 0.5).unwrap().bits(), &[false, true, true]);
        assert_eq!(threshold(&n, 0.0).unwrap().count(), 3);
        let top = normalize(&hm(1, 4, &[3.0, 9.0, 1.0, 9.0]), NormalizeMode::MinMax);
        assert_eq!(
            threshold(&top, 1.0).unwrap().bits(),
            &[false, true, false, true]
        );
        assert!(threshold(&n, 1.5).is_err());
        assert!(threshold(&n, -0.1).is_err());
        assert!(threshold(&hm(1, 1, &[0.0]), 0.5).is_err());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("GradCAM".parse::<Method>().unwrap(), Method::GradCam);
        let err = "smoothgrad".parse::<Method>().unwrap_err().to_string();
        for m in ["lime", "shap", "gradcam", "lrp"] {
            assert!(err.contains(m));
        }
    }

    #[test]
    fn mask_io_exhaustive_2x2() {
        let dir = tempfile::tempdir().unwrap();
        for code in 0u8..16 {
            let bits = (0..4).map(|i| code >> i & 1 == 1).collect();
            let m = SegmentationMask::new(2, 2, bits, MaskSource::GroundTruth).unwrap();
            let path = dir.path().join(format!("m{code}.pgm"));
            save_mask(&m, &path).unwrap();
            assert_eq!(load_mask(&path, MaskSource::GroundTruth).unwrap(), m);
        }
    }

    #[test]
    fn all_white_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.pgm");
        GrayImage::new(3, 2, vec![255; 6])
            .unwrap()
            .save(&path)
            .unwrap();
        assert_eq!(
            load_mask(&path, MaskSource::GroundTruth).unwrap().count(),
            6
        );

        let bytes = b"P5\n3 2\n255\n\xff\xff".to_vec();
        std::fs::write(&path, &bytes).unwrap();
        match load_mask(&path, MaskSource::GroundTruth) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn threshold_is_monotone(
            vals in prop::collection::vec(-10.0f64..10.0, 16),
            t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let n = normalize(&hm(4, 4, &vals), NormalizeMode::MinMax);
            let a = threshold(&n, lo).unwrap();
            let b = threshold(&n, hi).unwrap();
            for (x, y) in a.bits().iter().zip(b.bits()) {
                prop_assert!(!*y || *x);
            }
        }

        #[test]
        fn minmax_idempotent_and_order_preserving(vals in prop::collection::vec(-1e3f64..1e3, 12)) {
            let n1 = normalize(&hm(3, 4, &vals), NormalizeMode::MinMax);
            let n2 = normalize(&n1, NormalizeMode::MinMax);
            prop_assert_eq!(&n1.scores, &n2.scores);
            for i in 0..12 {
                for j in 0..12 {
                    if vals[i] < vals[j] {
                        prop_assert!(n1.scores.data()[i] <= n1.scores.data()[j]);
                    }
                }
            }
        }
    }
}
