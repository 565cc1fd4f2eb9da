//! Unsupervised clinical knowledge mask.
//!
//! The mask marks pixels whose intensity changes substantially between the
//! first and last frames of a ground-truth FFA series. No labels involved:
//! it is a thresholded absolute frame difference, optionally area-pooled to
//! the working resolution of a discriminator scale or feature level.

use crate::error::{Error, Result};
use ndarray::Array2;

/// Default difference threshold on the 0–255 intensity scale.
pub const DEFAULT_THRESHOLD: f64 = 45.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Binary,
    Weighted,
}

#[derive(Debug, Clone)]
pub struct KnowledgeMask {
    pub values: Array2<f64>,
    pub kind: MaskKind,
}

impl KnowledgeMask {
    pub fn resolution(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn all_ones(h: usize, w: usize) -> KnowledgeMask {
        KnowledgeMask {
            values: Array2::from_elem((h, w), 1.0),
            kind: MaskKind::Binary,
        }
    }
}

/// Threshold the absolute difference of two frames (values in [0,1]); the
/// threshold is expressed on the 0–255 scale. Strict inequality: a pixel is
/// set only when `|last - first| * 255 > threshold`.
pub fn compute_mask(
    first_frame: &Array2<f64>,
    last_frame: &Array2<f64>,
    threshold: f64,
) -> Result<KnowledgeMask> {
    if first_frame.dim() != last_frame.dim() {
        return Err(Error::Contract(format!(
            "compute_mask: frame shapes differ: {:?} vs {:?}",
            first_frame.dim(),
            last_frame.dim()
        )));
    }
    if threshold < 0.0 {
        return Err(Error::Contract(format!(
            "compute_mask: threshold must be >= 0, got {threshold}"
        )));
    }
    let mut values = Array2::zeros(first_frame.dim());
    ndarray::Zip::from(&mut values)
        .and(first_frame)
        .and(last_frame)
        .for_each(|m, &a, &b| {
            *m = if (b - a).abs() * 255.0 > threshold {
                1.0
            } else {
                0.0
            };
        });
    Ok(KnowledgeMask {
        values,
        kind: MaskKind::Binary,
    })
}

/// Downsampling target: an integral factor or an explicit feature shape.
#[derive(Debug, Clone, Copy)]
pub enum DownsampleTo {
    Factor(usize),
    Shape(usize, usize),
}

/// Area-average pooling of a binary mask. The result is `Weighted`: each cell
/// holds the fraction of set pixels it covers.
pub fn downsample_mask(mask: &KnowledgeMask, target: DownsampleTo) -> Result<KnowledgeMask> {
    if mask.kind != MaskKind::Binary {
        return Err(Error::Contract(
            "downsample_mask: input must be a binary mask".into(),
        ));
    }
    let (h, w) = mask.resolution();
    let (fh, fw) = match target {
        DownsampleTo::Factor(f) => {
            if ![1, 2, 4].contains(&f) {
                return Err(Error::Contract(format!(
                    "downsample_mask: factor must be 1, 2 or 4, got {f}"
                )));
            }
            if h % f != 0 || w % f != 0 {
                return Err(Error::Contract(format!(
                    "downsample_mask: factor {f} does not divide {h}x{w}"
                )));
            }
            (f, f)
        }
        DownsampleTo::Shape(th, tw) => {
            if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
                return Err(Error::Contract(format!(
                    "downsample_mask: target {th}x{tw} does not divide {h}x{w}"
                )));
            }
            (h / th, w / tw)
        }
    };
    let (oh, ow) = (h / fh, w / fw);
    let mut out = Array2::zeros((oh, ow));
    let inv = 1.0 / (fh * fw) as f64;
    for i in 0..oh {
        for j in 0..ow {
            let mut s = 0.0;
            for di in 0..fh {
                for dj in 0..fw {
                    s += mask.values[[i * fh + di, j * fw + dj]];
                }
            }
            out[[i, j]] = s * inv;
        }
    }
    Ok(KnowledgeMask {
        values: out,
        kind: MaskKind::Weighted,
    })
}

/// Mean of the mask values, in [0,1].
pub fn mask_coverage(mask: &KnowledgeMask) -> f64 {
    mask.values.mean().unwrap_or(0.0)
}

/// Weighted → binary by thresholding at 0.5 (strict), for pixel-space
/// multiplication in the knowledge-aware discriminator terms.
pub fn binarize(mask: &KnowledgeMask, threshold: f64) -> KnowledgeMask {
    KnowledgeMask {
        values: mask.values.mapv(|v| if v > threshold { 1.0 } else { 0.0 }),
        kind: MaskKind::Binary,
    }
}
