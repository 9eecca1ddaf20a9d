//! Core matting data types: images, alpha mattes, trimaps and samples.
//!
//! All planes are stored as normalized real values in `[0, 1]`. Trimaps use
//! the categorical indices FG=0, BG=1, UNK=2 internally and the conventional
//! 0/128/255 grayscale encoding on disk (BG=0, UNK=128, FG=255).

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Trimap category. The discriminants are the internal categorical indices
/// and double as the tri-token indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TrimapLabel {
    Fg = 0,
    Bg = 1,
    Unk = 2,
}

impl TrimapLabel {
    pub fn from_index(idx: u8) -> Option<Self> {
        match idx {
            0 => Some(TrimapLabel::Fg),
            1 => Some(TrimapLabel::Bg),
            2 => Some(TrimapLabel::Unk),
            _ => None,
        }
    }
}

/// 8-bit grayscale codes used for trimap planes on disk.
pub const TRIMAP_CODE_BG: u8 = 0;
pub const TRIMAP_CODE_UNK: u8 = 128;
pub const TRIMAP_CODE_FG: u8 = 255;

/// RGB image with shape `(height, width, 3)`, values normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub data: Array3<f32>,
}

impl ImageRgb {
    pub fn new(data: Array3<f32>) -> Self {
        let shape = data.shape();
        assert!(
            shape[0] >= 1 && shape[1] >= 1 && shape[2] == 3,
            "ImageRgb requires (h >= 1, w >= 1, 3), got {shape:?}"
        );
        ImageRgb { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageRgb::new(Array3::zeros((height, width, 3)))
    }

    /// Constant-color image, useful in tests and fixtures.
    pub fn splat(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Array3::zeros((height, width, 3));
        for c in 0..3 {
            data.slice_mut(ndarray::s![.., .., c]).fill(rgb[c]);
        }
        ImageRgb::new(data)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn shape2(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
}

/// Per-pixel opacity in `[0, 1]`, shape `(height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMatte {
    pub data: Array2<f32>,
}

impl AlphaMatte {
    pub fn new(data: Array2<f32>) -> Self {
        let shape = data.shape();
        assert!(
            shape[0] >= 1 && shape[1] >= 1,
            "AlphaMatte requires (h >= 1, w >= 1), got {shape:?}"
        );
        AlphaMatte { data }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn shape2(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
}

/// Three-valued guidance map. Stored as the categorical indices of
/// [`TrimapLabel`]; construction rejects any other value.
#[derive(Debug, Clone, PartialEq)]
pub struct Trimap {
    labels: Array2<u8>,
}

impl Trimap {
    /// Builds a trimap from categorical indices (FG=0, BG=1, UNK=2).
    pub fn from_indices(labels: Array2<u8>) -> Result<Self> {
        for ((r, c), &v) in labels.indexed_iter() {
            if TrimapLabel::from_index(v).is_none() {
                return Err(Error::InvalidTrimapValue {
                    value: v,
                    row: r,
                    col: c,
                });
            }
        }
        Ok(Trimap { labels })
    }

    pub fn filled(height: usize, width: usize, label: TrimapLabel) -> Self {
        Trimap {
            labels: Array2::from_elem((height, width), label as u8),
        }
    }

    pub fn label(&self, row: usize, col: usize) -> TrimapLabel {
        TrimapLabel::from_index(self.labels[(row, col)]).expect("labels are validated")
    }

    pub fn set(&mut self, row: usize, col: usize, label: TrimapLabel) {
        self.labels[(row, col)] = label as u8;
    }

    pub fn indices(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn shape2(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Row-major list of UNK pixel coordinates.
    pub fn unknown_pixels(&self) -> Vec<(usize, usize)> {
        self.labels
            .indexed_iter()
            .filter(|(_, &v)| v == TrimapLabel::Unk as u8)
            .map(|((r, c), _)| (r, c))
            .collect()
    }

    pub fn count_label(&self, label: TrimapLabel) -> usize {
        self.labels.iter().filter(|&&v| v == label as u8).count()
    }

    /// Binary mask of the UNK region as f32 (1.0 on UNK pixels).
    pub fn unknown_mask(&self) -> Array2<f32> {
        self.labels.map(|&v| if v == TrimapLabel::Unk as u8 { 1.0 } else { 0.0 })
    }
}

/// Binary union of FG and UNK labels: `mask(p) = 1` iff the trimap is not BG.
#[derive(Debug, Clone, PartialEq)]
pub struct NonBackgroundMask {
    pub mask: Array2<u8>,
}

impl NonBackgroundMask {
    pub fn from_trimap(trimap: &Trimap) -> Self {
        let mask = trimap
            .indices()
            .map(|&v| if v == TrimapLabel::Bg as u8 { 0 } else { 1 });
        NonBackgroundMask { mask }
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[1]
    }
}

/// One training/evaluation sample: image, trimap, ground-truth alpha and the
/// foreground/background planes it was composed from.
#[derive(Debug, Clone)]
pub struct MattingSample {
    pub image: ImageRgb,
    pub trimap: Trimap,
    pub gt_alpha: AlphaMatte,
    pub gt_foreground: ImageRgb,
    pub gt_background: ImageRgb,
    /// True when `image` was produced by compositing `gt_foreground` over
    /// `gt_background` with `gt_alpha`; enables the reconstruction check.
    pub synthesized: bool,
}

/// A violated sample invariant, naming the plane and the first offending pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub plane: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.plane, self.message)
    }
}

fn check_unit_range_rgb(plane: &str, image: &ImageRgb, out: &mut Vec<Violation>) {
    for ((r, c, ch), &v) in image.data.indexed_iter() {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            out.push(Violation {
                plane: plane.to_string(),
                message: format!("value {v} out of [0, 1] at ({r}, {c}) channel {ch}"),
            });
            return;
        }
    }
}

/// Checks every type invariant of a [`MattingSample`]. Returns one entry per
/// violated invariant; an empty list means the sample is well formed.
pub fn validate_sample(sample: &MattingSample) -> Vec<Violation> {
    let mut out = Vec::new();
    let reference = sample.image.shape2();

    for (plane, shape) in [
        ("trimap", sample.trimap.shape2()),
        ("gt_alpha", sample.gt_alpha.shape2()),
        ("gt_foreground", sample.gt_foreground.shape2()),
        ("gt_background", sample.gt_background.shape2()),
    ] {
        if shape != reference {
            out.push(Violation {
                plane: plane.to_string(),
                message: format!("spatial shape {shape:?} does not match image {reference:?}"),
            });
        }
    }

    check_unit_range_rgb("image", &sample.image, &mut out);
    check_unit_range_rgb("gt_foreground", &sample.gt_foreground, &mut out);
    check_unit_range_rgb("gt_background", &sample.gt_background, &mut out);

    for ((r, c), &v) in sample.gt_alpha.data.indexed_iter() {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            out.push(Violation {
                plane: "gt_alpha".to_string(),
                message: format!("value {v} out of [0, 1] at ({r}, {c})"),
            });
            break;
        }
    }

    if sample.synthesized && sample.gt_alpha.shape2() == reference {
        let (h, w) = reference;
        'outer: for r in 0..h {
            for c in 0..w {
                let a = sample.gt_alpha.data[(r, c)];
                for ch in 0..3 {
                    let f = sample.gt_foreground.data[(r, c, ch)];
                    let b = sample.gt_background.data[(r, c, ch)];
                    let expected = a * f + (1.0 - a) * b;
                    let actual = sample.image.data[(r, c, ch)];
                    if (expected - actual).abs() > 1e-6 {
                        out.push(Violation {
                            plane: "image".to_string(),
                            message: format!(
                                "composition mismatch at ({r}, {c}) channel {ch}: \
                                 expected {expected}, got {actual}"
                            ),
                        });
                        break 'outer;
                    }
                }
            }
        }
    }

    out
}

/// Encodes a trimap with the conventional grayscale codes BG=0, UNK=128, FG=255.
pub fn trimap_encode(trimap: &Trimap) -> Array2<u8> {
    trimap.indices().map(|&v| match v {
        v if v == TrimapLabel::Fg as u8 => TRIMAP_CODE_FG,
        v if v == TrimapLabel::Bg as u8 => TRIMAP_CODE_BG,
        _ => TRIMAP_CODE_UNK,
    })
}

/// Decodes an 8-bit grayscale plane into a trimap. Any value outside
/// `{0, 128, 255}` is rejected with the offending value and location.
pub fn trimap_decode(plane: &Array2<u8>) -> Result<Trimap> {
    let mut labels = Array2::zeros(plane.raw_dim());
    for ((r, c), &v) in plane.indexed_iter() {
        labels[(r, c)] = match v {
            TRIMAP_CODE_BG => TrimapLabel::Bg as u8,
            TRIMAP_CODE_UNK => TrimapLabel::Unk as u8,
            TRIMAP_CODE_FG => TrimapLabel::Fg as u8,
            other => {
                return Err(Error::InvalidTrimapValue {
                    value: other,
                    row: r,
                    col: c,
                })
            }
        };
    }
    Trimap::from_indices(labels)
}
