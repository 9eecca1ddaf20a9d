//! Sample synthesis: composition, trimap generation, crops and augmentation.

mod augment;
mod manifest;
mod stream;
mod synthetic;

pub use augment::{augment, rotate_sample_quarter_turns, AffineParams};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry};
pub use stream::{sample_stream, SampleStream, Split};
pub use synthetic::{make_synthetic, SyntheticSpec};

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::morphology::erode;
use crate::types::{AlphaMatte, ImageRgb, MattingSample, Trimap, TrimapLabel};

/// Alpha at or above this is treated as known foreground when generating
/// trimaps; transparent datasets have few such pixels by design.
pub const FG_THRESHOLD: f32 = 1.0 - 1e-6;
/// Alpha at or below this is treated as known background.
pub const BG_THRESHOLD: f32 = 1e-6;

/// Augmentation and cropping knobs for the training stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    /// Square crop side; must be divisible by the encoder input divisor.
    pub crop_size: usize,
    pub trimap_kernel_min: usize,
    pub trimap_kernel_max: usize,
    pub flip_probability: f64,
    pub scale_range: (f64, f64),
    /// Rotation drawn uniformly from `[-rotation_range, rotation_range]` degrees.
    pub rotation_range: f64,
    /// Shear drawn uniformly from `[-shear_range, shear_range]` degrees, capped at 10.
    pub shear_range: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            crop_size: 64,
            trimap_kernel_min: 1,
            trimap_kernel_max: 30,
            flip_probability: 0.5,
            scale_range: (0.75, 1.25),
            rotation_range: 15.0,
            shear_range: 0.0,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trimap_kernel_min < 1 || self.trimap_kernel_min > self.trimap_kernel_max {
            return Err(Error::InvalidConfig(format!(
                "trimap kernel range [{}, {}] must satisfy 1 <= min <= max",
                self.trimap_kernel_min, self.trimap_kernel_max
            )));
        }
        let divisor = crate::encoder::MIN_INPUT_DIVISOR;
        if self.crop_size == 0 || self.crop_size % divisor != 0 {
            return Err(Error::InvalidConfig(format!(
                "crop_size {} must be a positive multiple of {divisor}",
                self.crop_size
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::InvalidConfig(format!(
                "flip_probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.0 > self.scale_range.1 {
            return Err(Error::InvalidConfig(format!(
                "scale_range {:?} must satisfy 0 < min <= max",
                self.scale_range
            )));
        }
        if self.rotation_range < 0.0 {
            return Err(Error::InvalidConfig("rotation_range must be >= 0".into()));
        }
        if !(0.0..=10.0).contains(&self.shear_range) {
            return Err(Error::InvalidConfig("shear_range must lie in [0, 10]".into()));
        }
        Ok(())
    }
}

/// Composites `out = alpha * fg + (1 - alpha) * bg` per pixel and channel.
/// The output is clamped to `[0, 1]` purely to absorb float round-off.
pub fn composite(fg: &ImageRgb, bg: &ImageRgb, alpha: &AlphaMatte) -> Result<ImageRgb> {
    let shape = fg.shape2();
    for (name, other) in [("background", bg.shape2()), ("alpha", alpha.shape2())] {
        if other != shape {
            return Err(Error::ShapeMismatch {
                context: format!("composite {name}"),
                expected: vec![shape.0, shape.1],
                actual: vec![other.0, other.1],
            });
        }
    }
    let (h, w) = shape;
    let mut data = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let a = alpha.data[(r, c)];
            for ch in 0..3 {
                let v = a * fg.data[(r, c, ch)] + (1.0 - a) * bg.data[(r, c, ch)];
                data[(r, c, ch)] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(ImageRgb::new(data))
}

/// Generates a trimap from an alpha matte by eroding the known regions:
/// FG = erode(alpha >= FG_THRESHOLD, erode_radius),
/// BG = erode(alpha <= BG_THRESHOLD, dilate_radius), UNK = the rest.
pub fn generate_trimap(alpha: &AlphaMatte, erode_radius: usize, dilate_radius: usize) -> Trimap {
    let fg_ind = alpha.data.map(|&v| v >= FG_THRESHOLD);
    let bg_ind = alpha.data.map(|&v| v <= BG_THRESHOLD);
    let fg = erode(&fg_ind, erode_radius);
    let bg = erode(&bg_ind, dilate_radius);
    let labels = ndarray::Zip::from(&fg).and(&bg).map_collect(|&f, &b| {
        if f {
            TrimapLabel::Fg as u8
        } else if b {
            TrimapLabel::Bg as u8
        } else {
            TrimapLabel::Unk as u8
        }
    });
    Trimap::from_indices(labels).expect("labels constructed from the three-symbol alphabet")
}

/// Symmetric reflection index for padding (edge pixel included once).
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut x = i;
    loop {
        if x < 0 {
            x = -x - 1;
        } else if x >= n {
            x = 2 * n - 1 - x;
        } else {
            return x as usize;
        }
    }
}

fn pad_reflect_rgb(image: &ImageRgb, target_h: usize, target_w: usize) -> ImageRgb {
    let (h, w) = image.shape2();
    let (top, left) = ((target_h - h) / 2, (target_w - w) / 2);
    let data = Array3::from_shape_fn((target_h, target_w, 3), |(r, c, ch)| {
        let sr = reflect_index(r as isize - top as isize, h);
        let sc = reflect_index(c as isize - left as isize, w);
        image.data[(sr, sc, ch)]
    });
    ImageRgb::new(data)
}

fn pad_reflect_plane(plane: &Array2<f32>, target_h: usize, target_w: usize) -> Array2<f32> {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let (top, left) = ((target_h - h) / 2, (target_w - w) / 2);
    Array2::from_shape_fn((target_h, target_w), |(r, c)| {
        let sr = reflect_index(r as isize - top as isize, h);
        let sc = reflect_index(c as isize - left as isize, w);
        plane[(sr, sc)]
    })
}

fn pad_reflect_trimap(trimap: &Trimap, target_h: usize, target_w: usize) -> Trimap {
    let (h, w) = trimap.shape2();
    let (top, left) = ((target_h - h) / 2, (target_w - w) / 2);
    let labels = Array2::from_shape_fn((target_h, target_w), |(r, c)| {
        let sr = reflect_index(r as isize - top as isize, h);
        let sc = reflect_index(c as isize - left as isize, w);
        trimap.indices()[(sr, sc)]
    });
    Trimap::from_indices(labels).expect("padding preserves the label alphabet")
}

fn pad_sample_to(sample: &MattingSample, target_h: usize, target_w: usize) -> MattingSample {
    MattingSample {
        image: pad_reflect_rgb(&sample.image, target_h, target_w),
        trimap: pad_reflect_trimap(&sample.trimap, target_h, target_w),
        gt_alpha: AlphaMatte::new(pad_reflect_plane(&sample.gt_alpha.data, target_h, target_w)),
        gt_foreground: pad_reflect_rgb(&sample.gt_foreground, target_h, target_w),
        gt_background: pad_reflect_rgb(&sample.gt_background, target_h, target_w),
        synthesized: sample.synthesized,
    }
}

fn crop_rgb(image: &ImageRgb, top: usize, left: usize, size: usize) -> ImageRgb {
    ImageRgb::new(
        image
            .data
            .slice(ndarray::s![top..top + size, left..left + size, ..])
            .to_owned(),
    )
}

/// Crops a square window centered on a uniformly chosen UNK pixel, clipped to
/// bounds. Samples smaller than the crop are reflection-padded first.
pub fn unknown_centered_crop<R: Rng>(
    sample: &MattingSample,
    crop_size: usize,
    rng: &mut R,
) -> Result<MattingSample> {
    let (h, w) = sample.image.shape2();
    let padded;
    let sample = if h < crop_size || w < crop_size {
        padded = pad_sample_to(sample, h.max(crop_size), w.max(crop_size));
        &padded
    } else {
        sample
    };
    let (h, w) = sample.image.shape2();

    let unknowns = sample.trimap.unknown_pixels();
    if unknowns.is_empty() {
        return Err(Error::NoUnknownRegion);
    }
    let (cr, cc) = unknowns[rng.gen_range(0..unknowns.len())];
    let top = (cr as isize - crop_size as isize / 2).clamp(0, (h - crop_size) as isize) as usize;
    let left = (cc as isize - crop_size as isize / 2).clamp(0, (w - crop_size) as isize) as usize;

    let trimap = Trimap::from_indices(
        sample
            .trimap
            .indices()
            .slice(ndarray::s![top..top + crop_size, left..left + crop_size])
            .to_owned(),
    )
    .expect("cropping preserves the label alphabet");
    let gt_alpha = AlphaMatte::new(
        sample
            .gt_alpha
            .data
            .slice(ndarray::s![top..top + crop_size, left..left + crop_size])
            .to_owned(),
    );
    Ok(MattingSample {
        image: crop_rgb(&sample.image, top, left, crop_size),
        trimap,
        gt_alpha,
        gt_foreground: crop_rgb(&sample.gt_foreground, top, left, crop_size),
        gt_background: crop_rgb(&sample.gt_background, top, left, crop_size),
        synthesized: sample.synthesized,
    })
}
