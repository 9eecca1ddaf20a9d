//! Geometric augmentation: flip, scale, rotation and shear with identical
//! parameters on every plane. Alpha is interpolated bilinearly and clamped;
//! the trimap is regenerated from the transformed alpha, never interpolated.
//! For synthesized samples the image is recomposed from the transformed
//! planes so the composition identity keeps holding exactly.

use ndarray::{Array2, Array3};
use rand::Rng;

use super::{composite, generate_trimap, AugmentationConfig};
use crate::types::{AlphaMatte, ImageRgb, MattingSample};

/// One draw of augmentation parameters, applied identically to all planes.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub flip_horizontal: bool,
    pub scale: f64,
    pub rotation_degrees: f64,
    pub shear_degrees: f64,
    pub erode_radius: usize,
    pub dilate_radius: usize,
}

impl AffineParams {
    pub fn is_identity(&self) -> bool {
        !self.flip_horizontal
            && self.scale == 1.0
            && self.rotation_degrees == 0.0
            && self.shear_degrees == 0.0
    }

    pub fn draw<R: Rng>(cfg: &AugmentationConfig, rng: &mut R) -> Self {
        let flip_horizontal = cfg.flip_probability > 0.0 && rng.gen_bool(cfg.flip_probability);
        let scale = if cfg.scale_range.0 == cfg.scale_range.1 {
            cfg.scale_range.0
        } else {
            rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1)
        };
        let rotation_degrees = if cfg.rotation_range == 0.0 {
            0.0
        } else {
            rng.gen_range(-cfg.rotation_range..=cfg.rotation_range)
        };
        let shear_degrees = if cfg.shear_range == 0.0 {
            0.0
        } else {
            rng.gen_range(-cfg.shear_range..=cfg.shear_range)
        };
        let erode_radius = rng.gen_range(cfg.trimap_kernel_min..=cfg.trimap_kernel_max);
        let dilate_radius = rng.gen_range(cfg.trimap_kernel_min..=cfg.trimap_kernel_max);
        AffineParams {
            flip_horizontal,
            scale,
            rotation_degrees,
            shear_degrees,
            erode_radius,
            dilate_radius,
        }
    }
}

fn flip_plane(plane: &Array2<f32>) -> Array2<f32> {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    Array2::from_shape_fn((h, w), |(r, c)| plane[(r, w - 1 - c)])
}

fn flip_rgb(image: &ImageRgb) -> ImageRgb {
    let (h, w) = image.shape2();
    ImageRgb::new(Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
        image.data[(r, w - 1 - c, ch)]
    }))
}

fn bilinear(plane: &Array2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    let top = plane[(y0, x0)] * (1.0 - fx) + plane[(y0, x1)] * fx;
    let bot = plane[(y1, x0)] * (1.0 - fx) + plane[(y1, x1)] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Inverse of `R(theta) * Shear(phi) * scale` about the plane center.
fn inverse_matrix(scale: f64, rotation_degrees: f64, shear_degrees: f64) -> [[f64; 2]; 2] {
    let theta = rotation_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let shear = shear_degrees.to_radians().tan();
    // Forward matrix in (x, y) coordinates.
    let m = [
        [scale * (cos + 0.0), scale * (cos * shear - sin)],
        [scale * sin, scale * (sin * shear + cos)],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ]
}

fn warp_plane(plane: &Array2<f32>, minv: &[[f64; 2]; 2]) -> Array2<f32> {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Array2::from_shape_fn((h, w), |(r, c)| {
        let dx = c as f64 - cx;
        let dy = r as f64 - cy;
        let sx = minv[0][0] * dx + minv[0][1] * dy + cx;
        let sy = minv[1][0] * dx + minv[1][1] * dy + cy;
        bilinear(plane, sy, sx)
    })
}

fn warp_rgb(image: &ImageRgb, minv: &[[f64; 2]; 2]) -> ImageRgb {
    let (h, w) = image.shape2();
    let mut data = Array3::zeros((h, w, 3));
    for ch in 0..3 {
        let plane = image.data.index_axis(ndarray::Axis(2), ch).to_owned();
        let warped = warp_plane(&plane, minv);
        data.slice_mut(ndarray::s![.., .., ch]).assign(&warped);
    }
    ImageRgb::new(data)
}

fn quarter_turn_plane(plane: &Array2<f32>, turns: usize) -> Array2<f32> {
    let mut out = plane.clone();
    for _ in 0..turns % 4 {
        let (h, w) = (out.shape()[0], out.shape()[1]);
        // 90 degrees counter-clockwise: out[r, c] = in[c, w - 1 - r].
        out = Array2::from_shape_fn((w, h), |(r, c)| out[(c, w - 1 - r)]);
    }
    out
}

fn quarter_turn_rgb(image: &ImageRgb, turns: usize) -> ImageRgb {
    let mut planes = Vec::new();
    for ch in 0..3 {
        let plane = image.data.index_axis(ndarray::Axis(2), ch).to_owned();
        planes.push(quarter_turn_plane(&plane, turns));
    }
    let (h, w) = (planes[0].shape()[0], planes[0].shape()[1]);
    let mut data = Array3::zeros((h, w, 3));
    for (ch, plane) in planes.iter().enumerate() {
        data.slice_mut(ndarray::s![.., .., ch]).assign(plane);
    }
    ImageRgb::new(data)
}

/// Rotates a sample by exact quarter turns (pixel permutation, no
/// interpolation), regenerating the trimap from the rotated alpha.
pub fn rotate_sample_quarter_turns(
    sample: &MattingSample,
    turns: usize,
    erode_radius: usize,
    dilate_radius: usize,
) -> MattingSample {
    let gt_alpha = AlphaMatte::new(quarter_turn_plane(&sample.gt_alpha.data, turns));
    let gt_foreground = quarter_turn_rgb(&sample.gt_foreground, turns);
    let gt_background = quarter_turn_rgb(&sample.gt_background, turns);
    let trimap = generate_trimap(&gt_alpha, erode_radius, dilate_radius);
    let image = if sample.synthesized {
        composite(&gt_foreground, &gt_background, &gt_alpha)
            .expect("rotated planes share one shape")
    } else {
        quarter_turn_rgb(&sample.image, turns)
    };
    MattingSample {
        image,
        trimap,
        gt_alpha,
        gt_foreground,
        gt_background,
        synthesized: sample.synthesized,
    }
}

/// Applies one parameter draw to every plane of the sample.
pub fn apply_affine(sample: &MattingSample, params: &AffineParams) -> MattingSample {
    if params.is_identity() {
        return sample.clone();
    }

    let mut gt_alpha = sample.gt_alpha.clone();
    let mut gt_foreground = sample.gt_foreground.clone();
    let mut gt_background = sample.gt_background.clone();
    let mut image = sample.image.clone();

    if params.flip_horizontal {
        gt_alpha = AlphaMatte::new(flip_plane(&gt_alpha.data));
        gt_foreground = flip_rgb(&gt_foreground);
        gt_background = flip_rgb(&gt_background);
        image = flip_rgb(&image);
    }

    let continuous = params.scale != 1.0
        || params.rotation_degrees != 0.0
        || params.shear_degrees != 0.0;
    if continuous {
        let quarter = params.rotation_degrees.rem_euclid(90.0) == 0.0
            && params.scale == 1.0
            && params.shear_degrees == 0.0;
        if quarter {
            let turns = (params.rotation_degrees.rem_euclid(360.0) / 90.0) as usize;
            gt_alpha = AlphaMatte::new(quarter_turn_plane(&gt_alpha.data, turns));
            gt_foreground = quarter_turn_rgb(&gt_foreground, turns);
            gt_background = quarter_turn_rgb(&gt_background, turns);
            image = quarter_turn_rgb(&image, turns);
        } else {
            let minv = inverse_matrix(params.scale, params.rotation_degrees, params.shear_degrees);
            gt_alpha = AlphaMatte::new(
                warp_plane(&gt_alpha.data, &minv).map(|v| v.clamp(0.0, 1.0)),
            );
            gt_foreground = warp_rgb(&gt_foreground, &minv);
            gt_background = warp_rgb(&gt_background, &minv);
            image = warp_rgb(&image, &minv);
        }
    }

    let trimap = generate_trimap(&gt_alpha, params.erode_radius, params.dilate_radius);
    let image = if sample.synthesized {
        composite(&gt_foreground, &gt_background, &gt_alpha)
            .expect("transformed planes share one shape")
    } else {
        image
    };
    MattingSample {
        image,
        trimap,
        gt_alpha,
        gt_foreground,
        gt_background,
        synthesized: sample.synthesized,
    }
}

/// Draws parameters from the config and applies them.
pub fn augment<R: Rng>(
    sample: &MattingSample,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> MattingSample {
    let params = AffineParams::draw(cfg, rng);
    apply_affine(sample, &params)
}
