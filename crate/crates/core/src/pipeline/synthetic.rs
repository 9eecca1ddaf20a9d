//! Procedural generation of a tiny self-contained matting dataset. Alphas are
//! smooth blob fields with exact-1 cores and exact-0 margins so generated
//! trimaps carry all three labels; foregrounds and backgrounds are smooth
//! color patterns.

use std::f32::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::types::ImageRgb;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_foregrounds: usize,
    pub num_backgrounds: usize,
    /// Square side of every generated plane.
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_foregrounds: 8,
            num_backgrounds: 4,
            size: 96,
            seed: 7,
        }
    }
}

fn blob_alpha(size: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let n = size as f32;
    let blobs: Vec<(f32, f32, f32, f32)> = (0..rng.gen_range(2..=4))
        .map(|i| {
            let cy = rng.gen_range(0.25 * n..0.75 * n);
            let cx = rng.gen_range(0.25 * n..0.75 * n);
            let sigma = rng.gen_range(n / 9.0..n / 5.0);
            // The first blob is always strong enough to produce an exact-1 core.
            let amp = if i == 0 {
                rng.gen_range(1.15..1.4)
            } else {
                rng.gen_range(0.6..1.3)
            };
            (cy, cx, sigma, amp)
        })
        .collect();
    Array2::from_shape_fn((size, size), |(r, c)| {
        let mut field: f32 = 0.0;
        for &(cy, cx, sigma, amp) in &blobs {
            let d2 = (r as f32 - cy).powi(2) + (c as f32 - cx).powi(2);
            field = field.max(amp * (-d2 / (2.0 * sigma * sigma)).exp());
        }
        if field >= 0.92 {
            1.0
        } else if field <= 0.08 {
            0.0
        } else {
            (field - 0.08) / 0.84
        }
    })
}

fn wave_image(size: usize, rng: &mut ChaCha8Rng) -> ImageRgb {
    let n = size as f32;
    let params: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(1.0..4.0) * 2.0 * PI / n,
                rng.gen_range(1.0..4.0) * 2.0 * PI / n,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let data = Array3::from_shape_fn((size, size, 3), |(r, c, ch)| {
        let (wy, wx, py, px) = params[ch];
        0.5 + 0.5 * (wy * r as f32 + py).sin() * (wx * c as f32 + px).cos()
    });
    ImageRgb::new(data)
}

fn gradient_image(size: usize, rng: &mut ChaCha8Rng) -> ImageRgb {
    let n = (size - 1).max(1) as f32;
    let base: [f32; 3] = [rng.gen_range(0.0..0.4), rng.gen_range(0.0..0.4), rng.gen_range(0.0..0.4)];
    let span: [f32; 3] = [rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6)];
    let checker = rng.gen_range(4..10);
    let data = Array3::from_shape_fn((size, size, 3), |(r, c, ch)| {
        let t = (r as f32 + c as f32) / (2.0 * n);
        let tile = ((r / checker) + (c / checker)) % 2 == 0;
        let v = base[ch] + span[ch] * t + if tile { 0.08 } else { 0.0 };
        v.clamp(0.0, 1.0)
    });
    ImageRgb::new(data)
}

/// Emits `root/{fg,alpha,bg}/` populated with `spec` counts of PNG planes.
pub fn make_synthetic(root: &Path, spec: &SyntheticSpec) -> Result<()> {
    if spec.num_foregrounds == 0 || spec.size < 8 {
        return Err(Error::InvalidConfig(
            "synthetic dataset needs at least one foreground and size >= 8".into(),
        ));
    }
    for sub in ["fg", "alpha", "bg"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    for i in 0..spec.num_foregrounds {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i as u64));
        let alpha = blob_alpha(spec.size, &mut rng);
        let fg = wave_image(spec.size, &mut rng);
        let name = format!("fg_{i:03}.png");
        io::save_gray16(&root.join("alpha").join(&name), &alpha)?;
        io::save_rgb(&root.join("fg").join(&name), &fg)?;
    }
    for j in 0..spec.num_backgrounds {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x1000 + j as u64));
        let bg = gradient_image(spec.size, &mut rng);
        io::save_rgb(&root.join("bg").join(format!("bg_{j:03}.png")), &bg)?;
    }
    Ok(())
}
