//! Binary morphology on boolean planes with square structuring elements.
//!
//! A radius-`r` element covers the `(2r+1) x (2r+1)` neighborhood. Borders
//! are handled by replication, so eroding an all-true plane stays all-true.

use ndarray::Array2;

/// Sliding minimum along one axis with window `[-r, r]` and replicate borders.
fn erode_axis(input: &Array2<bool>, radius: usize, rows: bool) -> Array2<bool> {
    let (h, w) = (input.shape()[0], input.shape()[1]);
    let mut out = Array2::from_elem((h, w), true);
    let r = radius as isize;
    if rows {
        for col in 0..w {
            for row in 0..h {
                let mut all = true;
                for d in -r..=r {
                    let src = (row as isize + d).clamp(0, h as isize - 1) as usize;
                    if !input[(src, col)] {
                        all = false;
                        break;
                    }
                }
                out[(row, col)] = all;
            }
        }
    } else {
        for row in 0..h {
            for col in 0..w {
                let mut all = true;
                for d in -r..=r {
                    let src = (col as isize + d).clamp(0, w as isize - 1) as usize;
                    if !input[(row, src)] {
                        all = false;
                        break;
                    }
                }
                out[(row, col)] = all;
            }
        }
    }
    out
}

/// Binary erosion by a square element of the given radius (side `2r+1`),
/// replicate border handling. A square element separates into two passes.
pub fn erode(input: &Array2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return input.clone();
    }
    let rows = erode_axis(input, radius, true);
    erode_axis(&rows, radius, false)
}

/// Binary dilation by a square element; dual of [`erode`].
pub fn dilate(input: &Array2<bool>, radius: usize) -> Array2<bool> {
    let inverted = input.map(|&v| !v);
    erode(&inverted, radius).map(|&v| !v)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct neighborhood scan, kept independent of the separable passes.
    fn erode_bruteforce(input: &Array2<bool>, radius: usize) -> Array2<bool> {
        let (h, w) = (input.shape()[0], input.shape()[1]);
        let r = radius as isize;
        let mut out = Array2::from_elem((h, w), true);
        for row in 0..h {
            for col in 0..w {
                let mut all = true;
                'scan: for dr in -r..=r {
                    for dc in -r..=r {
                        let sr = (row as isize + dr).clamp(0, h as isize - 1) as usize;
                        let sc = (col as isize + dc).clamp(0, w as isize - 1) as usize;
                        if !input[(sr, sc)] {
                            all = false;
                            break 'scan;
                        }
                    }
                }
                out[(row, col)] = all;
            }
        }
        out
    }

    #[test]
    fn full_plane_stays_full_under_replicate_borders() {
        let plane = Array2::from_elem((9, 7), true);
        assert_eq!(erode(&plane, 3), plane);
    }

    #[test]
    fn erosion_matches_bruteforce_on_random_planes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let h = rng.gen_range(1..14);
            let w = rng.gen_range(1..14);
            let plane = Array2::from_shape_fn((h, w), |_| rng.gen_bool(0.6));
            for radius in [0usize, 1, 2, 4] {
                assert_eq!(erode(&plane, radius), erode_bruteforce(&plane, radius));
            }
        }
    }

    #[test]
    fn dilation_grows_single_pixel_to_square() {
        let mut plane = Array2::from_elem((7, 7), false);
        plane[(3, 3)] = true;
        let grown = dilate(&plane, 1);
        let count = grown.iter().filter(|&&v| v).count();
        assert_eq!(count, 9);
        assert!(grown[(2, 2)] && grown[(4, 4)]);
    }
}
