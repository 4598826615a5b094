//! Separable bicubic resampling with clamp-to-edge borders.
//!
//! When shrinking, the kernel is stretched by the inverse scale so that it
//! also acts as an anti-aliasing filter; taps are renormalised to sum to one.

use crate::error::{Error, Result};
use crate::numerics::Real;

use super::Image;

/// Cubic convolution parameter.
pub const BICUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with parameter [`BICUBIC_A`].
pub fn cubic_kernel(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps (clamped index, weight) for each output sample along one axis.
pub fn axis_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = dst as f64 / src as f64;
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let w = cubic_kernel((center - i as f64) / stretch);
                if w != 0.0 {
                    let idx = i.clamp(0, src as isize - 1) as usize;
                    taps.push((idx, w));
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Resamples to `height × width`.
pub fn bicubic_resample<T: Real>(image: &Image<T>, height: usize, width: usize) -> Result<Image<T>> {
    if height == 0 || width == 0 {
        return Err(Error::Argument(format!("resample target {height}x{width} is empty")));
    }
    if image.pixels() == 0 {
        return Err(Error::Argument("cannot resample an empty image".into()));
    }
    let (sh, sw) = (image.height(), image.width());
    let col_taps = axis_taps(sw, width);
    let row_taps = axis_taps(sh, height);
    let mut out = Image::new(height, width);
    let mut tmp = vec![0.0f64; sh * width];
    for c in 0..3 {
        for y in 0..sh {
            for (x, taps) in col_taps.iter().enumerate() {
                tmp[y * width + x] = taps.iter().map(|&(i, w)| w * image.get(c, y, i).to_f64()).sum();
            }
        }
        for (y, taps) in row_taps.iter().enumerate() {
            for x in 0..width {
                let v: f64 = taps.iter().map(|&(i, w)| w * tmp[i * width + x]).sum();
                out.set(c, y, x, T::from_f64(v));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert!((cubic_kernel(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_kernel(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn same_size_is_identity() {
        let img = Image::<f64>::from_fn(5, 6, |c, y, x| ((c * 7 + y * 3 + x * 5) % 11) as f64 / 11.0);
        let out = bicubic_resample(&img, 5, 6).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn constant_stays_constant() {
        let img = Image::<f64>::from_fn(7, 4, |c, _, _| 0.1 + 0.3 * c as f64);
        for (h, w) in [(3, 2), (14, 8), (9, 13), (1, 1)] {
            let out = bicubic_resample(&img, h, w).unwrap();
            for c in 0..3 {
                for &v in out.plane(c) {
                    assert!((v - (0.1 + 0.3 * c as f64)).abs() <= 1e-12);
                }
            }
        }
    }

    /// 2D weights written out directly for each output pixel, without the
    /// separable two-pass structure.
    fn direct_downsample_by_two(img: &Image<f64>) -> Image<f64> {
        let (h, w) = (img.height() / 2, img.width() / 2);
        Image::from_fn(h, w, |c, oy, ox| {
            let cy = 2.0 * oy as f64 + 0.5;
            let cx = 2.0 * ox as f64 + 0.5;
            let mut num = 0.0;
            let mut den = 0.0;
            for iy in -6isize..10 {
                for ix in -6isize..10 {
                    let k = cubic_kernel((cy - iy as f64) / 2.0) * cubic_kernel((cx - ix as f64) / 2.0);
                    num += k * img.get_clamped(c, iy, ix);
                    den += k;
                }
            }
            num / den
        })
    }

    #[test]
    fn ramp_downsample_matches_direct_sum() {
        let img = Image::<f64>::from_fn(4, 4, |c, y, x| (y * 4 + x) as f64 / 15.0 + c as f64 * 0.01);
        let fast = bicubic_resample(&img, 2, 2).unwrap();
        let slow = direct_downsample_by_two(&img);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_target_rejected() {
        let img = Image::<f32>::new(2, 2);
        assert!(bicubic_resample(&img, 0, 3).is_err());
    }

    proptest! {
        #[test]
        fn kernel_partition_of_unity(phase in 0.0f64..1.0) {
            let s: f64 = (-3..=3).map(|i| cubic_kernel(phase - i as f64)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn taps_sum_to_one(src in 1usize..40, dst in 1usize..80) {
            for taps in axis_taps(src, dst) {
                let s: f64 = taps.iter().map(|t| t.1).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }
}
