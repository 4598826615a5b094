//! Image I/O, resampling, quality metrics, initialisation, training and the
//! end-to-end upscale path used by the command line.
//!
//! Plan debug dumps ([`GroupPlan::debug_json`]) are JSON objects with the
//! latent and output grid sizes, the scale, the slicing strategy and one
//! entry per group listing its latent index, output row and column ranges,
//! size, slice interval and slice count.

mod image;
mod resample;
mod train;

pub use image::{quantize, Image};
pub use resample::{axis_taps, bicubic_resample, cubic_kernel, BICUBIC_A};
pub use train::{encoder_depth, encoder_radius, load_dataset, train, train_on, TrainConfig, TrainOutput};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::costmodel::{count_macs, CostReport};
use crate::decoder::{decode_image, Architecture, DecoderWeights, ReferenceArchitecture, ReferenceWeights};
use crate::encoder::{load_weights, unfold_encode};
use crate::error::{Error, Result};
use crate::geometry::{GroupPlan, SliceStrategy};
use crate::numerics::{Linear, Mlp, Real};

/// `10·log10(1 / MSE)` for unit-range images; `+∞` when identical.
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Argument(format!(
            "PSNR of {}x{} and {}x{} images",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// He-uniform bound `sqrt(6 / fan_in)`.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn init_mlp<T: Real>(mlp: &mut Mlp<T>, rng: &mut ChaCha8Rng) {
    for Linear { weight, bias } in &mut mlp.layers {
        let b = he_bound(weight.rows());
        for v in weight.data_mut() {
            *v = T::from_f64(rng.random_range(-b..b));
        }
        bias.iter_mut().for_each(|v| *v = T::ZERO);
    }
}

/// Uniform He initialisation with zero biases. Values are drawn in `f64`, so
/// the `f32` and `f64` weights for a seed agree up to rounding.
pub fn weight_init<T: Real>(arch: Architecture, seed: u64) -> DecoderWeights<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DecoderWeights {
        arch,
        coarse: Mlp::zeros(&arch.coarse_widths(), true),
        fine: Mlp::zeros(&arch.fine_widths(), false),
    };
    init_mlp(&mut w.coarse, &mut rng);
    init_mlp(&mut w.fine, &mut rng);
    w
}

pub fn reference_weight_init<T: Real>(arch: ReferenceArchitecture, seed: u64) -> ReferenceWeights<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ReferenceWeights {
        arch,
        mlp: Mlp::zeros(&arch.widths(), false),
    };
    init_mlp(&mut w.mlp, &mut rng);
    w
}

/// Requested output size for [`upscale_image`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Scale(f64),
    Size { height: usize, width: usize },
}

/// Decodes `image` at the target resolution with the unfold encoder
/// matching the weights' feature depth.
pub fn upscale_image(
    image: &Image<f32>,
    weights: &DecoderWeights<f32>,
    target: Target,
    strategy: SliceStrategy,
) -> Result<(Image<f32>, CostReport)> {
    let radius = encoder_radius(weights.arch.feature_depth)?;
    let features = unfold_encode(image, radius);
    let plan = match target {
        Target::Scale(s) => GroupPlan::for_scale(image.height(), image.width(), s, strategy)?,
        Target::Size { height, width } => GroupPlan::for_size(image.height(), image.width(), height, width, strategy)?,
    };
    let out = decode_image(&features, &plan, weights)?;
    Ok((out, count_macs(&weights.arch, &plan)))
}

/// Options of the file-to-file upscale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpscaleOptions {
    pub target: Target,
    pub strategy: SliceStrategy,
    /// Require weights trained without slice ensemble.
    pub no_ensemble: bool,
}

/// Reads a PNG, upscales it and writes an 8-bit PNG.
pub fn upscale(input: &Path, output: &Path, weights_path: &Path, opts: UpscaleOptions) -> Result<CostReport> {
    let weights = load_weights(weights_path)?;
    if opts.no_ensemble && weights.arch.ensemble {
        return Err(Error::Config(format!(
            "{} holds slice-ensemble weights; ensemble-free decoding needs weights trained without it",
            weights_path.display()
        )));
    }
    let image = Image::<f32>::load_png(input)?;
    let (out, report) = upscale_image(&image, &weights, opts.target, opts.strategy)?;
    out.save_png(output)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn psnr_examples() {
        let a = Image::<f64>::from_fn(4, 5, |_, _, _| 0.5);
        let b = Image::<f64>::from_fn(4, 5, |_, _, _| 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(matches!(psnr(&a, &Image::new(5, 4)), Err(Error::Argument(_))));
    }

    #[test]
    fn psnr_matches_hand_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Image::<f64>::from_fn(6, 7, |_, _, _| rng.random());
        let b = Image::<f64>::from_fn(6, 7, |_, _, _| rng.random());
        let mut mse = 0.0;
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..7 {
                    mse += (a.get(c, y, x) - b.get(c, y, x)).powi(2);
                }
            }
        }
        mse /= 126.0;
        assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() <= 1e-9);
    }

    #[test]
    fn init_is_seeded() {
        let arch = Architecture {
            hidden: 16,
            ..Architecture::diif(3)
        };
        let a = weight_init::<f32>(arch, 1);
        assert_eq!(a, weight_init::<f32>(arch, 1));
        assert_ne!(a, weight_init::<f32>(arch, 2));
        let bound = he_bound(arch.coarse_input_width()) as f32;
        assert!(a.coarse.layers[0].weight.data().iter().all(|v| v.abs() <= bound));
        assert!(a.fine.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_keeps_activation_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = Architecture::diif(27);
        let w = weight_init::<f64>(arch, 5);
        let x = Matrix::from_vec(
            256,
            arch.coarse_input_width(),
            (0..256 * arch.coarse_input_width())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let std = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let sx = std(x.data());
        let h = w.coarse.forward(&x).unwrap();
        let mut fine_in = Vec::new();
        for r in 0..h.rows() {
            fine_in.extend_from_slice(h.row(r));
            fine_in.extend([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        }
        let y = w
            .fine
            .forward(&Matrix::from_vec(h.rows(), arch.fine_input_width(), fine_in).unwrap())
            .unwrap();
        assert!(y.all_finite());
        for s in [std(h.data()), std(y.data())] {
            assert!((0.1..=10.0).contains(&(s / sx)), "ratio {}", s / sx);
        }
    }

    #[test]
    fn fractional_scale_covers_full_grid() {
        let img = Image::<f32>::from_fn(5, 4, |c, y, x| (c + y + x) as f32 / 12.0);
        let w = weight_init::<f32>(
            Architecture {
                hidden: 8,
                ..Architecture::diif(3)
            },
            0,
        );
        let (out, report) = upscale_image(&img, &w, Target::Scale(3.7), SliceStrategy::Linear(1)).unwrap();
        assert_eq!((out.height(), out.width()), (18, 14));
        assert_eq!(report.fine_macs, 18 * 14 * w.arch.fine_macs());
    }

    #[test]
    fn upscale_reports_missing_paths() {
        let dir = tempfile::tempdir().unwrap();
        let opts = UpscaleOptions {
            target: Target::Scale(2.0),
            strategy: SliceStrategy::Linear(1),
            no_ensemble: false,
        };
        let missing = dir.path().join("none.diif");
        let err = upscale(&dir.path().join("in.png"), &dir.path().join("o.png"), &missing, opts).unwrap_err();
        assert!(err.to_string().contains("none.diif"));
    }

    #[test]
    fn no_ensemble_flag_rejects_ensemble_weights() {
        let dir = tempfile::tempdir().unwrap();
        let wpath = dir.path().join("w.diif");
        weight_init::<f32>(
            Architecture {
                hidden: 4,
                ..Architecture::diif(3)
            },
            0,
        )
        .save(&wpath)
        .unwrap();
        Image::<f32>::new(3, 3).save_png(dir.path().join("in.png")).unwrap();
        let opts = UpscaleOptions {
            target: Target::Scale(2.0),
            strategy: SliceStrategy::Linear(1),
            no_ensemble: true,
        };
        let err = upscale(&dir.path().join("in.png"), &dir.path().join("o.png"), &wpath, opts).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    proptest! {
        #[test]
        fn psnr_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Image::<f64>::from_fn(3, 4, |_, _, _| rng.random());
            let b = Image::<f64>::from_fn(3, 4, |_, _, _| rng.random());
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }
}
