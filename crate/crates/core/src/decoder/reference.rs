//! Per-pixel baseline: every output coordinate queries its four surrounding
//! latent codes with a single MLP and blends the four predictions by area.

use rayon::prelude::*;

use super::{check_stage, write_center_code};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::CoordGrid;
use crate::numerics::{Matrix, Mlp, Real};
use crate::pipeline::Image;

/// Rows of output decoded per parallel task.
const ROWS_PER_TASK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReferenceArchitecture {
    pub feature_depth: usize,
    pub hidden: usize,
    /// Linear layers including the RGB head.
    pub layers: usize,
}

impl ReferenceArchitecture {
    /// Five linear layers, four of width 256.
    pub fn liif(feature_depth: usize) -> Self {
        Self {
            feature_depth,
            hidden: 256,
            layers: 5,
        }
    }

    pub fn input_width(&self) -> usize {
        9 * self.feature_depth + 2
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(std::iter::repeat_n(self.hidden, self.layers - 1));
        w.push(3);
        w
    }

    /// Multiplies in one MLP forward.
    pub fn macs(&self) -> u64 {
        self.widths().windows(2).map(|w| (w[0] * w[1]) as u64).sum()
    }

    /// Multiplies per output pixel (four forwards).
    pub fn macs_per_pixel(&self) -> u64 {
        4 * self.macs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceWeights<T = f32> {
    pub arch: ReferenceArchitecture,
    pub mlp: Mlp<T>,
}

impl<T: Real> ReferenceWeights<T> {
    pub fn from_parts(arch: ReferenceArchitecture, mlp: Mlp<T>) -> Result<Self> {
        if arch.feature_depth == 0 || arch.hidden == 0 || arch.layers == 0 {
            return Err(Error::Config(format!("degenerate architecture {arch:?}")));
        }
        check_stage("reference", &mlp, &arch.widths())?;
        Ok(Self { arch, mlp })
    }

    pub fn zeros(arch: ReferenceArchitecture) -> Result<Self> {
        Self::from_parts(arch, Mlp::zeros(&arch.widths(), false))
    }
}

/// Two candidate latent indices along one axis and the output's offset from
/// each, in half-cell units.
fn axis_candidates(o: usize, n: usize, m: usize) -> [(usize, f64); 2] {
    let num = (2 * o + 1) as i64 * m as i64 - n as i64;
    let lo = num.div_euclid(2 * n as i64);
    [lo, lo + 1].map(|j| {
        let j = j.clamp(0, m as i64 - 1);
        let rel = ((2 * o + 1) as i64 * m as i64 - (2 * j + 1) * n as i64) as f64 / n as f64;
        (j as usize, rel)
    })
}

/// Decodes every pixel of `out` independently.
pub fn decode_reference_per_pixel<T: Real>(
    features: &FeatureMap<T>,
    out: CoordGrid,
    weights: &ReferenceWeights<T>,
) -> Result<Image<T>> {
    if weights.arch.feature_depth != features.depth() {
        return Err(Error::Config(format!(
            "reference decoder expects depth {}, feature map has {}",
            weights.arch.feature_depth,
            features.depth()
        )));
    }
    check_stage("reference", &weights.mlp, &weights.arch.widths())?;
    let (h, w) = (features.height(), features.width());
    let d = features.depth();
    let in_w = weights.arch.input_width();

    let bands: Vec<usize> = (0..out.height).step_by(ROWS_PER_TASK).collect();
    let parts = bands
        .into_par_iter()
        .map(|r0| {
            let rows = r0..(r0 + ROWS_PER_TASK).min(out.height);
            let n_pix = rows.len() * out.width;
            let mut x = Matrix::zeros(4 * n_pix, in_w);
            let mut areas = Vec::with_capacity(4 * n_pix);
            let mut p = 0;
            for r in rows.clone() {
                let ys = axis_candidates(r, out.height, h);
                for c in 0..out.width {
                    let xs = axis_candidates(c, out.width, w);
                    for (ly, ry) in ys {
                        for (lx, rx) in xs {
                            let row = x.row_mut(p);
                            write_center_code(features, (ly, lx), &mut row[..9 * d]);
                            row[9 * d] = T::from_f64(ry);
                            row[9 * d + 1] = T::from_f64(rx);
                            areas.push((ry * rx).abs() + 1e-9);
                            p += 1;
                        }
                    }
                }
            }
            let pred = weights.mlp.forward(&x)?;
            let mut rgb = Vec::with_capacity(n_pix);
            for q in 0..n_pix {
                let a = &areas[4 * q..4 * q + 4];
                let total: f64 = a.iter().sum();
                let mut acc = [0.0f64; 3];
                for k in 0..4 {
                    // each prediction is weighted by the diagonally opposite area
                    let wk = a[3 - k] / total;
                    for (ch, v) in acc.iter_mut().enumerate() {
                        *v += wk * pred.get(4 * q + k, ch).to_f64();
                    }
                }
                rgb.push(acc.map(T::from_f64));
            }
            Ok((rows.start, rgb))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut img = Image::new(out.height, out.width);
    for (r0, rgb) in parts {
        for (k, v) in rgb.into_iter().enumerate() {
            img.set_rgb(r0 * out.width + k, v);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_grid;
    use crate::pipeline::reference_weight_init;

    #[test]
    fn default_widths() {
        let a = ReferenceArchitecture::liif(64);
        assert_eq!(a.widths(), vec![578, 256, 256, 256, 256, 3]);
        assert_eq!(a.macs(), (578 * 256 + 3 * 256 * 256 + 256 * 3) as u64);
    }

    #[test]
    fn candidates_bracket_the_coordinate() {
        // 2 latents, 4 outputs: output 1 sits at -0.25, between latents 0 (-0.5) and 1 (0.5)
        let c = axis_candidates(1, 4, 2);
        assert_eq!(c[0].0, 0);
        assert_eq!(c[1].0, 1);
        assert!((c[0].1 - 0.5).abs() < 1e-12);
        assert!((c[1].1 + 1.5).abs() < 1e-12);
        // output 0 at -0.75 is left of every latent: both candidates clamp to 0
        let c = axis_candidates(0, 4, 2);
        assert_eq!((c[0].0, c[1].0), (0, 0));
    }

    #[test]
    fn constant_mlp_output_is_reproduced() {
        let arch = ReferenceArchitecture {
            feature_depth: 3,
            hidden: 4,
            layers: 2,
        };
        let mut w = ReferenceWeights::<f64>::zeros(arch).unwrap();
        w.mlp.layers[1].bias = vec![0.2, 0.4, 0.6];
        let fm = FeatureMap::<f64>::zeros(3, 3, 3);
        let img = decode_reference_per_pixel(&fm, make_grid(7, 5).unwrap(), &w).unwrap();
        for i in 0..img.pixels() {
            let v = img.rgb(i);
            assert!((v[0] - 0.2).abs() < 1e-12 && (v[1] - 0.4).abs() < 1e-12 && (v[2] - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_mismatch_is_config_error() {
        let w = reference_weight_init::<f32>(ReferenceArchitecture::liif(2), 1);
        let fm = FeatureMap::<f32>::zeros(2, 2, 3);
        assert!(matches!(
            decode_reference_per_pixel(&fm, make_grid(4, 4).unwrap(), &w),
            Err(Error::Config(_))
        ));
    }
}
