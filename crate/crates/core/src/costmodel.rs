//! Multiply-accumulate accounting, decode timing and log-log scaling fits.
//!
//! One MAC is one scalar multiply inside a matrix product or the ensemble
//! blend. Bias additions, activations and the scalar geometry behind the
//! ensemble weights are not counted. Encoders are not counted.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::decoder::{decode_image, Architecture, DecoderWeights, ReferenceArchitecture};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::{GroupPlan, SliceStrategy};

/// Output pixels above which [`benchmark_decode`] refuses to time a scale.
pub const MAX_BENCH_PIXELS: u64 = 1 << 26;

pub const CSV_HEADER: &str =
    "scale,groups,slices,coarse_macs,ensemble_macs,fine_macs,total_macs,reference_macs,runtime_ms";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub scale: f64,
    pub output_height: usize,
    pub output_width: usize,
    pub groups: u64,
    pub slices: u64,
    pub coarse_macs: u64,
    pub ensemble_macs: u64,
    pub fine_macs: u64,
    pub reference_macs: u64,
    pub runtime_ms: Option<f64>,
}

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.coarse_macs + self.ensemble_macs + self.fine_macs
    }

    /// DIIF total as a fraction of the reference decoder.
    pub fn reduction_ratio(&self) -> f64 {
        self.total_macs() as f64 / self.reference_macs as f64
    }

    pub fn csv_row(&self) -> String {
        let runtime = self.runtime_ms.map(|t| format!("{t:.3}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.scale,
            self.groups,
            self.slices,
            self.coarse_macs,
            self.ensemble_macs,
            self.fine_macs,
            self.total_macs(),
            self.reference_macs,
            runtime
        )
    }

    /// Single-line human summary.
    pub fn summary(&self) -> String {
        format!(
            "x{} -> {}x{}: {} groups, {} slices, {:.3} GMACs (coarse {:.3}, ensemble {:.3}, fine {:.3}), reference {:.3} GMACs ({:.1}%)",
            self.scale,
            self.output_height,
            self.output_width,
            self.groups,
            self.slices,
            self.total_macs() as f64 * 1e-9,
            self.coarse_macs as f64 * 1e-9,
            self.ensemble_macs as f64 * 1e-9,
            self.fine_macs as f64 * 1e-9,
            self.reference_macs as f64 * 1e-9,
            100.0 * self.reduction_ratio()
        )
    }
}

pub fn write_csv(reports: &[CostReport], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// The per-pixel reference decoder with the same hidden width.
pub fn matched_reference(arch: &Architecture) -> ReferenceArchitecture {
    ReferenceArchitecture {
        hidden: arch.hidden,
        ..ReferenceArchitecture::liif(arch.feature_depth)
    }
}

/// Analytic MACs for decoding `plan` with `arch`, against the matched
/// reference decoder.
pub fn count_macs(arch: &Architecture, plan: &GroupPlan) -> CostReport {
    count_macs_with_reference(arch, &matched_reference(arch), plan)
}

pub fn count_macs_with_reference(
    arch: &Architecture,
    reference: &ReferenceArchitecture,
    plan: &GroupPlan,
) -> CostReport {
    let out = plan.output();
    let pixels = out.len() as u64;
    let slices = plan.slice_count();
    CostReport {
        scale: plan.scale,
        output_height: out.height,
        output_width: out.width,
        groups: plan.grouping.group_count() as u64,
        slices,
        coarse_macs: slices * arch.vertices_per_slice() * arch.coarse_macs(),
        ensemble_macs: if arch.ensemble {
            pixels * 4 * arch.hidden as u64
        } else {
            0
        },
        fine_macs: pixels * arch.fine_macs(),
        reference_macs: pixels * reference.macs_per_pixel(),
        runtime_ms: None,
    }
}

/// Least-squares line through `(ln s, ln MACs)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
    pub points: usize,
}

pub fn fit_scaling_exponent(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if let Some(&(s, m)) = points.iter().find(|(s, m)| !(*s > 0.0 && *m > 0.0)) {
        return Err(Error::Argument(format!(
            "log-log fit needs positive values, got ({s}, {m})"
        )));
    }
    let mut scales: Vec<f64> = points.iter().map(|p| p.0).collect();
    scales.sort_by(f64::total_cmp);
    scales.dedup();
    if scales.len() < 3 {
        return Err(Error::Argument(format!(
            "log-log fit needs at least 3 distinct scales, got {}",
            scales.len()
        )));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(ScalingFit {
        slope,
        intercept,
        residual: (sse / n).sqrt(),
        points: points.len(),
    })
}

/// Decodes `features` at every scale, reporting analytic MACs and the
/// median wall-clock time over `repetitions` runs. With zero repetitions
/// only the analytic columns are filled.
pub fn benchmark_decode(
    features: &FeatureMap<f32>,
    weights: &DecoderWeights<f32>,
    scales: &[f64],
    strategy: SliceStrategy,
    repetitions: usize,
) -> Result<Vec<CostReport>> {
    let mut reports = Vec::with_capacity(scales.len());
    for &s in scales {
        let plan = GroupPlan::for_scale(features.height(), features.width(), s, strategy)?;
        let mut report = count_macs(&weights.arch, &plan);
        if repetitions > 0 {
            let pixels = plan.output().len() as u64;
            if pixels > MAX_BENCH_PIXELS {
                return Err(Error::Resource(format!(
                    "x{s} produces {pixels} output pixels, above the benchmark limit of {MAX_BENCH_PIXELS}"
                )));
            }
            let mut times = Vec::with_capacity(repetitions);
            for _ in 0..repetitions {
                let t = Instant::now();
                let img = decode_image(features, &plan, weights)?;
                times.push(t.elapsed().as_secs_f64() * 1e3);
                drop(img);
            }
            times.sort_by(f64::total_cmp);
            report.runtime_ms = Some(times[times.len() / 2]);
        }
        log::info!("{}", report.summary());
        reports.push(report);
    }
    Ok(reports)
}
