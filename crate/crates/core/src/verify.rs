//! Runtime self-checks: oracle equivalence, grouping laws, gradients,
//! ensemble continuity, cost scaling and reduction, and a training smoke
//! run. Each check returns a [`CheckOutcome`]; `diif verify` prints them.

use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::costmodel::{count_macs, fit_scaling_exponent, matched_reference};
use crate::decoder::{
    decode_image, decode_image_batched, decode_image_sequential, decode_reference_per_pixel, ensemble_weights,
    query_point, Architecture, DecodePass, DecoderWeights,
};
use crate::encoder::{unfold_encode, FeatureMap};
use crate::error::Result;
use crate::geometry::{GroupPlan, SliceStrategy};
use crate::instrument::{count_multiplies, Counted};
use crate::numerics::{finite_diff_gradient, relative_error};
use crate::pipeline::{
    bicubic_resample, encoder_depth, psnr, reference_weight_init, train_on, upscale_image, weight_init, Image, Target,
    TrainConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String, start: Instant) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
            elapsed: start.elapsed(),
        }
    }

    /// `PASS name (1.2s): detail`
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.1}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

const SCALES: [f64; 5] = [1.0, 2.0, 2.5, 3.0, 4.0];

fn random_strategy(rng: &mut ChaCha8Rng) -> SliceStrategy {
    match rng.random_range(0..3) {
        0 => SliceStrategy::Linear(rng.random_range(1..=2)),
        1 => SliceStrategy::Constant(rng.random_range(1..=3)),
        _ => SliceStrategy::Fixed(rng.random_range(1..=8)),
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image<f32> {
    Image::from_fn(h, w, |_, _, _| rng.random())
}

fn random_features(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap<f64> {
    FeatureMap::new(h, w, d, (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("dimensions are consistent")
}

fn perturb_biases(w: &mut DecoderWeights<f64>, rng: &mut ChaCha8Rng) {
    for l in w.coarse.layers.iter_mut().chain(w.fine.layers.iter_mut()) {
        for b in &mut l.bias {
            *b = rng.random_range(-0.2..0.2);
        }
    }
}

/// Batched decode against the straight-line per-slice evaluation in `f32`
/// on random instances with latent grids up to 8×8.
pub fn check_oracle_equivalence(instances: usize, seed: u64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for k in 0..instances {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let scale = *SCALES.choose(&mut rng).expect("non-empty");
        let strategy = random_strategy(&mut rng);
        let radius = rng.random_range(0..=1);
        let img = random_image(&mut rng, h, w);
        let features = unfold_encode(&img, radius);
        let arch = Architecture {
            hidden: 64,
            ensemble: k % 5 != 4,
            ..Architecture::diif(encoder_depth(radius))
        };
        let weights = weight_init::<f32>(arch, rng.random());
        let plan = GroupPlan::for_scale(h, w, scale, strategy)?;
        let reference = decode_image_sequential(&features, &plan, &weights)?;
        let batch = [1usize, 7, 64, 100_000][k % 4];
        for out in [
            decode_image(&features, &plan, &weights)?,
            decode_image_batched(&features, &plan, &weights, batch)?,
        ] {
            for (a, b) in out.data().iter().zip(reference.data()) {
                worst = worst.max((a - b).abs() as f64);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(CheckOutcome::new(
        "oracle equivalence",
        worst <= 1e-5 && secs < 60.0,
        format!(
            "{instances} instances, max |batched - sequential| = {worst:.3e} (f32, tol 1e-5), {secs:.1}s (limit 60s)"
        ),
        start,
    ))
}

/// Partition, group size, slice order and slice count laws on random plans.
pub fn check_grouping_laws(configs: usize, seed: u64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut integer_cases = 0;
    for k in 0..configs {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let integer = k % 2 == 0;
        let scale = if integer {
            rng.random_range(1..=8) as f64
        } else {
            rng.random_range(1.0..6.0)
        };
        let strategy = random_strategy(&mut rng);
        let plan = GroupPlan::for_scale(h, w, scale, strategy)?;
        let out = plan.output();
        let mut seen = vec![0u32; out.len()];
        for g in plan.grouping.groups() {
            for idx in g.member_indices(out.width) {
                seen[idx] += 1;
            }
            if integer && g.size() != (scale * scale) as usize {
                failures.push(format!(
                    "H={h} W={w} s={scale}: group {} has {} members",
                    g.id,
                    g.size()
                ));
            }
            let u = plan.interval(g.id);
            let slices = plan.slices_of(&g);
            if slices.len() != g.size().div_ceil(u) {
                failures.push(format!(
                    "group {}: {} slices, ceil({}/{u}) expected",
                    g.id,
                    slices.len(),
                    g.size()
                ));
            }
            let concat: Vec<usize> = slices.iter().flat_map(|s| s.members.clone()).collect();
            if concat != (0..g.size()).collect::<Vec<_>>() {
                failures.push(format!("group {}: slices do not concatenate to member order", g.id));
            }
            if slices.iter().rev().skip(1).any(|s| s.len() != u) {
                failures.push(format!("group {}: a non-final slice differs from u={u}", g.id));
            }
        }
        if seen.iter().any(|&c| c != 1) {
            failures.push(format!("H={h} W={w} s={scale}: groups do not partition the output"));
        }
        integer_cases += integer as usize;
    }
    Ok(CheckOutcome::new(
        "grouping and slicing laws",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{configs} configurations ({integer_cases} integer scales): partition, |G| = s^2, concatenation order, K = ceil(g/u) hold")
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
        start,
    ))
}

/// One gradient comparison; returns (relative error, parameter count).
fn gradient_case(ensemble: bool, strategy: SliceStrategy, scale: f64, seed: u64) -> Result<Option<(f64, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fm = random_features(&mut rng, 2, 2, 3);
    let arch = Architecture {
        feature_depth: 3,
        hidden: 8,
        coarse_layers: 2,
        fine_layers: 3,
        ensemble,
    };
    let mut w = weight_init::<f64>(arch, rng.random());
    perturb_biases(&mut w, &mut rng);
    let plan = GroupPlan::for_scale(2, 2, scale, strategy)?;
    let out = plan.output();
    let probe = Image::<f64>::from_fn(out.height, out.width, |_, _, _| rng.random_range(-1.0..1.0));

    let mut pass = DecodePass::new(&w);
    pass.forward(&fm, &plan, true)?;
    if pass.relu_margin()?.unwrap_or(0.0) < 1e-3 {
        return Ok(None);
    }
    let grads = pass.backward(&probe)?;
    let loss = |img: &Image<f64>| img.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();

    let mut analytic: Vec<f64> = grads.weights.tensors().concat();
    analytic.extend_from_slice(grads.features.data());

    let n_weights: usize = w.tensors().iter().map(|t| t.len()).sum();
    let mut params: Vec<f64> = w.tensors().concat();
    params.extend_from_slice(fm.data());
    let numeric = finite_diff_gradient(
        |p| {
            let mut m = w.clone();
            let mut off = 0;
            for t in m.tensors_mut() {
                let k = t.len();
                t.copy_from_slice(&p[off..off + k]);
                off += k;
            }
            let f = FeatureMap::new(2, 2, 3, p[n_weights..].to_vec()).expect("same shape");
            loss(&decode_image_sequential(&f, &plan, &m).expect("valid inputs"))
        },
        &params,
        1e-6,
    );
    Ok(Some((relative_error(&analytic, &numeric), params.len())))
}

/// Analytic gradients of decoder weights and latent codes against central
/// differences on a 2×2 feature map in `f64`.
pub fn check_gradients(seed: u64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let configs = [
        (true, SliceStrategy::Linear(1), 2.5),
        (true, SliceStrategy::Constant(1), 3.0),
        (false, SliceStrategy::Fixed(3), 2.0),
    ];
    let mut worst = 0.0f64;
    let mut params = 0;
    for (k, &(ensemble, strategy, scale)) in configs.iter().enumerate() {
        let mut done = false;
        for attempt in 0..64 {
            if let Some((err, n)) = gradient_case(ensemble, strategy, scale, seed + 1000 * k as u64 + attempt)? {
                worst = worst.max(err);
                params += n;
                done = true;
                break;
            }
        }
        if !done {
            return Ok(CheckOutcome::new(
                "gradient check",
                false,
                "no draw kept every ReLU input at least 1e-3 from zero".into(),
                start,
            ));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(CheckOutcome::new(
        "gradient check",
        worst <= 1e-4 && secs < 120.0,
        format!("{params} parameters over 3 configurations, max relative error {worst:.3e} (f64, tol 1e-4), {secs:.1}s (limit 120s)"),
        start,
    ))
}

/// Ensemble weights sum to one; the blended hidden vector is continuous
/// across group boundaries.
pub fn check_ensemble_continuity(queries: usize, boundary_points: usize, seed: u64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum_err = 0.0f64;
    let mut negative = false;
    for _ in 0..queries {
        let q = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        let w = ensemble_weights(q);
        sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
        negative |= w.iter().any(|&v| v < 0.0);
    }

    let (h, w) = (6, 5);
    let fm = random_features(&mut rng, h, w, 4);
    let mut weights = weight_init::<f64>(
        Architecture {
            hidden: 32,
            ..Architecture::diif(4)
        },
        rng.random(),
    );
    perturb_biases(&mut weights, &mut rng);
    let eps = 1e-6;
    let mut hidden_jump = 0.0f64;
    let mut rgb_jump = 0.0f64;
    let mut same_group = 0;
    for k in 0..boundary_points {
        let vertical = k % 2 == 0;
        let (n_across, n_along) = if vertical { (w, h) } else { (h, w) };
        let edge = -1.0 + 2.0 * rng.random_range(1..n_across) as f64 / n_across as f64;
        // stay clear of the grid corners
        let cell = rng.random_range(0..n_along);
        let along = -1.0 + (2.0 * cell as f64 + rng.random_range(0.05..0.95)) / n_along as f64;
        let (a, b) = if vertical {
            ([along, edge - eps], [along, edge + eps])
        } else {
            ([edge - eps, along], [edge + eps, along])
        };
        let pa = query_point(&fm, &weights, a)?;
        let pb = query_point(&fm, &weights, b)?;
        same_group += (pa.latent == pb.latent) as usize;
        for (x, y) in pa.hidden.iter().zip(&pb.hidden) {
            hidden_jump = hidden_jump.max((x - y).abs());
        }
        for (x, y) in pa.rgb.iter().zip(&pb.rgb) {
            rgb_jump = rgb_jump.max((x - y).abs());
        }
    }
    Ok(CheckOutcome::new(
        "ensemble weights and continuity",
        sum_err <= 1e-12 && !negative && hidden_jump <= 1e-4 && same_group == 0,
        format!(
            "{queries} queries: max |sum w - 1| = {sum_err:.2e} (tol 1e-12); {boundary_points} boundary crossings at eps=1e-6: \
             ensemble-stage jump {hidden_jump:.2e} (tol 1e-4), fine-stage RGB jump {rgb_jump:.2e} (informational)"
        ),
        start,
    ))
}

/// Architecture used for cost claims: 64-channel latent codes, hidden 256.
pub fn cost_architecture() -> Architecture {
    Architecture::diif(64)
}

/// Log-log slopes of MAC counts at 320×180 input plus an instrumented count
/// on a 10×10 instance.
pub fn check_cost_scaling() -> Result<CheckOutcome> {
    let start = Instant::now();
    let arch = cost_architecture();
    let scales = [2.0, 4.0, 8.0, 16.0, 32.0];
    let mut reference = Vec::new();
    let mut linear = Vec::new();
    let mut constant = Vec::new();
    for &s in &scales {
        let lp = GroupPlan::for_scale(180, 320, s, SliceStrategy::Linear(1))?;
        let cp = GroupPlan::for_scale(180, 320, s, SliceStrategy::Constant(1))?;
        let lr = count_macs(&arch, &lp);
        reference.push((s, lr.reference_macs as f64));
        linear.push((s, lr.coarse_macs as f64));
        constant.push((s, count_macs(&arch, &cp).coarse_macs as f64));
    }
    let fr = fit_scaling_exponent(&reference)?;
    let fl = fit_scaling_exponent(&linear)?;
    let fc = fit_scaling_exponent(&constant)?;
    let slopes_ok =
        (1.95..=2.05).contains(&fr.slope) && (0.9..=1.1).contains(&fl.slope) && (-0.05..=0.05).contains(&fc.slope);

    let (exact, mismatches) = instrumented_counts()?;
    Ok(CheckOutcome::new(
        "cost scaling",
        slopes_ok && mismatches.is_empty(),
        format!(
            "slopes over s in {{2,4,8,16,32}} at 320x180: reference {:.4} [1.95, 2.05], linear coarse {:.4} [0.9, 1.1], \
             constant coarse {:.4} [-0.05, 0.05]; instrumented counter: {exact} exact matches{}",
            fr.slope,
            fl.slope,
            fc.slope,
            if mismatches.is_empty() { String::new() } else { format!(", mismatches: {}", mismatches.join("; ")) }
        ),
        start,
    ))
}

/// Decodes 10×10 instances with a multiply-counting scalar and compares
/// against the analytic counts.
fn instrumented_counts() -> Result<(usize, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let img = random_image(&mut rng, 10, 10).cast::<f64>();
    let fm: FeatureMap<Counted> = unfold_encode(&img, 0).cast();
    let mut exact = 0;
    let mut mismatches = Vec::new();
    for (ensemble, strategy, scale) in [
        (true, SliceStrategy::Linear(1), 2.5),
        (true, SliceStrategy::Constant(2), 3.0),
        (false, SliceStrategy::Fixed(2), 2.0),
    ] {
        let arch = Architecture {
            hidden: 12,
            ensemble,
            ..Architecture::diif(3)
        };
        let w = weight_init::<f64>(arch, 3).cast::<Counted>();
        let plan = GroupPlan::for_scale(10, 10, scale, strategy)?;
        let report = count_macs(&arch, &plan);
        let (res, counted) = count_multiplies(|| decode_image(&fm, &plan, &w));
        res?;
        if counted == report.total_macs() {
            exact += 1;
        } else {
            mismatches.push(format!(
                "x{scale} {strategy:?}: counted {counted}, analytic {}",
                report.total_macs()
            ));
        }
        let rw = reference_weight_init::<f64>(matched_reference(&arch), 4);
        let rw = crate::decoder::ReferenceWeights::from_parts(rw.arch, rw.mlp.cast::<Counted>())?;
        let (res, counted) = count_multiplies(|| decode_reference_per_pixel(&fm, plan.output(), &rw));
        res?;
        if counted == report.reference_macs {
            exact += 1;
        } else {
            mismatches.push(format!(
                "reference x{scale}: counted {counted}, analytic {}",
                report.reference_macs
            ));
        }
    }
    Ok((exact, mismatches))
}

/// DIIF total against the matched reference decoder.
pub fn check_cost_reduction() -> Result<CheckOutcome> {
    let start = Instant::now();
    let arch = cost_architecture();
    let at16 = count_macs(&arch, &GroupPlan::for_scale(180, 320, 16.0, SliceStrategy::Linear(1))?);
    let frac = at16.reduction_ratio();
    let mut ratios = Vec::new();
    for s in [2.0, 3.0, 4.0, 6.0, 12.0, 18.0, 24.0] {
        let r = count_macs(&arch, &GroupPlan::for_scale(180, 320, s, SliceStrategy::Linear(1))?);
        ratios.push(r.reference_macs as f64 / r.total_macs() as f64);
    }
    let monotone = ratios.windows(2).all(|w| w[1] > w[0]);
    Ok(CheckOutcome::new(
        "cost reduction",
        frac <= 0.25 && monotone,
        format!(
            "x16 at 320x180: DIIF {:.1}% of reference (limit 25%); reference/DIIF over s in {{2,3,4,6,12,18,24}}: [{}] {}",
            100.0 * frac,
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", "),
            if monotone { "increasing" } else { "NOT increasing" }
        ),
        start,
    ))
}

/// Smooth random texture with a few soft edges, values in `[0, 1]`.
pub fn synthetic_image(seed: u64, height: usize, width: usize) -> Image<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.25..0.25),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.2),
            ]
        })
        .collect();
    let discs: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(4.0..16.0),
                rng.random_range(-0.3..0.3),
            ]
        })
        .collect();
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(0.7..1.3)).collect();
    let base = rng.random_range(0.3..0.6);
    Image::from_fn(height, width, |c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base;
        for (k, wv) in waves.iter().enumerate() {
            let phase = wv[2] + c as f64 * 0.3 * k as f64;
            v += wv[3] * (wv[0] * yf + wv[1] * xf + phase).sin();
        }
        for d in &discs {
            let r = ((yf - d[0]).powi(2) + (xf - d[1]).powi(2)).sqrt();
            v += d[3] / (1.0 + ((r - d[2]) * 1.5).exp());
        }
        (v * tint[c]).clamp(0.0, 1.0) as f32
    })
}

/// Settings of the training smoke run.
#[derive(Clone, Debug, PartialEq)]
pub struct SmokeSettings {
    pub images: usize,
    pub side: usize,
    pub iterations: usize,
    pub config: TrainConfig,
}

impl Default for SmokeSettings {
    fn default() -> Self {
        Self {
            images: 8,
            side: 64,
            iterations: 2000,
            config: TrainConfig {
                crop: 32,
                batch: 4,
                hidden: 48,
                encoder_radius: 1,
                ..TrainConfig::new("", 2000, 7)
            },
        }
    }
}

fn clamp_unit(img: &Image<f32>) -> Image<f32> {
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

fn x2_psnr(weights: &DecoderWeights<f32>, hr: &Image<f32>) -> Result<f64> {
    let lr = bicubic_resample(hr, hr.height() / 2, hr.width() / 2)?;
    let (sr, _) = upscale_image(
        &lr,
        weights,
        Target::Size {
            height: hr.height(),
            width: hr.width(),
        },
        SliceStrategy::Linear(1),
    )?;
    psnr(&clamp_unit(&sr), hr)
}

/// Trains twice on synthetic images and checks loss reduction, held-out
/// PSNR gain over random weights, trace reproducibility and runtime.
pub fn check_training_smoke(settings: &SmokeSettings) -> Result<CheckOutcome> {
    let start = Instant::now();
    let images: Vec<Image<f32>> = (0..settings.images)
        .map(|k| synthetic_image(100 + k as u64, settings.side, settings.side))
        .collect();
    let held_out = synthetic_image(999, settings.side, settings.side);
    let cfg = TrainConfig {
        iterations: settings.iterations,
        ..settings.config.clone()
    };

    let t0 = Instant::now();
    let first = train_on(&cfg, &images)?;
    let train_secs = t0.elapsed().as_secs_f64();
    let second = train_on(&cfg, &images)?;
    let identical = first.losses.len() == second.losses.len()
        && first
            .losses
            .iter()
            .zip(&second.losses)
            .all(|(a, b)| a.to_bits() == b.to_bits());

    let window = 100.min(first.losses.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let head = mean(&first.losses[..window.min(first.losses.len())]);
    let tail = mean(&first.losses[first.losses.len().saturating_sub(window)..]);
    let ratio = tail / head;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let random = weight_init::<f32>(cfg.architecture(), init_rng.random());
    let trained_psnr = x2_psnr(&first.weights, &held_out)?;
    let random_psnr = x2_psnr(&random, &held_out)?;
    let gain = trained_psnr - random_psnr;

    let passed = ratio <= 0.7 && gain >= 5.0 && identical && train_secs < 600.0;
    Ok(CheckOutcome::new(
        "training smoke",
        passed,
        format!(
            "{} iters, {} images {}px, crop {}, batch {}, hidden {}: L1 first/last 100 = {head:.4}/{tail:.4} (ratio {ratio:.3}, limit 0.7); \
             held-out x2 PSNR trained {trained_psnr:.2} dB vs random {random_psnr:.2} dB (gain {gain:.2}, need 5); \
             re-run trace {}; one run {train_secs:.0}s (limit 600s)",
            cfg.iterations,
            settings.images,
            settings.side,
            cfg.crop,
            cfg.batch,
            cfg.hidden,
            if identical { "bit-identical" } else { "DIFFERS" }
        ),
        start,
    ))
}

/// The fast checks, sized as in the acceptance criteria.
pub fn run_suite(seed: u64) -> Vec<Result<CheckOutcome>> {
    vec![
        check_oracle_equivalence(24, seed),
        check_grouping_laws(200, seed),
        check_gradients(seed),
        check_ensemble_continuity(10_000, 200, seed),
        check_cost_scaling(),
        check_cost_reduction(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Real;

    #[test]
    fn small_checks_pass() {
        assert!(check_oracle_equivalence(3, 1).unwrap().passed);
        assert!(check_grouping_laws(20, 1).unwrap().passed);
        assert!(check_ensemble_continuity(100, 10, 1).unwrap().passed);
    }

    #[test]
    fn synthetic_images_are_in_range_and_distinct() {
        let a = synthetic_image(1, 16, 16);
        let b = synthetic_image(2, 16, 16);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, b);
        assert_eq!(a, synthetic_image(1, 16, 16));
    }

    #[test]
    fn outcome_line_format() {
        let o = CheckOutcome::new("x", true, "ok".into(), Instant::now());
        assert!(o.line().starts_with("PASS x ("));
    }

    #[test]
    fn counted_decode_is_exact() {
        let (exact, mismatches) = instrumented_counts().unwrap();
        assert!(mismatches.is_empty(), "{mismatches:?}");
        assert_eq!(exact, 6);
    }

    #[test]
    fn f64_counted_matches_f64_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fm = random_features(&mut rng, 3, 3, 3);
        let w = weight_init::<f64>(
            Architecture {
                hidden: 6,
                ..Architecture::diif(3)
            },
            1,
        );
        let plan = GroupPlan::for_scale(3, 3, 2.0, SliceStrategy::Linear(1)).unwrap();
        let a = decode_image(&fm, &plan, &w).unwrap();
        let b = decode_image(&fm.cast::<Counted>(), &plan, &w.cast::<Counted>()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, y.to_f64());
        }
    }
}
