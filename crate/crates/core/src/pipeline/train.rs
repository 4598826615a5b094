//! Self-supervised decoder training on random HR crops.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::decoder::{Architecture, DecodePass, DecoderWeights};
use crate::encoder::{unfold_encode, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::{GroupPlan, SliceStrategy};
use crate::numerics::{adam_step, AdamState};

use super::{bicubic_resample, weight_init, Image};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    /// Side of the square HR crop.
    pub crop: usize,
    pub scales: Vec<f64>,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Halve the learning rate every this many iterations; `None` means
    /// `max(1, iterations / 5)`.
    pub decay_every: Option<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    /// Neighbourhood radius of the unfold encoder.
    pub encoder_radius: usize,
    pub hidden: usize,
    pub coarse_layers: usize,
    pub fine_layers: usize,
    pub ensemble: bool,
    pub strategy: SliceStrategy,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(data_dir: impl Into<PathBuf>, iterations: usize, seed: u64) -> Self {
        Self {
            data_dir: data_dir.into(),
            crop: 48,
            scales: vec![2.0, 2.5, 3.0, 3.5, 4.0],
            batch: 16,
            iterations,
            lr: 1e-4,
            decay_every: None,
            decay_factor: 0.5,
            seed,
            encoder_radius: 1,
            hidden: 256,
            coarse_layers: 2,
            fine_layers: 3,
            ensemble: true,
            strategy: SliceStrategy::Linear(1),
            log_every: 100,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            feature_depth: encoder_depth(self.encoder_radius),
            hidden: self.hidden,
            coarse_layers: self.coarse_layers,
            fine_layers: self.fine_layers,
            ensemble: self.ensemble,
        }
    }

    pub fn decay_interval(&self) -> usize {
        self.decay_every.unwrap_or((self.iterations / 5).max(1)).max(1)
    }

    /// Learning rate in effect at (zero-based) iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        self.lr * self.decay_factor.powi((it / self.decay_interval()) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.crop == 0 || self.log_every == 0 {
            return Err(Error::Config("batch, crop and log interval must be positive".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s >= 1.0) || !s.is_finite()) {
            return Err(Error::Config(format!(
                "scale set {:?} must be non-empty and >= 1",
                self.scales
            )));
        }
        let max = self.scales.iter().cloned().fold(1.0, f64::max).floor() as usize;
        if !self.crop.is_multiple_of(max) {
            return Err(Error::Config(format!(
                "crop {} is not divisible by the largest scale {max}",
                self.crop
            )));
        }
        if !(self.lr > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        self.architecture().validate()
    }
}

/// Depth of the unfold encoder with the given radius.
pub fn encoder_depth(radius: usize) -> usize {
    3 * (2 * radius + 1).pow(2)
}

/// Inverse of [`encoder_depth`].
pub fn encoder_radius(depth: usize) -> Result<usize> {
    (0..64)
        .find(|&r| encoder_depth(r) == depth)
        .ok_or_else(|| Error::Config(format!("feature depth {depth} is not produced by the unfold encoder")))
}

pub struct TrainOutput {
    pub weights: DecoderWeights<f32>,
    /// Mean L1 loss of every iteration.
    pub losses: Vec<f64>,
}

/// Loads every readable PNG of at least `min_side` pixels, sorted by path.
pub fn load_dataset(dir: &Path, min_side: usize) -> Result<Vec<Image<f32>>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in paths {
        match Image::<f32>::load_png(&p) {
            Ok(img) if img.height() >= min_side && img.width() >= min_side => images.push(img),
            Ok(img) => log::warn!(
                "skipping {}: {}x{} is smaller than the {min_side}px crop",
                p.display(),
                img.height(),
                img.width()
            ),
            Err(e) => log::warn!("skipping unreadable image: {e}"),
        }
    }
    if images.is_empty() {
        return Err(Error::Config(format!("no usable training images in {}", dir.display())));
    }
    Ok(images)
}

/// One training example, fully determined before any parallel work.
struct Sample {
    image: usize,
    scale: f64,
    y0: usize,
    x0: usize,
    hflip: bool,
    vflip: bool,
    transpose: bool,
}

fn draw_sample(rng: &mut ChaCha8Rng, images: &[Image<f32>], cfg: &TrainConfig) -> Sample {
    let image = rng.random_range(0..images.len());
    let scale = *cfg.scales.choose(rng).expect("scale set is non-empty");
    let img = &images[image];
    let y0 = rng.random_range(0..=img.height() - cfg.crop);
    let x0 = rng.random_range(0..=img.width() - cfg.crop);
    Sample {
        image,
        scale,
        y0,
        x0,
        hflip: rng.random_bool(0.5),
        vflip: rng.random_bool(0.5),
        transpose: rng.random_bool(0.5),
    }
}

/// HR crop with augmentation, its LR counterpart and the decode plan.
pub(crate) fn make_pair(
    hr: &Image<f32>,
    scale: f64,
    radius: usize,
    strategy: SliceStrategy,
) -> Result<(FeatureMap<f32>, GroupPlan)> {
    let lh = ((hr.height() as f64 / scale).floor() as usize).max(1);
    let lw = ((hr.width() as f64 / scale).floor() as usize).max(1);
    let lr = bicubic_resample(hr, lh, lw)?;
    let features = unfold_encode(&lr, radius);
    let plan = GroupPlan::for_size(lh, lw, hr.height(), hr.width(), strategy)?.with_scale(scale)?;
    Ok((features, plan))
}

fn example_gradient(
    weights: &DecoderWeights<f32>,
    images: &[Image<f32>],
    sample: &Sample,
    cfg: &TrainConfig,
    norm: f32,
) -> Result<(DecoderWeights<f32>, f64)> {
    let mut hr = images[sample.image].crop(sample.y0, sample.x0, cfg.crop, cfg.crop)?;
    if sample.hflip {
        hr = hr.flip_horizontal();
    }
    if sample.vflip {
        hr = hr.flip_vertical();
    }
    if sample.transpose {
        hr = hr.transpose();
    }
    let (features, plan) = make_pair(&hr, sample.scale, cfg.encoder_radius, cfg.strategy)?;
    let mut pass = DecodePass::new(weights);
    let pred = pass.forward(&features, &plan, true)?;
    let mut loss = 0.0f64;
    let mut grad = Image::new(hr.height(), hr.width());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(hr.data()) {
        let d = p - t;
        loss += d.abs() as f64;
        *g = if d > 0.0 {
            norm
        } else if d < 0.0 {
            -norm
        } else {
            0.0
        };
    }
    let grads = pass.backward(&grad)?;
    Ok((grads.weights, loss))
}

/// Trains a decoder from scratch. Examples within a batch are processed in
/// parallel and their gradients summed in batch order, so the loss trace
/// depends only on the configuration.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let images = load_dataset(&cfg.data_dir, cfg.crop)?;
    train_on(cfg, &images)
}

/// [`train`] over images already in memory.
pub fn train_on(cfg: &TrainConfig, images: &[Image<f32>]) -> Result<TrainOutput> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(small) = images.iter().find(|i| i.height() < cfg.crop || i.width() < cfg.crop) {
        return Err(Error::Config(format!(
            "{}x{} image is smaller than the {}px crop",
            small.height(),
            small.width(),
            cfg.crop
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = weight_init::<f32>(cfg.architecture(), rng.random());
    let names = weights.tensor_names();
    let shapes: Vec<usize> = weights.tensors().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::<f32>::new(&shapes, cfg.lr);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let values_per_example = 3 * cfg.crop * cfg.crop;
    let norm = 1.0 / (cfg.batch * values_per_example) as f32;

    for it in 0..cfg.iterations {
        let samples: Vec<Sample> = (0..cfg.batch).map(|_| draw_sample(&mut rng, images, cfg)).collect();
        let results = samples
            .par_iter()
            .map(|s| example_gradient(&weights, images, s, cfg, norm))
            .collect::<Result<Vec<_>>>()?;
        let mut total = weights.zeros_like();
        let mut loss = 0.0;
        for (g, l) in &results {
            total.add_assign(g);
            loss += l;
        }
        loss /= (cfg.batch * values_per_example) as f64;
        losses.push(loss);

        adam.lr = cfg.lr_at(it);
        let grads = total.tensors();
        let mut params = weights.tensors_mut();
        adam_step(&mut params, &grads, &names, &mut adam)?;

        if (it + 1) % cfg.log_every == 0 {
            let window = &losses[losses.len() - cfg.log_every..];
            log::info!(
                "iter {:>6}  L1 {:.5}  lr {:.2e}",
                it + 1,
                window.iter().sum::<f64>() / window.len() as f64,
                adam.lr
            );
        }
    }
    Ok(TrainOutput { weights, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textures(n: usize, side: usize) -> Vec<Image<f32>> {
        (0..n)
            .map(|k| {
                let f = 0.2 + 0.1 * k as f32;
                Image::from_fn(side, side, |c, y, x| {
                    0.5 + 0.4 * ((y as f32 * f + c as f32).sin() * (x as f32 * f * 0.7).cos())
                })
            })
            .collect()
    }

    fn small_config(iterations: usize) -> TrainConfig {
        TrainConfig {
            crop: 12,
            batch: 2,
            hidden: 8,
            encoder_radius: 0,
            ..TrainConfig::new("unused", iterations, 3)
        }
    }

    #[test]
    fn defaults_follow_protocol() {
        let c = TrainConfig::new("d", 1000, 0);
        assert_eq!(c.crop, 48);
        assert_eq!(c.batch, 16);
        assert_eq!(c.scales, vec![2.0, 2.5, 3.0, 3.5, 4.0]);
        assert_eq!(c.decay_interval(), 200);
        assert_eq!(c.lr_at(199), 1e-4);
        assert_eq!(c.lr_at(200), 5e-5);
        assert_eq!(c.lr_at(999), 1e-4 / 16.0);
        assert_eq!(TrainConfig::new("d", 3, 0).decay_interval(), 1);
    }

    #[test]
    fn crop_must_divide_by_max_scale() {
        let c = TrainConfig {
            crop: 50,
            ..TrainConfig::new("d", 1, 0)
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn encoder_depth_round_trip() {
        for r in 0..4 {
            assert_eq!(encoder_radius(encoder_depth(r)).unwrap(), r);
        }
        assert!(encoder_radius(10).is_err());
    }

    #[test]
    fn zero_iterations_returns_initial_weights() {
        let cfg = small_config(0);
        let out = train_on(&cfg, &textures(2, 16)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = weight_init::<f32>(cfg.architecture(), rng.random());
        assert_eq!(out.weights, init);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn loss_trace_is_reproducible() {
        let cfg = small_config(5);
        let imgs = textures(3, 16);
        let a = train_on(&cfg, &imgs).unwrap();
        let b = train_on(&cfg, &imgs).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.weights, b.weights);
        assert!(a.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn empty_directory_is_fatal_and_bad_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), 8), Err(Error::Config(_))));
        std::fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
        assert!(matches!(load_dataset(dir.path(), 8), Err(Error::Config(_))));
        textures(1, 16)[0].save_png(dir.path().join("ok.png")).unwrap();
        Image::<f32>::new(4, 4).save_png(dir.path().join("tiny.png")).unwrap();
        assert_eq!(load_dataset(dir.path(), 8).unwrap().len(), 1);
    }
}
