//! Shared fixtures for the decode benchmarks.

use diif::costmodel::matched_reference;
use diif::decoder::{Architecture, DecoderWeights, ReferenceWeights};
use diif::encoder::{unfold_encode, FeatureMap};
use diif::pipeline::{encoder_depth, reference_weight_init, weight_init};
use diif::verify::synthetic_image;

/// A seeded input, its unfold features and matched decoders.
pub struct Fixture {
    pub features: FeatureMap<f32>,
    pub weights: DecoderWeights<f32>,
    pub reference: ReferenceWeights<f32>,
}

impl Fixture {
    /// `height`×`width` synthetic input, radius-1 unfold features and
    /// decoders with `hidden` units per layer.
    pub fn new(height: usize, width: usize, hidden: usize) -> Self {
        let features = unfold_encode(&synthetic_image(0, height, width), 1);
        let arch = Architecture {
            hidden,
            ..Architecture::diif(encoder_depth(1))
        };
        Self {
            features,
            weights: weight_init(arch, 1),
            reference: reference_weight_init(matched_reference(&arch), 2),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shapes_agree() {
        let f = Fixture::new(4, 5, 16);
        assert_eq!(f.features.depth(), f.weights.arch.feature_depth);
        assert_eq!(f.reference.arch.feature_depth, f.weights.arch.feature_depth);
    }
}
