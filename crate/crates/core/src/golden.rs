//! Golden test vectors produced by an external oracle.
//!
//! A case is a JSON object:
//!
//! ```json
//! {
//!   "name": "decode_00",
//!   "operation": "decode" | "reference_decode" | "unfold",
//!   "seed": 0,
//!   "tolerance": {"f32": 1e-5, "f64": 1e-10},
//!   "params": {...},
//!   "arrays": {"features": {"shape": [H, W, D], "data": "<base64>"}, ...}
//! }
//! ```
//!
//! Array payloads are base64 of little-endian `f64` values in row-major
//! order. Images are stored `[H, W, 3]` interleaved. Layers are stored as
//! `<stage>.<k>.weight` (`in × out`) and `<stage>.<k>.bias`.
//!
//! `decode` params: `scale`, `strategy` (`{"kind", "value"}`), `output`
//! (`[H, W]`), `hidden`, `ensemble`, `slices`. Expected arrays:
//! `expected.rgb`, `expected.ensemble_weights` (`[H, W, 4]`).
//! `reference_decode` params: `output`, `hidden`; expected `expected.rgb`.
//! `unfold` params: `radius`; input `image`, expected `expected.features`.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::decoder::{
    decode_image, decode_image_sequential, decode_reference_per_pixel, ensemble_weights, DecoderWeights,
    ReferenceArchitecture, ReferenceWeights,
};
use crate::encoder::{unfold_encode, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::{make_grid, GroupPlan, SliceStrategy};
use crate::numerics::{Linear, Matrix, Mlp, Real};
use crate::pipeline::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenArray {
    pub shape: Vec<usize>,
    pub data: String,
}

impl GoldenArray {
    pub fn encode(shape: &[usize], values: &[f64]) -> Self {
        let mut bytes = vec![0u8; 8 * values.len()];
        LittleEndian::write_f64_into(values, &mut bytes);
        Self {
            shape: shape.to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Config(format!("golden array is not valid base64: {e}")))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != 8 * n {
            return Err(Error::Shape(format!(
                "golden array of shape {:?} holds {} bytes",
                self.shape,
                bytes.len()
            )));
        }
        let mut out = vec![0.0; n];
        LittleEndian::read_f64_into(&bytes, &mut out);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub f32: f64,
    pub f64: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenCase {
    pub name: String,
    pub operation: String,
    pub seed: u64,
    pub tolerance: Tolerance,
    pub params: serde_json::Value,
    pub arrays: BTreeMap<String, GoldenArray>,
}

/// Outcome of replaying one case.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldenReport {
    pub name: String,
    pub max_abs: f64,
    pub tolerance: f64,
}

impl GoldenReport {
    pub fn passed(&self) -> bool {
        self.max_abs <= self.tolerance
    }
}

impl GoldenCase {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed golden case: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn array(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let a = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::Config(format!("golden case {} has no array {name}", self.name)))?;
        Ok((a.shape.clone(), a.values()?))
    }

    fn param<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .params
            .get(key)
            .ok_or_else(|| Error::Config(format!("golden case {} has no param {key}", self.name)))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("param {key}: {e}")))
    }

    pub fn feature_map<T: Real>(&self) -> Result<FeatureMap<T>> {
        let (shape, data) = self.array("features")?;
        if shape.len() != 3 {
            return Err(Error::Shape(format!("features must be 3-D, got {shape:?}")));
        }
        FeatureMap::new(
            shape[0],
            shape[1],
            shape[2],
            data.into_iter().map(T::from_f64).collect(),
        )
    }

    pub fn layers<T: Real>(&self, stage: &str) -> Result<Vec<Linear<T>>> {
        let mut layers = Vec::new();
        while self.arrays.contains_key(&format!("{stage}.{}.weight", layers.len())) {
            let k = layers.len();
            let (ws, w) = self.array(&format!("{stage}.{k}.weight"))?;
            let (_, b) = self.array(&format!("{stage}.{k}.bias"))?;
            if ws.len() != 2 {
                return Err(Error::Shape(format!("{stage}.{k}.weight must be 2-D")));
            }
            layers.push(Linear {
                weight: Matrix::from_vec(ws[0], ws[1], w.into_iter().map(T::from_f64).collect())?,
                bias: b.into_iter().map(T::from_f64).collect(),
            });
        }
        Ok(layers)
    }

    pub fn decoder_weights<T: Real>(&self) -> Result<DecoderWeights<T>> {
        let depth = self.array("features")?.0[2];
        DecoderWeights::from_layers(
            depth,
            self.param("hidden")?,
            self.layers("coarse")?,
            self.layers("fine")?,
        )
    }

    pub fn reference_weights<T: Real>(&self) -> Result<ReferenceWeights<T>> {
        let depth = self.array("features")?.0[2];
        let layers = self.layers("reference")?;
        let arch = ReferenceArchitecture {
            feature_depth: depth,
            hidden: self.param("hidden")?,
            layers: layers.len(),
        };
        ReferenceWeights::from_parts(
            arch,
            Mlp {
                layers,
                relu_on_output: false,
            },
        )
    }

    pub fn plan(&self) -> Result<GroupPlan> {
        let (shape, _) = self.array("features")?;
        let scale: f64 = self.param("scale")?;
        let strategy: SliceStrategy = self.param("strategy")?;
        let output: [usize; 2] = self.param("output")?;
        let plan = GroupPlan::for_scale(shape[0], shape[1], scale, strategy)?;
        let out = plan.output();
        if [out.height, out.width] != output {
            return Err(Error::Config(format!(
                "case {} expects a {:?} output, plan gives {}x{}",
                self.name, output, out.height, out.width
            )));
        }
        Ok(plan)
    }

    fn image<T: Real>(&self, name: &str) -> Result<Image<T>> {
        let (shape, data) = self.array(name)?;
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::Shape(format!("{name} must be [H, W, 3], got {shape:?}")));
        }
        let (h, w) = (shape[0], shape[1]);
        Ok(Image::from_fn(h, w, |c, y, x| T::from_f64(data[(y * w + x) * 3 + c])))
    }

    /// Replays the case through the crate at precision `T`, returning the
    /// produced values in the layout of the case's expected array.
    pub fn replay<T: Real>(&self, sequential: bool) -> Result<Vec<f64>> {
        match self.operation.as_str() {
            "decode" => {
                let fm = self.feature_map::<T>()?;
                let w = self.decoder_weights::<T>()?;
                let plan = self.plan()?;
                let img = if sequential {
                    decode_image_sequential(&fm, &plan, &w)?
                } else {
                    decode_image(&fm, &plan, &w)?
                };
                Ok(interleave(&img))
            }
            "reference_decode" => {
                let fm = self.feature_map::<T>()?;
                let w = self.reference_weights::<T>()?;
                let out: [usize; 2] = self.param("output")?;
                Ok(interleave(&decode_reference_per_pixel(
                    &fm,
                    make_grid(out[0], out[1])?,
                    &w,
                )?))
            }
            "unfold" => {
                let img = self.image::<T>("image")?;
                let fm = unfold_encode(&img, self.param("radius")?);
                Ok(fm.data().iter().map(|v| v.to_f64()).collect())
            }
            other => Err(Error::Config(format!("unknown golden operation {other}"))),
        }
    }

    pub fn expected(&self) -> Result<Vec<f64>> {
        let name = if self.operation == "unfold" {
            "expected.features"
        } else {
            "expected.rgb"
        };
        Ok(self.array(name)?.1)
    }

    /// Replays at precision `T` and compares with the expected output.
    pub fn check<T: Real>(&self) -> Result<GoldenReport> {
        let got = self.replay::<T>(false)?;
        let want = self.expected()?;
        if got.len() != want.len() {
            return Err(Error::Shape(format!(
                "case {}: produced {} values, expected {}",
                self.name,
                got.len(),
                want.len()
            )));
        }
        let max_abs = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let tolerance = if std::mem::size_of::<T>() == 4 {
            self.tolerance.f32
        } else {
            self.tolerance.f64
        };
        Ok(GoldenReport {
            name: self.name.clone(),
            max_abs,
            tolerance,
        })
    }

    /// Largest difference between the crate's ensemble weights and the
    /// case's expected per-pixel weights (decode cases with ensemble).
    pub fn ensemble_weight_error(&self) -> Result<f64> {
        let plan = self.plan()?;
        let (_, want) = self.array("expected.ensemble_weights")?;
        let out = plan.output();
        let mut worst = 0.0f64;
        for r in 0..out.height {
            for c in 0..out.width {
                let got = ensemble_weights(plan.grouping.local(r, c));
                for t in 0..4 {
                    worst = worst.max((got[t] - want[(r * out.width + c) * 4 + t]).abs());
                }
            }
        }
        Ok(worst)
    }
}

fn interleave<T: Real>(img: &Image<T>) -> Vec<f64> {
    let mut out = Vec::with_capacity(img.data().len());
    for i in 0..img.pixels() {
        out.extend(img.rgb(i).iter().map(|v| v.to_f64()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_round_trip() {
        let vals = [1.5, -0.0, f64::MIN_POSITIVE, 1e300, 3.25, 7.0];
        let a = GoldenArray::encode(&[2, 3], &vals);
        assert_eq!(a.values().unwrap(), vals);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut a = GoldenArray::encode(&[2], &[1.0, 2.0]);
        a.shape = vec![3];
        assert!(matches!(a.values(), Err(Error::Shape(_))));
    }

    #[test]
    fn minimal_unfold_case() {
        let img = [0.1, 0.2, 0.3];
        let mut arrays = BTreeMap::new();
        arrays.insert("image".to_string(), GoldenArray::encode(&[1, 1, 3], &img));
        arrays.insert("expected.features".to_string(), GoldenArray::encode(&[1, 1, 3], &img));
        let case = GoldenCase {
            name: "tiny".into(),
            operation: "unfold".into(),
            seed: 0,
            tolerance: Tolerance { f32: 0.0, f64: 0.0 },
            params: serde_json::json!({"radius": 0}),
            arrays,
        };
        let text = serde_json::to_string(&case).unwrap();
        let back = GoldenCase::from_json(&text).unwrap();
        assert!(back.check::<f64>().unwrap().passed());
    }

    #[test]
    fn unknown_operation_is_config_error() {
        let case = GoldenCase {
            name: "x".into(),
            operation: "nope".into(),
            seed: 0,
            tolerance: Tolerance { f32: 0.0, f64: 0.0 },
            params: serde_json::Value::Null,
            arrays: BTreeMap::new(),
        };
        assert!(matches!(case.replay::<f32>(false), Err(Error::Config(_))));
    }
}
