//! Feature maps: the parameter-free unfold encoder, and the binary
//! feature-map and weight file formats.
//!
//! All formats are little-endian:
//!
//! * `DIFM` feature map: magic, version `u32 = 1`, `H`, `W`, `D_M` as `u32`,
//!   then `H·W·D_M` `f32` values ordered by (row, col, channel).
//! * `DIIF` decoder weights: magic, version `u32 = 1`, `D_M`, hidden dim,
//!   coarse layer count, fine layer count (all `u32`); then for every layer,
//!   coarse first: `rows u32`, `cols u32`, `rows·cols` `f32` row-major weights
//!   (`rows` = layer input width) and `cols` `f32` biases.
//! * `LIIR` reference decoder weights: identical header with the layer count
//!   in the coarse slot and `0` in the fine slot, followed by the single
//!   stage's layers.

use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::decoder::{DecoderWeights, ReferenceArchitecture, ReferenceWeights};
use crate::error::{Error, Result};
use crate::geometry::{make_grid, CoordGrid};
use crate::numerics::{Linear, Matrix, Mlp, Real};
use crate::pipeline::Image;

pub const FEATURE_MAGIC: &[u8; 4] = b"DIFM";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"DIIF";
pub const REFERENCE_MAGIC: &[u8; 4] = b"LIIR";
pub const FORMAT_VERSION: u32 = 1;

/// `H × W × D_M` latent grid, row-major by (row, col, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::Argument(format!(
                "feature map dimensions must be positive, got {height}x{width}x{depth}"
            )));
        }
        if data.len() != height * width * depth {
            return Err(Error::Shape(format!(
                "{height}x{width}x{depth} feature map needs {} values, got {}",
                height * width * depth,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Self {
            height,
            width,
            depth,
            data: vec![T::ZERO; height * width * depth],
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Latent code at `(row, col)`.
    #[inline]
    pub fn code(&self, row: usize, col: usize) -> &[T] {
        let off = (row * self.width + col) * self.depth;
        &self.data[off..off + self.depth]
    }

    #[inline]
    pub fn code_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let off = (row * self.width + col) * self.depth;
        &mut self.data[off..off + self.depth]
    }

    /// Code at a possibly out-of-range position, clamped to the border.
    #[inline]
    pub fn code_clamped(&self, row: isize, col: isize) -> &[T] {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.code(r, c)
    }

    /// Pixel-centre coordinates of the latent codes.
    pub fn latent_grid(&self) -> CoordGrid {
        make_grid(self.height, self.width).expect("feature map dimensions are positive")
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            height: self.height,
            width: self.width,
            depth: self.depth,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Learning-free encoder: every latent code is the clamped `(2r+1)²` RGB
/// neighbourhood of its pixel, neighbours row-major, RGB within each.
pub fn unfold_encode<T: Real>(image: &Image<T>, radius: usize) -> FeatureMap<T> {
    let (h, w) = (image.height(), image.width());
    let r = radius as isize;
    let side = 2 * radius + 1;
    let depth = 3 * side * side;
    let mut data = Vec::with_capacity(h * w * depth);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -r..=r {
                for dx in -r..=r {
                    for c in 0..3 {
                        data.push(image.get_clamped(c, y + dy, x + dx));
                    }
                }
            }
        }
    }
    FeatureMap {
        height: h,
        width: w,
        depth,
        data,
    }
}

impl FeatureMap<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [FORMAT_VERSION, self.height as u32, self.width as u32, self.depth as u32] {
            out.write_u32::<LittleEndian>(v).unwrap();
        }
        for &v in &self.data {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(FEATURE_MAGIC)?;
        r.version("feature map")?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let d = r.u32()? as usize;
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::format(8, format!("zero dimension in {h}x{w}x{d} header")));
        }
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(d))
            .ok_or_else(|| Error::format(8, "dimensions overflow"))?;
        let data = r.f32s(n)?;
        r.finish()?;
        FeatureMap::new(h, w, d, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMap::from_bytes(&bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn write_layers(out: &mut Vec<u8>, layers: &[Linear<f32>]) {
    for layer in layers {
        out.write_u32::<LittleEndian>(layer.inputs() as u32).unwrap();
        out.write_u32::<LittleEndian>(layer.outputs() as u32).unwrap();
        for &v in layer.weight.data() {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        for &v in &layer.bias {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
    }
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], fields: [usize; 4]) {
    out.extend_from_slice(magic);
    out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    for v in fields {
        out.write_u32::<LittleEndian>(v as u32).unwrap();
    }
}

impl DecoderWeights<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let a = &self.arch;
        write_header(
            &mut out,
            WEIGHTS_MAGIC,
            [
                a.feature_depth,
                a.hidden,
                self.coarse.layers.len(),
                self.fine.layers.len(),
            ],
        );
        write_layers(&mut out, &self.coarse.layers);
        write_layers(&mut out, &self.fine.layers);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(WEIGHTS_MAGIC)?;
        r.version("weights")?;
        let depth = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let n_coarse = r.u32()? as usize;
        let n_fine = r.u32()? as usize;
        let coarse = r.layers(n_coarse)?;
        let fine = r.layers(n_fine)?;
        r.finish()?;
        DecoderWeights::from_layers(depth, hidden, coarse, fine)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }
}

impl ReferenceWeights<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_header(
            &mut out,
            REFERENCE_MAGIC,
            [self.arch.feature_depth, self.arch.hidden, self.mlp.layers.len(), 0],
        );
        write_layers(&mut out, &self.mlp.layers);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(REFERENCE_MAGIC)?;
        r.version("reference weights")?;
        let depth = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let n = r.u32()? as usize;
        let second = r.u32()?;
        if second != 0 {
            return Err(Error::format(20, "single-stage file must have an empty second stage"));
        }
        let layers = r.layers(n)?;
        r.finish()?;
        let arch = ReferenceArchitecture {
            feature_depth: depth,
            hidden,
            layers: n,
        };
        ReferenceWeights::from_parts(
            arch,
            Mlp {
                layers,
                relu_on_output: false,
            },
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<DecoderWeights<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    DecoderWeights::from_bytes(&bytes)
}

pub fn save_weights(path: impl AsRef<Path>, weights: &DecoderWeights<f32>) -> Result<()> {
    weights.save(path)
}

pub fn load_reference_weights(path: impl AsRef<Path>) -> Result<ReferenceWeights<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ReferenceWeights::from_bytes(&bytes)
}

/// Bounds-checked little-endian reader that reports byte offsets.
struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated while reading {what} ({} bytes left, {n} needed)",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    fn version(&mut self, kind: &'static str) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                kind,
                found: v,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, "u32 field")?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos as u64, "length overflow"))?;
        let raw = self.take(len, "f32 payload")?;
        let mut out = vec![0.0f32; n];
        LittleEndian::read_f32_into(raw, &mut out);
        Ok(out)
    }

    fn layers(&mut self, count: usize) -> Result<Vec<Linear<f32>>> {
        let mut layers = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let at = self.pos as u64;
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            if rows == 0 || cols == 0 {
                return Err(Error::format(at, format!("empty {rows}x{cols} layer")));
            }
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::format(at, "layer size overflow"))?;
            let weight = Matrix::from_vec(rows, cols, self.f32s(n)?)?;
            let bias = self.f32s(cols)?;
            layers.push(Linear { weight, bias });
        }
        Ok(layers)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Architecture;
    use crate::pipeline::weight_init;

    #[test]
    fn radius_zero_is_the_image() {
        let img = Image::<f32>::from_fn(3, 4, |c, y, x| (c + 3 * (y * 4 + x)) as f32 / 50.0);
        let fm = unfold_encode(&img, 0);
        assert_eq!(fm.depth(), 3);
        for y in 0..3 {
            for x in 0..4 {
                let code = fm.code(y, x);
                for (c, &v) in code.iter().enumerate().take(3) {
                    assert_eq!(v, img.get(c, y, x));
                }
            }
        }
    }

    #[test]
    fn constant_image_gives_constant_codes() {
        let img = Image::<f32>::from_fn(4, 4, |_, _, _| 0.25);
        let fm = unfold_encode(&img, 1);
        assert_eq!(fm.depth(), 27);
        assert!(fm.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn interior_code_matches_hand_gather() {
        let img = Image::<f32>::from_fn(5, 6, |c, y, x| (100 * c + 10 * y + x) as f32);
        let fm = unfold_encode(&img, 1);
        let mut expected = Vec::new();
        for y in 1..=3 {
            for x in 2..=4 {
                for c in 0..3 {
                    expected.push((100 * c + 10 * y + x) as f32);
                }
            }
        }
        assert_eq!(fm.code(2, 3), expected.as_slice());
    }

    #[test]
    fn unfold_is_translation_equivariant_in_the_interior() {
        let img = Image::<f32>::from_fn(8, 8, |c, y, x| ((c * 7 + y * 3 + x * 5) % 11) as f32);
        let shifted = Image::<f32>::from_fn(8, 8, |c, y, x| img.get_clamped(c, y as isize, x as isize - 1));
        let a = unfold_encode(&img, 1);
        let b = unfold_encode(&shifted, 1);
        for y in 1..7 {
            for x in 2..7 {
                assert_eq!(b.code(y, x), a.code(y, x - 1));
            }
        }
    }

    #[test]
    fn feature_map_round_trip_is_bit_exact() {
        let fm = FeatureMap::new(2, 3, 2, (0..12).map(|i| i as f32 * 0.37 - 1.0).collect()).unwrap();
        let bytes = fm.to_bytes();
        let back = FeatureMap::from_bytes(&bytes).unwrap();
        assert_eq!(back, fm);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_only_feature_map_is_a_format_error() {
        let fm = FeatureMap::<f32>::zeros(2, 2, 3);
        let bytes = fm.to_bytes();
        let err = FeatureMap::from_bytes(&bytes[..20]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 20, .. }), "{err}");
        let err = FeatureMap::from_bytes(&bytes[..3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn feature_map_bad_magic_and_version() {
        let mut bytes = FeatureMap::<f32>::zeros(1, 1, 1).to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            FeatureMap::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            FeatureMap::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn weights_save_load_save_is_byte_identical() {
        let arch = Architecture {
            feature_depth: 3,
            hidden: 8,
            coarse_layers: 2,
            fine_layers: 3,
            ensemble: true,
        };
        let w = weight_init(arch, 5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.diif");
        save_weights(&p, &w).unwrap();
        let back = load_weights(&p).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), std::fs::read(&p).unwrap());
    }

    #[test]
    fn weights_header_layout() {
        let w = weight_init(
            Architecture {
                feature_depth: 2,
                hidden: 4,
                coarse_layers: 1,
                fine_layers: 2,
                ensemble: true,
            },
            1,
        );
        let b = w.to_bytes();
        assert_eq!(&b[..4], b"DIIF");
        let fields: Vec<u32> = (0..5).map(|i| LittleEndian::read_u32(&b[4 + 4 * i..])).collect();
        assert_eq!(fields, vec![1, 2, 4, 1, 2]);
        // first layer: 16·2+4 = 36 rows, 4 cols
        assert_eq!(LittleEndian::read_u32(&b[24..]), 36);
        assert_eq!(LittleEndian::read_u32(&b[28..]), 4);
        let expected_len = 24 + (8 + 4 * (36 * 4 + 4)) + (8 + 4 * (6 * 4 + 4)) + (8 + 4 * (4 * 3 + 3));
        assert_eq!(b.len(), expected_len);
    }

    #[test]
    fn weights_errors() {
        let w = weight_init(
            Architecture {
                feature_depth: 2,
                hidden: 4,
                coarse_layers: 1,
                fine_layers: 2,
                ensemble: true,
            },
            1,
        );
        let mut b = w.to_bytes();
        let mut wrong = b.clone();
        wrong[..4].copy_from_slice(b"LIIR");
        assert!(matches!(
            DecoderWeights::from_bytes(&wrong),
            Err(Error::Format { offset: 0, .. })
        ));
        b[4] = 9;
        assert!(matches!(
            DecoderWeights::from_bytes(&b),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
        let good = w.to_bytes();
        assert!(matches!(
            DecoderWeights::from_bytes(&good[..good.len() - 1]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn reference_weights_round_trip() {
        let arch = ReferenceArchitecture {
            feature_depth: 3,
            hidden: 6,
            layers: 5,
        };
        let w = crate::pipeline::reference_weight_init(arch, 9);
        let b = w.to_bytes();
        assert_eq!(&b[..4], b"LIIR");
        let back = ReferenceWeights::from_bytes(&b).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn missing_file_is_io_error_with_path() {
        let err = load_weights("/no/such/weights.bin").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/no/such/weights.bin"));
    }
}
