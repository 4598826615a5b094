//! Coarse-to-fine MLP decoder with slice ensemble.
//!
//! For every slice of a coordinate group the coarse stage runs once per
//! vertex of the group's rectangle `R*` (the latent cell around the group's
//! latent code). Its input is the 4×4 unfolded latent neighbourhood of that
//! vertex plus the slice's first and last coordinates relative to the
//! vertex. The four vertex hidden vectors are blended per member coordinate
//! with area weights, and the fine stage maps the blended hidden vector and
//! the member's offset from the group's latent code to RGB.
//!
//! Local coordinates put `R*` on `[-1, 1]²`, so vertex `t` sits at `t` and
//! an offset `x − v_t` is `local(x) − t`. One local unit is half a latent cell
//! on every group, which keeps vertex-relative offsets consistent between
//! neighbouring groups.

mod reference;

pub use reference::{decode_reference_per_pixel, ReferenceArchitecture, ReferenceWeights};

use std::ops::Range;

use rayon::prelude::*;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::{Group, GroupPlan, Grouping};
use crate::numerics::{Matrix, Mlp, MlpCache, Real};
use crate::pipeline::Image;

/// Rectangle vertices in local `(y, x)` coordinates, in the order top-left,
/// top-right, bottom-left, bottom-right.
pub const VERTICES: [[f64; 2]; 4] = [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]];

/// Offsets (in latent cells) of the 4×4 neighbourhood gathered at a vertex.
pub const VERTEX_UNFOLD_OFFSETS: [f64; 4] = [-1.5, -0.5, 0.5, 1.5];

/// Pixels decoded per batch in [`decode_image`].
pub const DEFAULT_BATCH_PIXELS: usize = 8192;

/// Layer layout of a C2F-MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    /// Latent code depth `D_M`.
    pub feature_depth: usize,
    pub hidden: usize,
    /// Linear layers in the coarse stage, each followed by ReLU.
    pub coarse_layers: usize,
    /// Linear layers in the fine stage; the last one is the RGB head.
    pub fine_layers: usize,
    /// With ensemble the coarse stage sees 4×4 vertex codes; without it, the
    /// 3×3 unfolded code of the group's own latent.
    pub ensemble: bool,
}

impl Architecture {
    /// Two coarse hidden layers, two fine hidden layers plus RGB head,
    /// hidden width 256, slice ensemble on.
    pub fn diif(feature_depth: usize) -> Self {
        Self {
            feature_depth,
            hidden: 256,
            coarse_layers: 2,
            fine_layers: 3,
            ensemble: true,
        }
    }

    pub fn code_width(&self) -> usize {
        if self.ensemble {
            16 * self.feature_depth
        } else {
            9 * self.feature_depth
        }
    }

    pub fn coarse_input_width(&self) -> usize {
        self.code_width() + 4
    }

    pub fn fine_input_width(&self) -> usize {
        self.hidden + 2
    }

    pub fn coarse_widths(&self) -> Vec<usize> {
        let mut w = vec![self.coarse_input_width()];
        w.extend(std::iter::repeat_n(self.hidden, self.coarse_layers));
        w
    }

    pub fn fine_widths(&self) -> Vec<usize> {
        let mut w = vec![self.fine_input_width()];
        w.extend(std::iter::repeat_n(self.hidden, self.fine_layers - 1));
        w.push(3);
        w
    }

    /// Multiplies in one coarse-stage forward.
    pub fn coarse_macs(&self) -> u64 {
        self.coarse_widths().windows(2).map(|w| (w[0] * w[1]) as u64).sum()
    }

    /// Multiplies in one fine-stage forward.
    pub fn fine_macs(&self) -> u64 {
        self.fine_widths().windows(2).map(|w| (w[0] * w[1]) as u64).sum()
    }

    /// Coarse forwards per slice.
    pub fn vertices_per_slice(&self) -> u64 {
        if self.ensemble {
            4
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_depth == 0 || self.hidden == 0 || self.coarse_layers == 0 || self.fine_layers == 0 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

/// Trained parameters of both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights<T = f32> {
    pub arch: Architecture,
    pub coarse: Mlp<T>,
    pub fine: Mlp<T>,
}

impl<T: Real> DecoderWeights<T> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            coarse: Mlp::zeros(&arch.coarse_widths(), true),
            fine: Mlp::zeros(&arch.fine_widths(), false),
        })
    }

    /// Assembles weights from layer lists, inferring whether the coarse
    /// stage expects vertex (4×4) or centre (3×3) codes from its input width.
    pub fn from_layers(
        feature_depth: usize,
        hidden: usize,
        coarse: Vec<crate::numerics::Linear<T>>,
        fine: Vec<crate::numerics::Linear<T>>,
    ) -> Result<Self> {
        let first = coarse
            .first()
            .ok_or_else(|| Error::Config("coarse stage has no layers".into()))?;
        let ensemble = if first.inputs() == 16 * feature_depth + 4 {
            true
        } else if first.inputs() == 9 * feature_depth + 4 {
            false
        } else {
            return Err(Error::Config(format!(
                "coarse input width {} fits neither 16·{feature_depth}+4 nor 9·{feature_depth}+4",
                first.inputs()
            )));
        };
        let arch = Architecture {
            feature_depth,
            hidden,
            coarse_layers: coarse.len(),
            fine_layers: fine.len(),
            ensemble,
        };
        let w = Self {
            arch,
            coarse: Mlp {
                layers: coarse,
                relu_on_output: true,
            },
            fine: Mlp {
                layers: fine,
                relu_on_output: false,
            },
        };
        w.validate()?;
        Ok(w)
    }

    /// Checks that every layer shape matches the architecture.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        check_stage("coarse", &self.coarse, &self.arch.coarse_widths())?;
        check_stage("fine", &self.fine, &self.arch.fine_widths())
    }

    pub fn parameter_count(&self) -> usize {
        self.coarse.parameter_count() + self.fine.parameter_count()
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut t = self.coarse.tensors();
        t.extend(self.fine.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut t = self.coarse.tensors_mut();
        t.extend(self.fine.tensors_mut());
        t
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut n = self.coarse.tensor_names("coarse");
        n.extend(self.fine.tensor_names("fine"));
        n
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            coarse: self.coarse.zeros_like(),
            fine: self.fine.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.coarse.add_assign(&other.coarse);
        self.fine.add_assign(&other.fine);
    }

    pub fn cast<U: Real>(&self) -> DecoderWeights<U> {
        DecoderWeights {
            arch: self.arch,
            coarse: self.coarse.cast(),
            fine: self.fine.cast(),
        }
    }
}

pub(crate) fn check_stage<T: Real>(name: &str, mlp: &Mlp<T>, widths: &[usize]) -> Result<()> {
    if mlp.layers.len() + 1 != widths.len() {
        return Err(Error::Config(format!(
            "{name} stage has {} layers, architecture expects {}",
            mlp.layers.len(),
            widths.len() - 1
        )));
    }
    for (i, (layer, w)) in mlp.layers.iter().zip(widths.windows(2)).enumerate() {
        if layer.inputs() != w[0] || layer.outputs() != w[1] || layer.bias.len() != w[1] {
            return Err(Error::Config(format!(
                "{name} layer {i} is {}x{}, expected {}x{}",
                layer.inputs(),
                layer.outputs(),
                w[0],
                w[1]
            )));
        }
    }
    Ok(())
}

/// Latent-cell corner index of vertex `t` of the group anchored at latent
/// `(row, col)`. Corner `(ci, cj)` sits at latent position `(ci − ½, cj − ½)`.
#[inline]
pub fn vertex_corner(lat_row: usize, lat_col: usize, t: usize) -> (usize, usize) {
    let [ty, tx] = VERTICES[t];
    (lat_row + (ty > 0.0) as usize, lat_col + (tx > 0.0) as usize)
}

fn write_vertex_code<T: Real>(features: &FeatureMap<T>, corner: (usize, usize), out: &mut [T]) {
    let d = features.depth();
    let (ci, cj) = (corner.0 as isize, corner.1 as isize);
    let mut k = 0;
    // corner + {-1.5, -0.5, 0.5, 1.5} lands on integer cells ci-2 ..= ci+1
    for dl in -2..=1 {
        for dm in -2..=1 {
            out[k * d..(k + 1) * d].copy_from_slice(features.code_clamped(ci + dl, cj + dm));
            k += 1;
        }
    }
}

fn scatter_vertex_code<T: Real>(grad: &mut FeatureMap<T>, corner: (usize, usize), g: &[T]) {
    let d = grad.depth();
    let (h, w) = (grad.height() as isize, grad.width() as isize);
    let (ci, cj) = (corner.0 as isize, corner.1 as isize);
    let mut k = 0;
    for dl in -2..=1 {
        for dm in -2..=1 {
            let r = (ci + dl).clamp(0, h - 1) as usize;
            let c = (cj + dm).clamp(0, w - 1) as usize;
            for (acc, &v) in grad.code_mut(r, c).iter_mut().zip(&g[k * d..(k + 1) * d]) {
                *acc += v;
            }
            k += 1;
        }
    }
}

/// Clamped 3×3 neighbourhood of a latent code, row-major.
pub(crate) fn write_center_code<T: Real>(features: &FeatureMap<T>, lat: (usize, usize), out: &mut [T]) {
    let d = features.depth();
    let (i, j) = (lat.0 as isize, lat.1 as isize);
    let mut k = 0;
    for dl in -1..=1 {
        for dm in -1..=1 {
            out[k * d..(k + 1) * d].copy_from_slice(features.code_clamped(i + dl, j + dm));
            k += 1;
        }
    }
}

fn scatter_center_code<T: Real>(grad: &mut FeatureMap<T>, lat: (usize, usize), g: &[T]) {
    let d = grad.depth();
    let (h, w) = (grad.height() as isize, grad.width() as isize);
    let (i, j) = (lat.0 as isize, lat.1 as isize);
    let mut k = 0;
    for dl in -1..=1 {
        for dm in -1..=1 {
            let r = (i + dl).clamp(0, h - 1) as usize;
            let c = (j + dm).clamp(0, w - 1) as usize;
            for (acc, &v) in grad.code_mut(r, c).iter_mut().zip(&g[k * d..(k + 1) * d]) {
                *acc += v;
            }
            k += 1;
        }
    }
}

/// Concatenated 4×4 latent neighbourhood (`16·D_M` values) of a cell corner,
/// with clamp-to-edge borders.
pub fn unfold_vertex_code<T: Real>(features: &FeatureMap<T>, corner: (usize, usize)) -> Vec<T> {
    let mut out = vec![T::ZERO; 16 * features.depth()];
    write_vertex_code(features, corner, &mut out);
    out
}

/// Member offsets from the group's latent code, with `R*` on `[-1, 1]²`.
pub fn local_coords(grouping: &Grouping, group: &Group) -> Vec<[f64; 2]> {
    grouping.local_coords(group)
}

/// Normalised area weights of the four vertices for a query at local
/// coordinate `q`: the weight of vertex `t` is the area of the rectangle
/// spanned by `q` and the diagonally opposite vertex, divided by the area
/// of `R*`.
pub fn ensemble_weights(q: [f64; 2]) -> [f64; 4] {
    let q = [q[0].clamp(-1.0, 1.0), q[1].clamp(-1.0, 1.0)];
    let area_r = 4.0;
    let mut w = [0.0; 4];
    for (t, v) in VERTICES.iter().enumerate() {
        let diag = [-v[0], -v[1]];
        w[t] = (q[0] - diag[0]).abs() * (q[1] - diag[1]).abs() / area_r;
    }
    w
}

/// Blends four vertex hidden vectors with the given weights into `out`.
pub fn ensemble_hidden_into<T: Real>(vertex: [&[T]; 4], weights: [T; 4], out: &mut [T]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = weights[0] * vertex[0][j]
            + weights[1] * vertex[1][j]
            + weights[2] * vertex[2][j]
            + weights[3] * vertex[3][j];
    }
}

pub fn ensemble_hidden<T: Real>(vertex: [&[T]; 4], query: [f64; 2]) -> Vec<T> {
    let w = ensemble_weights(query).map(T::from_f64);
    let mut out = vec![T::ZERO; vertex[0].len()];
    ensemble_hidden_into(vertex, w, &mut out);
    out
}

fn push_coords<T: Real>(out: &mut [T], a: [f64; 2], b: [f64; 2]) {
    out[0] = T::from_f64(a[0]);
    out[1] = T::from_f64(a[1]);
    out[2] = T::from_f64(b[0]);
    out[3] = T::from_f64(b[1]);
}

/// Coarse stage on one vertex (or centre) code and the slice's first and
/// last offsets relative to that anchor.
pub fn coarse_forward<T: Real>(code: &[T], first_rel: [f64; 2], last_rel: [f64; 2], coarse: &Mlp<T>) -> Result<Vec<T>> {
    if code.len() + 4 != coarse.input_width() {
        return Err(Error::Config(format!(
            "coarse stage expects {} inputs, got a {}-wide code",
            coarse.input_width(),
            code.len()
        )));
    }
    let mut row = code.to_vec();
    row.extend([first_rel[0], first_rel[1], last_rel[0], last_rel[1]].map(T::from_f64));
    let x = Matrix::from_vec(1, row.len(), row)?;
    Ok(coarse.forward(&x)?.into_vec())
}

/// Fine stage: blended hidden vector plus the member's offset from the
/// group's latent code, to an unclamped RGB triple.
pub fn fine_forward<T: Real>(hidden: &[T], rel: [f64; 2], fine: &Mlp<T>) -> Result<[T; 3]> {
    if hidden.len() + 2 != fine.input_width() || fine.output_width() != 3 {
        return Err(Error::Config(format!(
            "fine stage is {}→{}, got {} hidden values",
            fine.input_width(),
            fine.output_width(),
            hidden.len()
        )));
    }
    let mut row = hidden.to_vec();
    row.push(T::from_f64(rel[0]));
    row.push(T::from_f64(rel[1]));
    let x = Matrix::from_vec(1, row.len(), row)?;
    let y = fine.forward(&x)?;
    Ok([y.get(0, 0), y.get(0, 1), y.get(0, 2)])
}

fn check_inputs<T: Real>(features: &FeatureMap<T>, plan: &GroupPlan, weights: &DecoderWeights<T>) -> Result<()> {
    let lat = plan.latent();
    if lat.height != features.height() || lat.width != features.width() {
        return Err(Error::Config(format!(
            "plan was built for a {}x{} latent grid, feature map is {}x{}",
            lat.height,
            lat.width,
            features.height(),
            features.width()
        )));
    }
    if weights.arch.feature_depth != features.depth() {
        return Err(Error::Config(format!(
            "decoder expects depth {}, feature map has {}",
            weights.arch.feature_depth,
            features.depth()
        )));
    }
    weights.validate()
}

/// Source of a coarse-stage row, for scattering feature gradients.
#[derive(Clone, Copy, Debug)]
enum Anchor {
    Corner(usize, usize),
    Center(usize, usize),
}

/// Inputs of one batched decode over a run of groups.
struct Batch<T> {
    coarse_in: Matrix<T>,
    anchors: Vec<Anchor>,
    /// Output pixel index of every fine row.
    out_index: Vec<usize>,
    /// Slice slot of every fine row.
    slot: Vec<usize>,
    weights: Vec<[T; 4]>,
    local: Vec<[f64; 2]>,
}

fn build_batch<T: Real>(
    features: &FeatureMap<T>,
    plan: &GroupPlan,
    arch: &Architecture,
    groups: Range<usize>,
) -> Result<Batch<T>> {
    let grouping = &plan.grouping;
    let out_w = plan.output().width;
    let per_slice = arch.vertices_per_slice() as usize;
    let code_w = arch.code_width();
    let in_w = arch.coarse_input_width();

    let mut slices = Vec::new();
    let mut pixels = 0;
    for id in groups {
        let g = grouping.group(id);
        pixels += g.size();
        for s in plan.slices_of(&g) {
            slices.push((g.clone(), s.members));
        }
    }

    let mut coarse = vec![T::ZERO; slices.len() * per_slice * in_w];
    let mut anchors = Vec::with_capacity(slices.len() * per_slice);
    let mut out_index = Vec::with_capacity(pixels);
    let mut slot = Vec::with_capacity(pixels);
    let mut weights = Vec::with_capacity(pixels);
    let mut local = Vec::with_capacity(pixels);

    for (s, (g, members)) in slices.iter().enumerate() {
        let (fr, fc) = g.member(members.start);
        let (lr, lc) = g.member(members.end - 1);
        let first = grouping.local(fr, fc);
        let last = grouping.local(lr, lc);
        for v in 0..per_slice {
            let row = &mut coarse[(s * per_slice + v) * in_w..(s * per_slice + v + 1) * in_w];
            if arch.ensemble {
                let corner = vertex_corner(g.lat_row, g.lat_col, v);
                write_vertex_code(features, corner, &mut row[..code_w]);
                let t = VERTICES[v];
                push_coords(
                    &mut row[code_w..],
                    [first[0] - t[0], first[1] - t[1]],
                    [last[0] - t[0], last[1] - t[1]],
                );
                anchors.push(Anchor::Corner(corner.0, corner.1));
            } else {
                write_center_code(features, (g.lat_row, g.lat_col), &mut row[..code_w]);
                push_coords(&mut row[code_w..], first, last);
                anchors.push(Anchor::Center(g.lat_row, g.lat_col));
            }
        }
        for k in members.clone() {
            let (r, c) = g.member(k);
            let l = grouping.local(r, c);
            out_index.push(r * out_w + c);
            slot.push(s);
            weights.push(if arch.ensemble {
                ensemble_weights(l).map(T::from_f64)
            } else {
                [T::ONE, T::ZERO, T::ZERO, T::ZERO]
            });
            local.push(l);
        }
    }

    Ok(Batch {
        coarse_in: Matrix::from_vec(slices.len() * per_slice, in_w, coarse)?,
        anchors,
        out_index,
        slot,
        weights,
        local,
    })
}

/// Fine-stage input rows from coarse outputs.
fn fine_inputs<T: Real>(batch: &Batch<T>, hidden: &Matrix<T>, arch: &Architecture) -> Result<Matrix<T>> {
    let h = arch.hidden;
    let w = h + 2;
    let per_slice = arch.vertices_per_slice() as usize;
    let mut x = Matrix::zeros(batch.out_index.len(), w);
    for p in 0..batch.out_index.len() {
        let s = batch.slot[p];
        let row = x.row_mut(p);
        if arch.ensemble {
            let base = s * per_slice;
            let vs = [
                hidden.row(base),
                hidden.row(base + 1),
                hidden.row(base + 2),
                hidden.row(base + 3),
            ];
            ensemble_hidden_into(vs, batch.weights[p], &mut row[..h]);
        } else {
            row[..h].copy_from_slice(hidden.row(s));
        }
        row[h] = T::from_f64(batch.local[p][0]);
        row[h + 1] = T::from_f64(batch.local[p][1]);
    }
    Ok(x)
}

fn run_batch<T: Real>(batch: &Batch<T>, weights: &DecoderWeights<T>) -> Result<Matrix<T>> {
    let hidden = weights.coarse.forward(&batch.coarse_in)?;
    let x = fine_inputs(batch, &hidden, &weights.arch)?;
    weights.fine.forward(&x)
}

/// Runs of consecutive groups holding at most `max_pixels` pixels each (a
/// single larger group forms its own run).
fn group_runs(plan: &GroupPlan, max_pixels: usize) -> Vec<Range<usize>> {
    let mut runs = Vec::new();
    let mut start = 0;
    let mut acc = 0;
    for g in plan.grouping.groups() {
        if acc > 0 && acc + g.size() > max_pixels {
            runs.push(start..g.id);
            start = g.id;
            acc = 0;
        }
        acc += g.size();
    }
    if start < plan.grouping.group_count() {
        runs.push(start..plan.grouping.group_count());
    }
    runs
}

/// Decodes the full output grid of `plan`.
///
/// Groups are processed in parallel batches of about
/// [`DEFAULT_BATCH_PIXELS`] pixels. Every output value is computed by the
/// same sequence of operations regardless of batching or thread count.
pub fn decode_image<T: Real>(
    features: &FeatureMap<T>,
    plan: &GroupPlan,
    weights: &DecoderWeights<T>,
) -> Result<Image<T>> {
    decode_image_batched(features, plan, weights, DEFAULT_BATCH_PIXELS)
}

pub fn decode_image_batched<T: Real>(
    features: &FeatureMap<T>,
    plan: &GroupPlan,
    weights: &DecoderWeights<T>,
    max_batch_pixels: usize,
) -> Result<Image<T>> {
    check_inputs(features, plan, weights)?;
    let out = plan.output();
    let runs = group_runs(plan, max_batch_pixels.max(1));
    let parts = runs
        .into_par_iter()
        .map(|run| {
            let batch = build_batch(features, plan, &weights.arch, run)?;
            let rgb = run_batch(&batch, weights)?;
            Ok((batch.out_index, rgb))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut img = Image::new(out.height, out.width);
    for (idx, rgb) in parts {
        for (p, &o) in idx.iter().enumerate() {
            img.set_rgb(o, [rgb.get(p, 0), rgb.get(p, 1), rgb.get(p, 2)]);
        }
    }
    Ok(img)
}

/// Straight-line decode: one slice at a time, one coarse forward per
/// vertex and one fine forward per member. Used as the reference for the
/// batched path.
pub fn decode_image_sequential<T: Real>(
    features: &FeatureMap<T>,
    plan: &GroupPlan,
    weights: &DecoderWeights<T>,
) -> Result<Image<T>> {
    check_inputs(features, plan, weights)?;
    let grouping = &plan.grouping;
    let out = plan.output();
    let arch = &weights.arch;
    let mut img = Image::new(out.height, out.width);
    for g in grouping.groups() {
        for slice in plan.slices_of(&g) {
            let (fr, fc) = g.member(slice.members.start);
            let (lr, lc) = g.member(slice.members.end - 1);
            let first = grouping.local(fr, fc);
            let last = grouping.local(lr, lc);
            let hidden: Vec<Vec<T>> = if arch.ensemble {
                (0..4)
                    .map(|t| {
                        let code = unfold_vertex_code(features, vertex_corner(g.lat_row, g.lat_col, t));
                        let v = VERTICES[t];
                        coarse_forward(
                            &code,
                            [first[0] - v[0], first[1] - v[1]],
                            [last[0] - v[0], last[1] - v[1]],
                            &weights.coarse,
                        )
                    })
                    .collect::<Result<_>>()?
            } else {
                let mut code = vec![T::ZERO; 9 * features.depth()];
                write_center_code(features, (g.lat_row, g.lat_col), &mut code);
                vec![coarse_forward(&code, first, last, &weights.coarse)?]
            };
            for k in slice.members.clone() {
                let (r, c) = g.member(k);
                let l = grouping.local(r, c);
                let blended = if arch.ensemble {
                    ensemble_hidden([&hidden[0], &hidden[1], &hidden[2], &hidden[3]], l)
                } else {
                    hidden[0].clone()
                };
                let rgb = fine_forward(&blended, l, &weights.fine)?;
                img.set_rgb(r * out.width + c, rgb);
            }
        }
    }
    Ok(img)
}

/// Hidden vector and RGB predicted at an arbitrary continuous coordinate,
/// treating the query as a single-coordinate slice.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPrediction<T> {
    pub latent: (usize, usize),
    pub local: [f64; 2],
    pub hidden: Vec<T>,
    pub rgb: [T; 3],
}

fn nearest_latent(coord: f64, n: usize) -> (usize, f64) {
    let m = n as f64;
    let guess = (((coord + 1.0) * m / 2.0 - 0.5).round()).clamp(0.0, m - 1.0) as usize;
    let mut best = guess;
    let center = |j: usize| -1.0 + (2 * j + 1) as f64 / m;
    for j in guess.saturating_sub(1)..=(guess + 1).min(n - 1) {
        let (dj, db) = ((coord - center(j)).abs(), (coord - center(best)).abs());
        if dj < db || (dj == db && j < best) {
            best = j;
        }
    }
    (best, (coord - center(best)) * m)
}

pub fn query_point<T: Real>(
    features: &FeatureMap<T>,
    weights: &DecoderWeights<T>,
    coord: [f64; 2],
) -> Result<PointPrediction<T>> {
    if weights.arch.feature_depth != features.depth() {
        return Err(Error::Config("feature depth does not match decoder".into()));
    }
    let (i, ly) = nearest_latent(coord[0], features.height());
    let (j, lx) = nearest_latent(coord[1], features.width());
    let l = [ly, lx];
    let hidden = if weights.arch.ensemble {
        let hs: Vec<Vec<T>> = (0..4)
            .map(|t| {
                let code = unfold_vertex_code(features, vertex_corner(i, j, t));
                let v = VERTICES[t];
                let rel = [l[0] - v[0], l[1] - v[1]];
                coarse_forward(&code, rel, rel, &weights.coarse)
            })
            .collect::<Result<_>>()?;
        ensemble_hidden([&hs[0], &hs[1], &hs[2], &hs[3]], l)
    } else {
        let mut code = vec![T::ZERO; 9 * features.depth()];
        write_center_code(features, (i, j), &mut code);
        coarse_forward(&code, l, l, &weights.coarse)?
    };
    let rgb = fine_forward(&hidden, l, &weights.fine)?;
    Ok(PointPrediction {
        latent: (i, j),
        local: l,
        hidden,
        rgb,
    })
}

/// Activations retained by a cached forward pass.
pub struct DecodeCache<T> {
    batch: Batch<T>,
    coarse: MlpCache<T>,
    fine: MlpCache<T>,
    out_height: usize,
    out_width: usize,
    feature_shape: (usize, usize, usize),
}

/// Parameter (and feature-map) gradients from [`DecodePass::backward`].
#[derive(Clone, Debug)]
pub struct DecoderGradients<T> {
    pub weights: DecoderWeights<T>,
    pub features: FeatureMap<T>,
}

/// A forward/backward pair over one image for training.
pub struct DecodePass<'w, T> {
    weights: &'w DecoderWeights<T>,
    cache: Option<DecodeCache<T>>,
}

impl<'w, T: Real> DecodePass<'w, T> {
    pub fn new(weights: &'w DecoderWeights<T>) -> Self {
        Self { weights, cache: None }
    }

    /// Decodes the whole plan as one batch. With `keep_cache` the
    /// activations are retained for [`DecodePass::backward`].
    pub fn forward(&mut self, features: &FeatureMap<T>, plan: &GroupPlan, keep_cache: bool) -> Result<Image<T>> {
        check_inputs(features, plan, self.weights)?;
        let out = plan.output();
        let batch = build_batch(features, plan, &self.weights.arch, 0..plan.grouping.group_count())?;
        let coarse = self.weights.coarse.forward_cached(batch.coarse_in.clone())?;
        let x = fine_inputs(&batch, coarse.output(), &self.weights.arch)?;
        let fine = self.weights.fine.forward_cached(x)?;
        let mut img = Image::new(out.height, out.width);
        let rgb = fine.output();
        for (p, &o) in batch.out_index.iter().enumerate() {
            img.set_rgb(o, [rgb.get(p, 0), rgb.get(p, 1), rgb.get(p, 2)]);
        }
        self.cache = if keep_cache {
            Some(DecodeCache {
                batch,
                coarse,
                fine,
                out_height: out.height,
                out_width: out.width,
                feature_shape: (features.height(), features.width(), features.depth()),
            })
        } else {
            None
        };
        Ok(img)
    }

    /// Smallest `|z|` over every ReLU input of the cached pass, or `None`
    /// without a cache. Finite-difference checks need this to stay clear of
    /// kinks.
    pub fn relu_margin(&self) -> Result<Option<f64>> {
        let Some(cache) = &self.cache else {
            return Ok(None);
        };
        let mut margin = f64::INFINITY;
        for (mlp, c) in [(&self.weights.coarse, &cache.coarse), (&self.weights.fine, &cache.fine)] {
            for z in mlp.pre_activations(c.input())? {
                margin = z.data().iter().fold(margin, |m, v| m.min(v.to_f64().abs()));
            }
        }
        Ok(Some(margin))
    }

    /// Reverse pass given `∂loss/∂output` as an image.
    ///
    /// Ensemble weights depend only on geometry, so the blend routes the
    /// hidden gradient to the four vertex rows scaled by those weights.
    pub fn backward(&self, d_output: &Image<T>) -> Result<DecoderGradients<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        if d_output.height() != cache.out_height || d_output.width() != cache.out_width {
            return Err(Error::Shape("output gradient does not match decoded image".into()));
        }
        let arch = &self.weights.arch;
        let batch = &cache.batch;
        let h = arch.hidden;
        let per_slice = arch.vertices_per_slice() as usize;

        let mut grads = self.weights.zeros_like();
        let mut d_rgb = Matrix::zeros(batch.out_index.len(), 3);
        for (p, &o) in batch.out_index.iter().enumerate() {
            let g = d_output.rgb(o);
            d_rgb.row_mut(p).copy_from_slice(&g);
        }
        let d_fine_in = self.weights.fine.backward(&cache.fine, d_rgb, &mut grads.fine)?;

        let mut d_hidden = Matrix::zeros(batch.coarse_in.rows(), h);
        for p in 0..batch.out_index.len() {
            let s = batch.slot[p];
            let g = &d_fine_in.row(p)[..h];
            for v in 0..per_slice {
                let w = batch.weights[p][v];
                let dst = d_hidden.row_mut(s * per_slice + v);
                for (acc, &gv) in dst.iter_mut().zip(g) {
                    *acc += w * gv;
                }
            }
        }
        let d_coarse_in = self
            .weights
            .coarse
            .backward(&cache.coarse, d_hidden, &mut grads.coarse)?;

        let (fh, fw, fd) = cache.feature_shape;
        let mut d_features = FeatureMap::zeros(fh, fw, fd);
        let code_w = arch.code_width();
        for (r, anchor) in batch.anchors.iter().enumerate() {
            let g = &d_coarse_in.row(r)[..code_w];
            match *anchor {
                Anchor::Corner(ci, cj) => scatter_vertex_code(&mut d_features, (ci, cj), g),
                Anchor::Center(i, j) => scatter_center_code(&mut d_features, (i, j), g),
            }
        }
        Ok(DecoderGradients {
            weights: grads,
            features: d_features,
        })
    }
}
