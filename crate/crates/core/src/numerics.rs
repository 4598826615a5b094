//! Dense row-major matrices, linear layers, MLPs with manual backward
//! passes, the Adam optimizer, and a central-difference gradient oracle.
//!
//! Everything is generic over [`Real`] so that inference can run in `f32`
//! while gradient checks run in `f64`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Scalar type used by every numeric kernel in the crate.
///
/// Kept deliberately small so that instrumented scalar types (for example a
/// multiply-counting wrapper) can implement it.
pub trait Real:
    Copy
    + Send
    + Sync
    + Debug
    + Default
    + PartialOrd
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::ONE;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Below this many multiplies a matmul runs on the calling thread.
const PAR_MIN_WORK: usize = 1 << 16;

fn matmul_into<T: Real>(x: &Matrix<T>, w: &Matrix<T>, out: &mut Matrix<T>) {
    let inner = x.cols;
    let cols = w.cols;
    let kernel = |(xr, yr): (&[T], &mut [T])| {
        for (k, &a) in xr.iter().enumerate() {
            let wr = &w.data[k * cols..(k + 1) * cols];
            for (y, &b) in yr.iter_mut().zip(wr) {
                *y += a * b;
            }
        }
    };
    if cols == 0 || inner == 0 {
        return;
    }
    if x.rows * inner * cols >= PAR_MIN_WORK && x.rows > 1 {
        x.data
            .par_chunks(inner)
            .zip(out.data.par_chunks_mut(cols))
            .for_each(kernel);
    } else {
        x.data.chunks(inner).zip(out.data.chunks_mut(cols)).for_each(kernel);
    }
}

/// `y = x·w + b`, one multiply per (row, inner, col) triple.
///
/// Every output row is accumulated in the same order regardless of how rows
/// are distributed across threads, so the result is bit-identical for any
/// pool size.
pub fn matmul_add_bias<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Result<Matrix<T>> {
    if x.cols != w.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            x.rows, x.cols, w.rows, w.cols
        )));
    }
    if b.len() != w.cols {
        return Err(Error::Shape(format!(
            "bias length {} does not match {} output columns",
            b.len(),
            w.cols
        )));
    }
    let mut out = Matrix::zeros(x.rows, w.cols);
    if !b.is_empty() {
        for row in out.data.chunks_mut(w.cols) {
            row.copy_from_slice(b);
        }
    }
    matmul_into(x, w, &mut out);
    Ok(out)
}

pub fn matmul<T: Real>(x: &Matrix<T>, w: &Matrix<T>) -> Result<Matrix<T>> {
    if x.cols != w.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            x.rows, x.cols, w.rows, w.cols
        )));
    }
    let mut out = Matrix::zeros(x.rows, w.cols);
    matmul_into(x, w, &mut out);
    Ok(out)
}

pub fn relu<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

fn relu_in_place<T: Real>(x: &mut Matrix<T>) {
    for v in &mut x.data {
        if !(*v > T::ZERO) {
            *v = T::ZERO;
        }
    }
}

/// A fully connected layer storing its weight as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: vec![T::ZERO; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        matmul_add_bias(x, &self.weight, &self.bias)
    }

    /// Multiplies spent on a single input row.
    pub fn macs_per_row(&self) -> u64 {
        (self.inputs() * self.outputs()) as u64
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Stack of linear layers with ReLU between them. `relu_on_output` controls
/// whether the last layer is also followed by a ReLU (true for the coarse
/// stage, false for RGB heads).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
    pub relu_on_output: bool,
}

/// Activations retained by [`Mlp::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    /// Input to every layer; `inputs[0]` is the MLP input.
    inputs: Vec<Matrix<T>>,
    output: Matrix<T>,
}

impl<T: Real> MlpCache<T> {
    pub fn input(&self) -> &Matrix<T> {
        &self.inputs[0]
    }

    pub fn output(&self) -> &Matrix<T> {
        &self.output
    }
}

impl<T: Real> Mlp<T> {
    /// Layer widths `[in, h1, ..., out]`, all zero.
    pub fn zeros(widths: &[usize], relu_on_output: bool) -> Self {
        let layers = widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Self { layers, relu_on_output }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.inputs(), l.outputs()))
                .collect(),
            relu_on_output: self.relu_on_output,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, Linear::inputs)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    pub fn macs_per_row(&self) -> u64 {
        self.layers.iter().map(Linear::macs_per_row).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    fn activates(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.relu_on_output
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if self.activates(i) {
                relu_in_place(&mut h);
            }
        }
        Ok(h)
    }

    /// Values fed into each ReLU. Gradient checks use these to keep finite
    /// differences away from kinks.
    pub fn pre_activations(&self, x: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        let mut out = Vec::new();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if self.activates(i) {
                out.push(h.clone());
                relu_in_place(&mut h);
            }
        }
        Ok(out)
    }

    /// Forward pass that keeps every layer input for [`Mlp::backward`].
    pub fn forward_cached(&self, x: Matrix<T>) -> Result<MlpCache<T>> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = layer.forward(&h)?;
            if self.activates(i) {
                relu_in_place(&mut next);
            }
            inputs.push(h);
            h = next;
        }
        Ok(MlpCache { inputs, output: h })
    }

    /// Reverse-mode pass. Adds parameter gradients into `grads` and returns
    /// the gradient with respect to the MLP input.
    pub fn backward(&self, cache: &MlpCache<T>, d_output: Matrix<T>, grads: &mut Mlp<T>) -> Result<Matrix<T>> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::State("activation cache does not match MLP depth".into()));
        }
        if d_output.rows() != cache.output.rows() || d_output.cols() != cache.output.cols() {
            return Err(Error::Shape("output gradient shape differs from forward output".into()));
        }
        let mut dy = d_output;
        for i in (0..self.layers.len()).rev() {
            if self.activates(i) {
                let post = if i + 1 < self.layers.len() {
                    &cache.inputs[i + 1]
                } else {
                    &cache.output
                };
                for (g, &a) in dy.data.iter_mut().zip(&post.data) {
                    if !(a > T::ZERO) {
                        *g = T::ZERO;
                    }
                }
            }
            let x = &cache.inputs[i];
            let dw = matmul(&x.transpose(), &dy)?;
            let g = &mut grads.layers[i];
            for (acc, v) in g.weight.data.iter_mut().zip(&dw.data) {
                *acc += *v;
            }
            for row in dy.data.chunks(dy.cols.max(1)) {
                for (acc, &v) in g.bias.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            dy = matmul(&dy, &self.layers[i].weight.transpose())?;
        }
        Ok(dy)
    }

    /// Flat views of every parameter tensor, weight then bias per layer.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
            .collect()
    }

    pub fn add_assign(&mut self, other: &Mlp<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self.layers.iter().map(Linear::cast).collect(),
            relu_on_output: self.relu_on_output,
        }
    }
}

/// Optimizer state for bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// Moment buffers for tensors of the given lengths, with β1 = 0.9,
    /// β2 = 0.999 and ε = 1e-8.
    pub fn new(shapes: &[usize], lr: f64) -> Self {
        Self::with_betas(shapes, lr, 0.9, 0.999, 1e-8).expect("default betas are valid")
    }

    pub fn with_betas(shapes: &[usize], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Argument(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        Ok(Self {
            step: 0,
            beta1,
            beta2,
            lr,
            eps,
            first: shapes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            second: shapes.iter().map(|&n| vec![T::ZERO; n]).collect(),
        })
    }
}

/// One Adam update over a list of parameter tensors.
///
/// All gradients are checked before any parameter is touched, so a
/// non-finite gradient leaves both parameters and state unchanged.
pub fn adam_step<T: Real>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    names: &[String],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first[i].len() {
            return Err(Error::Shape(format!("tensor {i} length mismatch")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            let param = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::Training { param });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one_m_b1 = T::from_f64(1.0 - state.beta1);
    let one_m_b2 = T::from_f64(1.0 - state.beta2);
    let corr1 = T::from_f64(1.0 / (1.0 - state.beta1.powi(t)));
    let corr2 = T::from_f64(1.0 / (1.0 - state.beta2.powi(t)));
    let lr = T::from_f64(state.lr);
    let eps = T::from_f64(state.eps);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + one_m_b1 * gj;
            v[j] = b2 * v[j] + one_m_b2 * gj * gj;
            let m_hat = m[j] * corr1;
            let v_hat = v[j] * corr2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Central-difference gradient `(f(p+h·e_i) − f(p−h·e_i)) / 2h` per coordinate.
pub fn finite_diff_gradient(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let x = Matrix::from_rows(&[vec![1.0f32, 2.0]]).unwrap();
        let y = matmul_add_bias(&x, &Matrix::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);

        let x = Matrix::from_rows(&[vec![1.0f32, 1.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        let y = matmul_add_bias(&x, &w, &[1.0, 1.0]).unwrap();
        assert_eq!(y.data(), &[7.0, 9.0]);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let x = Matrix::<f32>::zeros(2, 3);
        let w = Matrix::<f32>::zeros(2, 2);
        assert!(matches!(matmul_add_bias(&x, &w, &[0.0; 2]), Err(Error::Shape(_))));
        let w = Matrix::<f32>::zeros(3, 2);
        assert!(matches!(matmul_add_bias(&x, &w, &[0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn parallel_matmul_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 300, 40);
        let w = random_matrix(&mut rng, 40, 30);
        let y = matmul(&x, &w).unwrap();
        for i in 0..300 {
            for j in 0..30 {
                let mut acc = 0.0;
                for k in 0..40 {
                    acc += x.get(i, k) * w.get(k, j);
                }
                assert_eq!(y.get(i, j), acc);
            }
        }
    }

    #[test]
    fn relu_examples() {
        let x = Matrix::from_rows(&[vec![-1.0f32, 0.0, 2.0]]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Matrix::from_rows(&[vec![-1.0f32, -3.0, -0.5]]).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0f64, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(&[3], 0.1);
        for _ in 0..7 {
            adam_step(&mut [p.as_mut_slice()], &[g.as_slice()], &["p".into()], &mut st).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 7);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut p = vec![0.0f64, 0.0];
        let g = vec![3.0, -0.25];
        let mut st = AdamState::new(&[2], 0.01);
        adam_step(&mut [p.as_mut_slice()], &[g.as_slice()], &["p".into()], &mut st).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-8);
        assert!((p[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut w = vec![1.0f64];
        let mut st = AdamState::new(&[1], 0.1);
        let mut last = w[0] * w[0];
        for _ in 0..10 {
            let g = vec![2.0 * w[0]];
            adam_step(&mut [w.as_mut_slice()], &[g.as_slice()], &["w".into()], &mut st).unwrap();
            let f = w[0] * w[0];
            assert!(f < last, "f went from {last} to {f}");
            last = f;
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut p = vec![1.0f32];
        let g = vec![f32::NAN];
        let mut st = AdamState::new(&[1], 0.1);
        let err = adam_step(
            &mut [p.as_mut_slice()],
            &[g.as_slice()],
            &["fine.2.bias".into()],
            &mut st,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Training { ref param } if param == "fine.2.bias"));
        assert_eq!(st.step, 0);
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn adam_rejects_bad_betas() {
        assert!(AdamState::<f64>::with_betas(&[1], 0.1, 1.0, 0.999, 1e-8).is_err());
        assert!(AdamState::<f64>::with_betas(&[1], 0.1, 0.9, 0.0, 1e-8).is_err());
    }

    #[test]
    fn finite_difference_simple_functions() {
        let p = [0.3, -1.2, 4.0];
        let g = finite_diff_gradient(|q| q.iter().sum(), &p, 1e-5);
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-10));
        let g = finite_diff_gradient(|q| 0.5 * q.iter().map(|v| v * v).sum::<f64>(), &p, 1e-5);
        for (a, b) in g.iter().zip(&p) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mlp = Mlp::<f64>::zeros(&[5, 7, 6, 3], false);
        for t in mlp.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
        let x = random_matrix(&mut rng, 4, 5);
        let target = random_matrix(&mut rng, 4, 3);
        let loss = |m: &Mlp<f64>| -> f64 {
            let y = m.forward(&x).unwrap();
            0.5 * y
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        };

        for pre in mlp.pre_activations(&x).unwrap() {
            assert!(pre.data().iter().all(|v| v.abs() > 1e-4));
        }
        let cache = mlp.forward_cached(x.clone()).unwrap();
        let dy = Matrix::from_vec(
            4,
            3,
            cache
                .output()
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| a - b)
                .collect(),
        )
        .unwrap();
        let mut grads = mlp.zeros_like();
        mlp.backward(&cache, dy, &mut grads).unwrap();
        let analytic: Vec<f64> = grads.tensors().concat();

        let flat: Vec<f64> = mlp.tensors().concat();
        let numeric = finite_diff_gradient(
            |p| {
                let mut m = mlp.clone();
                let mut off = 0;
                for t in m.tensors_mut() {
                    let n = t.len();
                    t.copy_from_slice(&p[off..off + n]);
                    off += n;
                }
                loss(&m)
            },
            &flat,
            1e-6,
        );
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }

    proptest! {
        #[test]
        fn relu_is_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
            let m = Matrix::from_vec(1, v.len(), v).unwrap();
            prop_assert_eq!(relu(&relu(&m)), relu(&m));
        }

        #[test]
        fn identity_is_exact(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, r, c);
            prop_assert_eq!(matmul(&x, &Matrix::identity(c)).unwrap(), x);
        }
    }
}
