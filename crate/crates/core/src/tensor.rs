//! Dense row-major tensors and the linear-algebra kernels the rest of the
//! crate is built on.
//!
//! Storage is always row-major. The `vec`/`unvec` pair uses the
//! column-stacking convention so that the Kronecker identity
//!
//! ```text
//! (A ⊗ B) vec(X) = vec(B X Aᵀ)
//! ```
//!
//! holds exactly, which is what lets [`kron_matvec`] avoid materializing
//! the Kronecker product.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`; `f64` exists for
/// gradient-check oracles.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const BYTES: usize;

    fn erf(self) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }

    /// `c = alpha * a * b + beta * c` over raw strided storage.
    ///
    /// # Safety
    /// Every strided index must be in bounds of the corresponding slice.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    fn erf(self) -> Self {
        libm::erff(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    fn erf(self) -> Self {
        libm::erf(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Borrowed strided matrix view. Transposition only swaps strides.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    pub(crate) fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Row-major view with row stride `stride >= cols`.
    pub(crate) fn strided(data: &'a [T], rows: usize, cols: usize, stride: usize) -> Self {
        debug_assert!(stride >= cols);
        MatRef {
            data,
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn in_bounds(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    assert!(a.in_bounds() && b.in_bounds(), "gemm view out of bounds");
    if c.is_empty() {
        return;
    }
    if a.cols == 0 {
        for v in c.iter_mut() {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    // SAFETY: bounds checked above for both operands; c is dense row-major.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Allocating `a * b`.
pub(crate) fn mm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>) -> Vec<T> {
    let mut c = vec![T::zero(); a.rows * b.cols];
    gemm(T::one(), a, b, T::zero(), &mut c);
    c
}

/// Dense row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a 2-D tensor from nested rows; panics on ragged input.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.as_ref().len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.as_ref().len(), c, "ragged rows");
            data.extend_from_slice(row.as_ref());
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, format!("expected 2-D, got {:?}", self.shape))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub(crate) fn mat(&self) -> MatRef<'_, T> {
        let (r, c) = self.dims2("mat").expect("2-D tensor");
        MatRef::new(&self.data, r, c)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    /// Matrix product. A 1-D right operand is treated as a column vector and
    /// the result is 1-D.
    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2("matmul")?;
        let (kb, n, vector) = match b.shape[..] {
            [kb, n] => (kb, n, false),
            [kb] => (kb, 1, true),
            _ => return Err(Error::shape("matmul", format!("rhs {:?}", b.shape))),
        };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, b.shape),
            ));
        }
        let out = mm(MatRef::new(&self.data, m, k), MatRef::new(&b.data, kb, n));
        if vector {
            Tensor::new(&[m], out)
        } else {
            Tensor::new(&[m, n], out)
        }
    }

    fn zip(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Kronecker product of two matrices: block `(i, j)` of the result is
/// `a[i, j] * b`.
pub fn kron<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (r1, r2) = a.dims2("kron")?;
    let (m, n) = b.dims2("kron")?;
    let cols = r2 * n;
    let mut out = vec![T::zero(); r1 * m * cols];
    for i in 0..r1 {
        for j in 0..r2 {
            let aij = a.data[i * r2 + j];
            for k in 0..m {
                let row = (i * m + k) * cols + j * n;
                for l in 0..n {
                    out[row + l] = aij * b.data[k * n + l];
                }
            }
        }
    }
    Tensor::new(&[r1 * m, cols], out)
}

/// Column-stacking vectorization of a `p × q` matrix.
pub fn vec_cols<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = m.dims2("vec")?;
    let mut out = Vec::with_capacity(p * q);
    for j in 0..q {
        for i in 0..p {
            out.push(m.data[i * q + j]);
        }
    }
    Tensor::new(&[p * q], out)
}

/// Inverse of [`vec_cols`]: reads `x` column by column into a `p × q` matrix.
pub fn unvec<T: Scalar>(x: &Tensor<T>, p: usize, q: usize) -> Result<Tensor<T>> {
    if x.len() != p * q {
        return Err(Error::shape(
            "unvec",
            format!("{} elements into {p}x{q}", x.len()),
        ));
    }
    let mut out = vec![T::zero(); p * q];
    for j in 0..q {
        for i in 0..p {
            out[i * q + j] = x.data[j * p + i];
        }
    }
    Tensor::new(&[p, q], out)
}

/// `(a ⊗ b) x` computed as `vec(b · unvec(x, n, r2) · aᵀ)`, never forming
/// the Kronecker product.
pub fn kron_matvec<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, r2) = a.dims2("kron_matvec")?;
    let (_, n) = b.dims2("kron_matvec")?;
    if x.len() != r2 * n {
        return Err(Error::shape(
            "kron_matvec",
            format!("x has {} elements, factors need {}", x.len(), r2 * n),
        ));
    }
    let xm = unvec(x, n, r2)?;
    let bx = b.matmul(&xm)?;
    let y = bx.matmul(&a.transpose()?)?;
    vec_cols(&y)
}

/// Row-batched form of [`kron_matvec`]: every row of `x` (`rows × r2·n`) is
/// mapped to `(a ⊗ b) x_row`, giving `rows × r1·m`.
///
/// Row-major, a row of `x` read as an `r2 × n` matrix `X` yields the output
/// row as the row-major flattening of `a · X · bᵀ`. Returns the output and
/// the intermediate `X · bᵀ` stacked as `(rows·r2) × m`, which backward
/// reuses.
pub(crate) fn kron_rows_forward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    x: &[T],
    rows: usize,
) -> (Vec<T>, Vec<T>) {
    let (r1, r2) = (a.shape[0], a.shape[1]);
    let (m, n) = (b.shape[0], b.shape[1]);
    debug_assert_eq!(x.len(), rows * r2 * n);
    // Z = X_stack · bᵀ, (rows·r2) × m
    let z = mm(MatRef::new(x, rows * r2, n), b.mat().t());
    let mut y = vec![T::zero(); rows * r1 * m];
    for (zr, yr) in z.chunks_exact(r2 * m).zip(y.chunks_exact_mut(r1 * m)) {
        gemm(T::one(), a.mat(), MatRef::new(zr, r2, m), T::zero(), yr);
    }
    (y, z)
}

/// Gradients of [`kron_rows_forward`] for an upstream `dy` (`rows × r1·m`).
/// Returns `(da, db, dx)` unscaled.
pub(crate) fn kron_rows_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    x: &[T],
    z: &[T],
    dy: &[T],
    rows: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (r1, r2) = (a.shape[0], a.shape[1]);
    let (m, n) = (b.shape[0], b.shape[1]);
    let mut da = vec![T::zero(); r1 * r2];
    // W_row = aᵀ · dY_row, stacked (rows·r2) × m
    let mut w = vec![T::zero(); rows * r2 * m];
    for ((dyr, zr), wr) in dy
        .chunks_exact(r1 * m)
        .zip(z.chunks_exact(r2 * m))
        .zip(w.chunks_exact_mut(r2 * m))
    {
        let dym = MatRef::new(dyr, r1, m);
        gemm(T::one(), dym, MatRef::new(zr, r2, m).t(), T::one(), &mut da);
        gemm(T::one(), a.mat().t(), dym, T::zero(), wr);
    }
    let wm = MatRef::new(&w, rows * r2, m);
    let db = mm(wm.t(), MatRef::new(x, rows * r2, n));
    let dx = mm(wm, b.mat());
    (da, db, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Triple-loop reference product.
    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum()
        })
    }

    #[test]
    fn matmul_identity() {
        let m = Tensor::<f32>::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(Tensor::eye(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_value() {
        let a = Tensor::<f32>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Tensor::<f32>::from_rows(&[[5.0], [6.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_f32_matches_f64_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[8, 8], &mut rng);
        let b = random(&[8, 8], &mut rng);
        let oracle = naive_matmul(&a, &b);
        let got = a.cast::<f32>().matmul(&b.cast::<f32>()).unwrap().cast::<f64>();
        for (g, o) in got.data().iter().zip(oracle.data()) {
            assert!((g - o).abs() <= 1e-6 * o.abs().max(1.0), "{g} vs {o}");
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn kron_scalar_one_is_identity() {
        let b = Tensor::<f32>::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(kron(&Tensor::from_rows(&[[1.0]]), &b).unwrap(), b);
    }

    #[test]
    fn kron_identity_is_block_diagonal() {
        let b = Tensor::<f32>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let k = kron(&Tensor::eye(2), &b).unwrap();
        let expected = Tensor::from_rows(&[
            [1.0, 2.0, 0.0, 0.0],
            [3.0, 4.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 2.0],
            [0.0, 0.0, 3.0, 4.0],
        ]);
        assert_eq!(k, expected);
    }

    #[test]
    fn kron_block_assembly() {
        // a11·B | a12·B over a21·B | a22·B with B the 2×2 swap.
        let a = Tensor::<f32>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Tensor::<f32>::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let expected = Tensor::from_rows(&[
            [0.0, 1.0, 0.0, 2.0],
            [1.0, 0.0, 2.0, 0.0],
            [0.0, 3.0, 0.0, 4.0],
            [3.0, 0.0, 4.0, 0.0],
        ]);
        assert_eq!(kron(&a, &b).unwrap(), expected);
    }

    #[test]
    fn kron_rejects_non_matrix() {
        let v = Tensor::<f32>::zeros(&[3]);
        assert!(kron(&v, &Tensor::eye(2)).is_err());
    }

    #[test]
    fn vec_is_column_stacking() {
        let m = Tensor::<f32>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(vec_cols(&m).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        let row = Tensor::<f32>::from_rows(&[[7.0, 8.0, 9.0]]);
        assert_eq!(vec_cols(&row).unwrap().data(), row.data());
    }

    #[test]
    fn unvec_inverts_vec() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random(&[3, 5], &mut rng);
        assert_eq!(unvec(&vec_cols(&m).unwrap(), 3, 5).unwrap(), m);
        assert!(unvec(&m.clone().reshape(&[15]).unwrap(), 4, 4).is_err());
    }

    #[test]
    fn kron_matvec_left_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random(&[4, 5], &mut rng);
        let x = random(&[5], &mut rng);
        let got = kron_matvec(&Tensor::from_rows(&[[1.0]]), &b, &x).unwrap();
        let want = b.matmul(&x).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn kron_matvec_matches_materialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[4, 5], &mut rng);
        let x = random(&[15], &mut rng);
        let want = kron(&a, &b).unwrap().matmul(&x).unwrap();
        let got = kron_matvec(&a, &b, &x).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-6 * want.max_abs());
    }

    #[test]
    fn kron_matvec_zero_and_length_error() {
        let a = Tensor::<f32>::from_rows(&[[1.0, 2.0]]);
        let b = Tensor::<f32>::eye(3);
        let y = kron_matvec(&a, &b, &Tensor::zeros(&[6])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(kron_matvec(&a, &b, &Tensor::zeros(&[5])).is_err());
    }

    #[test]
    fn batched_rows_match_kron_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[3, 2], &mut rng);
        let b = random(&[4, 5], &mut rng);
        let rows = 3;
        let x = random(&[rows, 10], &mut rng);
        let (y, _) = kron_rows_forward(&a, &b, x.data(), rows);
        for r in 0..rows {
            let xr = Tensor::new(&[10], x.data()[r * 10..(r + 1) * 10].to_vec()).unwrap();
            let want = kron_matvec(&a, &b, &xr).unwrap();
            for (g, w) in y[r * 12..(r + 1) * 12].iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kron_rank_is_product_of_ranks() {
        // Square full-rank factors: det(A ⊗ B) = det(A)^m det(B)^r.
        let a = Tensor::<f64>::from_rows(&[[2.0, 1.0], [1.0, 3.0]]);
        let b = Tensor::<f64>::from_rows(&[[1.0, 2.0, 0.0], [0.0, 1.0, 4.0], [1.0, 0.0, 1.0]]);
        let k = kron(&a, &b).unwrap();
        let km = nalgebra::DMatrix::from_row_slice(6, 6, k.data());
        assert_eq!(km.rank(1e-10), 6);
        let da: f64 = 5.0;
        let db: f64 = 9.0;
        assert!((km.determinant() - da.powi(3) * db.powi(2)).abs() < 1e-8);
        // Rank-deficient left factor: rank(A)·rank(B) = 1·3.
        let a1 = Tensor::<f64>::from_rows(&[[1.0, 2.0], [2.0, 4.0]]);
        let k1 = kron(&a1, &b).unwrap();
        let k1m = nalgebra::DMatrix::from_row_slice(6, 6, k1.data());
        assert_eq!(k1m.rank(1e-10), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn kron_matvec_equals_materialized_f32(
                r1 in 1usize..5, r2 in 1usize..5, m in 1usize..6, n in 1usize..6, seed in any::<u64>()
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(&[r1, r2], &mut rng).cast::<f32>();
                let b = random(&[m, n], &mut rng).cast::<f32>();
                let x = random(&[r2 * n], &mut rng).cast::<f32>();
                let want = kron(&a, &b).unwrap().matmul(&x).unwrap();
                let got = kron_matvec(&a, &b, &x).unwrap();
                // Relative to ‖|a⊗b|·|x|‖∞, the magnitude f32 rounding scales with;
                // max|want| alone understates it under cancellation.
                let abs = |t: &Tensor<f32>| t.map(f32::abs);
                let scale = abs(&kron(&a, &b).unwrap()).matmul(&abs(&x)).unwrap().max_abs();
                prop_assert!(got.max_abs_diff(&want).unwrap() <= 1e-5 * scale);
            }

            #[test]
            fn matmul_is_associative(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(&[8, 8], &mut rng).cast::<f32>();
                let b = random(&[8, 8], &mut rng).cast::<f32>();
                let c = random(&[8, 8], &mut rng).cast::<f32>();
                let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
                let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
                let bound = 1e-4 * a.max_abs() * b.max_abs() * c.max_abs();
                prop_assert!(left.max_abs_diff(&right).unwrap() <= bound);
            }

            #[test]
            fn unvec_vec_round_trip(p in 1usize..7, q in 1usize..7, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random(&[p, q], &mut rng);
                prop_assert_eq!(unvec(&vec_cols(&m).unwrap(), p, q).unwrap(), m);
            }
        }
    }
}
