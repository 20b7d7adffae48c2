//! Dense row-major tensors. Deterministic CPU arithmetic only: no threading,
//! no reassociation, contraction sums always run left to right.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An n-dimensional array of scalars in row-major order.
///
/// Tensors are immutable values in the forward/backward paths; the only
/// mutation points are optimizer updates and weight averaging, which own the
/// tensor exclusively.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArg {
                op: "tensor",
                msg: format!(
                    "shape {:?} (len {}) does not match data length {}",
                    shape,
                    expected,
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Reinterprets the buffer under a new shape of the same total length.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest |a - b| over all elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut worst = T::zero();
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            let d = (a - b).abs();
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }

    /// Converts every element through `f64` into another scalar type.
    /// Widening (f32 data read as f64) is lossless.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> T {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    #[inline]
    pub fn at4(&self, i: usize, j: usize, k: usize, l: usize) -> T {
        debug_assert_eq!(self.rank(), 4);
        self.data[((i * self.shape[1] + j) * self.shape[2] + k) * self.shape[3] + l]
    }
}

/// Matrix product of `a: [r, c]` and `b: [c, k]`.
///
/// The contraction index runs left to right, so results are bit-stable for a
/// fixed input pair.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (r, c, k) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![T::zero(); r * k];
    let ad = a.data();
    let bd = b.data();
    for i in 0..r {
        let arow = &ad[i * c..(i + 1) * c];
        let orow = &mut out[i * k..(i + 1) * k];
        for (m, &av) in arow.iter().enumerate() {
            let brow = &bd[m * k..(m + 1) * k];
            for j in 0..k {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::from_vec(vec![r, k], out)
}

/// `a · bᵀ` for `a: [r, c]`, `b: [k, c]`, without materializing the
/// transpose. Contraction order matches [`matmul`].
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1) {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (r, c, k) = (a.dim(0), a.dim(1), b.dim(0));
    let mut out = vec![T::zero(); r * k];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..r {
        let arow = &ad[i * c..(i + 1) * c];
        for j in 0..k {
            let brow = &bd[j * c..(j + 1) * c];
            let mut acc = T::zero();
            for m in 0..c {
                acc += arow[m] * brow[m];
            }
            out[i * k + j] = acc;
        }
    }
    Tensor::from_vec(vec![r, k], out)
}

/// `aᵀ · b` for `a: [r, c]`, `b: [r, k]`. Contraction runs over the shared
/// leading dimension in ascending order.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0) {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (r, c, k) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![T::zero(); c * k];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..r {
        let arow = &ad[i * c..(i + 1) * c];
        let brow = &bd[i * k..(i + 1) * k];
        for (m, &av) in arow.iter().enumerate() {
            let orow = &mut out[m * k..(m + 1) * k];
            for j in 0..k {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::from_vec(vec![c, k], out)
}

/// Gradients of `matmul` with respect to both factors:
/// `da = upstream · bᵀ`, `db = aᵀ · upstream`.
pub fn matmul_vjp<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if upstream.rank() != 2 || upstream.dim(0) != a.dim(0) || upstream.dim(1) != b.dim(1) {
        return Err(Error::ShapeMismatch {
            op: "matmul_vjp",
            lhs: upstream.shape().to_vec(),
            rhs: vec![a.dim(0), b.dim(1)],
        });
    }
    let (r, c, k) = (a.dim(0), a.dim(1), b.dim(1));
    let mut da = vec![T::zero(); r * c];
    let mut db = vec![T::zero(); c * k];
    let (ad, bd, ud) = (a.data(), b.data(), upstream.data());
    for i in 0..r {
        for m in 0..c {
            let mut acc = T::zero();
            for j in 0..k {
                acc += ud[i * k + j] * bd[m * k + j];
            }
            da[i * c + m] = acc;
        }
    }
    for m in 0..c {
        for j in 0..k {
            let mut acc = T::zero();
            for i in 0..r {
                acc += ad[i * c + m] * ud[i * k + j];
            }
            db[m * k + j] = acc;
        }
    }
    Ok((
        Tensor::from_vec(vec![r, c], da)?,
        Tensor::from_vec(vec![c, k], db)?,
    ))
}
