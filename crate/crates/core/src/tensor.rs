//! Dense row-major tensors and the small set of vector operations the rest of
//! the crate is built on.
//!
//! The math here is generic over the scalar type through [`Scalar`] so the
//! same routines run at `f32` or `f64`; the pipeline itself is pinned to the
//! `f64` aliases at the crate root, since the finite-difference gradient
//! checks need double precision.

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use std::fmt::Debug;

/// Norms below this are treated as degenerate (zero) vectors.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Floating-point scalar the tensor math is generic over.
pub trait Scalar: Float + FromPrimitive + Debug + Default + 'static {
    fn degenerate_eps() -> Self {
        Self::from_f64(DEGENERATE_EPS).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major numeric array with shape. `data.len()` always equals the
/// product of the extents, and entries stay finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); len],
        }
    }

    /// Build a tensor from raw data, validating length and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_vec".into(),
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Tensor::from_vec".into()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<S>) -> Result<Self> {
        let n = data.len();
        Self::from_vec(&[n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        assert_eq!(self.shape.len(), 2, "row() needs a rank-2 tensor");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    /// `self += alpha * other`, entrywise. Shapes must match.
    pub fn axpy(&mut self, alpha: S, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + alpha * *b;
        }
    }

    pub fn scale(&mut self, alpha: S) {
        for a in self.data.iter_mut() {
            *a = *a * alpha;
        }
    }

    pub fn norm(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }
}

/// Dot product of two equal-length slices.
pub fn dot<S: Scalar>(u: &[S], v: &[S]) -> S {
    debug_assert_eq!(u.len(), v.len());
    u.iter()
        .zip(v.iter())
        .fold(S::zero(), |acc, (&a, &b)| acc + a * b)
}

pub fn slice_norm<S: Scalar>(v: &[S]) -> S {
    dot(v, v).sqrt()
}

/// Cosine similarity of two vectors, clamped to [-1, 1] against rounding.
/// Errors on near-zero norms.
pub fn cosine<S: Scalar>(u: &Tensor<S>, v: &Tensor<S>) -> Result<S> {
    if u.shape() != v.shape() || u.shape().len() != 1 {
        return Err(Error::ShapeMismatch {
            context: "cosine".into(),
            expected: u.shape().to_vec(),
            got: v.shape().to_vec(),
        });
    }
    cosine_slices(u.as_slice(), v.as_slice())
}

pub fn cosine_slices<S: Scalar>(u: &[S], v: &[S]) -> Result<S> {
    let uu = dot(u, u);
    let vv = dot(v, v);
    let eps = S::degenerate_eps();
    if uu.sqrt() <= eps {
        return Err(Error::DegenerateVector {
            norm: uu.sqrt().to_f64().unwrap_or(0.0),
            context: "cosine (first argument)",
        });
    }
    if vv.sqrt() <= eps {
        return Err(Error::DegenerateVector {
            norm: vv.sqrt().to_f64().unwrap_or(0.0),
            context: "cosine (second argument)",
        });
    }
    // sqrt(uu * vv) keeps cosine(u, u) at exactly 1 (sqrt(fl(x*x)) == |x|
    // in round-to-nearest).
    let c = dot(u, v) / (uu * vv).sqrt();
    Ok(clamp_unit(c))
}

pub fn clamp_unit<S: Scalar>(c: S) -> S {
    if c > S::one() {
        S::one()
    } else if c < -S::one() {
        -S::one()
    } else {
        c
    }
}

/// Scale a vector to unit norm. Errors on a degenerate input.
pub fn l2_normalize<S: Scalar>(v: &Tensor<S>) -> Result<Tensor<S>> {
    let mut out = v.clone();
    l2_normalize_in_place(out.as_mut_slice())?;
    Ok(out)
}

pub fn l2_normalize_in_place<S: Scalar>(v: &mut [S]) -> Result<()> {
    let n = slice_norm(v);
    if n <= S::degenerate_eps() {
        return Err(Error::DegenerateVector {
            norm: n.to_f64().unwrap_or(0.0),
            context: "l2_normalize",
        });
    }
    for x in v.iter_mut() {
        *x = *x / n;
    }
    Ok(())
}

/// l2 norm of the concatenation of all entries of all tensors in the list.
/// Invariant to how the entries are partitioned; empty list gives 0.
pub fn flat_norm<S: Scalar>(tensors: &[&Tensor<S>]) -> S {
    let mut acc = S::zero();
    for t in tensors {
        for &x in t.as_slice() {
            acc = acc + x * x;
        }
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn cosine_identical_vectors() {
        let u = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert_eq!(cosine(&u, &u).unwrap(), 1.0);
    }

    #[test]
    fn cosine_orthogonal() {
        let u = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let v = Tensor::vector(vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine(&u, &v).unwrap(), 0.0);
    }

    #[test]
    fn cosine_closed_form() {
        // Independent evaluation of (u.v)/(|u||v|) for u=[1,2,3], v=[4,5,6]:
        // 32 / sqrt(14 * 77) = 0.9746318461970762
        let u = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let v = Tensor::vector(vec![4.0, 5.0, 6.0]).unwrap();
        let expected = 32.0 / (14.0_f64 * 77.0).sqrt();
        let got = cosine(&u, &v).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.9746318461970762).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_errors() {
        let u = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let v = Tensor::vector(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            cosine(&u, &v),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn cosine_symmetry_and_scale_invariance() {
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            let u: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let v: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let alpha = rng.uniform(0.1, 10.0);
            let tu = Tensor::vector(u.clone()).unwrap();
            let tv = Tensor::vector(v.clone()).unwrap();
            let tu_scaled = Tensor::vector(u.iter().map(|x| x * alpha).collect()).unwrap();
            let c1 = cosine(&tu, &tv).unwrap();
            let c2 = cosine(&tv, &tu).unwrap();
            let c3 = cosine(&tu_scaled, &tv).unwrap();
            assert!((c1 - c2).abs() < 1e-14);
            assert!((c1 - c3).abs() < 1e-12);
            assert_eq!(cosine(&tu, &tu).unwrap(), 1.0);
        }
    }

    #[test]
    fn normalize_three_four_five() {
        let v = Tensor::vector(vec![3.0, 4.0]).unwrap();
        let n = l2_normalize(&v).unwrap();
        assert_eq!(n.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_unit_vector_unchanged() {
        let v = Tensor::vector(vec![0.0, 1.0]).unwrap();
        let n = l2_normalize(&v).unwrap();
        assert_eq!(n.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn normalize_zero_errors() {
        let v = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            l2_normalize(&v),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn normalize_random_vectors_unit_norm() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let dim = 1 + (rng.next_u64() % 16) as usize;
            let v: Vec<f64> = (0..dim).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let t = Tensor::vector(v).unwrap();
            if t.norm() <= DEGENERATE_EPS {
                continue;
            }
            let n = l2_normalize(&t).unwrap();
            assert!((n.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn flat_norm_examples() {
        let a = Tensor::vector(vec![3.0]).unwrap();
        let b = Tensor::vector(vec![4.0]).unwrap();
        assert_eq!(flat_norm(&[&a, &b]), 5.0);
        assert_eq!(flat_norm::<f64>(&[]), 0.0);
        let c = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let d = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert_eq!(flat_norm(&[&c, &d]), 2.0);
    }

    #[test]
    fn flat_norm_partition_invariance() {
        let mut rng = Rng::new(3);
        let entries: Vec<f64> = (0..24).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let whole = Tensor::vector(entries.clone()).unwrap();
        let split_a = Tensor::from_vec(&[4, 3], entries[..12].to_vec()).unwrap();
        let split_b = Tensor::from_vec(&[2, 6], entries[12..].to_vec()).unwrap();
        let n1 = flat_norm(&[&whole]);
        let n2 = flat_norm(&[&split_a, &split_b]);
        assert!((n1 - n2).abs() < 1e-12);
    }

    #[test]
    fn generic_math_runs_at_f32() {
        let u: Tensor<f32> = Tensor::vector(vec![3.0, 4.0]).unwrap();
        let n = l2_normalize(&u).unwrap();
        assert!((n.norm() - 1.0).abs() < 1e-6);
        assert_eq!(cosine(&u, &u).unwrap(), 1.0f32);
    }

    #[test]
    fn from_vec_rejects_bad_shapes_and_nan() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0, 2.0]).is_err());
        assert!(Tensor::from_vec(&[2], vec![f64::NAN, 1.0]).is_err());
        // Zero-row matrices are representable (empty batches use them).
        assert!(Tensor::from_vec(&[0, 3], Vec::<f64>::new()).is_ok());
    }
}
