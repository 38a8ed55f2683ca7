use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{NumError, Result};

/// Floating-point element type a [`Tensor`] can hold.
///
/// Training runs in `f32`; gradient checks run in `f64`.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Sum + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}

/// Dense row-major tensor. Values are immutable once constructed.
#[derive(Clone, PartialEq)]
pub struct Tensor<E = f32> {
    dims: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(dims: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(NumError::ZeroDim(dims));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(NumError::DataLength {
                dims,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor whose dims were already validated by the caller.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::filled(dims, E::zero())
    }

    pub fn filled(dims: &[usize], value: E) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: E) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> E) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[E] {
        let w = *self.dims.last().unwrap_or(&1);
        &self.data[i * w..(i + 1) * w]
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| F::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn reshaped(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute elementwise difference; `None` when dims differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<E> {
        if self.dims != other.dims {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a - b).abs())
                .fold(E::zero(), E::max),
        )
    }
}

impl<E: Element> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.dims)?;
        f.debug_list()
            .entries(self.data.iter().take(SHOWN))
            .finish()?;
        if self.data.len() > SHOWN {
            write!(f, "..")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_zero_dims() {
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(NumError::DataLength { expected: 6, .. })
        ));
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 0], vec![]),
            Err(NumError::ZeroDim(_))
        ));
        assert!(matches!(
            Tensor::<f32>::new(vec![], vec![]),
            Err(NumError::ZeroDim(_))
        ));
    }

    #[test]
    fn cast_round_trips_f32_through_f64() {
        let t = Tensor::new(vec![3], vec![0.1f32, -2.5, 1e-7]).unwrap();
        assert_eq!(t.cast::<f64>().cast::<f32>(), t);
    }

    #[test]
    fn row_access() {
        let t = Tensor::new(vec![2, 3], vec![1.0f32, 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.row(1), &[4., 5., 6.]);
    }
}
