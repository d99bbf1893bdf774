//! Dense row-major tensors. Rank 0 (scalar), 1, and 2 cover everything the
//! model needs; a few ops also produce rank 3 internally.

use crate::error::{Error, Result};
use crate::scalar::Real;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Rank-1 tensor from a plain vector.
    pub fn from_vec(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from `rows x cols` row-major data.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Standard normal entries scaled by `std`, drawn element by element in
    /// row-major order. Samples are taken in f64 and narrowed so f32 and f64
    /// models see the same underlying draw.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::from_f64(z * std)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[F] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Plain (non-graph) matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Tensor::zeros(&[m, n]);
        F::gemm(
            m,
            k,
            n,
            F::one(),
            &self.data,
            k as isize,
            1,
            &other.data,
            n as isize,
            1,
            F::zero(),
            &mut out.data,
            n as isize,
            1,
        );
        Ok(out)
    }

    /// Lossy precision change, used when loading checkpoints written at a
    /// different dtype.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.into_f64())).collect(),
        }
    }
}

/// Decompose `shape` around `axis` into (outer, len, inner) so flat index
/// `(o * len + j) * inner + i` walks lanes along that axis.
pub fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    debug_assert!(axis < shape.len());
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn new_rejects_wrong_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f64; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0f64; 6]).is_ok());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let t = Tensor::scalar(3.5f64);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 3.5);
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let a = Tensor::from_rows(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::from_rows(2, 2, vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&eye).unwrap().data(), a.data());
        assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_known_product() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Tensor::from_rows(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_rows(2, 2, vec![5.0f64, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn randn_is_deterministic_per_seed() {
        let mut r1 = ChaCha12Rng::seed_from_u64(7);
        let mut r2 = ChaCha12Rng::seed_from_u64(7);
        let a: Tensor<f64> = Tensor::randn(&[3, 4], 0.5, &mut r1);
        let b: Tensor<f64> = Tensor::randn(&[3, 4], 0.5, &mut r2);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn f32_randn_matches_narrowed_f64_stream() {
        let mut r1 = ChaCha12Rng::seed_from_u64(7);
        let mut r2 = ChaCha12Rng::seed_from_u64(7);
        let a: Tensor<f64> = Tensor::randn(&[8], 1.0, &mut r1);
        let b: Tensor<f32> = Tensor::randn(&[8], 1.0, &mut r2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x as f32, *y);
        }
    }

    #[test]
    fn lanes_decomposition() {
        assert_eq!(lanes(&[2, 3, 4], 1), (2, 3, 4));
        assert_eq!(lanes(&[2, 3, 4], 0), (1, 2, 12));
        assert_eq!(lanes(&[2, 3, 4], 2), (6, 4, 1));
    }
}
