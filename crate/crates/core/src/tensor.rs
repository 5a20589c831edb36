//! Dense f32 tensor with row-major storage, plus the matmul kernels and the
//! little-endian serialization format used by checkpoints and activation dumps.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense n-dimensional array of f32 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dims must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// i.i.d. Normal(mu, sigma^2) entries from the given RNG.
    pub fn randn<R: Rng>(shape: Vec<usize>, mu: f32, sigma: f32, rng: &mut R) -> Self {
        let normal = Normal::new(mu as f64, sigma as f64).expect("sigma must be positive");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng) as f32).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows / row width when viewed as a 2-d matrix (last dim = columns).
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dim")
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Row `i` when the tensor is viewed as `rows x last_dim`.
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    /// Serialize as rank (u32 LE), dims (u32 LE each), then f32 LE payload.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let rank = u32::from_le_bytes(buf4) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("bad tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut buf4)?;
            shape.push(u32::from_le_bytes(buf4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut buf4)?;
            data.push(f32::from_le_bytes(buf4));
        }
        Tensor::new(shape, data)
    }
}

/// C[m x n] = A[m x k] * B[k x n], dot products accumulated in f64.
///
/// ikj loop order streams rows of B so the inner loop vectorizes.
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aval) in arow.iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let av = aval as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (accv, &bv) in acc.iter_mut().zip(brow) {
                *accv += av * bv as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
}

/// C[m x n] = A[m x k] * B^T where B is stored [n x k] (row dot row).
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av as f64 * bv as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
}

/// C[k x n] = A^T * B where A is stored [m x k] and B is [m x n].
///
/// Accumulates rank-1 updates over rows of A and B in an f64 buffer.
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aval) in arow.iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let av = aval as f64;
            let accrow = &mut acc[p * n..(p + 1) * n];
            for (accv, &bv) in accrow.iter_mut().zip(brow) {
                *accv += av * bv as f64;
            }
        }
    }
    for (o, &v) in out.iter_mut().zip(&acc) {
        *o = v as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        // Independent triple-loop oracle, f64 accumulation in the same order.
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 4];
        matmul_nn(&eye, &b, 2, 2, 2, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_row_selector() {
        let a = vec![1.0, 0.0, 0.0, 0.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        let mut out = vec![0.0; 4];
        matmul_nn(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, vec![5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(vec![3, 4], 0.0, 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 2], 0.0, 1.0, &mut rng);
        let mut out = vec![0.0; 6];
        matmul_nn(a.data(), b.data(), 3, 4, 2, &mut out);
        let expect = naive_matmul(a.data(), b.data(), 3, 4, 2);
        // Same accumulation order as the oracle, so exact equality holds
        // (the zero-skip branch never changes the running sum).
        for (x, y) in out.iter().zip(&expect) {
            let rel = (x - y).abs() / (x.abs() + y.abs() + 1e-8);
            assert!(rel < 1e-4, "got {x}, expected {y}");
        }
    }

    #[test]
    fn matmul_nt_tn_match_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (5, 7, 3);
        let a = Tensor::randn(vec![m, k], 0.0, 1.0, &mut rng);
        let b = Tensor::randn(vec![k, n], 0.0, 1.0, &mut rng);
        // nt: feed B transposed, should recover A*B
        let mut bt = vec![0.0f32; k * n];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b.data()[i * n + j];
            }
        }
        let expect = naive_matmul(a.data(), b.data(), m, k, n);
        let mut out = vec![0.0; m * n];
        matmul_nt(a.data(), &bt, m, k, n, &mut out);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-4);
        }
        // tn: feed A transposed, should recover A*B
        let mut at = vec![0.0f32; m * k];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a.data()[i * k + j];
            }
        }
        let mut out2 = vec![0.0; m * n];
        matmul_tn(&at, b.data(), k, m, n, &mut out2);
        for (x, y) in out2.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn serialization_round_trip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::randn(vec![2, 3, 4], 0.5, 2.0, &mut rng);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        // rank + 3 dims + 24 floats
        assert_eq!(buf.len(), 4 + 12 + 24 * 4);
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
