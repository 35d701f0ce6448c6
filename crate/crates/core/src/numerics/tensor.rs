//! Dense row-major `f64` tensors and the raw kernels the differentiation
//! graph is built from.

use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Immutable dense n-dimensional array. A shape of `[]` is a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("extents must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernels whose output shape is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(x: f64) -> Self {
        Self::from_parts(vec![], vec![x])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable values; the shape is fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of range for axis {i}");
            off = off * d + ix;
        }
        self.data[off]
    }

    /// Rows of the last axis.
    pub fn rows(&self) -> std::slice::Chunks<'_, f64> {
        let d = self.shape.last().copied().unwrap_or(1);
        self.data.chunks(d)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        Ok(plan.forward(&self.data, &other.data))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return shape_err(format!("softmax axis {axis} for rank {}", self.ndim()));
        }
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len)
                    .map(|k| out[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (out[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[at(k)] /= sum;
                }
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }
}

/// `(outer, len, inner)` sizes around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Batched matmul geometry. Batch dims must match exactly unless one operand
/// is a plain matrix, in which case it is reused for every batch entry.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return shape_err(format!("matmul needs rank >= 2, got {a:?} x {b:?}"));
        }
        let (ab, am) = a.split_at(a.len() - 2);
        let (bb, bm) = b.split_at(b.len() - 2);
        if am[1] != bm[0] {
            return shape_err(format!("matmul inner extents differ: {a:?} x {b:?}"));
        }
        let batch_shape = if ab == bb || bb.is_empty() {
            ab
        } else if ab.is_empty() {
            bb
        } else {
            return shape_err(format!("matmul batch extents differ: {a:?} x {b:?}"));
        };
        let mut out_shape = batch_shape.to_vec();
        out_shape.extend([am[0], bm[1]]);
        Ok(Self {
            p: am[0],
            q: am[1],
            r: bm[1],
            batch: batch_shape.iter().product(),
            a_batched: !ab.is_empty(),
            b_batched: !bb.is_empty(),
            out_shape,
        })
    }

    fn a_off(&self, b: usize) -> usize {
        if self.a_batched {
            b * self.p * self.q
        } else {
            0
        }
    }

    fn b_off(&self, b: usize) -> usize {
        if self.b_batched {
            b * self.q * self.r
        } else {
            0
        }
    }

    pub fn forward(&self, a: &[f64], b: &[f64]) -> Tensor {
        let (p, q, r) = (self.p, self.q, self.r);
        let mut out = vec![0.0; self.batch * p * r];
        for bi in 0..self.batch {
            let a = &a[self.a_off(bi)..][..p * q];
            let b = &b[self.b_off(bi)..][..q * r];
            let o = &mut out[bi * p * r..][..p * r];
            for i in 0..p {
                let orow = &mut o[i * r..(i + 1) * r];
                for k in 0..q {
                    let aik = a[i * q + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &b[k * r..(k + 1) * r];
                    for (ov, &bv) in orow.iter_mut().zip(brow) {
                        *ov += aik * bv;
                    }
                }
            }
        }
        Tensor::from_parts(self.out_shape.clone(), out)
    }

    /// Accumulates `dy · bᵀ` into `da`.
    pub fn grad_a(&self, dy: &[f64], b: &[f64], da: &mut [f64]) {
        let (p, q, r) = (self.p, self.q, self.r);
        for bi in 0..self.batch {
            let b = &b[self.b_off(bi)..][..q * r];
            let dy = &dy[bi * p * r..][..p * r];
            let da = &mut da[self.a_off(bi)..][..p * q];
            for i in 0..p {
                let dyrow = &dy[i * r..(i + 1) * r];
                for k in 0..q {
                    let brow = &b[k * r..(k + 1) * r];
                    da[i * q + k] += dyrow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
    }

    /// Accumulates `aᵀ · dy` into `db`.
    pub fn grad_b(&self, a: &[f64], dy: &[f64], db: &mut [f64]) {
        let (p, q, r) = (self.p, self.q, self.r);
        for bi in 0..self.batch {
            let a = &a[self.a_off(bi)..][..p * q];
            let dy = &dy[bi * p * r..][..p * r];
            let db = &mut db[self.b_off(bi)..][..q * r];
            for i in 0..p {
                let dyrow = &dy[i * r..(i + 1) * r];
                for k in 0..q {
                    let aik = a[i * q + k];
                    if aik == 0.0 {
                        continue;
                    }
                    for (d, &g) in db[k * r..(k + 1) * r].iter_mut().zip(dyrow) {
                        *d += aik * g;
                    }
                }
            }
        }
    }
}

/// Index mapping for an axis permutation: `out[o] = in[map[o]]`.
pub(crate) fn permute_map(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return shape_err(format!("invalid permutation {perm:?} for shape {shape:?}"));
    }
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok((out_shape, map))
}

impl From<f64> for Tensor {
    fn from(x: f64) -> Self {
        Tensor::scalar(x)
    }
}

impl TryFrom<Vec<f64>> for Tensor {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Tensor::vector(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (p, q) = (a.shape()[0], a.shape()[1]);
        let r = b.shape()[1];
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                for k in 0..q {
                    out[i * r + j] += a.data()[i * q + k] * b.data()[k * r + j];
                }
            }
        }
        Tensor::new(vec![p, r], out).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("inner extents"));
    }

    #[test]
    fn matmul_identity_and_dot() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&m).unwrap(), m);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::new(
            vec![3, 4],
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let b = Tensor::new(
            vec![4, 2],
            (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        assert!(a.matmul(&b).unwrap().max_abs_diff(&naive(&a, &b)) <= 1e-12);
    }

    #[test]
    fn batched_matmul_broadcasts_plain_matrix() {
        let a = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 1, 2]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::vector(vec![0.0, 0.0, 0.0])
            .unwrap()
            .softmax(0)
            .unwrap();
        for &x in t.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = Tensor::vector(vec![1000.0, 0.0])
            .unwrap()
            .softmax(0)
            .unwrap();
        assert!((t.data()[0] - 1.0).abs() <= 1e-12 && t.data()[1].abs() <= 1e-12);
        assert!(t.all_finite());
        let t = Tensor::vector(vec![1.0, 2.0, 3.0])
            .unwrap()
            .softmax(0)
            .unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (k, &x) in t.data().iter().enumerate() {
            assert!((x - ((k + 1) as f64).exp() / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_over_leading_axis() {
        let t = Tensor::from_rows(&[vec![1.0, 5.0], vec![1.0, -5.0]]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.get(&[0, 0]) - 0.5).abs() < 1e-15);
        assert!((s.get(&[0, 1]) + s.get(&[1, 1]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn permute_transposes() {
        let (shape, map) = permute_map(&[2, 3], &[1, 0]).unwrap();
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
        assert!(permute_map(&[2, 3], &[0, 0]).is_err());
    }
}
