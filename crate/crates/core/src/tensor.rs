//! Dense row-major `f32` arrays with 64-bit accumulation.
//!
//! Only the handful of operations the encoder needs are provided. There is no
//! broadcasting: shapes must agree exactly or the call returns
//! [`Error::Shape`].

use std::cell::Cell;
use std::fmt;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const MAX_RANK: usize = 4;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

thread_local! {
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` with multiply-accumulate counting enabled on this thread and
/// returns the number of MACs performed by [`Tensor::matmul`] and any kernel
/// that reports through [`record_macs`]. Nested calls are not supported; the
/// inner call owns the counter until it returns.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let saved = MAC_COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let n = MAC_COUNTER.with(|c| c.replace(saved)).unwrap_or(0);
    (out, n)
}

pub fn record_macs(n: u64) {
    MAC_COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::Domain(format!(
            "tensor rank must be in 1..={MAX_RANK}, got {}",
            dims.len()
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_dims(&dims)?;
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &dims, &[data.len()]));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        check_dims(dims).expect("invalid tensor rank");
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            dims: vec![rows.len(), cols],
            data: rows.concat(),
        }
    }

    pub fn uniform(dims: &[usize], lo: f32, hi: f32, rng: &mut SplitMix64) -> Self {
        let mut t = Self::zeros(dims);
        for v in &mut t.data {
            *v = rng.uniform(lo as f64, hi as f64) as f32;
        }
        t
    }

    pub fn gaussian(dims: &[usize], std: f32, rng: &mut SplitMix64) -> Self {
        let mut t = Self::zeros(dims);
        for v in &mut t.data {
            *v = (rng.gaussian() * std as f64) as f32;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Extent of the trailing axis for a matrix; 1 for a vector.
    pub fn cols(&self) -> usize {
        if self.rank() == 1 {
            1
        } else {
            self.data.len() / self.dims[0].max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Shape {
                op,
                left: self.dims.clone(),
                right: vec![0; rank],
            });
        }
        Ok(())
    }

    /// `c[i,j] = Σ_k a[i,k]·b[k,j]`, accumulated in `f64` in ascending `k`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.dims[1] != other.dims[0] {
            return Err(Error::shape("matmul", &self.dims, &other.dims));
        }
        let (m, k, n) = (self.dims[0], self.dims[1], other.dims[1]);
        let mut out = vec![0f32; m * n];
        let mut acc = vec![0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let a_row = &self.data[i * k..(i + 1) * k];
            for (kk, &a) in a_row.iter().enumerate() {
                let a = a as f64;
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (acc, &b) in acc.iter_mut().zip(b_row) {
                    *acc += a * b as f64;
                }
            }
            for (o, a) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        record_macs((m * k * n) as u64);
        Ok(Tensor {
            dims: vec![m, n],
            data: out,
        })
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::shape(op, &self.dims, &other.dims));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape("add_assign", &self.dims, &other.dims));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds `bias` (length = cols) to every row.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || bias.len() != self.dims[1] {
            return Err(Error::shape("add_row_vector", &self.dims, &bias.dims));
        }
        let mut out = self.clone();
        let c = self.dims[1];
        for row in out.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.expect_rank("transpose", 2)?;
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut data = vec![0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            dims: vec![c, r],
            data,
        })
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        check_dims(dims)?;
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.dims, dims));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Rows `[start, end)` along axis 0.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.dims[0] {
            return Err(Error::Index {
                what: "slice_rows",
                index: end,
                len: self.dims[0],
            });
        }
        let stride = self.data.len() / self.dims[0].max(1);
        let mut dims = self.dims.clone();
        dims[0] = end - start;
        Ok(Tensor {
            dims,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        self.expect_rank("slice_cols", 2)?;
        let c = self.dims[1];
        if start > end || end > c {
            return Err(Error::Index {
                what: "slice_cols",
                index: end,
                len: c,
            });
        }
        let mut data = Vec::with_capacity(self.dims[0] * (end - start));
        for row in self.data.chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        Ok(Tensor {
            dims: vec![self.dims[0], end - start],
            data,
        })
    }

    /// Concatenates along axis 0. All trailing dims must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("concat of zero tensors".into()))?;
        let tail = &first.dims[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.dims[1..] != tail {
                return Err(Error::shape("concat_rows", &first.dims, &p.dims));
            }
            rows += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = rows;
        Ok(Tensor { dims, data })
    }

    /// Gathers rows by index into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        self.expect_rank("gather_rows", 2)?;
        let c = self.dims[1];
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.dims[0] {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    len: self.dims[0],
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor {
            dims: vec![idx.len(), c],
            data,
        })
    }

    /// Reverses the order of rows (axis 0).
    pub fn reverse_rows(&self) -> Tensor {
        let rows = self.dims[0];
        let stride = self.data.len() / rows.max(1);
        let mut data = Vec::with_capacity(self.data.len());
        for i in (0..rows).rev() {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        Tensor {
            dims: self.dims.clone(),
            data,
        }
    }

    /// `C×H×W → C×(H/2)×(W/2)` by averaging each 2×2 block.
    pub fn mean_pool_2x2(&self) -> Result<Tensor> {
        self.expect_rank("mean_pool_2x2", 3)?;
        let (c, h, w) = (self.dims[0], self.dims[1], self.dims[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("mean_pool_2x2", &self.dims, &[c, h / 2 * 2, w / 2 * 2]));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let plane = &self.data[ch * h * w..(ch + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let s = plane[2 * i * w + 2 * j] as f64
                        + plane[2 * i * w + 2 * j + 1] as f64
                        + plane[(2 * i + 1) * w + 2 * j] as f64
                        + plane[(2 * i + 1) * w + 2 * j + 1] as f64;
                    data.push((s * 0.25) as f32);
                }
            }
        }
        Ok(Tensor {
            dims: vec![c, oh, ow],
            data,
        })
    }

    /// `C×H×W → C×2H×2W`, each pixel copied into a 2×2 block.
    pub fn nearest_upsample_2x(&self) -> Result<Tensor> {
        self.expect_rank("nearest_upsample_2x", 3)?;
        let (c, h, w) = (self.dims[0], self.dims[1], self.dims[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0f32; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    data[ch * oh * ow + i * ow + j] = self.data[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        Ok(Tensor {
            dims: vec![c, oh, ow],
            data,
        })
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Numerically stable softmax over a vector.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of empty vector".into()));
    }
    if let Some(i) = v.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric { op: "softmax", index: i });
    }
    let max = v.data.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = v.data.iter().map(|&x| (x as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Tensor {
        dims: v.dims.clone(),
        data: exps.iter().map(|e| (e / sum) as f32).collect(),
    })
}

/// `ln(1 + eˣ)`; returns `x` above 30 where the correction is below f64 precision.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Indices sorted by descending value; ties keep ascending index order.
pub fn argsort_desc(values: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // sort_by is stable, so equal values stay in index order.
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f32> {
        let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
        let mut out = Vec::new();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0f64;
                for kk in 0..k {
                    s += a.data()[i * k + kk] as f64 * b.data()[kk * n + j] as f64;
                }
                out.push(s as f32);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(i.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_scalar() {
        let a = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_random_4x3_3x2_matches_naive() {
        let mut rng = SplitMix64::new(11);
        let a = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        assert_eq!(a.matmul(&b).unwrap().data(), naive_matmul(&a, &b).as_slice());
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match a.matmul(&b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_counts_macs() {
        let a = Tensor::zeros(&[4, 3]);
        let b = Tensor::zeros(&[3, 5]);
        let (_, n) = count_macs(|| a.matmul(&b).unwrap());
        assert_eq!(n, 60);
        // Outside a counting scope nothing accumulates.
        a.matmul(&b).unwrap();
        let (_, n) = count_macs(|| ());
        assert_eq!(n, 0);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&Tensor::vector(vec![1000.0, 0.0])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-6);

        let s = softmax(&Tensor::vector(vec![std::f32::consts::LN_2, 0.0])).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_nan() {
        let err = softmax(&Tensor::vector(vec![0.0, f32::NAN])).unwrap_err();
        assert!(matches!(err, Error::Numeric { index: 1, .. }));
    }

    #[test]
    fn softplus_cases() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((softplus(1.0) - 1.313_261_687_518_223).abs() < 1e-12);
        let tiny = softplus(-100.0);
        assert!(tiny >= 0.0 && tiny < 1e-40);
        assert_eq!(softplus(50.0), 50.0);
    }

    #[test]
    fn upsample_cases() {
        let one = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(one.nearest_upsample_2x().unwrap().data(), &[5.0; 4]);

        let g = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = g.nearest_upsample_2x().unwrap();
        assert_eq!(up.dims(), &[1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.data(), &expected);

        let c = Tensor::full(&[2, 3, 3], 0.25);
        assert!(c.nearest_upsample_2x().unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn mean_pool_inverts_upsample() {
        let mut rng = SplitMix64::new(3);
        let g = Tensor::uniform(&[3, 4, 4], -2.0, 2.0, &mut rng);
        let back = g.nearest_upsample_2x().unwrap().mean_pool_2x2().unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn argsort_ties_prefer_lower_index() {
        assert_eq!(argsort_desc(&[1.0, 3.0, 3.0, 2.0]), vec![1, 2, 3, 0]);
        assert_eq!(argsort_desc(&[0.5; 4]), vec![0, 1, 2, 3]);
    }

    #[test]
    fn rank_limits() {
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn matmul_bit_exact_vs_naive(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed: u64) {
            let mut rng = SplitMix64::new(seed);
            let a = Tensor::uniform(&[m, k], -3.0, 3.0, &mut rng);
            let b = Tensor::uniform(&[k, n], -3.0, 3.0, &mut rng);
            let c = a.matmul(&b).unwrap();
            let expected = naive_matmul(&a, &b);
            prop_assert!(c.data().iter().zip(&expected).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        #[test]
        fn reshape_roundtrip(r in 1usize..6, c in 1usize..6, seed: u64) {
            let mut rng = SplitMix64::new(seed);
            let t = Tensor::uniform(&[r, c], -1.0, 1.0, &mut rng);
            let flat = t.reshape(&[r * c]).unwrap();
            prop_assert_eq!(flat.reshape(&[r, c]).unwrap(), t);
        }

        #[test]
        fn concat_slice_roundtrip(r in 1usize..8, c in 1usize..5, cut in 0usize..8, seed: u64) {
            let cut = cut.min(r);
            let mut rng = SplitMix64::new(seed);
            let t = Tensor::uniform(&[r, c], -1.0, 1.0, &mut rng);
            let a = t.slice_rows(0, cut).unwrap();
            let b = t.slice_rows(cut, r).unwrap();
            prop_assert_eq!(Tensor::concat_rows(&[&a, &b]).unwrap(), t);
        }

        #[test]
        fn argsort_is_permutation(v in proptest::collection::vec(-5i32..5, 0..40)) {
            let vals: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            let idx = argsort_desc(&vals);
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..vals.len()).collect::<Vec<_>>());
            for w in idx.windows(2) {
                let (a, b) = (w[0], w[1]);
                prop_assert!(vals[a] > vals[b] || (vals[a] == vals[b] && a < b));
            }
        }

        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-50f32..50.0, 1..10_000)) {
            let s = softmax(&Tensor::vector(v)).unwrap();
            let sum: f64 = s.data().iter().map(|&x| x as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "sum {}", sum);
            prop_assert!(s.data().iter().all(|&x| x >= 0.0));
        }
    }
}
