//! Dense row-major `f64` tensors and the numerically stable primitives the
//! rest of the crate is built on.
//!
//! Binary layout (little-endian): `u32` rank, one `u32` per dimension, then
//! the `f64` payload in row-major order.

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{Result, UcdError};

/// Rank-N array of `f64` with an explicit shape, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Axis index into a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Axis(pub usize);

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(UcdError::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(UcdError::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Length of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of vectors along the last axis.
    pub fn outer_len(&self) -> usize {
        self.data.len() / self.last_dim().max(1)
    }

    /// The `i`-th vector along the last axis.
    pub fn lane(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn lane_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn lanes(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.last_dim())
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(UcdError::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(UcdError::shape(format!(
                "add_scaled {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[DenseTensor]) -> Result<DenseTensor> {
        let first = parts.first().ok_or(UcdError::Empty("stack"))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(UcdError::shape(format!(
                    "stack {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        DenseTensor::new(shape, data)
    }

    /// Splits along the leading axis; inverse of [`DenseTensor::stack`].
    pub fn unstack(&self) -> Vec<DenseTensor> {
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let n: usize = inner.iter().product();
        self.data
            .chunks_exact(n)
            .map(|c| DenseTensor {
                shape: inner.clone(),
                data: c.to_vec(),
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let rank = u32::try_from(self.shape.len())
            .map_err(|_| UcdError::Format("rank overflow".into()))?;
        w.write_all(&rank.to_le_bytes())?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| UcdError::Format("dim overflow".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b4)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b8 = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(UcdError::Format("trailing bytes after tensor payload".into()));
        }
        DenseTensor::new(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.shape.len() + 8 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    /// Text dump: a `shape [..]` header, then one last-axis row per line.
    pub fn debug_dump(&self) -> String {
        let mut s = String::new();
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "shape [{}]", dims.join(", "));
        for lane in self.lanes() {
            let row: Vec<String> = lane.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

/// Softmax along `axis`, max-subtracted.
pub fn softmax(logits: &DenseTensor, axis: Axis) -> Result<DenseTensor> {
    let rank = logits.rank();
    if axis.0 >= rank {
        return Err(UcdError::Axis { axis: axis.0, rank });
    }
    let len = logits.shape[axis.0];
    let inner: usize = logits.shape[axis.0 + 1..].iter().product();
    let outer: usize = logits.shape[..axis.0].iter().product();
    let mut out = logits.clone();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = logits.data[base + k * inner];
            }
            softmax_in_place(&mut buf);
            for (k, b) in buf.iter().enumerate() {
                out.data[base + k * inner] = *b;
            }
        }
    }
    Ok(out)
}

/// Softmax of a single vector, in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log(Σ exp(v_i))`, max-subtracted.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(UcdError::Empty("log_sum_exp"));
    }
    Ok(lse_unchecked(values.iter().copied()))
}

pub(crate) fn lse_unchecked(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`. Zero-norm input is an error.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(UcdError::shape(format!(
            "cosine_similarity lengths {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(UcdError::ZeroNorm);
    }
    let s: f64 = u.iter().zip(v).map(|(a, b)| (a / nu) * (b / nv)).sum();
    Ok(s.clamp(-1.0, 1.0))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax along the last axis, flattened over the leading axes.
pub fn argmax_last_axis(t: &DenseTensor) -> Result<Vec<usize>> {
    if t.rank() == 0 {
        return Err(UcdError::shape("argmax of a rank-0 tensor"));
    }
    Ok(t.lanes().map(argmax).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> DenseTensor {
        DenseTensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[0.0, 0.0]), Axis(0)).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[1000.0, 1000.0]), Axis(0)).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[1f64.ln(), 3f64.ln()]), Axis(0)).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_inner_axis() {
        // columns of a 2x2 matrix
        let s = softmax(&t(&[2, 2], &[0.0, 1f64.ln(), 0.0, 3f64.ln()]), Axis(0)).unwrap();
        assert_eq!(s.get(&[0, 0]), 0.5);
        assert!((s.get(&[1, 1]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_bad_axis() {
        assert!(matches!(
            softmax(&t(&[2], &[0.0, 0.0]), Axis(1)),
            Err(UcdError::Axis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn lse_examples() {
        assert_eq!(log_sum_exp(&[0.0]).unwrap(), 0.0);
        let v = log_sum_exp(&[5.0, 5.0]).unwrap();
        assert!((v - (5.0 + 2f64.ln())).abs() < 1e-12);
        // ln(e + e^2 + e^3)
        let v = log_sum_exp(&[1.0, 2.0, 3.0]).unwrap();
        assert!((v - 3.407_605_964_444_380_5).abs() < 1e-12);
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(UcdError::ZeroNorm)
        ));
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_last_axis(&t(&[3], &[0.1, 0.7, 0.2])).unwrap(), vec![1]);
        assert_eq!(argmax_last_axis(&t(&[2], &[0.5, 0.5])).unwrap(), vec![0]);
        assert_eq!(
            argmax_last_axis(&t(&[2, 2], &[1.0, 2.0, 3.0, 0.0])).unwrap(),
            vec![1, 0]
        );
    }

    #[test]
    fn serialization_layout() {
        let x = t(&[1, 2], &[1.5, -2.0]);
        let bytes = x.to_bytes();
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 28);
        assert_eq!(DenseTensor::from_bytes(&bytes).unwrap(), x);
        assert!(DenseTensor::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn debug_dump_rows() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let dump = x.debug_dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines[0], "shape [2, 2]");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "3.000000 4.000000");
    }

    #[test]
    fn construction_checks() {
        assert!(DenseTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(DenseTensor::new(vec![0], vec![]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..5,
            cols in 1usize..7,
            seed in proptest::collection::vec(-50.0f64..50.0, 35)
        ) {
            let data: Vec<f64> = seed.iter().cycle().take(rows * cols).copied().collect();
            let s = softmax(&t(&[rows, cols], &data), Axis(1)).unwrap();
            for lane in s.lanes() {
                let sum: f64 = lane.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(lane.iter().all(|&p| p > 0.0));
            }
        }

        #[test]
        fn lse_bounds(v in proptest::collection::vec(-100.0f64..100.0, 1..20)) {
            let l = log_sum_exp(&v).unwrap();
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(l >= m);
            prop_assert!(l <= m + (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn cosine_symmetric_scale_invariant(
            u in proptest::collection::vec(-5.0f64..5.0, 4),
            v in proptest::collection::vec(-5.0f64..5.0, 4),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(l2_norm(&u) > 1e-3 && l2_norm(&v) > 1e-3);
            let s = cosine_similarity(&u, &v).unwrap();
            prop_assert!((s - cosine_similarity(&v, &u).unwrap()).abs() < 1e-12);
            let us: Vec<f64> = u.iter().map(|x| a * x).collect();
            let vs: Vec<f64> = v.iter().map(|x| b * x).collect();
            prop_assert!((s - cosine_similarity(&us, &vs).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn argmax_shift_invariant(
            v in proptest::collection::vec(-10.0f64..10.0, 1..10),
            c in -1000.0f64..1000.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            // shifting may merge near-ties through rounding; only compare distinct maxima
            let m = argmax(&v);
            let gap = v.iter().enumerate().filter(|(i, _)| *i != m)
                .map(|(_, x)| v[m] - x).fold(f64::INFINITY, f64::min);
            prop_assume!(gap > 1e-9);
            prop_assert_eq!(argmax(&shifted), m);
        }

        #[test]
        fn serialization_roundtrip(
            dims in proptest::collection::vec(1usize..4, 1..4),
            fill in -1e6f64..1e6,
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| fill * (i as f64 + 0.5)).collect();
            let x = DenseTensor::new(dims, data).unwrap();
            prop_assert_eq!(DenseTensor::from_bytes(&x.to_bytes()).unwrap(), x);
        }
    }
}
