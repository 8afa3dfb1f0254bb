//! Dense row-major matrices, logistic/softmax helpers and seedable random
//! streams.
//!
//! All arithmetic is `f64` and every reduction runs in a fixed left-to-right
//! order so repeated runs are bitwise identical.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{check_len, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("matrix data", rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_len("matrix row", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec input", self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`, accumulated row by row.
    pub fn t_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("transposed matvec input", self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_len("matmul inner dimension", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for c in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.get(r, k) * other.get(k, c);
                }
                out.set(r, c, acc);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = alpha * ur;
            if s == 0.0 {
                continue;
            }
            for (w, &vc) in self.row_mut(r).iter_mut().zip(v) {
                *w += s * vc;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Maximum absolute row sum (the induced sup-norm).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Scalar logistic function. The lower tail is floored at the smallest
/// normal `f64` so the result stays strictly positive.
#[inline]
pub fn logistic(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.max(f64::MIN_POSITIVE)
}

pub fn sigmoid(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| logistic(x)).collect()
}

/// `ln(1 + e^v)` without overflow.
#[inline]
pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let max = v
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        return Err(Error::Empty("log-sum-exp input"));
    }
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// A seedable random stream with named, independent sub-streams.
///
/// Identical `(seed, stream_id)` pairs produce identical sequences. Sub-streams
/// are derived from labels (layer, epoch, batch, ...) rather than from draws,
/// so consuming numbers from one stream never shifts another.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fresh stream for the given label path, independent of how many numbers
    /// have been drawn from `self`.
    pub fn derive(&self, labels: &[u64]) -> RngStream {
        let mut id = splitmix64(self.stream_id ^ 0x6a09_e667_f3bc_c908);
        for &l in labels {
            id = splitmix64(id ^ splitmix64(l.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        RngStream::new(self.seed, id)
    }

    /// Uniform draw in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw (Box-Muller).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(&[0.0]), vec![0.5]);
        assert!((sigmoid(&[3f64.ln()])[0] - 0.75).abs() < 1e-15);
        let tiny = sigmoid(&[-1000.0])[0];
        assert!(tiny > 0.0 && tiny <= 1e-300);
        assert!(!logistic(700.0).is_nan() && !logistic(-700.0).is_nan());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-50.0, 0.0, 3.5, 1e3] {
            for p in softmax(&[c, c, c]).unwrap() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (got, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn matmul_examples() {
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
        let ones = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(m.matmul(&ones).unwrap().as_slice(), &[3.0, 7.0]);
        assert_eq!(
            Matrix::zeros(2, 2).matmul(&m).unwrap(),
            Matrix::zeros(2, 2)
        );
        assert!(matches!(
            ones.matmul(&ones),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn matrix_rejects_bad_data() {
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(matches!(
            Matrix::new(1, 1, vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn matvec_agrees_with_matmul() {
        let m = Matrix::new(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 4.0]).unwrap();
        let x = [0.25, 1.0, -1.0];
        let col = Matrix::new(3, 1, x.to_vec()).unwrap();
        assert_eq!(m.matvec(&x).unwrap(), m.matmul(&col).unwrap().into_vec());
        let y = [2.0, -1.0];
        let row = Matrix::new(1, 2, y.to_vec()).unwrap();
        assert_eq!(m.t_matvec(&y).unwrap(), row.matmul(&m).unwrap().into_vec());
    }

    #[test]
    fn streams_are_reproducible() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = RngStream::new(42, 8);
        let mut d = RngStream::new(42, 7);
        let same = (0..100).filter(|_| c.next_u64() == d.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn derived_streams_ignore_parent_consumption() {
        let parent = RngStream::new(1, 0);
        let mut used = parent.clone();
        for _ in 0..17 {
            used.uniform();
        }
        let mut x = parent.derive(&[3, 4]);
        let mut y = used.derive(&[3, 4]);
        assert_eq!(x.next_u64(), y.next_u64());
        assert_ne!(parent.derive(&[3, 4]).stream_id(), parent.derive(&[4, 3]).stream_id());
        assert_ne!(parent.derive(&[1]).stream_id(), parent.derive(&[1, 0]).stream_id());
    }

    fn random_matrix(rng: &mut RngStream, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.uniform_range(-2.0, 2.0))
    }

    proptest! {
        #[test]
        fn sigmoid_is_symmetric(v in proptest::collection::vec(-800.0f64..800.0, 1..20)) {
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            for (a, b) in sigmoid(&v).iter().zip(sigmoid(&neg)) {
                prop_assert!((a + b - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-700.0f64..700.0, 1..30)) {
            let p = softmax(&v).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, k in 1usize..6, l in 1usize..6) {
            let mut rng = RngStream::new(seed, 0);
            let a = random_matrix(&mut rng, n, m);
            let b = random_matrix(&mut rng, m, k);
            let c = random_matrix(&mut rng, k, l);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let diff: Vec<f64> = left.as_slice().iter().zip(right.as_slice()).map(|(x, y)| x - y).collect();
            let diff = Matrix::new(n, l, diff).unwrap().frobenius_norm();
            prop_assert!(diff <= 1e-9 * left.frobenius_norm().max(1e-300));
        }
    }
}
