use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::NumericsError;

/// Dense row-major tensor of 64-bit floats.
///
/// Every constructor that accepts caller data rejects non-finite entries, so a
/// `RealTensor` obtained through the public API never carries NaN or Inf.
#[derive(Debug, Clone, PartialEq)]
pub struct RealTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                op: "tensor construction",
                index,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from row slices; all rows must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(NumericsError::LengthMismatch {
                shape: vec![rows.len(), cols],
                len: bad.len(),
            });
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Result<Self, NumericsError> {
        Self::new(vec![1, 1], vec![value])
    }

    /// Column vector (`len x 1`).
    pub fn column(values: Vec<f64>) -> Result<Self, NumericsError> {
        let n = values.len();
        Self::new(vec![n, 1], values)
    }

    /// Row vector (`1 x len`).
    pub fn row(values: Vec<f64>) -> Result<Self, NumericsError> {
        let n = values.len();
        Self::new(vec![1, n], values)
    }

    /// Internal constructor for values produced by tape operations; finiteness
    /// is checked by the tape when the node is recorded.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims(&self) -> Result<(usize, usize), NumericsError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(NumericsError::NotAMatrix {
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = value;
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn transpose(&self) -> Result<Self, NumericsError> {
        let (r, c) = self.dims()?;
        Ok(Self::from_parts(vec![c, r], transpose_raw(&self.data, r, c)))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let cols = self.cols().max(1);
        self.data.chunks(cols).map(<[f64]>::to_vec).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn transpose_raw(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// `a (n x k) * b (k x m)`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n x k) * b^T` where `b` is stored as `m x k`.
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * b` where `a` is stored as `k x n` and `b` as `k x m`.
pub(crate) fn matmul_at_b(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * m..(i + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// Matrices serialize as nested row arrays; other ranks as {shape, data}.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TensorRepr {
    Matrix(Vec<Vec<f64>>),
    General { shape: Vec<usize>, data: Vec<f64> },
}

impl Serialize for RealTensor {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.shape.len() == 2 && self.shape[0] > 0 && self.shape[1] > 0 {
            TensorRepr::Matrix(self.to_rows()).serialize(serializer)
        } else {
            TensorRepr::General {
                shape: self.shape.clone(),
                data: self.data.clone(),
            }
            .serialize(serializer)
        }
    }
}

impl<'de> Deserialize<'de> for RealTensor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let t = match TensorRepr::deserialize(deserializer)? {
            TensorRepr::Matrix(rows) => RealTensor::from_rows(&rows),
            TensorRepr::General { shape, data } => RealTensor::new(shape, data),
        };
        t.map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan_and_bad_length() {
        assert!(matches!(
            RealTensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(NumericsError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            RealTensor::new(vec![2, 2], vec![1.0; 3]),
            Err(NumericsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn raw_matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let c = matmul_raw(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![-1.0, 7.5, -1.0, 18.0]);
        let bt = transpose_raw(&b, 3, 2);
        assert_eq!(matmul_a_bt(&a, &bt, 2, 3, 2), c);
        let at = transpose_raw(&a, 2, 3);
        assert_eq!(matmul_at_b(&at, &b, 3, 2, 2), c);
    }

    #[test]
    fn json_matrix_round_trip() {
        let t = RealTensor::matrix(2, 2, vec![0.1, -2.5e-17, 3.0, 1.0 / 3.0]).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.starts_with("[["));
        let back: RealTensor = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
