//! Complex matrices as explicit real/imaginary tensor pairs.

use serde::{Deserialize, Serialize};

use super::lu::LuFactors;
use super::tape::{Op, Tape, Var};
use super::tensor::RealTensor;
use super::NumericsError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexMat {
    pub re: RealTensor,
    pub im: RealTensor,
}

impl ComplexMat {
    pub fn new(re: RealTensor, im: RealTensor) -> Result<Self, NumericsError> {
        if re.shape() != im.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "complex",
                lhs: re.shape().to_vec(),
                rhs: im.shape().to_vec(),
            });
        }
        re.dims()?;
        Ok(Self { re, im })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            re: RealTensor::zeros(vec![rows, cols]),
            im: RealTensor::zeros(vec![rows, cols]),
        }
    }

    pub fn from_parts(rows: usize, cols: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(RealTensor::matrix(rows, cols, re)?, RealTensor::matrix(rows, cols, im)?)
    }

    pub fn rows(&self) -> usize {
        self.re.rows()
    }

    pub fn cols(&self) -> usize {
        self.re.cols()
    }

    pub fn get(&self, r: usize, c: usize) -> (f64, f64) {
        (self.re.get(r, c), self.im.get(r, c))
    }

    pub fn set(&mut self, r: usize, c: usize, value: (f64, f64)) {
        self.re.set(r, c, value.0);
        self.im.set(r, c, value.1);
    }

    /// Squared Euclidean norm of column `c`.
    pub fn col_norm_sqr(&self, c: usize) -> f64 {
        (0..self.rows())
            .map(|r| {
                let (a, b) = self.get(r, c);
                a * a + b * b
            })
            .sum()
    }

    /// Sum of squared magnitudes of all entries.
    pub fn frobenius_sqr(&self) -> f64 {
        self.re.data().iter().chain(self.im.data()).map(|v| v * v).sum()
    }

    pub fn add(&self, other: &Self) -> Result<Self, NumericsError> {
        if self.re.shape() != other.re.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "complex add",
                lhs: self.re.shape().to_vec(),
                rhs: other.re.shape().to_vec(),
            });
        }
        let sum = |a: &RealTensor, b: &RealTensor| {
            RealTensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
            )
        };
        Ok(Self {
            re: sum(&self.re, &other.re),
            im: sum(&self.im, &other.im),
        })
    }

    /// Column `c` as an `n x 1` complex matrix.
    pub fn column(&self, c: usize) -> Self {
        let n = self.rows();
        let re = (0..n).map(|r| self.re.get(r, c)).collect();
        let im = (0..n).map(|r| self.im.get(r, c)).collect();
        Self {
            re: RealTensor::from_parts(vec![n, 1], re),
            im: RealTensor::from_parts(vec![n, 1], im),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.re.max_abs_diff(&other.re).max(self.im.max_abs_diff(&other.im))
    }
}

/// A complex matrix recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl Tape {
    pub fn cparam(&self, m: &ComplexMat) -> CVar {
        CVar {
            re: self.param(m.re.clone()),
            im: self.param(m.im.clone()),
        }
    }

    pub fn cconstant(&self, m: &ComplexMat) -> CVar {
        CVar {
            re: self.constant(m.re.clone()),
            im: self.constant(m.im.clone()),
        }
    }

    pub fn cvalue(&self, v: CVar) -> ComplexMat {
        ComplexMat {
            re: self.value(v.re),
            im: self.value(v.im),
        }
    }

    /// `(a_r b_r - a_i b_i) + i (a_r b_i + a_i b_r)`.
    pub fn cmatmul(&self, a: CVar, b: CVar) -> Result<CVar, NumericsError> {
        let rr = self.matmul(a.re, b.re)?;
        let ii = self.matmul(a.im, b.im)?;
        let ri = self.matmul(a.re, b.im)?;
        let ir = self.matmul(a.im, b.re)?;
        Ok(CVar {
            re: self.sub(rr, ii)?,
            im: self.add(ri, ir)?,
        })
    }

    pub fn cadd(&self, a: CVar, b: CVar) -> Result<CVar, NumericsError> {
        Ok(CVar {
            re: self.add(a.re, b.re)?,
            im: self.add(a.im, b.im)?,
        })
    }

    /// Hermitian transpose.
    pub fn conj_transpose(&self, a: CVar) -> Result<CVar, NumericsError> {
        let re = self.transpose(a.re)?;
        let imt = self.transpose(a.im)?;
        Ok(CVar {
            re,
            im: self.scale(imt, -1.0)?,
        })
    }

    /// Elementwise `|z|^2`.
    pub fn cabs2(&self, a: CVar) -> Result<Var, NumericsError> {
        let rr = self.mul(a.re, a.re)?;
        let ii = self.mul(a.im, a.im)?;
        self.add(rr, ii)
    }

    pub fn cslice_cols(&self, a: CVar, start: usize, len: usize) -> Result<CVar, NumericsError> {
        Ok(CVar {
            re: self.slice_cols(a.re, start, len)?,
            im: self.slice_cols(a.im, start, len)?,
        })
    }

    /// Scales column `j` of `a` by the real `v[j]` (`v` is `1 x m`).
    pub fn cmul_cols(&self, a: CVar, v: Var) -> Result<CVar, NumericsError> {
        Ok(CVar {
            re: self.mul_cols(a.re, v)?,
            im: self.mul_cols(a.im, v)?,
        })
    }

    pub fn cconcat_cols(&self, parts: &[CVar]) -> Result<CVar, NumericsError> {
        let re: Vec<Var> = parts.iter().map(|p| p.re).collect();
        let im: Vec<Var> = parts.iter().map(|p| p.im).collect();
        Ok(CVar {
            re: self.concat_cols(&re)?,
            im: self.concat_cols(&im)?,
        })
    }

    /// Solves `a x = b` for square complex `a` via partial-pivot LU on the
    /// real embedding `[[Re a, -Im a], [Im a, Re a]]`.
    pub fn csolve(&self, a: CVar, b: CVar) -> Result<CVar, NumericsError> {
        let (ar, ai) = (self.value(a.re), self.value(a.im));
        let (br, bi) = (self.value(b.re), self.value(b.im));
        let (n, n2) = ar.dims()?;
        let (bn, m) = br.dims()?;
        if n != n2 || ai.shape() != ar.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "csolve",
                lhs: ar.shape().to_vec(),
                rhs: ai.shape().to_vec(),
            });
        }
        if bn != n || bi.shape() != br.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "csolve",
                lhs: ar.shape().to_vec(),
                rhs: br.shape().to_vec(),
            });
        }
        let dim = 2 * n;
        let mut emb = vec![0.0; dim * dim];
        for i in 0..n {
            for j in 0..n {
                let (re, im) = (ar.get(i, j), ai.get(i, j));
                emb[i * dim + j] = re;
                emb[i * dim + n + j] = -im;
                emb[(n + i) * dim + j] = im;
                emb[(n + i) * dim + n + j] = re;
            }
        }
        let mut rhs = br.data().to_vec();
        rhs.extend_from_slice(bi.data());
        let lu = LuFactors::factor(&emb, dim)?;
        let x = lu.solve(&rhs, m);
        let parents = [a.re.id(), a.im.id(), b.re.id(), b.im.id()];
        let stacked = self.push(
            "csolve",
            Op::CSolve {
                a_re: parents[0],
                a_im: parents[1],
                b_re: parents[2],
                b_im: parents[3],
                lu,
            },
            &parents,
            RealTensor::from_parts(vec![dim, m], x),
        )?;
        Ok(CVar {
            re: self.slice_rows(stacked, 0, n)?,
            im: self.slice_rows(stacked, n, n)?,
        })
    }
}
