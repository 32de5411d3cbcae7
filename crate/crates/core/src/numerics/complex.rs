//! Complex arithmetic as pairs of real tensors.
//!
//! Every complex quantity that takes part in a gradient computation is held
//! as separate real and imaginary [`Tensor`]s, so all backward rules stay
//! real-valued.

use super::tensor::Tensor;
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Complex tensor stored as `re + j im`.
#[derive(Clone, Debug)]
pub struct ComplexPair {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexPair {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(NumericsError::Dimension {
                op: "complex",
                lhs: re.shape().to_vec(),
                rhs: im.shape().to_vec(),
            });
        }
        Ok(ComplexPair { re, im })
    }

    /// Constant complex tensor from interleaved-free separate parts.
    pub fn constant(re: Vec<f64>, im: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::new(Tensor::constant(re, shape)?, Tensor::constant(im, shape)?)
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn conj(&self) -> ComplexPair {
        ComplexPair {
            re: self.re.clone(),
            im: self.im.neg(),
        }
    }

    pub fn add(&self, other: &ComplexPair) -> Result<ComplexPair> {
        Ok(ComplexPair {
            re: self.re.add(&other.re)?,
            im: self.im.add(&other.im)?,
        })
    }

    pub fn sub(&self, other: &ComplexPair) -> Result<ComplexPair> {
        Ok(ComplexPair {
            re: self.re.sub(&other.re)?,
            im: self.im.sub(&other.im)?,
        })
    }

    /// Elementwise complex product.
    pub fn cmul(&self, other: &ComplexPair) -> Result<ComplexPair> {
        let re = self.re.mul(&other.re)?.sub(&self.im.mul(&other.im)?)?;
        let im = self.re.mul(&other.im)?.add(&self.im.mul(&other.re)?)?;
        Ok(ComplexPair { re, im })
    }

    /// Product with a real tensor of the same shape (or a real scalar).
    pub fn scale_by(&self, s: &Tensor) -> Result<ComplexPair> {
        Ok(ComplexPair {
            re: self.re.mul(s)?,
            im: self.im.mul(s)?,
        })
    }

    /// `|z|^2` elementwise.
    pub fn abs2(&self) -> Result<Tensor> {
        self.re.square().add(&self.im.square())
    }

    pub fn map(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<ComplexPair> {
        Ok(ComplexPair {
            re: f(&self.re)?,
            im: f(&self.im)?,
        })
    }

    /// Batched complex product `op(A) op(B)` where `op` optionally
    /// conjugate-transposes (`herm_*`) the trailing matrix.
    pub fn cbmm(&self, other: &ComplexPair, herm_a: bool, herm_b: bool) -> Result<ComplexPair> {
        // (ar + j s_a ai)(br + j s_b bi), s = -1 for conjugated operands
        let sa = if herm_a { -1.0 } else { 1.0 };
        let sb = if herm_b { -1.0 } else { 1.0 };
        let rr = self.re.bmm(&other.re, herm_a, herm_b)?;
        let ii = self.im.bmm(&other.im, herm_a, herm_b)?;
        let ri = self.re.bmm(&other.im, herm_a, herm_b)?;
        let ir = self.im.bmm(&other.re, herm_a, herm_b)?;
        let re = rr.sub(&ii.scale(sa * sb))?;
        let im = ri.scale(sb).add(&ir.scale(sa))?;
        Ok(ComplexPair { re, im })
    }

    /// Complex matrix `[m, n]` times vector `[n]`.
    pub fn cmatvec(&self, x: &ComplexPair) -> Result<ComplexPair> {
        let (m, n) = match self.shape() {
            [m, n] => (*m, *n),
            s => {
                return Err(NumericsError::Dimension {
                    op: "cmatvec",
                    lhs: s.to_vec(),
                    rhs: x.shape().to_vec(),
                })
            }
        };
        if x.shape() != [n] {
            return Err(NumericsError::Dimension {
                op: "cmatvec",
                lhs: self.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let a = self.map(|t| t.reshape(&[1, m, n]))?;
        let v = x.map(|t| t.reshape(&[1, n, 1]))?;
        a.cbmm(&v, false, false)?.map(|t| t.reshape(&[m]))
    }

    /// `a^H b` for two vectors of equal length; conjugates the first argument.
    pub fn hermitian_dot(&self, other: &ComplexPair) -> Result<ComplexPair> {
        if self.shape() != other.shape() || self.shape().len() != 1 {
            return Err(NumericsError::Dimension {
                op: "hermitian_dot",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let n = self.shape()[0];
        let a = self.map(|t| t.reshape(&[1, n, 1]))?;
        let b = other.map(|t| t.reshape(&[1, n, 1]))?;
        a.cbmm(&b, true, false)?.map(|t| t.reshape(&[]))
    }

    /// Batched complex solve `A X = B` through the real block embedding
    /// `[[Ar, -Ai], [Ai, Ar]]`.
    pub fn csolve(a: &ComplexPair, b: &ComplexPair) -> Result<ComplexPair> {
        let sa = a.shape();
        let sb = b.shape();
        if sa.len() != 3 || sb.len() != 3 || sa[1] != sa[2] || sb[1] != sa[1] || sa[0] != sb[0] {
            return Err(NumericsError::Dimension {
                op: "csolve",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let n = sa[1];
        let top = Tensor::concat(&[a.re.clone(), a.im.neg()], 2)?;
        let bottom = Tensor::concat(&[a.im.clone(), a.re.clone()], 2)?;
        let block = Tensor::concat(&[top, bottom], 1)?;
        let rhs = Tensor::concat(&[b.re.clone(), b.im.clone()], 1)?;
        let x = Tensor::solve(&block, &rhs)?;
        Ok(ComplexPair {
            re: x.narrow(1, 0, n)?,
            im: x.narrow(1, n, n)?,
        })
    }

    /// Euclidean norm along the last axis (the axis is removed).
    pub fn norm_last(&self) -> Result<Tensor> {
        let axis = self.shape().len() - 1;
        self.abs2()?.sum_axis(axis)?.sqrt()
    }
}
