use super::kernels;
use super::{LinalgError, Result};

/// Dense vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite { op: "Vector::new" });
        }
        Ok(Self { data })
    }

    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        self.check_len(other, "dot")?;
        Ok(kernels::dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        kernels::dot(&self.data, &self.data).sqrt()
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        self.check_len(other, "add")?;
        Ok(Self::from_raw(self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect()))
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.check_len(other, "sub")?;
        Ok(Self::from_raw(self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect()))
    }

    pub fn scale(&self, s: f64) -> Vector {
        Self::from_raw(self.data.iter().map(|x| x * s).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    fn check_len(&self, other: &Vector, op: &'static str) -> Result<()> {
        if self.len() != other.len() {
            return Err(LinalgError::DimensionMismatch {
                op,
                expected: format!("length {}", self.len()),
                found: format!("length {}", other.len()),
            });
        }
        Ok(())
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(u: &Vector, v: &Vector) -> Result<f64> {
    let uv = u.dot(v)?;
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    if u == v {
        return Ok(1.0);
    }
    Ok((uv / (nu * nv)).clamp(-1.0, 1.0))
}
