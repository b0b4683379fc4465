//! Flat-parameter plumbing shared by the token model and the world model:
//! flatten/unflatten, vector arithmetic for gradients, SGD with norm clipping,
//! and the little-endian checkpoint format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"PZCKPT01";

/// A parameter set stored as a fixed list of dense tensors.
pub trait FlatParams<T: Scalar>: Clone {
    fn tensors(&self) -> Vec<&[T]>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    /// Integer dimensions written ahead of the values in a checkpoint.
    fn header(&self) -> Vec<u64>;
    /// A zero-filled parameter set with the dimensions of `header`.
    fn zeros_from_header(header: &[u64]) -> Result<Self>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} values, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(T::zero());
        z
    }

    fn fill(&mut self, v: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = v);
        }
    }

    /// `self += alpha * other`.
    fn axpy(&mut self, alpha: T, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    fn scale(&mut self, alpha: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    fn norm(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Bitwise equality of every value.
    fn bit_eq(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.len() == y.len()
                    && x.iter().zip(y.iter()).all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits())
            })
    }
}

/// One SGD step with global-norm clipping. Returns the pre-clip gradient norm.
pub fn sgd_step<T: Scalar, P: FlatParams<T>>(params: &mut P, grad: &P, lr: T, max_norm: T) -> T {
    let norm = grad.norm();
    let factor = if max_norm > T::zero() && norm > max_norm {
        max_norm / norm
    } else {
        T::one()
    };
    params.axpy(-lr * factor, grad);
    norm
}

/// Writes `magic | header_len | header (u64) | count | values (f64)`, all little-endian.
pub fn save_checkpoint<T: Scalar, P: FlatParams<T>>(params: &P, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_checkpoint<T: Scalar, P: FlatParams<T>, W: Write>(params: &P, mut w: W) -> Result<()> {
    let header = params.header();
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    for h in &header {
        w.write_all(&h.to_le_bytes())?;
    }
    let flat = params.flatten();
    w.write_all(&(flat.len() as u64).to_le_bytes())?;
    for v in flat {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar, P: FlatParams<T>>(path: &Path) -> Result<P> {
    let bytes = fs::read(path)?;
    read_checkpoint(&bytes[..])
}

pub fn read_checkpoint<T: Scalar, P: FlatParams<T>, R: Read>(mut r: R) -> Result<P> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Malformed("not a parameter checkpoint".into()));
    }
    let read_u64 = |r: &mut R| -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    };
    let n_header = read_u64(&mut r)?;
    if n_header > 64 {
        return Err(Error::Malformed(format!("implausible header length {n_header}")));
    }
    let header = (0..n_header)
        .map(|_| read_u64(&mut r))
        .collect::<Result<Vec<_>>>()?;
    let mut params = P::zeros_from_header(&header)?;
    let count = read_u64(&mut r)? as usize;
    if count != params.num_params() {
        return Err(Error::Shape(format!(
            "checkpoint holds {count} values but its header implies {}",
            params.num_params()
        )));
    }
    let mut flat = Vec::with_capacity(count);
    for _ in 0..count {
        flat.push(T::lit(f64::from_bits(read_u64(&mut r)?)));
    }
    params.load_flat(&flat)?;
    Ok(params)
}

/// Optimizer choice shared by both trainers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Gradient-norm-clipped SGD or Adam over any [`FlatParams`] type.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar, P: FlatParams<T>> {
    kind: OptimizerKind,
    lr: T,
    max_norm: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m: Option<P>,
    v: Option<P>,
}

impl<T: Scalar, P: FlatParams<T>> Optimizer<T, P> {
    pub fn new(kind: OptimizerKind, lr: f64, max_norm: f64) -> Self {
        Self {
            kind,
            lr: T::lit(lr),
            max_norm: T::lit(max_norm),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: None,
            v: None,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut P, grad: &P) -> T {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grad, self.lr, self.max_norm),
            OptimizerKind::Adam => {
                let norm = grad.norm();
                let factor = if self.max_norm > T::zero() && norm > self.max_norm {
                    self.max_norm / norm
                } else {
                    T::one()
                };
                let m = self.m.get_or_insert_with(|| grad.zeros_like());
                let v = self.v.get_or_insert_with(|| grad.zeros_like());
                self.step += 1;
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = T::one() - b1.powi(self.step);
                let c2 = T::one() - b2.powi(self.step);
                let lr = self.lr;
                let eps = self.eps;
                let gs = grad.tensors();
                let ms = m.tensors_mut();
                let vs = v.tensors_mut();
                let ps = params.tensors_mut();
                for (((p, g), mt), vt) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
                    for i in 0..p.len() {
                        let gi = g[i] * factor;
                        mt[i] = b1 * mt[i] + (T::one() - b1) * gi;
                        vt[i] = b2 * vt[i] + (T::one() - b2) * gi * gi;
                        let mh = mt[i] / c1;
                        let vh = vt[i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
                norm
            }
        }
    }
}
