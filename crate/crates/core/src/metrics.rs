//! Streaming statistics and the JSONL/CSV record writers.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Welford accumulator for mean and population variance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningStat<T> {
    pub count: u64,
    pub mean: T,
    pub m2: T,
}

impl<T: Scalar> RunningStat<T> {
    pub fn new() -> Self {
        Self {
            count: 0,
            mean: T::zero(),
            m2: T::zero(),
        }
    }

    pub fn from_slice(xs: &[T]) -> Self {
        let mut s = Self::new();
        for &x in xs {
            s.update(x);
        }
        s
    }

    pub fn update(&mut self, x: T) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / T::lit(self.count as f64);
        self.m2 += delta * (x - self.mean);
    }

    /// Chan et al. pairwise combination; exact up to rounding.
    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n_a = T::lit(self.count as f64);
        let n_b = T::lit(other.count as f64);
        let n = n_a + n_b;
        let delta = other.mean - self.mean;
        Self {
            count: self.count + other.count,
            mean: self.mean + delta * n_b / n,
            m2: self.m2 + other.m2 + delta * delta * n_a * n_b / n,
        }
    }

    /// Population variance (0 when fewer than one sample).
    pub fn variance(&self) -> T {
        if self.count == 0 {
            T::zero()
        } else {
            (self.m2 / T::lit(self.count as f64)).max(T::zero())
        }
    }

    pub fn std(&self) -> T {
        self.variance().sqrt()
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(p: &[T]) -> Result<T> {
    let total: T = p.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(1e-6) || p.iter().any(|&x| x < T::zero()) {
        return Err(Error::Malformed(format!(
            "entropy of a non-normalized vector (sum {total})"
        )));
    }
    Ok(-p
        .iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| x * x.ln())
        .sum::<T>())
}

/// Append-only JSONL writer; every record is flushed so partial logs stay parseable.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn write<R: Serialize>(&mut self, record: &R) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// CSV mirror of a JSONL stream of flat objects. The header is taken from the
/// first record's keys.
pub struct CsvWriter {
    out: BufWriter<File>,
    columns: Option<Vec<String>>,
}

impl CsvWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
            columns: None,
        })
    }

    pub fn write<R: Serialize>(&mut self, record: &R) -> Result<()> {
        let value = serde_json::to_value(record)?;
        let Value::Object(map) = value else {
            return Err(Error::Malformed("csv record must be an object".into()));
        };
        if self.columns.is_none() {
            let cols: Vec<String> = map.keys().cloned().collect();
            writeln!(self.out, "{}", cols.join(","))?;
            self.columns = Some(cols);
        }
        let cols = self.columns.as_ref().expect("header written");
        let row: Vec<String> = cols
            .iter()
            .map(|c| match map.get(c) {
                None | Some(Value::Null) => String::new(),
                Some(Value::String(s)) => csv_escape(s),
                Some(v) => v.to_string(),
            })
            .collect();
        writeln!(self.out, "{}", row.join(","))?;
        self.out.flush()?;
        Ok(())
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
