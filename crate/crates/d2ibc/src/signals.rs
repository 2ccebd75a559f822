//! Discrete-time signals, regressor construction, and the lp norms used by
//! the closed-loop analysis.
//!
//! Signals carry an explicit integer time origin so that data records
//! (indexed 1-L..0) and closed-loop runs (indexed 1..T) live on a single
//! signed time axis.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A discrete-time signal: uniformly sampled scalar (or fixed-width vector)
/// values starting at `start_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    data: Vec<f64>,
    width: usize,
    start_index: i64,
}

impl Signal {
    /// Scalar signal from samples, first sample at time `start_index`.
    pub fn from_scalars(samples: Vec<f64>, start_index: i64) -> Result<Self> {
        Self::from_flat(samples, 1, start_index)
    }

    /// Vector signal from a flat buffer of `width`-sized samples.
    pub fn from_flat(data: Vec<f64>, width: usize, start_index: i64) -> Result<Self> {
        if width == 0 {
            return Err(Error::Domain("signal width must be positive".into()));
        }
        if data.len() % width != 0 {
            return Err(Error::Shape(format!(
                "flat buffer of {} values is not a multiple of width {}",
                data.len(),
                width
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite sample {bad}")));
        }
        Ok(Self {
            data,
            width,
            start_index,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn start_index(&self) -> i64 {
        self.start_index
    }

    /// Index of the last sample.
    pub fn end_index(&self) -> i64 {
        self.start_index + self.len() as i64 - 1
    }

    pub fn contains(&self, t: i64) -> bool {
        t >= self.start_index && t <= self.end_index()
    }

    /// Scalar sample at time `t`. Panics if the signal is vector-valued.
    pub fn at(&self, t: i64) -> Result<f64> {
        assert_eq!(self.width, 1, "scalar access on vector signal");
        if !self.contains(t) {
            return Err(Error::Range(format!(
                "time index {t} outside [{}, {}]",
                self.start_index,
                self.end_index()
            )));
        }
        Ok(self.data[(t - self.start_index) as usize])
    }

    pub fn samples(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_scalar(&self) -> impl Iterator<Item = f64> + '_ {
        assert_eq!(self.width, 1, "scalar iteration on vector signal");
        self.data.iter().copied()
    }

    /// lp norm over both component index and time.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        lp_norm(&self.data, p)
    }
}

/// The lp norm of a nonempty vector: (sum |x_i|^p)^(1/p), or max |x_i| for
/// p = infinity.
pub fn lp_norm(x: &[f64], p: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Domain("lp_norm of empty vector".into()));
    }
    if p.is_nan() || p < 1.0 {
        return Err(Error::Domain(format!("lp_norm requires p >= 1, got {p}")));
    }
    if p.is_infinite() {
        Ok(x.iter().fold(0.0, |m, v| m.max(v.abs())))
    } else {
        Ok(x.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p))
    }
}

/// A regressor of model order `n`: the n output lags y_t..y_{t-n+1} followed
/// by the n-1 input lags u_{t-1}..u_{t-n+1}, 2n-1 entries total.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    entries: Vec<f64>,
    n: usize,
}

impl Regressor {
    pub fn from_parts(entries: Vec<f64>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("regressor order must be >= 1".into()));
        }
        if entries.len() != 2 * n - 1 {
            return Err(Error::Shape(format!(
                "regressor of order {n} needs {} entries, got {}",
                2 * n - 1,
                entries.len()
            )));
        }
        Ok(Self { entries, n })
    }

    /// Build from lag slices laid out as (y_t..y_{t-n+1}, u_{t-1}..u_{t-n+1}).
    pub fn from_lags(y_lags: &[f64], u_lags: &[f64]) -> Result<Self> {
        let n = y_lags.len();
        if u_lags.len() + 1 != n {
            return Err(Error::Shape(format!(
                "expected {} input lags for order {n}, got {}",
                n.saturating_sub(1),
                u_lags.len()
            )));
        }
        let mut entries = Vec::with_capacity(2 * n - 1);
        entries.extend_from_slice(y_lags);
        entries.extend_from_slice(u_lags);
        Self::from_parts(entries, n)
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// Output lags y_t..y_{t-n+1}.
    pub fn output_lags(&self) -> &[f64] {
        &self.entries[..self.n]
    }

    /// Input lags u_{t-1}..u_{t-n+1} (empty when n = 1).
    pub fn input_lags(&self) -> &[f64] {
        &self.entries[self.n..]
    }
}

/// Build the order-n regressor at time `t` from output and input signals.
pub fn build_regressor(y: &Signal, u: &Signal, t: i64, n: usize) -> Result<Regressor> {
    if n == 0 {
        return Err(Error::Domain("regressor order must be >= 1".into()));
    }
    let oldest = t - n as i64 + 1;
    if !y.contains(t) || !y.contains(oldest) {
        return Err(Error::Range(format!(
            "output history [{oldest}, {t}] not covered by signal [{}, {}]",
            y.start_index(),
            y.end_index()
        )));
    }
    if n > 1 && (!u.contains(t - 1) || !u.contains(oldest)) {
        return Err(Error::Range(format!(
            "input history [{oldest}, {}] not covered by signal [{}, {}]",
            t - 1,
            u.start_index(),
            u.end_index()
        )));
    }
    let mut entries = Vec::with_capacity(2 * n - 1);
    for k in 0..n as i64 {
        entries.push(y.at(t - k)?);
    }
    for k in 1..n as i64 {
        entries.push(u.at(t - k)?);
    }
    Regressor::from_parts(entries, n)
}

/// The measured input/output record, indexed 1-L..0.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRecord {
    u: Signal,
    y: Signal,
}

impl DataRecord {
    pub fn new(u: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::Shape(format!(
                "input length {} != output length {}",
                u.len(),
                y.len()
            )));
        }
        if u.is_empty() {
            return Err(Error::Data("empty data record".into()));
        }
        let start = 1 - u.len() as i64;
        Ok(Self {
            u: Signal::from_scalars(u, start)?,
            y: Signal::from_scalars(y, start)?,
        })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn u(&self) -> &Signal {
        &self.u
    }

    pub fn y(&self) -> &Signal {
        &self.y
    }

    /// Write as CSV with header `t,u,y`, shortest exact decimal per value.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "t,u,y")?;
        for t in self.u.start_index()..=self.u.end_index() {
            writeln!(w, "{},{},{}", t, self.u.at(t)?, self.y.at(t)?)?;
        }
        Ok(())
    }
}

/// Load a `t,u,y` CSV record. Header row is required; indices are remapped
/// to 1-L..0 regardless of the stored `t` column.
pub fn load_record(path: &Path) -> Result<DataRecord> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let header = header?;
    if header.trim() != "t,u,y" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header 't,u,y', got '{}'", header.trim()),
        });
    }

    let mut u = Vec::new();
    let mut y = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("'{}': {e}", s.trim()),
            })
        };
        let uv = parse(fields[1])?;
        let yv = parse(fields[2])?;
        if !uv.is_finite() || !yv.is_finite() {
            return Err(Error::Validation(format!(
                "non-finite value at line {lineno}"
            )));
        }
        u.push(uv);
        y.push(yv);
    }
    if u.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no data rows".into(),
        });
    }
    DataRecord::new(u, y)
}
