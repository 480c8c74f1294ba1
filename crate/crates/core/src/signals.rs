//! Sampled time series, experiment logs and constraint sets.
//!
//! Every signal lives on the controller sample grid. Samples that would come
//! from before (or after) the recorded window are kept as explicit gaps
//! instead of being zero-padded, so regression builders can drop the rows that
//! touch them.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("sample period must be finite and > 0, got {0}")]
    BadPeriod(f64),
    #[error("a signal needs at least one sample")]
    Empty,
    #[error("range {from}..{to} is outside 0..{len}")]
    Range { from: usize, to: usize, len: usize },
    #[error("channel `{channel}` has {got} samples, expected {expected}")]
    Length {
        channel: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("channel `{channel}` sample period {got} differs from {expected}")]
    Period {
        channel: &'static str,
        got: f64,
        expected: f64,
    },
    #[error("sample {index} is unavailable")]
    Unavailable { index: usize },
    #[error("bound pair `{name}` has min {min} > max {max}")]
    Bounds { name: &'static str, min: f64, max: f64 },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A uniformly sampled scalar signal.
///
/// `start_index` is the absolute time index of the first sample, so the
/// sample at position `k` belongs to time `(start_index + k) * sample_period`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSignal {
    values: Vec<Option<f64>>,
    sample_period: f64,
    start_index: i64,
}

impl SampledSignal {
    pub fn new(values: Vec<f64>, sample_period: f64) -> Result<Self, SignalError> {
        Self::with_start(values.into_iter().map(Some).collect(), sample_period, 0)
    }

    pub fn with_start(
        values: Vec<Option<f64>>,
        sample_period: f64,
        start_index: i64,
    ) -> Result<Self, SignalError> {
        if !(sample_period.is_finite() && sample_period > 0.0) {
            return Err(SignalError::BadPeriod(sample_period));
        }
        if values.is_empty() {
            return Err(SignalError::Empty);
        }
        Ok(Self {
            values,
            sample_period,
            start_index,
        })
    }

    pub fn constant(value: f64, n: usize, sample_period: f64) -> Result<Self, SignalError> {
        Self::new(vec![value; n], sample_period)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn start_index(&self) -> i64 {
        self.start_index
    }

    /// Sample at position `k` (relative to the start of the record).
    pub fn get(&self, k: usize) -> Option<f64> {
        self.values.get(k).copied().flatten()
    }

    /// Sample at a signed relative position; anything outside the record is
    /// unavailable.
    pub fn at(&self, k: i64) -> Option<f64> {
        if k < 0 {
            None
        } else {
            self.get(k as usize)
        }
    }

    pub fn samples(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn is_fully_available(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    /// All samples as plain reals; fails on the first gap.
    pub fn dense(&self) -> Result<Vec<f64>, SignalError> {
        self.values
            .iter()
            .enumerate()
            .map(|(index, v)| v.ok_or(SignalError::Unavailable { index }))
            .collect()
    }

    /// Time stamp in seconds of position `k`.
    pub fn time(&self, k: usize) -> f64 {
        (self.start_index + k as i64) as f64 * self.sample_period
    }

    /// Output sample `t` equals input sample `t - lag`; samples that would
    /// reference outside the record become unavailable.
    pub fn shift(&self, lag: i64) -> SampledSignal {
        let n = self.values.len() as i64;
        let values = (0..n).map(|t| self.at(t - lag)).collect();
        SampledSignal {
            values,
            sample_period: self.sample_period,
            start_index: self.start_index,
        }
    }

    pub fn slice(&self, from: usize, to: usize) -> Result<SampledSignal, SignalError> {
        let len = self.values.len();
        if from >= to || to > len {
            return Err(SignalError::Range { from, to, len });
        }
        Ok(SampledSignal {
            values: self.values[from..to].to_vec(),
            sample_period: self.sample_period,
            start_index: self.start_index + from as i64,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SampledSignal {
        SampledSignal {
            values: self.values.iter().map(|v| v.map(&f)).collect(),
            sample_period: self.sample_period,
            start_index: self.start_index,
        }
    }
}

/// Free function form of [`SampledSignal::shift`].
pub fn shift(signal: &SampledSignal, lag: i64) -> SampledSignal {
    signal.shift(lag)
}

/// Synchronized input/output/scheduling records of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentLog {
    pub u: SampledSignal,
    pub y: SampledSignal,
    pub p: SampledSignal,
}

impl ExperimentLog {
    pub fn new(u: SampledSignal, y: SampledSignal, p: SampledSignal) -> Result<Self, SignalError> {
        let n = u.len();
        let ts = u.sample_period();
        for (channel, s) in [("y", &y), ("p", &p)] {
            if s.len() != n {
                return Err(SignalError::Length {
                    channel,
                    got: s.len(),
                    expected: n,
                });
            }
            if s.sample_period() != ts {
                return Err(SignalError::Period {
                    channel,
                    got: s.sample_period(),
                    expected: ts,
                });
            }
        }
        Ok(Self { u, y, p })
    }

    pub fn from_vecs(u: Vec<f64>, y: Vec<f64>, p: Vec<f64>, ts: f64) -> Result<Self, SignalError> {
        Self::new(
            SampledSignal::new(u, ts)?,
            SampledSignal::new(y, ts)?,
            SampledSignal::new(p, ts)?,
        )
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn sample_period(&self) -> f64 {
        self.u.sample_period()
    }

    pub fn slice(&self, from: usize, to: usize) -> Result<ExperimentLog, SignalError> {
        Ok(ExperimentLog {
            u: self.u.slice(from, to)?,
            y: self.y.slice(from, to)?,
            p: self.p.slice(from, to)?,
        })
    }

    /// Writes the `t,u,y,p` CSV format. Unavailable samples are empty fields.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SignalError> {
        write_columns(
            out,
            &self.u,
            &[("u", &self.u), ("y", &self.y), ("p", &self.p)],
        )
    }

    pub fn read_csv<R: Read>(input: R) -> Result<ExperimentLog, SignalError> {
        let mut cols = read_columns(input, &["u", "y", "p"])?;
        let p = cols.pop().unwrap();
        let y = cols.pop().unwrap();
        let u = cols.pop().unwrap();
        ExperimentLog::new(u, y, p)
    }
}

/// Free function form of [`ExperimentLog::slice`].
pub fn slice(log: &ExperimentLog, from: usize, to: usize) -> Result<ExperimentLog, SignalError> {
    log.slice(from, to)
}

fn fmt_sample(v: Option<f64>) -> String {
    // `{}` on f64 prints the shortest representation that parses back to the
    // same bits.
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes a `t,<names...>` CSV where `t` comes from `clock`.
pub(crate) fn write_columns<W: Write>(
    out: W,
    clock: &SampledSignal,
    columns: &[(&str, &SampledSignal)],
) -> Result<(), SignalError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t"];
    header.extend(columns.iter().map(|(n, _)| *n));
    w.write_record(&header).map_err(|e| SignalError::Csv(e.to_string()))?;
    for k in 0..clock.len() {
        let mut rec = vec![format!("{}", clock.time(k))];
        rec.extend(columns.iter().map(|(_, s)| fmt_sample(s.get(k))));
        w.write_record(&rec).map_err(|e| SignalError::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the named columns of a `t,...` CSV. Extra columns are ignored.
pub fn read_columns<R: Read>(
    input: R,
    names: &[&str],
) -> Result<Vec<SampledSignal>, SignalError> {
    let (times, cols) = read_raw_columns(input, names)?;
    let (ts, start) = infer_grid(&times)?;
    cols.into_iter()
        .map(|c| SampledSignal::with_start(c, ts, start))
        .collect()
}

pub(crate) fn read_raw_columns<R: Read>(
    input: R,
    names: &[&str],
) -> Result<(Vec<f64>, Vec<Vec<Option<f64>>>), SignalError> {
    let csv_err = |e: csv::Error| SignalError::Csv(e.to_string());
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_err)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| SignalError::Csv(format!("missing column `{name}`")))
    };
    let t_idx = find("t")?;
    let idx: Vec<usize> = names.iter().map(|n| find(n)).collect::<Result<_, _>>()?;
    let mut times = Vec::new();
    let mut cols = vec![Vec::new(); names.len()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let parse = |i: usize| -> Result<Option<f64>, SignalError> {
            let field = rec.get(i).unwrap_or("").trim();
            if field.is_empty() {
                return Ok(None);
            }
            field.parse::<f64>().map(Some).map_err(|_| {
                SignalError::Csv(format!("row {}: cannot parse `{field}`", line + 2))
            })
        };
        times.push(
            parse(t_idx)?
                .ok_or_else(|| SignalError::Csv(format!("row {}: empty time", line + 2)))?,
        );
        for (c, &i) in cols.iter_mut().zip(&idx) {
            c.push(parse(i)?);
        }
    }
    if times.is_empty() {
        return Err(SignalError::Empty);
    }
    Ok((times, cols))
}

/// Recovers (period, start index) from a column of time stamps. The period is
/// rounded to 12 significant digits, which undoes the rounding noise of
/// `index * period` products.
fn infer_grid(times: &[f64]) -> Result<(f64, i64), SignalError> {
    if times.len() < 2 {
        return Err(SignalError::Csv(
            "need at least two rows to infer the sample period".into(),
        ));
    }
    let raw = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    let ts = round_sig(raw, 12);
    if !(ts > 0.0) {
        return Err(SignalError::BadPeriod(ts));
    }
    Ok((ts, (times[0] / ts).round() as i64))
}

fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let s = format!("{:.*e}", (digits - 1) as usize, x);
    s.parse().unwrap_or(x)
}

/// Magnitude, rate and output limits. Missing limits are infinite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSet {
    #[serde(default = "neg_inf")]
    pub u_min: f64,
    #[serde(default = "pos_inf")]
    pub u_max: f64,
    #[serde(default = "neg_inf")]
    pub du_min: f64,
    #[serde(default = "pos_inf")]
    pub du_max: f64,
    #[serde(default = "neg_inf")]
    pub y_min: f64,
    #[serde(default = "pos_inf")]
    pub y_max: f64,
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}

fn pos_inf() -> f64 {
    f64::INFINITY
}

impl Default for BoundSet {
    fn default() -> Self {
        Self::unbounded()
    }
}

impl BoundSet {
    pub fn unbounded() -> Self {
        Self {
            u_min: f64::NEG_INFINITY,
            u_max: f64::INFINITY,
            du_min: f64::NEG_INFINITY,
            du_max: f64::INFINITY,
            y_min: f64::NEG_INFINITY,
            y_max: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        for (name, min, max) in [
            ("u", self.u_min, self.u_max),
            ("du", self.du_min, self.du_max),
            ("y", self.y_min, self.y_max),
        ] {
            if min.is_nan() || max.is_nan() || min > max {
                return Err(SignalError::Bounds { name, min, max });
            }
        }
        Ok(())
    }

    pub fn is_unbounded(&self) -> bool {
        [
            self.u_min, self.u_max, self.du_min, self.du_max, self.y_min, self.y_max,
        ]
        .iter()
        .all(|b| b.is_infinite())
    }
}
