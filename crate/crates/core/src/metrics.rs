//! Step-response and tracking measures.

use std::io::Write;

use thiserror::Error;

use crate::signals::{SampledSignal, SignalError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("step size is zero")]
    ZeroStep,
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Times are in seconds from the step instant. `None` marks a metric the
/// response never reaches.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub rise_time_10_90: Option<f64>,
    pub settling_time_2pct: Option<f64>,
    pub overshoot_pct: Option<f64>,
    pub final_value: f64,
}

/// First time (in samples after `start`, interpolated) at which the
/// normalized response reaches `level`.
fn first_crossing(n: &[f64], level: f64) -> Option<f64> {
    if n.first().is_some_and(|&v| v >= level) {
        return Some(0.0);
    }
    n.windows(2).enumerate().find_map(|(k, w)| {
        (w[0] < level && w[1] >= level).then(|| k as f64 + (level - w[0]) / (w[1] - w[0]))
    })
}

/// Rise time (10 to 90 percent), 2 percent settling time with "enter and
/// remain" semantics, and overshoot of `y` after a step at sample
/// `step_start` from `initial` to `final_target`.
pub fn step_metrics(
    y: &SampledSignal,
    step_start: usize,
    initial: f64,
    final_target: f64,
) -> Result<StepMetrics, MetricsError> {
    let span = final_target - initial;
    if span == 0.0 {
        return Err(MetricsError::ZeroStep);
    }
    if step_start >= y.len() {
        return Err(MetricsError::Shape(format!("step at {step_start} is past the {} samples", y.len())));
    }
    let vals = y.dense()?;
    let ts = y.sample_period();
    let n: Vec<f64> = vals[step_start..].iter().map(|v| (v - initial) / span).collect();
    let final_value = *vals.last().expect("non-empty");

    let t10 = first_crossing(&n, 0.1);
    let Some(t10) = t10 else {
        return Ok(StepMetrics {
            rise_time_10_90: None,
            settling_time_2pct: None,
            overshoot_pct: None,
            final_value,
        });
    };
    let rise = first_crossing(&n, 0.9).map(|t90| (t90 - t10) * ts);

    let band = 0.02;
    let outside = |v: f64| (v - 1.0).abs() > band;
    let settling = match n.iter().rposition(|&v| outside(v)) {
        None => Some(0.0),
        Some(k) if k + 1 == n.len() => None,
        Some(k) => {
            // interpolate the entry into the band between k and k+1
            let (a, b) = (n[k], n[k + 1]);
            let edge = if a > 1.0 { 1.0 + band } else { 1.0 - band };
            let frac = if b == a { 1.0 } else { ((edge - a) / (b - a)).clamp(0.0, 1.0) };
            Some((k as f64 + frac) * ts)
        }
    };
    let peak = n.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(StepMetrics {
        rise_time_10_90: rise,
        settling_time_2pct: settling,
        overshoot_pct: Some(((peak - 1.0) * 100.0).max(0.0)),
        final_value,
    })
}

/// Mean square of `y - y_d`.
pub fn matching_ms(y: &SampledSignal, y_d: &SampledSignal) -> Result<f64, MetricsError> {
    if y.len() != y_d.len() {
        return Err(MetricsError::Shape(format!("{} vs {} samples", y.len(), y_d.len())));
    }
    let a = y.dense()?;
    let b = y_d.dense()?;
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64)
}

/// Largest excursion beyond `[low, high]` and the number of samples outside.
pub fn violation_stats(signal: &[f64], low: f64, high: f64) -> (f64, usize) {
    signal.iter().fold((0.0, 0), |(worst, count), &v| {
        let over = (v - high).max(low - v).max(0.0);
        if over > 0.0 {
            (f64::max(worst, over), count + 1)
        } else {
            (worst, count)
        }
    })
}

/// `u(t) - u(t-1)` with `u(-1) = u_initial`.
pub fn increments(u: &[f64], u_initial: f64) -> Vec<f64> {
    let mut prev = u_initial;
    u.iter()
        .map(|&v| {
            let d = v - prev;
            prev = v;
            d
        })
        .collect()
}

/// Writes `metric,value` rows. Undefined values are empty fields.
pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[(&str, Option<f64>)]) -> Result<(), MetricsError> {
    writeln!(out, "metric,value")?;
    for (name, v) in rows {
        match v {
            Some(v) => writeln!(out, "{name},{v}")?,
            None => writeln!(out, "{name},")?,
        }
    }
    Ok(())
}

/// Human-readable block for the same rows.
pub fn summary(rows: &[(&str, Option<f64>)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    rows.iter()
        .map(|(n, v)| match v {
            Some(v) => format!("{n:<width$}  {v:.6}\n"),
            None => format!("{n:<width$}  undefined\n"),
        })
        .collect()
}

impl StepMetrics {
    pub fn rows(&self, prefix: &str) -> Vec<(String, Option<f64>)> {
        vec![
            (format!("{prefix}rise_time_s"), self.rise_time_10_90),
            (format!("{prefix}settling_time_s"), self.settling_time_2pct),
            (format!("{prefix}overshoot_pct"), self.overshoot_pct),
            (format!("{prefix}final_value"), Some(self.final_value)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig(v: Vec<f64>) -> SampledSignal {
        SampledSignal::new(v, 0.01).unwrap()
    }

    fn first_order() -> SampledSignal {
        sig((0..1000).map(|k| 1.0 - 0.99f64.powi(k)).collect())
    }

    #[test]
    fn first_order_analytic() {
        let m = step_metrics(&first_order(), 0, 0.0, 1.0).unwrap();
        let ts = 0.01;
        let rise = (0.1f64.ln() - 0.9f64.ln()) / 0.99f64.ln() * ts;
        let settle = 0.02f64.ln() / 0.99f64.ln() * ts;
        assert!((m.rise_time_10_90.unwrap() - rise).abs() < 1e-3);
        assert!((m.settling_time_2pct.unwrap() - settle).abs() < 1e-3);
        assert!((m.rise_time_10_90.unwrap() - 2.186).abs() < 0.005);
        assert!((m.settling_time_2pct.unwrap() - 3.893).abs() < 0.005);
        assert_eq!(m.overshoot_pct, Some(0.0));
    }

    #[test]
    fn ideal_step() {
        let mut v = vec![0.0; 5];
        v.extend(vec![2.0; 20]);
        let m = step_metrics(&sig(v), 4, 0.0, 2.0).unwrap();
        assert!(m.rise_time_10_90.unwrap() <= 0.01);
        assert!(m.settling_time_2pct.unwrap() <= 0.01);
    }

    #[test]
    fn no_response_is_undefined() {
        let m = step_metrics(&sig(vec![0.5; 50]), 0, 0.5, 1.5).unwrap();
        assert_eq!(m.rise_time_10_90, None);
        assert_eq!(m.settling_time_2pct, None);
        assert!(matches!(step_metrics(&sig(vec![0.5; 5]), 0, 1.0, 1.0), Err(MetricsError::ZeroStep)));
    }

    #[test]
    fn ms_examples() {
        let a = sig(vec![1.0, 2.0, 3.0]);
        assert_eq!(matching_ms(&a, &a).unwrap(), 0.0);
        let b = a.map(|x| x + 0.5);
        assert!((matching_ms(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        assert!(matching_ms(&a, &sig(vec![0.0; 2])).is_err());
    }

    #[test]
    fn violations() {
        assert_eq!(violation_stats(&[0.0, 1.0, 0.5], 0.0, 1.0), (0.0, 0));
        let (worst, count) = violation_stats(&[0.0, 1.05, 0.5], 0.0, 1.0);
        assert!((worst - 0.05).abs() < 1e-12);
        assert_eq!(count, 1);
        assert_eq!(increments(&[1.0, 1.5, 1.0], 0.0), vec![1.0, 0.5, -0.5]);
    }

    #[test]
    fn csv_and_summary() {
        let rows = [("rise", Some(1.5)), ("settle", None)];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "metric,value\nrise,1.5\nsettle,\n");
        assert!(summary(&rows).contains("undefined"));
    }

    proptest! {
        #[test]
        fn affine_invariance(a in 0.1f64..10.0, neg in any::<bool>(), b in -5.0f64..5.0, pole in 0.9f64..0.995) {
            let a = if neg { -a } else { a };
            let base: Vec<f64> = (0..1500).map(|k| 1.0 - pole.powi(k)).collect();
            let m0 = step_metrics(&sig(base.clone()), 0, 0.0, 1.0).unwrap();
            let scaled = sig(base.iter().map(|v| a * v + b).collect());
            let m1 = step_metrics(&scaled, 0, b, a + b).unwrap();
            prop_assert!((m0.rise_time_10_90.unwrap() - m1.rise_time_10_90.unwrap()).abs() < 1e-9);
            prop_assert!((m0.settling_time_2pct.unwrap() - m1.settling_time_2pct.unwrap()).abs() < 1e-9);
        }

        #[test]
        fn ms_symmetric_and_zero_iff_equal(x in proptest::collection::vec(-10.0f64..10.0, 1..50), d in -1.0f64..1.0) {
            let a = sig(x.clone());
            let b = sig(x.iter().map(|v| v + d).collect());
            prop_assert_eq!(matching_ms(&a, &b).unwrap(), matching_ms(&b, &a).unwrap());
            prop_assert_eq!(matching_ms(&a, &b).unwrap() == 0.0, d == 0.0);
        }
    }
}
