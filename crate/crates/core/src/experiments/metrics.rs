use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::MetricsError;
use crate::persistence::{EventBody, RunEvent};

fn decisions(events: &[RunEvent]) -> impl Iterator<Item = bool> + '_ {
    events.iter().filter_map(|e| match &e.body {
        EventBody::Decision { record, .. } => Some(record.decision),
        _ => None,
    })
}

/// Accepted iterations over all iterations with a decision.
pub fn improvement_rate(events: &[RunEvent]) -> Result<f64, MetricsError> {
    let (mut accepted, mut total) = (0usize, 0usize);
    for d in decisions(events) {
        total += 1;
        accepted += usize::from(d);
    }
    if total == 0 {
        return Err(MetricsError::EmptyLog);
    }
    Ok(accepted as f64 / total as f64)
}

pub fn rejection_rate(events: &[RunEvent]) -> Result<f64, MetricsError> {
    let (mut rejected, mut total) = (0usize, 0usize);
    for d in decisions(events) {
        total += 1;
        rejected += usize::from(!d);
    }
    if total == 0 {
        return Err(MetricsError::EmptyLog);
    }
    Ok(rejected as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ic {
    Value(f64),
    /// At least one series is constant, so the correlation is undefined.
    NoVariance,
}

impl Ic {
    pub fn value(self) -> Option<f64> {
        match self {
            Ic::Value(v) => Some(v),
            Ic::NoVariance => None,
        }
    }
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Ic {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ic::NoVariance;
    }
    Ic::Value((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation between validation and test improvements.
pub fn spearman_ic(val: &[f64], test: &[f64]) -> Result<Ic, MetricsError> {
    if val.len() != test.len() {
        return Err(MetricsError::LengthMismatch(val.len(), test.len()));
    }
    if val.len() < 2 {
        return Err(MetricsError::TooShort(val.len()));
    }
    Ok(pearson(&average_ranks(val), &average_ranks(test)))
}

/// Ordinary least-squares slope with a one-sided test for a positive trend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendTest {
    pub slope: f64,
    pub t_stat: f64,
    pub df: f64,
    /// P(T >= t) under a zero slope.
    pub p_value: f64,
}

pub fn trend_test(x: &[f64], y: &[f64]) -> Result<TrendTest, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(MetricsError::TooShort(n));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(MetricsError::TooShort(1));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let df = nf - 2.0;
    let se = (sse / df / sxx).sqrt();
    let (t_stat, p_value) = if se == 0.0 {
        let t = if slope > 0.0 { f64::INFINITY } else if slope < 0.0 { f64::NEG_INFINITY } else { 0.0 };
        (t, if slope > 0.0 { 0.0 } else if slope < 0.0 { 1.0 } else { 0.5 })
    } else {
        let t = slope / se;
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        (t, 1.0 - dist.cdf(t))
    };
    Ok(TrendTest { slope, t_stat, df, p_value })
}
