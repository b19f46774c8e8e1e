//! Point-forecast accuracy metrics and the naive reference forecasts.
//!
//! smape is in percent with the same `1e-8` denominator floor as the smape
//! task loss. mase scales the forecast MAE by the in-sample MAE of the
//! seasonal naive forecast with period `m`. owa averages smape and mase
//! relative to the naive2 benchmark (seasonally adjusted naive, multiplicative
//! classical decomposition, seasonality detected by a 90% autocorrelation
//! test), and is only reported when a seasonal period is configured.

use serde::{Deserialize, Serialize};

use crate::align::SMAPE_EPS;
use crate::error::{Error, Result};

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    mean(pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)))
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    mean(pred.iter().zip(target).map(|(p, y)| (p - y).abs()))
}

pub fn smape(pred: &[f64], target: &[f64]) -> f64 {
    200.0
        * mean(
            pred.iter()
                .zip(target)
                .map(|(p, y)| (p - y).abs() / (p.abs() + y.abs()).max(SMAPE_EPS)),
        )
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// In-sample MAE of the seasonal naive forecast `x_t ≈ x_{t-m}`.
pub fn naive_scale(insample: &[f64], m: usize) -> Result<f64> {
    if m == 0 || insample.len() <= m {
        return Err(Error::Model(format!(
            "mase needs more than {m} in-sample points, got {}",
            insample.len()
        )));
    }
    Ok(mean(insample.windows(m + 1).map(|w| (w[m] - w[0]).abs())))
}

pub fn mase(pred: &[f64], target: &[f64], insample: &[f64], m: usize) -> Result<f64> {
    let scale = naive_scale(insample, m)?;
    if !(scale > 0.0) {
        return Err(Error::Model("mase undefined: in-sample naive error is zero".into()));
    }
    Ok(mae(pred, target) / scale)
}

/// Repeats the last observation.
pub fn naive1(insample: &[f64], horizon: usize) -> Vec<f64> {
    let last = *insample.last().expect("non-empty history");
    vec![last; horizon]
}

fn acf(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let m = x.iter().sum::<f64>() / n as f64;
    let den: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    if den == 0.0 {
        return 0.0;
    }
    let num: f64 = (lag..n).map(|t| (x[t] - m) * (x[t - lag] - m)).sum();
    num / den
}

/// 90% one-sided autocorrelation test at lag `m`; needs at least `3m` points.
pub fn is_seasonal(x: &[f64], m: usize) -> bool {
    if m <= 1 || x.len() < 3 * m {
        return false;
    }
    let r: Vec<f64> = (1..=m).map(|k| acf(x, k)).collect();
    let tail: f64 = r[..m - 1].iter().map(|v| v * v).sum();
    let limit = 1.645 * ((1.0 + 2.0 * tail) / x.len() as f64).sqrt();
    r[m - 1].abs() > limit
}

/// Multiplicative seasonal indices (mean one) from a centred moving average.
pub fn seasonal_indices(x: &[f64], m: usize) -> Vec<f64> {
    let n = x.len();
    let half = m / 2;
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for t in half..n.saturating_sub(half) {
        let ma = if m % 2 == 1 {
            x[t - half..=t + half].iter().sum::<f64>() / m as f64
        } else {
            let inner: f64 = x[t + 1 - half..t + half].iter().sum();
            (0.5 * x[t - half] + inner + 0.5 * x[t + half]) / m as f64
        };
        sums[t % m] += x[t] / ma;
        counts[t % m] += 1;
    }
    let mut si: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 1.0 } else { s / c as f64 })
        .collect();
    let total: f64 = si.iter().sum();
    si.iter_mut().for_each(|v| *v *= m as f64 / total);
    si
}

/// Seasonally adjusted naive forecast. Falls back to [`naive1`] when the
/// series is not seasonal at `m` or has nonpositive values.
pub fn naive2(insample: &[f64], horizon: usize, m: usize) -> Vec<f64> {
    if !is_seasonal(insample, m) || insample.iter().any(|&v| v <= 0.0) {
        return naive1(insample, horizon);
    }
    let si = seasonal_indices(insample, m);
    let n = insample.len();
    let last = insample[n - 1] / si[(n - 1) % m];
    (1..=horizon).map(|k| last * si[(n - 1 + k) % m]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub step: usize,
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    pub mase: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub owa: Option<f64>,
    pub per_horizon: Vec<HorizonMetrics>,
    pub windows: usize,
    pub wall_clock_secs: f64,
}

/// One forecast series: a single variate of a single window.
pub struct SeriesForecast<'a> {
    pub pred: &'a [f64],
    pub target: &'a [f64],
    pub insample: &'a [f64],
}

/// Aggregates metrics over series of equal horizon.
///
/// mse/mae/smape are pooled over all points; mase and the owa ratios are
/// averaged per series. `seasonality` is the period used for the mase scale
/// (1 when absent); owa is computed only when it is given.
pub fn evaluate_series(
    series: &[SeriesForecast],
    seasonality: Option<usize>,
    windows: usize,
) -> Result<MetricsReport> {
    let horizon = series.first().map(|s| s.pred.len()).unwrap_or(0);
    let m = seasonality.unwrap_or(1);
    let pred: Vec<f64> = series.iter().flat_map(|s| s.pred.iter().copied()).collect();
    let target: Vec<f64> = series.iter().flat_map(|s| s.target.iter().copied()).collect();

    let mut mase_sum = 0.0;
    let mut n2_smape = 0.0;
    let mut n2_mase = 0.0;
    let mut smape_sum = 0.0;
    let mut counted = 0usize;
    for s in series {
        let scale = naive_scale(s.insample, m)?;
        if !(scale > 0.0) {
            log::warn!("skipping a series with zero in-sample naive error in mase");
            continue;
        }
        counted += 1;
        mase_sum += mae(s.pred, s.target) / scale;
        smape_sum += smape(s.pred, s.target);
        if seasonality.is_some() {
            let n2 = naive2(s.insample, horizon, m);
            n2_smape += smape(&n2, s.target);
            n2_mase += mae(&n2, s.target) / scale;
        }
    }
    if counted == 0 {
        return Err(Error::Model("mase undefined: every series has zero in-sample naive error".into()));
    }
    let mase_v = mase_sum / counted as f64;
    let owa = seasonality.and_then(|_| {
        let (s, n) = (smape_sum / counted as f64, n2_smape / counted as f64);
        let mn = n2_mase / counted as f64;
        (n > 0.0 && mn > 0.0).then(|| 0.5 * (s / n + mase_v / mn))
    });

    let per_horizon = (0..horizon)
        .map(|h| {
            let p: Vec<f64> = series.iter().map(|s| s.pred[h]).collect();
            let y: Vec<f64> = series.iter().map(|s| s.target[h]).collect();
            HorizonMetrics {
                step: h + 1,
                mse: mse(&p, &y),
                mae: mae(&p, &y),
                smape: smape(&p, &y),
            }
        })
        .collect();
    Ok(MetricsReport {
        mse: mse(&pred, &target),
        mae: mae(&pred, &target),
        smape: smape(&pred, &target),
        mase: mase_v,
        owa,
        per_horizon,
        windows,
        wall_clock_secs: 0.0,
    })
}
