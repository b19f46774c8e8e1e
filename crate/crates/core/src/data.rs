//! Series ingestion, synthetic generation, z-scoring and supervised windows.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::DataError;
use crate::tensor::Tensor;

/// A `T×P` table of observations. Timestamps are carried through untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    pub timestamps: Vec<String>,
    /// `T×P`, row-major.
    pub values: Tensor,
    pub variate_names: Vec<String>,
}

impl SeriesTable {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn variates(&self) -> usize {
        self.variate_names.len()
    }

    pub fn column(&self, p: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.values.get(t, p)).collect()
    }

    /// Rows `[start, end)` as a new table.
    pub fn rows(&self, start: usize, end: usize) -> SeriesTable {
        SeriesTable {
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values.slice_rows(start, end - start),
            variate_names: self.variate_names.clone(),
        }
    }
}

/// Parses comma-separated text with one header row; the first column is an
/// opaque timestamp and every other column must hold finite decimals.
pub fn parse_csv(text: &str) -> Result<SeriesTable, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| DataError::Parse {
            line: 1,
            detail: e.to_string(),
        })?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(DataError::Parse {
            line: 1,
            detail: "empty file".into(),
        });
    }
    if header.len() < 2 {
        return Err(DataError::Parse {
            line: 1,
            detail: "need a timestamp column and at least one variate".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let width = names.len();

    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width + 1 {
            return Err(DataError::Parse {
                line,
                detail: format!("expected {} fields, found {}", width + 1, rec.len()),
            });
        }
        timestamps.push(rec[0].to_string());
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                line,
                detail: format!("column '{}': cannot parse '{}' as a number", names[j], cell),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line,
                    detail: format!("column '{}': non-finite value", names[j]),
                });
            }
            data.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(DataError::NoRows);
    }
    Ok(SeriesTable {
        values: Tensor::matrix(timestamps.len(), width, data),
        timestamps,
        variate_names: names,
    })
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesTable, DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

/// Writes the table in the same layout [`parse_csv`] reads. Values use the
/// shortest round-trip representation, so reloading is bitwise exact.
pub fn write_csv<W: Write>(table: &SeriesTable, w: W) -> Result<(), DataError> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| DataError::Io(std::io::Error::other(e));
    let mut header = vec!["timestamp".to_string()];
    header.extend(table.variate_names.iter().cloned());
    out.write_record(&header).map_err(io)?;
    for (t, ts) in table.timestamps.iter().enumerate() {
        let mut rec = vec![ts.clone()];
        rec.extend(table.values.row(t).iter().map(f64::to_string));
        out.write_record(&rec).map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Phases {
    /// Uniform in `[0, 2π)` per (component, variate), drawn from the seed.
    Random,
    /// One phase per component, shared by every variate.
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub periods: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub trend: f64,
    pub noise_std: f64,
    /// Constant offset added to every value.
    pub level: f64,
    pub phases: Phases,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            periods: vec![24.0, 12.0],
            amplitudes: vec![1.0, 0.5],
            trend: 0.0,
            noise_std: 0.1,
            level: 0.0,
            phases: Phases::Random,
        }
    }
}

/// `value(t, p) = level + Σ_k amp_k·sin(2πt/period_k + phase_{k,p}) + trend·t + noise`.
pub fn synth_generate(
    seed: u64,
    len: usize,
    variates: usize,
    spec: &SynthSpec,
) -> Result<SeriesTable, DataError> {
    if len == 0 || variates == 0 {
        return Err(DataError::Config("synthetic length and variates must be >= 1".into()));
    }
    if spec.periods.len() != spec.amplitudes.len() {
        return Err(DataError::Config("periods and amplitudes differ in length".into()));
    }
    if let Some(p) = spec.periods.iter().find(|p| !(**p > 0.0)) {
        return Err(DataError::Config(format!("non-positive period {p}")));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(DataError::Config("noise_std must be >= 0".into()));
    }
    let k = spec.periods.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<f64> = match &spec.phases {
        Phases::Random => (0..k * variates).map(|_| rng.random::<f64>() * 2.0 * PI).collect(),
        Phases::Fixed(ph) => {
            if ph.len() != k {
                return Err(DataError::Config("one fixed phase per component required".into()));
            }
            (0..k).flat_map(|c| std::iter::repeat_n(ph[c], variates)).collect()
        }
    };
    let noise = Normal::new(0.0, spec.noise_std.max(0.0))
        .map_err(|e| DataError::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(len * variates);
    for t in 0..len {
        for p in 0..variates {
            let mut v = spec.level + spec.trend * t as f64;
            for c in 0..k {
                v += spec.amplitudes[c]
                    * (2.0 * PI * t as f64 / spec.periods[c] + phases[c * variates + p]).sin();
            }
            if spec.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            data.push(v);
        }
    }
    Ok(SeriesTable {
        timestamps: (0..len).map(|t| t.to_string()).collect(),
        values: Tensor::matrix(len, variates, data),
        variate_names: (0..variates).map(|p| format!("v{p}")).collect(),
    })
}

/// Per-variate z-score statistics (population standard deviation).
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(table: &SeriesTable) -> Result<Self, DataError> {
        let n = table.len() as f64;
        let mut mean = Vec::with_capacity(table.variates());
        let mut std = Vec::with_capacity(table.variates());
        for p in 0..table.variates() {
            let col = table.column(p);
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            if !(var > 0.0) {
                return Err(DataError::ConstantVariate(table.variate_names[p].clone()));
            }
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(Self { mean, std })
    }

    /// Stats that leave data unchanged.
    pub fn identity(variates: usize) -> Self {
        Self {
            mean: vec![0.0; variates],
            std: vec![1.0; variates],
        }
    }

    pub fn variates(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, table: &SeriesTable) -> Result<SeriesTable, DataError> {
        self.check(table.variates())?;
        let mut out = table.clone();
        let p = self.variates();
        for (i, v) in out.values.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % p]) / self.std[i % p];
        }
        Ok(out)
    }

    pub fn invert(&self, table: &SeriesTable) -> Result<SeriesTable, DataError> {
        self.check(table.variates())?;
        let mut out = table.clone();
        self.invert_in_place(out.values.data_mut());
        Ok(out)
    }

    /// De-normalizes a flat buffer whose innermost axis is the variate.
    pub fn invert_in_place(&self, data: &mut [f64]) {
        let p = self.variates();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v * self.std[i % p] + self.mean[i % p];
        }
    }

    fn check(&self, variates: usize) -> Result<(), DataError> {
        if variates != self.variates() {
            return Err(DataError::Dimension(format!(
                "stats cover {} variates, table has {variates}",
                self.variates()
            )));
        }
        Ok(())
    }
}

/// Z-scores `table`, fitting stats when none are supplied.
pub fn normalize(
    table: &SeriesTable,
    stats: Option<&NormStats>,
) -> Result<(SeriesTable, NormStats), DataError> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(table)?,
    };
    Ok((stats.apply(table)?, stats))
}

/// Supervised `(lookback, horizon)` windows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    /// `[N, L, P]`
    pub inputs: Tensor,
    /// `[N, H, P]`
    pub targets: Tensor,
    pub origins: Vec<usize>,
    pub lookback: usize,
    pub horizon: usize,
    pub variates: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let n = self.lookback * self.variates;
        &self.inputs.data()[i * n..(i + 1) * n]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        let n = self.horizon * self.variates;
        &self.targets.data()[i * n..(i + 1) * n]
    }

    /// Gathers the given windows into a batch, preserving order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.lookback * self.variates);
        let mut targets = Vec::with_capacity(indices.len() * self.horizon * self.variates);
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            targets.extend_from_slice(self.target(i));
        }
        Batch {
            size: indices.len(),
            lookback: self.lookback,
            horizon: self.horizon,
            variates: self.variates,
            inputs,
            targets,
        }
    }
}

/// A batch of windows, flat `[B, L, P]` inputs and `[B, H, P]` targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub variates: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Slides a window of `lookback + horizon` rows with the given stride.
pub fn window_split(
    table: &SeriesTable,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowSet, DataError> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(DataError::Config("lookback, horizon and stride must be >= 1".into()));
    }
    let t = table.len();
    if t < lookback + horizon {
        return Err(DataError::TooShort {
            len: t,
            need: lookback + horizon,
        });
    }
    let p = table.variates();
    let n = (t - lookback - horizon) / stride + 1;
    let mut inputs = Vec::with_capacity(n * lookback * p);
    let mut targets = Vec::with_capacity(n * horizon * p);
    let mut origins = Vec::with_capacity(n);
    let vals = table.values.data();
    for i in 0..n {
        let s = i * stride;
        inputs.extend_from_slice(&vals[s * p..(s + lookback) * p]);
        targets.extend_from_slice(&vals[(s + lookback) * p..(s + lookback + horizon) * p]);
        origins.push(s);
    }
    Ok(WindowSet {
        inputs: Tensor::new(vec![n, lookback, p], inputs).expect("window input shape"),
        targets: Tensor::new(vec![n, horizon, p], targets).expect("window target shape"),
        origins,
        lookback,
        horizon,
        variates: p,
    })
}

/// Chronological train/val/test split. Val and test segments are extended
/// backwards by `lookback` rows so their first window has full context.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SeriesTable,
    pub val: SeriesTable,
    pub test: SeriesTable,
}

pub fn split_chronological(
    table: &SeriesTable,
    train_ratio: f64,
    val_ratio: f64,
    lookback: usize,
) -> Result<Splits, DataError> {
    if !(train_ratio > 0.0 && val_ratio >= 0.0 && train_ratio + val_ratio < 1.0) {
        return Err(DataError::Config(format!(
            "invalid split ratios {train_ratio}/{val_ratio}"
        )));
    }
    let t = table.len();
    let n_train = (t as f64 * train_ratio).floor() as usize;
    let n_val = (t as f64 * val_ratio).floor() as usize;
    if n_train < lookback {
        return Err(DataError::TooShort {
            len: n_train,
            need: lookback,
        });
    }
    let val_start = n_train - lookback;
    let test_start = n_train + n_val - lookback;
    Ok(Splits {
        train: table.rows(0, n_train),
        val: table.rows(val_start, n_train + n_val),
        test: table.rows(test_start, t),
    })
}
