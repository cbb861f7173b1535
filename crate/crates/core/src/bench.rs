//! Quality metrics and the evaluation harness.
//!
//! Metrics are per-pixel means over mattes in [0,1]; accumulation is f64
//! regardless of model precision so reports compare across precisions.
//! Evaluation may fan out across samples (capped by `MATTEFORGE_THREADS`),
//! but timing always runs serial, after warm-ups, to keep contention out
//! of the numbers.

use std::io::{BufRead, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::mattemath::{
    transition_mask, Matte, MatteMathError, TransitionMask, DEFAULT_TRANSITION_ITERS,
    DEFAULT_TRANSITION_KERNEL,
};
use crate::net::{Model, NetError};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("no samples to evaluate")]
    EmptyDataset,

    #[error("matte dims differ: {a:?} vs {b:?}")]
    DimsMismatch { a: Shape, b: Shape },

    #[error("config: {field}: {msg}")]
    Config { field: &'static str, msg: String },

    #[error("id {0:?} cannot be stored in csv (contains a comma or newline)")]
    CsvUnsafeId(String),

    #[error("csv line {line}: {msg}")]
    CsvFormat { line: usize, msg: String },

    #[error("report aggregate does not equal the mean of its rows")]
    InconsistentAggregate,

    #[error(transparent)]
    Net(#[from] NetError),

    #[error(transparent)]
    MatteMath(#[from] MatteMathError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Mean squared error between two mattes, over every pixel.
pub fn mse<T: Scalar>(pred: &Matte<T>, gt: &Matte<T>) -> Result<f64, BenchError> {
    reduce(pred, gt, None, |d| d * d)
}

/// Mean absolute difference between two mattes, over every pixel.
pub fn mad<T: Scalar>(pred: &Matte<T>, gt: &Matte<T>) -> Result<f64, BenchError> {
    reduce(pred, gt, None, f64::abs)
}

/// MSE restricted to the pixels of `mask`. An empty mask yields 0.
pub fn mse_masked<T: Scalar>(
    pred: &Matte<T>,
    gt: &Matte<T>,
    mask: &TransitionMask<T>,
) -> Result<f64, BenchError> {
    reduce(pred, gt, Some(mask), |d| d * d)
}

/// MAD restricted to the pixels of `mask`. An empty mask yields 0.
pub fn mad_masked<T: Scalar>(
    pred: &Matte<T>,
    gt: &Matte<T>,
    mask: &TransitionMask<T>,
) -> Result<f64, BenchError> {
    reduce(pred, gt, Some(mask), f64::abs)
}

fn reduce<T: Scalar>(
    pred: &Matte<T>,
    gt: &Matte<T>,
    mask: Option<&TransitionMask<T>>,
    f: impl Fn(f64) -> f64,
) -> Result<f64, BenchError> {
    let (p, g) = (pred.tensor(), gt.tensor());
    if p.shape() != g.shape() {
        return Err(BenchError::DimsMismatch { a: p.shape(), b: g.shape() });
    }
    if let Some(m) = mask {
        if m.shape() != p.shape() {
            return Err(BenchError::DimsMismatch { a: m.shape(), b: p.shape() });
        }
        if m.count() == 0 {
            return Ok(0.0);
        }
        let mut sum = 0.0f64;
        for ((&pv, &gv), &mv) in p.data().iter().zip(g.data()).zip(m.tensor().data()) {
            if mv == T::one() {
                sum += f(pv.into_f64() - gv.into_f64());
            }
        }
        Ok(sum / m.count() as f64)
    } else {
        let mut sum = 0.0f64;
        for (&pv, &gv) in p.data().iter().zip(g.data()) {
            sum += f(pv.into_f64() - gv.into_f64());
        }
        Ok(sum / p.shape().len() as f64)
    }
}

/// A ground-truthed image the harness can score.
#[derive(Debug, Clone)]
pub struct EvalSample<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub alpha_g: Matte<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Score only the transition band of the ground truth instead of the
    /// whole image. Diagnostic mode; whole-image is the reported number.
    pub transition_only: bool,
    pub transition_kernel: usize,
    pub transition_iters: usize,
    /// Untimed forward passes run before the clock starts.
    pub warmups: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            transition_only: false,
            transition_kernel: DEFAULT_TRANSITION_KERNEL,
            transition_iters: DEFAULT_TRANSITION_ITERS,
            warmups: 3,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.transition_kernel < 3 || self.transition_kernel % 2 == 0 {
            return Err(BenchError::Config {
                field: "transition_kernel",
                msg: format!("must be odd and at least 3, got {}", self.transition_kernel),
            });
        }
        if self.transition_iters == 0 {
            return Err(BenchError::Config {
                field: "transition_iters",
                msg: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub mse: f64,
    pub mad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub per_sample: Vec<SampleMetrics>,
    pub mean_mse: f64,
    pub mean_mad: f64,
    pub params: usize,
    pub mean_inference_ms: f64,
    pub config_hash: String,
}

impl BenchReport {
    /// Builds a report from rows; the aggregate is always recomputed here
    /// so it cannot drift from the rows.
    pub fn from_rows(
        per_sample: Vec<SampleMetrics>,
        params: usize,
        mean_inference_ms: f64,
        config_hash: String,
    ) -> Result<Self, BenchError> {
        if per_sample.is_empty() {
            return Err(BenchError::EmptyDataset);
        }
        let n = per_sample.len() as f64;
        let mean_mse = per_sample.iter().map(|r| r.mse).sum::<f64>() / n;
        let mean_mad = per_sample.iter().map(|r| r.mad).sum::<f64>() / n;
        Ok(BenchReport { per_sample, mean_mse, mean_mad, params, mean_inference_ms, config_hash })
    }

    fn validate(&self) -> Result<(), BenchError> {
        let check = Self::from_rows(
            self.per_sample.clone(),
            self.params,
            self.mean_inference_ms,
            self.config_hash.clone(),
        )?;
        if check.mean_mse != self.mean_mse || check.mean_mad != self.mean_mad {
            return Err(BenchError::InconsistentAggregate);
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), BenchError> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read_json<R: BufRead>(r: R) -> Result<Self, BenchError> {
        let report: BenchReport = serde_json::from_reader(r)?;
        report.validate()?;
        Ok(report)
    }

    /// One `sample` row per entry plus a trailing `aggregate` row. Floats
    /// print in shortest round-trip form, so reading back is lossless.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), BenchError> {
        writeln!(w, "kind,id,mse,mad,params,mean_inference_ms,config_hash")?;
        for row in &self.per_sample {
            if row.id.contains(',') || row.id.contains('\n') {
                return Err(BenchError::CsvUnsafeId(row.id.clone()));
            }
            writeln!(w, "sample,{},{},{},,,", row.id, row.mse, row.mad)?;
        }
        writeln!(
            w,
            "aggregate,,{},{},{},{},{}",
            self.mean_mse, self.mean_mad, self.params, self.mean_inference_ms, self.config_hash
        )?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, BenchError> {
        let bad = |line, msg: &str| BenchError::CsvFormat { line, msg: msg.into() };
        let mut lines = r.lines().enumerate();
        match lines.next() {
            Some((_, Ok(h))) if h == "kind,id,mse,mad,params,mean_inference_ms,config_hash" => {}
            Some((_, Ok(_))) => return Err(bad(1, "unrecognized header")),
            Some((_, Err(e))) => return Err(e.into()),
            None => return Err(bad(1, "empty file")),
        }
        let mut per_sample = Vec::new();
        let mut aggregate = None;
        for (idx, line) in lines {
            let line = line?;
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(bad(lineno, "expected 7 fields"));
            }
            let num = |s: &str, what: &str| {
                s.parse::<f64>().map_err(|_| bad(lineno, &format!("bad {what} value")))
            };
            match fields[0] {
                "sample" => {
                    if aggregate.is_some() {
                        return Err(bad(lineno, "sample row after aggregate"));
                    }
                    per_sample.push(SampleMetrics {
                        id: fields[1].to_string(),
                        mse: num(fields[2], "mse")?,
                        mad: num(fields[3], "mad")?,
                    });
                }
                "aggregate" => {
                    if aggregate.is_some() {
                        return Err(bad(lineno, "duplicate aggregate row"));
                    }
                    let params = fields[4]
                        .parse::<usize>()
                        .map_err(|_| bad(lineno, "bad params value"))?;
                    aggregate = Some((
                        num(fields[2], "mse")?,
                        num(fields[3], "mad")?,
                        params,
                        num(fields[5], "mean_inference_ms")?,
                        fields[6].to_string(),
                    ));
                }
                other => return Err(bad(lineno, &format!("unknown row kind {other:?}"))),
            }
        }
        let (mean_mse, mean_mad, params, ms, hash) =
            aggregate.ok_or_else(|| bad(0, "missing aggregate row"))?;
        let report = BenchReport::from_rows(per_sample, params, ms, hash)?;
        if report.mean_mse != mean_mse || report.mean_mad != mean_mad {
            return Err(BenchError::InconsistentAggregate);
        }
        Ok(report)
    }
}

/// Hex SHA-256 of a value's JSON form. Field order is declaration order,
/// so equal configs hash equal.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String, BenchError> {
    let json = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Worker cap for sample-parallel evaluation: `MATTEFORGE_THREADS` when
/// set to a positive integer, otherwise the machine's parallelism.
pub fn worker_threads() -> usize {
    if let Ok(raw) = std::env::var("MATTEFORGE_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Scores `model` on `samples` and times its forward pass.
///
/// Metrics are bit-deterministic: samples are scored independently and
/// merged in input order, whatever the worker count. Timing is the mean
/// of one serial pass per sample, taken after the warm-ups.
pub fn run_benchmark<T: Scalar>(
    model: &Model<T>,
    samples: &[EvalSample<T>],
    config: &BenchConfig,
) -> Result<BenchReport, BenchError> {
    run_benchmark_with_threads(model, samples, config, worker_threads())
}

pub fn run_benchmark_with_threads<T: Scalar>(
    model: &Model<T>,
    samples: &[EvalSample<T>],
    config: &BenchConfig,
    threads: usize,
) -> Result<BenchReport, BenchError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(BenchError::EmptyDataset);
    }
    let threads = threads.clamp(1, samples.len());

    let score = |s: &EvalSample<T>| -> Result<SampleMetrics, BenchError> {
        let pred = model.forward(&s.image)?.alpha_matte();
        let (m, a) = if config.transition_only {
            let mask =
                transition_mask(&s.alpha_g, config.transition_kernel, config.transition_iters)?;
            (mse_masked(&pred, &s.alpha_g, &mask)?, mad_masked(&pred, &s.alpha_g, &mask)?)
        } else {
            (mse(&pred, &s.alpha_g)?, mad(&pred, &s.alpha_g)?)
        };
        Ok(SampleMetrics { id: s.id.clone(), mse: m, mad: a })
    };

    let per_sample = if threads == 1 {
        samples.iter().map(score).collect::<Result<Vec<_>, _>>()?
    } else {
        let chunk = samples.len().div_ceil(threads);
        let score = &score;
        let mut results: Vec<Result<Vec<SampleMetrics>, BenchError>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(score).collect()))
                .collect();
            results.extend(handles.into_iter().map(|h| h.join().expect("worker panicked")));
        });
        let mut merged = Vec::with_capacity(samples.len());
        for part in results {
            merged.extend(part?);
        }
        merged
    };

    for _ in 0..config.warmups {
        model.forward(&samples[0].image)?;
    }
    let mut elapsed = 0.0f64;
    for s in samples {
        let start = Instant::now();
        model.forward(&s.image)?;
        elapsed += start.elapsed().as_secs_f64();
    }
    let mean_inference_ms = elapsed * 1e3 / samples.len() as f64;

    let hash = config_hash(&(model.config(), config))?;
    BenchReport::from_rows(per_sample, model.param_count(), mean_inference_ms, hash)
}
