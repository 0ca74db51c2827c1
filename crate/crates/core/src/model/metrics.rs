use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{Batch, Conformer, ForecastResult};
use crate::dataio::WindowSample;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mse: f64,
    pub mae: f64,
}

/// Accumulates squared and absolute errors over many coordinates.
#[derive(Clone, Copy, Debug, Default)]
pub struct ErrorAccumulator {
    sq: f64,
    abs: f64,
    count: usize,
}

impl ErrorAccumulator {
    pub fn push(&mut self, prediction: &Tensor, target: &Tensor) -> Result<()> {
        if prediction.shape() != target.shape() {
            return Err(Error::shape(
                "metrics",
                format!("prediction {:?} vs target {:?}", prediction.shape(), target.shape()),
            ));
        }
        for (p, t) in prediction.data().iter().zip(target.data()) {
            let e = p - t;
            self.sq += e * e;
            self.abs += e.abs();
        }
        self.count += target.numel();
        Ok(())
    }

    pub fn finish(&self) -> ErrorMetrics {
        if self.count == 0 {
            return ErrorMetrics::default();
        }
        ErrorMetrics {
            mse: self.sq / self.count as f64,
            mae: self.abs / self.count as f64,
        }
    }
}

/// MSE and MAE of each forecast head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub decoder: ErrorMetrics,
    pub flow: ErrorMetrics,
    pub fused: ErrorMetrics,
}

impl Metrics {
    pub fn from_results(results: &[ForecastResult], targets: &[&Tensor]) -> Result<Metrics> {
        if results.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} forecasts for {} targets",
                results.len(),
                targets.len()
            )));
        }
        let mut acc = [ErrorAccumulator::default(); 3];
        for (r, t) in results.iter().zip(targets) {
            acc[0].push(&r.y_dec, t)?;
            acc[1].push(&r.z_out, t)?;
            acc[2].push(&r.fused, t)?;
        }
        Ok(Metrics {
            decoder: acc[0].finish(),
            flow: acc[1].finish(),
            fused: acc[2].finish(),
        })
    }
}

/// Forecasts every window in batches of `config.batch_size`.
pub fn forecast_windows<R: Rng + ?Sized>(
    model: &Conformer,
    windows: &[WindowSample],
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<ForecastResult>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(model.config().batch_size) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        out.extend(model.forecast(&Batch::new(&refs)?, n_samples, rng)?);
    }
    Ok(out)
}

/// Metrics over all windows and target coordinates, plus the forecasts behind them.
pub fn evaluate<R: Rng + ?Sized>(
    model: &Conformer,
    windows: &[WindowSample],
    n_samples: usize,
    rng: &mut R,
) -> Result<(Metrics, Vec<ForecastResult>)> {
    if windows.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let results = forecast_windows(model, windows, n_samples, rng)?;
    let targets: Vec<&Tensor> = windows.iter().map(|w| &w.target).collect();
    Ok((Metrics::from_results(&results, &targets)?, results))
}

/// Repeats the last observed value of each target column across the horizon.
pub fn persistence_metrics(windows: &[WindowSample], target_columns: &[usize]) -> Result<ErrorMetrics> {
    let mut acc = ErrorAccumulator::default();
    for w in windows {
        let last = w.enc_x.select(0, w.enc_x.shape()[0] - 1);
        let horizon = w.target.shape()[0];
        let row: Vec<f64> = target_columns.iter().map(|&c| last.data()[c]).collect();
        let pred = Tensor::from_fn([horizon, row.len()], |i| row[i % row.len()]);
        acc.push(&pred, &w.target)?;
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_offset_predictors() {
        let t = Tensor::from_fn([4, 3], |i| i as f64 * 0.7 - 2.0);
        let mut a = ErrorAccumulator::default();
        a.push(&t, &t).unwrap();
        assert_eq!(a.finish(), ErrorMetrics { mse: 0.0, mae: 0.0 });
        let mut b = ErrorAccumulator::default();
        b.push(&t.map(|x| x + 1.0), &t).unwrap();
        let m = b.finish();
        assert!((m.mse - 1.0).abs() < 1e-15 && (m.mae - 1.0).abs() < 1e-15);
    }
}
