use std::path::Path;

use rand::Rng;

use super::checkpoint::Checkpoint;
use super::metrics::forecast_windows;
use super::network::ForecastResult;
use crate::dataio::{forecast_input, standardize, window_at, ForecastMode, SeriesFrame, StandardizeStats, WindowSample};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Forecast of one window, with the realized target when the frame covers it.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedWindow {
    pub start: usize,
    pub result: ForecastResult,
    /// Standardized target `[L_y, d_t]`.
    pub target: Option<Tensor>,
}

/// Frame columns forming the forecast target.
pub fn target_columns(mode: ForecastMode, num_vars: usize, target_index: usize) -> Vec<usize> {
    match mode {
        ForecastMode::Multivariate => (0..num_vars).collect(),
        ForecastMode::Univariate => vec![target_index],
    }
}

/// Forecasts from a raw (unstandardized) frame.
///
/// Without a stride only the window ending at the last row is forecast;
/// with one, every stride-th input window of the frame is.
pub fn predict<R: Rng + ?Sized>(
    ckpt: &Checkpoint,
    raw: &SeriesFrame,
    n_samples: usize,
    stride: Option<usize>,
    rng: &mut R,
) -> Result<Vec<PredictedWindow>> {
    let model = &ckpt.model;
    let cfg = model.config();
    let spec = cfg.window_spec()?;
    if raw.num_vars() != model.dims().num_vars {
        return Err(Error::Data(format!(
            "frame has {} variables, checkpoint expects {}",
            raw.num_vars(),
            model.dims().num_vars
        )));
    }
    if raw.len() < spec.input_len {
        return Err(Error::Data(format!(
            "series too short: frame of {} rows is shorter than the input length {}",
            raw.len(),
            spec.input_len
        )));
    }
    let frame = standardize(raw, &ckpt.stats)?;
    let last = frame.len() - spec.input_len;
    let starts: Vec<usize> = match stride {
        None => vec![last],
        Some(0) => return Err(Error::InvalidArgument("stride must be positive".into())),
        Some(s) => (0..=last).step_by(s).collect(),
    };
    let mut samples = Vec::with_capacity(starts.len());
    let mut known = Vec::with_capacity(starts.len());
    for &s in &starts {
        let full = s + spec.total_len() <= frame.len();
        let w: WindowSample = if full {
            window_at(&frame, s, spec, cfg.mode)?
        } else {
            forecast_input(&frame, s, spec, cfg.mode)?
        };
        samples.push(w);
        known.push(full);
    }
    let results = forecast_windows(model, &samples, n_samples, rng)?;
    Ok(samples
        .into_iter()
        .zip(results)
        .zip(known)
        .map(|((w, result), full)| PredictedWindow {
            start: w.start,
            result,
            target: full.then_some(w.target),
        })
        .collect())
}

/// Writes one row per (window, horizon step, variable).
///
/// Columns: `window_start, horizon_step, variable, y_dec, z_out, fused,
/// variance` and, with `with_target`, `target`. With `destandardize` the point
/// forecasts and target are mapped back to data units; the variance is always
/// in standardized units. `horizon_step` counts from 1.
pub fn write_forecast_csv(
    path: impl AsRef<Path>,
    windows: &[PredictedWindow],
    names: &[String],
    columns: &[usize],
    destandardize: Option<&StandardizeStats>,
    with_target: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["window_start", "horizon_step", "variable", "y_dec", "z_out", "fused", "variance"];
    if with_target {
        header.push("target");
    }
    w.write_record(&header)?;
    let fmt = |v: f64| format!("{v:?}");
    for pw in windows {
        let r = &pw.result;
        let [len, dt] = r.y_dec.shape()[..] else {
            return Err(Error::shape("write_forecast_csv", format!("forecast {:?}", r.y_dec.shape())));
        };
        if dt != columns.len() {
            return Err(Error::shape("write_forecast_csv", format!("{dt} outputs for {} columns", columns.len())));
        }
        for h in 0..len {
            for (j, &col) in columns.iter().enumerate() {
                let i = h * dt + j;
                let unit = |v: f64| destandardize.map_or(v, |s| s.destandardize_value(col, v));
                let mut rec = vec![
                    pw.start.to_string(),
                    (h + 1).to_string(),
                    names[col].clone(),
                    fmt(unit(r.y_dec.data()[i])),
                    fmt(unit(r.z_out.data()[i])),
                    fmt(unit(r.fused.data()[i])),
                    fmt(r.variance.data()[i]),
                ];
                if with_target {
                    rec.push(pw.target.as_ref().map_or(String::new(), |t| fmt(unit(t.data()[i]))));
                }
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
