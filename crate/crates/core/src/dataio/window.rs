use std::ops::Range;

use chrono::{DateTime, Datelike};
use serde::{Deserialize, Serialize};

use super::calendar::{calendar_features, CalendarFeature};
use super::frame::SeriesFrame;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Which variables form the prediction target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    /// Predict every variable.
    #[default]
    Multivariate,
    /// Predict only the target variable (all variables still feed the input).
    Univariate,
}

impl ForecastMode {
    pub fn target_width(self, num_vars: usize) -> usize {
        match self {
            ForecastMode::Multivariate => num_vars,
            ForecastMode::Univariate => 1,
        }
    }
}

/// Input / start-token / horizon lengths of a rolling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub input_len: usize,
    pub token_len: usize,
    pub pred_len: usize,
}

impl WindowSpec {
    pub fn new(input_len: usize, token_len: usize, pred_len: usize) -> Result<Self> {
        if input_len == 0 || pred_len == 0 {
            return Err(Error::InvalidArgument(
                "input and prediction lengths must be positive".into(),
            ));
        }
        if token_len > input_len {
            return Err(Error::InvalidArgument(format!(
                "start token length {token_len} exceeds input length {input_len}"
            )));
        }
        Ok(WindowSpec {
            input_len,
            token_len,
            pred_len,
        })
    }

    pub fn decoder_len(&self) -> usize {
        self.token_len + self.pred_len
    }

    pub fn total_len(&self) -> usize {
        self.input_len + self.pred_len
    }
}

/// One training example cut from a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// Row of the frame where the encoder input starts.
    pub start: usize,
    pub enc_x: Tensor,
    pub enc_marks: Vec<CalendarFeature>,
    /// Start token followed by `pred_len` zero rows.
    pub dec_x: Tensor,
    pub dec_marks: Vec<CalendarFeature>,
    /// `[pred_len, d_t]`; zeros when the future is unknown (see [`forecast_input`]).
    pub target: Tensor,
}

fn build_sample(
    frame: &SeriesFrame,
    start: usize,
    spec: WindowSpec,
    mode: ForecastMode,
    future_marks: Vec<CalendarFeature>,
    target: Option<Tensor>,
) -> Result<WindowSample> {
    let dx = frame.num_vars();
    let enc_x = frame.values().narrow(0, start, spec.input_len)?;
    let enc_ts = &frame.timestamps()[start..start + spec.input_len];
    let enc_marks = calendar_features(enc_ts);

    let mut dec = vec![0.0; spec.decoder_len() * dx];
    let tok_start = spec.input_len - spec.token_len;
    dec[..spec.token_len * dx].copy_from_slice(&enc_x.data()[tok_start * dx..]);
    let dec_x = Tensor::new([spec.decoder_len(), dx], dec)?;
    let mut dec_marks = enc_marks[tok_start..].to_vec();
    dec_marks.extend(future_marks);

    let dt = mode.target_width(dx);
    let target = target.unwrap_or_else(|| Tensor::zeros([spec.pred_len, dt]));
    Ok(WindowSample {
        start,
        enc_x,
        enc_marks,
        dec_x,
        dec_marks,
        target,
    })
}

/// The fully observed window whose encoder input begins at row `start`.
pub fn window_at(
    frame: &SeriesFrame,
    start: usize,
    spec: WindowSpec,
    mode: ForecastMode,
) -> Result<WindowSample> {
    if start + spec.total_len() > frame.len() {
        return Err(Error::Data(format!(
            "window at {start} needs {} rows, frame has {}",
            spec.total_len(),
            frame.len()
        )));
    }
    let t0 = start + spec.input_len;
    let future = calendar_features(&frame.timestamps()[t0..t0 + spec.pred_len]);
    let dx = frame.num_vars();
    let target = match mode {
        ForecastMode::Multivariate => frame.values().narrow(0, t0, spec.pred_len)?,
        ForecastMode::Univariate => {
            let ti = frame.target_index();
            let col = (t0..t0 + spec.pred_len)
                .map(|r| frame.values().data()[r * dx + ti])
                .collect();
            Tensor::new([spec.pred_len, 1], col)?
        }
    };
    build_sample(frame, start, spec, mode, future, Some(target))
}

/// Window for forecasting past the end of the data: future timestamps are
/// extrapolated at the frame interval and the target is left as zeros.
pub fn forecast_input(
    frame: &SeriesFrame,
    start: usize,
    spec: WindowSpec,
    mode: ForecastMode,
) -> Result<WindowSample> {
    if start + spec.input_len > frame.len() {
        return Err(Error::Data(format!(
            "frame of length {} shorter than input length {} at row {start}",
            frame.len(),
            spec.input_len
        )));
    }
    let interval = frame.interval_seconds();
    if interval <= 0 {
        return Err(Error::Data(
            "forecasting needs a regular sampling interval".into(),
        ));
    }
    let last = start + spec.input_len - 1;
    let last_ts = frame.timestamps()[last];
    let future_ts: Vec<i64> = (1..=spec.pred_len as i64)
        .map(|h| {
            let r = last + h as usize;
            frame
                .timestamps()
                .get(r)
                .copied()
                .unwrap_or(last_ts + h * interval)
        })
        .collect();
    build_sample(frame, start, spec, mode, calendar_features(&future_ts), None)
}

/// All windows of the frame at the given stride.
pub fn rolling_windows(
    frame: &SeriesFrame,
    spec: WindowSpec,
    stride: usize,
    mode: ForecastMode,
) -> Result<Vec<WindowSample>> {
    windows_in_range(frame, spec, 0..frame.len(), stride, mode)
}

/// Windows whose whole target lies inside `range`; the encoder input may
/// reach back before `range.start`.
pub fn windows_in_range(
    frame: &SeriesFrame,
    spec: WindowSpec,
    range: Range<usize>,
    stride: usize,
    mode: ForecastMode,
) -> Result<Vec<WindowSample>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if frame.len() < spec.total_len() {
        return Err(Error::Data(format!(
            "series too short: {} rows, need at least {}",
            frame.len(),
            spec.total_len()
        )));
    }
    let first = range.start.saturating_sub(spec.input_len);
    let last = range.end.min(frame.len());
    if last < spec.total_len() {
        return Ok(Vec::new());
    }
    let last_start = last - spec.total_len();
    if first > last_start {
        return Ok(Vec::new());
    }
    (first..=last_start)
        .step_by(stride)
        .map(|s| window_at(frame, s, spec, mode))
        .collect()
}

/// How a frame is divided chronologically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Train/validation/test fractions summing to at most 1.
    Fractions([f64; 3]),
    /// Calendar months per split, counted from the first timestamp's month.
    Months([u32; 3]),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions([0.7, 0.1, 0.2])
    }
}

/// Contiguous, ordered, non-overlapping row ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

fn month_index(epoch: i64, origin: (i32, u32)) -> i64 {
    let dt = DateTime::from_timestamp(epoch, 0).expect("timestamp within chrono range");
    (dt.year() - origin.0) as i64 * 12 + dt.month() as i64 - origin.1 as i64
}

pub fn split(frame: &SeriesFrame, spec: &SplitSpec) -> Result<SplitRanges> {
    let n = frame.len();
    let ranges = match spec {
        SplitSpec::Fractions(f) => {
            if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || f.iter().sum::<f64>() > 1.0 + 1e-9 {
                return Err(Error::InvalidArgument(format!("invalid split fractions {f:?}")));
            }
            let count = |x: f64| ((n as f64) * x + 1e-9).floor() as usize;
            let train = count(f[0]);
            let test = count(f[2]);
            let val = n - train - test;
            let val = if f[0] + f[1] + f[2] < 1.0 - 1e-9 { val.min(count(f[1])) } else { val };
            SplitRanges {
                train: 0..train,
                val: train..train + val,
                test: n - test..n,
            }
        }
        SplitSpec::Months(m) => {
            let first = DateTime::from_timestamp(frame.timestamps()[0], 0)
                .ok_or_else(|| Error::Data("timestamp out of range".into()))?;
            let origin = (first.year(), first.month());
            let months: Vec<i64> = frame
                .timestamps()
                .iter()
                .map(|&t| month_index(t, origin))
                .collect();
            let boundary = |k: i64| months.partition_point(|&mi| mi < k);
            let b1 = boundary(m[0] as i64);
            let b2 = boundary((m[0] + m[1]) as i64);
            let b3 = boundary((m[0] + m[1] + m[2]) as i64);
            SplitRanges {
                train: 0..b1,
                val: b1..b2,
                test: b2..b3,
            }
        }
    };
    for (name, r) in [("train", &ranges.train), ("validation", &ranges.val), ("test", &ranges.test)] {
        if r.is_empty() {
            return Err(Error::Data(format!("empty {name} split")));
        }
    }
    Ok(ranges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(len: usize, dx: usize) -> SeriesFrame {
        SeriesFrame::new(
            (0..len as i64).map(|t| t * 3600).collect(),
            Tensor::from_fn([len, dx], |i| i as f64),
            (0..dx).map(|j| format!("v{j}")).collect(),
            dx - 1,
            3600,
        )
        .unwrap()
    }

    #[test]
    fn window_count_and_alignment() {
        let f = frame(10, 2);
        let spec = WindowSpec::new(4, 2, 2).unwrap();
        let w = rolling_windows(&f, spec, 1, ForecastMode::Multivariate).unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(w[0].target, f.values().narrow(0, 4, 2).unwrap());
        let f6 = frame(6, 2);
        assert_eq!(rolling_windows(&f6, spec, 1, ForecastMode::Multivariate).unwrap().len(), 1);
        assert!(rolling_windows(&frame(5, 2), spec, 1, ForecastMode::Multivariate).is_err());
    }

    #[test]
    fn univariate_target_is_target_column() {
        let f = frame(10, 3);
        let spec = WindowSpec::new(4, 2, 3).unwrap();
        let w = window_at(&f, 1, spec, ForecastMode::Univariate).unwrap();
        assert_eq!(w.target.shape(), &[3, 1]);
        assert_eq!(w.target.data(), &[f.values().at(&[5, 2]), f.values().at(&[6, 2]), f.values().at(&[7, 2])]);
        assert_eq!(w.dec_x.shape(), &[5, 3]);
    }

    #[test]
    fn fraction_split() {
        let f = frame(100, 1);
        let r = split(&f, &SplitSpec::Fractions([0.7, 0.1, 0.2])).unwrap();
        assert_eq!((r.train.len(), r.val.len(), r.test.len()), (70, 10, 20));
        assert_eq!(r.train.end, r.val.start);
        assert_eq!(r.val.end, r.test.start);
        assert!(split(&f, &SplitSpec::Fractions([1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn validation_windows_reach_back_into_training() {
        let f = frame(100, 1);
        let r = split(&f, &SplitSpec::Fractions([0.7, 0.1, 0.2])).unwrap();
        let spec = WindowSpec::new(8, 4, 2).unwrap();
        let w = windows_in_range(&f, spec, r.val.clone(), 1, ForecastMode::Multivariate).unwrap();
        assert_eq!(w[0].start, 70 - 8);
        assert_eq!(w.len(), 10 - 2 + 1);
        assert!(w.iter().all(|s| s.start + 8 >= 70 && s.start + 10 <= 80));
    }
}
