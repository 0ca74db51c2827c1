use std::ops::Range;

use log::warn;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Lower bound applied to per-variable standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// A regularly sampled multivariate series, values `[L, d_x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFrame {
    timestamps: Vec<i64>,
    values: Tensor,
    variable_names: Vec<String>,
    target_index: usize,
    interval_seconds: i64,
}

impl SeriesFrame {
    /// Validates ordering, regular spacing (when `interval_seconds > 0`) and shapes.
    pub fn new(
        timestamps: Vec<i64>,
        values: Tensor,
        variable_names: Vec<String>,
        target_index: usize,
        interval_seconds: i64,
    ) -> Result<Self> {
        let [len, dx] = *values.shape() else {
            return Err(Error::Data(format!(
                "frame values must be [L, d_x], got {:?}",
                values.shape()
            )));
        };
        if len != timestamps.len() {
            return Err(Error::Data(format!(
                "{} timestamps for {} rows",
                timestamps.len(),
                len
            )));
        }
        if dx == 0 || variable_names.len() != dx {
            return Err(Error::Data(format!(
                "{} variable names for {} columns",
                variable_names.len(),
                dx
            )));
        }
        if target_index >= dx {
            return Err(Error::Data(format!(
                "target index {target_index} out of range for {dx} variables"
            )));
        }
        for (i, w) in timestamps.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Data(format!(
                    "non-increasing timestamps at row {}",
                    i + 1
                )));
            }
            if interval_seconds > 0 && w[1] - w[0] != interval_seconds {
                return Err(Error::Data(format!(
                    "irregular sampling at row {}: gap {}s, expected {}s",
                    i + 1,
                    w[1] - w[0],
                    interval_seconds
                )));
            }
        }
        if !values.is_finite() {
            return Err(Error::Data("non-finite value in frame".into()));
        }
        Ok(SeriesFrame {
            timestamps,
            values,
            variable_names,
            target_index,
            interval_seconds,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_vars(&self) -> usize {
        self.variable_names.len()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn target_name(&self) -> &str {
        &self.variable_names[self.target_index]
    }

    pub fn interval_seconds(&self) -> i64 {
        self.interval_seconds
    }

    /// Same frame with replaced values of identical shape.
    pub fn with_values(&self, values: Tensor) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(Error::shape(
                "SeriesFrame::with_values",
                format!("{:?} vs {:?}", values.shape(), self.values.shape()),
            ));
        }
        Ok(SeriesFrame {
            values,
            ..self.clone()
        })
    }

    /// Rows `range` as a new frame.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start >= range.end {
            return Err(Error::Data(format!(
                "row range {range:?} invalid for length {}",
                self.len()
            )));
        }
        Ok(SeriesFrame {
            timestamps: self.timestamps[range.clone()].to_vec(),
            values: self.values.narrow(0, range.start, range.len())?,
            ..self.clone()
        })
    }
}

/// Per-variable population mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizeStats {
    pub mean: Tensor,
    pub std: Tensor,
}

impl StandardizeStats {
    pub fn num_vars(&self) -> usize {
        self.mean.numel()
    }

    /// Maps a standardized value of variable `var` back to data units.
    pub fn destandardize_value(&self, var: usize, v: f64) -> f64 {
        v * self.std.data()[var] + self.mean.data()[var]
    }
}

/// Population statistics over `train_range`; constant columns get `STD_FLOOR`.
pub fn fit_stats(frame: &SeriesFrame, train_range: Range<usize>) -> Result<StandardizeStats> {
    if train_range.is_empty() || train_range.end > frame.len() {
        return Err(Error::Data(format!(
            "training range {train_range:?} invalid for length {}",
            frame.len()
        )));
    }
    let dx = frame.num_vars();
    let n = train_range.len() as f64;
    let vals = frame.values().data();
    let mut mean = vec![0.0; dx];
    for r in train_range.clone() {
        for (m, v) in mean.iter_mut().zip(&vals[r * dx..(r + 1) * dx]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dx];
    for r in train_range {
        for j in 0..dx {
            let d = vals[r * dx + j] - mean[j];
            var[j] += d * d;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let s = (v / n).sqrt();
            if s < STD_FLOOR {
                warn!(
                    "variable '{}' has zero variance on the training range; std floored at {STD_FLOOR}",
                    frame.variable_names()[j]
                );
                STD_FLOOR
            } else {
                s
            }
        })
        .collect();
    Ok(StandardizeStats {
        mean: Tensor::new([dx], mean)?,
        std: Tensor::new([dx], std)?,
    })
}

fn check_stats(frame: &SeriesFrame, stats: &StandardizeStats) -> Result<()> {
    if stats.num_vars() != frame.num_vars() {
        return Err(Error::Data(format!(
            "statistics for {} variables applied to {}",
            stats.num_vars(),
            frame.num_vars()
        )));
    }
    Ok(())
}

/// `(x - mean) / std` per variable.
pub fn standardize(frame: &SeriesFrame, stats: &StandardizeStats) -> Result<SeriesFrame> {
    check_stats(frame, stats)?;
    let dx = frame.num_vars();
    let (m, s) = (stats.mean.data(), stats.std.data());
    let mut v = frame.values().clone();
    for (i, x) in v.data_mut().iter_mut().enumerate() {
        *x = (*x - m[i % dx]) / s[i % dx];
    }
    frame.with_values(v)
}

/// Inverse of [`standardize`].
pub fn destandardize(frame: &SeriesFrame, stats: &StandardizeStats) -> Result<SeriesFrame> {
    check_stats(frame, stats)?;
    let dx = frame.num_vars();
    let (m, s) = (stats.mean.data(), stats.std.data());
    let mut v = frame.values().clone();
    for (i, x) in v.data_mut().iter_mut().enumerate() {
        *x = *x * s[i % dx] + m[i % dx];
    }
    frame.with_values(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(values: &[f64], dx: usize) -> SeriesFrame {
        let len = values.len() / dx;
        SeriesFrame::new(
            (0..len as i64).map(|t| t * 3600).collect(),
            Tensor::new([len, dx], values.to_vec()).unwrap(),
            (0..dx).map(|j| format!("v{j}")).collect(),
            0,
            3600,
        )
        .unwrap()
    }

    #[test]
    fn stats_of_one_two_three() {
        let f = frame(&[1.0, 2.0, 3.0], 1);
        let s = fit_stats(&f, 0..3).unwrap();
        assert_eq!(s.mean.data(), &[2.0]);
        assert!((s.std.data()[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let z = standardize(&f, &s).unwrap();
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in z.values().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_is_floored() {
        let f = frame(&[4.0, 1.0, 4.0, 2.0, 4.0, 3.0], 2);
        let s = fit_stats(&f, 0..3).unwrap();
        assert_eq!(s.std.data()[0], STD_FLOOR);
        let z = standardize(&f, &s).unwrap();
        assert!((0..3).all(|r| z.values().at(&[r, 0]) == 0.0));
    }

    #[test]
    fn empty_training_range_is_rejected() {
        let f = frame(&[1.0, 2.0], 1);
        assert!(fit_stats(&f, 1..1).is_err());
    }

    #[test]
    fn irregular_gap_is_rejected() {
        let r = SeriesFrame::new(
            vec![0, 3600, 9000],
            Tensor::zeros([3, 1]),
            vec!["a".into()],
            0,
            3600,
        );
        assert!(matches!(r, Err(Error::Data(m)) if m.contains("irregular")));
    }
}
