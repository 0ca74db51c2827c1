use crate::error::{Error, Result};
use crate::numcore::{irfft, rfft, softmax, Complex64, Tensor};

/// Row-stochastic variable-mixing matrix derived from one window.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationWeights {
    /// `[d_x, d_x]`; row `i` is variable `i`'s weighting of the source variables.
    pub w_r: Tensor,
    /// Max-over-lags correlation before the softmax.
    pub mr: Tensor,
}

/// Lag-maximal circular cross-correlation of a window `x: [L_w, d_x]`.
///
/// `MR[i][j] = max_tau sum_t x_i[t] x_j[t + tau] / L_w` over mean-removed
/// columns, and `W_R` is its row-wise softmax.
pub fn multivariate_correlation(x: &Tensor) -> Result<CorrelationWeights> {
    let [lw, dx] = *x.shape() else {
        return Err(Error::shape(
            "multivariate_correlation",
            format!("window must be [L_w, d_x], got {:?}", x.shape()),
        ));
    };
    if dx == 0 {
        return Err(Error::InvalidArgument("correlation needs at least one variable".into()));
    }
    if lw < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation window must have at least 2 steps, got {lw}"
        )));
    }
    let spectra: Vec<Vec<Complex64>> = (0..dx)
        .map(|j| {
            let col: Vec<f64> = (0..lw).map(|t| x.data()[t * dx + j]).collect();
            let mean = col.iter().sum::<f64>() / lw as f64;
            rfft(&col.iter().map(|v| v - mean).collect::<Vec<_>>())
        })
        .collect();
    let mut mr = vec![0.0; dx * dx];
    let mut prod = vec![Complex64::new(0.0, 0.0); lw / 2 + 1];
    for i in 0..dx {
        for j in 0..dx {
            for (p, (a, b)) in prod.iter_mut().zip(spectra[i].iter().zip(&spectra[j])) {
                *p = a.conj() * b;
            }
            let r = irfft(&prod, lw);
            mr[i * dx + j] = r.iter().copied().fold(f64::NEG_INFINITY, f64::max) / lw as f64;
        }
    }
    let mr = Tensor::new([dx, dx], mr)?;
    let w_r = softmax(&mr, 1)?;
    Ok(CorrelationWeights { w_r, mr })
}
