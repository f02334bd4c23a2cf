//! Small regression helpers shared by the bound checks.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Ordinary least squares `y ≈ intercept + slope·x`; `None` with fewer than two
/// distinct abscissae.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = x[..n].iter().sum::<f64>() / nf;
    let my = y[..n].iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        sxx += dx * dx;
        sxy += dx * (y[i] - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(LineFit {
        slope,
        intercept: my - slope * mx,
        points: n,
    })
}

/// Fit `log(value)` against `x`, skipping values at or below `floor`.
pub fn log_fit(x: &[f64], values: &[f64], floor: f64) -> Option<LineFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(values)
        .filter(|(_, v)| v.is_finite() && **v > floor)
        .map(|(x, v)| (*x, v.ln()))
        .unzip();
    linear_fit(&xs, &ys)
}
