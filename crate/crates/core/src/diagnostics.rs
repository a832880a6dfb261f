//! Scoring rules for validating predictions against held-out truth.

use nalgebra::DMatrix;

use crate::error::{FrkError, Result};

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(FrkError::Dimension(format!("{what}: {a} truth values but {b} predictions")));
    }
    Ok(())
}

fn mean(it: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    it.sum::<f64>() / n as f64
}

/// Root-mean-squared prediction error.
pub fn rmspe(truth: &[f64], pred: &[f64]) -> Result<f64> {
    same_len(truth.len(), pred.len(), "rmspe")?;
    Ok(mean(truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)), truth.len()).sqrt())
}

/// Mean absolute error.
pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64> {
    same_len(truth.len(), pred.len(), "mae")?;
    Ok(mean(truth.iter().zip(pred).map(|(t, p)| (t - p).abs()), truth.len()))
}

/// Mean absolute percentage error (as a fraction).
pub fn mape(truth: &[f64], pred: &[f64]) -> Result<f64> {
    same_len(truth.len(), pred.len(), "mape")?;
    let zeros: Vec<usize> = truth.iter().enumerate().filter(|(_, t)| **t == 0.0).map(|(i, _)| i).collect();
    if !zeros.is_empty() {
        return Err(FrkError::ZeroTruth(zeros));
    }
    Ok(mean(truth.iter().zip(pred).map(|(t, p)| ((t - p) / t).abs()), truth.len()))
}

/// CRPS of the empirical distribution of `samples` at `y`, via order statistics:
/// `(1/n) sum |x_i - y| - (1/n^2) sum_i (2i - n - 1) x_(i)`.
pub fn crps_sample(y: f64, samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mut x = samples.to_vec();
    x.sort_by(|a, b| a.total_cmp(b));
    let first: f64 = x.iter().map(|xi| (xi - y).abs()).sum::<f64>() / n;
    let spread: f64 = x.iter().enumerate().map(|(i, xi)| (2.0 * (i as f64 + 1.0) - n - 1.0) * xi).sum::<f64>() / (n * n);
    first - spread
}

/// Average empirical CRPS; row `i` of `samples` holds the draws for `truth[i]`.
pub fn crps_empirical(truth: &[f64], samples: &DMatrix<f64>) -> Result<f64> {
    same_len(truth.len(), samples.nrows(), "crps")?;
    if samples.ncols() < 2 {
        return Err(FrkError::Configuration("CRPS needs at least two samples per location".into()));
    }
    let scores = truth.iter().enumerate().map(|(i, &y)| {
        let row: Vec<f64> = samples.row(i).iter().copied().collect();
        crps_sample(y, &row)
    });
    Ok(mean(scores, truth.len()))
}

fn check_bounds(truth: &[f64], lower: &[f64], upper: &[f64]) -> Result<()> {
    same_len(truth.len(), lower.len(), "lower bounds")?;
    same_len(truth.len(), upper.len(), "upper bounds")?;
    if let Some(i) = lower.iter().zip(upper).position(|(l, u)| l > u) {
        return Err(FrkError::ParameterDomain(format!("interval {i} has lower bound above upper bound")));
    }
    Ok(())
}

/// Average interval score of central `(1 - alpha)` intervals.
pub fn interval_score(truth: &[f64], lower: &[f64], upper: &[f64], alpha: f64) -> Result<f64> {
    check_bounds(truth, lower, upper)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FrkError::ParameterDomain(format!("interval level alpha = {alpha} must lie in (0, 1)")));
    }
    let scores = truth.iter().zip(lower.iter().zip(upper)).map(|(&y, (&l, &u))| {
        let mut s = u - l;
        if y < l {
            s += 2.0 / alpha * (l - y);
        }
        if y > u {
            s += 2.0 / alpha * (y - u);
        }
        s
    });
    Ok(mean(scores, truth.len()))
}

/// Fraction of locations with `lower <= truth <= upper`.
pub fn coverage(truth: &[f64], lower: &[f64], upper: &[f64]) -> Result<f64> {
    check_bounds(truth, lower, upper)?;
    let hits = truth.iter().zip(lower.iter().zip(upper)).filter(|(y, (l, u))| l <= y && y <= u).count();
    Ok(hits as f64 / truth.len().max(1) as f64)
}

/// Brier score of predicted probabilities for binary outcomes.
pub fn brier(truth: &[f64], prob: &[f64]) -> Result<f64> {
    same_len(truth.len(), prob.len(), "brier")?;
    if let Some(i) = truth.iter().position(|t| *t != 0.0 && *t != 1.0) {
        return Err(FrkError::ParameterDomain(format!("truth at location {i} is not binary")));
    }
    if let Some(i) = prob.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(FrkError::ParameterDomain(format!("probability at location {i} is outside [0, 1]")));
    }
    Ok(mean(truth.iter().zip(prob).map(|(t, p)| (p - t) * (p - t)), truth.len()))
}
