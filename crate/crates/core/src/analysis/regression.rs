//! Ordinary least squares for one predictor.

use super::AnalysisError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// `1 - SS_res / SS_tot`; `None` when the response has no variance.
    pub r_squared: Option<f64>,
    pub n_points: usize,
}

/// Fit `y = slope * x + intercept`. Sums are taken about the means so
/// large predictors (miss rates around 1e9) keep full precision.
pub fn least_squares(points: &[(f64, f64)]) -> Result<LinearFit, AnalysisError> {
    if points.len() < 2 {
        return Err(AnalysisError::InsufficientData(format!("{} point(s); a fit needs at least 2", points.len())));
    }
    if let Some(p) = points.iter().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(AnalysisError::InvalidInput(format!("non-finite point {p:?}")));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(AnalysisError::Degenerate("all predictor values are identical".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r_squared = if syy > 0.0 {
        let ss_res: f64 = points
            .iter()
            .map(|&(x, y)| {
                let r = y - (slope * x + intercept);
                r * r
            })
            .sum();
        Some((1.0 - ss_res / syy).clamp(0.0, 1.0))
    } else {
        None
    };
    Ok(LinearFit { slope, intercept, r_squared, n_points: points.len() })
}
