//! Power models: package power against active cores (logarithmic) and DRAM
//! power against memory activity (linear).

use serde::{Deserialize, Serialize};

use super::regression::least_squares;
use super::AnalysisError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// `watts = slope * log2(cores) + intercept`, predicting package power.
    LogCores,
    /// `watts = slope * misses_per_s + intercept`, predicting DRAM power.
    LinearMemory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub kind: ModelKind,
    /// Watts per doubling of cores, or watts per (miss/s).
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: Option<f64>,
    pub n_points: usize,
}

impl PowerModel {
    /// A model with known parameters, e.g. one fitted elsewhere.
    pub fn with_parameters(kind: ModelKind, slope: f64, intercept: f64) -> Self {
        PowerModel { kind, slope, intercept, r_squared: None, n_points: 0 }
    }

    /// Predicted watts at predictor value `x` (cores or misses per second).
    pub fn power_at(&self, x: f64) -> Result<f64, AnalysisError> {
        match self.kind {
            ModelKind::LogCores => {
                if !(x > 0.0) {
                    return Err(AnalysisError::NonPositiveCores(x));
                }
                Ok(self.slope * x.log2() + self.intercept)
            }
            ModelKind::LinearMemory => Ok(self.slope * x + self.intercept),
        }
    }

    pub fn equation(&self) -> String {
        let r2 = self.r_squared.map_or("undefined".to_string(), |r| format!("{r:.4}"));
        match self.kind {
            ModelKind::LogCores => {
                format!("y = {:.6} log2 x + {:.6} (R^2 = {r2}, n = {})", self.slope, self.intercept, self.n_points)
            }
            ModelKind::LinearMemory => {
                format!("y = {:.6e} x + {:.6} (R^2 = {r2}, n = {})", self.slope, self.intercept, self.n_points)
            }
        }
    }
}

/// Least-squares fit of package watts against log2 of average active cores.
pub fn fit_log_cores(points: &[(f64, f64)]) -> Result<PowerModel, AnalysisError> {
    if let Some(&(cores, _)) = points.iter().find(|(c, _)| !(*c > 0.0)) {
        return Err(AnalysisError::NonPositiveCores(cores));
    }
    let transformed: Vec<(f64, f64)> = points.iter().map(|&(c, w)| (c.log2(), w)).collect();
    let fit = least_squares(&transformed)?;
    Ok(PowerModel {
        kind: ModelKind::LogCores,
        slope: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        n_points: fit.n_points,
    })
}

/// Least-squares fit of DRAM watts against LLC misses per second.
pub fn fit_linear_memory(points: &[(f64, f64)]) -> Result<PowerModel, AnalysisError> {
    let fit = least_squares(points)?;
    Ok(PowerModel {
        kind: ModelKind::LinearMemory,
        slope: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        n_points: fit.n_points,
    })
}

fn require_log(model: &PowerModel) -> Result<(), AnalysisError> {
    if model.kind != ModelKind::LogCores {
        return Err(AnalysisError::WrongModelKind { expected: ModelKind::LogCores, found: model.kind });
    }
    Ok(())
}

/// Watts added by doubling the active cores: `Power(2x) - Power(x)`, which
/// for the log model is the slope at every `x`.
pub fn power_doubling_increment(model: &PowerModel) -> Result<f64, AnalysisError> {
    require_log(model)?;
    Ok(model.slope)
}

/// `Power(2x) / Power(x)`: the smallest throughput gain for which doubling
/// the cores at `x` does not increase energy.
pub fn breakeven_throughput_gain(model: &PowerModel, cores: f64) -> Result<f64, AnalysisError> {
    require_log(model)?;
    if !(cores >= 1.0) {
        return Err(AnalysisError::InvalidInput(format!("break-even needs at least 1 core, got {cores}")));
    }
    let base = model.power_at(cores)?;
    if !(base > 0.0) {
        return Err(AnalysisError::NonPositivePower(base));
    }
    Ok(model.power_at(2.0 * cores)? / base)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadDescriptor {
    pub avg_active_cores: f64,
    /// LLC misses per second.
    pub memory_activity: f64,
    pub duration_s: f64,
}

impl WorkloadDescriptor {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(self.avg_active_cores > 0.0) {
            return Err(AnalysisError::NonPositiveCores(self.avg_active_cores));
        }
        if !(self.memory_activity >= 0.0) || !(self.duration_s > 0.0) {
            return Err(AnalysisError::InvalidInput("memory activity must be >= 0 and duration > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub watts: f64,
    pub joules: f64,
}

/// Forward prediction: the log model reads the core count, the memory model
/// the miss rate.
pub fn predict_power(model: &PowerModel, workload: &WorkloadDescriptor) -> Result<Prediction, AnalysisError> {
    let x = match model.kind {
        ModelKind::LogCores => workload.avg_active_cores,
        ModelKind::LinearMemory => workload.memory_activity,
    };
    if !(workload.duration_s > 0.0) {
        return Err(AnalysisError::InvalidInput("duration must be positive".into()));
    }
    let watts = model.power_at(x)?;
    Ok(Prediction { watts, joules: watts * workload.duration_s })
}
