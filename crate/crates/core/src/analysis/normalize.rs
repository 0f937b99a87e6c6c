//! Time and energy of each implementation relative to a baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AnalysisError, Observation};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanKind {
    #[default]
    Geometric,
    Arithmetic,
}

/// Which energy figure a ratio is taken over. Package and DRAM are only
/// combined when asked for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyChoice {
    #[default]
    Pkg,
    Dram,
    Total,
}

impl EnergyChoice {
    fn of(self, o: &Observation) -> Option<f64> {
        match self {
            EnergyChoice::Pkg => o.pkg_joules,
            EnergyChoice::Dram => o.dram_joules,
            EnergyChoice::Total => Some(o.pkg_joules? + o.dram_joules?),
        }
    }
}

impl std::str::FromStr for EnergyChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pkg" => Ok(EnergyChoice::Pkg),
            "dram" => Ok(EnergyChoice::Dram),
            "total" => Ok(EnergyChoice::Total),
            _ => Err(format!("unknown energy choice {s:?}; expected pkg, dram or total")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizeOptions {
    pub baseline: String,
    pub mean: MeanKind,
    pub energy: EnergyChoice,
}

impl NormalizeOptions {
    pub fn new(baseline: impl Into<String>) -> Self {
        NormalizeOptions { baseline: baseline.into(), mean: MeanKind::default(), energy: EnergyChoice::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub language_impl: String,
    pub normalized_time: f64,
    pub normalized_energy: f64,
    /// Benchmarks that entered the aggregate.
    pub benchmarks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedTable {
    pub baseline_impl: String,
    pub mean: MeanKind,
    pub energy: EnergyChoice,
    /// Baseline first, then the other implementations by name.
    pub rows: Vec<NormalizedRow>,
    pub notes: Vec<String>,
}

impl NormalizedTable {
    pub fn row(&self, language_impl: &str) -> Option<&NormalizedRow> {
        self.rows.iter().find(|r| r.language_impl == language_impl)
    }
}

#[derive(Default)]
struct Sums {
    time: f64,
    energy: f64,
    n: u32,
}

/// Per-benchmark ratios against the baseline, aggregated per implementation.
/// Repetitions of one benchmark are averaged before the ratio is taken.
pub fn normalize(observations: &[Observation], options: &NormalizeOptions) -> Result<NormalizedTable, AnalysisError> {
    let mut notes = Vec::new();
    let mut sorted: Vec<&Observation> = observations.iter().filter(|o| o.success).collect();
    sorted.sort_by(|a, b| {
        (&a.benchmark, &a.language_impl, a.repetition).cmp(&(&b.benchmark, &b.language_impl, b.repetition))
    });

    // benchmark -> impl -> sums
    let mut table: BTreeMap<&str, BTreeMap<&str, Sums>> = BTreeMap::new();
    for o in sorted {
        let (Some(t), Some(e)) = (o.wall_time_s, options.energy.of(o)) else {
            notes.push(format!("{}: missing time or energy, skipped", o.label()));
            continue;
        };
        if !(t > 0.0 && e > 0.0 && t.is_finite() && e.is_finite()) {
            notes.push(format!("{}: non-positive time or energy, skipped", o.label()));
            continue;
        }
        let s = table.entry(&o.benchmark).or_default().entry(&o.language_impl).or_default();
        s.time += t;
        s.energy += e;
        s.n += 1;
    }

    if !table.values().any(|m| m.contains_key(options.baseline.as_str())) {
        return Err(AnalysisError::MissingBaseline(options.baseline.clone()));
    }

    let mut ratios: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for (bench, impls) in &table {
        let Some(base) = impls.get(options.baseline.as_str()) else {
            notes.push(format!("benchmark {bench} excluded: no successful {} run", options.baseline));
            continue;
        };
        let (bt, be) = (base.time / base.n as f64, base.energy / base.n as f64);
        for (imp, s) in impls {
            let (t, e) = (s.time / s.n as f64, s.energy / s.n as f64);
            ratios.entry(imp).or_default().push((t / bt, e / be));
        }
    }

    let aggregate = |values: &mut dyn Iterator<Item = f64>, n: usize| -> f64 {
        match options.mean {
            MeanKind::Geometric => (values.map(f64::ln).sum::<f64>() / n as f64).exp(),
            MeanKind::Arithmetic => values.sum::<f64>() / n as f64,
        }
    };
    let mut rows: Vec<NormalizedRow> = ratios
        .iter()
        .map(|(imp, rs)| {
            let n = rs.len();
            let (time, energy) = if *imp == options.baseline {
                (1.0, 1.0)
            } else {
                (aggregate(&mut rs.iter().map(|r| r.0), n), aggregate(&mut rs.iter().map(|r| r.1), n))
            };
            NormalizedRow {
                language_impl: imp.to_string(),
                normalized_time: time,
                normalized_energy: energy,
                benchmarks: n,
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.language_impl != options.baseline, r.language_impl.clone()));

    let total = rows.iter().find(|r| r.language_impl == options.baseline).map_or(0, |r| r.benchmarks);
    for r in &rows {
        if r.benchmarks < total {
            notes.push(format!("{} covers {} of {} benchmarks", r.language_impl, r.benchmarks, total));
        }
    }

    Ok(NormalizedTable {
        baseline_impl: options.baseline.clone(),
        mean: options.mean,
        energy: options.energy,
        rows,
        notes,
    })
}
