//! Checks for factors that make a cross-language comparison unfair:
//! different degrees of parallelism, warmup-dominated timings, and unequal
//! power draw under supposedly controlled conditions.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::regression::least_squares;
use super::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfoundConfig {
    /// `max / min` of average active cores above which a comparison is flagged.
    pub parallelism_ratio: f64,
    /// Allowed deviation of one pinned run's package power from the set mean.
    pub power_band_w: f64,
    /// Warmup skew above which timings are flagged as warmup dominated.
    pub warmup_ratio: f64,
}

impl Default for ConfoundConfig {
    fn default() -> Self {
        ConfoundConfig { parallelism_ratio: 2.0, power_band_w: 0.5, warmup_ratio: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlagKind {
    ParallelismMismatch,
    WarmupSkew,
    PowerEquality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlagStatus {
    /// Checked and within bounds.
    Clear,
    /// Checked and outside bounds.
    Flagged,
    NotEvaluated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupSkew {
    /// Time of a one-iteration run over the marginal cost of one more iteration.
    pub ratio: f64,
    pub first_s: f64,
    pub steady_s: f64,
    /// `T(1) / (T(n_max) / n_max)`: first iteration against the average.
    pub first_vs_average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundFlag {
    pub kind: FlagKind,
    /// `*` for checks over the whole pinned set.
    pub benchmark: String,
    pub implementations: Vec<String>,
    pub status: FlagStatus,
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub warmup: Option<WarmupSkew>,
    /// Labels of the observations the flag was computed from.
    pub records: Vec<String>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundReport {
    pub config: ConfoundConfig,
    pub flags: Vec<ConfoundFlag>,
    pub notes: Vec<String>,
}

impl ConfoundReport {
    pub fn flags_of(&self, kind: FlagKind) -> impl Iterator<Item = &ConfoundFlag> {
        self.flags.iter().filter(move |f| f.kind == kind)
    }

    pub fn any_flagged(&self) -> bool {
        self.flags.iter().any(|f| f.status == FlagStatus::Flagged)
    }
}

fn total_order(a: &Observation, b: &Observation) -> Ordering {
    let key = |o: &Observation| (o.benchmark.clone(), o.language_impl.clone(), o.iterations, o.repetition);
    let f = |x: Option<f64>| x.unwrap_or(f64::NEG_INFINITY);
    key(a)
        .cmp(&key(b))
        .then(f(a.wall_time_s).total_cmp(&f(b.wall_time_s)))
        .then(f(a.pkg_watts).total_cmp(&f(b.pkg_watts)))
        .then(f(a.avg_cores).total_cmp(&f(b.avg_cores)))
        .then(f(a.pkg_joules).total_cmp(&f(b.pkg_joules)))
}

fn flag(kind: FlagKind, benchmark: &str, implementations: Vec<String>, records: Vec<String>) -> ConfoundFlag {
    ConfoundFlag {
        kind,
        benchmark: benchmark.to_string(),
        implementations,
        status: FlagStatus::NotEvaluated,
        value: None,
        threshold: None,
        warmup: None,
        records,
        detail: String::new(),
    }
}

/// Run all checks. Observations are put in a canonical order first, so the
/// report does not depend on the order they were given in.
pub fn detect_confounds(observations: &[Observation], config: &ConfoundConfig) -> ConfoundReport {
    let mut obs: Vec<&Observation> = observations.iter().collect();
    obs.sort_by(|a, b| total_order(a, b));
    let failed = obs.iter().filter(|o| !o.success).count();
    let ok: Vec<&Observation> = obs.into_iter().filter(|o| o.success).collect();

    let mut notes = Vec::new();
    if failed > 0 {
        notes.push(format!("{failed} failed run(s) ignored"));
    }

    let mut by_benchmark: BTreeMap<&str, BTreeMap<&str, Vec<&Observation>>> = BTreeMap::new();
    for o in &ok {
        by_benchmark.entry(&o.benchmark).or_default().entry(&o.language_impl).or_default().push(o);
    }

    let mut flags = Vec::new();
    for (bench, impls) in &by_benchmark {
        flags.push(parallelism(bench, impls, config));
        for (imp, runs) in impls {
            flags.push(warmup(bench, imp, runs, config));
        }
    }
    flags.push(power_equality(&ok, config));

    ConfoundReport { config: *config, flags, notes }
}

fn parallelism(bench: &str, impls: &BTreeMap<&str, Vec<&Observation>>, config: &ConfoundConfig) -> ConfoundFlag {
    let names: Vec<String> = impls.keys().map(|s| s.to_string()).collect();
    let mut records = Vec::new();
    let mut means: Vec<(&str, f64)> = Vec::new();
    for (imp, runs) in impls {
        let cores: Vec<f64> = runs.iter().filter_map(|o| o.avg_cores).collect();
        records.extend(runs.iter().filter(|o| o.avg_cores.is_some()).map(|o| o.label()));
        if !cores.is_empty() {
            means.push((imp, cores.iter().sum::<f64>() / cores.len() as f64));
        }
    }
    let mut f = flag(FlagKind::ParallelismMismatch, bench, names, records);
    f.threshold = Some(config.parallelism_ratio);
    if means.len() < 2 {
        f.detail = "fewer than two implementations with core usage".into();
        return f;
    }
    let (min_imp, min) = means.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let (max_imp, max) = means.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    if !(min > 0.0) {
        f.detail = format!("{min_imp} reports no active cores");
        return f;
    }
    let ratio = max / min;
    f.value = Some(ratio);
    f.status = if ratio > config.parallelism_ratio { FlagStatus::Flagged } else { FlagStatus::Clear };
    f.detail = format!("{max_imp} averages {max:.3} active cores, {min_imp} {min:.3} (ratio {ratio:.3})");
    f
}

fn warmup(bench: &str, imp: &str, runs: &[&Observation], config: &ConfoundConfig) -> ConfoundFlag {
    let points: Vec<(f64, f64)> = runs.iter().filter_map(|o| Some((o.iterations? as f64, o.wall_time_s?))).collect();
    let records =
        runs.iter().filter(|o| o.iterations.is_some() && o.wall_time_s.is_some()).map(|o| o.label()).collect();
    let mut f = flag(FlagKind::WarmupSkew, bench, vec![imp.to_string()], records);
    f.threshold = Some(config.warmup_ratio);

    let mut counts: Vec<u32> = runs.iter().filter_map(|o| o.iterations).collect();
    counts.sort_unstable();
    counts.dedup();
    if counts.len() < 2 {
        f.detail = "no iteration sweep".into();
        return f;
    }
    let singles: Vec<f64> = points.iter().filter(|p| p.0 == 1.0).map(|p| p.1).collect();
    if singles.is_empty() {
        f.detail = "sweep has no one-iteration run".into();
        return f;
    }
    let fit = match least_squares(&points) {
        Ok(fit) => fit,
        Err(e) => {
            f.detail = e.to_string();
            return f;
        }
    };
    if !(fit.slope > 0.0) {
        f.detail = format!("time does not grow with iterations (slope {:.3e} s)", fit.slope);
        return f;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let first = mean(&singles);
    let n_max = *counts.last().unwrap();
    let at_max: Vec<f64> = points.iter().filter(|p| p.0 == n_max as f64).map(|p| p.1).collect();
    let ratio = first / fit.slope;
    f.warmup = Some(WarmupSkew {
        ratio,
        first_s: first,
        steady_s: fit.slope,
        first_vs_average: first / (mean(&at_max) / n_max as f64),
    });
    f.value = Some(ratio);
    f.status = if ratio > config.warmup_ratio { FlagStatus::Flagged } else { FlagStatus::Clear };
    f.detail = format!("first iteration {first:.6} s, steady {:.6} s per iteration", fit.slope);
    f
}

fn power_equality(ok: &[&Observation], config: &ConfoundConfig) -> ConfoundFlag {
    let pinned: Vec<(&Observation, f64)> =
        ok.iter().filter(|o| o.power_controlled == Some(true)).filter_map(|o| Some((*o, o.pkg_watts?))).collect();
    let mut implementations: Vec<String> = pinned.iter().map(|(o, _)| o.language_impl.clone()).collect();
    implementations.sort();
    implementations.dedup();
    let records = pinned.iter().map(|(o, _)| o.label()).collect();
    let mut f = flag(FlagKind::PowerEquality, "*", implementations, records);
    f.threshold = Some(config.power_band_w);
    if pinned.len() < 2 {
        f.detail = "fewer than two single-core, fixed-frequency runs".into();
        return f;
    }
    let mean = pinned.iter().map(|p| p.1).sum::<f64>() / pinned.len() as f64;
    let (worst, dev) = pinned.iter().map(|(o, w)| (*o, (w - mean).abs())).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    // Rounding slack so a spread of exactly the band still passes.
    let slack = 1e-9 * mean.abs().max(1.0);
    f.value = Some(dev);
    f.status = if dev > config.power_band_w + slack { FlagStatus::Flagged } else { FlagStatus::Clear };
    f.detail = format!("mean {mean:.3} W; largest deviation {dev:.3} W from {}", worst.label());
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::tests::obs;
    use proptest::prelude::*;

    fn status(r: &ConfoundReport, kind: FlagKind, bench: &str) -> FlagStatus {
        r.flags_of(kind).find(|f| f.benchmark == bench).unwrap().status
    }

    #[test]
    fn parallelism_mismatch() {
        let v = vec![obs("run", "js", 0, 1.0, 10.0, 28.0), obs("run", "ts", 0, 1.0, 10.0, 1.0)];
        let r = detect_confounds(&v, &ConfoundConfig::default());
        let f = r.flags_of(FlagKind::ParallelismMismatch).next().unwrap();
        assert_eq!(f.status, FlagStatus::Flagged);
        assert_eq!(f.value, Some(28.0));
        assert_eq!(f.records.len(), 2);

        let v = vec![obs("run", "js", 0, 1.0, 10.0, 1.9), obs("run", "ts", 0, 1.0, 10.0, 1.0)];
        assert_eq!(
            status(&detect_confounds(&v, &ConfoundConfig::default()), FlagKind::ParallelismMismatch, "run"),
            FlagStatus::Clear
        );
    }

    #[test]
    fn parallelism_needs_two_implementations() {
        let v = vec![obs("run", "js", 0, 1.0, 10.0, 28.0)];
        let r = detect_confounds(&v, &ConfoundConfig::default());
        assert_eq!(status(&r, FlagKind::ParallelismMismatch, "run"), FlagStatus::NotEvaluated);
        assert_eq!(status(&r, FlagKind::PowerEquality, "*"), FlagStatus::NotEvaluated);
    }

    fn sweep(first: f64, steady: f64) -> Vec<Observation> {
        [1u32, 2, 4, 8, 16]
            .iter()
            .map(|&n| {
                let mut o = obs("fib", "pypy", 0, first + (n - 1) as f64 * steady, 1.0, 1.0);
                o.iterations = Some(n);
                o
            })
            .collect()
    }

    #[test]
    fn warmup_skew() {
        let r = detect_confounds(&sweep(2.7, 1.0), &ConfoundConfig::default());
        let f = r.flags_of(FlagKind::WarmupSkew).next().unwrap();
        let w = f.warmup.as_ref().unwrap();
        assert!((w.ratio - 2.7).abs() < 1e-9);
        assert!((w.first_vs_average - 2.7 / (17.7 / 16.0)).abs() < 1e-9);
        assert_eq!(f.status, FlagStatus::Flagged);
        assert_eq!(f.records.len(), 5);

        let r = detect_confounds(&sweep(1.0, 1.0), &ConfoundConfig::default());
        assert_eq!(status(&r, FlagKind::WarmupSkew, "fib"), FlagStatus::Clear);
    }

    #[test]
    fn warmup_without_sweep() {
        let r = detect_confounds(&[obs("fib", "pypy", 0, 1.0, 1.0, 1.0)], &ConfoundConfig::default());
        assert_eq!(status(&r, FlagKind::WarmupSkew, "fib"), FlagStatus::NotEvaluated);
        let mut no_single = sweep(2.7, 1.0);
        no_single.remove(0);
        let r = detect_confounds(&no_single, &ConfoundConfig::default());
        assert_eq!(status(&r, FlagKind::WarmupSkew, "fib"), FlagStatus::NotEvaluated);
    }

    fn pinned(watts: &[f64]) -> Vec<Observation> {
        watts.iter().enumerate().map(|(i, w)| obs(&format!("b{i}"), "c", 0, 1.0, *w, 1.0)).collect()
    }

    #[test]
    fn power_equality() {
        let r = detect_confounds(&pinned(&[189.3, 190.3, 189.8, 189.8]), &ConfoundConfig::default());
        assert_eq!(status(&r, FlagKind::PowerEquality, "*"), FlagStatus::Clear);
        let r = detect_confounds(&pinned(&[189.3, 190.3, 189.8, 195.0]), &ConfoundConfig::default());
        let f = r.flags_of(FlagKind::PowerEquality).next().unwrap();
        assert_eq!(f.status, FlagStatus::Flagged);
        assert!(f.detail.contains("b3"));

        let mut loose = pinned(&[150.0, 250.0]);
        loose.iter_mut().for_each(|o| o.power_controlled = Some(false));
        let r = detect_confounds(&loose, &ConfoundConfig::default());
        assert_eq!(status(&r, FlagKind::PowerEquality, "*"), FlagStatus::NotEvaluated);
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in any::<u64>(), cores in proptest::collection::vec(0.5f64..32.0, 8)) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut v: Vec<Observation> = cores
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let mut o = obs(&format!("b{}", i % 2), &format!("i{}", i % 3), (i / 6) as u32, 1.0 + *c, 180.0 + c, *c);
                    o.iterations = Some(1 + (i as u32 % 4));
                    o
                })
                .collect();
            let config = ConfoundConfig::default();
            let before = detect_confounds(&v, &config);
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(before, detect_confounds(&v, &config));
        }
    }
}
