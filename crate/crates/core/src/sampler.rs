//! Measurement sessions: periodic sampling of every RAPL stream while the
//! workload runs, so that no counter advances by 2^32 ticks between reads.
//!
//! A session samples once at start, then on a fixed grid of `period`
//! multiples, then once at stop. Real sessions run the grid on a dedicated
//! thread against the monotonic clock. Virtual sessions (used with the
//! simulated backend) walk the same grid on a virtual clock that the caller
//! advances explicitly, which makes them fully deterministic.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::warn;
use thiserror::Error;

use crate::backend::{BackendError, CounterAddress, CounterBackend};
use crate::counter::{
    accumulate_with_units, mask_register, CounterError, Domain, EnergyAccount, EnergySample, EnergyUnit, StreamId,
    COUNTER_MODULUS,
};

pub const DEFAULT_PERIOD: Duration = Duration::from_secs(1);
pub const DEFAULT_MAX_POWER_W: f64 = 10_000.0;

const SAMPLE_CAPACITY: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub period: Duration,
    /// Upper bound on credible power per stream, used to validate `period`.
    pub max_power_w: f64,
    /// Restrict sampling to these domains; `None` records everything the
    /// backend offers.
    pub domains: Option<Vec<Domain>>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig { period: DEFAULT_PERIOD, max_power_w: DEFAULT_MAX_POWER_W, domains: None }
    }
}

impl SessionConfig {
    pub fn with_period(period: Duration) -> Self {
        SessionConfig { period, ..Self::default() }
    }

    /// Ticks a stream could advance in one period at `max_power_w`.
    pub fn ticks_per_period(&self, unit: EnergyUnit) -> f64 {
        self.max_power_w * self.period.as_secs_f64() * unit.ticks_per_joule() as f64
    }

    pub fn validate(&self, unit: EnergyUnit) -> Result<(), SamplerError> {
        if self.period.is_zero() {
            return Err(SamplerError::Config("sampling period must be positive".into()));
        }
        if !(self.max_power_w > 0.0 && self.max_power_w.is_finite()) {
            return Err(SamplerError::Config("maximum power must be positive and finite".into()));
        }
        let ticks = self.ticks_per_period(unit);
        if ticks >= COUNTER_MODULUS as f64 {
            let max_period = COUNTER_MODULUS as f64 / (self.max_power_w * unit.ticks_per_joule() as f64);
            return Err(SamplerError::Config(format!(
                "period {:?} lets the counter advance {ticks:.0} ticks at {} W, past the 32-bit range; use a period below {max_period:.3} s",
                self.period, self.max_power_w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid session configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("session already stopped")]
    AlreadyStopped,
    #[error("operation needs a {0} session")]
    WrongClock(&'static str),
    #[error("sampling thread panicked")]
    ThreadPanicked,
}

/// Raw sample streams of a finished session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub streams: BTreeMap<StreamId, Vec<EnergySample>>,
    pub units: BTreeMap<Domain, EnergyUnit>,
    pub start_ns: u64,
    pub end_ns: u64,
    /// Intervals that exceeded twice the sampling period.
    pub late_intervals: u64,
}

impl SessionResult {
    pub fn wall_time_s(&self) -> f64 {
        (self.end_ns - self.start_ns) as f64 / 1e9
    }

    pub fn samples_per_stream(&self) -> impl Iterator<Item = (StreamId, usize)> + '_ {
        self.streams.iter().map(|(id, s)| (*id, s.len()))
    }

    pub fn energy(&self) -> Result<EnergyAccount, CounterError> {
        let all: Vec<EnergySample> = self.streams.values().flatten().copied().collect();
        let units = &self.units;
        accumulate_with_units(&all, |d| units[&d])
    }
}

struct Recorder {
    backend: Box<dyn CounterBackend>,
    streams: Vec<(StreamId, Vec<EnergySample>)>,
    units: BTreeMap<Domain, EnergyUnit>,
    period_ns: u64,
    last_ns: Option<u64>,
    late_intervals: u64,
    error: Option<BackendError>,
}

impl Recorder {
    fn open(config: &SessionConfig, mut backend: Box<dyn CounterBackend>) -> Result<Self, SamplerError> {
        if config.period.is_zero() {
            return Err(SamplerError::Config("sampling period must be positive".into()));
        }
        let streams: Vec<_> = backend
            .topology()
            .iter()
            .filter(|s| config.domains.as_ref().is_none_or(|d| d.contains(&s.domain)))
            .map(|&s| (s, Vec::with_capacity(SAMPLE_CAPACITY)))
            .collect();
        if streams.is_empty() {
            return Err(SamplerError::Config("no counter streams selected".into()));
        }
        let mut units = BTreeMap::new();
        for (id, _) in &streams {
            if let Entry::Vacant(slot) = units.entry(id.domain) {
                let unit = backend.energy_unit(id.domain)?;
                config.validate(unit)?;
                slot.insert(unit);
            }
        }
        Ok(Recorder {
            backend,
            streams,
            units,
            period_ns: config.period.as_nanos() as u64,
            last_ns: None,
            late_intervals: 0,
            error: None,
        })
    }

    /// Read every stream at `at_ns`. Timestamps are forced strictly
    /// increasing.
    fn sample(&mut self, at_ns: u64) {
        if self.error.is_some() {
            return;
        }
        let at_ns = match self.last_ns {
            Some(last) if at_ns <= last => last + 1,
            _ => at_ns,
        };
        if let Some(last) = self.last_ns {
            if at_ns - last > 2 * self.period_ns {
                self.late_intervals += 1;
                warn!("sampling interval of {} ms exceeds twice the period", (at_ns - last) / 1_000_000);
            }
        }
        let at = Duration::from_nanos(at_ns);
        for (id, samples) in &mut self.streams {
            match self.backend.read(CounterAddress::energy(*id), at) {
                Ok(raw) => samples.push(EnergySample::new(at_ns, *id, mask_register(raw))),
                Err(e) => {
                    self.error = Some(e);
                    return;
                }
            }
        }
        self.last_ns = Some(at_ns);
    }

    fn finish(self, start_ns: u64) -> Result<(SessionResult, Box<dyn CounterBackend>), SamplerError> {
        if let Some(e) = self.error {
            return Err(e.into());
        }
        let result = SessionResult {
            streams: self.streams.into_iter().collect(),
            units: self.units,
            start_ns,
            end_ns: self.last_ns.unwrap_or(start_ns),
            late_intervals: self.late_intervals,
        };
        Ok((result, self.backend))
    }
}

struct StopSignal {
    stopped: Mutex<bool>,
    wake: Condvar,
}

struct Threaded {
    signal: Arc<StopSignal>,
    handle: JoinHandle<Recorder>,
    origin: Instant,
}

struct Virtual {
    recorder: Recorder,
    now_ns: u64,
}

enum State {
    Threaded(Threaded),
    Virtual(Virtual),
    Stopped,
}

/// An active measurement session.
pub struct Session {
    state: State,
    recovered: Option<Box<dyn CounterBackend>>,
}

impl Session {
    /// Start sampling on a background thread against the monotonic clock.
    pub fn start(config: &SessionConfig, backend: Box<dyn CounterBackend>) -> Result<Self, SamplerError> {
        let mut recorder = Recorder::open(config, backend)?;
        let origin = Instant::now();
        recorder.sample(0);
        let signal = Arc::new(StopSignal { stopped: Mutex::new(false), wake: Condvar::new() });
        let thread_signal = Arc::clone(&signal);
        let period = config.period;
        let handle = std::thread::Builder::new()
            .name("joulemeter-sampler".into())
            .spawn(move || sampling_loop(recorder, &thread_signal, origin, period))
            .map_err(|e| SamplerError::Config(format!("cannot spawn sampling thread: {e}")))?;
        Ok(Session { state: State::Threaded(Threaded { signal, handle, origin }), recovered: None })
    }

    /// Start a session on a virtual clock at time zero. Time moves only
    /// through [`Session::advance`].
    pub fn start_virtual(config: &SessionConfig, backend: Box<dyn CounterBackend>) -> Result<Self, SamplerError> {
        let mut recorder = Recorder::open(config, backend)?;
        recorder.sample(0);
        Ok(Session { state: State::Virtual(Virtual { recorder, now_ns: 0 }), recovered: None })
    }

    /// Move a virtual session's clock forward, sampling at every grid point
    /// passed on the way.
    pub fn advance(&mut self, by: Duration) -> Result<(), SamplerError> {
        let State::Virtual(v) = &mut self.state else {
            return Err(match self.state {
                State::Stopped => SamplerError::AlreadyStopped,
                _ => SamplerError::WrongClock("virtual"),
            });
        };
        let target = v.now_ns + by.as_nanos() as u64;
        let period = v.recorder.period_ns;
        let mut next = (v.now_ns / period + 1) * period;
        while next <= target {
            v.recorder.sample(next);
            next += period;
        }
        v.now_ns = target;
        Ok(())
    }

    /// Take the final sample and end the session.
    pub fn stop(&mut self) -> Result<SessionResult, SamplerError> {
        let (mut recorder, stop_ns) = match std::mem::replace(&mut self.state, State::Stopped) {
            State::Stopped => return Err(SamplerError::AlreadyStopped),
            State::Threaded(t) => {
                *t.signal.stopped.lock().unwrap() = true;
                t.signal.wake.notify_all();
                let recorder = t.handle.join().map_err(|_| SamplerError::ThreadPanicked)?;
                (recorder, t.origin.elapsed().as_nanos() as u64)
            }
            State::Virtual(v) => (v.recorder, v.now_ns),
        };
        let needs_final =
            recorder.last_ns.is_none_or(|last| last < stop_ns) || recorder.streams.iter().any(|(_, s)| s.len() < 2);
        if needs_final {
            recorder.sample(stop_ns);
        }
        let (result, backend) = recorder.finish(0)?;
        self.recovered = Some(backend);
        Ok(result)
    }

    /// Hand back the backend after [`Session::stop`].
    pub fn into_backend(self) -> Option<Box<dyn CounterBackend>> {
        self.recovered
    }
}

fn sampling_loop(mut recorder: Recorder, signal: &StopSignal, origin: Instant, period: Duration) -> Recorder {
    let period_ns = period.as_nanos() as u64;
    let mut next_ns = period_ns;
    let mut stopped = signal.stopped.lock().unwrap();
    loop {
        let now = origin.elapsed().as_nanos() as u64;
        if *stopped {
            break;
        }
        if now < next_ns {
            let wait = Duration::from_nanos(next_ns - now);
            stopped = signal.wake.wait_timeout(stopped, wait).unwrap().0;
            continue;
        }
        drop(stopped);
        recorder.sample(now);
        // Late wakeups sample immediately and resume on the next grid point.
        next_ns = (now / period_ns + 1) * period_ns;
        stopped = signal.stopped.lock().unwrap();
    }
    recorder
}
