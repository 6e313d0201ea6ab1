//! Instrumented SGD.
//!
//! Every iteration computes the mini-batch gradient with one batched pass and
//! updates the parameters with it. On tracked iterations the per-sample
//! gradients and, if needed, a curvature probe are built once and shared by all
//! configured instruments. Alpha and the update size of event `t` need the
//! observations of iteration `t + 1`, so an event is emitted one iteration late.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    batch_gradient, gradient_and_observations, Batch, BatchCurvature, BatchGradient,
    BatchObservables, DiagMode, Model, ParamVector,
};
use crate::error::{Error, Result};
use crate::log::TrackEvent;
use crate::problems::{BatchSampler, Problem};
use crate::quantities::{
    self, cabs_batch_size, early_stopping_criterion, fit_alpha,
    grad_hist_1d, grad_hist_2d, grad_norm, gradient_tests, hess_max_ev, hess_trace,
    layer_grad_hist_1d, layer_grad_hist_2d, mean_gsnr, tic, PowerIteration, QuantityValue,
    Reading, StepTransition, TicVariant,
};

/// One logged quantity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Instrument {
    Loss,
    LearningRate,
    Alpha,
    Distance,
    UpdateSize,
    GradNorm,
    NormTest,
    InnerTest,
    OrthoTest,
    GradHist1d,
    TICDiag,
    HessTrace,
    EarlyStopping,
    CABS,
    MeanGSNR,
    TICTrace,
    HessMaxEV,
    GradHist2d,
}

impl Instrument {
    pub const ALL: [Instrument; 18] = [
        Instrument::Loss,
        Instrument::LearningRate,
        Instrument::Alpha,
        Instrument::Distance,
        Instrument::UpdateSize,
        Instrument::GradNorm,
        Instrument::NormTest,
        Instrument::InnerTest,
        Instrument::OrthoTest,
        Instrument::GradHist1d,
        Instrument::TICDiag,
        Instrument::HessTrace,
        Instrument::EarlyStopping,
        Instrument::CABS,
        Instrument::MeanGSNR,
        Instrument::TICTrace,
        Instrument::HessMaxEV,
        Instrument::GradHist2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Instrument::Loss => "Loss",
            Instrument::LearningRate => "LearningRate",
            Instrument::Alpha => "Alpha",
            Instrument::Distance => "Distance",
            Instrument::UpdateSize => "UpdateSize",
            Instrument::GradNorm => "GradNorm",
            Instrument::NormTest => "NormTest",
            Instrument::InnerTest => "InnerTest",
            Instrument::OrthoTest => "OrthoTest",
            Instrument::GradHist1d => "GradHist1d",
            Instrument::TICDiag => "TICDiag",
            Instrument::HessTrace => "HessTrace",
            Instrument::EarlyStopping => "EarlyStopping",
            Instrument::CABS => "CABS",
            Instrument::MeanGSNR => "MeanGSNR",
            Instrument::TICTrace => "TICTrace",
            Instrument::HessMaxEV => "HessMaxEV",
            Instrument::GradHist2d => "GradHist2d",
        }
    }

    fn needs_samples(self) -> bool {
        !matches!(
            self,
            Instrument::Loss
                | Instrument::LearningRate
                | Instrument::Distance
                | Instrument::UpdateSize
                | Instrument::GradNorm
                | Instrument::HessTrace
                | Instrument::HessMaxEV
        )
    }

    fn needs_curvature(self) -> bool {
        matches!(
            self,
            Instrument::TICDiag
                | Instrument::TICTrace
                | Instrument::HessTrace
                | Instrument::HessMaxEV
        )
    }
}

impl fmt::Display for Instrument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Instrument {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Instrument::ALL
            .into_iter()
            .find(|i| i.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown instrument {s:?}")))
    }
}

/// Nested instrument sets ordered by cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Economy,
    Business,
    Full,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Economy, Tier::Business, Tier::Full];

    /// Instruments of this tier; loss and learning rate are always included.
    pub fn instruments(self) -> BTreeSet<Instrument> {
        use Instrument::*;
        let mut set: BTreeSet<Instrument> = [
            Loss,
            LearningRate,
            Alpha,
            Distance,
            UpdateSize,
            GradNorm,
            NormTest,
            InnerTest,
            OrthoTest,
            GradHist1d,
        ]
        .into();
        if self >= Tier::Business {
            set.extend([TICDiag, HessTrace, EarlyStopping, CABS, MeanGSNR, TICTrace]);
        }
        if self == Tier::Full {
            set.extend([HessMaxEV, GradHist2d]);
        }
        set
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Economy => "economy",
            Tier::Business => "business",
            Tier::Full => "full",
        }
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tier::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown tier {s:?}; expected economy, business or full"
                ))
            })
    }
}

/// When tracking events fire.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Multiples of `k`.
    EveryK(u64),
    /// `⌊base^m⌋` for `m = 0, 1, 2, …`, plus iteration 0.
    LogSpaced(f64),
}

impl Schedule {
    pub fn validate(self) -> Result<()> {
        match self {
            Schedule::EveryK(0) => Err(Error::InvalidConfig("interval must be at least 1".into())),
            Schedule::LogSpaced(b) if !(b > 1.0 && b.is_finite()) => Err(Error::InvalidConfig(
                format!("log-spaced base must be a finite number above 1, got {b}"),
            )),
            _ => Ok(()),
        }
    }
}

pub fn tracking_schedule(schedule: Schedule, iteration: u64) -> Result<bool> {
    schedule.validate()?;
    Ok(match schedule {
        Schedule::EveryK(k) => iteration % k == 0,
        Schedule::LogSpaced(base) => {
            if iteration <= 1 {
                return Ok(true);
            }
            let mut m = 0;
            loop {
                let v = base.powi(m).floor();
                if v >= iteration as f64 || !v.is_finite() {
                    break v == iteration as f64;
                }
                m += 1;
            }
        }
    })
}

/// What to track and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingConfig {
    pub instruments: BTreeSet<Instrument>,
    pub schedule: Schedule,
    pub curvature: DiagMode,
    pub power: PowerIteration,
    pub hist_range: (f64, f64),
    pub hist_bins: usize,
    pub hist2d_bins: (usize, usize),
    /// Also log one histogram per layer, named e.g. `GradHist1d.dense0`.
    pub layer_histograms: bool,
}

impl TrackingConfig {
    pub fn new(instruments: BTreeSet<Instrument>, schedule: Schedule) -> Self {
        Self {
            instruments,
            schedule,
            curvature: DiagMode::default(),
            power: PowerIteration::default(),
            hist_range: quantities::DEFAULT_RANGE,
            hist_bins: quantities::DEFAULT_BINS,
            hist2d_bins: (quantities::DEFAULT_BINS, quantities::DEFAULT_BINS),
            layer_histograms: false,
        }
    }

    pub fn tier(tier: Tier, schedule: Schedule) -> Self {
        Self::new(tier.instruments(), schedule)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if let DiagMode::MonteCarlo { samples: 0, .. } = self.curvature {
            return Err(Error::InvalidConfig("Monte-Carlo diagonal needs at least one sample".into()));
        }
        Ok(())
    }

    fn has(&self, i: Instrument) -> bool {
        self.instruments.contains(&i)
    }

    fn needs_samples(&self) -> bool {
        self.instruments.iter().any(|i| i.needs_samples())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Seeds the batch order and the curvature probes.
    pub seed: u64,
    /// Stamp events with elapsed wall time; otherwise `time_s` is 0 and logs are
    /// byte-reproducible.
    pub wall_clock: bool,
}

impl RunSettings {
    pub fn for_problem(problem: &Problem, steps: u64, seed: u64) -> Self {
        Self {
            steps,
            lr: problem.meta.default_lr,
            batch_size: problem.meta.default_batch_size,
            seed,
            wall_clock: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timing {
    /// Wall time of every iteration, tracking included.
    pub step_seconds: Vec<f64>,
    /// Share of each iteration spent on instruments.
    pub tracking_seconds: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub events: Vec<TrackEvent>,
    pub final_params: ParamVector,
    /// Parameters before every update and after the last one (`steps + 1` entries).
    pub trajectory: Vec<ParamVector>,
    pub timing: Timing,
}

impl RunResult {
    pub fn final_loss(&self) -> Option<f64> {
        self.events.iter().rev().find_map(|e| e.scalar("Loss"))
    }
}

/// `θ − η g`.
pub fn sgd_step(params: &ParamVector, grad: &[f64], lr: f64) -> Result<ParamVector> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be positive and finite, got {lr}"
        )));
    }
    if grad.len() != params.dim() {
        return Err(Error::Dimension(format!(
            "gradient of length {} for {} parameters",
            grad.len(),
            params.dim()
        )));
    }
    if let Some(j) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("gradient entry {j} is {}", grad[j])));
    }
    let values = params
        .values()
        .iter()
        .zip(grad)
        .map(|(p, g)| p - lr * g)
        .collect();
    params.with_values(values)
}

/// Everything an event's instruments may read.
pub struct EventContext<'a> {
    pub iteration: u64,
    pub model: &'a dyn Model,
    pub theta: &'a ParamVector,
    pub theta_init: &'a ParamVector,
    pub batch: &'a Batch,
    pub gradient: &'a BatchGradient,
    /// Per-sample observations; required by the sample-based instruments.
    pub observations: Option<&'a BatchObservables>,
    pub lr: f64,
    pub seed: u64,
}

fn undefined() -> Reading {
    Reading::scalar(f64::NAN).flag(quantities::flags::UNDEFINED, true)
}

/// Quantities that are undefined at a point (zero gradient, tiny batch, …) are
/// logged as NaN with the `undefined` flag rather than aborting the run.
fn soft<T>(r: Result<T>, f: impl FnOnce(T) -> Reading) -> Result<Reading> {
    match r {
        Ok(v) => Ok(f(v)),
        Err(
            Error::ZeroGradient(_)
            | Error::BatchTooSmall(..)
            | Error::DegenerateStep
            | Error::NonPositiveLoss(_),
        ) => Ok(undefined()),
        Err(e) => Err(e),
    }
}

/// Readings of every configured instrument that depends on a single iteration.
///
/// Alpha and UpdateSize need the following iteration and are added by the run loop.
pub fn evaluate_instruments(
    ctx: &EventContext<'_>,
    config: &TrackingConfig,
) -> Result<TrackEvent> {
    use Instrument::*;
    let mut event = TrackEvent::new(ctx.iteration, 0.0);
    let obs = || {
        ctx.observations.ok_or_else(|| {
            Error::InvalidConfig("per-sample observations are required for this instrument".into())
        })
    };
    if config.has(Loss) {
        event.insert("Loss", Reading::scalar(ctx.gradient.batch_loss));
    }
    if config.has(LearningRate) {
        event.insert("LearningRate", Reading::scalar(ctx.lr));
    }
    if config.has(Distance) {
        let d = quantities::distance(ctx.theta_init.values(), ctx.theta.values());
        event.insert("Distance", Reading::scalar(d));
    }
    if config.has(GradNorm) {
        let g = match ctx.observations {
            Some(o) => grad_norm(o),
            None => quantities::distance(&ctx.gradient.batch_grad, &vec![0.0; ctx.theta.dim()]),
        };
        event.insert("GradNorm", Reading::scalar(g));
    }
    if config.has(NormTest) || config.has(InnerTest) || config.has(OrthoTest) {
        let r = match gradient_tests(obs()?) {
            Ok(v) => Some(v),
            Err(Error::ZeroGradient(_) | Error::BatchTooSmall(..)) => None,
            Err(e) => return Err(e),
        };
        let pick = |f: fn(&quantities::GradientTestResult) -> f64| {
            r.as_ref().map_or_else(undefined, |v| Reading::scalar(f(v)))
        };
        if config.has(NormTest) {
            event.insert("NormTest", pick(|v| v.theta_norm));
        }
        if config.has(InnerTest) {
            event.insert("InnerTest", pick(|v| v.theta_inner));
        }
        if config.has(OrthoTest) {
            event.insert("OrthoTest", pick(|v| v.nu_ortho));
        }
    }
    if config.has(GradHist1d) {
        let o = obs()?;
        let h = grad_hist_1d(o, config.hist_range, config.hist_bins)?;
        event.insert("GradHist1d", Reading::new(QuantityValue::Hist1d(h)));
        if config.layer_histograms {
            for (i, layer) in o.layout.layers().iter().enumerate() {
                let h = layer_grad_hist_1d(o, i, config.hist_range, config.hist_bins)?;
                event.insert(
                    format!("GradHist1d.{}", layer.name),
                    Reading::new(QuantityValue::Hist1d(h)),
                );
            }
        }
    }
    if config.has(GradHist2d) {
        let o = obs()?;
        let h = grad_hist_2d(ctx.theta, o, None, config.hist_range, config.hist2d_bins)?;
        event.insert("GradHist2d", Reading::new(QuantityValue::Hist2d(h)));
        if config.layer_histograms {
            for (i, layer) in o.layout.layers().iter().enumerate() {
                let h = layer_grad_hist_2d(
                    ctx.theta,
                    o,
                    i,
                    None,
                    config.hist_range,
                    config.hist2d_bins,
                )?;
                event.insert(
                    format!("GradHist2d.{}", layer.name),
                    Reading::new(QuantityValue::Hist2d(h)),
                );
            }
        }
    }
    if config.has(EarlyStopping) {
        event.insert("EarlyStopping", soft(early_stopping_criterion(obs()?), Reading::from)?);
    }
    if config.has(CABS) {
        event.insert("CABS", soft(cabs_batch_size(obs()?, ctx.lr), Reading::scalar)?);
    }
    if config.has(MeanGSNR) {
        event.insert("MeanGSNR", soft(mean_gsnr(obs()?), Reading::from)?);
    }
    if config.instruments.iter().any(|i| i.needs_curvature()) {
        let probe = BatchCurvature::new(ctx.model, ctx.theta, ctx.batch, config.curvature)?;
        if config.has(HessTrace) {
            event.insert("HessTrace", Reading::scalar(hess_trace(&probe)?));
        }
        if config.has(TICDiag) {
            event.insert("TICDiag", tic(&probe, obs()?, TicVariant::Diag)?.into());
        }
        if config.has(TICTrace) {
            event.insert("TICTrace", tic(&probe, obs()?, TicVariant::Trace)?.into());
        }
        if config.has(HessMaxEV) {
            let cfg = PowerIteration {
                seed: config
                    .power
                    .seed
                    .wrapping_add(ctx.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
                    .wrapping_add(ctx.iteration),
                ..config.power
            };
            let e = hess_max_ev(&probe, &cfg)?;
            let reading = Reading::scalar(e.value)
                .flag(quantities::flags::NEGATIVE_DOMINANT, e.negative_dominant())
                .flag(quantities::flags::NOT_CONVERGED, !e.converged)
                .meta("iterations", e.iterations as f64);
            event.insert("HessMaxEV", reading);
        }
    }
    Ok(event)
}

/// Alpha of the transition out of the event's iteration.
pub fn alpha_reading(transition: &StepTransition<'_>) -> Result<Reading> {
    soft(fit_alpha(transition), |fit| {
        use quantities::flags::{CLAMPED, FALLBACK, REGULARIZED};
        Reading::scalar(fit.alpha)
            .flag(CLAMPED, fit.clamped)
            .flag(FALLBACK, fit.fallback)
            .flag(REGULARIZED, fit.regularized)
            .meta("raw", fit.raw_alpha)
    })
}

struct Pending {
    event: TrackEvent,
    theta: ParamVector,
    observations: Option<BatchObservables>,
}

/// One finished iteration of a [`Session`].
#[derive(Clone, Debug)]
pub struct StepRecord {
    /// Parameters at the start of the iteration.
    pub theta: ParamVector,
    /// Wall time of the iteration, tracking included.
    pub seconds: f64,
    /// Share of `seconds` spent on instruments.
    pub tracking_seconds: f64,
}

/// SGD run that advances one iteration at a time.
pub struct Session<'a> {
    problem: &'a Problem,
    config: Option<&'a TrackingConfig>,
    settings: &'a RunSettings,
    sampler: BatchSampler,
    theta_init: ParamVector,
    theta: ParamVector,
    pending: Option<Pending>,
    start: Instant,
    next: u64,
}

impl<'a> Session<'a> {
    pub fn new(
        problem: &'a Problem,
        config: Option<&'a TrackingConfig>,
        settings: &'a RunSettings,
    ) -> Result<Self> {
        if let Some(c) = config {
            c.validate()?;
        }
        if !(settings.lr > 0.0 && settings.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive and finite, got {}",
                settings.lr
            )));
        }
        Ok(Self {
            problem,
            config,
            settings,
            sampler: problem.sampler(settings.batch_size, settings.seed)?,
            theta_init: problem.init.clone(),
            theta: problem.init.clone(),
            pending: None,
            start: Instant::now(),
            next: 0,
        })
    }

    fn stamp(&self, event: &mut TrackEvent) {
        event.time_s = if self.settings.wall_clock {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        };
    }

    /// Runs the next iteration; `None` once all `steps + 1` iterations are done.
    pub fn step(&mut self, sink: &mut dyn FnMut(&TrackEvent) -> Result<()>) -> Result<Option<StepRecord>> {
        let t = self.next;
        if t > self.settings.steps {
            return Ok(None);
        }
        self.next += 1;
        let step_start = Instant::now();
        let model = self.problem.model.as_ref();
        let batch = self.problem.batch(&self.sampler.next_indices());
        let tracked = match self.config {
            Some(cfg) => tracking_schedule(cfg.schedule, t)?,
            None => false,
        };
        let needs_samples = self.config.is_some_and(|cfg| {
            (tracked && cfg.needs_samples()) || (self.pending.is_some() && cfg.has(Instrument::Alpha))
        });
        let (gradient, observations) = if needs_samples {
            let (g, obs) = gradient_and_observations(model, &self.theta, &batch)?;
            (g, Some(obs))
        } else {
            (batch_gradient(model, &self.theta, &batch)?, None)
        };
        let mut tracking = 0.0;

        if let Some(cfg) = self.config {
            let track_start = Instant::now();
            if let Some(mut p) = self.pending.take() {
                if cfg.has(Instrument::UpdateSize) {
                    let update = quantities::distance(p.theta.values(), self.theta.values());
                    p.event.insert("UpdateSize", Reading::scalar(update));
                }
                if let (true, Some(before), Some(after)) =
                    (cfg.has(Instrument::Alpha), &p.observations, &observations)
                {
                    let transition =
                        StepTransition::new(&p.theta, &self.theta, before, after, self.settings.lr)?;
                    p.event.insert("Alpha", alpha_reading(&transition)?);
                }
                self.stamp(&mut p.event);
                sink(&p.event)?;
            }
            if tracked {
                let ctx = EventContext {
                    iteration: t,
                    model,
                    theta: &self.theta,
                    theta_init: &self.theta_init,
                    batch: &batch,
                    gradient: &gradient,
                    observations: observations.as_ref(),
                    lr: self.settings.lr,
                    seed: self.settings.seed,
                };
                let event = evaluate_instruments(&ctx, cfg)?;
                self.pending = Some(Pending {
                    event,
                    theta: self.theta.clone(),
                    observations,
                });
            }
            tracking = track_start.elapsed().as_secs_f64();
        }

        let theta = self.theta.clone();
        if t < self.settings.steps {
            self.theta = sgd_step(&self.theta, &gradient.batch_grad, self.settings.lr)?;
        }
        Ok(Some(StepRecord {
            theta,
            seconds: step_start.elapsed().as_secs_f64(),
            tracking_seconds: tracking,
        }))
    }

    /// Emits the last pending event and returns the final parameters.
    pub fn finish(mut self, sink: &mut dyn FnMut(&TrackEvent) -> Result<()>) -> Result<ParamVector> {
        if let Some(mut p) = self.pending.take() {
            self.stamp(&mut p.event);
            sink(&p.event)?;
        }
        Ok(self.theta)
    }
}

/// Runs SGD, passing each finished event to `sink` as soon as it is complete.
pub fn run_experiment_with(
    problem: &Problem,
    config: Option<&TrackingConfig>,
    settings: &RunSettings,
    sink: &mut dyn FnMut(&TrackEvent) -> Result<()>,
) -> Result<(ParamVector, Vec<ParamVector>, Timing)> {
    let mut session = Session::new(problem, config, settings)?;
    let mut trajectory = Vec::with_capacity(settings.steps as usize + 1);
    let mut timing = Timing::default();
    while let Some(record) = session.step(sink)? {
        trajectory.push(record.theta);
        timing.step_seconds.push(record.seconds);
        timing.tracking_seconds.push(record.tracking_seconds);
    }
    Ok((session.finish(sink)?, trajectory, timing))
}

/// Runs SGD and collects all events.
pub fn run_experiment(
    problem: &Problem,
    config: Option<&TrackingConfig>,
    settings: &RunSettings,
) -> Result<RunResult> {
    let mut events = Vec::new();
    let (final_params, trajectory, timing) =
        run_experiment_with(problem, config, settings, &mut |e| {
            events.push(e.clone());
            Ok(())
        })?;
    Ok(RunResult {
        events,
        final_params,
        trajectory,
        timing,
    })
}

/// Minimum number of timed iterations; iteration 0 is warm-up and not timed.
pub const BENCH_ITERATIONS: u64 = 32;
/// The timed window spans this many tracking events of the sparsest case.
pub const BENCH_EVENTS: u64 = 4;
pub const MIN_REPEATS: usize = 3;

/// One benchmarked configuration.
#[derive(Clone, Debug)]
pub struct BenchCase {
    pub label: String,
    pub interval: Option<u64>,
    pub config: TrackingConfig,
}

impl BenchCase {
    pub fn tier(tier: Tier, interval: u64) -> Self {
        Self {
            label: tier.name().to_string(),
            interval: Some(interval),
            config: TrackingConfig::tier(tier, Schedule::EveryK(interval)),
        }
    }

    /// A single instrument (plus loss and learning rate) tracked at every step.
    pub fn instrument(instrument: Instrument) -> Self {
        let set = [Instrument::Loss, Instrument::LearningRate, instrument].into();
        Self {
            label: instrument.name().to_string(),
            interval: Some(1),
            config: TrackingConfig::new(set, Schedule::EveryK(1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub interval: Option<u64>,
    /// Mean seconds per timed iteration, per repeat.
    pub seconds_per_step: Vec<f64>,
    /// Ratio to the adjacent baseline runs, per repeat.
    pub ratios: Vec<f64>,
    /// Median of `ratios`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub problem: String,
    /// Median over cases of the paired baseline, per repeat.
    pub baseline_seconds_per_step: Vec<f64>,
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn ratio(&self, label: &str, interval: Option<u64>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.label == label && r.interval == interval)
            .map(|r| r.ratio)
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean seconds per timed iteration of untracked and tracked runs stepped alternately.
fn paired_means(
    problem: &Problem,
    config: &TrackingConfig,
    iterations: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    let settings = RunSettings::for_problem(problem, iterations, seed);
    let mut baseline = Session::new(problem, None, &settings)?;
    let mut tracked = Session::new(problem, Some(config), &settings)?;
    let mut discard = |_: &TrackEvent| Ok(());
    let (mut base_seconds, mut tracked_seconds) = (0.0, 0.0);
    for t in 0..=iterations {
        let b = baseline.step(&mut discard)?.expect("iteration within the run");
        let c = tracked.step(&mut discard)?.expect("iteration within the run");
        if t >= 1 {
            base_seconds += b.seconds;
            tracked_seconds += c.seconds;
        }
    }
    let n = iterations as f64;
    Ok((base_seconds / n, tracked_seconds / n))
}

/// Per-step cost of each case relative to untracked training.
///
/// All runs time the same window, long enough for [`BENCH_EVENTS`] events at the largest interval.
/// Each repeat uses its own seed. A case and its baseline advance in lock-step, one
/// iteration each in turn, so changes in machine speed affect both alike.
pub fn overhead_benchmark(problem: &Problem, cases: &[BenchCase], repeats: usize) -> Result<BenchTable> {
    if repeats < MIN_REPEATS {
        return Err(Error::InvalidConfig(format!(
            "the benchmark needs at least {MIN_REPEATS} repeats, got {repeats}"
        )));
    }
    let iterations = cases
        .iter()
        .filter_map(|c| c.interval)
        .map(|k| k * BENCH_EVENTS)
        .max()
        .unwrap_or(0)
        .max(BENCH_ITERATIONS);
    let mut baseline = Vec::with_capacity(repeats);
    let mut seconds = vec![Vec::with_capacity(repeats); cases.len()];
    let mut ratios = vec![Vec::with_capacity(repeats); cases.len()];
    for r in 0..repeats {
        let seed = r as u64;
        let mut bases = Vec::with_capacity(cases.len());
        for (i, case) in cases.iter().enumerate() {
            let (base, secs) = paired_means(problem, &case.config, iterations, seed)?;
            seconds[i].push(secs);
            ratios[i].push(secs / base);
            bases.push(base);
        }
        baseline.push(if bases.is_empty() { 0.0 } else { median(&bases) });
    }
    let rows = cases
        .iter()
        .zip(seconds)
        .zip(ratios)
        .map(|((case, secs), ratios)| BenchRow {
            label: case.label.clone(),
            interval: case.interval,
            ratio: median(&ratios),
            seconds_per_step: secs,
            ratios,
        })
        .collect();
    Ok(BenchTable {
        problem: problem.meta.name.clone(),
        baseline_seconds_per_step: baseline,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{anisotropic_quadratic, two_param_regression};

    #[test]
    fn schedules() {
        assert!((0..20).all(|i| tracking_schedule(Schedule::EveryK(1), i).unwrap()));
        let fired: Vec<u64> = (0..20)
            .filter(|&i| tracking_schedule(Schedule::LogSpaced(2.0), i).unwrap())
            .collect();
        assert_eq!(fired, vec![0, 1, 2, 4, 8, 16]);
        let count = (0..=512)
            .filter(|&i| tracking_schedule(Schedule::EveryK(64), i).unwrap())
            .count();
        assert_eq!(count, 9);
        assert!(tracking_schedule(Schedule::EveryK(0), 3).is_err());
        assert!(tracking_schedule(Schedule::LogSpaced(1.0), 3).is_err());
    }

    #[test]
    fn log_spacing_deduplicates() {
        let fired: Vec<u64> = (0..12)
            .filter(|&i| tracking_schedule(Schedule::LogSpaced(1.5), i).unwrap())
            .collect();
        assert_eq!(fired, vec![0, 1, 2, 3, 5, 7, 11]);
    }

    #[test]
    fn tiers_are_nested() {
        let e = Tier::Economy.instruments();
        let b = Tier::Business.instruments();
        let f = Tier::Full.instruments();
        assert!(e.is_subset(&b) && b.is_subset(&f));
        assert_eq!(f.len(), Instrument::ALL.len());
        assert!(!b.contains(&Instrument::HessMaxEV));
        assert!(e.contains(&Instrument::Alpha));
    }

    #[test]
    fn sgd_hand_steps() {
        let p = anisotropic_quadratic(0).unwrap().init;
        let next = sgd_step(&p, &[1.0, 2.0], 0.5).unwrap();
        assert_eq!(next.values(), &[0.5, 4.0]);
        assert!(sgd_step(&p, &[1.0, 2.0], 0.0).is_err());
        assert!(matches!(
            sgd_step(&p, &[f64::NAN, 2.0], 0.1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn zero_steps_gives_one_event() {
        let p = two_param_regression(0).unwrap();
        let cfg = TrackingConfig::tier(Tier::Full, Schedule::EveryK(1));
        let r = run_experiment(&p, Some(&cfg), &RunSettings::for_problem(&p, 0, 0)).unwrap();
        assert_eq!(r.events.len(), 1);
        assert!(r.events[0].quantities.get("Alpha").is_none());
        assert_eq!(r.events[0].scalar("Distance"), Some(0.0));
    }

    #[test]
    fn interval_counting() {
        let p = two_param_regression(0).unwrap();
        let cfg = TrackingConfig::tier(Tier::Economy, Schedule::EveryK(10));
        let mut s = RunSettings::for_problem(&p, 100, 0);
        s.batch_size = 100;
        let r = run_experiment(&p, Some(&cfg), &s).unwrap();
        let its: Vec<u64> = r.events.iter().map(|e| e.iteration).collect();
        assert_eq!(its, (0..=100).step_by(10).collect::<Vec<_>>());
        assert!(r.events[..10].iter().all(|e| e.quantities.contains_key("Alpha")));
    }

    #[test]
    fn benchmark_needs_three_repeats() {
        let p = two_param_regression(0).unwrap();
        assert!(overhead_benchmark(&p, &[], 1).is_err());
    }

    #[test]
    fn instrument_names_parse() {
        for i in Instrument::ALL {
            assert_eq!(i.name().parse::<Instrument>().unwrap(), i);
        }
        assert_eq!("business".parse::<Tier>().unwrap(), Tier::Business);
    }
}
