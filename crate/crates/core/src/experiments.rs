//! End-to-end runs: scenario -> geometric solver -> samples -> hybrid belief.
//!
//! `run_trace` records the maximum retained probability per step under each
//! normalization. `run_runtime_sweep` times the normalization work as the
//! number of objects or classes grows.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::{HybridBelief, HybridConfig, QueryMode, SamplePolicy};
use crate::error::{Error, Result};
use crate::oracle::{self, MAX_ENUMERATED_HYPOTHESES};
use crate::priors::hypothesis_count_within;
use crate::scenario::{generate, Placement, Scenario, ScenarioOptions};
use crate::slam::{draw_samples, FactorGraph, SolverConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CSV_HEADER: &str = "step,mode,max_prob,pruned_mass_bound,pruned_mass_exact,wall_ns";
pub const SWEEP_CSV_HEADER: &str = "axis,size,mode,mean_ns,trials";

/// Error from a run, tagged with the step at which it happened.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("step {step}: {source}")]
pub struct StepError {
    pub step: usize,
    #[source]
    pub source: Error,
}

impl StepError {
    /// Solver failures are numerical; everything else is configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.source,
            Error::NonConvergence { .. } | Error::SingularHessian | Error::DegeneratePoint { .. }
        )
    }
}

/// Wall-clock timer. `wasm32-unknown-unknown` has no clock in `std`, so
/// timings read zero there.
struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn elapsed_ns(&self) -> u128 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_nanos();
        #[cfg(target_arch = "wasm32")]
        0
    }
}

/// Mixes a base seed with stream indices.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOptions {
    pub n_samples: usize,
    /// Number of steps to run; `None` runs the whole trajectory.
    pub steps: Option<usize>,
    pub q1: f64,
    pub q2: f64,
    pub modes: Vec<QueryMode>,
    pub sample_policy: SamplePolicy,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            n_samples: 100,
            steps: None,
            q1: 2.0,
            q2: 2.0,
            modes: vec![QueryMode::Naive, QueryMode::ExactIndependent, QueryMode::Bound],
            sample_policy: SamplePolicy::Refresh,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub mode: String,
    pub max_prob: f64,
    pub pruned_mass_bound: f64,
    pub pruned_mass_exact: Option<f64>,
    pub wall_ns: u64,
}

fn mode_label(mode: QueryMode) -> &'static str {
    match mode {
        QueryMode::ExactIndependent => "exact",
        other => other.as_str(),
    }
}

#[derive(Debug, Clone)]
pub struct TraceRun {
    pub records: Vec<TraceRecord>,
    /// Final geometric estimate of every pose.
    pub final_poses: Vec<crate::se2::Pose2>,
    pub final_belief: HybridBelief,
}

impl TraceRun {
    pub fn to_csv(&self) -> String {
        trace_csv(&self.records)
    }

    pub fn for_mode<'a>(&'a self, mode: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.mode == mode)
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trace_csv(records: &[TraceRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let exact = r.pruned_mass_exact.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            r.mode,
            fmt_f64(r.max_prob),
            fmt_f64(r.pruned_mass_bound),
            exact,
            r.wall_ns
        );
    }
    out
}

fn enumerable(belief: &HybridBelief) -> bool {
    hypothesis_count_within(belief.n_objects(), belief.n_classes(), MAX_ENUMERATED_HYPOTHESES).is_some()
}

/// Resolves the requested exact mode for the prior at hand: the
/// independent normalizer when it applies, enumeration otherwise.
fn resolve(mode: QueryMode, belief: &HybridBelief) -> Result<QueryMode> {
    match mode {
        QueryMode::ExactIndependent if !belief.prior().is_independent() => {
            if enumerable(belief) {
                Ok(QueryMode::Oracle)
            } else {
                Err(Error::InvalidConfig(
                    "exact mode needs an independent prior or an enumerable hypothesis space".into(),
                ))
            }
        }
        QueryMode::Oracle if !enumerable(belief) => Err(Error::TooManyHypotheses {
            count: crate::priors::hypothesis_count(belief.n_objects(), belief.n_classes()),
            limit: MAX_ENUMERATED_HYPOTHESES,
        }),
        m => Ok(m),
    }
}

fn exact_pruned_mass(belief: &HybridBelief) -> Result<Option<f64>> {
    let log_total = if belief.prior().is_independent() {
        belief.exact_log_normalizer_independent()?
    } else if enumerable(belief) {
        oracle::log_normalizer(belief.prior(), &belief.psi_view())?
    } else {
        return Ok(None);
    };
    Ok(Some((1.0 - (belief.log_retained_mass() - log_total).exp()).clamp(0.0, 1.0)))
}

/// Runs the full pipeline over a scenario.
pub fn run_trace(scenario: &Scenario, opts: &TraceOptions) -> std::result::Result<TraceRun, StepError> {
    let at = |step: usize| move |source: Error| StepError { step, source };
    scenario.validate().map_err(at(0))?;
    let steps = opts.steps.unwrap_or(scenario.n_steps());
    if steps == 0 || steps > scenario.n_steps() {
        return Err(at(0)(Error::InvalidConfig(format!(
            "steps must be in 1..={} (got {steps})",
            scenario.n_steps()
        ))));
    }
    if opts.modes.is_empty() {
        return Err(at(0)(Error::InvalidConfig("no modes requested".into())));
    }
    let config = HybridConfig {
        q1: opts.q1,
        q2: opts.q2,
        n_retained: scenario.retained.len().max(1),
        n_samples: opts.n_samples,
        sample_policy: opts.sample_policy,
    };
    let params = scenario.semantic_params().map_err(at(0))?;
    let mut belief = HybridBelief::new(scenario.prior.clone(), params, config, scenario.retained.clone()).map_err(at(0))?;
    let modes: Vec<(QueryMode, QueryMode)> = opts
        .modes
        .iter()
        .map(|&m| resolve(m, &belief).map(|r| (m, r)))
        .collect::<Result<_>>()
        .map_err(at(0))?;

    let mut meas_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 1, 0));
    let motion = scenario.noise.motion_model();
    let headings = scenario.object_headings();
    let mut graph = FactorGraph::new(scenario.waypoints[0], scenario.noise.prior_matrix(), SolverConfig::default()).map_err(at(0))?;
    let mut records = Vec::with_capacity(steps * modes.len());

    for t in 0..steps {
        let meas = scenario.step(t, &mut meas_rng, opts.noise_scale).map_err(at(t))?;
        if let Some(odo) = meas.odometry {
            graph.add_odometry(odo, &motion).map_err(at(t))?;
        }
        for &(id, b) in &meas.bearings {
            graph.add_bearing(t, id, b, scenario.noise.bearing_var).map_err(at(t))?;
        }
        let geo = graph.solve().map_err(at(t))?;
        let samples = draw_samples(&geo, opts.n_samples, derive_seed(opts.seed, 2, t as u64), &headings).map_err(at(t))?;
        belief.set_samples(samples).map_err(at(t))?;

        let batch = belief.evaluate_observations(t, &meas.semantics).map_err(at(t))?;
        let start = Stopwatch::start();
        belief.apply_batch(batch).map_err(at(t))?;
        let apply_ns = start.elapsed_ns() as u64;

        let pruned_mass_bound = belief.pruned_mass_upper_bound();
        let pruned_mass_exact = exact_pruned_mass(&belief).map_err(at(t))?;
        for &(requested, resolved) in &modes {
            let start = Stopwatch::start();
            let posterior = belief.posterior(resolved).map_err(at(t))?;
            let wall_ns = apply_ns + start.elapsed_ns() as u64;
            let max_prob = posterior.max().map(|m| m.1).unwrap_or(0.0).clamp(0.0, 1.0);
            records.push(TraceRecord {
                step: t,
                mode: mode_label(requested).to_string(),
                max_prob,
                pruned_mass_bound,
                pruned_mass_exact,
                wall_ns,
            });
        }
    }
    let final_poses = (0..graph.n_poses()).map(|t| graph.pose_estimate(t).unwrap()).collect();
    Ok(TraceRun {
        records,
        final_poses,
        final_belief: belief,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Objects,
    Classes,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" | "N" | "objects" => Ok(SweepAxis::Objects),
            "m" | "M" | "classes" => Ok(SweepAxis::Classes),
            other => Err(Error::InvalidConfig(format!("unknown sweep axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub axis: SweepAxis,
    pub sizes: Vec<usize>,
    /// Size of the axis that is held fixed.
    pub fixed: usize,
    pub trials: usize,
    pub steps: usize,
    pub n_samples: usize,
    pub n_retained: usize,
    pub q1: f64,
    pub q2: f64,
    pub modes: Vec<QueryMode>,
    /// Oracle mode only runs while `M^N` stays within this many hypotheses.
    pub oracle_budget: usize,
    pub seed: u64,
}

impl SweepOptions {
    /// `M = 2`, `N = 2..=12`.
    pub fn objects_default() -> Self {
        Self {
            axis: SweepAxis::Objects,
            sizes: (2..=12).collect(),
            fixed: 2,
            trials: 100,
            steps: 1,
            n_samples: 100,
            n_retained: 8,
            q1: 2.0,
            q2: 2.0,
            modes: vec![QueryMode::Naive, QueryMode::ExactIndependent, QueryMode::Bound, QueryMode::Oracle],
            oracle_budget: 1 << 15,
            seed: 0,
        }
    }

    /// `N = 3`, `M = 2..=64`.
    pub fn classes_default() -> Self {
        Self {
            axis: SweepAxis::Classes,
            sizes: vec![2, 4, 8, 16, 32, 64],
            fixed: 3,
            ..Self::objects_default()
        }
    }

    fn shape(&self, size: usize) -> (usize, usize) {
        match self.axis {
            SweepAxis::Objects => (size, self.fixed),
            SweepAxis::Classes => (self.fixed, size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub size: usize,
    pub mode: String,
    pub mean_ns: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFit {
    pub mode: String,
    /// `exp` of the slope of `ln t` against size.
    pub exponential_base: f64,
    /// Slope of `ln t` against `ln size`.
    pub polynomial_degree: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub axis: SweepAxis,
    pub fixed: usize,
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub fits: Vec<ModeFit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: SweepSummary,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let axis = match r.axis {
                SweepAxis::Objects => "objects",
                SweepAxis::Classes => "classes",
            };
            let _ = writeln!(out, "{axis},{},{},{},{}", r.size, r.mode, fmt_f64(r.mean_ns), r.trials);
        }
        out
    }

    pub fn fit(&self, mode: &str) -> Option<&ModeFit> {
        self.summary.fits.iter().find(|f| f.mode == mode)
    }
}

/// Ordinary least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

fn build_trial(opts: &SweepOptions, n: usize, m: usize, seed: u64) -> Result<(Scenario, HybridConfig)> {
    let scenario = generate(&ScenarioOptions {
        n_objects: n,
        n_classes: m,
        seed,
        placement: Placement::In,
        dependent_prior: false,
        n_retained: opts.n_retained,
        ..Default::default()
    })?;
    let config = HybridConfig {
        q1: opts.q1,
        q2: opts.q2,
        n_retained: scenario.retained.len(),
        n_samples: opts.n_samples,
        sample_policy: SamplePolicy::Refresh,
    };
    Ok((scenario, config))
}

/// Runs one trial and adds the per-step time of each mode to `totals`.
/// Returns the number of steps timed.
fn time_trial(opts: &SweepOptions, modes: &[QueryMode], n: usize, m: usize, seed: u64, totals: &mut [f64]) -> Result<usize> {
    let (scenario, config) = build_trial(opts, n, m, seed)?;
    let mut belief = HybridBelief::new(scenario.prior.clone(), scenario.semantic_params()?, config, scenario.retained.clone())?;
    let mut graph = FactorGraph::new(scenario.waypoints[0], scenario.noise.prior_matrix(), SolverConfig::default())?;
    let motion = scenario.noise.motion_model();
    let headings = scenario.object_headings();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0));
    let steps = opts.steps.min(scenario.n_steps());
    for t in 0..steps {
        let meas = scenario.step(t, &mut rng, 1.0)?;
        if let Some(odo) = meas.odometry {
            graph.add_odometry(odo, &motion)?;
        }
        for &(id, b) in &meas.bearings {
            graph.add_bearing(t, id, b, scenario.noise.bearing_var)?;
        }
        let geo = graph.solve()?;
        belief.set_samples(draw_samples(&geo, opts.n_samples, derive_seed(seed, 2, t as u64), &headings)?)?;
        let batch = belief.evaluate_observations(t, &meas.semantics)?;

        // The accumulator update is shared by the sampled modes; the oracle
        // only needs the psi table, which is updated by the same call.
        let start = Stopwatch::start();
        belief.apply_batch(batch)?;
        let apply_ns = start.elapsed_ns() as f64;
        for (i, &mode) in modes.iter().enumerate() {
            let start = Stopwatch::start();
            let v = belief.log_normalizer(mode)?;
            std::hint::black_box(v);
            let elapsed = start.elapsed_ns() as f64;
            totals[i] += if mode == QueryMode::Oracle { elapsed } else { elapsed + apply_ns };
        }
    }
    Ok(steps)
}

/// Mean per-step normalization time for every size and mode.
pub fn run_runtime_sweep(opts: &SweepOptions) -> Result<SweepResult> {
    if opts.trials == 0 || opts.steps == 0 || opts.sizes.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one trial, step and size".into()));
    }
    let mut rows = Vec::new();
    for &size in &opts.sizes {
        let (n, m) = opts.shape(size);
        let modes: Vec<QueryMode> = opts
            .modes
            .iter()
            .copied()
            .filter(|&mode| mode != QueryMode::Oracle || hypothesis_count_within(n, m, opts.oracle_budget).is_some())
            .collect();
        let mut totals = vec![0.0; modes.len()];
        // Warm-up trial, not recorded.
        time_trial(opts, &modes, n, m, derive_seed(opts.seed, size as u64, u64::MAX), &mut totals)?;
        totals.iter_mut().for_each(|t| *t = 0.0);
        let mut timed_steps = 0;
        for trial in 0..opts.trials {
            timed_steps += time_trial(opts, &modes, n, m, derive_seed(opts.seed, size as u64, trial as u64), &mut totals)?;
        }
        let per = timed_steps as f64;
        for (mode, total) in modes.iter().zip(totals) {
            rows.push(SweepRow {
                axis: opts.axis,
                size,
                mode: mode_label(*mode).to_string(),
                mean_ns: total / per,
                trials: opts.trials,
            });
        }
    }

    let mut fits = Vec::new();
    for mode in &opts.modes {
        let label = mode_label(*mode);
        let pts: Vec<&SweepRow> = rows.iter().filter(|r| r.mode == label && r.mean_ns > 0.0).collect();
        if pts.len() < 2 {
            continue;
        }
        let size: Vec<f64> = pts.iter().map(|r| r.size as f64).collect();
        let ln_size: Vec<f64> = size.iter().map(|s| s.ln()).collect();
        let ln_t: Vec<f64> = pts.iter().map(|r| r.mean_ns.ln()).collect();
        fits.push(ModeFit {
            mode: label.to_string(),
            exponential_base: ls_slope(&size, &ln_t).exp(),
            polynomial_degree: ls_slope(&ln_size, &ln_t),
            points: pts.len(),
        });
    }
    Ok(SweepResult {
        rows,
        summary: SweepSummary {
            axis: opts.axis,
            fixed: opts.fixed,
            sizes: opts.sizes.clone(),
            trials: opts.trials,
            fits,
        },
    })
}
