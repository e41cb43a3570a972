//! The hybrid belief over class hypotheses.
//!
//! State is kept per trajectory sample `s`:
//!
//! * `log psi[s][n][c]`: accumulated semantic log-likelihood of object `n`
//!   under class `c`.
//! * `log s_n[s][n] = ln sum_c psi^q2`, and `log S_all[s] = sum_n log s_n`,
//!   the q2-powered mass of every hypothesis at once.
//! * per retained hypothesis `C`: `log phi[s] = sum_n log psi[s][n][C_n]`.
//! * `log S_in[s] = ln sum_{C retained} phi^q2`.
//!
//! Together with `S0_all = sum_C P0^q1` and `S0_in` (retained only) these give
//! an upper bound on the unnormalized mass of every pruned hypothesis:
//! `U = (S0_all - S0_in)^(1/q1) * mean_s (S_all[s] - S_in[s])^(1/q2)`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logmath::{log_add_exp, log_mean_exp, log_sum_exp, NeumaierSum, StreamingLogSumExp};
use crate::oracle::{self, ObservationRecord, PsiView};
use crate::priors::{hypothesis_count_within, ClassAssignment, PriorModel};
use crate::semantic::{viewpoint_coeff, ObservationLogits, SemanticModelParams, SemanticObservation};
use crate::slam::TrajectorySample;

/// Below this fraction of remaining mass, removing a hypothesis from
/// `log S_in` by subtraction loses too many digits and the sum is rebuilt.
const REMOVAL_REBUILD_FRACTION: f64 = 1e-3;

/// Multiplicative safety margin on the pruned-mass bound.
const BOUND_INFLATION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Naive,
    ExactIndependent,
    Bound,
    Oracle,
}

impl QueryMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueryMode::Naive => "naive",
            QueryMode::ExactIndependent => "exact_independent",
            QueryMode::Bound => "bound",
            QueryMode::Oracle => "oracle",
        }
    }
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(QueryMode::Naive),
            "exact" | "exact_independent" => Ok(QueryMode::ExactIndependent),
            "bound" => Ok(QueryMode::Bound),
            "oracle" => Ok(QueryMode::Oracle),
            other => Err(Error::InvalidConfig(format!("unknown mode '{other}'"))),
        }
    }
}

/// How trajectory samples evolve across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplePolicy {
    /// Samples are kept; new poses and objects are appended from later draws.
    /// Ingest touches only the newly observed objects.
    Frozen,
    /// Every new draw replaces the samples and `psi` is rebuilt from the
    /// observation history.
    Refresh,
}

impl FromStr for SamplePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(SamplePolicy::Frozen),
            "refresh" => Ok(SamplePolicy::Refresh),
            other => Err(Error::InvalidConfig(format!("unknown sample policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub q1: f64,
    pub q2: f64,
    pub n_retained: usize,
    pub n_samples: usize,
    pub sample_policy: SamplePolicy,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            q1: 2.0,
            q2: 2.0,
            n_retained: 8,
            n_samples: 100,
            sample_policy: SamplePolicy::Refresh,
        }
    }
}

pub fn validate_exponents(q1: f64, q2: f64) -> Result<()> {
    if !(q1 >= 1.0 && q2 >= 1.0) || (1.0 / q1 + 1.0 / q2 - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "exponents must satisfy q1, q2 >= 1 and 1/q1 + 1/q2 = 1 (got {q1}, {q2})"
        )));
    }
    Ok(())
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        validate_exponents(self.q1, self.q2)?;
        if self.n_retained == 0 || self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_retained and n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Retained {
    assignment: ClassAssignment,
    log_prior: f64,
    /// `ln phi` per sample, at power one.
    log_phi: Vec<f64>,
}

/// Posterior over the retained hypotheses under one normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mode: QueryMode,
    /// `ln` of the normalizing mass that the weights were divided by.
    pub log_normalizer: f64,
    pub entries: Vec<(ClassAssignment, f64)>,
}

impl Posterior {
    /// Largest probability; ties go to the lexicographically smallest assignment.
    pub fn max(&self) -> Option<(&ClassAssignment, f64)> {
        self.entries
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|(c, p)| (c, *p))
    }

    pub fn get(&self, c: &ClassAssignment) -> Option<f64> {
        self.entries.iter().find(|e| &e.0 == c).map(|e| e.1)
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.1).collect::<NeumaierSum>().value()
    }
}

/// Semantic likelihoods for one step's observations, evaluated at every
/// sample but not yet folded into the accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingBatch {
    step: usize,
    records: Vec<ObservationRecord>,
    /// `[s][j][c]`
    log_lik: Vec<f64>,
}

impl PendingBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Largest relative deviation of each accumulator from a reference state.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Discrepancy {
    pub log_psi: f64,
    pub log_phi: f64,
    pub log_s_n: f64,
    pub log_s_all: f64,
    pub log_s_in: f64,
    pub s0_in: f64,
}

impl Discrepancy {
    pub fn max(&self) -> f64 {
        [self.log_psi, self.log_phi, self.log_s_n, self.log_s_all, self.log_s_in, self.s0_in]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(1.0)
    }
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| rel_diff(*x, *y)).fold(0.0, f64::max)
}

/// JSON has no infinities; an empty retained set stores `ln 0` as `null`.
mod log_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let o: Vec<Option<f64>> = v.iter().map(|x| if x.is_finite() { Some(*x) } else { None }).collect();
        o.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let o: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(o.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridBelief {
    config: HybridConfig,
    params: SemanticModelParams,
    prior: PriorModel,
    n_objects: usize,
    n_classes: usize,
    samples: Vec<TrajectorySample>,
    history: Vec<ObservationRecord>,
    log_psi: Vec<f64>,
    log_s_n: Vec<f64>,
    log_s_all: Vec<f64>,
    retained: Vec<Retained>,
    #[serde(with = "log_vec")]
    log_s_in: Vec<f64>,
    s0_all: f64,
    s0_in: NeumaierSum,
}

impl HybridBelief {
    /// A belief with no observations (`psi = 1` everywhere) and the given
    /// retained set.
    pub fn new(
        prior: PriorModel,
        params: SemanticModelParams,
        config: HybridConfig,
        retained: Vec<ClassAssignment>,
    ) -> Result<Self> {
        config.validate()?;
        if prior.n_classes() != params.n_classes {
            return Err(Error::InvalidConfig(format!(
                "prior has {} classes, semantic model has {}",
                prior.n_classes(),
                params.n_classes
            )));
        }
        let (n, m, ns) = (prior.n_objects(), prior.n_classes(), config.n_samples);
        let mut belief = Self {
            config,
            params,
            s0_all: prior.power_sum_all(config.q1),
            prior,
            n_objects: n,
            n_classes: m,
            samples: Vec::new(),
            history: Vec::new(),
            log_psi: vec![0.0; ns * n * m],
            log_s_n: vec![0.0; ns * n],
            log_s_all: vec![0.0; ns],
            retained: Vec::new(),
            log_s_in: vec![f64::NEG_INFINITY; ns],
            s0_in: NeumaierSum::default(),
        };
        belief.rebuild_object_sums();
        for c in retained {
            belief.add_hypothesis(c)?;
        }
        Ok(belief)
    }

    pub fn config(&self) -> &HybridConfig {
        &self.config
    }

    pub fn prior(&self) -> &PriorModel {
        &self.prior
    }

    pub fn params(&self) -> &SemanticModelParams {
        &self.params
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_samples(&self) -> usize {
        self.config.n_samples
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn history(&self) -> &[ObservationRecord] {
        &self.history
    }

    pub fn retained(&self) -> Vec<ClassAssignment> {
        self.retained.iter().map(|r| r.assignment.clone()).collect()
    }

    pub fn is_retained(&self, c: &ClassAssignment) -> bool {
        self.position(c).is_some()
    }

    pub fn psi_view(&self) -> PsiView<'_> {
        PsiView {
            n_samples: self.config.n_samples,
            n_objects: self.n_objects,
            n_classes: self.n_classes,
            log_psi: &self.log_psi,
        }
    }

    #[inline]
    fn psi_index(&self, s: usize, n: usize, c: usize) -> usize {
        (s * self.n_objects + n) * self.n_classes + c
    }

    pub fn log_psi(&self, s: usize, n: usize, c: usize) -> f64 {
        self.log_psi[self.psi_index(s, n, c)]
    }

    pub fn log_s_n(&self, s: usize, n: usize) -> f64 {
        self.log_s_n[s * self.n_objects + n]
    }

    pub fn log_s_all(&self, s: usize) -> f64 {
        self.log_s_all[s]
    }

    pub fn log_s_in(&self, s: usize) -> f64 {
        self.log_s_in[s]
    }

    pub fn s0_all(&self) -> f64 {
        self.s0_all
    }

    pub fn s0_in(&self) -> f64 {
        self.s0_in.value()
    }

    /// `ln phi` of a retained hypothesis at sample `s`.
    pub fn log_phi(&self, c: &ClassAssignment, s: usize) -> Result<f64> {
        let i = self.position(c).ok_or_else(|| Error::NotRetained(c.0.clone()))?;
        Ok(self.retained[i].log_phi[s])
    }

    fn position(&self, c: &ClassAssignment) -> Option<usize> {
        self.retained.iter().position(|r| &r.assignment == c)
    }

    /// Every hypothesis is retained, so nothing is pruned.
    fn all_retained(&self) -> bool {
        hypothesis_count_within(self.n_objects, self.n_classes, self.config.n_retained) == Some(self.retained.len())
    }

    fn class_log_sum(&self, s: usize, n: usize) -> f64 {
        let q2 = self.config.q2;
        let base = self.psi_index(s, n, 0);
        let mut acc = StreamingLogSumExp::default();
        for &v in &self.log_psi[base..base + self.n_classes] {
            acc.push(q2 * v);
        }
        acc.value()
    }

    fn sum_object_logs(&self, s: usize) -> f64 {
        let row = &self.log_s_n[s * self.n_objects..(s + 1) * self.n_objects];
        row.iter().copied().collect::<NeumaierSum>().value()
    }

    fn retained_log_sum(&self, s: usize) -> f64 {
        let q2 = self.config.q2;
        let mut acc = StreamingLogSumExp::default();
        for r in &self.retained {
            acc.push(q2 * r.log_phi[s]);
        }
        acc.value()
    }

    fn phi_of(&self, classes: &[usize], s: usize) -> f64 {
        classes
            .iter()
            .enumerate()
            .map(|(n, &c)| self.log_psi[self.psi_index(s, n, c)])
            .sum()
    }

    fn rebuild_object_sums(&mut self) {
        for s in 0..self.config.n_samples {
            for n in 0..self.n_objects {
                self.log_s_n[s * self.n_objects + n] = self.class_log_sum(s, n);
            }
            self.log_s_all[s] = self.sum_object_logs(s);
        }
    }

    fn rebuild_retained_sums(&mut self) {
        let q1 = self.config.q1;
        self.s0_in = self.retained.iter().map(|r| (q1 * r.log_prior).exp()).collect();
        for s in 0..self.config.n_samples {
            self.log_s_in[s] = self.retained_log_sum(s);
        }
    }

    /// Recomputes every quantity derived from `log_psi`.
    fn rebuild_from_psi(&mut self) {
        self.rebuild_object_sums();
        for i in 0..self.retained.len() {
            let classes = self.retained[i].assignment.0.clone();
            for s in 0..self.config.n_samples {
                self.retained[i].log_phi[s] = self.phi_of(&classes, s);
            }
        }
        self.s0_all = self.prior.power_sum_all(self.config.q1);
        self.rebuild_retained_sums();
    }

    /// Changes the exponents; all bound accumulators are rebuilt.
    pub fn set_exponents(&mut self, q1: f64, q2: f64) -> Result<()> {
        validate_exponents(q1, q2)?;
        self.config.q1 = q1;
        self.config.q2 = q2;
        self.rebuild_from_psi();
        Ok(())
    }

    /// Installs a new set of trajectory samples according to the sample policy.
    pub fn set_samples(&mut self, samples: Vec<TrajectorySample>) -> Result<()> {
        if samples.len() != self.config.n_samples {
            return Err(Error::InvalidConfig(format!(
                "expected {} samples, got {}",
                self.config.n_samples,
                samples.len()
            )));
        }
        if let Some(bad) = samples.iter().find(|s| s.objects.len() != self.n_objects) {
            return Err(Error::Format(format!(
                "sample carries {} objects, belief has {}",
                bad.objects.len(),
                self.n_objects
            )));
        }
        if self.samples.is_empty() || self.config.sample_policy == SamplePolicy::Refresh {
            self.samples = samples;
            if !self.history.is_empty() {
                self.log_psi = self.psi_from_history_fast()?;
                self.rebuild_from_psi();
            }
            return Ok(());
        }
        for (old, new) in self.samples.iter_mut().zip(samples) {
            if new.robot.len() > old.robot.len() {
                let start = old.robot.len();
                old.robot.extend_from_slice(&new.robot[start..]);
            }
            for (o, n) in old.objects.iter_mut().zip(new.objects) {
                if o.is_none() {
                    *o = n;
                }
            }
        }
        Ok(())
    }

    fn psi_from_history_fast(&self) -> Result<Vec<f64>> {
        let (n, m) = (self.n_objects, self.n_classes);
        let mut out = vec![0.0; self.config.n_samples * n * m];
        let mut ll = vec![0.0; m];
        for rec in &self.history {
            let logits = ObservationLogits::new(&rec.z, &self.params)?;
            for (s, sample) in self.samples.iter().enumerate() {
                let h = self.viewpoint(sample, rec.step, rec.object)?;
                logits.log_likelihood_all(h, &mut ll);
                let base = (s * n + rec.object) * m;
                for c in 0..m {
                    out[base + c] += ll[c];
                }
            }
        }
        Ok(out)
    }

    fn viewpoint(&self, sample: &TrajectorySample, step: usize, object: usize) -> Result<f64> {
        let robot = sample.robot.get(step).ok_or(Error::MissingPose { step })?;
        let obj = sample
            .objects
            .get(object)
            .copied()
            .flatten()
            .ok_or(Error::UnknownObject(object))?;
        viewpoint_coeff(robot, &obj)
    }

    /// Evaluates the semantic likelihood of every observation at every
    /// sample and class. Does not modify the belief.
    pub fn evaluate_observations(&self, step: usize, obs: &[(usize, SemanticObservation)]) -> Result<PendingBatch> {
        let m = self.n_classes;
        for (j, (object, _)) in obs.iter().enumerate() {
            if *object >= self.n_objects {
                return Err(Error::UnknownObject(*object));
            }
            let repeated = obs[..j].iter().any(|(o, _)| o == object)
                || self.history.iter().any(|r| r.step == step && r.object == *object);
            if repeated {
                return Err(Error::DuplicateObservation { object: *object, step });
            }
        }
        let records: Vec<ObservationRecord> = obs
            .iter()
            .map(|(object, z)| ObservationRecord {
                step,
                object: *object,
                z: z.clone(),
            })
            .collect();
        if records.is_empty() {
            return Ok(PendingBatch {
                step,
                records,
                log_lik: Vec::new(),
            });
        }
        if self.samples.is_empty() {
            return Err(Error::MissingPose { step });
        }
        let logits: Vec<ObservationLogits> = records
            .iter()
            .map(|r| ObservationLogits::new(&r.z, &self.params))
            .collect::<Result<_>>()?;
        let k = records.len();
        let mut log_lik = vec![0.0; self.config.n_samples * k * m];
        for (s, sample) in self.samples.iter().enumerate() {
            for (j, rec) in records.iter().enumerate() {
                let h = self.viewpoint(sample, step, rec.object)?;
                let base = (s * k + j) * m;
                logits[j].log_likelihood_all(h, &mut log_lik[base..base + m]);
            }
        }
        Ok(PendingBatch { step, records, log_lik })
    }

    /// Folds evaluated observations into every accumulator. Per sample this
    /// costs `O(N_k (M + N_in) + N)` arithmetic.
    pub fn apply_batch(&mut self, batch: PendingBatch) -> Result<()> {
        if batch.records.is_empty() {
            return Ok(());
        }
        let (n, m, ns) = (self.n_objects, self.n_classes, self.config.n_samples);
        let k = batch.records.len();
        if batch.log_lik.len() != ns * k * m {
            return Err(Error::Format("batch was evaluated for a different sample set".into()));
        }
        for rec in &batch.records {
            if self.history.iter().any(|r| r.step == rec.step && r.object == rec.object) {
                return Err(Error::DuplicateObservation {
                    object: rec.object,
                    step: rec.step,
                });
            }
        }
        for s in 0..ns {
            for (j, rec) in batch.records.iter().enumerate() {
                let src = (s * k + j) * m;
                let dst = (s * n + rec.object) * m;
                for c in 0..m {
                    self.log_psi[dst + c] += batch.log_lik[src + c];
                }
                self.log_s_n[s * n + rec.object] = self.class_log_sum(s, rec.object);
            }
            self.log_s_all[s] = self.sum_object_logs(s);
            for r in self.retained.iter_mut() {
                let delta: f64 = batch
                    .records
                    .iter()
                    .enumerate()
                    .map(|(j, rec)| batch.log_lik[(s * k + j) * m + r.assignment.0[rec.object]])
                    .sum();
                r.log_phi[s] += delta;
            }
            self.log_s_in[s] = self.retained_log_sum(s);
        }
        let _ = batch.step;
        self.history.extend(batch.records);
        Ok(())
    }

    pub fn ingest_observations(&mut self, step: usize, obs: &[(usize, SemanticObservation)]) -> Result<()> {
        let batch = self.evaluate_observations(step, obs)?;
        self.apply_batch(batch)
    }

    /// Adds a hypothesis to the retained set in `O(N)` per sample.
    pub fn add_hypothesis(&mut self, c: ClassAssignment) -> Result<()> {
        c.validate(self.n_objects, self.n_classes)?;
        if self.is_retained(&c) {
            return Err(Error::AlreadyRetained(c.0));
        }
        if self.retained.len() >= self.config.n_retained {
            return Err(Error::CapacityExceeded {
                capacity: self.config.n_retained,
            });
        }
        let log_prior = self.prior.log_prior(&c)?;
        let log_phi: Vec<f64> = (0..self.config.n_samples).map(|s| self.phi_of(&c.0, s)).collect();
        self.s0_in.add((self.config.q1 * log_prior).exp());
        for (s, lp) in log_phi.iter().enumerate() {
            self.log_s_in[s] = log_add_exp(self.log_s_in[s], self.config.q2 * lp);
        }
        self.retained.push(Retained {
            assignment: c,
            log_prior,
            log_phi,
        });
        Ok(())
    }

    /// Removes a retained hypothesis by subtracting its cached terms.
    pub fn remove_hypothesis(&mut self, c: &ClassAssignment) -> Result<()> {
        let i = self.position(c).ok_or_else(|| Error::NotRetained(c.0.clone()))?;
        let r = self.retained.remove(i);
        if self.retained.is_empty() {
            self.s0_in = NeumaierSum::default();
            self.log_s_in.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
            return Ok(());
        }
        self.s0_in.add(-(self.config.q1 * r.log_prior).exp());
        let q2 = self.config.q2;
        for s in 0..self.config.n_samples {
            let d = q2 * r.log_phi[s] - self.log_s_in[s];
            let remaining = -d.exp_m1();
            self.log_s_in[s] = if remaining >= REMOVAL_REBUILD_FRACTION {
                self.log_s_in[s] + remaining.ln()
            } else {
                self.retained_log_sum(s)
            };
        }
        Ok(())
    }

    /// Adds `add` and, if given, removes `remove` first.
    pub fn swap_hypothesis(&mut self, add: ClassAssignment, remove: Option<&ClassAssignment>) -> Result<()> {
        add.validate(self.n_objects, self.n_classes)?;
        if self.is_retained(&add) && remove != Some(&add) {
            return Err(Error::AlreadyRetained(add.0));
        }
        if let Some(r) = remove {
            if !self.is_retained(r) {
                return Err(Error::NotRetained(r.0.clone()));
            }
        } else if self.retained.len() >= self.config.n_retained {
            return Err(Error::CapacityExceeded {
                capacity: self.config.n_retained,
            });
        }
        if let Some(r) = remove {
            self.remove_hypothesis(r)?;
        }
        self.add_hypothesis(add)
    }

    fn log_weight_of(&self, r: &Retained) -> f64 {
        r.log_prior + log_mean_exp(&r.log_phi)
    }

    /// Sample-averaged unnormalized log weight `ln b(C)` of any hypothesis.
    pub fn log_weight(&self, c: &ClassAssignment) -> Result<f64> {
        c.validate(self.n_objects, self.n_classes)?;
        if let Some(i) = self.position(c) {
            return Ok(self.log_weight_of(&self.retained[i]));
        }
        let phi: Vec<f64> = (0..self.config.n_samples).map(|s| self.phi_of(&c.0, s)).collect();
        Ok(self.prior.log_prior(c)? + log_mean_exp(&phi))
    }

    pub fn log_retained_mass(&self) -> f64 {
        let w: Vec<f64> = self.retained.iter().map(|r| self.log_weight_of(r)).collect();
        log_sum_exp(&w)
    }

    /// `ln` of `mean_s prod_n sum_c P0_n(c) psi(n, c)`, the total mass over
    /// all hypotheses under an independent prior, in `O(N M N_s)`.
    pub fn exact_log_normalizer_independent(&self) -> Result<f64> {
        let lm = self.prior.log_marginals()?;
        let mut per_sample = vec![0.0; self.config.n_samples];
        for (s, slot) in per_sample.iter_mut().enumerate() {
            let mut total = NeumaierSum::default();
            for (n, marg) in lm.iter().enumerate() {
                let mut acc = StreamingLogSumExp::default();
                for (c, lp) in marg.iter().enumerate() {
                    acc.push(lp + self.log_psi[self.psi_index(s, n, c)]);
                }
                total.add(acc.value());
            }
            *slot = total.value();
        }
        Ok(log_mean_exp(&per_sample))
    }

    fn log_bound(&self, conservative: bool) -> f64 {
        if self.all_retained() {
            return f64::NEG_INFINITY;
        }
        let (q1, q2) = (self.config.q1, self.config.q2);
        let s0_in = self.s0_in.value();
        let mut prior_gap = self.s0_all - s0_in;
        if conservative {
            prior_gap = prior_gap.max(0.0) + 64.0 * f64::EPSILON * (self.s0_all + s0_in.abs());
        }
        if prior_gap <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let ops = (1 + self.history.len()) as f64;
        let terms: Vec<f64> = (0..self.config.n_samples)
            .map(|s| {
                let (all, inn) = (self.log_s_all[s], self.log_s_in[s]);
                let mut frac = if inn == f64::NEG_INFINITY {
                    1.0
                } else {
                    (-(inn - all).exp_m1()).max(0.0)
                };
                if conservative {
                    let row = &self.log_s_n[s * self.n_objects..(s + 1) * self.n_objects];
                    let scale: f64 = 1.0 + row.iter().map(|v| v.abs()).sum::<f64>() + if inn.is_finite() { inn.abs() } else { 0.0 };
                    frac += 64.0 * f64::EPSILON * ops * scale;
                }
                (all + frac.ln()) / q2
            })
            .collect();
        let log_u = prior_gap.ln() / q1 + log_mean_exp(&terms);
        if conservative {
            log_u + BOUND_INFLATION.ln_1p()
        } else {
            log_u
        }
    }

    /// `ln U`, the bound on the unnormalized mass of all pruned hypotheses,
    /// including a small floating-point safety margin.
    pub fn log_unnormalized_bound(&self) -> f64 {
        self.log_bound(true)
    }

    /// [`Self::log_unnormalized_bound`] without the safety margin.
    pub fn raw_log_unnormalized_bound(&self) -> f64 {
        self.log_bound(false)
    }

    pub fn unnormalized_bound(&self) -> f64 {
        self.log_unnormalized_bound().exp()
    }

    /// Absolute rounding allowance on `ln` of the retained mass. The same
    /// weights recomputed along another summation order agree to within this.
    fn retained_log_slack(&self) -> f64 {
        let psi_scale = self.log_psi.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let weight_scale = self
            .retained
            .iter()
            .map(|r| r.log_prior.abs() + r.log_phi.iter().fold(0.0_f64, |a, v| a.max(v.abs())))
            .fold(0.0_f64, f64::max);
        let terms = (1 + self.history.len()) as f64;
        64.0 * f64::EPSILON * terms * (1.0 + weight_scale + self.n_objects as f64 * terms * psi_scale)
    }

    /// `ln` of the normalizer lower bound, `-ln(retained mass + U)`, with the
    /// retained mass rounded up.
    pub fn log_lower_bound_normalizer(&self) -> f64 {
        let ret = self.log_retained_mass() + self.retained_log_slack();
        -log_add_exp(ret, self.log_unnormalized_bound())
    }

    /// Upper bound on the posterior probability that the true hypothesis was
    /// pruned, with the retained mass rounded down.
    pub fn pruned_mass_upper_bound(&self) -> f64 {
        let log_u = self.log_unnormalized_bound();
        if log_u == f64::NEG_INFINITY {
            return 0.0;
        }
        let ret = self.log_retained_mass() - self.retained_log_slack();
        (log_u - log_add_exp(ret, log_u)).exp().clamp(0.0, 1.0)
    }

    /// Normalizing log-mass for a query mode.
    pub fn log_normalizer(&self, mode: QueryMode) -> Result<f64> {
        match mode {
            QueryMode::Naive => Ok(self.log_retained_mass()),
            QueryMode::ExactIndependent => self.exact_log_normalizer_independent(),
            QueryMode::Bound => Ok(-self.log_lower_bound_normalizer()),
            QueryMode::Oracle => oracle::log_normalizer(&self.prior, &self.psi_view()),
        }
    }

    pub fn posterior(&self, mode: QueryMode) -> Result<Posterior> {
        let log_normalizer = self.log_normalizer(mode)?;
        let entries = self
            .retained
            .iter()
            .map(|r| (r.assignment.clone(), (self.log_weight_of(r) - log_normalizer).exp()))
            .collect();
        Ok(Posterior {
            mode,
            log_normalizer,
            entries,
        })
    }

    pub fn query_posterior(&self, c: &ClassAssignment, mode: QueryMode) -> Result<f64> {
        let i = self.position(c).ok_or_else(|| Error::NotRetained(c.0.clone()))?;
        Ok((self.log_weight_of(&self.retained[i]) - self.log_normalizer(mode)?).exp())
    }

    fn ranked(&self, mut pool: Vec<(ClassAssignment, f64)>, k: usize) -> Vec<ClassAssignment> {
        pool.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        pool.into_iter().take(k).map(|(c, _)| c).collect()
    }

    /// Keeps the `k` retained hypotheses of largest weight.
    pub fn prune_to_top_k(&mut self, k: usize) {
        if k >= self.retained.len() {
            return;
        }
        let pool = self
            .retained
            .iter()
            .map(|r| (r.assignment.clone(), self.log_weight_of(r)))
            .collect();
        let keep = self.ranked(pool, k);
        self.retained.retain(|r| keep.contains(&r.assignment));
        self.rebuild_retained_sums();
    }

    /// Replaces the retained set by the `k` heaviest hypotheses among the
    /// current ones and `candidates`.
    pub fn select_top_k(&mut self, candidates: &[ClassAssignment], k: usize) -> Result<()> {
        if k > self.config.n_retained {
            return Err(Error::CapacityExceeded {
                capacity: self.config.n_retained,
            });
        }
        let mut pool: Vec<(ClassAssignment, f64)> = Vec::new();
        for c in self.retained().into_iter().chain(candidates.iter().cloned()) {
            if !pool.iter().any(|p| p.0 == c) {
                let w = self.log_weight(&c)?;
                pool.push((c, w));
            }
        }
        let keep = self.ranked(pool, k);
        self.retained.retain(|r| keep.contains(&r.assignment));
        for c in keep {
            if !self.is_retained(&c) {
                let log_prior = self.prior.log_prior(&c)?;
                let log_phi = (0..self.config.n_samples).map(|s| self.phi_of(&c.0, s)).collect();
                self.retained.push(Retained {
                    assignment: c,
                    log_prior,
                    log_phi,
                });
            }
        }
        self.rebuild_retained_sums();
        Ok(())
    }

    /// Independent reconstruction of the whole state from the observation
    /// history, samples and retained assignments, using the direct density
    /// and batch sums.
    pub fn rebuilt_from_scratch(&self) -> Result<Self> {
        let mut b = self.clone();
        if !self.history.is_empty() {
            b.log_psi = oracle::psi_from_history(&self.params, &self.samples, self.n_objects, &self.history)?;
        } else {
            b.log_psi.iter_mut().for_each(|v| *v = 0.0);
        }
        let (n, m, q1, q2) = (self.n_objects, self.n_classes, self.config.q1, self.config.q2);
        let view = PsiView::new(self.config.n_samples, n, m, &b.log_psi)?;
        for s in 0..self.config.n_samples {
            for o in 0..n {
                let row: Vec<f64> = (0..m).map(|c| q2 * view.get(s, o, c)).collect();
                b.log_s_n[s * n + o] = log_sum_exp(&row);
            }
            b.log_s_all[s] = b.log_s_n[s * n..(s + 1) * n].iter().sum();
        }
        for r in b.retained.iter_mut() {
            r.log_prior = self.prior.log_prior(&r.assignment)?;
            for s in 0..self.config.n_samples {
                r.log_phi[s] = r.assignment.0.iter().enumerate().map(|(o, &c)| view.get(s, o, c)).sum();
            }
        }
        for s in 0..self.config.n_samples {
            let terms: Vec<f64> = b.retained.iter().map(|r| q2 * r.log_phi[s]).collect();
            b.log_s_in[s] = log_sum_exp(&terms);
        }
        let mut s0 = NeumaierSum::default();
        s0.add(self.prior.power_sum_subset(&self.retained(), q1)?);
        b.s0_in = s0;
        b.s0_all = self.prior.power_sum_all(q1);
        Ok(b)
    }

    pub fn discrepancy(&self, reference: &Self) -> Discrepancy {
        let phi = |b: &Self| -> Vec<f64> { b.retained.iter().flat_map(|r| r.log_phi.iter().copied()).collect() };
        Discrepancy {
            log_psi: max_rel_diff(&self.log_psi, &reference.log_psi),
            log_phi: max_rel_diff(&phi(self), &phi(reference)),
            log_s_n: max_rel_diff(&self.log_s_n, &reference.log_s_n),
            log_s_all: max_rel_diff(&self.log_s_all, &reference.log_s_all),
            log_s_in: max_rel_diff(&self.log_s_in, &reference.log_s_in),
            s0_in: (self.s0_in.value() - reference.s0_in.value()).abs() / reference.s0_in.value().abs().max(f64::MIN_POSITIVE),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        b.config.validate()?;
        let (ns, n, m) = (b.config.n_samples, b.n_objects, b.n_classes);
        let shapes_ok = b.log_psi.len() == ns * n * m
            && b.log_s_n.len() == ns * n
            && b.log_s_all.len() == ns
            && b.log_s_in.len() == ns
            && b.retained.iter().all(|r| r.log_phi.len() == ns)
            && b.prior.n_objects() == n
            && b.prior.n_classes() == m;
        if !shapes_ok {
            return Err(Error::Format("snapshot arrays have inconsistent shapes".into()));
        }
        Ok(b)
    }
}
