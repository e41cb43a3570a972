//! Exhaustive enumeration over all `M^N` class hypotheses at fixed samples.
//!
//! This is the reference against which every bound, normalizer and
//! incremental identity is checked. It shares no accumulator code with the
//! engine: ψ tables can be rebuilt from raw observation history through the
//! plain density, and weights are summed per hypothesis.

use crate::error::{Error, Result};
use crate::logmath::{log_sum_exp, StreamingLogSumExp};
use crate::priors::{hypothesis_count, hypothesis_count_within, ClassAssignment, PriorModel};
use crate::semantic::{log_likelihood, SemanticModelParams, SemanticObservation};
use crate::slam::TrajectorySample;

pub const MAX_ENUMERATED_HYPOTHESES: usize = 1_000_000;

/// One semantic observation: object `object` seen from the pose at `step`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObservationRecord {
    pub step: usize,
    pub object: usize,
    pub z: SemanticObservation,
}

/// Borrowed `log psi[s][n][c]` table, flat in that order.
#[derive(Debug, Clone, Copy)]
pub struct PsiView<'a> {
    pub n_samples: usize,
    pub n_objects: usize,
    pub n_classes: usize,
    pub log_psi: &'a [f64],
}

impl<'a> PsiView<'a> {
    pub fn new(n_samples: usize, n_objects: usize, n_classes: usize, log_psi: &'a [f64]) -> Result<Self> {
        if log_psi.len() != n_samples * n_objects * n_classes || n_samples == 0 {
            return Err(Error::Format(format!(
                "psi table has {} entries, expected {n_samples} x {n_objects} x {n_classes}",
                log_psi.len()
            )));
        }
        Ok(Self {
            n_samples,
            n_objects,
            n_classes,
            log_psi,
        })
    }

    #[inline]
    pub fn get(&self, s: usize, n: usize, c: usize) -> f64 {
        self.log_psi[(s * self.n_objects + n) * self.n_classes + c]
    }
}

/// Rebuilds `log psi` from observation history with the direct density.
pub fn psi_from_history(
    params: &SemanticModelParams,
    samples: &[TrajectorySample],
    n_objects: usize,
    history: &[ObservationRecord],
) -> Result<Vec<f64>> {
    let m = params.n_classes;
    let mut out = vec![0.0; samples.len() * n_objects * m];
    for (s, sample) in samples.iter().enumerate() {
        for rec in history {
            let robot = sample.robot.get(rec.step).ok_or(Error::MissingPose { step: rec.step })?;
            let object = sample
                .objects
                .get(rec.object)
                .copied()
                .flatten()
                .ok_or(Error::UnknownObject(rec.object))?;
            for c in 0..m {
                out[(s * n_objects + rec.object) * m + c] += log_likelihood(&rec.z, robot, &object, c, params)?;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationResult {
    /// Sample-averaged unnormalized log weight of every hypothesis, by flat index.
    pub log_weights: Vec<f64>,
    /// `ln` of the total unnormalized mass.
    pub log_normalizer: f64,
    pub posteriors: Vec<f64>,
    /// `ln` of the retained and pruned masses when a retained set was given.
    pub log_in_mass: Option<f64>,
    pub log_out_mass: Option<f64>,
    pub pruned_mass: Option<f64>,
    pub n_classes: usize,
}

impl EnumerationResult {
    pub fn log_weight(&self, c: &ClassAssignment) -> f64 {
        self.log_weights[c.flat_index(self.n_classes)]
    }

    pub fn posterior(&self, c: &ClassAssignment) -> f64 {
        self.posteriors[c.flat_index(self.n_classes)]
    }
}

fn check_size(prior: &PriorModel, psi: &PsiView) -> Result<usize> {
    if prior.n_objects() != psi.n_objects || prior.n_classes() != psi.n_classes {
        return Err(Error::Format("prior and psi table shapes differ".into()));
    }
    hypothesis_count_within(psi.n_objects, psi.n_classes, MAX_ENUMERATED_HYPOTHESES).ok_or(
        Error::TooManyHypotheses {
            count: hypothesis_count(psi.n_objects, psi.n_classes),
            limit: MAX_ENUMERATED_HYPOTHESES,
        },
    )
}

/// Calls `f(flat_index, log_weight)` for every hypothesis in flat order.
///
/// Per-sample partial sums over objects are kept for every prefix depth, so
/// advancing to the next hypothesis only recomputes the rows below the
/// digit that changed.
fn for_each_hypothesis(prior: &PriorModel, psi: &PsiView, mut f: impl FnMut(usize, f64)) -> Result<()> {
    let total = check_size(prior, psi)?;
    let (n, m, ns) = (psi.n_objects, psi.n_classes, psi.n_samples);
    let log_ns = (ns as f64).ln();
    let mut digits = vec![0usize; n];
    let mut prefix = vec![0.0; n * ns];
    let fill = |prefix: &mut [f64], digits: &[usize], from: usize| {
        for d in from..n {
            for s in 0..ns {
                let above = if d == 0 { 0.0 } else { prefix[(d - 1) * ns + s] };
                prefix[d * ns + s] = above + psi.get(s, d, digits[d]);
            }
        }
    };
    fill(&mut prefix, &digits, 0);
    // Independent priors get the same prefix treatment for their log marginals.
    let log_marginals = prior.log_marginals().ok();
    let mut prior_prefix = vec![0.0; n];
    let fill_prior = |pp: &mut [f64], digits: &[usize], from: usize| {
        if let Some(lm) = &log_marginals {
            for d in from..n {
                pp[d] = if d == 0 { 0.0 } else { pp[d - 1] } + lm[d][digits[d]];
            }
        }
    };
    fill_prior(&mut prior_prefix, &digits, 0);
    let leaf = (n - 1) * ns;
    for idx in 0..total {
        let mut acc = StreamingLogSumExp::default();
        for &v in &prefix[leaf..leaf + ns] {
            acc.push(v);
        }
        let log_prior = if log_marginals.is_some() {
            prior_prefix[n - 1]
        } else {
            prior.log_prior_unchecked(&digits)
        };
        f(idx, log_prior + acc.value() - log_ns);

        // Odometer increment, last object least significant.
        let mut d = n;
        while d > 0 {
            d -= 1;
            digits[d] += 1;
            if digits[d] < m {
                break;
            }
            digits[d] = 0;
        }
        if idx + 1 < total {
            fill(&mut prefix, &digits, d);
            fill_prior(&mut prior_prefix, &digits, d);
        }
    }
    Ok(())
}

/// Full enumeration with posteriors and, for a given retained set, the exact
/// retained and pruned masses.
pub fn enumerate(
    prior: &PriorModel,
    psi: &PsiView,
    retained: Option<&[ClassAssignment]>,
) -> Result<EnumerationResult> {
    let mut log_weights = Vec::new();
    for_each_hypothesis(prior, psi, |_, w| log_weights.push(w))?;
    let log_normalizer = log_sum_exp(&log_weights);
    let posteriors = log_weights.iter().map(|w| (w - log_normalizer).exp()).collect();
    let m = psi.n_classes;

    let (log_in_mass, log_out_mass, pruned_mass) = match retained {
        None => (None, None, None),
        Some(set) => {
            let mut flags = vec![false; log_weights.len()];
            for c in set {
                c.validate(psi.n_objects, m)?;
                let i = c.flat_index(m);
                if flags[i] {
                    return Err(Error::DuplicateHypothesis(c.0.clone()));
                }
                flags[i] = true;
            }
            let ins: Vec<f64> = log_weights.iter().zip(&flags).filter(|(_, f)| **f).map(|(w, _)| *w).collect();
            let outs: Vec<f64> = log_weights.iter().zip(&flags).filter(|(_, f)| !**f).map(|(w, _)| *w).collect();
            let log_out = log_sum_exp(&outs);
            (Some(log_sum_exp(&ins)), Some(log_out), Some((log_out - log_normalizer).exp()))
        }
    };
    Ok(EnumerationResult {
        log_weights,
        log_normalizer,
        posteriors,
        log_in_mass,
        log_out_mass,
        pruned_mass,
        n_classes: m,
    })
}

/// `ln` of the total unnormalized mass, without storing per-hypothesis weights.
pub fn log_normalizer(prior: &PriorModel, psi: &PsiView) -> Result<f64> {
    let mut acc = StreamingLogSumExp::default();
    for_each_hypothesis(prior, psi, |_, w| acc.push(w))?;
    Ok(acc.value())
}
