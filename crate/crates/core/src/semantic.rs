//! Viewpoint-dependent synthetic classifier.
//!
//! A classifier score vector `z` on the `M`-simplex is modelled as logit-normal:
//! the additive-logistic coordinates `y_i = ln(z_i / z_M)` (`i < M`) are
//! Gaussian with mean `e_c * h` and covariance `sigma^2 I_{M-1}`. The last class
//! (index `M - 1`) has a zero mean, so its expected score vector is uniform.
//! The coefficient `h` grows as the camera gets closer to the object and turns
//! towards its front.
//!
//! Classes are zero-based throughout the crate.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se2::{Pose2, MIN_DISTANCE};

/// Lower clamp applied to sampled scores.
pub const SCORE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticModelParams {
    pub n_classes: usize,
    pub sigma_s: f64,
}

impl SemanticModelParams {
    pub fn new(n_classes: usize, sigma_s: f64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        if !(sigma_s > 0.0 && sigma_s.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma_s must be positive, got {sigma_s}"
            )));
        }
        Ok(Self { n_classes, sigma_s })
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.n_classes {
            Err(Error::InvalidClass {
                class,
                n_classes: self.n_classes,
            })
        } else {
            Ok(())
        }
    }
}

/// Classifier output: strictly positive scores summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticObservation {
    pub probs: Vec<f64>,
}

impl SemanticObservation {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Format("observation needs at least 2 scores".into()));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Format(format!(
                "scores must be positive and sum to 1 (sum = {sum})"
            )));
        }
        Ok(Self { probs })
    }

    pub fn n_classes(&self) -> usize {
        self.probs.len()
    }
}

/// Relative heading between the robot and the object: the orientation
/// component of `between(robot, object)`. Zero means the robot looks at the
/// object's back.
pub fn relative_angle(robot: &Pose2, object: &Pose2) -> f64 {
    robot.between(object).theta
}

/// `(1 - cos(theta)) * min(1 / dist, 1 / 2)`, in `[0, 1]`.
pub fn viewpoint_coeff(robot: &Pose2, object: &Pose2) -> Result<f64> {
    let dist = robot.distance_to(object.position());
    if dist <= MIN_DISTANCE {
        return Err(Error::DegeneratePoint { distance: dist });
    }
    let theta = relative_angle(robot, object);
    Ok((1.0 - theta.cos()) * (1.0 / dist).min(0.5))
}

/// Mean of the latent Gaussian, length `M - 1`.
pub fn mean_logit(
    robot: &Pose2,
    object: &Pose2,
    class: usize,
    params: &SemanticModelParams,
) -> Result<Vec<f64>> {
    params.check_class(class)?;
    let mut mu = vec![0.0; params.n_classes - 1];
    if class + 1 < params.n_classes {
        mu[class] = viewpoint_coeff(robot, object)?;
    }
    Ok(mu)
}

/// Maps latent coordinates `y` (length `M - 1`, last logit pinned to zero) to
/// the simplex.
pub fn additive_logistic(y: &[f64]) -> Vec<f64> {
    let max = y.iter().copied().fold(0.0f64, f64::max);
    let mut z: Vec<f64> = y.iter().map(|v| (v - max).exp()).collect();
    z.push((-max).exp());
    let total: f64 = z.iter().sum();
    z.iter_mut().for_each(|v| *v /= total);
    z
}

/// Inverse of [`additive_logistic`].
pub fn logit(z: &[f64]) -> Vec<f64> {
    let last = z[z.len() - 1].ln();
    z[..z.len() - 1].iter().map(|v| v.ln() - last).collect()
}

pub fn sample_observation<R: Rng + ?Sized>(
    robot: &Pose2,
    object: &Pose2,
    class: usize,
    params: &SemanticModelParams,
    rng: &mut R,
) -> Result<SemanticObservation> {
    params.check_class(class)?;
    let h = viewpoint_coeff(robot, object)?;
    sample_observation_at(h, class, params, rng)
}

/// Draws a score vector for a known viewpoint coefficient `h`.
pub fn sample_observation_at<R: Rng + ?Sized>(
    h: f64,
    class: usize,
    params: &SemanticModelParams,
    rng: &mut R,
) -> Result<SemanticObservation> {
    params.check_class(class)?;
    let mut mu = vec![0.0; params.n_classes - 1];
    if class + 1 < params.n_classes {
        mu[class] = h;
    }
    let y: Vec<f64> = mu
        .iter()
        .map(|m| m + params.sigma_s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut probs = additive_logistic(&y);
    clamp_to_interior(&mut probs);
    Ok(SemanticObservation { probs })
}

fn clamp_to_interior(probs: &mut [f64]) {
    if probs.iter().all(|p| *p >= SCORE_FLOOR && *p <= 1.0 - SCORE_FLOOR) {
        return;
    }
    probs
        .iter_mut()
        .for_each(|p| *p = p.clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR));
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
}

/// Exact logit-normal log-density of `z` given the poses and the class.
pub fn log_likelihood(
    z: &SemanticObservation,
    robot: &Pose2,
    object: &Pose2,
    class: usize,
    params: &SemanticModelParams,
) -> Result<f64> {
    let logits = ObservationLogits::new(z, params)?;
    params.check_class(class)?;
    let h = viewpoint_coeff(robot, object)?;
    Ok(logits.log_likelihood(class, h))
}

/// An observation pre-transformed into latent coordinates, so that the
/// density for every class and viewpoint can be evaluated in `O(1)`.
#[derive(Debug, Clone)]
pub struct ObservationLogits {
    y: Vec<f64>,
    /// `-(M-1)/2 ln(2 pi sigma^2) - sum ln z_i - |y|^2 / (2 sigma^2)`
    offset: f64,
    inv_var: f64,
}

impl ObservationLogits {
    pub fn new(z: &SemanticObservation, params: &SemanticModelParams) -> Result<Self> {
        if z.probs.len() != params.n_classes {
            return Err(Error::Format(format!(
                "observation has {} scores, model has {} classes",
                z.probs.len(),
                params.n_classes
            )));
        }
        let min_element = z.probs.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min_element > SCORE_FLOOR) {
            return Err(Error::BoundaryObservation { min_element });
        }
        let y = logit(&z.probs);
        let var = params.sigma_s * params.sigma_s;
        let dim = (params.n_classes - 1) as f64;
        let log_jacobian: f64 = z.probs.iter().map(|p| p.ln()).sum();
        let y_sq: f64 = y.iter().map(|v| v * v).sum();
        let offset = -0.5 * dim * (2.0 * PI * var).ln() - log_jacobian - 0.5 * y_sq / var;
        Ok(Self {
            y,
            offset,
            inv_var: 1.0 / var,
        })
    }

    #[inline]
    pub fn log_likelihood(&self, class: usize, h: f64) -> f64 {
        if class < self.y.len() {
            // |y - h e_c|^2 = |y|^2 - 2 h y_c + h^2
            self.offset - 0.5 * self.inv_var * (h * h - 2.0 * h * self.y[class])
        } else {
            self.offset
        }
    }

    /// Writes the log-density for every class into `out` (length `M`).
    #[inline]
    pub fn log_likelihood_all(&self, h: f64, out: &mut [f64]) {
        let shift = -0.5 * self.inv_var * h * h;
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = if c < self.y.len() {
                self.offset + shift + self.inv_var * h * self.y[c]
            } else {
                self.offset
            };
        }
    }
}
