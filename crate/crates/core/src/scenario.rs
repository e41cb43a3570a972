//! Synthetic worlds: oriented objects with random classes, a counter-clockwise
//! rectangular loop for the robot, and noisy measurement generation.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::{generate_random_prior, hypothesis_count, hypothesis_count_within, ClassAssignment, PriorModel};
use crate::se2::{bearing, Pose2};
use crate::semantic::{sample_observation, SemanticModelParams, SemanticObservation};
use crate::slam::MotionModel;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    In,
    Out,
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(Placement::In),
            "out" => Ok(Placement::Out),
            other => Err(Error::InvalidConfig(format!("unknown placement '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub prior_cov: [[f64; 3]; 3],
    pub process_cov: [[f64; 3]; 3],
    pub bearing_var: f64,
    pub sigma_s: f64,
}

fn diag(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    [[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]]
}

fn to_matrix(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            prior_cov: diag(0.01, 0.01, 0.001),
            process_cov: diag(0.3, 0.3, 0.03),
            bearing_var: 0.03,
            sigma_s: 0.015,
        }
    }
}

impl NoiseConfig {
    pub fn prior_matrix(&self) -> Matrix3<f64> {
        to_matrix(&self.prior_cov)
    }

    pub fn motion_model(&self) -> MotionModel {
        MotionModel {
            process_noise_cov: to_matrix(&self.process_cov),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("prior_cov", &self.prior_cov), ("process_cov", &self.process_cov)] {
            let m = to_matrix(m);
            if (m - m.transpose()).amax() > 1e-12 || m.cholesky().is_none() {
                return Err(Error::InvalidConfig(format!("{name} is not symmetric positive definite")));
            }
        }
        if !(self.bearing_var > 0.0) || !(self.sigma_s > 0.0) {
            return Err(Error::InvalidConfig("noise variances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub radius: f64,
    pub half_fov: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            radius: 10.0,
            half_fov: FRAC_PI_2,
        }
    }
}

impl SensorConfig {
    pub fn sees(&self, robot: &Pose2, point: [f64; 2]) -> bool {
        robot.distance_to(point) <= self.radius
            && bearing(robot, point).map(|b| b.abs() <= self.half_fov).unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioObject {
    pub pose: Pose2,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub seed: u64,
    pub n_classes: usize,
    pub objects: Vec<ScenarioObject>,
    /// Ground-truth robot poses; the robot starts at `waypoints[0]`.
    pub waypoints: Vec<Pose2>,
    pub prior: PriorModel,
    pub noise: NoiseConfig,
    pub sensor: SensorConfig,
    pub placement: Placement,
    pub truth: ClassAssignment,
    pub retained: Vec<ClassAssignment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOptions {
    pub n_objects: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub placement: Placement,
    pub dependent_prior: bool,
    pub n_retained: usize,
    pub loop_side: f64,
    pub spacing: f64,
    pub noise: NoiseConfig,
    pub sensor: SensorConfig,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            n_objects: 5,
            n_classes: 3,
            seed: 0,
            placement: Placement::In,
            dependent_prior: true,
            n_retained: 8,
            loop_side: 10.0,
            spacing: 1.0,
            noise: NoiseConfig::default(),
            sensor: SensorConfig::default(),
        }
    }
}

/// Measurements generated at one time step. Object ids double as the known
/// data association.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMeasurements {
    /// Relative motion from the previous pose; `None` at the first step.
    pub odometry: Option<Pose2>,
    pub bearings: Vec<(usize, f64)>,
    pub semantics: Vec<(usize, SemanticObservation)>,
}

/// Counter-clockwise square loop from the origin; each waypoint faces along
/// the segment that leaves it. The last waypoint returns to the start.
pub fn square_loop(side: f64, spacing: f64) -> Result<Vec<Pose2>> {
    if !(side > 0.0) || !(spacing > 0.0) {
        return Err(Error::InvalidConfig("loop side and spacing must be positive".into()));
    }
    let per_side = (side / spacing).round() as usize;
    if per_side == 0 {
        return Err(Error::InvalidConfig("spacing larger than the loop side".into()));
    }
    let step = side / per_side as f64;
    let corners = [[0.0, 0.0], [side, 0.0], [side, side], [0.0, side]];
    let headings = [0.0, FRAC_PI_2, std::f64::consts::PI, -FRAC_PI_2];
    let mut out = Vec::with_capacity(4 * per_side + 1);
    for (i, c) in corners.iter().enumerate() {
        let (s, co) = headings[i].sin_cos();
        for k in 0..per_side {
            let d = k as f64 * step;
            out.push(Pose2::new(c[0] + co * d, c[1] + s * d, headings[i]));
        }
    }
    out.push(Pose2::identity());
    Ok(out)
}

fn random_assignment(rng: &mut ChaCha8Rng, n_objects: usize, n_classes: usize) -> ClassAssignment {
    ClassAssignment((0..n_objects).map(|_| rng.random_range(0..n_classes)).collect())
}

/// Builds a deterministic scenario from `opts`.
pub fn generate(opts: &ScenarioOptions) -> Result<Scenario> {
    let (n, m) = (opts.n_objects, opts.n_classes);
    if n == 0 || m < 2 || opts.n_retained == 0 {
        return Err(Error::InvalidConfig(format!(
            "need N >= 1, M >= 2 and N_in >= 1 (got N = {n}, M = {m}, N_in = {})",
            opts.n_retained
        )));
    }
    opts.noise.validate()?;
    let total = hypothesis_count(n, m);
    let n_in = match opts.placement {
        Placement::Out if total <= opts.n_retained as f64 => {
            return Err(Error::InfeasiblePlacement {
                retained: opts.n_retained,
                total,
            })
        }
        Placement::In => opts.n_retained.min(hypothesis_count_within(n, m, opts.n_retained).unwrap_or(opts.n_retained)),
        Placement::Out => opts.n_retained,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let waypoints = square_loop(opts.loop_side, opts.spacing)?;
    let margin = 0.15 * opts.loop_side;
    let objects: Vec<ScenarioObject> = (0..n)
        .map(|_| ScenarioObject {
            pose: Pose2::new(
                rng.random_range(margin..opts.loop_side - margin),
                rng.random_range(margin..opts.loop_side - margin),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            ),
            class: rng.random_range(0..m),
        })
        .collect();
    let truth = ClassAssignment(objects.iter().map(|o| o.class).collect());
    let prior = generate_random_prior(n, m, opts.dependent_prior, rng.random())?;

    let mut retained = Vec::with_capacity(n_in);
    if opts.placement == Placement::In {
        retained.push(truth.clone());
    }
    while retained.len() < n_in {
        let c = random_assignment(&mut rng, n, m);
        if c != truth && !retained.contains(&c) {
            retained.push(c);
        }
    }

    Ok(Scenario {
        schema_version: SCHEMA_VERSION,
        seed: opts.seed,
        n_classes: m,
        objects,
        waypoints,
        prior,
        noise: opts.noise.clone(),
        sensor: opts.sensor,
        placement: opts.placement,
        truth,
        retained,
    })
}

impl Scenario {
    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn n_steps(&self) -> usize {
        self.waypoints.len()
    }

    pub fn semantic_params(&self) -> Result<SemanticModelParams> {
        SemanticModelParams::new(self.n_classes, self.noise.sigma_s)
    }

    pub fn object_headings(&self) -> Vec<f64> {
        self.objects.iter().map(|o| o.pose.theta).collect()
    }

    pub fn visible(&self, t: usize) -> Vec<usize> {
        let robot = &self.waypoints[t];
        (0..self.objects.len())
            .filter(|&i| self.sensor.sees(robot, self.objects[i].pose.position()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.noise.validate()?;
        let (n, m) = (self.objects.len(), self.n_classes);
        if self.prior.n_objects() != n || self.prior.n_classes() != m {
            return Err(Error::Format("prior shape does not match the objects".into()));
        }
        self.truth.validate(n, m)?;
        for (o, c) in self.objects.iter().zip(self.truth.classes()) {
            if o.class != *c {
                return Err(Error::Format("truth does not match object classes".into()));
            }
        }
        for (i, c) in self.retained.iter().enumerate() {
            c.validate(n, m)?;
            if self.retained[..i].contains(c) {
                return Err(Error::DuplicateHypothesis(c.0.clone()));
            }
        }
        let contains = self.retained.contains(&self.truth);
        if contains != (self.placement == Placement::In) {
            return Err(Error::Format("retained set does not match the declared placement".into()));
        }
        if self.waypoints.is_empty() {
            return Err(Error::Format("empty trajectory".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    /// Simulates the measurements taken at step `t`, with every noise
    /// variance multiplied by `noise_scale`.
    pub fn step<R: Rng + ?Sized>(&self, t: usize, rng: &mut R, noise_scale: f64) -> Result<StepMeasurements> {
        let robot = *self.waypoints.get(t).ok_or(Error::MissingPose { step: t })?;
        let odometry = if t == 0 {
            None
        } else {
            let truth = self.waypoints[t - 1].between(&robot);
            let l = (self.noise.motion_model().process_noise_cov * noise_scale)
                .cholesky()
                .ok_or_else(|| Error::InvalidConfig("process noise is not positive definite".into()))?
                .l();
            let xi = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let e = l * xi;
            Some(truth.compose(&Pose2::new(e[0], e[1], e[2])))
        };
        let noisy_params = SemanticModelParams::new(self.n_classes, self.noise.sigma_s * noise_scale.sqrt())?;
        let bearing_sd = (self.noise.bearing_var * noise_scale).sqrt();
        let mut bearings = Vec::new();
        let mut semantics = Vec::new();
        for id in self.visible(t) {
            let obj = &self.objects[id];
            let b = bearing(&robot, obj.pose.position())?;
            bearings.push((id, crate::se2::wrap_angle(b + bearing_sd * rng.sample::<f64, _>(StandardNormal))));
            semantics.push((id, sample_observation(&robot, &obj.pose, obj.class, &noisy_params, rng)?));
        }
        Ok(StepMeasurements {
            odometry,
            bearings,
            semantics,
        })
    }
}
