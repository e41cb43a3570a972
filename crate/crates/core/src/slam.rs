//! Geometric-only estimation: robot poses and object positions from odometry
//! and bearing factors, solved by dense Gauss-Newton.
//!
//! The solution is summarized as a Gaussian (Laplace approximation around the
//! MAP estimate) from which joint trajectory samples are drawn. All semantic
//! expectations are taken over those samples.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se2::{bearing, wrap_angle, Pose2};

/// Relative-pose (odometry) noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionModel {
    pub process_noise_cov: Matrix3<f64>,
}

impl MotionModel {
    pub fn diagonal(var: [f64; 3]) -> Self {
        Self {
            process_noise_cov: Matrix3::from_diagonal(&Vector3::from(var)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Large-residual problems with weakly observed landmark ranges converge
    /// linearly, so this is generous.
    pub max_iters: usize,
    /// Stop once the relative cost decrease of an accepted step falls below this.
    pub relative_tolerance: f64,
    /// Range at which a landmark is placed on its first measured ray.
    pub landmark_init_range: f64,
    /// Variance of the weak position prior attached to every landmark at its
    /// initial guess, which keeps single-sighting landmarks well posed.
    pub landmark_prior_var: f64,
    /// Line-search steps may not bring a landmark closer than this to a pose
    /// that observes it, unless the current estimate is already closer. A
    /// landmark sitting on an observing pose makes its bearing arbitrary, which
    /// is a spurious attractor of the bearing-only cost.
    pub min_landmark_range: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            relative_tolerance: 1e-9,
            landmark_init_range: 3.0,
            landmark_prior_var: 1e6,
            min_landmark_range: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarKey {
    Pose(usize),
    Object(usize),
}

impl VarKey {
    pub fn dim(&self) -> usize {
        match self {
            VarKey::Pose(_) => 3,
            VarKey::Object(_) => 2,
        }
    }
}

/// Contiguous layout of the stacked state vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VariableIndex {
    entries: Vec<(VarKey, usize)>,
    dim: usize,
}

impl VariableIndex {
    fn push(&mut self, key: VarKey) {
        self.entries.push((key, self.dim));
        self.dim += key.dim();
    }

    pub fn offset(&self, key: VarKey) -> Option<usize> {
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, o)| *o)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn keys(&self) -> impl Iterator<Item = VarKey> + '_ {
        self.entries.iter().map(|(k, _)| *k)
    }

    pub fn entries(&self) -> &[(VarKey, usize)] {
        &self.entries
    }
}

#[derive(Debug, Clone)]
enum Factor {
    PosePrior {
        t: usize,
        mean: Pose2,
        info: Matrix3<f64>,
    },
    PointPrior {
        object: usize,
        mean: [f64; 2],
        info: Matrix2<f64>,
    },
    Odometry {
        from: usize,
        to: usize,
        meas: Pose2,
        info: Matrix3<f64>,
    },
    Bearing {
        t: usize,
        object: usize,
        meas: f64,
        info: f64,
    },
}

/// Gaussian summary of the geometric posterior.
#[derive(Debug, Clone)]
pub struct GeometricBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub index: VariableIndex,
    pub iterations: usize,
    pub final_cost: f64,
}

impl GeometricBelief {
    pub fn n_poses(&self) -> usize {
        self.index
            .keys()
            .filter(|k| matches!(k, VarKey::Pose(_)))
            .count()
    }

    pub fn pose(&self, t: usize) -> Option<Pose2> {
        let o = self.index.offset(VarKey::Pose(t))?;
        Some(Pose2::new(self.mean[o], self.mean[o + 1], self.mean[o + 2]))
    }

    pub fn object(&self, id: usize) -> Option<[f64; 2]> {
        let o = self.index.offset(VarKey::Object(id))?;
        Some([self.mean[o], self.mean[o + 1]])
    }

    /// Marginal covariance block of one variable.
    pub fn marginal(&self, key: VarKey) -> Option<DMatrix<f64>> {
        let o = self.index.offset(key)?;
        let d = key.dim();
        Some(self.covariance.view((o, o), (d, d)).into_owned())
    }

    /// Returns a copy with the covariance multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut b = self.clone();
        b.covariance *= factor;
        b
    }
}

/// One joint draw of all robot poses and the positions of the objects
/// observed so far. Object orientations are supplied by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub robot: Vec<Pose2>,
    pub objects: Vec<Option<Pose2>>,
}

/// Factor graph over robot poses `x_0..x_k` and object positions.
#[derive(Debug, Clone)]
pub struct FactorGraph {
    poses: Vec<Pose2>,
    objects: Vec<(usize, [f64; 2])>,
    factors: Vec<Factor>,
    config: SolverConfig,
}

fn information3(cov: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    cov.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::InvalidConfig("covariance is not positive definite".into()))
}

impl FactorGraph {
    /// Creates the graph with pose `x_0` and its prior.
    pub fn new(prior_mean: Pose2, prior_cov: Matrix3<f64>, config: SolverConfig) -> Result<Self> {
        let info = information3(&prior_cov)?;
        Ok(Self {
            poses: vec![prior_mean],
            objects: Vec::new(),
            factors: vec![Factor::PosePrior {
                t: 0,
                mean: prior_mean,
                info,
            }],
            config,
        })
    }

    pub fn n_poses(&self) -> usize {
        self.poses.len()
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn pose_estimate(&self, t: usize) -> Option<Pose2> {
        self.poses.get(t).copied()
    }

    pub fn object_estimate(&self, id: usize) -> Option<[f64; 2]> {
        self.objects.iter().find(|(i, _)| *i == id).map(|(_, p)| *p)
    }

    pub fn object_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.objects.iter().map(|(i, _)| *i)
    }

    /// Appends pose `x_{k+1}` with a relative-pose factor from `x_k`; returns
    /// the new pose index.
    pub fn add_odometry(&mut self, step: Pose2, noise: &MotionModel) -> Result<usize> {
        let from = self.poses.len() - 1;
        let info = information3(&noise.process_noise_cov)?;
        let guess = self.poses[from].compose(&step);
        self.poses.push(guess);
        self.factors.push(Factor::Odometry {
            from,
            to: from + 1,
            meas: step,
            info,
        });
        Ok(from + 1)
    }

    /// Bearing from pose `t` to object `object_id`. A new object is placed on
    /// the measured ray at the nominal initialization range.
    pub fn add_bearing(
        &mut self,
        t: usize,
        object_id: usize,
        bearing_meas: f64,
        variance: f64,
    ) -> Result<()> {
        let robot = *self.poses.get(t).ok_or(Error::MissingPose { step: t })?;
        if !(variance > 0.0) {
            return Err(Error::InvalidConfig("bearing variance must be positive".into()));
        }
        if self.object_estimate(object_id).is_none() {
            let r = self.config.landmark_init_range;
            let init = robot.transform_point([r * bearing_meas.cos(), r * bearing_meas.sin()]);
            self.objects.push((object_id, init));
            self.factors.push(Factor::PointPrior {
                object: object_id,
                mean: init,
                info: Matrix2::identity() / self.config.landmark_prior_var,
            });
        }
        bearing(&robot, self.object_estimate(object_id).unwrap())?;
        self.factors.push(Factor::Bearing {
            t,
            object: object_id,
            meas: wrap_angle(bearing_meas),
            info: 1.0 / variance,
        });
        Ok(())
    }

    pub fn add_pose_prior(&mut self, t: usize, mean: Pose2, cov: Matrix3<f64>) -> Result<()> {
        if t >= self.poses.len() {
            return Err(Error::MissingPose { step: t });
        }
        let info = information3(&cov)?;
        self.factors.push(Factor::PosePrior { t, mean, info });
        Ok(())
    }

    /// Position prior on an object; creates the object at `mean` if needed.
    pub fn add_point_prior(&mut self, object_id: usize, mean: [f64; 2], cov: Matrix2<f64>) -> Result<()> {
        let info = cov
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::InvalidConfig("covariance is not positive definite".into()))?;
        if self.object_estimate(object_id).is_none() {
            self.objects.push((object_id, mean));
        }
        self.factors.push(Factor::PointPrior {
            object: object_id,
            mean,
            info,
        });
        Ok(())
    }

    fn index(&self) -> VariableIndex {
        let mut index = VariableIndex::default();
        for t in 0..self.poses.len() {
            index.push(VarKey::Pose(t));
        }
        for (id, _) in &self.objects {
            index.push(VarKey::Object(*id));
        }
        index
    }

    fn object_slot(&self, id: usize) -> usize {
        self.objects.iter().position(|(i, _)| *i == id).unwrap()
    }

    /// Smallest distance between a landmark and a pose that has a bearing to it.
    fn min_bearing_distance(&self, poses: &[Pose2], objects: &[(usize, [f64; 2])]) -> f64 {
        let mut best = f64::INFINITY;
        for f in &self.factors {
            if let Factor::Bearing { t, object, .. } = f {
                let p = objects[self.object_slot(*object)].1;
                let d = (p[0] - poses[*t].x).hypot(p[1] - poses[*t].y);
                best = best.min(d);
            }
        }
        best
    }

    /// Half the sum of squared whitened residuals at the given estimate.
    fn cost_at(&self, poses: &[Pose2], objects: &[(usize, [f64; 2])]) -> Result<f64> {
        let mut cost = 0.0;
        for f in &self.factors {
            cost += match f {
                Factor::PosePrior { t, mean, info } => {
                    let r = pose_residual(&poses[*t], mean);
                    0.5 * r.dot(&(info * r))
                }
                Factor::PointPrior { object, mean, info } => {
                    let p = objects[self.object_slot(*object)].1;
                    let r = Vector2::new(p[0] - mean[0], p[1] - mean[1]);
                    0.5 * r.dot(&(info * r))
                }
                Factor::Odometry {
                    from,
                    to,
                    meas,
                    info,
                } => {
                    let (r, _, _) = odometry_residual(&poses[*from], &poses[*to], meas);
                    0.5 * r.dot(&(info * r))
                }
                Factor::Bearing {
                    t,
                    object,
                    meas,
                    info,
                } => {
                    let p = objects[self.object_slot(*object)].1;
                    let (r, _, _) = bearing_residual(&poses[*t], p, *meas)?;
                    0.5 * info * r * r
                }
            };
        }
        Ok(cost)
    }

    /// Gauss-Newton normal equations `H dx = -g` at the current estimate.
    fn linearize(&self, index: &VariableIndex) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = index.dim();
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        let pose_off = |t: usize| 3 * t;
        let obj_off = |id: usize| index.offset(VarKey::Object(id)).unwrap();

        for f in &self.factors {
            match f {
                Factor::PosePrior { t, mean, info } => {
                    let r = pose_residual(&self.poses[*t], mean);
                    let o = pose_off(*t);
                    add_block(&mut h, o, o, info);
                    add_vec(&mut g, o, &(info * r));
                }
                Factor::PointPrior { object, mean, info } => {
                    let p = self.objects[self.object_slot(*object)].1;
                    let r = Vector2::new(p[0] - mean[0], p[1] - mean[1]);
                    let o = obj_off(*object);
                    add_block(&mut h, o, o, info);
                    add_vec(&mut g, o, &(info * r));
                }
                Factor::Odometry {
                    from,
                    to,
                    meas,
                    info,
                } => {
                    let (r, ja, jb) = odometry_residual(&self.poses[*from], &self.poses[*to], meas);
                    let (oa, ob) = (pose_off(*from), pose_off(*to));
                    let wa = ja.transpose() * info;
                    let wb = jb.transpose() * info;
                    add_block(&mut h, oa, oa, &(wa * ja));
                    add_block(&mut h, oa, ob, &(wa * jb));
                    add_block(&mut h, ob, oa, &(wb * ja));
                    add_block(&mut h, ob, ob, &(wb * jb));
                    add_vec(&mut g, oa, &(wa * r));
                    add_vec(&mut g, ob, &(wb * r));
                }
                Factor::Bearing {
                    t,
                    object,
                    meas,
                    info,
                } => {
                    let p = self.objects[self.object_slot(*object)].1;
                    let (r, jp, jl) = bearing_residual(&self.poses[*t], p, *meas)?;
                    let (op, ol) = (pose_off(*t), obj_off(*object));
                    add_block(&mut h, op, op, &(jp * jp.transpose() * *info));
                    add_block(&mut h, op, ol, &(jp * jl.transpose() * *info));
                    add_block(&mut h, ol, op, &(jl * jp.transpose() * *info));
                    add_block(&mut h, ol, ol, &(jl * jl.transpose() * *info));
                    add_vec(&mut g, op, &(jp * (*info * r)));
                    add_vec(&mut g, ol, &(jl * (*info * r)));
                }
            }
        }
        Ok((h, g))
    }

    fn retract(&self, delta: &DVector<f64>, index: &VariableIndex, step: f64) -> (Vec<Pose2>, Vec<(usize, [f64; 2])>) {
        let poses = self
            .poses
            .iter()
            .enumerate()
            .map(|(t, p)| {
                let o = 3 * t;
                Pose2::new(
                    p.x + step * delta[o],
                    p.y + step * delta[o + 1],
                    p.theta + step * delta[o + 2],
                )
            })
            .collect();
        let objects = self
            .objects
            .iter()
            .map(|(id, p)| {
                let o = index.offset(VarKey::Object(*id)).unwrap();
                (*id, [p[0] + step * delta[o], p[1] + step * delta[o + 1]])
            })
            .collect();
        (poses, objects)
    }

    /// Runs Gauss-Newton from the current estimate and returns the Laplace
    /// approximation at convergence. The graph keeps the solution as its new
    /// linearization point.
    pub fn solve(&mut self) -> Result<GeometricBelief> {
        let index = self.index();
        let mut cost = self.cost_at(&self.poses, &self.objects)?;
        let mut iterations = 0;
        let mut converged = cost == 0.0;
        let mut last_decrease = f64::INFINITY;

        while !converged && iterations < self.config.max_iters {
            iterations += 1;
            let (h, g) = self.linearize(&index)?;
            let chol = damped_cholesky(&h).ok_or(Error::SingularHessian)?;
            let delta = -chol.solve(&g);
            if delta.amax() < 1e-14 {
                converged = true;
                break;
            }

            // Backtrack until the cost does not increase. After an accepted
            // step, also try the minimizer of the parabola through the cost and
            // slope at 0 and the cost at that step, since full steps tend to
            // overshoot along weakly observed landmark ranges.
            let slope = g.dot(&delta);
            let mut step = 1.0;
            let mut accepted = None;
            let range_floor = self
                .config
                .min_landmark_range
                .min(self.min_bearing_distance(&self.poses, &self.objects));
            for _ in 0..30 {
                let (p, o) = self.retract(&delta, &index, step);
                if self.min_bearing_distance(&p, &o) < range_floor {
                    step *= 0.5;
                    continue;
                }
                let c = self.cost_at(&p, &o)?;
                if c <= cost {
                    accepted = Some((p, o, c));
                    break;
                }
                step *= 0.5;
            }
            if let Some((_, _, c)) = &accepted {
                let curvature = (c - cost - slope * step) / (step * step);
                if curvature > 0.0 {
                    let best = -slope / (2.0 * curvature);
                    if best > 1e-3 * step && best < step {
                        let (p, o) = self.retract(&delta, &index, best);
                        if self.min_bearing_distance(&p, &o) >= range_floor {
                            let cb = self.cost_at(&p, &o)?;
                            if cb < *c {
                                accepted = Some((p, o, cb));
                            }
                        }
                    }
                }
            }
            let Some((p, o, new_cost)) = accepted else {
                converged = true;
                break;
            };
            self.poses = p;
            self.objects = o;
            last_decrease = if cost > 0.0 { (cost - new_cost) / cost } else { 0.0 };
            cost = new_cost;
            if last_decrease < self.config.relative_tolerance || cost == 0.0 {
                converged = true;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                iterations,
                relative_decrease: last_decrease,
            });
        }

        let (h, _) = self.linearize(&index)?;
        let covariance = h.cholesky().ok_or(Error::SingularHessian)?.inverse();
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        let mut mean = DVector::zeros(index.dim());
        for (t, p) in self.poses.iter().enumerate() {
            mean[3 * t] = p.x;
            mean[3 * t + 1] = p.y;
            mean[3 * t + 2] = p.theta;
        }
        for (id, p) in &self.objects {
            let o = index.offset(VarKey::Object(*id)).unwrap();
            mean[o] = p[0];
            mean[o + 1] = p[1];
        }
        Ok(GeometricBelief {
            mean,
            covariance,
            index,
            iterations,
            final_cost: cost,
        })
    }
}

/// Cholesky of `h`, retrying with growing Levenberg damping when the plain
/// normal equations are numerically indefinite away from the optimum.
fn damped_cholesky(h: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = h.clone().cholesky() {
        return Some(c);
    }
    let scale = h.diagonal().amax().max(1.0);
    let mut lambda = 1e-9 * scale;
    for _ in 0..20 {
        let mut damped = h.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += lambda;
        }
        if let Some(c) = damped.cholesky() {
            return Some(c);
        }
        lambda *= 10.0;
    }
    None
}

fn add_block<R: nalgebra::Dim, C: nalgebra::Dim, S>(
    h: &mut DMatrix<f64>,
    row: usize,
    col: usize,
    block: &nalgebra::Matrix<f64, R, C, S>,
) where
    S: nalgebra::RawStorage<f64, R, C>,
{
    for i in 0..block.nrows() {
        for j in 0..block.ncols() {
            h[(row + i, col + j)] += block[(i, j)];
        }
    }
}

fn add_vec<R: nalgebra::Dim, S>(g: &mut DVector<f64>, row: usize, v: &nalgebra::Matrix<f64, R, nalgebra::U1, S>)
where
    S: nalgebra::RawStorage<f64, R, nalgebra::U1>,
{
    for i in 0..v.nrows() {
        g[row + i] += v[i];
    }
}

fn pose_residual(p: &Pose2, mean: &Pose2) -> Vector3<f64> {
    Vector3::new(p.x - mean.x, p.y - mean.y, wrap_angle(p.theta - mean.theta))
}

/// Residual `between(meas, between(a, b))` and its Jacobians w.r.t. `a`, `b`.
fn odometry_residual(a: &Pose2, b: &Pose2, meas: &Pose2) -> (Vector3<f64>, Matrix3<f64>, Matrix3<f64>) {
    let (sa, ca) = a.theta.sin_cos();
    let (sm, cm) = meas.theta.sin_cos();
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    // Predicted relative pose.
    let px = ca * dx + sa * dy;
    let py = -sa * dx + ca * dy;
    let pt = wrap_angle(b.theta - a.theta);
    // Residual, rotated into the measurement frame.
    let ex = px - meas.x;
    let ey = py - meas.y;
    let r = Vector3::new(cm * ex + sm * ey, -sm * ex + cm * ey, wrap_angle(pt - meas.theta));

    let rm = nalgebra::Matrix2::new(cm, sm, -sm, cm);
    let rot_a = nalgebra::Matrix2::new(ca, sa, -sa, ca);
    let d_pred_dtheta = Vector2::new(-sa * dx + ca * dy, -ca * dx - sa * dy);

    let mut ja = Matrix3::zeros();
    let mut jb = Matrix3::zeros();
    let dxy_dpa = rm * (-rot_a);
    let dxy_dpb = rm * rot_a;
    let dxy_dta = rm * d_pred_dtheta;
    for i in 0..2 {
        for j in 0..2 {
            ja[(i, j)] = dxy_dpa[(i, j)];
            jb[(i, j)] = dxy_dpb[(i, j)];
        }
        ja[(i, 2)] = dxy_dta[i];
    }
    ja[(2, 2)] = -1.0;
    jb[(2, 2)] = 1.0;
    (r, ja, jb)
}

/// Bearing residual with gradients w.r.t. the pose and the landmark.
fn bearing_residual(pose: &Pose2, landmark: [f64; 2], meas: f64) -> Result<(f64, Vector3<f64>, Vector2<f64>)> {
    let pred = bearing(pose, landmark)?;
    let dx = landmark[0] - pose.x;
    let dy = landmark[1] - pose.y;
    let q = dx * dx + dy * dy;
    let jp = Vector3::new(dy / q, -dx / q, -1.0);
    let jl = Vector2::new(-dy / q, dx / q);
    Ok((wrap_angle(pred - meas), jp, jl))
}

/// Draws `n_samples` joint samples `mean + L xi` with `L L^T` the joint
/// covariance. Object headings are taken from `object_headings` (indexed by
/// object id); objects absent from the belief are `None`.
pub fn draw_samples(
    belief: &GeometricBelief,
    n_samples: usize,
    seed: u64,
    object_headings: &[f64],
) -> Result<Vec<TrajectorySample>> {
    let n = belief.index.dim();
    let chol = cholesky_psd(&belief.covariance).ok_or(Error::SingularHessian)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_poses = belief.n_poses();
    for key in belief.index.keys() {
        if let VarKey::Object(id) = key {
            if id >= object_headings.len() {
                return Err(Error::UnknownObject(id));
            }
        }
    }

    let mut out = Vec::with_capacity(n_samples);
    let mut xi = DVector::<f64>::zeros(n);
    for _ in 0..n_samples {
        for v in xi.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let x = &belief.mean + &chol * &xi;
        let robot = (0..n_poses)
            .map(|t| Pose2::new(x[3 * t], x[3 * t + 1], x[3 * t + 2]))
            .collect();
        let mut objects = vec![None; object_headings.len()];
        for &(key, o) in belief.index.entries() {
            if let VarKey::Object(id) = key {
                objects[id] = Some(Pose2::new(x[o], x[o + 1], object_headings[id]));
            }
        }
        out.push(TrajectorySample { robot, objects });
    }
    Ok(out)
}

/// Lower Cholesky factor; a zero matrix (degenerate belief) yields zero.
fn cholesky_psd(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if cov.iter().all(|v| *v == 0.0) {
        return Some(DMatrix::zeros(cov.nrows(), cov.ncols()));
    }
    cov.clone().cholesky().map(|c| c.l())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn diag3(a: f64, b: f64, c: f64) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(a, b, c))
    }

    fn tight() -> Matrix3<f64> {
        diag3(1e-10, 1e-10, 1e-10)
    }

    #[test]
    fn prior_only_problem() {
        let cov = diag3(0.01, 0.01, 0.001);
        let mut g = FactorGraph::new(Pose2::new(1.0, 2.0, 0.3), cov, SolverConfig::default()).unwrap();
        let b = g.solve().unwrap();
        assert_eq!(b.pose(0).unwrap(), Pose2::new(1.0, 2.0, 0.3));
        assert!((b.covariance.clone() - DMatrix::from_column_slice(3, 3, cov.as_slice())).amax() < 1e-15);
    }

    #[test]
    fn identity_odometry_chain_stays_at_prior() {
        let mut g = FactorGraph::new(Pose2::new(0.5, -1.0, 0.2), diag3(0.01, 0.01, 0.001), SolverConfig::default()).unwrap();
        let motion = MotionModel::diagonal([0.3, 0.3, 0.03]);
        for _ in 0..5 {
            g.add_odometry(Pose2::identity(), &motion).unwrap();
        }
        let b = g.solve().unwrap();
        for t in 0..6 {
            let p = b.pose(t).unwrap();
            assert!((p.x - 0.5).abs() < 1e-12 && (p.y + 1.0).abs() < 1e-12 && (p.theta - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_odometry_step() {
        let mut g = FactorGraph::new(Pose2::identity(), tight(), SolverConfig::default()).unwrap();
        g.add_odometry(Pose2::new(1.0, 0.0, 0.0), &MotionModel { process_noise_cov: tight() }).unwrap();
        let p = g.solve().unwrap().pose(1).unwrap();
        assert!((p.x - 1.0).abs() < 1e-6 && p.y.abs() < 1e-6 && p.theta.abs() < 1e-6);
    }

    #[test]
    fn two_ray_triangulation() {
        let target = [1.3, 2.1];
        let mut g = FactorGraph::new(Pose2::identity(), tight(), SolverConfig::default()).unwrap();
        let step = Pose2::new(2.0, 0.0, 0.4);
        g.add_odometry(step, &MotionModel { process_noise_cov: tight() }).unwrap();
        let x1 = Pose2::identity().compose(&step);
        g.add_bearing(0, 0, bearing(&Pose2::identity(), target).unwrap(), 1e-6).unwrap();
        g.add_bearing(1, 0, bearing(&x1, target).unwrap(), 1e-6).unwrap();
        let b = g.solve().unwrap();

        // Closed-form intersection of the two world-frame rays.
        let a0 = bearing(&Pose2::identity(), target).unwrap();
        let a1 = bearing(&x1, target).unwrap() + x1.theta;
        let (d0, d1) = ([a0.cos(), a0.sin()], [a1.cos(), a1.sin()]);
        let det = d0[0] * (-d1[1]) - d0[1] * (-d1[0]);
        let rhs = [x1.x, x1.y];
        let s = (rhs[0] * (-d1[1]) - rhs[1] * (-d1[0])) / det;
        let expected = [s * d0[0], s * d0[1]];

        let got = b.object(0).unwrap();
        assert!((got[0] - expected[0]).abs() < 1e-4 && (got[1] - expected[1]).abs() < 1e-4, "{got:?} vs {expected:?}");
    }

    #[test]
    fn single_sighting_sits_on_ray() {
        let mut g = FactorGraph::new(Pose2::new(1.0, 1.0, 0.5), diag3(0.01, 0.01, 0.001), SolverConfig::default()).unwrap();
        g.add_bearing(0, 3, 0.7, 0.03).unwrap();
        let b = g.solve().unwrap();
        let p = b.object(3).unwrap();
        let x0 = b.pose(0).unwrap();
        assert!(wrap_angle(bearing(&x0, p).unwrap() - 0.7).abs() < 1e-9);
        assert!((x0.distance_to(p) - 3.0).abs() < 1e-6);
        assert!(b.covariance.clone().cholesky().is_some());
    }

    #[test]
    fn degenerate_bearing_rejected() {
        let mut g = FactorGraph::new(Pose2::identity(), tight(), SolverConfig::default()).unwrap();
        g.add_point_prior(0, [0.0, 0.0], Matrix2::identity()).unwrap();
        assert!(matches!(g.add_bearing(0, 0, 0.1, 0.03), Err(Error::DegeneratePoint { .. })));
    }

    /// Position-only problem: several Gaussian priors on the same variables.
    /// The posterior is the information-weighted fusion of the priors.
    #[test]
    fn linear_gaussian_matches_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let random_spd3 = |rng: &mut ChaCha8Rng| {
                let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                a * a.transpose() + Matrix3::identity() * 0.1
            };
            let random_spd2 = |rng: &mut ChaCha8Rng| {
                let a = Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0));
                a * a.transpose() + Matrix2::identity() * 0.1
            };
            let m0 = Pose2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
            let m1 = Pose2::new(m0.x + 0.2, m0.y - 0.1, m0.theta + 0.1);
            let (c0, c1) = (random_spd3(&mut rng), random_spd3(&mut rng));
            let p0 = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let p1 = [p0[0] - 0.5, p0[1] + 0.3];
            let (d0, d1) = (random_spd2(&mut rng), random_spd2(&mut rng));

            let mut g = FactorGraph::new(m0, c0, SolverConfig::default()).unwrap();
            g.add_pose_prior(0, m1, c1).unwrap();
            g.add_point_prior(7, p0, d0).unwrap();
            g.add_point_prior(7, p1, d1).unwrap();
            let b = g.solve().unwrap();

            let (i0, i1) = (c0.try_inverse().unwrap(), c1.try_inverse().unwrap());
            let cov_pose = (i0 + i1).try_inverse().unwrap();
            let mean_pose = cov_pose * (i0 * Vector3::new(m0.x, m0.y, m0.theta) + i1 * Vector3::new(m1.x, m1.y, m1.theta));
            let (j0, j1) = (d0.try_inverse().unwrap(), d1.try_inverse().unwrap());
            let cov_pt = (j0 + j1).try_inverse().unwrap();
            let mean_pt = cov_pt * (j0 * Vector2::from(p0) + j1 * Vector2::from(p1));

            let p = b.pose(0).unwrap();
            assert!((Vector3::new(p.x, p.y, p.theta) - mean_pose).amax() < 1e-9);
            assert!((Vector2::from(b.object(7).unwrap()) - mean_pt).amax() < 1e-9);
            let mp = b.marginal(VarKey::Pose(0)).unwrap();
            let mo = b.marginal(VarKey::Object(7)).unwrap();
            assert!((mp - DMatrix::from_column_slice(3, 3, cov_pose.as_slice())).amax() < 1e-9);
            assert!((mo - DMatrix::from_column_slice(2, 2, cov_pt.as_slice())).amax() < 1e-9);

            // Scaling every covariance by s scales the posterior covariance by s.
            let s = 3.7;
            let mut gs = FactorGraph::new(m0, c0 * s, SolverConfig::default()).unwrap();
            gs.add_pose_prior(0, m1, c1 * s).unwrap();
            gs.add_point_prior(7, p0, d0 * s).unwrap();
            gs.add_point_prior(7, p1, d1 * s).unwrap();
            let bs = gs.solve().unwrap();
            assert!((&bs.mean - &b.mean).amax() < 1e-9);
            assert!((&bs.covariance - &b.covariance * s).amax() < 1e-9);
        }
    }

    /// Independent least-squares oracle: numeric Jacobians of directly coded
    /// residuals, dense normal equations, plain Gauss-Newton.
    fn oracle_map(
        x0: Pose2,
        prior_info: Matrix3<f64>,
        odo: &[(Pose2, Matrix3<f64>)],
        bearings: &[(usize, usize, f64, f64)],
        landmark_priors: &[([f64; 2], f64)],
        init: DVector<f64>,
        n_poses: usize,
    ) -> DVector<f64> {
        let wrap = |a: f64| a.sin().atan2(a.cos());
        let sqrt_info = |m: Matrix3<f64>| m.cholesky().unwrap().l().transpose();
        let whitened = |x: &DVector<f64>| -> DVector<f64> {
            let pose = |t: usize| (x[3 * t], x[3 * t + 1], x[3 * t + 2]);
            let mut r = Vec::new();
            let (px, py, pt) = pose(0);
            let e = sqrt_info(prior_info) * Vector3::new(px - x0.x, py - x0.y, wrap(pt - x0.theta));
            r.extend(e.iter());
            for (i, (m, info)) in odo.iter().enumerate() {
                let (ax, ay, at) = pose(i);
                let (bx, by, bt) = pose(i + 1);
                // Relative pose in a's frame, then compared to m in m's frame.
                let rx = at.cos() * (bx - ax) + at.sin() * (by - ay);
                let ry = -at.sin() * (bx - ax) + at.cos() * (by - ay);
                let ex = m.theta.cos() * (rx - m.x) + m.theta.sin() * (ry - m.y);
                let ey = -m.theta.sin() * (rx - m.x) + m.theta.cos() * (ry - m.y);
                let e = sqrt_info(*info) * Vector3::new(ex, ey, wrap(bt - at - m.theta));
                r.extend(e.iter());
            }
            for &(t, obj, meas, var) in bearings {
                let (px, py, pt) = pose(t);
                let o = 3 * n_poses + 2 * obj;
                let pred = (x[o + 1] - py).atan2(x[o] - px) - pt;
                r.push(wrap(pred - meas) / var.sqrt());
            }
            for (obj, (m, var)) in landmark_priors.iter().enumerate() {
                let o = 3 * n_poses + 2 * obj;
                r.push((x[o] - m[0]) / var.sqrt());
                r.push((x[o + 1] - m[1]) / var.sqrt());
            }
            DVector::from_vec(r)
        };
        let mut x = init;
        for _ in 0..100 {
            let r0 = whitened(&x);
            let mut j = DMatrix::zeros(r0.len(), x.len());
            for k in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += 1e-7;
                xm[k] -= 1e-7;
                let col = (whitened(&xp) - whitened(&xm)) / 2e-7;
                j.set_column(k, &col);
            }
            let h = j.transpose() * &j;
            let step = h.cholesky().unwrap().solve(&(-j.transpose() * &r0));
            x += &step;
            if step.amax() < 1e-13 {
                break;
            }
        }
        x
    }

    #[test]
    fn randomized_chains_match_least_squares_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10 {
            let n_steps = 3 + trial % 4;
            let prior_cov = diag3(0.01, 0.01, 0.001);
            let x0 = Pose2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let mut g = FactorGraph::new(x0, prior_cov, SolverConfig::default()).unwrap();
            let mut odo = Vec::new();
            for _ in 0..n_steps {
                let m = Pose2::new(rng.random_range(0.5..1.5), rng.random_range(-0.3..0.3), rng.random_range(-0.4..0.4));
                let cov = diag3(rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.01..0.05));
                g.add_odometry(m, &MotionModel { process_noise_cov: cov }).unwrap();
                odo.push((m, cov));
            }
            let landmarks = [[2.0, 3.0], [4.0, -2.5]];
            let mut bearings = Vec::new();
            for t in 0..=n_steps {
                for (id, l) in landmarks.iter().enumerate() {
                    let est = g.pose_estimate(t).unwrap();
                    let meas = bearing(&est, *l).unwrap() + rng.random_range(-0.05..0.05);
                    g.add_bearing(t, id, meas, 0.03).unwrap();
                    bearings.push((t, id, meas, 0.03));
                }
            }
            // Start the oracle from the solver's own starting point so both
            // converge to the same basin.
            let n_poses = n_steps + 1;
            let mut init = DVector::zeros(3 * n_poses + 4);
            for t in 0..n_poses {
                let p = g.pose_estimate(t).unwrap();
                init[3 * t] = p.x;
                init[3 * t + 1] = p.y;
                init[3 * t + 2] = p.theta;
            }
            for id in 0..2 {
                let p = g.object_estimate(id).unwrap();
                init[3 * n_poses + 2 * id] = p[0];
                init[3 * n_poses + 2 * id + 1] = p[1];
            }
            // Both sides carry the same weak prior at each landmark's first guess.
            let landmark_priors: Vec<_> = (0..2)
                .map(|id| (g.object_estimate(id).unwrap(), SolverConfig::default().landmark_prior_var))
                .collect();
            let b = g.solve().unwrap();
            let prior_info = prior_cov.try_inverse().unwrap();
            let odo_info: Vec<_> = odo.iter().map(|(m, c)| (*m, c.try_inverse().unwrap())).collect();
            let x = oracle_map(x0, prior_info, &odo_info, &bearings, &landmark_priors, init, n_poses);
            for t in 0..n_poses {
                let p = b.pose(t).unwrap();
                assert!((p.x - x[3 * t]).abs() < 1e-5, "trial {trial} pose {t}");
                assert!((p.y - x[3 * t + 1]).abs() < 1e-5);
                assert!(wrap_angle(p.theta - x[3 * t + 2]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn cost_non_increasing_and_index_consistent() {
        let mut g = FactorGraph::new(Pose2::identity(), diag3(0.01, 0.01, 0.001), SolverConfig::default()).unwrap();
        let motion = MotionModel::diagonal([0.3, 0.3, 0.03]);
        let lm = [3.0, 1.0];
        let mut truth = Pose2::identity();
        for t in 1..6 {
            let step = Pose2::new(1.0, 0.0, 0.2);
            truth = truth.compose(&step);
            g.add_odometry(Pose2::new(1.1, 0.05, 0.18), &motion).unwrap();
            g.add_bearing(t, 0, bearing(&truth, lm).unwrap(), 0.03).unwrap();
        }
        let before = g.cost_at(&g.poses, &g.objects).unwrap();
        let b = g.solve().unwrap();
        assert!(b.final_cost <= before);
        for &(key, o) in b.index.entries() {
            let d = key.dim();
            let block = b.covariance.view((o, o), (d, d)).into_owned();
            assert_eq!(b.marginal(key).unwrap(), block);
        }
        let offs: Vec<usize> = b.index.entries().iter().map(|e| e.1).collect();
        assert_eq!(offs[0], 0);
        for w in b.index.entries().windows(2) {
            assert_eq!(w[1].1, w[0].1 + w[0].0.dim());
        }
    }

    #[test]
    fn samples_deterministic_and_degenerate_limit() {
        let mut g = FactorGraph::new(Pose2::identity(), diag3(0.01, 0.01, 0.001), SolverConfig::default()).unwrap();
        g.add_odometry(Pose2::new(1.0, 0.0, 0.1), &MotionModel::diagonal([0.3, 0.3, 0.03])).unwrap();
        g.add_bearing(1, 0, 0.5, 0.03).unwrap();
        let b = g.solve().unwrap();
        let a1 = draw_samples(&b, 5, 42, &[0.7]).unwrap();
        let a2 = draw_samples(&b, 5, 42, &[0.7]).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1[0].objects[0].unwrap().theta, 0.7);

        let tiny = b.scaled(1e-18);
        for s in draw_samples(&tiny, 10, 1, &[0.7]).unwrap() {
            for (t, p) in s.robot.iter().enumerate() {
                let m = b.pose(t).unwrap();
                assert!((p.x - m.x).abs() < 1e-8 && (p.y - m.y).abs() < 1e-8);
            }
        }
        assert!(matches!(draw_samples(&b, 1, 1, &[]), Err(Error::UnknownObject(0))));
    }

    #[test]
    fn sample_moments_match_belief() {
        let mut g = FactorGraph::new(Pose2::new(0.0, 0.0, 0.1), diag3(0.01, 0.02, 0.001), SolverConfig::default()).unwrap();
        g.add_odometry(Pose2::new(1.0, 0.2, 0.1), &MotionModel::diagonal([0.3, 0.3, 0.03])).unwrap();
        let b = g.solve().unwrap();
        let n = 100_000;
        let samples = draw_samples(&b, n, 8, &[]).unwrap();
        let d = b.index.dim();
        let vecs: Vec<DVector<f64>> = samples
            .iter()
            .map(|s| DVector::from_iterator(d, s.robot.iter().flat_map(|p| [p.x, p.y, p.theta])))
            .collect();
        let mean = vecs.iter().fold(DVector::zeros(d), |a, v| a + v) / n as f64;
        for i in 0..d {
            let se = (b.covariance[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - b.mean[i]).abs() < 3.0 * se, "mean {i}");
        }
        for i in 0..d {
            for j in 0..d {
                let cov: f64 = vecs.iter().map(|v| (v[i] - mean[i]) * (v[j] - mean[j])).sum::<f64>() / (n - 1) as f64;
                // Standard error of a Gaussian sample covariance entry.
                let se = ((b.covariance[(i, i)] * b.covariance[(j, j)] + b.covariance[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((cov - b.covariance[(i, j)]).abs() < 3.0 * se, "cov ({i},{j}) {cov} vs {}", b.covariance[(i, j)]);
            }
        }
    }
}
