//! Gradient methods driven through an ε-approximate gradient oracle.
//!
//! The oracle answers with the sphere-averaged gradient `E_{w*}[∇F(w)]`
//! whenever the true gradient lies within `ε` of it, and with the true
//! gradient otherwise. Trajectories that only ever see the averaged answer
//! do not depend on `w*`, which is checked here by bit-level comparison of
//! runs against different targets.

use crate::distributions::{bound_tail_sum, GaussianMixture};
use crate::error::{check_dim, invalid, LabError, Result};
use crate::numeric::{integrate_pieces, Moments};
use crate::objective::{grad_mc, Prepared, Problem};
use crate::rng::{derive_seed, map_indexed, stream_rng};
use crate::variance_lab::sample_wstar_sphere;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::RwLock;

const TAG_INIT: u64 = 11;
const TAG_TARGETS: u64 = 12;
const TAG_DATA: u64 = 13;
const TAG_BATCH: u64 = 14;
/// Terms summed explicitly in the bound series.
const SERIES_TERMS: usize = 64;
/// The mean is trusted when its Monte-Carlo error is below `ε / VALIDITY_MARGIN`.
pub const VALIDITY_MARGIN: f64 = 10.0;

/// `ε = ∛(c₂ · sup G · (e^{−c₃ d} + Σ_{n≥1} ε(n r)))` with
/// `sup G = 4π² E‖x‖²`.
pub fn recipe_epsilon(mixture: &GaussianMixture, r: f64, c2: f64, c3: f64) -> Result<f64> {
    let sup_g = 4.0 * PI * PI * mixture.second_moment_trace();
    let series = bound_tail_sum(&mixture.epsilon_profile(), r, SERIES_TERMS)?.total();
    Ok((c2 * sup_g * ((-c3 * mixture.dim() as f64).exp() + series)).cbrt())
}

/// Where the sphere average comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanSource {
    /// Average over `draws` fixed targets sampled with `seed`.
    MonteCarlo { draws: usize, seed: u64 },
    /// One-dimensional quadrature over the angle to `w`; isotropic inputs only.
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// `None` selects [`recipe_epsilon`] with `c₂ = c₃ = 1`.
    pub epsilon: Option<f64>,
    pub mean: MeanSource,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            mean: MeanSource::MonteCarlo { draws: 10_000, seed: 0x5eed },
            max_iters: 1000,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn resolve_epsilon(&self, problem: &Problem) -> Result<f64> {
        let eps = match self.epsilon {
            Some(e) => e,
            None => recipe_epsilon(problem.mixture(), problem.wstar_norm() / 2.0, 1.0, 1.0)?,
        };
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(invalid("epsilon", format!("{eps} must be positive")));
        }
        Ok(eps)
    }
}

/// Sphere-averaged target-dependent gradient part, cached per probe point.
///
/// Depends on the problem only through its inputs, family and target radius,
/// so one table serves every target on the sphere.
pub struct SphereMean {
    problem: Problem,
    radius: f64,
    source: MeanSource,
    draws: Vec<Prepared>,
    cache: RwLock<HashMap<Vec<u64>, (Vec<f64>, f64)>>,
}

impl std::fmt::Debug for SphereMean {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SphereMean")
            .field("radius", &self.radius)
            .field("source", &self.source)
            .field("draws", &self.draws.len())
            .finish()
    }
}

impl SphereMean {
    pub fn new(problem: &Problem, radius: f64, source: MeanSource) -> Result<Self> {
        if !problem.has_closed_form() {
            return Err(LabError::Unsupported("the sphere mean needs closed-form gradients".into()));
        }
        if !(radius > 0.0) {
            return Err(invalid("radius", "must be positive"));
        }
        let draws = match source {
            MeanSource::MonteCarlo { draws, seed } => {
                if draws < 2 {
                    return Err(invalid("draws", "need at least 2 draws"));
                }
                let m = sample_wstar_sphere(problem.dim(), radius, draws, seed)?;
                m.row_iter()
                    .map(|r| problem.prepare(&r.iter().copied().collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>>>()?
            }
            MeanSource::Quadrature => {
                isotropic_variance(problem.mixture())?;
                Vec::new()
            }
        };
        Ok(Self {
            problem: problem.clone(),
            radius,
            source,
            draws,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Mean target-dependent part at `w` and the Euclidean norm of its
    /// per-coordinate standard errors.
    pub fn target_mean(&self, w: &[f64]) -> Result<(Vec<f64>, f64)> {
        let key: Vec<u64> = w.iter().map(|v| v.to_bits()).collect();
        if let Some(hit) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let value = match self.source {
            MeanSource::MonteCarlo { .. } => self.mc_mean(w)?,
            MeanSource::Quadrature => {
                let base = self.problem.closed_base(&self.problem.prepare(w)?);
                let full = sphere_mean_gradient_quadrature(&self.problem, w, self.radius)?;
                (full.iter().zip(&base).map(|(a, b)| a - b).collect(), 0.0)
            }
        };
        self.cache.write().expect("cache lock").insert(key, value.clone());
        Ok(value)
    }

    fn mc_mean(&self, w: &[f64]) -> Result<(Vec<f64>, f64)> {
        let pw = self.problem.prepare(w)?;
        let d = w.len();
        let mut acc = vec![Moments::new(); d];
        let mut g = vec![0.0; d];
        for t in &self.draws {
            g.iter_mut().for_each(|v| *v = 0.0);
            self.problem.add_target_part(&pw, t, &mut g);
            for (m, v) in acc.iter_mut().zip(&g) {
                m.push(*v);
            }
        }
        let mean = acc.iter().map(Moments::mean).collect();
        let err = acc.iter().map(|m| m.std_error().powi(2)).sum::<f64>().sqrt();
        Ok((mean, err))
    }

    /// `E_{w*}[∇F(w)]`.
    pub fn mean_gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let base = self.problem.closed_base(&self.problem.prepare(w)?);
        let (t, _) = self.target_mean(w)?;
        Ok(base.iter().zip(&t).map(|(a, b)| a + b).collect())
    }

    pub fn cached_points(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }
}

fn isotropic_variance(m: &GaussianMixture) -> Result<f64> {
    let unsupported = || LabError::Unsupported("quadrature needs a single isotropic zero-mean component".into());
    if m.components().len() != 1 || !m.is_zero_mean() {
        return Err(unsupported());
    }
    let c = m.components()[0].covariance();
    let s = c[(0, 0)];
    let d = m.dim();
    for i in 0..d {
        for j in 0..d {
            let expect = if i == j { s } else { 0.0 };
            if c[(i, j)] != expect {
                return Err(unsupported());
            }
        }
    }
    Ok(s)
}

/// Sphere mean of the closed-form gradient for isotropic inputs
/// `N(0, s I)`, reduced to an integral over the angle `θ` between `w` and
/// `w*` with density `∝ sin^{d−2} θ`.
pub fn sphere_mean_gradient_quadrature(problem: &Problem, w: &[f64], radius: f64) -> Result<Vec<f64>> {
    let s = isotropic_variance(problem.mixture())?;
    if !problem.has_closed_form() {
        return Err(LabError::Unsupported("closed form unavailable".into()));
    }
    check_dim(problem.dim(), w.len())?;
    let d = problem.dim();
    let base = problem.closed_base(&problem.prepare(w)?);
    let norm_w = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_w == 0.0 {
        return Ok(base);
    }
    let k = 2.0 * PI * PI * s;
    // Both terms contribute equally after w* → −w*, leaving
    // 2 · 4π² s · E[e^{−k‖w−w*‖²} (‖w‖ − R cos θ)] along w/‖w‖.
    // The exponential is factored as e^{−k(‖w‖−R)²} · e^{−2k‖w‖R(1 − cos θ)}
    // so the quadrature sees an integrand of unit peak height.
    let peak = (-k * (norm_w - radius).powi(2)).exp();
    let integrand = |c: f64| (-2.0 * k * norm_w * radius * (1.0 - c)).exp() * (norm_w - radius * c);
    let coef = if d == 1 {
        0.5 * peak * (integrand(1.0) + integrand(-1.0))
    } else {
        let p = (d - 2) as i32;
        let weight = |t: f64| t.sin().powi(p);
        let tol = 1e-14;
        // The peak at θ = 0 has width about 1/sqrt(2k‖w‖R); geometric
        // breakpoints keep the refinement from stepping over it.
        let width = 1.0 / (2.0 * k * norm_w * radius).sqrt();
        let mut breaks = vec![0.0];
        let mut b = width.min(PI) / 4.0;
        while b < PI {
            breaks.push(b);
            b *= 2.0;
        }
        breaks.push(PI);
        let num = integrate_pieces(&|t: f64| weight(t) * integrand(t.cos()), &breaks, tol, 8);
        let den = integrate_pieces(&weight, &[0.0, PI], tol, 8);
        peak * num / den
    };
    let scale = 8.0 * PI * PI * s * coef / norm_w;
    Ok(base.iter().zip(w).map(|(b, wi)| b + scale * wi).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// The oracle returned the sphere mean.
    Mean,
    /// The oracle returned the true gradient.
    True,
    /// No oracle: the true gradient was used directly.
    Honest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub gradient: Vec<f64>,
    pub branch: Branch,
    /// `‖∇F_{w*}(w) − E_{w*}[∇F(w)]‖`.
    pub distance: f64,
    /// Monte-Carlo error of the mean at this point.
    pub mean_error: f64,
}

/// One oracle call at `w`.
pub fn oracle_query(problem: &Problem, mean: &SphereMean, epsilon: f64, w: &[f64]) -> Result<OracleResponse> {
    check_dim(problem.dim(), w.len())?;
    let pw = problem.prepare(w)?;
    let pt = problem.prepare(problem.wstar())?;
    let mut own = vec![0.0; w.len()];
    problem.add_target_part(&pw, &pt, &mut own);
    let (avg, mean_error) = mean.target_mean(w)?;
    let distance = own.iter().zip(&avg).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let base = problem.closed_base(&pw);
    let (part, branch) = if distance <= epsilon { (avg, Branch::Mean) } else { (own, Branch::True) };
    Ok(OracleResponse {
        gradient: base.iter().zip(&part).map(|(a, b)| a + b).collect(),
        branch,
        distance,
        mean_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainerKind {
    Gd,
    NormalizedGd,
    /// Minibatch gradients on a fixed sample of `sample_size` inputs.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant,
    /// `η / sqrt(t)`.
    InvSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitRule {
    /// Random unit vector times `scale`, drawn from the trainer seed only.
    RandomUnit { scale: f64 },
    Fixed { w: Vec<f64> },
    /// `w* + offset · u` with a random unit `u`.
    NearTarget { offset: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Trainer {
    pub kind: TrainerKind,
    pub step: f64,
    pub schedule: StepSchedule,
    pub init: InitRule,
    /// Optional radius of the norm ball iterates are projected onto.
    pub projection: Option<f64>,
    pub iters: usize,
    pub seed: u64,
    pub sample_size: usize,
    pub batch_size: usize,
}

impl Default for Trainer {
    fn default() -> Self {
        Self {
            kind: TrainerKind::Gd,
            step: 0.02,
            schedule: StepSchedule::Constant,
            init: InitRule::RandomUnit { scale: 1.0 },
            projection: None,
            iters: 1000,
            seed: 0,
            sample_size: 10_000,
            batch_size: 100,
        }
    }
}

impl Trainer {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(invalid("step", "step size must be positive"));
        }
        if let Some(r) = self.projection {
            if !(r > 0.0) {
                return Err(invalid("projection", "radius must be positive"));
            }
        }
        if self.kind == TrainerKind::Sgd && (self.sample_size == 0 || self.batch_size == 0) {
            return Err(invalid("batch_size", "sample and batch sizes must be positive"));
        }
        Ok(())
    }

    fn step_at(&self, t: usize) -> f64 {
        match self.schedule {
            StepSchedule::Constant => self.step,
            StepSchedule::InvSqrt => self.step / (t as f64).sqrt(),
        }
    }

    pub fn initial_point(&self, problem: &Problem) -> Result<Vec<f64>> {
        let d = problem.dim();
        let unit = || -> Result<Vec<f64>> {
            let m = sample_wstar_sphere(d, 1.0, 1, derive_seed(self.seed, &[TAG_INIT]))?;
            Ok(m.row(0).iter().copied().collect())
        };
        match &self.init {
            InitRule::RandomUnit { scale } => Ok(unit()?.iter().map(|v| v * scale).collect()),
            InitRule::Fixed { w } => {
                check_dim(problem.family().n_params(), w.len())?;
                Ok(w.clone())
            }
            InitRule::NearTarget { offset } => Ok(problem
                .wstar()
                .iter()
                .zip(unit()?)
                .map(|(a, u)| a + offset * u)
                .collect()),
        }
    }
}

/// How true gradients are computed when no oracle sits in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HonestGradient {
    ClosedForm,
    MonteCarlo { n: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub enum Feedback<'a> {
    Oracle { mean: &'a SphereMean, epsilon: f64 },
    Honest(HonestGradient),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub init: Vec<f64>,
    /// `iterates[t]` is the point after step `t + 1`.
    pub iterates: Vec<Vec<f64>>,
    pub branches: Vec<Branch>,
    /// Oracle distance at each query; empty for honest runs.
    pub distances: Vec<f64>,
    /// `F` at each iterate when the closed form is available.
    pub objective: Vec<Option<f64>>,
    pub final_objective: Option<f64>,
    pub epsilon: Option<f64>,
    /// Largest Monte-Carlo error of the mean seen during the run.
    pub max_mean_error: f64,
    /// False when the mean's error was not small against `ε`.
    pub valid: bool,
}

#[derive(Serialize)]
struct JsonLine<'a> {
    t: usize,
    w: &'a [f64],
    branch: Branch,
    #[serde(rename = "F")]
    f: Option<f64>,
}

impl TrajectoryRecord {
    pub fn true_branch_count(&self) -> usize {
        self.branches.iter().filter(|b| **b == Branch::True).count()
    }

    /// One JSON object per step: `{t, w, branch, F}`.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for (t, (w, b)) in self.iterates.iter().zip(&self.branches).enumerate() {
            let line = JsonLine {
                t: t + 1,
                w,
                branch: *b,
                f: self.objective.get(t).copied().flatten(),
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&line)?);
        }
        Ok(out)
    }

    /// Iterates and branch flags agree bit for bit.
    pub fn same_path(&self, other: &Self) -> bool {
        self.first_difference(other).is_none()
    }

    /// First step (1-based) where the runs differ; `Some(0)` for different starts.
    pub fn first_difference(&self, other: &Self) -> Option<usize> {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&self.init) != bits(&other.init) {
            return Some(0);
        }
        let n = self.iterates.len().max(other.iterates.len());
        (0..n).find_map(|t| {
            let same = match (self.iterates.get(t), other.iterates.get(t)) {
                (Some(a), Some(b)) => bits(a) == bits(b) && self.branches[t] == other.branches[t],
                _ => false,
            };
            (!same).then_some(t + 1)
        })
    }
}

fn honest_gradient(problem: &Problem, how: HonestGradient, w: &[f64]) -> Result<Vec<f64>> {
    match how {
        HonestGradient::ClosedForm => problem.closed_gradient(w),
        HonestGradient::MonteCarlo { n, seed } => Ok(grad_mc(problem, w, n, seed)?.mean),
    }
}

struct Sample {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

fn draw_sample(problem: &Problem, trainer: &Trainer) -> Result<Sample> {
    let m = problem.mixture().sample(trainer.sample_size, derive_seed(trainer.seed, &[TAG_DATA]))?;
    let d = problem.dim();
    let mut xs = Vec::with_capacity(m.nrows() * d);
    let mut ys = Vec::with_capacity(m.nrows());
    for row in m.row_iter() {
        let t: f64 = row.iter().zip(problem.wstar()).map(|(a, b)| a * b).sum();
        xs.extend(row.iter());
        ys.push(problem.psi().eval(t));
    }
    Ok(Sample { xs, ys })
}

/// Runs `trainer.iters` steps. With `Sgd` the feedback must be honest; the
/// minibatches come from a fixed sample drawn from the trainer seed.
pub fn run_trainer(problem: &Problem, trainer: &Trainer, feedback: Feedback<'_>) -> Result<TrajectoryRecord> {
    trainer.validate()?;
    let p = problem.family().n_params();
    let mut w = trainer.initial_point(problem)?;
    check_dim(p, w.len())?;
    let sample = match trainer.kind {
        TrainerKind::Sgd => {
            if matches!(feedback, Feedback::Oracle { .. }) {
                return Err(LabError::Unsupported("sgd uses sample gradients, not the oracle".into()));
            }
            Some(draw_sample(problem, trainer)?)
        }
        _ => None,
    };
    let mut batch_rng = stream_rng(derive_seed(trainer.seed, &[TAG_BATCH]), 0);
    let closed = problem.has_closed_form();
    let epsilon = match feedback {
        Feedback::Oracle { epsilon, .. } => Some(epsilon),
        Feedback::Honest(_) => None,
    };
    let mut rec = TrajectoryRecord {
        init: w.clone(),
        iterates: Vec::with_capacity(trainer.iters),
        branches: Vec::with_capacity(trainer.iters),
        distances: Vec::new(),
        objective: Vec::with_capacity(trainer.iters),
        final_objective: None,
        epsilon,
        max_mean_error: 0.0,
        valid: true,
    };
    let d = problem.dim();
    let mut g = vec![0.0; p];
    for t in 1..=trainer.iters {
        let (grad, branch) = match (&sample, feedback) {
            (Some(s), _) => {
                let m = s.ys.len();
                let mut acc = vec![0.0; p];
                for _ in 0..trainer.batch_size {
                    let k = batch_rng.random_range(0..m);
                    let x = &s.xs[k * d..(k + 1) * d];
                    let f = problem.family().eval_grad(&w, x, &mut g);
                    let r2 = 2.0 * (f - s.ys[k]) / trainer.batch_size as f64;
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        *a += r2 * gi;
                    }
                }
                (acc, Branch::Honest)
            }
            (None, Feedback::Honest(how)) => (honest_gradient(problem, how, &w)?, Branch::Honest),
            (None, Feedback::Oracle { mean, epsilon }) => {
                let resp = oracle_query(problem, mean, epsilon, &w)?;
                rec.distances.push(resp.distance);
                rec.max_mean_error = rec.max_mean_error.max(resp.mean_error);
                (resp.gradient, resp.branch)
            }
        };
        let eta = trainer.step_at(t);
        let scale = match trainer.kind {
            TrainerKind::NormalizedGd => {
                let n = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    eta / n
                } else {
                    0.0
                }
            }
            _ => eta,
        };
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= scale * gi;
        }
        if let Some(radius) = trainer.projection {
            let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > radius {
                w.iter_mut().for_each(|v| *v *= radius / n);
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Divergence {
                iteration: t,
                reason: "non-finite iterate".into(),
            });
        }
        rec.objective.push(if closed { Some(problem.closed_objective(&w)?) } else { None });
        rec.iterates.push(w.clone());
        rec.branches.push(branch);
    }
    rec.final_objective = if closed {
        Some(problem.closed_objective(&w)?)
    } else {
        Some(crate::objective::objective_mc(problem, &w, crate::objective::DEFAULT_MC_SAMPLES, trainer.seed)?.value)
    };
    if let Some(eps) = epsilon {
        rec.valid = rec.max_mean_error * VALIDITY_MARGIN <= eps;
    }
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairDivergence {
    pub i: usize,
    pub j: usize,
    /// First differing step (1-based), `0` for different initial points.
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub n_targets: usize,
    pub radius: f64,
    pub iters: usize,
    pub pairs: usize,
    pub identical_pairs: usize,
    pub fraction_identical: f64,
    pub divergences: Vec<PairDivergence>,
    /// Earliest first-divergence step over all differing pairs.
    pub earliest_divergence: Option<usize>,
    pub true_branch_flags: usize,
    pub epsilon: Option<f64>,
    pub max_mean_error: f64,
    pub valid: bool,
}

/// Which feedback the independence check uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackSpec {
    Oracle,
    Honest { gradient: HonestGradient },
}

/// Trains against `n_targets` targets on the sphere of `radius` (all other
/// settings shared) and compares every pair of trajectories.
pub fn trajectory_independence_check(
    template: &Problem,
    radius: f64,
    n_targets: usize,
    trainer: &Trainer,
    oracle: &OracleConfig,
    feedback: FeedbackSpec,
) -> Result<(IndependenceReport, Vec<TrajectoryRecord>)> {
    if n_targets < 2 {
        return Err(invalid("n_targets", "need at least 2 targets"));
    }
    let targets = sample_wstar_sphere(template.dim(), radius, n_targets, derive_seed(oracle.seed, &[TAG_TARGETS]))?;
    let problems = targets
        .row_iter()
        .map(|r| template.with_wstar(r.iter().copied().collect()))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = trainer.clone();
    trainer.iters = trainer.iters.min(oracle.max_iters);
    let (records, epsilon) = match feedback {
        FeedbackSpec::Oracle => {
            let mean = SphereMean::new(&problems[0], radius, oracle.mean)?;
            let eps = oracle.resolve_epsilon(&problems[0])?;
            let fb = Feedback::Oracle { mean: &mean, epsilon: eps };
            // Runs share the mean table, so they go in sequence.
            let recs = problems
                .iter()
                .map(|p| run_trainer(p, &trainer, fb))
                .collect::<Result<Vec<_>>>()?;
            (recs, Some(eps))
        }
        FeedbackSpec::Honest { gradient } => {
            let recs = map_indexed(problems, |_, p| run_trainer(&p, &trainer, Feedback::Honest(gradient)));
            (recs.into_iter().collect::<Result<Vec<_>>>()?, None)
        }
    };
    let mut divergences = Vec::new();
    let mut pairs = 0;
    for i in 0..records.len() {
        for j in i + 1..records.len() {
            pairs += 1;
            if let Some(iteration) = records[i].first_difference(&records[j]) {
                divergences.push(PairDivergence { i, j, iteration });
            }
        }
    }
    let identical_pairs = pairs - divergences.len();
    let report = IndependenceReport {
        n_targets,
        radius,
        iters: trainer.iters,
        pairs,
        identical_pairs,
        fraction_identical: identical_pairs as f64 / pairs as f64,
        earliest_divergence: divergences.iter().map(|d| d.iteration).min(),
        divergences,
        true_branch_flags: records.iter().map(TrajectoryRecord::true_branch_count).sum(),
        epsilon,
        max_mean_error: records.iter().map(|r| r.max_mean_error).fold(0.0, f64::max),
        valid: records.iter().all(|r| r.valid),
    };
    Ok((report, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::GaussianMixture;

    fn on_sphere(d: usize, radius: f64, seed: u64) -> Vec<f64> {
        sample_wstar_sphere(d, radius, 1, seed).unwrap().row(0).iter().copied().collect()
    }

    #[test]
    fn origin_probe_returns_zero_mean() {
        let p = Problem::cosine_gaussian(on_sphere(4, 2.0, 1)).unwrap();
        let mean = SphereMean::new(&p, 2.0, MeanSource::MonteCarlo { draws: 200, seed: 3 }).unwrap();
        let r = oracle_query(&p, &mean, 1e-12, &[0.0; 4]).unwrap();
        assert_eq!(r.branch, Branch::Mean);
        assert!(r.gradient.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn far_probe_takes_mean_branch() {
        let d = 20;
        let p = Problem::cosine_gaussian(on_sphere(d, 6.0, 2)).unwrap();
        let mean = SphereMean::new(&p, 6.0, MeanSource::MonteCarlo { draws: 500, seed: 4 }).unwrap();
        let w = on_sphere(d, 1.0, 9);
        let r = oracle_query(&p, &mean, 1e-10, &w).unwrap();
        assert_eq!(r.branch, Branch::Mean);
        assert!(r.distance < 1e-100);
    }

    #[test]
    fn target_probe_takes_true_branch() {
        let ws = on_sphere(6, 2.0, 5);
        let p = Problem::cosine_gaussian(ws.clone()).unwrap();
        let mean = SphereMean::new(&p, 2.0, MeanSource::MonteCarlo { draws: 500, seed: 4 }).unwrap();
        let r = oracle_query(&p, &mean, 1e-10, &ws).unwrap();
        assert_eq!(r.branch, Branch::True);
        assert!(r.distance > 1e-10);
        let exact = p.closed_gradient(&ws).unwrap();
        for (a, b) in r.gradient.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_matches_monte_carlo_mean() {
        for d in [1usize, 2, 3, 7] {
            let radius = 0.8;
            let p = Problem::cosine_gaussian(on_sphere(d, radius, 6)).unwrap();
            let mc = SphereMean::new(&p, radius, MeanSource::MonteCarlo { draws: 200_000, seed: 8 }).unwrap();
            let w = on_sphere(d, 0.6, 10);
            let (t, err) = mc.target_mean(&w).unwrap();
            let base = p.closed_base(&p.prepare(&w).unwrap());
            let quad = sphere_mean_gradient_quadrature(&p, &w, radius).unwrap();
            let diff: f64 = quad
                .iter()
                .zip(&base)
                .zip(&t)
                .map(|((q, b), m)| (q - b - m).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(diff <= 4.0 * err.max(1e-14), "d={d}: {diff} vs {err}");
        }
    }

    #[test]
    fn quadrature_resolves_a_sharp_peak() {
        // In d = 3 the cosine c of the angle is uniform on [−1, 1]; with
        // u = 1 − c and a = 2kR², E[e^{−a u} R u] = R (1 − e^{−2a}(1 + 2a)) / (2a²).
        let radius = 2.0;
        let ws = on_sphere(3, radius, 11);
        let p = Problem::cosine_gaussian(ws.clone()).unwrap();
        let a = 4.0 * PI * PI * radius * radius;
        let coef = radius * (1.0 - (-2.0 * a).exp() * (1.0 + 2.0 * a)) / (2.0 * a * a);
        let base = p.closed_base(&p.prepare(&ws).unwrap());
        let quad = sphere_mean_gradient_quadrature(&p, &ws, radius).unwrap();
        let scale = 8.0 * PI * PI * coef / radius;
        assert!(scale > 1e-3);
        for ((q, b), w) in quad.iter().zip(&base).zip(&ws) {
            assert!((q - b - scale * w).abs() <= 1e-9 * scale, "{} vs {}", q - b, scale * w);
        }
    }

    #[test]
    fn mean_cache_is_reused() {
        let p = Problem::cosine_gaussian(on_sphere(3, 1.0, 1)).unwrap();
        let mean = SphereMean::new(&p, 1.0, MeanSource::MonteCarlo { draws: 100, seed: 1 }).unwrap();
        let w = [0.1, 0.2, 0.3];
        let a = mean.target_mean(&w).unwrap();
        let b = mean.target_mean(&w).unwrap();
        assert_eq!(a, b);
        assert_eq!(mean.cached_points(), 1);
    }

    #[test]
    fn recipe_epsilon_at_reference_setting() {
        let m = GaussianMixture::standard(30).unwrap();
        let eps = recipe_epsilon(&m, 4.0, 1.0, 1.0).unwrap();
        let expect = (4.0 * PI * PI * 30.0 * (-30.0f64).exp()).cbrt();
        assert!((eps / expect - 1.0).abs() < 1e-9, "{eps} vs {expect}");
    }

    #[test]
    fn basin_converges() {
        let p = Problem::cosine_gaussian(on_sphere(5, 1.0, 7)).unwrap();
        let trainer = Trainer {
            init: InitRule::NearTarget { offset: 0.01 },
            iters: 500,
            ..Default::default()
        };
        let rec = run_trainer(&p, &trainer, Feedback::Honest(HonestGradient::ClosedForm)).unwrap();
        assert!(rec.final_objective.unwrap() < 1e-6);
        assert_eq!(rec.iterates.len(), 500);
    }

    #[test]
    fn zero_iterations_are_trivially_identical() {
        let template = Problem::cosine_gaussian(vec![0.0; 3]).unwrap();
        let trainer = Trainer { iters: 0, ..Default::default() };
        let oracle = OracleConfig {
            mean: MeanSource::MonteCarlo { draws: 100, seed: 1 },
            ..Default::default()
        };
        let (rep, recs) = trajectory_independence_check(&template, 2.0, 4, &trainer, &oracle, FeedbackSpec::Oracle).unwrap();
        assert_eq!(rep.identical_pairs, 6);
        assert!(recs.iter().all(|r| r.iterates.is_empty()));
    }

    #[test]
    fn honest_small_radius_diverges_quickly() {
        let template = Problem::cosine_gaussian(vec![0.0; 3]).unwrap();
        let trainer = Trainer { iters: 10, ..Default::default() };
        let (rep, _) = trajectory_independence_check(
            &template,
            0.5,
            10,
            &trainer,
            &OracleConfig::default(),
            FeedbackSpec::Honest { gradient: HonestGradient::ClosedForm },
        )
        .unwrap();
        assert_eq!(rep.identical_pairs, 0);
        assert!(rep.divergences.iter().all(|d| d.iteration <= 10));
    }

    #[test]
    fn divergence_is_reported() {
        let p = Problem::cosine_gaussian(vec![0.3, 0.1]).unwrap();
        let trainer = Trainer {
            step: 1e308,
            init: InitRule::Fixed { w: vec![0.05, 0.02] },
            iters: 5,
            ..Default::default()
        };
        let err = run_trainer(&p, &trainer, Feedback::Honest(HonestGradient::ClosedForm)).unwrap_err();
        assert!(matches!(err, LabError::Divergence { iteration: 1, .. }));
    }

    #[test]
    fn sgd_requires_honest_feedback_and_runs() {
        let p = Problem::cosine_gaussian(on_sphere(3, 1.0, 2)).unwrap();
        let trainer = Trainer {
            kind: TrainerKind::Sgd,
            iters: 20,
            sample_size: 500,
            batch_size: 10,
            ..Default::default()
        };
        let mean = SphereMean::new(&p, 1.0, MeanSource::MonteCarlo { draws: 10, seed: 1 }).unwrap();
        assert!(run_trainer(&p, &trainer, Feedback::Oracle { mean: &mean, epsilon: 1.0 }).is_err());
        let a = run_trainer(&p, &trainer, Feedback::Honest(HonestGradient::ClosedForm)).unwrap();
        let b = run_trainer(&p, &trainer, Feedback::Honest(HonestGradient::ClosedForm)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json_lines().unwrap().lines().count(), 20);
    }

    #[test]
    fn normalized_steps_have_fixed_length() {
        let p = Problem::cosine_gaussian(vec![0.4, -0.2]).unwrap();
        let trainer = Trainer {
            kind: TrainerKind::NormalizedGd,
            step: 0.01,
            init: InitRule::Fixed { w: vec![0.1, 0.1] },
            iters: 3,
            ..Default::default()
        };
        let rec = run_trainer(&p, &trainer, Feedback::Honest(HonestGradient::ClosedForm)).unwrap();
        let mut prev = rec.init.clone();
        for w in &rec.iterates {
            let len = w.iter().zip(&prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!((len - 0.01).abs() < 1e-12);
            prev = w.clone();
        }
    }
}
