//! Variance of the gradient over random target directions, and the
//! correlation-decay estimator.
//!
//! Closed-form gradients at large `r` are far below the smallest normal
//! double, so their target-dependent part is carried as `(ln scale, vector)`
//! pairs and the variance is accumulated after a common rescaling.

use crate::distributions::{bound_tail_sum, GaussianMixture};
use crate::error::{check_dim, invalid, LabError, Result};
use crate::numeric::{linear_fit, LinearFit, Moments};
use crate::objective::Problem;
use crate::periodic::{PeriodicFn, PeriodicSpec};
use crate::predictors::PredictorFamily;
use crate::rng::{derive_seed, map_indexed, stream_rng};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_10, PI};
use std::fmt::Write as _;

const TAG_PROBE: u64 = 1;
const TAG_WSTAR: u64 = 2;
const TAG_X: u64 = 3;
/// Terms summed explicitly in the bound series before the geometric tail.
const SERIES_TERMS: usize = 64;

/// `n` rows drawn uniformly from the sphere of `radius` in `ℝᵈ`.
pub fn sample_wstar_sphere(d: usize, radius: f64, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if d < 1 {
        return Err(invalid("d", "dimension must be at least 1"));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(invalid("radius", format!("{radius} must be positive")));
    }
    let mut rng = stream_rng(seed, 0);
    let mut out = DMatrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for i in 0..n {
        let norm = loop {
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let s = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if s > 1e-300 {
                break s;
            }
        };
        for j in 0..d {
            out[(i, j)] = row[j] * (radius / norm);
        }
    }
    Ok(out)
}

/// How the probe point `w` is chosen for each dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeRule {
    Zero,
    Fixed { w: Vec<f64> },
    /// A random unit vector times `scale`, fixed per `(seed, d)`.
    RandomUnit { scale: f64 },
}

impl ProbeRule {
    pub fn resolve(&self, d: usize, seed: u64) -> Result<Vec<f64>> {
        match self {
            Self::Zero => Ok(vec![0.0; d]),
            Self::Fixed { w } => {
                check_dim(d, w.len())?;
                Ok(w.clone())
            }
            Self::RandomUnit { scale } => {
                let u = sample_wstar_sphere(d, 1.0, 1, derive_seed(seed, &[TAG_PROBE, d as u64]))?;
                Ok(u.row(0).iter().map(|v| v * scale).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    ClosedForm,
    /// Sample gradients with one shared set of `n_x` inputs per cell.
    MonteCarlo,
}

/// Scan over dimensions and radii. Targets are drawn on the sphere of
/// radius `2r`; inputs are `N(0, input_variance · I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceScanConfig {
    pub dims: Vec<usize>,
    pub radii: Vec<f64>,
    pub probe: ProbeRule,
    pub n_wstar: usize,
    pub n_x: usize,
    pub seed: u64,
    pub method: GradientMethod,
    pub psi: PeriodicSpec,
    pub input_variance: f64,
    /// Constant `c₂` multiplying the bound.
    pub c2: f64,
    /// Constant `c₃` in `exp(−c₃ d)`.
    pub c3: f64,
}

impl Default for VarianceScanConfig {
    fn default() -> Self {
        Self {
            dims: vec![5, 10, 20],
            radii: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
            probe: ProbeRule::RandomUnit { scale: 1.0 },
            n_wstar: 200,
            n_x: 20_000,
            seed: 0,
            method: GradientMethod::ClosedForm,
            psi: PeriodicSpec::Cosine,
            input_variance: 1.0,
            c2: 1.0,
            c3: 1.0,
        }
    }
}

impl VarianceScanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(invalid("dims", "need at least one positive dimension"));
        }
        if self.radii.is_empty() || self.radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(invalid("radii", "need at least one positive radius"));
        }
        if self.n_wstar < 10 {
            return Err(invalid("n_wstar", "need at least 10 target draws"));
        }
        if self.method == GradientMethod::MonteCarlo && self.n_x < 4 {
            return Err(invalid("n_x", "need at least 4 input samples"));
        }
        if !(self.input_variance > 0.0) {
            return Err(invalid("input_variance", "must be positive"));
        }
        Ok(())
    }

    fn problem(&self, d: usize) -> Result<Problem> {
        Problem::new(
            GaussianMixture::isotropic(d, self.input_variance)?,
            PeriodicFn::from_spec(&self.psi)?,
            vec![0.0; d],
            PredictorFamily::cosine(d),
        )
    }
}

/// One `(d, r)` cell of a scan. Variances are kept as natural logs because
/// they underflow for moderate `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCell {
    pub d: usize,
    pub r: f64,
    pub probe: Vec<f64>,
    /// `ln Var_{w*}(∇F(w))`; `-inf` when every draw gives the same gradient.
    pub ln_variance: f64,
    /// Relative standard error of the variance estimate over draws.
    pub variance_rel_se: f64,
    /// `ln` of the Monte-Carlo noise floor (split-half); `-inf` for closed form.
    pub ln_mc_floor: f64,
    /// `Σ_{n≥1} ε(n r)`.
    pub bound_series: f64,
    /// `exp(−c₃ d)`.
    pub exp_term: f64,
    /// `sup_w E‖∂f/∂w‖² = 4π² E‖x‖²`.
    pub grad_norm_bound: f64,
    /// `c₂ · G · (exp_term + bound_series)`.
    pub bound: f64,
}

impl VarianceCell {
    pub fn variance(&self) -> f64 {
        self.ln_variance.exp()
    }

    pub fn log10_variance(&self) -> f64 {
        self.ln_variance / LN_10
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub config: VarianceScanConfig,
    pub cells: Vec<VarianceCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// The fixed coordinate (`d` for fits against `r²`, `r` for fits against `d`).
    pub at: f64,
    pub points: usize,
    #[serde(flatten)]
    pub fit: LinearFit,
}

/// Least-squares fits of `log10 Var` against `r²` (per `d`), against `d`
/// (per `r`) and against `min(d, r²)` (all cells).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFits {
    pub vs_r_squared: Vec<DecayFit>,
    pub vs_dimension: Vec<DecayFit>,
    pub vs_min_d_r_squared: Option<LinearFit>,
}

/// Formats `exp(ln_v)` in scientific notation without underflow.
pub fn format_ln(ln_v: f64) -> String {
    if ln_v == f64::NEG_INFINITY {
        return "0".into();
    }
    if !ln_v.is_finite() {
        return format!("{}", ln_v.exp());
    }
    let l10 = ln_v / LN_10;
    let mut e = l10.floor();
    let mut m = 10f64.powf(l10 - e);
    if m >= 9.999_999_5 {
        m /= 10.0;
        e += 1.0;
    }
    format!("{m:.6}e{}", e as i64)
}

impl VarianceReport {
    /// `d,r,variance,mc_floor,bound_series,exp_term`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("d,r,variance,mc_floor,bound_series,exp_term\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{:e},{:e}",
                c.d,
                c.r,
                format_ln(c.ln_variance),
                format_ln(c.ln_mc_floor),
                c.bound_series,
                c.exp_term
            );
        }
        out
    }

    pub fn cell(&self, d: usize, r: f64) -> Option<&VarianceCell> {
        self.cells.iter().find(|c| c.d == d && c.r == r)
    }

    pub fn fits(&self) -> DecayFits {
        let finite: Vec<&VarianceCell> = self.cells.iter().filter(|c| c.ln_variance.is_finite()).collect();
        let fit_group = |key: &dyn Fn(&VarianceCell) -> f64, x: &dyn Fn(&VarianceCell) -> f64| {
            let mut keys: Vec<f64> = finite.iter().map(|c| key(c)).collect();
            keys.sort_by(f64::total_cmp);
            keys.dedup();
            keys.into_iter()
                .filter_map(|k| {
                    let group: Vec<&&VarianceCell> = finite.iter().filter(|c| key(c) == k).collect();
                    let xs: Vec<f64> = group.iter().map(|c| x(c)).collect();
                    let ys: Vec<f64> = group.iter().map(|c| c.log10_variance()).collect();
                    linear_fit(&xs, &ys).map(|fit| DecayFit {
                        at: k,
                        points: xs.len(),
                        fit,
                    })
                })
                .collect::<Vec<_>>()
        };
        let vs_r_squared = fit_group(&|c| c.d as f64, &|c| c.r * c.r);
        let vs_dimension = fit_group(&|c| c.r, &|c| c.d as f64);
        let xs: Vec<f64> = finite.iter().map(|c| (c.d as f64).min(c.r * c.r)).collect();
        let ys: Vec<f64> = finite.iter().map(|c| c.log10_variance()).collect();
        DecayFits {
            vs_r_squared,
            vs_dimension,
            vs_min_d_r_squared: linear_fit(&xs, &ys),
        }
    }

    /// Whether, for each `d`, the variance is non-increasing in `r` up to
    /// `k` standard errors of the variance estimates.
    pub fn is_monotone(&self, k: f64) -> bool {
        let mut dims: Vec<usize> = self.cells.iter().map(|c| c.d).collect();
        dims.sort_unstable();
        dims.dedup();
        dims.into_iter().all(|d| {
            let mut cells: Vec<&VarianceCell> = self.cells.iter().filter(|c| c.d == d).collect();
            cells.sort_by(|a, b| a.r.total_cmp(&b.r));
            cells.windows(2).all(|w| {
                let (a, b) = (w[0], w[1]);
                if b.ln_variance <= a.ln_variance {
                    return true;
                }
                // Compare the difference against the combined relative errors.
                let slack = (1.0 + k * (a.variance_rel_se.powi(2) + b.variance_rel_se.powi(2)).sqrt()).ln();
                b.ln_variance - a.ln_variance <= slack
            })
        })
    }
}

/// Scaled sample variance of a set of vectors: `(ln var, relative se)`.
fn ln_trace_variance(vectors: &[Vec<f64>], ln_shift: f64) -> (f64, f64) {
    let n = vectors.len();
    let d = vectors.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let mut dev = Moments::new();
    for v in vectors {
        dev.push(v.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum());
    }
    // Unbiased: Σ‖v − v̄‖² / (n − 1).
    let var = dev.mean() * n as f64 / (n as f64 - 1.0);
    if var <= 0.0 {
        return (f64::NEG_INFINITY, 0.0);
    }
    let rel_se = dev.std_error() / dev.mean();
    (var.ln() + 2.0 * ln_shift, rel_se)
}

fn closed_cell_gradients(problem: &Problem, w: &[f64], wstars: &DMatrix<f64>) -> Result<(Vec<Vec<f64>>, f64)> {
    let pw = problem.prepare(w)?;
    let mut all = Vec::with_capacity(wstars.nrows());
    for row in wstars.row_iter() {
        let t: Vec<f64> = row.iter().copied().collect();
        all.push(problem.target_terms(&pw, &problem.prepare(&t)?));
    }
    let shift = all
        .iter()
        .flatten()
        .map(|t| t.ln_scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let d = w.len();
    let scaled = all
        .iter()
        .map(|terms| {
            let mut g = vec![0.0; d];
            for t in terms {
                let s = (t.ln_scale - shift).exp();
                for (gi, vi) in g.iter_mut().zip(&t.vector) {
                    *gi += s * vi;
                }
            }
            g
        })
        .collect();
    Ok((scaled, if shift.is_finite() { shift } else { 0.0 }))
}

/// MC gradients for every target from one shared input sample, plus the
/// split-half noise floor `E‖ĝ_A − ĝ_B‖²/4` averaged over targets.
fn mc_cell_gradients(problem: &Problem, w: &[f64], wstars: &DMatrix<f64>, xs: &DMatrix<f64>) -> (Vec<Vec<f64>>, f64) {
    let d = w.len();
    let n = xs.nrows();
    let half = n / 2;
    let fam = problem.family();
    let mut fx = Vec::with_capacity(n);
    let mut gx = Vec::with_capacity(n);
    let mut g = vec![0.0; d];
    let rows: Vec<Vec<f64>> = xs.row_iter().map(|r| r.iter().copied().collect()).collect();
    for x in &rows {
        fx.push(fam.eval_grad(w, x, &mut g));
        gx.push(g.clone());
    }
    let mut grads = Vec::with_capacity(wstars.nrows());
    let mut floor = Moments::new();
    for t in wstars.row_iter() {
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        for (k, x) in rows.iter().enumerate() {
            let tx: f64 = t.iter().zip(x).map(|(u, v)| u * v).sum();
            let r2 = 2.0 * (fx[k] - problem.psi().eval(tx));
            let acc = if k < half { &mut a } else { &mut b };
            for (s, gi) in acc.iter_mut().zip(&gx[k]) {
                *s += r2 * gi;
            }
        }
        let full: Vec<f64> = a.iter().zip(&b).map(|(u, v)| (u + v) / n as f64).collect();
        let diff: f64 = a
            .iter()
            .zip(&b)
            .map(|(u, v)| (u / half as f64 - v / (n - half) as f64).powi(2))
            .sum();
        floor.push(diff / 4.0);
        grads.push(full);
    }
    (grads, floor.mean())
}

/// Runs the scan; cells are independent and seeded from `(seed, d, r)`.
pub fn variance_of_gradient(config: &VarianceScanConfig) -> Result<VarianceReport> {
    config.validate()?;
    let mut jobs = Vec::new();
    for &d in &config.dims {
        for &r in &config.radii {
            jobs.push((d, r));
        }
    }
    let cells = map_indexed(jobs, |_, (d, r)| variance_cell(config, d, r));
    Ok(VarianceReport {
        config: config.clone(),
        cells: cells.into_iter().collect::<Result<_>>()?,
    })
}

fn variance_cell(config: &VarianceScanConfig, d: usize, r: f64) -> Result<VarianceCell> {
    let problem = config.problem(d)?;
    let w = config.probe.resolve(d, config.seed)?;
    let wstars = sample_wstar_sphere(d, 2.0 * r, config.n_wstar, derive_seed(config.seed, &[TAG_WSTAR, d as u64, r.to_bits()]))?;
    let (ln_variance, variance_rel_se, ln_mc_floor) = match config.method {
        GradientMethod::ClosedForm => {
            if !problem.has_closed_form() {
                return Err(LabError::Unsupported("closed-form gradients need a cosine target".into()));
            }
            let (scaled, shift) = closed_cell_gradients(&problem, &w, &wstars)?;
            let (lv, se) = ln_trace_variance(&scaled, shift);
            (lv, se, f64::NEG_INFINITY)
        }
        GradientMethod::MonteCarlo => {
            let xs = problem.mixture().sample(config.n_x, derive_seed(config.seed, &[TAG_X, d as u64]))?;
            let (grads, floor) = mc_cell_gradients(&problem, &w, &wstars, &xs);
            let (lv, se) = ln_trace_variance(&grads, 0.0);
            (lv, se, if floor > 0.0 { floor.ln() } else { f64::NEG_INFINITY })
        }
    };
    let profile = problem.mixture().epsilon_profile();
    let bound_series = bound_tail_sum(&profile, r, SERIES_TERMS)?.total();
    let exp_term = (-config.c3 * d as f64).exp();
    let grad_norm_bound = 4.0 * PI * PI * problem.mixture().second_moment_trace();
    Ok(VarianceCell {
        d,
        r,
        probe: w,
        ln_variance,
        variance_rel_se,
        ln_mc_floor,
        bound_series,
        exp_term,
        grad_norm_bound,
        bound: config.c2 * grad_norm_bound * (exp_term + bound_series),
    })
}

/// Test function `q` for the correlation-decay estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeFunction {
    /// `x ↦ cos(2π⟨v, x⟩)`.
    Cosine { v: Vec<f64> },
    Constant { c: f64 },
}

impl ProbeFunction {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Self::Cosine { v } => (2.0 * PI * v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).cos(),
            Self::Constant { c } => *c,
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        match self {
            Self::Cosine { v } => check_dim(d, v.len()),
            Self::Constant { c } if c.is_finite() => Ok(()),
            Self::Constant { .. } => Err(invalid("q", "constant must be finite")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    /// Estimate of `E_{w*}[(E_x[q(x)ψ(⟨w*,x⟩)] − a₀E_x[q(x)])²]`.
    pub estimate: f64,
    pub std_error: f64,
    pub a0: f64,
    /// Sample estimate of `E[q²]`.
    pub q_second_moment: f64,
    pub bound_series: f64,
    /// `10 E[q²] (e^{−d} + Σ ε(n r))`.
    pub rhs: f64,
}

/// Split-half estimate: for each target, the product of two independent
/// half-sample means of `q(x)(ψ(⟨w*,x⟩) − a₀)` is unbiased for the square
/// of its expectation.
#[allow(clippy::too_many_arguments)]
pub fn correlation_decay(
    mixture: &GaussianMixture,
    psi: &PeriodicFn,
    q: &ProbeFunction,
    d: usize,
    r: f64,
    n_wstar: usize,
    n_x: usize,
    seed: u64,
) -> Result<CorrelationEstimate> {
    check_dim(d, mixture.dim())?;
    q.check(d)?;
    if n_wstar < 2 || n_x < 4 {
        return Err(invalid("n", "need at least 2 targets and 4 inputs"));
    }
    let a0 = psi.fourier_coeffs(1)?.get(0).re;
    let wstars = sample_wstar_sphere(d, 2.0 * r, n_wstar, derive_seed(seed, &[TAG_WSTAR, d as u64, r.to_bits()]))?;
    let xs = mixture.sample(n_x, derive_seed(seed, &[TAG_X, d as u64]))?;
    let rows: Vec<Vec<f64>> = xs.row_iter().map(|r| r.iter().copied().collect()).collect();
    let qx: Vec<f64> = rows.iter().map(|x| q.eval(x)).collect();
    let half = n_x / 2;
    let targets: Vec<Vec<f64>> = wstars.row_iter().map(|r| r.iter().copied().collect()).collect();
    let products = map_indexed(targets, |_, t| {
        let (mut a, mut b) = (0.0, 0.0);
        for (k, x) in rows.iter().enumerate() {
            let tx: f64 = t.iter().zip(x).map(|(u, v)| u * v).sum();
            let v = qx[k] * (psi.eval(tx) - a0);
            if k < half {
                a += v;
            } else {
                b += v;
            }
        }
        (a / half as f64) * (b / (n_x - half) as f64)
    });
    let mut m = Moments::new();
    products.iter().for_each(|p| m.push(*p));
    let q2 = qx.iter().map(|v| v * v).sum::<f64>() / n_x as f64;
    let bound_series = bound_tail_sum(&mixture.epsilon_profile(), r, SERIES_TERMS)?.total();
    Ok(CorrelationEstimate {
        estimate: m.mean(),
        std_error: m.std_error(),
        a0,
        q_second_moment: q2,
        bound_series,
        rhs: 10.0 * q2 * ((-(d as f64)).exp() + bound_series),
    })
}
