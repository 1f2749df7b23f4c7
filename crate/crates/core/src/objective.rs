//! The population objective `F(w) = E[(f(w,x) − ψ(⟨w*,x⟩))²]`, Monte-Carlo
//! estimators of it and its gradient, the closed form for the cosine family
//! under zero-mean Gaussian inputs, and 2-D landscape sweeps.
//!
//! For `x ~ N(0, Σ)` and `q(a) = aᵀΣa`, `E[cos(2π⟨a,x⟩)] = exp(−2π² q(a))`,
//! which gives
//!
//! ```text
//! F(w) = 1 + ½e^{−8π²q(w)} + ½e^{−8π²q(w*)} − e^{−2π²q(w−w*)} − e^{−2π²q(w+w*)}
//! ```
//!
//! and a zero-mean mixture contributes the weighted sum of these.

use crate::distributions::GaussianMixture;
use crate::error::{check_dim, invalid, LabError, Result};
use crate::numeric::Moments;
use crate::periodic::PeriodicFn;
use crate::predictors::PredictorFamily;
use crate::rng::map_chunks;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;

/// Default sample count for estimates.
pub const DEFAULT_MC_SAMPLES: usize = 100_000;

/// A learning problem: inputs, target shape and direction, predictor family.
#[derive(Debug, Clone)]
pub struct Problem {
    mixture: GaussianMixture,
    psi: PeriodicFn,
    wstar: Vec<f64>,
    wstar_norm: f64,
    family: PredictorFamily,
}

impl Problem {
    pub fn new(mixture: GaussianMixture, psi: PeriodicFn, wstar: Vec<f64>, family: PredictorFamily) -> Result<Self> {
        family.validate()?;
        check_dim(mixture.dim(), wstar.len())?;
        check_dim(mixture.dim(), family.dim())?;
        if wstar.iter().any(|v| !v.is_finite()) {
            return Err(invalid("wstar", "entries must be finite"));
        }
        let wstar_norm = wstar.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Self {
            mixture,
            psi,
            wstar,
            wstar_norm,
            family,
        })
    }

    /// Cosine target and cosine family under `N(0, I)`.
    pub fn cosine_gaussian(wstar: Vec<f64>) -> Result<Self> {
        let d = wstar.len();
        Self::new(GaussianMixture::standard(d)?, PeriodicFn::cosine(), wstar, PredictorFamily::cosine(d))
    }

    /// Same problem with another target direction.
    pub fn with_wstar(&self, wstar: Vec<f64>) -> Result<Self> {
        Self::new(self.mixture.clone(), self.psi.clone(), wstar, self.family)
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn psi(&self) -> &PeriodicFn {
        &self.psi
    }

    pub fn wstar(&self) -> &[f64] {
        &self.wstar
    }

    pub fn wstar_norm(&self) -> f64 {
        self.wstar_norm
    }

    pub fn family(&self) -> &PredictorFamily {
        &self.family
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    /// Whether [`Problem::closed_objective`] applies.
    pub fn has_closed_form(&self) -> bool {
        matches!(self.family, PredictorFamily::Cosine(_)) && self.psi.kind() == "cosine" && self.mixture.is_zero_mean()
    }

    fn require_closed_form(&self) -> Result<()> {
        if !matches!(self.family, PredictorFamily::Cosine(_)) || self.psi.kind() != "cosine" {
            return Err(LabError::Unsupported(
                "closed form needs the cosine family and a cosine target".into(),
            ));
        }
        if !self.mixture.is_zero_mean() {
            return Err(LabError::Unsupported("closed form needs zero-mean components".into()));
        }
        Ok(())
    }

    pub fn closed_objective(&self, w: &[f64]) -> Result<f64> {
        self.require_closed_form()?;
        check_dim(self.dim(), w.len())?;
        let mut total = 0.0;
        for c in self.mixture.components() {
            total += c.weight() * closed_value(w, &self.wstar, c.covariance());
        }
        Ok(total)
    }

    pub fn closed_gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.closed_gradient_parts(w)?.sum())
    }

    /// Closed-form gradient split into its target-free part and the
    /// target-dependent exponential terms, each kept as `(ln scale, vector)`.
    pub fn closed_gradient_parts(&self, w: &[f64]) -> Result<GradientParts> {
        let pw = self.prepare(w)?;
        let pt = self.prepare(&self.wstar)?;
        Ok(GradientParts {
            base: self.closed_base(&pw),
            terms: self.target_terms(&pw, &pt),
        })
    }

    /// Precomputes `Σv` per component for a probe or target direction.
    pub fn prepare(&self, v: &[f64]) -> Result<Prepared> {
        self.require_closed_form()?;
        check_dim(self.dim(), v.len())?;
        let x = DVector::from_column_slice(v);
        let sv = self
            .mixture
            .components()
            .iter()
            .map(|c| (c.covariance() * &x).as_slice().to_vec())
            .collect();
        Ok(Prepared { v: v.to_vec(), sv })
    }

    /// The target-free part `−8π² Σ_c p_c e^{−8π² q_c(w)} Σ_c w`.
    pub fn closed_base(&self, w: &Prepared) -> Vec<f64> {
        let mut base = vec![0.0; w.v.len()];
        for (c, sw) in self.mixture.components().iter().zip(&w.sv) {
            let q: f64 = w.v.iter().zip(sw).map(|(a, b)| a * b).sum();
            let s = c.weight() * 8.0 * PI * PI * (-8.0 * PI * PI * q).exp();
            for (g, v) in base.iter_mut().zip(sw) {
                *g -= s * v;
            }
        }
        base
    }

    /// The terms `4π² p_c e^{−2π² q_c(w ∓ w*)} Σ_c(w ∓ w*)`.
    pub fn target_terms(&self, w: &Prepared, t: &Prepared) -> Vec<ScaledTerm> {
        let mut terms = Vec::with_capacity(2 * w.sv.len());
        for ((c, sw), st) in self.mixture.components().iter().zip(&w.sv).zip(&t.sv) {
            let ln_p = (c.weight() * 4.0 * PI * PI).ln();
            for sign in [-1.0, 1.0] {
                let sa: Vec<f64> = sw.iter().zip(st).map(|(a, b)| a + sign * b).collect();
                let q: f64 = w.v.iter().zip(&t.v).zip(&sa).map(|((a, b), s)| (a + sign * b) * s).sum();
                terms.push(ScaledTerm {
                    ln_scale: ln_p - 2.0 * PI * PI * q,
                    vector: sa,
                });
            }
        }
        terms
    }

    /// Adds the target-dependent part of the gradient to `out` without
    /// allocating.
    pub fn add_target_part(&self, w: &Prepared, t: &Prepared, out: &mut [f64]) {
        for ((c, sw), st) in self.mixture.components().iter().zip(&w.sv).zip(&t.sv) {
            let scale = c.weight() * 4.0 * PI * PI;
            for sign in [-1.0, 1.0] {
                let q: f64 = (0..sw.len())
                    .map(|i| (w.v[i] + sign * t.v[i]) * (sw[i] + sign * st[i]))
                    .sum();
                let e = scale * (-2.0 * PI * PI * q).exp();
                if e == 0.0 {
                    continue;
                }
                for i in 0..sw.len() {
                    out[i] += e * (sw[i] + sign * st[i]);
                }
            }
        }
    }
}

/// A direction `v` together with `Σ_c v` for each mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    v: Vec<f64>,
    sv: Vec<Vec<f64>>,
}

impl Prepared {
    pub fn vector(&self) -> &[f64] {
        &self.v
    }
}

/// `exp(ln_scale) · vector`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledTerm {
    pub ln_scale: f64,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientParts {
    pub base: Vec<f64>,
    pub terms: Vec<ScaledTerm>,
}

impl GradientParts {
    pub fn sum(&self) -> Vec<f64> {
        let mut g = self.base.clone();
        for t in &self.terms {
            let s = t.ln_scale.exp();
            for (gi, vi) in g.iter_mut().zip(&t.vector) {
                *gi += s * vi;
            }
        }
        g
    }

    /// `Σ exp(ln_scale − shift) · vector`, the target-dependent part rescaled.
    pub fn target_part_scaled(&self, shift: f64) -> Vec<f64> {
        let mut g = vec![0.0; self.base.len()];
        for t in &self.terms {
            let s = (t.ln_scale - shift).exp();
            for (gi, vi) in g.iter_mut().zip(&t.vector) {
                *gi += s * vi;
            }
        }
        g
    }

    pub fn max_ln_scale(&self) -> f64 {
        self.terms.iter().map(|t| t.ln_scale).fold(f64::NEG_INFINITY, f64::max)
    }
}

fn quad(a: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    a.dot(&(sigma * a))
}

fn closed_value(w: &[f64], wstar: &[f64], sigma: &DMatrix<f64>) -> f64 {
    let wv = DVector::from_column_slice(w);
    let ws = DVector::from_column_slice(wstar);
    let k = 2.0 * PI * PI;
    1.0 + 0.5 * (-4.0 * k * quad(&wv, sigma)).exp() + 0.5 * (-4.0 * k * quad(&ws, sigma)).exp()
        - ((-k * quad(&(&wv - &ws), sigma)).exp() + (-k * quad(&(&wv + &ws), sigma)).exp())
}

fn check_sigma(d: usize, sigma: &DMatrix<f64>) -> Result<()> {
    check_dim(d, sigma.nrows())?;
    check_dim(d, sigma.ncols())
}

/// `E[(cos(2π⟨w,x⟩) − cos(2π⟨w*,x⟩))²]` for `x ~ N(0, Σ)`.
pub fn objective_cos_gauss_closed(w: &[f64], wstar: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
    check_dim(w.len(), wstar.len())?;
    check_sigma(w.len(), sigma)?;
    Ok(closed_value(w, wstar, sigma))
}

/// Gradient of [`objective_cos_gauss_closed`] in `w`.
pub fn grad_cos_gauss_closed(w: &[f64], wstar: &[f64], sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_dim(w.len(), wstar.len())?;
    check_sigma(w.len(), sigma)?;
    let wv = DVector::from_column_slice(w);
    let ws = DVector::from_column_slice(wstar);
    let k = 2.0 * PI * PI;
    let sw = sigma * &wv;
    let mut g = &sw * (-4.0 * k * (-4.0 * k * wv.dot(&sw)).exp());
    for a in [&wv - &ws, &wv + &ws] {
        let sa = sigma * &a;
        g += &sa * (2.0 * k * (-k * a.dot(&sa)).exp());
    }
    Ok(g.as_slice().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

fn check_mc(problem: &Problem, w: &[f64], n: usize) -> Result<()> {
    if n < 2 {
        return Err(invalid("n", "need at least 2 samples"));
    }
    check_dim(problem.family.n_params(), w.len())
}

/// Sample mean of squared residuals. Samples depend only on
/// `(mixture, seed)`, so estimates at different `w` share random numbers.
pub fn objective_mc(problem: &Problem, w: &[f64], n: usize, seed: u64) -> Result<EstimatorResult> {
    check_mc(problem, w, n)?;
    let d = problem.dim();
    let parts = map_chunks(n, |k, range| {
        let mut xs = Vec::new();
        problem.mixture.fill_chunk(seed, k, range.len(), &mut xs);
        let mut m = Moments::new();
        for x in xs.chunks_exact(d) {
            let t: f64 = problem.wstar.iter().zip(x).map(|(a, b)| a * b).sum();
            let r = problem.family.eval(w, x) - problem.psi.eval(t);
            m.push(r * r);
        }
        m
    });
    let mut total = Moments::new();
    parts.iter().for_each(|m| total.merge(m));
    Ok(EstimatorResult {
        value: total.mean(),
        std_error: total.std_error(),
        n_samples: n,
        seed,
    })
}

/// Sample mean of `2(f(w,x) − ψ(⟨w*,x⟩)) ∂f/∂w` with per-coordinate errors.
pub fn grad_mc(problem: &Problem, w: &[f64], n: usize, seed: u64) -> Result<VectorEstimate> {
    check_mc(problem, w, n)?;
    let d = problem.dim();
    let p = w.len();
    let parts = map_chunks(n, |k, range| {
        let mut xs = Vec::new();
        problem.mixture.fill_chunk(seed, k, range.len(), &mut xs);
        let mut g = vec![0.0; p];
        let mut ms = vec![Moments::new(); p];
        for x in xs.chunks_exact(d) {
            let t: f64 = problem.wstar.iter().zip(x).map(|(a, b)| a * b).sum();
            let f = problem.family.eval_grad(w, x, &mut g);
            let r2 = 2.0 * (f - problem.psi.eval(t));
            for (m, gi) in ms.iter_mut().zip(&g) {
                m.push(r2 * gi);
            }
        }
        ms
    });
    let mut total = vec![Moments::new(); p];
    for ms in &parts {
        for (acc, m) in total.iter_mut().zip(ms) {
            acc.merge(m);
        }
    }
    Ok(VectorEstimate {
        mean: total.iter().map(Moments::mean).collect(),
        std_error: total.iter().map(Moments::std_error).collect(),
        n_samples: n,
        seed,
    })
}

/// Cell-centred grid over a rectangle: cell `k` on an axis sits at
/// `lo + (k + ½)(hi − lo)/n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub n: [usize; 2],
}

impl GridSpec {
    pub fn square(lo: f64, hi: f64, n: usize) -> Self {
        Self {
            lo: [lo, lo],
            hi: [hi, hi],
            n: [n, n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..2 {
            if self.n[a] == 0 {
                return Err(invalid("grid.n", "resolution must be positive"));
            }
            if !(self.hi[a] > self.lo[a]) || !self.lo[a].is_finite() || !self.hi[a].is_finite() {
                return Err(invalid("grid", "need finite bounds with lo < hi"));
            }
        }
        Ok(())
    }

    pub fn coord(&self, axis: usize, k: usize) -> f64 {
        self.lo[axis] + (k as f64 + 0.5) * (self.hi[axis] - self.lo[axis]) / self.n[axis] as f64
    }

    pub fn cells(&self) -> usize {
        self.n[0] * self.n[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeMethod {
    ClosedForm,
    MonteCarlo,
}

/// Objective values on a 2-D grid, stored with `w1` as the outer index.
#[derive(Debug, Clone)]
pub struct Landscape {
    pub grid: GridSpec,
    pub method: LandscapeMethod,
    pub wstar: [f64; 2],
    pub values: Vec<f64>,
    /// `‖∇F‖` per cell; closed-form sweeps only.
    pub grad_norms: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub w1: f64,
    pub w2: f64,
    #[serde(rename = "F")]
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatFraction {
    pub radius: f64,
    pub threshold: f64,
    pub counted: usize,
    pub flat: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSummary {
    pub method: LandscapeMethod,
    pub cells: usize,
    pub min_value: f64,
    pub max_value: f64,
    /// Strict local minima within `1e-3 · (max − min)` of the global minimum.
    pub minima: Vec<GridPoint>,
    pub maximum: GridPoint,
    pub flatness: Option<FlatFraction>,
}

/// Evaluates `F` on `grid`: in closed form when the problem admits it,
/// otherwise by Monte Carlo with `mc_samples` shared samples.
pub fn landscape_grid(problem: &Problem, grid: &GridSpec, mc_samples: usize, seed: u64) -> Result<Landscape> {
    grid.validate()?;
    check_dim(2, problem.dim())?;
    check_dim(2, problem.family.n_params())?;
    let points: Vec<[f64; 2]> = (0..grid.n[0])
        .flat_map(|i| (0..grid.n[1]).map(move |j| [grid.coord(0, i), grid.coord(1, j)]))
        .collect();
    let wstar = [problem.wstar[0], problem.wstar[1]];
    if problem.has_closed_form() {
        let evals: Vec<Result<(f64, f64)>> = crate::rng::map_indexed(points, |_, w| {
            let v = problem.closed_objective(&w)?;
            let g = problem.closed_gradient(&w)?;
            Ok((v, g.iter().map(|x| x * x).sum::<f64>().sqrt()))
        });
        let evals = evals.into_iter().collect::<Result<Vec<_>>>()?;
        let (values, norms) = evals.into_iter().unzip();
        return Ok(Landscape {
            grid: *grid,
            method: LandscapeMethod::ClosedForm,
            wstar,
            values,
            grad_norms: Some(norms),
        });
    }
    let xs = problem.mixture.sample(mc_samples.max(2), seed)?;
    let targets: Vec<f64> = xs
        .row_iter()
        .map(|x| problem.psi.eval(x[0] * wstar[0] + x[1] * wstar[1]))
        .collect();
    let values = crate::rng::map_indexed(points, |_, w| {
        let mut m = Moments::new();
        for (x, t) in xs.row_iter().zip(&targets) {
            let r = problem.family.eval(&w, &[x[0], x[1]]) - t;
            m.push(r * r);
        }
        m.mean()
    });
    Ok(Landscape {
        grid: *grid,
        method: LandscapeMethod::MonteCarlo,
        wstar,
        values,
        grad_norms: None,
    })
}

impl Landscape {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.n[1] + j]
    }

    pub fn point(&self, i: usize, j: usize) -> GridPoint {
        GridPoint {
            w1: self.grid.coord(0, i),
            w2: self.grid.coord(1, j),
            value: self.value(i, j),
        }
    }

    /// Cell whose centre is nearest to `p`.
    pub fn nearest_cell(&self, p: [f64; 2]) -> (usize, usize) {
        let idx = |a: usize| {
            let h = (self.grid.hi[a] - self.grid.lo[a]) / self.grid.n[a] as f64;
            let k = ((p[a] - self.grid.lo[a]) / h - 0.5).round();
            k.clamp(0.0, (self.grid.n[a] - 1) as f64) as usize
        };
        (idx(0), idx(1))
    }

    fn argmax(&self) -> (usize, usize) {
        let ny = self.grid.n[1];
        let k = (0..self.values.len())
            .max_by(|&a, &b| self.values[a].total_cmp(&self.values[b]))
            .unwrap_or(0);
        (k / ny, k % ny)
    }

    fn is_strict_local_min(&self, i: usize, j: usize) -> bool {
        let v = self.value(i, j);
        let [nx, ny] = self.grid.n;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                if di == 0 && dj == 0 {
                    continue;
                }
                let (a, b) = (i as i64 + di, j as i64 + dj);
                if a < 0 || b < 0 || a >= nx as i64 || b >= ny as i64 {
                    continue;
                }
                if self.value(a as usize, b as usize) <= v {
                    return false;
                }
            }
        }
        true
    }

    /// Fraction of cells outside the balls of `radius` around `0`, `w*` and
    /// `−w*` whose gradient norm is at most `threshold`.
    pub fn flat_fraction(&self, radius: f64, threshold: f64) -> Option<FlatFraction> {
        let norms = self.grad_norms.as_ref()?;
        let [s1, s2] = self.wstar;
        let centres = [[0.0, 0.0], [s1, s2], [-s1, -s2]];
        let (mut counted, mut flat) = (0usize, 0usize);
        for i in 0..self.grid.n[0] {
            for j in 0..self.grid.n[1] {
                let p = [self.grid.coord(0, i), self.grid.coord(1, j)];
                let near = centres
                    .iter()
                    .any(|c| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() < radius);
                if near {
                    continue;
                }
                counted += 1;
                if norms[i * self.grid.n[1] + j] <= threshold {
                    flat += 1;
                }
            }
        }
        Some(FlatFraction {
            radius,
            threshold,
            counted,
            flat,
            fraction: if counted == 0 { 0.0 } else { flat as f64 / counted as f64 },
        })
    }

    pub fn summary(&self) -> LandscapeSummary {
        let min_value = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let (ai, aj) = self.argmax();
        let maximum = self.point(ai, aj);
        let cut = min_value + 1e-3 * (maximum.value - min_value);
        let mut minima = Vec::new();
        for i in 0..self.grid.n[0] {
            for j in 0..self.grid.n[1] {
                if self.value(i, j) <= cut && self.is_strict_local_min(i, j) {
                    minima.push(self.point(i, j));
                }
            }
        }
        minima.sort_by(|a, b| a.value.total_cmp(&b.value));
        LandscapeSummary {
            method: self.method,
            cells: self.values.len(),
            min_value,
            max_value: maximum.value,
            minima,
            maximum,
            flatness: self.flat_fraction(0.5, 1e-6),
        }
    }

    /// Rows `w1,w2,F`, `w1` outer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("w1,w2,F\n");
        for i in 0..self.grid.n[0] {
            for j in 0..self.grid.n[1] {
                let p = self.point(i, j);
                let _ = writeln!(out, "{},{},{:e}", p.w1, p.w2, p.value);
            }
        }
        out
    }

    /// Heatmap with `w2` increasing upward; equal-colour runs share a rect.
    pub fn to_svg(&self, log_scale: bool) -> String {
        let [nx, ny] = self.grid.n;
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_pos = self.values.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
        let floor = min_pos.max(max * 1e-12).max(f64::MIN_POSITIVE);
        let transform = |v: f64| if log_scale { v.max(floor).log10() } else { v };
        let lo = self.values.iter().copied().map(transform).fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().map(transform).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let px = (800 / nx.max(ny)).max(1);
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {nx} {ny}" shape-rendering="crispEdges">"#,
            nx * px,
            ny * px
        );
        let _ = writeln!(
            out,
            "<title>F on [{}, {}] x [{}, {}], {} scale, min {:e}, max {:e}</title>",
            self.grid.lo[0],
            self.grid.hi[0],
            self.grid.lo[1],
            self.grid.hi[1],
            if log_scale { "log" } else { "linear" },
            self.values.iter().copied().fold(f64::INFINITY, f64::min),
            max
        );
        for row in 0..ny {
            let j = ny - 1 - row;
            let mut i = 0;
            while i < nx {
                let colour = viridis((transform(self.value(i, j)) - lo) / span);
                let mut end = i + 1;
                while end < nx && viridis((transform(self.value(end, j)) - lo) / span) == colour {
                    end += 1;
                }
                let _ = writeln!(
                    out,
                    r#"<rect x="{i}" y="{row}" width="{}" height="1" fill="{colour}"/>"#,
                    end - i
                );
                i = end;
            }
        }
        let hx = (self.grid.hi[0] - self.grid.lo[0]) / nx as f64;
        let hy = (self.grid.hi[1] - self.grid.lo[1]) / ny as f64;
        for s in [1.0, -1.0] {
            let cx = (s * self.wstar[0] - self.grid.lo[0]) / hx;
            let cy = ny as f64 - (s * self.wstar[1] - self.grid.lo[1]) / hy;
            let _ = writeln!(
                out,
                r##"<circle cx="{cx}" cy="{cy}" r="{}" fill="none" stroke="#ff3b30" stroke-width="{}"/>"##,
                nx.max(ny) as f64 / 60.0,
                nx.max(ny) as f64 / 300.0
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn viridis(t: f64) -> String {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let k = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - k as f64;
    let c: Vec<u8> = (0..3)
        .map(|i| (STOPS[k][i] + f * (STOPS[k + 1][i] - STOPS[k][i])).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{ComponentSpec, CovarianceSpec, MixtureSpec};
    use crate::rng::stream_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn fig2() -> Problem {
        Problem::cosine_gaussian(vec![2.0, 2.0]).unwrap()
    }

    #[test]
    fn perfect_fit_has_zero_residuals() {
        let p = Problem::cosine_gaussian(vec![0.3, -0.7, 1.1]).unwrap();
        let e = objective_mc(&p, &[0.3, -0.7, 1.1], 10_000, 1).unwrap();
        assert_eq!((e.value, e.std_error), (0.0, 0.0));
        let e = objective_mc(&p, &[-0.3, 0.7, -1.1], 10_000, 1).unwrap();
        assert_eq!(e.value, 0.0);
        let g = grad_mc(&p, &[0.3, -0.7, 1.1], 10_000, 1).unwrap();
        assert!(g.mean.iter().all(|v| *v == 0.0));
        assert!(p.closed_objective(&[0.3, -0.7, 1.1]).unwrap().abs() < 1e-15);
        assert_eq!(objective_cos_gauss_closed(&[0.0; 2], &[0.0; 2], &DMatrix::identity(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn origin_value_matches_closed_form() {
        let p = fig2();
        let closed = p.closed_objective(&[0.0, 0.0]).unwrap();
        assert!((closed - 1.5).abs() < 1e-12);
        let e = objective_mc(&p, &[0.0, 0.0], 200_000, 3).unwrap();
        assert!((e.value - closed).abs() <= 3.0 * e.std_error, "{e:?}");
    }

    #[test]
    fn plateau_value() {
        let v = fig2().closed_objective(&[2.0, -2.0]).unwrap();
        let k = (-32.0 * PI * PI).exp();
        assert!((v - (1.0 - 2.0 * k + k * k)).abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_component_matches_free_function() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let spec = MixtureSpec {
            dim: 2,
            components: vec![ComponentSpec {
                weight: 1.0,
                mean: vec![0.0, 0.0],
                cov: CovarianceSpec::Full(vec![vec![1.0, 0.3], vec![0.3, 0.5]]),
            }],
        };
        let m = GaussianMixture::from_spec(&spec).unwrap();
        let p = Problem::new(m, PeriodicFn::cosine(), vec![0.4, 0.1], PredictorFamily::cosine(2)).unwrap();
        let w = [0.2, -0.3];
        assert!((p.closed_objective(&w).unwrap() - objective_cos_gauss_closed(&w, &[0.4, 0.1], &sigma).unwrap()).abs() < 1e-15);
        let g1 = p.closed_gradient(&w).unwrap();
        let g2 = grad_cos_gauss_closed(&w, &[0.4, 0.1], &sigma).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn nonzero_mean_is_unsupported() {
        let spec = MixtureSpec {
            dim: 1,
            components: vec![ComponentSpec {
                weight: 1.0,
                mean: vec![0.5],
                cov: CovarianceSpec::Iso(1.0),
            }],
        };
        let m = GaussianMixture::from_spec(&spec).unwrap();
        let p = Problem::new(m, PeriodicFn::cosine(), vec![1.0], PredictorFamily::cosine(1)).unwrap();
        assert!(matches!(p.closed_objective(&[0.0]), Err(LabError::Unsupported(_))));
        assert!(!p.has_closed_form());
    }

    #[test]
    fn closed_gradient_matches_finite_differences() {
        let mut rng = stream_rng(21, 0);
        for _ in 0..50 {
            let d = rng.random_range(1..6);
            let ws: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3).collect();
            let p = Problem::cosine_gaussian(ws).unwrap();
            let g = p.closed_gradient(&w).unwrap();
            let h = 1e-5;
            let mut wp = w.clone();
            let mut err = 0.0f64;
            for i in 0..d {
                wp[i] = w[i] + h;
                let up = p.closed_objective(&wp).unwrap();
                wp[i] = w[i] - h;
                let down = p.closed_objective(&wp).unwrap();
                wp[i] = w[i];
                err = err.max(((up - down) / (2.0 * h) - g[i]).abs());
            }
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err <= 1e-7 * norm.max(1e-2), "{err} {norm}");
        }
    }

    #[test]
    fn closed_form_symmetric_and_nonnegative() {
        let mut rng = stream_rng(22, 0);
        for _ in 0..500 {
            let d = rng.random_range(1..8);
            let ws: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let neg: Vec<f64> = w.iter().map(|v| -v).collect();
            let p = Problem::cosine_gaussian(ws).unwrap();
            let a = p.closed_objective(&w).unwrap();
            assert_eq!(a, p.closed_objective(&neg).unwrap());
            assert!(a >= -1e-12);
        }
    }

    #[test]
    fn mc_gradient_matches_crn_finite_differences() {
        let m = GaussianMixture::standard(2).unwrap();
        let fam = PredictorFamily::relu_net(2, 3);
        let p = Problem::new(m, PeriodicFn::triangle(), vec![0.8, -0.4], fam).unwrap();
        let w = [0.5, -0.2, 0.3, 0.9, -0.7, 0.1, 0.05, -0.1, 0.2, 0.4, -0.6, 0.3, 0.1];
        let n = 20_000;
        let g = grad_mc(&p, &w, n, 8).unwrap();
        let h = 1e-6;
        let mut wp = w.to_vec();
        for i in 0..w.len() {
            wp[i] = w[i] + h;
            let up = objective_mc(&p, &wp, n, 8).unwrap().value;
            wp[i] = w[i] - h;
            let down = objective_mc(&p, &wp, n, 8).unwrap().value;
            wp[i] = w[i];
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g.mean[i]).abs() <= 1e-3 * g.mean[i].abs().max(1e-2), "{i}: {fd} vs {}", g.mean[i]);
        }
    }

    #[test]
    fn mc_gradient_matches_closed_gradient() {
        let mut rng = stream_rng(23, 0);
        let mut fails = 0;
        for trial in 0..20 {
            let ws: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.25).collect();
            let w: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.25).collect();
            let p = Problem::cosine_gaussian(ws).unwrap();
            let exact = p.closed_gradient(&w).unwrap();
            let est = grad_mc(&p, &w, 50_000, trial).unwrap();
            for i in 0..3 {
                if (est.mean[i] - exact[i]).abs() > 3.0 * est.std_error[i] {
                    fails += 1;
                }
            }
        }
        assert!(fails <= 3, "{fails} of 60 coordinates outside 3 std errors");
    }

    #[test]
    fn estimates_are_deterministic() {
        let p = fig2();
        let a = objective_mc(&p, &[0.1, 0.2], 9000, 4).unwrap();
        let b = crate::rng::with_workers(1, || objective_mc(&p, &[0.1, 0.2], 9000, 4).unwrap());
        assert_eq!(a, b);
        assert!(objective_mc(&p, &[0.1], 10, 4).is_err());
        assert!(objective_mc(&p, &[0.1, 0.2], 1, 4).is_err());
    }

    #[test]
    fn figure_grid_structure() {
        let l = landscape_grid(&fig2(), &GridSpec::square(-3.0, 3.0, 201), 0, 0).unwrap();
        let s = l.summary();
        assert_eq!(s.minima.len(), 2, "{:?}", s.minima);
        for m in &s.minima {
            assert_eq!(m.w1.abs(), 2.0);
            assert_eq!(m.w1, m.w2);
            assert!(m.value <= 1e-3);
        }
        assert_eq!((s.maximum.w1, s.maximum.w2), (0.0, 0.0));
        assert_eq!(l.nearest_cell([2.0, 2.0]), (167, 167));
        assert_eq!(l.point(167, 167).w1, 2.0);
        let flat = s.flatness.unwrap();
        assert!(flat.fraction > 0.8 && flat.fraction < 0.9);
    }

    #[test]
    fn grid_without_targets_stays_high() {
        let l = landscape_grid(&fig2(), &GridSpec::square(-1.0, 1.0, 41), 0, 0).unwrap();
        assert!(l.summary().min_value >= 0.5);
    }

    #[test]
    fn mc_landscape_for_non_closed_problem() {
        let m = GaussianMixture::standard(2).unwrap();
        let p = Problem::new(m, PeriodicFn::triangle(), vec![0.5, 0.5], PredictorFamily::cosine(2)).unwrap();
        let l = landscape_grid(&p, &GridSpec::square(-1.0, 1.0, 5), 2000, 1).unwrap();
        assert_eq!(l.method, LandscapeMethod::MonteCarlo);
        assert!(l.grad_norms.is_none());
        assert!(l.values.iter().all(|v| *v >= 0.0));
        let csv = l.to_csv();
        assert_eq!(csv.lines().count(), 26);
        assert!(csv.starts_with("w1,w2,F\n"));
    }

    #[test]
    fn svg_is_well_formed() {
        let l = landscape_grid(&fig2(), &GridSpec::square(-3.0, 3.0, 21), 0, 0).unwrap();
        let svg = l.to_svg(true);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("<rect"));
        assert_ne!(svg, l.to_svg(false));
        assert_eq!(viridis(0.0), "#440154");
        assert_eq!(viridis(1.0), "#fde725");
    }
}
