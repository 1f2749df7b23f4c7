//! Gaussian-mixture input distributions and their Fourier-concentration
//! profiles.
//!
//! A density `φ²` with zero-mean Gaussian shape `N(0, Σ)` has
//! `|φ̂(ξ)|² ∝ exp(-8π² ξᵀΣξ)`, i.e. `|φ̂|²` is itself a Gaussian with
//! covariance `Σ⁻¹ / (16π²)`. The concentration function is then
//! `ε(r) = sqrt(P(‖ξ‖ ≥ r))` for that Gaussian, a generalized chi-square
//! tail. Translating `φ` only multiplies `φ̂` by a phase, so non-zero means
//! share the profile of their zero-mean shape.

use crate::error::{check_dim, invalid, LabError, Result};
use crate::numeric::{ln_add_exp, ln_gamma_q, normal_cdf, CompensatedSum};
use crate::rng::{map_chunks, stream_rng, LabRng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Covariance in one of the three accepted forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceSpec {
    Iso(f64),
    Diag(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl CovarianceSpec {
    fn to_matrix(&self, dim: usize) -> Result<DMatrix<f64>> {
        match self {
            CovarianceSpec::Iso(s) => Ok(DMatrix::identity(dim, dim) * *s),
            CovarianceSpec::Diag(v) => {
                check_dim(dim, v.len())?;
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(v)))
            }
            CovarianceSpec::Full(rows) => {
                check_dim(dim, rows.len())?;
                let mut m = DMatrix::zeros(dim, dim);
                for (i, row) in rows.iter().enumerate() {
                    check_dim(dim, row.len())?;
                    for (j, v) in row.iter().enumerate() {
                        m[(i, j)] = *v;
                    }
                }
                Ok(m)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: CovarianceSpec,
}

/// JSON form: `{"dim": d, "components": [{"weight", "mean", "cov"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub dim: usize,
    pub components: Vec<ComponentSpec>,
}

/// One weighted Gaussian component `α N(μ, Σ)`.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: DMatrix<f64>,
    ln_det: f64,
    eigenvalues: Vec<f64>,
    spec: CovarianceSpec,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: Vec<f64>, cov: CovarianceSpec) -> Result<Self> {
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(invalid("weight", format!("{weight} not in (0, 1]")));
        }
        let dim = mean.len();
        if dim == 0 {
            return Err(invalid("mean", "empty mean vector"));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(invalid("mean", "non-finite entry"));
        }
        let covariance = cov.to_matrix(dim)?;
        let scale = covariance.amax().max(f64::MIN_POSITIVE);
        for i in 0..dim {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-12 * scale {
                    return Err(LabError::NotPositiveDefinite(format!(
                        "entry ({i},{j}) differs from ({j},{i})"
                    )));
                }
            }
        }
        let sym = (&covariance + covariance.transpose()) * 0.5;
        let mut eigenvalues: Vec<f64> = sym.clone().symmetric_eigenvalues().iter().copied().collect();
        eigenvalues.sort_by(f64::total_cmp);
        if eigenvalues.iter().any(|l| !(*l > 0.0)) {
            return Err(LabError::NotPositiveDefinite(format!(
                "smallest eigenvalue {}",
                eigenvalues[0]
            )));
        }
        let chol = sym
            .clone()
            .cholesky()
            .ok_or_else(|| LabError::NotPositiveDefinite("Cholesky factorization failed".into()))?
            .unpack();
        let ln_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            weight,
            mean: DVector::from_vec(mean),
            covariance: sym,
            chol,
            ln_det,
            eigenvalues,
            spec: cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Eigenvalues of the covariance, ascending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn is_zero_mean(&self) -> bool {
        self.mean.iter().all(|m| *m == 0.0)
    }

    fn ln_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let diff = DVector::from_iterator(d, x.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let z = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        -0.5 * z.norm_squared() - 0.5 * self.ln_det - 0.5 * d as f64 * (2.0 * PI).ln()
    }

    fn spec(&self) -> ComponentSpec {
        ComponentSpec {
            weight: self.weight,
            mean: self.mean.iter().copied().collect(),
            cov: self.spec.clone(),
        }
    }

    /// Fourier-concentration profile of this component's shape.
    pub fn epsilon_profile(&self) -> ConcentrationProfile {
        let kappas = self
            .eigenvalues
            .iter()
            .map(|l| 1.0 / (16.0 * PI * PI * l))
            .collect();
        ConcentrationProfile {
            kind: ProfileKind::Gaussian { kappas },
            description: format!(
                "gaussian d={} lambda_min={:.6e}",
                self.dim(),
                self.eigenvalues[0]
            ),
        }
    }
}

/// Finite Gaussian mixture `φ² = Σ αᵢ N(μᵢ, Σᵢ)`.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<GaussianComponent>,
    cumulative: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| invalid("components", "mixture needs at least one component"))?;
        let dim = first.dim();
        for c in &components {
            check_dim(dim, c.dim())?;
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(invalid("weight", format!("weights sum to {total}, not 1")));
        }
        let mut acc = 0.0;
        let cumulative = components
            .iter()
            .map(|c| {
                acc += c.weight;
                acc
            })
            .collect();
        Ok(Self {
            dim,
            components,
            cumulative,
        })
    }

    /// `N(0, I_d)`.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::isotropic(dim, 1.0)
    }

    /// `N(0, s I_d)`.
    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        Self::new(vec![GaussianComponent::new(
            1.0,
            vec![0.0; dim],
            CovarianceSpec::Iso(variance),
        )?])
    }

    pub fn from_spec(spec: &MixtureSpec) -> Result<Self> {
        let comps = spec
            .components
            .iter()
            .map(|c| GaussianComponent::new(c.weight, c.mean.clone(), c.cov.clone()))
            .collect::<Result<Vec<_>>>()?;
        let m = Self::new(comps)?;
        check_dim(spec.dim, m.dim)?;
        Ok(m)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_spec(&serde_json::from_str(text)?)
    }

    pub fn spec(&self) -> MixtureSpec {
        MixtureSpec {
            dim: self.dim,
            components: self.components.iter().map(|c| c.spec()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn is_zero_mean(&self) -> bool {
        self.components.iter().all(|c| c.is_zero_mean())
    }

    /// `E‖x‖² = Σ αᵢ (tr Σᵢ + ‖μᵢ‖²)`.
    pub fn second_moment_trace(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * (c.covariance.trace() + c.mean.norm_squared()))
            .sum()
    }

    /// Draws one sample into `out`; `z` is scratch of length `dim`.
    pub fn draw(&self, rng: &mut LabRng, out: &mut [f64], z: &mut [f64]) {
        let u: f64 = rng.random();
        let k = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.components.len() - 1);
        let comp = &self.components[k];
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for i in 0..self.dim {
            let mut acc = comp.mean[i];
            for j in 0..=i {
                acc += comp.chol[(i, j)] * z[j];
            }
            out[i] = acc;
        }
    }

    /// Fills a row-major buffer with the samples of chunk `chunk`.
    pub fn fill_chunk(&self, seed: u64, chunk: usize, count: usize, buf: &mut Vec<f64>) {
        let d = self.dim;
        buf.resize(count * d, 0.0);
        let mut rng = stream_rng(seed, chunk as u64);
        let mut z = vec![0.0; d];
        for row in buf.chunks_exact_mut(d) {
            self.draw(&mut rng, row, &mut z);
        }
    }

    /// `n` i.i.d. samples as the rows of an `n × d` matrix.
    pub fn sample(&self, n: usize, seed: u64) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(invalid("n", "sample count must be at least 1"));
        }
        let d = self.dim;
        let chunks = map_chunks(n, |k, range| {
            let mut buf = Vec::new();
            self.fill_chunk(seed, k, range.len(), &mut buf);
            buf
        });
        let flat: Vec<f64> = chunks.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(n, d, &flat))
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.ln_density(x)?.exp())
    }

    pub fn ln_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.ln_density(x))
            .fold(f64::NEG_INFINITY, ln_add_exp))
    }

    /// The law of `⟨u, x⟩` as a one-dimensional mixture
    /// `(weight, mean, variance)`.
    pub fn projected(&self, u: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
        check_dim(self.dim, u.len())?;
        let u = DVector::from_column_slice(u);
        Ok(self
            .components
            .iter()
            .map(|c| (c.weight, c.mean.dot(&u), (c.covariance.clone() * &u).dot(&u)))
            .collect())
    }

    /// CDF of `⟨u, x⟩` at `t`.
    pub fn projected_cdf(&self, u: &[f64], t: f64) -> Result<f64> {
        Ok(self
            .projected(u)?
            .iter()
            .map(|(w, m, v)| w * normal_cdf((t - m) / v.sqrt()))
            .sum())
    }

    /// Pointwise maximum of the component profiles (each component is
    /// ε(r)-concentrated for the common ε).
    pub fn epsilon_profile(&self) -> ConcentrationProfile {
        if self.components.len() == 1 {
            return self.components[0].epsilon_profile();
        }
        let parts: Vec<_> = self.components.iter().map(|c| c.epsilon_profile()).collect();
        ConcentrationProfile {
            description: format!("max over {} gaussian components", parts.len()),
            kind: ProfileKind::Max(parts),
        }
    }
}

#[derive(Clone)]
enum ProfileKind {
    /// `|φ̂|²` Gaussian with covariance eigenvalues `kappas`.
    Gaussian { kappas: Vec<f64> },
    Max(Vec<ConcentrationProfile>),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

/// A Fourier-concentration function `r ↦ ε(r)`.
#[derive(Clone)]
pub struct ConcentrationProfile {
    kind: ProfileKind,
    description: String,
}

impl fmt::Debug for ConcentrationProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConcentrationProfile")
            .field("description", &self.description)
            .finish()
    }
}

impl ConcentrationProfile {
    /// A user-supplied profile; `f` must be non-increasing with values in [0, 1].
    pub fn custom(description: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            kind: ProfileKind::Custom(Arc::new(f)),
            description: description.into(),
        }
    }

    /// `ε ≡ 0`.
    pub fn zero() -> Self {
        Self::custom("zero", |_| 0.0)
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn epsilon(&self, r: f64) -> Result<f64> {
        Ok(self.ln_epsilon(r)?.exp())
    }

    /// `ln ε(r)`; finite far beyond the range where `ε` underflows.
    pub fn ln_epsilon(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(invalid("r", format!("radius {r} must be non-negative")));
        }
        Ok(match &self.kind {
            ProfileKind::Gaussian { kappas } => 0.5 * ln_quadratic_form_tail(kappas, r * r),
            ProfileKind::Max(parts) => {
                let mut best = f64::NEG_INFINITY;
                for p in parts {
                    best = best.max(p.ln_epsilon(r)?);
                }
                best
            }
            ProfileKind::Custom(f) => f(r).clamp(0.0, 1.0).ln(),
        })
    }
}

/// Truncation of the generalized chi-square series.
const MAX_SERIES_TERMS: usize = 20_000;

/// `ln P(Σ κᵢ Zᵢ² ≥ t)` for i.i.d. standard normal `Zᵢ`.
///
/// Equal weights reduce to a chi-square tail. Unequal weights use Ruben's
/// positive mixture `Σ_k c_k P(χ²_{d+2k} ≥ t/β)` with `β = min κ`, summed in
/// the log domain. If the series is cut at `MAX_SERIES_TERMS`, the unspent
/// coefficient mass is added as an upper bound.
pub fn ln_quadratic_form_tail(kappas: &[f64], t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let d = kappas.len() as f64;
    let beta = kappas.iter().copied().fold(f64::INFINITY, f64::min);
    let kmax = kappas.iter().copied().fold(0.0, f64::max);
    if (kmax - beta) <= 1e-14 * kmax {
        return ln_gamma_q(0.5 * d, 0.5 * t / beta);
    }
    let gammas: Vec<f64> = kappas.iter().map(|k| 1.0 - beta / k).collect();
    let c0: f64 = kappas.iter().map(|k| 0.5 * (beta / k).ln()).sum::<f64>().exp();
    let x = 0.5 * t / beta;
    let mut coeffs = vec![c0];
    let mut g = vec![0.0];
    let mut powers = vec![1.0; gammas.len()];
    let mut mass = CompensatedSum::new();
    mass.add(c0);
    let mut ln_sum = c0.ln() + ln_gamma_q(0.5 * d, x);
    let mut prev_ln_term = ln_sum;
    let mut quiet = 0usize;
    for k in 1..MAX_SERIES_TERMS {
        let gk: f64 = gammas
            .iter()
            .zip(powers.iter_mut())
            .map(|(gm, p)| {
                *p *= gm;
                *p
            })
            .sum();
        g.push(gk);
        let ck = (1..=k).map(|j| g[j] * coeffs[k - j]).sum::<f64>() / (2.0 * k as f64);
        coeffs.push(ck);
        mass.add(ck);
        if ck <= 0.0 {
            break;
        }
        let ln_term = ck.ln() + ln_gamma_q(0.5 * d + k as f64, x);
        ln_sum = ln_add_exp(ln_sum, ln_term);
        if ln_term < ln_sum - 40.0 && ln_term < prev_ln_term {
            quiet += 1;
            if quiet >= 8 {
                return ln_sum;
            }
        } else {
            quiet = 0;
        }
        if 1.0 - mass.value() <= 0.0 {
            return ln_sum;
        }
        prev_ln_term = ln_term;
    }
    let rest = (1.0 - mass.value()).max(0.0);
    if rest > 0.0 {
        ln_add_exp(ln_sum, rest.ln())
    } else {
        ln_sum
    }
}

/// Truncated evaluation of `Σ_{n≥1} ε(n r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailSum {
    /// `Σ_{n=1}^{n_max} ε(n r)`.
    pub partial: f64,
    /// Upper bound on `Σ_{n>n_max} ε(n r)`.
    pub remainder: f64,
    pub terms: usize,
}

impl TailSum {
    pub fn total(&self) -> f64 {
        self.partial + self.remainder
    }
}

/// Partial sum of `ε(n r)` for `n = 1..=n_max` plus a geometric majorant of
/// the rest, `ε((N+1)r) / (1 - q)` with `q = ε((N+1)r)/ε(Nr)`. The majorant
/// is valid whenever the ratios `ε((n+1)r)/ε(nr)` are non-increasing, which
/// holds for the log-concave Gaussian tails.
pub fn bound_tail_sum(profile: &ConcentrationProfile, r: f64, n_max: usize) -> Result<TailSum> {
    if !(r > 0.0) {
        return Err(invalid("r", format!("radius {r} must be positive")));
    }
    if n_max == 0 {
        return Err(invalid("n_max", "need at least one term"));
    }
    let mut sum = CompensatedSum::new();
    let mut last = f64::NEG_INFINITY;
    for n in 1..=n_max {
        last = profile.ln_epsilon(n as f64 * r)?;
        sum.add(last.exp());
    }
    let next = profile.ln_epsilon((n_max + 1) as f64 * r)?;
    let remainder = if next == f64::NEG_INFINITY {
        0.0
    } else {
        let ln_q = next - last;
        if ln_q >= 0.0 {
            f64::INFINITY
        } else {
            (next - (-ln_q.exp()).ln_1p()).exp()
        }
    };
    Ok(TailSum {
        partial: sum.value(),
        remainder,
        terms: n_max,
    })
}
