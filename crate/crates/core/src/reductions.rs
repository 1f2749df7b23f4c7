//! Intersections of integer halfspaces as clipped ReLU-sum networks.
//!
//! Boolean points and integer weights keep every inner product an exact
//! integer, so the equivalence `∧ᵢ(⟨wᵢ,x⟩ ≥ bᵢ) = 1 − σ(Σᵢ[bᵢ − ⟨wᵢ,x⟩]₊)`
//! is checked with no floating point at all.

use crate::error::{check_dim, invalid, LabError, Result};
use crate::predictors::ClippedReluSum;
use crate::rng::{map_chunks, stream_rng};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Largest cube dimension swept exhaustively.
pub const MAX_CUBE_DIM: usize = 24;

fn check_boolean(x: &[i64]) -> Result<()> {
    match x.iter().position(|v| *v != 0 && *v != 1) {
        Some(index) => Err(LabError::NonBoolean { index, value: x[index] }),
        None => Ok(()),
    }
}

/// `x ↦ ∧ᵢ (⟨wᵢ, x⟩ ≥ bᵢ)` on `{0,1}^{d−1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "IntersectionJson", into = "IntersectionJson")]
pub struct HalfspaceIntersection {
    weights: Vec<Vec<i64>>,
    thresholds: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
struct IntersectionJson {
    weights: Vec<Vec<i64>>,
    thresholds: Vec<i64>,
}

impl From<HalfspaceIntersection> for IntersectionJson {
    fn from(h: HalfspaceIntersection) -> Self {
        Self {
            weights: h.weights,
            thresholds: h.thresholds,
        }
    }
}

impl TryFrom<IntersectionJson> for HalfspaceIntersection {
    type Error = LabError;

    fn try_from(j: IntersectionJson) -> Result<Self> {
        Self::new(j.weights, j.thresholds)
    }
}

impl HalfspaceIntersection {
    pub fn new(weights: Vec<Vec<i64>>, thresholds: Vec<i64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid("weights", "need at least one halfspace"));
        }
        check_dim(weights.len(), thresholds.len())?;
        let dim = weights[0].len();
        if dim == 0 {
            return Err(invalid("weights", "need at least one coordinate"));
        }
        for w in &weights {
            check_dim(dim, w.len())?;
        }
        Ok(Self { weights, thresholds })
    }

    /// Accepts real-valued data only when every entry is an integer.
    pub fn from_f64(weights: &[Vec<f64>], thresholds: &[f64]) -> Result<Self> {
        let to_int = |v: f64| -> Result<i64> {
            if v.fract() == 0.0 && v.abs() < 2f64.powi(53) {
                Ok(v as i64)
            } else {
                Err(invalid("weights", format!("{v} is not an integer")))
            }
        };
        let w = weights
            .iter()
            .map(|r| r.iter().map(|v| to_int(*v)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let b = thresholds.iter().map(|v| to_int(*v)).collect::<Result<Vec<_>>>()?;
        Self::new(w, b)
    }

    /// Weights and thresholds uniform on `[−bound, bound]`.
    pub fn random(dim: usize, n: usize, bound: i64, seed: u64) -> Result<Self> {
        if bound < 0 {
            return Err(invalid("bound", "must be non-negative"));
        }
        let mut rng = stream_rng(seed, 0);
        let weights = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-bound..=bound)).collect())
            .collect();
        let thresholds = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::new(weights, thresholds)
    }

    /// Cube dimension `d − 1`.
    pub fn dim(&self) -> usize {
        self.weights[0].len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[Vec<i64>] {
        &self.weights
    }

    pub fn thresholds(&self) -> &[i64] {
        &self.thresholds
    }

    /// `maxᵢ ‖(wᵢ, bᵢ)‖`.
    pub fn max_norm(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.thresholds)
            .map(|(w, b)| (w.iter().map(|v| (v * v) as f64).sum::<f64>() + (b * b) as f64).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn eval(&self, x: &[i64]) -> Result<u8> {
        check_dim(self.dim(), x.len())?;
        check_boolean(x)?;
        Ok(self.eval_unchecked(x))
    }

    fn eval_unchecked(&self, x: &[i64]) -> u8 {
        let all = self
            .weights
            .iter()
            .zip(&self.thresholds)
            .all(|(w, b)| w.iter().zip(x).map(|(a, c)| a * c).sum::<i64>() >= *b);
        u8::from(all)
    }
}

/// `x ↦ σ(Σᵢ [⟨uᵢ, x⟩]₊)` with integer columns `uᵢ` and `σ` the clip to `[0,1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegerClippedNetwork {
    /// Each column has length `d`; the last coordinate multiplies the constant 1.
    pub columns: Vec<Vec<i64>>,
}

impl IntegerClippedNetwork {
    pub fn dim(&self) -> usize {
        self.columns[0].len()
    }

    pub fn eval(&self, x: &[i64]) -> Result<i64> {
        check_dim(self.dim(), x.len())?;
        check_boolean(x)?;
        Ok(self.eval_unchecked(x))
    }

    fn eval_unchecked(&self, x: &[i64]) -> i64 {
        let s: i64 = self
            .columns
            .iter()
            .map(|u| u.iter().zip(x).map(|(a, c)| a * c).sum::<i64>().max(0))
            .sum();
        s.clamp(0, 1)
    }

    /// The same network with `f64` weights, columns as `W`'s columns.
    pub fn to_float(&self) -> Result<ClippedReluSum> {
        let d = self.dim();
        let w = DMatrix::from_fn(d, self.columns.len(), |i, j| self.columns[j][i] as f64);
        ClippedReluSum::new(w)
    }
}

/// Columns `(−wᵢ, bᵢ)`, so that on `{0,1}^{d−1}×{1}` the network equals one
/// minus the intersection.
pub fn to_clipped_network(h: &HalfspaceIntersection) -> IntegerClippedNetwork {
    let columns = h
        .weights
        .iter()
        .zip(&h.thresholds)
        .map(|(w, b)| w.iter().map(|v| -v).chain(std::iter::once(*b)).collect())
        .collect();
    IntegerClippedNetwork { columns }
}

fn cube_point(bits: u64, dim: usize, buf: &mut [i64]) {
    for (i, v) in buf.iter_mut().enumerate().take(dim) {
        *v = ((bits >> i) & 1) as i64;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub dim: usize,
    pub halfspaces: usize,
    pub points: u64,
    /// Points where the integer network differs from one minus the intersection.
    pub mismatches: u64,
    /// Points where the `f64` network differs.
    pub float_mismatches: u64,
    /// First mismatching point, if any.
    pub first_mismatch: Option<Vec<i64>>,
}

/// Sweeps the whole cube comparing the network against the intersection.
pub fn exhaustive_check(h: &HalfspaceIntersection) -> Result<ReductionReport> {
    let dim = h.dim();
    if dim > MAX_CUBE_DIM {
        return Err(invalid("dim", format!("cube of dimension {dim} is too large to sweep")));
    }
    let net = to_clipped_network(h);
    let float = net.to_float()?;
    let points = 1u64 << dim;
    let results = map_chunks(points as usize, |_, range| {
        let mut x = vec![0i64; dim + 1];
        x[dim] = 1;
        let mut xf = vec![0.0; dim + 1];
        let (mut bad, mut bad_f, mut first) = (0u64, 0u64, None);
        for bits in range {
            cube_point(bits as u64, dim, &mut x);
            let want = 1 - i64::from(h.eval_unchecked(&x[..dim]));
            if net.eval_unchecked(&x) != want {
                bad += 1;
                first.get_or_insert_with(|| x[..dim].to_vec());
            }
            xf.iter_mut().zip(&x).for_each(|(f, i)| *f = *i as f64);
            if float.predict(&xf).map_or(true, |v| v != want as f64) {
                bad_f += 1;
            }
        }
        (bad, bad_f, first)
    });
    let mut report = ReductionReport {
        dim,
        halfspaces: h.len(),
        points,
        mismatches: 0,
        float_mismatches: 0,
        first_mismatch: None,
    };
    for (bad, bad_f, first) in results {
        report.mismatches += bad;
        report.float_mismatches += bad_f;
        if report.first_mismatch.is_none() {
            report.first_mismatch = first;
        }
    }
    Ok(report)
}

/// `W̃ = [W; Iₙ]` acting on lifted inputs `x̃ = (x, 0, …, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedNetwork {
    original: DMatrix<f64>,
    padded: DMatrix<f64>,
}

impl PaddedNetwork {
    pub fn original(&self) -> &DMatrix<f64> {
        &self.original
    }

    pub fn padded(&self) -> &DMatrix<f64> {
        &self.padded
    }

    pub fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.original.nrows(), x.len())?;
        let mut out = x.to_vec();
        out.resize(self.padded.nrows(), 0.0);
        Ok(out)
    }

    /// Smallest singular value of `W̃`.
    pub fn s_min(&self) -> f64 {
        crate::numeric::singular_values(&self.padded).last().copied().unwrap_or(0.0)
    }

    pub fn network(&self) -> Result<ClippedReluSum> {
        ClippedReluSum::new(self.padded.clone())
    }
}

pub fn pad_independent(w: &DMatrix<f64>) -> Result<PaddedNetwork> {
    let (d, n) = w.shape();
    if d == 0 || n == 0 {
        return Err(invalid("W", "need at least one row and one column"));
    }
    let mut padded = DMatrix::zeros(d + n, n);
    padded.rows_mut(0, d).copy_from(w);
    padded.rows_mut(d, n).fill_with_identity();
    Ok(PaddedNetwork {
        original: w.clone(),
        padded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaddingCheck {
    pub s_min: f64,
    /// `|s_min(W̃)² − (λ_min(WᵀW) + 1)|`.
    pub eigen_gap: f64,
    /// Largest `|h(W̃ᵀx̃) − h(Wᵀx)|` over the probe points.
    pub max_output_diff: f64,
    pub points: usize,
}

/// Compares padded and original networks on `n_points` random Boolean points.
pub fn check_padding(w: &DMatrix<f64>, n_points: usize, seed: u64) -> Result<PaddingCheck> {
    let pad = pad_independent(w)?;
    let orig = ClippedReluSum::new(w.clone())?;
    let net = pad.network()?;
    let mut rng = stream_rng(seed, 0);
    let mut worst = 0.0f64;
    for _ in 0..n_points {
        let x: Vec<f64> = (0..w.nrows()).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
        let a = orig.predict(&x)?;
        let b = net.predict(&pad.lift(&x)?)?;
        worst = worst.max((a - b).abs());
    }
    let lambda_min = lambda_min_gram(w);
    let s_min = pad.s_min();
    Ok(PaddingCheck {
        s_min,
        eigen_gap: (s_min * s_min - (lambda_min + 1.0)).abs(),
        max_output_diff: worst,
        points: n_points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundingReport {
    pub n: usize,
    /// `Pr(f̃ ≠ g)` with `f̃ = 1 − rnd(f)`.
    pub disagreement: f64,
    /// `E[((1 − f) − g)²]`.
    pub mse: f64,
    /// Points where `1[f̃ ≠ g] > 8((1 − f) − g)²`.
    pub pointwise_violations: usize,
    /// `disagreement ≤ 8 · mse`.
    pub holds: bool,
}

/// `rnd(z) = 0` if `z ≤ ½`, else 1.
pub fn rnd(z: f64) -> i64 {
    i64::from(z > 0.5)
}

pub fn round_and_bound(f: &[f64], g: &[i64]) -> Result<RoundingReport> {
    check_dim(f.len(), g.len())?;
    check_boolean(g)?;
    if f.is_empty() {
        return Err(invalid("f", "need at least one pair"));
    }
    let mut disagree = 0usize;
    let mut sq = 0.0;
    let mut violations = 0usize;
    for (fi, gi) in f.iter().zip(g) {
        let ft = 1 - rnd(*fi);
        let e = ((1.0 - fi) - *gi as f64).powi(2);
        let miss = ft != *gi;
        disagree += usize::from(miss);
        if miss && 1.0 > 8.0 * e {
            violations += 1;
        }
        sq += e;
    }
    let n = f.len() as f64;
    let disagreement = disagree as f64 / n;
    let mse = sq / n;
    Ok(RoundingReport {
        n: f.len(),
        disagreement,
        mse,
        pointwise_violations: violations,
        holds: disagreement <= 8.0 * mse,
    })
}

/// `W` whose columns are the network weights of `h`'s clipped network, as a
/// real matrix for padding.
pub fn network_matrix(h: &HalfspaceIntersection) -> DMatrix<f64> {
    let net = to_clipped_network(h);
    DMatrix::from_fn(net.dim(), net.columns.len(), |i, j| net.columns[j][i] as f64)
}

/// Smallest eigenvalue of `WᵀW`.
pub fn lambda_min_gram(w: &DMatrix<f64>) -> f64 {
    (w.transpose() * w).symmetric_eigenvalues().min()
}
