//! Whitening preconditioner and invariance harnesses.
//!
//! Learning algorithms here follow one contract: a dataset goes in, a
//! predictor `x ↦ f(Wᵀx)` comes out, with `f` drawn from the [`Link`]
//! registry. Running any orthogonally invariant algorithm on whitened data
//! yields a linearly invariant one.

use crate::error::{check_dim, invalid, LabError, Result};
use crate::numeric::{singular_values, thin_svd};
use crate::rng::{derive_seed, map_indexed, stream_rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Relative singular-value cutoff defining numerical rank.
pub const RANK_TOL: f64 = 1e-12;
/// Allowed deviation of the whitened Gram matrix from the identity.
pub const GRAM_TOL: f64 = 1e-10;
/// Residual below which a point counts as inside a span.
pub const SPAN_TOL: f64 = 1e-8;

const TAG_TRIAL: u64 = 21;
const TAG_HOLDOUT: u64 = 22;
const TAG_INIT: u64 = 23;
const TAG_DATASET: u64 = 24;

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        (m.ncols(), rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let (cols, rows): (usize, Vec<Vec<f64>>) = Deserialize::deserialize(d)?;
        if rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.concat();
        Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
    }
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, 0);
    // Column-major fill keeps the draw order fixed.
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Instances as columns of a `d × m` matrix with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.ncols() == 0 || x.nrows() == 0 {
            return Err(invalid("X", "need at least one instance and one feature"));
        }
        check_dim(x.ncols(), y.len())?;
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(invalid("X", "entries must be finite"));
        }
        Ok(Self { x, y })
    }

    /// Gaussian instances with labels from a fixed random one-hidden-layer
    /// teacher, so that fits are nontrivial.
    pub fn random(d: usize, m: usize, seed: u64) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(invalid("d", "dimension and size must be positive"));
        }
        let x = gaussian_matrix(d, m, derive_seed(seed, &[TAG_DATASET, 0]));
        let teacher = gaussian_matrix(d, 3, derive_seed(seed, &[TAG_DATASET, 1])) / (d as f64).sqrt();
        let z = x.transpose() * teacher;
        let y = z.row_iter().map(|r| r[0].max(0.0) - 0.5 * r[1].max(0.0) + 0.3 * r[2]).collect();
        Self::new(x, y)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Instances mapped through `x ↦ Mx`; labels unchanged.
    pub fn transform(&self, m: &DMatrix<f64>) -> Result<Self> {
        check_dim(self.dim(), m.ncols())?;
        Self::new(m * &self.x, self.y.clone())
    }

    /// Rows `x1,…,xd,y` under a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (1..=self.dim()).map(|i| format!("x{i}")).collect();
        let _ = writeln!(out, "{},y", header.join(","));
        for (col, y) in self.x.column_iter().zip(&self.y) {
            for v in col.iter() {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{y}");
        }
        out
    }

    /// Parses rows `x1,…,xd,y`; a non-numeric first line is taken as a header.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| invalid("csv", e.to_string()))?;
            let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(r) => rows.push(r),
                Err(_) if i == 0 => continue,
                Err(e) => return Err(invalid("csv", format!("row {}: {e}", i + 1))),
            }
        }
        let width = rows.first().map(Vec::len).ok_or_else(|| invalid("csv", "no data rows"))?;
        if width < 2 || rows.iter().any(|r| r.len() != width) {
            return Err(invalid("csv", "rows need equal length and at least one feature"));
        }
        let d = width - 1;
        let x = DMatrix::from_fn(d, rows.len(), |i, j| rows[j][i]);
        let y = rows.iter().map(|r| r[d]).collect();
        Self::new(x, y)
    }
}

/// `P = D⁻¹Uᵀ` from the thin SVD `X = UDVᵀ`, truncated to numerical rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningTransform {
    #[serde(with = "matrix_rows")]
    pub p: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    #[serde(with = "matrix_rows")]
    pub v: DMatrix<f64>,
    pub rank: usize,
    /// `max |(PX)(PX)ᵀ − I|`.
    pub gram_error: f64,
}

impl WhiteningTransform {
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.p * x
    }
}

pub fn whiten(data: &Dataset) -> Result<WhiteningTransform> {
    let x = data.x();
    let svd = thin_svd(x);
    if !(svd.s.first().copied().unwrap_or(0.0) > 0.0) {
        return Err(invalid("X", "all-zero data cannot be whitened"));
    }
    let rank = svd.rank(RANK_TOL);
    let u = svd.u.columns(0, rank).into_owned();
    let v = svd.v.columns(0, rank).into_owned();
    let s = svd.s[..rank].to_vec();
    let mut p = u.transpose();
    for (mut row, sk) in p.row_iter_mut().zip(&s) {
        row /= *sk;
    }
    let px = &p * x;
    let gram = &px * px.transpose();
    let gram_error = (gram - DMatrix::identity(rank, rank)).amax();
    if gram_error > GRAM_TOL {
        return Err(LabError::Verification(format!("whitened Gram deviates from identity by {gram_error:.3e}")));
    }
    Ok(WhiteningTransform {
        p,
        u,
        singular_values: s,
        v,
        rank,
        gram_error,
    })
}

/// Registry of output maps `f` in `x ↦ f(Wᵀx)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Link {
    /// `f(z) = z`, single column.
    Identity,
    /// `f(z) = vᵀ[z + b]₊ + c`.
    ReluNet { b: Vec<f64>, v: Vec<f64>, c: f64 },
}

impl Link {
    fn eval(&self, z: &[f64]) -> f64 {
        match self {
            Link::Identity => z[0],
            Link::ReluNet { b, v, c } => c + z.iter().zip(b).zip(v).map(|((zi, bi), vi)| vi * (zi + bi).max(0.0)).sum::<f64>(),
        }
    }

    fn width(&self) -> Option<usize> {
        match self {
            Link::Identity => Some(1),
            Link::ReluNet { v, .. } => Some(v.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub link: Link,
    #[serde(with = "matrix_rows")]
    pub w: DMatrix<f64>,
}

impl LinearPredictor {
    pub fn new(link: Link, w: DMatrix<f64>) -> Result<Self> {
        if let Some(k) = link.width() {
            check_dim(k, w.ncols())?;
        }
        Ok(Self { link, w })
    }

    /// Predictions on the columns of `x`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_dim(self.w.nrows(), x.nrows())?;
        let z = x.transpose() * &self.w;
        Ok(z.row_iter().map(|r| self.link.eval(&r.iter().copied().collect::<Vec<_>>())).collect())
    }
}

/// Learning algorithms obeying the dataset-in, `(f, W)`-out contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InnerAlgorithm {
    /// Minimum-norm least squares.
    MinNormLeastSquares,
    /// Full-batch GD on the squared loss of a linear model from zero.
    /// `step` is relative to the loss smoothness.
    LinearGd { steps: usize, step: f64 },
    /// Full-batch GD on a one-hidden-layer ReLU net whose first layer starts
    /// in the span of the data.
    ReluNetGd { width: usize, steps: usize, step: f64 },
    /// Returns the first instance as the weight vector.
    FirstColumn,
    /// Greedy coordinate descent on the squared loss; depends on the basis.
    GreedyCoordinate { steps: usize },
}

impl InnerAlgorithm {
    pub fn linear_gd() -> Self {
        Self::LinearGd { steps: 50, step: 0.5 }
    }

    pub fn relu_net_gd() -> Self {
        Self::ReluNetGd { width: 8, steps: 200, step: 0.05 }
    }

    pub fn greedy_coordinate() -> Self {
        Self::GreedyCoordinate { steps: 3 }
    }

    /// The orthogonally invariant algorithms.
    pub fn registry() -> Vec<Self> {
        vec![Self::MinNormLeastSquares, Self::linear_gd(), Self::relu_net_gd()]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::MinNormLeastSquares => "min_norm_least_squares",
            Self::LinearGd { .. } => "linear_gd",
            Self::ReluNetGd { .. } => "relu_net_gd",
            Self::FirstColumn => "first_column",
            Self::GreedyCoordinate { .. } => "greedy_coordinate",
        }
    }

    pub fn run(&self, data: &Dataset, seed: u64) -> Result<LinearPredictor> {
        let x = data.x();
        let y = DVector::from_column_slice(data.y());
        let m = data.len() as f64;
        match *self {
            Self::MinNormLeastSquares => {
                // w = U diag(1/s) Vᵀ y over the numerical rank of X.
                let svd = thin_svd(x);
                let k = svd.rank(RANK_TOL);
                let mut coef = svd.v.columns(0, k).transpose() * &y;
                for (c, s) in coef.iter_mut().zip(&svd.s) {
                    *c /= s;
                }
                let w = svd.u.columns(0, k) * coef;
                LinearPredictor::new(Link::Identity, DMatrix::from_column_slice(data.dim(), 1, w.as_slice()))
            }
            Self::LinearGd { steps, step } => {
                let smooth = 2.0 * spectral_norm(x).powi(2) / m;
                let eta = if smooth > 0.0 { step / smooth } else { 0.0 };
                let mut w = DVector::zeros(data.dim());
                for _ in 0..steps {
                    let r = x.transpose() * &w - &y;
                    w -= (2.0 * eta / m) * (x * r);
                }
                LinearPredictor::new(Link::Identity, DMatrix::from_column_slice(data.dim(), 1, w.as_slice()))
            }
            Self::ReluNetGd { width, steps, step } => relu_net_gd(data, width, steps, step, seed),
            Self::FirstColumn => LinearPredictor::new(Link::Identity, x.columns(0, 1).into_owned()),
            Self::GreedyCoordinate { steps } => {
                let mut w = DVector::<f64>::zeros(data.dim());
                let mut r = y.clone();
                for _ in 0..steps {
                    let g = x * &r;
                    let Some(j) = (0..data.dim()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()).then(b.cmp(&a))) else {
                        break;
                    };
                    let xj = x.row(j).transpose();
                    let nn = xj.norm_squared();
                    if nn == 0.0 {
                        break;
                    }
                    let alpha = g[j] / nn;
                    w[j] += alpha;
                    r -= alpha * xj;
                }
                LinearPredictor::new(Link::Identity, DMatrix::from_column_slice(data.dim(), 1, w.as_slice()))
            }
        }
    }
}

fn relu_net_gd(data: &Dataset, width: usize, steps: usize, step: f64, seed: u64) -> Result<LinearPredictor> {
    if width == 0 {
        return Err(invalid("width", "must be positive"));
    }
    let x = data.x();
    let m = data.len();
    let scale = x.norm();
    let g = gaussian_matrix(m, width, derive_seed(seed, &[TAG_INIT, 0]));
    let mut w = if scale > 0.0 { x * g / scale } else { DMatrix::zeros(data.dim(), width) };
    let coefs = gaussian_matrix(2, width, derive_seed(seed, &[TAG_INIT, 1]));
    let mut b: Vec<f64> = coefs.row(0).iter().map(|v| 0.1 * v).collect();
    let mut v: Vec<f64> = coefs.row(1).iter().map(|v| v / (width as f64).sqrt()).collect();
    let mut c = 0.0;
    let smooth = (spectral_norm(x).powi(2) / m as f64).max(1.0);
    let eta = step / smooth;
    for t in 0..steps {
        let z = x.transpose() * &w;
        let mut a = DMatrix::zeros(m, width);
        let mut db = vec![0.0; width];
        let mut dv = vec![0.0; width];
        let mut dc = 0.0;
        for i in 0..m {
            let pre: Vec<f64> = (0..width).map(|j| z[(i, j)] + b[j]).collect();
            let pred = c + pre.iter().zip(&v).map(|(p, vj)| vj * p.max(0.0)).sum::<f64>();
            let r = 2.0 * (pred - data.y()[i]) / m as f64;
            dc += r;
            for j in 0..width {
                if pre[j] > 0.0 {
                    dv[j] += r * pre[j];
                    db[j] += r * v[j];
                    a[(i, j)] = r * v[j];
                }
            }
        }
        w -= eta * (x * a);
        for j in 0..width {
            b[j] -= eta * db[j];
            v[j] -= eta * dv[j];
        }
        c -= eta * dc;
        if w.iter().chain(&v).any(|p| !p.is_finite()) {
            return Err(LabError::Divergence {
                iteration: t + 1,
                reason: "ReLU net training produced non-finite weights".into(),
            });
        }
    }
    LinearPredictor::new(Link::ReluNet { b, v, c }, w)
}

/// Whitens the data, runs `inner` on `PX` and returns `x ↦ f((PᵀW)ᵀx)`.
pub fn whitened_pipeline(inner: &InnerAlgorithm, data: &Dataset, seed: u64) -> Result<LinearPredictor> {
    let t = whiten(data)?;
    let white = Dataset::new(t.apply(data.x()), data.y().to_vec())?;
    let out = inner.run(&white, seed)?;
    LinearPredictor::new(out.link, t.p.transpose() * out.w)
}

/// An algorithm as seen by the harnesses: an inner algorithm, optionally
/// behind the whitening preconditioner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Algorithm {
    pub inner: InnerAlgorithm,
    pub whitened: bool,
}

impl Algorithm {
    pub fn plain(inner: InnerAlgorithm) -> Self {
        Self { inner, whitened: false }
    }

    pub fn whitened(inner: InnerAlgorithm) -> Self {
        Self { inner, whitened: true }
    }

    pub fn run(&self, data: &Dataset, seed: u64) -> Result<LinearPredictor> {
        if self.whitened {
            whitened_pipeline(&self.inner, data, seed)
        } else {
            self.inner.run(data, seed)
        }
    }
}

/// Uniform (Haar) orthogonal matrix: QR of a Gaussian matrix with the signs
/// of `R`'s diagonal moved into `Q`.
pub fn haar_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    let qr = gaussian_matrix(d, d, seed).qr();
    let r = qr.r();
    let mut q = qr.q();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

/// `Q₁ diag(s) Q₂` with singular values log-spaced over
/// `[cond^{-1/2}, cond^{1/2}]`, so `‖M‖ = ‖M⁻¹‖ = √cond`.
pub fn random_invertible(d: usize, cond: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(cond >= 1.0) || !cond.is_finite() {
        return Err(invalid("cond", "condition number must be at least 1"));
    }
    let q1 = haar_orthogonal(d, derive_seed(seed, &[1]));
    let q2 = haar_orthogonal(d, derive_seed(seed, &[2]));
    let half = cond.sqrt().ln();
    let s = DVector::from_fn(d, |i, _| {
        let t = if d == 1 { 0.5 } else { i as f64 / (d - 1) as f64 };
        (half * (2.0 * t - 1.0)).exp()
    });
    Ok(q1 * DMatrix::from_diagonal(&s) * q2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedDiscrepancy {
    /// `max_i |W_Mᵀ M x_i − Wᵀ x_i|` over the training set.
    pub train: f64,
    /// The same over the holdout points.
    pub holdout: f64,
}

/// Runs `alg` on the data and on `M`-transformed data with the same seed and
/// compares predictions on the training set and on `holdout`.
pub fn paired_discrepancy(
    alg: &Algorithm,
    data: &Dataset,
    m: &DMatrix<f64>,
    holdout: &DMatrix<f64>,
    seed: u64,
) -> Result<PairedDiscrepancy> {
    let original = alg.run(data, seed)?;
    let moved = alg.run(&data.transform(m)?, seed)?;
    let gap = |pts: &DMatrix<f64>| -> Result<f64> {
        let a = original.predict(pts)?;
        let b = moved.predict(&(m * pts))?;
        Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
    };
    Ok(PairedDiscrepancy {
        train: gap(data.x())?,
        holdout: if holdout.ncols() == 0 { 0.0 } else { gap(holdout)? },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceVerdict {
    pub algorithm: String,
    pub whitened: bool,
    /// "orthogonal" or "linear".
    pub transforms: String,
    pub trials: usize,
    pub max_train_discrepancy: f64,
    pub max_holdout_discrepancy: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformFamily {
    /// Haar orthogonal matrices.
    Orthogonal,
    /// Random invertible matrices with the given condition number.
    Linear { cond: f64 },
}

/// Paired-run invariance check over `n_trials` random transforms. Holdout
/// points are fresh standard Gaussians; the verdict is decided on the
/// training set.
pub fn check_invariance(
    alg: &Algorithm,
    data: &Dataset,
    family: TransformFamily,
    n_trials: usize,
    n_holdout: usize,
    seed: u64,
    tol: f64,
) -> Result<InvarianceVerdict> {
    let d = data.dim();
    let holdout = gaussian_matrix(d, n_holdout, derive_seed(seed, &[TAG_HOLDOUT]));
    let trials: Vec<usize> = (0..n_trials).collect();
    let results = map_indexed(trials, |_, k| -> Result<PairedDiscrepancy> {
        let ts = derive_seed(seed, &[TAG_TRIAL, k as u64]);
        let m = match family {
            TransformFamily::Orthogonal => haar_orthogonal(d, ts),
            TransformFamily::Linear { cond } => random_invertible(d, cond, ts)?,
        };
        paired_discrepancy(alg, data, &m, &holdout, ts)
    });
    let mut train = 0.0f64;
    let mut hold = 0.0f64;
    for r in results {
        let r = r?;
        train = train.max(r.train);
        hold = hold.max(r.holdout);
    }
    Ok(InvarianceVerdict {
        algorithm: alg.inner.name().to_string(),
        whitened: alg.whitened,
        transforms: match family {
            TransformFamily::Orthogonal => "orthogonal".into(),
            TransformFamily::Linear { .. } => "linear".into(),
        },
        trials: n_trials,
        max_train_discrepancy: train,
        max_holdout_discrepancy: hold,
        tolerance: tol,
        pass: train <= tol,
    })
}

pub fn check_orthogonal_invariance(
    alg: &Algorithm,
    data: &Dataset,
    n_trials: usize,
    seed: u64,
    tol: f64,
) -> Result<InvarianceVerdict> {
    check_invariance(alg, data, TransformFamily::Orthogonal, n_trials, 100, seed, tol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transport {
    #[serde(with = "matrix_rows")]
    pub m: DMatrix<f64>,
    /// `‖W − MᵀW⋆‖_F / ‖W‖_F`.
    pub residual: f64,
    pub m_norm: f64,
    /// `‖[W Ŵ]‖ · ‖[W⋆ Ŵ⋆]⁻¹‖`.
    pub certificate: f64,
}

fn completed_basis(w: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, n) = w.shape();
    let mut aug = DMatrix::zeros(d, n + d);
    aug.columns_mut(0, n).copy_from(w);
    aug.columns_mut(n, d).fill_with_identity();
    let q = aug.qr().q();
    let mut out = DMatrix::zeros(d, d);
    out.columns_mut(0, n).copy_from(w);
    out.columns_mut(n, d - n).copy_from(&q.columns(n, d - n));
    out
}

fn check_full_column_rank(w: &DMatrix<f64>, name: &str) -> Result<()> {
    let s = singular_values(w);
    let (lo, hi) = (s.last().copied().unwrap_or(0.0), s.first().copied().unwrap_or(0.0));
    if w.ncols() > w.nrows() || !(hi > 0.0) || lo <= RANK_TOL * hi {
        return Err(LabError::RankDeficient(format!("{name} is not full column rank")));
    }
    Ok(())
}

/// Invertible `M` with `W = MᵀW⋆`, from `Mᵀ = [W Ŵ][W⋆ Ŵ⋆]⁻¹` where the hats
/// are orthonormal complements.
pub fn transport_construct(w_star: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<Transport> {
    if w_star.shape() != w.shape() {
        return Err(LabError::DimensionMismatch {
            expected: w_star.ncols(),
            got: w.ncols(),
        });
    }
    check_full_column_rank(w_star, "W_star")?;
    check_full_column_rank(w, "W")?;
    let a = completed_basis(w);
    let b = completed_basis(w_star);
    let b_inv = b
        .clone()
        .try_inverse()
        .ok_or_else(|| LabError::RankDeficient("completed W_star basis is singular".into()))?;
    let m = (&a * &b_inv).transpose();
    let residual = (w - m.transpose() * w_star).norm() / w.norm();
    Ok(Transport {
        m_norm: spectral_norm(&m),
        certificate: spectral_norm(&a) * spectral_norm(&b_inv),
        residual,
        m,
    })
}

/// Where span-coverage instances come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpanSource {
    /// Standard Gaussian in `dim` dimensions.
    Gaussian { dim: usize },
    /// Equal-mass point masses on the columns of `directions`.
    Directions {
        #[serde(with = "matrix_rows")]
        directions: DMatrix<f64>,
    },
}

impl SpanSource {
    /// `k` random unit directions in `dim` dimensions.
    pub fn random_directions(dim: usize, k: usize, seed: u64) -> Self {
        let mut g = gaussian_matrix(dim, k, seed);
        for mut c in g.column_iter_mut() {
            c.normalize_mut();
        }
        Self::Directions { directions: g }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian { dim } => *dim,
            Self::Directions { directions } => directions.nrows(),
        }
    }

    fn draw(&self, n: usize, seed: u64) -> DMatrix<f64> {
        match self {
            Self::Gaussian { dim } => gaussian_matrix(*dim, n, seed),
            Self::Directions { directions } => {
                let mut rng = stream_rng(seed, 0);
                let k = directions.ncols();
                let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
                DMatrix::from_fn(directions.nrows(), n, |i, j| directions[(i, picks[j])])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanCoverage {
    pub d: usize,
    pub m: usize,
    pub n_datasets: usize,
    pub n_holdout: usize,
    /// Mean over datasets of the out-of-span fraction of fresh draws.
    pub mean: f64,
    pub std_error: f64,
    /// `d / (m + 1)`.
    pub bound: f64,
}

/// Estimates `E_S[Pr_x(x ∉ span S)]` for datasets `S` of size `m`.
pub fn span_coverage(source: &SpanSource, m: usize, n_holdout: usize, n_datasets: usize, seed: u64) -> Result<SpanCoverage> {
    if m == 0 || n_holdout == 0 || n_datasets == 0 {
        return Err(invalid("m", "sizes must be positive"));
    }
    let d = source.dim();
    let draws: Vec<usize> = (0..n_datasets).collect();
    let fractions = map_indexed(draws, |_, k| {
        let s = source.draw(m, derive_seed(seed, &[TAG_DATASET, k as u64, 0]));
        let fresh = source.draw(n_holdout, derive_seed(seed, &[TAG_DATASET, k as u64, 1]));
        let svd = thin_svd(&s);
        let q = svd.u.columns(0, svd.rank(RANK_TOL)).into_owned();
        let outside = fresh
            .column_iter()
            .filter(|x| {
                let resid = x - &q * (q.transpose() * x);
                resid.norm() > SPAN_TOL * x.norm().max(1.0)
            })
            .count();
        outside as f64 / n_holdout as f64
    });
    let mut acc = crate::numeric::Moments::new();
    fractions.iter().for_each(|f| acc.push(*f));
    Ok(SpanCoverage {
        d,
        m,
        n_datasets,
        n_holdout,
        mean: acc.mean(),
        std_error: acc.std_error(),
        bound: d as f64 / (m as f64 + 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn whiten_identity_is_identity() {
        let data = Dataset::new(DMatrix::identity(4, 4), vec![0.0; 4]).unwrap();
        let t = whiten(&data).unwrap();
        assert_eq!(t.rank, 4);
        let px = t.apply(data.x());
        // P is only defined up to the SVD's orthogonal freedom; PX = Vᵀ
        assert!((&px * px.transpose() - DMatrix::identity(4, 4)).amax() < 1e-14);
        assert!((t.p.transpose() * &t.p - DMatrix::identity(4, 4)).amax() < 1e-14);
    }

    #[test]
    fn whiten_diagonal_rescales_columns() {
        let x = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        let t = whiten(&Dataset::new(x.clone(), vec![0.0, 0.0]).unwrap()).unwrap();
        let px = t.apply(&x);
        for c in px.column_iter() {
            assert!((c.norm() - 1.0).abs() < 1e-14);
        }
        let mut s = t.singular_values.clone();
        s.sort_by(f64::total_cmp);
        assert_eq!(s, vec![2.0, 3.0]);
        let abs_p = t.p.map(f64::abs);
        let mut entries: Vec<f64> = abs_p.iter().copied().filter(|v| *v > 1e-15).collect();
        entries.sort_by(f64::total_cmp);
        assert!((entries[0] - 1.0 / 3.0).abs() < 1e-15 && (entries[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn whiten_random_gram_is_identity() {
        let data = Dataset::random(5, 100, 3).unwrap();
        let t = whiten(&data).unwrap();
        let px = t.apply(data.x());
        let gram = &px * px.transpose();
        assert!((gram - DMatrix::identity(5, 5)).amax() <= 1e-10);
    }

    #[test]
    fn whiten_truncates_rank() {
        let a = gaussian_matrix(6, 2, 1);
        let b = gaussian_matrix(2, 30, 2);
        let data = Dataset::new(a * b, vec![0.0; 30]).unwrap();
        let t = whiten(&data).unwrap();
        assert_eq!(t.rank, 2);
        assert_eq!(t.p.shape(), (2, 6));
    }

    #[test]
    fn whiten_rejects_zero_data() {
        let data = Dataset::new(DMatrix::zeros(3, 4), vec![0.0; 4]).unwrap();
        assert!(whiten(&data).is_err());
    }

    #[test]
    fn first_column_pipeline_is_linearly_invariant() {
        let data = Dataset::random(6, 40, 5).unwrap();
        let m = random_invertible(6, 100.0, 9).unwrap();
        assert!(spectral_norm(&m) <= 10.0 + 1e-9);
        assert!(spectral_norm(&m.clone().try_inverse().unwrap()) <= 10.0 + 1e-9);
        let alg = Algorithm::whitened(InnerAlgorithm::FirstColumn);
        let r = paired_discrepancy(&alg, &data, &m, &DMatrix::zeros(6, 0), 0).unwrap();
        assert!(r.train <= 1e-8, "{}", r.train);
    }

    #[test]
    fn linear_gd_pipeline_is_linearly_invariant() {
        let data = Dataset::random(8, 60, 6).unwrap();
        let m = random_invertible(8, 1e3, 10).unwrap();
        let alg = Algorithm::whitened(InnerAlgorithm::linear_gd());
        let r = paired_discrepancy(&alg, &data, &m, &DMatrix::zeros(8, 0), 0).unwrap();
        assert!(r.train <= 1e-6, "{}", r.train);
    }

    #[test]
    fn identity_transform_changes_nothing() {
        let data = Dataset::random(4, 20, 7).unwrap();
        for inner in InnerAlgorithm::registry() {
            let alg = Algorithm::whitened(inner);
            let r = paired_discrepancy(&alg, &data, &DMatrix::identity(4, 4), &gaussian_matrix(4, 5, 1), 3).unwrap();
            assert_eq!(r.train, 0.0);
            assert_eq!(r.holdout, 0.0);
        }
    }

    #[test]
    fn linear_gd_is_orthogonally_invariant() {
        let data = Dataset::random(10, 50, 8).unwrap();
        let v = check_orthogonal_invariance(&Algorithm::plain(InnerAlgorithm::linear_gd()), &data, 5, 1, 1e-8).unwrap();
        assert!(v.pass, "{v:?}");
        assert!(v.max_train_discrepancy <= 1e-8);
    }

    #[test]
    fn greedy_coordinate_is_not_invariant() {
        let data = Dataset::random(10, 50, 8).unwrap();
        let v = check_orthogonal_invariance(&Algorithm::plain(InnerAlgorithm::greedy_coordinate()), &data, 5, 1, 1e-6).unwrap();
        assert!(!v.pass);
        assert!(v.max_train_discrepancy >= 0.1, "{}", v.max_train_discrepancy);
    }

    #[test]
    fn min_norm_solution_interpolates_when_underdetermined() {
        let data = Dataset::random(12, 5, 2).unwrap();
        let p = InnerAlgorithm::MinNormLeastSquares.run(&data, 0).unwrap();
        let pred = p.predict(data.x()).unwrap();
        assert!(max_abs_diff(&pred, data.y()) < 1e-10);
    }

    #[test]
    fn haar_matrix_is_orthogonal() {
        let q = haar_orthogonal(7, 4);
        assert!((q.transpose() * &q - DMatrix::identity(7, 7)).amax() < 1e-13);
    }

    #[test]
    fn transport_of_identity_pair() {
        let ws = gaussian_matrix(5, 2, 11);
        let t = transport_construct(&ws, &ws).unwrap();
        assert!(t.residual <= 1e-10);
        assert!(t.m_norm >= 1.0 - 1e-12);
    }

    #[test]
    fn transport_doubling_orthonormal_target() {
        let q = gaussian_matrix(6, 2, 12).qr().q();
        let t = transport_construct(&q, &(2.0 * &q)).unwrap();
        assert!(t.residual <= 1e-10);
        assert!((t.m_norm - 2.0).abs() < 1e-10, "{}", t.m_norm);
    }

    #[test]
    fn transport_random_pair_within_certificate() {
        let ws = gaussian_matrix(6, 2, 13);
        let w = gaussian_matrix(6, 2, 14);
        let t = transport_construct(&ws, &w).unwrap();
        assert!(t.residual <= 1e-10);
        assert!(t.m_norm <= t.certificate * (1.0 + 1e-12));
        let sv = (t.m.transpose() * &ws - &w).amax();
        assert!(sv < 1e-10);
    }

    #[test]
    fn transport_rejects_rank_deficient() {
        let mut ws = gaussian_matrix(4, 2, 1);
        let c0 = ws.column(0).into_owned();
        ws.set_column(1, &(2.0 * c0));
        assert!(matches!(
            transport_construct(&ws, &gaussian_matrix(4, 2, 2)),
            Err(LabError::RankDeficient(_))
        ));
    }

    #[test]
    fn full_dimensional_source_is_always_covered() {
        let c = span_coverage(&SpanSource::Gaussian { dim: 5 }, 8, 50, 20, 1).unwrap();
        assert_eq!(c.mean, 0.0);
    }

    #[test]
    fn three_direction_source_matches_enumeration() {
        let k = 3;
        let m = 2;
        let src = SpanSource::random_directions(10, k, 5);
        let c = span_coverage(&src, m, 200, 2000, 6).unwrap();
        // Enumerate all k^m datasets; random directions are independent, so
        // a fresh draw is outside the span exactly when it was not seen.
        let mut expect = 0.0;
        for pattern in 0..k * k {
            let seen = [pattern % k, pattern / k];
            let missing = (0..k).filter(|j| !seen.contains(j)).count();
            expect += missing as f64 / k as f64 / (k * k) as f64;
        }
        assert!((c.mean - expect).abs() <= 0.05, "{} vs {expect}", c.mean);
        assert!(c.mean >= 1.0 / 3.0 - 0.05);
        assert!(c.mean <= c.bound + 3.0 * c.std_error);
    }

    #[test]
    fn csv_reads_what_it_writes() {
        let data = Dataset::random(3, 7, 1).unwrap();
        let back = Dataset::from_csv(&data.to_csv()).unwrap();
        assert_eq!(back, data);
        assert!(Dataset::from_csv("1,2\n3\n").is_err());
    }

    #[test]
    fn verdict_serializes() {
        let data = Dataset::random(3, 10, 1).unwrap();
        let v = check_orthogonal_invariance(&Algorithm::plain(InnerAlgorithm::MinNormLeastSquares), &data, 2, 0, 1e-8).unwrap();
        let j = serde_json::to_value(&v).unwrap();
        assert_eq!(j["algorithm"], "min_norm_least_squares");
        assert_eq!(j["pass"], true);
    }
}
