//! Parametric predictor families `f(w, x)` with analytic parameter gradients.
//!
//! Parameter vectors are flat. Matrix blocks are stored column-major, so for
//! a network the layout is `W[:,0], W[:,1], …, b, v, c`.
//!
//! Kinks follow the usual autodiff convention: `d/dz [z]₊ = 0` at `z = 0` and
//! the clip has derivative `0` at both boundaries.

use crate::distributions::GaussianMixture;
use crate::error::{check_dim, invalid, Result};
use crate::numeric::Moments;
use crate::periodic::ReluNetwork1d;
use crate::rng::map_chunks;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn relu(z: f64) -> f64 {
    z.max(0.0)
}

#[inline]
fn clip01(z: f64) -> f64 {
    z.clamp(0.0, 1.0)
}

/// `x ↦ cos(2π⟨w, x⟩)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CosineFamily {
    pub dim: usize,
}

/// The family `W ↦ [Σᵢ [⟨wᵢ, x⟩]₊]_{[0,1]}` over `d × n` weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClippedReluFamily {
    pub dim: usize,
    pub width: usize,
}

/// The family `x ↦ vᵀ[Wᵀx + b]₊ + c` with `k` hidden units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReluNetFamily {
    pub dim: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorFamily {
    Cosine(CosineFamily),
    ClippedRelu(ClippedReluFamily),
    ReluNet(ReluNetFamily),
}

impl PredictorFamily {
    pub fn cosine(dim: usize) -> Self {
        Self::Cosine(CosineFamily { dim })
    }

    pub fn clipped_relu(dim: usize, width: usize) -> Self {
        Self::ClippedRelu(ClippedReluFamily { dim, width })
    }

    pub fn relu_net(dim: usize, width: usize) -> Self {
        Self::ReluNet(ReluNetFamily { dim, width })
    }

    pub fn validate(&self) -> Result<()> {
        let (dim, width) = match *self {
            Self::Cosine(f) => (f.dim, 1),
            Self::ClippedRelu(f) => (f.dim, f.width),
            Self::ReluNet(f) => (f.dim, f.width),
        };
        if dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        if width == 0 {
            return Err(invalid("width", "must be at least 1"));
        }
        Ok(())
    }

    /// Input dimension.
    pub fn dim(&self) -> usize {
        match *self {
            Self::Cosine(f) => f.dim,
            Self::ClippedRelu(f) => f.dim,
            Self::ReluNet(f) => f.dim,
        }
    }

    /// Length of the flat parameter vector.
    pub fn n_params(&self) -> usize {
        match *self {
            Self::Cosine(f) => f.dim,
            Self::ClippedRelu(f) => f.dim * f.width,
            Self::ReluNet(f) => f.dim * f.width + 2 * f.width + 1,
        }
    }

    fn check(&self, w: &[f64], x: &[f64]) -> Result<()> {
        check_dim(self.n_params(), w.len())?;
        check_dim(self.dim(), x.len())
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> Result<f64> {
        self.check(w, x)?;
        Ok(self.eval(w, x))
    }

    pub fn grad_w(&self, w: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check(w, x)?;
        let mut g = vec![0.0; w.len()];
        self.eval_grad(w, x, &mut g);
        Ok(g)
    }

    /// Unchecked evaluation for inner loops.
    #[inline]
    pub fn eval(&self, w: &[f64], x: &[f64]) -> f64 {
        match *self {
            Self::Cosine(_) => (2.0 * PI * dot(w, x)).cos(),
            Self::ClippedRelu(f) => {
                let d = f.dim;
                clip01(w.chunks_exact(d).map(|col| relu(dot(col, x))).sum())
            }
            Self::ReluNet(f) => {
                let (d, k) = (f.dim, f.width);
                let (wm, rest) = w.split_at(d * k);
                let (b, rest) = rest.split_at(k);
                let (v, c) = rest.split_at(k);
                let hidden: f64 = wm
                    .chunks_exact(d)
                    .zip(b)
                    .zip(v)
                    .map(|((col, bj), vj)| vj * relu(dot(col, x) + bj))
                    .sum();
                hidden + c[0]
            }
        }
    }

    /// Unchecked value and gradient; `grad` is overwritten.
    #[inline]
    pub fn eval_grad(&self, w: &[f64], x: &[f64], grad: &mut [f64]) -> f64 {
        match *self {
            Self::Cosine(_) => {
                let phase = 2.0 * PI * dot(w, x);
                let s = -2.0 * PI * phase.sin();
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g = s * xi;
                }
                phase.cos()
            }
            Self::ClippedRelu(f) => {
                let d = f.dim;
                let mut total = 0.0;
                for (col, gcol) in w.chunks_exact(d).zip(grad.chunks_exact_mut(d)) {
                    let z = dot(col, x);
                    total += relu(z);
                    let active = if z > 0.0 { 1.0 } else { 0.0 };
                    for (g, xi) in gcol.iter_mut().zip(x) {
                        *g = active * xi;
                    }
                }
                if !(total > 0.0 && total < 1.0) {
                    grad.iter_mut().for_each(|g| *g = 0.0);
                }
                clip01(total)
            }
            Self::ReluNet(f) => {
                let (d, k) = (f.dim, f.width);
                let (wm, rest) = w.split_at(d * k);
                let (b, rest) = rest.split_at(k);
                let (v, c) = rest.split_at(k);
                let (gw, grest) = grad.split_at_mut(d * k);
                let (gb, grest) = grest.split_at_mut(k);
                let (gv, gc) = grest.split_at_mut(k);
                let mut out = c[0];
                for j in 0..k {
                    let h = dot(&wm[j * d..(j + 1) * d], x) + b[j];
                    let a = relu(h);
                    out += v[j] * a;
                    let slope = if h > 0.0 { v[j] } else { 0.0 };
                    for (g, xi) in gw[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g = slope * xi;
                    }
                    gb[j] = slope;
                    gv[j] = a;
                }
                gc[0] = 1.0;
                out
            }
        }
    }

    /// Names of the parameter blocks reported by [`estimate_grad_norm_bound`],
    /// with their index ranges in the flat vector.
    pub fn blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        match *self {
            Self::Cosine(f) => vec![("w".into(), 0..f.dim)],
            Self::ClippedRelu(f) => (0..f.width)
                .map(|i| (format!("W[:,{i}]"), i * f.dim..(i + 1) * f.dim))
                .collect(),
            Self::ReluNet(f) => {
                let (d, k) = (f.dim, f.width);
                let mut out: Vec<_> = (0..k).map(|j| (format!("W[:,{j}]"), j * d..(j + 1) * d)).collect();
                out.push(("b".into(), d * k..d * k + k));
                out.push(("v".into(), d * k + k..d * k + 2 * k));
                out.push(("c".into(), d * k + 2 * k..d * k + 2 * k + 1));
                out
            }
        }
    }
}

/// A concrete clipped ReLU-sum network `x ↦ [Σᵢ [⟨wᵢ, x⟩]₊]_{[0,1]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixJson", into = "MatrixJson")]
pub struct ClippedReluSum {
    w: DMatrix<f64>,
}

impl ClippedReluSum {
    /// Columns of `w` are the unit weight vectors `wᵢ`.
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.ncols() == 0 || w.nrows() == 0 {
            return Err(invalid("W", "need at least one row and one column"));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(invalid("W", "entries must be finite"));
        }
        Ok(Self { w })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn family(&self) -> PredictorFamily {
        PredictorFamily::clipped_relu(self.w.nrows(), self.w.ncols())
    }

    /// Flat column-major parameter vector.
    pub fn params(&self) -> Vec<f64> {
        self.w.as_slice().to_vec()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.family().predict(self.w.as_slice(), x)
    }

    /// Smallest singular value of `W`.
    pub fn s_min(&self) -> f64 {
        crate::numeric::singular_values(&self.w).last().copied().unwrap_or(0.0)
    }
}

/// One-hidden-layer ReLU network `x ↦ vᵀ[Wᵀx + b]₊ + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetJson", into = "NetJson")]
pub struct OneHiddenReluNet {
    w: DMatrix<f64>,
    b: Vec<f64>,
    v: Vec<f64>,
    c: f64,
}

impl OneHiddenReluNet {
    pub fn new(w: DMatrix<f64>, b: Vec<f64>, v: Vec<f64>, c: f64) -> Result<Self> {
        let k = w.ncols();
        if k == 0 || w.nrows() == 0 {
            return Err(invalid("W", "need at least one input and one hidden unit"));
        }
        check_dim(k, b.len())?;
        check_dim(k, v.len())?;
        let finite = w.iter().chain(&b).chain(&v).chain(std::iter::once(&c)).all(|x| x.is_finite());
        if !finite {
            return Err(invalid("params", "entries must be finite"));
        }
        Ok(Self { w, b, v, c })
    }

    /// Rebuilds a network from a flat parameter vector of `family`.
    pub fn from_params(family: ReluNetFamily, params: &[f64]) -> Result<Self> {
        let (d, k) = (family.dim, family.width);
        check_dim(d * k + 2 * k + 1, params.len())?;
        let w = DMatrix::from_column_slice(d, k, &params[..d * k]);
        let b = params[d * k..d * k + k].to_vec();
        let v = params[d * k + k..d * k + 2 * k].to_vec();
        Self::new(w, b, v, params[d * k + 2 * k])
    }

    /// Realizes `x ↦ g(⟨w*, x⟩)` for a one-dimensional ReLU expansion `g`:
    /// every hidden unit shares the direction `w*`.
    pub fn from_ridge(g: &ReluNetwork1d, wstar: &[f64]) -> Result<Self> {
        if g.units.is_empty() {
            return Err(invalid("g", "needs at least one unit"));
        }
        let k = g.units.len();
        let w = DMatrix::from_fn(wstar.len(), k, |i, _| wstar[i]);
        let b = g.units.iter().map(|u| -u.knot).collect();
        let v = g.units.iter().map(|u| u.coef).collect();
        Self::new(w, b, v, g.bias)
    }

    pub fn family(&self) -> PredictorFamily {
        PredictorFamily::relu_net(self.w.nrows(), self.w.ncols())
    }

    /// Flat parameter vector: `W` column-major, then `b`, `v`, `c`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.w.as_slice().to_vec();
        p.extend(&self.b);
        p.extend(&self.v);
        p.push(self.c);
        p
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.family().predict(&self.params(), x)
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn hidden_bias(&self) -> &[f64] {
        &self.b
    }

    pub fn output_weights(&self) -> &[f64] {
        &self.v
    }

    pub fn output_bias(&self) -> f64 {
        self.c
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(invalid("data", format!("expected {} entries, got {}", rows * cols, data.len())));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

#[derive(Serialize, Deserialize)]
struct Shape2 {
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    shape: Shape2,
    w: Vec<f64>,
}

impl From<ClippedReluSum> for MatrixJson {
    fn from(n: ClippedReluSum) -> Self {
        Self {
            shape: Shape2 {
                rows: n.w.nrows(),
                cols: n.w.ncols(),
            },
            w: row_major(&n.w),
        }
    }
}

impl TryFrom<MatrixJson> for ClippedReluSum {
    type Error = crate::error::LabError;

    fn try_from(j: MatrixJson) -> Result<Self> {
        Self::new(from_row_major(j.shape.rows, j.shape.cols, &j.w)?)
    }
}

#[derive(Serialize, Deserialize)]
struct NetJson {
    shape: Shape2,
    w: Vec<f64>,
    b: Vec<f64>,
    v: Vec<f64>,
    c: f64,
}

impl From<OneHiddenReluNet> for NetJson {
    fn from(n: OneHiddenReluNet) -> Self {
        Self {
            shape: Shape2 {
                rows: n.w.nrows(),
                cols: n.w.ncols(),
            },
            w: row_major(&n.w),
            b: n.b,
            v: n.v,
            c: n.c,
        }
    }
}

impl TryFrom<NetJson> for OneHiddenReluNet {
    type Error = crate::error::LabError;

    fn try_from(j: NetJson) -> Result<Self> {
        Self::new(from_row_major(j.shape.rows, j.shape.cols, &j.w)?, j.b, j.v, j.c)
    }
}

/// Monte-Carlo estimate of `E‖∂f/∂w‖²` at a fixed parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNormBound {
    pub value: f64,
    pub std_error: f64,
    pub at: Vec<f64>,
    pub n_samples: usize,
    /// Per-block contributions to `value`, in parameter order.
    pub blocks: Vec<BlockNorm>,
    /// `4π² E‖x‖²`, an upper bound valid for the cosine family at every `w`.
    pub analytic_majorant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockNorm {
    pub name: String,
    pub value: f64,
    pub std_error: f64,
}

pub fn estimate_grad_norm_bound(
    family: &PredictorFamily,
    w: &[f64],
    mixture: &GaussianMixture,
    n: usize,
    seed: u64,
) -> Result<GradNormBound> {
    family.validate()?;
    if n < 100 {
        return Err(invalid("n", "need at least 100 samples"));
    }
    check_dim(family.n_params(), w.len())?;
    check_dim(family.dim(), mixture.dim())?;
    let blocks = family.blocks();
    let d = family.dim();
    let partials = map_chunks(n, |k, range| {
        let mut xs = Vec::new();
        mixture.fill_chunk(seed, k, range.len(), &mut xs);
        let mut g = vec![0.0; w.len()];
        let mut total = Moments::new();
        let mut per_block = vec![Moments::new(); blocks.len()];
        for x in xs.chunks_exact(d) {
            family.eval_grad(w, x, &mut g);
            let mut sum = 0.0;
            for ((_, r), m) in blocks.iter().zip(per_block.iter_mut()) {
                let s: f64 = g[r.clone()].iter().map(|v| v * v).sum();
                m.push(s);
                sum += s;
            }
            total.push(sum);
        }
        (total, per_block)
    });
    let mut total = Moments::new();
    let mut per_block = vec![Moments::new(); blocks.len()];
    for (t, pb) in &partials {
        total.merge(t);
        for (acc, m) in per_block.iter_mut().zip(pb) {
            acc.merge(m);
        }
    }
    let analytic_majorant = match family {
        PredictorFamily::Cosine(_) => Some(4.0 * PI * PI * mixture.second_moment_trace()),
        _ => None,
    };
    Ok(GradNormBound {
        value: total.mean(),
        std_error: total.std_error(),
        at: w.to_vec(),
        n_samples: n,
        blocks: blocks
            .into_iter()
            .zip(per_block)
            .map(|((name, _), m)| BlockNorm {
                name,
                value: m.mean(),
                std_error: m.std_error(),
            })
            .collect(),
        analytic_majorant,
    })
}
