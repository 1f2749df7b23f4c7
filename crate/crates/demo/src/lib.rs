//! Browser bindings for the hardness lab.
//!
//! Each export wraps a plain function so the numerics can be tested natively.

use hardness_lab::error::Result;
use hardness_lab::objective::{landscape_grid, GridSpec, Problem};
use hardness_lab::oracle_sim::{
    trajectory_independence_check, FeedbackSpec, HonestGradient, MeanSource, OracleConfig, Trainer,
};
use hardness_lab::variance_lab::{variance_of_gradient, ProbeRule, VarianceScanConfig};
use serde::Serialize;
use std::f64::consts::LN_10;
use wasm_bindgen::prelude::*;

/// Closed-form `F` on an `n × n` grid over `[lo, hi]²`, row-major with `w1`
/// as the outer index.
pub fn landscape_values(wstar: [f64; 2], lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    let p = Problem::cosine_gaussian(wstar.to_vec())?;
    Ok(landscape_grid(&p, &GridSpec::square(lo, hi, n), 0, 0)?.values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub r: f64,
    pub log10_variance: f64,
    pub log10_bound: f64,
}

/// Gradient variance over targets of norm `2r` for `points` radii evenly
/// spaced in `(0, r_max]`.
pub fn variance_points(d: usize, r_max: f64, points: usize, seed: u64) -> Result<Vec<CurvePoint>> {
    let cfg = VarianceScanConfig {
        dims: vec![d],
        radii: (1..=points.max(1)).map(|k| r_max * k as f64 / points.max(1) as f64).collect(),
        probe: ProbeRule::RandomUnit { scale: 1.0 },
        n_wstar: 100,
        seed,
        ..Default::default()
    };
    Ok(variance_of_gradient(&cfg)?
        .cells
        .iter()
        .map(|c| CurvePoint {
            r: c.r,
            log10_variance: c.log10_variance(),
            log10_bound: c.bound.ln() / LN_10,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectorySet {
    pub identical_pairs: usize,
    pub pairs: usize,
    pub earliest_divergence: Option<usize>,
    pub epsilon: Option<f64>,
    /// `F` along each run, one series per target.
    pub objective: Vec<Vec<f64>>,
}

/// Gradient descent against `targets` random targets of norm `2r`, through
/// the oracle or with exact gradients.
pub fn trajectory_set(d: usize, r: f64, iters: usize, targets: usize, oracle: bool, seed: u64) -> Result<TrajectorySet> {
    let template = Problem::cosine_gaussian(vec![0.0; d])?;
    let trainer = Trainer { iters, seed, ..Default::default() };
    let oc = OracleConfig {
        mean: MeanSource::Quadrature,
        max_iters: iters,
        seed,
        ..Default::default()
    };
    let feedback = if oracle {
        FeedbackSpec::Oracle
    } else {
        FeedbackSpec::Honest { gradient: HonestGradient::ClosedForm }
    };
    let (report, records) = trajectory_independence_check(&template, 2.0 * r, targets, &trainer, &oc, feedback)?;
    Ok(TrajectorySet {
        identical_pairs: report.identical_pairs,
        pairs: report.pairs,
        earliest_divergence: report.earliest_divergence,
        epsilon: report.epsilon,
        objective: records
            .iter()
            .map(|rec| rec.objective.iter().map(|v| v.unwrap_or(f64::NAN)).collect())
            .collect(),
    })
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

fn json<T: Serialize>(v: &T) -> std::result::Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn landscape(w1: f64, w2: f64, lo: f64, hi: f64, n: usize) -> std::result::Result<Vec<f64>, JsError> {
    js(landscape_values([w1, w2], lo, hi, n))
}

#[wasm_bindgen]
pub fn variance_curve(d: usize, r_max: f64, points: usize, seed: u64) -> std::result::Result<String, JsError> {
    json(&js(variance_points(d, r_max, points, seed))?)
}

#[wasm_bindgen]
pub fn trajectories(
    d: usize,
    r: f64,
    iters: usize,
    targets: usize,
    oracle: bool,
    seed: u64,
) -> std::result::Result<String, JsError> {
    json(&js(trajectory_set(d, r, iters, targets, oracle, seed))?)
}
