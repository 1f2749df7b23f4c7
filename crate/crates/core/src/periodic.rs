//! Period-1 target shapes `ψ`, their Fourier series and ReLU realizations.

use crate::error::{invalid, LabError, Result};
use crate::numeric::integrate_pieces;
use nalgebra::Complex;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Default truncation order for coefficient tables.
pub const DEFAULT_Z_MAX: usize = 200;

/// JSON form of a target shape. Custom shapes use
/// `{"kind": "pl", "points": [[t0, v0], ...]}` with `t` ascending in `[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PeriodicSpec {
    Cosine,
    Triangle,
    Square,
    Pl { points: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Cosine,
    Triangle,
    Square,
    PiecewiseLinear(Vec<(f64, f64)>),
}

/// A real period-1 function with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicFn {
    shape: Shape,
}

impl PeriodicFn {
    /// `cos(2πt)`.
    pub fn cosine() -> Self {
        Self { shape: Shape::Cosine }
    }

    /// Triangle wave: `1` at integers, `-1` at half-integers, linear between.
    pub fn triangle() -> Self {
        Self { shape: Shape::Triangle }
    }

    /// `+1` on `[0, ½)`, `-1` on `[½, 1)`.
    pub fn square() -> Self {
        Self { shape: Shape::Square }
    }

    /// Continuous piecewise-linear function through `points`, closed
    /// periodically from the last point back to `(t0 + 1, v0)`.
    pub fn piecewise_linear(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("points", "need at least one breakpoint"));
        }
        for (i, &(t, v)) in points.iter().enumerate() {
            if !(0.0..1.0).contains(&t) {
                return Err(invalid("points", format!("t = {t} outside [0, 1)")));
            }
            if !(-1.0..=1.0).contains(&v) {
                return Err(invalid("points", format!("value {v} outside [-1, 1]")));
            }
            if i > 0 && t <= points[i - 1].0 {
                return Err(invalid("points", "breakpoints must be strictly ascending"));
            }
        }
        Ok(Self {
            shape: Shape::PiecewiseLinear(points),
        })
    }

    /// The constant function `c` (as a one-point piecewise-linear shape).
    pub fn constant(c: f64) -> Result<Self> {
        Self::piecewise_linear(vec![(0.0, c)])
    }

    pub fn from_spec(spec: &PeriodicSpec) -> Result<Self> {
        match spec {
            PeriodicSpec::Cosine => Ok(Self::cosine()),
            PeriodicSpec::Triangle => Ok(Self::triangle()),
            PeriodicSpec::Square => Ok(Self::square()),
            PeriodicSpec::Pl { points } => Self::piecewise_linear(points.iter().map(|p| (p[0], p[1])).collect()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_spec(&serde_json::from_str(text)?)
    }

    pub fn spec(&self) -> PeriodicSpec {
        match &self.shape {
            Shape::Cosine => PeriodicSpec::Cosine,
            Shape::Triangle => PeriodicSpec::Triangle,
            Shape::Square => PeriodicSpec::Square,
            Shape::PiecewiseLinear(p) => PeriodicSpec::Pl {
                points: p.iter().map(|&(t, v)| [t, v]).collect(),
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.shape {
            Shape::Cosine => "cosine",
            Shape::Triangle => "triangle",
            Shape::Square => "square",
            Shape::PiecewiseLinear(_) => "pl",
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let u = t - t.floor();
        match &self.shape {
            Shape::Cosine => (2.0 * PI * t).cos(),
            Shape::Triangle => {
                if u <= 0.5 {
                    1.0 - 4.0 * u
                } else {
                    4.0 * u - 3.0
                }
            }
            Shape::Square => {
                if u < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
            Shape::PiecewiseLinear(points) => {
                let (a, b) = pl_segment(points, u);
                let (ta, va) = a;
                let (tb, vb) = b;
                let uu = if u < ta { u + 1.0 } else { u };
                if tb == ta {
                    va
                } else {
                    va + (vb - va) * (uu - ta) / (tb - ta)
                }
            }
        }
    }

    /// Slope-change locations in one period `[0, 1)` for piecewise-linear
    /// shapes, with the slope just right of each.
    fn pl_knots(&self) -> Option<Vec<(f64, f64)>> {
        match &self.shape {
            Shape::Triangle => Some(vec![(0.0, -4.0), (0.5, 4.0)]),
            Shape::PiecewiseLinear(points) => {
                let n = points.len();
                let knots = (0..n)
                    .map(|i| {
                        let (ta, va) = points[i];
                        let (tb, vb) = if i + 1 < n {
                            points[i + 1]
                        } else {
                            (points[0].0 + 1.0, points[0].1)
                        };
                        (ta, (vb - va) / (tb - ta))
                    })
                    .collect();
                Some(knots)
            }
            _ => None,
        }
    }

    /// Discontinuity / kink locations on `[0, 1]` used to split quadrature.
    fn breakpoints(&self) -> Vec<f64> {
        let mut b = vec![0.0];
        match &self.shape {
            Shape::Cosine => {}
            Shape::Triangle | Shape::Square => b.push(0.5),
            Shape::PiecewiseLinear(points) => b.extend(points.iter().map(|p| p.0).filter(|t| *t > 0.0)),
        }
        b.push(1.0);
        b
    }

    /// `∫₀¹ ψ²`.
    pub fn mean_square(&self) -> f64 {
        match &self.shape {
            Shape::Cosine => 0.5,
            Shape::Triangle => 1.0 / 3.0,
            Shape::Square => 1.0,
            Shape::PiecewiseLinear(_) => {
                let b = self.breakpoints();
                b.windows(2)
                    .map(|w| {
                        let (va, vb) = (self.eval(w[0]), self.eval_left(w[1]));
                        (w[1] - w[0]) * (va * va + va * vb + vb * vb) / 3.0
                    })
                    .sum()
            }
        }
    }

    /// Total variation over one period.
    pub fn total_variation(&self) -> f64 {
        match &self.shape {
            Shape::Cosine | Shape::Triangle | Shape::Square => 4.0,
            Shape::PiecewiseLinear(points) => {
                let n = points.len();
                (0..n).map(|i| (points[(i + 1) % n].1 - points[i].1).abs()).sum()
            }
        }
    }

    fn eval_left(&self, t: f64) -> f64 {
        match self.shape {
            Shape::Square => {
                let u = t - t.floor();
                if u == 0.0 || u > 0.5 {
                    -1.0
                } else {
                    1.0
                }
            }
            _ => self.eval(t),
        }
    }

    /// Coefficient `a_z` in closed form, or `None` for custom shapes.
    fn closed_coefficient(&self, z: i64) -> Option<Complex<f64>> {
        let zero = Complex::new(0.0, 0.0);
        match self.shape {
            Shape::Cosine => Some(if z.abs() == 1 { Complex::new(0.5, 0.0) } else { zero }),
            Shape::Triangle => Some(if z % 2 != 0 {
                Complex::new(4.0 / (PI * PI * (z * z) as f64), 0.0)
            } else {
                zero
            }),
            Shape::Square => Some(if z % 2 != 0 {
                Complex::new(0.0, -2.0 / (PI * z as f64))
            } else {
                zero
            }),
            Shape::PiecewiseLinear(_) => None,
        }
    }

    /// `a_z = ∫₀¹ ψ(x) e^{-2πizx} dx` for `|z| ≤ z_max`: closed form for the
    /// built-ins, adaptive quadrature for custom shapes.
    pub fn fourier_coeffs(&self, z_max: usize) -> Result<FourierCoefficients> {
        if z_max == 0 {
            return Err(invalid("z_max", "truncation order must be at least 1"));
        }
        if self.closed_coefficient(0).is_some() {
            let z = z_max as i64;
            let values = (-z..=z).map(|k| self.closed_coefficient(k).unwrap()).collect();
            Ok(FourierCoefficients { z_max, values })
        } else {
            self.fourier_coeffs_quadrature(z_max)
        }
    }

    /// Quadrature route for any shape (absolute error ≲ 1e-10 per coefficient).
    pub fn fourier_coeffs_quadrature(&self, z_max: usize) -> Result<FourierCoefficients> {
        if z_max == 0 {
            return Err(invalid("z_max", "truncation order must be at least 1"));
        }
        let breaks = self.breakpoints();
        let mut values = vec![Complex::new(0.0, 0.0); 2 * z_max + 1];
        for z in 0..=z_max {
            let w = 2.0 * PI * z as f64;
            // Sub-pieces per breakpoint interval so each holds < ½ oscillation.
            let pieces = 2 * z + 1;
            let re = integrate_pieces(&|x: f64| self.eval_interior(x, &breaks) * (w * x).cos(), &breaks, 1e-13, pieces);
            let im = -integrate_pieces(&|x: f64| self.eval_interior(x, &breaks) * (w * x).sin(), &breaks, 1e-13, pieces);
            values[z_max + z] = Complex::new(re, im);
            values[z_max - z] = Complex::new(re, -im);
        }
        Ok(FourierCoefficients { z_max, values })
    }

    /// Quadrature nodes never sit exactly on a jump except at piece ends,
    /// where the one-sided limit is used.
    fn eval_interior(&self, x: f64, breaks: &[f64]) -> f64 {
        if matches!(self.shape, Shape::Square) && breaks.contains(&x) && x > 0.0 {
            self.eval_left(x)
        } else {
            self.eval(x)
        }
    }

    /// Exact ReLU realization `b₀ + Σ c_k [t − t_k]₊` of `ψ` on `[lo, hi]`.
    ///
    /// One unit sits at `lo` carrying the initial slope; every slope change
    /// in `(lo, hi]` adds a unit.
    pub fn as_relu_network(&self, lo: f64, hi: f64) -> Result<ReluNetwork1d> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid("interval", format!("[{lo}, {hi}] is empty or unbounded")));
        }
        let knots = self.pl_knots().ok_or_else(|| {
            LabError::Unsupported(format!("{} is not continuous piecewise linear", self.kind()))
        })?;
        let slope_right = |t: f64| -> f64 {
            let u = t - t.floor();
            let mut s = knots.last().unwrap().1;
            for &(k, sl) in &knots {
                if k <= u {
                    s = sl;
                }
            }
            s
        };
        let mut units = vec![ReluUnit {
            knot: lo,
            coef: slope_right(lo),
        }];
        let mut prev_slope = units[0].coef;
        let first_period = lo.floor() as i64;
        let last_period = hi.floor() as i64;
        for p in first_period..=last_period {
            for &(k, sl) in &knots {
                let t = p as f64 + k;
                if t > lo && t <= hi {
                    let delta = sl - prev_slope;
                    if delta != 0.0 {
                        units.push(ReluUnit { knot: t, coef: delta });
                    }
                    prev_slope = sl;
                }
            }
        }
        Ok(ReluNetwork1d {
            bias: self.eval(lo),
            units,
        })
    }
}

fn pl_segment(points: &[(f64, f64)], u: f64) -> ((f64, f64), (f64, f64)) {
    let n = points.len();
    if n == 1 {
        return (points[0], (points[0].0 + 1.0, points[0].1));
    }
    let idx = points.partition_point(|p| p.0 <= u);
    if idx == 0 {
        // Before the first breakpoint: wrapped segment from the last point.
        let (tl, vl) = points[n - 1];
        ((tl, vl), (points[0].0 + 1.0, points[0].1))
    } else if idx == n {
        (points[n - 1], (points[0].0 + 1.0, points[0].1))
    } else {
        (points[idx - 1], points[idx])
    }
}

/// Coefficient table `a_z`, `|z| ≤ z_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierCoefficients {
    z_max: usize,
    values: Vec<Complex<f64>>,
}

impl FourierCoefficients {
    pub fn z_max(&self) -> usize {
        self.z_max
    }

    pub fn get(&self, z: i64) -> Complex<f64> {
        if z.unsigned_abs() as usize > self.z_max {
            Complex::new(0.0, 0.0)
        } else {
            self.values[(z + self.z_max as i64) as usize]
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, Complex<f64>)> + '_ {
        let z = self.z_max as i64;
        (-z..=z).zip(self.values.iter().copied())
    }

    /// `Σ |a_z|²`.
    pub fn energy(&self) -> f64 {
        let mut s = crate::numeric::CompensatedSum::new();
        for v in &self.values {
            s.add(v.norm_sqr());
        }
        s.value()
    }

    /// Truncated series `Σ a_z e^{2πizt}` (complex; imaginary part ≈ 0).
    pub fn reconstruct(&self, t: f64) -> Complex<f64> {
        self.iter()
            .map(|(z, a)| a * Complex::new(0.0, 2.0 * PI * z as f64 * t).exp())
            .fold(Complex::new(0.0, 0.0), |acc, v| acc + v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReluUnit {
    pub knot: f64,
    pub coef: f64,
}

/// `t ↦ bias + Σ coef_k [t − knot_k]₊`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluNetwork1d {
    pub bias: f64,
    pub units: Vec<ReluUnit>,
}

impl ReluNetwork1d {
    pub fn eval(&self, t: f64) -> f64 {
        self.bias + self.units.iter().map(|u| u.coef * (t - u.knot).max(0.0)).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sawtooth_like() -> PeriodicFn {
        PeriodicFn::piecewise_linear(vec![(0.0, 0.0), (0.2, 1.0), (0.5, -0.2), (0.7, -1.0)]).unwrap()
    }

    #[test]
    fn eval_examples() {
        assert_eq!(PeriodicFn::cosine().eval(0.0), 1.0);
        assert!(PeriodicFn::cosine().eval(0.25).abs() < 1e-15);
        assert_eq!(PeriodicFn::triangle().eval(0.25), 0.0);
        assert_eq!(PeriodicFn::triangle().eval(0.5), -1.0);
        assert_eq!(PeriodicFn::square().eval(0.75), -1.0);
        let s = sawtooth_like();
        assert!((s.eval(0.1) - 0.5).abs() < 1e-15);
        assert!((s.eval(0.85) - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn periodic_and_bounded() {
        let mut rng = crate::rng::stream_rng(1, 0);
        for psi in [PeriodicFn::cosine(), PeriodicFn::triangle(), PeriodicFn::square(), sawtooth_like()] {
            for _ in 0..1000 {
                let t: f64 = rng.random_range(-50.0..50.0);
                assert!((psi.eval(t + 1.0) - psi.eval(t)).abs() <= 1e-12, "{} at {t}", psi.kind());
                assert!(psi.eval(t).abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn cosine_coefficients() {
        let c = PeriodicFn::cosine().fourier_coeffs(5).unwrap();
        assert_eq!(c.get(1), Complex::new(0.5, 0.0));
        assert_eq!(c.get(-1), Complex::new(0.5, 0.0));
        for z in [0, 2, -3, 5] {
            assert_eq!(c.get(z).norm(), 0.0);
        }
    }

    #[test]
    fn square_quadrature_matches_textbook_series() {
        let sq = PeriodicFn::square();
        let q = sq.fourier_coeffs_quadrature(25).unwrap();
        for z in -25i64..=25 {
            let a = q.get(z);
            if z % 2 == 0 {
                assert!(a.norm() < 1e-8, "z={z}: {a}");
            } else {
                assert!((a.norm() - 2.0 / (PI * z.abs() as f64)).abs() < 1e-8, "z={z}: {a}");
            }
            assert!((a - sq.fourier_coeffs(25).unwrap().get(z)).norm() < 1e-8);
        }
    }

    #[test]
    fn triangle_quadrature_matches_closed_form() {
        let tri = PeriodicFn::triangle();
        let q = tri.fourier_coeffs_quadrature(40).unwrap();
        let c = tri.fourier_coeffs(40).unwrap();
        for z in -40i64..=40 {
            assert!((q.get(z) - c.get(z)).norm() < 1e-10, "z={z}");
        }
    }

    #[test]
    fn custom_coefficients_are_conjugate_symmetric() {
        let c = sawtooth_like().fourier_coeffs(30).unwrap();
        for z in 1..=30 {
            assert!((c.get(z) - c.get(-z).conj()).norm() < 1e-14);
        }
    }

    #[test]
    fn reconstruction_error_scales_with_variation() {
        // Continuous shapes: max error ≤ TV / (2 Z) at random points.
        let mut rng = crate::rng::stream_rng(2, 0);
        let z_max = 200;
        for psi in [PeriodicFn::triangle(), sawtooth_like(), PeriodicFn::cosine()] {
            let c = psi.fourier_coeffs(z_max).unwrap();
            let bound = psi.total_variation() / (2.0 * z_max as f64);
            for _ in 0..100 {
                let t: f64 = rng.random();
                let r = c.reconstruct(t);
                assert!((r.re - psi.eval(t)).abs() <= bound, "{} at {t}", psi.kind());
                assert!(r.im.abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn parseval_for_continuous_builtins() {
        for psi in [PeriodicFn::cosine(), PeriodicFn::triangle()] {
            let c = psi.fourier_coeffs(DEFAULT_Z_MAX).unwrap();
            assert!((c.energy() - psi.mean_square()).abs() <= 1e-6, "{}", psi.kind());
            assert!(c.energy() <= 1.0);
        }
        let c = sawtooth_like().fourier_coeffs(DEFAULT_Z_MAX).unwrap();
        assert!((c.energy() - sawtooth_like().mean_square()).abs() <= 1e-6);
    }

    #[test]
    fn square_truncation_error_is_the_analytic_tail() {
        // Σ_{|z|>Z} |a_z|² = (8/π²) Σ_{odd k > Z} 1/k²
        let sq = PeriodicFn::square();
        for z_max in [200usize, 4096] {
            let c = sq.fourier_coeffs(z_max).unwrap();
            let mut tail = 0.0;
            let mut k = if z_max % 2 == 0 { z_max + 1 } else { z_max + 2 };
            while k < 50_000_000 {
                tail += 8.0 / (PI * PI * (k * k) as f64);
                k += 2;
            }
            tail += 8.0 / (PI * PI) / (2.0 * k as f64);
            assert!((1.0 - c.energy() - tail).abs() < 1e-10, "Z={z_max}");
        }
        // The L² reconstruction error of the square wave is exactly that tail;
        // it reaches 1e-4 at Z = 4096 but is ≈ 2.0e-3 at Z = 200.
        let c = sq.fourier_coeffs(4096).unwrap();
        assert!(1.0 - c.energy() <= 1e-4);
        let c = sq.fourier_coeffs(1 << 20).unwrap();
        assert!((1.0 - c.energy()).abs() <= 1e-6);
    }

    #[test]
    fn relu_realizations_are_exact() {
        let grid = |lo: f64, hi: f64| (0..1000).map(move |i| lo + (hi - lo) * i as f64 / 999.0);
        let tri = PeriodicFn::triangle();
        let net = tri.as_relu_network(0.0, 1.0).unwrap();
        assert_eq!(net.units.len(), 3);
        assert!(grid(0.0, 1.0).all(|t| (net.eval(t) - tri.eval(t)).abs() <= 1e-12));

        let net = tri.as_relu_network(-2.0, 2.0).unwrap();
        // 1 + slope changes in (−2, 2]
        let changes = (-3..=4).filter(|k| (*k as f64) * 0.5 > -2.0 && (*k as f64) * 0.5 <= 2.0).count();
        assert_eq!(net.units.len(), 1 + changes);
        assert!(net.units.len() <= 9);
        assert!(grid(-2.0, 2.0).all(|t| (net.eval(t) - tri.eval(t)).abs() <= 1e-12));

        let saw = sawtooth_like();
        let net = saw.as_relu_network(0.0, 1.0).unwrap();
        assert!(grid(0.0, 1.0).all(|t| (net.eval(t) - saw.eval(t)).abs() <= 1e-12));
        let net = saw.as_relu_network(-1.3, 2.1).unwrap();
        assert!(grid(-1.3, 2.1).all(|t| (net.eval(t) - saw.eval(t)).abs() <= 1e-12));
    }

    #[test]
    fn non_piecewise_linear_shapes_rejected() {
        assert!(matches!(PeriodicFn::cosine().as_relu_network(0.0, 1.0), Err(LabError::Unsupported(_))));
        assert!(matches!(PeriodicFn::square().as_relu_network(0.0, 1.0), Err(LabError::Unsupported(_))));
        assert!(PeriodicFn::triangle().as_relu_network(1.0, 1.0).is_err());
    }

    #[test]
    fn json_breakpoints() {
        let psi = PeriodicFn::from_json(r#"{"kind":"pl","points":[[0,0],[0.25,1],[0.75,-1]]}"#).unwrap();
        assert!((psi.eval(0.5) - 0.0).abs() < 1e-15);
        assert_eq!(PeriodicFn::from_spec(&psi.spec()).unwrap(), psi);
        assert!(PeriodicFn::from_json(r#"{"kind":"pl","points":[[0.5,0],[0.25,1]]}"#).is_err());
        assert!(PeriodicFn::from_json(r#"{"kind":"pl","points":[[1.0,0]]}"#).is_err());
        assert_eq!(PeriodicFn::from_json(r#"{"kind":"cosine"}"#).unwrap(), PeriodicFn::cosine());
    }

    #[test]
    fn constant_shape() {
        let c = PeriodicFn::constant(0.3).unwrap();
        assert_eq!(c.eval(0.77), 0.3);
        let coeffs = c.fourier_coeffs(5).unwrap();
        assert!((coeffs.get(0).re - 0.3).abs() < 1e-12);
        assert!(coeffs.get(2).norm() < 1e-12);
    }
}
