use nalgebra::{DMatrix, DVector};

use crate::numerics::gelu_scalar;

/// Hidden units per output coordinate.
pub const PAIR_UNITS: usize = 8;

/// Scale of the near-linear units; small enough that the quadratic part of
/// GELU dominates their symmetric combinations on the fit range.
const SMALL: f64 = 1e-3;

/// A one-hidden-layer GELU map `(x, y) -> sum_u w_u gelu(ax_u x + ay_u y) + b`
/// fitted by least squares.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFit {
    /// Input coefficients `(ax, ay)` of each unit.
    pub units: [(f64, f64); PAIR_UNITS],
    pub weights: [f64; PAIR_UNITS],
    pub bias: f64,
    /// Max absolute error over the fit grid.
    pub residual: f64,
}

impl PairFit {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.units.iter().zip(&self.weights).map(|(&(ax, ay), &w)| w * gelu_scalar(ax * x + ay * y)).sum::<f64>()
            + self.bias
    }
}

/// Fit `target` on the grid `xs × ys`. The units pair up so that
/// `gelu(z) - gelu(-z) = z` gives exact linear terms and
/// `gelu(sz) + gelu(-sz) ≈ c s² z²` gives products by polarization.
pub fn fit_pair_ffn(target: impl Fn(f64, f64) -> f64, xs: &[f64], ys: &[f64]) -> PairFit {
    let range = xs.iter().chain(ys).fold(0.0f64, |m, v| m.max(v.abs()));
    let s = SMALL / range.max(1.0);
    let units = [(s, s), (-s, -s), (s, -s), (-s, s), (1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];

    let points: Vec<(f64, f64)> = xs.iter().flat_map(|&x| ys.iter().map(move |&y| (x, y))).collect();
    let cols = PAIR_UNITS + 1;
    let mut a = DMatrix::from_fn(points.len(), cols, |r, c| {
        let (x, y) = points[r];
        match units.get(c) {
            Some(&(ax, ay)) => gelu_scalar(ax * x + ay * y),
            None => 1.0,
        }
    });
    let b = DVector::from_iterator(points.len(), points.iter().map(|&(x, y)| target(x, y)));
    // equilibrate columns before the SVD
    let norms: Vec<f64> = (0..cols).map(|c| a.column(c).norm().max(f64::MIN_POSITIVE)).collect();
    for (c, &nrm) in norms.iter().enumerate() {
        a.column_mut(c).scale_mut(1.0 / nrm);
    }
    let sol = a.svd(true, true).solve(&b, 1e-15).expect("SVD computed with both factors");

    let mut weights = [0.0; PAIR_UNITS];
    for (u, w) in weights.iter_mut().enumerate() {
        *w = sol[u] / norms[u];
    }
    let mut fit = PairFit { units, weights, bias: sol[PAIR_UNITS] / norms[PAIR_UNITS], residual: 0.0 };
    fit.residual = points.iter().map(|&(x, y)| (fit.eval(x, y) - target(x, y)).abs()).fold(0.0, f64::max);
    fit
}
