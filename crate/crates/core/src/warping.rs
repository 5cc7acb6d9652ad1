//! Boundary-preserving warping functions of [0, 1].
//!
//! A warp is driven by a weight function `w` through `β' = C exp(∫₀^ω w)`,
//! which makes monotonicity structural. Weight functions are expanded in a
//! cubic B-spline basis.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grid_density::{
    cumulative_trapezoid_into, floored_sqrt, interp_linear, invert_monotone, trapezoid,
    trapezoid_product, Grid, GridDensity, Pchip,
};

const ENDPOINT_TOLERANCE: f64 = 1e-10;
const DERIV_MASS_TOLERANCE: f64 = 1e-8;

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_N_BASIS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    #[default]
    Bspline,
}

/// B-spline basis of a given order on an open-uniform knot vector over [0, 1].
///
/// `n_basis = K` gives `K + 1` functions, indexed `0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    n_basis: usize,
    order: usize,
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(n_basis: usize, order: usize) -> Result<Self> {
        if order < 1 {
            return Err(Error::Config("B-spline order must be at least 1".into()));
        }
        if n_basis + 1 < order {
            return Err(Error::Config(format!(
                "K = {n_basis} is too small for order {order}; need K >= {}",
                order - 1
            )));
        }
        let n_funcs = n_basis + 1;
        let n_interior = n_funcs - order;
        let mut knots = vec![0.0; order];
        knots.extend((1..=n_interior).map(|j| j as f64 / (n_interior + 1) as f64));
        knots.extend(std::iter::repeat(1.0).take(order));
        Ok(Self {
            n_basis,
            order,
            knots,
        })
    }

    pub fn n_funcs(&self) -> usize {
        self.n_basis + 1
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Values of all basis functions at `x`.
    pub fn eval_at(&self, x: f64) -> Vec<f64> {
        let n_funcs = self.n_funcs();
        let t = &self.knots;
        // span index with t[span] <= x < t[span + 1], closing the last span at 1
        let mut span = self.order - 1;
        while span + 1 < n_funcs && x >= t[span + 1] {
            span += 1;
        }
        let mut out = vec![0.0; n_funcs];
        // Cox-de Boor on the nonzero functions of the span
        let mut local = vec![0.0; self.order];
        local[0] = 1.0;
        for d in 1..self.order {
            let mut saved = 0.0;
            for r in 0..d {
                let left = t[span + r + 1];
                let right = t[span + r + 1 - d];
                let denom = left - right;
                let temp = if denom > 0.0 { local[r] / denom } else { 0.0 };
                local[r] = saved + (left - x) * temp;
                saved = (x - right) * temp;
            }
            local[d] = saved;
        }
        for (r, v) in local.into_iter().enumerate() {
            out[span + 1 - self.order + r] = v;
        }
        out
    }

    /// Basis matrix, one row per function, one column per grid node.
    pub fn design(&self, grid: &Grid) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![0.0; grid.n_points()]; self.n_funcs()];
        for (j, &x) in grid.points().iter().enumerate() {
            for (k, v) in self.eval_at(x).into_iter().enumerate() {
                rows[k][j] = v;
            }
        }
        rows
    }
}

/// Weight function `w = Σ α_k φ_k` in a B-spline basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisExpansion {
    pub basis_kind: BasisKind,
    pub n_basis: usize,
    pub order: usize,
    pub coefficients: Vec<f64>,
}

impl BasisExpansion {
    pub fn new(n_basis: usize, order: usize, coefficients: Vec<f64>) -> Result<Self> {
        BSplineBasis::new(n_basis, order)?;
        check_len(n_basis + 1, coefficients.len())?;
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("basis coefficients must be finite".into()));
        }
        Ok(Self {
            basis_kind: BasisKind::Bspline,
            n_basis,
            order,
            coefficients,
        })
    }

    pub fn zeros(n_basis: usize) -> Result<Self> {
        Self::new(n_basis, DEFAULT_ORDER, vec![0.0; n_basis + 1])
    }

    pub fn basis(&self) -> Result<BSplineBasis> {
        BSplineBasis::new(self.n_basis, self.order)
    }

    /// `Σ α_k φ_k` evaluated at the grid nodes.
    pub fn eval(&self, grid: &Grid) -> Result<Vec<f64>> {
        let design = self.basis()?.design(grid);
        Ok(combine(&design, &self.coefficients))
    }
}

pub(crate) fn combine(design: &[Vec<f64>], coefficients: &[f64]) -> Vec<f64> {
    let n = design.first().map_or(0, Vec::len);
    let mut out = vec![0.0; n];
    for (row, &c) in design.iter().zip(coefficients) {
        if c == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(row) {
            *o += c * v;
        }
    }
    out
}

/// Evaluate a basis expansion on a grid.
pub fn bspline_eval(e: &BasisExpansion, grid: &Grid) -> Result<Vec<f64>> {
    e.eval(grid)
}

/// A strictly increasing map of [0, 1] onto itself with its derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WarpRecord", into = "WarpRecord")]
pub struct WarpingFunction {
    grid: Grid,
    beta: Vec<f64>,
    deriv: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WarpRecord {
    grid: Grid,
    beta: Vec<f64>,
    beta_prime: Vec<f64>,
}

impl From<WarpingFunction> for WarpRecord {
    fn from(w: WarpingFunction) -> Self {
        Self {
            grid: w.grid,
            beta: w.beta,
            beta_prime: w.deriv,
        }
    }
}

impl TryFrom<WarpRecord> for WarpingFunction {
    type Error = Error;

    fn try_from(r: WarpRecord) -> Result<Self> {
        Self::new(r.grid, r.beta, r.beta_prime)
    }
}

impl WarpingFunction {
    pub fn new(grid: Grid, beta: Vec<f64>, deriv: Vec<f64>) -> Result<Self> {
        check_len(grid.n_points(), beta.len())?;
        check_len(grid.n_points(), deriv.len())?;
        let last = beta.len() - 1;
        if beta[0].abs() > ENDPOINT_TOLERANCE || (beta[last] - 1.0).abs() > ENDPOINT_TOLERANCE {
            return Err(Error::InvalidWarp(format!(
                "endpoints are {} and {}, expected 0 and 1",
                beta[0], beta[last]
            )));
        }
        if beta.iter().chain(&deriv).any(|v| !v.is_finite()) {
            return Err(Error::InvalidWarp("non-finite values".into()));
        }
        if let Some(j) = beta.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidWarp(format!(
                "not strictly increasing at node {j}"
            )));
        }
        if let Some(j) = deriv.iter().position(|&d| d <= 0.0) {
            return Err(Error::InvalidWarp(format!(
                "derivative not positive at node {j}"
            )));
        }
        let mass = trapezoid(&deriv);
        if (mass - 1.0).abs() > DERIV_MASS_TOLERANCE {
            return Err(Error::InvalidWarp(format!(
                "derivative integrates to {mass}, expected 1"
            )));
        }
        Ok(Self { grid, beta, deriv })
    }

    pub fn identity(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            beta: grid.points().to_vec(),
            deriv: vec![1.0; grid.n_points()],
        }
    }

    /// Build from strictly increasing node values; the derivative is taken by
    /// finite differences and rescaled to unit mass.
    pub fn from_monotone_values(grid: &Grid, mut beta: Vec<f64>) -> Result<Self> {
        check_len(grid.n_points(), beta.len())?;
        let last = beta.len() - 1;
        beta[0] = 0.0;
        beta[last] = 1.0;
        let h = grid.spacing();
        let mut deriv: Vec<f64> = (0..=last)
            .map(|j| {
                if j == 0 {
                    (beta[1] - beta[0]) / h
                } else if j == last {
                    (beta[last] - beta[last - 1]) / h
                } else {
                    (beta[j + 1] - beta[j - 1]) / (2.0 * h)
                }
            })
            .collect();
        rescale_unit_mass(&mut deriv);
        Self::new(grid.clone(), beta, deriv)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn beta_values(&self) -> &[f64] {
        &self.beta
    }

    pub fn deriv_values(&self) -> &[f64] {
        &self.deriv
    }

    pub fn is_identity(&self, tolerance: f64) -> bool {
        self.beta
            .iter()
            .zip(self.grid.points())
            .all(|(b, x)| (b - x).abs() <= tolerance)
    }
}

fn rescale_unit_mass(values: &mut [f64]) {
    let mass = trapezoid(values);
    for v in values.iter_mut() {
        *v /= mass;
    }
}

/// Solve `β'' = w β'` with `β(0) = 0`, `β(1) = 1` for a weight function on the grid.
pub fn weight_to_warp(w: &[f64], grid: &Grid) -> Result<WarpingFunction> {
    check_len(grid.n_points(), w.len())?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("weight function has non-finite values".into()));
    }
    let n = w.len();
    let mut cum_w = vec![0.0; n];
    cumulative_trapezoid_into(w, &mut cum_w);
    let max_w = cum_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut deriv: Vec<f64> = cum_w.iter().map(|v| (v - max_w).exp()).collect();
    rescale_unit_mass(&mut deriv);
    let mut beta = vec![0.0; n];
    cumulative_trapezoid_into(&deriv, &mut beta);
    // trapezoid of a unit-mass function ends at 1 up to rounding
    let end = beta[n - 1];
    for b in &mut beta {
        *b /= end;
    }
    beta[n - 1] = 1.0;
    if let Some(j) = beta.windows(2).position(|p| p[1] <= p[0]) {
        return Err(Error::Numerical(format!(
            "weight function too extreme: warp is flat at node {j}"
        )));
    }
    Ok(WarpingFunction {
        grid: grid.clone(),
        beta,
        deriv,
    })
}

/// Warp induced by a basis expansion.
pub fn expansion_to_warp(e: &BasisExpansion, grid: &Grid) -> Result<WarpingFunction> {
    weight_to_warp(&e.eval(grid)?, grid)
}

/// Heights of `(f ∘ β) β'` before renormalization.
pub(crate) fn act_raw(f: &Pchip, b: &WarpingFunction) -> Vec<f64> {
    b.beta
        .iter()
        .zip(&b.deriv)
        .map(|(&x, &d)| f.eval(x).max(0.0) * d)
        .collect()
}

/// The action `f ⊙ β = (f ∘ β) β'`, renormalized to unit mass.
pub fn act(f: &GridDensity, b: &WarpingFunction) -> Result<GridDensity> {
    f.grid().ensure_same(&b.grid)?;
    let mut values = act_raw(&Pchip::new(f.values()), b);
    let mass = trapezoid(&values);
    if mass <= 0.0 {
        return Err(Error::Degenerate("warped density has zero mass".into()));
    }
    for v in &mut values {
        *v /= mass;
    }
    Ok(GridDensity::from_normalized_unchecked(f.grid().clone(), values))
}

/// Inverse warp by monotone linear inversion onto the grid.
pub fn invert(b: &WarpingFunction) -> WarpingFunction {
    let grid = &b.grid;
    let points = grid.points();
    let mut beta = invert_monotone(&b.beta, points, points);
    let last = beta.len() - 1;
    beta[0] = 0.0;
    beta[last] = 1.0;
    let mut deriv: Vec<f64> = beta.iter().map(|&x| 1.0 / interp_linear(&b.deriv, x)).collect();
    rescale_unit_mass(&mut deriv);
    WarpingFunction {
        grid: grid.clone(),
        beta,
        deriv,
    }
}

/// Composition `β₁ ∘ β₂`.
pub fn compose(b1: &WarpingFunction, b2: &WarpingFunction) -> Result<WarpingFunction> {
    b1.grid.ensure_same(&b2.grid)?;
    let mut beta: Vec<f64> = b2.beta.iter().map(|&x| interp_linear(&b1.beta, x)).collect();
    let last = beta.len() - 1;
    beta[0] = 0.0;
    beta[last] = 1.0;
    let mut deriv: Vec<f64> = b2
        .beta
        .iter()
        .zip(&b2.deriv)
        .map(|(&x, &d)| interp_linear(&b1.deriv, x) * d)
        .collect();
    rescale_unit_mass(&mut deriv);
    Ok(WarpingFunction {
        grid: b1.grid.clone(),
        beta,
        deriv,
    })
}

/// Square-root slope function `ψ = sqrt(β')`.
pub fn srsf(b: &WarpingFunction) -> Vec<f64> {
    b.deriv.iter().map(|&d| floored_sqrt(d)).collect()
}

/// Arc-length distance between warps, `arccos ∫ ψ₁ ψ₂`.
pub fn warp_distance(b1: &WarpingFunction, b2: &WarpingFunction) -> Result<f64> {
    b1.grid.ensure_same(&b2.grid)?;
    let inner = trapezoid_product(&srsf(b1), &srsf(b2));
    Ok(inner.clamp(-1.0, 1.0).acos())
}
