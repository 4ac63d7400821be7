//! Sparse identification of polynomial vector fields.
//!
//! Derivatives are estimated from a regularly sampled trajectory with a
//! finite-difference stencil, a polynomial library `φ(x)` is evaluated at
//! the same samples, and `dx/dt ≈ Ξ φ(x)` is fitted by sequential
//! thresholded least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::integrators::Trajectory;

pub const DEFAULT_DEGREE: u32 = 3;
pub const DEFAULT_THRESHOLD: f64 = 0.05;
pub const DEFAULT_RIDGE: f64 = 1e-10;

/// Relative tolerance for accepting a trajectory as regularly spaced.
const REGULAR_RTOL: f64 = 1e-9;

/// Monomials of total degree at most `degree` in `state_dim` variables,
/// constant first, then graded lexicographic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolyBasis {
    state_dim: usize,
    degree: u32,
    terms: Vec<Vec<u32>>,
}

fn exponents_of_degree(dim: usize, total: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() + 1 == dim {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first);
        exponents_of_degree(dim, total - first, prefix, out);
        prefix.pop();
    }
}

impl PolyBasis {
    pub fn new(state_dim: usize, degree: u32) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::invalid("state dimension must be at least 1"));
        }
        let mut terms = Vec::new();
        for d in 0..=degree {
            exponents_of_degree(state_dim, d, &mut Vec::new(), &mut terms);
        }
        Ok(Self {
            state_dim,
            degree,
            terms,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn terms(&self) -> &[Vec<u32>] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Human-readable monomial, e.g. `x0^2*x1`.
    pub fn term_name(&self, j: usize) -> String {
        let parts: Vec<String> = self.terms[j]
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(i, &e)| {
                if e == 1 {
                    format!("x{i}")
                } else {
                    format!("x{i}^{e}")
                }
            })
            .collect();
        if parts.is_empty() {
            "1".into()
        } else {
            parts.join("*")
        }
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, term) in out.iter_mut().zip(&self.terms) {
            *o = term
                .iter()
                .zip(x)
                .map(|(&e, &xi)| xi.powi(e as i32))
                .product();
        }
    }
}

/// `φ(x)` in the basis term order.
pub fn features(basis: &PolyBasis, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != basis.state_dim {
        return Err(Error::DimensionMismatch {
            expected: basis.state_dim,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; basis.len()];
    basis.eval_into(x, &mut out);
    Ok(out)
}

/// Finite-difference stencil used to estimate `dx/dt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FdOrder {
    #[serde(rename = "FD-1")]
    One,
    #[serde(rename = "FD-2")]
    Two,
    #[serde(rename = "FD-4")]
    Four,
}

impl FdOrder {
    pub fn from_order(order: u32) -> Option<Self> {
        match order {
            1 => Some(FdOrder::One),
            2 => Some(FdOrder::Two),
            4 => Some(FdOrder::Four),
            _ => None,
        }
    }

    pub fn order(self) -> u32 {
        match self {
            FdOrder::One => 1,
            FdOrder::Two => 2,
            FdOrder::Four => 4,
        }
    }

    fn min_points(self) -> usize {
        match self {
            FdOrder::One => 2,
            FdOrder::Two => 3,
            FdOrder::Four => 5,
        }
    }
}

impl std::fmt::Display for FdOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FD-{}", self.order())
    }
}

/// Derivative estimates at the samples where the full stencil fits.
///
/// FD-1 is the forward difference at `n = 0..N−1`; FD-2 and FD-4 are
/// central differences, so one and two samples at each end are dropped.
pub fn fd_derivatives(traj: &Trajectory, order: FdOrder) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let n = traj.len();
    if n < order.min_points() {
        return Err(Error::DegenerateTrajectory(format!(
            "{order} needs at least {} samples, got {n}",
            order.min_points()
        )));
    }
    let dt = traj
        .regular_spacing(REGULAR_RTOL)
        .ok_or_else(|| Error::Data("finite differences need regular spacing".into()))?;
    let x = &traj.states;
    let dim = traj.dim();
    let combine = |terms: &[(usize, f64)]| -> Vec<f64> {
        (0..dim)
            .map(|i| terms.iter().map(|&(k, c)| c * x[k][i]).sum::<f64>() / dt)
            .collect()
    };
    let indices: Vec<usize> = match order {
        FdOrder::One => (0..n - 1).collect(),
        FdOrder::Two => (1..n - 1).collect(),
        FdOrder::Four => (2..n - 2).collect(),
    };
    let derivs = indices
        .iter()
        .map(|&k| match order {
            FdOrder::One => combine(&[(k + 1, 1.0), (k, -1.0)]),
            FdOrder::Two => combine(&[(k + 1, 0.5), (k - 1, -0.5)]),
            FdOrder::Four => combine(&[
                (k + 2, -1.0 / 12.0),
                (k + 1, 2.0 / 3.0),
                (k - 1, -2.0 / 3.0),
                (k - 2, 1.0 / 12.0),
            ]),
        })
        .collect();
    Ok((indices, derivs))
}

fn solve_active(
    theta: &DMatrix<f64>,
    y: &DVector<f64>,
    active: &[usize],
    ridge: f64,
) -> Result<Vec<f64>> {
    let a = theta.select_columns(active);
    let mut normal = a.transpose() * &a;
    for i in 0..active.len() {
        normal[(i, i)] += ridge;
    }
    let rhs = a.transpose() * y;
    if ridge == 0.0 {
        // Cholesky happily factors some singular matrices, so check rank first.
        let svd = normal.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let tol = smax * active.len() as f64 * f64::EPSILON;
        if svd.singular_values.iter().any(|&s| s <= tol) {
            return Err(Error::Numerical(
                "rank-deficient active set; use a positive ridge".into(),
            ));
        }
    }
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Numerical("normal equations are not positive definite".into()))?;
    let sol = chol.solve(&rhs);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "least-squares solution is not finite".into(),
        ));
    }
    Ok(sol.iter().copied().collect())
}

/// Sequential thresholded least squares for one output column.
///
/// Returns the coefficients and the active sets visited, the first being all
/// columns.
pub fn stlsq_column(
    theta: &DMatrix<f64>,
    y: &DVector<f64>,
    threshold: f64,
    ridge: f64,
) -> Result<(Vec<f64>, Vec<Vec<usize>>)> {
    let n_terms = theta.ncols();
    let mut active: Vec<usize> = (0..n_terms).collect();
    let mut history = vec![active.clone()];
    let mut coef = vec![0.0; n_terms];
    for _ in 0..=n_terms {
        coef.iter_mut().for_each(|c| *c = 0.0);
        if active.is_empty() {
            break;
        }
        let sol = solve_active(theta, y, &active, ridge)?;
        for (&j, &v) in active.iter().zip(&sol) {
            coef[j] = v;
        }
        let kept: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&j| coef[j].abs() >= threshold)
            .collect();
        if kept.len() == active.len() {
            break;
        }
        active = kept;
        history.push(active.clone());
    }
    if active.is_empty() {
        coef.iter_mut().for_each(|c| *c = 0.0);
    }
    Ok((coef, history))
}

/// `Ξ` with one row per output dimension, fitted column by column.
pub fn stlsq(
    theta: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    threshold: f64,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    if theta.nrows() != targets.nrows() {
        return Err(Error::DimensionMismatch {
            expected: theta.nrows(),
            got: targets.nrows(),
        });
    }
    if !(threshold >= 0.0) || !(ridge >= 0.0) {
        return Err(Error::invalid("threshold and ridge must be non-negative"));
    }
    let mut xi = DMatrix::zeros(targets.ncols(), theta.ncols());
    for i in 0..targets.ncols() {
        let y = targets.column(i).into_owned();
        let (coef, _) = stlsq_column(theta, &y, threshold, ridge)?;
        for (j, c) in coef.into_iter().enumerate() {
            xi[(i, j)] = c;
        }
    }
    Ok(xi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SindyConfig {
    pub degree: u32,
    pub fd_order: FdOrder,
    pub threshold: f64,
    pub ridge: f64,
}

impl Default for SindyConfig {
    fn default() -> Self {
        Self {
            degree: DEFAULT_DEGREE,
            fd_order: FdOrder::Four,
            threshold: DEFAULT_THRESHOLD,
            ridge: DEFAULT_RIDGE,
        }
    }
}

/// `dx/dt = Ξ φ(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SindyJson", into = "SindyJson")]
pub struct SindyModel {
    pub basis: PolyBasis,
    /// Row-major, `state_dim × basis.len()`.
    pub xi: Vec<f64>,
    pub threshold_used: f64,
}

#[derive(Serialize, Deserialize)]
struct SindyJson {
    state_dim: usize,
    degree: u32,
    terms: Vec<Vec<u32>>,
    xi: Vec<f64>,
    threshold: f64,
}

impl From<SindyModel> for SindyJson {
    fn from(m: SindyModel) -> Self {
        Self {
            state_dim: m.basis.state_dim,
            degree: m.basis.degree,
            terms: m.basis.terms,
            xi: m.xi,
            threshold: m.threshold_used,
        }
    }
}

impl TryFrom<SindyJson> for SindyModel {
    type Error = Error;

    fn try_from(j: SindyJson) -> Result<Self> {
        let basis = PolyBasis::new(j.state_dim, j.degree)?;
        if basis.terms != j.terms {
            return Err(Error::Data(
                "term list does not match the basis ordering".into(),
            ));
        }
        if j.xi.len() != j.state_dim * basis.len() {
            return Err(Error::Data(format!(
                "xi has {} entries, expected {}",
                j.xi.len(),
                j.state_dim * basis.len()
            )));
        }
        if j.xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("xi contains non-finite coefficients".into()));
        }
        Ok(Self {
            basis,
            xi: j.xi,
            threshold_used: j.threshold,
        })
    }
}

impl SindyModel {
    pub fn coefficient(&self, row: usize, term: usize) -> f64 {
        self.xi[row * self.basis.len() + term]
    }

    /// Output dimensions whose coefficients were all thresholded away.
    pub fn zero_rows(&self) -> Vec<usize> {
        self.xi
            .chunks_exact(self.basis.len())
            .enumerate()
            .filter(|(_, row)| row.iter().all(|&c| c == 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    /// Equations in the form `dx0/dt = 1.0*x1 - 0.5*x0^2`.
    pub fn equations(&self) -> Vec<String> {
        self.xi
            .chunks_exact(self.basis.len())
            .enumerate()
            .map(|(i, row)| {
                let rhs: Vec<String> = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c != 0.0)
                    .map(|(j, c)| format!("{c}*{}", self.basis.term_name(j)))
                    .collect();
                let rhs = if rhs.is_empty() {
                    "0".to_string()
                } else {
                    rhs.join(" + ")
                };
                format!("dx{i}/dt = {rhs}")
            })
            .collect()
    }
}

impl VectorField for SindyModel {
    fn dim(&self) -> usize {
        self.basis.state_dim
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let mut phi = vec![0.0; self.basis.len()];
        self.basis.eval_into(x, &mut phi);
        for (o, row) in out.iter_mut().zip(self.xi.chunks_exact(self.basis.len())) {
            *o = row.iter().zip(&phi).map(|(a, b)| a * b).sum();
        }
    }
}

/// The model as a vector field for the convergence test.
pub fn model_field(model: &SindyModel) -> &dyn VectorField {
    model
}

/// Fits one model to the pooled stencil samples of several trajectories.
pub fn fit_many(trajs: &[Trajectory], config: &SindyConfig) -> Result<SindyModel> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::invalid("no trajectories to fit"))?;
    let dim = first.dim();
    let basis = PolyBasis::new(dim, config.degree)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut derivs: Vec<Vec<f64>> = Vec::new();
    for traj in trajs {
        if traj.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: traj.dim(),
            });
        }
        let (idx, d) = fd_derivatives(traj, config.fd_order)?;
        for (&k, dk) in idx.iter().zip(d) {
            rows.push(features(&basis, &traj.states[k])?);
            derivs.push(dk);
        }
    }
    let theta = DMatrix::from_fn(rows.len(), basis.len(), |r, c| rows[r][c]);
    let targets = DMatrix::from_fn(derivs.len(), dim, |r, c| derivs[r][c]);
    let xi = stlsq(&theta, &targets, config.threshold, config.ridge)?;
    let flat: Vec<f64> = (0..dim)
        .flat_map(|i| (0..basis.len()).map(move |j| (i, j)))
        .map(|(i, j)| xi[(i, j)])
        .collect();
    Ok(SindyModel {
        basis,
        xi: flat,
        threshold_used: config.threshold,
    })
}

pub fn fit(
    traj: &Trajectory,
    basis_degree: u32,
    fd_order: FdOrder,
    threshold: f64,
) -> Result<SindyModel> {
    fit_many(
        std::slice::from_ref(traj),
        &SindyConfig {
            degree: basis_degree,
            fd_order,
            threshold,
            ridge: DEFAULT_RIDGE,
        },
    )
}
