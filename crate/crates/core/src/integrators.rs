//! Explicit one-step Runge-Kutta schemes and fixed-step rollouts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;

/// Relative tolerance for deciding that a gap is an integer multiple of a step.
pub const DIVISIBILITY_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    Euler,
    Midpoint,
    #[serde(rename = "RK4", alias = "Rk4", alias = "rk4")]
    Rk4,
}

/// Butcher tableau of an explicit scheme: `a` is strictly lower triangular,
/// stored row by row (`a[i]` has `i` entries).
#[derive(Debug, Clone, Copy)]
pub struct Tableau {
    pub a: &'static [&'static [f64]],
    pub b: &'static [f64],
}

const EULER: Tableau = Tableau {
    a: &[&[]],
    b: &[1.0],
};

const MIDPOINT: Tableau = Tableau {
    a: &[&[], &[0.5]],
    b: &[0.0, 1.0],
};

const RK4: Tableau = Tableau {
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
};

impl SchemeKind {
    pub const ALL: [SchemeKind; 3] = [SchemeKind::Euler, SchemeKind::Midpoint, SchemeKind::Rk4];

    /// Order of accuracy `p`.
    pub fn order(self) -> u32 {
        match self {
            SchemeKind::Euler => 1,
            SchemeKind::Midpoint => 2,
            SchemeKind::Rk4 => 4,
        }
    }

    pub fn from_order(order: u32) -> Option<Self> {
        match order {
            1 => Some(SchemeKind::Euler),
            2 => Some(SchemeKind::Midpoint),
            4 => Some(SchemeKind::Rk4),
            _ => None,
        }
    }

    pub fn stages(self) -> usize {
        self.tableau().b.len()
    }

    pub fn tableau(self) -> Tableau {
        match self {
            SchemeKind::Euler => EULER,
            SchemeKind::Midpoint => MIDPOINT,
            SchemeKind::Rk4 => RK4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Euler => "Euler",
            SchemeKind::Midpoint => "Midpoint",
            SchemeKind::Rk4 => "RK4",
        }
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" | "1" => Ok(SchemeKind::Euler),
            "midpoint" | "rk2" | "2" => Ok(SchemeKind::Midpoint),
            "rk4" | "4" => Ok(SchemeKind::Rk4),
            other => Err(Error::invalid(format!("unknown scheme `{other}`"))),
        }
    }
}

/// Time-ordered samples of a state. `gaps[k]` is the recorded spacing
/// between sample `k` and `k + 1`; for jittered data it is the value the
/// generator used rather than a difference of rounded times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub gaps: Vec<f64>,
}

impl Trajectory {
    /// Builds a trajectory whose gaps are the differences of `times`.
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        let gaps = times.windows(2).map(|w| w[1] - w[0]).collect();
        Self::with_gaps(times, states, gaps)
    }

    pub fn with_gaps(times: Vec<f64>, states: Vec<Vec<f64>>, gaps: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::DegenerateTrajectory("no samples".into()));
        }
        if times.len() != states.len() {
            return Err(Error::Data(format!(
                "{} times but {} states",
                times.len(),
                states.len()
            )));
        }
        if gaps.len() + 1 != times.len() {
            return Err(Error::Data(format!(
                "{} gaps for {} samples",
                gaps.len(),
                times.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) || gaps.iter().any(|g| *g <= 0.0) {
            return Err(Error::Data("times must be strictly increasing".into()));
        }
        let dim = states[0].len();
        if dim == 0 {
            return Err(Error::Data("empty state vector".into()));
        }
        for s in &states {
            if s.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.len(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("non-finite state".into()));
            }
        }
        Ok(Self {
            times,
            states,
            gaps,
        })
    }

    /// Evenly spaced samples starting at `t0`.
    pub fn regular(t0: f64, dt: f64, states: Vec<Vec<f64>>) -> Result<Self> {
        let n = states.len();
        let times = (0..n).map(|k| t0 + k as f64 * dt).collect();
        Self::with_gaps(times, states, vec![dt; n.saturating_sub(1)])
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// The common spacing, if every gap agrees with the first one to `rtol`.
    pub fn regular_spacing(&self, rtol: f64) -> Option<f64> {
        let first = *self.gaps.first()?;
        self.gaps
            .iter()
            .all(|g| (g - first).abs() <= rtol * first)
            .then_some(first)
    }

    /// (mean, min, max) of the gaps.
    pub fn gap_stats(&self) -> Option<(f64, f64, f64)> {
        gap_stats(self.gaps.iter().copied())
    }
}

pub(crate) fn gap_stats(gaps: impl Iterator<Item = f64>) -> Option<(f64, f64, f64)> {
    let (mut n, mut sum, mut lo, mut hi) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
    for g in gaps {
        n += 1;
        sum += g;
        lo = lo.min(g);
        hi = hi.max(g);
    }
    (n > 0).then(|| (sum / n as f64, lo, hi))
}

/// Reusable stage buffers for repeated stepping.
struct StageBuf {
    k: Vec<Vec<f64>>,
    z: Vec<f64>,
}

impl StageBuf {
    fn new(scheme: SchemeKind, dim: usize) -> Self {
        Self {
            k: vec![vec![0.0; dim]; scheme.stages()],
            z: vec![0.0; dim],
        }
    }
}

fn step_with(
    scheme: SchemeKind,
    field: &(impl VectorField + ?Sized),
    x: &[f64],
    h: f64,
    buf: &mut StageBuf,
    out: &mut [f64],
) -> std::result::Result<(), usize> {
    let tab = scheme.tableau();
    for (i, row) in tab.a.iter().enumerate() {
        buf.z.copy_from_slice(x);
        for (j, &a) in row.iter().enumerate() {
            if a != 0.0 {
                for (z, k) in buf.z.iter_mut().zip(&buf.k[j]) {
                    *z += h * a * k;
                }
            }
        }
        let (z, k) = (&buf.z, &mut buf.k[i]);
        field.eval_into(z, k);
        if k.iter().any(|v| !v.is_finite()) {
            return Err(i);
        }
    }
    out.copy_from_slice(x);
    for (k, &b) in buf.k.iter().zip(tab.b) {
        if b != 0.0 {
            for (o, kv) in out.iter_mut().zip(k) {
                *o += h * b * kv;
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(tab.b.len());
    }
    Ok(())
}

fn check_dim(field: &(impl VectorField + ?Sized), x: &[f64]) -> Result<()> {
    if field.dim() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: x.len(),
        });
    }
    Ok(())
}

fn check_h(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!(
            "step size must be positive, got {h}"
        )));
    }
    Ok(())
}

/// One step of `scheme` from `x` with step `h`.
///
/// A non-finite stage value is reported as [`Error::Divergence`] with
/// `step = 0` and the zero-based stage index; a non-finite combination of
/// finite stages reports `stage = stages()`.
pub fn step(
    scheme: SchemeKind,
    field: &(impl VectorField + ?Sized),
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    check_dim(field, x)?;
    check_h(h)?;
    let mut buf = StageBuf::new(scheme, x.len());
    let mut out = vec![0.0; x.len()];
    step_with(scheme, field, x, h, &mut buf, &mut out)
        .map_err(|stage| Error::Divergence { step: 0, stage })?;
    Ok(out)
}

/// Repeated stepping with constant `h`. Times are `k * h`.
pub fn rollout(
    scheme: SchemeKind,
    field: &(impl VectorField + ?Sized),
    x0: &[f64],
    h: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    check_dim(field, x0)?;
    check_h(h)?;
    let mut buf = StageBuf::new(scheme, x0.len());
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.to_vec());
    let mut next = vec![0.0; x0.len()];
    for n in 0..n_steps {
        step_with(scheme, field, &states[n], h, &mut buf, &mut next)
            .map_err(|stage| Error::Divergence { step: n, stage })?;
        states.push(next.clone());
    }
    Trajectory::regular(0.0, h, states)
}

/// Number of `h`-steps that make up `gap`, or an alignment error if `gap` is
/// not an integer multiple of `h` to [`DIVISIBILITY_RTOL`].
pub fn steps_in(gap: f64, h: f64) -> Result<usize> {
    let n = (gap / h).round();
    if n < 0.0 || (n * h - gap).abs() > DIVISIBILITY_RTOL * gap.abs().max(h) {
        return Err(Error::Alignment { gap, h });
    }
    Ok(n as usize)
}

/// Integrates with constant step `h` from `x0` at `targets[0]` and returns
/// the state at each target time. Every gap between consecutive targets must
/// be an integer multiple of `h`.
pub fn rollout_to_times(
    scheme: SchemeKind,
    field: &(impl VectorField + ?Sized),
    x0: &[f64],
    h: f64,
    targets: &[f64],
) -> Result<Vec<Vec<f64>>> {
    check_dim(field, x0)?;
    check_h(h)?;
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let counts = targets
        .windows(2)
        .map(|w| {
            if w[1] < w[0] {
                return Err(Error::invalid("target times must be increasing"));
            }
            steps_in(w[1] - w[0], h)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut buf = StageBuf::new(scheme, x0.len());
    let mut out = Vec::with_capacity(targets.len());
    let mut x = x0.to_vec();
    let mut next = vec![0.0; x0.len()];
    out.push(x.clone());
    let mut step_idx = 0;
    for n in counts {
        for _ in 0..n {
            step_with(scheme, field, &x, h, &mut buf, &mut next).map_err(|stage| {
                Error::Divergence {
                    step: step_idx,
                    stage,
                }
            })?;
            std::mem::swap(&mut x, &mut next);
            step_idx += 1;
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Result of a log-log fit of endpoint error against step size.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    /// (h, error) pairs that entered the fit.
    pub used: Vec<(f64, f64)>,
    /// (h, error) pairs dropped as being at the round-off floor.
    pub dropped: Vec<(f64, f64)>,
}

/// Least-squares slope of `ln(error)` against `ln(h)`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), (h, e)| (a + h.ln(), b + e.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (h, e) in points {
        let dx = h.ln() - mx;
        sxx += dx * dx;
        sxy += dx * (e.ln() - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Estimates the observed order of accuracy of `scheme` on `field` by
/// integrating to `t_end` at each step in `h_list` (rounded so that it
/// divides `t_end`) and comparing to the closed-form solution `exact`.
///
/// Errors below `1e-12 * max(1, |x(t_end)|)` are treated as round-off floor
/// and excluded from the fit.
pub fn observed_order(
    scheme: SchemeKind,
    field: &(impl VectorField + ?Sized),
    exact: impl Fn(f64) -> Vec<f64>,
    t_end: f64,
    h_list: &[f64],
) -> Result<OrderFit> {
    if h_list.len() < 3 {
        return Err(Error::invalid("need at least three step sizes"));
    }
    let (lo, hi) = h_list
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &h| (a.min(h), b.max(h)));
    if hi / lo < 10.0 * (1.0 - 1e-12) {
        return Err(Error::invalid("step sizes must span at least one decade"));
    }
    let x0 = exact(0.0);
    let target = exact(t_end);
    let scale = target.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let floor = 1e-12 * scale;

    let mut used = Vec::new();
    let mut dropped = Vec::new();
    for &h in h_list {
        let n = (t_end / h).round().max(1.0) as usize;
        let h_eff = t_end / n as f64;
        let traj = rollout(scheme, field, &x0, h_eff, n)?;
        let end = traj.states.last().expect("rollout has at least one state");
        let err = l2_dist(end, &target);
        if err > floor {
            used.push((h_eff, err));
        } else {
            dropped.push((h_eff, err));
        }
    }
    if used.len() < 3 {
        return Err(Error::IndeterminateOrder(format!(
            "only {} of {} errors above the round-off floor",
            used.len(),
            h_list.len()
        )));
    }
    let (slope, intercept) = log_log_slope(&used)
        .ok_or_else(|| Error::IndeterminateOrder("all step sizes coincide".into()))?;
    Ok(OrderFit {
        slope,
        intercept,
        used,
        dropped,
    })
}

/// Euclidean distance between two states.
pub fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
