//! The convergence test and the order-escalating discovery loop.
//!
//! For each step size `h` on a logarithmic grid around the training spacing
//! `Δt`, the model is integrated from the first validation state and compared
//! against every `s`-th validation sample. Grid values below `Δt` are nudged
//! to the nearest divisor of `sΔt`; grid values above `Δt` are snapped to a
//! divisor of `sΔt` larger than `Δt` or dropped when none lies within 10%.
//! A model passes when no `h < Δt` does worse than `(1 + ε) Error(Δt)` on
//! any validation trajectory.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::integrators::{self, l2_dist, SchemeKind, Trajectory};
use crate::odenet::{self, Pair, TrainConfig, TrainedModel};
use crate::serde_util::{finite_or_null, finite_or_null_vec};

/// Ratio between neighbouring grid step sizes.
pub const GRID_RATIO: f64 = 1.1;

/// Largest relative distance between a coarse grid target and the divisor
/// of `sΔt` that replaces it.
pub const COARSE_SNAP_RTOL: f64 = 0.1;

/// Relative tolerance for accepting a validation trajectory as regular.
pub const REGULAR_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    /// Distance at the last compared sample.
    Endpoint,
    /// Largest distance over the compared samples.
    MaxOverPoints,
    /// Mean distance over the compared samples, including the initial one.
    MeanOverSubset,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "endpoint" => Ok(Metric::Endpoint),
            "max" | "maxoverpoints" => Ok(Metric::MaxOverPoints),
            "mean" | "meanoversubset" => Ok(Metric::MeanOverSubset),
            other => Err(Error::invalid(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    /// Grid half-span: `h = 1.1^i Δt` for `i = −m..=m`.
    pub m: usize,
    pub epsilon: f64,
    pub metric: Metric,
    /// Compare every `stride`-th validation sample.
    pub stride: usize,
    /// Spacing of the validation data.
    pub dt: f64,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            m: 24,
            epsilon: 0.5,
            metric: Metric::MeanOverSubset,
            stride: 5,
            dt: 0.1,
        }
    }
}

impl TestConfig {
    pub fn with_dt(dt: f64) -> Self {
        Self {
            dt,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("m must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("epsilon must be non-negative"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt must be positive"));
        }
        Ok(())
    }

    pub fn span(&self) -> f64 {
        self.stride as f64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

/// `{1.1^i Δt : i = −m..=m}` in ascending order.
pub fn h_grid(dt: f64, m: usize) -> Vec<f64> {
    let m = m as i32;
    (-m..=m).map(|i| dt * GRID_RATIO.powi(i)).collect()
}

/// A step size adjusted to divide a span exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nudged {
    pub h: f64,
    /// Steps per span.
    pub steps: usize,
    /// The request exceeded the span and was clamped to a single step.
    pub clamped: bool,
}

/// `span / round(span / h)`, rounding half away from zero with at least one
/// step.
pub fn nudge(h: f64, span: f64) -> Result<Nudged> {
    if !(h > 0.0 && span > 0.0 && h.is_finite() && span.is_finite()) {
        return Err(Error::invalid("nudge needs positive h and span"));
    }
    if h > span {
        return Ok(Nudged {
            h: span,
            steps: 1,
            clamped: true,
        });
    }
    let steps = (span / h).round().max(1.0) as usize;
    Ok(Nudged {
        h: span / steps as f64,
        steps,
        clamped: false,
    })
}

/// Snaps a target above `Δt` to `sΔt / n` with `1 ≤ n < s`, or `None` when
/// no such divisor lies within [`COARSE_SNAP_RTOL`] of the target.
pub fn snap_coarse(h: f64, dt: f64, stride: usize) -> Option<Nudged> {
    if stride < 2 {
        return None;
    }
    let span = stride as f64 * dt;
    let steps = ((span / h).round() as usize).clamp(1, stride - 1);
    let snapped = span / steps as f64;
    ((snapped - h).abs() <= COARSE_SNAP_RTOL * h).then_some(Nudged {
        h: snapped,
        steps,
        clamped: false,
    })
}

fn validation_spacing(val: &Trajectory) -> Result<f64> {
    val.regular_spacing(REGULAR_RTOL)
        .ok_or_else(|| Error::Data("validation trajectory must be regularly spaced".into()))
}

/// Global error of the model rolled out with step `h` against `val`.
///
/// `h` must divide `stride · Δt`. Samples `0, s, 2s, …` are compared. A
/// rollout that diverges scores `+∞`.
pub fn trajectory_error(
    field: &(impl VectorField + ?Sized),
    scheme: SchemeKind,
    h: f64,
    val: &Trajectory,
    metric: Metric,
    stride: usize,
) -> Result<f64> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if val.dim() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: val.dim(),
        });
    }
    let dt = validation_spacing(val)?;
    let span = stride as f64 * dt;
    integrators::steps_in(span, h)?;
    let indices: Vec<usize> = (0..val.len()).step_by(stride).collect();
    if indices.len() < 2 {
        return Err(Error::DegenerateTrajectory(format!(
            "validation needs more than {stride} samples"
        )));
    }
    let targets: Vec<f64> = (0..indices.len()).map(|k| k as f64 * span).collect();
    let predicted = match integrators::rollout_to_times(scheme, field, &val.states[0], h, &targets)
    {
        Ok(p) => p,
        Err(Error::Divergence { .. }) => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let mut dists = indices
        .iter()
        .zip(&predicted)
        .map(|(&i, p)| l2_dist(p, &val.states[i]));
    let err = match metric {
        Metric::Endpoint => dists.next_back().expect("at least two samples"),
        Metric::MaxOverPoints => dists.fold(0.0, f64::max),
        Metric::MeanOverSubset => dists.sum::<f64>() / indices.len() as f64,
    };
    Ok(if err.is_finite() { err } else { f64::INFINITY })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Grid value before snapping.
    pub target_h: f64,
    pub h: f64,
    /// Mean over validation trajectories.
    #[serde(with = "finite_or_null")]
    pub error: f64,
    #[serde(with = "finite_or_null_vec")]
    pub per_traj: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    #[serde(with = "finite_or_null")]
    pub error_at_dt: f64,
    #[serde(with = "finite_or_null")]
    pub plateau_b: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub config: TestConfig,
    pub scheme: SchemeKind,
    /// Sorted by `h`.
    pub points: Vec<CurvePoint>,
    #[serde(with = "finite_or_null")]
    pub error_at_dt: f64,
    /// Mean error over the three smallest `h`.
    #[serde(with = "finite_or_null")]
    pub plateau_b: f64,
    pub verdict: Verdict,
    pub per_trajectory: Vec<TrajectoryReport>,
    /// Coarse grid targets with no usable divisor of `sΔt`.
    pub dropped_targets: Vec<f64>,
}

impl ConvergenceReport {
    /// `(h, error)` of the aggregate curve.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.h, p.error)).collect()
    }

    /// `(h, error)` for validation trajectory `k`.
    pub fn trajectory_curve(&self, k: usize) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.h, p.per_traj[k])).collect()
    }

    /// Step size with the smallest aggregate error.
    pub fn argmin_h(&self) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.error.is_finite())
            .min_by(|a, b| a.error.total_cmp(&b.error))
            .map(|p| p.h)
    }

    /// The aggregate error at the grid point closest to `h`.
    pub fn error_near(&self, h: f64) -> Option<f64> {
        self.points
            .iter()
            .min_by(|a, b| (a.h / h).ln().abs().total_cmp(&(b.h / h).ln().abs()))
            .map(|p| p.error)
    }
}

fn mean_of_smallest(points: &[(usize, f64)], count: usize) -> f64 {
    // points carry (steps per span, error); more steps means smaller h
    let mut v: Vec<&(usize, f64)> = points.iter().collect();
    v.sort_by_key(|p| std::cmp::Reverse(p.0));
    let tail: Vec<f64> = v.iter().take(count).map(|p| p.1).collect();
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Runs the convergence test of `field` integrated with `scheme` against
/// each validation trajectory.
pub fn run_convergence_test(
    field: &(impl VectorField + ?Sized),
    scheme: SchemeKind,
    vals: &[Trajectory],
    config: &TestConfig,
) -> Result<ConvergenceReport> {
    config.validate()?;
    if vals.is_empty() {
        return Err(Error::invalid("no validation trajectories"));
    }
    for v in vals {
        let dt = validation_spacing(v)?;
        if (dt - config.dt).abs() > REGULAR_RTOL * config.dt {
            return Err(Error::Data(format!(
                "validation spacing {dt} differs from configured dt {}",
                config.dt
            )));
        }
        if v.len() <= config.stride {
            return Err(Error::DegenerateTrajectory(format!(
                "validation needs more than {} samples",
                config.stride
            )));
        }
    }

    let s = config.stride;
    let span = config.span();
    let grid = h_grid(config.dt, config.m);
    let mid = config.m;
    let mut chosen: Vec<(f64, Nudged)> = Vec::new();
    let mut dropped = Vec::new();
    for (idx, &target) in grid.iter().enumerate() {
        let snapped = match idx.cmp(&mid) {
            std::cmp::Ordering::Less => Some(nudge(target, span)?),
            std::cmp::Ordering::Equal => Some(Nudged {
                h: span / s as f64,
                steps: s,
                clamped: false,
            }),
            std::cmp::Ordering::Greater => snap_coarse(target, config.dt, s),
        };
        match snapped {
            Some(n) if !chosen.iter().any(|(_, c)| c.steps == n.steps) => chosen.push((target, n)),
            Some(_) => {}
            None => dropped.push(target),
        }
    }
    chosen.sort_by_key(|c| std::cmp::Reverse(c.1.steps));

    let jobs: Vec<(usize, usize)> = (0..chosen.len())
        .flat_map(|p| (0..vals.len()).map(move |t| (p, t)))
        .collect();
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|&(p, t)| trajectory_error(field, scheme, chosen[p].1.h, &vals[t], config.metric, s))
        .collect::<Result<_>>()?;

    let n_traj = vals.len();
    let points: Vec<CurvePoint> = chosen
        .iter()
        .enumerate()
        .map(|(p, (target, n))| {
            let per_traj = errors[p * n_traj..(p + 1) * n_traj].to_vec();
            let error = per_traj.iter().sum::<f64>() / n_traj as f64;
            CurvePoint {
                target_h: *target,
                h: n.h,
                error: if error.is_finite() {
                    error
                } else {
                    f64::INFINITY
                },
                per_traj,
            }
        })
        .collect();
    let steps: Vec<usize> = chosen.iter().map(|(_, n)| n.steps).collect();
    let at_dt = steps
        .iter()
        .position(|&n| n == s)
        .expect("the training spacing is always on the grid");

    let judge = |errs: &[f64]| -> (f64, f64, Verdict) {
        let e_dt = errs[at_dt];
        let tagged: Vec<(usize, f64)> = steps.iter().copied().zip(errs.iter().copied()).collect();
        let b = mean_of_smallest(&tagged, 3);
        let ok = e_dt.is_finite()
            && tagged
                .iter()
                .filter(|(n, _)| *n > s)
                .all(|(_, e)| *e <= (1.0 + config.epsilon) * e_dt);
        (e_dt, b, if ok { Verdict::Pass } else { Verdict::Fail })
    };

    let per_trajectory: Vec<TrajectoryReport> = (0..n_traj)
        .map(|t| {
            let errs: Vec<f64> = points.iter().map(|p| p.per_traj[t]).collect();
            let (error_at_dt, plateau_b, verdict) = judge(&errs);
            TrajectoryReport {
                error_at_dt,
                plateau_b,
                verdict,
            }
        })
        .collect();
    let agg: Vec<f64> = points.iter().map(|p| p.error).collect();
    let (error_at_dt, plateau_b, _) = judge(&agg);
    let verdict = if per_trajectory.iter().all(|r| r.verdict.passed()) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };

    Ok(ConvergenceReport {
        config: *config,
        scheme,
        points,
        error_at_dt,
        plateau_b,
        verdict,
        per_trajectory,
        dropped_targets: dropped,
    })
}

/// One rung of the discovery ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub scheme: SchemeKind,
    pub diverged: bool,
    pub verdict: Option<Verdict>,
    pub error_at_dt: Option<f64>,
    pub plateau_b: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Discovery<M> {
    pub model: M,
    pub report: ConvergenceReport,
    pub order_used: u32,
    /// False when every order up to the quit order failed the test.
    pub converged: bool,
    pub attempts: Vec<Attempt>,
    pub notes: Vec<String>,
}

/// The discovery loop over a caller-supplied learner.
///
/// `learn(scheme)` returns a model and whether its training diverged. Orders
/// are tried in the sequence Euler, Midpoint, RK4 up to and including
/// `quit_order`; the model is tested with the scheme it was trained for.
pub fn discover_with<M, F>(
    vals: &[Trajectory],
    config: &TestConfig,
    quit_order: u32,
    mut learn: F,
) -> Result<Discovery<M>>
where
    M: VectorField,
    F: FnMut(SchemeKind) -> Result<(M, bool)>,
{
    let ladder: Vec<SchemeKind> = SchemeKind::ALL
        .into_iter()
        .filter(|s| s.order() <= quit_order)
        .collect();
    if ladder.is_empty() {
        return Err(Error::invalid("quit order must be at least 1"));
    }
    let mut attempts = Vec::new();
    let mut notes = Vec::new();
    let mut last: Option<(M, Option<ConvergenceReport>, SchemeKind)> = None;
    for scheme in ladder {
        let (model, diverged) = learn(scheme)?;
        if diverged {
            notes.push(format!(
                "training with {scheme} diverged; trying the next order"
            ));
            attempts.push(Attempt {
                scheme,
                diverged: true,
                verdict: None,
                error_at_dt: None,
                plateau_b: None,
            });
            last = Some((model, None, scheme));
            continue;
        }
        let report = run_convergence_test(&model, scheme, vals, config)?;
        attempts.push(Attempt {
            scheme,
            diverged: false,
            verdict: Some(report.verdict),
            error_at_dt: Some(report.error_at_dt),
            plateau_b: Some(report.plateau_b),
        });
        if report.verdict.passed() {
            return Ok(Discovery {
                model,
                report,
                order_used: scheme.order(),
                converged: true,
                attempts,
                notes,
            });
        }
        last = Some((model, Some(report), scheme));
    }
    let (model, report, scheme) = last.expect("ladder is non-empty");
    let report = match report {
        Some(r) => r,
        None => run_convergence_test(&model, scheme, vals, config)?,
    };
    notes.push(format!(
        "failed to converge before temporal accuracy order {quit_order}"
    ));
    Ok(Discovery {
        model,
        report,
        order_used: scheme.order(),
        converged: false,
        attempts,
        notes,
    })
}

/// The discovery loop for ODE-Nets: retrain at increasing scheme order until
/// the convergence test passes.
pub fn discover(
    train_pairs: &[Pair],
    vals: &[Trajectory],
    train_config: &TrainConfig,
    test_config: &TestConfig,
    quit_order: u32,
) -> Result<Discovery<TrainedModel>> {
    discover_with(vals, test_config, quit_order, |scheme| {
        let cfg = TrainConfig {
            scheme,
            ..*train_config
        };
        let model = odenet::train(train_pairs, &cfg)?;
        let diverged = model.diverged;
        Ok((model, diverged))
    })
}
