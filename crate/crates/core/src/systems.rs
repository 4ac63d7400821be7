//! Benchmark vector fields and reference trajectory generation.
//!
//! The harmonic oscillator is sampled from its closed-form solution. The
//! other systems are integrated with RK4 at one thousandth of the sampling
//! interval, which is accurate far below the errors the convergence test
//! resolves. The Cartesian pendulum is integrated in angle space and mapped
//! to `(x, y, v_x, v_y)` so the length constraint holds to round-off.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::integrators::Trajectory;

/// Internal oracle steps per nominal sampling interval.
pub const ORACLE_SUBSTEPS: usize = 1000;

/// Name of the generator recorded in dataset metadata.
pub const RNG_NAME: &str = "ChaCha8";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system")]
pub enum SystemSpec {
    /// `dx/dt = y`, `dy/dt = −x`.
    HarmonicOscillator,
    /// `dθ/dt = v`, `dv/dt = −ω0² sin θ`.
    NonlinearPendulum { omega0: f64 },
    /// `dx/dt = a x − b x y`, `dy/dt = c x y − d y`.
    LotkaVolterra { a: f64, b: f64, c: f64, d: f64 },
    /// A unit mass on a rod of length `L` in Cartesian coordinates, with
    /// gravity `g` along `+y` (the rest position is `(0, L)`).
    CartesianPendulum { length: f64, gravity: f64 },
}

impl SystemSpec {
    pub fn harmonic() -> Self {
        SystemSpec::HarmonicOscillator
    }

    pub fn pendulum() -> Self {
        SystemSpec::NonlinearPendulum { omega0: 1.0 }
    }

    pub fn lotka_volterra() -> Self {
        SystemSpec::LotkaVolterra {
            a: 1.5,
            b: 1.0,
            c: 1.0,
            d: 3.0,
        }
    }

    pub fn cartesian_pendulum() -> Self {
        SystemSpec::CartesianPendulum {
            length: 1.0,
            gravity: 1.0,
        }
    }

    /// Default-parameter spec from a case-insensitive name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "harmonic" | "harmonicoscillator" => Ok(Self::harmonic()),
            "pendulum" | "nonlinearpendulum" => Ok(Self::pendulum()),
            "lotkavolterra" | "lv" => Ok(Self::lotka_volterra()),
            "cartesianpendulum" | "cartesian" | "xypendulum" => Ok(Self::cartesian_pendulum()),
            _ => Err(Error::invalid(format!("unknown system `{name}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemSpec::HarmonicOscillator => "HarmonicOscillator",
            SystemSpec::NonlinearPendulum { .. } => "NonlinearPendulum",
            SystemSpec::LotkaVolterra { .. } => "LotkaVolterra",
            SystemSpec::CartesianPendulum { .. } => "CartesianPendulum",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            SystemSpec::CartesianPendulum { .. } => 4,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let params: &[f64] = match self {
            SystemSpec::HarmonicOscillator => &[],
            SystemSpec::NonlinearPendulum { omega0 } => &[*omega0],
            SystemSpec::LotkaVolterra { a, b, c, d } => &[*a, *b, *c, *d],
            SystemSpec::CartesianPendulum { length, gravity } => &[*length, *gravity],
        };
        if params.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(Error::invalid(format!(
                "{} parameters must be positive",
                self.name()
            )));
        }
        Ok(())
    }
}

/// The analytic right-hand side of a [`SystemSpec`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemField(pub SystemSpec);

impl VectorField for SystemField {
    fn dim(&self) -> usize {
        self.0.state_dim()
    }

    fn eval_into(&self, s: &[f64], out: &mut [f64]) {
        match self.0 {
            SystemSpec::HarmonicOscillator => {
                out[0] = s[1];
                out[1] = -s[0];
            }
            SystemSpec::NonlinearPendulum { omega0 } => {
                out[0] = s[1];
                out[1] = -omega0 * omega0 * s[0].sin();
            }
            SystemSpec::LotkaVolterra { a, b, c, d } => {
                let (x, y) = (s[0], s[1]);
                out[0] = a * x - b * x * y;
                out[1] = c * x * y - d * y;
            }
            SystemSpec::CartesianPendulum { length, gravity } => {
                let (x, y, vx, vy) = (s[0], s[1], s[2], s[3]);
                let f = -(vx * vx + vy * vy + gravity * y) / length;
                out[0] = vx;
                out[1] = vy;
                out[2] = f * x / length;
                out[3] = f * y / length + gravity;
            }
        }
    }
}

pub fn field(spec: SystemSpec) -> SystemField {
    SystemField(spec)
}

/// Irregular sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub dt: f64,
    pub n_points: usize,
    #[serde(default = "default_jitter")]
    pub jitter_frac: f64,
    #[serde(default = "default_skip")]
    pub skip_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_jitter() -> f64 {
    0.2
}

fn default_skip() -> f64 {
    0.1
}

impl SamplingSpec {
    /// Default jitter (0.2) and skip probability (0.1).
    pub fn new(dt: f64, n_points: usize, seed: u64) -> Self {
        Self {
            dt,
            n_points,
            jitter_frac: default_jitter(),
            skip_prob: default_skip(),
            seed,
        }
    }

    pub fn regular(dt: f64, n_points: usize) -> Self {
        Self {
            dt,
            n_points,
            jitter_frac: 0.0,
            skip_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt must be positive"));
        }
        if self.n_points == 0 {
            return Err(Error::invalid("n_points must be at least 1"));
        }
        if !(0.0..0.5).contains(&self.jitter_frac) {
            return Err(Error::invalid("jitter_frac must lie in [0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.skip_prob) {
            return Err(Error::invalid("skip_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn harmonic_at(x0: &[f64], t: f64) -> Vec<f64> {
    let (s, c) = t.sin_cos();
    vec![x0[0] * c + x0[1] * s, x0[1] * c - x0[0] * s]
}

fn rk4_substeps(f: &impl VectorField, x: &mut [f64], h: f64, n: usize) -> Result<()> {
    let d = x.len();
    let (mut k1, mut k2, mut k3, mut k4, mut z) = (
        vec![0.0; d],
        vec![0.0; d],
        vec![0.0; d],
        vec![0.0; d],
        vec![0.0; d],
    );
    for _ in 0..n {
        f.eval_into(x, &mut k1);
        for i in 0..d {
            z[i] = x[i] + 0.5 * h * k1[i];
        }
        f.eval_into(&z, &mut k2);
        for i in 0..d {
            z[i] = x[i] + 0.5 * h * k2[i];
        }
        f.eval_into(&z, &mut k3);
        for i in 0..d {
            z[i] = x[i] + h * k3[i];
        }
        f.eval_into(&z, &mut k4);
        for i in 0..d {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "reference integration diverged".to_string(),
            ));
        }
    }
    Ok(())
}

/// Maps a Cartesian pendulum state onto angle space, projecting onto the
/// circle of radius `L` and its tangent velocity.
pub fn cartesian_to_angle(state: &[f64], length: f64) -> [f64; 2] {
    let theta = state[0].atan2(state[1]);
    let (s, c) = theta.sin_cos();
    [theta, (state[2] * c - state[3] * s) / length]
}

pub fn angle_to_cartesian(theta: f64, omega: f64, length: f64) -> Vec<f64> {
    let (s, c) = theta.sin_cos();
    vec![
        length * s,
        length * c,
        length * c * omega,
        -length * s * omega,
    ]
}

/// States at `x0` followed by one state after each gap, integrating each
/// gap with `substeps_per_dt` RK4 steps per nominal `dt` (rounded up).
fn oracle_states(
    spec: SystemSpec,
    x0: &[f64],
    dt: f64,
    gaps: &[f64],
    times: &[f64],
    substeps_per_dt: usize,
) -> Result<Vec<Vec<f64>>> {
    let n_sub = |gap: f64| ((gap / dt) * substeps_per_dt as f64 - 1e-9).ceil().max(1.0) as usize;
    match spec {
        SystemSpec::HarmonicOscillator => Ok(times
            .iter()
            .map(|&t| harmonic_at(x0, t - times[0]))
            .collect()),
        SystemSpec::CartesianPendulum { length, gravity } => {
            let omega0 = (gravity / length).sqrt();
            let angle_field = SystemField(SystemSpec::NonlinearPendulum { omega0 });
            let a0 = cartesian_to_angle(x0, length);
            let mut a = a0.to_vec();
            let mut out = Vec::with_capacity(gaps.len() + 1);
            out.push(angle_to_cartesian(a[0], a[1], length));
            for &g in gaps {
                let n = n_sub(g);
                rk4_substeps(&angle_field, &mut a, g / n as f64, n)?;
                out.push(angle_to_cartesian(a[0], a[1], length));
            }
            Ok(out)
        }
        _ => {
            let f = SystemField(spec);
            let mut x = x0.to_vec();
            let mut out = Vec::with_capacity(gaps.len() + 1);
            out.push(x.clone());
            for &g in gaps {
                let n = n_sub(g);
                rk4_substeps(&f, &mut x, g / n as f64, n)?;
                out.push(x.clone());
            }
            Ok(out)
        }
    }
}

fn check_x0(spec: &SystemSpec, x0: &[f64]) -> Result<()> {
    spec.validate()?;
    if x0.len() != spec.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.state_dim(),
            got: x0.len(),
        });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial state must be finite"));
    }
    Ok(())
}

/// Regularly spaced samples `t_k = k dt`, `k = 0..n_points`.
pub fn reference_trajectory(
    spec: SystemSpec,
    x0: &[f64],
    dt: f64,
    n_points: usize,
) -> Result<Trajectory> {
    reference_trajectory_refined(spec, x0, dt, n_points, ORACLE_SUBSTEPS)
}

/// [`reference_trajectory`] with an explicit number of internal RK4 steps
/// per sampling interval.
pub fn reference_trajectory_refined(
    spec: SystemSpec,
    x0: &[f64],
    dt: f64,
    n_points: usize,
    substeps: usize,
) -> Result<Trajectory> {
    check_x0(&spec, x0)?;
    SamplingSpec::regular(dt, n_points).validate()?;
    if substeps == 0 {
        return Err(Error::invalid("substeps must be positive"));
    }
    let gaps = vec![dt; n_points - 1];
    let times: Vec<f64> = (0..n_points).map(|k| k as f64 * dt).collect();
    let states = oracle_states(spec, x0, dt, &gaps, &times, substeps)?;
    Trajectory::with_gaps(times, states, gaps)
}

/// Samples on a jittered grid with dropped measurements.
///
/// Each nominal gap is scaled by `1 + U(−jitter_frac, jitter_frac)` and each
/// interior sample is dropped with probability `skip_prob`, merging its two
/// neighbouring gaps. The recorded gaps are the exact intervals the oracle
/// integrates over.
pub fn irregular_trajectory(
    spec: SystemSpec,
    x0: &[f64],
    sampling: &SamplingSpec,
) -> Result<Trajectory> {
    check_x0(&spec, x0)?;
    sampling.validate()?;
    let n = sampling.n_points;
    let dt = sampling.dt;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);

    let jitter: Vec<f64> = (0..n.saturating_sub(1))
        .map(|_| {
            let u: f64 = rng.random();
            (2.0 * u - 1.0) * sampling.jitter_frac
        })
        .collect();
    let keep: Vec<bool> = (0..n)
        .map(|k| {
            let u: f64 = rng.random();
            k == 0 || k + 1 == n || u >= sampling.skip_prob
        })
        .collect();
    if n >= 3 && keep.iter().filter(|k| **k).count() == 2 {
        return Err(Error::DegenerateTrajectory(
            "every interior sample was dropped".into(),
        ));
    }

    // t_k = dt * (k + Σ_{i<k} u_i), so zero jitter reproduces k dt exactly
    let mut cum = vec![0.0; n];
    for k in 1..n {
        cum[k] = cum[k - 1] + jitter[k - 1];
    }
    let kept: Vec<usize> = (0..n).filter(|&k| keep[k]).collect();
    let times: Vec<f64> = kept.iter().map(|&k| dt * (k as f64 + cum[k])).collect();
    let gaps: Vec<f64> = kept
        .windows(2)
        .map(|w| dt * ((w[1] - w[0]) as f64 + (cum[w[1]] - cum[w[0]])))
        .collect();
    let states = oracle_states(spec, x0, dt, &gaps, &times, ORACLE_SUBSTEPS)?;
    Trajectory::with_gaps(times, states, gaps)
}

/// One reference trajectory per initial condition.
pub fn multi_ic_dataset(
    spec: SystemSpec,
    ics: &[Vec<f64>],
    dt: f64,
    n_points: usize,
) -> Result<Vec<Trajectory>> {
    if ics.is_empty() {
        return Err(Error::invalid("need at least one initial condition"));
    }
    ics.par_iter()
        .map(|x0| reference_trajectory(spec, x0, dt, n_points))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn field_values() {
        assert_eq!(
            field(SystemSpec::harmonic()).eval(&[1.0, 0.0]),
            vec![0.0, -1.0]
        );
        let p = field(SystemSpec::pendulum()).eval(&[PI / 2.0, 0.0]);
        assert_eq!(p[0], 0.0);
        assert!((p[1] + 1.0).abs() < 1e-15);
        assert_eq!(
            field(SystemSpec::lotka_volterra()).eval(&[1.0, 1.0]),
            vec![0.5, -2.0]
        );
    }

    #[test]
    fn cartesian_field_keeps_constraint_tangent() {
        // d²/dt² (x² + y²) = 0 on the constraint manifold
        let l = 1.3;
        let spec = SystemSpec::CartesianPendulum {
            length: l,
            gravity: 0.8,
        };
        let s = angle_to_cartesian(0.7, -0.4, l);
        let d = field(spec).eval(&s);
        let second = 2.0 * (s[2] * s[2] + s[3] * s[3]) + 2.0 * (s[0] * d[2] + s[1] * d[3]);
        assert!(second.abs() < 1e-14);
    }

    #[test]
    fn state_dims_and_validation() {
        assert_eq!(SystemSpec::cartesian_pendulum().state_dim(), 4);
        assert_eq!(SystemSpec::lotka_volterra().state_dim(), 2);
        assert!(SystemSpec::NonlinearPendulum { omega0: 0.0 }
            .validate()
            .is_err());
        assert!(reference_trajectory(SystemSpec::harmonic(), &[1.0], 0.1, 3).is_err());
        assert!(SystemSpec::by_name("lotka-volterra").is_ok());
        assert!(SystemSpec::by_name("lorenz").is_err());
    }

    #[test]
    fn harmonic_quarter_period() {
        let dt = PI / 20.0;
        let t = reference_trajectory(SystemSpec::harmonic(), &[1.0, 0.0], dt, 11).unwrap();
        let end = &t.states[10];
        assert!(end[0].abs() < 1e-12 && (end[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn unjittered_sampling_matches_reference() {
        for spec in [SystemSpec::harmonic(), SystemSpec::pendulum()] {
            let s = SamplingSpec {
                jitter_frac: 0.0,
                skip_prob: 0.0,
                ..SamplingSpec::new(0.1, 12, 9)
            };
            let a = irregular_trajectory(spec, &[0.5, 0.1], &s).unwrap();
            let b = reference_trajectory(spec, &[0.5, 0.1], 0.1, 12).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn all_interior_dropped_is_error() {
        let s = SamplingSpec {
            skip_prob: 1.0,
            ..SamplingSpec::new(0.1, 3, 1)
        };
        assert!(matches!(
            irregular_trajectory(SystemSpec::harmonic(), &[1.0, 0.0], &s),
            Err(Error::DegenerateTrajectory(_))
        ));
    }

    #[test]
    fn sampling_validation() {
        let mut s = SamplingSpec::new(0.1, 10, 0);
        s.jitter_frac = 0.5;
        assert!(s.validate().is_err());
        s.jitter_frac = 0.1;
        s.dt = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn angle_mapping_round_trip() {
        let c = angle_to_cartesian(1.1, 0.3, 2.0);
        let a = cartesian_to_angle(&c, 2.0);
        assert!((a[0] - 1.1).abs() < 1e-14 && (a[1] - 0.3).abs() < 1e-14);
    }
}
