//! Closed-form results for the scalar linear ODE `dx/dt = λx`.
//!
//! A linear ODE-Net `dx/dt = w x` trained to optimality with an order-`p`
//! scheme at spacing `Δt` reproduces the data exactly, which forces
//! `T_p(wΔt) = e^{λΔt}` where `T_p` is the degree-`p` Taylor polynomial of
//! the exponential. Integrating that model with an order-`q` scheme at step
//! `h` then has the global error
//!
//! ```text
//! Error(h) = (k / h) |e^{λh} − T_q(h w̃)|,   w̃ = w + ε,
//! ```
//!
//! which vanishes at `h = Δt` when `q = p` and tends to `k|w̃ − λ|` as
//! `h → 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSetting {
    pub lambda: f64,
    pub dt: f64,
    /// Order of the training scheme.
    pub p: u32,
    /// Order of the inference scheme.
    pub q: u32,
    /// Perturbation added to the optimal parameter.
    #[serde(default)]
    pub epsilon: f64,
    /// Trajectory-dependent error scale.
    #[serde(default = "one")]
    pub k: f64,
}

fn one() -> f64 {
    1.0
}

impl LinearSetting {
    pub fn new(lambda: f64, dt: f64, p: u32, q: u32) -> Self {
        Self {
            lambda,
            dt,
            p,
            q,
            epsilon: 0.0,
            k: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt must be positive"));
        }
        if !self.lambda.is_finite() || !self.epsilon.is_finite() || !self.k.is_finite() {
            return Err(Error::invalid("lambda, epsilon and k must be finite"));
        }
        for order in [self.p, self.q] {
            if ![1, 2, 4].contains(&order) {
                return Err(Error::invalid(format!(
                    "scheme order must be 1, 2 or 4, got {order}"
                )));
            }
        }
        Ok(())
    }

    /// The optimal parameter plus the perturbation.
    pub fn w_tilde(&self) -> Result<f64> {
        self.validate()?;
        let w = solve_w(self.lambda, self.dt, self.p).ok_or(Error::NoRoot {
            lambda: self.lambda,
            dt: self.dt,
            p: self.p,
        })?;
        Ok(w + self.epsilon)
    }
}

/// `Σ_{i=0..p} z^i / i!`.
pub fn taylor_poly(z: f64, p: u32) -> f64 {
    // Horner from the top term down
    let mut acc = 1.0;
    for i in (1..=p).rev() {
        acc = 1.0 + z / i as f64 * acc;
    }
    acc
}

/// `T_p(z) − 1`, accurate for small `z`.
fn taylor_poly_m1(z: f64, p: u32) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for i in 1..=p {
        term *= z / i as f64;
        sum += term;
    }
    sum
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut f_lo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let f_mid = f(mid);
        if (f_mid < 0.0) == (f_lo < 0.0) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// For even `p`, the minimiser of `T_p`: the unique real root of `T_{p−1}`.
fn even_minimizer(p: u32) -> f64 {
    let mut lo = -1.0;
    while taylor_poly(lo, p - 1) >= 0.0 {
        lo *= 2.0;
    }
    bisect(|z| taylor_poly(z, p - 1), lo, 0.0)
}

/// Root `w` of `T_p(wΔt) = e^{λΔt}` with the sign of `λ`, or `None` when no
/// real root exists. For even `p` and `λ < 0` the root nearest zero is
/// returned.
pub fn solve_w(lambda: f64, dt: f64, p: u32) -> Option<f64> {
    if p == 0 || !(dt > 0.0) || !lambda.is_finite() {
        return None;
    }
    if lambda == 0.0 {
        return Some(0.0);
    }
    let target_m1 = (lambda * dt).exp_m1();
    let g = |z: f64| taylor_poly_m1(z, p) - target_m1;
    let (lo, hi) = if lambda > 0.0 {
        let mut hi = 1.0;
        while g(hi) < 0.0 {
            hi *= 2.0;
        }
        (0.0, hi)
    } else if p % 2 == 1 {
        let mut lo = -1.0;
        while g(lo) > 0.0 {
            lo *= 2.0;
        }
        (lo, 0.0)
    } else {
        let zmin = even_minimizer(p);
        if g(zmin) > 0.0 {
            return None;
        }
        (zmin, 0.0)
    };
    let mut z = bisect(g, lo, hi);
    for _ in 0..3 {
        let slope = taylor_poly(z, p - 1);
        if slope == 0.0 {
            break;
        }
        let next = z - g(z) / slope;
        if next.is_finite() && next >= lo && next <= hi && g(next).abs() <= g(z).abs() {
            z = next;
        } else {
            break;
        }
    }
    Some(z / dt)
}

/// Whether [`solve_w`] has a root. Odd orders always do; even orders need
/// `e^{λΔt}` to reach the minimum of `T_p`, which is `Δt ≤ ln 2/|λ|` for
/// `p = 2` and `Δt ≲ 1.307/|λ|` for `p = 4`.
pub fn existence_condition(lambda: f64, dt: f64, p: u32) -> bool {
    if p % 2 == 1 || lambda >= 0.0 {
        return true;
    }
    let zmin = even_minimizer(p);
    taylor_poly(zmin, p) <= (lambda * dt).exp()
}

/// `Error(h)` of the perturbed optimal model integrated with order `q`.
pub fn error_curve(setting: &LinearSetting, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("h must be positive"));
    }
    let w = setting.w_tilde()?;
    let diff = (setting.lambda * h).exp_m1() - taylor_poly_m1(h * w, setting.q);
    Ok(setting.k / h * diff.abs())
}

/// The `h → 0` limit of [`error_curve`]: `k|w̃ − λ|`.
pub fn plateau_b(setting: &LinearSetting) -> Result<f64> {
    Ok(setting.k * (setting.w_tilde()? - setting.lambda).abs())
}

/// Leading-order bound `k(|λ|^{p+1} Δt^p / (p+1)! + |ε|)` on `k|w̃ − λ|`.
pub fn bound_w_minus_lambda(setting: &LinearSetting) -> Result<f64> {
    setting.validate()?;
    let p = setting.p as i32;
    let factorial: f64 = (1..=p + 1).map(f64::from).product();
    let lead = setting.lambda.abs().powi(p + 1) * setting.dt.powi(p) / factorial;
    Ok(setting.k * (lead + setting.epsilon.abs()))
}

/// Root of `1 + Δt w = e^{λΔt}`.
pub fn w_euler(lambda: f64, dt: f64) -> f64 {
    (lambda * dt).exp_m1() / dt
}

/// Root of `1 + Δt w + (Δt w)²/2 = e^{λΔt}` on the branch through `w = λ`,
/// or `None` when the discriminant is negative.
pub fn w_rk2(lambda: f64, dt: f64) -> Option<f64> {
    let disc = 1.0 + 2.0 * (lambda * dt).exp_m1();
    (disc >= 0.0).then(|| (disc.sqrt() - 1.0) / dt)
}

/// `(h, Error(h))` at each `h`.
pub fn analytic_curve(setting: &LinearSetting, hs: &[f64]) -> Result<Vec<(f64, f64)>> {
    hs.iter()
        .map(|&h| Ok((h, error_curve(setting, h)?)))
        .collect()
}

/// Least-squares `k` on the log curve: `log e_i = log k + log a_i` over the
/// empirical points with `h < Δt`, where `a_i` is the analytic curve with
/// `k = 1`.
pub fn fit_k(setting: &LinearSetting, empirical: &[(f64, f64)]) -> Result<f64> {
    let unit = LinearSetting { k: 1.0, ..*setting };
    let mut logs = Vec::new();
    for &(h, e) in empirical {
        if h >= setting.dt * (1.0 - 1e-9) || !(e > 0.0) || !e.is_finite() {
            continue;
        }
        let a = error_curve(&unit, h)?;
        if a > 0.0 && a.is_finite() {
            logs.push(e.ln() - a.ln());
        }
    }
    if logs.is_empty() {
        return Err(Error::invalid("no usable points with h < dt to fit k"));
    }
    Ok((logs.iter().sum::<f64>() / logs.len() as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taylor_values() {
        assert!((taylor_poly(0.1, 1) - 1.1).abs() < 1e-15);
        for p in 1..8 {
            assert_eq!(taylor_poly(0.0, p), 1.0);
        }
        assert!((taylor_poly(0.1, 4) - 1.105_170_833_333_333_3).abs() < 1e-15);
        assert!((taylor_poly_m1(0.1, 4) - 0.105_170_833_333_333_3).abs() < 1e-15);
    }

    #[test]
    fn roots_match_hand_solutions() {
        for p in [1, 2, 4] {
            assert_eq!(solve_w(0.0, 0.3, p), Some(0.0));
        }
        let w1 = solve_w(-1.0, 0.1, 1).unwrap();
        assert!((w1 - (-0.1f64).exp_m1() / 0.1).abs() < 1e-13);
        assert!((w1 + 0.9516258).abs() < 1e-7);
        let w2 = solve_w(-1.0, 0.1, 2).unwrap();
        let closed = ((2.0 * (-0.1f64).exp() - 1.0).sqrt() - 1.0) / 0.1;
        assert!((w2 - closed).abs() < 1e-12);
        assert!((w2 + 1.0018).abs() < 1e-4);
    }

    #[test]
    fn roots_have_tiny_residual_and_right_sign() {
        for &lambda in &[-3.0, -1.0, -0.2, 0.4, 2.0] {
            for &dt in &[1e-3, 0.01, 0.1, 0.5] {
                for p in [1, 2, 4] {
                    if let Some(w) = solve_w(lambda, dt, p) {
                        let r = taylor_poly(w * dt, p) - (lambda * dt).exp();
                        assert!(r.abs() < 1e-13, "λ={lambda} Δt={dt} p={p}: {r}");
                        assert_eq!(w.signum(), f64::signum(lambda));
                    } else {
                        assert!(!existence_condition(lambda, dt, p));
                    }
                }
            }
        }
    }

    #[test]
    fn existence_examples() {
        assert!(existence_condition(-100.0, 10.0, 1));
        assert!(!existence_condition(-1.0, 0.7, 2));
        assert!(existence_condition(-1.0, 0.69, 2));
        assert!(existence_condition(-1.0, 1.3, 4));
        assert!(!existence_condition(-1.0, 1.31, 4));
        assert!(solve_w(-1.0, 0.7, 2).is_none());
        assert!(solve_w(-1.0, 1.3, 4).is_some());
        assert!(existence_condition(0.0, 100.0, 2));
    }

    #[test]
    fn error_curve_examples() {
        let s = LinearSetting::new(-1.0, 0.1, 1, 1);
        assert!(error_curve(&s, 0.1).unwrap() < 1e-12);
        assert!(error_curve(&s, 0.05).unwrap() > 0.0);
        assert!((error_curve(&s, 1e-6).unwrap() - 0.0483742).abs() < 1e-6);
        let eps = LinearSetting { epsilon: 1e-5, ..s };
        let e = error_curve(&eps, 0.1).unwrap();
        assert!((e / 1e-5 - 1.0).abs() < 0.15, "{e}");
        let bad = LinearSetting::new(-1.0, 0.7, 2, 2);
        assert!(matches!(error_curve(&bad, 0.1), Err(Error::NoRoot { .. })));
    }

    #[test]
    fn plateau_and_bound_examples() {
        let s = LinearSetting::new(-1.0, 0.1, 1, 1);
        let b = plateau_b(&s).unwrap();
        assert!((b - 0.0483742).abs() < 1e-7);
        let bound = bound_w_minus_lambda(&s).unwrap();
        assert!((bound - 0.05).abs() < 1e-15);
        assert!((b / bound - 0.967).abs() < 1e-3);

        let s2 = LinearSetting::new(-1.0, 0.1, 2, 2);
        assert!((plateau_b(&s2).unwrap() - 1.80e-3).abs() < 1e-5);
        assert!((bound_w_minus_lambda(&s2).unwrap() - 1.6667e-3).abs() < 1e-7);

        let s4 = LinearSetting {
            epsilon: 1e-2,
            ..LinearSetting::new(-1.0, 1e-3, 4, 4)
        };
        assert!((plateau_b(&s4).unwrap() / 1e-2 - 1.0).abs() < 0.01);
    }

    #[test]
    fn closed_forms_agree() {
        for &lambda in &[-2.0, -0.5, 0.3, 1.5] {
            for &dt in &[0.01, 0.1, 0.3] {
                let w1 = solve_w(lambda, dt, 1).unwrap();
                assert!((w1 - w_euler(lambda, dt)).abs() < 1e-12);
                match (solve_w(lambda, dt, 2), w_rk2(lambda, dt)) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                    (a, b) => assert_eq!(a.is_some(), b.is_some()),
                }
            }
        }
    }

    #[test]
    fn fit_k_recovers_scale() {
        let s = LinearSetting::new(-1.0, 0.1, 1, 1);
        let hs: Vec<f64> = (1..20).map(|i| 0.1 / 1.1f64.powi(i)).collect();
        let scaled = LinearSetting { k: 3.5, ..s };
        let pts = analytic_curve(&scaled, &hs).unwrap();
        assert!((fit_k(&s, &pts).unwrap() - 3.5).abs() < 1e-9);
        assert!(fit_k(&s, &[(0.2, 1.0)]).is_err());
    }
}
