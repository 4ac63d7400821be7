//! Shallow tanh networks and exact reverse-mode gradients of the one-step
//! loss through the unrolled stages of an explicit Runge-Kutta scheme.
//!
//! The network is `N(x) = W_L σ(… σ(W_1 x + b_1) …) + b_L` with `σ = tanh`
//! on hidden layers. For a scheme with tableau `(a, b)` the stages are
//! `z_i = x + h Σ_j a_ij k_j`, `k_i = N(z_i)` and the step is
//! `x + h Σ_i b_i k_i`. The backward pass walks the stages in reverse, so
//! the adjoint of `k_i` collects `h b_i` times the output adjoint plus
//! `h a_li` times the adjoint of every later stage input `z_l`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::integrators::{self, SchemeKind};

/// Weights and biases of a dense network. `weights[i]` is a row-major
/// `layer_dims[i+1] × layer_dims[i]` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// When false the biases are held at zero (the purely linear model).
    #[serde(default = "default_true")]
    pub with_bias: bool,
}

fn default_true() -> bool {
    true
}

/// Loss and its gradient, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub loss: f64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientRecord {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            loss: 0.0,
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Gradient entries in the order of [`MlpParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }

    pub fn scale(&mut self, s: f64) {
        self.loss *= s;
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.to_flat().iter().all(|g| g.is_finite())
    }
}

fn flatten(weights: &[Vec<f64>], biases: &[Vec<f64>]) -> Vec<f64> {
    weights
        .iter()
        .flatten()
        .chain(biases.iter().flatten())
        .copied()
        .collect()
}

impl MlpParams {
    /// All-zero parameters for the given layer widths.
    pub fn zeros(layer_dims: &[usize], with_bias: bool) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::invalid(
                "layer_dims needs at least two positive entries",
            ));
        }
        let weights = layer_dims
            .windows(2)
            .map(|w| vec![0.0; w[0] * w[1]])
            .collect();
        let biases = layer_dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            with_bias,
        })
    }

    /// A single bias-free layer `x ↦ W x`.
    pub fn linear(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(&[dim, dim], false)?;
        if matrix.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: matrix.len(),
            });
        }
        p.weights[0] = matrix;
        Ok(p)
    }

    /// Glorot-uniform weights `U(±sqrt(6 / (fan_in + fan_out)))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        layer_dims: &[usize],
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(layer_dims, with_bias)?;
        for (w, dims) in p.weights.iter_mut().zip(layer_dims.windows(2)) {
            let limit = (6.0 / (dims[0] + dims[1]) as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Weights of every layer followed by biases of every layer.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for x in v.iter_mut() {
                *x = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Checks shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(Error::invalid(
                "layer_dims needs at least two positive entries",
            ));
        }
        if self.weights.len() != self.layer_dims.len() - 1
            || self.biases.len() != self.weights.len()
        {
            return Err(Error::invalid(
                "one weight matrix and bias vector per layer",
            ));
        }
        for (i, dims) in self.layer_dims.windows(2).enumerate() {
            if self.weights[i].len() != dims[0] * dims[1] {
                return Err(Error::DimensionMismatch {
                    expected: dims[0] * dims[1],
                    got: self.weights[i].len(),
                });
            }
            if self.biases[i].len() != dims[1] {
                return Err(Error::DimensionMismatch {
                    expected: dims[1],
                    got: self.biases[i].len(),
                });
            }
        }
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(())
    }

    /// Forward pass keeping every layer's output; `acts[0]` is the input.
    fn forward_tape(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let last = self.n_layers() - 1;
        let mut acts = Vec::with_capacity(self.n_layers() + 1);
        acts.push(x.to_vec());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = &acts[l];
            let n_in = input.len();
            let mut out: Vec<f64> = w
                .chunks_exact(n_in)
                .zip(b)
                .map(|(row, bias)| bias + row.iter().zip(input).map(|(a, v)| a * v).sum::<f64>())
                .collect();
            if l < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        acts
    }

    /// Pulls `upstream = ∂L/∂N(x)` back through a recorded forward pass,
    /// adding parameter gradients into `grad` and returning `∂L/∂x`.
    fn backward_tape(
        &self,
        acts: &[Vec<f64>],
        upstream: &[f64],
        grad: &mut GradientRecord,
    ) -> Vec<f64> {
        let last = self.n_layers() - 1;
        let mut delta = upstream.to_vec();
        for l in (0..self.n_layers()).rev() {
            if l < last {
                for (d, y) in delta.iter_mut().zip(&acts[l + 1]) {
                    *d *= 1.0 - y * y;
                }
            }
            let input = &acts[l];
            let n_in = input.len();
            for (r, d) in delta.iter().enumerate() {
                grad.biases[l][r] += d;
                let row = &mut grad.weights[l][r * n_in..(r + 1) * n_in];
                for (g, v) in row.iter_mut().zip(input) {
                    *g += d * v;
                }
            }
            let mut prev = vec![0.0; n_in];
            for (row, d) in self.weights[l].chunks_exact(n_in).zip(&delta) {
                for (p, a) in prev.iter_mut().zip(row) {
                    *p += a * d;
                }
            }
            delta = prev;
        }
        delta
    }
}

impl VectorField for MlpParams {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let acts = self.forward_tape(x);
        out.copy_from_slice(acts.last().expect("at least one layer"));
    }
}

/// Evaluates `N(x; θ)`.
pub fn mlp_eval(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            got: x.len(),
        });
    }
    Ok(params.eval(x))
}

fn check_pair(params: &MlpParams, h: f64, x_n: &[f64], x_target: &[f64]) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!(
            "step size must be positive, got {h}"
        )));
    }
    if params.input_dim() != params.output_dim() {
        return Err(Error::invalid("network must map the state space to itself"));
    }
    for v in [x_n, x_target] {
        if v.len() != params.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: params.input_dim(),
                got: v.len(),
            });
        }
    }
    Ok(())
}

/// Adds the gradient of `‖step(x_n) − x_target‖²` into `grad` and returns
/// the loss. `grad.loss` is not touched.
pub(crate) fn accumulate_one_step(
    params: &MlpParams,
    scheme: SchemeKind,
    h: f64,
    x_n: &[f64],
    x_target: &[f64],
    grad: &mut GradientRecord,
) -> Result<f64> {
    let tab = scheme.tableau();
    let s = tab.b.len();
    let mut tapes: Vec<Vec<Vec<f64>>> = Vec::with_capacity(s);
    let mut out = x_n.to_vec();
    for (i, row) in tab.a.iter().enumerate() {
        let mut z = x_n.to_vec();
        for (j, &a) in row.iter().enumerate() {
            if a != 0.0 {
                let k = tapes[j].last().expect("tape has output");
                for (zv, kv) in z.iter_mut().zip(k) {
                    *zv += h * a * kv;
                }
            }
        }
        let tape = params.forward_tape(&z);
        let k = tape.last().expect("tape has output");
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: 0, stage: i });
        }
        if tab.b[i] != 0.0 {
            for (o, kv) in out.iter_mut().zip(k) {
                *o += h * tab.b[i] * kv;
            }
        }
        tapes.push(tape);
    }

    let resid: Vec<f64> = out.iter().zip(x_target).map(|(o, t)| o - t).collect();
    let loss: f64 = resid.iter().map(|r| r * r).sum();
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0, stage: s });
    }
    let out_bar: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();

    // z_bar[l] is the adjoint of the input to stage l
    let mut z_bar: Vec<Vec<f64>> = vec![Vec::new(); s];
    for i in (0..s).rev() {
        let mut k_bar: Vec<f64> = out_bar.iter().map(|o| h * tab.b[i] * o).collect();
        #[allow(clippy::needless_range_loop)]
        for l in (i + 1)..s {
            let a = tab.a[l][i];
            if a != 0.0 {
                for (kb, zb) in k_bar.iter_mut().zip(&z_bar[l]) {
                    *kb += h * a * zb;
                }
            }
        }
        z_bar[i] = params.backward_tape(&tapes[i], &k_bar, grad);
    }
    Ok(loss)
}

/// Loss `‖step(scheme, N_θ, x_n, h) − x_target‖²` and its exact gradient with
/// respect to every weight and bias.
pub fn one_step_loss_grad(
    params: &MlpParams,
    scheme: SchemeKind,
    h: f64,
    x_n: &[f64],
    x_target: &[f64],
) -> Result<GradientRecord> {
    check_pair(params, h, x_n, x_target)?;
    let mut grad = GradientRecord::zeros_like(params);
    grad.loss = accumulate_one_step(params, scheme, h, x_n, x_target, &mut grad)?;
    Ok(grad)
}

/// The one-step loss evaluated through [`integrators::step`].
pub fn one_step_loss(
    params: &MlpParams,
    scheme: SchemeKind,
    h: f64,
    x_n: &[f64],
    x_target: &[f64],
) -> Result<f64> {
    let next = integrators::step(scheme, params, x_n, h)?;
    Ok(next
        .iter()
        .zip(x_target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Central-difference gradient of the one-step loss, one coordinate at a time.
pub fn finite_diff_grad(
    params: &MlpParams,
    scheme: SchemeKind,
    h: f64,
    x_n: &[f64],
    x_target: &[f64],
    probe: f64,
) -> Result<GradientRecord> {
    check_pair(params, h, x_n, x_target)?;
    if !(probe > 0.0) {
        return Err(Error::invalid("probe step must be positive"));
    }
    let base = params.to_flat();
    let mut work = params.clone();
    let mut flat_grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut shifted = base.clone();
        shifted[i] = base[i] + probe;
        work.set_flat(&shifted)?;
        let up = one_step_loss(&work, scheme, h, x_n, x_target)?;
        shifted[i] = base[i] - probe;
        work.set_flat(&shifted)?;
        let down = one_step_loss(&work, scheme, h, x_n, x_target)?;
        flat_grad.push((up - down) / (2.0 * probe));
    }
    let mut grad = GradientRecord::zeros_like(params);
    grad.loss = one_step_loss(params, scheme, h, x_n, x_target)?;
    let mut it = flat_grad.into_iter();
    for v in grad.weights.iter_mut().chain(grad.biases.iter_mut()) {
        for g in v.iter_mut() {
            *g = it.next().expect("one entry per parameter");
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_layer_eval() {
        let p = MlpParams::linear(2, vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        assert_eq!(mlp_eval(&p, &[1.0, 0.0]).unwrap(), vec![0.0, -1.0]);
    }

    #[test]
    fn zero_params_give_zero() {
        let p = MlpParams::zeros(&[3, 7, 3], true).unwrap();
        assert_eq!(mlp_eval(&p, &[0.3, -2.0, 5.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn two_layer_matches_hand_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = MlpParams::glorot(&[2, 4, 2], true, &mut rng).unwrap();
        for b in p.biases.iter_mut().flatten() {
            *b = rng.random_range(-0.5..0.5);
        }
        let x = [0.4, -1.1];
        let (w1, b1, w2, b2) = (&p.weights[0], &p.biases[0], &p.weights[1], &p.biases[1]);
        let mut hidden = [0.0; 4];
        for r in 0..4 {
            hidden[r] = (w1[2 * r] * x[0] + w1[2 * r + 1] * x[1] + b1[r]).tanh();
        }
        let mut expected = [0.0; 2];
        for r in 0..2 {
            expected[r] = b2[r] + (0..4).map(|c| w2[4 * r + c] * hidden[c]).sum::<f64>();
        }
        let got = mlp_eval(&p, &x).unwrap();
        for r in 0..2 {
            assert!((got[r] - expected[r]).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_rejects_wrong_dim() {
        let p = MlpParams::zeros(&[2, 2], false).unwrap();
        assert!(matches!(
            mlp_eval(&p, &[1.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn scalar_euler_gradient_symbolic() {
        let (lambda, h, x, w) = (-1.0f64, 0.1, 1.7, -0.8);
        let p = MlpParams::linear(1, vec![w]).unwrap();
        let target = (lambda * h).exp() * x;
        let g = one_step_loss_grad(&p, SchemeKind::Euler, h, &[x], &[target]).unwrap();
        let r = (lambda * h).exp() - 1.0 - w * h;
        assert!((g.loss - x * x * r * r).abs() < 1e-15);
        assert!((g.weights[0][0] - (-2.0 * h * x * x * r)).abs() < 1e-14);
        let fd = finite_diff_grad(&p, SchemeKind::Euler, h, &[x], &[target], 1e-6).unwrap();
        assert!((fd.weights[0][0] - g.weights[0][0]).abs() < 1e-8);
    }

    #[test]
    fn target_at_current_step_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = MlpParams::glorot(&[2, 6, 2], true, &mut rng).unwrap();
        for s in SchemeKind::ALL {
            let x = [0.3, -0.2];
            let target = integrators::step(s, &p, &x, 0.1).unwrap();
            let g = one_step_loss_grad(&p, s, 0.1, &x, &target).unwrap();
            assert_eq!(g.loss, 0.0);
            assert!(g.to_flat().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn zero_input_gives_zero_first_layer_weight_grads() {
        // With x = 0 and zero biases every stage input is 0 for the Euler
        // step, so the first-layer weights see zero activations.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MlpParams::glorot(&[2, 3, 2], true, &mut rng).unwrap();
        let fd =
            finite_diff_grad(&p, SchemeKind::Euler, 0.1, &[0.0, 0.0], &[0.5, 0.5], 1e-6).unwrap();
        let g = one_step_loss_grad(&p, SchemeKind::Euler, 0.1, &[0.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!(fd.weights[0].iter().all(|v| v.abs() < 1e-9));
        assert!(g.weights[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn divergent_stage_is_reported() {
        let p = MlpParams::linear(1, vec![1e308]).unwrap();
        let r = one_step_loss_grad(&p, SchemeKind::Rk4, 10.0, &[10.0], &[0.0]);
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MlpParams::glorot(&[2, 5, 2], true, &mut rng).unwrap();
        let mut q = MlpParams::zeros(&[2, 5, 2], true).unwrap();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&[1.0]).is_err());
        assert!(p.validate().is_ok());
    }
}
