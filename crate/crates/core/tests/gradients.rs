use continuity::diffengine::{finite_diff_grad, mlp_eval, one_step_loss_grad, MlpParams};
use continuity::integrators::step;
use continuity::SchemeKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    params: MlpParams,
    scheme: SchemeKind,
    h: f64,
    x: Vec<f64>,
    y: Vec<f64>,
}

fn instances(n: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let dim = rng.random_range(1..=4);
            let hidden = rng.random_range(1..=10);
            let mut params = MlpParams::glorot(&[dim, hidden, dim], true, &mut rng).unwrap();
            for b in params.biases.iter_mut().flatten() {
                *b = rng.random_range(-1.0..1.0);
            }
            Instance {
                params,
                scheme: SchemeKind::ALL[i % 3],
                h: rng.random_range(0.01..0.3),
                x: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                y: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            }
        })
        .collect()
}

#[test]
fn reverse_mode_matches_central_differences() {
    let mut worst: f64 = 0.0;
    for inst in instances(200, 11) {
        let g = one_step_loss_grad(&inst.params, inst.scheme, inst.h, &inst.x, &inst.y).unwrap();
        let fd =
            finite_diff_grad(&inst.params, inst.scheme, inst.h, &inst.x, &inst.y, 1e-6).unwrap();
        for (a, b) in g.to_flat().iter().zip(fd.to_flat()) {
            worst = worst.max((a - b).abs() / (1.0 + b.abs()));
        }
    }
    assert!(worst < 1e-5, "worst {worst:e}");
}

#[test]
fn loss_matches_integrator_step() {
    for inst in instances(50, 12) {
        let g = one_step_loss_grad(&inst.params, inst.scheme, inst.h, &inst.x, &inst.y).unwrap();
        let next = step(inst.scheme, &inst.params, &inst.x, inst.h).unwrap();
        let loss: f64 = next.iter().zip(&inst.y).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((g.loss - loss).abs() <= 1e-12 * (1.0 + loss));
    }
}

#[test]
fn gradients_are_bitwise_deterministic() {
    for inst in instances(20, 13) {
        let a = one_step_loss_grad(&inst.params, inst.scheme, inst.h, &inst.x, &inst.y).unwrap();
        let b = one_step_loss_grad(&inst.params, inst.scheme, inst.h, &inst.x, &inst.y).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
}

#[test]
fn forward_pass_matches_hand_evaluation() {
    for inst in instances(30, 14) {
        let p = &inst.params;
        let (d, hdim) = (p.layer_dims[0], p.layer_dims[1]);
        let hidden: Vec<f64> = (0..hdim)
            .map(|j| {
                let s: f64 = (0..d).map(|i| p.weights[0][j * d + i] * inst.x[i]).sum();
                (s + p.biases[0][j]).tanh()
            })
            .collect();
        let want: Vec<f64> = (0..d)
            .map(|k| {
                (0..hdim)
                    .map(|j| p.weights[1][k * hdim + j] * hidden[j])
                    .sum::<f64>()
                    + p.biases[1][k]
            })
            .collect();
        let got = mlp_eval(p, &inst.x).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
