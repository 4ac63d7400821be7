use continuity::diffengine::{mlp_eval, MlpParams};
use continuity::odenet::{
    as_field, batch_loss_grad, dataset_loss, make_pairs, train, train_from, ModelKind, Pair,
    TrainConfig,
};
use continuity::systems::{reference_trajectory, SystemSpec};
use continuity::theory::{solve_w, taylor_poly};
use continuity::{SchemeKind, Trajectory, VectorField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar_pairs(lambda: f64, dt: f64, n: usize) -> Vec<Pair> {
    let states = (0..n)
        .map(|k| vec![(lambda * dt * k as f64).exp()])
        .collect();
    make_pairs(&[Trajectory::regular(0.0, dt, states).unwrap()]).unwrap()
}

#[test]
fn linear_euler_net_learns_matrix_exponential() {
    let traj = reference_trajectory(SystemSpec::harmonic(), &[1.0, 0.0], 0.1, 200).unwrap();
    let pairs = make_pairs(&[traj]).unwrap();
    let cfg = TrainConfig {
        scheme: SchemeKind::Euler,
        model_kind: ModelKind::Linear,
        ..TrainConfig::default()
    };
    let m = train(&pairs, &cfg).unwrap();
    let want = [-0.049958, 0.998334, -0.998334, -0.049958];
    for (w, e) in m.params.weights[0].iter().zip(want) {
        assert!((w - e).abs() < 1e-3, "{:?}", m.params.weights);
    }
    assert!(m.final_loss <= m.loss_history[0]);
}

#[test]
fn scalar_optimum_solves_the_root_equation() {
    let (lambda, dt) = (-1.0, 0.1);
    let pairs = scalar_pairs(lambda, dt, 40);
    for scheme in SchemeKind::ALL {
        let cfg = TrainConfig {
            scheme,
            model_kind: ModelKind::Linear,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            epochs: 3000,
            ..TrainConfig::default()
        };
        let m = train(&pairs, &cfg).unwrap();
        let w = m.params.weights[0][0];
        let residual = ((lambda * dt).exp() - taylor_poly(dt * w, scheme.order())).abs();
        assert!(residual < 1e-4, "{scheme}: {residual}");
        let root = solve_w(lambda, dt, scheme.order()).unwrap();
        assert!((w - root).abs() < 1e-3, "{scheme}: {w} vs {root}");
    }
}

#[test]
fn training_is_bit_deterministic() {
    let traj = reference_trajectory(SystemSpec::pendulum(), &[0.8, 0.0], 0.1, 80).unwrap();
    let pairs = make_pairs(&[traj]).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 16,
        model_kind: ModelKind::Shallow { hidden_dim: 8 },
        ..TrainConfig::default()
    };
    let a = train(&pairs, &cfg).unwrap();
    let b = train(&pairs, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.final_loss <= a.loss_history[0]);
}

#[test]
fn thread_count_does_not_change_results() {
    let traj = reference_trajectory(SystemSpec::pendulum(), &[0.8, 0.0], 0.05, 300).unwrap();
    let pairs = make_pairs(&[traj]).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        model_kind: ModelKind::Shallow { hidden_dim: 6 },
        ..TrainConfig::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&pairs, &cfg).unwrap())
    };
    assert_eq!(run(1), run(3));
}

/// Plain Adam written out independently of the library optimizer.
fn reference_adam(pairs: &[Pair], cfg: &TrainConfig, init: &MlpParams) -> Vec<f64> {
    let refs: Vec<&Pair> = pairs.iter().collect();
    let mut params = init.clone();
    let mut theta = params.to_flat();
    let (mut m, mut v) = (vec![0.0; theta.len()], vec![0.0; theta.len()]);
    let mut losses = Vec::new();
    for t in 1..=cfg.epochs as i32 {
        let g = batch_loss_grad(&params, cfg.scheme, &refs).unwrap();
        losses.push(g.loss);
        for (i, gi) in g.to_flat().into_iter().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            theta[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
        }
        params.set_flat(&theta).unwrap();
    }
    losses
}

#[test]
fn zero_decay_full_batch_is_plain_adam() {
    let traj = reference_trajectory(SystemSpec::lotka_volterra(), &[1.0, 0.5], 0.1, 40).unwrap();
    let pairs = make_pairs(&[traj]).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        weight_decay: 0.0,
        learning_rate: 1e-2,
        scheme: SchemeKind::Midpoint,
        model_kind: ModelKind::Shallow { hidden_dim: 5 },
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let init = MlpParams::glorot(&[2, 5, 2], true, &mut rng).unwrap();
    let model = train_from(&pairs, &cfg, init.clone(), &mut rng).unwrap();
    let reference = reference_adam(&pairs, &cfg, &init);
    assert_eq!(model.loss_history.len(), reference.len());
    for (a, b) in model.loss_history.iter().zip(&reference) {
        // the two updates group the same products differently
        assert!((a - b).abs() <= 1e-13 * b, "{a} vs {b}");
    }
}

#[test]
fn pairs_generated_by_the_model_leave_it_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let init = MlpParams::glorot(&[2, 4, 2], true, &mut rng).unwrap();
    let xs = [[0.3, -0.2], [1.0, 0.5], [-0.7, 0.9]];
    let pairs: Vec<Pair> = xs
        .iter()
        .map(|x| Pair {
            x: x.to_vec(),
            next: continuity::integrators::step(SchemeKind::Rk4, &init, x, 0.1).unwrap(),
            dt: 0.1,
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 10,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let m = train_from(&pairs, &cfg, init.clone(), &mut rng).unwrap();
    assert_eq!(m.final_loss, 0.0);
    assert_eq!(m.params, init);
}

#[test]
fn trained_field_matches_mlp_eval() {
    let pairs = scalar_pairs(-0.5, 0.1, 10);
    let cfg = TrainConfig {
        epochs: 5,
        model_kind: ModelKind::Shallow { hidden_dim: 4 },
        ..TrainConfig::default()
    };
    let m = train(&pairs, &cfg).unwrap();
    for x in [-1.0, 0.0, 0.3, 2.0] {
        assert_eq!(as_field(&m).eval(&[x]), mlp_eval(&m.params, &[x]).unwrap());
        assert_eq!(m.eval(&[x]), mlp_eval(&m.params, &[x]).unwrap());
    }

    let lin = MlpParams::linear(2, vec![0.0, 1.0, -1.0, 0.0]).unwrap();
    assert_eq!(lin.eval(&[1.0, 0.0]), vec![0.0, -1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let zero_bias = MlpParams::glorot(&[3, 7, 3], true, &mut rng).unwrap();
    assert_eq!(zero_bias.eval(&[0.0; 3]), vec![0.0; 3]);
}

#[test]
fn dataset_loss_matches_history_start() {
    let pairs = scalar_pairs(-1.0, 0.2, 12);
    let cfg = TrainConfig {
        epochs: 3,
        model_kind: ModelKind::Shallow { hidden_dim: 3 },
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = MlpParams::glorot(&[1, 3, 1], true, &mut rng).unwrap();
    let m = train(&pairs, &cfg).unwrap();
    let l0 = dataset_loss(&init, cfg.scheme, &pairs).unwrap();
    assert!((m.loss_history[0] - l0).abs() <= 1e-15 * l0.max(1.0));
}
