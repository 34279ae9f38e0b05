//! Chain-coupled diagnostic task. Each agent holds station at its own goal;
//! agent `j`'s action also pushes every agent `k > j` with weight
//! `coupling[k][j]`, so the ground-truth influence graph is known and
//! acyclic. Reward is `−Σ_k ‖p_k − g_k‖`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{clamp2, move_vector, uniform_pair, EnvConfig, EnvState, ACTION_COUNT};

pub(super) fn reset(config: &EnvConfig, seed: u64, rng: &mut ChaCha8Rng) -> EnvState {
    let b = config.world_bounds;
    let targets: Vec<[f64; 2]> = (0..config.n).map(|_| uniform_pair(rng, 0.5 * b)).collect();
    let positions = targets
        .iter()
        .map(|g| {
            let d = uniform_pair(rng, config.init_jitter);
            [g[0] + d[0], g[1] + d[1]]
        })
        .collect();
    EnvState {
        t: 0,
        positions,
        velocities: vec![[0.0; 2]; config.n],
        targets,
        push: vec![vec![0.0; ACTION_COUNT]; config.n],
        seed,
        rng_counter: 0,
    }
}

pub(super) fn advance(
    config: &EnvConfig,
    coupling: &[Vec<f64>],
    state: &mut EnvState,
    actions: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let speed = config.dt * config.sensitivity;
    for k in 0..config.n {
        let mut push = vec![0.0; ACTION_COUNT];
        for (j, a) in actions.iter().enumerate() {
            let c = coupling[k][j];
            if c != 0.0 {
                for (p, aj) in push.iter_mut().zip(a) {
                    *p += c * aj;
                }
            }
        }
        let own = move_vector(&actions[k]);
        let pushed = move_vector(&push);
        let w = if config.noise > 0.0 {
            [
                rng.random_range(-config.noise..=config.noise),
                rng.random_range(-config.noise..=config.noise),
            ]
        } else {
            [0.0, 0.0]
        };
        let p = state.positions[k];
        let moved = [
            p[0] + speed * (own[0] + pushed[0]) + w[0],
            p[1] + speed * (own[1] + pushed[1]) + w[1],
        ];
        state.positions[k] = clamp2(moved, config.world_bounds);
        state.push[k] = push;
    }
    reward(state)
}

pub(super) fn reward(state: &EnvState) -> f64 {
    -state
        .positions
        .iter()
        .zip(&state.targets)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .sum::<f64>()
}

/// `[p_k, p_k − g_k, push_k]`.
pub(super) fn observe(state: &EnvState, k: usize) -> Vec<f64> {
    let p = state.positions[k];
    let g = state.targets[k];
    let mut o = Vec::with_capacity(4 + ACTION_COUNT);
    o.extend_from_slice(&p);
    o.push(p[0] - g[0]);
    o.push(p[1] - g[1]);
    o.extend_from_slice(&state.push[k]);
    o
}
