//! Cooperative navigation: `n` double-integrator particles, `L` landmarks,
//! shared reward `−Σ_l min_i ‖p_i − l‖`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{clamp2, move_vector, uniform_pair, EnvConfig, EnvState};

pub(super) fn reset(config: &EnvConfig, landmarks: usize, seed: u64, rng: &mut ChaCha8Rng) -> EnvState {
    let b = config.world_bounds;
    let targets = (0..landmarks).map(|_| uniform_pair(rng, 0.8 * b)).collect();
    let positions = (0..config.n).map(|_| uniform_pair(rng, b)).collect();
    EnvState {
        t: 0,
        positions,
        velocities: vec![[0.0; 2]; config.n],
        targets,
        push: Vec::new(),
        seed,
        rng_counter: 0,
    }
}

pub(super) fn advance(config: &EnvConfig, state: &mut EnvState, actions: &[Vec<f64>], rng: &mut ChaCha8Rng) -> f64 {
    let keep = 1.0 - config.damping;
    for i in 0..config.n {
        let f = move_vector(&actions[i]);
        let w = noise(rng, config.noise);
        let v = &mut state.velocities[i];
        for c in 0..2 {
            v[c] = keep * v[c] + config.dt * config.sensitivity * f[c];
        }
        let p = state.positions[i];
        let moved = [p[0] + config.dt * v[0] + w[0], p[1] + config.dt * v[1] + w[1]];
        state.positions[i] = clamp2(moved, config.world_bounds);
    }
    reward(state)
}

fn noise(rng: &mut ChaCha8Rng, half: f64) -> [f64; 2] {
    if half == 0.0 {
        [0.0, 0.0]
    } else {
        [rng.random_range(-half..=half), rng.random_range(-half..=half)]
    }
}

pub(super) fn reward(state: &EnvState) -> f64 {
    -state
        .targets
        .iter()
        .map(|l| {
            state
                .positions
                .iter()
                .map(|p| ((p[0] - l[0]).powi(2) + (p[1] - l[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
}

/// `[v_i, p_i, (l_k − p_i)_k, (p_j − p_i)_{j≠i}]`.
pub(super) fn observe(config: &EnvConfig, state: &EnvState, i: usize) -> Vec<f64> {
    let p = state.positions[i];
    let mut o = Vec::with_capacity(config.obs_dim());
    o.extend_from_slice(&state.velocities[i]);
    o.extend_from_slice(&p);
    for l in &state.targets {
        o.push(l[0] - p[0]);
        o.push(l[1] - p[1]);
    }
    for (j, q) in state.positions.iter().enumerate() {
        if j != i {
            o.push(q[0] - p[0]);
            o.push(q[1] - p[1]);
        }
    }
    o
}
