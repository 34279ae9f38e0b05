//! Deterministic desk-scale cooperative environments.
//!
//! Both tasks share the same five discrete actions
//! (`noop, +x, −x, +y, −y`); agents act with relaxed probability vectors and
//! the applied force is the expected move direction. Process noise, when
//! enabled, comes from a counter-based ChaCha stream keyed by
//! `(seed, step)`, so trajectories are reproducible across machines and
//! independent of the actions taken.

mod chain;
mod spread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{policy_forward, CriticNet, PolicyNet};
use crate::episode::{AgentId, Episode, FailurePlan, TimeStep};
use crate::error::{Error, Result};
use crate::failure::{worst_action, AttackPlan};

/// Number of discrete actions: noop, +x, −x, +y, −y.
pub const ACTION_COUNT: usize = 5;

/// Planar move direction of a relaxed action.
pub fn move_vector(a: &[f64]) -> [f64; 2] {
    [a[1] - a[2], a[3] - a[4]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env_id", rename_all = "lowercase")]
pub enum EnvKind {
    Spread {
        landmarks: usize,
    },
    /// `coupling[k][j]` is how strongly agent `j`'s action pushes agent `k`;
    /// strictly lower-triangular.
    Chain {
        coupling: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    #[serde(flatten)]
    pub kind: EnvKind,
    pub n: usize,
    pub horizon: usize,
    pub dt: f64,
    pub world_bounds: f64,
    /// Velocity damping per step (spread only).
    #[serde(default = "defaults::damping")]
    pub damping: f64,
    /// Acceleration (spread) or speed (chain) per unit action.
    #[serde(default = "defaults::sensitivity")]
    pub sensitivity: f64,
    /// Half-width of the uniform per-step position disturbance.
    #[serde(default)]
    pub noise: f64,
    /// Half-width of the initial offset of each chain agent from its goal.
    #[serde(default = "defaults::init_jitter")]
    pub init_jitter: f64,
}

mod defaults {
    pub fn damping() -> f64 {
        0.25
    }
    pub fn sensitivity() -> f64 {
        1.0
    }
    pub fn init_jitter() -> f64 {
        0.05
    }
}

impl EnvConfig {
    /// Simple-spread style defaults for `n` agents and `n` landmarks.
    pub fn spread(n: usize) -> Self {
        EnvConfig {
            kind: EnvKind::Spread { landmarks: n },
            n,
            horizon: 25,
            dt: 0.1,
            world_bounds: 1.0,
            damping: 0.25,
            sensitivity: 5.0,
            noise: 0.0,
            init_jitter: 0.0,
        }
    }

    /// Chain task with the given coupling matrix.
    pub fn chain(coupling: Vec<Vec<f64>>) -> Self {
        EnvConfig {
            n: coupling.len(),
            kind: EnvKind::Chain { coupling },
            horizon: 30,
            dt: 0.1,
            world_bounds: 2.0,
            damping: 0.0,
            sensitivity: 1.0,
            noise: 0.01,
            init_jitter: 0.03,
        }
    }

    pub fn env_id(&self) -> &'static str {
        match self.kind {
            EnvKind::Spread { .. } => "spread",
            EnvKind::Chain { .. } => "chain",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive".into());
        }
        if !(self.world_bounds > 0.0 && self.world_bounds.is_finite()) {
            return bad("world_bounds must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return bad("damping must lie in [0, 1]".into());
        }
        if self.noise < 0.0 || self.init_jitter < 0.0 {
            return bad("noise amplitudes must be non-negative".into());
        }
        match &self.kind {
            EnvKind::Spread { landmarks } => {
                if *landmarks == 0 {
                    return bad("landmark_count must be positive".into());
                }
            }
            EnvKind::Chain { coupling } => {
                if coupling.len() != self.n || coupling.iter().any(|r| r.len() != self.n) {
                    return bad(format!("coupling must be {n}x{n}", n = self.n));
                }
                for (k, row) in coupling.iter().enumerate() {
                    for (j, &c) in row.iter().enumerate() {
                        if !c.is_finite() {
                            return bad("coupling entries must be finite".into());
                        }
                        if j >= k && c != 0.0 {
                            return bad(format!("coupling[{k}][{j}] must be zero (strictly lower-triangular)"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        match &self.kind {
            EnvKind::Spread { landmarks } => 4 + 2 * landmarks + 2 * (self.n - 1),
            EnvKind::Chain { .. } => 4 + ACTION_COUNT,
        }
    }

    pub fn state_dim(&self) -> usize {
        match &self.kind {
            EnvKind::Spread { landmarks } => 4 * self.n + 2 * landmarks,
            EnvKind::Chain { .. } => 4 * self.n,
        }
    }

    pub fn action_dim(&self) -> usize {
        ACTION_COUNT
    }
}

/// Full simulator state.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub t: usize,
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    /// Landmarks (spread) or per-agent goals (chain).
    pub targets: Vec<[f64; 2]>,
    /// Coupled push each chain agent received on the last step.
    pub push: Vec<Vec<f64>>,
    pub seed: u64,
    pub rng_counter: u64,
}

impl EnvState {
    /// Disturbance generator for the next step; advances the counter.
    fn noise_stream(&mut self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.rng_counter);
        self.rng_counter += 1;
        rng
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: EnvState,
    pub observations: Vec<Vec<f64>>,
    pub reward: f64,
}

pub fn reset(config: &EnvConfig, seed: u64) -> Result<(EnvState, Vec<Vec<f64>>)> {
    config.validate()?;
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    // stream 0 is reserved for initial conditions, steps use streams 1..
    init.set_stream(u64::MAX);
    let state = match &config.kind {
        EnvKind::Spread { landmarks } => spread::reset(config, *landmarks, seed, &mut init),
        EnvKind::Chain { .. } => chain::reset(config, seed, &mut init),
    };
    let obs = observations(config, &state);
    Ok((state, obs))
}

pub fn step(config: &EnvConfig, state: &EnvState, joint_action: &[Vec<f64>]) -> Result<StepOutcome> {
    if joint_action.len() != config.n {
        return Err(Error::dim("joint action", config.n, joint_action.len()));
    }
    if let Some(a) = joint_action.iter().find(|a| a.len() != ACTION_COUNT) {
        return Err(Error::dim("agent action", ACTION_COUNT, a.len()));
    }
    let mut next = state.clone();
    let mut rng = next.noise_stream();
    let reward = match &config.kind {
        EnvKind::Spread { .. } => spread::advance(config, &mut next, joint_action, &mut rng),
        EnvKind::Chain { coupling } => chain::advance(config, coupling, &mut next, joint_action, &mut rng),
    };
    next.t += 1;
    let observations = observations(config, &next);
    Ok(StepOutcome {
        state: next,
        observations,
        reward,
    })
}

pub fn observations(config: &EnvConfig, state: &EnvState) -> Vec<Vec<f64>> {
    (0..config.n)
        .map(|i| match config.kind {
            EnvKind::Spread { .. } => spread::observe(config, state, i),
            EnvKind::Chain { .. } => chain::observe(state, i),
        })
        .collect()
}

/// Global state `s` fed to centralized critics.
pub fn global_state(config: &EnvConfig, state: &EnvState) -> Vec<f64> {
    let mut s = Vec::with_capacity(config.state_dim());
    for p in &state.positions {
        s.extend_from_slice(p);
    }
    match config.kind {
        EnvKind::Spread { .. } => {
            for v in &state.velocities {
                s.extend_from_slice(v);
            }
        }
        EnvKind::Chain { .. } => {}
    }
    for l in &state.targets {
        s.extend_from_slice(l);
    }
    s
}

fn uniform_pair<R: Rng>(rng: &mut R, half: f64) -> [f64; 2] {
    if half == 0.0 {
        return [0.0, 0.0];
    }
    [rng.random_range(-half..=half), rng.random_range(-half..=half)]
}

fn clamp2(p: [f64; 2], b: f64) -> [f64; 2] {
    [p[0].clamp(-b, b), p[1].clamp(-b, b)]
}

/// An action override over a window: the worst action of `plan.agent`
/// according to `critic`, blended with the policy action by
/// `plan.strength`.
#[derive(Clone, Copy, Debug)]
pub struct Attack<'a> {
    pub plan: &'a AttackPlan,
    pub critic: &'a CriticNet,
}

/// Runs one episode. Actions inside the attack window are replaced by the
/// worst action; everything else comes from the policies.
pub fn rollout(config: &EnvConfig, seed: u64, policies: &[PolicyNet], attack: Option<Attack<'_>>) -> Result<Episode> {
    rollout_with(config, seed, policies, attack.as_slice())
}

/// Like [`rollout`], with any number of attacks (later ones win on overlap).
pub fn rollout_with(config: &EnvConfig, seed: u64, policies: &[PolicyNet], attacks: &[Attack<'_>]) -> Result<Episode> {
    config.validate()?;
    if policies.len() != config.n {
        return Err(Error::dim("policies", config.n, policies.len()));
    }
    for attack in attacks {
        attack.plan.validate(config)?;
    }
    let (mut state, mut obs) = reset(config, seed)?;
    let mut steps = Vec::with_capacity(config.horizon);
    for t in 0..config.horizon {
        let s = global_state(config, &state);
        let mut actions = policies
            .iter()
            .zip(&obs)
            .map(|(p, o)| policy_forward(p, o))
            .collect::<Result<Vec<_>>>()?;
        let mut attacked = Vec::new();
        for attack in attacks {
            let plan = attack.plan;
            if (plan.window.0..=plan.window.1).contains(&t) {
                let j = plan.agent.0;
                let worst = worst_action(attack.critic, &s, &actions, plan.agent)?;
                let w = plan.strength;
                actions[j] = actions[j]
                    .iter()
                    .zip(&worst)
                    .map(|(p, q)| (1.0 - w) * p + w * q)
                    .collect();
                if !attacked.contains(&plan.agent) {
                    attacked.push(plan.agent);
                }
            }
        }
        attacked.sort();
        let out = step(config, &state, &actions)?;
        steps.push(TimeStep {
            t,
            global_state: s,
            observations: obs,
            actions,
            reward: out.reward,
            attacked_agents: attacked,
        });
        state = out.state;
        obs = out.observations;
    }
    let failure_plan = attacks.first().map(|a| FailurePlan {
        source: a.plan.agent,
        window: a.plan.window,
        kind: a.plan.kind,
        strength: a.plan.strength,
        label: a.plan.label.clone(),
    });
    Ok(Episode {
        env_id: config.env_id().to_string(),
        n: config.n,
        seed,
        failure_plan,
        steps,
    })
}

/// Agents that can be affected by a perturbation of `j` under the chain
/// topology: every `k` reachable through non-zero couplings.
pub fn downstream_of(coupling: &[Vec<f64>], j: AgentId) -> Vec<AgentId> {
    let n = coupling.len();
    let mut reach = vec![false; n];
    reach[j.0] = true;
    for k in j.0 + 1..n {
        reach[k] = (0..k).any(|m| reach[m] && coupling[k][m] != 0.0);
    }
    (j.0 + 1..n).filter(|&k| reach[k]).map(AgentId).collect()
}
