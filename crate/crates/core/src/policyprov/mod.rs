//! Differentiable policies and critics: scripted controllers written
//! directly as small nets, a lightweight centralized actor-critic trainer,
//! and post-hoc probe critics fitted on frozen rollouts.

mod probe;
mod train;

pub use probe::{fit_probe_critic, ProbeFit, TargetKind};
pub use train::{random_policy_baseline, train_lite, TrainHyper, Trained};

use serde::{Deserialize, Serialize};

use crate::diff::{Activation, CriticNet, Mlp, NetSpec, OutputHead, ParamVector, PolicyNet};
use crate::env::{EnvConfig, EnvKind, ACTION_COUNT};
use crate::episode::AgentId;
use crate::error::{Error, Result};

/// Shape parameters of the scripted controllers and critics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptedGains {
    /// Softmax temperature of every scripted policy.
    pub temperature: f64,
    /// Slope of the tanh position-error units (chain).
    pub kappa: f64,
    /// Logit scale of the move actions.
    pub beta: f64,
    /// Logit of the no-op action.
    pub noop: f64,
    /// Velocity feedback in the spread controller.
    pub damping_gain: f64,
    /// Spread controller: weight of the no-op boost near a teammate.
    pub hesitation: f64,
    /// Critic curvature scale.
    pub critic_scale: f64,
    /// Spread critic: squared-distance radius of the proximity zone and
    /// penalty weight.
    pub proximity_radius: f64,
    pub proximity_weight: f64,
}

impl Default for ScriptedGains {
    fn default() -> Self {
        ScriptedGains {
            temperature: 1.0,
            kappa: 10.0,
            beta: 4.0,
            noop: 0.0,
            damping_gain: 0.3,
            hesitation: 6.0,
            critic_scale: 1.0,
            proximity_radius: 0.0225,
            proximity_weight: 10.0,
        }
    }
}

impl ScriptedGains {
    /// Chain defaults: soft position units with a wide no-op deadband, so
    /// curvature grows as an agent is pushed off its goal instead of
    /// saturating.
    pub fn chain() -> Self {
        ScriptedGains {
            kappa: 1.0,
            beta: 4.0,
            noop: 0.5,
            ..Default::default()
        }
    }

    pub fn for_env(config: &EnvConfig) -> Self {
        match config.kind {
            EnvKind::Chain { .. } => Self::chain(),
            EnvKind::Spread { .. } => Self::default(),
        }
    }
}

/// Scripted policy with the environment's default gains.
pub fn scripted_policy(config: &EnvConfig, agent: AgentId) -> Result<PolicyNet> {
    scripted_policy_with(config, agent, &ScriptedGains::for_env(config))
}

/// Scripted critic `Q_i` with the environment's default gains.
pub fn scripted_critic(config: &EnvConfig, agent: AgentId) -> Result<CriticNet> {
    scripted_critic_with(config, agent, &ScriptedGains::for_env(config))
}

pub fn scripted_policies(config: &EnvConfig, gains: &ScriptedGains) -> Result<Vec<PolicyNet>> {
    (0..config.n)
        .map(|i| scripted_policy_with(config, AgentId(i), gains))
        .collect()
}

pub fn scripted_critics(config: &EnvConfig, gains: &ScriptedGains) -> Result<Vec<CriticNet>> {
    (0..config.n)
        .map(|i| scripted_critic_with(config, AgentId(i), gains))
        .collect()
}

fn check_agent(config: &EnvConfig, agent: AgentId) -> Result<()> {
    config.validate()?;
    if agent.0 >= config.n {
        return Err(Error::dim("agent index", config.n, agent.0));
    }
    Ok(())
}

/// Move logits from a desired planar direction held in hidden units:
/// `+x ← +ux`, `−x ← −ux`, `+y ← +uy`, `−y ← −uy`.
fn set_move_row(p: &mut ParamVector, unit: usize, axis: usize, w: f64) {
    let (plus, minus) = if axis == 0 { (1, 2) } else { (3, 4) };
    p.set_weight(1, plus, unit, w);
    p.set_weight(1, minus, unit, -w);
}

/// Greedy action moves the agent toward its target: its goal (chain) or
/// landmark `i mod L` (spread). In spread, a close teammate makes the agent
/// hesitate.
pub fn scripted_policy_with(config: &EnvConfig, agent: AgentId, gains: &ScriptedGains) -> Result<PolicyNet> {
    check_agent(config, agent)?;
    let head = OutputHead::Softmax {
        temperature: gains.temperature,
    };
    let obs = config.obs_dim();
    match &config.kind {
        EnvKind::Chain { .. } => {
            // observation: [p, p − g, push]; hidden: tanh(κ (p − g))
            let spec = NetSpec::new(vec![obs, 2, ACTION_COUNT], vec![Activation::Tanh], head)?;
            let mut p = ParamVector::zeros(&spec)?;
            for axis in 0..2 {
                p.set_weight(0, axis, 2 + axis, gains.kappa);
                set_move_row(&mut p, axis, axis, -gains.beta);
            }
            p.set_bias(1, 0, gains.noop);
            PolicyNet::new(Mlp::new(spec, p)?)
        }
        EnvKind::Spread { landmarks } => spread_policy(config, *landmarks, agent, gains, head),
    }
}

/// Spread controller as a `[Square, Relu, Square]` net. Goal steering is
/// exactly linear in the damped offset `e = (l − p) − γv`, carried through
/// the nonlinear layers as `((e + 1)² − (e − 1)²)/4`. Each teammate adds
/// `w·relu(1 − u/r)²` to the no-op logit, `u` the squared separation, so
/// teammates only matter inside radius `√r`.
fn spread_policy(
    config: &EnvConfig,
    landmarks: usize,
    agent: AgentId,
    gains: &ScriptedGains,
    head: OutputHead,
) -> Result<PolicyNet> {
    const C: f64 = 1.0;
    const B: f64 = 10.0;
    let obs = config.obs_dim();
    let mates = config.n - 1;
    let lm = agent.0 % landmarks;
    let r = gains.proximity_radius;
    let spec = NetSpec::new(
        vec![obs, 4 + 2 * mates, 2 + mates, 4 + mates, ACTION_COUNT],
        vec![Activation::Square, Activation::Relu, Activation::Square],
        head,
    )?;
    let mut p = ParamVector::zeros(&spec)?;
    for axis in 0..2 {
        for (k, shift) in [(0, C), (1, -C)] {
            // (e_axis ± C)²
            let row = 2 * axis + k;
            p.set_weight(0, row, 4 + 2 * lm + axis, 1.0);
            p.set_weight(0, row, axis, -gains.damping_gain);
            p.set_bias(0, row, shift);
            // (e_axis + B ± C)² − B-shift
            p.set_weight(2, row, axis, 1.0);
            p.set_bias(2, row, -B + shift);
        }
        // e_axis + B
        p.set_weight(1, axis, 2 * axis, 1.0 / (4.0 * C));
        p.set_weight(1, axis, 2 * axis + 1, -1.0 / (4.0 * C));
        p.set_bias(1, axis, B);
        let (plus, minus) = if axis == 0 { (1, 2) } else { (3, 4) };
        let w = gains.beta / (4.0 * C);
        p.set_weight(3, plus, 2 * axis, w);
        p.set_weight(3, plus, 2 * axis + 1, -w);
        p.set_weight(3, minus, 2 * axis, -w);
        p.set_weight(3, minus, 2 * axis + 1, w);
    }
    for m in 0..mates {
        for axis in 0..2 {
            let row = 4 + 2 * m + axis;
            p.set_weight(0, row, 4 + 2 * landmarks + 2 * m + axis, 1.0);
            p.set_weight(1, 2 + m, row, -1.0 / r);
        }
        p.set_bias(1, 2 + m, 1.0);
        p.set_weight(2, 4 + m, 2 + m, 1.0);
        p.set_weight(3, 0, 4 + m, gains.hesitation);
    }
    p.set_bias(3, 0, gains.noop);
    PolicyNet::new(Mlp::new(spec, p)?)
}

/// Scripted per-agent critic over `(s, a_1..a_n)`.
///
/// Chain: `Q_i = −c‖x‖²` with `x` the one-step predicted goal offset of
/// agent `i` including the coupled pushes, so `Q_i` reacts to `a_j` exactly
/// when `coupling[i][j] ≠ 0`.
///
/// Spread: a goal term on the predicted offset of agent `i` to its landmark
/// plus, per teammate, a penalty `w·relu(1 − u/r)²` on the predicted squared
/// separation `u`, which is flat (zero leverage) outside radius `r`.
pub fn scripted_critic_with(config: &EnvConfig, agent: AgentId, gains: &ScriptedGains) -> Result<CriticNet> {
    check_agent(config, agent)?;
    let n = config.n;
    let s_dim = config.state_dim();
    let input = s_dim + n * ACTION_COUNT;
    let act = |j: usize, c: usize| s_dim + ACTION_COUNT * j + c;
    // column weights of (M a)_axis
    let mv = |axis: usize| {
        if axis == 0 {
            [(1, 1.0), (2, -1.0)]
        } else {
            [(3, 1.0), (4, -1.0)]
        }
    };
    let i = agent.0;
    match &config.kind {
        EnvKind::Chain { coupling } => {
            let speed = config.dt * config.sensitivity;
            let spec = NetSpec::new(vec![input, 2, 1], vec![Activation::Square], OutputHead::Linear)?;
            let mut p = ParamVector::zeros(&spec)?;
            for axis in 0..2 {
                p.set_weight(0, axis, 2 * i + axis, 1.0);
                p.set_weight(0, axis, 2 * n + 2 * i + axis, -1.0);
                for (c, sign) in mv(axis) {
                    p.set_weight(0, axis, act(i, c), sign * speed);
                    for (j, &cij) in coupling[i].iter().enumerate() {
                        if cij != 0.0 {
                            p.set_weight(0, axis, act(j, c), sign * speed * cij);
                        }
                    }
                }
                p.set_weight(1, 0, axis, -gains.critic_scale);
            }
            CriticNet::new(Mlp::new(spec, p)?, s_dim, &vec![ACTION_COUNT; n])
        }
        EnvKind::Spread { landmarks } => {
            // state: positions (2n), velocities (2n), landmarks (2L)
            let keep = 1.0 - config.damping;
            let push = config.dt * config.dt * config.sensitivity;
            let lm = i % landmarks;
            let mates: Vec<usize> = (0..n).filter(|&m| m != i).collect();
            // layer 0 (square): predicted offsets, 2 for the goal and 2 per mate
            // layer 1 (relu): goal distance², and 1 − u/r per mate
            // layer 2 (square) then linear
            let h0 = 2 + 2 * mates.len();
            let h1 = 1 + mates.len();
            let spec = NetSpec::new(
                vec![input, h0, h1, h1, 1],
                vec![Activation::Square, Activation::Relu, Activation::Square],
                OutputHead::Linear,
            )?;
            let mut p = ParamVector::zeros(&spec)?;
            let predicted = |p: &mut ParamVector, row: usize, who: usize, axis: usize, sign: f64| {
                p.set_weight(0, row, 2 * who + axis, sign);
                p.set_weight(0, row, 2 * n + 2 * who + axis, sign * config.dt * keep);
                for (c, m) in mv(axis) {
                    p.set_weight(0, row, act(who, c), sign * m * push);
                }
            };
            for axis in 0..2 {
                predicted(&mut p, axis, i, axis, 1.0);
                p.set_weight(0, axis, 4 * n + 2 * lm + axis, -1.0);
                p.set_weight(1, 0, axis, 1.0);
            }
            let r = gains.proximity_radius;
            for (q, &m) in mates.iter().enumerate() {
                for axis in 0..2 {
                    let row = 2 + 2 * q + axis;
                    predicted(&mut p, row, i, axis, 1.0);
                    predicted(&mut p, row, m, axis, -1.0);
                    p.set_weight(1, 1 + q, row, -1.0 / r);
                }
                p.set_bias(1, 1 + q, 1.0);
            }
            for u in 0..h1 {
                p.set_weight(2, u, u, 1.0);
            }
            // goal term enters squared (quartic in distance); keep it mild
            p.set_weight(3, 0, 0, -gains.critic_scale);
            for q in 0..mates.len() {
                p.set_weight(3, 0, 1 + q, -gains.proximity_weight);
            }
            CriticNet::new(Mlp::new(spec, p)?, s_dim, &vec![ACTION_COUNT; n])
        }
    }
}

#[cfg(test)]
mod tests;
