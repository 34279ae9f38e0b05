//! A small centralized-critic actor-critic for desk-scale training runs.
//!
//! Each agent has a softmax policy over its own observation and a critic
//! `Q_i(s, a_1..a_n)` on the global state and the joint relaxed action.
//! Critics regress one-step TD targets from slowly tracking target copies;
//! actors follow `∂Q_i/∂a_i` through the softmax. Transitions live in a
//! fixed-size replay window. Single-threaded and fully seeded.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{softmax, Activation, CriticNet, Mlp, NetSpec, OutputHead, ParamVector, PolicyNet};
use crate::env::{global_state, reset, rollout, step, EnvConfig, ACTION_COUNT};
use crate::error::{Error, Result};

/// Adam over a flat parameter vector.
#[derive(Clone, Debug)]
pub(crate) struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub(crate) fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Descends along `grad` (pass `sign = −1` to ascend).
    pub(crate) fn step(&mut self, params: &mut ParamVector, grad: &[f64], sign: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (k, p) in params.values_mut().iter_mut().enumerate() {
            let g = sign * grad[k];
            self.m[k] = B1 * self.m[k] + (1.0 - B1) * g;
            self.v[k] = B2 * self.v[k] + (1.0 - B2) * g * g;
            *p -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-8);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub episodes: usize,
    pub hidden: usize,
    pub temperature: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub batch: usize,
    pub updates_per_episode: usize,
    pub replay: usize,
    /// Target-network tracking rate.
    pub target_tau: f64,
    /// Probability mass moved onto a random action at every collection step.
    pub exploration: f64,
    /// Held-out episodes for the reward and TD-error report.
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            episodes: 300,
            hidden: 32,
            temperature: 1.0,
            actor_lr: 3e-3,
            critic_lr: 3e-3,
            gamma: 0.9,
            batch: 64,
            updates_per_episode: 10,
            replay: 5000,
            target_tau: 0.05,
            exploration: 0.6,
            eval_episodes: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub policies: Vec<PolicyNet>,
    pub critics: Vec<CriticNet>,
    /// Mean episode return of the trained policies on held-out seeds.
    pub mean_reward: f64,
    /// Same, for uniform-random relaxed policies.
    pub random_reward: f64,
    /// Mean squared one-step TD error of each critic on held-out rollouts.
    pub td_error: Vec<f64>,
}

struct Transition {
    s: Vec<f64>,
    obs: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    reward: f64,
    next_s: Vec<f64>,
    next_obs: Vec<Vec<f64>>,
}

fn uniform_policy(obs_dim: usize, temperature: f64) -> Result<PolicyNet> {
    let spec = NetSpec::new(vec![obs_dim, ACTION_COUNT], vec![], OutputHead::Softmax { temperature })?;
    PolicyNet::new(Mlp::new(spec.clone(), ParamVector::zeros(&spec)?)?)
}

fn mean_return(config: &EnvConfig, policies: &[PolicyNet], seeds: std::ops::Range<u64>) -> Result<f64> {
    let count = (seeds.end - seeds.start).max(1) as f64;
    let mut total = 0.0;
    for seed in seeds {
        total += rollout(config, seed, policies, None)?
            .steps
            .iter()
            .map(|s| s.reward)
            .sum::<f64>();
    }
    Ok(total / count)
}

/// Mean episode return of uniform-random (all-zero logit) policies.
pub fn random_policy_baseline(config: &EnvConfig, episodes: u64, seed: u64) -> Result<f64> {
    let policies = (0..config.n)
        .map(|_| uniform_policy(config.obs_dim(), 1.0))
        .collect::<Result<Vec<_>>>()?;
    mean_return(config, &policies, seed..seed + episodes)
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::TrainingDiverged(format!("{what} became non-finite")))
    }
}

fn rescale_output(critic: &mut CriticNet, hidden: usize, k: f64) {
    let last = critic.net().spec().layer_count() - 1;
    let params = critic.net_mut().params_mut();
    for col in 0..hidden {
        params.set_weight(last, 0, col, params.weight(last, 0, col) * k);
    }
    params.set_bias(last, 0, params.bias(last, 0) * k);
}

pub fn train_lite(config: &EnvConfig, hyper: &TrainHyper) -> Result<Trained> {
    config.validate()?;
    if hyper.batch == 0 || hyper.replay == 0 {
        return Err(Error::InvalidConfig("batch and replay sizes must be positive".into()));
    }
    let n = config.n;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let head = OutputHead::Softmax {
        temperature: hyper.temperature,
    };
    let pspec = NetSpec::new(
        vec![config.obs_dim(), hyper.hidden, ACTION_COUNT],
        vec![Activation::Tanh],
        head,
    )?;
    let cin = config.state_dim() + n * ACTION_COUNT;
    let cspec = NetSpec::uniform(
        vec![cin, hyper.hidden, hyper.hidden, 1],
        Activation::Tanh,
        OutputHead::Linear,
    )?;
    let dims = vec![ACTION_COUNT; n];
    let mut policies = Vec::with_capacity(n);
    let mut critics = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pp = ParamVector::glorot(&pspec, &mut rng)?;
        pp.values_mut().iter_mut().for_each(|v| *v *= 0.5);
        policies.push(PolicyNet::new(Mlp::new(pspec.clone(), pp)?)?);
        let cp = ParamVector::glorot(&cspec, &mut rng)?;
        critics.push(CriticNet::new(Mlp::new(cspec.clone(), cp)?, config.state_dim(), &dims)?);
    }
    let mut targets = critics.clone();
    let mut actor_opt: Vec<Adam> = policies
        .iter()
        .map(|p| Adam::new(p.net().params().len(), hyper.actor_lr))
        .collect();
    let mut critic_opt: Vec<Adam> = critics
        .iter()
        .map(|c| Adam::new(c.net().params().len(), hyper.critic_lr))
        .collect();
    let mut replay: VecDeque<Transition> = VecDeque::with_capacity(hyper.replay);
    let mut scale = 1.0;

    for episode in 0..hyper.episodes {
        // collection
        let seed = hyper.seed.wrapping_mul(0x9E37_79B9).wrapping_add(episode as u64);
        let (mut state, mut obs) = reset(config, seed)?;
        for _ in 0..config.horizon {
            let s = global_state(config, &state);
            let mut actions = Vec::with_capacity(n);
            for (p, o) in policies.iter().zip(&obs) {
                let e = hyper.exploration;
                let k = rng.random_range(0..ACTION_COUNT);
                let a = p.probs(o)?;
                actions.push(
                    a.iter()
                        .enumerate()
                        .map(|(i, v)| (1.0 - e) * v + if i == k { e } else { 0.0 })
                        .collect(),
                );
            }
            let out = step(config, &state, &actions)?;
            if replay.len() == hyper.replay {
                replay.pop_front();
            }
            replay.push_back(Transition {
                s,
                obs,
                actions,
                reward: out.reward,
                next_s: global_state(config, &out.state),
                next_obs: out.observations.clone(),
            });
            state = out.state;
            obs = out.observations;
        }
        if episode == 0 {
            // critics learn returns in units of roughly the first episode's mean step
            // reward; a power of two keeps the conversion exact
            let mean = replay.iter().map(|tr| tr.reward.abs()).sum::<f64>() / replay.len() as f64;
            if mean > 0.0 && mean.is_finite() {
                scale = 2f64.powi(-mean.log2().round() as i32);
                for c in critics.iter_mut().chain(targets.iter_mut()) {
                    rescale_output(c, hyper.hidden, scale);
                }
            }
        }
        // updates
        for _ in 0..hyper.updates_per_episode {
            let batch: Vec<usize> = (0..hyper.batch).map(|_| rng.random_range(0..replay.len())).collect();
            let inv = 1.0 / batch.len() as f64;
            for i in 0..n {
                let mut cgrad = vec![0.0; critics[i].net().params().len()];
                for &b in &batch {
                    let tr = &replay[b];
                    // the time limit is not a terminal state, so always bootstrap
                    let next_a = policies
                        .iter()
                        .zip(&tr.next_obs)
                        .map(|(p, o)| p.probs(o))
                        .collect::<Result<Vec<_>>>()?;
                    let y = scale * tr.reward + hyper.gamma * targets[i].q(&tr.next_s, &next_a)?;
                    let x = critics[i].input(&tr.s, &tr.actions)?;
                    let trace = critics[i].net().trace(&x)?;
                    let err = trace.output()[0] - y;
                    critics[i]
                        .net()
                        .backprop(&trace, vec![err * inv], Some(cgrad.as_mut_slice()));
                }
                check_finite(&cgrad, "critic gradient")?;
                critic_opt[i].step(critics[i].net_mut().params_mut(), &cgrad, 1.0);

                let mut agrad = vec![0.0; policies[i].net().params().len()];
                let slice = critics[i].action_slice(i)?;
                for &b in &batch {
                    let tr = &replay[b];
                    let ptrace = policies[i].net().trace(&tr.obs[i])?;
                    let p = softmax(ptrace.output(), hyper.temperature);
                    let mut joint = tr.actions.clone();
                    joint[i] = p.clone();
                    let x = critics[i].input(&tr.s, &joint)?;
                    let ctrace = critics[i].net().trace(&x)?;
                    let dx = critics[i].net().backprop(&ctrace, vec![1.0], None);
                    let dp = &dx[slice.clone()];
                    let mean: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
                    let dz: Vec<f64> = p
                        .iter()
                        .zip(dp)
                        .map(|(pk, dk)| pk * (dk - mean) * inv / hyper.temperature)
                        .collect();
                    policies[i].net().backprop(&ptrace, dz, Some(agrad.as_mut_slice()));
                }
                check_finite(&agrad, "actor gradient")?;
                actor_opt[i].step(policies[i].net_mut().params_mut(), &agrad, -1.0);
            }
            for (t, c) in targets.iter_mut().zip(&critics) {
                let src = c.net().params().values().to_vec();
                for (tv, sv) in t.net_mut().params_mut().values_mut().iter_mut().zip(src) {
                    *tv += hyper.target_tau * (sv - *tv);
                }
            }
        }
    }
    for p in &policies {
        check_finite(p.net().params().values(), "policy parameters")?;
    }
    // back to reward units
    for c in critics.iter_mut() {
        rescale_output(c, hyper.hidden, 1.0 / scale);
    }

    // held-out report on seeds disjoint from the collection seeds
    let eval_start = u64::MAX / 2 + hyper.seed;
    let eval = eval_start..eval_start + hyper.eval_episodes as u64;
    let mean_reward = mean_return(config, &policies, eval.clone())?;
    let random_reward = random_policy_baseline(config, hyper.eval_episodes as u64, eval_start)?;
    let mut td_error = vec![0.0; n];
    let mut count = 0usize;
    for seed in eval.take(10) {
        let ep = rollout(config, seed, &policies, None)?;
        for (st, nx) in ep.steps.iter().zip(ep.steps.iter().skip(1)) {
            count += 1;
            for (i, c) in critics.iter().enumerate() {
                let boot = hyper.gamma * c.q(&nx.global_state, &nx.actions)?;
                let e = c.q(&st.global_state, &st.actions)? - (st.reward + boot);
                td_error[i] += e * e;
            }
        }
    }
    td_error.iter_mut().for_each(|e| *e /= count.max(1) as f64);
    Ok(Trained {
        policies,
        critics,
        mean_reward,
        random_reward,
        td_error,
    })
}
