//! Post-hoc probe critics for value-only training pipelines: a small
//! action-value model regressed on frozen rollouts and used only for
//! attribution.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::Adam;
use crate::diff::{Activation, CriticNet, Mlp, NetSpec, OutputHead, ParamVector};
use crate::episode::{AgentId, Episode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    /// `r_t + γ Q̃(s_{t+1}, a_{t+1})`, refitted `td_iterations` times.
    Td,
    /// Discounted return to the end of the episode.
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub target: TargetKind,
    pub gamma: f64,
    /// Hidden widths; empty gives a linear critic fitted in closed form.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub learning_rate: f64,
    pub td_iterations: usize,
    /// Ridge term of the closed-form linear fit.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for ProbeFit {
    fn default() -> Self {
        ProbeFit {
            target: TargetKind::Td,
            gamma: 0.95,
            hidden: vec![32],
            activation: Activation::Tanh,
            epochs: 400,
            learning_rate: 3e-3,
            td_iterations: 5,
            ridge: 1e-10,
            seed: 0,
        }
    }
}

struct Sample {
    x: Vec<f64>,
    reward: f64,
    /// Index of the next sample in the same episode.
    next: Option<usize>,
}

fn samples(episodes: &[Episode]) -> Vec<Sample> {
    let mut out = Vec::new();
    for e in episodes {
        let base = out.len();
        let len = e.steps.len();
        for (k, step) in e.steps.iter().enumerate() {
            let mut x = step.global_state.clone();
            for a in &step.actions {
                x.extend_from_slice(a);
            }
            out.push(Sample {
                x,
                reward: step.reward,
                next: (k + 1 < len).then_some(base + k + 1),
            });
        }
    }
    out
}

fn monte_carlo(samples: &[Sample], gamma: f64) -> Vec<f64> {
    let mut g = vec![0.0; samples.len()];
    for k in (0..samples.len()).rev() {
        g[k] = samples[k].reward + samples[k].next.map_or(0.0, |nx| gamma * g[nx]);
    }
    g
}

/// Fits `Q̃_i(s, a_1..a_n)` for `agent` on frozen rollouts.
pub fn fit_probe_critic(episodes: &[Episode], agent: AgentId, fit: &ProbeFit) -> Result<CriticNet> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::InsufficientData("probe critic needs at least one episode".into()))?;
    if first.steps.is_empty() {
        return Err(Error::InsufficientData("probe critic needs non-empty episodes".into()));
    }
    if !(fit.gamma >= 0.0 && fit.gamma <= 1.0) {
        return Err(Error::InvalidConfig("probe gamma must lie in [0, 1]".into()));
    }
    if agent.0 >= first.n {
        return Err(Error::dim("agent index", first.n, agent.0));
    }
    let s_dim = first.steps[0].global_state.len();
    let dims: Vec<usize> = first.steps[0].actions.iter().map(Vec::len).collect();
    let data = samples(episodes);
    let width = s_dim + dims.iter().sum::<usize>();
    if data.iter().any(|s| s.x.len() != width) {
        return Err(Error::MalformedEpisode(
            "inconsistent state/action widths across episodes".into(),
        ));
    }
    let mut widths = vec![width];
    widths.extend(&fit.hidden);
    widths.push(1);
    let spec = NetSpec::uniform(widths, fit.activation, OutputHead::Linear)?;
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    let mut params = ParamVector::glorot(&spec, &mut rng)?;
    // zero output layer: the untrained probe predicts 0
    let last = spec.layer_count() - 1;
    let layout = params.layout()[last].clone();
    for k in layout.weights.chain(layout.biases) {
        params.values_mut()[k] = 0.0;
    }
    let mut net = Mlp::new(spec, params)?;

    let rounds = match fit.target {
        TargetKind::MonteCarlo => 1,
        TargetKind::Td => fit.td_iterations.max(1),
    };
    for _ in 0..rounds {
        let targets = match fit.target {
            TargetKind::MonteCarlo => monte_carlo(&data, fit.gamma),
            TargetKind::Td => data
                .iter()
                .map(|s| {
                    let boot = match s.next {
                        Some(nx) if fit.gamma > 0.0 => fit.gamma * net.raw_output(&data[nx].x)?[0],
                        _ => 0.0,
                    };
                    Ok(s.reward + boot)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if fit.hidden.is_empty() {
            fit_linear(&mut net, &data, &targets, fit.ridge)?;
        } else {
            fit_gradient(&mut net, &data, &targets, fit)?;
        }
    }
    CriticNet::new(net, s_dim, &dims)
}

/// Closed-form ridge regression of a single linear layer.
fn fit_linear(net: &mut Mlp, data: &[Sample], targets: &[f64], ridge: f64) -> Result<()> {
    let m = data.len();
    let w = data[0].x.len();
    let x = DMatrix::from_fn(m, w + 1, |r, c| if c < w { data[r].x[c] } else { 1.0 });
    let y = DVector::from_column_slice(targets);
    let mut gram = x.transpose() * &x;
    let scale = gram.diagonal().max().max(1.0);
    for d in 0..w + 1 {
        gram[(d, d)] += ridge * scale;
    }
    let rhs = x.transpose() * y;
    let coef = gram
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InsufficientData("probe design matrix is singular".into()))?;
    let params = net.params_mut();
    for c in 0..w {
        params.set_weight(0, 0, c, coef[c]);
    }
    params.set_bias(0, 0, coef[w]);
    Ok(())
}

fn fit_gradient(net: &mut Mlp, data: &[Sample], targets: &[f64], fit: &ProbeFit) -> Result<()> {
    let mut adam = Adam::new(net.params().len(), fit.learning_rate);
    let inv = 1.0 / data.len() as f64;
    for _ in 0..fit.epochs {
        let mut grad = vec![0.0; net.params().len()];
        let mut loss = 0.0;
        for (s, &y) in data.iter().zip(targets) {
            let trace = net.trace(&s.x)?;
            let err = trace.output()[0] - y;
            loss += 0.5 * err * err * inv;
            net.backprop(&trace, vec![err * inv], Some(&mut grad));
        }
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged("probe critic loss is not finite".into()));
        }
        adam.step(net.params_mut(), &grad, 1.0);
    }
    Ok(())
}
