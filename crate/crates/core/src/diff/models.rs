//! Policy and critic wrappers around [`Mlp`].

use std::ops::Range;

use super::net::{argmax, softmax, Mlp, OutputHead};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Discrete policy `π(a | o)`: a net with a fixed-temperature softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    net: Mlp,
    temperature: f64,
}

impl PolicyNet {
    pub fn new(net: Mlp) -> Result<Self> {
        match net.spec().head {
            OutputHead::Softmax { temperature } => Ok(PolicyNet { net, temperature }),
            OutputHead::Linear => Err(Error::InvalidNet("policy needs a softmax head".into())),
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn into_net(self) -> Mlp {
        self.net
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_width()
    }

    pub fn action_count(&self) -> usize {
        self.net.output_width()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn probs<S: Scalar>(&self, o: &[S]) -> Result<Vec<S>> {
        let trace = self.net.trace(o)?;
        Ok(softmax(trace.output(), self.temperature))
    }

    /// Greedy action; ties resolve to the lowest index.
    pub fn greedy(&self, o: &[f64]) -> Result<usize> {
        Ok(argmax(&self.net.raw_output(o)?))
    }
}

/// Centralized critic `Q(s, a_1, …, a_n)` over the concatenated input
/// `(s, a_1, …, a_n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticNet {
    net: Mlp,
    state_dim: usize,
    action_slices: Vec<Range<usize>>,
}

impl CriticNet {
    pub fn new(net: Mlp, state_dim: usize, action_dims: &[usize]) -> Result<Self> {
        if net.spec().head != OutputHead::Linear {
            return Err(Error::InvalidNet("critic needs a linear head".into()));
        }
        if net.output_width() != 1 {
            return Err(Error::dim("critic output", 1, net.output_width()));
        }
        let total = state_dim + action_dims.iter().sum::<usize>();
        if net.input_width() != total {
            return Err(Error::dim("critic input", total, net.input_width()));
        }
        let mut offset = state_dim;
        let action_slices = action_dims
            .iter()
            .map(|&d| {
                let r = offset..offset + d;
                offset += d;
                r
            })
            .collect();
        Ok(CriticNet {
            net,
            state_dim,
            action_slices,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn agent_count(&self) -> usize {
        self.action_slices.len()
    }

    pub fn action_dims(&self) -> Vec<usize> {
        self.action_slices.iter().map(|r| r.len()).collect()
    }

    pub fn action_slice(&self, j: usize) -> Result<Range<usize>> {
        self.action_slices
            .get(j)
            .cloned()
            .ok_or(Error::dim("critic action slice", self.action_slices.len(), j))
    }

    /// Concatenates `(s, a_1, …, a_n)` after checking every width.
    pub fn input(&self, s: &[f64], a_joint: &[Vec<f64>]) -> Result<Vec<f64>> {
        if s.len() != self.state_dim {
            return Err(Error::dim("critic state", self.state_dim, s.len()));
        }
        if a_joint.len() != self.action_slices.len() {
            return Err(Error::dim("joint action", self.action_slices.len(), a_joint.len()));
        }
        let mut x = Vec::with_capacity(self.net.input_width());
        x.extend_from_slice(s);
        for (a, r) in a_joint.iter().zip(&self.action_slices) {
            if a.len() != r.len() {
                return Err(Error::dim("agent action", r.len(), a.len()));
            }
            x.extend_from_slice(a);
        }
        Ok(x)
    }

    pub fn q_of_input<S: Scalar>(&self, x: &[S]) -> Result<S> {
        Ok(self.net.trace(x)?.output()[0])
    }

    pub fn q(&self, s: &[f64], a_joint: &[Vec<f64>]) -> Result<f64> {
        self.q_of_input(&self.input(s, a_joint)?)
    }
}

/// Critic `Q = −½·scale·‖a_j − center‖²` that ignores the state and every
/// other agent; an exact quadratic built from a square-activation layer.
pub fn quadratic_action_critic(
    state_dim: usize,
    action_dims: &[usize],
    j: usize,
    center: &[f64],
    scale: f64,
) -> Result<CriticNet> {
    use super::net::{Activation, NetSpec, ParamVector};
    let d = *action_dims
        .get(j)
        .ok_or(Error::dim("agent index", action_dims.len(), j))?;
    if center.len() != d {
        return Err(Error::dim("quadratic center", d, center.len()));
    }
    let input = state_dim + action_dims.iter().sum::<usize>();
    let offset = state_dim + action_dims[..j].iter().sum::<usize>();
    let spec = NetSpec::new(vec![input, d, 1], vec![Activation::Square], OutputHead::Linear)?;
    let mut params = ParamVector::zeros(&spec)?;
    for k in 0..d {
        params.set_weight(0, k, offset + k, 1.0);
        params.set_bias(0, k, -center[k]);
        params.set_weight(1, 0, k, -0.5 * scale);
    }
    CriticNet::new(Mlp::new(spec, params)?, state_dim, action_dims)
}
