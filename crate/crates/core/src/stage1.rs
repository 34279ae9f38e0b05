//! Local instability detection from the Taylor remainder of the action
//! commitment cost.
//!
//! For each agent and step the greedy action is re-armed as the target, the
//! cost is probed along a few small directions `η`, and the absolute
//! remainder `|J(o+η) − J(o) − ∇J(o)ᵀη|` is aggregated into one signal. A
//! per-agent profile of that signal on fault-free rollouts sets the
//! threshold `μ + kσ`; the first crossing is the agent's detection time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{value_grad, ActionCost, Objective, PolicyNet};
use crate::episode::{AgentId, DetectionReport, Episode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionScheme {
    RandomUnit,
    GradientAligned,
    /// `m − 1` random unit directions plus the gradient-aligned one.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epsilon: f64,
    pub directions_per_step: usize,
    pub direction_scheme: DirectionScheme,
    pub aggregator: Aggregator,
    /// Mixed with the episode seed to key the probe directions.
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epsilon: 0.01,
            directions_per_step: 4,
            direction_scheme: DirectionScheme::Mixed,
            aggregator: Aggregator::Max,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig("probe epsilon must be positive".into()));
        }
        if self.directions_per_step == 0 {
            return Err(Error::InvalidConfig("directions_per_step must be positive".into()));
        }
        Ok(())
    }

    /// Rejects an `epsilon` above a tenth of the median observation norm.
    pub fn check_scale<'a>(&self, observations: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
        let mut norms: Vec<f64> = observations.into_iter().map(norm).collect();
        if norms.is_empty() {
            return Ok(());
        }
        norms.sort_by(f64::total_cmp);
        let median = norms[norms.len() / 2];
        if self.epsilon > 0.1 * median {
            return Err(Error::InvalidConfig(format!(
                "probe epsilon {} exceeds 0.1 x median observation norm {median}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `f(x+η) − f(x) − ∇f(x)ᵀη` for any twice-differentiable objective.
pub fn taylor_remainder<F: Objective>(f: &F, x: &[f64], eta: &[f64]) -> Result<f64> {
    if eta.len() != x.len() {
        return Err(Error::dim("probe direction", x.len(), eta.len()));
    }
    if eta.iter().all(|&e| e == 0.0) {
        return Ok(0.0);
    }
    let (f0, g) = value_grad(f, x)?;
    remainder_from(f, x, f0, &g, eta)
}

fn remainder_from<F: Objective>(f: &F, x: &[f64], f0: f64, g: &[f64], eta: &[f64]) -> Result<f64> {
    let moved: Vec<f64> = x.iter().zip(eta).map(|(a, b)| a + b).collect();
    let f1 = f.value(&moved)?;
    let lin: f64 = g.iter().zip(eta).map(|(a, b)| a * b).sum();
    let r = f1 - f0 - lin;
    if !r.is_finite() {
        return Err(Error::NonFiniteResult("taylor remainder"));
    }
    Ok(r)
}

/// Remainder of the action commitment cost with target `tau` (one-hot).
pub fn taylor_error(policy: &PolicyNet, o: &[f64], tau: &[f64], eta: &[f64]) -> Result<f64> {
    let target = one_hot_index(tau).ok_or_else(|| Error::InvalidConfig("target must be one-hot".into()))?;
    taylor_remainder(&ActionCost::new(policy, target)?, o, eta)
}

fn one_hot_index(tau: &[f64]) -> Option<usize> {
    let mut hot = None;
    for (k, &v) in tau.iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(k);
        } else if v != 0.0 {
            return None;
        }
    }
    hot
}

/// Probe directions of length `epsilon` for one step.
pub fn probe_directions<R: Rng + ?Sized>(grad: &[f64], config: &ProbeConfig, rng: &mut R) -> Vec<Vec<f64>> {
    let d = grad.len();
    let m = config.directions_per_step;
    let eps = config.epsilon;
    let gn = norm(grad);
    let aligned = || -> Vec<f64> {
        if gn > 0.0 {
            grad.iter().map(|g| eps * g / gn).collect()
        } else {
            // flat cost: fall back to the first axis
            let mut v = vec![0.0; d];
            v[0] = eps;
            v
        }
    };
    let random = |rng: &mut R| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = norm(&v);
            if n > 1e-12 {
                return v.into_iter().map(|x| eps * x / n).collect();
            }
        }
    };
    match config.direction_scheme {
        DirectionScheme::GradientAligned => vec![aligned(); m],
        DirectionScheme::RandomUnit => (0..m).map(|_| random(rng)).collect(),
        DirectionScheme::Mixed => {
            let mut dirs = vec![aligned()];
            dirs.extend((1..m).map(|_| random(rng)));
            dirs
        }
    }
}

fn aggregate(values: &[f64], aggregator: Aggregator) -> f64 {
    match aggregator {
        Aggregator::Max => values.iter().copied().fold(0.0, f64::max),
        Aggregator::Mean => values.iter().sum::<f64>() / values.len() as f64,
    }
}

/// Aggregated `|remainder|` over the given directions with the greedy
/// target at `o`.
pub fn signal_along<F: Objective>(f: &F, o: &[f64], directions: &[Vec<f64>], aggregator: Aggregator) -> Result<f64> {
    let (f0, g) = value_grad(f, o)?;
    let values = directions
        .iter()
        .map(|eta| remainder_from(f, o, f0, &g, eta).map(f64::abs))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&values, aggregator))
}

/// Stage-1 signal of one agent at one observation.
pub fn agent_signal<R: Rng + ?Sized>(policy: &PolicyNet, o: &[f64], config: &ProbeConfig, rng: &mut R) -> Result<f64> {
    let cost = ActionCost::greedy_at(policy, o)?;
    objective_signal(&cost, o, config, rng)
}

/// [`agent_signal`] for an arbitrary objective (used with analytic heads).
pub fn objective_signal<F: Objective, R: Rng + ?Sized>(
    f: &F,
    o: &[f64],
    config: &ProbeConfig,
    rng: &mut R,
) -> Result<f64> {
    let (_, g) = value_grad(f, o)?;
    let dirs = probe_directions(&g, config, rng);
    signal_along(f, o, &dirs, config.aggregator)
}

/// Probe generator for `(episode seed, agent, step)`, independent of
/// evaluation order.
pub fn probe_rng(config: &ProbeConfig, episode_seed: u64, agent: usize, t: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&config.seed.to_le_bytes());
    key[8..16].copy_from_slice(&episode_seed.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(((agent as u64) << 32) | t as u64);
    rng
}

/// Signal series `[agent][t]` of an episode.
pub fn signal_series(episode: &Episode, policies: &[PolicyNet], config: &ProbeConfig) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    if policies.len() != episode.n {
        return Err(Error::dim("policies", episode.n, policies.len()));
    }
    (0..episode.n)
        .map(|i| {
            episode
                .steps
                .iter()
                .map(|step| {
                    let mut rng = probe_rng(config, episode.seed, i, step.t);
                    agent_signal(&policies[i], &step.observations[i], config, &mut rng)
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub samples: usize,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityProfile {
    pub k: f64,
    pub episodes: usize,
    pub agents: Vec<AgentProfile>,
}

impl StabilityProfile {
    /// Profile from pooled per-agent signal samples.
    pub fn from_samples(samples: &[Vec<f64>], k: f64, episodes: usize) -> Result<Self> {
        let agents = samples
            .iter()
            .map(|xs| {
                if xs.is_empty() {
                    return Err(Error::InsufficientData("agent has no signal samples".into()));
                }
                let n = xs.len() as f64;
                // shifted by the first sample: exact for constant series
                let x0 = xs[0];
                let mean = x0 + xs.iter().map(|x| x - x0).sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                Ok(AgentProfile {
                    mean,
                    std,
                    samples: xs.len(),
                    threshold: mean + k * std,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StabilityProfile { k, episodes, agents })
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.threshold).collect()
    }

    pub fn means(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.mean).collect()
    }

    /// The same profile with thresholds recomputed for another `k`.
    pub fn with_k(&self, k: f64) -> Self {
        let mut p = self.clone();
        p.k = k;
        for a in &mut p.agents {
            a.threshold = a.mean + k * a.std;
        }
        p
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            reason: e.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSettings {
    pub k: f64,
    pub min_episodes: usize,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        ProfileSettings {
            k: 4.0,
            min_episodes: 50,
        }
    }
}

/// Baseline profile over fault-free episodes. Episodes are scored in
/// parallel; pooling happens in episode order.
pub fn build_profile(
    episodes: &[Episode],
    policies: &[PolicyNet],
    probe: &ProbeConfig,
    settings: &ProfileSettings,
) -> Result<StabilityProfile> {
    probe.validate()?;
    if episodes.is_empty() || episodes.len() < settings.min_episodes {
        return Err(Error::InsufficientData(format!(
            "{} fault-free episodes, need at least {}",
            episodes.len(),
            settings.min_episodes.max(1)
        )));
    }
    let n = policies.len();
    probe.check_scale(
        episodes
            .iter()
            .flat_map(|e| e.steps.iter().flat_map(|s| s.observations.iter().map(Vec::as_slice))),
    )?;
    let per_episode = episodes
        .par_iter()
        .map(|e| signal_series(e, policies, probe))
        .collect::<Result<Vec<_>>>()?;
    let mut pooled = vec![Vec::new(); n];
    for series in per_episode {
        for (agent, s) in series.into_iter().enumerate() {
            pooled[agent].extend(s);
        }
    }
    StabilityProfile::from_samples(&pooled, settings.k, episodes.len())
}

/// First threshold crossing per agent and the earliest-detected candidate
/// (lowest index on ties).
pub fn detect_from_signals(signals: &[Vec<f64>], thresholds: &[f64]) -> Result<DetectionReport> {
    if signals.len() != thresholds.len() {
        return Err(Error::dim("profile agents", signals.len(), thresholds.len()));
    }
    let times: Vec<Option<usize>> = signals
        .iter()
        .zip(thresholds)
        .map(|(s, &th)| s.iter().position(|&v| v > th))
        .collect();
    let mut candidate: Option<(AgentId, usize)> = None;
    for (i, t) in times.iter().enumerate() {
        if let Some(t) = *t {
            if candidate.is_none_or(|(_, best)| t < best) {
                candidate = Some((AgentId(i), t));
            }
        }
    }
    Ok(DetectionReport {
        detection_times: times,
        thresholds: thresholds.to_vec(),
        stage1_candidate: candidate.map(|c| c.0),
        stage1_time: candidate.map(|c| c.1),
        ..Default::default()
    })
}

/// Stage-1 output: the report plus the signal series it was read from.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1 {
    pub signals: Vec<Vec<f64>>,
    pub report: DetectionReport,
}

pub fn detect(
    episode: &Episode,
    policies: &[PolicyNet],
    profile: &StabilityProfile,
    probe: &ProbeConfig,
) -> Result<Stage1> {
    if profile.agents.len() != episode.n {
        return Err(Error::dim("profile agents", episode.n, profile.agents.len()));
    }
    let signals = signal_series(episode, policies, probe)?;
    let report = detect_from_signals(&signals, &profile.thresholds())?;
    Ok(Stage1 { signals, report })
}

/// `t,agent,signal,threshold` rows, time-major.
pub fn timeline_csv(signals: &[Vec<f64>], thresholds: &[f64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::InvalidConfig(format!("csv: {e}"));
    w.write_record(["t", "agent", "signal", "threshold"]).map_err(io)?;
    let len = signals.iter().map(Vec::len).max().unwrap_or(0);
    for t in 0..len {
        for (i, s) in signals.iter().enumerate() {
            if let Some(v) = s.get(t) {
                w.write_record([t.to_string(), i.to_string(), v.to_string(), thresholds[i].to_string()])
                    .map_err(io)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
