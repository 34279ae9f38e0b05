//! Cross-agent critic sensitivities and traceback of the Stage-1 candidate.
//!
//! For an ordered pair `(j→i)` the critic cost `L = −Q_i` is differentiated
//! in agent `j`'s action: `g = ∂L/∂a_j`, `H = ∂²L/∂a_j²`. `G = ‖g‖` is the
//! first-order leverage and `D = gᵀHg` says whether a push along `g`
//! accelerates (`D > 0`) or saturates. The traceback walks from the Stage-1
//! candidate to the upstream agent whose baseline-relative remainder,
//! gated to accelerating steps, is largest, until that influence becomes
//! negligible or would close a cycle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{critic_blocks, CriticNet};
use crate::episode::{AgentId, DetectionReport, Episode, Influence, StopReason, TracebackRound};
use crate::error::{Error, Result};
use crate::stage1::StabilityProfile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSensitivity {
    pub j: AgentId,
    pub i: AgentId,
    pub t: usize,
    pub g: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    /// `‖g‖₂`.
    pub big_g: f64,
    /// `gᵀHg`.
    pub d: f64,
    /// `D / ‖g‖²`, absent when `g = 0`.
    pub kappa: Option<f64>,
}

impl PairSensitivity {
    pub fn from_blocks(j: AgentId, i: AgentId, t: usize, g: Vec<f64>, h: Vec<Vec<f64>>) -> Self {
        let g2: f64 = g.iter().map(|x| x * x).sum();
        let hg: Vec<f64> = h
            .iter()
            .map(|row| row.iter().zip(&g).map(|(a, b)| a * b).sum())
            .collect();
        let d: f64 = g.iter().zip(&hg).map(|(a, b)| a * b).sum();
        let kappa = (g2 > 0.0).then(|| d / g2);
        PairSensitivity {
            j,
            i,
            t,
            g,
            h,
            big_g: g2.sqrt(),
            d,
            kappa,
        }
    }

    /// `|D − G²κ|`, zero when `κ` is undefined.
    pub fn rayleigh_gap(&self) -> f64 {
        self.kappa.map_or(0.0, |k| (self.d - self.big_g * self.big_g * k).abs())
    }
}

/// One record per step of `episode` for the pair `(j→i)`, from agent `i`'s
/// critic.
pub fn pair_sensitivities(
    critic_i: &CriticNet,
    episode: &Episode,
    i: AgentId,
    j: AgentId,
) -> Result<Vec<PairSensitivity>> {
    episode
        .steps
        .iter()
        .map(|step| {
            let (g, h) = critic_blocks(critic_i, &step.global_state, &step.actions, j.0)?;
            Ok(PairSensitivity::from_blocks(j, i, step.t, g, h))
        })
        .collect()
}

/// All ordered pairs `(j→i)`, `j ≠ i`, indexed `[i][j]`; the diagonal is
/// empty. Pairs run in parallel.
pub fn all_pair_sensitivities(critics: &[CriticNet], episode: &Episode) -> Result<Vec<Vec<Vec<PairSensitivity>>>> {
    let n = episode.n;
    if critics.len() != n {
        return Err(Error::dim("critics", n, critics.len()));
    }
    let flat = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i == j {
                Ok(Vec::new())
            } else {
                pair_sensitivities(&critics[i], episode, AgentId(i), AgentId(j))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = flat.into_iter();
    Ok((0..n).map(|_| it.by_ref().take(n).collect()).collect())
}

/// Recency weight `ω(Δ)`, `Δ = t1 − t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Omega {
    /// `exp(−λΔ)`.
    Exponential {
        lambda: f64,
    },
    /// `1 − Δ/(span+1)`, floored at `1/(span+1)`.
    Linear {
        span: usize,
    },
    Constant,
}

impl Omega {
    /// Exponential decay reaching one half at `Δ = k`.
    pub fn half_at(k: usize) -> Self {
        Omega::Exponential {
            lambda: std::f64::consts::LN_2 / k.max(1) as f64,
        }
    }

    pub fn weight(&self, delta: usize) -> f64 {
        match *self {
            Omega::Exponential { lambda } => (-lambda * delta as f64).exp(),
            Omega::Linear { span } => {
                let s = (span + 1) as f64;
                (1.0 - delta as f64 / s).max(1.0 / s)
            }
            Omega::Constant => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Omega::Exponential { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                Err(Error::InvalidConfig("omega lambda must be non-negative".into()))
            }
            _ => Ok(()),
        }
    }
}

/// When the strongest influence into the head counts as negligible.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Negligibility {
    /// `I ≤ fraction · max I` into the head. Relative to the maximum, so it
    /// only stops on an all-zero round.
    FractionOfMax {
        fraction: f64,
    },
    /// `I ≤ multiple · σ_j · Σ_W ω`: no more than a sustained
    /// `multiple`-sigma baseline excursion over the whole window.
    BaselineMultiple {
        multiple: f64,
    },
    Absolute {
        threshold: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TracebackConfig {
    pub k: usize,
    pub omega: Omega,
    pub negligibility: Negligibility,
}

impl Default for TracebackConfig {
    fn default() -> Self {
        TracebackConfig {
            k: 10,
            omega: Omega::half_at(10),
            negligibility: Negligibility::BaselineMultiple { multiple: 3.0 },
        }
    }
}

impl TracebackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("traceback window K must be at least 1".into()));
        }
        self.omega.validate()
    }
}

/// `Σ_{t∈[t0,t1]} ω(t1−t) · 1{D_t > 0} · |L_t − μ|`.
///
/// `pair_series` must hold the records for steps `0..=t1` in order.
pub fn cumulative_influence(
    signals_j: &[f64],
    mean_j: f64,
    pair_series: &[PairSensitivity],
    window: (usize, usize),
    omega: &dyn Fn(usize) -> f64,
) -> Result<f64> {
    let (t0, t1) = window;
    if t0 > t1 || t1 >= signals_j.len() || t1 >= pair_series.len() {
        return Err(Error::InvalidWindow { t0, t1 });
    }
    let mut total = 0.0;
    for t in t0..=t1 {
        if pair_series[t].d > 0.0 {
            total += omega(t1 - t) * (signals_j[t] - mean_j).abs();
        }
    }
    Ok(total)
}

/// Window for candidate `j` into a head anchored at `t1`: from `T_j` when
/// `j` was detected no later than `t1`, else the last `K` steps.
pub fn influence_window(t1: usize, k: usize, t_j: Option<usize>) -> (usize, usize) {
    match t_j {
        Some(tj) if tj <= t1 => (tj, t1),
        _ => (t1.saturating_sub(k), t1),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Traceback {
    pub chain: Vec<AgentId>,
    pub rounds: Vec<TracebackRound>,
}

/// Traceback from the Stage-1 candidate in `report`. `signals` are the
/// Stage-1 series `[agent][t]` and `critics[i]` is agent `i`'s critic.
/// Returns `None` when Stage 1 flagged nobody.
pub fn traceback(
    report: &DetectionReport,
    episode: &Episode,
    critics: &[CriticNet],
    signals: &[Vec<f64>],
    profile: &StabilityProfile,
    config: &TracebackConfig,
) -> Result<Option<Traceback>> {
    let omega = config.omega;
    traceback_weighted(report, episode, critics, signals, profile, config, &|d| omega.weight(d))
}

/// [`traceback`] with an arbitrary recency weight in place of
/// `config.omega`.
pub fn traceback_weighted(
    report: &DetectionReport,
    episode: &Episode,
    critics: &[CriticNet],
    signals: &[Vec<f64>],
    profile: &StabilityProfile,
    config: &TracebackConfig,
    omega: &dyn Fn(usize) -> f64,
) -> Result<Option<Traceback>> {
    config.validate()?;
    let n = episode.n;
    if critics.len() != n {
        return Err(Error::dim("critics", n, critics.len()));
    }
    if signals.len() != n || profile.agents.len() != n {
        return Err(Error::dim("signal series", n, signals.len().min(profile.agents.len())));
    }
    let (Some(start), Some(t_start)) = (report.stage1_candidate, report.stage1_time) else {
        return Ok(None);
    };
    let mut chain = vec![start];
    let mut rounds = Vec::new();
    let mut head = start;
    let mut anchor = t_start;
    loop {
        let t1 = report.detection_times[head.0].unwrap_or(anchor);
        anchor = t1;
        let mut influences = Vec::with_capacity(n.saturating_sub(1));
        for j in (0..n).filter(|&j| j != head.0) {
            let window = influence_window(t1, config.k, report.detection_times[j]);
            let series = pair_series_upto(&critics[head.0], episode, head, AgentId(j), t1)?;
            let value = cumulative_influence(&signals[j], profile.agents[j].mean, &series, window, omega)?;
            influences.push(Influence {
                source: AgentId(j),
                window,
                value,
            });
        }
        let strongest = influences
            .iter()
            .fold(None::<&Influence>, |best, c| match best {
                Some(b) if b.value >= c.value => Some(b),
                _ => Some(c),
            })
            .cloned();
        let max_i = strongest.as_ref().map_or(0.0, |s| s.value);
        let (stop, negligible_below) = match &strongest {
            None => (Some(StopReason::NoCandidates), 0.0),
            Some(s) => {
                let eps = negligible_level(config.negligibility, s, max_i, profile, omega);
                if s.value <= eps || s.value == 0.0 {
                    (Some(StopReason::Negligible), eps)
                } else if chain.contains(&s.source) {
                    (Some(StopReason::WouldCycle), eps)
                } else {
                    (None, eps)
                }
            }
        };
        rounds.push(TracebackRound {
            head,
            anchor: t1,
            influences,
            strongest: strongest.as_ref().map(|s| s.source),
            negligible_below,
            stop,
        });
        match (stop, strongest) {
            (None, Some(s)) => {
                chain.push(s.source);
                head = s.source;
            }
            _ => break,
        }
    }
    Ok(Some(Traceback { chain, rounds }))
}

fn negligible_level(
    rule: Negligibility,
    strongest: &Influence,
    max_i: f64,
    profile: &StabilityProfile,
    omega: &dyn Fn(usize) -> f64,
) -> f64 {
    match rule {
        Negligibility::FractionOfMax { fraction } => fraction * max_i,
        Negligibility::BaselineMultiple { multiple } => {
            let (t0, t1) = strongest.window;
            let mass: f64 = (t0..=t1).map(|t| omega(t1 - t)).sum();
            multiple * profile.agents[strongest.source.0].std * mass
        }
        Negligibility::Absolute { threshold } => threshold,
    }
}

fn pair_series_upto(
    critic: &CriticNet,
    episode: &Episode,
    i: AgentId,
    j: AgentId,
    t1: usize,
) -> Result<Vec<PairSensitivity>> {
    episode.steps[..=t1.min(episode.len() - 1)]
        .iter()
        .map(|step| {
            let (g, h) = critic_blocks(critic, &step.global_state, &step.actions, j.0)?;
            Ok(PairSensitivity::from_blocks(j, i, step.t, g, h))
        })
        .collect()
}

/// Fills the Stage-2 fields of `report` from a traceback result.
pub fn apply_traceback(report: &mut DetectionReport, result: Option<Traceback>) {
    match result {
        None => {
            report.traceback_chain.clear();
            report.traceback_rounds.clear();
            report.final_patient0 = None;
            report.final_time = None;
            report.notes.push("no Stage-1 detection; traceback skipped".into());
        }
        Some(tb) => {
            let last = *tb.chain.last().expect("chain starts with the candidate");
            report.final_patient0 = Some(last);
            report.final_time = report.detection_times[last.0];
            report.traceback_chain = tb.chain;
            report.traceback_rounds = tb.rounds;
        }
    }
}

/// `t,j,i,G,D,kappa` rows for one pair series.
pub fn pair_series_csv(series: &[PairSensitivity]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::InvalidConfig(format!("csv: {e}"));
    w.write_record(["t", "j", "i", "G", "D", "kappa"]).map_err(err)?;
    for p in series {
        w.write_record([
            p.t.to_string(),
            p.j.to_string(),
            p.i.to_string(),
            p.big_g.to_string(),
            p.d.to_string(),
            p.kappa.map_or(String::new(), |k| k.to_string()),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests;
