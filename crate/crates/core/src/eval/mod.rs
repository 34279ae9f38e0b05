//! Episode analysis and evaluation metrics: Stage-1 accuracy, correction
//! rate, combined accuracy and the paired IO-vs-AUC comparison.
//!
//! Detectors never see ground truth. Labels are joined here, after the
//! report is final.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::contagion::{build_graph, node_io, ContagionGraph, GraphParams};
use crate::diff::{CriticNet, PolicyNet};
use crate::episode::{AgentId, DetectionReport, Episode};
use crate::error::{Error, Result};
use crate::failure::PairedVariants;
use crate::stage1::{detect, signal_series, ProbeConfig, StabilityProfile};
use crate::stage2::{all_pair_sensitivities, apply_traceback, traceback, PairSensitivity, TracebackConfig};

mod run;

pub use run::{
    attack_plan, build_models, plan_variant_count, prepare, run_experiment, seeds, single_seed, write_analysis,
    ExperimentOutput, MetricsSummary, Models, Prepared, RunStatus, FAILURE_MARKER,
};

/// Everything the detector derives from one episode.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub signals: Vec<Vec<f64>>,
    pub report: DetectionReport,
    /// `pairs[k][j]`: the `j→k` series from `k`'s critic. Empty when
    /// nothing was detected.
    pub pairs: Vec<Vec<Vec<PairSensitivity>>>,
    pub graph: Option<ContagionGraph>,
}

/// Detector settings shared by every episode of a run.
#[derive(Clone, Copy, Debug)]
pub struct Detector<'a> {
    pub policies: &'a [PolicyNet],
    pub critics: &'a [CriticNet],
    pub profile: &'a StabilityProfile,
    pub probe: &'a ProbeConfig,
    pub traceback: &'a TracebackConfig,
    pub graph: &'a GraphParams,
}

impl Detector<'_> {
    /// Stage 1, traceback and the contagion graph.
    pub fn analyze(&self, episode: &Episode) -> Result<Analysis> {
        let s1 = detect(episode, self.policies, self.profile, self.probe)?;
        let mut report = s1.report;
        let tb = traceback(
            &report,
            episode,
            self.critics,
            &s1.signals,
            self.profile,
            self.traceback,
        )?;
        apply_traceback(&mut report, tb);
        if !report.any_detection() {
            return Ok(Analysis {
                signals: s1.signals,
                report,
                pairs: Vec::new(),
                graph: None,
            });
        }
        let pairs = all_pair_sensitivities(self.critics, episode)?;
        let graph = build_graph(&report, &pairs, &s1.signals, self.profile, self.graph)?;
        Ok(Analysis {
            signals: s1.signals,
            report,
            pairs,
            graph,
        })
    }
}

/// Labelled outcome of one attacked episode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub source: AgentId,
    pub stage1: Option<AgentId>,
    #[serde(rename = "final")]
    pub final_patient0: Option<AgentId>,
    pub downstream_first: bool,
    pub corrected: bool,
}

impl EpisodeOutcome {
    /// Downstream-first: the candidate is wrong and was flagged before the
    /// true source (or the source was never flagged).
    pub fn label(seed: u64, source: AgentId, report: &DetectionReport) -> Self {
        let stage1 = report.stage1_candidate;
        let t_src = report.detection_times.get(source.0).copied().flatten();
        let downstream_first = match (stage1, report.stage1_time) {
            (Some(c), Some(t_c)) if c != source => t_src.is_none_or(|t| t_c < t),
            _ => false,
        };
        EpisodeOutcome {
            seed,
            source,
            stage1,
            final_patient0: report.final_patient0,
            downstream_first,
            corrected: downstream_first && report.final_patient0 == Some(source),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patient0Metrics {
    pub episodes: usize,
    pub stage1_correct: usize,
    pub downstream_first: usize,
    pub corrected: usize,
    /// Nothing flagged.
    pub no_detection: usize,
    /// Wrong candidate that is not downstream-first.
    pub other_miss: usize,
    pub final_correct: usize,
    /// Percentages.
    pub stage1_acc: f64,
    pub correction_rate: Option<f64>,
    pub combined_acc: f64,
}

pub fn patient0_metrics(results: &[EpisodeOutcome]) -> Patient0Metrics {
    let n = results.len();
    let count = |f: &dyn Fn(&EpisodeOutcome) -> bool| results.iter().filter(|r| f(r)).count();
    let stage1_correct = count(&|r| r.stage1 == Some(r.source));
    let downstream_first = count(&|r| r.downstream_first);
    let corrected = count(&|r| r.corrected);
    let no_detection = count(&|r| r.stage1.is_none());
    let final_correct = count(&|r| r.final_patient0 == Some(r.source));
    let pct = |k: usize, of: usize| if of == 0 { 0.0 } else { 100.0 * k as f64 / of as f64 };
    Patient0Metrics {
        episodes: n,
        stage1_correct,
        downstream_first,
        corrected,
        no_detection,
        other_miss: n - stage1_correct - downstream_first - no_detection,
        final_correct,
        stage1_acc: pct(stage1_correct, n),
        correction_rate: (downstream_first > 0).then(|| pct(corrected, downstream_first)),
        combined_acc: pct(final_correct, n),
    }
}

/// One scored critical/robust pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub seed: u64,
    pub source: AgentId,
    pub target: AgentId,
    pub critical_step: usize,
    pub robust_step: usize,
    pub io_crit: usize,
    pub io_rob: usize,
    /// IO of the unattacked base over the same two windows.
    pub io_base_crit: usize,
    pub io_base_rob: usize,
    /// Summed drop of the attacked agent's Q below base over the window.
    pub q_drop_crit: f64,
    pub q_drop_rob: f64,
    /// Summed drop of team reward below base over the window.
    pub reward_drop_crit: f64,
    pub reward_drop_rob: f64,
}

/// Scores both variants over `[t*, t* + window]`, clipped to the episode.
/// IO counts exceedances of the target's Stage-1 signal.
pub fn score_pair(
    base: &Episode,
    variants: &PairedVariants,
    policies: &[PolicyNet],
    critic_source: &CriticNet,
    profile: &StabilityProfile,
    probe: &ProbeConfig,
    window: usize,
) -> Result<PairOutcome> {
    let i = variants.target.0;
    let j = variants.source;
    let threshold = profile.agents[i].threshold;
    let q_of = |ep: &Episode, t: usize| critic_source.q(&ep.steps[t].global_state, &ep.steps[t].actions);
    let score = |ep: &Episode, t0: usize| -> Result<(usize, f64, f64)> {
        let signals = signal_series(ep, policies, probe)?;
        let io = node_io(&signals[i], threshold, t0, window);
        let t1 = (t0 + window).min(ep.len() - 1);
        let mut dq = 0.0;
        let mut dr = 0.0;
        for t in t0..=t1 {
            dq += q_of(base, t)? - q_of(ep, t)?;
            dr += base.steps[t].reward - ep.steps[t].reward;
        }
        Ok((io, dq, dr))
    };
    let (io_crit, q_drop_crit, reward_drop_crit) = score(&variants.critical, variants.critical_step)?;
    let (io_rob, q_drop_rob, reward_drop_rob) = score(&variants.robust, variants.robust_step)?;
    let base_signal = &signal_series(base, policies, probe)?[i];
    let io_base_crit = node_io(base_signal, threshold, variants.critical_step, window);
    let io_base_rob = node_io(base_signal, threshold, variants.robust_step, window);
    Ok(PairOutcome {
        seed: base.seed,
        source: j,
        target: variants.target,
        critical_step: variants.critical_step,
        robust_step: variants.robust_step,
        io_crit,
        io_rob,
        io_base_crit,
        io_base_rob,
        q_drop_crit,
        q_drop_rob,
        reward_drop_crit,
        reward_drop_rob,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedMetrics {
    pub pairs: usize,
    pub io_wins: usize,
    pub aucq_wins: usize,
    pub aucr_wins: usize,
    /// Percentages; ties count as losses.
    pub io_acc: f64,
    pub aucq_acc: f64,
    pub aucr_acc: f64,
    /// One-sided binomial `P(X ≥ io_wins)` under a fair coin.
    pub io_p_value: f64,
}

pub fn paired_metrics(pairs: &[PairOutcome]) -> Result<PairedMetrics> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    let n = pairs.len();
    let io_wins = pairs.iter().filter(|p| p.io_crit > p.io_rob).count();
    let aucq_wins = pairs.iter().filter(|p| p.q_drop_crit > p.q_drop_rob).count();
    let aucr_wins = pairs.iter().filter(|p| p.reward_drop_crit > p.reward_drop_rob).count();
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    Ok(PairedMetrics {
        pairs: n,
        io_wins,
        aucq_wins,
        aucr_wins,
        io_acc: pct(io_wins),
        aucq_acc: pct(aucq_wins),
        aucr_acc: pct(aucr_wins),
        io_p_value: binomial_upper_tail(io_wins, n),
    })
}

/// `P(X ≥ k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n as u64).expect("valid binomial");
    b.sf(k as u64 - 1)
}

/// False detections among fault-free episodes, as a percentage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FalsePositive {
    pub episodes: usize,
    pub flagged: usize,
    pub rate: f64,
}

pub fn false_positive_rate(reports: &[DetectionReport]) -> FalsePositive {
    let flagged = reports.iter().filter(|r| r.any_detection()).count();
    FalsePositive {
        episodes: reports.len(),
        flagged,
        rate: if reports.is_empty() {
            0.0
        } else {
            100.0 * flagged as f64 / reports.len() as f64
        },
    }
}
