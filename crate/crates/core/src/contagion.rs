//! Contagion graphs over detected agents.
//!
//! Nodes carry instability occupancy (IO): how many steps of the window
//! `[T_i, T_i + W_IO]` the agent's Stage-1 signal spent above threshold.
//! An edge `j→k` carries the influence score IS (mean `G`), the critical
//! rate CR (percent of steps with `G ≥ θ_G` and `D > 0`), the detection
//! period and the ranking score `S = Σ ω·max(D, 0)·G` used to decide which
//! parents are kept.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::episode::{AgentId, DetectionReport};
use crate::error::{Error, Result};
use crate::failure::percentile;
use crate::stage1::StabilityProfile;
use crate::stage2::{influence_window, Omega, PairSensitivity};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeMetrics {
    pub j: AgentId,
    pub k: AgentId,
    /// Inclusive steps IS and CR were computed over.
    pub window: (usize, usize),
    pub is: f64,
    /// Percent in `[0, 100]`.
    pub cr: f64,
    /// `(t_k, t_j)`, in that order.
    pub period: (usize, usize),
    pub s: f64,
}

impl EdgeMetrics {
    /// `"t_j → t_k"`.
    pub fn period_label(&self) -> String {
        format!("{} → {}", self.period.1, self.period.0)
    }
}

/// IS, CR and period of `j→k` over `[t_j, t_k]`. `pair_series` is indexed
/// by step. `S` is left at zero.
pub fn edge_metrics(pair_series: &[PairSensitivity], t_j: usize, t_k: usize, theta_g: f64) -> Result<EdgeMetrics> {
    window_metrics(pair_series, (t_j, t_k), (t_k, t_j), theta_g)
}

fn window_metrics(
    pair_series: &[PairSensitivity],
    window: (usize, usize),
    period: (usize, usize),
    theta_g: f64,
) -> Result<EdgeMetrics> {
    let (t0, t1) = window;
    if t0 > t1 || t1 >= pair_series.len() {
        return Err(Error::EmptyWindow);
    }
    let steps = &pair_series[t0..=t1];
    let len = steps.len() as f64;
    let is = steps.iter().map(|p| p.big_g).sum::<f64>() / len;
    let hits = steps.iter().filter(|p| p.big_g >= theta_g && p.d > 0.0).count();
    let first = &pair_series[t0];
    Ok(EdgeMetrics {
        j: first.j,
        k: first.i,
        window,
        is,
        cr: 100.0 * hits as f64 / len,
        period,
        s: 0.0,
    })
}

/// `S_{j→k} = Σ_{t∈[t0,t_k]} ω(t_k − t)·max(D_t, 0)·G_t`.
pub fn ranking_score(
    pair_series: &[PairSensitivity],
    window: (usize, usize),
    omega: &dyn Fn(usize) -> f64,
) -> Result<f64> {
    let (t0, tk) = window;
    if t0 > tk || tk >= pair_series.len() {
        return Err(Error::EmptyWindow);
    }
    Ok((t0..=tk)
        .map(|t| omega(tk - t) * pair_series[t].d.max(0.0) * pair_series[t].big_g)
        .sum())
}

/// Steps in `[T_i, min(T_i + w_io, len − 1)]` with the signal above
/// `threshold`.
pub fn node_io(signal: &[f64], threshold: f64, t_i: usize, w_io: usize) -> usize {
    if t_i >= signal.len() {
        return 0;
    }
    let end = (t_i + w_io).min(signal.len() - 1);
    signal[t_i..=end].iter().filter(|&&v| v > threshold).count()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    percentile(values, 50.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum ThetaRule {
    /// Median of `G` for the pair over the whole episode.
    EpisodeMedian,
    Fixed {
        value: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum EdgeWindow {
    /// The last up-to-`steps` steps ending at `t_k`.
    Recent { steps: usize },
    /// `[t_j, t_k]`, or the last `K` steps when `j` was flagged after `k`.
    Full,
}

impl EdgeWindow {
    fn resolve(self, t_j: Option<usize>, t_k: usize, k_window: usize) -> (usize, usize) {
        match self {
            EdgeWindow::Recent { steps } => ((t_k + 1).saturating_sub(steps.max(1)), t_k),
            EdgeWindow::Full => influence_window(t_k, k_window, t_j),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    pub tau: f64,
    pub theta: ThetaRule,
    pub w_io: usize,
    /// Window for IS and CR.
    pub display_window: EdgeWindow,
    /// Window for the ranking score.
    pub score_window: EdgeWindow,
    pub omega: Omega,
    /// Fallback length when a parent was flagged after the child.
    pub k_window: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            tau: 0.5,
            theta: ThetaRule::EpisodeMedian,
            w_io: 15,
            display_window: EdgeWindow::Recent { steps: 5 },
            score_window: EdgeWindow::Full,
            omega: Omega::half_at(10),
            k_window: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub agent: AgentId,
    pub detected_at: Option<usize>,
    pub io: usize,
    /// `[T_i, T_i + W_IO]` as labelled; absent for undetected chain members.
    pub io_window: Option<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Retention {
    /// Score reached `τ` of the best score into the child.
    Score,
    /// A step of the traceback chain; kept regardless of score.
    Chain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    #[serde(flatten)]
    pub metrics: EdgeMetrics,
    pub theta_g: f64,
    pub retained_by: Retention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContagionGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub tau: f64,
    pub w_io: usize,
}

/// Builds the graph from a finished report. `pairs[k][j]` is the `(j→k)`
/// series from agent `k`'s critic; `signals[i]` the Stage-1 series.
/// `None` when nothing was detected.
pub fn build_graph(
    report: &DetectionReport,
    pairs: &[Vec<Vec<PairSensitivity>>],
    signals: &[Vec<f64>],
    profile: &StabilityProfile,
    params: &GraphParams,
) -> Result<Option<ContagionGraph>> {
    if !report.any_detection() {
        return Ok(None);
    }
    let n = report.detection_times.len();
    if pairs.len() != n || signals.len() != n || profile.agents.len() != n {
        return Err(Error::dim(
            "graph inputs",
            n,
            pairs.len().min(signals.len()).min(profile.agents.len()),
        ));
    }
    let times = &report.detection_times;
    let omega = params.omega;
    let weight = |d: usize| omega.weight(d);
    let chain_edges: Vec<(AgentId, AgentId)> = report.traceback_chain.windows(2).map(|w| (w[1], w[0])).collect();

    let mut members: Vec<AgentId> = report.detected().map(|(a, _)| a).collect();
    for a in &report.traceback_chain {
        if !members.contains(a) {
            members.push(*a);
        }
    }
    members.sort();
    let nodes = members
        .iter()
        .map(|&a| GraphNode {
            agent: a,
            detected_at: times[a.0],
            io: times[a.0].map_or(0, |t| {
                node_io(&signals[a.0], profile.agents[a.0].threshold, t, params.w_io)
            }),
            io_window: times[a.0].map(|t| (t, t + params.w_io)),
        })
        .collect();

    let mut edges = Vec::new();
    for &k in &members {
        // a child needs an anchor: its own detection or the chain's
        let Some(t_k) = times[k.0].or_else(|| chain_anchor(report, k)) else {
            continue;
        };
        let mut candidates = Vec::new();
        for &j in members.iter().filter(|&&j| j != k) {
            let in_chain = chain_edges.contains(&(j, k));
            let ordered = times[j.0].is_some_and(|t_j| t_j <= t_k);
            if !(ordered || in_chain) {
                continue;
            }
            let series = &pairs[k.0][j.0];
            let theta_g = match params.theta {
                ThetaRule::EpisodeMedian => median(&series.iter().map(|p| p.big_g).collect::<Vec<_>>()),
                ThetaRule::Fixed { value } => value,
            };
            let shown = params.display_window.resolve(times[j.0], t_k, params.k_window);
            let scored = params.score_window.resolve(times[j.0], t_k, params.k_window);
            let period = (t_k, times[j.0].unwrap_or(scored.0));
            let mut m = window_metrics(series, shown, period, theta_g)?;
            m.s = ranking_score(series, scored, &weight)?;
            candidates.push((m, theta_g, in_chain));
        }
        let top = candidates.iter().map(|c| c.0.s).fold(0.0, f64::max);
        for (m, theta_g, in_chain) in candidates {
            let by_score = top > 0.0 && m.s > 0.0 && m.s >= params.tau * top;
            if by_score || in_chain {
                edges.push(GraphEdge {
                    metrics: m,
                    theta_g,
                    retained_by: if by_score { Retention::Score } else { Retention::Chain },
                });
            }
        }
    }
    Ok(Some(ContagionGraph {
        nodes,
        edges,
        tau: params.tau,
        w_io: params.w_io,
    }))
}

/// Detection time of the nearest flagged agent downstream in the chain.
fn chain_anchor(report: &DetectionReport, a: AgentId) -> Option<usize> {
    let pos = report.traceback_chain.iter().position(|&c| c == a)?;
    report.traceback_chain[..pos]
        .iter()
        .rev()
        .find_map(|c| report.detection_times[c.0])
}

/// Retention rule alone: indices of the scores kept under `tau`.
pub fn retained(scores: &[f64], tau: f64) -> Vec<usize> {
    let top = scores.iter().copied().fold(0.0, f64::max);
    (0..scores.len())
        .filter(|&i| top > 0.0 && scores[i] > 0.0 && scores[i] >= tau * top)
        .collect()
}

fn fmt_num(v: f64) -> String {
    format!("{v:.3}")
}

impl ContagionGraph {
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph contagion {\n  rankdir=LR;\n  node [shape=ellipse];\n");
        for node in &self.nodes {
            let window = match node.io_window {
                Some((a, b)) => format!("t[{a},{b}]"),
                None => "t[-]".into(),
            };
            let _ = writeln!(
                out,
                "  a{id} [label=\"agent {id}\\nIO={io} {window}\"];",
                id = node.agent,
                io = node.io
            );
        }
        for e in &self.edges {
            let m = &e.metrics;
            let style = match e.retained_by {
                Retention::Score => "",
                Retention::Chain => ", style=dashed",
            };
            let _ = writeln!(
                out,
                "  a{} -> a{} [label=\"IS={}; CR={}%; t=[{},{}]\"{style}];",
                m.j,
                m.k,
                fmt_num(m.is),
                fmt_num(m.cr),
                m.period.0,
                m.period.1
            );
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn edge(&self, j: AgentId, k: AgentId) -> Option<&GraphEdge> {
        self.edges.iter().find(|e| e.metrics.j == j && e.metrics.k == k)
    }
}

/// Per-step contributions of each edge, `t,edge,s_contribution,i_contribution`,
/// over the edge's score window.
pub fn edge_timeline_csv(
    graph: &ContagionGraph,
    pairs: &[Vec<Vec<PairSensitivity>>],
    signals: &[Vec<f64>],
    profile: &StabilityProfile,
    params: &GraphParams,
    report: &DetectionReport,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::InvalidConfig(format!("csv: {e}"));
    w.write_record(["t", "edge", "s_contribution", "i_contribution"])
        .map_err(err)?;
    for e in &graph.edges {
        let (j, k) = (e.metrics.j, e.metrics.k);
        let t_k = e.metrics.period.0;
        let (t0, t1) = params
            .score_window
            .resolve(report.detection_times[j.0], t_k, params.k_window);
        let series = &pairs[k.0][j.0];
        let mu = profile.agents[j.0].mean;
        for t in t0..=t1 {
            let p = &series[t];
            let wgt = params.omega.weight(t1 - t);
            let s = wgt * p.d.max(0.0) * p.big_g;
            let i = if p.d > 0.0 {
                wgt * (signals[j.0][t] - mu).abs()
            } else {
                0.0
            };
            w.write_record([t.to_string(), format!("{j}->{k}"), s.to_string(), i.to_string()])
                .map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
