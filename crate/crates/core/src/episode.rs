//! Episode data model shared by the simulator, detectors and harness, and
//! the line-delimited episode log format.
//!
//! A log is one JSON record per line: a header
//! `{"env_id", "n", "seed", "failure_plan"}` followed by one record per
//! time step. Reals are written in shortest round-trip decimal form and read
//! back bit-exactly.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of an agent within its team.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl AgentId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeStep {
    pub t: usize,
    pub global_state: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    /// Relaxed (probability-vector) actions, one per agent.
    pub actions: Vec<Vec<f64>>,
    /// Shared team reward received after this step's actions.
    pub reward: f64,
    /// Ground truth only; detectors never read it.
    #[serde(default)]
    pub attacked_agents: Vec<AgentId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    WorstAction,
}

/// Injected-failure metadata carried by an attacked episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailurePlan {
    pub source: AgentId,
    /// Inclusive `[t_a0, t_a1]`.
    pub window: (usize, usize),
    pub kind: AttackKind,
    #[serde(default = "full_strength")]
    pub strength: f64,
    /// Condition label for intervention variants (`critical` / `robust`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

fn full_strength() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub env_id: String,
    pub n: usize,
    pub seed: u64,
    pub failure_plan: Option<FailurePlan>,
    pub steps: Vec<TimeStep>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Observation series of one agent.
    pub fn observations_of(&self, agent: AgentId) -> impl Iterator<Item = &[f64]> + '_ {
        self.steps.iter().map(move |s| s.observations[agent.0].as_slice())
    }
}

/// Validates every time-step invariant and the step indexing.
pub fn validate_episode(episode: &Episode) -> Result<()> {
    let bad = |m: String| Err(Error::MalformedEpisode(m));
    if episode.steps.is_empty() {
        return bad("no steps".into());
    }
    let n = episode.n;
    if n == 0 {
        return bad("team size is zero".into());
    }
    for (k, step) in episode.steps.iter().enumerate() {
        if step.t != k {
            return bad(format!("step {k} is indexed {}", step.t));
        }
        if step.observations.len() != n {
            return bad(format!(
                "step {k} has {} observations for {n} agents",
                step.observations.len()
            ));
        }
        if step.actions.len() != n {
            return bad(format!("step {k} has {} actions for {n} agents", step.actions.len()));
        }
        if !step.reward.is_finite() {
            return bad(format!("step {k} has a non-finite reward"));
        }
        if step.global_state.iter().any(|v| !v.is_finite()) {
            return bad(format!("step {k} has a non-finite global state entry"));
        }
        for (i, o) in step.observations.iter().enumerate() {
            if o.iter().any(|v| !v.is_finite()) {
                return bad(format!("step {k} observation of agent {i} is not finite"));
            }
        }
        for (i, a) in step.actions.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite()) {
                return bad(format!("step {k} action of agent {i} is not finite"));
            }
        }
        if let Some(a) = step.attacked_agents.iter().find(|a| a.0 >= n) {
            return bad(format!("step {k} marks unknown agent {a} as attacked"));
        }
    }
    if let Some(plan) = &episode.failure_plan {
        let (t0, t1) = plan.window;
        if t0 > t1 || t1 >= episode.steps.len() {
            return bad(format!(
                "failure window [{t0}, {t1}] outside {} steps",
                episode.steps.len()
            ));
        }
        if plan.source.0 >= n {
            return bad(format!("failure source {} outside team of {n}", plan.source));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Header {
    env_id: String,
    n: usize,
    seed: u64,
    failure_plan: Option<FailurePlan>,
}

pub fn write_episode<W: Write>(episode: &Episode, mut out: W) -> std::io::Result<()> {
    let header = Header {
        env_id: episode.env_id.clone(),
        n: episode.n,
        seed: episode.seed,
        failure_plan: episode.failure_plan.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for step in &episode.steps {
        serde_json::to_writer(&mut out, step)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn episode_to_string(episode: &Episode) -> String {
    let mut buf = Vec::new();
    write_episode(episode, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

/// Parses a log and validates the result.
pub fn read_episode<R: BufRead>(input: R) -> Result<Episode> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or(Error::MalformedEpisode("empty log".into()))?;
    let first = first.map_err(|e| Error::MalformedEpisode(e.to_string()))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        reason: e.to_string(),
    })?;
    let mut steps = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::MalformedEpisode(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let step: TimeStep = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        steps.push(step);
    }
    let episode = Episode {
        env_id: header.env_id,
        n: header.n,
        seed: header.seed,
        failure_plan: header.failure_plan,
        steps,
    };
    validate_episode(&episode)?;
    Ok(episode)
}

pub fn save_episode(path: &Path, episode: &Episode) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_episode(episode, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_episode(path: &Path) -> Result<Episode> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_episode(std::io::BufReader::new(file))
}

/// Why the traceback loop stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Negligible,
    WouldCycle,
    NoCandidates,
}

/// Cumulative influence of one candidate into the round's head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Influence {
    pub source: AgentId,
    /// Inclusive window the sum ran over.
    pub window: (usize, usize),
    pub value: f64,
}

/// One round of the traceback: the cumulative influence of every candidate
/// into the current head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracebackRound {
    pub head: AgentId,
    /// Anchor of the round: the head's detection time (or the previous
    /// anchor when the head was never flagged).
    pub anchor: usize,
    pub influences: Vec<Influence>,
    pub strongest: Option<AgentId>,
    pub negligible_below: f64,
    pub stop: Option<StopReason>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// `T_i` per agent, indexed by agent.
    pub detection_times: Vec<Option<usize>>,
    pub thresholds: Vec<f64>,
    pub stage1_candidate: Option<AgentId>,
    pub stage1_time: Option<usize>,
    pub traceback_chain: Vec<AgentId>,
    pub traceback_rounds: Vec<TracebackRound>,
    pub final_patient0: Option<AgentId>,
    /// Detection time of the validated source, when it has one.
    pub final_time: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl DetectionReport {
    pub fn detected(&self) -> impl Iterator<Item = (AgentId, usize)> + '_ {
        self.detection_times
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (AgentId(i), t)))
    }

    pub fn any_detection(&self) -> bool {
        self.detection_times.iter().any(Option::is_some)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, len: usize) -> Episode {
        Episode {
            env_id: "chain".into(),
            n,
            seed: 3,
            failure_plan: Some(FailurePlan {
                source: AgentId(1),
                window: (1, 2),
                kind: AttackKind::WorstAction,
                strength: 1.0,
                label: None,
            }),
            steps: (0..len)
                .map(|t| TimeStep {
                    t,
                    global_state: vec![0.1 * t as f64, 1.0 / 3.0],
                    observations: vec![vec![0.5, -0.25]; n],
                    actions: vec![vec![0.2, 0.8]; n],
                    reward: -1.0 / 7.0,
                    attacked_agents: if (1..=2).contains(&t) { vec![AgentId(1)] } else { vec![] },
                })
                .collect(),
        }
    }

    #[test]
    fn rejects_empty_and_arity_errors() {
        let mut e = sample(3, 4);
        e.steps.clear();
        assert!(matches!(validate_episode(&e), Err(Error::MalformedEpisode(m)) if m == "no steps"));
        let mut e = sample(3, 4);
        e.steps[2].observations.pop();
        assert!(validate_episode(&e).is_err());
        let mut e = sample(3, 4);
        e.steps[1].t = 5;
        assert!(validate_episode(&e).is_err());
        let mut e = sample(3, 4);
        e.failure_plan.as_mut().unwrap().window = (2, 4);
        assert!(validate_episode(&e).is_err());
    }

    #[test]
    fn rejects_nan_anywhere() {
        for which in 0..3 {
            let mut e = sample(2, 3);
            match which {
                0 => e.steps[1].observations[0][1] = f64::NAN,
                1 => e.steps[2].actions[1][0] = f64::INFINITY,
                _ => e.steps[0].global_state[0] = f64::NAN,
            }
            assert!(validate_episode(&e).is_err());
        }
    }

    #[test]
    fn log_round_trip_is_exact() {
        let e = sample(3, 5);
        validate_episode(&e).unwrap();
        let text = episode_to_string(&e);
        assert_eq!(text.lines().count(), 6);
        let back = read_episode(text.as_bytes()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn malformed_log_names_the_line() {
        let mut text = episode_to_string(&sample(2, 3));
        text.push_str("{not json}\n");
        assert!(matches!(
            read_episode(text.as_bytes()),
            Err(Error::Parse { line: 5, .. })
        ));
    }
}
