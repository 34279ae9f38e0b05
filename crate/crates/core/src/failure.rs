//! Failure injection (worst-action attack) and the Critical/Robust state
//! classification behind the paired intervention test.

use serde::{Deserialize, Serialize};

use crate::diff::{critic_grad_block, one_hot, CriticNet, PolicyNet};
use crate::env::{rollout_with, Attack, EnvConfig};
use crate::episode::{AgentId, AttackKind, Episode};
use crate::error::{Error, Result};
use crate::stage2::{pair_sensitivities, PairSensitivity};

/// Worst-action attack on one agent over an inclusive step window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub agent: AgentId,
    pub window: (usize, usize),
    pub kind: AttackKind,
    /// Interpolation weight between the policy action (0) and the worst
    /// action (1).
    pub strength: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl AttackPlan {
    pub fn new(agent: AgentId, window: (usize, usize)) -> Self {
        AttackPlan {
            agent,
            window,
            kind: AttackKind::WorstAction,
            strength: 1.0,
            label: None,
        }
    }

    pub fn validate(&self, config: &EnvConfig) -> Result<()> {
        if self.agent.0 >= config.n {
            return Err(Error::InvalidConfig(format!(
                "attacked agent {} outside team",
                self.agent
            )));
        }
        let (t0, t1) = self.window;
        if t0 > t1 || t1 >= config.horizon {
            return Err(Error::InvalidConfig(format!(
                "attack window [{t0}, {t1}] outside horizon {}",
                config.horizon
            )));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::InvalidConfig("attack strength must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One-hot action of agent `j` minimizing `Q` with everyone else fixed.
/// Ties go to the lowest action index.
pub fn worst_action(critic: &CriticNet, s: &[f64], a_joint: &[Vec<f64>], j: AgentId) -> Result<Vec<f64>> {
    let d = critic.action_slice(j.0)?.len();
    let mut joint = a_joint.to_vec();
    let mut best = (0, f64::INFINITY);
    for k in 0..d {
        joint[j.0] = one_hot(d, k);
        let q = critic.q(s, &joint)?;
        if q < best.1 {
            best = (k, q);
        }
    }
    Ok(one_hot(d, best.0))
}

/// Continuous-action variant: 20 projected gradient-descent steps on `Q`
/// in `a_j`, starting from the current action and kept inside
/// `[lo, hi]` per coordinate.
pub fn worst_action_continuous(
    critic: &CriticNet,
    s: &[f64],
    a_joint: &[Vec<f64>],
    j: AgentId,
    bounds: (f64, f64),
    step_size: f64,
) -> Result<Vec<f64>> {
    const STEPS: usize = 20;
    let mut joint = a_joint.to_vec();
    let (lo, hi) = bounds;
    let mut best = joint[j.0].clone();
    let mut best_q = critic.q(s, &joint)?;
    for _ in 0..STEPS {
        // ∂(−Q)/∂a_j, so descending Q means stepping along +g
        let g = critic_grad_block(critic, s, &joint, j.0)?;
        for (a, gk) in joint[j.0].iter_mut().zip(&g) {
            *a = (*a + step_size * gk).clamp(lo, hi);
        }
        let q = critic.q(s, &joint)?;
        if q < best_q {
            best_q = q;
            best = joint[j.0].clone();
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateLabel {
    Critical,
    Robust,
    Neither,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateClass {
    pub pair: (AgentId, AgentId),
    pub t: usize,
    pub label: StateLabel,
    pub g: f64,
    pub d: f64,
}

/// How `g_hi` / `g_lo` are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum GThresholds {
    /// Percentiles of `G` within the episode (linear interpolation).
    Percentile {
        hi: f64,
        lo: f64,
    },
    Fixed {
        hi: f64,
        lo: f64,
    },
}

impl Default for GThresholds {
    fn default() -> Self {
        GThresholds::Percentile { hi: 75.0, lo: 25.0 }
    }
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.len() == 1 {
        return v[0];
    }
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn classify_states(series: &[PairSensitivity], thresholds: GThresholds) -> Result<Vec<StateClass>> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    let (g_hi, g_lo) = match thresholds {
        GThresholds::Percentile { hi, lo } => {
            let gs: Vec<f64> = series.iter().map(|p| p.big_g).collect();
            (percentile(&gs, hi), percentile(&gs, lo))
        }
        GThresholds::Fixed { hi, lo } => (hi, lo),
    };
    Ok(series
        .iter()
        .map(|p| {
            let label = if p.big_g >= g_hi && p.d > 0.0 {
                StateLabel::Critical
            } else if p.big_g <= g_lo && p.d <= 0.0 {
                StateLabel::Robust
            } else {
                StateLabel::Neither
            };
            StateClass {
                pair: (p.j, p.i),
                t: p.t,
                label,
                g: p.big_g,
                d: p.d,
            }
        })
        .collect())
}

/// Settings for one paired intervention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionConfig {
    /// Post-intervention comparison window length.
    pub window: usize,
    /// Consecutive steps the attack action is held (1 = one-shot).
    pub attack_steps: usize,
    pub strength: f64,
    pub thresholds: GThresholds,
    /// Tie-break among equally low-`G` Robust steps.
    #[serde(default)]
    pub robust_pick: RobustPick,
}

/// Which Robust step to use when several share the minimum `G`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RobustPick {
    Earliest,
    /// Closest in time to the chosen Critical step; earlier wins a distance tie.
    #[default]
    Nearest,
    Latest,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            window: 15,
            attack_steps: 1,
            strength: 1.0,
            thresholds: GThresholds::default(),
            robust_pick: RobustPick::default(),
        }
    }
}

/// Critical and robust re-simulations of one base episode for pair `(j→i)`.
#[derive(Clone, Debug)]
pub struct PairedVariants {
    pub source: AgentId,
    pub target: AgentId,
    pub critical_step: usize,
    pub robust_step: usize,
    pub critical: Episode,
    pub robust: Episode,
}

/// Picks the highest-`G` Critical step and the lowest-`G` Robust step that
/// leave room for the comparison window, then re-simulates the base episode
/// with agent `j`'s action replaced at each. `None` when the pair has no
/// usable Critical or Robust step.
#[allow(clippy::too_many_arguments)]
pub fn paired_intervention(
    config: &EnvConfig,
    policies: &[PolicyNet],
    base: &Episode,
    critic_i: &CriticNet,
    source: AgentId,
    target: AgentId,
    settings: &InterventionConfig,
) -> Result<Option<PairedVariants>> {
    let series = pair_sensitivities(critic_i, base, target, source)?;
    let classes = classify_states(&series, settings.thresholds)?;
    let room = settings.window.max(settings.attack_steps);
    let last_ok = base.len().saturating_sub(room);
    let usable = |c: &&StateClass| c.t < last_ok;
    let critical = classes
        .iter()
        .filter(|c| c.label == StateLabel::Critical)
        .filter(usable)
        .max_by(|a, b| a.g.total_cmp(&b.g).then(b.t.cmp(&a.t)));
    let Some(c) = critical else {
        return Ok(None);
    };
    let tie = |t: usize| match settings.robust_pick {
        RobustPick::Earliest => (0, t as i64),
        RobustPick::Nearest => (t.abs_diff(c.t), t as i64),
        RobustPick::Latest => (0, -(t as i64)),
    };
    let robust = classes
        .iter()
        .filter(|c| c.label == StateLabel::Robust)
        .filter(usable)
        .min_by(|a, b| a.g.total_cmp(&b.g).then(tie(a.t).cmp(&tie(b.t))));
    let Some(r) = robust else {
        return Ok(None);
    };
    let run = |t: usize, label: &str| -> Result<Episode> {
        let plan = AttackPlan {
            agent: source,
            window: (t, t + settings.attack_steps - 1),
            kind: AttackKind::WorstAction,
            strength: settings.strength,
            label: Some(label.to_string()),
        };
        let attack = Attack {
            plan: &plan,
            critic: critic_i,
        };
        rollout_with(config, base.seed, policies, &[attack])
    };
    Ok(Some(PairedVariants {
        source,
        target,
        critical_step: c.t,
        robust_step: r.t,
        critical: run(c.t, "critical")?,
        robust: run(r.t, "robust")?,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{quadratic_action_critic, Activation, Mlp, NetSpec, OutputHead, ParamVector};

    fn sens(t: usize, g: f64, d: f64) -> PairSensitivity {
        PairSensitivity {
            j: AgentId(0),
            i: AgentId(1),
            t,
            g: vec![g],
            h: vec![vec![0.0]],
            big_g: g,
            d,
            kappa: None,
        }
    }

    /// Critic over one 3-way action slice with `Q = w · a`.
    fn linear_critic(w: [f64; 3]) -> CriticNet {
        let spec = NetSpec::new(vec![3, 1], vec![], OutputHead::Linear).unwrap();
        let params = ParamVector::from_values(&spec, vec![w[0], w[1], w[2], 0.0]).unwrap();
        CriticNet::new(Mlp::new(spec, params).unwrap(), 0, &[3]).unwrap()
    }

    #[test]
    fn discrete_worst_action_examples() {
        let critic = linear_critic([-1.0, -5.0, -2.0]);
        assert_eq!(
            worst_action(&critic, &[], &[vec![1.0, 0.0, 0.0]], AgentId(0)).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        let flat = linear_critic([0.5, 0.5, 0.5]);
        assert_eq!(
            worst_action(&flat, &[], &[vec![0.0, 0.0, 1.0]], AgentId(0)).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn continuous_worst_action_never_increases_q() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let c = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            // Q = ‖a − c‖² with a benign centre: scale −2 in −½·scale·‖·‖²
            let critic = quadratic_action_critic(1, &[2, 2], 1, &c, -2.0).unwrap();
            let a = vec![
                vec![0.0, 0.0],
                vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            ];
            let s = [0.0];
            let w = worst_action_continuous(&critic, &s, &a, AgentId(1), (-1.0, 1.0), 0.1).unwrap();
            let mut joint = a.clone();
            joint[1] = w.clone();
            assert!(critic.q(&s, &joint).unwrap() <= critic.q(&s, &a).unwrap());
            assert!(w.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn classification_examples() {
        let all_damped: Vec<_> = (0..8).map(|t| sens(t, t as f64, -1.0)).collect();
        let c = classify_states(&all_damped, GThresholds::default()).unwrap();
        assert!(c.iter().all(|s| s.label != StateLabel::Critical));

        let mut one_peak: Vec<_> = (0..8).map(|t| sens(t, 1.0 + t as f64 * 0.1, -0.5)).collect();
        one_peak[3] = sens(3, 10.0, 2.0);
        let c = classify_states(&one_peak, GThresholds::default()).unwrap();
        let crit: Vec<usize> = c
            .iter()
            .filter(|s| s.label == StateLabel::Critical)
            .map(|s| s.t)
            .collect();
        assert_eq!(crit, vec![3]);

        let high_but_damped = vec![sens(0, 9.0, -1.0), sens(1, 1.0, 1.0), sens(2, 2.0, 1.0)];
        let c = classify_states(&high_but_damped, GThresholds::default()).unwrap();
        assert_eq!(c[0].label, StateLabel::Neither);

        assert!(matches!(
            classify_states(&[], GThresholds::default()),
            Err(Error::EmptySeries)
        ));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[5.0, 1.0, 3.0, 2.0, 4.0], 50.0), 3.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 25.0), 1.75);
    }

    #[test]
    fn attack_plan_validation() {
        let cfg = EnvConfig::spread(3);
        assert!(AttackPlan::new(AgentId(2), (5, 8)).validate(&cfg).is_ok());
        assert!(AttackPlan::new(AgentId(3), (5, 8)).validate(&cfg).is_err());
        assert!(AttackPlan::new(AgentId(0), (5, 25)).validate(&cfg).is_err());
        let mut p = AttackPlan::new(AgentId(0), (1, 2));
        p.strength = 0.0;
        assert!(p.validate(&cfg).is_err());
        let _ = Activation::Tanh;
    }
}
