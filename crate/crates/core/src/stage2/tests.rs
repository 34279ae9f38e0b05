use super::*;
use crate::diff::{quadratic_action_critic, Mlp, NetSpec, OutputHead, ParamVector};
use crate::episode::TimeStep;
use crate::stage1::{detect_from_signals, AgentProfile};
use proptest::prelude::*;

fn episode_with_actions(actions: Vec<Vec<Vec<f64>>>) -> Episode {
    let n = actions[0].len();
    Episode {
        env_id: "chain".into(),
        n,
        seed: 0,
        failure_plan: None,
        steps: actions
            .into_iter()
            .enumerate()
            .map(|(t, a)| TimeStep {
                t,
                global_state: vec![0.0],
                observations: vec![vec![0.0]; n],
                actions: a,
                reward: 0.0,
                attacked_agents: vec![],
            })
            .collect(),
    }
}

fn zero_critic(n: usize, d: usize) -> CriticNet {
    let spec = NetSpec::new(vec![1 + n * d, 1], vec![], OutputHead::Linear).unwrap();
    CriticNet::new(
        Mlp::new(spec.clone(), ParamVector::zeros(&spec).unwrap()).unwrap(),
        1,
        &vec![d; n],
    )
    .unwrap()
}

fn rec(t: usize, g: f64, d: f64) -> PairSensitivity {
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

fn profile(means: &[f64], stds: &[f64]) -> StabilityProfile {
    StabilityProfile {
        k: 4.0,
        episodes: 1,
        agents: means
            .iter()
            .zip(stds)
            .map(|(&mean, &std)| AgentProfile {
                mean,
                std,
                samples: 100,
                threshold: mean + 4.0 * std,
            })
            .collect(),
    }
}

#[test]
fn decoupled_critic_has_no_sensitivity() {
    let ep = episode_with_actions(vec![vec![vec![0.3, 0.7], vec![0.5, 0.5]]; 4]);
    let series = pair_sensitivities(&zero_critic(2, 2), &ep, AgentId(1), AgentId(0)).unwrap();
    assert_eq!(series.len(), 4);
    for p in series {
        assert_eq!((p.big_g, p.d, p.kappa), (0.0, 0.0, None));
    }
}

#[test]
fn quadratic_probe_critic_values() {
    let critic = quadratic_action_critic(1, &[2, 2], 0, &[0.0, 0.0], 1.0).unwrap();
    let ep = episode_with_actions(vec![vec![vec![1.0, 2.0], vec![0.0, 0.0]]]);
    let p = &pair_sensitivities(&critic, &ep, AgentId(1), AgentId(0)).unwrap()[0];
    assert!((p.g[0] - 1.0).abs() < 1e-12 && (p.g[1] - 2.0).abs() < 1e-12);
    assert!((p.h[0][0] - 1.0).abs() < 1e-12 && p.h[0][1].abs() < 1e-12 && (p.h[1][1] - 1.0).abs() < 1e-12);
    assert!((p.big_g - 5f64.sqrt()).abs() < 1e-12);
    assert!((p.d - 5.0).abs() < 1e-10);
    assert!((p.kappa.unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn directional_curvature_arithmetic() {
    let p = PairSensitivity::from_blocks(
        AgentId(0),
        AgentId(1),
        0,
        vec![1.0, 2.0],
        vec![vec![2.0, 0.0], vec![0.0, -1.0]],
    );
    assert_eq!(p.d, -2.0);
    assert_eq!(p.kappa, Some(-0.4));
}

proptest! {
    #[test]
    fn rayleigh_identity(g in prop::collection::vec(-10.0f64..10.0, 3), h in prop::collection::vec(-10.0f64..10.0, 9)) {
        let hm: Vec<Vec<f64>> = (0..3).map(|r| (0..3).map(|c| 0.5 * (h[3 * r + c] + h[3 * c + r])).collect()).collect();
        let p = PairSensitivity::from_blocks(AgentId(0), AgentId(1), 0, g, hm);
        prop_assert!(p.big_g >= 0.0);
        if p.big_g > 1e-12 {
            prop_assert!(p.rayleigh_gap() <= 1e-9 * p.d.abs().max(1.0));
        }
    }

    #[test]
    fn damping_steps_do_not_change_influence(
        dev in prop::collection::vec(0.0f64..3.0, 12),
        gate in prop::collection::vec(any::<bool>(), 12),
        extra in 0usize..6,
    ) {
        // the first `extra` steps carry D ≤ 0; widening the window over them
        // changes nothing
        let series: Vec<_> = (0..12).map(|t| rec(t, 1.0, if t >= extra && gate[t] { 1.0 } else { -1.0 })).collect();
        let w = |d: usize| 0.9f64.powi(d as i32);
        let narrow = cumulative_influence(&dev, 0.0, &series, (extra.min(11), 11), &w).unwrap();
        let wide = cumulative_influence(&dev, 0.0, &series, (0, 11), &w).unwrap();
        prop_assert_eq!(narrow, wide);
    }
}

#[test]
fn cumulative_influence_examples() {
    let one = |_: usize| 1.0;
    let damped: Vec<_> = (0..5).map(|t| rec(t, 1.0, -0.1)).collect();
    assert_eq!(
        cumulative_influence(&[9.0; 5], 0.0, &damped, (0, 4), &one).unwrap(),
        0.0
    );

    let mut s = damped.clone();
    s[2].d = 0.3;
    assert_eq!(cumulative_influence(&[1.5; 5], 1.0, &s, (0, 4), &one).unwrap(), 0.5);

    let mut s = damped;
    s[3].d = 1.0;
    s[4].d = 1.0;
    let half = |d: usize| 0.5f64.powi(d as i32);
    assert_eq!(cumulative_influence(&[0.5; 5], 0.0, &s, (0, 4), &half).unwrap(), 0.75);

    assert!(matches!(
        cumulative_influence(&[0.5; 5], 0.0, &s, (3, 2), &one),
        Err(Error::InvalidWindow { t0: 3, t1: 2 })
    ));
    assert!(cumulative_influence(&[0.5; 5], 0.0, &s, (0, 5), &one).is_err());
}

#[test]
fn influence_never_reads_past_the_window() {
    let series: Vec<_> = (0..10).map(|t| rec(t, 1.0, 1.0)).collect();
    let mut sig = vec![0.3; 10];
    let w = |_: usize| 1.0;
    let a = cumulative_influence(&sig, 0.0, &series, (2, 6), &w).unwrap();
    sig[7] = 100.0;
    sig[9] = -50.0;
    assert_eq!(a, cumulative_influence(&sig, 0.0, &series, (2, 6), &w).unwrap());
}

#[test]
fn omega_shapes() {
    let e = Omega::half_at(10);
    assert_eq!(e.weight(0), 1.0);
    assert!((e.weight(10) - 0.5).abs() < 1e-15);
    let l = Omega::Linear { span: 4 };
    assert_eq!(l.weight(0), 1.0);
    assert!(l.weight(1) > l.weight(2));
    assert!(l.weight(100) > 0.0);
    assert_eq!(Omega::Constant.weight(7), 1.0);
    assert_eq!(influence_window(12, 10, Some(5)), (5, 12));
    assert_eq!(influence_window(12, 10, Some(14)), (2, 12));
    assert_eq!(influence_window(3, 10, None), (0, 3));
}

/// Three agents. Agent 2 is flagged first; its critic reacts to agent 0's
/// action with positive curvature. Agent 0's critic reacts to agent 1,
/// whose signal stays at baseline.
fn three_agent_case() -> (Episode, Vec<CriticNet>, Vec<Vec<f64>>, StabilityProfile) {
    let ep = episode_with_actions(vec![vec![vec![0.6, 0.4]; 3]; 12]);
    let critics = vec![
        quadratic_action_critic(1, &[2, 2, 2], 1, &[0.0, 0.0], 1.0).unwrap(),
        zero_critic(3, 2),
        quadratic_action_critic(1, &[2, 2, 2], 0, &[0.0, 0.0], 1.0).unwrap(),
    ];
    let mut signals = vec![vec![1.0; 12]; 3];
    for t in 3..12 {
        signals[0][t] = 1.0 + 0.8 * (t - 2) as f64;
    }
    for t in 6..12 {
        signals[2][t] = 20.0;
    }
    signals[1][4] = 1.05;
    let prof = profile(&[1.0, 1.0, 1.0], &[0.05, 0.05, 0.05]);
    (ep, critics, signals, prof)
}

#[test]
fn traceback_walks_to_the_accelerating_source() {
    let (ep, critics, signals, prof) = three_agent_case();
    let mut report = detect_from_signals(&signals, &prof.thresholds()).unwrap();
    assert_eq!(report.stage1_candidate, Some(AgentId(0)));
    // pretend agent 0 was never flagged so agent 2 leads
    report.detection_times[0] = None;
    report.stage1_candidate = Some(AgentId(2));
    report.stage1_time = Some(6);
    let tb = traceback(&report, &ep, &critics, &signals, &prof, &TracebackConfig::default())
        .unwrap()
        .unwrap();
    assert_eq!(tb.chain, vec![AgentId(2), AgentId(0)]);
    assert_eq!(tb.rounds.len(), 2);
    assert_eq!(tb.rounds[1].stop, Some(StopReason::Negligible));
    apply_traceback(&mut report, Some(tb));
    assert_eq!(report.final_patient0, Some(AgentId(0)));
}

#[test]
fn negligible_round_confirms_stage1() {
    let (ep, critics, mut signals, prof) = three_agent_case();
    signals[0] = vec![1.0; 12];
    let report = detect_from_signals(&signals, &prof.thresholds()).unwrap();
    assert_eq!(report.stage1_candidate, Some(AgentId(2)));
    let tb = traceback(&report, &ep, &critics, &signals, &prof, &TracebackConfig::default())
        .unwrap()
        .unwrap();
    assert_eq!(tb.chain, vec![AgentId(2)]);
    assert_eq!(tb.rounds[0].stop, Some(StopReason::Negligible));
}

#[test]
fn cycles_stop_the_walk() {
    let (ep, mut critics, signals, prof) = three_agent_case();
    // agent 0's critic now points back at agent 2
    critics[0] = quadratic_action_critic(1, &[2, 2, 2], 2, &[0.0, 0.0], 1.0).unwrap();
    let mut report = detect_from_signals(&signals, &prof.thresholds()).unwrap();
    report.detection_times[0] = None;
    report.stage1_candidate = Some(AgentId(2));
    report.stage1_time = Some(6);
    let tb = traceback(&report, &ep, &critics, &signals, &prof, &TracebackConfig::default())
        .unwrap()
        .unwrap();
    assert_eq!(tb.chain, vec![AgentId(2), AgentId(0)]);
    assert_eq!(tb.rounds.last().unwrap().stop, Some(StopReason::WouldCycle));
    assert!(tb.chain.len() <= 3);
}

#[test]
fn scaling_omega_keeps_the_chain() {
    let (ep, critics, signals, prof) = three_agent_case();
    let mut report = detect_from_signals(&signals, &prof.thresholds()).unwrap();
    report.detection_times[0] = None;
    report.stage1_candidate = Some(AgentId(2));
    report.stage1_time = Some(6);
    let cfg = TracebackConfig::default();
    let base = traceback(&report, &ep, &critics, &signals, &prof, &cfg)
        .unwrap()
        .unwrap();
    for c in [0.1, 3.0, 17.0] {
        let w = move |d: usize| c * cfg.omega.weight(d);
        let scaled = traceback_weighted(&report, &ep, &critics, &signals, &prof, &cfg, &w)
            .unwrap()
            .unwrap();
        assert_eq!(scaled.chain, base.chain);
        for (a, b) in base.rounds[0].influences.iter().zip(&scaled.rounds[0].influences) {
            assert!((b.value - c * a.value).abs() <= 1e-12 * b.value.abs().max(1.0));
        }
    }
}

#[test]
fn no_detection_skips_traceback() {
    let (ep, critics, _, prof) = three_agent_case();
    let mut report = detect_from_signals(&vec![vec![0.0; 12]; 3], &prof.thresholds()).unwrap();
    let tb = traceback(
        &report,
        &ep,
        &critics,
        &[vec![0.0; 12], vec![0.0; 12], vec![0.0; 12]],
        &prof,
        &TracebackConfig::default(),
    )
    .unwrap();
    assert!(tb.is_none());
    apply_traceback(&mut report, tb);
    assert!(report.traceback_chain.is_empty());
    assert!(!report.notes.is_empty());
}

#[test]
fn fraction_of_max_only_stops_on_zero() {
    let (ep, critics, signals, prof) = three_agent_case();
    let mut report = detect_from_signals(&signals, &prof.thresholds()).unwrap();
    report.detection_times[0] = None;
    report.stage1_candidate = Some(AgentId(2));
    report.stage1_time = Some(6);
    let cfg = TracebackConfig {
        negligibility: Negligibility::FractionOfMax { fraction: 0.05 },
        ..TracebackConfig::default()
    };
    let tb = traceback(&report, &ep, &critics, &signals, &prof, &cfg)
        .unwrap()
        .unwrap();
    // agent 1's small excursion into agent 0 is no longer negligible
    assert_eq!(tb.chain, vec![AgentId(2), AgentId(0), AgentId(1)]);
}

#[test]
fn csv_export() {
    let csv = pair_series_csv(&[rec(0, 1.0, 2.0), rec(1, 0.5, -1.0)]).unwrap();
    assert_eq!(csv.lines().next(), Some("t,j,i,G,D,kappa"));
    assert_eq!(csv.lines().count(), 3);
}
