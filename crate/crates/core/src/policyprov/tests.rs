use super::*;
use crate::diff::{critic_grad_block, one_hot};
use crate::env::{move_vector, rollout};
use crate::episode::{Episode, TimeStep};
use crate::stage1::{agent_signal, probe_rng, ProbeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn chain3() -> EnvConfig {
    EnvConfig::chain(vec![vec![0.0, 0.0, 0.0], vec![0.6, 0.0, 0.0], vec![0.0, 0.6, 0.0]])
}

fn greedy_move(p: &PolicyNet, o: &[f64]) -> [f64; 2] {
    move_vector(&one_hot(ACTION_COUNT, p.greedy(o).unwrap()))
}

#[test]
fn chain_policy_holds_station_and_returns() {
    let config = chain3();
    let p = scripted_policy(&config, AgentId(1)).unwrap();
    let mut o = vec![0.3, -0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    assert_eq!(p.greedy(&o).unwrap(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        o[2] = rng.random_range(0.1..1.0);
        o[3] = rng.random_range(-0.05..0.05);
        assert!(greedy_move(&p, &o)[0] < 0.0);
    }
    assert_eq!(p, scripted_policy(&config, AgentId(1)).unwrap());
}

#[test]
fn spread_policy_heads_for_its_landmark() {
    let config = EnvConfig::spread(3);
    let p = scripted_policy(&config, AgentId(0)).unwrap();
    // at the landmark, at rest, teammates far away
    let mut o = vec![0.0; config.obs_dim()];
    o[10] = 1.5;
    o[12] = -1.5;
    o[13] = 1.2;
    assert_eq!(p.greedy(&o).unwrap(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        // agent east of its landmark: offset l − p points west
        o[4] = -rng.random_range(0.2..1.0);
        o[5] = rng.random_range(-0.05..0.05);
        assert!(greedy_move(&p, &o)[0] < 0.0);
    }
    assert_eq!(p, scripted_policy(&config, AgentId(0)).unwrap());
}

#[test]
fn unsupported_agent_is_rejected() {
    assert!(scripted_policy(&EnvConfig::spread(2), AgentId(2)).is_err());
}

#[test]
fn scripted_policies_have_curvature() {
    for config in [chain3(), EnvConfig::spread(3)] {
        let policies = scripted_policies(&config, &ScriptedGains::default()).unwrap();
        let ep = rollout(&config, 4, &policies, None).unwrap();
        let probe = ProbeConfig::default();
        let mut nonzero = 0;
        let mut total = 0;
        for step in &ep.steps {
            for (i, p) in policies.iter().enumerate() {
                let s = agent_signal(p, &step.observations[i], &probe, &mut probe_rng(&probe, 0, i, step.t)).unwrap();
                total += 1;
                if s > 0.0 {
                    nonzero += 1;
                }
            }
        }
        assert!(nonzero * 10 >= total * 9, "{nonzero}/{total}");
    }
}

#[test]
fn chain_critic_sees_exactly_the_coupled_agents() {
    let config = chain3();
    let critics = scripted_critics(&config, &ScriptedGains::default()).unwrap();
    let policies = scripted_policies(&config, &ScriptedGains::default()).unwrap();
    let ep = rollout(&config, 9, &policies, None).unwrap();
    let st = &ep.steps[3];
    for i in 0..3 {
        for j in 0..3 {
            let g = critic_grad_block(&critics[i], &st.global_state, &st.actions, j).unwrap();
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let coupled = i == j || (i == j + 1);
            assert_eq!(norm > 0.0, coupled, "pair {j}->{i}");
        }
    }
}

#[test]
fn spread_critic_is_flat_in_far_teammates() {
    let config = EnvConfig::spread(3);
    let critic = scripted_critic(&config, AgentId(0)).unwrap();
    let mut s = vec![0.0; config.state_dim()];
    s[2] = 1.0; // agent 1 far to the east
    s[4] = -1.0; // agent 2 far to the west
    let a = vec![vec![0.2; ACTION_COUNT]; 3];
    let g = critic_grad_block(&critic, &s, &a, 1).unwrap();
    assert!(g.iter().all(|v| *v == 0.0));
    s[2] = 0.1;
    let g = critic_grad_block(&critic, &s, &a, 1).unwrap();
    assert!(g.iter().any(|v| *v != 0.0));
}

fn synthetic(rng: &mut ChaCha8Rng, rewards: impl Fn(&[f64]) -> f64, len: usize) -> Episode {
    Episode {
        env_id: "chain".into(),
        n: 2,
        seed: 0,
        failure_plan: None,
        steps: (0..len)
            .map(|t| {
                let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a: Vec<Vec<f64>> = (0..2)
                    .map(|_| (0..2).map(|_| rng.random_range(0.0..1.0)).collect())
                    .collect();
                let mut x = s.clone();
                x.extend(a.iter().flatten());
                TimeStep {
                    t,
                    global_state: s,
                    observations: vec![vec![0.0]; 2],
                    actions: a,
                    reward: rewards(&x),
                    attacked_agents: vec![],
                }
            })
            .collect(),
    }
}

#[test]
fn zero_rewards_fit_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps: Vec<Episode> = (0..3).map(|_| synthetic(&mut rng, |_| 0.0, 10)).collect();
    for hidden in [vec![], vec![8]] {
        let fit = ProbeFit {
            target: TargetKind::MonteCarlo,
            hidden,
            epochs: 50,
            ..ProbeFit::default()
        };
        let c = fit_probe_critic(&eps, AgentId(0), &fit).unwrap();
        for st in eps.iter().flat_map(|e| &e.steps) {
            assert!(c.q(&st.global_state, &st.actions).unwrap().abs() < 1e-3);
        }
    }
}

#[test]
fn linear_returns_are_recovered() {
    let w = [0.5, -1.25, 2.0, 0.75, -0.3, 1.1, 0.2];
    let bias = -0.4;
    let gamma = 0.9;
    let lin = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + bias;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut eps = Vec::new();
    for _ in 0..5 {
        let mut e = synthetic(&mut rng, |_| 0.0, 20);
        // choose rewards so the discounted return is exactly linear
        let g: Vec<f64> = e
            .steps
            .iter()
            .map(|s| {
                let mut x = s.global_state.clone();
                x.extend(s.actions.iter().flatten());
                lin(&x)
            })
            .collect();
        for t in 0..g.len() {
            e.steps[t].reward = g[t] - if t + 1 < g.len() { gamma * g[t + 1] } else { 0.0 };
        }
        eps.push(e);
    }
    let fit = ProbeFit {
        target: TargetKind::MonteCarlo,
        gamma,
        hidden: vec![],
        ..ProbeFit::default()
    };
    let c = fit_probe_critic(&eps, AgentId(1), &fit).unwrap();
    let params = c.net().params();
    for (k, wk) in w.iter().enumerate() {
        assert!((params.weight(0, 0, k) - wk).abs() <= 1e-3 * wk.abs());
    }
    assert!((params.bias(0, 0) - bias).abs() <= 1e-3 * bias.abs());
}

#[test]
fn td_with_zero_gamma_is_reward_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps: Vec<Episode> = (0..4)
        .map(|_| synthetic(&mut rng, |x| x[0] * x[0] - x[3], 15))
        .collect();
    let td = ProbeFit {
        target: TargetKind::Td,
        gamma: 0.0,
        hidden: vec![],
        ..ProbeFit::default()
    };
    let mc = ProbeFit {
        target: TargetKind::MonteCarlo,
        gamma: 0.0,
        hidden: vec![],
        ..ProbeFit::default()
    };
    let a = fit_probe_critic(&eps, AgentId(0), &td).unwrap();
    let b = fit_probe_critic(&eps, AgentId(0), &mc).unwrap();
    for (x, y) in a.net().params().values().iter().zip(b.net().params().values()) {
        assert!((x - y).abs() < 1e-9);
    }
    assert!(fit_probe_critic(&[], AgentId(0), &td).is_err());
}

#[test]
fn probe_critics_are_differentiable_everywhere() {
    let config = chain3();
    let policies = scripted_policies(&config, &ScriptedGains::default()).unwrap();
    let eps: Vec<Episode> = (0..3).map(|s| rollout(&config, s, &policies, None).unwrap()).collect();
    let fit = ProbeFit {
        epochs: 20,
        hidden: vec![8],
        ..ProbeFit::default()
    };
    let c = fit_probe_critic(&eps, AgentId(2), &fit).unwrap();
    for j in 0..3 {
        let st = &eps[0].steps[5];
        assert!(critic_grad_block(&c, &st.global_state, &st.actions, j).is_ok());
    }
}

fn tiny_hyper(lr: f64) -> TrainHyper {
    TrainHyper {
        episodes: 3,
        hidden: 8,
        actor_lr: lr,
        critic_lr: lr,
        batch: 8,
        updates_per_episode: 2,
        eval_episodes: 2,
        seed: 7,
        ..TrainHyper::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let config = EnvConfig::spread(2);
    let a = train_lite(&config, &tiny_hyper(0.0)).unwrap();
    let mut untouched = tiny_hyper(0.0);
    untouched.episodes = 0;
    let b = train_lite(&config, &untouched).unwrap();
    assert_eq!(a.policies, b.policies);
    for (x, y) in a.critics.iter().zip(&b.critics) {
        assert_eq!(x.net().params(), y.net().params());
    }
}

#[test]
fn training_is_reproducible() {
    let config = EnvConfig::spread(2);
    let a = train_lite(&config, &tiny_hyper(1e-2)).unwrap();
    let b = train_lite(&config, &tiny_hyper(1e-2)).unwrap();
    assert_eq!(a.policies, b.policies);
    assert_eq!(a.mean_reward.to_bits(), b.mean_reward.to_bits());
}
