//! Differentiable evaluation of small policies and centralized critics.
//!
//! Everything here is implemented from scratch: forward passes, reverse-mode
//! input gradients, Hessian-vector products and explicit second-derivative
//! blocks with respect to one agent's action slice.

mod format;
mod models;
mod net;
mod objective;
mod scalar;

pub use format::{read_net_file, write_net_file, NetFile};
pub use models::{CriticNet, PolicyNet};
pub use net::{argmax, softmax, Activation, LayerLayout, Mlp, NetSpec, OutputHead, ParamVector, Trace};
pub use objective::{
    grad_input, hessian_input, hvp_input, value_grad, ActionCost, CriticCost, Objective, QuadraticForm, Restricted,
};
pub use scalar::{Dual, Scalar};

use crate::error::{Error, Result};

/// Action probabilities `π(· | o)`.
pub fn policy_forward(policy: &PolicyNet, o: &[f64]) -> Result<Vec<f64>> {
    policy.probs(o)
}

/// `−Σ_a τ(a) log π(a | o)` for a one-hot `tau`.
pub fn action_cost(policy: &PolicyNet, o: &[f64], tau: &[f64]) -> Result<f64> {
    if tau.len() != policy.action_count() {
        return Err(Error::dim("one-hot target", policy.action_count(), tau.len()));
    }
    let hot: Vec<usize> = tau
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect();
    if hot.len() != 1 || tau[hot[0]] != 1.0 {
        return Err(Error::InvalidConfig("target must be one-hot".into()));
    }
    let p = policy.probs(o)?;
    if p[hot[0]] == 0.0 {
        return Err(Error::ZeroProbability);
    }
    ActionCost::new(policy, hot[0])?.value(o)
}

/// One-hot vector of length `n` with a 1 at `k`.
pub fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// `g_ij = ∂(−Q)/∂a_j` at `(s, a_joint)`.
pub fn critic_grad_block(critic: &CriticNet, s: &[f64], a_joint: &[Vec<f64>], j: usize) -> Result<Vec<f64>> {
    let x = critic.input(s, a_joint)?;
    let slice = critic.action_slice(j)?;
    let cost = CriticCost { critic };
    let g = grad_input(&cost, &x)?;
    Ok(g[slice].to_vec())
}

/// `H_ij = ∂²(−Q)/∂a_j²`, assembled from Hessian-vector products restricted
/// to the `a_j` slice and symmetrized. Also returns the pre-symmetrization
/// asymmetry.
pub fn critic_hessian_block_with_asymmetry(
    critic: &CriticNet,
    s: &[f64],
    a_joint: &[Vec<f64>],
    j: usize,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let x = critic.input(s, a_joint)?;
    let slice = critic.action_slice(j)?;
    let cost = CriticCost { critic };
    let restricted = Restricted {
        inner: &cost,
        base: &x,
        slice: slice.clone(),
    };
    hessian_input(&restricted, &x[slice])
}

pub fn critic_hessian_block(critic: &CriticNet, s: &[f64], a_joint: &[Vec<f64>], j: usize) -> Result<Vec<Vec<f64>>> {
    Ok(critic_hessian_block_with_asymmetry(critic, s, a_joint, j)?.0)
}

/// Gradient and Hessian block together, sharing one critic input.
pub fn critic_blocks(
    critic: &CriticNet,
    s: &[f64],
    a_joint: &[Vec<f64>],
    j: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let x = critic.input(s, a_joint)?;
    let slice = critic.action_slice(j)?;
    let cost = CriticCost { critic };
    let restricted = Restricted {
        inner: &cost,
        base: &x,
        slice: slice.clone(),
    };
    let g = grad_input(&restricted, &x[slice.clone()])?;
    let (h, _) = hessian_input(&restricted, &x[slice])?;
    Ok((g, h))
}

pub use models::quadratic_action_critic;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn central_diff<F: Objective>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[k] += h;
                xm[k] -= h;
                (f.value(&xp).unwrap() - f.value(&xm).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn random_policy(rng: &mut ChaCha8Rng, widths: Vec<usize>) -> PolicyNet {
        let spec = NetSpec::uniform(widths, Activation::Tanh, OutputHead::Softmax { temperature: 1.0 }).unwrap();
        let params = ParamVector::glorot(&spec, rng).unwrap();
        PolicyNet::new(Mlp::new(spec, params).unwrap()).unwrap()
    }

    fn random_critic(rng: &mut ChaCha8Rng, state: usize, dims: &[usize], hidden: usize) -> CriticNet {
        let input = state + dims.iter().sum::<usize>();
        let spec = NetSpec::uniform(vec![input, hidden, hidden, 1], Activation::Tanh, OutputHead::Linear).unwrap();
        let mut params = ParamVector::glorot(&spec, rng).unwrap();
        for v in params.values_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        CriticNet::new(Mlp::new(spec, params).unwrap(), state, dims).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_policy() {
        let spec = NetSpec::uniform(
            vec![3, 4, 4],
            Activation::Tanh,
            OutputHead::Softmax { temperature: 1.0 },
        )
        .unwrap();
        let policy = PolicyNet::new(Mlp::new(spec.clone(), ParamVector::zeros(&spec).unwrap()).unwrap()).unwrap();
        let p = policy_forward(&policy, &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn dominant_logit_wins() {
        let spec = NetSpec::uniform(vec![1, 3], Activation::Tanh, OutputHead::Softmax { temperature: 1.0 }).unwrap();
        let params = ParamVector::from_values(&spec, vec![0.0, 0.0, 0.0, 10.0, 0.0, 0.0]).unwrap();
        let policy = PolicyNet::new(Mlp::new(spec, params).unwrap()).unwrap();
        assert!(policy_forward(&policy, &[1.0]).unwrap()[0] > 0.9999);
    }

    #[test]
    fn two_layer_forward_matches_manual_arithmetic() {
        let spec = NetSpec::uniform(
            vec![2, 2, 3],
            Activation::Tanh,
            OutputHead::Softmax { temperature: 0.5 },
        )
        .unwrap();
        let w = vec![
            0.4, -0.3, 0.8, 0.1, 0.05, -0.1, 1.0, -1.0, 0.5, 0.2, -0.7, 0.3, 0.0, 0.1, -0.2,
        ];
        let policy =
            PolicyNet::new(Mlp::new(spec.clone(), ParamVector::from_values(&spec, w).unwrap()).unwrap()).unwrap();
        let o = [0.7, -1.2];
        let h = [
            (0.4 * 0.7 - 0.3 * -1.2 + 0.05f64).tanh(),
            (0.8 * 0.7 + 0.1 * -1.2 - 0.1f64).tanh(),
        ];
        let z = [
            1.0 * h[0] - 1.0 * h[1] + 0.0,
            0.5 * h[0] + 0.2 * h[1] + 0.1,
            -0.7 * h[0] + 0.3 * h[1] - 0.2,
        ];
        let e: Vec<f64> = z.iter().map(|v| (v / 0.5f64).exp()).collect();
        let s: f64 = e.iter().sum();
        let p = policy_forward(&policy, &o).unwrap();
        for k in 0..3 {
            assert!((p[k] - e[k] / s).abs() < 1e-12);
        }
    }

    #[test]
    fn action_cost_examples() {
        let spec = NetSpec::uniform(vec![2, 4], Activation::Tanh, OutputHead::Softmax { temperature: 1.0 }).unwrap();
        let uniform = PolicyNet::new(Mlp::new(spec.clone(), ParamVector::zeros(&spec).unwrap()).unwrap()).unwrap();
        let c = action_cost(&uniform, &[0.1, 0.2], &one_hot(4, 2)).unwrap();
        assert!((c - 4f64.ln()).abs() < 1e-12);

        // logits ln(0.7), ln(0.2), ln(0.1) as biases give π = (0.7, 0.2, 0.1)
        let spec3 = NetSpec::uniform(vec![1, 3], Activation::Tanh, OutputHead::Softmax { temperature: 1.0 }).unwrap();
        let params =
            ParamVector::from_values(&spec3, vec![0.0, 0.0, 0.0, 0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]).unwrap();
        let p = PolicyNet::new(Mlp::new(spec3.clone(), params).unwrap()).unwrap();
        let c = action_cost(&p, &[0.0], &one_hot(3, 0)).unwrap();
        assert!((c - 0.356675).abs() < 1e-6);

        let params = ParamVector::from_values(&spec3, vec![0.0, 0.0, 0.0, 30.0, 0.0, 0.0]).unwrap();
        let committed = PolicyNet::new(Mlp::new(spec3.clone(), params).unwrap()).unwrap();
        assert!(policy_forward(&committed, &[0.0]).unwrap()[0] > 1.0 - 1e-9);
        assert!(action_cost(&committed, &[0.0], &one_hot(3, 0)).unwrap() < 1e-8);

        let params = ParamVector::from_values(&spec3, vec![0.0, 0.0, 0.0, 800.0, 0.0, 0.0]).unwrap();
        let saturated = PolicyNet::new(Mlp::new(spec3, params).unwrap()).unwrap();
        assert!(matches!(
            action_cost(&saturated, &[0.0], &one_hot(3, 1)),
            Err(Error::ZeroProbability)
        ));
    }

    #[test]
    fn gradient_of_constant_policy_is_zero() {
        let spec = NetSpec::uniform(
            vec![3, 4, 5],
            Activation::Tanh,
            OutputHead::Softmax { temperature: 1.0 },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamVector::glorot(&spec, &mut rng).unwrap();
        for v in &mut params.values_mut()[0..12] {
            *v = 0.0;
        }
        let policy = PolicyNet::new(Mlp::new(spec, params).unwrap()).unwrap();
        let cost = ActionCost::new(&policy, 2).unwrap();
        assert_eq!(grad_input(&cost, &[0.5, -0.2, 1.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..25 {
            let policy = random_policy(&mut rng, vec![6, 8, 5]);
            let o: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cost = ActionCost::greedy_at(&policy, &o).unwrap();
            let g = grad_input(&cost, &o).unwrap();
            let fd = central_diff(&cost, &o, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_softmax_gradient_is_w_transpose_p_minus_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = NetSpec::uniform(vec![3, 4], Activation::Tanh, OutputHead::Softmax { temperature: 1.0 }).unwrap();
        let mut params = ParamVector::glorot(&spec, &mut rng).unwrap();
        for k in 12..16 {
            params.values_mut()[k] = 0.0;
        }
        let policy = PolicyNet::new(Mlp::new(spec, params.clone()).unwrap()).unwrap();
        let o = [0.2, -0.5, 0.9];
        let target = 1;
        let p = policy_forward(&policy, &o).unwrap();
        let g = grad_input(&ActionCost::new(&policy, target).unwrap(), &o).unwrap();
        for c in 0..3 {
            let expect: f64 = (0..4)
                .map(|r| params.weight(0, r, c) * (p[r] - if r == target { 1.0 } else { 0.0 }))
                .sum();
            assert!((g[c] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn hvp_of_quadratic_is_exact_and_linear() {
        let a = vec![vec![2.0, 0.5, -1.0], vec![0.5, 1.0, 0.0], vec![-1.0, 0.0, 3.0]];
        let q = QuadraticForm::new(a.clone()).unwrap();
        let x = [0.3, -0.1, 0.7];
        let v = [1.0, 2.0, -0.5];
        let hv = hvp_input(&q, &x, &v).unwrap();
        for r in 0..3 {
            let expect: f64 = (0..3).map(|c| a[r][c] * v[c]).sum();
            assert!((hv[r] - expect).abs() <= 1e-10);
        }
        assert_eq!(hvp_input(&q, &x, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn hvp_is_additive_on_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy = random_policy(&mut rng, vec![4, 6, 5]);
        let o = [0.1, 0.4, -0.3, 0.8];
        let cost = ActionCost::greedy_at(&policy, &o).unwrap();
        let v1 = [1.0, 0.0, -2.0, 0.5];
        let v2 = [0.3, 0.3, 0.1, -1.0];
        let sum: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + b).collect();
        let h1 = hvp_input(&cost, &o, &v1).unwrap();
        let h2 = hvp_input(&cost, &o, &v2).unwrap();
        let hs = hvp_input(&cost, &o, &sum).unwrap();
        for k in 0..4 {
            assert!((hs[k] - h1[k] - h2[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn critic_blocks_on_quadratic_probe() {
        let critic = quadratic_action_critic(2, &[2, 2], 1, &[0.0, 0.0], 1.0).unwrap();
        let s = [0.5, 0.5];
        let a = vec![vec![0.3, 0.3], vec![1.0, 2.0]];
        assert_eq!(critic_grad_block(&critic, &s, &a, 1).unwrap(), vec![1.0, 2.0]);
        assert_eq!(critic_grad_block(&critic, &s, &a, 0).unwrap(), vec![0.0, 0.0]);
        let h = critic_hessian_block(&critic, &s, &a, 1).unwrap();
        assert_eq!(h, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(critic_hessian_block(&critic, &s, &a, 0).unwrap(), vec![vec![0.0; 2]; 2]);
    }

    #[test]
    fn critic_linear_in_action_has_zero_curvature() {
        let spec = NetSpec::uniform(vec![4, 1], Activation::Tanh, OutputHead::Linear).unwrap();
        let params = ParamVector::from_values(&spec, vec![0.3, -1.0, 2.0, 0.5, 0.1]).unwrap();
        let critic = CriticNet::new(Mlp::new(spec, params).unwrap(), 2, &[2]).unwrap();
        let h = critic_hessian_block(&critic, &[0.1, 0.2], &[vec![0.4, 0.6]], 0).unwrap();
        assert_eq!(h, vec![vec![0.0; 2]; 2]);
        assert_eq!(
            critic_grad_block(&critic, &[0.1, 0.2], &[vec![0.4, 0.6]], 0).unwrap(),
            vec![-2.0, -0.5]
        );
    }

    #[test]
    fn critic_gradient_and_hessian_agree_with_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let critic = random_critic(&mut rng, 3, &[3, 4], 6);
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = vec![
                (0..3).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>(),
                (0..4).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>(),
            ];
            let x = critic.input(&s, &a).unwrap();
            let cost = CriticCost { critic: &critic };
            let fd = central_diff(&cost, &x, 1e-5);
            let g = critic_grad_block(&critic, &s, &a, 1).unwrap();
            for (k, gk) in g.iter().enumerate() {
                let b = fd[3 + 3 + k];
                assert!((gk - b).abs() <= 1e-5 * b.abs().max(1e-3));
            }
            let (h, asym) = critic_hessian_block_with_asymmetry(&critic, &s, &a, 1).unwrap();
            assert!(asym <= 1e-7);
            // each hessian column against differences of the exact gradient
            for c in 0..4 {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[1][c] += 1e-5;
                am[1][c] -= 1e-5;
                let gp = critic_grad_block(&critic, &s, &ap, 1).unwrap();
                let gm = critic_grad_block(&critic, &s, &am, 1).unwrap();
                for r in 0..4 {
                    let d = (gp[r] - gm[r]) / 2e-5;
                    assert!((h[r][c] - d).abs() <= 1e-5 * d.abs().max(1e-2));
                }
            }
        }
    }

    #[test]
    fn evaluation_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = random_policy(&mut rng, vec![5, 7, 5]);
        let o = [0.1, 0.2, 0.3, 0.4, 0.5];
        let cost = ActionCost::greedy_at(&policy, &o).unwrap();
        let a = grad_input(&cost, &o).unwrap();
        let b = grad_input(&cost, &o).unwrap();
        assert_eq!(a, b);
        let v = [1.0, -1.0, 0.5, 0.0, 2.0];
        assert_eq!(hvp_input(&cost, &o, &v).unwrap(), hvp_input(&cost, &o, &v).unwrap());
    }
}
