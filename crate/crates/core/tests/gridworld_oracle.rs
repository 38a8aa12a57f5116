//! Exhaustive-enumeration oracle on small gridworlds.
//!
//! Some deterministic stationary policy is optimal in every state at once,
//! so the elementwise maximum of `v_pi` over all `4^9` deterministic
//! policies is `v*`. Each `v_pi` is obtained by a direct linear solve.

use diffdac::envs::make_gridworld;
use diffdac::tabular::{average_mdps, tabular_actor_critic, StepSchedule, TabularMdp};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn enumerate_optimum(mdp: &TabularMdp) -> Vec<f64> {
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    let gamma = mdp.discount();
    let total = na.pow(ns as u32);
    let mut best = vec![f64::NEG_INFINITY; ns];
    let mut actions = vec![0usize; ns];
    for code in 0..total {
        let mut c = code;
        for a in actions.iter_mut() {
            *a = c % na;
            c /= na;
        }
        let mut m = DMatrix::<f64>::identity(ns, ns);
        let mut r = DVector::<f64>::zeros(ns);
        for s in 0..ns {
            let a = actions[s];
            r[s] = mdp.reward()[[s, a]];
            for t in 0..ns {
                m[(s, t)] -= gamma * mdp.transition()[[s, a, t]];
            }
        }
        let v = m.lu().solve(&r).expect("I - gamma P is invertible");
        for s in 0..ns {
            best[s] = best[s].max(v[s]);
        }
    }
    best
}

#[test]
fn actor_critic_matches_enumeration_on_two_task_gridworlds() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks: Vec<TabularMdp> = (0..2).map(|_| make_gridworld(3, 0.1, 0.9, &mut rng).unwrap()).collect();
        let avg = average_mdps(&tasks).unwrap();
        let v_star = enumerate_optimum(&avg);
        let sol = tabular_actor_critic(&tasks, StepSchedule::default(), 10_000, 1e-9).unwrap();
        let err = sol
            .value
            .iter()
            .zip(&v_star)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-2, "seed {seed}: |v - v*| = {err}");
    }
}

#[test]
fn single_task_enumeration_matches_identical_copies() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let task = make_gridworld(3, 0.2, 0.8, &mut rng).unwrap();
    let one = tabular_actor_critic(std::slice::from_ref(&task), StepSchedule::default(), 10_000, 1e-9).unwrap();
    let three = tabular_actor_critic(&[task.clone(), task.clone(), task.clone()], StepSchedule::default(), 10_000, 1e-9)
        .unwrap();
    let v_star = enumerate_optimum(&task);
    for s in 0..task.n_states() {
        assert!((one.value[s] - v_star[s]).abs() <= 1e-6);
        assert!((three.value[s] - v_star[s]).abs() <= 1e-6);
    }
}
