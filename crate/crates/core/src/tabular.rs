//! Exact finite-MDP machinery for the multitask problem.
//!
//! A family of tasks sharing state and action spaces is reduced to a single
//! averaged MDP whose reward, transition kernel and initial distribution are
//! the uniform convex combination of the tasks'. Optimizing the average value
//! over tasks is then a standard discounted control problem on that MDP, and
//! its LP Lagrangian yields a model-based actor-critic: the critic solves the
//! Bellman evaluation equation of the current policy and the actor performs
//! projected gradient ascent on the dual variable, whose partial derivatives
//! are the advantage function.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sums and distributions must hold within this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Above this many states policy evaluation iterates instead of factorizing.
pub const DIRECT_SOLVE_MAX_STATES: usize = 200;

/// A finite discounted MDP `(P, R, mu, gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Indexed `(s, a, s')`.
    transition: Array3<f64>,
    /// Indexed `(s, a)`.
    reward: Array2<f64>,
    initial_dist: Array1<f64>,
    discount: f64,
    reward_bound: f64,
}

impl TabularMdp {
    /// Builds and validates an MDP. The reward bound is taken as the largest
    /// absolute reward.
    pub fn new(
        transition: Array3<f64>,
        reward: Array2<f64>,
        initial_dist: Array1<f64>,
        discount: f64,
    ) -> Result<Self> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Argument("MDP needs at least one state and one action".into()));
        }
        if n_next != n_states {
            return Err(Error::Shape(format!(
                "transition is {n_states}x{n_actions}x{n_next}, expected last axis {n_states}"
            )));
        }
        if reward.dim() != (n_states, n_actions) {
            return Err(Error::Shape(format!(
                "reward is {:?}, expected ({n_states}, {n_actions})",
                reward.dim()
            )));
        }
        if initial_dist.len() != n_states {
            return Err(Error::Shape(format!(
                "initial distribution has {} entries, expected {n_states}",
                initial_dist.len()
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Argument(format!("discount {discount} outside [0, 1)")));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = transition.slice(ndarray::s![s, a, ..]);
                check_distribution(row, &format!("transition row ({s}, {a})"))?;
            }
        }
        check_distribution(initial_dist.view(), "initial distribution")?;
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("reward contains non-finite entries".into()));
        }
        let reward_bound = reward.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            initial_dist,
            discount,
            reward_bound,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    pub fn reward(&self) -> &Array2<f64> {
        &self.reward
    }

    pub fn initial_dist(&self) -> &Array1<f64> {
        &self.initial_dist
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// `R_max` with `|r(s, a)| <= R_max` for every pair.
    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    /// Returns a copy with a different discount factor.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            self.reward.clone(),
            self.initial_dist.clone(),
            discount,
        )
    }

    /// Expected next-state value `sum_{s'} P(s'|s,a) v(s')` for every pair.
    pub fn expected_next(&self, v: ArrayView1<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_states, self.n_actions));
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.transition.slice(ndarray::s![s, a, ..]);
                out[[s, a]] = row.dot(&v);
            }
        }
        out
    }

    /// `r(s,a) + gamma * sum_{s'} P(s'|s,a) v(s')`.
    pub fn q_values(&self, v: ArrayView1<f64>) -> Array2<f64> {
        let mut q = self.expected_next(v);
        q.mapv_inplace(|x| self.discount * x);
        q += &self.reward;
        q
    }

    /// Parses the structured text format (TOML).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: MdpFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        file.into_mdp()
    }

    pub fn to_toml_string(&self) -> String {
        let file = MdpFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            discount: self.discount,
            transition: self.transition.iter().copied().collect(),
            reward: self.reward.iter().copied().collect(),
            initial_dist: self.initial_dist.to_vec(),
        };
        toml::to_string(&file).expect("MDP file serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

fn check_distribution(row: ArrayView1<f64>, what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Invariant(format!("{what} has negative or non-finite entries")));
    }
    let total: f64 = row.sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Invariant(format!("{what} sums to {total}, expected 1")));
    }
    Ok(())
}

/// On-disk MDP description. Arrays are flattened row-major: `transition`
/// by `(s, a, s')`, `reward` by `(s, a)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub initial_dist: Vec<f64>,
}

impl MdpFile {
    pub fn into_mdp(self) -> Result<TabularMdp> {
        let (ns, na) = (self.n_states, self.n_actions);
        let transition = Array3::from_shape_vec((ns, na, ns), self.transition)
            .map_err(|e| Error::Shape(format!("transition: {e}")))?;
        let reward = Array2::from_shape_vec((ns, na), self.reward)
            .map_err(|e| Error::Shape(format!("reward: {e}")))?;
        TabularMdp::new(transition, reward, Array1::from(self.initial_dist), self.discount)
    }
}

/// The uniform average of a list of tasks, with the indices of its sources.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedMdp {
    mdp: TabularMdp,
    sources: Vec<usize>,
}

impl AveragedMdp {
    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    /// Indices (into the input list) of the averaged tasks.
    pub fn sources(&self) -> &[usize] {
        &self.sources
    }
}

impl std::ops::Deref for AveragedMdp {
    type Target = TabularMdp;

    fn deref(&self) -> &TabularMdp {
        &self.mdp
    }
}

/// Averages transition, reward and initial distribution element-wise.
/// The result is again a valid MDP: a convex combination of row-stochastic
/// kernels is row-stochastic.
pub fn average_mdps(tasks: &[TabularMdp]) -> Result<AveragedMdp> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::Argument("cannot average an empty task list".into()))?;
    for (k, task) in tasks.iter().enumerate().skip(1) {
        if task.n_states != first.n_states || task.n_actions != first.n_actions {
            return Err(Error::Shape(format!(
                "task {k} is {}x{}, task 0 is {}x{}",
                task.n_states, task.n_actions, first.n_states, first.n_actions
            )));
        }
        if task.discount != first.discount {
            return Err(Error::Shape(format!(
                "task {k} discount {} differs from {}",
                task.discount, first.discount
            )));
        }
    }
    let n = tasks.len() as f64;
    let mut transition = Array3::zeros(first.transition.dim());
    let mut reward = Array2::zeros(first.reward.dim());
    let mut initial = Array1::zeros(first.n_states);
    for task in tasks {
        transition.scaled_add(1.0, &task.transition);
        reward.scaled_add(1.0, &task.reward);
        initial.scaled_add(1.0, &task.initial_dist);
    }
    transition.mapv_inplace(|x| x / n);
    reward.mapv_inplace(|x| x / n);
    initial.mapv_inplace(|x| x / n);
    // Summation order can leave rows a few ulps away from 1.
    renormalize_rows(&mut transition);
    let total = initial.sum();
    initial.mapv_inplace(|x| x / total);
    let mdp = TabularMdp::new(transition, reward, initial, first.discount)?;
    Ok(AveragedMdp {
        mdp,
        sources: (0..tasks.len()).collect(),
    })
}

fn renormalize_rows(transition: &mut Array3<f64>) {
    for mut row in transition.lanes_mut(Axis(2)) {
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
}

/// A stochastic policy `pi(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (s, row) in probs.outer_iter().enumerate() {
            check_distribution(row, &format!("policy row {s}"))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    /// Deterministic policy picking `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::Argument(format!("action {a} out of range in state {s}")));
            }
            probs[[s, a]] = 1.0;
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }
}

/// Nonnegative LP dual variable `d(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVariable {
    d: Array2<f64>,
}

impl DualVariable {
    pub fn new(d: Array2<f64>) -> Result<Self> {
        if let Some(bad) = d.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(Error::Invariant(format!("dual variable entry {bad} is not >= 0")));
        }
        Ok(Self { d })
    }

    /// `d0(s, a) = mu(s) / |A|`: the initial distribution with uniform actions.
    pub fn from_initial_dist(mdp: &TabularMdp) -> Self {
        let na = mdp.n_actions as f64;
        let d = Array2::from_shape_fn((mdp.n_states, mdp.n_actions), |(s, _)| {
            mdp.initial_dist[s] / na
        });
        Self { d }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.d
    }

    /// State marginal `rho(s) = sum_a d(s, a)`.
    pub fn state_marginal(&self) -> Array1<f64> {
        self.d.sum_axis(Axis(1))
    }
}

/// Solves `v = r_pi + gamma P_pi v` to a sup-norm Bellman residual of `tol`.
///
/// Small problems are factorized directly; larger ones (or a direct solve
/// that misses `tol`) fall back to fixed-point iteration.
pub fn policy_evaluation(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    tol: f64,
) -> Result<Array1<f64>> {
    if !(tol > 0.0) {
        return Err(Error::Argument(format!("tolerance {tol} must be > 0")));
    }
    if policy.probs.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(Error::Shape(format!(
            "policy is {:?}, MDP is ({}, {})",
            policy.probs.dim(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    let (p_pi, r_pi) = policy_kernel(mdp, policy);
    let gamma = mdp.discount;
    let ns = mdp.n_states;

    let mut v = if ns <= DIRECT_SOLVE_MAX_STATES {
        let a = DMatrix::from_fn(ns, ns, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            id - gamma * p_pi[[i, j]]
        });
        let b = DVector::from_iterator(ns, r_pi.iter().copied());
        match a.lu().solve(&b) {
            Some(x) => Array1::from_iter(x.iter().copied()),
            None => Array1::zeros(ns),
        }
    } else {
        Array1::zeros(ns)
    };

    let evaluate = |v: &Array1<f64>| -> Array1<f64> { &r_pi + &(p_pi.dot(v) * gamma) };
    let max_iters = iteration_budget(gamma, tol, mdp.reward_bound);
    let mut residual = f64::INFINITY;
    for _ in 0..=max_iters {
        let next = evaluate(&v);
        residual = sup_distance(next.view(), v.view());
        if residual <= tol {
            return Ok(v);
        }
        v = next;
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        residual,
    })
}

fn iteration_budget(gamma: f64, tol: f64, r_max: f64) -> usize {
    // Residual contracts by gamma per sweep from at most 2 R_max / (1 - gamma).
    let start = (2.0 * r_max / (1.0 - gamma)).max(1.0);
    let needed = if gamma > 0.0 {
        ((tol / start).ln() / gamma.ln()).ceil().max(0.0) as usize
    } else {
        1
    };
    needed.saturating_mul(2).saturating_add(100)
}

/// `P_pi(s, s')` and `r_pi(s)` under a stochastic policy.
pub fn policy_kernel(mdp: &TabularMdp, policy: &TabularPolicy) -> (Array2<f64>, Array1<f64>) {
    let ns = mdp.n_states;
    let mut p_pi = Array2::zeros((ns, ns));
    let mut r_pi = Array1::zeros(ns);
    for s in 0..ns {
        for a in 0..mdp.n_actions {
            let w = policy.probs[[s, a]];
            if w == 0.0 {
                continue;
            }
            r_pi[s] += w * mdp.reward[[s, a]];
            let row = mdp.transition.slice(ndarray::s![s, a, ..]);
            p_pi.row_mut(s).scaled_add(w, &row);
        }
    }
    (p_pi, r_pi)
}

/// The Bellman optimality operator `(Tv)(s) = max_a [r(s,a) + gamma E v(s')]`.
pub fn bellman_optimality_apply(mdp: &TabularMdp, v: ArrayView1<f64>) -> Array1<f64> {
    let q = mdp.q_values(v);
    q.outer_iter()
        .map(|row| row[argmax_lowest(row)])
        .collect()
}

/// Greedy action per state, ties broken by the lowest action index.
pub fn greedy_actions(mdp: &TabularMdp, v: ArrayView1<f64>) -> Vec<usize> {
    let q = mdp.q_values(v);
    q.outer_iter().map(argmax_lowest).collect()
}

fn argmax_lowest(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (a, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = a;
        }
    }
    best
}

pub(crate) fn sup_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Iterates the optimality operator until `||Tv - v|| <= tol` and returns
/// the last `v` (whose residual met the tolerance).
pub fn value_iteration(mdp: &TabularMdp, tol: f64, max_iters: usize) -> Result<Array1<f64>> {
    if !(tol > 0.0) {
        return Err(Error::Argument(format!("tolerance {tol} must be > 0")));
    }
    let mut v = Array1::zeros(mdp.n_states);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let next = bellman_optimality_apply(mdp, v.view());
        residual = sup_distance(next.view(), v.view());
        if residual <= tol {
            return Ok(v);
        }
        v = next;
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        residual,
    })
}

/// `A(s,a) = r(s,a) + gamma sum_{s'} P(s'|s,a) v(s') - v(s)`, which is also
/// the partial derivative of the Lagrangian with respect to `d(s, a)`.
pub fn advantage_tabular(mdp: &TabularMdp, v: ArrayView1<f64>) -> Array2<f64> {
    let mut q = mdp.q_values(v);
    for (mut row, vs) in q.outer_iter_mut().zip(v.iter()) {
        row.mapv_inplace(|x| x - vs);
    }
    q
}

/// `L(v, d) = mu^T v + sum_{s,a} d(s,a) A(s,a)`.
pub fn lagrangian_value(v: ArrayView1<f64>, d: &DualVariable, mdp: &TabularMdp) -> f64 {
    let adv = advantage_tabular(mdp, v);
    mdp.initial_dist.dot(&v) + (&d.d * &adv).sum()
}

/// `pi(a|s) = d(s,a) / rho(s)`; uniform where `rho(s) = 0`.
pub fn policy_from_dual(d: &DualVariable) -> Result<TabularPolicy> {
    if let Some(bad) = d.d.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::Invariant(format!("dual variable entry {bad} is negative")));
    }
    let na = d.d.ncols();
    let mut probs = d.d.clone();
    for mut row in probs.outer_iter_mut() {
        let rho = row.sum();
        if rho > 0.0 {
            row.mapv_inplace(|x| x / rho);
            // Keep rows stochastic to the last ulp.
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        } else {
            row.fill(1.0 / na as f64);
        }
    }
    Ok(TabularPolicy { probs })
}

/// Projected ascent `d' = max(0, d + step * A)`.
pub fn dual_ascent_step(d: &DualVariable, advantage: &Array2<f64>, step: f64) -> Result<DualVariable> {
    if advantage.dim() != d.d.dim() {
        return Err(Error::Shape(format!(
            "advantage is {:?}, dual variable is {:?}",
            advantage.dim(),
            d.d.dim()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::Argument(format!("step {step} must be > 0")));
    }
    let mut next = d.d.clone();
    next.zip_mut_with(advantage, |x, a| *x = (*x + step * a).max(0.0));
    Ok(DualVariable { d: next })
}

/// Step-size schedule of the dual ascent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { step: f64 },
    /// `step / (i + 1)` at iteration `i`.
    Harmonic { step: f64 },
}

impl StepSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        match *self {
            StepSchedule::Constant { step } => step,
            StepSchedule::Harmonic { step } => step / (iteration as f64 + 1.0),
        }
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Constant { step: 1.0 }
    }
}

/// Output of the tabular actor-critic.
#[derive(Debug, Clone)]
pub struct TabularSolution {
    pub value: Array1<f64>,
    pub dual: DualVariable,
    pub policy: TabularPolicy,
    /// Iterations actually performed.
    pub iterations: usize,
    /// `max_{s,a} A(s,a)` at the returned value; zero at the optimum.
    pub max_advantage: f64,
}

/// Model-based actor-critic on the averaged MDP.
///
/// Each iteration evaluates the current policy exactly (critic), which
/// satisfies complementary slackness, then ascends the dual variable along
/// the advantage and renormalizes it into a policy (actor). Stops early once
/// no state-action pair has advantage above `tol`.
pub fn tabular_actor_critic(
    tasks: &[TabularMdp],
    schedule: StepSchedule,
    iters: usize,
    tol: f64,
) -> Result<TabularSolution> {
    if iters == 0 {
        return Err(Error::Argument("iters must be > 0".into()));
    }
    let avg = average_mdps(tasks)?;
    let mdp = avg.mdp();
    let mut dual = DualVariable::from_initial_dist(mdp);
    let mut policy = policy_from_dual(&dual)?;
    let mut value = policy_evaluation(mdp, &policy, tol)?;
    let mut advantage = advantage_tabular(mdp, value.view());
    let mut iterations = 0;
    while iterations < iters {
        if max_entry(&advantage) <= tol {
            break;
        }
        dual = dual_ascent_step(&dual, &advantage, schedule.at(iterations))?;
        policy = policy_from_dual(&dual)?;
        value = policy_evaluation(mdp, &policy, tol)?;
        advantage = advantage_tabular(mdp, value.view());
        iterations += 1;
    }
    Ok(TabularSolution {
        max_advantage: max_entry(&advantage),
        value,
        dual,
        policy,
        iterations,
    })
}

fn max_entry(a: &Array2<f64>) -> f64 {
    a.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x))
}

/// A random MDP: Dirichlet(1) transition rows and initial distribution,
/// rewards uniform in `[-1, 1]`.
pub fn random_mdp<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    discount: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    let mut transition = Array3::zeros((n_states, n_actions, n_states));
    for mut row in transition.lanes_mut(Axis(2)) {
        fill_simplex(row.as_slice_mut().expect("contiguous lane"), rng);
    }
    let reward = Array2::from_shape_fn((n_states, n_actions), |_| rng.gen_range(-1.0..=1.0));
    let mut initial = vec![0.0; n_states];
    fill_simplex(&mut initial, rng);
    TabularMdp::new(transition, reward, Array1::from(initial), discount)
}

fn fill_simplex<R: Rng + ?Sized>(out: &mut [f64], rng: &mut R) {
    // Normalized exponentials are a uniform draw from the simplex.
    for x in out.iter_mut() {
        *x = -(1.0 - rng.gen::<f64>()).ln();
    }
    let total: f64 = out.iter().sum();
    for x in out.iter_mut() {
        *x /= total;
    }
    let total: f64 = out.iter().sum();
    for x in out.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_state(rewards: &[f64], gamma: f64) -> TabularMdp {
        let na = rewards.len();
        TabularMdp::new(
            Array3::ones((1, na, 1)),
            Array2::from_shape_vec((1, na), rewards.to_vec()).unwrap(),
            array![1.0],
            gamma,
        )
        .unwrap()
    }

    /// Value of a policy by fixed-point iteration to machine precision,
    /// independent of the linear solve.
    fn evaluate_by_iteration(mdp: &TabularMdp, policy: &TabularPolicy) -> Array1<f64> {
        let (p, r) = policy_kernel(mdp, policy);
        let mut v = Array1::zeros(mdp.n_states());
        for _ in 0..5000 {
            v = &r + &(p.dot(&v) * mdp.discount());
        }
        v
    }

    /// Best value over all deterministic policies, state by state.
    fn enumerate_deterministic(mdp: &TabularMdp) -> Array1<f64> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut best = Array1::from_elem(ns, f64::NEG_INFINITY);
        let total = na.pow(ns as u32);
        let mut actions = vec![0usize; ns];
        for code in 0..total {
            let mut c = code;
            for a in actions.iter_mut() {
                *a = c % na;
                c /= na;
            }
            let pol = TabularPolicy::deterministic(&actions, na).unwrap();
            let v = policy_evaluation(mdp, &pol, 1e-12).unwrap();
            best.zip_mut_with(&v, |b, x| *b = b.max(*x));
        }
        best
    }

    #[test]
    fn rejects_bad_rows() {
        let mut p = Array3::zeros((1, 1, 1));
        p[[0, 0, 0]] = 0.9;
        let err = TabularMdp::new(p, Array2::zeros((1, 1)), array![1.0], 0.5).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn average_of_identical_tasks_is_the_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mdp(4, 2, 0.9, &mut rng).unwrap();
        let avg = average_mdps(&[m.clone(), m.clone()]).unwrap();
        for (x, y) in avg.transition().iter().zip(m.transition().iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        assert_eq!(avg.reward(), m.reward());
        assert_eq!(avg.sources(), &[0, 1]);
    }

    #[test]
    fn average_of_opposite_deterministic_moves() {
        let mk = |next: usize| {
            let mut p = Array3::zeros((2, 1, 2));
            p[[0, 0, next]] = 1.0;
            p[[1, 0, 1]] = 1.0;
            TabularMdp::new(p, Array2::zeros((2, 1)), array![1.0, 0.0], 0.9).unwrap()
        };
        let avg = average_mdps(&[mk(0), mk(1)]).unwrap();
        assert_eq!(avg.transition()[[0, 0, 0]], 0.5);
        assert_eq!(avg.transition()[[0, 0, 1]], 0.5);
    }

    #[test]
    fn average_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tasks: Vec<_> = (0..5).map(|_| random_mdp(4, 2, 0.9, &mut rng).unwrap()).collect();
        let avg = average_mdps(&tasks).unwrap();
        for row in avg.transition().lanes(Axis(2)) {
            assert!((row.sum() - 1.0).abs() <= STOCHASTIC_TOL);
        }
        for s in 0..4 {
            for a in 0..2 {
                let mean: f64 = tasks.iter().map(|t| t.reward()[[s, a]]).sum::<f64>() / 5.0;
                assert_abs_diff_eq!(avg.reward()[[s, a]], mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn average_errors() {
        assert!(matches!(average_mdps(&[]), Err(Error::Argument(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_mdp(3, 2, 0.9, &mut rng).unwrap();
        let b = random_mdp(4, 2, 0.9, &mut rng).unwrap();
        assert!(matches!(average_mdps(&[a.clone(), b]), Err(Error::Shape(_))));
        let c = a.with_discount(0.5).unwrap();
        assert!(matches!(average_mdps(&[a, c]), Err(Error::Shape(_))));
    }

    #[test]
    fn evaluation_geometric_series() {
        let m = single_state(&[1.0], 0.99);
        let v = policy_evaluation(&m, &TabularPolicy::uniform(1, 1), 1e-10).unwrap();
        assert_abs_diff_eq!(v[0], 100.0, epsilon = 1e-8);
    }

    #[test]
    fn evaluation_zero_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_mdp(5, 2, 0.9, &mut rng).unwrap();
        let zero = TabularMdp::new(m.transition().clone(), Array2::zeros((5, 2)), m.initial_dist().clone(), 0.9)
            .unwrap();
        let v = policy_evaluation(&zero, &TabularPolicy::uniform(5, 2), 1e-10).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn evaluation_matches_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_mdp(5, 3, 0.9, &mut rng).unwrap();
        let pol = TabularPolicy::uniform(5, 3);
        let v = policy_evaluation(&m, &pol, 1e-12).unwrap();
        let oracle = evaluate_by_iteration(&m, &pol);
        for (x, y) in v.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-8);
        }
    }

    #[test]
    fn large_problems_iterate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_mdp(DIRECT_SOLVE_MAX_STATES + 10, 2, 0.8, &mut rng).unwrap();
        let pol = TabularPolicy::uniform(m.n_states(), 2);
        let v = policy_evaluation(&m, &pol, 1e-9).unwrap();
        let (p, r) = policy_kernel(&m, &pol);
        let next = &r + &(p.dot(&v) * 0.8);
        assert!(sup_distance(next.view(), v.view()) <= 1e-9);
    }

    #[test]
    fn optimality_operator_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_mdp(4, 3, 0.9, &mut rng).unwrap();
        let tv = bellman_optimality_apply(&m, Array1::zeros(4).view());
        for s in 0..4 {
            let best = m.reward().row(s).iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
            assert_eq!(tv[s], best);
        }
    }

    #[test]
    fn value_iteration_closed_forms() {
        let v = value_iteration(&single_state(&[0.0, 1.0], 0.5), 1e-12, 1000).unwrap();
        assert_abs_diff_eq!(v[0], 2.0, epsilon = 1e-11);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_mdp(4, 2, 0.8, &mut rng).unwrap();
        let c = TabularMdp::new(m.transition().clone(), Array2::from_elem((4, 2), 0.3), m.initial_dist().clone(), 0.8)
            .unwrap();
        let v = value_iteration(&c, 1e-12, 10_000).unwrap();
        for x in v.iter() {
            assert_abs_diff_eq!(*x, 0.3 / 0.2, epsilon = 1e-10);
        }
    }

    #[test]
    fn value_iteration_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_mdp(6, 3, 0.9, &mut rng).unwrap();
        let tol = 1e-10;
        let v = value_iteration(&m, tol, 100_000).unwrap();
        let best = enumerate_deterministic(&m);
        // ||v - v*|| <= gamma tol / (1 - gamma) for a residual of tol.
        for (x, y) in v.iter().zip(best.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = tol * 10.0);
        }
        let tv = bellman_optimality_apply(&m, v.view());
        assert!(sup_distance(tv.view(), v.view()) <= tol);
    }

    #[test]
    fn value_iteration_reports_residual() {
        let m = single_state(&[1.0], 0.99);
        match value_iteration(&m, 1e-12, 3) {
            Err(Error::NoConvergence { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 0.9);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn lagrangian_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = random_mdp(4, 2, 0.9, &mut rng).unwrap();
        let v = Array1::from_shape_fn(4, |_| rng.gen_range(-2.0..2.0));
        let zero = DualVariable::new(Array2::zeros((4, 2))).unwrap();
        assert_abs_diff_eq!(lagrangian_value(v.view(), &zero, &m), m.initial_dist().dot(&v), epsilon = 1e-14);
        let ones = DualVariable::new(Array2::ones((4, 2))).unwrap();
        assert_abs_diff_eq!(
            lagrangian_value(Array1::zeros(4).view(), &ones, &m),
            m.reward().sum(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn lagrangian_at_optimum_with_greedy_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_mdp(5, 3, 0.9, &mut rng).unwrap();
        let v = value_iteration(&m, 1e-13, 100_000).unwrap();
        let greedy = greedy_actions(&m, v.view());
        let mut d = Array2::zeros((5, 3));
        for (s, a) in greedy.iter().enumerate() {
            d[[s, *a]] = rng.gen_range(0.1..2.0);
        }
        let d = DualVariable::new(d).unwrap();
        let l = lagrangian_value(v.view(), &d, &m);
        assert_abs_diff_eq!(l, m.initial_dist().dot(&v), epsilon = 1e-10);
    }

    #[test]
    fn advantage_at_zero_is_reward_and_optimum_max_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = random_mdp(5, 3, 0.9, &mut rng).unwrap();
        assert_eq!(advantage_tabular(&m, Array1::zeros(5).view()), m.reward().clone());
        let v = value_iteration(&m, 1e-12, 100_000).unwrap();
        let adv = advantage_tabular(&m, v.view());
        for row in adv.outer_iter() {
            let best = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
            assert!(best.abs() <= 1e-11, "max advantage {best}");
        }
    }

    #[test]
    fn advantage_is_lagrangian_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = random_mdp(4, 3, 0.9, &mut rng).unwrap();
        let v = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let base = Array2::from_shape_fn((4, 3), |_| rng.gen_range(0.1..1.0));
        let adv = advantage_tabular(&m, v.view());
        let eps = 1e-6;
        for s in 0..4 {
            for a in 0..3 {
                let mut up = base.clone();
                up[[s, a]] += eps;
                let mut dn = base.clone();
                dn[[s, a]] -= eps;
                let fd = (lagrangian_value(v.view(), &DualVariable::new(up).unwrap(), &m)
                    - lagrangian_value(v.view(), &DualVariable::new(dn).unwrap(), &m))
                    / (2.0 * eps);
                assert_abs_diff_eq!(fd, adv[[s, a]], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn policy_from_dual_cases() {
        let d = DualVariable::new(array![[0.3, 0.1], [0.2, 0.2], [0.0, 0.0]]).unwrap();
        let pi = policy_from_dual(&d).unwrap();
        assert_abs_diff_eq!(pi.probs()[[0, 0]], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(pi.probs()[[0, 1]], 0.25, epsilon = 1e-15);
        assert_eq!(pi.probs().row(1).to_vec(), vec![0.5, 0.5]);
        assert_eq!(pi.probs().row(2).to_vec(), vec![0.5, 0.5]);

        let scaled = DualVariable::new(d.values() * 7.5).unwrap();
        let pi2 = policy_from_dual(&scaled).unwrap();
        for (x, y) in pi.probs().iter().zip(pi2.probs().iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn negative_dual_is_rejected() {
        assert!(matches!(
            DualVariable::new(array![[-0.1, 1.0]]),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn dual_ascent_cases() {
        let d = DualVariable::new(array![[0.1, 0.1, 0.4]]).unwrap();
        let same = dual_ascent_step(&d, &Array2::zeros((1, 3)), 0.5).unwrap();
        assert_eq!(same, d);
        let next = dual_ascent_step(&d, &array![[-1.0, 0.2, 0.0]], 0.5).unwrap();
        assert_eq!(next.values()[[0, 0]], 0.0);
        assert_abs_diff_eq!(next.values()[[0, 1]], 0.2, epsilon = 1e-15);
        assert_eq!(next.values()[[0, 2]], 0.4);
    }

    #[test]
    fn actor_critic_single_state() {
        let m = single_state(&[0.0, 1.0], 0.5);
        let sol = tabular_actor_critic(&[m], StepSchedule::default(), 1000, 1e-10).unwrap();
        assert_abs_diff_eq!(sol.value[0], 2.0, epsilon = 1e-8);
        assert!(sol.policy.probs()[[0, 1]] > 1.0 - 1e-9);
    }

    #[test]
    fn actor_critic_cancelling_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = random_mdp(4, 2, 0.9, &mut rng).unwrap();
        let b = TabularMdp::new(a.transition().clone(), -a.reward(), a.initial_dist().clone(), 0.9).unwrap();
        let sol = tabular_actor_critic(&[a, b], StepSchedule::default(), 50, 1e-10).unwrap();
        assert!(sol.value.iter().all(|x| x.abs() <= 1e-10));
    }

    #[test]
    fn actor_critic_reaches_value_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let tasks: Vec<_> = (0..2).map(|_| random_mdp(5, 3, 0.9, &mut rng).unwrap()).collect();
        let sol = tabular_actor_critic(&tasks, StepSchedule::default(), 10_000, 1e-9).unwrap();
        let avg = average_mdps(&tasks).unwrap();
        let vstar = value_iteration(&avg, 1e-10, 100_000).unwrap();
        assert!(sup_distance(sol.value.view(), vstar.view()) <= 1e-2);
        assert!(sol.dual.values().iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn harmonic_schedule_decays() {
        let s = StepSchedule::Harmonic { step: 2.0 };
        assert_eq!(s.at(0), 2.0);
        assert_eq!(s.at(3), 0.5);
    }

    #[test]
    fn mdp_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let m = random_mdp(3, 2, 0.9, &mut rng).unwrap();
        let back = TabularMdp::from_toml_str(&m.to_toml_string()).unwrap();
        assert_eq!(back, m);
        assert!(matches!(
            TabularMdp::from_toml_str("n_states = 2\nn_actions = 1\ndiscount = 0.9\ntransition = [1.0]\nreward = [0.0, 0.0]\ninitial_dist = [1.0, 0.0]"),
            Err(Error::Shape(_))
        ));
    }
}
