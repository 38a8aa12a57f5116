//! Parametrized continuous-control task families and a tabular gridworld.
//!
//! Three families are provided, each as a fixed 5x5 grid of physical
//! parameters: cart-pole balance, inverted pendulum and cart-pole swing-up.
//! Dynamics follow the classic cart-pole equations of motion (pole mass,
//! pole half-length, cart mass) and the actuated rigid-rod pendulum, both
//! integrated with semi-implicit Euler.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::TabularMdp;

pub const CARTPOLE_DT: f64 = 0.02;
pub const PENDULUM_DT: f64 = 0.05;
pub const GRAVITY: f64 = 9.8;
pub const PENDULUM_GRAVITY: f64 = 10.0;
pub const MAX_FORCE: f64 = 10.0;
pub const MAX_TORQUE: f64 = 2.0;
pub const PENDULUM_MAX_SPEED: f64 = 8.0;
pub const ANGLE_LIMIT: f64 = 12.0 * PI / 180.0;
pub const POSITION_LIMIT: f64 = 2.4;
pub const DEFAULT_HORIZON: usize = 200;

/// Which task family an environment belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    CartpoleBalance,
    Pendulum,
    CartpoleSwingup,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::CartpoleBalance => "cartpole_balance",
            FamilyKind::Pendulum => "pendulum",
            FamilyKind::CartpoleSwingup => "cartpole_swingup",
        }
    }

    /// Half-width of the symmetric action interval.
    pub fn action_bound(self) -> f64 {
        match self {
            FamilyKind::Pendulum => MAX_TORQUE,
            _ => MAX_FORCE,
        }
    }

    pub fn obs_dim(self, encoding: ObsEncoding) -> usize {
        match (self, encoding) {
            (FamilyKind::CartpoleBalance, _) => 4,
            (FamilyKind::Pendulum, _) => 3,
            (FamilyKind::CartpoleSwingup, ObsEncoding::SinCos) => 5,
            (FamilyKind::CartpoleSwingup, ObsEncoding::Angle) => 4,
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole_balance" => Ok(FamilyKind::CartpoleBalance),
            "pendulum" => Ok(FamilyKind::Pendulum),
            "cartpole_swingup" => Ok(FamilyKind::CartpoleSwingup),
            other => Err(Error::Argument(format!("unknown task family `{other}`"))),
        }
    }
}

/// How the swing-up pole angle is presented to the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsEncoding {
    #[default]
    SinCos,
    Angle,
}

/// Physical parameters of one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Physics {
    Cartpole {
        pole_mass: f64,
        pole_half_length: f64,
        cart_mass: f64,
    },
    Pendulum {
        mass: f64,
        length: f64,
    },
}

impl Physics {
    pub fn validate(&self) -> Result<()> {
        let values: &[f64] = match self {
            Physics::Cartpole {
                pole_mass,
                pole_half_length,
                cart_mass,
            } => &[*pole_mass, *pole_half_length, *cart_mass],
            Physics::Pendulum { mass, length } => &[*mass, *length],
        };
        if values.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Invariant(format!("physical parameters must be > 0: {self:?}")))
        }
    }
}

/// One member of a task family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub task_id: usize,
    pub physics: Physics,
}

/// A task family: its kind, the 5x5 parameter grid and the single-task default.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFamily {
    pub kind: FamilyKind,
    pub grid: Vec<TaskParams>,
    pub single_task: TaskParams,
}

impl TaskFamily {
    pub fn standard(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::CartpoleBalance => {
                let masses = [0.1, 0.325, 0.55, 0.775, 1.0];
                let lengths = [0.05, 0.1625, 0.275, 0.3875, 0.5];
                Self {
                    kind,
                    grid: cartpole_grid(&masses, &lengths, 1.0),
                    single_task: TaskParams {
                        task_id: 0,
                        physics: Physics::Cartpole {
                            pole_mass: 0.1,
                            pole_half_length: 0.5,
                            cart_mass: 1.0,
                        },
                    },
                }
            }
            FamilyKind::Pendulum => {
                let values = [0.8, 0.9, 1.0, 1.1, 1.2];
                let mut grid = Vec::with_capacity(25);
                for &mass in &values {
                    for &length in &values {
                        grid.push(TaskParams {
                            task_id: grid.len(),
                            physics: Physics::Pendulum { mass, length },
                        });
                    }
                }
                Self {
                    kind,
                    grid,
                    single_task: TaskParams {
                        task_id: 0,
                        physics: Physics::Pendulum {
                            mass: 1.0,
                            length: 1.0,
                        },
                    },
                }
            }
            FamilyKind::CartpoleSwingup => {
                let masses = [0.1, 0.2, 0.3, 0.4, 0.5];
                let lengths = [0.2, 0.4, 0.6, 0.8, 1.0];
                Self {
                    kind,
                    grid: cartpole_grid(&masses, &lengths, 0.5),
                    single_task: TaskParams {
                        task_id: 0,
                        physics: Physics::Cartpole {
                            pole_mass: 0.5,
                            pole_half_length: 0.25,
                            cart_mass: 0.5,
                        },
                    },
                }
            }
        }
    }
}

fn cartpole_grid(masses: &[f64], lengths: &[f64], cart_mass: f64) -> Vec<TaskParams> {
    let mut grid = Vec::with_capacity(masses.len() * lengths.len());
    for &pole_mass in masses {
        for &pole_half_length in lengths {
            grid.push(TaskParams {
                task_id: grid.len(),
                physics: Physics::Cartpole {
                    pole_mass,
                    pole_half_length,
                    cart_mass,
                },
            });
        }
    }
    grid
}

/// Physical state. Angles are measured from upright.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvState {
    Cartpole {
        x: f64,
        x_dot: f64,
        theta: f64,
        theta_dot: f64,
    },
    Pendulum {
        theta: f64,
        theta_dot: f64,
    },
}

impl EnvState {
    fn is_finite(&self) -> bool {
        match *self {
            EnvState::Cartpole {
                x,
                x_dot,
                theta,
                theta_dot,
            } => x.is_finite() && x_dot.is_finite() && theta.is_finite() && theta_dot.is_finite(),
            EnvState::Pendulum { theta, theta_dot } => theta.is_finite() && theta_dot.is_finite(),
        }
    }
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    /// Force or torque actually applied after clipping.
    pub applied_action: f64,
}

/// A single task instance. Owned by exactly one agent.
#[derive(Debug, Clone)]
pub struct Env {
    kind: FamilyKind,
    params: TaskParams,
    encoding: ObsEncoding,
    horizon: usize,
    state: EnvState,
    t: usize,
}

impl Env {
    pub fn new(kind: FamilyKind, params: TaskParams) -> Result<Self> {
        params.physics.validate()?;
        let state = match (kind, params.physics) {
            (FamilyKind::Pendulum, Physics::Pendulum { .. }) => EnvState::Pendulum {
                theta: 0.0,
                theta_dot: 0.0,
            },
            (FamilyKind::CartpoleBalance | FamilyKind::CartpoleSwingup, Physics::Cartpole { .. }) => {
                EnvState::Cartpole {
                    x: 0.0,
                    x_dot: 0.0,
                    theta: 0.0,
                    theta_dot: 0.0,
                }
            }
            _ => {
                return Err(Error::Argument(format!(
                    "physics {:?} does not fit family {kind}",
                    params.physics
                )))
            }
        };
        Ok(Self {
            kind,
            params,
            encoding: ObsEncoding::default(),
            horizon: DEFAULT_HORIZON,
            state,
            t: 0,
        })
    }

    pub fn with_encoding(mut self, encoding: ObsEncoding) -> Self {
        self.encoding = encoding;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn params(&self) -> &TaskParams {
        &self.params
    }

    pub fn obs_dim(&self) -> usize {
        self.kind.obs_dim(self.encoding)
    }

    pub fn action_bound(&self) -> f64 {
        self.kind.action_bound()
    }

    pub fn state(&self) -> EnvState {
        self.state
    }

    pub fn elapsed(&self) -> usize {
        self.t
    }

    /// Places the environment in `state` with the step counter at zero.
    pub fn set_state(&mut self, state: EnvState) -> Result<Vec<f64>> {
        if !state.is_finite() {
            return Err(Error::Numeric(format!("state {state:?} is not finite")));
        }
        match (self.kind, state) {
            (FamilyKind::Pendulum, EnvState::Pendulum { .. })
            | (FamilyKind::CartpoleBalance | FamilyKind::CartpoleSwingup, EnvState::Cartpole { .. }) => {}
            _ => return Err(Error::Argument(format!("state {state:?} does not fit {}", self.kind))),
        }
        self.state = state;
        self.t = 0;
        Ok(self.observation())
    }

    /// Draws an initial state.
    ///
    /// Balance: each coordinate uniform in `[-0.05, 0.05]`. Swing-up: pole
    /// hanging down (`theta = pi`) with the same small noise on every
    /// coordinate. Pendulum: angle uniform in `[-pi, pi]`, angular velocity
    /// uniform in `[-1, 1]`.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        self.t = 0;
        self.state = match self.kind {
            FamilyKind::CartpoleBalance => EnvState::Cartpole {
                x: rng.gen_range(-0.05..=0.05),
                x_dot: rng.gen_range(-0.05..=0.05),
                theta: rng.gen_range(-0.05..=0.05),
                theta_dot: rng.gen_range(-0.05..=0.05),
            },
            FamilyKind::CartpoleSwingup => EnvState::Cartpole {
                x: rng.gen_range(-0.05..=0.05),
                x_dot: rng.gen_range(-0.05..=0.05),
                theta: PI + rng.gen_range(-0.05..=0.05),
                theta_dot: rng.gen_range(-0.05..=0.05),
            },
            FamilyKind::Pendulum => EnvState::Pendulum {
                theta: rng.gen_range(-PI..=PI),
                theta_dot: rng.gen_range(-1.0..=1.0),
            },
        };
        self.observation()
    }

    pub fn observation(&self) -> Vec<f64> {
        match self.state {
            EnvState::Cartpole {
                x,
                x_dot,
                theta,
                theta_dot,
            } => match (self.kind, self.encoding) {
                (FamilyKind::CartpoleSwingup, ObsEncoding::SinCos) => {
                    vec![x, x_dot, theta.cos(), theta.sin(), theta_dot]
                }
                (FamilyKind::CartpoleSwingup, ObsEncoding::Angle) => {
                    vec![x, x_dot, wrap_angle(theta), theta_dot]
                }
                _ => vec![x, x_dot, theta, theta_dot],
            },
            EnvState::Pendulum { theta, theta_dot } => vec![theta.cos(), theta.sin(), theta_dot],
        }
    }

    /// Advances one time step with the (clipped) action.
    pub fn step(&mut self, action: f64) -> Result<StepOutcome> {
        if !action.is_finite() {
            return Err(Error::Numeric(format!("action {action} is not finite")));
        }
        if !self.state.is_finite() {
            return Err(Error::Numeric(format!("state {:?} is not finite", self.state)));
        }
        let bound = self.action_bound();
        let u = action.clamp(-bound, bound);
        self.t += 1;
        let (reward, failed) = match (self.state, self.params.physics) {
            (
                EnvState::Cartpole {
                    x,
                    x_dot,
                    theta,
                    theta_dot,
                },
                Physics::Cartpole {
                    pole_mass,
                    pole_half_length,
                    cart_mass,
                },
            ) => {
                let (x, x_dot, theta, theta_dot) = cartpole_dynamics(
                    [x, x_dot, theta, theta_dot],
                    u,
                    pole_mass,
                    pole_half_length,
                    cart_mass,
                );
                self.state = EnvState::Cartpole {
                    x,
                    x_dot,
                    theta,
                    theta_dot,
                };
                match self.kind {
                    FamilyKind::CartpoleBalance => {
                        let failed = x.abs() > POSITION_LIMIT || theta.abs() > ANGLE_LIMIT;
                        (if failed { 0.0 } else { 1.0 }, failed)
                    }
                    _ => {
                        let d = swing_up_distance(x, theta, pole_half_length);
                        (swing_up_reward(d, theta), x.abs() > POSITION_LIMIT)
                    }
                }
            }
            (EnvState::Pendulum { theta, theta_dot }, Physics::Pendulum { mass, length }) => {
                let psi = wrap_angle(theta);
                let reward = -(psi * psi + 0.1 * theta_dot * theta_dot + 0.001 * u * u);
                let (theta, theta_dot) = pendulum_dynamics(theta, theta_dot, u, mass, length);
                self.state = EnvState::Pendulum { theta, theta_dot };
                (reward, false)
            }
            _ => unreachable!("state and physics kinds are checked at construction"),
        };
        if !self.state.is_finite() {
            return Err(Error::Numeric(format!("dynamics diverged to {:?}", self.state)));
        }
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            terminal: failed || self.t >= self.horizon,
            applied_action: u,
        })
    }
}

/// One semi-implicit Euler step of the cart-pole: velocities first, then
/// positions with the new velocities.
fn cartpole_dynamics(
    [x, x_dot, theta, theta_dot]: [f64; 4],
    force: f64,
    pole_mass: f64,
    half_length: f64,
    cart_mass: f64,
) -> (f64, f64, f64, f64) {
    let total_mass = pole_mass + cart_mass;
    let pole_moment = pole_mass * half_length;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + pole_moment * theta_dot * theta_dot * sin) / total_mass;
    let theta_acc = (GRAVITY * sin - cos * temp)
        / (half_length * (4.0 / 3.0 - pole_mass * cos * cos / total_mass));
    let x_acc = temp - pole_moment * theta_acc * cos / total_mass;
    let x_dot = x_dot + CARTPOLE_DT * x_acc;
    let x = x + CARTPOLE_DT * x_dot;
    let theta_dot = theta_dot + CARTPOLE_DT * theta_acc;
    let theta = theta + CARTPOLE_DT * theta_dot;
    (x, x_dot, theta, theta_dot)
}

/// Rigid rod of length `length` pivoted at one end; `theta = 0` upright.
fn pendulum_dynamics(theta: f64, theta_dot: f64, torque: f64, mass: f64, length: f64) -> (f64, f64) {
    let acc = 3.0 * PENDULUM_GRAVITY / (2.0 * length) * theta.sin()
        + 3.0 / (mass * length * length) * torque;
    let theta_dot = (theta_dot + acc * PENDULUM_DT).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
    (theta + theta_dot * PENDULUM_DT, theta_dot)
}

/// Total mechanical energy of the rod pendulum (pivot at height zero).
pub fn pendulum_energy(theta: f64, theta_dot: f64, mass: f64, length: f64) -> f64 {
    let inertia = mass * length * length / 3.0;
    0.5 * inertia * theta_dot * theta_dot + mass * PENDULUM_GRAVITY * 0.5 * length * theta.cos()
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Distance between the pole tip and the tip of an upright pole at the
/// track center.
pub fn swing_up_distance(x: f64, theta: f64, half_length: f64) -> f64 {
    let len = 2.0 * half_length;
    let tip_x = x + len * theta.sin();
    let tip_y = len * theta.cos();
    (tip_x * tip_x + (tip_y - len) * (tip_y - len)).sqrt()
}

/// `2 / (1 + e^d) + cos(psi)`.
pub fn swing_up_reward(d: f64, psi: f64) -> f64 {
    2.0 / (1.0 + d.exp()) + psi.cos()
}

/// An `n x n` gridworld with four actions (up, down, left, right).
///
/// The intended move happens with probability `1 - noise`; with probability
/// `noise` a uniformly random direction is taken instead. Moves into a wall
/// stay put. The goal cell is drawn from `rng`, is absorbing and pays 1 per
/// step; every other reward is 0. Initial states are uniform.
pub fn make_gridworld<R: Rng + ?Sized>(
    n: usize,
    noise: f64,
    discount: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    if n < 2 {
        return Err(Error::Argument(format!("gridworld side {n} must be >= 2")));
    }
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::Argument(format!("noise {noise} outside [0, 1)")));
    }
    let ns = n * n;
    let goal = rng.gen_range(0..ns);
    let moves: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    let target = |s: usize, m: usize| -> usize {
        let (r, c) = ((s / n) as isize, (s % n) as isize);
        let (nr, nc) = (r + moves[m].0, c + moves[m].1);
        if nr < 0 || nc < 0 || nr >= n as isize || nc >= n as isize {
            s
        } else {
            nr as usize * n + nc as usize
        }
    };
    let mut transition = Array3::zeros((ns, 4, ns));
    let mut reward = Array2::zeros((ns, 4));
    for s in 0..ns {
        for a in 0..4 {
            if s == goal {
                transition[[s, a, s]] = 1.0;
                reward[[s, a]] = 1.0;
                continue;
            }
            transition[[s, a, target(s, a)]] += 1.0 - noise;
            if noise > 0.0 {
                for m in 0..4 {
                    transition[[s, a, target(s, m)]] += noise / 4.0;
                }
            }
        }
    }
    let initial = Array1::from_elem(ns, 1.0 / ns as f64);
    TabularMdp::new(transition, reward, initial, discount)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn balance() -> Env {
        let fam = TaskFamily::standard(FamilyKind::CartpoleBalance);
        Env::new(fam.kind, fam.single_task).unwrap()
    }

    #[test]
    fn grids_have_25_tasks() {
        for kind in [FamilyKind::CartpoleBalance, FamilyKind::Pendulum, FamilyKind::CartpoleSwingup] {
            let fam = TaskFamily::standard(kind);
            assert_eq!(fam.grid.len(), 25);
            for (i, t) in fam.grid.iter().enumerate() {
                assert_eq!(t.task_id, i);
                t.physics.validate().unwrap();
            }
        }
        let fam = TaskFamily::standard(FamilyKind::CartpoleBalance);
        assert_eq!(
            fam.grid[6].physics,
            Physics::Cartpole {
                pole_mass: 0.325,
                pole_half_length: 0.1625,
                cart_mass: 1.0
            }
        );
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        let bad = TaskParams {
            task_id: 0,
            physics: Physics::Pendulum { mass: 0.0, length: 1.0 },
        };
        assert!(Env::new(FamilyKind::Pendulum, bad).is_err());
        let fam = TaskFamily::standard(FamilyKind::CartpoleBalance);
        assert!(Env::new(FamilyKind::Pendulum, fam.single_task).is_err());
    }

    #[test]
    fn pendulum_reset_range_and_determinism() {
        let fam = TaskFamily::standard(FamilyKind::Pendulum);
        let mut env = Env::new(fam.kind, fam.single_task).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let o1 = env.reset(&mut a);
            let s = env.state();
            let o2 = env.reset(&mut b);
            assert_eq!(o1, o2);
            let EnvState::Pendulum { theta, theta_dot } = s else { panic!() };
            assert!((-PI..=PI).contains(&theta));
            assert!((-1.0..=1.0).contains(&theta_dot));
        }
    }

    #[test]
    fn pendulum_reset_angle_is_uniform() {
        let fam = TaskFamily::standard(FamilyKind::Pendulum);
        let mut env = Env::new(fam.kind, fam.single_task).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mut angles: Vec<f64> = (0..n)
            .map(|_| {
                env.reset(&mut rng);
                match env.state() {
                    EnvState::Pendulum { theta, .. } => theta,
                    _ => unreachable!(),
                }
            })
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Kolmogorov-Smirnov against U(-pi, pi).
        let ks = angles
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = (x + PI) / (2.0 * PI);
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (cdf - lo).abs().max((hi - cdf).abs())
            })
            .fold(0.0f64, f64::max);
        // 1% critical value 1.63 / sqrt(n).
        assert!(ks < 1.63 / (n as f64).sqrt(), "KS statistic {ks}");
    }

    #[test]
    fn cartpole_equilibrium_is_fixed() {
        let mut env = balance();
        env.set_state(EnvState::Cartpole {
            x: 0.0,
            x_dot: 0.0,
            theta: 0.0,
            theta_dot: 0.0,
        })
        .unwrap();
        let out = env.step(0.0).unwrap();
        assert_eq!(out.observation, vec![0.0; 4]);
        assert!(!out.terminal);
        assert_eq!(out.reward, 1.0);
    }

    #[test]
    fn cartpole_balance_terminates_by_horizon() {
        let mut env = balance();
        env.set_state(EnvState::Cartpole {
            x: 0.0,
            x_dot: 0.0,
            theta: 0.0,
            theta_dot: 0.0,
        })
        .unwrap();
        let mut total = 0.0;
        for t in 1..=DEFAULT_HORIZON {
            let out = env.step(0.0).unwrap();
            total += out.reward;
            assert_eq!(out.terminal, t == DEFAULT_HORIZON);
        }
        assert_eq!(total, 200.0);
    }

    #[test]
    fn cartpole_fails_past_twelve_degrees() {
        let mut env = balance();
        env.set_state(EnvState::Cartpole {
            x: 0.0,
            x_dot: 0.0,
            theta: 0.2,
            theta_dot: 1.0,
        })
        .unwrap();
        let out = env.step(0.0).unwrap();
        assert!(out.terminal);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn actions_are_clipped() {
        let mut env = balance();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        assert_eq!(env.step(55.0).unwrap().applied_action, MAX_FORCE);
        let fam = TaskFamily::standard(FamilyKind::Pendulum);
        let mut pend = Env::new(fam.kind, fam.single_task).unwrap();
        pend.reset(&mut rng);
        assert_eq!(pend.step(-7.0).unwrap().applied_action, -MAX_TORQUE);
    }

    #[test]
    fn clipped_action_matches_boundary_action() {
        let mut a = balance();
        let mut b = balance();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        a.reset(&mut rng);
        b.set_state(a.state()).unwrap();
        assert_eq!(a.step(1e6).unwrap(), b.step(MAX_FORCE).unwrap());
    }

    #[test]
    fn non_finite_action_is_an_error() {
        let mut env = balance();
        assert!(matches!(env.step(f64::NAN), Err(Error::Numeric(_))));
    }

    #[test]
    fn swing_up_reward_values() {
        assert_abs_diff_eq!(swing_up_reward(0.0, 0.0), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(swing_up_reward(0.0, PI), 0.0, epsilon = 1e-15);
        assert_eq!(swing_up_distance(0.0, 0.0, 0.3), 0.0);
        assert_abs_diff_eq!(swing_up_distance(0.0, PI, 0.25), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn swing_up_starts_hanging_and_ignores_angle_limit() {
        let fam = TaskFamily::standard(FamilyKind::CartpoleSwingup);
        let mut env = Env::new(fam.kind, fam.single_task).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = env.reset(&mut rng);
        assert_eq!(obs.len(), 5);
        assert!(obs[2] < -0.99, "cos(theta) should be near -1");
        let out = env.step(0.0).unwrap();
        assert!(!out.terminal);
        let env = env.with_encoding(ObsEncoding::Angle);
        assert_eq!(env.observation().len(), 4);
    }

    #[test]
    fn pendulum_energy_band() {
        // Semi-implicit Euler conserves a modified energy; the true energy
        // oscillates within dt * |omega| * |dV/dtheta| of it.
        let fam = TaskFamily::standard(FamilyKind::Pendulum);
        let (mass, length) = (1.0, 1.0);
        let mut env = Env::new(fam.kind, fam.single_task).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            env.reset(&mut rng);
            let EnvState::Pendulum { theta, theta_dot } = env.state() else { unreachable!() };
            let e0 = pendulum_energy(theta, theta_dot, mass, length);
            let max_omega = (theta_dot * theta_dot + 6.0 * PENDULUM_GRAVITY / length).sqrt();
            assert!(max_omega < PENDULUM_MAX_SPEED);
            let band = PENDULUM_DT * max_omega * mass * PENDULUM_GRAVITY * length / 2.0;
            for _ in 0..200 {
                env.step(0.0).unwrap();
                let EnvState::Pendulum { theta, theta_dot } = env.state() else { unreachable!() };
                let e = pendulum_energy(theta, theta_dot, mass, length);
                assert!((e - e0).abs() <= band, "energy drift {} > {band}", (e - e0).abs());
            }
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-0.1), -0.1, epsilon = 1e-15);
    }

    #[test]
    fn gridworld_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let det = make_gridworld(3, 0.0, 0.9, &mut rng).unwrap();
        for row in det.transition().lanes(ndarray::Axis(2)) {
            assert_eq!(row.iter().filter(|p| **p == 1.0).count(), 1);
        }
        let noisy = make_gridworld(4, 0.3, 0.9, &mut rng).unwrap();
        for row in noisy.transition().lanes(ndarray::Axis(2)) {
            assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
        assert!(make_gridworld(1, 0.0, 0.9, &mut rng).is_err());
        assert!(make_gridworld(3, 1.0, 0.9, &mut rng).is_err());
    }
}
