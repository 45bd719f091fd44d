//! Gradient oracles independent of the adjoint: the forward variational equation and finite
//! differences of the reduced cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::forward::{reduced_cost, solve_forward, DenseSegment, HybridTrajectory};
use crate::integrate::{integrate, Failure, StepperOptions};
use crate::model::{validate_schedule, HybridSystemSpec, ModeSequence, State, SwitchingSchedule};

const BLOWUP_FACTOR: f64 = 1e12;

fn check_index(traj: &HybridTrajectory, k: usize) -> Result<()> {
    if k == 0 || k > traj.schedule().len() {
        return Err(Error::BadParams(format!("switch index {k} outside 1..={}", traj.schedule().len())));
    }
    Ok(())
}

/// `z_k(tau_k) = g_z(z-)(A^{j_{k-1}} z- + f^{j_{k-1}}(z-)) - (A^{j_k} z + f^{j_k}(z))`, from stored
/// one-sided values at `tau_k`.
pub fn seed_variation(system: &HybridSystemSpec, traj: &HybridTrajectory, k: usize) -> Result<State> {
    check_index(traj, k)?;
    let t = traj.schedule().time(k);
    let (from, to) = (traj.modes().get(k - 1), traj.modes().get(k));
    let z_minus = traj.left_limit(k);
    let z_plus = traj.right_value(k);
    let before = system.mode(from)?.vector_field(t, z_minus);
    let after = system.mode(to)?.vector_field(t, z_plus);
    Ok(system.reset(from, to)?.jacobian_apply(z_minus, &before) - after)
}

/// Solution of the linearized dynamics for the perturbation of one switching time.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalTrajectory {
    pub k: usize,
    // segments[n - k] covers segment n
    segments: Vec<DenseSegment>,
    left: Vec<State>,
    right: Vec<State>,
}

impl VariationalTrajectory {
    pub fn segments(&self) -> &[DenseSegment] {
        &self.segments
    }

    /// Dense segment for forward segment index `n >= k`.
    pub fn segment(&self, n: usize) -> &DenseSegment {
        &self.segments[n - self.k]
    }

    /// `z_k^-(tau_n)` for `n > k`; zero for `n <= k`.
    pub fn left_limit(&self, n: usize) -> &State {
        &self.left[n]
    }

    /// `z_k(tau_n)` after the jump at `tau_n` (`n >= k`).
    pub fn right_value(&self, n: usize) -> &State {
        &self.right[n]
    }

    pub fn final_value(&self) -> &State {
        &self.right[self.right.len() - 1]
    }
}

/// Solves the variational equation for switch `k` from its seed.
pub fn solve_variational(system: &HybridSystemSpec, traj: &HybridTrajectory, k: usize) -> Result<VariationalTrajectory> {
    let seed = seed_variation(system, traj, k)?;
    solve_variational_from(system, traj, k, seed)
}

/// As [`solve_variational`] with an explicit initial value at `tau_k`.
pub fn solve_variational_from(
    system: &HybridSystemSpec,
    traj: &HybridTrajectory,
    k: usize,
    seed: State,
) -> Result<VariationalTrajectory> {
    check_index(traj, k)?;
    let n_switch = traj.schedule().len();
    let dim = system.state_dim();
    let bound = BLOWUP_FACTOR * (1.0 + seed.norm() + system.initial_state().norm());
    let mut left = vec![State::zeros(dim); n_switch + 2];
    let mut right = vec![State::zeros(dim); n_switch + 2];
    right[k] = seed;
    let mut segments = Vec::with_capacity(n_switch + 1 - k);
    for n in k..=n_switch {
        let fwd = &traj.segments()[n];
        let mode = system.mode(fwd.mode)?;
        let remainder = |t: f64, v: &State| {
            if mode.nonlinearity.is_zero() {
                State::zeros(v.len())
            } else {
                mode.nonlinearity.jacobian_apply(t, &fwd.eval(t), v)
            }
        };
        let s = integrate(&mode.generator, remainder, (fwd.t_start, fwd.t_end), right[n].clone(), fwd.steps(), fwd.method, bound)
            .map_err(|e| match e {
                Failure::BlowUp { time, norm } => Error::BlowUp { segment: n, time, norm },
                Failure::NonFinite { time } => Error::NonFiniteState { segment: n, time },
            })?;
        let seg = DenseSegment::from_parts(fwd.mode, fwd.method, s.knots, s.values, s.derivatives);
        let end = seg.end_value().clone();
        if n < n_switch {
            let reset = system.reset(traj.modes().get(n), traj.modes().get(n + 1))?;
            right[n + 1] = reset.jacobian_apply(traj.left_limit(n + 1), &end);
        } else {
            right[n + 1] = end.clone();
        }
        left[n + 1] = end;
        segments.push(seg);
    }
    Ok(VariationalTrajectory { k, segments, left, right })
}

/// Shape of the difference quotient actually used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdKind {
    Central,
    Forward,
    Backward,
    /// Neighbouring times leave no room in either direction.
    Infeasible,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdOptions {
    /// Defaults to `1e-5 * T`.
    pub step: Option<f64>,
    /// Relative tolerance the oracle is meant to resolve; Richardson disagreement above ten times
    /// this marks the estimate unreliable.
    pub tolerance: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { step: None, tolerance: 1e-3 }
    }
}

impl FdOptions {
    pub fn step_for(&self, horizon: f64) -> f64 {
        self.step.unwrap_or(1e-5 * horizon)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdEstimate {
    pub k: usize,
    pub value: f64,
    pub step: f64,
    pub kind: FdKind,
    /// The step was shortened to fit between neighbouring switching times.
    pub clipped: bool,
    /// Same quotient at half the step.
    pub half_step_value: f64,
    pub reliable: bool,
}

fn shifted(schedule: &SwitchingSchedule, k: usize, delta: f64) -> Result<SwitchingSchedule> {
    let mut raw = schedule.interior().to_vec();
    raw[k - 1] += delta;
    validate_schedule(&raw, schedule.horizon())
}

/// Difference quotient of `Phi` in `tau_k`: central where both neighbours allow it, one-sided at
/// active constraints.
pub fn fd_gradient(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule: &SwitchingSchedule,
    k: usize,
    fd: &FdOptions,
    stepper: &StepperOptions,
) -> Result<FdEstimate> {
    if k == 0 || k > schedule.len() {
        return Err(Error::BadParams(format!("switch index {k} outside 1..={}", schedule.len())));
    }
    let h0 = fd.step_for(schedule.horizon());
    let below = schedule.time(k) - schedule.time(k - 1);
    let above = schedule.time(k + 1) - schedule.time(k);
    let (kind, h, clipped) = if below >= h0 && above >= h0 {
        (FdKind::Central, h0, false)
    } else if above >= h0 {
        (FdKind::Forward, h0, false)
    } else if below >= h0 {
        (FdKind::Backward, h0, false)
    } else if above > 0.0 && above >= below {
        (FdKind::Forward, above, true)
    } else if below > 0.0 {
        (FdKind::Backward, below, true)
    } else {
        return Ok(FdEstimate {
            k,
            value: f64::NAN,
            step: 0.0,
            kind: FdKind::Infeasible,
            clipped: false,
            half_step_value: f64::NAN,
            reliable: false,
        });
    };
    let phi = |delta: f64| -> Result<f64> {
        if delta == 0.0 {
            reduced_cost(system, modes, schedule, stepper)
        } else {
            reduced_cost(system, modes, &shifted(schedule, k, delta)?, stepper)
        }
    };
    let quotient = |h: f64| -> Result<f64> {
        Ok(match kind {
            FdKind::Central => (phi(h)? - phi(-h)?) / (2.0 * h),
            FdKind::Forward => (phi(h)? - phi(0.0)?) / h,
            FdKind::Backward => (phi(0.0)? - phi(-h)?) / h,
            FdKind::Infeasible => unreachable!(),
        })
    };
    let value = quotient(h)?;
    let half_step_value = quotient(0.5 * h)?;
    let reliable = (value - half_step_value).abs() <= 10.0 * fd.tolerance * value.abs().max(1.0);
    Ok(FdEstimate { k, value, step: h, kind, clipped, half_step_value, reliable })
}

/// FD estimates for every switch index, one job per index.
pub fn fd_gradient_all(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule: &SwitchingSchedule,
    fd: &FdOptions,
    stepper: &StepperOptions,
    exec: Execution,
) -> Result<Vec<FdEstimate>> {
    let ks: Vec<usize> = (1..=schedule.len()).collect();
    exec.map(&ks, |&k| fd_gradient(system, modes, schedule, k, fd, stepper)).into_iter().collect()
}

/// Central difference of the whole trajectory in `tau_k`, evaluated at `times` (right values).
pub fn fd_state_variation(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule: &SwitchingSchedule,
    k: usize,
    h: f64,
    times: &[f64],
    stepper: &StepperOptions,
) -> Result<Vec<State>> {
    let plus = solve_forward(system, modes, &shifted(schedule, k, h)?, stepper)?;
    let minus = solve_forward(system, modes, &shifted(schedule, k, -h)?, stepper)?;
    times
        .iter()
        .map(|&t| {
            let a = plus.eval(t, crate::forward::Side::Right)?;
            let b = minus.eval(t, crate::forward::Side::Right)?;
            Ok((a - b) / (2.0 * h))
        })
        .collect()
}
