//! Forward simulation of the hybrid evolution and evaluation of the cost functional.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{hermite, integrate, simpson, Failure, Method, StepperOptions};
use crate::model::{HybridSystemSpec, ModeIndex, ModeSequence, ModeSpec, State, SwitchingSchedule};

/// Dense output on one interval `[t_start, t_end]`, usable for forward and backward passes alike.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSegment {
    pub mode: ModeIndex,
    pub t_start: f64,
    pub t_end: f64,
    pub method: Method,
    knots: Vec<f64>,
    values: Vec<State>,
    derivatives: Vec<State>,
}

impl DenseSegment {
    pub(crate) fn from_parts(
        mode: ModeIndex,
        method: Method,
        mut knots: Vec<f64>,
        mut values: Vec<State>,
        mut derivatives: Vec<State>,
    ) -> Self {
        if knots.len() > 1 && knots[0] > knots[knots.len() - 1] {
            knots.reverse();
            values.reverse();
            derivatives.reverse();
        }
        Self {
            mode,
            t_start: knots[0],
            t_end: knots[knots.len() - 1],
            method,
            knots,
            values,
            derivatives,
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[State] {
        &self.values
    }

    pub fn derivatives(&self) -> &[State] {
        &self.derivatives
    }

    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn is_degenerate(&self) -> bool {
        self.knots.len() == 1
    }

    pub fn start_value(&self) -> &State {
        &self.values[0]
    }

    pub fn end_value(&self) -> &State {
        &self.values[self.values.len() - 1]
    }

    /// Hermite interpolant; times outside the segment are clamped to its ends.
    pub fn eval(&self, t: f64) -> State {
        hermite(&self.knots, &self.values, &self.derivatives, t)
    }

    /// Simpson integral of `g(t, y(t))` over the segment.
    pub(crate) fn integrate_scalar(&self, g: impl Fn(f64, &State) -> f64) -> f64 {
        let vals: Vec<f64> = self.knots.iter().zip(&self.values).map(|(&t, y)| g(t, y)).collect();
        let mid = 0.5 * (self.t_start + self.t_end);
        simpson(&vals, self.t_end - self.t_start, || g(mid, &self.eval(mid)))
    }
}

/// Which one-sided value to return at a switching time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Left,
    Right,
}

/// Piecewise dense forward solution with the one-sided values at every switching time.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridTrajectory {
    schedule: SwitchingSchedule,
    modes: ModeSequence,
    segments: Vec<DenseSegment>,
    // left[n] = z^-(tau_n), right[n] = z^n(tau_n); left[0] = right[0] = z0, right[N+1] = z(T)
    left: Vec<State>,
    right: Vec<State>,
}

impl HybridTrajectory {
    pub fn schedule(&self) -> &SwitchingSchedule {
        &self.schedule
    }

    pub fn modes(&self) -> &ModeSequence {
        &self.modes
    }

    /// One segment per `n = 0..=N`; zero-length intervals give single-knot segments.
    pub fn segments(&self) -> &[DenseSegment] {
        &self.segments
    }

    /// `z^-(tau_n)` for `n` in `1..=N+1` (`n = 0` returns `z0`).
    pub fn left_limit(&self, n: usize) -> &State {
        &self.left[n]
    }

    /// `z^n(tau_n)`, the value right after the reset at `tau_n`, for `n` in `0..=N`.
    pub fn right_value(&self, n: usize) -> &State {
        &self.right[n]
    }

    pub fn final_state(&self) -> &State {
        &self.right[self.right.len() - 1]
    }

    pub fn eval(&self, t: f64, side: Side) -> Result<State> {
        eval_trajectory(self, t, side)
    }
}

fn lift(failure: Failure, segment: usize) -> Error {
    match failure {
        Failure::BlowUp { time, norm } => Error::BlowUp { segment, time, norm },
        Failure::NonFinite { time } => Error::NonFiniteState { segment, time },
    }
}

pub(crate) fn run_segment(
    mode: &ModeSpec,
    index: ModeIndex,
    z_init: &State,
    (t_start, t_end): (f64, f64),
    steps: usize,
    method: Method,
    bound: f64,
) -> std::result::Result<DenseSegment, Failure> {
    let f = &mode.nonlinearity;
    let s = integrate(&mode.generator, |t, y| f.eval(t, y), (t_start, t_end), z_init.clone(), steps, method, bound)?;
    Ok(DenseSegment::from_parts(index, method, s.knots, s.values, s.derivatives))
}

/// Integrates one mode from `z_init` over `[t_start, t_end]` with
/// `ceil((t_end - t_start) / h_max)` equal steps.
pub fn step_segment(
    mode: &ModeSpec,
    index: ModeIndex,
    z_init: &State,
    (t_start, t_end): (f64, f64),
    options: &StepperOptions,
    horizon: f64,
) -> Result<DenseSegment> {
    if t_end < t_start {
        return Err(Error::BadParams(format!("segment end {t_end} precedes start {t_start}")));
    }
    let steps = options.steps_for(t_end - t_start, horizon);
    let h = if steps > 0 { (t_end - t_start) / steps as f64 } else { 0.0 };
    let method = options.resolve(&mode.generator, h);
    let bound = options.blowup_factor * (1.0 + z_init.norm());
    run_segment(mode, index, z_init, (t_start, t_end), steps, method, bound).map_err(|e| lift(e, 0))
}

/// Solves the hybrid evolution for a mode sequence and schedule.
///
/// Resets are applied exactly at every switching time; coincident times compose their resets in
/// sequence order without integrating in between.
pub fn solve_forward(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule: &SwitchingSchedule,
    options: &StepperOptions,
) -> Result<HybridTrajectory> {
    system.check_sequence(modes, schedule)?;
    let horizon = system.horizon();
    let z0 = system.initial_state().clone();
    let bound = options.blowup_factor * (1.0 + z0.norm());
    let n_switch = schedule.len();

    let mut segments = Vec::with_capacity(n_switch + 1);
    let mut left = Vec::with_capacity(n_switch + 2);
    let mut right = Vec::with_capacity(n_switch + 2);
    left.push(z0.clone());
    right.push(z0);

    for n in 0..=n_switch {
        let j = modes.get(n);
        let mode = system.mode(j)?;
        let span = (schedule.time(n), schedule.time(n + 1));
        let steps = options.steps_for(span.1 - span.0, horizon);
        let h = if steps > 0 { (span.1 - span.0) / steps as f64 } else { 0.0 };
        let method = options.resolve(&mode.generator, h);
        let seg = run_segment(mode, j, &right[n], span, steps, method, bound).map_err(|e| lift(e, n))?;
        let z_minus = seg.end_value().clone();
        segments.push(seg);
        if n < n_switch {
            let reset = system.reset(j, modes.get(n + 1))?;
            let z_plus = reset.apply(&z_minus);
            if z_plus.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteState { segment: n + 1, time: span.1 });
            }
            left.push(z_minus);
            right.push(z_plus);
        } else {
            left.push(z_minus.clone());
            right.push(z_minus);
        }
    }

    Ok(HybridTrajectory { schedule: schedule.clone(), modes: modes.clone(), segments, left, right })
}

/// Evaluates the trajectory at `t`. At a switching time `Left` gives the limit from before the
/// first reset there and `Right` the value after the last one.
pub fn eval_trajectory(traj: &HybridTrajectory, t: f64, side: Side) -> Result<State> {
    let horizon = traj.schedule.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::OutOfDomain(t));
    }
    let times = traj.schedule.extended();
    let last = times.len() - 1;
    if let Some(first) = times.iter().position(|&s| s == t) {
        let end = (first..=last).take_while(|&m| times[m] == t).last().unwrap_or(first);
        return Ok(match side {
            Side::Left => traj.left[first].clone(),
            Side::Right => traj.right[end].clone(),
        });
    }
    // strictly inside segment n
    let n = times.iter().rposition(|&s| s < t).unwrap_or(0);
    Ok(traj.segments[n].eval(t))
}

/// Running, per-switch and terminal parts of the cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub running: f64,
    pub running_per_segment: Vec<f64>,
    /// `l^{j_{n-1}, j_n}(tau_n, z^-(tau_n))` for `n = 1..=N`.
    pub switching: Vec<f64>,
    pub terminal: f64,
    pub total: f64,
}

/// `J = int_0^T l dt + sum_n l^{j_{n-1},j_n}(tau_n, z^-(tau_n)) + phi(z(T))`.
pub fn evaluate_cost(system: &HybridSystemSpec, traj: &HybridTrajectory) -> CostBreakdown {
    let cost = system.cost();
    let running_per_segment: Vec<f64> = if cost.running.is_zero() {
        vec![0.0; traj.segments.len()]
    } else {
        traj.segments
            .iter()
            .map(|seg| seg.integrate_scalar(|t, z| cost.running.value(t, z)))
            .collect()
    };
    let running = running_per_segment.iter().sum();
    let switching: Vec<f64> = (1..=traj.schedule.len())
        .map(|n| {
            system
                .switch_cost(traj.modes.get(n - 1), traj.modes.get(n))
                .map_or(0.0, |c| c.value(traj.schedule.time(n), &traj.left[n]))
        })
        .collect();
    let terminal = cost.terminal_value(traj.final_state());
    let total = running + switching.iter().sum::<f64>() + terminal;
    CostBreakdown { running, running_per_segment, switching, terminal, total }
}

/// Reduced cost `Phi(j, tau)`: one forward solve followed by cost evaluation.
pub fn reduced_cost(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule: &SwitchingSchedule,
    options: &StepperOptions,
) -> Result<f64> {
    let traj = solve_forward(system, modes, schedule, options)?;
    Ok(evaluate_cost(system, &traj).total)
}
