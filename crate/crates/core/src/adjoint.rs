//! Backward adjoint solve aligned with a forward trajectory.
//!
//! Sign convention: `p' = -A^T p - f_z^T p + l_z` on segments, `p(tau_n) = g_z^T p+(tau_n) - l^{ij}_z`
//! at switches and `p(T) = -phi_z(z(T))`. With these signs the switching-time gradient reads
//! `l(z-) - l(z) + l^{ij}_tau - <p+(tau_k), z_k(tau_k)>`.

use crate::error::{Error, Result};
use crate::forward::{DenseSegment, HybridTrajectory};
use crate::integrate::{integrate, Failure};
use crate::model::{HybridSystemSpec, State};

const BLOWUP_FACTOR: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointTrajectory {
    segments: Vec<DenseSegment>,
    // after[n] = p+(tau_n) (start of segment n), after[N+1] = p(T)
    after: Vec<State>,
    // before[n] = p(tau_n) after the jump (end of segment n-1), before[0] = p(0)
    before: Vec<State>,
}

impl AdjointTrajectory {
    /// Backward dense segments, one per forward segment, stored in increasing time.
    pub fn segments(&self) -> &[DenseSegment] {
        &self.segments
    }

    /// `p+(tau_n)`: value at the start of segment `n`, before the jump at `tau_n` is applied.
    pub fn right_limit(&self, n: usize) -> &State {
        &self.after[n]
    }

    /// `p(tau_n)`: value after the jump at `tau_n`, i.e. the end value of segment `n - 1`.
    pub fn left_value(&self, n: usize) -> &State {
        &self.before[n]
    }

    pub fn terminal(&self) -> &State {
        &self.after[self.after.len() - 1]
    }

    pub fn initial(&self) -> &State {
        &self.before[0]
    }

    pub fn eval(&self, t: f64) -> State {
        let seg = self
            .segments
            .iter()
            .find(|s| t <= s.t_end && !s.is_degenerate())
            .unwrap_or_else(|| &self.segments[self.segments.len() - 1]);
        seg.eval(t)
    }
}

/// Integrates the adjoint system backward over every segment of `traj`, reusing each segment's
/// step count and method and reading the state from its dense output.
pub fn solve_adjoint(system: &HybridSystemSpec, traj: &HybridTrajectory) -> Result<AdjointTrajectory> {
    let schedule = traj.schedule();
    let modes = traj.modes();
    let n_switch = schedule.len();
    if traj.segments().len() != n_switch + 1 {
        return Err(Error::ScheduleMismatch);
    }
    let cost = system.cost();

    let p_terminal = -cost.terminal_gradient(traj.final_state());
    let bound = BLOWUP_FACTOR * (1.0 + p_terminal.norm() + system.initial_state().norm());

    let mut segments: Vec<Option<DenseSegment>> = vec![None; n_switch + 1];
    let mut after = vec![State::zeros(0); n_switch + 2];
    let mut before = vec![State::zeros(0); n_switch + 2];
    after[n_switch + 1] = p_terminal.clone();
    before[n_switch + 1] = p_terminal;

    for n in (0..=n_switch).rev() {
        let fwd = &traj.segments()[n];
        let mode = system.mode(fwd.mode)?;
        let linear = -mode.generator.transpose();
        let remainder = |t: f64, p: &State| {
            let z = fwd.eval(t);
            let mut d = cost.running.gradient(t, &z);
            if !mode.nonlinearity.is_zero() {
                d -= mode.nonlinearity.jacobian_transpose_apply(t, &z, p);
            }
            d
        };
        let samples = integrate(
            &linear,
            remainder,
            (fwd.t_end, fwd.t_start),
            before[n + 1].clone(),
            fwd.steps(),
            fwd.method,
            bound,
        )
        .map_err(|e| match e {
            Failure::BlowUp { time, norm } => Error::BlowUp { segment: n, time, norm },
            Failure::NonFinite { time } => Error::NonFiniteState { segment: n, time },
        })?;
        let seg = DenseSegment::from_parts(fwd.mode, fwd.method, samples.knots, samples.values, samples.derivatives);
        after[n] = seg.start_value().clone();
        before[n] = if n == 0 {
            after[0].clone()
        } else {
            let (from, to) = (modes.get(n - 1), modes.get(n));
            let z_minus = traj.left_limit(n);
            let mut p = system.reset(from, to)?.jacobian_transpose_apply(z_minus, &after[n]);
            if let Some(c) = system.switch_cost(from, to) {
                p -= c.state_gradient(schedule.time(n), z_minus);
            }
            p
        };
        segments[n] = Some(seg);
    }

    Ok(AdjointTrajectory { segments: segments.into_iter().map(|s| s.expect("every segment solved")).collect(), after, before })
}
