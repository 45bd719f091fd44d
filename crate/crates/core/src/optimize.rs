//! Projected gradient descent on switching times and an insertion loop over mode sequences.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exec::Execution;
use crate::forward::reduced_cost;
use crate::gradients::{
    adjoint_gradient, default_coincidence_eps, insertion_scan, insertion_site, kkt_residual, uniform_grid,
    ChainCheckOptions, InsertionEntry,
};
use crate::integrate::StepperOptions;
use crate::model::{HybridSystemSpec, ModeIndex, ModeSequence, SwitchingSchedule};

/// Euclidean projection onto `0 <= tau_1 <= ... <= tau_N <= T`: pool adjacent violators, then clamp.
pub fn project_schedule(raw: &[f64], horizon: f64) -> SwitchingSchedule {
    // blocks of (mean, weight)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(raw.len());
    for &x in raw {
        blocks.push((x, 1));
        while blocks.len() > 1 {
            let (m2, w2) = blocks[blocks.len() - 1];
            let (m1, w1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let w = w1 + w2;
            *blocks.last_mut().expect("two blocks") = ((m1 * w1 as f64 + m2 * w2 as f64) / w as f64, w);
        }
    }
    let interior = blocks
        .into_iter()
        .flat_map(|(m, w)| std::iter::repeat_n(m.clamp(0.0, horizon), w))
        .collect();
    SwitchingSchedule::from_sorted_unchecked(interior, horizon)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    /// Armijo sufficient-decrease fraction.
    pub sigma: f64,
    /// Backtracking factor.
    pub beta: f64,
    /// First trial step; defaults to `T / (10 max(1, |g|))`.
    pub initial_step: Option<f64>,
    /// Stop once the grouped residual is below `kkt_tol * max(1, |g|)`.
    pub kkt_tol: f64,
    /// Steps below `min_step * T` count as a line-search stall.
    pub min_step: f64,
    /// Defaults to `-1e-3 (1 + |Phi|)`.
    pub insertion_threshold: Option<f64>,
    pub insertion_grid: usize,
    pub max_insertions: usize,
    /// Modes considered for insertion; all modes when absent.
    pub candidates: Option<Vec<usize>>,
    pub coincidence_eps: Option<f64>,
    pub chain: ChainCheckOptions,
    pub execution: Execution,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            sigma: 1e-4,
            beta: 0.5,
            initial_step: None,
            kkt_tol: 1e-6,
            min_step: 1e-14,
            insertion_threshold: None,
            insertion_grid: 9,
            max_insertions: 4,
            candidates: None,
            coincidence_eps: None,
            chain: ChainCheckOptions::default(),
            execution: Execution::default(),
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(crate::error::Error::BadParams(m.into()));
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return bad("sigma must lie in (0, 1)");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(self.kkt_tol.is_finite() && self.kkt_tol > 0.0) {
            return bad("kkt_tol must be positive");
        }
        if self.initial_step.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
            return bad("initial_step must be positive");
        }
        if self.insertion_threshold.is_some_and(|s| !(s.is_finite() && s < 0.0)) {
            return bad("insertion_threshold must be negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Start,
    Descent,
    Insert,
    Remove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub action: Action,
    pub modes: Vec<usize>,
    pub schedule: Vec<f64>,
    pub cost: f64,
    pub gradient: Vec<f64>,
    pub kkt_residual: f64,
    pub step: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Stationary,
    MaxIterations,
    LineSearchStall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    pub final_modes: Vec<usize>,
    pub final_schedule: Vec<f64>,
    pub final_cost: f64,
    pub final_gradient: Vec<f64>,
    pub kkt_residual: f64,
    pub insertions: usize,
    pub removals: usize,
}

impl OptimizationTrace {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Stationary
    }

    pub fn stalled(&self) -> bool {
        self.termination == Termination::LineSearchStall
    }

    pub fn final_sequence(&self) -> Result<ModeSequence> {
        ModeSequence::from_indices(&self.final_modes)
    }
}

struct Point {
    schedule: SwitchingSchedule,
    cost: f64,
    gradient: Vec<f64>,
    residual: f64,
}

fn evaluate(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule: SwitchingSchedule,
    stepper: &StepperOptions,
    eps: f64,
) -> Result<Point> {
    let (traj, report) = adjoint_gradient(system, modes, &schedule, stepper)?;
    let cost = crate::forward::evaluate_cost(system, &traj).total;
    let residual = kkt_residual(&report.gradient, &schedule, eps).residual;
    Ok(Point { schedule, cost, gradient: report.gradient, residual })
}

fn record(iteration: usize, action: Action, modes: &ModeSequence, p: &Point, step: f64) -> IterationRecord {
    IterationRecord {
        iteration,
        action,
        modes: modes.indices(),
        schedule: p.schedule.interior().to_vec(),
        cost: p.cost,
        gradient: p.gradient.clone(),
        kkt_residual: p.residual,
        step,
    }
}

fn norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Projected gradient descent with Armijo backtracking on a fixed mode sequence.
///
/// After an accepted step the next trial step starts from twice the accepted one when that is
/// larger than the default, so flat valleys are not crawled at the default step.
pub fn optimize_times(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule0: &SwitchingSchedule,
    options: &OptimizerOptions,
    stepper: &StepperOptions,
) -> Result<OptimizationTrace> {
    options.validate()?;
    system.check_sequence(modes, schedule0)?;
    let horizon = system.horizon();
    let eps = options.coincidence_eps.unwrap_or_else(|| default_coincidence_eps(horizon));
    let mut current = evaluate(system, modes, schedule0.clone(), stepper, eps)?;
    let mut records = vec![record(0, Action::Start, modes, &current, 0.0)];
    let mut last_accepted: Option<f64> = None;
    let mut termination = Termination::MaxIterations;

    for iteration in 1..=options.max_iters {
        let gnorm = norm(&current.gradient);
        if current.residual <= options.kkt_tol * gnorm.max(1.0) {
            termination = Termination::Stationary;
            break;
        }
        let default_step = options.initial_step.unwrap_or(horizon / (10.0 * gnorm.max(1.0)));
        let mut alpha = last_accepted.map_or(default_step, |a| (2.0 * a).max(default_step));
        let accepted = loop {
            if alpha < options.min_step * horizon {
                break None;
            }
            let raw: Vec<f64> = current.schedule.interior().iter().zip(&current.gradient).map(|(t, g)| t - alpha * g).collect();
            let trial = project_schedule(&raw, horizon);
            let decrease: f64 = current
                .gradient
                .iter()
                .zip(current.schedule.interior().iter().zip(trial.interior()))
                .map(|(g, (old, new))| g * (old - new))
                .sum();
            if decrease > 0.0 {
                let cost = reduced_cost(system, modes, &trial, stepper)?;
                if cost <= current.cost - options.sigma * decrease {
                    break Some(trial);
                }
            }
            alpha *= options.beta;
        };
        match accepted {
            Some(trial) => {
                current = evaluate(system, modes, trial, stepper, eps)?;
                last_accepted = Some(alpha);
                records.push(record(iteration, Action::Descent, modes, &current, alpha));
            }
            None => {
                termination = Termination::LineSearchStall;
                break;
            }
        }
    }
    if termination == Termination::MaxIterations
        && current.residual <= options.kkt_tol * norm(&current.gradient).max(1.0)
    {
        termination = Termination::Stationary;
    }
    Ok(OptimizationTrace {
        termination,
        final_modes: modes.indices(),
        final_schedule: current.schedule.interior().to_vec(),
        final_cost: current.cost,
        final_gradient: current.gradient.clone(),
        kkt_residual: current.residual,
        records,
        insertions: 0,
        removals: 0,
    })
}

/// Removes zero-length segments bracketed by the same mode when that does not raise the cost.
fn prune(
    system: &HybridSystemSpec,
    modes: ModeSequence,
    schedule: SwitchingSchedule,
    cost: f64,
    stepper: &StepperOptions,
    eps: f64,
) -> Result<(ModeSequence, SwitchingSchedule, f64, usize)> {
    let (mut modes, mut schedule, mut cost) = (modes, schedule, cost);
    let mut removed = 0;
    let mut n = 1;
    while n < schedule.len() {
        let zero_length = schedule.time(n + 1) - schedule.time(n) <= eps;
        if zero_length && modes.get(n - 1) == modes.get(n + 1) {
            let mut m = modes.as_slice().to_vec();
            m.drain(n..n + 2);
            let mut raw = schedule.interior().to_vec();
            raw.drain(n - 1..n + 1);
            let m = ModeSequence::new(m)?;
            let s = crate::model::validate_schedule(&raw, schedule.horizon())?;
            let c = reduced_cost(system, &m, &s, stepper)?;
            if c <= cost + 1e-12 * (1.0 + cost.abs()) {
                (modes, schedule, cost) = (m, s, c);
                removed += 1;
                continue;
            }
        }
        n += 1;
    }
    Ok((modes, schedule, cost, removed))
}

fn candidate_list(system: &HybridSystemSpec, options: &OptimizerOptions) -> Vec<ModeIndex> {
    match &options.candidates {
        Some(c) => c.iter().copied().map(ModeIndex).collect(),
        None => (0..system.modes().len()).map(ModeIndex).collect(),
    }
}

/// Alternates switching-time descent with insertion of the most promising mode.
pub fn optimize_sequence(
    system: &HybridSystemSpec,
    modes0: &ModeSequence,
    schedule0: &SwitchingSchedule,
    options: &OptimizerOptions,
    stepper: &StepperOptions,
) -> Result<OptimizationTrace> {
    options.validate()?;
    let horizon = system.horizon();
    let eps = options.coincidence_eps.unwrap_or_else(|| default_coincidence_eps(horizon));
    let candidates = candidate_list(system, options);
    let grid = uniform_grid(horizon, options.insertion_grid);

    let mut modes = modes0.clone();
    let mut schedule = schedule0.clone();
    let mut records = Vec::new();
    let mut insertions = 0;
    let mut removals = 0;
    let (termination, final_cost) = loop {
        let mut trace = optimize_times(system, &modes, &schedule, options, stepper)?;
        let offset = records.len();
        for r in &mut trace.records {
            r.iteration += offset;
        }
        records.append(&mut trace.records);
        schedule = crate::model::validate_schedule(&trace.final_schedule, horizon)?;

        let (m, s, cost, removed) = prune(system, modes.clone(), schedule.clone(), trace.final_cost, stepper, eps)?;
        if removed > 0 {
            removals += removed;
            (modes, schedule) = (m, s);
            let p = evaluate(system, &modes, schedule.clone(), stepper, eps)?;
            records.push(record(records.len(), Action::Remove, &modes, &p, 0.0));
        }

        if insertions >= options.max_insertions {
            break (trace.termination, cost);
        }
        let scan = insertion_scan(system, &modes, &schedule, &grid, &candidates, stepper, &options.chain, options.execution);
        let threshold = options.insertion_threshold.unwrap_or(-1e-3 * (1.0 + cost.abs()));
        let best: Option<&InsertionEntry> = scan.entries.iter().find(|e| {
            e.feasible
                && insertion_site(system, &modes, &schedule, e.time, e.mode).is_ok_and(|site| site.ambient != e.mode)
        });
        match best {
            Some(entry) if entry.value < threshold => {
                let site = insertion_site(system, &modes, &schedule, entry.time, entry.mode)?;
                modes = site.modes;
                schedule = site.schedule;
                insertions += 1;
                let p = evaluate(system, &modes, schedule.clone(), stepper, eps)?;
                records.push(record(records.len(), Action::Insert, &modes, &p, entry.value));
            }
            _ => break (trace.termination, cost),
        }
    };
    let p = evaluate(system, &modes, schedule.clone(), stepper, eps)?;
    Ok(OptimizationTrace {
        termination,
        final_modes: modes.indices(),
        final_schedule: schedule.interior().to_vec(),
        final_cost,
        final_gradient: p.gradient,
        kkt_residual: p.residual,
        records,
        insertions,
        removals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        validate_schedule, CostSpec, ModeSpec, Nonlinearity, QuadraticForm, ResetMap, RunningCost, State, Weight,
    };
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    /// Minimum-distance point over all active sets of the order-and-box constraints.
    fn qp_projection(x: &[f64], horizon: f64) -> Vec<f64> {
        let n = x.len();
        // constraints c_0: tau_1 >= 0, c_i: tau_i <= tau_{i+1}, c_n: tau_n <= T
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0u32..(1 << (n + 1)) {
            // active constraints merge indices into blocks; block may be pinned to 0 or T
            let mut blocks: Vec<Vec<usize>> = vec![vec![0]];
            for i in 1..n {
                if mask & (1 << i) != 0 {
                    blocks.last_mut().unwrap().push(i);
                } else {
                    blocks.push(vec![i]);
                }
            }
            let pin_low = mask & 1 != 0;
            let pin_high = mask & (1 << n) != 0;
            let mut y = vec![0.0; n];
            let nb = blocks.len();
            for (b, idx) in blocks.iter().enumerate() {
                let mean = idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64;
                let v = if b == 0 && pin_low {
                    0.0
                } else if b == nb - 1 && pin_high {
                    horizon
                } else {
                    mean
                };
                for &i in idx {
                    y[i] = v;
                }
            }
            let feasible = y[0] >= 0.0 && y[n - 1] <= horizon && y.windows(2).all(|w| w[0] <= w[1]);
            if !feasible {
                continue;
            }
            let d: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, y));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_schedule(&[0.2, 0.7], 1.0).interior(), &[0.2, 0.7]);
        assert_eq!(project_schedule(&[0.6, 0.4], 1.0).interior(), &[0.5, 0.5]);
        assert_eq!(project_schedule(&[-0.1, 1.2], 1.0).interior(), &[0.0, 1.0]);
        assert_eq!(project_schedule(&[], 1.0).interior(), &[] as &[f64]);
        assert_eq!(qp_projection(&[0.6, 0.4], 1.0), vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn projection_matches_active_set_qp(x in prop::collection::vec(-0.5f64..1.5, 1..=4)) {
            let p = project_schedule(&x, 1.0);
            let q = qp_projection(&x, 1.0);
            for (a, b) in p.interior().iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-8);
            }
        }

        #[test]
        fn projection_is_idempotent_and_non_expansive(
            pair in (1usize..=6).prop_flat_map(|n| (prop::collection::vec(-1.0f64..2.0, n), prop::collection::vec(-1.0f64..2.0, n)))
        ) {
            let (x, y) = pair;
            let px = project_schedule(&x, 1.0);
            let py = project_schedule(&y, 1.0);
            let again = project_schedule(px.interior(), 1.0);
            prop_assert_eq!(again.interior(), px.interior());
            let dp = norm(&px.interior().iter().zip(py.interior()).map(|(a, b)| a - b).collect::<Vec<_>>());
            let dx = norm(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
            prop_assert!(dp <= dx + 1e-12);
            prop_assert!(validate_schedule(px.interior(), 1.0).is_ok());
        }
    }

    fn scalar_system(rates: &[f64]) -> HybridSystemSpec {
        let n = rates.len();
        let resets = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| ((i, j), ResetMap::Identity))).collect();
        HybridSystemSpec::new(
            rates.iter().map(|&a| ModeSpec::new(DMatrix::from_element(1, 1, a), Nonlinearity::zero())).collect(),
            resets,
            CostSpec { running: RunningCost::quadratic(QuadraticForm::new(Weight::Scalar(1.0))), ..CostSpec::default() },
            1.0,
            State::from_element(1, 1.0),
        )
        .unwrap()
    }

    fn stepper() -> StepperOptions {
        StepperOptions::default().with_h_max(0.01)
    }

    #[test]
    fn stationary_start_does_not_move() {
        let sys = scalar_system(&[0.5, 0.5]);
        let m = ModeSequence::from_indices(&[0, 1]).unwrap();
        let trace = optimize_times(&sys, &m, &validate_schedule(&[0.4], 1.0).unwrap(), &OptimizerOptions::default(), &stepper()).unwrap();
        assert!(trace.converged());
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.final_schedule, vec![0.4]);
    }

    #[test]
    fn unstable_first_mode_is_pushed_to_zero() {
        let sys = scalar_system(&[1.0, -2.0]);
        let m = ModeSequence::from_indices(&[0, 1]).unwrap();
        let trace = optimize_times(&sys, &m, &validate_schedule(&[0.6], 1.0).unwrap(), &OptimizerOptions::default(), &stepper()).unwrap();
        assert!(trace.converged(), "{:?}", trace.termination);
        assert_eq!(trace.final_schedule, vec![0.0]);
        assert!(trace.final_gradient[0] > 0.0);
        assert!(trace.records.windows(2).all(|w| w[1].cost <= w[0].cost));
    }

    #[test]
    fn interior_minimum_is_found() {
        // z' = z then z' = -3z with running 1/2 z^2 plus terminal pull towards 2
        let mut sys = scalar_system(&[1.0, -3.0]);
        let mut cost = sys.cost().clone();
        cost.terminal = Some(QuadraticForm::new(Weight::Scalar(10.0)).with_target(State::from_element(1, 0.8)));
        sys = HybridSystemSpec::new(sys.modes().to_vec(), sys.resets().clone(), cost, 1.0, sys.initial_state().clone()).unwrap();
        let m = ModeSequence::from_indices(&[0, 1]).unwrap();
        let trace = optimize_times(&sys, &m, &validate_schedule(&[0.9], 1.0).unwrap(), &OptimizerOptions::default(), &stepper()).unwrap();
        assert!(trace.converged(), "{:?}", trace.termination);
        let tau = trace.final_schedule[0];
        assert!(tau > 0.0 && tau < 1.0);
        assert!(trace.kkt_residual <= 1e-6 * norm(&trace.final_gradient).max(1.0));
        assert!(trace.records.windows(2).all(|w| w[1].cost <= w[0].cost));
    }

    #[test]
    fn sequence_optimization_inserts_stable_mode() {
        let sys = scalar_system(&[1.0, -5.0]);
        let m = ModeSequence::from_indices(&[0]).unwrap();
        let s = validate_schedule(&[], 1.0).unwrap();
        let baseline = optimize_times(&sys, &m, &s, &OptimizerOptions::default(), &stepper()).unwrap();
        let opts = OptimizerOptions { max_insertions: 1, ..OptimizerOptions::default() };
        let trace = optimize_sequence(&sys, &m, &s, &opts, &stepper()).unwrap();
        assert_eq!(trace.insertions, 1);
        assert!(trace.final_cost < baseline.final_cost);
        assert!(trace.records.iter().any(|r| r.action == Action::Insert));
    }

    #[test]
    fn no_beneficial_candidate_reduces_to_time_optimization() {
        let sys = scalar_system(&[-1.0, -1.0]);
        let m = ModeSequence::from_indices(&[0]).unwrap();
        let s = validate_schedule(&[], 1.0).unwrap();
        let trace = optimize_sequence(&sys, &m, &s, &OptimizerOptions::default(), &stepper()).unwrap();
        assert_eq!(trace.insertions, 0);
        assert_eq!(trace.final_modes, vec![0]);
        // ambient candidate only
        let opts = OptimizerOptions { candidates: Some(vec![0]), ..OptimizerOptions::default() };
        let trace = optimize_sequence(&scalar_system(&[1.0, -5.0]), &m, &s, &opts, &stepper()).unwrap();
        assert_eq!(trace.insertions, 0);
    }

    #[test]
    fn zero_length_bracketed_segment_is_removed() {
        let sys = scalar_system(&[-1.0, 3.0]);
        let m = ModeSequence::from_indices(&[0, 1, 0]).unwrap();
        let s = validate_schedule(&[0.5, 0.5], 1.0).unwrap();
        let c = reduced_cost(&sys, &m, &s, &stepper()).unwrap();
        let (m2, s2, c2, removed) = prune(&sys, m, s, c, &stepper(), 1e-9).unwrap();
        assert_eq!(removed, 1);
        assert_eq!(m2.indices(), vec![0]);
        assert!(s2.is_empty());
        assert!((c2 - c).abs() < 1e-12);
    }
}
