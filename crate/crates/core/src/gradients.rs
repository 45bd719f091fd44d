//! Switching-time gradients, grouped stationarity conditions and mode-insertion gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint, AdjointTrajectory};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::forward::{reduced_cost, solve_forward, HybridTrajectory};
use crate::integrate::StepperOptions;
use crate::model::{
    check_chain_property, coincidence_groups, Coincidence, HybridSystemSpec, ModeIndex, ModeSequence, State,
    SwitchingSchedule,
};
use crate::sensitivity::{fd_gradient_all, seed_variation, solve_variational, FdEstimate, FdOptions, VariationalTrajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMethod {
    Adjoint,
    Variational,
    FiniteDifference,
}

/// Default tolerance for treating neighbouring switching times as coincident.
pub fn default_coincidence_eps(horizon: f64) -> f64 {
    1e-9 * horizon
}

/// Grouped sums and residual of the first-order conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktSummary {
    pub groups: Vec<Coincidence>,
    /// `sum_{j=a(k)}^{k} g_j` over interior indices.
    pub backward_sums: Vec<f64>,
    /// `sum_{j=k}^{b(k)} g_j` over interior indices.
    pub forward_sums: Vec<f64>,
    pub residual: f64,
}

/// Violation of `sum_{a..k} g <= 0` and `sum_{k..b} g >= 0`, maximised over `k`.
///
/// A group touching `t = 0` cannot move earlier, so its backward condition is dropped; a group
/// touching `T` likewise drops the forward one.
pub fn kkt_residual(gradient: &[f64], schedule: &SwitchingSchedule, eps: f64) -> KktSummary {
    let n = schedule.len();
    assert_eq!(gradient.len(), n, "one gradient entry per switching time");
    let groups = coincidence_groups(schedule, eps);
    let sum = |lo: usize, hi: usize| -> f64 { (lo.max(1)..=hi.min(n)).map(|j| gradient[j - 1]).sum() };
    let mut backward_sums = Vec::with_capacity(n);
    let mut forward_sums = Vec::with_capacity(n);
    let mut residual = 0.0f64;
    for (idx, grp) in groups.iter().enumerate() {
        let k = idx + 1;
        let back = sum(grp.first, k);
        let fwd = sum(k, grp.last);
        backward_sums.push(back);
        forward_sums.push(fwd);
        let mut r = 0.0;
        if grp.first >= 1 {
            r += back.max(0.0);
        }
        if grp.last <= n {
            r += (-fwd).max(0.0);
        }
        residual = residual.max(r);
    }
    KktSummary { groups, backward_sums, forward_sums, residual }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub method: GradientMethod,
    pub gradient: Vec<f64>,
    pub kkt: KktSummary,
}

impl GradientReport {
    pub fn new(method: GradientMethod, gradient: Vec<f64>, schedule: &SwitchingSchedule) -> Self {
        let kkt = kkt_residual(&gradient, schedule, default_coincidence_eps(schedule.horizon()));
        Self { method, gradient, kkt }
    }

    pub fn kkt_residual(&self) -> f64 {
        self.kkt.residual
    }

    pub fn norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// `l(tau_k, z-) - l(tau_k, z) + l^{ij}_tau(tau_k, z-)`: the terms outside the pairing.
fn local_terms(system: &HybridSystemSpec, traj: &HybridTrajectory, k: usize) -> f64 {
    let cost = system.cost();
    let t = traj.schedule().time(k);
    let (z_minus, z_plus) = (traj.left_limit(k), traj.right_value(k));
    let switch = system
        .switch_cost(traj.modes().get(k - 1), traj.modes().get(k))
        .map_or(0.0, |c| c.time_partial(t, z_minus));
    cost.running.value(t, z_minus) - cost.running.value(t, z_plus) + switch
}

fn adjoint_component(system: &HybridSystemSpec, traj: &HybridTrajectory, adj: &AdjointTrajectory, k: usize) -> Result<f64> {
    let seed = seed_variation(system, traj, k)?;
    Ok(local_terms(system, traj, k) - adj.right_limit(k).dot(&seed))
}

/// All switching-time derivatives from one forward and one adjoint solve.
pub fn switching_gradient(
    system: &HybridSystemSpec,
    traj: &HybridTrajectory,
    adj: &AdjointTrajectory,
) -> Result<GradientReport> {
    let n = traj.schedule().len();
    if adj.segments().len() != n + 1
        || adj.segments().iter().zip(traj.segments()).any(|(a, f)| a.steps() != f.steps() || a.t_start != f.t_start || a.t_end != f.t_end)
    {
        return Err(Error::ScheduleMismatch);
    }
    let gradient = (1..=n).map(|k| adjoint_component(system, traj, adj, k)).collect::<Result<Vec<_>>>()?;
    Ok(GradientReport::new(GradientMethod::Adjoint, gradient, traj.schedule()))
}

/// Forward solve, adjoint solve and gradient in one call.
pub fn adjoint_gradient(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule: &SwitchingSchedule,
    stepper: &StepperOptions,
) -> Result<(HybridTrajectory, GradientReport)> {
    let traj = solve_forward(system, modes, schedule, stepper)?;
    let adj = solve_adjoint(system, &traj)?;
    let report = switching_gradient(system, &traj, &adj)?;
    Ok((traj, report))
}

/// Gradient component `k` through the forward sensitivity instead of the adjoint.
pub fn variational_gradient(
    system: &HybridSystemSpec,
    traj: &HybridTrajectory,
    k: usize,
    var: &VariationalTrajectory,
) -> Result<f64> {
    if var.k != k {
        return Err(Error::BadParams(format!("variational solution is for switch {}, not {k}", var.k)));
    }
    let cost = system.cost();
    let n_switch = traj.schedule().len();
    let mut g = local_terms(system, traj, k);
    if !cost.running.is_zero() {
        for n in k..=n_switch {
            let z = &traj.segments()[n];
            g += var.segment(n).integrate_scalar(|t, zk| cost.running.gradient(t, &z.eval(t)).dot(zk));
        }
    }
    for n in k + 1..=n_switch {
        if let Some(c) = system.switch_cost(traj.modes().get(n - 1), traj.modes().get(n)) {
            g += c.state_gradient(traj.schedule().time(n), traj.left_limit(n)).dot(var.left_limit(n));
        }
    }
    g += cost.terminal_gradient(traj.final_state()).dot(var.final_value());
    Ok(g)
}

/// Variational gradients for every `k`.
pub fn variational_report(system: &HybridSystemSpec, traj: &HybridTrajectory, exec: Execution) -> Result<GradientReport> {
    let ks: Vec<usize> = (1..=traj.schedule().len()).collect();
    let gradient = exec
        .map(&ks, |&k| solve_variational(system, traj, k).and_then(|v| variational_gradient(system, traj, k, &v)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientReport::new(GradientMethod::Variational, gradient, traj.schedule()))
}

/// Settings for the reset composition check done before every insertion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainCheckOptions {
    /// Relative to `1 + |z|`.
    pub tolerance: f64,
    /// Random perturbations per trajectory sample.
    pub perturbations: usize,
    pub seed: u64,
}

impl Default for ChainCheckOptions {
    fn default() -> Self {
        Self { tolerance: 1e-9, perturbations: 2, seed: 0 }
    }
}

/// Where an insertion at time `t` lands.
#[derive(Clone, Debug, PartialEq)]
pub struct InsertionSite {
    /// Owning segment, `tau_n <= t < tau_{n+1}`.
    pub segment: usize,
    pub time: f64,
    pub ambient: ModeIndex,
    pub modes: ModeSequence,
    pub schedule: SwitchingSchedule,
    /// 1-based index of the switch that closes the inserted interval.
    pub closing: usize,
}

impl InsertionSite {
    /// Expanded schedule with the inserted interval widened to `[t, t + width]`.
    pub fn widened(&self, width: f64) -> Result<SwitchingSchedule> {
        let mut raw = self.schedule.interior().to_vec();
        raw[self.closing - 1] += width;
        crate::model::validate_schedule(&raw, self.schedule.horizon())
    }
}

/// Locates the owning segment and builds `(.., j_n, jhat, j_n, ..)` with times `(.., t, t, ..)`.
pub fn insertion_site(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule: &SwitchingSchedule,
    t: f64,
    jhat: ModeIndex,
) -> Result<InsertionSite> {
    system.check_sequence(modes, schedule)?;
    system.mode(jhat)?;
    let infeasible = |reason: &str| Error::InfeasibleInsertion { time: t, reason: reason.into() };
    if !(t.is_finite() && t >= 0.0) {
        return Err(infeasible("time outside the horizon"));
    }
    if t >= schedule.horizon() {
        return Err(infeasible("no room before the horizon"));
    }
    let n_switch = schedule.len();
    let segment = (0..=n_switch).rev().find(|&n| schedule.time(n) <= t).unwrap_or(0);
    if schedule.time(segment + 1) <= t {
        return Err(infeasible("owning segment has zero length"));
    }
    let ambient = modes.get(segment);
    system.reset(ambient, jhat)?;
    system.reset(jhat, ambient)?;

    let mut m = modes.as_slice().to_vec();
    m.splice(segment + 1..segment + 1, [jhat, ambient]);
    let mut raw = schedule.interior().to_vec();
    raw.splice(segment..segment, [t, t]);
    Ok(InsertionSite {
        segment,
        time: t,
        ambient,
        modes: ModeSequence::new(m)?,
        schedule: crate::model::validate_schedule(&raw, schedule.horizon())?,
        closing: segment + 2,
    })
}

fn chain_samples(traj: &HybridTrajectory, segment: usize, t: f64, opts: &ChainCheckOptions) -> Vec<State> {
    let mut base = vec![traj.segments()[segment].eval(t), traj.right_value(segment).clone(), traj.final_state().clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let extra: Vec<State> = base
        .iter()
        .flat_map(|z| {
            let scale = 1.0 + z.amax();
            (0..opts.perturbations)
                .map(|_| z + State::from_fn(z.len(), |_, _| scale * rng.random_range(-0.5..0.5)))
                .collect::<Vec<_>>()
        })
        .collect();
    base.extend(extra);
    base
}

/// Insertion gradient of `jhat` at time `t`: derivative of the cost in the width of an inserted
/// interval `[t, t + w]` at `w = 0`. Equals the switching-time derivative of the expanded problem
/// at the closing switch.
pub fn insertion_gradient_at(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule: &SwitchingSchedule,
    t: f64,
    jhat: ModeIndex,
    stepper: &StepperOptions,
    chain: &ChainCheckOptions,
) -> Result<f64> {
    let site = insertion_site(system, modes, schedule, t, jhat)?;
    if jhat == site.ambient {
        return Ok(0.0);
    }
    let original = solve_forward(system, modes, schedule, stepper)?;
    let samples = chain_samples(&original, site.segment, t, chain);
    let scale = 1.0 + samples.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let report = check_chain_property(system, (site.ambient, jhat, site.ambient), &samples, chain.tolerance * scale)?;
    if !report.pass {
        return Err(Error::ChainPropertyViolation {
            from: site.ambient.get(),
            via: jhat.get(),
            to: site.ambient.get(),
            defect: report.defect,
            tolerance: report.tolerance,
        });
    }
    let traj = solve_forward(system, &site.modes, &site.schedule, stepper)?;
    let adj = solve_adjoint(system, &traj)?;
    adjoint_component(system, &traj, &adj, site.closing)
}

/// Insertion gradient at the start of segment `k` (`t = tau_k`, `k = 0..=N`).
pub fn insertion_gradient(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule: &SwitchingSchedule,
    k: usize,
    jhat: ModeIndex,
    stepper: &StepperOptions,
    chain: &ChainCheckOptions,
) -> Result<f64> {
    if k > schedule.len() {
        return Err(Error::BadParams(format!("insertion position {k} outside 0..={}", schedule.len())));
    }
    let t = schedule.time(k);
    if schedule.time(k + 1) <= t {
        return Err(Error::InfeasibleInsertion { time: t, reason: "segment has zero length".into() });
    }
    insertion_gradient_at(system, modes, schedule, t, jhat, stepper, chain)
}

/// One-sided quotient `(Phi'(t, t + h) - Phi'(t, t)) / h` on the expanded problem.
pub fn insertion_fd(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule: &SwitchingSchedule,
    t: f64,
    jhat: ModeIndex,
    h: f64,
    stepper: &StepperOptions,
) -> Result<f64> {
    let site = insertion_site(system, modes, schedule, t, jhat)?;
    let room = schedule.time(site.segment + 1) - t;
    let h = h.min(room);
    let base = reduced_cost(system, &site.modes, &site.schedule, stepper)?;
    let wide = reduced_cost(system, &site.modes, &site.widened(h)?, stepper)?;
    Ok((wide - base) / h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionEntry {
    pub time: f64,
    pub mode: ModeIndex,
    /// `NaN` when infeasible.
    pub value: f64,
    pub feasible: bool,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionScan {
    /// Feasible entries ascending by value, then infeasible ones in grid order.
    pub entries: Vec<InsertionEntry>,
}

impl InsertionScan {
    pub fn best(&self) -> Option<&InsertionEntry> {
        self.entries.iter().find(|e| e.feasible)
    }
}

/// `count` equally spaced times from `0` to `T` inclusive.
pub fn uniform_grid(horizon: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..count).map(|i| horizon * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Insertion gradients on every `(time, candidate)` pair; failures become flagged entries.
#[allow(clippy::too_many_arguments)]
pub fn insertion_scan(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule: &SwitchingSchedule,
    times: &[f64],
    candidates: &[ModeIndex],
    stepper: &StepperOptions,
    chain: &ChainCheckOptions,
    exec: Execution,
) -> InsertionScan {
    let pairs: Vec<(f64, ModeIndex)> = times.iter().flat_map(|&t| candidates.iter().map(move |&j| (t, j))).collect();
    let mut entries = exec.map(&pairs, |&(time, mode)| {
        match insertion_gradient_at(system, modes, schedule, time, mode, stepper, chain) {
            Ok(value) => InsertionEntry { time, mode, value, feasible: true, reason: None },
            Err(e) => InsertionEntry { time, mode, value: f64::NAN, feasible: false, reason: Some(e.to_string()) },
        }
    });
    // stable: infeasible entries keep grid order at the end
    entries.sort_by(|a, b| match (a.feasible, b.feasible) {
        (true, true) => a.value.total_cmp(&b.value),
        (true, false) => std::cmp::Ordering::Less,
        (false, true) => std::cmp::Ordering::Greater,
        (false, false) => std::cmp::Ordering::Equal,
    });
    InsertionScan { entries }
}

/// Acceptance thresholds for comparing gradient oracles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientTolerances {
    pub variational_rel: f64,
    pub fd_rel: f64,
    /// Below this magnitude the relative tolerances apply to this floor instead.
    pub small: f64,
}

impl Default for GradientTolerances {
    fn default() -> Self {
        Self { variational_rel: 1e-4, fd_rel: 1e-3, small: 1e-3 }
    }
}

impl GradientTolerances {
    pub fn agree(reference: f64, other: f64, rel: f64, small: f64) -> bool {
        (reference - other).abs() <= rel * reference.abs().max(small)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckRow {
    pub k: usize,
    pub time: f64,
    pub adjoint: f64,
    pub variational: f64,
    pub fd: FdEstimate,
    pub err_variational: f64,
    pub err_fd: f64,
    pub pass_variational: bool,
    pub pass_fd: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub rows: Vec<GradientCheckRow>,
    pub tolerances: GradientTolerances,
    pub pass: bool,
}

/// Adjoint, variational and finite-difference gradients side by side.
pub fn check_gradients(
    system: &HybridSystemSpec,
    modes: &ModeSequence,
    schedule: &SwitchingSchedule,
    stepper: &StepperOptions,
    fd: &FdOptions,
    tol: &GradientTolerances,
    exec: Execution,
) -> Result<GradientCheck> {
    let (traj, adjoint) = adjoint_gradient(system, modes, schedule, stepper)?;
    let variational = variational_report(system, &traj, exec)?;
    let fds = fd_gradient_all(system, modes, schedule, fd, stepper, exec)?;
    let rows: Vec<GradientCheckRow> = (0..schedule.len())
        .map(|i| {
            let (a, v, f) = (adjoint.gradient[i], variational.gradient[i], fds[i]);
            let denom = a.abs().max(tol.small);
            GradientCheckRow {
                k: i + 1,
                time: schedule.time(i + 1),
                adjoint: a,
                variational: v,
                fd: f,
                err_variational: (a - v).abs() / denom,
                err_fd: (a - f.value).abs() / denom,
                pass_variational: GradientTolerances::agree(a, v, tol.variational_rel, tol.small),
                pass_fd: GradientTolerances::agree(a, f.value, tol.fd_rel, tol.small),
            }
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass_variational && r.pass_fd);
    Ok(GradientCheck { rows, tolerances: *tol, pass })
}
