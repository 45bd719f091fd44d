//! Problem data: modes, reset maps, costs, schedules and mode sequences.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type State = DVector<f64>;

/// Index into the mode table of a [`HybridSystemSpec`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeIndex(pub usize);

impl ModeIndex {
    pub fn get(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One registered term of a mode nonlinearity. Terms are summed.
#[derive(Clone, Debug, PartialEq)]
pub enum Term {
    /// `B z`
    Linear { matrix: DMatrix<f64> },
    /// Elementwise `c0 + c1 z + c2 z^2 + c3 z^3`.
    Polynomial { coeffs: [f64; 4] },
    /// Elementwise `r z (1 - z / K)`.
    Logistic { rate: f64, capacity: f64 },
    /// `a cos(omega t + phase)`; a constant offset when `omega = phase = 0`.
    Forcing { amplitude: State, omega: f64, phase: f64 },
}

impl Term {
    fn check(&self, n: usize) -> Result<()> {
        match self {
            Term::Linear { matrix } => check_square("linear term", matrix, n),
            Term::Polynomial { coeffs } => {
                if coeffs.iter().all(|c| c.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::BadParams("polynomial coefficients must be finite".into()))
                }
            }
            Term::Logistic { rate, capacity } => {
                if rate.is_finite() && capacity.is_finite() && *capacity != 0.0 {
                    Ok(())
                } else {
                    Err(Error::BadParams("logistic term needs finite rate and nonzero capacity".into()))
                }
            }
            Term::Forcing { amplitude, .. } => check_len("forcing amplitude", amplitude, n),
        }
    }

    fn add_eval(&self, t: f64, z: &State, out: &mut State) {
        match self {
            Term::Linear { matrix } => out.gemv(1.0, matrix, z, 1.0),
            Term::Polynomial { coeffs: [c0, c1, c2, c3] } => {
                for (o, &x) in out.iter_mut().zip(z.iter()) {
                    *o += c0 + x * (c1 + x * (c2 + x * c3));
                }
            }
            Term::Logistic { rate, capacity } => {
                for (o, &x) in out.iter_mut().zip(z.iter()) {
                    *o += rate * x * (1.0 - x / capacity);
                }
            }
            Term::Forcing { amplitude, omega, phase } => {
                out.axpy((omega * t + phase).cos(), amplitude, 1.0);
            }
        }
    }

    /// Diagonal of the Jacobian for elementwise terms, `None` for dense ones.
    fn diagonal_slope(&self, x: f64) -> Option<f64> {
        match self {
            Term::Linear { .. } => None,
            Term::Polynomial { coeffs: [_, c1, c2, c3] } => Some(c1 + x * (2.0 * c2 + 3.0 * c3 * x)),
            Term::Logistic { rate, capacity } => Some(rate * (1.0 - 2.0 * x / capacity)),
            Term::Forcing { .. } => Some(0.0),
        }
    }
}

/// Nonlinear part `f(t, z)` of a mode, built from registered terms.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Nonlinearity {
    pub terms: Vec<Term>,
}

impl Nonlinearity {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(terms: Vec<Term>) -> Self {
        Self { terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn eval(&self, t: f64, z: &State) -> State {
        let mut out = State::zeros(z.len());
        for term in &self.terms {
            term.add_eval(t, z, &mut out);
        }
        out
    }

    pub fn jacobian(&self, t: f64, z: &State) -> DMatrix<f64> {
        let n = z.len();
        let mut jac = DMatrix::zeros(n, n);
        for term in &self.terms {
            match term {
                Term::Linear { matrix } => jac += matrix,
                other => {
                    for i in 0..n {
                        jac[(i, i)] += other.diagonal_slope(z[i]).unwrap_or(0.0);
                    }
                }
            }
        }
        let _ = t;
        jac
    }

    /// `f_z(t, z) v` without forming the Jacobian.
    pub fn jacobian_apply(&self, t: f64, z: &State, v: &State) -> State {
        self.jac_product(t, z, v, false)
    }

    /// `f_z(t, z)^T v` without forming the Jacobian.
    pub fn jacobian_transpose_apply(&self, t: f64, z: &State, v: &State) -> State {
        self.jac_product(t, z, v, true)
    }

    fn jac_product(&self, _t: f64, z: &State, v: &State, transpose: bool) -> State {
        let mut out = State::zeros(v.len());
        for term in &self.terms {
            match term {
                Term::Linear { matrix } => {
                    if transpose {
                        out.gemv_tr(1.0, matrix, v, 1.0);
                    } else {
                        out.gemv(1.0, matrix, v, 1.0);
                    }
                }
                other => {
                    for i in 0..v.len() {
                        out[i] += other.diagonal_slope(z[i]).unwrap_or(0.0) * v[i];
                    }
                }
            }
        }
        out
    }
}

/// A mode: generator matrix `A` and nonlinearity `f`, giving `z' = A z + f(t, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSpec {
    pub generator: DMatrix<f64>,
    pub nonlinearity: Nonlinearity,
}

impl ModeSpec {
    pub fn new(generator: DMatrix<f64>, nonlinearity: Nonlinearity) -> Self {
        Self { generator, nonlinearity }
    }

    pub fn dim(&self) -> usize {
        self.generator.nrows()
    }

    pub fn vector_field(&self, t: f64, z: &State) -> State {
        let mut out = self.nonlinearity.eval(t, z);
        out.gemv(1.0, &self.generator, z, 1.0);
        out
    }
}

/// State transition applied at a switching time.
#[derive(Clone, Debug, PartialEq)]
pub enum ResetMap {
    Identity,
    /// `M z + b`
    Affine { matrix: DMatrix<f64>, offset: State },
    /// Elementwise `s tanh(z / s)`.
    Saturate { scale: f64 },
}

static IDENTITY_RESET: ResetMap = ResetMap::Identity;

impl ResetMap {
    pub fn apply(&self, z: &State) -> State {
        match self {
            ResetMap::Identity => z.clone(),
            ResetMap::Affine { matrix, offset } => matrix * z + offset,
            ResetMap::Saturate { scale } => z.map(|x| scale * (x / scale).tanh()),
        }
    }

    pub fn jacobian(&self, z: &State) -> DMatrix<f64> {
        match self {
            ResetMap::Identity => DMatrix::identity(z.len(), z.len()),
            ResetMap::Affine { matrix, .. } => matrix.clone(),
            ResetMap::Saturate { scale } => DMatrix::from_diagonal(&z.map(|x| sech2(x / scale))),
        }
    }

    pub fn jacobian_apply(&self, z: &State, v: &State) -> State {
        match self {
            ResetMap::Identity => v.clone(),
            ResetMap::Affine { matrix, .. } => matrix * v,
            ResetMap::Saturate { scale } => v.zip_map(z, |vi, x| vi * sech2(x / scale)),
        }
    }

    pub fn jacobian_transpose_apply(&self, z: &State, v: &State) -> State {
        match self {
            ResetMap::Identity => v.clone(),
            ResetMap::Affine { matrix, .. } => matrix.tr_mul(v),
            ResetMap::Saturate { scale } => v.zip_map(z, |vi, x| vi * sech2(x / scale)),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        match self {
            ResetMap::Identity => Ok(()),
            ResetMap::Affine { matrix, offset } => {
                check_square("reset matrix", matrix, n)?;
                check_len("reset offset", offset, n)
            }
            ResetMap::Saturate { scale } => {
                if scale.is_finite() && *scale > 0.0 {
                    Ok(())
                } else {
                    Err(Error::BadParams("saturating reset needs a positive scale".into()))
                }
            }
        }
    }
}

fn sech2(x: f64) -> f64 {
    let c = x.cosh();
    1.0 / (c * c)
}

/// Weight matrix of a quadratic form.
#[derive(Clone, Debug, PartialEq)]
pub enum Weight {
    Scalar(f64),
    Diagonal(State),
    Full(DMatrix<f64>),
}

impl Weight {
    fn apply_symmetric(&self, v: &State) -> State {
        match self {
            Weight::Scalar(w) => v * *w,
            Weight::Diagonal(d) => v.component_mul(d),
            Weight::Full(m) => (m * v + m.tr_mul(v)) * 0.5,
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        match self {
            Weight::Scalar(_) => Ok(()),
            Weight::Diagonal(d) => check_len("diagonal weight", d, n),
            Weight::Full(m) => check_square("weight matrix", m, n),
        }
    }
}

/// `1/2 (z - r)^T W (z - r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticForm {
    pub weight: Weight,
    pub target: Option<State>,
}

impl QuadraticForm {
    pub fn new(weight: Weight) -> Self {
        Self { weight, target: None }
    }

    pub fn with_target(mut self, target: State) -> Self {
        self.target = Some(target);
        self
    }

    fn residual(&self, z: &State) -> State {
        match &self.target {
            Some(r) => z - r,
            None => z.clone(),
        }
    }

    pub fn value(&self, z: &State) -> f64 {
        let e = self.residual(z);
        0.5 * e.dot(&self.weight.apply_symmetric(&e))
    }

    pub fn gradient(&self, z: &State) -> State {
        self.weight.apply_symmetric(&self.residual(z))
    }

    fn check(&self, n: usize) -> Result<()> {
        self.weight.check(n)?;
        match &self.target {
            Some(r) => check_len("quadratic target", r, n),
            None => Ok(()),
        }
    }
}

/// Running cost `l(t, z)`.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum RunningCost {
    #[default]
    Zero,
    /// `exp(-discount t) q(z)`
    Quadratic { form: QuadraticForm, discount: f64 },
}

impl RunningCost {
    pub fn quadratic(form: QuadraticForm) -> Self {
        RunningCost::Quadratic { form, discount: 0.0 }
    }

    pub fn value(&self, t: f64, z: &State) -> f64 {
        match self {
            RunningCost::Zero => 0.0,
            RunningCost::Quadratic { form, discount } => (-discount * t).exp() * form.value(z),
        }
    }

    pub fn gradient(&self, t: f64, z: &State) -> State {
        match self {
            RunningCost::Zero => State::zeros(z.len()),
            RunningCost::Quadratic { form, discount } => form.gradient(z) * (-discount * t).exp(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, RunningCost::Zero)
    }
}

/// Switching cost `c + s t + q^T z + (w/2) |z|^2` charged on the left limit.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SwitchCost {
    pub constant: f64,
    pub time_slope: f64,
    pub linear: Option<State>,
    pub quadratic: f64,
}

impl SwitchCost {
    pub fn constant(c: f64) -> Self {
        Self { constant: c, ..Self::default() }
    }

    pub fn value(&self, t: f64, z: &State) -> f64 {
        let lin = self.linear.as_ref().map_or(0.0, |q| q.dot(z));
        self.constant + self.time_slope * t + lin + 0.5 * self.quadratic * z.norm_squared()
    }

    pub fn time_partial(&self, _t: f64, _z: &State) -> f64 {
        self.time_slope
    }

    pub fn state_gradient(&self, _t: f64, z: &State) -> State {
        let mut g = z * self.quadratic;
        if let Some(q) = &self.linear {
            g += q;
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct CostSpec {
    pub running: RunningCost,
    /// Keyed by ordered mode pair; absent pairs cost nothing.
    pub switching: BTreeMap<(usize, usize), SwitchCost>,
    pub terminal: Option<QuadraticForm>,
}

impl CostSpec {
    pub fn terminal_value(&self, z: &State) -> f64 {
        self.terminal.as_ref().map_or(0.0, |q| q.value(z))
    }

    pub fn terminal_gradient(&self, z: &State) -> State {
        self.terminal.as_ref().map_or_else(|| State::zeros(z.len()), |q| q.gradient(z))
    }
}

/// Complete problem datum: modes, resets, cost, horizon and initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridSystemSpec {
    modes: Vec<ModeSpec>,
    resets: BTreeMap<(usize, usize), ResetMap>,
    cost: CostSpec,
    horizon: f64,
    initial_state: State,
}

impl HybridSystemSpec {
    pub fn new(
        modes: Vec<ModeSpec>,
        resets: BTreeMap<(usize, usize), ResetMap>,
        cost: CostSpec,
        horizon: f64,
        initial_state: State,
    ) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidHorizon(horizon));
        }
        if modes.is_empty() {
            return Err(Error::BadParams("at least one mode is required".into()));
        }
        let n = initial_state.len();
        if n == 0 {
            return Err(Error::BadParams("state dimension must be positive".into()));
        }
        if initial_state.iter().any(|x| !x.is_finite()) {
            return Err(Error::BadParams("initial state must be finite".into()));
        }
        for mode in &modes {
            check_square("generator", &mode.generator, n)?;
            for term in &mode.nonlinearity.terms {
                term.check(n)?;
            }
        }
        let count = modes.len();
        let check_mode = |m: usize| {
            if m < count {
                Ok(())
            } else {
                Err(Error::UnknownMode { mode: m, count })
            }
        };
        for (&(i, j), reset) in &resets {
            check_mode(i)?;
            check_mode(j)?;
            if i == j {
                return Err(Error::BadParams(format!(
                    "reset {i} -> {j}: self-transitions are always the identity"
                )));
            }
            reset.check(n)?;
        }
        for (&(i, j), sc) in &cost.switching {
            check_mode(i)?;
            check_mode(j)?;
            if let Some(q) = &sc.linear {
                check_len("switching cost gradient", q, n)?;
            }
        }
        if let RunningCost::Quadratic { form, .. } = &cost.running {
            form.check(n)?;
        }
        if let Some(form) = &cost.terminal {
            form.check(n)?;
        }
        Ok(Self { modes, resets, cost, horizon, initial_state })
    }

    /// Same system with identity resets registered between every ordered pair of distinct modes
    /// that has no reset yet.
    pub fn with_identity_resets(mut self) -> Self {
        let m = self.modes.len();
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    self.resets.entry((i, j)).or_insert(ResetMap::Identity);
                }
            }
        }
        self
    }

    pub fn state_dim(&self) -> usize {
        self.initial_state.len()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn initial_state(&self) -> &State {
        &self.initial_state
    }

    pub fn modes(&self) -> &[ModeSpec] {
        &self.modes
    }

    pub fn resets(&self) -> &BTreeMap<(usize, usize), ResetMap> {
        &self.resets
    }

    pub fn cost(&self) -> &CostSpec {
        &self.cost
    }

    pub fn mode(&self, index: ModeIndex) -> Result<&ModeSpec> {
        self.modes
            .get(index.0)
            .ok_or(Error::UnknownMode { mode: index.0, count: self.modes.len() })
    }

    /// Reset for the transition `from -> to`. A mode switching to itself keeps its state.
    pub fn reset(&self, from: ModeIndex, to: ModeIndex) -> Result<&ResetMap> {
        if from == to {
            return Ok(&IDENTITY_RESET);
        }
        self.resets
            .get(&(from.0, to.0))
            .ok_or(Error::MissingReset { from: from.0, to: to.0 })
    }

    pub fn switch_cost(&self, from: ModeIndex, to: ModeIndex) -> Option<&SwitchCost> {
        self.cost.switching.get(&(from.0, to.0))
    }

    /// Checks that a mode sequence fits a schedule and that every transition it uses is defined.
    pub fn check_sequence(&self, modes: &ModeSequence, schedule: &SwitchingSchedule) -> Result<()> {
        if modes.len() != schedule.len() + 1 {
            return Err(Error::LengthMismatch { modes: modes.len(), switches: schedule.len() });
        }
        if (schedule.horizon() - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(Error::BadParams(format!(
                "schedule horizon {} differs from system horizon {}",
                schedule.horizon(),
                self.horizon
            )));
        }
        for &m in modes.as_slice() {
            self.mode(m)?;
        }
        for pair in modes.as_slice().windows(2) {
            self.reset(pair[0], pair[1])?;
        }
        Ok(())
    }
}

/// Monotone switching times `0 <= tau_1 <= ... <= tau_N <= T`.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchingSchedule {
    interior: Vec<f64>,
    horizon: f64,
}

impl SwitchingSchedule {
    /// Number of interior switching times `N`.
    pub fn len(&self) -> usize {
        self.interior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interior.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    /// `tau_n` for `n` in `0..=N+1`, with `tau_0 = 0` and `tau_{N+1} = T`.
    pub fn time(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else if n <= self.interior.len() {
            self.interior[n - 1]
        } else {
            self.horizon
        }
    }

    /// All times `tau_0..=tau_{N+1}`.
    pub fn extended(&self) -> Vec<f64> {
        (0..=self.len() + 1).map(|n| self.time(n)).collect()
    }

    pub(crate) fn from_sorted_unchecked(interior: Vec<f64>, horizon: f64) -> Self {
        Self { interior, horizon }
    }
}

/// Validates raw switching times against `0 <= tau_1 <= ... <= tau_N <= T`.
pub fn validate_schedule(raw: &[f64], horizon: f64) -> Result<SwitchingSchedule> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidHorizon(horizon));
    }
    for (i, &t) in raw.iter().enumerate() {
        let index = i + 1;
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::OutOfHorizon { index, value: t, horizon });
        }
        if i > 0 && raw[i - 1] > t {
            return Err(Error::MonotonicityViolation { index, previous: raw[i - 1], value: t });
        }
    }
    Ok(SwitchingSchedule { interior: raw.to_vec(), horizon })
}

/// Modes `(j_0, ..., j_N)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeSequence(Vec<ModeIndex>);

impl ModeSequence {
    pub fn new(modes: Vec<ModeIndex>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::BadParams("mode sequence must contain at least j_0".into()));
        }
        Ok(Self(modes))
    }

    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().copied().map(ModeIndex).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, n: usize) -> ModeIndex {
        self.0[n]
    }

    pub fn as_slice(&self) -> &[ModeIndex] {
        &self.0
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().map(|m| m.0).collect()
    }
}

/// Coincidence bounds `(a(tau, k), b(tau, k))` for one switch index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coincidence {
    pub first: usize,
    pub last: usize,
}

/// For each `k = 1..=N`, the smallest and largest index in `0..=N+1` whose time is chained to
/// `tau_k` through neighbours no more than `eps` apart.
pub fn coincidence_groups(schedule: &SwitchingSchedule, eps: f64) -> Vec<Coincidence> {
    let times = schedule.extended();
    let last = times.len() - 1;
    // group start for every index
    let mut start = vec![0usize; times.len()];
    for m in 1..=last {
        start[m] = if times[m] - times[m - 1] <= eps { start[m - 1] } else { m };
    }
    let mut end = vec![last; times.len()];
    for m in (0..last).rev() {
        end[m] = if times[m + 1] - times[m] <= eps { end[m + 1] } else { m };
    }
    (1..=schedule.len()).map(|k| Coincidence { first: start[k], last: end[k] }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub defect: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Measures `max |g^{i,j}(z) - g^{k,j}(g^{i,k}(z))|` over the samples.
pub fn check_chain_property(
    system: &HybridSystemSpec,
    (i, k, j): (ModeIndex, ModeIndex, ModeIndex),
    samples: &[State],
    tolerance: f64,
) -> Result<ChainReport> {
    let direct = system.reset(i, j)?;
    let first = system.reset(i, k)?;
    let second = system.reset(k, j)?;
    let defect = samples
        .iter()
        .map(|z| (direct.apply(z) - second.apply(&first.apply(z))).norm())
        .fold(0.0, f64::max);
    Ok(ChainReport { defect, tolerance, pass: defect <= tolerance })
}

fn check_square(what: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: format!("{what} ({}x{})", m.nrows(), m.ncols()),
            expected: n,
            actual: if m.nrows() != n { m.nrows() } else { m.ncols() },
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::BadParams(format!("{what} has non-finite entries")));
    }
    Ok(())
}

fn check_len(what: &str, v: &State, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::DimensionMismatch { what: what.into(), expected: n, actual: v.len() });
    }
    Ok(())
}
