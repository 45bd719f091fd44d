//! Ready-made problem families: a scalar anchor with closed forms, a planar nonlinear ODE, a
//! delay equation through a linear chain, and a transport-to-diffusion switch on a periodic grid.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    validate_schedule, CostSpec, HybridSystemSpec, ModeSequence, ModeSpec, Nonlinearity, QuadraticForm, ResetMap,
    RunningCost, State, SwitchingSchedule, Term, Weight,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ScenarioParams {
    ScalarLinear(ScalarLinearParams),
    OdePlanar(OdePlanarParams),
    DdeChain(DdeChainParams),
    TransportDiffusion(TransportDiffusionParams),
}

impl ScenarioParams {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioParams::ScalarLinear(_) => "scalar-linear",
            ScenarioParams::OdePlanar(_) => "ode-planar",
            ScenarioParams::DdeChain(_) => "dde-chain",
            ScenarioParams::TransportDiffusion(_) => "transport-diffusion",
        }
    }

    /// Default parameters for a scenario name.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "scalar-linear" => ScenarioParams::ScalarLinear(ScalarLinearParams::default()),
            "ode-planar" => ScenarioParams::OdePlanar(OdePlanarParams::default()),
            "dde-chain" => ScenarioParams::DdeChain(DdeChainParams::default()),
            "transport-diffusion" => ScenarioParams::TransportDiffusion(TransportDiffusionParams::default()),
            other => return Err(Error::UnknownScenario(other.into())),
        })
    }

    pub const NAMES: [&'static str; 4] = ["scalar-linear", "ode-planar", "dde-chain", "transport-diffusion"];
}

/// System plus the recommended sequence and schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub system: HybridSystemSpec,
    pub modes: ModeSequence,
    pub schedule: SwitchingSchedule,
}

pub fn build_scenario(params: &ScenarioParams) -> Result<Scenario> {
    match params {
        ScenarioParams::ScalarLinear(p) => scalar_linear(p),
        ScenarioParams::OdePlanar(p) => ode_planar(p),
        ScenarioParams::DdeChain(p) => dde_chain(p),
        ScenarioParams::TransportDiffusion(p) => transport_diffusion(p),
    }
}

fn all_pairs(count: usize, reset: impl Fn(usize, usize) -> ResetMap) -> BTreeMap<(usize, usize), ResetMap> {
    (0..count).flat_map(|i| (0..count).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| ((i, j), reset(i, j))).collect()
}

fn finish(system: HybridSystemSpec, modes: &[usize], schedule: &[f64]) -> Result<Scenario> {
    let modes = ModeSequence::from_indices(modes)?;
    let schedule = validate_schedule(schedule, system.horizon())?;
    system.check_sequence(&modes, &schedule)?;
    Ok(Scenario { system, modes, schedule })
}

/// `z' = a_j z`, scalar resets, `l = w/2 z^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalarLinearParams {
    pub rates: Vec<f64>,
    /// Gain of every reset between distinct modes; `1` gives identity resets.
    pub reset_gain: f64,
    pub initial: f64,
    pub horizon: f64,
    pub running_weight: f64,
    pub terminal_weight: f64,
    pub modes: Vec<usize>,
    pub schedule: Vec<f64>,
}

impl Default for ScalarLinearParams {
    fn default() -> Self {
        Self {
            rates: vec![1.0, -2.0],
            reset_gain: 1.0,
            initial: 1.0,
            horizon: 1.0,
            running_weight: 1.0,
            terminal_weight: 0.0,
            modes: vec![0, 1],
            schedule: vec![0.5],
        }
    }
}

impl ScalarLinearParams {
    /// Unstable ambient mode with a strongly stable insertion candidate and five segments.
    pub fn unstable_insertion() -> Self {
        Self {
            rates: vec![1.0, -5.0],
            modes: vec![0, 0, 0, 0, 0],
            schedule: vec![0.2, 0.4, 0.6, 0.8],
            ..Self::default()
        }
    }
}

fn scalar_linear(p: &ScalarLinearParams) -> Result<Scenario> {
    if p.rates.is_empty() {
        return Err(Error::BadParams("scalar-linear needs at least one rate".into()));
    }
    let modes = p.rates.iter().map(|&a| ModeSpec::new(DMatrix::from_element(1, 1, a), Nonlinearity::zero())).collect();
    let resets = all_pairs(p.rates.len(), |_, _| {
        if p.reset_gain == 1.0 {
            ResetMap::Identity
        } else {
            ResetMap::Affine { matrix: DMatrix::from_element(1, 1, p.reset_gain), offset: State::zeros(1) }
        }
    });
    let cost = CostSpec {
        running: if p.running_weight == 0.0 {
            RunningCost::Zero
        } else {
            RunningCost::quadratic(QuadraticForm::new(Weight::Scalar(p.running_weight)))
        },
        terminal: (p.terminal_weight != 0.0).then(|| QuadraticForm::new(Weight::Scalar(p.terminal_weight))),
        ..CostSpec::default()
    };
    let system = HybridSystemSpec::new(modes, resets, cost, p.horizon, State::from_element(1, p.initial))?;
    finish(system, &p.modes, &p.schedule)
}

/// Rotation-dominant mode 0 and contraction-dominant mode 1 with a cubic damping term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdePlanarParams {
    pub cubic: f64,
    /// Put the generators into the nonlinearity and use zero generators instead.
    pub linear_in_nonlinearity: bool,
    pub initial: [f64; 2],
    pub horizon: f64,
    pub modes: Vec<usize>,
    pub schedule: Vec<f64>,
}

impl Default for OdePlanarParams {
    fn default() -> Self {
        Self {
            cubic: -0.2,
            linear_in_nonlinearity: false,
            initial: [1.0, 0.5],
            horizon: 1.0,
            modes: vec![0, 1, 0],
            schedule: vec![0.3, 0.65],
        }
    }
}

fn ode_planar(p: &OdePlanarParams) -> Result<Scenario> {
    let generators = [
        DMatrix::from_row_slice(2, 2, &[-0.1, 2.0, -2.0, -0.1]),
        DMatrix::from_row_slice(2, 2, &[-1.5, 0.3, 0.0, -0.8]),
    ];
    let modes = generators
        .into_iter()
        .map(|a| {
            let cubic = Term::Polynomial { coeffs: [0.0, 0.0, 0.0, p.cubic] };
            if p.linear_in_nonlinearity {
                ModeSpec::new(DMatrix::zeros(2, 2), Nonlinearity::new(vec![Term::Linear { matrix: a }, cubic]))
            } else {
                ModeSpec::new(a, Nonlinearity::new(vec![cubic]))
            }
        })
        .collect();
    let mut resets = BTreeMap::new();
    resets.insert(
        (0, 1),
        ResetMap::Affine {
            matrix: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.9]),
            offset: State::from_vec(vec![0.05, 0.0]),
        },
    );
    resets.insert((1, 0), ResetMap::Saturate { scale: 2.0 });
    let cost = CostSpec {
        running: RunningCost::quadratic(QuadraticForm::new(Weight::Scalar(1.0))),
        terminal: Some(QuadraticForm::new(Weight::Scalar(1.0))),
        ..CostSpec::default()
    };
    let system = HybridSystemSpec::new(modes, resets, cost, p.horizon, State::from_column_slice(&p.initial))?;
    finish(system, &p.modes, &p.schedule)
}

/// `z' = a z + b z(t - r)` with the delayed value replaced by the last of `c` compartments
/// `y_1' = (c/r)(z - y_1)`, `y_i' = (c/r)(y_{i-1} - y_i)`. State is `(z, y_1, .., y_c)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdeChainParams {
    pub chain_length: usize,
    pub delay: f64,
    /// `(a, b)` per mode.
    pub mode_rates: Vec<[f64; 2]>,
    /// Constant history value on `[-r, 0]`.
    pub history: f64,
    pub horizon: f64,
    pub modes: Vec<usize>,
    pub schedule: Vec<f64>,
}

impl Default for DdeChainParams {
    fn default() -> Self {
        Self {
            chain_length: 16,
            delay: 0.5,
            mode_rates: vec![[0.0, -1.0], [-2.0, 0.5]],
            history: 1.0,
            horizon: 2.0,
            modes: vec![0, 1],
            schedule: vec![0.8],
        }
    }
}

fn dde_chain(p: &DdeChainParams) -> Result<Scenario> {
    if p.chain_length < 4 {
        return Err(Error::BadParams(format!("chain length {} below 4", p.chain_length)));
    }
    if !(p.delay > 0.0 && p.delay.is_finite()) {
        return Err(Error::BadParams("delay must be positive".into()));
    }
    if p.mode_rates.is_empty() {
        return Err(Error::BadParams("dde-chain needs at least one mode".into()));
    }
    let c = p.chain_length;
    let dim = c + 1;
    let kappa = c as f64 / p.delay;
    let modes = p
        .mode_rates
        .iter()
        .map(|&[a, b]| {
            let mut m = DMatrix::zeros(dim, dim);
            m[(0, 0)] = a;
            m[(0, c)] = b;
            for i in 1..dim {
                m[(i, i)] = -kappa;
                m[(i, i - 1)] = kappa;
            }
            ModeSpec::new(m, Nonlinearity::zero())
        })
        .collect();
    let mut first = State::zeros(dim);
    first[0] = 1.0;
    let cost = CostSpec {
        running: RunningCost::quadratic(QuadraticForm::new(Weight::Diagonal(first))),
        ..CostSpec::default()
    };
    let resets = all_pairs(p.mode_rates.len(), |_, _| ResetMap::Identity);
    let system = HybridSystemSpec::new(modes, resets, cost, p.horizon, State::from_element(dim, p.history))?;
    finish(system, &p.modes, &p.schedule)
}

/// Exact solution of `z' = b z(t - r)` with constant history `h`, by integrating one delay
/// interval at a time.
pub fn delay_reference(b: f64, r: f64, history: f64, t: f64) -> f64 {
    // polynomial pieces in absolute time, piece k on [k r, (k+1) r]
    let mut piece: Vec<f64> = vec![history];
    let mut start = 0.0;
    let mut prev: Vec<f64> = vec![history];
    loop {
        // z(t) = z(start) + b * int_start^t prev(s - r) ds
        let shifted = compose_shift(&prev, -r);
        let mut anti = vec![0.0; shifted.len() + 1];
        for (i, c) in shifted.iter().enumerate() {
            anti[i + 1] = c / (i + 1) as f64;
        }
        let z_start = eval_poly(&piece, start);
        let offset = z_start - b * eval_poly(&anti, start);
        let mut next: Vec<f64> = anti.iter().map(|c| b * c).collect();
        next[0] += offset;
        if t <= start + r {
            return eval_poly(&next, t);
        }
        prev = next.clone();
        piece = next;
        start += r;
    }
}

fn eval_poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

/// Coefficients of `p(x + s)`.
fn compose_shift(p: &[f64], s: f64) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    // Horner: out = out * (x + s) + a
    for &a in p.iter().rev() {
        let mut next = vec![0.0; p.len()];
        for (i, &o) in out.iter().enumerate() {
            if o != 0.0 {
                next[i] += o * s;
                if i + 1 < next.len() {
                    next[i + 1] += o;
                }
            }
        }
        next[0] += a;
        out = next;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Gaussian,
    /// `cos^2` bump of half-width `3 sigma`, exactly zero outside.
    Bump,
}

/// Periodic grid of `grid` points on `[0, length)`: mode 0 transports with a central first
/// difference plus `growth z`, mode 1 diffuses with a central second difference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportDiffusionParams {
    pub grid: usize,
    pub length: f64,
    pub horizon: f64,
    pub diffusivity: f64,
    pub growth: f64,
    pub profile: Profile,
    pub sigma: f64,
    /// Defaults to the middle of the domain.
    pub center: Option<f64>,
    pub modes: Vec<usize>,
    pub schedule: Vec<f64>,
}

impl Default for TransportDiffusionParams {
    fn default() -> Self {
        Self {
            grid: 256,
            length: 20.0,
            horizon: 1.0,
            diffusivity: 1.0,
            growth: 1.0,
            profile: Profile::Gaussian,
            sigma: 1.0,
            center: None,
            modes: vec![0, 1],
            schedule: vec![0.5],
        }
    }
}

impl TransportDiffusionParams {
    pub fn spacing(&self) -> f64 {
        self.length / self.grid as f64
    }
}

/// Skew-symmetric periodic central difference `(z_{i+1} - z_{i-1}) / 2h`.
pub fn central_difference(n: usize, h: f64) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        d[(i, (i + 1) % n)] += 0.5 / h;
        d[(i, (i + n - 1) % n)] -= 0.5 / h;
    }
    d
}

/// Periodic `(z_{i+1} - 2 z_i + z_{i-1}) / h^2`.
pub fn second_difference(n: usize, h: f64) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        d[(i, i)] -= 2.0 / (h * h);
        d[(i, (i + 1) % n)] += 1.0 / (h * h);
        d[(i, (i + n - 1) % n)] += 1.0 / (h * h);
    }
    d
}

fn transport_diffusion(p: &TransportDiffusionParams) -> Result<Scenario> {
    if p.grid < 16 {
        return Err(Error::BadParams(format!("grid size {} below 16", p.grid)));
    }
    if !(p.length > 0.0 && p.sigma > 0.0 && p.diffusivity >= 0.0) {
        return Err(Error::BadParams("length and sigma must be positive, diffusivity non-negative".into()));
    }
    let (n, h) = (p.grid, p.spacing());
    let center = p.center.unwrap_or(0.5 * p.length);
    let initial = State::from_fn(n, |i, _| {
        let x = i as f64 * h - center;
        match p.profile {
            Profile::Gaussian => (-0.5 * (x / p.sigma).powi(2)).exp(),
            Profile::Bump => {
                let w = 3.0 * p.sigma;
                if x.abs() < w {
                    (std::f64::consts::FRAC_PI_2 * x / w).cos().powi(2)
                } else {
                    0.0
                }
            }
        }
    });
    let transport = ModeSpec::new(
        -central_difference(n, h),
        if p.growth == 0.0 {
            Nonlinearity::zero()
        } else {
            Nonlinearity::new(vec![Term::Polynomial { coeffs: [0.0, p.growth, 0.0, 0.0] }])
        },
    );
    let diffusion = ModeSpec::new(second_difference(n, h) * p.diffusivity, Nonlinearity::zero());
    let cost = CostSpec { terminal: Some(QuadraticForm::new(Weight::Scalar(h))), ..CostSpec::default() };
    let system = HybridSystemSpec::new(vec![transport, diffusion], all_pairs(2, |_, _| ResetMap::Identity), cost, p.horizon, initial)?;
    finish(system, &p.modes, &p.schedule)
}

/// `h sum z_i^2 + h sum (D z)_i^2` with `D` the central difference: the grid version of
/// `int z^2 + z'^2 dx`.
pub fn h1_squared(z: &State, h: f64) -> f64 {
    let d = central_difference(z.len(), h) * z;
    h * (z.norm_squared() + d.norm_squared())
}
