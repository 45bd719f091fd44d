//! TOML run configuration: a built-in scenario or an inline system, plus run settings.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gradients::GradientTolerances;
use crate::integrate::StepperOptions;
use crate::model::{
    validate_schedule, CostSpec, HybridSystemSpec, ModeSequence, ModeSpec, Nonlinearity, QuadraticForm, ResetMap,
    RunningCost, State, SwitchCost, SwitchingSchedule, Term, Weight,
};
use crate::optimize::OptimizerOptions;
use crate::scenarios::{build_scenario, ScenarioParams};
use crate::sensitivity::FdOptions;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemDef>,
    #[serde(default, rename = "mode", skip_serializing_if = "Vec::is_empty")]
    pub modes: Vec<ModeDef>,
    #[serde(default, rename = "reset", skip_serializing_if = "Vec::is_empty")]
    pub resets: Vec<ResetDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostDef>,
    #[serde(default)]
    pub run: RunDef,
    #[serde(default)]
    pub stepper: StepperOptions,
    #[serde(default)]
    pub fd: FdOptions,
    #[serde(default)]
    pub check: GradientTolerances,
    #[serde(default)]
    pub scan: ScanDef,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDef {
    pub horizon: f64,
    pub initial_state: Vec<f64>,
    /// Register identity resets for every pair without an explicit `[[reset]]`.
    #[serde(default)]
    pub identity_resets: bool,
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixDef {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixDef {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }

    fn to_matrix(&self, key: &str) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Config(format!(
                "{key}: {}x{} matrix needs {} entries, got {}",
                self.rows,
                self.cols,
                self.rows * self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeDef {
    pub generator: MatrixDef,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terms: Vec<TermDef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TermDef {
    Linear { matrix: MatrixDef },
    Polynomial { coeffs: [f64; 4] },
    Logistic { rate: f64, capacity: f64 },
    Forcing { amplitude: Vec<f64>, omega: f64, phase: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetKind {
    Identity,
    Affine,
    Saturate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResetDef {
    pub from: usize,
    pub to: usize,
    pub kind: ResetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<MatrixDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

/// A scalar, a diagonal or a full matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightDef {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(MatrixDef),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadDef {
    pub weight: WeightDef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunningDef {
    pub weight: WeightDef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    #[serde(default)]
    pub discount: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchDef {
    pub from: usize,
    pub to: usize,
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub time_slope: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<Vec<f64>>,
    #[serde(default)]
    pub quadratic: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostDef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running: Option<RunningDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub switching: Vec<SwitchDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<QuadDef>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunDef {
    /// Overrides the scenario's recommended sequence; required for inline systems.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<f64>>,
    pub seed: u64,
    pub execution: Execution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanDef {
    /// Number of uniform grid points on `[0, T]`, used when `times` is absent.
    pub grid: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    /// Defaults to every mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<usize>>,
}

impl Default for ScanDef {
    fn default() -> Self {
        Self { grid: 9, times: None, candidates: None }
    }
}

/// System, sequence and schedule ready to run.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub system: HybridSystemSpec,
    pub modes: ModeSequence,
    pub schedule: SwitchingSchedule,
}

fn vector(v: &[f64]) -> State {
    State::from_column_slice(v)
}

fn weight_from(key: &str, w: &WeightDef) -> Result<Weight> {
    Ok(match w {
        WeightDef::Scalar(s) => Weight::Scalar(*s),
        WeightDef::Diagonal(d) => Weight::Diagonal(vector(d)),
        WeightDef::Full(m) => Weight::Full(m.to_matrix(key)?),
    })
}

fn weight_to(w: &Weight) -> WeightDef {
    match w {
        Weight::Scalar(s) => WeightDef::Scalar(*s),
        Weight::Diagonal(d) => WeightDef::Diagonal(d.iter().copied().collect()),
        Weight::Full(m) => WeightDef::Full(MatrixDef::from_matrix(m)),
    }
}

fn prefix(key: String) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(format!("{key}: {other}")),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_text(path).map(|(cfg, _)| cfg)
    }

    /// Parsed configuration together with its source text.
    pub fn load_with_text(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Inline configuration describing `system` with the given sequence and schedule.
    pub fn from_system(system: &HybridSystemSpec, modes: &ModeSequence, schedule: &SwitchingSchedule) -> Self {
        let modes_def = system
            .modes()
            .iter()
            .map(|m| ModeDef {
                generator: MatrixDef::from_matrix(&m.generator),
                terms: m
                    .nonlinearity
                    .terms
                    .iter()
                    .map(|t| match t {
                        Term::Linear { matrix } => TermDef::Linear { matrix: MatrixDef::from_matrix(matrix) },
                        Term::Polynomial { coeffs } => TermDef::Polynomial { coeffs: *coeffs },
                        Term::Logistic { rate, capacity } => TermDef::Logistic { rate: *rate, capacity: *capacity },
                        Term::Forcing { amplitude, omega, phase } => TermDef::Forcing {
                            amplitude: amplitude.iter().copied().collect(),
                            omega: *omega,
                            phase: *phase,
                        },
                    })
                    .collect(),
            })
            .collect();
        let resets = system
            .resets()
            .iter()
            .map(|(&(from, to), r)| {
                let mut def = ResetDef { from, to, kind: ResetKind::Identity, matrix: None, offset: None, scale: None };
                match r {
                    ResetMap::Identity => {}
                    ResetMap::Affine { matrix, offset } => {
                        def.kind = ResetKind::Affine;
                        def.matrix = Some(MatrixDef::from_matrix(matrix));
                        def.offset = Some(offset.iter().copied().collect());
                    }
                    ResetMap::Saturate { scale } => {
                        def.kind = ResetKind::Saturate;
                        def.scale = Some(*scale);
                    }
                }
                def
            })
            .collect();
        let cost = system.cost();
        let running = match &cost.running {
            RunningCost::Zero => None,
            RunningCost::Quadratic { form, discount } => Some(RunningDef {
                weight: weight_to(&form.weight),
                target: form.target.as_ref().map(|t| t.iter().copied().collect()),
                discount: *discount,
            }),
        };
        let switching = cost
            .switching
            .iter()
            .map(|(&(from, to), s)| SwitchDef {
                from,
                to,
                constant: s.constant,
                time_slope: s.time_slope,
                linear: s.linear.as_ref().map(|q| q.iter().copied().collect()),
                quadratic: s.quadratic,
            })
            .collect();
        let terminal = cost.terminal.as_ref().map(|f| QuadDef {
            weight: weight_to(&f.weight),
            target: f.target.as_ref().map(|t| t.iter().copied().collect()),
        });
        RunConfig {
            system: Some(SystemDef {
                horizon: system.horizon(),
                initial_state: system.initial_state().iter().copied().collect(),
                identity_resets: false,
            }),
            modes: modes_def,
            resets,
            cost: Some(CostDef { running, switching, terminal }),
            run: RunDef {
                modes: Some(modes.indices()),
                schedule: Some(schedule.interior().to_vec()),
                ..RunDef::default()
            },
            ..RunConfig::default()
        }
    }

    fn inline_system(&self, sys: &SystemDef) -> Result<HybridSystemSpec> {
        let modes = self
            .modes
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let generator = m.generator.to_matrix(&format!("mode[{i}].generator"))?;
                let terms = m
                    .terms
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let key = format!("mode[{i}].terms[{k}]");
                        Ok(match t {
                            TermDef::Linear { matrix } => Term::Linear { matrix: matrix.to_matrix(&key)? },
                            TermDef::Polynomial { coeffs } => Term::Polynomial { coeffs: *coeffs },
                            TermDef::Logistic { rate, capacity } => Term::Logistic { rate: *rate, capacity: *capacity },
                            TermDef::Forcing { amplitude, omega, phase } => Term::Forcing {
                                amplitude: vector(amplitude),
                                omega: *omega,
                                phase: *phase,
                            },
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ModeSpec::new(generator, Nonlinearity::new(terms)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut resets = BTreeMap::new();
        for (i, r) in self.resets.iter().enumerate() {
            let key = format!("reset[{i}]");
            let map = match r.kind {
                ResetKind::Identity => ResetMap::Identity,
                ResetKind::Affine => {
                    let matrix = r
                        .matrix
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("{key}.matrix is required for an affine reset")))?
                        .to_matrix(&format!("{key}.matrix"))?;
                    let offset = match &r.offset {
                        Some(o) => vector(o),
                        None => State::zeros(matrix.nrows()),
                    };
                    ResetMap::Affine { matrix, offset }
                }
                ResetKind::Saturate => ResetMap::Saturate {
                    scale: r.scale.ok_or_else(|| Error::Config(format!("{key}.scale is required for a saturating reset")))?,
                },
            };
            if resets.insert((r.from, r.to), map).is_some() {
                return Err(Error::Config(format!("{key}: duplicate reset {} -> {}", r.from, r.to)));
            }
        }
        let mut cost = CostSpec::default();
        if let Some(c) = &self.cost {
            if let Some(r) = &c.running {
                let form = QuadraticForm {
                    weight: weight_from("cost.running.weight", &r.weight)?,
                    target: r.target.as_ref().map(|t| vector(t)),
                };
                cost.running = RunningCost::Quadratic { form, discount: r.discount };
            }
            for (i, s) in c.switching.iter().enumerate() {
                let sc = SwitchCost {
                    constant: s.constant,
                    time_slope: s.time_slope,
                    linear: s.linear.as_ref().map(|q| vector(q)),
                    quadratic: s.quadratic,
                };
                if cost.switching.insert((s.from, s.to), sc).is_some() {
                    return Err(Error::Config(format!("cost.switching[{i}]: duplicate entry {} -> {}", s.from, s.to)));
                }
            }
            if let Some(f) = &c.terminal {
                cost.terminal = Some(QuadraticForm {
                    weight: weight_from("cost.terminal.weight", &f.weight)?,
                    target: f.target.as_ref().map(|t| vector(t)),
                });
            }
        }
        let system = HybridSystemSpec::new(modes, resets, cost, sys.horizon, vector(&sys.initial_state))
            .map_err(prefix("system".into()))?;
        Ok(if sys.identity_resets { system.with_identity_resets() } else { system })
    }

    /// Builds the system and validates the run sequence against it.
    pub fn problem(&self) -> Result<Problem> {
        let inline = self.system.is_some() || !self.modes.is_empty() || !self.resets.is_empty() || self.cost.is_some();
        let (system, modes, schedule) = match (&self.scenario, &self.system) {
            (Some(_), _) if inline => {
                return Err(Error::Config("`scenario` cannot be combined with an inline system".into()))
            }
            (Some(params), None) => {
                let sc = build_scenario(params).map_err(prefix("scenario".into()))?;
                let modes = match &self.run.modes {
                    Some(m) => ModeSequence::from_indices(m).map_err(prefix("run.modes".into()))?,
                    None => sc.modes,
                };
                let schedule = match &self.run.schedule {
                    Some(s) => validate_schedule(s, sc.system.horizon()).map_err(prefix("run.schedule".into()))?,
                    None => sc.schedule,
                };
                (sc.system, modes, schedule)
            }
            (None, Some(sys)) => {
                let system = self.inline_system(sys)?;
                let m = self.run.modes.as_ref().ok_or_else(|| Error::Config("run.modes is required".into()))?;
                let modes = ModeSequence::from_indices(m).map_err(prefix("run.modes".into()))?;
                let s = self.run.schedule.as_deref().unwrap_or(&[]);
                let schedule = validate_schedule(s, system.horizon()).map_err(prefix("run.schedule".into()))?;
                (system, modes, schedule)
            }
            (None, None) => return Err(Error::Config("either `scenario` or `system` must be given".into())),
            (Some(_), Some(_)) => unreachable!(),
        };
        system.check_sequence(&modes, &schedule).map_err(prefix("run".into()))?;
        self.optimizer.validate().map_err(prefix("optimizer".into()))?;
        Ok(Problem { system, modes, schedule })
    }
}

/// Appends the line of `key` in `text` to a message of the form `key: detail`, when it can be found.
pub fn annotate_line(text: &str, message: &str) -> String {
    let key = match message.split_once(": ") {
        Some((k, _)) if !k.contains(' ') => k,
        _ => return message.to_string(),
    };
    match key_line(text, key) {
        Some(line) => format!("{message} (line {line})"),
        None => message.to_string(),
    }
}

fn split_index(seg: &str) -> (&str, usize) {
    match seg.split_once('[') {
        Some((name, rest)) => (name, rest.trim_end_matches(']').parse().unwrap_or(0)),
        None => (seg, 0),
    }
}

fn header(line: &str) -> Option<&str> {
    let l = line.trim();
    let l = l.split('#').next()?.trim();
    let inner = l.strip_prefix("[[").and_then(|s| s.strip_suffix("]]")).or_else(|| l.strip_prefix('[')?.strip_suffix(']'))?;
    Some(inner.trim())
}

/// 1-based line of a dotted key such as `mode[1].generator` or `cost.switching[0]`.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let segs: Vec<(&str, usize)> = key.split('.').map(split_index).collect();
    let lines: Vec<&str> = text.lines().collect();
    for depth in (1..=segs.len()).rev() {
        let name = segs[..depth].iter().map(|s| s.0).collect::<Vec<_>>().join(".");
        let index = segs[depth - 1].1;
        let Some(start) = lines.iter().enumerate().filter(|(_, l)| header(l) == Some(name.as_str())).nth(index).map(|(i, _)| i) else {
            continue;
        };
        // a remaining field defined inline under the table
        if let Some((field, _)) = segs.get(depth) {
            for (i, l) in lines.iter().enumerate().skip(start + 1) {
                if header(l).is_some() {
                    break;
                }
                if l.trim_start().strip_prefix(field).is_some_and(|r| r.trim_start().starts_with('=')) {
                    return Some(i + 1);
                }
            }
        }
        return Some(start + 1);
    }
    None
}
