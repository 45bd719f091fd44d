//! Fixed-step integrators for `y' = L y + r(t, y)` on one interval.
//!
//! Both steppers accept `t1 < t0`, which is how backward (adjoint) sweeps reuse them.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::model::State;

/// Stepper requested by the caller.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepperKind {
    /// Classical four-stage Runge-Kutta.
    Rk4,
    /// Strang splitting: exact propagator of `L` for half steps around an explicit-midpoint
    /// step of `r`.
    ExpSplitting,
    /// Picks `ExpSplitting` when `|L|_1 h` exceeds the stiffness threshold.
    #[default]
    Auto,
}

/// Stepper actually used on a segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rk4,
    ExpSplitting,
}

impl Method {
    /// Convergence order of the global error.
    pub fn order(self) -> u32 {
        match self {
            Method::Rk4 => 4,
            Method::ExpSplitting => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepperOptions {
    /// Largest step; `None` means `T / 1000`.
    pub h_max: Option<f64>,
    pub kind: StepperKind,
    /// Blow-up is reported once a state norm exceeds `blowup_factor * (1 + |z0|)`.
    pub blowup_factor: f64,
    pub stiffness_threshold: f64,
}

impl Default for StepperOptions {
    fn default() -> Self {
        Self { h_max: None, kind: StepperKind::Auto, blowup_factor: 1e12, stiffness_threshold: 0.2 }
    }
}

impl StepperOptions {
    pub fn with_h_max(mut self, h: f64) -> Self {
        self.h_max = Some(h);
        self
    }

    pub fn with_kind(mut self, kind: StepperKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn step_bound(&self, horizon: f64) -> f64 {
        self.h_max.unwrap_or(horizon / 1000.0)
    }

    /// Number of equal steps covering `span`.
    pub fn steps_for(&self, span: f64, horizon: f64) -> usize {
        if span <= 0.0 {
            return 0;
        }
        let ratio = span / self.step_bound(horizon);
        // absorb rounding in spans that are exact multiples of h_max
        ((ratio * (1.0 - 1e-12)).ceil() as usize).max(1)
    }

    pub fn resolve(&self, generator: &DMatrix<f64>, h: f64) -> Method {
        match self.kind {
            StepperKind::Rk4 => Method::Rk4,
            StepperKind::ExpSplitting => Method::ExpSplitting,
            StepperKind::Auto => {
                if one_norm(generator) * h.abs() > self.stiffness_threshold {
                    Method::ExpSplitting
                } else {
                    Method::Rk4
                }
            }
        }
    }
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Knots, values and time derivatives of one integrated interval.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Samples {
    pub knots: Vec<f64>,
    pub values: Vec<State>,
    pub derivatives: Vec<State>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Failure {
    BlowUp { time: f64, norm: f64 },
    NonFinite { time: f64 },
}

/// Integrates `y' = linear y + remainder(t, y)` from `t0` to `t1` in `steps` equal steps.
pub(crate) fn integrate<R>(
    linear: &DMatrix<f64>,
    remainder: R,
    (t0, t1): (f64, f64),
    y0: State,
    steps: usize,
    method: Method,
    bound: f64,
) -> Result<Samples, Failure>
where
    R: Fn(f64, &State) -> State,
{
    let field = |t: f64, y: &State| {
        let mut d = remainder(t, y);
        d.gemv(1.0, linear, y, 1.0);
        d
    };
    let check = |t: f64, y: &State| -> Result<(), Failure> {
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Failure::NonFinite { time: t });
        }
        let norm = y.norm();
        if norm > bound {
            return Err(Failure::BlowUp { time: t, norm });
        }
        Ok(())
    };

    check(t0, &y0)?;
    let d0 = field(t0, &y0);
    let mut samples = Samples {
        knots: Vec::with_capacity(steps + 1),
        values: Vec::with_capacity(steps + 1),
        derivatives: Vec::with_capacity(steps + 1),
    };
    samples.knots.push(t0);
    samples.values.push(y0);
    samples.derivatives.push(d0);
    if steps == 0 {
        return Ok(samples);
    }

    let h = (t1 - t0) / steps as f64;
    let half_propagator = match method {
        Method::ExpSplitting => Some((linear * (0.5 * h)).exp()),
        Method::Rk4 => None,
    };
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let t_next = if i + 1 == steps { t1 } else { t0 + (i + 1) as f64 * h };
        let y = samples.values.last().expect("at least one knot");
        let next = match &half_propagator {
            None => {
                let k1 = samples.derivatives.last().expect("derivative per knot").clone();
                let k2 = field(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
                let k3 = field(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
                let k4 = field(t + h, &(y + &k3 * h));
                y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
            }
            Some(e_half) => {
                let ya = e_half * y;
                let ym = &ya + remainder(t, &ya) * (0.5 * h);
                let yb = &ya + remainder(t + 0.5 * h, &ym) * h;
                e_half * yb
            }
        };
        check(t_next, &next)?;
        let d = field(t_next, &next);
        samples.knots.push(t_next);
        samples.values.push(next);
        samples.derivatives.push(d);
    }
    Ok(samples)
}

/// Cubic Hermite interpolation on equally spaced knots (increasing or decreasing).
pub(crate) fn hermite(knots: &[f64], values: &[State], derivatives: &[State], t: f64) -> State {
    let n = knots.len();
    if n == 1 {
        return values[0].clone();
    }
    let t0 = knots[0];
    let h = knots[1] - knots[0];
    let steps = n - 1;
    let pos = (t - t0) / h;
    let mut i = pos.floor().max(0.0) as usize;
    if i >= steps {
        i = steps - 1;
    }
    let width = knots[i + 1] - knots[i];
    let s = ((t - knots[i]) / width).clamp(0.0, 1.0);
    if s == 0.0 {
        return values[i].clone();
    }
    if s == 1.0 {
        return values[i + 1].clone();
    }
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    &values[i] * h00 + &derivatives[i] * (h10 * width) + &values[i + 1] * h01 + &derivatives[i + 1] * (h11 * width)
}

/// Integral of equally spaced samples: composite Simpson, with a 3/8 panel when the number of
/// intervals is odd. A single interval uses Simpson with the supplied midpoint value.
pub(crate) fn simpson(values: &[f64], width: f64, midpoint_for_single: impl FnOnce() -> f64) -> f64 {
    let intervals = values.len().saturating_sub(1);
    let h = if intervals > 0 { width / intervals as f64 } else { 0.0 };
    match intervals {
        0 => 0.0,
        1 => width / 6.0 * (values[0] + 4.0 * midpoint_for_single() + values[1]),
        _ => {
            let (even_end, tail) = if intervals.is_multiple_of(2) { (intervals, false) } else { (intervals - 3, true) };
            let mut sum = 0.0;
            let mut i = 0;
            while i < even_end {
                sum += h / 3.0 * (values[i] + 4.0 * values[i + 1] + values[i + 2]);
                i += 2;
            }
            if tail {
                let j = even_end;
                sum += 3.0 * h / 8.0 * (values[j] + 3.0 * values[j + 1] + 3.0 * values[j + 2] + values[j + 3]);
            }
            sum
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn endpoint_error(method: Method, steps: usize) -> f64 {
        // y' = -y - 0.5 y on [0, 1]: linear part -1, remainder -0.5 y
        let s = integrate(
            &scalar(-1.0),
            |_, y: &State| y * -0.5,
            (0.0, 1.0),
            State::from_element(1, 1.0),
            steps,
            method,
            1e12,
        )
        .unwrap();
        (s.values.last().unwrap()[0] - (-1.5f64).exp()).abs()
    }

    #[test]
    fn convergence_orders() {
        for method in [Method::Rk4, Method::ExpSplitting] {
            let p = method.order() as i32;
            for steps in [10, 20, 40] {
                let ratio = endpoint_error(method, steps) / endpoint_error(method, 2 * steps);
                assert!(ratio >= 2f64.powi(p) / 1.5, "{method:?} ratio {ratio} at {steps}");
            }
        }
    }

    #[test]
    fn backward_integration_matches_exact_flow() {
        let s = integrate(
            &scalar(2.0),
            |t, _y: &State| State::from_element(1, t),
            (1.0, 0.0),
            State::from_element(1, 1.0),
            200,
            Method::Rk4,
            1e12,
        )
        .unwrap();
        // y' = 2y + t, y(1) = 1  =>  y(t) = C e^{2t} - t/2 - 1/4, C = 1.75 e^{-2}
        let exact = 1.75 * (-2.0f64).exp() - 0.25;
        assert!((s.values.last().unwrap()[0] - exact).abs() < 1e-10);
        assert_eq!(*s.knots.last().unwrap(), 0.0);
    }

    #[test]
    fn zero_steps_keep_the_initial_value() {
        let s = integrate(&scalar(-1.0), |_, y: &State| y * 0.0, (0.5, 0.5), State::from_element(1, 3.0), 0, Method::Rk4, 1e12)
            .unwrap();
        assert_eq!(s.values.len(), 1);
        assert_eq!(s.values[0][0], 3.0);
    }

    #[test]
    fn blow_up_and_non_finite_are_reported() {
        let r = integrate(&scalar(50.0), |_, y: &State| y * 0.0, (0.0, 1.0), State::from_element(1, 1.0), 100, Method::Rk4, 1e6);
        assert!(matches!(r, Err(Failure::BlowUp { .. })));
        let r = integrate(
            &scalar(0.0),
            |_, _y: &State| State::from_element(1, f64::NAN),
            (0.0, 1.0),
            State::from_element(1, 1.0),
            4,
            Method::Rk4,
            1e6,
        );
        assert!(matches!(r, Err(Failure::NonFinite { .. })));
    }

    #[test]
    fn hermite_reproduces_cubics() {
        let f = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t * t;
        let df = |t: f64| -2.0 + 1.5 * t * t;
        let knots: Vec<f64> = (0..=4).map(|i| 0.25 * i as f64).collect();
        let values: Vec<State> = knots.iter().map(|&t| State::from_element(1, f(t))).collect();
        let ders: Vec<State> = knots.iter().map(|&t| State::from_element(1, df(t))).collect();
        for t in [0.0, 0.1, 0.33, 0.5, 0.77, 1.0] {
            assert!((hermite(&knots, &values, &ders, t)[0] - f(t)).abs() < 1e-13);
        }
    }

    #[test]
    fn simpson_is_exact_for_cubics_for_any_parity() {
        let f = |t: f64| 3.0 * t * t * t - t + 2.0;
        let exact = 0.75 - 0.5 + 2.0;
        for intervals in 1..8 {
            let vals: Vec<f64> = (0..=intervals).map(|i| f(i as f64 / intervals as f64)).collect();
            let got = simpson(&vals, 1.0, || f(0.5));
            assert!((got - exact).abs() < 1e-13, "{intervals}: {got}");
        }
    }

    #[test]
    fn step_count_is_robust_to_rounding() {
        let opts = StepperOptions::default();
        assert_eq!(opts.steps_for(0.5, 1.0), 500);
        assert_eq!(opts.steps_for(0.50001, 1.0), 501);
        assert_eq!(opts.steps_for(0.0, 1.0), 0);
        assert_eq!(opts.steps_for(1e-9, 1.0), 1);
    }
}
