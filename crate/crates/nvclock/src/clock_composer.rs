//! Composite-clock algebra: detuning extraction from quadrature readouts,
//! temperature-insensitive combinations at first and second order,
//! temperature estimation, thermometer compensation, and the instability
//! budget.
//!
//! All combination formulas work in fractional units (dimensionless
//! detunings delta_f / f).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spin_model::SpinConstants;

/// A pair of measured detunings with a common timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetuningPair {
    pub delta_d: f64,
    pub delta_q: f64,
    pub timestamp: f64,
}

/// Which transition a quadrature readout interrogated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    D,
    Q,
}

/// In-phase and quadrature fringe readouts at a fixed free-evolution time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureReadout {
    pub sx: f64,
    pub sy: f64,
    pub tau: f64,
    pub target: Target,
}

/// Front/back window voltages of one optical readout, with the
/// balanced-detection offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowedReadout {
    pub v_a: f64,
    pub v_b: f64,
    pub t_a: f64,
    pub t_b: f64,
    pub offset: f64,
}

/// Normalized readout S = (V_A - V_B) / (V_B + offset).
///
/// The balanced-detection offset cancels in the numerator (both windows see
/// the same green subtraction) but not in the denominator.
pub fn normalized_readout(w: &WindowedReadout) -> Result<f64> {
    if w.t_a <= 0.0 || w.t_b <= 0.0 {
        return Err(Error::InvalidConfig("readout windows must have positive duration".into()));
    }
    let denom = w.v_b + w.offset;
    if denom == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok((w.v_a - w.v_b) / denom)
}

/// Detuning (Hz) from a quadrature pair: delta_f = atan2(Sy, Sx) / (2 pi tau),
/// principal branch.
pub fn detuning_from_quadratures(q: &QuadratureReadout) -> Result<f64> {
    if q.sx == 0.0 && q.sy == 0.0 {
        return Err(Error::ZeroQuadratures);
    }
    if q.tau <= 0.0 {
        return Err(Error::InvalidConfig("tau must be positive".into()));
    }
    Ok(q.sy.atan2(q.sx) / (2.0 * PI * q.tau))
}

/// Continuity-based unwrapping of a detuning time series that may cross the
/// principal branch. Stateful; one tracker per series.
#[derive(Debug, Clone, Default)]
pub struct DetuningTracker {
    last_phase: Option<f64>,
    turns: f64,
}

impl DetuningTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Unwrapped detuning; steps larger than pi/2 between consecutive
    /// samples are flagged as a branch-cut hazard.
    pub fn extract(&mut self, q: &QuadratureReadout) -> Result<f64> {
        if q.sx == 0.0 && q.sy == 0.0 {
            return Err(Error::ZeroQuadratures);
        }
        let phase = q.sy.atan2(q.sx);
        if let Some(prev) = self.last_phase {
            let mut step = phase - prev;
            while step > PI {
                step -= 2.0 * PI;
            }
            while step < -PI {
                step += 2.0 * PI;
            }
            if step.abs() > 0.5 * PI {
                return Err(Error::BranchCut);
            }
            if phase - prev > PI {
                self.turns -= 1.0;
            } else if phase - prev < -PI {
                self.turns += 1.0;
            }
        }
        self.last_phase = Some(phase);
        Ok((phase + 2.0 * PI * self.turns) / (2.0 * PI * q.tau))
    }
}

/// Composite weight alpha = lambda_D / (lambda_D - lambda_Q).
pub fn alpha_from_lambdas(c: &SpinConstants) -> Result<f64> {
    if c.lambda_d == c.lambda_q {
        return Err(Error::DegenerateLambdas);
    }
    Ok(c.lambda_d / (c.lambda_d - c.lambda_q))
}

/// First-order temperature-insensitive combination
/// delta_psi/psi = (delta_Q/Q) alpha + (delta_D/D) (1 - alpha).
pub fn composite_correction(frac_dq: f64, frac_dd: f64, c: &SpinConstants) -> Result<f64> {
    let alpha = alpha_from_lambdas(c)?;
    Ok(frac_dq * alpha + frac_dd * (1.0 - alpha))
}

/// Temperature-unit normalization 1 / (lambda_Q^-1 - lambda_D^-1), in 1/K.
pub fn temperature_normalization(c: &SpinConstants) -> Result<f64> {
    if c.lambda_d == 0.0 || c.lambda_q == 0.0 || c.lambda_d == c.lambda_q {
        return Err(Error::DegenerateLambdas);
    }
    Ok(1.0 / (1.0 / c.lambda_q - 1.0 / c.lambda_d))
}

/// Combination with the quadratic correction term appended, canceling both
/// first- and second-order temperature effects:
/// first-order result + 1/2 (lambda_D2 lambda_Q - lambda_D lambda_Q2)
/// / (lambda_D - lambda_Q)^3 * (delta_D/D - delta_Q/Q)^2.
pub fn composite_correction_2nd(frac_dq: f64, frac_dd: f64, c: &SpinConstants) -> Result<f64> {
    let first = composite_correction(frac_dq, frac_dd, c)?;
    let dl = c.lambda_d - c.lambda_q;
    let coeff = 0.5 * (c.lambda_d2 * c.lambda_q - c.lambda_d * c.lambda_q2) / (dl * dl * dl);
    let diff = frac_dd - frac_dq;
    Ok(first + coeff * diff * diff)
}

/// Temperature shift estimate, insensitive to common (local-oscillator)
/// fractional shifts: delta_T = (delta_D/D - delta_Q/Q) / (lambda_D - lambda_Q).
pub fn temperature_estimate(frac_dd: f64, frac_dq: f64, c: &SpinConstants) -> Result<f64> {
    if c.lambda_d == c.lambda_q {
        return Err(Error::DegenerateLambdas);
    }
    Ok((frac_dd - frac_dq) / (c.lambda_d - c.lambda_q))
}

/// Thermometer-based compensation delta_D_comp = delta_D - lambda_D D delta_T.
pub fn compensate_with_thermometer(delta_d: f64, delta_t_ext: f64, c: &SpinConstants) -> f64 {
    delta_d - c.lambda_d * c.d0 * delta_t_ext
}

/// Corrective local-oscillator shift (Hz) from the two quadrature pairs:
/// delta_psi = psi * (alpha/(2 pi Q tau_Q) atan2(SyQ, SxQ)
///                  + (1-alpha)/(2 pi D tau_D) atan2(SyD, SxD)).
pub fn feedback_shift(
    d_readout: &QuadratureReadout,
    q_readout: &QuadratureReadout,
    c: &SpinConstants,
    psi: f64,
) -> Result<f64> {
    let delta_d = detuning_from_quadratures(d_readout)?;
    let delta_q = detuning_from_quadratures(q_readout)?;
    Ok(psi * composite_correction(delta_q / c.q0, delta_d / c.d0, c)?)
}

/// Free-evolution time maximizing the sensitivity figure
/// tau * exp(-(tau/T2)^p), by grid argmax.
pub fn optimal_tau(t2: f64, p: f64) -> f64 {
    let mut best = (0.0, f64::NEG_INFINITY);
    let n = 20_000;
    for i in 1..=n {
        let tau = 3.0 * t2 * i as f64 / n as f64;
        let figure = tau * (-(tau / t2).powf(p)).exp();
        if figure > best.1 {
            best = (tau, figure);
        }
    }
    best.0
}

/// One parameter of the instability budget with its per-target sensitivities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetInput {
    pub parameter: String,
    /// Parameter instability delta_X in native units at the stated tau.
    pub instability: f64,
    pub unit: String,
    /// Fractional sensitivity per native unit, for D, Q, psi.
    pub sensitivity_d: f64,
    pub sensitivity_q: f64,
    pub sensitivity_psi: f64,
}

/// One computed row of the budget: contribution = |sensitivity * instability|.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub parameter: String,
    pub instability: f64,
    pub unit: String,
    pub contribution_d: f64,
    pub contribution_q: f64,
    pub contribution_psi: f64,
}

/// The measured parameter instabilities and sensitivities at 200 s.
///
/// These are inputs, not derivations: the magnetic-field, RF-power, and
/// laser-power couplings are experimental values with no in-scope model.
/// The transverse-field instability row carries the printed 0.5 mG value;
/// the text separately quotes a 50 uG upper bound for the same quantity,
/// a discrepancy left to the user to resolve by editing the row.
pub fn default_budget_inputs() -> Vec<BudgetInput> {
    let row = |parameter: &str, instability: f64, unit: &str, d: f64, q: f64, psi: f64| {
        BudgetInput {
            parameter: parameter.to_string(),
            instability,
            unit: unit.to_string(),
            sensitivity_d: d,
            sensitivity_q: q,
            sensitivity_psi: psi,
        }
    };
    vec![
        // temperature: ppb/mK on a 10 mK instability
        row("temperature", 10.0, "mK", 25e-9, 7.2e-9, 0.5e-9),
        // longitudinal field: ppb/mG on 50 uG = 0.05 mG
        row("bz", 0.05, "mG", 1.6e-9, 0.6e-9, 1.2e-9),
        // transverse field: ppb/mG on 0.5 mG
        row("bx", 0.5, "mG", 0.38e-9, 0.64e-9, 0.72e-9),
        // RF power: ppm/dB on 0.001 dB
        row("rf_power", 0.001, "dB", 0.4e-6, 1.4e-6, 2.0e-6),
        // laser power: ppb/mW on 20 uW = 0.02 mW
        row("laser_power", 0.02, "mW", 110e-9, 22e-9, 22e-9),
    ]
}

/// Computes the contribution columns and per-target totals (root sum of
/// squares) of the budget.
pub fn budget_table(inputs: &[BudgetInput]) -> Result<Vec<BudgetEntry>> {
    if inputs.is_empty() {
        return Err(Error::MissingBudgetEntry("(empty budget)".into()));
    }
    for input in inputs {
        if !input.instability.is_finite()
            || !input.sensitivity_d.is_finite()
            || !input.sensitivity_q.is_finite()
            || !input.sensitivity_psi.is_finite()
        {
            return Err(Error::MissingBudgetEntry(input.parameter.clone()));
        }
    }
    Ok(inputs
        .iter()
        .map(|i| BudgetEntry {
            parameter: i.parameter.clone(),
            instability: i.instability,
            unit: i.unit.clone(),
            contribution_d: (i.sensitivity_d * i.instability).abs(),
            contribution_q: (i.sensitivity_q * i.instability).abs(),
            contribution_psi: (i.sensitivity_psi * i.instability).abs(),
        })
        .collect())
}

/// Root-sum-of-squares totals (D, Q, psi) over budget rows.
pub fn budget_totals(entries: &[BudgetEntry]) -> (f64, f64, f64) {
    let mut t = (0.0, 0.0, 0.0);
    for e in entries {
        t.0 += e.contribution_d * e.contribution_d;
        t.1 += e.contribution_q * e.contribution_q;
        t.2 += e.contribution_psi * e.contribution_psi;
    }
    (t.0.sqrt(), t.1.sqrt(), t.2.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn constants() -> SpinConstants {
        SpinConstants::default()
    }

    #[test]
    fn normalized_readout_basics() {
        let mut w = WindowedReadout { v_a: 1.0, v_b: 1.0, t_a: 1e-6, t_b: 1e-6, offset: 0.0 };
        assert_eq!(normalized_readout(&w).unwrap(), 0.0);
        w.v_a = 1.02;
        assert_relative_eq!(normalized_readout(&w).unwrap(), 0.02, epsilon = 1e-15);
        // offset scales the result through the denominator only
        w.offset = 1.0;
        assert_relative_eq!(normalized_readout(&w).unwrap(), 0.01, epsilon = 1e-15);
        w.offset = -1.0;
        assert!(matches!(normalized_readout(&w), Err(Error::ZeroDenominator)));
    }

    #[test]
    fn detuning_extraction_special_values() {
        let q = QuadratureReadout { sx: 0.3, sy: 0.3, tau: 1.0, target: Target::Q };
        assert_relative_eq!(detuning_from_quadratures(&q).unwrap(), 0.125, epsilon = 1e-15);
        let q = QuadratureReadout { sx: 0.5, sy: 0.0, tau: 1.0, target: Target::Q };
        assert_eq!(detuning_from_quadratures(&q).unwrap(), 0.0);
        let q = QuadratureReadout { sx: 0.0, sy: 0.0, tau: 1.0, target: Target::Q };
        assert!(matches!(detuning_from_quadratures(&q), Err(Error::ZeroQuadratures)));
    }

    #[test]
    fn detuning_roundtrip() {
        let tau = 1e-3;
        let delta = 37.0;
        let phase = 2.0 * PI * delta * tau;
        let q = QuadratureReadout {
            sx: 0.8 * phase.cos(),
            sy: 0.8 * phase.sin(),
            tau,
            target: Target::D,
        };
        assert_relative_eq!(detuning_from_quadratures(&q).unwrap(), delta, max_relative = 1e-9);
    }

    #[test]
    fn tracker_unwraps_across_branch() {
        let tau = 1.0;
        let mut tracker = DetuningTracker::new();
        // detuning ramps through the +-1/(4 tau) capture range
        let mut last = f64::NEG_INFINITY;
        for i in 0..100 {
            let delta = 0.01 * i as f64; // up to 1 Hz, crossing many branches
            let phase = 2.0 * PI * delta * tau;
            let q = QuadratureReadout {
                sx: phase.cos(),
                sy: phase.sin(),
                tau,
                target: Target::Q,
            };
            let extracted = tracker.extract(&q).unwrap();
            assert_relative_eq!(extracted, delta, epsilon = 1e-9);
            assert!(extracted >= last);
            last = extracted;
        }
    }

    #[test]
    fn alpha_values() {
        let c = constants();
        assert_relative_eq!(alpha_from_lambdas(&c).unwrap(), 1.3955, epsilon = 5e-4);
        let mut eq = c;
        eq.lambda_q = -eq.lambda_d;
        assert_relative_eq!(alpha_from_lambdas(&eq).unwrap(), 0.5, epsilon = 1e-15);
        let mut zero = c;
        zero.lambda_q = 0.0;
        assert_relative_eq!(alpha_from_lambdas(&zero).unwrap(), 1.0, epsilon = 1e-15);
        let mut degen = c;
        degen.lambda_q = degen.lambda_d;
        assert!(matches!(alpha_from_lambdas(&degen), Err(Error::DegenerateLambdas)));
    }

    #[test]
    fn composite_weights_sum_to_one() {
        let c = constants();
        let x = 3.7e-9;
        assert_relative_eq!(composite_correction(x, x, &c).unwrap(), x, epsilon = 1e-22);
    }

    #[test]
    fn composite_nulls_pure_temperature_step() {
        let c = constants();
        for dt in [1e-3, 0.01, 0.3, -0.2] {
            let out = composite_correction(c.lambda_q * dt, c.lambda_d * dt, &c).unwrap();
            assert!(out.abs() < 1e-12, "residual {out} at dT = {dt}");
        }
    }

    #[test]
    fn temperature_normalization_value() {
        let c = constants();
        // -10.0 ppb/mK = -10.0e-6 / K
        assert_relative_eq!(temperature_normalization(&c).unwrap(), -10.0e-6, epsilon = 0.1e-6);
    }

    #[test]
    fn second_order_coefficient_annotation() {
        let c = constants();
        let coeff = c.lambda_d * c.lambda_q / (c.lambda_d - c.lambda_q);
        assert_relative_eq!(coeff, -10.0e-6, max_relative = 0.02);
    }

    #[test]
    fn second_order_matches_first_order_at_zero() {
        let c = constants();
        let (dq, dd) = (2.0e-9, -1.0e-9);
        // no temperature contrast between the two channels beyond first order
        let a = composite_correction(dq, dq, &c).unwrap();
        let b = composite_correction_2nd(dq, dq, &c).unwrap();
        assert_eq!(a, b);
        assert!(composite_correction_2nd(dq, dd, &c).unwrap().is_finite());
    }

    #[test]
    fn second_order_residual_is_cubic() {
        let mut c = constants();
        c.lambda_d2 = 1.0e-6;
        c.lambda_q2 = 2.0e-7;
        let forward = |dt: f64| {
            let fd = c.lambda_d * dt + 0.5 * c.lambda_d2 * dt * dt;
            let fq = c.lambda_q * dt + 0.5 * c.lambda_q2 * dt * dt;
            composite_correction_2nd(fq, fd, &c).unwrap().abs()
        };
        let (d1, d2) = (5e-3, 50e-3);
        let exponent = (forward(d2) / forward(d1)).ln() / (d2 / d1).ln();
        assert!((exponent - 3.0).abs() < 0.1, "exponent {exponent}");
    }

    #[test]
    fn temperature_estimate_roundtrip_and_null() {
        let c = constants();
        let dt = 0.01;
        let est =
            temperature_estimate(c.lambda_d * dt, c.lambda_q * dt, &c).unwrap();
        assert_relative_eq!(est, dt, max_relative = 1e-9);
        assert_eq!(temperature_estimate(5e-9, 5e-9, &c).unwrap(), 0.0);
        // annotation: lambda_D - lambda_Q = -18.13 ppm/K
        assert_relative_eq!(c.lambda_d - c.lambda_q, -18.13e-6, max_relative = 0.01);
    }

    #[test]
    fn thermometer_compensation() {
        let c = constants();
        assert_eq!(compensate_with_thermometer(12.5, 0.0, &c), 12.5);
        let dt = 0.02;
        let dd = c.lambda_d * c.d0 * dt;
        assert_relative_eq!(compensate_with_thermometer(dd, dt, &c), 0.0, epsilon = 1e-9);
        // thermometer offset drift leaves -lambda_D D eps
        let eps = 1e-3;
        assert_relative_eq!(
            compensate_with_thermometer(dd, dt + eps, &c),
            -c.lambda_d * c.d0 * eps,
            max_relative = 1e-12
        );
    }

    #[test]
    fn feedback_shift_matches_composite() {
        let c = constants();
        let psi = 10e6;
        let x = 3.0e-9; // pure LO fractional offset
        let (tau_d, tau_q) = (1.0e-6, 0.3e-3);
        let make = |f0: f64, tau: f64, target| {
            let phase = 2.0 * PI * (x * f0) * tau;
            QuadratureReadout { sx: phase.cos(), sy: phase.sin(), tau, target }
        };
        let d = make(c.d0, tau_d, Target::D);
        let q = make(c.q0, tau_q, Target::Q);
        let shift = feedback_shift(&d, &q, &c, psi).unwrap();
        assert_relative_eq!(shift / psi, x, max_relative = 1e-9);
        // zero in, zero out
        let d0 = QuadratureReadout { sx: 1.0, sy: 0.0, tau: tau_d, target: Target::D };
        let q0 = QuadratureReadout { sx: 1.0, sy: 0.0, tau: tau_q, target: Target::Q };
        assert_eq!(feedback_shift(&d0, &q0, &c, psi).unwrap(), 0.0);
        // pure temperature step nulls to first order
        let dt = 1e-3;
        let dtemp = make(c.d0 * (1.0 + c.lambda_d * dt) - c.d0, tau_d, Target::D);
        let qtemp = make(c.q0 * c.lambda_q * dt / 1.0, tau_q, Target::Q);
        let shift = feedback_shift(&dtemp, &qtemp, &c, psi).unwrap();
        assert!((shift / psi).abs() < 1e-12);
    }

    #[test]
    fn optimal_tau_matches_analytic_optimum() {
        for (t2, p) in [(1.68e-6, 1.0), (0.881e-3, 1.0), (1.0e-3, 1.5)] {
            let grid = optimal_tau(t2, p);
            let analytic = t2 * (1.0 / p).powf(1.0 / p);
            assert_relative_eq!(grid, analytic, max_relative = 1e-3);
        }
    }

    #[test]
    fn budget_reproduces_measured_contributions() {
        let entries = budget_table(&default_budget_inputs()).unwrap();
        let by_name = |n: &str| entries.iter().find(|e| e.parameter == n).unwrap();
        let t = by_name("temperature");
        assert_relative_eq!(t.contribution_d, 250e-9, epsilon = 1e-18);
        assert_relative_eq!(t.contribution_q, 72e-9, epsilon = 1e-18);
        let rf = by_name("rf_power");
        assert_relative_eq!(rf.contribution_psi, 2.0e-9, epsilon = 1e-18);
        let laser = by_name("laser_power");
        assert_relative_eq!(laser.contribution_d, 2.2e-9, epsilon = 1e-18);
        assert!(matches!(budget_table(&[]), Err(Error::MissingBudgetEntry(_))));
    }

    proptest! {
        #[test]
        fn first_order_temperature_null_invariance(
            dd in -1e-6f64..1e-6,
            dq in -1e-6f64..1e-6,
            t in -0.5f64..0.5,
        ) {
            let c = constants();
            let a = composite_correction(dq, dd, &c).unwrap();
            let b = composite_correction(dq + c.lambda_q * t, dd + c.lambda_d * t, &c).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn lo_null_invariance(
            dd in -1e-6f64..1e-6,
            dq in -1e-6f64..1e-6,
            x in -1e-3f64..1e-3,
        ) {
            let c = constants();
            let a = temperature_estimate(dd, dq, &c).unwrap();
            let b = temperature_estimate(dd + x, dq + x, &c).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn quadrature_roundtrip_on_capture_range(frac in -0.99f64..0.99) {
            let tau = 2.5e-3;
            let delta = frac / (4.0 * tau);
            let phase = 2.0 * PI * delta * tau;
            let q = QuadratureReadout {
                sx: 0.4 * phase.cos(),
                sy: 0.4 * phase.sin(),
                tau,
                target: Target::D,
            };
            let out = detuning_from_quadratures(&q).unwrap();
            prop_assert!((out - delta).abs() <= 1e-9 * delta.abs().max(1.0));
        }
    }
}
