//! Closed-loop clock simulation: interleaved D/Q measurement cycles with
//! injected temperature, local-oscillator, and photon-shot noise, the
//! selectable correction modes, pulse-level sensitivity sweeps, and
//! side-by-side strategy comparisons.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clock_composer::{alpha_from_lambdas, composite_correction};
use crate::error::{Error, Result};
use crate::noise_stats::{allan_deviation, generate_noise, psn_fractional, AllanCurve, NoiseSpec, PsnParams};
use crate::pulse_engine::{ttzfs8_signal, PhaseCycleScheme, SequenceSettings};
use crate::spin_model::{temperature_model, transition_frequencies, SpinConstants};

/// How the per-cycle correction signal `frac_psi` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// No correction; `frac_psi` stays zero.
    OpenLoop,
    /// Temperature-insensitive combination of both channels.
    Composite,
    DOnly,
    QOnly,
    /// D channel corrected with an external thermometer reading.
    ThermometerCompensated,
}

/// Interrogation settings of one measurement channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSettings {
    /// Total free-evolution time, s.
    pub tau: f64,
    pub area_scale: f64,
    pub prep_fidelity: f64,
}

impl ChannelSettings {
    pub fn new(tau: f64) -> Self {
        Self { tau, area_scale: 1.0, prep_fidelity: 1.0 }
    }
}

/// Full description of one closed-loop run.
///
/// Noise specs carry a kind and magnitude; their `seed` and `dt` fields are
/// overridden with sub-streams derived from `seed` and with `t_cycle`, so a
/// single scenario seed reproduces the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub constants: SpinConstants,
    /// Axial magnetic field, G.
    pub bz: f64,
    pub d_channel: ChannelSettings,
    pub q_channel: ChannelSettings,
    /// Time of one interleaved D+Q measurement cycle, s.
    pub t_cycle: f64,
    pub n_cycles: usize,
    pub mode: FeedbackMode,
    pub seed: u64,
    pub temperature_noise: Option<NoiseSpec>,
    pub lo_noise: Option<NoiseSpec>,
    /// Shot-noise chains per channel; `tau` and `t` inside are overridden
    /// with the channel tau and `t_cycle`.
    pub psn_d: Option<PsnParams>,
    pub psn_q: Option<PsnParams>,
    /// Additive error of the external thermometer, K.
    pub thermometer_drift: Option<NoiseSpec>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.constants.validate()?;
        if self.n_cycles < 100 {
            return Err(Error::InvalidConfig(format!(
                "scenario duration must cover at least 100 cycles, got {}",
                self.n_cycles
            )));
        }
        if self.t_cycle <= 0.0 || self.d_channel.tau <= 0.0 || self.q_channel.tau <= 0.0 {
            return Err(Error::InvalidConfig(
                "t_cycle and channel taus must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything recorded during a run, one entry per cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockTimeSeries {
    pub timestamps: Vec<f64>,
    pub frac_d: Vec<f64>,
    pub frac_q: Vec<f64>,
    pub frac_psi: Vec<f64>,
    pub true_temperature: Vec<f64>,
    pub true_lo_offset: Vec<f64>,
    /// Cycles whose true detuning left the arctangent capture range.
    pub flagged: Vec<bool>,
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn noise_series(
    spec: &Option<NoiseSpec>,
    n: usize,
    seed: u64,
    stream: u64,
    dt: f64,
) -> Result<Vec<f64>> {
    match spec {
        None => Ok(vec![0.0; n]),
        Some(s) => {
            let mut owned = *s;
            owned.seed = stream_seed(seed, stream);
            owned.dt = dt;
            generate_noise(&owned, n)
        }
    }
}

/// Phase standard deviation (radians) of one quadrature pair, from the
/// shot-noise chain evaluated over a single cycle.
fn phase_sigma(psn: &Option<PsnParams>, tau: f64, t_cycle: f64) -> Result<f64> {
    match psn {
        None => Ok(0.0),
        Some(p) => {
            let mut owned = *p;
            owned.tau = tau;
            owned.t = t_cycle;
            owned.t_cycle = t_cycle;
            let frac = psn_fractional(&owned)?;
            Ok(frac * owned.f * 2.0 * PI * tau)
        }
    }
}

/// Applies a feedback mode to one cycle's measurements.
pub fn combine_mode(
    mode: FeedbackMode,
    frac_d: f64,
    frac_q: f64,
    thermometer_delta_t: f64,
    c: &SpinConstants,
) -> Result<f64> {
    Ok(match mode {
        FeedbackMode::OpenLoop => 0.0,
        FeedbackMode::Composite => composite_correction(frac_q, frac_d, c)?,
        FeedbackMode::DOnly => frac_d,
        FeedbackMode::QOnly => frac_q,
        FeedbackMode::ThermometerCompensated => frac_d - c.lambda_d * thermometer_delta_t,
    })
}

/// Runs the cycle loop. Cycles are sequentially dependent in principle, so
/// the loop is single-threaded; the output is bit-reproducible given the
/// config and seed.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ClockTimeSeries> {
    cfg.validate()?;
    let c = &cfg.constants;
    let n = cfg.n_cycles;
    let temp = noise_series(&cfg.temperature_noise, n, cfg.seed, 1, cfg.t_cycle)?;
    let lo = noise_series(&cfg.lo_noise, n, cfg.seed, 2, cfg.t_cycle)?;
    let thermo = noise_series(&cfg.thermometer_drift, n, cfg.seed, 4, cfg.t_cycle)?;
    let sigma_d = phase_sigma(&cfg.psn_d, cfg.d_channel.tau, cfg.t_cycle)?;
    let sigma_q = phase_sigma(&cfg.psn_q, cfg.q_channel.tau, cfg.t_cycle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 3));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let q_abs = c.q0.abs();
    let amplitude = 0.5;
    let mut out = ClockTimeSeries {
        timestamps: Vec::with_capacity(n),
        frac_d: Vec::with_capacity(n),
        frac_q: Vec::with_capacity(n),
        frac_psi: Vec::with_capacity(n),
        true_temperature: Vec::with_capacity(n),
        true_lo_offset: Vec::with_capacity(n),
        flagged: Vec::with_capacity(n),
    };
    for i in 0..n {
        let t_now = c.t0 + temp[i];
        let (d_true, q_true) = temperature_model(c, t_now)?;
        let x = lo[i];
        let frac_true_d = (d_true - c.d0) / c.d0 + x;
        let frac_true_q = (q_true - c.q0) / c.q0 + x;
        let df_d = frac_true_d * c.d0;
        let df_q = frac_true_q * q_abs;

        let mut measure = |df: f64, tau: f64, sigma: f64| -> (f64, bool) {
            let phase = 2.0 * PI * df * tau;
            let (nx, ny) = if sigma > 0.0 {
                (
                    amplitude * sigma * unit.sample(&mut rng),
                    amplitude * sigma * unit.sample(&mut rng),
                )
            } else {
                (0.0, 0.0)
            };
            let sx = amplitude * phase.cos() + nx;
            let sy = amplitude * phase.sin() + ny;
            let extracted = sy.atan2(sx) / (2.0 * PI * tau);
            let out_of_range = df.abs() >= 1.0 / (2.0 * tau);
            (extracted, out_of_range)
        };
        let (d_hat, d_flag) = measure(df_d, cfg.d_channel.tau, sigma_d);
        let (q_hat, q_flag) = measure(df_q, cfg.q_channel.tau, sigma_q);
        let frac_d = d_hat / c.d0;
        let frac_q = q_hat / q_abs;
        let frac_psi = combine_mode(cfg.mode, frac_d, frac_q, temp[i] + thermo[i], c)?;

        out.timestamps.push(i as f64 * cfg.t_cycle);
        out.frac_d.push(frac_d);
        out.frac_q.push(frac_q);
        out.frac_psi.push(frac_psi);
        out.true_temperature.push(t_now);
        out.true_lo_offset.push(x);
        out.flagged.push(d_flag || q_flag);
    }
    Ok(out)
}

/// Converts the fractional series into temperature-equivalent units
/// (lambda_D^-1 frac_D, lambda_Q^-1 frac_Q), both in kelvin.
pub fn temperature_in_units(
    series: &ClockTimeSeries,
    c: &SpinConstants,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if c.lambda_d == 0.0 || c.lambda_q == 0.0 {
        return Err(Error::DegenerateLambdas);
    }
    let d = series.frac_d.iter().map(|f| f / c.lambda_d).collect();
    let q = series.frac_q.iter().map(|f| f / c.lambda_q).collect();
    Ok((d, q))
}

/// Parameters the sweep can perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// Offset from the reference temperature, K.
    Temperature,
    /// Offset from the configured axial field, G.
    Bz,
    /// D-channel free-evolution time, s (absolute).
    TauD,
    /// Q-channel free-evolution time, s (absolute).
    TauQ,
    /// Preparation fidelity of both channels (absolute).
    PrepFidelity,
    /// Common pulse-area multiplier of both channels (absolute).
    PulseAreaScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub frac_d: f64,
    pub frac_q: f64,
    pub frac_psi: f64,
}

/// Raw sweep table plus central-difference slopes and quadratic-fit
/// curvatures per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: SweepParameter,
    pub rows: Vec<SweepRow>,
    pub slope_d: f64,
    pub slope_q: f64,
    pub slope_psi: f64,
    pub curvature_d: f64,
    pub curvature_q: f64,
    pub curvature_psi: f64,
    /// Per target: the linear term is negligible against the quadratic one
    /// over the swept span, so the curvature is the meaningful coupling.
    pub linear_negligible: [bool; 3],
    /// Sweep crossed a no-signal or non-monotonic region.
    pub flagged: bool,
}

struct QuadratureExtractor {
    x_scheme: PhaseCycleScheme,
    y_scheme: PhaseCycleScheme,
}

impl QuadratureExtractor {
    fn new() -> Self {
        let x_scheme = PhaseCycleScheme::ttzfs8();
        let y_scheme = x_scheme.quadrature_shifted();
        Self { x_scheme, y_scheme }
    }

    /// Phase of the cycled signal pair and its magnitude.
    fn phase(&self, seq: &SequenceSettings, tau: f64) -> (f64, f64) {
        let sx = ttzfs8_signal(seq, tau, &self.x_scheme);
        let sy = ttzfs8_signal(seq, tau, &self.y_scheme);
        (sy.atan2(sx), sx.hypot(sy))
    }
}

fn wrap_pi(mut x: f64) -> f64 {
    while x > PI {
        x -= 2.0 * PI;
    }
    while x <= -PI {
        x += 2.0 * PI;
    }
    x
}

/// One noiseless pulse-level measurement of both channels.
///
/// Drive frequencies stay fixed at the reference quartet; phase references
/// and the extraction sign are calibrated once at nominal settings, so
/// systematic shifts from area or fidelity errors show up as apparent
/// detunings, as they would against a real calibration.
struct PulseLevelMeter {
    extractor: QuadratureExtractor,
    ref_quartet: crate::spin_model::FrequencyQuartet,
    theta0_d: f64,
    theta0_q: f64,
    sign: f64,
    min_magnitude: f64,
}

impl PulseLevelMeter {
    fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let extractor = QuadratureExtractor::new();
        let ref_quartet = transition_frequencies(&cfg.constants, cfg.bz, cfg.constants.t0)?;
        let nominal = SequenceSettings::ideal(0.0, 0.0);
        let (theta0_d, _) = extractor.phase(&nominal, cfg.d_channel.tau);
        let (theta0_q, _) = extractor.phase(&nominal, cfg.q_channel.tau);
        // calibrate the sign with a known positive common detuning
        let cal_df = 1e-3 / cfg.q_channel.tau;
        let cal = SequenceSettings::ideal(2.0 * PI * cal_df, 2.0 * PI * cal_df);
        let (theta_cal, _) = extractor.phase(&cal, cfg.q_channel.tau);
        let sign = wrap_pi(theta_cal - theta0_q).signum();
        Ok(Self {
            extractor,
            ref_quartet,
            theta0_d,
            theta0_q,
            sign,
            min_magnitude: f64::INFINITY,
        })
    }

    /// Extracted fractional detunings (frac_D, frac_Q) at the perturbed
    /// operating point.
    fn measure(
        &mut self,
        cfg: &ScenarioConfig,
        d_temp: f64,
        d_bz: f64,
        tau_d: f64,
        tau_q: f64,
        prep: f64,
        scale: f64,
    ) -> Result<(f64, f64)> {
        let c = &cfg.constants;
        let quartet = transition_frequencies(c, cfg.bz + d_bz, c.t0 + d_temp)?;
        let mut channel = |f_a: f64, f_b: f64, ra: f64, rb: f64, tau: f64, theta0: f64| {
            let mut seq =
                SequenceSettings::ideal(2.0 * PI * (f_a - ra), 2.0 * PI * (f_b - rb));
            seq.area_scale = scale;
            seq.prep_fidelity = prep;
            let (theta, mag) = self.extractor.phase(&seq, tau);
            self.min_magnitude = self.min_magnitude.min(mag);
            self.sign * wrap_pi(theta - theta0) / (2.0 * PI * tau)
        };
        let d_hat = channel(
            quartet.f_plus,
            quartet.f_minus,
            self.ref_quartet.f_plus,
            self.ref_quartet.f_minus,
            tau_d,
            self.theta0_d,
        );
        let q_hat = channel(
            quartet.f1,
            quartet.f2,
            self.ref_quartet.f1,
            self.ref_quartet.f2,
            tau_q,
            self.theta0_q,
        );
        Ok((
            d_hat / self.ref_quartet.d_half_sum(),
            q_hat / self.ref_quartet.q_half_sum(),
        ))
    }
}

fn quadratic_fit(values: &[f64], ys: &[f64]) -> (f64, f64) {
    // least squares of y = a + b (v - mean) + c (v - mean)^2; returns (b, 2c)
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
    let (mut sy, mut sxy, mut sx2y) = (0.0, 0.0, 0.0);
    for (&v, &y) in values.iter().zip(ys) {
        let x = v - mean;
        s1 += x;
        s2 += x * x;
        s3 += x * x * x;
        s4 += x * x * x * x;
        sy += y;
        sxy += x * y;
        sx2y += x * x * y;
    }
    let m = nalgebra::Matrix3::new(n, s1, s2, s1, s2, s3, s2, s3, s4);
    let rhs = nalgebra::Vector3::new(sy, sxy, sx2y);
    match m.lu().solve(&rhs) {
        Some(sol) => (sol[1], 2.0 * sol[2]),
        None => (f64::NAN, f64::NAN),
    }
}

fn is_monotonic(ys: &[f64], tol: f64) -> bool {
    let up = ys.windows(2).all(|w| w[1] >= w[0] - tol);
    let down = ys.windows(2).all(|w| w[1] <= w[0] + tol);
    up || down
}

/// Sweeps one parameter over `grid` with everything else at its configured
/// value, measuring through the noiseless pulse-level model.
pub fn sensitivity_sweep(
    cfg: &ScenarioConfig,
    parameter: SweepParameter,
    grid: &[f64],
) -> Result<SweepTable> {
    if grid.len() < 3 {
        return Err(Error::InvalidConfig("sweep grid needs at least 3 points".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut meter = PulseLevelMeter::new(cfg)?;
    let mut rows = Vec::with_capacity(sorted.len());
    for &v in &sorted {
        let (mut dt, mut dbz) = (0.0, 0.0);
        let mut tau_d = cfg.d_channel.tau;
        let mut tau_q = cfg.q_channel.tau;
        let mut prep = cfg.d_channel.prep_fidelity;
        let mut scale = cfg.d_channel.area_scale;
        match parameter {
            SweepParameter::Temperature => dt = v,
            SweepParameter::Bz => dbz = v,
            SweepParameter::TauD => tau_d = v,
            SweepParameter::TauQ => tau_q = v,
            SweepParameter::PrepFidelity => prep = v,
            SweepParameter::PulseAreaScale => scale = v,
        }
        let (frac_d, frac_q) = meter.measure(cfg, dt, dbz, tau_d, tau_q, prep, scale)?;
        let frac_psi = composite_correction(frac_q, frac_d, &cfg.constants)?;
        rows.push(SweepRow { value: v, frac_d, frac_q, frac_psi });
    }

    let mid = rows.len() / 2;
    let lo = mid.saturating_sub(1);
    let hi = (mid + 1).min(rows.len() - 1);
    let dv = rows[hi].value - rows[lo].value;
    if dv == 0.0 {
        return Err(Error::InvalidConfig("sweep grid has duplicate values".into()));
    }
    let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let span = values[values.len() - 1] - values[0];
    let mut slopes = [0.0; 3];
    let mut curvatures = [0.0; 3];
    let mut negligible = [false; 3];
    let mut non_monotonic_significant = false;
    for (k, pick) in [
        |r: &SweepRow| r.frac_d,
        |r: &SweepRow| r.frac_q,
        |r: &SweepRow| r.frac_psi,
    ]
    .iter()
    .enumerate()
    {
        let ys: Vec<f64> = rows.iter().map(pick).collect();
        slopes[k] = (ys[hi] - ys[lo]) / dv;
        let (b, c2) = quadratic_fit(&values, &ys);
        curvatures[k] = c2;
        negligible[k] = b.abs() * span < 0.05 * (0.5 * c2 * span * span).abs();
        let scale = ys.iter().fold(0.0_f64, |m, y| m.max(y.abs()));
        if !negligible[k] && scale > 0.0 && slopes[k].abs() * span > 0.1 * scale {
            non_monotonic_significant |= !is_monotonic(&ys, 1e-3 * scale);
        }
    }
    let flagged = meter.min_magnitude < 1e-9 || non_monotonic_significant;
    Ok(SweepTable {
        parameter,
        rows,
        slope_d: slopes[0],
        slope_q: slopes[1],
        slope_psi: slopes[2],
        curvature_d: curvatures[0],
        curvature_q: curvatures[1],
        curvature_psi: curvatures[2],
        linear_negligible: negligible,
        flagged,
    })
}

/// The reduction of the D-transition temperature coefficient reported for
/// cryogenic operation.
pub const CRYOGENIC_LAMBDA_FACTOR: f64 = 15.0;

/// Residual fraction of the temperature noise under active stabilization.
pub const STABILIZED_NOISE_FACTOR: f64 = 0.01;

/// The strategy variants compared by `strategy_comparison`, all sharing the
/// base seed so they see identical noise realizations.
pub fn strategy_variants(base: &ScenarioConfig) -> Vec<(String, ScenarioConfig)> {
    let mut variants: Vec<(String, ScenarioConfig)> = Vec::new();

    let mut uncompensated = base.clone();
    uncompensated.mode = FeedbackMode::DOnly;
    variants.push(("d_only".into(), uncompensated));

    let mut composite = base.clone();
    composite.mode = FeedbackMode::Composite;
    variants.push(("composite".into(), composite));

    let mut thermometer = base.clone();
    thermometer.mode = FeedbackMode::ThermometerCompensated;
    variants.push(("thermometer_compensated".into(), thermometer));

    let mut cryogenic = base.clone();
    cryogenic.mode = FeedbackMode::DOnly;
    cryogenic.constants.lambda_d /= CRYOGENIC_LAMBDA_FACTOR;
    cryogenic.constants.lambda_d2 /= CRYOGENIC_LAMBDA_FACTOR;
    variants.push(("cryogenic".into(), cryogenic));

    let mut stabilized = base.clone();
    stabilized.mode = FeedbackMode::DOnly;
    if let Some(spec) = &mut stabilized.temperature_noise {
        spec.magnitude *= STABILIZED_NOISE_FACTOR;
    }
    variants.push(("stabilized".into(), stabilized));
    variants
}

/// Runs the correction strategies on identical noise realizations (shared
/// seed) and returns an Allan curve of `frac_psi` for each. Variants are
/// independent and run concurrently; collection order is fixed.
pub fn strategy_comparison(
    base: &ScenarioConfig,
    taus: &[f64],
) -> Result<Vec<(String, AllanCurve)>> {
    base.validate()?;
    let variants = strategy_variants(base);

    let results: Vec<Result<AllanCurve>> = std::thread::scope(|scope| {
        let handles: Vec<_> = variants
            .iter()
            .map(|(_, cfg)| {
                scope.spawn(move || {
                    let series = run_scenario(cfg)?;
                    allan_deviation(&series.frac_psi, cfg.t_cycle, taus)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("variant thread panicked")).collect()
    });
    variants
        .into_iter()
        .zip(results)
        .map(|((name, _), r)| r.map(|curve| (name, curve)))
        .collect()
}

/// Long-tau residual bound of the composite output under pure temperature
/// noise: |lambda_D lambda_Q / (lambda_D - lambda_Q)| <dT^2> / 2.
pub fn second_order_bound(c: &SpinConstants, mean_square_dt: f64) -> Result<f64> {
    let _ = alpha_from_lambdas(c)?;
    Ok(0.5 * (c.lambda_d * c.lambda_q / (c.lambda_d - c.lambda_q)).abs() * mean_square_dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise_stats::NoiseKind;
    use approx::assert_relative_eq;

    fn base_config() -> ScenarioConfig {
        ScenarioConfig {
            constants: SpinConstants::default(),
            bz: 475.0,
            d_channel: ChannelSettings::new(1.0e-6),
            q_channel: ChannelSettings::new(0.5e-3),
            t_cycle: 1.0,
            n_cycles: 400,
            mode: FeedbackMode::Composite,
            seed: 17,
            temperature_noise: None,
            lo_noise: None,
            psn_d: None,
            psn_q: None,
            thermometer_drift: None,
        }
    }

    fn temp_noise(magnitude: f64) -> Option<NoiseSpec> {
        Some(NoiseSpec { kind: NoiseKind::RandomWalk, magnitude, seed: 0, dt: 1.0 })
    }

    #[test]
    fn quiet_run_is_identically_zero() {
        for mode in [
            FeedbackMode::OpenLoop,
            FeedbackMode::Composite,
            FeedbackMode::DOnly,
            FeedbackMode::QOnly,
            FeedbackMode::ThermometerCompensated,
        ] {
            let mut cfg = base_config();
            cfg.mode = mode;
            let s = run_scenario(&cfg).unwrap();
            assert!(s.frac_psi.iter().all(|&x| x == 0.0), "{mode:?}");
            assert!(s.flagged.iter().all(|&f| !f));
        }
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let mut cfg = base_config();
        cfg.temperature_noise = temp_noise(1e-3);
        cfg.lo_noise = Some(NoiseSpec {
            kind: NoiseKind::White,
            magnitude: 1e-11,
            seed: 0,
            dt: 1.0,
        });
        cfg.psn_d = Some(psn_for(2.8703e9));
        cfg.psn_q = Some(psn_for(4.9459e6));
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed += 1;
        let c = run_scenario(&cfg).unwrap();
        assert_ne!(a.frac_psi, c.frac_psi);
    }

    fn psn_for(f: f64) -> PsnParams {
        PsnParams {
            f,
            tau: 1.0e-6,
            contrast: 0.1,
            t2: 1.0,
            p: 1.0,
            gain: 1e6,
            v0: 1.0,
            t_a: 2e-6,
            t_b: 2e-6,
            n_red: 1.0e7,
            n_green: 1.0e7,
            t_cycle: 1.0,
            t: 1.0,
        }
    }

    #[test]
    fn composite_nulls_temperature_to_second_order() {
        let mut cfg = base_config();
        cfg.temperature_noise = temp_noise(2e-3); // 2 mK random-walk steps
        cfg.n_cycles = 2000;
        let s = run_scenario(&cfg).unwrap();
        let msq_dt: f64 = s
            .true_temperature
            .iter()
            .map(|t| (t - cfg.constants.t0).powi(2))
            .sum::<f64>()
            / s.true_temperature.len() as f64;
        let rms: f64 = (s.frac_psi.iter().map(|x| x * x).sum::<f64>()
            / s.frac_psi.len() as f64)
            .sqrt();
        let bound = second_order_bound(&cfg.constants, msq_dt).unwrap();
        assert!(
            rms <= bound + 1e-15,
            "rms {rms:e} exceeds second-order bound {bound:e}"
        );
        // sanity: the D channel actually saw the noise
        let d_rms: f64 = (s.frac_d.iter().map(|x| x * x).sum::<f64>()
            / s.frac_d.len() as f64)
            .sqrt();
        assert!(d_rms > 100.0 * rms);
    }

    #[test]
    fn composite_tracks_lo_offset() {
        let mut cfg = base_config();
        cfg.lo_noise = Some(NoiseSpec {
            kind: NoiseKind::RandomWalk,
            magnitude: 2e-10,
            seed: 0,
            dt: 1.0,
        });
        cfg.n_cycles = 1000;
        let s = run_scenario(&cfg).unwrap();
        for (psi, x) in s.frac_psi.iter().zip(&s.true_lo_offset) {
            assert_relative_eq!(psi, x, max_relative = 1e-6, epsilon = 1e-18);
        }
    }

    #[test]
    fn d_only_drift_dominates_long_tau() {
        let mut cfg = base_config();
        cfg.mode = FeedbackMode::DOnly;
        cfg.temperature_noise = temp_noise(1e-3);
        cfg.n_cycles = 4000;
        let s = run_scenario(&cfg).unwrap();
        let curve =
            allan_deviation(&s.frac_psi, cfg.t_cycle, &[4.0, 16.0, 64.0, 256.0]).unwrap();
        // random-walk temperature: sigma grows with tau (slope ~ +1/2)
        assert!(curve.sigmas.windows(2).all(|w| w[1] > w[0]));
        let slope = (curve.sigmas[3] / curve.sigmas[0]).ln()
            / (curve.taus[3] / curve.taus[0]).ln();
        assert!(slope > 0.25, "slope {slope}");
    }

    #[test]
    fn mode_equivalences_by_construction() {
        let c = SpinConstants::default();
        let (fd, fq) = (3.1e-9, -0.9e-9);
        let mut alpha0 = c;
        alpha0.lambda_d = 0.0; // alpha = 0
        assert_eq!(
            combine_mode(FeedbackMode::Composite, fd, fq, 0.0, &alpha0).unwrap(),
            combine_mode(FeedbackMode::DOnly, fd, fq, 0.0, &c).unwrap()
        );
        let mut alpha1 = c;
        alpha1.lambda_q = 0.0; // alpha = 1
        assert_eq!(
            combine_mode(FeedbackMode::Composite, fd, fq, 0.0, &alpha1).unwrap(),
            combine_mode(FeedbackMode::QOnly, fd, fq, 0.0, &c).unwrap()
        );
    }

    #[test]
    fn capture_range_violation_is_flagged() {
        let mut cfg = base_config();
        cfg.mode = FeedbackMode::DOnly;
        // sinusoidal LO excursion beyond 1/(2 tau_D) of D: need frac > 1/(2 tau d0)
        let frac = 1.0 / (2.0 * cfg.d_channel.tau * cfg.constants.d0) * 3.0;
        cfg.lo_noise = Some(NoiseSpec {
            kind: NoiseKind::Sinusoidal { period: 200.0, phase0: 0.0 },
            magnitude: frac,
            seed: 0,
            dt: 1.0,
        });
        let s = run_scenario(&cfg).unwrap();
        assert!(s.flagged.iter().any(|&f| f));
        assert!(!s.flagged[0]); // starts on resonance
        assert_eq!(s.frac_psi.len(), cfg.n_cycles);
    }

    #[test]
    fn temperature_units_track_and_separate() {
        let mut cfg = base_config();
        cfg.temperature_noise = temp_noise(1e-3);
        let s = run_scenario(&cfg).unwrap();
        let (d_k, q_k) = temperature_in_units(&s, &cfg.constants).unwrap();
        for ((d, q), t) in d_k.iter().zip(&q_k).zip(&s.true_temperature) {
            let dt = t - cfg.constants.t0;
            assert_relative_eq!(*d, dt, epsilon = 1e-6);
            assert_relative_eq!(*q, dt, epsilon = 1e-6);
        }
        // pure LO drive: the two series differ by (1/lq - 1/ld) x
        let mut lo_cfg = base_config();
        let x = 4e-10;
        lo_cfg.lo_noise = Some(NoiseSpec {
            kind: NoiseKind::Sinusoidal { period: 2.0, phase0: PI / 2.0 },
            magnitude: x,
            seed: 0,
            dt: 1.0,
        });
        let s = run_scenario(&lo_cfg).unwrap();
        let (d_k, q_k) = temperature_in_units(&s, &lo_cfg.constants).unwrap();
        let c = &lo_cfg.constants;
        for ((d, q), xo) in d_k.iter().zip(&q_k).zip(&s.true_lo_offset) {
            let expect = (1.0 / c.lambda_q - 1.0 / c.lambda_d) * xo;
            assert_relative_eq!(q - d, expect, max_relative = 1e-6, epsilon = 1e-12);
        }
    }

    #[test]
    fn temperature_sweep_recovers_lambdas() {
        let cfg = base_config();
        let grid: Vec<f64> = (-3..=3).map(|i| i as f64 * 0.02).collect();
        let table = sensitivity_sweep(&cfg, SweepParameter::Temperature, &grid).unwrap();
        let c = &cfg.constants;
        assert_relative_eq!(table.slope_d, c.lambda_d, max_relative = 0.01);
        assert_relative_eq!(table.slope_q, c.lambda_q, max_relative = 0.01);
        assert!(
            table.slope_psi.abs() < 0.01 * c.lambda_d.abs(),
            "psi slope {:e}",
            table.slope_psi
        );
        assert!(!table.flagged);
    }

    #[test]
    fn area_scale_sweep_reports_finite_coupling() {
        let cfg = base_config();
        let grid: Vec<f64> = (-3..=3).map(|i| 1.0 + i as f64 * 0.01).collect();
        let table = sensitivity_sweep(&cfg, SweepParameter::PulseAreaScale, &grid).unwrap();
        assert!(table.slope_q.is_finite());
        assert!(table.rows.iter().all(|r| r.frac_q.is_finite()));
    }

    #[test]
    fn prep_fidelity_leaves_extraction_unbiased() {
        let cfg = base_config();
        let grid: Vec<f64> = (0..5).map(|i| 0.90 + 0.02 * i as f64).collect();
        let table = sensitivity_sweep(&cfg, SweepParameter::PrepFidelity, &grid).unwrap();
        // a common contrast scale cancels in the phase ratio
        assert!(table.slope_d.abs() < 1e-12);
        assert!(table.slope_q.abs() < 1e-12);
    }

    #[test]
    fn strategy_comparison_ordering() {
        let mut cfg = base_config();
        cfg.temperature_noise = temp_noise(2e-3);
        cfg.thermometer_drift = Some(NoiseSpec {
            kind: NoiseKind::RandomWalk,
            magnitude: 1e-3,
            seed: 0,
            dt: 1.0,
        });
        cfg.n_cycles = 2000;
        let taus = [4.0, 32.0, 256.0];
        let curves = strategy_comparison(&cfg, &taus).unwrap();
        let get = |name: &str| {
            curves
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, c)| c.sigmas.last().copied().unwrap())
                .unwrap()
        };
        let d_only = get("d_only");
        let composite = get("composite");
        let thermometer = get("thermometer_compensated");
        let cryogenic = get("cryogenic");
        let stabilized = get("stabilized");
        // composite nulls temperature, everything here is noiseless otherwise
        assert!(composite < 0.05 * d_only);
        // drifting thermometer helps but degrades relative to composite
        assert!(thermometer < d_only);
        assert!(thermometer > composite);
        // cryogenic variant reduces the temperature coupling by the factor
        assert_relative_eq!(d_only / cryogenic, CRYOGENIC_LAMBDA_FACTOR, max_relative = 0.05);
        // stabilization scales the noise magnitude directly
        assert_relative_eq!(
            d_only / stabilized,
            1.0 / STABILIZED_NOISE_FACTOR,
            max_relative = 0.25
        );
    }

    #[test]
    fn strategy_comparison_is_deterministic() {
        let mut cfg = base_config();
        cfg.temperature_noise = temp_noise(1e-3);
        cfg.n_cycles = 500;
        let taus = [4.0, 16.0];
        let a = strategy_comparison(&cfg, &taus).unwrap();
        let b = strategy_comparison(&cfg, &taus).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = base_config();
        cfg.n_cycles = 10;
        assert!(matches!(run_scenario(&cfg), Err(Error::InvalidConfig(_))));
        let mut cfg = base_config();
        cfg.t_cycle = 0.0;
        assert!(run_scenario(&cfg).is_err());
        let cfg = base_config();
        assert!(matches!(
            sensitivity_sweep(&cfg, SweepParameter::Temperature, &[0.0, 1.0]),
            Err(Error::InvalidConfig(_))
        ));
    }
}
