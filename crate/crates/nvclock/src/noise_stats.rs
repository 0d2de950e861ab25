//! Noise synthesis, Allan-deviation estimation, photon-shot-noise (PSN)
//! formulas, and damped-least-squares fringe fitting.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pulse_engine::FringeScan;
use crate::spin_model::SpinConstants;

pub const ELECTRON_CHARGE: f64 = 1.602176634e-19;

/// Noise process families available to the synthesizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseKind {
    /// i.i.d. zero-mean Gaussian samples with standard deviation `magnitude`.
    White,
    /// Cumulative sum of white steps of standard deviation `magnitude`.
    RandomWalk,
    /// Deterministic ramp `magnitude * t` (magnitude in units/s).
    LinearDrift,
    /// `magnitude * sin(2 pi t / period + phase0)`.
    Sinusoidal { period: f64, phase0: f64 },
}

/// A reproducible noise stream: `(kind, magnitude, seed, dt)` fully determine
/// the series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub magnitude: f64,
    pub seed: u64,
    pub dt: f64,
}

/// Samples `n` points of the process. Deterministic given the seed; each
/// spec owns an independent counter-based stream, so concurrent generation
/// is schedule-independent.
pub fn generate_noise(spec: &NoiseSpec, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidConfig("noise series length must be >= 1".into()));
    }
    if spec.dt <= 0.0 || spec.magnitude < 0.0 {
        return Err(Error::InvalidConfig("noise spec requires dt > 0 and magnitude >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out = match spec.kind {
        NoiseKind::White => {
            let dist = normal(spec.magnitude)?;
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
        NoiseKind::RandomWalk => {
            let dist = normal(spec.magnitude)?;
            let mut acc = 0.0;
            (0..n)
                .map(|_| {
                    acc += dist.sample(&mut rng);
                    acc
                })
                .collect()
        }
        NoiseKind::LinearDrift => {
            (0..n).map(|i| spec.magnitude * (i as f64 * spec.dt)).collect()
        }
        NoiseKind::Sinusoidal { period, phase0 } => {
            if period <= 0.0 {
                return Err(Error::InvalidConfig("sinusoidal period must be positive".into()));
            }
            (0..n)
                .map(|i| {
                    let t = i as f64 * spec.dt;
                    spec.magnitude * (2.0 * PI * t / period + phase0).sin()
                })
                .collect()
        }
    };
    Ok(out)
}

fn normal(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(format!("bad noise magnitude: {e}")))
}

/// Allan deviation versus averaging time, with the number of second
/// differences averaged at each point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllanCurve {
    pub taus: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub n_samples: Vec<usize>,
}

/// Overlapping Allan deviation of a fractional-frequency series sampled at
/// `dt`:
///
///   sigma^2(m dt) = sum_i (x[i+2m] - 2 x[i+m] + x[i])^2
///                   / (2 (m dt)^2 (N - 2m))
///
/// where `x` is the integrated phase (x[0] = 0, x[k+1] = x[k] + y[k] dt) of
/// length N = len + 1. Requested taus that don't fit in the series are
/// dropped; if none fit the call fails.
pub fn allan_deviation(series: &[f64], dt: f64, taus: &[f64]) -> Result<AllanCurve> {
    if dt <= 0.0 {
        return Err(Error::InvalidConfig("allan_deviation requires dt > 0".into()));
    }
    if series.len() < 3 {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            tau: taus.first().copied().unwrap_or(dt),
            dt,
        });
    }
    let mut phase = Vec::with_capacity(series.len() + 1);
    let mut acc = 0.0;
    phase.push(0.0);
    for y in series {
        acc += y * dt;
        phase.push(acc);
    }

    let mut curve = AllanCurve { taus: vec![], sigmas: vec![], n_samples: vec![] };
    let mut sorted: Vec<f64> = taus.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    for &tau in &sorted {
        let m = (tau / dt).round() as usize;
        if m == 0 {
            return Err(Error::InvalidConfig(format!("tau = {tau} s below sample period {dt} s")));
        }
        let n = phase.len();
        if 2 * m >= n {
            // series too short for this averaging factor: skip (documented)
            continue;
        }
        let terms = n - 2 * m;
        let mut sum = 0.0;
        for i in 0..terms {
            let d = phase[i + 2 * m] - 2.0 * phase[i + m] + phase[i];
            sum += d * d;
        }
        let tau_eff = m as f64 * dt;
        let sigma2 = sum / (2.0 * tau_eff * tau_eff * terms as f64);
        curve.taus.push(tau_eff);
        curve.sigmas.push(sigma2.sqrt());
        curve.n_samples.push(terms);
    }
    if curve.taus.is_empty() {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            tau: sorted.first().copied().unwrap_or(dt),
            dt,
        });
    }
    Ok(curve)
}

/// Inputs to the fractional photon-shot-noise formula.
///
/// `n_red` and `n_green` enter only through the balanced-detection ratio;
/// the absolute red-photon number in the single-shot factor is expressed
/// through the measured optical quantities as N_red = v0 t_a / (gain q_e).
/// `with_detected_photons` keeps the two representations consistent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsnParams {
    /// Interrogated transition frequency, Hz.
    pub f: f64,
    /// Total free-evolution time, s.
    pub tau: f64,
    /// Peak-to-peak fringe contrast before decoherence, in (0, 2].
    pub contrast: f64,
    pub t2: f64,
    pub p: f64,
    /// Photodiode transimpedance, V/A.
    pub gain: f64,
    /// Fluorescence-only voltage reading, V.
    pub v0: f64,
    /// Front readout window duration, s.
    pub t_a: f64,
    /// Back (normalization) window duration, s.
    pub t_b: f64,
    pub n_red: f64,
    pub n_green: f64,
    /// Time of one combined measurement cycle, s.
    pub t_cycle: f64,
    /// Total measurement time, s.
    pub t: f64,
}

impl PsnParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.f, self.tau, self.t2, self.p, self.gain, self.v0, self.t_a, self.t_b,
            self.n_red, self.n_green, self.t_cycle, self.t,
        ];
        if positive.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidConfig("all PSN parameters must be positive".into()));
        }
        if !(self.contrast > 0.0 && self.contrast <= 2.0) {
            return Err(Error::InvalidConfig("contrast must lie in (0, 2]".into()));
        }
        Ok(())
    }

    /// Sets the red-photon number and the matching voltage so that
    /// N_red = v0 t_a / (gain q_e) holds, keeping n_green at the given ratio.
    pub fn with_detected_photons(mut self, n_red: f64, green_over_red: f64) -> Self {
        self.n_red = n_red;
        self.n_green = n_red * green_over_red;
        self.v0 = n_red * self.gain * ELECTRON_CHARGE / self.t_a;
        self
    }
}

/// Fractional photon shot noise: the product of accumulated-phase,
/// ODMR-contrast, single-shot 1/sqrt(N_red), window, balanced-detection,
/// and averaging factors.
pub fn psn_fractional(p: &PsnParams) -> Result<f64> {
    p.validate()?;
    let accumulated_phase = 1.0 / (2.0 * PI * p.f * p.tau);
    let contrast = 1.0 / (0.5 * p.contrast * (-(p.tau / p.t2).powf(p.p)).exp());
    let single_shot = (p.gain * ELECTRON_CHARGE / (p.v0 * p.t_a)).sqrt();
    let window = (1.0 + p.t_a / p.t_b).sqrt();
    let balanced = (1.0 + p.n_red / p.n_green).sqrt();
    let averaging = (p.t_cycle / p.t).sqrt();
    Ok(accumulated_phase * contrast * single_shot * window * balanced * averaging)
}

/// Combined fractional shot noise of the composite observable:
/// sqrt((psn_Q alpha)^2 + (psn_D (1 - alpha))^2).
pub fn psn_composite(psn_d: f64, psn_q: f64, c: &SpinConstants) -> Result<f64> {
    let alpha = crate::clock_composer::alpha_from_lambdas(c)?;
    Ok(((psn_q * alpha).powi(2) + (psn_d * (1.0 - alpha)).powi(2)).sqrt())
}

/// Result of fitting S(tau) = S0 + S1 exp(-(tau/T2)^p) cos(2 pi f tau + phi).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    pub s0: f64,
    pub s1: f64,
    pub t2: f64,
    pub p: f64,
    pub f: f64,
    pub phi: f64,
    /// Root-mean-square residual of the converged fit.
    pub residual_rms: f64,
    /// Diagonal of the estimated parameter covariance, ordered
    /// (S0, S1, T2, p, f, phi).
    pub covariance_diag: [f64; 6],
}

const P_MIN: f64 = 0.5;
const P_MAX: f64 = 3.0;

fn fringe_model(theta: &[f64; 6], tau: f64) -> f64 {
    let [s0, s1, t2, p, f, phi] = *theta;
    s0 + s1 * (-(tau / t2).powf(p)).exp() * (2.0 * PI * f * tau + phi).cos()
}

/// Spectral peak of a detrended series via zero-padded FFT with parabolic
/// interpolation of the peak bin.
fn spectral_peak(taus: &[f64], signals: &[f64], dt: f64) -> f64 {
    let n = signals.len();
    let mean = signals.iter().sum::<f64>() / n as f64;
    let padded = (8 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = signals
        .iter()
        .map(|&s| Complex64::new(s - mean, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(padded)
        .collect();
    FftPlanner::new().plan_fft_forward(padded).process(&mut buf);
    let half = padded / 2;
    let mag: Vec<f64> = buf[..half].iter().map(|c| c.norm()).collect();
    let mut k = 1;
    for (i, m) in mag.iter().enumerate().skip(1) {
        if *m > mag[k] {
            k = i;
        }
    }
    let df = 1.0 / (padded as f64 * dt);
    let refined = if k > 0 && k + 1 < half {
        let (a, b, c) = (mag[k - 1], mag[k], mag[k + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-300 {
            k as f64 + 0.5 * (a - c) / denom
        } else {
            k as f64
        }
    } else {
        k as f64
    };
    let _ = taus;
    (refined * df).max(df)
}

/// Crude envelope decay estimate: log-linear fit of per-period signal
/// extrema, used only to initialize T2.
fn envelope_t2(taus: &[f64], signals: &[f64], f0: f64, s0: f64) -> f64 {
    let span = taus[taus.len() - 1] - taus[0];
    let period = 1.0 / f0;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut i = 0;
    while i < taus.len() {
        let t_start = taus[i];
        let mut peak: f64 = 0.0;
        let mut t_peak = t_start;
        while i < taus.len() && taus[i] < t_start + period {
            let a = (signals[i] - s0).abs();
            if a > peak {
                peak = a;
                t_peak = taus[i];
            }
            i += 1;
        }
        if peak > 1e-12 {
            xs.push(t_peak);
            ys.push(peak.ln());
        }
    }
    if xs.len() < 2 {
        return span;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxy >= 0.0 || sxx == 0.0 {
        // non-decaying envelope: start from a long T2
        return 10.0 * span;
    }
    (-sxx / sxy).clamp(1e-2 * span, 1e2 * span)
}

/// Solves the linear subproblem for fixed (T2, p, f): least-squares
/// coefficients (S0, A, B) of S = S0 + e(tau) (A cos + B sin), with
/// e(tau) = exp(-(tau/T2)^p). Returns coefficients, residual vector, cost.
fn projected_residual(
    nonlin: &[f64; 3],
    taus: &[f64],
    signals: &[f64],
) -> Option<([f64; 3], DVector<f64>, f64)> {
    let [t2, p, f] = *nonlin;
    let n = taus.len();
    let mut design = DMatrix::zeros(n, 3);
    for (i, &tau) in taus.iter().enumerate() {
        let env = (-(tau / t2).powf(p)).exp();
        let arg = 2.0 * PI * f * tau;
        design[(i, 0)] = 1.0;
        design[(i, 1)] = env * arg.cos();
        design[(i, 2)] = env * arg.sin();
    }
    let y = DVector::from_column_slice(signals);
    let coeffs = design.clone().svd(true, true).solve(&y, 1e-14).ok()?;
    let r = &design * &coeffs - &y;
    let cost = r.norm_squared();
    Some(([coeffs[0], coeffs[1], coeffs[2]], r, cost))
}

/// Damped least squares (Levenberg-Marquardt with Marquardt scaling) over
/// the nonlinear parameters (T2, p, f) of the projected problem. Returns
/// refined nonlinear parameters and final cost.
fn lm_refine(mut nonlin: [f64; 3], taus: &[f64], signals: &[f64]) -> ([f64; 3], f64) {
    let tau_span = taus[taus.len() - 1] - taus[0];
    let clamp = |x: &mut [f64; 3]| {
        x[0] = x[0].clamp(1e-3 * tau_span, 1e4 * tau_span);
        x[1] = x[1].clamp(P_MIN + 1e-6, P_MAX);
        x[2] = x[2].abs().max(1e-3 / tau_span);
    };
    clamp(&mut nonlin);
    let n = taus.len();
    let Some((_, mut r, mut cost)) = projected_residual(&nonlin, taus, signals) else {
        return (nonlin, f64::INFINITY);
    };
    let mut lambda = 1e-3;
    for _ in 0..300 {
        let mut jac = DMatrix::zeros(n, 3);
        let mut singular = false;
        for j in 0..3 {
            let step = 1e-6 * nonlin[j].abs().max(1e-12);
            let mut hi = nonlin;
            hi[j] += step;
            let mut lo = nonlin;
            lo[j] -= step;
            let (Some((_, rh, _)), Some((_, rl, _))) = (
                projected_residual(&hi, taus, signals),
                projected_residual(&lo, taus, signals),
            ) else {
                singular = true;
                break;
            };
            for i in 0..n {
                jac[(i, j)] = (rh[i] - rl[i]) / (2.0 * step);
            }
        }
        if singular {
            break;
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut improved = false;
        for _ in 0..15 {
            let mut a = jtj.clone();
            for j in 0..3 {
                a[(j, j)] += lambda * jtj[(j, j)].max(1e-30);
            }
            let Some(delta) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = nonlin;
            for j in 0..3 {
                trial[j] -= delta[j];
            }
            clamp(&mut trial);
            let Some((_, rt, ct)) = projected_residual(&trial, taus, signals) else {
                lambda *= 10.0;
                continue;
            };
            if ct < cost {
                let rel = (cost - ct) / cost.max(1e-300);
                let step_rel = (0..3)
                    .map(|j| (trial[j] - nonlin[j]).abs() / nonlin[j].abs().max(1e-300))
                    .fold(0.0_f64, f64::max);
                nonlin = trial;
                r = rt;
                cost = ct;
                lambda = (lambda * 0.3).max(1e-14);
                improved = true;
                if rel < 1e-14 && step_rel < 1e-10 {
                    return (nonlin, cost);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (nonlin, cost)
}

/// Fits the damped fringe model to a scan. Initialization uses the spectral
/// peak for the frequency and a log-envelope fit for T2; several stretch
/// and frequency starts guard against the multimodal landscape.
pub fn fit_fringe(scan: &FringeScan) -> Result<FringeFit> {
    scan.validate()?;
    let n = scan.taus.len();
    if n < 16 {
        return Err(Error::InvalidConfig("fringe fit needs at least 16 samples".into()));
    }
    let dt = scan.uniform_step()?;
    let taus = &scan.taus;
    let signals = &scan.signals;
    let s0 = signals.iter().sum::<f64>() / n as f64;
    let f0 = spectral_peak(taus, signals, dt);
    let t2_0 = envelope_t2(taus, signals, f0, s0);
    let amp0 = signals
        .iter()
        .map(|s| (s - s0).abs())
        .fold(0.0_f64, f64::max)
        .max(1e-12);

    let df = 1.0 / ((n as f64) * dt);
    let mut best: Option<([f64; 3], f64)> = None;
    for &p0 in &[1.0, 1.5, 2.0] {
        for &fc in &[f0, f0 - 0.5 * df, f0 + 0.5 * df] {
            if fc <= 0.0 {
                continue;
            }
            let (nonlin, cost) = lm_refine([t2_0, p0, fc], taus, signals);
            if best.as_ref().is_none_or(|(_, c)| cost < *c) {
                best = Some((nonlin, cost));
            }
        }
    }
    let (nonlin, cost) = best.unwrap();
    let Some((lin, _, _)) = projected_residual(&nonlin, taus, signals) else {
        return Err(Error::FitDiverged {
            details: format!(
                "linear subproblem singular at T2 = {:.4e} s, p = {:.3}, f = {:.6e} Hz",
                nonlin[0], nonlin[1], nonlin[2]
            ),
        });
    };
    // S0 + e (A cos + B sin) == S0 + S1 e cos(2 pi f tau + phi)
    let theta = [
        lin[0],
        (lin[1] * lin[1] + lin[2] * lin[2]).sqrt(),
        nonlin[0],
        nonlin[1],
        nonlin[2],
        (-lin[2]).atan2(lin[1]),
    ];

    let rms = (cost / n as f64).sqrt();
    let signal_scale = amp0;
    if !cost.is_finite() || rms > 0.9 * signal_scale {
        return Err(Error::FitDiverged {
            details: format!(
                "residual rms {rms:.3e} comparable to signal scale {signal_scale:.3e}; \
                 initialization: S0 = {s0:.4e}, S1 = {amp0:.4e}, T2 = {t2_0:.4e} s, \
                 f = {f0:.6e} Hz"
            ),
        });
    }

    // covariance from the converged Jacobian: sigma^2 (J^T J)^-1
    let full_residual = |th: &[f64; 6]| -> DVector<f64> {
        DVector::from_iterator(
            n,
            taus.iter().zip(signals).map(|(&t, &s)| fringe_model(th, t) - s),
        )
    };
    let r = full_residual(&theta);
    let mut jac = DMatrix::zeros(n, 6);
    for j in 0..6 {
        let step = 1e-7 * theta[j].abs().max(1e-12);
        let mut bumped = theta;
        bumped[j] += step;
        let rb = full_residual(&bumped);
        for i in 0..n {
            jac[(i, j)] = (rb[i] - r[i]) / step;
        }
    }
    let dof = (n.saturating_sub(6)).max(1) as f64;
    let sigma2 = cost / dof;
    let jtj = jac.transpose() * &jac;
    let cov_diag = match jtj.try_inverse() {
        Some(inv) => std::array::from_fn(|j| sigma2 * inv[(j, j)]),
        None => [f64::NAN; 6],
    };

    Ok(FringeFit {
        s0: theta[0],
        s1: theta[1],
        t2: theta[2],
        p: theta[3],
        f: theta[4],
        phi: theta[5],
        residual_rms: rms,
        covariance_diag: cov_diag,
    })
}
