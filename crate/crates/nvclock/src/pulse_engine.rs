//! Exact three-level rotating-frame dynamics of the two-tone
//! pi/2 - 2pi - pi/2 sequence, the eight-configuration phase-cycling scheme,
//! deterministic ensemble averaging over Rabi inhomogeneity, and spectral
//! analysis of tau scans.
//!
//! Basis ordering is (|+1>, |0>, |-1>): the pump tone couples |0> <-> |+1>,
//! the Stokes tone couples |0> <-> |-1>. Pulses are treated as zero-duration
//! area-only operations; detunings enter through the free-evolution phases
//! only.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type C64 = Complex64;

/// A 3x3 complex propagator.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagator3(pub Matrix3<C64>);

impl Propagator3 {
    pub fn identity() -> Self {
        Propagator3(Matrix3::identity())
    }

    /// Max-norm deviation of U U^dagger from the identity.
    pub fn unitarity_defect(&self) -> f64 {
        let p = &self.0 * self.0.adjoint();
        let mut worst = 0.0f64;
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
                worst = worst.max((p[(r, c)] - expect).norm());
            }
        }
        worst
    }

    pub fn apply(&self, state: &Vector3<C64>) -> Vector3<C64> {
        &self.0 * state
    }
}

/// Closed-form propagator of an overlapping two-tone rectangular pulse of
/// total area `lambda` (radians) with equal pump and Stokes amplitudes.
pub fn propagator_pulse(lambda: f64) -> Propagator3 {
    let c = (0.5 * lambda).cos();
    let s = (0.5 * lambda).sin();
    let re = |x: f64| C64::new(x, 0.0);
    let im = |x: f64| C64::new(0.0, x);
    let off = im(-s / 2.0f64.sqrt());
    Propagator3(Matrix3::new(
        re(0.5 * (c + 1.0)), off,   re(0.5 * (c - 1.0)),
        off,                 re(c), off,
        re(0.5 * (c - 1.0)), off,   re(0.5 * (c + 1.0)),
    ))
}

/// Diagonal free-evolution operator diag(1, e^{-i phi_p}, e^{-i (phi_p - phi_s)}).
pub fn free_evolution(phi_p: f64, phi_s: f64) -> Propagator3 {
    let mut m = Matrix3::zeros();
    m[(0, 0)] = C64::new(1.0, 0.0);
    m[(1, 1)] = C64::from_polar(1.0, -phi_p);
    m[(2, 2)] = C64::from_polar(1.0, -(phi_p - phi_s));
    Propagator3(m)
}

/// Controllable phases of the second and third pulse pair. The first pulse
/// phases are fixed to zero without loss of generality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub p2: f64,
    pub s2: f64,
    pub p3: f64,
    pub s3: f64,
}

impl PhaseConfig {
    pub const ZERO: PhaseConfig = PhaseConfig { p2: 0.0, s2: 0.0, p3: 0.0, s3: 0.0 };
}

/// One row of a phase-cycling scheme: a phase configuration and its signed
/// weight in the combined signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleRow {
    pub phases: PhaseConfig,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCycleScheme {
    pub rows: Vec<CycleRow>,
}

impl PhaseCycleScheme {
    /// The canonical eight-configuration scheme.
    pub fn ttzfs8() -> Self {
        let h = 0.5 * PI;
        let rows = [
            (0.0, 0.0, 0.0, 0.0, 1.0),
            (0.0, PI, 0.0, 0.0, -1.0),
            (PI, 0.0, 0.0, 0.0, -1.0),
            (PI, PI, 0.0, 0.0, 1.0),
            (h, h, PI, PI, -1.0),
            (h, -h, PI, PI, 1.0),
            (-h, h, PI, PI, 1.0),
            (-h, -h, PI, PI, -1.0),
        ]
        .iter()
        .map(|&(p2, s2, p3, s3, w)| CycleRow {
            phases: PhaseConfig { p2, s2, p3, s3 },
            weight: w / 8.0,
        })
        .collect();
        PhaseCycleScheme { rows }
    }

    /// Phase-shifted copy used for the quadrature (y) readout: +45 degrees on
    /// both tones of the echo pulse and +90 degrees on both tones of the
    /// final pulse.
    pub fn quadrature_shifted(&self) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| CycleRow {
                phases: PhaseConfig {
                    p2: r.phases.p2 + 0.25 * PI,
                    s2: r.phases.s2 + 0.25 * PI,
                    p3: r.phases.p3 + 0.5 * PI,
                    s3: r.phases.s3 + 0.5 * PI,
                },
                weight: r.weight,
            })
            .collect();
        PhaseCycleScheme { rows }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::InvalidConfig("phase-cycle scheme has no rows".into()));
        }
        let sum: f64 = self.rows.iter().map(|r| r.weight).sum();
        if sum.abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "phase-cycle weights must sum to zero, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Settings of one TTZFS sequence evaluation.
///
/// `omega1`/`omega2` are the angular frequencies (rad/s) accumulated by the
/// pump and Stokes coherences during free evolution. For detuning fringes
/// these are 2*pi times the detunings; for full-frequency tau scans (pulse
/// envelopes and phases translated together) they are 2*pi*f1 and 2*pi*f2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceSettings {
    pub omega1: f64,
    pub omega2: f64,
    /// Areas of the three pulses in radians; ideal is [pi/2, 2*pi, pi/2].
    pub areas: [f64; 3],
    /// Common multiplier on all three areas (models Rabi-amplitude error).
    pub area_scale: f64,
    /// Fraction of the population prepared in |0>; the remainder idles and
    /// contributes a constant background.
    pub prep_fidelity: f64,
}

impl SequenceSettings {
    pub fn ideal(omega1: f64, omega2: f64) -> Self {
        SequenceSettings {
            omega1,
            omega2,
            areas: [0.5 * PI, 2.0 * PI, 0.5 * PI],
            area_scale: 1.0,
            prep_fidelity: 1.0,
        }
    }
}

/// Precomputed pulse propagators for repeated evaluation across a tau grid.
/// Pulse propagators depend only on the areas; tau and the pulse phases
/// enter through the diagonal free-evolution operators.
pub struct SequenceEvaluator {
    omega1: f64,
    omega2: f64,
    prep_fidelity: f64,
    first_applied: Vector3<C64>,
    middle: Matrix3<C64>,
    last: Matrix3<C64>,
}

impl SequenceEvaluator {
    pub fn new(seq: &SequenceSettings) -> Self {
        let s = seq.area_scale;
        let first = propagator_pulse(seq.areas[0] * s).0;
        let initial = Vector3::new(C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0));
        SequenceEvaluator {
            omega1: seq.omega1,
            omega2: seq.omega2,
            prep_fidelity: seq.prep_fidelity,
            first_applied: first * initial,
            middle: propagator_pulse(seq.areas[1] * s).0,
            last: propagator_pulse(seq.areas[2] * s).0,
        }
    }

    /// |0>-population readout after the full sequence at total free-evolution
    /// time `tau` with the given pulse phases.
    pub fn signal(&self, tau: f64, phases: &PhaseConfig) -> f64 {
        let half = 0.5 * tau;
        let phi_p12 = self.omega1 * half - phases.p2;
        let phi_s12 = self.omega2 * half - phases.s2;
        let phi_p23 = self.omega1 * half + phases.p2 - phases.p3;
        let phi_s23 = self.omega2 * half + phases.s2 - phases.s3;

        let mut psi = self.first_applied;
        apply_free(&mut psi, phi_p12, phi_s12);
        psi = &self.middle * psi;
        apply_free(&mut psi, phi_p23, phi_s23);
        psi = &self.last * psi;
        let p0 = psi[1].norm_sqr();
        self.prep_fidelity * p0 + (1.0 - self.prep_fidelity)
    }
}

#[inline]
fn apply_free(psi: &mut Vector3<C64>, phi_p: f64, phi_s: f64) {
    psi[1] *= C64::from_polar(1.0, -phi_p);
    psi[2] *= C64::from_polar(1.0, -(phi_p - phi_s));
}

/// Single-configuration TTZFS signal.
pub fn ttzfs_signal(seq: &SequenceSettings, tau: f64, phases: &PhaseConfig) -> f64 {
    SequenceEvaluator::new(seq).signal(tau, phases)
}

/// Weighted sum of the signal over all rows of a phase-cycling scheme.
pub fn ttzfs8_signal(seq: &SequenceSettings, tau: f64, scheme: &PhaseCycleScheme) -> f64 {
    let eval = SequenceEvaluator::new(seq);
    scheme.rows.iter().map(|r| r.weight * eval.signal(tau, &r.phases)).sum()
}

/// Gaussian distribution of the common Rabi-amplitude scale, parameterized by
/// its full width at half maximum as a fraction of the nominal amplitude.
/// Averaging uses fixed Gauss-Hermite quadrature, so results are
/// reproducible bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiDistribution {
    pub fwhm_frac: f64,
    pub nodes: usize,
}

impl Default for RabiDistribution {
    fn default() -> Self {
        RabiDistribution { fwhm_frac: 0.164, nodes: 64 }
    }
}

const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949_3; // 2*sqrt(2 ln 2)

impl RabiDistribution {
    /// Quadrature abscissae (area scales) and weights; weights sum to one.
    pub fn quadrature(&self) -> Vec<(f64, f64)> {
        if self.fwhm_frac == 0.0 || self.nodes <= 1 {
            return vec![(1.0, 1.0)];
        }
        let sigma = self.fwhm_frac / FWHM_TO_SIGMA;
        gauss_hermite(self.nodes)
            .into_iter()
            .map(|(x, w)| (1.0 + 2.0f64.sqrt() * sigma * x, w))
            .collect()
    }
}

/// Gauss-Hermite nodes and probabilists'-normalized weights (weights sum to
/// one) via the Golub-Welsch tridiagonal eigenproblem.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let mut j = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i - 1, i)] = b;
        j[(i, i - 1)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs
}

/// Deterministic quadrature average of `signal_fn` over the Rabi-scale
/// distribution. `signal_fn` receives the area scale.
pub fn ensemble_average<F: Fn(f64) -> f64>(signal_fn: F, dist: &RabiDistribution) -> f64 {
    dist.quadrature().iter().map(|&(s, w)| w * signal_fn(s)).sum()
}

/// A tau scan of the sequence signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeScan {
    pub taus: Vec<f64>,
    pub signals: Vec<f64>,
}

impl FringeScan {
    pub fn validate(&self) -> Result<()> {
        if self.taus.len() != self.signals.len() {
            return Err(Error::InvalidConfig("tau and signal lengths differ".into()));
        }
        if self.taus.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("taus must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Grid step, or an error if the grid is not uniform to 1 ppm.
    pub fn uniform_step(&self) -> Result<f64> {
        if self.taus.len() < 2 {
            return Err(Error::InvalidConfig("scan needs at least two points".into()));
        }
        let dt = self.taus[1] - self.taus[0];
        for (i, w) in self.taus.windows(2).enumerate() {
            let step = w[1] - w[0];
            if ((step - dt) / dt).abs() > 1e-6 {
                return Err(Error::NonUniformGrid { index: i + 1, step, expected: dt });
            }
        }
        Ok(dt)
    }
}

/// How a scan is produced: either every configuration averaged with weights
/// (cycled) or a single zero-phase configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    SinglePhase,
    Cycled,
}

/// Scans tau over a uniform grid, averaging over the Rabi distribution.
///
/// In `SinglePhase` mode the zero-phase row is used and the result is scaled
/// by the number of scheme rows, matching the convention that keeps the
/// desired-peak amplitude comparable between the two modes.
pub fn scan_signal(
    seq: &SequenceSettings,
    scheme: &PhaseCycleScheme,
    dist: &RabiDistribution,
    tau0: f64,
    dtau: f64,
    n: usize,
    mode: ScanMode,
) -> Result<FringeScan> {
    if dtau <= 0.0 || n < 2 {
        return Err(Error::InvalidConfig("scan needs dtau > 0 and n >= 2".into()));
    }
    scheme.validate()?;
    let quad = dist.quadrature();
    let evals: Vec<SequenceEvaluator> = quad
        .iter()
        .map(|&(s, _)| {
            let mut seq_s = *seq;
            seq_s.area_scale = seq.area_scale * s;
            SequenceEvaluator::new(&seq_s)
        })
        .collect();
    let taus: Vec<f64> = (0..n).map(|i| tau0 + i as f64 * dtau).collect();
    let signals: Vec<f64> = taus
        .iter()
        .map(|&tau| match mode {
            ScanMode::SinglePhase => {
                let per_scale =
                    |k: usize| evals[k].signal(tau, &PhaseConfig::ZERO) * scheme.rows.len() as f64;
                quad.iter().enumerate().map(|(k, &(_, w))| w * per_scale(k)).sum()
            }
            ScanMode::Cycled => quad
                .iter()
                .enumerate()
                .map(|(k, &(_, w))| {
                    let s: f64 = scheme
                        .rows
                        .iter()
                        .map(|r| r.weight * evals[k].signal(tau, &r.phases))
                        .sum();
                    w * s
                })
                .sum(),
        })
        .collect();
    Ok(FringeScan { taus, signals })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumWindow {
    Hann,
    Rectangular,
}

/// Discrete-Fourier amplitude spectrum of the mean-removed signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

impl Spectrum {
    /// Amplitude at the bin nearest `freq`.
    pub fn amplitude_near(&self, freq: f64) -> f64 {
        let df = self.freqs[1] - self.freqs[0];
        let k = ((freq / df).round() as usize).min(self.amplitudes.len() - 1);
        // guard against half-bin rounding: take the local max over +-1 bin
        let lo = k.saturating_sub(1);
        let hi = (k + 1).min(self.amplitudes.len() - 1);
        self.amplitudes[lo..=hi].iter().cloned().fold(0.0, f64::max)
    }
}

/// Windowed, zero-padded amplitude spectrum of a uniform tau scan.
pub fn scan_and_spectrum(
    scan: &FringeScan,
    window: SpectrumWindow,
    zero_pad: usize,
) -> Result<Spectrum> {
    scan.validate()?;
    let dt = scan.uniform_step()?;
    let n = scan.signals.len();
    let mean = scan.signals.iter().sum::<f64>() / n as f64;
    let win: Vec<f64> = match window {
        SpectrumWindow::Rectangular => vec![1.0; n],
        SpectrumWindow::Hann => (0..n)
            .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / (n as f64 - 1.0)).cos()))
            .collect(),
    };
    let win_sum: f64 = win.iter().sum();
    let m = (n * zero_pad.max(1)).next_power_of_two();
    let mut buf: Vec<C64> = (0..m)
        .map(|i| {
            if i < n {
                C64::new((scan.signals[i] - mean) * win[i], 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect();
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let nyquist = m / 2;
    let freqs = (0..=nyquist).map(|k| k as f64 / (m as f64 * dt)).collect();
    let amplitudes = buf[..=nyquist].iter().map(|z| 2.0 * z.norm() / win_sum).collect();
    Ok(Spectrum { freqs, amplitudes })
}

/// One phase-combination term alpha_j: coefficients of omega1*tau and
/// omega2*tau (in halves to stay integral) and integer coefficients of the
/// four controllable phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PhaseTerm {
    pub label: &'static str,
    /// coefficient of omega1*tau in units of 1/2
    pub w1_half: i32,
    /// coefficient of omega2*tau in units of 1/2
    pub w2_half: i32,
    pub p2: i32,
    pub s2: i32,
    pub p3: i32,
    pub s3: i32,
}

impl PhaseTerm {
    pub fn eval(&self, omega1: f64, omega2: f64, tau: f64, ph: &PhaseConfig) -> f64 {
        0.5 * (self.w1_half as f64 * omega1 + self.w2_half as f64 * omega2) * tau
            + self.p2 as f64 * ph.p2
            + self.s2 as f64 * ph.s2
            + self.p3 as f64 * ph.p3
            + self.s3 as f64 * ph.s3
    }

    /// Oscillation frequency in Hz for tone frequencies `f1`, `f2`.
    pub fn frequency(&self, f1: f64, f2: f64) -> f64 {
        (0.5 * (self.w1_half as f64 * f1 + self.w2_half as f64 * f2)).abs()
    }
}

/// The three combinations present with ideal pulse areas.
pub const IDEAL_TERMS: [PhaseTerm; 3] = [
    PhaseTerm { label: "alpha1", w1_half: 1, w2_half: 1, p2: -1, s2: 1, p3: 0, s3: -1 },
    PhaseTerm { label: "alpha2", w1_half: 1, w2_half: 1, p2: 1, s2: -1, p3: -1, s3: 0 },
    PhaseTerm { label: "alpha3", w1_half: 0, w2_half: 0, p2: -2, s2: 2, p3: 1, s3: -1 },
];

/// The additional combinations that appear for non-ideal pulse areas.
pub const ERROR_TERMS: [PhaseTerm; 21] = [
    PhaseTerm { label: "alpha4", w1_half: 1, w2_half: 0, p2: -1, s2: 0, p3: 0, s3: 0 },
    PhaseTerm { label: "alpha5", w1_half: 1, w2_half: 0, p2: 1, s2: 0, p3: -1, s3: 0 },
    PhaseTerm { label: "alpha6", w1_half: 0, w2_half: 1, p2: 0, s2: -1, p3: 0, s3: 0 },
    PhaseTerm { label: "alpha7", w1_half: 0, w2_half: 1, p2: 0, s2: 1, p3: 0, s3: -1 },
    PhaseTerm { label: "alpha8", w1_half: 2, w2_half: 0, p2: 0, s2: 0, p3: -1, s3: 0 },
    PhaseTerm { label: "alpha9", w1_half: 0, w2_half: 0, p2: -2, s2: 0, p3: 1, s3: 0 },
    PhaseTerm { label: "alpha10", w1_half: 1, w2_half: -1, p2: -1, s2: 1, p3: 0, s3: 0 },
    PhaseTerm { label: "alpha11", w1_half: 1, w2_half: -1, p2: -1, s2: -1, p3: 0, s3: 1 },
    PhaseTerm { label: "alpha12", w1_half: 1, w2_half: -1, p2: 1, s2: 1, p3: -1, s3: 0 },
    PhaseTerm { label: "alpha13", w1_half: 1, w2_half: -1, p2: 1, s2: -1, p3: -1, s3: 1 },
    PhaseTerm { label: "alpha14", w1_half: 0, w2_half: 2, p2: 0, s2: 0, p3: 0, s3: -1 },
    PhaseTerm { label: "alpha15", w1_half: 0, w2_half: 0, p2: 0, s2: -2, p3: 0, s3: 1 },
    PhaseTerm { label: "alpha16", w1_half: 0, w2_half: 1, p2: 2, s2: -1, p3: -1, s3: 0 },
    PhaseTerm { label: "alpha17", w1_half: -1, w2_half: 2, p2: 1, s2: 0, p3: 0, s3: -1 },
    PhaseTerm { label: "alpha18", w1_half: -1, w2_half: 2, p2: -1, s2: 0, p3: 1, s3: -1 },
    PhaseTerm { label: "alpha19", w1_half: 2, w2_half: -1, p2: 0, s2: 1, p3: -1, s3: 0 },
    PhaseTerm { label: "alpha20", w1_half: 2, w2_half: -1, p2: 0, s2: -1, p3: -1, s3: 1 },
    PhaseTerm { label: "alpha21", w1_half: 0, w2_half: 1, p2: -2, s2: 1, p3: 1, s3: -1 },
    PhaseTerm { label: "alpha22", w1_half: 1, w2_half: 0, p2: -1, s2: 2, p3: 0, s3: -1 },
    PhaseTerm { label: "alpha23", w1_half: 1, w2_half: 0, p2: 1, s2: -2, p3: -1, s3: 1 },
    PhaseTerm { label: "alpha24", w1_half: 2, w2_half: -2, p2: 0, s2: 0, p3: -1, s3: 1 },
];

/// A term detected by the decomposition oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectedTerm {
    pub term: PhaseTerm,
    pub amplitude: f64,
}

/// Outcome of the phase-term decomposition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermDecomposition {
    pub detected: Vec<DetectedTerm>,
    /// All fitted amplitudes, in table order (ideal terms first).
    pub amplitudes: Vec<f64>,
    /// Root-mean-square fit residual.
    pub residual_rms: f64,
    /// Set when the residual exceeds the conclusiveness threshold.
    pub inconclusive: bool,
}

/// Decomposes the sequence signal into the candidate phase combinations by
/// linear least squares over a deterministic grid of pulse phases and tau
/// values. Used as a test oracle, not a runtime component.
///
/// `detect_threshold` is the relative amplitude (to the largest term) above
/// which a term is reported as present.
pub fn phase_term_oracle(
    seq: &SequenceSettings,
    n_phase_samples: usize,
    n_tau_samples: usize,
    detect_threshold: f64,
) -> Result<TermDecomposition> {
    let terms: Vec<PhaseTerm> =
        IDEAL_TERMS.iter().chain(ERROR_TERMS.iter()).cloned().collect();
    let eval = SequenceEvaluator::new(seq);
    // deterministic low-discrepancy-ish phase grid
    let mut samples: Vec<(f64, PhaseConfig)> = Vec::new();
    let golden = 0.618_033_988_749_895_f64;
    let period = 4.0 * PI / (seq.omega1 + seq.omega2).abs().max(1.0);
    for i in 0..n_phase_samples {
        let u = |k: u32| 2.0 * PI * ((i as f64 * golden * k as f64 + 0.37 * k as f64).fract());
        let ph = PhaseConfig { p2: u(1), s2: u(2), p3: u(3), s3: u(5) };
        for j in 0..n_tau_samples {
            let tau = period * (j as f64 + 1.0) * (1.0 + golden * i as f64).fract().max(0.05);
            samples.push((tau, ph));
        }
    }
    let rows = samples.len();
    let cols = 1 + 2 * terms.len();
    let mut a = nalgebra::DMatrix::<f64>::zeros(rows, cols);
    let mut b = nalgebra::DVector::<f64>::zeros(rows);
    for (r, (tau, ph)) in samples.iter().enumerate() {
        a[(r, 0)] = 1.0;
        for (t, term) in terms.iter().enumerate() {
            let alpha = term.eval(seq.omega1, seq.omega2, *tau, ph);
            a[(r, 1 + 2 * t)] = alpha.cos();
            a[(r, 2 + 2 * t)] = alpha.sin();
        }
        b[r] = eval.signal(*tau, ph);
    }
    let svd = a.clone().svd(true, true);
    let x = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::FitDiverged { details: e.to_string() })?;
    let residual_rms = ((&a * &x) - &b).norm() / (rows as f64).sqrt();
    let amplitudes: Vec<f64> = (0..terms.len())
        .map(|t| x[1 + 2 * t].hypot(x[2 + 2 * t]))
        .collect();
    let max_amp = amplitudes.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let detected = terms
        .iter()
        .zip(&amplitudes)
        .filter(|(_, &amp)| amp > detect_threshold * max_amp)
        .map(|(term, &amplitude)| DetectedTerm { term: *term, amplitude })
        .collect();
    Ok(TermDecomposition {
        detected,
        amplitudes,
        residual_rms,
        inconclusive: residual_rms > 1e-6,
    })
}

/// Least-squares amplitudes of cos/sin tones at the given frequencies over a
/// tau grid. Exact for signals that are finite sums of those tones, so it
/// measures suppression without FFT leakage.
pub fn tone_amplitudes(taus: &[f64], signals: &[f64], freqs_hz: &[f64]) -> Result<Vec<f64>> {
    if taus.len() != signals.len() || taus.len() < 2 * freqs_hz.len() + 1 {
        return Err(Error::InvalidConfig("tone fit needs more samples than parameters".into()));
    }
    let rows = taus.len();
    let cols = 1 + 2 * freqs_hz.len();
    let mut a = nalgebra::DMatrix::<f64>::zeros(rows, cols);
    let mut b = nalgebra::DVector::<f64>::zeros(rows);
    for r in 0..rows {
        a[(r, 0)] = 1.0;
        for (t, &f) in freqs_hz.iter().enumerate() {
            let phase = 2.0 * PI * f * taus[r];
            a[(r, 1 + 2 * t)] = phase.cos();
            a[(r, 2 + 2 * t)] = phase.sin();
        }
        b[r] = signals[r];
    }
    let svd = a.svd(true, true);
    let x = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::FitDiverged { details: e.to_string() })?;
    Ok((0..freqs_hz.len()).map(|t| x[1 + 2 * t].hypot(x[2 + 2 * t])).collect())
}

/// The distinct oscillation frequencies of all candidate terms, deduplicated.
pub fn candidate_frequencies(f1: f64, f2: f64) -> Vec<f64> {
    let mut freqs: Vec<f64> = IDEAL_TERMS
        .iter()
        .chain(ERROR_TERMS.iter())
        .map(|t| t.frequency(f1, f2))
        .filter(|f| *f > 0.0)
        .collect();
    freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    freqs.dedup_by(|a, b| ((*a - *b) / *b).abs() < 1e-9);
    freqs
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const F1: f64 = 5.0892e6;
    const F2: f64 = 4.7964e6;

    fn tones() -> SequenceSettings {
        SequenceSettings::ideal(2.0 * PI * F1, 2.0 * PI * F2)
    }

    fn tau_grid(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 * dt).collect()
    }

    #[test]
    fn pulse_zero_area_is_identity() {
        let u = propagator_pulse(0.0);
        assert!((u.0 - Matrix3::<C64>::identity()).norm() < 1e-15);
    }

    #[test]
    fn pulse_two_pi_swaps_with_sign() {
        let u = propagator_pulse(2.0 * PI).0;
        let expect = Matrix3::new(
            C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(-1.0, 0.0),
            C64::new(0.0, 0.0), C64::new(-1.0, 0.0), C64::new(0.0, 0.0),
            C64::new(-1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0),
        );
        assert!((u - expect).norm() < 1e-14);
    }

    #[test]
    fn pulse_half_pi_splits_population() {
        let u = propagator_pulse(0.5 * PI);
        let psi = u.apply(&Vector3::new(
            C64::new(0.0, 0.0),
            C64::new(1.0, 0.0),
            C64::new(0.0, 0.0),
        ));
        assert_relative_eq!(psi[0].norm_sqr(), 0.25, epsilon = 1e-14);
        assert_relative_eq!(psi[1].norm_sqr(), 0.5, epsilon = 1e-14);
        assert_relative_eq!(psi[2].norm_sqr(), 0.25, epsilon = 1e-14);
    }

    #[test]
    fn free_evolution_special_values() {
        let id = free_evolution(0.0, 0.0);
        assert!((id.0 - Matrix3::<C64>::identity()).norm() < 1e-15);
        let u = free_evolution(PI, 0.0).0;
        assert_relative_eq!(u[(1, 1)].re, -1.0, epsilon = 1e-15);
        assert_relative_eq!(u[(2, 2)].re, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn ideal_signal_is_pure_half_sum_tone() {
        let seq = tones();
        let taus = tau_grid(2048, 20e-9);
        let eval = SequenceEvaluator::new(&seq);
        let sig: Vec<f64> = taus.iter().map(|&t| eval.signal(t, &PhaseConfig::ZERO)).collect();
        let freqs = candidate_frequencies(F1, F2);
        let amps = tone_amplitudes(&taus, &sig, &freqs).unwrap();
        let half_sum = 0.5 * (F1 + F2);
        for (f, a) in freqs.iter().zip(&amps) {
            if ((f - half_sum) / half_sum).abs() < 1e-9 {
                assert!(*a > 0.4, "main tone missing: {a}");
            } else {
                assert!(*a < 1e-10, "unexpected tone at {f} Hz with amplitude {a}");
            }
        }
    }

    #[test]
    fn ideal_zero_detuning_signal_is_constant() {
        let seq = SequenceSettings::ideal(0.0, 0.0);
        let eval = SequenceEvaluator::new(&seq);
        let s0 = eval.signal(1e-6, &PhaseConfig::ZERO);
        for i in 2..20 {
            let s = eval.signal(i as f64 * 1e-6, &PhaseConfig::ZERO);
            assert_relative_eq!(s, s0, epsilon = 1e-12);
        }
    }

    #[test]
    fn area_error_brings_in_table_terms() {
        let mut seq = tones();
        seq.area_scale = 1.1;
        let taus = tau_grid(4096, 20e-9);
        let eval = SequenceEvaluator::new(&seq);
        let sig: Vec<f64> = taus.iter().map(|&t| eval.signal(t, &PhaseConfig::ZERO)).collect();
        for f in [0.5 * F1, 0.5 * F2, F1, F2, 0.5 * (F1 - F2)] {
            let amp = tone_amplitudes(&taus, &sig, &[f]).unwrap()[0];
            assert!(amp > 1e-4, "expected error tone at {f} Hz, got {amp}");
        }
    }

    #[test]
    fn cycling_restores_pure_tone_under_area_error() {
        let mut seq = tones();
        seq.area_scale = 1.2;
        let scheme = PhaseCycleScheme::ttzfs8();
        let taus = tau_grid(4096, 20e-9);
        let sig: Vec<f64> =
            taus.iter().map(|&t| ttzfs8_signal(&seq, t, &scheme)).collect();
        let freqs = candidate_frequencies(F1, F2);
        let amps = tone_amplitudes(&taus, &sig, &freqs).unwrap();
        let half_sum = 0.5 * (F1 + F2);
        let main = freqs
            .iter()
            .zip(&amps)
            .find(|(f, _)| ((*f - half_sum) / half_sum).abs() < 1e-9)
            .unwrap()
            .1;
        for (f, a) in freqs.iter().zip(&amps) {
            if ((f - half_sum) / half_sum).abs() >= 1e-9 {
                let db = 20.0 * (a / main).log10();
                assert!(db < -120.0, "tone at {f} Hz only suppressed to {db} dB");
            }
        }
    }

    #[test]
    fn perfect_echo_needs_no_cycling() {
        let mut seq = tones();
        seq.areas = [0.5 * PI * 1.3, 2.0 * PI, 0.5 * PI * 0.7];
        let taus = tau_grid(4096, 20e-9);
        let eval = SequenceEvaluator::new(&seq);
        let sig: Vec<f64> = taus.iter().map(|&t| eval.signal(t, &PhaseConfig::ZERO)).collect();
        let freqs = candidate_frequencies(F1, F2);
        let amps = tone_amplitudes(&taus, &sig, &freqs).unwrap();
        let half_sum = 0.5 * (F1 + F2);
        for (f, a) in freqs.iter().zip(&amps) {
            if ((f - half_sum) / half_sum).abs() >= 1e-9 {
                assert!(*a < 1e-10, "unexpected tone at {f} Hz: {a}");
            }
        }
    }

    #[test]
    fn half_difference_insensitivity() {
        let d1 = 2.0 * PI * 40e3;
        let d2 = 2.0 * PI * 25e3;
        let x = 0.1 * d1;
        let a = SequenceSettings::ideal(d1, d2);
        let b = SequenceSettings::ideal(d1 + x, d2 - x);
        let ph = PhaseConfig { p2: 0.4, s2: 1.1, p3: 2.2, s3: 0.9 };
        let ea = SequenceEvaluator::new(&a);
        let eb = SequenceEvaluator::new(&b);
        for i in 0..200 {
            let tau = i as f64 * 0.5e-6;
            assert!((ea.signal(tau, &ph) - eb.signal(tau, &ph)).abs() < 1e-9);
        }
    }

    #[test]
    fn ensemble_average_limits() {
        let seq = tones();
        let eval = SequenceEvaluator::new(&seq);
        let zero = RabiDistribution { fwhm_frac: 0.0, nodes: 64 };
        let f = |s: f64| {
            let mut q = seq;
            q.area_scale = s;
            SequenceEvaluator::new(&q).signal(3.7e-6, &PhaseConfig::ZERO)
        };
        assert_eq!(ensemble_average(&f, &zero), eval.signal(3.7e-6, &PhaseConfig::ZERO));
        // linearity in the signal function
        let dist = RabiDistribution::default();
        let a = ensemble_average(&f, &dist);
        let b = ensemble_average(|s| 2.0 * f(s) + 1.0, &dist);
        assert_relative_eq!(b, 2.0 * a + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gauss_hermite_moments() {
        for n in [4usize, 16, 64] {
            let q = gauss_hermite(n);
            let w: f64 = q.iter().map(|p| p.1).sum();
            assert_relative_eq!(w, 1.0, epsilon = 1e-12);
            let m2: f64 = q.iter().map(|&(x, w)| w * x * x).sum();
            assert_relative_eq!(m2, 0.5, epsilon = 1e-10); // exp(-x^2) weight
        }
    }

    #[test]
    fn spectrum_of_pure_tone_peaks_at_tone() {
        let f0 = 4.94e6;
        let n = 65536;
        let dt = 50e-12;
        let taus = tau_grid(n, dt);
        let signals: Vec<f64> =
            taus.iter().map(|&t| 0.3 * (2.0 * PI * f0 * t).cos()).collect();
        let scan = FringeScan { taus, signals };
        let spec = scan_and_spectrum(&scan, SpectrumWindow::Hann, 2).unwrap();
        let peak_idx = spec
            .amplitudes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let df = spec.freqs[1] - spec.freqs[0];
        assert!((spec.freqs[peak_idx] - f0).abs() <= df);
        assert_relative_eq!(spec.amplitude_near(f0), 0.3, max_relative = 0.05);
    }

    #[test]
    fn non_uniform_grid_is_rejected() {
        let scan = FringeScan { taus: vec![0.0, 1.0, 2.5], signals: vec![0.0; 3] };
        assert!(matches!(
            scan_and_spectrum(&scan, SpectrumWindow::Hann, 1),
            Err(Error::NonUniformGrid { .. })
        ));
    }

    #[test]
    fn oracle_ideal_detects_only_ideal_rows() {
        let seq = tones();
        let dec = phase_term_oracle(&seq, 40, 8, 1e-6).unwrap();
        assert!(!dec.inconclusive, "residual {}", dec.residual_rms);
        for d in &dec.detected {
            assert!(
                d.term.label.starts_with("alpha1")
                    && ["alpha1", "alpha2", "alpha3"].contains(&d.term.label)
                    || ["alpha1", "alpha2", "alpha3"].contains(&d.term.label),
                "unexpected term {} at amplitude {}",
                d.term.label,
                d.amplitude
            );
        }
        assert!(dec.detected.len() >= 2);
    }

    #[test]
    fn oracle_area_error_detects_table_iv_rows() {
        let mut seq = tones();
        seq.area_scale = 1.1;
        let dec = phase_term_oracle(&seq, 40, 8, 1e-4).unwrap();
        assert!(!dec.inconclusive, "residual {}", dec.residual_rms);
        let extra = dec
            .detected
            .iter()
            .filter(|d| !["alpha1", "alpha2", "alpha3"].contains(&d.term.label))
            .count();
        assert!(extra >= 5, "only {extra} error terms detected");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn propagators_are_unitary(lambda in -20.0f64..20.0) {
            prop_assert!(propagator_pulse(lambda).unitarity_defect() < 1e-12);
        }

        #[test]
        fn sequence_preserves_norm(
            scale in 0.5f64..1.5,
            tau in 0.0f64..1e-4,
            p2 in 0.0f64..6.28,
            s3 in 0.0f64..6.28,
        ) {
            let mut seq = tones();
            seq.area_scale = scale;
            let s = seq.area_scale;
            let u1 = propagator_pulse(seq.areas[0] * s);
            let u2 = propagator_pulse(seq.areas[1] * s);
            let u3 = propagator_pulse(seq.areas[2] * s);
            let ph = PhaseConfig { p2, s2: 0.3, p3: 1.0, s3 };
            let f1 = free_evolution(seq.omega1 * tau / 2.0 - ph.p2, seq.omega2 * tau / 2.0 - ph.s2);
            let f2 = free_evolution(
                seq.omega1 * tau / 2.0 + ph.p2 - ph.p3,
                seq.omega2 * tau / 2.0 + ph.s2 - ph.s3,
            );
            let psi0 = Vector3::new(C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0));
            let psi = u3.0 * f2.0 * u2.0 * f1.0 * u1.0 * psi0;
            prop_assert!((psi.norm() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn cycled_signal_pure_for_any_common_scale(scale in 0.7f64..1.3) {
            let mut seq = tones();
            seq.area_scale = scale;
            let scheme = PhaseCycleScheme::ttzfs8();
            let taus: Vec<f64> = (0..1024).map(|i| i as f64 * 20e-9).collect();
            let sig: Vec<f64> = taus.iter().map(|&t| ttzfs8_signal(&seq, t, &scheme)).collect();
            let half = 0.5 * (F1 + F2);
            let check = [half, 0.5 * F1, 0.5 * F2, F1, F2, 0.5 * (F1 - F2)];
            let amps = tone_amplitudes(&taus, &sig, &check).unwrap();
            let main = amps[0].max(1e-300);
            for a in &amps[1..] {
                prop_assert!(20.0 * (a / main).log10() < -120.0);
            }
        }
    }
}
