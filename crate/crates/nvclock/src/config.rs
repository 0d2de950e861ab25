//! Versioned TOML configuration for the command-line tool, with a canonical
//! hash used in run manifests.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::noise_stats::{NoiseKind, NoiseSpec, PsnParams};
use crate::scenario_runner::{ChannelSettings, FeedbackMode, ScenarioConfig};
use crate::spin_model::SpinConstants;

pub const SCHEMA_VERSION: u32 = 1;

/// Top-level configuration document. Every section and field is optional in
/// the file; omitted values take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub schema_version: u32,
    pub constants: ConstantsSection,
    pub field: FieldSection,
    pub scan: ScanSection,
    pub scenario: ScenarioSection,
    pub noise: NoiseSection,
    pub psn: PsnSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            schema_version: SCHEMA_VERSION,
            constants: ConstantsSection::default(),
            field: FieldSection::default(),
            scan: ScanSection::default(),
            scenario: ScenarioSection::default(),
            noise: NoiseSection::default(),
            psn: PsnSection::default(),
        }
    }
}

/// Per-field overrides of the built-in spin constants.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsSection {
    pub d0_hz: Option<f64>,
    pub q0_hz: Option<f64>,
    pub gamma_e_hz_per_g: Option<f64>,
    pub gamma_n_hz_per_g: Option<f64>,
    pub a_par_hz: Option<f64>,
    pub a_perp_hz: Option<f64>,
    pub t0_k: Option<f64>,
    pub lambda_d: Option<f64>,
    pub lambda_q: Option<f64>,
    pub lambda_d2: Option<f64>,
    pub lambda_q2: Option<f64>,
}

impl ConstantsSection {
    pub fn resolve(&self) -> SpinConstants {
        let mut c = SpinConstants::default();
        if let Some(v) = self.d0_hz {
            c.d0 = v;
        }
        if let Some(v) = self.q0_hz {
            c.q0 = v;
        }
        if let Some(v) = self.gamma_e_hz_per_g {
            c.gamma_e = v;
        }
        if let Some(v) = self.gamma_n_hz_per_g {
            c.gamma_n = v;
        }
        if let Some(v) = self.a_par_hz {
            c.a_par = v;
        }
        if let Some(v) = self.a_perp_hz {
            c.a_perp = v;
        }
        if let Some(v) = self.t0_k {
            c.t0 = v;
        }
        if let Some(v) = self.lambda_d {
            c.lambda_d = v;
        }
        if let Some(v) = self.lambda_q {
            c.lambda_q = v;
        }
        if let Some(v) = self.lambda_d2 {
            c.lambda_d2 = v;
        }
        if let Some(v) = self.lambda_q2 {
            c.lambda_q2 = v;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSection {
    pub bz_gauss: f64,
    pub temperature_k: f64,
}

impl Default for FieldSection {
    fn default() -> Self {
        FieldSection { bz_gauss: 475.0, temperature_k: 297.0 }
    }
}

/// Tau grid and ensemble settings for spectrum and fringe scans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    pub tau_start_s: f64,
    pub tau_step_s: f64,
    pub n_points: usize,
    /// FWHM of the Rabi-amplitude distribution as a fraction of nominal.
    pub rabi_fwhm: f64,
    pub quadrature_nodes: usize,
    pub zero_pad: usize,
    /// "hann" or "rectangular".
    pub window: SpectrumWindowChoice,
    pub pulse_areas: [f64; 3],
    pub area_scale: f64,
    pub prep_fidelity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumWindowChoice {
    Hann,
    Rectangular,
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection {
            tau_start_s: 2e-8,
            tau_step_s: 2e-8,
            n_points: 4096,
            rabi_fwhm: 0.164,
            quadrature_nodes: 64,
            zero_pad: 4,
            window: SpectrumWindowChoice::Hann,
            pulse_areas: [0.5 * PI, 2.0 * PI, 0.5 * PI],
            area_scale: 1.0,
            prep_fidelity: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub t_cycle_s: f64,
    pub n_cycles: usize,
    pub mode: FeedbackMode,
    pub tau_d_s: f64,
    pub tau_q_s: f64,
    pub seed: u64,
    pub area_scale: f64,
    pub prep_fidelity: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            t_cycle_s: 1.0,
            n_cycles: 2000,
            mode: FeedbackMode::Composite,
            tau_d_s: 1.0e-6,
            tau_q_s: 0.5e-3,
            seed: 1,
            area_scale: 1.0,
            prep_fidelity: 1.0,
        }
    }
}

/// One injected-noise stream. The seed and sample period are derived from
/// the scenario, not configured here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseEntry {
    pub kind: NoiseKindChoice,
    pub magnitude: f64,
    #[serde(default)]
    pub period_s: Option<f64>,
    #[serde(default)]
    pub phase0: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKindChoice {
    White,
    RandomWalk,
    LinearDrift,
    Sinusoidal,
}

impl NoiseEntry {
    pub fn to_spec(&self) -> Result<NoiseSpec> {
        let kind = match self.kind {
            NoiseKindChoice::White => NoiseKind::White,
            NoiseKindChoice::RandomWalk => NoiseKind::RandomWalk,
            NoiseKindChoice::LinearDrift => NoiseKind::LinearDrift,
            NoiseKindChoice::Sinusoidal => {
                let period = self.period_s.ok_or_else(|| {
                    Error::InvalidConfig("sinusoidal noise requires period_s".into())
                })?;
                NoiseKind::Sinusoidal { period, phase0: self.phase0.unwrap_or(0.0) }
            }
        };
        Ok(NoiseSpec { kind, magnitude: self.magnitude, seed: 0, dt: 1.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub temperature: Option<NoiseEntry>,
    pub lo: Option<NoiseEntry>,
    pub thermometer: Option<NoiseEntry>,
}

/// Shot-noise chain of one channel. The interrogation time and averaging
/// time are taken from the scenario at run time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsnEntry {
    pub f_hz: f64,
    pub contrast: f64,
    pub t2_s: f64,
    pub p: f64,
    pub gain_v_per_a: f64,
    pub v0_v: f64,
    pub t_a_s: f64,
    pub t_b_s: f64,
    pub n_red: f64,
    pub n_green: f64,
}

impl PsnEntry {
    pub fn to_params(&self) -> PsnParams {
        PsnParams {
            f: self.f_hz,
            tau: 1.0,
            contrast: self.contrast,
            t2: self.t2_s,
            p: self.p,
            gain: self.gain_v_per_a,
            v0: self.v0_v,
            t_a: self.t_a_s,
            t_b: self.t_b_s,
            n_red: self.n_red,
            n_green: self.n_green,
            t_cycle: 1.0,
            t: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsnSection {
    pub d: Option<PsnEntry>,
    pub q: Option<PsnEntry>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.scan.tau_step_s <= 0.0 || self.scan.n_points < 2 {
            return Err(Error::InvalidConfig("scan grid requires tau_step_s > 0 and n_points >= 2".into()));
        }
        Ok(())
    }

    /// Assembles the closed-loop scenario from the relevant sections.
    pub fn scenario_config(&self, seed_override: Option<u64>) -> Result<ScenarioConfig> {
        let s = &self.scenario;
        let channel = |tau: f64| ChannelSettings {
            tau,
            area_scale: s.area_scale,
            prep_fidelity: s.prep_fidelity,
        };
        Ok(ScenarioConfig {
            constants: self.constants.resolve(),
            bz: self.field.bz_gauss,
            d_channel: channel(s.tau_d_s),
            q_channel: channel(s.tau_q_s),
            t_cycle: s.t_cycle_s,
            n_cycles: s.n_cycles,
            mode: s.mode,
            seed: seed_override.unwrap_or(s.seed),
            temperature_noise: self.noise.temperature.map(|n| n.to_spec()).transpose()?,
            lo_noise: self.noise.lo.map(|n| n.to_spec()).transpose()?,
            psn_d: self.psn.d.map(|p| p.to_params()),
            psn_q: self.psn.q.map(|p| p.to_params()),
            thermometer_drift: self.noise.thermometer.map(|n| n.to_spec()).transpose()?,
        })
    }

    /// SHA-256 over the canonical JSON rendering (recursively sorted keys),
    /// so the hash is stable under key reordering in the source file.
    pub fn canonical_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut canon = String::new();
        write_canonical(&value, &mut canon);
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn write_canonical(v: &serde_json::Value, out: &mut String) {
    match v {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::Value::String((*k).clone()).to_string());
                out.push(':');
                write_canonical(&map[*k], out);
            }
            out.push('}');
        }
        serde_json::Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}
