//! Command-line surface: subcommand dispatch, file-based inputs/outputs,
//! run manifests, and atomic output writing.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::clock_composer::{budget_table, budget_totals, default_budget_inputs};
use crate::config::{Config, SpectrumWindowChoice};
use crate::error::{Error, Result};
use crate::noise_stats::{allan_deviation, fit_fringe, generate_noise, NoiseKind, NoiseSpec};
use crate::pulse_engine::{
    scan_and_spectrum, scan_signal, FringeScan, PhaseCycleScheme, RabiDistribution, ScanMode,
    SequenceEvaluator, SequenceSettings, Spectrum, SpectrumWindow,
};
use crate::scenario_runner::{
    run_scenario, sensitivity_sweep, strategy_variants, FeedbackMode, SweepParameter,
};
use crate::spin_model::{approx_frequencies, transition_frequencies};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "nvclock", version, about = "Composite diamond clock simulator")]
pub struct Cli {
    /// Path to a TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving output files and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Maximum worker threads for independent sub-runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact and perturbative transition frequencies.
    Frequencies {
        /// Axial field in gauss (default: configuration).
        #[arg(long)]
        field: Option<f64>,
        /// Temperature in kelvin (default: configuration).
        #[arg(long)]
        temp: Option<f64>,
        /// Sweep the field over `start:stop:points` instead of a single point.
        #[arg(long)]
        field_sweep: Option<String>,
    },
    /// Amplitude spectrum of a tau scan of the pulse sequence.
    Spectrum {
        /// Single zero-phase configuration instead of the cycled scheme.
        #[arg(long)]
        single_phase: bool,
        /// Lock the middle pulse at exactly 2 pi regardless of the
        /// amplitude-scale ensemble.
        #[arg(long)]
        perfect_echo: bool,
    },
    /// Tau scan of the cycled sequence signal, optionally damped and noisy.
    Fringes {
        /// Apply an exp(-(tau/T2)^p) envelope with this T2 (seconds).
        #[arg(long)]
        t2: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        /// Additive white noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Fit the damped fringe model to a scan CSV (columns tau_s,signal).
    Fit {
        #[arg(long)]
        input: PathBuf,
    },
    /// Closed-loop clock simulation.
    ClockRun {
        /// Feedback mode override: open_loop, composite, d_only, q_only,
        /// thermometer_compensated.
        #[arg(long)]
        mode: Option<String>,
        /// Run all correction strategies on shared noise and emit one Allan
        /// curve per strategy.
        #[arg(long)]
        compare: bool,
    },
    /// Overlapping Allan deviation of a series CSV (columns t_s,value).
    Allan {
        #[arg(long)]
        input: PathBuf,
        /// Sample period when the input has no timestamp column.
        #[arg(long)]
        dt: Option<f64>,
        /// Averaging times in seconds (comma separated; default octaves).
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
    },
    /// Instability budget table.
    Budget,
    /// Pulse-level sensitivity sweep of one parameter.
    Sweep {
        /// temperature | bz | tau_d | tau_q | prep_fidelity | pulse_area_scale
        #[arg(long)]
        parameter: String,
        #[arg(long, allow_hyphen_values = true)]
        min: f64,
        #[arg(long, allow_hyphen_values = true)]
        max: f64,
        #[arg(long, default_value_t = 9)]
        points: usize,
    },
}

/// Record of one tool invocation, written next to the outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub outputs: Vec<String>,
}

struct OutputFile {
    name: String,
    bytes: Vec<u8>,
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt(x: f64) -> String {
    format!("{x:e}")
}

/// A simple rectangular table rendered as CSV or a JSON array of objects.
struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: vec![] }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn render(&self, format: OutputFormat) -> Vec<u8> {
        match format {
            OutputFormat::Csv => {
                let mut out = String::new();
                out.push_str(&self.columns.join(","));
                out.push('\n');
                for row in &self.rows {
                    out.push_str(&row.join(","));
                    out.push('\n');
                }
                out.into_bytes()
            }
            OutputFormat::Json => {
                let items: Vec<serde_json::Value> = self
                    .rows
                    .iter()
                    .map(|row| {
                        let map: serde_json::Map<String, serde_json::Value> = self
                            .columns
                            .iter()
                            .zip(row)
                            .map(|(c, v)| (c.clone(), serde_json::Value::String(v.clone())))
                            .collect();
                        serde_json::Value::Object(map)
                    })
                    .collect();
                let mut bytes = serde_json::to_vec_pretty(&items).expect("table serializes");
                bytes.push(b'\n');
                bytes
            }
        }
    }
}

fn extension(format: OutputFormat) -> &'static str {
    match format {
        OutputFormat::Csv => "csv",
        OutputFormat::Json => "json",
    }
}

/// Maps an error to the documented exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => 2,
        Error::FitDiverged { .. } => 4,
        _ => 3,
    }
}

/// Executes the parsed command. All output files are assembled in memory
/// first and written (atomically, via temp + rename) only when the whole
/// command has succeeded, so failures never leave partial outputs.
pub fn run(cli: &Cli) -> Result<()> {
    let started = now_unix();
    let config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if cli.threads == 0 {
        return Err(Error::InvalidConfig("--threads must be at least 1".into()));
    }
    let seed = cli.seed.unwrap_or(config.scenario.seed);

    let mut report = String::new();
    let outputs = dispatch(cli, &config, seed, &mut report)?;

    std::fs::create_dir_all(&cli.out_dir)?;
    let mut names: Vec<String> = outputs.iter().map(|o| o.name.clone()).collect();
    for out in &outputs {
        write_atomic(&cli.out_dir.join(&out.name), &out.bytes)?;
    }
    names.push("manifest.json".into());
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        config_hash: config.canonical_hash(),
        seed,
        started_unix_s: started,
        finished_unix_s: now_unix(),
        outputs: names,
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    manifest_bytes.push(b'\n');
    write_atomic(&cli.out_dir.join("manifest.json"), &manifest_bytes)?;

    print!("{report}");
    Ok(())
}

fn dispatch(
    cli: &Cli,
    config: &Config,
    seed: u64,
    report: &mut String,
) -> Result<Vec<OutputFile>> {
    match &cli.command {
        Command::Frequencies { field, temp, field_sweep } => {
            cmd_frequencies(cli, config, *field, *temp, field_sweep.as_deref(), report)
        }
        Command::Spectrum { single_phase, perfect_echo } => {
            cmd_spectrum(cli, config, *single_phase, *perfect_echo, report)
        }
        Command::Fringes { t2, p, noise } => {
            cmd_fringes(cli, config, *t2, *p, *noise, seed, report)
        }
        Command::Fit { input } => cmd_fit(cli, input, report),
        Command::ClockRun { mode, compare } => {
            cmd_clock_run(cli, config, mode.as_deref(), *compare, seed, report)
        }
        Command::Allan { input, dt, taus } => cmd_allan(cli, input, *dt, taus, report),
        Command::Budget => cmd_budget(cli, report),
        Command::Sweep { parameter, min, max, points } => {
            cmd_sweep(cli, config, parameter, *min, *max, *points, report)
        }
    }
}

fn cmd_frequencies(
    cli: &Cli,
    config: &Config,
    field: Option<f64>,
    temp: Option<f64>,
    field_sweep: Option<&str>,
    report: &mut String,
) -> Result<Vec<OutputFile>> {
    let c = config.constants.resolve();
    let t = temp.unwrap_or(config.field.temperature_k);

    if let Some(sweep) = field_sweep {
        let parts: Vec<&str> = sweep.split(':').collect();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad field sweep component `{s}`")))
        };
        let [start, stop, points] = parts.as_slice() else {
            return Err(Error::InvalidConfig(
                "--field-sweep expects start:stop:points".into(),
            ));
        };
        let (start, stop) = (parse(start)?, parse(stop)?);
        let n: usize = points
            .parse()
            .map_err(|_| Error::InvalidConfig("bad field sweep point count".into()))?;
        if n < 2 {
            return Err(Error::InvalidConfig("field sweep needs at least 2 points".into()));
        }
        let mut table =
            Table::new(&["bz_gauss", "f_plus_hz", "f_minus_hz", "f1_hz", "f2_hz"]);
        for i in 0..n {
            let bz = start + (stop - start) * i as f64 / (n - 1) as f64;
            let q = transition_frequencies(&c, bz, t)?;
            table.push(vec![fmt(bz), fmt(q.f_plus), fmt(q.f_minus), fmt(q.f1), fmt(q.f2)]);
        }
        report.push_str(&format!("field sweep: {n} points written\n"));
        return Ok(vec![OutputFile {
            name: format!("frequencies_sweep.{}", extension(cli.format)),
            bytes: table.render(cli.format),
        }]);
    }

    let bz = field.unwrap_or(config.field.bz_gauss);
    let exact = transition_frequencies(&c, bz, t)?;
    let mut table = Table::new(&["quantity", "method", "value_hz"]);
    for (name, v) in [
        ("f_plus", exact.f_plus),
        ("f_minus", exact.f_minus),
        ("f1", exact.f1),
        ("f2", exact.f2),
        ("d_half_sum", exact.d_half_sum()),
        ("q_half_sum", exact.q_half_sum()),
    ] {
        report.push_str(&format!("{name:<12} {v:.6e} Hz\n"));
        table.push(vec![name.into(), "exact".into(), fmt(v)]);
    }
    match approx_frequencies(&c, bz, t) {
        Ok(a) => {
            for (name, v) in [
                ("f1", a.f1),
                ("f2", a.f2),
                ("d_half_sum", a.d_half_sum),
                ("q_half_sum", a.q_half_sum),
            ] {
                table.push(vec![name.into(), "perturbative".into(), fmt(v)]);
            }
        }
        Err(e) => report.push_str(&format!("perturbative forms unavailable: {e}\n")),
    }
    Ok(vec![OutputFile {
        name: format!("frequencies.{}", extension(cli.format)),
        bytes: table.render(cli.format),
    }])
}

fn scan_settings(config: &Config) -> (RabiDistribution, SpectrumWindow) {
    let dist = RabiDistribution {
        fwhm_frac: config.scan.rabi_fwhm,
        nodes: config.scan.quadrature_nodes,
    };
    let window = match config.scan.window {
        SpectrumWindowChoice::Hann => SpectrumWindow::Hann,
        SpectrumWindowChoice::Rectangular => SpectrumWindow::Rectangular,
    };
    (dist, window)
}

fn nuclear_tone_scan(
    config: &Config,
    mode: ScanMode,
    perfect_echo: bool,
) -> Result<(FringeScan, f64, f64)> {
    let c = config.constants.resolve();
    let quartet = transition_frequencies(&c, config.field.bz_gauss, config.field.temperature_k)?;
    let mut seq =
        SequenceSettings::ideal(2.0 * PI * quartet.f1, 2.0 * PI * quartet.f2);
    seq.areas = config.scan.pulse_areas;
    seq.area_scale = config.scan.area_scale;
    seq.prep_fidelity = config.scan.prep_fidelity;
    let (dist, _) = scan_settings(config);
    let scheme = PhaseCycleScheme::ttzfs8();
    let scan = if perfect_echo {
        // the ensemble scales only the outer pulses; the echo stays at 2 pi
        let quad = dist.quadrature();
        let taus: Vec<f64> = (0..config.scan.n_points)
            .map(|i| config.scan.tau_start_s + i as f64 * config.scan.tau_step_s)
            .collect();
        let evals: Vec<SequenceEvaluator> = quad
            .iter()
            .map(|&(s, _)| {
                let mut seq_s = seq;
                seq_s.areas = [seq.areas[0] * s, seq.areas[1], seq.areas[2] * s];
                seq_s.area_scale = 1.0;
                SequenceEvaluator::new(&seq_s)
            })
            .collect();
        let signals: Vec<f64> = taus
            .iter()
            .map(|&tau| {
                quad.iter()
                    .enumerate()
                    .map(|(k, &(_, w))| match mode {
                        ScanMode::SinglePhase => {
                            w * evals[k].signal(tau, &crate::pulse_engine::PhaseConfig::ZERO)
                                * scheme.rows.len() as f64
                        }
                        ScanMode::Cycled => {
                            let s: f64 = scheme
                                .rows
                                .iter()
                                .map(|r| r.weight * evals[k].signal(tau, &r.phases))
                                .sum();
                            w * s
                        }
                    })
                    .sum()
            })
            .collect();
        FringeScan { taus, signals }
    } else {
        scan_signal(
            &seq,
            &scheme,
            &dist,
            config.scan.tau_start_s,
            config.scan.tau_step_s,
            config.scan.n_points,
            mode,
        )?
    };
    Ok((scan, quartet.f1, quartet.f2))
}

/// Ratio of the desired peak to the strongest component at any other
/// possible term frequency; the window skirt of the desired peak itself is
/// excluded via the resolution guard band.
fn suppression_db(
    spectrum: &Spectrum,
    desired_hz: f64,
    candidates: &[f64],
    resolution_hz: f64,
) -> (f64, f64, f64) {
    let desired = spectrum.amplitude_near(desired_hz);
    let guard = 4.0 * resolution_hz;
    let unwanted = candidates
        .iter()
        .filter(|f| (**f - desired_hz).abs() > guard)
        .map(|f| spectrum.amplitude_near(*f))
        .fold(0.0_f64, f64::max);
    let db = if unwanted > 0.0 { 20.0 * (desired / unwanted).log10() } else { f64::INFINITY };
    (desired, unwanted, db)
}

fn cmd_spectrum(
    cli: &Cli,
    config: &Config,
    single_phase: bool,
    perfect_echo: bool,
    report: &mut String,
) -> Result<Vec<OutputFile>> {
    let mode = if single_phase { ScanMode::SinglePhase } else { ScanMode::Cycled };
    let (scan, f1, f2) = nuclear_tone_scan(config, mode, perfect_echo)?;
    let desired_hz = 0.5 * (f1 + f2);
    let (_, window) = scan_settings(config);
    let spectrum = scan_and_spectrum(&scan, window, config.scan.zero_pad)?;
    let span = config.scan.tau_step_s * config.scan.n_points as f64;
    let candidates = crate::pulse_engine::candidate_frequencies(f1, f2);
    let (desired, unwanted, db) = suppression_db(&spectrum, desired_hz, &candidates, 1.0 / span);
    report.push_str(&format!(
        "desired peak ((f1+f2)/2 = {desired_hz:.4e} Hz): amplitude {desired:.4e}\n\
         strongest unwanted component: {unwanted:.4e}\n\
         suppression ratio: {db:.1} dB\n"
    ));
    let mut table = Table::new(&["freq_hz", "amplitude"]);
    for (f, a) in spectrum.freqs.iter().zip(&spectrum.amplitudes) {
        table.push(vec![fmt(*f), fmt(*a)]);
    }
    Ok(vec![OutputFile {
        name: format!("spectrum.{}", extension(cli.format)),
        bytes: table.render(cli.format),
    }])
}

fn cmd_fringes(
    cli: &Cli,
    config: &Config,
    t2: Option<f64>,
    p: f64,
    noise: f64,
    seed: u64,
    report: &mut String,
) -> Result<Vec<OutputFile>> {
    let (mut scan, f1, f2) = nuclear_tone_scan(config, ScanMode::Cycled, false)?;
    let desired_hz = 0.5 * (f1 + f2);
    if let Some(t2) = t2 {
        if t2 <= 0.0 {
            return Err(Error::InvalidConfig("--t2 must be positive".into()));
        }
        let mean = scan.signals.iter().sum::<f64>() / scan.signals.len() as f64;
        for (s, tau) in scan.signals.iter_mut().zip(&scan.taus) {
            *s = mean + (*s - mean) * (-(tau / t2).powf(p)).exp();
        }
    }
    if noise > 0.0 {
        let spec = NoiseSpec { kind: NoiseKind::White, magnitude: noise, seed, dt: 1.0 };
        let draws = generate_noise(&spec, scan.signals.len())?;
        for (s, n) in scan.signals.iter_mut().zip(&draws) {
            *s += n;
        }
    }
    report.push_str(&format!(
        "fringe scan: {} points, expected tone {desired_hz:.4e} Hz\n",
        scan.taus.len()
    ));
    let mut table = Table::new(&["tau_s", "signal"]);
    for (tau, s) in scan.taus.iter().zip(&scan.signals) {
        table.push(vec![fmt(*tau), fmt(*s)]);
    }
    Ok(vec![OutputFile {
        name: format!("fringes.{}", extension(cli.format)),
        bytes: table.render(cli.format),
    }])
}

fn read_two_column_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::InvalidConfig(format!("malformed CSV: {e}")))?;
        if record.len() < 2 {
            return Err(Error::InvalidConfig("expected two CSV columns".into()));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("non-numeric CSV value `{s}`")))
        };
        xs.push(parse(&record[0])?);
        ys.push(parse(&record[1])?);
    }
    if xs.is_empty() {
        return Err(Error::InvalidConfig("CSV contains no data rows".into()));
    }
    Ok((xs, ys))
}

fn cmd_fit(cli: &Cli, input: &Path, report: &mut String) -> Result<Vec<OutputFile>> {
    let (taus, signals) = read_two_column_csv(input)?;
    let scan = FringeScan { taus, signals };
    let fit = fit_fringe(&scan)?;
    let pairs = [
        ("s0", fit.s0),
        ("s1", fit.s1),
        ("t2_s", fit.t2),
        ("p", fit.p),
        ("f_hz", fit.f),
        ("phi_rad", fit.phi),
        ("residual_rms", fit.residual_rms),
    ];
    let mut table = Table::new(&["parameter", "value"]);
    for (name, v) in pairs {
        report.push_str(&format!("{name} = {v:.6e}\n"));
        table.push(vec![name.into(), fmt(v)]);
    }
    Ok(vec![OutputFile {
        name: format!("fit.{}", extension(cli.format)),
        bytes: table.render(cli.format),
    }])
}

fn octave_taus(dt: f64, span: f64) -> Vec<f64> {
    let mut taus = Vec::new();
    let mut tau = 2.0 * dt;
    while tau <= span / 3.0 {
        taus.push(tau);
        tau *= 2.0;
    }
    if taus.is_empty() {
        taus.push(dt);
    }
    taus
}

fn cmd_allan(
    cli: &Cli,
    input: &Path,
    dt_flag: Option<f64>,
    taus: &[f64],
    report: &mut String,
) -> Result<Vec<OutputFile>> {
    let (ts, values) = read_two_column_csv(input)?;
    let dt = match dt_flag {
        Some(dt) => dt,
        None => {
            if ts.len() < 2 {
                return Err(Error::InvalidConfig("series too short to infer dt".into()));
            }
            ts[1] - ts[0]
        }
    };
    if dt <= 0.0 {
        return Err(Error::InvalidConfig("sample period must be positive".into()));
    }
    let taus_owned;
    let taus = if taus.is_empty() {
        taus_owned = octave_taus(dt, dt * values.len() as f64);
        &taus_owned[..]
    } else {
        taus
    };
    let curve = allan_deviation(&values, dt, taus)?;
    report.push_str(&format!("allan deviation over {} averaging times\n", curve.taus.len()));
    let mut table = Table::new(&["tau_s", "sigma", "n"]);
    for ((tau, sigma), n) in curve.taus.iter().zip(&curve.sigmas).zip(&curve.n_samples) {
        table.push(vec![fmt(*tau), fmt(*sigma), n.to_string()]);
    }
    Ok(vec![OutputFile {
        name: format!("allan.{}", extension(cli.format)),
        bytes: table.render(cli.format),
    }])
}

fn cmd_budget(cli: &Cli, report: &mut String) -> Result<Vec<OutputFile>> {
    let entries = budget_table(&default_budget_inputs())?;
    let (total_d, total_q, total_psi) = budget_totals(&entries);
    let mut table = Table::new(&[
        "parameter",
        "instability",
        "unit",
        "contribution_d",
        "contribution_q",
        "contribution_psi",
    ]);
    for e in &entries {
        table.push(vec![
            e.parameter.clone(),
            fmt(e.instability),
            e.unit.clone(),
            fmt(e.contribution_d),
            fmt(e.contribution_q),
            fmt(e.contribution_psi),
        ]);
    }
    report.push_str(&format!(
        "root-sum-square totals: D {total_d:.3e}, Q {total_q:.3e}, psi {total_psi:.3e}\n"
    ));
    Ok(vec![OutputFile {
        name: format!("budget.{}", extension(cli.format)),
        bytes: table.render(cli.format),
    }])
}

fn parse_mode(s: &str) -> Result<FeedbackMode> {
    Ok(match s {
        "open_loop" => FeedbackMode::OpenLoop,
        "composite" => FeedbackMode::Composite,
        "d_only" => FeedbackMode::DOnly,
        "q_only" => FeedbackMode::QOnly,
        "thermometer_compensated" => FeedbackMode::ThermometerCompensated,
        other => {
            return Err(Error::InvalidConfig(format!("unknown feedback mode `{other}`")))
        }
    })
}

fn cmd_clock_run(
    cli: &Cli,
    config: &Config,
    mode: Option<&str>,
    compare: bool,
    seed: u64,
    report: &mut String,
) -> Result<Vec<OutputFile>> {
    let mut scenario = config.scenario_config(Some(seed))?;
    if let Some(mode) = mode {
        scenario.mode = parse_mode(mode)?;
    }
    let taus = octave_taus(scenario.t_cycle, scenario.t_cycle * scenario.n_cycles as f64);
    let mut outputs = Vec::new();

    if compare {
        let variants = strategy_variants(&scenario);
        let mut curves = Vec::with_capacity(variants.len());
        for chunk in variants.chunks(cli.threads.max(1)) {
            let chunk_results: Vec<_> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(_, cfg)| {
                        let taus = &taus;
                        scope.spawn(move || {
                            let series = run_scenario(cfg)?;
                            allan_deviation(&series.frac_psi, cfg.t_cycle, taus)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("variant panicked")).collect()
            });
            for ((name, _), result) in chunk.iter().zip(chunk_results) {
                curves.push((name.clone(), result?));
            }
        }
        for (name, curve) in &curves {
            let mut table = Table::new(&["tau_s", "sigma", "n"]);
            for ((tau, sigma), n) in
                curve.taus.iter().zip(&curve.sigmas).zip(&curve.n_samples)
            {
                table.push(vec![fmt(*tau), fmt(*sigma), n.to_string()]);
            }
            report.push_str(&format!(
                "{name}: sigma({:.0} s) = {:.3e}\n",
                curve.taus.last().unwrap(),
                curve.sigmas.last().unwrap()
            ));
            outputs.push(OutputFile {
                name: format!("allan_{name}.{}", extension(cli.format)),
                bytes: table.render(cli.format),
            });
        }
        return Ok(outputs);
    }

    let series = run_scenario(&scenario)?;
    let mut table = Table::new(&[
        "t_s",
        "frac_d",
        "frac_q",
        "frac_psi",
        "true_temperature_k",
        "true_lo_offset",
        "flagged",
    ]);
    for i in 0..series.timestamps.len() {
        table.push(vec![
            fmt(series.timestamps[i]),
            fmt(series.frac_d[i]),
            fmt(series.frac_q[i]),
            fmt(series.frac_psi[i]),
            fmt(series.true_temperature[i]),
            fmt(series.true_lo_offset[i]),
            (series.flagged[i] as u8).to_string(),
        ]);
    }
    outputs.push(OutputFile {
        name: format!("timeseries.{}", extension(cli.format)),
        bytes: table.render(cli.format),
    });
    let curve = allan_deviation(&series.frac_psi, scenario.t_cycle, &taus)?;
    let mut allan_table = Table::new(&["tau_s", "sigma", "n"]);
    for ((tau, sigma), n) in curve.taus.iter().zip(&curve.sigmas).zip(&curve.n_samples) {
        allan_table.push(vec![fmt(*tau), fmt(*sigma), n.to_string()]);
    }
    outputs.push(OutputFile {
        name: format!("allan_psi.{}", extension(cli.format)),
        bytes: allan_table.render(cli.format),
    });
    let flagged = series.flagged.iter().filter(|&&f| f).count();
    report.push_str(&format!(
        "clock run: {} cycles, mode {:?}, {flagged} flagged\n",
        series.timestamps.len(),
        scenario.mode
    ));
    Ok(outputs)
}

fn parse_sweep_parameter(s: &str) -> Result<SweepParameter> {
    Ok(match s {
        "temperature" => SweepParameter::Temperature,
        "bz" => SweepParameter::Bz,
        "tau_d" => SweepParameter::TauD,
        "tau_q" => SweepParameter::TauQ,
        "prep_fidelity" => SweepParameter::PrepFidelity,
        "pulse_area_scale" => SweepParameter::PulseAreaScale,
        other => {
            return Err(Error::InvalidConfig(format!("unknown sweep parameter `{other}`")))
        }
    })
}

fn cmd_sweep(
    cli: &Cli,
    config: &Config,
    parameter: &str,
    min: f64,
    max: f64,
    points: usize,
    report: &mut String,
) -> Result<Vec<OutputFile>> {
    if points < 3 || !(max > min) {
        return Err(Error::InvalidConfig(
            "sweep needs at least 3 points and max > min".into(),
        ));
    }
    let parameter = parse_sweep_parameter(parameter)?;
    let scenario = config.scenario_config(None)?;
    let grid: Vec<f64> = (0..points)
        .map(|i| min + (max - min) * i as f64 / (points - 1) as f64)
        .collect();
    let result = sensitivity_sweep(&scenario, parameter, &grid)?;
    report.push_str(&format!(
        "slopes per unit: D {:.4e}, Q {:.4e}, psi {:.4e}\nflagged: {}\n",
        result.slope_d, result.slope_q, result.slope_psi, result.flagged
    ));
    let mut table = Table::new(&["value", "frac_d", "frac_q", "frac_psi"]);
    for row in &result.rows {
        table.push(vec![fmt(row.value), fmt(row.frac_d), fmt(row.frac_q), fmt(row.frac_psi)]);
    }
    Ok(vec![OutputFile {
        name: format!("sweep.{}", extension(cli.format)),
        bytes: table.render(cli.format),
    }])
}
