//! Experiment runner: configuration files, sweeps and CSV output.
//!
//! A configuration is a flat list of `key = value` lines with dotted keys
//! (`channel.noise_power_dbm = -14`); `#` starts a comment. Unknown or
//! repeated keys are errors. Lists are comma separated. The resolved
//! configuration is written next to the results and its SHA-256 is echoed in
//! a comment line of every CSV, so a run is reproducible from (config, seeds).
//!
//! Sweep points are independent and run on the rayon pool; results are
//! collected in axis order, so the output does not depend on scheduling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::backprop::{Divisor, ShiftDivisor, TaylorCenter, TaylorConfig};
use crate::channel::ChannelConfig;
use crate::equalizer::{parse_profile, EqualizerState, LayerOrder};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckConfig, TOLERANCE};
use crate::numerics::{Mode, WordlengthProfile};
use crate::trainer::{init_channel_inverse, init_identity, train, RunResult, TrainingConfig, DEFAULT_LEARNING_RATES, SNR_WINDOW};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    PowerSweep,
    Convergence,
    Adaptivity,
    WordlengthSweep,
    Gradcheck,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::PowerSweep,
        Experiment::Convergence,
        Experiment::Adaptivity,
        Experiment::WordlengthSweep,
        Experiment::Gradcheck,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::PowerSweep => "power_sweep",
            Experiment::Convergence => "convergence",
            Experiment::Adaptivity => "adaptivity",
            Experiment::WordlengthSweep => "wordlength_sweep",
            Experiment::Gradcheck => "gradcheck",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown experiment {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    ChannelInverse,
    Identity,
}

impl Init {
    fn name(&self) -> &'static str {
        match self {
            Init::ChannelInverse => "inverse",
            Init::Identity => "identity",
        }
    }
}

/// Learning rate used by the adaptivity experiment: faster than the static
/// optimum so the taps can follow the drifting rotations.
pub const ADAPTIVITY_LEARNING_RATE: f64 = 1.0 / 128.0;

/// Symbols trained on the static channel before the angles start to drift.
pub const ADAPTIVITY_STATIC_SYMBOLS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Template channel; rotation angles come from the seed unless fixed.
    pub channel: ChannelConfig,
    pub span_alphas: Option<Vec<f64>>,
    pub output_alpha: Option<f64>,
    /// Training template; the learning rate is resolved per launch power.
    pub training: TrainingConfig,
    /// Fixed ξ; `None` selects from `learning_rates` by launch power.
    pub learning_rate: Option<f64>,
    pub learning_rates: Vec<(f64, f64)>,
    pub init: Init,
    pub layer_order: LayerOrder,
    /// Profile used whenever a quantized mode is requested.
    pub profile: WordlengthProfile,
    pub powers_dbm: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub rotation_speeds: Vec<f64>,
    /// Modes of the wordlength sweep.
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub adaptivity_static_symbols: usize,
    pub adaptivity_learning_rate: f64,
    pub gradcheck: GradcheckConfig,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let profile = WordlengthProfile::default();
        let modes = std::iter::once(Mode::Reference)
            .chain(
                [[14, 16, 12, 14, 12], [12, 14, 10, 12, 10], [10, 12, 8, 10, 8], [8, 10, 8, 8, 8], [6, 8, 6, 6, 6]]
                    .into_iter()
                    .map(|wl| Mode::Quantized(WordlengthProfile::from_wordlengths(wl).expect("valid default profile"))),
            )
            .collect();
        Self {
            experiment,
            channel: ChannelConfig::standard(0),
            span_alphas: None,
            output_alpha: None,
            training: TrainingConfig::default(),
            learning_rate: None,
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            init: Init::ChannelInverse,
            layer_order: LayerOrder::KerrFirst,
            profile,
            powers_dbm: vec![4.0, 6.0, 8.0, 10.0, 12.0, 14.0],
            batch_sizes: vec![1, 7, 21, 84],
            rotation_speeds: vec![1e5, 3e5, 1e6],
            modes,
            seeds: vec![1, 2, 3, 4, 5],
            adaptivity_static_symbols: ADAPTIVITY_STATIC_SYMBOLS,
            adaptivity_learning_rate: ADAPTIVITY_LEARNING_RATE,
            gradcheck: GradcheckConfig::default(),
        }
    }

    /// Parse a config file body on top of the defaults for `experiment`.
    pub fn parse(text: &str, experiment: Experiment) -> Result<Self> {
        let mut cfg = Self::defaults(experiment);
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line: line_no, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key {key}")));
            }
            seen.push(key.to_string());
            cfg.set(key, value).map_err(|e| match e {
                Error::Config { .. } => e,
                other => err(format!("{key}: {other}")),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, experiment: Experiment) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, experiment)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "experiment" => {
                let e = Experiment::parse(v)?;
                if e != self.experiment {
                    return Err(Error::InvalidArgument(format!(
                        "config is for {} but {} was requested",
                        e.name(),
                        self.experiment.name()
                    )));
                }
            }
            "seeds" => self.seeds = list(v, parse_u64)?,
            "channel.launch_power_dbm" => self.channel.launch_power_dbm = num(v)?,
            "channel.noise_power_dbm" => self.channel.noise_power_dbm = num(v)?,
            "channel.noise_reference_bw_hz" => self.channel.noise_reference_bw_hz = num(v)?,
            "channel.baud" => self.channel.baud = num(v)?,
            "channel.rolloff" => self.channel.rolloff = num(v)?,
            "channel.lpf_cutoff_hz" => self.channel.lpf_cutoff_hz = num(v)?,
            "channel.rotation_speed" => self.channel.rotation_speed = num(v)?,
            "channel.rotation_start_s" => self.channel.rotation_start_s = num(v)?,
            "channel.span_alphas" => self.span_alphas = Some(list(v, num)?),
            "channel.output_alpha" => self.output_alpha = Some(num(v)?),
            "channel.span_dgd_ps" => {
                let vals = self.per_span(v)?;
                for (s, t) in self.channel.spans.iter_mut().zip(vals) {
                    s.tau_k = t * 1e-12;
                }
            }
            "channel.span_gamma" => {
                let vals = self.per_span(v)?;
                for (s, g) in self.channel.spans.iter_mut().zip(vals) {
                    s.gamma = g;
                }
            }
            "channel.span_length_km" => {
                let vals = self.per_span(v)?;
                for (s, l) in self.channel.spans.iter_mut().zip(vals) {
                    s.length_km = l;
                }
            }
            "training.batch_size" => self.training.batch_size = parse_usize(v)?,
            "training.learning_rate" => self.learning_rate = if v == "auto" { None } else { Some(num(v)?) },
            "training.learning_rates" => {
                self.learning_rates = list(v, |e| {
                    let (p, xi) = e
                        .split_once(':')
                        .ok_or_else(|| Error::InvalidArgument(format!("expected power:rate, got {e:?}")))?;
                    Ok((num(p)?, num(xi)?))
                })?
            }
            "training.n_symbols" => self.training.n_symbols = parse_usize(v)?,
            "training.update_delay" => self.training.update_delay = parse_usize(v)?,
            "training.mode" => self.training.mode = parse_mode(v, self.profile)?,
            "training.profile" => {
                self.profile = parse_profile(v)?;
                if let Mode::Quantized(_) = self.training.mode {
                    self.training.mode = Mode::Quantized(self.profile);
                }
            }
            "training.taylor_order" => {
                let order = parse_u64(v)? as u32;
                self.training.taylor = if order == 0 {
                    TaylorConfig {
                        enabled: false,
                        ..self.training.taylor
                    }
                } else {
                    TaylorConfig::with_center(order, self.training.taylor.center)?
                };
            }
            "training.taylor_center" => self.training.taylor.center = TaylorCenter::parse(v)?,
            "training.divisor" => {
                self.training.divisor = match v {
                    "exact" => Divisor::Exact,
                    "shift" => Divisor::Shift(ShiftDivisor::for_batch(self.training.batch_size)?),
                    other => return Err(Error::InvalidArgument(format!("unknown divisor {other:?}"))),
                }
            }
            "training.init" => {
                self.init = match v {
                    "inverse" => Init::ChannelInverse,
                    "identity" => Init::Identity,
                    other => return Err(Error::InvalidArgument(format!("unknown init {other:?}"))),
                }
            }
            "training.layer_order" => self.layer_order = LayerOrder::parse(v)?,
            "sweep.powers_dbm" => self.powers_dbm = list(v, num)?,
            "sweep.batch_sizes" => self.batch_sizes = list(v, parse_usize)?,
            "sweep.rotation_speeds" => self.rotation_speeds = list(v, num)?,
            "sweep.profiles" => {
                self.modes = list(v, |e| if e == "reference" { Ok(Mode::Reference) } else { Ok(Mode::Quantized(parse_profile(e)?)) })?
            }
            "adaptivity.static_symbols" => self.adaptivity_static_symbols = parse_usize(v)?,
            "adaptivity.learning_rate" => self.adaptivity_learning_rate = num(v)?,
            "gradcheck.instances" => self.gradcheck.instances = parse_usize(v)?,
            "gradcheck.symbols" => self.gradcheck.symbols = parse_usize(v)?,
            "gradcheck.gamma_bar_max" => self.gradcheck.gamma_bar_max = num(v)?,
            "gradcheck.kerr_sign_fault" => {
                self.gradcheck.options.kerr_sign_fault = v
                    .parse::<bool>()
                    .map_err(|_| Error::InvalidArgument(format!("expected true or false, got {v:?}")))?
            }
            _ => return Err(Error::InvalidArgument(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// One value per span, or a single value for all of them.
    fn per_span(&self, v: &str) -> Result<Vec<f64>> {
        let n = self.channel.spans.len();
        match list(v, num)? {
            one if one.len() == 1 => Ok(vec![one[0]; n]),
            all if all.len() == n => Ok(all),
            _ => Err(Error::InvalidArgument(format!("need 1 or {n} values"))),
        }
    }

    /// Apply the command-line overrides.
    pub fn override_mode(&mut self, quantized: bool) {
        self.training.mode = if quantized { Mode::Quantized(self.profile) } else { Mode::Reference };
    }

    pub fn override_taylor_order(&mut self, order: u32) -> Result<()> {
        self.training.taylor = if order == 0 {
            TaylorConfig {
                enabled: false,
                ..self.training.taylor
            }
        } else {
            TaylorConfig::with_center(order, self.training.taylor.center)?
        };
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seed list is empty");
        }
        match self.experiment {
            Experiment::PowerSweep if self.powers_dbm.is_empty() || self.batch_sizes.is_empty() => {
                return bad("power sweep needs powers and batch sizes")
            }
            Experiment::Adaptivity if self.rotation_speeds.is_empty() => return bad("adaptivity needs rotation speeds"),
            Experiment::WordlengthSweep if self.modes.is_empty() => return bad("wordlength sweep needs profiles"),
            _ => {}
        }
        if self.batch_sizes.contains(&0) {
            return bad("batch sizes must be positive");
        }
        if let Some(a) = &self.span_alphas {
            if a.len() != self.channel.spans.len() {
                return bad("channel.span_alphas needs one angle per span");
            }
        }
        if self.learning_rate.is_none() && self.learning_rates.is_empty() {
            return bad("no learning rate configured");
        }
        if self.init == Init::ChannelInverse && self.layer_order != LayerOrder::KerrFirst {
            return bad("the channel-inverse initialization needs layer_order = kerr_first");
        }
        self.channel_for(self.seeds[0], self.channel.launch_power_dbm).validate()?;
        let mut tc = self.training.clone();
        tc.learning_rate = self.learning_rate_for(self.channel.launch_power_dbm);
        tc.validate()
    }

    /// Channel realization for `seed` at `power_dbm`.
    pub fn channel_for(&self, seed: u64, power_dbm: f64) -> ChannelConfig {
        let drawn = ChannelConfig::standard(seed);
        let mut ch = self.channel.clone();
        ch.seed = seed;
        ch.launch_power_dbm = power_dbm;
        for (i, s) in ch.spans.iter_mut().enumerate() {
            s.alpha = self.span_alphas.as_ref().map_or(drawn.spans[i].alpha, |a| a[i]);
        }
        ch.output_alpha = self.output_alpha.unwrap_or(drawn.output_alpha);
        ch
    }

    pub fn learning_rate_for(&self, power_dbm: f64) -> f64 {
        self.learning_rate
            .or_else(|| crate::trainer::learning_rate_for_power(&self.learning_rates, power_dbm))
            .unwrap_or(0.0)
    }

    /// Training config for one run at `power_dbm`.
    pub fn training_for(&self, power_dbm: f64) -> TrainingConfig {
        let mut tc = self.training.clone();
        tc.learning_rate = self.learning_rate_for(power_dbm);
        tc
    }

    pub fn initial_state(&self, ch: &ChannelConfig) -> Result<EqualizerState> {
        let mut s = match self.init {
            Init::ChannelInverse => init_channel_inverse(ch)?,
            Init::Identity => init_identity(ch)?,
        };
        s.layer_order = self.layer_order;
        Ok(s)
    }

    /// Canonical `key = value` text of every setting.
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let c = &self.channel;
        let mut lines: Vec<(&str, String)> = vec![
            ("experiment", self.experiment.name().into()),
            ("seeds", join(self.seeds.iter().map(u64::to_string).collect())),
            ("channel.launch_power_dbm", c.launch_power_dbm.to_string()),
            ("channel.noise_power_dbm", c.noise_power_dbm.to_string()),
            ("channel.noise_reference_bw_hz", c.noise_reference_bw_hz.to_string()),
            ("channel.baud", c.baud.to_string()),
            ("channel.rolloff", c.rolloff.to_string()),
            ("channel.lpf_cutoff_hz", c.lpf_cutoff_hz.to_string()),
            ("channel.rotation_speed", c.rotation_speed.to_string()),
            ("channel.rotation_start_s", c.rotation_start_s.to_string()),
            ("channel.span_dgd_ps", join(c.spans.iter().map(|s| (s.tau_k * 1e12).to_string()).collect())),
            ("channel.span_gamma", join(c.spans.iter().map(|s| s.gamma.to_string()).collect())),
            ("channel.span_length_km", join(c.spans.iter().map(|s| s.length_km.to_string()).collect())),
        ];
        if let Some(a) = &self.span_alphas {
            lines.push(("channel.span_alphas", join(a.iter().map(f64::to_string).collect())));
        }
        if let Some(a) = self.output_alpha {
            lines.push(("channel.output_alpha", a.to_string()));
        }
        let t = &self.training;
        lines.extend([
            ("training.batch_size", t.batch_size.to_string()),
            ("training.learning_rate", self.learning_rate.map_or("auto".into(), |x| x.to_string())),
            (
                "training.learning_rates",
                join(self.learning_rates.iter().map(|(p, x)| format!("{p}:{x}")).collect()),
            ),
            ("training.n_symbols", t.n_symbols.to_string()),
            ("training.update_delay", t.update_delay.to_string()),
            ("training.mode", mode_name(&t.mode)),
            ("training.profile", self.profile.to_string()),
            ("training.taylor_order", if t.taylor.enabled { t.taylor.order.to_string() } else { "0".into() }),
            ("training.taylor_center", t.taylor.center.name().into()),
            (
                "training.divisor",
                match &t.divisor {
                    Divisor::Exact => "exact".into(),
                    Divisor::Shift(s) => format!("shift({})", join(s.shifts().iter().map(u32::to_string).collect())),
                },
            ),
            ("training.init", self.init.name().into()),
            ("training.layer_order", self.layer_order.name().into()),
            ("sweep.powers_dbm", join(self.powers_dbm.iter().map(f64::to_string).collect())),
            ("sweep.batch_sizes", join(self.batch_sizes.iter().map(usize::to_string).collect())),
            ("sweep.rotation_speeds", join(self.rotation_speeds.iter().map(f64::to_string).collect())),
            ("sweep.profiles", join(self.modes.iter().map(mode_name).collect())),
            ("adaptivity.static_symbols", self.adaptivity_static_symbols.to_string()),
            ("adaptivity.learning_rate", self.adaptivity_learning_rate.to_string()),
            ("gradcheck.instances", self.gradcheck.instances.to_string()),
            ("gradcheck.symbols", self.gradcheck.symbols.to_string()),
            ("gradcheck.gamma_bar_max", self.gradcheck.gamma_bar_max.to_string()),
            ("gradcheck.kerr_sign_fault", self.gradcheck.options.kerr_sign_fault.to_string()),
        ]);
        let mut out = String::new();
        for (k, v) in lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn num(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidArgument(format!("expected a number, got {s:?}")))
}

fn parse_u64(s: &str) -> Result<u64> {
    s.trim()
        .parse::<u64>()
        .map_err(|_| Error::InvalidArgument(format!("expected a non-negative integer, got {s:?}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    parse_u64(s).map(|v| v as usize)
}

fn list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|e| !e.is_empty()).map(f).collect()
}

fn parse_mode(s: &str, profile: WordlengthProfile) -> Result<Mode> {
    match s {
        "reference" => Ok(Mode::Reference),
        "quantized" => Ok(Mode::Quantized(profile)),
        other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
    }
}

pub fn mode_name(m: &Mode) -> String {
    match m {
        Mode::Reference => "reference".into(),
        Mode::Quantized(p) => p.to_string(),
    }
}

/// Parse a comma-separated seed list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds = list(s, parse_u64)?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("empty seed list".into()));
    }
    Ok(seeds)
}

// ---------------------------------------------------------------------------
// Results

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub axes: Vec<String>,
    pub seed: u64,
    pub steady_state_snr_db: Option<f64>,
    pub convergence_symbol: Option<usize>,
    pub extra: Vec<Option<f64>>,
    /// `ok` or the reason the run failed.
    pub status: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub axis_names: Vec<String>,
    pub extra_names: Vec<String>,
    pub rows: Vec<ResultRow>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl ResultTable {
    pub fn header(&self) -> String {
        let mut cols: Vec<&str> = self.axis_names.iter().map(String::as_str).collect();
        cols.extend(["seed", "steady_state_snr_db", "convergence_symbol"]);
        cols.extend(self.extra_names.iter().map(String::as_str));
        cols.push("status");
        cols.join(",")
    }

    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            let _ = writeln!(out, "# {c}");
        }
        let _ = writeln!(out, "{}", self.header());
        for r in &self.rows {
            let mut cols = r.axes.clone();
            cols.push(r.seed.to_string());
            cols.push(opt(r.steady_state_snr_db));
            cols.push(opt(r.convergence_symbol));
            cols.extend(r.extra.iter().map(|v| opt(*v)));
            cols.push(r.status.clone());
            let _ = writeln!(out, "{}", cols.join(","));
        }
        out
    }

    /// Mean steady-state SNR over successful rows whose axes satisfy `pick`.
    pub fn mean_snr(&self, pick: impl Fn(&[String]) -> bool) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| pick(&r.axes)).filter_map(|r| r.steady_state_snr_db).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Outcome of one named check. Acceptance-tagged checks decide the exit code.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub acceptance: bool,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, acceptance: bool, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            acceptance,
            passed,
            detail,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub table: ResultTable,
    pub checks: Vec<Check>,
    /// Extra CSV files: (file name, contents without the comment header).
    pub series: Vec<(String, String)>,
}

impl Outcome {
    pub fn acceptance_passed(&self) -> bool {
        self.checks.iter().filter(|c| c.acceptance).all(|c| c.passed)
    }
}

fn failed_row(axes: Vec<String>, seed: u64, n_extra: usize, e: &Error) -> ResultRow {
    ResultRow {
        axes,
        seed,
        steady_state_snr_db: None,
        convergence_symbol: None,
        extra: vec![None; n_extra],
        status: format!("failed: {}", e.to_string().replace(',', ";")),
    }
}

/// Run outcome, with divergence turned into a failed row.
fn run_row(axes: Vec<String>, seed: u64, res: Result<RunResult>) -> Result<(ResultRow, Option<RunResult>)> {
    match res {
        Ok(r) => Ok((
            ResultRow {
                axes,
                seed,
                steady_state_snr_db: r.steady_state_snr_db,
                convergence_symbol: r.convergence_symbol,
                extra: vec![],
                status: "ok".into(),
            },
            Some(r),
        )),
        Err(e @ (Error::Diverged { .. } | Error::NonFinite(_))) => Ok((failed_row(axes, seed, 0, &e), None)),
        Err(e) => Err(e),
    }
}

fn fmt_db(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.3} dB"))
}

// ---------------------------------------------------------------------------
// Experiments

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    match cfg.experiment {
        Experiment::PowerSweep => run_power_sweep(cfg),
        Experiment::Convergence => run_convergence(cfg),
        Experiment::Adaptivity => run_adaptivity(cfg),
        Experiment::WordlengthSweep => run_wordlength_sweep(cfg),
        Experiment::Gradcheck => run_gradcheck_experiment(cfg),
    }
}

/// Trains every (power, B, seed) with the per-power learning rate, plus the
/// untrained channel-inverse baseline per (power, seed).
pub fn run_power_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut points: Vec<(f64, Option<usize>, u64)> = Vec::new();
    for &p in &cfg.powers_dbm {
        for &b in &cfg.batch_sizes {
            points.extend(cfg.seeds.iter().map(|&s| (p, Some(b), s)));
        }
    }
    for &p in &cfg.powers_dbm {
        points.extend(cfg.seeds.iter().map(|&s| (p, None, s)));
    }
    let rows: Vec<ResultRow> = points
        .par_iter()
        .map(|&(p, b, seed)| {
            let ch = cfg.channel_for(seed, p);
            let mut tc = cfg.training_for(p);
            let variant = match b {
                Some(b) => {
                    tc.batch_size = b;
                    if let Divisor::Shift(_) = tc.divisor {
                        tc.divisor = Divisor::Shift(ShiftDivisor::for_batch(b)?);
                    }
                    "trained"
                }
                None => {
                    tc.learning_rate = 0.0;
                    "inverse_baseline"
                }
            };
            let s0 = if b.is_some() { cfg.initial_state(&ch)? } else { init_channel_inverse(&ch)? };
            let axes = vec![p.to_string(), opt(b), variant.to_string()];
            run_row(axes, seed, train(&ch, &s0, &tc, seed)).map(|(r, _)| r)
        })
        .collect::<Result<_>>()?;
    let table = ResultTable {
        axis_names: vec!["power_dbm".into(), "batch_size".into(), "variant".into()],
        extra_names: vec![],
        rows,
    };

    let mean = |p: f64, b: usize| table.mean_snr(|a| a[0] == p.to_string() && a[1] == b.to_string());
    let mut checks = Vec::new();
    let mut bs = cfg.batch_sizes.clone();
    bs.sort_unstable();
    bs.dedup();
    for &p in &cfg.powers_dbm {
        let means: Vec<Option<f64>> = bs.iter().map(|&b| mean(p, b)).collect();
        let trend = means.windows(2).all(|w| matches!((w[0], w[1]), (Some(a), Some(b)) if b >= a - 0.3));
        let detail = bs.iter().zip(&means).map(|(b, m)| format!("B={b}: {}", fmt_db(*m))).collect::<Vec<_>>().join("; ");
        // The batch-size trend is an acceptance criterion at the 10 dBm operating point.
        checks.push(Check::new(&format!("batch_trend_{p}dbm"), p == 10.0, trend, detail));
    }
    let (bmin, bmax) = (bs[0], bs[bs.len() - 1]);
    let ends = cfg.powers_dbm.iter().all(|&p| matches!((mean(p, bmin), mean(p, bmax)), (Some(a), Some(b)) if b >= a - 0.3));
    checks.push(Check::new(
        "largest_batch_not_worse",
        false,
        ends,
        format!("SNR(B={bmax}) >= SNR(B={bmin}) - 0.3 dB at every power"),
    ));
    let curve: Vec<(f64, f64)> = cfg
        .powers_dbm
        .iter()
        .filter_map(|&p| table.mean_snr(|a| a[0] == p.to_string() && a[2] == "trained").map(|m| (p, m)))
        .collect();
    if let Some(&(peak, _)) = curve.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
        let interior = curve.first().is_some_and(|f| f.0 != peak) && curve.last().is_some_and(|l| l.0 != peak);
        checks.push(Check::new(
            "optimum_launch_power",
            false,
            interior && (peak - 10.0).abs() <= 2.0,
            format!("peak at {peak} dBm"),
        ));
    }
    Ok(Outcome {
        table,
        checks,
        series: vec![],
    })
}

fn convergence_modes(cfg: &ExperimentConfig) -> Result<[(&'static str, Mode, TaylorConfig); 3]> {
    let taylor = if cfg.training.taylor.enabled {
        cfg.training.taylor
    } else {
        TaylorConfig::with_center(3, cfg.training.taylor.center)?
    };
    let q = Mode::Quantized(cfg.profile);
    Ok([
        ("reference", Mode::Reference, TaylorConfig::exact()),
        ("quantized", q, TaylorConfig::exact()),
        ("quantized_taylor", q, taylor),
    ])
}

/// Reference, quantized and quantized+Taylor training on identical data.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<Outcome> {
    let modes = convergence_modes(cfg)?;
    let power = cfg.channel.launch_power_dbm;
    let points: Vec<(usize, u64)> = cfg.seeds.iter().flat_map(|&s| (0..modes.len()).map(move |m| (m, s))).collect();
    let runs: Vec<(ResultRow, Option<RunResult>)> = points
        .par_iter()
        .map(|&(m, seed)| {
            let (name, mode, taylor) = modes[m];
            let ch = cfg.channel_for(seed, power);
            let mut tc = cfg.training_for(power);
            tc.mode = mode;
            tc.taylor = taylor;
            run_row(vec![name.to_string()], seed, train(&ch, &cfg.initial_state(&ch)?, &tc, seed))
        })
        .collect::<Result<_>>()?;

    let mut series = Vec::new();
    for ((m, seed), (_, run)) in points.iter().zip(&runs) {
        if let Some(r) = run {
            let mut buf = Vec::new();
            r.metrics.write_csv(&mut buf, &[])?;
            let text = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
            series.push((format!("convergence_{}_seed{seed}.csv", modes[*m].0), text));
        }
    }
    let table = ResultTable {
        axis_names: vec!["mode".into()],
        extra_names: vec![],
        rows: runs.into_iter().map(|(r, _)| r).collect(),
    };
    let snr = |m: &str, seed: u64| {
        table
            .rows
            .iter()
            .find(|r| r.axes[0] == m && r.seed == seed)
            .and_then(|r| r.steady_state_snr_db)
    };
    let mut checks = Vec::new();
    let mut taylor_ok = true;
    let mut order_ok = true;
    let mut taylor_detail = Vec::new();
    let mut order_detail = Vec::new();
    for &s in &cfg.seeds {
        match (snr("reference", s), snr("quantized", s), snr("quantized_taylor", s)) {
            (Some(r), Some(q), Some(t)) => {
                taylor_ok &= (t - q).abs() < 0.2;
                order_ok &= r >= q && r - q <= 1.0;
                taylor_detail.push(format!("seed {s}: {:+.3} dB", t - q));
                order_detail.push(format!("seed {s}: ref-quant {:+.3} dB", r - q));
            }
            _ => {
                taylor_ok = false;
                order_ok = false;
            }
        }
    }
    checks.push(Check::new("taylor_fidelity", true, taylor_ok, taylor_detail.join("; ")));
    checks.push(Check::new("quantization_ordering", true, order_ok, order_detail.join("; ")));
    if power == 10.0 && cfg.profile == WordlengthProfile::default() {
        let q = table.mean_snr(|a| a[0] == "quantized");
        checks.push(Check::new(
            "operating_point",
            true,
            q.is_some_and(|q| (q - 21.2).abs() <= 1.5),
            format!("quantized steady state {}", fmt_db(q)),
        ));
    }
    Ok(Outcome { table, checks, series })
}

/// Symbol at the middle of the steady-state windows of an `n`-symbol run.
fn steady_state_midpoint(n: usize) -> usize {
    (n - n / 8).saturating_sub(SNR_WINDOW / 2)
}

/// Static training followed by drifting rotations, against a static channel
/// frozen at the angles the drifting channel reaches mid-way through its
/// steady-state windows.
pub fn run_adaptivity(cfg: &ExperimentConfig) -> Result<Outcome> {
    let power = cfg.channel.launch_power_dbm;
    let n = cfg.training.n_symbols;
    if cfg.adaptivity_static_symbols >= n {
        return Err(Error::InvalidArgument("adaptivity.static_symbols must be below training.n_symbols".into()));
    }
    let points: Vec<(f64, u64)> = cfg.rotation_speeds.iter().flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s))).collect();
    let rows: Vec<ResultRow> = points
        .par_iter()
        .map(|&(v, seed)| {
            let base = cfg.channel_for(seed, power);
            let mut tc = cfg.training_for(power);
            tc.learning_rate = cfg.adaptivity_learning_rate;
            let mut drifting = base.clone();
            drifting.rotation_speed = v;
            drifting.rotation_start_s = cfg.adaptivity_static_symbols as f64 / base.baud;
            let mut frozen = base.clone();
            frozen.rotation_speed = 0.0;
            let shift = v * (steady_state_midpoint(n) as f64 - cfg.adaptivity_static_symbols as f64).max(0.0) / base.baud;
            frozen.spans.iter_mut().for_each(|s| s.alpha += shift);
            frozen.output_alpha += shift;

            let axes = vec![v.to_string()];
            let (mut row, _) = run_row(axes.clone(), seed, train(&drifting, &cfg.initial_state(&drifting)?, &tc, seed))?;
            let (static_row, _) = run_row(axes, seed, train(&frozen, &cfg.initial_state(&frozen)?, &tc, seed))?;
            let baseline = static_row.steady_state_snr_db;
            let penalty = baseline.zip(row.steady_state_snr_db).map(|(b, d)| b - d);
            row.extra = vec![baseline, penalty];
            if static_row.status != "ok" {
                row.status = format!("baseline {}", static_row.status);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let table = ResultTable {
        axis_names: vec!["rotation_speed".into()],
        extra_names: vec!["baseline_snr_db".into(), "penalty_db".into()],
        rows,
    };
    let penalty = |v: f64| {
        let p: Vec<f64> = table
            .rows
            .iter()
            .filter(|r| r.axes[0] == v.to_string())
            .filter_map(|r| r.extra[1])
            .collect();
        (p.len() == cfg.seeds.len()).then(|| p.iter().sum::<f64>() / p.len() as f64)
    };
    let mut checks = Vec::new();
    let has = |v: f64| cfg.rotation_speeds.contains(&v);
    if has(0.0) {
        let p = penalty(0.0);
        checks.push(Check::new("static_penalty_zero", false, p == Some(0.0), format!("penalty {}", fmt_db(p))));
    }
    if has(1e5) {
        let p = penalty(1e5);
        checks.push(Check::new(
            "slow_rotation_penalty",
            true,
            p.is_some_and(|p| p < 0.5),
            format!("mean penalty at 1e5 rad/s {}", fmt_db(p)),
        ));
        if has(1e6) {
            let q = penalty(1e6);
            checks.push(Check::new(
                "fast_rotation_degrades",
                true,
                matches!((p, q), (Some(p), Some(q)) if q - p >= 1.0),
                format!("mean penalty at 1e6 rad/s {}", fmt_db(q)),
            ));
        }
    }
    Ok(Outcome {
        table,
        checks,
        series: vec![],
    })
}

/// Training per wordlength profile (and the reference mode).
pub fn run_wordlength_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let power = cfg.channel.launch_power_dbm;
    let points: Vec<(Mode, u64)> = cfg.modes.iter().flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    let rows: Vec<ResultRow> = points
        .par_iter()
        .map(|&(mode, seed)| {
            let ch = cfg.channel_for(seed, power);
            let mut tc = cfg.training_for(power);
            tc.mode = mode;
            run_row(vec![mode_name(&mode)], seed, train(&ch, &cfg.initial_state(&ch)?, &tc, seed)).map(|(r, _)| r)
        })
        .collect::<Result<_>>()?;
    let table = ResultTable {
        axis_names: vec!["profile".into()],
        extra_names: vec![],
        rows,
    };
    let mut checks = Vec::new();
    let reference = table.mean_snr(|a| a[0] == "reference");
    if let Some(r) = reference {
        let best = cfg.modes.iter().filter_map(|m| table.mean_snr(|a| a[0] == mode_name(m))).fold(f64::MIN, f64::max);
        checks.push(Check::new(
            "reference_is_best",
            false,
            best <= r + 0.1,
            format!("reference {r:.3} dB, best {best:.3} dB"),
        ));
        let default = mode_name(&Mode::Quantized(WordlengthProfile::default()));
        if let Some(q) = table.mean_snr(|a| a[0] == default) {
            checks.push(Check::new(
                "default_profile_gap",
                true,
                r >= q && r - q <= 1.0,
                format!("reference - {default} = {:+.3} dB", r - q),
            ));
            if power == 10.0 {
                checks.push(Check::new(
                    "operating_point",
                    true,
                    (q - 21.2).abs() <= 1.5,
                    format!("{default} steady state {q:.3} dB"),
                ));
            }
        }
        if let Some(q) = table.mean_snr(|a| a[0] == "6/8/6/6/6") {
            checks.push(Check::new(
                "short_wordlengths_degrade",
                false,
                r - q >= 2.0,
                format!("reference - 6/8/6/6/6 = {:+.3} dB", r - q),
            ));
        }
    }
    Ok(Outcome {
        table,
        checks,
        series: vec![],
    })
}

/// Finite-difference gradient check, one instance set per seed.
pub fn run_gradcheck_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let reports = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut g = cfg.gradcheck.clone();
            g.seed = seed;
            g.layer_order = cfg.layer_order;
            run_gradcheck(&g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let mut all_ok = true;
    let mut failing: Vec<String> = Vec::new();
    for (&seed, report) in cfg.seeds.iter().zip(&reports) {
        for c in &report.checks {
            rows.push(ResultRow {
                axes: vec![c.instance.to_string(), c.layer.clone(), c.checked.to_string()],
                seed,
                steady_state_snr_db: None,
                convergence_symbol: None,
                extra: vec![Some(c.max_rel_error)],
                status: if c.passed() { "ok".into() } else { "failed".into() },
            });
        }
        all_ok &= report.passed() && report.params_checked() == crate::equalizer::NUM_PARAMS;
        for l in report.failing_layers() {
            if !failing.contains(&l) {
                failing.push(l);
            }
        }
    }
    let worst = reports.iter().flat_map(|r| r.checks.iter().map(|c| c.max_rel_error)).fold(0.0, f64::max);
    let params = reports.iter().map(|r| r.params_checked()).min().unwrap_or(0);
    let detail = if failing.is_empty() {
        format!("max relative error {worst:.3e} < {TOLERANCE:e}; {params}/60 parameters checked")
    } else {
        format!("failing layers: {}", failing.join(" "))
    };
    checks.push(Check::new("gradient_correctness", true, all_ok, detail));
    Ok(Outcome {
        table: ResultTable {
            axis_names: vec!["instance".into(), "layer".into(), "checked".into()],
            extra_names: vec!["max_rel_error".into()],
            rows,
        },
        checks,
        series: vec![],
    })
}

// ---------------------------------------------------------------------------
// Output

/// Write the resolved config, result table, per-run series and checks to
/// `dir`; returns the written paths.
pub fn write_outcome(dir: &Path, cfg: &ExperimentConfig, outcome: &Outcome) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let hash = cfg.hash();
    let comments = vec![format!("config_sha256={hash}"), format!("experiment={}", cfg.experiment.name())];
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    put("config.txt".into(), cfg.to_text())?;
    put(format!("{}.csv", cfg.experiment.name()), outcome.table.to_csv(&comments))?;
    for (name, body) in &outcome.series {
        let mut text = String::new();
        for c in &comments {
            let _ = writeln!(text, "# {c}");
        }
        text.push_str(body);
        put(name.clone(), text)?;
    }
    let mut checks = String::new();
    for c in &comments {
        let _ = writeln!(checks, "# {c}");
    }
    checks.push_str("check,acceptance,passed,detail\n");
    for c in &outcome.checks {
        let _ = writeln!(checks, "{},{},{},{}", c.name, c.acceptance, c.passed, c.detail.replace(',', ";"));
    }
    put("checks.csv".into(), checks)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(experiment: Experiment, extra: &str) -> ExperimentConfig {
        let text = format!("training.n_symbols = 16800\nseeds = 1,2\n{extra}");
        ExperimentConfig::parse(&text, experiment).unwrap()
    }

    #[test]
    fn parser_accepts_known_keys_and_rejects_unknown() {
        let cfg = ExperimentConfig::parse(
            "# comment\nchannel.noise_power_dbm = -12 # trailing\n\ntraining.mode = quantized\ntraining.profile = 12/14/10/12/10\nsweep.profiles = reference, 6/8/6/6/6\n",
            Experiment::WordlengthSweep,
        )
        .unwrap();
        assert_eq!(cfg.channel.noise_power_dbm, -12.0);
        assert_eq!(cfg.training.mode, Mode::Quantized(parse_profile("12/14/10/12/10").unwrap()));
        assert_eq!(cfg.modes.len(), 2);

        match ExperimentConfig::parse("a = 1\nchannel.bogus = 3", Experiment::Convergence) {
            Err(Error::Config { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::parse("seeds = 1\nchannel.bogus = 3", Experiment::Convergence) {
            Err(Error::Config { line: 2, message }) => assert!(message.contains("unknown key"), "{message}"),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::parse("seeds = 1\nseeds = 2", Experiment::Convergence).is_err());
        assert!(ExperimentConfig::parse("experiment = adaptivity", Experiment::Convergence).is_err());
        assert!(ExperimentConfig::parse("sweep.batch_sizes = 0", Experiment::PowerSweep).is_err());
        assert!(ExperimentConfig::parse("no equals sign", Experiment::PowerSweep).is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = ExperimentConfig::defaults(Experiment::PowerSweep);
        let text = cfg.to_text();
        // The divisor line is descriptive; everything else parses back.
        let body: String = text.lines().filter(|l| !l.starts_with("training.divisor")).map(|l| format!("{l}\n")).collect();
        let back = ExperimentConfig::parse(&body, Experiment::PowerSweep).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let mut other = cfg.clone();
        other.seeds = vec![9];
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn channel_angles_follow_seed_unless_fixed() {
        let mut cfg = ExperimentConfig::defaults(Experiment::Convergence);
        assert_eq!(cfg.channel_for(3, 10.0).spans[1].alpha, ChannelConfig::standard(3).spans[1].alpha);
        cfg.span_alphas = Some(vec![0.1, 0.2, 0.3]);
        cfg.output_alpha = Some(0.4);
        let ch = cfg.channel_for(3, 8.0);
        assert_eq!(ch.spans[2].alpha, 0.3);
        assert_eq!(ch.output_alpha, 0.4);
        assert_eq!(ch.launch_power_dbm, 8.0);
    }

    #[test]
    fn learning_rate_resolution() {
        let mut cfg = ExperimentConfig::defaults(Experiment::PowerSweep);
        assert_eq!(cfg.learning_rate_for(10.0), 1.0 / 512.0);
        assert_eq!(cfg.learning_rate_for(4.4), 1.0 / 256.0);
        cfg.learning_rate = Some(0.01);
        assert_eq!(cfg.learning_rate_for(4.0), 0.01);
    }

    #[test]
    fn power_sweep_row_count_and_determinism() {
        let cfg = tiny(Experiment::PowerSweep, "sweep.powers_dbm = 6, 10\nsweep.batch_sizes = 7, 21\n");
        let a = run_experiment(&cfg).unwrap();
        assert_eq!(a.table.rows.len(), 2 * 2 * 2 + 2 * 2);
        assert!(a.table.rows.iter().all(|r| r.status == "ok"));
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.table.to_csv(&[cfg.hash()]), b.table.to_csv(&[cfg.hash()]));
        assert!(a.checks.iter().any(|c| c.name == "batch_trend_10dbm" && c.acceptance));
    }

    #[test]
    fn convergence_series_share_symbol_index() {
        let cfg = tiny(Experiment::Convergence, "");
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.series.len(), 3 * cfg.seeds.len());
        let first_col = |s: &str| s.lines().map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>();
        let cols: Vec<_> = out.series.iter().map(|(_, s)| first_col(s)).collect();
        assert!(cols.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(out.table.rows.len(), 6);
    }

    #[test]
    fn adaptivity_zero_speed_has_zero_penalty() {
        let cfg = tiny(Experiment::Adaptivity, "sweep.rotation_speeds = 0, 1e6\nadaptivity.static_symbols = 4200\n");
        let out = run_experiment(&cfg).unwrap();
        for r in out.table.rows.iter().filter(|r| r.axes[0] == "0") {
            assert_eq!(r.extra[1], Some(0.0));
        }
        assert!(out.checks.iter().any(|c| c.name == "static_penalty_zero" && c.passed));
    }

    #[test]
    fn gradcheck_fault_sets_failure() {
        let cfg = ExperimentConfig::parse(
            "seeds = 1\ngradcheck.instances = 1\ngradcheck.symbols = 24\ngradcheck.kerr_sign_fault = true",
            Experiment::Gradcheck,
        )
        .unwrap();
        let out = run_experiment(&cfg).unwrap();
        assert!(!out.acceptance_passed());
        assert!(out.checks[0].detail.contains("kerr"), "{}", out.checks[0].detail);
        let mut ok = cfg.clone();
        ok.gradcheck.options.kerr_sign_fault = false;
        assert!(run_experiment(&ok).unwrap().acceptance_passed());
    }

    #[test]
    fn outputs_carry_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::parse("seeds = 1\ngradcheck.instances = 1\ngradcheck.symbols = 24", Experiment::Gradcheck).unwrap();
        let out = run_experiment(&cfg).unwrap();
        let files = write_outcome(dir.path(), &cfg, &out).unwrap();
        assert_eq!(files.len(), 3);
        for f in files.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")) {
            let text = fs::read_to_string(f).unwrap();
            assert_eq!(text.lines().next().unwrap(), format!("# config_sha256={}", cfg.hash()));
        }
    }
}
