//! Forward propagation of the multi-layer equalizer.
//!
//! Three trainable real-valued 2×2 MIMO-FIR steps alternate with fixed Kerr
//! phase steps, followed by a fixed matched filter and 2→1 decimation. The
//! equalizer works on signals normalized to unit average power; the Kerr
//! steps therefore use the coefficient γ̄·P_ref, where P_ref is the launch
//! power the input was normalized by.
//!
//! Two entry points exist. The per-layer functions ([`linear_step_forward`],
//! [`kerr_step_forward`], [`mf_forward`]) are one-shot, centered and
//! zero-padded. [`EqualizerStream`] is the pipelined form used for training:
//! every FIR keeps its last `taps - 1` inputs between chunks, so feeding a
//! stream in pieces gives exactly the same outputs as feeding it at once.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use num_complex::Complex64;

use crate::channel::rrc_taps;
use crate::error::{Error, Result};
use crate::numerics::{FixedFormat, JonesSample, JonesWaveform, Mode, WordlengthProfile, SAMPLES_PER_SYMBOL};

/// Taps per MIMO-FIR branch.
pub const LINEAR_TAPS: usize = 5;
/// Number of (Kerr, linear) layer pairs.
pub const NUM_STEPS: usize = 3;
/// Trainable real parameters: 3 steps × 2×2 branches × 5 taps.
pub const NUM_PARAMS: usize = NUM_STEPS * 4 * LINEAR_TAPS;

/// MIMO-FIR taps indexed `[output pol][input pol][tap]`.
pub type TapTensor = [[[f64; LINEAR_TAPS]; 2]; 2];

const LINEAR_CENTER: usize = (LINEAR_TAPS - 1) / 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearStepParams {
    pub taps: TapTensor,
}

impl LinearStepParams {
    pub fn zeros() -> Self {
        Self {
            taps: [[[0.0; LINEAR_TAPS]; 2]; 2],
        }
    }

    /// Center tap equal to the identity matrix.
    pub fn identity() -> Self {
        Self::from_matrix([[1.0, 0.0], [0.0, 1.0]])
    }

    /// Memoryless step with the given 2×2 matrix on the center tap.
    pub fn from_matrix(m: [[f64; 2]; 2]) -> Self {
        let mut p = Self::zeros();
        for a in 0..2 {
            for b in 0..2 {
                p.taps[a][b][LINEAR_CENTER] = m[a][b];
            }
        }
        p
    }

    pub(crate) fn quantized(&self, fmt: Option<FixedFormat>) -> TapTensor {
        let mut t = self.taps;
        if let Some(f) = fmt {
            t.iter_mut().flatten().flatten().for_each(|v| *v = f.apply(*v));
        }
        t
    }
}

/// Fixed Kerr step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KerrStepParams {
    /// (8/9)·γ·L in rad/W.
    pub gamma_bar: f64,
    /// Power the equalizer input was normalized by, W.
    pub power_ref_w: f64,
}

impl KerrStepParams {
    /// Phase per unit of normalized power, γ̄·P_ref.
    pub fn coefficient(&self) -> f64 {
        self.gamma_bar * self.power_ref_w
    }

    pub(crate) fn coefficient_in(&self, mode: &Mode) -> f64 {
        match mode {
            Mode::Reference => self.coefficient(),
            Mode::Quantized(p) => p.gamma.apply(self.coefficient()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchedFilterParams {
    pub taps: Vec<f64>,
}

impl MatchedFilterParams {
    pub fn rrc(rolloff: f64) -> Self {
        Self { taps: rrc_taps(rolloff) }
    }

    pub(crate) fn quantized(&self, mode: &Mode) -> Vec<f64> {
        match mode {
            Mode::Reference => self.taps.clone(),
            Mode::Quantized(p) => self.taps.iter().map(|&h| p.mf.apply(h)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LayerOrder {
    /// Kerr, linear, Kerr, linear, Kerr, linear, MF.
    #[default]
    KerrFirst,
    /// Linear, Kerr, linear, Kerr, linear, Kerr, MF.
    LinearFirst,
}

impl LayerOrder {
    pub fn name(&self) -> &'static str {
        match self {
            LayerOrder::KerrFirst => "kerr_first",
            LayerOrder::LinearFirst => "linear_first",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kerr_first" => Ok(LayerOrder::KerrFirst),
            "linear_first" => Ok(LayerOrder::LinearFirst),
            other => Err(Error::InvalidArgument(format!("unknown layer order {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Kerr(usize),
    Linear(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EqualizerState {
    pub linear: [LinearStepParams; NUM_STEPS],
    pub kerr: [KerrStepParams; NUM_STEPS],
    pub mf: MatchedFilterParams,
    pub layer_order: LayerOrder,
}

impl EqualizerState {
    /// Identity linear steps, the given Kerr steps and an RRC matched filter.
    pub fn identity(kerr: [KerrStepParams; NUM_STEPS], rolloff: f64) -> Self {
        Self {
            linear: [LinearStepParams::identity(); NUM_STEPS],
            kerr,
            mf: MatchedFilterParams::rrc(rolloff),
            layer_order: LayerOrder::KerrFirst,
        }
    }

    /// Layers in forward order (the matched filter follows implicitly).
    pub fn layers(&self) -> [Layer; 2 * NUM_STEPS] {
        let mut out = [Layer::Kerr(0); 2 * NUM_STEPS];
        for i in 0..NUM_STEPS {
            let (first, second) = match self.layer_order {
                LayerOrder::KerrFirst => (Layer::Kerr(i), Layer::Linear(i)),
                LayerOrder::LinearFirst => (Layer::Linear(i), Layer::Kerr(i)),
            };
            out[2 * i] = first;
            out[2 * i + 1] = second;
        }
        out
    }

    /// Flattened trainable parameters in `[step][out][in][tap]` order.
    pub fn params(&self) -> Vec<f64> {
        self.linear.iter().flat_map(|s| s.taps.iter().flatten().flatten().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != NUM_PARAMS {
            return Err(Error::LengthMismatch {
                expected: NUM_PARAMS,
                actual: params.len(),
            });
        }
        let mut it = params.iter();
        for s in &mut self.linear {
            for v in s.taps.iter_mut().flatten().flatten() {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Samples between an input sample and the matched-filter output it is
    /// centered on, for the pipelined equalizer.
    pub fn latency_samples(&self) -> usize {
        NUM_STEPS * LINEAR_CENTER + (self.mf.taps.len() - 1) / 2
    }

    /// Write the state as `key = values` lines.
    ///
    /// Keys: `layer_order`, `profile` (`reference` or five wordlengths
    /// `a/b/c/d/e`), `kerr.<i>.gamma_bar`, `kerr.<i>.power_ref_w`,
    /// `linear.<i>.taps` (20 values in `[out][in][tap]` order) and `mf.taps`.
    pub fn save(&self, mut out: impl Write, mode: &Mode) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "# adapteq equalizer state v1");
        let _ = writeln!(s, "layer_order = {}", self.layer_order.name());
        match mode {
            Mode::Reference => {
                let _ = writeln!(s, "profile = reference");
            }
            Mode::Quantized(p) => {
                let _ = writeln!(s, "profile = {p}");
            }
        }
        for (i, k) in self.kerr.iter().enumerate() {
            let _ = writeln!(s, "kerr.{i}.gamma_bar = {}", k.gamma_bar);
            let _ = writeln!(s, "kerr.{i}.power_ref_w = {}", k.power_ref_w);
        }
        for (i, l) in self.linear.iter().enumerate() {
            let vals: Vec<String> = l.taps.iter().flatten().flatten().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "linear.{i}.taps = {}", vals.join(" "));
        }
        let vals: Vec<String> = self.mf.taps.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "mf.taps = {}", vals.join(" "));
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    /// Parse a document written by [`EqualizerState::save`].
    pub fn load(input: impl BufRead) -> Result<(Self, Mode)> {
        let mut state = EqualizerState::identity(
            [KerrStepParams {
                gamma_bar: 0.0,
                power_ref_w: 1.0,
            }; NUM_STEPS],
            0.1,
        );
        let mut mode = Mode::Reference;
        let mut seen = std::collections::HashSet::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let err = |m: String| Error::Config { line: lineno, message: m };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key}")));
            }
            let nums = || -> Result<Vec<f64>> {
                value
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|e| err(format!("{key}: {e}"))))
                    .collect()
            };
            let one = || -> Result<f64> {
                let v = nums()?;
                if v.len() != 1 {
                    return Err(err(format!("{key} takes one value")));
                }
                Ok(v[0])
            };
            let parts: Vec<&str> = key.split('.').collect();
            match parts.as_slice() {
                ["layer_order"] => state.layer_order = LayerOrder::parse(value)?,
                ["profile"] => {
                    mode = if value == "reference" {
                        Mode::Reference
                    } else {
                        Mode::Quantized(parse_profile(value).map_err(|e| err(e.to_string()))?)
                    }
                }
                ["kerr", i, field] => {
                    let i = step_index(i).ok_or_else(|| err(format!("bad step in {key}")))?;
                    match *field {
                        "gamma_bar" => state.kerr[i].gamma_bar = one()?,
                        "power_ref_w" => state.kerr[i].power_ref_w = one()?,
                        _ => return Err(err(format!("unknown key {key}"))),
                    }
                }
                ["linear", i, "taps"] => {
                    let i = step_index(i).ok_or_else(|| err(format!("bad step in {key}")))?;
                    let v = nums()?;
                    if v.len() != 4 * LINEAR_TAPS {
                        return Err(err(format!("{key} needs {} values", 4 * LINEAR_TAPS)));
                    }
                    for (dst, src) in state.linear[i].taps.iter_mut().flatten().flatten().zip(v) {
                        *dst = src;
                    }
                }
                ["mf", "taps"] => state.mf.taps = nums()?,
                _ => return Err(err(format!("unknown key {key}"))),
            }
        }
        if state.mf.taps.len() % 2 == 0 {
            return Err(Error::Format("matched filter needs an odd number of taps".into()));
        }
        Ok((state, mode))
    }
}

fn step_index(s: &str) -> Option<usize> {
    s.parse::<usize>().ok().filter(|&i| i < NUM_STEPS)
}

/// Parse `a/b/c/d/e` wordlengths into a profile.
pub fn parse_profile(s: &str) -> Result<WordlengthProfile> {
    let wl: Vec<u32> = s
        .split('/')
        .map(|v| v.trim().parse::<u32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("profile {s:?}: {e}")))?;
    let wl: [u32; 5] = wl
        .try_into()
        .map_err(|_| Error::InvalidArgument(format!("profile {s:?} needs five wordlengths")))?;
    WordlengthProfile::from_wordlengths(wl)
}

// ---------------------------------------------------------------------------
// FIR kernels on extended inputs: `ext` holds `taps - 1` samples of history
// followed by the chunk; output m uses ext[m .. m + taps].

pub(crate) fn mimo_fir(ext: &[JonesSample], taps: &TapTensor) -> Vec<JonesSample> {
    let n = ext.len() + 1 - LINEAR_TAPS;
    let mut out = Vec::with_capacity(n);
    for m in 0..n {
        let mut acc = [Complex64::new(0.0, 0.0); 2];
        for t in 0..LINEAR_TAPS {
            let s = ext[m + LINEAR_TAPS - 1 - t];
            for (a, acc_a) in acc.iter_mut().enumerate() {
                *acc_a += s.x * taps[a][0][t] + s.y * taps[a][1][t];
            }
        }
        out.push(JonesSample::new(acc[0], acc[1]));
    }
    out
}

/// Transpose of [`mimo_fir`]: adjoint w.r.t. `ext` and the tap gradient.
pub(crate) fn mimo_fir_adjoint(d_out: &[JonesSample], ext: &[JonesSample], taps: &TapTensor) -> (Vec<JonesSample>, TapTensor) {
    let mut d_ext = vec![JonesSample::ZERO; ext.len()];
    let mut grad = [[[0.0; LINEAR_TAPS]; 2]; 2];
    for (m, d) in d_out.iter().enumerate() {
        for t in 0..LINEAR_TAPS {
            let j = m + LINEAR_TAPS - 1 - t;
            let s = ext[j];
            let dj = &mut d_ext[j];
            for a in 0..2 {
                let da = d.pol(a);
                dj.x += da * taps[a][0][t];
                dj.y += da * taps[a][1][t];
                grad[a][0][t] += da.re * s.x.re + da.im * s.x.im;
                grad[a][1][t] += da.re * s.y.re + da.im * s.y.im;
            }
        }
    }
    (d_ext, grad)
}

/// Per-polarization FIR evaluated only at the output positions in `keep`.
pub(crate) fn fir_at(ext: &[JonesSample], taps: &[f64], keep: &[usize]) -> Vec<JonesSample> {
    let l = taps.len();
    keep.iter()
        .map(|&m| {
            let mut acc = JonesSample::ZERO;
            for (t, &h) in taps.iter().enumerate() {
                let s = ext[m + l - 1 - t];
                acc.x += s.x * h;
                acc.y += s.y * h;
            }
            acc
        })
        .collect()
}

/// Transpose of [`fir_at`].
pub(crate) fn fir_at_adjoint(d_out: &[JonesSample], taps: &[f64], keep: &[usize], ext_len: usize) -> Vec<JonesSample> {
    let l = taps.len();
    let mut d_ext = vec![JonesSample::ZERO; ext_len];
    for (d, &m) in d_out.iter().zip(keep) {
        for (t, &h) in taps.iter().enumerate() {
            let j = &mut d_ext[m + l - 1 - t];
            j.x += d.x * h;
            j.y += d.y * h;
        }
    }
    d_ext
}

fn zero_padded(x: &[JonesSample], pad: usize) -> Vec<JonesSample> {
    let mut ext = vec![JonesSample::ZERO; x.len() + 2 * pad];
    ext[pad..pad + x.len()].copy_from_slice(x);
    ext
}

// ---------------------------------------------------------------------------
// One-shot layers.

/// Centered MIMO-FIR step: out_a[n] = Σ_{b,t} taps[a][b][t]·in_b[n − t + 2],
/// with zeros outside the block.
pub fn linear_step_forward(x: &JonesWaveform, p: &LinearStepParams, mode: &Mode) -> JonesWaveform {
    let taps = p.quantized(mode.profile().map(|q| q.taps));
    let ext = zero_padded(&x.samples, LINEAR_CENTER);
    JonesWaveform::new(mimo_fir(&ext, &taps).into_iter().map(|s| mode.signal(s)).collect())
}

/// Stored Kerr-step intermediates.
#[derive(Clone, Debug, PartialEq)]
pub struct KerrTape {
    pub input: Vec<JonesSample>,
    pub power: Vec<f64>,
    pub phi: Vec<f64>,
    /// Coefficient actually used (quantized in fixed-point mode).
    pub coefficient: f64,
}

fn kerr_apply(x: &[JonesSample], p: &KerrStepParams, mode: &Mode) -> (Vec<JonesSample>, KerrTape) {
    let coefficient = p.coefficient_in(mode);
    let angle_fmt = mode.profile().map(|q| q.kerr_angle);
    let mut out = Vec::with_capacity(x.len());
    let mut power = Vec::with_capacity(x.len());
    let mut phi = Vec::with_capacity(x.len());
    for u in x {
        let pw = u.norm_sqr();
        let mut ph = coefficient * pw;
        if let Some(f) = angle_fmt {
            ph = f.apply(ph);
        }
        let (s, c) = ph.sin_cos();
        out.push(mode.signal(u.rotate_phase(Complex64::new(c, s))));
        power.push(pw);
        phi.push(ph);
    }
    let tape = KerrTape {
        input: x.to_vec(),
        power,
        phi,
        coefficient,
    };
    (out, tape)
}

/// Kerr step u·e^{jφ}, φ = γ̄·P_ref·‖u‖², recording ‖u‖² and φ.
pub fn kerr_step_forward(x: &JonesWaveform, p: &KerrStepParams, mode: &Mode) -> (JonesWaveform, KerrTape) {
    let (out, tape) = kerr_apply(&x.samples, p, mode);
    (JonesWaveform::new(out), tape)
}

/// Positions n (0-based) kept by decimation at `phase`.
fn decimation_positions(n: usize, phase: usize) -> Vec<usize> {
    (phase..n).step_by(SAMPLES_PER_SYMBOL).collect()
}

/// Centered matched filter, then keep every second sample starting at `phase`.
pub fn mf_forward(x: &JonesWaveform, p: &MatchedFilterParams, phase: usize, mode: &Mode) -> Vec<JonesSample> {
    let taps = p.quantized(mode);
    let ext = zero_padded(&x.samples, taps.len() / 2);
    let keep = decimation_positions(x.len(), phase);
    fir_at(&ext, &taps, &keep).into_iter().map(|s| mode.signal(s)).collect()
}

/// Matched-filter output at every sample (no decimation), centered.
pub fn mf_filter(x: &JonesWaveform, p: &MatchedFilterParams, mode: &Mode) -> JonesWaveform {
    let taps = p.quantized(mode);
    let ext = zero_padded(&x.samples, taps.len() / 2);
    let keep: Vec<usize> = (0..x.len()).collect();
    JonesWaveform::new(fir_at(&ext, &taps, &keep).into_iter().map(|s| mode.signal(s)).collect())
}

// ---------------------------------------------------------------------------
// Pipelined equalizer.

#[derive(Clone, Debug, PartialEq)]
pub enum LayerRecord {
    /// Kerr intermediates over the retained history and the chunk.
    Kerr { step: usize, tape: KerrTape },
    /// Retained history followed by the chunk input of a linear step.
    Linear { step: usize, ext: Vec<JonesSample> },
}

/// Everything the backward pass needs from one forward chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTape {
    pub mode: Mode,
    /// Layer records in forward order.
    pub records: Vec<LayerRecord>,
    /// History followed by the chunk input of the matched filter.
    pub mf_ext: Vec<JonesSample>,
    /// Chunk positions of the decimated matched-filter outputs.
    pub mf_keep: Vec<usize>,
    /// Number of input samples in the chunk.
    pub chunk_len: usize,
    /// Symbol index of the first output; later outputs are consecutive.
    pub first_symbol: i64,
    pub symbols: Vec<JonesSample>,
}

/// Streaming equalizer: per-layer input histories plus the sample counter.
///
/// Each layer keeps as much of its past input as the backward pass needs to
/// reach every sample that influences the outputs of the current chunk, not
/// just the `taps - 1` samples its own filter uses.
#[derive(Clone, Debug, PartialEq)]
pub struct EqualizerStream {
    hist: Vec<LayerRecord>,
    mf_hist: Vec<JonesSample>,
    samples_in: u64,
    phase: usize,
}

/// Input history each layer must retain, in forward order.
fn history_lengths(state: &EqualizerState) -> [usize; 2 * NUM_STEPS] {
    let mut need = state.mf.taps.len() - 1;
    let mut h = [0; 2 * NUM_STEPS];
    for (slot, layer) in h.iter_mut().zip(state.layers()).rev() {
        if let Layer::Linear(_) = layer {
            need += LINEAR_TAPS - 1;
        }
        *slot = need;
    }
    h
}

impl KerrTape {
    fn zeros(n: usize, coefficient: f64) -> Self {
        Self {
            input: vec![JonesSample::ZERO; n],
            power: vec![0.0; n],
            phi: vec![0.0; n],
            coefficient,
        }
    }

    fn append(&mut self, other: &KerrTape) {
        self.input.extend_from_slice(&other.input);
        self.power.extend_from_slice(&other.power);
        self.phi.extend_from_slice(&other.phi);
        self.coefficient = other.coefficient;
    }

    fn retain_tail(&mut self, n: usize) {
        let from = self.input.len() - n;
        self.input.drain(..from);
        self.power.drain(..from);
        self.phi.drain(..from);
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

impl LayerRecord {
    /// Number of input samples covered.
    pub fn len(&self) -> usize {
        match self {
            LayerRecord::Kerr { tape, .. } => tape.len(),
            LayerRecord::Linear { ext, .. } => ext.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn retain_tail(&mut self, n: usize) {
        match self {
            LayerRecord::Kerr { tape, .. } => tape.retain_tail(n),
            LayerRecord::Linear { ext, .. } => {
                ext.drain(..ext.len() - n);
            }
        }
    }
}

impl EqualizerStream {
    /// Fresh stream with zero history, decimating at `phase` (0 or 1)
    /// relative to the pipeline latency.
    pub fn new(state: &EqualizerState, phase: usize) -> Self {
        let h = history_lengths(state);
        let hist = state
            .layers()
            .iter()
            .zip(h)
            .map(|(layer, n)| match *layer {
                Layer::Kerr(step) => LayerRecord::Kerr {
                    step,
                    tape: KerrTape::zeros(n, state.kerr[step].coefficient()),
                },
                Layer::Linear(step) => LayerRecord::Linear {
                    step,
                    ext: vec![JonesSample::ZERO; n],
                },
            })
            .collect();
        Self {
            hist,
            mf_hist: vec![JonesSample::ZERO; state.mf.taps.len() - 1],
            samples_in: 0,
            phase: phase % SAMPLES_PER_SYMBOL,
        }
    }

    pub fn phase(&self) -> usize {
        self.phase
    }

    pub fn samples_in(&self) -> u64 {
        self.samples_in
    }

    /// Number of warm-up samples after which the next output is symbol 0.
    pub fn warmup_samples(&self, state: &EqualizerState) -> usize {
        state.latency_samples() + self.phase
    }

    /// Run one chunk through every layer. Outputs whose symbol index would
    /// be negative (pipeline fill) are not returned.
    pub fn process(&mut self, state: &EqualizerState, input: &[JonesSample], mode: &Mode) -> ForwardTape {
        let mut x: Vec<JonesSample> = input.iter().map(|&s| mode.signal(s)).collect();
        let n = x.len();
        let mut records = Vec::with_capacity(2 * NUM_STEPS);
        for hist in &mut self.hist {
            let retained = hist.len();
            match hist {
                LayerRecord::Kerr { step, tape } => {
                    let (out, new) = kerr_apply(&x, &state.kerr[*step], mode);
                    tape.append(&new);
                    x = out;
                }
                LayerRecord::Linear { step, ext } => {
                    let taps = state.linear[*step].quantized(mode.profile().map(|q| q.taps));
                    ext.extend_from_slice(&x);
                    let from = ext.len() - n - (LINEAR_TAPS - 1);
                    x = mimo_fir(&ext[from..], &taps).into_iter().map(|s| mode.signal(s)).collect();
                }
            }
            records.push(hist.clone());
            hist.retain_tail(retained);
        }

        let taps = state.mf.quantized(mode);
        let mut mf_ext = std::mem::take(&mut self.mf_hist);
        mf_ext.extend_from_slice(&x);
        self.mf_hist = mf_ext[mf_ext.len() - (taps.len() - 1)..].to_vec();

        let start = self.samples_in as i64;
        let first_valid = (state.latency_samples() + self.phase) as i64;
        let mut keep = Vec::with_capacity(n / 2 + 1);
        let mut first_symbol = None;
        for j in 0..n {
            let rel = start + j as i64 - first_valid;
            if rel >= 0 && rel % SAMPLES_PER_SYMBOL as i64 == 0 {
                first_symbol.get_or_insert(rel / SAMPLES_PER_SYMBOL as i64);
                keep.push(j);
            }
        }
        let symbols = fir_at(&mf_ext, &taps, &keep).into_iter().map(|s| mode.signal(s)).collect();
        self.samples_in += n as u64;
        ForwardTape {
            mode: *mode,
            records,
            mf_ext,
            mf_keep: keep,
            chunk_len: n,
            first_symbol: first_symbol.unwrap_or(0),
            symbols,
        }
    }
}

/// Decimation phase with the larger mean matched-filter output power.
pub fn align_phase(x: &JonesWaveform, state: &EqualizerState, mode: &Mode) -> usize {
    let mut stream = EqualizerStream::new(state, 0);
    let probe = stream.process(state, &x.samples, mode);
    // Re-filter every position of the last layer's output.
    let l = state.mf.taps.len();
    let taps = state.mf.quantized(mode);
    let latency = state.latency_samples();
    let n = probe.mf_ext.len() + 1 - l;
    let all: Vec<usize> = (latency.min(n)..n).collect();
    let out = fir_at(&probe.mf_ext, &taps, &all);
    let mut power = [0.0; SAMPLES_PER_SYMBOL];
    for (j, s) in all.iter().zip(&out) {
        power[(j - latency) % SAMPLES_PER_SYMBOL] += s.norm_sqr();
    }
    if power[1] > power[0] {
        1
    } else {
        0
    }
}

/// Full forward pass over one waveform from zero history.
///
/// Returns the symbol estimates (starting at symbol 0; pipeline fill is
/// dropped) and the tape for the backward pass.
pub fn equalizer_forward_with_phase(x: &JonesWaveform, state: &EqualizerState, mode: &Mode, phase: usize) -> (Vec<JonesSample>, ForwardTape) {
    let mut stream = EqualizerStream::new(state, phase);
    let tape = stream.process(state, &x.samples, mode);
    (tape.symbols.clone(), tape)
}

/// [`equalizer_forward_with_phase`] with the phase picked by [`align_phase`].
pub fn equalizer_forward(x: &JonesWaveform, state: &EqualizerState, mode: &Mode) -> (Vec<JonesSample>, ForwardTape) {
    let phase = align_phase(x, state, mode);
    equalizer_forward_with_phase(x, state, mode, phase)
}
