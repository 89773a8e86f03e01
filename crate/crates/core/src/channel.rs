//! End-to-end transmission emulator.
//!
//! PM-QPSK symbols are shaped with a root-raised-cosine pulse at two samples
//! per symbol and sent through a cascade of fiber spans. Each span applies a
//! polarization rotation, differential group delay and a lumped Kerr phase.
//! A final rotation, additive Gaussian noise and a brick-wall low-pass filter
//! complete the link.
//!
//! The emulator always runs in double precision. Long streams are produced
//! in segments: each segment is simulated with circular (FFT) semantics over
//! its symbols plus a guard interval on either side, and the guards are
//! discarded so consecutive segments join into one continuous waveform.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::{JonesSample, JonesWaveform, SAMPLES_PER_SYMBOL};

/// PMD parameter in s/sqrt(km).
pub const PMD_TAU: f64 = 0.2e-12;
/// RRC truncation, in symbol periods on each side of the peak.
pub const RRC_SPAN_SYMBOLS: usize = 16;
/// Guard interval discarded on each side of a simulated segment, in samples.
pub const GUARD_SAMPLES: usize = 256;

const STREAM_SYMBOLS: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_ANGLES: u64 = 2;

/// One fiber span.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanConfig {
    /// Polarization rotation angle in radians.
    pub alpha: f64,
    /// Differential group delay in seconds.
    pub tau_k: f64,
    /// Nonlinearity parameter in rad/W/km.
    pub gamma: f64,
    pub length_km: f64,
}

impl SpanConfig {
    /// 100 km span with γ = 1.2 rad/W/km and DGD τ·sqrt(3πL/8).
    pub fn standard(alpha: f64) -> Self {
        let length_km = 100.0;
        Self {
            alpha,
            tau_k: dgd_for_length(length_km),
            gamma: 1.2,
            length_km,
        }
    }

    /// Lumped Kerr coefficient (8/9)·γ·L in rad/W.
    pub fn gamma_bar(&self) -> f64 {
        8.0 / 9.0 * self.gamma * self.length_km
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.length_km > 0.0) || !self.tau_k.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid span {self:?}")));
        }
        Ok(())
    }
}

/// Mean DGD of a span of the given length.
pub fn dgd_for_length(length_km: f64) -> f64 {
    PMD_TAU * (3.0 * PI * length_km / 8.0).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub spans: Vec<SpanConfig>,
    pub output_alpha: f64,
    pub baud: f64,
    pub rolloff: f64,
    pub launch_power_dbm: f64,
    /// Total noise power; `f64::NEG_INFINITY` disables noise.
    pub noise_power_dbm: f64,
    /// Bandwidth over which `noise_power_dbm` is measured. The simulated
    /// noise power is scaled by `2·baud / noise_reference_bw_hz`.
    pub noise_reference_bw_hz: f64,
    /// Angular speed applied to every rotation angle, rad/s.
    pub rotation_speed: f64,
    /// Time at which the rotation angles start drifting, seconds.
    pub rotation_start_s: f64,
    pub lpf_cutoff_hz: f64,
    /// Seed of the channel realization (rotation angles).
    pub seed: u64,
}

/// Default reference bandwidth for the noise power, in multiples of the
/// baud rate. Calibrated so the trained equalizer at 10 dBm sits near 21 dB.
pub const DEFAULT_NOISE_REFERENCE_SPS: f64 = 16.0;

impl ChannelConfig {
    /// Three standard spans with rotation angles drawn uniformly from
    /// [-π, π] using `seed`.
    pub fn standard(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_ANGLES);
        let mut draw = || rng.random_range(-PI..=PI);
        let spans = (0..3).map(|_| SpanConfig::standard(draw())).collect();
        let output_alpha = draw();
        let baud = 32e9;
        Self {
            spans,
            output_alpha,
            baud,
            rolloff: 0.1,
            launch_power_dbm: 10.0,
            noise_power_dbm: -14.0,
            noise_reference_bw_hz: DEFAULT_NOISE_REFERENCE_SPS * baud,
            rotation_speed: 0.0,
            rotation_start_s: 0.0,
            lpf_cutoff_hz: baud,
            seed,
        }
    }

    /// Transparent link: no rotation, DGD, Kerr or noise, filter at Nyquist.
    pub fn identity() -> Self {
        let mut cfg = Self::standard(0);
        for s in &mut cfg.spans {
            s.alpha = 0.0;
            s.tau_k = 0.0;
            s.gamma = 0.0;
        }
        cfg.output_alpha = 0.0;
        cfg.noise_power_dbm = f64::NEG_INFINITY;
        cfg
    }

    pub fn sample_rate(&self) -> f64 {
        SAMPLES_PER_SYMBOL as f64 * self.baud
    }

    pub fn launch_power_w(&self) -> f64 {
        dbm_to_w(self.launch_power_dbm)
    }

    /// Noise power actually added over the simulation bandwidth, W.
    pub fn simulated_noise_power_w(&self) -> f64 {
        dbm_to_w(self.noise_power_dbm) * self.sample_rate() / self.noise_reference_bw_hz
    }

    /// Angle added to every rotation at absolute time `t`.
    pub fn drift_at(&self, t: f64) -> f64 {
        if self.rotation_speed == 0.0 {
            0.0
        } else {
            self.rotation_speed * (t - self.rotation_start_s).max(0.0)
        }
    }

    /// Rotation angles (spans, then output) at absolute time `t`.
    pub fn angles_at(&self, t: f64) -> impl Iterator<Item = f64> + '_ {
        let drift = self.drift_at(t);
        self.spans
            .iter()
            .map(|s| s.alpha)
            .chain(std::iter::once(self.output_alpha))
            .map(move |a| a + drift)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.spans {
            s.validate()?;
        }
        if !(self.baud > 0.0) || !(0.0..=1.0).contains(&self.rolloff) {
            return Err(Error::InvalidArgument("baud must be positive and rolloff in [0, 1]".into()));
        }
        if !(self.noise_reference_bw_hz > 0.0) {
            return Err(Error::InvalidArgument("noise reference bandwidth must be positive".into()));
        }
        if self.lpf_cutoff_hz > self.sample_rate() / 2.0 || !(self.lpf_cutoff_hz > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "low-pass cutoff {} Hz outside (0, Nyquist]",
                self.lpf_cutoff_hz
            )));
        }
        Ok(())
    }
}

pub fn dbm_to_w(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

pub fn w_to_dbm(w: f64) -> f64 {
    10.0 * (w / 1e-3).log10()
}

/// Known pilot symbols together with the received waveform they produced.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotBlock {
    pub symbols: Vec<JonesSample>,
    pub waveform: JonesWaveform,
}

/// Angular frequencies of an FFT of length `n` at `sample_rate`, in FFT bin order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    pub omega: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(n: usize, sample_rate: f64) -> Self {
        let df = sample_rate / n as f64;
        let omega = (0..n)
            .map(|k| {
                let k = if k <= (n - 1) / 2 { k as f64 } else { k as f64 - n as f64 };
                2.0 * PI * k * df
            })
            .collect();
        Self { omega }
    }
}

fn qpsk_component(bits: u32) -> Complex64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re = if bits & 1 == 0 { s } else { -s };
    let im = if bits & 2 == 0 { s } else { -s };
    Complex64::new(re, im)
}

fn draw_symbol(rng: &mut impl Rng) -> JonesSample {
    let bits: u32 = rng.random();
    JonesSample::new(qpsk_component(bits), qpsk_component(bits >> 2))
}

fn symbol_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SYMBOLS);
    rng
}

/// Independent uniform PM-QPSK symbols with unit power per polarization.
pub fn generate_symbols(n: usize, seed: u64) -> Result<Vec<JonesSample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("symbol count must be positive".into()));
    }
    let mut rng = symbol_rng(seed);
    Ok((0..n).map(|_| draw_symbol(&mut rng)).collect())
}

/// Unit-energy root-raised-cosine taps at two samples per symbol,
/// truncated to ±[`RRC_SPAN_SYMBOLS`] symbol periods.
pub fn rrc_taps(rolloff: f64) -> Vec<f64> {
    let sps = SAMPLES_PER_SYMBOL as f64;
    let half = (RRC_SPAN_SYMBOLS * SAMPLES_PER_SYMBOL) as i64;
    let b = rolloff;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|k| {
            let t = k as f64 / sps;
            if t == 0.0 {
                1.0 + b * (4.0 / PI - 1.0)
            } else if b > 0.0 && ((4.0 * b * t).abs() - 1.0).abs() < 1e-12 {
                b / 2f64.sqrt()
                    * ((1.0 + 2.0 / PI) * (PI / (4.0 * b)).sin()
                        + (1.0 - 2.0 / PI) * (PI / (4.0 * b)).cos())
            } else {
                ((PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos())
                    / (PI * t * (1.0 - (4.0 * b * t).powi(2)))
            }
        })
        .collect();
    let norm = taps.iter().map(|h| h * h).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|h| *h /= norm);
    taps
}

/// Upsample ×2, filter with the RRC pulse and scale to the launch power.
///
/// Symbol `k` peaks at sample `2k`. The convolution is linear (zero outside
/// the block), so the first and last few samples carry edge transients.
pub fn pulse_shape(symbols: &[JonesSample], launch_power_dbm: f64, rolloff: f64) -> JonesWaveform {
    let taps = rrc_taps(rolloff);
    let half = (taps.len() / 2) as i64;
    let n = symbols.len() * SAMPLES_PER_SYMBOL;
    // Unit-power symbols through a unit-energy pulse give unit total power.
    let gain = dbm_to_w(launch_power_dbm).sqrt();
    let mut out = vec![JonesSample::ZERO; n];
    for (k, s) in symbols.iter().enumerate() {
        let center = (k * SAMPLES_PER_SYMBOL) as i64;
        let lo = (center - half).max(0);
        let hi = (center + half).min(n as i64 - 1);
        for j in lo..=hi {
            let h = taps[(j - center + half) as usize] * gain;
            out[j as usize] = out[j as usize] + s.scale(h);
        }
    }
    JonesWaveform::new(out)
}

/// Real rotation matrix ((cos α, sin α), (−sin α, cos α)) applied to a Jones vector.
#[inline]
pub fn apply_rotation(u: JonesSample, alpha: f64) -> JonesSample {
    let (s, c) = alpha.sin_cos();
    JonesSample::new(u.x * c + u.y * s, -u.x * s + u.y * c)
}

fn fft_pair(planner: &mut FftPlanner<f64>, w: &mut JonesWaveform, f: impl Fn(usize, &mut Complex64, &mut Complex64)) {
    let n = w.len();
    if n == 0 {
        return;
    }
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut bx: Vec<Complex64> = w.samples.iter().map(|s| s.x).collect();
    let mut by: Vec<Complex64> = w.samples.iter().map(|s| s.y).collect();
    fwd.process(&mut bx);
    fwd.process(&mut by);
    for k in 0..n {
        f(k, &mut bx[k], &mut by[k]);
    }
    inv.process(&mut bx);
    inv.process(&mut by);
    let scale = 1.0 / n as f64;
    for (s, (x, y)) in w.samples.iter_mut().zip(bx.into_iter().zip(by)) {
        *s = JonesSample::new(x * scale, y * scale);
    }
}

fn dgd_with(planner: &mut FftPlanner<f64>, w: &mut JonesWaveform, tau_k: f64, sample_rate: f64) {
    if tau_k == 0.0 {
        return;
    }
    let grid = FrequencyGrid::new(w.len(), sample_rate);
    fft_pair(planner, w, |k, x, y| {
        let rot = Complex64::from_polar(1.0, -grid.omega[k] * tau_k / 2.0);
        *x *= rot;
        *y *= rot.conj();
    });
}

/// Differential group delay diag(e^{−jωτ/2}, e^{+jωτ/2}) over the whole block.
///
/// Applied as a frequency-domain product with circular wrap-around at the
/// block edges. Any length is accepted; the FFT handles non-power-of-two
/// sizes directly.
pub fn apply_dgd(w: &JonesWaveform, tau_k: f64, sample_rate: f64) -> JonesWaveform {
    let mut out = w.clone();
    dgd_with(&mut FftPlanner::new(), &mut out, tau_k, sample_rate);
    out
}

/// Per-sample Kerr phase u·exp(sign·j·γ̄·‖u‖²).
pub fn apply_kerr(w: &JonesWaveform, gamma_bar: f64, sign: f64) -> JonesWaveform {
    let mut out = w.clone();
    kerr_in_place(&mut out.samples, gamma_bar, sign);
    out
}

fn kerr_in_place(samples: &mut [JonesSample], gamma_bar: f64, sign: f64) {
    if gamma_bar == 0.0 {
        return;
    }
    for s in samples {
        let phi = sign * gamma_bar * s.norm_sqr();
        *s = s.rotate_phase(Complex64::from_polar(1.0, phi));
    }
}

/// Add circular complex Gaussian noise with total power `noise_power_w`
/// (both polarizations) over the full simulation bandwidth.
pub fn add_noise_w(w: &JonesWaveform, noise_power_w: f64, rng: &mut impl Rng) -> JonesWaveform {
    let mut out = w.clone();
    noise_in_place(&mut out.samples, noise_power_w, rng);
    out
}

/// [`add_noise_w`] with the power given in dBm; `-inf` leaves the waveform untouched.
pub fn add_noise(w: &JonesWaveform, noise_power_dbm: f64, rng: &mut impl Rng) -> JonesWaveform {
    add_noise_w(w, dbm_to_w(noise_power_dbm), rng)
}

fn noise_in_place(samples: &mut [JonesSample], noise_power_w: f64, rng: &mut impl Rng) {
    if !(noise_power_w > 0.0) {
        return;
    }
    let sigma = (noise_power_w / 4.0).sqrt();
    for s in samples {
        let mut g = || sigma * rng.sample::<f64, _>(StandardNormal);
        let n = JonesSample::new(Complex64::new(g(), g()), Complex64::new(g(), g()));
        *s = *s + n;
    }
}

fn lowpass_with(planner: &mut FftPlanner<f64>, w: &mut JonesWaveform, cutoff_hz: f64, sample_rate: f64) {
    let nyquist = sample_rate / 2.0;
    if cutoff_hz >= nyquist {
        return;
    }
    let grid = FrequencyGrid::new(w.len(), sample_rate);
    let wc = 2.0 * PI * cutoff_hz;
    fft_pair(planner, w, |k, x, y| {
        if grid.omega[k].abs() > wc {
            *x = Complex64::new(0.0, 0.0);
            *y = Complex64::new(0.0, 0.0);
        }
    });
}

/// Ideal brick-wall low-pass filter on both polarizations.
pub fn lowpass(w: &JonesWaveform, cutoff_hz: f64, sample_rate: f64) -> Result<JonesWaveform> {
    if cutoff_hz > sample_rate / 2.0 {
        return Err(Error::InvalidArgument(format!(
            "cutoff {cutoff_hz} Hz above Nyquist {} Hz",
            sample_rate / 2.0
        )));
    }
    let mut out = w.clone();
    lowpass_with(&mut FftPlanner::new(), &mut out, cutoff_hz, sample_rate);
    Ok(out)
}

/// Run the link on a block of (already padded) symbols.
///
/// `first_sample` is the absolute index of the block's first sample and
/// sets the time origin for drifting rotations.
fn simulate_block(
    cfg: &ChannelConfig,
    planner: &mut FftPlanner<f64>,
    symbols: &[JonesSample],
    first_sample: i64,
    noise_rng: &mut impl Rng,
) -> JonesWaveform {
    let mut w = pulse_shape(symbols, cfg.launch_power_dbm, cfg.rolloff);
    let fs = cfg.sample_rate();
    let time_varying = cfg.rotation_speed != 0.0;
    let rotate = |w: &mut JonesWaveform, alpha: f64| {
        if time_varying {
            for (j, s) in w.samples.iter_mut().enumerate() {
                let t = (first_sample + j as i64) as f64 / fs;
                *s = apply_rotation(*s, alpha + cfg.drift_at(t));
            }
        } else if alpha != 0.0 {
            for s in &mut w.samples {
                *s = apply_rotation(*s, alpha);
            }
        }
    };
    for span in &cfg.spans {
        rotate(&mut w, span.alpha);
        dgd_with(planner, &mut w, span.tau_k, fs);
        kerr_in_place(&mut w.samples, span.gamma_bar(), -1.0);
    }
    rotate(&mut w, cfg.output_alpha);
    noise_in_place(&mut w.samples, cfg.simulated_noise_power_w(), noise_rng);
    lowpass_with(planner, &mut w, cfg.lpf_cutoff_hz, fs);
    w
}

/// Continuous pilot stream, produced segment by segment.
pub struct PilotStream {
    cfg: ChannelConfig,
    segment_symbols: usize,
    guard_symbols: usize,
    symbol_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    planner: FftPlanner<f64>,
    /// Generated symbols, starting at absolute index `buffer_start`.
    buffer: Vec<JonesSample>,
    buffer_start: i64,
    next_segment: i64,
}

impl PilotStream {
    pub const DEFAULT_SEGMENT_SYMBOLS: usize = 16384;

    pub fn new(cfg: &ChannelConfig, seed: u64) -> Result<Self> {
        Self::with_segment(cfg, seed, Self::DEFAULT_SEGMENT_SYMBOLS)
    }

    pub fn with_segment(cfg: &ChannelConfig, seed: u64, segment_symbols: usize) -> Result<Self> {
        cfg.validate()?;
        if segment_symbols == 0 {
            return Err(Error::InvalidArgument("segment length must be positive".into()));
        }
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(STREAM_NOISE);
        Ok(Self {
            cfg: cfg.clone(),
            segment_symbols,
            guard_symbols: GUARD_SAMPLES / SAMPLES_PER_SYMBOL,
            symbol_rng: symbol_rng(seed),
            noise_rng,
            planner: FftPlanner::new(),
            buffer: Vec::new(),
            buffer_start: -((GUARD_SAMPLES / SAMPLES_PER_SYMBOL) as i64),
            next_segment: 0,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    /// Next `segment_symbols` pilots and their `2·segment_symbols` received samples.
    pub fn next_block(&mut self) -> PilotBlock {
        let m = self.segment_symbols as i64;
        let g = self.guard_symbols as i64;
        let start = self.next_segment * m;
        let lo = start - g;
        let hi = start + m + g;
        while self.buffer_start + (self.buffer.len() as i64) < hi {
            self.buffer.push(draw_symbol(&mut self.symbol_rng));
        }
        let off = (lo - self.buffer_start) as usize;
        let padded = &self.buffer[off..off + (hi - lo) as usize];
        let sps = SAMPLES_PER_SYMBOL as i64;
        let w = simulate_block(&self.cfg, &mut self.planner, padded, lo * sps, &mut self.noise_rng);
        let guard = (g * sps) as usize;
        let samples = w.samples[guard..w.samples.len() - guard].to_vec();
        let symbols = padded[g as usize..(g + m) as usize].to_vec();

        let keep_from = start + m - g;
        let drop = (keep_from - self.buffer_start) as usize;
        self.buffer.drain(..drop);
        self.buffer_start = keep_from;
        self.next_segment += 1;
        PilotBlock {
            symbols,
            waveform: JonesWaveform::new(samples),
        }
    }
}

/// Simulate one block of `n_symbols` pilots through the link.
pub fn run_channel(cfg: &ChannelConfig, n_symbols: usize, seed: u64) -> Result<PilotBlock> {
    if n_symbols == 0 {
        return Err(Error::InvalidArgument("symbol count must be positive".into()));
    }
    Ok(PilotStream::with_segment(cfg, seed, n_symbols)?.next_block())
}

const JWAV_MAGIC: &[u8; 4] = b"JWAV";
const JWAV_VERSION: u32 = 1;

/// Write a waveform dump: 32-byte header, then (x_re, x_im, y_re, y_im) f64
/// quadruples, all little-endian.
///
/// Header layout: magic `JWAV`, u32 version, u64 sample count,
/// u32 samples/symbol, u32 reserved (zero), f64 baud.
pub fn write_jwav(mut out: impl Write, w: &JonesWaveform, baud: f64) -> Result<()> {
    let mut header = Vec::with_capacity(32);
    header.extend_from_slice(JWAV_MAGIC);
    header.extend_from_slice(&JWAV_VERSION.to_le_bytes());
    header.extend_from_slice(&(w.len() as u64).to_le_bytes());
    header.extend_from_slice(&(SAMPLES_PER_SYMBOL as u32).to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    header.extend_from_slice(&baud.to_le_bytes());
    out.write_all(&header)?;
    let mut body = Vec::with_capacity(w.len() * 32);
    for s in &w.samples {
        for v in [s.x.re, s.x.im, s.y.re, s.y.im] {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&body)?;
    Ok(())
}

/// Read a dump written by [`write_jwav`]; returns the waveform and baud.
pub fn read_jwav(mut input: impl Read) -> Result<(JonesWaveform, f64)> {
    let mut header = [0u8; 32];
    input.read_exact(&mut header)?;
    if &header[0..4] != JWAV_MAGIC {
        return Err(Error::Format("bad JWAV magic".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != JWAV_VERSION {
        return Err(Error::Format(format!("unsupported JWAV version {version}")));
    }
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    if u32_at(16) as usize != SAMPLES_PER_SYMBOL {
        return Err(Error::Format("only 2 samples/symbol is supported".into()));
    }
    let baud = f64::from_le_bytes(header[24..32].try_into().unwrap());
    let mut body = vec![0u8; count * 32];
    input.read_exact(&mut body)?;
    let f = |i: usize| f64::from_le_bytes(body[i..i + 8].try_into().unwrap());
    let samples = (0..count)
        .map(|k| {
            let o = k * 32;
            JonesSample::new(Complex64::new(f(o), f(o + 8)), Complex64::new(f(o + 16), f(o + 24)))
        })
        .collect();
    Ok((JonesWaveform::new(samples), baud))
}
