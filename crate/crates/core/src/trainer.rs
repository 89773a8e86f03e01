//! On-line training over a continuous pilot stream.
//!
//! The received waveform is normalized by the launch power and cut into
//! chunks of `2·B` samples. Each chunk yields `B` symbol estimates (after a
//! one-time warm-up that fills the pipeline), which are compared with the
//! pilots to form the batch loss, its gradient and an SGD step.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;

use crate::backprop::{backward, loss_and_adjoint, sgd_update, BackwardOptions, Divisor, GradientSet, TaylorConfig};
use crate::channel::{ChannelConfig, PilotStream};
use crate::equalizer::{align_phase, EqualizerState, EqualizerStream, KerrStepParams, LinearStepParams, LINEAR_TAPS, NUM_STEPS};
use crate::error::{Error, Result};
use crate::numerics::{JonesSample, JonesWaveform, Mode, SAMPLES_PER_SYMBOL};

/// Sliding-window length in symbols.
pub const SNR_WINDOW: usize = 4096;

/// Learning rates per launch power (dBm, ξ), from a grid search over ξ = 2^−k
/// at B = 21 and 3·10⁵ symbols.
pub const DEFAULT_LEARNING_RATES: [(f64, f64); 6] = [
    (4.0, 1.0 / 256.0),
    (6.0, 1.0 / 256.0),
    (8.0, 1.0 / 256.0),
    (10.0, 1.0 / 512.0),
    (12.0, 1.0 / 512.0),
    (14.0, 1.0 / 1024.0),
];

/// ξ for `power_dbm`: the table entry closest in power.
pub fn learning_rate_for_power(table: &[(f64, f64)], power_dbm: f64) -> Option<f64> {
    table
        .iter()
        .min_by(|a, b| (a.0 - power_dbm).abs().total_cmp(&(b.0 - power_dbm).abs()))
        .map(|&(_, xi)| xi)
}

/// −10·log10(mse).
pub fn effective_snr_db(mse: f64) -> Result<f64> {
    if !(mse > 0.0) || !mse.is_finite() {
        return Err(Error::InvalidArgument(format!("MSE {mse} must be positive and finite")));
    }
    Ok(-10.0 * mse.log10())
}

/// Effective SNR of the trailing `window` squared errors; element `i` covers
/// symbols `i .. i + window`.
pub fn sliding_window_snr(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || series.len() < window {
        return Err(Error::InvalidArgument(format!(
            "series of {} symbols is shorter than the {window}-symbol window",
            series.len()
        )));
    }
    let mut out = Vec::with_capacity(series.len() - window + 1);
    let mut sum = 0.0;
    let mut nonzero = 0usize;
    for (i, &e) in series.iter().enumerate() {
        sum += e;
        nonzero += (e != 0.0) as usize;
        if i >= window {
            let old = series[i - window];
            sum -= old;
            nonzero -= (old != 0.0) as usize;
        }
        // Refresh the running sum once per window to bound drift.
        if i + 1 >= window && (i + 1) % window == 0 {
            sum = series[i + 1 - window..=i].iter().sum();
        }
        if i + 1 >= window {
            let mse = if nonzero == 0 { 0.0 } else { sum.max(f64::MIN_POSITIVE) / window as f64 };
            out.push(effective_snr_db(mse)?);
        }
    }
    Ok(out)
}

/// Equalizer Kerr steps matching the spans of `cfg`, last span first.
pub fn kerr_params(cfg: &ChannelConfig) -> Result<[KerrStepParams; NUM_STEPS]> {
    if cfg.spans.len() != NUM_STEPS {
        return Err(Error::InvalidArgument(format!("expected {NUM_STEPS} spans, got {}", cfg.spans.len())));
    }
    let p = cfg.launch_power_w();
    Ok(std::array::from_fn(|i| KerrStepParams {
        gamma_bar: cfg.spans[NUM_STEPS - 1 - i].gamma_bar(),
        power_ref_w: p,
    }))
}

/// Identity linear steps, Kerr steps from `cfg`, RRC matched filter.
pub fn init_identity(cfg: &ChannelConfig) -> Result<EqualizerState> {
    Ok(EqualizerState::identity(kerr_params(cfg)?, cfg.rolloff))
}

fn rotation(alpha: f64) -> [[f64; 2]; 2] {
    let (s, c) = alpha.sin_cos();
    [[c, s], [-s, c]]
}

fn matmul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j]))
}

fn transpose(a: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// Real 5-tap FIR approximating a delay of `delay` samples (may be
/// fractional or negative), least squares over |f| ≤ `band`·fs/2.
pub fn fractional_delay_taps(delay: f64, band: f64) -> [f64; LINEAR_TAPS] {
    const GRID: usize = 2048;
    let c = (LINEAR_TAPS - 1) as f64 / 2.0;
    let mut a = [[0.0; LINEAR_TAPS]; LINEAR_TAPS];
    let mut b = [0.0; LINEAR_TAPS];
    for k in 0..GRID {
        // Midpoint rule on [0, band·π]; the band is symmetric so cosines suffice.
        let w = (k as f64 + 0.5) / GRID as f64 * band * PI;
        for t in 0..LINEAR_TAPS {
            let dt = t as f64 - c;
            b[t] += (w * (dt - delay)).cos();
            for (s, a_ts) in a[t].iter_mut().enumerate() {
                *a_ts += (w * (dt - (s as f64 - c))).cos();
            }
        }
    }
    solve(a, b)
}

fn solve<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> [f64; N] {
    for col in 0..N {
        let piv = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..N {
            let f = a[r][col] / a[col][col];
            for k in col..N {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for r in (0..N).rev() {
        let s: f64 = (r + 1..N).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Analytic channel inverse at t = 0: equalizer Kerr steps undo the spans
/// in reverse, and linear step i undoes rotation and DGD of span 2 − i. The
/// output rotation is folded into step 0.
pub fn init_channel_inverse(cfg: &ChannelConfig) -> Result<EqualizerState> {
    init_channel_inverse_band(cfg, INVERSE_DESIGN_BAND)
}

/// Fraction of the Nyquist band over which the DGD inverse is fitted.
pub const INVERSE_DESIGN_BAND: f64 = 0.8;

/// [`init_channel_inverse`] with the delay filters fitted over |f| ≤ `band`·fs/2.
pub fn init_channel_inverse_band(cfg: &ChannelConfig, band: f64) -> Result<EqualizerState> {
    let mut state = init_identity(cfg)?;
    let fs = cfg.sample_rate();
    for i in 0..NUM_STEPS {
        let span = &cfg.spans[NUM_STEPS - 1 - i];
        // The channel delays x by τ/2 and advances y by τ/2.
        let d = span.tau_k / 2.0 * fs;
        let hx = fractional_delay_taps(-d, band);
        let hy = fractional_delay_taps(d, band);
        let post = transpose(rotation(span.alpha));
        let pre = if i == 0 {
            transpose(rotation(cfg.output_alpha))
        } else {
            [[1.0, 0.0], [0.0, 1.0]]
        };
        let mut p = LinearStepParams::zeros();
        for t in 0..LINEAR_TAPS {
            let m = matmul(post, matmul([[hx[t], 0.0], [0.0, hy[t]]], pre));
            for a in 0..2 {
                for b in 0..2 {
                    p.taps[a][b][t] = m[a][b];
                }
            }
        }
        state.linear[i] = p;
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Training symbols; the run processes `n_symbols / batch_size` batches.
    pub n_symbols: usize,
    /// Batches between computing a gradient and applying it.
    pub update_delay: usize,
    pub mode: Mode,
    pub taylor: TaylorConfig,
    pub divisor: Divisor,
    /// Record the parameters every this many batches (0 disables).
    pub snapshot_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 21,
            learning_rate: learning_rate_for_power(&DEFAULT_LEARNING_RATES, 10.0).unwrap(),
            n_symbols: 300_000,
            update_delay: 0,
            mode: Mode::Reference,
            taylor: TaylorConfig::exact(),
            divisor: Divisor::Exact,
            snapshot_every: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.n_symbols < self.batch_size {
            return Err(Error::InvalidArgument("fewer training symbols than one batch".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricSeries {
    /// ‖y_k − x_k‖²/2 per symbol: squared error per polarization, on the
    /// scale of the unit-power constellation.
    pub squared_error: Vec<f64>,
    /// Sliding-window SNR; element `i` ends at symbol `i + SNR_WINDOW − 1`.
    pub window_snr_db: Vec<f64>,
    pub batch_loss: Vec<f64>,
    pub batch_size: usize,
    /// (batch index, flattened parameters).
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

impl MetricSeries {
    /// Window SNR ending at `symbol`, if a full window is available.
    pub fn window_snr_at(&self, symbol: usize) -> Option<f64> {
        symbol.checked_sub(SNR_WINDOW - 1).and_then(|i| self.window_snr_db.get(i).copied())
    }

    /// Mean window SNR over windows ending in the final quarter of the run.
    pub fn steady_state_snr_db(&self) -> Option<f64> {
        let n = self.squared_error.len();
        if n < 4 * SNR_WINDOW {
            return None;
        }
        let from = n - n / 4;
        let vals = &self.window_snr_db[from - (SNR_WINDOW - 1)..];
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// First symbol whose window SNR is within 0.5 dB of `steady`.
    pub fn convergence_symbol(&self, steady: f64) -> Option<usize> {
        self.window_snr_db
            .iter()
            .position(|&v| v >= steady - 0.5)
            .map(|i| i + SNR_WINDOW - 1)
    }

    /// CSV with header `symbol_index,window_snr_db,batch_loss`, preceded by
    /// `comments` as `#` lines.
    pub fn write_csv(&self, mut out: impl Write, comments: &[String]) -> Result<()> {
        let mut buf = String::with_capacity(self.squared_error.len() * 32);
        for c in comments {
            buf.push_str("# ");
            buf.push_str(c);
            buf.push('\n');
        }
        buf.push_str("symbol_index,window_snr_db,batch_loss\n");
        let b = self.batch_size.max(1);
        for k in 0..self.squared_error.len() {
            buf.push_str(&k.to_string());
            buf.push(',');
            if let Some(v) = self.window_snr_at(k) {
                buf.push_str(&v.to_string());
            }
            buf.push(',');
            if (k + 1) % b == 0 {
                if let Some(l) = self.batch_loss.get(k / b) {
                    buf.push_str(&l.to_string());
                }
            }
            buf.push('\n');
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub state: EqualizerState,
    pub metrics: MetricSeries,
    pub steady_state_snr_db: Option<f64>,
    pub convergence_symbol: Option<usize>,
    pub config: TrainingConfig,
    pub channel: ChannelConfig,
    pub seed: u64,
    pub phase: usize,
}

/// Squared error of one symbol estimate, averaged over the two polarizations.
pub fn symbol_error(y: &JonesSample, x: &JonesSample) -> f64 {
    0.5 * (*y - *x).norm_sqr()
}

/// Normalized received samples and pilots, pulled from a [`PilotStream`] on demand.
struct Feed {
    stream: PilotStream,
    scale: f64,
    samples: VecDeque<JonesSample>,
    pilots: VecDeque<JonesSample>,
    pilot_start: i64,
}

impl Feed {
    fn new(cfg: &ChannelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            stream: PilotStream::new(cfg, seed)?,
            scale: 1.0 / cfg.launch_power_w().sqrt(),
            samples: VecDeque::new(),
            pilots: VecDeque::new(),
            pilot_start: 0,
        })
    }

    fn pull(&mut self) {
        let block = self.stream.next_block();
        let k = self.scale;
        self.samples.extend(block.waveform.samples.iter().map(|s| s.scale(k)));
        self.pilots.extend(block.symbols);
    }

    fn take(&mut self, n: usize) -> Vec<JonesSample> {
        while self.samples.len() < n {
            self.pull();
        }
        self.samples.drain(..n).collect()
    }

    fn peek(&mut self, n: usize) -> Vec<JonesSample> {
        while self.samples.len() < n {
            self.pull();
        }
        self.samples.iter().take(n).copied().collect()
    }

    /// Pilots `first .. first + n`; earlier pilots are released.
    fn pilots(&mut self, first: i64, n: usize) -> Vec<JonesSample> {
        let drop = (first - self.pilot_start).max(0) as usize;
        self.pilots.drain(..drop.min(self.pilots.len()));
        self.pilot_start += drop as i64;
        self.pilots.iter().take(n).copied().collect()
    }
}

/// Train `s0` on the pilot stream of `ch` generated with `seed`.
pub fn train(ch: &ChannelConfig, s0: &EqualizerState, tc: &TrainingConfig, seed: u64) -> Result<RunResult> {
    tc.validate()?;
    ch.validate()?;
    let mut state = s0.clone();
    let mode = tc.mode;
    let mut feed = Feed::new(ch, seed)?;

    let probe = feed.peek(4 * SNR_WINDOW);
    let phase = align_phase(&JonesWaveform::new(probe), &state, &mode);
    let mut eq = EqualizerStream::new(&state, phase);
    let warm = feed.take(eq.warmup_samples(&state));
    eq.process(&state, &warm, &mode);

    let b = tc.batch_size;
    let n_batches = tc.n_symbols / b;
    let opts = BackwardOptions {
        taylor: tc.taylor,
        kerr_sign_fault: false,
    };
    let mut metrics = MetricSeries {
        squared_error: Vec::with_capacity(n_batches * b),
        batch_loss: Vec::with_capacity(n_batches),
        batch_size: b,
        ..Default::default()
    };
    let mut pending: VecDeque<GradientSet> = VecDeque::with_capacity(tc.update_delay + 1);
    for batch in 0..n_batches {
        let chunk = feed.take(SAMPLES_PER_SYMBOL * b);
        let tape = eq.process(&state, &chunk, &mode);
        let pilots = feed.pilots(tape.first_symbol, tape.symbols.len());
        debug_assert_eq!(tape.symbols.len(), b);
        let (loss, dy) = loss_and_adjoint(&tape.symbols, &pilots, &tc.divisor)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                batch,
                reason: format!("loss {loss}"),
            });
        }
        metrics.batch_loss.push(loss);
        metrics
            .squared_error
            .extend(tape.symbols.iter().zip(&pilots).map(|(y, x)| symbol_error(y, x)));

        pending.push_back(backward(&tape, &dy, &state, &opts)?);
        if pending.len() > tc.update_delay {
            let g = pending.pop_front().unwrap();
            sgd_update(&mut state, &g, tc.learning_rate, &mode).map_err(|e| Error::Diverged {
                batch,
                reason: e.to_string(),
            })?;
        }
        if tc.snapshot_every > 0 && batch % tc.snapshot_every == 0 {
            metrics.snapshots.push((batch, state.params()));
        }
    }

    if metrics.squared_error.len() >= SNR_WINDOW {
        metrics.window_snr_db = sliding_window_snr(&metrics.squared_error, SNR_WINDOW)?;
    }
    let steady = metrics.steady_state_snr_db();
    Ok(RunResult {
        convergence_symbol: steady.and_then(|s| metrics.convergence_symbol(s)),
        steady_state_snr_db: steady,
        state,
        metrics,
        config: tc.clone(),
        channel: ch.clone(),
        seed,
        phase,
    })
}

/// Effective SNR of `state` without training, over symbols `skip ..` of a
/// `n_symbols` run.
pub fn evaluate(ch: &ChannelConfig, state: &EqualizerState, mode: &Mode, n_symbols: usize, skip: usize, seed: u64) -> Result<f64> {
    let tc = TrainingConfig {
        batch_size: 1,
        learning_rate: 0.0,
        n_symbols,
        mode: *mode,
        ..Default::default()
    };
    if skip >= n_symbols {
        return Err(Error::InvalidArgument("nothing left to evaluate".into()));
    }
    let r = train(ch, state, &tc, seed)?;
    let e = &r.metrics.squared_error[skip..];
    effective_snr_db(e.iter().sum::<f64>() / e.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backprop::ShiftDivisor;
    use crate::numerics::WordlengthProfile;

    #[test]
    fn snr_examples() {
        assert_eq!(effective_snr_db(1.0).unwrap(), 0.0);
        assert!((effective_snr_db(0.01).unwrap() - 20.0).abs() < 1e-12);
        assert!((effective_snr_db(10f64.powf(-2.12)).unwrap() - 21.2).abs() < 1e-12);
        assert!(effective_snr_db(0.0).is_err());
        assert!(effective_snr_db(-1.0).is_err());
    }

    #[test]
    fn sliding_window_examples() {
        let s = sliding_window_snr(&vec![0.01; 10_000], SNR_WINDOW).unwrap();
        assert_eq!(s.len(), 10_000 - SNR_WINDOW + 1);
        assert!(s.iter().all(|v| (v - 20.0).abs() < 1e-9));

        let mut z = vec![0.01; 5000];
        z[..SNR_WINDOW].iter_mut().for_each(|v| *v = 0.0);
        assert!(sliding_window_snr(&z, SNR_WINDOW).is_err());
        assert!(sliding_window_snr(&[0.1; 100], SNR_WINDOW).is_err());

        // Step from 0.01 to 0.1 at symbol 6000: transition spans one window.
        let mut st = vec![0.01; 6000];
        st.extend(vec![0.1; 6000]);
        let s = sliding_window_snr(&st, SNR_WINDOW).unwrap();
        let at = |end: usize| s[end + 1 - SNR_WINDOW];
        assert!((at(5999) - 20.0).abs() < 1e-9);
        assert!(at(6000) < 20.0);
        assert!(at(6000 + SNR_WINDOW - 2) > 10.0 + 1e-9);
        assert!((at(6000 + SNR_WINDOW - 1) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn learning_rate_lookup() {
        let t = [(4.0, 0.1), (10.0, 0.2)];
        assert_eq!(learning_rate_for_power(&t, 9.0), Some(0.2));
        assert_eq!(learning_rate_for_power(&t, 5.0), Some(0.1));
        assert_eq!(learning_rate_for_power(&[], 5.0), None);
    }

    #[test]
    fn fractional_delay_design() {
        let h = fractional_delay_taps(0.0, 1.0);
        for (t, v) in h.iter().enumerate() {
            assert!((v - if t == 2 { 1.0 } else { 0.0 }).abs() < 1e-9, "{h:?}");
        }
        // Mirror symmetry between opposite delays.
        let a = fractional_delay_taps(0.07, 0.8);
        let b = fractional_delay_taps(-0.07, 0.8);
        for t in 0..LINEAR_TAPS {
            assert!((a[t] - b[LINEAR_TAPS - 1 - t]).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_init_properties() {
        let ch = ChannelConfig::standard(3);
        let s = init_identity(&ch).unwrap();
        assert!(s.params().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!((s.kerr[0].coefficient() - 106.666_666_666 * 0.01).abs() < 1e-9);
        let mut bad = ch.clone();
        bad.spans.pop();
        assert!(init_identity(&bad).is_err());
        assert!(init_channel_inverse(&bad).is_err());
    }

    fn noiseless(seed: u64) -> ChannelConfig {
        let mut ch = ChannelConfig::standard(seed);
        ch.noise_power_dbm = f64::NEG_INFINITY;
        ch
    }

    #[test]
    fn channel_inverse_exact_without_dgd_and_kerr() {
        let mut ch = noiseless(4);
        for s in &mut ch.spans {
            s.tau_k = 0.0;
            s.gamma = 0.0;
        }
        let s = init_channel_inverse(&ch).unwrap();
        let snr = evaluate(&ch, &s, &Mode::Reference, 20_000, 100, 1).unwrap();
        assert!(snr > 40.0, "{snr}");
    }

    #[test]
    fn channel_inverse_on_noiseless_channel() {
        // Residual error comes from the 5-tap delay fits, amplified by the
        // Kerr steps, so the floor drops with launch power.
        for (power, floor) in [(6.0, 30.0), (10.0, 22.0)] {
            for seed in [1, 2, 3] {
                let mut ch = noiseless(seed);
                ch.launch_power_dbm = power;
                let s = init_channel_inverse(&ch).unwrap();
                let snr = evaluate(&ch, &s, &Mode::Reference, 20_000, 100, 7).unwrap();
                assert!(snr > floor, "{power} dBm seed {seed}: {snr}");
            }
        }
    }

    #[test]
    fn identity_gradient_is_nonzero_on_real_channel() {
        let ch = ChannelConfig::standard(5);
        let tc = TrainingConfig {
            n_symbols: 21,
            learning_rate: 0.0,
            snapshot_every: 0,
            ..Default::default()
        };
        let s0 = init_identity(&ch).unwrap();
        let mut feed = Feed::new(&ch, 1).unwrap();
        let mut eq = EqualizerStream::new(&s0, 0);
        let warm = feed.take(eq.warmup_samples(&s0) + 200);
        eq.process(&s0, &warm, &tc.mode);
        let tape = eq.process(&s0, &feed.take(42), &tc.mode);
        let x = feed.pilots(tape.first_symbol, tape.symbols.len());
        let (_, dy) = loss_and_adjoint(&tape.symbols, &x, &Divisor::Exact).unwrap();
        let g = backward(&tape, &dy, &s0, &BackwardOptions::default()).unwrap();
        assert!(g.max_abs() > 1e-3);
    }

    #[test]
    fn zero_learning_rate_keeps_state_and_matches_one_pass() {
        let ch = ChannelConfig::standard(6);
        let s0 = init_channel_inverse(&ch).unwrap();
        let tc = TrainingConfig {
            n_symbols: 2100,
            learning_rate: 0.0,
            snapshot_every: 10,
            ..Default::default()
        };
        let r = train(&ch, &s0, &tc, 3).unwrap();
        assert_eq!(r.state, s0);
        assert!(r.metrics.snapshots.iter().all(|(_, p)| *p == s0.params()));
        assert_eq!(r.metrics.batch_loss.len(), 100);

        // Batch-boundary transparency against a single forward pass.
        let mut feed = Feed::new(&ch, 3).unwrap();
        let mut eq = EqualizerStream::new(&s0, r.phase);
        let n = eq.warmup_samples(&s0) + 2 * 2100;
        let tape = eq.process(&s0, &feed.take(n), &Mode::Reference);
        let x = feed.pilots(0, 2100);
        let errs: Vec<f64> = tape.symbols.iter().zip(&x).map(|(y, x)| symbol_error(y, x)).collect();
        assert_eq!(errs, r.metrics.squared_error);
    }

    #[test]
    fn training_improves_identity_start_and_is_deterministic() {
        let mut ch = ChannelConfig::standard(7);
        ch.launch_power_dbm = 4.0;
        let s0 = init_identity(&ch).unwrap();
        let tc = TrainingConfig {
            n_symbols: 20_000,
            learning_rate: 1.0 / 64.0,
            ..Default::default()
        };
        let a = train(&ch, &s0, &tc, 11).unwrap();
        let b = train(&ch, &s0, &tc, 11).unwrap();
        assert_eq!(a, b);
        let head: f64 = a.metrics.squared_error[..2000].iter().sum();
        let tail: f64 = a.metrics.squared_error[18_000..].iter().sum();
        assert!(tail < 0.5 * head, "{head} -> {tail}");
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.metrics.write_csv(&mut buf_a, &["x".into()]).unwrap();
        b.metrics.write_csv(&mut buf_b, &["x".into()]).unwrap();
        assert_eq!(buf_a, buf_b);
        let text = String::from_utf8(buf_a).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# x"));
        assert_eq!(lines.next(), Some("symbol_index,window_snr_db,batch_loss"));
        assert_eq!(lines.next(), Some("0,,"));
        let row = text.lines().nth(2 + 20).unwrap();
        assert_eq!(row.split(',').nth(2).unwrap().parse::<f64>().unwrap(), a.metrics.batch_loss[0]);
    }

    #[test]
    fn quantized_run_stays_on_grid() {
        let ch = ChannelConfig::standard(8);
        let prof = WordlengthProfile::default();
        let tc = TrainingConfig {
            n_symbols: 4200,
            mode: Mode::Quantized(prof),
            divisor: Divisor::Shift(ShiftDivisor::for_batch(21).unwrap()),
            taylor: TaylorConfig::new(3).unwrap(),
            update_delay: 2,
            ..Default::default()
        };
        let r = train(&ch, &init_identity(&ch).unwrap(), &tc, 1).unwrap();
        assert!(r.state.params().iter().all(|&v| prof.taps.is_representable(v)));
    }

    #[test]
    fn steady_state_needs_four_windows() {
        let m = MetricSeries {
            squared_error: vec![0.01; 4 * SNR_WINDOW - 1],
            window_snr_db: vec![20.0; 3 * SNR_WINDOW],
            batch_size: 1,
            ..Default::default()
        };
        assert_eq!(m.steady_state_snr_db(), None);
        let m = MetricSeries {
            squared_error: vec![0.01; 4 * SNR_WINDOW],
            window_snr_db: vec![20.0; 3 * SNR_WINDOW + 1],
            batch_size: 1,
            ..Default::default()
        };
        assert_eq!(m.steady_state_snr_db(), Some(20.0));
        assert_eq!(m.convergence_symbol(20.0), Some(SNR_WINDOW - 1));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ch = ChannelConfig::standard(1);
        let s0 = init_identity(&ch).unwrap();
        for tc in [
            TrainingConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainingConfig {
                learning_rate: -1.0,
                ..Default::default()
            },
            TrainingConfig {
                n_symbols: 3,
                ..Default::default()
            },
        ] {
            assert!(train(&ch, &s0, &tc, 1).is_err());
        }
    }
}
