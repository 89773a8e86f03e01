//! Backward propagation through the equalizer and the SGD update.
//!
//! Adjoints treat the real and imaginary part of every sample as separate
//! real variables, so the adjoint of a sample is again a [`JonesSample`].
//! The backward pass consumes a [`ForwardTape`] and walks the layers in
//! reverse: matched filter, then alternating MIMO-FIR and Kerr transposes.
//! Nothing upstream of the first trainable step is differentiated.

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex64;

use crate::equalizer::{
    fir_at_adjoint, mimo_fir_adjoint, EqualizerState, ForwardTape, KerrTape, LayerRecord, LinearStepParams, MatchedFilterParams,
    TapTensor, LINEAR_TAPS, NUM_PARAMS, NUM_STEPS,
};
use crate::error::{Error, Result};
use crate::numerics::{JonesSample, JonesWaveform, Mode, SAMPLES_PER_SYMBOL};

/// Tap gradients of the three linear steps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradientSet {
    pub steps: [TapTensor; NUM_STEPS],
}

impl GradientSet {
    pub fn zeros() -> Self {
        Self::default()
    }

    /// Flattened in the same order as [`EqualizerState::params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|s| s.iter().flatten().flatten().copied()).collect()
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != NUM_PARAMS {
            return Err(Error::LengthMismatch {
                expected: NUM_PARAMS,
                actual: v.len(),
            });
        }
        let mut g = Self::zeros();
        for (dst, src) in g.steps.iter_mut().flat_map(|s| s.iter_mut().flatten().flatten()).zip(v) {
            *dst = *src;
        }
        Ok(g)
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn map(&mut self, f: impl Fn(f64) -> f64) {
        self.steps.iter_mut().flat_map(|s| s.iter_mut().flatten().flatten()).for_each(|v| *v = f(*v));
    }

    pub fn add_scaled(&mut self, other: &GradientSet, k: f64) {
        for (a, b) in self
            .steps
            .iter_mut()
            .flat_map(|s| s.iter_mut().flatten().flatten())
            .zip(other.steps.iter().flat_map(|s| s.iter().flatten().flatten()))
        {
            *a += k * b;
        }
    }
}

/// Division by the batch size as a sum of right shifts, Σ 2^(−n_i).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ShiftDivisor {
    shifts: Vec<u32>,
}

impl ShiftDivisor {
    /// Relative error allowed for a shift set returned by [`ShiftDivisor::for_batch`].
    pub const TOLERANCE: f64 = 1e-3;

    pub fn new(mut shifts: Vec<u32>) -> Result<Self> {
        if shifts.is_empty() || shifts.iter().any(|&n| n > 52) {
            return Err(Error::InvalidArgument(format!("invalid shift set {shifts:?}")));
        }
        shifts.sort_unstable();
        Ok(Self { shifts })
    }

    pub fn shifts(&self) -> &[u32] {
        &self.shifts
    }

    /// The factor Σ 2^(−n_i).
    pub fn factor(&self) -> f64 {
        self.shifts.iter().map(|&n| (-(n as f64)).exp2()).sum()
    }

    /// (factor − 1/B)·B.
    pub fn relative_error(&self, batch: usize) -> f64 {
        self.factor() * batch as f64 - 1.0
    }

    /// Best approximation of 1/`batch` with at most `max_shifts` shifts of at
    /// most `max_exponent`. Ties go to fewer shifts.
    pub fn search(batch: usize, max_shifts: usize, max_exponent: u32) -> Result<Self> {
        if batch == 0 || max_shifts == 0 {
            return Err(Error::InvalidArgument("batch size and shift count must be positive".into()));
        }
        let target = 1.0 / batch as f64;
        let mut best: Option<(f64, Vec<u32>)> = None;
        let mut current = Vec::with_capacity(max_shifts);
        fn rec(
            start: u32,
            max_exponent: u32,
            left: usize,
            sum: f64,
            target: f64,
            current: &mut Vec<u32>,
            best: &mut Option<(f64, Vec<u32>)>,
        ) {
            if !current.is_empty() {
                let err = (sum - target).abs();
                let better = match best {
                    None => true,
                    Some((e, s)) => err < *e || (err == *e && current.len() < s.len()),
                };
                if better {
                    *best = Some((err, current.clone()));
                }
            }
            if left == 0 {
                return;
            }
            for n in start..=max_exponent {
                current.push(n);
                rec(n, max_exponent, left - 1, sum + (-(n as f64)).exp2(), target, current, best);
                current.pop();
            }
        }
        rec(0, max_exponent, max_shifts, 0.0, target, &mut current, &mut best);
        let (_, shifts) = best.expect("at least one candidate");
        Self::new(shifts)
    }

    /// Search with up to four shifts of at most 15 bits; fails if the best
    /// set misses 1/`batch` by more than [`ShiftDivisor::TOLERANCE`].
    pub fn for_batch(batch: usize) -> Result<Self> {
        let d = Self::search(batch, 4, 15)?;
        if d.relative_error(batch).abs() > Self::TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "no shift set within 0.1% of 1/{batch} (best {:?}, {:.4}%)",
                d.shifts,
                100.0 * d.relative_error(batch)
            )));
        }
        Ok(d)
    }
}

/// How the batch mean is formed.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Divisor {
    #[default]
    Exact,
    Shift(ShiftDivisor),
}

impl Divisor {
    /// Factor replacing 1/`batch`.
    pub fn factor(&self, batch: usize) -> f64 {
        match self {
            Divisor::Exact => 1.0 / batch as f64,
            Divisor::Shift(s) => s.factor(),
        }
    }
}

/// Expansion point of the Taylor polynomials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TaylorCenter {
    /// Expand around φ = 0.
    Zero,
    /// Expand around the multiple of π/2 nearest to φ; the quadrant rotation
    /// is a swap and sign change of cos/sin.
    #[default]
    Quadrant,
}

impl TaylorCenter {
    pub fn name(&self) -> &'static str {
        match self {
            TaylorCenter::Zero => "zero",
            TaylorCenter::Quadrant => "quadrant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(TaylorCenter::Zero),
            "quadrant" => Ok(TaylorCenter::Quadrant),
            other => Err(Error::InvalidArgument(format!("unknown Taylor center {other:?}"))),
        }
    }
}

/// Taylor-polynomial cos/sin inside the Kerr backward step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaylorConfig {
    pub order: u32,
    pub enabled: bool,
    pub center: TaylorCenter,
}

impl Default for TaylorConfig {
    fn default() -> Self {
        Self {
            order: 3,
            enabled: false,
            center: TaylorCenter::default(),
        }
    }
}

impl TaylorConfig {
    pub fn new(order: u32) -> Result<Self> {
        Self::with_center(order, TaylorCenter::default())
    }

    pub fn with_center(order: u32, center: TaylorCenter) -> Result<Self> {
        if !(1..=5).contains(&order) {
            return Err(Error::InvalidArgument(format!("Taylor order {order} outside 1..=5")));
        }
        Ok(Self {
            order,
            enabled: true,
            center,
        })
    }

    pub fn exact() -> Self {
        Self::default()
    }

    /// (cos φ, sin φ), exact or from Taylor polynomials.
    pub fn cos_sin(&self, phi: f64) -> (f64, f64) {
        if !self.enabled {
            let (s, c) = phi.sin_cos();
            return (c, s);
        }
        match self.center {
            TaylorCenter::Zero => self.poly(phi),
            TaylorCenter::Quadrant => {
                let q = (phi / FRAC_PI_2).round();
                let (c, s) = self.poly(phi - q * FRAC_PI_2);
                match (q as i64).rem_euclid(4) {
                    0 => (c, s),
                    1 => (-s, c),
                    2 => (-c, -s),
                    _ => (s, -c),
                }
            }
        }
    }

    fn poly(&self, x: f64) -> (f64, f64) {
        let (mut c, mut s) = (0.0, 0.0);
        let mut term = 1.0;
        for k in 0..=self.order {
            if k > 0 {
                term *= x / k as f64;
            }
            match k % 4 {
                0 => c += term,
                1 => s += term,
                2 => c -= term,
                _ => s -= term,
            }
        }
        (c, s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BackwardOptions {
    pub taylor: TaylorConfig,
    /// Flip the sign of the power-coupling term of the Kerr transpose
    /// (fault injection for the gradient checker).
    pub kerr_sign_fault: bool,
}

/// Batch MSE and its adjoint 2·(y − x)/B, with 1/B given by `divisor`.
pub fn loss_and_adjoint(y: &[JonesSample], x: &[JonesSample], divisor: &Divisor) -> Result<(f64, Vec<JonesSample>)> {
    if y.len() != x.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let inv_b = divisor.factor(y.len());
    let mut sum = 0.0;
    let dy = y
        .iter()
        .zip(x)
        .map(|(&a, &b)| {
            let e = a - b;
            sum += e.norm_sqr();
            e.scale(2.0 * inv_b)
        })
        .collect();
    Ok((sum * inv_b, dy))
}

fn quantize_all(v: &mut [JonesSample], mode: &Mode) {
    if mode.profile().is_some() {
        v.iter_mut().for_each(|s| *s = mode.signal(*s));
    }
}

fn quantize_taps(g: &mut TapTensor, mode: &Mode) {
    if let Some(p) = mode.profile() {
        g.iter_mut().flatten().flatten().for_each(|v| *v = p.taps.apply(*v));
    }
}

/// Transpose of [`crate::equalizer::mf_forward`] for an input of `n` samples.
pub fn mf_backward(dy: &[JonesSample], p: &MatchedFilterParams, phase: usize, n: usize, mode: &Mode) -> JonesWaveform {
    let taps = p.quantized(mode);
    let pad = taps.len() / 2;
    let keep: Vec<usize> = (phase..n).step_by(SAMPLES_PER_SYMBOL).take(dy.len()).collect();
    let mut dy = dy[..keep.len()].to_vec();
    quantize_all(&mut dy, mode);
    let mut d = fir_at_adjoint(&dy, &taps, &keep, n + 2 * pad);
    let mut d: Vec<JonesSample> = d.drain(pad..pad + n).collect();
    quantize_all(&mut d, mode);
    JonesWaveform::new(d)
}

fn kerr_adjoint(dv: &[JonesSample], tape: &KerrTape, opts: &BackwardOptions, mode: &Mode) -> Result<Vec<JonesSample>> {
    if dv.len() != tape.len() {
        return Err(Error::LengthMismatch {
            expected: tape.len(),
            actual: dv.len(),
        });
    }
    let coupling = if opts.kerr_sign_fault { 2.0 } else { -2.0 } * tape.coefficient;
    let mut out: Vec<JonesSample> = dv
        .iter()
        .zip(&tape.input)
        .zip(&tape.phi)
        .map(|((d, u), &phi)| {
            let (c, s) = opts.taylor.cos_sin(phi);
            let e = Complex64::new(c, s);
            let v = u.rotate_phase(e);
            // Σ_q Im(conj(dv_q)·v_q)
            let im = (d.x.conj() * v.x).im + (d.y.conj() * v.y).im;
            let back = d.rotate_phase(e.conj());
            back + u.scale(coupling * im)
        })
        .collect();
    quantize_all(&mut out, mode);
    Ok(out)
}

/// Transpose of the Kerr step u ↦ u·e^{jφ(u)} at the taped inputs.
pub fn kerr_backward(dv: &JonesWaveform, tape: &KerrTape, taylor: &TaylorConfig, mode: &Mode) -> Result<JonesWaveform> {
    let opts = BackwardOptions {
        taylor: *taylor,
        ..Default::default()
    };
    kerr_backward_with_options(dv, tape, &opts, mode)
}

/// [`kerr_backward`] honoring every field of `opts`.
pub fn kerr_backward_with_options(dv: &JonesWaveform, tape: &KerrTape, opts: &BackwardOptions, mode: &Mode) -> Result<JonesWaveform> {
    let mut dv = dv.samples.clone();
    quantize_all(&mut dv, mode);
    Ok(JonesWaveform::new(kerr_adjoint(&dv, tape, opts, mode)?))
}

/// Transpose of [`crate::equalizer::linear_step_forward`]: input adjoint and tap gradient.
pub fn linear_backward(
    dx_out: &JonesWaveform,
    x_in: &JonesWaveform,
    p: &LinearStepParams,
    mode: &Mode,
) -> Result<(JonesWaveform, TapTensor)> {
    if dx_out.len() != x_in.len() {
        return Err(Error::LengthMismatch {
            expected: x_in.len(),
            actual: dx_out.len(),
        });
    }
    let pad = (LINEAR_TAPS - 1) / 2;
    let taps = p.quantized(mode.profile().map(|q| q.taps));
    let mut ext = vec![JonesSample::ZERO; x_in.len() + 2 * pad];
    ext[pad..pad + x_in.len()].copy_from_slice(&x_in.samples);
    let mut d = dx_out.samples.clone();
    quantize_all(&mut d, mode);
    let (mut d_ext, mut g) = mimo_fir_adjoint(&d, &ext, &taps);
    let mut d_in: Vec<JonesSample> = d_ext.drain(pad..pad + x_in.len()).collect();
    quantize_all(&mut d_in, mode);
    quantize_taps(&mut g, mode);
    Ok((JonesWaveform::new(d_in), g))
}

/// Gradient of the loss whose adjoint w.r.t. `tape.symbols` is `dy`.
///
/// The tape covers the full receptive field of its outputs, so the result is
/// the exact gradient for that chunk (in reference mode).
pub fn backward(tape: &ForwardTape, dy: &[JonesSample], state: &EqualizerState, opts: &BackwardOptions) -> Result<GradientSet> {
    if dy.len() != tape.symbols.len() {
        return Err(Error::LengthMismatch {
            expected: tape.symbols.len(),
            actual: dy.len(),
        });
    }
    let mode = &tape.mode;
    let mut g = GradientSet::zeros();
    if dy.is_empty() {
        return Ok(g);
    }
    let mut dy = dy.to_vec();
    quantize_all(&mut dy, mode);
    let mf_taps = state.mf.quantized(mode);
    let mut d = fir_at_adjoint(&dy, &mf_taps, &tape.mf_keep, tape.mf_ext.len());
    quantize_all(&mut d, mode);

    let first_linear = tape
        .records
        .iter()
        .position(|r| matches!(r, LayerRecord::Linear { .. }))
        .unwrap_or(tape.records.len());
    for (idx, rec) in tape.records.iter().enumerate().skip(first_linear).rev() {
        match rec {
            LayerRecord::Linear { step, ext } => {
                if ext.len() != d.len() + LINEAR_TAPS - 1 {
                    return Err(Error::LengthMismatch {
                        expected: ext.len() + 1 - LINEAR_TAPS,
                        actual: d.len(),
                    });
                }
                let taps = state.linear[*step].quantized(mode.profile().map(|q| q.taps));
                let (d_ext, mut grad) = mimo_fir_adjoint(&d, ext, &taps);
                quantize_taps(&mut grad, mode);
                g.steps[*step] = grad;
                if idx == first_linear {
                    break;
                }
                d = d_ext;
                quantize_all(&mut d, mode);
            }
            LayerRecord::Kerr { tape: kt, .. } => d = kerr_adjoint(&d, kt, opts, mode)?,
        }
    }
    Ok(g)
}

/// θ ← θ − ξ·g, re-quantized to the tap format in fixed-point mode.
pub fn sgd_update(state: &mut EqualizerState, g: &GradientSet, xi: f64, mode: &Mode) -> Result<()> {
    if !(xi >= 0.0) || !xi.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {xi} must be finite and non-negative")));
    }
    if let Some(bad) = g.flatten().into_iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(bad));
    }
    for (s, gs) in state.linear.iter_mut().zip(&g.steps) {
        for (t, d) in s.taps.iter_mut().flatten().flatten().zip(gs.iter().flatten().flatten()) {
            let v = *t - xi * d;
            *t = match mode {
                Mode::Reference => v,
                Mode::Quantized(p) => p.taps.apply(v),
            };
        }
    }
    Ok(())
}

/// Scale every gradient entry by `k`.
pub fn scale_gradients(g: &GradientSet, k: f64) -> GradientSet {
    let mut out = *g;
    out.map(|v| v * k);
    out
}
