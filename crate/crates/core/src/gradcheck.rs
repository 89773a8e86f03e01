//! Finite-difference verification of the hand-written backward pass.
//!
//! Each instance draws random taps, Kerr coefficients and input samples, then
//! compares every analytic derivative against a central difference of the
//! corresponding forward computation: per layer (MF, each Kerr step, each
//! linear step) and for the whole pipeline over all trainable parameters.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backprop::{backward, kerr_backward_with_options, linear_backward, loss_and_adjoint, mf_backward, BackwardOptions, Divisor};
use crate::equalizer::{
    kerr_step_forward, linear_step_forward, mf_forward, EqualizerState, EqualizerStream, KerrStepParams, LayerOrder,
    LinearStepParams, LINEAR_TAPS, NUM_PARAMS, NUM_STEPS,
};
use crate::error::{Error, Result};
use crate::numerics::{JonesSample, JonesWaveform, Mode, SAMPLES_PER_SYMBOL};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;

/// Central-difference step.
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    /// Output symbols per instance.
    pub symbols: usize,
    /// Kerr γ̄ is drawn uniformly from [0, gamma_bar_max] rad/W.
    pub gamma_bar_max: f64,
    pub power_ref_w: f64,
    pub layer_order: LayerOrder,
    pub options: BackwardOptions,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            symbols: 64,
            gamma_bar_max: 106.7,
            power_ref_w: 0.01,
            layer_order: LayerOrder::KerrFirst,
            options: BackwardOptions::default(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub instance: usize,
    /// `mf`, `kerr<i>`, `linear<i>` or `pipeline`.
    pub layer: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<LayerCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(LayerCheck::passed)
    }

    /// Worst error over the instances, per layer, in first-seen order.
    pub fn per_layer(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for c in &self.checks {
            match out.iter_mut().find(|(l, _)| *l == c.layer) {
                Some((_, e)) => *e = e.max(c.max_rel_error),
                None => out.push((c.layer.clone(), c.max_rel_error)),
            }
        }
        out
    }

    pub fn failing_layers(&self) -> Vec<String> {
        self.per_layer().into_iter().filter(|(_, e)| !(*e < TOLERANCE)).map(|(l, _)| l).collect()
    }

    /// Trainable parameters covered by the pipeline check of one instance.
    pub fn params_checked(&self) -> usize {
        self.checks.iter().filter(|c| c.layer == "pipeline").map(|c| c.checked).max().unwrap_or(0)
    }
}

/// Floor of the relative-error denominator, as a fraction of the largest
/// analytic component of the same vector. Components that cancel to near
/// zero would otherwise be compared against pure rounding noise.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// max |a − b| / max(|a|, |b|, floor) over (analytic, finite-difference) pairs.
fn max_rel_error(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs.iter().map(|p| p.0.abs()).fold(0.0, f64::max);
    let floor = (RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
    pairs
        .iter()
        .map(|&(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn random_samples(n: usize, rng: &mut impl Rng, scale: f64) -> Vec<JonesSample> {
    (0..n)
        .map(|_| {
            let mut g = || rng.random_range(-scale..scale);
            JonesSample::new(Complex64::new(g(), g()), Complex64::new(g(), g()))
        })
        .collect()
}

fn nudge(u: &mut JonesSample, comp: usize, h: f64) {
    match comp {
        0 => u.x.re += h,
        1 => u.x.im += h,
        2 => u.y.re += h,
        _ => u.y.im += h,
    }
}

fn component(u: &JonesSample, comp: usize) -> f64 {
    [u.x.re, u.x.im, u.y.re, u.y.im][comp]
}

/// ⟨a − b, d⟩ accumulated per sample, which keeps the central difference
/// free of cancellation between two large sums.
fn diff_inner(a: &[JonesSample], b: &[JonesSample], d: &[JonesSample]) -> f64 {
    a.iter().zip(b).zip(d).map(|((a, b), d)| (*a - *b).dot(d)).sum()
}

/// Worst error of `analytic` against d/dx ⟨f(x), d⟩ over every input component.
fn input_fd(x: &[JonesSample], analytic: &[JonesSample], d: &[JonesSample], f: impl Fn(&[JonesSample]) -> Vec<JonesSample>) -> f64 {
    let mut pairs = Vec::with_capacity(4 * x.len());
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        for comp in 0..4 {
            nudge(&mut xp[k], comp, STEP);
            let fp = f(&xp);
            nudge(&mut xp[k], comp, -2.0 * STEP);
            let fm = f(&xp);
            nudge(&mut xp[k], comp, STEP);
            pairs.push((component(&analytic[k], comp), diff_inner(&fp, &fm, d) / (2.0 * STEP)));
        }
    }
    max_rel_error(&pairs)
}

fn random_state(cfg: &GradcheckConfig, rng: &mut impl Rng) -> EqualizerState {
    let kerr = std::array::from_fn(|_| KerrStepParams {
        gamma_bar: rng.random_range(0.0..=cfg.gamma_bar_max),
        power_ref_w: cfg.power_ref_w,
    });
    let mut s = EqualizerState::identity(kerr, 0.1);
    s.layer_order = cfg.layer_order;
    for l in &mut s.linear {
        l.taps.iter_mut().flatten().flatten().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    s
}

fn pipeline_symbols(state: &EqualizerState, x: &[JonesSample]) -> Vec<JonesSample> {
    EqualizerStream::new(state, 0).process(state, x, &Mode::Reference).symbols
}

fn check_pipeline(state: &EqualizerState, x: &[JonesSample], targets: &[JonesSample], opts: &BackwardOptions) -> Result<f64> {
    let tape = EqualizerStream::new(state, 0).process(state, x, &Mode::Reference);
    if tape.symbols.is_empty() {
        return Err(Error::InvalidArgument("instance too short to produce symbols".into()));
    }
    let f = tape.first_symbol as usize;
    let t = &targets[f..f + tape.symbols.len()];
    let (_, dy) = loss_and_adjoint(&tape.symbols, t, &Divisor::Exact)?;
    let g = backward(&tape, &dy, state, opts)?.flatten();
    let params = state.params();
    let mut s = state.clone();
    let mut pairs = Vec::with_capacity(NUM_PARAMS);
    for i in 0..NUM_PARAMS {
        let mut p = params.clone();
        p[i] += STEP;
        s.set_params(&p)?;
        let yp = pipeline_symbols(&s, x);
        p[i] -= 2.0 * STEP;
        s.set_params(&p)?;
        let ym = pipeline_symbols(&s, x);
        // ‖y⁺ − t‖² − ‖y⁻ − t‖² = ⟨y⁺ − y⁻, y⁺ + y⁻ − 2t⟩
        let w: Vec<JonesSample> = yp.iter().zip(&ym).zip(t).map(|((a, b), t)| *a + *b - *t * 2.0).collect();
        pairs.push((g[i], diff_inner(&yp, &ym, &w) / (t.len() as f64 * 2.0 * STEP)));
    }
    Ok(max_rel_error(&pairs))
}

fn check_linear(p: &LinearStepParams, x: &JonesWaveform, d: &JonesWaveform) -> Result<f64> {
    let m = Mode::Reference;
    let (dx, g) = linear_backward(d, x, p, &m)?;
    let f = |x: &[JonesSample], p: &LinearStepParams| linear_step_forward(&JonesWaveform::new(x.to_vec()), p, &m).samples;
    let worst = input_fd(&x.samples, &dx.samples, &d.samples, |xp| f(xp, p));
    let mut pairs = Vec::with_capacity(4 * LINEAR_TAPS);
    for a in 0..2 {
        for b in 0..2 {
            for t in 0..LINEAR_TAPS {
                let (mut pp, mut pm) = (*p, *p);
                pp.taps[a][b][t] += STEP;
                pm.taps[a][b][t] -= STEP;
                let fd = diff_inner(&f(&x.samples, &pp), &f(&x.samples, &pm), &d.samples) / (2.0 * STEP);
                pairs.push((g[a][b][t], fd));
            }
        }
    }
    Ok(worst.max(max_rel_error(&pairs)))
}

fn check_kerr(p: &KerrStepParams, x: &JonesWaveform, d: &JonesWaveform, opts: &BackwardOptions) -> Result<f64> {
    let m = Mode::Reference;
    let (_, tape) = kerr_step_forward(x, p, &m);
    let dx = kerr_backward_with_options(d, &tape, opts, &m)?;
    Ok(input_fd(&x.samples, &dx.samples, &d.samples, |xp| {
        kerr_step_forward(&JonesWaveform::new(xp.to_vec()), p, &m).0.samples
    }))
}

fn check_mf(state: &EqualizerState, x: &JonesWaveform, d: &[JonesSample]) -> f64 {
    let m = Mode::Reference;
    let dx = mf_backward(d, &state.mf, 0, x.len(), &m);
    input_fd(&x.samples, &dx.samples, d, |xp| mf_forward(&JonesWaveform::new(xp.to_vec()), &state.mf, 0, &m))
}

/// Run every instance; errors only on malformed configurations.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.instances == 0 || cfg.symbols == 0 {
        return Err(Error::InvalidArgument("gradcheck needs at least one instance and one symbol".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradcheckReport::default();
    let n = cfg.symbols * SAMPLES_PER_SYMBOL;
    for instance in 0..cfg.instances {
        let state = random_state(cfg, &mut rng);
        let mut push = |layer: String, checked: usize, err: f64| {
            report.checks.push(LayerCheck {
                instance,
                layer,
                checked,
                max_rel_error: err,
            })
        };
        let x = JonesWaveform::new(random_samples(n, &mut rng, 0.8));
        let d = JonesWaveform::new(random_samples(n, &mut rng, 1.0));
        let dy = random_samples(n / SAMPLES_PER_SYMBOL, &mut rng, 1.0);
        push("mf".into(), 4 * n, check_mf(&state, &x, &dy));
        for i in 0..NUM_STEPS {
            push(format!("kerr{i}"), 4 * n, check_kerr(&state.kerr[i], &x, &d, &cfg.options)?);
        }
        for i in 0..NUM_STEPS {
            push(format!("linear{i}"), 4 * n + 4 * LINEAR_TAPS, check_linear(&state.linear[i], &x, &d)?);
        }
        let targets = random_samples(cfg.symbols, &mut rng, 0.7);
        push("pipeline".into(), NUM_PARAMS, check_pipeline(&state, &x.samples, &targets, &cfg.options)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GradcheckConfig {
        GradcheckConfig {
            instances: 2,
            symbols: 32,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_pass_on_every_layer() {
        let r = run_gradcheck(&small()).unwrap();
        assert!(r.passed(), "{:?}", r.per_layer());
        assert_eq!(r.params_checked(), 60);
        let layers: Vec<String> = r.per_layer().into_iter().map(|(l, _)| l).collect();
        assert_eq!(layers, ["mf", "kerr0", "kerr1", "kerr2", "linear0", "linear1", "linear2", "pipeline"]);
    }

    #[test]
    fn kerr_fault_is_localized() {
        let mut cfg = small();
        cfg.options.kerr_sign_fault = true;
        let r = run_gradcheck(&cfg).unwrap();
        let failing = r.failing_layers();
        assert!(failing.iter().all(|l| l.starts_with("kerr") || l == "pipeline"), "{failing:?}");
        assert!(failing.iter().any(|l| l.starts_with("kerr")));
        assert!(failing.contains(&"pipeline".to_string()));
    }

    #[test]
    fn linear_first_order_passes() {
        let mut cfg = small();
        cfg.layer_order = LayerOrder::LinearFirst;
        assert!(run_gradcheck(&cfg).unwrap().passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_rel_error(&[(1.0, 1.0), (2.0, 2.0)]), 0.0);
        assert!((max_rel_error(&[(1.0, 1.0 + 1e-6)]) - 1e-6 / (1.0 + 1e-6)).abs() < 1e-15);
        // A near-zero component is measured against 1e-4 of the largest one.
        let e = max_rel_error(&[(1.0, 1.0), (1e-8, 2e-8)]);
        assert!((e - 1e-4).abs() < 1e-12, "{e}");
        assert!(max_rel_error(&[(1.0, 1.0), (0.5, -0.5)]) >= 1.0);
    }

    #[test]
    fn empty_config_is_rejected() {
        let cfg = GradcheckConfig {
            instances: 0,
            ..Default::default()
        };
        assert!(run_gradcheck(&cfg).is_err());
    }
}
