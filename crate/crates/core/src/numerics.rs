//! Fixed-point value model and the complex/Jones sample types.
//!
//! Fixed-point values are carried as `f64`. Every format used here has at
//! most 32 bits, so each representable value is exact in double precision
//! and quantization can be modeled as scale, round, clamp, unscale.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// A single complex sample of one polarization.
pub type ComplexSample = Complex64;

/// Samples per symbol used by the channel and the equalizer.
pub const SAMPLES_PER_SYMBOL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rounding {
    NearestEven,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Overflow {
    Saturate,
}

/// Two's-complement fixed-point format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FixedFormat {
    wordlength: u32,
    frac_bits: u32,
    rounding: Rounding,
    overflow: Overflow,
}

impl FixedFormat {
    pub fn new(wordlength: u32, frac_bits: u32) -> Result<Self> {
        if !(2..=32).contains(&wordlength) {
            return Err(Error::InvalidFormat(format!(
                "wordlength {wordlength} outside 2..=32"
            )));
        }
        if frac_bits >= wordlength {
            return Err(Error::InvalidFormat(format!(
                "frac_bits {frac_bits} must be below wordlength {wordlength}"
            )));
        }
        Ok(Self {
            wordlength,
            frac_bits,
            rounding: Rounding::NearestEven,
            overflow: Overflow::Saturate,
        })
    }

    /// Format with `int_bits` bits left of the binary point (sign included),
    /// i.e. range [-2^(int_bits-1), 2^(int_bits-1)).
    pub fn with_int_bits(wordlength: u32, int_bits: u32) -> Result<Self> {
        if int_bits == 0 || int_bits > wordlength {
            return Err(Error::InvalidFormat(format!(
                "{int_bits} integer bits do not fit a {wordlength}-bit word"
            )));
        }
        Self::new(wordlength, wordlength - int_bits)
    }

    pub fn wordlength(&self) -> u32 {
        self.wordlength
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    pub fn overflow(&self) -> Overflow {
        self.overflow
    }

    /// Weight of the least significant bit.
    pub fn step(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn min_value(&self) -> f64 {
        -((self.wordlength - 1) as f64).exp2() * self.step()
    }

    pub fn max_value(&self) -> f64 {
        (((self.wordlength - 1) as f64).exp2() - 1.0) * self.step()
    }

    pub fn is_representable(&self, x: f64) -> bool {
        x.is_finite() && self.apply(x) == x
    }

    /// Quantize a finite value. Non-finite values are rejected.
    pub fn quantize(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::NonFinite(x));
        }
        Ok(self.apply(x))
    }

    /// Hot-path quantizer. NaN propagates; infinities saturate.
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        let scale = (self.frac_bits as f64).exp2();
        let top = ((self.wordlength - 1) as f64).exp2();
        let code = (x * scale).round_ties_even().clamp(-top, top - 1.0);
        code / scale
    }

    #[inline]
    pub fn apply_complex(&self, z: Complex64) -> Complex64 {
        Complex64::new(self.apply(z.re), self.apply(z.im))
    }

    #[inline]
    pub fn apply_jones(&self, u: JonesSample) -> JonesSample {
        JonesSample::new(self.apply_complex(u.x), self.apply_complex(u.y))
    }
}

impl fmt::Display for FixedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.wordlength - self.frac_bits, self.frac_bits)
    }
}

/// Nearest representable value in `fmt` (ties to even, saturating).
pub fn quantize(x: f64, fmt: FixedFormat) -> Result<f64> {
    fmt.quantize(x)
}

/// Saturating fixed-point addition.
pub fn fx_add(a: f64, b: f64, fmt: FixedFormat) -> Result<f64> {
    fmt.quantize(a + b)
}

/// Full-precision product rounded to the output format.
pub fn fx_mul(a: f64, b: f64, fmt_out: FixedFormat) -> Result<f64> {
    fmt_out.quantize(a * b)
}

/// Integer bits (sign included) assumed by [`WordlengthProfile::from_wordlengths`].
///
/// Signals and the Kerr coefficient are unit-scale, so three integer bits give
/// a range of ±4. The Kerr angle needs ±8 rad to cover high-power peaks. Taps
/// stay within ±2 and matched-filter taps within ±1.
pub const DEFAULT_INT_BITS: [u32; 5] = [3, 3, 4, 2, 1];

/// Paper operating point for the five wordlengths.
pub const DEFAULT_WORDLENGTHS: [u32; 5] = [14, 16, 12, 14, 12];

/// Formats for the five quantized signal classes of the equalizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WordlengthProfile {
    /// Symbols, samples and backward-pass signals.
    pub signal: FixedFormat,
    /// Normalized Kerr coefficient.
    pub gamma: FixedFormat,
    /// Kerr rotation angle.
    pub kerr_angle: FixedFormat,
    /// Linear-step taps and their gradients.
    pub taps: FixedFormat,
    /// Matched-filter taps.
    pub mf: FixedFormat,
}

impl WordlengthProfile {
    /// Build a profile from five wordlengths (signal, gamma, angle, taps, mf)
    /// using [`DEFAULT_INT_BITS`].
    pub fn from_wordlengths(wl: [u32; 5]) -> Result<Self> {
        let f = |i: usize| FixedFormat::with_int_bits(wl[i], DEFAULT_INT_BITS[i].min(wl[i]));
        Ok(Self {
            signal: f(0)?,
            gamma: f(1)?,
            kerr_angle: f(2)?,
            taps: f(3)?,
            mf: f(4)?,
        })
    }

    pub fn wordlengths(&self) -> [u32; 5] {
        [
            self.signal.wordlength(),
            self.gamma.wordlength(),
            self.kerr_angle.wordlength(),
            self.taps.wordlength(),
            self.mf.wordlength(),
        ]
    }

    pub fn formats(&self) -> [FixedFormat; 5] {
        [self.signal, self.gamma, self.kerr_angle, self.taps, self.mf]
    }
}

impl Default for WordlengthProfile {
    fn default() -> Self {
        Self::from_wordlengths(DEFAULT_WORDLENGTHS).expect("default wordlengths are valid")
    }
}

impl fmt::Display for WordlengthProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.wordlengths();
        write!(f, "{}/{}/{}/{}/{}", w[0], w[1], w[2], w[3], w[4])
    }
}

/// Arithmetic model: double precision, or fixed point under a profile.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Reference,
    Quantized(WordlengthProfile),
}

impl Mode {
    pub fn profile(&self) -> Option<&WordlengthProfile> {
        match self {
            Mode::Reference => None,
            Mode::Quantized(p) => Some(p),
        }
    }

    #[inline]
    pub(crate) fn signal(&self, u: JonesSample) -> JonesSample {
        match self {
            Mode::Reference => u,
            Mode::Quantized(p) => p.signal.apply_jones(u),
        }
    }
}

/// Dual-polarization sample (Jones vector).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JonesSample {
    pub x: Complex64,
    pub y: Complex64,
}

impl JonesSample {
    pub const ZERO: JonesSample = JonesSample {
        x: Complex64::new(0.0, 0.0),
        y: Complex64::new(0.0, 0.0),
    };

    pub const fn new(x: Complex64, y: Complex64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn norm_sqr(&self) -> f64 {
        self.x.norm_sqr() + self.y.norm_sqr()
    }

    #[inline]
    pub fn scale(&self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k)
    }

    #[inline]
    pub fn rotate_phase(&self, rot: Complex64) -> Self {
        Self::new(self.x * rot, self.y * rot)
    }

    #[inline]
    pub fn pol(&self, p: usize) -> Complex64 {
        if p == 0 {
            self.x
        } else {
            self.y
        }
    }

    #[inline]
    pub fn pol_mut(&mut self, p: usize) -> &mut Complex64 {
        if p == 0 {
            &mut self.x
        } else {
            &mut self.y
        }
    }

    /// Real inner product over the four real components.
    #[inline]
    pub fn dot(&self, other: &JonesSample) -> f64 {
        self.x.re * other.x.re
            + self.x.im * other.x.im
            + self.y.re * other.y.re
            + self.y.im * other.y.im
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for JonesSample {
    type Output = JonesSample;
    fn add(self, o: JonesSample) -> JonesSample {
        JonesSample::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for JonesSample {
    type Output = JonesSample;
    fn sub(self, o: JonesSample) -> JonesSample {
        JonesSample::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for JonesSample {
    type Output = JonesSample;
    fn mul(self, k: f64) -> JonesSample {
        self.scale(k)
    }
}

/// Dual-polarization waveform at two samples per symbol.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JonesWaveform {
    pub samples: Vec<JonesSample>,
}

impl JonesWaveform {
    pub fn new(samples: Vec<JonesSample>) -> Self {
        Self { samples }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![JonesSample::ZERO; n])
    }

    pub fn samples_per_symbol(&self) -> usize {
        SAMPLES_PER_SYMBOL
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(JonesSample::norm_sqr).sum()
    }

    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.energy() / self.samples.len() as f64
        }
    }
}

/// Real inner product of two equally long sample sequences.
pub fn inner(a: &[JonesSample], b: &[JonesSample]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u.dot(v)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q42() -> FixedFormat {
        FixedFormat::new(4, 2).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.25, q42()).unwrap(), 0.25);
        assert_eq!(quantize(0.30, q42()).unwrap(), 0.25);
        assert_eq!(quantize(2.70, q42()).unwrap(), 1.75);
        assert_eq!(quantize(-3.0, q42()).unwrap(), -2.0);
    }

    #[test]
    fn quantize_ties_to_even() {
        // 0.125 and 0.375 sit halfway between grid points of step 0.25.
        assert_eq!(quantize(0.125, q42()).unwrap(), 0.0);
        assert_eq!(quantize(0.375, q42()).unwrap(), 0.5);
        assert_eq!(quantize(-0.125, q42()).unwrap(), 0.0);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        assert!(quantize(f64::NAN, q42()).is_err());
        assert!(quantize(f64::INFINITY, q42()).is_err());
    }

    #[test]
    fn format_validation() {
        assert!(FixedFormat::new(1, 0).is_err());
        assert!(FixedFormat::new(33, 0).is_err());
        assert!(FixedFormat::new(8, 8).is_err());
        assert!(FixedFormat::new(32, 31).is_ok());
        let f = q42();
        assert_eq!(f.min_value(), -2.0);
        assert_eq!(f.max_value(), 1.75);
    }

    #[test]
    fn add_and_mul_examples() {
        assert_eq!(fx_add(0.25, 0.25, q42()).unwrap(), 0.5);
        assert_eq!(fx_add(1.75, 0.25, q42()).unwrap(), 1.75);
        assert_eq!(fx_add(0.3, 0.0, q42()).unwrap(), quantize(0.3, q42()).unwrap());
        let q86 = FixedFormat::new(8, 6).unwrap();
        assert_eq!(fx_mul(0.5, 0.5, q86).unwrap(), 0.25);
        assert_eq!(fx_mul(0.3, 1.0, q86).unwrap(), quantize(0.3, q86).unwrap());
        // 0.3046875^2 = 0.09283447265625, nearest multiple of 0.25 is 0.
        let prod = 0.3046875f64 * 0.3046875;
        assert_eq!(prod, 0.09283447265625);
        assert_eq!(fx_mul(0.3046875, 0.3046875, q42()).unwrap(), 0.0);
    }

    #[test]
    fn default_profile() {
        let p = WordlengthProfile::default();
        assert_eq!(p.wordlengths(), [14, 16, 12, 14, 12]);
        assert_eq!(p.signal.frac_bits(), 11);
        assert_eq!(p.taps.max_value(), 2.0 - p.taps.step());
        assert_eq!(p.to_string(), "14/16/12/14/12");
    }

    fn any_format() -> impl Strategy<Value = FixedFormat> {
        (2u32..=32).prop_flat_map(|w| (Just(w), 0..w)).prop_map(|(w, f)| FixedFormat::new(w, f).unwrap())
    }

    proptest! {
        #[test]
        fn idempotent(x in -1e6f64..1e6, f in any_format()) {
            let once = f.quantize(x).unwrap();
            prop_assert_eq!(f.quantize(once).unwrap(), once);
        }

        #[test]
        fn bounded_error_inside_range(u in 0.0f64..1.0, f in any_format()) {
            let x = f.min_value() + u * (f.max_value() - f.min_value());
            let q = f.quantize(x).unwrap();
            prop_assert!((q - x).abs() <= f.step() / 2.0);
        }

        #[test]
        fn monotone(a in -1e4f64..1e4, b in -1e4f64..1e4, f in any_format()) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(f.quantize(lo).unwrap() <= f.quantize(hi).unwrap());
        }

        #[test]
        fn saturates_into_range(x in -1e12f64..1e12, f in any_format()) {
            let q = f.quantize(x).unwrap();
            prop_assert!(q >= f.min_value() && q <= f.max_value());
            prop_assert!(f.is_representable(q));
        }
    }
}
