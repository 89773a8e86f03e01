//! Adaptive multi-layer nonlinear equalizer for dual-polarization fiber
//! links, trained on-line by stochastic gradient descent.
//!
//! The crate contains the link emulator ([`channel`]), the forward pass
//! ([`equalizer`]), the hand-written backward pass and parameter update
//! ([`backprop`]), the streaming training loop ([`trainer`]) and the
//! experiment runner behind the `adapteq` binary ([`harness`]). Every stage
//! runs either in double precision or in a fixed-point model
//! ([`numerics`]).

pub mod backprop;
pub mod channel;
pub mod equalizer;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{FixedFormat, JonesSample, JonesWaveform, Mode, WordlengthProfile};
