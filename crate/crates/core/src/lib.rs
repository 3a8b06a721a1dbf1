//! Core numerics for RSS-map-assisted MIMO channel estimation.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Everything here is a pure function of its inputs; randomness is
//! supplied by the caller through an [`rand::Rng`] or an explicit seed.
//!
//! * [`channel`]: URA steering vectors, raised-cosine pulses and wideband
//!   multipath channel synthesis.
//! * [`propagation`]: a small geometric scene model (image-method reflections
//!   off axis-aligned buildings), RSS maps and GPS-perturbed map crops.
//! * [`estimators`]: pilot-limited least-squares estimators, SOMP and NMSE.
//! * [`autodiff`]: a tape-based reverse-mode engine over dense `f64` tensors.
//! * [`pinn`]: the physics-informed refinement network, its loss and trainer.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod autodiff;
pub mod channel;
pub mod estimators;
pub mod fft;
pub mod pinn;
pub mod propagation;

pub use num_complex::Complex64;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Intrinsic impedance of free space, ohms.
pub const ETA0: f64 = 376.730_313_668;
