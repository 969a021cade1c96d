//! Link-level simulator for an RIS-aided MIMO integrated sensing and
//! communication (ISAC) uplink.
//!
//! A UE talks to a BS through a large reflecting RIS sub-surface while two
//! small sensing sub-surfaces listen to the same uplink symbols and localize
//! the UE. The sensed location then drives the phase-2 beamformers.
//!
//! Module map:
//! - [`array_geometry`]: positions, array layouts, effective angles, steering vectors.
//! - [`channel`]: path loss, random gains and rank-1 LoS channel matrices.
//! - [`signal`]: snapshot synthesis, ECSI acquisition, SNR and rate metrics.
//! - [`sensing`]: FBSS, TLS-ESPRIT, MUSIC pairing, disambiguation and triangulation.
//! - [`beamforming`]: MRT-MRC, closed-form BS/RIS beams, S-SDR and S-MBS precoders.
//! - [`harness`]: scenarios, the two-phase protocol driver, Monte Carlo and CSV output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod array_geometry;
pub mod beamforming;
pub mod channel;
pub mod harness;
pub mod linalg;
pub mod sensing;
pub mod signal;

pub use num_complex::Complex64;

/// Dense complex column vector.
pub type CVector = nalgebra::DVector<Complex64>;
/// Dense complex matrix.
pub type CMatrix = nalgebra::DMatrix<Complex64>;
