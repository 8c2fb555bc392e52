//! # oscamp
//!
//! Numerical machinery for weakly nonlinear geometric optics at a weakly
//! stable (WR-class) boundary of a semilinear hyperbolic system
//!
//! ```text
//!   dV/dt + B_1 dV/dx_1 + ... + B_d dV/dx_d + D0 V + D(V,V) = 0      (x_d > 0)
//!   B V + Psi(V,V) = eps^2 G(t, x', phi_0/eps)                        (x_d = 0)
//!   V = 0                                                             (t < 0)
//! ```
//!
//! where the boundary data oscillates at a frequency `beta = (tau, eta)` at
//! which the Lopatinskii determinant vanishes simply.  The hallmark of this
//! regime is *amplification*: `O(eps^2)` boundary data produces an `O(eps)`
//! response, carried by a boundary amplitude `a(t, x_1, theta_0)` that obeys
//! a nonlocal transport equation with a Burgers self-interaction and a memory
//! term fed back by a resonantly generated outgoing wave.
//!
//! Module map:
//!
//! - [`model`] — problem datum (matrices, quadratic nonlinearities, boundary
//!   frequency, oscillatory source), config parsing and validation.
//! - [`spectral`] — per-frequency spectral package: dispersion roots, group
//!   velocities, projectors `P_m`, partial inverses `R_m`, the vectors `e`
//!   and `b`, the Lopatinskii transport field, resonance triples.
//! - [`profiles`] — multi-phase Fourier calculus: the projector `E`, the
//!   partial inverse `R`, preparation maps and interaction integrals.
//! - [`amplitude`] — the key profile subsystem: incoming translates, the
//!   outgoing corrector profile, and the amplified boundary amplitude
//!   equation with exact-memory and co-evolved-grid variants.
//! - [`corrector`] — fast-variable corrector `U2_p(x, theta_0, x_d/eps)` and
//!   assembly of leading/corrected approximate solutions.
//! - [`solver`] — direct wavelength-resolving finite-difference solver of the
//!   original problem, amplification measurements, error reports.
//! - [`nashmoser`] — smoothing-operator family and the Nash-Moser iteration
//!   on the discretized key subsystem, with a Picard comparison exhibiting
//!   the loss of one derivative.
//! - [`harness`] — experiment drivers, norm utilities, CSV emission, and the
//!   tolerance-band defaults used by the verification suites.

pub mod amplitude;
pub mod corrector;
pub mod error;
pub mod harness;
pub mod model;
pub mod nashmoser;
pub mod profiles;
pub mod solver;
pub mod spectral;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
