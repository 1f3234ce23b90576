//! High-order Nyström solver for sound-soft acoustic scattering in 3D.
//!
//! The scatterer surface is described by an atlas of overlapping smooth
//! charts together with a partition of unity. The combined-field
//! (Brakhage–Werner) boundary integral equation is discretized on uniform
//! per-chart grids: the smooth part of the kernel is integrated with the
//! biperiodic trapezoidal rule, while the weakly singular part is localized
//! by a floating cut-off and integrated in polar coordinates around the
//! singularity, with radial nodes placed on grid lines so that densities can
//! be evaluated by one-dimensional trigonometric interpolation. A piecewise
//! Hermite variant of the singular evaluation is provided as well.
//!
//! The crate ships the solver itself ([`solver`]), the geometry and kernel
//! machinery it is built from ([`geometry`], [`kernels`], [`trig`],
//! [`quadrature`]), independent reference computations used for validation
//! ([`oracle`]), and an experiment driver with a CLI ([`harness`]).

pub mod error;
pub mod geometry;
pub mod harness;
pub mod kernels;
pub mod oracle;
pub mod quadrature;
pub mod solver;
pub mod trig;

pub use error::{Error, Result};

/// Complex scalar used throughout the solver.
pub type C64 = num_complex::Complex64;

/// Point or vector in physical space.
pub type Vec3 = [f64; 3];

/// Point in a chart parameter domain.
pub type Vec2 = [f64; 2];

pub(crate) fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn normalize3(a: Vec3) -> Vec3 {
    scale3(a, 1.0 / norm3(a))
}
