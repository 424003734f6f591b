//! Numeric verification harnesses behind the `verify-*` and `gradcheck`
//! commands. Each report exposes `passed()` for use as an exit status.

pub mod kl;
pub mod lrt;
pub mod sweep;

pub use kl::{verify_kl, KlConfig, KlReport};
pub use lrt::{verify_lrt, LrtConfig, LrtReport};
pub use sweep::{gradcheck_sweep, SweepReport};

/// Two-sided tail mass of a standard normal beyond 3.
pub const P_3SE: f64 = 0.002_699_796_063_260_207;

/// Largest number of 3 SE exceedances among `m` independent checks that is
/// still within three binomial standard deviations of the expected count.
pub fn allowed_exceedances(m: usize) -> usize {
    let m = m as f64;
    (m * P_3SE + 3.0 * (m * P_3SE * (1.0 - P_3SE)).sqrt()).floor() as usize
}
