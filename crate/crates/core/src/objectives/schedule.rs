use serde::Serialize;

use crate::error::{Error, Result};

/// Variance-preserving coefficients at diffusion time `t`:
/// `α = e^{−t}`, `β = √(1 − e^{−2t})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseSchedule {
    pub t: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub fn make_schedule(t: f64) -> Result<NoiseSchedule> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config(format!("diffusion time must be positive, got {t}")));
    }
    Ok(NoiseSchedule {
        t,
        alpha: (-t).exp(),
        beta: (-(-2.0 * t).exp_m1()).sqrt(),
    })
}
