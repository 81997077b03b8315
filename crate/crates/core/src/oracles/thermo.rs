//! Binding free energy arithmetic.

use crate::error::{LimoError, Result};

/// Gas constant in kcal/(mol·K).
pub const GAS_CONSTANT: f64 = 0.0019872;
pub const DEFAULT_TEMPERATURE: f64 = 298.15;

/// Dissociation constant in nanomolar from a binding free energy in kcal/mol.
/// Negative (favorable) energies give constants below 1 M.
pub fn kd_from_dg(dg: f64, temperature: f64) -> f64 {
    (dg / (GAS_CONSTANT * temperature)).exp() * 1e9
}

/// `-RT ln Σ exp(-ΔG_i / RT)` over pose energies.
pub fn combine_poses(dgs: &[f64], temperature: f64) -> Result<f64> {
    if dgs.is_empty() {
        return Err(LimoError::InvalidInput("no pose energies".into()));
    }
    let rt = GAS_CONSTANT * temperature;
    let lowest = dgs.iter().copied().fold(f64::INFINITY, f64::min);
    if !lowest.is_finite() {
        return Err(LimoError::NonFinite("pose energies"));
    }
    let sum: f64 = dgs.iter().map(|&g| (-(g - lowest) / rt).exp()).sum();
    Ok(lowest - rt * sum.ln())
}
