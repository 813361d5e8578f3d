//! Closed-form sensitivity, rate and volume arithmetic.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::ELEMENTARY_CHARGE;

/// Lattice sites per µm³ of diamond for 1 ppm (1.76e23 cm⁻³ × 1e-6).
pub const SITES_PER_UM3_PER_PPM: f64 = 1.76e5;

/// Laser-beam interrogation volume implied by the published numbers (µm³).
pub const REFERENCE_SENSOR_VOLUME_UM3: f64 = 3.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensitivityError {
    #[error("invalid sensitivity input `{field}`: {reason}")]
    InvalidInput { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SensitivityError {
    SensitivityError::InvalidInput {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityInputs {
    pub linewidth_fwhm: f64,
    pub contrast: f64,
    /// Detected photons or charge carriers per second.
    pub rate: f64,
    /// Angle between NV axis and field (rad).
    pub theta: f64,
    /// Decades added to `rate`, e.g. to undo neutral-density attenuation.
    pub attenuation_od: f64,
    /// Gyromagnetic ratio (Hz/T).
    pub gamma: f64,
}

impl Default for SensitivityInputs {
    fn default() -> Self {
        Self {
            linewidth_fwhm: 11e6,
            contrast: 0.026,
            rate: carrier_rate_from_current(75e-12),
            theta: default_theta(),
            attenuation_od: 0.0,
            gamma: 28e9,
        }
    }
}

/// Ensemble convention `1 / cos θ = √3`.
pub fn default_theta() -> f64 {
    (1.0 / 3f64.sqrt()).acos()
}

impl SensitivityInputs {
    pub fn with_rate(&self, rate: f64) -> Self {
        Self {
            rate,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SensitivityError> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(invalid("rate", format!("must be > 0, got {}", self.rate)));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(invalid(
                "contrast",
                format!("must lie in (0, 1], got {}", self.contrast),
            ));
        }
        if !(self.linewidth_fwhm > 0.0 && self.linewidth_fwhm.is_finite()) {
            return Err(invalid("linewidth_fwhm", "must be > 0"));
        }
        if !(self.attenuation_od >= 0.0 && self.attenuation_od.is_finite()) {
            return Err(invalid("attenuation_od", "must be >= 0"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma", "must be > 0"));
        }
        if !(self.theta.cos() > 0.0) {
            return Err(invalid("theta", "cos(theta) must be > 0"));
        }
        Ok(())
    }
}

/// CW minimum detectable field (T/√Hz).
pub fn sensitivity_cw(inputs: &SensitivityInputs) -> Result<f64, SensitivityError> {
    inputs.validate()?;
    let lineshape = 4.0 / (3.0 * 3f64.sqrt());
    let rate = inputs.rate * 10f64.powf(inputs.attenuation_od);
    Ok(
        2f64.sqrt() / inputs.theta.cos() * lineshape * inputs.linewidth_fwhm
            / (inputs.gamma * inputs.contrast * rate.sqrt()),
    )
}

/// Sensitivity penalty of stroboscopic readout at laser duty `duty`.
pub fn plsd_penalty(duty: f64) -> Result<f64, SensitivityError> {
    if !(duty > 0.0 && duty < 1.0) {
        return Err(invalid("duty", format!("must lie in (0, 1), got {duty}")));
    }
    Ok(PI * duty.sqrt() / (2f64.sqrt() * (PI * duty).sin()))
}

pub fn sensitivity_plsd(inputs: &SensitivityInputs, duty: f64) -> Result<f64, SensitivityError> {
    Ok(sensitivity_cw(inputs)? * plsd_penalty(duty)?)
}

/// Charge carriers per second for a photocurrent in A.
pub fn carrier_rate_from_current(current: f64) -> f64 {
    current / ELEMENTARY_CHARGE
}

/// Interrogated volume (µm³) from the unattenuated rate, NV density and the
/// per-NV rate. The per-NV rate is a calibration input.
pub fn sensor_volume(
    rate_unfiltered: f64,
    density_ppm: f64,
    per_nv_rate: f64,
) -> Result<f64, SensitivityError> {
    if !(rate_unfiltered >= 0.0 && rate_unfiltered.is_finite()) {
        return Err(invalid("rate_unfiltered", "must be >= 0"));
    }
    if !(density_ppm > 0.0) {
        return Err(invalid("density_ppm", "must be > 0"));
    }
    if !(per_nv_rate > 0.0) {
        return Err(invalid("per_nv_rate", "must be > 0"));
    }
    Ok(rate_unfiltered / (per_nv_rate * density_ppm * SITES_PER_UM3_PER_PPM))
}

/// Projected sensitivity when the rate grows by `volume_ratio * current_gain`.
pub fn scaling_projection(
    base_sensitivity: f64,
    volume_ratio: f64,
    current_gain: f64,
) -> Result<f64, SensitivityError> {
    if !(volume_ratio > 0.0) {
        return Err(invalid("volume_ratio", "must be > 0"));
    }
    if !(current_gain > 0.0) {
        return Err(invalid("current_gain", "must be > 0"));
    }
    Ok(base_sensitivity / (volume_ratio * current_gain).sqrt())
}

/// A computed figure next to the published one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedComparison {
    pub label: String,
    pub computed: f64,
    pub published: f64,
    pub unit: String,
}

impl PublishedComparison {
    pub fn ratio(&self) -> f64 {
        self.computed / self.published
    }
}

/// Rates behind the published sensitivities (1/s).
pub const RAW_OPTICAL_RATE: f64 = 4e5;
pub const NOMINAL_OPTICAL_RATE: f64 = 2.2e11;
pub const PLSD_DUTY: f64 = 0.25;
/// 3 mm × 3 mm × 10 µm slab over the beam volume.
pub const PROJECTION_VOLUME_RATIO: f64 = 3e3 * 3e3 * 10.0 / REFERENCE_SENSOR_VOLUME_UM3;
/// 4 nA over 75 pA.
pub const PROJECTION_CURRENT_GAIN: f64 = 4e-9 / 75e-12;

/// All sensitivity figures with their published counterparts (T/√Hz, µm³).
pub fn published_comparisons(
    inputs: &SensitivityInputs,
) -> Result<Vec<PublishedComparison>, SensitivityError> {
    let electrical = sensitivity_cw(inputs)?;
    let row = |label: &str, computed: f64, published: f64, unit: &str| PublishedComparison {
        label: label.into(),
        computed,
        published,
        unit: unit.into(),
    };
    Ok(vec![
        row(
            "optical raw (CW)",
            sensitivity_cw(&inputs.with_rate(RAW_OPTICAL_RATE))?,
            53.2e-6,
            "T/√Hz",
        ),
        row(
            "optical nominal (CW)",
            sensitivity_cw(&inputs.with_rate(NOMINAL_OPTICAL_RATE))?,
            71e-9,
            "T/√Hz",
        ),
        row("photoelectric (CW)", electrical, 1.6e-6, "T/√Hz"),
        row(
            "photoelectric (PLSD)",
            sensitivity_plsd(inputs, PLSD_DUTY)?,
            2.4e-6,
            "T/√Hz",
        ),
        row(
            "projected (volume and current gain)",
            scaling_projection(1.6e-6, PROJECTION_VOLUME_RATIO, PROJECTION_CURRENT_GAIN)?,
            33e-12,
            "T/√Hz",
        ),
        row(
            "sensor volume",
            sensor_volume(NOMINAL_OPTICAL_RATE, 8.0, 4.88e4)?,
            REFERENCE_SENSOR_VOLUME_UM3,
            "µm³",
        ),
    ])
}
