//! NV-ensemble physics: ground-state resonances, the five-level rate model,
//! coherent evolution of the {m_s=0, m_s=+1} pseudo-spin and the
//! spin-dependent photocurrent.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Plain 3-vector used for fields and Bloch vectors.
pub type Vec3 = [f64; 3];

/// Operating point the photocurrent calibration is pinned to.
pub const OPERATING_POWER_MW: f64 = 8.0;
pub const OPERATING_BIAS_V: f64 = 15.0;
pub const OPERATING_CURRENT_PA: f64 = 75.0;

/// Denominators of the saturation law closer than this to zero are rejected.
const SATURATION_POLE_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NvError {
    #[error("invalid NV parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },
    #[error("laser power {power_mw} mW is outside the saturation-law domain")]
    SaturationDomain { power_mw: f64 },
    #[error("step size {dt:e} s exceeds the guard {max:e} s (tau_excited / 10)")]
    StepSize { dt: f64, max: f64 },
    #[error("spin contrast input {value} outside [-{contrast}, 0]")]
    ContrastRange { value: f64, contrast: f64 },
}

/// Physical constants and sample properties of the NV ensemble.
///
/// Frequencies in Hz, times in s, saturation coefficients in pA/mW² and 1/mW.
/// `v_ref` is the bias voltage at which the saturation law gives the current
/// directly; its default is chosen so that 8 mW at 15 V yields 75 pA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NVParams {
    pub d_gs: f64,
    pub gamma: f64,
    pub intrinsic_splitting: f64,
    pub tau_shelf: f64,
    pub tau_excited: f64,
    pub branch_shelf: f64,
    pub branch_repolarize: f64,
    pub alpha_sat: f64,
    pub beta_sat: f64,
    pub linewidth_fwhm: f64,
    pub contrast_cw: f64,
    pub t2_star: f64,
    pub t2: f64,
    pub nv_density_ppm: f64,
    pub v_ref: f64,
}

impl Default for NVParams {
    fn default() -> Self {
        let alpha_sat = 1.26;
        let beta_sat = -0.07;
        let p = OPERATING_POWER_MW;
        let sat_at_operating_point = alpha_sat * p * p / (1.0 + beta_sat * p);
        Self {
            d_gs: 2.87e9,
            gamma: 28e9,
            intrinsic_splitting: 8e6,
            tau_shelf: 200e-9,
            tau_excited: 12e-9,
            branch_shelf: 0.5,
            branch_repolarize: 0.7,
            alpha_sat,
            beta_sat,
            linewidth_fwhm: 11e6,
            contrast_cw: 0.026,
            t2_star: 185e-9,
            t2: 1.73e-6,
            nv_density_ppm: 8.0,
            v_ref: OPERATING_BIAS_V * sat_at_operating_point / OPERATING_CURRENT_PA,
        }
    }
}

fn positive(field: &'static str, v: f64) -> Result<(), NvError> {
    // Infinity is accepted for lifetimes so that damping can be switched off.
    if v > 0.0 {
        Ok(())
    } else {
        Err(NvError::InvalidParam {
            field,
            reason: format!("must be > 0, got {v}"),
        })
    }
}

fn unit_interval(field: &'static str, v: f64) -> Result<(), NvError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(NvError::InvalidParam {
            field,
            reason: format!("must lie in [0, 1], got {v}"),
        })
    }
}

impl NVParams {
    pub fn validate(&self) -> Result<(), NvError> {
        positive("d_gs", self.d_gs)?;
        positive("gamma", self.gamma)?;
        positive("tau_shelf", self.tau_shelf)?;
        positive("tau_excited", self.tau_excited)?;
        positive("linewidth_fwhm", self.linewidth_fwhm)?;
        positive("t2_star", self.t2_star)?;
        positive("t2", self.t2)?;
        positive("nv_density_ppm", self.nv_density_ppm)?;
        positive("v_ref", self.v_ref)?;
        if !(self.intrinsic_splitting >= 0.0 && self.intrinsic_splitting.is_finite()) {
            return Err(NvError::InvalidParam {
                field: "intrinsic_splitting",
                reason: format!("must be finite and >= 0, got {}", self.intrinsic_splitting),
            });
        }
        unit_interval("branch_shelf", self.branch_shelf)?;
        unit_interval("branch_repolarize", self.branch_repolarize)?;
        unit_interval("contrast_cw", self.contrast_cw)?;
        if !self.alpha_sat.is_finite() || !self.beta_sat.is_finite() {
            return Err(NvError::InvalidParam {
                field: "alpha_sat",
                reason: "saturation coefficients must be finite".into(),
            });
        }
        Ok(())
    }

    /// Largest laser power (mW) for which the saturation law is defined.
    pub fn max_saturation_power(&self) -> f64 {
        if self.beta_sat < 0.0 {
            1.0 / self.beta_sat.abs()
        } else {
            f64::INFINITY
        }
    }
}

/// Rate constants of the five-level model that the literature values leave open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConstants {
    /// Ground-to-excited pumping rate (1/s) at `pump_power_ref_mw`.
    pub pump_rate_ref: f64,
    pub pump_power_ref_mw: f64,
    /// Excited-state ionization rate (1/s) at `pump_power_ref_mw`; scales linearly with power.
    pub ionization_rate_ref: f64,
    /// Ground-state population exchange rate (1/s) under resonant microwaves.
    pub mw_mixing_rate: f64,
}

impl Default for RateConstants {
    fn default() -> Self {
        Self {
            pump_rate_ref: 5e7,
            pump_power_ref_mw: 8.0,
            ionization_rate_ref: 2e6,
            mw_mixing_rate: 1e6,
        }
    }
}

impl RateConstants {
    pub fn pump_rate(&self, laser_power_mw: f64) -> f64 {
        self.pump_rate_ref * laser_power_mw / self.pump_power_ref_mw
    }

    pub fn ionization_rate(&self, laser_power_mw: f64) -> f64 {
        self.ionization_rate_ref * laser_power_mw / self.pump_power_ref_mw
    }
}

/// Ground-state transition frequencies `(nu_plus, nu_minus)` for a field
/// projection `b_projection` (T) onto the NV axis.
pub fn resonance_frequencies(params: &NVParams, b_projection: f64) -> (f64, f64) {
    let shift = 0.5 * params.intrinsic_splitting + params.gamma * b_projection;
    (params.d_gs + shift, params.d_gs - shift)
}

/// Unit vectors of the four NV orientations (the <111> family).
pub fn nv_axes() -> [Vec3; 4] {
    let s = 1.0 / 3f64.sqrt();
    [[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]]
}

/// Projection of `b` onto each of the four NV orientations.
pub fn axis_projections(b: Vec3) -> [f64; 4] {
    nv_axes().map(|u| u[0] * b[0] + u[1] * b[1] + u[2] * b[2])
}

fn gaussian_unit(detuning: f64, fwhm: f64) -> f64 {
    (-4.0 * LN_2 * detuning * detuning / (fwhm * fwhm)).exp()
}

/// Relative CW readout change at microwave frequency `mw_frequency`.
///
/// Two Gaussian dips of depth `contrast_cw / 2` and FWHM `linewidth_fwhm`
/// at the two resonances; non-positive everywhere.
pub fn odmr_response(params: &NVParams, mw_frequency: f64, b_projection: f64) -> f64 {
    let (nu_plus, nu_minus) = resonance_frequencies(params, b_projection);
    let half_depth = 0.5 * params.contrast_cw;
    -half_depth
        * (gaussian_unit(mw_frequency - nu_plus, params.linewidth_fwhm)
            + gaussian_unit(mw_frequency - nu_minus, params.linewidth_fwhm))
}

/// Derivative of [`odmr_response`] with respect to the microwave frequency (1/Hz).
pub fn odmr_response_slope(params: &NVParams, mw_frequency: f64, b_projection: f64) -> f64 {
    let (nu_plus, nu_minus) = resonance_frequencies(params, b_projection);
    let half_depth = 0.5 * params.contrast_cw;
    let w2 = params.linewidth_fwhm * params.linewidth_fwhm;
    let d = |x: f64| 8.0 * LN_2 * x / w2 * gaussian_unit(x, params.linewidth_fwhm);
    half_depth * (d(mw_frequency - nu_plus) + d(mw_frequency - nu_minus))
}

/// Largest |slope| of a single dip: `depth * sqrt(8 ln 2 / e) / FWHM`, reached
/// at a detuning of `FWHM / sqrt(8 ln 2)`.
pub fn single_dip_max_slope(params: &NVParams) -> f64 {
    0.5 * params.contrast_cw * (8.0 * LN_2 / std::f64::consts::E).sqrt() / params.linewidth_fwhm
}

/// Detuning from a single resonance at which the dip slope is largest.
pub fn max_slope_detuning(params: &NVParams) -> f64 {
    params.linewidth_fwhm / (8.0 * LN_2).sqrt()
}

/// Two-photon photocurrent `alpha P^2 / (1 + beta P)` in pA for `power` in mW.
pub fn photocurrent_saturation(params: &NVParams, power_mw: f64) -> Result<f64, NvError> {
    if !(power_mw >= 0.0) || !power_mw.is_finite() {
        return Err(NvError::SaturationDomain { power_mw });
    }
    let denom = 1.0 + params.beta_sat * power_mw;
    if denom <= SATURATION_POLE_GUARD {
        return Err(NvError::SaturationDomain { power_mw });
    }
    Ok(params.alpha_sat * power_mw * power_mw / denom)
}

/// Linear collection-field law.
pub fn bias_scaling(current_ref: f64, v_ref: f64, v: f64) -> f64 {
    current_ref * v / v_ref
}

/// Photocurrent (pA) at laser power `power_mw`, bias `bias_v` and relative
/// spin-dependent change `spin_contrast_input` in `[-contrast_cw, 0]`.
pub fn steady_state_photocurrent(
    params: &NVParams,
    power_mw: f64,
    bias_v: f64,
    spin_contrast_input: f64,
) -> Result<f64, NvError> {
    let tol = 1e-12;
    if spin_contrast_input > tol || spin_contrast_input < -params.contrast_cw - tol {
        return Err(NvError::ContrastRange {
            value: spin_contrast_input,
            contrast: params.contrast_cw,
        });
    }
    let base = photocurrent_saturation(params, power_mw)?;
    Ok(bias_scaling(base, params.v_ref, bias_v) * (1.0 + spin_contrast_input))
}

/// Occupations of the lumped five-level model plus charge bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinPopulations {
    pub p_g0: f64,
    pub p_g1: f64,
    pub p_e0: f64,
    pub p_e1: f64,
    pub p_shelf: f64,
    /// Effective neutral-charge fraction; only the negative fraction ionizes.
    pub q_neutral: f64,
    /// Charge carriers generated per NV so far.
    pub carriers: f64,
}

impl SpinPopulations {
    pub fn ground_zero() -> Self {
        Self {
            p_g0: 1.0,
            p_g1: 0.0,
            p_e0: 0.0,
            p_e1: 0.0,
            p_shelf: 0.0,
            q_neutral: 0.0,
            carriers: 0.0,
        }
    }

    /// Ground population split evenly between m_s=0 and the lumped m_s=±1 level.
    pub fn thermal() -> Self {
        Self {
            p_g0: 0.5,
            p_g1: 0.5,
            ..Self::ground_zero()
        }
    }

    pub fn total(&self) -> f64 {
        self.p_g0 + self.p_g1 + self.p_e0 + self.p_e1 + self.p_shelf
    }

    fn levels(&self) -> [f64; 5] {
        [self.p_g0, self.p_g1, self.p_e0, self.p_e1, self.p_shelf]
    }
}

/// Time derivative of `[g0, g1, e0, e1, shelf, carriers]`.
fn rate_derivative(
    y: &[f64; 6],
    params: &NVParams,
    pump: f64,
    ion: f64,
    mixing: f64,
    q_neutral: f64,
) -> [f64; 6] {
    let [g0, g1, e0, e1, s, _] = *y;
    let k_rad = 1.0 / params.tau_excited;
    let k_shelf_in = params.branch_shelf / params.tau_excited;
    let k_e1_rad = (1.0 - params.branch_shelf) / params.tau_excited;
    let k_shelf_out = 1.0 / params.tau_shelf;
    let r = params.branch_repolarize;

    let d_g0 = -pump * g0 + k_rad * e0 + r * k_shelf_out * s - mixing * (g0 - g1);
    let d_g1 = -pump * g1 + k_e1_rad * e1 + (1.0 - r) * k_shelf_out * s + mixing * (g0 - g1);
    let d_e0 = pump * g0 - k_rad * e0;
    let d_e1 = pump * g1 - (k_e1_rad + k_shelf_in) * e1;
    let d_s = k_shelf_in * e1 - k_shelf_out * s;
    let d_c = ion * (1.0 - q_neutral) * (e0 + e1);
    [d_g0, d_g1, d_e0, d_e1, d_s, d_c]
}

/// One fourth-order Runge-Kutta step of the rate model.
///
/// Ionization only increments `carriers`; the return to NV⁻ is treated as
/// instantaneous so populations stay normalized.
pub fn propagate_rate_equations(
    state: &SpinPopulations,
    params: &NVParams,
    rates: &RateConstants,
    laser_power_mw: f64,
    mw_resonant: bool,
    dt: f64,
) -> Result<SpinPopulations, NvError> {
    let max = params.tau_excited / 10.0;
    if !(dt > 0.0) || dt > max * (1.0 + 1e-12) {
        return Err(NvError::StepSize { dt, max });
    }
    let pump = rates.pump_rate(laser_power_mw);
    let ion = rates.ionization_rate(laser_power_mw);
    let mixing = if mw_resonant {
        rates.mw_mixing_rate
    } else {
        0.0
    };
    let [g0, g1, e0, e1, s] = state.levels();
    let y0 = [g0, g1, e0, e1, s, state.carriers];

    let f = |y: &[f64; 6]| rate_derivative(y, params, pump, ion, mixing, state.q_neutral);
    let axpy = |y: &[f64; 6], k: &[f64; 6], h: f64| {
        let mut out = *y;
        for i in 0..6 {
            out[i] += h * k[i];
        }
        out
    };
    let k1 = f(&y0);
    let k2 = f(&axpy(&y0, &k1, 0.5 * dt));
    let k3 = f(&axpy(&y0, &k2, 0.5 * dt));
    let k4 = f(&axpy(&y0, &k3, dt));
    let mut y = y0;
    for i in 0..6 {
        y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(SpinPopulations {
        p_g0: y[0],
        p_g1: y[1],
        p_e0: y[2],
        p_e1: y[3],
        p_shelf: y[4],
        q_neutral: state.q_neutral,
        carriers: y[5],
    })
}

/// Bloch vector of the {m_s=0, m_s=+1} pseudo-spin. `z = +1` is m_s=0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoLevelState {
    pub bloch: Vec3,
    /// Product of all dephasing factors applied so far.
    pub coherence_scale: f64,
}

impl TwoLevelState {
    pub fn polarized() -> Self {
        Self {
            bloch: [0.0, 0.0, 1.0],
            coherence_scale: 1.0,
        }
    }

    pub fn norm(&self) -> f64 {
        let [x, y, z] = self.bloch;
        (x * x + y * y + z * z).sqrt()
    }

    /// Occupation of m_s=+1.
    pub fn population_plus(&self) -> f64 {
        0.5 * (1.0 - self.bloch[2])
    }

    /// Scale the x/y components by `factor`, e.g. an echo envelope.
    pub fn dephase(&self, factor: f64) -> Self {
        let [x, y, z] = self.bloch;
        Self {
            bloch: [x * factor, y * factor, z],
            coherence_scale: self.coherence_scale * factor,
        }
    }
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rotate `v` by `angle` about unit vector `axis`, scaling the part of `v`
/// perpendicular to the axis by `perp_scale`.
fn rotate_damped(v: &Vec3, axis: &Vec3, angle: f64, perp_scale: f64) -> Vec3 {
    let along = dot(v, axis);
    let par = [axis[0] * along, axis[1] * along, axis[2] * along];
    let perp = [v[0] - par[0], v[1] - par[1], v[2] - par[2]];
    let w = cross(axis, &perp);
    let (s, c) = angle.sin_cos();
    std::array::from_fn(|i| par[i] + perp_scale * (perp[i] * c + w[i] * s))
}

/// Drive the pseudo-spin for `duration` seconds.
///
/// Rotation axis `(Ω cos φ, Ω sin φ, Δ)` at the generalized Rabi frequency
/// `sqrt(Ω² + Δ²)` (both in Hz). The components perpendicular to the axis,
/// i.e. the precessing part, decay as `exp(-duration / t2_star)`. With no
/// drive and no detuning the axis is taken as z.
pub fn evolve_two_level(
    state: &TwoLevelState,
    rabi_rate: f64,
    phase: f64,
    detuning: f64,
    duration: f64,
    params: &NVParams,
) -> TwoLevelState {
    let raw = [rabi_rate * phase.cos(), rabi_rate * phase.sin(), detuning];
    let generalized = dot(&raw, &raw).sqrt();
    let axis = if generalized > 0.0 {
        raw.map(|c| c / generalized)
    } else {
        [0.0, 0.0, 1.0]
    };
    let decay = (-duration / params.t2_star).exp();
    TwoLevelState {
        bloch: rotate_damped(
            &state.bloch,
            &axis,
            2.0 * PI * generalized * duration,
            decay,
        ),
        coherence_scale: state.coherence_scale * decay,
    }
}

/// Free precession at `detuning` without any dephasing, as seen by a
/// refocused (echo) channel. The decay is applied separately through
/// [`echo_coherence`].
pub fn precess_refocused(state: &TwoLevelState, detuning: f64, duration: f64) -> TwoLevelState {
    TwoLevelState {
        bloch: rotate_damped(
            &state.bloch,
            &[0.0, 0.0, 1.0],
            2.0 * PI * detuning * duration,
            1.0,
        ),
        coherence_scale: state.coherence_scale,
    }
}

/// Coherence envelope after `total_tau` of free precession. With at least one
/// refocusing pulse the decay is governed by `t2`, otherwise by `t2_star`.
pub fn echo_coherence(params: &NVParams, total_tau: f64, n_pi: u32) -> f64 {
    let t = if n_pi == 0 { params.t2_star } else { params.t2 };
    (-total_tau / t).exp()
}

/// One sinusoidal field component, `amplitude * sin(2π f t + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcTone {
    pub amplitude: Vec3,
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagneticEnvironment {
    pub b_static: Vec3,
    pub ac_tones: Vec<AcTone>,
}

impl MagneticEnvironment {
    pub fn validate(&self) -> Result<(), NvError> {
        if self.b_static.iter().any(|b| !b.is_finite()) {
            return Err(NvError::InvalidParam {
                field: "b_static",
                reason: "must be finite".into(),
            });
        }
        for tone in &self.ac_tones {
            if !(tone.frequency > 0.0 && tone.frequency.is_finite()) {
                return Err(NvError::InvalidParam {
                    field: "ac_tones.frequency",
                    reason: format!("must be > 0, got {}", tone.frequency),
                });
            }
            if tone
                .amplitude
                .iter()
                .chain([&tone.phase])
                .any(|x| !x.is_finite())
            {
                return Err(NvError::InvalidParam {
                    field: "ac_tones",
                    reason: "amplitude and phase must be finite".into(),
                });
            }
        }
        Ok(())
    }

    pub fn field_at(&self, t: f64) -> Vec3 {
        let mut b = self.b_static;
        for tone in &self.ac_tones {
            let s = (2.0 * PI * tone.frequency * t + tone.phase).sin();
            for (bk, ak) in b.iter_mut().zip(tone.amplitude) {
                *bk += ak * s;
            }
        }
        b
    }
}
