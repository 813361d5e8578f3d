//! Integrated photocurrent detector (IPCD) model, a reference lock-in
//! demodulator, noise densities and the bias-field breakdown check.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ELEMENTARY_CHARGE: f64 = 1.602176634e-19;
pub const BOLTZMANN: f64 = 1.380649e-23;

/// Breakdown field of air at standard conditions (V/µm).
pub const PASCHEN_LIMIT_V_PER_UM: f64 = 3.0;

/// Effective input resistance that reproduces a 0.6 fA/√Hz Johnson density
/// at 300 K. Back-solved from that figure; not a measured impedance.
pub const DEFAULT_INPUT_RESISTANCE: f64 = 46e9;
pub const ROOM_TEMPERATURE: f64 = 300.0;

/// Differential samples per second the noise floor is referenced to.
pub const NOISE_REFERENCE_RATE_HZ: f64 = 1.0;

/// Pseudo-random source threaded explicitly through the detector.
pub type DetectorRng = ChaCha8Rng;

/// Counter-based stream derivation: one independent stream per `(seed, stream)`.
pub fn detector_rng(seed: u64, stream: u64) -> DetectorRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectorError {
    #[error("invalid detector setting `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("trace spans {got:e} s but {needed:e} s are required")]
    TraceTooShort { needed: f64, got: f64 },
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IPCDConfig {
    /// Input current equivalent of one code step (A).
    pub lsb_current: f64,
    pub bits: u32,
    /// RMS output noise in units of LSB.
    pub noise_rms_lsb: f64,
    pub t_integrate: f64,
    /// Cut-off of the first-order input response (Hz).
    pub bandwidth_f0: f64,
    pub seed: u64,
}

impl Default for IPCDConfig {
    fn default() -> Self {
        Self {
            lsb_current: 50e-15,
            bits: 16,
            noise_rms_lsb: 1.2,
            t_integrate: 0.2,
            bandwidth_f0: 5e6,
            seed: 0,
        }
    }
}

impl IPCDConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |field, reason: String| Err(DetectorError::InvalidConfig { field, reason });
        if !(self.lsb_current > 0.0 && self.lsb_current.is_finite()) {
            return bad(
                "lsb_current",
                format!("must be > 0, got {}", self.lsb_current),
            );
        }
        if !(8..=24).contains(&self.bits) {
            return bad("bits", format!("must lie in [8, 24], got {}", self.bits));
        }
        if !(self.noise_rms_lsb >= 0.0 && self.noise_rms_lsb.is_finite()) {
            return bad(
                "noise_rms_lsb",
                format!("must be >= 0, got {}", self.noise_rms_lsb),
            );
        }
        if !(self.t_integrate > 0.0 && self.t_integrate.is_finite()) {
            return bad(
                "t_integrate",
                format!("must be > 0, got {}", self.t_integrate),
            );
        }
        if !(self.bandwidth_f0 > 0.0) {
            return bad(
                "bandwidth_f0",
                format!("must be > 0, got {}", self.bandwidth_f0),
            );
        }
        Ok(())
    }

    /// Largest representable code magnitude, `2^(bits-1) - 1`.
    pub fn max_code(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    pub fn rng(&self) -> DetectorRng {
        detector_rng(self.seed, 0)
    }
}

/// Uniformly sampled input current.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotocurrentTrace {
    sample_interval: f64,
    samples: Vec<f64>,
}

impl PhotocurrentTrace {
    pub fn new(sample_interval: f64, samples: Vec<f64>) -> Result<Self, DetectorError> {
        if !(sample_interval > 0.0 && sample_interval.is_finite()) {
            return Err(DetectorError::InvalidTrace(format!(
                "sample interval must be > 0, got {sample_interval}"
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(DetectorError::InvalidTrace(format!(
                "sample {i} is not finite"
            )));
        }
        Ok(Self {
            sample_interval,
            samples,
        })
    }

    pub fn constant(current: f64, sample_interval: f64, len: usize) -> Result<Self, DetectorError> {
        Self::new(sample_interval, vec![current; len])
    }

    /// Samples `f(t)` at `t = k * sample_interval` for `k < len`.
    pub fn from_fn(
        sample_interval: f64,
        len: usize,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self, DetectorError> {
        Self::new(
            sample_interval,
            (0..len).map(|k| f(k as f64 * sample_interval)).collect(),
        )
    }

    pub fn sample_interval(&self) -> f64 {
        self.sample_interval
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.sample_interval
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            sample_interval: self.sample_interval,
            samples: self.samples.iter().map(|s| a * s).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorReading {
    pub code: i64,
    /// `code * lsb_current` (A).
    pub current_estimate: f64,
}

/// Digitize a mean input current: add white Gaussian noise of
/// `noise_rms_lsb` LSB, round to the nearest code and clamp at the range ends.
pub fn quantize_current(current: f64, cfg: &IPCDConfig, rng: &mut DetectorRng) -> DetectorReading {
    let mut level = current / cfg.lsb_current;
    if cfg.noise_rms_lsb > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_rms_lsb).expect("noise rms validated");
        level += normal.sample(rng);
    }
    let limit = cfg.max_code();
    let code = (level.round() as i64).clamp(-limit, limit);
    DetectorReading {
        code,
        current_estimate: code as f64 * cfg.lsb_current,
    }
}

/// One IPCD conversion: first-order low-pass at `bandwidth_f0`, mean over the
/// first `t_integrate` seconds, then [`quantize_current`].
pub fn integrate_and_quantize(
    trace: &PhotocurrentTrace,
    cfg: &IPCDConfig,
    rng: &mut DetectorRng,
) -> Result<DetectorReading, DetectorError> {
    let dt = trace.sample_interval;
    let got = trace.duration();
    if got < cfg.t_integrate * (1.0 - 1e-9) || trace.samples.is_empty() {
        return Err(DetectorError::TraceTooShort {
            needed: cfg.t_integrate,
            got,
        });
    }
    let window = ((cfg.t_integrate / dt).round() as usize).clamp(1, trace.samples.len());
    let alpha = 1.0 - (-2.0 * PI * cfg.bandwidth_f0 * dt).exp();
    let mut state = trace.samples[0];
    let mut sum = 0.0;
    for &s in &trace.samples[..window] {
        state += alpha * (s - state);
        sum += state;
    }
    Ok(quantize_current(sum / window as f64, cfg, rng))
}

/// Difference of two segment readings (A).
pub fn differential_readout(reading_a: &DetectorReading, reading_b: &DetectorReading) -> f64 {
    reading_a.current_estimate - reading_b.current_estimate
}

/// Two-phase lock-in: mix with `sin`/`cos` at `f_ref`, then a first-order
/// low-pass with `time_constant`. Returns `(x, y)` scaled by 2 so that a
/// matched `A sin(2π f_ref t)` input gives `x = A`.
pub fn lockin_demodulate(
    trace: &PhotocurrentTrace,
    f_ref: f64,
    time_constant: f64,
) -> Result<(f64, f64), DetectorError> {
    if !(f_ref > 0.0) || !(time_constant > 0.0) {
        return Err(DetectorError::InvalidArgument(format!(
            "f_ref and time_constant must be > 0, got {f_ref}, {time_constant}"
        )));
    }
    let needed = 5.0 * time_constant;
    if trace.duration() < needed {
        return Err(DetectorError::TraceTooShort {
            needed,
            got: trace.duration(),
        });
    }
    let dt = trace.sample_interval;
    let alpha = 1.0 - (-dt / time_constant).exp();
    let (mut x, mut y) = (0.0, 0.0);
    for (k, &s) in trace.samples.iter().enumerate() {
        let (sin, cos) = (2.0 * PI * f_ref * k as f64 * dt).sin_cos();
        x += alpha * (s * sin - x);
        y += alpha * (s * cos - y);
    }
    Ok((2.0 * x, 2.0 * y))
}

/// Amplitude response `1 / (1 + f/f0)` of the photocurrent chain.
pub fn lowpass_gain(f: f64, f0: f64) -> f64 {
    1.0 / (1.0 + f / f0)
}

/// Electron shot-noise density `sqrt(2 e I)` (A/√Hz).
pub fn shot_noise_density(current: f64) -> f64 {
    (2.0 * ELEMENTARY_CHARGE * current.max(0.0)).sqrt()
}

/// Johnson-Nyquist current-noise density `sqrt(4 k_B T / R)` (A/√Hz).
pub fn johnson_noise_density(resistance: f64, temperature: f64) -> f64 {
    (4.0 * BOLTZMANN * temperature / resistance).sqrt()
}

/// Differential read-noise floor: two independent conversions of
/// `noise_rms_lsb` each, referenced to one differential sample per second.
pub fn quantization_noise_floor(cfg: &IPCDConfig) -> f64 {
    2f64.sqrt() * cfg.noise_rms_lsb * cfg.lsb_current / NOISE_REFERENCE_RATE_HZ.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBudget {
    pub shot: f64,
    pub johnson: f64,
    pub quantization: f64,
    pub total: f64,
}

impl NoiseBudget {
    pub fn from_components(shot: f64, johnson: f64, quantization: f64) -> Self {
        let total = (shot * shot + johnson * johnson + quantization * quantization).sqrt();
        Self {
            shot,
            johnson,
            quantization,
            total,
        }
    }

    /// Signal (A) over total noise density, per √Hz.
    pub fn signal_ratio(&self, signal: f64) -> f64 {
        signal / self.total
    }

    pub fn dominant(&self) -> &'static str {
        if self.quantization >= self.shot && self.quantization >= self.johnson {
            "quantization"
        } else if self.shot >= self.johnson {
            "shot"
        } else {
            "johnson"
        }
    }
}

pub fn noise_budget(
    current: f64,
    resistance: f64,
    temperature: f64,
    cfg: &IPCDConfig,
) -> NoiseBudget {
    NoiseBudget::from_components(
        shot_noise_density(current),
        johnson_noise_density(resistance, temperature),
        quantization_noise_floor(cfg),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BiasFieldCheck {
    Ok {
        field_v_per_um: f64,
    },
    Violation {
        field_v_per_um: f64,
        limit_v_per_um: f64,
    },
}

impl BiasFieldCheck {
    pub fn is_ok(&self) -> bool {
        matches!(self, BiasFieldCheck::Ok { .. })
    }

    pub fn field_v_per_um(&self) -> f64 {
        match *self {
            BiasFieldCheck::Ok { field_v_per_um }
            | BiasFieldCheck::Violation { field_v_per_um, .. } => field_v_per_um,
        }
    }
}

/// Field across an electrode gap (m) against the air breakdown limit.
/// The limit itself is rejected.
pub fn bias_field_check(voltage: f64, gap: f64) -> Result<BiasFieldCheck, DetectorError> {
    if !(gap > 0.0) {
        return Err(DetectorError::InvalidArgument(format!(
            "gap must be > 0, got {gap}"
        )));
    }
    let field_v_per_um = voltage.abs() / (gap * 1e6);
    Ok(if field_v_per_um < PASCHEN_LIMIT_V_PER_UM {
        BiasFieldCheck::Ok { field_v_per_um }
    } else {
        BiasFieldCheck::Violation {
            field_v_per_um,
            limit_v_per_um: PASCHEN_LIMIT_V_PER_UM,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quiet() -> IPCDConfig {
        IPCDConfig {
            noise_rms_lsb: 0.0,
            ..IPCDConfig::default()
        }
    }

    fn sample_std(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    #[test]
    fn operating_current_maps_to_code_1500() {
        let cfg = quiet();
        let trace = PhotocurrentTrace::constant(75e-12, 1e-3, 200).unwrap();
        let r = integrate_and_quantize(&trace, &cfg, &mut cfg.rng()).unwrap();
        assert_eq!(r.code, 1500);
        assert!((r.current_estimate - 75e-12).abs() < 1e-24);

        let zero = PhotocurrentTrace::constant(0.0, 1e-3, 200).unwrap();
        assert_eq!(
            integrate_and_quantize(&zero, &cfg, &mut cfg.rng())
                .unwrap()
                .code,
            0
        );
    }

    #[test]
    fn short_trace_is_rejected() {
        let cfg = quiet();
        let trace = PhotocurrentTrace::constant(75e-12, 1e-3, 100).unwrap();
        assert!(matches!(
            integrate_and_quantize(&trace, &cfg, &mut cfg.rng()),
            Err(DetectorError::TraceTooShort { .. })
        ));
    }

    #[test]
    fn output_noise_is_1p2_lsb() {
        let cfg = IPCDConfig::default();
        let mut rng = detector_rng(11, 0);
        let v: Vec<f64> = (0..10_000)
            .map(|_| quantize_current(75e-12, &cfg, &mut rng).current_estimate / cfg.lsb_current)
            .collect();
        let s = sample_std(&v);
        assert!((s - 1.2).abs() / 1.2 < 0.05, "std {s}");
    }

    #[test]
    fn differential_noise_adds_in_quadrature() {
        let cfg = IPCDConfig::default();
        let mut rng = detector_rng(3, 1);
        let d: Vec<f64> = (0..10_000)
            .map(|_| {
                let a = quantize_current(10e-12, &cfg, &mut rng);
                let b = quantize_current(10e-12, &cfg, &mut rng);
                differential_readout(&a, &b) / cfg.lsb_current
            })
            .collect();
        let want = 2f64.sqrt() * 1.2;
        let s = sample_std(&d);
        assert!((s - want).abs() / want < 0.05, "std {s} vs {want}");
    }

    #[test]
    fn cw_differential_is_two_pa() {
        let cfg = quiet();
        let mut rng = cfg.rng();
        let a = quantize_current(75e-12, &cfg, &mut rng);
        let b = quantize_current(75e-12 * (1.0 - 0.026), &cfg, &mut rng);
        let d = differential_readout(&a, &b);
        assert!((d - 2e-12).abs() < 0.05e-12, "{d}");
        assert_eq!(differential_readout(&a, &a), 0.0);
    }

    #[test]
    fn codes_clamp_at_range_ends() {
        let cfg = IPCDConfig { bits: 8, ..quiet() };
        let r = quantize_current(1e-9, &cfg, &mut cfg.rng());
        assert_eq!(r.code, 127);
        let r = quantize_current(-1e-9, &cfg, &mut cfg.rng());
        assert_eq!(r.code, -127);
    }

    #[test]
    fn input_lowpass_attenuates_fast_ripple() {
        let cfg = IPCDConfig {
            bandwidth_f0: 1e3,
            t_integrate: 0.01,
            ..quiet()
        };
        let dt = 1e-6;
        let n = 10_000;
        // 75 pA mean with a 50 kHz ripple; the filtered mean is still 75 pA.
        let trace = PhotocurrentTrace::from_fn(dt, n, |t| {
            75e-12 * (1.0 + 0.5 * (2.0 * PI * 5e4 * t).sin())
        })
        .unwrap();
        let r = integrate_and_quantize(&trace, &cfg, &mut cfg.rng()).unwrap();
        assert!((r.code - 1500).abs() <= 1);
    }

    fn tone(amp: f64, f: f64, dt: f64, n: usize) -> PhotocurrentTrace {
        PhotocurrentTrace::from_fn(dt, n, |t| amp * (2.0 * PI * f * t).sin()).unwrap()
    }

    #[test]
    fn lockin_matched_dc_and_detuned() {
        let (f, tau, dt) = (1e3, 0.1, 1e-5);
        let n = (11.0 * tau / dt) as usize;
        let (x, y) = lockin_demodulate(&tone(2e-12, f, dt, n), f, tau).unwrap();
        assert!((x - 2e-12).abs() < 0.01 * 2e-12, "x {x}");
        assert!(y.abs() < 0.01 * 2e-12, "y {y}");

        let dc = PhotocurrentTrace::constant(2e-12, dt, n).unwrap();
        let (x, y) = lockin_demodulate(&dc, f, tau).unwrap();
        assert!(x.abs() < 0.01 * 2e-12 && y.abs() < 0.01 * 2e-12);

        let (x, y) = lockin_demodulate(&tone(2e-12, 1.5 * f, dt, n), f, tau).unwrap();
        assert!(x.abs() < 0.01 * 2e-12 && y.abs() < 0.01 * 2e-12, "{x} {y}");

        let short = PhotocurrentTrace::constant(1.0, dt, 10).unwrap();
        assert!(lockin_demodulate(&short, f, tau).is_err());
    }

    #[test]
    fn lowpass_gain_points() {
        assert_eq!(lowpass_gain(0.0, 5e6), 1.0);
        assert_eq!(lowpass_gain(5e6, 5e6), 0.5);
        // half-amplitude frequency of the 5 MHz fit vs. the quoted 3 MHz bandwidth,
        // within the ±2 MHz fit uncertainty
        assert!((3e6f64 - 5e6).abs() <= 2e6);
    }

    #[test]
    fn noise_densities() {
        let shot = shot_noise_density(75e-12);
        assert!((shot - 4.9e-15).abs() < 0.01e-15, "{shot}");
        assert!((shot - 4.8e-15).abs() / 4.8e-15 < 0.03);
        assert_eq!(shot_noise_density(0.0), 0.0);
        assert!((shot_noise_density(300e-12) - 2.0 * shot).abs() < 1e-28);

        let j = johnson_noise_density(DEFAULT_INPUT_RESISTANCE, ROOM_TEMPERATURE);
        assert!((j - 0.60e-15).abs() < 0.005e-15, "{j}");
        assert_eq!(johnson_noise_density(f64::INFINITY, 300.0), 0.0);
        let j4 = johnson_noise_density(4.0 * DEFAULT_INPUT_RESISTANCE, ROOM_TEMPERATURE);
        assert!((j4 - 0.5 * j).abs() < 1e-30);

        let cfg = IPCDConfig::default();
        let q = quantization_noise_floor(&cfg);
        assert!((q - 84.85e-15).abs() < 0.01e-15, "{q}");
        assert!((q - 84e-15).abs() / 84e-15 < 0.02);
        assert_eq!(quantization_noise_floor(&quiet()), 0.0);
        let half = IPCDConfig {
            lsb_current: 25e-15,
            ..cfg
        };
        assert!((quantization_noise_floor(&half) - 0.5 * q).abs() < 1e-28);
    }

    #[test]
    fn budget_at_operating_point() {
        let cfg = IPCDConfig::default();
        let b = noise_budget(75e-12, DEFAULT_INPUT_RESISTANCE, ROOM_TEMPERATURE, &cfg);
        assert_eq!(b.dominant(), "quantization");
        assert!((b.shot / b.quantization - 0.058).abs() < 0.001);
        assert!((b.signal_ratio(2e-12) - 23.5).abs() < 0.1);
        let zero = noise_budget(0.0, f64::INFINITY, 300.0, &quiet());
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn paschen_check() {
        let c = bias_field_check(24.0, 15e-6).unwrap();
        assert!(c.is_ok());
        assert!((c.field_v_per_um() - 1.6).abs() < 1e-12);
        assert!(bias_field_check(0.0, 15e-6).unwrap().is_ok());
        let v = bias_field_check(60.0, 15e-6).unwrap();
        assert!(!v.is_ok());
        assert!((v.field_v_per_um() - 4.0).abs() < 1e-12);
        assert!(!bias_field_check(45.0, 15e-6).unwrap().is_ok());
        assert!(bias_field_check(1.0, 0.0).is_err());
    }

    #[test]
    fn same_seed_same_codes() {
        let cfg = IPCDConfig::default();
        let run = || {
            let mut rng = detector_rng(99, 4);
            (0..100)
                .map(|_| quantize_current(3e-12, &cfg, &mut rng).code)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        assert!(IPCDConfig::default().validate().is_ok());
        assert!(IPCDConfig {
            bits: 30,
            ..IPCDConfig::default()
        }
        .validate()
        .is_err());
        assert!(IPCDConfig {
            lsb_current: 0.0,
            ..IPCDConfig::default()
        }
        .validate()
        .is_err());
        assert!(IPCDConfig {
            t_integrate: -1.0,
            ..IPCDConfig::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn noise_free_quantization_error_is_half_lsb(i in -1e-9f64..1e-9) {
            let cfg = quiet();
            let r = quantize_current(i, &cfg, &mut cfg.rng());
            prop_assert!((r.current_estimate - i).abs() <= 0.5 * cfg.lsb_current * (1.0 + 1e-12));
        }

        #[test]
        fn lockin_is_linear(a in -5.0f64..5.0, phase in 0.0f64..std::f64::consts::TAU) {
            let (f, tau, dt) = (50.0, 0.05, 1e-4);
            let n = 3000;
            let tr = PhotocurrentTrace::from_fn(dt, n, |t| 1e-12 * (2.0 * PI * f * t + phase).sin() + 3e-13).unwrap();
            let (x1, y1) = lockin_demodulate(&tr, f, tau).unwrap();
            let (x2, y2) = lockin_demodulate(&tr.scaled(a), f, tau).unwrap();
            prop_assert!((x2 - a * x1).abs() <= 1e-9 * (x1.abs() + 1e-24) * a.abs().max(1.0) + 1e-27);
            prop_assert!((y2 - a * y1).abs() <= 1e-9 * (y1.abs() + 1e-24) * a.abs().max(1.0) + 1e-27);
        }

        #[test]
        fn budget_components_monotone(i in 0.0f64..1e-9, di in 0.0f64..1e-9, t in 1.0f64..500.0, dt in 0.0f64..100.0,
                                      r in 1e6f64..1e12, lsb in 1e-15f64..1e-13) {
            let cfg = IPCDConfig { lsb_current: lsb, ..IPCDConfig::default() };
            let cfg2 = IPCDConfig { lsb_current: lsb * 1.5, ..IPCDConfig::default() };
            let a = noise_budget(i, r, t, &cfg);
            prop_assert!(noise_budget(i + di, r, t, &cfg).shot >= a.shot);
            prop_assert!(noise_budget(i, r, t + dt, &cfg).johnson >= a.johnson);
            prop_assert!(noise_budget(i, r * 0.5, t, &cfg).johnson >= a.johnson);
            prop_assert!(noise_budget(i, r, t, &cfg2).quantization >= a.quantization);
            prop_assert!(a.total >= a.shot.max(a.johnson).max(a.quantization));
            let sq = a.shot.powi(2) + a.johnson.powi(2) + a.quantization.powi(2);
            prop_assert!((a.total.powi(2) - sq).abs() <= 1e-12 * sq);
        }
    }
}
