//! Physical parameters and closed-form scattering and occupation formulas
//! for a sideband-resolved optomechanical cavity.
//!
//! All angular frequencies and rates are in rad/s (or 1/s); occupations
//! and photon numbers are dimensionless.

use std::f64::consts::PI;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CODATA 2018 constants (SI). Both values are exact or quoted to full
/// published precision.
pub mod constants {
    /// Boltzmann constant, J/K (exact).
    pub const BOLTZMANN: f64 = 1.380_649e-23;
    /// Reduced Planck constant, J s.
    pub const HBAR: f64 = 1.054_571_817e-34;
}

/// Converts an ordinary frequency in Hz to angular frequency in rad/s.
pub fn angular(freq_hz: f64) -> f64 {
    2.0 * PI * freq_hz
}

/// Physical constants of the optomechanical system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Optical linewidth κ.
    pub kappa: f64,
    /// Mechanical frequency Ω_m.
    pub omega_m: f64,
    /// Single-photon optomechanical coupling g₀.
    pub g0: f64,
    /// Mechanical energy decay rate Γ_m.
    pub gamma_m: f64,
    /// Mean thermal bath occupation.
    pub n_th: f64,
    /// Bath temperature in kelvin, when `n_th` was derived from it.
    pub t_env: Option<f64>,
    /// Detuning of the blue (write) drive from the cavity resonance.
    pub write_detuning: f64,
    /// Detuning of the red (cool/read) drive from the cavity resonance.
    pub read_detuning: f64,
}

/// Canonical parameter preset; frequencies in Hz.
pub mod preset {
    use super::angular;

    pub const KAPPA: f64 = 0.8e6;
    pub const OMEGA_M: f64 = 1.4e6;
    /// Only the products g₀²n̄_cav enter the model, so this value only fixes
    /// the scale of n̄_cav.
    pub const G0: f64 = 100.0;
    pub const GAMMA_TH: f64 = 1.5e3;
    pub const N_TH: f64 = 2.0e5;
    pub const COOPERATIVITY: f64 = 10.0;
    /// Membrane quality factor, documentation only; Γ_m is set from Γ_th/n̄_th.
    pub const Q_MECHANICAL: f64 = 200.0e6;
    /// Low-gain write target g_w·T_w.
    pub const WRITE_GAIN_PRODUCT: f64 = 0.1;

    /// Γ_th in rad/s.
    pub fn gamma_th() -> f64 {
        angular(GAMMA_TH)
    }
}

impl SystemParams {
    /// κ = 2π×0.8 MHz, Ω_m = 2π×1.4 MHz, Γ_th = 2π×1.5 kHz, n̄_th = 2×10⁵,
    /// Γ_m = Γ_th/n̄_th, drives on the exact sidebands.
    pub fn preset() -> Self {
        let omega_m = angular(preset::OMEGA_M);
        SystemParams {
            kappa: angular(preset::KAPPA),
            omega_m,
            g0: angular(preset::G0),
            gamma_m: preset::gamma_th() / preset::N_TH,
            n_th: preset::N_TH,
            t_env: None,
            write_detuning: omega_m,
            read_detuning: -omega_m,
        }
    }

    /// Replaces `n_th` with the value implied by a bath temperature.
    pub fn with_temperature(mut self, t_env: f64) -> Result<Self> {
        self.n_th = thermal_occupation(t_env, self.omega_m)?;
        self.t_env = Some(t_env);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("kappa", self.kappa),
            ("omega_m", self.omega_m),
            ("g0", self.g0),
            ("gamma_m", self.gamma_m),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.n_th.is_finite() && self.n_th >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "n_th must be non-negative, got {}",
                self.n_th
            )));
        }
        if !self.write_detuning.is_finite() || !self.read_detuning.is_finite() {
            return Err(Error::InvalidParameter("detunings must be finite".into()));
        }
        if let Some(t) = self.t_env {
            let expected = thermal_occupation(t, self.omega_m)?;
            if (self.n_th - expected).abs() > 1e-9 * expected {
                return Err(Error::InvalidParameter(format!(
                    "n_th = {} inconsistent with t_env = {t} K (expected {expected})",
                    self.n_th
                )));
            }
        }
        Ok(())
    }

    /// Thermal decoherence rate Γ_th = Γ_m·n̄_th.
    pub fn gamma_th(&self) -> f64 {
        self.gamma_m * self.n_th
    }

    /// Diagnostic only: true when Ω_m > κ.
    pub fn is_sideband_resolved(&self) -> bool {
        self.omega_m > self.kappa
    }

    /// Read-drive photon number giving Γ_opt = C_q·Γ_th.
    pub fn n_cav_for_cooperativity(&self, cooperativity: f64) -> f64 {
        cooperativity * self.gamma_th() * self.kappa / (4.0 * self.g0 * self.g0)
    }

    /// Write-drive photon number giving g_w·T_w = `gain_product` for a write
    /// pulse of `duration_s` seconds.
    pub fn n_cav_for_write_gain(&self, gain_product: f64, duration_s: f64) -> f64 {
        gain_product / duration_s * self.kappa / (2.0 * self.g0 * self.g0)
    }
}

/// A coherent drive tone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveTone {
    pub detuning: f64,
    pub n_cav: f64,
}

/// Stokes (`a_plus`) and anti-Stokes (`a_minus`) scattering rates, 1/s.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScatteringRates {
    pub a_plus: f64,
    pub a_minus: f64,
}

impl Add for ScatteringRates {
    type Output = ScatteringRates;

    fn add(self, rhs: ScatteringRates) -> ScatteringRates {
        ScatteringRates {
            a_plus: self.a_plus + rhs.a_plus,
            a_minus: self.a_minus + rhs.a_minus,
        }
    }
}

fn lorentzian(kappa: f64, offset: f64) -> f64 {
    kappa / (offset * offset + kappa * kappa / 4.0)
}

/// A± = g₀²n̄_cav·κ/((Δ∓Ω_m)² + κ²/4).
pub fn scattering_rates(params: &SystemParams, drive: &DriveTone) -> ScatteringRates {
    let coupling = params.g0 * params.g0 * drive.n_cav;
    ScatteringRates {
        a_plus: coupling * lorentzian(params.kappa, drive.detuning - params.omega_m),
        a_minus: coupling * lorentzian(params.kappa, drive.detuning + params.omega_m),
    }
}

/// Mean thermal occupation k_B·T/(ħΩ_m).
pub fn thermal_occupation(t_env: f64, omega_m: f64) -> Result<f64> {
    if !(t_env.is_finite() && t_env > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {t_env} K"
        )));
    }
    if !(omega_m.is_finite() && omega_m > 0.0) {
        return Err(Error::Domain(format!(
            "mechanical frequency must be positive, got {omega_m}"
        )));
    }
    Ok(constants::BOLTZMANN * t_env / (constants::HBAR * omega_m))
}

/// Right-hand side of the occupation rate equation,
/// dn̄/dt = (n̄+1)(A₊ + n̄_thΓ_m) − n̄(A₋ + (n̄_th+1)Γ_m).
pub fn occupation_rate(n_bar: f64, rates: &ScatteringRates, params: &SystemParams) -> f64 {
    let gain = rates.a_plus + params.n_th * params.gamma_m;
    let loss = rates.a_minus + (params.n_th + 1.0) * params.gamma_m;
    (n_bar + 1.0) * gain - n_bar * loss
}

/// Closed-form fixed point (A₊ + n̄_thΓ_m)/(A₋ − A₊ + Γ_m).
pub fn steady_state_occupation(rates: &ScatteringRates, params: &SystemParams) -> Result<f64> {
    let margin = rates.a_minus - rates.a_plus + params.gamma_m;
    if !(margin > 0.0) {
        return Err(Error::ParametricInstability { margin });
    }
    Ok((rates.a_plus + params.n_th * params.gamma_m) / margin)
}

/// Γ_opt = 4g₀²n̄_cav/κ. Equal to A₋ − A₊ only in the deep
/// sideband-resolved limit; exactly equal to A₋ at Δ = −Ω_m.
pub fn optical_broadening(params: &SystemParams, n_cav: f64) -> f64 {
    4.0 * params.g0 * params.g0 * n_cav / params.kappa
}

/// g_w = 2g₀²n̄_cav/κ; a write pulse of length T_w creates 2g_w·T_w pairs
/// on average at low gain.
pub fn write_gain(params: &SystemParams, n_cav: f64) -> f64 {
    2.0 * params.g0 * params.g0 * n_cav / params.kappa
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cooperativity {
    pub value: f64,
    /// Thermal phonon admixture in the readout, 1/C_q.
    pub thermal_admixture: f64,
}

pub fn quantum_cooperativity(gamma_opt: f64, gamma_th: f64) -> Result<Cooperativity> {
    if !(gamma_th > 0.0) {
        return Err(Error::Domain(format!(
            "thermal decoherence rate must be positive, got {gamma_th}"
        )));
    }
    let value = gamma_opt / gamma_th;
    Ok(Cooperativity {
        value,
        thermal_admixture: 1.0 / value,
    })
}
