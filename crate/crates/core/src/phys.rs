//! Physical constants of the silicon microring and the quantities derived
//! from them (free spectral range, resonance grid, coupling and loss rates).

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;

#[derive(Debug, Error, PartialEq)]
pub enum PhysError {
    #[error("channel count must be at least 1")]
    NoChannels,
    #[error("parameter `{name}` = {value} is out of range: {reason}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
}

/// Material and geometry parameters of the ring. Immutable per experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalParams {
    /// Ring mass. The default is 1.2e-11 g, which matches the silicon volume
    /// of a 7.5 µm ring (about 5 µm³); 1.2e-11 kg would be a thousand times
    /// heavier and leaves the thermo-optic shift negligible at any power.
    pub mass_kg: f64,
    pub beta_tpa_m_per_w: f64,
    pub tau_c_s: f64,
    pub gamma_fca: f64,
    pub n_si: f64,
    pub gamma_th: f64,
    pub lambda0_m: f64,
    pub dn_dt_per_k: f64,
    pub ring_circumference_m: f64,
    pub dn_dn_m3: f64,
    pub cp_j_per_gk: f64,
    pub sigma_fca_m2: f64,
    pub v_fca_m3: f64,
    pub v_tpa_m3: f64,
    pub tau_th_s: f64,
    pub tau_fc_s: f64,
    pub alpha_db_per_cm: f64,
    /// Group index; taken equal to the material index when dispersion is ignored.
    pub n_group: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            mass_kg: 1.2e-14,
            beta_tpa_m_per_w: 8.4e-11,
            tau_c_s: 54.7e-12,
            gamma_fca: 0.9996,
            n_si: 3.485,
            gamma_th: 0.9355,
            lambda0_m: 1552.89e-9,
            dn_dt_per_k: 1.86e-4,
            ring_circumference_m: 2.0 * PI * 7.5e-6,
            dn_dn_m3: -1.73e-27,
            cp_j_per_gk: 0.7,
            sigma_fca_m2: 1.0e-21,
            v_fca_m3: 2.36e-18,
            v_tpa_m3: 2.59e-18,
            tau_th_s: 50e-9,
            tau_fc_s: 10e-9,
            alpha_db_per_cm: 0.8,
            n_group: 3.485,
        }
    }
}

fn positive(name: &'static str, value: f64) -> Result<(), PhysError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(PhysError::OutOfRange {
            name,
            value,
            reason: "must be finite and strictly positive",
        })
    }
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<(), PhysError> {
        positive("mass_kg", self.mass_kg)?;
        positive("beta_tpa_m_per_w", self.beta_tpa_m_per_w)?;
        positive("tau_c_s", self.tau_c_s)?;
        positive("gamma_fca", self.gamma_fca)?;
        positive("n_si", self.n_si)?;
        positive("gamma_th", self.gamma_th)?;
        positive("lambda0_m", self.lambda0_m)?;
        positive("dn_dt_per_k", self.dn_dt_per_k)?;
        positive("ring_circumference_m", self.ring_circumference_m)?;
        positive("cp_j_per_gk", self.cp_j_per_gk)?;
        positive("sigma_fca_m2", self.sigma_fca_m2)?;
        positive("v_fca_m3", self.v_fca_m3)?;
        positive("v_tpa_m3", self.v_tpa_m3)?;
        positive("tau_th_s", self.tau_th_s)?;
        positive("tau_fc_s", self.tau_fc_s)?;
        positive("alpha_db_per_cm", self.alpha_db_per_cm)?;
        positive("n_group", self.n_group)?;
        if !(self.dn_dn_m3.is_finite() && self.dn_dn_m3 < 0.0) {
            return Err(PhysError::OutOfRange {
                name: "dn_dn_m3",
                value: self.dn_dn_m3,
                reason: "free-carrier dispersion coefficient must be strictly negative",
            });
        }
        if self.tau_th_s <= self.tau_fc_s {
            return Err(PhysError::OutOfRange {
                name: "tau_th_s",
                value: self.tau_th_s,
                reason: "thermal time constant must exceed the carrier lifetime",
            });
        }
        Ok(())
    }

    /// Power attenuation coefficient in 1/m (dB/cm times ln(10)/10, per cm).
    pub fn alpha_per_m(&self) -> f64 {
        self.alpha_db_per_cm * std::f64::consts::LN_10 / 10.0 * 100.0
    }

    /// Heat capacity `m·c_p` in J/K; `c_p` is stored per gram.
    pub fn heat_capacity_j_per_k(&self) -> f64 {
        self.mass_kg * self.cp_j_per_gk * 1.0e3
    }
}

/// Quantities every other module derives from [`PhysicalParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    /// FSR in wavelength, m.
    pub fsr_lambda_m: f64,
    /// FSR in angular frequency, rad/s.
    pub fsr_omega_rad_per_s: f64,
    /// Bus coupling factor `sqrt(2/tau_c)`, s^-1/2.
    pub kappa_c: f64,
    /// Linear amplitude loss rate `c·alpha/n + 2/tau_c`, 1/s.
    pub gamma_lin_per_s: f64,
    /// Intrinsic absorption part `c·alpha/n`, 1/s.
    pub gamma_abs_per_s: f64,
    pub omega_r0_rad_per_s: f64,
    /// Resonance angular frequencies of channels 0..M.
    pub resonance_grid: Vec<f64>,
}

pub fn derive_constants(params: &PhysicalParams, m: usize) -> Result<DerivedConstants, PhysError> {
    if m == 0 {
        return Err(PhysError::NoChannels);
    }
    params.validate()?;
    let lambda0 = params.lambda0_m;
    let fsr_lambda_m = lambda0 * lambda0 / (params.ring_circumference_m * params.n_group);
    let fsr_omega_rad_per_s = fsr_lambda_to_omega(fsr_lambda_m, lambda0);
    let kappa_c = (2.0 / params.tau_c_s).sqrt();
    let gamma_abs_per_s = SPEED_OF_LIGHT * params.alpha_per_m() / params.n_si;
    let gamma_lin_per_s = gamma_abs_per_s + 2.0 / params.tau_c_s;
    let omega_r0_rad_per_s = 2.0 * PI * SPEED_OF_LIGHT / lambda0;
    let resonance_grid = (0..m)
        .map(|i| omega_r0_rad_per_s + fsr_omega_rad_per_s * i as f64)
        .collect();
    Ok(DerivedConstants {
        fsr_lambda_m,
        fsr_omega_rad_per_s,
        kappa_c,
        gamma_lin_per_s,
        gamma_abs_per_s,
        omega_r0_rad_per_s,
        resonance_grid,
    })
}

pub fn fsr_lambda_to_omega(fsr_lambda_m: f64, lambda_m: f64) -> f64 {
    2.0 * PI * SPEED_OF_LIGHT * fsr_lambda_m / (lambda_m * lambda_m)
}

pub fn fsr_omega_to_lambda(fsr_omega: f64, lambda_m: f64) -> f64 {
    fsr_omega * lambda_m * lambda_m / (2.0 * PI * SPEED_OF_LIGHT)
}

/// Loaded quality factor `omega_r0 / (2 gamma_lin)` and intensity linewidth
/// `gamma_lin / pi` in Hz. Diagnostic only.
pub fn q_and_fwhm(params: &PhysicalParams) -> Result<(f64, f64), PhysError> {
    let d = derive_constants(params, 1)?;
    Ok(q_fwhm_from_rates(d.omega_r0_rad_per_s, d.gamma_lin_per_s))
}

pub(crate) fn q_fwhm_from_rates(omega_r0: f64, gamma_lin: f64) -> (f64, f64) {
    (omega_r0 / (2.0 * gamma_lin), gamma_lin / PI)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * (w / 1e-3).log10()
}

pub fn ghz_to_rad_per_s(ghz: f64) -> f64 {
    2.0 * PI * ghz * 1e9
}
