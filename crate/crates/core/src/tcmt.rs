//! Coupled-mode model of the multi-channel microring with delayed feedback.
//!
//! The state evolved by [`Integrator`] is normalised:
//!
//! | quantity          | scale                         |
//! |-------------------|-------------------------------|
//! | time              | `tau_c`                       |
//! | modal amplitude   | `sqrt(P_ref * tau_c)` (√J)    |
//! | bus fields        | `sqrt(P_ref)` (√W)            |
//! | carrier density   | `1 / V_FCA` (carriers)        |
//! | temperature       | 1 K                           |
//!
//! `P_ref` is the total average input power of the run. In these units the
//! bus coupling `kappa_c` is `sqrt(2)` and `1/tau_c` is 1, which is how the
//! literal `(1/tau_c) a` feedback and drop terms are given a meaning.
//!
//! [`cavity_derivative`] evaluates the same right-hand side directly in SI
//! units; the two routes are cross-checked in the tests.

use crate::phys::{DerivedConstants, PhysicalParams, HBAR, SPEED_OF_LIGHT};
use crate::pipeline::ChannelConfig;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::f64::consts::{PI, SQRT_2, TAU};
use std::io::{Read, Write};
use thiserror::Error;

const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Error)]
pub enum TcmtError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("non-finite value in channel {channel} at step {step}")]
    NonFinite { channel: usize, step: u64 },
    #[error("divergence guard tripped at t = {time_s:.4e} s (channel {channel}, {quantity} = {value:.3e}, running median {median:.3e})")]
    Diverged {
        time_s: f64,
        channel: usize,
        quantity: &'static str,
        value: f64,
        median: f64,
    },
    #[error("delay buffer holds {available} entries but the delay needs {required}")]
    BufferUnderrun { required: usize, available: usize },
    #[error("input waveforms disagree: {0}")]
    Waveform(String),
    #[error("record dump: {0}")]
    Io(#[from] std::io::Error),
}

/// Instantaneous dynamical state, SI units.
#[derive(Debug, Clone, PartialEq)]
pub struct CavityState {
    pub modal_amp: Vec<Complex64>,
    pub delta_n_m3: f64,
    pub delta_t_k: f64,
}

impl CavityState {
    pub fn zeros(m: usize) -> Self {
        Self {
            modal_amp: vec![Complex64::new(0.0, 0.0); m],
            delta_n_m3: 0.0,
            delta_t_k: 0.0,
        }
    }
}

/// Time derivative of a [`CavityState`], SI units.
#[derive(Debug, Clone, PartialEq)]
pub struct CavityDerivative {
    pub modal_amp: Vec<Complex64>,
    pub delta_n_m3: f64,
    pub delta_t_k: f64,
}

/// Which term of the through-port field is fed back to the add port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackModalTerm {
    /// `(1/tau_c) a` read in normalised time, i.e. `a / sqrt(tau_c)` in SI.
    #[default]
    Literal,
    /// Standard through-port contribution `i kappa_c a`.
    Coupled,
}

/// How the drop-port field is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DropConvention {
    /// `E_drop = i kappa_c a + E_add`.
    #[default]
    Standard,
    /// `E_drop = (1/tau_c) a E_in + E_add` evaluated on normalised quantities.
    ProductLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackConfig {
    pub tau_d_s: f64,
    pub kappa_d: f64,
    pub delta_phi_rad: f64,
    pub enabled: bool,
    pub modal_term: FeedbackModalTerm,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            tau_d_s: 0.5e-9,
            kappa_d: 0.95,
            delta_phi_rad: TAU / 3.0,
            enabled: true,
            modal_term: FeedbackModalTerm::Literal,
        }
    }
}

impl FeedbackConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Independent enables for each nonlinear term. Carriers are generated
/// whenever either carrier effect is on; heat is generated when the
/// thermo-optic term is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearSwitches {
    pub tpa_loss: bool,
    pub fca_loss: bool,
    pub fcd: bool,
    pub thermo_optic: bool,
}

impl Default for NonlinearSwitches {
    fn default() -> Self {
        Self {
            tpa_loss: true,
            fca_loss: true,
            fcd: true,
            thermo_optic: true,
        }
    }
}

impl NonlinearSwitches {
    pub fn linear() -> Self {
        Self {
            tpa_loss: false,
            fca_loss: false,
            fcd: false,
            thermo_optic: false,
        }
    }

    fn carriers(&self) -> bool {
        self.fca_loss || self.fcd
    }
}

/// Everything the integrator needs for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub params: PhysicalParams,
    pub derived: DerivedConstants,
    pub channels: Vec<ChannelConfig>,
    pub feedback: FeedbackConfig,
    pub solver_step_s: f64,
    /// Solver steps between recorded drop samples.
    pub record_stride: usize,
    /// Solver steps between recorded carrier/temperature samples.
    pub trace_stride: usize,
    pub switches: NonlinearSwitches,
    pub drop_convention: DropConvention,
    /// Guard trips when a quantity exceeds this multiple of its running median.
    pub guard_factor: f64,
}

impl RunConfig {
    pub fn new(
        params: PhysicalParams,
        channels: Vec<ChannelConfig>,
        feedback: FeedbackConfig,
        solver_step_s: f64,
    ) -> Result<Self, TcmtError> {
        let derived = crate::phys::derive_constants(&params, channels.len().max(1))
            .map_err(|e| TcmtError::Config(e.to_string()))?;
        let cfg = Self {
            params,
            derived,
            channels,
            feedback,
            solver_step_s,
            record_stride: 1,
            trace_stride: 1,
            switches: NonlinearSwitches::default(),
            drop_convention: DropConvention::Standard,
            guard_factor: 1e6,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TcmtError> {
        let err = |s: String| Err(TcmtError::Config(s));
        if self.channels.is_empty() {
            return err("at least one channel is required".into());
        }
        self.params
            .validate()
            .map_err(|e| TcmtError::Config(e.to_string()))?;
        if !(self.solver_step_s > 0.0 && self.solver_step_s.is_finite()) {
            return err(format!("solver step must be positive, got {}", self.solver_step_s));
        }
        if self.record_stride == 0 || self.trace_stride == 0 {
            return err("record and trace strides must be at least 1".into());
        }
        let fb = &self.feedback;
        if !(0.0..=1.0).contains(&fb.kappa_d) {
            return err(format!("kappa_d must lie in [0, 1], got {}", fb.kappa_d));
        }
        if !(fb.tau_d_s >= 0.0) {
            return err(format!("tau_d must be nonnegative, got {}", fb.tau_d_s));
        }
        if fb.enabled {
            let ratio = fb.tau_d_s / self.solver_step_s;
            if (ratio - ratio.round()).abs() > 1e-6 || ratio.round() < 1.0 {
                return err(format!(
                    "feedback delay {} s must be a positive integer multiple of the solver step {} s",
                    fb.tau_d_s, self.solver_step_s
                ));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for ch in &self.channels {
            if !seen.insert(ch.channel_index) {
                return err(format!("duplicate channel index {}", ch.channel_index));
            }
            if !(ch.avg_power_w > 0.0 && ch.avg_power_w.is_finite()) {
                return err(format!("channel {} average power must be positive", ch.channel_index));
            }
        }
        if !(self.guard_factor > 1.0) {
            return err("guard factor must exceed 1".into());
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Resonance angular frequency of the `k`-th configured channel.
    pub fn resonance(&self, k: usize) -> f64 {
        self.derived.omega_r0_rad_per_s
            + self.derived.fsr_omega_rad_per_s * self.channels[k].channel_index as f64
    }

    /// Feedback delay in solver steps (0 when feedback is off).
    pub fn delay_steps(&self) -> usize {
        if self.feedback.enabled {
            (self.feedback.tau_d_s / self.solver_step_s).round() as usize
        } else {
            0
        }
    }

    /// Total average input power, the field normalisation reference.
    pub fn reference_power_w(&self) -> f64 {
        self.channels.iter().map(|c| c.avg_power_w).sum()
    }

    /// Round-trip phase `phi_k = tau_d omega_r_k + delta_phi`, reduced mod 2π.
    pub fn feedback_phase(&self, k: usize) -> f64 {
        feedback_phase(self.feedback.tau_d_s, self.resonance(k), self.feedback.delta_phi_rad)
    }
}

/// `2π tau_d c / lambda_r + delta_phi` reduced to [0, 2π).
pub fn feedback_phase(tau_d_s: f64, omega_r: f64, delta_phi: f64) -> f64 {
    let lambda_r = 2.0 * PI * SPEED_OF_LIGHT / omega_r;
    (2.0 * PI * tau_d_s * SPEED_OF_LIGHT / lambda_r).rem_euclid(TAU) + delta_phi.rem_euclid(TAU)
}

/// SI right-hand side of the cavity equations.
pub fn cavity_derivative(
    state: &CavityState,
    e_in: &[Complex64],
    e_add: &[Complex64],
    cfg: &RunConfig,
) -> Result<CavityDerivative, TcmtError> {
    let m = cfg.n_channels();
    if state.modal_amp.len() != m || e_in.len() != m || e_add.len() != m {
        return Err(TcmtError::Waveform(format!(
            "expected {m} channels, got state {}, input {}, add {}",
            state.modal_amp.len(),
            e_in.len(),
            e_add.len()
        )));
    }
    for k in 0..m {
        let ok = state.modal_amp[k].is_finite() && e_in[k].is_finite() && e_add[k].is_finite();
        if !ok {
            return Err(TcmtError::NonFinite { channel: k, step: 0 });
        }
    }
    if !state.delta_n_m3.is_finite() || !state.delta_t_k.is_finite() {
        return Err(TcmtError::NonFinite { channel: 0, step: 0 });
    }
    let p = &cfg.params;
    let d = &cfg.derived;
    let sw = cfg.switches;
    let c = SPEED_OF_LIGHT;
    let n = p.n_si;
    let gamma_fca = if sw.fca_loss {
        p.gamma_fca * p.sigma_fca_m2 * c / (2.0 * n) * state.delta_n_m3
    } else {
        0.0
    };
    let mut out = CavityDerivative {
        modal_amp: vec![Complex64::new(0.0, 0.0); m],
        delta_n_m3: -state.delta_n_m3 / p.tau_fc_s,
        delta_t_k: -state.delta_t_k / p.tau_th_s,
    };
    let mut absorbed = 0.0;
    for k in 0..m {
        let a = state.modal_amp[k];
        let energy = a.norm_sqr();
        let omega_r = cfg.resonance(k);
        let fcd = if sw.fcd { state.delta_n_m3 * p.dn_dn_m3 } else { 0.0 };
        let to = if sw.thermo_optic { state.delta_t_k * p.dn_dt_per_k } else { 0.0 };
        let delta = cfg.channels[k].detuning_rad_per_s + omega_r / n * (fcd + to);
        let gamma_tpa = if sw.tpa_loss {
            p.beta_tpa_m_per_w * c * c / (n * n * p.v_tpa_m3) * energy
        } else {
            0.0
        };
        let gamma = d.gamma_lin_per_s + gamma_tpa + gamma_fca;
        out.modal_amp[k] = (I * delta - gamma) * a + I * d.kappa_c * (e_in[k] + e_add[k]);
        if sw.carriers() {
            let omega_p = omega_r + cfg.channels[k].detuning_rad_per_s;
            out.delta_n_m3 += p.gamma_fca * c * c * p.beta_tpa_m_per_w
                / (2.0 * HBAR * omega_p * p.v_fca_m3 * p.v_fca_m3 * n * n)
                * energy
                * energy;
        }
        absorbed += (d.gamma_abs_per_s + gamma_tpa + gamma_fca) * energy;
    }
    if sw.thermo_optic {
        out.delta_t_k += p.gamma_th / p.heat_capacity_j_per_k() * absorbed;
    }
    Ok(out)
}

/// Delay line holding the input field and modal amplitude of every channel
/// `depth` solver steps in the past.
#[derive(Debug, Clone)]
pub struct DelayLine {
    depth: usize,
    m: usize,
    e_in: Vec<Complex64>,
    amp: Vec<Complex64>,
    head: usize,
}

impl DelayLine {
    pub fn new(m: usize, depth: usize) -> Self {
        Self {
            depth,
            m,
            e_in: vec![Complex64::new(0.0, 0.0); m * depth.max(1)],
            amp: vec![Complex64::new(0.0, 0.0); m * depth.max(1)],
            head: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Values written `depth` pushes ago (zeros during the cold start).
    #[inline]
    pub fn oldest(&self, ch: usize) -> (Complex64, Complex64) {
        let idx = self.head * self.m + ch;
        (self.e_in[idx], self.amp[idx])
    }

    /// Overwrite the oldest slot with the current values and advance.
    #[inline]
    pub fn push(&mut self, e_in: &[Complex64], amp: &[Complex64]) {
        let base = self.head * self.m;
        self.e_in[base..base + self.m].copy_from_slice(e_in);
        self.amp[base..base + self.m].copy_from_slice(amp);
        self.head += 1;
        if self.head == self.depth {
            self.head = 0;
        }
    }
}

/// Add-port fields `kappa_d e^{-i phi_k} [E_in(t - tau_d) + c a(t - tau_d)]`
/// in SI units, read from a delay line whose depth must equal the delay.
pub fn feedback_fields(history: &DelayLine, cfg: &RunConfig) -> Result<Vec<Complex64>, TcmtError> {
    let m = cfg.n_channels();
    if !cfg.feedback.enabled || cfg.feedback.kappa_d == 0.0 {
        return Ok(vec![Complex64::new(0.0, 0.0); m]);
    }
    let required = cfg.delay_steps();
    if history.depth() != required || history.m != m {
        return Err(TcmtError::BufferUnderrun {
            required,
            available: history.depth(),
        });
    }
    let modal = match cfg.feedback.modal_term {
        FeedbackModalTerm::Literal => Complex64::new(1.0 / cfg.params.tau_c_s.sqrt(), 0.0),
        FeedbackModalTerm::Coupled => I * cfg.derived.kappa_c,
    };
    Ok((0..m)
        .map(|k| {
            let (e, a) = history.oldest(k);
            let rot = Complex64::from_polar(cfg.feedback.kappa_d, -cfg.feedback_phase(k));
            rot * (e + modal * a)
        })
        .collect())
}

/// Drop-port fields in SI units.
pub fn drop_fields(
    state: &CavityState,
    e_in: &[Complex64],
    e_add: &[Complex64],
    cfg: &RunConfig,
) -> Vec<Complex64> {
    match cfg.drop_convention {
        DropConvention::Standard => state
            .modal_amp
            .iter()
            .zip(e_add)
            .map(|(a, add)| I * cfg.derived.kappa_c * a + add)
            .collect(),
        DropConvention::ProductLiteral => {
            let scale = 1.0 / (cfg.reference_power_w() * cfg.params.tau_c_s).sqrt();
            state
                .modal_amp
                .iter()
                .zip(e_in)
                .zip(e_add)
                .map(|((a, e), add)| a * e * scale + add)
                .collect()
        }
    }
}

/// Optical input of one channel on the solver grid: sample `k` is
/// `samples[k / hold]`, in √W.
#[derive(Debug, Clone, PartialEq)]
pub struct InputWaveform {
    pub samples: Vec<Complex64>,
    pub hold: usize,
}

impl InputWaveform {
    pub fn constant(value: Complex64, len: usize) -> Self {
        Self {
            samples: vec![value],
            hold: len,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len() * self.hold
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn at(&self, k: usize) -> Complex64 {
        self.samples[k / self.hold]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * factor).collect(),
            hold: self.hold,
        }
    }
}

/// Recorded output of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct DropRecord {
    /// `drop[ch][j]` is the drop field at the end of solver step `(j + 1) * stride - 1`.
    pub drop: Vec<Vec<Complex64>>,
    pub stride: usize,
    pub delta_n_m3: Vec<f64>,
    pub delta_t_k: Vec<f64>,
    pub trace_stride: usize,
    pub step_s: f64,
    /// Solver steps simulated before this record started.
    pub start_step: u64,
}

impl DropRecord {
    pub fn n_channels(&self) -> usize {
        self.drop.len()
    }

    pub fn n_samples(&self) -> usize {
        self.drop.first().map_or(0, |d| d.len())
    }

    pub fn power(&self, ch: usize) -> Vec<f64> {
        self.drop[ch].iter().map(|e| e.norm_sqr()).collect()
    }

    /// Little-endian dump: magic `RTDRCREC`, u32 version, u32 M, u64 samples,
    /// u64 stride, f64 step, u64 trace samples, u64 trace stride, then M
    /// blocks of (re, im) pairs, then the ΔN and ΔT traces.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), TcmtError> {
        w.write_all(b"RTDRCREC")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.n_channels() as u32).to_le_bytes())?;
        w.write_all(&(self.n_samples() as u64).to_le_bytes())?;
        w.write_all(&(self.stride as u64).to_le_bytes())?;
        w.write_all(&self.step_s.to_le_bytes())?;
        w.write_all(&(self.delta_n_m3.len() as u64).to_le_bytes())?;
        w.write_all(&(self.trace_stride as u64).to_le_bytes())?;
        for ch in &self.drop {
            for e in ch {
                w.write_all(&e.re.to_le_bytes())?;
                w.write_all(&e.im.to_le_bytes())?;
            }
        }
        for v in self.delta_n_m3.iter().chain(&self.delta_t_k) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, TcmtError> {
        fn u64_of<R: Read>(r: &mut R) -> std::io::Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        fn f64_of<R: Read>(r: &mut R) -> std::io::Result<f64> {
            Ok(f64::from_bits(u64_of(r)?))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"RTDRCREC" {
            return Err(TcmtError::Waveform("not a drop record dump".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        r.read_exact(&mut b4)?;
        let m = u32::from_le_bytes(b4) as usize;
        let samples = u64_of(&mut r)? as usize;
        let stride = u64_of(&mut r)? as usize;
        let step_s = f64_of(&mut r)?;
        let traces = u64_of(&mut r)? as usize;
        let trace_stride = u64_of(&mut r)? as usize;
        let mut drop = Vec::with_capacity(m);
        for _ in 0..m {
            let mut ch = Vec::with_capacity(samples);
            for _ in 0..samples {
                let re = f64_of(&mut r)?;
                let im = f64_of(&mut r)?;
                ch.push(Complex64::new(re, im));
            }
            drop.push(ch);
        }
        let delta_n_m3 = (0..traces).map(|_| f64_of(&mut r)).collect::<Result<_, _>>()?;
        let delta_t_k = (0..traces).map(|_| f64_of(&mut r)).collect::<Result<_, _>>()?;
        Ok(Self {
            drop,
            stride,
            delta_n_m3,
            delta_t_k,
            trace_stride,
            step_s,
            start_step: 0,
        })
    }
}

/// Normalised coefficients of the right-hand side.
#[derive(Debug, Clone)]
struct Coefficients {
    m: usize,
    detuning: Vec<f64>,
    fcd_shift: Vec<f64>,
    to_shift: Vec<f64>,
    gamma_lin: f64,
    gamma_abs: f64,
    tpa: f64,
    fca: f64,
    kappa: f64,
    carrier_decay: f64,
    carrier_gen: Vec<f64>,
    thermal_decay: f64,
    heat: f64,
}

impl Coefficients {
    fn new(cfg: &RunConfig) -> Self {
        let p = &cfg.params;
        let d = &cfg.derived;
        let sw = cfg.switches;
        let tc = p.tau_c_s;
        let pref = cfg.reference_power_w();
        let energy_scale = pref * tc;
        let c = SPEED_OF_LIGHT;
        let n = p.n_si;
        let m = cfg.n_channels();
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        let mut detuning = Vec::with_capacity(m);
        let mut fcd_shift = Vec::with_capacity(m);
        let mut to_shift = Vec::with_capacity(m);
        let mut carrier_gen = Vec::with_capacity(m);
        for k in 0..m {
            let omega_r = cfg.resonance(k);
            detuning.push(cfg.channels[k].detuning_rad_per_s * tc);
            fcd_shift.push(on(sw.fcd) * tc * omega_r / n * p.dn_dn_m3 / p.v_fca_m3);
            to_shift.push(on(sw.thermo_optic) * tc * omega_r / n * p.dn_dt_per_k);
            let omega_p = omega_r + cfg.channels[k].detuning_rad_per_s;
            let g = p.gamma_fca * c * c * p.beta_tpa_m_per_w
                / (2.0 * HBAR * omega_p * p.v_fca_m3 * p.v_fca_m3 * n * n);
            carrier_gen.push(on(sw.carriers()) * tc * p.v_fca_m3 * g * energy_scale * energy_scale);
        }
        Self {
            m,
            detuning,
            fcd_shift,
            to_shift,
            gamma_lin: d.gamma_lin_per_s * tc,
            gamma_abs: d.gamma_abs_per_s * tc,
            tpa: on(sw.tpa_loss) * tc * p.beta_tpa_m_per_w * c * c / (n * n * p.v_tpa_m3) * energy_scale,
            fca: on(sw.fca_loss) * tc * p.gamma_fca * p.sigma_fca_m2 * c / (2.0 * n) / p.v_fca_m3,
            kappa: SQRT_2,
            carrier_decay: tc / p.tau_fc_s,
            carrier_gen,
            thermal_decay: tc / p.tau_th_s,
            heat: on(sw.thermo_optic) * p.gamma_th / p.heat_capacity_j_per_k() * pref * tc,
        }
    }

    /// Writes d/dτ of (amp, ΔN, ΔT) given drive `e_in + e_add` per channel.
    #[inline]
    fn eval(&self, amp: &[Complex64], dn: f64, dt: f64, drive: &[Complex64], out: &mut [Complex64]) -> (f64, f64) {
        let gamma_fca = self.fca * dn;
        let mut d_dn = -self.carrier_decay * dn;
        let mut absorbed = 0.0;
        for k in 0..self.m {
            let a = amp[k];
            let energy = a.norm_sqr();
            let delta = self.detuning[k] + self.fcd_shift[k] * dn + self.to_shift[k] * dt;
            let gamma_tpa = self.tpa * energy;
            let gamma = self.gamma_lin + gamma_tpa + gamma_fca;
            // (iδ - γ) a + iκ drive
            out[k] = Complex64::new(
                -gamma * a.re - delta * a.im - self.kappa * drive[k].im,
                delta * a.re - gamma * a.im + self.kappa * drive[k].re,
            );
            d_dn += self.carrier_gen[k] * energy * energy;
            absorbed += (self.gamma_abs + gamma_tpa + gamma_fca) * energy;
        }
        (d_dn, -self.thermal_decay * dt + self.heat * absorbed)
    }
}

/// Exact running median over a stream of nonnegative values. Nonnegative
/// IEEE doubles order the same way as their bit patterns.
#[derive(Debug, Default, Clone)]
struct RunningMedian {
    low: BinaryHeap<u64>,
    high: BinaryHeap<Reverse<u64>>,
}

impl RunningMedian {
    fn push(&mut self, v: f64) {
        let bits = v.abs().to_bits();
        if self.low.peek().map_or(true, |&top| bits <= top) {
            self.low.push(bits);
        } else {
            self.high.push(Reverse(bits));
        }
        if self.low.len() > self.high.len() + 1 {
            let x = self.low.pop().unwrap();
            self.high.push(Reverse(x));
        } else if self.high.len() > self.low.len() {
            let Reverse(x) = self.high.pop().unwrap();
            self.low.push(x);
        }
    }

    fn median(&self) -> f64 {
        match (self.low.peek(), self.high.peek()) {
            (None, _) => 0.0,
            (Some(&l), Some(&Reverse(h))) if self.low.len() == self.high.len() => {
                0.5 * (f64::from_bits(l) + f64::from_bits(h))
            }
            (Some(&l), _) => f64::from_bits(l),
        }
    }

    fn len(&self) -> usize {
        self.low.len() + self.high.len()
    }
}

const GUARD_MIN_SAMPLES: usize = 256;

/// Fixed-step RK4 integrator that can be resumed across calls to [`run`](Self::run).
pub struct Integrator<'a> {
    cfg: &'a RunConfig,
    coeffs: Coefficients,
    h: f64,
    amp: Vec<Complex64>,
    dn: f64,
    dt: f64,
    delay: Option<DelayLine>,
    /// e^{-iφ_k} κ_d per channel, and the delayed-amplitude prefactor.
    fb_rot: Vec<Complex64>,
    fb_modal: Complex64,
    step: u64,
    medians: Vec<RunningMedian>,
}

impl<'a> Integrator<'a> {
    pub fn new(cfg: &'a RunConfig) -> Result<Self, TcmtError> {
        Self::with_state(cfg, &CavityState::zeros(cfg.n_channels()))
    }

    pub fn with_state(cfg: &'a RunConfig, warm: &CavityState) -> Result<Self, TcmtError> {
        cfg.validate()?;
        let m = cfg.n_channels();
        if warm.modal_amp.len() != m {
            return Err(TcmtError::Config(format!(
                "warm state has {} channels, run has {m}",
                warm.modal_amp.len()
            )));
        }
        let amp_scale = (cfg.reference_power_w() * cfg.params.tau_c_s).sqrt();
        let delay_steps = cfg.delay_steps();
        let delay = (cfg.feedback.enabled && cfg.feedback.kappa_d > 0.0)
            .then(|| DelayLine::new(m, delay_steps));
        let fb_rot = (0..m)
            .map(|k| Complex64::from_polar(cfg.feedback.kappa_d, -cfg.feedback_phase(k)))
            .collect();
        let fb_modal = match cfg.feedback.modal_term {
            FeedbackModalTerm::Literal => Complex64::new(1.0, 0.0),
            FeedbackModalTerm::Coupled => I * SQRT_2,
        };
        Ok(Self {
            cfg,
            coeffs: Coefficients::new(cfg),
            h: cfg.solver_step_s / cfg.params.tau_c_s,
            amp: warm.modal_amp.iter().map(|a| a / amp_scale).collect(),
            dn: warm.delta_n_m3 * cfg.params.v_fca_m3,
            dt: warm.delta_t_k,
            delay,
            fb_rot,
            fb_modal,
            step: 0,
            medians: vec![RunningMedian::default(); m + 2],
        })
    }

    /// Current state in SI units.
    pub fn state(&self) -> CavityState {
        let amp_scale = (self.cfg.reference_power_w() * self.cfg.params.tau_c_s).sqrt();
        CavityState {
            modal_amp: self.amp.iter().map(|a| a * amp_scale).collect(),
            delta_n_m3: self.dn / self.cfg.params.v_fca_m3,
            delta_t_k: self.dt,
        }
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Advance over the full length of `waveforms` (one per channel, SI √W).
    pub fn run(&mut self, waveforms: &[InputWaveform]) -> Result<DropRecord, TcmtError> {
        let cfg = self.cfg;
        let m = cfg.n_channels();
        if waveforms.len() != m {
            return Err(TcmtError::Waveform(format!("{} waveforms for {m} channels", waveforms.len())));
        }
        let len = waveforms[0].len();
        if waveforms.iter().any(|w| w.len() != len) {
            return Err(TcmtError::Waveform("waveforms have unequal lengths".into()));
        }
        let field_scale = cfg.reference_power_w().sqrt();
        let inv_field = 1.0 / field_scale;
        let drop_kappa = I * SQRT_2;
        let stride = cfg.record_stride;
        let tstride = cfg.trace_stride;
        let mut drop: Vec<Vec<Complex64>> = (0..m).map(|_| Vec::with_capacity(len / stride)).collect();
        let mut trace_n = Vec::with_capacity(len / tstride);
        let mut trace_t = Vec::with_capacity(len / tstride);
        let start_step = self.step;

        let zero = Complex64::new(0.0, 0.0);
        let mut e_in = vec![zero; m];
        let mut e_add = vec![zero; m];
        let mut drive = vec![zero; m];
        let mut k1 = vec![zero; m];
        let mut k2 = vec![zero; m];
        let mut k3 = vec![zero; m];
        let mut k4 = vec![zero; m];
        let mut tmp = vec![zero; m];
        let h = self.h;
        let c = self.coeffs.clone();
        let n_per_m3 = 1.0 / cfg.params.v_fca_m3;
        let energy_scale = cfg.reference_power_w() * cfg.params.tau_c_s;

        for idx in 0..len {
            for ch in 0..m {
                e_in[ch] = waveforms[ch].at(idx) * inv_field;
            }
            if let Some(delay) = self.delay.as_mut() {
                for ch in 0..m {
                    let (e_old, a_old) = delay.oldest(ch);
                    e_add[ch] = self.fb_rot[ch] * (e_old + self.fb_modal * a_old);
                }
                delay.push(&e_in, &self.amp);
            }
            for ch in 0..m {
                drive[ch] = e_in[ch] + e_add[ch];
            }

            let (n0, t0) = (self.dn, self.dt);
            let (dn1, dt1) = c.eval(&self.amp, n0, t0, &drive, &mut k1);
            for ch in 0..m {
                tmp[ch] = self.amp[ch] + k1[ch] * (0.5 * h);
            }
            let (dn2, dt2) = c.eval(&tmp, n0 + 0.5 * h * dn1, t0 + 0.5 * h * dt1, &drive, &mut k2);
            for ch in 0..m {
                tmp[ch] = self.amp[ch] + k2[ch] * (0.5 * h);
            }
            let (dn3, dt3) = c.eval(&tmp, n0 + 0.5 * h * dn2, t0 + 0.5 * h * dt2, &drive, &mut k3);
            for ch in 0..m {
                tmp[ch] = self.amp[ch] + k3[ch] * h;
            }
            let (dn4, dt4) = c.eval(&tmp, n0 + h * dn3, t0 + h * dt3, &drive, &mut k4);
            let h6 = h / 6.0;
            for ch in 0..m {
                self.amp[ch] += (k1[ch] + (k2[ch] + k3[ch]) * 2.0 + k4[ch]) * h6;
            }
            self.dn = n0 + h6 * (dn1 + 2.0 * (dn2 + dn3) + dn4);
            self.dt = t0 + h6 * (dt1 + 2.0 * (dt2 + dt3) + dt4);
            self.step += 1;

            if !self.dn.is_finite() || !self.dt.is_finite() {
                return Err(TcmtError::NonFinite { channel: 0, step: self.step });
            }
            for ch in 0..m {
                if !self.amp[ch].is_finite() {
                    return Err(TcmtError::NonFinite { channel: ch, step: self.step });
                }
            }

            let done = idx + 1;
            if done % stride == 0 {
                for ch in 0..m {
                    let d = match cfg.drop_convention {
                        DropConvention::Standard => drop_kappa * self.amp[ch] + e_add[ch],
                        DropConvention::ProductLiteral => self.amp[ch] * e_in[ch] + e_add[ch],
                    };
                    drop[ch].push(d * field_scale);
                    self.guard(ch, "|a|^2", self.amp[ch].norm_sqr() * energy_scale)?;
                }
                self.guard(m, "delta_n", self.dn * n_per_m3)?;
                self.guard(m + 1, "delta_t", self.dt)?;
            }
            if done % tstride == 0 {
                trace_n.push(self.dn * n_per_m3);
                trace_t.push(self.dt);
            }
        }
        Ok(DropRecord {
            drop,
            stride,
            delta_n_m3: trace_n,
            delta_t_k: trace_t,
            trace_stride: tstride,
            step_s: cfg.solver_step_s,
            start_step,
        })
    }

    fn guard(&mut self, slot: usize, quantity: &'static str, value: f64) -> Result<(), TcmtError> {
        let med = &mut self.medians[slot];
        let median = med.median();
        if med.len() >= GUARD_MIN_SAMPLES && median > 0.0 && value.abs() > self.cfg.guard_factor * median {
            return Err(TcmtError::Diverged {
                time_s: self.step as f64 * self.cfg.solver_step_s,
                channel: slot.min(self.cfg.n_channels() - 1),
                quantity,
                value,
                median,
            });
        }
        med.push(value);
        Ok(())
    }
}

/// Integrate from the all-zero state over the given waveforms.
pub fn integrate(cfg: &RunConfig, waveforms: &[InputWaveform]) -> Result<DropRecord, TcmtError> {
    Integrator::new(cfg)?.run(waveforms)
}

/// Closed-form steady state of the linear single-mode cavity under CW drive.
pub fn linear_steady_state(kappa_c: f64, gamma_lin: f64, detuning: f64, e_in: Complex64) -> Complex64 {
    I * kappa_c * e_in / Complex64::new(gamma_lin, -detuning)
}

/// `|E_drop / E_in|^2 = kappa_c^4 / (gamma^2 + detuning^2)`.
pub fn lorentzian_drop_transmission(kappa_c: f64, gamma_lin: f64, detuning: f64) -> f64 {
    kappa_c.powi(4) / (gamma_lin * gamma_lin + detuning * detuning)
}

/// One detuning of the linear-cavity check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzianPoint {
    pub detuning_rad_per_s: f64,
    pub simulated: f64,
    pub expected: f64,
    pub rel_error: f64,
}

/// Linear cavity without feedback under CW drive, one run per detuning.
///
/// `detunings` are in units of the linewidth `2 gamma_lin`. Each run lasts
/// `steps` solver steps and the last drop sample is compared with
/// [`lorentzian_drop_transmission`].
pub fn lorentzian_check(params: &PhysicalParams, detunings: &[f64], steps: usize) -> Result<Vec<LorentzianPoint>, TcmtError> {
    let power: f64 = 1e-3;
    let e = Complex64::new(power.sqrt(), 0.0);
    detunings
        .iter()
        .map(|&x| {
            let probe = crate::phys::derive_constants(params, 1).map_err(|e| TcmtError::Config(e.to_string()))?;
            let dw = x * 2.0 * probe.gamma_lin_per_s;
            let mut cfg = RunConfig::new(
                params.clone(),
                vec![ChannelConfig::new(0, dw, power)],
                FeedbackConfig::disabled(),
                2e-12,
            )?;
            cfg.switches = NonlinearSwitches::linear();
            cfg.record_stride = steps;
            let rec = integrate(&cfg, &[InputWaveform::constant(e, steps)])?;
            let simulated = rec.drop[0].last().map_or(f64::NAN, |d| d.norm_sqr()) / power;
            let expected = lorentzian_drop_transmission(cfg.derived.kappa_c, cfg.derived.gamma_lin_per_s, dw);
            Ok(LorentzianPoint { detuning_rad_per_s: dw, simulated, expected, rel_error: (simulated / expected - 1.0).abs() })
        })
        .collect()
}

/// End-state error of the linear cavity against its closed-form transient,
/// for each step size in `steps_s`, over a window of `duration_s`.
pub fn rk4_errors(params: &PhysicalParams, detuning_rad_per_s: f64, duration_s: f64, steps_s: &[f64]) -> Result<Vec<f64>, TcmtError> {
    let power: f64 = 1e-3;
    let e = Complex64::new(power.sqrt(), 0.0);
    steps_s
        .iter()
        .map(|&h| {
            let n = (duration_s / h).round() as usize;
            if n == 0 || ((n as f64) * h / duration_s - 1.0).abs() > 1e-9 {
                return Err(TcmtError::Config(format!("step {h} s does not divide {duration_s} s")));
            }
            let mut cfg = RunConfig::new(
                params.clone(),
                vec![ChannelConfig::new(0, detuning_rad_per_s, power)],
                FeedbackConfig::disabled(),
                h,
            )?;
            cfg.switches = NonlinearSwitches::linear();
            let mut integ = Integrator::new(&cfg)?;
            integ.run(&[InputWaveform::constant(e, n)])?;
            let a = integ.state().modal_amp[0];
            let (g, k) = (cfg.derived.gamma_lin_per_s, cfg.derived.kappa_c);
            let star = linear_steady_state(k, g, detuning_rad_per_s, e);
            let exact = star * (1.0 - (Complex64::new(-g, detuning_rad_per_s) * (n as f64 * h)).exp());
            Ok((a - exact).norm() / exact.norm())
        })
        .collect()
}
