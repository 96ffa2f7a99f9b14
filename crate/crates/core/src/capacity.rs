//! Memory capacity, information processing capacity and the nonlinear
//! detuning statistic.
//!
//! Every capacity is `1 - NMSE` of a ridge readout trained on the train
//! rows of a [`Split`] and evaluated on its test rows, clipped to `[0, 1]`.
//! Targets are built from the raw input sequence, never the masked drive.

use crate::phys::{DerivedConstants, PhysicalParams};
use crate::pipeline::StateMatrix;
use crate::readout::{predict_weights, ReadoutError, RidgeSolver, Rows};
use crate::tasks::{nmse, Split, TaskError};
use crate::tcmt::DropRecord;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CapacityError {
    #[error("insufficient rows: {0}")]
    InsufficientRows(String),
    #[error("basis has {count} functions, above the cap of {cap}; lower k_max/h_max or raise the cap")]
    BasisTooLarge { count: usize, cap: usize },
    #[error("input sample {index} = {value} lies outside [-1, 1]; rescale before computing IPC")]
    OutOfDomain { index: usize, value: f64 },
    #[error("record carries no carrier/temperature traces")]
    MissingTraces,
    #[error("channel {0} has no resonance in the derived grid")]
    UnknownChannel(usize),
    #[error("bad configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Readout(#[from] ReadoutError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Legendre polynomial `P_d(x)` by the three-term recurrence.
pub fn legendre(d: u32, x: f64) -> f64 {
    match d {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut p0, mut p1) = (1.0, x);
            for k in 1..d {
                let k = k as f64;
                let p2 = ((2.0 * k + 1.0) * x * p1 - k * p0) / (k + 1.0);
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    }
}

/// Affine map of `[lo, hi]` onto `[-1, 1]`.
pub fn rescale_to_unit(u: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    u.iter().map(|v| 2.0 * (v - lo) / (hi - lo) - 1.0).collect()
}

/// One product term `Π P_d(u(n - k))`, factors sorted by delay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisTerm {
    pub factors: Vec<(usize, u32)>,
}

impl BasisTerm {
    pub fn order(&self) -> u32 {
        self.factors.iter().map(|f| f.1).sum()
    }

    pub fn descriptor(&self) -> String {
        self.factors
            .iter()
            .map(|(k, d)| format!("P{d}(u[n-{k}])"))
            .collect::<Vec<_>>()
            .join("*")
    }

    pub fn eval(&self, u: &[f64], n: usize) -> f64 {
        self.factors.iter().map(|&(k, d)| legendre(d, u[n - k])).product()
    }
}

/// All products of total degree `order` over delays `0..=k_max` with at most
/// `max_factors` distinct delays.
pub fn enumerate_basis(k_max: usize, order: u32, max_factors: usize) -> Vec<BasisTerm> {
    fn rec(
        start: usize,
        k_max: usize,
        left: u32,
        slots: usize,
        cur: &mut Vec<(usize, u32)>,
        out: &mut Vec<BasisTerm>,
    ) {
        if left == 0 {
            out.push(BasisTerm { factors: cur.clone() });
            return;
        }
        if slots == 0 {
            return;
        }
        for k in start..=k_max {
            for d in (1..=left).rev() {
                cur.push((k, d));
                rec(k + 1, k_max, left - d, slots - 1, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    if order > 0 {
        rec(0, k_max, order, max_factors, &mut Vec::new(), &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacityConfig {
    pub k_max: usize,
    pub h_max: u32,
    pub max_factors: usize,
    pub basis_cap: usize,
    pub lambda: f64,
    /// Capacities at or below this value count as zero.
    pub threshold: f64,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self {
            k_max: 50,
            h_max: 3,
            max_factors: 2,
            basis_cap: 10_000,
            lambda: crate::readout::DEFAULT_LAMBDA,
            threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCapacity {
    pub term: String,
    pub order: u32,
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    /// `C[y_K]` for `K = 0..=k_max`.
    pub linear: Vec<f64>,
    pub c_lin: f64,
    /// `C_i` for orders `1..=h_max` (empty for a linear-only report).
    pub per_order: Vec<f64>,
    pub total: f64,
    pub terms: Vec<TermCapacity>,
    pub config: CapacityConfig,
    pub n_nodes: usize,
    pub basis_note: String,
}

impl CapacityReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), CapacityError> {
        writeln!(w, "term,order,capacity")?;
        for (k, c) in self.linear.iter().enumerate() {
            writeln!(w, "linear[n-{k}],1,{c}")?;
        }
        for t in &self.terms {
            writeln!(w, "{},{},{}", t.term, t.order, t.capacity)?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "c_lin": self.c_lin,
            "per_order": self.per_order,
            "total": self.total,
            "n_nodes": self.n_nodes,
            "k_max": self.config.k_max,
            "h_max": self.config.h_max,
            "max_factors": self.config.max_factors,
            "lambda": self.config.lambda,
            "threshold": self.config.threshold,
            "n_terms": self.terms.len(),
            "basis": self.basis_note,
        })
    }
}

fn clip(c: f64, threshold: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    if c <= threshold { 0.0 } else { c }
}

/// Rows used for fitting and for evaluation, gathered once.
struct Design<'a> {
    solver: RidgeSolver<'a>,
    train: Range<usize>,
    test_x: Vec<f64>,
    test_rows: Vec<usize>,
    cols: usize,
}

impl<'a> Design<'a> {
    fn new(states: &'a StateMatrix, split: &Split, input_len: usize, k_max: usize, lambda: f64) -> Result<Self, CapacityError> {
        if split.total_len() != states.rows || input_len != states.rows {
            return Err(CapacityError::InsufficientRows(format!(
                "{} state rows, {} inputs, split covers {}",
                states.rows,
                input_len,
                split.total_len()
            )));
        }
        let train = split.train_range();
        let tests = split.test_ranges();
        let min_rows = 10 * states.cols;
        let test_len: usize = tests.iter().map(|r| r.len()).sum();
        if train.start < k_max || tests.iter().any(|r| r.start < k_max) {
            return Err(CapacityError::InsufficientRows(format!("warm-up of {} rows is shorter than k_max = {k_max}", split.warmup_len)));
        }
        if train.len() < min_rows || test_len < min_rows {
            return Err(CapacityError::InsufficientRows(format!(
                "train {} / test {} rows, need at least {min_rows} each",
                train.len(),
                test_len
            )));
        }
        let test_rows: Vec<usize> = tests.into_iter().flatten().collect();
        let mut test_x = Vec::with_capacity(test_rows.len() * states.cols);
        for &n in &test_rows {
            test_x.extend_from_slice(states.row(n));
        }
        Ok(Self {
            solver: RidgeSolver::new(states.rows_view(train.clone()), lambda)?,
            train,
            test_x,
            test_rows,
            cols: states.cols,
        })
    }

    fn capacity(&self, target: impl Fn(usize) -> f64) -> Result<f64, CapacityError> {
        let y: Vec<f64> = self.train.clone().map(&target).collect();
        let model = self.solver.solve(&y)?;
        let pred = predict_weights(Rows::new(&self.test_x, self.cols), &model.weights)?;
        let t: Vec<f64> = self.test_rows.iter().map(|&n| target(n)).collect();
        match nmse(&pred, &t) {
            Ok(e) => Ok(1.0 - e),
            Err(TaskError::ZeroVariance) => Ok(0.0),
            Err(e) => Err(e.into()),
        }
    }
}

/// Per-delay linear capacities and their sum. Rows before `k_max` must be
/// warm-up so every target `u(n - K)` exists.
pub fn linear_mc(
    states: &StateMatrix,
    input: &[f64],
    split: &Split,
    k_max: usize,
    lambda: f64,
) -> Result<(Vec<f64>, f64), CapacityError> {
    let design = Design::new(states, split, input.len(), k_max, lambda)?;
    let per_k = (0..=k_max)
        .into_par_iter()
        .map(|k| design.capacity(|n| input[n - k]).map(|c| clip(c, 0.0)))
        .collect::<Result<Vec<_>, _>>()?;
    let total = per_k.iter().sum::<f64>();
    bound_check(total, states.cols);
    Ok((per_k, total))
}

fn bound_check(c_lin: f64, n_nodes: usize) {
    // Held-out capacity can never exceed the feature count.
    assert!(c_lin <= n_nodes as f64 + 1e-9, "linear memory capacity {c_lin} exceeds N = {n_nodes}");
}

/// Legendre-product capacities up to order `h_max`. `input` must already lie
/// in `[-1, 1]`.
pub fn total_ipc(
    states: &StateMatrix,
    input: &[f64],
    split: &Split,
    cfg: &CapacityConfig,
) -> Result<CapacityReport, CapacityError> {
    if cfg.h_max < 1 || cfg.max_factors < 1 {
        return Err(CapacityError::Config("h_max and max_factors must be at least 1".into()));
    }
    if let Some((index, &value)) = input.iter().enumerate().find(|(_, v)| !(v.abs() <= 1.0)) {
        return Err(CapacityError::OutOfDomain { index, value });
    }
    let basis: Vec<BasisTerm> = (1..=cfg.h_max)
        .flat_map(|i| enumerate_basis(cfg.k_max, i, cfg.max_factors))
        .collect();
    if basis.len() > cfg.basis_cap {
        return Err(CapacityError::BasisTooLarge { count: basis.len(), cap: cfg.basis_cap });
    }
    let design = Design::new(states, split, input.len(), cfg.k_max, cfg.lambda)?;
    let caps = basis
        .par_iter()
        .map(|term| design.capacity(|n| term.eval(input, n)).map(|c| clip(c, cfg.threshold)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut per_order = vec![0.0; cfg.h_max as usize];
    let mut linear = vec![0.0; cfg.k_max + 1];
    let mut terms = Vec::with_capacity(basis.len());
    for (term, &c) in basis.iter().zip(&caps) {
        per_order[term.order() as usize - 1] += c;
        if term.order() == 1 {
            linear[term.factors[0].0] = c;
        }
        terms.push(TermCapacity { term: term.descriptor(), order: term.order(), capacity: c });
    }
    let c_lin = linear.iter().sum::<f64>();
    bound_check(c_lin, states.cols);
    Ok(CapacityReport {
        c_lin,
        total: per_order.iter().sum(),
        linear,
        per_order,
        terms,
        config: *cfg,
        n_nodes: states.cols,
        basis_note: format!(
            "Legendre products over delays 0..={}, total degree 1..={}, at most {} distinct delays",
            cfg.k_max, cfg.h_max, cfg.max_factors
        ),
    })
}

/// Nonlinear detuning `δ_NL(t)/2π` in Hz for one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetuningTrace {
    pub channel: usize,
    pub values_hz: Vec<f64>,
    pub dt_s: f64,
}

impl DetuningTrace {
    pub fn sigma_hz(&self) -> f64 {
        std_dev(&self.values_hz)
    }
}

/// Population standard deviation, two-pass.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Trace of `(ω_r/(2π n)) (ΔN dn/dN + ΔT dn/dT)` after dropping the first
/// `skip` trace samples (the warm-up).
pub fn detuning_trace(
    record: &DropRecord,
    params: &PhysicalParams,
    derived: &DerivedConstants,
    channel_index: usize,
    skip: usize,
) -> Result<DetuningTrace, CapacityError> {
    if record.delta_n_m3.is_empty() || record.delta_n_m3.len() != record.delta_t_k.len() {
        return Err(CapacityError::MissingTraces);
    }
    let omega_r = *derived
        .resonance_grid
        .get(channel_index)
        .ok_or(CapacityError::UnknownChannel(channel_index))?;
    let scale = omega_r / (2.0 * std::f64::consts::PI * params.n_si);
    let values_hz = record
        .delta_n_m3
        .iter()
        .zip(&record.delta_t_k)
        .skip(skip)
        .map(|(dn, dt)| scale * (dn * params.dn_dn_m3 + dt * params.dn_dt_per_k))
        .collect();
    Ok(DetuningTrace {
        channel: channel_index,
        values_hz,
        dt_s: record.step_s * record.trace_stride as f64,
    })
}

/// Standard deviation of the nonlinear detuning in Hz.
pub fn nl_detuning_sigma(
    record: &DropRecord,
    params: &PhysicalParams,
    derived: &DerivedConstants,
    channel_index: usize,
    skip: usize,
) -> Result<f64, CapacityError> {
    Ok(detuning_trace(record, params, derived, channel_index, skip)?.sigma_hz())
}
