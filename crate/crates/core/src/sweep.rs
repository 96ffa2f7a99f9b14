//! Experiment orchestration: scenarios, seed averaging and grid sweeps.

use crate::capacity::{self, CapacityConfig, CapacityError, CapacityReport};
use crate::phys::{dbm_to_watts, ghz_to_rad_per_s, PhysicalParams};
use crate::pipeline::{
    build_mask, detect_and_sample, mask_bias_modulate, ChannelConfig, NodeSampling, NodeTiming, PipelineError, StateMatrix,
};
use crate::readout::{predict, train_ridge, ReadoutError, DEFAULT_LAMBDA};
use crate::tasks::{self, derive_seed, ScoreOptions, Split, TaskDataset, TaskError, TaskKind};
use crate::tcmt::{DropConvention, FeedbackConfig, InputWaveform, Integrator, NonlinearSwitches, RunConfig, TcmtError};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("integration failed at {at}: {source}")]
    Integration {
        at: String,
        #[source]
        source: TcmtError,
    },
    #[error("seed {seed}, channel {channel}: {source}")]
    Pipeline {
        seed: u64,
        channel: usize,
        #[source]
        source: PipelineError,
    },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Readout(#[from] ReadoutError),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error("maps differ: {0}")]
    MapMismatch(String),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Seed tags keeping dataset, mask and noise streams apart.
const DATA_TAG: u64 = 0x6461_7461;
const MASK_TAG: u64 = 0x6d61_736b;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub task: TaskKind,
    pub detuning_ghz: f64,
    /// Required under [`PowerRule::PerChannel`], ignored otherwise.
    #[serde(default)]
    pub power_dbm: Option<f64>,
    /// Defaults to [`default_bias`] of the task.
    #[serde(default)]
    pub bias: Option<f64>,
    /// Resonance order; defaults to the position in the channel list.
    #[serde(default)]
    pub channel_index: Option<i32>,
}

impl ChannelSpec {
    pub fn new(task: TaskKind, detuning_ghz: f64) -> Self {
        Self { task, detuning_ghz, power_dbm: None, bias: None, channel_index: None }
    }

    pub fn with_power(mut self, dbm: f64) -> Self {
        self.power_dbm = Some(dbm);
        self
    }
}

/// Bias keeping `X = (u + pre_mask_bias) m + bias` positive for every task.
pub fn default_bias(kind: TaskKind) -> f64 {
    match kind {
        TaskKind::ChannelEq => 30.0,
        _ => 8.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerRule {
    /// `P_i = P_T / M`.
    #[default]
    Equal,
    /// Each channel carries its own `power_dbm`.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lengths {
    pub warmup: usize,
    pub train: usize,
    pub test: Vec<usize>,
}

impl Default for Lengths {
    fn default() -> Self {
        Self { warmup: 250, train: 2000, test: vec![2000] }
    }
}

impl Lengths {
    pub fn paper_large() -> Self {
        Self { warmup: 250, train: 20_000, test: vec![10_000; 10] }
    }

    pub fn split(&self) -> Split {
        Split::new(self.warmup, self.train, self.test.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum RadarSource {
    Surrogate,
    File { path: PathBuf, #[serde(default)] offset: usize },
}

/// Unit of the detected node values fed to the readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureUnits {
    /// Drive units: power divided by `P_i / <X>`, so that `|E_in|^2 = X`.
    #[default]
    Drive,
    Watts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfPulseConfig {
    pub enabled: bool,
    pub duration_s: f64,
    /// Peak-to-peak half amplitude over mean that counts as oscillation.
    pub threshold: f64,
}

impl Default for SelfPulseConfig {
    fn default() -> Self {
        Self { enabled: true, duration_s: 200e-9, threshold: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub params: PhysicalParams,
    pub feedback: FeedbackConfig,
    pub switches: NonlinearSwitches,
    pub drop_convention: DropConvention,
    pub solver_step_s: f64,
    pub n_nodes: usize,
    pub symbol_rate_bd: f64,
    pub lambda: f64,
    pub sampling: NodeSampling,
    pub feature_units: FeatureUnits,
    pub total_power_dbm: f64,
    pub power_rule: PowerRule,
    pub channels: Vec<ChannelSpec>,
    pub lengths: Lengths,
    pub seeds: Vec<u64>,
    /// Feed every channel the same dataset and mask (replication studies).
    pub identical_channels: bool,
    /// `None` disables the channel noise.
    pub cheq_snr_db: Option<f64>,
    pub radar_k: usize,
    pub radar: RadarSource,
    pub score: ScoreOptions,
    pub self_pulse: SelfPulseConfig,
    /// When set, capacity reports are computed for every channel (first seed).
    pub capacity: Option<CapacityConfig>,
    /// Report the spread of the nonlinear detuning per channel.
    pub detuning: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "narma-single".into(),
            params: PhysicalParams::default(),
            feedback: FeedbackConfig::default(),
            switches: NonlinearSwitches::default(),
            drop_convention: DropConvention::Standard,
            solver_step_s: 2e-12,
            n_nodes: 50,
            symbol_rate_bd: 1e9,
            lambda: DEFAULT_LAMBDA,
            sampling: NodeSampling::SlotEnd,
            feature_units: FeatureUnits::Drive,
            total_power_dbm: -5.0,
            power_rule: PowerRule::Equal,
            channels: vec![ChannelSpec::new(TaskKind::Narma10, 30.0)],
            lengths: Lengths::default(),
            seeds: (0..10).collect(),
            identical_channels: false,
            cheq_snr_db: Some(32.0),
            radar_k: 2,
            radar: RadarSource::Surrogate,
            score: ScoreOptions::default(),
            self_pulse: SelfPulseConfig::default(),
            capacity: None,
            detuning: false,
        }
    }
}

pub const SCENARIO_PRESETS: [&str; 5] = ["narma-single", "narma-wdm4", "multitask", "paper-large", "linear-null"];

impl Scenario {
    pub fn preset(name: &str) -> Result<Self, SweepError> {
        let base = Scenario::default();
        let s = match name {
            "narma-single" => base,
            "narma-wdm4" => Scenario {
                name: name.into(),
                // -1.02 dBm per channel
                total_power_dbm: -1.02 + 10.0 * 4f64.log10(),
                channels: vec![ChannelSpec::new(TaskKind::Narma10, 35.0); 4],
                identical_channels: true,
                ..base
            },
            "multitask" => Scenario {
                name: name.into(),
                power_rule: PowerRule::PerChannel,
                channels: vec![
                    ChannelSpec::new(TaskKind::Narma10, -50.0).with_power(0.0),
                    ChannelSpec::new(TaskKind::Swc, -40.0).with_power(-10.0),
                    ChannelSpec::new(TaskKind::ChannelEq, 75.0).with_power(17.5),
                    ChannelSpec::new(TaskKind::Radar, -25.0).with_power(17.5),
                ],
                ..base
            },
            "paper-large" => Scenario {
                name: name.into(),
                lengths: Lengths::paper_large(),
                ..Scenario::preset("multitask")?
            },
            "linear-null" => Scenario {
                name: name.into(),
                feedback: FeedbackConfig::disabled(),
                switches: NonlinearSwitches::linear(),
                self_pulse: SelfPulseConfig { enabled: false, ..SelfPulseConfig::default() },
                ..base
            },
            other => return Err(SweepError::UnknownPreset(other.to_string())),
        };
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        let err = |s: String| Err(SweepError::Scenario(s));
        if self.seeds.is_empty() {
            return err("seed list is empty".into());
        }
        if self.channels.is_empty() {
            return err("no channels".into());
        }
        if self.lengths.train == 0 || self.lengths.test.is_empty() || self.lengths.test.contains(&0) {
            return err("train and test lengths must be positive".into());
        }
        if self.n_nodes == 0 || !(self.symbol_rate_bd > 0.0) {
            return err("node count and symbol rate must be positive".into());
        }
        if self.power_rule == PowerRule::PerChannel {
            if let Some(k) = self.channels.iter().position(|c| c.power_dbm.is_none()) {
                return err(format!("channel {k} has no power_dbm under the per-channel power rule"));
            }
        }
        if self.radar_k == 0 {
            return err("radar_k must be at least 1".into());
        }
        if !(self.self_pulse.duration_s >= 0.0) {
            return err("self-pulse continuation must be nonnegative".into());
        }
        self.params.validate().map_err(|e| SweepError::Scenario(e.to_string()))?;
        Ok(())
    }

    /// Per-channel average powers in W.
    pub fn channel_powers_w(&self) -> Vec<f64> {
        match self.power_rule {
            PowerRule::Equal => {
                let each = dbm_to_watts(self.total_power_dbm) / self.channels.len() as f64;
                vec![each; self.channels.len()]
            }
            PowerRule::PerChannel => self.channels.iter().map(|c| dbm_to_watts(c.power_dbm.unwrap_or(f64::NAN))).collect(),
        }
    }

    pub fn timing(&self) -> Result<NodeTiming, SweepError> {
        NodeTiming::new(self.n_nodes, self.symbol_rate_bd, self.solver_step_s)
            .map_err(|e| SweepError::Scenario(e.to_string()))
    }

    fn run_config(&self) -> Result<RunConfig, SweepError> {
        let powers = self.channel_powers_w();
        let channels = self
            .channels
            .iter()
            .zip(&powers)
            .enumerate()
            .map(|(k, (c, &p))| {
                let mut cc = ChannelConfig::new(c.channel_index.unwrap_or(k as i32), ghz_to_rad_per_s(c.detuning_ghz), p);
                cc.bias = c.bias.unwrap_or_else(|| default_bias(c.task));
                cc.task_binding = k;
                cc
            })
            .collect();
        let mut cfg = RunConfig::new(self.params.clone(), channels, self.feedback.clone(), self.solver_step_s)
            .map_err(|e| SweepError::Scenario(e.to_string()))?;
        cfg.switches = self.switches;
        cfg.drop_convention = self.drop_convention;
        Ok(cfg)
    }

    /// Dataset for channel slot `slot` under experiment seed `seed`.
    pub fn dataset(&self, slot: usize, seed: u64) -> Result<TaskDataset, SweepError> {
        let split = self.lengths.split();
        let len = split.total_len();
        let slot_tag = if self.identical_channels { 0 } else { slot as u64 };
        let s = derive_seed(seed, &[DATA_TAG, slot_tag]);
        let ds = match self.channels[slot].task {
            TaskKind::Narma10 => tasks::gen_narma10(s, len)?,
            TaskKind::Swc => {
                let mut d = tasks::gen_swc(s, len.div_ceil(tasks::SWC_PERIOD) * tasks::SWC_PERIOD)?;
                d.input_u.truncate(len);
                d.target_y.truncate(len);
                d
            }
            TaskKind::ChannelEq => tasks::gen_cheq(s, len, self.cheq_snr_db)?,
            TaskKind::Radar => match &self.radar {
                RadarSource::Surrogate => tasks::gen_radar_surrogate(s, len, self.radar_k)?,
                RadarSource::File { path, offset } => tasks::load_radar(path, self.radar_k, *offset, Some(len))?,
            },
        };
        Ok(ds.with_split(split)?)
    }

    fn mask_seed(&self, slot: usize, seed: u64) -> u64 {
        let slot_tag = if self.identical_channels { 0 } else { slot as u64 };
        derive_seed(seed, &[MASK_TAG, slot_tag])
    }
}

/// Scores of one channel for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    /// One value per test subset.
    pub subsets: Vec<f64>,
    pub self_pulsing: bool,
    pub modulation_index: f64,
    pub sigma_nl_hz: Option<f64>,
}

impl SeedScore {
    pub fn value(&self) -> f64 {
        self.subsets.iter().sum::<f64>() / self.subsets.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelOutcome {
    pub channel: usize,
    pub task: TaskKind,
    pub metric: String,
    pub per_seed: Vec<SeedScore>,
    pub mean: f64,
    pub std: f64,
    pub self_pulsing: bool,
    pub sigma_nl_hz: Option<f64>,
    pub capacity: Option<CapacityReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub scenario: String,
    pub channels: Vec<ChannelOutcome>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct SeedRun {
    scores: Vec<SeedScore>,
    capacity: Vec<Option<CapacityReport>>,
}

/// Drop-power oscillation test on a continuation held at the mean input.
fn self_pulsing(integ: &mut Integrator<'_>, cfg: &RunConfig, sp: &SelfPulseConfig, spn: usize) -> Result<Vec<bool>, TcmtError> {
    let steps = (sp.duration_s / cfg.solver_step_s).round() as usize;
    if steps < 2 * spn {
        return Ok(vec![false; cfg.n_channels()]);
    }
    let constant: Vec<InputWaveform> = cfg
        .channels
        .iter()
        .map(|c| InputWaveform::constant(Complex64::new(c.avg_power_w.sqrt(), 0.0), steps))
        .collect();
    let rec = integ.run(&constant)?;
    Ok((0..cfg.n_channels())
        .map(|ch| {
            let p = rec.power(ch);
            let tail = &p[p.len() / 2..];
            let mean = tail.iter().sum::<f64>() / tail.len() as f64;
            let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            mean > 0.0 && 0.5 * (hi - lo) > sp.threshold * mean
        })
        .collect())
}

/// Reservoir response of one seed: per-channel datasets and readout
/// features, plus the self-pulsing verdicts.
pub struct Simulation {
    pub seed: u64,
    pub datasets: Vec<TaskDataset>,
    pub states: Vec<StateMatrix>,
    pub self_pulsing: Vec<bool>,
    pub modulation_index: Vec<f64>,
    /// Spread of the nonlinear detuning per channel when requested.
    pub sigma_nl_hz: Vec<Option<f64>>,
}

/// Integrate one seed of a scenario.
pub fn simulate(sc: &Scenario, seed: u64) -> Result<Simulation, SweepError> {
    sc.validate()?;
    let timing = sc.timing()?;
    let cfg = sc.run_config()?;
    simulate_with(sc, &cfg, &timing, seed)
}

fn simulate_with(sc: &Scenario, cfg: &RunConfig, timing: &NodeTiming, seed: u64) -> Result<Simulation, SweepError> {
    let m = sc.channels.len();
    let split = sc.lengths.split();
    let len = split.total_len();
    let datasets = (0..m).map(|k| sc.dataset(k, seed)).collect::<Result<Vec<_>, _>>()?;
    let mut waveforms = Vec::with_capacity(m);
    let mut mod_index = Vec::with_capacity(m);
    let mut unit_power = Vec::with_capacity(m);
    for (k, ds) in datasets.iter().enumerate() {
        let pipe = |source| SweepError::Pipeline { seed, channel: k, source };
        let mask = build_mask(ds.kind, sc.mask_seed(k, seed), sc.n_nodes).map_err(pipe)?;
        let ch = &cfg.channels[k];
        let modulated = mask_bias_modulate(&ds.drive_sequence(), &mask, ch.bias, ch.avg_power_w, timing).map_err(pipe)?;
        mod_index.push(modulated.modulation_index);
        unit_power.push(ch.avg_power_w / modulated.mean_drive);
        waveforms.push(modulated.waveform);
    }

    let mut cfg = cfg.clone();
    cfg.record_stride = match sc.sampling {
        NodeSampling::SlotEnd => timing.steps_per_node,
        NodeSampling::SlotAverage => 1,
    };
    cfg.trace_stride = timing.steps_per_node;
    let at = |source| SweepError::Integration { at: format!("scenario `{}`, seed {seed}", sc.name), source };
    let mut integ = Integrator::new(&cfg).map_err(at)?;
    let record = integ.run(&waveforms).map_err(at)?;
    let pulsing = if sc.self_pulse.enabled {
        self_pulsing(&mut integ, &cfg, &sc.self_pulse, timing.steps_per_node).map_err(at)?
    } else {
        vec![false; m]
    };

    let mut states = Vec::with_capacity(m);
    let mut sigmas = Vec::with_capacity(m);
    for k in 0..m {
        let mut st: StateMatrix = detect_and_sample(&record, k, timing, len, sc.sampling)
            .map_err(|source| SweepError::Pipeline { seed, channel: k, source })?;
        if sc.feature_units == FeatureUnits::Drive {
            let inv = 1.0 / unit_power[k];
            st.data.iter_mut().for_each(|v| *v *= inv);
        }
        states.push(st);
        let sigma = if sc.detuning {
            let skip = split.warmup_len * sc.n_nodes;
            let idx = cfg.channels[k].channel_index;
            if idx < 0 {
                return Err(SweepError::Scenario("detuning statistics need nonnegative channel indices".into()));
            }
            let derived = crate::phys::derive_constants(&cfg.params, idx as usize + 1)
                .map_err(|e| SweepError::Scenario(e.to_string()))?;
            Some(capacity::nl_detuning_sigma(&record, &cfg.params, &derived, idx as usize, skip)?)
        } else {
            None
        };
        sigmas.push(sigma);
    }
    Ok(Simulation { seed, datasets, states, self_pulsing: pulsing, modulation_index: mod_index, sigma_nl_hz: sigmas })
}

fn run_seed(sc: &Scenario, cfg: &RunConfig, timing: &NodeTiming, seed: u64, with_capacity: bool) -> Result<SeedRun, SweepError> {
    let sim = simulate_with(sc, cfg, timing, seed)?;
    let split = sc.lengths.split();
    let train = split.train_range();
    let tests = split.test_ranges();
    let mut scores = Vec::with_capacity(sim.states.len());
    let mut caps = Vec::with_capacity(sim.states.len());
    for (k, (ds, states)) in sim.datasets.iter().zip(&sim.states).enumerate() {
        let targets = ds.aligned_targets();
        let model = train_ridge(states.rows_view(train.clone()), &targets[train.clone()], sc.lambda)?;
        let subsets = tests
            .iter()
            .map(|r| {
                let pred = predict(states.rows_view(r.clone()), &model)?;
                Ok(tasks::score(ds.kind, &pred, ds, r.clone(), sc.score)?)
            })
            .collect::<Result<Vec<f64>, SweepError>>()?;
        let cap = match (&sc.capacity, with_capacity) {
            (Some(ccfg), true) => Some(capacity_report(states, ds, &split, ccfg)?),
            _ => None,
        };
        scores.push(SeedScore {
            seed,
            subsets,
            self_pulsing: sim.self_pulsing[k],
            modulation_index: sim.modulation_index[k],
            sigma_nl_hz: sim.sigma_nl_hz[k],
        });
        caps.push(cap);
    }
    Ok(SeedRun { scores, capacity: caps })
}

/// Linear MC on the raw input plus IPC on the input mapped to `[-1, 1]`.
pub fn capacity_report(states: &StateMatrix, ds: &TaskDataset, split: &Split, cfg: &CapacityConfig) -> Result<CapacityReport, SweepError> {
    let (lo, hi) = match ds.kind {
        TaskKind::Narma10 => (0.0, 0.5),
        _ => ds.input_u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))),
    };
    let unit = capacity::rescale_to_unit(&ds.input_u, lo, hi);
    let mut report = capacity::total_ipc(states, &unit, split, cfg)?;
    let (raw, c_raw) = capacity::linear_mc(states, &ds.input_u, split, cfg.k_max, cfg.lambda)?;
    report.basis_note.push_str(&format!("; raw-input linear MC {c_raw:.6} over {} delays", raw.len()));
    Ok(report)
}

/// Every seed of a scenario, channels co-propagating in one integration.
pub fn run_experiment(sc: &Scenario) -> Result<ExperimentOutcome, SweepError> {
    sc.validate()?;
    let timing = sc.timing()?;
    let cfg = sc.run_config()?;
    let runs = sc
        .seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| run_seed(sc, &cfg, &timing, seed, i == 0))
        .collect::<Result<Vec<_>, _>>()?;

    let mut runs = runs;
    let channels = (0..sc.channels.len())
        .map(|k| {
            let per_seed: Vec<SeedScore> = runs.iter().map(|r| r.scores[k].clone()).collect();
            let values: Vec<f64> = per_seed.iter().map(|s| s.value()).collect();
            let (mean, std) = mean_std(&values);
            let sigmas: Vec<f64> = per_seed.iter().filter_map(|s| s.sigma_nl_hz).collect();
            ChannelOutcome {
                channel: k,
                task: sc.channels[k].task,
                metric: sc.channels[k].task.metric().to_string(),
                self_pulsing: per_seed.iter().any(|s| s.self_pulsing),
                sigma_nl_hz: (!sigmas.is_empty()).then(|| mean_std(&sigmas).0),
                capacity: runs[0].capacity[k].take(),
                per_seed,
                mean,
                std,
            }
        })
        .collect();
    Ok(ExperimentOutcome { scenario: sc.name.clone(), channels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisKind {
    /// Total input power `P_T`, split by the scenario's power rule.
    TotalPowerDbm,
    /// Power of one channel; switches the scenario to per-channel powers.
    ChannelPowerDbm,
    /// Detuning applied to every channel, or to `channel` when given.
    DetuningGhz,
    /// `Δφ / 2π`.
    DeltaPhi,
    /// Number of channels; channel 0's spec is replicated.
    Channels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub kind: AxisKind,
    #[serde(default)]
    pub channel: Option<usize>,
    pub values: Vec<f64>,
}

impl Axis {
    pub fn new(kind: AxisKind, values: Vec<f64>) -> Self {
        Self { kind, channel: None, values }
    }

    pub fn label(&self) -> String {
        let base = match self.kind {
            AxisKind::TotalPowerDbm => "total_power_dbm",
            AxisKind::ChannelPowerDbm => "power_dbm",
            AxisKind::DetuningGhz => "detuning_ghz",
            AxisKind::DeltaPhi => "delta_phi_over_2pi",
            AxisKind::Channels => "channels",
        };
        match self.channel {
            Some(c) => format!("ch{c}_{base}"),
            None => base.to_string(),
        }
    }

    fn apply(&self, sc: &mut Scenario, v: f64) -> Result<(), SweepError> {
        let target = |sc: &Scenario| -> Result<Vec<usize>, SweepError> {
            match self.channel {
                Some(c) if c < sc.channels.len() => Ok(vec![c]),
                Some(c) => Err(SweepError::Grid(format!("axis {} targets missing channel {c}", self.label()))),
                None => Ok((0..sc.channels.len()).collect()),
            }
        };
        match self.kind {
            AxisKind::TotalPowerDbm => sc.total_power_dbm = v,
            AxisKind::ChannelPowerDbm => {
                let ch = self.channel.ok_or_else(|| SweepError::Grid("channel power axis needs a channel".into()))?;
                if sc.power_rule == PowerRule::Equal {
                    let each = sc.total_power_dbm - 10.0 * (sc.channels.len() as f64).log10();
                    for c in &mut sc.channels {
                        c.power_dbm = Some(each);
                    }
                    sc.power_rule = PowerRule::PerChannel;
                }
                target(sc)?;
                sc.channels[ch].power_dbm = Some(v);
            }
            AxisKind::DetuningGhz => {
                for k in target(sc)? {
                    sc.channels[k].detuning_ghz = v;
                }
            }
            AxisKind::DeltaPhi => sc.feedback.delta_phi_rad = v * std::f64::consts::TAU,
            AxisKind::Channels => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(SweepError::Grid(format!("channel count {v} is not a positive integer")));
                }
                let proto = sc.channels[0].clone();
                sc.channels = (0..v as usize)
                    .map(|k| ChannelSpec { channel_index: Some(k as i32), ..proto.clone() })
                    .collect();
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub axes: Vec<Axis>,
}

pub const GRID_PRESETS: [&str; 3] = ["region-map", "delta-phi", "channel-scaling"];

impl SweepGrid {
    pub fn preset(name: &str) -> Result<Self, SweepError> {
        let lin = |a: f64, b: f64, n: usize| -> Vec<f64> { (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect() };
        let g = match name {
            "region-map" => SweepGrid {
                axes: vec![
                    Axis::new(AxisKind::TotalPowerDbm, lin(-20.0, 25.0, 9)),
                    Axis::new(AxisKind::DetuningGhz, lin(-100.0, 100.0, 9)),
                ],
            },
            "delta-phi" => SweepGrid {
                axes: vec![Axis::new(AxisKind::DeltaPhi, vec![0.0, 0.25, 1.0 / 3.0, 0.5, 2.0 / 3.0, 0.75])],
            },
            "channel-scaling" => SweepGrid { axes: vec![Axis::new(AxisKind::Channels, vec![1.0, 2.0, 4.0, 8.0])] },
            other => return Err(SweepError::UnknownPreset(other.to_string())),
        };
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        if self.axes.is_empty() {
            return Err(SweepError::Grid("a grid needs at least one axis".into()));
        }
        for a in &self.axes {
            if a.values.is_empty() {
                return Err(SweepError::Grid(format!("axis {} has no points", a.label())));
            }
            if a.values.iter().any(|v| !v.is_finite()) {
                return Err(SweepError::Grid(format!("axis {} has a non-finite value", a.label())));
            }
        }
        Ok(())
    }

    /// Grid coordinates in lexicographic order, first axis slowest.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![]];
        for a in &self.axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    a.values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }

    pub fn scenario_at(&self, base: &Scenario, point: &[f64]) -> Result<Scenario, SweepError> {
        let mut sc = base.clone();
        for (a, &v) in self.axes.iter().zip(point) {
            a.apply(&mut sc, v)?;
        }
        Ok(sc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub coords: Vec<f64>,
    pub channel: usize,
    pub task: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub self_pulsing: bool,
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis_labels: Vec<String>,
    pub rows: Vec<SweepRow>,
}

fn rows_for(point: &[f64], sc: &Scenario, out: Result<ExperimentOutcome, SweepError>) -> Vec<SweepRow> {
    match out {
        Ok(o) => o
            .channels
            .iter()
            .flat_map(|c| {
                let mut rows = vec![SweepRow {
                    coords: point.to_vec(),
                    channel: c.channel,
                    task: c.task.to_string(),
                    metric: c.metric.clone(),
                    mean: c.mean,
                    std: c.std,
                    self_pulsing: c.self_pulsing,
                    status: "ok".into(),
                }];
                if sc.detuning {
                    let s: Vec<f64> = c.per_seed.iter().filter_map(|s| s.sigma_nl_hz).collect();
                    let (mean, std) = mean_std(&s);
                    rows.push(SweepRow { metric: "sigma_nl_hz".into(), mean, std, ..rows[0].clone() });
                }
                rows
            })
            .collect(),
        Err(e) => {
            log::warn!("grid point {point:?} failed: {e}");
            sc.channels
                .iter()
                .enumerate()
                .map(|(k, c)| SweepRow {
                    coords: point.to_vec(),
                    channel: k,
                    task: c.task.to_string(),
                    metric: c.task.metric().to_string(),
                    mean: f64::NAN,
                    std: f64::NAN,
                    self_pulsing: false,
                    status: format!("error: {e}"),
                })
                .collect()
        }
    }
}

/// Run every grid point. Row order is lexicographic in the grid and does
/// not depend on `workers`.
pub fn grid_sweep(grid: &SweepGrid, base: &Scenario, workers: usize) -> Result<SweepResult, SweepError> {
    grid.validate()?;
    base.validate()?;
    let points = grid.points();
    let scenarios = points.iter().map(|p| grid.scenario_at(base, p)).collect::<Result<Vec<_>, _>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SweepError::Pool(e.to_string()))?;
    let per_point: Vec<Vec<SweepRow>> = pool.install(|| {
        points
            .par_iter()
            .zip(&scenarios)
            .map(|(p, sc)| rows_for(p, sc, run_experiment(sc)))
            .collect()
    });
    Ok(SweepResult {
        axis_labels: grid.axes.iter().map(|a| a.label()).collect(),
        rows: per_point.into_iter().flatten().collect(),
    })
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() { "nan".into() } else { format!("{v}") }
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SweepError> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = self.axis_labels.clone();
        header.extend(["channel", "task", "metric", "mean", "std", "self_pulsing", "status"].map(String::from));
        wtr.write_record(&header).map_err(csv_io)?;
        for r in &self.rows {
            let mut rec: Vec<String> = r.coords.iter().map(|v| fmt_f64(*v)).collect();
            rec.push(r.channel.to_string());
            rec.push(r.task.clone());
            rec.push(r.metric.clone());
            rec.push(fmt_f64(r.mean));
            rec.push(fmt_f64(r.std));
            rec.push(r.self_pulsing.to_string());
            rec.push(r.status.clone());
            wtr.write_record(&rec).map_err(csv_io)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Rows of one channel and metric, in grid order.
    pub fn channel_map(&self, channel: usize, metric: &str) -> Vec<MapPoint> {
        self.rows
            .iter()
            .filter(|r| r.channel == channel && r.metric == metric)
            .map(|r| MapPoint { coords: r.coords.clone(), value: r.mean })
            .collect()
    }

    pub fn n_channels(&self) -> usize {
        self.rows.iter().map(|r| r.channel + 1).max().unwrap_or(0)
    }
}

fn csv_io(e: csv::Error) -> SweepError {
    SweepError::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub coords: Vec<f64>,
    pub value: f64,
}

/// `|a - b|` point by point over identical grids.
pub fn channel_difference(a: &[MapPoint], b: &[MapPoint]) -> Result<Vec<MapPoint>, SweepError> {
    if a.len() != b.len() {
        return Err(SweepError::MapMismatch(format!("{} vs {} points", a.len(), b.len())));
    }
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            if p.coords != q.coords {
                return Err(SweepError::MapMismatch(format!("coordinates {:?} vs {:?}", p.coords, q.coords)));
            }
            Ok(MapPoint { coords: p.coords.clone(), value: (p.value - q.value).abs() })
        })
        .collect()
}

/// `|metric(ch0) - metric(ch_k)|` maps for every `k > 0`.
pub fn channel_differences(result: &SweepResult, metric: &str) -> Result<Vec<Vec<MapPoint>>, SweepError> {
    let ch0 = result.channel_map(0, metric);
    (1..result.n_channels())
        .map(|k| channel_difference(&ch0, &result.channel_map(k, metric)))
        .collect()
}

impl fmt::Display for ChannelOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ch{} {:<6} {} = {:.6} ± {:.6}", self.channel, self.task.name(), self.metric, self.mean, self.std)?;
        if self.self_pulsing {
            write!(f, " [self-pulsing]")?;
        }
        if let Some(s) = self.sigma_nl_hz {
            write!(f, " sigma_nl = {:.4e} Hz", s)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny(task: TaskKind) -> Scenario {
        Scenario {
            name: "tiny".into(),
            channels: vec![ChannelSpec::new(task, 30.0)],
            lengths: Lengths { warmup: 20, train: 120, test: vec![60] },
            seeds: vec![1, 2],
            self_pulse: SelfPulseConfig { enabled: false, ..SelfPulseConfig::default() },
            ..Scenario::default()
        }
    }

    #[test]
    fn equal_power_rule_sums_to_total() {
        for m in 1..9 {
            let sc = Scenario { channels: vec![ChannelSpec::new(TaskKind::Narma10, 0.0); m], total_power_dbm: 3.3, ..Scenario::default() };
            let sum: f64 = sc.channel_powers_w().iter().sum();
            assert_relative_eq!(sum, dbm_to_watts(3.3), max_relative = 1e-15);
        }
    }

    #[test]
    fn presets_validate() {
        for p in SCENARIO_PRESETS {
            Scenario::preset(p).unwrap().validate().unwrap();
        }
        for p in GRID_PRESETS {
            SweepGrid::preset(p).unwrap().validate().unwrap();
        }
        let wdm = Scenario::preset("narma-wdm4").unwrap();
        assert_relative_eq!(crate::phys::watts_to_dbm(wdm.channel_powers_w()[0]), -1.02, epsilon = 1e-12);
        assert!(Scenario::preset("nope").is_err());
    }

    #[test]
    fn grid_points_are_lexicographic() {
        let g = SweepGrid { axes: vec![Axis::new(AxisKind::TotalPowerDbm, vec![1.0, 2.0]), Axis::new(AxisKind::DetuningGhz, vec![5.0, 6.0, 7.0])] };
        let p = g.points();
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], vec![1.0, 5.0]);
        assert_eq!(p[1], vec![1.0, 6.0]);
        assert_eq!(p[3], vec![2.0, 5.0]);
        assert!(SweepGrid { axes: vec![] }.validate().is_err());
        assert!(SweepGrid { axes: vec![Axis::new(AxisKind::DeltaPhi, vec![])] }.validate().is_err());
    }

    #[test]
    fn axis_application() {
        let base = Scenario::default();
        let g = SweepGrid { axes: vec![Axis::new(AxisKind::Channels, vec![3.0]), Axis::new(AxisKind::DeltaPhi, vec![0.5])] };
        let sc = g.scenario_at(&base, &[3.0, 0.5]).unwrap();
        assert_eq!(sc.channels.len(), 3);
        assert_eq!(sc.channels[2].channel_index, Some(2));
        assert_relative_eq!(sc.feedback.delta_phi_rad, std::f64::consts::PI);
        let g = SweepGrid { axes: vec![Axis { kind: AxisKind::ChannelPowerDbm, channel: Some(0), values: vec![2.0] }] };
        let sc = g.scenario_at(&base, &[2.0]).unwrap();
        assert_eq!(sc.power_rule, PowerRule::PerChannel);
        assert_eq!(sc.channels[0].power_dbm, Some(2.0));
    }

    #[test]
    fn identical_channels_share_data_and_masks() {
        let mut sc = Scenario::preset("narma-wdm4").unwrap();
        sc.lengths = Lengths { warmup: 10, train: 30, test: vec![20] };
        assert_eq!(sc.dataset(0, 3).unwrap(), sc.dataset(3, 3).unwrap());
        assert_eq!(sc.mask_seed(0, 3), sc.mask_seed(2, 3));
        sc.identical_channels = false;
        assert_ne!(sc.dataset(0, 3).unwrap().input_u, sc.dataset(1, 3).unwrap().input_u);
    }

    #[test]
    fn swc_datasets_cover_non_multiple_lengths() {
        let sc = tiny(TaskKind::Swc);
        let d = sc.dataset(0, 0).unwrap();
        assert_eq!(d.len(), sc.lengths.split().total_len());
    }

    #[test]
    fn single_point_grid_equals_run_experiment() {
        let sc = tiny(TaskKind::Narma10);
        let out = run_experiment(&sc).unwrap();
        let g = SweepGrid { axes: vec![Axis::new(AxisKind::TotalPowerDbm, vec![sc.total_power_dbm])] };
        let res = grid_sweep(&g, &sc, 1).unwrap();
        assert_eq!(res.rows.len(), 1);
        assert_eq!(res.rows[0].mean, out.channels[0].mean);
        assert_eq!(res.rows[0].std, out.channels[0].std);
    }

    #[test]
    fn single_seed_has_zero_std() {
        assert_eq!(mean_std(&[0.3]), (0.3, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_relative_eq!(s, 1.0);
    }

    #[test]
    fn failing_points_become_error_rows() {
        let mut sc = tiny(TaskKind::ChannelEq);
        sc.channels[0].bias = Some(1.0);
        let g = SweepGrid { axes: vec![Axis::new(AxisKind::TotalPowerDbm, vec![-5.0, 0.0])] };
        let res = grid_sweep(&g, &sc, 1).unwrap();
        assert_eq!(res.rows.len(), 2);
        assert!(res.rows.iter().all(|r| r.status.starts_with("error") && r.mean.is_nan()));
    }

    #[test]
    fn differences() {
        let a = vec![MapPoint { coords: vec![0.0], value: 0.03 }];
        let b = vec![MapPoint { coords: vec![0.0], value: 0.05 }];
        assert_relative_eq!(channel_difference(&a, &b).unwrap()[0].value, 0.02, max_relative = 1e-12);
        assert_eq!(channel_difference(&a, &a).unwrap()[0].value, 0.0);
        let c = vec![MapPoint { coords: vec![1.0], value: 0.05 }];
        assert!(channel_difference(&a, &c).is_err());
    }
}
