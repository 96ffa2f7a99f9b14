//! Input encoding (mask, bias, power scaling, sample-and-hold) and output
//! detection (square-law photodetection, one sample per virtual node).

use crate::readout::Rows;
use crate::tasks::{Split, TaskKind};
use crate::tcmt::{DropRecord, InputWaveform};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("timing: {0}")]
    Timing(String),
    #[error("nonpositive drive X = {value} at symbol {symbol}, node {node}: bias too small")]
    NonPositiveDrive { symbol: usize, node: usize, value: f64 },
    #[error("record too short: need {required} samples, have {available}")]
    RecordTooShort { required: usize, available: usize },
    #[error("record stride {stride} does not divide the {steps_per_node} solver steps of a node")]
    Stride { stride: usize, steps_per_node: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-wavelength settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Resonance order relative to the reference resonance; may be negative.
    pub channel_index: i32,
    pub detuning_rad_per_s: f64,
    pub avg_power_w: f64,
    pub bias: f64,
    pub mask_seed: u64,
    /// Index of the task dataset driving this channel.
    pub task_binding: usize,
}

impl ChannelConfig {
    pub fn new(channel_index: i32, detuning_rad_per_s: f64, avg_power_w: f64) -> Self {
        Self {
            channel_index,
            detuning_rad_per_s,
            avg_power_w,
            bias: 8.0,
            mask_seed: 0,
            task_binding: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub values: Vec<f64>,
    pub interval: (f64, f64),
    pub seed: u64,
}

/// Mask interval used by each task.
pub fn mask_interval(kind: TaskKind) -> (f64, f64) {
    match kind {
        TaskKind::ChannelEq => (-1.0, 1.0),
        TaskKind::Narma10 | TaskKind::Swc | TaskKind::Radar => (0.0, 1.0),
    }
}

/// i.i.d. uniform mask. The underlying uniform stream depends only on the
/// seed; the task picks the interval it is mapped to.
pub fn build_mask(kind: TaskKind, seed: u64, n_nodes: usize) -> Result<Mask, PipelineError> {
    if n_nodes == 0 {
        return Err(PipelineError::Invalid("mask needs at least one node".into()));
    }
    let interval = mask_interval(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n_nodes)
        .map(|_| interval.0 + (interval.1 - interval.0) * rng.gen::<f64>())
        .collect();
    Ok(Mask { values, interval, seed })
}

/// Virtual-node timing on the solver grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeTiming {
    pub n_nodes: usize,
    pub symbol_rate_bd: f64,
    pub theta_s: f64,
    pub steps_per_node: usize,
}

impl NodeTiming {
    pub fn new(n_nodes: usize, symbol_rate_bd: f64, solver_step_s: f64) -> Result<Self, PipelineError> {
        if n_nodes == 0 || !(symbol_rate_bd > 0.0) || !(solver_step_s > 0.0) {
            return Err(PipelineError::Timing("nodes, rate and step must be positive".into()));
        }
        let theta_s = 1.0 / (symbol_rate_bd * n_nodes as f64);
        let ratio = theta_s / solver_step_s;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-6 * ratio.max(1.0) {
            return Err(PipelineError::Timing(format!(
                "solver step {solver_step_s} s does not divide the node duration {theta_s} s"
            )));
        }
        Ok(Self {
            n_nodes,
            symbol_rate_bd,
            theta_s,
            steps_per_node: steps as usize,
        })
    }

    pub fn steps_per_symbol(&self) -> usize {
        self.n_nodes * self.steps_per_node
    }
}

/// Drive waveform plus its diagnostics.
#[derive(Debug, Clone)]
pub struct ModulatedInput {
    pub waveform: InputWaveform,
    pub mean_drive: f64,
    pub modulation_index: f64,
}

/// `X = u m + bias` per node, held for a node slot, scaled so the mean of
/// `|E_in|^2` equals `avg_power_w`: `E_in = sqrt(P X / <X>)`.
pub fn mask_bias_modulate(
    u: &[f64],
    mask: &Mask,
    bias: f64,
    avg_power_w: f64,
    timing: &NodeTiming,
) -> Result<ModulatedInput, PipelineError> {
    let n = timing.n_nodes;
    if mask.values.len() != n {
        return Err(PipelineError::Invalid(format!("mask has {} values, timing has {n} nodes", mask.values.len())));
    }
    if !(avg_power_w > 0.0) {
        return Err(PipelineError::Invalid("average power must be positive".into()));
    }
    if u.is_empty() {
        return Err(PipelineError::Invalid("empty symbol sequence".into()));
    }
    let mut x = Vec::with_capacity(u.len() * n);
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for (s, &un) in u.iter().enumerate() {
        for (j, &mj) in mask.values.iter().enumerate() {
            let v = un * mj + bias;
            if !(v > 0.0) {
                return Err(PipelineError::NonPositiveDrive { symbol: s, node: j, value: v });
            }
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
            x.push(v);
        }
    }
    let mean = sum / x.len() as f64;
    let modulation_index = (hi - lo) / (2.0 * mean);
    if modulation_index > 0.02 {
        log::warn!("modulation index {:.2}% exceeds 2%", modulation_index * 100.0);
    }
    let scale = avg_power_w / mean;
    let samples = x.iter().map(|v| Complex64::new((scale * v).sqrt(), 0.0)).collect();
    Ok(ModulatedInput {
        waveform: InputWaveform {
            samples,
            hold: timing.steps_per_node,
        },
        mean_drive: mean,
        modulation_index,
    })
}

/// How a node value is read from the detected power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeSampling {
    #[default]
    SlotEnd,
    SlotAverage,
}

/// L×N detected node powers for one channel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub split: Option<Split>,
}

impl StateMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "state matrix shape mismatch");
        Self { rows, cols, data, split: None }
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.cols..(n + 1) * self.cols]
    }

    pub fn rows_view(&self, range: Range<usize>) -> Rows<'_> {
        Rows::new(&self.data[range.start * self.cols..range.end * self.cols], self.cols)
    }

    pub fn all(&self) -> Rows<'_> {
        Rows::new(&self.data, self.cols)
    }

    /// CSV with one row per symbol; `#` header lines carry provenance.
    pub fn write_csv<W: Write>(&self, mut w: W, header: &[(&str, String)]) -> Result<(), PipelineError> {
        for (k, v) in header {
            writeln!(w, "# {k}={v}")?;
        }
        let cols: Vec<String> = (0..self.cols).map(|j| format!("node_{j}")).collect();
        writeln!(w, "row,{}", cols.join(","))?;
        for n in 0..self.rows {
            let vals: Vec<String> = self.row(n).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{n},{}", vals.join(","))?;
        }
        Ok(())
    }
}

impl Mask {
    pub fn write_csv<W: Write>(&self, mut w: W, timing: &NodeTiming) -> Result<(), PipelineError> {
        writeln!(w, "# seed={}", self.seed)?;
        writeln!(w, "# interval={},{}", self.interval.0, self.interval.1)?;
        writeln!(w, "# n_nodes={} theta_s={}", timing.n_nodes, timing.theta_s)?;
        writeln!(w, "node,mask")?;
        for (j, v) in self.values.iter().enumerate() {
            writeln!(w, "{j},{v}")?;
        }
        Ok(())
    }
}

/// Square-law detection of one channel, one value per virtual node.
pub fn detect_and_sample(
    record: &DropRecord,
    channel: usize,
    timing: &NodeTiming,
    symbols: usize,
    sampling: NodeSampling,
) -> Result<StateMatrix, PipelineError> {
    let spn = timing.steps_per_node;
    if spn % record.stride != 0 {
        return Err(PipelineError::Stride {
            stride: record.stride,
            steps_per_node: spn,
        });
    }
    if channel >= record.n_channels() {
        return Err(PipelineError::Invalid(format!("no channel {channel} in record")));
    }
    let per_node = spn / record.stride;
    let n = timing.n_nodes;
    let required = symbols * n * per_node;
    let available = record.n_samples();
    if available < required {
        return Err(PipelineError::RecordTooShort { required, available });
    }
    let drop = &record.drop[channel];
    let mut data = Vec::with_capacity(symbols * n);
    for slot in 0..symbols * n {
        let v = match sampling {
            NodeSampling::SlotEnd => drop[(slot + 1) * per_node - 1].norm_sqr(),
            NodeSampling::SlotAverage => {
                let s = &drop[slot * per_node..(slot + 1) * per_node];
                s.iter().map(|e| e.norm_sqr()).sum::<f64>() / per_node as f64
            }
        };
        data.push(v);
    }
    Ok(StateMatrix::new(symbols, n, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn timing() -> NodeTiming {
        NodeTiming::new(50, 1e9, 2e-12).unwrap()
    }

    #[test]
    fn timing_integrality() {
        let t = timing();
        assert_eq!(t.steps_per_node, 10);
        assert_relative_eq!(t.theta_s * 50.0, 1e-9, max_relative = 1e-15);
        assert!(NodeTiming::new(50, 1e9, 3e-12).is_err());
        assert_eq!(NodeTiming::new(50, 1e9, 1e-12).unwrap().steps_per_node, 20);
    }

    #[test]
    fn masks_are_reproducible_and_in_range() {
        let a = build_mask(TaskKind::Narma10, 7, 50).unwrap();
        let b = build_mask(TaskKind::Narma10, 7, 50).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let c = build_mask(TaskKind::ChannelEq, 7, 50).unwrap();
        assert!(c.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(c.values.iter().any(|v| *v < 0.0));
        // same uniform stream, remapped
        for (x, y) in a.values.iter().zip(&c.values) {
            assert_relative_eq!(2.0 * x - 1.0, *y, max_relative = 1e-12, epsilon = 1e-15);
        }
        assert!(build_mask(TaskKind::Narma10, 7, 0).is_err());
    }

    #[test]
    fn zero_modulation_limit() {
        let mask = build_mask(TaskKind::Narma10, 3, 50).unwrap();
        let p = crate::phys::dbm_to_watts(-5.0);
        let m = mask_bias_modulate(&[0.0; 20], &mask, 8.0, p, &timing()).unwrap();
        for s in &m.waveform.samples {
            assert_relative_eq!(s.norm_sqr(), p, max_relative = 1e-14);
        }
        assert_eq!(m.modulation_index, 0.0);
        assert_eq!(m.waveform.len(), 20 * 500);
    }

    #[test]
    fn narma_modulation_index_bounded() {
        let mask = build_mask(TaskKind::Narma10, 3, 50).unwrap();
        let d = crate::tasks::gen_narma10(11, 500).unwrap();
        let m = mask_bias_modulate(&d.input_u, &mask, 8.0, 1e-3, &timing()).unwrap();
        assert!(m.modulation_index <= 0.5 / 16.0 + 1e-12);
        assert!(m.modulation_index > 0.0);
    }

    #[test]
    fn nonpositive_drive_is_rejected() {
        let mask = build_mask(TaskKind::ChannelEq, 3, 50).unwrap();
        let err = mask_bias_modulate(&[20.0, 20.0], &mask, 5.0, 1e-3, &timing()).unwrap_err();
        assert!(matches!(err, PipelineError::NonPositiveDrive { symbol: 0, .. }));
    }

    fn record_with(values: Vec<Complex64>, stride: usize) -> DropRecord {
        DropRecord {
            drop: vec![values],
            stride,
            delta_n_m3: vec![],
            delta_t_k: vec![],
            trace_stride: 1,
            step_s: 2e-12,
            start_step: 0,
        }
    }

    #[test]
    fn slot_end_sampling() {
        let t = timing();
        let mut v = vec![Complex64::new(1.0, 0.0); 2 * 500];
        v[9] = Complex64::new(3.0, 4.0);
        let sm = detect_and_sample(&record_with(v.clone(), 1), 0, &t, 2, NodeSampling::SlotEnd).unwrap();
        assert_eq!((sm.rows, sm.cols), (2, 50));
        assert_eq!(sm.row(0)[0], 25.0);
        assert_eq!(sm.row(0)[1], 1.0);
        let strided: Vec<_> = v.iter().skip(4).step_by(5).cloned().collect();
        let sm2 = detect_and_sample(&record_with(strided, 5), 0, &t, 2, NodeSampling::SlotEnd).unwrap();
        assert_eq!(sm, sm2);
        let avg = detect_and_sample(&record_with(v, 1), 0, &t, 2, NodeSampling::SlotAverage).unwrap();
        assert_relative_eq!(avg.row(0)[0], (9.0 + 25.0) / 10.0);
    }

    #[test]
    fn short_record_errors() {
        let t = timing();
        let err = detect_and_sample(&record_with(vec![Complex64::new(1.0, 0.0); 400], 1), 0, &t, 1, NodeSampling::SlotEnd)
            .unwrap_err();
        assert!(matches!(err, PipelineError::RecordTooShort { required: 500, available: 400 }));
        let err = detect_and_sample(&record_with(vec![Complex64::new(1.0, 0.0); 400], 3), 0, &t, 1, NodeSampling::SlotEnd)
            .unwrap_err();
        assert!(matches!(err, PipelineError::Stride { .. }));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn power_normalisation(seed in 0u64..1000, p_dbm in -20.0f64..25.0, bias in 1.0f64..20.0, len in 1usize..60) {
                let mask = build_mask(TaskKind::Narma10, seed, 50).unwrap();
                let d = crate::tasks::gen_narma10(seed, len.max(10)).unwrap();
                let p = crate::phys::dbm_to_watts(p_dbm);
                let m = mask_bias_modulate(&d.input_u, &mask, bias, p, &timing()).unwrap();
                let mean = m.waveform.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / m.waveform.samples.len() as f64;
                prop_assert!((mean / p - 1.0).abs() < 1e-12);
            }

            #[test]
            fn detector_scales_quadratically(k in 0.1f64..10.0, seed in 0u64..100) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v: Vec<Complex64> = (0..500).map(|_| Complex64::new(rand::Rng::gen(&mut rng), rand::Rng::gen(&mut rng))).collect();
                let t = timing();
                let a = detect_and_sample(&record_with(v.clone(), 1), 0, &t, 1, NodeSampling::SlotEnd).unwrap();
                let b = detect_and_sample(&record_with(v.iter().map(|e| e * k).collect(), 1), 0, &t, 1, NodeSampling::SlotEnd).unwrap();
                for (x, y) in a.data.iter().zip(&b.data) {
                    prop_assert!((y - k * k * x).abs() <= 1e-12 * y.abs().max(1e-300));
                }
            }
        }
    }
}
