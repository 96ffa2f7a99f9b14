//! Benchmark task generators and their scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task kind `{0}` (expected narma10, swc, cheq or radar)")]
    UnknownKind(String),
    #[error("invalid length {len}: {reason}")]
    Length { len: usize, reason: &'static str },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("target variance is zero over the scored segment; NMSE undefined")]
    ZeroVariance,
    #[error("prediction/target mismatch: {0}")]
    Mismatch(String),
    #[error("NARMA-10 diverged for every derived seed of {0}")]
    NarmaDiverged(u64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "narma10")]
    Narma10,
    #[serde(rename = "swc")]
    Swc,
    #[serde(rename = "cheq")]
    ChannelEq,
    #[serde(rename = "radar")]
    Radar,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Narma10 => "narma10",
            TaskKind::Swc => "swc",
            TaskKind::ChannelEq => "cheq",
            TaskKind::Radar => "radar",
        }
    }

    pub fn metric(&self) -> &'static str {
        match self {
            TaskKind::Narma10 | TaskKind::Radar => "nmse",
            TaskKind::Swc => "accuracy",
            TaskKind::ChannelEq => "ser",
        }
    }

    /// Whether smaller metric values are better.
    pub fn lower_is_better(&self) -> bool {
        !matches!(self, TaskKind::Swc)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "narma10" | "narma-10" | "narma" => Ok(TaskKind::Narma10),
            "swc" => Ok(TaskKind::Swc),
            "cheq" | "channel-eq" | "channel_equalization" => Ok(TaskKind::ChannelEq),
            "radar" | "ipix" => Ok(TaskKind::Radar),
            other => Err(TaskError::UnknownKind(other.to_string())),
        }
    }
}

/// SplitMix64 finaliser; used to derive reproducible child seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(base), |acc, &p| mix64(acc ^ mix64(p)))
}

/// Row layout: `warmup, train, (warmup, test)*`. Warm-up rows are never
/// fitted or scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub warmup_len: usize,
    pub train_len: usize,
    pub test_lens: Vec<usize>,
}

impl Split {
    pub fn new(warmup_len: usize, train_len: usize, test_lens: Vec<usize>) -> Self {
        Self { warmup_len, train_len, test_lens }
    }

    /// Whole sequence used for training, nothing held out.
    pub fn train_only(len: usize) -> Self {
        Self::new(0, len, vec![])
    }

    pub fn total_len(&self) -> usize {
        self.warmup_len * (1 + self.test_lens.len()) + self.train_len + self.test_lens.iter().sum::<usize>()
    }

    pub fn train_range(&self) -> Range<usize> {
        self.warmup_len..self.warmup_len + self.train_len
    }

    pub fn test_ranges(&self) -> Vec<Range<usize>> {
        let mut start = self.warmup_len + self.train_len;
        self.test_lens
            .iter()
            .map(|&l| {
                let r = start + self.warmup_len..start + self.warmup_len + l;
                start = r.end;
                r
            })
            .collect()
    }

    pub fn warmup_ranges(&self) -> Vec<Range<usize>> {
        let mut out = vec![0..self.warmup_len];
        let mut start = self.warmup_len + self.train_len;
        for &l in &self.test_lens {
            out.push(start..start + self.warmup_len);
            start += self.warmup_len + l;
        }
        out
    }
}

/// One task instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub kind: TaskKind,
    /// Symbol sequence fed to the reservoir (before `pre_mask_bias`).
    pub input_u: Vec<f64>,
    /// Scoring target; row `n` is scored against `target_y[n - target_shift]`.
    pub target_y: Vec<f64>,
    pub pre_mask_bias: f64,
    pub target_shift: usize,
    pub split: Split,
    pub seeds: Vec<u64>,
    /// Free-form notes, e.g. regenerated NARMA seeds.
    pub notes: Vec<String>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.input_u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_u.is_empty()
    }

    /// Input as presented to the mask: `u + pre_mask_bias`.
    pub fn drive_sequence(&self) -> Vec<f64> {
        self.input_u.iter().map(|u| u + self.pre_mask_bias).collect()
    }

    /// Target per row after the alignment shift; `NaN` where undefined.
    pub fn aligned_targets(&self) -> Vec<f64> {
        (0..self.len())
            .map(|n| {
                n.checked_sub(self.target_shift)
                    .and_then(|k| self.target_y.get(k).copied())
                    .unwrap_or(f64::NAN)
            })
            .collect()
    }

    pub fn with_split(mut self, split: Split) -> Result<Self, TaskError> {
        if split.total_len() != self.len() {
            return Err(TaskError::Length {
                len: self.len(),
                reason: "split does not cover the dataset exactly",
            });
        }
        self.split = split;
        Ok(self)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), TaskError> {
        writeln!(w, "# task={} seeds={:?} pre_mask_bias={} target_shift={}", self.kind, self.seeds, self.pre_mask_bias, self.target_shift)?;
        for note in &self.notes {
            writeln!(w, "# note={note}")?;
        }
        writeln!(w, "n,u,y")?;
        for (n, (u, y)) in self.input_u.iter().zip(&self.target_y).enumerate() {
            writeln!(w, "{n},{u},{y}")?;
        }
        Ok(())
    }
}

fn dataset(kind: TaskKind, input_u: Vec<f64>, target_y: Vec<f64>, seed: u64) -> TaskDataset {
    let len = input_u.len();
    TaskDataset {
        kind,
        input_u,
        target_y,
        pre_mask_bias: 0.0,
        target_shift: 0,
        split: Split::train_only(len),
        seeds: vec![seed],
        notes: vec![],
    }
}

// Accepted series stay inside |y| < 1; a diverging run blows past this long
// before it reaches 10.
const NARMA_GUARD: f64 = 1.0;
const NARMA_RETRIES: u64 = 64;

/// NARMA-10 output for a given input, zero initial history. Returns
/// `y(0..=len)` with `y(0) = 0`.
pub fn narma10_series(u: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; u.len() + 1];
    for n in 0..u.len() {
        let window: f64 = (0..10).filter_map(|i| n.checked_sub(i)).map(|k| y[k]).sum();
        let u_lag = n.checked_sub(9).map_or(0.0, |k| u[k]);
        y[n + 1] = 0.3 * y[n] + 0.05 * y[n] * window + 1.5 * u_lag * u[n] + 0.1;
    }
    y
}

/// One-step-ahead NARMA-10: row `n` (input `u(n)`) targets `y(n+1)`.
pub fn gen_narma10(seed: u64, length: usize) -> Result<TaskDataset, TaskError> {
    if length < 10 {
        return Err(TaskError::Length { len: length, reason: "NARMA-10 needs at least 10 symbols" });
    }
    let mut notes = vec![];
    for attempt in 0..NARMA_RETRIES {
        let s = if attempt == 0 { seed } else { derive_seed(seed, &[attempt]) };
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let u: Vec<f64> = (0..length).map(|_| 0.5 * rng.gen::<f64>()).collect();
        let y = narma10_series(&u);
        if y.iter().all(|v| v.abs() < NARMA_GUARD) {
            let mut d = dataset(TaskKind::Narma10, u, y[1..].to_vec(), s);
            d.notes = notes;
            return Ok(d);
        }
        notes.push(format!("seed {s} diverged, regenerated"));
        log::warn!("NARMA-10 seed {s} diverged; regenerating");
    }
    Err(TaskError::NarmaDiverged(seed))
}

pub const SWC_PERIOD: usize = 12;

pub fn swc_period(square: bool) -> [f64; SWC_PERIOD] {
    let mut p = [0.0; SWC_PERIOD];
    for (k, v) in p.iter_mut().enumerate() {
        *v = if square {
            if k < SWC_PERIOD / 2 { 1.0 } else { -1.0 }
        } else {
            (2.0 * std::f64::consts::PI * k as f64 / SWC_PERIOD as f64).sin()
        };
    }
    p
}

/// Random concatenation of sine (target 0) and square (target 1) periods.
pub fn gen_swc(seed: u64, length: usize) -> Result<TaskDataset, TaskError> {
    if length == 0 || length % SWC_PERIOD != 0 {
        return Err(TaskError::Length { len: length, reason: "SWC length must be a positive multiple of 12" });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = Vec::with_capacity(length);
    let mut y = Vec::with_capacity(length);
    for _ in 0..length / SWC_PERIOD {
        let square = rng.gen::<bool>();
        u.extend_from_slice(&swc_period(square));
        y.extend(std::iter::repeat(if square { 1.0 } else { 0.0 }).take(SWC_PERIOD));
    }
    Ok(dataset(TaskKind::Swc, u, y, seed))
}

/// Multipath taps for offsets -2..=7 (d(n+2) first).
pub const CHEQ_TAPS: [f64; 10] = [0.08, -0.12, 1.0, 0.18, -0.1, 0.091, -0.05, 0.04, 0.03, 0.01];
pub const CHEQ_SYMBOLS: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];
pub const CHEQ_PRE_MASK_BIAS: f64 = 20.0;
pub const CHEQ_TARGET_SHIFT: usize = 2;
/// Symbols excluded from scoring at each end of the sequence.
pub const CHEQ_EDGE: usize = 10;

/// Linear multipath channel with zero padding outside the sequence.
pub fn cheq_channel(d: &[f64]) -> Vec<f64> {
    let len = d.len() as isize;
    (0..len)
        .map(|n| {
            CHEQ_TAPS
                .iter()
                .enumerate()
                .map(|(i, tap)| {
                    let k = n + 2 - i as isize;
                    if (0..len).contains(&k) { tap * d[k as usize] } else { 0.0 }
                })
                .sum()
        })
        .collect()
}

pub fn cheq_distort(q: f64) -> f64 {
    q + 0.036 * q * q - 0.011 * q * q * q
}

/// Nonlinear channel equalisation. `snr_db = None` disables the noise.
pub fn gen_cheq(seed: u64, length: usize, snr_db: Option<f64>) -> Result<TaskDataset, TaskError> {
    if length < CHEQ_TAPS.len() {
        return Err(TaskError::Length { len: length, reason: "channel equalisation needs at least 10 symbols" });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d: Vec<f64> = (0..length).map(|_| CHEQ_SYMBOLS[rng.gen_range(0..4)]).collect();
    let clean: Vec<f64> = cheq_channel(&d).into_iter().map(cheq_distort).collect();
    let u = match snr_db {
        Some(snr) if snr.is_finite() => {
            let mean = clean.iter().sum::<f64>() / length as f64;
            let var = clean.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / length as f64;
            let sigma = (var / 10f64.powf(snr / 10.0)).sqrt();
            let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6e6f697365]));
            clean
                .iter()
                .map(|v| {
                    let g: f64 = StandardNormal.sample(&mut noise_rng);
                    v + sigma * g
                })
                .collect()
        }
        _ => clean,
    };
    let mut ds = dataset(TaskKind::ChannelEq, u, d, seed);
    ds.pre_mask_bias = CHEQ_PRE_MASK_BIAS;
    ds.target_shift = CHEQ_TARGET_SHIFT;
    Ok(ds)
}

/// Interleave (I, Q) pairs into one stream.
pub fn flatten_iq(iq: &[(f64, f64)]) -> Vec<f64> {
    iq.iter().flat_map(|&(i, q)| [i, q]).collect()
}

/// K-step prediction on the flattened stream: target is `2K` positions ahead.
/// The stream is scaled to unit peak magnitude (NMSE is scale invariant).
pub fn radar_dataset(iq: &[(f64, f64)], k_steps: usize, seed: u64) -> Result<TaskDataset, TaskError> {
    if k_steps == 0 {
        return Err(TaskError::Length { len: 0, reason: "prediction horizon must be at least one step" });
    }
    let flat = flatten_iq(iq);
    let ahead = 2 * k_steps;
    if flat.len() <= ahead {
        return Err(TaskError::Length { len: flat.len(), reason: "radar record shorter than the prediction horizon" });
    }
    let peak = flat.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let n = flat.len() - ahead;
    let u = flat[..n].iter().map(|v| v * scale).collect();
    let y = flat[ahead..].iter().map(|v| v * scale).collect();
    Ok(dataset(TaskKind::Radar, u, y, seed))
}

pub fn parse_radar<R: BufRead>(reader: R, path: &str) -> Result<Vec<(f64, f64)>, TaskError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        let err = |reason: String| TaskError::Parse { path: path.to_string(), line: i + 1, reason };
        if fields.len() != 2 {
            return Err(err(format!("expected 2 columns (I, Q), found {}", fields.len())));
        }
        let i_val: f64 = fields[0].parse().map_err(|_| err(format!("bad number `{}`", fields[0])))?;
        let q_val: f64 = fields[1].parse().map_err(|_| err(format!("bad number `{}`", fields[1])))?;
        if !i_val.is_finite() || !q_val.is_finite() {
            return Err(err("non-finite sample".into()));
        }
        out.push((i_val, q_val));
    }
    Ok(out)
}

/// Load an I/Q CSV. `offset`/`length` select a contiguous window of
/// flattened symbols (length counts reservoir symbols, not pairs).
pub fn load_radar(path: &Path, k_steps: usize, offset: usize, length: Option<usize>) -> Result<TaskDataset, TaskError> {
    let file = std::fs::File::open(path)?;
    let iq = parse_radar(std::io::BufReader::new(file), &path.display().to_string())?;
    let full = radar_dataset(&iq, k_steps, 0)?;
    let end = match length {
        Some(l) => offset + l,
        None => full.len(),
    };
    if end > full.len() || offset >= end {
        return Err(TaskError::Length { len: full.len(), reason: "requested radar window exceeds the record" });
    }
    let mut ds = full;
    ds.input_u = ds.input_u[offset..end].to_vec();
    ds.target_y = ds.target_y[offset..end].to_vec();
    ds.split = Split::train_only(end - offset);
    ds.notes.push(format!("loaded {} offset {offset}", path.display()));
    Ok(ds)
}

/// Sea-clutter stand-in: per component, three sinusoids whose frequencies
/// random-walk (periods of ~20-60 samples, step 2e-3 rad/sample) plus AR(2)
/// noise with poles at radius 0.9, angle ±0.25 rad, innovation std 0.1.
pub fn gen_radar_surrogate(seed: u64, length: usize, k_steps: usize) -> Result<TaskDataset, TaskError> {
    if length == 0 {
        return Err(TaskError::Length { len: 0, reason: "empty radar surrogate" });
    }
    let pairs = (length + 2 * k_steps).div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comp = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut freqs: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..0.3)).collect();
        let amps: Vec<f64> = (0..3).map(|_| rng.gen_range(0.3..1.0)).collect();
        let mut phases: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let (r, th) = (0.9f64, 0.25f64);
        let (a1, a2) = (2.0 * r * th.cos(), -r * r);
        let (mut e1, mut e2) = (0.0, 0.0);
        (0..pairs)
            .map(|_| {
                let mut s = 0.0;
                for k in 0..3 {
                    s += amps[k] * phases[k].cos();
                    phases[k] += freqs[k];
                    let step: f64 = StandardNormal.sample(rng);
                    freqs[k] = (freqs[k] + 2e-3 * step).clamp(0.05, 0.4);
                }
                let g: f64 = StandardNormal.sample(rng);
                let e = a1 * e1 + a2 * e2 + 0.1 * g;
                e2 = e1;
                e1 = e;
                s + e
            })
            .collect()
    };
    let i_c = comp(&mut rng);
    let q_c = comp(&mut rng);
    let iq: Vec<(f64, f64)> = i_c.into_iter().zip(q_c).collect();
    let mut ds = radar_dataset(&iq, k_steps, seed)?;
    ds.input_u.truncate(length);
    ds.target_y.truncate(length);
    ds.split = Split::train_only(length);
    ds.notes.push("synthetic radar surrogate".into());
    Ok(ds)
}

/// Scoring options.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Classify SWC by the mean output of each 12-sample period.
    pub swc_per_period: bool,
}

/// Nearest symbol in {-3, -1, +1, +3}; ties go to the smaller magnitude
/// (and 0 goes to +1).
pub fn quantize_cheq(y: f64) -> f64 {
    if y < -2.0 {
        -3.0
    } else if y < 0.0 {
        -1.0
    } else if y <= 2.0 {
        1.0
    } else {
        3.0
    }
}

/// Mean squared error over the population variance of the target.
pub fn nmse(pred: &[f64], target: &[f64]) -> Result<f64, TaskError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(TaskError::Mismatch(format!("{} predictions, {} targets", pred.len(), target.len())));
    }
    let l = target.len() as f64;
    let mean = target.iter().sum::<f64>() / l;
    let var = target.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / l;
    if !(var > 0.0) {
        return Err(TaskError::ZeroVariance);
    }
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / l;
    Ok(mse / var)
}

/// Task metric of predictions `pred` for rows `rows` of `dataset`.
pub fn score(kind: TaskKind, pred: &[f64], dataset: &TaskDataset, rows: Range<usize>, opts: ScoreOptions) -> Result<f64, TaskError> {
    if pred.len() != rows.len() {
        return Err(TaskError::Mismatch(format!("{} predictions for {} rows", pred.len(), rows.len())));
    }
    let targets = dataset.aligned_targets();
    let mut keep: Vec<usize> = rows.clone().collect();
    if kind == TaskKind::ChannelEq {
        let len = dataset.len();
        keep.retain(|&n| n >= CHEQ_EDGE && n + CHEQ_EDGE < len);
    }
    if keep.iter().any(|&n| targets[n].is_nan()) {
        return Err(TaskError::Mismatch("scored rows fall before the target alignment shift".into()));
    }
    let p: Vec<f64> = keep.iter().map(|&n| pred[n - rows.start]).collect();
    let t: Vec<f64> = keep.iter().map(|&n| targets[n]).collect();
    if p.is_empty() {
        return Err(TaskError::Mismatch("no rows left to score".into()));
    }
    match kind {
        TaskKind::Narma10 | TaskKind::Radar => nmse(&p, &t),
        TaskKind::Swc if opts.swc_per_period => {
            let mut correct = 0usize;
            let mut total = 0usize;
            let first = keep[0].div_ceil(SWC_PERIOD) * SWC_PERIOD;
            let mut start = first;
            while start + SWC_PERIOD <= rows.end {
                let idx = start - rows.start;
                let mean = pred[idx..idx + SWC_PERIOD].iter().sum::<f64>() / SWC_PERIOD as f64;
                let cls = if mean >= 0.5 { 1.0 } else { 0.0 };
                if cls == targets[start] {
                    correct += 1;
                }
                total += 1;
                start += SWC_PERIOD;
            }
            if total == 0 {
                return Err(TaskError::Mismatch("no whole SWC period in the scored rows".into()));
            }
            Ok(correct as f64 / total as f64)
        }
        TaskKind::Swc => {
            let correct = p
                .iter()
                .zip(&t)
                .filter(|(p, t)| (if **p >= 0.5 { 1.0 } else { 0.0 }) == **t)
                .count();
            Ok(correct as f64 / p.len() as f64)
        }
        TaskKind::ChannelEq => {
            let wrong = p.iter().zip(&t).filter(|(p, t)| quantize_cheq(**p) != **t).count();
            Ok(wrong as f64 / p.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn narma_golden_vector_zero_input() {
        // Hand-executed recurrence with u = 0 and zero history.
        let golden = [
            0.1,
            0.1305,
            0.1406540125,
            0.14480641880568002,
            0.14717764475684447,
            0.14903324843622673,
            0.1507620010697081,
            0.15248728807388293,
            0.15425055964396622,
            0.15606754234535108,
        ];
        let y = narma10_series(&[0.0; 10]);
        for (a, b) in y[1..].iter().zip(&golden) {
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
    }

    #[test]
    fn narma_fixed_point() {
        let y = narma10_series(&[0.0; 1000]);
        let fixed = 0.7 - 0.29f64.sqrt();
        assert_relative_eq!(y[1000], fixed, max_relative = 1e-10);
        assert_relative_eq!(fixed, 0.16148, max_relative = 1e-4);
    }

    #[test]
    fn narma_reproducible_and_bounded() {
        let a = gen_narma10(5, 3000).unwrap();
        assert_eq!(a, gen_narma10(5, 3000).unwrap());
        assert!(a.input_u.iter().all(|u| (0.0..=0.5).contains(u)));
        assert!(a.target_y.iter().all(|y| y.abs() < 1.0));
        // one-step-ahead alignment
        let y = narma10_series(&a.input_u);
        assert_eq!(a.target_y[..], y[1..]);
        assert!(gen_narma10(5, 9).is_err());
    }

    #[test]
    fn swc_shapes() {
        let p = swc_period(false);
        assert_relative_eq!(p[3], 1.0, max_relative = 1e-15);
        assert_eq!(swc_period(true)[..6], [1.0; 6]);
        assert_eq!(swc_period(true)[6..], [-1.0; 6]);
        let d = gen_swc(3, 1200).unwrap();
        assert_eq!(d, gen_swc(3, 1200).unwrap());
        for (chunk, y) in d.input_u.chunks(12).zip(d.target_y.chunks(12)) {
            assert!(y.iter().all(|v| *v == y[0]));
            let want = swc_period(y[0] == 1.0);
            assert_eq!(chunk, &want[..]);
        }
        assert!(gen_swc(3, 13).is_err());
    }

    #[test]
    fn pure_square_target_is_one() {
        let u: Vec<f64> = (0..10).flat_map(|_| swc_period(true)).collect();
        let y = vec![1.0; u.len()];
        let ds = dataset(TaskKind::Swc, u, y, 0);
        assert!(ds.target_y.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn cheq_impulse_and_tap_sum() {
        let mut d = vec![0.0; 20];
        d[5] = 1.0;
        let q = cheq_channel(&d);
        // d(n+2) coefficient shows up at n = 3, d(n-7) at n = 12
        for (i, tap) in CHEQ_TAPS.iter().enumerate() {
            assert_eq!(q[3 + i], *tap);
        }
        let q = cheq_channel(&[1.0; 30]);
        let tap_sum = 0.08 - 0.12 + 1.0 + 0.18 - 0.1 + 0.091 - 0.05 + 0.04 + 0.03 + 0.01;
        assert_relative_eq!(q[15], tap_sum, max_relative = 1e-14);
        assert_relative_eq!(tap_sum, 1.161, max_relative = 1e-12);
        let u = cheq_distort(q[15]);
        assert_relative_eq!(u, 1.161 + 0.036 * 1.161 * 1.161 - 0.011 * 1.161f64.powi(3), max_relative = 1e-12);
    }

    #[test]
    fn cheq_noiseless_and_metadata() {
        let d = gen_cheq(9, 500, None).unwrap();
        assert_eq!(d.pre_mask_bias, 20.0);
        assert_eq!(d.target_shift, 2);
        assert!(d.target_y.iter().all(|s| CHEQ_SYMBOLS.contains(s)));
        let clean: Vec<f64> = cheq_channel(&d.target_y).into_iter().map(cheq_distort).collect();
        assert_eq!(d.input_u, clean);
        assert_eq!(gen_cheq(9, 500, Some(f64::INFINITY)).unwrap().input_u, clean);
    }

    #[test]
    fn cheq_empirical_snr() {
        let len = 100_000;
        let noisy = gen_cheq(21, len, Some(32.0)).unwrap();
        let clean = gen_cheq(21, len, None).unwrap();
        let mean = clean.input_u.iter().sum::<f64>() / len as f64;
        let sig = clean.input_u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
        let noise = noisy.input_u.iter().zip(&clean.input_u).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / len as f64;
        let snr = 10.0 * (sig / noise).log10();
        assert!((snr - 32.0).abs() < 0.2, "snr = {snr}");
    }

    #[test]
    fn radar_flattening_and_parse() {
        assert_eq!(flatten_iq(&[(1.0, 2.0), (3.0, 4.0)]), vec![1.0, 2.0, 3.0, 4.0]);
        let text = "# header\n1.0,2.0\n\n3.0 4.0\n5,6\n";
        let iq = parse_radar(text.as_bytes(), "mem").unwrap();
        assert_eq!(iq.len(), 3);
        let ds = radar_dataset(&iq, 1, 0).unwrap();
        assert_eq!(ds.len(), 4);
        assert_relative_eq!(ds.target_y[0], 3.0 / 6.0);
        assert_relative_eq!(ds.input_u[0], 1.0 / 6.0);
        let bad = "1.0,2.0\n3.0\n";
        match parse_radar(bad.as_bytes(), "mem") {
            Err(TaskError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn radar_constant_file_is_perfectly_predictable() {
        let iq = vec![(0.5, 0.5); 40];
        let ds = radar_dataset(&iq, 2, 0).unwrap();
        assert_eq!(ds.input_u, ds.target_y);
    }

    #[test]
    fn radar_loader_window() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("iq.csv");
        let body: String = (0..100).map(|i| format!("{},{}\n", i as f64, -(i as f64))).collect();
        std::fs::write(&path, body).unwrap();
        let ds = load_radar(&path, 2, 10, Some(50)).unwrap();
        assert_eq!(ds.len(), 50);
        assert!(load_radar(&path, 2, 190, Some(50)).is_err());
        assert!(load_radar(&dir.path().join("missing.csv"), 2, 0, None).is_err());
    }

    #[test]
    fn radar_surrogate_reproducible_and_correlated() {
        let a = gen_radar_surrogate(4, 20_000, 2).unwrap();
        assert_eq!(a, gen_radar_surrogate(4, 20_000, 2).unwrap());
        assert_eq!(a.len(), 20_000);
        // autocorrelation of the in-phase component
        let i: Vec<f64> = a.input_u.iter().step_by(2).copied().collect();
        let mean = i.iter().sum::<f64>() / i.len() as f64;
        let c = |lag: usize| -> f64 {
            let n = i.len() - lag;
            (0..n).map(|k| (i[k] - mean) * (i[k + lag] - mean)).sum::<f64>() / n as f64
        };
        let c0 = c(0);
        let acf: Vec<f64> = (0..=60).map(|l| c(l).abs() / c0).collect();
        assert!(acf[1] > 0.5);
        assert!(acf[10] > 0.05, "acf(10) = {}", acf[10]);
        let early = acf[1..5].iter().sum::<f64>();
        let late = acf[56..60].iter().sum::<f64>();
        assert!(late < early);
    }

    #[test]
    fn scores_on_perfect_and_mean_predictions() {
        let d = gen_narma10(1, 200).unwrap();
        let rows = 0..200;
        assert_eq!(score(TaskKind::Narma10, &d.target_y, &d, rows.clone(), ScoreOptions::default()).unwrap(), 0.0);
        let mean = d.target_y.iter().sum::<f64>() / 200.0;
        let s = score(TaskKind::Narma10, &vec![mean; 200], &d, rows, ScoreOptions::default()).unwrap();
        assert_relative_eq!(s, 1.0, max_relative = 1e-12);

        let s = gen_swc(2, 240).unwrap();
        assert_eq!(score(TaskKind::Swc, &s.target_y, &s, 0..240, ScoreOptions::default()).unwrap(), 1.0);
        assert_eq!(score(TaskKind::Swc, &s.target_y, &s, 0..240, ScoreOptions { swc_per_period: true }).unwrap(), 1.0);

        let c = gen_cheq(3, 100, Some(32.0)).unwrap();
        let perfect: Vec<f64> = c.aligned_targets()[2..].to_vec();
        assert_eq!(score(TaskKind::ChannelEq, &perfect, &c, 2..100, ScoreOptions::default()).unwrap(), 0.0);
    }

    #[test]
    fn nmse_has_no_mean_centring_of_error() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let p = [1.5, 2.5, 3.5, 4.5];
        // constant 0.5 offset costs 0.25 / var(t) = 0.25 / 1.25
        assert_relative_eq!(nmse(&p, &t).unwrap(), 0.2, max_relative = 1e-14);
        assert!(matches!(nmse(&[1.0, 1.0], &[2.0, 2.0]), Err(TaskError::ZeroVariance)));
    }

    #[test]
    fn cheq_quantiser_examples() {
        let q: Vec<f64> = [-2.9, 0.2, 1.8].iter().map(|v| quantize_cheq(*v)).collect();
        assert_eq!(q, vec![-3.0, 1.0, 1.0]);
        assert_eq!(quantize_cheq(2.0), 1.0);
        assert_eq!(quantize_cheq(-2.0), -1.0);
        assert_eq!(quantize_cheq(0.0), 1.0);
        assert_eq!(quantize_cheq(-0.2), -1.0);
        assert_eq!(quantize_cheq(7.0), 3.0);
    }

    #[test]
    fn split_layout() {
        let s = Split::new(250, 2000, vec![2000]);
        assert_eq!(s.total_len(), 4500);
        assert_eq!(s.train_range(), 250..2250);
        assert_eq!(s.test_ranges(), vec![2500..4500]);
        assert_eq!(s.warmup_ranges(), vec![0..250, 2250..2500]);
        let s = Split::new(10, 30, vec![5, 7]);
        assert_eq!(s.test_ranges(), vec![50..55, 65..72]);
        let mut covered = vec![0; s.total_len()];
        for r in s.warmup_ranges().into_iter().chain(s.test_ranges()).chain([s.train_range()]) {
            for n in r {
                covered[n] += 1;
            }
        }
        assert!(covered.iter().all(|c| *c == 1));
    }

    #[test]
    fn task_kind_parsing() {
        assert_eq!("NARMA10".parse::<TaskKind>().unwrap(), TaskKind::Narma10);
        assert_eq!("cheq".parse::<TaskKind>().unwrap(), TaskKind::ChannelEq);
        assert!(matches!("xor".parse::<TaskKind>(), Err(TaskError::UnknownKind(_))));
    }
}
