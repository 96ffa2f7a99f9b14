//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). The exit status is zero in
//! report mode; set `ACCEPTANCE_STRICT=1` to turn any failing criterion into
//! a nonzero exit.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringtdrc::capacity::{linear_mc, rescale_to_unit, total_ipc, CapacityConfig};
use ringtdrc::phys::PhysicalParams;
use ringtdrc::pipeline::StateMatrix;
use ringtdrc::readout::{train_ridge, Rows, DEFAULT_LAMBDA};
use ringtdrc::sweep::{grid_sweep, run_experiment, simulate, ChannelSpec, Lengths, Scenario, SweepGrid};
use ringtdrc::tasks::TaskKind;
use ringtdrc::tcmt::{lorentzian_check, rk4_errors};
use std::time::Instant;

const LORENTZ_TOL: f64 = 1e-6;
const LORENTZ_BUDGET_S: f64 = 1.0;
const RK4_MIN_RATIO: f64 = 12.0;
const RK4_BUDGET_S: f64 = 10.0;
const RIDGE_TOL: f64 = 1e-8;
const NARMA_SINGLE_MAX: f64 = 0.05;
const WDM_REL_SPREAD: f64 = 0.1;
const WDM_MEAN_MAX: f64 = 0.08;
const REGION_A_MIN: f64 = 0.3;
const REGION_C_MIN: f64 = 0.5;
const REGION_SEEDS: u64 = 3;
const NULL_CLIN_MAX: f64 = 2.0;
const IPC_TOL: f64 = 1e-9;
const SWC_MIN: f64 = 0.99;
const SER_MAX: f64 = 1e-2;
const SER_BASELINE_FRACTION: f64 = 0.25;
const DPHI_MIN_SPREAD: f64 = 0.25;

// Tuned operating points (power dBm, detuning GHz).
const SWC_POINT: (f64, f64) = (-5.0, -30.0);
const CHEQ_POINT: (f64, f64) = (0.0, -30.0);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn single(task: TaskKind, power_dbm: f64, detuning_ghz: f64) -> Scenario {
    Scenario { total_power_dbm: power_dbm, channels: vec![ChannelSpec::new(task, detuning_ghz)], ..Scenario::default() }
}

fn lorentzian() -> Outcome {
    let t = Instant::now();
    let detunings: Vec<f64> = (0..11).map(|i| -5.0 + i as f64).collect();
    let pts = lorentzian_check(&PhysicalParams::default(), &detunings, 4_000).expect("linear run");
    let secs = t.elapsed().as_secs_f64();
    let worst = pts.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    outcome(
        worst < LORENTZ_TOL && secs < LORENTZ_BUDGET_S && pts.len() == 11,
        format!("max rel error {worst:.2e} over {} detunings in {secs:.3} s", pts.len()),
    )
}

fn rk4_order() -> Outcome {
    let t = Instant::now();
    let steps = [4e-12, 2e-12, 1e-12, 0.5e-12];
    let errs = rk4_errors(&PhysicalParams::default(), ringtdrc::phys::ghz_to_rad_per_s(30.0), 400e-12, &steps).expect("linear run");
    let secs = t.elapsed().as_secs_f64();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let ok = ratios.len() == 3 && ratios.iter().all(|r| *r >= RK4_MIN_RATIO) && secs < RK4_BUDGET_S;
    outcome(ok, format!("error ratios {:?} in {secs:.3} s", ratios.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>()))
}

fn ridge_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..200 * 50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = train_ridge(Rows::new(&x, 50), &y, DEFAULT_LAMBDA).expect("ridge").weights;
        let xm = DMatrix::from_row_slice(200, 50, &x);
        let ym = DMatrix::from_column_slice(200, 1, &y);
        let normal = xm.transpose() * &xm + DMatrix::identity(50, 50) * DEFAULT_LAMBDA;
        let inv = normal.lu().try_inverse().expect("invertible");
        let oracle = inv * xm.transpose() * ym;
        let num: f64 = w.iter().zip(oracle.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(num / oracle.norm());
    }
    outcome(worst < RIDGE_TOL, format!("max rel error {worst:.2e} over 20 systems"))
}

fn narma_single() -> Outcome {
    let out = run_experiment(&Scenario::preset("narma-single").unwrap()).expect("run");
    let c = &out.channels[0];
    outcome(c.mean <= NARMA_SINGLE_MAX, format!("mean NMSE {:.4} ± {:.4} over {} seeds", c.mean, c.std, c.per_seed.len()))
}

fn wdm_replication() -> Outcome {
    let out = run_experiment(&Scenario::preset("narma-wdm4").unwrap()).expect("run");
    let m: Vec<f64> = out.channels.iter().map(|c| c.mean).collect();
    let spread = m.iter().map(|v| (v - m[0]).abs()).fold(0.0, f64::max);
    let mean = m.iter().sum::<f64>() / m.len() as f64;
    outcome(
        spread < WDM_REL_SPREAD * m[0] && mean <= WDM_MEAN_MAX,
        format!(
            "channel NMSE {:?}, max |ch_k - ch_0| = {spread:.4} (limit {:.4}), mean {mean:.4}",
            m.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            WDM_REL_SPREAD * m[0]
        ),
    )
}

fn region_structure() -> Outcome {
    let base = Scenario { seeds: (0..REGION_SEEDS).collect(), ..Scenario::default() };
    let res = grid_sweep(&SweepGrid::preset("region-map").unwrap(), &base, 1).expect("sweep");
    let rows: Vec<_> = res.rows.iter().filter(|r| r.metric == "nmse").collect();
    let lowest = rows.iter().map(|r| r.coords[0]).fold(f64::INFINITY, f64::min);
    let row_a: Vec<f64> = rows.iter().filter(|r| r.coords[0] == lowest).map(|r| r.mean).collect();
    let min_a = row_a.iter().copied().fold(f64::INFINITY, f64::min);
    let c_points: Vec<_> = rows.iter().filter(|r| r.self_pulsing && r.mean > REGION_C_MIN).collect();
    let all_ok = rows.iter().all(|r| r.is_ok());
    let pass = all_ok && row_a.len() == 9 && min_a >= REGION_A_MIN && !c_points.is_empty();
    let c_desc: Vec<String> = c_points.iter().map(|r| format!("({}, {}) {:.3}", r.coords[0], r.coords[1], r.mean)).collect();
    outcome(
        pass,
        format!(
            "{} points; lowest row min NMSE {min_a:.3}; self-pulsing with NMSE > {REGION_C_MIN}: [{}]",
            rows.len(),
            c_desc.join(", ")
        ),
    )
}

fn shuffled(states: &StateMatrix, seed: u64) -> StateMatrix {
    let mut order: Vec<usize> = (0..states.rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let data = order.iter().flat_map(|&r| states.row(r).to_vec()).collect();
    StateMatrix::new(states.rows, states.cols, data)
}

fn memory_bound() -> Outcome {
    let mut runs = Vec::new();
    for sc in [Scenario { seeds: vec![0, 1], ..Scenario::default() }, Scenario { seeds: vec![0], ..Scenario::preset("multitask").unwrap() }] {
        for &seed in &sc.seeds {
            let sim = simulate(&sc, seed).expect("simulate");
            for (ds, st) in sim.datasets.iter().zip(&sim.states) {
                runs.push((ds.input_u.clone(), st.clone(), sc.lengths.split()));
            }
        }
    }
    let mut worst = 0.0f64;
    let mut worst_null = 0.0f64;
    for (i, (u, st, split)) in runs.iter().enumerate() {
        let (_, c) = linear_mc(st, u, split, 50, DEFAULT_LAMBDA).expect("mc");
        let (_, c0) = linear_mc(&shuffled(st, i as u64), u, split, 50, DEFAULT_LAMBDA).expect("mc");
        worst = worst.max(c);
        worst_null = worst_null.max(c0);
    }
    outcome(
        worst <= 50.0 && worst_null < NULL_CLIN_MAX,
        format!("max C_lin {worst:.3} over {} runs; shuffled max {worst_null:.3}", runs.len()),
    )
}

fn ipc_consistency() -> Outcome {
    let sc = Scenario { seeds: vec![0], ..Scenario::default() };
    let sim = simulate(&sc, 0).expect("simulate");
    let split = sc.lengths.split();
    let u = rescale_to_unit(&sim.datasets[0].input_u, 0.0, 0.5);
    let cfg = CapacityConfig { h_max: 2, ..CapacityConfig::default() };
    let report = total_ipc(&sim.states[0], &u, &split, &cfg).expect("ipc");
    let (_, c_lin) = linear_mc(&sim.states[0], &u, &split, cfg.k_max, cfg.lambda).expect("mc");
    let rel = (report.per_order[0] - c_lin).abs() / c_lin;
    outcome(rel < IPC_TOL, format!("order-1 IPC {:.9} vs linear MC {c_lin:.9}, rel {rel:.1e}", report.per_order[0]))
}

fn swc_accuracy() -> Outcome {
    let out = run_experiment(&single(TaskKind::Swc, SWC_POINT.0, SWC_POINT.1)).expect("run");
    let c = &out.channels[0];
    outcome(c.mean >= SWC_MIN, format!("accuracy {:.4} at {:?} over {} seeds", c.mean, SWC_POINT, c.per_seed.len()))
}

fn channel_eq() -> Outcome {
    let out = run_experiment(&single(TaskKind::ChannelEq, CHEQ_POINT.0, CHEQ_POINT.1)).expect("run");
    let c = &out.channels[0];
    let worst = c.per_seed.iter().map(|s| s.value()).fold(0.0, f64::max);
    let ceiling = SER_BASELINE_FRACTION * 0.75;
    outcome(
        c.mean <= SER_MAX && worst <= ceiling,
        format!("mean SER {:.2e}, worst seed {worst:.2e} (ceiling {ceiling}) at {CHEQ_POINT:?}", c.mean),
    )
}

fn delta_phi() -> Outcome {
    let res = grid_sweep(&SweepGrid::preset("delta-phi").unwrap(), &Scenario::default(), 1).expect("sweep");
    let v: Vec<(f64, f64)> = res.rows.iter().filter(|r| r.metric == "nmse").map(|r| (r.coords[0], r.mean)).collect();
    let best = v.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let worst = v.iter().map(|p| p.1).fold(0.0, f64::max);
    let spread = (worst - best) / best;
    outcome(
        v.len() == 6 && spread >= DPHI_MIN_SPREAD,
        format!(
            "NMSE by dphi/2pi {:?}; spread {:.0}%",
            v.iter().map(|(a, b)| ((a * 1e3).round() / 1e3, (b * 1e4).round() / 1e4)).collect::<Vec<_>>(),
            spread * 100.0
        ),
    )
}

fn determinism() -> Outcome {
    let base = Scenario {
        seeds: vec![3, 4],
        lengths: Lengths { warmup: 100, train: 400, test: vec![300, 300] },
        ..Scenario::preset("multitask").unwrap()
    };
    let grid = SweepGrid {
        axes: vec![
            ringtdrc::sweep::Axis::new(ringtdrc::sweep::AxisKind::DeltaPhi, vec![0.0, 0.5]),
            ringtdrc::sweep::Axis::new(ringtdrc::sweep::AxisKind::DetuningGhz, vec![-20.0, 10.0, 40.0]),
        ],
    };
    let csv = |workers| {
        let mut buf = Vec::new();
        grid_sweep(&grid, &base, workers).expect("sweep").write_csv(&mut buf).expect("csv");
        buf
    };
    let (a, b, c) = (csv(1), csv(2), csv(4));
    outcome(a == b && b == c && !a.is_empty(), format!("{} bytes, identical across 1/2/4 workers: {}", a.len(), a == b && b == c))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("linear-cavity oracle", lorentzian),
        ("RK4 order", rk4_order),
        ("ridge oracle", ridge_oracle),
        ("single-channel NARMA-10", narma_single),
        ("WDM replication", wdm_replication),
        ("region structure", region_structure),
        ("memory-capacity bound", memory_bound),
        ("IPC consistency", ipc_consistency),
        ("SWC accuracy", swc_accuracy),
        ("channel equalization", channel_eq),
        ("dphi sensitivity", delta_phi),
        ("determinism", determinism),
    ];
    let filter: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if filter.as_ref().is_some_and(|v| !v.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {n:>2} {name}: {} [{:.1} s]", o.detail, t.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
