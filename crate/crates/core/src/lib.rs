//! Simulator for wavelength-multiplexed microring time-delay reservoir
//! computing.
//!
//! The crate is layered bottom-up: [`phys`] holds the material constants,
//! [`tcmt`] integrates the cavity, [`pipeline`] turns symbols into drive
//! waveforms and drop-port fields into state matrices, [`readout`] fits
//! the linear output layer, [`tasks`] generates benchmarks, [`capacity`]
//! measures task-independent quality and [`sweep`] orchestrates runs.

pub mod phys;
pub mod pipeline;
pub mod readout;
pub mod tasks;
pub mod tcmt;
pub mod capacity;
pub mod sweep;
