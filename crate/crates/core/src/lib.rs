//! Cycle-accurate simulator for an explicitly many-processor machine running
//! an extended Y86 instruction set.
//!
//! Layers, bottom up:
//! - [`isa`]: encoding, decoding and the single-step executor.
//! - [`assembler`]: source to memory image, listings, disassembly.
//! - [`supervisor`]: core pool, quasi-thread forest, latches, mass modes.
//! - [`engine`]: the clocked machine, tracing and invariant checks.
//! - [`diagram`]: execution diagrams rendered from traces.
//! - [`bench`]: program generators, sweeps, efficiency metrics.
//! - [`programs`]: bundled example programs.

pub mod assembler;
pub mod bench;
pub mod diagram;
pub mod engine;
pub mod isa;
pub mod programs;
pub mod supervisor;
