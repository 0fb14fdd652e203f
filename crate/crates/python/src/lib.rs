//! Python bindings: assemble, run, benchmark.

use std::collections::BTreeMap;

use empa_core::assembler::{self, Assembly, MemoryImage};
use empa_core::bench::{self, Method};
use empa_core::diagram::{build_model, render_svg, render_text, Style};
use empa_core::engine::{self, LatencyTable, MachineConfig, RunStats};
use empa_core::isa::Reg;
use num_rational::Ratio;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// An assembled program.
#[pyclass(module = "empa", frozen)]
struct Program {
    asm: Assembly,
}

#[pymethods]
impl Program {
    #[getter]
    fn entry(&self) -> u32 {
        self.asm.image.entry
    }

    /// Flat memory bytes from address 0.
    #[getter]
    fn image(&self) -> Vec<u8> {
        self.asm.image.flatten()
    }

    #[getter]
    fn listing(&self) -> String {
        self.asm.listing.to_string()
    }

    #[getter]
    fn symbols(&self) -> BTreeMap<String, u32> {
        self.asm
            .symbols
            .iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Program(entry=0x{:x}, bytes={})",
            self.asm.image.entry,
            self.asm.image.end()
        )
    }
}

#[pyfunction]
fn assemble(source: &str) -> PyResult<Program> {
    assembler::assemble(source)
        .map(|asm| Program { asm })
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (image, start = 0, count = 1))]
fn disassemble(image: Vec<u8>, start: u32, count: usize) -> PyResult<String> {
    assembler::disassemble(&MemoryImage::from_flat(image, start), start, count).map_err(value_err)
}

fn stats_dict(s: &RunStats) -> BTreeMap<&'static str, u64> {
    BTreeMap::from([
        ("total_cycles", s.total_cycles),
        ("busy_core_cycles", s.busy_core_cycles),
        ("idle_core_cycles", s.idle_core_cycles),
        ("peak_concurrent", s.peak_concurrent as u64),
        ("cores_rented", s.cores_rented as u64),
    ])
}

/// A simulated processor with a program loaded.
#[pyclass(module = "empa", unsendable)]
struct Machine {
    inner: engine::Machine,
}

#[pymethods]
impl Machine {
    #[new]
    #[pyo3(signature = (program, cores = 32, max_cycles = 1_000_000, mode5_cap = 30, check_invariants = false))]
    fn new(
        program: &Program,
        cores: usize,
        max_cycles: u64,
        mode5_cap: u32,
        check_invariants: bool,
    ) -> PyResult<Self> {
        let config = MachineConfig {
            cores,
            max_cycles,
            mode5_cap,
            check_invariants,
            ..MachineConfig::default()
        };
        engine::Machine::load(&program.asm.image, config, LatencyTable::default())
            .map(|inner| Machine { inner })
            .map_err(value_err)
    }

    fn register_service(&mut self, core: usize, service_id: u8, entry: u32) -> PyResult<()> {
        self.inner
            .register_service(core, service_id, entry)
            .map_err(value_err)
    }

    /// Run to halt and return the run statistics.
    fn run(&mut self) -> PyResult<BTreeMap<&'static str, u64>> {
        self.inner
            .run()
            .map(|s| stats_dict(&s))
            .map_err(runtime_err)
    }

    #[getter]
    fn cycle(&self) -> u64 {
        self.inner.cycle
    }

    /// Register of a core by name, e.g. `reg(0, "eax")`.
    fn reg(&self, core: usize, name: &str) -> PyResult<i32> {
        let r = Reg::from_name(name.trim_start_matches('%'))
            .ok_or_else(|| value_err(format!("no register `{name}`")))?;
        if core >= self.inner.sv.cores.len() {
            return Err(value_err(format!("no core {core}")));
        }
        Ok(self.inner.reg(core, r))
    }

    fn read_word(&self, addr: u32) -> PyResult<i32> {
        self.inner.read_word(addr).map_err(value_err)
    }

    /// Trace as tab-separated lines.
    fn trace(&self) -> Vec<String> {
        self.inner.trace.iter().map(ToString::to_string).collect()
    }

    fn trace_digest(&self) -> String {
        engine::trace_digest(&self.inner.trace)
    }

    fn diagram_svg(&self) -> PyResult<String> {
        let model = build_model(&self.inner.trace).map_err(runtime_err)?;
        Ok(render_svg(&model, &Style::default()))
    }

    fn diagram_text(&self) -> PyResult<String> {
        let model = build_model(&self.inner.trace).map_err(runtime_err)?;
        Ok(render_text(&model))
    }
}

/// Run one vector-sum program; `method` is NO, FOR, SUMUP or ADAPTIVE.
#[pyfunction]
#[pyo3(signature = (method, values, cores = 32))]
fn vector_sum(
    py: Python<'_>,
    method: &str,
    values: Vec<i32>,
    cores: usize,
) -> PyResult<BTreeMap<&'static str, Py<PyAny>>> {
    let method: Method = method.parse().map_err(value_err)?;
    let r = bench::run_vector_sum(method, &values, &MachineConfig::with_cores(cores))
        .map_err(runtime_err)?;
    Ok(BTreeMap::from([
        (
            "method",
            r.method.to_string().into_pyobject(py)?.into_any().unbind(),
        ),
        ("n", r.n.into_pyobject(py)?.into_any().unbind()),
        (
            "total_cycles",
            r.total_cycles.into_pyobject(py)?.into_any().unbind(),
        ),
        (
            "cores_rented",
            r.cores_rented.into_pyobject(py)?.into_any().unbind(),
        ),
        (
            "peak_concurrent",
            r.peak_concurrent.into_pyobject(py)?.into_any().unbind(),
        ),
        (
            "busy_core_cycles",
            r.busy_core_cycles.into_pyobject(py)?.into_any().unbind(),
        ),
        (
            "checksum",
            r.checksum.into_pyobject(py)?.into_any().unbind(),
        ),
        (
            "trace_digest",
            r.trace_digest.into_pyobject(py)?.into_any().unbind(),
        ),
    ]))
}

/// Parallel fraction for speedup `num/den` on `cores`, as an exact
/// `(numerator, denominator)` pair.
#[pyfunction]
fn amdahl_alpha(num: i128, den: i128, cores: i64) -> PyResult<(i128, i128)> {
    if den == 0 {
        return Err(value_err("zero denominator"));
    }
    let a = bench::amdahl_alpha(Ratio::new(num, den), cores).map_err(value_err)?;
    Ok((*a.alpha.numer(), *a.alpha.denom()))
}

#[pyfunction]
#[pyo3(signature = (overhead = 2700))]
fn exception_bench(overhead: u64) -> PyResult<BTreeMap<&'static str, f64>> {
    let r = bench::exception_bench(&MachineConfig::default(), overhead).map_err(runtime_err)?;
    Ok(BTreeMap::from([
        ("empa_latency", r.empa_latency as f64),
        ("dispatch_cost", r.dispatch_cost as f64),
        ("conventional_overhead", r.conventional_overhead as f64),
        ("ratio", r.ratio),
        (
            "requester_overlapped",
            if r.requester_overlapped { 1.0 } else { 0.0 },
        ),
        ("total_cycles", r.total_cycles as f64),
    ]))
}

/// Bundled example programs by name.
#[pyfunction]
fn programs() -> BTreeMap<&'static str, &'static str> {
    empa_core::programs::ALL.into_iter().collect()
}

#[pymodule]
fn empa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Program>()?;
    m.add_class::<Machine>()?;
    m.add_function(wrap_pyfunction!(assemble, m)?)?;
    m.add_function(wrap_pyfunction!(disassemble, m)?)?;
    m.add_function(wrap_pyfunction!(vector_sum, m)?)?;
    m.add_function(wrap_pyfunction!(amdahl_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(exception_bench, m)?)?;
    m.add_function(wrap_pyfunction!(programs, m)?)?;
    Ok(())
}
