//! The clocked machine: loads an image, ticks every core once per control
//! cycle, routes meta-instructions to the supervisor and records a trace.
//!
//! Timing convention: an executable instruction fetched at cycle `t` with
//! latency `L` commits at `t + L - 1` and the core fetches again at `t + L`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assembler::MemoryImage;
use crate::isa::{self, Addr, DecodeError, ExecError, Kind, Memory, Reg, Word};
use crate::supervisor::{
    CoreId, CoreRecord, CoreStatus, InFlight, Supervisor, SvConstants, SvError,
};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
}

fn key_values(text: &str) -> impl Iterator<Item = Result<(usize, &str, &str), ConfigError>> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            return None;
        }
        Some(match line.split_once('=') {
            Some((k, v)) => Ok((i + 1, k.trim(), v.trim())),
            None => Err(ConfigError::Syntax { line: i + 1 }),
        })
    })
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.into(),
        value: value.into(),
    })
}

/// Executable mnemonics that carry a latency entry.
const EXEC_KINDS: [Kind; 22] = [
    Kind::Halt,
    Kind::Nop,
    Kind::Rrmovl,
    Kind::Irmovl,
    Kind::Rmmovl,
    Kind::Mrmovl,
    Kind::Addl,
    Kind::Subl,
    Kind::Andl,
    Kind::Xorl,
    Kind::Jmp,
    Kind::Jle,
    Kind::Jl,
    Kind::Je,
    Kind::Jne,
    Kind::Jge,
    Kind::Jg,
    Kind::Call,
    Kind::Ret,
    Kind::Pushl,
    Kind::Popl,
    Kind::Iaddl,
];

/// Per-instruction latencies plus the supervisor constants.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatencyTable {
    exec: BTreeMap<&'static str, u64>,
    pub sv: SvConstants,
}

impl Default for LatencyTable {
    /// The shipped calibration.
    fn default() -> Self {
        let exec = EXEC_KINDS
            .iter()
            .map(|&k| {
                let l = match k {
                    Kind::Mrmovl | Kind::Rmmovl => 6,
                    Kind::Addl | Kind::Subl | Kind::Andl | Kind::Xorl => 3,
                    Kind::Irmovl | Kind::Iaddl => 5,
                    Kind::Rrmovl => 2,
                    Kind::Halt | Kind::Nop => 1,
                    _ => 5,
                };
                (k.mnemonic(), l)
            })
            .collect();
        LatencyTable {
            exec,
            sv: SvConstants::default(),
        }
    }
}

impl LatencyTable {
    /// Cycles a fetched instruction occupies its core. Meta-instructions
    /// report the base meta cost; the supervisor applies its own constants.
    pub fn of(&self, kind: Kind) -> u64 {
        if kind.is_meta() {
            return self.sv.meta;
        }
        self.exec[kind.mnemonic()]
    }

    pub fn set(&mut self, kind: Kind, cycles: u64) {
        assert!(cycles >= 1, "latencies are at least one cycle");
        if kind.is_meta() {
            self.sv.meta = cycles;
        } else {
            self.exec.insert(kind.mnemonic(), cycles);
        }
    }

    /// Apply `key=value` overrides onto the shipped table. Keys are
    /// `latency.<mnemonic>`, the groups `latency.opl` and `latency.jxx`,
    /// and `sv.<constant>`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut t = LatencyTable::default();
        for kv in key_values(text) {
            let (line, key, value) = kv?;
            let v: u64 = parse_value(line, key, value)?;
            if v == 0 {
                return Err(ConfigError::BadValue {
                    line,
                    key: key.into(),
                    value: value.into(),
                });
            }
            let unknown = || ConfigError::UnknownKey {
                line,
                key: key.into(),
            };
            if let Some(name) = key.strip_prefix("latency.") {
                let group: Vec<Kind> = match name.to_ascii_lowercase().as_str() {
                    "opl" => vec![Kind::Addl, Kind::Subl, Kind::Andl, Kind::Xorl],
                    "jxx" => EXEC_KINDS.iter().copied().filter(|k| k.is_jump()).collect(),
                    _ => {
                        let k = Kind::from_mnemonic(name)
                            .filter(|k| !k.is_meta())
                            .ok_or_else(unknown)?;
                        vec![k]
                    }
                };
                for k in group {
                    t.set(k, v);
                }
            } else if let Some(name) = key.strip_prefix("sv.") {
                let slot = match name {
                    "create_dispatch" => &mut t.sv.create_dispatch,
                    "clone_cost" => &mut t.sv.clone_cost,
                    "term_latch_cost" => &mut t.sv.term_latch_cost,
                    "wait_release_cost" => &mut t.sv.wait_release_cost,
                    "alloc_cost" => &mut t.sv.alloc_cost,
                    "intr_dispatch_cost" => &mut t.sv.intr_dispatch_cost,
                    "meta" => &mut t.sv.meta,
                    _ => return Err(unknown()),
                };
                *slot = v;
            } else {
                return Err(unknown());
            }
        }
        Ok(t)
    }

    /// Full table in the `key=value` format accepted by [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in EXEC_KINDS {
            s += &format!("latency.{}={}\n", k.mnemonic(), self.of(k));
        }
        let c = &self.sv;
        for (k, v) in [
            ("create_dispatch", c.create_dispatch),
            ("clone_cost", c.clone_cost),
            ("term_latch_cost", c.term_latch_cost),
            ("wait_release_cost", c.wait_release_cost),
            ("alloc_cost", c.alloc_cost),
            ("intr_dispatch_cost", c.intr_dispatch_cost),
            ("meta", c.meta),
        ] {
            s += &format!("sv.{k}={v}\n");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineConfig {
    pub cores: usize,
    pub memory: usize,
    pub max_cycles: u64,
    /// Upper bound on the cores one Mode5 QAlloc requests.
    pub mode5_cap: u32,
    /// Run forest and conservation checks after every tick.
    pub check_invariants: bool,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            cores: 32,
            memory: 64 * 1024,
            max_cycles: 1_000_000,
            mode5_cap: 30,
            check_invariants: false,
        }
    }
}

impl MachineConfig {
    pub fn with_cores(cores: usize) -> Self {
        MachineConfig {
            cores,
            ..Default::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = MachineConfig::default();
        for kv in key_values(text) {
            let (line, key, value) = kv?;
            match key {
                "cores" => c.cores = parse_value(line, key, value)?,
                "memory" => c.memory = parse_value(line, key, value)?,
                "max_cycles" => c.max_cycles = parse_value(line, key, value)?,
                "mode5_cap" => c.mode5_cap = parse_value(line, key, value)?,
                "check_invariants" => c.check_invariants = parse_value(line, key, value)?,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.into(),
                    })
                }
            }
            if c.cores == 0 || c.max_cycles == 0 {
                return Err(ConfigError::BadValue {
                    line,
                    key: key.into(),
                    value: value.into(),
                });
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    FetchExec,
    MetaExec,
    QTStart,
    QTEnd,
    BlockStart,
    BlockEnd,
    WaitStart,
    WaitEnd,
    Sleep,
    Wake,
    LatchWrite,
    LatchRead,
    IntrDispatch,
    Halt,
}

impl EventKind {
    pub const ALL: [EventKind; 14] = [
        EventKind::FetchExec,
        EventKind::MetaExec,
        EventKind::QTStart,
        EventKind::QTEnd,
        EventKind::BlockStart,
        EventKind::BlockEnd,
        EventKind::WaitStart,
        EventKind::WaitEnd,
        EventKind::Sleep,
        EventKind::Wake,
        EventKind::LatchWrite,
        EventKind::LatchRead,
        EventKind::IntrDispatch,
        EventKind::Halt,
    ];
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for EventKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown event kind `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub cycle: u64,
    pub core: CoreId,
    pub qt_label: String,
    pub kind: EventKind,
    pub addr: Addr,
    pub detail: String,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t0x{:03x}\t{}",
            self.cycle, self.core, self.qt_label, self.kind, self.addr, self.detail
        )
    }
}

impl FromStr for TraceEvent {
    type Err = String;
    fn from_str(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.splitn(6, '\t').collect();
        let [cycle, core, label, kind, addr, detail] = f[..] else {
            return Err(format!("expected 6 tab-separated fields: `{line}`"));
        };
        let addr = addr
            .strip_prefix("0x")
            .and_then(|h| u32::from_str_radix(h, 16).ok())
            .ok_or_else(|| format!("bad address `{addr}`"))?;
        Ok(TraceEvent {
            cycle: cycle.parse().map_err(|_| format!("bad cycle `{cycle}`"))?,
            core: core.parse().map_err(|_| format!("bad core `{core}`"))?,
            qt_label: label.to_string(),
            kind: kind.parse()?,
            addr,
            detail: detail.to_string(),
        })
    }
}

pub fn trace_log(events: &[TraceEvent]) -> String {
    events.iter().map(|e| format!("{e}\n")).collect()
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, String> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(str::parse)
        .collect()
}

/// SHA-256 of the trace log, hex encoded.
pub fn trace_digest(events: &[TraceEvent]) -> String {
    let digest = Sha256::digest(trace_log(events).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("image ends at {end:#x}, beyond the {memory}-byte memory")]
    ImageTooLarge { end: Addr, memory: usize },
    #[error("entry address {entry:#x} is outside memory")]
    BadEntry { entry: Addr },
    #[error("machine configuration: {0}")]
    BadConfig(String),
    #[error("cycle {cycle}, core {core}: {source}")]
    Decode {
        cycle: u64,
        core: CoreId,
        source: DecodeError,
    },
    #[error("cycle {cycle}, core {core}, {addr:#x}: {source}")]
    Exec {
        cycle: u64,
        core: CoreId,
        addr: Addr,
        source: ExecError,
    },
    #[error("cycle {cycle}, core {core}, {addr:#x}: {source}")]
    Supervisor {
        cycle: u64,
        core: CoreId,
        addr: Addr,
        source: SvError,
    },
    #[error("no halt within {cycles} cycles")]
    Timeout { cycles: u64 },
    #[error("deadlock at cycle {cycle}: no core can make progress")]
    Deadlock { cycle: u64 },
    #[error("invariant violated at cycle {cycle}: {message}")]
    Invariant { cycle: u64, message: String },
    #[error("machine already halted")]
    Halted,
}

/// Figures from a finished run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunStats {
    pub total_cycles: u64,
    pub busy_core_cycles: u64,
    pub idle_core_cycles: u64,
    pub peak_concurrent: usize,
    pub cores_rented: usize,
}

/// Register file of a QT at the moment it executed QTerm.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QtExit {
    pub cycle: u64,
    pub core: CoreId,
    pub label: String,
    pub create_offset: Addr,
    pub regs: [Word; 8],
}

#[derive(Clone, Debug)]
pub struct Machine {
    pub config: MachineConfig,
    pub latency: LatencyTable,
    pub memory: Memory,
    pub sv: Supervisor,
    pub cycle: u64,
    pub trace: Vec<TraceEvent>,
    pub qt_exits: Vec<QtExit>,
    pub busy_core_cycles: u64,
    pub idle_core_cycles: u64,
    pub peak_concurrent: usize,
    pub halted: bool,
}

impl Machine {
    pub fn load(
        image: &MemoryImage,
        config: MachineConfig,
        latency: LatencyTable,
    ) -> Result<Self, SimError> {
        if config.cores == 0 {
            return Err(SimError::BadConfig("at least one core is required".into()));
        }
        if image.end() as usize > config.memory {
            return Err(SimError::ImageTooLarge {
                end: image.end(),
                memory: config.memory,
            });
        }
        if image.entry as usize >= config.memory {
            return Err(SimError::BadEntry { entry: image.entry });
        }
        let mut memory = Memory::new(config.memory);
        for seg in &image.segments {
            let start = seg.base as usize;
            memory.bytes_mut()[start..start + seg.bytes.len()].copy_from_slice(&seg.bytes);
        }
        let mut sv = Supervisor::new(config.cores, latency.sv, config.mode5_cap);
        sv.boot(image.entry);
        Ok(Machine {
            config,
            latency,
            memory,
            sv,
            cycle: 0,
            trace: Vec::new(),
            qt_exits: Vec::new(),
            busy_core_cycles: 0,
            idle_core_cycles: 0,
            peak_concurrent: 0,
            halted: false,
        })
    }

    /// Assemble-free convenience for tests and tools.
    pub fn from_source(
        source: &str,
        config: MachineConfig,
    ) -> Result<Self, Box<dyn std::error::Error>> {
        let asm = crate::assembler::assemble(source)?;
        Ok(Machine::load(&asm.image, config, LatencyTable::default())?)
    }

    pub fn core(&self, id: CoreId) -> &CoreRecord {
        &self.sv.cores[id]
    }

    pub fn root(&self) -> &CoreRecord {
        &self.sv.cores[0]
    }

    pub fn reg(&self, core: CoreId, r: Reg) -> Word {
        self.sv.cores[core].reg(r)
    }

    pub fn read_word(&self, addr: Addr) -> Result<Word, ExecError> {
        self.memory.read_word(addr)
    }

    pub fn register_service(
        &mut self,
        core: CoreId,
        service_id: u8,
        entry: Addr,
    ) -> Result<(), SimError> {
        self.sv
            .register_service(core, service_id, entry)
            .map_err(|source| SimError::Supervisor {
                cycle: self.cycle,
                core,
                addr: entry,
                source,
            })
    }

    pub fn stats(&self) -> RunStats {
        RunStats {
            total_cycles: self.cycle,
            busy_core_cycles: self.busy_core_cycles,
            idle_core_cycles: self.idle_core_cycles,
            peak_concurrent: self.peak_concurrent,
            cores_rented: self.sv.rented_ever.len(),
        }
    }

    fn sv_err(&self, core: CoreId, addr: Addr) -> impl Fn(SvError) -> SimError {
        let cycle = self.cycle;
        move |source| SimError::Supervisor {
            cycle,
            core,
            addr,
            source,
        }
    }

    fn commit(&mut self, id: CoreId) -> Result<(), SimError> {
        let f = self.sv.cores[id]
            .in_flight
            .take()
            .expect("commit without in-flight");
        let now = self.cycle;
        if let Some(cc) = f.delta.cc {
            self.sv.cores[id].cc = cc;
        }
        for &(r, v) in &f.delta.reg_writes {
            self.sv
                .write_reg(id, r, v)
                .map_err(self.sv_err(id, f.addr))?;
        }
        if let Some((a, v)) = f.delta.mem_write {
            self.memory
                .write_word(a, v)
                .map_err(|source| SimError::Exec {
                    cycle: now,
                    core: id,
                    addr: f.addr,
                    source,
                })?;
        }
        self.sv.cores[id].pc = f.delta.next_pc;
        if f.delta.halted {
            self.halted = true;
            self.sv.halted = true;
            self.sv
                .emit(now, id, EventKind::Halt, f.addr, String::new());
            self.sv
                .emit(now, id, EventKind::QTEnd, f.addr, String::new());
        }
        Ok(())
    }

    fn fetch(&mut self, id: CoreId) -> Result<(), SimError> {
        let now = self.cycle;
        let pc = self.sv.cores[id].pc;
        let ins = isa::decode(self.memory.bytes(), pc).map_err(|source| SimError::Decode {
            cycle: now,
            core: id,
            source,
        })?;
        if ins.is_meta() {
            if ins.kind == Kind::QTerm {
                let c = &self.sv.cores[id];
                if let Some(qt) = &c.qt {
                    self.qt_exits.push(QtExit {
                        cycle: now,
                        core: id,
                        label: qt.label.clone(),
                        create_offset: qt.create_offset,
                        regs: c.regs,
                    });
                }
            }
            return self
                .sv
                .exec_meta(id, &ins, now, self.memory.bytes())
                .map_err(self.sv_err(id, pc));
        }
        if ins.kind == Kind::Halt && !self.sv.root_halt(id, now).map_err(self.sv_err(id, pc))? {
            return Ok(());
        }
        let c = &self.sv.cores[id];
        let delta = isa::execute_step(&self.sv.view(id), pc, c.cc, &ins, &self.memory).map_err(
            |source| SimError::Exec {
                cycle: now,
                core: id,
                addr: pc,
                source,
            },
        )?;
        let lat = self.latency.of(ins.kind);
        self.sv.emit(
            now,
            id,
            EventKind::FetchExec,
            pc,
            format!("{ins} lat={lat}"),
        );
        let c = &mut self.sv.cores[id];
        c.in_flight = Some(InFlight {
            addr: pc,
            delta,
            commit_at: now + lat - 1,
        });
        c.ready_at = now + lat;
        if lat == 1 {
            self.commit(id)?;
        }
        Ok(())
    }

    /// Advance one control cycle and return its events in canonical order.
    pub fn tick(&mut self) -> Result<Vec<TraceEvent>, SimError> {
        if self.halted {
            return Err(SimError::Halted);
        }
        let now = self.cycle;
        for id in 0..self.sv.cores.len() {
            if self.halted {
                break;
            }
            let c = &self.sv.cores[id];
            if c.in_flight.as_ref().is_some_and(|f| f.commit_at == now) {
                self.commit(id)?;
            }
            let c = &self.sv.cores[id];
            if c.state == CoreStatus::Running
                && c.in_flight.is_none()
                && c.ready_at <= now
                && !self.halted
            {
                self.fetch(id)?;
            }
        }
        if !self.halted {
            self.sv
                .wake_blocked(now)
                .map_err(|source| SimError::Supervisor {
                    cycle: now,
                    core: 0,
                    addr: 0,
                    source,
                })?;
        }
        if self.config.check_invariants {
            self.sv
                .check_invariants()
                .map_err(|message| SimError::Invariant {
                    cycle: now,
                    message,
                })?;
        }
        let busy = self.sv.busy_count();
        self.busy_core_cycles += busy as u64;
        self.idle_core_cycles += (self.sv.cores.len() - busy) as u64;
        self.peak_concurrent = self.peak_concurrent.max(busy);
        let mut events = self.sv.take_events();
        events.sort_by_key(|e| (e.core, e.kind));
        self.trace.extend(events.iter().cloned());
        self.cycle += 1;
        Ok(events)
    }

    /// Tick until the root halts. On error the trace so far stays on the
    /// machine.
    pub fn run(&mut self) -> Result<RunStats, SimError> {
        while !self.halted {
            if self.cycle >= self.config.max_cycles {
                return Err(SimError::Timeout { cycles: self.cycle });
            }
            self.tick()?;
            if !self.halted && !self.sv.cores.iter().any(|c| c.state == CoreStatus::Running) {
                return Err(SimError::Deadlock { cycle: self.cycle });
            }
        }
        Ok(self.stats())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(src: &str, cores: usize) -> Machine {
        let mut m = Machine::from_source(src, MachineConfig::with_cores(cores)).unwrap();
        m.config.check_invariants = true;
        m.run().unwrap();
        m
    }

    #[test]
    fn halt_only_program() {
        let m = run("halt", 1);
        assert_eq!(m.stats().total_cycles, 1);
        assert_eq!(m.stats().cores_rented, 1);
    }

    #[test]
    fn irmovl_latency_contract() {
        let m = run("irmovl $7, %eax\nhalt", 1);
        assert_eq!(m.cycle, 6);
        assert_eq!(m.reg(0, Reg::Eax), 7);
        let fetches: Vec<_> = m
            .trace
            .iter()
            .filter(|e| e.kind == EventKind::FetchExec)
            .collect();
        assert_eq!(fetches.len(), 2);
        assert_eq!((fetches[0].cycle, fetches[1].cycle), (0, 5));
        assert!(fetches[0].detail.ends_with("lat=5"));
    }

    #[test]
    fn plain_create_and_wait() {
        let src = "
    irmovl $5, %eax
C:  QCreate T, %ecx
    irmovl $2, %ecx
    addl %eax, %ecx
T:  QTerm
    QWait C
    halt
";
        let m = run(src, 2);
        assert_eq!(m.reg(0, Reg::Ecx), 7);
        assert_eq!(m.stats().cores_rented, 2);
        assert_eq!(m.stats().peak_concurrent, 2);
    }

    #[test]
    fn ecc_link_transports_flags() {
        let src = "
    irmovl $3, %eax
C:  QCreate T, %ecc
    subl %eax, %eax
T:  QTerm
    irmovl $1, %ebx
    andl %ebx, %ebx
    QWait C
    jne Bad
    irmovl $1, %edx
    halt
Bad: irmovl $2, %edx
    halt
";
        let m = run(src, 2);
        assert_eq!(m.reg(0, Reg::Edx), 1);
        assert_eq!(m.reg(0, Reg::Eax), 3);
    }

    #[test]
    fn timeout_and_deadlock() {
        let mut m = Machine::from_source(
            "L: jmp L",
            MachineConfig {
                max_cycles: 50,
                ..MachineConfig::with_cores(1)
            },
        )
        .unwrap();
        assert_eq!(m.run(), Err(SimError::Timeout { cycles: 50 }));
        assert!(!m.trace.is_empty());

        let mut m = Machine::from_source(
            "C: QCreate T, %eax\nT: QTerm\nhalt",
            MachineConfig::with_cores(1),
        )
        .unwrap();
        assert!(matches!(m.run(), Err(SimError::Deadlock { .. })));
    }

    #[test]
    fn load_errors() {
        let asm = crate::assembler::assemble(".pos 0x100\nhalt").unwrap();
        let cfg = MachineConfig {
            memory: 0x80,
            ..Default::default()
        };
        assert!(matches!(
            Machine::load(&asm.image, cfg.clone(), LatencyTable::default()),
            Err(SimError::ImageTooLarge { .. })
        ));
        let mut img = crate::assembler::assemble("halt").unwrap().image;
        img.entry = 0x1000;
        assert_eq!(
            Machine::load(&img, cfg, LatencyTable::default()).err(),
            Some(SimError::BadEntry { entry: 0x1000 })
        );
    }

    #[test]
    fn latency_file_parsing() {
        let t = LatencyTable::parse("latency.mrmovl=7 # slower\nsv.alloc_cost=2\nlatency.jxx=4\n")
            .unwrap();
        assert_eq!(t.of(Kind::Mrmovl), 7);
        assert_eq!(t.of(Kind::Jne), 4);
        assert_eq!(t.sv.alloc_cost, 2);
        assert!(matches!(
            LatencyTable::parse("latency.frob=1"),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            LatencyTable::parse("sv.meta=0"),
            Err(ConfigError::BadValue { .. })
        ));
        assert_eq!(
            LatencyTable::parse(&LatencyTable::default().to_text()).unwrap(),
            LatencyTable::default()
        );
    }

    #[test]
    fn machine_config_parsing() {
        let c = MachineConfig::parse("cores=4\nmemory=4096\nmax_cycles=99\n").unwrap();
        assert_eq!((c.cores, c.memory, c.max_cycles), (4, 4096, 99));
        assert!(MachineConfig::parse("colors=3").is_err());
        assert!(MachineConfig::parse("cores").is_err());
    }

    #[test]
    fn trace_lines_round_trip() {
        let m = run("irmovl $1, %eax\nhalt", 1);
        let text = trace_log(&m.trace);
        assert_eq!(parse_trace(&text).unwrap(), m.trace);
        assert_eq!(
            text.lines().next().unwrap(),
            "0\t0\t0\tFetchExec\t0x000\tirmovl $1, %eax lat=5"
        );
        assert_eq!(trace_digest(&m.trace).len(), 64);
    }
}
