//! Processor-level control: core pool, quasi-thread (QT) forest, latches,
//! pseudo-register routing, allocation modes and service cores.
//!
//! The supervisor is passive. The engine calls into it when a core fetches a
//! meta-instruction, when an executable instruction touches a
//! pseudo-register, and once per tick to wake blocked cores.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::engine::{EventKind, TraceEvent};
use crate::isa::{
    self, Addr, ConditionCodes, ExecError, Instruction, Kind, ReadRole, Reg, RegisterRead,
    StateDelta, Word,
};

pub type CoreId = usize;

/// Bytes per vector element walked by the mass modes.
pub const STRIDE: Word = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CoreStatus {
    Sleeping,
    PreAllocated,
    Running,
    Blocked,
    WaitingKernel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WaitTarget {
    Offset(Addr),
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockReason {
    /// QCreate/QCallP found no free core.
    NoCore,
    /// QIntr found its service core busy.
    ServiceBusy(u8),
    /// QWait on a latch that is not valid yet.
    Wait(WaitTarget),
    /// Mode1 owner held at its QCreate while the single child runs.
    ModeHold,
    /// Root reached `halt` with children still live.
    HaltJoin,
}

impl std::fmt::Display for BlockReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockReason::NoCore => f.write_str("no-core"),
            BlockReason::ServiceBusy(s) => write!(f, "service-busy {s}"),
            BlockReason::Wait(WaitTarget::All) => f.write_str("wait *"),
            BlockReason::Wait(WaitTarget::Offset(o)) => write!(f, "wait {o:#x}"),
            BlockReason::ModeHold => f.write_str("mode-hold"),
            BlockReason::HaltJoin => f.write_str("halt-join"),
        }
    }
}

impl BlockReason {
    /// Resource blocks trace as Block events, everything else as Wait events.
    pub fn is_resource(self) -> bool {
        matches!(self, BlockReason::NoCore | BlockReason::ServiceBusy(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QtState {
    Running,
    Blocked,
    Waiting,
    Terminated,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QTRecord {
    pub create_offset: Addr,
    pub term_addr: Addr,
    pub link_reg: Reg,
    pub core: CoreId,
    /// Core of the parent QT; `None` for the root and service QTs.
    pub parent_qt: Option<CoreId>,
    pub label: String,
    pub state: QtState,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Latch {
    pub qt_offset: Addr,
    pub value: Word,
    pub cc_value: Option<ConditionCodes>,
    pub valid: bool,
    /// First cycle at which the parent may observe the value.
    pub valid_from: u64,
    /// Global creation sequence of the producing QT.
    pub seq: u64,
    pub child: CoreId,
    pub link_reg: Reg,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeState {
    pub mode: u8,
    pub owner: CoreId,
    pub remaining: u32,
    pub element_addr: Word,
    pub stride: Word,
    pub preallocated: BTreeSet<CoreId>,
    pub adder: Word,
    /// The QCreate this mode drives, fixed by the first create after QAlloc.
    pub create_offset: Option<Addr>,
    pub live_children: BTreeSet<CoreId>,
}

/// Tie from a mode-created child back to the mode that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModeBinding {
    pub owner: CoreId,
    pub mode: u8,
    pub element_addr: Word,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ServiceSlot {
    pub id: u8,
    /// Address of the QWaitI the service re-arms at, once it has run it.
    pub wait_addr: Option<Addr>,
}

/// An executable instruction between fetch and commit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InFlight {
    pub addr: Addr,
    pub delta: StateDelta,
    pub commit_at: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoreRecord {
    pub id: CoreId,
    pub state: CoreStatus,
    pub regs: [Word; 8],
    pub cc: ConditionCodes,
    pub pc: Addr,
    pub parent: Option<CoreId>,
    pub children: BTreeSet<CoreId>,
    pub qt: Option<QTRecord>,
    pub alloc_success: bool,
    /// Latch slots of this core's children, in creation order.
    pub latches: Vec<Latch>,
    /// QT offsets this core has created, called or skipped.
    pub known_offsets: BTreeSet<Addr>,
    pub mode: Option<ModeState>,
    pub mode_binding: Option<ModeBinding>,
    /// `%esv` value outside a live mode: a finished mode's result, or 0
    /// after a failed QAlloc.
    pub esv_result: Option<Word>,
    pub kernel_mode: bool,
    pub service: Option<ServiceSlot>,
    /// Number of children created so far, for QT labels.
    pub child_count: u32,
    pub ready_at: u64,
    /// First cycle a released core may be handed out again.
    pub free_at: u64,
    pub block: Option<BlockReason>,
    pub block_since: u64,
    pub in_flight: Option<InFlight>,
}

impl CoreRecord {
    fn new(id: CoreId) -> Self {
        CoreRecord {
            id,
            state: CoreStatus::Sleeping,
            regs: [0; 8],
            cc: ConditionCodes::default(),
            pc: 0,
            parent: None,
            children: BTreeSet::new(),
            qt: None,
            alloc_success: false,
            latches: Vec::new(),
            known_offsets: BTreeSet::new(),
            mode: None,
            mode_binding: None,
            esv_result: None,
            kernel_mode: false,
            service: None,
            child_count: 0,
            ready_at: 0,
            free_at: 0,
            block: None,
            block_since: 0,
            in_flight: None,
        }
    }

    pub fn reg(&self, r: Reg) -> Word {
        r.index().map_or(0, |i| self.regs[i])
    }

    pub fn label(&self) -> &str {
        self.qt.as_ref().map_or("-", |q| q.label.as_str())
    }

    /// Holds a QT: counted as busy by the engine.
    pub fn is_busy(&self) -> bool {
        matches!(self.state, CoreStatus::Running | CoreStatus::Blocked)
    }

    fn reset_links(&mut self) {
        self.parent = None;
        self.qt = None;
        self.mode_binding = None;
        self.kernel_mode = false;
        self.block = None;
        self.in_flight = None;
        self.esv_result = None;
        self.alloc_success = false;
        self.child_count = 0;
        self.latches.clear();
        self.known_offsets.clear();
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum SvError {
    #[error("QWait on {addr:#x}, which this QT never created")]
    NoSuchChild { addr: Addr },
    #[error("QCallP target {addr:#x} does not hold a QCreate header")]
    BadSubroutineHeader { addr: Addr },
    #[error("QTerm executed by a core with no parent")]
    OrphanTermination,
    #[error("QTerm at {found:#x}, but this QT terminates at {expected:#x}")]
    StrayTerm { expected: Addr, found: Addr },
    #[error("QTerm while the QT still has live children")]
    LiveChildren,
    #[error("unknown allocation mode {0}")]
    UnknownMode(u8),
    #[error("QAlloc while a mode owned by this core is still live")]
    ModeActive,
    #[error("no service registered under id {0}")]
    NoSuchService(u8),
    #[error("QWaitI executed outside a service core")]
    NotAService,
    #[error("halt executed by a non-root QT")]
    NonRootHalt,
    #[error("service registration: {0}")]
    BadService(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Supervisor timing constants, in control cycles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SvConstants {
    /// QCreate/QCallP issue to the child's first fetch.
    pub create_dispatch: u64,
    /// Parent occupancy of QCreate/QCallP.
    pub clone_cost: u64,
    /// QTerm to latch visibility and waiter release.
    pub term_latch_cost: u64,
    /// Minimum QWait issue to resume when the QWait had to block.
    pub wait_release_cost: u64,
    /// QAlloc occupancy.
    pub alloc_cost: u64,
    /// QIntr issue to the service core's first fetch.
    pub intr_dispatch_cost: u64,
    /// Base cost of any other meta-instruction.
    pub meta: u64,
}

impl Default for SvConstants {
    fn default() -> Self {
        SvConstants {
            create_dispatch: 1,
            clone_cost: 1,
            term_latch_cost: 1,
            wait_release_cost: 1,
            alloc_cost: 4,
            intr_dispatch_cost: 2,
            meta: 1,
        }
    }
}

/// Label character for the k-th child (1-based).
pub fn seq_label(k: u32) -> String {
    match k {
        1..=9 => char::from(b'0' + k as u8).to_string(),
        10..=35 => char::from(b'a' + (k - 10) as u8).to_string(),
        _ => format!("[{k}]"),
    }
}

#[derive(Clone, Debug)]
pub struct Supervisor {
    pub cores: Vec<CoreRecord>,
    pub consts: SvConstants,
    /// Upper bound on the cores a Mode5 QAlloc requests.
    pub mode5_cap: u32,
    pub rented_ever: BTreeSet<CoreId>,
    pub halted: bool,
    seq: u64,
    events: Vec<TraceEvent>,
}

impl Supervisor {
    pub fn new(n_cores: usize, consts: SvConstants, mode5_cap: u32) -> Self {
        Supervisor {
            cores: (0..n_cores).map(CoreRecord::new).collect(),
            consts,
            mode5_cap,
            rented_ever: BTreeSet::new(),
            halted: false,
            seq: 0,
            events: Vec::new(),
        }
    }

    /// Start core 0 as the root QT.
    pub fn boot(&mut self, entry: Addr) {
        let root = &mut self.cores[0];
        root.state = CoreStatus::Running;
        root.pc = entry;
        root.qt = Some(QTRecord {
            create_offset: entry,
            term_addr: entry,
            link_reg: Reg::Eno,
            core: 0,
            parent_qt: None,
            label: "0".into(),
            state: QtState::Running,
        });
        self.rented_ever.insert(0);
        self.emit(0, 0, EventKind::Wake, entry, String::new());
        self.emit(0, 0, EventKind::QTStart, entry, "root".into());
    }

    pub fn take_events(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.events)
    }

    pub(crate) fn emit(
        &mut self,
        cycle: u64,
        core: CoreId,
        kind: EventKind,
        addr: Addr,
        detail: String,
    ) {
        let qt_label = self.cores[core].label().to_string();
        self.events.push(TraceEvent {
            cycle,
            core,
            qt_label,
            kind,
            addr,
            detail,
        });
    }

    pub fn busy_count(&self) -> usize {
        self.cores.iter().filter(|c| c.is_busy()).count()
    }

    fn free_general(&self, now: u64) -> impl Iterator<Item = CoreId> + '_ {
        self.cores
            .iter()
            .filter(move |c| {
                c.state == CoreStatus::Sleeping && c.service.is_none() && c.free_at <= now
            })
            .map(|c| c.id)
    }

    fn block(&mut self, core: CoreId, reason: BlockReason, now: u64) {
        let addr = self.cores[core].pc;
        let c = &mut self.cores[core];
        c.state = CoreStatus::Blocked;
        c.block = Some(reason);
        c.block_since = now;
        if let Some(qt) = c.qt.as_mut() {
            qt.state = if reason.is_resource() {
                QtState::Blocked
            } else {
                QtState::Waiting
            };
        }
        let kind = if reason.is_resource() {
            EventKind::BlockStart
        } else {
            EventKind::WaitStart
        };
        self.emit(now, core, kind, addr, reason.to_string());
    }

    fn unblock(&mut self, core: CoreId, now: u64, ready_at: u64) {
        let c = &mut self.cores[core];
        let Some(reason) = c.block.take() else {
            return;
        };
        c.state = CoreStatus::Running;
        c.ready_at = ready_at;
        if let Some(qt) = c.qt.as_mut() {
            qt.state = QtState::Running;
        }
        let addr = c.pc;
        let kind = if reason.is_resource() {
            EventKind::BlockEnd
        } else {
            EventKind::WaitEnd
        };
        self.emit(now, core, kind, addr, reason.to_string());
    }

    /// Host API: make `core` a service core that runs its setup code from
    /// `entry` and then parks at its QWaitI.
    pub fn register_service(
        &mut self,
        core: CoreId,
        service_id: u8,
        entry: Addr,
    ) -> Result<(), SvError> {
        if core == 0 || core >= self.cores.len() {
            return Err(SvError::BadService(format!(
                "core {core} cannot host a service"
            )));
        }
        if self
            .cores
            .iter()
            .any(|c| c.service.is_some_and(|s| s.id == service_id))
        {
            return Err(SvError::BadService(format!(
                "service {service_id} already registered"
            )));
        }
        let c = &mut self.cores[core];
        if c.state != CoreStatus::Sleeping || c.service.is_some() {
            return Err(SvError::BadService(format!("core {core} is not free")));
        }
        c.state = CoreStatus::Running;
        c.pc = entry;
        c.kernel_mode = true;
        c.service = Some(ServiceSlot {
            id: service_id,
            wait_addr: None,
        });
        c.qt = Some(QTRecord {
            create_offset: entry,
            term_addr: entry,
            link_reg: Reg::Eno,
            core,
            parent_qt: None,
            label: format!("S{service_id}"),
            state: QtState::Running,
        });
        self.emit(0, core, EventKind::Wake, entry, String::new());
        self.emit(
            0,
            core,
            EventKind::QTStart,
            entry,
            format!("service={service_id}"),
        );
        Ok(())
    }

    /// Route a meta-instruction fetched by `core` at cycle `now`.
    pub fn exec_meta(
        &mut self,
        core: CoreId,
        ins: &Instruction,
        now: u64,
        mem: &[u8],
    ) -> Result<(), SvError> {
        match ins.kind {
            Kind::QCreate => self.qcreate(core, ins, now),
            Kind::QCreateT => self.qcreate_conditional(core, ins, true, now),
            Kind::QCreateF => self.qcreate_conditional(core, ins, false, now),
            Kind::QCallP => self.qcallp(core, ins.addr, now, mem),
            Kind::QTerm => self.qterm(core, now),
            Kind::QWait => {
                let target = if ins.addr == 0 {
                    WaitTarget::All
                } else {
                    WaitTarget::Offset(ins.addr)
                };
                self.qwait(core, target, now)
            }
            Kind::QAlloc => self.qalloc(core, ins.mode, ins.rb, now),
            Kind::QIntr => self.qintr(core, ins.mode, now),
            Kind::QWaitI => self.qwaiti(core, now),
            k => Err(SvError::Exec(ExecError::MetaInstruction(k))),
        }
    }

    fn meta_event(&mut self, core: CoreId, now: u64, ins_text: String, outcome: &str) {
        let addr = self.cores[core].pc;
        let detail = if outcome.is_empty() {
            ins_text
        } else {
            format!("{ins_text} {outcome}")
        };
        self.emit(now, core, EventKind::MetaExec, addr, detail);
    }

    /// Hand `child` a new QT under `parent`.
    #[allow(clippy::too_many_arguments)]
    fn spawn(
        &mut self,
        parent: CoreId,
        child: CoreId,
        create_offset: Addr,
        term_addr: Addr,
        link_reg: Reg,
        start_pc: Addr,
        binding: Option<ModeBinding>,
        now: u64,
    ) {
        self.seq += 1;
        let seq = self.seq;
        let p = &mut self.cores[parent];
        p.child_count += 1;
        p.children.insert(child);
        p.known_offsets.insert(create_offset);
        let direct = binding.is_some_and(|b| b.mode == 1);
        if !direct {
            p.latches.push(Latch {
                qt_offset: create_offset,
                value: 0,
                cc_value: None,
                valid: false,
                valid_from: u64::MAX,
                seq,
                child,
                link_reg,
            });
        }
        let label = format!("{}{}", p.label(), seq_label(p.child_count));
        let (regs, cc) = (p.regs, p.cc);
        let was_sleeping = self.cores[child].state == CoreStatus::Sleeping;
        let c = &mut self.cores[child];
        c.state = CoreStatus::Running;
        c.regs = regs;
        c.cc = cc;
        c.pc = start_pc;
        c.parent = Some(parent);
        c.mode_binding = binding;
        c.ready_at = now + self.consts.create_dispatch;
        c.qt = Some(QTRecord {
            create_offset,
            term_addr,
            link_reg,
            core: child,
            parent_qt: Some(parent),
            label,
            state: QtState::Running,
        });
        self.rented_ever.insert(child);
        if was_sleeping {
            self.emit(now, child, EventKind::Wake, start_pc, String::new());
        }
        self.emit(
            now,
            child,
            EventKind::QTStart,
            start_pc,
            format!("parent={parent} offset={create_offset:#x}"),
        );
    }

    pub fn qcreate(&mut self, core: CoreId, ins: &Instruction, now: u64) -> Result<(), SvError> {
        let pc = self.cores[core].pc;
        let bound = self.cores[core]
            .mode
            .as_ref()
            .map(|m| (m.mode, m.create_offset));
        match bound {
            Some((mode, offset)) if offset.is_none_or(|o| o == pc) => {
                self.cores[core].mode.as_mut().unwrap().create_offset = Some(pc);
                self.mode_create(core, mode, ins, now)
            }
            _ => {
                let Some(child) = self.free_general(now).next() else {
                    self.meta_event(core, now, ins.to_string(), "no core");
                    self.block(core, BlockReason::NoCore, now);
                    return Ok(());
                };
                self.meta_event(core, now, ins.to_string(), &format!("-> core {child}"));
                self.spawn(
                    core,
                    child,
                    pc,
                    ins.addr,
                    ins.rb,
                    pc + ins.length(),
                    None,
                    now,
                );
                let c = &mut self.cores[core];
                c.pc = ins.addr + Kind::QTerm.length();
                c.ready_at = now + self.consts.clone_cost;
                Ok(())
            }
        }
    }

    /// One step of a mode-driven QCreate loop.
    fn mode_create(
        &mut self,
        owner: CoreId,
        mode: u8,
        ins: &Instruction,
        now: u64,
    ) -> Result<(), SvError> {
        let pc = self.cores[owner].pc;
        let m = self.cores[owner].mode.as_ref().unwrap();
        let slot = m.preallocated.iter().copied().find(|&id| {
            self.cores[id].state == CoreStatus::PreAllocated && self.cores[id].free_at <= now
        });
        let Some(child) = slot else {
            self.meta_event(owner, now, ins.to_string(), "stall");
            self.cores[owner].ready_at = now + self.consts.meta;
            return Ok(());
        };
        let element_addr = m.element_addr;
        self.meta_event(
            owner,
            now,
            ins.to_string(),
            &format!("-> core {child} esv={element_addr:#x}"),
        );
        let binding = ModeBinding {
            owner,
            mode,
            element_addr,
        };
        self.spawn(
            owner,
            child,
            pc,
            ins.addr,
            ins.rb,
            pc + ins.length(),
            Some(binding),
            now,
        );
        let m = self.cores[owner].mode.as_mut().unwrap();
        m.live_children.insert(child);
        if mode == 1 {
            // owner is held here until the child terminates
            self.block(owner, BlockReason::ModeHold, now);
            return Ok(());
        }
        m.element_addr = m.element_addr.wrapping_add(m.stride);
        m.remaining -= 1;
        let done = m.remaining == 0;
        if done {
            // cores with nothing left to run go back to the pool
            let pre: Vec<CoreId> = m.preallocated.iter().copied().collect();
            let idle: Vec<CoreId> = pre
                .into_iter()
                .filter(|&id| self.cores[id].state == CoreStatus::PreAllocated)
                .collect();
            for id in idle {
                self.release_prealloc(owner, id, now);
            }
            self.cores[owner].pc = ins.addr + Kind::QTerm.length();
        }
        self.cores[owner].ready_at = now + self.consts.clone_cost;
        Ok(())
    }

    fn release_prealloc(&mut self, owner: CoreId, id: CoreId, now: u64) {
        if let Some(m) = self.cores[owner].mode.as_mut() {
            m.preallocated.remove(&id);
        }
        let c = &mut self.cores[id];
        c.state = CoreStatus::Sleeping;
        c.free_at = c.free_at.max(now + 1);
        let pc = c.pc;
        self.emit(now, id, EventKind::Sleep, pc, "released".into());
    }

    pub fn qcreate_conditional(
        &mut self,
        core: CoreId,
        ins: &Instruction,
        want: bool,
        now: u64,
    ) -> Result<(), SvError> {
        if self.cores[core].alloc_success == want {
            return self.qcreate(core, ins, now);
        }
        self.meta_event(core, now, ins.to_string(), "skipped");
        let c = &mut self.cores[core];
        c.known_offsets.insert(c.pc);
        c.pc = ins.addr + Kind::QTerm.length();
        c.ready_at = now + self.consts.meta;
        Ok(())
    }

    pub fn qcallp(
        &mut self,
        core: CoreId,
        target: Addr,
        now: u64,
        mem: &[u8],
    ) -> Result<(), SvError> {
        let header = match isa::decode(mem, target) {
            Ok(h) if h.kind == Kind::QCreate => h,
            _ => return Err(SvError::BadSubroutineHeader { addr: target }),
        };
        let text = format!("QCallP {target:#x}");
        let Some(child) = self.free_general(now).next() else {
            self.meta_event(core, now, text, "no core");
            self.block(core, BlockReason::NoCore, now);
            return Ok(());
        };
        self.meta_event(core, now, text, &format!("-> core {child}"));
        self.spawn(
            core,
            child,
            target,
            header.addr,
            header.rb,
            target + header.length(),
            None,
            now,
        );
        let c = &mut self.cores[core];
        c.pc += Kind::QCallP.length();
        c.ready_at = now + self.consts.clone_cost;
        Ok(())
    }

    fn link_value(
        &self,
        core: CoreId,
        link: Reg,
    ) -> Result<(Word, Option<ConditionCodes>), SvError> {
        let c = &self.cores[core];
        Ok(match link {
            Reg::Eno => (0, None),
            Reg::Ecc => (c.cc.to_word(), Some(c.cc)),
            Reg::Esv => (self.view(core).read(Reg::Esv, ReadRole::Value)?, None),
            r => (c.reg(r), None),
        })
    }

    fn deliver(
        &mut self,
        core: CoreId,
        link: Reg,
        value: Word,
        cc: Option<ConditionCodes>,
    ) -> Result<(), SvError> {
        match link {
            Reg::Eno => Ok(()),
            Reg::Ecc => {
                if let Some(cc) = cc {
                    self.cores[core].cc = cc;
                }
                Ok(())
            }
            r => self.write_reg(core, r, value),
        }
    }

    pub fn qterm(&mut self, core: CoreId, now: u64) -> Result<(), SvError> {
        let pc = self.cores[core].pc;
        if self.cores[core].parent.is_none() {
            return self.service_rearm(core, now);
        }
        let qt = self.cores[core].qt.clone().expect("child core holds a QT");
        if qt.term_addr != pc {
            return Err(SvError::StrayTerm {
                expected: qt.term_addr,
                found: pc,
            });
        }
        if !self.cores[core].children.is_empty() {
            return Err(SvError::LiveChildren);
        }
        let parent = self.cores[core].parent.unwrap();
        let (value, cc_value) = self.link_value(core, qt.link_reg)?;
        self.meta_event(core, now, "QTerm".into(), "");
        let visible = now + self.consts.term_latch_cost;
        let binding = self.cores[core].mode_binding;

        if let Some(b) = binding.filter(|b| b.mode == 1) {
            self.deliver(parent, qt.link_reg, value, cc_value)?;
            self.emit(
                now,
                core,
                EventKind::LatchWrite,
                pc,
                format!(
                    "parent={parent} key={:#x} direct value={value}",
                    qt.create_offset
                ),
            );
            let m = self.cores[b.owner].mode.as_mut().unwrap();
            m.live_children.remove(&core);
            m.element_addr = m.element_addr.wrapping_add(m.stride);
            m.remaining -= 1;
            let done = m.remaining == 0;
            self.end_qt(core, now);
            if done {
                self.release_prealloc(b.owner, core, now);
                self.finish_mode(b.owner);
                let o = &mut self.cores[b.owner];
                o.pc = qt.term_addr + Kind::QTerm.length();
            } else {
                self.park_prealloc(core, now);
            }
            self.unblock(b.owner, now, visible);
            return Ok(());
        }

        let parent_rec = &mut self.cores[parent];
        if let Some(l) = parent_rec
            .latches
            .iter_mut()
            .find(|l| l.child == core && !l.valid)
        {
            l.valid = true;
            l.valid_from = visible;
            l.value = value;
            l.cc_value = cc_value;
        }
        self.emit(
            now,
            core,
            EventKind::LatchWrite,
            pc,
            format!("parent={parent} key={:#x} value={value}", qt.create_offset),
        );
        self.end_qt(core, now);
        match binding {
            Some(b) => {
                let m = self.cores[b.owner].mode.as_mut().unwrap();
                m.live_children.remove(&core);
                let (remaining, live) = (m.remaining, m.live_children.is_empty());
                if remaining > 0 {
                    self.park_prealloc(core, now);
                } else {
                    self.release_prealloc(b.owner, core, now);
                    if live {
                        self.finish_mode(b.owner);
                    }
                }
            }
            None => self.sleep(core, now),
        }
        Ok(())
    }

    /// Detach a terminating child from the forest.
    fn end_qt(&mut self, core: CoreId, now: u64) {
        let pc = self.cores[core].pc;
        if let Some(qt) = self.cores[core].qt.as_mut() {
            qt.state = QtState::Terminated;
        }
        self.emit(now, core, EventKind::QTEnd, pc, String::new());
        if let Some(p) = self.cores[core].parent {
            self.cores[p].children.remove(&core);
        }
        let c = &mut self.cores[core];
        c.reset_links();
        c.free_at = now + 1;
    }

    fn park_prealloc(&mut self, core: CoreId, now: u64) {
        let c = &mut self.cores[core];
        c.state = CoreStatus::PreAllocated;
        c.free_at = now + 1;
    }

    fn sleep(&mut self, core: CoreId, now: u64) {
        let c = &mut self.cores[core];
        c.state = CoreStatus::Sleeping;
        c.free_at = now + 1;
        let pc = c.pc;
        self.emit(now, core, EventKind::Sleep, pc, String::new());
    }

    fn finish_mode(&mut self, owner: CoreId) {
        if let Some(m) = self.cores[owner].mode.take() {
            self.cores[owner].esv_result = Some(if m.mode == 5 { m.adder } else { m.element_addr });
        }
    }

    fn service_rearm(&mut self, core: CoreId, now: u64) -> Result<(), SvError> {
        let slot = self.cores[core].service.ok_or(SvError::OrphanTermination)?;
        let Some(wait_addr) = slot.wait_addr else {
            return Err(SvError::OrphanTermination);
        };
        if !self.cores[core].children.is_empty() {
            return Err(SvError::LiveChildren);
        }
        self.meta_event(core, now, "QTerm".into(), "re-arm");
        self.emit(
            now,
            core,
            EventKind::QTEnd,
            self.cores[core].pc,
            String::new(),
        );
        let c = &mut self.cores[core];
        c.state = CoreStatus::WaitingKernel;
        c.pc = wait_addr + Kind::QWaitI.length();
        c.free_at = now + 1;
        c.latches.clear();
        Ok(())
    }

    pub fn qwaiti(&mut self, core: CoreId, now: u64) -> Result<(), SvError> {
        if self.cores[core].service.is_none() {
            return Err(SvError::NotAService);
        }
        let pc = self.cores[core].pc;
        self.meta_event(core, now, "QWaitI".into(), "");
        self.emit(now, core, EventKind::QTEnd, pc, String::new());
        let c = &mut self.cores[core];
        c.service.as_mut().unwrap().wait_addr = Some(pc);
        c.state = CoreStatus::WaitingKernel;
        c.pc = pc + Kind::QWaitI.length();
        c.free_at = now + 1;
        Ok(())
    }

    pub fn qintr(&mut self, core: CoreId, service_id: u8, now: u64) -> Result<(), SvError> {
        let svc = self
            .cores
            .iter()
            .find(|c| c.service.is_some_and(|s| s.id == service_id))
            .map(|c| c.id)
            .ok_or(SvError::NoSuchService(service_id))?;
        let text = format!("QIntr {service_id}");
        let s = &self.cores[svc];
        if s.state != CoreStatus::WaitingKernel || s.free_at > now {
            self.meta_event(core, now, text, "busy");
            self.block(core, BlockReason::ServiceBusy(service_id), now);
            return Ok(());
        }
        self.meta_event(core, now, text, &format!("-> core {svc}"));
        let (regs, cc) = (self.cores[core].regs, self.cores[core].cc);
        let s = &mut self.cores[svc];
        s.regs = regs;
        s.cc = cc;
        s.state = CoreStatus::Running;
        s.kernel_mode = true;
        s.ready_at = now + self.consts.intr_dispatch_cost;
        s.qt = Some(QTRecord {
            create_offset: s.pc,
            term_addr: s.pc,
            link_reg: Reg::Eno,
            core: svc,
            parent_qt: None,
            label: format!("S{service_id}"),
            state: QtState::Running,
        });
        let spc = s.pc;
        self.emit(
            now,
            svc,
            EventKind::IntrDispatch,
            spc,
            format!("from={core}"),
        );
        self.emit(
            now,
            svc,
            EventKind::QTStart,
            spc,
            format!("service={service_id}"),
        );
        let c = &mut self.cores[core];
        c.pc += Kind::QIntr.length();
        c.ready_at = now + self.consts.meta;
        Ok(())
    }

    fn latches_ready(&self, core: CoreId, target: WaitTarget, at: u64) -> bool {
        self.cores[core]
            .latches
            .iter()
            .filter(|l| match target {
                WaitTarget::All => true,
                WaitTarget::Offset(o) => l.qt_offset == o,
            })
            .all(|l| l.valid && l.valid_from <= at)
            && self.mode_quiet(core, target)
    }

    /// A live mode still creating under `target` keeps the wait open.
    fn mode_quiet(&self, core: CoreId, target: WaitTarget) -> bool {
        match &self.cores[core].mode {
            Some(m) if m.remaining > 0 => match target {
                WaitTarget::All => m.create_offset.is_none(),
                WaitTarget::Offset(o) => m.create_offset != Some(o),
            },
            _ => true,
        }
    }

    /// Consume matching latches in creation order, delivering each value.
    fn consume(&mut self, core: CoreId, target: WaitTarget, now: u64) -> Result<(), SvError> {
        let (taken, kept): (Vec<Latch>, Vec<Latch>) = std::mem::take(&mut self.cores[core].latches)
            .into_iter()
            .partition(|l| match target {
                WaitTarget::All => true,
                WaitTarget::Offset(o) => l.qt_offset == o,
            });
        self.cores[core].latches = kept;
        let pc = self.cores[core].pc;
        for l in taken {
            self.deliver(core, l.link_reg, l.value, l.cc_value)?;
            self.emit(
                now,
                core,
                EventKind::LatchRead,
                pc,
                format!("key={:#x} child={} value={}", l.qt_offset, l.child, l.value),
            );
        }
        Ok(())
    }

    pub fn qwait(&mut self, core: CoreId, target: WaitTarget, now: u64) -> Result<(), SvError> {
        let text = match target {
            WaitTarget::All => "QWait *".to_string(),
            WaitTarget::Offset(o) => {
                if !self.cores[core].known_offsets.contains(&o) {
                    return Err(SvError::NoSuchChild { addr: o });
                }
                format!("QWait {o:#x}")
            }
        };
        if self.latches_ready(core, target, now) {
            self.meta_event(core, now, text, "ready");
            self.consume(core, target, now)?;
            let c = &mut self.cores[core];
            c.pc += Kind::QWait.length();
            c.ready_at = now + self.consts.meta;
        } else {
            self.meta_event(core, now, text, "wait");
            self.block(core, BlockReason::Wait(target), now);
        }
        Ok(())
    }

    pub fn qalloc(
        &mut self,
        core: CoreId,
        mode: u8,
        count_reg: Reg,
        now: u64,
    ) -> Result<(), SvError> {
        if mode != 1 && mode != 5 {
            return Err(SvError::UnknownMode(mode));
        }
        if self.cores[core].mode.is_some() {
            return Err(SvError::ModeActive);
        }
        let n = self.cores[core].reg(count_reg);
        let request = match mode {
            1 => 1,
            _ => (n.max(0) as u32).min(self.mode5_cap) as usize,
        };
        let free: Vec<CoreId> = self.free_general(now).take(request).collect();
        let ok = n >= 1 && request >= 1 && free.len() == request;
        let text = format!("QAlloc Mode{mode}, {count_reg}");
        self.meta_event(
            core,
            now,
            text,
            &if ok {
                format!("ok n={n} cores={request}")
            } else {
                format!("failed n={n}")
            },
        );
        let c = &mut self.cores[core];
        c.alloc_success = ok;
        c.pc += Kind::QAlloc.length();
        c.ready_at = now + self.consts.alloc_cost;
        if !ok {
            c.esv_result = Some(0);
            return Ok(());
        }
        c.esv_result = None;
        c.mode = Some(ModeState {
            mode,
            owner: core,
            remaining: n as u32,
            element_addr: 0,
            stride: STRIDE,
            preallocated: free.iter().copied().collect(),
            adder: 0,
            create_offset: None,
            live_children: BTreeSet::new(),
        });
        for id in free {
            self.cores[id].state = CoreStatus::PreAllocated;
            self.rented_ever.insert(id);
            let pc = self.cores[id].pc;
            self.emit(
                now,
                id,
                EventKind::Wake,
                pc,
                format!("prealloc owner={core}"),
            );
        }
        Ok(())
    }

    /// Root `halt`: join outstanding children first. Returns true once the
    /// machine may halt.
    pub fn root_halt(&mut self, core: CoreId, now: u64) -> Result<bool, SvError> {
        if core != 0 {
            return Err(SvError::NonRootHalt);
        }
        let c = &self.cores[core];
        if c.children.is_empty() && c.latches.is_empty() {
            return Ok(true);
        }
        if self.latches_ready(core, WaitTarget::All, now) {
            self.consume(core, WaitTarget::All, now)?;
            return Ok(true);
        }
        self.block(core, BlockReason::HaltJoin, now);
        Ok(false)
    }

    /// Phase two of a tick: release blocked cores whose condition holds for
    /// the next cycle.
    pub fn wake_blocked(&mut self, now: u64) -> Result<(), SvError> {
        let next = now + 1;
        let mut free = self.free_general(next).count();
        let mut claimed: BTreeSet<u8> = BTreeSet::new();
        for id in 0..self.cores.len() {
            let Some(reason) = self.cores[id].block else {
                continue;
            };
            match reason {
                BlockReason::NoCore if free > 0 => {
                    free -= 1;
                    self.unblock(id, now, next);
                }
                BlockReason::ServiceBusy(s) if !claimed.contains(&s) => {
                    let available = self.cores.iter().any(|c| {
                        c.service.is_some_and(|x| x.id == s)
                            && c.state == CoreStatus::WaitingKernel
                            && c.free_at <= next
                    });
                    if available {
                        claimed.insert(s);
                        self.unblock(id, now, next);
                    }
                }
                BlockReason::Wait(target) if self.latches_ready(id, target, next) => {
                    self.consume(id, target, now)?;
                    self.cores[id].pc += Kind::QWait.length();
                    let ready =
                        next.max(self.cores[id].block_since + self.consts.wait_release_cost);
                    self.unblock(id, now, ready);
                }
                BlockReason::HaltJoin
                    if self.cores[id].children.is_empty()
                        && self.latches_ready(id, WaitTarget::All, next) =>
                {
                    let ready =
                        next.max(self.cores[id].block_since + self.consts.wait_release_cost);
                    self.unblock(id, now, ready);
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn view(&self, core: CoreId) -> CoreView<'_> {
        CoreView { sv: self, core }
    }

    /// Write a register, routing pseudo-registers.
    pub fn write_reg(&mut self, core: CoreId, reg: Reg, value: Word) -> Result<(), SvError> {
        if let Some(i) = reg.index() {
            self.cores[core].regs[i] = value;
            return Ok(());
        }
        match reg {
            Reg::Eno => Ok(()),
            Reg::Ecc => {
                self.cores[core].cc = ConditionCodes::from_word(value);
                Ok(())
            }
            _ => self.write_esv(core, value),
        }
    }

    fn write_esv(&mut self, core: CoreId, value: Word) -> Result<(), SvError> {
        if let Some(m) = self.cores[core].mode.as_mut() {
            m.element_addr = value;
            return Ok(());
        }
        if let Some(b) = self.cores[core].mode_binding {
            if b.mode == 5 {
                if let Some(m) = self.cores[b.owner].mode.as_mut() {
                    m.adder = m.adder.wrapping_add(value);
                }
            }
            return Ok(());
        }
        match self.cores[core].esv_result.as_mut() {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(SvError::Exec(ExecError::PseudoRegisterUnbound(Reg::Esv))),
        }
    }

    /// Forest and conservation checks; returns the first violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.cores.len();
        let mut counts = [0usize; 5];
        for c in &self.cores {
            counts[c.state as usize] += 1;
        }
        if counts.iter().sum::<usize>() != n {
            return Err("core states do not add up to the core count".into());
        }
        for c in &self.cores {
            if let Some(p) = c.parent {
                if !self.cores[p].children.contains(&c.id) {
                    return Err(format!(
                        "core {} names parent {p}, which does not list it",
                        c.id
                    ));
                }
            }
            for &ch in &c.children {
                if self.cores[ch].parent != Some(c.id) {
                    return Err(format!(
                        "core {} lists child {ch}, which names another parent",
                        c.id
                    ));
                }
            }
            let idle = matches!(c.state, CoreStatus::Sleeping | CoreStatus::PreAllocated);
            if idle && (c.parent.is_some() || !c.children.is_empty() || c.qt.is_some()) {
                return Err(format!("idle core {} still holds links", c.id));
            }
            // walking up must terminate within n steps
            let mut cur = c.parent;
            let mut steps = 0;
            while let Some(p) = cur {
                steps += 1;
                if steps > n {
                    return Err(format!("cycle in parent links through core {}", c.id));
                }
                cur = self.cores[p].parent;
            }
        }
        Ok(())
    }
}

/// Register view of one core with pseudo-registers answered by the
/// supervisor.
pub struct CoreView<'a> {
    sv: &'a Supervisor,
    core: CoreId,
}

impl RegisterRead for CoreView<'_> {
    fn read(&self, reg: Reg, role: ReadRole) -> Result<Word, ExecError> {
        let c = &self.sv.cores[self.core];
        match reg {
            Reg::Eno => Ok(0),
            Reg::Ecc => Ok(c.cc.to_word()),
            Reg::Esv => {
                if let Some(m) = &c.mode {
                    return Ok(m.element_addr);
                }
                if let Some(b) = c.mode_binding {
                    // Mode5 destinations start from zero so the write half
                    // of an ALU op carries only the summand to the adder
                    return Ok(if b.mode == 5 && role == ReadRole::AluDest {
                        0
                    } else {
                        b.element_addr
                    });
                }
                c.esv_result
                    .ok_or(ExecError::PseudoRegisterUnbound(Reg::Esv))
            }
            r => Ok(c.reg(r)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seq_labels() {
        assert_eq!(seq_label(1), "1");
        assert_eq!(seq_label(9), "9");
        assert_eq!(seq_label(10), "a");
        assert_eq!(seq_label(35), "z");
        assert_eq!(seq_label(36), "[36]");
    }

    #[test]
    fn qcreate_clones_registers_and_links() {
        let mut sv = Supervisor::new(3, SvConstants::default(), 30);
        sv.boot(0);
        sv.cores[0].regs = [1, 2, 3, 4, 5, 6, 7, 8];
        sv.cores[0].cc = ConditionCodes {
            zf: true,
            sf: false,
            of: true,
        };
        let ins = Instruction::new(Kind::QCreate)
            .with_regs(Reg::Eno, Reg::Ecx)
            .with_addr(0x20);
        sv.qcreate(0, &ins, 0).unwrap();
        let child = &sv.cores[1];
        assert_eq!(child.regs, sv.cores[0].regs);
        assert_eq!(child.cc, sv.cores[0].cc);
        assert_eq!(child.pc, 6);
        assert_eq!(child.parent, Some(0));
        assert_eq!(child.qt.as_ref().unwrap().label, "01");
        assert_eq!(sv.cores[0].pc, 0x21);
        assert!(sv.cores[0].children.contains(&1));
        sv.check_invariants().unwrap();
    }

    #[test]
    fn empty_pool_blocks_parent() {
        let mut sv = Supervisor::new(1, SvConstants::default(), 30);
        sv.boot(0);
        let ins = Instruction::new(Kind::QCreate)
            .with_regs(Reg::Eno, Reg::Ecx)
            .with_addr(0x20);
        sv.qcreate(0, &ins, 0).unwrap();
        assert_eq!(sv.cores[0].state, CoreStatus::Blocked);
        assert_eq!(sv.cores[0].pc, 0);
    }

    #[test]
    fn mode5_allocation_is_all_or_nothing() {
        let mut sv = Supervisor::new(4, SvConstants::default(), 30);
        sv.boot(0);
        sv.cores[0].regs[Reg::Edx.index().unwrap()] = 30;
        sv.qalloc(0, 5, Reg::Edx, 0).unwrap();
        assert!(!sv.cores[0].alloc_success);
        assert!(sv.cores[1..]
            .iter()
            .all(|c| c.state == CoreStatus::Sleeping));
        assert_eq!(sv.view(0).read(Reg::Esv, ReadRole::Value), Ok(0));

        let mut sv = Supervisor::new(32, SvConstants::default(), 30);
        sv.boot(0);
        sv.cores[0].regs[Reg::Edx.index().unwrap()] = 30;
        sv.qalloc(0, 5, Reg::Edx, 0).unwrap();
        assert!(sv.cores[0].alloc_success);
        let pre = sv
            .cores
            .iter()
            .filter(|c| c.state == CoreStatus::PreAllocated)
            .count();
        assert_eq!(pre, 30);
        assert!(matches!(
            sv.qalloc(0, 3, Reg::Edx, 0),
            Err(SvError::UnknownMode(3))
        ));
    }

    #[test]
    fn pseudo_registers() {
        let mut sv = Supervisor::new(2, SvConstants::default(), 30);
        sv.boot(0);
        assert_eq!(sv.view(0).read(Reg::Eno, ReadRole::Value), Ok(0));
        assert!(sv.view(0).read(Reg::Esv, ReadRole::Value).is_err());
        assert!(sv.write_reg(0, Reg::Esv, 1).is_err());
        sv.write_reg(0, Reg::Eno, 99).unwrap();
        assert_eq!(sv.view(0).read(Reg::Eno, ReadRole::Value), Ok(0));
        sv.write_reg(0, Reg::Ecc, 0b101).unwrap();
        assert_eq!(
            sv.cores[0].cc,
            ConditionCodes {
                zf: true,
                sf: false,
                of: true
            }
        );
    }

    #[test]
    fn mode1_child_sees_strided_element() {
        let mut sv = Supervisor::new(2, SvConstants::default(), 30);
        sv.boot(0);
        sv.cores[0].regs[Reg::Edx.index().unwrap()] = 3;
        sv.qalloc(0, 1, Reg::Edx, 0).unwrap();
        sv.write_reg(0, Reg::Esv, 0x100).unwrap();
        sv.cores[0].pc = 0x13;
        let ins = Instruction::new(Kind::QCreateT)
            .with_regs(Reg::Eno, Reg::Eax)
            .with_addr(0x21);
        for k in 0..3 {
            sv.cores[0].ready_at = 0;
            sv.qcreate_conditional(0, &ins, true, 10 * k).unwrap();
            let child = sv.cores[0].children.iter().copied().next().unwrap();
            let esv = sv.view(child).read(Reg::Esv, ReadRole::Base).unwrap();
            assert_eq!(esv, 0x100 + 4 * k as Word);
            sv.cores[child].pc = 0x21;
            sv.qterm(child, 10 * k + 5).unwrap();
        }
        assert!(sv.cores[0].mode.is_none());
        assert_eq!(sv.cores[0].pc, 0x22);
        assert_eq!(sv.cores[1].state, CoreStatus::Sleeping);
        sv.check_invariants().unwrap();
    }

    #[test]
    fn qwait_unknown_offset_is_an_error() {
        let mut sv = Supervisor::new(2, SvConstants::default(), 30);
        sv.boot(0);
        assert_eq!(
            sv.qwait(0, WaitTarget::Offset(0x40), 0),
            Err(SvError::NoSuchChild { addr: 0x40 })
        );
    }

    #[test]
    fn root_qterm_is_orphan() {
        let mut sv = Supervisor::new(1, SvConstants::default(), 30);
        sv.boot(0);
        assert_eq!(sv.qterm(0, 0), Err(SvError::OrphanTermination));
    }
}
