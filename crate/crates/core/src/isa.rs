//! Extended Y86 instruction set: registers, encodings, decoding and the
//! single-instruction semantics of the executable (non-meta) subset.
//!
//! Words are 32-bit two's-complement and stored little-endian. Registers
//! 0..=7 are the classic Y86 file; `0xD`, `0xE` and `0xF` are the
//! supervisor-routed pseudo-registers `%esv`, `%ecc` and `%eno` (`0xF`
//! doubles as "no register" where the encoding needs a placeholder).

use std::fmt;

use thiserror::Error;

pub type Word = i32;
pub type Addr = u32;

/// Element stride used by the looping modes; also the size of a `.long`.
pub const WORD_BYTES: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Reg {
    Eax = 0,
    Ecx = 1,
    Edx = 2,
    Ebx = 3,
    Esp = 4,
    Ebp = 5,
    Esi = 6,
    Edi = 7,
    Esv = 0xD,
    Ecc = 0xE,
    Eno = 0xF,
}

impl Reg {
    pub const GENERAL: [Reg; 8] = [
        Reg::Eax,
        Reg::Ecx,
        Reg::Edx,
        Reg::Ebx,
        Reg::Esp,
        Reg::Ebp,
        Reg::Esi,
        Reg::Edi,
    ];

    pub fn from_code(code: u8) -> Option<Reg> {
        match code {
            0..=7 => Some(Reg::GENERAL[code as usize]),
            0xD => Some(Reg::Esv),
            0xE => Some(Reg::Ecc),
            0xF => Some(Reg::Eno),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn is_pseudo(self) -> bool {
        matches!(self, Reg::Esv | Reg::Ecc | Reg::Eno)
    }

    /// Index into the plain register file, if this is a general register.
    pub fn index(self) -> Option<usize> {
        (!self.is_pseudo()).then_some(self as usize)
    }

    pub fn name(self) -> &'static str {
        match self {
            Reg::Eax => "eax",
            Reg::Ecx => "ecx",
            Reg::Edx => "edx",
            Reg::Ebx => "ebx",
            Reg::Esp => "esp",
            Reg::Ebp => "ebp",
            Reg::Esi => "esi",
            Reg::Edi => "edi",
            Reg::Esv => "esv",
            Reg::Ecc => "ecc",
            Reg::Eno => "eno",
        }
    }

    pub fn from_name(name: &str) -> Option<Reg> {
        let all = Reg::GENERAL.iter().chain(&[Reg::Esv, Reg::Ecc, Reg::Eno]);
        all.copied().find(|r| r.name() == name)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConditionCodes {
    pub zf: bool,
    pub sf: bool,
    pub of: bool,
}

impl ConditionCodes {
    /// Packed form used when the flags travel through `%ecc`.
    pub fn to_word(self) -> Word {
        (self.zf as Word) << 2 | (self.sf as Word) << 1 | self.of as Word
    }

    pub fn from_word(w: Word) -> Self {
        ConditionCodes {
            zf: w & 4 != 0,
            sf: w & 2 != 0,
            of: w & 1 != 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    Halt,
    Nop,
    Rrmovl,
    Irmovl,
    Rmmovl,
    Mrmovl,
    Addl,
    Subl,
    Andl,
    Xorl,
    Iaddl,
    Jmp,
    Jle,
    Jl,
    Je,
    Jne,
    Jge,
    Jg,
    Call,
    Ret,
    Pushl,
    Popl,
    QCreate,
    QCreateT,
    QCreateF,
    QTerm,
    QWait,
    QAlloc,
    QCallP,
    QWaitI,
    QIntr,
}

impl Kind {
    pub const ALL: [Kind; 31] = [
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
        Kind::Iaddl,
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
        Kind::QCreate,
        Kind::QCreateT,
        Kind::QCreateF,
        Kind::QTerm,
        Kind::QWait,
        Kind::QAlloc,
        Kind::QCallP,
        Kind::QWaitI,
        Kind::QIntr,
    ];

    pub fn opcode(self) -> u8 {
        match self {
            Kind::Halt => 0x00,
            Kind::Nop => 0x10,
            Kind::Rrmovl => 0x20,
            Kind::Irmovl => 0x30,
            Kind::Rmmovl => 0x40,
            Kind::Mrmovl => 0x50,
            Kind::Addl => 0x60,
            Kind::Subl => 0x61,
            Kind::Andl => 0x62,
            Kind::Xorl => 0x63,
            Kind::Jmp => 0x70,
            Kind::Jle => 0x71,
            Kind::Jl => 0x72,
            Kind::Je => 0x73,
            Kind::Jne => 0x74,
            Kind::Jge => 0x75,
            Kind::Jg => 0x76,
            Kind::Call => 0x80,
            Kind::Ret => 0x90,
            Kind::Pushl => 0xa0,
            Kind::Popl => 0xb0,
            Kind::Iaddl => 0xc0,
            Kind::QTerm => 0xf0,
            Kind::QWait => 0xf1,
            Kind::QWaitI => 0xf2,
            Kind::QAlloc => 0xf4,
            Kind::QCreate => 0xf5,
            Kind::QCreateT => 0xf6,
            Kind::QCreateF => 0xf7,
            Kind::QCallP => 0xf8,
            Kind::QIntr => 0xf9,
        }
    }

    pub fn from_opcode(op: u8) -> Option<Kind> {
        Kind::ALL.iter().copied().find(|k| k.opcode() == op)
    }

    /// Encoded size in bytes.
    pub fn length(self) -> u32 {
        match self {
            Kind::Halt | Kind::Nop | Kind::Ret | Kind::QTerm | Kind::QWaitI => 1,
            Kind::Rrmovl
            | Kind::Addl
            | Kind::Subl
            | Kind::Andl
            | Kind::Xorl
            | Kind::Pushl
            | Kind::Popl
            | Kind::QIntr => 2,
            Kind::QAlloc => 3,
            Kind::Jmp
            | Kind::Jle
            | Kind::Jl
            | Kind::Je
            | Kind::Jne
            | Kind::Jge
            | Kind::Jg
            | Kind::Call
            | Kind::QWait
            | Kind::QCallP => 5,
            Kind::Irmovl
            | Kind::Rmmovl
            | Kind::Mrmovl
            | Kind::Iaddl
            | Kind::QCreate
            | Kind::QCreateT
            | Kind::QCreateF => 6,
        }
    }

    pub fn is_meta(self) -> bool {
        self.opcode() >= 0xf0
    }

    pub fn is_jump(self) -> bool {
        matches!(
            self,
            Kind::Jmp | Kind::Jle | Kind::Jl | Kind::Je | Kind::Jne | Kind::Jge | Kind::Jg
        )
    }

    pub fn is_create(self) -> bool {
        matches!(self, Kind::QCreate | Kind::QCreateT | Kind::QCreateF)
    }

    pub fn is_alu(self) -> bool {
        matches!(self, Kind::Addl | Kind::Subl | Kind::Andl | Kind::Xorl)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Kind::Halt => "halt",
            Kind::Nop => "nop",
            Kind::Rrmovl => "rrmovl",
            Kind::Irmovl => "irmovl",
            Kind::Rmmovl => "rmmovl",
            Kind::Mrmovl => "mrmovl",
            Kind::Addl => "addl",
            Kind::Subl => "subl",
            Kind::Andl => "andl",
            Kind::Xorl => "xorl",
            Kind::Iaddl => "iaddl",
            Kind::Jmp => "jmp",
            Kind::Jle => "jle",
            Kind::Jl => "jl",
            Kind::Je => "je",
            Kind::Jne => "jne",
            Kind::Jge => "jge",
            Kind::Jg => "jg",
            Kind::Call => "call",
            Kind::Ret => "ret",
            Kind::Pushl => "pushl",
            Kind::Popl => "popl",
            Kind::QCreate => "QCreate",
            Kind::QCreateT => "QCreateT",
            Kind::QCreateF => "QCreateF",
            Kind::QTerm => "QTerm",
            Kind::QWait => "QWait",
            Kind::QAlloc => "QAlloc",
            Kind::QCallP => "QCallP",
            Kind::QWaitI => "QWaitI",
            Kind::QIntr => "QIntr",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Kind> {
        Kind::ALL
            .iter()
            .copied()
            .find(|k| k.mnemonic().eq_ignore_ascii_case(s))
    }

    /// Operand layout of the register byte, `None` when the kind has none.
    fn reg_slots(self) -> Option<(Slot, Slot)> {
        use Slot::*;
        Some(match self {
            Kind::Rrmovl | Kind::Addl | Kind::Subl | Kind::Andl | Kind::Xorl => (Any, Any),
            Kind::Irmovl | Kind::Iaddl => (Absent, Any),
            Kind::Rmmovl | Kind::Mrmovl => (Any, Base),
            Kind::Pushl | Kind::Popl => (Plain, Absent),
            Kind::QCreate | Kind::QCreateT | Kind::QCreateF => (Absent, Any),
            Kind::QAlloc => (Absent, Plain),
            _ => return None,
        })
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// Which register codes a nibble position accepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    /// General or pseudo register.
    Any,
    /// Memory base: general register, `%esv`, or `f` for absolute addressing.
    Base,
    /// General register only.
    Plain,
    /// Must be `f`.
    Absent,
}

impl Slot {
    fn accepts(self, r: Reg) -> bool {
        match self {
            Slot::Any => true,
            Slot::Base => r != Reg::Ecc,
            Slot::Plain => !r.is_pseudo(),
            Slot::Absent => r == Reg::Eno,
        }
    }
}

/// A decoded instruction. Fields a kind does not use keep their defaults
/// (`Eno` registers, zero immediates) so structural equality is meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub kind: Kind,
    pub ra: Reg,
    pub rb: Reg,
    /// Immediate value or memory displacement.
    pub imm: Word,
    /// Jump/call target, QT terminator, wait target or subroutine header.
    pub addr: Addr,
    /// QAlloc mode code or QIntr service number.
    pub mode: u8,
}

impl Instruction {
    pub fn new(kind: Kind) -> Self {
        Instruction {
            kind,
            ra: Reg::Eno,
            rb: Reg::Eno,
            imm: 0,
            addr: 0,
            mode: 0,
        }
    }

    pub fn with_regs(mut self, ra: Reg, rb: Reg) -> Self {
        self.ra = ra;
        self.rb = rb;
        self
    }

    pub fn with_imm(mut self, imm: Word) -> Self {
        self.imm = imm;
        self
    }

    pub fn with_addr(mut self, addr: Addr) -> Self {
        self.addr = addr;
        self
    }

    pub fn with_mode(mut self, mode: u8) -> Self {
        self.mode = mode;
        self
    }

    pub fn length(&self) -> u32 {
        self.kind.length()
    }

    pub fn is_meta(&self) -> bool {
        self.kind.is_meta()
    }
}

impl fmt::Display for Instruction {
    /// Assembler-compatible rendering with numeric addresses.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.kind.mnemonic();
        let mem = |f: &mut fmt::Formatter<'_>| {
            if self.rb == Reg::Eno {
                write!(f, "{:#x}", self.imm as u32)
            } else {
                write!(f, "{}({})", self.imm, self.rb)
            }
        };
        match self.kind {
            Kind::Halt | Kind::Nop | Kind::Ret | Kind::QTerm | Kind::QWaitI => f.write_str(m),
            Kind::Rrmovl | Kind::Addl | Kind::Subl | Kind::Andl | Kind::Xorl => {
                write!(f, "{m} {}, {}", self.ra, self.rb)
            }
            Kind::Irmovl | Kind::Iaddl => write!(f, "{m} ${}, {}", self.imm, self.rb),
            Kind::Rmmovl => {
                write!(f, "{m} {}, ", self.ra)?;
                mem(f)
            }
            Kind::Mrmovl => {
                write!(f, "{m} ")?;
                mem(f)?;
                write!(f, ", {}", self.ra)
            }
            Kind::Pushl | Kind::Popl => write!(f, "{m} {}", self.ra),
            Kind::QCreate | Kind::QCreateT | Kind::QCreateF => {
                write!(f, "{m} {:#x}, {}", self.addr, self.rb)
            }
            Kind::QWait if self.addr == 0 => write!(f, "{m} *"),
            Kind::QAlloc => write!(f, "{m} Mode{}, {}", self.mode, self.rb),
            Kind::QIntr => write!(f, "{m} {}", self.mode),
            _ => write!(f, "{m} {:#x}", self.addr),
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("invalid opcode {opcode:#04x} at {addr:#x}")]
    InvalidOpcode { addr: Addr, opcode: u8 },
    #[error("invalid register code {code:#x} for {kind} at {addr:#x}")]
    InvalidRegister { addr: Addr, kind: Kind, code: u8 },
    #[error("truncated {kind} at {addr:#x}: need {need} bytes, have {have}")]
    TruncatedInstruction {
        addr: Addr,
        kind: Kind,
        need: u32,
        have: u32,
    },
}

fn le_word(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Decode the instruction starting at `addr` in `bytes`; `bytes` is indexed
/// by absolute address.
pub fn decode(bytes: &[u8], addr: Addr) -> Result<Instruction, DecodeError> {
    let start = addr as usize;
    let Some(&first) = bytes.get(start) else {
        return Err(DecodeError::TruncatedInstruction {
            addr,
            kind: Kind::Halt,
            need: 1,
            have: 0,
        });
    };
    let kind = Kind::from_opcode(first).ok_or(DecodeError::InvalidOpcode {
        addr,
        opcode: first,
    })?;
    let len = kind.length();
    let have = bytes.len().saturating_sub(start) as u32;
    if have < len {
        return Err(DecodeError::TruncatedInstruction {
            addr,
            kind,
            need: len,
            have,
        });
    }
    let body = &bytes[start + 1..start + len as usize];
    let mut ins = Instruction::new(kind);
    let mut rest = body;
    if let Some((slot_a, slot_b)) = kind.reg_slots() {
        let byte = rest[0];
        rest = &rest[1..];
        let parse = |code: u8, slot: Slot| {
            Reg::from_code(code)
                .filter(|r| slot.accepts(*r))
                .ok_or(DecodeError::InvalidRegister { addr, kind, code })
        };
        ins.ra = parse(byte >> 4, slot_a)?;
        ins.rb = parse(byte & 0xf, slot_b)?;
    }
    match kind {
        Kind::Irmovl | Kind::Iaddl | Kind::Rmmovl | Kind::Mrmovl => {
            ins.imm = le_word(rest) as Word;
        }
        Kind::QAlloc | Kind::QIntr => ins.mode = rest[0],
        k if k.is_jump()
            || k.is_create()
            || matches!(k, Kind::Call | Kind::QWait | Kind::QCallP) =>
        {
            ins.addr = le_word(rest);
        }
        _ => {}
    }
    Ok(ins)
}

pub fn encode(ins: &Instruction) -> Vec<u8> {
    let kind = ins.kind;
    let mut out = Vec::with_capacity(kind.length() as usize);
    out.push(kind.opcode());
    if kind.reg_slots().is_some() {
        out.push(ins.ra.code() << 4 | ins.rb.code());
    }
    match kind {
        Kind::Irmovl | Kind::Iaddl | Kind::Rmmovl | Kind::Mrmovl => {
            out.extend_from_slice(&ins.imm.to_le_bytes())
        }
        Kind::QAlloc | Kind::QIntr => out.push(ins.mode),
        k if k.is_jump()
            || k.is_create()
            || matches!(k, Kind::Call | Kind::QWait | Kind::QCallP) =>
        {
            out.extend_from_slice(&ins.addr.to_le_bytes())
        }
        _ => {}
    }
    debug_assert_eq!(out.len() as u32, kind.length());
    out
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ExecError {
    #[error("memory access out of range at {addr:#x}")]
    MemoryOutOfRange { addr: Addr },
    #[error("pseudo-register {0} is not bound in this context")]
    PseudoRegisterUnbound(Reg),
    #[error("{0} is a meta-instruction and is handled by the supervisor")]
    MetaInstruction(Kind),
}

/// Flat little-endian byte memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Memory {
    bytes: Vec<u8>,
}

impl Memory {
    pub fn new(size: usize) -> Self {
        Memory {
            bytes: vec![0; size],
        }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Memory { bytes }
    }

    pub fn size(&self) -> usize {
        self.bytes.len()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.bytes
    }

    fn range(&self, addr: Addr) -> Result<std::ops::Range<usize>, ExecError> {
        let start = addr as usize;
        let end = start + WORD_BYTES as usize;
        if end > self.bytes.len() {
            return Err(ExecError::MemoryOutOfRange { addr });
        }
        Ok(start..end)
    }

    pub fn read_word(&self, addr: Addr) -> Result<Word, ExecError> {
        let r = self.range(addr)?;
        Ok(le_word(&self.bytes[r]) as Word)
    }

    pub fn write_word(&mut self, addr: Addr, value: Word) -> Result<(), ExecError> {
        let r = self.range(addr)?;
        self.bytes[r].copy_from_slice(&value.to_le_bytes());
        Ok(())
    }
}

/// How an operand register is being read; lets pseudo-registers answer
/// differently for an ALU destination than for a plain value or base.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadRole {
    Value,
    AluDest,
    Base,
}

/// Register source for [`execute_step`]. General registers come from the
/// core; pseudo-registers are answered by whoever implements this (the
/// supervisor inside the engine).
pub trait RegisterRead {
    fn read(&self, reg: Reg, role: ReadRole) -> Result<Word, ExecError>;
}

/// Core-local view with no supervisor behind it: `%eno` reads zero, the
/// other pseudo-registers are unbound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CoreState {
    pub regs: [Word; 8],
    pub cc: ConditionCodes,
    pub pc: Addr,
}

impl CoreState {
    pub fn reg(&self, r: Reg) -> Word {
        r.index().map_or(0, |i| self.regs[i])
    }

    pub fn apply(&mut self, delta: &StateDelta, mem: &mut Memory) -> Result<(), ExecError> {
        for &(r, v) in &delta.reg_writes {
            if let Some(i) = r.index() {
                self.regs[i] = v;
            }
        }
        if let Some(cc) = delta.cc {
            self.cc = cc;
        }
        if let Some((a, v)) = delta.mem_write {
            mem.write_word(a, v)?;
        }
        self.pc = delta.next_pc;
        Ok(())
    }
}

impl RegisterRead for CoreState {
    fn read(&self, reg: Reg, _role: ReadRole) -> Result<Word, ExecError> {
        match reg {
            Reg::Eno => Ok(0),
            Reg::Esv | Reg::Ecc => Err(ExecError::PseudoRegisterUnbound(reg)),
            r => Ok(self.reg(r)),
        }
    }
}

/// Effects of one executable instruction. Register writes may name
/// pseudo-registers; the caller routes those.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StateDelta {
    pub reg_writes: Vec<(Reg, Word)>,
    pub mem_write: Option<(Addr, Word)>,
    pub cc: Option<ConditionCodes>,
    pub next_pc: Addr,
    pub halted: bool,
}

fn alu(kind: Kind, a: Word, b: Word) -> (Word, ConditionCodes) {
    let (t, of) = match kind {
        Kind::Addl | Kind::Iaddl => {
            let t = b.wrapping_add(a);
            (t, (a < 0) == (b < 0) && (t < 0) != (a < 0))
        }
        Kind::Subl => {
            let t = b.wrapping_sub(a);
            (t, (a < 0) != (b < 0) && (t < 0) != (b < 0))
        }
        Kind::Andl => (b & a, false),
        Kind::Xorl => (b ^ a, false),
        _ => unreachable!("not an ALU kind"),
    };
    (
        t,
        ConditionCodes {
            zf: t == 0,
            sf: t < 0,
            of,
        },
    )
}

pub fn branch_taken(kind: Kind, cc: ConditionCodes) -> bool {
    let lt = cc.sf != cc.of;
    match kind {
        Kind::Jmp => true,
        Kind::Jle => lt || cc.zf,
        Kind::Jl => lt,
        Kind::Je => cc.zf,
        Kind::Jne => !cc.zf,
        Kind::Jge => !lt,
        Kind::Jg => !lt && !cc.zf,
        _ => false,
    }
}

/// Execute one non-meta instruction at `pc` against a read-only view of the
/// core and memory and return its effects.
pub fn execute_step(
    core: &impl RegisterRead,
    pc: Addr,
    cc: ConditionCodes,
    ins: &Instruction,
    mem: &Memory,
) -> Result<StateDelta, ExecError> {
    let next = pc.wrapping_add(ins.length());
    let mut d = StateDelta {
        next_pc: next,
        ..Default::default()
    };
    let base = |r: Reg| -> Result<Addr, ExecError> {
        let b = if r == Reg::Eno {
            0
        } else {
            core.read(r, ReadRole::Base)?
        };
        Ok((b as u32).wrapping_add(ins.imm as u32))
    };
    let esp = || core.read(Reg::Esp, ReadRole::Value);
    match ins.kind {
        Kind::Halt => {
            d.halted = true;
            d.next_pc = pc;
        }
        Kind::Nop => {}
        Kind::Rrmovl => d
            .reg_writes
            .push((ins.rb, core.read(ins.ra, ReadRole::Value)?)),
        Kind::Irmovl => d.reg_writes.push((ins.rb, ins.imm)),
        Kind::Rmmovl => {
            let a = base(ins.rb)?;
            let v = core.read(ins.ra, ReadRole::Value)?;
            mem.read_word(a)?; // range check before commit
            d.mem_write = Some((a, v));
        }
        Kind::Mrmovl => {
            let a = base(ins.rb)?;
            d.reg_writes.push((ins.ra, mem.read_word(a)?));
        }
        Kind::Addl | Kind::Subl | Kind::Andl | Kind::Xorl => {
            let a = core.read(ins.ra, ReadRole::Value)?;
            let b = core.read(ins.rb, ReadRole::AluDest)?;
            let (t, flags) = alu(ins.kind, a, b);
            d.reg_writes.push((ins.rb, t));
            d.cc = Some(flags);
        }
        Kind::Iaddl => {
            let b = core.read(ins.rb, ReadRole::AluDest)?;
            let (t, flags) = alu(Kind::Iaddl, ins.imm, b);
            d.reg_writes.push((ins.rb, t));
            d.cc = Some(flags);
        }
        k if k.is_jump() => {
            if branch_taken(k, cc) {
                d.next_pc = ins.addr;
            }
        }
        Kind::Call => {
            let sp = (esp()? as u32).wrapping_sub(WORD_BYTES);
            mem.read_word(sp)?;
            d.mem_write = Some((sp, next as Word));
            d.reg_writes.push((Reg::Esp, sp as Word));
            d.next_pc = ins.addr;
        }
        Kind::Ret => {
            let sp = esp()? as u32;
            d.next_pc = mem.read_word(sp)? as u32;
            d.reg_writes
                .push((Reg::Esp, sp.wrapping_add(WORD_BYTES) as Word));
        }
        Kind::Pushl => {
            let v = core.read(ins.ra, ReadRole::Value)?;
            let sp = (esp()? as u32).wrapping_sub(WORD_BYTES);
            mem.read_word(sp)?;
            d.mem_write = Some((sp, v));
            d.reg_writes.push((Reg::Esp, sp as Word));
        }
        Kind::Popl => {
            let sp = esp()? as u32;
            let v = mem.read_word(sp)?;
            d.reg_writes
                .push((Reg::Esp, sp.wrapping_add(WORD_BYTES) as Word));
            d.reg_writes.push((ins.ra, v));
        }
        k => return Err(ExecError::MetaInstruction(k)),
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex(s: &str) -> Vec<u8> {
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
            .collect()
    }

    #[test]
    fn decodes_listing_bytes() {
        let subl = decode(&hex("6103"), 0).unwrap();
        assert_eq!(
            subl,
            Instruction::new(Kind::Subl).with_regs(Reg::Eax, Reg::Ebx)
        );
        assert_eq!(subl.length(), 2);

        let irmovl = decode(&hex("30f304000000"), 0).unwrap();
        assert_eq!(
            irmovl,
            Instruction::new(Kind::Irmovl)
                .with_regs(Reg::Eno, Reg::Ebx)
                .with_imm(4)
        );

        let qalloc = decode(&hex("f4f205"), 0).unwrap();
        assert_eq!(qalloc.kind, Kind::QAlloc);
        assert_eq!((qalloc.rb, qalloc.mode, qalloc.length()), (Reg::Edx, 5, 3));

        let halt = decode(&[0x00], 0).unwrap();
        assert_eq!((halt.kind, halt.length()), (Kind::Halt, 1));
    }

    #[test]
    fn encodes_listing_bytes() {
        let qalloc = Instruction::new(Kind::QAlloc)
            .with_regs(Reg::Eno, Reg::Edx)
            .with_mode(1);
        assert_eq!(encode(&qalloc), hex("f4f201"));
        let mr = Instruction::new(Kind::Mrmovl).with_regs(Reg::Ecx, Reg::Esv);
        assert_eq!(encode(&mr), hex("501d00000000"));
    }

    #[test]
    fn decode_rejects_bad_input() {
        assert!(matches!(
            decode(&[0xff], 0),
            Err(DecodeError::InvalidOpcode {
                addr: 0,
                opcode: 0xff
            })
        ));
        assert!(matches!(
            decode(&hex("6083"), 0),
            Err(DecodeError::InvalidRegister { code: 8, .. })
        ));
        // pushl needs a plain register
        assert!(matches!(
            decode(&hex("a0df"), 0),
            Err(DecodeError::InvalidRegister { code: 0xd, .. })
        ));
        assert!(matches!(
            decode(&hex("30f304"), 0),
            Err(DecodeError::TruncatedInstruction {
                need: 6,
                have: 3,
                ..
            })
        ));
        assert!(matches!(
            decode(&[], 0),
            Err(DecodeError::TruncatedInstruction { .. })
        ));
    }

    #[test]
    fn decode_reads_only_declared_length() {
        let mut bytes = hex("6103");
        bytes.extend_from_slice(&[0xff; 8]);
        assert_eq!(decode(&bytes, 0).unwrap().length(), 2);
        // decoding at an offset
        let bytes = hex("00106103");
        assert_eq!(decode(&bytes, 2).unwrap().kind, Kind::Subl);
    }

    #[test]
    fn subl_sets_flags() {
        let mut st = CoreState::default();
        st.regs[0] = 7;
        st.regs[3] = 10;
        let mem = Memory::new(64);
        let ins = Instruction::new(Kind::Subl).with_regs(Reg::Eax, Reg::Ebx);
        let d = execute_step(&st, 0, st.cc, &ins, &mem).unwrap();
        assert_eq!(d.reg_writes, vec![(Reg::Ebx, 3)]);
        assert_eq!(
            d.cc,
            Some(ConditionCodes {
                zf: false,
                sf: false,
                of: false
            })
        );
        assert_eq!(d.next_pc, 2);
    }

    #[test]
    fn irmovl_leaves_flags() {
        let st = CoreState {
            cc: ConditionCodes {
                zf: true,
                sf: true,
                of: false,
            },
            ..Default::default()
        };
        let ins = Instruction::new(Kind::Irmovl)
            .with_regs(Reg::Eno, Reg::Ebx)
            .with_imm(4);
        let d = execute_step(&st, 0x10, st.cc, &ins, &Memory::new(4)).unwrap();
        assert_eq!(d.reg_writes, vec![(Reg::Ebx, 4)]);
        assert_eq!(d.cc, None);
        assert_eq!(d.next_pc, 0x16);
    }

    #[test]
    fn mrmovl_absolute_load() {
        let mut mem = Memory::new(0x80);
        mem.write_word(0x6c, 5).unwrap();
        let ins = Instruction::new(Kind::Mrmovl)
            .with_regs(Reg::Eax, Reg::Eno)
            .with_imm(0x6c);
        let d = execute_step(&CoreState::default(), 0, Default::default(), &ins, &mem).unwrap();
        assert_eq!(d.reg_writes, vec![(Reg::Eax, 5)]);
        let far = ins.with_imm(0x7e);
        assert_eq!(
            execute_step(&CoreState::default(), 0, Default::default(), &far, &mem),
            Err(ExecError::MemoryOutOfRange { addr: 0x7e })
        );
    }

    #[test]
    fn halt_is_terminal_delta() {
        let d = execute_step(
            &CoreState::default(),
            9,
            Default::default(),
            &Instruction::new(Kind::Halt),
            &Memory::new(0),
        )
        .unwrap();
        assert!(d.halted);
        assert_eq!(d.next_pc, 9);
    }

    #[test]
    fn jumps_follow_flags() {
        let zero = ConditionCodes {
            zf: true,
            ..Default::default()
        };
        let neg = ConditionCodes {
            sf: true,
            ..Default::default()
        };
        assert!(branch_taken(Kind::Je, zero) && !branch_taken(Kind::Jne, zero));
        assert!(branch_taken(Kind::Jl, neg) && !branch_taken(Kind::Jg, neg));
        assert!(branch_taken(Kind::Jle, zero) && branch_taken(Kind::Jge, zero));
        // overflowed subtraction still compares correctly
        let mut st = CoreState::default();
        st.regs[0] = i32::MIN; // A
        st.regs[3] = 1; // B; B - A overflows but B > A
        let ins = Instruction::new(Kind::Subl).with_regs(Reg::Eax, Reg::Ebx);
        let d = execute_step(&st, 0, st.cc, &ins, &Memory::new(0)).unwrap();
        assert!(branch_taken(Kind::Jg, d.cc.unwrap()));
    }

    #[test]
    fn stack_ops_round_trip() {
        let mut st = CoreState::default();
        st.regs[4] = 0x40;
        st.regs[1] = -9;
        let mut mem = Memory::new(0x40);
        let push = Instruction::new(Kind::Pushl).with_regs(Reg::Ecx, Reg::Eno);
        let d = execute_step(&st, 0, st.cc, &push, &mem).unwrap();
        st.apply(&d, &mut mem).unwrap();
        assert_eq!(st.regs[4], 0x3c);
        let pop = Instruction::new(Kind::Popl).with_regs(Reg::Edx, Reg::Eno);
        let d = execute_step(&st, st.pc, st.cc, &pop, &mem).unwrap();
        st.apply(&d, &mut mem).unwrap();
        assert_eq!((st.regs[2], st.regs[4]), (-9, 0x40));

        let call = Instruction::new(Kind::Call).with_addr(0x20);
        let d = execute_step(&st, 4, st.cc, &call, &mem).unwrap();
        st.apply(&d, &mut mem).unwrap();
        assert_eq!((st.pc, mem.read_word(0x3c).unwrap()), (0x20, 9));
        let d = execute_step(&st, st.pc, st.cc, &Instruction::new(Kind::Ret), &mem).unwrap();
        st.apply(&d, &mut mem).unwrap();
        assert_eq!((st.pc, st.regs[4]), (9, 0x40));
    }

    #[test]
    fn pseudo_registers_unbound_without_supervisor() {
        let st = CoreState::default();
        assert_eq!(st.read(Reg::Eno, ReadRole::Value), Ok(0));
        assert!(st.read(Reg::Esv, ReadRole::Value).is_err());
    }

    #[test]
    fn meta_kinds_flagged() {
        for k in Kind::ALL {
            assert_eq!(k.is_meta(), k.opcode() >= 0xf0, "{k}");
            assert_eq!(Kind::from_opcode(k.opcode()), Some(k));
            assert_eq!(Kind::from_mnemonic(k.mnemonic()), Some(k));
        }
        assert!(Kind::QIntr.is_meta() && !Kind::Iaddl.is_meta());
    }
}
