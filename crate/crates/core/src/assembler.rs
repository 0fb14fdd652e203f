//! Two-pass assembler for extended Y86 source, plus a disassembler.
//!
//! Grammar, one statement per line:
//! `[label:] (directive | mnemonic [operands]) [# comment]`.
//! Directives are `.pos N`, `.long V` and `.align N`.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::isa::{self, Addr, DecodeError, Instruction, Kind, Reg};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}, column {column}: {message}")]
    ParseError {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: unknown label `{label}`")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: label `{label}` already defined on line {first}")]
    DuplicateLabel {
        line: usize,
        label: String,
        first: usize,
    },
    #[error("line {line}: {message}")]
    OperandTypeMismatch { line: usize, message: String },
    #[error("line {line}: value {value} does not fit in {bits} bits")]
    RangeError { line: usize, value: i64, bits: u32 },
    #[error("line {line}: code at {addr:#x} overlaps earlier output")]
    Overlap { line: usize, addr: Addr },
}

/// One parsed source line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceLine {
    pub number: usize,
    pub text: String,
    pub label: Option<String>,
    pub statement: Option<Statement>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Statement {
    Instruction { kind: Kind, operands: Vec<Operand> },
    Pos(i64),
    Long(Value),
    Align(i64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Value {
    Num(i64),
    Label(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Operand {
    Reg(Reg),
    /// `$value`
    Imm(Value),
    /// bare number or label
    Bare(Value),
    /// `disp(%reg)`
    Mem {
        disp: Value,
        base: Reg,
    },
    /// `*`, the wait-for-all target
    All,
}

impl Operand {
    fn describe(&self) -> &'static str {
        match self {
            Operand::Reg(_) => "register",
            Operand::Imm(_) => "immediate",
            Operand::Bare(_) => "address",
            Operand::Mem { .. } => "memory operand",
            Operand::All => "`*`",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymbolTable {
    map: BTreeMap<String, Addr>,
}

impl SymbolTable {
    pub fn get(&self, label: &str) -> Option<Addr> {
        self.map.get(label).copied()
    }

    pub fn insert(&mut self, label: impl Into<String>, addr: Addr) {
        self.map.insert(label.into(), addr);
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Addr)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Label whose address is exactly `addr`, first by name.
    pub fn label_at(&self, addr: Addr) -> Option<&str> {
        self.iter().find(|&(_, a)| a == addr).map(|(l, _)| l)
    }

    /// Sidecar format: `LABEL 0xADDR` per line, sorted by address then name.
    pub fn to_sidecar(&self) -> String {
        let mut entries: Vec<_> = self.iter().collect();
        entries.sort_by_key(|&(l, a)| (a, l));
        entries
            .into_iter()
            .map(|(l, a)| format!("{l} {a:#x}\n"))
            .collect()
    }

    pub fn from_sidecar(text: &str) -> Result<Self, String> {
        let mut table = SymbolTable::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(label), Some(addr), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(format!("symbol line {}: expected `LABEL 0xADDR`", i + 1));
            };
            let addr = parse_number(addr)
                .filter(|v| (0..=u32::MAX as i64).contains(v))
                .ok_or_else(|| format!("symbol line {}: bad address `{addr}`", i + 1))?;
            table.insert(label, addr as Addr);
        }
        Ok(table)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub base: Addr,
    pub bytes: Vec<u8>,
}

impl Segment {
    pub fn end(&self) -> Addr {
        self.base + self.bytes.len() as Addr
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryImage {
    pub segments: Vec<Segment>,
    pub entry: Addr,
}

impl MemoryImage {
    pub fn from_flat(bytes: Vec<u8>, entry: Addr) -> Self {
        let segments = if bytes.is_empty() {
            Vec::new()
        } else {
            vec![Segment { base: 0, bytes }]
        };
        MemoryImage { segments, entry }
    }

    pub fn is_empty(&self) -> bool {
        self.segments.iter().all(|s| s.bytes.is_empty())
    }

    /// One past the highest byte written.
    pub fn end(&self) -> Addr {
        self.segments.iter().map(Segment::end).max().unwrap_or(0)
    }

    /// Bytes from address 0 to [`end`](Self::end), gaps zero-filled.
    pub fn flatten(&self) -> Vec<u8> {
        let mut out = vec![0; self.end() as usize];
        for s in &self.segments {
            out[s.base as usize..s.end() as usize].copy_from_slice(&s.bytes);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ListingLine {
    pub addr: Option<Addr>,
    pub bytes: Vec<u8>,
    pub source: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Listing {
    pub lines: Vec<ListingLine>,
}

impl fmt::Display for Listing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            let hex: String = l.bytes.iter().map(|b| format!("{b:02x}")).collect();
            match l.addr {
                Some(a) => write!(f, "0x{a:03x}: ")?,
                None => write!(f, "{:7}", "")?,
            }
            writeln!(f, "{hex:<12} | {}", l.source)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assembly {
    pub image: MemoryImage,
    pub symbols: SymbolTable,
    pub listing: Listing,
}

pub fn parse_number(s: &str) -> Option<i64> {
    let (neg, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = if let Some(hex) = digits
        .strip_prefix("0x")
        .or_else(|| digits.strip_prefix("0X"))
    {
        i64::from_str_radix(hex, 16).ok()?
    } else if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
        digits.parse().ok()?
    } else {
        return None;
    };
    Some(if neg { -v } else { v })
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

struct LineParser<'a> {
    line: usize,
    text: &'a str,
}

impl LineParser<'_> {
    fn err(&self, fragment: &str, message: impl Into<String>) -> AsmError {
        // fragment is a subslice of text whenever we have one
        let column = (fragment.as_ptr() as usize)
            .checked_sub(self.text.as_ptr() as usize)
            .filter(|&o| o <= self.text.len())
            .map_or(1, |o| o + 1);
        AsmError::ParseError {
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn value(&self, s: &str) -> Result<Value, AsmError> {
        if let Some(n) = parse_number(s) {
            Ok(Value::Num(n))
        } else if is_ident(s) {
            Ok(Value::Label(s.to_string()))
        } else {
            Err(self.err(s, format!("expected a number or label, found `{s}`")))
        }
    }

    fn register(&self, s: &str) -> Result<Reg, AsmError> {
        s.strip_prefix('%')
            .and_then(Reg::from_name)
            .ok_or_else(|| self.err(s, format!("unknown register `{s}`")))
    }

    fn operand(&self, s: &str) -> Result<Operand, AsmError> {
        if s == "*" {
            return Ok(Operand::All);
        }
        if s.starts_with('%') {
            return Ok(Operand::Reg(self.register(s)?));
        }
        if let Some(rest) = s.strip_prefix('$') {
            return Ok(Operand::Imm(self.value(rest.trim())?));
        }
        if let Some(open) = s.find('(') {
            let Some(inner) = s[open + 1..].strip_suffix(')') else {
                return Err(self.err(s, "unterminated memory operand"));
            };
            let disp = s[..open].trim();
            let disp = if disp.is_empty() {
                Value::Num(0)
            } else {
                self.value(disp)?
            };
            let base = self.register(inner.trim())?;
            return Ok(Operand::Mem { disp, base });
        }
        Ok(Operand::Bare(self.value(s)?))
    }

    fn parse(&self) -> Result<SourceLine, AsmError> {
        let code = self.text.split('#').next().unwrap_or("");
        let mut rest = code.trim();
        let mut label = None;
        if let Some(colon) = rest.find(':') {
            let name = rest[..colon].trim();
            if !is_ident(name) {
                return Err(self.err(name, format!("invalid label `{name}`")));
            }
            label = Some(name.to_string());
            rest = rest[colon + 1..].trim();
        }
        let statement = if rest.is_empty() {
            None
        } else {
            let split = rest.find(char::is_whitespace).unwrap_or(rest.len());
            let (head, tail) = (&rest[..split], rest[split..].trim());
            let operands: Vec<&str> = if tail.is_empty() {
                Vec::new()
            } else {
                tail.split(',').map(str::trim).collect()
            };
            if let Some(directive) = head.strip_prefix('.') {
                Some(self.directive(head, directive, &operands)?)
            } else {
                let kind = Kind::from_mnemonic(head)
                    .ok_or_else(|| self.err(head, format!("unknown mnemonic `{head}`")))?;
                let operands = operands
                    .iter()
                    .map(|o| {
                        if o.is_empty() {
                            Err(self.err(o, "empty operand"))
                        } else {
                            self.operand(o)
                        }
                    })
                    .collect::<Result<_, _>>()?;
                Some(Statement::Instruction { kind, operands })
            }
        };
        Ok(SourceLine {
            number: self.line,
            text: self.text.to_string(),
            label,
            statement,
        })
    }

    fn directive(&self, head: &str, name: &str, ops: &[&str]) -> Result<Statement, AsmError> {
        let [arg] = ops else {
            return Err(self.err(head, format!(".{name} takes exactly one operand")));
        };
        let number =
            || parse_number(arg).ok_or_else(|| self.err(arg, format!(".{name} needs a number")));
        match name {
            "pos" => Ok(Statement::Pos(number()?)),
            "align" => Ok(Statement::Align(number()?)),
            "long" => Ok(Statement::Long(self.value(arg.trim_start_matches('$'))?)),
            _ => Err(self.err(head, format!("unknown directive `{head}`"))),
        }
    }
}

pub fn parse_line(number: usize, text: &str) -> Result<SourceLine, AsmError> {
    LineParser { line: number, text }.parse()
}

fn check_range(line: usize, v: i64, signed_ok: bool) -> Result<u32, AsmError> {
    let lo = if signed_ok { i32::MIN as i64 } else { 0 };
    if v < lo || v > u32::MAX as i64 {
        return Err(AsmError::RangeError {
            line,
            value: v,
            bits: 32,
        });
    }
    Ok(v as u32)
}

fn resolve(symbols: &SymbolTable, line: usize, v: &Value) -> Result<i64, AsmError> {
    match v {
        Value::Num(n) => Ok(*n),
        Value::Label(l) => symbols
            .get(l)
            .map(i64::from)
            .ok_or_else(|| AsmError::UnknownLabel {
                line,
                label: l.clone(),
            }),
    }
}

fn mode_code(line: usize, op: &Operand) -> Result<i64, AsmError> {
    let bad = || AsmError::OperandTypeMismatch {
        line,
        message: format!("expected a mode (Mode1..Mode255), found {}", op.describe()),
    };
    match op {
        Operand::Bare(Value::Num(n)) | Operand::Imm(Value::Num(n)) => Ok(*n),
        Operand::Bare(Value::Label(l)) => {
            let digits = l
                .get(..4)
                .filter(|p| p.eq_ignore_ascii_case("mode"))
                .map(|_| &l[4..])
                .ok_or_else(bad)?;
            digits.parse().map_err(|_| bad())
        }
        _ => Err(bad()),
    }
}

/// Build the instruction for a statement. With `symbols = None` (pass 1)
/// labels resolve to 0 so only shape errors surface.
fn build(
    line: usize,
    kind: Kind,
    ops: &[Operand],
    symbols: Option<&SymbolTable>,
) -> Result<Instruction, AsmError> {
    let mismatch = |message: String| AsmError::OperandTypeMismatch { line, message };
    let val = |v: &Value| match symbols {
        Some(s) => resolve(s, line, v),
        None => Ok(0),
    };
    let arity = |n: usize| {
        if ops.len() == n {
            Ok(())
        } else {
            Err(mismatch(format!(
                "{kind} takes {n} operand(s), found {}",
                ops.len()
            )))
        }
    };
    let reg = |op: &Operand| match op {
        Operand::Reg(r) => Ok(*r),
        other => Err(mismatch(format!(
            "{kind} expects a register, found {}",
            other.describe()
        ))),
    };
    let plain = |op: &Operand| {
        let r = reg(op)?;
        if r.is_pseudo() {
            return Err(mismatch(format!(
                "{kind} needs a general register, found {r}"
            )));
        }
        Ok(r)
    };
    let value = |op: &Operand, signed: bool| -> Result<u32, AsmError> {
        match op {
            Operand::Imm(v) | Operand::Bare(v) => check_range(line, val(v)?, signed),
            other => Err(mismatch(format!(
                "{kind} expects a value, found {}",
                other.describe()
            ))),
        }
    };
    let address = |op: &Operand| match op {
        Operand::Bare(v) => check_range(line, val(v)?, false),
        other => Err(mismatch(format!(
            "{kind} expects an address or label, found {}",
            other.describe()
        ))),
    };
    let memory = |op: &Operand| -> Result<(Reg, u32), AsmError> {
        match op {
            Operand::Mem { disp, base } => {
                if *base == Reg::Ecc {
                    return Err(mismatch(format!("{base} cannot be a base register")));
                }
                Ok((*base, check_range(line, val(disp)?, true)?))
            }
            Operand::Bare(v) => Ok((Reg::Eno, check_range(line, val(v)?, true)?)),
            other => Err(mismatch(format!(
                "{kind} expects a memory operand, found {}",
                other.describe()
            ))),
        }
    };

    let ins = Instruction::new(kind);
    Ok(match kind {
        Kind::Halt | Kind::Nop | Kind::Ret | Kind::QTerm | Kind::QWaitI => {
            arity(0)?;
            ins
        }
        Kind::Rrmovl | Kind::Addl | Kind::Subl | Kind::Andl | Kind::Xorl => {
            arity(2)?;
            ins.with_regs(reg(&ops[0])?, reg(&ops[1])?)
        }
        Kind::Irmovl | Kind::Iaddl => {
            arity(2)?;
            ins.with_regs(Reg::Eno, reg(&ops[1])?)
                .with_imm(value(&ops[0], true)? as i32)
        }
        Kind::Rmmovl => {
            arity(2)?;
            let (base, disp) = memory(&ops[1])?;
            ins.with_regs(reg(&ops[0])?, base).with_imm(disp as i32)
        }
        Kind::Mrmovl => {
            arity(2)?;
            let (base, disp) = memory(&ops[0])?;
            ins.with_regs(reg(&ops[1])?, base).with_imm(disp as i32)
        }
        Kind::Pushl | Kind::Popl => {
            arity(1)?;
            ins.with_regs(plain(&ops[0])?, Reg::Eno)
        }
        Kind::QCreate | Kind::QCreateT | Kind::QCreateF => {
            arity(2)?;
            ins.with_regs(Reg::Eno, reg(&ops[1])?)
                .with_addr(address(&ops[0])?)
        }
        Kind::QWait => {
            arity(1)?;
            match &ops[0] {
                Operand::All => ins.with_addr(0),
                op => ins.with_addr(address(op)?),
            }
        }
        Kind::QAlloc => {
            arity(2)?;
            let mode = mode_code(line, &ops[0])?;
            if !(0..=255).contains(&mode) {
                return Err(AsmError::RangeError {
                    line,
                    value: mode,
                    bits: 8,
                });
            }
            ins.with_regs(Reg::Eno, plain(&ops[1])?)
                .with_mode(mode as u8)
        }
        Kind::QIntr => {
            arity(1)?;
            let service = match &ops[0] {
                Operand::Imm(v) | Operand::Bare(v) => val(v)?,
                other => {
                    return Err(mismatch(format!(
                        "QIntr expects a service number, found {}",
                        other.describe()
                    )))
                }
            };
            if !(0..=255).contains(&service) {
                return Err(AsmError::RangeError {
                    line,
                    value: service,
                    bits: 8,
                });
            }
            ins.with_mode(service as u8)
        }
        // jumps, call, QCallP
        _ => {
            arity(1)?;
            ins.with_addr(address(&ops[0])?)
        }
    })
}

pub fn assemble(source: &str) -> Result<Assembly, AsmError> {
    let lines = source
        .lines()
        .enumerate()
        .map(|(i, t)| parse_line(i + 1, t))
        .collect::<Result<Vec<_>, _>>()?;

    // pass 1: addresses and labels
    let mut symbols = SymbolTable::default();
    let mut defined_on: BTreeMap<String, usize> = BTreeMap::new();
    let mut lc: i64 = 0;
    let mut sizes = Vec::with_capacity(lines.len());
    let mut entry = None;
    for l in &lines {
        let at = lc;
        match &l.statement {
            Some(Statement::Pos(n)) => {
                lc = i64::from(check_range(l.number, *n, false)?);
                entry.get_or_insert(lc as Addr);
            }
            Some(Statement::Align(n)) => {
                if *n <= 0 {
                    return Err(AsmError::RangeError {
                        line: l.number,
                        value: *n,
                        bits: 32,
                    });
                }
                lc = (lc + n - 1) / n * n;
            }
            Some(Statement::Long(_)) => lc += 4,
            Some(Statement::Instruction { kind, operands }) => {
                let ins = build(l.number, *kind, operands, None)?;
                lc += i64::from(ins.length());
            }
            None => {}
        }
        if lc > u32::MAX as i64 + 1 {
            return Err(AsmError::RangeError {
                line: l.number,
                value: lc,
                bits: 32,
            });
        }
        if l.statement.is_some() {
            entry.get_or_insert(0);
        }
        // a label names the address where its own statement lands
        let label_addr = match &l.statement {
            Some(Statement::Pos(_) | Statement::Align(_)) => lc,
            _ => at,
        };
        if let Some(name) = &l.label {
            if let Some(&first) = defined_on.get(name) {
                return Err(AsmError::DuplicateLabel {
                    line: l.number,
                    label: name.clone(),
                    first,
                });
            }
            defined_on.insert(name.clone(), l.number);
            symbols.insert(name.clone(), label_addr as Addr);
        }
        sizes.push(lc - at);
    }

    // pass 2: emit
    let mut segments: Vec<Segment> = Vec::new();
    let mut listing = Listing::default();
    let mut lc: Addr = 0;
    for (l, size) in lines.iter().zip(sizes) {
        let mut bytes = Vec::new();
        match &l.statement {
            Some(Statement::Pos(n)) => lc = *n as Addr,
            Some(Statement::Align(n)) => lc = ((lc as i64 + n - 1) / n * n) as Addr,
            Some(Statement::Long(v)) => {
                let w = check_range(l.number, resolve(&symbols, l.number, v)?, true)?;
                bytes = w.to_le_bytes().to_vec();
            }
            Some(Statement::Instruction { kind, operands }) => {
                let ins = build(l.number, *kind, operands, Some(&symbols))?;
                bytes = isa::encode(&ins);
                debug_assert_eq!(bytes.len() as i64, size, "pass sizes disagree");
            }
            None => {}
        }
        let shows_addr = l.label.is_some() || l.statement.is_some();
        listing.lines.push(ListingLine {
            addr: shows_addr.then_some(lc),
            bytes: bytes.clone(),
            source: l.text.trim_end().to_string(),
        });
        if !bytes.is_empty() {
            match segments.last_mut() {
                Some(seg) if seg.end() == lc => seg.bytes.extend_from_slice(&bytes),
                _ => segments.push(Segment {
                    base: lc,
                    bytes: bytes.clone(),
                }),
            }
            lc += bytes.len() as Addr;
        }
    }

    // overlap check on the sorted segment list
    let mut sorted: Vec<&Segment> = segments.iter().collect();
    sorted.sort_by_key(|s| s.base);
    for w in sorted.windows(2) {
        if w[1].base < w[0].end() {
            let line = lines
                .iter()
                .zip(&listing.lines)
                .find(|(_, ll)| ll.addr == Some(w[1].base) && !ll.bytes.is_empty())
                .map_or(0, |(l, _)| l.number);
            return Err(AsmError::Overlap {
                line,
                addr: w[1].base,
            });
        }
    }

    Ok(Assembly {
        image: MemoryImage {
            segments,
            entry: entry.unwrap_or(0),
        },
        symbols,
        listing,
    })
}

/// Decode up to `count` instructions from `start`, stopping early at the end
/// of the bytes. Returns what was decoded plus the error that stopped it.
pub fn disassemble_lines(
    bytes: &[u8],
    start: Addr,
    count: usize,
) -> (Vec<(Addr, Instruction)>, Option<DecodeError>) {
    let mut out = Vec::new();
    let mut pc = start;
    while out.len() < count && (pc as usize) < bytes.len() {
        match isa::decode(bytes, pc) {
            Ok(ins) => {
                out.push((pc, ins));
                pc += ins.length();
            }
            Err(e) => return (out, Some(e)),
        }
    }
    (out, None)
}

/// Disassemble into assembler-compatible text (numeric addresses, a leading
/// `.pos`). Re-assembling the text reproduces the decoded bytes.
pub fn disassemble(image: &MemoryImage, start: Addr, count: usize) -> Result<String, DecodeError> {
    let bytes = image.flatten();
    let (lines, err) = disassemble_lines(&bytes, start, count);
    if let Some(e) = err {
        return Err(e);
    }
    let mut text = format!(".pos {start:#x}\n");
    for (_, ins) in lines {
        text.push_str(&format!("{ins}\n"));
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex(bytes: &[u8]) -> String {
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn line_bytes(asm: &Assembly, needle: &str) -> (Addr, String) {
        let l = asm
            .listing
            .lines
            .iter()
            .find(|l| l.source.contains(needle))
            .unwrap_or_else(|| panic!("no line containing {needle}"));
        (l.addr.unwrap(), hex(&l.bytes))
    }

    #[test]
    fn empty_source() {
        let a = assemble("").unwrap();
        assert!(a.image.is_empty());
        assert!(a.symbols.is_empty());
        assert!(a.listing.lines.is_empty());
        let a = assemble("# only a comment\n\n").unwrap();
        assert!(a.image.is_empty());
    }

    #[test]
    fn qalloc_and_pseudo_register_bytes() {
        let src = "
    .pos 0x0e
    QAlloc Mode1, %edx # allocate %edx times
    rrmovl %ecx, %esv#Write array address
QT1LoopC:QCreateT QT1LoopT, %eax
    mrmovl (%esv), %ecx
    addl %ecx, %eax
QT1LoopT:QTerm
";
        let a = assemble(src).unwrap();
        assert_eq!(line_bytes(&a, "QAlloc"), (0x0e, "f4f201".into()));
        assert_eq!(line_bytes(&a, "rrmovl"), (0x11, "201d".into()));
        assert_eq!(line_bytes(&a, "QCreateT"), (0x13, "f6f021000000".into()));
        assert_eq!(a.symbols.get("QT1LoopT"), Some(0x21));
        assert_eq!(a.image.entry, 0x0e);
    }

    #[test]
    fn plain_qcreate_uses_canonical_opcode() {
        let a = assemble("C: QCreate T, %ecx\n T: QTerm\n").unwrap();
        assert_eq!(hex(&a.image.flatten()), "f5f106000000f0");
    }

    #[test]
    fn qwait_label_and_star() {
        let a = assemble(".pos 0x22\nQWait QTLoopC\nQWait *\n.pos 0x13\nQTLoopC: nop\n").unwrap();
        assert_eq!(line_bytes(&a, "QWait QTLoopC"), (0x22, "f113000000".into()));
        assert_eq!(line_bytes(&a, "QWait *"), (0x27, "f100000000".into()));
    }

    #[test]
    fn forward_reference_resolves() {
        let a = assemble("jmp Ready\nnop\nReady: halt\n").unwrap();
        assert_eq!(a.symbols.get("Ready"), Some(6));
        assert_eq!(hex(&a.image.flatten()), "70060000001000");
    }

    #[test]
    fn data_directives_and_gaps() {
        let a = assemble("halt\n.align 4\nA: .long 5\n.long -1\n.pos 0x10\nB: .long A\n").unwrap();
        assert_eq!(a.symbols.get("A"), Some(4));
        assert_eq!(a.symbols.get("B"), Some(0x10));
        let flat = a.image.flatten();
        assert_eq!(flat.len(), 0x14);
        assert_eq!(hex(&flat[4..12]), "05000000ffffffff");
        assert_eq!(hex(&flat[0x10..]), "04000000");
        assert_eq!(a.image.segments.len(), 3);
    }

    #[test]
    fn immediates_with_and_without_dollar() {
        let a = assemble("iaddl 3,%ecx\nirmovl $-1,%ebx\nirmovl L,%eax\nL: halt").unwrap();
        assert_eq!(
            hex(&a.image.flatten()),
            "c0f10300000030f3ffffffff30f012000000".to_string() + "00"
        );
    }

    #[test]
    fn errors_are_reported() {
        assert!(matches!(
            assemble("jmp Nowhere"),
            Err(AsmError::UnknownLabel { line: 1, .. })
        ));
        assert!(matches!(
            assemble("A: nop\nA: nop"),
            Err(AsmError::DuplicateLabel {
                line: 2,
                first: 1,
                ..
            })
        ));
        assert!(matches!(
            assemble("QAlloc %edx"),
            Err(AsmError::OperandTypeMismatch { line: 1, .. })
        ));
        assert!(matches!(
            assemble("nop\n  frob %eax"),
            Err(AsmError::ParseError {
                line: 2,
                column: 3,
                ..
            })
        ));
        assert!(matches!(
            assemble("irmovl $0x100000000, %eax"),
            Err(AsmError::RangeError { .. })
        ));
        assert!(matches!(
            assemble("pushl %esv"),
            Err(AsmError::OperandTypeMismatch { .. })
        ));
        assert!(matches!(
            assemble(".pos 4\nnop\nnop\n.pos 5\nnop"),
            Err(AsmError::Overlap { addr: 5, .. })
        ));
        assert!(matches!(
            assemble("addl %eax, %r9"),
            Err(AsmError::ParseError { .. })
        ));
    }

    #[test]
    fn listing_layout() {
        let a = assemble("    .pos 0 # start\nLoop: addl %esi,%eax  # add\n    # note\n").unwrap();
        let text = a.listing.to_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "0x000:              |     .pos 0 # start");
        assert_eq!(
            lines[1],
            "0x000: 6060         | Loop: addl %esi,%eax  # add"
        );
        assert_eq!(lines[2], "                    |     # note");
    }

    #[test]
    fn symbol_sidecar_round_trip() {
        let a = assemble("B: nop\nA: nop\n").unwrap();
        let text = a.symbols.to_sidecar();
        assert_eq!(text, "B 0x0\nA 0x1\n");
        assert_eq!(SymbolTable::from_sidecar(&text).unwrap(), a.symbols);
        assert!(SymbolTable::from_sidecar("X").is_err());
    }

    #[test]
    fn disassembler_stops_on_bad_opcode() {
        let img = MemoryImage::from_flat(vec![0xff], 0);
        assert!(matches!(
            disassemble(&img, 0, 1),
            Err(DecodeError::InvalidOpcode { addr: 0, .. })
        ));
        let img = MemoryImage::from_flat(vec![0x10, 0x10, 0xff], 0);
        let (ok, err) = disassemble_lines(&img.flatten(), 0, 10);
        assert_eq!(ok.len(), 2);
        assert_eq!(
            err,
            Some(DecodeError::InvalidOpcode {
                addr: 2,
                opcode: 0xff
            })
        );
    }

    #[test]
    fn disassembly_reassembles() {
        let src = "irmovl $4,%ebx\nmrmovl 0x6c,%eax\nrmmovl %eax, -4(%esp)\nQAlloc Mode5, %edx\nQWait *\nQIntr 7\njne 0\nQCreate 0x40, %eno\nQCallP 0x40\n";
        let a = assemble(src).unwrap();
        let text = disassemble(&a.image, 0, 9).unwrap();
        let b = assemble(&text).unwrap();
        assert_eq!(a.image.flatten(), b.image.flatten());
    }
}
