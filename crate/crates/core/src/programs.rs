//! Bundled example programs.

/// Speculative evaluation of `B-A > 0 ? D+3 : E+4`, result in the root's `%ecx`.
pub const SPECULATION: &str = include_str!("../programs/speculation.ys");
/// Conventional single-core vector sum.
pub const SUM_LOOP: &str = include_str!("../programs/sum_loop.ys");
/// Vector sum with the Mode1 (FOR) loop.
pub const SUM_MODE1: &str = include_str!("../programs/sum_mode1.ys");
/// Vector sum with Mode5 (SUMUP) fan-out.
pub const SUM_MODE5: &str = include_str!("../programs/sum_mode5.ys");
/// Two results from four operands, three of them loaded on rented cores.
pub const TWO_RESULTS: &str = include_str!("../programs/two_results.ys");
/// Shared-counter update run as a waited-for QT.
pub const CRITICAL_SECTION: &str = include_str!("../programs/critical_section.ys");
/// QIntr requester plus a service handler at label `Service`.
pub const EXCEPTION: &str = include_str!("../programs/exception.ys");

/// Every bundled program by file stem.
pub const ALL: [(&str, &str); 7] = [
    ("speculation", SPECULATION),
    ("sum_loop", SUM_LOOP),
    ("sum_mode1", SUM_MODE1),
    ("sum_mode5", SUM_MODE5),
    ("two_results", TWO_RESULTS),
    ("critical_section", CRITICAL_SECTION),
    ("exception", EXCEPTION),
];

/// The speculation program with its four data words replaced.
pub fn speculation_with(a: i32, b: i32, d: i32, e: i32) -> String {
    let mut out = String::new();
    for line in SPECULATION.lines() {
        let replaced = [("A:", a), ("B:", b), ("D:", d), ("E:", e)]
            .iter()
            .find(|(label, _)| line.starts_with(label))
            .map(|(label, v)| format!("{label}      .long {v}"));
        out.push_str(replaced.as_deref().unwrap_or(line));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembler::assemble;

    #[test]
    fn all_programs_assemble() {
        for (name, src) in ALL {
            assemble(src).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn speculation_data_substitution() {
        let a = assemble(&speculation_with(-1, 2, 3, 4)).unwrap();
        let flat = a.image.flatten();
        let at = a.symbols.get("A").unwrap() as usize;
        assert_eq!(&flat[at..at + 4], &(-1i32).to_le_bytes());
        assert_eq!(
            a.symbols.get("A"),
            assemble(SPECULATION).unwrap().symbols.get("A")
        );
    }
}
