use empa_core::assembler::{assemble, disassemble, MemoryImage, SymbolTable};
use empa_core::bench::{amdahl_alpha, amdahl_speedup, oracle_sum, run_vector_sum, Method};
use empa_core::engine::{parse_trace, trace_log, LatencyTable, Machine, MachineConfig};
use empa_core::isa::{decode, encode, Instruction, Kind, Reg, Word};
use empa_core::programs;
use num_rational::Ratio;
use proptest::prelude::*;

fn reg() -> impl Strategy<Value = Reg> {
    (0u8..16).prop_filter_map("unused register code", Reg::from_code)
}

/// Well-formed instructions: whatever survives an encode/decode pass.
fn instruction() -> impl Strategy<Value = Instruction> {
    (0..Kind::ALL.len(), reg(), reg(), any::<i32>(), any::<u8>()).prop_filter_map(
        "not encodable",
        |(k, ra, rb, imm, mode)| {
            let ins = Instruction::new(Kind::ALL[k])
                .with_regs(ra, rb)
                .with_imm(imm)
                .with_addr(imm as u32)
                .with_mode(mode);
            decode(&encode(&ins), 0).ok()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn encode_decode_identity(ins in instruction()) {
        let bytes = encode(&ins);
        prop_assert_eq!(bytes.len() as u32, ins.length());
        prop_assert_eq!(decode(&bytes, 0), Ok(ins));
    }

    #[test]
    fn disassembly_reassembles_to_same_bytes(prog in proptest::collection::vec(instruction(), 1..24)) {
        let bytes: Vec<u8> = prog.iter().flat_map(encode).collect();
        let image = MemoryImage::from_flat(bytes.clone(), 0);
        let text = disassemble(&image, 0, prog.len()).unwrap();
        let again = assemble(&text).unwrap();
        prop_assert_eq!(again.image.flatten(), bytes);
        // and the text itself is a fixed point
        let text2 = disassemble(&again.image, 0, prog.len()).unwrap();
        prop_assert_eq!(text2, text);
    }

    #[test]
    fn speculation_matches_sequential(
        a in -(1i32 << 30)..(1 << 30),
        b in -(1i32 << 30)..(1 << 30),
        d in any::<i32>(),
        e in any::<i32>(),
        cores in 4usize..8,
    ) {
        let config = MachineConfig { check_invariants: true, ..MachineConfig::with_cores(cores) };
        let mut m = Machine::from_source(&programs::speculation_with(a, b, d, e), config).unwrap();
        m.run().unwrap();
        let want = if (b as i64) > (a as i64) { d.wrapping_add(3) } else { e.wrapping_add(4) };
        prop_assert_eq!(m.reg(0, Reg::Ecx), want);
    }

    #[test]
    fn vector_sum_checksums(
        method in 0usize..4,
        values in proptest::collection::vec(any::<i32>(), 1..48),
    ) {
        let method = Method::ALL[method];
        let config = MachineConfig { check_invariants: true, ..MachineConfig::with_cores(32) };
        let r = run_vector_sum(method, &values, &config).unwrap();
        prop_assert_eq!(r.checksum, oracle_sum(&values));
        prop_assert!(r.peak_concurrent <= 32);
    }

    #[test]
    fn amdahl_round_trip(n in 2i64..4096, den in 1i128..10_000, frac in 0i128..10_000) {
        // any speedup in [1, n]
        let span = den * (n as i128 - 1);
        let s = Ratio::new(den + span * frac / 10_000, den);
        let a = amdahl_alpha(s, n).unwrap();
        prop_assert!(a.alpha >= Ratio::from_integer(0) && a.alpha <= Ratio::from_integer(1));
        prop_assert_eq!(amdahl_speedup(a.alpha, n), s);
    }

    #[test]
    fn latency_table_text_round_trip(l in 1u64..50, jxx in 1u64..50, alloc in 1u64..10) {
        let text = format!("latency.mrmovl = {l}\nlatency.jxx = {jxx}\nsv.alloc_cost = {alloc}\n");
        let t = LatencyTable::parse(&text).unwrap();
        prop_assert_eq!(t.of(Kind::Mrmovl), l);
        prop_assert_eq!(t.of(Kind::Jne), jxx);
        prop_assert_eq!(LatencyTable::parse(&t.to_text()).unwrap(), t);
    }
}

#[test]
fn trace_text_round_trip() {
    for (name, src) in programs::ALL {
        if name == "exception" {
            continue;
        }
        let mut m = Machine::from_source(src, MachineConfig::with_cores(8)).unwrap();
        m.run().unwrap();
        let text = trace_log(&m.trace);
        assert_eq!(parse_trace(&text).unwrap(), m.trace, "{name}");
    }
}

#[test]
fn symbol_sidecar_round_trip() {
    for (_, src) in programs::ALL {
        let syms = assemble(src).unwrap().symbols;
        let back = SymbolTable::from_sidecar(&syms.to_sidecar()).unwrap();
        assert_eq!(back, syms);
    }
}

#[test]
fn default_values_checksum_brute_force() {
    let values: Vec<Word> = (1..=100).collect();
    assert_eq!(oracle_sum(&values), 5050);
}
