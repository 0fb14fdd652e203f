"""Smoke test for the `empa` extension module.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import empa


def main():
    progs = empa.programs()

    prog = empa.assemble(progs["speculation"])
    assert prog.symbols["QTposC"] == 0x44
    assert "QCallP" in prog.listing
    m = empa.Machine(prog, cores=4, check_invariants=True)
    stats = m.run()
    assert m.reg(0, "ecx") == 103, m.reg(0, "ecx")
    assert stats["total_cycles"] == m.cycle
    assert any("\tQTStart\t" in line for line in m.trace())
    assert "<svg" in m.diagram_svg()

    two_results = empa.assemble(progs["two_results"])
    slow, fast = empa.Machine(two_results, cores=3), empa.Machine(two_results, cores=4)
    assert slow.run()["total_cycles"] > fast.run()["total_cycles"]
    assert fast.read_word(two_results.symbols["R1"]) == 18

    values = list(range(1, 101))
    for method in ("NO", "FOR", "SUMUP", "ADAPTIVE"):
        r = empa.vector_sum(method, values)
        assert r["checksum"] == sum(values), (method, r)

    text = empa.disassemble(prog.image, 0, 3)
    assert text.splitlines()[1].startswith("QCreate")

    assert empa.amdahl_alpha(2, 1, 2) == (1, 1)
    assert empa.exception_bench()["empa_latency"] <= 5

    try:
        empa.assemble("frobl %eax")
    except ValueError:
        pass
    else:
        raise AssertionError("bad source accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
