use empa_core::diagram::{build_model, render_text};
use empa_core::engine::{Machine, MachineConfig};
use empa_core::programs;

#[test]
fn two_results_three_core_text_diagram_is_stable() {
    let mut m = Machine::from_source(programs::TWO_RESULTS, MachineConfig::with_cores(3)).unwrap();
    m.run().unwrap();
    let got = render_text(&build_model(&m.trace).unwrap());
    let path = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/golden/two_results_3cores.txt"
    );
    let want = std::fs::read_to_string(path).unwrap();
    assert_eq!(got, want);
    assert!(got.is_ascii());
}
