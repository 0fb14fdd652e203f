//! Vector-sum program generators, timing sweeps, efficiency metrics,
//! Amdahl inversion and the exception-dispatch benchmark.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use thiserror::Error;

use crate::assembler::{assemble, AsmError};
use crate::engine::{EventKind, LatencyTable, Machine, MachineConfig, SimError};
use crate::isa::{Reg, Word};
use crate::programs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    No,
    For,
    Sumup,
    Adaptive,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::No, Method::For, Method::Sumup, Method::Adaptive];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::No => "NO",
            Method::For => "FOR",
            Method::Sumup => "SUMUP",
            Method::Adaptive => "ADAPTIVE",
        })
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown method `{s}` (expected no, for, sumup or adaptive)"))
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("vector length must be at least 1")]
    BadLength,
    #[error("timing is not affine in n; residuals {residuals:?}")]
    NonAffine { residuals: Vec<(u32, i64)> },
    #[error("an affine fit needs at least two distinct n values")]
    TooFewPoints,
    #[error("series do not cover the same n values")]
    MismatchedSeries,
    #[error("speedup {speedup} outside [1, {cores}]")]
    OutOfRange { speedup: f64, cores: i64 },
    #[error("{method} n={n}: checksum {got}, expected {want}")]
    WrongChecksum {
        method: Method,
        n: usize,
        got: Word,
        want: Word,
    },
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

const PREAMBLE: &str = "\
        .pos 0
        irmovl Array, %ecx
        irmovl $N, %edx
        xorl %eax, %eax
";

const NO_BODY: &str = "\
        andl %edx, %edx
        je End
Loop:   mrmovl (%ecx), %esi
        addl %esi, %eax
        irmovl $4, %ebx
        addl %ebx, %ecx
        irmovl $-1, %ebx
        addl %ebx, %edx
        jne Loop
End:    halt
";

const FOR_BODY: &str = "\
        QAlloc Mode1, %edx
        rrmovl %ecx, %esv
QT1LoopC:QCreateT QT1LoopT, %eax
        mrmovl (%esv), %ecx
        addl %ecx, %eax
QT1LoopT:QTerm
        halt
";

const SUMUP_BODY: &str = "\
        QAlloc Mode5, %edx
        rrmovl %ecx, %esv
QTLoopC:QCreateT QTLoopT, %eno
        mrmovl (%esv), %ecx
        addl %ecx, %esv
QTLoopT:QTerm
        QWait QTLoopC
        rrmovl %esv, %eax
        halt
";

/// SUMUP first; if its allocation fails, a QCreateF fallback tries FOR and
/// that in turn falls back to NO.
const ADAPTIVE_BODY: &str = "\
        QAlloc Mode5, %edx
        rrmovl %ecx, %esv
SumC:   QCreateT SumT, %eno
        mrmovl (%esv), %ecx
        addl %ecx, %esv
SumT:   QTerm
        QWait SumC
        rrmovl %esv, %eax
FallC:  QCreateF FallT, %eax
        xorl %eax, %eax
        QAlloc Mode1, %edx
        rrmovl %ecx, %esv
ForC:   QCreateT ForT, %eax
        mrmovl (%esv), %ecx
        addl %ecx, %eax
ForT:   QTerm
NoC:    QCreateF NoT, %eax
        andl %edx, %edx
        je NoEnd
NoLoop: mrmovl (%ecx), %esi
        addl %esi, %eax
        irmovl $4, %ebx
        addl %ebx, %ecx
        irmovl $-1, %ebx
        addl %ebx, %edx
        jne NoLoop
NoEnd:
NoT:    QTerm
        QWait NoC
FallT:  QTerm
        QWait FallC
        halt
";

/// Assembly text for `method` summing `values`, with `%ecx` preset to the
/// array and `%edx` to its length.
pub fn gen_program(method: Method, values: &[Word]) -> Result<String, BenchError> {
    if values.is_empty() {
        return Err(BenchError::BadLength);
    }
    let body = match method {
        Method::No => NO_BODY,
        Method::For => FOR_BODY,
        Method::Sumup => SUMUP_BODY,
        Method::Adaptive => ADAPTIVE_BODY,
    };
    let mut src = PREAMBLE.replace("$N", &format!("${}", values.len()));
    src.push_str(body);
    src.push_str("\n        .align 4\nArray:\n");
    for v in values {
        src.push_str(&format!("        .long {v}\n"));
    }
    Ok(src)
}

/// The default input vector 1..=n.
pub fn default_values(n: usize) -> Vec<Word> {
    (1..=n as Word).collect()
}

pub fn oracle_sum(values: &[Word]) -> Word {
    values.iter().fold(0, |a: Word, &v| a.wrapping_add(v))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchResult {
    pub method: Method,
    pub n: usize,
    pub total_cycles: u64,
    pub cores_rented: usize,
    pub peak_concurrent: usize,
    pub busy_core_cycles: u64,
    pub checksum: Word,
    pub trace_digest: String,
}

/// Run one vector sum and collect its figures. The checksum is the root's
/// final `%eax`.
pub fn run_vector_sum(
    method: Method,
    values: &[Word],
    config: &MachineConfig,
) -> Result<BenchResult, BenchError> {
    let src = gen_program(method, values)?;
    let asm = assemble(&src)?;
    let mut m = Machine::load(&asm.image, config.clone(), LatencyTable::default())?;
    let stats = m.run()?;
    Ok(BenchResult {
        method,
        n: values.len(),
        total_cycles: stats.total_cycles,
        cores_rented: stats.cores_rented,
        peak_concurrent: stats.peak_concurrent,
        busy_core_cycles: stats.busy_core_cycles,
        checksum: m.reg(0, Reg::Eax),
        trace_digest: crate::engine::trace_digest(&m.trace),
    })
}

/// Like [`run_vector_sum`] over `1..=n`, failing on a wrong checksum.
pub fn run_checked(
    method: Method,
    n: usize,
    config: &MachineConfig,
) -> Result<BenchResult, BenchError> {
    let values = default_values(n);
    let r = run_vector_sum(method, &values, config)?;
    let want = oracle_sum(&values);
    if r.checksum != want {
        return Err(BenchError::WrongChecksum {
            method,
            n,
            got: r.checksum,
            want,
        });
    }
    Ok(r)
}

/// Exact `T(n) = intercept + slope * n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AffineFit {
    pub intercept: Ratio<i64>,
    pub slope: Ratio<i64>,
}

/// Fit through the first two distinct points and demand zero residual at
/// every other point.
pub fn affine_fit(points: &[(u32, u64)]) -> Result<AffineFit, BenchError> {
    let (n0, t0) = *points.first().ok_or(BenchError::TooFewPoints)?;
    let &(n1, t1) = points
        .iter()
        .find(|p| p.0 != n0)
        .ok_or(BenchError::TooFewPoints)?;
    let slope = Ratio::new(t1 as i64 - t0 as i64, n1 as i64 - n0 as i64);
    let intercept = Ratio::from_integer(t0 as i64) - slope * n0 as i64;
    let residuals: Vec<(u32, i64)> = points
        .iter()
        .map(|&(n, t)| {
            let r = Ratio::from_integer(t as i64) - (intercept + slope * n as i64);
            (n, r.round().to_integer())
        })
        .collect();
    let exact = points
        .iter()
        .all(|&(n, t)| Ratio::from_integer(t as i64) == intercept + slope * n as i64);
    if !exact {
        return Err(BenchError::NonAffine { residuals });
    }
    Ok(AffineFit { intercept, slope })
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub results: Vec<BenchResult>,
    pub fit: AffineFit,
}

pub fn bench_sweep(
    method: Method,
    ns: &[usize],
    config: &MachineConfig,
) -> Result<Sweep, BenchError> {
    let results = ns
        .iter()
        .map(|&n| run_checked(method, n, config))
        .collect::<Result<Vec<_>, _>>()?;
    let points: Vec<(u32, u64)> = results
        .iter()
        .map(|r| (r.n as u32, r.total_cycles))
        .collect();
    let fit = affine_fit(&points)?;
    Ok(Sweep { results, fit })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub result: BenchResult,
    /// T_NO(n) / T_method(n), from simulated runs.
    pub speedup: Ratio<u64>,
}

impl MetricsRow {
    pub fn speedup_f64(&self) -> f64 {
        ratio_f64(self.speedup)
    }

    /// Speedup per rented core.
    pub fn efficiency(&self) -> f64 {
        self.speedup_f64() / self.result.cores_rented as f64
    }

    /// Fraction of the run that behaves as parallel work on the rented
    /// cores: the Amdahl alpha recovered from the measured speedup,
    /// `(1 - 1/S) / (1 - 1/N)` with `N = cores_rented`. Zero for one core.
    pub fn effective_parallelism(&self) -> f64 {
        let n = self.result.cores_rented as f64;
        if n <= 1.0 {
            return 0.0;
        }
        let s = self.speedup_f64();
        (1.0 - 1.0 / s) / (1.0 - 1.0 / n)
    }

    /// Busy core-cycles over rented core-cycles.
    pub fn utilization(&self) -> f64 {
        self.result.busy_core_cycles as f64
            / (self.result.cores_rented as f64 * self.result.total_cycles as f64)
    }
}

fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn metrics(no: &[BenchResult], method: &[BenchResult]) -> Result<Vec<MetricsRow>, BenchError> {
    if no.len() != method.len() {
        return Err(BenchError::MismatchedSeries);
    }
    let mut rows = Vec::with_capacity(method.len());
    for r in method {
        let base = no
            .iter()
            .find(|b| b.n == r.n)
            .ok_or(BenchError::MismatchedSeries)?;
        rows.push(MetricsRow {
            result: r.clone(),
            speedup: Ratio::new(base.total_cycles, r.total_cycles),
        });
    }
    rows.sort_by_key(|row| (row.result.method, row.result.n));
    Ok(rows)
}

pub const CSV_HEADER: &str =
    "method,n,total_cycles,cores_rented,peak_concurrent,busy_core_cycles,speedup,efficiency,effective_parallelism";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for row in rows {
        let r = &row.result;
        s += &format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6}\n",
            r.method,
            r.n,
            r.total_cycles,
            r.cores_rented,
            r.peak_concurrent,
            r.busy_core_cycles,
            row.speedup_f64(),
            row.efficiency(),
            row.effective_parallelism()
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Amdahl {
    pub alpha: Ratio<i128>,
    pub serial: Ratio<i128>,
}

/// Parallel fraction of a run that reached `speedup` on `cores` cores.
pub fn amdahl_alpha(speedup: Ratio<i128>, cores: i64) -> Result<Amdahl, BenchError> {
    let n = Ratio::from_integer(cores as i128);
    let one = Ratio::from_integer(1);
    if cores < 2 || speedup < one || speedup > n {
        return Err(BenchError::OutOfRange {
            speedup: *speedup.numer() as f64 / *speedup.denom() as f64,
            cores,
        });
    }
    let alpha = (one - speedup.recip()) / (one - n.recip());
    Ok(Amdahl {
        alpha,
        serial: one - alpha,
    })
}

/// Speedup predicted for parallel fraction `alpha` on `cores` cores.
pub fn amdahl_speedup(alpha: Ratio<i128>, cores: i64) -> Ratio<i128> {
    let one = Ratio::from_integer(1);
    ((one - alpha) + alpha / Ratio::from_integer(cores as i128)).recip()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExceptionReport {
    /// Cycles from the QIntr fetch to the handler's first fetch.
    pub empa_latency: u64,
    pub dispatch_cost: u64,
    pub conventional_overhead: u64,
    pub ratio: f64,
    /// The requester committed an instruction after QIntr before the handler
    /// terminated.
    pub requester_overlapped: bool,
    pub total_cycles: u64,
}

pub const SERVICE_ID: u8 = 1;

pub fn exception_bench(
    config: &MachineConfig,
    conventional_overhead: u64,
) -> Result<ExceptionReport, BenchError> {
    let asm = assemble(programs::EXCEPTION)?;
    let latency = LatencyTable::default();
    let dispatch_cost = latency.sv.intr_dispatch_cost;
    let mut m = Machine::load(&asm.image, config.clone(), latency)?;
    let entry = asm.symbols.get("Service").expect("handler label");
    m.register_service(1, SERVICE_ID, entry)?;
    let stats = m.run()?;

    let intr = m
        .trace
        .iter()
        .find(|e| e.core == 0 && e.kind == EventKind::MetaExec && e.detail.starts_with("QIntr"))
        .expect("QIntr event")
        .cycle;
    let dispatched = m
        .trace
        .iter()
        .find(|e| e.kind == EventKind::IntrDispatch)
        .expect("dispatch event");
    let first = m
        .trace
        .iter()
        .find(|e| {
            e.core == dispatched.core
                && e.kind == EventKind::FetchExec
                && e.cycle > dispatched.cycle
        })
        .expect("handler fetch")
        .cycle;
    let handler_end = m
        .trace
        .iter()
        .find(|e| {
            e.core == dispatched.core && e.kind == EventKind::QTEnd && e.cycle > dispatched.cycle
        })
        .map(|e| e.cycle);
    // the requester's next instruction commits at fetch + latency - 1
    let next_commit = m
        .trace
        .iter()
        .find(|e| e.core == 0 && e.kind == EventKind::FetchExec && e.cycle > intr)
        .map(|e| e.cycle + fetch_latency(&e.detail) - 1);
    let requester_overlapped = match (next_commit, handler_end) {
        (Some(c), Some(end)) => c < end,
        _ => false,
    };
    let empa_latency = first - intr;
    Ok(ExceptionReport {
        empa_latency,
        dispatch_cost,
        conventional_overhead,
        ratio: conventional_overhead as f64 / (empa_latency + dispatch_cost) as f64,
        requester_overlapped,
        total_cycles: stats.total_cycles,
    })
}

/// Latency recorded in a FetchExec detail (`... lat=N`).
pub fn fetch_latency(detail: &str) -> u64 {
    detail
        .rsplit_once("lat=")
        .and_then(|(_, n)| n.parse().ok())
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(cores: usize) -> MachineConfig {
        MachineConfig {
            check_invariants: true,
            ..MachineConfig::with_cores(cores)
        }
    }

    #[test]
    fn method_names() {
        assert_eq!("sumup".parse::<Method>(), Ok(Method::Sumup));
        assert_eq!(Method::Adaptive.to_string(), "ADAPTIVE");
        assert!("fast".parse::<Method>().is_err());
    }

    #[test]
    fn empty_vector_rejected() {
        assert!(matches!(
            gen_program(Method::No, &[]),
            Err(BenchError::BadLength)
        ));
    }

    #[test]
    fn small_sums_are_correct() {
        for method in Method::ALL {
            let r = run_vector_sum(method, &[1, 2, 3], &cfg(32)).unwrap();
            assert_eq!(r.checksum, 6, "{method}");
        }
        let r = run_vector_sum(Method::Sumup, &[42], &cfg(32)).unwrap();
        assert_eq!((r.checksum, r.total_cycles), (42, 33));
    }

    #[test]
    fn single_points_match_calibration() {
        assert_eq!(
            run_checked(Method::No, 1, &cfg(1)).unwrap().total_cycles,
            52
        );
        assert_eq!(
            run_checked(Method::For, 1, &cfg(2)).unwrap().total_cycles,
            31
        );
    }

    #[test]
    fn affine_fit_exact_and_not() {
        let fit = affine_fit(&[(1, 52), (2, 82), (4, 142)]).unwrap();
        assert_eq!(fit.slope, Ratio::from_integer(30));
        assert_eq!(fit.intercept, Ratio::from_integer(22));
        match affine_fit(&[(1, 52), (2, 82), (4, 143)]) {
            Err(BenchError::NonAffine { residuals }) => assert_eq!(residuals[2], (4, 1)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            affine_fit(&[(1, 2)]),
            Err(BenchError::TooFewPoints)
        ));
    }

    #[test]
    fn amdahl_examples() {
        let r = |n, d| Ratio::new(n, d);
        assert_eq!(amdahl_alpha(r(4, 1), 4).unwrap().alpha, r(1, 1));
        assert_eq!(amdahl_alpha(r(1, 1), 4).unwrap().alpha, r(0, 1));
        let a = amdahl_alpha(r(2, 1), 4).unwrap();
        assert_eq!((a.alpha, a.serial), (r(2, 3), r(1, 3)));
        assert_eq!(amdahl_speedup(a.alpha, 4), r(2, 1));
        assert!(amdahl_alpha(r(5, 1), 4).is_err());
        assert!(amdahl_alpha(r(1, 2), 4).is_err());
    }

    #[test]
    fn metrics_need_matching_series() {
        let no = vec![run_checked(Method::No, 2, &cfg(1)).unwrap()];
        let par = vec![run_checked(Method::Sumup, 3, &cfg(32)).unwrap()];
        assert!(matches!(
            metrics(&no, &par),
            Err(BenchError::MismatchedSeries)
        ));
    }

    #[test]
    fn csv_layout() {
        let no = vec![run_checked(Method::No, 4, &cfg(1)).unwrap()];
        let par = vec![run_checked(Method::Sumup, 4, &cfg(32)).unwrap()];
        let csv = metrics_csv(&metrics(&no, &par).unwrap());
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert!(lines.next().unwrap().starts_with("SUMUP,4,36,5,"));
    }

    #[test]
    fn fetch_latency_parsing() {
        assert_eq!(fetch_latency("irmovl $1, %eax lat=5"), 5);
        assert_eq!(fetch_latency("QTerm"), 1);
    }
}
