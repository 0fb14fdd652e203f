//! `empa` command line: assemble, disassemble, run, benchmark.
//!
//! Exit codes: 0 ok, 1 usage or I/O, 2 assembly, 3 simulation, 4 failed check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use empa_core::assembler::{assemble, disassemble_lines, MemoryImage};
use empa_core::bench::{
    amdahl_alpha, default_values, exception_bench, metrics, metrics_csv, run_vector_sum,
    BenchError, BenchResult, Method,
};
use empa_core::diagram::{build_model, render_svg, render_text, Style};
use empa_core::engine::{trace_log, LatencyTable, Machine, MachineConfig};
use empa_core::isa::Reg;
use num_rational::Ratio;
use rand::distributions::Standard;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Parser)]
#[command(
    name = "empa",
    version,
    about = "Y86 many-core simulator with a supervisor layer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a source file into a raw memory image plus a `.sym` sidecar.
    Asm {
        source: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Write the listing here (`-` for stdout).
        #[arg(long)]
        listing: Option<PathBuf>,
    },
    /// Disassemble a raw image.
    Disasm {
        image: PathBuf,
        #[arg(long, value_parser = parse_addr)]
        start: Option<u32>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run an image (or a `.ys` source) to halt.
    Run {
        image: PathBuf,
        /// Entry address for raw images; sources use their first `.pos`.
        #[arg(long, value_parser = parse_addr, default_value = "0")]
        entry: u32,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        latency: Option<PathBuf>,
        #[arg(long)]
        cores: Option<usize>,
        /// Register a service handler, `CORE:ID:ENTRY`.
        #[arg(long)]
        service: Vec<String>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write an SVG timing diagram.
        #[arg(long)]
        diagram: Option<PathBuf>,
        /// Write a text timing diagram (`-` for stdout).
        #[arg(long)]
        text_diagram: Option<PathBuf>,
        /// Check invariants after every cycle.
        #[arg(long)]
        check: bool,
    },
    Bench {
        #[command(subcommand)]
        which: Bench,
    },
    Analyze {
        #[command(subcommand)]
        which: Analyze,
    },
}

#[derive(Subcommand)]
enum Bench {
    /// Vector-sum sweep over element counts.
    VectorSum {
        /// NO, FOR, SUMUP, ADAPTIVE, comma separated, or `all`.
        #[arg(long, default_value = "all")]
        method: String,
        /// Element counts, comma separated.
        #[arg(long, default_value = "1,2,4,8,16,32,64,100,1000")]
        n: String,
        #[arg(long, default_value_t = 32)]
        cores: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Fail with exit code 4 on a checksum mismatch.
        #[arg(long)]
        check: bool,
        /// Random element values from this seed instead of 1..n.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Service dispatch latency against a conventional exception entry.
    Exception {
        #[arg(long, default_value_t = 2700)]
        overhead: u64,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// Parallel fraction from a measured speedup.
    Amdahl {
        /// Speedup as a decimal or `num/den`.
        #[arg(long)]
        speedup: String,
        #[arg(long)]
        cores: i64,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Asm(anyhow::Error),
    Sim(anyhow::Error),
    Check(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Asm(_) => 2,
            Failure::Sim(_) => 3,
            Failure::Check(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Asm(e) | Failure::Sim(e) | Failure::Check(e) => e,
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn parse_addr(s: &str) -> std::result::Result<u32, String> {
    empa_core::assembler::parse_number(s)
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| format!("bad address `{s}`"))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Load a raw image loaded at address 0; `.ys` files are assembled on the fly.
fn load_image(path: &Path, entry: u32) -> std::result::Result<MemoryImage, Failure> {
    if path.extension().is_some_and(|e| e == "ys") {
        let text = usage(read(path))?;
        return assemble(&text)
            .map(|a| a.image)
            .map_err(|e| Failure::Asm(anyhow!("{}: {e}", path.display())));
    }
    let bytes = usage(fs::read(path).with_context(|| format!("reading {}", path.display())))?;
    Ok(MemoryImage::from_flat(bytes, entry))
}

fn cmd_asm(source: &Path, output: Option<PathBuf>, listing: Option<PathBuf>) -> Outcome {
    let src = usage(read(source))?;
    let asm = assemble(&src).map_err(|e| Failure::Asm(anyhow!("{}: {e}", source.display())))?;
    let out = output.unwrap_or_else(|| source.with_extension("img"));
    usage(
        fs::write(&out, asm.image.flatten()).with_context(|| format!("writing {}", out.display())),
    )?;
    usage(write(&out.with_extension("sym"), &asm.symbols.to_sidecar()))?;
    match listing.as_deref() {
        Some(p) if p == Path::new("-") => print!("{}", asm.listing),
        Some(p) => usage(write(p, &asm.listing.to_string()))?,
        None => {}
    }
    Ok(())
}

fn cmd_disasm(path: &Path, start: Option<u32>, count: Option<usize>) -> Outcome {
    let image = load_image(path, 0)?;
    let start = start.unwrap_or(image.entry);
    let bytes = image.flatten();
    let (lines, err) = disassemble_lines(&bytes, start, count.unwrap_or(usize::MAX));
    for (addr, ins) in lines {
        println!("0x{addr:03x}: {ins}");
    }
    if let Some(e) = err {
        // data after the code is normal; only an explicit count makes it an error
        if count.is_some() {
            return Err(Failure::Sim(e.into()));
        }
        println!("# stopped: {e}");
    }
    Ok(())
}

fn parse_service(spec: &str) -> Result<(usize, u8, u32)> {
    let f: Vec<&str> = spec.split(':').collect();
    let [core, id, entry] = f[..] else {
        bail!("service must be CORE:ID:ENTRY, got `{spec}`");
    };
    Ok((
        core.parse().context("service core")?,
        id.parse().context("service id")?,
        parse_addr(entry).map_err(|e| anyhow!(e))?,
    ))
}

struct RunArgs {
    image: PathBuf,
    entry: u32,
    config: Option<PathBuf>,
    latency: Option<PathBuf>,
    cores: Option<usize>,
    service: Vec<String>,
    trace: Option<PathBuf>,
    diagram: Option<PathBuf>,
    text_diagram: Option<PathBuf>,
    check: bool,
}

fn cmd_run(a: RunArgs) -> Outcome {
    let image = load_image(&a.image, a.entry)?;
    let mut config = match &a.config {
        Some(p) => usage(read(p).and_then(|t| MachineConfig::parse(&t).map_err(Into::into)))?,
        None => MachineConfig::default(),
    };
    if let Some(c) = a.cores {
        config.cores = c;
    }
    config.check_invariants |= a.check;
    let latency = match &a.latency {
        Some(p) => usage(read(p).and_then(|t| LatencyTable::parse(&t).map_err(Into::into)))?,
        None => LatencyTable::default(),
    };
    let mut m = Machine::load(&image, config, latency).map_err(|e| Failure::Sim(e.into()))?;
    for s in &a.service {
        let (core, id, entry) = usage(parse_service(s))?;
        m.register_service(core, id, entry)
            .map_err(|e| Failure::Sim(e.into()))?;
    }
    let result = m.run();

    // artifacts are written even when the run fails
    if let Some(p) = &a.trace {
        usage(write(p, &trace_log(&m.trace)))?;
    }
    if a.diagram.is_some() || a.text_diagram.is_some() {
        let model = build_model(&m.trace).map_err(|e| Failure::Sim(e.into()))?;
        if let Some(p) = &a.diagram {
            usage(write(p, &render_svg(&model, &Style::default())))?;
        }
        match a.text_diagram.as_deref() {
            Some(p) if p == Path::new("-") => print!("{}", render_text(&model)),
            Some(p) => usage(write(p, &render_text(&model)))?,
            None => {}
        }
    }

    let stats = result.map_err(|e| Failure::Sim(e.into()))?;
    println!("total_cycles      {}", stats.total_cycles);
    println!("cores_rented      {}", stats.cores_rented);
    println!("peak_concurrent   {}", stats.peak_concurrent);
    println!("busy_core_cycles  {}", stats.busy_core_cycles);
    println!("idle_core_cycles  {}", stats.idle_core_cycles);
    let regs: Vec<String> = (0u8..8)
        .filter_map(Reg::from_code)
        .map(|r| format!("{}={}", r.name(), m.reg(0, r)))
        .collect();
    println!("root              {}", regs.join(" "));
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|t| t.trim().parse::<T>().map_err(|e| anyhow!("`{t}`: {e}")))
        .collect()
}

fn bench_failure(e: BenchError) -> Failure {
    match e {
        BenchError::WrongChecksum { .. } => Failure::Check(e.into()),
        BenchError::Asm(_) => Failure::Asm(e.into()),
        _ => Failure::Sim(e.into()),
    }
}

fn cmd_vector_sum(
    method: &str,
    n: &str,
    cores: usize,
    csv: Option<PathBuf>,
    check: bool,
    seed: Option<u64>,
) -> Outcome {
    let methods: Vec<Method> = if method.eq_ignore_ascii_case("all") {
        Method::ALL.to_vec()
    } else {
        usage(parse_list(method))?
    };
    let ns: Vec<usize> = usage(parse_list(n))?;
    let config = MachineConfig::with_cores(cores);
    let run = |m: Method, n: usize| -> std::result::Result<BenchResult, Failure> {
        let values = match seed {
            // same seed and n give the same vector for every method
            Some(s) => StdRng::seed_from_u64(s ^ n as u64)
                .sample_iter(Standard)
                .take(n)
                .collect(),
            None => default_values(n),
        };
        let r = run_vector_sum(m, &values, &config).map_err(bench_failure)?;
        let want = empa_core::bench::oracle_sum(&values);
        if check && r.checksum != want {
            return Err(bench_failure(BenchError::WrongChecksum {
                method: m,
                n,
                got: r.checksum,
                want,
            }));
        }
        Ok(r)
    };
    // independent simulations, one worker each
    let mut jobs: Vec<(Method, usize)> = std::iter::once(Method::No)
        .chain(methods.iter().copied())
        .flat_map(|m| ns.iter().map(move |&n| (m, n)))
        .collect();
    jobs.sort();
    jobs.dedup();
    let results: Vec<BenchResult> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(m, n)| s.spawn(move || run(m, n)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect::<std::result::Result<_, _>>()
    })?;
    let series = |m: Method| -> Vec<BenchResult> {
        results.iter().filter(|r| r.method == m).cloned().collect()
    };
    let baseline = series(Method::No);
    let mut rows = Vec::new();
    for &m in &methods {
        rows.extend(metrics(&baseline, &series(m)).map_err(bench_failure)?);
    }
    rows.dedup_by_key(|r| (r.result.method, r.result.n));
    println!(
        "{:<9}{:>6}{:>10}{:>8}{:>8}{:>10}{:>8}{:>8}",
        "method", "n", "cycles", "rented", "peak", "speedup", "eff", "eff.par"
    );
    for row in &rows {
        let r = &row.result;
        println!(
            "{:<9}{:>6}{:>10}{:>8}{:>8}{:>10.3}{:>8.3}{:>8.3}",
            r.method.to_string(),
            r.n,
            r.total_cycles,
            r.cores_rented,
            r.peak_concurrent,
            row.speedup_f64(),
            row.efficiency(),
            row.effective_parallelism()
        );
    }
    if let Some(p) = csv {
        usage(write(&p, &metrics_csv(&rows)))?;
    }
    Ok(())
}

fn cmd_exception(overhead: u64) -> Outcome {
    let r = exception_bench(&MachineConfig::default(), overhead).map_err(bench_failure)?;
    println!("dispatch latency       {} cycles", r.empa_latency);
    println!("supervisor dispatch    {} cycles", r.dispatch_cost);
    println!("conventional overhead  {} cycles", r.conventional_overhead);
    println!("advantage              {:.1}x", r.ratio);
    println!("requester overlapped   {}", r.requester_overlapped);
    println!("total_cycles           {}", r.total_cycles);
    Ok(())
}

/// `a/b` or a plain decimal, exactly.
fn parse_ratio(s: &str) -> Result<Ratio<i128>> {
    if let Some((n, d)) = s.split_once('/') {
        let (n, d): (i128, i128) = (n.trim().parse()?, d.trim().parse()?);
        if d == 0 {
            bail!("zero denominator");
        }
        return Ok(Ratio::new(n, d));
    }
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    let den = 10i128
        .checked_pow(frac.len() as u32)
        .ok_or_else(|| anyhow!("too many digits"))?;
    let digits: i128 = format!("{int}{frac}")
        .parse()
        .with_context(|| format!("bad speedup `{s}`"))?;
    Ok(Ratio::new(digits, den))
}

fn cmd_amdahl(speedup: &str, cores: i64) -> Outcome {
    let s = usage(parse_ratio(speedup))?;
    let a = amdahl_alpha(s, cores).map_err(|e| Failure::Usage(e.into()))?;
    let f = |r: Ratio<i128>| *r.numer() as f64 / *r.denom() as f64;
    println!("alpha   {} ({:.6})", a.alpha, f(a.alpha));
    println!("serial  {} ({:.6})", a.serial, f(a.serial));
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Asm {
            source,
            output,
            listing,
        } => cmd_asm(&source, output, listing),
        Command::Disasm {
            image,
            start,
            count,
        } => cmd_disasm(&image, start, count),
        Command::Run {
            image,
            entry,
            config,
            latency,
            cores,
            service,
            trace,
            diagram,
            text_diagram,
            check,
        } => cmd_run(RunArgs {
            image,
            entry,
            config,
            latency,
            cores,
            service,
            trace,
            diagram,
            text_diagram,
            check,
        }),
        Command::Bench {
            which:
                Bench::VectorSum {
                    method,
                    n,
                    cores,
                    csv,
                    check,
                    seed,
                },
        } => cmd_vector_sum(&method, &n, cores, csv, check, seed),
        Command::Bench {
            which: Bench::Exception { overhead },
        } => cmd_exception(overhead),
        Command::Analyze {
            which: Analyze::Amdahl { speedup, cores },
        } => cmd_amdahl(&speedup, cores),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
