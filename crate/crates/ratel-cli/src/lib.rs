//! Command-line front end: assemble guest programs, run them under the
//! in-enclave translator or the reference interpreter, diff run
//! reports, benchmark a corpus, and dump internal tables.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ratel_core::engine::{Engine, EngineConfig};
use ratel_core::gateway;
use ratel_core::gisa::asm::assemble;
use ratel_core::gisa::binfmt::{GuestBinary, MAGIC};
use ratel_core::gisa::interp::{Oracle, OracleConfig};
use ratel_core::hostsim::{parse_adversary, parse_manifest, parse_script, HostWorld, Vfs};
use ratel_core::report::{diff, DiffResult, RunReport};
use ratel_core::trace::{ObservableTrace, RunStatus};

#[derive(Parser)]
#[command(name = "ratel", about = "Desk-scale enclave DBT simulator", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble a guest source file into a guest binary.
    Asm {
        src: PathBuf,
        /// Output path (defaults to the source with extension `gb64`).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run a guest binary under the translator inside the modeled enclave.
    Run {
        bin: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
        /// Also write the run report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a guest binary on the reference interpreter (no enclave).
    RunOracle {
        bin: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare two run reports; prints `equal` or the first divergence.
    Diff { a: PathBuf, b: PathBuf },
    /// Run every guest program in a directory on both backends and
    /// print a per-program statistics table.
    Bench { dir: PathBuf },
    /// Print internal tables.
    Dump {
        #[command(subcommand)]
        what: DumpWhat,
    },
}

#[derive(Subcommand)]
enum DumpWhat {
    /// The syscall classification table (mode, route, marshalling).
    Syscalls,
    /// The initial memory mirror for a guest binary (before execution).
    Mirror { bin: PathBuf },
}

#[derive(Args)]
struct RunFlags {
    /// Code cache budget in bytes.
    #[arg(long)]
    bb_max: Option<u64>,
    /// Turn off hot-path trace formation.
    #[arg(long)]
    disable_traces: bool,
    /// Maximum instructions per translated block.
    #[arg(long)]
    max_bb_insts: Option<usize>,
    /// Maximum blocks chained into one trace.
    #[arg(long)]
    max_trace_bbs: Option<usize>,
    /// Verbosity 0-4.
    #[arg(long, default_value_t = 0)]
    loglevel: u8,
    /// Append log lines to <logdir>/ratel.log as well.
    #[arg(long)]
    logdir: Option<PathBuf>,
    /// Private memory (EPC) size in bytes.
    #[arg(long)]
    epc: Option<u64>,
    /// Hardware entry slots.
    #[arg(long)]
    tcs: Option<usize>,
    /// State-save frames per slot.
    #[arg(long)]
    nssa: Option<usize>,
    /// Permission-relocation stash regions.
    #[arg(long)]
    stash: Option<usize>,
    /// Scheduler quantum in instructions.
    #[arg(long)]
    quantum: Option<u64>,
    /// Scheduling seed (falls back to $RATEL_SIM_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Retired-instruction budget.
    #[arg(long)]
    fuel: Option<u64>,
    /// Event script file (signals / adversary triggers).
    #[arg(long)]
    script: Option<PathBuf>,
    /// Standing adversary mode (off, toctou, toctou-stress, iago-*, ...).
    #[arg(long)]
    adversary: Option<String>,
    /// File whose bytes become the guest's stdin.
    #[arg(long)]
    stdin: Option<PathBuf>,
    /// VFS manifest (`path=hexbytes` lines) preloaded before the run.
    #[arg(long)]
    files: Option<PathBuf>,
}

struct Log {
    level: u8,
    file: Option<fs::File>,
}

impl Log {
    fn new(level: u8, dir: Option<&Path>) -> Result<Log, String> {
        let file = match dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| format!("logdir {}: {e}", d.display()))?;
                Some(
                    fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(d.join("ratel.log"))
                        .map_err(|e| e.to_string())?,
                )
            }
            None => None,
        };
        Ok(Log { level, file })
    }

    fn say(&mut self, level: u8, msg: &str) {
        if self.level >= level {
            eprintln!("[ratel] {msg}");
        }
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{msg}");
        }
    }
}

pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit 0.
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            4
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, String> {
    match cli.cmd {
        Cmd::Asm { src, out } => cmd_asm(&src, out.as_deref()),
        Cmd::Run { bin, flags, report } => cmd_run(&bin, &flags, report.as_deref()),
        Cmd::RunOracle { bin, flags, report } => cmd_run_oracle(&bin, &flags, report.as_deref()),
        Cmd::Diff { a, b } => cmd_diff(&a, &b),
        Cmd::Bench { dir } => cmd_bench(&dir),
        Cmd::Dump { what } => cmd_dump(what),
    }
}

fn cmd_asm(src: &Path, out: Option<&Path>) -> Result<i32, String> {
    let text = fs::read_to_string(src).map_err(|e| format!("{}: {e}", src.display()))?;
    let bin = assemble(&text).map_err(|e| format!("{}: {e}", src.display()))?;
    let out = out.map(PathBuf::from).unwrap_or_else(|| src.with_extension("gb64"));
    fs::write(&out, bin.to_bytes()).map_err(|e| format!("{}: {e}", out.display()))?;
    Ok(0)
}

/// Accept either the binary container or assembly source directly.
fn load_binary(path: &Path) -> Result<GuestBinary, String> {
    let data = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if data.starts_with(MAGIC) {
        return GuestBinary::from_bytes(&data).map_err(|e| format!("{}: {e}", path.display()));
    }
    let text = String::from_utf8(data).map_err(|_| format!("{}: not a guest binary or source", path.display()))?;
    assemble(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn resolve_seed(flags: &RunFlags) -> Result<u64, String> {
    if let Some(s) = flags.seed {
        return Ok(s);
    }
    match std::env::var("RATEL_SIM_SEED") {
        Ok(v) => v.parse().map_err(|_| format!("RATEL_SIM_SEED: bad value `{v}`")),
        Err(_) => Ok(0),
    }
}

fn build_vfs(flags: &RunFlags) -> Result<Vfs, String> {
    let mut vfs = Vfs::new();
    if let Some(p) = &flags.stdin {
        vfs.stdin = fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    if let Some(p) = &flags.files {
        let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
        for (path, bytes) in parse_manifest(&text)? {
            vfs.preload(&path, bytes);
        }
    }
    Ok(vfs)
}

fn engine_config(flags: &RunFlags) -> Result<EngineConfig, String> {
    let mut cfg = EngineConfig::default();
    cfg.seed = resolve_seed(flags)?;
    if let Some(q) = flags.quantum {
        cfg.quantum = q;
    }
    if let Some(f) = flags.fuel {
        cfg.fuel = f;
    }
    if let Some(b) = flags.bb_max {
        cfg.bb_max = b;
    }
    if let Some(n) = flags.max_bb_insts {
        cfg.max_bb_insts = n;
    }
    if let Some(n) = flags.max_trace_bbs {
        cfg.max_trace_bbs = n;
    }
    cfg.traces_enabled = !flags.disable_traces;
    if let Some(e) = flags.epc {
        cfg.machine.epc_size = e;
    }
    if let Some(t) = flags.tcs {
        cfg.machine.tcs_count = t;
    }
    if let Some(n) = flags.nssa {
        cfg.machine.nssa = n;
    }
    if let Some(s) = flags.stash {
        cfg.mem.stash_count = s;
    }
    Ok(cfg)
}

fn exit_code_for(status: RunStatus) -> i32 {
    match status {
        RunStatus::Exited(0) => 0,
        RunStatus::Exited(_) => 1,
        RunStatus::Killed(_) | RunStatus::Faulted | RunStatus::Deadlocked | RunStatus::TimedOut => 2,
        RunStatus::Aborted => 3,
    }
}

fn emit(trace: &ObservableTrace, report: &RunReport, out: Option<&Path>) -> Result<i32, String> {
    use std::io::Write as _;
    let stdout = std::io::stdout();
    let mut so = stdout.lock();
    so.write_all(&trace.stdout).map_err(|e| e.to_string())?;
    std::io::stderr().write_all(&trace.stderr).map_err(|e| e.to_string())?;
    let text = report.to_text();
    so.write_all(text.as_bytes()).map_err(|e| e.to_string())?;
    if let Some(p) = out {
        fs::write(p, &text).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    Ok(exit_code_for(trace.status))
}

fn cmd_run(bin_path: &Path, flags: &RunFlags, report_out: Option<&Path>) -> Result<i32, String> {
    let mut log = Log::new(flags.loglevel, flags.logdir.as_deref())?;
    let bin = load_binary(bin_path)?;
    let cfg = engine_config(flags)?;
    log.say(1, &format!(
        "run {} seed={} quantum={} bb_max={} traces={}",
        bin_path.display(), cfg.seed, cfg.quantum, cfg.bb_max, cfg.traces_enabled
    ));
    let mut host = HostWorld::new(cfg.machine.public_size);
    host.vfs = build_vfs(flags)?;
    if let Some(p) = &flags.script {
        let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
        host.script = parse_script(&text).map_err(|e| e.to_string())?;
    }
    if let Some(a) = &flags.adversary {
        host.adversary = parse_adversary(a).ok_or_else(|| format!("unknown adversary `{a}`"))?;
    }
    let mut engine = Engine::new(&bin, host, cfg)?;
    let trace = engine.run();
    log.say(2, &format!(
        "done status={:?} retired={} ocalls={} ecalls={} cache_peak={}",
        trace.status, trace.retired, engine.stats.ocalls, engine.stats.ecalls,
        engine.cache.peak_bytes
    ));
    if let Some(r) = &engine.abort_reason {
        log.say(1, &format!("abort: {r}"));
    }
    let report = RunReport::from_engine(&engine, &trace);
    emit(&trace, &report, report_out)
}

fn cmd_run_oracle(bin_path: &Path, flags: &RunFlags, report_out: Option<&Path>) -> Result<i32, String> {
    let mut log = Log::new(flags.loglevel, flags.logdir.as_deref())?;
    let bin = load_binary(bin_path)?;
    let mut cfg = OracleConfig::default();
    cfg.seed = resolve_seed(flags)?;
    if let Some(q) = flags.quantum {
        cfg.quantum = q;
    }
    if let Some(f) = flags.fuel {
        cfg.fuel = f;
    }
    let script = match &flags.script {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            parse_script(&text).map_err(|e| e.to_string())?
        }
        None => Vec::new(),
    };
    log.say(1, &format!("run-oracle {} seed={} quantum={}", bin_path.display(), cfg.seed, cfg.quantum));
    let trace = Oracle::new(&bin, build_vfs(flags)?, script, cfg)?.run();
    let report = RunReport::from_trace(&trace);
    emit(&trace, &report, report_out)
}

fn cmd_diff(a: &Path, b: &Path) -> Result<i32, String> {
    let ra = RunReport::parse(&fs::read_to_string(a).map_err(|e| format!("{}: {e}", a.display()))?)?;
    let rb = RunReport::parse(&fs::read_to_string(b).map_err(|e| format!("{}: {e}", b.display()))?)?;
    match diff(&ra, &rb) {
        DiffResult::Equal => {
            println!("equal");
            Ok(0)
        }
        DiffResult::Diverged { line, left, right } => {
            println!("diverged at event {line}");
            println!("  a: {left}");
            println!("  b: {right}");
            Ok(1)
        }
    }
}

fn cmd_bench(dir: &Path) -> Result<i32, String> {
    let mut sources: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x == "gasm" || x == "gb64"))
        .collect();
    sources.sort();
    if sources.is_empty() {
        return Err(format!("{}: no guest programs found", dir.display()));
    }
    println!(
        "{:<28} {:>10} {:>8} {:>7} {:>7} {:>5} {:>10} {:>11} {:>11} {:>7}",
        "program", "retired", "syscalls", "ocalls", "ecalls", "sigs", "cache_peak", "clock_int", "clock_dbt", "ratio"
    );
    for src in sources {
        let name = src.file_stem().unwrap().to_string_lossy().into_owned();
        match bench_one(&src) {
            Ok(row) => println!("{row}"),
            Err(e) => println!("{name:<28} skip ({e})"),
        }
    }
    Ok(0)
}

fn bench_one(src: &Path) -> Result<String, String> {
    let bin = load_binary(src)?;
    let name = src.file_stem().unwrap().to_string_lossy().into_owned();
    let make_vfs = || -> Result<Vfs, String> {
        let mut vfs = Vfs::new();
        if let Ok(b) = fs::read(src.with_extension("stdin")) {
            vfs.stdin = b;
        }
        if let Ok(t) = fs::read_to_string(src.with_extension("files")) {
            for (p, bytes) in parse_manifest(&t)? {
                vfs.preload(&p, bytes);
            }
        }
        Ok(vfs)
    };
    let script = match fs::read_to_string(src.with_extension("script")) {
        Ok(t) => parse_script(&t).map_err(|e| e.to_string())?,
        Err(_) => Vec::new(),
    };

    let otrace = Oracle::new(&bin, make_vfs()?, script.clone(), OracleConfig::default())?.run();
    // Interpreter virtual clock: one tick per retired instruction.
    let clock_int = otrace.retired;

    let cfg = EngineConfig::default();
    let mut host = HostWorld::new(cfg.machine.public_size);
    host.vfs = make_vfs()?;
    host.script = script;
    let mut engine = Engine::new(&bin, host, cfg)?;
    let etrace = engine.run();
    if etrace.status != otrace.status {
        return Err(format!("backends disagree: {:?} vs {:?}", etrace.status, otrace.status));
    }
    let clock_dbt = engine.host.clock;
    let syscalls: u64 = engine.stats.per_syscall.values().sum();
    let sigs = etrace
        .events
        .iter()
        .filter(|(_, e)| matches!(e, ratel_core::trace::TraceEvent::Signal { .. }))
        .count();
    let ratio = clock_dbt as f64 / clock_int.max(1) as f64;
    Ok(format!(
        "{name:<28} {:>10} {syscalls:>8} {:>7} {:>7} {sigs:>5} {:>10} {clock_int:>11} {clock_dbt:>11} {ratio:>7.2}",
        etrace.retired, engine.stats.ocalls, engine.stats.ecalls, engine.cache.peak_bytes
    ))
}

fn cmd_dump(what: DumpWhat) -> Result<i32, String> {
    match what {
        DumpWhat::Syscalls => {
            println!("{:<4} {:<11} {:<9} {:<6} marshal", "nr", "name", "mode", "route");
            for c in gateway::table() {
                println!(
                    "{:<4} {:<11} {:<9} {:<6} {}",
                    c.number,
                    c.name,
                    format!("{:?}", c.mode).to_lowercase(),
                    format!("{:?}", c.route).to_lowercase(),
                    c.marshal
                );
            }
        }
        DumpWhat::Mirror { bin } => {
            let bin = load_binary(&bin)?;
            let cfg = EngineConfig::default();
            let host = HostWorld::new(cfg.machine.public_size);
            let engine = Engine::new(&bin, host, cfg)?;
            for line in engine.mv.dump() {
                println!("{line}");
            }
        }
    }
    Ok(0)
}
