//! Full acceptance gate. Each numbered criterion runs in isolation and
//! prints exactly one PASS/FAIL line; the gate fails if any criterion
//! fails. Run with `--nocapture` to see the lines as they complete.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};

use common::{assert_equiv, load_corpus, make_engine, mirror, run_oracle, RunInputs};
use ratel_core::abi;
use ratel_core::engine::{Engine, EngineConfig};
use ratel_core::gateway::{self, Mode};
use ratel_core::gisa::asm::assemble;
use ratel_core::gisa::binfmt::GuestBinary;
use ratel_core::hostsim::{parse_script, AdversaryMode, HostWorld, IagoKind};
use ratel_core::locks::foils;
use ratel_core::machine::{
    AccessKind, Accessor, Machine, MachineConfig, MachineError, PageKind, Perms, TcsState,
};
use ratel_core::report::{diff, DiffResult, RunReport};
use ratel_core::signals::Owner;
use ratel_core::threads::{tls_push, tls_restore, ThreadSet, TLS_APP, TLS_ENGINE, TLS_SGX_PRIMARY};
use ratel_core::trace::{RunStatus, TraceEvent};

fn engine_with(
    bin: &GuestBinary,
    inputs: &RunInputs,
    tweak: impl FnOnce(&mut EngineConfig),
) -> Engine {
    let mut cfg = EngineConfig {
        seed: inputs.seed,
        quantum: inputs.quantum,
        fuel: inputs.fuel,
        ..Default::default()
    };
    tweak(&mut cfg);
    let mut host = HostWorld::new(cfg.machine.public_size);
    host.vfs = inputs.vfs();
    host.script = inputs.script.clone();
    Engine::new(bin, host, cfg).expect("engine setup")
}

// --- criterion 1: oracle equivalence over the corpus ---

fn c1_oracle_equivalence() -> String {
    let corpus = load_corpus();
    assert!(corpus.len() >= 20, "corpus holds {} programs, need >= 20", corpus.len());
    for case in &corpus {
        let bin = assemble(&case.source).unwrap();
        let o = RunReport::from_trace(&run_oracle(&bin, &case.inputs));
        let mut engine = make_engine(&bin, &case.inputs);
        let t = engine.run();
        let e = RunReport::from_engine(&engine, &t);
        match diff(&e, &o) {
            DiffResult::Equal => {}
            DiffResult::Diverged { line, left, right } => {
                panic!("{}: diverged at line {line}: `{left}` vs `{right}`", case.name)
            }
        }
        assert_eq!(engine.direct_app_fetches, 0, "{}: uncached app fetch", case.name);
    }
    format!("{} corpus programs, all traces equal, zero direct fetches", corpus.len())
}

// --- criterion 2: the five hardware restrictions ---

fn built_machine() -> Machine {
    let cfg = MachineConfig::default();
    let mut m = Machine::ecreate(cfg.clone()).unwrap();
    m.eadd_page(cfg.entry_va, Perms::rx(), PageKind::Code, Some(&[0u8; 16])).unwrap();
    let mut va = cfg.enclave_base_va + 0x100000;
    for _ in 0..cfg.tcs_count {
        m.eadd_page(va, Perms::rw(), PageKind::Tcs, None).unwrap();
        va += 4096;
        for _ in 0..cfg.nssa {
            m.eadd_page(va, Perms::rw(), PageKind::Ssa, None).unwrap();
            va += 4096;
        }
    }
    m.eadd_page(cfg.enclave_base_va + 0x200000, Perms::rw(), PageKind::Data, None).unwrap();
    m.einit().unwrap();
    m
}

fn c2_restrictions() -> String {
    let mut checks = 0;
    // R1: host blocked from private memory, both directions, counted.
    let mut m = built_machine();
    let priv_va = m.cfg.enclave_base_va + 0x200000;
    assert!(matches!(
        m.write(Accessor::Host, priv_va, &[1]),
        Err(MachineError::AccessFault { .. })
    ));
    assert_eq!(m.host_private_faults, 1);
    let mut buf = [0u8; 8];
    assert!(matches!(m.read(Accessor::Host, priv_va, &mut buf), Err(MachineError::AccessFault { .. })));
    checks += 2;
    // R1: enclave code never executes from public memory.
    m.eenter(0, m.cfg.entry_va).unwrap();
    let pub_va = ratel_core::machine::PUBLIC_BASE + 0x1000;
    assert!(m.check_fetch(Accessor::Engine, pub_va, 8).is_err());
    assert!(m.check_fetch(Accessor::App, pub_va, 8).is_err());
    checks += 2;
    // R2: layout and permissions freeze at init.
    let mut m = built_machine();
    assert_eq!(
        m.eadd_page(m.cfg.enclave_base_va + 0x300000, Perms::rw(), PageKind::Data, None),
        Err(MachineError::PostInitMutation)
    );
    assert_eq!(
        m.set_page_perms(m.cfg.enclave_base_va + 0x200000, Perms::rwx()),
        Err(MachineError::PostInitMutation)
    );
    checks += 2;
    // R3: no sharing primitive: host blocked while the enclave is live,
    // app blocked from the engine's own region.
    let mut m = built_machine();
    m.eenter(0, m.cfg.entry_va).unwrap();
    assert!(m.write_u64(Accessor::Host, priv_va, 7).is_err());
    let (mm, mv, _) = mirror::setup();
    drop(mm);
    assert!(mv.check_app_access(mv.region_a.0, 8, AccessKind::Read).is_err());
    checks += 2;
    // R4: one frame, one address.
    let cfg = MachineConfig::default();
    let mut m = Machine::ecreate(cfg.clone()).unwrap();
    let va = cfg.enclave_base_va + 0x5000;
    m.eadd_page(va, Perms::rw(), PageKind::Data, None).unwrap();
    assert_eq!(
        m.eadd_page(va, Perms::rw(), PageKind::Data, None),
        Err(MachineError::DoubleMapFault { va })
    );
    assert!(m.eadd_page(cfg.enclave_base_va + 123, Perms::rw(), PageKind::Data, None).is_err());
    checks += 2;
    // R5: entry only at the registered point, and never into a busy slot.
    let mut m = built_machine();
    assert!(matches!(
        m.eenter(0, m.cfg.entry_va + 8),
        Err(MachineError::InvalidEntryFault { .. })
    ));
    assert_eq!(m.tcs[0].state, TcsState::Free);
    m.eenter(0, m.cfg.entry_va).unwrap();
    assert_eq!(m.eenter(0, m.cfg.entry_va), Err(MachineError::BusyTcs(0)));
    checks += 2;
    format!("R1-R5 enforced, {checks} negative checks")
}

// --- criterion 3: signal nesting matrix + depth limit ---

const NESTING_GUEST: &str = "\
.code .at 0x11000
_start:
  movi g0, 16
  movi g1, 4
  movi g2, app_handler
  sys
  movi g1, 0
  movi g2, 20000
  movi g3, 1
spin:
  add g1, g3
  cmp g1, g2
  jnz spin
  movi g0, 14
  movi g1, 0
  sys
app_handler:
  movi g8, 0
  movi g9, 1500
  movi g10, 1
aspin:
  add g8, g10
  cmp g8, g9
  jnz aspin
  sigret
.code .at 0x12000
eng_handler:
  movi g8, 0
  movi g9, 1500
  movi g10, 1
espin:
  add g8, g10
  cmp g8, g9
  jnz espin
  sigret
";

fn nesting_case(first: &str, second: &str) -> Vec<(u64, String)> {
    let bin = assemble(NESTING_GUEST).unwrap();
    let mut inputs = RunInputs::new();
    inputs.script = parse_script(&format!(
        "thread:1 at:2000 do:{first}\nthread:1 at:2300 do:{second}\n"
    ))
    .unwrap();
    let mut engine = make_engine(&bin, &inputs);
    engine.signals.register_secondary(abi::SIG_USR2, Owner::Engine, 0x12000);
    let trace = engine.run();
    assert_eq!(trace.status, RunStatus::Exited(0));
    trace
        .events
        .iter()
        .filter_map(|(_, e)| match e {
            TraceEvent::Signal { signum, disposition, .. } => {
                Some((*signum, disposition.to_string()))
            }
            _ => None,
        })
        .collect()
}

fn c3_signal_matrix() -> String {
    let d = |s: &str| s.to_string();
    // Case 1: app signal interrupting an engine handler — delivered.
    assert_eq!(
        nesting_case("USR2", "USR1"),
        vec![(abi::SIG_USR2, d("delivered")), (abi::SIG_USR1, d("delivered"))]
    );
    // Cases 2-4: every other nesting is ignored.
    assert_eq!(
        nesting_case("USR2", "USR2"),
        vec![(abi::SIG_USR2, d("delivered")), (abi::SIG_USR2, d("ignored"))]
    );
    assert_eq!(
        nesting_case("USR1", "USR1"),
        vec![(abi::SIG_USR1, d("delivered")), (abi::SIG_USR1, d("ignored"))]
    );
    assert_eq!(
        nesting_case("USR1", "USR2"),
        vec![(abi::SIG_USR1, d("delivered")), (abi::SIG_USR2, d("ignored"))]
    );
    // Forced depth-3 synchronous delivery aborts the enclave.
    let bin = assemble(NESTING_GUEST).unwrap();
    let mut engine = make_engine(&bin, &RunInputs::new());
    engine.signals.register_secondary(abi::SIG_SEGV, Owner::App, 0x11000);
    assert_eq!(engine.force_sync_signal(1, abi::SIG_SEGV, 3), "abort");
    assert_eq!(engine.status(), Some(RunStatus::Aborted));
    "4/4 nesting dispositions exact, depth-3 delivery aborts".into()
}

// --- criterion 4: TOCTOU / Iago adversaries ---

fn c4_adversaries() -> String {
    let corpus = load_corpus();
    let case = |n: &str| corpus.iter().find(|c| c.name == n).unwrap();
    let mut mutations = 0;
    let mut attempts = 0;
    let mut faults = 0;
    // Staged-buffer mutation: zero divergence from the honest run.
    for name in ["03_stdin_echo", "07_file_read", "08_file_write_fsync", "12_msync_writeback"] {
        let c = case(name);
        let bin = assemble(&c.source).unwrap();
        let clean = run_oracle(&bin, &c.inputs);
        let mut engine = make_engine(&bin, &c.inputs);
        engine.host.adversary = AdversaryMode::ToctouMutate;
        let t = engine.run();
        assert_equiv(&format!("{name} under mutation"), &clean, &t);
        mutations += engine.host.adv_stats.public_mutations;
        attempts += engine.host.adv_stats.private_attempts;
        faults += engine.m.host_private_faults;
    }
    assert!(mutations > 0, "adversary never fired");
    // Malicious returns: 100% sanitize rejection.
    let mut injections = 0;
    let mut rejects = 0;
    for kind in [IagoKind::ZeroAddr, IagoKind::RegionAOverlap, IagoKind::Misaligned] {
        let c = case("10_mmap_anon");
        let bin = assemble(&c.source).unwrap();
        let mut engine = make_engine(&bin, &c.inputs);
        engine.host.adversary = AdversaryMode::IagoReturn(kind);
        let t = engine.run();
        let ret = t.events.iter().find_map(|(_, e)| match e {
            TraceEvent::Syscall { number, ret, .. } if *number == abi::SYS_MMAP => Some(*ret),
            _ => None,
        });
        assert_eq!(ret, Some(abi::E_INVAL), "{kind:?} leaked through");
        injections += engine.host.adv_stats.iago_injections;
        rejects += engine.stats.sanitize_rejects;
        attempts += engine.host.adv_stats.private_attempts;
        faults += engine.m.host_private_faults;
    }
    {
        let c = case("03_stdin_echo");
        let bin = assemble(&c.source).unwrap();
        let mut engine = make_engine(&bin, &c.inputs);
        engine.host.adversary = AdversaryMode::IagoReturn(IagoKind::OversizedLen);
        let t = engine.run();
        let ret = t.events.iter().find_map(|(_, e)| match e {
            TraceEvent::Syscall { number, ret, .. } if *number == abi::SYS_READ => Some(*ret),
            _ => None,
        });
        assert_eq!(ret, Some(abi::E_INVAL));
        injections += engine.host.adv_stats.iago_injections;
        rejects += engine.stats.sanitize_rejects;
    }
    assert!(injections > 0);
    assert_eq!(rejects, injections, "a malicious return escaped the sanitizer");
    // Direct private pokes: attempted, all faulted.
    {
        let c = case("22_mutex_counter");
        let bin = assemble(&c.source).unwrap();
        let mut inputs = c.inputs.clone();
        inputs.script =
            parse_script("thread:1 at:10 do:lockflip\nthread:1 at:30 do:lockflip\n").unwrap();
        let mut engine = make_engine(&bin, &inputs);
        let t = engine.run();
        assert_eq!(t.status, RunStatus::Exited(100));
        attempts += engine.host.adv_stats.private_attempts;
        faults += engine.m.host_private_faults;
    }
    assert!(attempts >= 2, "no private write was ever attempted");
    assert_eq!(attempts, faults, "a private write landed");
    format!(
        "{mutations} mutations w/o divergence, {rejects}/{injections} injections rejected, \
         {attempts}/{attempts} private writes faulted"
    )
}

// --- criterion 5: lock soundness + insecure foil ---

fn c5_lock_soundness() -> String {
    let n = 1000u64;
    let src = format!(
        "\
.code .at 0x11000
_start:
  movi g0, 12
  movi g1, worker
  movi g2, 0x32000
  movi g3, ctid1
  sys
  movi g0, 12
  movi g1, worker
  movi g2, 0x34000
  movi g3, ctid2
  sys
  movi g9, ctid1
  call join
  movi g9, ctid2
  call join
  movi g4, counter
  ld g1, [g4+0]
  movi g0, 14
  sys
join:
  ld g3, [g9+0]
  movi g5, 0
  cmp g3, g5
  jz jdone
  movi g0, 15
  mov g1, g9
  movi g2, 0
  sys
  jmp join
jdone:
  ret
worker:
  movi g10, 0
  movi g11, {n}
  movi g12, 1
wloop:
  cmp g10, g11
  jz wdone
  movi g0, 15
  movi g1, lock
  movi g2, 2
  sys
  movi g4, counter
  ld g5, [g4+0]
  movi g6, 1
  add g5, g6
  st [g4+0], g5
  movi g0, 15
  movi g1, lock
  movi g2, 3
  sys
  add g10, g12
  jmp wloop
wdone:
  movi g0, 13
  movi g1, 0
  sys
.bss .at 0x30000
stacks: .zero 16384
.data .at 0x34000
ctid1: .quad 0
ctid2: .quad 0
lock: .quad 0
counter: .quad 0
"
    );
    let bin = assemble(&src).unwrap();
    for seed in 0..100u64 {
        let mut inputs = RunInputs::new();
        inputs.seed = seed;
        inputs.quantum = 3 + seed % 23;
        inputs.fuel = 10_000_000;
        let t = make_engine(&bin, &inputs).run();
        assert_eq!(t.status, RunStatus::Exited(2 * n as i64), "seed {seed}");
    }
    let foil = foils::public_futex_demo();
    assert!(foil.violated, "public lock word foil failed to violate");
    assert!(!foils::manager_demo().violated);
    format!("2x{n} exact over 100 seeds; public-lockword foil violated as expected")
}

// --- criterion 6: TLS chains and TCS multiplexing ---

fn c6_tls_tcs() -> String {
    // Exhaustive restore over every chain of depth <= 3.
    let tags = [TLS_SGX_PRIMARY, TLS_ENGINE, TLS_APP];
    let mut configs = 0;
    for depth in 0..=3usize {
        let mut combo = vec![0usize; depth];
        loop {
            let (mut m, mut mv, _) = mirror::setup();
            let mut ts = ThreadSet::new();
            let tid = ts.spawn(Default::default(), 0);
            let th = ts.get_mut(tid);
            for (i, &ti) in combo.iter().enumerate() {
                tls_push(&mut m, &mut mv, th, tags[ti], 100 + i as u64, 200 + i as u64)
                    .unwrap();
            }
            let got = tls_restore(&mut m, ts.get(tid));
            let want = combo
                .last()
                .map(|&ti| (tags[ti], 100 + (depth - 1) as u64, 200 + (depth - 1) as u64));
            assert_eq!(got, want, "chain {combo:?}");
            configs += 1;
            // Next combination in base-3.
            let mut i = 0;
            loop {
                if i == depth {
                    break;
                }
                combo[i] += 1;
                if combo[i] < tags.len() {
                    break;
                }
                combo[i] = 0;
                i += 1;
            }
            if depth == 0 || i == depth {
                break;
            }
        }
    }
    // Four threads over two hardware slots: oracle-equal, occupancy <= 2.
    let case = load_corpus().into_iter().find(|c| c.name == "23_four_threads_slots").unwrap();
    let bin = assemble(&case.source).unwrap();
    let mut inputs = case.inputs.clone();
    inputs.quantum = 5; // interleave hard so several threads hold slots
    let oracle = run_oracle(&bin, &inputs);
    let mut engine = engine_with(&bin, &inputs, |c| c.machine.tcs_count = 2);
    let t = engine.run();
    assert_equiv("four threads over two slots", &oracle, &t);
    assert!(engine.max_occupancy <= 2, "occupancy peaked at {}", engine.max_occupancy);
    format!("{configs} TLS chains exact; 4 threads on 2 slots, peak occupancy {}", engine.max_occupancy)
}

// --- criterion 7: memory mirror fuzz ---

fn c7_mirror() -> String {
    mirror::fuzz_against_model(0x9e37_79b9_7f4a_7c15, 1000);
    mirror::perms_matrix();
    mirror::relocated_code_runs();
    "1000 random ops match the interval model; 3x3 perms matrix; relocated code runs".into()
}

// --- criterion 8: cache limits ---

fn c8_cache() -> String {
    let mut src = String::from(".code .at 0x11000\n_start:\n");
    for _ in 0..16 {
        src.push_str("  movi g1, 1\n");
    }
    src.push_str("  movi g0, 14\n  movi g1, 0\n  sys\n");
    let bin = assemble(&src).unwrap();
    let mut engine = engine_with(&bin, &RunInputs::new(), |c| c.bb_max = 64);
    let t = engine.run();
    assert_eq!(t.status, RunStatus::Aborted);
    assert!(engine.abort_reason.is_some());

    let case = load_corpus().into_iter().find(|c| c.name == "05_fib_calls").unwrap();
    let bin = assemble(&case.source).unwrap();
    let oracle = run_oracle(&bin, &case.inputs);
    let mut engine = engine_with(&bin, &case.inputs, |c| c.bb_max = 128);
    let t = engine.run();
    assert_equiv("fib with 128-byte cache", &oracle, &t);
    assert!(engine.cache.flushes > 0);
    assert!(engine.cache.peak_bytes <= 128);
    format!(
        "oversized block aborts; undersized cache equal after {} flushes, peak {} <= 128",
        engine.cache.flushes, engine.cache.peak_bytes
    )
}

// --- criterion 9: syscall classification audit ---

fn c9_classification() -> String {
    let expected: &[(u64, &str, Mode)] = &[
        (abi::SYS_READ, "read", Mode::Delegate),
        (abi::SYS_WRITE, "write", Mode::Delegate),
        (abi::SYS_OPEN, "open", Mode::Delegate),
        (abi::SYS_CLOSE, "close", Mode::Delegate),
        (abi::SYS_FSYNC, "fsync", Mode::Delegate),
        (abi::SYS_GETTIME, "gettime", Mode::Delegate),
        (abi::SYS_GETPID, "getpid", Mode::Delegate),
        (abi::SYS_MMAP, "mmap", Mode::Partial),
        (abi::SYS_MUNMAP, "munmap", Mode::Partial),
        (abi::SYS_MPROTECT, "mprotect", Mode::Partial),
        (abi::SYS_BRK, "brk", Mode::Partial),
        (abi::SYS_MSYNC, "msync", Mode::Partial),
        (abi::SYS_CLONE, "clone", Mode::Partial),
        (abi::SYS_EXIT, "exit", Mode::Partial),
        (abi::SYS_EXIT_GROUP, "exit_group", Mode::Partial),
        (abi::SYS_FUTEX, "futex", Mode::Partial),
        (abi::SYS_SIGACTION, "sigaction", Mode::Partial),
        (abi::SYS_ARCHCTL, "archctl", Mode::Emulate),
    ];
    assert_eq!(gateway::table().len(), expected.len());
    for (n, name, mode) in expected {
        let c = gateway::classify(*n).unwrap_or_else(|| panic!("{name} missing from table"));
        assert_eq!(c.name, *name);
        assert_eq!(c.mode, *mode, "{name} misclassified");
    }
    format!("{} syscalls classified as expected", expected.len())
}

// --- criterion 10: determinism ---

fn c10_determinism() -> String {
    let case = load_corpus().into_iter().find(|c| c.name == "22_mutex_counter").unwrap();
    let bin = assemble(&case.source).unwrap();
    let configs: [(u64, u64, u64, bool); 10] = [
        (0, 64, 512 * 1024, true),
        (1, 64, 512 * 1024, false),
        (42, 5, 512 * 1024, true),
        (7, 17, 4096, false),
        (0xdead_beef, 3, 1024, true),
        (99, 128, 512, false),
        (12345, 1, 512 * 1024, true),
        (6, 33, 2048, true),
        (u64::MAX, 64, 512 * 1024, false),
        (0x5eed, 9, 8192, true),
    ];
    for (i, &(seed, quantum, bb_max, traces)) in configs.iter().enumerate() {
        let run = || {
            let mut inputs = case.inputs.clone();
            inputs.seed = seed;
            inputs.quantum = quantum;
            let mut engine = engine_with(&bin, &inputs, |c| {
                c.bb_max = bb_max;
                c.traces_enabled = traces;
            });
            let t = engine.run();
            RunReport::from_engine(&engine, &t).to_text()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "config {i} differed across reruns");
    }
    "10 configurations, reports byte-identical across reruns".into()
}

#[test]
fn acceptance_gate() {
    let criteria: Vec<(&str, fn() -> String)> = vec![
        ("oracle equivalence", c1_oracle_equivalence),
        ("restriction enforcement", c2_restrictions),
        ("signal nesting matrix", c3_signal_matrix),
        ("toctou/iago containment", c4_adversaries),
        ("lock soundness", c5_lock_soundness),
        ("tls/tcs properties", c6_tls_tcs),
        ("memory mirror fuzz", c7_mirror),
        ("cache behavior", c8_cache),
        ("syscall classification", c9_classification),
        ("determinism", c10_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(detail) => println!("criterion {:>2} ({name}): PASS — {detail}", i + 1),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "<non-string panic>".into());
                println!("criterion {:>2} ({name}): FAIL — {msg}", i + 1);
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}
