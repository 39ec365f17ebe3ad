//! Translation cache under pressure: a block that cannot fit aborts the
//! run cleanly, and an undersized cache just flushes and retranslates
//! without changing guest-visible behavior.

mod common;

use common::{assert_equiv, load_corpus, run_oracle, RunInputs};
use ratel_core::engine::{Engine, EngineConfig};
use ratel_core::gisa::asm::assemble;
use ratel_core::hostsim::HostWorld;
use ratel_core::trace::RunStatus;

fn engine_with_cache(
    bin: &ratel_core::gisa::binfmt::GuestBinary,
    inputs: &RunInputs,
    bb_max: u64,
    traces: bool,
) -> Engine {
    let mut cfg = EngineConfig {
        seed: inputs.seed,
        quantum: inputs.quantum,
        fuel: inputs.fuel,
        ..Default::default()
    };
    cfg.bb_max = bb_max;
    cfg.traces_enabled = traces;
    let mut host = HostWorld::new(cfg.machine.public_size);
    host.vfs = inputs.vfs();
    host.script = inputs.script.clone();
    Engine::new(bin, host, cfg).expect("engine setup")
}

fn corpus_case(name: &str) -> common::CorpusCase {
    load_corpus().into_iter().find(|c| c.name == name).expect("corpus program")
}

/// A straight-line block bigger than the whole cache can never be
/// translated: the run aborts with a reason instead of looping.
#[test]
fn block_larger_than_cache_aborts_with_reason() {
    // 16 instructions with no branch: one block, 128 bytes of source.
    let mut src = String::from(".code .at 0x11000\n_start:\n");
    for _ in 0..16 {
        src.push_str("  movi g1, 1\n");
    }
    src.push_str("  movi g0, 14\n  movi g1, 0\n  sys\n");
    let bin = assemble(&src).unwrap();
    let mut engine = engine_with_cache(&bin, &RunInputs::new(), 64, false);
    let trace = engine.run();
    assert_eq!(trace.status, RunStatus::Aborted);
    let reason = engine.abort_reason.as_deref().expect("abort carries a reason");
    assert!(!reason.is_empty());
}

/// A cache sized for roughly two blocks forces constant eviction, yet
/// the observable run is unchanged and usage never exceeds the budget.
#[test]
fn undersized_cache_flushes_but_matches_reference() {
    for name in ["05_fib_calls", "22_mutex_counter"] {
        let case = corpus_case(name);
        let bin = assemble(&case.source).unwrap();
        let oracle = run_oracle(&bin, &case.inputs);
        let mut engine = engine_with_cache(&bin, &case.inputs, 128, false);
        let trace = engine.run();
        assert_equiv(&format!("{name} (128-byte cache)"), &oracle, &trace);
        assert!(engine.cache.flushes > 0, "{name}: tiny cache must have flushed");
        assert!(
            engine.cache.peak_bytes <= 128,
            "{name}: peak {} exceeds the budget",
            engine.cache.peak_bytes
        );
        assert!(engine.cache.blocks_translated > engine.cache.block_count() as u64);
    }
}

/// Hot-path trace formation is an optimization only: counters move but
/// the observable run is identical with traces on or off.
#[test]
fn trace_formation_changes_counters_not_behavior() {
    let src = "\
.code .at 0x11000
_start:
  movi g1, 0
  movi g2, 2000
  movi g3, 1
loop:
  add g1, g3
  cmp g1, g2
  jnz loop
  movi g0, 14
  movi g1, 0
  sys
";
    let bin = assemble(src).unwrap();
    let inputs = RunInputs::new();
    let oracle = run_oracle(&bin, &inputs);

    let mut plain = engine_with_cache(&bin, &inputs, EngineConfig::default().bb_max, false);
    let t_plain = plain.run();
    assert_equiv("traces off", &oracle, &t_plain);
    assert_eq!(plain.cache.traces_formed, 0);

    let mut hot = engine_with_cache(&bin, &inputs, EngineConfig::default().bb_max, true);
    let t_hot = hot.run();
    assert_equiv("traces on", &oracle, &t_hot);
    assert!(hot.cache.traces_formed > 0, "loopy program must form a trace");
    assert!(hot.cache.trace_hits > 0);
}
