//! Shared harness: run a guest program on both the reference
//! interpreter and the enclave engine with identical inputs, and
//! compare the observable traces.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use ratel_core::engine::{Engine, EngineConfig};
use ratel_core::gisa::asm::assemble;
use ratel_core::gisa::binfmt::GuestBinary;
use ratel_core::gisa::interp::{Oracle, OracleConfig};
use ratel_core::hostsim::{parse_manifest, parse_script, HostWorld, Trigger, Vfs};
use ratel_core::trace::ObservableTrace;

#[derive(Clone, Default)]
pub struct RunInputs {
    pub stdin: Vec<u8>,
    pub files: Vec<(String, Vec<u8>)>,
    pub script: Vec<Trigger>,
    pub seed: u64,
    pub quantum: u64,
    pub fuel: u64,
}

impl RunInputs {
    pub fn new() -> RunInputs {
        RunInputs { quantum: ratel_core::sched::DEFAULT_QUANTUM, fuel: 2_000_000, ..Default::default() }
    }

    pub fn vfs(&self) -> Vfs {
        let mut vfs = Vfs::new();
        vfs.stdin = self.stdin.clone();
        for (path, bytes) in &self.files {
            vfs.preload(path, bytes.clone());
        }
        vfs
    }
}

pub fn run_oracle(bin: &GuestBinary, inputs: &RunInputs) -> ObservableTrace {
    let cfg = OracleConfig {
        seed: inputs.seed,
        quantum: inputs.quantum,
        fuel: inputs.fuel,
        ..Default::default()
    };
    Oracle::new(bin, inputs.vfs(), inputs.script.clone(), cfg)
        .expect("oracle setup")
        .run()
}

pub fn make_engine(bin: &GuestBinary, inputs: &RunInputs) -> Engine {
    let mut host = HostWorld::new(EngineConfig::default().machine.public_size);
    host.vfs = inputs.vfs();
    host.script = inputs.script.clone();
    let cfg = EngineConfig {
        seed: inputs.seed,
        quantum: inputs.quantum,
        fuel: inputs.fuel,
        ..Default::default()
    };
    Engine::new(bin, host, cfg).expect("engine setup")
}

pub fn run_engine(bin: &GuestBinary, inputs: &RunInputs) -> ObservableTrace {
    make_engine(bin, inputs).run()
}

/// Panic with a line-by-line diff if the two traces differ.
pub fn assert_equiv(name: &str, oracle: &ObservableTrace, engine: &ObservableTrace) {
    if oracle.digest() == engine.digest() {
        return;
    }
    let a = oracle.to_lines();
    let b = engine.to_lines();
    for i in 0..a.len().max(b.len()) {
        let la = a.get(i).map(String::as_str).unwrap_or("<missing>");
        let lb = b.get(i).map(String::as_str).unwrap_or("<missing>");
        if la != lb {
            panic!(
                "{name}: traces diverge at line {i}\n  oracle: {la}\n  engine: {lb}\n\
                 --- oracle ---\n{}\n--- engine ---\n{}",
                a.join("\n"),
                b.join("\n")
            );
        }
    }
    panic!("{name}: digests differ but lines match?");
}

pub fn check_program(name: &str, source: &str, inputs: &RunInputs) {
    let bin = assemble(source).unwrap_or_else(|e| panic!("{name}: {e}"));
    let o = run_oracle(&bin, inputs);
    let e = run_engine(&bin, inputs);
    assert_equiv(name, &o, &e);
}

// --- corpus loading ---

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

pub struct CorpusCase {
    pub name: String,
    pub source: String,
    pub inputs: RunInputs,
}

/// Load every `.gasm` in the corpus with its optional `.stdin`,
/// `.files` (manifest) and `.script` companions.
pub fn load_corpus() -> Vec<CorpusCase> {
    let dir = corpus_dir();
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("corpus dir {}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().map_or(false, |x| x == "gasm"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|path| {
            let name = path.file_stem().unwrap().to_string_lossy().into_owned();
            let source = fs::read_to_string(&path).unwrap();
            let mut inputs = RunInputs::new();
            if let Ok(b) = fs::read(path.with_extension("stdin")) {
                inputs.stdin = b;
            }
            if let Ok(t) = fs::read_to_string(path.with_extension("files")) {
                inputs.files = parse_manifest(&t).unwrap();
            }
            if let Ok(t) = fs::read_to_string(path.with_extension("script")) {
                inputs.script = parse_script(&t).unwrap();
            }
            CorpusCase { name, source, inputs }
        })
        .collect()
}
pub mod mirror;
