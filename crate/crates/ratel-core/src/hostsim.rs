//! The untrusted world: deterministic virtual filesystem, virtual clock,
//! OCALL servicing, the thread-creation service, the scripted event
//! injector, and the adversary that attacks public memory and syscall
//! returns.
//!
//! Everything here runs conceptually *outside* the enclave: whenever it
//! touches guest memory it does so through the machine as `Accessor::Host`,
//! so any attempt on private memory faults (R1) and is counted.

use std::collections::BTreeMap;

use crate::abi::{self, PAGE_SIZE};
use crate::machine::{Accessor, Machine, MachineError, PUBLIC_BASE};
use crate::trace::Tid;

// Public arena split: staging for marshaled syscall arguments, heap for
// public twins of mapped regions and service records.
pub const STAGE_BASE: u64 = PUBLIC_BASE;
pub const STAGE_SIZE: u64 = 4 * 1024 * 1024;
pub const PUB_HEAP_BASE: u64 = PUBLIC_BASE + STAGE_SIZE;

/// Max bytes marshaled per buffer.
pub const MAX_MARSHAL: u64 = 1024 * 1024;

// ---------------------------------------------------------------------
// Virtual filesystem
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum FdKind {
    Stdin,
    Stdout,
    Stderr,
    File { path: String },
}

#[derive(Debug, Clone)]
struct FdEntry {
    kind: FdKind,
    cursor: u64,
    flags: u64,
}

#[derive(Debug, Default)]
pub struct Vfs {
    files: BTreeMap<String, Vec<u8>>,
    fds: BTreeMap<i64, FdEntry>,
    next_fd: i64,
    pub stdin: Vec<u8>,
    stdin_cursor: u64,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

impl Vfs {
    pub fn new() -> Vfs {
        let mut vfs = Vfs { next_fd: 3, ..Default::default() };
        vfs.fds.insert(0, FdEntry { kind: FdKind::Stdin, cursor: 0, flags: 0 });
        vfs.fds.insert(1, FdEntry { kind: FdKind::Stdout, cursor: 0, flags: 0 });
        vfs.fds.insert(2, FdEntry { kind: FdKind::Stderr, cursor: 0, flags: 0 });
        vfs
    }

    pub fn preload(&mut self, path: &str, content: Vec<u8>) {
        self.files.insert(path.to_string(), content);
    }

    pub fn file(&self, path: &str) -> Option<&Vec<u8>> {
        self.files.get(path)
    }

    pub fn open(&mut self, path: &str, flags: u64) -> i64 {
        if !self.files.contains_key(path) {
            if flags & abi::O_CREAT != 0 {
                self.files.insert(path.to_string(), Vec::new());
            } else {
                return abi::E_NOENT;
            }
        }
        let fd = self.next_fd;
        self.next_fd += 1;
        self.fds.insert(fd, FdEntry { kind: FdKind::File { path: path.to_string() }, cursor: 0, flags });
        fd
    }

    pub fn read(&mut self, fd: i64, len: u64) -> Result<Vec<u8>, i64> {
        let entry = self.fds.get_mut(&fd).ok_or(abi::E_BADF)?;
        match entry.kind.clone() {
            FdKind::Stdin => {
                let avail = self.stdin.len() as u64 - self.stdin_cursor;
                let n = len.min(avail);
                let start = self.stdin_cursor as usize;
                self.stdin_cursor += n;
                Ok(self.stdin[start..start + n as usize].to_vec())
            }
            FdKind::File { path } => {
                let data = self.files.get(&path).ok_or(abi::E_BADF)?;
                let avail = (data.len() as u64).saturating_sub(entry.cursor);
                let n = len.min(avail);
                let start = entry.cursor as usize;
                entry.cursor += n;
                Ok(data[start..start + n as usize].to_vec())
            }
            _ => Err(abi::E_BADF),
        }
    }

    pub fn write(&mut self, fd: i64, bytes: &[u8]) -> i64 {
        let entry = match self.fds.get_mut(&fd) {
            Some(e) => e,
            None => return abi::E_BADF,
        };
        match entry.kind.clone() {
            FdKind::Stdout => {
                self.stdout.extend_from_slice(bytes);
                bytes.len() as i64
            }
            FdKind::Stderr => {
                self.stderr.extend_from_slice(bytes);
                bytes.len() as i64
            }
            FdKind::File { path } => {
                let data = self.files.get_mut(&path).expect("open file exists");
                let cur = entry.cursor as usize;
                if data.len() < cur + bytes.len() {
                    data.resize(cur + bytes.len(), 0);
                }
                data[cur..cur + bytes.len()].copy_from_slice(bytes);
                entry.cursor += bytes.len() as u64;
                bytes.len() as i64
            }
            FdKind::Stdin => abi::E_BADF,
        }
    }

    /// Positioned write used by msync/munmap flushes of file mappings.
    pub fn write_at(&mut self, path: &str, offset: u64, bytes: &[u8]) {
        let data = self.files.entry(path.to_string()).or_default();
        let off = offset as usize;
        if data.len() < off + bytes.len() {
            data.resize(off + bytes.len(), 0);
        }
        data[off..off + bytes.len()].copy_from_slice(bytes);
    }

    pub fn close(&mut self, fd: i64) -> i64 {
        if fd <= 2 {
            return abi::E_BADF;
        }
        if self.fds.remove(&fd).is_some() {
            0
        } else {
            abi::E_BADF
        }
    }

    pub fn fsync(&mut self, fd: i64) -> i64 {
        if self.fds.contains_key(&fd) {
            0
        } else {
            abi::E_BADF
        }
    }

    pub fn path_of(&self, fd: i64) -> Option<String> {
        match self.fds.get(&fd)?.kind {
            FdKind::File { ref path } => Some(path.clone()),
            _ => None,
        }
    }

    pub fn fd_flags(&self, fd: i64) -> Option<u64> {
        self.fds.get(&fd).map(|e| e.flags)
    }
}

// ---------------------------------------------------------------------
// Event script
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvOp {
    Toctou,
    LockFlip,
    CloneArgMutate,
    IagoNext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptAction {
    Signal(u64),
    Adversary(AdvOp),
}

#[derive(Debug, Clone)]
pub struct Trigger {
    /// None = "any": fires on the global retired count, delivered to the
    /// running thread. Some(id): fires on that thread's retired count.
    pub thread: Option<Tid>,
    pub at: u64,
    pub action: ScriptAction,
    pub fired: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("script line {line}: {msg}")]
pub struct ScriptError {
    pub line: usize,
    pub msg: String,
}

/// One trigger per line: `thread:<id|any> at:<count> do:<signal NAME|adversary OP>`
pub fn parse_script(text: &str) -> Result<Vec<Trigger>, ScriptError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut thread = None;
        let mut at = None;
        let mut action = None;
        let mut any = false;
        for field in t.split_whitespace() {
            if let Some(v) = field.strip_prefix("thread:") {
                if v == "any" {
                    any = true;
                } else {
                    thread = Some(v.parse::<Tid>().map_err(|_| ScriptError {
                        line,
                        msg: format!("bad thread `{v}`"),
                    })?);
                }
            } else if let Some(v) = field.strip_prefix("at:") {
                at = Some(v.parse::<u64>().map_err(|_| ScriptError {
                    line,
                    msg: format!("bad count `{v}`"),
                })?);
            } else if let Some(v) = field.strip_prefix("do:") {
                action = Some(parse_action(v, line)?);
            } else {
                return Err(ScriptError { line, msg: format!("bad field `{field}`") });
            }
        }
        if !any && thread.is_none() {
            return Err(ScriptError { line, msg: "missing thread:".into() });
        }
        let at = at.ok_or(ScriptError { line, msg: "missing at:".into() })?;
        let action = action.ok_or(ScriptError { line, msg: "missing do:".into() })?;
        out.push(Trigger { thread, at, action, fired: false });
    }
    Ok(out)
}

/// Shared trigger evaluation: per-thread triggers fire on that thread's
/// retired count, `any` triggers on the global count (delivered to the
/// running thread). Each trigger fires at most once.
pub fn due_actions(
    script: &mut [Trigger],
    tid: Tid,
    tid_retired: u64,
    global: u64,
) -> Vec<ScriptAction> {
    let mut due = Vec::new();
    for trig in script.iter_mut() {
        if trig.fired {
            continue;
        }
        let hit = match trig.thread {
            Some(t) => t == tid && tid_retired >= trig.at,
            None => global >= trig.at,
        };
        if hit {
            trig.fired = true;
            due.push(trig.action);
        }
    }
    due
}

fn parse_action(v: &str, line: usize) -> Result<ScriptAction, ScriptError> {
    if let Some(sig) = abi::signal_by_name(v) {
        return Ok(ScriptAction::Signal(sig));
    }
    let op = match v {
        "toctou" => AdvOp::Toctou,
        "lockflip" => AdvOp::LockFlip,
        "clonemut" => AdvOp::CloneArgMutate,
        "iago" => AdvOp::IagoNext,
        _ => return Err(ScriptError { line, msg: format!("unknown action `{v}`") }),
    };
    Ok(ScriptAction::Adversary(op))
}

// ---------------------------------------------------------------------
// Adversary
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdversaryMode {
    #[default]
    Off,
    /// Flip staged public bytes after the raw result is produced.
    ToctouMutate,
    /// Same, but in the window between the OS return and the gateway's
    /// copy-in (the worst interleaving the model permits).
    ToctouMutateStress,
    /// Malicious syscall returns.
    IagoReturn(IagoKind),
    /// Public-lock-word resets (only effective against the insecure
    /// baselines).
    LockwordFlip,
    /// Mutate the public copy of clone arguments before child entry.
    CloneArgMutate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IagoKind {
    ZeroAddr,
    RegionAOverlap,
    Misaligned,
    OversizedLen,
}

pub fn parse_adversary(s: &str) -> Option<AdversaryMode> {
    Some(match s {
        "off" => AdversaryMode::Off,
        "toctou" => AdversaryMode::ToctouMutate,
        "toctou-stress" => AdversaryMode::ToctouMutateStress,
        "iago-zero" => AdversaryMode::IagoReturn(IagoKind::ZeroAddr),
        "iago-engine" => AdversaryMode::IagoReturn(IagoKind::RegionAOverlap),
        "iago-misaligned" => AdversaryMode::IagoReturn(IagoKind::Misaligned),
        "iago-oversize" => AdversaryMode::IagoReturn(IagoKind::OversizedLen),
        "lockflip" => AdversaryMode::LockwordFlip,
        "clonemut" => AdversaryMode::CloneArgMutate,
        _ => return None,
    })
}

#[derive(Debug, Default)]
pub struct AdversaryStats {
    pub public_mutations: u64,
    pub private_attempts: u64,
    pub iago_injections: u64,
}

// ---------------------------------------------------------------------
// Public memory allocators
// ---------------------------------------------------------------------

/// Stack-discipline staging arena: nested marshaled calls (a signal
/// handler issuing syscalls mid-OCALL) stack on top of the outer call.
#[derive(Debug)]
pub struct StageArena {
    top: u64,
    stack: Vec<(u64, u64)>, // (base, len)
}

impl StageArena {
    pub fn new() -> StageArena {
        StageArena { top: STAGE_BASE, stack: Vec::new() }
    }

    pub fn push(&mut self, len: u64) -> Option<u64> {
        let base = self.top;
        if base + len > STAGE_BASE + STAGE_SIZE {
            return None;
        }
        self.top += len;
        self.stack.push((base, len));
        Some(base)
    }

    /// Pop the most recent staging record, returning its range so the
    /// gateway can zero it.
    pub fn pop(&mut self) -> Option<(u64, u64)> {
        let (base, len) = self.stack.pop()?;
        self.top = base;
        Some((base, len))
    }
}

impl Default for StageArena {
    fn default() -> Self {
        Self::new()
    }
}

/// First-fit public heap for twins and service records.
#[derive(Debug)]
pub struct PublicHeap {
    next: u64,
    limit: u64,
    free: Vec<(u64, u64)>,
}

impl PublicHeap {
    pub fn new(public_size: u64) -> PublicHeap {
        PublicHeap { next: PUB_HEAP_BASE, limit: PUBLIC_BASE + public_size, free: Vec::new() }
    }

    pub fn alloc(&mut self, len: u64) -> Option<u64> {
        let len = crate::abi::page_align_up(len.max(1));
        if let Some(i) = self.free.iter().position(|&(_, l)| l >= len) {
            let (base, l) = self.free.remove(i);
            if l > len {
                self.free.push((base + len, l - len));
            }
            return Some(base);
        }
        if self.next + len > self.limit {
            return None;
        }
        let base = self.next;
        self.next += len;
        Some(base)
    }

    pub fn free(&mut self, base: u64, len: u64) {
        self.free.push((base, crate::abi::page_align_up(len.max(1))));
    }
}

// ---------------------------------------------------------------------
// Host world
// ---------------------------------------------------------------------

/// Record the host keeps per created thread: the public copy of the
/// clone arguments and the public mirror of the ctid word.
#[derive(Debug, Clone)]
pub struct HostThreadRecord {
    pub tid: Tid,
    pub args_va: u64, // public: [entry_pc, stack_top, ctid_va]
    pub ctid_mirror_va: u64,
}

pub struct HostWorld {
    pub vfs: Vfs,
    pub clock: u64,
    pub script: Vec<Trigger>,
    pub adversary: AdversaryMode,
    pub adv_stats: AdversaryStats,
    pub stage: StageArena,
    pub heap: PublicHeap,
    pub threads: BTreeMap<Tid, HostThreadRecord>,
    pub serve_count: u64,
    /// Every (va, len) range the host touched, for the no-private-leak audit.
    pub touched: Vec<(u64, u64)>,
}

impl HostWorld {
    pub fn new(public_size: u64) -> HostWorld {
        HostWorld {
            vfs: Vfs::new(),
            clock: 0,
            script: Vec::new(),
            adversary: AdversaryMode::Off,
            adv_stats: AdversaryStats::default(),
            stage: StageArena::new(),
            heap: PublicHeap::new(public_size),
            threads: BTreeMap::new(),
            serve_count: 0,
            touched: Vec::new(),
        }
    }

    pub fn tick(&mut self, n: u64) {
        self.clock += n;
    }

    /// Collect script actions that became due. `tid_retired` is the
    /// running thread's retired count, `global` the global one.
    pub fn due_actions(&mut self, tid: Tid, tid_retired: u64, global: u64) -> Vec<ScriptAction> {
        due_actions(&mut self.script, tid, tid_retired, global)
    }

    pub fn host_read(&mut self, m: &mut Machine, va: u64, len: usize) -> Result<Vec<u8>, MachineError> {
        self.touched.push((va, len as u64));
        let mut buf = vec![0u8; len];
        m.read(Accessor::Host, va, &mut buf)?;
        Ok(buf)
    }

    pub fn host_write(&mut self, m: &mut Machine, va: u64, bytes: &[u8]) -> Result<(), MachineError> {
        self.touched.push((va, bytes.len() as u64));
        let r = m.write(Accessor::Host, va, bytes);
        if matches!(r, Err(MachineError::AccessFault { .. })) && m.is_private(va) {
            self.adv_stats.private_attempts += 1;
        }
        r
    }

    /// OS half of a partial mmap: create a public region (filled with
    /// file content when file-backed) and return its address. Iago
    /// adversaries corrupt the returned address here.
    pub fn serve_mmap(
        &mut self,
        m: &mut Machine,
        len: u64,
        fd_path: Option<(&str, u64)>,
        engine_base: u64,
    ) -> i64 {
        self.serve_count += 1;
        let real = match self.heap.alloc(len) {
            Some(a) => a,
            None => return abi::E_NOMEM,
        };
        if let Some((path, offset)) = fd_path {
            let content = self.vfs.file(path).cloned().unwrap_or_default();
            let start = (offset as usize).min(content.len());
            let end = (start + len as usize).min(content.len());
            let slice = content[start..end].to_vec();
            let _ = self.host_write(m, real, &slice);
        }
        match self.adversary {
            AdversaryMode::IagoReturn(kind) => {
                self.adv_stats.iago_injections += 1;
                match kind {
                    IagoKind::ZeroAddr => 0,
                    IagoKind::RegionAOverlap => engine_base as i64,
                    IagoKind::Misaligned => (real + 1) as i64,
                    IagoKind::OversizedLen => real as i64,
                }
            }
            _ => real as i64,
        }
    }

    pub fn serve_munmap(&mut self, public_va: u64, len: u64) -> i64 {
        self.serve_count += 1;
        self.heap.free(public_va, len);
        0
    }

    /// Thread-creation service: record the clone args publicly, allocate
    /// the public ctid mirror, and (conceptually) start the OS thread.
    pub fn serve_clone(&mut self, m: &mut Machine, tid: Tid, entry_pc: u64, stack_top: u64, ctid_va: u64) -> Option<HostThreadRecord> {
        self.serve_count += 1;
        let args_va = self.heap.alloc(32)?;
        let ctid_mirror_va = self.heap.alloc(8)?;
        let mut words = Vec::new();
        words.extend_from_slice(&entry_pc.to_le_bytes());
        words.extend_from_slice(&stack_top.to_le_bytes());
        words.extend_from_slice(&ctid_va.to_le_bytes());
        self.host_write(m, args_va, &words).ok()?;
        self.host_write(m, ctid_mirror_va, &tid.to_le_bytes()).ok()?;
        if self.adversary == AdversaryMode::CloneArgMutate {
            // Flip a byte of the public argument copy before child entry.
            let _ = self.host_write(m, args_va, &[0xff]);
            self.adv_stats.public_mutations += 1;
        }
        let rec = HostThreadRecord { tid, args_va, ctid_mirror_va };
        self.threads.insert(tid, rec.clone());
        Some(rec)
    }

    pub fn serve_thread_exit(&mut self, m: &mut Machine, tid: Tid) {
        self.serve_count += 1;
        if let Some(rec) = self.threads.remove(&tid) {
            let _ = self.host_write(m, rec.ctid_mirror_va, &0u64.to_le_bytes());
            self.heap.free(rec.args_va, 32);
            self.heap.free(rec.ctid_mirror_va, 8);
        }
    }

    /// Read the public ctid mirror (test hook).
    pub fn ctid_mirror(&self, tid: Tid) -> Option<u64> {
        self.threads.get(&tid).map(|r| r.ctid_mirror_va)
    }

    /// TOCTOU hook: flip every byte of a staged public range.
    pub fn adversary_mutate_range(&mut self, m: &mut Machine, base: u64, len: u64) {
        if len == 0 {
            return;
        }
        if let Ok(mut bytes) = self.host_read(m, base, len as usize) {
            for b in bytes.iter_mut() {
                *b ^= 0xff;
            }
            if self.host_write(m, base, &bytes).is_ok() {
                self.adv_stats.public_mutations += 1;
            }
        }
    }

    /// Adversary probe used by the containment tests: attempt a direct
    /// write to an arbitrary (possibly private) address.
    pub fn adversary_poke(&mut self, m: &mut Machine, va: u64, byte: u8) -> bool {
        self.host_write(m, va, &[byte]).is_ok()
    }
}

/// Parse an inline VFS manifest: `path=hex-bytes` per line.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (path, hex) = t
            .split_once('=')
            .ok_or_else(|| format!("manifest line {}: missing `=`", lineno + 1))?;
        let hex = hex.trim();
        if hex.len() % 2 != 0 {
            return Err(format!("manifest line {}: odd hex length", lineno + 1));
        }
        let mut bytes = Vec::with_capacity(hex.len() / 2);
        for i in (0..hex.len()).step_by(2) {
            let b = u8::from_str_radix(&hex[i..i + 2], 16)
                .map_err(|_| format!("manifest line {}: bad hex", lineno + 1))?;
            bytes.push(b);
        }
        out.push((path.trim().to_string(), bytes));
    }
    Ok(out)
}

#[allow(unused)]
fn _align_check() {
    // STAGE + heap must fit default public size.
    const _: () = assert!(STAGE_SIZE < 16 * 1024 * 1024);
    const _: () = assert!(PAGE_SIZE == 4096);
}
