//! ObservableTrace: the behavior contract both execution paths are held
//! to. Syscall and signal events are recorded per thread (so runs whose
//! thread interleavings differ only in unobservable ways still compare
//! equal), output byte streams globally.

use sha2::{Digest, Sha256};

pub type Tid = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Syscall { number: u64, name: &'static str, arg_digest: String, ret: i64 },
    Signal { signum: u64, handler_pc: u64, disposition: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Exited(i64),
    /// Terminated by an unhandled signal (default action).
    Killed(u64),
    /// Guest fault that could not be converted to a signal.
    Faulted,
    /// The enclave aborted (SSA exhaustion etc.). Translated path only.
    Aborted,
    /// No runnable thread and no pending event.
    Deadlocked,
    /// Instruction budget exhausted by the driver.
    TimedOut,
}

#[derive(Debug, Clone)]
pub struct ObservableTrace {
    pub status: RunStatus,
    pub retired: u64,
    pub events: Vec<(Tid, TraceEvent)>,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

impl Default for ObservableTrace {
    fn default() -> Self {
        ObservableTrace {
            status: RunStatus::Exited(0),
            retired: 0,
            events: Vec::new(),
            stdout: Vec::new(),
            stderr: Vec::new(),
        }
    }
}

pub fn digest_bytes(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let out = h.finalize();
    hex(&out[..8])
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a syscall's incoming registers, recorded with every syscall
/// event so argument-level divergence between execution paths is caught.
pub fn syscall_digest(number: u64, args: &[u64; 6]) -> String {
    let mut buf = Vec::with_capacity(56);
    buf.extend_from_slice(&number.to_le_bytes());
    for a in args {
        buf.extend_from_slice(&a.to_le_bytes());
    }
    digest_bytes(&[&buf])
}

impl ObservableTrace {
    pub fn record_syscall(
        &mut self,
        tid: Tid,
        number: u64,
        name: &'static str,
        arg_digest: String,
        ret: i64,
    ) {
        self.events.push((tid, TraceEvent::Syscall { number, name, arg_digest, ret }));
    }

    pub fn record_signal(&mut self, tid: Tid, signum: u64, handler_pc: u64, disposition: &'static str) {
        self.events.push((tid, TraceEvent::Signal { signum, handler_pc, disposition }));
    }

    /// Stable line-oriented serialization. Events are emitted grouped by
    /// thread, in per-thread program order.
    pub fn to_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        lines.push(format!("status: {}", status_str(self.status)));
        lines.push(format!("retired: {}", self.retired));
        let mut tids: Vec<Tid> = self.events.iter().map(|(t, _)| *t).collect();
        tids.sort_unstable();
        tids.dedup();
        for tid in tids {
            for (t, ev) in &self.events {
                if *t != tid {
                    continue;
                }
                match ev {
                    TraceEvent::Syscall { number, name, arg_digest, ret } => {
                        lines.push(format!("t{tid} sys {name} n={number} in={arg_digest} ret={ret}"))
                    }
                    TraceEvent::Signal { signum, handler_pc, disposition } => lines.push(format!(
                        "t{tid} sig {signum} handler=0x{handler_pc:x} {disposition}"
                    )),
                }
            }
        }
        lines.push(format!("stdout: {}", hex(&self.stdout)));
        lines.push(format!("stderr: {}", hex(&self.stderr)));
        lines
    }

    pub fn digest(&self) -> String {
        let joined = self.to_lines().join("\n");
        digest_bytes(&[joined.as_bytes()])
    }
}

pub fn status_str(s: RunStatus) -> String {
    match s {
        RunStatus::Exited(c) => format!("exit:{c}"),
        RunStatus::Killed(sig) => format!("killed:{}", crate::abi::signal_name(sig)),
        RunStatus::Faulted => "faulted".into(),
        RunStatus::Aborted => "aborted".into(),
        RunStatus::Deadlocked => "deadlocked".into(),
        RunStatus::TimedOut => "timeout".into(),
    }
}
