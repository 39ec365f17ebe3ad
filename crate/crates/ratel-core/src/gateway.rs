//! Syscall gateway: the classification table (checked in as a plain
//! data file), result sanitizers applied to everything the host hands
//! back, per-boundary counters, and the phase tracker that pins the
//! mandatory copy-in → sanitize → resume order on every host call.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::abi;

/// The classification table, human-readable and dumpable as-is.
pub const TABLE_TEXT: &str = include_str!("syscalls.tab");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Delegate,
    Partial,
    Emulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Ocall,
    Local,
}

#[derive(Debug, Clone)]
pub struct SyscallClass {
    pub number: u64,
    pub name: String,
    pub mode: Mode,
    pub route: Route,
    pub marshal: String,
}

fn parse_table(text: &str) -> Vec<SyscallClass> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut f = line.split_whitespace();
        let number: u64 = f.next().unwrap().parse().expect("syscall table: bad number");
        let name = f.next().expect("syscall table: missing name").to_string();
        let mode = match f.next().expect("syscall table: missing mode") {
            "delegate" => Mode::Delegate,
            "partial" => Mode::Partial,
            "emulate" => Mode::Emulate,
            m => panic!("syscall table: unknown mode {m}"),
        };
        let route = match f.next().expect("syscall table: missing route") {
            "ocall" => Route::Ocall,
            "local" => Route::Local,
            r => panic!("syscall table: unknown route {r}"),
        };
        let marshal = f.next().unwrap_or("-").to_string();
        out.push(SyscallClass { number, name, mode, route, marshal });
    }
    out
}

pub fn table() -> &'static [SyscallClass] {
    static T: OnceLock<Vec<SyscallClass>> = OnceLock::new();
    T.get_or_init(|| parse_table(TABLE_TEXT))
}

pub fn classify(n: u64) -> Option<&'static SyscallClass> {
    table().iter().find(|c| c.number == n)
}

// --- sanitizers ---
//
// Host return values are untrusted. Each rule names what it rejects so
// the reject shows up in reports with a reason.

pub type SanitizeResult = Result<(), &'static str>;

/// Plain integer return (errno or count). Anything below the known
/// errno range is a fabricated value.
pub fn sanitize_ret(ret: i64) -> SanitizeResult {
    if ret < abi::E_RANGE_MIN {
        return Err("return below errno range");
    }
    Ok(())
}

/// Byte-count return for read-like calls: can never exceed what was
/// asked for, nor what was actually staged.
pub fn sanitize_count(ret: i64, requested: u64, staged: u64) -> SanitizeResult {
    sanitize_ret(ret)?;
    if ret > 0 && (ret as u64 > requested || ret as u64 > staged) {
        return Err("count exceeds requested length");
    }
    Ok(())
}

/// Address returned by the host for a shared mapping. Must be a real,
/// page-aligned public address that overlaps nothing we already track
/// (`conflicts` closes over the engine's procmap mirror and twin list).
pub fn sanitize_host_addr(
    addr: u64,
    len: u64,
    public_base: u64,
    public_size: u64,
    conflicts: impl Fn(u64, u64) -> bool,
) -> SanitizeResult {
    if addr == 0 {
        return Err("null address");
    }
    if !abi::is_page_aligned(addr) {
        return Err("misaligned address");
    }
    if addr < public_base || addr.saturating_add(len) > public_base + public_size {
        return Err("address outside public range");
    }
    if conflicts(addr, len) {
        return Err("address overlaps tracked memory");
    }
    Ok(())
}

// --- ocall phase tracking ---

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Staged,
    Served,
    CopiedIn,
    Sanitized,
}

/// Enforces the invariant order of every host transition:
/// stage → serve → copy results into private memory → sanitize →
/// resume the guest. Panics on any out-of-order step; that would be an
/// engine bug, not a guest or host condition.
pub struct PhaseTracker {
    phase: Phase,
    pub completed: u64,
}

impl PhaseTracker {
    pub fn new() -> PhaseTracker {
        PhaseTracker { phase: Phase::Idle, completed: 0 }
    }

    pub fn stage(&mut self) {
        assert_eq!(self.phase, Phase::Idle, "ocall staged while another in flight");
        self.phase = Phase::Staged;
    }

    pub fn serve(&mut self) {
        assert_eq!(self.phase, Phase::Staged, "host served before staging");
        self.phase = Phase::Served;
    }

    pub fn copy_in(&mut self) {
        assert_eq!(self.phase, Phase::Served, "copy-in before host served");
        self.phase = Phase::CopiedIn;
    }

    pub fn sanitize(&mut self) {
        assert_eq!(self.phase, Phase::CopiedIn, "sanitize before copy-in");
        self.phase = Phase::Sanitized;
    }

    pub fn resume(&mut self) {
        assert_eq!(self.phase, Phase::Sanitized, "resume before sanitize");
        self.phase = Phase::Idle;
        self.completed += 1;
    }
}

impl Default for PhaseTracker {
    fn default() -> Self {
        PhaseTracker::new()
    }
}

// --- counters ---

#[derive(Debug, Default)]
pub struct GatewayStats {
    pub ocalls: u64,
    pub ecalls: u64,
    pub sanitize_rejects: u64,
    pub unsupported: u64,
    pub per_syscall: BTreeMap<String, u64>,
    /// Bytes copied private → staging (arguments going out).
    pub bytes_staged_out: u64,
    /// Bytes copied staging → private (results coming back).
    pub bytes_copied_in: u64,
}

impl GatewayStats {
    pub fn bump(&mut self, name: &str) {
        *self.per_syscall.entry(name.to_string()).or_insert(0) += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gisa::interp::sys_name;
    use crate::machine::PUBLIC_BASE;

    #[test]
    fn table_covers_every_syscall_exactly_once() {
        let t = table();
        assert_eq!(t.len(), 18);
        for n in 0..18u64 {
            let c = classify(n).unwrap();
            assert_eq!(c.number, n);
            assert_eq!(c.name, sys_name(n), "table/dispatcher name mismatch for {n}");
        }
        assert!(classify(18).is_none());
        assert!(classify(u64::MAX).is_none());
    }

    #[test]
    fn modes_and_routes_are_consistent() {
        for c in table() {
            match c.mode {
                // Pure forwarding always needs the host.
                Mode::Delegate => assert_eq!(c.route, Route::Ocall, "{}", c.name),
                // Fully emulated calls must never leave the enclave.
                Mode::Emulate => assert_eq!(c.route, Route::Local, "{}", c.name),
                Mode::Partial => {}
            }
        }
        // The calls whose state is entirely enclave-resident.
        for name in ["mprotect", "brk", "futex", "sigaction", "archctl"] {
            let c = table().iter().find(|c| c.name == name).unwrap();
            assert_eq!(c.route, Route::Local, "{name} must not ocall");
        }
    }

    #[test]
    fn ret_sanitizer_bounds() {
        assert!(sanitize_ret(0).is_ok());
        assert!(sanitize_ret(i64::MAX).is_ok());
        assert!(sanitize_ret(abi::E_RANGE_MIN).is_ok());
        assert!(sanitize_ret(abi::E_RANGE_MIN - 1).is_err());
        assert!(sanitize_ret(i64::MIN).is_err());
    }

    #[test]
    fn count_sanitizer_rejects_oversize() {
        assert!(sanitize_count(100, 100, 100).is_ok());
        assert!(sanitize_count(0, 100, 100).is_ok());
        assert!(sanitize_count(abi::E_BADF, 100, 100).is_ok());
        assert!(sanitize_count(101, 100, 101).is_err());
        assert!(sanitize_count(50, 100, 49).is_err());
    }

    #[test]
    fn host_addr_sanitizer() {
        let no = |_: u64, _: u64| false;
        let yes = |_: u64, _: u64| true;
        let (pb, ps) = (PUBLIC_BASE, 16 * 1024 * 1024);
        assert!(sanitize_host_addr(pb + 0x1000, 0x1000, pb, ps, no).is_ok());
        assert!(sanitize_host_addr(0, 0x1000, pb, ps, no).is_err());
        assert!(sanitize_host_addr(pb + 0x1001, 0x1000, pb, ps, no).is_err());
        assert!(sanitize_host_addr(pb - 0x1000, 0x1000, pb, ps, no).is_err());
        assert!(sanitize_host_addr(pb + ps - 0x800, 0x1000, pb, ps, no).is_err());
        assert!(sanitize_host_addr(pb + 0x1000, 0x1000, pb, ps, yes).is_err());
    }

    #[test]
    fn phase_tracker_happy_path() {
        let mut pt = PhaseTracker::new();
        for _ in 0..3 {
            pt.stage();
            pt.serve();
            pt.copy_in();
            pt.sanitize();
            pt.resume();
        }
        assert_eq!(pt.completed, 3);
    }

    #[test]
    #[should_panic(expected = "sanitize before copy-in")]
    fn phase_tracker_rejects_early_sanitize() {
        let mut pt = PhaseTracker::new();
        pt.stage();
        pt.serve();
        pt.sanitize();
    }

    #[test]
    #[should_panic(expected = "resume before sanitize")]
    fn phase_tracker_rejects_unsanitized_resume() {
        let mut pt = PhaseTracker::new();
        pt.stage();
        pt.serve();
        pt.copy_in();
        pt.resume();
    }
}
