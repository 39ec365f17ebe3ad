//! Guest-visible ABI constants: syscall numbers, signal numbers, and the
//! deterministic address plan shared by the direct interpreter and the
//! translated (in-enclave) execution path.
//!
//! Both execution paths must hand the guest the *same* logical addresses
//! (mmap results, brk base, stacks, signal stacks) so that pointer-bearing
//! programs behave identically under either one.

pub const PAGE_SIZE: u64 = 4096;

pub fn page_align_down(va: u64) -> u64 {
    va & !(PAGE_SIZE - 1)
}

pub fn page_align_up(va: u64) -> u64 {
    (va + PAGE_SIZE - 1) & !(PAGE_SIZE - 1)
}

pub fn is_page_aligned(va: u64) -> bool {
    va & (PAGE_SIZE - 1) == 0
}

// Syscall numbers. Number in g0, args in g1..g6, return in g0.
// Negative returns encode errors.
pub const SYS_READ: u64 = 0;
pub const SYS_WRITE: u64 = 1;
pub const SYS_OPEN: u64 = 2;
pub const SYS_CLOSE: u64 = 3;
pub const SYS_FSYNC: u64 = 4;
pub const SYS_GETTIME: u64 = 5;
pub const SYS_GETPID: u64 = 6;
pub const SYS_MMAP: u64 = 7;
pub const SYS_MUNMAP: u64 = 8;
pub const SYS_MPROTECT: u64 = 9;
pub const SYS_BRK: u64 = 10;
pub const SYS_MSYNC: u64 = 11;
pub const SYS_CLONE: u64 = 12;
pub const SYS_EXIT: u64 = 13;
pub const SYS_EXIT_GROUP: u64 = 14;
pub const SYS_FUTEX: u64 = 15;
pub const SYS_SIGACTION: u64 = 16;
pub const SYS_ARCHCTL: u64 = 17;

pub const SYSCALL_COUNT: u64 = 18;

// Error returns (negated errno analogs).
pub const E_NOSYS: i64 = -38;
pub const E_BADF: i64 = -9;
pub const E_NOENT: i64 = -2;
pub const E_INVAL: i64 = -22;
pub const E_AGAIN: i64 = -11;
pub const E_NOMEM: i64 = -12;
pub const E_FAULT: i64 = -14;

/// Smallest value the sanitizer accepts as an errno-style return.
pub const E_RANGE_MIN: i64 = -4095;

// mmap prot bits.
pub const PROT_READ: u64 = 1;
pub const PROT_WRITE: u64 = 2;
pub const PROT_EXEC: u64 = 4;

// mmap flags.
pub const MAP_ANON: u64 = 1;
pub const MAP_FILE: u64 = 2;

// open flags.
pub const O_RDONLY: u64 = 0;
pub const O_WRONLY: u64 = 1;
pub const O_RDWR: u64 = 2;
pub const O_CREAT: u64 = 64;

// futex ops. LOCK/UNLOCK drive the in-enclave lock manager's
// three-state mutex directly.
pub const FUTEX_WAIT: u64 = 0;
pub const FUTEX_WAKE: u64 = 1;
pub const FUTEX_LOCK: u64 = 2;
pub const FUTEX_UNLOCK: u64 = 3;

// archctl ops.
pub const ARCH_GET_SB0: u64 = 0;
pub const ARCH_GET_SB1: u64 = 1;
pub const ARCH_SET_SB0: u64 = 2;
pub const ARCH_SET_SB1: u64 = 3;

// Signal numbers (8-signal analog set).
pub const SIG_FPE: u64 = 1;
pub const SIG_ILL: u64 = 2;
pub const SIG_SEGV: u64 = 3;
pub const SIG_USR1: u64 = 4;
pub const SIG_USR2: u64 = 5;
pub const SIG_TERM: u64 = 6;
pub const SIG_CHLD: u64 = 7;
pub const SIG_ALRM: u64 = 8;

pub const SIGNAL_COUNT: u64 = 8;

pub fn signal_name(signum: u64) -> &'static str {
    match signum {
        SIG_FPE => "FPE",
        SIG_ILL => "ILL",
        SIG_SEGV => "SEGV",
        SIG_USR1 => "USR1",
        SIG_USR2 => "USR2",
        SIG_TERM => "TERM",
        SIG_CHLD => "CHLD",
        SIG_ALRM => "ALRM",
        _ => "?",
    }
}

pub fn signal_by_name(name: &str) -> Option<u64> {
    Some(match name {
        "FPE" => SIG_FPE,
        "ILL" => SIG_ILL,
        "SEGV" => SIG_SEGV,
        "USR1" => SIG_USR1,
        "USR2" => SIG_USR2,
        "TERM" => SIG_TERM,
        "CHLD" => SIG_CHLD,
        "ALRM" => SIG_ALRM,
        _ => return None,
    })
}

/// Layout record for the handler context passed to secondary signal
/// handlers: [signum, fault_pc, resume_pc]. The resume_pc word is
/// writable by the handler.
pub const SIGCTX_SIGNUM_OFF: u64 = 0;
pub const SIGCTX_FAULT_PC_OFF: u64 = 8;
pub const SIGCTX_RESUME_PC_OFF: u64 = 16;
pub const SIGCTX_SIZE: u64 = 24;

// --- Deterministic address plan (guest-logical address space) ---
//
// These are *original* (app-visible) virtual addresses. The translated
// path relocates them into enclave private memory behind the address
// translation table; the direct interpreter maps them flat.

/// Base from which anonymous/file mmap regions are handed out.
pub const MMAP_ZONE_BASE: u64 = 0x4000_0000;
/// mmap addresses are bump-allocated and never reused, so both execution
/// paths hand out identical addresses regardless of unmap history.
pub const MMAP_ZONE_SIZE: u64 = 64 * 1024 * 1024;
/// Program break heap: base and growth cap (the static-reserve analog).
pub const HEAP_BASE: u64 = 0x2000_0000;
pub const HEAP_MAX_SIZE: u64 = 16 * 1024 * 1024;
/// Top of the main thread's stack (grows downward).
pub const MAIN_STACK_TOP: u64 = 0x3F00_0000;
/// Size of the main thread's stack.
pub const MAIN_STACK_SIZE: u64 = 64 * 1024;
/// Per-signal private stack pages: base + signum * PAGE_SIZE.
pub const SIGSTACK_ZONE_BASE: u64 = 0x3E00_0000;

/// Fixed virtual CPU identity reported by `cpuinfo`.
pub const CPU_ID: u64 = 0x5258_4C01; // "RXL" v1

/// Fixed process id reported by `getpid`.
pub const PID: u64 = 4242;

/// Clock ticks charged per enclave OCALL on the translated path.
pub const CLOCK_TICKS_PER_OCALL: u64 = 1000;
