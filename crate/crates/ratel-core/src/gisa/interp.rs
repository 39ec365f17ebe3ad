//! Reference execution path: runs a guest binary directly on a flat
//! address space with no enclave and no translation. Syscalls are served
//! against the same virtual filesystem, clock and scheduler the enclave
//! path uses, so the two paths can be diffed on their observable traces.

use std::collections::{BTreeMap, VecDeque};

use crate::abi::{self, PAGE_SIZE};
use crate::hostsim::{due_actions, ScriptAction, Trigger, Vfs, MAX_MARSHAL};
use crate::machine::{AccessKind, Perms};
use crate::sched::{Scheduler, DEFAULT_QUANTUM};
use crate::trace::{syscall_digest, ObservableTrace, RunStatus, Tid};

use super::binfmt::GuestBinary;
use super::isa::{step, Bus, GuestContext, GuestFault, IllegalKind, MemFault, MemFaultKind, Outcome, INST_LEN};

const PG: usize = PAGE_SIZE as usize;

// ---------------------------------------------------------------------
// Flat memory with page-granular region permissions
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub len: u64,
    pub perms: Perms,
    /// (path, file offset of region start) for file-backed mappings.
    pub backing: Option<(String, u64)>,
}

#[derive(Debug, Default)]
pub struct FlatMem {
    regions: BTreeMap<u64, Region>,
    pages: BTreeMap<u64, Vec<u8>>,
}

impl FlatMem {
    pub fn new() -> FlatMem {
        FlatMem::default()
    }

    pub fn regions(&self) -> impl Iterator<Item = (u64, &Region)> {
        self.regions.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_mapped(&self, va: u64) -> bool {
        self.region_at(va).is_some()
    }

    fn region_at(&self, va: u64) -> Option<(u64, &Region)> {
        let (&start, r) = self.regions.range(..=va).next_back()?;
        if va < start + r.len {
            Some((start, r))
        } else {
            None
        }
    }

    pub fn map(
        &mut self,
        start: u64,
        len: u64,
        perms: Perms,
        backing: Option<(String, u64)>,
    ) -> Result<(), ()> {
        if !abi::is_page_aligned(start) || len == 0 {
            return Err(());
        }
        let len = abi::page_align_up(len);
        // Reject overlap with any existing region.
        for (&s, r) in self.regions.range(..start + len) {
            if s + r.len > start {
                return Err(());
            }
        }
        self.regions.insert(start, Region { len, perms, backing });
        Ok(())
    }

    /// Split the region spanning `va` (if any) so `va` becomes a boundary.
    fn split_at(&mut self, va: u64) {
        if let Some((start, r)) = self.region_at(va).map(|(s, r)| (s, r.clone())) {
            if start < va {
                let head_len = va - start;
                let tail = Region {
                    len: r.len - head_len,
                    perms: r.perms,
                    backing: r.backing.as_ref().map(|(p, off)| (p.clone(), off + head_len)),
                };
                self.regions.get_mut(&start).unwrap().len = head_len;
                self.regions.insert(va, tail);
            }
        }
    }

    pub fn unmap(&mut self, start: u64, len: u64) {
        let len = abi::page_align_up(len);
        self.split_at(start);
        self.split_at(start + len);
        let doomed: Vec<u64> = self
            .regions
            .range(start..start + len)
            .map(|(&s, _)| s)
            .collect();
        for s in doomed {
            let r = self.regions.remove(&s).unwrap();
            let mut pg = s;
            while pg < s + r.len {
                self.pages.remove(&pg);
                pg += PAGE_SIZE;
            }
        }
    }

    /// Change permissions on [start, start+len). Fails if any byte of the
    /// range is unmapped.
    pub fn protect(&mut self, start: u64, len: u64, perms: Perms) -> bool {
        let len = abi::page_align_up(len);
        if !self.covered(start, len) {
            return false;
        }
        self.split_at(start);
        self.split_at(start + len);
        let targets: Vec<u64> = self
            .regions
            .range(start..start + len)
            .map(|(&s, _)| s)
            .collect();
        for s in targets {
            self.regions.get_mut(&s).unwrap().perms = perms;
        }
        true
    }

    pub fn covered(&self, start: u64, len: u64) -> bool {
        let mut va = start;
        let end = start + len;
        while va < end {
            match self.region_at(va) {
                Some((s, r)) => va = s + r.len,
                None => return false,
            }
        }
        true
    }

    pub fn check(&self, va: u64, len: u64, kind: AccessKind) -> Result<(), MemFault> {
        let mut cur = va;
        let end = va.wrapping_add(len);
        if end < va {
            return Err(MemFault { va, kind: MemFaultKind::Unmapped });
        }
        while cur < end {
            match self.region_at(cur) {
                Some((s, r)) => {
                    if !r.perms.allows(kind) {
                        return Err(MemFault { va: cur, kind: MemFaultKind::Perm });
                    }
                    cur = s + r.len;
                }
                None => return Err(MemFault { va: cur, kind: MemFaultKind::Unmapped }),
            }
        }
        Ok(())
    }

    // Raw byte access; no permission checks (loader/kernel-side copies).
    pub fn read_raw(&self, va: u64, buf: &mut [u8]) {
        for (i, b) in buf.iter_mut().enumerate() {
            let a = va + i as u64;
            let base = abi::page_align_down(a);
            *b = match self.pages.get(&base) {
                Some(pg) => pg[(a - base) as usize],
                None => 0,
            };
        }
    }

    pub fn write_raw(&mut self, va: u64, bytes: &[u8]) {
        for (i, b) in bytes.iter().enumerate() {
            let a = va + i as u64;
            let base = abi::page_align_down(a);
            let pg = self.pages.entry(base).or_insert_with(|| vec![0; PG]);
            pg[(a - base) as usize] = *b;
        }
    }

    pub fn read_u64_raw(&self, va: u64) -> u64 {
        let mut b = [0u8; 8];
        self.read_raw(va, &mut b);
        u64::from_le_bytes(b)
    }

    pub fn write_u64_raw(&mut self, va: u64, v: u64) {
        self.write_raw(va, &v.to_le_bytes());
    }

    /// NUL-terminated string with permission checks, capped at one page.
    pub fn read_cstr(&self, va: u64) -> Option<String> {
        let mut out = Vec::new();
        for i in 0..PAGE_SIZE {
            let a = va + i;
            self.check(a, 1, AccessKind::Read).ok()?;
            let mut b = [0u8];
            self.read_raw(a, &mut b);
            if b[0] == 0 {
                return String::from_utf8(out).ok();
            }
            out.push(b[0]);
        }
        None
    }
}

impl Bus for FlatMem {
    fn load(&mut self, va: u64, len: u8) -> Result<u64, MemFault> {
        self.check(va, len as u64, AccessKind::Read)?;
        let mut b = [0u8; 8];
        self.read_raw(va, &mut b[..len as usize]);
        Ok(u64::from_le_bytes(b))
    }

    fn store(&mut self, va: u64, val: u64, len: u8) -> Result<(), MemFault> {
        self.check(va, len as u64, AccessKind::Write)?;
        self.write_raw(va, &val.to_le_bytes()[..len as usize]);
        Ok(())
    }

    fn fetch(&mut self, va: u64) -> Result<[u8; 8], MemFault> {
        self.check(va, INST_LEN, AccessKind::Fetch)?;
        let mut b = [0u8; 8];
        self.read_raw(va, &mut b);
        Ok(b)
    }
}

// ---------------------------------------------------------------------
// Oracle VM
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct OracleConfig {
    pub seed: u64,
    pub quantum: u64,
    /// Retired-instruction budget before the run is declared timed out.
    pub fuel: u64,
    pub heap_max: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            seed: 0,
            quantum: DEFAULT_QUANTUM,
            fuel: 20_000_000,
            heap_max: abi::HEAP_MAX_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TState {
    Run,
    FutexWait { addr: u64 },
    Done,
}

#[derive(Debug, Clone)]
struct SigFrame {
    saved: GuestContext,
    record_va: u64,
}

struct OThread {
    ctx: GuestContext,
    state: TState,
    retired: u64,
    ctid_va: u64,
    pending: VecDeque<u64>,
    frames: Vec<SigFrame>,
}

pub struct Oracle {
    pub mem: FlatMem,
    threads: BTreeMap<Tid, OThread>,
    pub vfs: Vfs,
    script: Vec<Trigger>,
    sched: Scheduler,
    futex: BTreeMap<u64, VecDeque<Tid>>,
    handlers: [u64; 1 + abi::SIGNAL_COUNT as usize],
    next_mmap: u64,
    brk_top: u64,
    heap_mapped: u64,
    heap_max: u64,
    next_tid: Tid,
    retired_global: u64,
    pub clock: u64,
    trace: ObservableTrace,
    status: Option<RunStatus>,
    main_exit: i64,
    fuel: u64,
}

/// Signal frames a thread may stack before the next one aborts the run;
/// mirrors the save-area budget on the enclave path (one area is held
/// back for timer re-entry).
const MAX_SIG_DEPTH: usize = 2;

pub const MAIN_TID: Tid = 1;

impl Oracle {
    pub fn new(
        bin: &GuestBinary,
        vfs: Vfs,
        script: Vec<Trigger>,
        cfg: OracleConfig,
    ) -> Result<Oracle, String> {
        bin.validate().map_err(|e| e.to_string())?;
        let mut mem = FlatMem::new();
        for seg in &bin.segments {
            let start = abi::page_align_down(seg.preferred_va);
            let end = abi::page_align_up(seg.preferred_va + seg.length);
            mem.map(start, end - start, seg.perms, None)
                .map_err(|_| format!("segment at {:#x} overlaps", seg.preferred_va))?;
            mem.write_raw(seg.preferred_va, &seg.bytes);
        }
        mem.map(
            abi::MAIN_STACK_TOP - abi::MAIN_STACK_SIZE,
            abi::MAIN_STACK_SIZE,
            Perms::rw(),
            None,
        )
        .map_err(|_| "stack overlaps a segment".to_string())?;
        for sig in 1..=abi::SIGNAL_COUNT {
            mem.map(abi::SIGSTACK_ZONE_BASE + sig * PAGE_SIZE, PAGE_SIZE, Perms::rw(), None)
                .map_err(|_| "signal stack overlaps a segment".to_string())?;
        }
        let mut threads = BTreeMap::new();
        let mut ctx = GuestContext { pc: bin.entry, ..Default::default() };
        ctx.set_sp(abi::MAIN_STACK_TOP);
        threads.insert(
            MAIN_TID,
            OThread {
                ctx,
                state: TState::Run,
                retired: 0,
                ctid_va: 0,
                pending: VecDeque::new(),
                frames: Vec::new(),
            },
        );
        Ok(Oracle {
            mem,
            threads,
            vfs,
            script,
            sched: Scheduler::new(cfg.seed, cfg.quantum),
            futex: BTreeMap::new(),
            handlers: [0; 1 + abi::SIGNAL_COUNT as usize],
            next_mmap: abi::MMAP_ZONE_BASE,
            brk_top: abi::HEAP_BASE,
            heap_mapped: abi::HEAP_BASE,
            heap_max: cfg.heap_max,
            next_tid: MAIN_TID + 1,
            retired_global: 0,
            clock: 0,
            trace: ObservableTrace::default(),
            status: None,
            main_exit: 0,
            fuel: cfg.fuel,
        })
    }

    pub fn run(mut self) -> ObservableTrace {
        while self.status.is_none() {
            if self.all_done() {
                self.status = Some(RunStatus::Exited(self.main_exit));
                break;
            }
            let cur = match self.current_thread() {
                Some(t) => t,
                None => {
                    self.status = Some(RunStatus::Deadlocked);
                    break;
                }
            };
            if self.threads[&cur].frames.is_empty() {
                if let Some(sig) = self.threads.get_mut(&cur).unwrap().pending.pop_front() {
                    let pc = self.threads[&cur].ctx.pc;
                    self.deliver(cur, sig, pc, false);
                    continue;
                }
            } else if let Some(sig) = self.threads.get_mut(&cur).unwrap().pending.pop_front() {
                // Async signal while a handler runs: dropped, recorded.
                let hp = self.handlers[sig as usize];
                self.trace.record_signal(cur, sig, hp, "ignored");
                continue;
            }
            let th = self.threads.get_mut(&cur).unwrap();
            let outcome = step(&mut th.ctx, &mut self.mem);
            match outcome {
                Outcome::Next => self.retire(cur),
                Outcome::Syscall => self.do_syscall(cur),
                Outcome::Illegal(k) => {
                    let clock = self.clock;
                    let th = self.threads.get_mut(&cur).unwrap();
                    match k {
                        IllegalKind::Rdtime { rd } => th.ctx.g[rd as usize] = clock,
                        IllegalKind::Cpuinfo { rd } => th.ctx.g[rd as usize] = abi::CPU_ID,
                        IllegalKind::Wrsb0 { rs } => th.ctx.sb0 = th.ctx.g[rs as usize],
                        IllegalKind::Wrsb1 { rs } => th.ctx.sb1 = th.ctx.g[rs as usize],
                    }
                    th.ctx.pc += INST_LEN;
                    self.retire(cur);
                }
                Outcome::Sigret => {
                    self.do_sigret(cur);
                }
                Outcome::Fault(f) => {
                    self.on_fault(cur, f);
                }
            }
        }
        self.trace.status = self.status.unwrap_or(RunStatus::Deadlocked);
        self.trace.retired = self.retired_global;
        self.trace.stdout = std::mem::take(&mut self.vfs.stdout);
        self.trace.stderr = std::mem::take(&mut self.vfs.stderr);
        self.trace
    }

    fn all_done(&self) -> bool {
        self.threads.values().all(|t| t.state == TState::Done)
    }

    fn current_thread(&mut self) -> Option<Tid> {
        if let Some(t) = self.sched.current {
            if self.threads.get(&t).map(|th| th.state == TState::Run) == Some(true) {
                return Some(t);
            }
        }
        let runnable: Vec<Tid> = self
            .threads
            .iter()
            .filter(|(_, th)| th.state == TState::Run)
            .map(|(&t, _)| t)
            .collect();
        self.sched.pick(&runnable)
    }

    fn retire(&mut self, tid: Tid) {
        let th = self.threads.get_mut(&tid).unwrap();
        th.retired += 1;
        let tr = th.retired;
        self.retired_global += 1;
        self.clock += 1;
        if self.retired_global >= self.fuel {
            self.status = Some(RunStatus::TimedOut);
            return;
        }
        for action in due_actions(&mut self.script, tid, tr, self.retired_global) {
            match action {
                ScriptAction::Signal(sig) => {
                    self.threads.get_mut(&tid).unwrap().pending.push_back(sig)
                }
                // No untrusted memory exists on this path; adversary
                // triggers have nothing to attack.
                ScriptAction::Adversary(_) => {}
            }
        }
        if self.sched.on_retire() {
            self.sched.deschedule();
        }
    }

    // --- signals ---

    fn deliver(&mut self, tid: Tid, signum: u64, fault_pc: u64, sync: bool) {
        let handler = self.handlers[signum as usize];
        if handler == 0 {
            match signum {
                abi::SIG_CHLD | abi::SIG_ALRM => {
                    self.trace.record_signal(tid, signum, 0, "ignored");
                }
                _ => {
                    self.trace.record_signal(tid, signum, 0, "fatal");
                    self.status = Some(RunStatus::Killed(signum));
                }
            }
            return;
        }
        let depth = self.threads[&tid].frames.len();
        if !sync && depth > 0 {
            self.trace.record_signal(tid, signum, handler, "ignored");
            return;
        }
        if sync && depth >= MAX_SIG_DEPTH {
            self.trace.record_signal(tid, signum, handler, "abort");
            self.status = Some(RunStatus::Aborted);
            return;
        }
        let record_va = abi::SIGSTACK_ZONE_BASE + signum * PAGE_SIZE;
        self.mem.write_u64_raw(record_va + abi::SIGCTX_SIGNUM_OFF, signum);
        self.mem.write_u64_raw(record_va + abi::SIGCTX_FAULT_PC_OFF, fault_pc);
        self.mem.write_u64_raw(record_va + abi::SIGCTX_RESUME_PC_OFF, fault_pc);
        let th = self.threads.get_mut(&tid).unwrap();
        th.frames.push(SigFrame { saved: th.ctx.clone(), record_va });
        th.ctx.pc = handler;
        th.ctx.g[1] = signum;
        th.ctx.g[2] = record_va;
        th.ctx.set_sp(record_va + PAGE_SIZE);
        self.trace.record_signal(tid, signum, handler, "delivered");
    }

    fn do_sigret(&mut self, tid: Tid) {
        let frame = match self.threads.get_mut(&tid).unwrap().frames.pop() {
            Some(f) => f,
            None => {
                // sigret outside a handler is an illegal instruction.
                let pc = self.threads[&tid].ctx.pc;
                self.on_fault(tid, GuestFault::BadOpcode { pc });
                return;
            }
        };
        let resume = self.mem.read_u64_raw(frame.record_va + abi::SIGCTX_RESUME_PC_OFF);
        let th = self.threads.get_mut(&tid).unwrap();
        th.ctx = frame.saved;
        th.ctx.pc = resume;
        self.retire(tid);
    }

    fn on_fault(&mut self, tid: Tid, fault: GuestFault) {
        let (signum, pc) = match fault {
            GuestFault::DivByZero { pc } => (abi::SIG_FPE, pc),
            GuestFault::BadOpcode { pc } => (abi::SIG_ILL, pc),
            GuestFault::Mem { pc, .. } => (abi::SIG_SEGV, pc),
        };
        self.deliver(tid, signum, pc, true);
    }

    // --- syscalls ---

    fn do_syscall(&mut self, tid: Tid) {
        let ctx = self.threads[&tid].ctx.clone();
        let n = ctx.g[0];
        let a: [u64; 6] = [ctx.g[1], ctx.g[2], ctx.g[3], ctx.g[4], ctx.g[5], ctx.g[6]];
        let digest = syscall_digest(n, &a);
        let ret: i64 = match n {
            abi::SYS_READ => self.sys_read(a[0] as i64, a[1], a[2]),
            abi::SYS_WRITE => self.sys_write(a[0] as i64, a[1], a[2]),
            abi::SYS_OPEN => self.sys_open(a[0], a[1]),
            abi::SYS_CLOSE => self.vfs.close(a[0] as i64),
            abi::SYS_FSYNC => self.sys_fsync(a[0] as i64),
            abi::SYS_GETTIME => self.clock as i64,
            abi::SYS_GETPID => abi::PID as i64,
            abi::SYS_MMAP => self.sys_mmap(a[1], a[2], a[3], a[4] as i64, a[5]),
            abi::SYS_MUNMAP => self.sys_munmap(a[0], a[1]),
            abi::SYS_MPROTECT => self.sys_mprotect(a[0], a[1], a[2]),
            abi::SYS_BRK => self.sys_brk(a[0]),
            abi::SYS_MSYNC => self.sys_msync(a[0], a[1]),
            abi::SYS_CLONE => self.sys_clone(a[0], a[1], a[2]),
            abi::SYS_EXIT => {
                self.trace.record_syscall(tid, n, sys_name(n), digest, a[0] as i64);
                self.thread_exit(tid, a[0] as i64);
                return;
            }
            abi::SYS_EXIT_GROUP => {
                self.trace.record_syscall(tid, n, sys_name(n), digest, a[0] as i64);
                self.status = Some(RunStatus::Exited(a[0] as i64));
                return;
            }
            abi::SYS_FUTEX => match self.sys_futex(tid, a[0], a[1], a[2]) {
                Some(r) => r,
                None => {
                    // Blocked: the sys re-executes on wakeup, no event yet.
                    self.sched.deschedule();
                    return;
                }
            },
            abi::SYS_SIGACTION => self.sys_sigaction(a[0], a[1]),
            abi::SYS_ARCHCTL => self.sys_archctl(tid, a[0], a[1]),
            _ => abi::E_NOSYS,
        };
        self.trace.record_syscall(tid, n, sys_name(n), digest, ret);
        let th = self.threads.get_mut(&tid).unwrap();
        th.ctx.g[0] = ret as u64;
        th.ctx.pc += INST_LEN;
        self.retire(tid);
    }

    fn sys_read(&mut self, fd: i64, buf: u64, len: u64) -> i64 {
        if len > MAX_MARSHAL {
            return abi::E_INVAL;
        }
        if self.mem.check(buf, len, AccessKind::Write).is_err() {
            return abi::E_FAULT;
        }
        match self.vfs.read(fd, len) {
            Ok(data) => {
                self.mem.write_raw(buf, &data);
                data.len() as i64
            }
            Err(e) => e,
        }
    }

    fn sys_write(&mut self, fd: i64, buf: u64, len: u64) -> i64 {
        if len > MAX_MARSHAL {
            return abi::E_INVAL;
        }
        if self.mem.check(buf, len, AccessKind::Read).is_err() {
            return abi::E_FAULT;
        }
        let mut data = vec![0u8; len as usize];
        self.mem.read_raw(buf, &mut data);
        self.vfs.write(fd, &data)
    }

    fn sys_open(&mut self, path_va: u64, flags: u64) -> i64 {
        match self.mem.read_cstr(path_va) {
            Some(path) => self.vfs.open(&path, flags),
            None => abi::E_FAULT,
        }
    }

    fn sys_fsync(&mut self, fd: i64) -> i64 {
        if let Some(path) = self.vfs.path_of(fd) {
            self.sync_back_path(&path);
        }
        self.vfs.fsync(fd)
    }

    fn sys_mmap(&mut self, len: u64, prot: u64, flags: u64, fd: i64, off: u64) -> i64 {
        if len == 0 {
            return abi::E_INVAL;
        }
        let len = abi::page_align_up(len);
        if self.next_mmap + len > abi::MMAP_ZONE_BASE + abi::MMAP_ZONE_SIZE {
            return abi::E_NOMEM;
        }
        let backing = if flags & abi::MAP_FILE != 0 {
            match self.vfs.path_of(fd) {
                Some(p) => Some((p, off)),
                None => return abi::E_BADF,
            }
        } else {
            None
        };
        let addr = self.next_mmap;
        self.mem
            .map(addr, len, Perms::from_prot(prot), backing.clone())
            .expect("bump allocator regions are disjoint");
        if let Some((path, off)) = backing {
            let content = self.vfs.file(&path).cloned().unwrap_or_default();
            let start = (off as usize).min(content.len());
            let end = (start + len as usize).min(content.len());
            self.mem.write_raw(addr, &content[start..end].to_vec());
        }
        self.next_mmap += len;
        addr as i64
    }

    fn sys_munmap(&mut self, addr: u64, len: u64) -> i64 {
        if !abi::is_page_aligned(addr) || len == 0 {
            return abi::E_INVAL;
        }
        self.sync_back_range(addr, abi::page_align_up(len));
        self.mem.unmap(addr, len);
        0
    }

    fn sys_mprotect(&mut self, addr: u64, len: u64, prot: u64) -> i64 {
        if !abi::is_page_aligned(addr) || len == 0 {
            return abi::E_INVAL;
        }
        if self.mem.protect(addr, len, Perms::from_prot(prot)) {
            0
        } else {
            abi::E_NOMEM
        }
    }

    /// Linux-style: returns the (possibly unchanged) current break.
    fn sys_brk(&mut self, new_top: u64) -> i64 {
        if new_top == 0
            || new_top < abi::HEAP_BASE
            || new_top > abi::HEAP_BASE + self.heap_max
        {
            return self.brk_top as i64;
        }
        let want = abi::page_align_up(new_top);
        if want > self.heap_mapped {
            if self.mem.map(self.heap_mapped, want - self.heap_mapped, Perms::rw(), None).is_err() {
                return self.brk_top as i64;
            }
            self.heap_mapped = want;
        } else if want < self.heap_mapped {
            self.mem.unmap(want, self.heap_mapped - want);
            self.heap_mapped = want;
        }
        self.brk_top = new_top;
        self.brk_top as i64
    }

    fn sys_msync(&mut self, addr: u64, len: u64) -> i64 {
        if !abi::is_page_aligned(addr) || len == 0 {
            return abi::E_INVAL;
        }
        self.sync_back_range(addr, abi::page_align_up(len));
        0
    }

    fn sync_back_range(&mut self, start: u64, len: u64) {
        let end = start + len;
        let work: Vec<(u64, u64, String, u64)> = self
            .mem
            .regions()
            .filter_map(|(s, r)| {
                let (path, foff) = r.backing.clone()?;
                let lo = s.max(start);
                let hi = (s + r.len).min(end);
                if lo >= hi {
                    return None;
                }
                Some((lo, hi - lo, path, foff + (lo - s)))
            })
            .collect();
        for (va, n, path, foff) in work {
            let mut bytes = vec![0u8; n as usize];
            self.mem.read_raw(va, &mut bytes);
            self.vfs.write_at(&path, foff, &bytes);
        }
    }

    fn sync_back_path(&mut self, path: &str) {
        let work: Vec<(u64, u64, u64)> = self
            .mem
            .regions()
            .filter_map(|(s, r)| match &r.backing {
                Some((p, foff)) if p == path => Some((s, r.len, *foff)),
                _ => None,
            })
            .collect();
        for (va, n, foff) in work {
            let mut bytes = vec![0u8; n as usize];
            self.mem.read_raw(va, &mut bytes);
            self.vfs.write_at(path, foff, &bytes);
        }
    }

    fn sys_clone(&mut self, entry: u64, stack_top: u64, ctid_va: u64) -> i64 {
        if self.mem.check(entry, INST_LEN, AccessKind::Fetch).is_err() {
            return abi::E_INVAL;
        }
        if self.mem.check(stack_top.wrapping_sub(8), 8, AccessKind::Write).is_err() {
            return abi::E_INVAL;
        }
        if ctid_va != 0 && self.mem.check(ctid_va, 8, AccessKind::Write).is_err() {
            return abi::E_FAULT;
        }
        let tid = self.next_tid;
        self.next_tid += 1;
        let mut ctx = GuestContext { pc: entry, ..Default::default() };
        ctx.set_sp(stack_top);
        self.threads.insert(
            tid,
            OThread {
                ctx,
                state: TState::Run,
                retired: 0,
                ctid_va,
                pending: VecDeque::new(),
                frames: Vec::new(),
            },
        );
        if ctid_va != 0 {
            self.mem.write_u64_raw(ctid_va, tid);
        }
        tid as i64
    }

    fn thread_exit(&mut self, tid: Tid, code: i64) {
        let ctid_va = {
            let th = self.threads.get_mut(&tid).unwrap();
            th.state = TState::Done;
            th.ctid_va
        };
        if tid == MAIN_TID {
            self.main_exit = code;
        }
        if ctid_va != 0 {
            self.mem.write_u64_raw(ctid_va, 0);
            self.futex_wake(ctid_va, u64::MAX);
        }
        self.sched.deschedule();
    }

    /// None = the calling thread blocked (the sys will re-execute on
    /// wakeup). Some(ret) = completed.
    fn sys_futex(&mut self, tid: Tid, addr: u64, op: u64, val: u64) -> Option<i64> {
        if self.mem.check(addr, 8, AccessKind::Write).is_err() {
            return Some(abi::E_FAULT);
        }
        match op {
            abi::FUTEX_WAIT => {
                if self.mem.read_u64_raw(addr) != val {
                    return Some(abi::E_AGAIN);
                }
                self.block_on(tid, addr);
                None
            }
            abi::FUTEX_WAKE => Some(self.futex_wake(addr, val) as i64),
            abi::FUTEX_LOCK => {
                if self.mem.read_u64_raw(addr) == 0 {
                    let contended = self.futex.get(&addr).map_or(false, |q| !q.is_empty());
                    self.mem.write_u64_raw(addr, if contended { 2 } else { 1 });
                    Some(0)
                } else {
                    self.mem.write_u64_raw(addr, 2);
                    self.block_on(tid, addr);
                    None
                }
            }
            abi::FUTEX_UNLOCK => {
                self.mem.write_u64_raw(addr, 0);
                self.futex_wake(addr, 1);
                Some(0)
            }
            _ => Some(abi::E_INVAL),
        }
    }

    fn block_on(&mut self, tid: Tid, addr: u64) {
        self.threads.get_mut(&tid).unwrap().state = TState::FutexWait { addr };
        self.futex.entry(addr).or_default().push_back(tid);
    }

    fn futex_wake(&mut self, addr: u64, count: u64) -> u64 {
        let mut woken = 0;
        if let Some(q) = self.futex.get_mut(&addr) {
            while woken < count {
                match q.pop_front() {
                    Some(t) => {
                        self.threads.get_mut(&t).unwrap().state = TState::Run;
                        woken += 1;
                    }
                    None => break,
                }
            }
        }
        woken
    }

    fn sys_sigaction(&mut self, signum: u64, handler: u64) -> i64 {
        if signum == 0 || signum > abi::SIGNAL_COUNT {
            return abi::E_INVAL;
        }
        self.handlers[signum as usize] = handler;
        0
    }

    fn sys_archctl(&mut self, tid: Tid, op: u64, val: u64) -> i64 {
        let th = self.threads.get_mut(&tid).unwrap();
        match op {
            abi::ARCH_GET_SB0 => th.ctx.sb0 as i64,
            abi::ARCH_GET_SB1 => th.ctx.sb1 as i64,
            abi::ARCH_SET_SB0 => {
                th.ctx.sb0 = val;
                0
            }
            abi::ARCH_SET_SB1 => {
                th.ctx.sb1 = val;
                0
            }
            _ => abi::E_INVAL,
        }
    }
}

pub fn sys_name(n: u64) -> &'static str {
    match n {
        abi::SYS_READ => "read",
        abi::SYS_WRITE => "write",
        abi::SYS_OPEN => "open",
        abi::SYS_CLOSE => "close",
        abi::SYS_FSYNC => "fsync",
        abi::SYS_GETTIME => "gettime",
        abi::SYS_GETPID => "getpid",
        abi::SYS_MMAP => "mmap",
        abi::SYS_MUNMAP => "munmap",
        abi::SYS_MPROTECT => "mprotect",
        abi::SYS_BRK => "brk",
        abi::SYS_MSYNC => "msync",
        abi::SYS_CLONE => "clone",
        abi::SYS_EXIT => "exit",
        abi::SYS_EXIT_GROUP => "exit_group",
        abi::SYS_FUTEX => "futex",
        abi::SYS_SIGACTION => "sigaction",
        abi::SYS_ARCHCTL => "archctl",
        _ => "?",
    }
}
