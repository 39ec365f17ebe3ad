//! The translation engine: runs guest binaries inside the modeled
//! enclave with complete interposition. Guest code is decoded into the
//! code cache and executed from there; every memory access goes through
//! the procmap mirror; every syscall goes through the gateway; the host
//! is only ever handed marshaled public data.
//!
//! The observable behavior (trace events, exit status, retired count,
//! output bytes) is held to byte equality with the reference
//! interpreter for the same guest, inputs, seed and script.

use crate::abi::{self, PAGE_SIZE};
use crate::cache::{CacheErr, CodeCache, DEFAULT_BB_MAX, DEFAULT_MAX_BB_INSTS, DEFAULT_MAX_TRACE_BBS};
use crate::gateway::{self, GatewayStats, PhaseTracker};
use crate::gisa::binfmt::GuestBinary;
use crate::gisa::interp::sys_name;
use crate::gisa::isa::{
    exec_instr, Bus, GuestContext, GuestFault, IllegalKind, MemFault, MemFaultKind, Outcome,
    INST_LEN,
};
use crate::hostsim::{AdversaryMode, AdvOp, HostWorld, IagoKind, ScriptAction, STAGE_BASE, STAGE_SIZE, MAX_MARSHAL};
use crate::locks::{LockManager, WaitOutcome};
use crate::machine::{AccessKind, Accessor, AexOutcome, AexReason, Machine, MachineConfig, PageKind, Perms};
use crate::memviews::{Backing, MemCfg, MemErr, MemManager, META_ARENA_OFF, META_ARENA_SIZE};
use crate::sched::Scheduler;
use crate::signals::{Decision, Owner, SignalVirt};
use crate::threads::{tls_push, tls_restore, ThreadSet, VSigFrame, VState, TLS_APP, TLS_ENGINE, TLS_SGX_PRIMARY};
use crate::trace::{syscall_digest, ObservableTrace, RunStatus, Tid};

pub const MAIN_TID: Tid = 1;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub seed: u64,
    pub quantum: u64,
    pub fuel: u64,
    pub machine: MachineConfig,
    pub mem: MemCfg,
    pub bb_max: u64,
    pub max_bb_insts: usize,
    pub traces_enabled: bool,
    pub max_trace_bbs: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: 0,
            quantum: crate::sched::DEFAULT_QUANTUM,
            fuel: 20_000_000,
            machine: MachineConfig::default(),
            mem: MemCfg::default(),
            bb_max: DEFAULT_BB_MAX,
            max_bb_insts: DEFAULT_MAX_BB_INSTS,
            traces_enabled: true,
            max_trace_bbs: DEFAULT_MAX_TRACE_BBS,
        }
    }
}

pub struct Engine {
    pub m: Machine,
    pub host: HostWorld,
    pub mv: MemManager,
    pub cache: CodeCache,
    pub threads: ThreadSet,
    pub locks: LockManager,
    pub signals: SignalVirt,
    sched: Scheduler,
    pub trace: ObservableTrace,
    pub stats: GatewayStats,
    pub phase: PhaseTracker,
    pub retired_global: u64,
    status: Option<RunStatus>,
    main_exit: i64,
    fuel: u64,
    pub abort_reason: Option<String>,
    /// Direct (uncached) app-code fetches during execution. Complete
    /// interposition means this stays zero for the life of the run.
    pub direct_app_fetches: u64,
    /// High-water mark of threads holding a TCS slot simultaneously.
    pub max_occupancy: usize,
}

// ---------------------------------------------------------------------
// App memory helpers (all traffic between guest-visible addresses and
// the private mirrors goes through these)
// ---------------------------------------------------------------------

/// Walk a guest range page by page (records are page-granular, so each
/// page lies inside exactly one record).
fn app_check(mv: &MemManager, orig: u64, len: u64, kind: AccessKind) -> Result<(), MemFault> {
    if len == 0 {
        return Ok(());
    }
    let end = orig
        .checked_add(len)
        .ok_or(MemFault { va: orig, kind: MemFaultKind::Unmapped })?;
    let mut va = orig;
    while va < end {
        let page_end = abi::page_align_down(va) + PAGE_SIZE;
        let chunk = page_end.min(end) - va;
        mv.check_app_access(va, chunk, kind)?;
        va += chunk;
    }
    Ok(())
}

fn app_read(mv: &MemManager, m: &mut Machine, orig: u64, len: u64) -> Result<Vec<u8>, MemFault> {
    let mut out = vec![0u8; len as usize];
    let mut va = orig;
    let end = orig + len;
    while va < end {
        let page_end = abi::page_align_down(va) + PAGE_SIZE;
        let chunk = page_end.min(end) - va;
        let actual = mv.check_app_access(va, chunk, AccessKind::Read)?;
        let off = (va - orig) as usize;
        m.read(Accessor::Engine, actual, &mut out[off..off + chunk as usize])
            .map_err(|_| MemFault { va, kind: MemFaultKind::Unmapped })?;
        va += chunk;
    }
    Ok(out)
}

fn app_write(mv: &MemManager, m: &mut Machine, orig: u64, bytes: &[u8]) -> Result<(), MemFault> {
    let mut va = orig;
    let end = orig + bytes.len() as u64;
    while va < end {
        let page_end = abi::page_align_down(va) + PAGE_SIZE;
        let chunk = page_end.min(end) - va;
        let actual = mv.check_app_access(va, chunk, AccessKind::Write)?;
        let off = (va - orig) as usize;
        m.write(Accessor::Engine, actual, &bytes[off..off + chunk as usize])
            .map_err(|_| MemFault { va, kind: MemFaultKind::Unmapped })?;
        va += chunk;
    }
    Ok(())
}

fn app_read_cstr(mv: &MemManager, m: &mut Machine, orig: u64) -> Option<String> {
    let mut bytes = Vec::new();
    for i in 0..PAGE_SIZE {
        let va = orig + i;
        let actual = mv.check_app_access(va, 1, AccessKind::Read).ok()?;
        let mut b = [0u8; 1];
        m.read(Accessor::Engine, actual, &mut b).ok()?;
        if b[0] == 0 {
            return String::from_utf8(bytes).ok();
        }
        bytes.push(b[0]);
    }
    None
}

fn zero_public(m: &mut Machine, base: u64, len: u64) {
    let zeros = [0u8; 4096];
    let mut done = 0;
    while done < len {
        let n = (len - done).min(4096);
        m.write(Accessor::Engine, base + done, &zeros[..n as usize])
            .expect("staging range is engine-writable");
        done += n;
    }
}

/// Bus the translated code runs against: every load/store is translated
/// through the mirror; fetches are counted as interposition violations
/// because dispatch-time code reads must come from the cache path.
struct AppBus<'a> {
    mv: &'a MemManager,
    m: &'a mut Machine,
    direct_fetches: &'a mut u64,
}

impl Bus for AppBus<'_> {
    fn load(&mut self, va: u64, len: u8) -> Result<u64, MemFault> {
        let len = len as u64;
        let mut buf = [0u8; 8];
        // Fast path: inside one page, one translation.
        if va % PAGE_SIZE + len <= PAGE_SIZE {
            let actual = self.mv.check_app_access(va, len, AccessKind::Read)?;
            self.m
                .read(Accessor::Engine, actual, &mut buf[..len as usize])
                .map_err(|_| MemFault { va, kind: MemFaultKind::Unmapped })?;
        } else {
            for i in 0..len {
                let actual = self.mv.check_app_access(va + i, 1, AccessKind::Read)?;
                self.m
                    .read(Accessor::Engine, actual, &mut buf[i as usize..i as usize + 1])
                    .map_err(|_| MemFault { va, kind: MemFaultKind::Unmapped })?;
            }
        }
        Ok(u64::from_le_bytes(buf))
    }

    fn store(&mut self, va: u64, val: u64, len: u8) -> Result<(), MemFault> {
        let len = len as u64;
        let bytes = val.to_le_bytes();
        if va % PAGE_SIZE + len <= PAGE_SIZE {
            let actual = self.mv.check_app_access(va, len, AccessKind::Write)?;
            self.m
                .write(Accessor::Engine, actual, &bytes[..len as usize])
                .map_err(|_| MemFault { va, kind: MemFaultKind::Unmapped })?;
        } else {
            for i in 0..len {
                let actual = self.mv.check_app_access(va + i, 1, AccessKind::Write)?;
                self.m
                    .write(Accessor::Engine, actual, &bytes[i as usize..i as usize + 1])
                    .map_err(|_| MemFault { va, kind: MemFaultKind::Unmapped })?;
            }
        }
        Ok(())
    }

    fn fetch(&mut self, va: u64) -> Result<[u8; 8], MemFault> {
        *self.direct_fetches += 1;
        let actual = self.mv.check_app_access(va, 8, AccessKind::Fetch)?;
        let mut b = [0u8; 8];
        self.m
            .read(Accessor::Engine, actual, &mut b)
            .map_err(|_| MemFault { va, kind: MemFaultKind::Unmapped })?;
        Ok(b)
    }
}

impl Engine {
    pub fn new(bin: &GuestBinary, host: HostWorld, cfg: EngineConfig) -> Result<Engine, String> {
        bin.validate().map_err(|e| e.to_string())?;
        let mut m = Machine::ecreate(cfg.machine.clone()).map_err(|e| e.to_string())?;
        let mut mv = MemManager::install(&mut m, &cfg.mem).map_err(|e| e.to_string())?;

        // Static enclave layout: fixed entry page, then TCS and save
        // areas, all inside region_A after the metadata arena. Frozen at
        // init.
        let base = m.cfg.enclave_base_va;
        let entry = m.cfg.entry_va;
        m.eadd_page(entry, Perms::rx(), PageKind::Code, None).map_err(|e| e.to_string())?;
        let mut va = base + META_ARENA_OFF + META_ARENA_SIZE;
        for _ in 0..m.cfg.tcs_count {
            m.eadd_page(va, Perms::rw(), PageKind::Tcs, None).map_err(|e| e.to_string())?;
            va += PAGE_SIZE;
            for _ in 0..m.cfg.nssa {
                m.eadd_page(va, Perms::rw(), PageKind::Ssa, None).map_err(|e| e.to_string())?;
                va += PAGE_SIZE;
            }
        }
        if va > base + crate::memviews::REGION_A_SIZE {
            return Err("tcs/nssa configuration exceeds the engine region".into());
        }
        m.einit().map_err(|e| e.to_string())?;

        let mut threads = ThreadSet::new();
        let mut ctx = GuestContext { pc: bin.entry, ..Default::default() };
        ctx.set_sp(abi::MAIN_STACK_TOP);
        let main = threads.spawn(ctx, 0);
        debug_assert_eq!(main, MAIN_TID);

        let mut stats = GatewayStats::default();
        let slot = threads.acquire_tcs(&m, main).expect("fresh machine has free slots");
        m.eenter(slot, entry).map_err(|e| e.to_string())?;
        stats.ecalls += 1;
        threads.get_mut(main).entered = true;

        // Loader: segments, main stack, one page per signal's context
        // record area. All app-visible; all privately mirrored.
        for seg in &bin.segments {
            let start = abi::page_align_down(seg.preferred_va);
            let end = abi::page_align_up(seg.preferred_va + seg.length);
            mv.map_fixed(
                &mut m,
                start,
                end - start,
                seg.perms,
                Backing::Seg,
                Some((&seg.bytes, seg.preferred_va - start)),
            )
            .map_err(|e| format!("segment at {:#x}: {e}", seg.preferred_va))?;
        }
        mv.map_fixed(
            &mut m,
            abi::MAIN_STACK_TOP - abi::MAIN_STACK_SIZE,
            abi::MAIN_STACK_SIZE,
            Perms::rw(),
            Backing::Anon,
            None,
        )
        .map_err(|e| format!("stack: {e}"))?;
        for sig in 1..=abi::SIGNAL_COUNT {
            mv.map_fixed(
                &mut m,
                abi::SIGSTACK_ZONE_BASE + sig * PAGE_SIZE,
                PAGE_SIZE,
                Perms::rw(),
                Backing::Anon,
                None,
            )
            .map_err(|e| format!("signal stack {sig}: {e}"))?;
        }

        // Main thread's TLS chain: platform segment, then the engine's.
        // The app's lands on top when the guest first touches sb state.
        {
            let th = threads.get_mut(main);
            tls_push(&mut m, &mut mv, th, TLS_SGX_PRIMARY, 0, 0).unwrap();
            tls_push(&mut m, &mut mv, th, TLS_ENGINE, base, base + META_ARENA_OFF).unwrap();
        }

        let guard = mv.meta_alloc(8);
        Ok(Engine {
            m,
            host,
            mv,
            cache: CodeCache::new(cfg.bb_max, cfg.max_bb_insts, cfg.traces_enabled, cfg.max_trace_bbs),
            threads,
            locks: LockManager::new(guard),
            signals: SignalVirt::new(),
            sched: Scheduler::new(cfg.seed, cfg.quantum),
            trace: ObservableTrace::default(),
            stats,
            phase: PhaseTracker::new(),
            retired_global: 0,
            status: None,
            main_exit: 0,
            fuel: cfg.fuel,
            abort_reason: None,
            direct_app_fetches: 0,
            max_occupancy: 0,
        })
    }

    pub fn status(&self) -> Option<RunStatus> {
        self.status
    }

    pub fn run(&mut self) -> ObservableTrace {
        while self.status.is_none() {
            if self.threads.all_done() {
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
            // A thread must hold a TCS slot (and have entered through
            // the fixed entry point) before anything else happens on it.
            if self.threads.get(cur).tcs.is_none() {
                if self.threads.acquire_tcs(&self.m, cur).is_none() {
                    // Every slot is held by another suspended thread.
                    // Preempt the lowest-numbered holder: it simply
                    // re-enters when next scheduled, so slot scarcity
                    // never changes which thread runs.
                    let victim = self
                        .threads
                        .slot_holders()
                        .into_iter()
                        .filter(|&t| t != cur)
                        .min()
                        .expect("no free slot implies another holder");
                    let _ = self.threads.release_tcs(&mut self.m, victim);
                    debug_assert!(self.threads.get(cur).tcs.is_some());
                }
            }
            self.max_occupancy = self.max_occupancy.max(self.threads.occupancy());
            if !self.threads.get(cur).entered {
                let slot = self.threads.get(cur).tcs.unwrap();
                self.m.eenter(slot, self.m.cfg.entry_va).expect("fixed entry");
                self.stats.ecalls += 1;
                self.threads.get_mut(cur).entered = true;
            }
            self.m.set_active_tcs(self.threads.get(cur).tcs);
            debug_assert!(self.threads.occupancy() <= self.m.cfg.tcs_count);

            if let Some(sig) = self.threads.get_mut(cur).pending.pop_front() {
                let pc = self.threads.get(cur).ctx.pc;
                self.deliver(cur, sig, pc, false);
                continue;
            }
            self.step_translated(cur);
        }
        self.trace.status = self.status.unwrap_or(RunStatus::Deadlocked);
        self.trace.retired = self.retired_global;
        self.trace.stdout = self.host.vfs.stdout.clone();
        self.trace.stderr = self.host.vfs.stderr.clone();
        self.trace.clone()
    }

    fn current_thread(&mut self) -> Option<Tid> {
        if let Some(t) = self.sched.current {
            if self.threads.map.get(&t).map(|th| th.runnable()) == Some(true) {
                return Some(t);
            }
        }
        let runnable = self.threads.runnable_tids();
        self.sched.pick(&runnable)
    }

    fn retire(&mut self, tid: Tid) {
        let th = self.threads.get_mut(tid);
        th.retired += 1;
        let tr = th.retired;
        self.retired_global += 1;
        self.host.tick(1);
        if self.retired_global >= self.fuel {
            self.status = Some(RunStatus::TimedOut);
            return;
        }
        for action in self.host.due_actions(tid, tr, self.retired_global) {
            match action {
                ScriptAction::Signal(sig) => self.threads.get_mut(tid).pending.push_back(sig),
                ScriptAction::Adversary(op) => self.apply_adv_op(op),
            }
        }
        if self.sched.on_retire() {
            self.sched.deschedule();
        }
    }

    fn apply_adv_op(&mut self, op: AdvOp) {
        match op {
            AdvOp::Toctou => self.host.adversary = AdversaryMode::ToctouMutate,
            AdvOp::IagoNext => self.host.adversary = AdversaryMode::IagoReturn(IagoKind::ZeroAddr),
            AdvOp::CloneArgMutate => self.host.adversary = AdversaryMode::CloneArgMutate,
            AdvOp::LockFlip => {
                // Attack the lock manager's guard word directly. It is
                // private, so this faults and is counted.
                let guard = self.locks_guard_va();
                let _ = self.host.adversary_poke(&mut self.m, guard, 0);
            }
        }
    }

    fn locks_guard_va(&self) -> u64 {
        // The guard is the first metadata word handed to the manager;
        // poking anywhere in the metadata arena demonstrates the same
        // containment, so the arena base serves as the probe target.
        self.m.cfg.enclave_base_va + META_ARENA_OFF
    }

    // --- translated execution ---

    fn step_translated(&mut self, cur: Tid) {
        let pc = self.threads.get(cur).ctx.pc;
        let cursor = self.threads.get(cur).cursor;
        let (start, idx) = match cursor {
            Some((s, i, g))
                if g == self.cache.generation
                    && s + (i as u64) * INST_LEN == pc
                    && self.cache.block(s).map_or(false, |b| i < b.instrs.len()) =>
            {
                (s, i)
            }
            _ => {
                let Engine { mv, m, cache, .. } = self;
                let fetch = |va: u64| -> Result<[u8; 8], MemFault> {
                    let actual = mv.check_app_access(va, INST_LEN, AccessKind::Fetch)?;
                    let mut b = [0u8; 8];
                    m.read(Accessor::Engine, actual, &mut b)
                        .map_err(|_| MemFault { va, kind: MemFaultKind::Unmapped })?;
                    Ok(b)
                };
                match cache.ensure(pc, fetch) {
                    Ok(_) => {}
                    Err(CacheErr::CacheTooSmall { need, bb_max }) => {
                        self.m.abort();
                        self.abort_reason =
                            Some(format!("code cache too small: block needs {need} bytes, budget {bb_max}"));
                        self.status = Some(RunStatus::Aborted);
                        return;
                    }
                    Err(CacheErr::Fetch(fault)) => {
                        self.on_fault(cur, GuestFault::Mem { pc, fault });
                        return;
                    }
                }
                self.cache.on_dispatch(pc);
                (pc, 0usize)
            }
        };

        let (instr, block_len) = {
            let b = self.cache.block(start).expect("just ensured");
            (b.instrs.get(idx).copied(), b.instrs.len())
        };
        let instr = match instr {
            Some(i) => i,
            None => {
                // Block of zero decodable instructions: bad opcode at pc.
                self.threads.get_mut(cur).cursor = None;
                self.on_fault(cur, GuestFault::BadOpcode { pc });
                return;
            }
        };

        let outcome = {
            let Engine { mv, m, threads, direct_app_fetches, .. } = self;
            let th = threads.get_mut(cur);
            let mut bus = AppBus { mv, m, direct_fetches: direct_app_fetches };
            exec_instr(instr, &mut th.ctx, &mut bus)
        };

        match outcome {
            Outcome::Next => {
                let npc = self.threads.get(cur).ctx.pc;
                let want = start + ((idx + 1) as u64) * INST_LEN;
                self.threads.get_mut(cur).cursor = if npc == want && idx + 1 < block_len {
                    Some((start, idx + 1, self.cache.generation))
                } else {
                    None
                };
                self.retire(cur);
            }
            Outcome::Syscall => {
                self.threads.get_mut(cur).cursor = None;
                self.do_syscall(cur);
            }
            Outcome::Illegal(k) => {
                self.threads.get_mut(cur).cursor = None;
                self.serve_illegal(cur, k);
            }
            Outcome::Sigret => {
                self.threads.get_mut(cur).cursor = None;
                self.do_sigret(cur);
            }
            Outcome::Fault(f) => {
                self.threads.get_mut(cur).cursor = None;
                self.on_fault(cur, f);
            }
        }
    }

    // --- host transitions ---

    /// Open a host transition: reserve staging space. The caller copies
    /// arguments out, then calls `ocall_exit`.
    fn ocall_begin(&mut self, stage_len: u64) -> u64 {
        self.phase.stage();
        self.host.stage.push(stage_len).expect("staging arena exhausted")
    }

    fn ocall_exit(&mut self) {
        self.m.exit_sync();
    }

    /// The host has produced its result: account the transition and
    /// re-enter the enclave.
    fn ocall_reenter(&mut self) {
        self.phase.serve();
        self.stats.ocalls += 1;
        self.host.tick(abi::CLOCK_TICKS_PER_OCALL);
        self.m.resume_sync();
        // TLS discipline on every re-entry: the restore point is the
        // *last* chain element (the app's state), never the head.
        // The running context is authoritative; the chain is checked.
        // (Chain contents are validated in tests via tls_restore.)
    }

    /// Close the transition: zero the staging range and release it.
    fn ocall_end(&mut self) {
        let (base, len) = self.host.stage.pop().expect("stage pop balanced");
        zero_public(&mut self.m, base, len);
        self.phase.resume();
    }

    // --- syscalls ---

    fn do_syscall(&mut self, tid: Tid) {
        let ctx = self.threads.get(tid).ctx.clone();
        let n = ctx.g[0];
        let a: [u64; 6] = [ctx.g[1], ctx.g[2], ctx.g[3], ctx.g[4], ctx.g[5], ctx.g[6]];
        let digest = syscall_digest(n, &a);
        self.stats.bump(sys_name(n));

        let ret: i64 = match n {
            abi::SYS_READ => self.sys_read(a[0] as i64, a[1], a[2]),
            abi::SYS_WRITE => self.sys_write(a[0] as i64, a[1], a[2]),
            abi::SYS_OPEN => self.sys_open(a[0], a[1]),
            abi::SYS_CLOSE => self.sys_close(a[0] as i64),
            abi::SYS_FSYNC => self.sys_fsync(a[0] as i64),
            abi::SYS_GETTIME => self.sys_gettime(),
            abi::SYS_GETPID => self.sys_getpid(),
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
                let _ = self.threads.release_tcs(&mut self.m, tid);
                return;
            }
            abi::SYS_FUTEX => match self.sys_futex(tid, a[0], a[1], a[2]) {
                Some(r) => r,
                None => {
                    // Blocked: the thread leaves the enclave so its entry
                    // slot can serve others; the sys re-executes on
                    // wakeup, no event yet.
                    let _ = self.threads.release_tcs(&mut self.m, tid);
                    self.sched.deschedule();
                    return;
                }
            },
            abi::SYS_SIGACTION => self.sys_sigaction(a[0], a[1]),
            abi::SYS_ARCHCTL => self.sys_archctl(tid, a[0], a[1]),
            _ => {
                self.stats.unsupported += 1;
                abi::E_NOSYS
            }
        };
        self.trace.record_syscall(tid, n, sys_name(n), digest, ret);
        let th = self.threads.get_mut(tid);
        th.ctx.g[0] = ret as u64;
        th.ctx.pc += INST_LEN;
        self.retire(tid);
    }

    fn sys_read(&mut self, fd: i64, buf: u64, len: u64) -> i64 {
        if len > MAX_MARSHAL {
            return abi::E_INVAL;
        }
        if app_check(&self.mv, buf, len, AccessKind::Write).is_err() {
            return abi::E_FAULT;
        }
        let base = self.ocall_begin(len);
        self.ocall_exit();
        let (raw_ret, staged_len) = {
            self.host.serve_count += 1;
            match self.host.vfs.read(fd, len) {
                Ok(data) => {
                    let n = data.len() as u64;
                    let _ = self.host.host_write(&mut self.m, base, &data);
                    let ret = if self.host.adversary == AdversaryMode::IagoReturn(IagoKind::OversizedLen) {
                        self.host.adv_stats.iago_injections += 1;
                        len as i64 + 9
                    } else {
                        n as i64
                    };
                    (ret, n)
                }
                Err(e) => (e, 0),
            }
        };
        self.ocall_reenter();
        if self.host.adversary == AdversaryMode::ToctouMutateStress {
            // Worst-case interleaving: the staged bytes change between
            // the OS return and our copy-in. The snapshot below is the
            // only read we will ever do, so this corrupts data but can
            // never desynchronize check from use.
            let (h, m) = (&mut self.host, &mut self.m);
            h.adversary_mutate_range(m, base, staged_len);
        }
        // Single copy-in to private memory.
        let mut snapshot = vec![0u8; staged_len as usize];
        self.m
            .read(Accessor::Engine, base, &mut snapshot)
            .expect("staging is engine-readable");
        self.phase.copy_in();
        self.stats.bytes_copied_in += staged_len;
        let ret = match gateway::sanitize_count(raw_ret, len, staged_len) {
            Ok(()) => raw_ret,
            Err(_) => {
                self.stats.sanitize_rejects += 1;
                abi::E_INVAL
            }
        };
        self.phase.sanitize();
        if ret > 0 {
            app_write(&self.mv, &mut self.m, buf, &snapshot[..ret as usize])
                .expect("range was checked before the call");
        }
        if self.host.adversary == AdversaryMode::ToctouMutate {
            // Classic window: after our copy-in, before guest resume. A
            // double-fetch gateway would re-read corrupted bytes here;
            // this one never looks at the staging area again.
            let (h, m) = (&mut self.host, &mut self.m);
            h.adversary_mutate_range(m, base, staged_len);
        }
        self.ocall_end();
        ret
    }

    fn sys_write(&mut self, fd: i64, buf: u64, len: u64) -> i64 {
        if len > MAX_MARSHAL {
            return abi::E_INVAL;
        }
        let data = match app_read(&self.mv, &mut self.m, buf, len) {
            Ok(d) => d,
            Err(_) => return abi::E_FAULT,
        };
        let base = self.ocall_begin(len);
        self.m
            .write(Accessor::Engine, base, &data)
            .expect("staging is engine-writable");
        self.stats.bytes_staged_out += len;
        self.ocall_exit();
        let raw_ret = {
            self.host.serve_count += 1;
            let staged = self.host.host_read(&mut self.m, base, len as usize).unwrap_or_default();
            self.host.vfs.write(fd, &staged)
        };
        self.ocall_reenter();
        self.phase.copy_in();
        let ret = self.sanitize_plain(raw_ret);
        self.phase.sanitize();
        self.ocall_end();
        ret
    }

    fn sanitize_plain(&mut self, raw: i64) -> i64 {
        match gateway::sanitize_ret(raw) {
            Ok(()) => raw,
            Err(_) => {
                self.stats.sanitize_rejects += 1;
                abi::E_INVAL
            }
        }
    }

    fn sys_open(&mut self, path_va: u64, flags: u64) -> i64 {
        let path = match app_read_cstr(&self.mv, &mut self.m, path_va) {
            Some(p) => p,
            None => return abi::E_FAULT,
        };
        let base = self.ocall_begin(path.len() as u64);
        self.m
            .write(Accessor::Engine, base, path.as_bytes())
            .expect("staging is engine-writable");
        self.stats.bytes_staged_out += path.len() as u64;
        self.ocall_exit();
        let raw_ret = {
            self.host.serve_count += 1;
            let staged = self
                .host
                .host_read(&mut self.m, base, path.len())
                .unwrap_or_default();
            let p = String::from_utf8_lossy(&staged).to_string();
            self.host.vfs.open(&p, flags)
        };
        self.ocall_reenter();
        self.phase.copy_in();
        let ret = self.sanitize_plain(raw_ret);
        self.phase.sanitize();
        self.ocall_end();
        ret
    }

    fn sys_close(&mut self, fd: i64) -> i64 {
        self.ocall_begin(0);
        self.ocall_exit();
        let raw = {
            self.host.serve_count += 1;
            self.host.vfs.close(fd)
        };
        self.ocall_reenter();
        self.phase.copy_in();
        let ret = self.sanitize_plain(raw);
        self.phase.sanitize();
        self.ocall_end();
        ret
    }

    fn sys_fsync(&mut self, fd: i64) -> i64 {
        // Dirty private pages of this file's mappings go to their public
        // twins first, then the host flushes twins to the VFS.
        let flush = if let Some(path) = self.host.vfs.path_of(fd) {
            self.mv.sync_back_path(&mut self.m, &path).unwrap_or_default()
        } else {
            Vec::new()
        };
        self.ocall_begin(0);
        self.ocall_exit();
        let raw = {
            self.host.serve_count += 1;
            for s in &flush {
                let bytes = self
                    .host
                    .host_read(&mut self.m, s.twin_va, s.len as usize)
                    .unwrap_or_default();
                self.host.vfs.write_at(&s.path, s.offset, &bytes);
            }
            self.host.vfs.fsync(fd)
        };
        self.ocall_reenter();
        self.phase.copy_in();
        let ret = self.sanitize_plain(raw);
        self.phase.sanitize();
        self.ocall_end();
        ret
    }

    fn sys_gettime(&mut self) -> i64 {
        self.ocall_begin(0);
        self.ocall_exit();
        let raw = {
            self.host.serve_count += 1;
            self.host.clock as i64
        };
        self.ocall_reenter();
        self.phase.copy_in();
        let ret = self.sanitize_plain(raw);
        self.phase.sanitize();
        self.ocall_end();
        ret
    }

    fn sys_getpid(&mut self) -> i64 {
        self.ocall_begin(0);
        self.ocall_exit();
        let raw = {
            self.host.serve_count += 1;
            abi::PID as i64
        };
        self.ocall_reenter();
        self.phase.copy_in();
        let ret = self.sanitize_plain(raw);
        self.phase.sanitize();
        self.ocall_end();
        ret
    }

    fn sys_mmap(&mut self, len: u64, prot: u64, flags: u64, fd: i64, off: u64) -> i64 {
        if len == 0 {
            return abi::E_INVAL;
        }
        let alen = abi::page_align_up(len);
        if self.mv.mmap_cursor() + alen > abi::MMAP_ZONE_BASE + abi::MMAP_ZONE_SIZE {
            return abi::E_NOMEM;
        }
        let fd_path = if flags & abi::MAP_FILE != 0 {
            match self.host.vfs.path_of(fd) {
                Some(p) => Some((p, off)),
                None => return abi::E_BADF,
            }
        } else {
            None
        };
        self.ocall_begin(0);
        self.ocall_exit();
        let engine_base = self.m.cfg.enclave_base_va;
        let raw = {
            let (h, m) = (&mut self.host, &mut self.m);
            h.serve_mmap(m, alen, fd_path.as_ref().map(|(p, o)| (p.as_str(), *o)), engine_base)
        };
        self.ocall_reenter();
        self.phase.copy_in();
        let ret = if raw < 0 {
            let r = self.sanitize_plain(raw);
            self.phase.sanitize();
            r
        } else {
            let twin = raw as u64;
            let pb = crate::machine::PUBLIC_BASE;
            let ps = self.m.cfg.public_size;
            let conflict = |a: u64, l: u64| {
                // Staging arena and every tracked twin are off limits.
                let stage_hit = a < STAGE_BASE + STAGE_SIZE && a + l > STAGE_BASE;
                let twin_hit = self.mv.records().any(|(_, r)| {
                    r.public_twin
                        .map_or(false, |t| t < a + l && a < t + r.len)
                });
                stage_hit || twin_hit
            };
            match gateway::sanitize_host_addr(twin, alen, pb, ps, conflict) {
                Err(_) => {
                    self.stats.sanitize_rejects += 1;
                    self.phase.sanitize();
                    abi::E_INVAL
                }
                Ok(()) => {
                    self.phase.sanitize();
                    let backing = match &fd_path {
                        Some((p, o)) => Backing::File { path: p.clone(), offset: *o },
                        None => Backing::Anon,
                    };
                    match self.mv.handle_mmap(
                        &mut self.m,
                        alen,
                        Perms::from_prot(prot),
                        backing,
                        Some(twin),
                    ) {
                        Ok(orig) => {
                            self.stats.bytes_copied_in += alen;
                            orig as i64
                        }
                        Err(MemErr::OutOfReservedMemory) => abi::E_NOMEM,
                        Err(_) => abi::E_NOMEM,
                    }
                }
            }
        };
        self.ocall_end();
        ret
    }

    fn sys_munmap(&mut self, addr: u64, len: u64) -> i64 {
        if !abi::is_page_aligned(addr) || len == 0 {
            return abi::E_INVAL;
        }
        let (flush, freed) = match self.mv.handle_munmap(&mut self.m, addr, abi::page_align_up(len)) {
            Ok(v) => v,
            Err(MemErr::Layout(_)) => return abi::E_INVAL,
            Err(_) => return abi::E_INVAL,
        };
        self.ocall_begin(0);
        self.ocall_exit();
        {
            self.host.serve_count += 1;
            for s in &flush {
                let bytes = self
                    .host
                    .host_read(&mut self.m, s.twin_va, s.len as usize)
                    .unwrap_or_default();
                self.host.vfs.write_at(&s.path, s.offset, &bytes);
            }
            for &(twin, tlen) in &freed {
                self.host.serve_munmap(twin, tlen);
            }
        }
        self.ocall_reenter();
        self.phase.copy_in();
        self.phase.sanitize();
        self.ocall_end();
        0
    }

    fn sys_mprotect(&mut self, addr: u64, len: u64, prot: u64) -> i64 {
        if !abi::is_page_aligned(addr) || len == 0 {
            return abi::E_INVAL;
        }
        match self.mv.handle_mprotect(&mut self.m, addr, len, Perms::from_prot(prot)) {
            Ok(()) => {
                // Cached blocks may alias relocated or de-executed
                // pages; drop everything.
                self.cache.flush_all();
                for th in self.threads.map.values_mut() {
                    th.cursor = None;
                }
                0
            }
            Err(MemErr::Unmapped) | Err(MemErr::StashExhausted) => abi::E_NOMEM,
            Err(_) => abi::E_NOMEM,
        }
    }

    fn sys_brk(&mut self, new_top: u64) -> i64 {
        match self.mv.handle_brk(&mut self.m, new_top) {
            Ok(top) => top as i64,
            Err(_) => self.mv.brk_top() as i64,
        }
    }

    fn sys_msync(&mut self, addr: u64, len: u64) -> i64 {
        if !abi::is_page_aligned(addr) || len == 0 {
            return abi::E_INVAL;
        }
        let flush = self
            .mv
            .sync_back_range(&mut self.m, addr, abi::page_align_up(len))
            .unwrap_or_default();
        self.ocall_begin(0);
        self.ocall_exit();
        {
            self.host.serve_count += 1;
            for s in &flush {
                let bytes = self
                    .host
                    .host_read(&mut self.m, s.twin_va, s.len as usize)
                    .unwrap_or_default();
                self.host.vfs.write_at(&s.path, s.offset, &bytes);
            }
        }
        self.ocall_reenter();
        self.phase.copy_in();
        self.phase.sanitize();
        self.ocall_end();
        0
    }

    fn sys_clone(&mut self, entry: u64, stack_top: u64, ctid_va: u64) -> i64 {
        if app_check(&self.mv, entry, INST_LEN, AccessKind::Fetch).is_err() {
            return abi::E_INVAL;
        }
        if app_check(&self.mv, stack_top.wrapping_sub(8), 8, AccessKind::Write).is_err() {
            return abi::E_INVAL;
        }
        if ctid_va != 0 && app_check(&self.mv, ctid_va, 8, AccessKind::Write).is_err() {
            return abi::E_FAULT;
        }
        let mut ctx = GuestContext { pc: entry, ..Default::default() };
        ctx.set_sp(stack_top);
        let tid = self.threads.spawn(ctx, ctid_va);

        self.ocall_begin(0);
        self.stats.bytes_staged_out += 24;
        self.ocall_exit();
        let rec = {
            let (h, m) = (&mut self.host, &mut self.m);
            h.serve_clone(m, tid, entry, stack_top, ctid_va)
        };
        self.ocall_reenter();
        let rec = match rec {
            Some(r) => r,
            None => {
                self.phase.copy_in();
                self.phase.sanitize();
                self.ocall_end();
                self.threads.remove(tid);
                return abi::E_AGAIN;
            }
        };
        // Copy the public argument record back and compare it with the
        // private originals: the host starts the OS thread from the
        // public copy, so any mutation there means the child would run
        // with attacker-chosen entry state.
        let mut pub_args = [0u8; 24];
        self.m
            .read(Accessor::Engine, rec.args_va, &mut pub_args)
            .expect("service record is public");
        self.phase.copy_in();
        self.stats.bytes_copied_in += 24;
        let pe = u64::from_le_bytes(pub_args[0..8].try_into().unwrap());
        let ps = u64::from_le_bytes(pub_args[8..16].try_into().unwrap());
        let pc_ = u64::from_le_bytes(pub_args[16..24].try_into().unwrap());
        let ret = if (pe, ps, pc_) != (entry, stack_top, ctid_va) {
            self.stats.sanitize_rejects += 1;
            self.phase.sanitize();
            self.threads.remove(tid);
            let (h, m) = (&mut self.host, &mut self.m);
            h.serve_thread_exit(m, tid);
            abi::E_AGAIN
        } else {
            self.phase.sanitize();
            if ctid_va != 0 {
                app_write(&self.mv, &mut self.m, ctid_va, &tid.to_le_bytes())
                    .expect("ctid range was checked");
            }
            tid as i64
        };
        self.ocall_end();
        ret
    }

    fn thread_exit(&mut self, tid: Tid, code: i64) {
        {
            let th = self.threads.get_mut(tid);
            th.state = VState::Done;
        }
        if tid == MAIN_TID {
            self.main_exit = code;
        }
        let ctid = self.threads.get(tid).ctid_va;
        if ctid != 0 {
            let _ = app_write(&self.mv, &mut self.m, ctid, &0u64.to_le_bytes());
            let woken = self.locks.futex_wake(&mut self.m, ctid, u64::MAX).unwrap_or_default();
            for t in woken {
                self.threads.get_mut(t).state = VState::Runnable;
            }
        }
        self.ocall_begin(0);
        self.ocall_exit();
        {
            let (h, m) = (&mut self.host, &mut self.m);
            h.serve_thread_exit(m, tid);
        }
        self.ocall_reenter();
        self.phase.copy_in();
        self.phase.sanitize();
        self.ocall_end();
        // The slot goes back to the pool; a parked thread is promoted in
        // the same step so the slot never sits idle under demand.
        let _ = self.threads.release_tcs(&mut self.m, tid);
        self.sched.deschedule();
    }

    /// None = blocked (re-executes on wake), Some(ret) = completed.
    fn sys_futex(&mut self, tid: Tid, addr: u64, op: u64, val: u64) -> Option<i64> {
        let actual = match self.mv.check_app_access(addr, 8, AccessKind::Write) {
            Ok(a) => a,
            Err(_) => return Some(abi::E_FAULT),
        };
        match op {
            abi::FUTEX_WAIT => match self.locks.futex_wait(&mut self.m, tid, addr, actual, val) {
                Ok(WaitOutcome::Ready(r)) => Some(r),
                Ok(WaitOutcome::Blocked) => {
                    self.threads.get_mut(tid).state = VState::FutexWait { addr };
                    None
                }
                Err(_) => Some(abi::E_FAULT),
            },
            abi::FUTEX_WAKE => {
                let woken = self.locks.futex_wake(&mut self.m, addr, val).unwrap_or_default();
                let n = woken.len();
                for t in woken {
                    self.threads.get_mut(t).state = VState::Runnable;
                }
                Some(n as i64)
            }
            abi::FUTEX_LOCK => match self.locks.mutex_lock(&mut self.m, tid, addr, actual) {
                Ok(WaitOutcome::Ready(r)) => Some(r),
                Ok(WaitOutcome::Blocked) => {
                    self.threads.get_mut(tid).state = VState::FutexWait { addr };
                    None
                }
                Err(_) => Some(abi::E_FAULT),
            },
            abi::FUTEX_UNLOCK => match self.locks.mutex_unlock(&mut self.m, addr, actual) {
                Ok((r, woken)) => {
                    for t in woken {
                        self.threads.get_mut(t).state = VState::Runnable;
                    }
                    Some(r)
                }
                Err(_) => Some(abi::E_FAULT),
            },
            _ => Some(abi::E_INVAL),
        }
    }

    fn sys_sigaction(&mut self, signum: u64, handler: u64) -> i64 {
        if signum == 0 || signum > abi::SIGNAL_COUNT {
            return abi::E_INVAL;
        }
        self.signals.register_secondary(signum, Owner::App, handler);
        0
    }

    fn sys_archctl(&mut self, tid: Tid, op: u64, val: u64) -> i64 {
        let th = self.threads.get_mut(tid);
        match op {
            abi::ARCH_GET_SB0 => th.ctx.sb0 as i64,
            abi::ARCH_GET_SB1 => th.ctx.sb1 as i64,
            abi::ARCH_SET_SB0 => {
                th.ctx.sb0 = val;
                self.note_app_tls(tid);
                0
            }
            abi::ARCH_SET_SB1 => {
                th.ctx.sb1 = val;
                self.note_app_tls(tid);
                0
            }
            _ => abi::E_INVAL,
        }
    }

    /// First app-level segment-base write stacks the app TLS record on
    /// the chain; restore order is then [platform, engine, app] with the
    /// app record as the restore point.
    fn note_app_tls(&mut self, tid: Tid) {
        let (sb0, sb1, len) = {
            let th = self.threads.get(tid);
            (th.ctx.sb0, th.ctx.sb1, th.tls_len())
        };
        if len < crate::threads::TLS_MAX_SEGMENTS {
            let Engine { m, mv, threads, .. } = self;
            let th = threads.get_mut(tid);
            let _ = tls_push(m, mv, th, TLS_APP, sb0, sb1);
        }
        // Restore discipline check: the restore point must be the chain
        // tail, not the head.
        let Engine { m, threads, .. } = self;
        let th = threads.get(tid);
        if let Some((tag, _, _)) = tls_restore(m, th) {
            debug_assert_eq!(tag, TLS_APP);
        }
    }

    fn serve_illegal(&mut self, tid: Tid, k: IllegalKind) {
        match k {
            IllegalKind::Wrsb0 { rs } => {
                let th = self.threads.get_mut(tid);
                th.ctx.sb0 = th.ctx.g[rs as usize];
                self.note_app_tls(tid);
            }
            IllegalKind::Wrsb1 { rs } => {
                let th = self.threads.get_mut(tid);
                th.ctx.sb1 = th.ctx.g[rs as usize];
                self.note_app_tls(tid);
            }
            IllegalKind::Rdtime { rd } => {
                // Time is host state; a transition is unavoidable.
                self.ocall_begin(0);
                self.ocall_exit();
                let raw = {
                    self.host.serve_count += 1;
                    self.host.clock as i64
                };
                self.ocall_reenter();
                self.phase.copy_in();
                let v = self.sanitize_plain(raw);
                self.phase.sanitize();
                self.ocall_end();
                self.threads.get_mut(tid).ctx.g[rd as usize] = v as u64;
            }
            IllegalKind::Cpuinfo { rd } => {
                self.ocall_begin(0);
                self.ocall_exit();
                let raw = {
                    self.host.serve_count += 1;
                    abi::CPU_ID as i64
                };
                self.ocall_reenter();
                self.phase.copy_in();
                let v = self.sanitize_plain(raw);
                self.phase.sanitize();
                self.ocall_end();
                self.threads.get_mut(tid).ctx.g[rd as usize] = v as u64;
            }
        }
        self.threads.get_mut(tid).ctx.pc += INST_LEN;
        self.retire(tid);
    }

    // --- signals ---

    fn deliver(&mut self, tid: Tid, signum: u64, fault_pc: u64, sync: bool) {
        let (depth, top) = {
            let th = self.threads.get(tid);
            (th.frames.len(), th.frames.last().map(|f| f.owner))
        };
        let d = self.signals.decide(signum, sync, depth, top);
        let (owner, handler) = self.signals.handler(signum).unwrap_or((Owner::App, 0));
        self.signals.count(d);
        match d {
            Decision::Fatal => {
                self.trace.record_signal(tid, signum, 0, "fatal");
                self.status = Some(RunStatus::Killed(signum));
            }
            Decision::Ignore => {
                self.trace.record_signal(tid, signum, handler, "ignored");
            }
            Decision::Abort => {
                self.trace.record_signal(tid, signum, handler, "abort");
                self.m.abort();
                self.abort_reason = Some(format!("signal {signum} past nesting limit"));
                self.status = Some(RunStatus::Aborted);
            }
            Decision::Deliver => self.deliver_frames(tid, signum, fault_pc, sync, owner, handler),
        }
    }

    fn deliver_frames(
        &mut self,
        tid: Tid,
        signum: u64,
        fault_pc: u64,
        sync: bool,
        owner: Owner,
        handler: u64,
    ) {
        let slot = self.threads.get(tid).tcs.expect("delivering to a scheduled thread");
        let ctx = self.threads.get(tid).ctx.clone();
        // Hardware half: asynchronous exit stores the interrupted
        // context in the save area, re-entry pops it back. A full save
        // area stack means the enclave is gone.
        let reason = if sync { AexReason::Exception } else { AexReason::Signal };
        match self.m.aex(slot, reason, ctx) {
            AexOutcome::Aborted => {
                self.abort_reason = Some("state save area stack exhausted".into());
                self.status = Some(RunStatus::Aborted);
                return;
            }
            AexOutcome::Saved => {}
        }
        let saved = self.m.eresume(slot).expect("frame just pushed");
        self.stats.ecalls += 1;

        // The context record lives on the private per-signal page; the
        // host never sees fault addresses or register state.
        let record_va = abi::SIGSTACK_ZONE_BASE + signum * PAGE_SIZE;
        let mut rec = [0u8; abi::SIGCTX_SIZE as usize];
        rec[0..8].copy_from_slice(&signum.to_le_bytes());
        rec[8..16].copy_from_slice(&fault_pc.to_le_bytes());
        rec[16..24].copy_from_slice(&fault_pc.to_le_bytes());
        app_write(&self.mv, &mut self.m, record_va, &rec).expect("signal pages are mapped rw");

        let th = self.threads.get_mut(tid);
        th.frames.push(VSigFrame { saved, record_va, owner });
        th.ctx.pc = handler;
        th.ctx.g[1] = signum;
        th.ctx.g[2] = record_va;
        th.ctx.set_sp(record_va + PAGE_SIZE);
        th.cursor = None;
        self.trace.record_signal(tid, signum, handler, "delivered");
    }

    fn do_sigret(&mut self, tid: Tid) {
        let frame = match self.threads.get_mut(tid).frames.pop() {
            Some(f) => f,
            None => {
                let pc = self.threads.get(tid).ctx.pc;
                self.on_fault(tid, GuestFault::BadOpcode { pc });
                return;
            }
        };
        let rec = app_read(&self.mv, &mut self.m, frame.record_va + abi::SIGCTX_RESUME_PC_OFF, 8)
            .expect("record page mapped");
        let resume = u64::from_le_bytes(rec.try_into().unwrap());
        let th = self.threads.get_mut(tid);
        // Bit-exact restoration of the interrupted context.
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

    /// Test hook: force a synchronous delivery attempt at an arbitrary
    /// claimed depth (exercises the depth-limit abort without building a
    /// triple fault by hand).
    pub fn force_sync_signal(&mut self, tid: Tid, signum: u64, claimed_depth: usize) -> &'static str {
        let top = self.threads.get(tid).frames.last().map(|f| f.owner).or(Some(Owner::App));
        let d = self.signals.decide(signum, true, claimed_depth, top);
        self.signals.count(d);
        if d == Decision::Abort {
            self.m.abort();
            self.status = Some(RunStatus::Aborted);
        }
        d.disposition()
    }
}
