//! In-enclave synchronization: futex wait/wake and a three-state mutex
//! built over the hardware spinlock. All lock words and wait queues live
//! in private memory, so the host cannot tamper with lock state and no
//! enclave exit is ever needed for synchronization.
//!
//! The deliberately insecure designs (public lock word, naive two-copy
//! protocol) live in [`foils`] and are only used as test baselines.

use std::collections::{BTreeMap, VecDeque};

use crate::abi;
use crate::machine::{Accessor, Machine, MachineError};
use crate::trace::Tid;

pub struct LockManager {
    /// Hardware spinlock word guarding manager state (region_A).
    guard_va: u64,
    /// Wait queues keyed by the *original* (app-visible) futex address.
    queues: BTreeMap<u64, VecDeque<Tid>>,
    pub ops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitOutcome {
    /// Caller must block; it will be re-run when woken.
    Blocked,
    Ready(i64),
}

impl LockManager {
    /// `guard_va` must be a private word (metadata arena).
    pub fn new(guard_va: u64) -> LockManager {
        LockManager { guard_va, queues: BTreeMap::new(), ops: 0 }
    }

    /// Serialize a manager state transition under the hardware spinlock.
    /// Execution is single-threaded, so acquisition succeeds on the first
    /// test-and-set; contention would yield to the scheduler.
    fn with_guard<T>(
        &mut self,
        m: &mut Machine,
        f: impl FnOnce(&mut Self, &mut Machine) -> T,
    ) -> Result<T, MachineError> {
        while !m.spinlock_try_acquire(self.guard_va)? {
            unreachable!("single-threaded driver never contends the guard");
        }
        let out = f(self, m);
        m.spinlock_release(self.guard_va)?;
        Ok(out)
    }

    fn check_private(&self, m: &Machine, word_actual: u64) -> Result<(), MachineError> {
        if !m.is_private(word_actual) {
            return Err(MachineError::AccessFault {
                who: Accessor::Engine,
                kind: crate::machine::AccessKind::Write,
                va: word_actual,
            });
        }
        Ok(())
    }

    /// FUTEX_WAIT: block while *word == expected.
    pub fn futex_wait(
        &mut self,
        m: &mut Machine,
        tid: Tid,
        key: u64,
        word_actual: u64,
        expected: u64,
    ) -> Result<WaitOutcome, MachineError> {
        self.check_private(m, word_actual)?;
        self.ops += 1;
        self.with_guard(m, |lm, m| {
            let cur = m.read_u64(Accessor::Engine, word_actual)?;
            if cur != expected {
                return Ok(WaitOutcome::Ready(abi::E_AGAIN));
            }
            lm.queues.entry(key).or_default().push_back(tid);
            Ok(WaitOutcome::Blocked)
        })?
    }

    /// FUTEX_WAKE: dequeue up to `n` waiters, FIFO. Returns woken tids.
    pub fn futex_wake(&mut self, m: &mut Machine, key: u64, n: u64) -> Result<Vec<Tid>, MachineError> {
        self.ops += 1;
        self.with_guard(m, |lm, _| {
            let mut woken = Vec::new();
            if let Some(q) = lm.queues.get_mut(&key) {
                while (woken.len() as u64) < n {
                    match q.pop_front() {
                        Some(t) => woken.push(t),
                        None => break,
                    }
                }
            }
            woken
        })
    }

    /// Three-state mutex lock: 0 free, 1 locked, 2 locked-contended.
    pub fn mutex_lock(
        &mut self,
        m: &mut Machine,
        tid: Tid,
        key: u64,
        word_actual: u64,
    ) -> Result<WaitOutcome, MachineError> {
        self.check_private(m, word_actual)?;
        self.ops += 1;
        self.with_guard(m, |lm, m| {
            let cur = m.read_u64(Accessor::Engine, word_actual)?;
            if cur == 0 {
                let contended = lm.queues.get(&key).map_or(false, |q| !q.is_empty());
                m.write_u64(Accessor::Engine, word_actual, if contended { 2 } else { 1 })?;
                Ok(WaitOutcome::Ready(0))
            } else {
                m.write_u64(Accessor::Engine, word_actual, 2)?;
                lm.queues.entry(key).or_default().push_back(tid);
                Ok(WaitOutcome::Blocked)
            }
        })?
    }

    /// Mutex unlock: clear the word and wake one waiter.
    pub fn mutex_unlock(
        &mut self,
        m: &mut Machine,
        key: u64,
        word_actual: u64,
    ) -> Result<(i64, Vec<Tid>), MachineError> {
        self.check_private(m, word_actual)?;
        self.ops += 1;
        self.with_guard(m, |lm, m| {
            m.write_u64(Accessor::Engine, word_actual, 0)?;
            let mut woken = Vec::new();
            if let Some(q) = lm.queues.get_mut(&key) {
                if let Some(t) = q.pop_front() {
                    woken.push(t);
                }
            }
            Ok((0i64, woken))
        })?
    }

    pub fn waiters(&self, key: u64) -> usize {
        self.queues.get(&key).map_or(0, |q| q.len())
    }
}

/// Deliberately insecure lock designs, runnable only from tests. Each
/// returns a report saying whether mutual exclusion (or copy coherence)
/// was violated under an adversary that resets lock state mid-section.
pub mod foils {
    use crate::hostsim::HostWorld;
    use crate::machine::{Accessor, Machine, MachineConfig, MachineError, PageKind, Perms, PUBLIC_BASE};

    #[derive(Debug, Clone)]
    pub struct ViolationReport {
        pub violated: bool,
        pub max_in_section: u32,
        pub detail: String,
    }

    fn machine() -> Machine {
        let c = MachineConfig::default();
        let mut m = Machine::ecreate(c.clone()).unwrap();
        let base = c.enclave_base_va;
        m.eadd_page(base, Perms::rx(), PageKind::Code, None).unwrap();
        let mut va = base + crate::abi::PAGE_SIZE;
        for _ in 0..c.tcs_count {
            m.eadd_page(va, Perms::rw(), PageKind::Tcs, None).unwrap();
            va += crate::abi::PAGE_SIZE;
            for _ in 0..c.nssa {
                m.eadd_page(va, Perms::rw(), PageKind::Ssa, None).unwrap();
                va += crate::abi::PAGE_SIZE;
            }
        }
        m.einit().unwrap();
        m.eenter(0, c.entry_va).unwrap();
        m
    }

    /// Figure-style failure (a): the lock word lives in *public* memory.
    /// Thread A takes the lock; mid-critical-section the host resets the
    /// word to 0; thread B then also "acquires" it. Both are inside the
    /// section at once.
    pub fn public_futex_demo() -> ViolationReport {
        let mut m = machine();
        let mut host = HostWorld::new(m.cfg.public_size);
        let word = PUBLIC_BASE + 0x100;
        let mut in_section = 0u32;
        let mut max_in_section = 0u32;

        // A: test-and-set from inside the enclave on the public word.
        assert_eq!(m.read_u64(Accessor::Engine, word).unwrap(), 0);
        m.write_u64(Accessor::Engine, word, 1).unwrap();
        in_section += 1;
        max_in_section = max_in_section.max(in_section);

        // Adversary: public memory is writable by the host — succeeds.
        let flipped = host.adversary_poke(&mut m, word, 0);
        assert!(flipped);

        // B: sees 0, acquires too.
        if m.read_u64(Accessor::Engine, word).unwrap() == 0 {
            m.write_u64(Accessor::Engine, word, 1).unwrap();
            in_section += 1;
            max_in_section = max_in_section.max(in_section);
        }

        ViolationReport {
            violated: max_in_section > 1,
            max_in_section,
            detail: format!(
                "public lock word at {word:#x}: host reset mid-section, {max_in_section} threads inside"
            ),
        }
    }

    /// The same scripted workload, but the lock word is private and the
    /// adversary's reset faults. Thread B keeps seeing the word held.
    pub fn manager_demo() -> ViolationReport {
        let mut m = machine();
        let mut host = HostWorld::new(m.cfg.public_size);
        let word = m.cfg.enclave_base_va + crate::abi::PAGE_SIZE; // a TCS page (rw, private)
        let mut in_section = 0u32;
        let mut max_in_section = 0u32;

        m.write_u64(Accessor::Engine, word, 1).unwrap();
        in_section += 1;
        max_in_section = max_in_section.max(in_section);

        let flipped = host.adversary_poke(&mut m, word, 0);
        assert!(!flipped, "host write to private memory must fault");
        assert!(m.host_private_faults >= 1);

        if m.read_u64(Accessor::Engine, word).unwrap() == 0 {
            in_section += 1;
            max_in_section = max_in_section.max(in_section);
        }

        ViolationReport {
            violated: max_in_section > 1,
            max_in_section,
            detail: format!(
                "private lock word: adversary reset faulted ({} host faults)",
                m.host_private_faults
            ),
        }
    }

    /// Figure-style failure (b): a naive two-copy protocol keeps a
    /// private copy and a public copy of the lock word and publishes the
    /// private state after each transition. The adversary flips the
    /// public copy between publish and the peer's check, so the copies
    /// diverge and the peer acts on stale state.
    pub fn two_copy_demo() -> ViolationReport {
        let mut m = machine();
        let mut host = HostWorld::new(m.cfg.public_size);
        let private = m.cfg.enclave_base_va + crate::abi::PAGE_SIZE;
        let public = PUBLIC_BASE + 0x200;

        // A acquires: private := 1, publish.
        m.write_u64(Accessor::Engine, private, 1).unwrap();
        m.write_u64(Accessor::Engine, public, 1).unwrap();

        // Adversary flips the public copy back to "free".
        let _ = host.adversary_poke(&mut m, public, 0);

        // B (in this naive design) trusts the public copy.
        let pub_word = m.read_u64(Accessor::Engine, public).unwrap();
        let priv_word = m.read_u64(Accessor::Engine, private).unwrap();
        let diverged = pub_word != priv_word;
        let b_entered = pub_word == 0;

        ViolationReport {
            violated: diverged && b_entered,
            max_in_section: if b_entered { 2 } else { 1 },
            detail: format!(
                "two-copy divergence: private={priv_word} public={pub_word}"
            ),
        }
    }

    #[allow(dead_code)]
    fn _ty(_: MachineError) {}
}
